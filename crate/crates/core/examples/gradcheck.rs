//! Runs the finite-difference suite, then shows that a deliberately wrong
//! gradient is caught by name.
//!
//! `cargo run --release --example gradcheck -- [primitives|unet|crf|all]`

use advdepth::gradcheck::{run_gradcheck, GradcheckOptions, Scope};

fn main() -> advdepth::Result<()> {
    let scope = Scope::parse(&std::env::args().nth(1).unwrap_or_else(|| "primitives".into()))?;
    let opts = GradcheckOptions { seeds: 5, fault: None };
    for r in run_gradcheck(scope, &opts)? {
        println!("{r}");
    }

    let faulty = GradcheckOptions { seeds: 2, fault: Some("conv2d".into()) };
    let caught: Vec<_> = run_gradcheck(Scope::Primitives, &faulty)?.into_iter().filter(|r| !r.passed).collect();
    println!("\nwith an injected fault:");
    for r in caught {
        println!("{r}");
    }
    Ok(())
}

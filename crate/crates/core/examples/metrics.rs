//! Depth error metrics, pooled over pixels, with and without a range cap.
//!
//! `cargo run --example metrics`

use advdepth::metrics::{human_table, valid_mask, MetricsAccumulator};
use advdepth::tensor::Tensor;

fn main() -> advdepth::Result<()> {
    let gt = Tensor::from_fn(&[1, 8, 8], |i| 1.0 + 0.15 * i as f64);
    let biased = gt.map(|d| 1.1 * d);
    let noisy = Tensor::from_fn(&[1, 8, 8], |i| gt.data()[i] + if i % 2 == 0 { 0.4 } else { -0.4 });

    let mut rows = Vec::new();
    for (name, pred) in [("exact", &gt), ("+10% bias", &biased), ("±0.4 m", &noisy)] {
        for cap in [None, Some(7.0)] {
            let mask = valid_mask(&gt, cap);
            let mut acc = MetricsAccumulator::new();
            acc.add(pred, &gt, Some(&mask))?;
            let label = match cap {
                Some(c) => format!("{name} (≤{c} m)"),
                None => name.to_string(),
            };
            rows.push((label, acc.finish()?));
        }
    }
    let refs: Vec<_> = rows.iter().map(|(l, r)| (l.as_str(), r)).collect();
    print!("{}", human_table(&refs));
    Ok(())
}

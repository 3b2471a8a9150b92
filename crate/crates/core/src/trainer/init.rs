use rand::Rng;

use crate::tensor::Tensor;

/// `(fan_in, fan_out)` for a weight tensor: `[out, in]` for dense layers and
/// `[out, in, k, k]` for convolutions (receptive field folded into both fans).
pub fn fans(shape: &[usize]) -> (usize, usize) {
    match shape {
        [n] => (*n, *n),
        [out, inp] => (*inp, *out),
        [out, inp, rest @ ..] => {
            let field: usize = rest.iter().product();
            (inp * field, out * field)
        }
        [] => (1, 1),
    }
}

/// Xavier/Glorot uniform initialisation: `U(−a, a)` with
/// `a = √(6 / (fan_in + fan_out))`, i.e. variance `2 / (fan_in + fan_out)`.
pub fn xavier_init(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let (fan_in, fan_out) = fans(shape);
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn variance_matches_glorot_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        // four 50×50 draws: fan_in = fan_out = 50, 10⁴ samples
        let mut all = Vec::new();
        for _ in 0..4 {
            all.extend_from_slice(xavier_init(&[50, 50], &mut rng).data());
        }
        let n = all.len() as f64;
        let mean = all.iter().sum::<f64>() / n;
        let var = all.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        assert!((var - 0.02).abs() < 0.002, "variance {var}");
        assert!(mean.abs() < 3.0 * 0.02f64.sqrt() / n.sqrt(), "mean {mean}");
    }

    #[test]
    fn same_seed_same_weights() {
        let a = xavier_init(&[8, 3, 4, 4], &mut ChaCha8Rng::seed_from_u64(1));
        let b = xavier_init(&[8, 3, 4, 4], &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(a, b);
    }

    #[test]
    fn conv_fans() {
        assert_eq!(fans(&[64, 3, 4, 4]), (48, 1024));
    }
}

//! Procedural rooms: a floor-to-far-wall depth ramp with rectangular objects
//! standing on it. Appearance carries depth cues through shading, apparent
//! size and ground-contact height.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::DepthSample;
use crate::tensor::Tensor;

const BACKGROUND_ALBEDO: [f64; 3] = [0.55, 0.6, 0.65];
const TEXTURE_NOISE: f64 = 0.03;

/// One rectangle of a synthetic scene, in pixel coordinates (half-open).
#[derive(Clone, Debug, PartialEq)]
pub struct SceneObject {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
    pub depth: f64,
    pub albedo: [f64; 3],
}

impl SceneObject {
    pub fn covers(&self, y: usize, x: usize) -> bool {
        (self.top..self.bottom).contains(&y) && (self.left..self.right).contains(&x)
    }
}

fn shading(d: f64, d_min: f64) -> f64 {
    0.2 + 0.8 * d_min / d
}

/// Rounds to the nearest f32 inside `[lo, hi]`, so PFM round trips are exact
/// and the range invariant survives.
fn f32_within(v: f64, lo: f64, hi: f64) -> f64 {
    let mut f = v as f32;
    if (f as f64) > hi {
        f = f.next_down();
    }
    if (f as f64) < lo {
        f = f.next_up();
    }
    f as f64
}

/// Background depth of row `y`: `d_max` at the top falling to `d_min` at the
/// bottom.
fn ramp(y: usize, size: usize, d_min: f64, d_max: f64) -> f64 {
    let t = if size > 1 { y as f64 / (size - 1) as f64 } else { 1.0 };
    f32_within(d_max + (d_min - d_max) * t, d_min, d_max)
}

/// Generates a square scene and the objects placed in it.
pub fn synth_scene_with_objects(
    seed: u64,
    size: usize,
    n_objects: usize,
    d_min: f64,
    d_max: f64,
) -> (DepthSample, Vec<SceneObject>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let span = d_max - d_min;
    let objects: Vec<SceneObject> = (0..n_objects)
        .map(|_| {
            let depth = f32_within(rng.random_range(d_min..=d_max), d_min, d_max);
            // feet on the floor where the ramp reaches this depth; nearer is larger
            let contact = ((d_max - depth) / span * (size - 1) as f64).round() as usize;
            let scale = d_min / depth;
            let h = ((size as f64 * scale * rng.random_range(0.4..0.9)) as usize).max(1);
            let w = ((size as f64 * scale * rng.random_range(0.2..0.6)) as usize).max(1);
            let bottom = (contact + 1).min(size);
            let left = rng.random_range(0..size);
            SceneObject {
                top: bottom.saturating_sub(h),
                left,
                bottom,
                right: (left + w).min(size),
                depth,
                albedo: [
                    rng.random_range(0.3..1.0),
                    rng.random_range(0.3..1.0),
                    rng.random_range(0.3..1.0),
                ],
            }
        })
        .collect();

    let n = size * size;
    let mut depth = vec![0.0; n];
    let mut rgb = vec![0.0; 3 * n];
    for y in 0..size {
        for x in 0..size {
            let nearest = objects
                .iter()
                .filter(|o| o.covers(y, x))
                .min_by(|a, b| a.depth.total_cmp(&b.depth));
            let (d, albedo) = match nearest {
                Some(o) => (o.depth, o.albedo),
                None => (ramp(y, size, d_min, d_max), BACKGROUND_ALBEDO),
            };
            depth[y * size + x] = d;
            let s = shading(d, d_min);
            for (c, a) in albedo.iter().enumerate() {
                let noise = rng.random_range(-TEXTURE_NOISE..TEXTURE_NOISE);
                let v = (a * s + noise).clamp(0.0, 1.0);
                // 8-bit quantisation keeps PNG round trips exact
                rgb[c * n + y * size + x] = (v * 255.0).round() / 255.0;
            }
        }
    }
    let sample = DepthSample {
        rgb: Tensor::from_parts(vec![3, size, size], rgb),
        depth: Tensor::from_parts(vec![1, size, size], depth),
        d_min,
        d_max,
    };
    (sample, objects)
}

pub fn synth_scene(seed: u64, size: usize, n_objects: usize, d_min: f64, d_max: f64) -> DepthSample {
    synth_scene_with_objects(seed, size, n_objects, d_min, d_max).0
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_scene_is_a_monotone_ramp() {
        let s = synth_scene(1, 32, 0, 0.5, 10.0);
        for x in 0..32 {
            for y in 1..32 {
                assert!(s.depth.at3(0, y, x) < s.depth.at3(0, y - 1, x));
            }
        }
        assert_eq!(s.depth.at3(0, 0, 0), 10.0);
        assert_eq!(s.depth.at3(0, 31, 5), 0.5);
        s.validate().unwrap();
    }

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(synth_scene(7, 48, 5, 0.5, 10.0), synth_scene(7, 48, 5, 0.5, 10.0));
        assert_ne!(synth_scene(7, 48, 5, 0.5, 10.0), synth_scene(8, 48, 5, 0.5, 10.0));
    }

    #[test]
    fn nearer_means_brighter_on_plain_background() {
        let s = synth_scene(0, 64, 0, 0.5, 10.0);
        let top: f64 = (0..64).map(|x| s.rgb.at3(0, 0, x)).sum();
        let bottom: f64 = (0..64).map(|x| s.rgb.at3(0, 63, x)).sum();
        assert!(bottom > top);
    }

    proptest! {
        #[test]
        fn overlaps_store_the_nearest_depth(seed in 0u64..500, n in 2usize..8) {
            let (s, objects) = synth_scene_with_objects(seed, 32, n, 0.5, 10.0);
            for y in 0..32 {
                for x in 0..32 {
                    let covering: Vec<f64> =
                        objects.iter().filter(|o| o.covers(y, x)).map(|o| o.depth).collect();
                    if covering.len() >= 2 {
                        let m = covering.iter().cloned().fold(f64::INFINITY, f64::min);
                        prop_assert_eq!(s.depth.at3(0, y, x), m);
                    }
                }
            }
            prop_assert!(s.validate().is_ok());
            prop_assert!(s.rgb.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}

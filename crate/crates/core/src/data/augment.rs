use rand::Rng;

use super::DepthSample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn flip_tensor(t: &Tensor) -> Tensor {
    let (c, h, w) = t.dims3().expect("image tensor");
    let mut out = vec![0.0; t.len()];
    for ch in 0..c {
        for y in 0..h {
            let row = (ch * h + y) * w;
            for x in 0..w {
                out[row + x] = t.data()[row + w - 1 - x];
            }
        }
    }
    Tensor::from_parts(t.shape().to_vec(), out)
}

fn crop_tensor(t: &Tensor, top: usize, left: usize, size: usize) -> Tensor {
    let (c, h, w) = t.dims3().expect("image tensor");
    let mut out = Vec::with_capacity(c * size * size);
    for ch in 0..c {
        for y in top..top + size {
            let row = (ch * h + y) * w;
            out.extend_from_slice(&t.data()[row + left..row + left + size]);
        }
    }
    Tensor::from_parts(vec![c, size, size], out)
}

/// Mirrors rgb and depth left-to-right.
pub fn flip_horizontal(sample: &DepthSample) -> DepthSample {
    DepthSample {
        rgb: flip_tensor(&sample.rgb),
        depth: flip_tensor(&sample.depth),
        d_min: sample.d_min,
        d_max: sample.d_max,
    }
}

/// Square crop with top-left corner `(top, left)`, applied to both maps.
pub fn crop(sample: &DepthSample, top: usize, left: usize, size: usize) -> Result<DepthSample> {
    let (h, w) = (sample.height(), sample.width());
    if size == 0 || top + size > h || left + size > w {
        return Err(Error::config(format!(
            "crop {size}×{size} at ({top}, {left}) does not fit a {h}×{w} image"
        )));
    }
    Ok(DepthSample {
        rgb: crop_tensor(&sample.rgb, top, left, size),
        depth: crop_tensor(&sample.depth, top, left, size),
        d_min: sample.d_min,
        d_max: sample.d_max,
    })
}

/// Random horizontal flip (probability ½) then a uniformly placed square crop,
/// both applied identically to rgb and depth.
pub fn augment(sample: &DepthSample, rng: &mut impl Rng, crop_size: usize) -> Result<DepthSample> {
    let (h, w) = (sample.height(), sample.width());
    if crop_size == 0 || crop_size > h.min(w) {
        return Err(Error::config(format!(
            "crop size {crop_size} exceeds image extent {h}×{w}"
        )));
    }
    let flipped = rng.random_bool(0.5);
    let top = rng.random_range(0..=h - crop_size);
    let left = rng.random_range(0..=w - crop_size);
    let base = if flipped { flip_horizontal(sample) } else { sample.clone() };
    crop(&base, top, left, crop_size)
}

/// Bilinear resampling with pixel-centre alignment.
pub fn resize_bilinear(t: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = t.dims3()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("resize to an empty extent"));
    }
    let src = |n_in: usize, n_out: usize, o: usize| -> (usize, usize, f64) {
        let pos = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
        let i0 = (pos.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, pos - i0 as f64)
    };
    let mut out = vec![0.0; c * out_h * out_w];
    for y in 0..out_h {
        let (y0, y1, fy) = src(h, out_h, y);
        for x in 0..out_w {
            let (x0, x1, fx) = src(w, out_w, x);
            for ch in 0..c {
                let top = t.at3(ch, y0, x0) * (1.0 - fx) + t.at3(ch, y0, x1) * fx;
                let bottom = t.at3(ch, y1, x0) * (1.0 - fx) + t.at3(ch, y1, x1) * fx;
                out[(ch * out_h + y) * out_w + x] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, out_h, out_w], out))
}

/// Nearest-neighbour resampling; never mixes values across edges.
pub fn resize_nearest(t: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = t.dims3()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("resize to an empty extent"));
    }
    let mut out = vec![0.0; c * out_h * out_w];
    for ch in 0..c {
        for y in 0..out_h {
            let sy = ((y as f64 + 0.5) * h as f64 / out_h as f64) as usize;
            for x in 0..out_w {
                let sx = ((x as f64 + 0.5) * w as f64 / out_w as f64) as usize;
                out[(ch * out_h + y) * out_w + x] = t.at3(ch, sy.min(h - 1), sx.min(w - 1));
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, out_h, out_w], out))
}

/// Resizes rgb bilinearly and depth by nearest neighbour.
pub fn resize_sample(sample: &DepthSample, out_h: usize, out_w: usize) -> Result<DepthSample> {
    Ok(DepthSample {
        rgb: resize_bilinear(&sample.rgb, out_h, out_w)?,
        depth: resize_nearest(&sample.depth, out_h, out_w)?,
        d_min: sample.d_min,
        d_max: sample.d_max,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    fn coordinate_sample(h: usize, w: usize) -> DepthSample {
        // depth encodes (row, col); rgb channel 0 encodes the same grid
        let depth = Tensor::from_fn(&[1, h, w], |i| 1.0 + (i / w) as f64 * 1000.0 + (i % w) as f64);
        let rgb = Tensor::from_fn(&[3, h, w], |i| {
            let p = i % (h * w);
            ((p / w) * 1000 + p % w) as f64 / 1e6
        });
        DepthSample { rgb, depth, d_min: 1.0, d_max: 1e6 }
    }

    #[test]
    fn flip_is_an_involution() {
        let s = coordinate_sample(5, 7);
        assert_eq!(flip_horizontal(&flip_horizontal(&s)), s);
    }

    #[test]
    fn flip_index_identity() {
        let s = coordinate_sample(4, 6);
        let f = flip_horizontal(&s);
        for r in 0..4 {
            for c in 0..6 {
                assert_eq!(f.depth.at3(0, r, c), s.depth.at3(0, r, 5 - c));
            }
        }
    }

    #[test]
    fn same_geometry_on_both_maps() {
        let s = coordinate_sample(16, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let a = augment(&s, &mut rng, 9).unwrap();
            for r in 0..9 {
                for c in 0..9 {
                    let from_depth = a.depth.at3(0, r, c) - 1.0;
                    let from_rgb = a.rgb.at3(0, r, c) * 1e6;
                    assert!((from_depth - from_rgb).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn crops_cover_every_offset() {
        // 1000 draws cannot hit all 1089 joint offsets, so coverage is checked
        // per axis (33 rows × 33 columns) with a chi-square uniformity bound
        let s = coordinate_sample(64, 64);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut tops = [0usize; 33];
        let mut lefts = [0usize; 33];
        for _ in 0..1000 {
            let a = augment(&s, &mut rng, 32).unwrap();
            // a flip reverses each row, so the smaller end value is the left edge
            let v0 = a.depth.at3(0, 0, 0) - 1.0;
            let v1 = a.depth.at3(0, 0, 31) - 1.0;
            tops[(v0 / 1000.0).floor() as usize] += 1;
            lefts[(v0.min(v1) as usize) % 1000] += 1;
        }
        let expected = 1000.0 / 33.0;
        for counts in [tops, lefts] {
            assert!(counts.iter().all(|&c| c > 0));
            let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
            // 99.9th percentile of chi-square with 32 degrees of freedom
            assert!(chi2 < 62.5, "chi2 = {chi2}");
        }
    }

    #[test]
    fn oversized_crop_is_config_error() {
        let s = coordinate_sample(8, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(augment(&s, &mut rng, 9), Err(Error::Config(_))));
    }

    #[test]
    fn nearest_resize_keeps_depth_values() {
        let s = coordinate_sample(8, 8);
        let r = resize_sample(&s, 5, 11).unwrap();
        let allowed: HashSet<u64> = s.depth.data().iter().map(|v| v.to_bits()).collect();
        assert!(r.depth.data().iter().all(|v| allowed.contains(&v.to_bits())));
        assert_eq!(r.rgb.shape(), &[3, 5, 11]);
    }
}

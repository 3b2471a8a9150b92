use std::collections::{BTreeSet, VecDeque};

use super::K;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default kernel bandwidths for the intensity and histogram similarities.
pub const DEFAULT_SIGMA: [f64; K] = [0.1, 0.1];
pub const HISTOGRAM_BINS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq)]
#[derive(Default)]
pub enum SegmentMethod {
    /// Regular blocks; deterministic and image-independent.
    #[default]
    Grid,
    /// k-means in (colour, position) space followed by a connectivity pass.
    Slic { compactness: f64, iterations: usize },
}


/// A partition of the pixel grid into superpixels plus their adjacency.
#[derive(Clone, Debug, PartialEq)]
pub struct Segmentation {
    pub height: usize,
    pub width: usize,
    /// Node index per pixel, row-major.
    pub labels: Vec<usize>,
    pub node_pixels: Vec<Vec<usize>>,
    /// 4-connected region pairs `(i, j)` with `i < j`, sorted.
    pub edges: Vec<(usize, usize)>,
}

impl Segmentation {
    fn from_labels(height: usize, width: usize, labels: Vec<usize>) -> Self {
        let n = labels.iter().max().map_or(0, |m| m + 1);
        let mut node_pixels = vec![Vec::new(); n];
        for (p, &l) in labels.iter().enumerate() {
            node_pixels[l].push(p);
        }
        let mut edges = BTreeSet::new();
        for y in 0..height {
            for x in 0..width {
                let a = labels[y * width + x];
                let mut link = |b: usize| {
                    if a != b {
                        edges.insert((a.min(b), a.max(b)));
                    }
                };
                if x + 1 < width {
                    link(labels[y * width + x + 1]);
                }
                if y + 1 < height {
                    link(labels[(y + 1) * width + x]);
                }
            }
        }
        Self { height, width, labels, node_pixels, edges: edges.into_iter().collect() }
    }

    pub fn nodes(&self) -> usize {
        self.node_pixels.len()
    }

    /// Inclusive bounding box `(top, left, bottom, right)` of node `i`.
    pub fn bounding_box(&self, i: usize) -> (usize, usize, usize, usize) {
        let w = self.width;
        self.node_pixels[i].iter().fold((usize::MAX, usize::MAX, 0, 0), |(t, l, b, r), &p| {
            (t.min(p / w), l.min(p % w), b.max(p / w), r.max(p % w))
        })
    }

    /// True where a pixel's right or lower neighbour has another label.
    pub fn boundary_mask(&self) -> Vec<bool> {
        label_boundaries(&self.labels, self.height, self.width)
    }
}

fn label_boundaries(labels: &[usize], h: usize, w: usize) -> Vec<bool> {
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            if (x + 1 < w && labels[p + 1] != labels[p]) || (y + 1 < h && labels[p + w] != labels[p]) {
                out[p] = true;
            }
        }
    }
    out
}

/// Fraction of `truth` boundary pixels lying within `tolerance` (Chebyshev
/// distance) of a boundary of `seg`.
pub fn boundary_recall(seg: &Segmentation, truth_labels: &[usize], tolerance: usize) -> f64 {
    let (h, w) = (seg.height, seg.width);
    let truth = label_boundaries(truth_labels, h, w);
    let found = seg.boundary_mask();
    let mut hit = 0;
    let mut total = 0;
    for y in 0..h {
        for x in 0..w {
            if !truth[y * w + x] {
                continue;
            }
            total += 1;
            let near = (y.saturating_sub(tolerance)..=(y + tolerance).min(h - 1)).any(|yy| {
                (x.saturating_sub(tolerance)..=(x + tolerance).min(w - 1)).any(|xx| found[yy * w + xx])
            });
            hit += near as usize;
        }
    }
    if total == 0 {
        1.0
    } else {
        hit as f64 / total as f64
    }
}

/// `rows × cols = g` with the block aspect closest to the image's.
fn grid_shape(g: usize, h: usize, w: usize) -> Option<(usize, usize)> {
    (1..=g)
        .filter(|r| g.is_multiple_of(*r) && *r <= h && g / r <= w)
        .min_by(|&a, &b| {
            let mismatch = |r: usize| ((h as f64 / r as f64) / (w as f64 / (g / r) as f64)).ln().abs();
            mismatch(a).total_cmp(&mismatch(b))
        })
        .map(|r| (r, g / r))
}

fn grid_labels(h: usize, w: usize, rows: usize, cols: usize) -> Vec<usize> {
    let mut labels = vec![0; h * w];
    for y in 0..h {
        let r = y * rows / h;
        for x in 0..w {
            labels[y * w + x] = r * cols + x * cols / w;
        }
    }
    labels
}

/// Partitions `image` (`[3, H, W]`, any value range) into about `g_target`
/// superpixels. Grid segmentation yields exactly `g_target` nodes when it
/// factors into the image; SLIC may return a few more or fewer.
pub fn segment_superpixels(image: &Tensor, g_target: usize, method: SegmentMethod) -> Result<Segmentation> {
    let (c, h, w) = image.dims3()?;
    if g_target < 1 {
        return Err(Error::config("superpixel count must be at least 1"));
    }
    if g_target > h * w {
        return Err(Error::config(format!("{g_target} superpixels exceed {} pixels", h * w)));
    }
    match method {
        SegmentMethod::Grid => {
            let (rows, cols) = grid_shape(g_target, h, w).ok_or_else(|| {
                Error::config(format!("{g_target} grid cells do not fit a {h}×{w} image"))
            })?;
            Ok(Segmentation::from_labels(h, w, grid_labels(h, w, rows, cols)))
        }
        SegmentMethod::Slic { compactness, iterations } => {
            if !(compactness > 0.0) {
                return Err(Error::config("SLIC compactness must be positive"));
            }
            Ok(slic(image, c, h, w, g_target, compactness, iterations))
        }
    }
}

fn slic(image: &Tensor, c: usize, h: usize, w: usize, g: usize, m: f64, iterations: usize) -> Segmentation {
    let n = h * w;
    let step = ((n as f64 / g as f64).sqrt()).max(1.0);
    let colour = |p: usize| -> Vec<f64> { (0..c).map(|ch| image.data()[ch * n + p]).collect() };

    // seeds on a regular grid: [y, x, colour...]
    let (rows, cols) = grid_shape(g, h, w).unwrap_or((1, g.min(w)));
    let mut centres: Vec<Vec<f64>> = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for q in 0..cols {
            let y = ((r as f64 + 0.5) * h as f64 / rows as f64) as usize;
            let x = ((q as f64 + 0.5) * w as f64 / cols as f64) as usize;
            let mut v = vec![y as f64, x as f64];
            v.extend(colour(y * w + x));
            centres.push(v);
        }
    }

    let spatial = (m / step).powi(2);
    let mut labels = vec![0usize; n];
    for _ in 0..iterations.max(1) {
        let mut best = vec![f64::INFINITY; n];
        let reach = (2.0 * step).ceil() as isize;
        for (k, ctr) in centres.iter().enumerate() {
            let (cy, cx) = (ctr[0].round() as isize, ctr[1].round() as isize);
            for y in (cy - reach).max(0)..(cy + reach + 1).min(h as isize) {
                for x in (cx - reach).max(0)..(cx + reach + 1).min(w as isize) {
                    let p = y as usize * w + x as usize;
                    let dc: f64 = (0..c).map(|ch| (image.data()[ch * n + p] - ctr[2 + ch]).powi(2)).sum();
                    let ds = (y as f64 - ctr[0]).powi(2) + (x as f64 - ctr[1]).powi(2);
                    let d = dc + spatial * ds;
                    if d < best[p] {
                        best[p] = d;
                        labels[p] = k;
                    }
                }
            }
        }
        let mut sums = vec![vec![0.0; 2 + c]; centres.len()];
        let mut counts = vec![0usize; centres.len()];
        for p in 0..n {
            let s = &mut sums[labels[p]];
            s[0] += (p / w) as f64;
            s[1] += (p % w) as f64;
            for ch in 0..c {
                s[2 + ch] += image.data()[ch * n + p];
            }
            counts[labels[p]] += 1;
        }
        for ((ctr, s), &cnt) in centres.iter_mut().zip(&sums).zip(&counts) {
            if cnt > 0 {
                *ctr = s.iter().map(|v| v / cnt as f64).collect();
            }
        }
    }
    let min_size = ((step * step) / 4.0).max(1.0) as usize;
    Segmentation::from_labels(h, w, enforce_connectivity(&labels, h, w, min_size))
}

/// Relabels 4-connected components consecutively and folds components smaller
/// than `min_size` into the previously labelled neighbour.
fn enforce_connectivity(labels: &[usize], h: usize, w: usize, min_size: usize) -> Vec<usize> {
    const UNSET: usize = usize::MAX;
    let mut out = vec![UNSET; h * w];
    let mut next = 0;
    let mut queue = VecDeque::new();
    let mut members = Vec::new();
    let neighbours = |p: usize| {
        let (y, x) = (p / w, p % w);
        [
            (x > 0).then(|| p - 1),
            (x + 1 < w).then(|| p + 1),
            (y > 0).then(|| p - w),
            (y + 1 < h).then(|| p + w),
        ]
        .into_iter()
        .flatten()
    };
    for start in 0..h * w {
        if out[start] != UNSET {
            continue;
        }
        let adjacent = neighbours(start).map(|q| out[q]).find(|&l| l != UNSET);
        members.clear();
        out[start] = next;
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            members.push(p);
            for q in neighbours(p) {
                if out[q] == UNSET && labels[q] == labels[start] {
                    out[q] = next;
                    queue.push_back(q);
                }
            }
        }
        match adjacent {
            Some(l) if members.len() < min_size => {
                for &p in &members {
                    out[p] = l;
                }
            }
            _ => next += 1,
        }
    }
    out
}

fn grayscale(image: &Tensor) -> Result<Vec<f64>> {
    let (c, h, w) = image.dims3()?;
    let n = h * w;
    let d = image.data();
    Ok(match c {
        1 => d.to_vec(),
        3 => (0..n).map(|p| 0.299 * d[p] + 0.587 * d[n + p] + 0.114 * d[2 * n + p]).collect(),
        _ => return Err(Error::Dimension { op: "grayscale", axis: "channel", expected: 3, actual: c }),
    })
}

/// Per-edge `[S¹, S²]`: exponential kernels on the distance between mean
/// grayscale intensities and between normalised 10-bin grayscale histograms.
/// `image` holds intensities in `[0, 1]`.
pub fn compute_similarity(image: &Tensor, seg: &Segmentation, sigma: [f64; K]) -> Result<Vec<[f64; K]>> {
    let (_, h, w) = image.dims3()?;
    if (h, w) != (seg.height, seg.width) {
        return Err(Error::Shape {
            op: "compute_similarity",
            lhs: vec![h, w],
            rhs: vec![seg.height, seg.width],
        });
    }
    if sigma.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::config("similarity bandwidths must be positive"));
    }
    let gray = grayscale(image)?;
    let mut means = Vec::with_capacity(seg.nodes());
    let mut hists = Vec::with_capacity(seg.nodes());
    for (i, pixels) in seg.node_pixels.iter().enumerate() {
        if pixels.is_empty() {
            return Err(Error::invalid(format!("superpixel {i} is empty")));
        }
        let mut hist = [0.0; HISTOGRAM_BINS];
        let mut sum = 0.0;
        for &p in pixels {
            let v = gray[p].clamp(0.0, 1.0);
            sum += v;
            hist[((v * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1)] += 1.0;
        }
        let count = pixels.len() as f64;
        means.push(sum / count);
        hists.push(hist.map(|b| b / count));
    }
    Ok(seg
        .edges
        .iter()
        .map(|&(i, j)| {
            let d_mean = (means[i] - means[j]).abs();
            let d_hist = hists[i].iter().zip(&hists[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            [(-d_mean / sigma[0]).exp(), (-d_hist / sigma[1]).exp()]
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_tone(h: usize, w: usize, edge: usize) -> (Tensor, Vec<usize>) {
        let img = Tensor::from_fn(&[3, h, w], |i| if (i % (h * w)) % w < edge { 0.1 } else { 0.9 });
        let truth = (0..h * w).map(|p| (p % w >= edge) as usize).collect();
        (img, truth)
    }

    #[test]
    fn grid_of_sixteen() {
        let seg = segment_superpixels(&Tensor::zeros(&[3, 64, 64]), 16, SegmentMethod::Grid).unwrap();
        assert_eq!(seg.nodes(), 16);
        assert_eq!(seg.edges.len(), 24);
        assert!(seg.node_pixels.iter().all(|p| p.len() == 256));
        assert_eq!(seg.bounding_box(5), (16, 16, 31, 31));
    }

    #[test]
    fn partition_is_exact() {
        for method in [SegmentMethod::Grid, SegmentMethod::Slic { compactness: 0.1, iterations: 5 }] {
            let (img, _) = two_tone(40, 24, 9);
            let seg = segment_superpixels(&img, 12, method).unwrap();
            let mut seen = vec![0; 40 * 24];
            for (i, px) in seg.node_pixels.iter().enumerate() {
                assert!(!px.is_empty());
                for &p in px {
                    seen[p] += 1;
                    assert_eq!(seg.labels[p], i);
                }
            }
            assert!(seen.iter().all(|&c| c == 1));
        }
    }

    #[test]
    fn bad_targets() {
        let img = Tensor::zeros(&[3, 4, 4]);
        assert!(matches!(segment_superpixels(&img, 0, SegmentMethod::Grid), Err(Error::Config(_))));
        assert!(matches!(segment_superpixels(&img, 17, SegmentMethod::Grid), Err(Error::Config(_))));
    }

    #[test]
    fn slic_follows_a_tone_edge() {
        // the edge at column 21 is not a grid line for 16 cells on 64×64
        let (img, truth) = two_tone(64, 64, 21);
        let seg = segment_superpixels(&img, 16, SegmentMethod::Slic { compactness: 0.1, iterations: 10 }).unwrap();
        let recall = boundary_recall(&seg, &truth, 1);
        assert!(recall > 0.9, "recall {recall}");
        let grid = segment_superpixels(&img, 16, SegmentMethod::Grid).unwrap();
        assert!(boundary_recall(&grid, &truth, 1) < 0.5);
    }

    #[test]
    fn similarity_closed_forms() {
        let (img, _) = two_tone(8, 8, 4);
        let img = img.map(|v| if v < 0.5 { 0.0 } else { 1.0 });
        let seg = segment_superpixels(&img, 4, SegmentMethod::Grid).unwrap();
        let s = compute_similarity(&img, &seg, [0.5, 0.25]).unwrap();
        for (&(i, j), s) in seg.edges.iter().zip(&s) {
            let (bi, bj) = (seg.bounding_box(i), seg.bounding_box(j));
            if (bi.1 < 4) == (bj.1 < 4) {
                assert_eq!(*s, [1.0, 1.0]);
            } else {
                // black vs white: unit intensity gap, histograms in opposite end bins
                assert!((s[0] - (-1.0f64 / 0.5).exp()).abs() < 1e-12);
                assert!((s[1] - (-(2.0f64).sqrt() / 0.25).exp()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn similarity_is_symmetric() {
        let img = Tensor::from_fn(&[3, 16, 16], |i| ((i * 37) % 101) as f64 / 100.0);
        let seg = segment_superpixels(&img, 8, SegmentMethod::Grid).unwrap();
        let s = compute_similarity(&img, &seg, DEFAULT_SIGMA).unwrap();
        // swapping the node order of the image must not change edge similarities
        let flipped = Segmentation::from_labels(16, 16, seg.labels.iter().map(|l| 7 - l).collect());
        let t = compute_similarity(&img, &flipped, DEFAULT_SIGMA).unwrap();
        for (&(i, j), s) in seg.edges.iter().zip(&s) {
            let k = flipped.edges.iter().position(|&e| e == (7 - j, 7 - i)).unwrap();
            assert_eq!(*s, t[k]);
        }
        assert!(s.iter().flatten().all(|v| *v > 0.0 && *v <= 1.0));
    }
}

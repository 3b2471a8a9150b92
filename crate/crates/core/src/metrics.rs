//! Depth-estimation error and accuracy measures, always in metric units.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Predictions at or below zero are raised to this depth (metres) before logs
/// and ratios are taken.
pub const MIN_PREDICTION: f64 = 1e-3;

pub const CSV_HEADER: &str = "rel,sq_rel,log10,rms,rms_log,delta1,delta2,delta3,n_pixels";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsReport {
    pub rel: f64,
    pub sq_rel: f64,
    pub log10: f64,
    pub rms: f64,
    pub rms_log: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub n_pixels: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    CsvRow,
    HumanTable,
}

/// Pools per-pixel sums over any number of depth maps.
#[derive(Clone, Debug, Default)]
pub struct MetricsAccumulator {
    abs_rel: f64,
    sq_rel: f64,
    log10: f64,
    sq: f64,
    sq_log: f64,
    hits: [usize; 3],
    n: usize,
    clamped: usize,
}

impl MetricsAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds the valid pixels of one map. Without a mask every pixel with a
    /// positive, finite ground truth counts.
    pub fn add(&mut self, y_est: &Tensor, y_gt: &Tensor, mask: Option<&[bool]>) -> Result<()> {
        if y_est.shape() != y_gt.shape() {
            return Err(Error::Shape {
                op: "compute_metrics",
                lhs: y_est.shape().to_vec(),
                rhs: y_gt.shape().to_vec(),
            });
        }
        if let Some(m) = mask {
            if m.len() != y_gt.len() {
                return Err(Error::Dimension {
                    op: "compute_metrics",
                    axis: "mask",
                    expected: y_gt.len(),
                    actual: m.len(),
                });
            }
        }
        for (i, (&est, &gt)) in y_est.data().iter().zip(y_gt.data()).enumerate() {
            let valid = mask.map_or(gt > 0.0 && gt.is_finite(), |m| m[i]);
            if !valid {
                continue;
            }
            if !(gt > 0.0) {
                return Err(Error::invalid(format!("ground truth {gt} at valid pixel {i} must be positive")));
            }
            if !est.is_finite() {
                return Err(Error::NonFinite(format!("prediction {est} at pixel {i}")));
            }
            let safe = if est <= 0.0 {
                self.clamped += 1;
                MIN_PREDICTION
            } else {
                est
            };
            let diff = gt - est;
            self.abs_rel += diff.abs() / gt;
            self.sq_rel += diff * diff / gt;
            self.sq += diff * diff;
            self.log10 += (gt.log10() - safe.log10()).abs();
            self.sq_log += (gt.ln() - safe.ln()).powi(2);
            let ratio = (safe / gt).max(gt / safe);
            for (k, hit) in self.hits.iter_mut().enumerate() {
                if ratio < 1.25f64.powi(k as i32 + 1) {
                    *hit += 1;
                }
            }
            self.n += 1;
        }
        Ok(())
    }

    /// Valid predictions that were non-positive and got clamped.
    pub fn clamped(&self) -> usize {
        self.clamped
    }

    pub fn n_pixels(&self) -> usize {
        self.n
    }

    pub fn finish(&self) -> Result<MetricsReport> {
        if self.n == 0 {
            return Err(Error::invalid("no valid pixels to evaluate"));
        }
        if self.clamped > 0 {
            log::warn!("{} non-positive predictions clamped to {MIN_PREDICTION} m", self.clamped);
        }
        let n = self.n as f64;
        Ok(MetricsReport {
            rel: self.abs_rel / n,
            sq_rel: self.sq_rel / n,
            log10: self.log10 / n,
            rms: (self.sq / n).sqrt(),
            rms_log: (self.sq_log / n).sqrt(),
            delta1: self.hits[0] as f64 / n,
            delta2: self.hits[1] as f64 / n,
            delta3: self.hits[2] as f64 / n,
            n_pixels: self.n,
        })
    }
}

pub fn compute_metrics(y_est: &Tensor, y_gt: &Tensor, mask: Option<&[bool]>) -> Result<MetricsReport> {
    let mut acc = MetricsAccumulator::new();
    acc.add(y_est, y_gt, mask)?;
    acc.finish()
}

/// Pixels with positive finite ground truth, optionally no deeper than `cap`.
pub fn valid_mask(y_gt: &Tensor, cap: Option<f64>) -> Vec<bool> {
    y_gt.data()
        .iter()
        .map(|&d| d > 0.0 && d.is_finite() && cap.is_none_or(|c| d <= c))
        .collect()
}

impl MetricsReport {
    fn values(&self) -> [f64; 8] {
        [
            self.rel,
            self.sq_rel,
            self.log10,
            self.rms,
            self.rms_log,
            self.delta1,
            self.delta2,
            self.delta3,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.values().iter().all(|v| v.is_finite())
    }

    pub fn to_csv_row(&self) -> String {
        let mut s = String::new();
        for v in self.values() {
            write!(s, "{v},").expect("write to String");
        }
        write!(s, "{}", self.n_pixels).expect("write to String");
        s
    }

    pub fn parse_csv_row(row: &str) -> Result<Self> {
        let fields: Vec<&str> = row.trim().split(',').collect();
        if fields.len() != 9 {
            return Err(Error::invalid(format!("metrics row needs 9 fields, got {}", fields.len())));
        }
        let mut v = [0.0; 8];
        for (slot, f) in v.iter_mut().zip(&fields) {
            *slot = f.parse().map_err(|_| Error::invalid(format!("bad metric value `{f}`")))?;
        }
        let n_pixels = fields[8]
            .parse()
            .map_err(|_| Error::invalid(format!("bad pixel count `{}`", fields[8])))?;
        Ok(Self {
            rel: v[0],
            sq_rel: v[1],
            log10: v[2],
            rms: v[3],
            rms_log: v[4],
            delta1: v[5],
            delta2: v[6],
            delta3: v[7],
            n_pixels,
        })
    }
}

const TABLE_COLUMNS: [&str; 8] = ["rel ↓", "log10 ↓", "rms ↓", "δ<1.25 ↑", "δ<1.25² ↑", "δ<1.25³ ↑", "sq_rel ↓", "rms_log ↓"];

/// Aligned text table, one labelled row per report. Leading columns follow the
/// usual benchmark order; `sq_rel` and `rms_log` are appended.
pub fn human_table(rows: &[(&str, &MetricsReport)]) -> String {
    let label_w = rows.iter().map(|(l, _)| l.chars().count()).max().unwrap_or(0).max(6);
    let mut out = format!("{:label_w$}", "method");
    for c in TABLE_COLUMNS {
        write!(out, " | {c:>10}").expect("write to String");
    }
    out.push('\n');
    for (label, r) in rows {
        write!(out, "{label:label_w$}").expect("write to String");
        for v in [r.rel, r.log10, r.rms, r.delta1, r.delta2, r.delta3, r.sq_rel, r.rms_log] {
            write!(out, " | {v:>10.4}").expect("write to String");
        }
        out.push('\n');
    }
    out
}

pub fn serialize_report(report: &MetricsReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::CsvRow => report.to_csv_row(),
        ReportFormat::HumanTable => human_table(&[("model", report)]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(v: &[f64]) -> Tensor {
        Tensor::new(&[1, 1, v.len()], v.to_vec()).unwrap()
    }

    /// Straight per-pixel loops, kept deliberately naive.
    fn oracle(est: &[f64], gt: &[f64]) -> [f64; 8] {
        let n = est.len() as f64;
        let mut r = [0.0; 8];
        for i in 0..est.len() {
            r[0] += (gt[i] - est[i]).abs() / gt[i] / n;
            r[1] += (gt[i] - est[i]) * (gt[i] - est[i]) / gt[i] / n;
            r[2] += (gt[i].log10() - est[i].log10()).abs() / n;
            r[3] += (gt[i] - est[i]) * (gt[i] - est[i]) / n;
            r[4] += (gt[i].ln() - est[i].ln()) * (gt[i].ln() - est[i].ln()) / n;
            let a = est[i] / gt[i];
            let b = gt[i] / est[i];
            let m = if a > b { a } else { b };
            if m < 1.25 {
                r[5] += 1.0 / n;
            }
            if m < 1.25 * 1.25 {
                r[6] += 1.0 / n;
            }
            if m < 1.25 * 1.25 * 1.25 {
                r[7] += 1.0 / n;
            }
        }
        r[3] = r[3].sqrt();
        r[4] = r[4].sqrt();
        r
    }

    #[test]
    fn perfect_prediction() {
        let y = t(&[1.0, 2.5, 7.0]);
        let r = compute_metrics(&y, &y, None).unwrap();
        assert_eq!(r.to_csv_row(), "0,0,0,0,0,1,1,1,3");
    }

    #[test]
    fn hand_example() {
        let r = compute_metrics(&t(&[2.0, 5.0]), &t(&[2.0, 4.0]), None).unwrap();
        assert!((r.rel - 0.125).abs() < 1e-15);
        assert!((r.rms - 0.5f64.sqrt()).abs() < 1e-15);
        assert_eq!((r.delta1, r.delta2, r.delta3), (0.5, 1.0, 1.0));
    }

    #[test]
    fn matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let gt: Vec<f64> = (0..256).map(|_| rng.random_range(0.5..10.0)).collect();
            let est: Vec<f64> = (0..256).map(|_| rng.random_range(0.3..12.0)).collect();
            let r = compute_metrics(&Tensor::new(&[1, 16, 16], est.clone()).unwrap(), &Tensor::new(&[1, 16, 16], gt.clone()).unwrap(), None).unwrap();
            let o = oracle(&est, &gt);
            for (a, b) in r.values().iter().zip(&o) {
                assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
            assert_eq!(r.n_pixels, 256);
        }
    }

    #[test]
    fn mask_and_cap() {
        let gt = t(&[2.0, 0.0, 50.0, 4.0]);
        let est = t(&[2.0, 9.0, 1.0, 4.0]);
        let r = compute_metrics(&est, &gt, Some(&valid_mask(&gt, Some(20.0)))).unwrap();
        assert_eq!(r.n_pixels, 2);
        assert_eq!(r.rel, 0.0);
        let r = compute_metrics(&est, &gt, None).unwrap();
        assert_eq!(r.n_pixels, 3);
    }

    #[test]
    fn non_positive_predictions_are_clamped_and_counted() {
        let mut acc = MetricsAccumulator::new();
        acc.add(&t(&[-1.0, 0.0, 2.0]), &t(&[1.0, 1.0, 2.0]), None).unwrap();
        assert_eq!(acc.clamped(), 2);
        let r = acc.finish().unwrap();
        assert!(r.is_finite());
        assert!((r.log10 - 2.0 * 3.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        assert!(matches!(compute_metrics(&t(&[1.0]), &t(&[1.0, 2.0]), None), Err(Error::Shape { .. })));
        assert!(compute_metrics(&t(&[1.0]), &t(&[0.0]), None).is_err());
        assert!(compute_metrics(&t(&[1.0]), &t(&[0.0]), Some(&[true])).is_err());
    }

    #[test]
    fn pooled_equals_concatenated() {
        let mut acc = MetricsAccumulator::new();
        acc.add(&t(&[1.0, 3.0]), &t(&[2.0, 3.5]), None).unwrap();
        acc.add(&t(&[5.0]), &t(&[4.0]), None).unwrap();
        let joint = compute_metrics(&t(&[1.0, 3.0, 5.0]), &t(&[2.0, 3.5, 4.0]), None).unwrap();
        assert_eq!(acc.finish().unwrap(), joint);
    }

    #[test]
    fn table_column_order() {
        let y = t(&[1.0]);
        let r = compute_metrics(&y, &y, None).unwrap();
        let table = serialize_report(&r, ReportFormat::HumanTable);
        let header = table.lines().next().unwrap();
        let pos = |s: &str| header.find(s).unwrap();
        assert!(pos("rel ↓") < pos("log10") && pos("log10") < pos("rms ↓"));
        assert!(pos("rms ↓") < pos("δ<1.25 ↑") && pos("δ<1.25 ↑") < pos("δ<1.25² ↑") && pos("δ<1.25² ↑") < pos("δ<1.25³"));
    }

    fn maps() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (1usize..64).prop_flat_map(|n| {
            (prop::collection::vec(0.1f64..20.0, n), prop::collection::vec(0.1f64..20.0, n))
        })
    }

    proptest! {
        #[test]
        fn csv_round_trip((est, gt) in maps()) {
            let r = compute_metrics(&t(&est), &t(&gt), None).unwrap();
            prop_assert_eq!(MetricsReport::parse_csv_row(&r.to_csv_row()).unwrap(), r);
        }

        #[test]
        fn deltas_are_ordered((est, gt) in maps()) {
            let r = compute_metrics(&t(&est), &t(&gt), None).unwrap();
            prop_assert!(r.delta1 <= r.delta2 && r.delta2 <= r.delta3);
        }

        #[test]
        fn scale_behaviour((est, gt) in maps(), c in 0.1f64..10.0) {
            let a = compute_metrics(&t(&est), &t(&gt), None).unwrap();
            let scaled = |v: &[f64]| t(&v.iter().map(|x| x * c).collect::<Vec<_>>());
            let b = compute_metrics(&scaled(&est), &scaled(&gt), None).unwrap();
            let close = |x: f64, y: f64| (x - y).abs() <= 1e-9 * (1.0 + x.abs().max(y.abs()));
            prop_assert!(close(a.rel, b.rel) && close(a.log10, b.log10) && close(a.rms_log, b.rms_log));
            prop_assert!(close(a.rms * c, b.rms) && close(a.sq_rel * c, b.sq_rel));
            prop_assert_eq!((a.delta1, a.delta2, a.delta3), (b.delta1, b.delta2, b.delta3));
        }

        #[test]
        fn permutation_invariance((est, gt) in maps(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let mut idx: Vec<usize> = (0..est.len()).collect();
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let pe: Vec<f64> = idx.iter().map(|&i| est[i]).collect();
            let pg: Vec<f64> = idx.iter().map(|&i| gt[i]).collect();
            let a = compute_metrics(&t(&est), &t(&gt), None).unwrap();
            let b = compute_metrics(&t(&pe), &t(&pg), None).unwrap();
            for (x, y) in a.values().iter().zip(b.values()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            prop_assert_eq!(a.n_pixels, b.n_pixels);
        }
    }
}

//! Overlap metrics on binarised predictions and the three structure-aware
//! video-benchmark measures on probability maps.
//!
//! Conventions for degenerate inputs: an empty prediction against an empty
//! ground truth scores 1 on every overlap metric; sensitivity of an empty
//! ground truth is 1. Every structure-aware measure returns exactly 1 when
//! the prediction equals the ground truth.

mod enhanced;
mod structure;
mod weighted;

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::domain::{Mask, ProbabilityMap};
use crate::error::{Error, Result};

pub use enhanced::{e_measure, e_measure_binary};
pub use structure::{s_measure, s_measure_with};
pub use weighted::{gaussian_kernel, nearest_foreground, weighted_f_beta, weighted_f_beta_with};

pub const BETA_SQ_F: f64 = 0.3;
pub const BETA_SQ_FW: f64 = 1.0;
pub const ALPHA: f64 = 0.5;

/// Pixel counts of a binary prediction against a binary ground truth.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn of(pred: &Mask, gt: &Mask) -> Result<Self> {
        gt.ensure_same_dims(pred, "metric inputs")?;
        let mut c = Confusion::default();
        for (&p, &g) in pred.pixels().iter().zip(gt.pixels()) {
            match (p == 1, g == 1) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn dice(&self) -> f64 {
        let den = 2 * self.tp + self.fp + self.fn_;
        if den == 0 {
            1.0
        } else {
            (2 * self.tp) as f64 / den as f64
        }
    }

    pub fn iou(&self) -> f64 {
        let union = self.tp + self.fp + self.fn_;
        if union == 0 {
            1.0
        } else {
            self.tp as f64 / union as f64
        }
    }

    pub fn sensitivity(&self) -> f64 {
        let g = self.tp + self.fn_;
        if g == 0 {
            1.0
        } else {
            self.tp as f64 / g as f64
        }
    }

    /// `(1 + b) P R / (b P + R)`, written over counts so that zero
    /// precision and recall give 0 and two empty masks give 1.
    pub fn f_beta(&self, beta_sq: f64) -> f64 {
        let tp = self.tp as f64;
        let den = (1.0 + beta_sq) * tp + beta_sq * self.fn_ as f64 + self.fp as f64;
        if den == 0.0 {
            1.0
        } else {
            (1.0 + beta_sq) * tp / den
        }
    }
}

pub fn dice_score(pred: &Mask, gt: &Mask) -> Result<f64> {
    Ok(Confusion::of(pred, gt)?.dice())
}

pub fn iou_score(pred: &Mask, gt: &Mask) -> Result<f64> {
    Ok(Confusion::of(pred, gt)?.iou())
}

pub fn sensitivity(pred: &Mask, gt: &Mask) -> Result<f64> {
    Ok(Confusion::of(pred, gt)?.sensitivity())
}

pub fn f_beta(pred: &Mask, gt: &Mask, beta_sq: f64) -> Result<f64> {
    Ok(Confusion::of(pred, gt)?.f_beta(beta_sq))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    pub beta_sq_f: f64,
    pub beta_sq_fw: f64,
    pub alpha: f64,
    pub threshold: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            beta_sq_f: BETA_SQ_F,
            beta_sq_fw: BETA_SQ_FW,
            alpha: ALPHA,
            threshold: crate::domain::DEFAULT_THRESHOLD,
        }
    }
}

/// One row of a report; also used for the aggregate row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub sample_id: String,
    pub dice: f64,
    pub iou: f64,
    pub sen: f64,
    pub f_beta: f64,
    pub f_beta_w: f64,
    pub s_alpha: f64,
    pub e_phi_mn: f64,
}

impl SampleMetrics {
    fn values(&self) -> [f64; 7] {
        [
            self.dice,
            self.iou,
            self.sen,
            self.f_beta,
            self.f_beta_w,
            self.s_alpha,
            self.e_phi_mn,
        ]
    }
}

pub fn sample_metrics(
    sample_id: impl Into<String>,
    pred: &ProbabilityMap,
    gt: &Mask,
    config: &MetricConfig,
) -> Result<SampleMetrics> {
    if pred.dims() != gt.dims() {
        return Err(Error::shape(
            "metric inputs",
            &[gt.height(), gt.width()],
            &[pred.height(), pred.width()],
        ));
    }
    let c = Confusion::of(&pred.threshold(config.threshold), gt)?;
    Ok(SampleMetrics {
        sample_id: sample_id.into(),
        dice: c.dice(),
        iou: c.iou(),
        sen: c.sensitivity(),
        f_beta: c.f_beta(config.beta_sq_f),
        f_beta_w: weighted_f_beta_with(pred, gt, config.beta_sq_fw),
        s_alpha: s_measure_with(pred, gt, config.alpha),
        e_phi_mn: e_measure(pred, gt),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_sample: Vec<SampleMetrics>,
    pub aggregate: SampleMetrics,
    pub config: MetricConfig,
}

pub const AGGREGATE_ID: &str = "mean";

impl MetricReport {
    /// Per-sample rows sorted by id, with unweighted means.
    pub fn from_samples(mut per_sample: Vec<SampleMetrics>, config: MetricConfig) -> Self {
        per_sample.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
        let mut sums = [0.0; 7];
        for s in &per_sample {
            for (acc, v) in sums.iter_mut().zip(s.values()) {
                *acc += v;
            }
        }
        let n = per_sample.len().max(1) as f64;
        let [dice, iou, sen, f_beta, f_beta_w, s_alpha, e_phi_mn] = sums.map(|v| v / n);
        Self {
            per_sample,
            aggregate: SampleMetrics {
                sample_id: AGGREGATE_ID.into(),
                dice,
                iou,
                sen,
                f_beta,
                f_beta_w,
                s_alpha,
                e_phi_mn,
            },
            config,
        }
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for row in self.per_sample.iter().chain(std::iter::once(&self.aggregate)) {
            out.serialize(row)?;
        }
        out.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv is utf-8"))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, csv_path: &Path, json_path: &Path) -> Result<()> {
        std::fs::write(csv_path, self.to_csv_string()?).map_err(|e| Error::io(csv_path, e))?;
        std::fs::write(json_path, self.to_json()?).map_err(|e| Error::io(json_path, e))?;
        Ok(())
    }
}

/// Scores every `(sample_id, prediction)` against the ground truth at the
/// same position.
pub fn evaluate_dataset(
    predictions: &[(String, ProbabilityMap)],
    ground_truths: &[Mask],
    config: &MetricConfig,
) -> Result<MetricReport> {
    if predictions.len() != ground_truths.len() {
        return Err(Error::shape("ground truths", &[predictions.len()], &[ground_truths.len()]));
    }
    let rows = predictions
        .iter()
        .zip(ground_truths)
        .map(|((id, p), g)| sample_metrics(id.clone(), p, g, config))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport::from_samples(rows, *config))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(h: usize, w: usize, px: &[u8]) -> Mask {
        Mask::new(h, w, px.to_vec()).unwrap()
    }

    #[test]
    fn hand_enumerated_overlaps() {
        let p = mask(2, 2, &[1, 1, 0, 0]);
        let g = mask(2, 2, &[1, 0, 0, 0]);
        assert!((dice_score(&p, &g).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((iou_score(&p, &g).unwrap() - 0.5).abs() < 1e-15);
        let half = mask(2, 2, &[1, 1, 0, 0]);
        let cover = mask(2, 2, &[1, 0, 0, 0]);
        assert_eq!(sensitivity(&cover, &half).unwrap(), 0.5);
        assert_eq!(sensitivity(&half, &cover).unwrap(), 1.0);
    }

    #[test]
    fn identical_and_disjoint() {
        let a = mask(2, 2, &[1, 1, 0, 0]);
        let b = mask(2, 2, &[0, 0, 1, 1]);
        assert_eq!(dice_score(&a, &a).unwrap(), 1.0);
        assert_eq!(iou_score(&a, &a).unwrap(), 1.0);
        assert_eq!(dice_score(&a, &b).unwrap(), 0.0);
        assert_eq!(iou_score(&a, &b).unwrap(), 0.0);
        let e = Mask::zeros(2, 2);
        assert_eq!(dice_score(&e, &e).unwrap(), 1.0);
        assert_eq!(iou_score(&e, &e).unwrap(), 1.0);
        assert_eq!(sensitivity(&a, &e).unwrap(), 1.0);
    }

    #[test]
    fn f_beta_plug_in() {
        // Precision 1/2, recall 1.
        let p = mask(1, 2, &[1, 1]);
        let g = mask(1, 2, &[1, 0]);
        assert!((f_beta(&p, &g, 0.3).unwrap() - 1.3 * 0.5 / (0.15 + 1.0)).abs() < 1e-12);
        assert_eq!(f_beta(&g, &g, 0.3).unwrap(), 1.0);
        // Precision undefined/1 with recall 0.
        assert_eq!(f_beta(&Mask::zeros(1, 2), &g, 0.3).unwrap(), 0.0);
    }

    #[test]
    fn dims_mismatch_is_error() {
        assert!(dice_score(&Mask::zeros(2, 2), &Mask::zeros(2, 3)).is_err());
    }

    #[test]
    fn structure_measures_of_extremes() {
        // Kept away from the border so zero padding of the error filter is moot.
        let g = Mask::from_fn(16, 16, |y, x| (5..11).contains(&y) && (4..10).contains(&x));
        let perfect = g.to_probability();
        assert_eq!(weighted_f_beta(&perfect, &g), 1.0);
        assert_eq!(s_measure(&perfect, &g), 1.0);
        assert_eq!(e_measure(&perfect, &g), 1.0);
        let zero = Mask::zeros(16, 16).to_probability();
        assert!(weighted_f_beta(&zero, &g) < 1e-9);
        let inverse = ProbabilityMap::new(16, 16, perfect.values().iter().map(|v| 1.0 - v).collect()).unwrap();
        assert!(s_measure(&inverse, &g) < 0.5);
        assert!(e_measure(&inverse, &g) < 0.1);
    }

    #[test]
    fn report_means_and_order() {
        let g = mask(2, 2, &[1, 0, 0, 0]);
        let preds = vec![
            ("b".to_string(), g.to_probability()),
            ("a".to_string(), Mask::zeros(2, 2).to_probability()),
        ];
        let r = evaluate_dataset(&preds, &[g.clone(), g], &MetricConfig::default()).unwrap();
        assert_eq!(r.per_sample[0].sample_id, "a");
        assert_eq!(r.aggregate.dice, 0.5);
        let csv = r.to_csv_string().unwrap();
        assert!(csv.starts_with("sample_id,dice,iou,sen,f_beta,f_beta_w,s_alpha,e_phi_mn\n"));
        let last = csv.trim_end().lines().last().unwrap();
        assert!(last.starts_with(&format!("{AGGREGATE_ID},0.5,0.5,0.5,0.5,")), "{csv}");
    }

    #[test]
    fn flip_invariance_of_count_metrics() {
        let p = Mask::from_fn(5, 7, |y, x| (x * 3 + y) % 4 == 0);
        let g = Mask::from_fn(5, 7, |y, x| (x + y * 2) % 3 == 0);
        let c1 = Confusion::of(&p, &g).unwrap();
        let c2 = Confusion::of(&p.flip_horizontal(), &g.flip_horizontal()).unwrap();
        assert_eq!(c1, c2);
        let pp = p.to_probability();
        let e1 = e_measure(&pp, &g);
        let e2 = e_measure(&pp.flip_horizontal(), &g.flip_horizontal());
        assert!((e1 - e2).abs() < 1e-12);
    }
}

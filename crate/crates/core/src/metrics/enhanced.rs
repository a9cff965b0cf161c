//! Enhanced-alignment measure.

use crate::domain::{Mask, ProbabilityMap};

const EPS: f64 = f64::EPSILON;

/// Mean enhanced-alignment score of a binary foreground map, averaged over
/// the `W x H` pixels.
pub fn e_measure_binary(fm: &[bool], gt: &Mask) -> f64 {
    let g = gt.pixels();
    assert_eq!(fm.len(), g.len(), "prediction and ground truth dims");
    let n = g.len() as f64;
    if fm.iter().zip(g).all(|(&a, &b)| a == (b == 1)) {
        return 1.0;
    }
    let fg = gt.foreground_count();
    let sum: f64 = if fg == 0 {
        fm.iter().map(|&v| if v { 0.0 } else { 1.0 }).sum()
    } else if fg == g.len() {
        fm.iter().map(|&v| if v { 1.0 } else { 0.0 }).sum()
    } else {
        let mu_fm = fm.iter().filter(|&&v| v).count() as f64 / n;
        let mu_gt = fg as f64 / n;
        fm.iter()
            .zip(g)
            .map(|(&f, &t)| {
                let a = f as u8 as f64 - mu_fm;
                let b = t as f64 - mu_gt;
                let align = 2.0 * a * b / (a * a + b * b + EPS);
                (align + 1.0).powi(2) / 4.0
            })
            .sum()
    };
    sum / n
}

/// Mean of [`e_measure_binary`] over the 256 binarisations
/// `pred * 255 >= t`, `t = 0..=255`.
pub fn e_measure(pred: &ProbabilityMap, gt: &Mask) -> f64 {
    assert_eq!(pred.dims(), gt.dims(), "prediction and ground truth dims");
    let p = pred.values();
    if p.iter().zip(gt.pixels()).all(|(&a, &b)| a == b as f64) {
        return 1.0;
    }
    let scaled: Vec<f64> = p.iter().map(|v| v * 255.0).collect();
    let mut fm = vec![false; p.len()];
    let mut total = 0.0;
    for t in 0..=255u32 {
        for (f, &s) in fm.iter_mut().zip(&scaled) {
            *f = s >= t as f64;
        }
        total += e_measure_binary(&fm, gt);
    }
    total / 256.0
}

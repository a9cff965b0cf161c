//! Weighted F-measure: errors are smoothed by a Gaussian of neighbouring
//! errors inside the object, background errors are weighted by their
//! distance to the object, and precision/recall are computed from the
//! weighted error map.

use crate::domain::{Mask, ProbabilityMap};

const KERNEL: usize = 7;
const SIGMA: f64 = 5.0;

/// `7 x 7` Gaussian with `sigma = 5`, normalised to unit sum.
pub fn gaussian_kernel() -> [[f64; KERNEL]; KERNEL] {
    let r = (KERNEL / 2) as f64;
    let mut k = [[0.0; KERNEL]; KERNEL];
    let mut sum = 0.0;
    for (i, row) in k.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (y, x) = (i as f64 - r, j as f64 - r);
            *v = (-(x * x + y * y) / (2.0 * SIGMA * SIGMA)).exp();
            sum += *v;
        }
    }
    for row in k.iter_mut() {
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    k
}

/// Same-size correlation with zero padding.
fn filter(src: &[f64], h: usize, w: usize) -> Vec<f64> {
    let k = gaussian_kernel();
    let r = (KERNEL / 2) as isize;
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut acc = 0.0;
            for dy in -r..=r {
                let yy = y + dy;
                if yy < 0 || yy >= h as isize {
                    continue;
                }
                for dx in -r..=r {
                    let xx = x + dx;
                    if xx < 0 || xx >= w as isize {
                        continue;
                    }
                    acc += k[(dy + r) as usize][(dx + r) as usize] * src[yy as usize * w + xx as usize];
                }
            }
            out[y as usize * w + x as usize] = acc;
        }
    }
    out
}

/// For every pixel, the squared distance to and the row-major index of the
/// nearest foreground pixel. Equidistant candidates resolve to the smallest
/// index. `gt` must contain at least one foreground pixel.
pub fn nearest_foreground(gt: &Mask) -> (Vec<f64>, Vec<usize>) {
    let (h, w) = gt.dims();
    // Per column, the nearest foreground row to every row (upper wins ties).
    let mut col_near: Vec<Option<usize>> = vec![None; h * w];
    for x in 0..w {
        let mut last: Option<usize> = None;
        for y in 0..h {
            if gt.get(y, x) {
                last = Some(y);
            }
            col_near[y * w + x] = last;
        }
        let mut next: Option<usize> = None;
        for y in (0..h).rev() {
            if gt.get(y, x) {
                next = Some(y);
            }
            let up = col_near[y * w + x];
            col_near[y * w + x] = match (up, next) {
                (Some(u), Some(n)) => Some(if n - y < y - u { n } else { u }),
                (u, n) => u.or(n),
            };
        }
    }
    let mut dist = vec![0.0; h * w];
    let mut idx = vec![0usize; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut best: Option<(usize, usize)> = None;
            let consider = |c: usize, best: &mut Option<(usize, usize)>| {
                if let Some(r) = col_near[y * w + c] {
                    let d = (r.abs_diff(y)).pow(2) + c.abs_diff(x).pow(2);
                    let i = r * w + c;
                    if best.is_none_or(|(bd, bi)| d < bd || (d == bd && i < bi)) {
                        *best = Some((d, i));
                    }
                }
            };
            for off in 0..w {
                if best.is_some_and(|(bd, _)| off * off > bd) {
                    break;
                }
                if off <= x {
                    consider(x - off, &mut best);
                }
                if off > 0 && x + off < w {
                    consider(x + off, &mut best);
                }
            }
            let (d, i) = best.expect("foreground exists");
            dist[y * w + x] = d as f64;
            idx[y * w + x] = i;
        }
    }
    (dist, idx)
}

/// Weighted F-measure with `beta^2 = 1`.
pub fn weighted_f_beta(pred: &ProbabilityMap, gt: &Mask) -> f64 {
    weighted_f_beta_with(pred, gt, 1.0)
}

pub fn weighted_f_beta_with(pred: &ProbabilityMap, gt: &Mask, beta_sq: f64) -> f64 {
    let (h, w) = gt.dims();
    assert_eq!(pred.dims(), (h, w), "prediction and ground truth dims");
    let p = pred.values();
    if gt.is_empty() {
        return if p.iter().all(|&v| v == 0.0) { 1.0 } else { 0.0 };
    }
    if p.iter().zip(gt.pixels()).all(|(&a, &b)| a == b as f64) {
        return 1.0;
    }
    let g: Vec<bool> = gt.pixels().iter().map(|&v| v == 1).collect();
    let e: Vec<f64> = p.iter().zip(&g).map(|(&a, &b)| (a - b as u8 as f64).abs()).collect();
    let (dist, idx) = nearest_foreground(gt);
    let et: Vec<f64> = (0..h * w).map(|i| if g[i] { e[i] } else { e[idx[i]] }).collect();
    let ea = filter(&et, h, w);
    let eps = f64::EPSILON;
    let mut tp_w = 0.0;
    let mut fg_err = 0.0;
    let mut fp_w = 0.0;
    let mut fg_count = 0usize;
    for i in 0..h * w {
        if g[i] {
            let m = if ea[i] < e[i] { ea[i] } else { e[i] };
            fg_err += m;
            tp_w += 1.0;
            fg_count += 1;
        } else {
            let b = 2.0 - (0.5f64.ln() / 5.0 * dist[i].sqrt()).exp();
            fp_w += e[i] * b;
        }
    }
    tp_w -= fg_err;
    let recall = 1.0 - fg_err / fg_count as f64;
    let precision = tp_w / (eps + tp_w + fp_w);
    let q = (1.0 + beta_sq) * recall * precision / (eps + recall + beta_sq * precision);
    q.clamp(0.0, 1.0)
}

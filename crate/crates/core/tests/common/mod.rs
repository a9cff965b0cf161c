//! Scalar reference implementations used as test oracles. Written as
//! direct loops over pixels, independent of the library code paths.

#![allow(dead_code)]

use promptseg::{Mask, ProbabilityMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = f64::EPSILON;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Mean binary cross-entropy with probabilities clamped to `[1e-7, 1 - 1e-7]`.
pub fn bce_oracle(logits: &[f64], target: &[u8]) -> f64 {
    let mut total = 0.0;
    for i in 0..logits.len() {
        let p = sigmoid(logits[i]).clamp(1e-7, 1.0 - 1e-7);
        let m = target[i] as f64;
        total += -(m * p.ln() + (1.0 - m) * (1.0 - p).ln());
    }
    total / logits.len() as f64
}

/// `1 - (2 sum(p m) + 1) / (sum(p) + sum(m) + 1)`.
pub fn dice_oracle(probs: &[f64], target: &[u8]) -> f64 {
    let (mut inter, mut sp, mut sm) = (0.0, 0.0, 0.0);
    for i in 0..probs.len() {
        let m = target[i] as f64;
        inter += probs[i] * m;
        sp += probs[i];
        sm += m;
    }
    1.0 - (2.0 * inter + 1.0) / (sp + sm + 1.0)
}

/// Random ground truth with at least one foreground and one background pixel.
pub fn random_gt(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Mask {
    loop {
        let rects: Vec<(usize, usize, usize, usize)> = (0..rng.random_range(1..=3))
            .map(|_| {
                let y0 = rng.random_range(0..h);
                let x0 = rng.random_range(0..w);
                (y0, x0, rng.random_range(y0 + 1..=h), rng.random_range(x0 + 1..=w))
            })
            .collect();
        let speckle = rng.random_range(0.0..0.1);
        let noise: Vec<bool> = (0..h * w).map(|_| rng.random_bool(speckle)).collect();
        let m = Mask::from_fn(h, w, |y, x| {
            let inside = rects.iter().any(|&(y0, x0, y1, x1)| y >= y0 && y < y1 && x >= x0 && x < x1);
            inside ^ noise[y * w + x]
        });
        let fg = m.foreground_count();
        if fg > 0 && fg < h * w {
            return m;
        }
    }
}

/// Prediction correlated with `gt`: either continuous or binary.
pub fn random_pred(rng: &mut ChaCha8Rng, gt: &Mask) -> ProbabilityMap {
    let (h, w) = gt.dims();
    let mix = rng.random_range(0.0..1.0);
    let binary = rng.random_bool(0.2);
    let values = (0..h * w)
        .map(|i| {
            let g = gt.pixels()[i] as f64;
            let v = mix * g + (1.0 - mix) * rng.random_range(0.0..1.0);
            if binary {
                (v >= 0.5) as u8 as f64
            } else {
                v
            }
        })
        .collect();
    ProbabilityMap::new(h, w, values).unwrap()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation (normalised by `n - 1`); 0 for one element.
fn std(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// Weighted F-measure transcribed pixel by pixel.
pub fn wfb_oracle(fg: &[f64], gt: &[bool], h: usize, w: usize, beta2: f64) -> f64 {
    let n = h * w;
    let e: Vec<f64> = (0..n).map(|i| (fg[i] - gt[i] as u8 as f64).abs()).collect();
    // Brute-force distance transform: nearest foreground, first in
    // row-major order on ties.
    let mut dst = vec![0.0; n];
    let mut idx = vec![0usize; n];
    for i in 0..n {
        let (y, x) = ((i / w) as f64, (i % w) as f64);
        let mut best = f64::INFINITY;
        for j in 0..n {
            if gt[j] {
                let (yy, xx) = ((j / w) as f64, (j % w) as f64);
                let d = ((y - yy).powi(2) + (x - xx).powi(2)).sqrt();
                if d < best {
                    best = d;
                    idx[i] = j;
                }
            }
        }
        dst[i] = best;
    }
    let mut et = e.clone();
    for i in 0..n {
        if !gt[i] {
            et[i] = e[idx[i]];
        }
    }
    let mut k = [[0.0; 7]; 7];
    let mut ksum = 0.0;
    for a in 0..7 {
        for b in 0..7 {
            let (yy, xx) = (a as f64 - 3.0, b as f64 - 3.0);
            k[a][b] = (-(xx * xx + yy * yy) / 50.0).exp();
            ksum += k[a][b];
        }
    }
    let mut ea = vec![0.0; n];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let mut acc = 0.0;
            for a in 0..7i64 {
                for b in 0..7i64 {
                    let (yy, xx) = (y + a - 3, x + b - 3);
                    if yy >= 0 && yy < h as i64 && xx >= 0 && xx < w as i64 {
                        acc += k[a as usize][b as usize] / ksum * et[(yy * w as i64 + xx) as usize];
                    }
                }
            }
            ea[(y * w as i64 + x) as usize] = acc;
        }
    }
    let mut min_e_ea = e.clone();
    for i in 0..n {
        if gt[i] && ea[i] < e[i] {
            min_e_ea[i] = ea[i];
        }
    }
    let mut b = vec![1.0; n];
    for i in 0..n {
        if !gt[i] {
            b[i] = 2.0 - 1.0 * ((1.0f64 - 0.5).ln() / 5.0 * dst[i]).exp();
        }
    }
    let ew: Vec<f64> = (0..n).map(|i| min_e_ea[i] * b[i]).collect();
    let sum_gt = gt.iter().filter(|&&g| g).count() as f64;
    let ew_gt: Vec<f64> = (0..n).filter(|&i| gt[i]).map(|i| ew[i]).collect();
    let tpw = sum_gt - ew_gt.iter().sum::<f64>();
    let fpw: f64 = (0..n).filter(|&i| !gt[i]).map(|i| ew[i]).sum();
    let r = 1.0 - mean(&ew_gt);
    let p = tpw / (EPS + tpw + fpw);
    (1.0 + beta2) * (r * p) / (EPS + r + beta2 * p)
}

fn s_object_score(pred: &[f64], region: &[bool]) -> f64 {
    let v: Vec<f64> = (0..pred.len()).filter(|&i| region[i]).map(|i| pred[i]).collect();
    if v.is_empty() {
        return 0.0;
    }
    let x = mean(&v);
    2.0 * x / (x * x + 1.0 + std(&v) + EPS)
}

fn ssim(pred: &[f64], gt: &[f64]) -> f64 {
    let n = pred.len() as f64;
    if pred.is_empty() {
        return 0.0;
    }
    let x = mean(pred);
    let y = mean(gt);
    let mut sx = 0.0;
    let mut sy = 0.0;
    let mut sxy = 0.0;
    for i in 0..pred.len() {
        sx += (pred[i] - x).powi(2);
        sy += (gt[i] - y).powi(2);
        sxy += (pred[i] - x) * (gt[i] - y);
    }
    let sx = sx / (n - 1.0 + EPS);
    let sy = sy / (n - 1.0 + EPS);
    let sxy = sxy / (n - 1.0 + EPS);
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sx + sy);
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Structure measure with 1-based centroid rounding and quadrant split.
pub fn s_measure_oracle(pred: &[f64], gt: &[bool], h: usize, w: usize) -> f64 {
    let n = h * w;
    let y_mean = gt.iter().filter(|&&g| g).count() as f64 / n as f64;
    if y_mean == 0.0 {
        return 1.0 - mean(pred);
    }
    if y_mean == 1.0 {
        return mean(pred);
    }
    let pred_fg: Vec<f64> = (0..n).map(|i| if gt[i] { pred[i] } else { 0.0 }).collect();
    let pred_bg: Vec<f64> = (0..n).map(|i| if gt[i] { 0.0 } else { 1.0 - pred[i] }).collect();
    let not_gt: Vec<bool> = gt.iter().map(|g| !g).collect();
    let object = y_mean * s_object_score(&pred_fg, gt) + (1.0 - y_mean) * s_object_score(&pred_bg, &not_gt);

    let total = gt.iter().filter(|&&g| g).count() as f64;
    let mut sx = 0.0;
    let mut sy = 0.0;
    for r in 0..h {
        for c in 0..w {
            if gt[r * w + c] {
                sx += (c + 1) as f64;
                sy += (r + 1) as f64;
            }
        }
    }
    let cx = (sx / total).round() as usize;
    let cy = (sy / total).round() as usize;
    let quad = |r0: usize, r1: usize, c0: usize, c1: usize| {
        let mut p = Vec::new();
        let mut g = Vec::new();
        for r in r0..r1 {
            for c in c0..c1 {
                p.push(pred[r * w + c]);
                g.push(gt[r * w + c] as u8 as f64);
            }
        }
        ssim(&p, &g)
    };
    let area = (h * w) as f64;
    let w1 = (cx * cy) as f64 / area;
    let w2 = ((w - cx) * cy) as f64 / area;
    let w3 = (cx * (h - cy)) as f64 / area;
    let w4 = 1.0 - w1 - w2 - w3;
    let region = w1 * quad(0, cy, 0, cx) + w2 * quad(0, cy, cx, w) + w3 * quad(cy, h, 0, cx) + w4 * quad(cy, h, cx, w);
    let q = 0.5 * object + 0.5 * region;
    q.max(0.0)
}

/// Mean enhanced-alignment score over thresholds `t / 255`, `t = 0..=255`.
pub fn e_measure_oracle(pred: &[f64], gt: &[bool]) -> f64 {
    // Identical maps score 1 by convention.
    if pred.iter().zip(gt).all(|(&p, &g)| p == g as u8 as f64) {
        return 1.0;
    }
    let n = pred.len() as f64;
    let mut total = 0.0;
    for t in 0..=255 {
        let fm: Vec<f64> = pred.iter().map(|&p| (p * 255.0 >= t as f64) as u8 as f64).collect();
        let dgt: Vec<f64> = gt.iter().map(|&g| g as u8 as f64).collect();
        let sum_gt: f64 = dgt.iter().sum();
        let enhanced: Vec<f64> = if sum_gt == 0.0 {
            fm.iter().map(|f| 1.0 - f).collect()
        } else if sum_gt == n {
            fm.clone()
        } else {
            let mf = mean(&fm);
            let mg = mean(&dgt);
            (0..fm.len())
                .map(|i| {
                    let a = fm[i] - mf;
                    let b = dgt[i] - mg;
                    let align = 2.0 * a * b / (a * a + b * b + EPS);
                    (align + 1.0).powi(2) / 4.0
                })
                .collect()
        };
        total += enhanced.iter().sum::<f64>() / n;
    }
    total / 256.0
}

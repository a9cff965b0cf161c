//! Structure measure: `alpha * S_object + (1 - alpha) * S_region`.

use crate::domain::{Mask, ProbabilityMap};

const EPS: f64 = f64::EPSILON;

/// Half-away-from-zero rounding.
fn round(v: f64) -> usize {
    v.round() as usize
}

/// Grid view used for the quadrant decomposition.
struct View<'a> {
    p: &'a [f64],
    g: &'a [u8],
    w: usize,
}

impl View<'_> {
    fn region(&self, y0: usize, y1: usize, x0: usize, x1: usize) -> (Vec<f64>, Vec<f64>) {
        let mut p = Vec::new();
        let mut g = Vec::new();
        for y in y0..y1 {
            for x in x0..x1 {
                p.push(self.p[y * self.w + x]);
                g.push(self.g[y * self.w + x] as f64);
            }
        }
        (p, g)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation (`n - 1`); 0 for fewer than two values.
fn std(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

fn object(values: &[f64]) -> f64 {
    let x = mean(values);
    2.0 * x / (x * x + 1.0 + std(values) + EPS)
}

fn s_object(p: &[f64], g: &[u8]) -> f64 {
    let fg: Vec<f64> = p.iter().zip(g).filter(|(_, &m)| m == 1).map(|(&v, _)| v).collect();
    let bg: Vec<f64> = p.iter().zip(g).filter(|(_, &m)| m == 0).map(|(&v, _)| 1.0 - v).collect();
    let u = fg.len() as f64 / g.len() as f64;
    u * object(&fg) + (1.0 - u) * object(&bg)
}

fn ssim(p: &[f64], g: &[f64]) -> f64 {
    if p.is_empty() {
        return 0.0;
    }
    let n = p.len() as f64;
    let (x, y) = (mean(p), mean(g));
    let sx2 = p.iter().map(|v| (v - x).powi(2)).sum::<f64>() / (n - 1.0 + EPS);
    let sy2 = g.iter().map(|v| (v - y).powi(2)).sum::<f64>() / (n - 1.0 + EPS);
    let sxy = p.iter().zip(g).map(|(a, b)| (a - x) * (b - y)).sum::<f64>() / (n - 1.0 + EPS);
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sx2 + sy2);
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// 1-based centroid `(X, Y)` of the foreground, rounded.
fn centroid(g: &[u8], h: usize, w: usize) -> (usize, usize) {
    let total: f64 = g.iter().map(|&v| v as f64).sum();
    if total == 0.0 {
        return (round(w as f64 / 2.0), round(h as f64 / 2.0));
    }
    let (mut sx, mut sy) = (0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            let v = g[y * w + x] as f64;
            sx += v * (x + 1) as f64;
            sy += v * (y + 1) as f64;
        }
    }
    (round(sx / total), round(sy / total))
}

fn s_region(p: &[f64], g: &[u8], h: usize, w: usize) -> f64 {
    let (cx, cy) = centroid(g, h, w);
    let area = (h * w) as f64;
    let view = View { p, g, w };
    let quads = [
        (0, cy, 0, cx),
        (0, cy, cx, w),
        (cy, h, 0, cx),
        (cy, h, cx, w),
    ];
    let w1 = (cx * cy) as f64 / area;
    let w2 = ((w - cx) * cy) as f64 / area;
    let w3 = (cx * (h - cy)) as f64 / area;
    let weights = [w1, w2, w3, 1.0 - w1 - w2 - w3];
    quads
        .iter()
        .zip(weights)
        .map(|(&(y0, y1, x0, x1), wt)| {
            let (qp, qg) = view.region(y0, y1, x0, x1);
            wt * ssim(&qp, &qg)
        })
        .sum()
}

/// S-measure with structural weight `alpha`.
pub fn s_measure_with(pred: &ProbabilityMap, gt: &Mask, alpha: f64) -> f64 {
    let (h, w) = gt.dims();
    assert_eq!(pred.dims(), (h, w), "prediction and ground truth dims");
    let p = pred.values();
    let g = gt.pixels();
    if p.iter().zip(g).all(|(&a, &b)| a == b as f64) {
        return 1.0;
    }
    let y = gt.foreground_count() as f64 / g.len() as f64;
    let q = if y == 0.0 {
        1.0 - mean(p)
    } else if y == 1.0 {
        mean(p)
    } else {
        alpha * s_object(p, g) + (1.0 - alpha) * s_region(p, g, h, w)
    };
    q.clamp(0.0, 1.0)
}

pub fn s_measure(pred: &ProbabilityMap, gt: &Mask) -> f64 {
    s_measure_with(pred, gt, super::ALPHA)
}

//! Exact Euclidean distance transforms on binary grids.

const INF: f64 = 1e20;

/// Squared distance transform of a 1-D sampled function
/// (lower envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let cross = |q: usize, p: usize| {
        ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64))
    };
    for q in 1..n {
        let mut s = cross(q, v[k]);
        while s <= z[k] {
            k -= 1;
            s = cross(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Squared Euclidean distance from every pixel of a row-major `h x w` grid
/// to the nearest `true` pixel. With no `true` pixel every entry is huge.
pub fn squared_edt(source: &[bool], h: usize, w: usize) -> Vec<f64> {
    assert_eq!(source.len(), h * w, "grid size");
    let mut grid: Vec<f64> = source.iter().map(|&s| if s { 0.0 } else { INF }).collect();
    let mut col = vec![0.0; h];
    let mut col_out = vec![0.0; h];
    for x in 0..w {
        for y in 0..h {
            col[y] = grid[y * w + x];
        }
        edt_1d(&col, &mut col_out);
        for y in 0..h {
            grid[y * w + x] = col_out[y];
        }
    }
    let mut row_out = vec![0.0; w];
    for y in 0..h {
        edt_1d(&grid[y * w..(y + 1) * w], &mut row_out);
        grid[y * w..(y + 1) * w].copy_from_slice(&row_out);
    }
    grid
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute(source: &[bool], h: usize, w: usize) -> Vec<f64> {
        (0..h * w)
            .map(|i| {
                let (y, x) = ((i / w) as f64, (i % w) as f64);
                (0..h * w)
                    .filter(|&j| source[j])
                    .map(|j| {
                        let (sy, sx) = ((j / w) as f64, (j % w) as f64);
                        (y - sy).powi(2) + (x - sx).powi(2)
                    })
                    .fold(INF, f64::min)
            })
            .collect()
    }

    proptest! {
        #[test]
        fn matches_brute_force(h in 1usize..10, w in 1usize..10, bits in proptest::collection::vec(any::<bool>(), 100)) {
            let src: Vec<bool> = bits[..h * w].to_vec();
            if src.iter().any(|&b| b) {
                prop_assert_eq!(squared_edt(&src, h, w), brute(&src, h, w));
            }
        }
    }
}

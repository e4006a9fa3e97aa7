//! Dynamic time warping on scalar series with absolute-difference ground cost.
//!
//! [`exact_dtw`] fills the full table. [`fast_dtw`] is the multiresolution
//! approximation: halve both series, solve recursively, project the coarse
//! warp path back up, widen it by `radius` cells and solve only inside that
//! band. Its cost is never below the exact cost.

use crate::error::{Error, Result};

/// Full O(nm) table; `table[i][j]` is the cheapest alignment of `x[..=i]` and `y[..=j]`.
pub fn dtw_table(x: &[f64], y: &[f64]) -> Result<Vec<Vec<f64>>> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::EmptySequence);
    }
    let (n, m) = (x.len(), y.len());
    let mut d = vec![vec![0.0f64; m]; n];
    for i in 0..n {
        for j in 0..m {
            let cost = (x[i] - y[j]).abs();
            let best = match (i, j) {
                (0, 0) => 0.0,
                (0, _) => d[0][j - 1],
                (_, 0) => d[i - 1][0],
                _ => d[i - 1][j].min(d[i][j - 1]).min(d[i - 1][j - 1]),
            };
            d[i][j] = cost + best;
        }
    }
    Ok(d)
}

pub fn exact_dtw(x: &[f64], y: &[f64]) -> Result<f64> {
    let t = dtw_table(x, y)?;
    Ok(t[x.len() - 1][y.len() - 1])
}

pub fn fast_dtw(x: &[f64], y: &[f64], radius: usize) -> Result<f64> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::EmptySequence);
    }
    Ok(fast_dtw_path(x, y, radius).0)
}

/// Cost and warp path (from `(0, 0)` to `(n-1, m-1)`).
pub fn fast_dtw_path(x: &[f64], y: &[f64], radius: usize) -> (f64, Vec<(usize, usize)>) {
    let min_len = radius + 2;
    if x.len() < min_len || y.len() < min_len {
        return banded_dtw(x, y, &Band::full(x.len(), y.len()));
    }
    let (cx, cy) = (coarsen(x), coarsen(y));
    let (_, coarse_path) = fast_dtw_path(&cx, &cy, radius);
    let band = Band::from_coarse_path(&coarse_path, x.len(), y.len(), radius);
    banded_dtw(x, y, &band)
}

/// Pairwise means; an odd trailing element is kept on its own.
fn coarsen(x: &[f64]) -> Vec<f64> {
    x.chunks(2).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect()
}

/// Per-row inclusive column range of admissible cells.
#[derive(Debug, Clone)]
struct Band {
    lo: Vec<usize>,
    hi: Vec<usize>,
}

impl Band {
    fn full(n: usize, m: usize) -> Self {
        Band {
            lo: vec![0; n],
            hi: vec![m - 1; n],
        }
    }

    fn from_coarse_path(path: &[(usize, usize)], n: usize, m: usize, radius: usize) -> Self {
        let mut lo = vec![usize::MAX; n];
        let mut hi = vec![0usize; n];
        for &(ci, cj) in path {
            let r0 = (2 * ci).saturating_sub(radius);
            let r1 = (2 * ci + 1 + radius).min(n - 1);
            let c0 = (2 * cj).saturating_sub(radius);
            let c1 = (2 * cj + 1 + radius).min(m - 1);
            for r in r0..=r1 {
                lo[r] = lo[r].min(c0);
                hi[r] = hi[r].max(c1);
            }
        }
        Band { lo, hi }
    }

    fn contains(&self, i: usize, j: usize) -> bool {
        self.lo[i] <= j && j <= self.hi[i]
    }
}

fn banded_dtw(x: &[f64], y: &[f64], band: &Band) -> (f64, Vec<(usize, usize)>) {
    let n = x.len();
    let m = y.len();
    let inf = f64::INFINITY;
    let cell = |d: &Vec<Vec<f64>>, i: usize, j: usize| -> f64 {
        if band.contains(i, j) {
            d[i][j - band.lo[i]]
        } else {
            inf
        }
    };
    let mut d: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            if band.lo[i] > band.hi[i] {
                Vec::new()
            } else {
                vec![inf; band.hi[i] - band.lo[i] + 1]
            }
        })
        .collect();
    for i in 0..n {
        if band.lo[i] > band.hi[i] {
            continue;
        }
        for j in band.lo[i]..=band.hi[i] {
            let best = if i == 0 && j == 0 {
                0.0
            } else {
                let up = if i > 0 { cell(&d, i - 1, j) } else { inf };
                let left = if j > 0 { cell(&d, i, j - 1) } else { inf };
                let diag = if i > 0 && j > 0 { cell(&d, i - 1, j - 1) } else { inf };
                up.min(left).min(diag)
            };
            d[i][j - band.lo[i]] = (x[i] - y[j]).abs() + best;
        }
    }
    let total = cell(&d, n - 1, m - 1);

    let mut path = vec![(n - 1, m - 1)];
    let (mut i, mut j) = (n - 1, m - 1);
    while i > 0 || j > 0 {
        let (ni, nj) = if i == 0 {
            (0, j - 1)
        } else if j == 0 {
            (i - 1, 0)
        } else {
            let diag = cell(&d, i - 1, j - 1);
            let up = cell(&d, i - 1, j);
            let left = cell(&d, i, j - 1);
            if diag <= up && diag <= left {
                (i - 1, j - 1)
            } else if up <= left {
                (i - 1, j)
            } else {
                (i, j - 1)
            }
        };
        i = ni;
        j = nj;
        path.push((i, j));
    }
    path.reverse();
    (total, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn identical_sequences_cost_nothing() {
        let x = [1.0, 3.0, 2.0, 5.0, 0.0, 4.0];
        assert_eq!(exact_dtw(&x, &x).unwrap(), 0.0);
        for r in 0..4 {
            assert_eq!(fast_dtw(&x, &x, r).unwrap(), 0.0);
        }
    }

    #[test]
    fn hand_tables() {
        assert_eq!(exact_dtw(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0, 3.0]).unwrap(), 0.0);
        assert_eq!(exact_dtw(&[0.0], &[5.0]).unwrap(), 5.0);
        assert!(matches!(exact_dtw(&[], &[1.0]), Err(Error::EmptySequence)));
        assert!(matches!(fast_dtw(&[1.0], &[], 1), Err(Error::EmptySequence)));
    }

    #[test]
    fn table_obeys_recurrence() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let x: Vec<f64> = (0..rng.gen_range(1..9)).map(|_| rng.gen_range(0.0..5.0)).collect();
            let y: Vec<f64> = (0..rng.gen_range(1..9)).map(|_| rng.gen_range(0.0..5.0)).collect();
            let t = dtw_table(&x, &y).unwrap();
            for i in 1..x.len() {
                for j in 1..y.len() {
                    let expect = (x[i] - y[j]).abs() + t[i - 1][j].min(t[i][j - 1]).min(t[i - 1][j - 1]);
                    assert_eq!(t[i][j], expect);
                }
            }
        }
    }

    #[test]
    fn fast_path_is_monotone_and_connected() {
        let x: Vec<f64> = (0..40).map(|i| (i as f64 * 0.3).sin()).collect();
        let y: Vec<f64> = (0..33).map(|i| (i as f64 * 0.35 + 0.5).sin()).collect();
        let (cost, path) = fast_dtw_path(&x, &y, 1);
        assert_eq!(path[0], (0, 0));
        assert_eq!(*path.last().unwrap(), (39, 32));
        for w in path.windows(2) {
            let (a, b) = (w[0], w[1]);
            assert!(b.0 - a.0 <= 1 && b.1 - a.1 <= 1 && (b.0 > a.0 || b.1 > a.1));
        }
        let along: f64 = path.iter().map(|&(i, j)| (x[i] - y[j]).abs()).sum();
        assert!((along - cost).abs() < 1e-9);
        assert!(cost >= exact_dtw(&x, &y).unwrap() - 1e-12);
    }
}

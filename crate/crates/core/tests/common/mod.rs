//! Brute-force oracles and random inputs shared by the integration tests and
//! the acceptance run.
#![allow(dead_code)]

use std::collections::BTreeSet;

use haulcast::eval::ConfusionMatrix;
use haulcast::gridding::{CellId, GridSpec};
use haulcast::ingest::{haversine, StayParams, StayPoint, TrajectoryPoint, Track};
use rand::Rng;

/// A truck alternating between dwelling (metre-scale jitter around a spot)
/// and travelling (steps of tens to hundreds of metres), with occasional long
/// reporting gaps. Times strictly increase.
pub fn random_trajectory<R: Rng>(rng: &mut R, truck: &str, n: usize) -> Vec<TrajectoryPoint> {
    let (mut lat, mut lon) = (30.6 + rng.gen_range(-0.05..0.05), 104.0 + rng.gen_range(-0.05..0.05));
    let mut t = 1_659_312_000 + rng.gen_range(0..86_400);
    let mut out = Vec::with_capacity(n);
    let mut dwelling = rng.gen_bool(0.5);
    let mut left = rng.gen_range(1..80);
    let (mut clat, mut clon) = (lat, lon);
    for _ in 0..n {
        if left == 0 {
            dwelling = !dwelling;
            left = rng.gen_range(1..80);
            clat = lat;
            clon = lon;
        }
        left -= 1;
        t += if rng.gen_bool(0.02) { rng.gen_range(600..4_000) } else { rng.gen_range(5..120) };
        if dwelling {
            let r = rng.gen_range(0.0..260.0) / 111_320.0;
            let a: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            lat = clat + r * a.sin();
            lon = clon + r * a.cos() / 0.86;
        } else {
            lat += rng.gen_range(-600.0..600.0) / 111_320.0;
            lon += rng.gen_range(-600.0..600.0) / 96_000.0;
        }
        out.push(TrajectoryPoint::new(truck, t, lat, lon));
    }
    out
}

/// Stay points by explicit enumeration: for every anchor the full distance
/// and gap rows are computed, the window ends before the first violation,
/// and the anchor walk jumps past emitted windows.
pub fn brute_force_stays(points: &[TrajectoryPoint], params: &StayParams) -> Vec<StayPoint> {
    let n = points.len();
    let mut out = Vec::new();
    let mut i = 0;
    while i < n {
        let bad: Vec<bool> = (0..n)
            .map(|m| {
                if m <= i {
                    return false;
                }
                let far = haversine((points[i].lat, points[i].lon), (points[m].lat, points[m].lon)) > params.max_distance_m;
                let gap = params.max_gap_s.is_some_and(|g| points[m].t - points[m - 1].t > g);
                far || gap
            })
            .collect();
        let end = (i + 1..n).find(|&m| bad[m]).unwrap_or(n) - 1;
        if end > i && points[end].t - points[i].t >= params.min_duration_s {
            let members = &points[i..=end];
            let k = members.len() as f64;
            out.push(StayPoint {
                truck_id: points[i].truck_id.clone(),
                t_start: points[i].t,
                t_end: points[end].t,
                anchor_lat: points[i].lat,
                anchor_lon: points[i].lon,
                centroid_lat: members.iter().map(|p| p.lat).sum::<f64>() / k,
                centroid_lon: members.iter().map(|p| p.lon).sum::<f64>() / k,
                n_points: members.len(),
            });
            i = end + 1;
        } else {
            i += 1;
        }
    }
    out
}

/// Symmetric 0/1 matrix over `retained` from every consecutive fix pair whose
/// cells differ by at most one row and one column.
pub fn brute_force_adjacency(tracks: &[Track], grid: &GridSpec, retained: &[CellId]) -> Vec<Vec<u8>> {
    let mut pairs = BTreeSet::new();
    for tr in tracks {
        for w in tr.points.windows(2) {
            let (Some(a), Some(b)) = (grid.locate(w[0].lat, w[0].lon), grid.locate(w[1].lat, w[1].lon)) else {
                continue;
            };
            let (ra, ca) = ((a / grid.n_cols) as i64, (a % grid.n_cols) as i64);
            let (rb, cb) = ((b / grid.n_cols) as i64, (b % grid.n_cols) as i64);
            if a != b && (ra - rb).abs() <= 1 && (ca - cb).abs() <= 1 {
                pairs.insert((a.min(b), a.max(b)));
            }
        }
    }
    let n = retained.len();
    let mut m = vec![vec![0u8; n]; n];
    for i in 0..n {
        for j in 0..n {
            let key = (retained[i].min(retained[j]), retained[i].max(retained[j]));
            if pairs.contains(&key) {
                m[i][j] = 1;
            }
        }
    }
    m
}

/// DTW by memoised recursion over `D(i, j) = |x_i - y_j| + min(...)`.
pub fn recursive_dtw(x: &[f64], y: &[f64]) -> f64 {
    fn go(i: usize, j: usize, x: &[f64], y: &[f64], memo: &mut Vec<Vec<Option<f64>>>) -> f64 {
        if let Some(v) = memo[i][j] {
            return v;
        }
        let c = (x[i] - y[j]).abs();
        let v = match (i, j) {
            (0, 0) => c,
            (0, _) => c + go(0, j - 1, x, y, memo),
            (_, 0) => c + go(i - 1, 0, x, y, memo),
            _ => c + go(i - 1, j, x, y, memo).min(go(i, j - 1, x, y, memo)).min(go(i - 1, j - 1, x, y, memo)),
        };
        memo[i][j] = Some(v);
        v
    }
    let mut memo = vec![vec![None; y.len()]; x.len()];
    go(x.len() - 1, y.len() - 1, x, y, &mut memo)
}

/// Smallest integer `b` for which at most `top` of the positive values exceed it.
pub fn enumerate_threshold(values: &[u32], top: f64) -> u32 {
    let pos: Vec<u32> = values.iter().copied().filter(|&v| v > 0).collect();
    let max = *pos.iter().max().unwrap();
    (0..=max)
        .find(|&b| pos.iter().filter(|&&v| v > b).count() as f64 <= top * pos.len() as f64 + 1e-9)
        .unwrap()
}

/// A confusion matrix (rows = truth) with per-class precision, recall and F1
/// worked out by hand.
pub struct CmFixture {
    pub cm: ConfusionMatrix,
    pub precision: [f64; 3],
    pub recall: [f64; 3],
    pub f1: [f64; 3],
}

pub fn cm_fixtures() -> Vec<CmFixture> {
    vec![
        // row sums 10/10/10, diagonal 9/7/8
        CmFixture {
            cm: ConfusionMatrix {
                counts: [[9, 1, 0], [2, 7, 1], [0, 2, 8]],
            },
            precision: [9.0 / 11.0, 7.0 / 10.0, 8.0 / 9.0],
            recall: [0.9, 0.7, 0.8],
            f1: [6.0 / 7.0, 0.7, 16.0 / 19.0],
        },
        // class 2 never predicted
        CmFixture {
            cm: ConfusionMatrix {
                counts: [[5, 0, 0], [1, 3, 0], [2, 1, 0]],
            },
            precision: [5.0 / 8.0, 0.75, 0.0],
            recall: [1.0, 0.75, 0.0],
            f1: [10.0 / 13.0, 0.75, 0.0],
        },
        // only class 2 present in the truth
        CmFixture {
            cm: ConfusionMatrix {
                counts: [[0, 0, 0], [0, 0, 0], [3, 1, 6]],
            },
            precision: [0.0, 0.0, 1.0],
            recall: [0.0, 0.0, 0.6],
            f1: [0.0, 0.0, 0.75],
        },
    ]
}

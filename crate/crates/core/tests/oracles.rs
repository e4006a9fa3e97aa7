mod common;

use std::collections::HashMap;

use haulcast::eval::prf;
use haulcast::features::{build_adjacency, exact_dtw, fast_dtw};
use haulcast::gridding::{build_grid, count_activity, BBox};
use haulcast::ingest::{detect_all, detect_stay_points, StayParams, Track};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tracks(rng: &mut ChaCha8Rng, n: usize, max_len: usize) -> Vec<Track> {
    (0..n)
        .map(|i| {
            let len = rng.gen_range(2..max_len);
            let id = format!("T{i:03}");
            Track {
                points: common::random_trajectory(rng, &id, len),
                truck_id: id,
            }
        })
        .collect()
}

fn city() -> BBox {
    BBox {
        lat_min: 30.5,
        lon_min: 103.9,
        lat_max: 30.7,
        lon_max: 104.1,
    }
}

#[test]
fn detector_matches_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for params in [
        StayParams::default(),
        StayParams {
            max_gap_s: None,
            ..StayParams::default()
        },
        StayParams {
            max_distance_m: 50.0,
            min_duration_s: 120,
            max_gap_s: Some(300),
        },
    ] {
        for i in 0..60 {
            let n = rng.gen_range(1..400);
            let traj = common::random_trajectory(&mut rng, "T", n);
            assert_eq!(detect_stay_points(&traj, &params).unwrap(), common::brute_force_stays(&traj, &params), "case {i}");
        }
    }
}

#[test]
fn adjacency_matches_pair_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let grid = build_grid(city(), 800.0).unwrap();
    let ts = tracks(&mut rng, 20, 300);
    let retained: Vec<usize> = (0..grid.n_cells()).filter(|c| c % 4 != 0).collect();
    let got = build_adjacency(&ts, &grid, &retained);
    assert_eq!(got.a, common::brute_force_adjacency(&ts, &grid, &retained));
    assert!(got.n_edges() > 0);
}

#[test]
fn dtw_matches_recursion() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let x: Vec<f64> = (0..rng.gen_range(1..30)).map(|_| rng.gen_range(0.0..6.0)).collect();
        let y: Vec<f64> = (0..rng.gen_range(1..30)).map(|_| rng.gen_range(0.0..6.0)).collect();
        let exact = exact_dtw(&x, &y).unwrap();
        assert!((exact - common::recursive_dtw(&x, &y)).abs() < 1e-12);
        assert!((fast_dtw(&x, &y, 30).unwrap() - exact).abs() < 1e-12);
    }
}

/// Counts recomputed by listing, per cell and slot, the distinct trucks whose
/// dwell overlaps the slot.
#[test]
fn counts_match_truck_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let grid = build_grid(city(), 2_000.0).unwrap();
    let stays = detect_all(&tracks(&mut rng, 30, 1_500), &StayParams::default()).unwrap();
    assert!(stays.len() > 20);
    let t0 = stays.iter().map(|s| s.t_start).min().unwrap() - 500;
    let (slot_len, n_slots) = (1_800, 60);
    let (tensor, _) = count_activity(&stays, &grid, slot_len, t0, n_slots).unwrap();
    let mut trucks: HashMap<(usize, usize), Vec<&str>> = HashMap::new();
    for s in &stays {
        let Some(cell) = grid.locate(s.anchor_lat, s.anchor_lon) else { continue };
        for slot in 0..n_slots {
            let (a, b) = (t0 + slot as i64 * slot_len, t0 + (slot as i64 + 1) * slot_len);
            let overlaps = if s.t_end > s.t_start { s.t_start < b && s.t_end > a } else { (a..b).contains(&s.t_start) };
            let list = trucks.entry((cell, slot)).or_default();
            if overlaps && !list.contains(&s.truck_id.as_str()) {
                list.push(&s.truck_id);
            }
        }
    }
    for cell in 0..grid.n_cells() {
        for slot in 0..n_slots {
            let want = trucks.get(&(cell, slot)).map_or(0, Vec::len) as u32;
            assert_eq!(tensor.counts[cell][slot], want, "cell {cell} slot {slot}");
        }
    }
}

#[test]
fn hand_computed_confusion_matrices() {
    for f in common::cm_fixtures() {
        let r = prf(&f.cm);
        for c in 0..3 {
            assert!((r.per_class[c].precision - f.precision[c]).abs() < 1e-12);
            assert!((r.per_class[c].recall - f.recall[c]).abs() < 1e-12);
            assert!((r.per_class[c].f1 - f.f1[c]).abs() < 1e-12);
        }
    }
}

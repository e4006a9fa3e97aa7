//! Inputs for the criterion benchmarks under `benches/`.

use haulcast::features::SampleSet;
use haulcast::gridding::{ClassThresholds, ClassTensor};
use haulcast::ingest::TrajectoryPoint;

/// A truck alternating 40-point dwells and 40-point drives, one fix every 30 s.
pub fn dwell_drive_trace(n: usize) -> Vec<TrajectoryPoint> {
    let (mut lat, mut lon) = (30.6, 104.0);
    (0..n)
        .map(|i| {
            let phase = (i / 40) % 2;
            let wobble = ((i * 7919) % 13) as f64 * 1e-5;
            if phase == 1 {
                lat += 0.002;
                lon += 0.001;
            }
            TrajectoryPoint::new("B", 1_659_312_000 + 30 * i as i64, lat + wobble, lon - wobble)
        })
        .collect()
}

/// A daily-looking series per cell, phase-shifted by cell.
pub fn series(n_cells: usize, len: usize) -> Vec<Vec<f64>> {
    (0..n_cells)
        .map(|c| {
            (0..len)
                .map(|t| {
                    let x = ((t + 3 * c) % 48) as f64 / 48.0 * std::f64::consts::TAU;
                    (4.0 * x.sin()).max(0.0).round()
                })
                .collect()
        })
        .collect()
}

/// Windowed samples over cyclic labels.
pub fn cyclic_samples(n_cells: usize, n_slots: usize, k: usize) -> SampleSet {
    let labels = (0..n_cells)
        .map(|c| (0..n_slots).map(|t| (((t + c) / 4) % 3) as u8).collect())
        .collect();
    let classes = ClassTensor {
        cell_ids: (0..n_cells).collect(),
        labels,
        thresholds: ClassThresholds::pinned(),
        t0: 1_659_312_000,
        slot_len: 1800,
    };
    haulcast::features::make_windows(&classes, k, 1, 0).expect("enough slots")
}

//! Square-cell tessellation, per cell-slot stay counts, spatial downsampling
//! and the three-level activity labels.

use std::collections::{HashMap, HashSet};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::StayPoint;

pub const METERS_PER_DEG_LAT: f64 = 111_320.0;
pub const DEFAULT_CELL_SIZE_M: f64 = 1_000.0;
pub const DEFAULT_SLOT_LEN_S: i64 = 1_800;
pub const DEFAULT_KEEP_FRACTION: f64 = 0.25;
pub const DEFAULT_TOP_FRACTION: f64 = 0.10;
/// Upper bound of the medium class used when thresholds are pinned.
pub const PINNED_MEDIUM_BOUND: u32 = 4;

pub type CellId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub lat_min: f64,
    pub lon_min: f64,
    pub lat_max: f64,
    pub lon_max: f64,
}

impl BBox {
    pub fn contains(&self, lat: f64, lon: f64) -> bool {
        (self.lat_min..=self.lat_max).contains(&lat) && (self.lon_min..=self.lon_max).contains(&lon)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// South-west corner.
    pub origin_lat: f64,
    pub origin_lon: f64,
    pub cell_size: f64,
    pub n_rows: usize,
    pub n_cols: usize,
    pub ref_lat: f64,
}

pub fn build_grid(bbox: BBox, cell_size: f64) -> Result<GridSpec> {
    if !(cell_size > 0.0) || !cell_size.is_finite() {
        return Err(Error::InvalidParameter(format!("cell size {cell_size}")));
    }
    if bbox.lon_min > bbox.lon_max {
        return Err(Error::InvalidBbox("box spans the antimeridian".into()));
    }
    if !(bbox.lat_max > bbox.lat_min) || !(bbox.lon_max > bbox.lon_min) {
        return Err(Error::InvalidBbox("zero or negative extent".into()));
    }
    let ref_lat = 0.5 * (bbox.lat_min + bbox.lat_max);
    let m_lon = meters_per_deg_lon(ref_lat);
    let height = (bbox.lat_max - bbox.lat_min) * METERS_PER_DEG_LAT;
    let width = (bbox.lon_max - bbox.lon_min) * m_lon;
    // absorb round-off so an exact multiple does not spill into one more cell
    let n_rows = ((height / cell_size) - 1e-9).ceil().max(1.0) as usize;
    let n_cols = ((width / cell_size) - 1e-9).ceil().max(1.0) as usize;
    Ok(GridSpec {
        origin_lat: bbox.lat_min,
        origin_lon: bbox.lon_min,
        cell_size,
        n_rows,
        n_cols,
        ref_lat,
    })
}

fn meters_per_deg_lon(ref_lat: f64) -> f64 {
    METERS_PER_DEG_LAT * ref_lat.to_radians().cos()
}

impl GridSpec {
    pub fn n_cells(&self) -> usize {
        self.n_rows * self.n_cols
    }

    pub fn m_per_deg_lon(&self) -> f64 {
        meters_per_deg_lon(self.ref_lat)
    }

    pub fn cell_id(&self, row: usize, col: usize) -> CellId {
        row * self.n_cols + col
    }

    pub fn row_col(&self, cell: CellId) -> (usize, usize) {
        (cell / self.n_cols, cell % self.n_cols)
    }

    /// Cell containing the point, `None` outside the grid. Boundaries go to
    /// the higher index.
    pub fn locate(&self, lat: f64, lon: f64) -> Option<CellId> {
        let r = ((lat - self.origin_lat) * METERS_PER_DEG_LAT / self.cell_size).floor();
        let c = ((lon - self.origin_lon) * self.m_per_deg_lon() / self.cell_size).floor();
        if !(r >= 0.0 && c >= 0.0) {
            return None;
        }
        let (r, c) = (r as usize, c as usize);
        (r < self.n_rows && c < self.n_cols).then(|| self.cell_id(r, c))
    }

    /// Degrees of the south-west corner of a cell.
    pub fn cell_corner(&self, cell: CellId) -> (f64, f64) {
        let (r, c) = self.row_col(cell);
        (
            self.origin_lat + r as f64 * self.cell_size / METERS_PER_DEG_LAT,
            self.origin_lon + c as f64 * self.cell_size / self.m_per_deg_lon(),
        )
    }

    pub fn cell_center(&self, cell: CellId) -> (f64, f64) {
        let (r, c) = self.row_col(cell);
        (
            self.origin_lat + (r as f64 + 0.5) * self.cell_size / METERS_PER_DEG_LAT,
            self.origin_lon + (c as f64 + 0.5) * self.cell_size / self.m_per_deg_lon(),
        )
    }

    /// Closed ring of `(lon, lat)` pairs, counter-clockwise from the south-west corner.
    pub fn cell_ring(&self, cell: CellId) -> [(f64, f64); 5] {
        let (lat0, lon0) = self.cell_corner(cell);
        let lat1 = lat0 + self.cell_size / METERS_PER_DEG_LAT;
        let lon1 = lon0 + self.cell_size / self.m_per_deg_lon();
        [(lon0, lat0), (lon1, lat0), (lon1, lat1), (lon0, lat1), (lon0, lat0)]
    }

    /// Distinct cells sharing an edge or a corner.
    pub fn are_moore_neighbors(&self, a: CellId, b: CellId) -> bool {
        if a == b {
            return false;
        }
        let (ra, ca) = self.row_col(a);
        let (rb, cb) = self.row_col(b);
        ra.abs_diff(rb) <= 1 && ca.abs_diff(cb) <= 1
    }

    /// Moore neighbourhood without the cell itself, truncated at the border.
    pub fn moore_neighbors(&self, cell: CellId) -> Vec<CellId> {
        let (r, c) = self.row_col(cell);
        let mut out = Vec::with_capacity(8);
        for dr in -1i64..=1 {
            for dc in -1i64..=1 {
                if dr == 0 && dc == 0 {
                    continue;
                }
                let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                if nr >= 0 && nc >= 0 && (nr as usize) < self.n_rows && (nc as usize) < self.n_cols {
                    out.push(self.cell_id(nr as usize, nc as usize));
                }
            }
        }
        out
    }
}

/// Stay counts per retained cell and time slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivityTensor {
    /// `counts[i][t]` belongs to cell `cell_ids[i]`.
    pub counts: Vec<Vec<u32>>,
    pub slot_len: i64,
    pub t0: i64,
    pub cell_ids: Vec<CellId>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountStats {
    pub counted: usize,
    pub outside_time: usize,
    pub outside_grid: usize,
    pub capped: usize,
}

impl ActivityTensor {
    pub fn n_cells(&self) -> usize {
        self.cell_ids.len()
    }

    pub fn n_slots(&self) -> usize {
        self.counts.first().map_or(0, Vec::len)
    }

    pub fn slot_start(&self, slot: usize) -> i64 {
        self.t0 + slot as i64 * self.slot_len
    }

    pub fn cell_means(&self) -> Vec<f64> {
        self.counts
            .iter()
            .map(|row| {
                if row.is_empty() {
                    0.0
                } else {
                    row.iter().map(|&v| v as f64).sum::<f64>() / row.len() as f64
                }
            })
            .collect()
    }

    /// Sub-tensor over `cells` (must be a subset of `cell_ids`), in the given order.
    pub fn restrict(&self, cells: &[CellId]) -> Result<ActivityTensor> {
        let index: HashMap<CellId, usize> =
            self.cell_ids.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        let counts = cells
            .iter()
            .map(|c| {
                index
                    .get(c)
                    .map(|&i| self.counts[i].clone())
                    .ok_or_else(|| Error::InvalidParameter(format!("cell {c} not in tensor")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ActivityTensor {
            counts,
            slot_len: self.slot_len,
            t0: self.t0,
            cell_ids: cells.to_vec(),
        })
    }

    pub fn zero_fraction(&self) -> f64 {
        let total = self.n_cells() * self.n_slots();
        if total == 0 {
            return 0.0;
        }
        let zeros: usize = self.counts.iter().map(|r| r.iter().filter(|&&v| v == 0).count()).sum();
        zeros as f64 / total as f64
    }
}

/// Half-open slot range `[first, last]` overlapped by `[t_start, t_end)`.
fn overlapped_slots(t_start: i64, t_end: i64, t0: i64, slot_len: i64, horizon: usize) -> Option<(usize, usize)> {
    let first = (t_start - t0).div_euclid(slot_len);
    let last = if t_end > t_start {
        (t_end - t0 - 1).div_euclid(slot_len)
    } else {
        first
    };
    if last < 0 || first >= horizon as i64 {
        return None;
    }
    Some((first.max(0) as usize, (last as usize).min(horizon - 1)))
}

/// Counts stay points per cell and slot. Each stay point is attributed to the
/// cell of its anchor and contributes to every slot its dwell overlaps; a truck
/// contributes at most 1 to any cell-slot.
pub fn count_activity(
    stays: &[StayPoint],
    grid: &GridSpec,
    slot_len: i64,
    t0: i64,
    horizon_slots: usize,
) -> Result<(ActivityTensor, CountStats)> {
    if slot_len <= 0 {
        return Err(Error::InvalidParameter("slot length must be > 0".into()));
    }
    if horizon_slots == 0 {
        return Err(Error::InvalidParameter("horizon must be at least one slot".into()));
    }
    let n_cells = grid.n_cells();
    let mut counts = vec![vec![0u32; horizon_slots]; n_cells];
    let mut stats = CountStats::default();
    let mut trucks: HashMap<&str, usize> = HashMap::new();
    let mut seen: HashSet<(usize, CellId, usize)> = HashSet::new();
    for s in stays {
        let Some(cell) = grid.locate(s.anchor_lat, s.anchor_lon) else {
            stats.outside_grid += 1;
            continue;
        };
        let Some((first, last)) = overlapped_slots(s.t_start, s.t_end, t0, slot_len, horizon_slots) else {
            stats.outside_time += 1;
            continue;
        };
        let next = trucks.len();
        let truck = *trucks.entry(s.truck_id.as_str()).or_insert(next);
        for slot in first..=last {
            if seen.insert((truck, cell, slot)) {
                counts[cell][slot] += 1;
                stats.counted += 1;
            } else {
                stats.capped += 1;
            }
        }
    }
    if stats.outside_time > 0 {
        log::info!("{} stay points outside the analysis window dropped", stats.outside_time);
    }
    Ok((
        ActivityTensor {
            counts,
            slot_len,
            t0,
            cell_ids: (0..n_cells).collect(),
        },
        stats,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Downsample {
    /// Retained cells in ascending id order.
    pub retained: Vec<CellId>,
    /// Smallest retained per-cell mean.
    pub threshold: f64,
}

/// Keeps the top `keep_fraction` of cells with a positive mean count; ties at
/// the cut are all kept.
pub fn downsample_grids(tensor: &ActivityTensor, keep_fraction: f64) -> Result<Downsample> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::InvalidParameter(format!("keep fraction {keep_fraction}")));
    }
    let means = tensor.cell_means();
    let mut positive: Vec<f64> = means.iter().copied().filter(|&m| m > 0.0).collect();
    if positive.is_empty() {
        return Err(Error::NothingToRetain);
    }
    positive.sort_by(|a, b| b.total_cmp(a));
    let n_keep = ((keep_fraction * positive.len() as f64) - 1e-9).ceil().max(1.0) as usize;
    let threshold = positive[n_keep.min(positive.len()) - 1];
    let mut retained: Vec<CellId> = tensor
        .cell_ids
        .iter()
        .zip(&means)
        .filter(|(_, &m)| m > 0.0 && m >= threshold)
        .map(|(&c, _)| c)
        .collect();
    retained.sort_unstable();
    Ok(Downsample { retained, threshold })
}

/// Smallest integer `b` such that at most `top_fraction` of the positive
/// counts exceed `b`.
pub fn derive_class_thresholds(tensor: &ActivityTensor, top_fraction: f64) -> Result<u32> {
    if !(top_fraction > 0.0 && top_fraction < 1.0) {
        return Err(Error::InvalidParameter(format!("top fraction {top_fraction}")));
    }
    let mut positive: Vec<u32> = tensor.counts.iter().flatten().copied().filter(|&v| v > 0).collect();
    if positive.is_empty() {
        return Err(Error::NoPositiveCounts);
    }
    positive.sort_unstable();
    let n = positive.len();
    // the exceedance fraction only changes at observed values
    let mut idx = 0;
    while idx < n {
        let b = positive[idx];
        let not_above = positive.partition_point(|&v| v <= b);
        let exceed = n - not_above;
        if exceed as f64 <= top_fraction * n as f64 + 1e-9 {
            return Ok(b);
        }
        idx = not_above;
    }
    Ok(positive[n - 1])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassThresholds {
    pub zero_bound: u32,
    pub medium_bound: u32,
}

impl ClassThresholds {
    pub fn pinned() -> Self {
        Self {
            zero_bound: 0,
            medium_bound: PINNED_MEDIUM_BOUND,
        }
    }
}

/// 0 = none, 1 = medium, 2 = high.
pub fn activity_class(v: u32, medium_bound: u32) -> u8 {
    if v == 0 {
        0
    } else if v <= medium_bound {
        1
    } else {
        2
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassTensor {
    pub labels: Vec<Vec<u8>>,
    pub thresholds: ClassThresholds,
    pub cell_ids: Vec<CellId>,
    pub t0: i64,
    pub slot_len: i64,
}

impl ClassTensor {
    pub fn n_cells(&self) -> usize {
        self.cell_ids.len()
    }

    pub fn n_slots(&self) -> usize {
        self.labels.first().map_or(0, Vec::len)
    }

    pub fn class_mix(&self) -> [f64; 3] {
        let mut mix = [0.0; 3];
        let mut total = 0.0;
        for &c in self.labels.iter().flatten() {
            mix[c as usize] += 1.0;
            total += 1.0;
        }
        if total > 0.0 {
            mix.iter_mut().for_each(|m| *m /= total);
        }
        mix
    }
}

pub fn label_classes(tensor: &ActivityTensor, medium_bound: u32) -> Result<ClassTensor> {
    if medium_bound < 1 {
        return Err(Error::InvalidParameter("medium bound must be >= 1".into()));
    }
    Ok(ClassTensor {
        labels: tensor
            .counts
            .iter()
            .map(|row| row.iter().map(|&v| activity_class(v, medium_bound)).collect())
            .collect(),
        thresholds: ClassThresholds {
            zero_bound: 0,
            medium_bound,
        },
        cell_ids: tensor.cell_ids.clone(),
        t0: tensor.t0,
        slot_len: tensor.slot_len,
    })
}

/// JSON sidecar accompanying a long-format tensor CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorSidecar {
    pub grid: GridSpec,
    pub t0: i64,
    pub slot_len: i64,
    pub n_slots: usize,
    pub cell_ids: Vec<CellId>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub thresholds: Option<ClassThresholds>,
}

/// Writes `cell_id,slot,value` rows.
pub fn write_long_csv<W: Write, V: ToString + Copy>(writer: W, cell_ids: &[CellId], rows: &[Vec<V>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["cell_id", "slot", "value"])?;
    for (cell, row) in cell_ids.iter().zip(rows) {
        for (slot, v) in row.iter().enumerate() {
            w.write_record([cell.to_string(), slot.to_string(), v.to_string()])?;
        }
    }
    w.flush().map_err(|e| Error::io("<tensor writer>", e))?;
    Ok(())
}

/// Reads `cell_id,slot,value` rows back into a dense matrix ordered like `sidecar.cell_ids`.
pub fn read_long_csv<R: Read>(reader: R, sidecar: &TensorSidecar) -> Result<Vec<Vec<u32>>> {
    let index: HashMap<CellId, usize> = sidecar.cell_ids.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let mut out = vec![vec![0u32; sidecar.n_slots]; sidecar.cell_ids.len()];
    let mut rdr = csv::Reader::from_reader(reader);
    for rec in rdr.deserialize::<(CellId, usize, u32)>() {
        let (cell, slot, v) = rec?;
        let i = *index
            .get(&cell)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown cell {cell}")))?;
        if slot >= sidecar.n_slots {
            return Err(Error::InvalidParameter(format!("slot {slot} out of range")));
        }
        out[i][slot] = v;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ten_km_box() -> BBox {
        let dlat = 10_000.0 / METERS_PER_DEG_LAT;
        let lat_min = 30.6;
        let ref_lat: f64 = lat_min + dlat / 2.0;
        let dlon = 10_000.0 / (METERS_PER_DEG_LAT * ref_lat.to_radians().cos());
        BBox {
            lat_min,
            lon_min: 104.0,
            lat_max: lat_min + dlat,
            lon_max: 104.0 + dlon,
        }
    }

    fn stay(truck: &str, t_start: i64, t_end: i64, lat: f64, lon: f64) -> StayPoint {
        StayPoint {
            truck_id: truck.into(),
            t_start,
            t_end,
            anchor_lat: lat,
            anchor_lon: lon,
            centroid_lat: lat,
            centroid_lon: lon,
            n_points: 2,
        }
    }

    #[test]
    fn ten_km_box_has_hundred_cells() {
        let g = build_grid(ten_km_box(), 1_000.0).unwrap();
        assert_eq!((g.n_rows, g.n_cols), (10, 10));
        assert_eq!(g.n_cells(), 100);
    }

    #[test]
    fn rejects_degenerate_and_antimeridian() {
        let mut b = ten_km_box();
        b.lat_max = b.lat_min;
        assert!(matches!(build_grid(b, 1000.0), Err(Error::InvalidBbox(_))));
        let am = BBox {
            lat_min: 0.0,
            lon_min: 179.5,
            lat_max: 1.0,
            lon_max: -179.5,
        };
        assert!(matches!(build_grid(am, 1000.0), Err(Error::InvalidBbox(_))));
        assert!(build_grid(ten_km_box(), 0.0).is_err());
    }

    #[test]
    fn locate_by_floor() {
        let g = build_grid(ten_km_box(), 1_000.0).unwrap();
        assert_eq!(g.locate(g.origin_lat, g.origin_lon), Some(0));
        let lat = g.origin_lat + 500.0 / METERS_PER_DEG_LAT;
        let lon = g.origin_lon + 1_500.0 / g.m_per_deg_lon();
        assert_eq!(g.locate(lat, lon).map(|c| g.row_col(c)), Some((0, 1)));
        assert_eq!(g.locate(g.origin_lat - 0.01, g.origin_lon), None);
        assert_eq!(g.locate(g.origin_lat, g.origin_lon + 1.0), None);
    }

    #[test]
    fn cell_centers_round_trip() {
        let g = build_grid(ten_km_box(), 1_000.0).unwrap();
        for cell in 0..g.n_cells() {
            let (lat, lon) = g.cell_center(cell);
            assert_eq!(g.locate(lat, lon), Some(cell));
        }
    }

    #[test]
    fn moore_neighbors_truncate_at_border() {
        let g = build_grid(ten_km_box(), 1_000.0).unwrap();
        assert_eq!(g.moore_neighbors(0).len(), 3);
        assert_eq!(g.moore_neighbors(g.cell_id(5, 5)).len(), 8);
        assert!(g.are_moore_neighbors(0, 11));
        assert!(!g.are_moore_neighbors(0, 2));
        assert!(!g.are_moore_neighbors(3, 3));
    }

    #[test]
    fn counting_rules() {
        let g = build_grid(ten_km_box(), 1_000.0).unwrap();
        let (lat, lon) = g.cell_center(7);
        let t0 = 1_000_000;
        // inside slot 0 only
        let (t, _) = count_activity(&[stay("a", t0 + 100, t0 + 1_700, lat, lon)], &g, 1800, t0, 4).unwrap();
        assert_eq!(t.counts[7], vec![1, 0, 0, 0]);
        assert_eq!(t.counts.iter().flatten().sum::<u32>(), 1);
        // spans slots 1..=3
        let (t, _) = count_activity(&[stay("a", t0 + 1_900, t0 + 5_500, lat, lon)], &g, 1800, t0, 4).unwrap();
        assert_eq!(t.counts[7], vec![0, 1, 1, 1]);
        // same truck, same cell-slot: capped
        let (t, stats) = count_activity(
            &[stay("a", t0 + 10, t0 + 700, lat, lon), stay("a", t0 + 900, t0 + 1_600, lat, lon)],
            &g,
            1800,
            t0,
            4,
        )
        .unwrap();
        assert_eq!(t.counts[7][0], 1);
        assert_eq!(stats.capped, 1);
        // another truck adds
        let (t, _) = count_activity(
            &[stay("a", t0 + 10, t0 + 700, lat, lon), stay("b", t0 + 900, t0 + 1_600, lat, lon)],
            &g,
            1800,
            t0,
            4,
        )
        .unwrap();
        assert_eq!(t.counts[7][0], 2);
        // out of range
        let (_, stats) = count_activity(&[stay("a", t0 + 100_000, t0 + 100_700, lat, lon)], &g, 1800, t0, 4).unwrap();
        assert_eq!(stats.outside_time, 1);
    }

    fn tensor_from(counts: Vec<Vec<u32>>) -> ActivityTensor {
        let n = counts.len();
        ActivityTensor {
            counts,
            slot_len: 1800,
            t0: 0,
            cell_ids: (0..n).collect(),
        }
    }

    #[test]
    fn downsample_keeps_top_quarter() {
        let mut counts = vec![vec![0u32; 4]; 20];
        for i in 0..80u32 {
            // distinct means
            counts.push(vec![i + 1, 0, 0, 0]);
        }
        let t = tensor_from(counts);
        let d = downsample_grids(&t, 0.25).unwrap();
        assert_eq!(d.retained, (80..100).collect::<Vec<_>>());
        assert_eq!(d.threshold, 61.0 / 4.0);
        let all = downsample_grids(&t, 1.0).unwrap();
        assert_eq!(all.retained.len(), 80);
    }

    #[test]
    fn downsample_keeps_ties_and_rejects_empty() {
        let t = tensor_from(vec![vec![2], vec![1], vec![1], vec![1], vec![0]]);
        let d = downsample_grids(&t, 0.5).unwrap();
        assert_eq!(d.retained, vec![0, 1, 2, 3]);
        let z = tensor_from(vec![vec![0, 0], vec![0, 0]]);
        assert!(matches!(downsample_grids(&z, 0.5), Err(Error::NothingToRetain)));
        assert!(downsample_grids(&t, 0.0).is_err());
    }

    #[test]
    fn class_threshold_by_enumeration() {
        let t = tensor_from(vec![vec![1, 1, 2, 2, 3, 0, 0], vec![3, 4, 4, 5, 10, 0, 0]]);
        assert_eq!(derive_class_thresholds(&t, 0.10).unwrap(), 5);
        let flat = tensor_from(vec![vec![3, 3, 3, 0]]);
        assert_eq!(derive_class_thresholds(&flat, 0.10).unwrap(), 3);
        let z = tensor_from(vec![vec![0, 0]]);
        assert!(matches!(derive_class_thresholds(&z, 0.1), Err(Error::NoPositiveCounts)));
    }

    #[test]
    fn three_way_labels() {
        assert_eq!(activity_class(0, 4), 0);
        assert_eq!(activity_class(1, 4), 1);
        assert_eq!(activity_class(4, 4), 1);
        assert_eq!(activity_class(5, 4), 2);
        let t = tensor_from(vec![vec![0, 4, 5]]);
        assert_eq!(label_classes(&t, 4).unwrap().labels, vec![vec![0, 1, 2]]);
        assert!(label_classes(&t, 0).is_err());
    }

    #[test]
    fn long_csv_round_trip() {
        let g = build_grid(ten_km_box(), 1_000.0).unwrap();
        let t = tensor_from(vec![vec![0, 3], vec![7, 1]]).restrict(&[1, 0]).unwrap();
        let mut buf = Vec::new();
        write_long_csv(&mut buf, &t.cell_ids, &t.counts).unwrap();
        let side = TensorSidecar {
            grid: g,
            t0: t.t0,
            slot_len: t.slot_len,
            n_slots: 2,
            cell_ids: t.cell_ids.clone(),
            thresholds: None,
        };
        assert_eq!(read_long_csv(buf.as_slice(), &side).unwrap(), t.counts);
    }
}

//! Spatial and temporal features: OD adjacency, DTW semantic matrix, hour and
//! weekday encodings, and sliding-window samples.

pub mod dtw;

use std::collections::{BTreeSet, HashMap};
use std::io::{Read, Write};

use chrono::{DateTime, Datelike, Timelike};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gridding::{ActivityTensor, CellId, ClassTensor, GridSpec};
use crate::ingest::Track;

pub use dtw::{dtw_table, exact_dtw, fast_dtw};

pub const DEFAULT_WINDOW: usize = 12;
pub const DEFAULT_TRAIN_RATIO: f64 = 0.8;
pub const DEFAULT_DTW_RADIUS: usize = 1;

/// Binary OD adjacency over retained cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjacencyMatrix {
    pub cells: Vec<CellId>,
    pub a: Vec<Vec<u8>>,
    pub symmetric: bool,
}

impl AdjacencyMatrix {
    pub fn zeros(cells: &[CellId]) -> Self {
        let n = cells.len();
        Self {
            cells: cells.to_vec(),
            a: vec![vec![0; n]; n],
            symmetric: true,
        }
    }

    pub fn n(&self) -> usize {
        self.cells.len()
    }

    pub fn n_edges(&self) -> usize {
        self.a.iter().flatten().filter(|&&v| v == 1).count() / 2
    }

    pub fn as_f64(&self) -> Vec<Vec<f64>> {
        self.a.iter().map(|r| r.iter().map(|&v| v as f64).collect()).collect()
    }
}

/// Marks `a(i, j) = a(j, i) = 1` for every pair of retained Moore-neighbour
/// cells linked by two consecutive fixes of one truck.
pub fn build_adjacency(tracks: &[Track], grid: &GridSpec, retained: &[CellId]) -> AdjacencyMatrix {
    let index: HashMap<CellId, usize> = retained.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let mut adj = AdjacencyMatrix::zeros(retained);
    for track in tracks {
        let mut prev: Option<CellId> = None;
        for p in &track.points {
            let cur = grid.locate(p.lat, p.lon);
            if let (Some(a), Some(b)) = (prev, cur) {
                if grid.are_moore_neighbors(a, b) {
                    if let (Some(&i), Some(&j)) = (index.get(&a), index.get(&b)) {
                        adj.a[i][j] = 1;
                        adj.a[j][i] = 1;
                    }
                }
            }
            prev = cur;
        }
    }
    if adj.n_edges() == 0 {
        log::warn!("adjacency matrix is empty: no neighbouring transitions among retained cells");
    }
    adj
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticMatrix {
    pub cells: Vec<CellId>,
    pub d: Vec<Vec<f64>>,
    pub radius: usize,
}

impl SemanticMatrix {
    /// The `kappa` cells with the smallest distance to `i` (excluding `i`);
    /// ties go to the lower index.
    pub fn nearest(&self, i: usize, kappa: usize) -> Vec<usize> {
        let mut others: Vec<usize> = (0..self.d.len()).filter(|&j| j != i).collect();
        others.sort_by(|&a, &b| self.d[i][a].total_cmp(&self.d[i][b]).then(a.cmp(&b)));
        others.truncate(kappa);
        others
    }
}

/// FastDTW distance between every pair of per-cell count series.
pub fn build_semantic_matrix(tensor: &ActivityTensor, radius: usize) -> Result<SemanticMatrix> {
    let n = tensor.n_cells();
    if n < 2 {
        return Err(Error::InvalidParameter("semantic matrix needs at least two cells".into()));
    }
    let series: Vec<Vec<f64>> = tensor
        .counts
        .iter()
        .map(|r| r.iter().map(|&v| v as f64).collect())
        .collect();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let v = fast_dtw(&series[i], &series[j], radius)?;
            d[i][j] = v;
            d[j][i] = v;
        }
    }
    Ok(SemanticMatrix {
        cells: tensor.cell_ids.clone(),
        d,
        radius,
    })
}

/// Writes `i,j,value` rows using cell ids; `skip_zero` omits zero entries.
pub fn write_triplets<W: Write, V: Into<f64> + Copy>(
    writer: W,
    cells: &[CellId],
    m: &[Vec<V>],
    skip_zero: bool,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["i", "j", "value"])?;
    for (i, row) in m.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            let v: f64 = v.into();
            if skip_zero && v == 0.0 {
                continue;
            }
            w.write_record([cells[i].to_string(), cells[j].to_string(), v.to_string()])?;
        }
    }
    w.flush().map_err(|e| Error::io("<triplet writer>", e))?;
    Ok(())
}

pub fn read_triplets<R: Read>(reader: R, cells: &[CellId]) -> Result<Vec<Vec<f64>>> {
    let index: HashMap<CellId, usize> = cells.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let n = cells.len();
    let mut m = vec![vec![0.0; n]; n];
    let mut rdr = csv::Reader::from_reader(reader);
    for rec in rdr.deserialize::<(CellId, CellId, f64)>() {
        let (i, j, v) = rec?;
        match (index.get(&i), index.get(&j)) {
            (Some(&a), Some(&b)) => m[a][b] = v,
            _ => return Err(Error::InvalidParameter(format!("triplet ({i}, {j}) outside cell set"))),
        }
    }
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TemporalEncoding {
    /// 0..=23
    pub hour: u8,
    /// 0 = Monday .. 6 = Sunday
    pub weekday: u8,
}

/// Hour and weekday of a slot's start, at a fixed UTC offset.
pub fn temporal_encoding(slot: usize, t0: i64, slot_len: i64, utc_offset_s: i32) -> TemporalEncoding {
    let ts = t0 + slot as i64 * slot_len + utc_offset_s as i64;
    let dt = DateTime::from_timestamp(ts, 0).expect("slot time out of range");
    TemporalEncoding {
        hour: dt.hour() as u8,
        weekday: dt.weekday().num_days_from_monday() as u8,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    /// Position in [`SampleSet::cell_ids`].
    pub cell: usize,
    /// Last slot of the input window.
    pub end_slot: usize,
    pub target_slot: usize,
    pub labels: Vec<u8>,
    pub encodings: Vec<TemporalEncoding>,
    /// Raw counts for the window, present only after [`SampleSet::attach_counts`].
    #[serde(default)]
    pub counts: Vec<u32>,
    pub target: u8,
}

/// Sliding-window samples ordered by window end slot, then cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSet {
    pub k: usize,
    pub horizon: usize,
    pub cell_ids: Vec<CellId>,
    pub t0: i64,
    pub slot_len: i64,
    pub samples: Vec<Sample>,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n_cells(&self) -> usize {
        self.cell_ids.len()
    }

    pub fn targets(&self) -> Vec<u8> {
        self.samples.iter().map(|s| s.target).collect()
    }

    pub fn target_slots(&self) -> BTreeSet<usize> {
        self.samples.iter().map(|s| s.target_slot).collect()
    }

    /// Copies raw counts of each input window from `tensor` (same cell order).
    pub fn attach_counts(&mut self, tensor: &ActivityTensor) -> Result<()> {
        if tensor.cell_ids != self.cell_ids {
            return Err(Error::LengthMismatch("tensor cells differ from sample cells".into()));
        }
        let k = self.k;
        for s in &mut self.samples {
            s.counts = tensor.counts[s.cell][s.end_slot + 1 - k..=s.end_slot].to_vec();
        }
        Ok(())
    }

    /// Groups samples into snapshots: all cells sharing one window end slot.
    /// Returns, per snapshot, indices into `samples` ordered by cell.
    pub fn snapshots(&self) -> Vec<Vec<usize>> {
        let mut by_slot: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for (i, s) in self.samples.iter().enumerate() {
            by_slot.entry(s.end_slot).or_default().push(i);
        }
        by_slot
            .into_values()
            .map(|mut v| {
                v.sort_by_key(|&i| self.samples[i].cell);
                v
            })
            .collect()
    }

    fn with_samples(&self, samples: Vec<Sample>) -> SampleSet {
        SampleSet {
            k: self.k,
            horizon: self.horizon,
            cell_ids: self.cell_ids.clone(),
            t0: self.t0,
            slot_len: self.slot_len,
            samples,
        }
    }

    /// Samples whose target slot is in `slots`.
    pub fn filter_target_slots(&self, slots: &BTreeSet<usize>) -> SampleSet {
        self.with_samples(
            self.samples
                .iter()
                .filter(|s| slots.contains(&s.target_slot))
                .cloned()
                .collect(),
        )
    }
}

/// One sample per cell and per window end `t` with `k` slots of history and a
/// target `horizon` slots ahead.
pub fn make_windows(classes: &ClassTensor, k: usize, horizon: usize, utc_offset_s: i32) -> Result<SampleSet> {
    if k == 0 || horizon == 0 {
        return Err(Error::InvalidParameter("window and horizon must be >= 1".into()));
    }
    let n_slots = classes.n_slots();
    if n_slots < k + horizon {
        return Err(Error::InsufficientSlots {
            needed: k + horizon,
            available: n_slots,
        });
    }
    let encodings: Vec<TemporalEncoding> = (0..n_slots)
        .map(|s| temporal_encoding(s, classes.t0, classes.slot_len, utc_offset_s))
        .collect();
    let mut samples = Vec::with_capacity(classes.n_cells() * (n_slots - k - horizon + 1));
    for end in (k - 1)..(n_slots - horizon) {
        let start = end + 1 - k;
        for (cell, row) in classes.labels.iter().enumerate() {
            samples.push(Sample {
                cell,
                end_slot: end,
                target_slot: end + horizon,
                labels: row[start..=end].to_vec(),
                encodings: encodings[start..=end].to_vec(),
                counts: Vec::new(),
                target: row[end + horizon],
            });
        }
    }
    Ok(SampleSet {
        k,
        horizon,
        cell_ids: classes.cell_ids.clone(),
        t0: classes.t0,
        slot_len: classes.slot_len,
        samples,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Earliest target slots train, the rest test.
    #[default]
    Chronological,
    /// Target slots shuffled with the seed before the cut.
    Random,
}

/// Splits by target slot so each snapshot lands on one side. At least one
/// slot always goes to the test side.
pub fn split_dataset(samples: &SampleSet, train_ratio: f64, seed: u64, mode: SplitMode) -> Result<(SampleSet, SampleSet)> {
    if !(train_ratio > 0.0 && train_ratio < 1.0) {
        return Err(Error::InvalidParameter(format!("train ratio {train_ratio}")));
    }
    let mut slots: Vec<usize> = samples.target_slots().into_iter().collect();
    let n = slots.len();
    let n_train = ((train_ratio * n as f64) + 1e-9).floor() as usize;
    let n_train = n_train.min(n.saturating_sub(1));
    if n_train == 0 {
        return Err(Error::EmptySplit("train"));
    }
    if n_train == n {
        return Err(Error::EmptySplit("test"));
    }
    if mode == SplitMode::Random {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        slots.shuffle(&mut rng);
    }
    let train: BTreeSet<usize> = slots[..n_train].iter().copied().collect();
    let test: BTreeSet<usize> = slots[n_train..].iter().copied().collect();
    Ok((samples.filter_target_slots(&train), samples.filter_target_slots(&test)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleFileHeader {
    pub k: usize,
    pub horizon: usize,
    pub cell_ids: Vec<CellId>,
    pub t0: i64,
    pub slot_len: i64,
    /// Inclusive range of target slots, `None` when empty.
    pub slot_range: Option<(usize, usize)>,
    pub n_samples: usize,
    pub has_counts: bool,
}

const SAMPLE_MAGIC: &[u8; 4] = b"HCSS";

/// Binary record file: magic, little-endian `u32` header length, JSON header,
/// then fixed-size records.
pub fn write_samples<W: Write>(mut w: W, set: &SampleSet) -> Result<()> {
    let slots = set.target_slots();
    let has_counts = set.samples.first().is_some_and(|s| !s.counts.is_empty());
    let header = SampleFileHeader {
        k: set.k,
        horizon: set.horizon,
        cell_ids: set.cell_ids.clone(),
        t0: set.t0,
        slot_len: set.slot_len,
        slot_range: slots.first().copied().zip(slots.last().copied()),
        n_samples: set.len(),
        has_counts,
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(8 + json.len() + set.len() * (13 + 3 * set.k));
    buf.extend_from_slice(SAMPLE_MAGIC);
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    for s in &set.samples {
        buf.extend_from_slice(&(s.cell as u32).to_le_bytes());
        buf.extend_from_slice(&(s.end_slot as u32).to_le_bytes());
        buf.extend_from_slice(&(s.target_slot as u32).to_le_bytes());
        buf.push(s.target);
        buf.extend_from_slice(&s.labels);
        for e in &s.encodings {
            buf.push(e.hour);
            buf.push(e.weekday);
        }
        if has_counts {
            for c in &s.counts {
                buf.extend_from_slice(&c.to_le_bytes());
            }
        }
    }
    w.write_all(&buf).map_err(|e| Error::io("<sample writer>", e))
}

pub fn read_samples<R: Read>(mut r: R) -> Result<SampleSet> {
    let bad = |reason: &str| Error::Format {
        path: "<samples>".into(),
        reason: reason.into(),
    };
    let mut buf = Vec::new();
    r.read_to_end(&mut buf).map_err(|e| Error::io("<sample reader>", e))?;
    if buf.len() < 8 || &buf[..4] != SAMPLE_MAGIC {
        return Err(bad("missing magic"));
    }
    let hlen = u32::from_le_bytes(buf[4..8].try_into().unwrap()) as usize;
    let body = buf.get(8..8 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: SampleFileHeader = serde_json::from_slice(body)?;
    let k = header.k;
    let rec_len = 13 + 3 * k + if header.has_counts { 4 * k } else { 0 };
    let data = &buf[8 + hlen..];
    if data.len() != rec_len * header.n_samples {
        return Err(bad("record section has the wrong length"));
    }
    let u32_at = |b: &[u8], o: usize| u32::from_le_bytes(b[o..o + 4].try_into().unwrap());
    let samples = data
        .chunks_exact(rec_len)
        .map(|rec| {
            let labels = rec[13..13 + k].to_vec();
            let encodings = rec[13 + k..13 + 3 * k]
                .chunks_exact(2)
                .map(|c| TemporalEncoding { hour: c[0], weekday: c[1] })
                .collect();
            let counts = if header.has_counts {
                (0..k).map(|i| u32_at(rec, 13 + 3 * k + 4 * i)).collect()
            } else {
                Vec::new()
            };
            Sample {
                cell: u32_at(rec, 0) as usize,
                end_slot: u32_at(rec, 4) as usize,
                target_slot: u32_at(rec, 8) as usize,
                target: rec[12],
                labels,
                encodings,
                counts,
            }
        })
        .collect();
    Ok(SampleSet {
        k,
        horizon: header.horizon,
        cell_ids: header.cell_ids,
        t0: header.t0,
        slot_len: header.slot_len,
        samples,
    })
}

use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use haulcast::eval::CellSlot;
use haulcast::gridding::GridSpec;
use haulcast::models::ProbTensor;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

pub const MANIFEST: &str = "manifest.json";
pub const FAILURE_MARKER: &str = "FAILED";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InputHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub seeds: Vec<u64>,
    pub jobs: usize,
    pub inputs: Vec<InputHash>,
    pub outputs: Vec<String>,
    pub config: Value,
}

/// Collects the files a command writes into its output directory.
pub struct OutDir {
    pub root: PathBuf,
    pub written: Vec<String>,
}

impl OutDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        let marker = root.join(FAILURE_MARKER);
        if marker.exists() {
            fs::remove_file(&marker)?;
        }
        Ok(OutDir {
            root: root.to_path_buf(),
            written: Vec::new(),
        })
    }

    /// Opens `name` (relative, parents created) for writing and records it.
    pub fn file(&mut self, name: &str) -> Result<BufWriter<File>> {
        let path = self.root.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let f = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        self.written.push(name.to_string());
        Ok(BufWriter::new(f))
    }

    pub fn path(&mut self, name: &str) -> Result<PathBuf> {
        let path = self.root.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        self.written.push(name.to_string());
        Ok(path)
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut w = self.file(name)?;
        serde_json::to_writer_pretty(&mut w, value)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

pub fn hash_inputs(paths: &[&Path]) -> Result<Vec<InputHash>> {
    paths
        .iter()
        .map(|p| {
            Ok(InputHash {
                path: p.display().to_string(),
                sha256: sha256_file(p)?,
            })
        })
        .collect()
}

/// One predicted test cell-slot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub cell_id: usize,
    pub slot: usize,
    pub p0: f64,
    pub p1: f64,
    pub p2: f64,
    pub pred: u8,
    #[serde(rename = "true")]
    pub truth: u8,
}

pub fn prediction_rows(keys: &[CellSlot], probs: &ProbTensor, truth: &[u8]) -> Vec<PredictionRow> {
    let pred = probs.argmax();
    keys.iter()
        .zip(&probs.rows)
        .zip(pred.iter().zip(truth))
        .map(|((k, p), (&pr, &t))| PredictionRow {
            cell_id: k.cell,
            slot: k.slot,
            p0: p[0],
            p1: p[1],
            p2: p[2],
            pred: pr,
            truth: t,
        })
        .collect()
}

pub fn write_predictions<W: Write>(w: W, rows: &[PredictionRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRow>> {
    let mut rdr = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    rdr.deserialize().collect::<std::result::Result<_, _>>().with_context(|| format!("reading {}", path.display()))
}

/// Polygon feature per prediction row, coordinates in `[lon, lat]` order.
pub fn geojson(grid: &GridSpec, rows: &[PredictionRow]) -> Value {
    let features: Vec<Value> = rows
        .iter()
        .map(|r| {
            let ring: Vec<[f64; 2]> = grid.cell_ring(r.cell_id).iter().map(|&(lon, lat)| [lon, lat]).collect();
            json!({
                "type": "Feature",
                "geometry": { "type": "Polygon", "coordinates": [ring] },
                "properties": {
                    "cell_id": r.cell_id,
                    "slot": r.slot,
                    "pred_class": r.pred,
                    "true_class": r.truth,
                    "p0": r.p0,
                    "p1": r.p1,
                    "p2": r.p2,
                }
            })
        })
        .collect();
    json!({ "type": "FeatureCollection", "features": features })
}

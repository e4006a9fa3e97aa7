//! Base classifiers over sliding activity windows and their training loop.
//!
//! Every model maps a window of `k` slots to a probability row over the
//! three activity classes. Per slot it sees the one-hot class, learned hour
//! and weekday embeddings and optionally `ln(1 + count)`. `birnn` and `tcn`
//! read one cell at a time; `stgcn_lite` and `pdformer_lite` read whole
//! snapshots (every retained cell at one window end) and mix information
//! across cells.

mod nets;
mod train;

#[cfg(test)]
mod tests;

use std::fmt;
use std::path::Path;
use std::rc::Rc;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{AdjacencyMatrix, Sample, SampleSet, SemanticMatrix};
use crate::tensor::{Checkpoint, Graph, ParamStore, Var};

pub use train::{train_model, EpochRecord, TrainConfig, TrainedModel, DEFAULT_CLASS_WEIGHTS};

pub const N_CLASSES: usize = 3;
pub const DEFAULT_HIDDEN: usize = 32;
pub const DEFAULT_KERNEL: usize = 3;
pub const DEFAULT_KAPPA: usize = 4;
const LOG_FLOOR: f64 = 1e-12;
/// Samples per forward pass when only predicting.
const PREDICT_BATCH: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Birnn,
    Tcn,
    StgcnLite,
    PdformerLite,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [ModelKind::Birnn, ModelKind::Tcn, ModelKind::StgcnLite, ModelKind::PdformerLite];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Birnn => "birnn",
            ModelKind::Tcn => "tcn",
            ModelKind::StgcnLite => "stgcn_lite",
            ModelKind::PdformerLite => "pdformer_lite",
        }
    }

    /// Reads whole snapshots rather than single cells.
    pub fn is_spatial(self) -> bool {
        matches!(self, ModelKind::StgcnLite | ModelKind::PdformerLite)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown model kind {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub hidden: usize,
    /// Recurrent layers, graph blocks or attention layers; at most 2.
    pub layers: usize,
    pub kernel: usize,
    pub dilations: Vec<usize>,
    /// Temporal attention heads (`pdformer_lite`).
    pub heads: usize,
    /// Semantic neighbours per cell (`pdformer_lite`).
    pub kappa: usize,
    /// Applied to the final representation during training only.
    pub dropout: f64,
    pub embed_dim: usize,
    /// Adds `ln(1 + count)` to the per-slot inputs.
    pub use_counts: bool,
    /// Skips cross-cell mixing while keeping every parameter shape.
    pub temporal_only: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::new(ModelKind::Birnn)
    }
}

impl ModelConfig {
    pub fn new(kind: ModelKind) -> Self {
        ModelConfig {
            kind,
            hidden: DEFAULT_HIDDEN,
            layers: 1,
            kernel: DEFAULT_KERNEL,
            dilations: vec![1, 2],
            heads: 2,
            kappa: DEFAULT_KAPPA,
            dropout: 0.0,
            embed_dim: 4,
            use_counts: false,
            temporal_only: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.hidden == 0 || self.kernel == 0 || self.embed_dim == 0 || self.heads == 0 {
            return bad("hidden size, kernel, embedding size and heads must be positive".into());
        }
        if !(1..=2).contains(&self.layers) {
            return bad(format!("layers must be 1 or 2, got {}", self.layers));
        }
        if self.dilations.is_empty() || self.dilations[0] == 0 || self.dilations.windows(2).any(|w| w[1] <= w[0]) {
            return bad(format!("dilations must be positive and strictly increasing: {:?}", self.dilations));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return bad(format!("hidden size {} not divisible by {} heads", self.hidden, self.heads));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// Steps of history seen by the last output of the convolution stack.
    pub fn receptive_field(&self) -> usize {
        match self.kind {
            ModelKind::Tcn => 1 + (self.kernel - 1) * self.dilations.iter().sum::<usize>(),
            ModelKind::StgcnLite => {
                let (d1, d2) = self.stgcn_dilations();
                1 + (self.kernel - 1) * (d1 + d2) * self.layers
            }
            _ => 1,
        }
    }

    pub(crate) fn stgcn_dilations(&self) -> (usize, usize) {
        (self.dilations[0], *self.dilations.get(1).unwrap_or(&self.dilations[0]))
    }

    fn input_dim(&self) -> usize {
        N_CLASSES + self.use_counts as usize + 2 * self.embed_dim
    }
}

/// Class probabilities, one simplex row per sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbTensor {
    pub rows: Vec<[f64; N_CLASSES]>,
}

impl ProbTensor {
    pub fn new(rows: Vec<[f64; N_CLASSES]>) -> Result<Self> {
        for (i, r) in rows.iter().enumerate() {
            let s: f64 = r.iter().sum();
            if r.iter().any(|&p| !(p >= 0.0)) || (s - 1.0).abs() > 1e-9 {
                return Err(Error::NonFinite(format!("row {i} is not a probability row: {r:?}")));
            }
        }
        Ok(ProbTensor { rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Most probable class per row; ties go to the higher class.
    pub fn argmax(&self) -> Vec<u8> {
        self.rows.iter().map(argmax_high).collect()
    }
}

pub(crate) fn argmax_high(row: &[f64; N_CLASSES]) -> u8 {
    let mut best = 0;
    for c in 1..N_CLASSES {
        if row[c] >= row[best] {
            best = c;
        }
    }
    best as u8
}

static CLAMPED: AtomicU64 = AtomicU64::new(0);

/// Times [`weighted_cross_entropy`] clamped a zero probability.
pub fn clamp_count() -> u64 {
    CLAMPED.load(Ordering::Relaxed)
}

/// `-w[target] * ln(p[target])`, with `p[target]` clamped below at `1e-12`.
pub fn weighted_cross_entropy(probs: &[f64; N_CLASSES], target: u8, weights: [f64; N_CLASSES]) -> f64 {
    let t = target as usize;
    let mut p = probs[t];
    if p < LOG_FLOOR {
        CLAMPED.fetch_add(1, Ordering::Relaxed);
        p = LOG_FLOOR;
    }
    -weights[t] * p.ln()
}

/// Mean weighted cross-entropy over a batch.
pub fn batch_loss(probs: &ProbTensor, targets: &[u8], weights: [f64; N_CLASSES]) -> Result<f64> {
    if probs.len() != targets.len() {
        return Err(Error::LengthMismatch(format!(
            "{} probability rows for {} targets",
            probs.len(),
            targets.len()
        )));
    }
    if targets.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = probs
        .rows
        .iter()
        .zip(targets)
        .map(|(r, &t)| weighted_cross_entropy(r, t, weights))
        .sum();
    Ok(total / targets.len() as f64)
}

/// Cross-cell inputs of the spatial models, aligned with the sample cells.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphFeatures {
    pub adjacency: AdjacencyMatrix,
    pub semantic: Option<SemanticMatrix>,
}

/// `D^-1/2 (A + I) D^-1/2`, row-major.
pub fn normalized_adjacency(a: &AdjacencyMatrix) -> Vec<f64> {
    let n = a.n();
    let deg: Vec<f64> = (0..n)
        .map(|i| 1.0 + (0..n).filter(|&j| j != i && a.a[i][j] != 0).count() as f64)
        .collect();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let aij = if i == j { 1.0 } else { (a.a[i][j] != 0) as u8 as f64 };
            if aij != 0.0 {
                out[i * n + j] = aij / (deg[i] * deg[j]).sqrt();
            }
        }
    }
    out
}

/// Row-major `n x n` masks: geographic neighbours (`A(i,j) = 1`) and the
/// `kappa` semantically nearest cells.
pub fn attention_masks(adjacency: &AdjacencyMatrix, semantic: &SemanticMatrix, kappa: usize) -> Result<(Vec<bool>, Vec<bool>)> {
    let n = adjacency.n();
    if semantic.cells != adjacency.cells {
        return Err(Error::LengthMismatch("semantic and adjacency matrices cover different cells".into()));
    }
    if kappa >= n {
        return Err(Error::InvalidParameter(format!(
            "kappa {kappa} must be smaller than the {n} cells"
        )));
    }
    let mut geo = vec![false; n * n];
    let mut sem = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            geo[i * n + j] = i != j && adjacency.a[i][j] != 0;
        }
        for j in semantic.nearest(i, kappa) {
            sem[i * n + j] = true;
        }
    }
    Ok((geo, sem))
}

/// Precomputed cross-cell constants of a spatial model.
#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Mixing {
    None,
    Graph { n: usize, a_hat: Vec<f64> },
    Attention { n: usize, geo: Vec<bool>, sem: Vec<bool> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SavedModel {
    config: ModelConfig,
    k: usize,
}

/// A configured network with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub k: usize,
    pub params: ParamStore,
    pub(crate) mixing: Mixing,
}

impl Model {
    /// Builds a model for windows of `k` slots with seeded initial weights.
    /// Spatial kinds need `features`; the others ignore them.
    pub fn new(config: ModelConfig, k: usize, features: Option<&GraphFeatures>, seed: u64) -> Result<Model> {
        config.validate()?;
        if k == 0 {
            return Err(Error::InvalidParameter("window length must be positive".into()));
        }
        let rf = config.receptive_field();
        if k < rf {
            return Err(Error::WindowTooShort { have: k, need: rf });
        }
        let mixing = match config.kind {
            ModelKind::Birnn | ModelKind::Tcn => Mixing::None,
            ModelKind::StgcnLite => {
                let f = features.ok_or_else(|| Error::InvalidParameter("stgcn_lite needs an adjacency matrix".into()))?;
                Mixing::Graph {
                    n: f.adjacency.n(),
                    a_hat: normalized_adjacency(&f.adjacency),
                }
            }
            ModelKind::PdformerLite => {
                let f = features.ok_or_else(|| Error::InvalidParameter("pdformer_lite needs adjacency and semantic matrices".into()))?;
                let sem = f
                    .semantic
                    .as_ref()
                    .ok_or_else(|| Error::InvalidParameter("pdformer_lite needs a semantic matrix".into()))?;
                let (geo, sem) = attention_masks(&f.adjacency, sem, config.kappa)?;
                Mixing::Attention {
                    n: f.adjacency.n(),
                    geo,
                    sem,
                }
            }
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = nets::init_params(&config, k, &mut rng);
        Ok(Model {
            config,
            k,
            params,
            mixing,
        })
    }

    /// Cells per snapshot for spatial models.
    pub fn n_cells(&self) -> Option<usize> {
        match &self.mixing {
            Mixing::None => None,
            Mixing::Graph { n, .. } | Mixing::Attention { n, .. } => Some(*n),
        }
    }

    /// Adds the forward pass for `batch` to `g`, returning `[batch, 3]`
    /// probabilities. Spatial models take whole snapshots, cells in order.
    pub fn forward(&self, g: &mut Graph, vars: &[Var], batch: &[&Sample], dropout: Option<&mut ChaCha8Rng>) -> Result<Var> {
        if vars.len() != self.params.len() {
            return Err(Error::Shape(format!("{} bound parameters, model has {}", vars.len(), self.params.len())));
        }
        if batch.is_empty() {
            return Err(Error::EmptySequence);
        }
        let k = self.k;
        if let Some(s) = batch.iter().find(|s| s.labels.len() != k || s.encodings.len() != k) {
            return Err(Error::Shape(format!("window of {} slots, model expects {k}", s.labels.len())));
        }
        if self.config.use_counts && batch.iter().any(|s| s.counts.len() != k) {
            return Err(Error::Shape("model reads counts but samples carry none".into()));
        }
        if let Some(n) = self.n_cells() {
            check_snapshots(batch, n)?;
        }
        let p = nets::Params::new(&self.params, vars);
        let x = nets::inputs(g, &p, &self.config, batch)?;
        let rep = match self.config.kind {
            ModelKind::Birnn => nets::birnn(g, &p, &self.config, x, batch.len(), k)?,
            ModelKind::Tcn => nets::tcn(g, &p, &self.config, x, batch.len(), k)?,
            ModelKind::StgcnLite => {
                let Mixing::Graph { n, a_hat } = &self.mixing else { unreachable!() };
                let mix = (!self.config.temporal_only).then(|| Rc::new(a_hat.clone()));
                nets::stgcn(g, &p, &self.config, x, batch.len(), k, *n, mix)?
            }
            ModelKind::PdformerLite => {
                let Mixing::Attention { n, geo, sem } = &self.mixing else { unreachable!() };
                let masks = (!self.config.temporal_only).then(|| {
                    let s = batch.len() / n;
                    (Rc::new(geo.repeat(s)), Rc::new(sem.repeat(s)))
                });
                nets::pdformer(g, &p, &self.config, x, batch.len(), k, *n, masks)?.0
            }
        };
        nets::head(g, &p, rep, self.config.dropout, dropout)
    }

    /// Worst relative error between the analytic gradient of the weighted
    /// batch loss and central differences with step `eps`, over at most
    /// `max_coords` parameter coordinates.
    pub fn gradient_check(&self, batch: &[&Sample], weights: [f64; N_CLASSES], eps: f64, max_coords: usize, seed: u64) -> Result<f64> {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g);
        let probs = self.forward(&mut g, &vars, batch, None)?;
        let n = batch.len() as f64;
        let targets: Vec<usize> = batch.iter().map(|s| s.target as usize).collect();
        let coef = targets.iter().map(|&t| weights[t] / n).collect();
        let loss = g.weighted_nll(probs, targets, coef)?;
        crate::tensor::finite_diff_check(&mut g, loss, &vars, eps, max_coords, seed)
    }

    /// Probability rows aligned with `set.samples`.
    pub fn predict(&self, set: &SampleSet) -> Result<ProbTensor> {
        let mut rows = vec![[0.0; N_CLASSES]; set.len()];
        for chunk in self.batches(set, PREDICT_BATCH)? {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &set.samples[i]).collect();
            let mut g = Graph::new();
            let vars = self.params.bind(&mut g);
            let out = self.forward(&mut g, &vars, &batch, None)?;
            let t = g.output(out)?;
            for (r, &i) in chunk.iter().enumerate() {
                rows[i] = [t.get(r, 0), t.get(r, 1), t.get(r, 2)];
            }
        }
        ProbTensor::new(rows)
    }

    /// Sample indices grouped into forward batches of about `size` samples;
    /// spatial models keep snapshots whole.
    pub(crate) fn batches(&self, set: &SampleSet, size: usize) -> Result<Vec<Vec<usize>>> {
        match self.n_cells() {
            None => Ok((0..set.len()).collect::<Vec<_>>().chunks(size.max(1)).map(|c| c.to_vec()).collect()),
            Some(n) => {
                if set.n_cells() != n {
                    return Err(Error::Shape(format!(
                        "adjacency covers {n} cells, samples cover {}",
                        set.n_cells()
                    )));
                }
                let per = (size / n).max(1);
                Ok(set.snapshots().chunks(per).map(|c| c.concat()).collect())
            }
        }
    }

    pub fn to_checkpoint(&self, seed: u64, step: u64) -> Checkpoint {
        let mut ck = Checkpoint::new(self.params.clone(), seed, step);
        ck.manifest.model = serde_json::to_value(SavedModel {
            config: self.config.clone(),
            k: self.k,
        })
        .ok();
        ck
    }

    pub fn save(&self, stem: &Path, seed: u64, step: u64) -> Result<()> {
        self.to_checkpoint(seed, step).save(stem)
    }

    /// Rebuilds a saved model; `features` must match the ones it was trained with.
    pub fn load(stem: &Path, features: Option<&GraphFeatures>) -> Result<Model> {
        let ck = Checkpoint::load(stem)?;
        let saved: SavedModel = serde_json::from_value(ck.manifest.model.clone().ok_or_else(|| Error::Format {
            path: stem.to_path_buf(),
            reason: "checkpoint carries no model description".into(),
        })?)?;
        let mut model = Model::new(saved.config, saved.k, features, ck.manifest.seed)?;
        if model.params.names() != ck.params.names()
            || model
                .params
                .tensors()
                .iter()
                .zip(ck.params.tensors())
                .any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::Format {
                path: stem.to_path_buf(),
                reason: "parameter layout does not match the model description".into(),
            });
        }
        model.params = ck.params;
        Ok(model)
    }
}

fn check_snapshots(batch: &[&Sample], n: usize) -> Result<()> {
    if !batch.len().is_multiple_of(n) {
        return Err(Error::Shape(format!("{} samples do not form snapshots of {n} cells", batch.len())));
    }
    for snap in batch.chunks(n) {
        let end = snap[0].end_slot;
        if snap.iter().enumerate().any(|(i, s)| s.cell != i || s.end_slot != end) {
            return Err(Error::Shape(format!("snapshot ending at slot {end} is not one full set of cells in order")));
        }
    }
    Ok(())
}

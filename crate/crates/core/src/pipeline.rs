//! End-to-end experiment: stay points to activity classes, training of every
//! base model for every seed, soft-vote fusion and scoring.

use std::collections::BTreeMap;

use log::info;
use serde::{Deserialize, Serialize};

use crate::ensemble::{fuse, EnsembleConfig};
use crate::error::{Error, Result};
use crate::eval::{
    aggregate_seeds, confusion_matrix, prf, relaxed_high_activity, CellSlot, ClassMetrics, ConfusionMatrix, HorizonReport,
    MetricsReport, RelaxedReport,
};
use crate::features::{
    build_adjacency, build_semantic_matrix, make_windows, split_dataset, AdjacencyMatrix, SampleSet, SemanticMatrix,
    SplitMode, DEFAULT_DTW_RADIUS, DEFAULT_TRAIN_RATIO, DEFAULT_WINDOW,
};
use crate::gridding::{
    build_grid, count_activity, derive_class_thresholds, downsample_grids, label_classes, ActivityTensor, BBox,
    CellId, ClassTensor, ClassThresholds, CountStats, GridSpec, DEFAULT_CELL_SIZE_M, DEFAULT_KEEP_FRACTION, DEFAULT_SLOT_LEN_S,
    DEFAULT_TOP_FRACTION, PINNED_MEDIUM_BOUND,
};
use crate::ingest::{detect_all, StayParams, StayPoint, Track};
use crate::models::{train_model, GraphFeatures, ModelConfig, ModelKind, ProbTensor, TrainConfig, TrainedModel};

/// How the medium/high boundary is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "bound")]
pub enum ThresholdMode {
    /// Derived from the training period with `top_fraction`.
    Derive,
    Pinned(u32),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Grid extent; the data extent when absent.
    pub bbox: Option<BBox>,
    pub cell_size_m: f64,
    pub stay: StayParams,
    pub slot_len_s: i64,
    /// Start of slot 0; the first stay start rounded down to a day when absent.
    pub t0: Option<i64>,
    /// Share of active cells kept; all cells are kept when absent.
    pub keep_fraction: Option<f64>,
    pub top_fraction: f64,
    pub thresholds: ThresholdMode,
    pub window: usize,
    pub horizon: usize,
    pub train_ratio: f64,
    /// Latest share of the training slots held out for model selection.
    pub val_fraction: f64,
    pub dtw_radius: usize,
    pub utc_offset_s: i32,
    pub models: Vec<ModelConfig>,
    pub train: TrainConfig,
    pub ensemble: EnsembleConfig,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            bbox: None,
            cell_size_m: DEFAULT_CELL_SIZE_M,
            stay: StayParams::default(),
            slot_len_s: DEFAULT_SLOT_LEN_S,
            t0: None,
            keep_fraction: Some(DEFAULT_KEEP_FRACTION),
            top_fraction: DEFAULT_TOP_FRACTION,
            thresholds: ThresholdMode::Derive,
            window: DEFAULT_WINDOW,
            horizon: 1,
            train_ratio: DEFAULT_TRAIN_RATIO,
            val_fraction: 0.1,
            dtw_radius: DEFAULT_DTW_RADIUS,
            utc_offset_s: 0,
            models: ModelKind::ALL.into_iter().map(ModelConfig::new).collect(),
            train: TrainConfig::default(),
            ensemble: EnsembleConfig::default(),
            seeds: vec![0],
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::InvalidParameter("at least one seed is needed".into()));
        }
        if self.models.is_empty() {
            return Err(Error::InvalidParameter("at least one model is needed".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::InvalidParameter(format!("validation fraction {}", self.val_fraction)));
        }
        self.stay.validate()?;
        self.train.validate()?;
        self.ensemble.validate()?;
        for m in &self.models {
            m.validate()?;
        }
        Ok(())
    }
}

/// Everything the models consume, derived from stay points.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub grid: GridSpec,
    pub count_stats: CountStats,
    /// Counts over every grid cell.
    pub activity: ActivityTensor,
    pub retained: Vec<usize>,
    pub classes: ClassTensor,
    pub adjacency: AdjacencyMatrix,
    pub semantic: SemanticMatrix,
    pub train: SampleSet,
    pub val: SampleSet,
    pub test: SampleSet,
    /// Slots before this index form the training period.
    pub history_slots: usize,
}

impl Prepared {
    pub fn graph_features(&self) -> GraphFeatures {
        GraphFeatures {
            adjacency: self.adjacency.clone(),
            semantic: Some(self.semantic.clone()),
        }
    }
}

fn data_bbox(tracks: &[Track]) -> Result<BBox> {
    let mut it = tracks.iter().flat_map(|t| &t.points);
    let first = it.next().ok_or(Error::EmptySequence)?;
    let mut b = BBox {
        lat_min: first.lat,
        lon_min: first.lon,
        lat_max: first.lat,
        lon_max: first.lon,
    };
    for p in it {
        b.lat_min = b.lat_min.min(p.lat);
        b.lat_max = b.lat_max.max(p.lat);
        b.lon_min = b.lon_min.min(p.lon);
        b.lon_max = b.lon_max.max(p.lon);
    }
    Ok(b)
}

fn truncate_slots(t: &ActivityTensor, n: usize) -> ActivityTensor {
    ActivityTensor {
        counts: t.counts.iter().map(|r| r[..n.min(r.len())].to_vec()).collect(),
        ..t.clone()
    }
}

/// Grid, counts, classes, graph features and the chronological
/// train/validation/test split. Cell selection, thresholds and the semantic
/// matrix only look at the training period.
pub fn prepare(tracks: &[Track], stays: &[StayPoint], cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate()?;
    let bbox = match cfg.bbox {
        Some(b) => b,
        None => data_bbox(tracks)?,
    };
    let grid = build_grid(bbox, cfg.cell_size_m)?;
    if stays.is_empty() {
        return Err(Error::EmptySequence);
    }
    let t0 = cfg
        .t0
        .unwrap_or_else(|| stays.iter().map(|s| s.t_start).min().unwrap().div_euclid(86_400) * 86_400);
    let t_last = stays.iter().map(|s| s.t_end).max().unwrap();
    let n_slots = ((t_last - t0) as f64 / cfg.slot_len_s as f64).ceil().max(1.0) as usize;
    let (activity, count_stats) = count_activity(stays, &grid, cfg.slot_len_s, t0, n_slots)?;
    let history_slots = ((cfg.train_ratio * n_slots as f64).floor() as usize).max(1);
    let history = truncate_slots(&activity, history_slots);

    let retained = match cfg.keep_fraction {
        Some(f) => downsample_grids(&history, f)?.retained,
        None => activity.cell_ids.clone(),
    };
    let kept = activity.restrict(&retained)?;
    let bound = match cfg.thresholds {
        ThresholdMode::Derive => derive_class_thresholds(&history.restrict(&retained)?, cfg.top_fraction)?,
        ThresholdMode::Pinned(b) => b,
    };
    let mut classes = label_classes(&kept, bound)?;
    classes.thresholds = ClassThresholds {
        zero_bound: 0,
        medium_bound: bound,
    };
    let adjacency = build_adjacency(tracks, &grid, &retained);
    let semantic = build_semantic_matrix(&truncate_slots(&kept, history_slots), cfg.dtw_radius)?;

    let mut samples = make_windows(&classes, cfg.window, cfg.horizon, cfg.utc_offset_s)?;
    if cfg.models.iter().any(|m| m.use_counts) {
        samples.attach_counts(&kept)?;
    }
    let (train_all, test) = split_dataset(&samples, cfg.train_ratio, 0, SplitMode::Chronological)?;
    let (train, val) = if cfg.val_fraction > 0.0 {
        split_dataset(&train_all, 1.0 - cfg.val_fraction, 0, SplitMode::Chronological)?
    } else {
        let empty = SampleSet {
            samples: Vec::new(),
            ..train_all.clone()
        };
        (train_all, empty)
    };
    info!(
        "{} of {} cells retained, medium bound {bound}, {} train / {} val / {} test samples",
        retained.len(),
        grid.n_cells(),
        train.len(),
        val.len(),
        test.len()
    );
    Ok(Prepared {
        grid,
        count_stats,
        activity,
        retained,
        classes,
        adjacency,
        semantic,
        train,
        val,
        test,
        history_slots,
    })
}

/// Stay detection followed by [`prepare`].
pub fn prepare_from_tracks(tracks: &[Track], cfg: &ExperimentConfig) -> Result<(Vec<StayPoint>, Prepared)> {
    let stays = detect_all(tracks, &cfg.stay)?;
    let prepared = prepare(tracks, &stays, cfg)?;
    Ok((stays, prepared))
}

/// One trained base model and its test probabilities.
#[derive(Debug, Clone)]
pub struct ModelRun {
    pub kind: ModelKind,
    pub trained: TrainedModel,
    pub test_probs: ProbTensor,
}

#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub models: Vec<ModelRun>,
    pub fused: ProbTensor,
}

/// Trains every configured model for every seed on up to `jobs` threads.
pub fn train_all(prepared: &Prepared, cfg: &ExperimentConfig, jobs: usize) -> Result<Vec<SeedRun>> {
    let features = prepared.graph_features();
    let tasks: Vec<(u64, &ModelConfig)> = cfg
        .seeds
        .iter()
        .flat_map(|&s| cfg.models.iter().map(move |m| (s, m)))
        .collect();
    let results = crate::parallel::map(&tasks, jobs, |&(seed, mc)| -> Result<ModelRun> {
        let tc = TrainConfig {
            seed,
            ..cfg.train.clone()
        };
        let trained = train_model(mc, &tc, Some(&features), &prepared.train, &prepared.val)?;
        let test_probs = trained.model.predict(&prepared.test)?;
        info!("seed {seed} {} trained, best epoch {}", mc.kind, trained.best_epoch);
        Ok(ModelRun {
            kind: mc.kind,
            trained,
            test_probs,
        })
    });
    let mut results = results.into_iter();
    let mut runs = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let models: Vec<ModelRun> = (0..cfg.models.len())
            .map(|_| results.next().expect("one result per task"))
            .collect::<Result<_>>()?;
        let pairs: Vec<(ModelKind, ProbTensor)> = models.iter().map(|m| (m.kind, m.test_probs.clone())).collect();
        let fused = fuse(&pairs, &cfg.ensemble)?;
        runs.push(SeedRun { seed, models, fused });
    }
    Ok(runs)
}

/// Scores of one probability set on the test samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scored {
    pub metrics: MetricsReport,
    pub confusion: ConfusionMatrix,
    pub relaxed: RelaxedReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub ensemble: Scored,
    pub models: BTreeMap<String, Scored>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub horizon: usize,
    pub window: usize,
    pub n_cells: usize,
    pub retained_cells: usize,
    pub medium_bound: u32,
    pub zero_fraction: f64,
    pub test_class_mix: [f64; 3],
    pub n_test: usize,
    /// Always predicting the most frequent training class.
    pub majority_baseline: MetricsReport,
    pub seeds: Vec<SeedReport>,
    /// Mean and sample standard deviation across seeds, keyed by model name
    /// and `ensemble`; empty with a single seed.
    pub summary: BTreeMap<String, MetricsReport>,
}

/// Cell id and target slot of every test sample.
pub fn test_keys(prepared: &Prepared) -> Vec<CellSlot> {
    prepared
        .test
        .samples
        .iter()
        .map(|s| CellSlot {
            cell: prepared.test.cell_ids[s.cell],
            slot: s.target_slot,
        })
        .collect()
}

pub fn score(probs: &ProbTensor, prepared: &Prepared) -> Result<Scored> {
    let truth = prepared.test.targets();
    let pred = probs.argmax();
    let confusion = confusion_matrix(&pred, &truth)?;
    Ok(Scored {
        metrics: prf(&confusion),
        confusion,
        relaxed: relaxed_high_activity(&pred, &truth, &test_keys(prepared), &prepared.grid)?,
    })
}

/// Scores on the test samples of `cells` only.
pub fn score_on_cells(probs: &ProbTensor, prepared: &Prepared, cells: &[CellId]) -> Result<Scored> {
    let keys = test_keys(prepared);
    let keep: Vec<usize> = (0..keys.len()).filter(|&i| cells.contains(&keys[i].cell)).collect();
    let truth_all = prepared.test.targets();
    let pred_all = probs.argmax();
    if pred_all.len() != truth_all.len() {
        return Err(Error::LengthMismatch(format!("{} predictions for {} test samples", pred_all.len(), truth_all.len())));
    }
    let pred: Vec<u8> = keep.iter().map(|&i| pred_all[i]).collect();
    let truth: Vec<u8> = keep.iter().map(|&i| truth_all[i]).collect();
    let keys: Vec<CellSlot> = keep.iter().map(|&i| keys[i]).collect();
    let confusion = confusion_matrix(&pred, &truth)?;
    Ok(Scored {
        metrics: prf(&confusion),
        confusion,
        relaxed: relaxed_high_activity(&pred, &truth, &keys, &prepared.grid)?,
    })
}

pub fn report(prepared: &Prepared, runs: &[SeedRun], cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let mut seeds = Vec::with_capacity(runs.len());
    for run in runs {
        let mut models = BTreeMap::new();
        for m in &run.models {
            models.insert(m.kind.name().to_string(), score(&m.test_probs, prepared)?);
        }
        seeds.push(SeedReport {
            seed: run.seed,
            ensemble: score(&run.fused, prepared)?,
            models,
        });
    }
    let mut summary = BTreeMap::new();
    if seeds.len() >= 2 {
        let ens: Vec<MetricsReport> = seeds.iter().map(|s| s.ensemble.metrics.clone()).collect();
        summary.insert("ensemble".to_string(), aggregate_seeds(&ens)?);
        for name in seeds[0].models.keys() {
            let per: Vec<MetricsReport> = seeds.iter().map(|s| s.models[name].metrics.clone()).collect();
            summary.insert(name.clone(), aggregate_seeds(&per)?);
        }
    }
    let train_targets = prepared.train.targets();
    let mut freq = [0usize; 3];
    train_targets.iter().for_each(|&t| freq[t as usize] += 1);
    let majority = (0..3).max_by_key(|&c| (freq[c], std::cmp::Reverse(c))).unwrap() as u8;
    let truth = prepared.test.targets();
    let baseline = prf(&confusion_matrix(&vec![majority; truth.len()], &truth)?);
    let mut mix = [0.0; 3];
    truth.iter().for_each(|&t| mix[t as usize] += 1.0);
    let n = truth.len().max(1) as f64;
    Ok(ExperimentReport {
        horizon: cfg.horizon,
        window: cfg.window,
        n_cells: prepared.grid.n_cells(),
        retained_cells: prepared.retained.len(),
        medium_bound: prepared.classes.thresholds.medium_bound,
        zero_fraction: prepared.activity.zero_fraction(),
        test_class_mix: mix.map(|m| m / n),
        n_test: truth.len(),
        majority_baseline: baseline,
        seeds,
        summary,
    })
}

impl ExperimentReport {
    /// Ensemble scores: the seed mean with its spread, or the single seed.
    pub fn ensemble_metrics(&self) -> MetricsReport {
        match self.summary.get("ensemble") {
            Some(m) => m.clone(),
            None => self.seeds[0].ensemble.metrics.clone(),
        }
    }

    /// Ensemble strict scores and seed-averaged high-class relaxed scores.
    pub fn horizon_report(&self) -> HorizonReport {
        let n = self.seeds.len() as f64;
        let mean = |f: &dyn Fn(&RelaxedReport) -> ClassMetrics| {
            let mut m = ClassMetrics::default();
            for s in &self.seeds {
                let c = f(&s.ensemble.relaxed);
                m.precision += c.precision / n;
                m.recall += c.recall / n;
                m.f1 += c.f1 / n;
            }
            m
        };
        HorizonReport {
            horizon: self.horizon,
            strict: self.ensemble_metrics(),
            relaxed: RelaxedReport {
                relaxed: mean(&|r| r.relaxed),
                strict: mean(&|r| r.strict),
            },
        }
    }
}

/// One experiment per horizon on shared stay points, up to `jobs` horizons at
/// a time.
pub fn sweep_horizons(tracks: &[Track], cfg: &ExperimentConfig, horizons: &[usize], jobs: usize) -> Result<Vec<ExperimentReport>> {
    let stays = detect_all(tracks, &cfg.stay)?;
    let results = crate::parallel::map(horizons, jobs, |&h| -> Result<ExperimentReport> {
        let cfg = ExperimentConfig {
            horizon: h,
            ..cfg.clone()
        };
        let prepared = prepare(tracks, &stays, &cfg)?;
        let runs = train_all(&prepared, &cfg, 1)?;
        report(&prepared, &runs, &cfg)
    });
    results.into_iter().collect()
}

/// Complete experiment from tracks.
pub fn run_experiment(tracks: &[Track], cfg: &ExperimentConfig, jobs: usize) -> Result<(Prepared, Vec<SeedRun>, ExperimentReport)> {
    let (_, prepared) = prepare_from_tracks(tracks, cfg)?;
    let runs = train_all(&prepared, cfg, jobs)?;
    let rep = report(&prepared, &runs, cfg)?;
    Ok((prepared, runs, rep))
}

/// Default settings on a generated world: its box and start time, and the
/// pinned medium bound.
pub fn fixture_config(world: &crate::synth::WorldConfig) -> ExperimentConfig {
    ExperimentConfig {
        bbox: Some(world.bbox),
        t0: Some(world.t0),
        thresholds: pinned_thresholds(),
        ..ExperimentConfig::default()
    }
}

/// Threshold mode fixed at the pinned medium bound.
pub fn pinned_thresholds() -> ThresholdMode {
    ThresholdMode::Pinned(PINNED_MEDIUM_BOUND)
}

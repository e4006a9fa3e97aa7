use std::io::Write;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{batch_loss, GraphFeatures, Model, ModelConfig, N_CLASSES};
use crate::error::{Error, Result};
use crate::eval::macro_f1;
use crate::features::{Sample, SampleSet};
use crate::tensor::{AdamConfig, AdamState, Graph};

pub const DEFAULT_CLASS_WEIGHTS: [f64; N_CLASSES] = [0.7, 1.2, 1.1];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Samples per step for per-cell models, snapshots per step for spatial ones.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub class_weights: [f64; N_CLASSES],
    pub seed: u64,
    /// Epochs without a better validation loss before stopping; 0 never stops.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            learning_rate: 1e-3,
            epochs: 100,
            class_weights: DEFAULT_CLASS_WEIGHTS,
            seed: 0,
            patience: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidParameter("batch size must be at least 1".into()));
        }
        if self.class_weights.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
            return Err(Error::InvalidParameter(format!("class weights must be positive: {:?}", self.class_weights)));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidParameter(format!("learning rate {}", self.learning_rate)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_macro_f1: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    /// Parameters of the epoch with the lowest validation loss.
    pub model: Model,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub steps: u64,
}

impl TrainedModel {
    /// `epoch,train_loss,val_loss,val_macro_f1`
    pub fn write_history<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.history {
            out.serialize(r)?;
        }
        out.flush().map_err(|e| Error::io("<history writer>", e))?;
        Ok(())
    }
}

/// Mini-batch Adam on the weighted cross-entropy. Keeps the parameters of the
/// epoch with the lowest validation loss (training loss when `val` is empty).
pub fn train_model(
    config: &ModelConfig,
    train_cfg: &TrainConfig,
    features: Option<&GraphFeatures>,
    train: &SampleSet,
    val: &SampleSet,
) -> Result<TrainedModel> {
    train_cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptySplit("train"));
    }
    let mut model = Model::new(config.clone(), train.k, features, train_cfg.seed)?;
    let mut adam = AdamState::new(
        &model.params,
        AdamConfig {
            lr: train_cfg.learning_rate,
            ..AdamConfig::default()
        },
    );
    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    rng.set_stream(1);
    let mut units = model.batches(train, 1)?;
    let weights = train_cfg.class_weights;

    let mut history = Vec::with_capacity(train_cfg.epochs);
    let mut best: Option<(f64, usize, crate::tensor::ParamStore)> = None;
    for epoch in 1..=train_cfg.epochs {
        units.shuffle(&mut rng);
        let (mut total, mut n_batches) = (0.0, 0usize);
        for chunk in units.chunks(train_cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().flatten().map(|&i| &train.samples[i]).collect();
            let loss = step(&mut model, &mut adam, &batch, weights, &mut rng)
                .map_err(|e| match e {
                    Error::NanGradient(name) => Error::Diverged {
                        epoch,
                        detail: format!("NaN gradient in {name}"),
                    },
                    e => e,
                })?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    detail: format!("batch loss {loss}"),
                });
            }
            total += loss;
            n_batches += 1;
        }
        let train_loss = total / n_batches as f64;
        let (val_loss, val_f1) = if val.is_empty() {
            (train_loss, f64::NAN)
        } else {
            let probs = model.predict(val)?;
            let targets = val.targets();
            (batch_loss(&probs, &targets, weights)?, macro_f1(&probs.argmax(), &targets)?)
        };
        debug!(
            "{} epoch {epoch}: train {train_loss:.4} val {val_loss:.4} f1 {val_f1:.4}",
            config.kind
        );
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_macro_f1: if val_f1.is_nan() { 0.0 } else { val_f1 },
        });
        if best.as_ref().is_none_or(|(l, _, _)| val_loss < *l) {
            best = Some((val_loss, epoch, model.params.clone()));
        } else if train_cfg.patience > 0 && epoch - best.as_ref().unwrap().1 >= train_cfg.patience {
            info!("{} stops early after epoch {epoch}", config.kind);
            break;
        }
    }
    let mut best_epoch = 0;
    if let Some((_, epoch, params)) = best {
        model.params = params;
        best_epoch = epoch;
    }
    Ok(TrainedModel {
        model,
        history,
        best_epoch,
        steps: adam.step,
    })
}

fn step(
    model: &mut Model,
    adam: &mut AdamState,
    batch: &[&Sample],
    weights: [f64; N_CLASSES],
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut g = Graph::new();
    let vars = model.params.bind(&mut g);
    let probs = model.forward(&mut g, &vars, batch, Some(rng))?;
    let n = batch.len() as f64;
    let targets: Vec<usize> = batch.iter().map(|s| s.target as usize).collect();
    let coef = targets.iter().map(|&t| weights[t] / n).collect();
    let loss = g.weighted_nll(probs, targets, coef)?;
    let value = g.value(loss).data()[0];
    if !value.is_finite() {
        return Ok(value);
    }
    let grads = g.backward(loss)?;
    let flat: Vec<Vec<f64>> = vars
        .iter()
        .zip(model.params.tensors())
        .map(|(&v, t)| grads.get_or_zeros(v, t).into_data())
        .collect();
    adam.step(&mut model.params, &flat)?;
    Ok(value)
}

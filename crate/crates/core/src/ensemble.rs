//! Weighted soft voting over base-model probabilities.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{ModelKind, ProbTensor, N_CLASSES};

/// One weight per base model, in [`ModelKind::ALL`] order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub weights: [f64; 4],
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig {
            weights: [1.1, 1.1, 0.5, 1.3],
        }
    }
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) || !self.weights.iter().any(|&w| w > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "ensemble weights must be non-negative with one positive: {:?}",
                self.weights
            )));
        }
        Ok(())
    }

    pub fn weight(&self, kind: ModelKind) -> f64 {
        self.weights[ModelKind::ALL.iter().position(|&k| k == kind).expect("known kind")]
    }
}

/// `sum_m w_m p_m`, renormalised per row. `outputs` pairs each model's
/// probabilities with its weight.
pub fn soft_vote(outputs: &[(&ProbTensor, f64)]) -> Result<ProbTensor> {
    let Some(first) = outputs.first() else {
        return Err(Error::InvalidParameter("soft vote needs at least one model".into()));
    };
    let n = first.0.len();
    if let Some((p, _)) = outputs.iter().find(|(p, _)| p.len() != n) {
        return Err(Error::LengthMismatch(format!("model outputs cover {} and {n} samples", p.len())));
    }
    if outputs.iter().any(|&(_, w)| !(w >= 0.0)) || !outputs.iter().any(|&(_, w)| w > 0.0) {
        return Err(Error::InvalidParameter("model weights must be non-negative with one positive".into()));
    }
    let rows = (0..n)
        .map(|i| {
            let mut acc = [0.0; N_CLASSES];
            for (p, w) in outputs {
                if *w == 0.0 {
                    continue;
                }
                for c in 0..N_CLASSES {
                    acc[c] += w * p.rows[i][c];
                }
            }
            let s: f64 = acc.iter().sum();
            acc.map(|v| v / s)
        })
        .collect();
    ProbTensor::new(rows)
}

/// Soft vote of the four base models weighted by `config`.
pub fn fuse(per_model: &[(ModelKind, ProbTensor)], config: &EnsembleConfig) -> Result<ProbTensor> {
    config.validate()?;
    let pairs: Vec<(&ProbTensor, f64)> = per_model.iter().map(|(k, p)| (p, config.weight(*k))).collect();
    soft_vote(&pairs)
}

/// Arg-max class per row, ties toward the higher class.
pub fn predict(fused: &ProbTensor) -> Vec<u8> {
    fused.argmax()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(rows: &[[f64; 3]]) -> ProbTensor {
        ProbTensor::new(rows.to_vec()).unwrap()
    }

    #[test]
    fn hand_computed_vote() {
        let ps = [
            pt(&[[0.6, 0.3, 0.1]]),
            pt(&[[0.2, 0.5, 0.3]]),
            pt(&[[0.1, 0.1, 0.8]]),
            pt(&[[0.3, 0.4, 0.3]]),
        ];
        let w = EnsembleConfig::default().weights;
        assert_eq!(w, [1.1, 1.1, 0.5, 1.3]);
        let pairs: Vec<_> = ps.iter().zip(w).collect();
        let fused = soft_vote(&pairs).unwrap();
        let raw = [1.32, 1.45, 1.23];
        let total: f64 = raw.iter().sum();
        for c in 0..3 {
            assert!((fused.rows[0][c] - raw[c] / total).abs() < 1e-12);
        }
        assert_eq!(predict(&fused), vec![1]);
    }

    #[test]
    fn consensus_and_degenerate_weights() {
        let p = pt(&[[0.2, 0.3, 0.5], [0.7, 0.2, 0.1]]);
        let q = pt(&[[0.1, 0.1, 0.8], [0.3, 0.3, 0.4]]);
        let close = |x: &ProbTensor, y: &ProbTensor| {
            x.rows.iter().zip(&y.rows).all(|(a, b)| (0..3).all(|c| (a[c] - b[c]).abs() < 1e-15))
        };
        assert!(close(&soft_vote(&[(&p, 1.1), (&p, 0.5), (&p, 1.3)]).unwrap(), &p));
        assert!(close(&soft_vote(&[(&p, 1.0), (&q, 0.0)]).unwrap(), &p));
        assert!(soft_vote(&[(&p, 0.0), (&q, 0.0)]).is_err());
        assert!(soft_vote(&[(&p, 1.0), (&pt(&[[1.0, 0.0, 0.0]]), 1.0)]).is_err());
    }

    #[test]
    fn ties_and_config() {
        assert_eq!(predict(&pt(&[[0.5, 0.5, 0.0], [0.1, 0.2, 0.7]])), vec![1, 2]);
        assert!(EnsembleConfig { weights: [0.0; 4] }.validate().is_err());
        assert!(EnsembleConfig { weights: [1.0, -1.0, 1.0, 1.0] }.validate().is_err());
        assert_eq!(EnsembleConfig::default().weight(ModelKind::StgcnLite), 0.5);
    }
}

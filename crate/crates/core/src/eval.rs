//! Classification metrics, seed aggregation and the neighbourhood-relaxed
//! high-activity score.

use std::collections::HashMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gridding::{CellId, GridSpec};

pub const N_CLASSES: usize = 3;

/// Counts indexed `[true][pred]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; N_CLASSES]; N_CLASSES],
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sum(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    pub fn col_sum(&self, c: usize) -> u64 {
        self.counts.iter().map(|r| r[c]).sum()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for t in 0..N_CLASSES {
            for p in 0..N_CLASSES {
                self.counts[t][p] += other.counts[t][p];
            }
        }
    }

    /// `true\pred,0,1,2` header then one row per true class.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["true\\pred", "0", "1", "2"])?;
        for (t, row) in self.counts.iter().enumerate() {
            let mut rec = vec![t.to_string()];
            rec.extend(row.iter().map(|c| c.to_string()));
            out.write_record(&rec)?;
        }
        out.flush().map_err(|e| Error::io("<csv writer>", e))?;
        Ok(())
    }
}

pub fn confusion_matrix(pred: &[u8], truth: &[u8]) -> Result<ConfusionMatrix> {
    if pred.len() != truth.len() {
        return Err(Error::LengthMismatch(format!(
            "{} predictions for {} true labels",
            pred.len(),
            truth.len()
        )));
    }
    let mut cm = ConfusionMatrix::default();
    for (&p, &t) in pred.iter().zip(truth) {
        if p as usize >= N_CLASSES || t as usize >= N_CLASSES {
            return Err(Error::InvalidParameter(format!("class label out of range: pred {p}, true {t}")));
        }
        cm.counts[t as usize][p as usize] += 1;
    }
    Ok(cm)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

impl ClassMetrics {
    pub fn from_counts(tp: f64, n_pred: f64, n_true: f64) -> Self {
        let precision = ratio(tp, n_pred);
        let recall = ratio(tp, n_true);
        let f1 = ratio(2.0 * precision * recall, precision + recall);
        ClassMetrics { precision, recall, f1 }
    }
}

/// Spread of each metric across seeds (sample standard deviation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSpread {
    pub n_seeds: usize,
    pub estimator: String,
    pub per_class: [ClassMetrics; N_CLASSES],
    pub macro_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class: [ClassMetrics; N_CLASSES],
    pub macro_f1: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub std: Option<SeedSpread>,
}

pub fn prf(cm: &ConfusionMatrix) -> MetricsReport {
    let per_class: [ClassMetrics; N_CLASSES] = std::array::from_fn(|c| {
        ClassMetrics::from_counts(cm.counts[c][c] as f64, cm.col_sum(c) as f64, cm.row_sum(c) as f64)
    });
    let macro_f1 = per_class.iter().map(|m| m.f1).sum::<f64>() / N_CLASSES as f64;
    MetricsReport {
        per_class,
        macro_f1,
        std: None,
    }
}

pub fn macro_f1(pred: &[u8], truth: &[u8]) -> Result<f64> {
    Ok(prf(&confusion_matrix(pred, truth)?).macro_f1)
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.iter().all(|&x| x == xs[0]) {
        return (xs[0], 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Mean of every metric across seed runs, with the sample (n - 1) standard
/// deviation in `std`.
pub fn aggregate_seeds(reports: &[MetricsReport]) -> Result<MetricsReport> {
    if reports.len() < 2 {
        return Err(Error::InvalidParameter(format!(
            "aggregating seeds needs at least 2 reports, got {}",
            reports.len()
        )));
    }
    if reports.iter().any(|r| r.std.is_some()) {
        return Err(Error::InvalidParameter("cannot aggregate already aggregated reports".into()));
    }
    let pick = |f: &dyn Fn(&MetricsReport) -> f64| mean_std(&reports.iter().map(f).collect::<Vec<_>>());
    let mut mean_cls = [ClassMetrics::default(); N_CLASSES];
    let mut std_cls = [ClassMetrics::default(); N_CLASSES];
    for c in 0..N_CLASSES {
        let (m, s) = pick(&|r| r.per_class[c].precision);
        mean_cls[c].precision = m;
        std_cls[c].precision = s;
        let (m, s) = pick(&|r| r.per_class[c].recall);
        mean_cls[c].recall = m;
        std_cls[c].recall = s;
        let (m, s) = pick(&|r| r.per_class[c].f1);
        mean_cls[c].f1 = m;
        std_cls[c].f1 = s;
    }
    let (m, s) = pick(&|r| r.macro_f1);
    Ok(MetricsReport {
        per_class: mean_cls,
        macro_f1: m,
        std: Some(SeedSpread {
            n_seeds: reports.len(),
            estimator: "sample (n-1)".into(),
            per_class: std_cls,
            macro_f1: s,
        }),
    })
}

impl MetricsReport {
    /// Flat `metric,class,value,std` rows; `class` is empty for macro F1.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["metric", "class", "value", "std"])?;
        let fmt_std = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for c in 0..N_CLASSES {
            let m = &self.per_class[c];
            let s = self.std.as_ref().map(|s| s.per_class[c]);
            for (name, v, sd) in [
                ("precision", m.precision, s.map(|s| s.precision)),
                ("recall", m.recall, s.map(|s| s.recall)),
                ("f1", m.f1, s.map(|s| s.f1)),
            ] {
                out.write_record([name.to_string(), c.to_string(), v.to_string(), fmt_std(sd)])?;
            }
        }
        out.write_record([
            "macro_f1".to_string(),
            String::new(),
            self.macro_f1.to_string(),
            fmt_std(self.std.as_ref().map(|s| s.macro_f1)),
        ])?;
        out.flush().map_err(|e| Error::io("<csv writer>", e))?;
        Ok(())
    }
}

/// One evaluated cell-slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellSlot {
    pub cell: CellId,
    pub slot: usize,
}

/// High-class scores under the one-hop relaxation, next to the strict ones.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelaxedReport {
    pub relaxed: ClassMetrics,
    pub strict: ClassMetrics,
}

/// Precision: a predicted-high cell-slot is a hit when the cell or one of its
/// Moore neighbours is truly high at that slot. Recall: a truly high
/// cell-slot is found when the cell or a neighbour is predicted high.
/// Neighbourhoods only include cells present at the same slot.
pub fn relaxed_high_activity(
    pred: &[u8],
    truth: &[u8],
    keys: &[CellSlot],
    grid: &GridSpec,
) -> Result<RelaxedReport> {
    if pred.len() != truth.len() || pred.len() != keys.len() {
        return Err(Error::LengthMismatch(format!(
            "{} predictions, {} truths, {} cell-slots",
            pred.len(),
            truth.len(),
            keys.len()
        )));
    }
    let mut at: HashMap<(CellId, usize), usize> = HashMap::with_capacity(keys.len());
    for (i, k) in keys.iter().enumerate() {
        if k.cell >= grid.n_cells() {
            return Err(Error::LengthMismatch(format!(
                "cell {} outside a grid of {} cells",
                k.cell,
                grid.n_cells()
            )));
        }
        if at.insert((k.cell, k.slot), i).is_some() {
            return Err(Error::InvalidParameter(format!("duplicate cell-slot ({}, {})", k.cell, k.slot)));
        }
    }
    let near = |i: usize, labels: &[u8]| -> bool {
        if labels[i] == 2 {
            return true;
        }
        let k = keys[i];
        grid.moore_neighbors(k.cell)
            .into_iter()
            .any(|n| at.get(&(n, k.slot)).is_some_and(|&j| labels[j] == 2))
    };
    let (mut n_pred, mut hit, mut n_true, mut found, mut strict_tp) = (0usize, 0usize, 0usize, 0usize, 0usize);
    for i in 0..keys.len() {
        if pred[i] == 2 {
            n_pred += 1;
            hit += near(i, truth) as usize;
        }
        if truth[i] == 2 {
            n_true += 1;
            found += near(i, pred) as usize;
            strict_tp += (pred[i] == 2) as usize;
        }
    }
    let relaxed = ClassMetrics {
        precision: ratio(hit as f64, n_pred as f64),
        recall: ratio(found as f64, n_true as f64),
        f1: 0.0,
    };
    let relaxed = ClassMetrics {
        f1: ratio(2.0 * relaxed.precision * relaxed.recall, relaxed.precision + relaxed.recall),
        ..relaxed
    };
    Ok(RelaxedReport {
        relaxed,
        strict: ClassMetrics::from_counts(strict_tp as f64, n_pred as f64, n_true as f64),
    })
}

/// Strict and relaxed scores of one forecast horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonReport {
    pub horizon: usize,
    pub strict: MetricsReport,
    pub relaxed: RelaxedReport,
}

/// Runs `evaluate` for every horizon on up to `jobs` threads; results keep the
/// order of `horizons`.
pub fn horizon_sweep<F>(horizons: &[usize], jobs: usize, evaluate: F) -> Result<Vec<HorizonReport>>
where
    F: Fn(usize) -> Result<HorizonReport> + Sync,
{
    let results = crate::parallel::map(horizons, jobs, |&h| evaluate(h));
    results.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn tally_and_empty() {
        let cm = confusion_matrix(&[0, 1, 2, 2], &[0, 1, 1, 2]).unwrap();
        assert_eq!(cm.counts[1][2], 1);
        assert_eq!([cm.counts[0][0], cm.counts[1][1], cm.counts[2][2]], [1, 1, 1]);
        assert_eq!(cm.total(), 4);
        assert_eq!(confusion_matrix(&[], &[]).unwrap(), ConfusionMatrix::default());
        assert!(confusion_matrix(&[0], &[]).is_err());
    }

    #[test]
    fn perfect_and_absent_classes() {
        let r = prf(&confusion_matrix(&[0, 1, 2, 1], &[0, 1, 2, 1]).unwrap());
        assert_eq!(r.macro_f1, 1.0);
        let r = prf(&confusion_matrix(&[0, 0, 1], &[0, 0, 1]).unwrap());
        assert_eq!(r.per_class[2], ClassMetrics::default());
        assert!(close(r.macro_f1, 2.0 / 3.0));
    }

    #[test]
    fn seed_spread_uses_n_minus_one() {
        let mk = |f: f64| MetricsReport {
            per_class: [ClassMetrics::default(); 3],
            macro_f1: f,
            std: None,
        };
        let agg = aggregate_seeds(&[mk(0.7), mk(0.8)]).unwrap();
        assert!(close(agg.macro_f1, 0.75));
        assert!((agg.std.as_ref().unwrap().macro_f1 - 0.070_710_678_118_654_75).abs() < 1e-12);
        let same = aggregate_seeds(&[mk(0.4), mk(0.4), mk(0.4)]).unwrap();
        assert_eq!(same.std.unwrap().macro_f1, 0.0);
        assert!(aggregate_seeds(&[mk(0.1)]).is_err());
    }

    fn grid3() -> GridSpec {
        GridSpec {
            origin_lat: 30.0,
            origin_lon: 104.0,
            cell_size: 1000.0,
            n_rows: 3,
            n_cols: 3,
            ref_lat: 30.0,
        }
    }

    #[test]
    fn relaxation_rewards_neighbours() {
        let grid = grid3();
        let keys: Vec<CellSlot> = (0..grid.n_cells()).map(|cell| CellSlot { cell, slot: 0 }).collect();
        let mut truth = vec![0u8; grid.n_cells()];
        let mut pred = vec![0u8; grid.n_cells()];
        truth[0] = 2;
        truth[1] = 1;
        pred[1] = 2;
        let r = relaxed_high_activity(&pred, &truth, &keys, &grid).unwrap();
        assert_eq!(r.relaxed.precision, 1.0);
        assert_eq!(r.relaxed.recall, 1.0);
        assert_eq!(r.strict.precision, 0.0);

        // a far corner prediction with no high truth nearby
        let far = grid.n_cells() - 1;
        let mut pred2 = vec![0u8; grid.n_cells()];
        pred2[far] = 2;
        let r = relaxed_high_activity(&pred2, &truth, &keys, &grid).unwrap();
        assert_eq!(r.relaxed.precision, 0.0);
    }

    #[test]
    fn relaxation_is_per_slot() {
        let grid = grid3();
        let keys = [CellSlot { cell: 0, slot: 0 }, CellSlot { cell: 1, slot: 1 }];
        let r = relaxed_high_activity(&[0, 2], &[2, 0], &keys, &grid).unwrap();
        assert_eq!(r.relaxed.precision, 0.0);
        assert_eq!(r.relaxed.recall, 0.0);
        assert!(relaxed_high_activity(&[0], &[0], &[CellSlot { cell: 99, slot: 0 }], &grid).is_err());
    }
}

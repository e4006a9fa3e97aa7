use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::features::make_windows;
use crate::gridding::{ClassTensor, ClassThresholds};

const T0: i64 = 1_659_312_000;

fn classes(labels: Vec<Vec<u8>>) -> ClassTensor {
    ClassTensor {
        cell_ids: (0..labels.len()).collect(),
        labels,
        thresholds: ClassThresholds::pinned(),
        t0: T0,
        slot_len: 1800,
    }
}

fn random_set(n_cells: usize, n_slots: usize, k: usize, seed: u64) -> SampleSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = (0..n_cells)
        .map(|_| (0..n_slots).map(|_| rng.gen_range(0..3u8)).collect())
        .collect();
    let mut set = make_windows(&classes(labels), k, 1, 0).unwrap();
    for s in &mut set.samples {
        s.counts = (0..k).map(|_| rng.gen_range(0..9)).collect();
    }
    set
}

/// Three cells in a chain 0 - 1 - 2 with cell 2 semantically closest to 0.
fn micro_features(adjacent: bool) -> GraphFeatures {
    let cells = vec![0, 1, 2];
    let mut adjacency = AdjacencyMatrix::zeros(&cells);
    if adjacent {
        adjacency.a[0][1] = 1;
        adjacency.a[1][0] = 1;
        adjacency.a[1][2] = 1;
        adjacency.a[2][1] = 1;
    }
    let semantic = SemanticMatrix {
        cells,
        d: vec![vec![0.0, 5.0, 1.0], vec![5.0, 0.0, 3.0], vec![1.0, 3.0, 0.0]],
        radius: 1,
    };
    GraphFeatures {
        adjacency,
        semantic: Some(semantic),
    }
}

fn micro_config(kind: ModelKind) -> ModelConfig {
    ModelConfig {
        hidden: 4,
        embed_dim: 2,
        kernel: 2,
        kappa: 1,
        use_counts: true,
        ..ModelConfig::new(kind)
    }
}

fn probs_of(model: &Model, set: &SampleSet) -> ProbTensor {
    model.predict(set).unwrap()
}

#[test]
fn weighted_loss_examples() {
    let w = DEFAULT_CLASS_WEIGHTS;
    assert_eq!(weighted_cross_entropy(&[0.0, 1.0, 0.0], 1, w), 0.0);
    let third = 1.0 / 3.0;
    let l = weighted_cross_entropy(&[third; 3], 1, w);
    assert!((l - 1.2 * 3f64.ln()).abs() < 1e-12);
    assert!((l - 1.3183).abs() < 1e-4);
    let w2 = w.map(|x| 2.0 * x);
    assert_eq!(weighted_cross_entropy(&[0.2, 0.3, 0.5], 2, w2), 2.0 * weighted_cross_entropy(&[0.2, 0.3, 0.5], 2, w));
    let p = [0.1, 0.6, 0.3];
    for t in 0..3u8 {
        assert_eq!(weighted_cross_entropy(&p, t, [1.0; 3]), -p[t as usize].ln());
    }
    let before = clamp_count();
    assert!((weighted_cross_entropy(&[1.0, 0.0, 0.0], 2, [1.0; 3]) - 1e-12f64.ln().abs()).abs() < 1e-9);
    assert!(clamp_count() > before);
}

#[test]
fn tie_breaks_toward_higher_class() {
    let p = ProbTensor::new(vec![[0.5, 0.5, 0.0], [0.1, 0.2, 0.7], [0.4, 0.3, 0.3]]).unwrap();
    assert_eq!(p.argmax(), vec![1, 2, 0]);
    assert!(ProbTensor::new(vec![[0.5, 0.6, 0.0]]).is_err());
}

#[test]
fn zero_parameters_give_uniform_rows() {
    let set = random_set(3, 20, 12, 1);
    let mut m = Model::new(ModelConfig::new(ModelKind::Birnn), 12, None, 0).unwrap();
    m.params.fill(0.0);
    for row in probs_of(&m, &set).rows {
        for p in row {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }
}

#[test]
fn every_model_emits_simplex_rows() {
    let set = random_set(3, 30, 12, 2);
    let feats = micro_features(true);
    for kind in ModelKind::ALL {
        let cfg = ModelConfig {
            use_counts: true,
            kappa: 1,
            layers: if kind == ModelKind::StgcnLite { 1 } else { 2 },
            ..ModelConfig::new(kind)
        };
        let m = Model::new(cfg, 12, Some(&feats), 5).unwrap();
        let p = probs_of(&m, &set);
        assert_eq!(p.len(), set.len());
        for row in &p.rows {
            assert!(row.iter().all(|&x| x >= 0.0 && x.is_finite()));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn receptive_field_limits_window() {
    let mut cfg = ModelConfig::new(ModelKind::Tcn);
    assert_eq!(cfg.receptive_field(), 7);
    cfg.dilations = vec![1, 2, 4];
    assert_eq!(cfg.receptive_field(), 15);
    match Model::new(cfg, 12, None, 0) {
        Err(Error::WindowTooShort { have: 12, need: 15 }) => {}
        other => panic!("{other:?}"),
    }
    let bad = ModelConfig {
        dilations: vec![2, 2],
        ..ModelConfig::new(ModelKind::Tcn)
    };
    assert!(bad.validate().is_err());
}

#[test]
fn tcn_is_causal() {
    let set = random_set(1, 20, 12, 3);
    let m = Model::new(ModelConfig::new(ModelKind::Tcn), 12, None, 1).unwrap();
    let run = |sample: &Sample| {
        let mut g = Graph::new();
        let vars = m.params.bind(&mut g);
        let p = nets::Params::new(&m.params, &vars);
        let x = nets::inputs(&mut g, &p, &m.config, &[sample]).unwrap();
        let h = nets::tcn_sequence(&mut g, &p, &m.config, x, 12).unwrap();
        g.value(h).clone()
    };
    let base = set.samples[0].clone();
    let mut bumped = base.clone();
    bumped.labels[6] = (bumped.labels[6] + 1) % 3;
    let (a, b) = (run(&base), run(&bumped));
    for t in 0..6 {
        assert_eq!(a.row(t), b.row(t));
    }
    assert_ne!(a.row(6), b.row(6));
}

#[test]
fn isolated_cells_keep_their_own_signal() {
    let feats = micro_features(false);
    let a_hat = normalized_adjacency(&feats.adjacency);
    assert_eq!(a_hat, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
    let chain = normalized_adjacency(&micro_features(true).adjacency);
    assert!((chain[0] - 0.5).abs() < 1e-15);
    assert!((chain[1] - 1.0 / 6f64.sqrt()).abs() < 1e-15);
}

#[test]
fn spatial_models_without_neighbours_match_temporal_variants() {
    let set = random_set(3, 30, 12, 4);
    let mut feats = micro_features(false);
    for kind in [ModelKind::StgcnLite, ModelKind::PdformerLite] {
        let cfg = ModelConfig {
            kappa: 0,
            ..ModelConfig::new(kind)
        };
        let temporal = ModelConfig {
            temporal_only: true,
            ..cfg.clone()
        };
        let full = Model::new(cfg, 12, Some(&feats), 11).unwrap();
        let bare = Model::new(temporal, 12, Some(&feats), 11).unwrap();
        assert_eq!(full.params, bare.params);
        assert_eq!(probs_of(&full, &set), probs_of(&bare, &set));
    }
    // with neighbours the outputs differ
    feats = micro_features(true);
    let full = Model::new(ModelConfig::new(ModelKind::StgcnLite), 12, Some(&feats), 11).unwrap();
    let bare = Model::new(
        ModelConfig {
            temporal_only: true,
            ..ModelConfig::new(ModelKind::StgcnLite)
        },
        12,
        Some(&feats),
        11,
    )
    .unwrap();
    assert_ne!(probs_of(&full, &set), probs_of(&bare, &set));
}

#[test]
fn spatial_attention_respects_masks() {
    let set = random_set(3, 20, 4, 5);
    let feats = micro_features(true);
    let cfg = ModelConfig {
        kappa: 1,
        ..micro_config(ModelKind::PdformerLite)
    };
    let m = Model::new(cfg, 4, Some(&feats), 3).unwrap();
    let batch: Vec<&Sample> = set.snapshots()[..2].iter().flatten().map(|&i| &set.samples[i]).collect();
    let Mixing::Attention { n, geo, sem } = &m.mixing else { panic!() };
    let mut g = Graph::new();
    let vars = m.params.bind(&mut g);
    let p = nets::Params::new(&m.params, &vars);
    let x = nets::inputs(&mut g, &p, &m.config, &batch).unwrap();
    let masks = (Rc::new(geo.repeat(2)), Rc::new(sem.repeat(2)));
    let (_, w) = nets::pdformer(&mut g, &p, &m.config, x, batch.len(), 4, *n, Some(masks)).unwrap();
    let w = w.unwrap();
    let nearest = feats.semantic.as_ref().unwrap();
    for r in 0..6 {
        let i = r % 3;
        let geo_row = g.value(w.geo).row(r);
        assert!((geo_row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let sem_row = g.value(w.sem).row(r);
        assert!((sem_row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let allowed = nearest.nearest(i, 1);
        for j in 0..3 {
            if !allowed.contains(&j) {
                assert_eq!(sem_row[j], 0.0);
            }
            if feats.adjacency.a[i][j] == 0 {
                assert_eq!(geo_row[j], 0.0);
            }
        }
    }
}

#[test]
fn wiring_errors() {
    let feats = micro_features(true);
    let cfg = ModelConfig {
        kappa: 3,
        ..ModelConfig::new(ModelKind::PdformerLite)
    };
    assert!(Model::new(cfg, 12, Some(&feats), 0).is_err());
    assert!(Model::new(ModelConfig::new(ModelKind::StgcnLite), 12, None, 0).is_err());
    let m = Model::new(ModelConfig::new(ModelKind::StgcnLite), 12, Some(&feats), 0).unwrap();
    assert!(m.predict(&random_set(4, 20, 12, 0)).is_err());
}

#[test]
fn full_loss_gradients_match_finite_differences() {
    let set = random_set(3, 8, 4, 6);
    let feats = micro_features(true);
    for kind in ModelKind::ALL {
        let m = Model::new(micro_config(kind), 4, Some(&feats), 13).unwrap();
        let batch: Vec<&Sample> = set.samples.iter().take(6).collect();
        let err = m.gradient_check(&batch, DEFAULT_CLASS_WEIGHTS, 1e-5, 400, 1).unwrap();
        assert!(err < 1e-4, "{kind}: {err}");
    }
}

/// Every cell cycles 0, 1, 2 with its own phase.
fn cyclic_set(n_cells: usize, n_slots: usize, k: usize) -> SampleSet {
    let labels = (0..n_cells)
        .map(|c| (0..n_slots).map(|t| ((t + c) % 3) as u8).collect())
        .collect();
    make_windows(&classes(labels), k, 1, 0).unwrap()
}

#[test]
fn birnn_learns_a_repeating_pattern() {
    let set = cyclic_set(4, 60, 6);
    let cfg = ModelConfig {
        hidden: 8,
        ..ModelConfig::new(ModelKind::Birnn)
    };
    let tc = TrainConfig {
        epochs: 15,
        learning_rate: 1e-2,
        patience: 0,
        ..TrainConfig::default()
    };
    let trained = train_model(&cfg, &tc, None, &set, &SampleSet { samples: vec![], ..set.clone() }).unwrap();
    assert!(trained.steps >= 200, "{}", trained.steps);
    let pred = trained.model.predict(&set).unwrap().argmax();
    let acc = pred.iter().zip(set.targets()).filter(|(p, t)| **p == *t).count() as f64 / set.len() as f64;
    assert!(acc >= 0.95, "accuracy {acc}");
}

#[test]
fn loss_halves_on_a_learnable_fixture() {
    let set = cyclic_set(3, 50, 8);
    let cfg = ModelConfig {
        hidden: 8,
        ..ModelConfig::new(ModelKind::Tcn)
    };
    let tc = TrainConfig {
        epochs: 20,
        learning_rate: 5e-3,
        patience: 0,
        ..TrainConfig::default()
    };
    let trained = train_model(&cfg, &tc, None, &set, &set).unwrap();
    let h = &trained.history;
    assert!(h[19].train_loss <= 0.5 * h[0].train_loss, "{} -> {}", h[0].train_loss, h[19].train_loss);
    assert!(trained.history.iter().all(|r| (0.0..=1.0).contains(&r.val_macro_f1)));
}

#[test]
fn training_is_deterministic_and_checkpoints_round_trip() {
    let set = random_set(3, 30, 12, 7);
    let feats = micro_features(true);
    let cfg = ModelConfig {
        hidden: 8,
        kappa: 1,
        dropout: 0.1,
        ..ModelConfig::new(ModelKind::PdformerLite)
    };
    let tc = TrainConfig {
        epochs: 2,
        batch_size: 4,
        seed: 3,
        ..TrainConfig::default()
    };
    let a = train_model(&cfg, &tc, Some(&feats), &set, &set).unwrap();
    let b = train_model(&cfg, &tc, Some(&feats), &set, &set).unwrap();
    assert_eq!(a.model.params, b.model.params);
    assert_eq!(a.history, b.history);

    let dir = tempfile::tempdir().unwrap();
    let stem = dir.path().join("pdformer");
    a.model.save(&stem, 3, a.steps).unwrap();
    let back = Model::load(&stem, Some(&feats)).unwrap();
    assert_eq!(back, a.model);
    let mut hist = Vec::new();
    a.write_history(&mut hist).unwrap();
    assert!(String::from_utf8(hist).unwrap().starts_with("epoch,train_loss,val_loss,val_macro_f1\n"));
}

#[test]
fn empty_training_set_is_rejected() {
    let set = random_set(1, 20, 12, 8);
    let empty = SampleSet { samples: vec![], ..set };
    let r = train_model(&ModelConfig::new(ModelKind::Tcn), &TrainConfig::default(), None, &empty, &empty);
    assert!(matches!(r, Err(Error::EmptySplit("train"))));
}

mod config;
mod output;

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use haulcast::ensemble::fuse;
use haulcast::eval::{confusion_matrix, prf, relaxed_high_activity, CellSlot, ConfusionMatrix, MetricsReport, RelaxedReport};
use haulcast::features::{write_samples, write_triplets};
use haulcast::gridding::{write_long_csv, GridSpec, TensorSidecar};
use haulcast::ingest::{detect_all, parse_trajectories, write_stay_points, write_trajectories, TrajectoryFormat, Track};
use haulcast::models::{Model, ProbTensor};
use haulcast::pipeline::{prepare_from_tracks, report, sweep_horizons, test_keys, train_all, ExperimentReport, Prepared};
use haulcast::synth::{generate, to_tracks};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use config::{Overrides, Resolved};
use output::{InputHash, Manifest, OutDir, FAILURE_MARKER, MANIFEST};

#[derive(Parser)]
#[command(name = "haulcast", version, about = "Truck activity classification from GPS traces")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML settings file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Single seed for generation and training, replacing the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long)]
    jobs: Option<usize>,
    /// Forecast horizon in slots.
    #[arg(long)]
    horizon: Option<usize>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic trajectories.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Parse trajectories and detect stay points.
    Ingest {
        /// `truck_id,timestamp,lat,lon` CSV.
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Activity counts, classes, graphs and sample sets.
    Features {
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train every configured model for every seed.
    Train {
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Ensemble predictions on the test period from saved models.
    Predict {
        #[arg(long)]
        input: PathBuf,
        /// Output directory of `train`.
        #[arg(long)]
        models: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Scores a predictions CSV.
    Evaluate {
        #[arg(long)]
        predictions: PathBuf,
        /// Grid description; `grid.json` next to the predictions by default.
        #[arg(long)]
        grid: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Prints a metrics file as a table.
    Report {
        #[arg(long)]
        metrics: PathBuf,
    },
    /// Everything from trajectories to scored predictions.
    Pipeline {
        #[arg(long, conflicts_with = "default_fixture", required_unless_present = "default_fixture")]
        input: Option<PathBuf>,
        /// Run on the built-in synthetic world.
        #[arg(long)]
        default_fixture: bool,
        /// Also run one experiment per listed horizon.
        #[arg(long, value_delimiter = ',')]
        sweep: Vec<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Prints the effective settings as TOML.
    Config {
        #[command(flatten)]
        common: Common,
    },
}

/// What a finished command reports in its manifest.
struct Done {
    inputs: Vec<InputHash>,
    config: serde_json::Value,
    seeds: Vec<u64>,
    jobs: usize,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let name = command_name(&cli.command);
    let out = match &cli.command {
        Command::Report { .. } => None,
        Command::Config { .. } => None,
        Command::Synth { common }
        | Command::Ingest { common, .. }
        | Command::Features { common, .. }
        | Command::Train { common, .. }
        | Command::Predict { common, .. }
        | Command::Evaluate { common, .. }
        | Command::Pipeline { common, .. } => Some(common.out.clone()),
    };
    let mut dir = match out.as_deref().map(OutDir::create).transpose() {
        Ok(d) => d,
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::exit(1);
        }
    };
    let result = run(cli.command, dir.as_mut());
    let code = match (&result, dir) {
        (Ok(done), Some(mut d)) => match write_manifest(&mut d, name, Some(done), None) {
            Ok(()) => 0,
            Err(e) => {
                eprintln!("error: {e:#}");
                1
            }
        },
        (Ok(_), None) => 0,
        (Err(e), d) => {
            eprintln!("error: {e:#}");
            if let Some(mut d) = d {
                let msg = format!("{e:#}");
                let _ = std::fs::write(d.root.join(FAILURE_MARKER), format!("{msg}\n"));
                let _ = write_manifest(&mut d, name, None, Some(msg));
            }
            1
        }
    };
    std::process::exit(code);
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Synth { .. } => "synth",
        Command::Ingest { .. } => "ingest",
        Command::Features { .. } => "features",
        Command::Train { .. } => "train",
        Command::Predict { .. } => "predict",
        Command::Evaluate { .. } => "evaluate",
        Command::Report { .. } => "report",
        Command::Pipeline { .. } => "pipeline",
        Command::Config { .. } => "config",
    }
}

fn write_manifest(dir: &mut OutDir, command: &str, done: Option<&Done>, error: Option<String>) -> Result<()> {
    let mut outputs = dir.written.clone();
    outputs.sort();
    outputs.dedup();
    let m = Manifest {
        command: command.to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        status: if error.is_none() { "ok" } else { "failed" }.to_string(),
        error,
        seeds: done.map(|d| d.seeds.clone()).unwrap_or_default(),
        jobs: done.map_or(0, |d| d.jobs),
        inputs: done.map(|d| d.inputs.clone()).unwrap_or_default(),
        outputs,
        config: done.map_or(serde_json::Value::Null, |d| d.config.clone()),
    };
    dir.json(MANIFEST, &m)
}

fn resolve(common: &Common, fixture: bool) -> Result<Resolved> {
    let file = config::load(common.config.as_deref())?;
    let over = Overrides {
        seed: common.seed,
        jobs: common.jobs,
        horizon: common.horizon,
    };
    config::resolve(file, &over, fixture)
}

fn inputs_of(common: &Common, data: &[&Path]) -> Result<Vec<InputHash>> {
    let mut paths: Vec<&Path> = data.to_vec();
    if let Some(c) = &common.config {
        paths.push(c);
    }
    output::hash_inputs(&paths)
}

fn read_tracks(path: &Path) -> Result<Vec<Track>> {
    let parsed = parse_trajectories(path, TrajectoryFormat::Csv)?;
    if !parsed.rejected_rows.is_empty() {
        warn!("{} of {} rows rejected", parsed.rejected_rows.len(), parsed.total_rows);
    }
    info!("{} points from {} trucks", parsed.n_points(), parsed.tracks.len());
    Ok(parsed.tracks)
}

fn experiment_done(r: &Resolved, inputs: Vec<InputHash>, with_synth: bool) -> Result<Done> {
    let mut config = serde_json::json!({ "experiment": r.experiment, "jobs": r.jobs });
    if with_synth {
        config["synth"] = serde_json::to_value(&r.synth)?;
    }
    Ok(Done {
        inputs,
        config,
        seeds: r.experiment.seeds.clone(),
        jobs: r.jobs,
    })
}

fn run(command: Command, dir: Option<&mut OutDir>) -> Result<Done> {
    match command {
        Command::Report { metrics } => {
            print_report(&metrics)?;
            Ok(Done {
                inputs: Vec::new(),
                config: serde_json::Value::Null,
                seeds: Vec::new(),
                jobs: 1,
            })
        }
        Command::Config { common } => {
            let r = resolve(&common, false)?;
            let file = config::FileConfig {
                jobs: Some(r.jobs),
                experiment: Some(r.experiment.clone()),
                synth: Some(r.synth.clone()),
            };
            print!("{}", toml::to_string_pretty(&file)?);
            Ok(Done {
                inputs: Vec::new(),
                config: serde_json::Value::Null,
                seeds: r.experiment.seeds,
                jobs: r.jobs,
            })
        }
        command => {
            let dir = dir.expect("commands with outputs have a directory");
            run_with_outputs(command, dir)
        }
    }
}

fn run_with_outputs(command: Command, dir: &mut OutDir) -> Result<Done> {
    match command {
        Command::Synth { common } => {
            let r = resolve(&common, true)?;
            let (points, truth) = generate(&r.synth, r.jobs)?;
            info!("{} points, {} planted dwells", points.len(), truth.dwells.len());
            write_trajectories(dir.file("trajectories.csv")?, &points)?;
            dir.json("world.json", &r.synth)?;
            dir.json("ground_truth.json", &truth)?;
            Ok(Done {
                inputs: inputs_of(&common, &[])?,
                config: serde_json::json!({ "synth": r.synth }),
                seeds: vec![r.synth.seed],
                jobs: r.jobs,
            })
        }
        Command::Ingest { input, common } => {
            let r = resolve(&common, false)?;
            let parsed = parse_trajectories(&input, TrajectoryFormat::Csv)?;
            let stays = detect_all(&parsed.tracks, &r.experiment.stay)?;
            info!("{} stay points", stays.len());
            write_stay_points(dir.file("stay_points.csv")?, &stays)?;
            dir.json(
                "ingest.json",
                &serde_json::json!({
                    "total_rows": parsed.total_rows,
                    "rejected_rows": parsed.rejected_rows,
                    "points": parsed.n_points(),
                    "trucks": parsed.tracks.len(),
                    "stay_points": stays.len(),
                }),
            )?;
            Ok(Done {
                inputs: inputs_of(&common, &[&input])?,
                config: serde_json::json!({ "stay": r.experiment.stay }),
                seeds: Vec::new(),
                jobs: r.jobs,
            })
        }
        Command::Features { input, common } => {
            let r = resolve(&common, false)?;
            let tracks = read_tracks(&input)?;
            let (_, p) = prepare_from_tracks(&tracks, &r.experiment)?;
            write_features(dir, &p)?;
            experiment_done(&r, inputs_of(&common, &[&input])?, false)
        }
        Command::Train { input, common } => {
            let r = resolve(&common, false)?;
            let tracks = read_tracks(&input)?;
            let (_, p) = prepare_from_tracks(&tracks, &r.experiment)?;
            let runs = train_all(&p, &r.experiment, r.jobs)?;
            let mut summary = Vec::new();
            for run in &runs {
                for m in &run.models {
                    let stem = format!("seed{}_{}", run.seed, m.kind.name());
                    let path = dir.path(&format!("models/{stem}.bin"))?.with_extension("");
                    dir.written.push(format!("models/{stem}.json"));
                    m.trained.model.save(&path, run.seed, m.trained.steps)?;
                    m.trained.write_history(dir.file(&format!("history/{stem}.csv"))?)?;
                    summary.push(serde_json::json!({
                        "seed": run.seed,
                        "model": m.kind.name(),
                        "best_epoch": m.trained.best_epoch,
                        "epochs_run": m.trained.history.len(),
                        "steps": m.trained.steps,
                    }));
                }
            }
            dir.json("training.json", &summary)?;
            experiment_done(&r, inputs_of(&common, &[&input])?, false)
        }
        Command::Predict { input, models, common } => {
            let r = resolve(&common, false)?;
            let tracks = read_tracks(&input)?;
            let (_, p) = prepare_from_tracks(&tracks, &r.experiment)?;
            let seed = r.experiment.seeds[0];
            let features = p.graph_features();
            let mut per_model = Vec::new();
            for mc in &r.experiment.models {
                let stem = models.join("models").join(format!("seed{seed}_{}", mc.kind.name()));
                let model = Model::load(&stem, Some(&features)).with_context(|| format!("loading {}", stem.display()))?;
                if model.config != *mc {
                    bail!("{} was trained with different settings", stem.display());
                }
                per_model.push((mc.kind, model.predict(&p.test)?));
            }
            let fused = fuse(&per_model, &r.experiment.ensemble)?;
            write_predictions(dir, &p, &fused)?;
            let mut inputs = inputs_of(&common, &[&input])?;
            for mc in &r.experiment.models {
                let bin = models.join("models").join(format!("seed{seed}_{}.bin", mc.kind.name()));
                inputs.extend(output::hash_inputs(&[&bin])?);
            }
            let mut done = experiment_done(&r, inputs, false)?;
            done.seeds = vec![seed];
            Ok(done)
        }
        Command::Evaluate { predictions, grid, common } => {
            let r = resolve(&common, false)?;
            let grid_path = grid.unwrap_or_else(|| predictions.with_file_name("grid.json"));
            let grid: GridSpec = serde_json::from_reader(
                std::fs::File::open(&grid_path).with_context(|| format!("opening {}", grid_path.display()))?,
            )?;
            let rows = output::read_predictions(&predictions)?;
            let pred: Vec<u8> = rows.iter().map(|r| r.pred).collect();
            let truth: Vec<u8> = rows.iter().map(|r| r.truth).collect();
            let keys: Vec<CellSlot> = rows.iter().map(|r| CellSlot { cell: r.cell_id, slot: r.slot }).collect();
            let confusion = confusion_matrix(&pred, &truth)?;
            let eval = Evaluation {
                metrics: prf(&confusion),
                relaxed: relaxed_high_activity(&pred, &truth, &keys, &grid)?,
                confusion,
            };
            dir.json("evaluation.json", &eval)?;
            eval.metrics.write_csv(dir.file("metrics.csv")?)?;
            eval.confusion.write_csv(dir.file("confusion.csv")?)?;
            Ok(Done {
                inputs: inputs_of(&common, &[&predictions, &grid_path])?,
                config: serde_json::Value::Null,
                seeds: Vec::new(),
                jobs: r.jobs,
            })
        }
        Command::Pipeline {
            input,
            default_fixture,
            sweep,
            common,
        } => {
            let r = resolve(&common, default_fixture)?;
            let (tracks, data_path) = match &input {
                Some(path) => (read_tracks(path)?, path.clone()),
                None => {
                    let (points, _) = generate(&r.synth, r.jobs)?;
                    write_trajectories(dir.file("trajectories.csv")?, &points)?;
                    (to_tracks(&points), dir.root.join("trajectories.csv"))
                }
            };
            let (stays, p) = prepare_from_tracks(&tracks, &r.experiment)?;
            write_stay_points(dir.file("stay_points.csv")?, &stays)?;
            let runs = train_all(&p, &r.experiment, r.jobs)?;
            let rep = report(&p, &runs, &r.experiment)?;
            for run in &runs {
                for m in &run.models {
                    m.trained.write_history(dir.file(&format!("history/seed{}_{}.csv", run.seed, m.kind.name()))?)?;
                }
            }
            write_report(dir, &rep)?;
            write_predictions(dir, &p, &runs[0].fused)?;
            if !sweep.is_empty() {
                let reports = sweep_horizons(&tracks, &r.experiment, &sweep, r.jobs)?;
                let hs: Vec<_> = reports.iter().map(ExperimentReport::horizon_report).collect();
                dir.json("horizons.json", &hs)?;
            }
            let data: Vec<&Path> = input.iter().map(|_| data_path.as_path()).collect();
            let inputs = inputs_of(&common, &data)?;
            experiment_done(&r, inputs, default_fixture)
        }
        Command::Report { .. } | Command::Config { .. } => unreachable!("handled without outputs"),
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Evaluation {
    metrics: MetricsReport,
    confusion: ConfusionMatrix,
    relaxed: RelaxedReport,
}

fn write_features(dir: &mut OutDir, p: &Prepared) -> Result<()> {
    let sidecar = |cell_ids: Vec<usize>, thresholds| TensorSidecar {
        grid: p.grid,
        t0: p.activity.t0,
        slot_len: p.activity.slot_len,
        n_slots: p.activity.n_slots(),
        cell_ids,
        thresholds,
    };
    write_long_csv(dir.file("activity.csv")?, &p.activity.cell_ids, &p.activity.counts)?;
    dir.json("activity.json", &sidecar(p.activity.cell_ids.clone(), None))?;
    write_long_csv(dir.file("classes.csv")?, &p.classes.cell_ids, &p.classes.labels)?;
    dir.json("classes.json", &sidecar(p.classes.cell_ids.clone(), Some(p.classes.thresholds)))?;
    write_triplets(dir.file("adjacency.csv")?, &p.adjacency.cells, &p.adjacency.a, true)?;
    write_triplets(dir.file("semantic.csv")?, &p.semantic.cells, &p.semantic.d, false)?;
    for (name, set) in [("train", &p.train), ("val", &p.val), ("test", &p.test)] {
        let mut w = dir.file(&format!("{name}.bin"))?;
        write_samples(&mut w, set)?;
        w.flush()?;
    }
    dir.json(
        "features.json",
        &serde_json::json!({
            "grid": p.grid,
            "retained": p.retained,
            "medium_bound": p.classes.thresholds.medium_bound,
            "history_slots": p.history_slots,
            "zero_fraction": p.activity.zero_fraction(),
            "class_mix": p.classes.class_mix(),
            "samples": { "train": p.train.len(), "val": p.val.len(), "test": p.test.len() },
        }),
    )?;
    dir.json("grid.json", &p.grid)
}

fn write_predictions(dir: &mut OutDir, p: &Prepared, fused: &ProbTensor) -> Result<()> {
    let rows = output::prediction_rows(&test_keys(p), fused, &p.test.targets());
    output::write_predictions(dir.file("predictions.csv")?, &rows)?;
    dir.json("predictions.geojson", &output::geojson(&p.grid, &rows))?;
    dir.json("grid.json", &p.grid)
}

fn write_report(dir: &mut OutDir, rep: &ExperimentReport) -> Result<()> {
    dir.json("metrics.json", rep)?;
    rep.ensemble_metrics().write_csv(dir.file("metrics.csv")?)?;
    let mut cm = ConfusionMatrix::default();
    rep.seeds.iter().for_each(|s| cm.merge(&s.ensemble.confusion));
    cm.write_csv(dir.file("confusion.csv")?)?;
    Ok(())
}

fn print_report(path: &Path) -> Result<()> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = std::io::stdout().lock();
    if let Ok(rep) = serde_json::from_str::<ExperimentReport>(&text) {
        writeln!(
            out,
            "horizon {}  window {}  cells {}/{}  test samples {}  medium bound {}",
            rep.horizon, rep.window, rep.retained_cells, rep.n_cells, rep.n_test, rep.medium_bound
        )?;
        writeln!(out, "{:<16}{:>10}{:>10}{:>10}{:>10}", "model", "macro F1", "F1 low", "F1 mid", "F1 high")?;
        let mut line = |name: &str, m: &MetricsReport| {
            writeln!(
                out,
                "{name:<16}{:>10.4}{:>10.4}{:>10.4}{:>10.4}",
                m.macro_f1, m.per_class[0].f1, m.per_class[1].f1, m.per_class[2].f1
            )
        };
        line("majority", &rep.majority_baseline)?;
        let first = &rep.seeds[0];
        for name in first.models.keys() {
            let m = rep.summary.get(name).cloned().unwrap_or_else(|| first.models[name].metrics.clone());
            line(name, &m)?;
        }
        line("ensemble", &rep.ensemble_metrics())?;
        return Ok(());
    }
    let eval: Evaluation = serde_json::from_str(&text).with_context(|| format!("{} is not a metrics file", path.display()))?;
    writeln!(out, "macro F1 {:.4}", eval.metrics.macro_f1)?;
    for (c, m) in eval.metrics.per_class.iter().enumerate() {
        writeln!(out, "class {c}: precision {:.4} recall {:.4} F1 {:.4}", m.precision, m.recall, m.f1)?;
    }
    let rel = eval.relaxed.relaxed;
    writeln!(out, "high activity, one-hop relaxed: precision {:.4} recall {:.4} F1 {:.4}", rel.precision, rel.recall, rel.f1)?;
    Ok(())
}

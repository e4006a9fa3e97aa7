use std::path::Path;

use anyhow::{bail, Context, Result};
use haulcast::pipeline::{fixture_config, ExperimentConfig};
use haulcast::synth::{default_fixture, WorldConfig};
use serde::{Deserialize, Serialize};

/// Contents of the `--config` TOML file.
///
/// ```toml
/// jobs = 2
///
/// [experiment]
/// window = 12
/// horizon = 1
/// seeds = [0, 1, 2]
/// thresholds = { mode = "pinned", bound = 4 }
///
/// [experiment.train]
/// epochs = 20
///
/// [[experiment.models]]
/// kind = "tcn"
/// hidden = 16
/// ```
///
/// `[synth]` takes a full world description; without it the default
/// fixture is used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub jobs: Option<usize>,
    pub experiment: Option<ExperimentConfig>,
    pub synth: Option<WorldConfig>,
}

/// Settings after applying the command-line overrides.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Resolved {
    pub jobs: usize,
    pub experiment: ExperimentConfig,
    pub synth: WorldConfig,
}

pub struct Overrides {
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub horizon: Option<usize>,
}

pub fn load(path: Option<&Path>) -> Result<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// `fixture` fills the grid box and start time from the synthetic world when
/// the file does not give an experiment section.
pub fn resolve(file: FileConfig, over: &Overrides, fixture: bool) -> Result<Resolved> {
    let mut synth = file.synth.unwrap_or_else(|| default_fixture(over.seed.unwrap_or(0)));
    if let Some(seed) = over.seed {
        synth.seed = seed;
    }
    let mut experiment = match file.experiment {
        Some(e) => e,
        None if fixture => fixture_config(&synth),
        None => ExperimentConfig::default(),
    };
    if fixture {
        experiment.bbox.get_or_insert(synth.bbox);
        experiment.t0.get_or_insert(synth.t0);
    }
    if let Some(seed) = over.seed {
        experiment.seeds = vec![seed];
    }
    if let Some(h) = over.horizon {
        if h == 0 {
            bail!("horizon must be at least 1");
        }
        experiment.horizon = h;
    }
    let jobs = over
        .jobs
        .or(file.jobs)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .max(1);
    experiment.validate()?;
    Ok(Resolved {
        jobs,
        experiment,
        synth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn none() -> Overrides {
        Overrides {
            seed: None,
            jobs: None,
            horizon: None,
        }
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let file: FileConfig = toml::from_str(
            "jobs = 3\n[experiment]\nwindow = 6\nthresholds = { mode = \"pinned\", bound = 4 }\n[experiment.train]\nepochs = 2\n",
        )
        .unwrap();
        let r = resolve(file, &none(), false).unwrap();
        assert_eq!(r.jobs, 3);
        assert_eq!(r.experiment.window, 6);
        assert_eq!(r.experiment.train.epochs, 2);
        assert_eq!(r.experiment.train.batch_size, 16);
        assert_eq!(r.experiment.models.len(), 4);
    }

    #[test]
    fn overrides_win() {
        let over = Overrides {
            seed: Some(7),
            jobs: Some(2),
            horizon: Some(3),
        };
        let r = resolve(FileConfig::default(), &over, true).unwrap();
        assert_eq!(r.experiment.seeds, vec![7]);
        assert_eq!(r.experiment.horizon, 3);
        assert_eq!(r.synth.seed, 7);
        assert_eq!(r.experiment.bbox, Some(r.synth.bbox));
        let zero = Overrides { horizon: Some(0), ..over };
        assert!(resolve(FileConfig::default(), &zero, true).is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<FileConfig>("job = 3").is_err());
    }
}

//! Experiment configuration: a JSON document layered over a named profile.
//!
//! Every key is optional in the file. Missing keys take the profile value,
//! so `{}` is a valid config and `{"train": {"t2": 200}}` changes one knob.

use std::path::{Path, PathBuf};

use clap::ValueEnum;
use lidnet::metrics::EvalConfig;
use lidnet::phantom::{PhantomSpec, SimulationConfig};
use lidnet::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, CliResult};

pub const RUN_DIR_ENV: &str = "LIDNET_RUN_DIR";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Small phases and a compact detector for a single CPU core.
    #[default]
    Desk,
    /// Published step counts, learning rates and detector width.
    Paper,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub phantom: PhantomSpec,
    pub simulation: SimulationConfig,
    pub n_train: usize,
    pub n_test: usize,
    /// Dataset directory used by `train` and `eval`.
    pub path: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub metrics: EvalConfig,
    /// Frozen NDCT-trained detector; defaults to `<run>/eval_detector`.
    pub detector_checkpoint: Option<PathBuf>,
    /// Steps and seed for `train --role eval-detector`.
    pub detector_steps: usize,
    pub detector_seed: u64,
    /// Test samples rendered by `report`.
    pub overlays: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSection,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn profile(p: Profile) -> Self {
        let desk = ExperimentConfig {
            dataset: DatasetSection {
                phantom: PhantomSpec::default(),
                simulation: SimulationConfig::default(),
                n_train: 200,
                n_test: 100,
                path: None,
            },
            train: TrainConfig::desk(),
            eval: EvalSection {
                metrics: EvalConfig::default(),
                detector_checkpoint: None,
                detector_steps: 1500,
                detector_seed: 100,
                overlays: 4,
            },
            output_dir: None,
        };
        match p {
            Profile::Desk => desk,
            Profile::Paper => ExperimentConfig {
                train: TrainConfig::paper(),
                eval: EvalSection {
                    detector_steps: 4000,
                    ..desk.eval
                },
                ..desk
            },
        }
    }

    /// Overlays `patch` on the profile defaults, key by key.
    pub fn from_value(profile: Profile, patch: Value) -> CliResult<Self> {
        let mut base = serde_json::to_value(Self::profile(profile)).expect("serialisable profile");
        merge(&mut base, patch);
        let cfg: Self = serde_json::from_value(base).map_err(|e| CliError::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, profile: Profile) -> CliResult<Self> {
        let patch = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => Value::Object(Default::default()),
        };
        Self::from_value(profile, patch)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.dataset.phantom.validate()?;
        self.dataset.simulation.validate()?;
        if self.dataset.n_train == 0 || self.dataset.n_test == 0 {
            return Err(CliError::Config("dataset.n_train and dataset.n_test must be positive".into()));
        }
        self.train.validate()?;
        self.eval.metrics.glcm.validate()?;
        if self.eval.detector_steps == 0 {
            return Err(CliError::Config("eval.detector_steps must be positive".into()));
        }
        Ok(())
    }

    /// Where outputs go without `--out`: config, then `$LIDNET_RUN_DIR`, then `runs/`.
    pub fn output_root(&self) -> PathBuf {
        self.output_dir.clone().unwrap_or_else(default_root)
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.dataset.path.clone().unwrap_or_else(|| default_root().join("data"))
    }
}

pub fn default_root() -> PathBuf {
    std::env::var_os(RUN_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if v.is_object() && slot.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn empty_patch_is_the_profile() {
        let cfg = ExperimentConfig::from_value(Profile::Desk, json!({})).unwrap();
        assert_eq!(cfg, ExperimentConfig::profile(Profile::Desk));
        let paper = ExperimentConfig::from_value(Profile::Paper, json!({})).unwrap();
        assert_eq!(paper.train.t1, 4000);
        assert_eq!(paper.train.objective.weights.lambda1, 5.0);
    }

    #[test]
    fn nested_keys_override_one_at_a_time() {
        let cfg = ExperimentConfig::from_value(
            Profile::Desk,
            json!({"dataset": {"simulation": {"n0": 3000.0}}, "train": {"t2": 7}}),
        )
        .unwrap();
        assert_eq!(cfg.dataset.simulation.n0, 3000.0);
        assert_eq!(cfg.dataset.simulation.mu_max, SimulationConfig::default().mu_max);
        assert_eq!(cfg.train.t2, 7);
        assert_eq!(cfg.train.t3, TrainConfig::desk().t3);
    }

    #[test]
    fn unknown_and_invalid_keys_are_config_errors() {
        for patch in [
            json!({"dataset": {"n_tranes": 3}}),
            json!({"train": {"rounds": 0}}),
            json!({"dataset": {"simulation": {"n0": -1.0}}}),
            json!({"train": {"t1": "many"}}),
        ] {
            let e = ExperimentConfig::from_value(Profile::Desk, patch.clone()).unwrap_err();
            assert_eq!(e.exit_code(), 2, "{patch}: {e}");
        }
    }
}

use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _, Result};
use fpdiff::dataset::DatasetSpec;
use fpdiff::sampler::SamplingConfig;
use fpdiff::score_fpe::FpeConfig;
use fpdiff::trainer::{EvalConfig, TrainConfig};
use fpdiff::verification::VerifyConfig;
use fpdiff::Schedules;
use serde::{Deserialize, Serialize};

/// Environment variable naming the directory relative output paths resolve against.
pub const OUTPUT_ROOT_VAR: &str = "FPDIFF_OUTPUT_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed. Copied into `train.seed` and `eval.seed` on resolve, and
    /// used for corpus draws, sampling and verification.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub schedules: Schedules,
    /// Estimator used by the training residual term.
    pub fpe: FpeConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub dataset: DatasetSpec,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub sample: SampleConfig,
    pub verify: VerifyConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output_dir: PathBuf::from("runs"),
            schedules: Schedules::default(),
            fpe: FpeConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            dataset: DatasetSpec::default(),
            corpus: CorpusConfig::default(),
            model: ModelConfig::default(),
            sample: SampleConfig::default(),
            verify: VerifyConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub n_train: usize,
    pub n_heldout: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n_train: 512,
            n_heldout: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub context: Vec<f64>,
    pub hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            context: vec![0.0, 1.0],
            hidden: 32,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Driver {
    /// Trained denoiser loaded from a checkpoint.
    #[default]
    Model,
    /// Exact scores of the dataset generator.
    Oracle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub num_steps: usize,
    pub num_samples: usize,
    pub deterministic: bool,
    pub driver: Driver,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

impl Default for SampleConfig {
    fn default() -> Self {
        let s = SamplingConfig::default();
        SampleConfig {
            num_steps: s.num_steps,
            num_samples: s.num_samples,
            deterministic: s.deterministic,
            driver: Driver::default(),
            checkpoint: None,
        }
    }
}

impl SampleConfig {
    pub fn sampling(&self) -> SamplingConfig {
        SamplingConfig {
            num_steps: self.num_steps,
            num_samples: self.num_samples,
            deterministic: self.deterministic,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub reps: usize,
    /// Training steps per repetition and mode.
    pub steps: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig { reps: 20, steps: 5 }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Apply a seed override, propagate the master seed and check every section.
    pub fn resolve(mut self, seed: Option<u64>) -> Result<Self> {
        if let Some(s) = seed {
            self.seed = s;
        }
        self.train.seed = self.seed;
        self.eval.seed = self.seed;
        self.schedules.validate()?;
        self.fpe.validate()?;
        self.train.validate()?;
        self.eval.fpe.validate()?;
        self.dataset.validate()?;
        self.sample.sampling().validate()?;
        self.verify.validate()?;
        if self.schedules.seq.n_types != self.dataset.n_types {
            bail!(
                "schedules.seq.n_types = {} but dataset.n_types = {}",
                self.schedules.seq.n_types,
                self.dataset.n_types
            );
        }
        if self.corpus.n_train == 0 || self.corpus.n_heldout == 0 {
            bail!("corpus sizes must be positive");
        }
        if self.model.hidden == 0 {
            bail!("model.hidden must be positive");
        }
        if self.bench.reps < 20 || self.bench.steps == 0 {
            bail!("bench needs reps >= 20 and steps >= 1");
        }
        Ok(self)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}

/// `dir` itself if absolute, otherwise joined onto `$FPDIFF_OUTPUT_ROOT` when set.
pub fn resolve_output(dir: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_VAR) {
        Some(root) if dir.is_relative() => PathBuf::from(root).join(dir),
        _ => dir.to_path_buf(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = RunConfig::default().resolve(Some(7)).unwrap();
        let text = cfg.to_toml().unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.train.seed, 7);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(toml::from_str::<RunConfig>("bogus = 1").is_err());
        assert!(toml::from_str::<RunConfig>("[dataset]\nkind = \"helix\"").is_err());
        let cfg: RunConfig = toml::from_str("[bench]\nreps = 3").unwrap();
        assert!(cfg.resolve(None).is_err());
        let cfg: RunConfig = toml::from_str("[schedules.seq]\nn_types = 4").unwrap();
        assert!(cfg.resolve(None).is_err());
    }

    #[test]
    fn partial_files_fill_defaults() {
        let cfg: RunConfig = toml::from_str("seed = 3\n[train]\nsteps = 10").unwrap();
        assert_eq!(cfg.train.steps, 10);
        assert_eq!(cfg.train.batch_size, TrainConfig::default().batch_size);
        assert_eq!(cfg.corpus, CorpusConfig::default());
    }
}

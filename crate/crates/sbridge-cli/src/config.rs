use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use sbridge::data::{PriorSpec, TargetSpec};
use sbridge::nets::NetworkSpec;
use sbridge::sampling::SamplerConfig;
use sbridge::sde::{DriftKind, SdeSpec};
use sbridge::training::TrainConfig;

/// Environment variable naming the root directory under which run output
/// directories are created. Defaults to the current directory.
pub const OUTPUT_ROOT_ENV: &str = "SBRIDGE_OUTPUT_ROOT";

/// Full description of one run: target, dynamics, networks, optimization,
/// and sampling. A persisted config reloaded under the same seed reproduces
/// the run exactly.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct RunConfig {
    pub dataset: TargetSpec,
    #[serde(default)]
    pub sde: SdeParams,
    #[serde(default)]
    pub network: NetworkSpec,
    #[serde(default = "default_prior_variance")]
    pub prior_variance: f64,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub sampler: SamplerConfig,
    /// Run directory, resolved relative to the output root.
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    /// Checkpoint write period in iterations; the final state is always
    /// written.
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
}

fn default_prior_variance() -> f64 {
    1.0
}

fn default_checkpoint_every() -> usize {
    1000
}

/// The SDE fields in serializable form; `SdeSpec` construction validates the
/// schedule.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SdeParams {
    pub drift: DriftKind,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub t_horizon: f64,
    pub steps: usize,
}

impl Default for SdeParams {
    fn default() -> Self {
        let toy = SdeSpec::toy();
        Self {
            drift: toy.drift,
            sigma_min: toy.sigma_min,
            sigma_max: toy.sigma_max,
            t_horizon: toy.t_horizon,
            steps: toy.steps,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let config: RunConfig = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.network.dim != self.dataset.dim() {
            anyhow::bail!(
                "network dim {} does not match dataset dim {}",
                self.network.dim,
                self.dataset.dim()
            );
        }
        if !(self.prior_variance > 0.0) {
            anyhow::bail!("prior_variance must be positive");
        }
        if self.checkpoint_every == 0 {
            anyhow::bail!("checkpoint_every must be positive");
        }
        self.sde()?;
        let mut train = self.train.clone();
        train.seed = self.seed;
        train.validate()?;
        Ok(())
    }

    pub fn sde(&self) -> Result<SdeSpec> {
        let s = self.sde;
        Ok(SdeSpec::new(s.drift, s.sigma_min, s.sigma_max, s.t_horizon, s.steps)?)
    }

    /// Training config with the run seed substituted in, so the seed lives
    /// in exactly one place in the file.
    pub fn train_config(&self) -> TrainConfig {
        let mut t = self.train.clone();
        t.seed = self.seed;
        t
    }

    pub fn prior(&self) -> PriorSpec {
        PriorSpec::new(self.dataset.dim(), self.prior_variance)
    }

    /// Output directory resolved against `SBRIDGE_OUTPUT_ROOT` (absolute
    /// `output_dir` values are used as given).
    pub fn resolved_output_dir(&self) -> PathBuf {
        if self.output_dir.is_absolute() {
            self.output_dir.clone()
        } else {
            let root = std::env::var_os(OUTPUT_ROOT_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("."));
            root.join(&self.output_dir)
        }
    }
}

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use dlfm::data::{SplitProtocol, ToyConfig};
use dlfm::rff::{FrequencyMode, RffInit};
use dlfm::training::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    DlfmRff,
    DlfmVip,
    DgpRff,
    ExactGp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Architecture {
    pub hidden_dims: Vec<usize>,
    pub n_latents: usize,
    pub n_rf: usize,
    pub n_mc: usize,
    pub frequency_mode: FrequencyMode,
    pub concat_hidden: bool,
    pub n_inducing: usize,
    pub n_basis: usize,
    /// Regularly spaced first-layer inducing inputs over the training range.
    pub fixed_grid: bool,
    pub predict_samples: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            hidden_dims: vec![3],
            n_latents: 1,
            n_rf: 100,
            n_mc: 100,
            frequency_mode: FrequencyMode::Variational,
            concat_hidden: true,
            n_inducing: 100,
            n_basis: 256,
            fixed_grid: false,
            predict_samples: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VipInit {
    pub lengthscale: f64,
    pub decay: f64,
    pub variance: f64,
    pub likelihood_var: f64,
    pub chol_diag: f64,
}

impl Default for VipInit {
    fn default() -> Self {
        Self {
            lengthscale: 0.1,
            decay: 2.5,
            variance: 1.0,
            likelihood_var: 0.01,
            chol_diag: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GpInit {
    pub variance: f64,
    pub lengthscale: f64,
    pub noise: f64,
}

impl Default for GpInit {
    fn default() -> Self {
        Self {
            variance: 1.0,
            lengthscale: 1.0,
            noise: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Toy {
        #[serde(default)]
        toy: ToyConfig,
    },
    Csv {
        path: PathBuf,
        inputs: Vec<String>,
        outputs: Vec<String>,
        /// Split manifest written by `gen-toy` or an earlier run.
        #[serde(default)]
        manifest: Option<PathBuf>,
    },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Toy { toy: ToyConfig::default() }
    }
}

/// Everything needed to reproduce a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    /// Write `checkpoints/iter_<n>.json` every this many iterations.
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
    #[serde(default = "yes")]
    pub standardize_x: bool,
    #[serde(default = "yes")]
    pub standardize_y: bool,
    #[serde(default)]
    pub data: DataSource,
    /// Relabels the data; toy data keeps its built-in windows when absent.
    #[serde(default)]
    pub split: Option<SplitProtocol>,
    #[serde(default)]
    pub architecture: Architecture,
    #[serde(default)]
    pub rff_init: RffInit,
    #[serde(default)]
    pub vip_init: VipInit,
    #[serde(default)]
    pub gp_init: GpInit,
    /// Model-dependent schedule when absent.
    #[serde(default)]
    pub train: Option<TrainConfig>,
}

fn default_out() -> PathBuf {
    PathBuf::from("run")
}

fn yes() -> bool {
    true
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| anyhow::anyhow!(dlfm::Error::Config(e.to_string())))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    /// The training schedule with the run seed applied.
    pub fn train_config(&self) -> TrainConfig {
        let base = self.train.clone().unwrap_or_else(|| match self.model {
            ModelKind::DlfmVip => TrainConfig::vip(self.architecture.n_mc),
            _ => TrainConfig::rff(self.architecture.n_mc),
        });
        TrainConfig { seed: self.seed, ..base }
    }

    pub fn validate(&self) -> Result<()> {
        let a = &self.architecture;
        if a.n_latents == 0 || a.n_rf == 0 || a.n_mc == 0 || a.n_inducing == 0 || a.n_basis == 0 || a.predict_samples == 0 {
            bail!(dlfm::Error::Config("architecture counts must be positive".into()));
        }
        if a.hidden_dims.contains(&0) {
            bail!(dlfm::Error::Config("architecture.hidden_dims entries must be positive".into()));
        }
        if self.checkpoint_every == Some(0) {
            bail!(dlfm::Error::Config("checkpoint_every must be positive".into()));
        }
        Ok(())
    }
}

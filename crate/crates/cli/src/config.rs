use std::path::{Path, PathBuf};

use conducive::{
    AnalyticSurrogateOptions, BlobsParams, CoinParams, EstimatorKind, FederationConfig, GridSpec, LinRegParams,
    LocalFitConfig, ModelSpec, ShardStrategy,
};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Everything a command may need. Each command reads only its own sections.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Overrides the model recorded in the dataset manifest.
    #[serde(default)]
    pub model: Option<ModelSpec>,
    #[serde(default)]
    pub synth: Option<SynthSpec>,
    #[serde(default)]
    pub data: Option<DataSource>,
    #[serde(default)]
    pub federation: Option<FederationConfig>,
    #[serde(default)]
    pub surrogates: Option<SurrogateSource>,
    #[serde(default)]
    pub diagnostics: DiagnosticsRequest,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "snake_case")]
pub enum SynthSpec {
    Blobs2d(#[serde(default)] BlobsParams),
    BernoulliCoins(#[serde(default)] CoinParams),
    LinregSynthetic(#[serde(default)] LinRegParams),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    /// A directory written by `synth` (manifest plus shard CSVs).
    Dataset { dir: PathBuf },
    /// One CSV of pooled data, split on load.
    PooledCsv {
        path: PathBuf,
        strategy: ShardStrategy,
        n_shards: usize,
        /// Column holding a 0/1 class label for label-skewed splits.
        #[serde(default)]
        label_column: Option<String>,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum SurrogateSource {
    Analytic {
        #[serde(default, flatten)]
        options: AnalyticSurrogateOptions,
    },
    LocalSgld {
        fit: LocalFitConfig,
        samples: usize,
        #[serde(default)]
        diagonal_only: bool,
    },
    FromFile { dir: PathBuf },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsRequest {
    /// MSE of the posterior mean against the closed-form posterior.
    #[serde(default = "yes")]
    pub mse: bool,
    #[serde(default)]
    pub second_moment: bool,
    /// Curve checkpoint stride in kept samples.
    #[serde(default = "default_every")]
    pub every: usize,
    /// Held-out CSV for the average log-likelihood curve.
    #[serde(default)]
    pub heldout: Option<PathBuf>,
    /// Grid for the per-shard score constants.
    #[serde(default)]
    pub grid: Option<GridSpec>,
    #[serde(default)]
    pub moments: Option<MomentsRequest>,
}

fn yes() -> bool {
    true
}

fn default_every() -> usize {
    100
}

impl Default for DiagnosticsRequest {
    fn default() -> Self {
        Self {
            mse: true,
            second_moment: false,
            every: default_every(),
            heldout: None,
            grid: None,
            moments: None,
        }
    }
}

/// Estimator mean and variance at a fixed parameter.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MomentsRequest {
    pub theta: Vec<f64>,
    pub batch_size: usize,
    pub estimators: Vec<EstimatorKind>,
    /// Draws used when enumeration is too large.
    #[serde(default = "default_draws")]
    pub draws: usize,
}

fn default_draws() -> usize {
    100_000
}

/// A parsed config plus the directory its relative paths are resolved from.
pub struct Loaded {
    pub config: ExperimentConfig,
    base: PathBuf,
}

impl Loaded {
    pub fn empty() -> Self {
        Self {
            config: ExperimentConfig::default(),
            base: PathBuf::from("."),
        }
    }

    pub fn from_file(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let config: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { config, base })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    /// Command-line flag (or its environment variable), then the config,
    /// then `out`.
    pub fn output_dir(&self, flag: Option<PathBuf>) -> PathBuf {
        flag.or_else(|| self.config.output_dir.as_deref().map(|p| self.resolve(p)))
            .unwrap_or_else(|| PathBuf::from("out"))
    }

    /// Command-line seed, then the top-level config seed, then the
    /// federation seed, then 0.
    pub fn seed(&self, flag: Option<u64>) -> u64 {
        flag.or(self.config.seed)
            .or(self.config.federation.as_ref().map(|f| f.seed))
            .unwrap_or(0)
    }

    pub fn federation(&self, seed: u64) -> CliResult<FederationConfig> {
        let mut cfg = self
            .config
            .federation
            .clone()
            .ok_or_else(|| CliError::Config("missing `federation` section".into()))?;
        cfg.seed = seed;
        cfg.validate()?;
        if cfg.estimator.needs_surrogates() && self.config.surrogates.is_none() {
            return Err(CliError::Config("cgdsgld needs a `surrogates` source".into()));
        }
        Ok(cfg)
    }
}

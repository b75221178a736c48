//! Experiment configuration, stored as TOML.

use std::path::{Path, PathBuf};

use fedspar_core::capacity::PathLossModel;
use fedspar_core::fl::{FlConfig, GlobalOptimizer, QChoice, Uplink};
use fedspar_core::linreg::LinRegSpec;
use fedspar_core::SeedScope;
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

/// Environment variable that overrides the MNIST directory of a config.
pub const MNIST_DIR_ENV: &str = "FEDSPAR_MNIST_DIR";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Parse(#[from] toml::de::Error),
    #[error("unsupported schema_version {0} (this build reads {SCHEMA_VERSION})")]
    Schema(u32),
    #[error("`{field}`: {message}")]
    Invalid { field: &'static str, message: String },
}

fn invalid(field: &'static str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { field, message: message.into() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub task: TaskConfig,
    pub federation: FederationConfig,
    pub channel: ChannelConfig,
    pub codec: CodecConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TaskConfig {
    Mnist {
        /// Directory with the four IDX files; [`MNIST_DIR_ENV`] takes
        /// precedence.
        #[serde(default)]
        data_dir: Option<PathBuf>,
        #[serde(default = "default_hidden")]
        hidden: usize,
        partition: PartitionConfig,
        /// Evaluate on only the first this many test samples.
        #[serde(default)]
        test_limit: Option<usize>,
    },
    Linreg {
        dim: usize,
        samples_per_device: usize,
        #[serde(default = "default_noise")]
        noise: f64,
        #[serde(default = "default_heterogeneity")]
        heterogeneity: f64,
        #[serde(default = "default_ridge")]
        ridge: f64,
        #[serde(default)]
        spectrum_decay: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PartitionConfig {
    OneClass { per_device: usize },
    Dirichlet { alpha: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationConfig {
    pub devices: usize,
    pub participants: usize,
    pub rounds: usize,
    #[serde(default = "one")]
    pub local_epochs: usize,
    #[serde(default = "default_local_lr")]
    pub local_lr: f64,
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default = "default_kappa")]
    pub kappa: f64,
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub track_shadow: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum OptimizerConfig {
    Gd { lr: f64 },
    Adam { lr: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ChannelConfig {
    /// Every device gets `⌊C·N⌋` bits per round.
    Homogeneous { bits_per_entry: f64 },
    /// Log-distance path loss with one shadowing draw per device.
    PathLoss {
        #[serde(default = "default_d_min")]
        d_min_m: f64,
        #[serde(default = "default_d_max")]
        d_max_m: f64,
        #[serde(default = "default_shadow_sigma")]
        shadow_sigma_db: f64,
        #[serde(default = "default_mean_snr")]
        mean_snr_db: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecConfig {
    pub scheme: Scheme,
    #[serde(default = "one")]
    pub subvectors: usize,
    #[serde(default = "default_q_max")]
    pub q_max: usize,
    /// Fixed quantization level instead of the budgeted choice.
    #[serde(default)]
    pub fixed_q: Option<usize>,
    /// Search every `(S, Q)` pair with the full objective.
    #[serde(default)]
    pub exhaustive: bool,
    #[serde(default)]
    pub seed_scope: ScopeConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    Fedspar,
    Vanilla,
    TopSFloat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScopeConfig {
    #[default]
    Static,
    PerRound,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    /// Also write one row per participant and round.
    #[serde(default = "yes")]
    pub device_log: bool,
    /// Decode every payload a second time on the server side.
    #[serde(default)]
    pub verify_uplink: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { eval_every: default_eval_every(), device_log: true, verify_uplink: false }
    }
}

fn one() -> usize {
    1
}
fn yes() -> bool {
    true
}
fn default_hidden() -> usize {
    20
}
fn default_noise() -> f64 {
    0.1
}
fn default_heterogeneity() -> f64 {
    0.5
}
fn default_ridge() -> f64 {
    0.01
}
fn default_local_lr() -> f64 {
    0.01
}
fn default_kappa() -> f64 {
    1.0
}
fn default_d_min() -> f64 {
    100.0
}
fn default_d_max() -> f64 {
    1000.0
}
fn default_shadow_sigma() -> f64 {
    8.7f64.sqrt()
}
fn default_mean_snr() -> f64 {
    10.0
}
fn default_q_max() -> usize {
    16
}
fn default_eval_every() -> usize {
    10
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        #[derive(Deserialize)]
        struct Version {
            schema_version: Option<u32>,
        }
        let v: Version = toml::from_str(text)?;
        match v.schema_version {
            Some(SCHEMA_VERSION) => {}
            Some(other) => return Err(ConfigError::Schema(other)),
            None => return Err(invalid("schema_version", "missing")),
        }
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(ConfigError::Schema(self.schema_version));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(invalid("name", "must be non-empty and contain no path separators"));
        }
        let f = &self.federation;
        if f.devices == 0 {
            return Err(invalid("federation.devices", "must be at least 1"));
        }
        if f.participants == 0 || f.participants > f.devices {
            return Err(invalid("federation.participants", format!("must be in 1..={}", f.devices)));
        }
        if f.rounds == 0 {
            return Err(invalid("federation.rounds", "must be at least 1"));
        }
        if f.local_epochs == 0 {
            return Err(invalid("federation.local_epochs", "must be at least 1"));
        }
        if !(f.local_lr > 0.0 && f.local_lr.is_finite()) {
            return Err(invalid("federation.local_lr", "must be positive"));
        }
        if f.batch_size == Some(0) {
            return Err(invalid("federation.batch_size", "must be positive"));
        }
        if !(0.0..=1.0).contains(&f.kappa) {
            return Err(invalid("federation.kappa", "must be in [0, 1]"));
        }
        let (OptimizerConfig::Gd { lr } | OptimizerConfig::Adam { lr }) = f.optimizer;
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(invalid("federation.optimizer.lr", "must be positive"));
        }
        if f.track_shadow && !matches!(f.optimizer, OptimizerConfig::Gd { .. }) {
            return Err(invalid("federation.track_shadow", "needs the gd optimizer"));
        }
        match &self.task {
            TaskConfig::Mnist { hidden, partition, .. } => {
                if *hidden == 0 {
                    return Err(invalid("task.hidden", "must be at least 1"));
                }
                match partition {
                    PartitionConfig::OneClass { per_device: 0 } => {
                        return Err(invalid("task.partition.per_device", "must be at least 1"))
                    }
                    PartitionConfig::Dirichlet { alpha } if !(*alpha > 0.0 && alpha.is_finite()) => {
                        return Err(invalid("task.partition.alpha", "must be positive"))
                    }
                    _ => {}
                }
            }
            TaskConfig::Linreg { dim, samples_per_device, noise, heterogeneity, ridge, spectrum_decay } => {
                if *dim == 0 || *samples_per_device == 0 {
                    return Err(invalid("task", "dim and samples_per_device must be at least 1"));
                }
                if [*noise, *heterogeneity, *ridge, *spectrum_decay].iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
                    return Err(invalid("task", "noise, heterogeneity, ridge and spectrum_decay must be non-negative"));
                }
            }
        }
        match self.channel {
            ChannelConfig::Homogeneous { bits_per_entry } => {
                if !(bits_per_entry > 0.0 && bits_per_entry.is_finite()) {
                    return Err(invalid("channel.bits_per_entry", "must be positive"));
                }
            }
            ChannelConfig::PathLoss { d_min_m, d_max_m, shadow_sigma_db, mean_snr_db } => {
                if !(d_min_m >= 100.0 && d_max_m > d_min_m) {
                    return Err(invalid("channel", "need 100 <= d_min_m < d_max_m"));
                }
                if !(shadow_sigma_db >= 0.0) || !mean_snr_db.is_finite() {
                    return Err(invalid("channel", "shadow_sigma_db must be non-negative"));
                }
            }
        }
        let c = &self.codec;
        if c.subvectors == 0 {
            return Err(invalid("codec.subvectors", "must be at least 1"));
        }
        if !(2..=64).contains(&c.q_max) {
            return Err(invalid("codec.q_max", "must be in 2..=64"));
        }
        if let Some(q) = c.fixed_q {
            if q < 2 || q > c.q_max {
                return Err(invalid("codec.fixed_q", format!("must be in 2..={}", c.q_max)));
            }
            if c.exhaustive {
                return Err(invalid("codec.exhaustive", "conflicts with fixed_q"));
            }
        }
        Ok(())
    }

    pub fn fl_config(&self) -> FlConfig {
        let f = &self.federation;
        let c = &self.codec;
        let uplink = match c.scheme {
            Scheme::Vanilla => Uplink::Vanilla,
            Scheme::TopSFloat => Uplink::TopSFloat { l: c.subvectors },
            Scheme::Fedspar => Uplink::FedSpar {
                l: c.subvectors,
                q_max: c.q_max,
                choice: match (c.fixed_q, c.exhaustive) {
                    (Some(q), _) => QChoice::Fixed(q),
                    (None, true) => QChoice::Exhaustive,
                    (None, false) => QChoice::Optimized,
                },
            },
        };
        FlConfig {
            participants: f.participants,
            rounds: f.rounds,
            local_epochs: f.local_epochs,
            local_lr: f.local_lr,
            batch_size: f.batch_size,
            kappa: f.kappa,
            optimizer: match f.optimizer {
                OptimizerConfig::Gd { lr } => GlobalOptimizer::Gd { lr },
                OptimizerConfig::Adam { lr } => GlobalOptimizer::adam(lr),
            },
            uplink,
            seed: self.seed,
            seed_scope: match c.seed_scope {
                ScopeConfig::Static => SeedScope::Static,
                ScopeConfig::PerRound => SeedScope::PerRound,
            },
            eval_every: self.output.eval_every,
            track_shadow: f.track_shadow,
            verify_uplink: self.output.verify_uplink,
        }
    }

    pub fn linreg_spec(&self) -> Option<LinRegSpec> {
        match self.task {
            TaskConfig::Linreg { dim, samples_per_device, noise, heterogeneity, ridge, spectrum_decay } => {
                Some(LinRegSpec {
                    dim,
                    devices: self.federation.devices,
                    samples_per_device,
                    noise,
                    heterogeneity,
                    ridge,
                    spectrum_decay,
                })
            }
            TaskConfig::Mnist { .. } => None,
        }
    }

    /// Path-loss model for the heterogeneous channel.
    pub fn path_loss_model(&self) -> Option<PathLossModel> {
        match self.channel {
            ChannelConfig::PathLoss { d_min_m, d_max_m, shadow_sigma_db, mean_snr_db } => {
                let mut m = PathLossModel { shadow_sigma_db, ..PathLossModel::default() };
                m.scale_db = m.calibrated_scale(mean_snr_db, d_min_m, d_max_m).ok()?;
                Some(m)
            }
            ChannelConfig::Homogeneous { .. } => None,
        }
    }

    /// The MNIST directory: the environment override, the configured path,
    /// or `data/mnist`.
    pub fn mnist_dir(&self) -> Option<PathBuf> {
        match &self.task {
            TaskConfig::Mnist { data_dir, .. } => Some(
                std::env::var_os(MNIST_DIR_ENV)
                    .map(PathBuf::from)
                    .or_else(|| data_dir.clone())
                    .unwrap_or_else(|| PathBuf::from("data/mnist")),
            ),
            TaskConfig::Linreg { .. } => None,
        }
    }
}

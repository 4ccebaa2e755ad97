//! Experiment configuration, serialised as TOML.
//!
//! Precedence is built-in defaults, then a config file, then `key=value`
//! overrides (see [`ExperimentConfig::load`]).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Environment variable that overrides `data.mnist_dir`.
pub const MNIST_DIR_ENV: &str = "SVG_MNIST_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Fixed prior N(0, I).
    Fp,
    /// Learned recurrent prior.
    Lp,
    /// No latent path at all.
    Deterministic,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Fp => "fp",
            Mode::Lp => "lp",
            Mode::Deterministic => "deterministic",
        }
    }

    pub fn is_stochastic(self) -> bool {
        self != Mode::Deterministic
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fp" => Ok(Mode::Fp),
            "lp" => Ok(Mode::Lp),
            "deterministic" | "det" => Ok(Mode::Deterministic),
            other => Err(Error::Config(format!(
                "unknown mode `{other}` (expected fp, lp or deterministic)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub mode: Mode,
    /// Square frame extent; a power of two, at least 8.
    pub frame_size: usize,
    /// Channel widths of the stride-2 encoder stages (one per halving
    /// from `frame_size` down to 4).
    pub channels: Vec<usize>,
    /// |h|
    pub embed_dim: usize,
    /// |g|
    pub predictor_out: usize,
    /// |z|
    pub latent_dim: usize,
    pub predictor_cells: usize,
    pub predictor_layers: usize,
    pub posterior_cells: usize,
    pub prior_cells: usize,
    pub normalization: Normalization,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            mode: Mode::Lp,
            frame_size: 32,
            channels: vec![16, 32, 64],
            embed_dim: 64,
            predictor_out: 64,
            latent_dim: 10,
            predictor_cells: 128,
            predictor_layers: 2,
            posterior_cells: 128,
            prior_cells: 128,
            normalization: Normalization::None,
        }
    }
}

impl ModelConfig {
    /// The 64x64 geometry with |h| = |g| = 128 and 256-cell LSTMs.
    pub fn paper() -> Self {
        ModelConfig {
            mode: Mode::Lp,
            frame_size: 64,
            channels: vec![64, 128, 256, 512],
            embed_dim: 128,
            predictor_out: 128,
            latent_dim: 10,
            predictor_cells: 256,
            predictor_layers: 2,
            posterior_cells: 256,
            prior_cells: 256,
            normalization: Normalization::None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.frame_size;
        if s < 8 || !s.is_power_of_two() {
            return Err(Error::Config(format!(
                "model.frame_size must be a power of two >= 8, got {s}"
            )));
        }
        let stages = s.trailing_zeros() as usize - 2;
        if self.channels.len() != stages {
            return Err(Error::Config(format!(
                "model.channels needs {stages} entries for {s}x{s} frames, got {}",
                self.channels.len()
            )));
        }
        let widths = [
            ("embed_dim", self.embed_dim),
            ("predictor_out", self.predictor_out),
            ("latent_dim", self.latent_dim),
            ("predictor_cells", self.predictor_cells),
            ("predictor_layers", self.predictor_layers),
            ("posterior_cells", self.posterior_cells),
            ("prior_cells", self.prior_cells),
        ];
        for (name, w) in widths {
            if w == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if self.channels.contains(&0) {
            return Err(Error::Config("model.channels must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// 64x64 frames, 28x28 digits.
    Paper,
    /// 32x32 frames, digits downscaled to 14x14.
    Small,
}

impl Profile {
    pub fn frame_size(self) -> usize {
        match self {
            Profile::Paper => 64,
            Profile::Small => 32,
        }
    }

    pub fn digit_size(self) -> usize {
        match self {
            Profile::Paper => 28,
            Profile::Small => 14,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub profile: Profile,
    /// Digits per sequence (1 or 2).
    pub num_digits: usize,
    /// Velocity components are drawn from `[-max_speed, max_speed]`.
    pub max_speed: f64,
    /// Directory holding `{train,t10k}-{images-idx3,labels-idx1}-ubyte`.
    pub mnist_dir: PathBuf,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            profile: Profile::Small,
            num_digits: 1,
            max_speed: 4.0,
            mnist_dir: PathBuf::from("data/mnist-sample"),
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.num_digits) {
            return Err(Error::Config(format!(
                "data.num_digits must be 1 or 2, got {}",
                self.num_digits
            )));
        }
        if !(self.max_speed > 0.0 && self.max_speed.is_finite()) {
            return Err(Error::Config("data.max_speed must be positive".into()));
        }
        Ok(())
    }

    /// `data.mnist_dir`, unless the environment override is set.
    pub fn resolved_mnist_dir(&self) -> PathBuf {
        match std::env::var_os(MNIST_DIR_ENV) {
            Some(dir) if !dir.is_empty() => PathBuf::from(dir),
            _ => self.mnist_dir.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Conditioning frames C.
    pub context: usize,
    /// Total frames per training sequence T.
    pub seq_len: usize,
    pub beta: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: u64,
    /// Global-norm gradient clip threshold; 0 disables clipping.
    pub clip_norm: f64,
    /// Write a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            context: 5,
            seq_len: 15,
            beta: 1e-4,
            lr: 0.002,
            batch_size: 16,
            steps: 1000,
            clip_norm: 10.0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.context == 0 || self.context >= self.seq_len {
            return Err(Error::Config(format!(
                "train.context must satisfy 1 <= C < T (C = {}, T = {})",
                self.context, self.seq_len
            )));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config("train.beta must be >= 0".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("train.lr must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if self.clip_norm.is_nan() || self.clip_norm < 0.0 {
            return Err(Error::Config("train.clip_norm must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub context: usize,
    pub horizon: usize,
    /// Rollouts per test sequence.
    pub samples: usize,
    pub test_sequences: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            context: 5,
            horizon: 20,
            samples: 100,
            test_sequences: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Sequences in the synchronized prior-variance probe.
    pub probe_sequences: usize,
    pub probe_len: usize,
    /// Samples for velocity histograms.
    pub velocity_samples: usize,
    pub velocity_len: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            probe_sequences: 500,
            probe_len: 100,
            velocity_samples: 1000,
            velocity_len: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub threads: usize,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub analysis: AnalysisConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 1,
            threads: 1,
            model: ModelConfig::default(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            analysis: AnalysisConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.validate()?;
        self.train.validate()?;
        if self.model.frame_size != self.data.profile.frame_size() {
            return Err(Error::Config(format!(
                "model.frame_size = {} does not match the {:?} data profile ({})",
                self.model.frame_size,
                self.data.profile,
                self.data.profile.frame_size()
            )));
        }
        if self.threads == 0 {
            return Err(Error::Config("threads must be >= 1".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Defaults, overlaid by the optional file, overlaid by `key=value`
    /// overrides (dotted keys, TOML value syntax; bare words are strings).
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut tree = toml::Table::try_from(ExperimentConfig::default())
            .map_err(|e| Error::Config(e.to_string()))?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let file_tree: toml::Table = text
                .parse()
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            merge(&mut tree, file_tree, "")?;
        }
        for ov in overrides {
            apply_override(&mut tree, ov)?;
        }
        let cfg: ExperimentConfig = toml::Value::Table(tree)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        Ok(cfg)
    }
}

fn merge(base: &mut toml::Table, over: toml::Table, prefix: &str) -> Result<()> {
    for (k, v) in over {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o, &key)?,
            (Some(slot), v) => *slot = v,
            (None, _) => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
    }
    Ok(())
}

fn apply_override(tree: &mut toml::Table, ov: &str) -> Result<()> {
    let (key, raw) = ov
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{ov}` is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = parse_value(raw);
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| Error::Config(format!("empty key in `{ov}`")))?;
    let mut table = tree;
    for p in parts {
        table = match table.get_mut(p) {
            Some(toml::Value::Table(t)) => t,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        };
    }
    match table.get_mut(last) {
        Some(toml::Value::Table(_)) => Err(Error::Config(format!("`{key}` is a section, not a value"))),
        Some(slot) => {
            // integer literals for float keys are accepted
            *slot = match (&*slot, value) {
                (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
                (_, v) => v,
            };
            Ok(())
        }
        None => Err(Error::Config(format!("unknown config key `{key}`"))),
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

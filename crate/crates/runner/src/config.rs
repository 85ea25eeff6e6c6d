//! Flat TOML run configuration.

use std::path::{Path, PathBuf};

use ra_core::metrics::{AverageMode, Pooling, ReportOptions, DEFAULT_IOU_THRESHOLD, DEFAULT_TAU, DEFAULT_IOU_SWEEP};
use ra_core::reward::{LocRewardMode, ReflConfig, RewardConfig};
use ra_core::toy_rl::{ToyEnv, TrainOptions};
use ra_core::BuildConfig;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Environment variable holding the endpoint credential.
pub const API_KEY_ENV: &str = "RA_API_KEY";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config {path}: {message}")]
    Parse { path: String, message: String },
    #[error("config key `{0}` is not allowed: credentials are read from the {API_KEY_ENV} environment variable")]
    CredentialInFile(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    // model client
    pub endpoint: Option<String>,
    pub model: String,
    pub concurrency: usize,
    pub timeout_secs: f64,
    pub retries: u32,
    /// base delay between attempts, doubled after each failure
    pub backoff_ms: u64,
    pub cache: Option<PathBuf>,
    /// re-request ids whose cached record is an error
    pub retry_errors: bool,

    // reward
    pub lambda_c: f64,
    pub lambda_a: f64,
    pub lambda_r: f64,
    pub refl_config: ReflConfig,
    pub loc_reward_mode: LocRewardMode,
    pub kl_beta: f64,

    // metrics
    pub tau: f64,
    pub iou: f64,
    pub iou_sweep: Vec<f64>,
    pub pooling: Pooling,
    pub average: AverageMode,

    // dataset construction
    pub easy_reflective_rate: f64,
    pub hard_reflective_rate: f64,
    pub stratified: bool,

    // toy trainer
    pub p_easy: f64,
    pub p_hard: f64,
    pub q_reflect: f64,
    pub class_mix: f64,
    pub steps: usize,
    pub group_size: usize,
    pub groups_per_step: usize,
    pub lr: f64,
    pub best_of_group: bool,

    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let reward = RewardConfig::default();
        let build = BuildConfig::default();
        let env = ToyEnv::default();
        let train = TrainOptions::default();
        RunConfig {
            endpoint: None,
            model: "default".into(),
            concurrency: 4,
            timeout_secs: 120.0,
            retries: 3,
            backoff_ms: 500,
            cache: None,
            retry_errors: false,
            lambda_c: reward.lambda_c,
            lambda_a: reward.lambda_a,
            lambda_r: reward.lambda_r,
            refl_config: reward.refl_config,
            loc_reward_mode: reward.loc_reward_mode,
            kl_beta: reward.kl_beta,
            tau: DEFAULT_TAU,
            iou: DEFAULT_IOU_THRESHOLD,
            iou_sweep: DEFAULT_IOU_SWEEP.to_vec(),
            pooling: Pooling::default(),
            average: AverageMode::default(),
            easy_reflective_rate: build.easy_reflective_rate,
            hard_reflective_rate: build.hard_reflective_rate,
            stratified: build.stratified,
            p_easy: env.p_easy,
            p_hard: env.p_hard,
            q_reflect: env.q_reflect,
            class_mix: env.class_mix,
            steps: train.steps,
            group_size: train.group_size,
            groups_per_step: train.groups_per_step,
            lr: train.lr,
            best_of_group: train.best_of_group,
            seed: 0,
        }
    }
}

const CREDENTIAL_KEYS: [&str; 5] = ["api_key", "apikey", "token", "secret", "password"];

impl RunConfig {
    pub fn from_toml(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse {
            path: origin.to_string(),
            message: e.to_string(),
        })?;
        if let Some(key) = table
            .keys()
            .find(|k| CREDENTIAL_KEYS.iter().any(|c| k.to_ascii_lowercase().contains(c)))
        {
            return Err(ConfigError::CredentialInFile(key.clone()));
        }
        let cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| ConfigError::Parse {
            path: origin.to_string(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        RunConfig::from_toml(&text, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.concurrency < 1 {
            return bad("concurrency must be at least 1".into());
        }
        if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) {
            return bad(format!("timeout_secs must be positive, got {}", self.timeout_secs));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return bad(format!("tau must be in [0, 1], got {}", self.tau));
        }
        if let Some(t) = std::iter::once(&self.iou).chain(&self.iou_sweep).find(|t| !(0.0..=1.0).contains(*t)) {
            return bad(format!("IoU thresholds must be in [0, 1], got {t}"));
        }
        self.reward().validate().map_err(ConfigError::Invalid)?;
        self.build().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.toy_env().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    pub fn reward(&self) -> RewardConfig {
        RewardConfig {
            lambda_c: self.lambda_c,
            lambda_a: self.lambda_a,
            lambda_r: self.lambda_r,
            refl_config: self.refl_config,
            loc_reward_mode: self.loc_reward_mode,
            kl_beta: self.kl_beta,
        }
    }

    pub fn report_options(&self) -> ReportOptions {
        ReportOptions {
            tau: self.tau,
            iou_threshold: self.iou,
            pooling: self.pooling,
            average: self.average,
        }
    }

    pub fn build(&self) -> BuildConfig {
        BuildConfig {
            easy_reflective_rate: self.easy_reflective_rate,
            hard_reflective_rate: self.hard_reflective_rate,
            seed: self.seed,
            stratified: self.stratified,
        }
    }

    pub fn toy_env(&self) -> ToyEnv {
        ToyEnv {
            p_easy: self.p_easy,
            p_hard: self.p_hard,
            q_reflect: self.q_reflect,
            class_mix: self.class_mix,
            seed: self.seed,
        }
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            steps: self.steps,
            group_size: self.group_size,
            groups_per_step: self.groups_per_step,
            lr: self.lr,
            best_of_group: self.best_of_group,
        }
    }

    pub fn timeout(&self) -> std::time::Duration {
        std::time::Duration::from_secs_f64(self.timeout_secs)
    }
}

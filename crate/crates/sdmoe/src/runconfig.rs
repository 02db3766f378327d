//! Flat-text run configuration.
//!
//! One `key = value` per line, `#` starts a comment (whole-line or trailing),
//! blank lines ignored. Every key is optional and overrides a tuned default,
//! so an empty file is a valid toy run. Unknown and duplicate keys are
//! rejected with the offending line number — silently ignoring a typo like
//! `n_expert = 8` would run the wrong experiment.
//!
//! The task's token dimension is not a key: tokens feed the layer directly,
//! so it always equals `d_model`.

use crate::harness::{HarnessError, SyntheticTaskSpec, TargetRule, TrainConfig};
use crate::metrics::{AnalysisConfig, MetricsError};
use crate::moe::{MoeConfig, MoeError, Variant};
use crate::optim::OptimizerKind;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RunConfigError {
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: key {key:?} given twice")]
    DuplicateKey { line: usize, key: String },
    #[error("line {line}: bad value for {key:?}: {detail}")]
    BadValue {
        line: usize,
        key: String,
        detail: String,
    },
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Moe(#[from] MoeError),
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Everything a run needs: layer shape, training schedule, data
/// distribution, and analysis knobs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub moe: MoeConfig,
    pub train: TrainConfig,
    pub task: SyntheticTaskSpec,
    pub analysis: AnalysisConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let moe = MoeConfig::toy();
        let mut task = SyntheticTaskSpec::toy();
        task.d = moe.d_model;
        RunConfig {
            moe,
            train: TrainConfig::toy(),
            task,
            analysis: AnalysisConfig::default(),
        }
    }
}

const KEYS: &[&str] = &[
    "d_model",
    "d_ff",
    "n_experts",
    "top_n",
    "variant",
    "k",
    "aux_coef",
    "include_shared_expert",
    "steps",
    "lr",
    "optimizer",
    "refresh_interval",
    "log_every",
    "seed",
    "task_rank",
    "task_rho",
    "task_tokens",
    "task_rule",
    "task_seed",
    "head_fraction",
    "activation_threshold_scale",
];

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, RunConfigError> {
        let mut cfg = RunConfig::default();
        let mut seen: Vec<&str> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let stmt = raw.split('#').next().unwrap_or("").trim();
            if stmt.is_empty() {
                continue;
            }
            let (key, value) = stmt
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or(RunConfigError::Syntax { line })?;
            if key.is_empty() || value.is_empty() {
                return Err(RunConfigError::Syntax { line });
            }
            let canon = KEYS
                .iter()
                .copied()
                .find(|k| *k == key)
                .ok_or_else(|| RunConfigError::UnknownKey {
                    line,
                    key: key.to_string(),
                })?;
            if seen.contains(&canon) {
                return Err(RunConfigError::DuplicateKey {
                    line,
                    key: key.to_string(),
                });
            }
            seen.push(canon);
            cfg.apply(canon, value, line)?;
        }
        cfg.task.d = cfg.moe.d_model;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, RunConfigError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), RunConfigError> {
        self.moe.validate()?;
        self.train.validate()?;
        self.task.validate()?;
        self.analysis.validate()?;
        Ok(())
    }

    /// Render back to the config syntax (parses to an equal value).
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("string write");
        put("d_model", self.moe.d_model.to_string());
        put("d_ff", self.moe.d_ff.to_string());
        put("n_experts", self.moe.n_experts.to_string());
        put("top_n", self.moe.top_n.to_string());
        put("variant", self.moe.variant.to_string());
        put("k", self.moe.k.to_string());
        put("aux_coef", self.moe.aux_coef.to_string());
        put(
            "include_shared_expert",
            self.moe.include_shared_expert.to_string(),
        );
        put("steps", self.train.steps.to_string());
        put("lr", self.train.lr.to_string());
        put("optimizer", self.train.optimizer.to_string());
        put("refresh_interval", self.train.refresh_interval.to_string());
        put("log_every", self.train.log_every.to_string());
        put("seed", self.train.seed.to_string());
        put("task_rank", self.task.r.to_string());
        put("task_rho", self.task.rho.to_string());
        put("task_tokens", self.task.n_tokens.to_string());
        put("task_rule", self.task.rule.to_string());
        put("task_seed", self.task.seed.to_string());
        put("head_fraction", self.analysis.head_fraction.to_string());
        put(
            "activation_threshold_scale",
            self.analysis.activation_threshold_scale.to_string(),
        );
        s
    }

    fn apply(&mut self, key: &str, value: &str, line: usize) -> Result<(), RunConfigError> {
        fn num<T: FromStr>(key: &str, value: &str, line: usize) -> Result<T, RunConfigError>
        where
            T::Err: std::fmt::Display,
        {
            value.parse().map_err(|e: T::Err| RunConfigError::BadValue {
                line,
                key: key.to_string(),
                detail: e.to_string(),
            })
        }
        match key {
            "d_model" => self.moe.d_model = num(key, value, line)?,
            "d_ff" => self.moe.d_ff = num(key, value, line)?,
            "n_experts" => self.moe.n_experts = num(key, value, line)?,
            "top_n" => self.moe.top_n = num(key, value, line)?,
            "variant" => {
                self.moe.variant =
                    Variant::from_str(value).map_err(|e| RunConfigError::BadValue {
                        line,
                        key: key.to_string(),
                        detail: e,
                    })?
            }
            "k" => self.moe.k = num(key, value, line)?,
            "aux_coef" => self.moe.aux_coef = num(key, value, line)?,
            "include_shared_expert" => self.moe.include_shared_expert = num(key, value, line)?,
            "steps" => self.train.steps = num(key, value, line)?,
            "lr" => self.train.lr = num(key, value, line)?,
            "optimizer" => {
                self.train.optimizer =
                    OptimizerKind::from_str(value).map_err(|e| RunConfigError::BadValue {
                        line,
                        key: key.to_string(),
                        detail: e,
                    })?
            }
            "refresh_interval" => self.train.refresh_interval = num(key, value, line)?,
            "log_every" => self.train.log_every = num(key, value, line)?,
            "seed" => self.train.seed = num(key, value, line)?,
            "task_rank" => self.task.r = num(key, value, line)?,
            "task_rho" => self.task.rho = num(key, value, line)?,
            "task_tokens" => self.task.n_tokens = num(key, value, line)?,
            "task_rule" => {
                self.task.rule =
                    TargetRule::from_str(value).map_err(|e| RunConfigError::BadValue {
                        line,
                        key: key.to_string(),
                        detail: e,
                    })?
            }
            "task_seed" => self.task.seed = num(key, value, line)?,
            "head_fraction" => self.analysis.head_fraction = num(key, value, line)?,
            "activation_threshold_scale" => {
                self.analysis.activation_threshold_scale = num(key, value, line)?
            }
            _ => unreachable!("key was vetted against KEYS"),
        }
        Ok(())
    }
}

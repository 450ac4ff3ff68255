//! Experiment configuration: a TOML file and/or command-line flags resolved
//! against per-task and per-model defaults.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Architecture, Nonlinearity};
use crate::tasks::{AddingConfig, CopyConfig};
use crate::training::{GradNorm, ModelSpec, TransitionInit};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Copy,
    Varcopy,
    Adding,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    LtOrnn,
    LtIrnn,
    Lstm,
    LstmPeephole,
    PooledOrnn,
}

impl ModelKind {
    pub fn architecture(self) -> Architecture {
        match self {
            ModelKind::LtOrnn | ModelKind::LtIrnn => Architecture::LtRnn,
            ModelKind::Lstm => Architecture::Lstm,
            ModelKind::LstmPeephole => Architecture::LstmPeephole,
            ModelKind::PooledOrnn => Architecture::Pooled,
        }
    }

    pub fn is_lstm(self) -> bool {
        matches!(self, ModelKind::Lstm | ModelKind::LstmPeephole)
    }

    pub fn transition_init(self) -> TransitionInit {
        match self {
            ModelKind::LtIrnn => TransitionInit::Identity,
            _ => TransitionInit::Orthogonal,
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Copy => "copy",
            TaskKind::Varcopy => "varcopy",
            TaskKind::Adding => "adding",
        })
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::LtOrnn => "lt-ornn",
            ModelKind::LtIrnn => "lt-irnn",
            ModelKind::Lstm => "lstm",
            ModelKind::LstmPeephole => "lstm-peephole",
            ModelKind::PooledOrnn => "pooled-ornn",
        })
    }
}

/// Parses a kebab-case variant name, e.g. `"lt-ornn"` or `"hidden"`.
pub fn parse_name<T: serde::de::DeserializeOwned>(s: &str) -> Result<T> {
    use serde::de::value::{Error as ValueError, StrDeserializer};
    use serde::de::IntoDeserializer;
    let de: StrDeserializer<'_, ValueError> = s.into_deserializer();
    T::deserialize(de).map_err(|e| config_error(e.to_string()))
}

/// Largest `T` accepted without `full`.
pub const DESK_MAX_T: usize = 200;

/// Every setting optional; the shape of both the TOML file and the flags.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub task: Option<TaskKind>,
    pub model: Option<ModelKind>,
    #[serde(rename = "T")]
    pub t: Option<usize>,
    #[serde(rename = "S")]
    pub s: Option<usize>,
    #[serde(rename = "K")]
    pub k: Option<usize>,
    pub hidden: Option<usize>,
    pub nonlinearity: Option<Nonlinearity>,
    pub lr: Option<f64>,
    pub batch: Option<usize>,
    pub max_updates: Option<usize>,
    pub seed: Option<u64>,
    pub clip_l: Option<f64>,
    #[serde(rename = "normalize_by_T")]
    pub normalize_by_t: Option<bool>,
    pub normalize_mode: Option<GradNorm>,
    pub ortho_penalty: Option<bool>,
    pub penalty_m: Option<usize>,
    pub penalty_step: Option<f64>,
    pub eval_every: Option<usize>,
    pub eval_size: Option<usize>,
    pub pool: Option<usize>,
    pub stop_below: Option<f64>,
    pub timing: Option<bool>,
    pub full: Option<bool>,
}

macro_rules! overlay {
    ($base:ident, $top:ident, $($f:ident),*) => {
        $( if $top.$f.is_some() { $base.$f = $top.$f; } )*
    };
}

impl RawConfig {
    pub fn from_toml_str(text: &str) -> Result<RawConfig> {
        toml::from_str(text).map_err(|e| config_error(e.message()))
    }

    pub fn from_file(path: &Path) -> Result<RawConfig> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    /// Values set in `top` win.
    pub fn overlay(mut self, top: &RawConfig) -> RawConfig {
        overlay!(
            self, top, task, model, t, s, k, hidden, nonlinearity, lr, batch, max_updates, seed,
            clip_l, normalize_by_t, normalize_mode, ortho_penalty, penalty_m, penalty_step,
            eval_every, eval_size, pool, stop_below, timing, full
        );
        self
    }
}

fn config_error(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

/// A fully resolved, validated experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub task: TaskKind,
    pub model: ModelKind,
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "S")]
    pub s: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub hidden: usize,
    pub nonlinearity: Nonlinearity,
    pub lr: f64,
    pub batch: usize,
    pub max_updates: usize,
    pub seed: u64,
    pub clip_l: f64,
    #[serde(rename = "normalize_by_T")]
    pub normalize_by_t: bool,
    pub normalize_mode: GradNorm,
    pub ortho_penalty: bool,
    pub penalty_m: usize,
    pub penalty_step: f64,
    pub eval_every: usize,
    pub eval_size: usize,
    pub pool: usize,
    /// Stop once the evaluation loss falls below this value (0 disables).
    pub stop_below: f64,
    /// Record wall-clock seconds in the metrics (makes the CSV run-dependent).
    pub timing: bool,
    pub full: bool,
}

impl ExperimentConfig {
    /// Fills defaults and validates. `task` and `model` are required.
    pub fn resolve(raw: &RawConfig) -> Result<ExperimentConfig> {
        let task = raw.task.ok_or_else(|| config_error("missing `task` (copy, varcopy, adding)"))?;
        let model = raw.model.ok_or_else(|| {
            config_error("missing `model` (lt-ornn, lt-irnn, lstm, lstm-peephole, pooled-ornn)")
        })?;
        let full = raw.full.unwrap_or(false);
        let default_t = match (full, task) {
            (false, _) => 100,
            (true, TaskKind::Adding) => 750,
            (true, _) => 500,
        };
        let is_copy = task != TaskKind::Adding;
        let default_nl = if model.is_lstm() {
            Nonlinearity::Tanh
        } else {
            Nonlinearity::Relu
        };
        let ortho_penalty = raw.ortho_penalty.unwrap_or(model == ModelKind::PooledOrnn);
        let cfg = ExperimentConfig {
            task,
            model,
            t: raw.t.unwrap_or(default_t),
            s: raw.s.unwrap_or(10),
            k: raw.k.unwrap_or(8),
            hidden: raw.hidden.unwrap_or(if is_copy { 80 } else { 128 }),
            nonlinearity: raw.nonlinearity.unwrap_or(default_nl),
            lr: raw.lr.unwrap_or(if model.is_lstm() { 1e-3 } else { 1e-4 }),
            batch: raw.batch.unwrap_or(50),
            max_updates: raw.max_updates.unwrap_or(10_000),
            seed: raw.seed.unwrap_or(1),
            clip_l: raw.clip_l.unwrap_or(1000.0),
            normalize_by_t: raw.normalize_by_t.unwrap_or(true),
            normalize_mode: raw.normalize_mode.unwrap_or(GradNorm::Hidden),
            ortho_penalty,
            penalty_m: raw.penalty_m.unwrap_or(50),
            penalty_step: raw.penalty_step.unwrap_or(DEFAULT_PENALTY_STEP),
            eval_every: raw.eval_every.unwrap_or(500),
            eval_size: raw.eval_size.unwrap_or(1000),
            pool: raw.pool.unwrap_or(2),
            stop_below: raw.stop_below.unwrap_or(0.0),
            timing: raw.timing.unwrap_or(false),
            full,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("T", self.t),
            ("hidden", self.hidden),
            ("batch", self.batch),
            ("max_updates", self.max_updates),
            ("eval_every", self.eval_every),
            ("eval_size", self.eval_size),
            ("pool", self.pool),
            ("penalty_m", self.penalty_m),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(config_error(format!("`{name}` must be positive")));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(config_error(format!("`lr` must be positive, got {}", self.lr)));
        }
        if !(self.clip_l > 0.0) {
            return Err(config_error("`clip_l` must be positive"));
        }
        if !(self.penalty_step >= 0.0 && self.penalty_step.is_finite()) {
            return Err(config_error("`penalty_step` must be >= 0"));
        }
        if !(self.stop_below >= 0.0) {
            return Err(config_error("`stop_below` must be >= 0"));
        }
        if !self.full && self.t > DESK_MAX_T {
            return Err(config_error(format!(
                "T = {} exceeds the desk-scale limit {DESK_MAX_T}; pass `full` to allow it",
                self.t
            )));
        }
        match self.task {
            TaskKind::Copy | TaskKind::Varcopy => self.copy_config().validate().map_err(|e| config_error(e.to_string()))?,
            TaskKind::Adding => AddingConfig::new(self.t).validate().map_err(|e| config_error(e.to_string()))?,
        }
        if self.model == ModelKind::PooledOrnn && self.hidden % self.pool != 0 {
            return Err(config_error(format!(
                "pooled-ornn needs hidden ({}) divisible by pool ({})",
                self.hidden, self.pool
            )));
        }
        if self.ortho_penalty && self.model.is_lstm() {
            return Err(config_error("the orthogonality penalty applies to LT-RNN transitions only"));
        }
        Ok(())
    }

    pub fn copy_config(&self) -> CopyConfig {
        match self.task {
            TaskKind::Varcopy => CopyConfig::variable(self.k, self.s, self.t),
            _ => CopyConfig::fixed(self.k, self.s, self.t),
        }
    }

    pub fn grad_norm(&self) -> GradNorm {
        if self.normalize_by_t {
            self.normalize_mode
        } else {
            GradNorm::None
        }
    }

    pub fn model_spec(&self) -> ModelSpec {
        let (input, output) = match self.task {
            TaskKind::Adding => (2, 1),
            _ => {
                let c = self.copy_config().num_classes();
                (c, c)
            }
        };
        ModelSpec {
            architecture: self.model.architecture(),
            input,
            hidden: self.hidden,
            output,
            nonlinearity: self.nonlinearity,
            transition: self.model.transition_init(),
            pool: self.pool,
        }
    }

    /// The resolved configuration as TOML, each line prefixed with `# `.
    pub fn comment_lines(&self) -> String {
        let text = toml::to_string(self).expect("config serializes");
        text.lines().map(|l| format!("# {l}\n")).collect()
    }
}

/// Step size of the soft orthogonality penalty.
pub const DEFAULT_PENALTY_STEP: f64 = 0.1;

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(task: TaskKind, model: ModelKind) -> RawConfig {
        RawConfig {
            task: Some(task),
            model: Some(model),
            ..Default::default()
        }
    }

    #[test]
    fn standard_defaults() {
        let mut r = raw(TaskKind::Adding, ModelKind::LtIrnn);
        r.t = Some(100);
        let c = ExperimentConfig::resolve(&r).unwrap();
        assert_eq!((c.hidden, c.lr, c.batch, c.clip_l), (128, 1e-4, 50, 1000.0));
        let c = ExperimentConfig::resolve(&raw(TaskKind::Copy, ModelKind::Lstm)).unwrap();
        assert_eq!((c.hidden, c.lr), (80, 1e-3));
        let c = ExperimentConfig::resolve(&raw(TaskKind::Copy, ModelKind::PooledOrnn)).unwrap();
        assert!(c.ortho_penalty);
        assert_eq!(c.penalty_m, 50);
    }

    #[test]
    fn pooled_divisibility() {
        let mut r = raw(TaskKind::Adding, ModelKind::PooledOrnn);
        r.hidden = Some(81);
        r.pool = Some(2);
        let err = ExperimentConfig::resolve(&r).unwrap_err();
        assert!(matches!(err, Error::Config(m) if m.contains("divisible")));
    }

    #[test]
    fn missing_and_unknown_keys() {
        assert!(ExperimentConfig::resolve(&RawConfig::default()).is_err());
        assert!(RawConfig::from_toml_str("task = \"copy\"\nlearning_rate = 1.0\n").is_err());
        let r = RawConfig::from_toml_str("task = \"copy\"\nmodel = \"lt-ornn\"\nT = 50\n").unwrap();
        assert_eq!(ExperimentConfig::resolve(&r).unwrap().t, 50);
    }

    #[test]
    fn flags_override_file() {
        let file = RawConfig::from_toml_str("task = \"copy\"\nmodel = \"lt-ornn\"\nT = 50\nseed = 3\n").unwrap();
        let flags = RawConfig {
            t: Some(70),
            ..Default::default()
        };
        let c = ExperimentConfig::resolve(&file.overlay(&flags)).unwrap();
        assert_eq!((c.t, c.seed), (70, 3));
    }

    #[test]
    fn desk_limit_and_full() {
        let mut r = raw(TaskKind::Copy, ModelKind::LtOrnn);
        r.t = Some(500);
        assert!(ExperimentConfig::resolve(&r).is_err());
        r.full = Some(true);
        assert_eq!(ExperimentConfig::resolve(&r).unwrap().t, 500);
    }

    #[test]
    fn variant_names() {
        assert_eq!(parse_name::<ModelKind>("pooled-ornn").unwrap(), ModelKind::PooledOrnn);
        assert_eq!(parse_name::<GradNorm>("parameters").unwrap(), GradNorm::Parameters);
        assert!(parse_name::<TaskKind>("copying").is_err());
    }

    #[test]
    fn echo_round_trips() {
        let c = ExperimentConfig::resolve(&raw(TaskKind::Varcopy, ModelKind::LtIrnn)).unwrap();
        let echoed = c.comment_lines();
        assert!(echoed.lines().all(|l| l.starts_with("# ")));
        let body: String = echoed.lines().map(|l| format!("{}\n", &l[2..])).collect();
        let back: ExperimentConfig = toml::from_str(&body).unwrap();
        assert_eq!(back, c);
    }
}

//! `key = value` run configuration. `#` starts a comment; unknown keys are
//! errors. Keys:
//!
//! model: layers, heads, hidden_dim, slot_dim, ff_mult, context,
//!        agent_vocab, key_vocab, action_vocab, rtg_vocab
//! training: lr, beta1, beta2, eps, batch_size, max_epochs, patience,
//!           eval_interval, task_eval_interval, seed, suite_seed,
//!           min_waypoints, max_waypoints
//!
//! Anything left out keeps the built-in default (the values in
//! `configs/paper.cfg`, except `max_epochs = 300`).

use std::path::Path;
use std::str::FromStr;

use flexibit_core::model::ModelConfig;
use flexibit_core::training::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub line: usize,
    pub reason: String,
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "line {}: {}", self.line, self.reason)
    }
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("`{v}` is not a valid value for {key}"))
}

impl RunConfig {
    pub fn new(train: TrainConfig) -> Self {
        Self {
            model: ModelConfig::default(),
            train,
        }
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "layers" => m.layers = num(key, v)?,
            "heads" => m.heads = num(key, v)?,
            "hidden_dim" => m.hidden_dim = num(key, v)?,
            "slot_dim" => m.slot_dim = num(key, v)?,
            "ff_mult" => m.ff_mult = num(key, v)?,
            "context" => m.context = num(key, v)?,
            "agent_vocab" => m.agent_vocab = num(key, v)?,
            "key_vocab" => m.key_vocab = num(key, v)?,
            "action_vocab" => m.action_vocab = num(key, v)?,
            "rtg_vocab" => m.rtg_vocab = num(key, v)?,
            "lr" => t.adam.lr = num(key, v)?,
            "beta1" => t.adam.beta1 = num(key, v)?,
            "beta2" => t.adam.beta2 = num(key, v)?,
            "eps" => t.adam.eps = num(key, v)?,
            "batch_size" => t.batch_size = num(key, v)?,
            "max_epochs" => t.max_epochs = num(key, v)?,
            "patience" => t.patience = num(key, v)?,
            "eval_interval" => t.eval_interval = num(key, v)?,
            "task_eval_interval" => t.task_eval_interval = num(key, v)?,
            "seed" => t.seed = num(key, v)?,
            "suite_seed" => t.suite_seed = num(key, v)?,
            "min_waypoints" => t.task.min_waypoints = num(key, v)?,
            "max_waypoints" => t.task.max_waypoints = num(key, v)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    pub fn apply(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |reason: String| ConfigError { line: i + 1, reason };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            self.set(k.trim(), v.trim()).map_err(err)?;
        }
        Ok(())
    }

    /// Applies the file at `path` when given; no file means defaults.
    pub fn load(train: TrainConfig, path: Option<&Path>) -> Result<Self, String> {
        let mut c = Self::new(train);
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
            c.apply(&text).map_err(|e| format!("{}:{e}", p.display()))?;
        }
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use flexibit_core::masking::TaskKind;

    fn base() -> RunConfig {
        RunConfig::new(TrainConfig::desk(TaskKind::Bc, 0))
    }

    #[test]
    fn parses_keys_and_comments() {
        let mut c = base();
        c.apply("# model\nlayers = 2\n\nlr=3e-4   # faster\nseed = 9\n").unwrap();
        assert_eq!(c.model.layers, 2);
        assert_eq!(c.train.adam.lr, 3e-4);
        assert_eq!(c.train.seed, 9);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let e = base().apply("layers = 3\nbogus = 1\n").unwrap_err();
        assert_eq!(e.line, 2);
        assert!(e.reason.contains("unknown key"));
        let e = base().apply("layers 3\n").unwrap_err();
        assert_eq!(e.line, 1);
        let e = base().apply("\nheads = many\n").unwrap_err();
        assert_eq!(e.line, 2);
    }

    #[test]
    fn shipped_paper_config_matches_defaults() {
        let text = include_str!("../../../configs/paper.cfg");
        let mut c = base();
        c.apply(text).unwrap();
        assert_eq!(c.model, ModelConfig::default());
        assert_eq!(c.train.adam, base().train.adam);
        assert_eq!(c.train.batch_size, 100);
        assert_eq!(c.train.max_epochs, 6000);
    }
}

//! Pipeline settings and the `key = value` config file format.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::convnet::{AdamConfig, TrainConfig};
use crate::de::DeConfig;
use crate::svm::SvmParams;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("bad value {value:?} for `{key}`")]
    BadValue { key: String, value: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("{0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub seed: u64,
    pub runs: usize,
    pub pop_size: usize,
    pub generations: usize,
    pub crossover_rate: f64,
    pub svm_c: f64,
    pub svm_tolerance: f64,
    pub svm_max_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub gamma: f64,
    pub dropout: f64,
    pub hidden: usize,
    pub stratified: bool,
    pub retrain_extractor: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let de = DeConfig::default();
        let svm = SvmParams::default();
        let tr = TrainConfig::default();
        Self {
            seed: 0,
            runs: 100,
            pop_size: de.pop_size,
            generations: de.generations,
            crossover_rate: de.crossover_rate,
            svm_c: svm.c,
            svm_tolerance: svm.tolerance,
            svm_max_epochs: svm.max_epochs,
            epochs: tr.epochs,
            batch_size: tr.batch_size,
            learning_rate: tr.adam.learning_rate,
            gamma: tr.gamma,
            dropout: tr.dropout,
            hidden: 400,
            stratified: false,
            retrain_extractor: false,
        }
    }
}

/// Seed used by run `r` (1-based).
pub fn run_seed(base: u64, run: usize) -> u64 {
    base.wrapping_add(run as u64)
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
    })
}

impl PipelineConfig {
    pub fn de(&self, seed: u64) -> DeConfig {
        DeConfig {
            pop_size: self.pop_size,
            generations: self.generations,
            crossover_rate: self.crossover_rate,
            seed,
            trace_donors: false,
        }
    }

    pub fn svm(&self, seed: u64) -> SvmParams {
        SvmParams {
            c: self.svm_c,
            tolerance: self.svm_tolerance,
            max_epochs: self.svm_max_epochs,
            seed,
        }
    }

    pub fn train(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            adam: AdamConfig {
                learning_rate: self.learning_rate,
                ..AdamConfig::default()
            },
            gamma: self.gamma,
            dropout: self.dropout,
            seed,
        }
    }

    /// Sets one field. Keys may use `-` or `_`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let k = key.trim().replace('-', "_");
        let v = value.trim();
        match k.as_str() {
            "seed" => self.seed = parse(&k, v)?,
            "runs" => self.runs = parse(&k, v)?,
            "pop_size" => self.pop_size = parse(&k, v)?,
            "generations" => self.generations = parse(&k, v)?,
            "cr" | "crossover_rate" => self.crossover_rate = parse(&k, v)?,
            "svm_c" => self.svm_c = parse(&k, v)?,
            "svm_tolerance" => self.svm_tolerance = parse(&k, v)?,
            "svm_max_epochs" => self.svm_max_epochs = parse(&k, v)?,
            "epochs" => self.epochs = parse(&k, v)?,
            "batch_size" => self.batch_size = parse(&k, v)?,
            "learning_rate" => self.learning_rate = parse(&k, v)?,
            "gamma" => self.gamma = parse(&k, v)?,
            "dropout" => self.dropout = parse(&k, v)?,
            "hidden" => self.hidden = parse(&k, v)?,
            "stratified" => self.stratified = parse(&k, v)?,
            "retrain_extractor" => self.retrain_extractor = parse(&k, v)?,
            _ => return Err(ConfigError::UnknownKey(key.trim().to_string())),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`. Blank lines and lines
    /// starting with `#` are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or(ConfigError::Syntax { line: i + 1 })?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.runs == 0 {
            return Err(ConfigError::Invalid("runs must be at least 1".into()));
        }
        self.de(0)
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !(self.svm_c > 0.0 && self.svm_tolerance > 0.0 && self.svm_max_epochs > 0) {
            return Err(ConfigError::Invalid(
                "SVM parameters must be positive".into(),
            ));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.hidden == 0 {
            return Err(ConfigError::Invalid(
                "epochs, batch size and hidden width must be positive".into(),
            ));
        }
        if !(self.learning_rate >= 0.0 && self.gamma >= 0.0) {
            return Err(ConfigError::Invalid(
                "learning rate and gamma must be nonnegative".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ConfigError::Invalid("dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = PipelineConfig::default();
        assert_eq!((c.runs, c.pop_size, c.generations), (100, 20, 100));
        assert_eq!((c.crossover_rate, c.batch_size, c.hidden), (1.0, 64, 400));
        c.validate().unwrap();
    }

    #[test]
    fn parses_lines() {
        let mut c = PipelineConfig::default();
        c.apply_text("# comment\nruns = 3\npop-size=8\n\n cr = 0.5 \nstratified = true\n")
            .unwrap();
        assert_eq!((c.runs, c.pop_size, c.crossover_rate), (3, 8, 0.5));
        assert!(c.stratified);
        assert_eq!(c.apply_text("runs 3"), Err(ConfigError::Syntax { line: 1 }));
        assert_eq!(
            c.apply_text("colour = red"),
            Err(ConfigError::UnknownKey("colour".into()))
        );
        assert!(matches!(
            c.apply_text("runs = -1"),
            Err(ConfigError::BadValue { .. })
        ));
    }

    #[test]
    fn validation() {
        let c = PipelineConfig {
            pop_size: 3,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = PipelineConfig {
            runs: 0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }
}

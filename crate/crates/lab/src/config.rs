//! Flat `key = value` configuration files.
//!
//! Keys are the field names of [`SynthConfig`], [`SplitConfig`] and
//! [`TrainConfig`], plus `seed` (applied to all three), `match_mode`,
//! `person_pattern` and `lambdas` (comma-separated sweep values). Lines
//! starting with `#` and blank lines are ignored. Values are read as JSON
//! literals when possible (`3`, `0.5`, `true`, `null`) and as bare strings
//! otherwise (`uniform_target`).

use std::path::Path;

use deconfound_core::ood::SplitConfig;
use deconfound_core::synth::SynthConfig;
use deconfound_core::text::MatchMode;
use deconfound_core::train::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::io::DEFAULT_PERSON_PATTERN;

/// λ grid used when none is configured.
pub const DEFAULT_LAMBDAS: [f64; 6] = [0.0, 1.0, 2.0, 3.0, 4.0, 5.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabConfig {
    pub synth: SynthConfig,
    pub split: SplitConfig,
    pub train: TrainConfig,
    pub match_mode: MatchMode,
    pub person_pattern: String,
    pub lambdas: Vec<f64>,
}

impl Default for LabConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            split: SplitConfig::default(),
            train: TrainConfig::default(),
            match_mode: MatchMode::Exact,
            person_pattern: DEFAULT_PERSON_PATTERN.to_string(),
            lambdas: DEFAULT_LAMBDAS.to_vec(),
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("config line {line}: expected key = value")]
    Syntax { line: usize },
    #[error("config line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("config line {line}: bad value for {key}: {message}")]
    BadValue { line: usize, key: String, message: String },
}

fn literal(v: &str) -> Value {
    serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()))
}

fn section<T: Serialize>(t: &T) -> Map<String, Value> {
    match serde_json::to_value(t).expect("config types serialize") {
        Value::Object(m) => m,
        _ => unreachable!("config types are structs"),
    }
}

fn rebuild<T: for<'de> Deserialize<'de>>(m: Map<String, Value>) -> Result<T, serde_json::Error> {
    serde_json::from_value(Value::Object(m))
}

impl LabConfig {
    /// Applies `key = value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        let mut sections = [section(&self.synth), section(&self.split), section(&self.train)];
        let mut touched = [false; 3];
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.trim();
            if body.is_empty() || body.starts_with('#') {
                continue;
            }
            let (key, value) = body.split_once('=').ok_or(ConfigError::Syntax { line })?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |message: String| ConfigError::BadValue { line, key: key.to_string(), message };
            match key {
                "lambdas" => {
                    self.lambdas = value
                        .split(',')
                        .map(|v| v.trim().parse::<f64>().map_err(|e| bad(e.to_string())))
                        .collect::<Result<_, _>>()?;
                }
                "match_mode" => self.match_mode = serde_json::from_value(literal(value)).map_err(|e| bad(e.to_string()))?,
                "person_pattern" => self.person_pattern = value.to_string(),
                _ => {
                    let mut hit = false;
                    for (s, t) in sections.iter_mut().zip(touched.iter_mut()) {
                        if s.contains_key(key) {
                            s.insert(key.to_string(), literal(value));
                            *t = true;
                            hit = true;
                        }
                    }
                    if !hit {
                        return Err(ConfigError::UnknownKey { line, key: key.to_string() });
                    }
                    // type-check eagerly so the error names this line
                    let [a, b, c] = &sections;
                    rebuild::<SynthConfig>(a.clone()).map_err(|e| bad(e.to_string()))?;
                    rebuild::<SplitConfig>(b.clone()).map_err(|e| bad(e.to_string()))?;
                    rebuild::<TrainConfig>(c.clone()).map_err(|e| bad(e.to_string()))?;
                }
            }
        }
        let [a, b, c] = sections;
        let fail = |e: serde_json::Error| ConfigError::BadValue { line: 0, key: String::new(), message: e.to_string() };
        if touched[0] {
            self.synth = rebuild(a).map_err(fail)?;
        }
        if touched[1] {
            self.split = rebuild(b).map_err(fail)?;
        }
        if touched[2] {
            self.train = rebuild(c).map_err(fail)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io { path: path.display().to_string(), source: e })?;
        let mut c = Self::default();
        c.apply_text(&text)?;
        Ok(c)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.synth.seed = seed;
        self.split.seed = seed;
        self.train.seed = seed;
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use deconfound_core::train::NegMode;

    #[test]
    fn keys_route_to_their_section() {
        let mut c = LabConfig::default();
        c.apply_text("# comment\nlambda = 2.5\nneg_mode = uniform_target\nrho_cooc=0.25\ntrain_target = 50\nseed = 9\nrationale_cooc = null\nlambdas = 0, 3\n")
            .unwrap();
        assert_eq!(c.train.lambda, 2.5);
        assert_eq!(c.train.neg_mode, NegMode::UniformTarget);
        assert_eq!(c.synth.rho_cooc, 0.25);
        assert_eq!(c.split.train_target, 50);
        assert_eq!((c.synth.seed, c.split.seed, c.train.seed), (9, 9, 9));
        assert_eq!(c.lambdas, vec![0.0, 3.0]);
    }

    #[test]
    fn errors_name_the_line() {
        let mut c = LabConfig::default();
        assert!(matches!(c.apply_text("epochs = 3\nbogus = 1"), Err(ConfigError::UnknownKey { line: 2, .. })));
        assert!(matches!(c.apply_text("epochs = many"), Err(ConfigError::BadValue { line: 1, .. })));
        assert!(matches!(c.apply_text("no equals sign"), Err(ConfigError::Syntax { line: 1 })));
    }

    #[test]
    fn hash_tracks_content() {
        let a = LabConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.train.lr = 0.25;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}

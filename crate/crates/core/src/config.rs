//! Experiment configuration: a flat `key = value` text format.
//!
//! Blank lines and lines starting with `#` are ignored. Every key is
//! optional; unset keys keep their defaults. Later assignments win, so
//! command-line overrides are applied after the file.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::BenchmarkSpec;
use crate::losses::{LossWeights, PriorDistribution, Regularizer};
use crate::model::{LambdaSchedule, ModelSpec};
use crate::optim::SgdConfig;
use crate::scbs::NeighborRule;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown config key `{key}`; valid keys: {}", valid_keys().join(", "))]
    UnknownKey { key: String },
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("bad value for `{key}`: `{value}` ({reason})")]
    Value { key: String, value: String, reason: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// `(key, description)` for every accepted key, in header order.
pub const KEYS: &[(&str, &str)] = &[
    ("data_path", "dataset CSV; empty = generate the synthetic benchmark"),
    ("input_dim", "benchmark feature width d"),
    ("n_source", "benchmark source-domain size"),
    ("n_target", "benchmark target-domain size"),
    ("source_methods", "comma list of source forgery method ids"),
    ("target_methods", "comma list of target forgery method ids"),
    ("shift", "comma list of d target shift components, or `default`"),
    ("noise_scale", "benchmark isotropic noise"),
    ("data_seed", "benchmark generation seed"),
    ("encoder_hidden", "comma list of encoder hidden widths (may be empty)"),
    ("feature_dim", "encoder output width"),
    ("domain_hidden", "comma list of domain-classifier hidden widths"),
    ("pretrain_epochs", "supervised source epochs"),
    ("pretrain_batch", "source batch size during pretraining"),
    ("adapt_epochs", "joint adaptation epochs"),
    ("total_batch", "joint batch size, split by the domain size ratio"),
    ("eta1", "alignment loss weight"),
    ("eta2", "pair-similarity loss weight"),
    ("eta3", "adversarial domain loss weight"),
    ("eta4", "prior regularizer weight"),
    ("mu", "centroid momentum in [0, 1)"),
    ("lambda", "gradient reversal coefficient: a number or `logistic`"),
    ("regularizer", "`entropy` (mean-prediction entropy) or `kl` (KL to prior)"),
    ("prior", "class prior `p_real,p_fake`, used by the kl regularizer"),
    ("neighbor_rule", "`nearest` or `second`"),
    ("learning_rate", "SGD learning rate"),
    ("momentum", "SGD momentum"),
    ("weight_decay", "SGD coupled L2 weight decay"),
    ("seed", "run seed (initialization, batching, pairing)"),
    ("out_dir", "output directory"),
    ("log_wall_time", "`true` adds wall-clock seconds to metrics records"),
];

pub fn valid_keys() -> Vec<&'static str> {
    KEYS.iter().map(|(k, _)| *k).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data_path: Option<PathBuf>,
    pub benchmark: BenchmarkSpec,
    pub encoder_hidden: Vec<usize>,
    pub feature_dim: usize,
    pub domain_hidden: Vec<usize>,
    pub pretrain_epochs: usize,
    pub pretrain_batch: usize,
    pub adapt_epochs: usize,
    pub total_batch: usize,
    pub etas: LossWeights,
    pub mu: f64,
    pub lambda: LambdaSchedule,
    pub regularizer: Regularizer,
    pub prior: PriorDistribution,
    pub neighbor_rule: NeighborRule,
    pub optimizer: SgdConfig,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub log_wall_time: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data_path: None,
            benchmark: BenchmarkSpec::default_with_seed(7),
            encoder_hidden: Vec::new(),
            feature_dim: 16,
            domain_hidden: vec![16],
            pretrain_epochs: 50,
            pretrain_batch: 10,
            adapt_epochs: 60,
            total_batch: 50,
            etas: LossWeights::default(),
            mu: 0.9,
            lambda: LambdaSchedule::Constant(1.0),
            regularizer: Regularizer::Entropy,
            prior: PriorDistribution::uniform(),
            neighbor_rule: NeighborRule::NearestOther,
            optimizer: SgdConfig::default(),
            seed: 7,
            out_dir: PathBuf::from("runs"),
            log_wall_time: false,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| ConfigError::Value {
        key: key.into(),
        value: value.into(),
        reason: e.to_string(),
    })
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_num(key, s))
        .collect()
}

fn parse_set(value: &str) -> BTreeSet<String> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect()
}

fn join<T: ToString>(items: impl IntoIterator<Item = T>) -> String {
    items.into_iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let value = value.trim();
        let bad = |reason: &str| ConfigError::Value {
            key: key.into(),
            value: value.into(),
            reason: reason.into(),
        };
        match key {
            "data_path" => {
                self.data_path = (!value.is_empty()).then(|| PathBuf::from(value));
            }
            "input_dim" => {
                let d: usize = parse_num(key, value)?;
                if d < 2 {
                    return Err(bad("must be at least 2"));
                }
                // keep the default shift in step with the width unless one was given
                if self.benchmark.shift_vector == BenchmarkSpec::default_shift(self.benchmark.feature_dim) {
                    self.benchmark.shift_vector = BenchmarkSpec::default_shift(d);
                }
                self.benchmark.feature_dim = d;
            }
            "n_source" => self.benchmark.n_source = parse_num(key, value)?,
            "n_target" => self.benchmark.n_target = parse_num(key, value)?,
            "source_methods" => self.benchmark.source_methods = parse_set(value),
            "target_methods" => self.benchmark.target_methods = parse_set(value),
            "shift" => {
                self.benchmark.shift_vector = if value == "default" {
                    BenchmarkSpec::default_shift(self.benchmark.feature_dim)
                } else {
                    parse_list(key, value)?
                }
            }
            "noise_scale" => self.benchmark.noise_scale = parse_num(key, value)?,
            "data_seed" => self.benchmark.seed = parse_num(key, value)?,
            "encoder_hidden" => self.encoder_hidden = parse_list(key, value)?,
            "feature_dim" => self.feature_dim = parse_num(key, value)?,
            "domain_hidden" => self.domain_hidden = parse_list(key, value)?,
            "pretrain_epochs" => self.pretrain_epochs = parse_num(key, value)?,
            "pretrain_batch" => self.pretrain_batch = parse_num(key, value)?,
            "adapt_epochs" => self.adapt_epochs = parse_num(key, value)?,
            "total_batch" => self.total_batch = parse_num(key, value)?,
            "eta1" => self.etas.eta1 = parse_num(key, value)?,
            "eta2" => self.etas.eta2 = parse_num(key, value)?,
            "eta3" => self.etas.eta3 = parse_num(key, value)?,
            "eta4" => self.etas.eta4 = parse_num(key, value)?,
            "mu" => self.mu = parse_num(key, value)?,
            "lambda" => {
                self.lambda = if value == "logistic" {
                    LambdaSchedule::Logistic
                } else {
                    LambdaSchedule::Constant(parse_num(key, value)?)
                }
            }
            "regularizer" => {
                self.regularizer = match value {
                    "entropy" => Regularizer::Entropy,
                    "kl" => Regularizer::Kl,
                    _ => return Err(bad("expected `entropy` or `kl`")),
                }
            }
            "prior" => {
                let p: Vec<f64> = parse_list(key, value)?;
                let p: [f64; 2] = p.try_into().map_err(|_| bad("expected two entries"))?;
                self.prior = PriorDistribution::new(p).map_err(|e| bad(&e.to_string()))?;
            }
            "neighbor_rule" => {
                self.neighbor_rule = match value {
                    "nearest" => NeighborRule::NearestOther,
                    "second" => NeighborRule::SecondNearestOther,
                    _ => return Err(bad("expected `nearest` or `second`")),
                }
            }
            "learning_rate" => self.optimizer.learning_rate = parse_num(key, value)?,
            "momentum" => self.optimizer.momentum = parse_num(key, value)?,
            "weight_decay" => self.optimizer.weight_decay = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            "log_wall_time" => self.log_wall_time = parse_num(key, value)?,
            _ => return Err(ConfigError::UnknownKey { key: key.into() }),
        }
        Ok(())
    }

    /// Applies the assignments in `text` on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Applies `key=value` overrides as given on the command line.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<(), ConfigError> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: 0,
                text: o.to_string(),
            })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    /// Checks ranges that individual setters cannot see.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |m: String| Err(ConfigError::Invalid(m));
        if !(0.0..1.0).contains(&self.mu) {
            return fail(format!("mu must be in [0, 1), got {}", self.mu));
        }
        if let LambdaSchedule::Constant(l) = self.lambda {
            if !(l >= 0.0 && l.is_finite()) {
                return fail(format!("lambda must be finite and >= 0, got {l}"));
            }
        }
        if self.total_batch < 2 {
            return fail(format!("total_batch must be at least 2, got {}", self.total_batch));
        }
        if self.pretrain_batch == 0 {
            return fail("pretrain_batch must be positive".into());
        }
        let o = &self.optimizer;
        if !(o.learning_rate.is_finite() && o.learning_rate > 0.0)
            || !(0.0..1.0).contains(&o.momentum)
            || !(o.weight_decay.is_finite() && o.weight_decay >= 0.0)
        {
            return fail(format!(
                "optimizer needs learning_rate > 0, momentum in [0, 1), weight_decay >= 0 (got {o:?})"
            ));
        }
        let e = &self.etas;
        if ![e.eta1, e.eta2, e.eta3, e.eta4].iter().all(|v| v.is_finite()) {
            return fail("eta weights must be finite".into());
        }
        if self.data_path.is_none() {
            self.benchmark
                .validate()
                .map_err(|err| ConfigError::Invalid(err.to_string()))?;
        }
        Ok(())
    }

    pub fn model_spec(&self, input_dim: usize) -> ModelSpec {
        ModelSpec::new(
            input_dim,
            self.encoder_hidden.clone(),
            self.feature_dim,
            self.domain_hidden.clone(),
        )
    }

    /// Effective value of every key, in [`KEYS`] order, formatted so that
    /// feeding the output back through [`Self::apply_text`] reproduces
    /// this configuration.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let b = &self.benchmark;
        let lambda = match self.lambda {
            LambdaSchedule::Logistic => "logistic".to_string(),
            LambdaSchedule::Constant(v) => v.to_string(),
        };
        let rule = match self.neighbor_rule {
            NeighborRule::NearestOther => "nearest",
            NeighborRule::SecondNearestOther => "second",
        };
        let values = [
            self.data_path
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
            b.feature_dim.to_string(),
            b.n_source.to_string(),
            b.n_target.to_string(),
            join(&b.source_methods),
            join(&b.target_methods),
            join(&b.shift_vector),
            b.noise_scale.to_string(),
            b.seed.to_string(),
            join(&self.encoder_hidden),
            self.feature_dim.to_string(),
            join(&self.domain_hidden),
            self.pretrain_epochs.to_string(),
            self.pretrain_batch.to_string(),
            self.adapt_epochs.to_string(),
            self.total_batch.to_string(),
            self.etas.eta1.to_string(),
            self.etas.eta2.to_string(),
            self.etas.eta3.to_string(),
            self.etas.eta4.to_string(),
            self.mu.to_string(),
            lambda,
            match self.regularizer {
                Regularizer::Entropy => "entropy".to_string(),
                Regularizer::Kl => "kl".to_string(),
            },
            join(self.prior.probs()),
            rule.to_string(),
            self.optimizer.learning_rate.to_string(),
            self.optimizer.momentum.to_string(),
            self.optimizer.weight_decay.to_string(),
            self.seed.to_string(),
            self.out_dir.display().to_string(),
            self.log_wall_time.to_string(),
        ];
        KEYS.iter().map(|(k, _)| *k).zip(values).collect()
    }

    /// Run header: one `key = value` line per key.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_training_recipe() {
        let c = ExperimentConfig::default();
        assert_eq!(c.optimizer.learning_rate, 0.0005);
        assert_eq!(c.optimizer.momentum, 0.9);
        assert_eq!(c.optimizer.weight_decay, 0.0005);
        assert_eq!(c.total_batch, 50);
        assert_eq!(
            (c.etas.eta1, c.etas.eta2, c.etas.eta3, c.etas.eta4),
            (0.1, 1.0, 1.0, -1.0)
        );
        assert_eq!((c.pretrain_epochs, c.adapt_epochs), (50, 60));
        assert_eq!(c.mu, 0.9);
        c.validate().unwrap();
    }

    #[test]
    fn rendered_header_round_trips() {
        let mut c = ExperimentConfig::default();
        c.apply_overrides(&["eta2=0", "regularizer=kl", "lambda=logistic", "encoder_hidden=", "shift=1,2,3,4,5,6,7,8.5"])
            .unwrap();
        let mut back = ExperimentConfig::default();
        back.apply_text(&c.render()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.render(), c.render());
    }

    #[test]
    fn overrides_win_over_file_values() {
        let mut c = ExperimentConfig::default();
        c.apply_text("# run\nseed = 3\n\neta1 = 0.5\n").unwrap();
        c.apply_overrides(&["seed=9"]).unwrap();
        assert_eq!((c.seed, c.etas.eta1), (9, 0.5));
    }

    #[test]
    fn unknown_key_lists_valid_keys() {
        let err = ExperimentConfig::default().set("etaa", "1").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("etaa") && msg.contains("eta1") && msg.contains("out_dir"), "{msg}");
    }

    #[test]
    fn malformed_lines_and_values_are_rejected() {
        let mut c = ExperimentConfig::default();
        assert!(matches!(
            c.apply_text("seed 3"),
            Err(ConfigError::Syntax { line: 1, .. })
        ));
        assert!(matches!(c.set("seed", "x"), Err(ConfigError::Value { .. })));
        assert!(c.set("prior", "0.3,0.3").is_err());
        assert!(c.set("neighbor_rule", "far").is_err());
        c.set("mu", "1.0").unwrap();
        assert!(c.validate().is_err());
    }

    #[test]
    fn input_dim_resizes_the_default_shift() {
        let mut c = ExperimentConfig::default();
        c.set("input_dim", "5").unwrap();
        assert_eq!(c.benchmark.shift_vector, BenchmarkSpec::default_shift(5));
        c.validate().unwrap();
    }
}

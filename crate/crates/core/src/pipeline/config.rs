//! Run configuration as a flat `key = value` file.
//!
//! Blank lines and lines starting with `#` are ignored. Every key must be a
//! [`RunConfig`] field; unknown keys and duplicates are rejected.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::corpus::SplitSpec;
use crate::error::{Error, Result};
use crate::gnet::{Mode, ModelConfig};
use crate::snet;
use crate::vnet::VNetConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub train_ratio: f64,
    pub dev_ratio: f64,
    pub test_ratio: f64,
    pub m_fixed: usize,
    pub d_model: usize,
    pub d_z: usize,
    pub vae_hidden: usize,
    pub epsilon: f64,
    pub learning_rate: f64,
    pub vae_learning_rate: f64,
    pub batch_size: usize,
    pub vae_epochs: usize,
    pub epochs: usize,
    pub kl_weight: f64,
    pub seed: u64,
    pub mode: Mode,
    pub encoder: String,
    /// Train words rarer than this map to `<unk>` in the semantic encoder.
    /// The statistics dictionary always keeps every train word.
    pub vocab_min_count: u64,
    pub identity_projection: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: PathBuf::from("corpus.tsv"),
            train_ratio: 0.8,
            dev_ratio: 0.1,
            test_ratio: 0.1,
            m_fixed: 24,
            d_model: 64,
            d_z: 16,
            vae_hidden: 64,
            epsilon: 0.2,
            learning_rate: 2e-3,
            vae_learning_rate: 1e-3,
            batch_size: 32,
            vae_epochs: 50,
            epochs: 30,
            kl_weight: 1.0,
            seed: 7,
            mode: Mode::Full,
            encoder: "attention".into(),
            vocab_min_count: 5,
            identity_projection: false,
        }
    }
}

pub const KEYS: [&str; 20] = [
    "dataset",
    "train_ratio",
    "dev_ratio",
    "test_ratio",
    "m_fixed",
    "d_model",
    "d_z",
    "vae_hidden",
    "epsilon",
    "learning_rate",
    "vae_learning_rate",
    "batch_size",
    "vae_epochs",
    "epochs",
    "kl_weight",
    "seed",
    "mode",
    "encoder",
    "vocab_min_count",
    "identity_projection",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

impl RunConfig {
    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "dataset" => self.dataset = PathBuf::from(v),
            "train_ratio" => self.train_ratio = parse(key, v)?,
            "dev_ratio" => self.dev_ratio = parse(key, v)?,
            "test_ratio" => self.test_ratio = parse(key, v)?,
            "m_fixed" => self.m_fixed = parse(key, v)?,
            "d_model" | "hidden_dim" => self.d_model = parse(key, v)?,
            "d_z" => self.d_z = parse(key, v)?,
            "vae_hidden" => self.vae_hidden = parse(key, v)?,
            "epsilon" => self.epsilon = parse(key, v)?,
            "learning_rate" => self.learning_rate = parse(key, v)?,
            "vae_learning_rate" => self.vae_learning_rate = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "vae_epochs" => self.vae_epochs = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "kl_weight" => self.kl_weight = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "mode" => self.mode = v.parse()?,
            "encoder" => self.encoder = v.to_string(),
            "vocab_min_count" => self.vocab_min_count = parse(key, v)?,
            "identity_projection" => self.identity_projection = parse(key, v)?,
            other => {
                return Err(Error::Config(format!(
                    "unknown configuration key {other:?} (known: {})",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .as_ref()
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {:?} is not key=value", o.as_ref())))?;
            self.set(k, v)?;
        }
        self.validate()
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut config = RunConfig::default();
        let mut seen = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {k}", i + 1)));
            }
            config
                .set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse_text(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// Canonical text form, one line per key in [`KEYS`] order. Parsing it
    /// gives back an equal config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).expect("listed key"));
        }
        out
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "dataset" => self.dataset.display().to_string(),
            "train_ratio" => format!("{:?}", self.train_ratio),
            "dev_ratio" => format!("{:?}", self.dev_ratio),
            "test_ratio" => format!("{:?}", self.test_ratio),
            "m_fixed" => self.m_fixed.to_string(),
            "d_model" => self.d_model.to_string(),
            "d_z" => self.d_z.to_string(),
            "vae_hidden" => self.vae_hidden.to_string(),
            "epsilon" => format!("{:?}", self.epsilon),
            "learning_rate" => format!("{:?}", self.learning_rate),
            "vae_learning_rate" => format!("{:?}", self.vae_learning_rate),
            "batch_size" => self.batch_size.to_string(),
            "vae_epochs" => self.vae_epochs.to_string(),
            "epochs" => self.epochs.to_string(),
            "kl_weight" => format!("{:?}", self.kl_weight),
            "seed" => self.seed.to_string(),
            "mode" => self.mode.to_string(),
            "encoder" => self.encoder.clone(),
            "vocab_min_count" => self.vocab_min_count.to_string(),
            "identity_projection" => self.identity_projection.to_string(),
            _ => return None,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.split_spec().validate()?;
        if !(0.0..=0.5).contains(&self.epsilon) {
            return Err(Error::Config(format!("epsilon must lie in [0, 0.5], got {}", self.epsilon)));
        }
        let counts = [
            ("m_fixed", self.m_fixed),
            ("d_model", self.d_model),
            ("d_z", self.d_z),
            ("vae_hidden", self.vae_hidden),
            ("batch_size", self.batch_size),
        ];
        if let Some((k, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{k} must be positive")));
        }
        for (k, v) in [
            ("learning_rate", self.learning_rate),
            ("vae_learning_rate", self.vae_learning_rate),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{k} must be positive, got {v}")));
            }
        }
        if !(self.kl_weight >= 0.0 && self.kl_weight.is_finite()) {
            return Err(Error::Config(format!("kl_weight must be nonnegative, got {}", self.kl_weight)));
        }
        if !snet::ENCODERS.contains(&self.encoder.as_str()) {
            return Err(Error::Config(format!(
                "unknown encoder {:?} (known: {})",
                self.encoder,
                snet::ENCODERS.join(", ")
            )));
        }
        Ok(())
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            train: self.train_ratio,
            dev: self.dev_ratio,
            test: self.test_ratio,
            seed: self.seed,
        }
    }

    pub fn vnet_config(&self) -> VNetConfig {
        VNetConfig {
            d_z: self.d_z,
            hidden: self.vae_hidden,
            kl_weight: self.kl_weight,
            epochs: self.vae_epochs,
            batch_size: self.batch_size,
            learning_rate: self.vae_learning_rate,
            seed: self.seed,
        }
    }

    pub fn model_config(&self, n_labels: usize) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            d_z: self.d_z,
            m: self.m_fixed,
            n_labels,
            epsilon: self.epsilon,
            mode: self.mode,
            encoder: self.encoder.clone(),
            identity_projection: self.identity_projection,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let c = RunConfig {
            epsilon: 0.1 + 0.2,
            mode: Mode::NoGate,
            dataset: PathBuf::from("data/x y.tsv"),
            ..RunConfig::default()
        };
        assert_eq!(RunConfig::parse_text(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn unknown_and_duplicate_keys_rejected() {
        let err = RunConfig::parse_text("epsilon = 0.2\nlearning_rte = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("learning_rte"), "{err}");
        assert!(RunConfig::parse_text("seed = 1\nseed = 2\n").is_err());
        assert!(RunConfig::parse_text("just words\n").is_err());
    }

    #[test]
    fn comments_and_blanks_ignored() {
        let c = RunConfig::parse_text("# run\n\n  seed = 11  \nmode=stats_only\n").unwrap();
        assert_eq!(c.seed, 11);
        assert_eq!(c.mode, Mode::StatsOnly);
    }

    #[test]
    fn invariants_enforced() {
        for bad in [
            "epsilon = 0.7",
            "epsilon = -0.1",
            "batch_size = 0",
            "m_fixed = 0",
            "mode = both",
            "train_ratio = 0.9",
            "encoder = lstm",
            "learning_rate = 0",
        ] {
            assert!(RunConfig::parse_text(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn overrides_apply_in_order_and_validate() {
        let mut c = RunConfig::default();
        c.apply_overrides(&["epsilon=0.3", "epsilon=0.1", "hidden_dim=32"]).unwrap();
        assert_eq!(c.epsilon, 0.1);
        assert_eq!(c.d_model, 32);
        assert!(c.clone().apply_overrides(&["nokey=1"]).is_err());
        assert!(c.clone().apply_overrides(&["epsilon"]).is_err());
        assert!(c.apply_overrides(&["epsilon=0.9"]).is_err());
    }

    #[test]
    fn every_key_is_settable_and_readable() {
        let base = RunConfig::default();
        for key in KEYS {
            let mut c = base.clone();
            c.set(key, &base.get(key).unwrap()).unwrap();
            assert_eq!(c, base, "{key}");
        }
    }
}

use std::fmt;
use std::str::FromStr;

use super::LmError;
use crate::kv::KvMap;

pub const LN_EPS: f64 = 1e-5;
pub const ROTARY_BASE: f64 = 10_000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PositionalScheme {
    /// Learned position table added to the query/key input of every layer.
    AbsoluteLearned,
    /// Rotation of projected queries and keys by position.
    Rotary,
}

impl PositionalScheme {
    pub fn name(self) -> &'static str {
        match self {
            Self::AbsoluteLearned => "absolute_learned",
            Self::Rotary => "rotary",
        }
    }
}

impl fmt::Display for PositionalScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PositionalScheme {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "absolute_learned" | "absolute" => Ok(Self::AbsoluteLearned),
            "rotary" => Ok(Self::Rotary),
            other => Err(format!("unknown positional scheme {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub mlp_dim: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub positional: PositionalScheme,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            n_heads: 4,
            d_model: 128,
            mlp_dim: 512,
            vocab_size: 2048,
            max_positions: 512,
            positional: PositionalScheme::AbsoluteLearned,
        }
    }
}

const KEYS: [&str; 7] = [
    "n_layers",
    "n_heads",
    "d_model",
    "mlp_dim",
    "vocab_size",
    "max_positions",
    "positional_scheme",
];

impl LmConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<(), LmError> {
        let positive = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("mlp_dim", self.mlp_dim),
            ("vocab_size", self.vocab_size),
            ("max_positions", self.max_positions),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(LmError::Config(format!("{name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(LmError::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.positional == PositionalScheme::Rotary && self.head_dim() % 2 != 0 {
            return Err(LmError::Config(format!("rotary needs an even head dimension, got {}", self.head_dim())));
        }
        if self.vocab_size < super::SPECIALS.len() {
            return Err(LmError::Config("vocab_size smaller than the special tokens".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut m = KvMap::new();
        m.set("n_layers", self.n_layers);
        m.set("n_heads", self.n_heads);
        m.set("d_model", self.d_model);
        m.set("mlp_dim", self.mlp_dim);
        m.set("vocab_size", self.vocab_size);
        m.set("max_positions", self.max_positions);
        m.set("positional_scheme", self.positional);
        m
    }

    /// Read every key present in `m` over `self`; unknown keys are ignored
    /// so one file can configure several stages.
    pub fn update_from(&mut self, m: &KvMap) -> Result<(), LmError> {
        m.read_into("n_layers", &mut self.n_layers)?;
        m.read_into("n_heads", &mut self.n_heads)?;
        m.read_into("d_model", &mut self.d_model)?;
        m.read_into("mlp_dim", &mut self.mlp_dim)?;
        m.read_into("vocab_size", &mut self.vocab_size)?;
        m.read_into("max_positions", &mut self.max_positions)?;
        m.read_into("positional_scheme", &mut self.positional)?;
        Ok(())
    }

    /// Strict parse of a saved config: all keys required, none extra.
    pub fn from_kv(m: &KvMap) -> Result<Self, LmError> {
        m.check_known(&KEYS)?;
        let cfg = Self {
            n_layers: m.require("n_layers")?,
            n_heads: m.require("n_heads")?,
            d_model: m.require("d_model")?,
            mlp_dim: m.require("mlp_dim")?,
            vocab_size: m.require("vocab_size")?,
            max_positions: m.require("max_positions")?,
            positional: m.require("positional_scheme")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_and_round_trips() {
        let c = LmConfig::default();
        c.validate().unwrap();
        assert_eq!(LmConfig::from_kv(&c.to_kv()).unwrap(), c);
    }

    #[test]
    fn rejects_bad_head_split() {
        let c = LmConfig {
            d_model: 30,
            n_heads: 4,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = LmConfig {
            d_model: 12,
            n_heads: 4,
            positional: PositionalScheme::Rotary,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }
}

use std::fmt::Write as _;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::vocab::Vocab;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PosEncoding {
    /// Learned per-position embedding added at the input.
    Learned,
    /// Rotary rotation of queries and keys.
    Rotary,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub d_lat: usize,
    /// Longest single sample; positions restart per packed sample.
    pub max_seq_len: usize,
    pub pos_encoding: PosEncoding,
    pub rope_base: f64,
    /// Per-expert layer norms unless set.
    pub shared_norms: bool,
    pub time_features: usize,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Default desk-scale backbone.
    pub fn desk() -> Self {
        Self {
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            d_ff: 512,
            vocab_size: 66,
            d_lat: 2,
            max_seq_len: 1024,
            pos_encoding: PosEncoding::Rotary,
            rope_base: 10_000.0,
            shared_norms: false,
            time_features: 32,
            init_std: 0.02,
            seed: 0,
        }
    }

    /// Minimal shape used by gradient checks.
    pub fn tiny() -> Self {
        Self {
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 12,
            vocab_size: 7,
            d_lat: 2,
            max_seq_len: 32,
            pos_encoding: PosEncoding::Rotary,
            rope_base: 100.0,
            shared_norms: false,
            time_features: 4,
            init_std: 0.02,
            seed: 0,
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.vocab_size)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Contract(format!("model config: {m}")));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return fail("d_model must equal n_heads * d_head");
        }
        if self.pos_encoding == PosEncoding::Rotary && self.d_head() % 2 != 0 {
            return fail("rotary encoding needs an even head width");
        }
        if self.vocab_size < 3 {
            return fail("vocabulary must include MASK and EOS");
        }
        if self.d_lat == 0 || self.d_ff == 0 || self.max_seq_len == 0 {
            return fail("dimensions must be positive");
        }
        if self.time_features == 0 || self.time_features % 2 != 0 {
            return fail("time_features must be a positive even number");
        }
        Ok(())
    }

    /// Flat `key=value` text, one key per line, in a fixed order.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let pos = match self.pos_encoding {
            PosEncoding::Learned => "learned",
            PosEncoding::Rotary => "rotary",
        };
        let _ = writeln!(s, "d_model={}", self.d_model);
        let _ = writeln!(s, "n_layers={}", self.n_layers);
        let _ = writeln!(s, "n_heads={}", self.n_heads);
        let _ = writeln!(s, "d_ff={}", self.d_ff);
        let _ = writeln!(s, "vocab_size={}", self.vocab_size);
        let _ = writeln!(s, "d_lat={}", self.d_lat);
        let _ = writeln!(s, "max_seq_len={}", self.max_seq_len);
        let _ = writeln!(s, "pos_encoding={pos}");
        let _ = writeln!(s, "rope_base={:?}", self.rope_base);
        let _ = writeln!(s, "shared_norms={}", self.shared_norms);
        let _ = writeln!(s, "time_features={}", self.time_features);
        let _ = writeln!(s, "init_std={:?}", self.init_std);
        let _ = writeln!(s, "seed={}", self.seed);
        s
    }

    /// Applies `key=value` overrides on top of `self`. Unknown keys are errors.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<bool> {
        let bad = || Error::Format(format!("bad value {value:?} for {key}"));
        macro_rules! num {
            ($f:ident) => {
                self.$f = value.parse().map_err(|_| bad())?
            };
        }
        match key {
            "d_model" => num!(d_model),
            "n_layers" => num!(n_layers),
            "n_heads" => num!(n_heads),
            "d_ff" => num!(d_ff),
            "vocab_size" => num!(vocab_size),
            "d_lat" => num!(d_lat),
            "max_seq_len" => num!(max_seq_len),
            "rope_base" => num!(rope_base),
            "shared_norms" => num!(shared_norms),
            "time_features" => num!(time_features),
            "init_std" => num!(init_std),
            "seed" => num!(seed),
            "pos_encoding" => {
                self.pos_encoding = match value {
                    "learned" => PosEncoding::Learned,
                    "rotary" => PosEncoding::Rotary,
                    _ => return Err(bad()),
                }
            }
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::desk();
        for (key, value) in parse_kv_lines(text)? {
            if !cfg.apply_kv(&key, &value)? {
                return Err(Error::Format(format!("unknown model key {key:?}")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn digest(&self) -> u64 {
        let d = Sha256::digest(self.to_kv().as_bytes());
        u64::from_le_bytes(d[..8].try_into().unwrap())
    }
}

/// Splits `key=value` lines, skipping blanks and `#` comments.
pub fn parse_kv_lines(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("line {}: expected key=value", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_round_trip() {
        let mut cfg = ModelConfig::tiny();
        cfg.init_std = 0.125;
        cfg.seed = 99;
        let back = ModelConfig::from_kv(&cfg.to_kv()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.digest(), cfg.digest());
        assert_ne!(ModelConfig::desk().digest(), cfg.digest());
    }

    #[test]
    fn rejects_bad_head_split() {
        let mut cfg = ModelConfig::desk();
        cfg.n_heads = 3;
        assert!(cfg.validate().is_err());
        assert!(ModelConfig::from_kv("colour=blue").is_err());
    }
}

use crate::error::{Error, Result};
use crate::maskgen::{MaskKind, MaskVariant};
use crate::numkernel::DType;

/// Byte tokens occupy ids `0..256`.
pub const BYTE_VOCAB: usize = 256;

/// Id reserved for compression tokens in the default vocabulary.
pub const UG_TOKEN: u32 = BYTE_VOCAB as u32;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    /// Output classes, including the compression-token id (never a target).
    pub vocab: usize,
    pub window: usize,
    pub mask: MaskKind,
    pub dtype: DType,
    pub rope_base: f64,
    pub norm_eps: f64,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 128,
            layers: 4,
            heads: 4,
            mlp_dim: 256,
            vocab: BYTE_VOCAB + 1,
            window: 32,
            mask: MaskKind::default(),
            dtype: DType::F32,
            rope_base: 10_000.0,
            norm_eps: 1e-5,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    /// Small configuration used for gradient and equivalence checks.
    pub fn tiny() -> Self {
        Self {
            dim: 16,
            layers: 2,
            heads: 2,
            mlp_dim: 24,
            window: 8,
            dtype: DType::F64,
            ..Self::default()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Id used for compression tokens (last vocabulary entry).
    pub fn ug_token(&self) -> u32 {
        (self.vocab - 1) as u32
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dim", self.dim),
            ("layers", self.layers),
            ("heads", self.heads),
            ("mlp_dim", self.mlp_dim),
            ("vocab", self.vocab),
            ("window", self.window),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if self.vocab < 2 {
            return Err(Error::Config("model.vocab must leave room for the ug id".into()));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model.dim {} not divisible by model.heads {}",
                self.dim, self.heads
            )));
        }
        if self.head_dim() % 2 != 0 {
            return Err(Error::Config("head dimension must be even for rotary encoding".into()));
        }
        if !(self.rope_base > 1.0) || !(self.norm_eps >= 0.0) || !(self.init_std > 0.0) {
            return Err(Error::Config("rope_base/norm_eps/init_std out of range".into()));
        }
        Ok(())
    }

    /// `key=value` pairs in a fixed order.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        vec![
            ("model.dim".into(), self.dim.to_string()),
            ("model.layers".into(), self.layers.to_string()),
            ("model.heads".into(), self.heads.to_string()),
            ("model.mlp_dim".into(), self.mlp_dim.to_string()),
            ("model.vocab".into(), self.vocab.to_string()),
            ("model.window".into(), self.window.to_string()),
            ("model.mask".into(), self.mask.variant.name().into()),
            ("model.ug_causal".into(), self.mask.ug_causal.to_string()),
            ("model.dtype".into(), self.dtype.name().into()),
            ("model.rope_base".into(), format!("{:?}", self.rope_base)),
            ("model.norm_eps".into(), format!("{:?}", self.norm_eps)),
            ("model.init_std".into(), format!("{:?}", self.init_std)),
        ]
    }

    /// Applies one `model.*` key. Returns `false` for keys outside this section.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        let bad = |_| Error::Config(format!("bad value {value:?} for {key}"));
        match key {
            "model.dim" => self.dim = value.parse().map_err(bad)?,
            "model.layers" => self.layers = value.parse().map_err(bad)?,
            "model.heads" => self.heads = value.parse().map_err(bad)?,
            "model.mlp_dim" => self.mlp_dim = value.parse().map_err(bad)?,
            "model.vocab" => self.vocab = value.parse().map_err(bad)?,
            "model.window" => self.window = value.parse().map_err(bad)?,
            "model.mask" => self.mask.variant = value.parse::<MaskVariant>()?,
            "model.ug_causal" => {
                self.mask.ug_causal = value
                    .parse()
                    .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))?
            }
            "model.dtype" => {
                self.dtype = match value {
                    "f32" => DType::F32,
                    "f64" => DType::F64,
                    _ => return Err(Error::Config(format!("bad dtype {value:?}"))),
                }
            }
            "model.rope_base" => self.rope_base = value.parse().map_err(|_| bad_f(key, value))?,
            "model.norm_eps" => self.norm_eps = value.parse().map_err(|_| bad_f(key, value))?,
            "model.init_std" => self.init_std = value.parse().map_err(|_| bad_f(key, value))?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in pairs {
            if !cfg.apply(k, v)? {
                return Err(Error::Config(format!("unknown key {k:?}")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn bad_f(key: &str, value: &str) -> Error {
    Error::Config(format!("bad value {value:?} for {key}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairs_round_trip() {
        let mut cfg = ModelConfig::tiny();
        cfg.mask.variant = MaskVariant::Segmentation;
        let pairs = cfg.to_pairs();
        let back = ModelConfig::from_pairs(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str()))).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn rejects_indivisible_heads() {
        let cfg = ModelConfig { dim: 10, heads: 3, ..ModelConfig::tiny() };
        assert!(cfg.validate().is_err());
    }
}

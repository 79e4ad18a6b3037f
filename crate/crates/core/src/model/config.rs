use serde::{Deserialize, Serialize};

use super::ModelError;

/// Architectural shape of an encoder-decoder transformer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub dropout: f64,
}

impl ModelConfig {
    /// Desk-scale shape with the given layer counts.
    pub fn desk(enc_layers: usize, dec_layers: usize, vocab_size: usize) -> Self {
        Self {
            enc_layers,
            dec_layers,
            d_model: 64,
            d_ffn: 256,
            n_heads: 4,
            vocab_size,
            max_len: 64,
            dropout: 0.0,
        }
    }

    /// Desk-scale default used by the `tiny` preset.
    pub fn tiny(vocab_size: usize) -> Self {
        Self::desk(3, 2, vocab_size)
    }

    fn full(enc_layers: usize, dec_layers: usize, vocab_size: usize) -> Self {
        Self {
            enc_layers,
            dec_layers,
            d_model: 768,
            d_ffn: 3072,
            n_heads: 12,
            vocab_size,
            max_len: 256,
            dropout: 0.1,
        }
    }

    /// Resolves a named preset: `tiny`, `12E6D`, `24E12D`, `E6D6`, `E9D3`
    /// (the last two at desk width), or `full-12E6D` / `full-24E12D`.
    pub fn preset(name: &str, vocab_size: usize) -> Result<Self, ModelError> {
        let cfg = match name {
            "tiny" => Self::tiny(vocab_size),
            "12E6D" => Self::desk(12, 6, vocab_size),
            "24E12D" => Self::desk(24, 12, vocab_size),
            "E6D6" => Self::desk(6, 6, vocab_size),
            "E9D3" => Self::desk(9, 3, vocab_size),
            "full-12E6D" => Self::full(12, 6, vocab_size),
            "full-24E12D" => Self::full(24, 12, vocab_size),
            other => return Err(ModelError::Config(format!("unknown preset {other:?}"))),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_layers(mut self, enc_layers: usize, dec_layers: usize) -> Self {
        self.enc_layers = enc_layers;
        self.dec_layers = dec_layers;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: &str| Err(ModelError::Config(m.to_owned()));
        if self.enc_layers == 0 || self.dec_layers == 0 {
            return fail("need at least one encoder and one decoder layer");
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return fail("d_model must be divisible by n_heads");
        }
        if self.d_ffn == 0 || self.vocab_size < 4 || self.max_len == 0 {
            return fail("d_ffn, vocab_size (>= 4) and max_len must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout must lie in [0, 1)");
        }
        Ok(())
    }

    /// Closed-form number of learnable scalars.
    pub fn param_count(&self) -> usize {
        let (d, f, v) = (self.d_model, self.d_ffn, self.vocab_size);
        let norm = 2 * d;
        let attn = 4 * (d * d + d);
        let ffn = d * f + f + f * d + d;
        let enc_layer = 2 * norm + attn + ffn;
        let dec_layer = 3 * norm + 2 * attn + ffn;
        v * d + self.enc_layers * enc_layer + norm + self.dec_layers * dec_layer + norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_have_expected_shapes() {
        let p = ModelConfig::preset("full-12E6D", 64_000).unwrap();
        assert_eq!((p.enc_layers, p.dec_layers, p.d_model, p.d_ffn), (12, 6, 768, 3072));
        let p = ModelConfig::preset("full-24E12D", 64_000).unwrap();
        assert_eq!((p.enc_layers, p.dec_layers), (24, 12));
        let light = ModelConfig::preset("E9D3", 100).unwrap();
        let base = ModelConfig::preset("E6D6", 100).unwrap();
        assert_eq!((light.enc_layers, light.dec_layers), (9, 3));
        assert_eq!((light.d_model, light.d_ffn), (base.d_model, base.d_ffn));
        assert!(ModelConfig::preset("huge", 10).is_err());
    }

    #[test]
    fn validation() {
        let mut c = ModelConfig::tiny(20);
        c.n_heads = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::tiny(20);
        c.dropout = 1.0;
        assert!(c.validate().is_err());
        assert!(ModelConfig::tiny(20).with_layers(0, 1).validate().is_err());
    }
}

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ModelConfig;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams<T> {
    pub gain: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Projections are stored `[in, out]` so that `y = x W + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<T> {
    pub wq: Tensor<T>,
    pub bq: Tensor<T>,
    pub wk: Tensor<T>,
    pub bk: Tensor<T>,
    pub wv: Tensor<T>,
    pub bv: Tensor<T>,
    pub wo: Tensor<T>,
    pub bo: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeedForwardParams<T> {
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayerParams<T> {
    pub self_norm: LayerNormParams<T>,
    pub self_attn: AttentionParams<T>,
    pub ffn_norm: LayerNormParams<T>,
    pub ffn: FeedForwardParams<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLayerParams<T> {
    pub self_norm: LayerNormParams<T>,
    pub self_attn: AttentionParams<T>,
    pub cross_norm: LayerNormParams<T>,
    pub cross_attn: AttentionParams<T>,
    pub ffn_norm: LayerNormParams<T>,
    pub ffn: FeedForwardParams<T>,
}

/// All learnable tensors. The token embedding doubles as the output
/// projection; positions use fixed sinusoids and are not stored.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub embedding: Tensor<T>,
    pub encoder: Vec<EncoderLayerParams<T>>,
    pub encoder_norm: LayerNormParams<T>,
    pub decoder: Vec<DecoderLayerParams<T>>,
    pub decoder_norm: LayerNormParams<T>,
}

/// Gradients share the parameter layout.
pub type Gradients<T> = ModelParams<T>;

impl<T: Scalar> LayerNormParams<T> {
    fn new(d: usize) -> Self {
        Self {
            gain: Tensor::full(&[d], T::one()),
            bias: Tensor::zeros(&[d]),
        }
    }
    fn tensors(&self) -> [&Tensor<T>; 2] {
        [&self.gain, &self.bias]
    }
    fn tensors_mut(&mut self) -> [&mut Tensor<T>; 2] {
        [&mut self.gain, &mut self.bias]
    }
}

impl<T: Scalar> AttentionParams<T> {
    fn new(d: usize) -> Self {
        let w = || Tensor::zeros(&[d, d]);
        let b = || Tensor::zeros(&[d]);
        Self {
            wq: w(),
            bq: b(),
            wk: w(),
            bk: b(),
            wv: w(),
            bv: b(),
            wo: w(),
            bo: b(),
        }
    }
    fn tensors(&self) -> [&Tensor<T>; 8] {
        [&self.wq, &self.bq, &self.wk, &self.bk, &self.wv, &self.bv, &self.wo, &self.bo]
    }
    fn tensors_mut(&mut self) -> [&mut Tensor<T>; 8] {
        [
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
        ]
    }
}

impl<T: Scalar> FeedForwardParams<T> {
    fn new(d: usize, f: usize) -> Self {
        Self {
            w1: Tensor::zeros(&[d, f]),
            b1: Tensor::zeros(&[f]),
            w2: Tensor::zeros(&[f, d]),
            b2: Tensor::zeros(&[d]),
        }
    }
    fn tensors(&self) -> [&Tensor<T>; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }
    fn tensors_mut(&mut self) -> [&mut Tensor<T>; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

impl<T: Scalar> ModelParams<T> {
    /// All-zero tensors (norm gains included) with the layout of `config`.
    pub fn zeros(config: &ModelConfig) -> Self {
        let (d, f) = (config.d_model, config.d_ffn);
        let mut p = Self {
            config: config.clone(),
            embedding: Tensor::zeros(&[config.vocab_size, d]),
            encoder: (0..config.enc_layers)
                .map(|_| EncoderLayerParams {
                    self_norm: LayerNormParams::new(d),
                    self_attn: AttentionParams::new(d),
                    ffn_norm: LayerNormParams::new(d),
                    ffn: FeedForwardParams::new(d, f),
                })
                .collect(),
            encoder_norm: LayerNormParams::new(d),
            decoder: (0..config.dec_layers)
                .map(|_| DecoderLayerParams {
                    self_norm: LayerNormParams::new(d),
                    self_attn: AttentionParams::new(d),
                    cross_norm: LayerNormParams::new(d),
                    cross_attn: AttentionParams::new(d),
                    ffn_norm: LayerNormParams::new(d),
                    ffn: FeedForwardParams::new(d, f),
                })
                .collect(),
            decoder_norm: LayerNormParams::new(d),
        };
        p.tensors_mut().into_iter().for_each(Tensor::fill_zero);
        p
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.config)
    }

    /// Every tensor in declaration order: embedding, encoder layers,
    /// encoder norm, decoder layers, decoder norm.
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut out = vec![&self.embedding];
        for l in &self.encoder {
            out.extend(l.self_norm.tensors());
            out.extend(l.self_attn.tensors());
            out.extend(l.ffn_norm.tensors());
            out.extend(l.ffn.tensors());
        }
        out.extend(self.encoder_norm.tensors());
        for l in &self.decoder {
            out.extend(l.self_norm.tensors());
            out.extend(l.self_attn.tensors());
            out.extend(l.cross_norm.tensors());
            out.extend(l.cross_attn.tensors());
            out.extend(l.ffn_norm.tensors());
            out.extend(l.ffn.tensors());
        }
        out.extend(self.decoder_norm.tensors());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.embedding];
        for l in &mut self.encoder {
            out.extend(l.self_norm.tensors_mut());
            out.extend(l.self_attn.tensors_mut());
            out.extend(l.ffn_norm.tensors_mut());
            out.extend(l.ffn.tensors_mut());
        }
        out.extend(self.encoder_norm.tensors_mut());
        for l in &mut self.decoder {
            out.extend(l.self_norm.tensors_mut());
            out.extend(l.self_attn.tensors_mut());
            out.extend(l.cross_norm.tensors_mut());
            out.extend(l.cross_attn.tensors_mut());
            out.extend(l.ffn_norm.tensors_mut());
            out.extend(l.ffn.tensors_mut());
        }
        out.extend(self.decoder_norm.tensors_mut());
        out
    }

    fn norms_mut(&mut self) -> Vec<&mut LayerNormParams<T>> {
        let mut out = Vec::new();
        for l in &mut self.encoder {
            out.extend([&mut l.self_norm, &mut l.ffn_norm]);
        }
        out.push(&mut self.encoder_norm);
        for l in &mut self.decoder {
            out.extend([&mut l.self_norm, &mut l.cross_norm, &mut l.ffn_norm]);
        }
        out.push(&mut self.decoder_norm);
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.all_finite())
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let mut out = ModelParams::<U>::zeros(&self.config);
        for (dst, src) in out.tensors_mut().into_iter().zip(self.tensors()) {
            *dst = src.cast();
        }
        out
    }

    /// `self += other`.
    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            crate::tensor::add_assign(a.data_mut(), b.data());
        }
    }

    pub fn scale(&mut self, factor: T) {
        for t in self.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = *v * factor);
        }
    }

    /// FNV-1a over the little-endian bytes of every value.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in self.tensors() {
            for v in t.data() {
                for b in v.as_f64().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }
}

/// Glorot-uniform weights, unit norm gains, zero biases. Deterministic in
/// `seed`.
pub fn init_params<T: Scalar>(config: &ModelConfig, seed: u64) -> ModelParams<T> {
    let mut p = ModelParams::<T>::zeros(config);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in p.tensors_mut() {
        if let [fan_in, fan_out] = *t.shape() {
            let bound = glorot_bound(fan_in, fan_out);
            let dist = Uniform::new_inclusive(-bound, bound);
            t.data_mut()
                .iter_mut()
                .for_each(|v| *v = T::from_f64_lossy(dist.sample(&mut rng)));
        }
    }
    for norm in p.norms_mut() {
        norm.gain.data_mut().iter_mut().for_each(|g| *g = T::one());
    }
    p
}

/// `sqrt(6 / (fan_in + fan_out))`; the implied variance is
/// `2 / (fan_in + fan_out)`.
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_count_matches_closed_form() {
        for cfg in [
            ModelConfig::tiny(37),
            ModelConfig::desk(9, 3, 50),
            ModelConfig::desk(1, 1, 11),
        ] {
            let p = init_params::<f32>(&cfg, 0);
            assert_eq!(p.num_params(), cfg.param_count());
        }
    }

    #[test]
    fn init_is_deterministic_with_unit_gains_and_zero_biases() {
        let cfg = ModelConfig::tiny(30);
        let a = init_params::<f32>(&cfg, 9);
        let b = init_params::<f32>(&cfg, 9);
        assert_eq!(a, b);
        assert_ne!(a, init_params::<f32>(&cfg, 10));
        let l = &a.decoder[0];
        assert!(l.cross_norm.gain.data().iter().all(|&g| g == 1.0));
        assert!(l.cross_norm.bias.data().iter().all(|&g| g == 0.0));
        assert!(l.self_attn.bq.data().iter().all(|&g| g == 0.0));
        assert!(a.encoder_norm.gain.data().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn weight_variance_matches_glorot_target() {
        let cfg = ModelConfig::desk(1, 1, 40);
        let p = init_params::<f64>(&cfg, 3);
        let w = &p.encoder[0].ffn.w1; // 64 x 256
        let target = 2.0 / (64.0 + 256.0);
        let n = w.len() as f64;
        let mean = w.data().iter().sum::<f64>() / n;
        let var = w.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!((var - target).abs() / target < 0.1, "var {var} target {target}");
    }
}

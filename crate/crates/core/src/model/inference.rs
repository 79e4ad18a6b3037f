//! Incremental decoding with cached encoder projections and a per-layer
//! key/value cache for decoder self-attention.

use super::layers::{attend_row, feed_forward, layer_norm_row, linear, log_softmax};
use super::transformer::{embed, encode_packed, last_logits, Packed};
use super::{ModelError, ModelParams};
use crate::subword::BOS;
use crate::tensor::{add_assign, gemm, MatMut, MatRef, Scalar};

/// Encoder output projected into every decoder layer's cross-attention
/// keys and values.
#[derive(Clone, Debug)]
pub struct EncoderMemory<T> {
    len: usize,
    cross_k: Vec<Vec<T>>,
    cross_v: Vec<Vec<T>>,
}

impl<T> EncoderMemory<T> {
    pub fn src_len(&self) -> usize {
        self.len
    }
}

/// Self-attention keys/values of the tokens fed so far.
#[derive(Clone, Debug)]
pub struct DecoderCache<T> {
    pos: usize,
    self_k: Vec<Vec<T>>,
    self_v: Vec<Vec<T>>,
}

impl<T> DecoderCache<T> {
    pub fn new<S>(params: &ModelParams<S>) -> Self {
        let n = params.config.dec_layers;
        Self {
            pos: 0,
            self_k: (0..n).map(|_| Vec::new()).collect(),
            self_v: (0..n).map(|_| Vec::new()).collect(),
        }
    }

    /// Number of tokens already fed.
    pub fn len(&self) -> usize {
        self.pos
    }

    pub fn is_empty(&self) -> bool {
        self.pos == 0
    }
}

fn check_ids<T>(params: &ModelParams<T>, ids: &[u32]) -> Result<(), ModelError> {
    let cfg = &params.config;
    if ids.is_empty() {
        return Err(ModelError::EmptySequence);
    }
    if ids.len() > cfg.max_len {
        return Err(ModelError::TooLong { len: ids.len(), max_len: cfg.max_len });
    }
    match ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
        Some(&id) => Err(ModelError::TokenOutOfRange { id, vocab_size: cfg.vocab_size }),
        None => Ok(()),
    }
}

/// Runs the encoder once and caches cross-attention projections.
pub fn encode<T: Scalar>(params: &ModelParams<T>, src: &[u32]) -> Result<EncoderMemory<T>, ModelError> {
    check_ids(params, src)?;
    let memory = encode_packed(params, &Packed::single(src, &[BOS]));
    let (cross_k, cross_v) = params
        .decoder
        .iter()
        .map(|l| {
            let a = &l.cross_attn;
            (linear(&memory, src.len(), &a.wk, &a.bk), linear(&memory, src.len(), &a.wv, &a.bv))
        })
        .unzip();
    Ok(EncoderMemory { len: src.len(), cross_k, cross_v })
}

/// Feeds one token and returns next-token log-probabilities.
pub fn decode_step<T: Scalar>(
    params: &ModelParams<T>,
    memory: &EncoderMemory<T>,
    cache: &mut DecoderCache<T>,
    token: u32,
) -> Result<Vec<T>, ModelError> {
    let cfg = &params.config;
    if cache.pos >= cfg.max_len {
        return Err(ModelError::TooLong { len: cache.pos + 1, max_len: cfg.max_len });
    }
    check_ids(params, &[token])?;
    let heads = cfg.n_heads;
    let mut x = embed(params, &[token], &[cache.pos]);
    for (i, l) in params.decoder.iter().enumerate() {
        let h = layer_norm_row(&x, &l.self_norm);
        let a = &l.self_attn;
        let q = linear(&h, 1, &a.wq, &a.bq);
        cache.self_k[i].extend(linear(&h, 1, &a.wk, &a.bk));
        cache.self_v[i].extend(linear(&h, 1, &a.wv, &a.bv));
        let ctx = attend_row(&q, &cache.self_k[i], &cache.self_v[i], heads);
        add_assign(&mut x, &linear(&ctx, 1, &a.wo, &a.bo));

        let h = layer_norm_row(&x, &l.cross_norm);
        let c = &l.cross_attn;
        let q = linear(&h, 1, &c.wq, &c.bq);
        let ctx = attend_row(&q, &memory.cross_k[i], &memory.cross_v[i], heads);
        add_assign(&mut x, &linear(&ctx, 1, &c.wo, &c.bo));

        let h = layer_norm_row(&x, &l.ffn_norm);
        add_assign(&mut x, &feed_forward(&h, 1, &l.ffn).0);
    }
    cache.pos += 1;
    let y = layer_norm_row(&x, &params.decoder_norm);
    let v = cfg.vocab_size;
    let mut logits = vec![T::zero(); v];
    gemm(
        T::one(),
        MatRef::new(&y, 1, cfg.d_model),
        params.embedding.mat().t(),
        T::zero(),
        MatMut::new(&mut logits, 1, v),
    );
    Ok(log_softmax(&logits))
}

fn check_prefix<T>(params: &ModelParams<T>, prefix: &[u32]) -> Result<(), ModelError> {
    check_ids(params, prefix)?;
    if prefix[0] != BOS {
        return Err(ModelError::Malformed("decoder prefix must start with BOS".into()));
    }
    Ok(())
}

/// Next-token log-probabilities after `prefix` (which starts with BOS),
/// computed incrementally through the caches.
pub fn greedy_step<T: Scalar>(params: &ModelParams<T>, src: &[u32], prefix: &[u32]) -> Result<Vec<T>, ModelError> {
    check_prefix(params, prefix)?;
    let memory = encode(params, src)?;
    let mut cache = DecoderCache::new(params);
    let mut out = Vec::new();
    for &t in prefix {
        out = decode_step(params, &memory, &mut cache, t)?;
    }
    Ok(out)
}

/// Same as [`greedy_step`] but re-runs the full forward pass.
pub fn greedy_step_uncached<T: Scalar>(
    params: &ModelParams<T>,
    src: &[u32],
    prefix: &[u32],
) -> Result<Vec<T>, ModelError> {
    check_ids(params, src)?;
    check_prefix(params, prefix)?;
    Ok(log_softmax(&last_logits(params, src, prefix)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelConfig};
    use crate::subword::EOS;

    #[test]
    fn cached_matches_full_forward() {
        let p = init_params::<f32>(&ModelConfig::desk(2, 3, 20), 11);
        let src = [4, 9, 13, 7, 19, EOS];
        let mut prefix = vec![BOS];
        for t in [5u32, 8, 8, 17, 4, 12] {
            let a = greedy_step(&p, &src, &prefix).unwrap();
            let b = greedy_step_uncached(&p, &src, &prefix).unwrap();
            let s: f32 = a.iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-6);
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-5, "{x} vs {y}");
            }
            prefix.push(t);
        }
    }

    #[test]
    fn repeated_calls_are_identical() {
        let p = init_params::<f32>(&ModelConfig::desk(1, 1, 12), 2);
        let a = greedy_step(&p, &[4, 5, EOS], &[BOS, 6]).unwrap();
        assert_eq!(a, greedy_step(&p, &[4, 5, EOS], &[BOS, 6]).unwrap());
    }

    #[test]
    fn rejects_bad_inputs() {
        let p = init_params::<f32>(&ModelConfig::desk(1, 1, 12), 2);
        assert!(matches!(greedy_step(&p, &[4, 50], &[BOS]), Err(ModelError::TokenOutOfRange { .. })));
        assert!(greedy_step(&p, &[4], &[6]).is_err());
        assert_eq!(greedy_step(&p, &[], &[BOS]).unwrap_err(), ModelError::EmptySequence);
    }
}

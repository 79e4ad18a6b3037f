//! Training-time forward and backward over packed variable-length batches.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::layers::{
    attention, attention_backward, feed_forward, feed_forward_backward, layer_norm, layer_norm_backward,
    log_softmax, position_encoding, AttnCache, FfnCache, NormCache, Segment,
};
use super::params::{DecoderLayerParams, EncoderLayerParams, Gradients, ModelParams};
use super::{Batch, ModelError};
use crate::tensor::{add_assign, gemm, MatMut, MatRef, Scalar, Tensor};

/// Sentences per gradient chunk. Chunks run in parallel and are reduced in
/// index order, so results do not depend on the thread count.
const CHUNK_ROWS: usize = 8;

/// Batch rows flattened to valid positions only.
pub(crate) struct Packed {
    pub src: Vec<u32>,
    pub src_pos: Vec<usize>,
    pub tgt_in: Vec<u32>,
    pub tgt_out: Vec<u32>,
    pub tgt_pos: Vec<usize>,
    pub enc_segs: Vec<Segment>,
    pub self_segs: Vec<Segment>,
    pub cross_segs: Vec<Segment>,
    /// `(row, column)` of each packed target position.
    pub tgt_slots: Vec<(usize, usize)>,
}

impl Packed {
    pub fn from_rows(batch: &Batch, rows: impl Iterator<Item = usize>) -> Self {
        let mut p = Packed {
            src: Vec::new(),
            src_pos: Vec::new(),
            tgt_in: Vec::new(),
            tgt_out: Vec::new(),
            tgt_pos: Vec::new(),
            enc_segs: Vec::new(),
            self_segs: Vec::new(),
            cross_segs: Vec::new(),
            tgt_slots: Vec::new(),
        };
        for r in rows {
            let ns = batch.src_mask[r].iter().filter(|&&m| m).count();
            let nt = batch.tgt_mask[r].iter().filter(|&&m| m).count();
            if nt == 0 {
                continue;
            }
            let s0 = p.src.len();
            let t0 = p.tgt_in.len();
            p.src.extend_from_slice(&batch.src_ids[r][..ns]);
            p.src_pos.extend(0..ns);
            p.tgt_in.extend_from_slice(&batch.tgt_in_ids[r][..nt]);
            p.tgt_out.extend_from_slice(&batch.tgt_out_ids[r][..nt]);
            p.tgt_pos.extend(0..nt);
            p.tgt_slots.extend((0..nt).map(|c| (r, c)));
            let (s, t) = (s0..s0 + ns, t0..t0 + nt);
            p.enc_segs.push(Segment { q: s.clone(), k: s.clone() });
            p.self_segs.push(Segment { q: t.clone(), k: t.clone() });
            p.cross_segs.push(Segment { q: t, k: s });
        }
        p
    }

    /// Packs a single source with a decoder prefix.
    pub fn single(src: &[u32], prefix: &[u32]) -> Self {
        let batch = Batch {
            src_ids: vec![src.to_vec()],
            tgt_in_ids: vec![prefix.to_vec()],
            tgt_out_ids: vec![vec![0; prefix.len()]],
            src_mask: vec![vec![true; src.len()]],
            tgt_mask: vec![vec![true; prefix.len()]],
        };
        Self::from_rows(&batch, 0..1)
    }
}

struct Dropout {
    rate: f64,
    rng: Option<ChaCha8Rng>,
}

impl Dropout {
    fn off() -> Self {
        Self { rate: 0.0, rng: None }
    }

    fn train(rate: f64, seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { rate, rng: Some(rng) }
    }

    /// Applies inverted dropout in place and returns the scale mask.
    fn apply<T: Scalar>(&mut self, x: &mut [T]) -> Option<Vec<T>> {
        let rng = self.rng.as_mut().filter(|_| self.rate > 0.0)?;
        let keep = T::from_f64_lossy(1.0 / (1.0 - self.rate));
        let mask: Vec<T> = x
            .iter()
            .map(|_| if rng.gen::<f64>() < self.rate { T::zero() } else { keep })
            .collect();
        x.iter_mut().zip(&mask).for_each(|(v, &m)| *v = *v * m);
        Some(mask)
    }
}

fn masked<T: Scalar>(dx: &[T], mask: &Option<Vec<T>>) -> Vec<T> {
    match mask {
        Some(m) => dx.iter().zip(m).map(|(&a, &b)| a * b).collect(),
        None => dx.to_vec(),
    }
}

pub(crate) fn embed<T: Scalar>(params: &ModelParams<T>, ids: &[u32], pos: &[usize]) -> Vec<T> {
    let d = params.config.d_model;
    let scale = T::from_usize(d).unwrap().sqrt();
    let mut x = vec![T::zero(); ids.len() * d];
    for ((row, &id), &p) in x.chunks_exact_mut(d).zip(ids).zip(pos) {
        position_encoding(p, d, row);
        let e = &params.embedding.data()[id as usize * d..(id as usize + 1) * d];
        row.iter_mut().zip(e).for_each(|(v, &w)| *v = *v + w * scale);
    }
    x
}

fn embed_backward<T: Scalar>(grads: &mut Gradients<T>, ids: &[u32], dx: &[T]) {
    let d = grads.config.d_model;
    let scale = T::from_usize(d).unwrap().sqrt();
    let ge = grads.embedding.data_mut();
    for (row, &id) in dx.chunks_exact(d).zip(ids) {
        let g = &mut ge[id as usize * d..(id as usize + 1) * d];
        g.iter_mut().zip(row).for_each(|(a, &b)| *a = *a + b * scale);
    }
}

struct EncLayerCache<T> {
    n1: NormCache<T>,
    h1: Vec<T>,
    attn: AttnCache<T>,
    drop1: Option<Vec<T>>,
    n2: NormCache<T>,
    h2: Vec<T>,
    ffn: FfnCache<T>,
    drop2: Option<Vec<T>>,
}

fn encoder_layer<T: Scalar>(
    p: &EncoderLayerParams<T>,
    x: &mut [T],
    segs: &[Segment],
    heads: usize,
    drop: &mut Dropout,
) -> EncLayerCache<T> {
    let d = p.self_norm.gain.len();
    let (h1, n1) = layer_norm(x, d, &p.self_norm);
    let (mut a, attn) = attention(&p.self_attn, &h1, &h1, segs, heads, false);
    let drop1 = drop.apply(&mut a);
    add_assign(x, &a);
    let (h2, n2) = layer_norm(x, d, &p.ffn_norm);
    let (mut f, ffn) = feed_forward(&h2, x.len() / d, &p.ffn);
    let drop2 = drop.apply(&mut f);
    add_assign(x, &f);
    EncLayerCache { n1, h1, attn, drop1, n2, h2, ffn, drop2 }
}

fn encoder_layer_backward<T: Scalar>(
    p: &EncoderLayerParams<T>,
    g: &mut EncoderLayerParams<T>,
    c: &EncLayerCache<T>,
    segs: &[Segment],
    heads: usize,
    dx: &mut [T],
) {
    let d = p.self_norm.gain.len();
    let rows = dx.len() / d;
    let df = masked(dx, &c.drop2);
    let mut dh2 = vec![T::zero(); dx.len()];
    feed_forward_backward(&df, &c.h2, rows, &c.ffn, &p.ffn, &mut g.ffn, &mut dh2);
    layer_norm_backward(&dh2, &c.n2, &p.ffn_norm, &mut g.ffn_norm, dx);
    let da = masked(dx, &c.drop1);
    let mut dq = vec![T::zero(); dx.len()];
    let mut dkv = vec![T::zero(); dx.len()];
    attention_backward(&da, &p.self_attn, &mut g.self_attn, &c.attn, &c.h1, &c.h1, segs, heads, &mut dq, &mut dkv);
    add_assign(&mut dq, &dkv);
    layer_norm_backward(&dq, &c.n1, &p.self_norm, &mut g.self_norm, dx);
}

struct DecLayerCache<T> {
    n1: NormCache<T>,
    h1: Vec<T>,
    self_attn: AttnCache<T>,
    drop1: Option<Vec<T>>,
    n2: NormCache<T>,
    h2: Vec<T>,
    cross_attn: AttnCache<T>,
    drop2: Option<Vec<T>>,
    n3: NormCache<T>,
    h3: Vec<T>,
    ffn: FfnCache<T>,
    drop3: Option<Vec<T>>,
}

#[allow(clippy::too_many_arguments)]
fn decoder_layer<T: Scalar>(
    p: &DecoderLayerParams<T>,
    x: &mut [T],
    memory: &[T],
    self_segs: &[Segment],
    cross_segs: &[Segment],
    heads: usize,
    drop: &mut Dropout,
) -> DecLayerCache<T> {
    let d = p.self_norm.gain.len();
    let (h1, n1) = layer_norm(x, d, &p.self_norm);
    let (mut a, self_attn) = attention(&p.self_attn, &h1, &h1, self_segs, heads, true);
    let drop1 = drop.apply(&mut a);
    add_assign(x, &a);
    let (h2, n2) = layer_norm(x, d, &p.cross_norm);
    let (mut c, cross_attn) = attention(&p.cross_attn, &h2, memory, cross_segs, heads, false);
    let drop2 = drop.apply(&mut c);
    add_assign(x, &c);
    let (h3, n3) = layer_norm(x, d, &p.ffn_norm);
    let (mut f, ffn) = feed_forward(&h3, x.len() / d, &p.ffn);
    let drop3 = drop.apply(&mut f);
    add_assign(x, &f);
    DecLayerCache { n1, h1, self_attn, drop1, n2, h2, cross_attn, drop2, n3, h3, ffn, drop3 }
}

#[allow(clippy::too_many_arguments)]
fn decoder_layer_backward<T: Scalar>(
    p: &DecoderLayerParams<T>,
    g: &mut DecoderLayerParams<T>,
    c: &DecLayerCache<T>,
    memory: &[T],
    self_segs: &[Segment],
    cross_segs: &[Segment],
    heads: usize,
    dx: &mut [T],
    dmemory: &mut [T],
) {
    let d = p.self_norm.gain.len();
    let rows = dx.len() / d;
    let df = masked(dx, &c.drop3);
    let mut dh = vec![T::zero(); dx.len()];
    feed_forward_backward(&df, &c.h3, rows, &c.ffn, &p.ffn, &mut g.ffn, &mut dh);
    layer_norm_backward(&dh, &c.n3, &p.ffn_norm, &mut g.ffn_norm, dx);

    let dc = masked(dx, &c.drop2);
    dh.iter_mut().for_each(|v| *v = T::zero());
    attention_backward(
        &dc,
        &p.cross_attn,
        &mut g.cross_attn,
        &c.cross_attn,
        &c.h2,
        memory,
        cross_segs,
        heads,
        &mut dh,
        dmemory,
    );
    layer_norm_backward(&dh, &c.n2, &p.cross_norm, &mut g.cross_norm, dx);

    let da = masked(dx, &c.drop1);
    dh.iter_mut().for_each(|v| *v = T::zero());
    let mut dkv = vec![T::zero(); dx.len()];
    attention_backward(&da, &p.self_attn, &mut g.self_attn, &c.self_attn, &c.h1, &c.h1, self_segs, heads, &mut dh, &mut dkv);
    add_assign(&mut dh, &dkv);
    layer_norm_backward(&dh, &c.n1, &p.self_norm, &mut g.self_norm, dx);
}

struct ForwardCache<T> {
    src_drop: Option<Vec<T>>,
    enc: Vec<EncLayerCache<T>>,
    enc_norm: NormCache<T>,
    memory: Vec<T>,
    tgt_drop: Option<Vec<T>>,
    dec: Vec<DecLayerCache<T>>,
    dec_norm: NormCache<T>,
    y: Vec<T>,
}

/// Encoder stack plus final norm; returns the memory and caches.
fn run_encoder<T: Scalar>(
    params: &ModelParams<T>,
    packed: &Packed,
    drop: &mut Dropout,
) -> (Vec<T>, Option<Vec<T>>, Vec<EncLayerCache<T>>, NormCache<T>) {
    let (d, heads) = (params.config.d_model, params.config.n_heads);
    let mut x = embed(params, &packed.src, &packed.src_pos);
    let src_drop = drop.apply(&mut x);
    let enc = params
        .encoder
        .iter()
        .map(|l| encoder_layer(l, &mut x, &packed.enc_segs, heads, drop))
        .collect();
    let (memory, enc_norm) = layer_norm(&x, d, &params.encoder_norm);
    (memory, src_drop, enc, enc_norm)
}

/// Encoder memory for one packed source, eval mode.
pub(crate) fn encode_packed<T: Scalar>(params: &ModelParams<T>, packed: &Packed) -> Vec<T> {
    run_encoder(params, packed, &mut Dropout::off()).0
}

/// Full forward; returns packed logits `[n_tgt, vocab]`.
fn run_forward<T: Scalar>(params: &ModelParams<T>, packed: &Packed, drop: &mut Dropout) -> (Vec<T>, ForwardCache<T>) {
    let (d, heads, v) = (params.config.d_model, params.config.n_heads, params.config.vocab_size);
    let (memory, src_drop, enc, enc_norm) = run_encoder(params, packed, drop);
    let mut x = embed(params, &packed.tgt_in, &packed.tgt_pos);
    let tgt_drop = drop.apply(&mut x);
    let dec = params
        .decoder
        .iter()
        .map(|l| decoder_layer(l, &mut x, &memory, &packed.self_segs, &packed.cross_segs, heads, drop))
        .collect();
    let (y, dec_norm) = layer_norm(&x, d, &params.decoder_norm);
    let n = packed.tgt_in.len();
    let mut logits = vec![T::zero(); n * v];
    gemm(
        T::one(),
        MatRef::new(&y, n, d),
        params.embedding.mat().t(),
        T::zero(),
        MatMut::new(&mut logits, n, v),
    );
    let cache = ForwardCache { src_drop, enc, enc_norm, memory, tgt_drop, dec, dec_norm, y };
    (logits, cache)
}

fn run_backward<T: Scalar>(params: &ModelParams<T>, packed: &Packed, cache: &ForwardCache<T>, dlogits: &[T]) -> Gradients<T> {
    let (d, heads, v) = (params.config.d_model, params.config.n_heads, params.config.vocab_size);
    let n = packed.tgt_in.len();
    let mut g = params.zeros_like();
    // Tied output projection.
    gemm(
        T::one(),
        MatRef::new(dlogits, n, v).t(),
        MatRef::new(&cache.y, n, d),
        T::one(),
        MatMut::new(g.embedding.data_mut(), v, d),
    );
    let mut dy = vec![T::zero(); n * d];
    gemm(T::one(), MatRef::new(dlogits, n, v), params.embedding.mat(), T::zero(), MatMut::new(&mut dy, n, d));
    let mut dx = vec![T::zero(); n * d];
    layer_norm_backward(&dy, &cache.dec_norm, &params.decoder_norm, &mut g.decoder_norm, &mut dx);

    let mut dmemory = vec![T::zero(); cache.memory.len()];
    for ((p, gl), c) in params.decoder.iter().zip(g.decoder.iter_mut()).zip(&cache.dec).rev() {
        decoder_layer_backward(
            p,
            gl,
            c,
            &cache.memory,
            &packed.self_segs,
            &packed.cross_segs,
            heads,
            &mut dx,
            &mut dmemory,
        );
    }
    let dx = masked(&dx, &cache.tgt_drop);
    embed_backward(&mut g, &packed.tgt_in, &dx);

    let mut ds = vec![T::zero(); dmemory.len()];
    layer_norm_backward(&dmemory, &cache.enc_norm, &params.encoder_norm, &mut g.encoder_norm, &mut ds);
    for ((p, gl), c) in params.encoder.iter().zip(g.encoder.iter_mut()).zip(&cache.enc).rev() {
        encoder_layer_backward(p, gl, c, &packed.enc_segs, heads, &mut ds);
    }
    let ds = masked(&ds, &cache.src_drop);
    embed_backward(&mut g, &packed.src, &ds);
    g
}

/// Logits `[rows, tgt_len, vocab]` in eval mode (no dropout). Padding
/// positions hold zeros.
pub fn forward<T: Scalar>(params: &ModelParams<T>, batch: &Batch) -> Result<Tensor<T>, ModelError> {
    batch.validate(&params.config)?;
    let v = params.config.vocab_size;
    let packed = Packed::from_rows(batch, 0..batch.rows());
    let (logits, _) = run_forward(params, &packed, &mut Dropout::off());
    let t = batch.tgt_len();
    let mut out = Tensor::zeros(&[batch.rows(), t, v]);
    for (i, &(r, c)) in packed.tgt_slots.iter().enumerate() {
        out.data_mut()[(r * t + c) * v..(r * t + c + 1) * v].copy_from_slice(&logits[i * v..(i + 1) * v]);
    }
    Ok(out)
}

/// Summed label-smoothed cross-entropy over non-pad target tokens.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossSum {
    pub total: f64,
    pub tokens: usize,
}

impl LossSum {
    pub fn mean(&self) -> f64 {
        self.total / self.tokens as f64
    }

    pub fn add(&mut self, other: LossSum) {
        self.total += other.total;
        self.tokens += other.tokens;
    }
}

/// Cross-entropy against `(1 - eps) * onehot + eps / V`. Writes the
/// gradient with respect to the logits when `dlogits` is given.
fn smoothed_xent<T: Scalar>(logits: &[T], targets: &[u32], v: usize, eps: f64, mut dlogits: Option<&mut [T]>) -> f64 {
    let mut total = 0.0;
    let off = T::from_f64_lossy(eps / v as f64);
    let on = T::from_f64_lossy(1.0 - eps) + off;
    for (i, (row, &y)) in logits.chunks_exact(v).zip(targets).enumerate() {
        let lp = log_softmax(row);
        let y = y as usize;
        let uniform: f64 = lp.iter().map(|l| l.as_f64()).sum::<f64>() / v as f64;
        total += -(1.0 - eps) * lp[y].as_f64() - eps * uniform;
        if let Some(dl) = dlogits.as_deref_mut() {
            let dr = &mut dl[i * v..(i + 1) * v];
            for (k, (g, l)) in dr.iter_mut().zip(&lp).enumerate() {
                *g = l.exp() - if k == y { on } else { off };
            }
        }
    }
    total
}

fn chunks(batch: &Batch) -> Vec<Packed> {
    (0..batch.rows())
        .step_by(CHUNK_ROWS)
        .map(|s| Packed::from_rows(batch, s..(s + CHUNK_ROWS).min(batch.rows())))
        .filter(|p| !p.tgt_in.is_empty())
        .collect()
}

/// Summed loss and summed gradients (not yet divided by the token count).
/// Dropout follows `params.config.dropout`, seeded by `dropout_seed`.
pub fn loss_and_grad_sum<T: Scalar>(
    params: &ModelParams<T>,
    batch: &Batch,
    label_smoothing: f64,
    dropout_seed: u64,
) -> Result<(LossSum, Gradients<T>), ModelError> {
    batch.validate(&params.config)?;
    let chunks = chunks(batch);
    if chunks.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let v = params.config.vocab_size;
    let rate = params.config.dropout;
    let parts: Vec<(f64, usize, Gradients<T>)> = chunks
        .par_iter()
        .enumerate()
        .map(|(i, packed)| {
            let mut drop = Dropout::train(rate, dropout_seed, i as u64);
            let (logits, cache) = run_forward(params, packed, &mut drop);
            let mut dlogits = vec![T::zero(); logits.len()];
            let loss = smoothed_xent(&logits, &packed.tgt_out, v, label_smoothing, Some(&mut dlogits));
            let g = run_backward(params, packed, &cache, &dlogits);
            (loss, packed.tgt_out.len(), g)
        })
        .collect();
    let mut sum = LossSum::default();
    let mut grads: Option<Gradients<T>> = None;
    for (loss, tokens, g) in parts {
        sum.add(LossSum { total: loss, tokens });
        match grads.as_mut() {
            Some(acc) => acc.add_assign(&g),
            None => grads = Some(g),
        }
    }
    if !sum.total.is_finite() {
        return Err(ModelError::NonFiniteLoss(sum.total));
    }
    Ok((sum, grads.expect("at least one chunk")))
}

/// Token-mean label-smoothed cross-entropy and its exact gradient.
pub fn loss_and_grad<T: Scalar>(
    params: &ModelParams<T>,
    batch: &Batch,
    label_smoothing: f64,
    dropout_seed: u64,
) -> Result<(f64, Gradients<T>), ModelError> {
    let (sum, mut grads) = loss_and_grad_sum(params, batch, label_smoothing, dropout_seed)?;
    grads.scale(T::from_f64_lossy(1.0 / sum.tokens as f64));
    Ok((sum.mean(), grads))
}

/// Summed eval-mode loss, used for dev evaluation.
pub fn loss_sum<T: Scalar>(params: &ModelParams<T>, batch: &Batch, label_smoothing: f64) -> Result<LossSum, ModelError> {
    batch.validate(&params.config)?;
    let v = params.config.vocab_size;
    let parts: Vec<LossSum> = chunks(batch)
        .par_iter()
        .map(|packed| {
            let (logits, _) = run_forward(params, packed, &mut Dropout::off());
            LossSum {
                total: smoothed_xent(&logits, &packed.tgt_out, v, label_smoothing, None),
                tokens: packed.tgt_out.len(),
            }
        })
        .collect();
    let mut sum = LossSum::default();
    parts.into_iter().for_each(|p| sum.add(p));
    if sum.tokens == 0 {
        return Err(ModelError::EmptyBatch);
    }
    if !sum.total.is_finite() {
        return Err(ModelError::NonFiniteLoss(sum.total));
    }
    Ok(sum)
}

/// Eval-mode logits for the last prefix position, re-running the decoder
/// over the whole prefix.
pub(crate) fn last_logits<T: Scalar>(params: &ModelParams<T>, src: &[u32], prefix: &[u32]) -> Vec<T> {
    let v = params.config.vocab_size;
    let packed = Packed::single(src, prefix);
    let (logits, _) = run_forward(params, &packed, &mut Dropout::off());
    logits[logits.len() - v..].to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, Example, ModelConfig};
    use crate::subword::EOS;
    use rand::Rng;

    fn small_config(vocab: usize) -> ModelConfig {
        ModelConfig {
            enc_layers: 2,
            dec_layers: 2,
            d_model: 16,
            d_ffn: 32,
            n_heads: 1,
            vocab_size: vocab,
            max_len: 16,
            dropout: 0.0,
        }
    }

    fn random_examples(rng: &mut ChaCha8Rng, n: usize, vocab: u32) -> Vec<Example> {
        (0..n)
            .map(|_| {
                let ls = rng.gen_range(1..6);
                let lt = rng.gen_range(1..6);
                let mut src: Vec<u32> = (0..ls).map(|_| rng.gen_range(4..vocab)).collect();
                src.push(EOS);
                Example { src, tgt: (0..lt).map(|_| rng.gen_range(4..vocab)).collect() }
            })
            .collect()
    }

    #[test]
    fn uniform_logits_give_log_vocab_loss() {
        let v = 11;
        let logits = vec![0.0f64; 3 * v];
        let loss = smoothed_xent(&logits, &[4, 5, 6], v, 0.1, None) / 3.0;
        assert!((loss - (v as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_falls_as_correct_logit_grows() {
        let mut prev = f64::INFINITY;
        for k in 0..20 {
            let mut logits = vec![0.0f64; 5];
            logits[2] = k as f64;
            let loss = smoothed_xent(&logits, &[2], 5, 0.0, None);
            assert!(loss < prev);
            prev = loss;
        }
        assert!(prev < 1e-7);
    }

    #[test]
    fn empty_batch_is_rejected() {
        let p = init_params::<f32>(&small_config(11), 0);
        let b = Batch::new(&[]);
        assert_eq!(loss_and_grad(&p, &b, 0.1, 0).unwrap_err(), ModelError::EmptyBatch);
    }

    #[test]
    fn pad_extension_leaves_loss_unchanged() {
        let cfg = small_config(13);
        let p = init_params::<f64>(&cfg, 4);
        let ex = random_examples(&mut ChaCha8Rng::seed_from_u64(1), 5, 13);
        let a = Batch::new(&ex);
        let b = Batch::padded(&ex, 12, 12).unwrap();
        let la = loss_and_grad(&p, &a, 0.1, 0).unwrap();
        let lb = loss_and_grad(&p, &b, 0.1, 0).unwrap();
        assert!((la.0 - lb.0).abs() < 1e-12);
        assert_eq!(la.1, lb.1);
    }

    #[test]
    fn batch_permutation_permutes_logits() {
        let cfg = small_config(13);
        let p = init_params::<f64>(&cfg, 5);
        let ex = random_examples(&mut ChaCha8Rng::seed_from_u64(2), 4, 13);
        let rev: Vec<Example> = ex.iter().rev().cloned().collect();
        let la = forward(&p, &Batch::new(&ex)).unwrap();
        let lb = forward(&p, &Batch::new(&rev)).unwrap();
        let row = la.len() / 4;
        for i in 0..4 {
            let a = &la.data()[i * row..(i + 1) * row];
            let b = &lb.data()[(3 - i) * row..(4 - i) * row];
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn future_targets_do_not_affect_earlier_logits() {
        let cfg = small_config(13);
        let p = init_params::<f64>(&cfg, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let mut ex = random_examples(&mut rng, 1, 13);
            ex[0].tgt = (0..6).map(|_| rng.gen_range(4..13)).collect();
            let cut = rng.gen_range(1..6);
            let mut changed = ex.clone();
            changed[0].tgt[cut] = if ex[0].tgt[cut] == 4 { 5 } else { 4 };
            let la = forward(&p, &Batch::new(&ex)).unwrap();
            let lb = forward(&p, &Batch::new(&changed)).unwrap();
            // tgt_in position j sees tgt[..j]; positions 0..=cut see no change.
            let upto = (cut + 1) * 13;
            assert_eq!(&la.data()[..upto], &lb.data()[..upto]);
            assert_ne!(&la.data()[upto..], &lb.data()[upto..]);
        }
    }

    #[test]
    fn encoder_output_ignores_decoder_inputs() {
        let cfg = small_config(13);
        let p = init_params::<f64>(&cfg, 7);
        let a = encode_packed(&p, &Packed::single(&[4, 5, 6, EOS], &[1, 7]));
        let b = encode_packed(&p, &Packed::single(&[4, 5, 6, EOS], &[1, 9, 10, 11]));
        assert_eq!(a, b);
    }

    #[test]
    fn dropout_is_seeded_and_changes_loss() {
        let mut cfg = small_config(13);
        cfg.dropout = 0.3;
        let p = init_params::<f32>(&cfg, 8);
        let b = Batch::new(&random_examples(&mut ChaCha8Rng::seed_from_u64(4), 12, 13));
        let a1 = loss_and_grad(&p, &b, 0.1, 1).unwrap();
        let a2 = loss_and_grad(&p, &b, 0.1, 1).unwrap();
        let a3 = loss_and_grad(&p, &b, 0.1, 2).unwrap();
        assert_eq!(a1, a2);
        assert_ne!(a1.0, a3.0);
        let eval = loss_sum(&p, &b, 0.1).unwrap();
        assert_ne!(eval.mean(), a1.0);
    }
}

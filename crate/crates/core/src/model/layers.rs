//! Forward and backward kernels shared by training and decoding.
//!
//! Activations are row-major `[rows, width]` slices. Backward functions add
//! into gradient buffers; callers zero them.

use std::ops::Range;

use super::params::{AttentionParams, FeedForwardParams, LayerNormParams};
use crate::tensor::{add_col_sums, gemm, MatMut, MatRef, Scalar, Tensor};

pub(crate) const NORM_EPS: f64 = 1e-5;

/// `x W + b` for `x: [rows, in]`, `W: [in, out]`.
pub(crate) fn linear<T: Scalar>(x: &[T], rows: usize, w: &Tensor<T>, b: &Tensor<T>) -> Vec<T> {
    let (d_in, d_out) = (w.shape()[0], w.shape()[1]);
    let mut y = Vec::with_capacity(rows * d_out);
    for _ in 0..rows {
        y.extend_from_slice(b.data());
    }
    gemm(T::one(), MatRef::new(x, rows, d_in), w.mat(), T::one(), MatMut::new(&mut y, rows, d_out));
    y
}

/// Accumulates `dW += xᵀ dy`, `db += Σ dy` and, when given, `dx += dy Wᵀ`.
pub(crate) fn linear_backward<T: Scalar>(
    dy: &[T],
    x: &[T],
    rows: usize,
    w: &Tensor<T>,
    dw: &mut Tensor<T>,
    db: &mut Tensor<T>,
    dx: Option<&mut [T]>,
) {
    let (d_in, d_out) = (w.shape()[0], w.shape()[1]);
    gemm(
        T::one(),
        MatRef::new(x, rows, d_in).t(),
        MatRef::new(dy, rows, d_out),
        T::one(),
        MatMut::new(dw.data_mut(), d_in, d_out),
    );
    add_col_sums(db.data_mut(), dy, d_out);
    if let Some(dx) = dx {
        gemm(T::one(), MatRef::new(dy, rows, d_out), w.mat().t(), T::one(), MatMut::new(dx, rows, d_in));
    }
}

pub(crate) struct NormCache<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
}

pub(crate) fn layer_norm<T: Scalar>(x: &[T], width: usize, p: &LayerNormParams<T>) -> (Vec<T>, NormCache<T>) {
    let rows = x.len() / width;
    let eps = T::from_f64_lossy(NORM_EPS);
    let n = T::from_usize(width).unwrap();
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = Vec::with_capacity(rows);
    for ((xr, yr), hr) in x.chunks_exact(width).zip(y.chunks_exact_mut(width)).zip(xhat.chunks_exact_mut(width)) {
        let mean = xr.iter().copied().sum::<T>() / n;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let r = T::one() / (var + eps).sqrt();
        for i in 0..width {
            hr[i] = (xr[i] - mean) * r;
            yr[i] = hr[i] * p.gain.data()[i] + p.bias.data()[i];
        }
        rstd.push(r);
    }
    (y, NormCache { xhat, rstd })
}

/// Inference-only normalization of a single row.
pub(crate) fn layer_norm_row<T: Scalar>(x: &[T], p: &LayerNormParams<T>) -> Vec<T> {
    layer_norm(x, x.len(), p).0
}

pub(crate) fn layer_norm_backward<T: Scalar>(
    dy: &[T],
    cache: &NormCache<T>,
    p: &LayerNormParams<T>,
    dp: &mut LayerNormParams<T>,
    dx: &mut [T],
) {
    let width = p.gain.len();
    let n = T::from_usize(width).unwrap();
    let mut dxhat = vec![T::zero(); width];
    for (row, ((dyr, hr), dxr)) in dy
        .chunks_exact(width)
        .zip(cache.xhat.chunks_exact(width))
        .zip(dx.chunks_exact_mut(width))
        .enumerate()
    {
        let (gain, dgain, dbias) = (p.gain.data(), dp.gain.data_mut(), dp.bias.data_mut());
        let mut mean_d = T::zero();
        let mut mean_dh = T::zero();
        for i in 0..width {
            dgain[i] = dgain[i] + dyr[i] * hr[i];
            dbias[i] = dbias[i] + dyr[i];
            dxhat[i] = dyr[i] * gain[i];
            mean_d = mean_d + dxhat[i];
            mean_dh = mean_dh + dxhat[i] * hr[i];
        }
        let _ = dgain;
        mean_d = mean_d / n;
        mean_dh = mean_dh / n;
        let r = cache.rstd[row];
        for i in 0..width {
            dxr[i] = dxr[i] + r * (dxhat[i] - mean_d - hr[i] * mean_dh);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub(crate) fn gelu<T: Scalar>(u: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let a = T::from_f64_lossy(GELU_A);
    let half = T::from_f64_lossy(0.5);
    half * u * (T::one() + (c * (u + a * u * u * u)).tanh())
}

pub(crate) fn gelu_grad<T: Scalar>(u: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let a = T::from_f64_lossy(GELU_A);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let t = (c * (u + a * u * u * u)).tanh();
    half * (T::one() + t) + half * u * (T::one() - t * t) * c * (T::one() + three * a * u * u)
}

pub(crate) struct FfnCache<T> {
    pre: Vec<T>,
    act: Vec<T>,
}

pub(crate) fn feed_forward<T: Scalar>(h: &[T], rows: usize, p: &FeedForwardParams<T>) -> (Vec<T>, FfnCache<T>) {
    let pre = linear(h, rows, &p.w1, &p.b1);
    let act: Vec<T> = pre.iter().map(|&u| gelu(u)).collect();
    let y = linear(&act, rows, &p.w2, &p.b2);
    (y, FfnCache { pre, act })
}

pub(crate) fn feed_forward_backward<T: Scalar>(
    dy: &[T],
    h: &[T],
    rows: usize,
    cache: &FfnCache<T>,
    p: &FeedForwardParams<T>,
    dp: &mut FeedForwardParams<T>,
    dh: &mut [T],
) {
    let mut dact = vec![T::zero(); cache.act.len()];
    linear_backward(dy, &cache.act, rows, &p.w2, &mut dp.w2, &mut dp.b2, Some(&mut dact));
    for (g, &u) in dact.iter_mut().zip(&cache.pre) {
        *g = *g * gelu_grad(u);
    }
    linear_backward(&dact, h, rows, &p.w1, &mut dp.w1, &mut dp.b1, Some(dh));
}

/// One attention problem inside a packed batch: query rows attend to key
/// rows of the same sentence.
#[derive(Clone, Debug)]
pub(crate) struct Segment {
    pub q: Range<usize>,
    pub k: Range<usize>,
}

pub(crate) struct AttnCache<T> {
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    ctx: Vec<T>,
    /// Softmax probabilities, per segment then per head, `[tq, tk]` each.
    probs: Vec<T>,
}

fn softmax_row<T: Scalar>(row: &mut [T], visible: usize) {
    let max = row[..visible].iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in &mut row[..visible] {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in &mut row[..visible] {
        *v = *v / sum;
    }
    for v in &mut row[visible..] {
        *v = T::zero();
    }
}

/// Multi-head attention over packed sequences. With `causal`, query `i`
/// of a segment only sees keys `0..=i`.
pub(crate) fn attention<T: Scalar>(
    p: &AttentionParams<T>,
    q_in: &[T],
    kv_in: &[T],
    segments: &[Segment],
    n_heads: usize,
    causal: bool,
) -> (Vec<T>, AttnCache<T>) {
    let d = p.wq.shape()[0];
    let dh = d / n_heads;
    let (nq, nk) = (q_in.len() / d, kv_in.len() / d);
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let q = linear(q_in, nq, &p.wq, &p.bq);
    let k = linear(kv_in, nk, &p.wk, &p.bk);
    let v = linear(kv_in, nk, &p.wv, &p.bv);
    let prob_len: usize = segments.iter().map(|s| s.q.len() * s.k.len() * n_heads).sum();
    let mut probs = vec![T::zero(); prob_len];
    let mut ctx = vec![T::zero(); nq * d];
    let mut off = 0;
    for seg in segments {
        let (tq, tk) = (seg.q.len(), seg.k.len());
        for h in 0..n_heads {
            let pm = &mut probs[off..off + tq * tk];
            off += tq * tk;
            let qh = MatRef::strided(&q[seg.q.start * d + h * dh..], tq, dh, d, 1);
            let kh = MatRef::strided(&k[seg.k.start * d + h * dh..], tk, dh, d, 1);
            gemm(scale, qh, kh.t(), T::zero(), MatMut::new(pm, tq, tk));
            for (i, row) in pm.chunks_exact_mut(tk).enumerate() {
                let visible = if causal { (i + 1).min(tk) } else { tk };
                softmax_row(row, visible);
            }
            let vh = MatRef::strided(&v[seg.k.start * d + h * dh..], tk, dh, d, 1);
            let ch = MatMut::strided(&mut ctx[seg.q.start * d + h * dh..], tq, dh, d, 1);
            gemm(T::one(), MatRef::new(pm, tq, tk), vh, T::zero(), ch);
        }
    }
    let out = linear(&ctx, nq, &p.wo, &p.bo);
    (out, AttnCache { q, k, v, ctx, probs })
}

/// Backward of [`attention`]; adds into `dq_in` and `dkv_in` (which may be
/// the same logical input for self-attention, handled by the caller).
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward<T: Scalar>(
    dout: &[T],
    p: &AttentionParams<T>,
    dp: &mut AttentionParams<T>,
    cache: &AttnCache<T>,
    q_in: &[T],
    kv_in: &[T],
    segments: &[Segment],
    n_heads: usize,
    dq_in: &mut [T],
    dkv_in: &mut [T],
) {
    let d = p.wq.shape()[0];
    let dh = d / n_heads;
    let (nq, nk) = (q_in.len() / d, kv_in.len() / d);
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();

    let mut dctx = vec![T::zero(); nq * d];
    linear_backward(dout, &cache.ctx, nq, &p.wo, &mut dp.wo, &mut dp.bo, Some(&mut dctx));

    let mut dq = vec![T::zero(); nq * d];
    let mut dk = vec![T::zero(); nk * d];
    let mut dv = vec![T::zero(); nk * d];
    let mut off = 0;
    let mut dprob = Vec::new();
    for seg in segments {
        let (tq, tk) = (seg.q.len(), seg.k.len());
        for h in 0..n_heads {
            let pm = &cache.probs[off..off + tq * tk];
            off += tq * tk;
            let qo = seg.q.start * d + h * dh;
            let ko = seg.k.start * d + h * dh;
            let dch = MatRef::strided(&dctx[qo..], tq, dh, d, 1);
            let vh = MatRef::strided(&cache.v[ko..], tk, dh, d, 1);
            // dV_h = Pᵀ dctx_h
            gemm(
                T::one(),
                MatRef::new(pm, tq, tk).t(),
                dch,
                T::one(),
                MatMut::strided(&mut dv[ko..], tk, dh, d, 1),
            );
            // dP = dctx_h V_hᵀ, then through the softmax
            dprob.clear();
            dprob.resize(tq * tk, T::zero());
            gemm(T::one(), dch, vh.t(), T::zero(), MatMut::new(&mut dprob, tq, tk));
            for (prow, drow) in pm.chunks_exact(tk).zip(dprob.chunks_exact_mut(tk)) {
                let dot = prow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum::<T>();
                for (dr, &pr) in drow.iter_mut().zip(prow) {
                    *dr = pr * (*dr - dot);
                }
            }
            let ds = MatRef::new(&dprob, tq, tk);
            let qh = MatRef::strided(&cache.q[qo..], tq, dh, d, 1);
            let kh = MatRef::strided(&cache.k[ko..], tk, dh, d, 1);
            gemm(scale, ds, kh, T::one(), MatMut::strided(&mut dq[qo..], tq, dh, d, 1));
            gemm(scale, ds.t(), qh, T::one(), MatMut::strided(&mut dk[ko..], tk, dh, d, 1));
        }
    }
    linear_backward(&dq, q_in, nq, &p.wq, &mut dp.wq, &mut dp.bq, Some(dq_in));
    linear_backward(&dk, kv_in, nk, &p.wk, &mut dp.wk, &mut dp.bk, Some(&mut *dkv_in));
    linear_backward(&dv, kv_in, nk, &p.wv, &mut dp.wv, &mut dp.bv, Some(dkv_in));
}

/// Single-query attention against cached keys/values `[t, d]`.
pub(crate) fn attend_row<T: Scalar>(q: &[T], k: &[T], v: &[T], n_heads: usize) -> Vec<T> {
    let d = q.len();
    let dh = d / n_heads;
    let t = k.len() / d;
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let mut ctx = vec![T::zero(); d];
    let mut scores = vec![T::zero(); t];
    for h in 0..n_heads {
        let qh = MatRef::strided(&q[h * dh..], 1, dh, d, 1);
        let kh = MatRef::strided(&k[h * dh..], t, dh, d, 1);
        gemm(scale, qh, kh.t(), T::zero(), MatMut::new(&mut scores, 1, t));
        softmax_row(&mut scores, t);
        let vh = MatRef::strided(&v[h * dh..], t, dh, d, 1);
        gemm(T::one(), MatRef::new(&scores, 1, t), vh, T::zero(), MatMut::new(&mut ctx[h * dh..], 1, dh));
    }
    ctx
}

/// Fixed sinusoidal position encoding for one position.
pub(crate) fn position_encoding<T: Scalar>(pos: usize, d: usize, out: &mut [T]) {
    for i in (0..d).step_by(2) {
        let angle = pos as f64 / 10_000f64.powf(i as f64 / d as f64);
        out[i] = T::from_f64_lossy(angle.sin());
        if i + 1 < d {
            out[i + 1] = T::from_f64_lossy(angle.cos());
        }
    }
}

/// Numerically stable log-softmax of one row.
pub(crate) fn log_softmax<T: Scalar>(row: &[T]) -> Vec<T> {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
    row.iter().map(|&v| v - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_grad_matches_difference_quotient() {
        for &u in &[-3.0f64, -0.7, 0.0, 0.3, 2.5] {
            let h = 1e-6;
            let fd = (gelu(u + h) - gelu(u - h)) / (2.0 * h);
            assert!((fd - gelu_grad(u)).abs() < 1e-8);
        }
    }

    #[test]
    fn log_softmax_normalizes() {
        let lp = log_softmax(&[1.0f64, 2.0, -3.0, 0.5]);
        let s: f64 = lp.iter().map(|v| v.exp()).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn causal_softmax_hides_future() {
        let mut row = vec![1.0f64, 2.0, 3.0];
        softmax_row(&mut row, 1);
        assert_eq!(row, vec![1.0, 0.0, 0.0]);
    }
}

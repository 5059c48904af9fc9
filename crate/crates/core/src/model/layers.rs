//! Layer primitives with hand-written backward passes.

use std::ops::Range;

use rand::Rng as _;

use crate::linalg::{gemm_acc, linear, linear_backward, softmax_in_place, transpose, Real};
use crate::model::params::{grad_of, ParamId, ParamStore};
use crate::rng::Rng;

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
pub struct LnIds {
    pub g: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct AttnIds {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct FfnIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Debug, Default)]
pub struct LnCache<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
    pub out: Vec<T>,
}

pub fn layer_norm<T: Real>(x: &[T], g: &[T], b: &[T], d: usize) -> LnCache<T> {
    let rows = x.len() / d;
    let mut c = LnCache {
        xhat: vec![T::zero(); x.len()],
        rstd: vec![T::zero(); rows],
        out: vec![T::zero(); x.len()],
    };
    let inv_d = T::one() / T::of(d as f64);
    let eps = T::of(LN_EPS);
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mut mean = T::zero();
        for &v in xr {
            mean += v;
        }
        mean *= inv_d;
        let mut var = T::zero();
        for &v in xr {
            var += (v - mean) * (v - mean);
        }
        var *= inv_d;
        let rstd = T::one() / (var + eps).sqrt();
        c.rstd[r] = rstd;
        let xh = &mut c.xhat[r * d..(r + 1) * d];
        let o = &mut c.out[r * d..(r + 1) * d];
        for i in 0..d {
            xh[i] = (xr[i] - mean) * rstd;
            o[i] = g[i] * xh[i] + b[i];
        }
    }
    c
}

/// Accumulates into `dx`.
pub fn layer_norm_backward<T: Real>(
    dy: &[T],
    c: &LnCache<T>,
    g: &[T],
    d: usize,
    dx: &mut [T],
    dg: &mut [T],
    db: &mut [T],
) {
    let inv_d = T::one() / T::of(d as f64);
    let mut dxhat = vec![T::zero(); d];
    for (r, &rstd) in c.rstd.iter().enumerate() {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &c.xhat[r * d..(r + 1) * d];
        let mut m1 = T::zero();
        let mut m2 = T::zero();
        for i in 0..d {
            dg[i] += dyr[i] * xh[i];
            db[i] += dyr[i];
            dxhat[i] = dyr[i] * g[i];
            m1 += dxhat[i];
            m2 += dxhat[i] * xh[i];
        }
        m1 *= inv_d;
        m2 *= inv_d;
        let dxr = &mut dx[r * d..(r + 1) * d];
        for i in 0..d {
            dxr[i] += rstd * (dxhat[i] - m1 - xh[i] * m2);
        }
    }
}

pub fn layer_norm_params<'a, T: Real>(p: &'a ParamStore<T>, ids: &LnIds) -> (&'a [T], &'a [T]) {
    (p.t(ids.g), p.t(ids.b))
}

/// How many keys a query row may see.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KeyLimit {
    Full,
    Causal,
    /// The first `n` rows see each other; later rows are causal.
    PrefixBidirectional(usize),
}

impl KeyLimit {
    #[inline]
    pub fn limit(self, i: usize, m: usize) -> usize {
        match self {
            KeyLimit::Full => m,
            KeyLimit::Causal => (i + 1).min(m),
            KeyLimit::PrefixBidirectional(p) => {
                if i < p {
                    p.min(m)
                } else {
                    (i + 1).min(m)
                }
            }
        }
    }
}

/// One attention block: query rows `q` attend to key rows `kv`.
#[derive(Clone, Debug)]
pub struct AttnSeg {
    pub q: Range<usize>,
    pub kv: Range<usize>,
    pub mask: KeyLimit,
}

/// Head slice `off..off+dh` of rows `rows` of an `n×d` matrix, as `rows×dh`.
pub fn gather_head<T: Real>(x: &[T], rows: Range<usize>, d: usize, off: usize, dh: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(rows.len() * dh);
    for r in rows {
        out.extend_from_slice(&x[r * d + off..r * d + off + dh]);
    }
    out
}

/// Same slice transposed, as `dh×rows`.
pub fn gather_head_t<T: Real>(x: &[T], rows: Range<usize>, d: usize, off: usize, dh: usize) -> Vec<T> {
    let n = rows.len();
    let mut out = vec![T::zero(); n * dh];
    for (j, r) in rows.enumerate() {
        for t in 0..dh {
            out[t * n + j] = x[r * d + off + t];
        }
    }
    out
}

fn scatter_add<T: Real>(src: &[T], x: &mut [T], rows: Range<usize>, d: usize, off: usize, dh: usize) {
    for (i, r) in rows.enumerate() {
        for (a, &b) in x[r * d + off..r * d + off + dh].iter_mut().zip(&src[i * dh..(i + 1) * dh]) {
            *a += b;
        }
    }
}

/// Scaled dot-product attention of one head for a block of query rows.
/// `qh` is `rows×dh`, `kt` is `dh×nk` (keys transposed), `vh` is `nk×dh`.
/// Row `i` sees keys `0..limits[i]`. Writes probabilities (`rows×nk`, zero
/// past the limit) and context (`rows×dh`). Training and incremental decoding
/// both go through here.
#[allow(clippy::too_many_arguments)]
pub fn attend_block<T: Real>(
    qh: &[T],
    kt: &[T],
    vh: &[T],
    dh: usize,
    nk: usize,
    limits: &[usize],
    scale: T,
    probs: &mut [T],
    ctx: &mut [T],
) {
    let rows = limits.len();
    let probs = &mut probs[..rows * nk];
    probs.fill(T::zero());
    gemm_acc(qh, kt, rows, dh, nk, probs);
    for (row, &lim) in probs.chunks_exact_mut(nk).zip(limits) {
        for v in &mut row[..lim] {
            *v *= scale;
        }
        softmax_in_place(&mut row[..lim]);
        row[lim..].fill(T::zero());
    }
    let ctx = &mut ctx[..rows * dh];
    ctx.fill(T::zero());
    gemm_acc(probs, vh, rows, nk, dh, ctx);
}

#[derive(Clone, Debug, Default)]
pub struct AttnCache<T> {
    pub q: Vec<T>,
    pub k: Vec<T>,
    pub v: Vec<T>,
    pub ctx: Vec<T>,
    /// Per segment: `heads × nq × nk` probabilities, zero beyond the key limit.
    pub probs: Vec<Vec<T>>,
}

pub fn attention<T: Real>(
    p: &ParamStore<T>,
    ids: &AttnIds,
    xq: &[T],
    xkv: &[T],
    segs: &[AttnSeg],
    d: usize,
    heads: usize,
) -> (Vec<T>, AttnCache<T>) {
    let nq = xq.len() / d;
    let nkv = xkv.len() / d;
    let mut c = AttnCache {
        q: vec![T::zero(); nq * d],
        k: vec![T::zero(); nkv * d],
        v: vec![T::zero(); nkv * d],
        ctx: vec![T::zero(); nq * d],
        probs: Vec::with_capacity(segs.len()),
    };
    linear(xq, p.t(ids.wq), Some(p.t(ids.bq)), d, d, &mut c.q);
    linear(xkv, p.t(ids.wk), Some(p.t(ids.bk)), d, d, &mut c.k);
    linear(xkv, p.t(ids.wv), Some(p.t(ids.bv)), d, d, &mut c.v);
    let dh = d / heads;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut ctx_h = Vec::new();
    for seg in segs {
        let (sq, sk) = (seg.q.len(), seg.kv.len());
        let mut probs = vec![T::zero(); heads * sq * sk];
        let limits: Vec<usize> = (0..sq).map(|i| seg.mask.limit(i, sk)).collect();
        ctx_h.resize(sq * dh, T::zero());
        for h in 0..heads {
            let off = h * dh;
            let qh = gather_head(&c.q, seg.q.clone(), d, off, dh);
            let kt = gather_head_t(&c.k, seg.kv.clone(), d, off, dh);
            let vh = gather_head(&c.v, seg.kv.clone(), d, off, dh);
            let ph = &mut probs[h * sq * sk..(h + 1) * sq * sk];
            attend_block(&qh, &kt, &vh, dh, sk, &limits, scale, ph, &mut ctx_h);
            scatter_add(&ctx_h, &mut c.ctx, seg.q.clone(), d, off, dh);
        }
        c.probs.push(probs);
    }
    let mut out = vec![T::zero(); nq * d];
    linear(&c.ctx, p.t(ids.wo), Some(p.t(ids.bo)), d, d, &mut out);
    (out, c)
}

/// Returns `(dxq, dxkv)`.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward<T: Real>(
    p: &ParamStore<T>,
    ids: &AttnIds,
    grads: &mut [T],
    c: &AttnCache<T>,
    xq: &[T],
    xkv: &[T],
    segs: &[AttnSeg],
    d: usize,
    heads: usize,
    dout: &[T],
) -> (Vec<T>, Vec<T>) {
    let nq = xq.len() / d;
    let nkv = xkv.len() / d;
    let mut dctx = vec![T::zero(); nq * d];
    linear_into(p, grads, ids.wo, ids.bo, &c.ctx, dout, d, d, &mut dctx);
    let mut dq = vec![T::zero(); nq * d];
    let mut dk = vec![T::zero(); nkv * d];
    let mut dv = vec![T::zero(); nkv * d];
    let dh = d / heads;
    let scale = T::one() / T::of(dh as f64).sqrt();
    for (seg, probs) in segs.iter().zip(&c.probs) {
        let (sq, sk) = (seg.q.len(), seg.kv.len());
        for h in 0..heads {
            let off = h * dh;
            let pr = &probs[h * sq * sk..(h + 1) * sq * sk];
            let dc = gather_head(&dctx, seg.q.clone(), d, off, dh);
            let vt = gather_head_t(&c.v, seg.kv.clone(), d, off, dh);
            let mut dp = vec![T::zero(); sq * sk];
            gemm_acc(&dc, &vt, sq, dh, sk, &mut dp);
            let pt = transpose(pr, sq, sk);
            let mut dvh = vec![T::zero(); sk * dh];
            gemm_acc(&pt, &dc, sk, sq, dh, &mut dvh);
            scatter_add(&dvh, &mut dv, seg.kv.clone(), d, off, dh);
            for (prow, drow) in pr.chunks_exact(sk).zip(dp.chunks_exact_mut(sk)) {
                let mut s = T::zero();
                for (&a, &b) in prow.iter().zip(drow.iter()) {
                    s += a * b;
                }
                for (&a, b) in prow.iter().zip(drow.iter_mut()) {
                    *b = a * (*b - s) * scale;
                }
            }
            let kh = gather_head(&c.k, seg.kv.clone(), d, off, dh);
            let mut dqh = vec![T::zero(); sq * dh];
            gemm_acc(&dp, &kh, sq, sk, dh, &mut dqh);
            scatter_add(&dqh, &mut dq, seg.q.clone(), d, off, dh);
            let qh = gather_head(&c.q, seg.q.clone(), d, off, dh);
            let dst = transpose(&dp, sq, sk);
            let mut dkh = vec![T::zero(); sk * dh];
            gemm_acc(&dst, &qh, sk, sq, dh, &mut dkh);
            scatter_add(&dkh, &mut dk, seg.kv.clone(), d, off, dh);
        }
    }
    let mut dxq = vec![T::zero(); nq * d];
    let mut dxkv = vec![T::zero(); nkv * d];
    linear_into(p, grads, ids.wq, ids.bq, xq, &dq, d, d, &mut dxq);
    linear_into(p, grads, ids.wk, ids.bk, xkv, &dk, d, d, &mut dxkv);
    linear_into(p, grads, ids.wv, ids.bv, xkv, &dv, d, d, &mut dxkv);
    (dxq, dxkv)
}

/// Backward of a biased linear layer writing parameter gradients in place.
#[allow(clippy::too_many_arguments)]
pub fn linear_into<T: Real>(
    p: &ParamStore<T>,
    grads: &mut [T],
    w: ParamId,
    b: ParamId,
    x: &[T],
    dy: &[T],
    k: usize,
    m: usize,
    dx: &mut [T],
) {
    let (ws, bs) = (p.spec(w).clone(), p.spec(b).clone());
    let mut db = vec![T::zero(); m];
    linear_backward(x, p.t(w), dy, k, m, Some(dx), grad_of(grads, &ws), Some(&mut db));
    for (g, v) in grad_of(grads, &bs).iter_mut().zip(db) {
        *g += v;
    }
}

/// Position-wise feed-forward: `relu(x·W1 + b1)·W2 + b2`. Returns output and
/// the post-activation hidden layer.
pub fn ffn<T: Real>(p: &ParamStore<T>, ids: &FfnIds, x: &[T], d: usize, f: usize) -> (Vec<T>, Vec<T>) {
    let n = x.len() / d;
    let mut h = vec![T::zero(); n * f];
    linear(x, p.t(ids.w1), Some(p.t(ids.b1)), d, f, &mut h);
    for v in h.iter_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
    let mut out = vec![T::zero(); n * d];
    linear(&h, p.t(ids.w2), Some(p.t(ids.b2)), f, d, &mut out);
    (out, h)
}

#[allow(clippy::too_many_arguments)]
pub fn ffn_backward<T: Real>(
    p: &ParamStore<T>,
    ids: &FfnIds,
    grads: &mut [T],
    x: &[T],
    h: &[T],
    dout: &[T],
    d: usize,
    f: usize,
) -> Vec<T> {
    let mut dh = vec![T::zero(); h.len()];
    linear_into(p, grads, ids.w2, ids.b2, h, dout, f, d, &mut dh);
    for (g, &hv) in dh.iter_mut().zip(h) {
        if hv <= T::zero() {
            *g = T::zero();
        }
    }
    let mut dx = vec![T::zero(); x.len()];
    linear_into(p, grads, ids.w1, ids.b1, x, &dh, d, f, &mut dx);
    dx
}

/// Inverted-dropout multipliers: 0 with probability `p`, else `1/(1-p)`.
pub fn dropout_mask<T: Real>(n: usize, p: f64, rng: &mut Rng) -> Vec<T> {
    let keep = T::of(1.0 / (1.0 - p));
    let cut = (p * 4294967296.0) as u64;
    (0..n)
        .map(|_| if (rng.gen::<u32>() as u64) < cut { T::zero() } else { keep })
        .collect()
}

#[inline]
pub fn apply_mask<T: Real>(x: &mut [T], mask: Option<&Vec<T>>) {
    if let Some(m) = mask {
        for (v, &k) in x.iter_mut().zip(m) {
            *v *= k;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_limits() {
        assert_eq!(KeyLimit::Full.limit(0, 5), 5);
        assert_eq!(KeyLimit::Causal.limit(2, 5), 3);
        assert_eq!(KeyLimit::PrefixBidirectional(3).limit(0, 6), 3);
        assert_eq!(KeyLimit::PrefixBidirectional(3).limit(4, 6), 5);
    }

    #[test]
    fn layer_norm_normalizes() {
        let x = vec![1.0f64, 2.0, 3.0, 4.0, -1.0, 0.0, 1.0, 2.0];
        let g = vec![1.0; 4];
        let b = vec![0.0; 4];
        let c = layer_norm(&x, &g, &b, 4);
        for r in 0..2 {
            let row = &c.out[r * 4..(r + 1) * 4];
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn layer_norm_gradient_matches_finite_differences() {
        let d = 5;
        let x: Vec<f64> = (0..10).map(|i| ((i * 7) as f64 * 0.3).sin()).collect();
        let g: Vec<f64> = (0..d).map(|i| 1.0 + i as f64 * 0.1).collect();
        let b: Vec<f64> = (0..d).map(|i| i as f64 * 0.05).collect();
        let w: Vec<f64> = (0..10).map(|i| (i as f64 * 0.9).cos()).collect();
        let loss = |x: &[f64]| -> f64 {
            let c = layer_norm(x, &g, &b, d);
            c.out.iter().zip(&w).map(|(a, b)| a * b).sum()
        };
        let c = layer_norm(&x, &g, &b, d);
        let mut dx = vec![0.0; 10];
        let (mut dg, mut db) = (vec![0.0; d], vec![0.0; d]);
        layer_norm_backward(&w, &c, &g, d, &mut dx, &mut dg, &mut db);
        for i in 0..10 {
            let mut xp = x.clone();
            xp[i] += 1e-6;
            let mut xm = x.clone();
            xm[i] -= 1e-6;
            let num = (loss(&xp) - loss(&xm)) / 2e-6;
            assert!((num - dx[i]).abs() < 1e-6, "{i}: {num} vs {}", dx[i]);
        }
    }

    #[test]
    fn dropout_mask_is_scaled() {
        let mut r = crate::rng::rng(1);
        let m: Vec<f64> = dropout_mask(1000, 0.1, &mut r);
        assert!(m.iter().all(|&v| v == 0.0 || (v - 1.0 / 0.9).abs() < 1e-12));
        let zeros = m.iter().filter(|&&v| v == 0.0).count();
        assert!((50..150).contains(&zeros));
    }
}

//! Incremental decoding with cached keys and values.

use crate::error::{Error, Result};
use crate::linalg::{linear, Real};
use crate::model::input::{DecoderInput, EncoderInput, Example};
use crate::model::layers::*;
use crate::model::transformer::{EmbedRow, Transformer};

#[derive(Clone, Debug)]
pub struct EncoderState<T> {
    pub out: Vec<T>,
    pub len: usize,
    /// Per decoder layer and head: keys transposed (`dh×n`) and values (`n×dh`).
    cross_kt: Vec<Vec<Vec<T>>>,
    cross_vh: Vec<Vec<Vec<T>>>,
}

#[derive(Clone, Debug)]
pub struct DecoderState<T> {
    k: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    pub len: usize,
    mask: KeyLimit,
}

#[derive(Clone, Debug, Default)]
pub struct StepOut<T> {
    /// `rows × vocab`.
    pub logits: Vec<T>,
    /// Last-layer cross-attention per fed row, averaged over heads.
    pub cross: Vec<Vec<f64>>,
}

impl<T: Real> Transformer<T> {
    pub fn encode(&self, enc: &EncoderInput) -> Result<EncoderState<T>> {
        if enc.is_empty() {
            return Err(Error::Empty("source"));
        }
        let ex = Example {
            enc: enc.clone(),
            dec: DecoderInput::default(),
        };
        let rows = self.encoder_rows(&ex);
        self.check_rows(&rows)?;
        let (d, h, f) = (self.config.hidden_dim, self.config.heads, self.config.ffn_dim);
        let p = &self.params;
        let n = rows.len();
        let segs = [AttnSeg {
            q: 0..n,
            kv: 0..n,
            mask: KeyLimit::Full,
        }];
        let mut x = self.embed(&rows);
        for l in &self.layout.enc {
            let (g, b) = layer_norm_params(p, &l.ln1);
            let ln1 = layer_norm(&x, g, b, d);
            let (a, _) = attention(p, &l.attn, &ln1.out, &ln1.out, &segs, d, h);
            let x1: Vec<T> = x.iter().zip(&a).map(|(&u, &v)| u + v).collect();
            let (g, b) = layer_norm_params(p, &l.ln2);
            let ln2 = layer_norm(&x1, g, b, d);
            let (y, _) = ffn(p, &l.ffn, &ln2.out, d, f);
            x = x1.iter().zip(&y).map(|(&u, &v)| u + v).collect();
        }
        let (g, b) = layer_norm_params(p, &self.layout.enc_ln);
        let out = layer_norm(&x, g, b, d).out;
        let dh = d / h;
        let mut cross_kt = Vec::new();
        let mut cross_vh = Vec::new();
        for l in &self.layout.dec {
            let mut k = vec![T::zero(); n * d];
            let mut v = vec![T::zero(); n * d];
            linear(&out, p.t(l.cross.wk), Some(p.t(l.cross.bk)), d, d, &mut k);
            linear(&out, p.t(l.cross.wv), Some(p.t(l.cross.bv)), d, d, &mut v);
            cross_kt.push((0..h).map(|hh| gather_head_t(&k, 0..n, d, hh * dh, dh)).collect());
            cross_vh.push((0..h).map(|hh| gather_head(&v, 0..n, d, hh * dh, dh)).collect());
        }
        Ok(EncoderState {
            out,
            len: n,
            cross_kt,
            cross_vh,
        })
    }

    /// Empty decoder state; `prefix_len` selects the self-attention mask.
    pub fn start(&self, prefix_len: usize) -> DecoderState<T> {
        let nl = self.config.layers;
        DecoderState {
            k: vec![Vec::new(); nl],
            v: vec![Vec::new(); nl],
            len: 0,
            mask: self.self_mask(prefix_len),
        }
    }

    /// Appends `rows` to the decoder state and returns their logits. A
    /// bidirectional prefix must be fed as one block.
    pub fn feed(&self, enc: &EncoderState<T>, st: &mut DecoderState<T>, rows: &[EmbedRow], record_cross: bool) -> Result<StepOut<T>> {
        self.check_rows(rows)?;
        let cfg = &self.config;
        let (d, h, f, vsz) = (cfg.hidden_dim, cfg.heads, cfg.ffn_dim, cfg.vocab_size);
        let dh = d / h;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let p = &self.params;
        let b = rows.len();
        let s = st.len;
        let mut out = StepOut::default();
        let mut probs = vec![T::zero(); b * (s + b).max(enc.len)];
        let mut ctx_h = vec![T::zero(); b * dh];
        let mut x = self.embed(rows);
        let last = self.layout.dec.len() - 1;
        for (li, l) in self.layout.dec.iter().enumerate() {
            let (g, bb) = layer_norm_params(p, &l.ln1);
            let ln1 = layer_norm(&x, g, bb, d);
            let a = &l.self_attn;
            let mut q = vec![T::zero(); b * d];
            let mut k = vec![T::zero(); b * d];
            let mut v = vec![T::zero(); b * d];
            linear(&ln1.out, p.t(a.wq), Some(p.t(a.bq)), d, d, &mut q);
            linear(&ln1.out, p.t(a.wk), Some(p.t(a.bk)), d, d, &mut k);
            linear(&ln1.out, p.t(a.wv), Some(p.t(a.bv)), d, d, &mut v);
            st.k[li].extend_from_slice(&k);
            st.v[li].extend_from_slice(&v);
            let mut ctx = vec![T::zero(); b * d];
            let mut o = vec![T::zero(); b * d];
            let nk = s + b;
            let limits: Vec<usize> = (0..b).map(|i| st.mask.limit(s + i, nk)).collect();
            for hh in 0..h {
                let off = hh * dh;
                let qh = gather_head(&q, 0..b, d, off, dh);
                let kt = gather_head_t(&st.k[li], 0..nk, d, off, dh);
                let vh = gather_head(&st.v[li], 0..nk, d, off, dh);
                attend_block(&qh, &kt, &vh, dh, nk, &limits, scale, &mut probs, &mut ctx_h);
                scatter(&ctx_h, &mut ctx, b, d, off, dh);
            }
            linear(&ctx, p.t(a.wo), Some(p.t(a.bo)), d, d, &mut o);
            let x1: Vec<T> = x.iter().zip(&o).map(|(&u, &w)| u + w).collect();

            let (g, bb) = layer_norm_params(p, &l.ln2);
            let ln2 = layer_norm(&x1, g, bb, d);
            let c = &l.cross;
            linear(&ln2.out, p.t(c.wq), Some(p.t(c.bq)), d, d, &mut q);
            let limits = vec![enc.len; b];
            let mut avg = vec![0.0; if record_cross && li == last { b * enc.len } else { 0 }];
            for hh in 0..h {
                let off = hh * dh;
                let qh = gather_head(&q, 0..b, d, off, dh);
                attend_block(
                    &qh,
                    &enc.cross_kt[li][hh],
                    &enc.cross_vh[li][hh],
                    dh,
                    enc.len,
                    &limits,
                    scale,
                    &mut probs,
                    &mut ctx_h,
                );
                scatter(&ctx_h, &mut ctx, b, d, off, dh);
                for (a, pr) in avg.iter_mut().zip(&probs) {
                    *a += pr.as_f64() / h as f64;
                }
            }
            out.cross.extend(avg.chunks(enc.len.max(1)).map(<[f64]>::to_vec));
            linear(&ctx, p.t(c.wo), Some(p.t(c.bo)), d, d, &mut o);
            let x2: Vec<T> = x1.iter().zip(&o).map(|(&u, &w)| u + w).collect();

            let (g, bb) = layer_norm_params(p, &l.ln3);
            let ln3 = layer_norm(&x2, g, bb, d);
            let (y, _) = ffn(p, &l.ffn, &ln3.out, d, f);
            x = x2.iter().zip(&y).map(|(&u, &w)| u + w).collect();
        }
        st.len += b;
        let (g, bb) = layer_norm_params(p, &self.layout.dec_ln);
        let hfin = layer_norm(&x, g, bb, d).out;
        out.logits = vec![T::zero(); b * vsz];
        linear(
            &hfin,
            p.t(self.layout.out_w),
            Some(p.t(self.layout.out_b)),
            d,
            vsz,
            &mut out.logits,
        );
        Ok(out)
    }
}

fn scatter<T: Real>(src: &[T], x: &mut [T], rows: usize, d: usize, off: usize, dh: usize) {
    for i in 0..rows {
        x[i * d + off..i * d + off + dh].copy_from_slice(&src[i * dh..(i + 1) * dh]);
    }
}

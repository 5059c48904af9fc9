//! Pre-LN transformer encoder-decoder over packed batches, with an analytic
//! backward pass.
//!
//! Every row-wise operation (embedding, layer norm, linear maps, per-row
//! attention) treats rows independently, so a row's activations depend only on
//! the rows it may attend to. Incremental decoding relies on this to reproduce
//! teacher-forced logits exactly.

use crate::error::{Error, Result};
use crate::linalg::{linear, log_sum_exp, Real};
use crate::model::config::ModelConfig;
use crate::model::input::{Example, PosTable};
use crate::model::layers::*;
use crate::model::params::{grad_of, ParamId, ParamStore};
use crate::rng::Rng;

pub const N_TYPES: usize = 4;

#[derive(Clone, Debug)]
pub struct EncLayer {
    pub ln1: LnIds,
    pub attn: AttnIds,
    pub ln2: LnIds,
    pub ffn: FfnIds,
}

#[derive(Clone, Debug)]
pub struct DecLayer {
    pub ln1: LnIds,
    pub self_attn: AttnIds,
    pub ln2: LnIds,
    pub cross: AttnIds,
    pub ln3: LnIds,
    pub ffn: FfnIds,
}

#[derive(Clone, Debug)]
pub struct Layout {
    pub tok_emb: ParamId,
    pub type_emb: ParamId,
    pub pos_src: ParamId,
    pub pos_ce: ParamId,
    pub pos_e: ParamId,
    pub rel_cand: ParamId,
    pub enc: Vec<EncLayer>,
    pub enc_ln: LnIds,
    pub dec: Vec<DecLayer>,
    pub dec_ln: LnIds,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

fn add_ln<T: Real>(p: &mut ParamStore<T>, name: &str, d: usize) -> LnIds {
    LnIds {
        g: p.add(&format!("{name}.g"), &[d]),
        b: p.add(&format!("{name}.b"), &[d]),
    }
}

fn add_attn<T: Real>(p: &mut ParamStore<T>, name: &str, d: usize) -> AttnIds {
    let mut lin = |n: &str| {
        (
            p.add(&format!("{name}.w{n}"), &[d, d]),
            p.add(&format!("{name}.b{n}"), &[d]),
        )
    };
    let (wq, bq) = lin("q");
    let (wk, bk) = lin("k");
    let (wv, bv) = lin("v");
    let (wo, bo) = lin("o");
    AttnIds {
        wq,
        bq,
        wk,
        bk,
        wv,
        bv,
        wo,
        bo,
    }
}

fn add_ffn<T: Real>(p: &mut ParamStore<T>, name: &str, d: usize, f: usize) -> FfnIds {
    FfnIds {
        w1: p.add(&format!("{name}.w1"), &[d, f]),
        b1: p.add(&format!("{name}.b1"), &[f]),
        w2: p.add(&format!("{name}.w2"), &[f, d]),
        b2: p.add(&format!("{name}.b2"), &[d]),
    }
}

impl Layout {
    pub fn build<T: Real>(cfg: &ModelConfig) -> (Layout, ParamStore<T>) {
        let d = cfg.hidden_dim;
        let f = cfg.ffn_dim;
        let mut p = ParamStore::default();
        let tok_emb = p.add("tok_emb", &[cfg.vocab_size, d]);
        let type_emb = p.add("type_emb", &[N_TYPES, d]);
        let pos_src = p.add("pos_src", &[cfg.max_src_len, d]);
        let pos_ce = p.add("pos_ce", &[cfg.max_prefix_len, d]);
        let pos_e = p.add("pos_e", &[cfg.max_tgt_len, d]);
        let rel_cand = p.add("rel_cand", &[cfg.max_cand_len, d]);
        let enc = (0..cfg.layers)
            .map(|l| EncLayer {
                ln1: add_ln(&mut p, &format!("enc{l}.ln1"), d),
                attn: add_attn(&mut p, &format!("enc{l}.attn"), d),
                ln2: add_ln(&mut p, &format!("enc{l}.ln2"), d),
                ffn: add_ffn(&mut p, &format!("enc{l}.ffn"), d, f),
            })
            .collect();
        let enc_ln = add_ln(&mut p, "enc.ln", d);
        let dec = (0..cfg.layers)
            .map(|l| DecLayer {
                ln1: add_ln(&mut p, &format!("dec{l}.ln1"), d),
                self_attn: add_attn(&mut p, &format!("dec{l}.self"), d),
                ln2: add_ln(&mut p, &format!("dec{l}.ln2"), d),
                cross: add_attn(&mut p, &format!("dec{l}.cross"), d),
                ln3: add_ln(&mut p, &format!("dec{l}.ln3"), d),
                ffn: add_ffn(&mut p, &format!("dec{l}.ffn"), d, f),
            })
            .collect();
        let dec_ln = add_ln(&mut p, "dec.ln", d);
        let out_w = p.add("out_w", &[d, cfg.vocab_size]);
        let out_b = p.add("out_b", &[cfg.vocab_size]);
        (
            Layout {
                tok_emb,
                type_emb,
                pos_src,
                pos_ce,
                pos_e,
                rel_cand,
                enc,
                enc_ln,
                dec,
                dec_ln,
                out_w,
                out_b,
            },
            p,
        )
    }

    /// Recovers ids for an existing store, checking names and shapes.
    pub fn attach<T: Real>(cfg: &ModelConfig, p: &ParamStore<T>) -> Result<Layout> {
        let (layout, fresh) = Layout::build::<T>(cfg);
        if fresh.specs() != p.specs() {
            return Err(Error::Config("parameter layout does not match the model config".into()));
        }
        Ok(layout)
    }
}

/// One embedding row: token plus position, optionally type and relative position.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EmbedRow {
    pub tok: u32,
    pub table: PosTable,
    pub pos: usize,
    pub tag: Option<u8>,
    pub rel: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct Transformer<T> {
    pub config: ModelConfig,
    pub layout: Layout,
    pub params: ParamStore<T>,
}

#[derive(Clone, Debug, Default)]
struct EncCache<T> {
    ln1: LnCache<T>,
    attn: AttnCache<T>,
    d1: Option<Vec<T>>,
    ln2: LnCache<T>,
    h: Vec<T>,
    d2: Option<Vec<T>>,
}

#[derive(Clone, Debug, Default)]
struct DecCache<T> {
    ln1: LnCache<T>,
    self_attn: AttnCache<T>,
    d1: Option<Vec<T>>,
    ln2: LnCache<T>,
    cross: AttnCache<T>,
    d2: Option<Vec<T>>,
    ln3: LnCache<T>,
    h: Vec<T>,
    d3: Option<Vec<T>>,
}

/// Activations of a forward pass over a packed batch.
#[derive(Clone, Debug, Default)]
pub struct Forward<T> {
    pub enc_rows: Vec<EmbedRow>,
    pub dec_rows: Vec<EmbedRow>,
    pub enc_segs: Vec<AttnSeg>,
    pub self_segs: Vec<AttnSeg>,
    pub cross_segs: Vec<AttnSeg>,
    enc_drop: Option<Vec<T>>,
    dec_drop: Option<Vec<T>>,
    enc_layers: Vec<EncCache<T>>,
    enc_final: LnCache<T>,
    dec_layers: Vec<DecCache<T>>,
    dec_final: LnCache<T>,
    /// `dec_rows × vocab`.
    pub logits: Vec<T>,
    pub labels: Vec<u32>,
    pub loss_mask: Vec<bool>,
}

impl<T: Real> Forward<T> {
    /// Self-attention probabilities of decoder layer `l`, one block per example.
    pub fn dec_self_probs(&self, l: usize) -> &[Vec<T>] {
        &self.dec_layers[l].self_attn.probs
    }

    pub fn dec_cross_probs(&self, l: usize) -> &[Vec<T>] {
        &self.dec_layers[l].cross.probs
    }

    pub fn enc_probs(&self, l: usize) -> &[Vec<T>] {
        &self.enc_layers[l].attn.probs
    }

    pub fn encoder_out(&self) -> &[T] {
        &self.enc_final.out
    }
}

fn xavier(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

fn add<T: Real>(a: &[T], b: &[T]) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| x + y).collect()
}

fn masked<T: Real>(x: Vec<T>, m: &Option<Vec<T>>) -> Vec<T> {
    let mut x = x;
    apply_mask(&mut x, m.as_ref());
    x
}

impl<T: Real> Transformer<T> {
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let (layout, mut p) = Layout::build::<T>(&config);
        let d = config.hidden_dim;
        let emb = (3.0 / d as f64).sqrt();
        for id in [layout.tok_emb, layout.type_emb, layout.pos_src, layout.pos_ce, layout.pos_e, layout.rel_cand] {
            p.fill_uniform(id, emb, rng);
        }
        let specs: Vec<_> = p.specs().to_vec();
        for (i, s) in specs.iter().enumerate() {
            let id = ParamId(i);
            if s.name.ends_with(".g") {
                p.fill(id, 1.0);
            } else if s.shape.len() == 2 && s.name != "tok_emb" && !s.name.starts_with("pos_") && s.name != "type_emb" && s.name != "rel_cand" {
                p.fill_uniform(id, xavier(s.shape[0], s.shape[1]), rng);
            }
        }
        Ok(Transformer {
            config,
            layout,
            params: p,
        })
    }

    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::attach(&config, &params)?;
        Ok(Transformer { config, layout, params })
    }

    pub fn cast<U: Real>(&self) -> Transformer<U> {
        Transformer {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: self.params.cast(),
        }
    }

    fn table(&self, t: PosTable) -> (ParamId, usize) {
        match t {
            PosTable::Src => (self.layout.pos_src, self.config.max_src_len),
            PosTable::Ce => (self.layout.pos_ce, self.config.max_prefix_len),
            PosTable::E => (self.layout.pos_e, self.config.max_tgt_len),
        }
    }

    pub fn check_rows(&self, rows: &[EmbedRow]) -> Result<()> {
        for r in rows {
            if r.tok as usize >= self.config.vocab_size {
                return Err(Error::VocabMismatch(format!(
                    "token id {} outside vocabulary of {}",
                    r.tok, self.config.vocab_size
                )));
            }
            let (_, max) = self.table(r.table);
            if r.pos >= max {
                let what = match r.table {
                    PosTable::Src => "source",
                    PosTable::Ce => "prefix",
                    PosTable::E => "target",
                };
                return Err(Error::TooLong {
                    what,
                    len: r.pos + 1,
                    max,
                });
            }
            if r.tag.is_some_and(|t| t as usize >= N_TYPES) {
                return Err(Error::Config(format!("type tag {:?} out of range", r.tag)));
            }
            if let Some(rel) = r.rel {
                if rel >= self.config.max_cand_len {
                    return Err(Error::TooLong {
                        what: "candidate",
                        len: rel + 1,
                        max: self.config.max_cand_len,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn encoder_rows(&self, ex: &Example) -> Vec<EmbedRow> {
        let e = &ex.enc;
        (0..e.len())
            .map(|i| EmbedRow {
                tok: e.ids[i],
                table: PosTable::Src,
                pos: e.positions[i],
                tag: self.config.use_type_embeddings.then_some(e.type_tags[i]),
                rel: e.rel[i],
            })
            .collect()
    }

    /// The position table and index consumed at each decoder row.
    pub fn decoder_rows(&self, ex: &Example) -> Vec<EmbedRow> {
        let d = &ex.dec;
        (0..d.len())
            .map(|i| EmbedRow {
                tok: d.ids[i],
                table: d.table(i),
                pos: d.position_ids[i],
                tag: None,
                rel: None,
            })
            .collect()
    }

    pub fn embed(&self, rows: &[EmbedRow]) -> Vec<T> {
        let d = self.config.hidden_dim;
        let p = &self.params;
        let mut x = vec![T::zero(); rows.len() * d];
        for (r, row) in rows.iter().enumerate() {
            let out = &mut x[r * d..(r + 1) * d];
            let tok = &p.t(self.layout.tok_emb)[row.tok as usize * d..][..d];
            let (tid, _) = self.table(row.table);
            let pos = &p.t(tid)[row.pos * d..][..d];
            for i in 0..d {
                out[i] = tok[i] + pos[i];
            }
            if let Some(t) = row.tag {
                let te = &p.t(self.layout.type_emb)[t as usize * d..][..d];
                for i in 0..d {
                    out[i] += te[i];
                }
            }
            if let Some(rel) = row.rel {
                let re = &p.t(self.layout.rel_cand)[rel * d..][..d];
                for i in 0..d {
                    out[i] += re[i];
                }
            }
        }
        x
    }

    fn embed_backward(&self, rows: &[EmbedRow], dx: &[T], grads: &mut [T]) {
        let d = self.config.hidden_dim;
        let p = &self.params;
        let mut acc = |id: ParamId, idx: usize, g: &[T]| {
            let s = p.spec(id);
            let dst = &mut grad_of(grads, s)[idx * d..(idx + 1) * d];
            for (a, &b) in dst.iter_mut().zip(g) {
                *a += b;
            }
        };
        for (r, row) in rows.iter().enumerate() {
            let g = &dx[r * d..(r + 1) * d];
            acc(self.layout.tok_emb, row.tok as usize, g);
            acc(self.table(row.table).0, row.pos, g);
            if let Some(t) = row.tag {
                acc(self.layout.type_emb, t as usize, g);
            }
            if let Some(rel) = row.rel {
                acc(self.layout.rel_cand, rel, g);
            }
        }
    }

    fn drop_mask(&self, n: usize, rng: &mut Option<&mut Rng>) -> Option<Vec<T>> {
        match rng {
            Some(r) if self.config.dropout > 0.0 => Some(dropout_mask(n, self.config.dropout, r)),
            _ => None,
        }
    }

    pub fn self_mask(&self, prefix_len: usize) -> KeyLimit {
        if self.config.prefix_bidirectional && prefix_len > 0 {
            KeyLimit::PrefixBidirectional(prefix_len)
        } else {
            KeyLimit::Causal
        }
    }

    /// Forward over a packed batch. Passing an RNG enables dropout.
    pub fn forward(&self, batch: &[Example], mut rng: Option<&mut Rng>) -> Result<Forward<T>> {
        let cfg = &self.config;
        let (d, h, f) = (cfg.hidden_dim, cfg.heads, cfg.ffn_dim);
        let p = &self.params;
        let mut fw = Forward::default();
        for ex in batch {
            ex.dec.validate()?;
            if ex.enc.is_empty() {
                return Err(Error::Empty("source"));
            }
            let (e0, d0) = (fw.enc_rows.len(), fw.dec_rows.len());
            fw.enc_rows.extend(self.encoder_rows(ex));
            fw.dec_rows.extend(self.decoder_rows(ex));
            let (e1, d1) = (fw.enc_rows.len(), fw.dec_rows.len());
            fw.enc_segs.push(AttnSeg {
                q: e0..e1,
                kv: e0..e1,
                mask: KeyLimit::Full,
            });
            fw.self_segs.push(AttnSeg {
                q: d0..d1,
                kv: d0..d1,
                mask: self.self_mask(ex.dec.prefix_len()),
            });
            fw.cross_segs.push(AttnSeg {
                q: d0..d1,
                kv: e0..e1,
                mask: KeyLimit::Full,
            });
            fw.labels.extend_from_slice(&ex.dec.labels);
            fw.loss_mask.extend_from_slice(&ex.dec.loss_mask);
        }
        self.check_rows(&fw.enc_rows)?;
        self.check_rows(&fw.dec_rows)?;
        let (ne, nd) = (fw.enc_rows.len(), fw.dec_rows.len());

        // encoder
        fw.enc_drop = self.drop_mask(ne * d, &mut rng);
        let mut x = masked(self.embed(&fw.enc_rows), &fw.enc_drop);
        for l in &self.layout.enc {
            let (g, b) = layer_norm_params(p, &l.ln1);
            let ln1 = layer_norm(&x, g, b, d);
            let (a, attn) = attention(p, &l.attn, &ln1.out, &ln1.out, &fw.enc_segs, d, h);
            let d1 = self.drop_mask(ne * d, &mut rng);
            let x1 = add(&x, &masked(a, &d1));
            let (g, b) = layer_norm_params(p, &l.ln2);
            let ln2 = layer_norm(&x1, g, b, d);
            let (y, hid) = ffn(p, &l.ffn, &ln2.out, d, f);
            let d2 = self.drop_mask(ne * d, &mut rng);
            let x2 = add(&x1, &masked(y, &d2));
            fw.enc_layers.push(EncCache {
                ln1,
                attn,
                d1,
                ln2,
                h: hid,
                d2,
            });
            x = x2;
        }
        let (g, b) = layer_norm_params(p, &self.layout.enc_ln);
        fw.enc_final = layer_norm(&x, g, b, d);

        // decoder
        fw.dec_drop = self.drop_mask(nd * d, &mut rng);
        let mut x = masked(self.embed(&fw.dec_rows), &fw.dec_drop);
        for l in &self.layout.dec {
            let (g, b) = layer_norm_params(p, &l.ln1);
            let ln1 = layer_norm(&x, g, b, d);
            let (a, self_attn) = attention(p, &l.self_attn, &ln1.out, &ln1.out, &fw.self_segs, d, h);
            let d1 = self.drop_mask(nd * d, &mut rng);
            let x1 = add(&x, &masked(a, &d1));
            let (g, b) = layer_norm_params(p, &l.ln2);
            let ln2 = layer_norm(&x1, g, b, d);
            let (c, cross) = attention(p, &l.cross, &ln2.out, &fw.enc_final.out, &fw.cross_segs, d, h);
            let d2 = self.drop_mask(nd * d, &mut rng);
            let x2 = add(&x1, &masked(c, &d2));
            let (g, b) = layer_norm_params(p, &l.ln3);
            let ln3 = layer_norm(&x2, g, b, d);
            let (y, hid) = ffn(p, &l.ffn, &ln3.out, d, f);
            let d3 = self.drop_mask(nd * d, &mut rng);
            let x3 = add(&x2, &masked(y, &d3));
            fw.dec_layers.push(DecCache {
                ln1,
                self_attn,
                d1,
                ln2,
                cross,
                d2,
                ln3,
                h: hid,
                d3,
            });
            x = x3;
        }
        let (g, b) = layer_norm_params(p, &self.layout.dec_ln);
        fw.dec_final = layer_norm(&x, g, b, d);
        let v = cfg.vocab_size;
        fw.logits = vec![T::zero(); nd * v];
        linear(
            &fw.dec_final.out,
            p.t(self.layout.out_w),
            Some(p.t(self.layout.out_b)),
            d,
            v,
            &mut fw.logits,
        );
        Ok(fw)
    }

    /// Analytic gradients of a scalar whose gradient w.r.t. the logits is `dlogits`.
    pub fn backward(&self, fw: &Forward<T>, dlogits: &[T]) -> Vec<T> {
        let cfg = &self.config;
        let (d, h, f, v) = (cfg.hidden_dim, cfg.heads, cfg.ffn_dim, cfg.vocab_size);
        let p = &self.params;
        let mut grads = p.zeros();
        let nd = fw.dec_rows.len();
        let ne = fw.enc_rows.len();

        let mut dh = vec![T::zero(); nd * d];
        linear_into(
            p,
            &mut grads,
            self.layout.out_w,
            self.layout.out_b,
            &fw.dec_final.out,
            dlogits,
            d,
            v,
            &mut dh,
        );
        let mut dx = vec![T::zero(); nd * d];
        ln_back(p, &mut grads, &self.layout.dec_ln, &fw.dec_final, &dh, d, &mut dx);
        let mut denc = vec![T::zero(); ne * d];
        for (l, c) in self.layout.dec.iter().zip(&fw.dec_layers).rev() {
            // ffn sublayer
            let dy = masked(dx.clone(), &c.d3);
            let dln3 = ffn_backward(p, &l.ffn, &mut grads, &c.ln3.out, &c.h, &dy, d, f);
            ln_back(p, &mut grads, &l.ln3, &c.ln3, &dln3, d, &mut dx);
            // cross-attention sublayer
            let dy = masked(dx.clone(), &c.d2);
            let (dq, dkv) = attention_backward(
                p,
                &l.cross,
                &mut grads,
                &c.cross,
                &c.ln2.out,
                &fw.enc_final.out,
                &fw.cross_segs,
                d,
                h,
                &dy,
            );
            for (a, b) in denc.iter_mut().zip(dkv) {
                *a += b;
            }
            ln_back(p, &mut grads, &l.ln2, &c.ln2, &dq, d, &mut dx);
            // self-attention sublayer
            let dy = masked(dx.clone(), &c.d1);
            let (dq, dkv) = attention_backward(
                p,
                &l.self_attn,
                &mut grads,
                &c.self_attn,
                &c.ln1.out,
                &c.ln1.out,
                &fw.self_segs,
                d,
                h,
                &dy,
            );
            let ds = add(&dq, &dkv);
            ln_back(p, &mut grads, &l.ln1, &c.ln1, &ds, d, &mut dx);
        }
        let dx = masked(dx, &fw.dec_drop);
        self.embed_backward(&fw.dec_rows, &dx, &mut grads);

        let mut dx = vec![T::zero(); ne * d];
        ln_back(p, &mut grads, &self.layout.enc_ln, &fw.enc_final, &denc, d, &mut dx);
        for (l, c) in self.layout.enc.iter().zip(&fw.enc_layers).rev() {
            let dy = masked(dx.clone(), &c.d2);
            let dln2 = ffn_backward(p, &l.ffn, &mut grads, &c.ln2.out, &c.h, &dy, d, f);
            ln_back(p, &mut grads, &l.ln2, &c.ln2, &dln2, d, &mut dx);
            let dy = masked(dx.clone(), &c.d1);
            let (dq, dkv) = attention_backward(
                p,
                &l.attn,
                &mut grads,
                &c.attn,
                &c.ln1.out,
                &c.ln1.out,
                &fw.enc_segs,
                d,
                h,
                &dy,
            );
            let ds = add(&dq, &dkv);
            ln_back(p, &mut grads, &l.ln1, &c.ln1, &ds, d, &mut dx);
        }
        let dx = masked(dx, &fw.enc_drop);
        self.embed_backward(&fw.enc_rows, &dx, &mut grads);
        grads
    }

    /// Mean masked cross-entropy and its gradient w.r.t. the logits.
    pub fn loss(&self, fw: &Forward<T>) -> (f64, Vec<T>) {
        masked_cross_entropy(&fw.logits, &fw.labels, &fw.loss_mask, self.config.vocab_size)
    }

    pub fn loss_and_grad(&self, batch: &[Example], rng: Option<&mut Rng>) -> Result<(f64, Vec<T>)> {
        let fw = self.forward(batch, rng)?;
        let (loss, dl) = self.loss(&fw);
        Ok((loss, self.backward(&fw, &dl)))
    }

    /// Teacher-forced logits of one example without dropout.
    pub fn logits(&self, ex: &Example) -> Result<Vec<T>> {
        Ok(self.forward(std::slice::from_ref(ex), None)?.logits)
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }
}

fn ln_back<T: Real>(
    p: &ParamStore<T>,
    grads: &mut [T],
    ids: &LnIds,
    c: &LnCache<T>,
    dy: &[T],
    d: usize,
    dx: &mut [T],
) {
    let mut dg = vec![T::zero(); d];
    let mut db = vec![T::zero(); d];
    layer_norm_backward(dy, c, p.t(ids.g), d, dx, &mut dg, &mut db);
    for (a, b) in grad_of(grads, p.spec(ids.g)).iter_mut().zip(dg) {
        *a += b;
    }
    for (a, b) in grad_of(grads, p.spec(ids.b)).iter_mut().zip(db) {
        *a += b;
    }
}

/// Mean cross-entropy over rows with mask set. Masked rows contribute nothing
/// to the value and get an exactly zero gradient. An all-zero mask yields 0.
pub fn masked_cross_entropy<T: Real>(logits: &[T], labels: &[u32], mask: &[bool], v: usize) -> (f64, Vec<T>) {
    let mut dl = vec![T::zero(); logits.len()];
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        log::warn!("loss mask is all zero; loss defined as 0");
        return (0.0, dl);
    }
    let inv = 1.0 / count as f64;
    let inv_t = T::of(inv);
    let mut total = 0.0f64;
    for (r, (&y, &m)) in labels.iter().zip(mask).enumerate() {
        if !m {
            continue;
        }
        let row = &logits[r * v..(r + 1) * v];
        let lse = log_sum_exp(row);
        total += (lse - row[y as usize]).as_f64();
        let g = &mut dl[r * v..(r + 1) * v];
        for (gi, &z) in g.iter_mut().zip(row) {
            *gi = (z - lse).exp() * inv_t;
        }
        g[y as usize] -= inv_t;
    }
    (total * inv, dl)
}

//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! `ENTMT_ACCEPTANCE=A1,A4` restricts the run to the listed criteria and
//! `ENTMT_ACCEPTANCE_DIR` keeps the desk-run artifacts in a fixed directory so
//! a rerun reuses trained models.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use entity_nmt::eval::{self, EvalReport};
use entity_nmt::extraction::{levenshtein, NerMode, Transliterator};
use entity_nmt::model::input::{DecoderInput, EncoderInput, Example, PosTable};
use entity_nmt::model::{AttendSite, ModelConfig, Transformer};
use entity_nmt::pipeline::{self, Corpus, Method, RunConfig, RunDir, Split, System};
use entity_nmt::synth::{self, apply_translit_rule, EntityType, Nationality, World};
use entity_nmt::translit::TranslitPipeline;
use entity_nmt::vocab::BOS;
use entity_nmt::{rng, Result};
use rand::Rng as _;

struct Outcome {
    id: &'static str,
    pass: bool,
    detail: String,
}

fn outcome(id: &'static str, pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        id,
        pass,
        detail: detail.into(),
    }
}

fn failed(id: &'static str, e: impl std::fmt::Display) -> Outcome {
    outcome(id, false, format!("error: {e}"))
}

fn tiny(vocab: usize) -> ModelConfig {
    ModelConfig {
        layers: 2,
        hidden_dim: 8,
        heads: 2,
        ffn_dim: 12,
        dropout: 0.0,
        max_src_len: 24,
        max_prefix_len: 12,
        max_tgt_len: 24,
        max_cand_len: 12,
        vocab_size: vocab,
        ..ModelConfig::default()
    }
}

fn random_example(r: &mut rng::Rng, vocab: u32, max_prefix: usize) -> Example {
    let n = r.gen_range(1..8);
    let src: Vec<u32> = (0..n).map(|_| r.gen_range(22..vocab)).collect();
    let tags: Vec<u8> = (0..n).map(|_| r.gen_range(0..4)).collect();
    let p = r.gen_range(0..=max_prefix);
    let prefix: Vec<u32> = (0..p).map(|_| r.gen_range(4..vocab)).collect();
    let t = r.gen_range(1..7);
    let tgt: Vec<u32> = (0..t).map(|_| r.gen_range(22..vocab)).collect();
    Example {
        enc: EncoderInput::plain(src, tags).unwrap(),
        dec: DecoderInput::new(&prefix, &tgt),
    }
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

// ---------------------------------------------------------------- A1

fn a1() -> Outcome {
    let t0 = Instant::now();
    let mut problems: Vec<String> = Vec::new();
    let v = 40usize;
    let mut r = rng::rng(101);

    for trial in 0..40 {
        let mut cfg = tiny(v);
        cfg.prefix_bidirectional = trial % 2 == 1;
        let m = Transformer::<f64>::new(cfg, &mut rng::rng(trial)).unwrap();
        let batch: Vec<Example> = (0..3).map(|_| random_example(&mut r, v as u32, 5)).collect();

        // Loss mask: zero logit gradient at prefix rows; their labels are inert.
        let fw = m.forward(&batch, None).unwrap();
        let (loss, dl) = m.loss(&fw);
        let grads = m.backward(&fw, &dl);
        for (row, &keep) in fw.loss_mask.iter().enumerate() {
            if !keep && dl[row * v..(row + 1) * v].iter().any(|&x| x != 0.0) {
                problems.push(format!("nonzero gradient at masked row {row}"));
            }
        }
        let mut fw2 = m.forward(&batch, None).unwrap();
        for (row, &keep) in fw.loss_mask.iter().enumerate() {
            if !keep {
                fw2.labels[row] = r.gen_range(0..v as u32);
            }
        }
        let (loss2, dl2) = m.loss(&fw2);
        if loss.to_bits() != loss2.to_bits() || bits(&grads) != bits(&m.backward(&fw2, &dl2)) {
            problems.push("masked labels changed the loss".into());
        }

        // Visibility: a target token never reaches earlier rows; a causal
        // prefix token never reaches earlier prefix rows.
        let ex = &batch[0];
        let p = ex.dec.prefix_len();
        let base = m.logits(ex).unwrap();
        let nt = ex.dec.len() - p - 1;
        if nt > 0 {
            let j = r.gen_range(0..nt);
            let mut e2 = ex.clone();
            let row = p + 1 + j;
            e2.dec.ids[row] = if e2.dec.ids[row] == 22 { 23 } else { 22 };
            let b2 = m.logits(&e2).unwrap();
            if bits(&base[..row * v]) != bits(&b2[..row * v]) {
                problems.push(format!("target token {j} visible to earlier rows"));
            }
        }
        if p > 0 {
            let i = r.gen_range(0..p);
            let mut e2 = ex.clone();
            e2.dec.ids[i] = if e2.dec.ids[i] == 22 { 23 } else { 22 };
            let b2 = m.logits(&e2).unwrap();
            let same_before = bits(&base[..i * v]) == bits(&b2[..i * v]);
            if !m.config.prefix_bidirectional && !same_before {
                problems.push(format!("causal prefix token {i} visible to earlier rows"));
            }
            if m.config.prefix_bidirectional && i > 0 && same_before {
                problems.push(format!("bidirectional prefix token {i} invisible to row 0"));
            }
            if bits(&base[(p + 1) * v..]) == bits(&b2[(p + 1) * v..]) && nt > 0 {
                problems.push("prefix token not attended by target rows".into());
            }
        }

        // Attention rows are distributions under every mask.
        for l in 0..m.config.layers {
            for (segs, blocks) in [
                (&fw.enc_segs, fw.enc_probs(l)),
                (&fw.self_segs, fw.dec_self_probs(l)),
                (&fw.cross_segs, fw.dec_cross_probs(l)),
            ] {
                for (seg, pr) in segs.iter().zip(blocks) {
                    for row in pr.chunks(seg.kv.len()) {
                        let s: f64 = row.iter().sum();
                        if (s - 1.0).abs() > 1e-6 {
                            problems.push(format!("attention row sums to {s}"));
                        }
                    }
                }
            }
        }

        // Position tables: BOS reads E[0] whatever the prefix length, prefix
        // rows read CE[i].
        for pl in 0..=m.config.max_prefix_len.min(8) {
            let prefix: Vec<u32> = (0..pl as u32).map(|i| 22 + i).collect();
            let e = Example {
                enc: EncoderInput::plain(vec![22], vec![0]).unwrap(),
                dec: DecoderInput::new(&prefix, &[23, 24]),
            };
            let rows = m.decoder_rows(&e);
            if (rows[pl].table, rows[pl].pos) != (PosTable::E, 0) || rows[pl].tok != BOS {
                problems.push(format!("BOS reads {:?}[{}] with prefix {pl}", rows[pl].table, rows[pl].pos));
            }
            if rows[..pl].iter().enumerate().any(|(i, x)| x.table != PosTable::Ce || x.pos != i) {
                problems.push(format!("prefix rows misindexed with prefix {pl}"));
            }
        }
    }

    // Swapping two non-entity tokens together with their positions changes
    // only those two input vectors.
    let m = Transformer::<f64>::new(tiny(v), &mut rng::rng(5)).unwrap();
    for _ in 0..50 {
        let ex = random_example(&mut r, v as u32, 0);
        let n = ex.enc.len();
        if n < 2 {
            continue;
        }
        let (a, b) = (r.gen_range(0..n), r.gen_range(0..n));
        if a == b {
            continue;
        }
        let mut e2 = ex.clone();
        e2.enc.type_tags[a] = 0;
        e2.enc.type_tags[b] = 0;
        e2.enc.ids.swap(a, b);
        e2.enc.positions.swap(a, b);
        let mut e1 = ex.clone();
        e1.enc.type_tags[a] = 0;
        e1.enc.type_tags[b] = 0;
        let x1 = m.embed(&m.encoder_rows(&e1));
        let x2 = m.embed(&m.encoder_rows(&e2));
        let d = m.config.hidden_dim;
        for i in 0..n {
            let same = bits(&x1[i * d..(i + 1) * d]) == bits(&x2[i * d..(i + 1) * d]);
            if (i == a || i == b) == same && ex.enc.ids[a] != ex.enc.ids[b] {
                problems.push(format!("swap changed row {i} unexpectedly"));
            }
        }
    }

    let secs = t0.elapsed().as_secs_f64();
    let pass = problems.is_empty() && secs < 60.0;
    let mut detail = format!("mechanism invariants over 40 random models, {secs:.1}s");
    if let Some(p) = problems.first() {
        detail.push_str(&format!("; {} violations, first: {p}", problems.len()));
    }
    outcome("A1", pass, detail)
}

// ---------------------------------------------------------------- A2

fn a2() -> Outcome {
    let mut worst = 0.0f64;
    let mut checked = 0;
    let v = 30usize;
    for (k, site) in [AttendSite::Decoder, AttendSite::Encoder].into_iter().enumerate() {
        let mut cfg = tiny(v);
        cfg.dropout = 0.1;
        cfg.attend_site = site;
        cfg.use_prefix = site == AttendSite::Decoder;
        let mut m = Transformer::<f64>::new(cfg, &mut rng::rng(31 + k as u64)).unwrap();
        let mut r = rng::rng(77 + k as u64);
        let mut batch: Vec<Example> = (0..3).map(|_| random_example(&mut r, v as u32, 4)).collect();
        if site == AttendSite::Encoder {
            for ex in &mut batch {
                ex.dec = DecoderInput::new(&[], &ex.dec.ids[ex.dec.prefix_len() + 1..]);
                // Two appended candidate tokens sharing source position 0.
                for rel in 0..2 {
                    ex.enc.ids.push(25 + rel as u32);
                    ex.enc.positions.push(0);
                    ex.enc.type_tags.push(1);
                    ex.enc.rel.push(Some(rel));
                }
            }
        }
        let loss_at = |m: &Transformer<f64>| {
            let fw = m.forward(&batch, Some(&mut rng::rng(5))).unwrap();
            m.loss(&fw).0
        };
        let fw = m.forward(&batch, Some(&mut rng::rng(5))).unwrap();
        let (_, dl) = m.loss(&fw);
        let g = m.backward(&fw, &dl);
        let nz: Vec<usize> = (0..g.len()).filter(|&i| g[i].abs() > 1e-9).collect();
        let eps = 1e-5;
        for _ in 0..150 {
            let i = nz[r.gen_range(0..nz.len())];
            let orig = m.params.data()[i];
            m.params.data_mut()[i] = orig + eps;
            let lp = loss_at(&m);
            m.params.data_mut()[i] = orig - eps;
            let lm = loss_at(&m);
            m.params.data_mut()[i] = orig;
            let num = (lp - lm) / (2.0 * eps);
            let rel = (num - g[i]).abs() / num.abs().max(g[i].abs()).max(1e-7);
            worst = worst.max(rel);
            checked += 1;
        }
    }
    outcome(
        "A2",
        worst < 1e-3 && checked >= 200,
        format!("{checked} parameters, worst relative error {worst:.2e} (limit 1e-3)"),
    )
}

// ---------------------------------------------------------------- A3

/// Plain recursion over the three edit operations, no memoisation.
fn lev_brute(a: &[u8], b: &[u8]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let sub = lev_brute(&a[1..], &b[1..]) + usize::from(a[0] != b[0]);
    let del = lev_brute(&a[1..], b) + 1;
    let ins = lev_brute(a, &b[1..]) + 1;
    sub.min(del).min(ins)
}

fn all_strings(max_len: usize) -> Vec<Vec<u8>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for s in &frontier {
            for c in b"abc" {
                let mut t: Vec<u8> = s.clone();
                t.push(*c);
                next.push(t);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

fn bleu_str(refs: &[&str], hyps: &[&str]) -> f64 {
    let s = |x: &&str| x.split_whitespace().map(str::to_string).collect::<Vec<_>>();
    eval::bleu(&refs.iter().map(s).collect::<Vec<_>>(), &hyps.iter().map(s).collect::<Vec<_>>()).unwrap()
}

fn a3() -> Outcome {
    let strings = all_strings(6);
    let mut mismatches = 0usize;
    let mut pairs = 0usize;
    for a in &strings {
        for b in &strings {
            pairs += 1;
            if levenshtein(a, b) != lev_brute(a, b) {
                mismatches += 1;
            }
        }
    }
    // Hand-computed corpus BLEU values (add-one smoothing for orders 2-4).
    let fixtures: [(&[&str], &[&str], f64); 5] = [
        // p = 3/4, (1+1)/(3+1), (0+1)/(2+1), (0+1)/(1+1): product 1/16.
        (&["a b c d"], &["a b x d"], 50.0),
        (&["a b c d e"], &["a b c d e"], 100.0),
        // Every precision is 1; only the brevity penalty exp(1 - 10/9) bites.
        (&["a b c d e f g h i j"], &["a b c d e f g h i"], 100.0 * (-1.0f64 / 9.0).exp()),
        (&["a b"], &["c d"], 0.0),
        // Pooled: p1 = 4/5, p2 = (2+1)/(3+1), p3 = (1+1)/(1+1), p4 = 1.
        (&["a b c", "d e"], &["a b c", "d f"], 100.0 * (0.6f64).powf(0.25)),
    ];
    let mut worst = 0.0f64;
    for (r, h, want) in fixtures {
        worst = worst.max((bleu_str(r, h) - want).abs());
    }
    outcome(
        "A3",
        mismatches == 0 && worst < 1e-9,
        format!("levenshtein: {mismatches} mismatches over {pairs} pairs; BLEU: 5 fixtures, max deviation {worst:.1e}"),
    )
}

// ---------------------------------------------------------------- A4

struct Ref<'a> {
    m: &'a Transformer<f64>,
    d: usize,
}

impl Ref<'_> {
    fn t(&self, name: &str) -> &[f64] {
        self.m.params.t(self.m.params.id(name).unwrap_or_else(|| panic!("no tensor {name}")))
    }

    fn affine(&self, x: &[f64], w: &str, b: &str, k: usize, n: usize) -> Vec<f64> {
        let (w, b) = (self.t(w), self.t(b));
        let rows = x.len() / k;
        let mut y = vec![0.0; rows * n];
        for r in 0..rows {
            for j in 0..n {
                let mut s = b[j];
                for i in 0..k {
                    s += x[r * k + i] * w[i * n + j];
                }
                y[r * n + j] = s;
            }
        }
        y
    }

    fn norm(&self, x: &[f64], name: &str) -> Vec<f64> {
        let (g, b) = (self.t(&format!("{name}.g")), self.t(&format!("{name}.b")));
        let d = self.d;
        let mut y = vec![0.0; x.len()];
        for (xr, yr) in x.chunks(d).zip(y.chunks_mut(d)) {
            let inv = 1.0 / d as f64;
            let mut mean = 0.0;
            for &v in xr {
                mean += v;
            }
            mean *= inv;
            let mut var = 0.0;
            for &v in xr {
                var += (v - mean) * (v - mean);
            }
            var *= inv;
            let rstd = 1.0 / (var + 1e-5).sqrt();
            for i in 0..d {
                yr[i] = g[i] * ((xr[i] - mean) * rstd) + b[i];
            }
        }
        y
    }

    fn mha(&self, xq: &[f64], xkv: &[f64], name: &str, causal: bool) -> Vec<f64> {
        let d = self.d;
        let h = self.m.config.heads;
        let dh = d / h;
        let q = self.affine(xq, &format!("{name}.wq"), &format!("{name}.bq"), d, d);
        let k = self.affine(xkv, &format!("{name}.wk"), &format!("{name}.bk"), d, d);
        let v = self.affine(xkv, &format!("{name}.wv"), &format!("{name}.bv"), d, d);
        let (nq, nk) = (xq.len() / d, xkv.len() / d);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut ctx = vec![0.0; nq * d];
        for hh in 0..h {
            let o = hh * dh;
            for i in 0..nq {
                let lim = if causal { i + 1 } else { nk };
                let mut s: Vec<f64> = (0..lim)
                    .map(|j| {
                        let mut acc = 0.0;
                        for t in 0..dh {
                            acc += q[i * d + o + t] * k[j * d + o + t];
                        }
                        acc * scale
                    })
                    .collect();
                let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for x in s.iter_mut() {
                    *x = (*x - mx).exp();
                    z += *x;
                }
                let inv = 1.0 / z;
                for x in s.iter_mut() {
                    *x *= inv;
                }
                for t in 0..dh {
                    let mut acc = 0.0;
                    for (j, &p) in s.iter().enumerate() {
                        acc += p * v[j * d + o + t];
                    }
                    ctx[i * d + o + t] = acc;
                }
            }
        }
        self.affine(&ctx, &format!("{name}.wo"), &format!("{name}.bo"), d, d)
    }

    fn ffn(&self, x: &[f64], name: &str) -> Vec<f64> {
        let f = self.m.config.ffn_dim;
        let mut hdn = self.affine(x, &format!("{name}.w1"), &format!("{name}.b1"), self.d, f);
        for v in hdn.iter_mut() {
            *v = v.max(0.0);
        }
        self.affine(&hdn, &format!("{name}.w2"), &format!("{name}.b2"), f, self.d)
    }

    fn embed(&self, ids: &[u32], table: &str) -> Vec<f64> {
        let d = self.d;
        let (tok, pos) = (self.t("tok_emb"), self.t(table));
        let mut x = Vec::with_capacity(ids.len() * d);
        for (p, &id) in ids.iter().enumerate() {
            for i in 0..d {
                x.push(tok[id as usize * d + i] + pos[p * d + i]);
            }
        }
        x
    }

    /// Teacher-forced logits of a standard pre-norm encoder-decoder.
    fn logits(&self, src: &[u32], dec_in: &[u32]) -> Vec<f64> {
        let add = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x + y).collect::<Vec<f64>>();
        let mut x = self.embed(src, "pos_src");
        for l in 0..self.m.config.layers {
            let n1 = self.norm(&x, &format!("enc{l}.ln1"));
            x = add(&x, &self.mha(&n1, &n1, &format!("enc{l}.attn"), false));
            let n2 = self.norm(&x, &format!("enc{l}.ln2"));
            x = add(&x, &self.ffn(&n2, &format!("enc{l}.ffn")));
        }
        let mem = self.norm(&x, "enc.ln");
        let mut y = self.embed(dec_in, "pos_e");
        for l in 0..self.m.config.layers {
            let n1 = self.norm(&y, &format!("dec{l}.ln1"));
            y = add(&y, &self.mha(&n1, &n1, &format!("dec{l}.self"), true));
            let n2 = self.norm(&y, &format!("dec{l}.ln2"));
            y = add(&y, &self.mha(&n2, &mem, &format!("dec{l}.cross"), false));
            let n3 = self.norm(&y, &format!("dec{l}.ln3"));
            y = add(&y, &self.ffn(&n3, &format!("dec{l}.ffn")));
        }
        let fin = self.norm(&y, "dec.ln");
        self.affine(&fin, "out_w", "out_b", self.d, self.m.config.vocab_size)
    }
}

fn a4() -> Outcome {
    let v = 50usize;
    let base = ModelConfig {
        hidden_dim: 16,
        heads: 4,
        ffn_dim: 24,
        ..tiny(v)
    };
    let cfg = Method::Plain.model_config(&base, v);
    if cfg.use_prefix || cfg.use_type_embeddings {
        return outcome("A4", false, "plain method config enables prefix or type embeddings");
    }
    let mut r = rng::rng(404);
    let mut mismatched = 0;
    let mut max_diff = 0.0f64;
    let n = 30;
    for seed in 0..n {
        let m = Transformer::<f64>::new(cfg.clone(), &mut rng::rng(seed)).unwrap();
        let ex = random_example(&mut r, v as u32, 0);
        let got = m.logits(&ex).unwrap();
        let want = Ref { m: &m, d: cfg.hidden_dim }.logits(&ex.enc.ids, &ex.dec.ids);
        let diff = got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        max_diff = max_diff.max(diff);
        if got.len() != want.len() || bits(&got) != bits(&want) {
            mismatched += 1;
        }
    }
    outcome(
        "A4",
        mismatched == 0,
        format!("{mismatched}/{n} models differ from the reference forward (max |diff| {max_diff:.1e}); exact match required"),
    )
}

// ---------------------------------------------------------------- desk run

/// Desk-scale configuration used for A5-A9.
fn desk_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.latency_sentences = 100;
    c
}

struct Desk {
    cfg: RunConfig,
    dir: RunDir,
    world: World,
    corpus: Corpus,
    aware: TranslitPipeline,
    agnostic: TranslitPipeline,
    models: BTreeMap<&'static str, Transformer<f32>>,
    /// Wall-clock seconds per build stage; reused artifacts cost close to 0.
    secs: BTreeMap<String, f64>,
}

fn stage<T>(secs: &mut BTreeMap<String, f64>, what: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let t = Instant::now();
    let out = f()?;
    let s = t.elapsed().as_secs_f64();
    eprintln!("  [{what}: {s:.0}s]");
    secs.insert(what.to_string(), s);
    Ok(out)
}

impl Desk {
    fn build(root: &Path, methods: &[Method]) -> Result<Desk> {
        let cfg = desk_config();
        let dir = RunDir::new(root);
        let mut secs = BTreeMap::new();
        let corpus = match pipeline::load_corpus(&cfg, &dir) {
            Ok(c) => c,
            Err(_) => stage(&mut secs, "generate world", || pipeline::cmd_gen(&cfg, &dir))?.1,
        };
        let world = synth::gen_corpus(&cfg.world)?;
        let aware = stage(&mut secs, "aware transliteration", || pipeline::ensure_translit(&cfg, &dir, &corpus, true))?;
        let agnostic = stage(&mut secs, "agnostic transliteration", || pipeline::ensure_translit(&cfg, &dir, &corpus, false))?;
        let mut models = BTreeMap::new();
        for &m in methods {
            let key = m.model_key();
            if models.contains_key(key) {
                continue;
            }
            let t = Some(&aware as &dyn Transliterator);
            let model = stage(&mut secs, key, || pipeline::ensure_model(&cfg, &dir, m, &corpus, t))?;
            models.insert(key, model);
        }
        Ok(Desk {
            cfg,
            dir,
            world,
            corpus,
            aware,
            agnostic,
            models,
            secs,
        })
    }

    fn eval_with(&self, method: Method, cfg: &RunConfig, corpus: &Corpus) -> Result<EvalReport> {
        let model = &self.models[method.model_key()];
        let sys = System::new(cfg, method, model, corpus, Some(&self.aware as &dyn Transliterator));
        let (r, _) = pipeline::evaluate(
            &sys,
            corpus.split(Split::TestUnseen),
            "test_unseen",
            cfg.latency_sentences,
            &cfg.model_fingerprint(method),
        )?;
        Ok(r)
    }

    fn eval(&self, method: Method) -> Result<EvalReport> {
        let r = self.eval_with(method, &self.cfg, &self.corpus)?;
        pipeline::write_report(&self.dir, &format!("{method}_test_unseen"), &r)?;
        Ok(r)
    }
}

fn summary(r: &EvalReport) -> String {
    format!(
        "{} BLEU {:.2} ER {:.3} (PER {:.3})",
        r.method,
        r.bleu,
        r.error_rate(),
        r.type_rate(EntityType::Per)
    )
}

fn a5(desk: &Desk) -> Result<Outcome> {
    let ea = desk.eval(Method::Ea)?;
    let plain = desk.eval(Method::Plain)?;
    let ratio = ea.error_rate() / plain.error_rate();
    // Generation, transliteration and both models: the whole run behind this
    // comparison.
    let cpu: f64 = ["generate world", "aware transliteration", "plain", "ea"]
        .iter()
        .filter_map(|k| desk.secs.get(*k))
        .sum();
    let pass = ea.error_rate() <= 0.70 * plain.error_rate() && ea.bleu >= plain.bleu - 0.5 && cpu <= 1800.0;
    Ok(outcome(
        "A5",
        pass,
        format!(
            "{}; {}; ER ratio {ratio:.3} (limit 0.70), BLEU gap {:+.2} (limit -0.5), build {:.0} min (limit 30)",
            summary(&ea),
            summary(&plain),
            ea.bleu - plain.bleu,
            cpu / 60.0
        ),
    ))
}

/// Names the dictionary does not cover, plus same-letter strings placed in
/// sentences carrying each nationality's context token. The letters give no
/// hint of origin, so only the context separates the rules.
fn translit_test_set(desk: &Desk) -> Vec<(Vec<String>, Vec<String>, Vec<String>)> {
    let mut set = Vec::new();
    for s in &desk.corpus.test_unseen {
        for e in &s.entities {
            if e.etype == EntityType::Per && desk.corpus.dictionary.lookup(&e.src_surface).is_none() {
                set.push((e.src_surface.clone(), s.src_tokens.clone(), e.gold_tgt_surface.clone()));
            }
        }
    }
    let mut r = rng::rng(606);
    for c in b'a'..=b'z' {
        let len = r.gen_range(3..=6);
        let name = vec![String::from_utf8(vec![c; len]).unwrap()];
        for n in Nationality::ALL {
            let mut sent: Vec<String> = (0..4).map(|_| format!("s{}", r.gen_range(0..desk.cfg.world.content_vocab_size))).collect();
            sent.insert(r.gen_range(0..=sent.len()), n.context_token());
            let at = r.gen_range(0..=sent.len());
            sent.insert(at, name[0].clone());
            set.push((name.clone(), sent, apply_translit_rule(n, &name)));
        }
    }
    set
}

fn a6(desk: &Desk) -> Result<Outcome> {
    let set = translit_test_set(desk);
    let gold: Vec<&Vec<String>> = set.iter().map(|x| &x.2).collect();
    let run = |p: &TranslitPipeline| -> Result<f64> {
        let out: Vec<Vec<String>> = set.iter().map(|(e, s, _)| p.run(e, s)).collect();
        let out: Vec<&Vec<String>> = out.iter().collect();
        eval::exact_match_accuracy(&gold, &out)
    };
    let aware = run(&desk.aware)?;
    let agnostic = run(&desk.agnostic)?;
    let with = desk.eval_with(Method::Ea, &desk.cfg, &desk.corpus)?;
    let mut off = desk.cfg.clone();
    off.use_translit = false;
    let without = desk.eval_with(Method::Ea, &off, &desk.corpus)?;
    let (pw, po) = (with.type_rate(EntityType::Per), without.type_rate(EntityType::Per));
    let pass = aware - agnostic >= 0.05 && pw < po;
    Ok(outcome(
        "A6",
        pass,
        format!(
            "exact match on {} names: aware {:.1}% vs agnostic {:.1}% (need +5); EA PER ER with transliteration {pw:.3} vs without {po:.3}",
            set.len(),
            100.0 * aware,
            100.0 * agnostic
        ),
    ))
}

fn a7(desk: &Desk) -> Result<Outcome> {
    let dec = desk.eval(Method::Ea)?;
    let enc = desk.eval(Method::EncoderAttend)?;
    Ok(outcome(
        "A7",
        dec.error_rate() <= enc.error_rate(),
        format!("decoder-attend ER {:.3} vs encoder-attend ER {:.3}", dec.error_rate(), enc.error_rate()),
    ))
}

fn a8(desk: &Desk) -> Result<Outcome> {
    let mut cfg = desk.cfg.clone();
    cfg.latency_sentences = 0;
    let mut chosen = None;
    for p in [0.3, 0.5, 0.7, 0.9, 1.0] {
        cfg.ner = NerMode::gazetteer(0.0, p, 0.0);
        let r = desk.eval_with(Method::Ea, &cfg, &desk.corpus)?;
        eprintln!("  [p_spurious {p}: {} incorrect-candidate cases]", r.misguidance_cases);
        if r.misguidance_cases >= 100 {
            chosen = Some((p, r));
            break;
        }
    }
    let Some((p, ea)) = chosen else {
        return Ok(outcome("A8", false, "could not reach 100 incorrect-candidate cases"));
    };
    let rep = desk.eval_with(Method::Replace, &cfg, &desk.corpus)?;
    let plh = desk.eval_with(Method::Placeholder, &cfg, &desk.corpus)?;
    let rate = |r: &EvalReport| r.misguidance_rate.unwrap_or(f64::NAN);
    let pass = rate(&ea) < rate(&rep) && rate(&ea) < rate(&plh);
    Ok(outcome(
        "A8",
        pass,
        format!(
            "p_spurious {p}, {} cases: misguidance EA {:.3}, replacement {:.3}, placeholder {:.3}",
            ea.misguidance_cases,
            rate(&ea),
            rate(&rep),
            rate(&plh)
        ),
    ))
}

fn a9(desk: &Desk) -> Result<Outcome> {
    let mut cfg = desk.cfg.clone();
    cfg.latency_sentences = 0;
    let mut rates = Vec::new();
    for cov in [0.1, 0.25, 0.5, 0.8, 1.0] {
        let mut c = desk.corpus.clone();
        c.dictionary = pipeline::dictionary_at_coverage(&desk.world, cov);
        rates.push((cov, desk.eval_with(Method::Ea, &cfg, &c)?.error_rate()));
    }
    let pass = rates.windows(2).all(|w| w[1].1 <= w[0].1 + 0.02);
    let shown: Vec<String> = rates.iter().map(|(c, r)| format!("{c}:{r:.3}")).collect();
    Ok(outcome("A9", pass, format!("EA ER by coverage {} (rises allowed up to 0.02)", shown.join(" "))))
}

// ---------------------------------------------------------------- A10

fn small_config() -> RunConfig {
    let mut c = RunConfig::default();
    for (k, v) in [
        ("world.train_size", "1500"),
        ("world.val_size", "50"),
        ("world.test_size", "100"),
        ("world.test_unseen_size", "100"),
        ("train.max_steps", "150"),
        ("train.warmup_steps", "20"),
        ("translit.train.max_steps", "100"),
        ("translit.train.warmup_steps", "10"),
        ("classifier.other_threshold", "10"),
        ("classifier.max_epochs", "50"),
        ("latency_sentences", "10"),
    ] {
        c.set(k, v).unwrap();
    }
    c
}

fn tree_bytes(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
                continue;
            }
            let rel = p.strip_prefix(root).unwrap().to_path_buf();
            let mut bytes = std::fs::read(&p).unwrap();
            let name = rel.to_string_lossy().into_owned();
            if name.ends_with(".log") {
                // Training logs carry wall-clock step times.
                continue;
            }
            if name.starts_with("reports/") {
                let text = String::from_utf8(bytes).unwrap();
                bytes = text
                    .lines()
                    .filter(|l| !l.contains("latency"))
                    .flat_map(|l| format!("{l}\n").into_bytes())
                    .collect();
            }
            out.insert(rel, bytes);
        }
    }
    out
}

fn a10() -> Result<Outcome> {
    let cfg = small_config();
    let mut trees = Vec::new();
    for _ in 0..2 {
        let tmp = tempfile::tempdir()?;
        let dir = RunDir::new(tmp.path());
        pipeline::cmd_gen(&cfg, &dir)?;
        for m in [Method::Ea, Method::Plain] {
            let mut c = cfg.clone();
            c.method = m;
            pipeline::cmd_train(&c, &dir)?;
            pipeline::cmd_eval(&c, &dir)?;
        }
        trees.push(tree_bytes(tmp.path()));
    }
    let (a, b) = (&trees[0], &trees[1]);
    let differing: Vec<String> = a
        .keys()
        .chain(b.keys())
        .filter(|k| a.get(*k) != b.get(*k))
        .map(|k| k.display().to_string())
        .collect();
    let has = |pre: &str| a.keys().filter(|k| k.to_string_lossy().starts_with(pre)).count();
    let pass = differing.is_empty() && has("corpus/") > 0 && has("models/") > 0 && has("reports/") > 0;
    Ok(outcome(
        "A10",
        pass,
        format!(
            "{} artifacts compared ({} corpus, {} model, {} report files); differing: {}",
            a.len(),
            has("corpus/"),
            has("models/"),
            has("reports/"),
            if differing.is_empty() { "none".to_string() } else { differing.join(", ") }
        ),
    ))
}

// ---------------------------------------------------------------- driver

fn main() {
    let only: Option<Vec<String>> = std::env::var("ENTMT_ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').map(|x| x.trim().to_uppercase()).collect());
    let want = |id: &str| only.as_ref().is_none_or(|o| o.iter().any(|x| x == id));
    let mut results: Vec<Outcome> = Vec::new();
    let mut run = |id: &'static str, f: &dyn Fn() -> Outcome| {
        if want(id) {
            let t = Instant::now();
            let o = f();
            eprintln!("  [{id}: {:.0}s]", t.elapsed().as_secs_f64());
            results.push(o);
        }
    };
    run("A1", &a1);
    run("A2", &a2);
    run("A3", &a3);
    run("A4", &a4);
    run("A10", &|| a10().unwrap_or_else(|e| failed("A10", e)));

    let desk_ids = ["A5", "A6", "A7", "A8", "A9"];
    if desk_ids.iter().any(|id| want(id)) {
        let keep = std::env::var("ENTMT_ACCEPTANCE_DIR").ok().map(PathBuf::from);
        let tmp = tempfile::tempdir().expect("temp dir");
        let root = keep.unwrap_or_else(|| tmp.path().to_path_buf());
        let methods = [Method::Plain, Method::Ea, Method::EncoderAttend, Method::Placeholder];
        match Desk::build(&root, &methods) {
            Ok(desk) => {
                let checks: [(&'static str, fn(&Desk) -> Result<Outcome>); 5] =
                    [("A5", a5), ("A6", a6), ("A7", a7), ("A8", a8), ("A9", a9)];
                for (id, f) in checks {
                    if want(id) {
                        let t = Instant::now();
                        results.push(f(&desk).unwrap_or_else(|e| failed(id, e)));
                        eprintln!("  [{id}: {:.0}s]", t.elapsed().as_secs_f64());
                    }
                }
            }
            Err(e) => {
                for id in desk_ids.into_iter().filter(|id| want(id)) {
                    results.push(failed(id, &e));
                }
            }
        }
    }

    results.sort_by_key(|o| o.id[1..].parse::<u32>().unwrap_or(0));
    let mut all = true;
    for o in &results {
        println!("{} {} {}", o.id, if o.pass { "PASS" } else { "FAIL" }, o.detail);
        all &= o.pass;
    }
    if !all {
        std::process::exit(1);
    }
}

//! Decoding with a forced candidate prefix, and the Replacement and
//! Placeholder baselines.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extraction::CandidateSet;
use crate::linalg::{argmax, log_sum_exp, Real};
use crate::model::input::{DecoderInput, EncoderInput, Example, PosTable};
use crate::model::{DecoderState, EmbedRow, Transformer};
use crate::synth::{AnnotatedSentence, Dictionary, EntityType};
use crate::vocab::{desegment, placeholder_token, segment, word_starts, Vocab, BOS, EOS, MAX_PLACEHOLDERS, PAD, SEP, SEP2, WORD_CONT};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Greedy,
    Beam,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub strategy: Strategy,
    pub beam_size: usize,
    /// GNMT length penalty exponent.
    pub length_penalty: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            strategy: Strategy::Beam,
            beam_size: 4,
            length_penalty: 0.6,
        }
    }
}

impl DecodeConfig {
    pub fn greedy() -> Self {
        DecodeConfig {
            strategy: Strategy::Greedy,
            beam_size: 1,
            length_penalty: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 {
            return Err(Error::Config("beam_size must be at least 1".into()));
        }
        if !(self.length_penalty >= 0.0) {
            return Err(Error::Config("length_penalty must be non-negative".into()));
        }
        Ok(())
    }

    /// Maximum number of generated tokens for a source of `src_len` tokens.
    pub fn length_cap(src_len: usize) -> usize {
        2 * src_len + 8
    }
}

/// A finished hypothesis: generated ids (EOS excluded) and, when recorded,
/// the cross-attention of the row that predicted each id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Decoded {
    pub ids: Vec<u32>,
    pub cross: Vec<Vec<f64>>,
    /// Sum of token log-probabilities, EOS included when emitted.
    pub log_prob: f64,
}

fn gnmt_penalty(len: usize, alpha: f64) -> f64 {
    ((5.0 + len as f64) / 6.0).powf(alpha)
}

fn log_probs<T: Real>(logits: &[T]) -> Vec<f64> {
    let l: Vec<f64> = logits.iter().map(|x| x.as_f64()).collect();
    let z = log_sum_exp(&l);
    l.iter().map(|x| x - z).collect()
}

fn target_row(tok: u32, pos: usize) -> EmbedRow {
    EmbedRow {
        tok,
        table: PosTable::E,
        pos,
        tag: None,
        rel: None,
    }
}

struct Beam<T> {
    st: DecoderState<T>,
    out: Decoded,
    /// Log-probabilities for the next token.
    next: Vec<f64>,
    next_cross: Vec<f64>,
}

/// Generates up to `cap` tokens after the forced `prefix` and BOS.
pub fn decode<T: Real>(
    model: &Transformer<T>,
    src: &EncoderInput,
    prefix: &[u32],
    cfg: &DecodeConfig,
    cap: usize,
    record_cross: bool,
) -> Result<Decoded> {
    cfg.validate()?;
    let enc = model.encode(src)?;
    let ex = Example {
        enc: EncoderInput::default(),
        dec: DecoderInput::new(prefix, &[]),
    };
    let rows = model.decoder_rows(&ex);
    let mut st = model.start(prefix.len());
    let first = model.feed(&enc, &mut st, &rows, record_cross)?;
    let v = model.config.vocab_size;
    let last = rows.len() - 1;
    // Target positions 1.. feed generated tokens; the table bounds the length.
    let cap = cap.min(model.config.max_tgt_len.saturating_sub(1));
    let beam_size = match cfg.strategy {
        Strategy::Greedy => 1,
        Strategy::Beam => cfg.beam_size,
    };
    let mut live = vec![Beam {
        st,
        out: Decoded::default(),
        next: log_probs(&first.logits[last * v..]),
        next_cross: if record_cross { first.cross[last].clone() } else { Vec::new() },
    }];
    let mut finished: Vec<(f64, Decoded)> = Vec::new();
    let alpha = cfg.length_penalty;

    if cfg.strategy == Strategy::Greedy {
        let mut b = live.pop().expect("one beam");
        loop {
            let tok = argmax(&b.next) as u32;
            b.out.log_prob += b.next[tok as usize];
            if tok == EOS {
                return Ok(b.out);
            }
            b.out.ids.push(tok);
            if record_cross {
                b.out.cross.push(std::mem::take(&mut b.next_cross));
            }
            if b.out.ids.len() >= cap {
                return Ok(b.out);
            }
            let step = model.feed(&enc, &mut b.st, &[target_row(tok, b.out.ids.len())], record_cross)?;
            b.next = log_probs(&step.logits);
            if record_cross {
                b.next_cross = step.cross.into_iter().next().unwrap_or_default();
            }
        }
    }

    // All live hypotheses have the same length, so the cap applies to all at once.
    while !live.is_empty() && finished.len() < beam_size && live[0].out.ids.len() < cap {
        // (score, beam, token), ordered by score then beam then token.
        let mut cands: Vec<(f64, usize, u32)> = Vec::new();
        for (bi, b) in live.iter().enumerate() {
            let mut idx: Vec<usize> = (0..v).collect();
            idx.sort_by(|&a, &c| b.next[c].total_cmp(&b.next[a]).then(a.cmp(&c)));
            for &t in idx.iter().take(beam_size) {
                cands.push((b.out.log_prob + b.next[t], bi, t as u32));
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut grown: Vec<(usize, Decoded)> = Vec::new();
        for (score, bi, tok) in cands {
            if grown.len() >= beam_size || finished.len() >= beam_size {
                break;
            }
            let mut out = live[bi].out.clone();
            out.log_prob = score;
            if tok == EOS {
                finished.push((score / gnmt_penalty(out.ids.len(), alpha), out));
                continue;
            }
            out.ids.push(tok);
            if record_cross {
                out.cross.push(live[bi].next_cross.clone());
            }
            grown.push((bi, out));
        }
        let mut next = Vec::with_capacity(grown.len());
        for (bi, out) in grown {
            let mut st = live[bi].st.clone();
            let tok = *out.ids.last().expect("extended");
            let step = model.feed(&enc, &mut st, &[target_row(tok, out.ids.len())], record_cross)?;
            next.push(Beam {
                st,
                next: log_probs(&step.logits),
                next_cross: step.cross.into_iter().next().unwrap_or_default(),
                out,
            });
        }
        live = next;
    }
    if finished.len() < beam_size {
        for b in live {
            let s = b.out.log_prob / gnmt_penalty(b.out.ids.len(), alpha);
            finished.push((s, b.out));
        }
    }
    finished.sort_by(|a, b| b.0.total_cmp(&a.0));
    Ok(finished.into_iter().next().map(|f| f.1).unwrap_or_default())
}

/// Drops control tokens from generated ids.
pub fn output_filter(ids: &[u32]) -> Vec<u32> {
    ids.iter().copied().filter(|&t| !matches!(t, PAD | BOS | EOS | SEP | SEP2)).collect()
}

/// Decodes a prepared example (source plus forced prefix) into target words.
pub fn translate<T: Real>(model: &Transformer<T>, vocab: &Vocab, ex: &Example, cfg: &DecodeConfig, src_words: usize) -> Result<Vec<String>> {
    let prefix = &ex.dec.ids[..ex.dec.prefix_len()];
    let d = decode(model, &ex.enc, prefix, cfg, DecodeConfig::length_cap(src_words), false)?;
    Ok(desegment(&vocab.decode(&output_filter(&d.ids))))
}

/// Replaces, for each entity, the output span aligned to its source pieces.
/// `cross[j]` is the attention of output piece `j` over source pieces. Each
/// entity's span is the hull of output pieces whose argmax falls inside its
/// source range, widened to whole words; positions taken by an earlier entity
/// are skipped. Returns the new pieces and the number of entities skipped.
pub fn replace_spans(
    output: &[String],
    cross: &[Vec<f64>],
    entities: &[(Range<usize>, Vec<String>)],
) -> (Vec<String>, usize) {
    let align: Vec<Option<usize>> = cross
        .iter()
        .map(|row| if row.is_empty() { None } else { Some(argmax(row)) })
        .collect();
    let mut taken = vec![false; output.len()];
    let mut spans: Vec<(Range<usize>, &[String])> = Vec::new();
    let mut skipped = 0;
    for (src, cand) in entities {
        let hits: Vec<usize> = (0..output.len())
            .filter(|&j| !taken[j] && align.get(j).copied().flatten().is_some_and(|a| src.contains(&a)))
            .collect();
        let Some(&lo) = hits.first() else {
            skipped += 1;
            continue;
        };
        let hi = *hits.last().expect("non-empty");
        let mut a = lo;
        while a > 0 && !taken[a - 1] && output[a - 1].ends_with(WORD_CONT) {
            a -= 1;
        }
        let mut b = a;
        while b < output.len() && !taken[b] && (b <= hi || output[b - 1].ends_with(WORD_CONT)) {
            b += 1;
        }
        for t in &mut taken[a..b] {
            *t = true;
        }
        spans.push((a..b, cand.as_slice()));
    }
    spans.sort_by_key(|s| s.0.start);
    let mut out = Vec::with_capacity(output.len());
    let mut j = 0;
    for (r, cand) in spans {
        out.extend_from_slice(&output[j..r.start]);
        out.extend_from_slice(cand);
        j = r.end;
    }
    out.extend_from_slice(&output[j..]);
    (out, skipped)
}

/// Replacement baseline: plain decode, then hard replacement of the
/// attention-aligned span of every entity with its chosen candidate.
pub fn replacement_postprocess<T: Real>(
    model: &Transformer<T>,
    vocab: &Vocab,
    s: &AnnotatedSentence,
    src: &EncoderInput,
    cands: &CandidateSet,
    cfg: &DecodeConfig,
) -> Result<(Vec<String>, usize)> {
    let d = decode(model, src, &[], cfg, DecodeConfig::length_cap(s.src_tokens.len()), true)?;
    let keep: Vec<usize> = (0..d.ids.len()).filter(|&i| output_filter(&d.ids[i..=i]).len() == 1).collect();
    let pieces: Vec<String> = keep.iter().map(|&i| vocab.token(d.ids[i]).to_string()).collect();
    let cross: Vec<Vec<f64>> = keep.iter().map(|&i| d.cross[i].clone()).collect();
    let starts = word_starts(&s.src_tokens);
    let ents: Vec<(Range<usize>, Vec<String>)> = cands
        .entries
        .iter()
        .map(|e| (starts[e.span.start]..starts[e.span.end], segment(e.chosen()).0))
        .collect();
    let (out, skipped) = replace_spans(&pieces, &cross, &ents);
    Ok((desegment(&out), skipped))
}

/// Source-side placeholder substitution: each entity with a candidate is
/// replaced by the next free placeholder of its type. Returns the new source
/// and, per placeholder token, the entity's candidate words.
pub fn placeholder_source(s: &AnnotatedSentence, cands: &CandidateSet) -> (Vec<String>, Vec<(String, Vec<String>)>) {
    let mut counts = [0usize; 3];
    let mut src = Vec::with_capacity(s.src_tokens.len());
    let mut map = Vec::new();
    let mut j = 0;
    for e in &cands.entries {
        let k = type_slot(e.span.etype);
        if counts[k] >= MAX_PLACEHOLDERS {
            continue;
        }
        counts[k] += 1;
        let plh = placeholder_token(e.span.etype, counts[k]);
        src.extend_from_slice(&s.src_tokens[j..e.span.start]);
        src.push(plh.clone());
        j = e.span.end;
        map.push((plh, e.chosen().to_vec()));
    }
    src.extend_from_slice(&s.src_tokens[j..]);
    (src, map)
}

fn type_slot(t: EntityType) -> usize {
    match t {
        EntityType::Per => 0,
        EntityType::Org => 1,
        EntityType::Loc => 2,
    }
}

/// Placeholder-transformed training pair built from gold spans: source and
/// reference entity spans become typed indexed placeholders, up to four per type.
pub fn placeholder_training_pair(s: &AnnotatedSentence) -> AnnotatedSentence {
    let mut counts = [0usize; 3];
    let mut src_repl: Vec<(Range<usize>, String)> = Vec::new();
    let mut tgt_repl: Vec<(Range<usize>, String)> = Vec::new();
    for e in &s.entities {
        let k = type_slot(e.etype);
        if counts[k] >= MAX_PLACEHOLDERS {
            continue;
        }
        counts[k] += 1;
        let plh = placeholder_token(e.etype, counts[k]);
        src_repl.push((e.start..e.end, plh.clone()));
        tgt_repl.push((e.tgt_start..e.tgt_end, plh));
    }
    tgt_repl.sort_by_key(|r| r.0.start);
    AnnotatedSentence {
        src_tokens: splice(&s.src_tokens, &src_repl),
        tgt_tokens: splice(&s.tgt_tokens, &tgt_repl),
        entities: Vec::new(),
    }
}

fn splice(tokens: &[String], repl: &[(Range<usize>, String)]) -> Vec<String> {
    let mut out = Vec::with_capacity(tokens.len());
    let mut j = 0;
    for (r, t) in repl {
        out.extend_from_slice(&tokens[j..r.start]);
        out.push(t.clone());
        j = r.end;
    }
    out.extend_from_slice(&tokens[j..]);
    out
}

/// Restores placeholders in a decoded sentence. Every emitted placeholder is
/// replaced by its entity's candidate; unknown placeholders are dropped.
pub fn restore_placeholders(output: &[String], map: &[(String, Vec<String>)]) -> Vec<String> {
    let mut out = Vec::with_capacity(output.len());
    for w in output {
        if let Some((_, cand)) = map.iter().find(|(p, _)| p == w) {
            out.extend(cand.iter().cloned());
        } else if !w.starts_with("PLH_") {
            out.push(w.clone());
        }
    }
    out
}

/// Placeholder baseline end to end; `encode` turns the transformed source
/// words into the model's encoder input.
pub fn placeholder_pipeline<T: Real>(
    model: &Transformer<T>,
    vocab: &Vocab,
    s: &AnnotatedSentence,
    cands: &CandidateSet,
    cfg: &DecodeConfig,
) -> Result<Vec<String>> {
    let (src, map) = placeholder_source(s, cands);
    let (pieces, _) = segment(&src);
    let enc = EncoderInput::plain(vocab.encode(&pieces), vec![0; pieces.len()])?;
    let ex = Example {
        enc,
        dec: DecoderInput::default(),
    };
    let out = translate(model, vocab, &ex, cfg, src.len())?;
    Ok(restore_placeholders(&out, &map))
}

/// Training corpus with every dictionary pair appended as its own sentence.
pub fn transformer_with_dictionary_corpus(corpus: &[AnnotatedSentence], dictionary: &Dictionary) -> Vec<AnnotatedSentence> {
    let mut out = corpus.to_vec();
    out.extend(dictionary.pairs().map(|p| AnnotatedSentence {
        src_tokens: p.src_surface,
        tgt_tokens: p.tgt_surface,
        entities: Vec::new(),
    }));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extraction::{CandidateEntry, CandidateSource, Detection};
    use crate::model::ModelConfig;
    use crate::rng;
    use crate::synth::{EntityPair, EntitySpan, Nationality};

    fn w(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    fn tiny() -> Transformer<f64> {
        let cfg = ModelConfig {
            layers: 2,
            hidden_dim: 8,
            heads: 2,
            ffn_dim: 12,
            max_src_len: 16,
            max_prefix_len: 8,
            max_tgt_len: 24,
            max_cand_len: 8,
            vocab_size: 30,
            ..ModelConfig::default()
        };
        Transformer::new(cfg, &mut rng::rng(21)).unwrap()
    }

    #[test]
    fn beam_one_is_greedy() {
        let m = tiny();
        for seed in 0..100u64 {
            let mut r = rng::rng(seed);
            use rand::Rng as _;
            let n = r.gen_range(1..6);
            let src: Vec<u32> = (0..n).map(|_| r.gen_range(22..30)).collect();
            let enc = EncoderInput::plain(src, vec![0; n]).unwrap();
            let g = decode(&m, &enc, &[24, 25], &DecodeConfig::greedy(), 12, false).unwrap();
            for alpha in [0.0, 0.6] {
                let b = DecodeConfig {
                    strategy: Strategy::Beam,
                    beam_size: 1,
                    length_penalty: alpha,
                };
                assert_eq!(decode(&m, &enc, &[24, 25], &b, 12, false).unwrap().ids, g.ids);
            }
        }
    }

    #[test]
    fn forced_prefix_matches_teacher_forcing() {
        let m = tiny();
        let enc = EncoderInput::plain(vec![22, 23, 24], vec![0; 3]).unwrap();
        let g = decode(&m, &enc, &[26, 27], &DecodeConfig::greedy(), 6, false).unwrap();
        let ex = Example {
            enc: enc.clone(),
            dec: DecoderInput::new(&[26, 27], &g.ids),
        };
        let logits = m.logits(&ex).unwrap();
        // Each generated token is the argmax of the teacher-forced row before it.
        for (i, &t) in g.ids.iter().enumerate() {
            let row = &logits[(2 + i) * 30..(3 + i) * 30];
            assert_eq!(argmax(row) as u32, t);
        }
        assert!(g.ids.len() <= 6);
    }

    #[test]
    fn beam_respects_cap_and_is_deterministic() {
        let m = tiny();
        let enc = EncoderInput::plain(vec![22, 29, 24], vec![0; 3]).unwrap();
        let cfg = DecodeConfig::default();
        let a = decode(&m, &enc, &[], &cfg, 5, true).unwrap();
        assert!(a.ids.len() <= 5);
        assert_eq!(a.cross.len(), a.ids.len());
        assert_eq!(a, decode(&m, &enc, &[], &cfg, 5, true).unwrap());
    }

    #[test]
    fn filter_drops_control_tokens() {
        assert_eq!(output_filter(&[BOS, 22, SEP, 23, SEP2, EOS, PAD]), vec![22, 23]);
    }

    #[test]
    fn replacement_on_diagonal_attention() {
        // Copy task: output piece j attends to source piece j.
        let out = w("t1 x@@ y t2");
        let cross: Vec<Vec<f64>> = (0..4)
            .map(|j| (0..4).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        let (r, skipped) = replace_spans(&out, &cross, &[(1..3, w("q@@ r@@ s"))]);
        assert_eq!(r, w("t1 q@@ r@@ s t2"));
        assert_eq!(skipped, 0);
        let (r, skipped) = replace_spans(&out, &cross, &[]);
        assert_eq!((r, skipped), (out.clone(), 0));
        // An entity nothing attends to is skipped.
        let (r, skipped) = replace_spans(&out, &cross, &[(7..8, w("z"))]);
        assert_eq!((r, skipped), (out, 1));
    }

    #[test]
    fn replacement_widens_to_words_and_skips_taken() {
        let out = w("a@@ b@@ c d");
        let cross = vec![vec![0.0, 1.0], vec![0.0, 1.0], vec![1.0, 0.0], vec![0.0, 1.0]];
        // Only piece 1 aligns inside 1..2 at first, but the hull widens to the whole word
        // and then extends to d; a second entity over the same range finds nothing left.
        let (r, skipped) = replace_spans(&out, &cross, &[(1..2, w("z")), (1..2, w("y"))]);
        assert_eq!(r, w("z"));
        assert_eq!(skipped, 1);
    }

    fn sentence() -> AnnotatedSentence {
        let span = |start, end, t, ts, te, src: &str, tgt: &str| EntitySpan {
            start,
            end,
            etype: t,
            nationality: Nationality::Alpha,
            src_surface: w(src),
            gold_tgt_surface: w(tgt),
            tgt_start: ts,
            tgt_end: te,
        };
        AnnotatedSentence {
            src_tokens: w("s1 abc s2 def gh"),
            tgt_tokens: w("t2 bcd efg hi t1"),
            entities: vec![
                span(1, 2, EntityType::Per, 1, 2, "abc", "bcd"),
                span(3, 5, EntityType::Per, 2, 4, "def gh", "efg hi"),
            ],
        }
    }

    fn cands(s: &AnnotatedSentence) -> CandidateSet {
        CandidateSet {
            entries: s
                .entities
                .iter()
                .enumerate()
                .map(|(i, e)| CandidateEntry {
                    span: Detection {
                        start: e.start,
                        end: e.end,
                        etype: e.etype,
                        gold: Some(i),
                    },
                    candidates: vec![e.gold_tgt_surface.clone()],
                    chosen_index: 0,
                    source: CandidateSource::Dict,
                })
                .collect(),
        }
    }

    #[test]
    fn placeholder_round_trip() {
        let s = sentence();
        let p = placeholder_training_pair(&s);
        assert_eq!(p.src_tokens, w("s1 PLH_PER_1 s2 PLH_PER_2"));
        assert_eq!(p.tgt_tokens, w("t2 PLH_PER_1 PLH_PER_2 t1"));
        let (src, map) = placeholder_source(&s, &cands(&s));
        assert_eq!(src, p.src_tokens);
        assert_eq!(restore_placeholders(&p.tgt_tokens, &map), s.tgt_tokens);
        // Duplicates are both replaced, missing ones simply absent.
        assert_eq!(restore_placeholders(&w("PLH_PER_1 x PLH_PER_1 PLH_LOC_3"), &map), w("bcd x bcd"));
        let (src, map) = placeholder_source(&s, &CandidateSet::default());
        assert_eq!((src, map.len()), (s.src_tokens.clone(), 0));
    }

    #[test]
    fn placeholder_cap_per_type() {
        let mut s = AnnotatedSentence {
            src_tokens: w("a b c d e"),
            tgt_tokens: w("a b c d e"),
            entities: Vec::new(),
        };
        for i in 0..5 {
            s.entities.push(EntitySpan {
                start: i,
                end: i + 1,
                etype: EntityType::Loc,
                nationality: Nationality::Other,
                src_surface: vec![s.src_tokens[i].clone()],
                gold_tgt_surface: vec![s.src_tokens[i].clone()],
                tgt_start: i,
                tgt_end: i + 1,
            });
        }
        let p = placeholder_training_pair(&s);
        assert_eq!(p.src_tokens, w("PLH_LOC_1 PLH_LOC_2 PLH_LOC_3 PLH_LOC_4 e"));
        let (src, map) = placeholder_source(&s, &cands(&s));
        assert_eq!(src, p.src_tokens);
        assert_eq!(map.len(), 4);
    }

    #[test]
    fn dictionary_corpus() {
        let s = sentence();
        let empty = Dictionary::default();
        assert_eq!(transformer_with_dictionary_corpus(&[s.clone()], &empty), vec![s.clone()]);
        let mut d = Dictionary::default();
        d.insert(EntityPair {
            src_surface: w("abc"),
            tgt_surface: w("bcd"),
            etype: EntityType::Per,
            nationality: Nationality::Alpha,
            frequency: 3,
        });
        let aug = transformer_with_dictionary_corpus(&[s], &d);
        assert_eq!(aug.len(), 1 + d.pairs().count());
        assert!(aug[1].entities.is_empty());
        assert_eq!(aug[1].tgt_tokens, w("bcd"));
    }
}

//! Model inputs: encoder rows with type tags, decoder inputs with a candidate
//! prefix, and the encoder-attend variant.

use crate::error::{Error, Result};
use crate::extraction::{CandidateSet, Detection};
use crate::vocab::{segment, Vocab, BOS, EOS, PAD, SEP, SEP2};

/// Type tag for tokens outside any entity.
pub const TAG_O: u8 = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PosTable {
    Src,
    /// Candidate prefix.
    Ce,
    /// Target tokens from BOS on.
    E,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Segment {
    Prefix,
    Target,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EncoderInput {
    pub ids: Vec<u32>,
    /// Index into the source position table.
    pub positions: Vec<usize>,
    pub type_tags: Vec<u8>,
    /// Within-candidate relative position, for appended candidate tokens.
    pub rel: Vec<Option<usize>>,
}

impl EncoderInput {
    pub fn plain(src_ids: Vec<u32>, type_tags: Vec<u8>) -> Result<Self> {
        if src_ids.len() != type_tags.len() {
            return Err(Error::Config(format!(
                "{} source ids but {} type tags",
                src_ids.len(),
                type_tags.len()
            )));
        }
        let n = src_ids.len();
        Ok(EncoderInput {
            ids: src_ids,
            positions: (0..n).collect(),
            type_tags,
            rel: vec![None; n],
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DecoderInput {
    /// `prefix ++ [BOS] ++ target`.
    pub ids: Vec<u32>,
    pub position_ids: Vec<usize>,
    pub segment: Vec<Segment>,
    /// Next-token labels aligned with `ids`; prefix rows carry PAD.
    pub labels: Vec<u32>,
    pub loss_mask: Vec<bool>,
}

impl DecoderInput {
    pub fn new(prefix: &[u32], target: &[u32]) -> Self {
        let p = prefix.len();
        let mut d = DecoderInput::default();
        for (i, &t) in prefix.iter().enumerate() {
            d.ids.push(t);
            d.position_ids.push(i);
            d.segment.push(Segment::Prefix);
            d.labels.push(PAD);
            d.loss_mask.push(false);
        }
        d.ids.push(BOS);
        d.ids.extend_from_slice(target);
        for j in 0..=target.len() {
            d.position_ids.push(j);
            d.segment.push(Segment::Target);
            d.labels.push(if j < target.len() { target[j] } else { EOS });
            d.loss_mask.push(true);
        }
        debug_assert_eq!(d.ids.len(), p + target.len() + 1);
        d
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn prefix_len(&self) -> usize {
        self.segment.iter().take_while(|&&s| s == Segment::Prefix).count()
    }

    pub fn table(&self, i: usize) -> PosTable {
        match self.segment[i] {
            Segment::Prefix => PosTable::Ce,
            Segment::Target => PosTable::E,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.ids.len();
        if self.position_ids.len() != n || self.segment.len() != n || self.labels.len() != n || self.loss_mask.len() != n {
            return Err(Error::Config("decoder input fields have unequal lengths".into()));
        }
        let p = self.prefix_len();
        if p == n || self.ids[p] != BOS || self.segment[p..].contains(&Segment::Prefix) {
            return Err(Error::Config("decoder input must be prefix, BOS, target".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Example {
    pub enc: EncoderInput,
    pub dec: DecoderInput,
}

fn encode_words(words: &[String], vocab: &Vocab) -> Vec<u32> {
    vocab.encode(&segment(words).0)
}

/// `cand₁ [SEP] cand₂ …`, variants of one entity joined by `[SEP2]`.
/// Whole trailing candidates that do not fit in `max_len` are dropped; the
/// second value counts them.
pub fn build_decoder_prefix(
    candidates: &CandidateSet,
    vocab: &Vocab,
    max_candidates: usize,
    use_inner_sep: bool,
    max_len: usize,
) -> (Vec<u32>, usize) {
    let mut out = Vec::new();
    let mut dropped = 0;
    let mut full = false;
    for (e, entry) in candidates.entries.iter().enumerate() {
        let k = max_candidates.max(1).min(entry.candidates.len());
        for (v, cand) in entry.candidates.iter().take(k).enumerate() {
            if full {
                dropped += 1;
                continue;
            }
            let sep = match (e, v) {
                (0, 0) => None,
                (_, 0) => Some(SEP),
                _ if use_inner_sep => Some(SEP2),
                _ => Some(SEP),
            };
            let ids = encode_words(cand, vocab);
            let need = ids.len() + usize::from(sep.is_some());
            if out.len() + need > max_len {
                full = true;
                dropped += 1;
                continue;
            }
            out.extend(sep);
            out.extend(ids);
        }
    }
    if dropped > 0 {
        log::warn!("decoder prefix truncated: {dropped} candidates dropped");
    }
    (out, dropped)
}

/// Per-piece type tags for a source sentence given detected word spans.
pub fn source_type_tags(word_starts: &[usize], detections: &[Detection]) -> Vec<u8> {
    let n = *word_starts.last().unwrap_or(&0);
    let mut tags = vec![TAG_O; n];
    for d in detections {
        for t in &mut tags[word_starts[d.start]..word_starts[d.end]] {
            *t = d.etype.tag();
        }
    }
    tags
}

/// Appends candidates to the encoder input. Candidate pieces share the source
/// position of their entity's first piece and add a relative position; an
/// inter-entity `[SEP]` continues the previous entity's numbering.
pub fn build_encoder_input_with_candidates(
    base: EncoderInput,
    word_starts: &[usize],
    candidates: &CandidateSet,
    vocab: &Vocab,
    max_candidates: usize,
    use_inner_sep: bool,
) -> EncoderInput {
    let mut inp = base;
    let mut last: Option<(usize, usize)> = None;
    for entry in &candidates.entries {
        let pos = word_starts[entry.span.start];
        let tag = entry.span.etype.tag();
        if let Some((lp, lr)) = last {
            inp.ids.push(SEP);
            inp.positions.push(lp);
            inp.type_tags.push(TAG_O);
            inp.rel.push(Some(lr));
        }
        let mut r = 0;
        let k = max_candidates.max(1).min(entry.candidates.len());
        for (v, cand) in entry.candidates.iter().take(k).enumerate() {
            if v > 0 {
                inp.ids.push(if use_inner_sep { SEP2 } else { SEP });
                inp.positions.push(pos);
                inp.type_tags.push(tag);
                inp.rel.push(Some(r));
                r += 1;
            }
            for id in encode_words(cand, vocab) {
                inp.ids.push(id);
                inp.positions.push(pos);
                inp.type_tags.push(tag);
                inp.rel.push(Some(r));
                r += 1;
            }
        }
        last = Some((pos, r));
    }
    inp
}

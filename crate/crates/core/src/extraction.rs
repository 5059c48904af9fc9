//! The "extract" half: entity detection, dictionary lookup, candidate
//! selection and the transliteration fallback.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::synth::{AnnotatedSentence, Dictionary, EntityType};

/// Known entity surfaces, matched longest-first.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Gazetteer {
    surfaces: BTreeMap<Vec<String>, EntityType>,
    max_len: usize,
}

impl Gazetteer {
    pub fn from_entities<'a>(it: impl IntoIterator<Item = (&'a Vec<String>, EntityType)>) -> Self {
        let mut g = Gazetteer::default();
        for (s, t) in it {
            g.insert(s.clone(), t);
        }
        g
    }

    pub fn insert(&mut self, surface: Vec<String>, t: EntityType) {
        self.max_len = self.max_len.max(surface.len());
        self.surfaces.insert(surface, t);
    }

    pub fn len(&self) -> usize {
        self.surfaces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.surfaces.is_empty()
    }

    /// Left-to-right scan taking the longest gazetteer match at each position.
    pub fn longest_matches(&self, tokens: &[String]) -> Vec<(usize, usize, EntityType)> {
        let mut out = Vec::new();
        let mut i = 0;
        while i < tokens.len() {
            let max = self.max_len.min(tokens.len() - i);
            let hit = (1..=max)
                .rev()
                .find_map(|l| self.surfaces.get(&tokens[i..i + l]).map(|t| (l, *t)));
            match hit {
                Some((l, t)) => {
                    out.push((i, i + l, t));
                    i += l;
                }
                None => i += 1,
            }
        }
        out
    }

    /// One surface per line: `surface<TAB>type`.
    pub fn write(&self, path: &Path, fingerprint: &str) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "# fingerprint={fingerprint}")?;
        for (s, t) in &self.surfaces {
            writeln!(w, "{}\t{}", s.join(" "), t)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<(Self, Option<String>)> {
        let name = path.display().to_string();
        let mut g = Gazetteer::default();
        let mut fp = None;
        for (i, line) in BufReader::new(std::fs::File::open(path)?).lines().enumerate() {
            let line = line?;
            if let Some(rest) = line.strip_prefix("# fingerprint=") {
                fp = Some(rest.to_string());
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let (s, t) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(&name, i + 1, "expected surface<TAB>type"))?;
            g.insert(s.split(' ').map(str::to_string).collect(), t.parse()?);
        }
        Ok((g, fp))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NerKind {
    Gold,
    Gazetteer,
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NerMode {
    pub kind: NerKind,
    pub p_miss: f64,
    pub p_spurious: f64,
    pub p_boundary: f64,
}

impl NerMode {
    pub fn gold() -> Self {
        NerMode {
            kind: NerKind::Gold,
            p_miss: 0.0,
            p_spurious: 0.0,
            p_boundary: 0.0,
        }
    }

    pub fn gazetteer(p_miss: f64, p_spurious: f64, p_boundary: f64) -> Self {
        NerMode {
            kind: NerKind::Gazetteer,
            p_miss,
            p_spurious,
            p_boundary,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (n, p) in [("p_miss", self.p_miss), ("p_spurious", self.p_spurious), ("p_boundary", self.p_boundary)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{n} must be in [0,1], got {p}")));
            }
        }
        if self.kind == NerKind::Gold && (self.p_miss > 0.0 || self.p_spurious > 0.0 || self.p_boundary > 0.0) {
            return Err(Error::Config("gold NER cannot carry noise".into()));
        }
        Ok(())
    }

    pub fn is_noisy(&self) -> bool {
        self.p_miss > 0.0 || self.p_spurious > 0.0 || self.p_boundary > 0.0
    }
}

/// A detected entity span. `gold` is the index of the gold entity with the
/// exact same span, when there is one; it is bookkeeping for training-time
/// selection and for scoring, never model input.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Detection {
    pub start: usize,
    pub end: usize,
    pub etype: EntityType,
    pub gold: Option<usize>,
}

fn gold_index(s: &AnnotatedSentence, start: usize, end: usize) -> Option<usize> {
    s.entities.iter().position(|e| e.start == start && e.end == end)
}

pub fn detect_entities(s: &AnnotatedSentence, ner: &NerMode, gazetteer: &Gazetteer, rng: &mut Rng) -> Vec<Detection> {
    let spans: Vec<(usize, usize, EntityType)> = match ner.kind {
        NerKind::Gold => s.entities.iter().map(|e| (e.start, e.end, e.etype)).collect(),
        NerKind::Gazetteer => gazetteer.longest_matches(&s.src_tokens),
    };
    if !ner.is_noisy() {
        return spans
            .into_iter()
            .map(|(a, b, t)| Detection {
                start: a,
                end: b,
                etype: t,
                gold: gold_index(s, a, b),
            })
            .collect();
    }

    let n = s.src_tokens.len();
    let mut kept: Vec<(usize, usize, EntityType)> = spans.into_iter().filter(|_| !rng.gen_bool(ner.p_miss)).collect();
    for i in 0..kept.len() {
        if !rng.gen_bool(ner.p_boundary) {
            continue;
        }
        let lo = if i == 0 { 0 } else { kept[i - 1].1 };
        let hi = if i + 1 == kept.len() { n } else { kept[i + 1].0 };
        let (a, b, t) = kept[i];
        let (na, nb) = match rng.gen_range(0..4) {
            0 => (a.wrapping_sub(1), b),
            1 => (a + 1, b),
            2 => (a, b.wrapping_sub(1)),
            _ => (a, b + 1),
        };
        if na < nb && na >= lo && nb <= hi && na != usize::MAX {
            kept[i] = (na, nb, t);
        }
    }
    if n > 0 && rng.gen_bool(ner.p_spurious) {
        let free: Vec<usize> = (0..n).filter(|&p| !kept.iter().any(|&(a, b, _)| a <= p && p < b)).collect();
        if !free.is_empty() {
            let p = free[rng.gen_range(0..free.len())];
            let t = EntityType::ALL[rng.gen_range(0..3)];
            kept.push((p, p + 1, t));
            kept.sort_by_key(|k| k.0);
        }
    }
    kept.into_iter()
        .map(|(a, b, t)| Detection {
            start: a,
            end: b,
            etype: t,
            gold: gold_index(s, a, b),
        })
        .collect()
}

/// Unit-cost edit distance.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Character-level distance between two token sequences joined by spaces.
pub fn surface_distance(a: &[String], b: &[String]) -> usize {
    let ca: Vec<char> = a.join(" ").chars().collect();
    let cb: Vec<char> = b.join(" ").chars().collect();
    levenshtein(&ca, &cb)
}

#[derive(Clone, Copy, Debug)]
pub enum Selection<'a> {
    /// Closest candidate to the gold target surface.
    Train { reference: &'a [String] },
    /// Most frequent candidate in the training corpus.
    Infer,
}

/// Candidate indices in preference order; ties keep dictionary order.
pub fn rank_candidates(candidates: &[Vec<String>], mode: Selection<'_>, frequencies: &[u64]) -> Result<Vec<usize>> {
    if candidates.is_empty() {
        return Err(Error::Empty("candidates"));
    }
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    match mode {
        Selection::Train { reference } => {
            let d: Vec<usize> = candidates.iter().map(|c| surface_distance(c, reference)).collect();
            order.sort_by_key(|&i| (d[i], i));
        }
        Selection::Infer => {
            order.sort_by_key(|&i| (std::cmp::Reverse(frequencies.get(i).copied().unwrap_or(0)), i));
        }
    }
    Ok(order)
}

pub fn select_candidate(candidates: &[Vec<String>], mode: Selection<'_>, frequencies: &[u64]) -> Result<usize> {
    Ok(rank_candidates(candidates, mode, frequencies)?[0])
}

/// Produces a target-language rendering of an entity not in the dictionary.
pub trait Transliterator {
    fn transliterate_entity(&self, entity: &[String], sentence: &[String]) -> Vec<String>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CandidateSource {
    Dict,
    Translit,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CandidateEntry {
    pub span: Detection,
    /// Ranked candidates, most preferred first (at most `max_candidates`).
    pub candidates: Vec<Vec<String>>,
    pub chosen_index: usize,
    pub source: CandidateSource,
}

impl CandidateEntry {
    pub fn chosen(&self) -> &[String] {
        &self.candidates[self.chosen_index]
    }
}

/// Per-sentence candidates in source order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CandidateSet {
    pub entries: Vec<CandidateEntry>,
}

impl CandidateSet {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SelectMode {
    Train,
    Infer,
}

/// Dictionary lookup with optional transliteration fallback.
pub struct Extractor<'a> {
    pub dictionary: &'a Dictionary,
    pub translit: Option<&'a dyn Transliterator>,
    pub max_candidates: usize,
}

impl Extractor<'_> {
    pub fn extract(&self, s: &AnnotatedSentence, detections: &[Detection], mode: SelectMode) -> CandidateSet {
        let mut entries = Vec::with_capacity(detections.len());
        for det in detections {
            let surface = &s.src_tokens[det.start..det.end];
            if let Some(entry) = self.dictionary.lookup(surface) {
                let cands: Vec<Vec<String>> = entry.candidates.iter().map(|c| c.tokens.clone()).collect();
                let freqs: Vec<u64> = entry.candidates.iter().map(|c| c.frequency).collect();
                let reference = match (mode, det.gold) {
                    (SelectMode::Train, Some(g)) => Some(&s.entities[g].gold_tgt_surface),
                    _ => None,
                };
                let sel = match reference {
                    Some(r) => Selection::Train { reference: r },
                    None => Selection::Infer,
                };
                let order = rank_candidates(&cands, sel, &freqs).expect("dictionary entries are non-empty");
                let k = self.max_candidates.max(1);
                entries.push(CandidateEntry {
                    span: det.clone(),
                    candidates: order.iter().take(k).map(|&i| cands[i].clone()).collect(),
                    chosen_index: 0,
                    source: CandidateSource::Dict,
                });
            } else if let Some(t) = self.translit {
                let c = t.transliterate_entity(surface, &s.src_tokens);
                if c.is_empty() {
                    continue;
                }
                entries.push(CandidateEntry {
                    span: det.clone(),
                    candidates: vec![c],
                    chosen_index: 0,
                    source: CandidateSource::Translit,
                });
            }
        }
        CandidateSet { entries }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::synth::{apply_translit_rule, EntityPair, EntitySpan, Nationality};
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    /// Exhaustive recursion over edit scripts.
    fn lev_brute(a: &[char], b: &[char]) -> usize {
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

    fn chars(s: &str) -> Vec<char> {
        s.chars().collect()
    }

    #[test]
    fn levenshtein_examples() {
        assert_eq!(levenshtein(&chars(""), &chars("abc")), 3);
        assert_eq!(levenshtein(&chars("abc"), &chars("abc")), 0);
        assert_eq!(lev_brute(&chars("kitten"), &chars("sitting")), 3);
        assert_eq!(levenshtein(&chars("kitten"), &chars("sitting")), 3);
    }

    proptest! {
        #[test]
        fn levenshtein_is_a_metric(a in "[a-d]{0,8}", b in "[a-d]{0,8}", c in "[a-d]{0,8}") {
            let (a, b, c) = (chars(&a), chars(&b), chars(&c));
            let ab = levenshtein(&a, &b);
            prop_assert_eq!(ab, levenshtein(&b, &a));
            prop_assert_eq!(ab == 0, a == b);
            prop_assert!(levenshtein(&a, &c) <= ab + levenshtein(&b, &c));
        }

        #[test]
        fn train_selection_finds_exact_match(
            cands in prop::collection::vec("[a-c]{1,4}", 1..5),
            pick in 0usize..5,
        ) {
            let cands: Vec<Vec<String>> = cands.into_iter().map(|c| vec![c]).collect();
            let reference = cands[pick % cands.len()].clone();
            let i = select_candidate(&cands, Selection::Train { reference: &reference }, &[]).unwrap();
            prop_assert_eq!(surface_distance(&cands[i], &reference), 0);
        }
    }

    #[test]
    fn selection_examples() {
        let cands = vec![toks("约翰·维尔逊"), toks("约翰·威尔森")];
        let r = toks("约翰·维尔逊");
        assert_eq!(select_candidate(&cands, Selection::Train { reference: &r }, &[]).unwrap(), 0);
        let cands = vec![toks("bcd"), toks("bcdd")];
        assert_eq!(
            select_candidate(&cands, Selection::Train { reference: &toks("bcd") }, &[]).unwrap(),
            0
        );
        assert_eq!(select_candidate(&cands, Selection::Infer, &[5, 9]).unwrap(), 1);
        assert_eq!(select_candidate(&cands, Selection::Infer, &[4, 4]).unwrap(), 0);
        assert!(select_candidate(&[], Selection::Infer, &[]).is_err());
    }

    #[test]
    fn gazetteer_longest_match_left_to_right() {
        let mut g = Gazetteer::default();
        g.insert(toks("a b"), EntityType::Per);
        g.insert(toks("b c"), EntityType::Loc);
        g.insert(toks("a"), EntityType::Org);
        assert_eq!(g.longest_matches(&toks("a b c")), vec![(0, 2, EntityType::Per)]);
        assert!(Gazetteer::default().longest_matches(&toks("a b c")).is_empty());
    }

    fn sentence() -> AnnotatedSentence {
        let e = |start, end, src: &str, tgt: &str, ts, te| EntitySpan {
            start,
            end,
            etype: EntityType::Per,
            nationality: Nationality::Alpha,
            src_surface: toks(src),
            gold_tgt_surface: toks(tgt),
            tgt_start: ts,
            tgt_end: te,
        };
        AnnotatedSentence {
            src_tokens: toks("s1 abc s2 hhg ab s3"),
            tgt_tokens: toks("bcd t1 iih bc t2 t3"),
            entities: vec![e(1, 2, "abc", "bcd", 0, 1), e(3, 5, "hhg ab", "iih bc", 2, 4)],
        }
    }

    #[test]
    fn gold_mode_returns_gold_spans() {
        let s = sentence();
        let d = detect_entities(&s, &NerMode::gold(), &Gazetteer::default(), &mut rng::rng(0));
        assert_eq!(d.len(), 2);
        assert_eq!((d[1].start, d[1].end, d[1].gold), (3, 5, Some(1)));
    }

    #[test]
    fn gazetteer_mode_with_empty_gazetteer_finds_nothing() {
        let s = sentence();
        let d = detect_entities(&s, &NerMode::gazetteer(0.0, 0.0, 0.0), &Gazetteer::default(), &mut rng::rng(0));
        assert!(d.is_empty());
    }

    #[test]
    fn noise_knobs() {
        let s = sentence();
        let g = Gazetteer::from_entities(s.entities.iter().map(|e| (&e.src_surface, e.etype)));
        let all_miss = detect_entities(&s, &NerMode::gazetteer(1.0, 0.0, 0.0), &g, &mut rng::rng(0));
        assert!(all_miss.is_empty());
        let spur = detect_entities(&s, &NerMode::gazetteer(0.0, 1.0, 0.0), &g, &mut rng::rng(0));
        assert_eq!(spur.len(), 3);
        assert_eq!(spur.iter().filter(|d| d.gold.is_none()).count(), 1);
        assert!(spur.windows(2).all(|w| w[0].end <= w[1].start));
        for seed in 0..20 {
            let b = detect_entities(&s, &NerMode::gazetteer(0.0, 0.0, 1.0), &g, &mut rng::rng(seed));
            assert!(b.windows(2).all(|w| w[0].end <= w[1].start));
            assert!(b.iter().all(|d| d.start < d.end && d.end <= s.src_tokens.len()));
        }
        assert!(NerMode {
            p_miss: 0.1,
            ..NerMode::gold()
        }
        .validate()
        .is_err());
    }

    struct RuleOracle;
    impl Transliterator for RuleOracle {
        fn transliterate_entity(&self, entity: &[String], _sentence: &[String]) -> Vec<String> {
            apply_translit_rule(Nationality::Alpha, entity)
        }
    }

    #[test]
    fn extraction_dictionary_then_fallback() {
        let s = sentence();
        let mut dict = Dictionary::default();
        dict.insert(EntityPair {
            src_surface: toks("abc"),
            tgt_surface: toks("bcd"),
            etype: EntityType::Per,
            nationality: Nationality::Alpha,
            frequency: 3,
        });
        let det = detect_entities(&s, &NerMode::gold(), &Gazetteer::default(), &mut rng::rng(0));

        let no_translit = Extractor {
            dictionary: &dict,
            translit: None,
            max_candidates: 1,
        };
        let cs = no_translit.extract(&s, &det, SelectMode::Infer);
        assert_eq!(cs.len(), 1);
        assert_eq!(cs.entries[0].chosen(), toks("bcd"));
        assert_eq!(cs.entries[0].source, CandidateSource::Dict);

        let with = Extractor {
            dictionary: &dict,
            translit: Some(&RuleOracle),
            max_candidates: 1,
        };
        let cs = with.extract(&s, &det, SelectMode::Infer);
        assert_eq!(cs.len(), 2);
        assert_eq!(cs.entries[1].chosen(), RuleOracle.transliterate_entity(&toks("hhg ab"), &s.src_tokens));
        assert_eq!(cs.entries[1].source, CandidateSource::Translit);
        assert!(cs.entries.windows(2).all(|w| w[0].span.start < w[1].span.start));
    }

    #[test]
    fn train_mode_picks_reference_variant() {
        let mut s = sentence();
        s.tgt_tokens[0] = "bcdd".into();
        s.entities[0].gold_tgt_surface = toks("bcdd");
        let mut dict = Dictionary::default();
        for (t, f) in [("bcd", 10), ("bcdd", 1)] {
            dict.insert(EntityPair {
                src_surface: toks("abc"),
                tgt_surface: toks(t),
                etype: EntityType::Per,
                nationality: Nationality::Alpha,
                frequency: f,
            });
        }
        let ex = Extractor {
            dictionary: &dict,
            translit: None,
            max_candidates: 1,
        };
        let det = detect_entities(&s, &NerMode::gold(), &Gazetteer::default(), &mut rng::rng(0));
        assert_eq!(ex.extract(&s, &det, SelectMode::Train).entries[0].chosen(), toks("bcdd"));
        assert_eq!(ex.extract(&s, &det, SelectMode::Infer).entries[0].chosen(), toks("bcd"));
        let multi = Extractor {
            max_candidates: 3,
            ..ex
        };
        assert_eq!(multi.extract(&s, &det, SelectMode::Infer).entries[0].candidates.len(), 2);
    }

    proptest! {
        #[test]
        fn candidate_order_follows_source(seed in 0u64..200, p_sp in 0.0f64..1.0, p_b in 0.0f64..1.0) {
            let s = sentence();
            let g = Gazetteer::from_entities(s.entities.iter().map(|e| (&e.src_surface, e.etype)));
            let det = detect_entities(&s, &NerMode::gazetteer(0.2, p_sp, p_b), &g, &mut rng::rng(seed));
            let ex = Extractor { dictionary: &Dictionary::default(), translit: Some(&RuleOracle), max_candidates: 1 };
            let cs = ex.extract(&s, &det, SelectMode::Infer);
            prop_assert!(cs.entries.windows(2).all(|w| w[0].span.end <= w[1].span.start));
        }
    }
}

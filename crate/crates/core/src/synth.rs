//! Synthetic bilingual world: vocabularies, entities with nationalities,
//! transliteration rules, parallel sentences and an entity dictionary with
//! controlled coverage.
//!
//! Source content words are `s0..sN`, target content words `t0..tN`, linked by
//! a seeded bijection. Target sentences apply the word map and then swap the
//! units at positions `(2i, 2i+1)`, where a unit is a content word, a context
//! token, or a whole entity. Entity names are lowercase `a-z` words and are
//! transliterated by the rule of their nationality.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extraction::Gazetteer;
use crate::rng::{self, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EntityType {
    #[serde(rename = "PER")]
    Per,
    #[serde(rename = "LOC")]
    Loc,
    #[serde(rename = "ORG")]
    Org,
}

impl EntityType {
    pub const ALL: [EntityType; 3] = [EntityType::Per, EntityType::Loc, EntityType::Org];

    pub fn as_str(self) -> &'static str {
        match self {
            EntityType::Per => "PER",
            EntityType::Loc => "LOC",
            EntityType::Org => "ORG",
        }
    }

    /// Row of the entity-type embedding table; row 0 is `O`.
    pub fn tag(self) -> u8 {
        match self {
            EntityType::Per => 1,
            EntityType::Loc => 2,
            EntityType::Org => 3,
        }
    }
}

impl fmt::Display for EntityType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EntityType {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "PER" => Ok(EntityType::Per),
            "LOC" => Ok(EntityType::Loc),
            "ORG" => Ok(EntityType::Org),
            _ => Err(Error::UnknownEntityType(s.to_string())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Nationality {
    #[serde(rename = "ALPHA")]
    Alpha,
    #[serde(rename = "BETA")]
    Beta,
    #[serde(rename = "GAMMA")]
    Gamma,
    #[serde(rename = "OTHER")]
    Other,
}

impl Nationality {
    pub const ALL: [Nationality; 4] = [
        Nationality::Alpha,
        Nationality::Beta,
        Nationality::Gamma,
        Nationality::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Nationality::Alpha => "ALPHA",
            Nationality::Beta => "BETA",
            Nationality::Gamma => "GAMMA",
            Nationality::Other => "OTHER",
        }
    }

    /// Source-side context word that hints at this nationality.
    pub fn context_token(self) -> String {
        format!("ctx.{}", self.as_str().to_lowercase())
    }

    pub fn target_context_token(self) -> String {
        format!("CTX.{}", self.as_str())
    }

    /// Tag token prepended to transliteration inputs.
    pub fn tag_token(self) -> String {
        format!("<{}>", self.as_str())
    }

    fn inventory(self) -> &'static [u8] {
        match self {
            Nationality::Alpha => b"abcdefghi",
            Nationality::Beta => b"jklmnopqr",
            Nationality::Gamma => b"stuvwxyzaeiou",
            Nationality::Other => b"abcdefghijklmnopqrstuvwxyz",
        }
    }
}

impl fmt::Display for Nationality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Nationality {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ALPHA" => Ok(Nationality::Alpha),
            "BETA" => Ok(Nationality::Beta),
            "GAMMA" => Ok(Nationality::Gamma),
            "OTHER" => Ok(Nationality::Other),
            _ => Err(Error::UnknownNationality(s.to_string())),
        }
    }
}

/// Character-level transliteration rule applied to each name token.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TranslitRule {
    Rotate(u8),
    ReverseRotate(u8),
    Identity,
}

fn rotate(c: char, by: u8) -> char {
    if c.is_ascii_lowercase() {
        (b'a' + (c as u8 - b'a' + by) % 26) as char
    } else {
        c
    }
}

impl TranslitRule {
    pub fn for_nationality(n: Nationality) -> Self {
        match n {
            Nationality::Alpha => TranslitRule::Rotate(1),
            Nationality::Beta => TranslitRule::Rotate(5),
            Nationality::Gamma => TranslitRule::ReverseRotate(2),
            Nationality::Other => TranslitRule::Identity,
        }
    }

    pub fn apply_token(self, token: &str) -> String {
        match self {
            TranslitRule::Rotate(k) => token.chars().map(|c| rotate(c, k)).collect(),
            TranslitRule::ReverseRotate(k) => token.chars().rev().map(|c| rotate(c, k)).collect(),
            TranslitRule::Identity => token.to_string(),
        }
    }
}

/// Rule table for a nationality set given by identifier.
pub fn make_translit_rule_table<S: AsRef<str>>(ids: &[S]) -> Result<BTreeMap<Nationality, TranslitRule>> {
    let mut table = BTreeMap::new();
    for id in ids {
        let n: Nationality = id.as_ref().parse()?;
        if table.insert(n, TranslitRule::for_nationality(n)).is_some() {
            return Err(Error::Config(format!("duplicate nationality {n}")));
        }
    }
    Ok(table)
}

pub fn apply_translit_rule(n: Nationality, surface: &[String]) -> Vec<String> {
    let rule = TranslitRule::for_nationality(n);
    surface.iter().map(|t| rule.apply_token(t)).collect()
}

/// Dictionary variant: the rule output with its final character doubled.
pub fn dup_last_char(surface: &[String]) -> Vec<String> {
    let mut out = surface.to_vec();
    if let Some(last) = out.last_mut() {
        if let Some(c) = last.chars().last() {
            last.push(c);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub seed: u64,
    pub content_vocab_size: usize,
    pub sentence_len_range: [usize; 2],
    pub entities_per_sentence_range: [usize; 2],
    pub nationality_set: Vec<Nationality>,
    pub dict_coverage_by_type: BTreeMap<EntityType, f64>,
    pub multi_candidate_fraction: f64,
    pub context_token_prob: f64,
    /// Probability that a generated name letter comes from the nationality's
    /// letter inventory rather than the full alphabet.
    pub inventory_prob: f64,
    pub train_pool: BTreeMap<EntityType, usize>,
    pub unseen_pool: BTreeMap<EntityType, usize>,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    pub test_unseen_size: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            seed: 1,
            content_vocab_size: 200,
            sentence_len_range: [5, 12],
            entities_per_sentence_range: [0, 2],
            nationality_set: Nationality::ALL.to_vec(),
            dict_coverage_by_type: [(EntityType::Per, 0.4), (EntityType::Loc, 0.8), (EntityType::Org, 0.8)]
                .into_iter()
                .collect(),
            multi_candidate_fraction: 0.3,
            context_token_prob: 0.8,
            inventory_prob: 0.85,
            train_pool: [(EntityType::Per, 2400), (EntityType::Loc, 800), (EntityType::Org, 800)]
                .into_iter()
                .collect(),
            unseen_pool: [(EntityType::Per, 600), (EntityType::Loc, 200), (EntityType::Org, 200)]
                .into_iter()
                .collect(),
            train_size: 20_000,
            val_size: 500,
            test_size: 1000,
            test_unseen_size: 1000,
        }
    }
}

fn check_prob(name: &str, p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be in [0,1], got {p}")))
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.sentence_len_range;
        if lo > hi || hi == 0 {
            return Err(Error::Config(format!("sentence_len_range [{lo},{hi}] invalid")));
        }
        let [elo, ehi] = self.entities_per_sentence_range;
        if elo > ehi {
            return Err(Error::Config(format!("entities_per_sentence_range [{elo},{ehi}] invalid")));
        }
        if self.content_vocab_size == 0 {
            return Err(Error::Config("content_vocab_size must be positive".into()));
        }
        if self.nationality_set.is_empty() {
            return Err(Error::Config("nationality_set is empty".into()));
        }
        let distinct: BTreeSet<_> = self.nationality_set.iter().collect();
        if distinct.len() != self.nationality_set.len() {
            return Err(Error::Config("nationality_set has duplicates".into()));
        }
        for t in EntityType::ALL {
            check_prob(&format!("dict_coverage_by_type[{t}]"), self.coverage(t))?;
        }
        check_prob("multi_candidate_fraction", self.multi_candidate_fraction)?;
        check_prob("context_token_prob", self.context_token_prob)?;
        check_prob("inventory_prob", self.inventory_prob)?;
        if self.train_size == 0 {
            return Err(Error::Config("train_size must be positive".into()));
        }
        let train_pool: usize = self.train_pool.values().sum();
        let unseen_pool: usize = self.unseen_pool.values().sum();
        if ehi > 0 && train_pool == 0 {
            return Err(Error::Config("entities requested but train pool is empty".into()));
        }
        if self.test_unseen_size > 0 && (ehi == 0 || unseen_pool == 0) {
            return Err(Error::Config("unseen test split needs entities and a non-empty unseen pool".into()));
        }
        Ok(())
    }

    pub fn coverage(&self, t: EntityType) -> f64 {
        self.dict_coverage_by_type.get(&t).copied().unwrap_or(0.0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntitySpan {
    pub start: usize,
    pub end: usize,
    pub etype: EntityType,
    pub nationality: Nationality,
    pub src_surface: Vec<String>,
    pub gold_tgt_surface: Vec<String>,
    pub tgt_start: usize,
    pub tgt_end: usize,
}

impl EntitySpan {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct AnnotatedSentence {
    pub src_tokens: Vec<String>,
    pub tgt_tokens: Vec<String>,
    pub entities: Vec<EntitySpan>,
}

impl AnnotatedSentence {
    /// Checks span bounds, ordering, overlap and surface consistency.
    pub fn validate(&self) -> Result<()> {
        let mut prev_end = 0;
        for e in &self.entities {
            let bad = e.start >= e.end
                || e.start < prev_end
                || e.end > self.src_tokens.len()
                || e.tgt_end > self.tgt_tokens.len()
                || e.tgt_start >= e.tgt_end
                || self.src_tokens[e.start..e.end] != e.src_surface[..]
                || self.tgt_tokens[e.tgt_start..e.tgt_end] != e.gold_tgt_surface[..];
            if bad {
                return Err(Error::Config(format!("malformed entity span {e:?}")));
            }
            prev_end = e.end;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityPair {
    pub src_surface: Vec<String>,
    pub tgt_surface: Vec<String>,
    pub etype: EntityType,
    pub nationality: Nationality,
    pub frequency: u64,
}

/// Generates one entity: 1-2 name tokens of 3-6 letters drawn mostly from the
/// nationality's inventory, translated by the nationality's rule.
pub fn gen_entity(etype: EntityType, nationality: Nationality, inventory_prob: f64, rng: &mut Rng) -> EntityPair {
    let n_tokens = rng.gen_range(1..=2);
    let inv = nationality.inventory();
    let src_surface: Vec<String> = (0..n_tokens)
        .map(|_| {
            let len = rng.gen_range(3..=6);
            (0..len)
                .map(|_| {
                    if rng.gen_bool(inventory_prob) {
                        inv[rng.gen_range(0..inv.len())] as char
                    } else {
                        (b'a' + rng.gen_range(0..26u8)) as char
                    }
                })
                .collect()
        })
        .collect();
    let tgt_surface = apply_translit_rule(nationality, &src_surface);
    EntityPair {
        src_surface,
        tgt_surface,
        etype,
        nationality,
        frequency: 0,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Pool {
    Train,
    Unseen,
}

/// A world entity plus the uniform draws that decide its dictionary status.
/// Coverage draws are fixed per entity, so dictionaries built at increasing
/// coverage are nested.
#[derive(Clone, Debug, PartialEq)]
pub struct EntityRecord {
    pub pair: EntityPair,
    pub pool: Pool,
    pub coverage_draw: f64,
    pub variant_draw: f64,
}

impl EntityRecord {
    pub fn covered(&self, coverage: f64) -> bool {
        self.coverage_draw < coverage
    }

    pub fn has_variant(&self, multi_fraction: f64) -> bool {
        self.variant_draw < multi_fraction
    }
}

const STREAM_POOLS: u64 = 1;
const STREAM_DRAWS: u64 = 2;
const STREAM_WORDS: u64 = 3;
const STREAM_TRAIN: u64 = 10;
const STREAM_VAL: u64 = 11;
const STREAM_TEST: u64 = 12;
const STREAM_UNSEEN: u64 = 13;

/// Entity pools for both the training and unseen splits, with unique surfaces.
pub fn gen_entity_pools(cfg: &WorldConfig) -> Result<Vec<EntityRecord>> {
    cfg.validate()?;
    let mut rng = rng::sub_rng(cfg.seed, STREAM_POOLS, 0);
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (pool, sizes) in [(Pool::Train, &cfg.train_pool), (Pool::Unseen, &cfg.unseen_pool)] {
        for t in EntityType::ALL {
            let want = sizes.get(&t).copied().unwrap_or(0);
            let mut made = 0;
            let mut attempts = 0;
            while made < want {
                attempts += 1;
                if attempts > want * 100 + 1000 {
                    return Err(Error::Config(format!("cannot generate {want} unique {t} entities")));
                }
                let nat = cfg.nationality_set[rng.gen_range(0..cfg.nationality_set.len())];
                let pair = gen_entity(t, nat, cfg.inventory_prob, &mut rng);
                if seen.insert(pair.src_surface.clone()) {
                    out.push(EntityRecord {
                        pair,
                        pool,
                        coverage_draw: 0.0,
                        variant_draw: 0.0,
                    });
                    made += 1;
                }
            }
        }
    }
    let mut draws = rng::sub_rng(cfg.seed, STREAM_DRAWS, 0);
    for e in out.iter_mut() {
        e.coverage_draw = draws.gen();
        e.variant_draw = draws.gen();
    }
    Ok(out)
}

/// Seeded bijection between source and target content words.
#[derive(Clone, Debug)]
pub struct WordMap {
    perm: Vec<usize>,
}

impl WordMap {
    pub fn new(cfg: &WorldConfig) -> Self {
        let mut perm: Vec<usize> = (0..cfg.content_vocab_size).collect();
        perm.shuffle(&mut rng::sub_rng(cfg.seed, STREAM_WORDS, 0));
        WordMap { perm }
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    pub fn source_word(i: usize) -> String {
        format!("s{i}")
    }

    /// Maps a source content or context token to its target form; names and
    /// unknown tokens map to `None`.
    pub fn translate(&self, token: &str) -> Option<String> {
        if let Some(rest) = token.strip_prefix('s') {
            let i: usize = rest.parse().ok()?;
            return self.perm.get(i).map(|j| format!("t{j}"));
        }
        Nationality::ALL
            .into_iter()
            .find(|n| n.context_token() == token)
            .map(|n| n.target_context_token())
    }
}

enum Unit {
    Word(String),
    Context(Nationality),
    Entity { idx: usize, dup: bool },
}

/// Reorders units as `(1,0,3,2,...)`; an odd trailing unit stays in place.
pub fn pairwise_swap<T>(units: &mut [T]) {
    for pair in units.chunks_exact_mut(2) {
        pair.swap(0, 1);
    }
}

struct SentenceGen<'a> {
    cfg: &'a WorldConfig,
    words: &'a WordMap,
    entities: &'a [EntityRecord],
}

impl SentenceGen<'_> {
    fn reference_variant(&self, e: &EntityRecord, dup: bool) -> Vec<String> {
        if dup {
            dup_last_char(&e.pair.tgt_surface)
        } else {
            e.pair.tgt_surface.clone()
        }
    }

    fn sentence(&self, pool: &[usize], require_entity: bool, rng: &mut Rng) -> AnnotatedSentence {
        let cfg = self.cfg;
        let [lo, hi] = cfg.sentence_len_range;
        let n_words = rng.gen_range(lo..=hi);
        let mut units: Vec<Unit> = (0..n_words)
            .map(|_| Unit::Word(WordMap::source_word(rng.gen_range(0..self.words.len()))))
            .collect();
        let [elo, ehi] = cfg.entities_per_sentence_range;
        let mut k = if pool.is_empty() { 0 } else { rng.gen_range(elo..=ehi) };
        if require_entity && !pool.is_empty() {
            k = k.max(1);
        }
        for _ in 0..k {
            let idx = pool[rng.gen_range(0..pool.len())];
            let e = &self.entities[idx];
            let two = e.covered(cfg.coverage(e.pair.etype)) && e.has_variant(cfg.multi_candidate_fraction);
            let dup = two && rng.gen_bool(0.5);
            let at = rng.gen_range(0..=units.len());
            units.insert(at, Unit::Entity { idx, dup });
            if rng.gen_bool(cfg.context_token_prob) {
                let at = rng.gen_range(0..=units.len());
                units.insert(at, Unit::Context(e.pair.nationality));
            }
        }

        let mut s = AnnotatedSentence::default();
        let mut src_starts = Vec::new();
        for u in &units {
            match u {
                Unit::Word(w) => s.src_tokens.push(w.clone()),
                Unit::Context(n) => s.src_tokens.push(n.context_token()),
                Unit::Entity { idx, .. } => {
                    src_starts.push(s.src_tokens.len());
                    s.src_tokens.extend(self.entities[*idx].pair.src_surface.iter().cloned());
                }
            }
        }
        let mut order: Vec<usize> = (0..units.len()).collect();
        pairwise_swap(&mut order);
        let mut tgt_spans = BTreeMap::new();
        for &ui in &order {
            match &units[ui] {
                Unit::Word(w) => s.tgt_tokens.push(self.words.translate(w).expect("content word")),
                Unit::Context(n) => s.tgt_tokens.push(n.target_context_token()),
                Unit::Entity { idx, dup } => {
                    let start = s.tgt_tokens.len();
                    s.tgt_tokens.extend(self.reference_variant(&self.entities[*idx], *dup));
                    tgt_spans.insert(ui, (start, s.tgt_tokens.len()));
                }
            }
        }
        let mut ent_no = 0;
        for (ui, u) in units.iter().enumerate() {
            if let Unit::Entity { idx, .. } = u {
                let e = &self.entities[*idx].pair;
                let start = src_starts[ent_no];
                ent_no += 1;
                let (ts, te) = tgt_spans[&ui];
                s.entities.push(EntitySpan {
                    start,
                    end: start + e.src_surface.len(),
                    etype: e.etype,
                    nationality: e.nationality,
                    src_surface: e.src_surface.clone(),
                    gold_tgt_surface: s.tgt_tokens[ts..te].to_vec(),
                    tgt_start: ts,
                    tgt_end: te,
                });
            }
        }
        s
    }
}

/// Everything `gen_corpus` produces.
#[derive(Clone, Debug)]
pub struct World {
    pub config: WorldConfig,
    pub train: Vec<AnnotatedSentence>,
    pub val: Vec<AnnotatedSentence>,
    pub test: Vec<AnnotatedSentence>,
    /// Test sentences whose entities never occur in training.
    pub test_unseen: Vec<AnnotatedSentence>,
    pub dictionary: Dictionary,
    pub gazetteer: Gazetteer,
    pub entities: Vec<EntityRecord>,
}

pub fn gen_corpus(cfg: &WorldConfig) -> Result<World> {
    let entities = gen_entity_pools(cfg)?;
    let words = WordMap::new(cfg);
    let gen = SentenceGen {
        cfg,
        words: &words,
        entities: &entities,
    };
    let train_pool: Vec<usize> = (0..entities.len()).filter(|&i| entities[i].pool == Pool::Train).collect();
    let unseen_pool: Vec<usize> = (0..entities.len()).filter(|&i| entities[i].pool == Pool::Unseen).collect();
    let split = |stream: u64, n: usize, pool: &[usize], require: bool| -> Vec<AnnotatedSentence> {
        (0..n)
            .map(|i| gen.sentence(pool, require, &mut rng::sub_rng(cfg.seed, stream, i as u64)))
            .collect()
    };
    let train = split(STREAM_TRAIN, cfg.train_size, &train_pool, false);
    let val = split(STREAM_VAL, cfg.val_size, &train_pool, false);
    let test = split(STREAM_TEST, cfg.test_size, &train_pool, false);
    let test_unseen = split(STREAM_UNSEEN, cfg.test_unseen_size, &unseen_pool, true);

    let freqs = entity_frequencies(&train);
    let dictionary = build_dictionary(&entities, cfg, &freqs);
    let gazetteer = Gazetteer::from_entities(entities.iter().map(|e| (&e.pair.src_surface, e.pair.etype)));
    Ok(World {
        config: cfg.clone(),
        train,
        val,
        test,
        test_unseen,
        dictionary,
        gazetteer,
        entities,
    })
}

pub type FrequencyTable = BTreeMap<(Vec<String>, Vec<String>), u64>;

/// Occurrence counts of (source surface, target surface) pairs in a corpus.
pub fn entity_frequencies(corpus: &[AnnotatedSentence]) -> FrequencyTable {
    let mut f = FrequencyTable::new();
    for s in corpus {
        for e in &s.entities {
            *f.entry((e.src_surface.clone(), e.gold_tgt_surface.clone())).or_insert(0) += 1;
        }
    }
    f
}

/// Dictionary over all world entities whose coverage draw falls under the
/// per-type coverage. Entries whose variant draw falls under the multi-candidate
/// fraction carry the duplicated-last-character variant second.
pub fn build_dictionary(entities: &[EntityRecord], cfg: &WorldConfig, freqs: &FrequencyTable) -> Dictionary {
    let mut d = Dictionary::default();
    for e in entities {
        if !e.covered(cfg.coverage(e.pair.etype)) {
            continue;
        }
        let mut variants = vec![e.pair.tgt_surface.clone()];
        if e.has_variant(cfg.multi_candidate_fraction) {
            variants.push(dup_last_char(&e.pair.tgt_surface));
        }
        for v in variants {
            let frequency = freqs
                .get(&(e.pair.src_surface.clone(), v.clone()))
                .copied()
                .unwrap_or(0);
            d.insert(EntityPair {
                src_surface: e.pair.src_surface.clone(),
                tgt_surface: v,
                etype: e.pair.etype,
                nationality: e.pair.nationality,
                frequency,
            });
        }
    }
    d
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DictCandidate {
    pub tokens: Vec<String>,
    pub frequency: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DictEntry {
    pub etype: EntityType,
    pub nationality: Nationality,
    pub candidates: Vec<DictCandidate>,
}

/// Multimap from source surface to target candidates in insertion order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Dictionary {
    entries: BTreeMap<Vec<String>, DictEntry>,
}

impl Dictionary {
    pub fn insert(&mut self, p: EntityPair) {
        let entry = self.entries.entry(p.src_surface).or_insert_with(|| DictEntry {
            etype: p.etype,
            nationality: p.nationality,
            candidates: Vec::new(),
        });
        entry.candidates.push(DictCandidate {
            tokens: p.tgt_surface,
            frequency: p.frequency,
        });
    }

    pub fn lookup(&self, surface: &[String]) -> Option<&DictEntry> {
        self.entries.get(surface)
    }

    /// Number of distinct source surfaces.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Flattened (source, target) rows, one per candidate.
    pub fn pairs(&self) -> impl Iterator<Item = EntityPair> + '_ {
        self.entries.iter().flat_map(|(src, e)| {
            e.candidates.iter().map(move |c| EntityPair {
                src_surface: src.clone(),
                tgt_surface: c.tokens.clone(),
                etype: e.etype,
                nationality: e.nationality,
                frequency: c.frequency,
            })
        })
    }

    pub fn entries(&self) -> impl Iterator<Item = (&Vec<String>, &DictEntry)> {
        self.entries.iter()
    }

    pub fn write_tsv(&self, path: &Path, fingerprint: &str) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "# fingerprint={fingerprint}")?;
        for p in self.pairs() {
            writeln!(
                w,
                "{}\t{}\t{}\t{}\t{}",
                p.src_surface.join(" "),
                p.tgt_surface.join(" "),
                p.etype,
                p.nationality,
                p.frequency
            )?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_tsv(path: &Path) -> Result<(Self, Option<String>)> {
        let name = path.display().to_string();
        let r = BufReader::new(std::fs::File::open(path)?);
        let mut d = Dictionary::default();
        let mut fp = None;
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if let Some(rest) = line.strip_prefix("# fingerprint=") {
                fp = Some(rest.to_string());
                continue;
            }
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 5 {
                return Err(Error::parse(&name, i + 1, "expected 5 tab-separated columns"));
            }
            let split = |s: &str| s.split(' ').map(str::to_string).collect::<Vec<_>>();
            d.insert(EntityPair {
                src_surface: split(cols[0]),
                tgt_surface: split(cols[1]),
                etype: cols[2].parse()?,
                nationality: cols[3].parse()?,
                frequency: cols[4]
                    .parse()
                    .map_err(|_| Error::parse(&name, i + 1, "bad frequency"))?,
            });
        }
        Ok((d, fp))
    }
}

#[derive(Serialize, Deserialize)]
struct EntityRecordLine {
    start: usize,
    end: usize,
    #[serde(rename = "type")]
    etype: EntityType,
    nationality: Nationality,
    tgt_start: usize,
    tgt_end: usize,
}

#[derive(Serialize, Deserialize)]
struct SentenceLine {
    src_tokens: Vec<String>,
    tgt_tokens: Vec<String>,
    entities: Vec<EntityRecordLine>,
}

/// One JSON record per line, preceded by a fingerprint comment line.
pub fn write_corpus(path: &Path, corpus: &[AnnotatedSentence], fingerprint: &str) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "# fingerprint={fingerprint}")?;
    for s in corpus {
        let line = SentenceLine {
            src_tokens: s.src_tokens.clone(),
            tgt_tokens: s.tgt_tokens.clone(),
            entities: s
                .entities
                .iter()
                .map(|e| EntityRecordLine {
                    start: e.start,
                    end: e.end,
                    etype: e.etype,
                    nationality: e.nationality,
                    tgt_start: e.tgt_start,
                    tgt_end: e.tgt_end,
                })
                .collect(),
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_corpus(path: &Path) -> Result<(Vec<AnnotatedSentence>, Option<String>)> {
    let name = path.display().to_string();
    let r = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    let mut fp = None;
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if let Some(rest) = line.strip_prefix("# fingerprint=") {
            fp = Some(rest.to_string());
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let rec: SentenceLine =
            serde_json::from_str(&line).map_err(|e| Error::parse(&name, i + 1, e.to_string()))?;
        let s = AnnotatedSentence {
            entities: rec
                .entities
                .iter()
                .map(|e| {
                    let ok = e.start < e.end
                        && e.end <= rec.src_tokens.len()
                        && e.tgt_start < e.tgt_end
                        && e.tgt_end <= rec.tgt_tokens.len();
                    if !ok {
                        return Err(Error::parse(&name, i + 1, "entity span out of bounds"));
                    }
                    Ok(EntitySpan {
                        start: e.start,
                        end: e.end,
                        etype: e.etype,
                        nationality: e.nationality,
                        src_surface: rec.src_tokens[e.start..e.end].to_vec(),
                        gold_tgt_surface: rec.tgt_tokens[e.tgt_start..e.tgt_end].to_vec(),
                        tgt_start: e.tgt_start,
                        tgt_end: e.tgt_end,
                    })
                })
                .collect::<Result<_>>()?,
            src_tokens: rec.src_tokens,
            tgt_tokens: rec.tgt_tokens,
        };
        s.validate().map_err(|e| Error::parse(&name, i + 1, e.to_string()))?;
        out.push(s);
    }
    Ok((out, fp))
}

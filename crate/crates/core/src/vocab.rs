//! Vocabularies, special tokens and the word/character segmentation used by
//! the sentence-level models.
//!
//! Special ids are fixed:
//!
//! | id | token |
//! |----|-------|
//! | 0 | `<pad>` |
//! | 1 | `<unk>` |
//! | 2 | `<bos>` |
//! | 3 | `<eos>` |
//! | 4 | `[SEP]` (between candidates of different entities) |
//! | 5 | `[SEP2]` (between candidates of the same entity) |
//! | 6..=17 | `PLH_PER_1..4`, `PLH_ORG_1..4`, `PLH_LOC_1..4` |
//! | 18..=21 | `<ALPHA>`, `<BETA>`, `<GAMMA>`, `<OTHER>` |
//!
//! Regular tokens follow in order of decreasing corpus frequency, ties broken
//! lexicographically.
//!
//! Name words (all lowercase `a-z`) are split into character pieces before
//! entering the sentence vocabulary, `abc -> a@@ b@@ c`, so entity names never
//! fall out of vocabulary. Content words carry digits or punctuation and stay
//! whole.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::synth::{EntityType, Nationality};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;
pub const SEP: u32 = 4;
pub const SEP2: u32 = 5;
pub const MAX_PLACEHOLDERS: usize = 4;

const PLH_TYPES: [EntityType; 3] = [EntityType::Per, EntityType::Org, EntityType::Loc];

pub fn placeholder_token(t: EntityType, index: usize) -> String {
    format!("PLH_{}_{}", t.as_str(), index)
}

/// Fixed special tokens in id order.
pub fn special_tokens() -> Vec<String> {
    let mut v: Vec<String> = ["<pad>", "<unk>", "<bos>", "<eos>", "[SEP]", "[SEP2]"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for t in PLH_TYPES {
        for i in 1..=MAX_PLACEHOLDERS {
            v.push(placeholder_token(t, i));
        }
    }
    for n in Nationality::ALL {
        v.push(n.tag_token());
    }
    v
}

pub const WORD_CONT: &str = "@@";

pub fn is_name_word(w: &str) -> bool {
    !w.is_empty() && w.bytes().all(|b| b.is_ascii_lowercase())
}

/// Splits a word into pieces; only name words are split.
pub fn segment_word(w: &str) -> Vec<String> {
    if !is_name_word(w) {
        return vec![w.to_string()];
    }
    let n = w.len();
    w.chars()
        .enumerate()
        .map(|(i, c)| if i + 1 < n { format!("{c}{WORD_CONT}") } else { c.to_string() })
        .collect()
}

/// Segmented pieces plus, for each piece, the index of the word it came from.
pub fn segment(words: &[String]) -> (Vec<String>, Vec<usize>) {
    let mut pieces = Vec::new();
    let mut owner = Vec::new();
    for (i, w) in words.iter().enumerate() {
        for p in segment_word(w) {
            pieces.push(p);
            owner.push(i);
        }
    }
    (pieces, owner)
}

/// Piece offsets of each word: `starts[i]..starts[i+1]` are the pieces of word `i`.
pub fn word_starts(words: &[String]) -> Vec<usize> {
    let mut starts = Vec::with_capacity(words.len() + 1);
    let mut at = 0;
    for w in words {
        starts.push(at);
        at += if is_name_word(w) { w.len() } else { 1 };
    }
    starts.push(at);
    starts
}

/// Inverse of [`segment`]. A dangling continuation at the end is closed.
pub fn desegment<S: AsRef<str>>(pieces: &[S]) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut open = false;
    for p in pieces {
        let p = p.as_ref();
        if let Some(stem) = p.strip_suffix(WORD_CONT) {
            cur.push_str(stem);
            open = true;
        } else {
            cur.push_str(p);
            out.push(std::mem::take(&mut cur));
            open = false;
        }
    }
    if open {
        out.push(cur);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::VocabMismatch(format!("duplicate token `{t}`")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    /// Builds a vocabulary over token sequences; in `char_mode` the units are
    /// the characters of every token.
    pub fn build<S: AsRef<str>>(corpus: &[Vec<S>], char_mode: bool) -> Result<Self> {
        if corpus.iter().all(|s| s.is_empty()) {
            return Err(Error::Empty("corpus"));
        }
        let specials = special_tokens();
        let mut counts: HashMap<String, u64> = HashMap::new();
        for seq in corpus {
            for t in seq {
                if char_mode {
                    for c in t.as_ref().chars() {
                        *counts.entry(c.to_string()).or_insert(0) += 1;
                    }
                } else {
                    *counts.entry(t.as_ref().to_string()).or_insert(0) += 1;
                }
            }
        }
        let mut items: Vec<(String, u64)> = counts.into_iter().filter(|(t, _)| !specials.contains(t)).collect();
        items.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut tokens = specials;
        tokens.extend(items.into_iter().map(|(t, _)| t));
        Vocab::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens.get(id as usize).map(String::as_str).unwrap_or("<unk>")
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<u32> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    /// Maps ids back to tokens, dropping padding.
    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter()
            .filter(|&&i| i != PAD)
            .map(|&i| self.token(i).to_string())
            .collect()
    }

    pub fn placeholder(&self, t: EntityType, index: usize) -> Option<u32> {
        if (1..=MAX_PLACEHOLDERS).contains(&index) {
            self.get(&placeholder_token(t, index))
        } else {
            None
        }
    }

    pub fn nationality_tag(&self, n: Nationality) -> u32 {
        self.id(&n.tag_token())
    }

    pub fn is_special(&self, id: u32) -> bool {
        (id as usize) < special_tokens().len()
    }

    /// One token per line; the line number is the id.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        for t in &self.tokens {
            writeln!(w, "{t}")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let r = BufReader::new(std::fs::File::open(path)?);
        let tokens = r.lines().collect::<std::io::Result<Vec<_>>>()?;
        Vocab::from_list(tokens).map_err(|e| Error::VocabMismatch(format!("{}: {e}", path.display())))
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_list(tokens: Vec<String>) -> Result<Self> {
        let specials = special_tokens();
        if tokens.len() < specials.len() || tokens[..specials.len()] != specials[..] {
            return Err(Error::VocabMismatch("token list does not start with the special tokens".into()));
        }
        Vocab::from_tokens(tokens)
    }
}

//! Nationality classification and character-level transliteration of
//! entities the dictionary does not cover.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extraction::Transliterator;
use crate::inference::{decode, DecodeConfig};
use crate::model::checkpoint;
use crate::model::input::{DecoderInput, EncoderInput, Example};
use crate::model::{ModelConfig, Transformer};
use crate::rng;
use crate::synth::{AnnotatedSentence, Nationality};
use crate::training::{train, LogEntry, TrainConfig};
use crate::vocab::Vocab;

/// Separates name tokens inside a character sequence.
pub const TOKEN_SEP: char = '_';
const BIAS: &str = "__bias__";
const STREAM_INIT: u64 = 200;

/// Sparse feature vector of an (entity, sentence) pair: character 1-3 grams
/// of each boundary-marked entity token plus context-token indicators.
pub fn features(entity: &[String], sentence: &[String]) -> BTreeMap<String, f64> {
    let mut f = BTreeMap::new();
    for tok in entity {
        let chars: Vec<char> = format!("^{tok}$").chars().collect();
        for n in 1..=3 {
            for w in chars.windows(n) {
                *f.entry(format!("g:{}", w.iter().collect::<String>())).or_insert(0.0) += 1.0;
            }
        }
    }
    for t in sentence {
        if t.starts_with("ctx.") {
            f.insert(format!("x:{t}"), 1.0);
        }
    }
    f
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    /// Labels with fewer training examples are merged into OTHER.
    pub other_threshold: usize,
    pub max_epochs: usize,
    pub lr: f64,
    pub l2: f64,
    /// Stop when the loss changes by less than this between epochs.
    pub tol: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            other_threshold: 50,
            max_epochs: 300,
            lr: 0.05,
            l2: 1e-5,
            tol: 1e-5,
        }
    }
}

/// Multinomial logistic regression over [`features`].
#[derive(Clone, Debug, PartialEq)]
pub struct NationalityClassifier {
    pub labels: Vec<Nationality>,
    feature_index: BTreeMap<String, usize>,
    /// `(features + 1) × labels`, bias last.
    weights: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct ClassifierExample {
    pub entity: Vec<String>,
    pub sentence: Vec<String>,
    pub nationality: Nationality,
}

/// One example per gold entity occurrence.
pub fn classifier_examples(corpus: &[AnnotatedSentence]) -> Vec<ClassifierExample> {
    corpus
        .iter()
        .flat_map(|s| {
            s.entities.iter().map(move |e| ClassifierExample {
                entity: e.src_surface.clone(),
                sentence: s.src_tokens.clone(),
                nationality: e.nationality,
            })
        })
        .collect()
}

impl NationalityClassifier {
    fn sparse(&self, entity: &[String], sentence: &[String]) -> Vec<(usize, f64)> {
        let mut v: Vec<(usize, f64)> = features(entity, sentence)
            .into_iter()
            .filter_map(|(k, x)| self.feature_index.get(&k).map(|&i| (i, x)))
            .collect();
        v.push((self.feature_index.len(), 1.0));
        v
    }

    fn logits(&self, x: &[(usize, f64)]) -> Vec<f64> {
        let k = self.labels.len();
        let mut z = vec![0.0; k];
        for &(i, v) in x {
            for (c, zc) in z.iter_mut().enumerate() {
                *zc += self.weights[i * k + c] * v;
            }
        }
        z
    }

    pub fn train(examples: &[ClassifierExample], cfg: &ClassifierConfig) -> Result<Self> {
        let mut counts: BTreeMap<Nationality, usize> = BTreeMap::new();
        for e in examples {
            *counts.entry(e.nationality).or_insert(0) += 1;
        }
        let relabel = |n: Nationality| {
            if counts[&n] < cfg.other_threshold {
                Nationality::Other
            } else {
                n
            }
        };
        let mut labels: Vec<Nationality> = counts.keys().map(|&n| relabel(n)).collect();
        labels.sort();
        labels.dedup();
        if labels.len() < 2 {
            return Err(Error::SingleLabel(labels.len()));
        }
        let mut feature_index = BTreeMap::new();
        for e in examples {
            for k in features(&e.entity, &e.sentence).into_keys() {
                let next = feature_index.len();
                feature_index.entry(k).or_insert(next);
            }
        }
        // Renumber so the index order is the lexicographic feature order.
        for (i, v) in feature_index.values_mut().enumerate() {
            *v = i;
        }
        let k = labels.len();
        let nf = feature_index.len() + 1;
        let mut clf = NationalityClassifier {
            labels,
            feature_index,
            weights: vec![0.0; nf * k],
        };
        let data: Vec<(Vec<(usize, f64)>, usize)> = examples
            .iter()
            .map(|e| {
                let y = clf.labels.iter().position(|&l| l == relabel(e.nationality)).expect("label");
                (clf.sparse(&e.entity, &e.sentence), y)
            })
            .collect();
        // Full-batch Adam on the mean negative log-likelihood.
        let n = data.len() as f64;
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        let mut m = vec![0.0; nf * k];
        let mut v = vec![0.0; nf * k];
        let mut prev = f64::INFINITY;
        for epoch in 1..=cfg.max_epochs {
            let mut grad: Vec<f64> = clf.weights.iter().map(|w| cfg.l2 * w).collect();
            let mut loss = 0.5 * cfg.l2 * clf.weights.iter().map(|w| w * w).sum::<f64>();
            for (x, y) in &data {
                let mut p = clf.logits(x);
                crate::linalg::softmax_in_place(&mut p);
                loss -= p[*y].max(1e-300).ln() / n;
                p[*y] -= 1.0;
                for &(i, xv) in x {
                    for c in 0..k {
                        grad[i * k + c] += p[c] * xv / n;
                    }
                }
            }
            let c1 = 1.0 - f64::powi(b1, epoch as i32);
            let c2 = 1.0 - f64::powi(b2, epoch as i32);
            for i in 0..grad.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
                v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
                clf.weights[i] -= cfg.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
            if (prev - loss).abs() < cfg.tol {
                log::debug!("classifier converged after {epoch} epochs, loss {loss:.6}");
                break;
            }
            prev = loss;
        }
        Ok(clf)
    }

    /// Label probabilities in `labels` order.
    pub fn probabilities(&self, entity: &[String], sentence: &[String]) -> Vec<f64> {
        let mut p = self.logits(&self.sparse(entity, sentence));
        crate::linalg::softmax_in_place(&mut p);
        p
    }

    /// Argmax label; labels are kept sorted, so ties go to the smallest.
    pub fn classify(&self, entity: &[String], sentence: &[String]) -> Nationality {
        if entity.iter().all(|t| t.is_empty()) {
            return Nationality::Other;
        }
        let z = self.logits(&self.sparse(entity, sentence));
        self.labels[crate::linalg::argmax(&z)]
    }

    pub fn accuracy(&self, examples: &[ClassifierExample]) -> Result<f64> {
        if examples.is_empty() {
            return Err(Error::Empty("classifier test set"));
        }
        let hits = examples
            .iter()
            .filter(|e| self.classify(&e.entity, &e.sentence) == e.nationality)
            .count();
        Ok(hits as f64 / examples.len() as f64)
    }

    /// Tab-separated `feature, label, weight`; zero weights are omitted.
    pub fn write_tsv(&self, path: &Path, fingerprint: &str) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "#fingerprint\t{fingerprint}")?;
        let labels: Vec<&str> = self.labels.iter().map(|l| l.as_str()).collect();
        writeln!(w, "#labels\t{}", labels.join(","))?;
        let k = self.labels.len();
        let names = self.feature_index.keys().map(String::as_str).chain(std::iter::once(BIAS));
        for (i, name) in names.enumerate() {
            for (c, l) in labels.iter().enumerate() {
                let x = self.weights[i * k + c];
                if x != 0.0 {
                    writeln!(w, "{name}\t{l}\t{x:e}")?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_tsv(path: &Path) -> Result<(Self, Option<String>)> {
        let name = path.display().to_string();
        let r = BufReader::new(std::fs::File::open(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
            _ => e.into(),
        })?);
        let mut fingerprint = None;
        let mut labels = Vec::new();
        let mut rows: Vec<(String, usize, f64)> = Vec::new();
        for (ln, line) in r.lines().enumerate() {
            let line = line?;
            let f: Vec<&str> = line.split('\t').collect();
            match f.as_slice() {
                ["#fingerprint", fp] => fingerprint = Some(fp.to_string()),
                ["#labels", ls] => {
                    labels = ls.split(',').map(str::parse).collect::<Result<Vec<Nationality>>>()?;
                }
                [feat, label, x] => {
                    let l: Nationality = label.parse()?;
                    let c = labels
                        .iter()
                        .position(|&y| y == l)
                        .ok_or_else(|| Error::parse(&name, ln + 1, "label not declared"))?;
                    let x: f64 = x.parse().map_err(|_| Error::parse(&name, ln + 1, "bad weight"))?;
                    rows.push((feat.to_string(), c, x));
                }
                _ => return Err(Error::parse(&name, ln + 1, "expected feature, label, weight")),
            }
        }
        if labels.len() < 2 {
            return Err(Error::parse(&name, 1, "missing label list"));
        }
        let mut feature_index = BTreeMap::new();
        for (f, _, _) in &rows {
            if f != BIAS {
                feature_index.insert(f.clone(), 0);
            }
        }
        for (i, v) in feature_index.values_mut().enumerate() {
            *v = i;
        }
        let k = labels.len();
        let mut weights = vec![0.0; (feature_index.len() + 1) * k];
        for (f, c, x) in rows {
            let i = feature_index.get(&f).copied().unwrap_or(feature_index.len());
            weights[i * k + c] = x;
        }
        Ok((
            NationalityClassifier {
                labels,
                feature_index,
                weights,
            },
            fingerprint,
        ))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranslitConfig {
    /// Prepend the nationality tag to the input.
    pub aware: bool,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for TranslitConfig {
    fn default() -> Self {
        TranslitConfig {
            aware: true,
            model: ModelConfig {
                max_src_len: 48,
                max_tgt_len: 64,
                max_prefix_len: 1,
                max_cand_len: 1,
                use_type_embeddings: false,
                use_prefix: false,
                ..ModelConfig::default()
            },
            train: TrainConfig {
                batch_size: 64,
                max_steps: 3000,
                peak_lr: 1e-3,
                warmup_steps: 200,
                ..TrainConfig::default()
            },
        }
    }
}

/// Training pair for the transliteration model.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TranslitPair {
    pub nationality: Nationality,
    pub src: Vec<String>,
    pub tgt: Vec<String>,
}

/// Characters of an entity with [`TOKEN_SEP`] between tokens.
pub fn entity_chars(entity: &[String]) -> Vec<String> {
    let joined = entity.join(&TOKEN_SEP.to_string());
    joined.chars().map(|c| c.to_string()).collect()
}

/// Inverse of [`entity_chars`]; empty tokens are dropped.
pub fn split_chars(chars: &[String]) -> Vec<String> {
    chars
        .concat()
        .split(TOKEN_SEP)
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Character-level encoder-decoder over `[<NAT>] + chars`.
#[derive(Clone, Debug)]
pub struct TranslitModel {
    pub model: Transformer<f32>,
    pub vocab: Vocab,
    pub aware: bool,
}

const ALPHABET: &str = "abcdefghijklmnopqrstuvwxyz0123456789._";

impl TranslitModel {
    fn char_vocab() -> Result<Vocab> {
        Vocab::build(&[ALPHABET.chars().map(|c| c.to_string()).collect::<Vec<_>>()], true)
    }

    /// Untrained model with the configured architecture.
    pub fn init(cfg: &TranslitConfig) -> Result<Self> {
        let vocab = Self::char_vocab()?;
        let mut mc = cfg.model.clone();
        mc.vocab_size = vocab.len();
        let model = Transformer::new(mc, &mut rng::sub_rng(cfg.train.seed, STREAM_INIT, 0))?;
        Ok(TranslitModel {
            model,
            vocab,
            aware: cfg.aware,
        })
    }

    pub fn source_ids(&self, n: Nationality, src: &[String]) -> Vec<u32> {
        let mut ids = Vec::with_capacity(src.len() * 6 + 1);
        if self.aware {
            ids.push(self.vocab.nationality_tag(n));
        }
        ids.extend(self.vocab.encode(&entity_chars(src)));
        ids
    }

    fn example(&self, p: &TranslitPair) -> Result<Example> {
        let src = self.source_ids(p.nationality, &p.src);
        let n = src.len();
        Ok(Example {
            enc: EncoderInput::plain(src, vec![0; n])?,
            dec: DecoderInput::new(&[], &self.vocab.encode(&entity_chars(&p.tgt))),
        })
    }

    pub fn train(pairs: &[TranslitPair], cfg: &TranslitConfig) -> Result<(Self, Vec<LogEntry>)> {
        if pairs.is_empty() {
            return Err(Error::Empty("transliteration pairs"));
        }
        let mut tm = Self::init(cfg)?;
        let data: Vec<Example> = pairs
            .iter()
            .map(|p| tm.example(p))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .filter(|e| {
                e.enc.len() <= tm.model.config.max_src_len && e.dec.len() <= tm.model.config.max_tgt_len
            })
            .collect();
        let log = train(&mut tm.model, &data, &cfg.train, |_, _| Ok(()))?;
        Ok((tm, log))
    }

    /// Greedy decode, capped at `4·|src| + 4` characters.
    pub fn transliterate(&self, n: Nationality, src: &[String]) -> Vec<String> {
        let chars = entity_chars(src).len();
        if chars == 0 {
            return Vec::new();
        }
        let ids = self.source_ids(n, src);
        let cap = 4 * chars + 4;
        let len = ids.len();
        let Ok(enc) = EncoderInput::plain(ids, vec![0; len]) else {
            return Vec::new();
        };
        match decode(&self.model, &enc, &[], &DecodeConfig::greedy(), cap, false) {
            Ok(d) => split_chars(&self.vocab.decode(&crate::inference::output_filter(&d.ids))),
            Err(e) => {
                log::warn!("transliteration of {src:?} failed: {e}");
                Vec::new()
            }
        }
    }

    pub fn accuracy(&self, test: &[TranslitPair]) -> Result<f64> {
        if test.is_empty() {
            return Err(Error::Empty("transliteration test set"));
        }
        let hits = test
            .iter()
            .filter(|p| self.transliterate(p.nationality, &p.src) == p.tgt)
            .count();
        Ok(hits as f64 / test.len() as f64)
    }

    pub fn save(&self, path: &Path, fingerprint: &str) -> Result<()> {
        checkpoint::save(
            path,
            &self.model,
            fingerprint,
            serde_json::json!({ "aware": self.aware, "vocab": self.vocab.tokens() }),
        )
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let (model, h) = checkpoint::load::<f32>(path)?;
        let bad = |m: &str| Error::parse(path.display().to_string(), 2, m);
        let aware = h.meta["aware"].as_bool().ok_or_else(|| bad("missing `aware`"))?;
        let tokens: Vec<String> =
            serde_json::from_value(h.meta["vocab"].clone()).map_err(|_| bad("missing `vocab`"))?;
        let vocab = Vocab::from_list(tokens)?;
        if vocab.len() != model.config.vocab_size {
            return Err(Error::VocabMismatch("transliteration vocab size differs from model".into()));
        }
        Ok((TranslitModel { model, vocab, aware }, h.fingerprint))
    }
}

/// Classifier then transliteration, memoized per (nationality, entity).
pub struct TranslitPipeline {
    pub classifier: NationalityClassifier,
    pub model: TranslitModel,
    cache: Mutex<HashMap<(Nationality, Vec<String>), Vec<String>>>,
}

impl TranslitPipeline {
    pub fn new(classifier: NationalityClassifier, model: TranslitModel) -> Self {
        TranslitPipeline {
            classifier,
            model,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn run(&self, entity: &[String], sentence: &[String]) -> Vec<String> {
        let n = if self.model.aware {
            self.classifier.classify(entity, sentence)
        } else {
            Nationality::Other
        };
        let key = (n, entity.to_vec());
        if let Some(v) = self.cache.lock().expect("cache lock").get(&key) {
            return v.clone();
        }
        let out = self.model.transliterate(n, entity);
        self.cache.lock().expect("cache lock").insert(key, out.clone());
        out
    }
}

impl Transliterator for TranslitPipeline {
    fn transliterate_entity(&self, entity: &[String], sentence: &[String]) -> Vec<String> {
        self.run(entity, sentence)
    }
}

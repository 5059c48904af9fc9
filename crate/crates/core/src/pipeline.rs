//! Run configuration, artifact layout and the gen/train/eval stages shared by
//! the command line and the acceptance suite.

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::{self, EvalReport, MisguidanceCase};
use crate::extraction::{detect_entities, CandidateSet, Extractor, Gazetteer, NerKind, NerMode, SelectMode, Transliterator};
use crate::inference::{self, DecodeConfig};
use crate::model::checkpoint;
use crate::model::input::{source_type_tags, EncoderInput, Example, DecoderInput};
use crate::model::{AttendSite, ModelConfig, Transformer};
use crate::rng;
use crate::synth::{self, AnnotatedSentence, Dictionary, World, WorldConfig};
use crate::training::{self, fits, ExampleBuilder, TrainConfig};
use crate::translit::{
    classifier_examples, ClassifierConfig, NationalityClassifier, TranslitConfig, TranslitModel, TranslitPair,
    TranslitPipeline,
};
use crate::vocab::{segment, word_starts, Vocab};

const STREAM_INIT: u64 = 300;
const STREAM_EVAL_NER: u64 = 301;

/// The systems compared in the experiments.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "ea")]
    Ea,
    #[serde(rename = "plain")]
    Plain,
    #[serde(rename = "dict")]
    Dict,
    #[serde(rename = "replace")]
    Replace,
    #[serde(rename = "placeholder")]
    Placeholder,
    #[serde(rename = "annotate")]
    Annotate,
    #[serde(rename = "encoder-attend")]
    EncoderAttend,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Ea,
        Method::Plain,
        Method::Dict,
        Method::Replace,
        Method::Placeholder,
        Method::Annotate,
        Method::EncoderAttend,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Ea => "ea",
            Method::Plain => "plain",
            Method::Dict => "dict",
            Method::Replace => "replace",
            Method::Placeholder => "placeholder",
            Method::Annotate => "annotate",
            Method::EncoderAttend => "encoder-attend",
        }
    }

    /// Name of the trained model; Replacement post-processes the plain model.
    pub fn model_key(self) -> &'static str {
        match self {
            Method::Replace => "plain",
            m => m.as_str(),
        }
    }

    pub fn model_config(self, base: &ModelConfig, vocab_size: usize) -> ModelConfig {
        let mut c = ModelConfig {
            vocab_size,
            ..base.clone()
        };
        let (types, prefix, site) = match self {
            Method::Ea => (true, true, AttendSite::Decoder),
            Method::Annotate => (true, false, AttendSite::Decoder),
            Method::EncoderAttend => (true, false, AttendSite::Encoder),
            Method::Plain | Method::Dict | Method::Replace | Method::Placeholder => (false, false, AttendSite::Decoder),
        };
        c.use_type_embeddings = types;
        c.use_prefix = prefix;
        c.attend_site = site;
        c
    }

    /// Whether the method consumes extracted candidates.
    pub fn uses_candidates(self) -> bool {
        matches!(self, Method::Ea | Method::EncoderAttend | Method::Replace | Method::Placeholder)
    }

    pub fn uses_ner(self) -> bool {
        self.uses_candidates() || self == Method::Annotate
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
    TestUnseen,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::TestUnseen => "test_unseen",
        }
    }
}

/// Everything a run depends on. Serialized as flat `key=value` lines with
/// dotted keys (`train.max_steps=8000`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub world: WorldConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub translit: TranslitConfig,
    pub classifier: ClassifierConfig,
    pub method: Method,
    /// Entity detection while building training examples.
    pub ner_train: NerMode,
    /// Entity detection at test time.
    pub ner: NerMode,
    pub use_translit: bool,
    pub use_inner_sep: bool,
    pub eval_split: Split,
    pub latency_sentences: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            world: WorldConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            decode: DecodeConfig::default(),
            translit: TranslitConfig::default(),
            classifier: ClassifierConfig::default(),
            method: Method::Ea,
            ner_train: NerMode::gazetteer(0.05, 0.1, 0.0),
            ner: NerMode::gold(),
            use_translit: true,
            use_inner_sep: true,
            eval_split: Split::TestUnseen,
            latency_sentences: 100,
        }
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, String>) {
    match v {
        Value::Object(m) => {
            for (k, x) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, x, out);
            }
        }
        Value::Array(a) => {
            let parts: Vec<String> = a
                .iter()
                .map(|x| match x {
                    Value::String(s) => s.clone(),
                    other => other.to_string(),
                })
                .collect();
            out.insert(prefix.to_string(), parts.join(","));
        }
        Value::String(s) => {
            out.insert(prefix.to_string(), s.clone());
        }
        other => {
            out.insert(prefix.to_string(), other.to_string());
        }
    }
}

fn parse_like(old: &Value, raw: &str, key: &str) -> Result<Value> {
    let bad = || Error::Config(format!("bad value `{raw}` for `{key}`"));
    Ok(match old {
        Value::Bool(_) => Value::Bool(raw.parse().map_err(|_| bad())?),
        Value::Number(n) if n.is_u64() => Value::from(raw.parse::<u64>().map_err(|_| bad())?),
        Value::Number(n) if n.is_i64() => Value::from(raw.parse::<i64>().map_err(|_| bad())?),
        Value::Number(_) => Value::from(raw.parse::<f64>().map_err(|_| bad())?),
        Value::Array(a) => {
            let items: Vec<&str> = raw.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
            let proto = a.first().cloned().unwrap_or(Value::String(String::new()));
            Value::Array(items.iter().map(|x| parse_like(&proto, x, key)).collect::<Result<_>>()?)
        }
        _ => Value::String(raw.to_string()),
    })
}

impl RunConfig {
    /// Sets one dotted key; the value is parsed according to the current
    /// value's type and the whole config is re-validated.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let mut v = serde_json::to_value(&*self)?;
        let mut cur = &mut v;
        for part in key.split('.') {
            cur = cur
                .as_object_mut()
                .and_then(|m| m.get_mut(part))
                .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
        }
        if cur.is_object() {
            return Err(Error::Config(format!("`{key}` is a section, not a key")));
        }
        *cur = parse_like(cur, raw.trim(), key)?;
        let next: RunConfig =
            serde_json::from_value(v).map_err(|e| Error::Config(format!("`{key}={raw}`: {e}")))?;
        *self = next;
        Ok(())
    }

    /// Applies `key=value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", i + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut m = BTreeMap::new();
        flatten("", &serde_json::to_value(self).expect("config serializes"), &mut m);
        m.into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.train.validate()?;
        self.translit.train.validate()?;
        self.decode.validate()?;
        self.ner.validate()?;
        self.ner_train.validate()?;
        let mut m = self.method.model_config(&self.model, 1);
        m.validate()?;
        m = self.translit.model.clone();
        m.vocab_size = 1;
        m.validate()?;
        Ok(())
    }

    pub fn world_fingerprint(&self) -> String {
        fingerprint(&[&self.world])
    }

    pub fn translit_fingerprint(&self, aware: bool) -> String {
        let mut t = self.translit.clone();
        t.aware = aware;
        fingerprint(&[&self.world_fingerprint(), &t, &self.classifier])
    }

    /// Fingerprint of the trained model behind `method` under this config.
    pub fn model_fingerprint(&self, method: Method) -> String {
        let key = method.model_key().parse::<Method>().expect("model keys are methods");
        let mc = key.model_config(&self.model, 0);
        let needs_ner = key.uses_ner();
        let translit = (key.uses_candidates() && self.use_translit).then(|| self.translit_fingerprint(self.translit.aware));
        let ner = needs_ner.then_some(self.ner_train);
        let sep = key.uses_candidates().then_some(self.use_inner_sep);
        // Logging cadence does not change the weights.
        let train = TrainConfig {
            log_every: 0,
            checkpoint_every: 0,
            ..self.train.clone()
        };
        fingerprint(&[
            &self.world_fingerprint(),
            &key,
            &mc,
            &train,
            &ner,
            &translit,
            &sep,
        ])
    }
}

/// First 16 hex digits of the SHA-256 of the JSON encodings.
pub fn fingerprint(parts: &[&dyn erased::Json]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.json().as_bytes());
        h.update([0u8]);
    }
    h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
}

pub mod erased {
    /// Object-safe JSON encoding for fingerprinting heterogeneous parts.
    pub trait Json {
        fn json(&self) -> String;
    }

    impl<T: serde::Serialize> Json for T {
        fn json(&self) -> String {
            serde_json::to_string(self).expect("serializable")
        }
    }
}

/// Paths inside a run directory.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
    /// Where NMT checkpoints live; sweeps that retrain use subdirectories.
    pub models: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        let root = root.into();
        let models = root.join("models");
        RunDir { root, models }
    }

    pub fn with_models(&self, sub: &str) -> Self {
        RunDir {
            root: self.root.clone(),
            models: self.root.join("models").join(sub),
        }
    }

    pub fn corpus(&self, split: Split) -> PathBuf {
        self.root.join("corpus").join(format!("{}.jsonl", split.as_str()))
    }

    pub fn dictionary(&self) -> PathBuf {
        self.root.join("corpus/dictionary.tsv")
    }

    pub fn gazetteer(&self) -> PathBuf {
        self.root.join("corpus/gazetteer.txt")
    }

    pub fn vocab(&self) -> PathBuf {
        self.root.join("corpus/vocab.txt")
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("corpus/manifest.txt")
    }

    pub fn classifier(&self) -> PathBuf {
        self.root.join("translit/classifier.tsv")
    }

    pub fn translit_model(&self, aware: bool) -> PathBuf {
        self.root
            .join("translit")
            .join(if aware { "aware.ckpt" } else { "agnostic.ckpt" })
    }

    pub fn model(&self, method: Method) -> PathBuf {
        self.models.join(format!("{}.ckpt", method.model_key()))
    }

    pub fn train_log(&self, method: Method) -> PathBuf {
        self.models.join(format!("{}.log", method.model_key()))
    }

    pub fn report(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(format!("{name}.txt"))
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.txt")
    }

    fn ensure(&self, sub: &str) -> Result<()> {
        std::fs::create_dir_all(self.root.join(sub))?;
        Ok(())
    }
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact(path.to_path_buf()))
    }
}

fn check_fp(artifact: &Path, expected: &str, found: Option<&str>) -> Result<()> {
    match found {
        Some(f) if f == expected => Ok(()),
        other => Err(Error::FingerprintMismatch {
            artifact: artifact.display().to_string(),
            expected: expected.to_string(),
            found: other.unwrap_or("none").to_string(),
        }),
    }
}

/// The generated world as the later stages see it.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub train: Vec<AnnotatedSentence>,
    pub val: Vec<AnnotatedSentence>,
    pub test: Vec<AnnotatedSentence>,
    pub test_unseen: Vec<AnnotatedSentence>,
    pub dictionary: Dictionary,
    pub gazetteer: Gazetteer,
    pub vocab: Vocab,
}

impl Corpus {
    pub fn split(&self, s: Split) -> &[AnnotatedSentence] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
            Split::TestUnseen => &self.test_unseen,
        }
    }
}

/// Shared word vocabulary: every piece of the training corpus plus every
/// letter piece, so unseen names stay encodable.
pub fn build_vocab(train: &[AnnotatedSentence]) -> Result<Vocab> {
    let mut seqs: Vec<Vec<String>> = Vec::with_capacity(2 * train.len() + 1);
    for s in train {
        seqs.push(segment(&s.src_tokens).0);
        seqs.push(segment(&s.tgt_tokens).0);
    }
    let letters: Vec<String> = ('a'..='z').map(|c| c.to_string()).collect();
    seqs.push(segment(&letters.iter().map(|c| format!("{c}{c}")).collect::<Vec<_>>()).0);
    Vocab::build(&seqs, false)
}

impl From<World> for Corpus {
    fn from(w: World) -> Self {
        let vocab = build_vocab(&w.train).expect("training corpus is non-empty");
        Corpus {
            train: w.train,
            val: w.val,
            test: w.test,
            test_unseen: w.test_unseen,
            dictionary: w.dictionary,
            gazetteer: w.gazetteer,
            vocab,
        }
    }
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// Generates the world and writes corpus, dictionary, gazetteer and vocab.
pub fn cmd_gen(cfg: &RunConfig, dir: &RunDir) -> Result<(World, Corpus)> {
    cfg.validate()?;
    let world = synth::gen_corpus(&cfg.world)?;
    let corpus = Corpus::from(world.clone());
    dir.ensure("corpus")?;
    let fp = cfg.world_fingerprint();
    for s in [Split::Train, Split::Val, Split::Test, Split::TestUnseen] {
        synth::write_corpus(&dir.corpus(s), corpus.split(s), &fp)?;
    }
    corpus.dictionary.write_tsv(&dir.dictionary(), &fp)?;
    corpus.gazetteer.write(&dir.gazetteer(), &fp)?;
    corpus.vocab.write(&dir.vocab())?;
    // The vocab file has no header, so the manifest vouches for it.
    let mut m = std::fs::File::create(dir.manifest())?;
    writeln!(m, "fingerprint={fp}")?;
    writeln!(m, "vocab.sha256={}", sha256_file(&dir.vocab())?)?;
    std::fs::write(dir.config(), cfg.to_text())?;
    log::info!(
        "generated world {fp}: {} train, {} test, {} unseen, {} dictionary entries",
        corpus.train.len(),
        corpus.test.len(),
        corpus.test_unseen.len(),
        corpus.dictionary.len()
    );
    Ok((world, corpus))
}

/// Reads the corpus files back, checking every fingerprint.
pub fn load_corpus(cfg: &RunConfig, dir: &RunDir) -> Result<Corpus> {
    let fp = cfg.world_fingerprint();
    let mut splits = Vec::new();
    for s in [Split::Train, Split::Val, Split::Test, Split::TestUnseen] {
        let p = dir.corpus(s);
        require(&p)?;
        let (c, found) = synth::read_corpus(&p)?;
        check_fp(&p, &fp, found.as_deref())?;
        splits.push(c);
    }
    require(&dir.dictionary())?;
    let (dictionary, found) = Dictionary::read_tsv(&dir.dictionary())?;
    check_fp(&dir.dictionary(), &fp, found.as_deref())?;
    require(&dir.gazetteer())?;
    let (gazetteer, found) = Gazetteer::read(&dir.gazetteer())?;
    check_fp(&dir.gazetteer(), &fp, found.as_deref())?;
    require(&dir.manifest())?;
    require(&dir.vocab())?;
    let manifest = std::fs::read_to_string(dir.manifest())?;
    let kv: BTreeMap<&str, &str> = manifest.lines().filter_map(|l| l.split_once('=')).collect();
    check_fp(&dir.manifest(), &fp, kv.get("fingerprint").copied())?;
    let digest = sha256_file(&dir.vocab())?;
    check_fp(&dir.vocab(), kv.get("vocab.sha256").copied().unwrap_or(""), Some(&digest))?;
    let vocab = Vocab::read(&dir.vocab())?;
    let mut it = splits.into_iter();
    Ok(Corpus {
        train: it.next().expect("train"),
        val: it.next().expect("val"),
        test: it.next().expect("test"),
        test_unseen: it.next().expect("test_unseen"),
        dictionary,
        gazetteer,
        vocab,
    })
}

/// Dictionary pairs used to train the transliteration model: the primary
/// (rule) rendering of every entry.
pub fn translit_pairs(dictionary: &Dictionary) -> Vec<TranslitPair> {
    dictionary
        .entries()
        .map(|(src, e)| TranslitPair {
            nationality: e.nationality,
            src: src.clone(),
            tgt: e.candidates[0].tokens.clone(),
        })
        .collect()
}

pub fn train_classifier(cfg: &RunConfig, corpus: &Corpus) -> Result<NationalityClassifier> {
    NationalityClassifier::train(&classifier_examples(&corpus.train), &cfg.classifier)
}

pub fn train_translit_model(cfg: &RunConfig, corpus: &Corpus, aware: bool) -> Result<TranslitModel> {
    let tc = TranslitConfig {
        aware,
        ..cfg.translit.clone()
    };
    let (m, log) = TranslitModel::train(&translit_pairs(&corpus.dictionary), &tc)?;
    if let Some(last) = log.last() {
        log::info!("transliteration ({}) final loss {:.4}", if aware { "aware" } else { "agnostic" }, last.loss);
    }
    Ok(m)
}

/// Trains (or reuses when fingerprints match) the classifier and the
/// transliteration model of the requested flavour.
pub fn ensure_translit(cfg: &RunConfig, dir: &RunDir, corpus: &Corpus, aware: bool) -> Result<TranslitPipeline> {
    dir.ensure("translit")?;
    let fp = cfg.translit_fingerprint(aware);
    let cfp = cfg.translit_fingerprint(true);
    let clf = match NationalityClassifier::read_tsv(&dir.classifier()) {
        Ok((c, Some(f))) if f == cfp => c,
        _ => {
            let c = train_classifier(cfg, corpus)?;
            c.write_tsv(&dir.classifier(), &cfp)?;
            c
        }
    };
    let path = dir.translit_model(aware);
    let model = match TranslitModel::load(&path) {
        Ok((m, f)) if f == fp => m,
        _ => {
            let m = train_translit_model(cfg, corpus, aware)?;
            m.save(&path, &fp)?;
            m
        }
    };
    Ok(TranslitPipeline::new(clf, model))
}

/// Loads trained transliteration artifacts, failing on absence or mismatch.
pub fn load_translit(cfg: &RunConfig, dir: &RunDir, aware: bool) -> Result<TranslitPipeline> {
    let cp = dir.classifier();
    require(&cp)?;
    let (clf, found) = NationalityClassifier::read_tsv(&cp)?;
    check_fp(&cp, &cfg.translit_fingerprint(true), found.as_deref())?;
    let mp = dir.translit_model(aware);
    require(&mp)?;
    let (m, found) = TranslitModel::load(&mp)?;
    check_fp(&mp, &cfg.translit_fingerprint(aware), Some(&found))?;
    Ok(TranslitPipeline::new(clf, m))
}

/// Training sentences for a method, after its corpus transformation.
pub fn method_corpus<'a>(method: Method, corpus: &'a Corpus) -> Cow<'a, [AnnotatedSentence]> {
    match method.model_key().parse::<Method>().expect("model key") {
        Method::Dict => Cow::Owned(inference::transformer_with_dictionary_corpus(&corpus.train, &corpus.dictionary)),
        Method::Placeholder => Cow::Owned(corpus.train.iter().map(inference::placeholder_training_pair).collect()),
        _ => Cow::Borrowed(&corpus.train),
    }
}

pub fn training_examples(
    cfg: &RunConfig,
    method: Method,
    corpus: &Corpus,
    translit: Option<&dyn Transliterator>,
) -> Result<Vec<Example>> {
    let mc = method.model_config(&cfg.model, corpus.vocab.len());
    let builder = ExampleBuilder {
        vocab: &corpus.vocab,
        model: &mc,
        dictionary: &corpus.dictionary,
        gazetteer: &corpus.gazetteer,
        translit: if cfg.use_translit { translit } else { None },
        ner: cfg.ner_train,
        seed: cfg.train.seed,
        use_inner_sep: cfg.use_inner_sep,
    };
    let sents = method_corpus(method, corpus);
    let mut out = Vec::with_capacity(sents.len());
    let mut dropped = 0;
    let mut truncated = 0;
    for (i, s) in sents.iter().enumerate() {
        let p = builder.make_training_example(s, i as u64)?;
        truncated += p.truncated;
        if fits(&mc, &p.example) {
            out.push(p.example);
        } else {
            dropped += 1;
        }
    }
    if dropped > 0 || truncated > 0 {
        log::warn!("{method}: {dropped} overlong examples dropped, {truncated} candidates truncated");
    }
    Ok(out)
}

/// Trains the model behind `method` and writes its checkpoint and log.
pub fn train_model(
    cfg: &RunConfig,
    dir: &RunDir,
    method: Method,
    corpus: &Corpus,
    translit: Option<&dyn Transliterator>,
) -> Result<Transformer<f32>> {
    std::fs::create_dir_all(&dir.models)?;
    std::fs::write(dir.models.join(format!("{}.config.txt", method.model_key())), cfg.to_text())?;
    let data = training_examples(cfg, method, corpus, translit)?;
    let mc = method.model_config(&cfg.model, corpus.vocab.len());
    let mut model = Transformer::<f32>::new(mc, &mut rng::sub_rng(cfg.train.seed, STREAM_INIT, 0))?;
    let fp = cfg.model_fingerprint(method);
    let path = dir.model(method);
    log::info!("training {} on {} examples ({} parameters)", method.model_key(), data.len(), model.n_params());
    let log = training::train(&mut model, &data, &cfg.train, |step, m| {
        checkpoint::save(&path, m, &fp, serde_json::json!({ "step": step, "method": method.model_key() }))
    })?;
    let mut w = std::io::BufWriter::new(std::fs::File::create(dir.train_log(method))?);
    for e in &log {
        writeln!(w, "{}", e.to_line())?;
    }
    w.flush()?;
    Ok(model)
}

/// Loads the model behind `method`, failing on absence or mismatch.
pub fn load_model(cfg: &RunConfig, dir: &RunDir, method: Method) -> Result<Transformer<f32>> {
    let path = dir.model(method);
    require(&path)?;
    let (m, h) = checkpoint::load::<f32>(&path)?;
    check_fp(&path, &cfg.model_fingerprint(method), Some(&h.fingerprint))?;
    Ok(m)
}

/// Loads the model when a matching checkpoint exists, trains it otherwise.
pub fn ensure_model(
    cfg: &RunConfig,
    dir: &RunDir,
    method: Method,
    corpus: &Corpus,
    translit: Option<&dyn Transliterator>,
) -> Result<Transformer<f32>> {
    match load_model(cfg, dir, method) {
        Ok(m) => Ok(m),
        Err(Error::MissingArtifact(_)) | Err(Error::FingerprintMismatch { .. }) => {
            train_model(cfg, dir, method, corpus, translit)
        }
        Err(e) => Err(e),
    }
}

/// A trained method ready to translate annotated source sentences.
pub struct System<'a> {
    pub method: Method,
    pub model: &'a Transformer<f32>,
    pub vocab: &'a Vocab,
    pub dictionary: &'a Dictionary,
    pub gazetteer: &'a Gazetteer,
    pub translit: Option<&'a dyn Transliterator>,
    pub ner: NerMode,
    pub decode: DecodeConfig,
    pub use_inner_sep: bool,
    pub max_candidates: usize,
    pub seed: u64,
}

/// One translated sentence with the candidates it was given.
#[derive(Clone, Debug, Default)]
pub struct Translation {
    pub words: Vec<String>,
    pub candidates: CandidateSet,
}

impl<'a> System<'a> {
    pub fn new(
        cfg: &RunConfig,
        method: Method,
        model: &'a Transformer<f32>,
        corpus: &'a Corpus,
        translit: Option<&'a dyn Transliterator>,
    ) -> Self {
        System {
            method,
            model,
            vocab: &corpus.vocab,
            dictionary: &corpus.dictionary,
            gazetteer: &corpus.gazetteer,
            translit: if cfg.use_translit { translit } else { None },
            ner: cfg.ner,
            decode: cfg.decode,
            use_inner_sep: cfg.use_inner_sep,
            max_candidates: cfg.model.max_candidates,
            seed: rng::derive_seed(cfg.train.seed, STREAM_EVAL_NER, 0),
        }
    }

    fn builder(&self) -> ExampleBuilder<'_> {
        ExampleBuilder {
            vocab: self.vocab,
            model: &self.model.config,
            dictionary: self.dictionary,
            gazetteer: self.gazetteer,
            translit: self.translit,
            ner: self.ner,
            seed: self.seed,
            use_inner_sep: self.use_inner_sep,
        }
    }

    pub fn candidates(&self, s: &AnnotatedSentence, index: u64) -> CandidateSet {
        let dets = self.builder().detections(s, index);
        Extractor {
            dictionary: self.dictionary,
            translit: self.translit,
            max_candidates: self.max_candidates,
        }
        .extract(s, &dets, SelectMode::Infer)
    }

    /// `index` seeds the sentence's NER noise.
    pub fn translate(&self, s: &AnnotatedSentence, index: u64) -> Result<Translation> {
        let n = s.src_tokens.len();
        match self.method {
            Method::Plain | Method::Dict => {
                let (pieces, _) = segment(&s.src_tokens);
                let ex = Example {
                    enc: EncoderInput::plain(self.vocab.encode(&pieces), vec![0; pieces.len()])?,
                    dec: DecoderInput::default(),
                };
                Ok(Translation {
                    words: inference::translate(self.model, self.vocab, &ex, &self.decode, n)?,
                    candidates: CandidateSet::default(),
                })
            }
            Method::Annotate => {
                let dets = self.builder().detections(s, index);
                let (pieces, _) = segment(&s.src_tokens);
                let tags = source_type_tags(&word_starts(&s.src_tokens), &dets);
                let ex = Example {
                    enc: EncoderInput::plain(self.vocab.encode(&pieces), tags)?,
                    dec: DecoderInput::default(),
                };
                Ok(Translation {
                    words: inference::translate(self.model, self.vocab, &ex, &self.decode, n)?,
                    candidates: CandidateSet::default(),
                })
            }
            Method::Ea | Method::EncoderAttend => {
                let p = self.builder().prepare_source(s, index, SelectMode::Infer)?;
                Ok(Translation {
                    words: inference::translate(self.model, self.vocab, &p.example, &self.decode, n)?,
                    candidates: p.candidates,
                })
            }
            Method::Replace => {
                let cands = self.candidates(s, index);
                let (pieces, _) = segment(&s.src_tokens);
                let enc = EncoderInput::plain(self.vocab.encode(&pieces), vec![0; pieces.len()])?;
                let (words, _) =
                    inference::replacement_postprocess(self.model, self.vocab, s, &enc, &cands, &self.decode)?;
                Ok(Translation {
                    words,
                    candidates: cands,
                })
            }
            Method::Placeholder => {
                let cands = self.candidates(s, index);
                let words = inference::placeholder_pipeline(self.model, self.vocab, s, &cands, &self.decode)?;
                Ok(Translation {
                    words,
                    candidates: cands,
                })
            }
        }
    }
}

/// Candidate entries whose chosen candidate is wrong for the sentence and
/// absent from its reference.
pub fn incorrect_candidates(s: &AnnotatedSentence, cands: &CandidateSet) -> Vec<Vec<String>> {
    cands
        .entries
        .iter()
        .filter_map(|e| {
            let c = e.chosen();
            let right = match e.span.gold {
                Some(g) => s.entities[g].gold_tgt_surface == c,
                None => false,
            };
            (!right && !eval::contains_contiguous(&s.tgt_tokens, c)).then(|| c.to_vec())
        })
        .collect()
}

/// Translates a split and scores it. Latency is measured first on a fresh
/// system, one sentence at a time.
pub fn evaluate(system: &System<'_>, split: &[AnnotatedSentence], split_name: &str, latency_sentences: usize, fingerprint: &str) -> Result<(EvalReport, Vec<Vec<String>>)> {
    if split.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    let nl = latency_sentences.min(split.len());
    let latency = if nl > 0 {
        // Warm-up uses sentences outside the timed range so caches stay cold.
        let timed: Vec<usize> = (0..nl).collect();
        let warm: Vec<usize> = (nl..split.len().min(nl + 5)).collect();
        eval::measure_latency(&timed, &warm, |i| system.translate(&split[i], i as u64).map(|_| ()))?
    } else {
        eval::Latency::default()
    };
    let mut hyps = Vec::with_capacity(split.len());
    let mut cases = Vec::new();
    for (i, s) in split.iter().enumerate() {
        let t = system.translate(s, i as u64)?;
        for inc in incorrect_candidates(s, &t.candidates) {
            cases.push(MisguidanceCase {
                incorrect: inc,
                output: t.words.clone(),
            });
        }
        hyps.push(t.words);
    }
    let refs: Vec<Vec<String>> = split.iter().map(|s| s.tgt_tokens.clone()).collect();
    let report = EvalReport {
        method: system.method.as_str().to_string(),
        split: split_name.to_string(),
        bleu: eval::bleu(&refs, &hyps)?,
        entities: eval::entity_error_rate(split, &hyps)?,
        misguidance_rate: if cases.is_empty() { None } else { Some(eval::misguidance_rate(&cases)?) },
        misguidance_cases: cases.len(),
        latency,
        fingerprint: fingerprint.to_string(),
    };
    Ok((report, hyps))
}

/// Dictionary of the same world at another coverage level. Coverage draws
/// are fixed per entity, so higher coverage gives a superset.
pub fn dictionary_at_coverage(world: &World, coverage: f64) -> Dictionary {
    let mut wc = world.config.clone();
    for v in wc.dict_coverage_by_type.values_mut() {
        *v = coverage;
    }
    synth::build_dictionary(&world.entities, &wc, &synth::entity_frequencies(&world.train))
}

pub fn write_report(dir: &RunDir, name: &str, report: &EvalReport) -> Result<()> {
    dir.ensure("reports")?;
    std::fs::write(dir.report(name), report.to_text())?;
    Ok(())
}

/// Whether this NER mode looks at the gazetteer.
pub fn uses_gazetteer(ner: &NerMode) -> bool {
    ner.kind == NerKind::Gazetteer
}

/// Detected spans for a sentence, for inspection.
pub fn detections(sys: &System<'_>, s: &AnnotatedSentence, index: u64) -> Vec<crate::extraction::Detection> {
    let mut r = rng::sub_rng(sys.seed, 102, index);
    detect_entities(s, &sys.ner, sys.gazetteer, &mut r)
}

fn needs_translit(cfg: &RunConfig, method: Method) -> bool {
    cfg.use_translit && method.uses_candidates()
}

/// Trains whatever `cfg.method` needs: the classifier and transliteration
/// model when candidates come from transliteration, then the NMT model.
/// Artifacts with a matching fingerprint are reused.
pub fn cmd_train(cfg: &RunConfig, dir: &RunDir) -> Result<()> {
    cfg.validate()?;
    let corpus = load_corpus(cfg, dir)?;
    let tp = if needs_translit(cfg, cfg.method) {
        Some(ensure_translit(cfg, dir, &corpus, cfg.translit.aware)?)
    } else {
        None
    };
    ensure_model(cfg, dir, cfg.method, &corpus, tp.as_ref().map(|t| t as &dyn Transliterator))?;
    Ok(())
}

/// Evaluates `cfg.method` on `cfg.eval_split` from existing artifacts and
/// writes the report.
pub fn cmd_eval(cfg: &RunConfig, dir: &RunDir) -> Result<EvalReport> {
    cfg.validate()?;
    let corpus = load_corpus(cfg, dir)?;
    let model = load_model(cfg, dir, cfg.method)?;
    let tp = if needs_translit(cfg, cfg.method) {
        Some(load_translit(cfg, dir, cfg.translit.aware)?)
    } else {
        None
    };
    let sys = System::new(cfg, cfg.method, &model, &corpus, tp.as_ref().map(|t| t as &dyn Transliterator));
    let (report, _) = evaluate(
        &sys,
        corpus.split(cfg.eval_split),
        cfg.eval_split.as_str(),
        cfg.latency_sentences,
        &cfg.model_fingerprint(cfg.method),
    )?;
    let name = format!("{}_{}", cfg.method, cfg.eval_split.as_str());
    write_report(dir, &name, &report)?;
    std::fs::write(dir.root.join("reports").join(format!("{name}.config.txt")), cfg.to_text())?;
    Ok(report)
}

/// Ablation axes for `cmd_sweep`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Dictionary coverage, applied at inference time.
    Coverage,
    /// Gazetteer NER with `p_miss = p_spurious = value` at inference time.
    NerNoise,
    Method,
    AttendSite,
    /// Candidates per entity; each setting trains its own model.
    MaxCandidates,
}

impl FromStr for Axis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "coverage" => Axis::Coverage,
            "ner_noise" => Axis::NerNoise,
            "method" => Axis::Method,
            "attend_site" => Axis::AttendSite,
            "max_candidates" => Axis::MaxCandidates,
            _ => return Err(Error::Config(format!("unknown sweep axis `{s}`"))),
        })
    }
}

impl Axis {
    pub fn as_str(self) -> &'static str {
        match self {
            Axis::Coverage => "coverage",
            Axis::NerNoise => "ner_noise",
            Axis::Method => "method",
            Axis::AttendSite => "attend_site",
            Axis::MaxCandidates => "max_candidates",
        }
    }

    pub fn default_values(self) -> Vec<String> {
        let v: &[&str] = match self {
            Axis::Coverage => &["0.1", "0.25", "0.5", "0.8", "1.0"],
            Axis::NerNoise => &["0", "0.1", "0.2", "0.3"],
            Axis::Method => &["plain", "dict", "replace", "placeholder", "annotate", "ea"],
            Axis::AttendSite => &["decoder", "encoder"],
            Axis::MaxCandidates => &["1", "2", "4", "8"],
        };
        v.iter().map(|s| s.to_string()).collect()
    }
}

fn parse_f64(v: &str) -> Result<f64> {
    v.parse().map_err(|_| Error::Config(format!("bad sweep value `{v}`")))
}

/// Evaluates one row per setting of `axis`, training missing models on the
/// way, and writes the comparison table.
pub fn cmd_sweep(cfg: &RunConfig, dir: &RunDir, axis: Axis, values: &[String]) -> Result<Vec<(String, EvalReport)>> {
    cfg.validate()?;
    let corpus = load_corpus(cfg, dir)?;
    let world = match axis {
        Axis::Coverage => Some(synth::gen_corpus(&cfg.world)?),
        _ => None,
    };
    let mut rows = Vec::new();
    for v in values {
        let mut c = cfg.clone();
        let mut d = dir.clone();
        let mut dict = None;
        match axis {
            Axis::Coverage => {
                let cov = parse_f64(v)?;
                if !(0.0..=1.0).contains(&cov) {
                    return Err(Error::Config(format!("coverage {cov} outside [0,1]")));
                }
                dict = Some(dictionary_at_coverage(world.as_ref().expect("world"), cov));
            }
            Axis::NerNoise => {
                let p = parse_f64(v)?;
                c.ner = NerMode::gazetteer(p, p, 0.0);
            }
            Axis::Method => c.method = v.parse()?,
            Axis::AttendSite => {
                c.method = match v.as_str() {
                    "decoder" => Method::Ea,
                    "encoder" => Method::EncoderAttend,
                    _ => return Err(Error::Config(format!("attend site must be decoder or encoder, got `{v}`"))),
                }
            }
            Axis::MaxCandidates => {
                c.set("model.max_candidates", v)?;
                d = dir.with_models(&format!("max_candidates={v}"));
            }
        }
        c.validate()?;
        let tp = if needs_translit(&c, c.method) {
            Some(ensure_translit(&c, &d, &corpus, c.translit.aware)?)
        } else {
            None
        };
        let tref = tp.as_ref().map(|t| t as &dyn Transliterator);
        let model = ensure_model(&c, &d, c.method, &corpus, tref)?;
        let local;
        let corpus_ref = match dict {
            Some(dict) => {
                let mut cc = corpus.clone();
                cc.dictionary = dict;
                local = cc;
                &local
            }
            None => &corpus,
        };
        let sys = System::new(&c, c.method, &model, corpus_ref, tref);
        let (report, _) = evaluate(
            &sys,
            corpus_ref.split(c.eval_split),
            c.eval_split.as_str(),
            c.latency_sentences,
            &c.model_fingerprint(c.method),
        )?;
        log::info!("{}={v}: bleu {:.2} entity error {:.4}", axis.as_str(), report.bleu, report.error_rate());
        rows.push((format!("{}={v}", axis.as_str()), report));
    }
    let table: Vec<(String, &EvalReport)> = rows.iter().map(|(k, r)| (k.clone(), r)).collect();
    dir.ensure("reports")?;
    std::fs::write(dir.report(&format!("sweep_{}", axis.as_str())), eval::format_table(&table))?;
    Ok(rows)
}

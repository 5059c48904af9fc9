//! Training loop, optimizer and the construction of training examples.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extraction::{detect_entities, CandidateSet, Detection, Extractor, Gazetteer, NerMode, SelectMode, Transliterator};
use crate::linalg::Real;
use crate::model::input::{
    build_decoder_prefix, build_encoder_input_with_candidates, source_type_tags, DecoderInput, EncoderInput, Example,
};
use crate::model::{AttendSite, ModelConfig, Transformer};
use crate::rng;
use crate::synth::{AnnotatedSentence, Dictionary};
use crate::vocab::{segment, word_starts, Vocab};

const STREAM_SHUFFLE: u64 = 100;
const STREAM_DROPOUT: u64 = 101;
const STREAM_NER: u64 = 102;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub clip_norm: f64,
    pub seed: u64,
    /// 0 disables intermediate checkpoints.
    pub checkpoint_every: usize,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            max_steps: 8000,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            peak_lr: 2e-3,
            warmup_steps: 400,
            clip_norm: 1.0,
            seed: 1,
            checkpoint_every: 0,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_steps == 0 || self.log_every == 0 {
            return Err(Error::Config("batch_size, max_steps and log_every must be positive".into()));
        }
        if !(self.peak_lr > 0.0 && self.eps > 0.0 && self.clip_norm > 0.0) {
            return Err(Error::Config("peak_lr, eps and clip_norm must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must be in [0,1)".into()));
        }
        if self.warmup_steps == 0 || self.warmup_steps >= self.max_steps {
            return Err(Error::Config(format!(
                "warmup_steps {} must be in 1..max_steps ({})",
                self.warmup_steps, self.max_steps
            )));
        }
        Ok(())
    }

    /// Linear warmup to the peak, then inverse square root decay.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step == 0 {
            return 0.0;
        }
        let s = step as f64;
        let w = self.warmup_steps as f64;
        self.peak_lr * (s / w).min((w / s).sqrt())
    }
}

/// Adaptive moment estimation with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    m: Vec<T>,
    v: Vec<T>,
    t: i32,
}

impl<T: Real> Adam<T> {
    pub fn new(n: usize) -> Self {
        Adam {
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [T], grads: &[T], lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        let step = T::of(lr / c1);
        let c2s = T::of(c2.sqrt());
        let eps = T::of(cfg.eps);
        let one = T::one();
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (one - b1) * g;
            self.v[i] = b2 * self.v[i] + (one - b2) * g * g;
            params[i] -= step * self.m[i] / (self.v[i].sqrt() / c2s + eps);
        }
    }
}

pub fn global_norm<T: Real>(g: &[T]) -> f64 {
    g.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt()
}

/// Scales `g` so its global norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_grad<T: Real>(g: &mut [T], max_norm: f64) -> f64 {
    let n = global_norm(g);
    if n > max_norm {
        let s = T::of(max_norm / n);
        for x in g.iter_mut() {
            *x *= s;
        }
    }
    n
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub ms_per_step: f64,
}

impl LogEntry {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("log entries serialize")
    }
}

/// Trains in place for `cfg.max_steps` updates. `on_checkpoint` runs every
/// `checkpoint_every` steps and after the last one.
pub fn train<T: Real>(
    model: &mut Transformer<T>,
    data: &[Example],
    cfg: &TrainConfig,
    mut on_checkpoint: impl FnMut(usize, &Transformer<T>) -> Result<()>,
) -> Result<Vec<LogEntry>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let mut opt = Adam::new(model.params.len());
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut epoch = 0u64;
    let mut log = Vec::new();
    let mut acc_loss = 0.0;
    let mut acc_n = 0;
    let mut t0 = Instant::now();
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for step in 1..=cfg.max_steps {
        batch.clear();
        while batch.len() < cfg.batch_size.min(data.len()) {
            if cursor == order.len() {
                order = (0..data.len()).collect();
                order.shuffle(&mut rng::sub_rng(cfg.seed, STREAM_SHUFFLE, epoch));
                epoch += 1;
                cursor = 0;
            }
            batch.push(data[order[cursor]].clone());
            cursor += 1;
        }
        let mut drop_rng = rng::sub_rng(cfg.seed, STREAM_DROPOUT, step as u64);
        let (loss, mut grads) = model.loss_and_grad(&batch, Some(&mut drop_rng))?;
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged { step });
        }
        clip_grad(&mut grads, cfg.clip_norm);
        let lr = cfg.lr_at(step);
        opt.step(model.params.data_mut(), &grads, lr, cfg);
        acc_loss += loss;
        acc_n += 1;
        if step % cfg.log_every == 0 || step == cfg.max_steps {
            let ms = t0.elapsed().as_secs_f64() * 1000.0 / acc_n as f64;
            let e = LogEntry {
                step,
                loss: acc_loss / acc_n as f64,
                lr,
                ms_per_step: ms,
            };
            log::info!("{}", e.to_line());
            log.push(e);
            acc_loss = 0.0;
            acc_n = 0;
            t0 = Instant::now();
        }
        if (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0) || step == cfg.max_steps {
            on_checkpoint(step, model)?;
        }
    }
    Ok(log)
}

/// Everything needed to turn annotated sentences into model inputs.
pub struct ExampleBuilder<'a> {
    pub vocab: &'a Vocab,
    pub model: &'a ModelConfig,
    pub dictionary: &'a Dictionary,
    pub gazetteer: &'a Gazetteer,
    pub translit: Option<&'a dyn Transliterator>,
    pub ner: NerMode,
    /// Seed for the NER noise stream; sentence `i` uses its own sub-stream.
    pub seed: u64,
    pub use_inner_sep: bool,
}

/// A model input together with what produced it.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub example: Example,
    pub detections: Vec<Detection>,
    pub candidates: CandidateSet,
    /// Candidates dropped from an overlong prefix.
    pub truncated: usize,
}

impl ExampleBuilder<'_> {
    pub fn detections(&self, s: &AnnotatedSentence, index: u64) -> Vec<Detection> {
        let mut r = rng::sub_rng(self.seed, STREAM_NER, index);
        detect_entities(s, &self.ner, self.gazetteer, &mut r)
    }

    /// Source-side input only (target left empty), for decoding.
    pub fn prepare_source(&self, s: &AnnotatedSentence, index: u64, mode: SelectMode) -> Result<Prepared> {
        let detections = if self.model.use_type_embeddings || self.model.uses_candidates() {
            self.detections(s, index)
        } else {
            Vec::new()
        };
        let candidates = if self.model.uses_candidates() {
            Extractor {
                dictionary: self.dictionary,
                translit: self.translit,
                max_candidates: self.model.max_candidates,
            }
            .extract(s, &detections, mode)
        } else {
            CandidateSet::default()
        };
        let (pieces, _) = segment(&s.src_tokens);
        let starts = word_starts(&s.src_tokens);
        let tags = source_type_tags(&starts, &detections);
        let mut enc = EncoderInput::plain(self.vocab.encode(&pieces), tags)?;
        let mut prefix = Vec::new();
        let mut truncated = 0;
        match self.model.attend_site {
            AttendSite::Encoder => {
                enc = build_encoder_input_with_candidates(
                    enc,
                    &starts,
                    &candidates,
                    self.vocab,
                    self.model.max_candidates,
                    self.use_inner_sep,
                );
            }
            AttendSite::Decoder if self.model.use_prefix => {
                let (p, t) = build_decoder_prefix(
                    &candidates,
                    self.vocab,
                    self.model.max_candidates,
                    self.use_inner_sep,
                    self.model.max_prefix_len,
                );
                prefix = p;
                truncated = t;
            }
            AttendSite::Decoder => {}
        }
        Ok(Prepared {
            example: Example {
                enc,
                dec: DecoderInput::new(&prefix, &[]),
            },
            detections,
            candidates,
            truncated,
        })
    }

    /// Training example: candidates chosen against the gold target surface,
    /// labels are the target pieces followed by EOS, prefix rows masked out.
    pub fn make_training_example(&self, s: &AnnotatedSentence, index: u64) -> Result<Prepared> {
        let mut p = self.prepare_source(s, index, SelectMode::Train)?;
        let prefix: Vec<u32> = p.example.dec.ids[..p.example.dec.prefix_len()].to_vec();
        let target = self.vocab.encode(&segment(&s.tgt_tokens).0);
        p.example.dec = DecoderInput::new(&prefix, &target);
        Ok(p)
    }
}

/// Whether an example fits the model's tables.
pub fn fits(model: &ModelConfig, ex: &Example) -> bool {
    ex.enc.positions.iter().all(|&p| p < model.max_src_len)
        && ex.enc.rel.iter().all(|r| r.is_none_or(|r| r < model.max_cand_len))
        && ex.dec.prefix_len() <= model.max_prefix_len
        && ex.dec.len() - ex.dec.prefix_len() <= model.max_tgt_len
}

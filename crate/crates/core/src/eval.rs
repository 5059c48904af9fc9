//! BLEU, entity error rate, misguidance rate, latency and report formatting.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::{AnnotatedSentence, EntityType};

fn ngram_counts<S: AsRef<str>>(toks: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut m = HashMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *m.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU-4 in [0, 100]. Clipped n-gram precisions; orders 2-4 get
/// add-one smoothing on numerator and denominator; brevity penalty
/// `exp(min(0, 1 - ref_len/hyp_len))`.
pub fn bleu<S: AsRef<str>, U: AsRef<str>>(references: &[Vec<S>], hypotheses: &[Vec<U>]) -> Result<f64> {
    if hypotheses.is_empty() {
        return Err(Error::Empty("hypothesis set"));
    }
    if references.len() != hypotheses.len() {
        return Err(Error::Config(format!(
            "{} references for {} hypotheses",
            references.len(),
            hypotheses.len()
        )));
    }
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut r_len, mut h_len) = (0usize, 0usize);
    for (r, h) in references.iter().zip(hypotheses) {
        r_len += r.len();
        h_len += h.len();
        for n in 1..=4 {
            let rc = ngram_counts(r, n);
            for (g, c) in ngram_counts(h, n) {
                matches[n - 1] += c.min(rc.get(&g).copied().unwrap_or(0));
                totals[n - 1] += c;
            }
        }
    }
    if h_len == 0 || matches[0] == 0 {
        return Ok(0.0);
    }
    let mut log_p = (matches[0] as f64 / totals[0] as f64).ln();
    for n in 1..4 {
        log_p += ((matches[n] + 1) as f64 / (totals[n] + 1) as f64).ln();
    }
    let bp = (1.0 - r_len as f64 / h_len as f64).min(0.0);
    Ok(100.0 * (bp + log_p / 4.0).exp())
}

/// Whether `needle` occurs as a contiguous run of `hay`.
pub fn contains_contiguous<S: PartialEq>(hay: &[S], needle: &[S]) -> bool {
    needle.is_empty() || hay.windows(needle.len()).any(|w| w == needle)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorCounts {
    pub errors: usize,
    pub entities: usize,
}

impl ErrorCounts {
    pub fn rate(&self) -> f64 {
        if self.entities == 0 {
            0.0
        } else {
            self.errors as f64 / self.entities as f64
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EntityErrors {
    pub total: ErrorCounts,
    pub by_type: BTreeMap<EntityType, ErrorCounts>,
}

/// An entity is an error when its gold target surface is not a contiguous
/// token run of the hypothesis.
pub fn entity_error_rate(test: &[AnnotatedSentence], hypotheses: &[Vec<String>]) -> Result<EntityErrors> {
    if test.len() != hypotheses.len() {
        return Err(Error::Config(format!("{} sentences for {} hypotheses", test.len(), hypotheses.len())));
    }
    let mut out = EntityErrors::default();
    for t in EntityType::ALL {
        out.by_type.insert(t, ErrorCounts::default());
    }
    for (s, h) in test.iter().zip(hypotheses) {
        for e in &s.entities {
            let miss = !contains_contiguous(h, &e.gold_tgt_surface);
            let c = out.by_type.get_mut(&e.etype).expect("all types present");
            c.entities += 1;
            out.total.entities += 1;
            if miss {
                c.errors += 1;
                out.total.errors += 1;
            }
        }
    }
    Ok(out)
}

/// A candidate known to be wrong, and the system output it was given to.
#[derive(Clone, Debug, PartialEq)]
pub struct MisguidanceCase {
    pub incorrect: Vec<String>,
    pub output: Vec<String>,
}

/// Fraction of cases whose incorrect candidate shows up in the output.
pub fn misguidance_rate(cases: &[MisguidanceCase]) -> Result<f64> {
    if cases.is_empty() {
        return Err(Error::Empty("flagged candidate cases"));
    }
    let hit = cases.iter().filter(|c| contains_contiguous(&c.output, &c.incorrect)).count();
    Ok(hit as f64 / cases.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Latency {
    pub mean_ms: f64,
    pub std_ms: f64,
    pub n: usize,
}

/// Wall-clock time of `f(i)` for each `i < n`, one call at a time, after
/// `warmup` untimed calls.
pub fn measure_latency(timed: &[usize], warmup: &[usize], mut f: impl FnMut(usize) -> Result<()>) -> Result<Latency> {
    let n = timed.len();
    if n == 0 {
        return Err(Error::Empty("latency set"));
    }
    for &i in warmup {
        f(i)?;
    }
    let mut ms = Vec::with_capacity(n);
    for &i in timed {
        let t = Instant::now();
        f(i)?;
        ms.push(t.elapsed().as_secs_f64() * 1000.0);
    }
    let mean = ms.iter().sum::<f64>() / n as f64;
    let var = ms.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
    Ok(Latency {
        mean_ms: mean,
        std_ms: var.sqrt(),
        n,
    })
}

/// Exact-match accuracy of predictions against gold values.
pub fn exact_match_accuracy<T: PartialEq>(gold: &[T], predicted: &[T]) -> Result<f64> {
    if gold.is_empty() {
        return Err(Error::Empty("accuracy set"));
    }
    let hits = gold.iter().zip(predicted).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / gold.len() as f64)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub split: String,
    pub bleu: f64,
    pub entities: EntityErrors,
    pub misguidance_rate: Option<f64>,
    pub misguidance_cases: usize,
    pub latency: Latency,
    pub fingerprint: String,
}

impl EvalReport {
    pub fn error_rate(&self) -> f64 {
        self.entities.total.rate()
    }

    pub fn type_rate(&self, t: EntityType) -> f64 {
        self.entities.by_type.get(&t).map_or(0.0, ErrorCounts::rate)
    }

    /// One `key=value` line per field.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "method={}", self.method);
        let _ = writeln!(s, "split={}", self.split);
        let _ = writeln!(s, "fingerprint={}", self.fingerprint);
        let _ = writeln!(s, "bleu={:.4}", self.bleu);
        let _ = writeln!(s, "error_rate_total={:.6}", self.error_rate());
        let _ = writeln!(s, "n_entities_total={}", self.entities.total.entities);
        for (t, c) in &self.entities.by_type {
            let _ = writeln!(s, "error_rate_{}={:.6}", t.as_str(), c.rate());
            let _ = writeln!(s, "n_entities_{}={}", t.as_str(), c.entities);
        }
        match self.misguidance_rate {
            Some(m) => {
                let _ = writeln!(s, "misguidance_rate={m:.6}");
            }
            None => {
                let _ = writeln!(s, "misguidance_rate=none");
            }
        }
        let _ = writeln!(s, "misguidance_cases={}", self.misguidance_cases);
        let _ = writeln!(s, "mean_latency_ms={:.3}", self.latency.mean_ms);
        let _ = writeln!(s, "latency_std_ms={:.3}", self.latency.std_ms);
        s
    }
}

/// Aligned table with one row per report, error rates in percent.
pub fn format_table(rows: &[(String, &EvalReport)]) -> String {
    let header = ["setting", "BLEU", "ER%", "PER%", "LOC%", "ORG%", "misguide%", "ms/sent"];
    let mut cells: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
    for (name, r) in rows {
        cells.push(vec![
            name.clone(),
            format!("{:.2}", r.bleu),
            format!("{:.1}", 100.0 * r.error_rate()),
            format!("{:.1}", 100.0 * r.type_rate(EntityType::Per)),
            format!("{:.1}", 100.0 * r.type_rate(EntityType::Loc)),
            format!("{:.1}", 100.0 * r.type_rate(EntityType::Org)),
            r.misguidance_rate.map_or("-".into(), |m| format!("{:.1}", 100.0 * m)),
            format!("{:.2}", r.latency.mean_ms),
        ]);
    }
    let widths: Vec<usize> = (0..header.len())
        .map(|c| cells.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, row) in cells.iter().enumerate() {
        let line: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, x)| if c == 0 { format!("{x:<w$}", w = widths[c]) } else { format!("{x:>w$}", w = widths[c]) })
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
        if i == 0 {
            out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
            out.push('\n');
        }
    }
    out
}

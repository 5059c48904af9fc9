use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use entity_nmt::extraction::{NerKind, NerMode, Transliterator};
use entity_nmt::pipeline::{self, Axis, RunConfig, RunDir, Split, System};
use entity_nmt::synth::{AnnotatedSentence, EntitySpan, EntityType, Nationality};
use entity_nmt::Error;

/// Entity-aware translation experiments on a synthetic bilingual world.
#[derive(Parser, Debug)]
#[command(name = "entmt", version)]
struct Cli {
    #[command(flatten)]
    opts: Opts,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Debug)]
struct Opts {
    /// Run directory holding every artifact.
    #[arg(long, global = true, default_value = "run")]
    run_dir: PathBuf,
    /// key=value config file; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Extra config override, repeatable (e.g. --set train.max_steps=2000).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long, global = true)]
    method: Option<String>,
    /// Test-time entity detection.
    #[arg(long, global = true, value_enum)]
    ner_mode: Option<NerArg>,
    #[arg(long, global = true)]
    p_miss: Option<f64>,
    #[arg(long, global = true)]
    p_spurious: Option<f64>,
    #[arg(long, global = true)]
    max_candidates: Option<usize>,
    /// Use dictionary candidates only.
    #[arg(long, global = true)]
    no_translit: bool,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    steps: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum NerArg {
    Gold,
    Gazetteer,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate corpus, dictionary, gazetteer and vocabulary.
    Gen,
    /// Train the models the selected method needs.
    Train,
    /// Translate whitespace-tokenized sentences, one per line.
    Translate {
        #[arg(long)]
        input: PathBuf,
        /// Entity spans per input line, as `start:end:TYPE` items. Without
        /// it entities are found with the gazetteer.
        #[arg(long)]
        entities: Option<PathBuf>,
        /// Defaults to stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Score the selected method and write a report.
    Eval {
        #[arg(long, value_enum)]
        split: Option<SplitArg>,
    },
    /// Compare settings along one ablation axis.
    Sweep {
        #[arg(long)]
        axis: String,
        /// Comma-separated settings; each axis has defaults.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
    TestUnseen,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
            SplitArg::TestUnseen => Split::TestUnseen,
        }
    }
}

fn build_config(o: &Opts) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(p) = &o.config {
        let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
        cfg.apply_text(&text)?;
    }
    for kv in &o.sets {
        let Some((k, v)) = kv.split_once('=') else {
            return Err(Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")).into());
        };
        cfg.set(k.trim(), v)?;
    }
    if let Some(m) = &o.method {
        cfg.method = m.parse()?;
    }
    if let Some(n) = o.ner_mode {
        cfg.ner.kind = match n {
            NerArg::Gold => NerKind::Gold,
            NerArg::Gazetteer => NerKind::Gazetteer,
        };
    }
    if let Some(p) = o.p_miss {
        cfg.ner.p_miss = p;
    }
    if let Some(p) = o.p_spurious {
        cfg.ner.p_spurious = p;
    }
    if let Some(k) = o.max_candidates {
        cfg.model.max_candidates = k;
    }
    if o.no_translit {
        cfg.use_translit = false;
    }
    if let Some(s) = o.seed {
        cfg.world.seed = s;
        cfg.train.seed = s;
    }
    if let Some(s) = o.steps {
        cfg.train.max_steps = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_spans(line: &str, n_tokens: usize, lineno: usize, path: &Path) -> anyhow::Result<Vec<EntitySpan>> {
    let mut spans = Vec::new();
    for item in line.split_whitespace() {
        let bad = || Error::Parse {
            path: path.display().to_string(),
            line: lineno,
            msg: format!("expected start:end:TYPE, got `{item}`"),
        };
        let mut it = item.split(':');
        let (Some(a), Some(b), Some(t), None) = (it.next(), it.next(), it.next(), it.next()) else {
            return Err(bad().into());
        };
        let start: usize = a.parse().map_err(|_| bad())?;
        let end: usize = b.parse().map_err(|_| bad())?;
        let etype: EntityType = t.parse()?;
        if start >= end || end > n_tokens {
            return Err(bad().into());
        }
        spans.push((start, end, etype));
    }
    spans.sort_by_key(|s| s.0);
    if spans.windows(2).any(|w| w[1].0 < w[0].1) {
        bail!(Error::Parse {
            path: path.display().to_string(),
            line: lineno,
            msg: "overlapping entity spans".into(),
        });
    }
    Ok(spans
        .into_iter()
        .map(|(start, end, etype)| EntitySpan {
            start,
            end,
            etype,
            nationality: Nationality::Other,
            src_surface: Vec::new(),
            gold_tgt_surface: Vec::new(),
            tgt_start: 0,
            tgt_end: 0,
        })
        .collect())
}

fn read_lines(path: &Path) -> anyhow::Result<Vec<String>> {
    let f = std::fs::File::open(path).map_err(|_| Error::MissingArtifact(path.to_path_buf()))?;
    Ok(BufReader::new(f).lines().collect::<std::io::Result<_>>()?)
}

fn translate(cfg: &mut RunConfig, dir: &RunDir, input: &Path, entities: Option<&Path>, output: Option<&Path>) -> anyhow::Result<()> {
    let lines = read_lines(input)?;
    let span_lines = match entities {
        Some(p) => {
            let l = read_lines(p)?;
            if l.len() != lines.len() {
                bail!(Error::Config(format!(
                    "{} has {} lines but {} has {}",
                    p.display(),
                    l.len(),
                    input.display(),
                    lines.len()
                )));
            }
            Some(l)
        }
        None => {
            if cfg.ner.kind == NerKind::Gold {
                cfg.ner = NerMode::gazetteer(0.0, 0.0, 0.0);
            }
            None
        }
    };
    let corpus = pipeline::load_corpus(cfg, dir)?;
    let model = pipeline::load_model(cfg, dir, cfg.method)?;
    let tp = if cfg.use_translit && cfg.method.uses_candidates() {
        Some(pipeline::load_translit(cfg, dir, cfg.translit.aware)?)
    } else {
        None
    };
    let sys = System::new(cfg, cfg.method, &model, &corpus, tp.as_ref().map(|t| t as &dyn Transliterator));
    let mut out: Box<dyn Write> = match output {
        Some(p) => Box::new(BufWriter::new(std::fs::File::create(p)?)),
        None => Box::new(BufWriter::new(std::io::stdout().lock())),
    };
    for (i, line) in lines.iter().enumerate() {
        let src_tokens: Vec<String> = line.split_whitespace().map(str::to_string).collect();
        if src_tokens.is_empty() {
            writeln!(out)?;
            continue;
        }
        let mut ents = match &span_lines {
            Some(l) => parse_spans(&l[i], src_tokens.len(), i + 1, entities.expect("sidecar"))?,
            None => Vec::new(),
        };
        for e in &mut ents {
            e.src_surface = src_tokens[e.start..e.end].to_vec();
        }
        let s = AnnotatedSentence {
            src_tokens,
            tgt_tokens: Vec::new(),
            entities: ents,
        };
        let t = sys.translate(&s, i as u64)?;
        writeln!(out, "{}", t.words.join(" "))?;
    }
    out.flush()?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = build_config(&cli.opts)?;
    let dir = RunDir::new(&cli.opts.run_dir);
    match cli.cmd {
        Cmd::Gen => {
            pipeline::cmd_gen(&cfg, &dir)?;
            println!("corpus written to {}", dir.root.join("corpus").display());
        }
        Cmd::Train => {
            pipeline::cmd_train(&cfg, &dir)?;
            println!("model written to {}", dir.model(cfg.method).display());
        }
        Cmd::Translate {
            input,
            entities,
            output,
        } => translate(&mut cfg, &dir, &input, entities.as_deref(), output.as_deref())?,
        Cmd::Eval { split } => {
            if let Some(s) = split {
                cfg.eval_split = s.into();
            }
            let report = pipeline::cmd_eval(&cfg, &dir)?;
            print!("{}", report.to_text());
        }
        Cmd::Sweep { axis, values } => {
            let axis: Axis = axis.parse()?;
            let values = if values.is_empty() { axis.default_values() } else { values };
            let rows = pipeline::cmd_sweep(&cfg, &dir, axis, &values)?;
            let table: Vec<(String, &entity_nmt::eval::EvalReport)> = rows.iter().map(|(k, r)| (k.clone(), r)).collect();
            print!("{}", entity_nmt::eval::format_table(&table));
        }
    }
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::MissingArtifact(_)) => 3,
        Some(
            Error::Config(_)
            | Error::FingerprintMismatch { .. }
            | Error::UnknownEntityType(_)
            | Error::UnknownNationality(_)
            | Error::Parse { .. },
        ) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use entity_nmt::pipeline::Method;

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.txt");
        std::fs::write(&p, "train.max_steps=500\nmethod=plain\nuse_translit=true\n").unwrap();
        let cli = Cli::parse_from([
            "entmt",
            "--config",
            p.to_str().unwrap(),
            "--method",
            "dict",
            "--no-translit",
            "--set",
            "decode.beam_size=2",
            "gen",
        ]);
        let cfg = build_config(&cli.opts).unwrap();
        assert_eq!(cfg.train.max_steps, 500);
        assert_eq!(cfg.method, Method::Dict);
        assert!(!cfg.use_translit);
        assert_eq!(cfg.decode.beam_size, 2);
    }

    #[test]
    fn spans_parse_and_reject_garbage() {
        let p = Path::new("e.txt");
        let s = parse_spans("3:5:LOC 0:1:PER", 6, 1, p).unwrap();
        assert_eq!((s[0].start, s[0].end, s[0].etype), (0, 1, EntityType::Per));
        assert_eq!(s[1].etype, EntityType::Loc);
        assert!(parse_spans("0:9:PER", 6, 1, p).is_err());
        assert!(parse_spans("0:2:PER 1:3:LOC", 6, 1, p).is_err());
        assert!(parse_spans("0-2-PER", 6, 1, p).is_err());
        assert!(parse_spans("0:2:FOO", 6, 1, p).is_err());
    }

    #[test]
    fn error_kinds_map_to_exit_codes() {
        assert_eq!(exit_code(&Error::MissingArtifact("x".into()).into()), 3);
        assert_eq!(exit_code(&Error::Config("x".into()).into()), 2);
        assert_eq!(exit_code(&anyhow::anyhow!("io")), 1);
    }
}

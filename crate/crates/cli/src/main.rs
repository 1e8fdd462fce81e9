use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};

use stransformer::checkpoint::Checkpoint;
use stransformer::chunker::segment_utterance;
use stransformer::corpus::{load_corpus, write_corpus, write_mel};
use stransformer::synth::{synthesize, SynthesisOutput};
use stransformer::toy_corpus::ToyCorpus;
use stransformer::train::{Trainer, LOG_HEADER};
use stransformer::verify::{run_suite, VerifyOptions};
use stransformer::{Error, RunConfig};

#[derive(Parser)]
#[command(name = "stransformer", version, about = "Segment-recurrent transformer acoustic model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic toy corpus (manifest + mel files).
    GenCorpus {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a corpus, logging per-step losses as CSV next to the checkpoint.
    Train {
        /// Run configuration; taken from the checkpoint when resuming.
        #[arg(long, conflicts_with = "resume")]
        config: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint that carries training state.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Total number of updates, overriding the config.
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Synthesize one mel file per non-empty input line.
    Synth {
        #[arg(long)]
        ckpt: PathBuf,
        /// One utterance per line: space-separated symbols, optionally `| sentence_type`.
        #[arg(long)]
        text: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write per-chunk cross-attention and an alignment CSV.
        #[arg(long)]
        dump_attn: bool,
    },
    /// Run the built-in property suites.
    Verify {
        #[arg(long, default_value = "all")]
        suite: String,
        /// Keep graph links through the memories (the memory suite must then fail).
        #[arg(long)]
        break_sg: bool,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Print a checkpoint's configuration and size.
    Inspect {
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Print the default configuration in canonical form.
    Defaults,
}

struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    fn new(code: u8, error: impl Into<anyhow::Error>) -> Self {
        Failure {
            code,
            error: error.into(),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        Failure { code: 1, error }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::NonFiniteLoss { .. } | Error::Divergence { .. } => 3,
            _ => 1,
        };
        Failure::new(code, e)
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenCorpus { config, out } => gen_corpus(config.as_deref(), &out),
        Command::Train {
            config,
            corpus,
            out,
            resume,
            steps,
        } => train(config.as_deref(), &corpus, &out, resume.as_deref(), steps),
        Command::Synth {
            ckpt,
            text,
            out,
            dump_attn,
        } => synth(&ckpt, &text, &out, dump_attn),
        Command::Verify { suite, break_sg, seed } => verify(&suite, break_sg, seed),
        Command::Inspect { ckpt } => inspect(&ckpt),
        Command::Defaults => {
            print!("{}", RunConfig::default().to_text());
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn load_config(path: Option<&Path>) -> anyhow::Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading config {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

fn gen_corpus(config: Option<&Path>, out: &Path) -> CmdResult {
    let run = load_config(config)?;
    run.validate()?;
    let toy = ToyCorpus::new(run.toy_spec())?;
    let utts = toy.generate(run.toy.n_utts)?;
    write_corpus(out, &utts).map_err(|e| match e {
        Error::Io { .. } => Failure::new(2, anyhow!(e).context(format!("cannot write corpus to {}", out.display()))),
        other => other.into(),
    })?;
    let vocab = toy.vocabulary();
    let (mut segments, mut rate_sum, mut frames) = (0usize, 0.0, 0usize);
    for u in &utts {
        frames += u.n_frames();
        for s in segment_utterance(u, &vocab, run.model.chunk_size, run.model.search_window)? {
            segments += 1;
            rate_sum += s.speaking_rate()?;
        }
    }
    println!("utterances {}", utts.len());
    println!("frames {frames}");
    println!("segments {segments}");
    println!("mean_chunk_rate {:.12}", rate_sum / segments.max(1) as f64);
    Ok(())
}

/// `model.ckpt` logs to `model.ckpt.csv`.
fn log_path(ckpt: &Path) -> PathBuf {
    let mut p = ckpt.as_os_str().to_owned();
    p.push(".csv");
    PathBuf::from(p)
}

fn train(config: Option<&Path>, corpus_dir: &Path, out: &Path, resume: Option<&Path>, steps: Option<u64>) -> CmdResult {
    let corpus = load_corpus(corpus_dir).with_context(|| format!("loading corpus {}", corpus_dir.display()))?;
    let mut trainer = match resume {
        Some(path) => Trainer::resume(Checkpoint::load(path)?, &corpus)?,
        None => Trainer::new(load_config(config)?, &corpus)?,
    };
    if let Some(n) = steps {
        trainer.set_total_steps(n);
    }
    let log_file = log_path(out);
    let append = resume.is_some() && log_file.exists();
    let file = fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(&log_file)
        .with_context(|| format!("opening log {}", log_file.display()))?;
    let mut log = BufWriter::new(file);
    if !append {
        writeln!(log, "{LOG_HEADER}").context("writing log header")?;
    }
    let start = trainer.step_count();
    let last = trainer.run(&mut log, |t| t.checkpoint(true).save(out));
    log.flush().context("flushing log")?;
    let last = last?;
    match last {
        Some(s) => println!(
            "trained {} steps (to step {}); last mel {:.6} stop {:.6} chunk_stop {:.6} rate {:.6}",
            s.step - start,
            s.step,
            s.loss.mel,
            s.loss.stop,
            s.loss.chunk_stop,
            s.loss.rate
        ),
        None => {
            trainer.checkpoint(true).save(out)?;
            println!("nothing to do: already at step {start}");
        }
    }
    Ok(())
}

struct InputLine {
    number: usize,
    symbols: Vec<String>,
    sentence_type: usize,
}

fn parse_input(text: &str, ckpt: &Checkpoint) -> Result<Vec<InputLine>, Failure> {
    let mut lines = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let number = i + 1;
        let (body, tag) = match raw.split_once('|') {
            Some((b, t)) => (b, Some(t.trim())),
            None => (raw, None),
        };
        let symbols: Vec<String> = body.split_whitespace().map(String::from).collect();
        if symbols.is_empty() {
            continue;
        }
        for s in &symbols {
            if ckpt.vocab.id(s).is_err() {
                return Err(Failure::new(4, anyhow!("line {number}: unknown symbol `{s}`")));
            }
        }
        let sentence_type = match tag {
            Some(t) => t
                .parse::<usize>()
                .ok()
                .filter(|&v| v < ckpt.config.model.n_sentence_types)
                .ok_or_else(|| anyhow!("line {number}: bad sentence type `{t}`"))?,
            None => 0,
        };
        lines.push(InputLine {
            number,
            symbols,
            sentence_type,
        });
    }
    Ok(lines)
}

fn synth(ckpt_path: &Path, text: &Path, out: &Path, dump_attn: bool) -> CmdResult {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let (model, store) = stransformer::STransformer::bind(ckpt.config.model.clone(), ckpt.vocab.clone(), &ckpt.params)?;
    let input = fs::read_to_string(text).with_context(|| format!("reading {}", text.display()))?;
    let lines = parse_input(&input, &ckpt)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for line in &lines {
        let result = synthesize(&model, &store, &line.symbols, line.sentence_type)?;
        let stem = format!("utt{:04}", line.number);
        write_mel(&out.join(format!("{stem}.mel")), &result.mel)?;
        if dump_attn {
            dump_attention(out, &stem, &result)?;
        }
        for (k, s) in result.segments.iter().enumerate() {
            if s.hit_frame_cap {
                eprintln!("warning: line {} chunk {k} hit the frame cap", line.number);
            }
        }
        println!(
            "line {}: {} symbols, {} chunks, {} frames",
            line.number,
            line.symbols.len(),
            result.segments.len(),
            result.mel.shape()[0]
        );
    }
    Ok(())
}

/// `{stem}.seg{k}.attn.csv` holds every head's weights for chunk `k`;
/// `{stem}.align.csv` holds the focused-head centroid per decoder step.
fn dump_attention(out: &Path, stem: &str, result: &SynthesisOutput) -> anyhow::Result<()> {
    let mut align = String::from("step,segment,centroid\n");
    for (k, seg) in result.segments.iter().enumerate() {
        let mut csv = String::from("layer,head,frame,symbol,weight\n");
        for (li, layer) in seg.cross_attn.iter().enumerate() {
            for (hi, w) in layer.iter().enumerate() {
                let (rows, cols) = (w.shape()[0], w.shape()[1]);
                for r in 0..rows {
                    for c in 0..cols {
                        writeln!(csv, "{li},{hi},{r},{},{:.9e}", seg.symbols.start + c, w.get2(r, c))?;
                    }
                }
            }
        }
        let path = out.join(format!("{stem}.seg{k:02}.attn.csv"));
        fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?;
        if let Some(w) = seg.focused_head() {
            for r in 0..w.shape()[0] {
                let centroid: f64 = w.row(r).iter().enumerate().map(|(j, p)| p * (seg.symbols.start + j) as f64).sum();
                writeln!(align, "{},{k},{centroid:.6}", seg.frames.start + r)?;
            }
        }
    }
    let path = out.join(format!("{stem}.align.csv"));
    fs::write(&path, align).with_context(|| format!("writing {}", path.display()))
}

fn verify(suite: &str, break_sg: bool, seed: u64) -> CmdResult {
    let checks = run_suite(suite, VerifyOptions { break_sg, seed })?;
    let width = checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
    for c in &checks {
        let mark = if c.passed { "PASS" } else { "FAIL" };
        println!("{mark}  {:<8} {:<width$}  {}", c.suite, c.name, c.detail);
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    println!("{} checks, {failed} failed", checks.len());
    if failed > 0 {
        return Err(Failure::new(1, anyhow!("{failed} check(s) failed")));
    }
    Ok(())
}

fn inspect(path: &Path) -> CmdResult {
    let ckpt = Checkpoint::load(path)?;
    println!("parameters {} ({} scalars)", ckpt.params.len(), ckpt.params.num_scalars());
    println!("vocabulary {}", ckpt.vocab.symbols().join(" "));
    match &ckpt.train {
        Some(t) => println!("training state: step {} epoch {} lanes {}", t.step, t.epoch, t.lanes.len()),
        None => println!("training state: none"),
    }
    print!("{}", ckpt.config.to_text());
    Ok(())
}

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use kws_core::checkpoint::{load_checkpoint, save_checkpoint, total_param_count};
use kws_core::data::corpus::read_lines;
use kws_core::data::lexicon::symbols;
use kws_core::data::wav::load_wav;
use kws_core::data::{to_phonemes, Corpus, Lexicon, SynthSpec, TrialLayout};
use kws_core::dsp::compute_logmel;
use kws_core::eval::{emit_alignment_heatmap, far_frr_sweep, write_scores_csv, MetricReport};
use kws_core::losses::{Term, TermSet};
use kws_core::model::{FeatureBank, Model, Scorer};
use kws_core::pipeline::{emit_figures, evaluate};
use kws_core::train::{model_from_checkpoint, train_model, TrainConfig, TrainOutcome};
use kws_core::{KwsError, Result};

#[derive(Parser)]
#[command(name = "kws", version, about = "Zero-shot keyword spotting: synthesize, train, evaluate, inspect")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic corpus (WAV files, trials.csv, lexicon, keywords).
    Synth(SynthArgs),
    /// Train a model on a corpus and write a checkpoint plus loss log.
    Train(TrainArgs),
    /// Score a trial list with a checkpoint; write metrics and figures.
    Eval(EvalArgs),
    /// Train the full model and a variant without one loss term.
    Ablate(AblateArgs),
    /// Emit the attention heatmap of one WAV against one keyword.
    Align(AlignArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Keyword list, one word, phrase or /P1 P2/ sequence per line.
    #[arg(long)]
    keywords: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// JSON file with SynthSpec fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Pronunciation lexicon, `WORD P1 P2 ...` per line.
    #[arg(long)]
    lexicon: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    n_per_kw: usize,
    #[arg(long, default_value_t = 1.0)]
    neg_ratio: f64,
    #[arg(long, default_value_t = 0.5)]
    hard_neg_frac: f64,
    #[arg(long)]
    seed: Option<u64>,
}

/// TrainConfig overrides; flags win over the config file.
#[derive(Args, Clone)]
struct TrainOverrides {
    /// JSON file with TrainConfig fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    ucl_minibatch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

impl TrainOverrides {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut c = match &self.config {
            Some(p) => read_json::<TrainConfig>(p)?,
            None => TrainConfig::default(),
        };
        if let Some(v) = self.epochs {
            c.epochs = v;
        }
        if let Some(v) = self.learning_rate {
            c.learning_rate = v;
        }
        if let Some(v) = self.batch_size {
            c.batch_size = v;
        }
        if let Some(v) = self.ucl_minibatch {
            c.ucl_minibatch = v;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// JSON-lines loss log; defaults to the checkpoint path with `.log.jsonl`.
    #[arg(long)]
    log: Option<PathBuf>,
    #[command(flatten)]
    train: TrainOverrides,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// trials.csv of a corpus directory.
    #[arg(long)]
    trials: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Held-out corpus for the reports; defaults to the training corpus.
    #[arg(long)]
    eval_corpus: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Term to drop: pcl, ucl or fa.
    #[arg(long, value_parser = parse_drop)]
    drop: Term,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    #[command(flatten)]
    train: TrainOverrides,
}

#[derive(Args)]
struct AlignArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    wav: PathBuf,
    /// Word, phrase or /P1 P2/ sequence.
    #[arg(long)]
    keyword: String,
    #[arg(long)]
    lexicon: Option<PathBuf>,
    /// Output stem; `.csv` and `.svg` are appended.
    #[arg(long, default_value = "alignment")]
    out: PathBuf,
}

fn parse_drop(s: &str) -> std::result::Result<Term, String> {
    match Term::parse(s) {
        Some(t @ (Term::Pcl | Term::Ucl | Term::Fa)) => Ok(t),
        _ => Err(format!("expected one of pcl, ucl, fa; got `{s}`")),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn io_err(path: &Path, source: std::io::Error) -> KwsError {
    KwsError::Io { path: path.to_path_buf(), source }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn load_lexicon(path: Option<&Path>) -> Result<Lexicon> {
    match path {
        Some(p) => Lexicon::load(p),
        None => Ok(Lexicon::builtin()),
    }
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let mut spec = match &a.config {
        Some(p) => read_json::<SynthSpec>(p)?,
        None => SynthSpec::default(),
    };
    if let Some(p) = &a.keywords {
        spec.keywords = read_lines(p)?;
    }
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    let lexicon = load_lexicon(a.lexicon.as_deref())?;
    let layout = TrialLayout { n_per_kw: a.n_per_kw, neg_ratio: a.neg_ratio, hard_neg_fraction: a.hard_neg_frac };
    let corpus = Corpus::synthesize(&spec, lexicon, layout)?;
    corpus.save(&a.out)?;
    println!(
        "wrote {} clips and {} trials to {}",
        corpus.audio.len(),
        corpus.trials.len(),
        a.out.display()
    );
    Ok(())
}

/// Trains and streams the log to `log_path`.
fn run_training(config: &TrainConfig, corpus: &Corpus, terms: TermSet, log_path: &Path) -> Result<TrainOutcome> {
    let mut log = File::create(log_path).map_err(|e| io_err(log_path, e))?;
    let model = Model::init(Model::default_config(), config.seed);
    let features = FeatureBank::from_corpus(corpus, model.config.n_mels)?;
    let mut write_err = None;
    let outcome = train_model(config, model, &features, &corpus.trials, terms, &mut |e| {
        let line = e.to_json();
        eprintln!("{line}");
        if let Err(err) = writeln!(log, "{line}") {
            write_err.get_or_insert(err);
        }
    })?;
    if let Some(err) = write_err {
        return Err(io_err(log_path, err));
    }
    Ok(outcome)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let config = a.train.resolve()?;
    let corpus = Corpus::load(&a.corpus)?;
    let log_path = a.log.clone().unwrap_or_else(|| a.out.with_extension("log.jsonl"));
    let outcome = run_training(&config, &corpus, TermSet::all(), &log_path)?;
    save_checkpoint(&outcome.checkpoint, &a.out)?;
    println!("parameters: {}", total_param_count(&outcome.checkpoint));
    Ok(())
}

fn write_eval_outputs(model: &Model, corpus: &Corpus, threshold: f64, out: &Path) -> Result<MetricReport> {
    create_dir(out)?;
    let features = FeatureBank::from_corpus(corpus, model.config.n_mels)?;
    let (report, scores) = evaluate(model, corpus, &features, threshold)?;
    write_json(&out.join("metrics.json"), &report)?;
    write_scores_csv(&out.join("scores.csv"), &scores)?;
    if let Ok(sweep) = far_frr_sweep(&scores) {
        let text: String = std::iter::once("threshold,far,frr\n".to_string())
            .chain(sweep.iter().map(|(t, a, r)| format!("{t},{a},{r}\n")))
            .collect();
        let p = out.join("far_frr.csv");
        std::fs::write(&p, text).map_err(|e| io_err(&p, e))?;
    }
    emit_figures(model, corpus, &features, out, 5)?;
    Ok(report)
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let model = model_from_checkpoint(&load_checkpoint(&a.ckpt)?)?;
    let corpus = Corpus::load_trials(&a.trials)?;
    let report = write_eval_outputs(&model, &corpus, a.threshold, &a.out)?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

#[derive(Serialize)]
struct AblationReport {
    dropped: Term,
    full: MetricReport,
    variant: MetricReport,
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let config = a.train.resolve()?;
    let corpus = Corpus::load(&a.corpus)?;
    let held = match &a.eval_corpus {
        Some(p) => Corpus::load(p)?,
        None => corpus.clone(),
    };
    create_dir(&a.out)?;
    let mut reports = Vec::new();
    for (name, terms) in [("full".to_string(), TermSet::all()), (format!("no_{}", a.drop), TermSet::all().without(a.drop))] {
        let dir = a.out.join(&name);
        create_dir(&dir)?;
        let outcome = run_training(&config, &corpus, terms, &dir.join("train.log.jsonl"))?;
        save_checkpoint(&outcome.checkpoint, &dir.join("model.ckpt"))?;
        reports.push(write_eval_outputs(&outcome.model, &held, a.threshold, &dir)?);
    }
    let variant = reports.pop().expect("two runs");
    let full = reports.pop().expect("two runs");
    let report = AblationReport { dropped: a.drop, full, variant };
    write_json(&a.out.join("ablation.json"), &report)?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

fn cmd_align(a: AlignArgs) -> Result<()> {
    let model = model_from_checkpoint(&load_checkpoint(&a.ckpt)?)?;
    let lexicon = load_lexicon(a.lexicon.as_deref())?;
    let ids = to_phonemes(&a.keyword, &lexicon)?;
    let frames = compute_logmel(&load_wav(&a.wav)?, model.config.n_mels)?;
    let ins = Scorer::new(&model).inspect("input", &frames.frames, &ids)?;
    let labels: Vec<String> = symbols(&ids).split(' ').map(String::from).collect();
    let (csv, svg) = emit_alignment_heatmap(&ins.joint, &labels, &a.out)?;
    println!("q_utt {:.6}", ins.output.q_utt);
    println!("wrote {} and {}", csv.display(), svg.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Align(a) => cmd_align(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.kind());
            ExitCode::FAILURE
        }
    }
}

//! The `cfg2vec` command line: corpus generation and splitting, training,
//! embedding, p@k evaluation and binary matching.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or validation error,
//! 3 numeric divergence during training.

use std::ffi::OsString;
use std::fmt::Display;
use std::path::{Path, PathBuf};

use cfg2vec::config::ExperimentConfig;
use cfg2vec::evalpred::{match_binaries, precision_at_k, EmbeddingIndex, PoolScope};
use cfg2vec::gog::{split_by_package, Corpus};
use cfg2vec::hgnn::{Checkpoint, Model};
use cfg2vec::ingest::{load_corpus_dir, prepare_corpus, read_gog_file, write_corpus_dir};
use cfg2vec::json::write_atomic;
use cfg2vec::siamese::{train, SiameseError};
use cfg2vec::synth::{generate, write_synth_dir, SynthConfig};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "cfg2vec", version, about = "Cross-architecture function embeddings for binaries")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multi-architecture corpus.
    Synth(SynthArgs),
    /// Split a corpus into package-disjoint train and test directories.
    Split(SplitArgs),
    /// Train a model and write its checkpoint and per-batch metrics.
    Train(TrainArgs),
    /// Embed every function of a corpus into an index file.
    Embed(EmbedArgs),
    /// Compute p@1..p@k of function-name prediction on a test corpus.
    Eval(EvalArgs),
    /// Match the functions of a stripped binary against a reference binary.
    Match(MatchArgs),
    /// Write the default experiment config.
    Config(ConfigArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 40, value_parser = positive)]
    pub packages: usize,
    #[arg(long, value_delimiter = ',', default_value = "amd64,armel,i386")]
    pub archs: Vec<String>,
    #[arg(long, default_value_t = 0.1, value_parser = non_negative)]
    pub distortion: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long, default_value_t = 0.8, value_parser = open_unit)]
    pub train_frac: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_train: PathBuf,
    #[arg(long)]
    pub out_test: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Experiment config; built-in defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub metrics: PathBuf,
    /// Overrides `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `train.epochs`.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Overrides `train.workers`; results are reproducible only with 1.
    #[arg(long, value_parser = positive)]
    pub workers: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long, default_value_t = 5, value_parser = positive)]
    pub kmax: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Extra corpus whose functions join the candidate pool.
    #[arg(long)]
    pub reference: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MatchArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub stripped: PathBuf,
    #[arg(long)]
    pub reference: PathBuf,
    #[arg(long, default_value_t = 0.9, value_parser = similarity)]
    pub t_match: f64,
    #[arg(long, default_value_t = 0.5, value_parser = similarity)]
    pub t_orphan: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Printed to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn positive(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("must be at least 1".into()),
        Ok(v) => Ok(v),
        Err(e) => Err(e.to_string()),
    }
}

fn parse_f64(s: &str, ok: impl Fn(f64) -> bool, what: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if ok(v) {
        Ok(v)
    } else {
        Err(format!("must be {what}"))
    }
}

fn non_negative(s: &str) -> Result<f64, String> {
    parse_f64(s, |v| v.is_finite() && v >= 0.0, "finite and >= 0")
}

fn open_unit(s: &str) -> Result<f64, String> {
    parse_f64(s, |v| v > 0.0 && v < 1.0, "strictly between 0 and 1")
}

fn similarity(s: &str) -> Result<f64, String> {
    parse_f64(s, |v| (-1.0..=1.0).contains(&v), "within [-1, 1]")
}

/// A failed command, mapped onto an exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(String),
    Diverged(String),
}

impl Failure {
    pub fn code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Diverged(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Diverged(m) => m,
        }
    }
}

fn data(flag: &str, path: &Path, e: impl Display) -> Failure {
    Failure::Data(format!("{flag} {}: {e}", path.display()))
}

/// Parses `argv` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {}", f.message());
            f.code()
        }
    }
}

pub fn execute(command: Command) -> Result<(), Failure> {
    match command {
        Command::Synth(a) => synth(a),
        Command::Split(a) => split(a),
        Command::Train(a) => train_cmd(a),
        Command::Embed(a) => embed(a),
        Command::Eval(a) => eval(a),
        Command::Match(a) => match_cmd(a),
        Command::Config(a) => config(a),
    }
}

fn ensure_empty_dir(flag: &str, dir: &Path) -> Result<(), Failure> {
    let occupied = std::fs::read_dir(dir).is_ok_and(|mut entries| entries.next().is_some());
    if occupied {
        return Err(Failure::Usage(format!("{flag} {}: directory is not empty", dir.display())));
    }
    Ok(())
}

fn load_corpus(flag: &str, dir: &Path) -> Result<Corpus, Failure> {
    let corpus = load_corpus_dir(dir).map_err(|e| data(flag, dir, e))?;
    let problems = corpus.validate();
    if let Some(first) = problems.first() {
        return Err(data(flag, dir, format!("{} invalid binaries, first: {first}", problems.len())));
    }
    Ok(corpus)
}

fn load_prepared(flag: &str, dir: &Path) -> Result<Corpus, Failure> {
    let corpus = load_corpus(flag, dir)?;
    let (prepared, _) = prepare_corpus(&corpus).map_err(|e| data(flag, dir, e))?;
    Ok(prepared)
}

fn load_model(path: &Path) -> Result<Model, Failure> {
    let ckpt = Checkpoint::load(path).map_err(|e| data("--ckpt", path, e))?;
    Model::from_checkpoint(&ckpt).map_err(|e| data("--ckpt", path, e))
}

fn write_file(flag: &str, path: &Path, text: &str) -> Result<(), Failure> {
    write_atomic(path, text.as_bytes()).map_err(|e| data(flag, path, e))
}

fn synth(a: SynthArgs) -> Result<(), Failure> {
    let cfg = SynthConfig {
        n_packages: a.packages,
        archs: a.archs,
        arch_distortion: a.distortion,
        seed: a.seed,
        ..SynthConfig::default()
    };
    cfg.validate()
        .map_err(|e| Failure::Usage(format!("--packages/--archs/--distortion: {e}")))?;
    ensure_empty_dir("--out", &a.out)?;
    let corpus = generate(&cfg).map_err(|e| data("--out", &a.out, e))?;
    let manifest = write_synth_dir(&corpus, &cfg, &a.out).map_err(|e| data("--out", &a.out, e))?;
    println!("wrote {} binaries to {}", manifest.files.len(), a.out.display());
    Ok(())
}

fn split(a: SplitArgs) -> Result<(), Failure> {
    if a.out_train == a.out_test {
        return Err(Failure::Usage("--out-train and --out-test must differ".into()));
    }
    ensure_empty_dir("--out-train", &a.out_train)?;
    ensure_empty_dir("--out-test", &a.out_test)?;
    let corpus = load_corpus("--in", &a.input)?;
    let (train, test) = split_by_package(&corpus, a.train_frac, a.seed).map_err(|e| data("--in", &a.input, e))?;
    if train.is_empty() || test.is_empty() {
        return Err(data(
            "--in",
            &a.input,
            format!("train fraction {} leaves one side empty", a.train_frac),
        ));
    }
    write_corpus_dir(&train, &a.out_train).map_err(|e| data("--out-train", &a.out_train, e))?;
    write_corpus_dir(&test, &a.out_test).map_err(|e| data("--out-test", &a.out_test, e))?;
    println!(
        "train: {} binaries from {} packages; test: {} binaries from {} packages",
        train.len(),
        train.packages().len(),
        test.len(),
        test.packages().len()
    );
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<(), Failure> {
    let mut exp = match &a.config {
        Some(p) => ExperimentConfig::load(p).map_err(|e| Failure::Data(format!("--config {e}")))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = a.seed {
        exp.train.seed = seed;
    }
    if let Some(epochs) = a.epochs {
        exp.train.epochs = epochs;
    }
    if let Some(workers) = a.workers {
        exp.train.workers = workers;
    }
    exp.train
        .validate()
        .map_err(|e| Failure::Usage(format!("--seed/--epochs/--workers: {e}")))?;
    let corpus = load_prepared("--data", &a.data)?;
    match train(&corpus, exp.model, &exp.train) {
        Ok((model, report)) => {
            write_file("--metrics", &a.metrics, &report.to_csv())?;
            model.to_checkpoint().save(&a.out).map_err(|e| data("--out", &a.out, e))?;
            if let (Some(first), Some(last)) = (report.epoch_means.first(), report.epoch_means.last()) {
                println!("epoch mean loss: first {first:.6}, last {last:.6}");
            }
            println!("wrote {}", a.out.display());
            Ok(())
        }
        Err(SiameseError::Diverged {
            epoch,
            batch,
            loss,
            last_good,
            report,
        }) => {
            write_file("--metrics", &a.metrics, &report.to_csv())?;
            last_good.to_checkpoint().save(&a.out).map_err(|e| data("--out", &a.out, e))?;
            Err(Failure::Diverged(format!(
                "--data {}: training diverged at epoch {epoch}, batch {batch} (loss {loss}); last good weights written to {}",
                a.data.display(),
                a.out.display()
            )))
        }
        Err(e @ SiameseError::Config(_)) => Err(Failure::Usage(format!("--config: {e}"))),
        Err(e) => Err(data("--data", &a.data, e)),
    }
}

fn embed(a: EmbedArgs) -> Result<(), Failure> {
    let model = load_model(&a.ckpt)?;
    let corpus = load_prepared("--data", &a.data)?;
    let index = EmbeddingIndex::build(&model, &corpus).map_err(|e| data("--data", &a.data, e))?;
    let text = index.to_json().map_err(|e| data("--out", &a.out, e))?;
    write_file("--out", &a.out, &text)?;
    println!("embedded {} functions into {}", index.len(), a.out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<(), Failure> {
    let model = load_model(&a.ckpt)?;
    let test = load_prepared("--test", &a.test)?;
    let test_index = EmbeddingIndex::build(&model, &test).map_err(|e| data("--test", &a.test, e))?;
    let reference = match &a.reference {
        Some(dir) => {
            let corpus = load_prepared("--reference", dir)?;
            Some(EmbeddingIndex::build(&model, &corpus).map_err(|e| data("--reference", dir, e))?)
        }
        None => None,
    };
    let table = precision_at_k(&test_index, reference.as_ref(), a.kmax, PoolScope::OtherBinaries)
        .map_err(|e| data("--test", &a.test, e))?;
    write_file("--out", &a.out, &table.to_csv())?;
    for (k, p) in table.precision.iter().enumerate() {
        println!("p@{} = {p:.4}", k + 1);
    }
    println!("queries = {}, random baseline = {:.4}", table.n_queries, table.random_baseline);
    Ok(())
}

fn match_cmd(a: MatchArgs) -> Result<(), Failure> {
    if a.t_orphan > a.t_match {
        return Err(Failure::Usage(format!(
            "--t-orphan {} must not exceed --t-match {}",
            a.t_orphan, a.t_match
        )));
    }
    let model = load_model(&a.ckpt)?;
    let stripped = read_gog_file(&a.stripped).map_err(|e| data("--stripped", &a.stripped, e))?;
    let reference = read_gog_file(&a.reference).map_err(|e| data("--reference", &a.reference, e))?;
    let report = match_binaries(&stripped, &reference, &model, a.t_match, a.t_orphan)
        .map_err(|e| data("--reference", &a.reference, e))?;
    let text = report.to_json().map_err(|e| data("--out", &a.out, e))?;
    write_file("--out", &a.out, &text)?;
    print!("{}", report.to_table());
    Ok(())
}

fn config(a: ConfigArgs) -> Result<(), Failure> {
    let text = ExperimentConfig::default().to_toml();
    match &a.out {
        Some(p) => write_file("--out", p, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

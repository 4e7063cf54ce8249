//! Command-line front end: argument parsing, corpus assembly and the seven
//! subcommands.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde::Serialize;

use crate::config::RunConfig;
use crate::data::{
    corpus_vocabulary, dev_split, load_adjacency, load_aspect_corpus, load_document_corpus, load_embeddings,
    DoubleEmbeddings, Document, EmbeddingTable, Sentence, TagSchemes, VocabPolicy,
};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, read_predictions, write_predictions, EvalReport, SentencePrediction};
use crate::model::{init_params, Ablation, Model, ModelConfig};
use crate::routing::{agreement_trace, Direction, TraceRecord};
use crate::synth;
use crate::training::{evaluate_model, gradcheck, train, GradcheckOptions, GradcheckReport, TrainData};

/// `println!` that tolerates a closed stdout, e.g. when piped into `head`.
macro_rules! out {
    ($($t:tt)*) => {{
        use std::io::Write;
        let _ = writeln!(std::io::stdout().lock(), $($t)*);
    }};
}

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TEST_REPORT_FILE: &str = "test_report.json";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, Parser)]
#[command(name = "iktn", version, about = "Iterative knowledge transfer network for aspect-based sentiment analysis")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one or more models from a config file.
    Train(RunArgs),
    /// Score a checkpoint (or a prediction file) against a labelled corpus.
    Eval(EvalArgs),
    /// Write span predictions as JSON lines.
    Predict(PredictArgs),
    /// Train with one knowledge path removed (or document signals merged).
    Ablate(AblateArgs),
    /// Export routing coupling matrices for each input sentence.
    Trace(TraceArgs),
    /// Compare analytic and finite-difference gradients of every parameter.
    Gradcheck(GradcheckArgs),
    /// Write the synthetic corpus and a matching config.
    GenSynth(GenSynthArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Override a config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub runs: Option<usize>,
    #[arg(long)]
    pub ablate: Option<String>,
    #[arg(long, env = "IKTN_OUTPUT_DIR")]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// One of aspect-transfer, opinion-transfer, sentiment-transfer,
    /// ddc-transfer, dsc-transfer, coarse.
    pub flag: String,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct InputArgs {
    /// Sentence file: corpus TSV, or one whitespace-tokenised sentence per
    /// line with `--text`.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub adjacency: Option<PathBuf>,
    #[arg(long)]
    pub text: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, required_unless_present = "predictions")]
    pub checkpoint: Option<PathBuf>,
    /// Labelled corpus (TSV).
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub adjacency: Option<PathBuf>,
    /// Score this prediction file instead of running a checkpoint.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// Also write the report here.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub input: InputArgs,
    /// Prediction file; stdout when absent.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TraceArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub input: InputArgs,
    /// Transfer direction such as `ote->asc`.
    #[arg(long)]
    pub direction: String,
    /// One `trace-NNNN.json` per sentence here; stdout when absent.
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Corruption {
    Squash,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Model settings; the reduced-width defaults apply when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub corrupt: Option<Corruption>,
    #[arg(long, default_value_t = 1e-3)]
    pub step: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub threshold: f64,
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenSynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub train: usize,
    #[arg(long, default_value_t = 50)]
    pub test: usize,
    #[arg(long, default_value_t = 40)]
    pub docs: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

/// 2 for configuration and usage errors, 3 for data and compatibility
/// errors, 4 for numerical failures.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Format { .. }
        | Error::Validation { .. }
        | Error::Schema(_)
        | Error::Checkpoint(_)
        | Error::Io { .. }
        | Error::Json(_) => 3,
        Error::Numerical(_) => 4,
        Error::Shape { .. } | Error::Contract(_) | Error::Index { .. } => 1,
    }
}

/// Runs a parsed command line and maps the outcome to an exit code.
pub fn run(cli: Cli) -> ExitCode {
    let result = match cli.command {
        Command::Train(a) => cmd_train(&a, None),
        Command::Ablate(a) => Ablation::parse(&a.flag).and_then(|f| cmd_train(&a.run, Some(f))),
        Command::Eval(a) => cmd_eval(&a),
        Command::Predict(a) => cmd_predict(&a),
        Command::Trace(a) => cmd_trace(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
        Command::GenSynth(a) => synth::write_corpus(&a.out, a.train, a.test, a.docs, a.seed).map(|()| {
            out!("wrote synthetic corpus to {}", a.out.display());
            ExitCode::SUCCESS
        }),
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e}");
        ExitCode::from(exit_code(&e))
    })
}

/// Loads the config with command-line overrides folded in.
pub fn load_run_config(a: &RunArgs, ablation: Option<Ablation>) -> Result<RunConfig> {
    let mut set = a.set.clone();
    if let Some(s) = a.seed {
        set.push(format!("seed={s}"));
    }
    if let Some(r) = a.runs {
        set.push(format!("runs={r}"));
    }
    if let Some(name) = a.ablate.as_deref().or(ablation.map(Ablation::name)) {
        set.push(format!("ablate=\"{name}\""));
    }
    let mut cfg = RunConfig::load(&a.config, &set)?;
    if let Some(dir) = &a.output_dir {
        cfg.output_dir = absolute(dir)?;
    } else if let Some(ab) = ablation {
        cfg.output_dir = cfg.output_dir.join(ab.name());
    }
    Ok(cfg)
}

fn absolute(p: &Path) -> Result<PathBuf> {
    if p.is_absolute() {
        Ok(p.to_path_buf())
    } else {
        Ok(std::env::current_dir().map_err(|e| Error::io(".", e))?.join(p))
    }
}

/// Corpora named by a run config, with embedding ids not yet assigned.
pub struct Corpora {
    pub train: Vec<Sentence>,
    pub dev: Option<Vec<Sentence>>,
    pub test: Option<Vec<Sentence>>,
    pub documents: Vec<Document>,
}

fn load_sentences(path: &Path, adjacency: Option<&Path>, schemes: &TagSchemes) -> Result<Vec<Sentence>> {
    let mut s = load_aspect_corpus(path, schemes)?;
    if let Some(a) = adjacency {
        load_adjacency(a, &mut s)?;
    }
    Ok(s)
}

pub fn load_corpora(cfg: &RunConfig, schemes: &TagSchemes) -> Result<Corpora> {
    cfg.check_inputs()?;
    let train_path = cfg
        .train_corpus
        .as_deref()
        .ok_or_else(|| Error::Config("train_corpus: required but not set".into()))?;
    let train = load_sentences(train_path, cfg.train_adjacency.as_deref(), schemes)?;
    let dev = match &cfg.dev_corpus {
        Some(p) => Some(load_sentences(p, cfg.dev_adjacency.as_deref(), schemes)?),
        None => None,
    };
    let test = match &cfg.test_corpus {
        Some(p) => Some(load_sentences(p, cfg.test_adjacency.as_deref(), schemes)?),
        None => None,
    };
    let documents = match &cfg.documents {
        Some(p) => load_document_corpus(p, schemes)?,
        None => Vec::new(),
    };
    info!(
        "loaded {} train, {} dev, {} test sentences and {} documents",
        train.len(),
        dev.as_ref().map_or(0, Vec::len),
        test.as_ref().map_or(0, Vec::len),
        documents.len()
    );
    Ok(Corpora {
        train,
        dev,
        test,
        documents,
    })
}

fn embedding_table(path: Option<&Path>, key: &str, words: &[String], dim: usize, seed: u64) -> Result<EmbeddingTable> {
    let Some(path) = path else {
        return EmbeddingTable::random(words.to_vec(), dim, seed);
    };
    let policy = VocabPolicy::Restrict(words.iter().cloned().collect());
    let table = load_embeddings(path, &policy)?;
    if table.dim() != dim {
        return Err(Error::Config(format!(
            "{key}: file has dimension {} but the config asks for {dim}",
            table.dim()
        )));
    }
    for (w, line) in &table.duplicates {
        warn!("{}:{line}: duplicate word `{w}` ignored", path.display());
    }
    Ok(table)
}

/// General and domain tables covering every corpus token; random rows
/// when no file is configured.
pub fn build_embeddings(cfg: &RunConfig, c: &Corpora) -> Result<DoubleEmbeddings> {
    let sentences = c.train.iter().chain(c.dev.iter().flatten()).chain(c.test.iter().flatten());
    let words = corpus_vocabulary(sentences, c.documents.iter());
    Ok(DoubleEmbeddings {
        general: embedding_table(cfg.general_embeddings.as_deref(), "general_embeddings", &words, cfg.d_general, cfg.seed)?,
        domain: embedding_table(
            cfg.domain_embeddings.as_deref(),
            "domain_embeddings",
            &words,
            cfg.d_domain,
            cfg.seed.wrapping_add(1),
        )?,
    })
}

/// Outcome of one training run.
#[derive(Clone, Debug, Serialize)]
pub struct RunResult {
    pub seed: u64,
    pub dir: PathBuf,
    pub epochs_run: usize,
    pub best_epoch: Option<usize>,
    /// First epoch at which train token accuracy met the target.
    pub reached_target: Option<usize>,
    pub final_train_accuracy: Option<[f64; 3]>,
    pub dev: Option<EvalReport>,
    pub test: Option<EvalReport>,
}

/// Mean and population standard deviation of each metric across runs.
#[derive(Clone, Debug, Serialize)]
pub struct Summary {
    pub split: String,
    pub runs: Vec<RunResult>,
    pub mean: Vec<(String, f64)>,
    pub std: Vec<(String, f64)>,
}

fn mean_std(reports: &[&EvalReport]) -> (Vec<(String, f64)>, Vec<(String, f64)>) {
    let k = reports.len() as f64;
    let mut mean = Vec::new();
    let mut std = Vec::new();
    for c in 0..5 {
        let name = reports[0].columns()[c].0.to_string();
        let xs: Vec<f64> = reports.iter().map(|r| r.columns()[c].1).collect();
        let m = xs.iter().sum::<f64>() / k;
        let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / k;
        mean.push((name.clone(), m));
        std.push((name, v.sqrt()));
    }
    (mean, std)
}

impl Summary {
    pub fn table(&self) -> String {
        let head: Vec<String> = self.mean.iter().map(|(n, _)| format!("{n:>16}")).collect();
        let vals: Vec<String> = self
            .mean
            .iter()
            .zip(&self.std)
            .map(|((_, m), (_, s))| format!("{:>16}", format!("{:.2}±{:.2}", m * 100.0, s * 100.0)))
            .collect();
        format!("{}\n{}", head.join(""), vals.join(""))
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// One training run into `dir`: checkpoint, metrics log and test report.
pub fn train_run(cfg: &RunConfig, corpora: &Corpora, seed: u64, dir: &Path) -> Result<RunResult> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let schemes = TagSchemes::default();
    let mut model_cfg = cfg.model_config()?;
    model_cfg.seed = seed;
    let embeddings = build_embeddings(cfg, corpora)?;
    let model = Model::new(model_cfg, schemes, embeddings)?;
    let (train_set, dev_set) = match (&corpora.dev, cfg.dev_fraction > 0.0 && corpora.train.len() >= 2) {
        (Some(d), _) => (corpora.train.clone(), d.clone()),
        (None, true) => dev_split(&corpora.train, cfg.dev_fraction, seed),
        (None, false) => (corpora.train.clone(), Vec::new()),
    };
    let log_path = dir.join(METRICS_FILE);
    let mut log_text = String::new();
    let outcome = train(
        model,
        TrainData {
            train: &train_set,
            dev: &dev_set,
            documents: &corpora.documents,
        },
        &cfg.schedule(),
        |rec| {
            log_text.push_str(&serde_json::to_string(rec)?);
            log_text.push('\n');
            fs::write(&log_path, &log_text).map_err(|e| Error::io(&log_path, e))?;
            info!(
                "seed {seed} {:?} epoch {}: J_a {} J_d {}{}",
                rec.phase,
                rec.epoch,
                rec.j_a.map_or("-".into(), |v| format!("{v:.4}")),
                rec.j_d.map_or("-".into(), |v| format!("{v:.4}")),
                rec.dev.as_ref().map_or(String::new(), |r| format!(" dev F1-I {:.4}", r.f1_i)),
            );
            Ok(())
        },
    )?;
    outcome.model.save(&dir.join(CHECKPOINT_FILE))?;
    let test = match &corpora.test {
        Some(t) => {
            let r = evaluate_model(&outcome.model, t)?;
            write_json(&dir.join(TEST_REPORT_FILE), &r)?;
            Some(r)
        }
        None => None,
    };
    let joint: Vec<_> = outcome.log.iter().filter(|l| l.phase == crate::training::Phase::Joint).collect();
    let dev = outcome
        .best_epoch
        .and_then(|e| joint.iter().find(|l| l.epoch == e))
        .and_then(|l| l.dev.clone());
    Ok(RunResult {
        seed,
        dir: dir.to_path_buf(),
        epochs_run: joint.len(),
        best_epoch: outcome.best_epoch,
        reached_target: outcome.reached_target,
        final_train_accuracy: joint.last().and_then(|l| l.train_accuracy),
        dev,
        test,
    })
}

/// `runs` independent seeds (`seed`, `seed+1`, ...), trained in parallel.
pub fn train_all(cfg: &RunConfig) -> Result<Summary> {
    let corpora = load_corpora(cfg, &TagSchemes::default())?;
    cfg.echo(&cfg.output_dir)?;
    let dirs: Vec<(u64, PathBuf)> = (0..cfg.runs)
        .map(|r| {
            let dir = if cfg.runs == 1 { cfg.output_dir.clone() } else { cfg.output_dir.join(format!("run-{r}")) };
            (cfg.seed.wrapping_add(r as u64), dir)
        })
        .collect();
    let results: Vec<Result<RunResult>> = std::thread::scope(|s| {
        let handles: Vec<_> = dirs
            .iter()
            .map(|(seed, dir)| {
                let corpora = &corpora;
                s.spawn(move || train_run(cfg, corpora, *seed, dir))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("training thread panicked")).collect()
    });
    let runs = results.into_iter().collect::<Result<Vec<_>>>()?;
    let (split, reports): (&str, Vec<&EvalReport>) = if runs.iter().all(|r| r.test.is_some()) {
        ("test", runs.iter().filter_map(|r| r.test.as_ref()).collect())
    } else {
        ("dev", runs.iter().filter_map(|r| r.dev.as_ref()).collect())
    };
    let (mean, std) = if reports.len() == runs.len() { mean_std(&reports) } else { (Vec::new(), Vec::new()) };
    let summary = Summary {
        split: split.to_string(),
        runs,
        mean,
        std,
    };
    write_json(&cfg.output_dir.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}

fn cmd_train(a: &RunArgs, ablation: Option<Ablation>) -> Result<ExitCode> {
    let cfg = load_run_config(a, ablation)?;
    if let Some(ab) = cfg.ablation()? {
        let schemes = TagSchemes::default();
        let mut full = cfg.clone();
        full.ablate.clear();
        let d = manifest_diff(&full.model_config()?, &cfg.model_config()?, &schemes);
        out!("ablation {ab}: removed {:?}, added {:?}", d.removed, d.added);
        for (name, from, to) in &d.resized {
            out!("  {name}: {from:?} -> {to:?}");
        }
    }
    let summary = train_all(&cfg)?;
    for r in &summary.runs {
        out!(
            "seed {}: {} epochs, best epoch {:?}, checkpoint {}",
            r.seed,
            r.epochs_run,
            r.best_epoch,
            r.dir.join(CHECKPOINT_FILE).display()
        );
    }
    if !summary.mean.is_empty() {
        out!("{} ({} run(s))\n{}", summary.split, summary.runs.len(), summary.table());
    }
    Ok(ExitCode::SUCCESS)
}

/// Tensor-level difference between the manifests of two configurations.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ManifestDiff {
    pub removed: Vec<String>,
    pub added: Vec<String>,
    /// `(name, shape in a, shape in b)`.
    pub resized: Vec<(String, Vec<usize>, Vec<usize>)>,
}

impl ManifestDiff {
    /// Parameter count of `b` minus that of `a`.
    pub fn param_delta(&self, a: &ModelConfig, b: &ModelConfig, schemes: &TagSchemes) -> i64 {
        let count = |c: &ModelConfig| -> i64 {
            config_manifest(c, schemes).iter().map(|(_, s)| s.iter().product::<usize>() as i64).sum()
        };
        count(b) - count(a)
    }
}

/// `(name, shape)` of every tensor a configuration implies, in name order.
pub fn config_manifest(c: &ModelConfig, schemes: &TagSchemes) -> Vec<(String, Vec<usize>)> {
    let p = init_params::<f32>(c, &c.layer_dims(schemes));
    p.iter().map(|(k, t)| (k.to_string(), t.shape().to_vec())).collect()
}

pub fn manifest_diff(a: &ModelConfig, b: &ModelConfig, schemes: &TagSchemes) -> ManifestDiff {
    let ma: std::collections::BTreeMap<String, Vec<usize>> = config_manifest(a, schemes).into_iter().collect();
    let mb: std::collections::BTreeMap<String, Vec<usize>> = config_manifest(b, schemes).into_iter().collect();
    let mut d = ManifestDiff::default();
    for (k, sa) in &ma {
        match mb.get(k) {
            None => d.removed.push(k.clone()),
            Some(sb) if sb != sa => d.resized.push((k.clone(), sa.clone(), sb.clone())),
            Some(_) => {}
        }
    }
    d.added = mb.keys().filter(|k| !ma.contains_key(*k)).cloned().collect();
    d
}

fn read_inputs(a: &InputArgs, schemes: &TagSchemes) -> Result<Vec<Sentence>> {
    let mut sentences = if a.text {
        let text = fs::read_to_string(&a.input).map_err(|e| Error::io(&a.input, e))?;
        text.lines()
            .map(str::split_whitespace)
            .map(|w| w.map(str::to_string).collect::<Vec<_>>())
            .filter(|t| !t.is_empty())
            .map(Sentence::unlabeled)
            .collect()
    } else {
        load_aspect_corpus(&a.input, schemes)?
    };
    if let Some(adj) = &a.adjacency {
        load_adjacency(adj, &mut sentences)?;
    }
    Ok(sentences)
}

fn cmd_eval(a: &EvalArgs) -> Result<ExitCode> {
    let (schemes, model) = match &a.checkpoint {
        Some(c) => {
            let m = Model::load(c)?;
            (m.schemes.clone(), Some(m))
        }
        None => (TagSchemes::default(), None),
    };
    let gold_sentences = load_sentences(&a.corpus, a.adjacency.as_deref(), &schemes)?;
    if gold_sentences.is_empty() {
        warn!("{} holds no sentences; every metric is reported as zero", a.corpus.display());
    }
    let gold: Vec<SentencePrediction> = gold_sentences.iter().map(|s| SentencePrediction::from_gold(s, &schemes)).collect();
    let pred = match (&a.predictions, &model) {
        (Some(p), _) => read_predictions(p)?,
        (None, Some(m)) => gold_sentences.iter().map(|s| m.predict(s)).collect::<Result<_>>()?,
        (None, None) => unreachable!("clap requires a checkpoint or a prediction file"),
    };
    if pred.len() != gold.len() {
        return Err(Error::Schema(format!(
            "{} predictions for {} gold sentences",
            pred.len(),
            gold.len()
        )));
    }
    let report = evaluate(&pred, &gold, &schemes.asc)?;
    out!("{}", report.table());
    out!("{}", serde_json::to_string(&report)?);
    if let Some(p) = &a.json {
        write_json(p, &report)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_predict(a: &PredictArgs) -> Result<ExitCode> {
    let model = Model::load(&a.checkpoint)?;
    let sentences = read_inputs(&a.input, &model.schemes)?;
    let preds: Vec<SentencePrediction> = sentences.iter().map(|s| model.predict(s)).collect::<Result<_>>()?;
    match &a.output {
        Some(p) => write_predictions(p, &preds)?,
        None => {
            for p in &preds {
                out!("{}", serde_json::to_string(p)?);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

/// Coupling matrices of `dir` for every transfer step on one sentence.
pub fn trace_sentence(model: &Model, s: &Sentence, dir: Direction) -> Result<Vec<TraceRecord>> {
    if !model.config.is_enabled(dir) {
        return Err(Error::Config(format!("direction {dir} is disabled in this checkpoint")));
    }
    let inf = model.infer(s, true)?;
    let mut out = Vec::new();
    for state in &inf.states[1..] {
        for r in state.routes.iter().filter(|r| r.direction == dir) {
            out.extend(agreement_trace(&r.snapshots, dir, state.t, &s.tokens)?);
        }
    }
    Ok(out)
}

fn cmd_trace(a: &TraceArgs) -> Result<ExitCode> {
    let dir = Direction::parse(&a.direction)?;
    let model = Model::load(&a.checkpoint)?;
    let sentences = read_inputs(&a.input, &model.schemes)?;
    if let Some(out) = &a.output_dir {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    }
    for (k, s) in sentences.iter().enumerate() {
        let records = trace_sentence(&model, s, dir)?;
        match &a.output_dir {
            Some(out) => write_json(&out.join(format!("trace-{k:04}.json")), &records)?,
            None => out!("{}", serde_json::to_string(&records)?),
        }
    }
    Ok(ExitCode::SUCCESS)
}

/// Reduced widths used by `gradcheck` unless a config is given.
pub const GRADCHECK_DEFAULTS: &str = "T = 2\niter = 2\nd_general = 6\nd_domain = 4\nd_enc = 8\nd_task = 8\nd_route = 8\n";

/// Gradient check of the model a config describes on the built-in
/// four-token sentence and one-sentence document.
pub fn run_gradcheck(cfg: &RunConfig, options: &GradcheckOptions) -> Result<GradcheckReport> {
    let (sentence, document) = synth::gradcheck_sample();
    let words = corpus_vocabulary([&sentence], [&document]);
    let embeddings = DoubleEmbeddings {
        general: EmbeddingTable::random(words.clone(), cfg.d_general, cfg.seed)?,
        domain: EmbeddingTable::random(words, cfg.d_domain, cfg.seed.wrapping_add(1))?,
    };
    let model = Model::new(cfg.model_config()?, TagSchemes::default(), embeddings)?;
    gradcheck(&model, &sentence, Some(&document), options)
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<ExitCode> {
    let cfg = match &a.config {
        Some(p) => RunConfig::load(p, &a.set)?,
        None => RunConfig::from_text(GRADCHECK_DEFAULTS, "gradcheck defaults", &a.set, Path::new(""))?,
    };
    let options = GradcheckOptions {
        step: a.step,
        threshold: a.threshold,
        corrupt_squash: a.corrupt == Some(Corruption::Squash),
    };
    let report = run_gradcheck(&cfg, &options)?;
    let width = report.params.iter().map(|p| p.name.len()).max().unwrap_or(0);
    for p in &report.params {
        out!(
            "{:width$}  {:>6}  rel {:.3e}  abs {:.3e}  {}",
            p.name,
            p.numel,
            p.max_rel_err,
            p.max_abs_err,
            if p.passed { "ok" } else { "FAIL" }
        );
    }
    out!(
        "{} of {} parameter tensors pass at step {:e}, threshold {:e} ({:.1} s)",
        report.params.iter().filter(|p| p.passed).count(),
        report.params.len(),
        report.step,
        report.threshold,
        report.seconds
    );
    if let Some(p) = &a.json {
        write_json(p, &report)?;
    }
    if report.passed {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("failing: {}", report.failing().join(", "));
        Ok(ExitCode::from(4))
    }
}

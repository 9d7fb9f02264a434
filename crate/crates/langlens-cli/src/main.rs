//! Command-line entry point wiring corpus generation, training, neuron
//! detection, deactivation experiments, probing, partition tuning,
//! selective fine-tuning, and benchmarking into reproducible runs.
//!
//! Every command validates its inputs before computing, writes outputs
//! atomically, and embeds (or references) a run manifest so an identical
//! invocation reproduces byte-identical primary outputs. On failure a
//! machine-readable error record is printed to stderr and the exit code
//! is nonzero.

mod manifest;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use langlens::atlas::{self, NeuronSet, ThresholdPolicy};
use langlens::corpus::{self, CorpusConfig};
use langlens::importance;
use langlens::lab::{self, DeactivationConfig, EvalReport, NeuronSource};
use langlens::model::{self, MatrixKind, ModelConfig, TransformerWeights};
use langlens::seeds::rng_for;
use langlens::tuner::{self, TrainConfig};

use manifest::{write_csv_with_manifest, write_json_with_manifest, RunManifest};

#[derive(Parser)]
#[command(
    name = "langlens",
    version,
    about = "Language-specific neuron experiments on a toy transformer"
)]
struct Cli {
    /// Bound worker threads for document-parallel stages. Results are
    /// identical for any value; this only changes wall time.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multilingual corpus directory.
    MakeCorpus(MakeCorpusArgs),
    /// Pre-train a toy transformer on a corpus.
    Train(TrainArgs),
    /// Compute an importance map for one document or a corpus average.
    Importance(ImportanceArgs),
    /// Detect a language's specific neurons.
    Detect(DetectArgs),
    /// Pairwise overlap matrix of neuron sets.
    Overlap(OverlapArgs),
    /// Deactivate configured neurons and evaluate per-language perplexity.
    DeactivateEval(DeactivateEvalArgs),
    /// Per-layer language-ratio probe of the residual stream.
    Probe(ProbeArgs),
    /// Grid-search the layer partition sizes.
    TunePartition(TunePartitionArgs),
    /// Fine-tune only a neuron set's parameters.
    Finetune(FinetuneArgs),
    /// Time the batched FFN importance against the sequential oracle.
    Bench(BenchArgs),
    /// Merge evaluation reports into one flat CSV.
    Report(ReportArgs),
}

fn main() {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        // Ignore failure: the global pool can only be set once.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
    if let Err(err) = run(cli.command) {
        let record = serde_json::json!({ "error": format!("{err:#}") });
        eprintln!("{record}");
        std::process::exit(1);
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::MakeCorpus(args) => cmd_make_corpus(args),
        Command::Train(args) => cmd_train(args),
        Command::Importance(args) => cmd_importance(args),
        Command::Detect(args) => cmd_detect(args),
        Command::Overlap(args) => cmd_overlap(args),
        Command::DeactivateEval(args) => cmd_deactivate_eval(args),
        Command::Probe(args) => cmd_probe(args),
        Command::TunePartition(args) => cmd_tune_partition(args),
        Command::Finetune(args) => cmd_finetune(args),
        Command::Bench(args) => cmd_bench(args),
        Command::Report(args) => cmd_report(args),
    }
}

fn parse_list<T: FromStr>(text: &str, what: &str) -> Result<Vec<T>> {
    text.split(',')
        .map(|part| {
            part.trim()
                .parse::<T>()
                .map_err(|_| anyhow::anyhow!("invalid {what} entry `{part}`"))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// make-corpus

#[derive(Args, Serialize)]
struct MakeCorpusArgs {
    /// Output directory for the corpus files and manifest.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 256)]
    vocab_size: u32,
    /// Comma-separated language labels; ranges are split evenly.
    #[arg(long, default_value = "A,B")]
    langs: String,
    /// Width of the shared "punctuation" range at the bottom of the
    /// vocabulary.
    #[arg(long, default_value_t = 8)]
    shared_width: u32,
    /// Per-position probability of emitting a shared token.
    #[arg(long, default_value_t = 0.05)]
    shared_frac: f64,
    /// Comma-separated document counts, aligned with --langs.
    #[arg(long, default_value = "320,80")]
    docs: String,
    #[arg(long, default_value_t = 32)]
    doc_len: usize,
    #[arg(long, default_value_t = 0.8)]
    train_frac: f64,
    #[arg(long)]
    seed: u64,
}

fn cmd_make_corpus(args: MakeCorpusArgs) -> Result<()> {
    let labels: Vec<String> = parse_list(&args.langs, "language label")?;
    let counts_list: Vec<usize> = parse_list(&args.docs, "document count")?;
    if labels.len() != counts_list.len() {
        bail!(
            "--docs lists {} counts for {} languages",
            counts_list.len(),
            labels.len()
        );
    }
    let label_refs: Vec<&str> = labels.iter().map(String::as_str).collect();
    let config = CorpusConfig::evenly_split(
        args.vocab_size,
        &label_refs,
        args.shared_width,
        args.shared_frac,
        args.seed,
    )?;
    let counts: BTreeMap<String, usize> = labels.iter().cloned().zip(counts_list).collect();

    let run = RunManifest::new("make-corpus", Some(args.seed), &args, &[])?;
    let manifest_path = corpus::write_corpus_dir(
        &args.out,
        &config,
        &counts,
        args.doc_len,
        args.train_frac,
        args.seed,
    )?;
    // Merge the run manifest into the corpus manifest file.
    let mut value: serde_json::Value = serde_json::from_slice(&std::fs::read(&manifest_path)?)?;
    value
        .as_object_mut()
        .context("corpus manifest is a JSON object")?
        .insert("manifest".to_string(), serde_json::to_value(&run)?);
    let mut bytes = serde_json::to_vec_pretty(&value)?;
    bytes.push(b'\n');
    langlens::fsio::write_atomic(&manifest_path, &bytes)?;

    println!("wrote {}", manifest_path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// train / finetune

#[derive(Args, Serialize)]
struct TrainArgs {
    /// Corpus manifest (corpus.json).
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value = "train")]
    split: String,
    /// Output checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Training log CSV (step, loss).
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    layers: usize,
    #[arg(long, default_value_t = 64)]
    d_model: usize,
    #[arg(long, default_value_t = 4)]
    n_heads: usize,
    #[arg(long, default_value_t = 16)]
    d_head: usize,
    #[arg(long, default_value_t = 256)]
    d_inter: usize,
    #[arg(long, default_value_t = 64)]
    max_seq_len: usize,
    #[arg(long, default_value_t = 1.0)]
    lr: f64,
    #[arg(long, default_value_t = 4000)]
    steps: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long)]
    seed: u64,
}

type SplitDocs = BTreeMap<String, Vec<Vec<u32>>>;

fn load_corpus_split(
    manifest_path: &Path,
    split: &str,
) -> Result<(corpus::CorpusManifest, SplitDocs)> {
    let manifest = corpus::load_manifest(manifest_path)?;
    let docs = corpus::load_split(manifest_path, &manifest, split)?;
    Ok((manifest, docs))
}

fn write_train_log(path: &Path, run: &RunManifest, log: &[tuner::TrainLogEntry]) -> Result<()> {
    let mut body = String::from("step,loss\n");
    for entry in log {
        writeln!(body, "{},{}", entry.step, entry.loss)?;
    }
    write_csv_with_manifest(path, run, &body)
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let (corpus_manifest, split_docs) = load_corpus_split(&args.corpus, &args.split)?;
    let config = ModelConfig {
        n_layers: args.layers,
        d_model: args.d_model,
        n_heads: args.n_heads,
        d_head: args.d_head,
        d_inter: args.d_inter,
        vocab_size: corpus_manifest.config.vocab_size as usize,
        max_seq_len: args.max_seq_len,
    };
    let init = TransformerWeights::init_random(config, args.seed)?;

    // Languages contribute in label order; the trainer reshuffles per
    // epoch from its own seed stream.
    let docs: Vec<Vec<u32>> = split_docs.into_values().flatten().collect();
    let cfg = TrainConfig {
        learning_rate: args.lr,
        steps: args.steps,
        batch_size: args.batch,
        seed: args.seed,
        mask: None,
        kind_filter: None,
    };
    let run = RunManifest::new("train", Some(args.seed), &args, &[args.corpus.as_path()])?;
    let outcome = tuner::train(&init, &docs, &cfg)?;

    model::save_weights_with_note(&args.out, &outcome.weights, &run.compact()?)?;
    if let Some(log_path) = &args.log {
        write_train_log(log_path, &run, &outcome.log)?;
    }
    println!(
        "trained {} steps, final loss {:.4}, wrote {}",
        outcome.log.len(),
        outcome.log.last().map(|e| e.loss).unwrap_or(f64::NAN),
        args.out.display()
    );
    Ok(())
}

#[derive(Args, Serialize)]
struct FinetuneArgs {
    /// Checkpoint to start from.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Language whose documents are used.
    #[arg(long)]
    lang: String,
    #[arg(long, default_value = "train")]
    split: String,
    /// Neuron set whose rows/columns are the only trainable parameters.
    #[arg(long)]
    mask: PathBuf,
    /// Restrict the mask to these matrix kinds (comma-separated).
    #[arg(long)]
    kinds: Option<String>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long, default_value_t = 0.2)]
    lr: f64,
    #[arg(long, default_value_t = 100)]
    steps: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long)]
    seed: u64,
}

fn cmd_finetune(args: FinetuneArgs) -> Result<()> {
    let weights = model::load_weights(&args.model)?;
    let (_, split_docs) = load_corpus_split(&args.corpus, &args.split)?;
    let docs = split_docs
        .get(&args.lang)
        .with_context(|| format!("corpus has no language {}", args.lang))?
        .clone();
    let set = atlas::load_set(&args.mask)?;
    if set.model_hash != weights.model_hash() {
        bail!("mask {} was detected on a different model", set.label);
    }
    let kind_filter = match &args.kinds {
        Some(text) => Some(
            parse_list::<MatrixKind>(text, "matrix kind")?
                .into_iter()
                .collect::<BTreeSet<_>>(),
        ),
        None => None,
    };
    let cfg = TrainConfig {
        learning_rate: args.lr,
        steps: args.steps,
        batch_size: args.batch,
        seed: args.seed,
        mask: Some(set.clone()),
        kind_filter,
    };
    let run = RunManifest::new(
        "finetune",
        Some(args.seed),
        &args,
        &[
            args.model.as_path(),
            args.corpus.as_path(),
            args.mask.as_path(),
        ],
    )?;
    let outcome = tuner::train(&weights, &docs, &cfg)?;
    let note = format!("mask={} {}", set.label, run.compact()?);
    model::save_weights_with_note(&args.out, &outcome.weights, &note)?;
    if let Some(log_path) = &args.log {
        write_train_log(log_path, &run, &outcome.log)?;
    }
    println!(
        "fine-tuned {} neurons for {} steps, wrote {}",
        set.len(),
        args.steps,
        args.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// importance

#[derive(Args, Serialize)]
struct ImportanceArgs {
    #[arg(long)]
    model: PathBuf,
    /// Token file, one document per line.
    #[arg(long)]
    doc_file: PathBuf,
    /// Line index of the document to score.
    #[arg(long, default_value_t = 0)]
    doc_index: usize,
    /// Average the map over every document in the file instead.
    #[arg(long, default_value_t = false)]
    average: bool,
    #[arg(long)]
    out: PathBuf,
}

fn cmd_importance(args: ImportanceArgs) -> Result<()> {
    let weights = model::load_weights(&args.model)?;
    let docs = corpus::load_docs(&args.doc_file)?;
    if docs.is_empty() {
        bail!("{} holds no documents", args.doc_file.display());
    }
    let map = if args.average {
        importance::imp_corpus_mean(&weights, &docs)?
    } else {
        let doc = docs
            .get(args.doc_index)
            .with_context(|| format!("doc index {} out of range", args.doc_index))?;
        importance::imp_all(&weights, doc)?
    };
    let run = RunManifest::new(
        "importance",
        None,
        &args,
        &[args.model.as_path(), args.doc_file.as_path()],
    )?;

    let bytes = importance::importance_to_bytes(&map);
    if bytes.first() == Some(&b'{') {
        write_json_with_manifest(&args.out, &run, &map)?;
    } else {
        // Binary container: reference the manifest from a sidecar file.
        langlens::fsio::write_atomic(&args.out, &bytes)?;
        let sidecar = args.out.with_extension("manifest.json");
        let mut manifest_bytes = serde_json::to_vec_pretty(&run)?;
        manifest_bytes.push(b'\n');
        langlens::fsio::write_atomic(&sidecar, &manifest_bytes)?;
    }
    println!("wrote {}", args.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// detect / overlap

#[derive(Args, Serialize)]
struct DetectArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Language whose corpus drives detection (also the set label).
    #[arg(long)]
    lang: String,
    #[arg(long, default_value = "train")]
    split: String,
    #[arg(long, default_value_t = 0.95)]
    q: f64,
    #[arg(long, default_value_t = 1.0)]
    p: f64,
    /// Use an absolute importance threshold instead of the quantile.
    #[arg(long)]
    absolute_eps: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

fn cmd_detect(args: DetectArgs) -> Result<()> {
    let weights = model::load_weights(&args.model)?;
    let (_, split_docs) = load_corpus_split(&args.corpus, &args.split)?;
    let docs = split_docs
        .get(&args.lang)
        .with_context(|| format!("corpus has no language {}", args.lang))?;
    let policy = ThresholdPolicy {
        quantile: args.q,
        doc_fraction: args.p,
        absolute_epsilon: args.absolute_eps,
    };
    let set = atlas::detect(&weights, docs, &policy, &args.lang)?;
    let run = RunManifest::new(
        "detect",
        None,
        &args,
        &[args.model.as_path(), args.corpus.as_path()],
    )?;
    write_json_with_manifest(&args.out, &run, &set)?;
    println!(
        "detected {} neurons for {}, wrote {}",
        set.len(),
        args.lang,
        args.out.display()
    );
    Ok(())
}

#[derive(Args, Serialize)]
struct OverlapArgs {
    /// Neuron set files; the matrix covers every ordered pair.
    #[arg(long, required = true, num_args = 1..)]
    sets: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn cmd_overlap(args: OverlapArgs) -> Result<()> {
    let sets: Vec<NeuronSet> = args
        .sets
        .iter()
        .map(|p| atlas::load_set(p))
        .collect::<langlens::Result<_>>()?;
    for set in &sets {
        if set.is_empty() {
            bail!(
                "set {} is empty; overlap ratios against it are undefined",
                set.label
            );
        }
    }
    let mut body = String::from("x");
    for set in &sets {
        write!(body, ",{}", set.label)?;
    }
    body.push('\n');
    for x in &sets {
        write!(body, "{}", x.label)?;
        for y in &sets {
            write!(body, ",{}", atlas::overlap(x, y)?)?;
        }
        body.push('\n');
    }
    let input_paths: Vec<&Path> = args.sets.iter().map(PathBuf::as_path).collect();
    let run = RunManifest::new("overlap", None, &args, &input_paths)?;
    write_csv_with_manifest(&args.out, &run, &body)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// deactivate-eval / report

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum SourceArg {
    LangSpec,
    Random,
}

#[derive(Args, Serialize)]
struct DeactivateEvalArgs {
    #[arg(long)]
    model: PathBuf,
    /// Neuron set files; several are unioned before masking.
    #[arg(long = "set", required = true, num_args = 1..)]
    sets: Vec<PathBuf>,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value = "validation")]
    split: String,
    /// Pivot language (plays the dominant-language role).
    #[arg(long)]
    pivot: String,
    #[arg(long)]
    n_under: usize,
    #[arg(long)]
    n_gen: usize,
    /// Deactivate inside the understanding layers.
    #[arg(long, default_value_t = false)]
    under: bool,
    /// Deactivate attention kinds inside the task-solving layers.
    #[arg(long, default_value_t = false)]
    s_attn: bool,
    /// Deactivate FFN kinds inside the task-solving layers.
    #[arg(long, default_value_t = false)]
    s_ffn: bool,
    /// Deactivate inside the generation layers.
    #[arg(long, default_value_t = false)]
    gen: bool,
    #[arg(long, value_enum, default_value_t = SourceArg::LangSpec)]
    source: SourceArg,
    /// Seed for the matched random baseline.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Optional flat CSV (one row per language).
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
struct EvalArtifact {
    config_label: String,
    mask_size: usize,
    warnings: Vec<String>,
    report: EvalReport,
}

fn load_union_set(paths: &[PathBuf]) -> Result<NeuronSet> {
    let mut sets = paths.iter().map(|p| atlas::load_set(p));
    let mut merged = sets.next().context("at least one set required")??;
    for set in sets {
        let set = set?;
        let label = format!("{}+{}", merged.label, set.label);
        merged = atlas::union(&merged, &set, &label)?;
    }
    Ok(merged)
}

fn eval_csv_body(config_label: &str, report: &EvalReport) -> Result<String> {
    let mut body = String::from("config,language,before,after,delta_pivot,delta_others,delta\n");
    for lang in &report.languages {
        writeln!(
            body,
            "{},{},{},{},{},{},{}",
            config_label,
            lang.label,
            lang.ppl_before,
            lang.ppl_after,
            report.delta_pivot,
            report.delta_others,
            report.delta
        )?;
    }
    Ok(body)
}

fn cmd_deactivate_eval(args: DeactivateEvalArgs) -> Result<()> {
    let weights = model::load_weights(&args.model)?;
    let set = load_union_set(&args.sets)?;
    if set.model_hash != weights.model_hash() {
        bail!("set {} was detected on a different model", set.label);
    }
    let partition = lab::partition(&weights.config, args.n_under, args.n_gen)?;
    let dcfg = DeactivationConfig {
        under: args.under,
        s_attn: args.s_attn,
        s_ffn: args.s_ffn,
        gen: args.gen,
        source: match args.source {
            SourceArg::LangSpec => NeuronSource::LangSpecific,
            SourceArg::Random => NeuronSource::RandomMatched { seed: args.seed },
        },
        target_lang: set.label.clone(),
    };
    dcfg.validate()?;
    let selected = lab::select_config_neurons(&weights.config, &set, &partition, &dcfg)?;
    for warning in &selected.empty_scopes {
        eprintln!("warning: {warning}");
    }
    let (_, corpora) = load_corpus_split(&args.corpus, &args.split)?;
    let report = lab::evaluate(&weights, &selected.mask, &corpora, &args.pivot)?;

    let mut input_paths: Vec<&Path> = vec![args.model.as_path(), args.corpus.as_path()];
    input_paths.extend(args.sets.iter().map(PathBuf::as_path));
    let run = RunManifest::new("deactivate-eval", Some(args.seed), &args, &input_paths)?;
    let artifact = EvalArtifact {
        config_label: dcfg.column_label(),
        mask_size: selected.mask.len(),
        warnings: selected.empty_scopes.clone(),
        report,
    };
    write_json_with_manifest(&args.out, &run, &artifact)?;
    if let Some(csv_path) = &args.csv {
        let body = eval_csv_body(&artifact.config_label, &artifact.report)?;
        write_csv_with_manifest(csv_path, &run, &body)?;
    }
    println!(
        "masked {} neurons; delta = {:.4}; wrote {}",
        artifact.mask_size,
        artifact.report.delta,
        args.out.display()
    );
    Ok(())
}

#[derive(Args, Serialize)]
struct ReportArgs {
    /// Evaluation report JSON files to merge.
    #[arg(required = true, num_args = 1..)]
    reports: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    let mut body = String::from("config,language,before,after,delta_pivot,delta_others,delta\n");
    for path in &args.reports {
        let artifact: EvalArtifact = serde_json::from_slice(&std::fs::read(path)?)
            .with_context(|| format!("parsing {}", path.display()))?;
        let rows = eval_csv_body(&artifact.config_label, &artifact.report)?;
        body.push_str(rows.split_once('\n').map(|(_, rest)| rest).unwrap_or(""));
    }
    let input_paths: Vec<&Path> = args.reports.iter().map(PathBuf::as_path).collect();
    let run = RunManifest::new("report", None, &args, &input_paths)?;
    write_csv_with_manifest(&args.out, &run, &body)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// probe

#[derive(Args, Serialize)]
struct ProbeArgs {
    #[arg(long)]
    model: PathBuf,
    /// Corpus manifest supplying the token-range classifier.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    doc_file: PathBuf,
    #[arg(long, default_value_t = 0)]
    doc_index: usize,
    #[arg(long)]
    out: PathBuf,
}

fn cmd_probe(args: ProbeArgs) -> Result<()> {
    let weights = model::load_weights(&args.model)?;
    let corpus_manifest = corpus::load_manifest(&args.corpus)?;
    let docs = corpus::load_docs(&args.doc_file)?;
    let doc = docs
        .get(args.doc_index)
        .with_context(|| format!("doc index {} out of range", args.doc_index))?;
    let ratios = lab::probe_language_ratio(&weights, doc, &corpus_manifest.config)?;

    let mut body = String::from("layer,language,fraction\n");
    for layer in &ratios {
        for (label, fraction) in &layer.fractions {
            writeln!(body, "{},{},{}", layer.layer, label, fraction)?;
        }
    }
    let run = RunManifest::new(
        "probe",
        None,
        &args,
        &[
            args.model.as_path(),
            args.corpus.as_path(),
            args.doc_file.as_path(),
        ],
    )?;
    write_csv_with_manifest(&args.out, &run, &body)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// tune-partition

#[derive(Args, Serialize)]
struct TunePartitionArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    set: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value = "validation")]
    split: String,
    #[arg(long)]
    pivot: String,
    #[arg(long)]
    target: String,
    /// Candidate understanding-region sizes, comma-separated.
    #[arg(long, default_value = "1,2,3")]
    grid_under: String,
    /// Candidate generation-region sizes, comma-separated.
    #[arg(long, default_value = "1,2")]
    grid_gen: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn cmd_tune_partition(args: TunePartitionArgs) -> Result<()> {
    let weights = model::load_weights(&args.model)?;
    let set = atlas::load_set(&args.set)?;
    if set.model_hash != weights.model_hash() {
        bail!("set {} was detected on a different model", set.label);
    }
    let unders: Vec<usize> = parse_list(&args.grid_under, "grid size")?;
    let gens: Vec<usize> = parse_list(&args.grid_gen, "grid size")?;
    let grid: Vec<(usize, usize)> = unders
        .iter()
        .flat_map(|&u| gens.iter().map(move |&g| (u, g)))
        .collect();
    let (_, validation) = load_corpus_split(&args.corpus, &args.split)?;
    let report = lab::tune_partition(
        &weights,
        &set,
        &grid,
        &validation,
        &args.pivot,
        &args.target,
    )?;

    for entry in &report.skipped {
        eprintln!(
            "warning: grid entry ({}, {}) skipped: {}",
            entry.n_under, entry.n_gen, entry.reason
        );
    }
    let run = RunManifest::new(
        "tune-partition",
        None,
        &args,
        &[
            args.model.as_path(),
            args.set.as_path(),
            args.corpus.as_path(),
        ],
    )?;
    write_json_with_manifest(&args.out, &run, &report)?;
    if let Some(csv_path) = &args.csv {
        let mut body = String::from("n_under,n_gen,mask_size,delta_pivot,delta_target,delta\n");
        for row in &report.rows {
            writeln!(
                body,
                "{},{},{},{},{},{}",
                row.n_under, row.n_gen, row.mask_size, row.delta_pivot, row.delta_target, row.delta
            )?;
        }
        write_csv_with_manifest(csv_path, &run, &body)?;
    }
    println!(
        "best partition: n_under={} n_gen={}; wrote {}",
        report.best.n_under,
        report.best.n_gen,
        args.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// bench

#[derive(Args, Serialize)]
struct BenchArgs {
    #[arg(long, default_value_t = 512)]
    d_inter: usize,
    #[arg(long, default_value_t = 32)]
    seq_len: usize,
    #[arg(long, default_value_t = 128)]
    d_model: usize,
    #[arg(long, default_value_t = 4)]
    n_heads: usize,
    #[arg(long, default_value_t = 1)]
    layers: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize, Deserialize)]
struct BenchArtifact {
    d_model: usize,
    d_inter: usize,
    seq_len: usize,
    neurons: usize,
    sequential_seconds: f64,
    parallel_seconds: f64,
    speedup: f64,
}

fn cmd_bench(args: BenchArgs) -> Result<()> {
    if !args.d_model.is_multiple_of(args.n_heads) {
        bail!("d_model must be divisible by n_heads");
    }
    let config = ModelConfig {
        n_layers: args.layers,
        d_model: args.d_model,
        n_heads: args.n_heads,
        d_head: args.d_model / args.n_heads,
        d_inter: args.d_inter,
        vocab_size: 256,
        max_seq_len: args.seq_len,
    };
    let weights = TransformerWeights::init_random(config, args.seed)?;
    use rand::Rng;
    let mut rng = rng_for(args.seed, "bench/doc");
    let doc: Vec<u32> = (0..args.seq_len)
        .map(|_| rng.random_range(0..256))
        .collect();

    let artifact = run_bench(&weights, &doc)?;
    println!(
        "sequential {:.4}s, parallel {:.6}s, speedup {:.1}x",
        artifact.sequential_seconds, artifact.parallel_seconds, artifact.speedup
    );
    let run = RunManifest::new("bench", Some(args.seed), &args, &[])?;
    write_json_with_manifest(&args.out, &run, &artifact)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

/// Time the sequential per-neuron FFN oracle sweep against the batched
/// path, both covering every FFN neuron of layer 0 and both including
/// their own forward pass.
fn run_bench(weights: &TransformerWeights, doc: &[u32]) -> Result<BenchArtifact> {
    // Warm up allocators and caches once.
    let _ = model::forward(weights, doc, None)?;

    let t0 = Instant::now();
    let trace = model::forward(weights, doc, None)?;
    let mut sequential = Vec::with_capacity(weights.config.d_inter);
    for k in 0..weights.config.d_inter {
        sequential.push(importance::oracle_sub_from_trace(
            weights,
            &trace,
            &model::NeuronId::new(0, MatrixKind::Up, k),
        )?);
    }
    let sequential_seconds = t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    let parallel = importance::imp_ffn_parallel(weights, doc, 0)?;
    let parallel_seconds = t1.elapsed().as_secs_f64();

    // Guard against timing a wrong computation.
    let deviation = importance::max_relative_deviation(&sequential, &parallel);
    if deviation > 1e-9 {
        bail!("sequential and parallel scores disagree (deviation {deviation})");
    }

    Ok(BenchArtifact {
        d_model: weights.config.d_model,
        d_inter: weights.config.d_inter,
        seq_len: doc.len(),
        neurons: weights.config.d_inter,
        sequential_seconds,
        parallel_seconds,
        speedup: sequential_seconds / parallel_seconds,
    })
}

//! `mcse`: generate synthetic corpora, train, evaluate, analyze, retrieve
//! and run multi-seed experiment suites.

mod config;

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use mcse_core::checkpoint::{self, Checkpoint};
use mcse_core::data;
use mcse_core::eval::{self, ModelEmbedder, SpaceAnalysis};
use mcse_core::metrics::{self, EmbeddedCorpus};
use mcse_core::suite::{self, DataSource, SuiteReport};
use mcse_core::synth::{self, SynthConfig};
use mcse_core::train::{self, TrainConfig};
use mcse_core::Execution;

use config::{int, put, put_path, uint64, Override};

#[derive(Parser)]
#[command(
    name = "mcse",
    version,
    about = "Contrastive sentence-embedding lab with optional visual grounding"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic grounded corpus to a directory.
    Generate(GenerateArgs),
    /// Train one model and keep the best checkpoint by dev Spearman.
    Train(TrainCmd),
    /// Evaluate a checkpoint on STS task files.
    Eval(EvalArgs),
    /// Alignment and uniformity of a checkpoint's embedding space.
    Analyze(AnalyzeArgs),
    /// Nearest-sentence search or cross-modal recall@K.
    Retrieve(RetrieveArgs),
    /// Train variants over several seeds and compare them.
    Suite(SuiteArgs),
}

#[derive(Clone, Copy, Debug, Default, ValueEnum)]
enum ExecArg {
    Sequential,
    #[default]
    Parallel,
}

impl From<ExecArg> for Execution {
    fn from(e: ExecArg) -> Self {
        match e {
            ExecArg::Sequential => Execution::Sequential,
            ExecArg::Parallel => Execution::Parallel,
        }
    }
}

// ---------------------------------------------------------------------------
// generate

#[derive(Args)]
struct GenerateArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// TOML file with any of the generator fields below.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, alias = "num_topics")]
    num_topics: Option<usize>,
    #[arg(long, alias = "words_per_topic")]
    words_per_topic: Option<usize>,
    #[arg(long, alias = "min_sentence_len")]
    min_sentence_len: Option<usize>,
    #[arg(long, alias = "max_sentence_len")]
    max_sentence_len: Option<usize>,
    #[arg(long, alias = "num_images")]
    num_images: Option<usize>,
    #[arg(long, alias = "captions_per_image")]
    captions_per_image: Option<usize>,
    #[arg(long, alias = "num_text_only_sentences")]
    num_text_only_sentences: Option<usize>,
    #[arg(long, alias = "feature_dim")]
    feature_dim: Option<usize>,
    #[arg(long, alias = "feature_noise")]
    feature_noise: Option<f64>,
    #[arg(long, alias = "noise_word_rate")]
    noise_word_rate: Option<f64>,
    #[arg(long, alias = "sts_test_pairs")]
    sts_test_pairs: Option<usize>,
    #[arg(long, alias = "sts_dev_pairs")]
    sts_dev_pairs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

impl GenerateArgs {
    fn resolve(&self) -> Result<SynthConfig> {
        let mut o: Vec<Override> = Vec::new();
        put(&mut o, "num_topics", int(self.num_topics));
        put(&mut o, "words_per_topic", int(self.words_per_topic));
        put(&mut o, "min_sentence_len", int(self.min_sentence_len));
        put(&mut o, "max_sentence_len", int(self.max_sentence_len));
        put(&mut o, "num_images", int(self.num_images));
        put(&mut o, "captions_per_image", int(self.captions_per_image));
        put(
            &mut o,
            "num_text_only_sentences",
            int(self.num_text_only_sentences),
        );
        put(&mut o, "feature_dim", int(self.feature_dim));
        put(&mut o, "feature_noise", self.feature_noise);
        put(&mut o, "noise_word_rate", self.noise_word_rate);
        put(&mut o, "sts_test_pairs", int(self.sts_test_pairs));
        put(&mut o, "sts_dev_pairs", int(self.sts_dev_pairs));
        put(&mut o, "seed", uint64(self.seed));
        config::resolve(self.config.as_deref(), &[], o)
    }
}

fn generate(args: GenerateArgs) -> Result<()> {
    let cfg = args.resolve()?;
    let corpus = synth::generate_grounded_corpus(&cfg)?;
    corpus.write_to_dir(&args.out)?;
    write(&args.out.join("synth_config.toml"), &toml::to_string(&cfg)?)?;
    println!(
        "wrote {} text-only sentences, {} images × {} captions, {} dev and {} test STS pairs to {}",
        corpus.text_only.len(),
        corpus.caption_groups.len(),
        cfg.captions_per_image,
        corpus.sts_dev.len(),
        corpus.sts_test.len(),
        args.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train

/// Every training field. Unset flags fall back to the config file, then to
/// the built-in defaults.
#[derive(Args, Clone, Default)]
struct TrainFlags {
    /// TOML file with any of the training fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `simcse` or `mcse`.
    #[arg(long)]
    objective: Option<String>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long, alias = "tau_prime")]
    tau_prime: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long, alias = "learning_rate")]
    learning_rate: Option<f64>,
    #[arg(long, alias = "batch_size")]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Fixed number of optimizer steps; overrides `epochs`.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, alias = "eval_every_steps")]
    eval_every_steps: Option<usize>,
    #[arg(long, alias = "keep_prob")]
    keep_prob: Option<f64>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long, alias = "d_s")]
    d_s: Option<usize>,
    #[arg(long, alias = "d_v")]
    d_v: Option<usize>,
    #[arg(long)]
    vocab: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, alias = "text_corpus")]
    text_corpus: Option<PathBuf>,
    #[arg(long)]
    captions: Option<PathBuf>,
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long, alias = "dev_sts")]
    dev_sts: Option<PathBuf>,
    #[arg(long, alias = "shuffle_images", num_args = 0..=1, default_missing_value = "true")]
    shuffle_images: Option<bool>,
    #[arg(long, alias = "sample_limit")]
    sample_limit: Option<usize>,
}

const PATH_KEYS: [&str; 4] = ["text_corpus", "captions", "features", "dev_sts"];

impl TrainFlags {
    fn overrides(&self) -> Vec<Override> {
        let mut o = Vec::new();
        put(
            &mut o,
            "objective",
            self.objective.as_ref().map(|s| s.to_ascii_lowercase()),
        );
        put(&mut o, "tau", self.tau);
        put(&mut o, "tau_prime", self.tau_prime);
        put(&mut o, "lambda", self.lambda);
        put(&mut o, "learning_rate", self.learning_rate);
        put(&mut o, "batch_size", int(self.batch_size));
        put(&mut o, "epochs", int(self.epochs));
        put(&mut o, "steps", int(self.steps));
        put(&mut o, "eval_every_steps", int(self.eval_every_steps));
        put(&mut o, "keep_prob", self.keep_prob);
        put(&mut o, "d", int(self.d));
        put(&mut o, "d_s", int(self.d_s));
        put(&mut o, "d_v", int(self.d_v));
        put(&mut o, "vocab", int(self.vocab));
        put(&mut o, "seed", uint64(self.seed));
        put_path(&mut o, "text_corpus", &self.text_corpus);
        put_path(&mut o, "captions", &self.captions);
        put_path(&mut o, "features", &self.features);
        put_path(&mut o, "dev_sts", &self.dev_sts);
        put(&mut o, "shuffle_images", self.shuffle_images);
        put(&mut o, "sample_limit", int(self.sample_limit));
        o
    }

    fn resolve(&self) -> Result<TrainConfig> {
        let cfg: TrainConfig =
            config::resolve(self.config.as_deref(), &PATH_KEYS, self.overrides())?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainCmd {
    #[command(flatten)]
    flags: TrainFlags,
    /// Output directory for the checkpoint, logs and resolved config.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t)]
    execution: ExecArg,
}

fn run_train(args: TrainCmd) -> Result<()> {
    let cfg = args.flags.resolve()?;
    let outcome = train::train(&cfg, args.execution.into())?;
    train::write_outputs(&outcome, &args.out)?;
    write(&args.out.join("config.toml"), &toml::to_string(&cfg)?)?;
    let totals = outcome.log.step_totals();
    println!(
        "{} steps; loss {:.4} → {:.4}; best dev Spearman {:.2} at step {}; config {}",
        totals.len(),
        totals.first().copied().unwrap_or(f64::NAN),
        totals.last().copied().unwrap_or(f64::NAN),
        outcome.best.dev_metric,
        outcome.best.step,
        &checkpoint::hash_hex(&outcome.best.config_hash)[..12]
    );
    println!("outputs in {}", args.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// eval / analyze

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// STS files; each file is one task named after its stem.
    #[arg(long, num_args = 1.., required = true)]
    tasks: Vec<PathBuf>,
    /// CSV report path (default: eval.csv next to the checkpoint).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t)]
    execution: ExecArg,
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent().unwrap_or(Path::new(".")).join(name)
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let tasks = eval::load_tasks(&args.tasks)?;
    let report = eval::evaluate_checkpoint(&ckpt, &tasks, args.execution.into())?;
    for (task, rho) in &report.per_task_spearman {
        println!("{task:<24} {rho:>8.2}");
        if let Some(subsets) = report.per_subset.get(task) {
            for (tag, r) in subsets {
                println!("  {tag:<22} {r:>8.2}");
            }
        }
    }
    println!("{:<24} {:>8.2}", "average", report.average);
    let out = args
        .out
        .unwrap_or_else(|| sibling(&args.checkpoint, "eval.csv"));
    write(&out, &report.to_csv()?)?;
    println!("csv: {}", out.display());
    Ok(())
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// STS file; alignment uses its pairs with gold above 4.0.
    #[arg(long)]
    sts: PathBuf,
    /// Row label (default: the checkpoint file stem).
    #[arg(long)]
    label: Option<String>,
    /// CSV path (default: analysis.csv next to the checkpoint).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t)]
    execution: ExecArg,
}

fn run_analyze(args: AnalyzeArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let a = eval::analyze_embedding_space(&ckpt, &args.sts, args.execution.into())?;
    let label = args.label.unwrap_or_else(|| {
        args.checkpoint
            .file_stem()
            .map_or("checkpoint".into(), |s| s.to_string_lossy().into_owned())
    });
    println!(
        "alignment {:.4}  uniformity {:.4}  ({} positive of {} pairs)",
        a.alignment, a.uniformity, a.positive_pairs, a.pairs
    );
    let out = args
        .out
        .unwrap_or_else(|| sibling(&args.checkpoint, "analysis.csv"));
    write(
        &out,
        &format!("{}\n{}\n", SpaceAnalysis::CSV_HEADER, a.csv_row(&label)),
    )?;
    println!("csv: {}", out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// retrieve

#[derive(Args)]
struct RetrieveArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Sentence corpus to search (one sentence per line).
    #[arg(long, requires = "query", conflicts_with_all = ["captions", "features"])]
    corpus: Option<PathBuf>,
    /// Query sentences for nearest-neighbour search.
    #[arg(long, num_args = 1..)]
    query: Vec<String>,
    /// Number of neighbours per query.
    #[arg(short, long, default_value_t = 5)]
    k: usize,
    /// Caption file for cross-modal recall.
    #[arg(long, requires = "features")]
    captions: Option<PathBuf>,
    #[arg(long, requires = "captions")]
    features: Option<PathBuf>,
    /// Cut-offs for recall.
    #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
    recall_k: Vec<usize>,
    /// Seed for choosing one caption per image.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV path (default: retrieval.csv next to the checkpoint).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t)]
    execution: ExecArg,
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn run_retrieve(args: RetrieveArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let exec: Execution = args.execution.into();
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| sibling(&args.checkpoint, "retrieval.csv"));
    let mut csv = String::new();
    if let Some(corpus_path) = &args.corpus {
        let sentences: Vec<String> = data::load_sentence_corpus(corpus_path)?
            .into_iter()
            .map(|r| r.text)
            .collect();
        let embedder = ModelEmbedder {
            params: &ckpt.params,
        };
        let corpus = EmbeddedCorpus::build(&embedder, sentences, exec)?;
        csv.push_str("query,rank,index,score,sentence\n");
        for q in &args.query {
            println!("{q}");
            for (rank, n) in metrics::nearest_sentences(q, &embedder, &corpus, args.k)?
                .iter()
                .enumerate()
            {
                println!("  {:>2}. {:.4}  {}", rank + 1, n.score, n.sentence);
                csv.push_str(&format!(
                    "{},{},{},{},{}\n",
                    csv_field(q),
                    rank + 1,
                    n.index,
                    n.score,
                    csv_field(&n.sentence)
                ));
            }
        }
    } else if let (Some(captions), Some(features)) = (&args.captions, &args.features) {
        let corpus = data::MultimodalCorpus::load(captions, features)?;
        let pairs = corpus.sample(args.seed)?;
        let recall =
            eval::cross_modal_recall(&ckpt.params, &pairs, &corpus.features, &args.recall_k, exec)?;
        csv.push_str("direction_k,recall\n");
        for (key, r) in &recall {
            println!("{key:<10} {r:.4}");
            csv.push_str(&format!("{key},{r}\n"));
        }
    } else {
        bail!("give either --corpus with --query, or --captions with --features");
    }
    write(&out, &csv)?;
    println!("csv: {}", out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// suite

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Study {
    /// SimCSE, MCSE and MCSE with shuffled images.
    Standard,
    /// SimCSE and MCSE over the λ grid.
    Lambda,
    /// SimCSE and MCSE over the sample-limit grid.
    DataScale,
    All,
}

#[derive(Args)]
struct SuiteArgs {
    /// Base training config; every variant starts from it.
    #[command(flatten)]
    flags: TrainFlags,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    seeds: Vec<u64>,
    #[arg(long, value_enum, default_value = "standard")]
    study: Study,
    /// Directory written by `generate`. Without it, a default synthetic
    /// corpus is generated in memory.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Seed of the in-memory synthetic corpus.
    #[arg(long, default_value_t = 0)]
    synth_seed: u64,
    /// Test STS files (default: the corpus's test split).
    #[arg(long, num_args = 1..)]
    test_sts: Vec<PathBuf>,
    /// Output directory for CSV tables.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t)]
    execution: ExecArg,
}

fn write_suite(out: &Path, name: &str, report: &SuiteReport) -> Result<()> {
    println!("== {name} (baseline {})", report.baseline);
    print!("{}", report.to_table());
    write(
        &out.join(format!("{name}_summary.csv")),
        &report.summary_csv()?,
    )?;
    write(&out.join(format!("{name}_runs.csv")), &report.runs_csv()?)
}

fn run_suite(args: SuiteArgs) -> Result<()> {
    let exec: Execution = args.execution.into();
    let mut flags = args.flags.clone();
    let generated;
    let source = match &args.data {
        Some(dir) => {
            flags
                .text_corpus
                .get_or_insert(dir.join(synth::CORPUS_FILE));
            flags.captions.get_or_insert(dir.join(synth::CAPTIONS_FILE));
            flags.features.get_or_insert(dir.join(synth::FEATURES_FILE));
            flags.dev_sts.get_or_insert(dir.join(synth::STS_DEV_FILE));
            DataSource::Files
        }
        None => {
            generated = synth::generate_grounded_corpus(&SynthConfig {
                seed: args.synth_seed,
                ..SynthConfig::default()
            })?;
            DataSource::Corpus(&generated)
        }
    };
    let base = flags.resolve()?;
    let tasks = match (&args.test_sts, &args.data, &source) {
        (t, _, _) if !t.is_empty() => eval::load_tasks(t)?,
        (_, Some(dir), _) => eval::load_tasks(&[dir.join(synth::STS_TEST_FILE)])?,
        (_, None, DataSource::Corpus(c)) => c.test_tasks(),
        _ => bail!("no test STS tasks"),
    };
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    write(&args.out.join("base_config.toml"), &toml::to_string(&base)?)?;
    let studies = match args.study {
        Study::All => vec![Study::Standard, Study::Lambda, Study::DataScale],
        s => vec![s],
    };
    for study in studies {
        match study {
            Study::Standard => {
                let r = suite::run_experiment_suite(
                    &suite::standard_variants(&base),
                    &args.seeds,
                    suite::SIMCSE,
                    source,
                    &tasks,
                    exec,
                )?;
                write_suite(&args.out, "standard", &r)?;
            }
            Study::Lambda => {
                let r = suite::run_experiment_suite(
                    &suite::lambda_grid_variants(&base),
                    &args.seeds,
                    suite::SIMCSE,
                    source,
                    &tasks,
                    exec,
                )?;
                write_suite(&args.out, "lambda", &r)?;
            }
            Study::DataScale => {
                let r = suite::run_data_scale(
                    &base,
                    &suite::SAMPLE_LIMIT_GRID,
                    &args.seeds,
                    source,
                    &tasks,
                    exec,
                )?;
                write_suite(&args.out, "data_scale", &r.suite)?;
                println!("sample_limit  simcse    mcse  advantage");
                for row in &r.rows {
                    println!(
                        "{:<12} {:>7.2} {:>7.2} {:>+10.2}",
                        row.sample_limit
                            .map_or("full".to_string(), |n| n.to_string()),
                        row.simcse,
                        row.mcse,
                        row.advantage
                    );
                }
                println!(
                    "monotone: {}; largest exceeds smallest: {}",
                    r.monotone, r.largest_exceeds_smallest
                );
                write(&args.out.join("data_scale_monotonicity.csv"), &r.to_csv()?)?;
            }
            Study::All => unreachable!("expanded above"),
        }
    }
    println!("csv tables in {}", args.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Analyze(a) => run_analyze(a),
        Command::Retrieve(a) => run_retrieve(a),
        Command::Suite(a) => run_suite(a),
    }
}

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use vgkw::corpus::{generate_corpus, load_corpus, load_judgments, save_corpus, save_judgments, Corpus, Split};
use vgkw::eval::{save_report_json, save_report_tsv, Head, MetricReport, ScoreMatrix};
use vgkw::experiment::{
    cell_dir, evaluate_model, head_matrices, prepare, retrieve, run_sweep, save_sweep_report, train_any, AnyOutcome,
    ExperimentConfig, SweepInputs, System,
};
use vgkw::numerics::{Precision, Real};
use vgkw::tagger::{load_tagger, save_tagger};
use vgkw::training::{load_checkpoint, load_checkpoint_meta, Checkpoint, CheckpointMeta, RunIo, BEST_FILE};
use vgkw::verify::{run_grad_suite, GradSuiteConfig};

const OUT_ENV: &str = "VGKW_OUT_DIR";
const DEFAULT_OUT: &str = "vgkw-out";

#[derive(Parser)]
#[command(name = "vgkw", version, about = "Visually grounded and text-supervised speech keyword models")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set train.max_steps=500`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Output root [default: config `output_dir`, then $VGKW_OUT_DIR, then `vgkw-out`].
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus and relevance judgments.
    Generate,
    /// Train the image tagger on the tagger split.
    TrainTagger {
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Train one system: textual-baseline, visual-baseline or mtl.
    Train {
        #[arg(long)]
        system: String,
        /// Transcript fraction [default: train.set_c_fraction].
        #[arg(long)]
        fraction: Option<f64>,
        /// Training seed [default: train.seed].
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        run_dir: Option<PathBuf>,
        /// Continue from the run directory's last checkpoint.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        tagger: Option<PathBuf>,
    },
    /// Score a trained run against relevance judgments.
    Evaluate {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        judgments: Option<PathBuf>,
        /// Where reports go [default: the run directory].
        #[arg(long)]
        report_dir: Option<PathBuf>,
    },
    /// Rank test utterances for a query word.
    Retrieve {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        query: String,
        #[arg(long, default_value_t = 0.3)]
        threshold: f64,
        #[arg(long, default_value_t = 10)]
        top_k: usize,
        /// vis, bow or ensemble [default: ensemble when both heads trained].
        #[arg(long)]
        head: Option<String>,
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Train and evaluate every system, fraction and seed of the sweep.
    Sweep,
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: usize,
        #[arg(long, default_value_t = 0)]
        base_seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        epsilon: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        /// Also write the report as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

/// A usage or configuration problem, reported with exit code 1.
#[derive(Debug)]
struct Invalid(String);

impl fmt::Display for Invalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Invalid(msg.into()).into()
}

fn is_validation(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        e.is::<Invalid>() || matches!(e.downcast_ref::<vgkw::Error>(), Some(vgkw::Error::Config(_) | vgkw::Error::Vocabulary(_)))
    })
}

struct Context_ {
    config: ExperimentConfig,
    out: PathBuf,
}

impl Context_ {
    fn load(common: &Common) -> Result<Self> {
        let config = ExperimentConfig::load(common.config.as_deref(), &common.overrides)?;
        let out = common
            .out_dir
            .clone()
            .or_else(|| config.output_dir.clone())
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
        Ok(Self { config, out })
    }

    fn corpus_dir(&self, given: &Option<PathBuf>) -> PathBuf {
        given.clone().unwrap_or_else(|| self.out.join("corpus"))
    }

    fn load_corpus(&self, given: &Option<PathBuf>) -> Result<Corpus> {
        let dir = self.corpus_dir(given);
        load_corpus(&dir).with_context(|| format!("loading corpus from {} (run `vgkw generate` first)", dir.display()))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_validation(&e) { 1 } else { 2 })
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    if let Command::Gradcheck {
        seeds,
        base_seed,
        epsilon,
        tolerance,
        report,
    } = &cli.command
    {
        return gradcheck(*seeds, *base_seed, *epsilon, *tolerance, report.as_deref());
    }
    let ctx = Context_::load(&cli.common)?;
    match cli.command {
        Command::Generate => generate(&ctx),
        Command::TrainTagger { corpus } => train_tagger(&ctx, &corpus),
        Command::Train {
            system,
            fraction,
            seed,
            run_dir,
            resume,
            corpus,
            tagger,
        } => train(&ctx, &system, fraction, seed, run_dir, resume, &corpus, &tagger),
        Command::Evaluate {
            run,
            corpus,
            judgments,
            report_dir,
        } => evaluate(&ctx, &run, &corpus, judgments, report_dir),
        Command::Retrieve {
            run,
            query,
            threshold,
            top_k,
            head,
            corpus,
        } => retrieve_cmd(&ctx, &run, &query, threshold, top_k, head.as_deref(), &corpus),
        Command::Sweep => sweep(&ctx),
        Command::Gradcheck { .. } => unreachable!(),
    }
}

fn generate(ctx: &Context_) -> Result<ExitCode> {
    let corpus = generate_corpus(&ctx.config.corpus)?;
    let judgments = ctx.config.make_judgments(&corpus)?;
    std::fs::create_dir_all(&ctx.out).with_context(|| format!("creating {}", ctx.out.display()))?;
    save_corpus(&corpus, &ctx.out.join("corpus"))?;
    save_judgments(&judgments, &corpus.vocab, &ctx.out.join("judgments.tsv"))?;
    std::fs::write(ctx.out.join("config.toml"), ctx.config.to_toml()?)?;
    println!("items\t{}", corpus.items.len());
    for split in [Split::TaggerTrain, Split::ImageSpeech, Split::Dev, Split::Test] {
        println!("{}\t{}", split.as_str(), corpus.count(split));
    }
    println!("vocabulary\t{}", corpus.vocab.len());
    println!("queries\t{}", judgments.queries.len());
    println!("checksum\t{}", corpus.checksum());
    Ok(ExitCode::SUCCESS)
}

fn train_tagger(ctx: &Context_, corpus: &Option<PathBuf>) -> Result<ExitCode> {
    let corpus = ctx.load_corpus(corpus)?;
    let tagger = ctx.config.fit_tagger(&corpus)?;
    let path = ctx.out.join("tagger.bin");
    save_tagger(&tagger, &path)?;
    println!("tags\t{}", tagger.n_vis());
    println!("tagger\t{}", path.display());
    Ok(ExitCode::SUCCESS)
}

#[allow(clippy::too_many_arguments)]
fn train(
    ctx: &Context_,
    system: &str,
    fraction: Option<f64>,
    seed: Option<u64>,
    run_dir: Option<PathBuf>,
    resume: bool,
    corpus: &Option<PathBuf>,
    tagger: &Option<PathBuf>,
) -> Result<ExitCode> {
    let system = System::parse(system)?;
    let fraction = fraction.unwrap_or(ctx.config.train.set_c_fraction);
    let seed = seed.unwrap_or(ctx.config.train.seed);
    let train_cfg = system.train_config(&ctx.config.train, fraction, seed);
    train_cfg.validate()?;
    let cell_fraction = (system != System::VisualBaseline).then_some(fraction);
    let dir = run_dir.unwrap_or_else(|| cell_dir(&ctx.out.join("runs"), system, cell_fraction, seed));
    if resume && !dir.join(BEST_FILE).exists() {
        return Err(invalid(format!("--resume: no checkpoint in {}", dir.display())));
    }

    let corpus = ctx.load_corpus(corpus)?;
    let tagger_path = tagger.clone().unwrap_or_else(|| ctx.out.join("tagger.bin"));
    let tagger = load_tagger(&tagger_path)
        .with_context(|| format!("loading tagger from {} (run `vgkw train-tagger` first)", tagger_path.display()))?;
    let io = RunIo {
        run_dir: Some(&dir),
        resume,
    };
    let outcome = train_any(&corpus, &tagger, &ctx.config.bow_vocab(&corpus), &ctx.config.model, &train_cfg, &io)?;
    let (steps, best_step, best_f1) = match &outcome {
        AnyOutcome::Single(o) => (o.steps, o.best_step, o.best_f1),
        AnyOutcome::Double(o) => (o.steps, o.best_step, o.best_f1),
    };
    println!("run\t{}", dir.display());
    println!("system\t{system}");
    println!("steps\t{steps}");
    println!("best_step\t{best_step}");
    match best_f1 {
        Some(f) => println!("best_f1\t{f:.6}"),
        None => println!("best_f1\tNA"),
    }
    Ok(ExitCode::SUCCESS)
}

/// Best checkpoint of a run in its own precision.
enum Loaded {
    Single(Checkpoint<f32>),
    Double(Checkpoint<f64>),
}

impl Loaded {
    fn open(run: &Path) -> Result<Self> {
        let path = run.join(BEST_FILE);
        let meta = load_checkpoint_meta(&path).with_context(|| format!("reading {}", path.display()))?;
        Ok(match meta.precision {
            Precision::Single => Loaded::Single(load_checkpoint(&path)?),
            Precision::Double => Loaded::Double(load_checkpoint(&path)?),
        })
    }

    fn meta(&self) -> &CheckpointMeta {
        match self {
            Loaded::Single(c) => &c.meta,
            Loaded::Double(c) => &c.meta,
        }
    }

    fn matrices(&self, items: &[&vgkw::corpus::CorpusItem], queries: &[usize]) -> vgkw::Result<Vec<ScoreMatrix>> {
        fn go<F: Real>(c: &Checkpoint<F>, items: &[&vgkw::corpus::CorpusItem], queries: &[usize]) -> vgkw::Result<Vec<ScoreMatrix>> {
            head_matrices(&c.model, &c.meta, items, queries)
        }
        match self {
            Loaded::Single(c) => go(c, items, queries),
            Loaded::Double(c) => go(c, items, queries),
        }
    }

    fn evaluate(&self, corpus: &Corpus, judgments: &vgkw::corpus::Judgments, ctx: &Context_) -> vgkw::Result<Vec<MetricReport>> {
        match self {
            Loaded::Single(c) => evaluate_model(&c.model, &c.meta, corpus, judgments, &ctx.config.eval),
            Loaded::Double(c) => evaluate_model(&c.model, &c.meta, corpus, judgments, &ctx.config.eval),
        }
    }
}

fn evaluate(
    ctx: &Context_,
    run: &Path,
    corpus: &Option<PathBuf>,
    judgments: Option<PathBuf>,
    report_dir: Option<PathBuf>,
) -> Result<ExitCode> {
    let ckpt = Loaded::open(run)?;
    let corpus = ctx.load_corpus(corpus)?;
    let jpath = judgments.unwrap_or_else(|| ctx.out.join("judgments.tsv"));
    let judgments = load_judgments(&jpath, &corpus.vocab).with_context(|| format!("loading {}", jpath.display()))?;
    let reports = ckpt.evaluate(&corpus, &judgments, ctx)?;
    let dir = report_dir.unwrap_or_else(|| run.to_path_buf());
    std::fs::create_dir_all(&dir)?;
    println!("head\tqueries\tp_at_{}\tp_at_n\tap\tspearman", ctx.config.eval.k);
    for r in &reports {
        save_report_json(r, &dir.join(format!("report_{}.json", r.head)))?;
        save_report_tsv(r, Some(&corpus.vocab), &dir.join(format!("report_{}.tsv", r.head)))?;
        let a = &r.aggregate;
        println!(
            "{}\t{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}",
            r.head, r.num_queries, a.p_at_k, a.p_at_n, a.ap, a.spearman
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn retrieve_cmd(
    ctx: &Context_,
    run: &Path,
    query: &str,
    threshold: f64,
    top_k: usize,
    head: Option<&str>,
    corpus: &Option<PathBuf>,
) -> Result<ExitCode> {
    let head = head.map(Head::parse).transpose()?;
    let ckpt = Loaded::open(run)?;
    let corpus = ctx.load_corpus(corpus)?;
    let word = corpus
        .vocab
        .id(query)
        .ok_or_else(|| vgkw::Error::Vocabulary(vec![query.to_string()]))?;
    let items = corpus.split(Split::Test);
    let matrices = ckpt.matrices(&items, &[word])?;
    let head = head.unwrap_or_else(|| {
        let trained = &ckpt.meta().trained_heads;
        if trained.len() > 1 {
            Head::Ensemble
        } else {
            trained.first().copied().unwrap_or(Head::Vis)
        }
    });
    let matrix = matrices
        .iter()
        .find(|m| m.head == head)
        .ok_or_else(|| invalid(format!("run has no trained {head} head")))?;
    if matrix.query_index(word).is_none() {
        return Err(vgkw::Error::Vocabulary(vec![format!("{query} (not in the {head} head's vocabulary)")]).into());
    }
    let hits = retrieve(matrix, word, threshold, top_k)?;
    let by_id: std::collections::HashMap<u32, &vgkw::corpus::CorpusItem> = items.iter().map(|i| (i.id, *i)).collect();
    println!("rank\tutterance\tscore\ttranscript");
    for (rank, (id, score)) in hits.iter().enumerate() {
        let text = by_id[id].transcript.as_ref().map_or_else(String::new, |_| corpus.transcript_text(by_id[id]).unwrap_or_default());
        println!("{}\t{id}\t{score:.6}\t{text}", rank + 1);
    }
    Ok(ExitCode::SUCCESS)
}

fn sweep(ctx: &Context_) -> Result<ExitCode> {
    let root = ctx.out.join("sweep");
    let config_text = ctx.config.to_toml()?;
    let config_path = root.join("config.toml");
    if config_path.exists() {
        let previous = std::fs::read_to_string(&config_path)?;
        if previous != config_text {
            return Err(invalid(format!(
                "{} holds a sweep with a different configuration; choose another --out-dir",
                root.display()
            )));
        }
    }
    let (corpus, tagger, judgments) = prepare(&ctx.config)?;
    std::fs::create_dir_all(&root)?;
    std::fs::write(&config_path, config_text)?;
    let inputs = SweepInputs {
        config: &ctx.config,
        corpus: &corpus,
        tagger: &tagger,
        judgments: &judgments,
    };
    let report = run_sweep(&inputs, Some(&root), &mut |msg| eprintln!("{msg}"));
    save_sweep_report(&report, &root)?;
    println!("fraction\tsystem\tn\tap\tspearman");
    for r in &report.summary {
        println!(
            "{}\t{}\t{}\t{:.4}±{:.4}\t{:.4}±{:.4}",
            r.fraction, r.system, r.n, r.ap_mean, r.ap_std, r.spearman_mean, r.spearman_std
        );
    }
    println!("report\t{}", root.display());
    if !report.failures.is_empty() {
        for f in &report.failures {
            eprintln!("failed: {} fraction={:?} seed={}: {}", f.system, f.fraction, f.seed, f.error);
        }
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(seeds: usize, base_seed: u64, epsilon: f64, tolerance: f64, report: Option<&Path>) -> Result<ExitCode> {
    if seeds == 0 {
        return Err(invalid("--seeds must be ≥ 1"));
    }
    if !(epsilon > 0.0 && tolerance > 0.0) {
        return Err(invalid("--epsilon and --tolerance must be positive"));
    }
    let start = std::time::Instant::now();
    let suite = run_grad_suite(&GradSuiteConfig {
        seeds,
        base_seed,
        epsilon,
        tolerance,
    })?;
    println!("op\tmax_rel_error\tchecked\tskipped\tstatus");
    let failing = suite.failures();
    for c in &suite.checks {
        let status = if failing.iter().any(|f| f.op == c.op) { "FAIL" } else { "ok" };
        println!("{}\t{:.3e}\t{}\t{}\t{status}", c.op, c.max_rel_error, c.checked, c.skipped);
    }
    println!("seeds {seeds}, tolerance {tolerance:e}, {:.1?}", start.elapsed());
    if let Some(path) = report {
        std::fs::write(path, serde_json::to_string_pretty(&suite)?)?;
    }
    Ok(if suite.passed() { ExitCode::SUCCESS } else { ExitCode::from(2) })
}

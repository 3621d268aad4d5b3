//! Command-line front end: thin argument handling around the pipeline
//! operations. Exit codes: 0 success, 1 usage error, 2 data error,
//! 3 numeric failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use adlgraph::explain::ExplainConfig;
use adlgraph::model::Checkpoint;
use adlgraph::pipeline::{
    check_compatibility, export_pairs_files, featurize_all, holdout_indices, prepare_from_log,
    prepare_synthetic, run_evaluation, run_explain, run_selfcheck, run_training, select_windows,
    write_jsonl, Holdout, PipelineError, SelectOptions, TrainSettings,
};
use adlgraph::synth::SynthConfig;
use adlgraph::train::SplitSpec;
use adlgraph::WindowsFile;

/// Name of the environment variable that caps the rayon worker count.
const WORKERS_ENV: &str = "ADLGRAPH_WORKERS";

#[derive(Parser)]
#[command(
    name = "adlgraph",
    version,
    about = "Explainable activity recognition over smart-home sensor logs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest a raw sensor log (or generate synthetic data) into a windows file
    Prepare(PrepareArgs),
    /// Train a classifier on a windows file and write checkpoint + reports
    Train(TrainArgs),
    /// Score a checkpoint on a holdout of a windows file
    Evaluate(EvaluateArgs),
    /// Explain predictions: importance scores, subgraphs, and sentences
    Explain(ExplainArgs),
    /// Zip two explanation files into a randomized comparison pair file
    ExportPairs(ExportPairsArgs),
    /// Run the built-in verification battery (gradients, graph oracle, invariants)
    Selfcheck(SelfcheckArgs),
}

#[derive(Args)]
struct PrepareArgs {
    /// Raw sensor log (one event per line)
    #[arg(long, requires = "registry", conflicts_with = "synthetic")]
    log: Option<PathBuf>,
    /// Registry/dataset config JSON (sensors, drops, merges, phrases)
    #[arg(long)]
    registry: Option<PathBuf>,
    /// Generate the built-in synthetic dataset instead of reading a log
    #[arg(long)]
    synthetic: bool,
    /// Output windows file
    #[arg(long)]
    out: PathBuf,
    /// Also write the ingest report JSON here
    #[arg(long)]
    report: Option<PathBuf>,
    /// Window length in seconds
    #[arg(long, default_value_t = 360.0)]
    window_secs: f64,
    /// Fractional overlap between consecutive windows (0 ≤ o < 1)
    #[arg(long, default_value_t = 0.8)]
    overlap: f64,
    /// Synthetic: number of activity classes
    #[arg(long, default_value_t = 3)]
    classes: usize,
    /// Synthetic: windows generated per class
    #[arg(long, default_value_t = 300)]
    windows_per_class: usize,
    /// Synthetic: fraction of events that are noise
    #[arg(long, default_value_t = 0.2)]
    noise_frac: f64,
    /// Synthetic: generator seed
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

/// Optional training knobs loadable from `--config`; command-line flags win.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainConfigFile {
    learning_rate: Option<f64>,
    patience: Option<usize>,
    max_epochs: Option<usize>,
    batch_size: Option<usize>,
    seed: Option<u64>,
    embed_dim: Option<usize>,
    hidden_dim: Option<usize>,
    num_mp_rounds: Option<usize>,
    split_train: Option<f64>,
    split_test: Option<f64>,
    split_validation: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Windows file from `prepare`
    #[arg(long)]
    windows: PathBuf,
    /// Directory for checkpoint.json, CSV reports, and the config echo
    #[arg(long)]
    out_dir: PathBuf,
    /// JSON file with training knobs (flags below override it)
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    /// Message-passing rounds
    #[arg(long)]
    rounds: Option<usize>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    windows: PathBuf,
    /// Which stratified part to score: all, train, test, or validation
    #[arg(long, default_value = "test")]
    holdout: Holdout,
    /// Seed for re-deriving the split (defaults to the checkpoint's seed)
    #[arg(long)]
    split_seed: Option<u64>,
    /// Write the metrics report JSON here
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExplainArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    windows: PathBuf,
    /// Output explanations (JSON lines, one window per line)
    #[arg(long)]
    out: PathBuf,
    /// Which stratified part to draw windows from
    #[arg(long, default_value = "test")]
    holdout: Holdout,
    /// Seed for re-deriving the split (defaults to the checkpoint's seed)
    #[arg(long)]
    split_seed: Option<u64>,
    /// Windows per class (0 = every candidate)
    #[arg(long, default_value_t = 5)]
    per_class: usize,
    /// Keep only windows the model classifies correctly
    #[arg(long)]
    correct_only: bool,
    /// Restrict to this class (repeatable)
    #[arg(long = "class")]
    classes: Vec<String>,
    /// Mask optimization restarts per window
    #[arg(long, default_value_t = 10)]
    runs: usize,
    /// Mask optimization epochs per restart
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    /// Mask optimizer learning rate
    #[arg(long, default_value_t = 0.01)]
    mask_lr: f64,
    /// Sparsity penalty weight
    #[arg(long, default_value_t = 0.005)]
    lambda_size: f64,
    /// Mask entropy penalty weight
    #[arg(long, default_value_t = 1.0)]
    lambda_entropy: f64,
    /// Base seed for mask initialization
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Seed for window selection (defaults to --seed; pin it to explain the
    /// same windows under different mask seeds, e.g. for export-pairs)
    #[arg(long)]
    select_seed: Option<u64>,
    /// Dump a highlighted DOT graph per window into this directory
    #[arg(long)]
    dot_dir: Option<PathBuf>,
}

#[derive(Args)]
struct ExportPairsArgs {
    /// First system's explanations (JSON lines)
    #[arg(long)]
    a: PathBuf,
    /// Second system's explanations over the same windows
    #[arg(long)]
    b: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Seed for the per-line presentation order
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SelfcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random graphs to compare against the brute-force oracle
    #[arg(long, default_value_t = 200)]
    fuzz_cases: usize,
}

fn init_workers() {
    if let Ok(raw) = std::env::var(WORKERS_ENV) {
        match raw.parse::<usize>() {
            Ok(n) if n > 0 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    eprintln!("warning: could not apply {WORKERS_ENV}={n}: {e}");
                }
            }
            _ => eprintln!("warning: ignoring {WORKERS_ENV}={raw} (want a positive integer)"),
        }
    }
}

/// Restores the default SIGPIPE disposition so `adlgraph ... | head` dies
/// quietly like other Unix tools instead of panicking on a closed pipe.
#[cfg(unix)]
fn reset_sigpipe() {
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
}

#[cfg(not(unix))]
fn reset_sigpipe() {}

fn main() -> ExitCode {
    reset_sigpipe();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successes, not usage errors.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    init_workers();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    match cli.command {
        Command::Prepare(args) => {
            if !args.synthetic && args.log.is_none() {
                // A missing input mode is a usage error, not a data error.
                eprintln!("error: prepare needs either --log with --registry, or --synthetic");
                std::process::exit(1);
            }
            prepare(args)
        }
        Command::Train(args) => train(args),
        Command::Evaluate(args) => evaluate(args),
        Command::Explain(args) => explain(args),
        Command::ExportPairs(args) => {
            let n = export_pairs_files(&args.a, &args.b, &args.out, args.seed)?;
            println!("wrote {n} pairs to {}", args.out.display());
            Ok(())
        }
        Command::Selfcheck(args) => selfcheck(args),
    }
}

fn prepare(args: PrepareArgs) -> Result<(), PipelineError> {
    let file = if args.synthetic {
        let config = SynthConfig {
            classes: args.classes,
            windows_per_class: args.windows_per_class,
            noise_frac: args.noise_frac,
            window_secs: args.window_secs,
            seed: args.seed,
        };
        let file = prepare_synthetic(&config);
        println!(
            "generated {} synthetic windows over {} classes ({} sensors)",
            file.windows.len(),
            file.label_names.len(),
            file.registry.len()
        );
        file
    } else {
        let log = args.log.as_ref().expect("checked before dispatch");
        let registry = args.registry.as_ref().expect("clap enforces requires");
        let (file, report) = prepare_from_log(log, registry, args.window_secs, args.overlap)?;
        println!(
            "{} lines: {} events, {} non-binary, {} parse errors",
            report.lines_total,
            report.events_parsed,
            report.non_binary_lines,
            report.parse_errors.len()
        );
        for err in report.parse_errors.iter().take(5) {
            eprintln!("  parse error: {err}");
        }
        println!(
            "{} windows generated, {} kept ({} unlabeled, {} empty dropped)",
            report.segment.windows_generated,
            report.segment.kept,
            report.segment.dropped_unlabeled,
            report.segment.dropped_no_events
        );
        for (name, count) in &report.class_counts {
            println!("  {count:>6}  {name}");
        }
        if let Some(path) = &args.report {
            std::fs::write(path, serde_json::to_string_pretty(&report)?).map_err(|source| {
                PipelineError::Io {
                    path: path.clone(),
                    source,
                }
            })?;
        }
        file
    };
    file.save(&args.out)?;
    println!("windows file written to {}", args.out.display());
    Ok(())
}

fn load_train_config(path: &PathBuf) -> Result<TrainConfigFile, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(|source| PipelineError::Io {
        path: path.clone(),
        source,
    })?;
    serde_json::from_str(&text).map_err(PipelineError::Json)
}

fn train(args: TrainArgs) -> Result<(), PipelineError> {
    let file = WindowsFile::load(&args.windows)?;
    let from_file = match &args.config {
        Some(path) => load_train_config(path)?,
        None => TrainConfigFile::default(),
    };
    // Defaults, then the config file, then flags.
    let seed = args.seed.or(from_file.seed).unwrap_or(0);
    let mut settings = TrainSettings::for_file(&file, seed);
    let apply = |flag: Option<f64>, file_val: Option<f64>, slot: &mut f64| {
        if let Some(v) = flag.or(file_val) {
            *slot = v;
        }
    };
    let apply_usize = |flag: Option<usize>, file_val: Option<usize>, slot: &mut usize| {
        if let Some(v) = flag.or(file_val) {
            *slot = v;
        }
    };
    apply(
        args.learning_rate,
        from_file.learning_rate,
        &mut settings.train.learning_rate,
    );
    apply_usize(args.patience, from_file.patience, &mut settings.train.patience);
    apply_usize(args.max_epochs, from_file.max_epochs, &mut settings.train.max_epochs);
    apply_usize(args.batch_size, from_file.batch_size, &mut settings.train.batch_size);
    apply_usize(args.embed_dim, from_file.embed_dim, &mut settings.model.embed_dim);
    apply_usize(args.hidden_dim, from_file.hidden_dim, &mut settings.model.hidden_dim);
    apply_usize(args.rounds, from_file.num_mp_rounds, &mut settings.model.num_mp_rounds);
    apply(None, from_file.split_train, &mut settings.split.train);
    apply(None, from_file.split_test, &mut settings.split.test);
    apply(None, from_file.split_validation, &mut settings.split.validation);
    settings.split.seed = seed;

    println!(
        "training on {} windows, {} classes, {} sensors (embed {}, hidden {}, {} rounds, lr {}, batch {}, seed {seed})",
        file.windows.len(),
        file.label_names.len(),
        file.registry.len(),
        settings.model.embed_dim,
        settings.model.hidden_dim,
        settings.model.num_mp_rounds,
        settings.train.learning_rate,
        settings.train.batch_size,
    );
    let artifacts = run_training(&file, &settings, &args.out_dir)?;
    for warning in &artifacts.summary.warnings {
        eprintln!("warning: {warning}");
    }
    println!(
        "{} epochs ({}), best validation loss {:.6} at epoch {}",
        artifacts.summary.epochs_run,
        if artifacts.summary.stopped_early {
            "stopped early"
        } else {
            "hit the epoch cap"
        },
        artifacts.summary.best_val_loss,
        artifacts.summary.best_epoch,
    );
    match &artifacts.metrics {
        Some(m) => println!(
            "test: accuracy {:.4}, weighted F1 {:.4} over {} windows",
            m.accuracy, m.weighted_f1, artifacts.summary.test_size
        ),
        None => println!("test set empty; no metrics (see warnings)"),
    }
    println!("artifacts written to {}", args.out_dir.display());
    Ok(())
}

fn evaluate(args: EvaluateArgs) -> Result<(), PipelineError> {
    let (report, n) = run_evaluation(&args.checkpoint, &args.windows, args.holdout, args.split_seed)?;
    println!(
        "{} windows ({}): accuracy {:.4}, weighted F1 {:.4}",
        n, args.holdout, report.accuracy, report.weighted_f1
    );
    println!("class                     support  precision  recall   f1");
    for c in &report.per_class {
        println!(
            "{:<25} {:>7}  {:>9.4}  {:>6.4}  {:>6.4}",
            c.label, c.support, c.precision, c.recall, c.f1
        );
    }
    if let Some(path) = &args.out {
        std::fs::write(path, serde_json::to_string_pretty(&report)?).map_err(|source| {
            PipelineError::Io {
                path: path.clone(),
                source,
            }
        })?;
        println!("metrics written to {}", path.display());
    }
    Ok(())
}

fn explain(args: ExplainArgs) -> Result<(), PipelineError> {
    let (params, label_names, registry, ckpt_seed) =
        Checkpoint::load(&args.checkpoint)?.into_params()?;
    let file = WindowsFile::load(&args.windows)?;
    check_compatibility(&registry, &label_names, &file)?;
    let feats = featurize_all(&file)?;
    let split = SplitSpec::new(args.split_seed.unwrap_or(ckpt_seed));
    let pool = holdout_indices(&file, args.holdout, &split)?;
    let options = SelectOptions {
        per_class: args.per_class,
        correct_only: args.correct_only,
        classes: args.classes.clone(),
        seed: args.select_seed.unwrap_or(args.seed),
    };
    let selection = select_windows(&file, &feats, &params, &pool, &options)?;
    println!(
        "explaining {} of {} {} windows",
        selection.len(),
        pool.len(),
        args.holdout
    );
    let config = ExplainConfig {
        runs: args.runs,
        epochs: args.epochs,
        learning_rate: args.mask_lr,
        lambda_size: args.lambda_size,
        lambda_entropy: args.lambda_entropy,
        base_seed: args.seed,
    };
    let records = run_explain(
        &params,
        &label_names,
        &registry,
        &feats,
        &selection,
        &config,
        args.dot_dir.as_deref(),
    )?;
    for r in &records {
        let mark = if r.correct { "" } else { " [misclassified]" };
        println!("window {} ({} @ {:.2}){}: {}", r.window_id, r.predicted, r.probability, mark, r.text);
    }
    write_jsonl(&records, &args.out)?;
    println!("{} explanations written to {}", records.len(), args.out.display());
    Ok(())
}

fn selfcheck(args: SelfcheckArgs) -> Result<(), PipelineError> {
    let report = run_selfcheck(args.seed, args.fuzz_cases);
    for check in &report.checks {
        let status = if check.passed { "PASS" } else { "FAIL" };
        println!("{status}  {:<32} {}", check.name, check.detail);
    }
    if report.all_passed() {
        println!("selfcheck passed ({} checks)", report.checks.len());
        Ok(())
    } else {
        // A failed verification battery is a numeric failure by definition.
        eprintln!("selfcheck FAILED");
        std::process::exit(3);
    }
}

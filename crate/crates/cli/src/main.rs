//! `tracetail` — reproducible tail-sampling experiments from the shell.
//!
//! Five subcommands cover the whole loop: `synth` emits a seeded span
//! corpus, `bootstrap` trains the cluster model from fault-free spans,
//! `run` streams spans through the model and logs keep/drop decisions,
//! `evaluate` scores a decision log against ground-truth labels, and
//! `inspect` dumps a saved model. Every random choice flows from an
//! explicit seed flag, so a run's outputs are a pure function of its
//! inputs and flags.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error (unreadable input,
//! corrupt state). Progress goes to stderr; machine output goes only to
//! declared files or stdout.

use std::fs::File;
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use tracetail_core::clustering::{
    ClockMode, SamplerParams, SamplerState, DEFAULT_ALPHA, DEFAULT_BUDGET, DEFAULT_EPSILON,
    DEFAULT_LAMBDA, DEFAULT_MIN_PTS,
};
use tracetail_core::evalkit::synth::{generate, GeneratorConfig};
use tracetail_core::evalkit::{evaluate, read_decision_log, uniform_baseline, LabelSet};
use tracetail_core::pipeline::{
    load_state, run_bootstrap, run_stream, save_state, PersistedState, PipelineConfig,
    DEFAULT_COMPLETION_TIMEOUT_US,
};
use tracetail_core::sketch::{SketchHasher, DEFAULT_P_MAX, DEFAULT_SKETCH_LENGTH};

#[derive(Parser)]
#[command(
    name = "tracetail",
    version,
    about = "Tail-based trace sampler: keep the anomalies, budget the routine",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic span corpus with labeled anomalies
    Synth(SynthArgs),
    /// Build a cluster model from a fault-free training stream
    Bootstrap(BootstrapArgs),
    /// Stream spans through a model, logging a keep/drop decision per trace
    Run(RunArgs),
    /// Score a decision log against ground-truth labels
    Evaluate(EvaluateArgs),
    /// Dump a saved model: parameters, counters, cluster stats
    Inspect(InspectArgs),
}

/// Sketching knobs; shared by `bootstrap` and `run --empty-state`.
#[derive(Args)]
struct ModelFlags {
    /// Sketch length L: signature bits / hash functions per trace
    #[arg(long, default_value_t = DEFAULT_SKETCH_LENGTH)]
    sketch_length: usize,

    /// Max tokens hashed per call path (|p|_max); longer paths are chunked
    #[arg(long, default_value_t = DEFAULT_P_MAX)]
    p_max: usize,

    /// Seed for the hash coefficient matrix
    #[arg(long, default_value_t = 42)]
    hasher_seed: u64,

    /// Leave each path's first token out of the hash (compatibility mode)
    #[arg(long)]
    skip_first_token: bool,
}

/// Clustering and budget knobs; shared by `bootstrap` and `run --empty-state`.
#[derive(Args)]
struct SamplerFlags {
    /// Sampling budget B: target keep probability for recurring traces
    #[arg(long, default_value_t = DEFAULT_BUDGET)]
    budget: f64,

    /// Decay rate λ: cluster weights halve every 1/λ ticks
    #[arg(long, default_value_t = DEFAULT_LAMBDA)]
    lambda: f64,

    /// Promotion threshold α: an outlier cluster turns potential at weight ≥ α
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    alpha: f64,

    /// Merge radius ε between a sketch and a cluster center (unit embedding)
    #[arg(long, default_value_t = DEFAULT_EPSILON)]
    epsilon: f64,

    /// Seconds of trace time per decay tick (timestamp clock only)
    #[arg(long, default_value_t = 1.0)]
    time_unit: f64,

    /// Seed for the budget coin flips
    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// What advances the decay clock
    #[arg(long, value_enum, default_value_t = ClockArg::Timestamp)]
    clock: ClockArg,

    /// Suppress rare-branch keeps while the running rate exceeds the budget
    #[arg(long)]
    hard_budget_cap: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum ClockArg {
    /// Trace root timestamps, scaled by --time-unit
    Timestamp,
    /// One tick per observed trace, timestamps ignored
    Logical,
}

impl From<ClockArg> for ClockMode {
    fn from(c: ClockArg) -> ClockMode {
        match c {
            ClockArg::Timestamp => ClockMode::Timestamp,
            ClockArg::Logical => ClockMode::Logical,
        }
    }
}

impl SamplerFlags {
    fn params(&self) -> SamplerParams {
        SamplerParams {
            budget: self.budget,
            lambda: self.lambda,
            alpha: self.alpha,
            epsilon: self.epsilon,
            time_unit: self.time_unit,
            rng_seed: self.seed,
        }
    }
}

#[derive(Args)]
struct SynthArgs {
    /// Directory for train.jsonl, test.jsonl, labels.jsonl (created if absent)
    #[arg(long)]
    out_dir: PathBuf,

    /// Corpus seed; same seed and flags reproduce the files byte for byte
    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Fault-free traces in the training split
    #[arg(long, default_value_t = 1_000)]
    train_count: usize,

    /// Traces in the test split
    #[arg(long, default_value_t = 50_000)]
    test_count: usize,

    /// Fraction of test traces given an injected fault (exact quota)
    #[arg(long, default_value_t = 0.01)]
    anomaly_fraction: f64,

    /// Mean inter-trace arrival gap, microseconds (exponential)
    #[arg(long, default_value_t = 50_000.0)]
    mean_gap_us: f64,

    /// Log10 jitter of span durations around their template means
    #[arg(long, default_value_t = 0.12)]
    sigma_log10: f64,

    /// Probability that a clean test trace uses a topology absent from training
    #[arg(long, default_value_t = 0.005)]
    unseen_weight: f64,
}

#[derive(Args)]
struct BootstrapArgs {
    /// Fault-free span JSONL to train on; "-" reads stdin
    #[arg(long, default_value = "-")]
    input: String,

    /// Where to write the model state file
    #[arg(long)]
    state: PathBuf,

    #[command(flatten)]
    model: ModelFlags,

    #[command(flatten)]
    sampler: SamplerFlags,

    /// Neighborhood radius for the initial density scan [default: 2ε]
    #[arg(long)]
    dbscan_eps: Option<f64>,

    /// Neighbors (self included) that make a point dense in the initial scan
    #[arg(long, default_value_t = DEFAULT_MIN_PTS)]
    min_pts: usize,
}

#[derive(Args)]
struct RunArgs {
    /// Span JSONL to stream; "-" reads stdin
    #[arg(long, default_value = "-")]
    input: String,

    /// Model state file from a previous bootstrap or run
    #[arg(long, conflicts_with = "empty_state")]
    state: Option<PathBuf>,

    /// Start with no clusters instead of loading --state; the model is
    /// built from the flags below
    #[arg(long)]
    empty_state: bool,

    /// Where to persist the updated model [default: the --state path]
    #[arg(long)]
    save_state: Option<PathBuf>,

    /// Decision log output (JSONL, one line per trace); "-" writes stdout
    #[arg(long, default_value = "-")]
    decisions: PathBuf,

    /// Copy every span line of each kept trace here; dropped if omitted
    #[arg(long)]
    sampled: Option<PathBuf>,

    /// Stream-time silence, microseconds, after which a trace is complete
    #[arg(long, default_value_t = DEFAULT_COMPLETION_TIMEOUT_US)]
    completion_timeout_us: u64,

    #[command(flatten)]
    model: ModelFlags,

    #[command(flatten)]
    sampler: SamplerFlags,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Decision log from a run; "-" reads stdin
    #[arg(long, default_value = "-")]
    decisions: String,

    /// Ground-truth labels JSONL from synth
    #[arg(long)]
    labels: PathBuf,

    /// Report file [default: stdout]
    #[arg(long)]
    out: Option<PathBuf>,

    /// Also score a seeded uniform head-sampling baseline at --budget
    #[arg(long)]
    uniform_seed: Option<u64>,

    /// Keep probability for the uniform baseline
    #[arg(long, default_value_t = DEFAULT_BUDGET)]
    budget: f64,
}

#[derive(Args)]
struct InspectArgs {
    /// Model state file to dump
    #[arg(long)]
    state: PathBuf,

    /// List every cluster (id, role, weight, radius) instead of counts only
    #[arg(long)]
    clusters: bool,
}

/// Failures split by who holds the fix: the command line or the data.
enum CliError {
    Usage(String),
    Data(String),
}

impl From<tracetail_core::Error> for CliError {
    fn from(e: tracetail_core::Error) -> CliError {
        CliError::Data(e.to_string())
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> CliError {
        CliError::Data(e.to_string())
    }
}

fn open_input(path: &str) -> Result<Box<dyn Read>, CliError> {
    if path == "-" {
        return Ok(Box::new(io::stdin()));
    }
    let file = File::open(path)
        .map_err(|e| CliError::Data(format!("cannot open input {path}: {e}")))?;
    Ok(Box::new(file))
}

fn create_output(path: &Path) -> Result<BufWriter<File>, CliError> {
    let file = File::create(path)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", path.display())))?;
    Ok(BufWriter::new(file))
}

fn print_json(value: &impl serde::Serialize, out: Option<&Path>) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Data(format!("cannot serialize report: {e}")))?;
    match out {
        Some(path) => {
            let mut w = create_output(path)?;
            writeln!(w, "{text}")?;
            w.flush()?;
        }
        None => println!("{text}"),
    }
    Ok(())
}

fn cmd_synth(args: &SynthArgs) -> Result<(), CliError> {
    let cfg = GeneratorConfig {
        train_count: args.train_count,
        test_count: args.test_count,
        anomaly_fraction: args.anomaly_fraction,
        mean_gap_us: args.mean_gap_us,
        sigma_log10: args.sigma_log10,
        unseen_weight: args.unseen_weight,
        ..GeneratorConfig::default()
    };
    eprintln!(
        "synth: seed {} -> {} train + {} test traces",
        args.seed, args.train_count, args.test_count
    );
    let dataset = generate(&cfg, args.seed)?;
    std::fs::create_dir_all(&args.out_dir)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", args.out_dir.display())))?;
    let train = args.out_dir.join("train.jsonl");
    let test = args.out_dir.join("test.jsonl");
    let labels = args.out_dir.join("labels.jsonl");
    dataset.write_files(&train, &test, &labels)?;
    eprintln!(
        "synth: wrote {} ({} labeled anomalies)",
        args.out_dir.display(),
        dataset.labels.len()
    );
    print_json(
        &serde_json::json!({
            "train_lines": dataset.train.len(),
            "test_lines": dataset.test.len(),
            "labeled": dataset.labels.len(),
            "dir": args.out_dir.display().to_string(),
        }),
        None,
    )
}

fn pipeline_config(
    model: &ModelFlags,
    sampler: &SamplerFlags,
    dbscan_eps: Option<f64>,
    min_pts: usize,
) -> PipelineConfig {
    PipelineConfig {
        sketch_length: model.sketch_length,
        p_max: model.p_max,
        hasher_seed: model.hasher_seed,
        skip_first_token: model.skip_first_token,
        params: sampler.params(),
        clock: sampler.clock.into(),
        dbscan_eps,
        min_pts,
        completion_timeout_us: Some(DEFAULT_COMPLETION_TIMEOUT_US),
        hard_budget_cap: sampler.hard_budget_cap,
    }
}

fn cmd_bootstrap(args: &BootstrapArgs) -> Result<(), CliError> {
    let cfg = pipeline_config(&args.model, &args.sampler, args.dbscan_eps, args.min_pts);
    eprintln!("bootstrap: reading {}", args.input);
    let (hasher, sampler, report) = run_bootstrap(open_input(&args.input)?, &cfg)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    save_state(&args.state, &hasher, &sampler)?;
    eprintln!(
        "bootstrap: {} spans, {} traces -> {} PMCs + {} OMCs; state {}",
        report.spans,
        report.traces,
        report.pmcs,
        report.omcs,
        args.state.display()
    );
    print_json(&report, None)
}

fn cmd_run(args: &RunArgs) -> Result<(), CliError> {
    let (mut hasher, mut sampler) = match (&args.state, args.empty_state) {
        (Some(path), _) => {
            if !path.exists() {
                return Err(CliError::Usage(format!(
                    "state file {} not found; bootstrap first or pass --empty-state",
                    path.display()
                )));
            }
            load_state(path)?
        }
        (None, true) => {
            let mut sampler =
                SamplerState::new_empty(args.sampler.params(), args.sampler.clock.into())?;
            sampler.hard_budget_cap = args.sampler.hard_budget_cap;
            let hasher = SketchHasher::new(
                args.model.sketch_length,
                args.model.p_max,
                args.model.hasher_seed,
            )?
            .with_skip_first_token(args.model.skip_first_token);
            (hasher, sampler)
        }
        (None, false) => {
            return Err(CliError::Usage(
                "run needs a model: pass --state FILE from a previous bootstrap, \
                 or --empty-state to start cold"
                    .to_string(),
            ));
        }
    };

    let decisions_to_stdout = args.decisions.to_str() == Some("-");
    eprintln!("run: reading {}", args.input);
    let input = open_input(&args.input)?;
    let sampled: Box<dyn Write> = match &args.sampled {
        Some(path) => Box::new(create_output(path)?),
        None => Box::new(io::sink()),
    };
    let report = if decisions_to_stdout {
        run_stream(
            input,
            &mut hasher,
            &mut sampler,
            Some(args.completion_timeout_us),
            io::stdout().lock(),
            sampled,
        )?
    } else {
        run_stream(
            input,
            &mut hasher,
            &mut sampler,
            Some(args.completion_timeout_us),
            create_output(&args.decisions)?,
            sampled,
        )?
    };

    if let Some(path) = args.save_state.as_ref().or(args.state.as_ref()) {
        save_state(path, &hasher, &sampler)?;
        eprintln!("run: state {}", path.display());
    }
    eprintln!(
        "run: {} spans, {} traces, {} sampled ({} rejected spans, peak buffer {})",
        report.spans, report.traces, report.sampled, report.rejected_spans,
        report.max_buffered_spans
    );
    if decisions_to_stdout {
        // the decision log owns stdout; the report stays on stderr
        eprintln!(
            "run: report {}",
            serde_json::to_string(&report).map_err(|e| CliError::Data(e.to_string()))?
        );
        Ok(())
    } else {
        print_json(&report, None)
    }
}

fn cmd_evaluate(args: &EvaluateArgs) -> Result<(), CliError> {
    let decisions = read_decision_log(open_input(&args.decisions)?)?;
    let labels = LabelSet::from_jsonl_file(&args.labels)?;
    let report = evaluate(&decisions, &labels);
    eprintln!(
        "evaluate: {} decisions, {} labels -> coverage {:.4}, rate {:.4}",
        decisions.len(),
        labels.len(),
        report.coverage,
        report.sampling_rate
    );
    let mut value = serde_json::to_value(&report)
        .map_err(|e| CliError::Data(format!("cannot serialize report: {e}")))?;
    if let Some(seed) = args.uniform_seed {
        let ids: Vec<String> = decisions.iter().map(|d| d.trace_id.clone()).collect();
        let picked = uniform_baseline(&ids, args.budget, seed)?;
        let captured = labels.iter().filter(|(id, _)| picked.contains(*id)).count();
        let coverage = if labels.is_empty() {
            1.0
        } else {
            captured as f64 / labels.len() as f64
        };
        value["uniform"] = serde_json::json!({
            "seed": seed,
            "budget": args.budget,
            "picked": picked.len(),
            "labeled_captured": captured,
            "coverage": coverage,
        });
    }
    print_json(&value, args.out.as_deref())
}

fn cmd_inspect(args: &InspectArgs) -> Result<(), CliError> {
    let file = File::open(&args.state)
        .map_err(|e| CliError::Data(format!("cannot open {}: {e}", args.state.display())))?;
    let state: PersistedState = serde_json::from_reader(io::BufReader::new(file))
        .map_err(|e| CliError::Data(format!("corrupt state file: {e}")))?;
    let s = &state.sampler;
    let pmcs = s.clusters.iter().filter(|c| c.role == tracetail_core::clustering::Role::Pmc);
    let omcs = s.clusters.iter().filter(|c| c.role == tracetail_core::clustering::Role::Omc);
    let mut value = serde_json::json!({
        "version": state.version,
        "sketch_length": state.hasher.sketch_length,
        "p_max": state.hasher.p_max,
        "hasher_seed": state.hasher.seed,
        "skip_first_token": state.hasher.skip_first_token,
        "registry_tokens": state.hasher.tokens.len(),
        "params": s.params,
        "clock": s.clock,
        "now": s.now,
        "next_prune_at": s.next_prune_at,
        "pmcs": pmcs.count(),
        "omcs": omcs.count(),
        "counters": s.counters,
    });
    if args.clusters {
        let rows: Vec<serde_json::Value> = s
            .clusters
            .iter()
            .map(|c| {
                serde_json::json!({
                    "id": c.id,
                    "role": c.role,
                    "weight": c.w,
                    "radius": c.radius(),
                    "last_update": c.last_update,
                })
            })
            .collect();
        value["clusters"] = serde_json::Value::Array(rows);
    }
    print_json(&value, None)
}

fn dispatch(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Bootstrap(args) => cmd_bootstrap(args),
        Command::Run(args) => cmd_run(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Inspect(args) => cmd_inspect(args),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            // clap reserves 2 for usage errors; here 2 means data error
            eprint!("{e}");
            return ExitCode::from(1);
        }
        Err(e) => {
            // --help / --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Data(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

//! `emobench` command-line interface.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use emobench_core::dataset::{class_histogram, load_csv, LabelFormat};
use emobench_core::gateway::mock::MockBehavior;
use emobench_core::gateway::server::{serve, MockServerState};
use emobench_core::metrics::{Averaging, DeltaKind};
use emobench_core::report::{self, compare_runs, deltas_csv, percent, Format};
use emobench_core::runner::{
    self, plan_from_parts, ExecuteOptions, RunConfig, RunError, RunOutput, RunRecord, Subsample,
};
use emobench_core::taxonomy::{entropy, Emotion};

const EXIT_FAILURE: u8 = 1;
const EXIT_VALIDATION: u8 = 2;
const EXIT_ABORTED: u8 = 3;

#[derive(Parser)]
#[command(
    name = "emobench",
    version,
    about = "Benchmark emotion recognition across models, prompt strategies and label groupings"
)]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Plan and execute the grid described by a configuration file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Evaluate a stratified subsample of this many samples.
        #[arg(long)]
        subsample: Option<usize>,
        /// Seed of the subsample.
        #[arg(long, requires = "subsample", default_value_t = 0)]
        seed: u64,
    },
    /// Continue an interrupted run, re-submitting only missing samples.
    Resume { run_dir: PathBuf },
    /// Re-emit the report files of a run into <run_dir>/report.
    Report {
        run_dir: PathBuf,
        /// Only this family of files; all of them when omitted.
        #[arg(long)]
        format: Option<Format>,
    },
    /// Difference a − b between the results of two runs, as CSV.
    Compare {
        a: PathBuf,
        b: PathBuf,
        /// model-family, prompt-pair or grouping-pair.
        #[arg(long)]
        kind: DeltaKind,
        /// Write the table here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a labelled CSV and print its class distribution.
    ValidateDataset {
        path: PathBuf,
        #[arg(long, default_value = "auto")]
        label_format: String,
    },
    /// Serve a mock model over the chat-completions and generate protocols.
    MockServe {
        /// oracle, fixed:<label>, malformed:<rate>[:<seed>] or flaky:<rate>[:<seed>].
        #[arg(long)]
        behavior: MockBehavior,
        /// Corpus whose gold labels the mock knows.
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Require this environment variable's value as bearer token.
        #[arg(long)]
        api_key_env: Option<String>,
    },
}

struct Failure {
    code: u8,
    message: String,
}

impl From<RunError> for Failure {
    fn from(e: RunError) -> Self {
        let code = if e.is_validation() {
            EXIT_VALIDATION
        } else {
            EXIT_FAILURE
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn fail(code: u8, message: impl Into<String>) -> Failure {
    Failure {
        code,
        message: message.into(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => tracing::Level::WARN,
        1 => tracing::Level::INFO,
        _ => tracing::Level::DEBUG,
    };
    tracing_subscriber::fmt()
        .with_max_level(level)
        .with_writer(std::io::stderr)
        .init();

    match dispatch(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn dispatch(command: Command) -> Result<u8, Failure> {
    match command {
        Command::Run {
            config,
            subsample,
            seed,
        } => run(&config, subsample.map(|n| Subsample { n, seed })),
        Command::Resume { run_dir } => {
            let out = runner::resume(&run_dir, &ExecuteOptions::default())?;
            Ok(summarize(&out, &run_dir))
        }
        Command::Report { run_dir, format } => {
            let record = RunRecord::load(&run_dir)?;
            let dir = run_dir.join("report");
            let written = match format {
                Some(f) => report::write_format(&record, &dir, f),
                None => report::write_all(&record, &dir),
            }
            .map_err(|e| fail(EXIT_FAILURE, format!("{}: {e}", dir.display())))?;
            for path in written {
                println!("{}", path.display());
            }
            Ok(0)
        }
        Command::Compare { a, b, kind, out } => {
            let (ra, rb) = (RunRecord::load(&a)?, RunRecord::load(&b)?);
            let rows = compare_runs(&ra, &rb, kind).map_err(|e| fail(EXIT_VALIDATION, e.to_string()))?;
            let table = deltas_csv(&rows);
            match out {
                Some(path) => {
                    std::fs::write(&path, table).map_err(|e| fail(EXIT_FAILURE, format!("{}: {e}", path.display())))?
                }
                None => print!("{table}"),
            }
            Ok(0)
        }
        Command::ValidateDataset { path, label_format } => validate_dataset(&path, &label_format),
        Command::MockServe {
            behavior,
            dataset,
            port,
            host,
            api_key_env,
        } => mock_serve(behavior, &dataset, &host, port, api_key_env.as_deref()),
    }
}

fn run(config_path: &Path, subsample: Option<Subsample>) -> Result<u8, Failure> {
    let text = std::fs::read_to_string(config_path)
        .map_err(|e| fail(EXIT_VALIDATION, format!("{}: {e}", config_path.display())))?;
    let mut config: RunConfig = serde_json::from_str(&text).map_err(|e| {
        fail(
            EXIT_VALIDATION,
            format!("invalid configuration {}: {e}", config_path.display()),
        )
    })?;
    if subsample.is_some() {
        config.dataset.subsample = subsample;
    }
    let base = match config_path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let plan = plan_from_parts(config, &base)?;
    eprintln!(
        "running {} cells over {} backend(s) into {}",
        plan.cells().len(),
        plan.backends.len(),
        plan.run_dir.display()
    );
    let out = runner::execute(&plan, &ExecuteOptions::default())?;
    Ok(summarize(&out, &plan.run_dir))
}

fn summarize(out: &RunOutput, run_dir: &Path) -> u8 {
    let record = &out.record;
    println!(
        "{:<10} {:<16} {:>2} {:>8} {:>8} {:>9} {:>8} {:>8}",
        "strategy", "model", "k", "accuracy", "recall", "precision", "f_score", "failed"
    );
    for row in report::metric_rows(record, Averaging::Macro) {
        let m = &row.metrics;
        println!(
            "{:<10} {:<16} {:>2} {:>8} {:>8} {:>9} {:>8} {:>8}",
            row.strategy.name(),
            row.model,
            row.k,
            percent(m.accuracy),
            percent(m.recall),
            percent(m.precision),
            percent(m.f_score),
            percent(m.failure_rate)
        );
    }
    for cell in &record.cells {
        if let runner::CellStatus::Aborted { reason } = &cell.status {
            eprintln!(
                "aborted: {} {} k{}: {reason}",
                cell.backend,
                cell.strategy.name(),
                cell.k
            );
        }
    }
    println!("report: {}", run_dir.join("report").display());
    if record.aborted_cells() > 0 {
        EXIT_ABORTED
    } else {
        0
    }
}

fn validate_dataset(path: &Path, label_format: &str) -> Result<u8, Failure> {
    let format: LabelFormat = serde_json::from_value(serde_json::Value::String(label_format.into())).map_err(|_| {
        fail(
            EXIT_VALIDATION,
            format!("unknown label format `{label_format}` (integer-coded, name-coded, auto)"),
        )
    })?;
    let corpus = load_csv(path, format).map_err(|e| fail(EXIT_VALIDATION, format!("{}: {e}", path.display())))?;
    let hist = class_histogram(&corpus.samples);
    println!("{} samples", corpus.samples.len());
    for e in Emotion::ALL {
        println!("  {:<9} {}", e.name(), hist.count(e.name()));
    }
    if let Ok(h) = entropy(&hist) {
        println!("entropy: {h:.4} bits");
    }
    for err in &corpus.row_errors {
        eprintln!("line {}: {}", err.line, err.message);
    }
    if corpus.samples.is_empty() {
        return Err(fail(EXIT_VALIDATION, "no usable samples"));
    }
    if !corpus.row_errors.is_empty() {
        eprintln!("{} row(s) rejected", corpus.row_errors.len());
        return Ok(EXIT_VALIDATION);
    }
    Ok(0)
}

fn mock_serve(
    behavior: MockBehavior,
    dataset: &Path,
    host: &str,
    port: u16,
    api_key_env: Option<&str>,
) -> Result<u8, Failure> {
    let samples = load_csv(dataset, LabelFormat::Auto)
        .map_err(|e| fail(EXIT_VALIDATION, format!("{}: {e}", dataset.display())))?
        .samples;
    let mut state = MockServerState::new(behavior, &samples).map_err(|e| fail(EXIT_VALIDATION, e))?;
    if let Some(var) = api_key_env {
        let key =
            std::env::var(var).map_err(|_| fail(EXIT_VALIDATION, format!("environment variable {var} is not set")))?;
        state = state.with_api_key(key);
    }
    let runtime = tokio::runtime::Runtime::new().map_err(|e| fail(EXIT_FAILURE, e.to_string()))?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind((host, port))
            .await
            .map_err(|e| fail(EXIT_FAILURE, format!("cannot listen on {host}:{port}: {e}")))?;
        let addr = listener.local_addr().map_err(|e| fail(EXIT_FAILURE, e.to_string()))?;
        println!("listening on http://{addr}");
        use std::io::Write;
        let _ = std::io::stdout().flush();
        serve(listener, Arc::new(state))
            .await
            .map_err(|e| fail(EXIT_FAILURE, e.to_string()))?;
        Ok(0)
    })
}

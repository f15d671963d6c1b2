//! Configuration-driven execution of the (backend × strategy × scheme) grid.
//!
//! A run directory holds the resolved plan (`plan.json`), its fingerprint,
//! an append-only prediction log (`predictions.jsonl`), the reply cache and,
//! once finished, `record.json`, `stats.json` and the `report/` directory.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::{self, class_histogram, filter_for_scheme, LabelFormat, Sample, SplitSpec};
use crate::gateway::{
    BackendConfig, Gateway, GatewayError, HealthStatus, MockBackend, MockBehavior, Protocol, ResponseCache,
    RetryPolicy, TransportError,
};
use crate::metrics::{compute, Averaging, ConfusionMatrix, MetricSet, MetricsError, ScoringMode};
use crate::normalize::{CleanupRules, Normalizer, ParseOutcome, SynonymDictionary};
use crate::prompt::{DialectKind, ModelDialect, PromptEngine, PromptStrategy};
use crate::taxonomy::{scheme_for, Emotion, Involution};

pub const PLAN_FILE: &str = "plan.json";
pub const FINGERPRINT_FILE: &str = "fingerprint";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const RECORD_FILE: &str = "record.json";
pub const STATS_FILE: &str = "stats.json";

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0}")]
    FingerprintMismatch(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Dataset(#[from] dataset::DatasetError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("corrupt run state in {path}: {message}")]
    State { path: String, message: String },
}

impl RunError {
    /// True for errors caused by the user's input rather than the environment.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            RunError::Config(_)
                | RunError::FingerprintMismatch(_)
                | RunError::Dataset(_)
                | RunError::Gateway(GatewayError::InvalidConfig { .. } | GatewayError::MissingKey { .. })
        )
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    /// General-purpose model prompted with instructions.
    #[default]
    Llm,
    /// Fine-tuned classifier.
    Pre,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Llm => "llm",
            Family::Pre => "pre",
        }
    }
}

fn default_max_new_tokens() -> u32 {
    64
}

fn default_timeout_secs() -> u64 {
    60
}

fn default_dialect() -> DialectKind {
    DialectKind::PlainInstruct
}

/// One backend entry of the configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendSpec {
    pub name: String,
    pub protocol: Protocol,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_url: Option<String>,
    #[serde(default)]
    pub model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auth_env: Option<String>,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_new_tokens")]
    pub max_new_tokens: u32,
    #[serde(default)]
    pub use_tools: bool,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate_limit_rps: Option<f64>,
    #[serde(default = "default_dialect")]
    pub dialect: DialectKind,
    #[serde(default)]
    pub family: Family,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mock: Option<MockBehavior>,
}

impl BackendSpec {
    pub fn backend_config(&self) -> BackendConfig {
        BackendConfig {
            name: self.name.clone(),
            protocol: self.protocol,
            base_url: self.base_url.clone(),
            model: self.model.clone(),
            auth_env: self.auth_env.clone(),
            temperature: self.temperature,
            max_new_tokens: self.max_new_tokens,
            use_tools: self.use_tools,
            timeout_secs: self.timeout_secs,
            rate_limit_rps: self.rate_limit_rps,
        }
    }

    pub fn dialect(&self) -> ModelDialect {
        ModelDialect {
            kind: self.dialect,
            name: self.name.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Subsample {
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub path: PathBuf,
    #[serde(default)]
    pub label_format: LabelFormat,
    /// When absent the whole corpus is evaluated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subsample: Option<Subsample>,
}

fn default_parallelism() -> usize {
    8
}

/// The configuration file as written by the user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub backends: Vec<BackendSpec>,
    pub strategies: Vec<String>,
    pub schemes: Vec<usize>,
    #[serde(default)]
    pub policy: RetryPolicy,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default)]
    pub scoring_mode: ScoringMode,
    pub run_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub involution: Option<Involution>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synonyms: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub cleanup_rules: BTreeMap<DialectKind, PathBuf>,
    /// Keys are `<dialect>/<strategy>`.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub templates: BTreeMap<String, PathBuf>,
}

/// A validated configuration with every path made absolute and every input
/// file hashed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub dataset: DatasetConfig,
    pub dataset_sha256: String,
    pub backends: Vec<BackendSpec>,
    pub strategies: Vec<PromptStrategy>,
    pub schemes: Vec<usize>,
    pub policy: RetryPolicy,
    pub parallelism: usize,
    pub scoring_mode: ScoringMode,
    pub run_dir: PathBuf,
    pub involution: Involution,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synonyms: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub cleanup_rules: BTreeMap<DialectKind, PathBuf>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub templates: BTreeMap<String, PathBuf>,
    /// SHA-256 of every auxiliary input file, keyed by role.
    #[serde(default)]
    pub asset_sha256: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellKey {
    pub backend_index: usize,
    pub strategy: PromptStrategy,
    pub k: usize,
}

impl ExperimentPlan {
    /// Grid cells in execution order. Inverse prompts only run with six classes.
    pub fn cells(&self) -> Vec<CellKey> {
        let mut out = Vec::new();
        for backend_index in 0..self.backends.len() {
            for &strategy in &self.strategies {
                for &k in &self.schemes {
                    if strategy == PromptStrategy::Inverse && k != 6 {
                        continue;
                    }
                    out.push(CellKey {
                        backend_index,
                        strategy,
                        k,
                    });
                }
            }
        }
        out
    }

    /// Hash of everything that determines the results: not the run
    /// directory, nor the parallelism, nor where the input files live.
    pub fn fingerprint(&self) -> String {
        #[derive(Serialize)]
        struct View<'a> {
            dataset_sha256: &'a str,
            label_format: LabelFormat,
            split: &'a Option<SplitSpec>,
            subsample: &'a Option<Subsample>,
            backends: &'a [BackendSpec],
            strategies: &'a [PromptStrategy],
            schemes: &'a [usize],
            policy: &'a RetryPolicy,
            scoring_mode: ScoringMode,
            involution: &'a Involution,
            asset_sha256: &'a BTreeMap<String, String>,
        }
        let view = View {
            dataset_sha256: &self.dataset_sha256,
            label_format: self.dataset.label_format,
            split: &self.dataset.split,
            subsample: &self.dataset.subsample,
            backends: &self.backends,
            strategies: &self.strategies,
            schemes: &self.schemes,
            policy: &self.policy,
            scoring_mode: self.scoring_mode,
            involution: &self.involution,
            asset_sha256: &self.asset_sha256,
        };
        let bytes = serde_json::to_vec(&view).expect("plan serializes");
        hex::encode(Sha256::digest(bytes))
    }

    fn backend_name(&self, key: &CellKey) -> &str {
        &self.backends[key.backend_index].name
    }
}

pub fn sha256_file(path: &Path) -> Result<String, RunError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn parse_template_key(key: &str) -> Result<(DialectKind, PromptStrategy), RunError> {
    let (d, s) = key
        .split_once('/')
        .ok_or_else(|| RunError::Config(format!("templates: key `{key}` must look like `<dialect>/<strategy>`")))?;
    let dialect = d.parse().map_err(|e| RunError::Config(format!("templates: {e}")))?;
    let strategy = s.parse().map_err(|e| RunError::Config(format!("templates: {e}")))?;
    Ok((dialect, strategy))
}

/// Reads, resolves and validates a configuration file.
pub fn plan_from_config(path: impl AsRef<Path>) -> Result<ExperimentPlan, RunError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let config: RunConfig =
        serde_json::from_str(&text).map_err(|e| RunError::Config(format!("{}: {e}", path.display())))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let base = if base.as_os_str().is_empty() {
        PathBuf::from(".")
    } else {
        base
    };
    plan_from_parts(config, &base)
}

/// Validates a configuration whose relative paths are taken from `base`.
pub fn plan_from_parts(config: RunConfig, base: &Path) -> Result<ExperimentPlan, RunError> {
    let base = std::path::absolute(base).map_err(io_err(base))?;
    let bad = |m: String| Err(RunError::Config(m));

    if config.backends.is_empty() {
        return bad("backends: at least one backend is required".into());
    }
    if config.strategies.is_empty() {
        return bad("strategies: at least one strategy is required".into());
    }
    if config.schemes.is_empty() {
        return bad("schemes: at least one scheme is required".into());
    }
    if config.parallelism == 0 {
        return bad("parallelism: must be at least 1".into());
    }
    config.policy.validate().map_err(RunError::Config)?;

    let mut strategies = Vec::new();
    for s in &config.strategies {
        let strategy: PromptStrategy = s.parse().map_err(|e| RunError::Config(format!("strategies: {e}")))?;
        if strategies.contains(&strategy) {
            return bad(format!("strategies: `{s}` listed twice"));
        }
        strategies.push(strategy);
    }
    let mut schemes = Vec::new();
    for &k in &config.schemes {
        scheme_for(k).map_err(|e| RunError::Config(format!("schemes: {e}")))?;
        if schemes.contains(&k) {
            return bad(format!("schemes: {k} listed twice"));
        }
        schemes.push(k);
    }
    if strategies.contains(&PromptStrategy::Inverse) && !schemes.contains(&6) {
        return bad("strategies: `inverse` needs the six-class scheme (k = 6)".into());
    }

    let mut names = std::collections::BTreeSet::new();
    for b in &config.backends {
        if !names.insert(b.name.clone()) {
            return bad(format!("backends: duplicate name `{}`", b.name));
        }
        b.backend_config().validate()?;
        match (b.protocol, &b.mock) {
            (Protocol::Mock, None) => {
                return bad(format!("backends.{}: protocol `mock` needs a `mock` behavior", b.name))
            }
            (Protocol::Mock, Some(m)) => m
                .validate()
                .map_err(|e| RunError::Config(format!("backends.{}: {e}", b.name)))?,
            (_, Some(_)) => {
                return bad(format!(
                    "backends.{}: `mock` is only valid with protocol `mock`",
                    b.name
                ))
            }
            (_, None) => {}
        }
        if let Some(var) = &b.auth_env {
            if std::env::var_os(var).is_none() {
                return Err(GatewayError::MissingKey {
                    backend: b.name.clone(),
                    var: var.clone(),
                }
                .into());
            }
        }
    }

    let mut dataset = config.dataset.clone();
    dataset.path = resolve(&base, &dataset.path);
    if !dataset.path.is_file() {
        return bad(format!("dataset.path: {} does not exist", dataset.path.display()));
    }
    let dataset_sha256 = sha256_file(&dataset.path)?;

    let mut asset_sha256 = BTreeMap::new();
    let synonyms = config.synonyms.as_ref().map(|p| resolve(&base, p));
    if let Some(p) = &synonyms {
        asset_sha256.insert("synonyms".to_string(), sha256_file(p)?);
    }
    let cleanup_rules: BTreeMap<DialectKind, PathBuf> = config
        .cleanup_rules
        .iter()
        .map(|(d, p)| (*d, resolve(&base, p)))
        .collect();
    for (d, p) in &cleanup_rules {
        asset_sha256.insert(format!("cleanup_rules/{d}"), sha256_file(p)?);
    }
    let templates: BTreeMap<String, PathBuf> = config
        .templates
        .iter()
        .map(|(k, p)| (k.clone(), resolve(&base, p)))
        .collect();
    for (key, p) in &templates {
        parse_template_key(key)?;
        asset_sha256.insert(format!("templates/{key}"), sha256_file(p)?);
    }

    let plan = ExperimentPlan {
        dataset,
        dataset_sha256,
        backends: config.backends,
        strategies,
        schemes,
        policy: config.policy,
        parallelism: config.parallelism,
        scoring_mode: config.scoring_mode,
        run_dir: resolve(&base, &config.run_dir),
        involution: config.involution.unwrap_or_default(),
        synonyms,
        cleanup_rules,
        templates,
        asset_sha256,
    };
    // loading the assets here surfaces syntax errors before any work starts
    build_engine(&plan)?;
    build_normalizer(&plan)?;
    load_eval_samples(&plan)?;
    Ok(plan)
}

fn build_engine(plan: &ExperimentPlan) -> Result<PromptEngine, RunError> {
    let mut engine = PromptEngine::new(plan.involution.clone());
    for (key, path) in &plan.templates {
        let (dialect, strategy) = parse_template_key(key)?;
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        engine = engine
            .with_template(dialect, strategy, text)
            .map_err(|e| RunError::Config(format!("templates.{key}: {e}")))?;
    }
    Ok(engine)
}

fn build_normalizer(plan: &ExperimentPlan) -> Result<Normalizer, RunError> {
    let mut normalizer = Normalizer::default();
    if let Some(path) = &plan.synonyms {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let dict = SynonymDictionary::parse(&text)
            .map_err(|e| RunError::Config(format!("synonyms {}: {e}", path.display())))?;
        normalizer = normalizer.with_dictionary(dict);
    }
    for (dialect, path) in &plan.cleanup_rules {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let rules =
            CleanupRules::parse(&text).map_err(|e| RunError::Config(format!("cleanup_rules.{dialect}: {e}")))?;
        normalizer = normalizer.with_rules(*dialect, rules);
    }
    Ok(normalizer)
}

/// The samples the grid is evaluated on, after splitting and subsampling.
pub fn load_eval_samples(plan: &ExperimentPlan) -> Result<Vec<Sample>, RunError> {
    let corpus = dataset::load_csv(&plan.dataset.path, plan.dataset.label_format)?;
    for e in &corpus.row_errors {
        tracing::warn!("{}: {e}", plan.dataset.path.display());
    }
    let eval = match &plan.dataset.split {
        Some(spec) => dataset::split(&corpus.samples, spec)?.1,
        None => corpus.samples,
    };
    match plan.dataset.subsample {
        Some(Subsample { n, seed }) => Ok(dataset::stratified_subsample(&eval, n, seed)?),
        None => Ok(eval),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum CellStatus {
    Complete,
    Aborted {
        reason: String,
    },
    /// The run stopped before the cell finished.
    Partial,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellResult {
    pub backend: String,
    pub family: Family,
    pub dialect: DialectKind,
    pub strategy: PromptStrategy,
    pub k: usize,
    #[serde(flatten)]
    pub status: CellStatus,
    /// Samples planned for this cell after scheme filtering.
    pub planned: usize,
    pub matrix: ConfusionMatrix,
}

impl CellResult {
    pub fn metrics(&self, averaging: Averaging, mode: ScoringMode) -> Option<MetricSet> {
        if self.status != CellStatus::Complete {
            return None;
        }
        compute(&self.matrix, averaging, mode).ok()
    }
}

/// Everything a report is derived from. Contains no timings, so identical
/// inputs give identical records.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunRecord {
    pub fingerprint: String,
    pub scoring_mode: ScoringMode,
    /// Gold histogram of the evaluated samples, in canonical label order.
    pub gold_counts: [u64; 6],
    pub cells: Vec<CellResult>,
}

impl RunRecord {
    pub fn empty() -> Self {
        Self {
            fingerprint: String::new(),
            scoring_mode: ScoringMode::Strict,
            gold_counts: [0; 6],
            cells: Vec::new(),
        }
    }

    pub fn complete(&self) -> bool {
        self.cells.iter().all(|c| c.status == CellStatus::Complete)
    }

    pub fn aborted_cells(&self) -> usize {
        self.cells
            .iter()
            .filter(|c| matches!(c.status, CellStatus::Aborted { .. }))
            .count()
    }

    pub fn load(run_dir: &Path) -> Result<Self, RunError> {
        let path = run_dir.join(RECORD_FILE);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        serde_json::from_str(&text).map_err(|e| RunError::State {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }
}

/// One line of the prediction log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub backend: String,
    pub strategy: PromptStrategy,
    pub k: usize,
    pub id: u64,
    pub gold: Emotion,
    pub raw: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transport_error: Option<TransportError>,
    pub outcome: ParseOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellStats {
    pub backend: String,
    pub strategy: PromptStrategy,
    pub k: usize,
    pub submitted: usize,
    pub reused: usize,
    pub cache_hits: usize,
    pub attempts: u64,
    pub elapsed_ms: u128,
}

/// Timing and transport counters, kept apart from the record.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub cells: Vec<CellStats>,
    /// Highest concurrency observed by each mock backend.
    pub mock_max_in_flight: BTreeMap<String, usize>,
    pub interrupted: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ExecuteOptions {
    /// Stop after this many newly submitted samples, as if killed.
    pub interrupt_after: Option<usize>,
    /// Simulated service time of mock backends.
    pub mock_latency: Duration,
}

pub struct RunOutput {
    pub record: RunRecord,
    pub stats: RunStats,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), RunError> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(dir))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| RunError::Io {
        path: path.display().to_string(),
        source: e.error,
    })?;
    Ok(())
}

/// Writes the plan and fingerprint into a fresh run directory, or checks
/// them against an existing one.
fn prepare_run_dir(plan: &ExperimentPlan) -> Result<(), RunError> {
    let dir = &plan.run_dir;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let fp_path = dir.join(FINGERPRINT_FILE);
    let fingerprint = plan.fingerprint();
    if fp_path.exists() {
        let stored = fs::read_to_string(&fp_path).map_err(io_err(&fp_path))?;
        if stored.trim() != fingerprint {
            return Err(RunError::FingerprintMismatch(format!(
                "{} already holds a run of a different plan (fingerprint {} vs {fingerprint}); \
                 use a fresh run_dir or restore the original configuration",
                dir.display(),
                stored.trim()
            )));
        }
    }
    let plan_json = serde_json::to_vec_pretty(plan).expect("plan serializes");
    write_atomic(&dir.join(PLAN_FILE), &plan_json)?;
    write_atomic(&fp_path, format!("{fingerprint}\n").as_bytes())?;
    Ok(())
}

type PredictionKey = (String, PromptStrategy, usize, u64);

fn read_predictions(path: &Path) -> Result<HashMap<PredictionKey, Prediction>, RunError> {
    let mut out = HashMap::new();
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(out),
        Err(e) => return Err(io_err(path)(e)),
    };
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<Prediction>(&line) {
            Ok(p) => {
                out.insert((p.backend.clone(), p.strategy, p.k, p.id), p);
            }
            // a torn final line from an interrupted write is dropped
            Err(e) => tracing::warn!("{}:{}: skipping unreadable prediction: {e}", path.display(), i + 1),
        }
    }
    Ok(out)
}

/// Runs the plan, reusing whatever the run directory already holds.
pub fn execute(plan: &ExperimentPlan, options: &ExecuteOptions) -> Result<RunOutput, RunError> {
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(io_err(&plan.run_dir))?;
    runtime.block_on(execute_async(plan, options))
}

pub async fn execute_async(plan: &ExperimentPlan, options: &ExecuteOptions) -> Result<RunOutput, RunError> {
    prepare_run_dir(plan)?;
    let samples = load_eval_samples(plan)?;
    let engine = build_engine(plan)?;
    let normalizer = build_normalizer(plan)?;
    let cache = ResponseCache::open(plan.run_dir.join("cache"))?;
    let log_path = plan.run_dir.join(PREDICTIONS_FILE);
    let mut known = read_predictions(&log_path)?;
    let mut log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(io_err(&log_path))?;

    let mut gold_counts = [0u64; 6];
    for s in &samples {
        gold_counts[s.gold.id()] += 1;
    }
    debug_assert_eq!(class_histogram(&samples).total(), samples.len() as u64);
    let corpus: BTreeMap<u64, Emotion> = samples.iter().map(|s| (s.id, s.gold)).collect();

    let mut record = RunRecord {
        fingerprint: plan.fingerprint(),
        scoring_mode: plan.scoring_mode,
        gold_counts,
        cells: Vec::new(),
    };
    let mut stats = RunStats::default();
    let mut budget = options.interrupt_after;
    let cells = plan.cells();

    let mut gateways: Vec<Option<Result<Gateway, String>>> = (0..plan.backends.len()).map(|_| None).collect();
    for key in &cells {
        let spec = &plan.backends[key.backend_index];
        let scheme = scheme_for(key.k).expect("validated scheme");
        let cell_samples = filter_for_scheme(&samples, &scheme);
        let mut cell = CellResult {
            backend: spec.name.clone(),
            family: spec.family,
            dialect: spec.dialect,
            strategy: key.strategy,
            k: key.k,
            status: CellStatus::Complete,
            planned: cell_samples.len(),
            matrix: ConfusionMatrix::for_scheme(&scheme),
        };
        if stats.interrupted {
            cell.status = CellStatus::Partial;
            record.cells.push(cell);
            continue;
        }

        let slot = &mut gateways[key.backend_index];
        if slot.is_none() {
            *slot = Some(open_gateway(spec, &corpus, &cache, options).await);
        }
        let gateway = match slot.as_ref().expect("just filled") {
            Ok(g) => g,
            Err(reason) => {
                tracing::error!(backend = %spec.name, "cell aborted: {reason}");
                cell.status = CellStatus::Aborted { reason: reason.clone() };
                record.cells.push(cell);
                continue;
            }
        };

        let started = tokio::time::Instant::now();
        let dialect = spec.dialect();
        let mut cell_stats = CellStats {
            backend: spec.name.clone(),
            strategy: key.strategy,
            k: key.k,
            submitted: 0,
            reused: 0,
            cache_hits: 0,
            attempts: 0,
            elapsed_ms: 0,
        };
        let needs_submit = |s: &Sample| {
            known
                .get(&(spec.name.clone(), key.strategy, key.k, s.id))
                .is_none_or(|p| p.transport_error.is_some())
        };
        let todo: Vec<&Sample> = cell_samples.iter().filter(|s| needs_submit(s)).collect();
        cell_stats.reused = cell_samples.len() - todo.len();
        let prompts: Vec<_> = todo
            .iter()
            .map(|s| (s.id, engine.render(key.strategy, &dialect, &scheme, &s.text)))
            .collect();

        let mut write_error = None;
        let mut fresh = Vec::new();
        gateway
            .run_batch_each(&prompts, plan.parallelism, &plan.policy, |i, resp| {
                let sample = todo[i];
                let outcome = match &resp.text {
                    Some(text) => normalizer.normalize(&prompts[i].1, text),
                    None => ParseOutcome::transport_failure(""),
                };
                let p = Prediction {
                    backend: spec.name.clone(),
                    strategy: key.strategy,
                    k: key.k,
                    id: sample.id,
                    gold: sample.gold,
                    raw: resp.text.clone(),
                    transport_error: resp.transport_error.clone(),
                    outcome,
                };
                let mut line = serde_json::to_string(&p).expect("prediction serializes");
                line.push('\n');
                if let Err(e) = log.write_all(line.as_bytes()).and_then(|_| log.flush()) {
                    write_error = Some(e);
                    return false;
                }
                cell_stats.submitted += 1;
                cell_stats.attempts += u64::from(resp.attempts);
                cell_stats.cache_hits += usize::from(resp.cached);
                fresh.push(p);
                match budget.as_mut() {
                    Some(0) => false,
                    Some(n) => {
                        *n -= 1;
                        *n > 0
                    }
                    None => true,
                }
            })
            .await;
        if let Some(e) = write_error {
            return Err(io_err(&log_path)(e));
        }
        for p in fresh {
            known.insert((p.backend.clone(), p.strategy, p.k, p.id), p);
        }
        if budget == Some(0) {
            stats.interrupted = true;
        }

        let mut complete = true;
        for s in &cell_samples {
            match known.get(&(spec.name.clone(), key.strategy, key.k, s.id)) {
                Some(p) => {
                    let gold = crate::taxonomy::group_label(&scheme, s.gold).expect("filtered to mapped labels");
                    cell.matrix.accumulate(gold, &p.outcome)?;
                }
                None => complete = false,
            }
        }
        if !complete {
            cell.status = CellStatus::Partial;
        }
        cell_stats.elapsed_ms = started.elapsed().as_millis();
        tracing::info!(
            backend = %plan.backend_name(key),
            strategy = %key.strategy,
            k = key.k,
            submitted = cell_stats.submitted,
            reused = cell_stats.reused,
            "cell done"
        );
        stats.cells.push(cell_stats);
        record.cells.push(cell);
    }

    for (spec, gateway) in plan.backends.iter().zip(&gateways) {
        if let Some(Ok(g)) = gateway {
            if let Some(m) = g.mock_backend() {
                stats
                    .mock_max_in_flight
                    .insert(spec.name.clone(), m.stats().max_in_flight());
            }
        }
    }

    let record_json = serde_json::to_vec_pretty(&record).expect("record serializes");
    write_atomic(&plan.run_dir.join(RECORD_FILE), &record_json)?;
    let stats_json = serde_json::to_vec_pretty(&stats).expect("stats serialize");
    write_atomic(&plan.run_dir.join(STATS_FILE), &stats_json)?;
    if !stats.interrupted {
        crate::report::write_all(&record, &plan.run_dir.join("report")).map_err(io_err(&plan.run_dir))?;
    }
    Ok(RunOutput { record, stats })
}

async fn open_gateway(
    spec: &BackendSpec,
    corpus: &BTreeMap<u64, Emotion>,
    cache: &ResponseCache,
    options: &ExecuteOptions,
) -> Result<Gateway, String> {
    let config = spec.backend_config();
    let gateway = match (&spec.protocol, &spec.mock) {
        (Protocol::Mock, Some(behavior)) => {
            let backend = MockBackend::new(behavior.clone(), corpus.clone()).with_latency(options.mock_latency);
            Gateway::mock(config, Arc::new(backend))
        }
        _ => Gateway::connect(config),
    }
    .map_err(|e| e.to_string())?
    .with_cache(cache.clone());
    match gateway.health_check().await {
        HealthStatus::Ok => Ok(gateway),
        HealthStatus::Unreachable => Err(format!("backend `{}` is unreachable", spec.name)),
        HealthStatus::Unauthorized => Err(format!("backend `{}` rejected the API key", spec.name)),
    }
}

/// Continues the run stored in `run_dir`. Refuses if the stored plan, the
/// dataset or any auxiliary file changed since the run started.
pub fn resume(run_dir: impl AsRef<Path>, options: &ExecuteOptions) -> Result<RunOutput, RunError> {
    let plan = load_stored_plan(run_dir.as_ref())?;
    execute(&plan, options)
}

pub fn load_stored_plan(run_dir: &Path) -> Result<ExperimentPlan, RunError> {
    let plan_path = run_dir.join(PLAN_FILE);
    let text = fs::read_to_string(&plan_path).map_err(io_err(&plan_path))?;
    let mut plan: ExperimentPlan = serde_json::from_str(&text).map_err(|e| RunError::State {
        path: plan_path.display().to_string(),
        message: e.to_string(),
    })?;
    let fp_path = run_dir.join(FINGERPRINT_FILE);
    let stored = fs::read_to_string(&fp_path).map_err(io_err(&fp_path))?;
    let stored = stored.trim();
    if plan.fingerprint() != stored {
        return Err(RunError::FingerprintMismatch(format!(
            "{} no longer matches the fingerprint it was started with; refusing to mix results",
            plan_path.display()
        )));
    }
    let dataset_now = sha256_file(&plan.dataset.path)?;
    if dataset_now != plan.dataset_sha256 {
        return Err(RunError::FingerprintMismatch(format!(
            "dataset {} changed since the run started",
            plan.dataset.path.display()
        )));
    }
    let mut assets = BTreeMap::new();
    if let Some(p) = &plan.synonyms {
        assets.insert("synonyms".to_string(), sha256_file(p)?);
    }
    for (d, p) in &plan.cleanup_rules {
        assets.insert(format!("cleanup_rules/{d}"), sha256_file(p)?);
    }
    for (key, p) in &plan.templates {
        assets.insert(format!("templates/{key}"), sha256_file(p)?);
    }
    if assets != plan.asset_sha256 {
        return Err(RunError::FingerprintMismatch(
            "synonym, cleanup or template files changed since the run started".into(),
        ));
    }
    // the directory may have been moved since
    plan.run_dir = run_dir.to_path_buf();
    Ok(plan)
}

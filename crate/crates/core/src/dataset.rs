//! Corpus loading, splitting and subsampling.
//!
//! The on-disk format is a UTF-8 CSV with a `text,label` header. Labels may be
//! integer codes (0 = sadness ... 5 = surprise) or label names.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::taxonomy::{Emotion, GroupingScheme, LabelDistribution};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read dataset {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("expected header `text,label`, found `{0}`")]
    Header(String),
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("invalid subsample: {0}")]
    InvalidSubsample(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub id: u64,
    pub text: String,
    pub gold: Emotion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelFormat {
    IntegerCoded,
    NameCoded,
    /// Integer when the cell parses as one, name otherwise.
    #[default]
    Auto,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowError {
    pub line: u64,
    pub message: String,
}

impl fmt::Display for RowError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} at line {}", self.message, self.line)
    }
}

#[derive(Debug, Clone, Default)]
pub struct LoadedCorpus {
    pub samples: Vec<Sample>,
    pub row_errors: Vec<RowError>,
}

pub fn load_csv(path: impl AsRef<Path>, format: LabelFormat) -> Result<LoadedCorpus, DatasetError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    load_csv_from_reader(bytes.as_slice(), format)
}

pub fn load_csv_from_reader<R: std::io::Read>(reader: R, format: LabelFormat) -> Result<LoadedCorpus, DatasetError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr.headers()?.clone();
    let names: Vec<String> = header.iter().map(|h| h.trim().to_lowercase()).collect();
    if names != ["text", "label"] {
        return Err(DatasetError::Header(header.iter().collect::<Vec<_>>().join(",")));
    }

    let mut corpus = LoadedCorpus::default();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let text = record.get(0).unwrap_or_default();
        let label = record.get(1).unwrap_or_default().trim();
        if text.trim().is_empty() {
            corpus.row_errors.push(RowError {
                line,
                message: "empty text".into(),
            });
            continue;
        }
        match decode_label(label, format) {
            Ok(gold) => corpus.samples.push(Sample {
                id: corpus.samples.len() as u64,
                text: text.to_string(),
                gold,
            }),
            Err(message) => corpus.row_errors.push(RowError { line, message }),
        }
    }
    Ok(corpus)
}

fn decode_label(cell: &str, format: LabelFormat) -> Result<Emotion, String> {
    let as_code = |cell: &str| match cell.parse::<i64>() {
        Ok(code) => usize::try_from(code)
            .ok()
            .and_then(Emotion::from_id)
            .ok_or_else(|| format!("unknown label code {code}")),
        Err(_) => Err(format!("label `{cell}` is not an integer code")),
    };
    let as_name = |cell: &str| {
        cell.parse::<Emotion>()
            .map_err(|_| format!("unknown label name `{cell}`"))
    };
    match format {
        LabelFormat::IntegerCoded => as_code(cell),
        LabelFormat::NameCoded => as_name(cell),
        LabelFormat::Auto if cell.parse::<i64>().is_ok() => as_code(cell),
        LabelFormat::Auto => as_name(cell),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitStrategy {
    HeadTail,
    StratifiedRandom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub finetune_size: usize,
    pub eval_size: usize,
    #[serde(default)]
    pub seed: u64,
    pub strategy: SplitStrategy,
}

impl Default for SplitSpec {
    /// 2000 samples for fine-tuning, the following 16000 for evaluation.
    fn default() -> Self {
        Self {
            finetune_size: 2000,
            eval_size: 16000,
            seed: 0,
            strategy: SplitStrategy::HeadTail,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self, corpus_size: usize) -> Result<(), DatasetError> {
        if self.finetune_size == 0 || self.eval_size == 0 {
            return Err(DatasetError::InvalidSplit("split sizes must be positive".into()));
        }
        if self.finetune_size + self.eval_size > corpus_size {
            return Err(DatasetError::InvalidSplit(format!(
                "{} + {} samples requested from a corpus of {corpus_size}",
                self.finetune_size, self.eval_size
            )));
        }
        Ok(())
    }
}

/// Splits a corpus into disjoint fine-tuning and evaluation partitions.
pub fn split(samples: &[Sample], spec: &SplitSpec) -> Result<(Vec<Sample>, Vec<Sample>), DatasetError> {
    spec.validate(samples.len())?;
    match spec.strategy {
        SplitStrategy::HeadTail => {
            let finetune = samples[..spec.finetune_size].to_vec();
            let eval = samples[spec.finetune_size..spec.finetune_size + spec.eval_size].to_vec();
            Ok((finetune, eval))
        }
        SplitStrategy::StratifiedRandom => {
            let finetune = stratified_pick(samples, spec.finetune_size, spec.seed);
            let taken: std::collections::HashSet<u64> = finetune.iter().map(|s| s.id).collect();
            let rest: Vec<Sample> = samples.iter().filter(|s| !taken.contains(&s.id)).cloned().collect();
            let eval = stratified_pick(&rest, spec.eval_size, spec.seed.wrapping_add(1));
            Ok((finetune, eval))
        }
    }
}

pub fn class_histogram(samples: &[Sample]) -> LabelDistribution {
    let mut counts = [0u64; 6];
    for s in samples {
        counts[s.gold.id()] += 1;
    }
    LabelDistribution::over_labels(counts)
}

/// Samples whose gold label the scheme maps, in input order.
pub fn filter_for_scheme(samples: &[Sample], scheme: &GroupingScheme) -> Vec<Sample> {
    samples.iter().filter(|s| scheme.is_mapped(s.gold)).cloned().collect()
}

/// A size-`n` subset with per-class counts within one of the proportional
/// share. Output is ordered by sample id.
pub fn stratified_subsample(samples: &[Sample], n: usize, seed: u64) -> Result<Vec<Sample>, DatasetError> {
    if n == 0 || n > samples.len() {
        return Err(DatasetError::InvalidSubsample(format!(
            "cannot draw {n} samples from a corpus of {}",
            samples.len()
        )));
    }
    Ok(stratified_pick(samples, n, seed))
}

/// Largest-remainder allocation of `n` across classes proportional to `counts`.
pub fn proportional_allocation(counts: &[u64], n: usize) -> Vec<usize> {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return vec![0; counts.len()];
    }
    let n = n as u64;
    let mut alloc: Vec<usize> = counts.iter().map(|&c| (c * n / total) as usize).collect();
    let assigned: usize = alloc.iter().sum();
    let mut remainders: Vec<(u64, usize)> = counts.iter().enumerate().map(|(i, &c)| ((c * n) % total, i)).collect();
    // largest remainder first, lower class index on ties
    remainders.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, i) in remainders.iter().take(n as usize - assigned) {
        alloc[i] += 1;
    }
    alloc
}

fn stratified_pick(samples: &[Sample], n: usize, seed: u64) -> Vec<Sample> {
    let mut by_class: BTreeMap<Emotion, Vec<&Sample>> = BTreeMap::new();
    for s in samples {
        by_class.entry(s.gold).or_default().push(s);
    }
    let counts: Vec<u64> = Emotion::ALL
        .iter()
        .map(|e| by_class.get(e).map_or(0, |v| v.len() as u64))
        .collect();
    let alloc = proportional_allocation(&counts, n);

    let mut picked = Vec::with_capacity(n);
    for (emotion, members) in by_class.iter_mut() {
        // canonical order first so the draw does not depend on input order
        members.sort_by(|a, b| a.text.cmp(&b.text).then(a.id.cmp(&b.id)));
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((emotion.id() as u64 + 1) << 56));
        members.shuffle(&mut rng);
        picked.extend(members.iter().take(alloc[emotion.id()]).map(|s| (*s).clone()));
    }
    picked.sort_by_key(|s| s.id);
    picked
}

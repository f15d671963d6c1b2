//! Confusion matrices, classification metrics and cross-run deltas.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::normalize::{FailureKind, OutcomeKind, ParseOutcome};
use crate::prompt::PromptStrategy;
use crate::taxonomy::{canonical_labels, Emotion, GroupingScheme};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricsError {
    #[error("class `{0}` is not part of the matrix")]
    UnknownClass(String),
    #[error("matrix has no evaluated samples")]
    EmptyMatrix,
    #[error("matrices have different classes")]
    ClassMismatch,
    #[error("matrix classes are not the canonical six labels")]
    NotCanonical,
    #[error("{0}")]
    Domain(String),
}

/// Rows are gold classes, columns predicted classes. Failed samples are kept
/// out of the cells and tallied per gold row and failure kind.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: Vec<String>,
    counts: Vec<Vec<u64>>,
    row_failures: Vec<BTreeMap<FailureKind, u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: Vec<String>) -> Self {
        let k = classes.len();
        Self {
            classes,
            counts: vec![vec![0; k]; k],
            row_failures: vec![BTreeMap::new(); k],
        }
    }

    pub fn for_scheme(scheme: &GroupingScheme) -> Self {
        Self::new(scheme.class_names().to_vec())
    }

    /// Builds a matrix from raw cells with no failures.
    pub fn from_counts(classes: Vec<String>, counts: Vec<Vec<u64>>) -> Result<Self, MetricsError> {
        let k = classes.len();
        if counts.len() != k || counts.iter().any(|r| r.len() != k) {
            return Err(MetricsError::Domain(format!("counts must be {k}x{k}")));
        }
        Ok(Self {
            classes,
            counts,
            row_failures: vec![BTreeMap::new(); k],
        })
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn k(&self) -> usize {
        self.classes.len()
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn cell(&self, gold: usize, predicted: usize) -> u64 {
        self.counts[gold][predicted]
    }

    fn position(&self, class: &str) -> Result<usize, MetricsError> {
        self.classes
            .iter()
            .position(|c| c == class)
            .ok_or_else(|| MetricsError::UnknownClass(class.to_string()))
    }

    pub fn accumulate(&mut self, gold: &str, outcome: &ParseOutcome) -> Result<(), MetricsError> {
        let row = self.position(gold)?;
        match &outcome.kind {
            OutcomeKind::Parsed(predicted) => {
                let col = self.position(predicted)?;
                self.counts[row][col] += 1;
            }
            _ => {
                let kind = outcome.failure().expect("non-parsed outcomes are failures");
                self.add_failure(row, kind, 1);
            }
        }
        Ok(())
    }

    pub fn add_failure(&mut self, row: usize, kind: FailureKind, n: u64) {
        if n > 0 {
            *self.row_failures[row].entry(kind).or_default() += n;
        }
    }

    /// Cellwise sum, so partial tallies can be combined in any order.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<(), MetricsError> {
        if self.classes != other.classes {
            return Err(MetricsError::ClassMismatch);
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        for (row, tally) in other.row_failures.iter().enumerate() {
            for (&kind, &n) in tally {
                self.add_failure(row, kind, n);
            }
        }
        Ok(())
    }

    pub fn trace(&self) -> u64 {
        (0..self.k()).map(|i| self.counts[i][i]).sum()
    }

    /// Samples that reached a cell.
    pub fn mass(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sum(&self, row: usize) -> u64 {
        self.counts[row].iter().sum()
    }

    pub fn column_sum(&self, col: usize) -> u64 {
        self.counts.iter().map(|r| r[col]).sum()
    }

    pub fn row_failure_count(&self, row: usize) -> u64 {
        self.row_failures[row].values().sum()
    }

    pub fn total_failures(&self) -> u64 {
        self.row_failures.iter().flat_map(|t| t.values()).sum()
    }

    pub fn failures_by_kind(&self) -> BTreeMap<FailureKind, u64> {
        let mut out = BTreeMap::new();
        for tally in &self.row_failures {
            for (&kind, &n) in tally {
                *out.entry(kind).or_default() += n;
            }
        }
        out
    }

    /// Every sample seen, parsed or not.
    pub fn evaluated(&self) -> u64 {
        self.mass() + self.total_failures()
    }

    pub fn evaluated_in_row(&self, row: usize) -> u64 {
        self.row_sum(row) + self.row_failure_count(row)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    #[default]
    Macro,
    Weighted,
}

impl Averaging {
    pub const ALL: [Averaging; 2] = [Averaging::Macro, Averaging::Weighted];

    pub fn name(self) -> &'static str {
        match self {
            Averaging::Macro => "macro",
            Averaging::Weighted => "weighted",
        }
    }
}

/// Whether failed samples stay in the accuracy and recall denominators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoringMode {
    #[default]
    Strict,
    Exclude,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub accuracy: f64,
    pub recall: f64,
    pub precision: f64,
    pub f_score: f64,
    pub failure_rate: f64,
    pub averaging: Averaging,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassScores {
    pub recall: f64,
    pub precision: f64,
    pub f_score: f64,
    /// Gold samples of this class counted by the scoring mode.
    pub support: u64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Per-class recall, precision and F. A zero denominator yields 0.
pub fn class_scores(matrix: &ConfusionMatrix, mode: ScoringMode) -> Vec<ClassScores> {
    (0..matrix.k())
        .map(|c| {
            let tp = matrix.cell(c, c);
            let support = match mode {
                ScoringMode::Strict => matrix.evaluated_in_row(c),
                ScoringMode::Exclude => matrix.row_sum(c),
            };
            let recall = ratio(tp, support);
            let precision = ratio(tp, matrix.column_sum(c));
            let f_score = if recall + precision == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassScores {
                recall,
                precision,
                f_score,
                support,
            }
        })
        .collect()
}

/// Scores a matrix. Classes with neither gold samples nor predictions take no
/// part in macro averages.
pub fn compute(matrix: &ConfusionMatrix, averaging: Averaging, mode: ScoringMode) -> Result<MetricSet, MetricsError> {
    let evaluated = matrix.evaluated();
    if evaluated == 0 {
        return Err(MetricsError::EmptyMatrix);
    }
    let denominator = match mode {
        ScoringMode::Strict => evaluated,
        ScoringMode::Exclude => matrix.mass(),
    };
    let scores = class_scores(matrix, mode);
    let (mut recall, mut precision, mut f_score) = (0.0, 0.0, 0.0);
    match averaging {
        Averaging::Macro => {
            let active: Vec<&ClassScores> = scores
                .iter()
                .enumerate()
                .filter(|(c, s)| s.support > 0 || matrix.column_sum(*c) > 0)
                .map(|(_, s)| s)
                .collect();
            if !active.is_empty() {
                let n = active.len() as f64;
                recall = active.iter().map(|s| s.recall).sum::<f64>() / n;
                precision = active.iter().map(|s| s.precision).sum::<f64>() / n;
                f_score = active.iter().map(|s| s.f_score).sum::<f64>() / n;
            }
        }
        Averaging::Weighted => {
            let total: u64 = scores.iter().map(|s| s.support).sum();
            if total > 0 {
                for s in &scores {
                    let w = s.support as f64 / total as f64;
                    recall += w * s.recall;
                    precision += w * s.precision;
                    f_score += w * s.f_score;
                }
            }
        }
    }
    Ok(MetricSet {
        accuracy: ratio(matrix.trace(), denominator),
        recall,
        precision,
        f_score,
        failure_rate: ratio(matrix.total_failures(), evaluated),
        averaging,
    })
}

pub fn accuracy(matrix: &ConfusionMatrix, mode: ScoringMode) -> Result<f64, MetricsError> {
    compute(matrix, Averaging::Macro, mode).map(|m| m.accuracy)
}

/// Re-expresses a six-class matrix under a coarser scheme. Gold rows of
/// unmapped labels are dropped; predictions of unmapped labels become
/// out-of-vocabulary failures.
pub fn group_matrix(matrix: &ConfusionMatrix, scheme: &GroupingScheme) -> Result<ConfusionMatrix, MetricsError> {
    let canonical: Vec<String> = canonical_labels().iter().map(|e| e.name().to_string()).collect();
    if matrix.classes != canonical {
        return Err(MetricsError::NotCanonical);
    }
    let mut out = ConfusionMatrix::for_scheme(scheme);
    for gold in Emotion::ALL {
        let Some(row) = scheme.class_index(gold) else {
            continue;
        };
        for predicted in Emotion::ALL {
            let n = matrix.counts[gold.id()][predicted.id()];
            match scheme.class_index(predicted) {
                Some(col) => out.counts[row][col] += n,
                None => out.add_failure(row, FailureKind::OutOfVocabulary, n),
            }
        }
        for (&kind, &n) in &matrix.row_failures[gold.id()] {
            out.add_failure(row, kind, n);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DeltaKind {
    ModelFamily,
    PromptPair,
    GroupingPair,
}

impl DeltaKind {
    pub fn name(self) -> &'static str {
        match self {
            DeltaKind::ModelFamily => "model-family",
            DeltaKind::PromptPair => "prompt-pair",
            DeltaKind::GroupingPair => "grouping-pair",
        }
    }
}

impl std::str::FromStr for DeltaKind {
    type Err = MetricsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "model-family" => Ok(DeltaKind::ModelFamily),
            "prompt-pair" => Ok(DeltaKind::PromptPair),
            "grouping-pair" => Ok(DeltaKind::GroupingPair),
            other => Err(MetricsError::Domain(format!("unknown delta kind `{other}`"))),
        }
    }
}

/// Signed, componentwise metric differences.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricDelta {
    pub accuracy: f64,
    pub recall: f64,
    pub precision: f64,
    pub f_score: f64,
    pub failure_rate: f64,
}

impl MetricDelta {
    pub fn between(a: &MetricSet, b: &MetricSet) -> Self {
        Self {
            accuracy: a.accuracy - b.accuracy,
            recall: a.recall - b.recall,
            precision: a.precision - b.precision,
            f_score: a.f_score - b.f_score,
            failure_rate: a.failure_rate - b.failure_rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaReport {
    pub kind: DeltaKind,
    pub lhs: String,
    pub rhs: String,
    pub averaging: Averaging,
    pub delta: MetricDelta,
}

/// Componentwise mean.
pub fn mean_metrics(sets: &[MetricSet]) -> Result<MetricSet, MetricsError> {
    let first = sets
        .first()
        .ok_or_else(|| MetricsError::Domain("empty metric list".into()))?;
    if sets.iter().any(|m| m.averaging != first.averaging) {
        return Err(MetricsError::Domain("mixed averaging modes".into()));
    }
    let n = sets.len() as f64;
    let mean = |f: fn(&MetricSet) -> f64| sets.iter().map(f).sum::<f64>() / n;
    Ok(MetricSet {
        accuracy: mean(|m| m.accuracy),
        recall: mean(|m| m.recall),
        precision: mean(|m| m.precision),
        f_score: mean(|m| m.f_score),
        failure_rate: mean(|m| m.failure_rate),
        averaging: first.averaging,
    })
}

/// Mean over LLM backends minus mean over fine-tuned backends.
pub fn delta_models(llm: &[MetricSet], pre: &[MetricSet]) -> Result<DeltaReport, MetricsError> {
    let a = mean_metrics(llm)?;
    let b = mean_metrics(pre)?;
    if a.averaging != b.averaging {
        return Err(MetricsError::Domain("mixed averaging modes".into()));
    }
    Ok(DeltaReport {
        kind: DeltaKind::ModelFamily,
        lhs: "llm".into(),
        rhs: "pre".into(),
        averaging: a.averaging,
        delta: MetricDelta::between(&a, &b),
    })
}

/// Strategy `i` minus strategy `j` for one model and scheme.
pub fn delta_prompts(
    metrics: &BTreeMap<PromptStrategy, MetricSet>,
    i: PromptStrategy,
    j: PromptStrategy,
) -> Result<DeltaReport, MetricsError> {
    if i == j {
        return Err(MetricsError::Domain(
            "prompt delta needs two distinct strategies".into(),
        ));
    }
    let get = |s: PromptStrategy| {
        metrics
            .get(&s)
            .ok_or_else(|| MetricsError::Domain(format!("no metrics for strategy `{}`", s.name())))
    };
    let (a, b) = (get(i)?, get(j)?);
    if a.averaging != b.averaging {
        return Err(MetricsError::Domain("mixed averaging modes".into()));
    }
    Ok(DeltaReport {
        kind: DeltaKind::PromptPair,
        lhs: i.name().into(),
        rhs: j.name().into(),
        averaging: a.averaging,
        delta: MetricDelta::between(a, b),
    })
}

/// Gain from reducing `k` classes to `k_coarse`: coarse minus fine.
pub fn delta_groupings(fine: (usize, &MetricSet), coarse: (usize, &MetricSet)) -> Result<DeltaReport, MetricsError> {
    let ((k, f), (kc, c)) = (fine, coarse);
    if k <= kc {
        return Err(MetricsError::Domain(format!(
            "grouping delta needs k > k' (got {k} and {kc})"
        )));
    }
    if f.averaging != c.averaging {
        return Err(MetricsError::Domain("mixed averaging modes".into()));
    }
    Ok(DeltaReport {
        kind: DeltaKind::GroupingPair,
        lhs: format!("k{kc}"),
        rhs: format!("k{k}"),
        averaging: f.averaging,
        delta: MetricDelta::between(c, f),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taxonomy::{group_label, scheme_for};
    use proptest::prelude::*;

    fn two_by_two() -> ConfusionMatrix {
        ConfusionMatrix::from_counts(vec!["a".into(), "b".into()], vec![vec![1, 1], vec![0, 2]]).unwrap()
    }

    fn metric_set(acc: f64) -> MetricSet {
        MetricSet {
            accuracy: acc,
            recall: acc,
            precision: acc,
            f_score: acc,
            failure_rate: 0.0,
            averaging: Averaging::Macro,
        }
    }

    fn canonical_matrix() -> ConfusionMatrix {
        ConfusionMatrix::new(canonical_labels().iter().map(|e| e.name().to_string()).collect())
    }

    #[test]
    fn accumulate_basics() {
        let mut m = canonical_matrix();
        m.accumulate("joy", &ParseOutcome::parsed("joy", "joy")).unwrap();
        assert_eq!(m.cell(1, 1), 1);
        let mut f = canonical_matrix();
        f.accumulate(
            "joy",
            &ParseOutcome {
                kind: OutcomeKind::Malformed,
                raw: "?".into(),
            },
        )
        .unwrap();
        assert_eq!(f.failures_by_kind(), BTreeMap::from([(FailureKind::Malformed, 1)]));
        assert_eq!(f.evaluated(), 1);
        assert_eq!(accuracy(&f, ScoringMode::Strict).unwrap(), 0.0);
        assert_eq!(
            m.accumulate("joy", &ParseOutcome::parsed("positive", "")),
            Err(MetricsError::UnknownClass("positive".into()))
        );
        assert!(m.accumulate("bliss", &ParseOutcome::parsed("joy", "")).is_err());
    }

    #[test]
    fn hundred_oracle_outcomes_fill_the_diagonal() {
        let mut m = canonical_matrix();
        for i in 0..100 {
            let e = Emotion::ALL[i % 6];
            m.accumulate(e.name(), &ParseOutcome::parsed(e.name(), e.name()))
                .unwrap();
        }
        assert_eq!(m.trace(), 100);
        let set = compute(&m, Averaging::Macro, ScoringMode::Strict).unwrap();
        assert_eq!(
            (set.accuracy, set.recall, set.precision, set.f_score),
            (1.0, 1.0, 1.0, 1.0)
        );
    }

    #[test]
    fn hand_computed_two_class_example() {
        let m = compute(&two_by_two(), Averaging::Macro, ScoringMode::Strict).unwrap();
        assert_eq!(m.accuracy, 0.75);
        assert_eq!(m.recall, 0.75);
        assert!((m.precision - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        let scores = class_scores(&two_by_two(), ScoringMode::Strict);
        assert_eq!(scores[0].recall, 0.5);
        assert!((scores[1].precision - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn empty_matrix_is_an_error() {
        assert_eq!(
            compute(&canonical_matrix(), Averaging::Macro, ScoringMode::Strict),
            Err(MetricsError::EmptyMatrix)
        );
    }

    #[test]
    fn never_predicted_class_has_zero_precision() {
        let m = ConfusionMatrix::from_counts(vec!["a".into(), "b".into()], vec![vec![2, 0], vec![2, 0]]).unwrap();
        let s = class_scores(&m, ScoringMode::Strict);
        assert_eq!(s[1].precision, 0.0);
        assert_eq!(s[1].f_score, 0.0);
    }

    #[test]
    fn exclude_mode_drops_failures_from_denominators() {
        let mut m = two_by_two();
        m.add_failure(0, FailureKind::Ambiguous, 4);
        let strict = compute(&m, Averaging::Macro, ScoringMode::Strict).unwrap();
        let exclude = compute(&m, Averaging::Macro, ScoringMode::Exclude).unwrap();
        assert_eq!(strict.accuracy, 3.0 / 8.0);
        assert_eq!(exclude.accuracy, 0.75);
        assert_eq!(strict.failure_rate, 0.5);
        assert_eq!(exclude.failure_rate, 0.5);
        assert_eq!(exclude.recall, 0.75);
    }

    #[test]
    fn group_matrix_examples() {
        let mut diag = canonical_matrix();
        for e in Emotion::ALL {
            diag.accumulate(e.name(), &ParseOutcome::parsed(e.name(), "")).unwrap();
        }
        assert_eq!(
            group_matrix(&diag, &scheme_for(6).unwrap()).unwrap().counts(),
            diag.counts()
        );
        let g2 = group_matrix(&diag, &scheme_for(2).unwrap()).unwrap();
        assert_eq!(g2.counts(), &[vec![2, 0], vec![0, 2]]);
        assert_eq!(g2.total_failures(), 0);

        let mut off = canonical_matrix();
        off.accumulate("joy", &ParseOutcome::parsed("fear", "")).unwrap();
        let g2 = group_matrix(&off, &scheme_for(2).unwrap()).unwrap();
        assert_eq!(
            g2.failures_by_kind(),
            BTreeMap::from([(FailureKind::OutOfVocabulary, 1)])
        );
        assert!(group_matrix(&two_by_two(), &scheme_for(2).unwrap()).is_err());
    }

    #[test]
    fn merge_requires_matching_classes() {
        let mut a = two_by_two();
        a.merge(&two_by_two()).unwrap();
        assert_eq!(a.cell(1, 1), 4);
        assert_eq!(a.merge(&canonical_matrix()), Err(MetricsError::ClassMismatch));
    }

    #[test]
    fn delta_examples() {
        let d = delta_models(&[metric_set(0.5994)], &[metric_set(0.8226)]).unwrap();
        assert!((d.delta.accuracy - (-0.2232)).abs() < 1e-12);
        let zero = delta_models(&[metric_set(0.4), metric_set(0.6)], &[metric_set(0.5)]).unwrap();
        assert!(zero.delta.accuracy.abs() < 1e-15);
        assert!(delta_models(&[], &[metric_set(0.5)]).is_err());

        let prompts = BTreeMap::from([
            (PromptStrategy::Basic, metric_set(0.5994)),
            (PromptStrategy::Mask, metric_set(0.1275)),
        ]);
        let d = delta_prompts(&prompts, PromptStrategy::Basic, PromptStrategy::Mask).unwrap();
        assert!((d.delta.accuracy - 0.4719).abs() < 1e-12);
        assert!(delta_prompts(&prompts, PromptStrategy::Basic, PromptStrategy::Basic).is_err());
        assert!(delta_prompts(&prompts, PromptStrategy::Basic, PromptStrategy::Percent).is_err());

        let g = delta_groupings((6, &metric_set(0.5994)), (2, &metric_set(0.8039))).unwrap();
        assert!((g.delta.accuracy - 0.2045).abs() < 1e-12);
        assert!(delta_groupings((2, &metric_set(0.8)), (6, &metric_set(0.6))).is_err());
        assert!(delta_groupings((3, &metric_set(0.8)), (3, &metric_set(0.6))).is_err());
    }

    fn outcome_strategy() -> impl Strategy<Value = (Emotion, ParseOutcome)> {
        let pred = prop_oneof![
            8 => (0usize..6).prop_map(|i| OutcomeKind::Parsed(Emotion::ALL[i].name().into())),
            1 => Just(OutcomeKind::Ambiguous),
            1 => Just(OutcomeKind::Malformed),
            1 => Just(OutcomeKind::OutOfVocabulary("x".into())),
            1 => Just(OutcomeKind::TransportFailure),
        ];
        ((0usize..6), pred).prop_map(|(g, kind)| {
            (
                Emotion::ALL[g],
                ParseOutcome {
                    kind,
                    raw: String::new(),
                },
            )
        })
    }

    fn regroup(outcome: &ParseOutcome, scheme: &GroupingScheme) -> ParseOutcome {
        match outcome.class() {
            Some(c) => {
                let e: Emotion = c.parse().unwrap();
                match group_label(scheme, e) {
                    Some(g) => ParseOutcome::parsed(g, ""),
                    None => ParseOutcome {
                        kind: OutcomeKind::OutOfVocabulary(c.into()),
                        raw: String::new(),
                    },
                }
            }
            None => outcome.clone(),
        }
    }

    proptest! {
        #[test]
        fn metrics_stay_in_unit_interval(log in prop::collection::vec(outcome_strategy(), 1..60)) {
            let mut m = canonical_matrix();
            for (g, o) in &log {
                m.accumulate(g.name(), o).unwrap();
            }
            for avg in Averaging::ALL {
                for mode in [ScoringMode::Strict, ScoringMode::Exclude] {
                    let s = compute(&m, avg, mode).unwrap();
                    for v in [s.accuracy, s.recall, s.precision, s.f_score, s.failure_rate] {
                        prop_assert!((0.0..=1.0).contains(&v));
                    }
                    let best_f = class_scores(&m, mode).iter().map(|c| c.f_score).fold(0.0, f64::max);
                    prop_assert!(s.f_score <= best_f + 1e-12);
                }
            }
        }

        #[test]
        fn accumulation_is_order_independent(log in prop::collection::vec(outcome_strategy(), 0..60), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut shuffled = log.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let (mut a, mut b) = (canonical_matrix(), canonical_matrix());
            for (g, o) in &log { a.accumulate(g.name(), o).unwrap(); }
            for (g, o) in &shuffled { b.accumulate(g.name(), o).unwrap(); }
            prop_assert_eq!(a, b);
        }

        #[test]
        fn group_then_score_equals_score_then_group(log in prop::collection::vec(outcome_strategy(), 0..60), k in prop::sample::select(vec![6usize, 3, 2])) {
            let scheme = scheme_for(k).unwrap();
            let mut six = canonical_matrix();
            let mut direct = ConfusionMatrix::for_scheme(&scheme);
            for (g, o) in &log {
                six.accumulate(g.name(), o).unwrap();
                if let Some(gold) = group_label(&scheme, *g) {
                    direct.accumulate(gold, &regroup(o, &scheme)).unwrap();
                }
            }
            prop_assert_eq!(group_matrix(&six, &scheme).unwrap(), direct);
        }

        #[test]
        fn deltas_are_antisymmetric(a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let m = BTreeMap::from([(PromptStrategy::Basic, metric_set(a)), (PromptStrategy::Numeric, metric_set(b))]);
            let ij = delta_prompts(&m, PromptStrategy::Basic, PromptStrategy::Numeric).unwrap();
            let ji = delta_prompts(&m, PromptStrategy::Numeric, PromptStrategy::Basic).unwrap();
            prop_assert_eq!(ij.delta.accuracy, -ji.delta.accuracy);
            let mm = delta_models(&[metric_set(a)], &[metric_set(b)]).unwrap();
            let mm2 = delta_models(&[metric_set(b)], &[metric_set(a)]).unwrap();
            prop_assert_eq!(mm.delta.f_score, -mm2.delta.f_score);
            prop_assert_eq!(delta_models(&[metric_set(a)], &[metric_set(a)]).unwrap().delta.accuracy, 0.0);
        }
    }
}

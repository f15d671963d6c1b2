//! Canonical emotion labels, grouping schemes and the entropy tools used to
//! reason about coarser label spaces.
//!
//! A [`GroupingScheme`] is a *partial* map from the six canonical emotions to
//! `k` output classes. Labels a scheme does not map are excluded from grouped
//! evaluation rather than forced into a class.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TaxonomyError {
    #[error("unsupported grouping scheme k={0}; valid values are 6, 3, 2")]
    UnsupportedScheme(usize),
    #[error("unknown emotion label `{0}`; valid labels are sadness, joy, love, anger, fear, surprise")]
    UnknownLabel(String),
    #[error("invalid grouping scheme: {0}")]
    InvalidScheme(String),
    #[error("invalid involution: {0}")]
    InvalidInvolution(String),
    #[error("entropy of an empty distribution is undefined")]
    EmptyDistribution,
}

/// One of the six canonical emotions, in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Emotion {
    Sadness,
    Joy,
    Love,
    Anger,
    Fear,
    Surprise,
}

impl Emotion {
    pub const ALL: [Emotion; 6] = [
        Emotion::Sadness,
        Emotion::Joy,
        Emotion::Love,
        Emotion::Anger,
        Emotion::Fear,
        Emotion::Surprise,
    ];

    /// Position in the canonical order; also the integer code used by the
    /// public corpus (0 = sadness ... 5 = surprise).
    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<Emotion> {
        Self::ALL.get(id).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Emotion::Sadness => "sadness",
            Emotion::Joy => "joy",
            Emotion::Love => "love",
            Emotion::Anger => "anger",
            Emotion::Fear => "fear",
            Emotion::Surprise => "surprise",
        }
    }
}

impl fmt::Display for Emotion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Emotion {
    type Err = TaxonomyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lowered = s.trim().to_lowercase();
        Self::ALL
            .iter()
            .copied()
            .find(|e| e.name() == lowered)
            .ok_or_else(|| TaxonomyError::UnknownLabel(s.to_string()))
    }
}

impl Serialize for Emotion {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Emotion {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// The six labels in canonical order.
pub fn canonical_labels() -> [Emotion; 6] {
    Emotion::ALL
}

/// Partial map from canonical emotions onto `k` named output classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupingScheme {
    class_names: Vec<String>,
    mapping: [Option<usize>; 6],
}

impl GroupingScheme {
    /// Builds a scheme from ordered class names and a label → class map.
    ///
    /// Every class needs at least one preimage and every mapped class must be
    /// declared. Class names are lowercased.
    pub fn new(class_names: Vec<String>, mapping: &BTreeMap<Emotion, String>) -> Result<Self, TaxonomyError> {
        let class_names: Vec<String> = class_names.iter().map(|c| c.trim().to_lowercase()).collect();
        if class_names.is_empty() {
            return Err(TaxonomyError::InvalidScheme("no classes declared".into()));
        }
        for (i, name) in class_names.iter().enumerate() {
            if name.is_empty() {
                return Err(TaxonomyError::InvalidScheme("empty class name".into()));
            }
            if class_names[..i].contains(name) {
                return Err(TaxonomyError::InvalidScheme(format!("duplicate class `{name}`")));
            }
        }
        let mut table = [None; 6];
        for (emotion, class) in mapping {
            let class = class.trim().to_lowercase();
            let idx = class_names.iter().position(|c| *c == class).ok_or_else(|| {
                TaxonomyError::InvalidScheme(format!("`{emotion}` maps to undeclared class `{class}`"))
            })?;
            table[emotion.id()] = Some(idx);
        }
        for (idx, name) in class_names.iter().enumerate() {
            if !table.contains(&Some(idx)) {
                return Err(TaxonomyError::InvalidScheme(format!("class `{name}` has no emotions")));
            }
        }
        Ok(Self {
            class_names,
            mapping: table,
        })
    }

    pub fn identity() -> Self {
        Self {
            class_names: Emotion::ALL.iter().map(|e| e.name().to_string()).collect(),
            mapping: [Some(0), Some(1), Some(2), Some(3), Some(4), Some(5)],
        }
    }

    /// Number of output classes.
    pub fn k(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn class_index(&self, label: Emotion) -> Option<usize> {
        self.mapping[label.id()]
    }

    pub fn class_position(&self, class: &str) -> Option<usize> {
        self.class_names.iter().position(|c| c == class)
    }

    pub fn is_mapped(&self, label: Emotion) -> bool {
        self.mapping[label.id()].is_some()
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }

    /// Canonical labels mapped onto the class at `class_idx`, in canonical order.
    pub fn preimage(&self, class_idx: usize) -> Vec<Emotion> {
        Emotion::ALL
            .iter()
            .copied()
            .filter(|e| self.mapping[e.id()] == Some(class_idx))
            .collect()
    }

    pub fn mapped_labels(&self) -> Vec<Emotion> {
        Emotion::ALL.iter().copied().filter(|e| self.is_mapped(*e)).collect()
    }
}

/// The fixed scheme for `k` classes: identity for 6, `{positive: love,
/// negative: fear, neutral: surprise}` for 3 and `{positive: joy/love,
/// negative: anger/sadness}` for 2.
pub fn scheme_for(k: usize) -> Result<GroupingScheme, TaxonomyError> {
    use Emotion::*;
    let (classes, pairs): (&[&str], &[(Emotion, &str)]) = match k {
        6 => return Ok(GroupingScheme::identity()),
        3 => (
            &["positive", "negative", "neutral"],
            &[(Love, "positive"), (Fear, "negative"), (Surprise, "neutral")],
        ),
        2 => (
            &["positive", "negative"],
            &[
                (Joy, "positive"),
                (Love, "positive"),
                (Anger, "negative"),
                (Sadness, "negative"),
            ],
        ),
        other => return Err(TaxonomyError::UnsupportedScheme(other)),
    };
    let mapping = pairs.iter().map(|(e, c)| (*e, c.to_string())).collect();
    GroupingScheme::new(classes.iter().map(|c| c.to_string()).collect(), &mapping)
}

pub fn group_label(scheme: &GroupingScheme, label: Emotion) -> Option<&str> {
    scheme.class_index(label).map(|i| scheme.class_names[i].as_str())
}

/// Whether every class of `fine`, restricted to the labels both schemes map,
/// falls inside a single class of `coarse`.
pub fn is_refinement(fine: &GroupingScheme, coarse: &GroupingScheme) -> bool {
    (0..fine.k()).all(|fine_class| {
        let mut targets = fine
            .preimage(fine_class)
            .into_iter()
            .filter_map(|label| coarse.class_index(label));
        match targets.next() {
            None => true,
            Some(first) => targets.all(|t| t == first),
        }
    })
}

/// Counts per named class, in a fixed class order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelDistribution {
    classes: Vec<String>,
    counts: Vec<u64>,
}

impl LabelDistribution {
    pub fn new(classes: Vec<String>, counts: Vec<u64>) -> Self {
        assert_eq!(classes.len(), counts.len(), "one count per class");
        Self { classes, counts }
    }

    /// A distribution over the canonical labels.
    pub fn over_labels(counts: [u64; 6]) -> Self {
        Self::new(
            Emotion::ALL.iter().map(|e| e.name().to_string()).collect(),
            counts.to_vec(),
        )
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn count(&self, class: &str) -> u64 {
        self.classes
            .iter()
            .position(|c| c == class)
            .map_or(0, |i| self.counts[i])
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn probabilities(&self) -> Vec<f64> {
        let total = self.total() as f64;
        self.counts.iter().map(|&c| c as f64 / total).collect()
    }

    /// Keeps only the canonical labels `scheme` maps, without grouping them.
    pub fn restrict_to(&self, scheme: &GroupingScheme) -> LabelDistribution {
        let (classes, counts) = self
            .classes
            .iter()
            .zip(&self.counts)
            .filter(|(name, _)| name.parse::<Emotion>().is_ok_and(|e| scheme.is_mapped(e)))
            .map(|(n, c)| (n.clone(), *c))
            .unzip();
        LabelDistribution { classes, counts }
    }
}

/// Shannon entropy in bits.
pub fn entropy(dist: &LabelDistribution) -> Result<f64, TaxonomyError> {
    let total = dist.total();
    if total == 0 {
        return Err(TaxonomyError::EmptyDistribution);
    }
    let total = total as f64;
    Ok(dist
        .counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.log2()
        })
        .sum())
}

/// Sums a canonical-label distribution into the scheme's classes; labels the
/// scheme does not map are dropped.
pub fn induced_distribution(scheme: &GroupingScheme, dist: &LabelDistribution) -> LabelDistribution {
    let mut counts = vec![0u64; scheme.k()];
    for (name, &count) in dist.classes.iter().zip(&dist.counts) {
        if let Some(idx) = name.parse::<Emotion>().ok().and_then(|e| scheme.class_index(e)) {
            counts[idx] += count;
        }
    }
    LabelDistribution::new(scheme.class_names.clone(), counts)
}

/// A self-inverse pairing of the canonical labels, used by the inverse
/// prompt strategy.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Involution {
    table: [Emotion; 6],
}

impl Involution {
    pub fn new(pairs: &BTreeMap<Emotion, Emotion>) -> Result<Self, TaxonomyError> {
        let mut table = Emotion::ALL;
        for label in Emotion::ALL {
            let image = pairs
                .get(&label)
                .ok_or_else(|| TaxonomyError::InvalidInvolution(format!("no inverse given for `{label}`")))?;
            table[label.id()] = *image;
        }
        for label in Emotion::ALL {
            let back = table[table[label.id()].id()];
            if back != label {
                return Err(TaxonomyError::InvalidInvolution(format!(
                    "`{label}` -> `{}` -> `{back}` is not self-inverse",
                    table[label.id()]
                )));
            }
        }
        Ok(Self { table })
    }

    pub fn apply(&self, label: Emotion) -> Emotion {
        self.table[label.id()]
    }

    /// Unordered pairs `(a, b)` with `a` first in canonical order; fixed
    /// points appear as `(a, a)`.
    pub fn pairs(&self) -> Vec<(Emotion, Emotion)> {
        Emotion::ALL
            .iter()
            .copied()
            .filter(|&e| e <= self.apply(e))
            .map(|e| (e, self.apply(e)))
            .collect()
    }

    pub fn as_map(&self) -> BTreeMap<Emotion, Emotion> {
        Emotion::ALL.iter().map(|&e| (e, self.apply(e))).collect()
    }
}

impl Default for Involution {
    /// joy ↔ sadness, love ↔ anger, fear ↔ surprise. The pairing is a project
    /// choice; configure another one when needed.
    fn default() -> Self {
        use Emotion::*;
        Self {
            table: [Joy, Sadness, Anger, Love, Surprise, Fear],
        }
    }
}

impl Serialize for Involution {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.as_map().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Involution {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let pairs = BTreeMap::<Emotion, Emotion>::deserialize(deserializer)?;
        Involution::new(&pairs).map_err(serde::de::Error::custom)
    }
}

pub fn inverse_emotion(label: Emotion, inv: &Involution) -> Emotion {
    inv.apply(label)
}

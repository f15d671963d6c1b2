//! Deterministic in-process backend used for tests and desk-scale runs.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{TransportError, TransportErrorKind};
use crate::prompt::{mask_alphabet, numeric_alphabet, GrammarKind, RenderedPrompt};
use crate::taxonomy::{group_label, Emotion};

/// Reply used when a behavior decides to break the grammar. It contains no
/// letters, digits or braces, so every decoder rejects it as malformed.
pub const GARBLED_REPLY: &str = "~~ ?? ~~";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MockBehavior {
    Oracle,
    Fixed { label: String },
    Malformed { rate: f64, seed: u64 },
    Flaky { rate: f64, seed: u64 },
    Scripted { replies: BTreeMap<u64, String> },
}

impl MockBehavior {
    pub fn validate(&self) -> Result<(), String> {
        match self {
            MockBehavior::Malformed { rate, .. } | MockBehavior::Flaky { rate, .. } if !(0.0..=1.0).contains(rate) => {
                Err(format!("mock rate {rate} is outside [0, 1]"))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for MockBehavior {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MockBehavior::Oracle => write!(f, "oracle"),
            MockBehavior::Fixed { label } => write!(f, "fixed:{label}"),
            MockBehavior::Malformed { rate, seed } => write!(f, "malformed:{rate}:{seed}"),
            MockBehavior::Flaky { rate, seed } => write!(f, "flaky:{rate}:{seed}"),
            MockBehavior::Scripted { replies } => write!(f, "scripted({} replies)", replies.len()),
        }
    }
}

/// Parses `oracle`, `fixed:<label>`, `malformed:<rate>[:<seed>]` and
/// `flaky:<rate>[:<seed>]`.
impl FromStr for MockBehavior {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut parts = s.split(':');
        let head = parts.next().unwrap_or_default();
        let rate_seed = |parts: &mut std::str::Split<'_, char>| -> Result<(f64, u64), String> {
            let rate = parts
                .next()
                .ok_or("missing rate")?
                .parse::<f64>()
                .map_err(|e| format!("bad rate: {e}"))?;
            let seed = match parts.next() {
                Some(s) => s.parse::<u64>().map_err(|e| format!("bad seed: {e}"))?,
                None => 0,
            };
            Ok((rate, seed))
        };
        let behavior = match head {
            "oracle" => MockBehavior::Oracle,
            "fixed" => MockBehavior::Fixed {
                label: parts.next().ok_or("missing label")?.to_string(),
            },
            "malformed" => {
                let (rate, seed) = rate_seed(&mut parts)?;
                MockBehavior::Malformed { rate, seed }
            }
            "flaky" => {
                let (rate, seed) = rate_seed(&mut parts)?;
                MockBehavior::Flaky { rate, seed }
            }
            other => {
                return Err(format!(
                    "unknown mock behavior `{other}` (expected oracle, fixed, malformed or flaky)"
                ))
            }
        };
        if parts.next().is_some() {
            return Err(format!("trailing fields in `{s}`"));
        }
        behavior.validate()?;
        Ok(behavior)
    }
}

/// Uniform draw in [0, 1) fixed by its three coordinates.
pub fn draw(seed: u64, sample_id: u64, attempt: u32) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(sample_id);
    rng.set_word_pos(u128::from(attempt) * 2);
    rng.random::<f64>()
}

/// The reply a perfect model would give to `prompt` for a text of emotion `gold`.
pub fn oracle_answer(gold: Emotion, prompt: &RenderedPrompt) -> String {
    let scheme = &prompt.scheme;
    let class = group_label(scheme, gold).unwrap_or(gold.name()).to_string();
    match prompt.answer_grammar.kind {
        GrammarKind::SingleLabel => class,
        GrammarKind::Bitstring(_) => mask_alphabet(scheme)
            .code_of(&class)
            .map(str::to_string)
            .unwrap_or_default(),
        GrammarKind::PercentObject => {
            let fields: Vec<String> = scheme
                .class_names()
                .iter()
                .map(|c| format!("\"{c}\": {}", if *c == class { 100 } else { 0 }))
                .collect();
            format!("{{{}}}", fields.join(", "))
        }
        GrammarKind::IntegerCode => numeric_alphabet(scheme)
            .code_of(&class)
            .map(|n| n.to_string())
            .unwrap_or_default(),
        GrammarKind::SingleLabelInverse => {
            let inv = prompt.involution.clone().unwrap_or_default();
            inv.apply(gold).name().to_string()
        }
    }
}

/// Reply of `behavior` for one attempt. `gold` is `None` when the sample is
/// unknown to the backend.
pub fn behavior_reply(
    behavior: &MockBehavior,
    sample_id: u64,
    gold: Option<Emotion>,
    prompt: &RenderedPrompt,
    attempt: u32,
) -> Result<String, TransportError> {
    let gap = || {
        TransportError::new(
            TransportErrorKind::ScriptedGap,
            format!("no gold label for sample {sample_id}"),
        )
    };
    match behavior {
        MockBehavior::Oracle => gold.map(|g| oracle_answer(g, prompt)).ok_or_else(gap),
        MockBehavior::Fixed { label } => Ok(label.clone()),
        MockBehavior::Malformed { rate, seed } => {
            if draw(*seed, sample_id, 0) < *rate {
                Ok(GARBLED_REPLY.to_string())
            } else {
                gold.map(|g| oracle_answer(g, prompt)).ok_or_else(gap)
            }
        }
        MockBehavior::Flaky { rate, seed } => {
            if draw(*seed, sample_id, attempt) < *rate {
                Err(TransportError::new(
                    TransportErrorKind::Server,
                    "503 service unavailable (injected)",
                ))
            } else {
                gold.map(|g| oracle_answer(g, prompt)).ok_or_else(gap)
            }
        }
        MockBehavior::Scripted { replies } => replies.get(&sample_id).cloned().ok_or_else(gap),
    }
}

/// Counters observed from the backend side.
#[derive(Debug, Default)]
pub struct MockStats {
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
    calls: AtomicU64,
}

impl MockStats {
    pub fn enter(&self) -> InFlightGuard<'_> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.max_in_flight.fetch_max(now, Ordering::SeqCst);
        InFlightGuard(self)
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight.load(Ordering::SeqCst)
    }

    pub fn in_flight(&self) -> usize {
        self.in_flight.load(Ordering::SeqCst)
    }
}

pub struct InFlightGuard<'a>(&'a MockStats);

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        self.0.in_flight.fetch_sub(1, Ordering::SeqCst);
    }
}

/// A behavior bound to the gold labels of the samples it will be asked about.
#[derive(Debug)]
pub struct MockBackend {
    behavior: MockBehavior,
    corpus: BTreeMap<u64, Emotion>,
    latency: Duration,
    stats: MockStats,
}

impl MockBackend {
    pub fn new(behavior: MockBehavior, corpus: BTreeMap<u64, Emotion>) -> Self {
        Self {
            behavior,
            corpus,
            latency: Duration::ZERO,
            stats: MockStats::default(),
        }
    }

    /// Simulated service time per request.
    pub fn with_latency(mut self, latency: Duration) -> Self {
        self.latency = latency;
        self
    }

    pub fn behavior(&self) -> &MockBehavior {
        &self.behavior
    }

    pub fn stats(&self) -> &MockStats {
        &self.stats
    }

    pub async fn reply(&self, sample_id: u64, prompt: &RenderedPrompt, attempt: u32) -> Result<String, TransportError> {
        let _guard = self.stats.enter();
        if self.latency.is_zero() {
            tokio::task::yield_now().await;
        } else {
            tokio::time::sleep(self.latency).await;
        }
        behavior_reply(
            &self.behavior,
            sample_id,
            self.corpus.get(&sample_id).copied(),
            prompt,
            attempt,
        )
    }
}

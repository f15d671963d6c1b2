//! Post-processing of raw model replies into a [`ParseOutcome`].
//!
//! Replies go through dialect-specific cleanup rules, then a decoder chosen by
//! the prompt's answer grammar. Every input yields exactly one outcome; the
//! decoders never fail.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::prompt::{
    mask_alphabet, numeric_alphabet, DialectKind, GrammarKind, MaskAlphabet, NumericAlphabet, RenderedPrompt,
};
use crate::taxonomy::{Emotion, GroupingScheme, Involution};

#[derive(Debug, Error)]
pub enum NormalizeError {
    #[error("line {line}: {message}")]
    Dictionary { line: usize, message: String },
    #[error("line {line}: {message}")]
    Rules { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum OutcomeKind {
    Parsed(String),
    Ambiguous,
    OutOfVocabulary(String),
    Malformed,
    TransportFailure,
}

/// Failure classes tallied separately from the confusion matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    Ambiguous,
    OutOfVocabulary,
    Malformed,
    TransportFailure,
}

impl FailureKind {
    pub const ALL: [FailureKind; 4] = [
        FailureKind::Ambiguous,
        FailureKind::OutOfVocabulary,
        FailureKind::Malformed,
        FailureKind::TransportFailure,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FailureKind::Ambiguous => "ambiguous",
            FailureKind::OutOfVocabulary => "out_of_vocabulary",
            FailureKind::Malformed => "malformed",
            FailureKind::TransportFailure => "transport_failure",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseOutcome {
    #[serde(flatten)]
    pub kind: OutcomeKind,
    pub raw: String,
}

impl ParseOutcome {
    fn new(kind: OutcomeKind, raw: &str) -> Self {
        Self {
            kind,
            raw: raw.to_string(),
        }
    }

    pub fn parsed(class: impl Into<String>, raw: &str) -> Self {
        Self::new(OutcomeKind::Parsed(class.into()), raw)
    }

    pub fn transport_failure(raw: &str) -> Self {
        Self::new(OutcomeKind::TransportFailure, raw)
    }

    pub fn class(&self) -> Option<&str> {
        match &self.kind {
            OutcomeKind::Parsed(c) => Some(c),
            _ => None,
        }
    }

    pub fn failure(&self) -> Option<FailureKind> {
        match self.kind {
            OutcomeKind::Parsed(_) => None,
            OutcomeKind::Ambiguous => Some(FailureKind::Ambiguous),
            OutcomeKind::OutOfVocabulary(_) => Some(FailureKind::OutOfVocabulary),
            OutcomeKind::Malformed => Some(FailureKind::Malformed),
            OutcomeKind::TransportFailure => Some(FailureKind::TransportFailure),
        }
    }
}

/// Surface word → canonical label. Canonical names always resolve to
/// themselves and need not be listed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynonymDictionary {
    entries: BTreeMap<String, Emotion>,
}

impl SynonymDictionary {
    /// Parses `synonym,label` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, NormalizeError> {
        let mut entries = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or_default().trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| NormalizeError::Dictionary { line: i + 1, message };
            let (word, label) = line
                .split_once(',')
                .ok_or_else(|| err("expected `synonym,label`".into()))?;
            let word = word.trim().to_lowercase();
            let label: Emotion = label.trim().parse().map_err(|e| err(format!("{e}")))?;
            if word.is_empty() {
                return Err(err("empty synonym".into()));
            }
            if entries.insert(word.clone(), label).is_some_and(|prev| prev != label) {
                return Err(err(format!("`{word}` mapped to two labels")));
            }
        }
        Ok(Self { entries })
    }

    pub fn lookup(&self, token: &str) -> Option<Emotion> {
        token.parse().ok().or_else(|| self.entries.get(token).copied())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl Default for SynonymDictionary {
    fn default() -> Self {
        Self::parse(include_str!("../assets/synonyms.csv")).expect("bundled dictionary is valid")
    }
}

pub fn normalize_synonym(token: &str, dict: &SynonymDictionary) -> Option<Emotion> {
    dict.lookup(token)
}

/// Ordered regex rewrites, each applied once.
#[derive(Debug, Clone)]
pub struct CleanupRules {
    rules: Vec<(Regex, String)>,
}

impl CleanupRules {
    /// Parses `pattern<TAB>replacement` lines. Blank lines and lines starting
    /// with `#` are skipped; the replacement is taken verbatim and may use
    /// `$1`-style group references.
    pub fn parse(text: &str) -> Result<Self, NormalizeError> {
        let mut rules = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| NormalizeError::Rules { line: i + 1, message };
            let (pattern, replacement) = line
                .split_once('\t')
                .ok_or_else(|| err("expected `pattern<TAB>replacement`".into()))?;
            let re = Regex::new(pattern).map_err(|e| err(e.to_string()))?;
            rules.push((re, replacement.to_string()));
        }
        Ok(Self { rules })
    }

    pub fn for_dialect(kind: DialectKind) -> Self {
        let text = match kind {
            DialectKind::PlainInstruct => include_str!("../assets/rules/plain-instruct.tsv"),
            DialectKind::QuotedInput => include_str!("../assets/rules/quoted-input.tsv"),
            DialectKind::HeaderDelimited => include_str!("../assets/rules/header-delimited.tsv"),
        };
        Self::parse(text).expect("bundled rules are valid")
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }
}

/// Applies each rule once, in order, then trims and lowercases.
pub fn cleanup(raw: &str, rules: &CleanupRules) -> String {
    let mut text = raw.to_string();
    for (re, replacement) in &rules.rules {
        text = re.replace_all(&text, replacement.as_str()).into_owned();
    }
    text.trim().to_lowercase()
}

static WORD: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"[a-z]+").unwrap());
static EMOTION_PAIR: LazyLock<Regex> = LazyLock::new(|| Regex::new(r#"emotion["']?\s*[:=]\s*["']?([a-z]+)"#).unwrap());
static BITS: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"[01]+").unwrap());
static INTEGER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\d+").unwrap());

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
enum Resolved {
    Class(usize),
    /// A known emotion the scheme leaves unmapped.
    Unmapped(String),
}

fn resolve(token: &str, scheme: &GroupingScheme, dict: &SynonymDictionary) -> Option<Resolved> {
    let token = token.trim().to_lowercase();
    if let Some(i) = scheme.class_position(&token) {
        return Some(Resolved::Class(i));
    }
    let label = dict.lookup(&token)?;
    Some(match scheme.class_index(label) {
        Some(i) => Resolved::Class(i),
        None => Resolved::Unmapped(token),
    })
}

fn decide(resolved: BTreeSet<Resolved>, scheme: &GroupingScheme, raw: &str) -> ParseOutcome {
    let mut it = resolved.into_iter();
    match (it.next(), it.next()) {
        (Some(Resolved::Class(i)), None) => ParseOutcome::parsed(scheme.class_names()[i].clone(), raw),
        (Some(Resolved::Unmapped(token)), None) => ParseOutcome::new(OutcomeKind::OutOfVocabulary(token), raw),
        (Some(_), Some(_)) => ParseOutcome::new(OutcomeKind::Ambiguous, raw),
        (None, _) => ParseOutcome::new(OutcomeKind::Malformed, raw),
    }
}

/// First balanced `{...}` or `[...]` region that parses as JSON. Single
/// quotes are accepted as a fallback.
pub fn extract_json(text: &str) -> Option<Value> {
    let bytes = text.as_bytes();
    let mut search_from = 0;
    while let Some(offset) = text[search_from..].find(['{', '[']) {
        let start = search_from + offset;
        if let Some(end) = balanced_end(&bytes[start..]) {
            let region = &text[start..start + end];
            if let Ok(v) = serde_json::from_str::<Value>(region) {
                return Some(v);
            }
            if let Ok(v) = serde_json::from_str::<Value>(&region.replace('\'', "\"")) {
                return Some(v);
            }
        }
        search_from = start + 1;
    }
    None
}

fn balanced_end(bytes: &[u8]) -> Option<usize> {
    let mut stack = Vec::new();
    let mut in_str = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate() {
        if in_str {
            match (escaped, b) {
                (true, _) => escaped = false,
                (false, b'\\') => escaped = true,
                (false, b'"') => in_str = false,
                _ => {}
            }
            continue;
        }
        match b {
            b'"' => in_str = true,
            b'{' | b'[' => stack.push(b),
            b'}' | b']' => {
                let open = stack.pop()?;
                if (open == b'{') != (b == b'}') {
                    return None;
                }
                if stack.is_empty() {
                    return Some(i + 1);
                }
            }
            _ => {}
        }
    }
    None
}

fn emotion_fields(value: &Value, out: &mut Vec<String>) {
    match value {
        Value::Object(map) => {
            for (key, v) in map {
                if key.eq_ignore_ascii_case("emotion") || key.eq_ignore_ascii_case("emotions") {
                    match v {
                        Value::String(s) => out.push(s.clone()),
                        Value::Array(items) => out.extend(items.iter().filter_map(|i| i.as_str().map(String::from))),
                        _ => {}
                    }
                }
            }
        }
        Value::Array(items) => items.iter().for_each(|i| emotion_fields(i, out)),
        _ => {}
    }
}

/// Single-label decoding: a JSON `emotion` field, then an `emotion: value`
/// pair, then bare words.
pub fn parse_basic(text: &str, scheme: &GroupingScheme, dict: &SynonymDictionary) -> ParseOutcome {
    let lowered = text.to_lowercase();

    let mut explicit = Vec::new();
    if let Some(json) = extract_json(&lowered) {
        emotion_fields(&json, &mut explicit);
    }
    if explicit.is_empty() {
        explicit.extend(EMOTION_PAIR.captures_iter(&lowered).map(|c| c[1].to_string()));
    }
    if !explicit.is_empty() {
        let resolved: BTreeSet<Resolved> = explicit.iter().filter_map(|t| resolve(t, scheme, dict)).collect();
        if resolved.is_empty() {
            return ParseOutcome::new(OutcomeKind::OutOfVocabulary(explicit[0].trim().to_lowercase()), text);
        }
        return decide(resolved, scheme, text);
    }

    let words: Vec<&str> = WORD.find_iter(&lowered).map(|m| m.as_str()).collect();
    if words.is_empty() {
        return ParseOutcome::new(OutcomeKind::Malformed, text);
    }
    let resolved: BTreeSet<Resolved> = words.iter().filter_map(|w| resolve(w, scheme, dict)).collect();
    if resolved.is_empty() {
        return ParseOutcome::new(OutcomeKind::OutOfVocabulary(lowered.trim().to_string()), text);
    }
    decide(resolved, scheme, text)
}

/// Decodes a one-hot bitstring of the alphabet's width.
pub fn parse_mask(text: &str, alphabet: &MaskAlphabet) -> ParseOutcome {
    let width = alphabet.width();
    let runs: Vec<&str> = BITS.find_iter(text).map(|m| m.as_str()).collect();
    let mut candidates: Vec<&str> = runs.iter().copied().filter(|r| r.len() == width).collect();
    candidates.dedup();
    let code = match candidates.as_slice() {
        [] => return ParseOutcome::new(OutcomeKind::Malformed, text),
        [one] => *one,
        _ => return ParseOutcome::new(OutcomeKind::Ambiguous, text),
    };
    match code.matches('1').count() {
        0 => ParseOutcome::new(OutcomeKind::Malformed, text),
        1 => match alphabet.0.iter().find(|(_, m)| m == code) {
            Some((class, _)) => ParseOutcome::parsed(class.clone(), text),
            None => ParseOutcome::new(OutcomeKind::OutOfVocabulary(code.to_string()), text),
        },
        _ => ParseOutcome::new(OutcomeKind::Ambiguous, text),
    }
}

fn as_number(v: &Value) -> Option<f64> {
    match v {
        Value::Number(n) => n.as_f64(),
        Value::String(s) => s.trim().trim_end_matches('%').trim().parse().ok(),
        _ => None,
    }
}

fn percent_entries(value: &Value, out: &mut Vec<(String, f64)>) {
    match value {
        Value::Object(map) => {
            let label = map.get("emotion").and_then(Value::as_str);
            let amount = ["percentage", "percent", "value", "score"]
                .iter()
                .find_map(|k| map.get(*k).and_then(as_number));
            if let (Some(label), Some(amount)) = (label, amount) {
                out.push((label.to_string(), amount));
                return;
            }
            for (k, v) in map {
                if let Some(n) = as_number(v) {
                    out.push((k.clone(), n));
                }
            }
        }
        Value::Array(items) => items.iter().for_each(|i| percent_entries(i, out)),
        _ => {}
    }
}

/// Decodes a class → percentage object; the strict maximum wins.
pub fn parse_percent(text: &str, scheme: &GroupingScheme, dict: &SynonymDictionary) -> ParseOutcome {
    let Some(json) = extract_json(&text.to_lowercase()) else {
        return ParseOutcome::new(OutcomeKind::Malformed, text);
    };
    let mut entries = Vec::new();
    percent_entries(&json, &mut entries);

    let mut totals: BTreeMap<usize, f64> = BTreeMap::new();
    for (key, amount) in entries {
        if let Some(Resolved::Class(i)) = resolve(&key, scheme, dict) {
            if amount.is_finite() {
                *totals.entry(i).or_default() += amount;
            }
        }
    }
    let Some(best) = totals.values().copied().reduce(f64::max) else {
        return ParseOutcome::new(OutcomeKind::Malformed, text);
    };
    let winners: Vec<usize> = totals.iter().filter(|(_, &v)| v == best).map(|(&i, _)| i).collect();
    match winners.as_slice() {
        [one] => ParseOutcome::parsed(scheme.class_names()[*one].clone(), text),
        _ => ParseOutcome::new(OutcomeKind::Ambiguous, text),
    }
}

/// Looks up the first integer token.
pub fn parse_numeric(text: &str, alphabet: &NumericAlphabet) -> ParseOutcome {
    let Some(token) = INTEGER.find(text).map(|m| m.as_str()) else {
        return ParseOutcome::new(OutcomeKind::Malformed, text);
    };
    let hit = token
        .parse::<u32>()
        .ok()
        .and_then(|n| alphabet.0.iter().find(|(_, code)| *code == n));
    match hit {
        Some((class, _)) => ParseOutcome::parsed(class.clone(), text),
        None => ParseOutcome::new(OutcomeKind::OutOfVocabulary(token.to_string()), text),
    }
}

/// Decodes the model's stated inverse and maps it back through the
/// involution, so the outcome names the text's own emotion.
pub fn parse_inverse(text: &str, scheme: &GroupingScheme, dict: &SynonymDictionary, inv: &Involution) -> ParseOutcome {
    let outcome = parse_basic(text, scheme, dict);
    match outcome.class().and_then(|c| c.parse::<Emotion>().ok()) {
        Some(stated) if scheme.is_identity() => ParseOutcome::parsed(inv.apply(stated).name(), text),
        _ => outcome,
    }
}

/// Cleanup rules per dialect plus the synonym dictionary.
#[derive(Debug, Clone)]
pub struct Normalizer {
    dictionary: SynonymDictionary,
    rules: BTreeMap<DialectKind, CleanupRules>,
}

impl Default for Normalizer {
    fn default() -> Self {
        Self {
            dictionary: SynonymDictionary::default(),
            rules: DialectKind::ALL
                .iter()
                .map(|&d| (d, CleanupRules::for_dialect(d)))
                .collect(),
        }
    }
}

impl Normalizer {
    pub fn with_dictionary(mut self, dictionary: SynonymDictionary) -> Self {
        self.dictionary = dictionary;
        self
    }

    pub fn with_rules(mut self, dialect: DialectKind, rules: CleanupRules) -> Self {
        self.rules.insert(dialect, rules);
        self
    }

    pub fn dictionary(&self) -> &SynonymDictionary {
        &self.dictionary
    }

    /// Cleans `raw` and decodes it under the grammar the prompt asked for.
    pub fn normalize(&self, prompt: &RenderedPrompt, raw: &str) -> ParseOutcome {
        let cleaned = match self.rules.get(&prompt.dialect) {
            Some(rules) => cleanup(raw, rules),
            None => raw.trim().to_lowercase(),
        };
        let scheme = &prompt.scheme;
        let mut outcome = match prompt.answer_grammar.kind {
            GrammarKind::SingleLabel => parse_basic(&cleaned, scheme, &self.dictionary),
            GrammarKind::Bitstring(_) => parse_mask(&cleaned, &mask_alphabet(scheme)),
            GrammarKind::PercentObject => parse_percent(&cleaned, scheme, &self.dictionary),
            GrammarKind::IntegerCode => parse_numeric(&cleaned, &numeric_alphabet(scheme)),
            GrammarKind::SingleLabelInverse => {
                let inv = prompt.involution.clone().unwrap_or_default();
                parse_inverse(&cleaned, scheme, &self.dictionary, &inv)
            }
        };
        outcome.raw = raw.to_string();
        outcome
    }
}

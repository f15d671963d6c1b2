//! Prompt rendering for the five answer strategies and three model dialects.
//!
//! Templates live in `templates/<dialect>/<strategy>.txt`. A template is a
//! sequence of `@system` / `@user` blocks with `{placeholder}` fields; a line
//! holding only a placeholder that expands to nothing is dropped.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::taxonomy::{GroupingScheme, Involution};

/// Name of the single function offered to tool-calling backends.
pub const TOOL_NAME: &str = "report_emotion";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PromptError {
    #[error("unknown strategy `{0}`; valid strategies are basic, mask, percent, numeric, inverse")]
    UnknownStrategy(String),
    #[error("unknown dialect `{0}`; valid dialects are plain-instruct, quoted-input, header-delimited")]
    UnknownDialect(String),
    #[error("template {0}: {1}")]
    Template(String, String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptStrategy {
    Basic,
    Mask,
    Percent,
    Numeric,
    Inverse,
}

impl PromptStrategy {
    pub const ALL: [PromptStrategy; 5] = [
        PromptStrategy::Basic,
        PromptStrategy::Mask,
        PromptStrategy::Percent,
        PromptStrategy::Numeric,
        PromptStrategy::Inverse,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PromptStrategy::Basic => "basic",
            PromptStrategy::Mask => "mask",
            PromptStrategy::Percent => "percent",
            PromptStrategy::Numeric => "numeric",
            PromptStrategy::Inverse => "inverse",
        }
    }
}

impl fmt::Display for PromptStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PromptStrategy {
    type Err = PromptError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| PromptError::UnknownStrategy(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DialectKind {
    /// Plain instructions followed by the sentence.
    PlainInstruct,
    /// Sentence wrapped in triple quotes.
    QuotedInput,
    /// Segments wrapped in `<|start_header_id|>` ... `<|eot_id|>` tokens.
    HeaderDelimited,
}

impl DialectKind {
    pub const ALL: [DialectKind; 3] = [
        DialectKind::PlainInstruct,
        DialectKind::QuotedInput,
        DialectKind::HeaderDelimited,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DialectKind::PlainInstruct => "plain-instruct",
            DialectKind::QuotedInput => "quoted-input",
            DialectKind::HeaderDelimited => "header-delimited",
        }
    }
}

impl fmt::Display for DialectKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DialectKind {
    type Err = PromptError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| PromptError::UnknownDialect(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDialect {
    pub kind: DialectKind,
    pub name: String,
}

impl ModelDialect {
    /// A dialect named after its kind.
    pub fn new(kind: DialectKind) -> Self {
        Self {
            kind,
            name: kind.name().to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub role: Role,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "length")]
pub enum GrammarKind {
    SingleLabel,
    Bitstring(usize),
    PercentObject,
    IntegerCode,
    SingleLabelInverse,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GrammarDescriptor {
    pub kind: GrammarKind,
    /// Accepted surface forms: class names, mask codes or numeric codes.
    pub vocabulary: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedPrompt {
    pub dialect: DialectKind,
    pub strategy: PromptStrategy,
    pub scheme_k: usize,
    pub segments: Vec<Segment>,
    pub answer_grammar: GrammarDescriptor,
    pub scheme: GroupingScheme,
    /// Pairing stated in the prompt; present for the inverse strategy only.
    pub involution: Option<Involution>,
}

impl RenderedPrompt {
    /// Single-string form sent to text-generation endpoints. Header-delimited
    /// prompts get the special tokens and an open assistant turn.
    pub fn flatten(&self) -> String {
        match self.dialect {
            DialectKind::HeaderDelimited => {
                let mut out = String::from("<|begin_of_text|>");
                for seg in &self.segments {
                    let header = match seg.role {
                        Role::System => "system",
                        Role::User => " user ",
                    };
                    out.push_str(&format!(
                        "<|start_header_id|>{header}<|end_header_id|>{}<|eot_id|>\n",
                        seg.content
                    ));
                }
                out.push_str("<|start_header_id|>assistant<|end_header_id|>");
                out
            }
            _ => self
                .segments
                .iter()
                .map(|s| s.content.as_str())
                .collect::<Vec<_>>()
                .join("\n"),
        }
    }
}

/// Class → one-hot code, in scheme order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskAlphabet(pub Vec<(String, String)>);

/// Class → 1-based code, in scheme order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NumericAlphabet(pub Vec<(String, u32)>);

impl MaskAlphabet {
    pub fn code_of(&self, class: &str) -> Option<&str> {
        self.0.iter().find(|(c, _)| c == class).map(|(_, m)| m.as_str())
    }

    pub fn width(&self) -> usize {
        self.0.len()
    }
}

impl NumericAlphabet {
    pub fn code_of(&self, class: &str) -> Option<u32> {
        self.0.iter().find(|(c, _)| c == class).map(|(_, n)| *n)
    }
}

/// One-hot codes with the class at index `i` setting the `i`-th bit from the
/// right, so sadness is `000001` and surprise `100000` at k = 6.
pub fn mask_alphabet(scheme: &GroupingScheme) -> MaskAlphabet {
    let k = scheme.k();
    MaskAlphabet(
        scheme
            .class_names()
            .iter()
            .enumerate()
            .map(|(i, class)| {
                let code: String = (0..k).map(|pos| if pos == k - 1 - i { '1' } else { '0' }).collect();
                (class.clone(), code)
            })
            .collect(),
    )
}

pub fn numeric_alphabet(scheme: &GroupingScheme) -> NumericAlphabet {
    NumericAlphabet(
        scheme
            .class_names()
            .iter()
            .enumerate()
            .map(|(i, c)| (c.clone(), i as u32 + 1))
            .collect(),
    )
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToolSchema {
    pub name: String,
    pub emotion_enum: Vec<String>,
}

impl ToolSchema {
    /// The `tools` entry of a chat-completions request.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "type": "function",
            "function": {
                "name": self.name,
                "description": "Report the single emotion detected in the text.",
                "parameters": {
                    "type": "object",
                    "properties": {
                        "emotion": { "type": "string", "enum": self.emotion_enum }
                    },
                    "required": ["emotion"]
                }
            }
        })
    }
}

pub fn tool_schema(scheme: &GroupingScheme) -> ToolSchema {
    ToolSchema {
        name: TOOL_NAME.to_string(),
        emotion_enum: scheme.class_names().to_vec(),
    }
}

pub fn answer_grammar(strategy: PromptStrategy, scheme: &GroupingScheme) -> GrammarDescriptor {
    let names = scheme.class_names().to_vec();
    match strategy {
        PromptStrategy::Basic => GrammarDescriptor {
            kind: GrammarKind::SingleLabel,
            vocabulary: names,
        },
        PromptStrategy::Mask => GrammarDescriptor {
            kind: GrammarKind::Bitstring(scheme.k()),
            vocabulary: mask_alphabet(scheme).0.into_iter().map(|(_, m)| m).collect(),
        },
        PromptStrategy::Percent => GrammarDescriptor {
            kind: GrammarKind::PercentObject,
            vocabulary: names,
        },
        PromptStrategy::Numeric => GrammarDescriptor {
            kind: GrammarKind::IntegerCode,
            vocabulary: numeric_alphabet(scheme)
                .0
                .into_iter()
                .map(|(_, n)| n.to_string())
                .collect(),
        },
        PromptStrategy::Inverse => GrammarDescriptor {
            kind: GrammarKind::SingleLabelInverse,
            vocabulary: names,
        },
    }
}

fn builtin_template(dialect: DialectKind, strategy: PromptStrategy) -> &'static str {
    use DialectKind::*;
    use PromptStrategy::*;
    match (dialect, strategy) {
        (PlainInstruct, Basic) => include_str!("../templates/plain-instruct/basic.txt"),
        (PlainInstruct, Mask) => include_str!("../templates/plain-instruct/mask.txt"),
        (PlainInstruct, Percent) => include_str!("../templates/plain-instruct/percent.txt"),
        (PlainInstruct, Numeric) => include_str!("../templates/plain-instruct/numeric.txt"),
        (PlainInstruct, Inverse) => include_str!("../templates/plain-instruct/inverse.txt"),
        (QuotedInput, Basic) => include_str!("../templates/quoted-input/basic.txt"),
        (QuotedInput, Mask) => include_str!("../templates/quoted-input/mask.txt"),
        (QuotedInput, Percent) => include_str!("../templates/quoted-input/percent.txt"),
        (QuotedInput, Numeric) => include_str!("../templates/quoted-input/numeric.txt"),
        (QuotedInput, Inverse) => include_str!("../templates/quoted-input/inverse.txt"),
        (HeaderDelimited, Basic) => include_str!("../templates/header-delimited/basic.txt"),
        (HeaderDelimited, Mask) => include_str!("../templates/header-delimited/mask.txt"),
        (HeaderDelimited, Percent) => include_str!("../templates/header-delimited/percent.txt"),
        (HeaderDelimited, Numeric) => include_str!("../templates/header-delimited/numeric.txt"),
        (HeaderDelimited, Inverse) => include_str!("../templates/header-delimited/inverse.txt"),
    }
}

const PLACEHOLDERS: [&str; 9] = [
    "classes",
    "classes_or",
    "k",
    "group_definitions",
    "group_clauses",
    "mask_codes",
    "numeric_codes",
    "inverse_pairs",
    "sentence",
];

/// Checks the block structure and placeholder names of a template.
pub fn validate_template(name: &str, text: &str) -> Result<(), PromptError> {
    let err = |msg: String| PromptError::Template(name.to_string(), msg);
    let mut saw_user = false;
    let mut sentence_fields = 0;
    for (i, line) in text.lines().enumerate() {
        if i == 0 && !line.starts_with('@') {
            return Err(err("must start with an @system or @user block".into()));
        }
        match line {
            "@user" => saw_user = true,
            "@system" => {}
            l if l.starts_with('@') => return Err(err(format!("unknown block marker `{l}`"))),
            _ => {}
        }
        let mut rest = line;
        while let Some(start) = rest.find('{') {
            let Some(len) = rest[start..].find('}') else { break };
            let field = &rest[start + 1..start + len];
            if !PLACEHOLDERS.contains(&field) {
                return Err(err(format!("unknown placeholder {{{field}}}")));
            }
            if field == "sentence" {
                sentence_fields += 1;
            }
            rest = &rest[start + len + 1..];
        }
    }
    if !saw_user {
        return Err(err("no @user block".into()));
    }
    if sentence_fields != 1 {
        return Err(err("{sentence} must appear exactly once".into()));
    }
    Ok(())
}

/// Renders prompts from the built-in (or overridden) templates.
#[derive(Debug, Clone, Default)]
pub struct PromptEngine {
    involution: Involution,
    overrides: BTreeMap<(DialectKind, PromptStrategy), String>,
}

impl PromptEngine {
    pub fn new(involution: Involution) -> Self {
        Self {
            involution,
            overrides: BTreeMap::new(),
        }
    }

    pub fn involution(&self) -> &Involution {
        &self.involution
    }

    pub fn with_template(
        mut self,
        dialect: DialectKind,
        strategy: PromptStrategy,
        text: String,
    ) -> Result<Self, PromptError> {
        validate_template(&format!("{dialect}/{strategy}"), &text)?;
        self.overrides.insert((dialect, strategy), text);
        Ok(self)
    }

    pub fn template(&self, dialect: DialectKind, strategy: PromptStrategy) -> &str {
        self.overrides
            .get(&(dialect, strategy))
            .map(String::as_str)
            .unwrap_or_else(|| builtin_template(dialect, strategy))
    }

    pub fn render(
        &self,
        strategy: PromptStrategy,
        dialect: &ModelDialect,
        scheme: &GroupingScheme,
        sentence: &str,
    ) -> RenderedPrompt {
        let fields = self.fields(scheme, sentence);
        let template = self.template(dialect.kind, strategy);

        let mut segments: Vec<Segment> = Vec::new();
        let mut lines: Vec<String> = Vec::new();
        let mut role = None;
        let flush = |role: Option<Role>, lines: &mut Vec<String>, segments: &mut Vec<Segment>| {
            if let Some(role) = role {
                segments.push(Segment {
                    role,
                    content: lines.join("\n"),
                });
            }
            lines.clear();
        };
        for line in template.lines() {
            match line {
                "@system" | "@user" => {
                    flush(role, &mut lines, &mut segments);
                    role = Some(if line == "@system" { Role::System } else { Role::User });
                }
                _ => {
                    let expanded = expand(line, &fields);
                    let only_placeholder =
                        line.starts_with('{') && line.ends_with('}') && line.matches('{').count() == 1;
                    if !(only_placeholder && expanded.is_empty()) {
                        lines.push(expanded);
                    }
                }
            }
        }
        flush(role, &mut lines, &mut segments);

        RenderedPrompt {
            dialect: dialect.kind,
            strategy,
            scheme_k: scheme.k(),
            segments,
            answer_grammar: answer_grammar(strategy, scheme),
            scheme: scheme.clone(),
            involution: (strategy == PromptStrategy::Inverse).then(|| self.involution.clone()),
        }
    }

    fn fields(&self, scheme: &GroupingScheme, sentence: &str) -> BTreeMap<&'static str, String> {
        let classes = scheme.class_names();
        let groups: Vec<(String, String)> = (0..scheme.k())
            .map(|i| {
                let members: Vec<&str> = scheme.preimage(i).iter().map(|e| e.name()).collect();
                (classes[i].clone(), members.join(", "))
            })
            .collect();
        let group_definitions = if scheme.is_identity() {
            String::new()
        } else {
            let defs: Vec<String> = groups.iter().map(|(c, m)| format!("{c} ({m})")).collect();
            format!("The emotion groups are: {}.", defs.join(", "))
        };
        let clauses: Vec<String> = groups
            .iter()
            .map(|(c, m)| format!("the {c} emotion group will be ({m})"))
            .collect();
        let masks: Vec<String> = mask_alphabet(scheme)
            .0
            .iter()
            .map(|(c, m)| format!("{c} = {m}"))
            .collect();
        let numbers: Vec<String> = numeric_alphabet(scheme)
            .0
            .iter()
            .map(|(c, n)| format!("{c} = {n}"))
            .collect();
        let pairs: Vec<String> = self
            .involution
            .pairs()
            .iter()
            .map(|(a, b)| if a == b { format!("{a}/{a}") } else { format!("{a}/{b}") })
            .collect();

        BTreeMap::from([
            ("classes", classes.join(", ")),
            ("classes_or", series(classes, "or")),
            ("k", scheme.k().to_string()),
            ("group_definitions", group_definitions),
            ("group_clauses", series(&clauses, "and")),
            ("mask_codes", masks.join(", ")),
            ("numeric_codes", numbers.join(", ")),
            ("inverse_pairs", pairs.join(", ")),
            ("sentence", sentence.to_string()),
        ])
    }
}

/// `a`, `a or b`, `a, b, or c`.
fn series(items: &[String], conj: &str) -> String {
    match items {
        [] => String::new(),
        [one] => one.clone(),
        [a, b] => format!("{a} {conj} {b}"),
        [init @ .., last] => format!("{}, {conj} {last}", init.join(", ")),
    }
}

fn expand(line: &str, fields: &BTreeMap<&'static str, String>) -> String {
    let mut out = String::with_capacity(line.len());
    let mut rest = line;
    while let Some(start) = rest.find('{') {
        let Some(len) = rest[start..].find('}') else { break };
        let name = &rest[start + 1..start + len];
        out.push_str(&rest[..start]);
        match fields.get(name) {
            Some(value) => out.push_str(value),
            None => out.push_str(&rest[start..=start + len]),
        }
        rest = &rest[start + len + 1..];
    }
    out.push_str(rest);
    out
}

/// Renders with the default involution and built-in templates.
pub fn render(
    strategy: PromptStrategy,
    dialect: &ModelDialect,
    scheme: &GroupingScheme,
    sentence: &str,
) -> RenderedPrompt {
    PromptEngine::default().render(strategy, dialect, scheme, sentence)
}

/// Recovers the target sentence from a prompt's last user segment or from a
/// flattened prompt, using the dialect framing.
pub fn extract_sentence(text: &str) -> &str {
    const USER_HEADER: &str = "<|start_header_id|> user <|end_header_id|>";
    if let Some(start) = text.find(USER_HEADER) {
        let body = &text[start + USER_HEADER.len()..];
        return body.find("<|eot_id|>").map_or(body, |end| &body[..end]);
    }
    if let (Some(open), Some(close)) = (text.find("'''"), text.rfind("'''")) {
        if close > open + 3 {
            return &text[open + 3..close];
        }
    }
    if let Some(pos) = text.rfind("->\n") {
        return &text[pos + 3..];
    }
    text
}

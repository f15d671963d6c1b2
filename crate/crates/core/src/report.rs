//! Report files derived from a [`RunRecord`]: canonical JSON, metric and
//! confusion CSVs, SVG heatmaps, delta tables and label entropies.
//!
//! Metrics are stored in [0, 1] and only scaled to percentages here.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::metrics::{
    delta_groupings, delta_models, delta_prompts, Averaging, ConfusionMatrix, DeltaKind, MetricDelta, MetricSet,
};
use crate::normalize::FailureKind;
use crate::prompt::PromptStrategy;
use crate::runner::{CellResult, Family, RunRecord};
use crate::taxonomy::{entropy, induced_distribution, scheme_for, LabelDistribution};

pub const METRICS_HEADER: &str = "strategy,model,k,accuracy,recall,precision,f_score,failure_rate";
pub const DELTAS_HEADER: &str = "kind,scope,lhs,rhs,averaging,accuracy,recall,precision,f_score,failure_rate";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("runs are not comparable as {kind}: {message}")]
    Incompatible { kind: &'static str, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Percentage with two decimals; never prints a negative zero.
pub fn percent(v: f64) -> String {
    let s = format!("{:.2}", v * 100.0);
    if s == "-0.00" {
        "0.00".into()
    } else {
        s
    }
}

/// Rebuilds every object with keys inserted in sorted order, whatever map
/// implementation serde_json was built with.
fn canonical(v: Value) -> Value {
    match v {
        Value::Object(map) => {
            let sorted: BTreeMap<String, Value> = map.into_iter().map(|(k, v)| (k, canonical(v))).collect();
            Value::Object(sorted.into_iter().collect::<Map<String, Value>>())
        }
        Value::Array(items) => Value::Array(items.into_iter().map(canonical).collect()),
        other => other,
    }
}

fn metric_json(m: &MetricSet) -> Value {
    json!({
        "accuracy": percent(m.accuracy),
        "recall": percent(m.recall),
        "precision": percent(m.precision),
        "f_score": percent(m.f_score),
        "failure_rate": percent(m.failure_rate),
    })
}

fn delta_json(d: &MetricDelta) -> Value {
    json!({
        "accuracy": percent(d.accuracy),
        "recall": percent(d.recall),
        "precision": percent(d.precision),
        "f_score": percent(d.f_score),
        "failure_rate": percent(d.failure_rate),
    })
}

fn failures_json(matrix: &ConfusionMatrix) -> Value {
    let mut out = Map::new();
    for (kind, n) in matrix.failures_by_kind() {
        out.insert(kind.name().into(), json!(n));
    }
    Value::Object(out)
}

fn cell_metrics(record: &RunRecord, cell: &CellResult, averaging: Averaging) -> Option<MetricSet> {
    cell.metrics(averaging, record.scoring_mode)
}

/// Shannon entropy, in bits, of the evaluated gold labels under each scheme
/// used by the record.
pub fn entropies(record: &RunRecord) -> BTreeMap<usize, f64> {
    let dist = LabelDistribution::over_labels(record.gold_counts);
    let mut out = BTreeMap::new();
    for cell in &record.cells {
        if out.contains_key(&cell.k) {
            continue;
        }
        let scheme = scheme_for(cell.k).expect("record schemes are supported");
        if let Ok(h) = entropy(&induced_distribution(&scheme, &dist)) {
            out.insert(cell.k, h);
        }
    }
    out
}

/// Canonical JSON: sorted keys, percentages as two-decimal strings.
pub fn to_json(record: &RunRecord) -> String {
    let cells: Vec<Value> = record
        .cells
        .iter()
        .map(|c| {
            let metrics: Map<String, Value> = Averaging::ALL
                .iter()
                .filter_map(|&a| cell_metrics(record, c, a).map(|m| (a.name().to_string(), metric_json(&m))))
                .collect();
            let mut v = json!({
                "backend": c.backend,
                "family": c.family.name(),
                "dialect": c.dialect.name(),
                "strategy": c.strategy.name(),
                "k": c.k,
                "status": serde_json::to_value(&c.status).expect("status serializes"),
                "planned": c.planned,
                "evaluated": c.matrix.evaluated(),
                "classes": c.matrix.classes(),
                "confusion": c.matrix.counts(),
                "failures": failures_json(&c.matrix),
                "metrics": metrics,
            });
            if let Value::Object(status) = v["status"].take() {
                for (k, val) in status {
                    v[k] = val;
                }
            }
            v
        })
        .collect();
    let deltas: Map<String, Value> = record_deltas(record)
        .into_iter()
        .map(|(kind, rows)| {
            let rows: Vec<Value> = rows
                .iter()
                .map(|r| json!({"scope": r.scope, "lhs": r.lhs, "rhs": r.rhs, "averaging": r.averaging.name(), "delta": delta_json(&r.delta)}))
                .collect();
            (kind.name().to_string(), Value::Array(rows))
        })
        .collect();
    let entropy: Map<String, Value> = entropies(record)
        .into_iter()
        .map(|(k, h)| (format!("k{k}"), json!(format!("{h:.6}"))))
        .collect();
    let gold: Map<String, Value> = crate::taxonomy::canonical_labels()
        .iter()
        .map(|e| (e.name().to_string(), json!(record.gold_counts[e.id()])))
        .collect();
    let doc = json!({
        "fingerprint": record.fingerprint,
        "scoring_mode": serde_json::to_value(record.scoring_mode).expect("mode serializes"),
        "gold_distribution": gold,
        "entropy_bits": entropy,
        "cells": cells,
        "deltas": deltas,
    });
    let mut out = serde_json::to_string_pretty(&canonical(doc)).expect("report serializes");
    out.push('\n');
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub strategy: PromptStrategy,
    pub model: String,
    pub k: usize,
    pub metrics: MetricSet,
}

fn first_index<T: PartialEq>(items: &mut Vec<T>, item: T) -> usize {
    items.iter().position(|x| *x == item).unwrap_or_else(|| {
        items.push(item);
        items.len() - 1
    })
}

/// One row per scored cell, ordered by strategy, then scheme, then model,
/// each in order of first appearance.
pub fn metric_rows(record: &RunRecord, averaging: Averaging) -> Vec<MetricRow> {
    let (mut strategies, mut ks, mut models) = (Vec::new(), Vec::new(), Vec::new());
    let mut rows: Vec<((usize, usize, usize), MetricRow)> = Vec::new();
    for c in &record.cells {
        let order = (
            first_index(&mut strategies, c.strategy),
            first_index(&mut ks, c.k),
            first_index(&mut models, c.backend.clone()),
        );
        if let Some(metrics) = cell_metrics(record, c, averaging) {
            rows.push((
                order,
                MetricRow {
                    strategy: c.strategy,
                    model: c.backend.clone(),
                    k: c.k,
                    metrics,
                },
            ));
        }
    }
    rows.sort_by_key(|(o, _)| *o);
    rows.into_iter().map(|(_, r)| r).collect()
}

pub fn metrics_csv(record: &RunRecord, averaging: Averaging) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in metric_rows(record, averaging) {
        let m = &r.metrics;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.strategy.name(),
            csv_field(&r.model),
            r.k,
            percent(m.accuracy),
            percent(m.recall),
            percent(m.precision),
            percent(m.f_score),
            percent(m.failure_rate)
        );
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Gold rows, predicted columns, then the failed samples of each row.
pub fn confusion_csv(matrix: &ConfusionMatrix) -> String {
    let mut out = String::from("gold");
    for c in matrix.classes() {
        let _ = write!(out, ",{}", csv_field(c));
    }
    out.push_str(",failed\n");
    for (i, class) in matrix.classes().iter().enumerate() {
        out.push_str(&csv_field(class));
        for n in &matrix.counts()[i] {
            let _ = write!(out, ",{n}");
        }
        let _ = writeln!(out, ",{}", matrix.row_failure_count(i));
    }
    out
}

fn shade(fraction: f64) -> (u8, u8, u8, bool) {
    let lerp = |from: f64, to: f64| (from + (to - from) * fraction).round() as u8;
    (lerp(255.0, 8.0), lerp(255.0, 48.0), lerp(255.0, 107.0), fraction > 0.5)
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Heatmap shaded by each row's share of that row's samples; the last
/// column counts failed samples.
pub fn render_confusion_svg(matrix: &ConfusionMatrix) -> String {
    const CELL: usize = 64;
    const LEFT: usize = 96;
    const TOP: usize = 72;
    let k = matrix.k();
    let width = LEFT + CELL * (k + 1) + 16;
    let height = TOP + CELL * k + 40;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{width}" height="{height}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="13">predicted</text>"#,
        LEFT + CELL * (k + 1) / 2
    );
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{}" text-anchor="middle" font-size="13" transform="rotate(-90 16 {})">gold</text>"#,
        TOP + CELL * k / 2,
        TOP + CELL * k / 2
    );
    let headers = matrix.classes().iter().map(String::as_str).chain(["failed"]);
    for (j, name) in headers.enumerate() {
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            LEFT + CELL * j + CELL / 2,
            TOP - 10,
            xml_escape(name)
        );
    }
    for (i, class) in matrix.classes().iter().enumerate() {
        let y = TOP + CELL * i;
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
            LEFT - 8,
            y + CELL / 2 + 4,
            xml_escape(class)
        );
        let row_total = matrix.evaluated_in_row(i);
        let values = matrix.counts()[i].iter().copied().chain([matrix.row_failure_count(i)]);
        for (j, n) in values.enumerate() {
            let fraction = if row_total == 0 {
                0.0
            } else {
                n as f64 / row_total as f64
            };
            let (r, g, b, dark) = shade(fraction);
            let x = LEFT + CELL * j;
            let _ = writeln!(
                svg,
                r##"<rect x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="#{r:02x}{g:02x}{b:02x}" stroke="#cccccc"/>"##
            );
            let _ = writeln!(
                svg,
                r#"<text x="{}" y="{}" text-anchor="middle" fill="{}">{n}</text>"#,
                x + CELL / 2,
                y + CELL / 2 + 4,
                if dark { "white" } else { "black" }
            );
        }
    }
    svg.push_str("</svg>\n");
    svg
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeltaRow {
    pub kind: DeltaKind,
    /// What was held fixed, e.g. `backend=gemma k=6`.
    pub scope: String,
    pub lhs: String,
    pub rhs: String,
    pub averaging: Averaging,
    pub delta: MetricDelta,
}

pub fn deltas_csv(rows: &[DeltaRow]) -> String {
    let mut out = format!("{DELTAS_HEADER}\n");
    for r in rows {
        let d = &r.delta;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.kind.name(),
            csv_field(&r.scope),
            csv_field(&r.lhs),
            csv_field(&r.rhs),
            r.averaging.name(),
            percent(d.accuracy),
            percent(d.recall),
            percent(d.precision),
            percent(d.f_score),
            percent(d.failure_rate)
        );
    }
    out
}

/// Deltas available inside one run: every strategy pair per (model, k),
/// every scheme pair per (model, strategy), and LLM-minus-fine-tuned means
/// per (strategy, k) when both families are present. Macro averaging.
pub fn record_deltas(record: &RunRecord) -> BTreeMap<DeltaKind, Vec<DeltaRow>> {
    let averaging = Averaging::Macro;
    let scored: Vec<(&CellResult, MetricSet)> = record
        .cells
        .iter()
        .filter_map(|c| cell_metrics(record, c, averaging).map(|m| (c, m)))
        .collect();
    let mut out: BTreeMap<DeltaKind, Vec<DeltaRow>> = BTreeMap::new();

    for (i, (a, ma)) in scored.iter().enumerate() {
        for (b, mb) in &scored[i + 1..] {
            if a.backend == b.backend && a.k == b.k && a.strategy != b.strategy {
                let map = BTreeMap::from([(a.strategy, *ma), (b.strategy, *mb)]);
                if let Ok(d) = delta_prompts(&map, a.strategy, b.strategy) {
                    out.entry(DeltaKind::PromptPair).or_default().push(DeltaRow {
                        kind: d.kind,
                        scope: format!("backend={} k={}", a.backend, a.k),
                        lhs: d.lhs,
                        rhs: d.rhs,
                        averaging,
                        delta: d.delta,
                    });
                }
            }
            if a.backend == b.backend && a.strategy == b.strategy && a.k != b.k {
                let ((fk, fm), (ck, cm)) = if a.k > b.k {
                    ((a.k, ma), (b.k, mb))
                } else {
                    ((b.k, mb), (a.k, ma))
                };
                if let Ok(d) = delta_groupings((fk, fm), (ck, cm)) {
                    out.entry(DeltaKind::GroupingPair).or_default().push(DeltaRow {
                        kind: d.kind,
                        scope: format!("backend={} strategy={}", a.backend, a.strategy.name()),
                        lhs: d.lhs,
                        rhs: d.rhs,
                        averaging,
                        delta: d.delta,
                    });
                }
            }
        }
    }

    // (strategy, k) → LLM metric sets, fine-tuned metric sets
    type FamilyGroup = ((PromptStrategy, usize), Vec<MetricSet>, Vec<MetricSet>);
    let mut groups: Vec<FamilyGroup> = Vec::new();
    for (c, m) in &scored {
        let key = (c.strategy, c.k);
        let idx = match groups.iter().position(|(k, _, _)| *k == key) {
            Some(i) => i,
            None => {
                groups.push((key, Vec::new(), Vec::new()));
                groups.len() - 1
            }
        };
        match c.family {
            Family::Llm => groups[idx].1.push(*m),
            Family::Pre => groups[idx].2.push(*m),
        }
    }
    for ((strategy, k), llm, pre) in groups {
        if let Ok(d) = delta_models(&llm, &pre) {
            out.entry(DeltaKind::ModelFamily).or_default().push(DeltaRow {
                kind: d.kind,
                scope: format!("strategy={} k={k}", strategy.name()),
                lhs: d.lhs,
                rhs: d.rhs,
                averaging,
                delta: d.delta,
            });
        }
    }
    out
}

/// Differences `a − b` between two runs.
///
/// - model-family: per (strategy, k) present in both, the mean over all of
///   `a`'s backends minus the mean over all of `b`'s.
/// - prompt-pair: per (backend, k), each run must hold exactly one strategy.
/// - grouping-pair: per (backend, strategy), each run must hold exactly one
///   scheme and the two schemes must differ.
pub fn compare_runs(a: &RunRecord, b: &RunRecord, kind: DeltaKind) -> Result<Vec<DeltaRow>, ReportError> {
    let averaging = Averaging::Macro;
    let incompatible = |message: String| ReportError::Incompatible {
        kind: kind.name(),
        message,
    };
    let scored = |r: &RunRecord| -> Vec<(CellResult, MetricSet)> {
        r.cells
            .iter()
            .filter_map(|c| cell_metrics(r, c, averaging).map(|m| (c.clone(), m)))
            .collect()
    };
    let (sa, sb) = (scored(a), scored(b));
    let mut rows = Vec::new();
    match kind {
        DeltaKind::ModelFamily => {
            let mut keys: Vec<(PromptStrategy, usize)> = Vec::new();
            for (c, _) in &sa {
                if !keys.contains(&(c.strategy, c.k)) {
                    keys.push((c.strategy, c.k));
                }
            }
            for (strategy, k) in keys {
                let pick = |s: &[(CellResult, MetricSet)]| -> Vec<MetricSet> {
                    s.iter()
                        .filter(|(c, _)| c.strategy == strategy && c.k == k)
                        .map(|(_, m)| *m)
                        .collect()
                };
                let (ma, mb) = (pick(&sa), pick(&sb));
                if mb.is_empty() {
                    continue;
                }
                let d = delta_models(&ma, &mb).map_err(|e| incompatible(e.to_string()))?;
                let names = |s: &[(CellResult, MetricSet)]| -> String {
                    s.iter()
                        .filter(|(c, _)| c.strategy == strategy && c.k == k)
                        .map(|(c, _)| c.backend.as_str())
                        .collect::<Vec<_>>()
                        .join("+")
                };
                rows.push(DeltaRow {
                    kind,
                    scope: format!("strategy={} k={k}", strategy.name()),
                    lhs: names(&sa),
                    rhs: names(&sb),
                    averaging,
                    delta: d.delta,
                });
            }
        }
        DeltaKind::PromptPair | DeltaKind::GroupingPair => {
            // scope key → the single varying coordinate and its metrics
            type Scoped = BTreeMap<(String, String), Vec<(String, MetricSet)>>;
            let group = |s: &[(CellResult, MetricSet)]| -> Scoped {
                let mut m: Scoped = BTreeMap::new();
                for (c, metrics) in s {
                    let (scope, coordinate) = match kind {
                        DeltaKind::PromptPair => {
                            ((c.backend.clone(), format!("k={}", c.k)), c.strategy.name().to_string())
                        }
                        _ => (
                            (c.backend.clone(), format!("strategy={}", c.strategy.name())),
                            format!("k{}", c.k),
                        ),
                    };
                    m.entry(scope).or_default().push((coordinate, *metrics));
                }
                m
            };
            let (ga, gb) = (group(&sa), group(&sb));
            for (scope, va) in &ga {
                let Some(vb) = gb.get(scope) else {
                    continue;
                };
                let ([(ca, ma)], [(cb, mb)]) = (va.as_slice(), vb.as_slice()) else {
                    return Err(incompatible(format!(
                        "backend `{}` ({}) has several cells in one run",
                        scope.0, scope.1
                    )));
                };
                if ca == cb {
                    return Err(incompatible(format!(
                        "both runs use `{ca}` for backend `{}` ({})",
                        scope.0, scope.1
                    )));
                }
                rows.push(DeltaRow {
                    kind,
                    scope: format!("backend={} {}", scope.0, scope.1),
                    lhs: ca.clone(),
                    rhs: cb.clone(),
                    averaging,
                    delta: MetricDelta::between(ma, mb),
                });
            }
        }
    }
    if rows.is_empty() {
        return Err(incompatible("no cells line up between the two runs".into()));
    }
    Ok(rows)
}

pub fn cell_file_stem(cell: &CellResult) -> String {
    let safe: String = cell
        .backend
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '.' {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("confusion_{safe}_{}_k{}", cell.strategy.name(), cell.k)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Json,
    Csv,
    Svg,
}

impl std::str::FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "json" => Ok(Format::Json),
            "csv" => Ok(Format::Csv),
            "svg" => Ok(Format::Svg),
            other => Err(format!("unknown format `{other}` (expected json, csv or svg)")),
        }
    }
}

/// Writes one family of report files into `dir`, returning their paths.
pub fn write_format(record: &RunRecord, dir: &Path, format: Format) -> io::Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut put = |name: String, body: String| -> io::Result<()> {
        let path = dir.join(name);
        fs::write(&path, body)?;
        written.push(path);
        Ok(())
    };
    match format {
        Format::Json => put("report.json".into(), to_json(record))?,
        Format::Csv => {
            put("metrics.csv".into(), metrics_csv(record, Averaging::Macro))?;
            put("metrics_weighted.csv".into(), metrics_csv(record, Averaging::Weighted))?;
            for cell in record.cells.iter().filter(|c| c.matrix.evaluated() > 0) {
                put(format!("{}.csv", cell_file_stem(cell)), confusion_csv(&cell.matrix))?;
            }
            for (kind, rows) in record_deltas(record) {
                put(format!("deltas_{}.csv", kind.name()), deltas_csv(&rows))?;
            }
        }
        Format::Svg => {
            for cell in record.cells.iter().filter(|c| c.matrix.evaluated() > 0) {
                put(
                    format!("{}.svg", cell_file_stem(cell)),
                    render_confusion_svg(&cell.matrix),
                )?;
            }
        }
    }
    Ok(written)
}

pub fn write_all(record: &RunRecord, dir: &Path) -> io::Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for format in [Format::Json, Format::Csv, Format::Svg] {
        out.extend(write_format(record, dir, format)?);
    }
    Ok(out)
}

/// Failure counts of a cell, by kind name, for display.
pub fn failure_summary(matrix: &ConfusionMatrix) -> String {
    let by_kind = matrix.failures_by_kind();
    FailureKind::ALL
        .iter()
        .filter_map(|k| by_kind.get(k).map(|n| format!("{}={n}", k.name())))
        .collect::<Vec<_>>()
        .join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::ScoringMode;
    use crate::normalize::{OutcomeKind, ParseOutcome};
    use crate::prompt::DialectKind;
    use crate::runner::CellStatus;
    use crate::taxonomy::{group_label, Emotion};

    fn cell(backend: &str, family: Family, strategy: PromptStrategy, k: usize, correct_every: usize) -> CellResult {
        let scheme = scheme_for(k).unwrap();
        let mut matrix = ConfusionMatrix::for_scheme(&scheme);
        for i in 0..60 {
            let gold = Emotion::ALL[i % 6];
            let Some(g) = group_label(&scheme, gold) else { continue };
            let outcome = if (i + 1) % correct_every == 0 {
                ParseOutcome {
                    kind: OutcomeKind::Malformed,
                    raw: String::new(),
                }
            } else {
                ParseOutcome::parsed(g, "")
            };
            matrix.accumulate(g, &outcome).unwrap();
        }
        CellResult {
            backend: backend.into(),
            family,
            dialect: DialectKind::PlainInstruct,
            strategy,
            k,
            status: CellStatus::Complete,
            planned: matrix.evaluated() as usize,
            matrix,
        }
    }

    fn record(cells: Vec<CellResult>) -> RunRecord {
        RunRecord {
            fingerprint: "f".into(),
            scoring_mode: ScoringMode::Strict,
            gold_counts: [10; 6],
            cells,
        }
    }

    #[test]
    fn empty_record_is_valid_json() {
        let text = to_json(&RunRecord::empty());
        let v: Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["cells"], json!([]));
    }

    #[test]
    fn json_is_sorted_and_stable() {
        let r = record(vec![cell("a", Family::Llm, PromptStrategy::Basic, 6, 1000)]);
        let text = to_json(&r);
        assert_eq!(text, to_json(&r.clone()));
        let v: Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["cells"][0]["metrics"]["macro"]["accuracy"], "100.00");
        let keys: Vec<&String> = v.as_object().unwrap().keys().collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
        assert_eq!(v["entropy_bits"]["k6"], format!("{:.6}", 6f64.log2()));
    }

    #[test]
    fn metric_csv_shape() {
        let r = record(vec![
            cell("gemma", Family::Llm, PromptStrategy::Basic, 6, 5),
            cell("gpt", Family::Llm, PromptStrategy::Basic, 6, 7),
            cell("gemma", Family::Llm, PromptStrategy::Mask, 6, 3),
            cell("gpt", Family::Llm, PromptStrategy::Mask, 6, 2),
        ]);
        let csv = metrics_csv(&r, Averaging::Macro);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], METRICS_HEADER);
        assert_eq!(lines.len(), 5);
        assert!(lines[1].starts_with("basic,gemma,6,"));
        assert!(lines[2].starts_with("basic,gpt,6,"));
        assert!(lines[3].starts_with("mask,gemma,6,"));
        // the CSV value is the JSON value
        let json: Value = serde_json::from_str(&to_json(&r)).unwrap();
        let acc = lines[1].split(',').nth(3).unwrap();
        assert_eq!(json["cells"][0]["metrics"]["macro"]["accuracy"], acc);
    }

    #[test]
    fn confusion_csv_has_failure_column() {
        let c = cell("a", Family::Llm, PromptStrategy::Basic, 2, 4);
        let csv = confusion_csv(&c.matrix);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "gold,positive,negative,failed");
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[1].split(',').count(), 4);
    }

    #[test]
    fn svg_shading() {
        let m = ConfusionMatrix::from_counts(vec!["a".into(), "b".into()], vec![vec![5, 0], vec![0, 0]]).unwrap();
        let svg = render_confusion_svg(&m);
        assert!(svg.contains(r##"fill="#08306b""##), "diagonal is darkest");
        assert_eq!(svg.matches(r##"fill="#ffffff""##).count(), 5);
        assert_eq!(svg, render_confusion_svg(&m.clone()));
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn in_run_deltas() {
        let r = record(vec![
            cell("gemma", Family::Llm, PromptStrategy::Basic, 6, 5),
            cell("gemma", Family::Llm, PromptStrategy::Basic, 2, 3),
            cell("gemma", Family::Llm, PromptStrategy::Mask, 6, 2),
            cell("bert", Family::Pre, PromptStrategy::Basic, 6, 10),
        ]);
        let d = record_deltas(&r);
        assert_eq!(d[&DeltaKind::PromptPair].len(), 1);
        assert_eq!(d[&DeltaKind::GroupingPair].len(), 1);
        assert_eq!(d[&DeltaKind::GroupingPair][0].lhs, "k2");
        assert_eq!(d[&DeltaKind::ModelFamily].len(), 1);
        let csv = deltas_csv(&d[&DeltaKind::PromptPair]);
        assert!(csv.starts_with(DELTAS_HEADER));
    }

    #[test]
    fn compare_runs_is_antisymmetric() {
        let a = record(vec![cell("gemma", Family::Llm, PromptStrategy::Basic, 6, 5)]);
        let b = record(vec![cell("gemma", Family::Llm, PromptStrategy::Mask, 6, 2)]);
        let ab = compare_runs(&a, &b, DeltaKind::PromptPair).unwrap();
        let ba = compare_runs(&b, &a, DeltaKind::PromptPair).unwrap();
        assert_eq!(ab[0].delta.accuracy, -ba[0].delta.accuracy);
        assert_eq!((ab[0].lhs.as_str(), ab[0].rhs.as_str()), ("basic", "mask"));

        let same = compare_runs(&a, &a, DeltaKind::ModelFamily).unwrap();
        assert_eq!(same[0].delta.accuracy, 0.0);
        assert!(compare_runs(&a, &a, DeltaKind::PromptPair).is_err());

        let c = record(vec![cell("gemma", Family::Llm, PromptStrategy::Basic, 2, 3)]);
        let g = compare_runs(&c, &a, DeltaKind::GroupingPair).unwrap();
        let g2 = compare_runs(&a, &c, DeltaKind::GroupingPair).unwrap();
        assert_eq!(g[0].delta.f_score, -g2[0].delta.f_score);
        let unrelated = record(vec![cell("gpt", Family::Llm, PromptStrategy::Basic, 6, 5)]);
        assert!(compare_runs(&a, &unrelated, DeltaKind::PromptPair).is_err());
    }

    #[test]
    fn percent_formatting() {
        assert_eq!(percent(1.0), "100.00");
        assert_eq!(percent(0.5994), "59.94");
        assert_eq!(percent(-0.0000001), "0.00");
        assert_eq!(percent(-0.2232), "-22.32");
    }
}

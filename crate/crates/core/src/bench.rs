//! Corpus loading, evaluation runs, cost accounting and reports.
//!
//! A corpus is line-delimited JSON, one object per item:
//!
//! ```json
//! {"id": "q1", "prompt": "...", "reference": "...", "target_words": 120,
//!  "min_words": 100, "max_words": 150, "language": "english"}
//! ```
//!
//! `reference`, `target_words` and the `min_words`/`max_words` pair are each
//! optional, but an item needs a reference or a constraint. Without an
//! explicit constraint the target is the reference's unit count.
//!
//! Reports are deterministic: rows are ordered by item id and repetition,
//! and every aggregate is computed from the rows alone.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::Backend;
use crate::decode::LengthConstraint;
use crate::metrics;
use crate::pipeline::{run_implicit_baseline, run_three_stage, PipelineConfig};
use crate::segmenter::{self, SegmentationRule};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Language {
    #[default]
    #[serde(alias = "en")]
    English,
    #[serde(alias = "zh")]
    Chinese,
}

impl Language {
    /// Unit rule for the language: characters for Chinese, words otherwise.
    pub fn default_rule(&self) -> SegmentationRule {
        match self {
            Language::English => SegmentationRule::words_and_symbols(),
            Language::Chinese => SegmentationRule::cjk_characters(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Explicit,
    DerivedFromReference,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchmarkRecord {
    pub id: String,
    pub prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_words: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_words: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_words: Option<usize>,
    #[serde(default)]
    pub language: Language,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RecordError {
    #[error("invalid JSON: {0}")]
    Json(String),
    #[error("id is empty")]
    EmptyId,
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("duplicate id {0}")]
    DuplicateId(String),
    #[error("needs a reference or a length constraint")]
    NoTarget,
    #[error("min_words and max_words must be given together")]
    HalfRange,
    #[error("target_words and min_words/max_words are exclusive")]
    BothConstraints,
    #[error("invalid constraint: {0}")]
    BadConstraint(String),
    #[error("reference has no units")]
    EmptyReference,
}

impl BenchmarkRecord {
    /// Explicit constraint, if any.
    pub fn constraint(&self) -> Result<Option<LengthConstraint>, RecordError> {
        let c = match (self.target_words, self.min_words, self.max_words) {
            (Some(_), Some(_), _) | (Some(_), _, Some(_)) => {
                return Err(RecordError::BothConstraints)
            }
            (Some(t), None, None) => LengthConstraint::exact(t),
            (None, Some(min), Some(max)) => LengthConstraint::range(min, max),
            (None, None, None) => return Ok(None),
            _ => return Err(RecordError::HalfRange),
        };
        c.map(Some)
            .map_err(|e| RecordError::BadConstraint(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), RecordError> {
        if self.id.trim().is_empty() {
            return Err(RecordError::EmptyId);
        }
        if self.prompt.trim().is_empty() {
            return Err(RecordError::EmptyPrompt);
        }
        if self.constraint()?.is_none() && self.reference.is_none() {
            return Err(RecordError::NoTarget);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineError {
    /// 1-based line number.
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    pub records: Vec<BenchmarkRecord>,
    pub errors: Vec<LineError>,
}

/// Parses corpus text; bad lines are collected, not fatal.
pub fn parse_corpus(text: &str) -> Corpus {
    let mut corpus = Corpus::default();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<BenchmarkRecord>(line)
            .map_err(|e| RecordError::Json(e.to_string()))
            .and_then(|r| r.validate().map(|_| r))
            .and_then(|r| {
                if seen.insert(r.id.clone()) {
                    Ok(r)
                } else {
                    Err(RecordError::DuplicateId(r.id))
                }
            });
        match parsed {
            Ok(r) => corpus.records.push(r),
            Err(e) => corpus.errors.push(LineError {
                line: i + 1,
                message: e.to_string(),
            }),
        }
    }
    corpus
}

pub fn load_corpus(path: &Path) -> std::io::Result<Corpus> {
    Ok(parse_corpus(&std::fs::read_to_string(path)?))
}

/// Corpus text for records, one JSON object per line.
pub fn write_corpus(records: &[BenchmarkRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

/// The record's explicit constraint, or `Exact(count of reference)`.
pub fn derive_constraint(
    record: &BenchmarkRecord,
    rule: SegmentationRule,
) -> Result<(LengthConstraint, Provenance), RecordError> {
    if let Some(c) = record.constraint()? {
        return Ok((c, Provenance::Explicit));
    }
    let reference = record.reference.as_deref().ok_or(RecordError::NoTarget)?;
    let n = segmenter::count_units(reference, rule);
    let c = LengthConstraint::exact(n).map_err(|_| RecordError::EmptyReference)?;
    Ok((c, Provenance::DerivedFromReference))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum Method {
    ThreeStage,
    Implicit { k: usize },
}

impl Method {
    /// Parses `three_stage` (or `markers`) and `implicit:K`.
    pub fn parse(s: &str) -> Option<Method> {
        match s {
            "three_stage" | "three-stage" | "markers" => Some(Method::ThreeStage),
            _ => {
                let k = s.strip_prefix("implicit")?;
                let k = if k.is_empty() {
                    1
                } else {
                    k.strip_prefix(':')?.parse().ok()?
                };
                (k >= 1).then_some(Method::Implicit { k })
            }
        }
    }

    pub fn label(&self) -> String {
        match self {
            Method::ThreeStage => "three_stage".into(),
            Method::Implicit { k } => format!("implicit:{k}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRunConfig {
    pub method: Method,
    pub pipeline: PipelineConfig,
    /// Unit rule for English items; Chinese items count characters.
    pub rule: SegmentationRule,
    /// Backend description, e.g. `mock:compliant:7` or `model@url`.
    pub backend: String,
    pub seed: u64,
    pub repetitions: usize,
    pub parallelism: usize,
}

impl Default for EvalRunConfig {
    fn default() -> Self {
        Self {
            method: Method::ThreeStage,
            pipeline: PipelineConfig::default(),
            rule: SegmentationRule::default(),
            backend: String::new(),
            seed: 0,
            repetitions: 1,
            parallelism: 4,
        }
    }
}

impl EvalRunConfig {
    fn rule_for(&self, language: Language) -> SegmentationRule {
        match language {
            Language::English => self.rule,
            Language::Chinese => language.default_rule(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CostLedger {
    pub units_generated: usize,
    pub backend_calls: usize,
    /// `units_generated / reference.units_generated`, when a reference run
    /// is named.
    pub relative_cost: Option<f64>,
}

impl CostLedger {
    pub fn relative_to(mut self, reference: &CostLedger) -> Self {
        self.relative_cost = (reference.units_generated > 0)
            .then(|| self.units_generated as f64 / reference.units_generated as f64);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemRow {
    pub id: String,
    pub repetition: usize,
    pub method: String,
    pub model: String,
    pub constraint: String,
    pub provenance: Provenance,
    /// Target for exact constraints.
    pub n_target: Option<usize>,
    pub min: Option<usize>,
    pub max: Option<usize>,
    pub n_true: Option<usize>,
    /// Relative length error, exact constraints only.
    pub e: Option<f64>,
    /// Whether the count is inside the range, range constraints only.
    pub in_range: Option<bool>,
    /// Quality score; empty unless a judge is configured.
    pub s: Option<f64>,
    pub attempts: usize,
    pub units: usize,
    pub calls: usize,
    pub error: Option<String>,
    #[serde(skip)]
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangeGroup {
    pub items: usize,
    pub e_r: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub items: usize,
    pub failed: usize,
    pub exact_items: usize,
    /// Mean relative error over exact items.
    pub mean_e: Option<f64>,
    pub range_items: usize,
    /// Share of range items outside their range.
    pub e_r: Option<f64>,
    /// `E_r` per distinct range, keyed `min-max`.
    pub by_range: BTreeMap<String, RangeGroup>,
    pub mean_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub config: EvalRunConfig,
    pub templates_fingerprint: String,
    pub rows: Vec<ItemRow>,
    pub aggregates: Aggregates,
    pub cost: CostLedger,
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("repetitions must be at least 1")]
    ZeroRepetitions,
}

fn blank_row(record: &BenchmarkRecord, rep: usize, config: &EvalRunConfig, model: &str) -> ItemRow {
    ItemRow {
        id: record.id.clone(),
        repetition: rep,
        method: config.method.label(),
        model: model.to_string(),
        constraint: String::new(),
        provenance: Provenance::Explicit,
        n_target: None,
        min: None,
        max: None,
        n_true: None,
        e: None,
        in_range: None,
        s: None,
        attempts: 0,
        units: 0,
        calls: 0,
        error: None,
        text: String::new(),
    }
}

fn run_item(
    record: &BenchmarkRecord,
    rep: usize,
    config: &EvalRunConfig,
    backend: &dyn Backend,
    model: &str,
) -> ItemRow {
    let mut row = blank_row(record, rep, config, model);
    let rule = config.rule_for(record.language);
    let (constraint, provenance) = match derive_constraint(record, rule) {
        Ok(c) => c,
        Err(e) => {
            row.error = Some(e.to_string());
            return row;
        }
    };
    row.constraint = constraint.to_string();
    row.provenance = provenance;
    match constraint {
        LengthConstraint::Exact { target } => row.n_target = Some(target),
        LengthConstraint::Range { min, max } => {
            row.min = Some(min);
            row.max = Some(max);
        }
    }
    let mut pipeline = config.pipeline.clone();
    pipeline.decode.rule = rule;
    let outcome = match config.method {
        Method::ThreeStage => {
            run_three_stage(&record.prompt, &constraint, &pipeline, backend).map(|r| {
                (
                    r.result.clean.clone(),
                    r.result.final_count,
                    r.outputs.rewrite_attempts.len(),
                    r.outputs.units_generated(),
                    r.outputs.backend_calls(),
                )
            })
        }
        Method::Implicit { k } => {
            run_implicit_baseline(&record.prompt, &constraint, k, &pipeline, backend).map(|r| {
                let best = r.best_candidate();
                (
                    best.text.clone(),
                    best.count,
                    k,
                    r.units_generated,
                    r.backend_calls,
                )
            })
        }
    };
    match outcome {
        Ok((text, count, attempts, units, calls)) => {
            row.n_true = Some(count);
            row.attempts = attempts;
            row.units = units;
            row.calls = calls;
            row.text = text;
            match constraint {
                LengthConstraint::Exact { target } => {
                    row.e = metrics::lctg_error(count, target).ok()
                }
                LengthConstraint::Range { .. } => row.in_range = Some(constraint.is_met(count)),
            }
        }
        Err(e) => row.error = Some(e.to_string()),
    }
    row
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Aggregates recomputed from rows only.
pub fn aggregate_rows(rows: &[ItemRow]) -> (Aggregates, CostLedger) {
    let ok: Vec<&ItemRow> = rows.iter().filter(|r| r.error.is_none()).collect();
    let es: Vec<f64> = ok.iter().filter_map(|r| r.e).collect();
    let ranged: Vec<&ItemRow> = ok
        .iter()
        .copied()
        .filter(|r| r.in_range.is_some())
        .collect();
    let outside = |rs: &[&ItemRow]| rs.iter().filter(|r| r.in_range == Some(false)).count();
    let mut by_range: BTreeMap<String, Vec<&ItemRow>> = BTreeMap::new();
    for r in &ranged {
        let key = format!("{}-{}", r.min.unwrap_or(0), r.max.unwrap_or(0));
        by_range.entry(key).or_default().push(r);
    }
    let scores: Vec<f64> = ok.iter().filter_map(|r| r.s).collect();
    let aggregates = Aggregates {
        items: rows.len(),
        failed: rows.len() - ok.len(),
        exact_items: es.len(),
        mean_e: mean(&es),
        range_items: ranged.len(),
        e_r: (!ranged.is_empty()).then(|| outside(&ranged) as f64 / ranged.len() as f64),
        by_range: by_range
            .into_iter()
            .map(|(k, rs)| {
                let g = RangeGroup {
                    items: rs.len(),
                    e_r: outside(&rs) as f64 / rs.len() as f64,
                };
                (k, g)
            })
            .collect(),
        mean_s: mean(&scores),
    };
    let cost = CostLedger {
        units_generated: rows.iter().map(|r| r.units).sum(),
        backend_calls: rows.iter().map(|r| r.calls).sum(),
        relative_cost: None,
    };
    (aggregates, cost)
}

fn templates_fingerprint(config: &PipelineConfig) -> String {
    let t = &config.templates;
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for part in [&t.stage1, &t.stage2, &t.stage3, &t.few_shots] {
        for &b in part.text.as_bytes().iter().chain(b"\x00") {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    format!("{h:016x}")
}

/// Runs every record `repetitions` times, items in parallel.
pub fn run_eval(
    records: &[BenchmarkRecord],
    config: &EvalRunConfig,
    backend: &dyn Backend,
) -> Result<EvalReport, EvalError> {
    if records.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    if config.repetitions == 0 {
        return Err(EvalError::ZeroRepetitions);
    }
    let model = if config.backend.is_empty() {
        backend.describe()
    } else {
        config.backend.clone()
    };
    let mut jobs: Vec<(&BenchmarkRecord, usize)> = records
        .iter()
        .flat_map(|r| (0..config.repetitions).map(move |rep| (r, rep)))
        .collect();
    jobs.sort_by(|a, b| (&a.0.id, a.1).cmp(&(&b.0.id, b.1)));
    // Jobs sharing a prompt run in order on one worker, so a backend whose
    // replies depend on how often it has seen a prompt stays deterministic.
    let mut groups: BTreeMap<&str, Vec<(&BenchmarkRecord, usize)>> = BTreeMap::new();
    for job in jobs {
        groups.entry(job.0.prompt.as_str()).or_default().push(job);
    }
    let groups: Vec<Vec<(&BenchmarkRecord, usize)>> = groups.into_values().collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.parallelism.max(1))
        .build()
        .expect("thread pool");
    let mut rows: Vec<ItemRow> = pool.install(|| {
        groups
            .par_iter()
            .flat_map_iter(|g| {
                g.iter()
                    .map(|(r, rep)| run_item(r, *rep, config, backend, &model))
            })
            .collect()
    });
    rows.sort_by(|a, b| (&a.id, a.repetition).cmp(&(&b.id, b.repetition)));
    let (aggregates, cost) = aggregate_rows(&rows);
    Ok(EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        templates_fingerprint: templates_fingerprint(&config.pipeline),
        config: config.clone(),
        rows,
        aggregates,
        cost,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Json,
    Csv,
    Markdown,
}

impl ReportFormat {
    pub fn extension(&self) -> &'static str {
        match self {
            ReportFormat::Json => "json",
            ReportFormat::Csv => "csv",
            ReportFormat::Markdown => "md",
        }
    }
}

const CSV_HEADER: [&str; 18] = [
    "schema_version",
    "id",
    "repetition",
    "method",
    "model",
    "constraint",
    "provenance",
    "n_target",
    "min",
    "max",
    "n_true",
    "e",
    "in_range",
    "s",
    "attempts",
    "units",
    "calls",
    "error",
];

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map(ToString::to_string).unwrap_or_default()
}

fn csv_report(report: &EvalReport) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER).expect("in-memory write");
    for r in &report.rows {
        let provenance = match r.provenance {
            Provenance::Explicit => "explicit",
            Provenance::DerivedFromReference => "derived_from_reference",
        };
        w.write_record([
            report.schema_version.to_string(),
            r.id.clone(),
            r.repetition.to_string(),
            r.method.clone(),
            r.model.clone(),
            r.constraint.clone(),
            provenance.to_string(),
            opt(&r.n_target),
            opt(&r.min),
            opt(&r.max),
            opt(&r.n_true),
            opt(&r.e),
            opt(&r.in_range),
            opt(&r.s),
            r.attempts.to_string(),
            r.units.to_string(),
            r.calls.to_string(),
            opt(&r.error),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

fn pct(v: Option<f64>) -> String {
    v.map(|x| format!("{:.2}", 100.0 * x)).unwrap_or_default()
}

fn markdown_report(report: &EvalReport) -> String {
    let a = &report.aggregates;
    let model = report.rows.first().map(|r| r.model.as_str()).unwrap_or("");
    let mut out = String::new();
    let _ = writeln!(
        out,
        "<!-- lengthmark report schema {} -->",
        report.schema_version
    );
    out.push_str("| Method | Model | E (%) | S | E_r (%) | Items | Failed | Units | Calls |\n");
    out.push_str("|---|---|---:|---:|---:|---:|---:|---:|---:|\n");
    let _ = writeln!(
        out,
        "| {} | {} | {} | {} | {} | {} | {} | {} | {} |",
        report.config.method.label(),
        model,
        pct(a.mean_e),
        a.mean_s.map(|s| format!("{s:.2}")).unwrap_or_default(),
        pct(a.e_r),
        a.items,
        a.failed,
        report.cost.units_generated,
        report.cost.backend_calls
    );
    if !a.by_range.is_empty() {
        out.push_str("\n| Range | Items | E_r (%) |\n|---|---:|---:|\n");
        for (k, g) in &a.by_range {
            let _ = writeln!(out, "| {k} | {} | {} |", g.items, pct(Some(g.e_r)));
        }
    }
    out
}

/// Report text in the requested format.
pub fn emit_report(report: &EvalReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(report).expect("report serializes");
            s.push('\n');
            s
        }
        ReportFormat::Csv => csv_report(report),
        ReportFormat::Markdown => markdown_report(report),
    }
}

//! Counting, control and planning probes that feed the error decomposition.
//!
//! A counting probe asks the model to repeat a text while writing the
//! running unit count every `n` units; the last marker it writes is its
//! predicted count `N_pred^n`. The letter control runs the same probe on a
//! copy of the text whose words are replaced by `A`. The implicit probe asks
//! for the count directly, and the plan probe asks for a plan whose section
//! allocations are summed into `N_plan`.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{
    Backend, BackendFailure, GenerationRequest, Message, SamplingParams, StreamEvent,
};
use crate::marker::{self, MarkerFormat};
use crate::metrics::{self, ErrorInputs, ErrorReport, MetricsError};
use crate::prompts::{PromptTemplates, TemplateError};
use crate::segmenter::{self, SegmentationRule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", content = "n", rename_all = "snake_case")]
pub enum ProbeKind {
    IdentifyOneByOne,
    CountInterval(usize),
    ImplicitCount,
    LetterControl(usize),
    PlanProbe,
}

impl ProbeKind {
    /// Counting interval for marker-based probes.
    pub fn interval(&self) -> Option<usize> {
        match *self {
            ProbeKind::IdentifyOneByOne => Some(1),
            ProbeKind::CountInterval(n) | ProbeKind::LetterControl(n) => Some(n),
            ProbeKind::ImplicitCount | ProbeKind::PlanProbe => None,
        }
    }

    /// Short label used in result rows: `count@16`, `control@1`, ...
    pub fn label(&self) -> String {
        match *self {
            ProbeKind::IdentifyOneByOne => "count@1".into(),
            ProbeKind::CountInterval(n) => format!("count@{n}"),
            ProbeKind::LetterControl(n) => format!("control@{n}"),
            ProbeKind::ImplicitCount => "implicit".into(),
            ProbeKind::PlanProbe => "plan".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeSpec {
    pub kind: ProbeKind,
    pub unit_rule: SegmentationRule,
}

impl ProbeSpec {
    pub fn new(kind: ProbeKind) -> Self {
        Self {
            kind,
            unit_rule: SegmentationRule::default(),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ProbeError {
    #[error("probe text is empty")]
    EmptyText,
    #[error("interval must be at least 1")]
    ZeroInterval,
    #[error("no count found in probe output")]
    Unparsable,
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Backend(#[from] BackendFailure),
    #[error("{failed} of {total} probes could not be parsed (limit {limit:.0}%)")]
    TooManyFailures {
        failed: usize,
        total: usize,
        limit: f64,
    },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Replaces every run of letters and digits with `A`, keeping whitespace
/// and punctuation, so the unit sequence keeps its shape.
pub fn letter_transform(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut in_word = false;
    for c in text.chars() {
        if c.is_alphanumeric() {
            if !in_word {
                out.push('A');
            }
            in_word = true;
        } else {
            out.push(c);
            in_word = false;
        }
    }
    out
}

/// Text the probe's counts refer to: the letter copy for the control.
pub fn probe_text(spec: &ProbeSpec, text: &str) -> String {
    match spec.kind {
        ProbeKind::LetterControl(_) => letter_transform(text),
        _ => text.to_string(),
    }
}

fn marker_example(n: usize, format: &MarkerFormat) -> String {
    let m = |k: usize| marker::render(format, k, k).unwrap_or_default();
    if n == 1 {
        format!("The {} quick {} fox {} ...", m(1), m(2), m(3))
    } else {
        format!("... {} ... {} ...", m(n), m(2 * n))
    }
}

/// Messages for one probe. For the plan probe `text` is the question and
/// `target` the requested length; other probes ignore `target`.
pub fn build_probe_prompt(
    spec: &ProbeSpec,
    text: &str,
    target: usize,
    templates: &PromptTemplates,
    format: &MarkerFormat,
) -> Result<Vec<Message>, ProbeError> {
    if text.trim().is_empty() {
        return Err(ProbeError::EmptyText);
    }
    let body = probe_text(spec, text);
    let prompt = match spec.kind {
        ProbeKind::ImplicitCount => templates
            .probe_implicit
            .render(&[("generated_answer", &body)])?,
        ProbeKind::PlanProbe => templates
            .probe_plan
            .render(&[("target_length", &target.to_string()), ("prompt", &body)])?,
        kind => {
            let n = kind.interval().expect("marker probe");
            if n == 0 {
                return Err(ProbeError::ZeroInterval);
            }
            templates.probe_count.render(&[
                ("n", &n.to_string()),
                ("marker_example", &marker_example(n, format)),
                ("generated_answer", &body),
            ])?
        }
    };
    Ok(vec![Message::user(prompt)])
}

/// Last standalone integer in `s`. Digit groups joined by `,` count as one
/// number; decimals and digits touching letters are skipped.
pub fn last_integer(s: &str) -> Option<usize> {
    let chars: Vec<char> = s.chars().collect();
    let at = |k: usize| chars.get(k).copied();
    let wordish = |c: Option<char>| c.is_some_and(|c| c.is_alphanumeric() || c == '_');
    let mut last = None;
    let mut i = 0;
    while i < chars.len() {
        if !chars[i].is_ascii_digit() {
            i += 1;
            continue;
        }
        let start = i;
        while at(i).is_some_and(|c| c.is_ascii_digit())
            || (at(i) == Some(',') && at(i + 1).is_some_and(|c| c.is_ascii_digit()))
        {
            i += 1;
        }
        let before = start.checked_sub(1).and_then(at);
        let decimal = (at(i) == Some('.') && at(i + 1).is_some_and(|c| c.is_ascii_digit()))
            || (before == Some('.')
                && start >= 2
                && at(start - 2).is_some_and(|c| c.is_ascii_digit()));
        if !wordish(before) && !wordish(at(i)) && !decimal {
            let digits: String = chars[start..i]
                .iter()
                .filter(|c| c.is_ascii_digit())
                .collect();
            last = digits.parse().ok().or(last);
        }
    }
    last
}

/// Sum of `N words` allocations in a plan, ignoring lines that state a
/// total; `None` when there are none.
pub fn parse_plan_total(plan: &str) -> Option<usize> {
    let mut total = 0usize;
    let mut found = false;
    for line in plan.to_lowercase().lines().filter(|l| !l.contains("total")) {
        for (i, _) in line.match_indices("word") {
            let head = line[..i].trim_end_matches([' ', '~']);
            let tail_len = head
                .chars()
                .rev()
                .take_while(|c| c.is_ascii_digit() || *c == ',')
                .map(char::len_utf8)
                .sum::<usize>();
            let digits: String = head[head.len() - tail_len..]
                .chars()
                .filter(char::is_ascii_digit)
                .collect();
            if let Ok(v) = digits.parse::<usize>() {
                total += v;
                found = true;
            }
        }
    }
    found.then_some(total)
}

/// Predicted count from probe output: the last well-formed marker, the last
/// standalone integer (implicit probe), or the summed allocations (plan).
pub fn parse_probe_output(
    raw: &str,
    kind: ProbeKind,
    format: &MarkerFormat,
) -> Result<usize, ProbeError> {
    let got = match kind {
        ProbeKind::ImplicitCount => last_integer(raw),
        ProbeKind::PlanProbe => parse_plan_total(raw),
        _ => marker::strip(raw, format)
            .occurrences
            .last()
            .map(|m| m.declared_count),
    };
    got.ok_or(ProbeError::Unparsable)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeItem {
    pub id: String,
    /// Text to count.
    pub text: String,
    /// Question, for the plan probe.
    pub prompt: Option<String>,
    /// Target length; defaults to the text's own count.
    pub target: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    #[serde(skip)]
    pub templates: PromptTemplates,
    pub format: MarkerFormat,
    pub rule: SegmentationRule,
    pub sampling: SamplingParams,
    pub parallelism: usize,
    /// Largest tolerated share of unparsable probe replies.
    pub max_failure_rate: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            templates: PromptTemplates::default(),
            format: MarkerFormat::default(),
            rule: SegmentationRule::default(),
            sampling: SamplingParams {
                stop_sequences: Vec::new(),
                ..SamplingParams::default()
            },
            parallelism: 4,
            max_failure_rate: 0.2,
        }
    }
}

/// One probe of one item; the CSV row of the suite.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub item_id: String,
    pub spec: String,
    pub n_true: usize,
    pub n_pred: Option<usize>,
    pub failed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSuiteResult {
    pub rows: Vec<ProbeRow>,
    /// Decomposition inputs of items whose interval-1 probe parsed.
    pub inputs: Vec<(String, ErrorInputs)>,
    pub reports: Vec<(String, ErrorReport)>,
    pub aggregate: ErrorReport,
    /// Mean `|N_pred - N_true| / N_true` of the implicit probe, if run.
    pub implicit_error: Option<f64>,
    pub failed_probes: usize,
    pub excluded_items: Vec<String>,
}

/// Reads a reply until the stream ends or `max_bytes` is reached.
fn collect_bounded(
    backend: &dyn Backend,
    request: &GenerationRequest,
    max_bytes: usize,
) -> Result<String, BackendFailure> {
    let mut text = String::new();
    for ev in backend.generate_stream(request) {
        match ev {
            StreamEvent::TextChunk(t) => {
                text.push_str(&t);
                if text.len() >= max_bytes {
                    break;
                }
            }
            StreamEvent::Done(_) => break,
            StreamEvent::Error(f) => return Err(f),
        }
    }
    Ok(text)
}

/// Runs one probe and returns `(N_true, N_pred)`; parse failures give
/// `N_pred = None`.
pub fn run_probe(
    spec: &ProbeSpec,
    item: &ProbeItem,
    config: &ProbeConfig,
    backend: &dyn Backend,
) -> Result<(usize, Option<usize>), ProbeError> {
    let n_true = segmenter::count_units(&probe_text(spec, &item.text), spec.unit_rule);
    let target = item.target.unwrap_or(n_true);
    let text = match spec.kind {
        ProbeKind::PlanProbe => item.prompt.as_deref().unwrap_or(&item.text),
        _ => &item.text,
    };
    let messages = build_probe_prompt(spec, text, target, &config.templates, &config.format)?;
    let mut sampling = config.sampling.clone();
    sampling.max_units_hint = 2 * n_true.max(target) + 64;
    let request = GenerationRequest::new(messages, sampling);
    let max_bytes = 48 * (2 * n_true.max(target) + 64) + 1024;
    let reply = collect_bounded(backend, &request, max_bytes)?;
    Ok((
        n_true,
        parse_probe_output(&reply, spec.kind, &config.format).ok(),
    ))
}

fn assemble_inputs(
    item: &ProbeItem,
    results: &[(ProbeSpec, usize, Option<usize>)],
    rule: SegmentationRule,
) -> Option<ErrorInputs> {
    let n_true = segmenter::count_units(&item.text, rule);
    let mut n_pred = BTreeMap::new();
    let mut control_rate = 0.0;
    let mut n_plan = None;
    for &(spec, truth, pred) in results {
        let Some(pred) = pred else { continue };
        match spec.kind {
            ProbeKind::IdentifyOneByOne | ProbeKind::CountInterval(_) => {
                n_pred.insert(spec.kind.interval().unwrap(), pred);
            }
            ProbeKind::LetterControl(1) if truth > 0 => {
                control_rate = pred.abs_diff(truth) as f64 / truth as f64;
            }
            ProbeKind::PlanProbe => n_plan = Some(pred),
            _ => {}
        }
    }
    if !n_pred.is_empty() && !n_pred.contains_key(&1) {
        return None;
    }
    Some(ErrorInputs {
        n_true,
        n_target: item.target.unwrap_or(n_true),
        n_pred,
        n_plan,
        control_rate,
    })
}

/// Spec, true count and parsed prediction of one probe.
type ProbeOutcome = (ProbeSpec, usize, Option<usize>);

/// Runs every spec on every item, items in parallel, and decomposes the
/// errors. Items whose interval-1 probe fails are excluded from the means.
pub fn run_probe_suite(
    items: &[ProbeItem],
    specs: &[ProbeSpec],
    config: &ProbeConfig,
    backend: &dyn Backend,
) -> Result<ProbeSuiteResult, ProbeError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.parallelism.max(1))
        .build()
        .expect("thread pool");
    let per_item: Vec<Result<Vec<ProbeOutcome>, ProbeError>> = pool.install(|| {
        items
            .par_iter()
            .map(|item| {
                specs
                    .iter()
                    .map(|spec| {
                        let (t, p) = run_probe(spec, item, config, backend)?;
                        Ok((*spec, t, p))
                    })
                    .collect()
            })
            .collect()
    });
    let mut rows = Vec::new();
    let mut inputs = Vec::new();
    let mut excluded = Vec::new();
    let mut implicit = Vec::new();
    for (item, res) in items.iter().zip(per_item) {
        let res = res?;
        for &(spec, truth, pred) in &res {
            rows.push(ProbeRow {
                item_id: item.id.clone(),
                spec: spec.kind.label(),
                n_true: truth,
                n_pred: pred,
                failed: pred.is_none(),
            });
            if let (ProbeKind::ImplicitCount, Some(p)) = (spec.kind, pred) {
                if truth > 0 {
                    implicit.push(p.abs_diff(truth) as f64 / truth as f64);
                }
            }
        }
        match assemble_inputs(item, &res, config.rule) {
            Some(i) => inputs.push((item.id.clone(), i)),
            None => excluded.push(item.id.clone()),
        }
    }
    let failed = rows.iter().filter(|r| r.failed).count();
    if !rows.is_empty() && failed as f64 / rows.len() as f64 > config.max_failure_rate {
        return Err(ProbeError::TooManyFailures {
            failed,
            total: rows.len(),
            limit: config.max_failure_rate * 100.0,
        });
    }
    let mut reports = Vec::with_capacity(inputs.len());
    for (id, i) in &inputs {
        reports.push((id.clone(), metrics::decompose(i)?));
    }
    let aggregate = metrics::aggregate(&reports.iter().map(|(_, r)| r.clone()).collect::<Vec<_>>());
    Ok(ProbeSuiteResult {
        rows,
        inputs,
        reports,
        aggregate,
        implicit_error: (!implicit.is_empty())
            .then(|| implicit.iter().sum::<f64>() / implicit.len() as f64),
        failed_probes: failed,
        excluded_items: excluded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{MockBackend, MockBehavior};

    #[test]
    fn letter_control() {
        assert_eq!(letter_transform("The quick fox"), "A A A");
        assert_eq!(
            letter_transform("Hello, world. state-of-the-art"),
            "A, A. A-A-A-A"
        );
        let spec = ProbeSpec::new(ProbeKind::LetterControl(1));
        let msgs = build_probe_prompt(
            &spec,
            "The quick fox",
            0,
            &PromptTemplates::default(),
            &MarkerFormat::default(),
        )
        .unwrap();
        assert!(msgs[0].content.ends_with("Text:\nA A A"));
    }

    #[test]
    fn prompts_name_the_interval() {
        let t = PromptTemplates::default();
        let f = MarkerFormat::default();
        let one = build_probe_prompt(
            &ProbeSpec::new(ProbeKind::IdentifyOneByOne),
            "The quick fox",
            0,
            &t,
            &f,
        )
        .unwrap();
        assert!(one[0]
            .content
            .contains("The [1 word] quick [2 words] fox [3 words]"));
        assert!(one[0].content.contains("after every 1 word(s)"));
        let sixteen = build_probe_prompt(
            &ProbeSpec::new(ProbeKind::CountInterval(16)),
            "x",
            0,
            &t,
            &f,
        )
        .unwrap();
        assert!(sixteen[0].content.contains("after every 16 word(s)"));
        assert!(
            build_probe_prompt(&ProbeSpec::new(ProbeKind::ImplicitCount), " ", 0, &t, &f).is_err()
        );
    }

    #[test]
    fn output_parsing() {
        let f = MarkerFormat::default();
        assert_eq!(
            parse_probe_output(
                "The [1 word] quick [2 words] fox [3 words]",
                ProbeKind::IdentifyOneByOne,
                &f
            )
            .unwrap(),
            3
        );
        assert_eq!(
            parse_probe_output("the text has 157 words", ProbeKind::ImplicitCount, &f).unwrap(),
            157
        );
        assert_eq!(
            parse_probe_output("About 1,234 words (v2).", ProbeKind::ImplicitCount, &f).unwrap(),
            1234
        );
        assert_eq!(
            parse_probe_output("pi is 3.14", ProbeKind::ImplicitCount, &f),
            Err(ProbeError::Unparsable)
        );
        assert_eq!(
            parse_probe_output("garbage", ProbeKind::CountInterval(4), &f),
            Err(ProbeError::Unparsable)
        );
        assert_eq!(
            parse_probe_output(
                "1. Intro (40 words)\n2. Body: ~95 words\n3. End (15 words)\nTotal: 150 words",
                ProbeKind::PlanProbe,
                &f
            )
            .unwrap(),
            150
        );
    }

    #[test]
    fn perfect_counter_gives_zero_errors() {
        let items: Vec<ProbeItem> = (0..10)
            .map(|i| ProbeItem {
                id: format!("q{i}"),
                text: format!("Item {i} has some words, and a comma; then more text for counting."),
                prompt: Some("Why?".into()),
                target: None,
            })
            .collect();
        let specs: Vec<ProbeSpec> = [
            ProbeKind::IdentifyOneByOne,
            ProbeKind::CountInterval(4),
            ProbeKind::LetterControl(1),
        ]
        .into_iter()
        .map(ProbeSpec::new)
        .collect();
        let b = MockBackend::new(MockBehavior::Counter, 0);
        let r = run_probe_suite(&items, &specs, &ProbeConfig::default(), &b).unwrap();
        assert_eq!(r.rows.len(), 30);
        assert_eq!(r.failed_probes, 0);
        assert_eq!(r.aggregate.e_i, 0.0);
        assert!(r
            .aggregate
            .intervals
            .values()
            .all(|i| i.e_c == 0.0 && i.e_a == 0.0));
    }

    #[test]
    fn too_many_failures_abort() {
        let items = vec![ProbeItem {
            id: "a".into(),
            text: "one two".into(),
            prompt: None,
            target: None,
        }];
        let b = MockBackend::new(MockBehavior::Scripted(vec!["no numbers here".into()]), 0);
        let e = run_probe_suite(
            &items,
            &[ProbeSpec::new(ProbeKind::IdentifyOneByOne)],
            &ProbeConfig::default(),
            &b,
        );
        assert!(matches!(
            e,
            Err(ProbeError::TooManyFailures {
                failed: 1,
                total: 1,
                ..
            })
        ));
    }
}

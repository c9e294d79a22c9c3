//! Plan, draft and marker-guided rewrite, plus the plan-then-generate
//! best-of-k baseline.
//!
//! The rewrite stage runs a [`decode`](crate::decode) session per attempt,
//! retrying up to `max_attempts` times and stopping at the first compliant
//! attempt. Among the attempts, the one closest to the constraint is chosen,
//! with ties going to the earliest.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backend, BackendFailure, GenerationRequest, Message, SamplingParams};
use crate::decode::{
    run_free, run_session, DecodeConfig, DecodeError, FreeRunResult, LengthConstraint,
    SessionResult,
};
use crate::prompts::{PromptTemplates, TemplateError};
use crate::schedule::{InsertionSchedule, ScheduleError, ScheduleKind};
use crate::segmenter;

/// Opening the draft and rewrite prompts ask for; removed from drafts and
/// used as the committed preamble of every rewrite session.
pub const ANSWER_PREFIX: &str = "Answer generation task:";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Plan,
    Draft,
    Rewrite,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Plan => "plan",
            Stage::Draft => "draft",
            Stage::Rewrite => "rewrite",
        })
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{stage} stage: {failure}")]
    Backend {
        stage: Stage,
        failure: BackendFailure,
    },
    #[error("{stage} stage: {source}")]
    Decode { stage: Stage, source: DecodeError },
    #[error("{stage} stage: {source}")]
    Schedule { stage: Stage, source: ScheduleError },
    #[error("{stage} stage: {source}")]
    Template { stage: Stage, source: TemplateError },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("rewrite stage: all {} attempts failed", .attempts.len())]
    Exhausted { attempts: Vec<SessionResult> },
}

impl PipelineError {
    pub fn stage(&self) -> Option<Stage> {
        match self {
            PipelineError::Backend { stage, .. }
            | PipelineError::Decode { stage, .. }
            | PipelineError::Schedule { stage, .. }
            | PipelineError::Template { stage, .. } => Some(*stage),
            PipelineError::Exhausted { .. } => Some(Stage::Rewrite),
            PipelineError::InvalidInput(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    #[serde(skip)]
    pub templates: PromptTemplates,
    /// Marker decoding settings for the rewrite stage; the preamble is
    /// committed before the first rewrite request.
    pub decode: DecodeConfig,
    pub schedule: ScheduleKind,
    pub sampling: SamplingParams,
    /// Rewrite attempts, `T`.
    pub max_attempts: usize,
    /// Exact constraints count as met within this many units.
    pub tolerance: usize,
    /// Draft and plan unit budgets as multiples of the constraint cap.
    pub draft_budget_factor: f64,
    pub plan_budget_factor: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            templates: PromptTemplates::default(),
            decode: DecodeConfig {
                preamble: format!("{ANSWER_PREFIX} "),
                ..DecodeConfig::default()
            },
            schedule: ScheduleKind::Decaying,
            sampling: SamplingParams::default(),
            max_attempts: 3,
            tolerance: 0,
            draft_budget_factor: 2.5,
            plan_budget_factor: 2.5,
        }
    }
}

impl PipelineConfig {
    /// Whether `count` satisfies the constraint under the tolerance.
    pub fn is_compliant(&self, constraint: &LengthConstraint, count: usize) -> bool {
        match *constraint {
            LengthConstraint::Exact { target } => count.abs_diff(target) <= self.tolerance,
            LengthConstraint::Range { .. } => constraint.is_met(count),
        }
    }

    fn budget(&self, factor: f64, constraint: &LengthConstraint) -> usize {
        ((constraint.cap() as f64 * factor).ceil() as usize).max(1)
    }
}

/// Backend calls and kept units of one stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub requests: usize,
    pub units: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewriteOutcome {
    pub attempts: Vec<SessionResult>,
    pub chosen: usize,
}

impl RewriteOutcome {
    pub fn chosen_result(&self) -> &SessionResult {
        &self.attempts[self.chosen]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageOutputs {
    pub plan: String,
    pub draft: String,
    pub draft_count: usize,
    pub rewrite_attempts: Vec<SessionResult>,
    pub chosen: usize,
    /// One record per stage, in execution order.
    pub stages: Vec<StageRecord>,
}

impl StageOutputs {
    pub fn units_generated(&self) -> usize {
        self.stages.iter().map(|s| s.units).sum()
    }

    pub fn backend_calls(&self) -> usize {
        self.stages.iter().map(|s| s.requests).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThreeStageRun {
    pub result: SessionResult,
    pub outputs: StageOutputs,
}

fn relation(actual: usize, target: usize) -> String {
    let d = actual.abs_diff(target);
    let unit = if d == 1 { "word" } else { "words" };
    match actual.cmp(&target) {
        std::cmp::Ordering::Greater => format!("exceeds the target length by {d} {unit}"),
        std::cmp::Ordering::Less => format!("falls short of the target length by {d} {unit}"),
        std::cmp::Ordering::Equal => "matches the target length".to_string(),
    }
}

/// Length feedback sentence for the rewriting prompt.
pub fn compose_length_feedback(actual: usize, target: usize) -> String {
    format!(
        "The high-quality answer contains {actual} words. It {}.",
        relation(actual, target)
    )
}

/// Extra feedback for a retry, about the best attempt so far.
pub fn compose_retry_feedback(actual: usize, target: usize) -> String {
    format!(
        "\nA previous rewrite contained {actual} words. It {}.",
        relation(actual, target)
    )
}

fn free_request(prompt: String, config: &PipelineConfig, budget: usize) -> GenerationRequest {
    let mut sampling = config.sampling.clone();
    sampling.max_units_hint = budget;
    let sentinel = &config.decode.sentinel;
    if !sentinel.is_empty() && !sampling.stop_sequences.contains(sentinel) {
        sampling.stop_sequences.push(sentinel.clone());
    }
    GenerationRequest::new(vec![Message::user(prompt)], sampling)
}

fn check_query(query: &str, constraint: &LengthConstraint) -> Result<(), PipelineError> {
    if query.trim().is_empty() {
        return Err(PipelineError::InvalidInput("query is empty".into()));
    }
    constraint
        .validate()
        .map_err(|e| PipelineError::InvalidInput(e.to_string()))
}

/// Asks for a content plan with per-section word allocations. The plan's
/// length is not enforced beyond the plan budget.
pub fn stage_plan(
    query: &str,
    constraint: &LengthConstraint,
    config: &PipelineConfig,
    backend: &dyn Backend,
) -> Result<FreeRunResult, PipelineError> {
    check_query(query, constraint)?;
    let target = constraint.describe();
    let prompt = config
        .templates
        .stage1
        .render(&[("target_length", &target), ("prompt", query)])
        .map_err(|source| PipelineError::Template {
            stage: Stage::Plan,
            source,
        })?;
    let budget = config.budget(config.plan_budget_factor, constraint);
    let request = free_request(prompt, config, budget);
    run_free(backend, &request, budget, &config.decode).map_err(|failure| PipelineError::Backend {
        stage: Stage::Plan,
        failure,
    })
}

/// Removes a leading answer prefix and surrounding whitespace.
pub fn strip_answer_prefix(text: &str) -> &str {
    let t = text.trim_start();
    t.strip_prefix(ANSWER_PREFIX).unwrap_or(t).trim()
}

/// Free-running draft from the plan, without markers. The count may miss
/// the constraint; the draft is cut at the draft budget.
pub fn stage_draft(
    query: &str,
    plan: &str,
    constraint: &LengthConstraint,
    config: &PipelineConfig,
    backend: &dyn Backend,
) -> Result<FreeRunResult, PipelineError> {
    check_query(query, constraint)?;
    let target = constraint.describe();
    let prompt = config
        .templates
        .stage2
        .render(&[
            ("target_length", &target),
            ("prompt", query),
            ("plan", plan),
        ])
        .map_err(|source| PipelineError::Template {
            stage: Stage::Draft,
            source,
        })?;
    let budget = config.budget(config.draft_budget_factor, constraint);
    let request = free_request(prompt, config, budget);
    let mut run = run_free(backend, &request, budget, &config.decode).map_err(|failure| {
        PipelineError::Backend {
            stage: Stage::Draft,
            failure,
        }
    })?;
    let text = strip_answer_prefix(&run.text).to_string();
    run.count = segmenter::count_units(&text, config.decode.rule);
    run.text = text;
    Ok(run)
}

/// Index of the attempt closest to the constraint; failed attempts lose to
/// any finished one and ties go to the earliest.
pub fn select_best(attempts: &[SessionResult], constraint: &LengthConstraint) -> Option<usize> {
    attempts
        .iter()
        .enumerate()
        .min_by_key(|(_, a)| (a.is_exhausted(), constraint.distance(a.final_count)))
        .map(|(i, _)| i)
}

/// Marker-guided rewrite of the draft, retried until compliant or
/// `max_attempts` is reached.
pub fn stage_rewrite(
    query: &str,
    draft: &str,
    constraint: &LengthConstraint,
    config: &PipelineConfig,
    backend: &dyn Backend,
) -> Result<RewriteOutcome, PipelineError> {
    check_query(query, constraint)?;
    if config.max_attempts == 0 {
        return Err(PipelineError::InvalidInput(
            "max_attempts must be at least 1".into(),
        ));
    }
    let draft_count = segmenter::count_units(draft, config.decode.rule);
    let target = constraint.describe();
    let feedback = compose_length_feedback(draft_count, constraint.reference(draft_count));
    let few_shots = config.templates.few_shots.text.clone();
    let mut attempts: Vec<SessionResult> = Vec::new();
    for _ in 0..config.max_attempts {
        let retry = match select_best(&attempts, constraint) {
            Some(i) => {
                let c = attempts[i].final_count;
                compose_retry_feedback(c, constraint.reference(c))
            }
            None => String::new(),
        };
        let prompt = config
            .templates
            .stage3
            .render(&[
                ("target_length", &target),
                ("prompt", query),
                ("generated_answer", draft),
                ("length_feedback", &feedback),
                ("retry_feedback", &retry),
                ("few_shots", &few_shots),
            ])
            .map_err(|source| PipelineError::Template {
                stage: Stage::Rewrite,
                source,
            })?;
        let schedule =
            InsertionSchedule::new(config.schedule, constraint.cap()).map_err(|source| {
                PipelineError::Schedule {
                    stage: Stage::Rewrite,
                    source,
                }
            })?;
        let result = run_session(
            &[Message::user(prompt)],
            *constraint,
            schedule,
            &config.decode,
            backend,
            &config.sampling,
        )
        .map_err(|source| PipelineError::Decode {
            stage: Stage::Rewrite,
            source,
        })?;
        let done = !result.is_exhausted() && config.is_compliant(constraint, result.final_count);
        attempts.push(result);
        if done {
            break;
        }
    }
    if attempts.iter().all(SessionResult::is_exhausted) {
        return Err(PipelineError::Exhausted { attempts });
    }
    let chosen = select_best(&attempts, constraint).expect("at least one attempt");
    Ok(RewriteOutcome { attempts, chosen })
}

/// Plan, draft, then marker-guided rewrite.
pub fn run_three_stage(
    query: &str,
    constraint: &LengthConstraint,
    config: &PipelineConfig,
    backend: &dyn Backend,
) -> Result<ThreeStageRun, PipelineError> {
    let plan = stage_plan(query, constraint, config, backend)?;
    let draft = stage_draft(query, &plan.text, constraint, config, backend)?;
    let rewrite = stage_rewrite(query, &draft.text, constraint, config, backend)?;
    let rewrite_units = rewrite.attempts.iter().map(|a| a.units_received).sum();
    let rewrite_requests = rewrite.attempts.iter().map(|a| a.requests).sum();
    let outputs = StageOutputs {
        stages: vec![
            StageRecord {
                stage: Stage::Plan,
                requests: 1,
                units: plan.count,
            },
            StageRecord {
                stage: Stage::Draft,
                requests: 1,
                units: draft.count,
            },
            StageRecord {
                stage: Stage::Rewrite,
                requests: rewrite_requests,
                units: rewrite_units,
            },
        ],
        plan: plan.text,
        draft: draft.text,
        draft_count: draft.count,
        chosen: rewrite.chosen,
        rewrite_attempts: rewrite.attempts,
    };
    Ok(ThreeStageRun {
        result: outputs.rewrite_attempts[outputs.chosen].clone(),
        outputs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub plan: String,
    pub text: String,
    pub count: usize,
    pub plan_units: usize,
}

impl Candidate {
    /// Units generated for this candidate: plan plus answer.
    pub fn units(&self) -> usize {
        self.plan_units + self.count
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImplicitRun {
    pub candidates: Vec<Candidate>,
    pub best: usize,
    pub units_generated: usize,
    pub backend_calls: usize,
}

impl ImplicitRun {
    pub fn best_candidate(&self) -> &Candidate {
        &self.candidates[self.best]
    }
}

/// `k` independent plan-then-generate runs without markers; the candidate
/// with the smallest length error wins, ties going to the earliest.
pub fn run_implicit_baseline(
    query: &str,
    constraint: &LengthConstraint,
    k: usize,
    config: &PipelineConfig,
    backend: &dyn Backend,
) -> Result<ImplicitRun, PipelineError> {
    if k == 0 {
        return Err(PipelineError::InvalidInput("k must be at least 1".into()));
    }
    let mut candidates = Vec::with_capacity(k);
    for _ in 0..k {
        let plan = stage_plan(query, constraint, config, backend)?;
        let answer = stage_draft(query, &plan.text, constraint, config, backend)?;
        candidates.push(Candidate {
            plan: plan.text,
            text: answer.text,
            count: answer.count,
            plan_units: plan.count,
        });
    }
    let best = candidates
        .iter()
        .enumerate()
        .min_by_key(|(_, c)| constraint.distance(c.count))
        .map(|(i, _)| i)
        .expect("k >= 1");
    Ok(ImplicitRun {
        units_generated: candidates.iter().map(Candidate::units).sum(),
        backend_calls: 2 * k,
        best,
        candidates,
    })
}

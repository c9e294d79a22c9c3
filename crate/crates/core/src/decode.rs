//! Marker-injected decoding.
//!
//! A [`DecodeSession`] consumes backend text, counts clean units as they
//! become final, and at every scheduled count truncates the raw text at that
//! unit, appends a rendered marker and asks the driver to resume generation
//! from the new raw text. At the length cap it writes the terminal marker and
//! the stop sentinel itself.
//!
//! Two buffers are kept in step: `raw` (what the model sees, markers
//! included) and the clean text (markers removed), which feeds the
//! segmenter. Invariant: the clean text is always the batch-stripped raw
//! text, so the unit count equals a batch recount.
//!
//! After each resume the first piece of continuation text is buffered and
//! glued to the raw text with one of `""`, `" "` or `"\n"`, whichever keeps
//! the already counted text unchanged: no marker or stop sentinel may form
//! across the splice and the last counted unit may not grow.

use std::fmt;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::backend::{
    Backend, BackendFailure, DoneReason, EventStream, FailureKind, GenerationRequest, Message,
    SamplingParams, StreamEvent, DEFAULT_STOP_SENTINEL,
};
use crate::marker::{self, CleanSink, MarkerFormat, MarkerOccurrence, MarkerStripper};
use crate::schedule::InsertionSchedule;
use crate::segmenter::{self, IncrementalSegmenter, SegmentationRule, UnitBoundary};

/// Glue candidates between an injected marker and the continuation, in
/// order of preference. The newline always keeps counted text stable.
const GUARDS: [&str; 3] = ["", " ", "\n"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LengthConstraint {
    Exact { target: usize },
    Range { min: usize, max: usize },
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConstraintError {
    #[error("target must be at least 1")]
    ZeroTarget,
    #[error("range needs 1 <= min <= max, got {min}..{max}")]
    BadRange { min: usize, max: usize },
}

impl LengthConstraint {
    pub fn exact(target: usize) -> Result<Self, ConstraintError> {
        let c = LengthConstraint::Exact { target };
        c.validate().map(|_| c)
    }

    pub fn range(min: usize, max: usize) -> Result<Self, ConstraintError> {
        let c = LengthConstraint::Range { min, max };
        c.validate().map(|_| c)
    }

    pub fn validate(&self) -> Result<(), ConstraintError> {
        match *self {
            LengthConstraint::Exact { target: 0 } => Err(ConstraintError::ZeroTarget),
            LengthConstraint::Range { min, max } if min == 0 || min > max => {
                Err(ConstraintError::BadRange { min, max })
            }
            _ => Ok(()),
        }
    }

    /// Hard upper bound on the unit count.
    pub fn cap(&self) -> usize {
        match *self {
            LengthConstraint::Exact { target } => target,
            LengthConstraint::Range { max, .. } => max,
        }
    }

    /// Reference length for relative error: the target, or the nearer bound
    /// of the interval.
    pub fn reference(&self, count: usize) -> usize {
        match *self {
            LengthConstraint::Exact { target } => target,
            LengthConstraint::Range { min, max } => {
                if count < min {
                    min
                } else if count > max {
                    max
                } else {
                    count
                }
            }
        }
    }

    /// Units away from compliance; 0 when met.
    pub fn distance(&self, count: usize) -> usize {
        count.abs_diff(self.reference(count))
    }

    /// `|count - reference| / reference`.
    pub fn relative_error(&self, count: usize) -> f64 {
        let r = self.reference(count);
        count.abs_diff(r) as f64 / r as f64
    }

    pub fn is_met(&self, count: usize) -> bool {
        self.distance(count) == 0
    }

    /// Target as written in prompts: `150`, or `100 to 150`.
    pub fn describe(&self) -> String {
        match *self {
            LengthConstraint::Exact { target } => target.to_string(),
            LengthConstraint::Range { min, max } => format!("{min} to {max}"),
        }
    }
}

impl fmt::Display for LengthConstraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            LengthConstraint::Exact { target } => write!(f, "exact:{target}"),
            LengthConstraint::Range { min, max } => write!(f, "range:{min}:{max}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum ExhaustReason {
    Backend { failure: BackendFailure },
    Timeout { message: String },
    ByteBudget { limit: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum SessionStatus {
    Running,
    StoppedAtTarget,
    StoppedBySentinel,
    Exhausted(ExhaustReason),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub format: MarkerFormat,
    pub rule: SegmentationRule,
    /// Stop string; written after the terminal marker and recognised in
    /// backend output. Empty disables recognition.
    pub sentinel: String,
    /// Assistant text committed before generation starts; sent with every
    /// request but not part of the counted text.
    pub preamble: String,
    /// Raw bytes allowed per unit of the cap, times `byte_budget_factor`.
    pub bytes_per_unit: usize,
    pub byte_budget_factor: usize,
    /// Continuation text buffered before choosing the splice glue.
    pub max_head_bytes: usize,
    /// Record every received chunk in the transcript.
    pub record_chunks: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            format: MarkerFormat::default(),
            rule: SegmentationRule::default(),
            sentinel: DEFAULT_STOP_SENTINEL.to_string(),
            preamble: String::new(),
            bytes_per_unit: 6,
            byte_budget_factor: 8,
            max_head_bytes: 256,
            record_chunks: true,
        }
    }
}

impl DecodeConfig {
    pub fn byte_budget(&self, cap: usize) -> usize {
        self.byte_budget_factor * self.bytes_per_unit * cap + 1024
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TranscriptKind {
    Request,
    Chunk,
    Truncate,
    Inject,
    Guard,
    Stop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEvent {
    /// Logical clock: position of the event in the session.
    pub ts: u64,
    pub kind: TranscriptKind,
    pub payload: serde_json::Value,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub events: Vec<TranscriptEvent>,
}

impl Transcript {
    fn push(&mut self, kind: TranscriptKind, payload: serde_json::Value) {
        let ts = self.events.len() as u64;
        self.events.push(TranscriptEvent { ts, kind, payload });
    }

    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&serde_json::to_string(e).expect("transcript serializes"));
            out.push('\n');
        }
        out
    }

    pub fn count(&self, kind: TranscriptKind) -> usize {
        self.events.iter().filter(|e| e.kind == kind).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionResult {
    pub raw: String,
    pub clean: String,
    pub final_count: usize,
    pub injected: Vec<MarkerOccurrence>,
    pub stop_reason: SessionStatus,
    pub transcript: Transcript,
    /// Backend calls issued.
    pub requests: usize,
    /// Clean units received from the backend, including text discarded by
    /// truncation.
    pub units_received: usize,
}

impl SessionResult {
    pub fn is_exhausted(&self) -> bool {
        matches!(self.stop_reason, SessionStatus::Exhausted(_))
    }
}

/// What the driver should do after handing an event to the session.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Step {
    /// Keep reading the current stream.
    Continue,
    /// Cancel the current stream and continue from [`DecodeSession::committed`].
    Resume,
    /// The session has ended.
    Finished,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DecodeError {
    #[error("invalid constraint: {0}")]
    Constraint(#[from] ConstraintError),
    #[error("schedule target {schedule} does not match constraint cap {cap}")]
    ScheduleMismatch { schedule: usize, cap: usize },
    #[error("session is not running")]
    NotRunning,
    #[error("boundary {0} was not emitted by this session")]
    UnknownBoundary(usize),
}

#[derive(Debug, Clone)]
enum Phase {
    Streaming,
    /// Collecting the start of a continuation before splicing it in.
    AwaitingHead(String),
}

/// Clean text of a raw session text: markers removed, cut at the first stop
/// sentinel, trailing whitespace trimmed.
pub fn clean_of(raw: &str, format: &MarkerFormat, sentinel: &str) -> String {
    let mut clean = marker::strip(raw, format).clean;
    if !sentinel.is_empty() {
        if let Some(i) = clean.find(sentinel) {
            clean.truncate(i);
        }
    }
    clean.truncate(clean.trim_end().len());
    clean
}

/// Units whose last character closes a sentence.
pub fn is_sentence_final(unit: &str) -> bool {
    unit.trim_end_matches(['"', '\'', ')', ']', '»', '”', '’', '」', '』'])
        .ends_with(['.', '!', '?', '。', '！', '？', '…'])
}

#[derive(Debug, Clone)]
pub struct DecodeSession {
    constraint: LengthConstraint,
    schedule: InsertionSchedule,
    next_pos: usize,
    config: DecodeConfig,
    raw: String,
    clean: CleanSink,
    stripper: MarkerStripper,
    segmenter: IncrementalSegmenter,
    /// Clean bytes handed to the segmenter.
    seg_fed: usize,
    boundaries: Vec<UnitBoundary>,
    injected: Vec<MarkerOccurrence>,
    status: SessionStatus,
    phase: Phase,
    transcript: Transcript,
    end_resumes: usize,
    byte_limit: usize,
    scratch: Vec<UnitBoundary>,
}

impl DecodeSession {
    pub fn new(
        constraint: LengthConstraint,
        schedule: InsertionSchedule,
        config: DecodeConfig,
    ) -> Result<Self, DecodeError> {
        constraint.validate()?;
        if schedule.target != constraint.cap() {
            return Err(DecodeError::ScheduleMismatch {
                schedule: schedule.target,
                cap: constraint.cap(),
            });
        }
        let byte_limit = config.byte_budget(constraint.cap());
        Ok(Self {
            constraint,
            schedule,
            next_pos: 0,
            stripper: MarkerStripper::new(config.format.clone()),
            segmenter: IncrementalSegmenter::new(config.rule),
            config,
            raw: String::new(),
            clean: CleanSink::default(),
            seg_fed: 0,
            boundaries: Vec::new(),
            injected: Vec::new(),
            status: SessionStatus::Running,
            phase: Phase::Streaming,
            transcript: Transcript::default(),
            end_resumes: 0,
            byte_limit,
            scratch: Vec::new(),
        })
    }

    pub fn constraint(&self) -> LengthConstraint {
        self.constraint
    }

    pub fn status(&self) -> &SessionStatus {
        &self.status
    }

    pub fn raw(&self) -> &str {
        &self.raw
    }

    /// Clean text delivered so far (may trail the raw text by a held
    /// marker prefix).
    pub fn clean_text(&self) -> &str {
        &self.clean.text
    }

    pub fn clean_count(&self) -> usize {
        self.boundaries.len()
    }

    pub fn boundaries(&self) -> &[UnitBoundary] {
        &self.boundaries
    }

    pub fn injected(&self) -> &[MarkerOccurrence] {
        &self.injected
    }

    pub fn transcript(&self) -> &Transcript {
        &self.transcript
    }

    /// Assistant text to continue from: preamble plus raw text.
    pub fn committed(&self) -> String {
        let mut s = String::with_capacity(self.config.preamble.len() + self.raw.len());
        s.push_str(&self.config.preamble);
        s.push_str(&self.raw);
        s
    }

    fn next_scheduled(&self) -> Option<usize> {
        self.schedule.positions().get(self.next_pos).copied()
    }

    pub fn record_request(&mut self, continuation: bool) {
        self.transcript.push(
            TranscriptKind::Request,
            json!({"continuation": continuation, "committed_bytes": self.config.preamble.len() + self.raw.len()}),
        );
    }

    /// Handles one text chunk from the backend.
    pub fn push_text(&mut self, chunk: &str) -> Step {
        if self.status != SessionStatus::Running {
            return Step::Finished;
        }
        if self.config.record_chunks {
            self.transcript
                .push(TranscriptKind::Chunk, json!({ "text": chunk }));
        }
        if let Phase::AwaitingHead(head) = &mut self.phase {
            head.push_str(chunk);
            let head = head.clone();
            let forced = head.len() >= self.config.max_head_bytes;
            let Some(guard) = self.choose_guard(&head, false, forced) else {
                if self.raw.len() + head.len() > self.byte_limit {
                    return self.exhaust(ExhaustReason::ByteBudget {
                        limit: self.byte_limit,
                    });
                }
                return Step::Continue;
            };
            self.phase = Phase::Streaming;
            self.splice_head(guard, &head);
        } else {
            self.append_raw(chunk);
        }
        self.advance(false)
    }

    /// Handles the end of the current stream.
    pub fn on_done(&mut self, reason: &DoneReason) -> Step {
        if self.status != SessionStatus::Running {
            return Step::Finished;
        }
        log::debug!("stream done: {reason:?}");
        if let Phase::AwaitingHead(head) = &mut self.phase {
            let head = std::mem::take(head);
            self.phase = Phase::Streaming;
            let guard = self.choose_guard(&head, true, true).unwrap_or("\n");
            self.splice_head(guard, &head);
        }
        self.stripper.finish(&mut self.clean);
        self.advance(true)
    }

    /// Handles a backend failure; the session ends exhausted.
    pub fn on_error(&mut self, failure: BackendFailure) -> Step {
        if self.status != SessionStatus::Running {
            return Step::Finished;
        }
        let reason = if failure.kind == FailureKind::Timeout {
            ExhaustReason::Timeout {
                message: failure.message,
            }
        } else {
            ExhaustReason::Backend { failure }
        };
        self.exhaust(reason)
    }

    fn exhaust(&mut self, reason: ExhaustReason) -> Step {
        self.transcript.push(
            TranscriptKind::Stop,
            json!({"status": "exhausted", "detail": reason, "count": self.clean_count()}),
        );
        self.status = SessionStatus::Exhausted(reason);
        Step::Finished
    }

    fn append_raw(&mut self, text: &str) {
        self.raw.push_str(text);
        self.stripper.feed(text, &mut self.clean);
    }

    /// Sentinel position in undelivered-to-segmenter clean text, and how far
    /// the segmenter may be fed.
    fn scan_sentinel(&self, ended: bool) -> (usize, Option<usize>) {
        let text = &self.clean.text;
        let s = self.config.sentinel.as_str();
        if s.is_empty() {
            return (text.len(), None);
        }
        if let Some(i) = find_bytes(&text[self.seg_fed..], s) {
            let at = self.seg_fed + i;
            return (at, Some(at));
        }
        if ended {
            return (text.len(), None);
        }
        let tail = &text[self.seg_fed..];
        let keep = (1..s.len().min(tail.len() + 1))
            .rev()
            .find(|&k| {
                tail.is_char_boundary(tail.len() - k) && s.starts_with(&tail[tail.len() - k..])
            })
            .unwrap_or(0);
        (text.len() - keep, None)
    }

    fn advance(&mut self, ended: bool) -> Step {
        if self.raw.len() > self.byte_limit {
            return self.exhaust(ExhaustReason::ByteBudget {
                limit: self.byte_limit,
            });
        }
        let (limit, sentinel_at) = self.scan_sentinel(ended);
        let mut fresh = std::mem::take(&mut self.scratch);
        fresh.clear();
        if limit > self.seg_fed {
            self.segmenter
                .feed_str_into(&self.clean.text[self.seg_fed..limit], &mut fresh);
            self.seg_fed = limit;
        }
        let at_end = ended || sentinel_at.is_some();
        if at_end {
            // Valid UTF-8 was fed, so finalizing cannot fail.
            if let Ok(rest) = self.segmenter.finalize() {
                fresh.extend(rest);
            }
        }
        let mut step = None;
        for &b in &fresh {
            self.boundaries.push(b);
            if self.should_stop(b) {
                self.stop_at(b, true);
                step = Some(Step::Finished);
                break;
            }
            if self.next_scheduled() == Some(b.unit_index) {
                if at_end {
                    if self.end_resumes >= 1 {
                        continue;
                    }
                    self.end_resumes += 1;
                }
                self.inject_at(b);
                step = Some(Step::Resume);
                break;
            }
        }
        self.scratch = fresh;
        if let Some(s) = step {
            return s;
        }
        if at_end {
            self.end_by_sentinel(sentinel_at);
            return Step::Finished;
        }
        Step::Continue
    }

    fn should_stop(&self, b: UnitBoundary) -> bool {
        match self.constraint {
            LengthConstraint::Exact { target } => b.unit_index >= target,
            LengthConstraint::Range { min, max } => {
                b.unit_index >= max
                    || (b.unit_index >= min
                        && is_sentence_final(
                            &self.clean.text[b.byte_offset_start..b.byte_offset_end],
                        ))
            }
        }
    }

    /// Cuts raw and clean text right after unit `b`.
    fn cut_at(&mut self, b: UnitBoundary) -> usize {
        let clean_end = b.byte_offset_end;
        let raw_end = self.clean.raw_end_of(clean_end);
        self.raw.truncate(raw_end);
        self.clean.truncate(clean_end);
        self.boundaries.truncate(b.unit_index);
        self.seg_fed = clean_end;
        self.transcript.push(
            TranscriptKind::Truncate,
            json!({"unit_index": b.unit_index, "raw_len": raw_end, "clean_len": clean_end}),
        );
        raw_end
    }

    fn push_marker(&mut self, count: usize) -> String {
        let marker = marker::render(&self.config.format, count, self.schedule.target)
            .unwrap_or_else(|_| marker::render(&MarkerFormat::default(), count, 0).unwrap());
        self.raw.push(' ');
        let start = self.raw.len();
        self.raw.push_str(&marker);
        self.injected.push(MarkerOccurrence {
            declared_count: count,
            byte_span: (start, self.raw.len()),
        });
        marker
    }

    fn inject_at(&mut self, b: UnitBoundary) {
        let raw_end = self.cut_at(b);
        self.segmenter.truncate(&self.clean.text, b);
        self.stripper.restore(&self.clean, raw_end);
        let marker = self.push_marker(b.unit_index);
        let before = self.clean.text.len();
        let fed = self.raw[raw_end..].to_string();
        self.stripper.feed(&fed, &mut self.clean);
        debug_assert_eq!(
            before,
            self.clean.text.len(),
            "marker must not leak into clean text"
        );
        self.next_pos += 1;
        self.transcript.push(
            TranscriptKind::Inject,
            json!({"count": b.unit_index, "marker": marker, "raw_offset": raw_end}),
        );
        self.phase = Phase::AwaitingHead(String::new());
    }

    /// First glue that provably leaves counted text unchanged, or `None`
    /// while more continuation text is needed to tell. With `forced`,
    /// undecided glues are skipped.
    fn choose_guard(&self, head: &str, ended: bool, forced: bool) -> Option<&'static str> {
        for g in GUARDS {
            match self.splice_verdict(g, head, ended) {
                Verdict::Stable => return Some(g),
                Verdict::Unstable => {}
                Verdict::Undecided if forced => {}
                Verdict::Undecided => return None,
            }
        }
        Some("\n")
    }

    /// Appends `guard` and `head` after the last injected marker.
    fn splice_head(&mut self, guard: &str, head: &str) {
        if !guard.is_empty() {
            self.transcript
                .push(TranscriptKind::Guard, json!({ "text": guard }));
        }
        let mut text = String::with_capacity(guard.len() + head.len());
        text.push_str(guard);
        text.push_str(head);
        self.append_raw(&text);
    }

    fn splice_verdict(&self, guard: &str, head: &str, ended: bool) -> Verdict {
        let mut stripper = self.stripper.clone();
        let mut added = CleanSink::default();
        stripper.feed(guard, &mut added);
        stripper.feed(head, &mut added);
        if ended {
            stripper.finish(&mut added);
        }
        if stripper.has_retracted() || stripper.holds_delivered() {
            return Verdict::Unstable;
        }
        let mut undecided = false;
        let cut = self.clean.text.len();
        let s = self.config.sentinel.as_str();
        if !s.is_empty() {
            let mut from = cut.saturating_sub(s.len() - 1);
            while !self.clean.text.is_char_boundary(from) {
                from -= 1;
            }
            let mut window = self.clean.text[from..].to_string();
            window.push_str(&added.text);
            if window.find(s).is_some_and(|i| from + i < cut) {
                return Verdict::Unstable;
            }
            // A sentinel that starts before the cut may still complete.
            let open = (from..cut)
                .filter(|&i| window.is_char_boundary(i - from))
                .any(|i| {
                    let rest = &window[i - from..];
                    rest.len() < s.len() && s.starts_with(rest)
                });
            undecided |= open && !ended;
        }
        let mut seg = self.segmenter.clone();
        seg.feed_str(&added.text);
        if ended {
            let _ = seg.finalize();
        }
        if seg.is_unstable() {
            return Verdict::Unstable;
        }
        // Counted units are sealed once whitespace follows them.
        undecided |= !ended && !added.text.contains(char::is_whitespace);
        if undecided {
            Verdict::Undecided
        } else {
            Verdict::Stable
        }
    }

    fn stop_at(&mut self, b: UnitBoundary, at_target: bool) {
        self.cut_at(b);
        let marker = self.push_marker(b.unit_index);
        self.raw.push(' ');
        self.raw.push_str(&self.config.sentinel);
        self.status = if at_target || self.constraint.is_met(b.unit_index) {
            SessionStatus::StoppedAtTarget
        } else {
            SessionStatus::StoppedBySentinel
        };
        self.transcript.push(
            TranscriptKind::Stop,
            json!({"status": "at_target", "count": b.unit_index, "marker": marker}),
        );
    }

    fn end_by_sentinel(&mut self, sentinel_at: Option<usize>) {
        if let Some(p) = sentinel_at {
            let end = p + self.config.sentinel.len();
            let raw_end = self.clean.raw_end_of(end);
            self.raw.truncate(raw_end);
            self.clean.truncate(end);
        }
        self.status = SessionStatus::StoppedBySentinel;
        self.transcript.push(
            TranscriptKind::Stop,
            json!({"status": "sentinel", "count": self.clean_count(), "sentinel_seen": sentinel_at.is_some()}),
        );
    }

    /// Ends a running session at an already emitted boundary: text after it
    /// is discarded and the terminal marker and sentinel are written.
    pub fn force_stop_at(&mut self, boundary: UnitBoundary) -> Result<(), DecodeError> {
        if self.status != SessionStatus::Running {
            return Err(DecodeError::NotRunning);
        }
        if boundary.unit_index == 0
            || self.boundaries.get(boundary.unit_index - 1) != Some(&boundary)
        {
            return Err(DecodeError::UnknownBoundary(boundary.unit_index));
        }
        self.phase = Phase::Streaming;
        self.stop_at(boundary, false);
        Ok(())
    }

    pub fn into_result(self, requests: usize, units_received: usize) -> SessionResult {
        let clean = clean_of(&self.raw, &self.config.format, &self.config.sentinel);
        SessionResult {
            final_count: self.boundaries.len(),
            raw: self.raw,
            clean,
            injected: self.injected,
            stop_reason: self.status,
            transcript: self.transcript,
            requests,
            units_received,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Verdict {
    Stable,
    Unstable,
    Undecided,
}

/// Counts clean units in text received from one stream.
fn received_units(text: &str, config: &DecodeConfig) -> usize {
    segmenter::count_units(&marker::strip(text, &config.format).clean, config.rule)
}

/// Byte offset of the first `needle` in `hay`; cheaper than `str::find` for
/// the short haystacks scanned once per chunk.
fn find_bytes(hay: &str, needle: &str) -> Option<usize> {
    let (h, n) = (hay.as_bytes(), needle.as_bytes());
    let first = *n.first()?;
    let mut from = 0;
    while let Some(k) = h[from..].iter().position(|&b| b == first) {
        let at = from + k;
        if h[at..].starts_with(n) {
            return Some(at);
        }
        from = at + 1;
    }
    None
}

/// Drives a session against a backend until it finishes.
pub fn run_session(
    context: &[Message],
    constraint: LengthConstraint,
    schedule: InsertionSchedule,
    config: &DecodeConfig,
    backend: &dyn Backend,
    sampling: &SamplingParams,
) -> Result<SessionResult, DecodeError> {
    run_session_with_deadline(
        context, constraint, schedule, config, backend, sampling, None,
    )
}

/// As [`run_session`], ending exhausted once `deadline` has passed.
pub fn run_session_with_deadline(
    context: &[Message],
    constraint: LengthConstraint,
    schedule: InsertionSchedule,
    config: &DecodeConfig,
    backend: &dyn Backend,
    sampling: &SamplingParams,
    deadline: Option<Instant>,
) -> Result<SessionResult, DecodeError> {
    let mut session = DecodeSession::new(constraint, schedule, config.clone())?;
    let mut sampling = sampling.clone();
    sampling.max_units_hint = constraint.cap();
    if !config.sentinel.is_empty() && !sampling.stop_sequences.contains(&config.sentinel) {
        sampling.stop_sequences.push(config.sentinel.clone());
    }
    let request = GenerationRequest::new(context.to_vec(), sampling);
    let open = |session: &mut DecodeSession, continuation: bool| -> EventStream {
        session.record_request(continuation);
        let committed = session.committed();
        if committed.is_empty() {
            backend.generate_stream(&request)
        } else {
            backend.continue_from(&request, &committed)
        }
    };
    let mut requests = 1;
    let mut units_received = 0;
    let mut received = String::new();
    let mut stream = open(&mut session, false);
    loop {
        if deadline.is_some_and(|d| Instant::now() >= d) {
            session.on_error(BackendFailure::new(
                FailureKind::Timeout,
                "session deadline passed",
            ));
            break;
        }
        let step = match stream.next() {
            Some(StreamEvent::TextChunk(t)) => {
                received.push_str(&t);
                session.push_text(&t)
            }
            Some(StreamEvent::Done(reason)) => session.on_done(&reason),
            Some(StreamEvent::Error(f)) => session.on_error(f),
            None => session.on_done(&DoneReason::Finished),
        };
        match step {
            Step::Continue => {}
            Step::Resume => {
                drop(stream);
                units_received += received_units(&received, config);
                received.clear();
                requests += 1;
                stream = open(&mut session, true);
            }
            Step::Finished => break,
        }
    }
    drop(stream);
    units_received += received_units(&received, config);
    Ok(session.into_result(requests, units_received))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreeRunResult {
    /// Clean text, cut at the sentinel or the unit budget.
    pub text: String,
    pub count: usize,
    pub done: Option<DoneReason>,
    pub hit_budget: bool,
}

/// Streams one reply without markers, stopping at the sentinel, the end of
/// the stream, or `max_units` units.
pub fn run_free(
    backend: &dyn Backend,
    request: &GenerationRequest,
    max_units: usize,
    config: &DecodeConfig,
) -> Result<FreeRunResult, BackendFailure> {
    let stream = match &request.assistant_prefix {
        Some(p) => backend.continue_from(request, p),
        None => backend.generate_stream(request),
    };
    let mut text = String::new();
    let mut seg = IncrementalSegmenter::new(config.rule);
    let mut fed = 0usize;
    let mut bounds = Vec::new();
    let mut done = None;
    let mut cut: Option<usize> = None;
    for ev in stream {
        match ev {
            StreamEvent::TextChunk(t) => {
                text.push_str(&t);
                let visible = match (!config.sentinel.is_empty())
                    .then(|| text.find(&config.sentinel))
                    .flatten()
                {
                    Some(i) => {
                        cut = Some(i);
                        i
                    }
                    None => text.len(),
                };
                if visible > fed {
                    seg.feed_str_into(&text[fed..visible], &mut bounds);
                    fed = visible;
                }
                if max_units > 0 && seg.count() >= max_units {
                    break;
                }
                if cut.is_some() {
                    done = Some(DoneReason::Stop);
                    break;
                }
            }
            StreamEvent::Done(r) => {
                done = Some(r);
                break;
            }
            StreamEvent::Error(f) => return Err(f),
        }
    }
    if let Some(i) = cut {
        text.truncate(i);
    }
    let hit_budget = max_units > 0 && seg.count() >= max_units;
    let mut clean = marker::strip(&text, &config.format).clean;
    if hit_budget {
        let b = segmenter::boundaries(&clean, config.rule);
        if let Some(last) = b.get(max_units - 1) {
            clean.truncate(last.byte_offset_end);
        }
    }
    clean.truncate(clean.trim_end().len());
    let count = segmenter::count_units(&clean, config.rule);
    Ok(FreeRunResult {
        text: clean,
        count,
        done,
        hit_budget,
    })
}

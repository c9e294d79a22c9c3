//! Deterministic in-process backends for tests and offline runs.

use std::collections::HashMap;
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    Backend, BackendFailure, DoneReason, EventStream, GenerationRequest, StreamEvent,
    DEFAULT_STOP_SENTINEL,
};
use crate::marker::{self, MarkerFormat, MarkerKind};
use crate::segmenter::{self, SegmentationRule};

const MAX_CHUNK_BYTES: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "behavior", content = "arg", rename_all = "snake_case")]
pub enum MockBehavior {
    /// Filler units forever; ends only on consumer cancel.
    Compliant,
    /// Writes `max_units_hint + excess` units, then the stop sequence.
    Overrun(usize),
    /// Writes `max_units_hint - deficit` units, then the stop sequence.
    Undershoot(usize),
    /// Replays fixed text, cut at the first stop sequence.
    Scripted(Vec<String>),
    /// Endless seeded noise: punctuation, CJK, digits, bracket fragments and
    /// marker look-alikes.
    Babble,
    /// Perfect counter for probe prompts: echoes the text after `Text:` with
    /// exact running-count markers every `n` units (from "after every n")
    /// and states the total; answers a plan prompt with one section carrying
    /// the requested length. Other prompts get `Compliant` filler.
    Counter,
}

impl MockBehavior {
    /// Parses `compliant`, `overrun=5`, `undershoot=3`, `babble`, `counter`.
    pub fn parse(s: &str) -> Option<Self> {
        let (name, arg) = match s.split_once('=') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let num = || arg.and_then(|a| a.parse::<usize>().ok());
        match name {
            "compliant" => Some(MockBehavior::Compliant),
            "overrun" => Some(MockBehavior::Overrun(num().unwrap_or(10))),
            "undershoot" => Some(MockBehavior::Undershoot(num().unwrap_or(10))),
            "babble" => Some(MockBehavior::Babble),
            "counter" => Some(MockBehavior::Counter),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockScript {
    pub behavior: MockBehavior,
    pub seed: u64,
}

/// The `i`-th filler unit (1-based): every twelfth unit is a full stop.
pub fn filler_unit(i: usize) -> String {
    if i.is_multiple_of(12) {
        ".".to_string()
    } else {
        format!("w{i}")
    }
}

/// Replays a list of behaviors: each fresh request (one whose assistant
/// prefix carries no marker) takes the next behavior for that conversation;
/// the last behavior repeats. Continuations reuse the behavior of the fresh
/// request they extend.
///
/// With [`MockBackend::with_shared_turns`] all conversations advance one
/// common counter instead, so a behavior list can script a whole multi-prompt
/// run (plan, draft, rewrite attempts) in request order.
pub struct MockBackend {
    behaviors: Vec<MockBehavior>,
    seed: u64,
    format: MarkerFormat,
    rule: SegmentationRule,
    shared_turns: bool,
    record: bool,
    turns: Mutex<HashMap<u64, usize>>,
    received: Mutex<Vec<GenerationRequest>>,
}

impl MockBackend {
    pub fn new(behavior: MockBehavior, seed: u64) -> Self {
        Self::sequence(vec![behavior], seed)
    }

    pub fn sequence(behaviors: Vec<MockBehavior>, seed: u64) -> Self {
        assert!(!behaviors.is_empty(), "mock needs at least one behavior");
        Self {
            behaviors,
            seed,
            format: MarkerFormat::default(),
            rule: SegmentationRule::default(),
            shared_turns: false,
            record: true,
            turns: Mutex::new(HashMap::new()),
            received: Mutex::new(Vec::new()),
        }
    }

    pub fn from_script(script: MockScript) -> Self {
        Self::new(script.behavior, script.seed)
    }

    pub fn with_marker_format(mut self, format: MarkerFormat) -> Self {
        self.format = format;
        self
    }

    pub fn with_shared_turns(mut self) -> Self {
        self.shared_turns = true;
        self
    }

    /// Stops keeping a copy of each request (for very long runs).
    pub fn without_recording(mut self) -> Self {
        self.record = false;
        self
    }

    /// Every request seen so far, in arrival order.
    pub fn received(&self) -> Vec<GenerationRequest> {
        self.received.lock().unwrap().clone()
    }

    fn conversation_key(request: &GenerationRequest) -> u64 {
        let json = serde_json::to_string(&request.messages).unwrap_or_default();
        fnv1a(json.as_bytes())
    }

    /// Units already committed by the prefix, if it continues a marked turn.
    fn committed_units(&self, prefix: &str, hint: usize) -> Option<usize> {
        let to_units = |declared: usize| match self.format.kind {
            MarkerKind::RemainingCount => hint.saturating_sub(declared),
            _ => declared,
        };
        // Usual case: the prefix ends with the marker just injected.
        let trimmed = prefix.trim_end();
        if trimmed.ends_with(self.format.close_delim.as_str()) {
            if let Some(open) = trimmed.rfind(self.format.open_delim.as_str()) {
                if let Some(declared) = marker::parse_marker(&trimmed[open..], &self.format) {
                    return Some(to_units(declared));
                }
            }
        }
        let stripped = marker::strip(prefix, &self.format);
        let last = stripped.occurrences.last()?;
        let tail = marker::strip(&prefix[last.byte_span.1..], &self.format).clean;
        Some(to_units(last.declared_count) + segmenter::count_units(&tail, self.rule))
    }

    fn pieces(
        &self,
        behavior: &MockBehavior,
        request: &GenerationRequest,
        committed: usize,
        rng_seed: u64,
    ) -> Box<dyn Iterator<Item = String> + Send> {
        let hint = request.sampling.max_units_hint;
        let stop = request
            .sampling
            .stop_sequences
            .first()
            .cloned()
            .unwrap_or_else(|| DEFAULT_STOP_SENTINEL.to_string());
        let first_sep = if committed == 0 { "" } else { " " };
        let filler = move |from: usize, to: Option<usize>| {
            let range: Box<dyn Iterator<Item = usize> + Send> = match to {
                Some(end) => Box::new(from..=end),
                None => Box::new(from..),
            };
            range.map(move |i| {
                let sep = if i == from { first_sep } else { " " };
                format!("{sep}{}", filler_unit(i))
            })
        };
        match behavior {
            MockBehavior::Compliant => Box::new(filler(committed + 1, None)),
            MockBehavior::Overrun(excess) => {
                let total = hint + excess;
                Box::new(
                    filler(committed + 1, Some(total)).chain(std::iter::once(format!(" {stop}"))),
                )
            }
            MockBehavior::Undershoot(deficit) => {
                let total = hint.saturating_sub(*deficit);
                Box::new(
                    filler(committed + 1, Some(total)).chain(std::iter::once(format!(" {stop}"))),
                )
            }
            MockBehavior::Scripted(chunks) => {
                let text: String = chunks.concat();
                let rest = if committed == 0 {
                    text
                } else {
                    let bounds = segmenter::boundaries(&text, self.rule);
                    match bounds.get(committed - 1) {
                        Some(b) => text[b.byte_offset_end..].to_string(),
                        None => String::new(),
                    }
                };
                Box::new(std::iter::once(rest))
            }
            MockBehavior::Counter => {
                let prompt = request
                    .messages
                    .last()
                    .map(|m| m.content.as_str())
                    .unwrap_or("");
                match counter_reply(prompt, self.rule, &self.format) {
                    Some(reply) if committed == 0 => Box::new(std::iter::once(reply)),
                    _ => Box::new(filler(committed + 1, None)),
                }
            }
            MockBehavior::Babble => {
                let mut rng = ChaCha8Rng::seed_from_u64(rng_seed ^ 0x00B0_BB1E);
                let mut first = true;
                Box::new(std::iter::from_fn(move || {
                    let tok = BABBLE[rng.random_range(0..BABBLE.len())];
                    let sep = if first {
                        ""
                    } else if rng.random_bool(0.8) {
                        " "
                    } else {
                        ""
                    };
                    first = false;
                    Some(format!("{sep}{tok}"))
                }))
            }
        }
    }
}

fn number_after(text: &str, key: &str) -> Option<usize> {
    let i = text.find(key)? + key.len();
    let digits: String = text[i..].chars().take_while(char::is_ascii_digit).collect();
    digits.parse().ok()
}

/// Reply of [`MockBehavior::Counter`], if the prompt is a probe or plan prompt.
pub fn counter_reply(
    prompt: &str,
    rule: SegmentationRule,
    format: &MarkerFormat,
) -> Option<String> {
    if let Some(i) = prompt.rfind("Text:\n") {
        let text = prompt[i + "Text:\n".len()..].trim();
        let n = number_after(prompt, "after every ").unwrap_or(1).max(1);
        let bounds = segmenter::boundaries(text, rule);
        let total = bounds.len();
        let mut out = String::new();
        let mut from = 0;
        for b in &bounds {
            if b.unit_index % n == 0 || b.unit_index == total {
                out.push_str(&text[from..b.byte_offset_end]);
                out.push(' ');
                out.push_str(&marker::render(format, b.unit_index, total).ok()?);
                from = b.byte_offset_end;
            }
        }
        out.push_str(&text[from..]);
        out.push_str(&format!("\nThe text contains {total} words."));
        return Some(out);
    }
    let target = number_after(prompt, "approximately ")?;
    Some(format!("1. Answer the question directly ({target} words)"))
}

const BABBLE: &[&str] = &[
    "alpha",
    "beta",
    "gamma",
    ",",
    ".",
    "!",
    "?",
    "state-of-the-art",
    "1,000",
    "don't",
    "3.14",
    "日本語",
    "漢字",
    "かな",
    "[",
    "]",
    "[3",
    "words]",
    "[2 words]",
    "[1 word]",
    "[x words]",
    "#",
    "##",
    "end",
    "e.g.",
    "\n",
    "—",
    "(",
    ")",
    "\"quoted\"",
    "naïve",
    "😀",
];

impl Backend for MockBackend {
    fn generate_stream(&self, request: &GenerationRequest) -> EventStream {
        if self.record {
            self.received.lock().unwrap().push(request.clone());
        }
        if let Err(e) = request.validate() {
            return EventStream::failed(e);
        }
        let key = if self.shared_turns {
            0
        } else {
            Self::conversation_key(request)
        };
        let hint = request.sampling.max_units_hint;
        let committed = request
            .assistant_prefix
            .as_deref()
            .and_then(|p| self.committed_units(p, hint));
        let turn = {
            let mut turns = self.turns.lock().unwrap();
            let slot = turns.entry(key).or_insert(0);
            if committed.is_none() {
                *slot += 1;
            }
            (*slot).max(1) - 1
        };
        let behavior = &self.behaviors[turn.min(self.behaviors.len() - 1)];
        let rng_seed = self.seed ^ request_hash(request);
        let pieces = self.pieces(behavior, request, committed.unwrap_or(0), rng_seed);
        EventStream::new(ChunkedStream::new(
            pieces,
            request.sampling.stop_sequences.clone(),
            rng_seed,
        ))
    }

    fn describe(&self) -> String {
        format!("mock:{:?}:{}", self.behaviors, self.seed)
    }
}

/// Cuts a lazy text source into seeded random-size chunks and ends the
/// stream before the first complete stop sequence.
struct ChunkedStream {
    source: Box<dyn Iterator<Item = String> + Send>,
    source_done: bool,
    pending: String,
    stops: Vec<String>,
    max_stop: usize,
    rng: ChaCha8Rng,
    terminal: Option<StreamEvent>,
    ended: bool,
}

impl ChunkedStream {
    fn new(source: Box<dyn Iterator<Item = String> + Send>, stops: Vec<String>, seed: u64) -> Self {
        let stops: Vec<String> = stops.into_iter().filter(|s| !s.is_empty()).collect();
        let max_stop = stops.iter().map(|s| s.len()).max().unwrap_or(0);
        Self {
            source,
            source_done: false,
            pending: String::new(),
            stops,
            max_stop,
            rng: ChaCha8Rng::seed_from_u64(seed),
            terminal: None,
            ended: false,
        }
    }

    fn earliest_stop(&self) -> Option<usize> {
        self.stops
            .iter()
            .filter_map(|s| self.pending.find(s.as_str()))
            .min()
    }
}

impl Iterator for ChunkedStream {
    type Item = StreamEvent;

    fn next(&mut self) -> Option<StreamEvent> {
        if self.ended {
            return None;
        }
        if let Some(t) = self.terminal.take() {
            self.ended = true;
            return Some(t);
        }
        let want = self.rng.random_range(1..=MAX_CHUNK_BYTES);
        while !self.source_done && self.pending.len() < want + self.max_stop {
            match self.source.next() {
                Some(p) => self.pending.push_str(&p),
                None => self.source_done = true,
            }
        }
        if let Some(pos) = self.earliest_stop() {
            if pos <= want {
                let text: String = self.pending[..pos].to_string();
                self.pending.clear();
                self.source_done = true;
                if text.is_empty() {
                    self.ended = true;
                    return Some(StreamEvent::Done(DoneReason::Stop));
                }
                self.terminal = Some(StreamEvent::Done(DoneReason::Stop));
                return Some(StreamEvent::TextChunk(text));
            }
        }
        if self.pending.is_empty() {
            self.ended = true;
            return Some(StreamEvent::Done(DoneReason::Finished));
        }
        let mut cut = want.min(self.pending.len());
        while !self.pending.is_char_boundary(cut) {
            cut += 1;
        }
        let rest = self.pending.split_off(cut);
        let chunk = std::mem::replace(&mut self.pending, rest);
        Some(StreamEvent::TextChunk(chunk))
    }
}

/// Backend driven by a closure from request to full reply text; the reply is
/// streamed in one chunk followed by `Done(Finished)`.
pub struct FnBackend<F> {
    f: F,
    name: String,
}

impl<F> FnBackend<F>
where
    F: Fn(&GenerationRequest) -> Result<String, BackendFailure> + Send + Sync,
{
    pub fn new(name: impl Into<String>, f: F) -> Self {
        Self {
            f,
            name: name.into(),
        }
    }
}

impl<F> Backend for FnBackend<F>
where
    F: Fn(&GenerationRequest) -> Result<String, BackendFailure> + Send + Sync,
{
    fn generate_stream(&self, request: &GenerationRequest) -> EventStream {
        match (self.f)(request) {
            Ok(text) => EventStream::new(
                [
                    StreamEvent::TextChunk(text),
                    StreamEvent::Done(DoneReason::Finished),
                ]
                .into_iter(),
            ),
            Err(e) => EventStream::failed(e),
        }
    }

    fn describe(&self) -> String {
        self.name.clone()
    }
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    fnv1a_extend(0xcbf2_9ce4_8422_2325, bytes)
}

fn fnv1a_extend(mut h: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Hash of messages, sampling and assistant prefix.
fn request_hash(request: &GenerationRequest) -> u64 {
    let head = serde_json::to_string(&(&request.messages, &request.sampling, request.stream))
        .unwrap_or_default();
    let h = fnv1a(head.as_bytes());
    match &request.assistant_prefix {
        Some(p) => fnv1a_extend(fnv1a_extend(h, b"\x01"), p.as_bytes()),
        None => h,
    }
}

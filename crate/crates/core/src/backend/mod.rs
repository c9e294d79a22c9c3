//! Interruptible text-generation sources.
//!
//! A [`Backend`] turns a [`GenerationRequest`] into an [`EventStream`]: text
//! chunks followed by exactly one terminal event. Dropping the stream cancels
//! the generation. Continuing an assistant turn after a spliced marker is done
//! with [`Backend::continue_from`], which resends the committed assistant text
//! as a prefix to be completed.

mod http;
mod mock;
mod server;
pub mod sse;

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use http::{ContinuationStyle, HttpBackend, HttpConfig};
pub use mock::{FnBackend, MockBackend, MockBehavior, MockScript};
pub use server::{parse_wire_request, MockServer, ServerFault};

pub const DEFAULT_TEMPERATURE: f64 = 0.5;
pub const DEFAULT_STOP_SENTINEL: &str = "###end";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }

    pub fn parse(s: &str) -> Option<Role> {
        match s {
            "system" => Some(Role::System),
            "user" => Some(Role::User),
            "assistant" => Some(Role::Assistant),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub temperature: f64,
    /// Length in units the caller intends to reach; backends map it to a
    /// token budget.
    pub max_units_hint: usize,
    pub stop_sequences: Vec<String>,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self {
            temperature: DEFAULT_TEMPERATURE,
            max_units_hint: 0,
            stop_sequences: vec![DEFAULT_STOP_SENTINEL.to_string()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub messages: Vec<Message>,
    pub sampling: SamplingParams,
    pub stream: bool,
    /// Assistant text already committed; the backend completes this turn.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub assistant_prefix: Option<String>,
}

impl GenerationRequest {
    pub fn new(messages: Vec<Message>, sampling: SamplingParams) -> Self {
        Self {
            messages,
            sampling,
            stream: true,
            assistant_prefix: None,
        }
    }

    pub fn with_assistant_prefix(&self, committed: &str) -> Self {
        let mut r = self.clone();
        r.assistant_prefix = Some(committed.to_string());
        r
    }

    pub fn validate(&self) -> Result<(), BackendFailure> {
        if self.messages.is_empty() {
            return Err(BackendFailure::invalid("request has no messages"));
        }
        if self.sampling.temperature.is_nan() || self.sampling.temperature < 0.0 {
            return Err(BackendFailure::invalid("temperature must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DoneReason {
    /// A stop sequence ended the turn.
    Stop,
    /// The token budget ran out.
    Length,
    /// The generator ended the turn on its own.
    Finished,
    Other(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    Transport,
    Status,
    Protocol,
    Timeout,
    InvalidRequest,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendFailure {
    pub kind: FailureKind,
    pub message: String,
}

impl BackendFailure {
    pub fn new(kind: FailureKind, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
        }
    }

    pub fn invalid(message: impl Into<String>) -> Self {
        Self::new(FailureKind::InvalidRequest, message)
    }
}

impl fmt::Display for BackendFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}: {}", self.kind, self.message)
    }
}

impl std::error::Error for BackendFailure {}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum StreamEvent {
    TextChunk(String),
    Done(DoneReason),
    Error(BackendFailure),
}

impl StreamEvent {
    pub fn is_terminal(&self) -> bool {
        !matches!(self, StreamEvent::TextChunk(_))
    }
}

/// A well-formed event stream: chunks, then exactly one terminal event.
///
/// If the underlying source ends without a terminal event, `Done(Finished)`
/// is synthesized. Nothing is yielded after the terminal event. Dropping the
/// stream cancels the generation.
pub struct EventStream {
    inner: Box<dyn Iterator<Item = StreamEvent> + Send>,
    finished: bool,
}

impl EventStream {
    pub fn new(inner: impl Iterator<Item = StreamEvent> + Send + 'static) -> Self {
        Self {
            inner: Box::new(inner),
            finished: false,
        }
    }

    pub fn failed(failure: BackendFailure) -> Self {
        Self::new(std::iter::once(StreamEvent::Error(failure)))
    }

    /// Drains the stream into its concatenated text and terminal event.
    pub fn collect_text(self) -> (String, StreamEvent) {
        let mut text = String::new();
        let mut terminal = StreamEvent::Done(DoneReason::Finished);
        for ev in self {
            match ev {
                StreamEvent::TextChunk(t) => text.push_str(&t),
                other => terminal = other,
            }
        }
        (text, terminal)
    }
}

impl Iterator for EventStream {
    type Item = StreamEvent;

    fn next(&mut self) -> Option<StreamEvent> {
        if self.finished {
            return None;
        }
        match self.inner.next() {
            Some(ev) => {
                if ev.is_terminal() {
                    self.finished = true;
                }
                Some(ev)
            }
            None => {
                self.finished = true;
                Some(StreamEvent::Done(DoneReason::Finished))
            }
        }
    }
}

impl fmt::Debug for EventStream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EventStream")
            .field("finished", &self.finished)
            .finish()
    }
}

pub trait Backend: Send + Sync {
    fn generate_stream(&self, request: &GenerationRequest) -> EventStream;

    /// Continues the assistant turn after `committed` (which includes any
    /// spliced markers) instead of starting a new one.
    fn continue_from(&self, request: &GenerationRequest, committed: &str) -> EventStream {
        self.generate_stream(&request.with_assistant_prefix(committed))
    }

    /// Short identifier echoed into reports.
    fn describe(&self) -> String;
}

impl<B: Backend + ?Sized> Backend for Arc<B> {
    fn generate_stream(&self, request: &GenerationRequest) -> EventStream {
        (**self).generate_stream(request)
    }

    fn continue_from(&self, request: &GenerationRequest, committed: &str) -> EventStream {
        (**self).continue_from(request, committed)
    }

    fn describe(&self) -> String {
        (**self).describe()
    }
}

impl<B: Backend + ?Sized> Backend for &B {
    fn generate_stream(&self, request: &GenerationRequest) -> EventStream {
        (**self).generate_stream(request)
    }

    fn continue_from(&self, request: &GenerationRequest, committed: &str) -> EventStream {
        (**self).continue_from(request, committed)
    }

    fn describe(&self) -> String {
        (**self).describe()
    }
}

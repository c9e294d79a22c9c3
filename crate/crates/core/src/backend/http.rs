//! Streaming chat-completions client.
//!
//! Each stream runs its HTTP exchange on a reader thread that forwards
//! events over a bounded channel. The consumer waits at most the idle
//! timeout for each event. Dropping the stream closes the channel; the
//! reader notices on its next send and closes the connection.

use std::io::{BufRead, BufReader};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, SyncSender};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::sse::{self, Frame, SseDecoder};
use super::{
    Backend, BackendFailure, DoneReason, EventStream, FailureKind, GenerationRequest, StreamEvent,
};

/// How a committed assistant prefix is sent so the server completes the
/// same turn instead of opening a new one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContinuationStyle {
    /// A trailing assistant message; servers that treat it as a prefill
    /// (llama.cpp server, several hosted APIs) continue it.
    #[default]
    TrailingAssistant,
    /// Trailing assistant message plus `continue_final_message: true` and
    /// `add_generation_prompt: false` (vLLM).
    ContinueFinalMessage,
    /// Trailing assistant message flagged with `prefix: true`.
    PrefixFlag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpConfig {
    /// Full URL of the chat-completions endpoint.
    pub endpoint: String,
    pub model: String,
    #[serde(skip)]
    pub api_key: Option<String>,
    pub idle_timeout: Duration,
    pub connect_timeout: Duration,
    pub continuation: ContinuationStyle,
    /// Extra attempts after a transport failure that happens before any
    /// content arrived.
    pub transport_retries: u32,
}

impl HttpConfig {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key: None,
            idle_timeout: Duration::from_secs(60),
            connect_timeout: Duration::from_secs(10),
            continuation: ContinuationStyle::default(),
            transport_retries: 1,
        }
    }
}

pub struct HttpBackend {
    config: HttpConfig,
    agent: ureq::Agent,
}

/// Token budget sent on the wire for a unit hint.
pub fn wire_max_tokens(max_units_hint: usize) -> Option<usize> {
    (max_units_hint > 0).then(|| 4 * max_units_hint + 64)
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_connect(Some(config.connect_timeout))
            .build()
            .into();
        Self { config, agent }
    }

    pub fn config(&self) -> &HttpConfig {
        &self.config
    }

    /// JSON body for a request, including the continuation encoding.
    pub fn request_body(&self, request: &GenerationRequest) -> Value {
        let mut messages: Vec<Value> = request
            .messages
            .iter()
            .map(|m| json!({"role": m.role.as_str(), "content": m.content}))
            .collect();
        let mut body = json!({
            "model": self.config.model,
            "temperature": request.sampling.temperature,
            "stream": true,
        });
        if !request.sampling.stop_sequences.is_empty() {
            body["stop"] = json!(request.sampling.stop_sequences);
        }
        if let Some(t) = wire_max_tokens(request.sampling.max_units_hint) {
            body["max_tokens"] = json!(t);
        }
        if let Some(prefix) = &request.assistant_prefix {
            let mut msg = json!({"role": "assistant", "content": prefix});
            match self.config.continuation {
                ContinuationStyle::TrailingAssistant => {}
                ContinuationStyle::ContinueFinalMessage => {
                    body["continue_final_message"] = json!(true);
                    body["add_generation_prompt"] = json!(false);
                }
                ContinuationStyle::PrefixFlag => {
                    msg["prefix"] = json!(true);
                }
            }
            messages.push(msg);
        }
        body["messages"] = Value::Array(messages);
        body
    }
}

impl Backend for HttpBackend {
    fn generate_stream(&self, request: &GenerationRequest) -> EventStream {
        if let Err(e) = request.validate() {
            return EventStream::failed(e);
        }
        let body = self.request_body(request).to_string();
        let (tx, rx) = mpsc::sync_channel(64);
        let agent = self.agent.clone();
        let config = self.config.clone();
        thread::spawn(move || pump(agent, config, body, tx));
        EventStream::new(ChannelStream {
            rx,
            idle: self.config.idle_timeout,
        })
    }

    fn describe(&self) -> String {
        format!("{}@{}", self.config.model, self.config.endpoint)
    }
}

struct ChannelStream {
    rx: Receiver<StreamEvent>,
    idle: Duration,
}

impl Iterator for ChannelStream {
    type Item = StreamEvent;

    fn next(&mut self) -> Option<StreamEvent> {
        match self.rx.recv_timeout(self.idle) {
            Ok(ev) => Some(ev),
            Err(RecvTimeoutError::Timeout) => Some(StreamEvent::Error(BackendFailure::new(
                FailureKind::Timeout,
                format!("no data for {:?}", self.idle),
            ))),
            Err(RecvTimeoutError::Disconnected) => Some(StreamEvent::Error(BackendFailure::new(
                FailureKind::Transport,
                "reader stopped without a terminal event",
            ))),
        }
    }
}

enum Attempt {
    /// Failed before any content was forwarded; safe to retry.
    Retryable(BackendFailure),
    Finished,
}

fn pump(agent: ureq::Agent, config: HttpConfig, body: String, tx: SyncSender<StreamEvent>) {
    let mut tries = 0;
    loop {
        match attempt(&agent, &config, &body, &tx) {
            Attempt::Finished => return,
            Attempt::Retryable(f) => {
                if tries >= config.transport_retries {
                    let _ = tx.send(StreamEvent::Error(f));
                    return;
                }
                log::warn!("retrying after transport failure: {f}");
                tries += 1;
            }
        }
    }
}

fn attempt(
    agent: &ureq::Agent,
    config: &HttpConfig,
    body: &str,
    tx: &SyncSender<StreamEvent>,
) -> Attempt {
    let mut req = agent
        .post(&config.endpoint)
        .header("Content-Type", "application/json")
        .header("Accept", "text/event-stream");
    if let Some(key) = &config.api_key {
        req = req.header("Authorization", format!("Bearer {key}"));
    }
    let resp = match req.send(body) {
        Ok(r) => r,
        Err(e) => {
            return match e {
                ureq::Error::Timeout(_) => {
                    Attempt::Retryable(BackendFailure::new(FailureKind::Timeout, e.to_string()))
                }
                ureq::Error::BadUri(_) | ureq::Error::Http(_) => {
                    let _ = tx.send(StreamEvent::Error(BackendFailure::invalid(e.to_string())));
                    Attempt::Finished
                }
                _ => Attempt::Retryable(BackendFailure::new(FailureKind::Transport, e.to_string())),
            }
        }
    };
    let status = resp.status().as_u16();
    if !(200..300).contains(&status) {
        let text = resp
            .into_body()
            .into_with_config()
            .limit(4096)
            .lossy_utf8(true)
            .read_to_string()
            .unwrap_or_default();
        let _ = tx.send(StreamEvent::Error(BackendFailure::new(
            FailureKind::Status,
            format!("HTTP {status}: {}", text.trim()),
        )));
        return Attempt::Finished;
    }
    let reader = BufReader::new(resp.into_body().into_reader());
    let mut decoder = SseDecoder::new();
    let mut finish: Option<DoneReason> = None;
    let mut forwarded = false;
    let mut lines = reader.lines();
    loop {
        let payload = match lines.next() {
            Some(Ok(line)) => match decoder.push_line(&line) {
                Some(p) => p,
                None => continue,
            },
            Some(Err(e)) => {
                let f = BackendFailure::new(FailureKind::Transport, e.to_string());
                if !forwarded {
                    return Attempt::Retryable(f);
                }
                let _ = tx.send(StreamEvent::Error(f));
                return Attempt::Finished;
            }
            None => match decoder.finish() {
                Some(p) => p,
                None => {
                    let ev = match finish.take() {
                        Some(r) => StreamEvent::Done(r),
                        None => StreamEvent::Error(BackendFailure::new(
                            FailureKind::Transport,
                            "stream closed before completion",
                        )),
                    };
                    let _ = tx.send(ev);
                    return Attempt::Finished;
                }
            },
        };
        let frame = match sse::parse_data(&payload) {
            Ok(f) => f,
            Err(f) => {
                let _ = tx.send(StreamEvent::Error(f));
                return Attempt::Finished;
            }
        };
        match frame {
            Frame::Delta {
                content,
                finish_reason,
            } => {
                if !content.is_empty() {
                    forwarded = true;
                    if tx.send(StreamEvent::TextChunk(content)).is_err() {
                        return Attempt::Finished;
                    }
                }
                if finish_reason.is_some() {
                    finish = finish_reason;
                }
            }
            Frame::Done => {
                let _ = tx.send(StreamEvent::Done(
                    finish.take().unwrap_or(DoneReason::Finished),
                ));
                return Attempt::Finished;
            }
            Frame::Error(msg) => {
                let _ = tx.send(StreamEvent::Error(BackendFailure::new(
                    FailureKind::Status,
                    msg,
                )));
                return Attempt::Finished;
            }
        }
    }
}

//! Server-sent-event frames of a streaming chat-completions endpoint.

use serde_json::{json, Value};

use super::{BackendFailure, DoneReason, FailureKind};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Frame {
    /// Incremental content, possibly with a finish reason.
    Delta {
        content: String,
        finish_reason: Option<DoneReason>,
    },
    /// `data: [DONE]`
    Done,
    /// Error object sent in-band by the server.
    Error(String),
}

pub fn parse_finish_reason(s: &str) -> DoneReason {
    match s {
        "stop" => DoneReason::Stop,
        "length" => DoneReason::Length,
        other => DoneReason::Other(other.to_string()),
    }
}

pub fn finish_reason_str(r: &DoneReason) -> &str {
    match r {
        DoneReason::Stop => "stop",
        DoneReason::Length => "length",
        DoneReason::Finished => "stop",
        DoneReason::Other(s) => s,
    }
}

/// Parses one `data:` payload (without the prefix).
pub fn parse_data(payload: &str) -> Result<Frame, BackendFailure> {
    let payload = payload.trim();
    if payload == "[DONE]" {
        return Ok(Frame::Done);
    }
    let v: Value = serde_json::from_str(payload)
        .map_err(|e| BackendFailure::new(FailureKind::Protocol, format!("malformed frame: {e}")))?;
    if let Some(err) = v.get("error") {
        let msg = err
            .get("message")
            .and_then(Value::as_str)
            .map(str::to_string)
            .unwrap_or_else(|| err.to_string());
        return Ok(Frame::Error(msg));
    }
    let choice = v
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| BackendFailure::new(FailureKind::Protocol, "frame without choices"))?;
    let content = choice
        .get("delta")
        .and_then(|d| d.get("content"))
        .and_then(Value::as_str)
        .or_else(|| choice.get("text").and_then(Value::as_str))
        .unwrap_or("")
        .to_string();
    let finish_reason = choice
        .get("finish_reason")
        .and_then(Value::as_str)
        .map(parse_finish_reason);
    Ok(Frame::Delta {
        content,
        finish_reason,
    })
}

/// Line-oriented SSE decoder. Feed raw lines (without the newline); complete
/// events come back once a blank line or a `data:` line is seen.
#[derive(Debug, Default)]
pub struct SseDecoder {
    data: Vec<String>,
}

impl SseDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns the payload of a completed event, if this line completes one.
    pub fn push_line(&mut self, line: &str) -> Option<String> {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.is_empty() {
            if self.data.is_empty() {
                return None;
            }
            return Some(std::mem::take(&mut self.data).join("\n"));
        }
        if line.starts_with(':') {
            return None;
        }
        let (field, value) = match line.split_once(':') {
            Some((f, v)) => (f, v.strip_prefix(' ').unwrap_or(v)),
            None => (line, ""),
        };
        if field == "data" {
            self.data.push(value.to_string());
        }
        None
    }

    /// Flushes an event left open at end of input.
    pub fn finish(&mut self) -> Option<String> {
        if self.data.is_empty() {
            None
        } else {
            Some(std::mem::take(&mut self.data).join("\n"))
        }
    }
}

pub fn encode_delta(content: &str) -> String {
    let v = json!({
        "object": "chat.completion.chunk",
        "choices": [{"index": 0, "delta": {"content": content}, "finish_reason": null}]
    });
    format!("data: {v}\n\n")
}

pub fn encode_finish(reason: &DoneReason) -> String {
    let v = json!({
        "object": "chat.completion.chunk",
        "choices": [{"index": 0, "delta": {}, "finish_reason": finish_reason_str(reason)}]
    });
    format!("data: {v}\n\n")
}

pub fn encode_error(message: &str) -> String {
    format!("data: {}\n\n", json!({"error": {"message": message}}))
}

pub const DONE_FRAME: &str = "data: [DONE]\n\n";

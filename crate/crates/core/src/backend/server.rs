//! Minimal HTTP/1.1 server that exposes any [`Backend`] as a streaming
//! chat-completions endpoint. Test-only plumbing: one thread per
//! connection, one request per connection.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use serde_json::Value;

use super::sse;
use super::{
    Backend, GenerationRequest, Message, Role, SamplingParams, StreamEvent, DEFAULT_TEMPERATURE,
};

/// Misbehavior injected by the server, for client tests.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum ServerFault {
    #[default]
    None,
    /// Reply with this status and a JSON error body.
    Status(u16),
    /// Send one frame that is not valid JSON after the first chunk.
    MalformedFrame,
    /// Send the first chunk, then go silent for this long.
    StallAfterFirst(Duration),
    /// Close the connection after this many chunks without a terminator.
    DropAfter(usize),
    /// Close the first connection without replying; behave afterwards.
    DropFirstConnection,
}

struct Shared {
    backend: Arc<dyn Backend>,
    fault: Mutex<ServerFault>,
    bodies: Mutex<Vec<Value>>,
    connections: Mutex<usize>,
    stop: AtomicBool,
}

pub struct MockServer {
    addr: SocketAddr,
    shared: Arc<Shared>,
    handle: Option<thread::JoinHandle<()>>,
}

impl MockServer {
    /// Binds an ephemeral port on 127.0.0.1.
    pub fn start(backend: Arc<dyn Backend>) -> std::io::Result<Self> {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let addr = listener.local_addr()?;
        let shared = Arc::new(Shared {
            backend,
            fault: Mutex::new(ServerFault::None),
            bodies: Mutex::new(Vec::new()),
            connections: Mutex::new(0),
            stop: AtomicBool::new(false),
        });
        let s = Arc::clone(&shared);
        let handle = thread::spawn(move || {
            for conn in listener.incoming() {
                if s.stop.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(conn) = conn else { continue };
                let s = Arc::clone(&s);
                thread::spawn(move || {
                    if let Err(e) = serve(conn, &s) {
                        log::debug!("mock server connection ended: {e}");
                    }
                });
            }
        });
        Ok(Self {
            addr,
            shared,
            handle: Some(handle),
        })
    }

    pub fn endpoint(&self) -> String {
        format!("http://{}/v1/chat/completions", self.addr)
    }

    pub fn set_fault(&self, fault: ServerFault) {
        *self.shared.fault.lock().unwrap() = fault;
    }

    /// JSON bodies of all requests received.
    pub fn received(&self) -> Vec<Value> {
        self.shared.bodies.lock().unwrap().clone()
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.shared.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

/// Converts a wire request body back into a [`GenerationRequest`]; a
/// trailing assistant message becomes the committed prefix.
pub fn parse_wire_request(body: &Value) -> Option<GenerationRequest> {
    let mut messages = Vec::new();
    for m in body.get("messages")?.as_array()? {
        let role = Role::parse(m.get("role")?.as_str()?)?;
        let content = m.get("content")?.as_str()?.to_string();
        messages.push(Message { role, content });
    }
    let mut prefix = None;
    if messages.last().map(|m| m.role) == Some(Role::Assistant) {
        prefix = messages.pop().map(|m| m.content);
    }
    let stop_sequences = match body.get("stop") {
        Some(Value::String(s)) => vec![s.clone()],
        Some(Value::Array(a)) => a
            .iter()
            .filter_map(|v| v.as_str().map(String::from))
            .collect(),
        _ => Vec::new(),
    };
    let max_units_hint = body
        .get("max_tokens")
        .and_then(Value::as_u64)
        .map(|t| (t as usize).saturating_sub(64) / 4)
        .unwrap_or(0);
    Some(GenerationRequest {
        messages,
        sampling: SamplingParams {
            temperature: body
                .get("temperature")
                .and_then(Value::as_f64)
                .unwrap_or(DEFAULT_TEMPERATURE),
            max_units_hint,
            stop_sequences,
        },
        stream: true,
        assistant_prefix: prefix,
    })
}

fn read_request(conn: &TcpStream) -> std::io::Result<Vec<u8>> {
    let mut reader = BufReader::new(conn);
    let mut content_length = 0usize;
    let mut line = String::new();
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            break;
        }
        let l = line.trim_end();
        if l.is_empty() {
            break;
        }
        if let Some((k, v)) = l.split_once(':') {
            if k.trim().eq_ignore_ascii_case("content-length") {
                content_length = v.trim().parse().unwrap_or(0);
            }
        }
    }
    let mut body = vec![0u8; content_length];
    reader.read_exact(&mut body)?;
    Ok(body)
}

fn write_chunk(conn: &mut TcpStream, data: &str) -> std::io::Result<()> {
    write!(conn, "{:x}\r\n{}\r\n", data.len(), data)?;
    conn.flush()
}

fn serve(mut conn: TcpStream, shared: &Shared) -> std::io::Result<()> {
    let body = read_request(&conn)?;
    let first = {
        let mut n = shared.connections.lock().unwrap();
        *n += 1;
        *n == 1
    };
    let fault = shared.fault.lock().unwrap().clone();
    if fault == ServerFault::DropFirstConnection && first {
        return Ok(());
    }
    let json: Value = match serde_json::from_slice(&body) {
        Ok(v) => v,
        Err(_) => return respond_status(&mut conn, 400, "invalid JSON"),
    };
    shared.bodies.lock().unwrap().push(json.clone());
    if let ServerFault::Status(code) = fault {
        return respond_status(&mut conn, code, "injected failure");
    }
    let Some(request) = parse_wire_request(&json) else {
        return respond_status(&mut conn, 400, "invalid request");
    };
    conn.write_all(
        b"HTTP/1.1 200 OK\r\nContent-Type: text/event-stream\r\nTransfer-Encoding: chunked\r\nConnection: close\r\n\r\n",
    )?;
    let mut sent = 0usize;
    for ev in shared.backend.generate_stream(&request) {
        match ev {
            StreamEvent::TextChunk(t) => {
                write_chunk(&mut conn, &sse::encode_delta(&t))?;
                sent += 1;
                match &fault {
                    ServerFault::MalformedFrame => {
                        write_chunk(&mut conn, "data: {not json\n\n")?;
                    }
                    ServerFault::StallAfterFirst(d) => thread::sleep(*d),
                    ServerFault::DropAfter(n) if sent >= *n => {
                        return conn.shutdown(std::net::Shutdown::Both);
                    }
                    _ => {}
                }
            }
            StreamEvent::Done(reason) => {
                write_chunk(&mut conn, &sse::encode_finish(&reason))?;
                write_chunk(&mut conn, sse::DONE_FRAME)?;
                break;
            }
            StreamEvent::Error(f) => {
                write_chunk(&mut conn, &sse::encode_error(&f.message))?;
                break;
            }
        }
    }
    conn.write_all(b"0\r\n\r\n")?;
    conn.flush()
}

fn respond_status(conn: &mut TcpStream, code: u16, msg: &str) -> std::io::Result<()> {
    let body = serde_json::json!({"error": {"message": msg}}).to_string();
    write!(
        conn,
        "HTTP/1.1 {code} Error\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    )?;
    conn.flush()
}

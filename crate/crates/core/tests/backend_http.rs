use std::sync::Arc;
use std::time::Duration;

use lengthmark::backend::{
    Backend, DoneReason, FailureKind, GenerationRequest, HttpBackend, HttpConfig, Message,
    MockBackend, MockBehavior, MockServer, SamplingParams, ServerFault, StreamEvent,
};

fn request(hint: usize) -> GenerationRequest {
    GenerationRequest::new(
        vec![
            Message::system("be brief"),
            Message::user("write something"),
        ],
        SamplingParams {
            max_units_hint: hint,
            ..SamplingParams::default()
        },
    )
}

fn server(behavior: MockBehavior) -> MockServer {
    MockServer::start(Arc::new(MockBackend::new(behavior, 11))).unwrap()
}

fn client(server: &MockServer) -> HttpBackend {
    let mut cfg = HttpConfig::new(server.endpoint(), "mock-model");
    cfg.idle_timeout = Duration::from_secs(5);
    HttpBackend::new(cfg)
}

#[test]
fn wire_stream_matches_in_process_text() {
    let srv = server(MockBehavior::Undershoot(2));
    let (text, last) = client(&srv).generate_stream(&request(20)).collect_text();
    let (direct, _) = MockBackend::new(MockBehavior::Undershoot(2), 11)
        .generate_stream(&request(20))
        .collect_text();
    assert_eq!(last, StreamEvent::Done(DoneReason::Stop));
    assert_eq!(text.split_whitespace().count(), 18);
    assert_eq!(text, direct);
    let body = &srv.received()[0];
    assert_eq!(body["model"], "mock-model");
    assert_eq!(body["stream"], true);
    assert_eq!(body["stop"][0], "###end");
    assert_eq!(body["max_tokens"], 4 * 20 + 64);
}

#[test]
fn continuation_sends_committed_prefix_verbatim() {
    let srv = server(MockBehavior::Undershoot(0));
    let committed = "w1 w2 w3 w4 [4 words]";
    let (text, _) = client(&srv)
        .continue_from(&request(8), committed)
        .collect_text();
    assert_eq!(text, " w5 w6 w7 w8 ");
    let body = &srv.received()[0];
    let msgs = body["messages"].as_array().unwrap();
    assert_eq!(msgs.last().unwrap()["role"], "assistant");
    assert_eq!(msgs.last().unwrap()["content"], committed);
}

#[test]
fn cancellation_stops_surfacing_chunks() {
    let srv = server(MockBehavior::Compliant);
    let mut stream = client(&srv).generate_stream(&request(10));
    let first: Vec<_> = stream.by_ref().take(3).collect();
    assert!(first.iter().all(|e| matches!(e, StreamEvent::TextChunk(_))));
    drop(stream);
}

#[test]
fn status_error_is_reported() {
    let srv = server(MockBehavior::Compliant);
    srv.set_fault(ServerFault::Status(503));
    let (_, last) = client(&srv).generate_stream(&request(10)).collect_text();
    match last {
        StreamEvent::Error(f) => {
            assert_eq!(f.kind, FailureKind::Status);
            assert!(f.message.contains("503"));
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn malformed_frame_is_protocol_error() {
    let srv = server(MockBehavior::Compliant);
    srv.set_fault(ServerFault::MalformedFrame);
    let events: Vec<_> = client(&srv).generate_stream(&request(10)).collect();
    assert!(matches!(events[0], StreamEvent::TextChunk(_)));
    match events.last().unwrap() {
        StreamEvent::Error(f) => assert_eq!(f.kind, FailureKind::Protocol),
        other => panic!("{other:?}"),
    }
    assert_eq!(events.iter().filter(|e| e.is_terminal()).count(), 1);
}

#[test]
fn idle_timeout_fires() {
    let srv = server(MockBehavior::Compliant);
    srv.set_fault(ServerFault::StallAfterFirst(Duration::from_secs(3)));
    let mut cfg = HttpConfig::new(srv.endpoint(), "m");
    cfg.idle_timeout = Duration::from_millis(300);
    let events: Vec<_> = HttpBackend::new(cfg)
        .generate_stream(&request(10))
        .collect();
    match events.last().unwrap() {
        StreamEvent::Error(f) => assert_eq!(f.kind, FailureKind::Timeout),
        other => panic!("{other:?}"),
    }
}

#[test]
fn dropped_stream_is_transport_error() {
    let srv = server(MockBehavior::Compliant);
    srv.set_fault(ServerFault::DropAfter(2));
    let (_, last) = client(&srv).generate_stream(&request(10)).collect_text();
    match last {
        StreamEvent::Error(f) => assert_eq!(f.kind, FailureKind::Transport),
        other => panic!("{other:?}"),
    }
}

#[test]
fn transport_failure_is_retried_once() {
    let srv = server(MockBehavior::Undershoot(5));
    srv.set_fault(ServerFault::DropFirstConnection);
    let (text, last) = client(&srv).generate_stream(&request(10)).collect_text();
    assert_eq!(last, StreamEvent::Done(DoneReason::Stop));
    assert_eq!(text.split_whitespace().count(), 5);
}

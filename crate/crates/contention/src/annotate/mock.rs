//! A tiny in-process scorer that speaks the remote toxicity wire format.
//!
//! Tests and offline demos point the client at this instead of the real
//! service. Fixtures map exact text to a score; anything else gets the
//! default score. Failures can be injected per text to exercise the retry
//! and fallback paths.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

#[derive(Debug, Default)]
struct MockState {
    scores: BTreeMap<String, f64>,
    default_score: f64,
    api_key: String,
    /// Remaining injected 500-responses per text.
    failures: BTreeMap<String, u32>,
    request_counts: BTreeMap<String, u32>,
    total_requests: u32,
}

pub struct MockScorer {
    addr: SocketAddr,
    state: Arc<Mutex<MockState>>,
    shutdown: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl MockScorer {
    /// Binds to an ephemeral localhost port and serves until dropped.
    pub fn start(fixtures: BTreeMap<String, f64>, api_key: &str) -> std::io::Result<MockScorer> {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let addr = listener.local_addr()?;
        let state = Arc::new(Mutex::new(MockState {
            scores: fixtures,
            default_score: 0.0,
            api_key: api_key.to_string(),
            ..MockState::default()
        }));
        let shutdown = Arc::new(AtomicBool::new(false));

        let thread_state = Arc::clone(&state);
        let thread_shutdown = Arc::clone(&shutdown);
        let handle = std::thread::spawn(move || {
            for stream in listener.incoming() {
                if thread_shutdown.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = stream else { continue };
                let _ = handle_connection(stream, &thread_state);
            }
        });

        Ok(MockScorer {
            addr,
            state,
            shutdown,
            handle: Some(handle),
        })
    }

    pub fn endpoint(&self) -> String {
        format!("http://{}/v1alpha1/comments:analyze", self.addr)
    }

    /// The next `count` requests for `text` answer HTTP 500.
    pub fn inject_failures(&self, text: &str, count: u32) {
        self.state
            .lock()
            .expect("mock state")
            .failures
            .insert(text.to_string(), count);
    }

    pub fn request_count(&self, text: &str) -> u32 {
        self.state
            .lock()
            .expect("mock state")
            .request_counts
            .get(text)
            .copied()
            .unwrap_or(0)
    }

    pub fn total_requests(&self) -> u32 {
        self.state.lock().expect("mock state").total_requests
    }
}

impl Drop for MockScorer {
    fn drop(&mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        // Nudge the accept loop so it observes the flag.
        let _ = TcpStream::connect(self.addr);
        if let Some(handle) = self.handle.take() {
            let _ = handle.join();
        }
    }
}

fn handle_connection(mut stream: TcpStream, state: &Mutex<MockState>) -> std::io::Result<()> {
    stream.set_read_timeout(Some(std::time::Duration::from_secs(5)))?;
    let request = read_request(&mut stream)?;
    let Some(request) = request else {
        return Ok(());
    };

    let response = {
        let mut state = state.lock().expect("mock state");
        respond(&request, &mut state)
    };
    let (status, reason, body) = response;
    let payload = format!(
        "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\n\
         Content-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    );
    stream.write_all(payload.as_bytes())
}

struct ParsedRequest {
    path_query: String,
    body: String,
}

fn read_request(stream: &mut TcpStream) -> std::io::Result<Option<ParsedRequest>> {
    let mut buf = Vec::new();
    let mut chunk = [0u8; 1024];
    let header_end = loop {
        let n = stream.read(&mut chunk)?;
        if n == 0 {
            // Connection closed before a full request: the shutdown nudge.
            return Ok(None);
        }
        buf.extend_from_slice(&chunk[..n]);
        if let Some(pos) = find_header_end(&buf) {
            break pos;
        }
        if buf.len() > 1 << 20 {
            return Ok(None);
        }
    };

    let header_text = String::from_utf8_lossy(&buf[..header_end]).to_string();
    let mut lines = header_text.lines();
    let request_line = lines.next().unwrap_or_default();
    let path_query = request_line.split_whitespace().nth(1).unwrap_or("/").to_string();
    let content_length: usize = lines
        .filter_map(|line| line.split_once(':'))
        .find(|(name, _)| name.eq_ignore_ascii_case("content-length"))
        .and_then(|(_, value)| value.trim().parse().ok())
        .unwrap_or(0);

    let body_start = header_end + 4;
    while buf.len() < body_start + content_length {
        let n = stream.read(&mut chunk)?;
        if n == 0 {
            break;
        }
        buf.extend_from_slice(&chunk[..n]);
    }
    let body = String::from_utf8_lossy(&buf[body_start..]).to_string();
    Ok(Some(ParsedRequest { path_query, body }))
}

fn find_header_end(buf: &[u8]) -> Option<usize> {
    buf.windows(4).position(|w| w == b"\r\n\r\n")
}

fn respond(request: &ParsedRequest, state: &mut MockState) -> (u16, &'static str, String) {
    let error = |status: u16, reason: &'static str, message: &str| {
        (
            status,
            reason,
            format!(r#"{{"error":{{"code":{status},"message":"{message}"}}}}"#),
        )
    };

    let key = request
        .path_query
        .split_once('?')
        .map(|(_, q)| q)
        .and_then(|query| {
            query
                .split('&')
                .find_map(|pair| pair.strip_prefix("key="))
        })
        .unwrap_or("");
    if key != state.api_key {
        return error(403, "Forbidden", "API key not valid");
    }

    let Ok(body) = serde_json::from_str::<serde_json::Value>(&request.body) else {
        return error(400, "Bad Request", "malformed JSON body");
    };
    let Some(text) = body.pointer("/comment/text").and_then(|v| v.as_str()) else {
        return error(400, "Bad Request", "missing comment.text");
    };

    state.total_requests += 1;
    *state.request_counts.entry(text.to_string()).or_default() += 1;

    if let Some(remaining) = state.failures.get_mut(text) {
        if *remaining > 0 {
            *remaining -= 1;
            return error(500, "Internal Server Error", "injected failure");
        }
    }

    let score = state.scores.get(text).copied().unwrap_or(state.default_score);
    let body = serde_json::json!({
        "attributeScores": {
            "TOXICITY": {
                "summaryScore": {"value": score, "type": "PROBABILITY"}
            }
        },
        "languages": ["en"],
    });
    (200, "OK", body.to_string())
}

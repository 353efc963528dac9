//! Toxicity scoring: a client for a Perspective-style remote scorer, with an
//! offline lexicon mode and per-text fallback when the remote side fails.
//!
//! The client never exceeds max_requests_per_second (token bucket with one
//! slot, so consecutive sends are at least 1/rate apart) and runs at most
//! max_in_flight requests concurrently. Successful remote scores land in an
//! on-disk cache keyed by sha256(text), so reruns never re-bill the API.

use std::collections::{BTreeSet, HashMap};
use std::io::{Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Mutex, RwLock};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::corpus::Conversation;
use crate::lexicon::tokenize;
use crate::sha256_hex;

use super::ToxicityAnnotation;

#[derive(Debug, thiserror::Error)]
pub enum ToxicityError {
    #[error("toxicity client config error: {0}")]
    Config(String),
    /// The service rejected the credentials; retrying cannot help.
    #[error("toxicity service rejected the request: {0}")]
    Auth(String),
    #[error("toxicity cache error on {path}: {source}")]
    Cache {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToxicityMode {
    Remote,
    OfflineLexicon,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToxicityClientConfig {
    pub endpoint_url: String,
    /// Secret; comes from an environment variable, never from config files.
    #[serde(skip)]
    pub api_key: String,
    pub max_requests_per_second: f64,
    pub max_in_flight: usize,
    pub retry_limit: u32,
    pub mode: ToxicityMode,
}

impl Default for ToxicityClientConfig {
    fn default() -> Self {
        ToxicityClientConfig {
            endpoint_url: String::new(),
            api_key: String::new(),
            max_requests_per_second: 1.0,
            max_in_flight: 4,
            retry_limit: 3,
            mode: ToxicityMode::OfflineLexicon,
        }
    }
}

impl ToxicityClientConfig {
    fn validate(&self) -> Result<(), ToxicityError> {
        if self.max_requests_per_second.is_nan() || self.max_requests_per_second <= 0.0 {
            return Err(ToxicityError::Config(
                "max_requests_per_second must be positive".to_string(),
            ));
        }
        if self.max_in_flight == 0 {
            return Err(ToxicityError::Config(
                "max_in_flight must be positive".to_string(),
            ));
        }
        if self.mode == ToxicityMode::Remote {
            if self.api_key.is_empty() {
                return Err(ToxicityError::Config(
                    "remote mode needs an API key (set the key environment variable)".to_string(),
                ));
            }
            parse_http_url(&self.endpoint_url)?;
        }
        Ok(())
    }
}

/// Token count ratio against the toxic lexicon. Empty text scores 0.
pub fn offline_ratio(text: &str, lexicon: &BTreeSet<String>) -> f64 {
    let tokens = tokenize(text).tokens;
    if tokens.is_empty() {
        return 0.0;
    }
    let hits = tokens.iter().filter(|t| lexicon.contains(t.as_str())).count();
    (hits as f64 / tokens.len() as f64).clamp(0.0, 1.0)
}

/// Disk-backed score cache: TSV lines `sha256(text)<TAB>score`. Reads are
/// concurrent; writes serialize on the append lock.
pub struct ScoreCache {
    path: PathBuf,
    map: RwLock<HashMap<String, f64>>,
    append: Mutex<()>,
}

impl ScoreCache {
    pub fn open(path: &Path) -> Result<Self, ToxicityError> {
        let mut map = HashMap::new();
        match std::fs::read_to_string(path) {
            Ok(text) => {
                for line in text.lines() {
                    if let Some((hash, score)) = line.split_once('\t') {
                        if let Ok(score) = score.trim().parse::<f64>() {
                            map.insert(hash.to_string(), score);
                        }
                    }
                }
            }
            Err(err) if err.kind() == std::io::ErrorKind::NotFound => {}
            Err(source) => {
                return Err(ToxicityError::Cache {
                    path: path.display().to_string(),
                    source,
                })
            }
        }
        Ok(ScoreCache {
            path: path.to_path_buf(),
            map: RwLock::new(map),
            append: Mutex::new(()),
        })
    }

    pub fn get(&self, hash: &str) -> Option<f64> {
        self.map.read().expect("cache lock").get(hash).copied()
    }

    pub fn put(&self, hash: &str, score: f64) -> Result<(), ToxicityError> {
        {
            let mut map = self.map.write().expect("cache lock");
            if map.insert(hash.to_string(), score).is_some() {
                return Ok(());
            }
        }
        let _guard = self.append.lock().expect("append lock");
        let mut file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|source| ToxicityError::Cache {
                path: self.path.display().to_string(),
                source,
            })?;
        writeln!(file, "{hash}\t{score}").map_err(|source| ToxicityError::Cache {
            path: self.path.display().to_string(),
            source,
        })
    }

    pub fn len(&self) -> usize {
        self.map.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One granted send slot every 1/rate seconds, shared across workers.
struct RateLimiter {
    interval: Duration,
    next_free: Mutex<Instant>,
}

impl RateLimiter {
    fn new(rate: f64) -> Self {
        RateLimiter {
            interval: Duration::from_secs_f64(1.0 / rate),
            next_free: Mutex::new(Instant::now()),
        }
    }

    /// Blocks until the caller's slot arrives and returns the slot time.
    fn acquire(&self) -> Instant {
        let (grant, wait) = {
            let mut next = self.next_free.lock().expect("rate lock");
            let now = Instant::now();
            let grant = if now >= *next { now } else { *next };
            *next = grant + self.interval;
            (grant, grant.saturating_duration_since(now))
        };
        if !wait.is_zero() {
            std::thread::sleep(wait);
        }
        grant
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TextScore {
    pub score: f64,
    /// True when the remote scorer failed and the offline lexicon filled in.
    pub fallback: bool,
}

pub struct ToxicityScorer {
    config: ToxicityClientConfig,
    lexicon: BTreeSet<String>,
    cache: Option<ScoreCache>,
    limiter: RateLimiter,
    sends: Mutex<Vec<Instant>>,
    started: Instant,
}

impl ToxicityScorer {
    pub fn new(
        config: ToxicityClientConfig,
        lexicon: BTreeSet<String>,
        cache: Option<ScoreCache>,
    ) -> Result<Self, ToxicityError> {
        config.validate()?;
        let limiter = RateLimiter::new(config.max_requests_per_second);
        Ok(ToxicityScorer {
            config,
            lexicon,
            cache,
            limiter,
            sends: Mutex::new(Vec::new()),
            started: Instant::now(),
        })
    }

    pub fn bundled_lexicon() -> BTreeSet<String> {
        include_str!("../../data/toxic.tsv")
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(str::to_string)
            .collect()
    }

    /// Send times of every remote request this scorer issued, as offsets
    /// from scorer construction. Lets callers audit the rate limit.
    pub fn send_trace(&self) -> Vec<Duration> {
        self.sends
            .lock()
            .expect("trace lock")
            .iter()
            .map(|t| t.duration_since(self.started))
            .collect()
    }

    pub fn score_conversation(
        &self,
        conversation: &Conversation,
    ) -> Result<ToxicityAnnotation, ToxicityError> {
        let mut texts: Vec<&str> = vec![&conversation.title, &conversation.selftext];
        texts.extend(conversation.comments.iter().map(|c| c.body.as_str()));
        let scores = self.score_texts(&texts)?;
        let (head, comments) = scores.split_at(2);
        Ok(ToxicityAnnotation {
            title: head[0].score,
            selftext: head[1].score,
            comments: comments.iter().map(|s| s.score).collect(),
            title_fallback: head[0].fallback,
            selftext_fallback: head[1].fallback,
            comment_fallbacks: comments.iter().map(|s| s.fallback).collect(),
        })
    }

    /// Scores texts in input order. Remote mode fans out over up to
    /// max_in_flight workers; assembly is by index, so concurrency never
    /// changes the output.
    pub fn score_texts(&self, texts: &[&str]) -> Result<Vec<TextScore>, ToxicityError> {
        match self.config.mode {
            ToxicityMode::OfflineLexicon => Ok(texts
                .iter()
                .map(|t| TextScore {
                    score: offline_ratio(t, &self.lexicon),
                    fallback: false,
                })
                .collect()),
            ToxicityMode::Remote => self.score_remote(texts),
        }
    }

    fn score_remote(&self, texts: &[&str]) -> Result<Vec<TextScore>, ToxicityError> {
        let results: Vec<Mutex<Option<TextScore>>> =
            texts.iter().map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        let fatal: Mutex<Option<ToxicityError>> = Mutex::new(None);
        let abort = AtomicBool::new(false);
        let workers = self.config.max_in_flight.min(texts.len().max(1));

        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    if abort.load(Ordering::SeqCst) {
                        return;
                    }
                    let idx = next.fetch_add(1, Ordering::SeqCst);
                    if idx >= texts.len() {
                        return;
                    }
                    match self.score_one_remote(texts[idx]) {
                        Ok(score) => *results[idx].lock().expect("result lock") = Some(score),
                        Err(err) => {
                            abort.store(true, Ordering::SeqCst);
                            let mut slot = fatal.lock().expect("fatal lock");
                            if slot.is_none() {
                                *slot = Some(err);
                            }
                            return;
                        }
                    }
                });
            }
        });

        if let Some(err) = fatal.into_inner().expect("fatal lock") {
            return Err(err);
        }
        Ok(results
            .into_iter()
            .map(|slot| slot.into_inner().expect("result lock").expect("all scored"))
            .collect())
    }

    /// Cache, then remote with retries, then flagged offline fallback.
    /// Only an invalid API key aborts the run.
    fn score_one_remote(&self, text: &str) -> Result<TextScore, ToxicityError> {
        if text.trim().is_empty() {
            return Ok(TextScore {
                score: 0.0,
                fallback: false,
            });
        }
        let hash = sha256_hex(text.as_bytes());
        if let Some(cache) = &self.cache {
            if let Some(score) = cache.get(&hash) {
                return Ok(TextScore {
                    score,
                    fallback: false,
                });
            }
        }

        let mut last_failure = String::new();
        for _attempt in 0..=self.config.retry_limit {
            let sent_at = self.limiter.acquire();
            self.sends.lock().expect("trace lock").push(sent_at);
            match self.request_score(text) {
                Ok(score) => {
                    if let Some(cache) = &self.cache {
                        cache.put(&hash, score)?;
                    }
                    return Ok(TextScore {
                        score,
                        fallback: false,
                    });
                }
                Err(RequestFailure::InvalidKey(detail)) => {
                    return Err(ToxicityError::Auth(format!(
                        "API key rejected ({detail}); check the key environment variable"
                    )));
                }
                Err(RequestFailure::Retryable(detail)) => last_failure = detail,
            }
        }
        eprintln!(
            "warning: toxicity request failed after {} retries ({last_failure}); \
             using offline lexicon for this text",
            self.config.retry_limit
        );
        Ok(TextScore {
            score: offline_ratio(text, &self.lexicon),
            fallback: true,
        })
    }

    fn request_score(&self, text: &str) -> Result<f64, RequestFailure> {
        let (addr, host, path) =
            parse_http_url(&self.config.endpoint_url).map_err(|e| match e {
                ToxicityError::Config(detail) => RequestFailure::Retryable(detail),
                other => RequestFailure::Retryable(other.to_string()),
            })?;
        let body = serde_json::json!({
            "comment": {"text": text},
            "requestedAttributes": {"TOXICITY": {}},
        })
        .to_string();
        let path_query = format!("{path}?key={}", percent_encode(&self.config.api_key));
        let (status, response_body) = post_json(&addr, &host, &path_query, &body)
            .map_err(|e| RequestFailure::Retryable(format!("transport: {e}")))?;
        match status {
            200..=299 => parse_summary_score(&response_body)
                .ok_or_else(|| RequestFailure::Retryable("malformed scorer response".to_string())),
            401 | 403 => Err(RequestFailure::InvalidKey(format!("HTTP {status}"))),
            other => Err(RequestFailure::Retryable(format!("HTTP {other}"))),
        }
    }
}

enum RequestFailure {
    InvalidKey(String),
    Retryable(String),
}

fn parse_summary_score(body: &str) -> Option<f64> {
    let value: serde_json::Value = serde_json::from_str(body).ok()?;
    value
        .pointer("/attributeScores/TOXICITY/summaryScore/value")?
        .as_f64()
        .filter(|v| v.is_finite())
}

/// Splits `http://host:port/path` into (socket address, host header, path).
fn parse_http_url(url: &str) -> Result<(String, String, String), ToxicityError> {
    let rest = url.strip_prefix("http://").ok_or_else(|| {
        ToxicityError::Config(format!(
            "endpoint {url:?} must be http:// (point remote mode at a local scorer or proxy)"
        ))
    })?;
    let (host, path) = match rest.find('/') {
        Some(slash) => (&rest[..slash], &rest[slash..]),
        None => (rest, "/"),
    };
    if host.is_empty() {
        return Err(ToxicityError::Config(format!("endpoint {url:?} has no host")));
    }
    let addr = if host.contains(':') {
        host.to_string()
    } else {
        format!("{host}:80")
    };
    Ok((addr, host.to_string(), path.to_string()))
}

fn percent_encode(raw: &str) -> String {
    let mut out = String::with_capacity(raw.len());
    for byte in raw.bytes() {
        match byte {
            b'A'..=b'Z' | b'a'..=b'z' | b'0'..=b'9' | b'-' | b'_' | b'.' | b'~' => {
                out.push(byte as char)
            }
            other => out.push_str(&format!("%{other:02X}")),
        }
    }
    out
}

/// Minimal HTTP/1.1 POST. The server is expected to close the connection
/// after responding (both the mock and Connection: close honor this).
fn post_json(
    addr: &str,
    host: &str,
    path_query: &str,
    body: &str,
) -> std::io::Result<(u16, String)> {
    let socket_addr = addr
        .to_socket_addrs()?
        .next()
        .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::NotFound, "no address"))?;
    let mut stream = TcpStream::connect_timeout(&socket_addr, Duration::from_secs(10))?;
    stream.set_read_timeout(Some(Duration::from_secs(30)))?;
    stream.set_write_timeout(Some(Duration::from_secs(30)))?;
    let request = format!(
        "POST {path_query} HTTP/1.1\r\nHost: {host}\r\nContent-Type: application/json\r\n\
         Content-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    );
    stream.write_all(request.as_bytes())?;
    let mut raw = Vec::new();
    stream.read_to_end(&mut raw)?;
    let text = String::from_utf8_lossy(&raw);
    let status = text
        .lines()
        .next()
        .and_then(|line| line.split_whitespace().nth(1))
        .and_then(|code| code.parse::<u16>().ok())
        .ok_or_else(|| {
            std::io::Error::new(std::io::ErrorKind::InvalidData, "bad status line")
        })?;
    let body = match text.find("\r\n\r\n") {
        Some(pos) => text[pos + 4..].to_string(),
        None => String::new(),
    };
    Ok((status, body))
}

/// Scores every conversation. The annotate stage entry point.
pub fn score_texts(
    conversations: &[Conversation],
    scorer: &ToxicityScorer,
) -> Result<Vec<ToxicityAnnotation>, ToxicityError> {
    conversations
        .iter()
        .map(|c| scorer.score_conversation(c))
        .collect()
}

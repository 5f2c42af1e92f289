use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use super::{ScoreResult, Scorer, ScorerConfig, Throttle};
use crate::error::{Result, ScoreError};

#[derive(Serialize)]
struct Request<'a> {
    text: &'a str,
}

#[derive(Deserialize)]
struct Reply {
    score: f64,
}

enum Failure {
    Retryable(String),
    Permanent(ScoreError),
}

/// HTTP client for any service speaking `POST {"text": ...}` ->
/// `{"score": ...}` with bearer-token auth.
pub struct RemoteScorer {
    config: ScorerConfig,
    agent: ureq::Agent,
    throttle: Throttle,
    id: String,
}

impl RemoteScorer {
    pub fn new(config: ScorerConfig) -> Result<Self> {
        config.validate()?;
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build();
        let throttle = Throttle::new(config.max_in_flight, config.requests_per_second);
        let id = format!("remote:{}", config.endpoint);
        Ok(RemoteScorer {
            config,
            agent,
            throttle,
            id,
        })
    }

    pub fn throttle(&self) -> &Throttle {
        &self.throttle
    }

    fn attempt(&self, text: &str) -> std::result::Result<f64, Failure> {
        let _permit = self.throttle.acquire();
        let mut req = self.agent.post(&self.config.endpoint);
        if let Some(token) = &self.config.auth_token {
            req = req.set("Authorization", &format!("Bearer {token}"));
        }
        match req.send_json(Request { text }) {
            Ok(resp) => {
                let body = resp
                    .into_string()
                    .map_err(|e| Failure::Retryable(format!("reading response: {e}")))?;
                let reply: Reply = serde_json::from_str(&body).map_err(|e| {
                    Failure::Permanent(ScoreError::Protocol(format!("bad response body `{body}`: {e}")))
                })?;
                if !(0.0..=1.0).contains(&reply.score) {
                    return Err(Failure::Permanent(ScoreError::Protocol(format!(
                        "score {} outside [0, 1]",
                        reply.score
                    ))));
                }
                Ok(reply.score)
            }
            Err(ureq::Error::Status(status, resp)) => {
                let body = resp.into_string().unwrap_or_default();
                if status == 429 || status >= 500 {
                    Err(Failure::Retryable(format!("HTTP {status}: {body}")))
                } else {
                    Err(Failure::Permanent(ScoreError::Rejected { status, body }))
                }
            }
            Err(ureq::Error::Transport(t)) => Err(Failure::Retryable(t.to_string())),
        }
    }
}

impl Scorer for RemoteScorer {
    fn id(&self) -> &str {
        &self.id
    }

    fn score(&self, text: &str) -> ScoreResult {
        if text.trim().is_empty() {
            return Err(ScoreError::EmptyText);
        }
        let attempts = self.config.retries + 1;
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                let delay = self.config.backoff_ms.saturating_mul(1 << (attempt - 1).min(16));
                debug!("retrying in {delay} ms after: {last}");
                thread::sleep(Duration::from_millis(delay));
            }
            match self.attempt(text) {
                Ok(s) => return Ok(s),
                Err(Failure::Permanent(e)) => return Err(e),
                Err(Failure::Retryable(msg)) => {
                    warn!("scorer request failed (attempt {}/{attempts}): {msg}", attempt + 1);
                    last = msg;
                }
            }
        }
        Err(ScoreError::Transport {
            attempts,
            message: last,
        })
    }

    fn score_batch(&self, texts: &[String]) -> Vec<ScoreResult> {
        let slots: Vec<Mutex<Option<ScoreResult>>> = texts.iter().map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        let workers = self.config.max_in_flight.min(texts.len());
        thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= texts.len() {
                        break;
                    }
                    let r = self.score(&texts[i]);
                    *slots[i].lock().expect("slot poisoned") = Some(r);
                });
            }
        });
        slots
            .into_iter()
            .map(|m| m.into_inner().expect("slot poisoned").expect("every text is scored"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::Arc;
    use std::time::Instant;

    type Handler = dyn Fn(usize, &str, Option<&str>) -> (u16, String) + Send + Sync;

    /// Minimal HTTP/1.1 server: one request per connection.
    fn serve(handler: Arc<Handler>) -> (String, Arc<AtomicUsize>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let hits = Arc::new(AtomicUsize::new(0));
        let counter = hits.clone();
        thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { break };
                let handler = handler.clone();
                let n = counter.fetch_add(1, Ordering::SeqCst);
                thread::spawn(move || {
                    let mut reader = BufReader::new(stream.try_clone().unwrap());
                    let mut len = 0usize;
                    let mut auth = None;
                    loop {
                        let mut line = String::new();
                        if reader.read_line(&mut line).unwrap_or(0) == 0 {
                            return;
                        }
                        let line = line.trim_end();
                        if line.is_empty() {
                            break;
                        }
                        let lower = line.to_ascii_lowercase();
                        if let Some(v) = lower.strip_prefix("content-length:") {
                            len = v.trim().parse().unwrap();
                        }
                        if lower.starts_with("authorization:") {
                            auth = Some(line["authorization:".len()..].trim().to_owned());
                        }
                    }
                    let mut body = vec![0; len];
                    reader.read_exact(&mut body).unwrap();
                    let (status, reply) = handler(n, &String::from_utf8(body).unwrap(), auth.as_deref());
                    let resp = format!(
                        "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
                        reply.len()
                    );
                    let _ = stream.write_all(resp.as_bytes());
                });
            }
        });
        (format!("http://{addr}/score"), hits)
    }

    fn config(endpoint: String) -> ScorerConfig {
        ScorerConfig {
            endpoint,
            auth_token: Some("secret".into()),
            max_in_flight: 4,
            requests_per_second: 1000.0,
            timeout_ms: 5000,
            retries: 2,
            backoff_ms: 5,
        }
    }

    fn echo_len() -> Arc<Handler> {
        Arc::new(|_, body, auth| {
            assert_eq!(auth, Some("Bearer secret"));
            let v: serde_json::Value = serde_json::from_str(body).unwrap();
            let len = v["text"].as_str().unwrap().len();
            (200, format!("{{\"score\": {}}}", (len % 100) as f64 / 100.0))
        })
    }

    #[test]
    fn wire_format_and_auth() {
        let (url, _) = serve(echo_len());
        let s = RemoteScorer::new(config(url)).unwrap();
        assert_eq!(s.score("abcde").unwrap(), 0.05);
    }

    #[test]
    fn transient_failures_are_retried() {
        let (url, hits) = serve(Arc::new(|n, _, _| {
            if n < 2 {
                (503, "busy".into())
            } else {
                (200, "{\"score\": 0.5}".into())
            }
        }));
        let s = RemoteScorer::new(config(url)).unwrap();
        assert_eq!(s.score("x").unwrap(), 0.5);
        assert_eq!(hits.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn retries_are_bounded() {
        let (url, hits) = serve(Arc::new(|_, _, _| (500, "down".into())));
        let s = RemoteScorer::new(config(url)).unwrap();
        match s.score("x") {
            Err(ScoreError::Transport { attempts, message }) => {
                assert_eq!(attempts, 3);
                assert!(message.contains("down"));
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(hits.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn client_errors_are_permanent_with_body() {
        let (url, hits) = serve(Arc::new(|_, _, _| (403, "bad token".into())));
        let s = RemoteScorer::new(config(url)).unwrap();
        assert_eq!(
            s.score("x"),
            Err(ScoreError::Rejected {
                status: 403,
                body: "bad token".into()
            })
        );
        assert_eq!(hits.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn out_of_range_score_is_a_protocol_error() {
        let (url, _) = serve(Arc::new(|_, _, _| (200, "{\"score\": 1.5}".into())));
        let s = RemoteScorer::new(config(url)).unwrap();
        assert!(matches!(s.score("x"), Err(ScoreError::Protocol(_))));
    }

    #[test]
    fn batch_preserves_order_and_respects_rate() {
        let (url, _) = serve(echo_len());
        let mut cfg = config(url);
        cfg.requests_per_second = 200.0;
        let s = RemoteScorer::new(cfg).unwrap();
        let texts: Vec<String> = (0..100).map(|i| "x".repeat(i + 1)).collect();
        let start = Instant::now();
        let out = s.score_batch(&texts);
        let elapsed = start.elapsed().as_secs_f64();
        for (i, r) in out.iter().enumerate() {
            assert_eq!(r.as_ref().unwrap(), &(((i + 1) % 100) as f64 / 100.0));
        }
        let rate = 99.0 / elapsed;
        assert!(rate <= 200.0, "measured {rate:.1} req/s");
        assert!(s.score_batch(&[]).is_empty());
    }

    #[test]
    fn batch_reports_errors_positionally() {
        let (url, _) = serve(echo_len());
        let s = RemoteScorer::new(config(url)).unwrap();
        let out = s.score_batch(&["a".into(), "".into(), "abc".into()]);
        assert!(out[0].is_ok());
        assert_eq!(out[1], Err(ScoreError::EmptyText));
        assert_eq!(out[2], Ok(0.03));
    }

    #[test]
    fn unreachable_endpoint_is_a_transport_error() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        drop(listener);
        let mut cfg = config(format!("http://{addr}/score"));
        cfg.retries = 1;
        let s = RemoteScorer::new(cfg).unwrap();
        assert!(matches!(s.score("x"), Err(ScoreError::Transport { attempts: 2, .. })));
    }
}

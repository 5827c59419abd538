//! Client for servers speaking the OpenAI-compatible completion protocol.

use std::collections::VecDeque;
use std::ops::Range;
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{Backend, BackendDescriptor, Capability, FinishReason, Generation, Protocol, SamplingParams, TokenLogprob};
use crate::error::{Error, Result};
use crate::textops::BudgetProxy;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    /// Total attempts, including the first.
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            base_delay_ms: 500,
            max_delay_ms: 30_000,
        }
    }
}

impl RetryPolicy {
    /// Full-jitter exponential backoff before attempt `attempt + 1`.
    fn delay(&self, attempt: u32) -> Duration {
        let cap = self
            .base_delay_ms
            .saturating_mul(1u64 << attempt.min(20))
            .min(self.max_delay_ms);
        Duration::from_millis(rand::rng().random_range(cap / 2..=cap.max(1)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteConfig {
    pub descriptor: BackendDescriptor,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default)]
    pub requests_per_minute: Option<u32>,
    #[serde(default)]
    pub tokens_per_minute: Option<u64>,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_in_flight() -> usize {
    8
}

fn default_timeout() -> u64 {
    120
}

impl RemoteConfig {
    pub fn new(descriptor: BackendDescriptor) -> Self {
        Self {
            descriptor,
            max_in_flight: default_in_flight(),
            requests_per_minute: None,
            tokens_per_minute: None,
            retry: RetryPolicy::default(),
            timeout_secs: default_timeout(),
        }
    }
}

/// Sliding one-minute window over request and token spend.
struct RateWindow {
    requests_per_minute: Option<u32>,
    tokens_per_minute: Option<u64>,
    sent: Mutex<VecDeque<(Instant, u64)>>,
}

impl RateWindow {
    fn acquire(&self, tokens: u64) {
        if self.requests_per_minute.is_none() && self.tokens_per_minute.is_none() {
            return;
        }
        let window = Duration::from_secs(60);
        loop {
            let wait = {
                let mut sent = self.sent.lock().unwrap();
                let now = Instant::now();
                while sent.front().is_some_and(|(t, _)| now.duration_since(*t) >= window) {
                    sent.pop_front();
                }
                let req_ok = self.requests_per_minute.is_none_or(|r| sent.len() < r as usize);
                let used: u64 = sent.iter().map(|(_, t)| t).sum();
                // a single oversized request is let through on an empty window
                let tok_ok = self.tokens_per_minute.is_none_or(|t| sent.is_empty() || used + tokens <= t);
                if req_ok && tok_ok {
                    sent.push_back((now, tokens));
                    return;
                }
                window - now.duration_since(sent.front().unwrap().0)
            };
            std::thread::sleep(wait.min(Duration::from_millis(250)));
        }
    }
}

struct InFlight {
    limit: usize,
    count: Mutex<usize>,
    freed: Condvar,
}

struct InFlightGuard<'a>(&'a InFlight);

impl InFlight {
    fn enter(&self) -> InFlightGuard<'_> {
        let mut n = self.count.lock().unwrap();
        while *n >= self.limit {
            n = self.freed.wait(n).unwrap();
        }
        *n += 1;
        InFlightGuard(self)
    }
}

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        *self.0.count.lock().unwrap() -= 1;
        self.0.freed.notify_one();
    }
}

pub struct RemoteBackend {
    config: RemoteConfig,
    agent: ureq::Agent,
    api_key: Option<String>,
    rate: RateWindow,
    in_flight: InFlight,
}

enum Attempt {
    Done(Value),
    Retry(Option<u16>, String, Option<Duration>),
}

impl RemoteBackend {
    /// Reads the API key from the environment variable named in the
    /// descriptor, if any.
    pub fn new(config: RemoteConfig) -> Result<Self> {
        let api_key = match &config.descriptor.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                Error::InvalidArgument(format!("environment variable {var} (API key) is not set"))
            })?),
            None => None,
        };
        if config.descriptor.endpoint.is_empty() {
            return Err(Error::InvalidArgument("remote backend needs an endpoint".into()));
        }
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self {
            rate: RateWindow {
                requests_per_minute: config.requests_per_minute,
                tokens_per_minute: config.tokens_per_minute,
                sent: Mutex::new(VecDeque::new()),
            },
            in_flight: InFlight {
                limit: config.max_in_flight.max(1),
                count: Mutex::new(0),
                freed: Condvar::new(),
            },
            config,
            agent,
            api_key,
        })
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{path}", self.config.descriptor.endpoint.trim_end_matches('/'))
    }

    fn attempt(&self, url: &str, body: &Value) -> Result<Attempt> {
        let mut req = self.agent.post(url).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = match req.send(serde_json::to_vec(body)?) {
            Ok(r) => r,
            Err(e) => return Ok(Attempt::Retry(None, e.to_string(), None)),
        };
        let status = resp.status().as_u16();
        let retry_after = resp
            .headers()
            .get("retry-after")
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.trim().parse::<u64>().ok())
            .map(Duration::from_secs);
        let text = match resp.body_mut().read_to_string() {
            Ok(t) => t,
            Err(e) => return Ok(Attempt::Retry(Some(status), e.to_string(), None)),
        };
        match status {
            200..=299 => Ok(Attempt::Done(serde_json::from_str(&text).map_err(|e| {
                Error::Backend(format!("unparseable response from {url}: {e}"))
            })?)),
            401 | 403 => Err(Error::Auth { status, body: text }),
            429 | 500..=599 => Ok(Attempt::Retry(Some(status), text, retry_after)),
            _ => {
                let lower = text.to_ascii_lowercase();
                if lower.contains("context length") || lower.contains("context_length") || lower.contains("too long") {
                    Err(Error::PromptTooLong(text))
                } else {
                    Err(Error::Backend(format!("HTTP {status} from {url}: {text}")))
                }
            }
        }
    }

    fn post(&self, path: &str, body: &Value, token_estimate: u64) -> Result<Value> {
        let url = self.url(path);
        let policy = self.config.retry;
        let mut last = (None, String::new());
        for attempt in 0..policy.max_attempts.max(1) {
            if attempt > 0 {
                log::debug!("retrying {url} (attempt {})", attempt + 1);
            }
            self.rate.acquire(token_estimate);
            let outcome = {
                let _slot = self.in_flight.enter();
                self.attempt(&url, body)?
            };
            match outcome {
                Attempt::Done(v) => return Ok(v),
                Attempt::Retry(status, message, retry_after) => {
                    log::warn!("{url}: attempt {} failed ({status:?}): {message}", attempt + 1);
                    last = (status, message);
                    if attempt + 1 < policy.max_attempts {
                        std::thread::sleep(retry_after.unwrap_or_else(|| policy.delay(attempt)));
                    }
                }
            }
        }
        Err(Error::RetriesExhausted {
            attempts: policy.max_attempts.max(1),
            last_status: last.0,
            message: last.1,
        })
    }
}

fn parse_choices(v: &Value, chat: bool) -> Result<Vec<(usize, Generation)>> {
    let choices = v
        .get("choices")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::Backend("response has no choices array".into()))?;
    choices
        .iter()
        .enumerate()
        .map(|(pos, c)| {
            let index = c.get("index").and_then(Value::as_u64).map_or(pos, |i| i as usize);
            let text = if chat {
                c.pointer("/message/content").and_then(Value::as_str)
            } else {
                c.get("text").and_then(Value::as_str)
            }
            .ok_or_else(|| Error::Backend("choice has no text".into()))?
            .to_owned();
            let token_logprobs = if chat { None } else { completion_logprobs(c) };
            Ok((
                index,
                Generation {
                    text,
                    token_logprobs,
                    finish_reason: FinishReason::parse(c.get("finish_reason").and_then(Value::as_str)),
                },
            ))
        })
        .collect()
}

/// Legacy completion logprobs: parallel `tokens` / `token_logprobs` arrays.
/// Entries without a value (the first echoed token) are dropped.
fn completion_logprobs(choice: &Value) -> Option<Vec<TokenLogprob>> {
    let lp = choice.get("logprobs")?;
    let tokens = lp.get("tokens")?.as_array()?;
    let values = lp.get("token_logprobs")?.as_array()?;
    Some(
        tokens
            .iter()
            .zip(values)
            .filter_map(|(t, v)| Some((t.as_str()?.to_owned(), v.as_f64()?)))
            .collect(),
    )
}

impl Backend for RemoteBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.config.descriptor
    }

    fn sample(&self, prompt: &str, params: &SamplingParams, indices: Range<usize>) -> Result<Vec<Generation>> {
        params.validate()?;
        let n = indices.len();
        if n == 0 {
            return Ok(Vec::new());
        }
        let d = &self.config.descriptor;
        let chat = d.protocol == Protocol::Chat;
        d.require(if chat { Capability::Chat } else { Capability::TextCompletion })?;
        let mut body = if chat {
            json!({
                "model": d.model_id,
                "messages": [{"role": "user", "content": prompt}],
                "temperature": params.temperature,
                "top_p": params.top_p,
                "max_tokens": params.max_tokens,
                "n": n,
            })
        } else {
            json!({
                "model": d.model_id,
                "prompt": prompt,
                "temperature": params.temperature,
                "top_p": params.top_p,
                "max_tokens": params.max_tokens,
                "n": n,
            })
        };
        if let Some(seed) = params.seed {
            body["seed"] = json!(seed.wrapping_add(indices.start as u64));
        }
        let estimate = (BudgetProxy::default().count(prompt) + params.max_tokens * n) as u64;
        let resp = self.post(if chat { "chat/completions" } else { "completions" }, &body, estimate)?;
        let mut choices = parse_choices(&resp, chat)?;
        if choices.len() < n {
            return Err(Error::Backend(format!("asked for {n} choices, got {}", choices.len())));
        }
        choices.sort_by_key(|(i, _)| *i);
        Ok(choices.into_iter().take(n).map(|(_, g)| g).collect())
    }

    fn score_logprobs(&self, text: &str) -> Result<Vec<TokenLogprob>> {
        let d = &self.config.descriptor;
        d.require(Capability::Logprobs)?;
        if text.is_empty() {
            return Ok(Vec::new());
        }
        let body = json!({
            "model": d.model_id,
            "prompt": text,
            "max_tokens": 0,
            "echo": true,
            "logprobs": 0,
            "temperature": 1.0,
        });
        let resp = self.post("completions", &body, BudgetProxy::default().count(text) as u64)?;
        let choice = resp
            .pointer("/choices/0")
            .ok_or_else(|| Error::Backend("logprob response has no choices".into()))?;
        completion_logprobs(choice).ok_or_else(|| Error::Backend("response carries no token logprobs".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    /// Serves the canned `(status, body)` responses in order, one per request.
    fn canned(responses: Vec<(u16, String)>) -> (String, Arc<AtomicUsize>, Arc<Mutex<Vec<Value>>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let hits = Arc::new(AtomicUsize::new(0));
        let bodies = Arc::new(Mutex::new(Vec::new()));
        let (h, b) = (hits.clone(), bodies.clone());
        std::thread::spawn(move || {
            for (stream, (status, body)) in listener.incoming().zip(responses) {
                let mut stream = stream.unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                }
                let mut buf = vec![0; len];
                reader.read_exact(&mut buf).unwrap();
                b.lock().unwrap().push(serde_json::from_slice(&buf).unwrap());
                h.fetch_add(1, Ordering::SeqCst);
                write!(
                    stream,
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
            }
        });
        (format!("http://{addr}/v1"), hits, bodies)
    }

    fn backend(endpoint: String, protocol: Protocol, caps: &[Capability]) -> RemoteBackend {
        let mut cfg = RemoteConfig::new(BackendDescriptor {
            model_id: "test-model".into(),
            capabilities: caps.iter().copied().collect::<BTreeSet<_>>(),
            endpoint,
            protocol,
            api_key_env: None,
        });
        cfg.retry = RetryPolicy {
            max_attempts: 3,
            base_delay_ms: 1,
            max_delay_ms: 2,
        };
        RemoteBackend::new(cfg).unwrap()
    }

    fn params(n: usize) -> SamplingParams {
        SamplingParams {
            n_samples: n,
            max_tokens: 5,
            ..Default::default()
        }
    }

    const OK: &str = r#"{"choices":[{"index":1,"text":"two","finish_reason":"length"},{"index":0,"text":"one","finish_reason":"stop"}]}"#;

    #[test]
    fn completion_request_shape() {
        let (url, _, bodies) = canned(vec![(200, OK.into())]);
        let b = backend(url, Protocol::Completion, &[Capability::TextCompletion]);
        let gens = b.complete("hi", &params(2)).unwrap();
        assert_eq!(gens[0].text, "one");
        assert_eq!(gens[1].finish_reason, FinishReason::Length);
        let body = &bodies.lock().unwrap()[0];
        assert_eq!(body["prompt"], "hi");
        assert_eq!(body["n"], 2);
        assert_eq!(body["top_p"], 0.95);
        assert_eq!(body["max_tokens"], 5);
    }

    #[test]
    fn chat_request_shape() {
        let resp = r#"{"choices":[{"index":0,"message":{"role":"assistant","content":"yo"},"finish_reason":"stop"}]}"#;
        let (url, _, bodies) = canned(vec![(200, resp.into())]);
        let b = backend(url, Protocol::Chat, &[Capability::Chat]);
        assert_eq!(b.complete("hi", &params(1)).unwrap()[0].text, "yo");
        let body = &bodies.lock().unwrap()[0];
        assert_eq!(body["messages"][0]["role"], "user");
        assert_eq!(body["messages"][0]["content"], "hi");
    }

    #[test]
    fn retries_on_429_and_5xx() {
        let (url, hits, _) = canned(vec![(429, "{}".into()), (503, "{}".into()), (200, OK.into())]);
        let b = backend(url, Protocol::Completion, &[Capability::TextCompletion]);
        assert_eq!(b.complete("hi", &params(2)).unwrap().len(), 2);
        assert_eq!(hits.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn gives_up_after_max_attempts() {
        let (url, hits, _) = canned(vec![(500, "a".into()), (500, "b".into()), (500, "c".into()), (200, OK.into())]);
        let b = backend(url, Protocol::Completion, &[Capability::TextCompletion]);
        match b.complete("hi", &params(2)) {
            Err(Error::RetriesExhausted {
                attempts: 3,
                last_status: Some(500),
                ..
            }) => {}
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(hits.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn auth_failure_is_not_retried() {
        let (url, hits, _) = canned(vec![(401, "nope".into()), (200, OK.into())]);
        let b = backend(url, Protocol::Completion, &[Capability::TextCompletion]);
        assert!(matches!(b.complete("hi", &params(2)), Err(Error::Auth { status: 401, .. })));
        assert_eq!(hits.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn context_overflow_maps_to_prompt_too_long() {
        let body = r#"{"error":{"message":"This model's maximum context length is 4097 tokens"}}"#;
        let (url, _, _) = canned(vec![(400, body.into())]);
        let b = backend(url, Protocol::Completion, &[Capability::TextCompletion]);
        assert!(matches!(b.complete("hi", &params(1)), Err(Error::PromptTooLong(_))));
    }

    #[test]
    fn logprobs_need_capability() {
        let b = backend("http://127.0.0.1:9".into(), Protocol::Completion, &[Capability::TextCompletion]);
        assert!(matches!(b.score_logprobs("a b"), Err(Error::Capability { .. })));
    }

    #[test]
    fn echo_logprobs_parse() {
        let resp = r#"{"choices":[{"index":0,"text":"a b","logprobs":{"tokens":["a"," b"],"token_logprobs":[null,-1.5]}}]}"#;
        let (url, _, bodies) = canned(vec![(200, resp.into())]);
        let b = backend(url, Protocol::Completion, &[Capability::TextCompletion, Capability::Logprobs]);
        assert_eq!(b.score_logprobs("a b").unwrap(), vec![(" b".to_string(), -1.5)]);
        let body = &bodies.lock().unwrap()[0];
        assert_eq!(body["echo"], true);
        assert_eq!(body["max_tokens"], 0);
    }

    #[test]
    fn missing_api_key_env_is_an_error() {
        let cfg = RemoteConfig::new(BackendDescriptor {
            model_id: "m".into(),
            capabilities: BTreeSet::new(),
            endpoint: "http://x".into(),
            protocol: Protocol::Completion,
            api_key_env: Some("NGCOV_TEST_SURELY_UNSET_VAR".into()),
        });
        assert!(RemoteBackend::new(cfg).is_err());
    }

    #[test]
    fn in_flight_limit_holds() {
        let gate = Arc::new(InFlight {
            limit: 2,
            count: Mutex::new(0),
            freed: Condvar::new(),
        });
        let peak = Arc::new(AtomicUsize::new(0));
        let live = Arc::new(AtomicUsize::new(0));
        std::thread::scope(|s| {
            for _ in 0..8 {
                let (gate, peak, live) = (gate.clone(), peak.clone(), live.clone());
                s.spawn(move || {
                    let _g = gate.enter();
                    let now = live.fetch_add(1, Ordering::SeqCst) + 1;
                    peak.fetch_max(now, Ordering::SeqCst);
                    std::thread::sleep(Duration::from_millis(5));
                    live.fetch_sub(1, Ordering::SeqCst);
                });
            }
        });
        assert!(peak.load(Ordering::SeqCst) <= 2);
    }

    #[test]
    fn backoff_stays_under_cap() {
        let p = RetryPolicy::default();
        for a in 0..30 {
            assert!(p.delay(a) <= Duration::from_millis(p.max_delay_ms));
        }
    }
}

//! Minimal HTTP/1.1 server exposing a [`Backend`] over the OpenAI-compatible
//! completion protocol. Lets the remote client path run end to end against
//! the memorizer without leaving the machine.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use serde_json::{json, Value};

use super::{Backend, SamplingParams};
use crate::error::Error;

pub struct WireServer {
    addr: SocketAddr,
    requests: Arc<AtomicU64>,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl WireServer {
    /// Binds `bind` (use port 0 for an ephemeral port) and serves in a
    /// background thread until dropped.
    pub fn start(backend: Arc<dyn Backend>, bind: &str) -> std::io::Result<Self> {
        let listener = TcpListener::bind(bind)?;
        let addr = listener.local_addr()?;
        let requests = Arc::new(AtomicU64::new(0));
        let stop = Arc::new(AtomicBool::new(false));
        let (req, stp) = (requests.clone(), stop.clone());
        let handle = std::thread::spawn(move || {
            for stream in listener.incoming() {
                if stp.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = stream else { continue };
                let (backend, req) = (backend.clone(), req.clone());
                std::thread::spawn(move || {
                    if let Err(e) = handle_connection(stream, backend.as_ref(), &req) {
                        log::warn!("connection error: {e}");
                    }
                });
            }
        });
        Ok(Self {
            addr,
            requests,
            stop,
            handle: Some(handle),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Base URL to put in a descriptor's endpoint.
    pub fn endpoint(&self) -> String {
        format!("http://{}/v1", self.addr)
    }

    /// Completed HTTP requests so far.
    pub fn requests(&self) -> u64 {
        self.requests.load(Ordering::SeqCst)
    }

    /// Blocks the caller for as long as the server runs.
    pub fn join(mut self) {
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

impl Drop for WireServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

fn handle_connection(stream: TcpStream, backend: &dyn Backend, counter: &AtomicU64) -> std::io::Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut request_line = String::new();
    if reader.read_line(&mut request_line)? == 0 {
        return Ok(());
    }
    let mut content_length = 0usize;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line)? == 0 || line == "\r\n" || line == "\n" {
            break;
        }
        if let Some((name, value)) = line.split_once(':') {
            if name.trim().eq_ignore_ascii_case("content-length") {
                content_length = value.trim().parse().unwrap_or(0);
            }
        }
    }
    let mut body = vec![0u8; content_length];
    reader.read_exact(&mut body)?;
    let path = request_line.split_whitespace().nth(1).unwrap_or("/").to_owned();

    let (status, payload) = match serde_json::from_slice::<Value>(&body) {
        Err(e) => (400, json!({"error": {"message": format!("invalid JSON: {e}")}})),
        Ok(req) => route(&path, &req, backend),
    };
    counter.fetch_add(1, Ordering::SeqCst);
    let text = payload.to_string();
    let mut stream = stream;
    write!(
        stream,
        "HTTP/1.1 {status} {}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{text}",
        if status == 200 { "OK" } else { "Error" },
        text.len()
    )?;
    stream.flush()
}

fn error_status(e: &Error) -> u16 {
    match e {
        Error::Capability { .. } | Error::InvalidArgument(_) | Error::PromptTooLong(_) => 400,
        Error::Auth { .. } => 401,
        _ => 500,
    }
}

fn route(path: &str, req: &Value, backend: &dyn Backend) -> (u16, Value) {
    let chat = path.ends_with("/chat/completions");
    if !chat && !path.ends_with("/completions") {
        return (404, json!({"error": {"message": format!("no route for {path}")}}));
    }
    let result = if chat { chat_completion(req, backend) } else { completion(req, backend) };
    match result {
        Ok(v) => (200, v),
        Err(e) => (error_status(&e), json!({"error": {"message": e.to_string()}})),
    }
}

fn params_of(req: &Value) -> SamplingParams {
    let d = SamplingParams::default();
    SamplingParams {
        temperature: req.get("temperature").and_then(Value::as_f64).unwrap_or(1.0),
        top_p: req.get("top_p").and_then(Value::as_f64).unwrap_or(1.0),
        max_tokens: req.get("max_tokens").and_then(Value::as_u64).map_or(d.max_tokens, |v| v as usize),
        n_samples: req.get("n").and_then(Value::as_u64).map_or(1, |v| v as usize),
        seed: req.get("seed").and_then(Value::as_u64),
    }
}

/// A request `seed` selects the first sample index, so clients that send
/// `seed + start` for a partial pool get the matching samples back.
fn sample_range(params: &SamplingParams) -> std::ops::Range<usize> {
    let start = params.seed.unwrap_or(0) as usize;
    start..start + params.n_samples
}

fn completion(req: &Value, backend: &dyn Backend) -> crate::error::Result<Value> {
    let prompt = req
        .get("prompt")
        .and_then(Value::as_str)
        .ok_or_else(|| Error::InvalidArgument("prompt must be a string".into()))?;
    let model = backend.descriptor().model_id.clone();
    if req.get("echo").and_then(Value::as_bool) == Some(true) {
        let lps = backend.score_logprobs(prompt)?;
        let tokens: Vec<&str> = lps.iter().map(|(t, _)| t.as_str()).collect();
        let values: Vec<f64> = lps.iter().map(|(_, v)| *v).collect();
        return Ok(json!({
            "object": "text_completion",
            "model": model,
            "choices": [{
                "index": 0,
                "text": prompt,
                "finish_reason": "length",
                "logprobs": {"tokens": tokens, "token_logprobs": values},
            }],
        }));
    }
    let params = params_of(req);
    let gens = backend.sample(prompt, &params, sample_range(&params))?;
    let choices: Vec<Value> = gens
        .iter()
        .enumerate()
        .map(|(i, g)| json!({"index": i, "text": g.text, "finish_reason": g.finish_reason.as_str(), "logprobs": null}))
        .collect();
    Ok(json!({"object": "text_completion", "model": model, "choices": choices}))
}

fn chat_completion(req: &Value, backend: &dyn Backend) -> crate::error::Result<Value> {
    let prompt = req
        .get("messages")
        .and_then(Value::as_array)
        .and_then(|m| m.iter().rev().find(|m| m.get("role").and_then(Value::as_str) == Some("user")))
        .and_then(|m| m.get("content"))
        .and_then(Value::as_str)
        .ok_or_else(|| Error::InvalidArgument("messages must contain a user turn".into()))?;
    let params = params_of(req);
    let gens = backend.sample(prompt, &params, sample_range(&params))?;
    let choices: Vec<Value> = gens
        .iter()
        .enumerate()
        .map(|(i, g)| {
            json!({
                "index": i,
                "message": {"role": "assistant", "content": g.text},
                "finish_reason": g.finish_reason.as_str(),
            })
        })
        .collect();
    Ok(json!({"object": "chat.completion", "model": backend.descriptor().model_id, "choices": choices}))
}

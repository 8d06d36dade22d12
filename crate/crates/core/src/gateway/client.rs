use std::fs::{File, OpenOptions};
use std::io::Write;
use std::sync::Mutex;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use base64::Engine;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::{BackendConfig, ChatBackend, ChatMessage, ChatRequest, Embedder, GatewayError, Slots};

/// HTTP client for an OpenAI-compatible endpoint. Safe to share across
/// threads; in-flight requests never exceed `cfg.parallelism`.
pub struct Gateway {
    cfg: BackendConfig,
    agent: ureq::Agent,
    api_key: Option<String>,
    slots: Slots,
    journal: Option<Mutex<File>>,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway").field("cfg", &self.cfg).finish_non_exhaustive()
    }
}

impl Gateway {
    pub fn new(cfg: BackendConfig) -> Result<Self, GatewayError> {
        cfg.validate()?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(cfg.timeout_secs.max(1))))
            .build()
            .into();
        let journal = match &cfg.journal {
            Some(p) => Some(Mutex::new(OpenOptions::new().create(true).append(true).open(p)?)),
            None => None,
        };
        let api_key = std::env::var(cfg.api_key_var()).ok();
        Ok(Gateway { slots: Slots::new(cfg.parallelism), cfg, agent, api_key, journal })
    }

    pub fn config(&self) -> &BackendConfig {
        &self.cfg
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{}", self.cfg.base_url.trim_end_matches('/'), path)
    }

    fn chat_body(&self, req: &ChatRequest) -> Result<Value, GatewayError> {
        let image_count: usize = req.messages.iter().map(|m| m.images.len()).sum();
        if let Some(cap) = self.cfg.max_images {
            if image_count > cap {
                return Err(GatewayError::Oversize(format!("{image_count} images, backend accepts {cap}")));
            }
        }
        let mut messages = Vec::with_capacity(req.messages.len());
        for m in &req.messages {
            messages.push(encode_message(m)?);
        }
        let mut body = json!({
            "model": self.cfg.model,
            "messages": messages,
            "temperature": self.cfg.temperature,
            "top_p": self.cfg.top_p,
            "top_k": self.cfg.top_k,
            "max_tokens": self.cfg.max_tokens,
        });
        if let Some(seed) = req.seed {
            body["seed"] = json!(seed);
        }
        Ok(body)
    }

    /// POSTs with retries; transient failures back off exponentially.
    fn post(&self, path: &str, body: &Value) -> Result<Value, GatewayError> {
        let _slot = self.slots.acquire();
        let payload = serde_json::to_vec(body).map_err(|e| GatewayError::Schema(e.to_string()))?;
        let digest = hex::encode(Sha256::digest(&payload));
        let mut attempt = 0u32;
        loop {
            let started = Instant::now();
            let outcome = self.post_once(path, &payload);
            self.journal(path, &digest, attempt, started, &outcome);
            match outcome {
                Ok(v) => return Ok(v),
                Err(e) if e.is_transient() && attempt < self.cfg.retry_budget => {
                    let wait = self.cfg.backoff_base_ms.saturating_mul(1u64 << attempt.min(16));
                    std::thread::sleep(Duration::from_millis(wait));
                    attempt += 1;
                }
                Err(GatewayError::RateLimited { .. }) => {
                    return Err(GatewayError::RateLimited { attempts: attempt + 1 })
                }
                Err(e) => return Err(e),
            }
        }
    }

    fn post_once(&self, path: &str, payload: &[u8]) -> Result<Value, GatewayError> {
        let mut req = self.agent.post(self.url(path)).header("content-type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("authorization", format!("Bearer {key}"));
        }
        let resp = req.send(payload).map_err(|e| GatewayError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp.into_body().read_to_string().map_err(|e| GatewayError::Transport(e.to_string()))?;
        match status {
            200..=299 => serde_json::from_str(&text).map_err(|e| GatewayError::Schema(format!("{e}: {text}"))),
            401 | 403 => Err(GatewayError::Auth(format!("status {status}"))),
            413 => Err(GatewayError::Oversize(format!("status 413: {text}"))),
            429 => Err(GatewayError::RateLimited { attempts: 1 }),
            500..=599 => Err(GatewayError::Transport(format!("status {status}"))),
            _ => Err(GatewayError::Rejected { status, body: text }),
        }
    }

    fn journal(&self, path: &str, digest: &str, attempt: u32, started: Instant, outcome: &Result<Value, GatewayError>) {
        let Some(j) = &self.journal else { return };
        let ts = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0);
        let usage = outcome.as_ref().ok().and_then(|v| v.get("usage")).cloned().unwrap_or(Value::Null);
        let line = json!({
            "ts_ms": ts,
            "endpoint": path,
            "request_sha256": digest,
            "attempt": attempt,
            "duration_ms": started.elapsed().as_millis() as u64,
            "ok": outcome.is_ok(),
            "error": outcome.as_ref().err().map(|e| e.to_string()),
            "prompt_tokens": usage.get("prompt_tokens"),
            "completion_tokens": usage.get("completion_tokens"),
        });
        if let Ok(mut f) = j.lock() {
            let _ = writeln!(f, "{line}");
        }
    }
}

fn encode_message(m: &ChatMessage) -> Result<Value, GatewayError> {
    if m.images.is_empty() {
        return Ok(json!({ "role": m.role, "content": m.text }));
    }
    let mut parts = vec![json!({ "type": "text", "text": m.text })];
    for p in &m.images {
        let bytes = std::fs::read(p)?;
        let mime = match p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref() {
            Some("jpg") | Some("jpeg") => "image/jpeg",
            Some("webp") => "image/webp",
            _ => "image/png",
        };
        let data = base64::engine::general_purpose::STANDARD.encode(bytes);
        parts.push(json!({ "type": "image_url", "image_url": { "url": format!("data:{mime};base64,{data}") } }));
    }
    Ok(json!({ "role": m.role, "content": parts }))
}

impl ChatBackend for Gateway {
    fn complete(&self, req: &ChatRequest) -> Result<String, GatewayError> {
        let body = self.chat_body(req)?;
        let v = self.post("chat/completions", &body)?;
        v.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| GatewayError::Schema(format!("no choices[0].message.content in {v}")))
    }

    fn parallelism(&self) -> usize {
        self.cfg.parallelism
    }
}

impl Embedder for Gateway {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, GatewayError> {
        if texts.is_empty() {
            return Err(GatewayError::EmptyInput);
        }
        let model = self.cfg.embedding_model.as_deref().unwrap_or(&self.cfg.model);
        let v = self.post("embeddings", &json!({ "model": model, "input": texts }))?;
        let data = v
            .get("data")
            .and_then(Value::as_array)
            .ok_or_else(|| GatewayError::Schema("embedding reply lacks data".into()))?;
        let mut out: Vec<Option<Vec<f64>>> = vec![None; texts.len()];
        for (pos, item) in data.iter().enumerate() {
            let idx = item.get("index").and_then(Value::as_u64).map(|i| i as usize).unwrap_or(pos);
            let vec: Vec<f64> = item
                .get("embedding")
                .and_then(Value::as_array)
                .ok_or_else(|| GatewayError::Schema("embedding item lacks vector".into()))?
                .iter()
                .map(|x| x.as_f64().ok_or_else(|| GatewayError::Schema("non-numeric embedding".into())))
                .collect::<Result<_, _>>()?;
            let slot = out.get_mut(idx).ok_or_else(|| GatewayError::Schema(format!("embedding index {idx} out of range")))?;
            *slot = Some(vec);
        }
        let out: Vec<Vec<f64>> = out
            .into_iter()
            .collect::<Option<_>>()
            .ok_or_else(|| GatewayError::Schema("missing embeddings".into()))?;
        if let Some(first) = out.first() {
            if out.iter().any(|v| v.len() != first.len()) {
                return Err(GatewayError::Schema("embeddings differ in length".into()));
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    use super::super::mock::{MockReply, MockServer};
    use super::super::{sample_n, SeedPolicy};
    use super::*;

    fn cfg(url: &str) -> BackendConfig {
        BackendConfig { base_url: url.to_string(), backoff_base_ms: 1, retry_budget: 3, ..Default::default() }
    }

    fn completion(text: &str) -> String {
        json!({"choices": [{"message": {"role": "assistant", "content": text}}], "usage": {"prompt_tokens": 3, "completion_tokens": 2}}).to_string()
    }

    #[test]
    fn echoes_canned_reply() {
        let body = completion("fair and cool");
        let server = MockServer::start(move |_| MockReply::ok(body.clone()));
        let gw = Gateway::new(cfg(&server.url())).unwrap();
        assert_eq!(gw.chat(&[ChatMessage::user("hello")]).unwrap(), "fair and cool");
        let req = &server.requests()[0];
        assert_eq!(req.path, "/chat/completions");
        let sent: Value = serde_json::from_str(&req.body).unwrap();
        assert_eq!(sent["max_tokens"], 400);
        assert_eq!(sent["temperature"], 0.3);
    }

    #[test]
    fn auth_error_is_not_retried() {
        let server = MockServer::start(|_| MockReply::status(401, "no"));
        let gw = Gateway::new(cfg(&server.url())).unwrap();
        let err = gw.chat(&[ChatMessage::user("x")]).unwrap_err();
        assert!(matches!(err, GatewayError::Auth(_)));
        assert_eq!(server.request_count(), 1);
    }

    #[test]
    fn retries_rate_limits_within_budget() {
        let n = Arc::new(AtomicUsize::new(0));
        let seen = n.clone();
        let body = completion("ok");
        let server = MockServer::start(move |_| {
            if seen.fetch_add(1, Ordering::SeqCst) < 2 {
                MockReply::status(429, "slow down")
            } else {
                MockReply::ok(body.clone())
            }
        });
        let gw = Gateway::new(cfg(&server.url())).unwrap();
        assert_eq!(gw.chat(&[ChatMessage::user("x")]).unwrap(), "ok");
        assert_eq!(server.request_count(), 3);
    }

    #[test]
    fn rate_limit_exhausts_budget() {
        let server = MockServer::start(|_| MockReply::status(429, ""));
        let gw = Gateway::new(BackendConfig { retry_budget: 2, ..cfg(&server.url()) }).unwrap();
        let err = gw.chat(&[ChatMessage::user("x")]).unwrap_err();
        assert!(matches!(err, GatewayError::RateLimited { attempts: 3 }));
    }

    #[test]
    fn refuses_too_many_images() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("a.png");
        std::fs::write(&img, [0u8, 1, 2]).unwrap();
        let server = MockServer::start(|_| MockReply::ok(completion("x")));
        let gw = Gateway::new(BackendConfig { max_images: Some(1), ..cfg(&server.url()) }).unwrap();
        let msg = ChatMessage::user("look").with_images([img.clone(), img.clone()]);
        assert!(matches!(gw.chat(&[msg]), Err(GatewayError::Oversize(_))));
        assert_eq!(server.request_count(), 0);
        let msg = ChatMessage::user("look").with_images([img]);
        gw.chat(&[msg]).unwrap();
        let sent: Value = serde_json::from_str(&server.requests()[0].body).unwrap();
        let url = sent["messages"][0]["content"][1]["image_url"]["url"].as_str().unwrap();
        assert!(url.starts_with("data:image/png;base64,"));
    }

    #[test]
    fn parallelism_bounds_in_flight_requests() {
        let server = MockServer::start(|_| {
            std::thread::sleep(Duration::from_millis(20));
            MockReply::ok(completion("s"))
        });
        let gw = Gateway::new(BackendConfig { parallelism: 3, ..cfg(&server.url()) }).unwrap();
        let batch = sample_n(&gw, &[ChatMessage::user("x")], 40, SeedPolicy::Sequential(0)).unwrap();
        assert_eq!(batch.texts.len(), 40);
        assert!(server.max_in_flight() <= 3, "saw {}", server.max_in_flight());
        assert!(server.max_in_flight() >= 2);
        let seeds: std::collections::BTreeSet<u64> = server
            .requests()
            .iter()
            .map(|r| serde_json::from_str::<Value>(&r.body).unwrap()["seed"].as_u64().unwrap())
            .collect();
        assert_eq!(seeds.len(), 40);
    }

    #[test]
    fn backend_down_means_all_failed() {
        let server = MockServer::start(|_| MockReply::status(503, ""));
        let gw = Gateway::new(BackendConfig { retry_budget: 0, ..cfg(&server.url()) }).unwrap();
        let err = sample_n(&gw, &[ChatMessage::user("x")], 2, SeedPolicy::Unseeded).unwrap_err();
        assert!(matches!(err, GatewayError::AllFailed(2)));
    }

    #[test]
    fn embeddings_keep_order_and_journal() {
        let server = MockServer::start(|req| {
            let v: Value = serde_json::from_str(&req.body).unwrap();
            let n = v["input"].as_array().unwrap().len();
            // reply out of order to exercise index handling
            let data: Vec<Value> = (0..n).rev().map(|i| json!({"index": i, "embedding": [i as f64, 1.0]})).collect();
            MockReply::ok(json!({ "data": data }).to_string())
        });
        let dir = tempfile::tempdir().unwrap();
        let journal = dir.path().join("journal.jsonl");
        let gw = Gateway::new(BackendConfig { journal: Some(journal.clone()), ..cfg(&server.url()) }).unwrap();
        let texts: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let out = gw.embed(&texts).unwrap();
        assert_eq!(out, vec![vec![0.0, 1.0], vec![1.0, 1.0], vec![2.0, 1.0]]);
        assert!(matches!(gw.embed(&[]), Err(GatewayError::EmptyInput)));
        let lines = std::fs::read_to_string(journal).unwrap();
        let entry: Value = serde_json::from_str(lines.lines().next().unwrap()).unwrap();
        assert_eq!(entry["endpoint"], "embeddings");
        assert_eq!(entry["request_sha256"].as_str().unwrap().len(), 64);
    }
}

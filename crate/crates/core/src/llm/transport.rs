use std::sync::atomic::{AtomicUsize, Ordering};
use std::thread;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{parse_reply, LlmError, LlmResponse, PromptBundle, ReplyFault};

#[derive(Clone, Debug, PartialEq)]
pub enum TransportError {
    /// Server asked us to slow down; the call is retried after a backoff.
    RateLimited { retry_after: Option<Duration> },
    /// Any other failure worth retrying (network, 5xx, bad envelope).
    Failed(String),
    /// The request can never succeed; not retried.
    Fatal(String),
}

impl std::fmt::Display for TransportError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TransportError::RateLimited { .. } => f.write_str("rate limited"),
            TransportError::Failed(m) => write!(f, "{m}"),
            TransportError::Fatal(m) => write!(f, "{m}"),
        }
    }
}

/// Something that turns a prompt into raw reply text.
pub trait LlmTransport: Send + Sync {
    fn complete(&self, prompt: &PromptBundle) -> Result<String, TransportError>;
}

impl<T: LlmTransport + ?Sized> LlmTransport for &T {
    fn complete(&self, prompt: &PromptBundle) -> Result<String, TransportError> {
        (**self).complete(prompt)
    }
}

impl<T: LlmTransport + ?Sized> LlmTransport for Box<T> {
    fn complete(&self, prompt: &PromptBundle) -> Result<String, TransportError> {
        (**self).complete(prompt)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpConfig {
    pub base_url: String,
    pub model: String,
    pub temperature: f64,
    pub timeout_secs: u64,
    /// Environment variable holding the bearer token.
    pub api_key_env: String,
}

impl Default for HttpConfig {
    fn default() -> Self {
        HttpConfig {
            base_url: "http://localhost:8000/v1".into(),
            model: "gemma-2-9b-it".into(),
            temperature: 0.7,
            timeout_secs: 120,
            api_key_env: "LLM_API_KEY".into(),
        }
    }
}

/// Chat-completion client over HTTP(S).
pub struct HttpTransport {
    agent: ureq::Agent,
    config: HttpConfig,
    api_key: Option<String>,
}

impl HttpTransport {
    pub fn new(config: HttpConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .build()
            .into();
        let api_key = std::env::var(&config.api_key_env).ok().filter(|k| !k.is_empty());
        HttpTransport { agent, config, api_key }
    }

    pub fn request_body(&self, prompt: &PromptBundle) -> Value {
        json!({
            "model": self.config.model,
            "messages": [
                {"role": "system", "content": prompt.system},
                {"role": "user", "content": prompt.user},
            ],
            "temperature": self.config.temperature,
        })
    }
}

impl LlmTransport for HttpTransport {
    fn complete(&self, prompt: &PromptBundle) -> Result<String, TransportError> {
        let url = format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'));
        let mut req = self.agent.post(&url);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(self.request_body(prompt))
            .map_err(|e| TransportError::Failed(e.to_string()))?;
        let status = resp.status().as_u16();
        if status == 429 {
            let retry_after = resp
                .headers()
                .get("retry-after")
                .and_then(|v| v.to_str().ok())
                .and_then(|s| s.trim().parse::<u64>().ok())
                .map(Duration::from_secs);
            return Err(TransportError::RateLimited { retry_after });
        }
        if status == 401 || status == 403 || status == 404 {
            return Err(TransportError::Fatal(format!("http status {status}")));
        }
        if status >= 400 {
            return Err(TransportError::Failed(format!("http status {status}")));
        }
        let body: Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| TransportError::Failed(e.to_string()))?;
        body.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| TransportError::Failed("response has no choices[0].message.content".into()))
    }
}

/// Wraps a transport and counts every call made through it.
pub struct CountingTransport<T> {
    inner: T,
    calls: AtomicUsize,
}

impl<T> CountingTransport<T> {
    pub fn new(inner: T) -> Self {
        CountingTransport {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn inner(&self) -> &T {
        &self.inner
    }
}

impl<T: LlmTransport> LlmTransport for CountingTransport<T> {
    fn complete(&self, prompt: &PromptBundle) -> Result<String, TransportError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.complete(prompt)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QueryPolicy {
    /// Maximum transport calls per prompt, rate-limited ones included.
    pub retry_budget: u32,
    pub backoff_base_ms: u64,
    pub backoff_max_ms: u64,
    pub max_in_flight: usize,
}

impl Default for QueryPolicy {
    fn default() -> Self {
        QueryPolicy {
            retry_budget: 3,
            backoff_base_ms: 500,
            backoff_max_ms: 30_000,
            max_in_flight: 8,
        }
    }
}

/// Sends `prompt` until a reply validates or the budget is spent. Each
/// returned error names the last kind of failure seen.
pub fn query_llm(transport: &dyn LlmTransport, prompt: &PromptBundle, policy: &QueryPolicy) -> Result<LlmResponse, LlmError> {
    if policy.retry_budget < 1 {
        return Err(LlmError::BadBudget);
    }
    let mut last = LlmError::Transport("no attempt made".into());
    for call in 0..policy.retry_budget {
        match transport.complete(prompt) {
            Ok(raw) => match parse_reply(&raw, prompt.mode) {
                Ok(parsed) => return Ok(LlmResponse { raw, parsed }),
                Err(ReplyFault::Malformed) => last = LlmError::MalformedJson { attempts: call + 1 },
                Err(ReplyFault::Keys(detail)) => last = LlmError::MissingKey { detail, attempts: call + 1 },
            },
            Err(TransportError::Fatal(m)) => return Err(LlmError::Transport(m)),
            Err(TransportError::RateLimited { retry_after }) => {
                last = LlmError::Transport("rate limited".into());
                if call + 1 < policy.retry_budget {
                    let exp = policy.backoff_base_ms.saturating_mul(1u64 << call.min(20));
                    let wait = retry_after.unwrap_or(Duration::from_millis(exp.min(policy.backoff_max_ms)));
                    thread::sleep(wait);
                }
            }
            Err(TransportError::Failed(m)) => last = LlmError::Transport(m),
        }
    }
    Err(last)
}

/// Runs many prompts with at most `max_in_flight` concurrent requests.
/// Results come back in input order.
pub fn query_batch(
    transport: &dyn LlmTransport,
    prompts: &[PromptBundle],
    policy: &QueryPolicy,
) -> Vec<Result<LlmResponse, LlmError>> {
    let threads = policy.max_in_flight.max(1);
    if threads == 1 || prompts.len() < 2 {
        return prompts.iter().map(|p| query_llm(transport, p, policy)).collect();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(pool) => pool.install(|| prompts.par_iter().map(|p| query_llm(transport, p, policy)).collect()),
        Err(e) => {
            log::warn!("could not start request pool ({e}); querying sequentially");
            prompts.iter().map(|p| query_llm(transport, p, policy)).collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::NodeId;
    use crate::llm::PromptMode;
    use std::sync::Mutex;

    struct Scripted(Mutex<Vec<Result<String, TransportError>>>);

    impl Scripted {
        fn new(mut replies: Vec<Result<String, TransportError>>) -> Self {
            replies.reverse();
            Scripted(Mutex::new(replies))
        }
    }

    impl LlmTransport for Scripted {
        fn complete(&self, _: &PromptBundle) -> Result<String, TransportError> {
            self.0.lock().unwrap().pop().unwrap_or(Err(TransportError::Failed("script exhausted".into())))
        }
    }

    const OK: &str = r#"{"Topic Analysis":"a","Missing Neighbor":{"title":"t","abstract":"b"}}"#;

    fn prompt() -> PromptBundle {
        PromptBundle {
            system: "s".into(),
            user: "u".into(),
            center_id: NodeId::from("c"),
            sampled_neighbor_id: None,
            mode: PromptMode::Generate,
            attempt: 1,
            slot: 0,
        }
    }

    fn policy(budget: u32) -> QueryPolicy {
        QueryPolicy {
            retry_budget: budget,
            backoff_base_ms: 0,
            backoff_max_ms: 0,
            max_in_flight: 2,
        }
    }

    #[test]
    fn retries_after_bad_key_then_succeeds() {
        let t = CountingTransport::new(Scripted::new(vec![
            Ok(r#"{"Topic Analysis":"a","missing_neighbor":{"title":"t","abstract":"b"}}"#.into()),
            Ok(OK.into()),
        ]));
        let r = query_llm(&t, &prompt(), &policy(3)).unwrap();
        assert_eq!(r.parsed.title, "t");
        assert_eq!(t.calls(), 2);
    }

    #[test]
    fn exhaustion_errors_are_distinct() {
        let t = Scripted::new(vec![Ok("nope".into()), Ok("still nope".into())]);
        assert!(matches!(query_llm(&t, &prompt(), &policy(2)), Err(LlmError::MalformedJson { attempts: 2 })));
        let t = Scripted::new(vec![Ok(r#"{"x":1}"#.into())]);
        assert!(matches!(query_llm(&t, &prompt(), &policy(1)), Err(LlmError::MissingKey { .. })));
        let t = Scripted::new(vec![Err(TransportError::Failed("down".into()))]);
        assert!(matches!(query_llm(&t, &prompt(), &policy(1)), Err(LlmError::Transport(_))));
    }

    #[test]
    fn calls_never_exceed_budget() {
        for budget in 1..5 {
            let t = CountingTransport::new(Scripted::new(vec![Err(TransportError::RateLimited { retry_after: None }); 10]));
            assert!(query_llm(&t, &prompt(), &policy(budget)).is_err());
            assert_eq!(t.calls(), budget as usize);
        }
    }

    #[test]
    fn fatal_errors_are_not_retried() {
        let t = CountingTransport::new(Scripted::new(vec![Err(TransportError::Fatal("401".into())), Ok(OK.into())]));
        assert!(query_llm(&t, &prompt(), &policy(3)).is_err());
        assert_eq!(t.calls(), 1);
    }

    #[test]
    fn zero_budget_is_rejected() {
        let t = Scripted::new(vec![Ok(OK.into())]);
        assert!(matches!(query_llm(&t, &prompt(), &policy(0)), Err(LlmError::BadBudget)));
    }

    #[test]
    fn request_body_shape() {
        let t = HttpTransport::new(HttpConfig::default());
        let body = t.request_body(&prompt());
        assert_eq!(body["messages"][0]["role"], "system");
        assert_eq!(body["messages"][1]["content"], "u");
        assert_eq!(body["temperature"], 0.7);
    }

    struct Echo;

    impl LlmTransport for Echo {
        fn complete(&self, p: &PromptBundle) -> Result<String, TransportError> {
            Ok(OK.replace("\"t\"", &format!("\"{}\"", p.user)))
        }
    }

    #[test]
    fn batch_preserves_order() {
        let prompts: Vec<PromptBundle> = (0..20)
            .map(|i| PromptBundle {
                user: format!("u{i}"),
                ..prompt()
            })
            .collect();
        let out = query_batch(&Echo, &prompts, &policy(1));
        for (i, r) in out.into_iter().enumerate() {
            assert_eq!(r.unwrap().parsed.title, format!("u{i}"));
        }
    }
}

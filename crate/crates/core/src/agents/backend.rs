//! Text generation backends.

use std::collections::VecDeque;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::{Policy, TokenId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeParams {
    pub max_tokens: usize,
    pub temperature: f64,
}

impl Default for DecodeParams {
    fn default() -> Self {
        DecodeParams {
            max_tokens: 64,
            temperature: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("endpoint returned HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("malformed endpoint response: {0}")]
    BadResponse(String),
    #[error("prompt not supported by backend: {0}")]
    UnsupportedPrompt(String),
    #[error("scripted backend has no reply left")]
    ScriptExhausted,
    #[error("environment variable {0} is not set")]
    MissingToken(String),
}

/// Anything that turns a prompt into text.
pub trait ModelBackend {
    fn generate(&mut self, prompt: &str, params: &DecodeParams) -> Result<String, BackendError>;
}

impl<B: ModelBackend + ?Sized> ModelBackend for &mut B {
    fn generate(&mut self, prompt: &str, params: &DecodeParams) -> Result<String, BackendError> {
        (**self).generate(prompt, params)
    }
}

impl<B: ModelBackend + ?Sized> ModelBackend for Box<B> {
    fn generate(&mut self, prompt: &str, params: &DecodeParams) -> Result<String, BackendError> {
        (**self).generate(prompt, params)
    }
}

/// Deterministic backend driven by a rule or a fixed queue of replies.
pub struct ScriptedBackend {
    rule: Box<dyn FnMut(&str) -> Result<String, BackendError> + Send>,
}

impl ScriptedBackend {
    pub fn from_fn<F>(rule: F) -> Self
    where
        F: FnMut(&str) -> Result<String, BackendError> + Send + 'static,
    {
        ScriptedBackend { rule: Box::new(rule) }
    }

    /// Replies in order, then fails with [`BackendError::ScriptExhausted`].
    pub fn queue<I, S>(replies: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut q: VecDeque<String> = replies.into_iter().map(Into::into).collect();
        Self::from_fn(move |_| q.pop_front().ok_or(BackendError::ScriptExhausted))
    }

    /// Always the same reply.
    pub fn constant(reply: impl Into<String>) -> Self {
        let reply = reply.into();
        Self::from_fn(move |_| Ok(reply.clone()))
    }
}

impl ModelBackend for ScriptedBackend {
    fn generate(&mut self, prompt: &str, _params: &DecodeParams) -> Result<String, BackendError> {
        (self.rule)(prompt)
    }
}

/// Opening marker of the context block a [`PolicyBackend`] reads.
pub const CONTEXT_OPEN: &str = "[ctx";

/// Renders context symbols as a block a [`PolicyBackend`] can read.
pub fn context_block<S: AsRef<str>>(symbols: &[S]) -> String {
    let mut out = String::from(CONTEXT_OPEN);
    for s in symbols {
        out.push(' ');
        out.push_str(s.as_ref());
    }
    out.push(']');
    out
}

/// Extracts the symbols of the last context block in `prompt`.
pub fn parse_context_block(prompt: &str) -> Option<Vec<&str>> {
    let start = prompt.rfind(CONTEXT_OPEN)? + CONTEXT_OPEN.len();
    let len = prompt[start..].find(']')?;
    Some(prompt[start..start + len].split_whitespace().collect())
}

/// Wraps a policy: the prompt's context block becomes the token prompt and
/// the reply is the greedy (or sampled, with `temperature > 0`) decode.
pub struct PolicyBackend<P> {
    pub policy: P,
    pub seed: u64,
    calls: u64,
}

impl<P: Policy> PolicyBackend<P> {
    pub fn new(policy: P, seed: u64) -> Self {
        PolicyBackend { policy, seed, calls: 0 }
    }

    pub fn prompt_tokens(&self, prompt: &str) -> Result<Vec<TokenId>, BackendError> {
        let symbols = parse_context_block(prompt)
            .ok_or_else(|| BackendError::UnsupportedPrompt("no context block".into()))?;
        let vocab = self.policy.vocab();
        let mut tokens = vec![vocab.bos()];
        for s in symbols {
            tokens.push(vocab.id(s).map_err(|e| BackendError::UnsupportedPrompt(e.to_string()))?);
        }
        tokens.push(vocab.sep());
        Ok(tokens)
    }
}

impl<P: Policy> ModelBackend for PolicyBackend<P> {
    fn generate(&mut self, prompt: &str, params: &DecodeParams) -> Result<String, BackendError> {
        let tokens = self.prompt_tokens(prompt)?;
        let seed = self.seed.wrapping_add(self.calls);
        self.calls += 1;
        let sampled = self
            .policy
            .sample(&tokens, params.max_tokens, params.temperature, seed)
            .map_err(|e| BackendError::UnsupportedPrompt(e.to_string()))?;
        Ok(self.policy.vocab().decode(&sampled.tokens))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteConfig {
    pub endpoint: String,
    /// Name of the environment variable holding a bearer token, if any.
    pub token_env: Option<String>,
    pub timeout_ms: u64,
    pub retries: u32,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        RemoteConfig {
            endpoint: "http://127.0.0.1:8080/generate".into(),
            token_env: None,
            timeout_ms: 30_000,
            retries: 2,
        }
    }
}

#[derive(Serialize)]
struct RemoteRequest<'a> {
    prompt: &'a str,
    max_tokens: usize,
    temperature: f64,
}

#[derive(Deserialize)]
struct RemoteResponse {
    completion: String,
}

/// HTTP backend. Sends `{"prompt", "max_tokens", "temperature"}` as JSON
/// and expects `{"completion": "..."}` back. Transport failures and 5xx
/// replies are retried up to `retries` times.
pub struct RemoteBackend {
    config: RemoteConfig,
    client: reqwest::blocking::Client,
}

impl RemoteBackend {
    pub fn new(config: RemoteConfig) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        Ok(RemoteBackend { config, client })
    }

    fn attempt(&self, prompt: &str, params: &DecodeParams, token: Option<&str>) -> Result<String, BackendError> {
        let body = serde_json::to_string(&RemoteRequest {
            prompt,
            max_tokens: params.max_tokens,
            temperature: params.temperature,
        })
        .map_err(|e| BackendError::Transport(e.to_string()))?;
        let mut req = self
            .client
            .post(&self.config.endpoint)
            .header(reqwest::header::CONTENT_TYPE, "application/json")
            .body(body);
        if let Some(t) = token {
            req = req.bearer_auth(t);
        }
        let resp = req.send().map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = resp.status();
        let body = resp.text().map_err(|e| BackendError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(BackendError::Http {
                status: status.as_u16(),
                body,
            });
        }
        serde_json::from_str::<RemoteResponse>(&body)
            .map(|r| r.completion)
            .map_err(|e| BackendError::BadResponse(e.to_string()))
    }
}

impl ModelBackend for RemoteBackend {
    fn generate(&mut self, prompt: &str, params: &DecodeParams) -> Result<String, BackendError> {
        let token = match &self.config.token_env {
            Some(var) => Some(std::env::var(var).map_err(|_| BackendError::MissingToken(var.clone()))?),
            None => None,
        };
        let mut last = None;
        for attempt in 0..=self.config.retries {
            match self.attempt(prompt, params, token.as_deref()) {
                Ok(text) => return Ok(text),
                Err(e @ (BackendError::Transport(_) | BackendError::Http { status: 500.., .. })) => {
                    log::warn!("remote backend attempt {} failed: {e}", attempt + 1);
                    last = Some(e);
                }
                Err(e) => return Err(e),
            }
        }
        Err(last.expect("at least one attempt"))
    }
}

//! Client for an external chat-completions endpoint, plus an offline mock
//! that replays canned completions.
//!
//! The wire protocol is the ubiquitous chat-completions JSON shape
//! (messages with system/user roles, image parts by URL, `n`, `temperature`,
//! `max_tokens`). `ChainGenerator` is the seam: the pipeline only sees raw
//! completion strings, so other protocols can slot in behind it.

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::catalog::{prompt_bundle, AttributeTask};
use crate::chainparse::{classify_chain, GenerationChain};
use crate::error::{Error, Result};
use crate::jsonl;

/// Connection and decoding settings for the generation endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model_name: String,
    /// Name of the environment variable holding the API key. Keys are read
    /// only from the environment, never from config files or flags.
    pub api_key_env: String,
    pub max_tokens: u32,
    pub timeout_secs: u64,
    pub max_concurrency: usize,
    pub retry_limit: usize,
    /// Initial backoff; doubles per retry.
    pub backoff_ms: u64,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        Self {
            base_url: String::new(),
            model_name: String::new(),
            api_key_env: "OPENAI_API_KEY".into(),
            max_tokens: 200,
            timeout_secs: 60,
            max_concurrency: 4,
            retry_limit: 3,
            backoff_ms: 250,
        }
    }
}

impl EndpointConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_tokens < 1 {
            return Err(Error::Config("max_tokens must be at least 1".into()));
        }
        if self.max_concurrency < 1 {
            return Err(Error::Config("max_concurrency must be at least 1".into()));
        }
        Ok(())
    }
}

/// K raw completions for one task, plus the response bodies they came from
/// (for optional audit persistence; empty for the mock).
#[derive(Debug, Clone)]
pub struct SampledChains {
    pub completions: Vec<String>,
    pub raw_responses: Vec<String>,
}

/// Produces raw completion strings for a task. Implementations must return
/// exactly `k` completions or an error — never a partial silent result.
pub trait ChainGenerator: Sync {
    fn sample_chains(&self, task: &AttributeTask, k: usize, temperature: f64) -> Result<SampledChains>;
}

/// One temperature-0 completion, classified. Used for test-set accuracy.
pub fn greedy_answer(task: &AttributeTask, generator: &dyn ChainGenerator) -> Result<GenerationChain> {
    let sampled = generator.sample_chains(task, 1, 0.0)?;
    let raw = sampled.completions.into_iter().next().ok_or_else(|| Error::Endpoint {
        task_id: task.task_id().to_string(),
        msg: "no completion returned".into(),
    })?;
    Ok(classify_chain(task.task_id(), &raw, task.spec()))
}

/// Samples all tasks with up to `concurrency` in-flight requests. The
/// result vector is indexed like `tasks` regardless of arrival order, so
/// downstream stages never observe scheduling.
pub fn generate_corpus(
    tasks: &[AttributeTask],
    generator: &dyn ChainGenerator,
    k: usize,
    temperature: f64,
    concurrency: usize,
) -> Vec<Result<SampledChains>> {
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<SampledChains>>>> =
        Mutex::new((0..tasks.len()).map(|_| None).collect());
    let workers = concurrency.max(1).min(tasks.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let idx = next.fetch_add(1, Ordering::SeqCst);
                if idx >= tasks.len() {
                    break;
                }
                let outcome = generator.sample_chains(&tasks[idx], k, temperature);
                results.lock().unwrap()[idx] = Some(outcome);
            });
        }
    });
    results
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|slot| slot.expect("every task index visited"))
        .collect()
}

/// HTTP chat-completions client with retries and an `n > 1` fallback.
pub struct HttpGenerator {
    config: EndpointConfig,
    client: reqwest::blocking::Client,
    api_key: Option<String>,
}

impl HttpGenerator {
    pub fn new(config: EndpointConfig) -> Result<Self> {
        config.validate()?;
        if config.base_url.is_empty() {
            return Err(Error::Config("endpoint base_url is required".into()));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| Error::Config(format!("http client: {e}")))?;
        let api_key = std::env::var(&config.api_key_env).ok().filter(|k| !k.is_empty());
        Ok(Self { config, client, api_key })
    }

    fn request_body(&self, task: &AttributeTask, n: usize, temperature: f64) -> serde_json::Value {
        let prompts = prompt_bundle(task);
        let mut user_parts = vec![json!({"type": "text", "text": prompts.user_text})];
        for image in task.image_refs() {
            user_parts.push(json!({"type": "image_url", "image_url": {"url": image}}));
        }
        json!({
            "model": self.config.model_name,
            "messages": [
                {"role": "system", "content": prompts.system_text},
                {"role": "user", "content": user_parts},
            ],
            "n": n,
            "temperature": temperature,
            "max_tokens": self.config.max_tokens,
        })
    }

    /// POSTs once with retries on transport errors and 5xx responses.
    /// A 4xx response is returned to the caller: retrying will not help.
    fn post_with_retries(&self, task_id: &str, body: &serde_json::Value) -> Result<PostOutcome> {
        let mut last_err = String::new();
        for attempt in 0..=self.config.retry_limit {
            if attempt > 0 {
                let backoff = self.config.backoff_ms.saturating_mul(1 << (attempt - 1).min(8));
                std::thread::sleep(Duration::from_millis(backoff));
            }
            let mut request = self.client.post(&self.config.base_url).json(body);
            if let Some(key) = &self.api_key {
                request = request.bearer_auth(key);
            }
            match request.send() {
                Err(e) => last_err = format!("transport: {e}"),
                Ok(response) => {
                    let status = response.status();
                    let text = response.text().unwrap_or_default();
                    if status.is_success() {
                        return Ok(PostOutcome::Success(text));
                    }
                    if status.is_client_error() {
                        return Ok(PostOutcome::ClientError(status.as_u16(), text));
                    }
                    last_err = format!("status {status}: {text}");
                }
            }
        }
        Err(Error::Endpoint {
            task_id: task_id.to_string(),
            msg: format!("{last_err} (after {} attempts)", self.config.retry_limit + 1),
        })
    }

    fn parse_completions(task_id: &str, body: &str, expect: usize) -> Result<Vec<String>> {
        let response: ChatResponse = serde_json::from_str(body).map_err(|e| Error::Endpoint {
            task_id: task_id.to_string(),
            msg: format!("unparseable response: {e}"),
        })?;
        let completions: Vec<String> =
            response.choices.into_iter().map(|c| c.message.content).collect();
        if completions.len() != expect {
            return Err(Error::Endpoint {
                task_id: task_id.to_string(),
                msg: format!("expected {expect} choices, got {}", completions.len()),
            });
        }
        Ok(completions)
    }
}

enum PostOutcome {
    Success(String),
    ClientError(u16, String),
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    content: String,
}

impl ChainGenerator for HttpGenerator {
    fn sample_chains(&self, task: &AttributeTask, k: usize, temperature: f64) -> Result<SampledChains> {
        let task_id = task.task_id();
        let body = self.request_body(task, k, temperature);
        match self.post_with_retries(task_id, &body)? {
            PostOutcome::Success(text) => {
                let completions = Self::parse_completions(task_id, &text, k)?;
                Ok(SampledChains { completions, raw_responses: vec![text] })
            }
            PostOutcome::ClientError(status, text) if k > 1 => {
                // Some servers reject n > 1; k sequential single samples
                // are equivalent by construction.
                let mut completions = Vec::with_capacity(k);
                let mut raw_responses = Vec::with_capacity(k);
                for _ in 0..k {
                    let single = self.request_body(task, 1, temperature);
                    match self.post_with_retries(task_id, &single)? {
                        PostOutcome::Success(text) => {
                            completions.extend(Self::parse_completions(task_id, &text, 1)?);
                            raw_responses.push(text);
                        }
                        PostOutcome::ClientError(code, text) => {
                            return Err(Error::Endpoint {
                                task_id: task_id.to_string(),
                                msg: format!("status {code} (original {status}): {text}"),
                            });
                        }
                    }
                }
                Ok(SampledChains { completions, raw_responses })
            }
            PostOutcome::ClientError(status, text) => Err(Error::Endpoint {
                task_id: task_id.to_string(),
                msg: format!("status {status}: {text}"),
            }),
        }
    }
}

/// Wire schema of one mock fixture line: the canned completions replayed
/// for one task.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MockFixture {
    pub task_id: String,
    pub completions: Vec<String>,
}

/// Offline generator replaying fixture completions; makes the whole
/// pipeline runnable without a network and byte-reproducible.
pub struct MockGenerator {
    replay: HashMap<String, Vec<String>>,
}

impl MockGenerator {
    pub fn new(replay: HashMap<String, Vec<String>>) -> Self {
        Self { replay }
    }

    /// Loads `completions.jsonl` from a fixtures directory.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let fixtures: Vec<MockFixture> = jsonl::read_jsonl(&dir.join("completions.jsonl"))?;
        let mut replay = HashMap::new();
        for fixture in fixtures {
            if replay.insert(fixture.task_id.clone(), fixture.completions).is_some() {
                return Err(Error::DuplicateTaskId(fixture.task_id));
            }
        }
        Ok(Self { replay })
    }
}

impl ChainGenerator for MockGenerator {
    fn sample_chains(&self, task: &AttributeTask, k: usize, _temperature: f64) -> Result<SampledChains> {
        let task_id = task.task_id();
        let canned = self.replay.get(task_id).ok_or_else(|| Error::Endpoint {
            task_id: task_id.to_string(),
            msg: "no fixture completions for task".into(),
        })?;
        if canned.len() < k {
            return Err(Error::Endpoint {
                task_id: task_id.to_string(),
                msg: format!("fixture has {} completions, need {k}", canned.len()),
            });
        }
        Ok(SampledChains { completions: canned[..k].to_vec(), raw_responses: Vec::new() })
    }
}

use std::collections::HashMap;
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::templates::{AugmentationTemplate, ALL};
use crate::retry::{with_retry, Attempt, RetryPolicy};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("{client}: {message} (after {attempts} attempt(s))")]
pub struct ClientError {
    pub client: String,
    pub attempts: u32,
    pub message: String,
}

/// A text-generation backend.
pub trait GenClient: Send + Sync {
    fn name(&self) -> &str;
    fn complete(&self, system_role: &str, instruction: &str) -> Result<String, ClientError>;
}

/// Offline stand-in for a hosted model.
///
/// Recognizes the three augmentation templates by their system role and
/// answers from canned responses: the worked examples embedded in each
/// template are answered with the template's own example output, anything
/// else gets a rule-based response that depends only on the input and the
/// seed. Outputs can be overridden per slot value to simulate bad responses.
#[derive(Clone, Debug, Default)]
pub struct MockClient {
    seed: u64,
    overrides: HashMap<String, String>,
}

impl MockClient {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            overrides: HashMap::new(),
        }
    }

    /// Raw output to return when the slot value equals `input`.
    pub fn with_override(mut self, input: impl Into<String>, raw: impl Into<String>) -> Self {
        self.overrides.insert(input.into(), raw.into());
        self
    }

    fn rng_for(&self, kind: &str, input: &str) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(kind.as_bytes());
        h.update([0]);
        h.update(input.as_bytes());
        ChaCha8Rng::from_seed(h.finalize().into())
    }
}

/// The value substituted into the template's slot line.
fn slot_value(template: &AugmentationTemplate, instruction: &str) -> Option<String> {
    let label = template.slot_label();
    let line = instruction.lines().find(|l| l.starts_with(label))?;
    let v = line[label.len()..].trim();
    Some(
        v.strip_prefix('"')
            .and_then(|s| s.strip_suffix('"'))
            .unwrap_or(v)
            .to_string(),
    )
}

/// The worked example embedded in a template: (input, output block).
fn template_example(template: &AugmentationTemplate) -> (String, String) {
    let block = template
        .instruction
        .split("Example:\n")
        .nth(1)
        .expect("template has an example block");
    let mut lines = block.lines();
    let first = lines.next().unwrap_or_default();
    let input = first[template.slot_label().len()..]
        .trim()
        .trim_matches('"')
        .to_string();
    (input, lines.collect::<Vec<_>>().join("\n"))
}

fn lower_first(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_lowercase().collect::<String>() + c.as_str(),
        None => String::new(),
    }
}

impl MockClient {
    fn generic(&self, template: &AugmentationTemplate, input: &str) -> String {
        let mut rng = self.rng_for(template.name, input);
        match template.name {
            "paraphrase" => {
                let mut forms = [
                    "In other words, {q}",
                    "Could you tell me: {q}",
                    "I would like to know: {q}",
                    "Put differently, {q}",
                    "Here is my question: {q}",
                ];
                forms.shuffle(&mut rng);
                (1..=3)
                    .map(|i| {
                        format!(
                            "Paraphrase {i}: \"{}\"",
                            forms[i - 1].replace("{q}", &lower_first(input))
                        )
                    })
                    .collect::<Vec<_>>()
                    .join("\n")
            }
            "perturb" => {
                // shift the last number if there is one, otherwise negate
                let digits: Vec<(usize, &str)> =
                    input.match_indices(|c: char| c.is_ascii_digit()).collect();
                let wrong = match digits.last() {
                    Some(&(pos, d)) => {
                        let new = (d.parse::<u32>().unwrap_or(0) + rng.gen_range(1..9)) % 10;
                        format!("{}{}{}", &input[..pos], new, &input[pos + 1..])
                    }
                    None => format!("It is not the case that {}", lower_first(input)),
                };
                format!("Hallucinated Answer: \"{wrong}\"")
            }
            _ => {
                let q = input.trim_end_matches('?');
                format!(
                    "Correct Answer: \"The accepted answer to '{q}' is the common one.\"\nHallucinated Answer: \"The accepted answer to '{q}' is a rare one.\""
                )
            }
        }
    }
}

impl GenClient for MockClient {
    fn name(&self) -> &str {
        "mock"
    }

    fn complete(&self, system_role: &str, instruction: &str) -> Result<String, ClientError> {
        let fail = |message: String| ClientError {
            client: "mock".into(),
            attempts: 1,
            message,
        };
        let template = ALL
            .iter()
            .find(|t| t.system_role == system_role)
            .ok_or_else(|| fail("unrecognized system role".into()))?;
        let input = slot_value(template, instruction)
            .ok_or_else(|| fail("instruction has no slot line".into()))?;
        if let Some(raw) = self.overrides.get(&input) {
            return Ok(raw.clone());
        }
        let (example_in, example_out) = template_example(template);
        if input == example_in {
            return Ok(example_out);
        }
        Ok(self.generic(template, &input))
    }
}

/// Settings for an OpenAI-compatible chat completions endpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HttpClientConfig {
    pub base_url: String,
    pub model: String,
    /// Environment variable holding the bearer token.
    pub api_key_env: String,
    pub temperature: f64,
    pub timeout_ms: u64,
    pub retry: RetryPolicy,
}

impl Default for HttpClientConfig {
    fn default() -> Self {
        Self {
            base_url: "https://api.openai.com/v1".into(),
            model: "gpt-4o-mini".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            temperature: 0.7,
            timeout_ms: 60_000,
            retry: RetryPolicy {
                max_attempts: 3,
                ..RetryPolicy::default()
            },
        }
    }
}

pub struct HttpGenClient {
    name: String,
    config: HttpClientConfig,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl HttpGenClient {
    pub fn new(config: HttpClientConfig) -> Self {
        let api_key = std::env::var(&config.api_key_env).ok();
        Self {
            name: format!("http:{}", config.model),
            agent: ureq::AgentBuilder::new()
                .timeout(Duration::from_millis(config.timeout_ms))
                .build(),
            api_key,
            config,
        }
    }
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

impl GenClient for HttpGenClient {
    fn name(&self) -> &str {
        &self.name
    }

    fn complete(&self, system_role: &str, instruction: &str) -> Result<String, ClientError> {
        let url = format!(
            "{}/chat/completions",
            self.config.base_url.trim_end_matches('/')
        );
        let body = serde_json::json!({
            "model": self.config.model,
            "temperature": self.config.temperature,
            "messages": [
                {"role": "system", "content": system_role},
                {"role": "user", "content": instruction},
            ],
        });
        let resp = with_retry(&self.config.retry, |_| {
            let mut req = self.agent.post(&url);
            if let Some(key) = &self.api_key {
                req = req.set("Authorization", &format!("Bearer {key}"));
            }
            let r = req.send_json(&body).map_err(|e| match e {
                ureq::Error::Status(code, _) if code < 500 && code != 429 => {
                    Attempt::Fatal(format!("HTTP {code}"))
                }
                other => Attempt::Retry(other.to_string()),
            })?;
            r.into_json::<ChatResponse>()
                .map_err(|e| Attempt::Retry(format!("unreadable response: {e}")))
        })
        .map_err(|(message, attempts)| ClientError {
            client: self.name.clone(),
            attempts,
            message,
        })?;
        resp.choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| ClientError {
                client: self.name.clone(),
                attempts: 1,
                message: "response has no choices".into(),
            })
    }
}

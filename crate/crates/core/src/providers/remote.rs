//! HTTP client for an external inference server.
//!
//! Wire protocol (JSON bodies):
//!
//! * `GET  {base}/vocab`  -> `{"tokens": [..], "vocab_hash": "..", "eos_token_id": n?, "join": "space"|"concat"?}`
//! * `POST {base}/logits` with `{"context": "..", "want": "last_token_logits"}`
//!   -> `{"logits": [..], "vocab_hash": ".."}`
//!
//! `vocab_hash` is [`Vocabulary::content_hash`] of the served token list. The
//! hash seen at connect time is pinned for the session; any later response
//! reporting a different hash is rejected.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{LogitProvider, ProviderError, ProviderInfo, TokenJoin};
use crate::retry::{with_retry, Attempt, RetryPolicy};
use crate::vocab::{LogitVector, TokenId, Vocabulary};

pub const VOCAB_PATH: &str = "/vocab";
pub const LOGITS_PATH: &str = "/logits";
const WANT_LAST_TOKEN: &str = "last_token_logits";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RemoteConfig {
    pub timeout_ms: u64,
    pub retry: RetryPolicy,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            timeout_ms: 30_000,
            retry: RetryPolicy::default(),
        }
    }
}

#[derive(Serialize)]
struct LogitsRequest<'a> {
    context: &'a str,
    want: &'static str,
}

#[derive(Deserialize)]
struct LogitsResponse {
    logits: Vec<f64>,
    vocab_hash: String,
}

#[derive(Deserialize)]
struct VocabResponse {
    tokens: Vec<String>,
    vocab_hash: String,
    #[serde(default)]
    eos_token_id: Option<TokenId>,
    #[serde(default)]
    join: TokenJoin,
}

pub struct RemoteProvider {
    base_url: String,
    agent: ureq::Agent,
    config: RemoteConfig,
    vocab: Vocabulary,
    vocab_hash: String,
    eos: Option<TokenId>,
    join: TokenJoin,
}

impl std::fmt::Debug for RemoteProvider {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteProvider")
            .field("base_url", &self.base_url)
            .field("vocab_hash", &self.vocab_hash)
            .finish()
    }
}

fn classify(err: ureq::Error) -> Attempt<String> {
    match err {
        ureq::Error::Status(code, resp) => {
            let msg = format!("HTTP {code} from {}", resp.get_url());
            if code >= 500 || code == 429 {
                Attempt::Retry(msg)
            } else {
                Attempt::Fatal(msg)
            }
        }
        ureq::Error::Transport(t) => Attempt::Retry(t.to_string()),
    }
}

fn transport((message, attempts): (String, u32)) -> ProviderError {
    ProviderError::Transport { attempts, message }
}

impl RemoteProvider {
    /// Fetches and pins the server's vocabulary.
    pub fn connect(base_url: &str, config: RemoteConfig) -> Result<Self, ProviderError> {
        let base_url = base_url.trim_end_matches('/').to_string();
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build();
        let url = format!("{base_url}{VOCAB_PATH}");
        let body = with_retry(&config.retry, |_| {
            agent
                .get(&url)
                .call()
                .map_err(classify)?
                .into_string()
                .map_err(|e| Attempt::Retry(e.to_string()))
        })
        .map_err(transport)?;
        let resp: VocabResponse = serde_json::from_str(&body)
            .map_err(|e| ProviderError::SchemaViolation(format!("{VOCAB_PATH}: {e}")))?;
        let vocab = Vocabulary::new(base_url.clone(), resp.tokens)?;
        let computed = vocab.content_hash();
        if computed != resp.vocab_hash {
            return Err(ProviderError::VocabHashMismatch {
                expected: computed,
                actual: resp.vocab_hash,
            });
        }
        if let Some(eos) = resp.eos_token_id {
            if eos >= vocab.len() {
                return Err(ProviderError::SchemaViolation(format!(
                    "eos_token_id {eos} outside vocabulary of {}",
                    vocab.len()
                )));
            }
        }
        Ok(Self {
            base_url,
            agent,
            config,
            vocab,
            vocab_hash: computed,
            eos: resp.eos_token_id,
            join: resp.join,
        })
    }

    pub fn vocab_hash(&self) -> &str {
        &self.vocab_hash
    }

    /// Checks one response body against the schema and the pinned vocabulary.
    fn decode_response(&self, body: &str) -> Result<LogitVector, ProviderError> {
        let resp: LogitsResponse = serde_json::from_str(body)
            .map_err(|e| ProviderError::SchemaViolation(format!("{LOGITS_PATH}: {e}")))?;
        if resp.vocab_hash != self.vocab_hash {
            return Err(ProviderError::VocabHashMismatch {
                expected: self.vocab_hash.clone(),
                actual: resp.vocab_hash,
            });
        }
        if resp.logits.len() != self.vocab.len() {
            return Err(ProviderError::SchemaViolation(format!(
                "expected {} logits, got {}",
                self.vocab.len(),
                resp.logits.len()
            )));
        }
        LogitVector::new(resp.logits).map_err(|e| ProviderError::SchemaViolation(e.to_string()))
    }
}

impl LogitProvider for RemoteProvider {
    fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    fn logits(&self, context: &str) -> Result<LogitVector, ProviderError> {
        let url = format!("{}{LOGITS_PATH}", self.base_url);
        let request = LogitsRequest {
            context,
            want: WANT_LAST_TOKEN,
        };
        let body = with_retry(&self.config.retry, |_| {
            self.agent
                .post(&url)
                .send_json(&request)
                .map_err(classify)?
                .into_string()
                .map_err(|e| Attempt::Retry(e.to_string()))
        })
        .map_err(transport)?;
        self.decode_response(&body)
    }

    fn eos_token_id(&self) -> Option<TokenId> {
        self.eos
    }

    fn token_join(&self) -> TokenJoin {
        self.join
    }

    fn describe(&self) -> ProviderInfo {
        ProviderInfo {
            kind: "remote".into(),
            label: self.base_url.clone(),
            vocab_size: self.vocab.len(),
            vocab_hash: self.vocab_hash.clone(),
            exclusive: false,
        }
    }
}

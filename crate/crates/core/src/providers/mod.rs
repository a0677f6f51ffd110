//! Anything that maps a text context to next-token logits over a fixed
//! vocabulary.
//!
//! Providers receive raw context text and tokenize it themselves, so models
//! with different tokenizers can be queried on the identical context.

mod micro;
mod remote;
mod table;

use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::micro_lm::MicroLmError;
use crate::vocab::{LogitVector, TokenId, VocabError, Vocabulary};

pub use micro::MicroLmProvider;
pub use remote::{RemoteConfig, RemoteProvider, LOGITS_PATH, VOCAB_PATH};
pub use table::{TableFile, TableProvider};

#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("no logits stored for context {0:?} and no default vector")]
    UnknownContext(String),
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("response violates the wire schema: {0}")]
    SchemaViolation(String),
    #[error("remote vocabulary hash changed: session started with {expected}, server now reports {actual}")]
    VocabHashMismatch { expected: String, actual: String },
    #[error("bad provider spec `{0}`")]
    BadSpec(String),
    #[error("table provider: {0}")]
    Table(String),
    #[error(transparent)]
    Model(#[from] MicroLmError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// How an emitted token is appended to the running context text.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenJoin {
    /// Word-level vocabularies: tokens are separated by one space.
    #[default]
    Space,
    /// Subword vocabularies whose surfaces already carry their spacing.
    Concat,
}

impl TokenJoin {
    pub fn append(self, context: &str, token: &str) -> String {
        match self {
            TokenJoin::Space if !context.is_empty() => format!("{context} {token}"),
            _ => format!("{context}{token}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProviderInfo {
    pub kind: String,
    pub label: String,
    pub vocab_size: usize,
    pub vocab_hash: String,
    /// When set, callers must not invoke `logits` concurrently.
    pub exclusive: bool,
}

pub trait LogitProvider: Send + Sync {
    fn vocabulary(&self) -> &Vocabulary;

    /// Next-token logits after `context`; length equals the vocabulary size.
    fn logits(&self, context: &str) -> Result<LogitVector, ProviderError>;

    fn eos_token_id(&self) -> Option<TokenId>;

    fn token_join(&self) -> TokenJoin {
        TokenJoin::Space
    }

    fn describe(&self) -> ProviderInfo;

    /// Context text after emitting `id`. The end-of-sequence token adds nothing.
    fn append_token(&self, context: &str, id: TokenId) -> String {
        if Some(id) == self.eos_token_id() {
            return context.to_string();
        }
        match self.vocabulary().token(id) {
            Some(tok) => self.token_join().append(context, tok),
            None => context.to_string(),
        }
    }
}

impl<P: LogitProvider + ?Sized> LogitProvider for Arc<P> {
    fn vocabulary(&self) -> &Vocabulary {
        (**self).vocabulary()
    }
    fn logits(&self, context: &str) -> Result<LogitVector, ProviderError> {
        (**self).logits(context)
    }
    fn eos_token_id(&self) -> Option<TokenId> {
        (**self).eos_token_id()
    }
    fn token_join(&self) -> TokenJoin {
        (**self).token_join()
    }
    fn describe(&self) -> ProviderInfo {
        (**self).describe()
    }
}

impl<P: LogitProvider + ?Sized> LogitProvider for Box<P> {
    fn vocabulary(&self) -> &Vocabulary {
        (**self).vocabulary()
    }
    fn logits(&self, context: &str) -> Result<LogitVector, ProviderError> {
        (**self).logits(context)
    }
    fn eos_token_id(&self) -> Option<TokenId> {
        (**self).eos_token_id()
    }
    fn token_join(&self) -> TokenJoin {
        (**self).token_join()
    }
    fn describe(&self) -> ProviderInfo {
        (**self).describe()
    }
}

/// Parsed provider address.
///
/// * `table:<file.json>` - a [`TableProvider`] file
/// * `lm:<model.json>` or `lm:<model.json>+<adapter.json>` - a micro-LM,
///   optionally with an adapter checkpoint
/// * `http://...` / `https://...` - a [`RemoteProvider`] base URL
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ProviderSpec {
    Table(PathBuf),
    MicroLm {
        model: PathBuf,
        adapter: Option<PathBuf>,
    },
    Remote(String),
}

impl ProviderSpec {
    pub fn parse(spec: &str) -> Result<Self, ProviderError> {
        if let Some(path) = spec.strip_prefix("table:") {
            if path.is_empty() {
                return Err(ProviderError::BadSpec(spec.to_string()));
            }
            return Ok(Self::Table(PathBuf::from(path)));
        }
        if let Some(rest) = spec.strip_prefix("lm:") {
            let (model, adapter) = match rest.split_once('+') {
                Some((m, a)) => (m, Some(PathBuf::from(a))),
                None => (rest, None),
            };
            if model.is_empty() || adapter.as_ref().is_some_and(|a| a.as_os_str().is_empty()) {
                return Err(ProviderError::BadSpec(spec.to_string()));
            }
            return Ok(Self::MicroLm {
                model: PathBuf::from(model),
                adapter,
            });
        }
        if spec.starts_with("http://") || spec.starts_with("https://") {
            return Ok(Self::Remote(spec.trim_end_matches('/').to_string()));
        }
        Err(ProviderError::BadSpec(spec.to_string()))
    }

    pub fn open(&self, remote: &RemoteConfig) -> Result<Box<dyn LogitProvider>, ProviderError> {
        Ok(match self {
            Self::Table(path) => Box::new(TableProvider::load(path)?),
            Self::MicroLm { model, adapter } => {
                Box::new(MicroLmProvider::load(model, adapter.as_deref())?)
            }
            Self::Remote(url) => Box::new(RemoteProvider::connect(url, remote.clone())?),
        })
    }
}

impl std::fmt::Display for ProviderSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Table(p) => write!(f, "table:{}", p.display()),
            Self::MicroLm {
                model,
                adapter: None,
            } => write!(f, "lm:{}", model.display()),
            Self::MicroLm {
                model,
                adapter: Some(a),
            } => write!(f, "lm:{}+{}", model.display(), a.display()),
            Self::Remote(url) => f.write_str(url),
        }
    }
}

impl TryFrom<String> for ProviderSpec {
    type Error = ProviderError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        Self::parse(&s)
    }
}

impl From<ProviderSpec> for String {
    fn from(s: ProviderSpec) -> String {
        s.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_parsing() {
        assert_eq!(
            ProviderSpec::parse("table:t.json").unwrap(),
            ProviderSpec::Table("t.json".into())
        );
        assert_eq!(
            ProviderSpec::parse("lm:base.json+fap.json").unwrap(),
            ProviderSpec::MicroLm {
                model: "base.json".into(),
                adapter: Some("fap.json".into())
            }
        );
        assert_eq!(
            ProviderSpec::parse("http://localhost:8080/").unwrap(),
            ProviderSpec::Remote("http://localhost:8080".into())
        );
        assert!(ProviderSpec::parse("ftp://x").is_err());
        assert!(ProviderSpec::parse("lm:m.json+").is_err());
        for s in ["table:a", "lm:m", "lm:m+a", "https://h:1"] {
            assert_eq!(ProviderSpec::parse(s).unwrap().to_string(), s);
        }
    }

    #[test]
    fn join_modes() {
        assert_eq!(TokenJoin::Space.append("", "a"), "a");
        assert_eq!(TokenJoin::Space.append("q", "a"), "q a");
        assert_eq!(TokenJoin::Concat.append("q", " a"), "q a");
    }
}

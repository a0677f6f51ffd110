//! Token vocabularies, logit/steering vectors and the shared-vocabulary
//! projection that carries a proxy-space steering signal into the target's
//! token space.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub type TokenId = usize;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VocabError {
    #[error("vocabulary `{name}` contains duplicate token {token:?} (ids {first} and {second})")]
    DuplicateToken {
        name: String,
        token: String,
        first: TokenId,
        second: TokenId,
    },
    #[error("vocabulary `{0}` is empty")]
    Empty(String),
    #[error("proxy vocabulary `{proxy}` and target vocabulary `{target}` share no tokens")]
    EmptyIntersection { proxy: String, target: String },
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("non-finite value {value} at index {index}")]
    NonFinite { index: usize, value: f64 },
    #[error("bad escape sequence on token line {line}: {detail}")]
    BadEscape { line: usize, detail: String },
    #[error("i/o error reading vocabulary: {0}")]
    Io(String),
}

/// An ordered set of unique token surface strings. Id `i` is `tokens[i]`.
#[derive(Clone, PartialEq, Eq)]
pub struct Vocabulary {
    name: String,
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl fmt::Debug for Vocabulary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Vocabulary")
            .field("name", &self.name)
            .field("size", &self.tokens.len())
            .finish()
    }
}

impl Vocabulary {
    pub fn new<S: Into<String>>(
        name: impl Into<String>,
        tokens: impl IntoIterator<Item = S>,
    ) -> Result<Self, VocabError> {
        let name = name.into();
        let tokens: Vec<String> = tokens.into_iter().map(Into::into).collect();
        if tokens.is_empty() {
            return Err(VocabError::Empty(name));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if let Some(&first) = index.get(tok) {
                return Err(VocabError::DuplicateToken {
                    name,
                    token: tok.clone(),
                    first,
                    second: id,
                });
            }
            index.insert(tok.clone(), id);
        }
        Ok(Self {
            name,
            tokens,
            index,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn id_of(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    /// SHA-256 over the length-prefixed token bytes, in id order, hex encoded.
    ///
    /// Each token contributes its byte length as a little-endian `u64`
    /// followed by its bytes, so no separator can collide with token content.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for tok in &self.tokens {
            hasher.update((tok.len() as u64).to_le_bytes());
            hasher.update(tok.as_bytes());
        }
        hex::encode(hasher.finalize())
    }

    /// Parses the newline-delimited token file format: one token per line,
    /// with `\\`, `\n`, `\r` and `\t` escapes.
    pub fn parse_token_lines(name: impl Into<String>, text: &str) -> Result<Self, VocabError> {
        let mut tokens = Vec::new();
        // a single trailing newline terminates the file, it does not add a token
        let body = text.strip_suffix('\n').unwrap_or(text);
        let lines = if text.is_empty() {
            None
        } else {
            Some(body.split('\n'))
        };
        for (lineno, line) in lines.into_iter().flatten().enumerate() {
            tokens.push(
                unescape_token(line).map_err(|detail| VocabError::BadEscape {
                    line: lineno + 1,
                    detail,
                })?,
            );
        }
        Self::new(name, tokens)
    }

    pub fn to_token_lines(&self) -> String {
        let mut out = String::new();
        for tok in &self.tokens {
            out.push_str(&escape_token(tok));
            out.push('\n');
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self, VocabError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| VocabError::Io(format!("{}: {e}", path.display())))?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "vocab".to_string());
        Self::parse_token_lines(name, &text)
    }

    pub fn save(&self, path: &Path) -> Result<(), VocabError> {
        std::fs::write(path, self.to_token_lines())
            .map_err(|e| VocabError::Io(format!("{}: {e}", path.display())))
    }
}

pub fn escape_token(tok: &str) -> String {
    let mut out = String::with_capacity(tok.len());
    for ch in tok.chars() {
        match ch {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            c => out.push(c),
        }
    }
    out
}

pub fn unescape_token(line: &str) -> Result<String, String> {
    let mut out = String::with_capacity(line.len());
    let mut chars = line.chars();
    while let Some(ch) = chars.next() {
        if ch != '\\' {
            out.push(ch);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            Some('t') => out.push('\t'),
            Some(other) => return Err(format!("unknown escape `\\{other}`")),
            None => return Err("dangling backslash".to_string()),
        }
    }
    Ok(out)
}

/// Real-valued score per token id. Always finite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LogitVector(Vec<f64>);

impl LogitVector {
    pub fn new(values: Vec<f64>) -> Result<Self, VocabError> {
        check_finite(&values)?;
        Ok(Self(values))
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn vocab_size(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn expect_size(&self, expected: usize) -> Result<(), VocabError> {
        if self.0.len() != expected {
            return Err(VocabError::DimensionMismatch {
                expected,
                actual: self.0.len(),
            });
        }
        Ok(())
    }
}

/// Per-token steering offsets, either over the proxy vocabulary or projected
/// onto the target vocabulary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SteeringVector(Vec<f64>);

impl SteeringVector {
    pub fn new(values: Vec<f64>) -> Result<Self, VocabError> {
        check_finite(&values)?;
        Ok(Self(values))
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn vocab_size(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

fn check_finite(values: &[f64]) -> Result<(), VocabError> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(VocabError::NonFinite {
            index,
            value: values[index],
        }),
        None => Ok(()),
    }
}

/// How token surfaces are compared when building a [`SharedVocabMap`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenMatch {
    /// Byte-identical surfaces only.
    #[default]
    Exact,
    /// Strips leading word-boundary markers (`' '`, `'▁'`, `'Ġ'`) and
    /// trailing whitespace before comparing. When several tokens normalize to
    /// the same key the lowest id on each side wins.
    Normalized,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SharedMapOptions {
    pub matching: TokenMatch,
    pub allow_empty: bool,
}

fn normalize_token(tok: &str) -> &str {
    tok.trim_start_matches([' ', '\u{2581}', '\u{0120}'])
        .trim_end()
}

/// Pairs of (proxy id, target id) whose surfaces match, sorted by target id.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SharedVocabMap {
    pairs: Vec<(TokenId, TokenId)>,
    proxy_size: usize,
    target_size: usize,
}

impl SharedVocabMap {
    pub fn pairs(&self) -> &[(TokenId, TokenId)] {
        &self.pairs
    }

    pub fn proxy_size(&self) -> usize {
        self.proxy_size
    }

    pub fn target_size(&self) -> usize {
        self.target_size
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// The target ids that receive steering.
    pub fn shared_target_ids(&self) -> impl Iterator<Item = TokenId> + '_ {
        self.pairs.iter().map(|&(_, t)| t)
    }
}

pub fn build_shared_map(
    proxy: &Vocabulary,
    target: &Vocabulary,
) -> Result<SharedVocabMap, VocabError> {
    build_shared_map_with(proxy, target, SharedMapOptions::default())
}

pub fn build_shared_map_with(
    proxy: &Vocabulary,
    target: &Vocabulary,
    options: SharedMapOptions,
) -> Result<SharedVocabMap, VocabError> {
    let pairs: Vec<(TokenId, TokenId)> = match options.matching {
        TokenMatch::Exact => target
            .tokens()
            .iter()
            .enumerate()
            .filter_map(|(tid, tok)| proxy.id_of(tok).map(|pid| (pid, tid)))
            .collect(),
        TokenMatch::Normalized => {
            let mut proxy_keys: HashMap<&str, TokenId> = HashMap::new();
            for (pid, tok) in proxy.tokens().iter().enumerate() {
                proxy_keys.entry(normalize_token(tok)).or_insert(pid);
            }
            let mut seen_keys = std::collections::HashSet::new();
            target
                .tokens()
                .iter()
                .enumerate()
                .filter_map(|(tid, tok)| {
                    let key = normalize_token(tok);
                    let pid = *proxy_keys.get(key)?;
                    seen_keys.insert(key).then_some((pid, tid))
                })
                .collect()
        }
    };
    if pairs.is_empty() && !options.allow_empty {
        return Err(VocabError::EmptyIntersection {
            proxy: proxy.name().to_string(),
            target: target.name().to_string(),
        });
    }
    Ok(SharedVocabMap {
        pairs,
        proxy_size: proxy.len(),
        target_size: target.len(),
    })
}

/// Carries a proxy-space steering vector into target space. Target ids with
/// no proxy counterpart get exactly `0.0`.
pub fn project_steering(
    g: &SteeringVector,
    map: &SharedVocabMap,
) -> Result<SteeringVector, VocabError> {
    if g.vocab_size() != map.proxy_size {
        return Err(VocabError::DimensionMismatch {
            expected: map.proxy_size,
            actual: g.vocab_size(),
        });
    }
    let mut out = vec![0.0; map.target_size];
    for &(pid, tid) in &map.pairs {
        out[tid] = g.values()[pid];
    }
    Ok(SteeringVector(out))
}

/// Memoizes shared maps per (proxy, target) vocabulary content hash.
#[derive(Default)]
pub struct SharedMapCache {
    maps: Mutex<HashMap<(String, String, SharedMapOptions), Arc<SharedVocabMap>>>,
}

impl std::hash::Hash for SharedMapOptions {
    fn hash<H: std::hash::Hasher>(&self, state: &mut H) {
        (self.matching as u8).hash(state);
        self.allow_empty.hash(state);
    }
}

impl SharedMapCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get_or_build(
        &self,
        proxy: &Vocabulary,
        target: &Vocabulary,
        options: SharedMapOptions,
    ) -> Result<Arc<SharedVocabMap>, VocabError> {
        let key = (proxy.content_hash(), target.content_hash(), options);
        let mut maps = self.maps.lock().expect("shared map cache poisoned");
        if let Some(map) = maps.get(&key) {
            return Ok(Arc::clone(map));
        }
        let map = Arc::new(build_shared_map_with(proxy, target, options)?);
        maps.insert(key, Arc::clone(&map));
        Ok(map)
    }

    pub fn len(&self) -> usize {
        self.maps.lock().expect("shared map cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

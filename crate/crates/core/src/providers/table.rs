use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LogitProvider, ProviderError, ProviderInfo, TokenJoin};
use crate::vocab::{LogitVector, TokenId, Vocabulary};

/// Fixed context -> logits lookup, used as a test double and for
/// hand-constructed scenarios.
#[derive(Clone, Debug)]
pub struct TableProvider {
    label: String,
    vocab: Vocabulary,
    eos: Option<TokenId>,
    entries: HashMap<String, LogitVector>,
    default: Option<LogitVector>,
    join: TokenJoin,
}

/// On-disk form of a [`TableProvider`].
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TableFile {
    pub tokens: Vec<String>,
    #[serde(default)]
    pub eos_token_id: Option<TokenId>,
    #[serde(default)]
    pub join: TokenJoin,
    #[serde(default)]
    pub default: Option<Vec<f64>>,
    #[serde(default)]
    pub entries: HashMap<String, Vec<f64>>,
}

impl TableProvider {
    pub fn new(label: impl Into<String>, vocab: Vocabulary, eos: Option<TokenId>) -> Self {
        Self {
            label: label.into(),
            vocab,
            eos,
            entries: HashMap::new(),
            default: None,
            join: TokenJoin::Space,
        }
    }

    fn check(&self, v: &LogitVector) -> Result<(), ProviderError> {
        v.expect_size(self.vocab.len())
            .map_err(|e| ProviderError::Table(format!("{}: {e}", self.label)))
    }

    pub fn insert(
        &mut self,
        context: impl Into<String>,
        logits: LogitVector,
    ) -> Result<(), ProviderError> {
        self.check(&logits)?;
        self.entries.insert(context.into(), logits);
        Ok(())
    }

    pub fn with_entry(
        mut self,
        context: impl Into<String>,
        values: Vec<f64>,
    ) -> Result<Self, ProviderError> {
        self.insert(context, LogitVector::new(values)?)?;
        Ok(self)
    }

    pub fn with_default(mut self, values: Vec<f64>) -> Result<Self, ProviderError> {
        let v = LogitVector::new(values)?;
        self.check(&v)?;
        self.default = Some(v);
        Ok(self)
    }

    pub fn with_join(mut self, join: TokenJoin) -> Self {
        self.join = join;
        self
    }

    pub fn from_file(label: impl Into<String>, file: TableFile) -> Result<Self, ProviderError> {
        let label = label.into();
        let vocab = Vocabulary::new(label.clone(), file.tokens)?;
        if let Some(eos) = file.eos_token_id {
            if eos >= vocab.len() {
                return Err(ProviderError::Table(format!(
                    "eos id {eos} outside vocabulary of {}",
                    vocab.len()
                )));
            }
        }
        let mut table = Self::new(label, vocab, file.eos_token_id).with_join(file.join);
        if let Some(d) = file.default {
            table = table.with_default(d)?;
        }
        for (ctx, values) in file.entries {
            table.insert(ctx, LogitVector::new(values)?)?;
        }
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<Self, ProviderError> {
        let file: TableFile = serde_json::from_slice(&std::fs::read(path)?)
            .map_err(|e| ProviderError::Table(format!("{}: {e}", path.display())))?;
        Self::from_file(path.display().to_string(), file)
    }

    pub fn to_file(&self) -> TableFile {
        TableFile {
            tokens: self.vocab.tokens().to_vec(),
            eos_token_id: self.eos,
            join: self.join,
            default: self.default.as_ref().map(|d| d.values().to_vec()),
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), v.values().to_vec()))
                .collect(),
        }
    }
}

impl LogitProvider for TableProvider {
    fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    fn logits(&self, context: &str) -> Result<LogitVector, ProviderError> {
        self.entries
            .get(context)
            .or(self.default.as_ref())
            .cloned()
            .ok_or_else(|| ProviderError::UnknownContext(context.to_string()))
    }

    fn eos_token_id(&self) -> Option<TokenId> {
        self.eos
    }

    fn token_join(&self) -> TokenJoin {
        self.join
    }

    fn describe(&self) -> ProviderInfo {
        ProviderInfo {
            kind: "table".into(),
            label: self.label.clone(),
            vocab_size: self.vocab.len(),
            vocab_hash: self.vocab.content_hash(),
            exclusive: false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn abc() -> Vocabulary {
        Vocabulary::new("abc", ["a", "b", "c"]).unwrap()
    }

    #[test]
    fn stored_context_returned() {
        let t = TableProvider::new("t", abc(), None)
            .with_entry("Q1", vec![1.0, 0.0, 0.0])
            .unwrap();
        assert_eq!(t.logits("Q1").unwrap().values(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn default_used_for_unknown_context() {
        let t = TableProvider::new("t", abc(), None)
            .with_entry("Q1", vec![1.0, 0.0, 0.0])
            .unwrap()
            .with_default(vec![0.0, 0.0, 0.0])
            .unwrap();
        assert_eq!(t.logits("other").unwrap().values(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn unknown_context_without_default_errors() {
        let t = TableProvider::new("t", abc(), None);
        assert!(matches!(t.logits("Q2"), Err(ProviderError::UnknownContext(c)) if c == "Q2"));
    }

    #[test]
    fn wrong_length_rejected() {
        let err = TableProvider::new("t", abc(), None)
            .with_entry("x", vec![1.0])
            .unwrap_err();
        assert!(matches!(err, ProviderError::Table(_)));
    }

    #[test]
    fn file_roundtrip() {
        let t = TableProvider::new("t", abc(), Some(2))
            .with_entry("x", vec![0.5, 1.5, -2.0])
            .unwrap()
            .with_default(vec![0.0; 3])
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.json");
        std::fs::write(&path, serde_json::to_vec(&t.to_file()).unwrap()).unwrap();
        let back = TableProvider::load(&path).unwrap();
        assert_eq!(back.logits("x").unwrap(), t.logits("x").unwrap());
        assert_eq!(back.eos_token_id(), Some(2));
        assert_eq!(back.append_token("x", 1), "x b");
        assert_eq!(back.append_token("x", 2), "x");
    }
}

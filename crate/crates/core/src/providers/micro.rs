use std::path::Path;
use std::sync::Arc;

use super::{LogitProvider, ProviderError, ProviderInfo};
use crate::micro_lm::{load_checkpoint, LowRankAdapter, MicroLM, Projections};
use crate::vocab::{LogitVector, TokenId, Vocabulary};

/// A local micro-LM, optionally with an adapter attached.
#[derive(Clone, Debug)]
pub struct MicroLmProvider {
    label: String,
    model: Arc<MicroLM>,
    proj: Projections,
}

impl MicroLmProvider {
    pub fn new(
        label: impl Into<String>,
        model: Arc<MicroLM>,
        adapter: Option<&LowRankAdapter>,
    ) -> Result<Self, ProviderError> {
        let proj = model.projections(adapter)?;
        Ok(Self {
            label: label.into(),
            model,
            proj,
        })
    }

    pub fn load(model_path: &Path, adapter_path: Option<&Path>) -> Result<Self, ProviderError> {
        let model = Arc::new(MicroLM::load(model_path)?);
        let ckpt = adapter_path.map(load_checkpoint).transpose()?;
        let label = match adapter_path {
            Some(a) => format!("{}+{}", model_path.display(), a.display()),
            None => model_path.display().to_string(),
        };
        Self::new(label, model, ckpt.as_ref().map(|c| &c.adapter))
    }

    pub fn model(&self) -> &MicroLM {
        &self.model
    }
}

impl LogitProvider for MicroLmProvider {
    fn vocabulary(&self) -> &Vocabulary {
        self.model.vocabulary()
    }

    fn logits(&self, context: &str) -> Result<LogitVector, ProviderError> {
        let ids = self.model.tokenize(context);
        let (logits, _) = self.model.forward_ids(&self.proj, &ids)?;
        Ok(LogitVector::new(logits.to_vec())?)
    }

    fn eos_token_id(&self) -> Option<TokenId> {
        Some(self.model.eos_id())
    }

    fn describe(&self) -> ProviderInfo {
        ProviderInfo {
            kind: "micro_lm".into(),
            label: self.label.clone(),
            vocab_size: self.model.vocabulary().len(),
            vocab_hash: self.model.vocabulary().content_hash(),
            exclusive: false,
        }
    }
}

//! A single-block autoregressive toy language model with low-rank adapters
//! on its query and value projections.
//!
//! For a context of token ids `x_1..x_n` the last-position logits are
//!
//! ```text
//! e_i   = E[x_i]
//! u     = P_q' e_n                     (query from the last token)
//! a     = softmax_i(u . e_i / sqrt(d))  (causal attention over the context)
//! c     = P_v' sum_i a_i e_i
//! h     = tanh(M (e_n + c) + b_m)
//! logits = W h + b_o
//! ```
//!
//! where `P' = P + (alpha / r) A B` when an adapter is attached. Only the
//! last position is ever computed, so causality holds by construction.

mod adapter;
mod checkpoint;
mod train;

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::vocab::{LogitVector, TokenId, VocabError, Vocabulary};

pub use adapter::{
    adapter_loss, grad_adapter, AdapterObjective, LoraPair, LoraTensors, LowRankAdapter,
};
pub use checkpoint::{
    load_checkpoint, load_checkpoint_expecting, save_checkpoint, AdapterCheckpoint, AdapterRole,
    CheckpointMeta, CHECKPOINT_FORMAT, CHECKPOINT_VERSION,
};
pub use train::{
    completion_positions, pretrain, train_adapter_cross_entropy, CrossEntropyObjective,
    PretrainConfig, SgdConfig, TrainingPosition,
};

pub(crate) use train::batches;

pub const UNK_TOKEN: &str = "<unk>";
pub const EOS_TOKEN: &str = "<eos>";
pub const UNK_ID: TokenId = 0;

const MODEL_FORMAT: &str = "proxysteer.micro_lm";
const MODEL_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum MicroLmError {
    #[error("context contains no tokens")]
    EmptyContext,
    #[error("gradient contains a non-finite value in `{0}`")]
    NonFiniteGradient(&'static str),
    #[error("checkpoint content hash mismatch: stored {stored}, computed {computed}")]
    HashMismatch { stored: String, computed: String },
    #[error("incompatible checkpoint: {0}")]
    VersionMismatch(String),
    #[error("malformed model file: {0}")]
    Malformed(String),
    #[error("vocabulary must reserve `{UNK_TOKEN}` at id 0 and contain `{EOS_TOKEN}`")]
    MissingSpecialTokens,
    #[error("adapter shape does not fit model: {0}")]
    ShapeMismatch(String),
    #[error("frozen adapter `{0}` cannot be trained further")]
    Frozen(String),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MicroLmConfig {
    pub d_model: usize,
    pub d_hidden: usize,
    pub seed: u64,
    pub init_range: f64,
}

impl Default for MicroLmConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            d_hidden: 64,
            seed: 0,
            init_range: 0.05,
        }
    }
}

/// Builds a model vocabulary with the reserved `<unk>` / `<eos>` ids 0 and 1
/// followed by `words` in order (duplicates of the reserved tokens skipped).
pub fn model_vocabulary<S: AsRef<str>>(
    name: &str,
    words: impl IntoIterator<Item = S>,
) -> Result<Vocabulary, VocabError> {
    let mut tokens = vec![UNK_TOKEN.to_string(), EOS_TOKEN.to_string()];
    for w in words {
        let w = w.as_ref();
        if w != UNK_TOKEN && w != EOS_TOKEN {
            tokens.push(w.to_string());
        }
    }
    Vocabulary::new(name, tokens)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MicroLM {
    vocab: Vocabulary,
    eos_id: TokenId,
    config: MicroLmConfig,
    pub(crate) params: BaseParams,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct BaseParams {
    pub embed: Array2<f64>,
    pub p_q: Array2<f64>,
    pub p_v: Array2<f64>,
    pub mix: Array2<f64>,
    pub mix_bias: Array1<f64>,
    pub out: Array2<f64>,
    pub out_bias: Array1<f64>,
}

impl BaseParams {
    fn tensors(&self) -> [(&'static str, &Array2<f64>); 5] {
        [
            ("embed", &self.embed),
            ("p_q", &self.p_q),
            ("p_v", &self.p_v),
            ("mix", &self.mix),
            ("out", &self.out),
        ]
    }

    pub(crate) fn count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum::<usize>()
            + self.mix_bias.len()
            + self.out_bias.len()
    }
}

/// Effective query/value projections for one adapter state.
#[derive(Clone, Debug)]
pub struct Projections {
    pub(crate) p_q: Array2<f64>,
    pub(crate) p_v: Array2<f64>,
}

pub(crate) struct ForwardCache {
    ids: Vec<TokenId>,
    attn: Array1<f64>,
    pooled: Array1<f64>,
    query: Array1<f64>,
    z: Array1<f64>,
    hidden: Array1<f64>,
}

/// Gradients of a scalar loss with respect to every base parameter and to
/// the effective projections.
pub(crate) struct FullGrads {
    pub embed: Array2<f64>,
    pub p_q: Array2<f64>,
    pub p_v: Array2<f64>,
    pub mix: Array2<f64>,
    pub mix_bias: Array1<f64>,
    pub out: Array2<f64>,
    pub out_bias: Array1<f64>,
}

impl FullGrads {
    fn zeros(p: &BaseParams) -> Self {
        Self {
            embed: Array2::zeros(p.embed.raw_dim()),
            p_q: Array2::zeros(p.p_q.raw_dim()),
            p_v: Array2::zeros(p.p_v.raw_dim()),
            mix: Array2::zeros(p.mix.raw_dim()),
            mix_bias: Array1::zeros(p.mix_bias.raw_dim()),
            out: Array2::zeros(p.out.raw_dim()),
            out_bias: Array1::zeros(p.out_bias.raw_dim()),
        }
    }
}

fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, range: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-range..range))
}

impl MicroLM {
    pub fn new(vocab: Vocabulary, config: MicroLmConfig) -> Result<Self, MicroLmError> {
        if vocab.token(UNK_ID) != Some(UNK_TOKEN) {
            return Err(MicroLmError::MissingSpecialTokens);
        }
        let eos_id = vocab
            .id_of(EOS_TOKEN)
            .ok_or(MicroLmError::MissingSpecialTokens)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (v, d, h, r) = (
            vocab.len(),
            config.d_model,
            config.d_hidden,
            config.init_range,
        );
        let params = BaseParams {
            embed: uniform_matrix(&mut rng, v, d, r),
            p_q: uniform_matrix(&mut rng, d, d, r),
            p_v: uniform_matrix(&mut rng, d, d, r),
            mix: uniform_matrix(&mut rng, h, d, r),
            mix_bias: Array1::zeros(h),
            out: uniform_matrix(&mut rng, v, h, r),
            out_bias: Array1::zeros(v),
        };
        Ok(Self {
            vocab,
            eos_id,
            config,
            params,
        })
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn eos_id(&self) -> TokenId {
        self.eos_id
    }

    pub fn config(&self) -> &MicroLmConfig {
        &self.config
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    pub fn base_parameter_count(&self) -> usize {
        self.params.count()
    }

    /// Whitespace tokenization; unknown words map to `<unk>`.
    pub fn tokenize(&self, text: &str) -> Vec<TokenId> {
        text.split_whitespace()
            .map(|w| self.vocab.id_of(w).unwrap_or(UNK_ID))
            .collect()
    }

    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .filter_map(|&id| self.vocab.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn projections(
        &self,
        adapter: Option<&LowRankAdapter>,
    ) -> Result<Projections, MicroLmError> {
        match adapter {
            None => Ok(Projections {
                p_q: self.params.p_q.clone(),
                p_v: self.params.p_v.clone(),
            }),
            Some(ad) => {
                ad.check_fits(self.d_model())?;
                Ok(Projections {
                    p_q: &self.params.p_q + &ad.delta_q(),
                    p_v: &self.params.p_v + &ad.delta_v(),
                })
            }
        }
    }

    /// Next-token logits after `context`.
    pub fn forward_last_token(
        &self,
        adapter: Option<&LowRankAdapter>,
        context: &str,
    ) -> Result<LogitVector, MicroLmError> {
        let ids = self.tokenize(context);
        let proj = self.projections(adapter)?;
        let (logits, _) = self.forward_ids(&proj, &ids)?;
        Ok(LogitVector::new(logits.to_vec())?)
    }

    pub(crate) fn forward_ids(
        &self,
        proj: &Projections,
        ids: &[TokenId],
    ) -> Result<(Array1<f64>, ForwardCache), MicroLmError> {
        let &last = ids.last().ok_or(MicroLmError::EmptyContext)?;
        let p = &self.params;
        let scale = (self.config.d_model as f64).sqrt();
        let e_last = p.embed.row(last);
        let query = proj.p_q.dot(&e_last);
        let scores: Array1<f64> = ids
            .iter()
            .map(|&id| p.embed.row(id).dot(&query) / scale)
            .collect();
        let attn = softmax(scores.view());
        let mut pooled = Array1::<f64>::zeros(self.config.d_model);
        for (&id, &w) in ids.iter().zip(attn.iter()) {
            pooled.scaled_add(w, &p.embed.row(id));
        }
        let z = &e_last + &proj.p_v.dot(&pooled);
        let hidden = (p.mix.dot(&z) + &p.mix_bias).mapv(f64::tanh);
        let logits = p.out.dot(&hidden) + &p.out_bias;
        Ok((
            logits,
            ForwardCache {
                ids: ids.to_vec(),
                attn,
                pooled,
                query,
                z,
                hidden,
            },
        ))
    }

    /// Backpropagates `d_logits` through one cached forward pass, accumulating
    /// into `grads`. With `full == false` only the projection gradients are
    /// filled in.
    pub(crate) fn backward(
        &self,
        proj: &Projections,
        cache: &ForwardCache,
        d_logits: ArrayView1<f64>,
        grads: &mut FullGrads,
        full: bool,
    ) {
        let p = &self.params;
        let scale = (self.config.d_model as f64).sqrt();
        let last = *cache
            .ids
            .last()
            .expect("forward cache never holds an empty context");

        let d_hidden = p.out.t().dot(&d_logits);
        let d_pre = &d_hidden * &cache.hidden.mapv(|h| 1.0 - h * h);
        let d_z = p.mix.t().dot(&d_pre);
        if full {
            outer_add(&mut grads.out, d_logits, cache.hidden.view());
            grads.out_bias += &d_logits;
            outer_add(&mut grads.mix, d_pre.view(), cache.z.view());
            grads.mix_bias += &d_pre;
        }

        // z = e_last + P_v pooled
        outer_add(&mut grads.p_v, d_z.view(), cache.pooled.view());
        let d_pooled = proj.p_v.t().dot(&d_z);

        // pooled = sum_i a_i e_i
        let d_attn: Array1<f64> = cache
            .ids
            .iter()
            .map(|&id| p.embed.row(id).dot(&d_pooled))
            .collect();
        let mean_d = cache.attn.dot(&d_attn);
        let d_scores = &cache.attn * &(d_attn - mean_d);

        // scores_i = e_i . query / sqrt(d)
        let mut d_query = Array1::<f64>::zeros(self.config.d_model);
        for (&id, &ds) in cache.ids.iter().zip(d_scores.iter()) {
            d_query.scaled_add(ds / scale, &p.embed.row(id));
        }
        let e_last = p.embed.row(last);
        outer_add(&mut grads.p_q, d_query.view(), e_last);

        if full {
            let mut d_embed = grads.embed.view_mut();
            for ((&id, &w), &ds) in cache.ids.iter().zip(cache.attn.iter()).zip(d_scores.iter()) {
                let mut row = d_embed.row_mut(id);
                row.scaled_add(w, &d_pooled);
                row.scaled_add(ds / scale, &cache.query);
            }
            let mut row = d_embed.row_mut(last);
            row += &d_z;
            row += &proj.p_q.t().dot(&d_query);
        }
    }

    /// Greedy decoding until `<eos>` or `max_new_tokens`. Returns the emitted
    /// ids without the terminating `<eos>`.
    pub fn generate_greedy(
        &self,
        adapter: Option<&LowRankAdapter>,
        prompt: &str,
        max_new_tokens: usize,
    ) -> Result<Vec<TokenId>, MicroLmError> {
        let proj = self.projections(adapter)?;
        let mut ids = self.tokenize(prompt);
        let start = ids.len();
        for _ in 0..max_new_tokens {
            let (logits, _) = self.forward_ids(&proj, &ids)?;
            let next = argmax(logits.view());
            if next == self.eos_id {
                break;
            }
            ids.push(next);
        }
        Ok(ids.split_off(start))
    }

    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(MODEL_FORMAT.as_bytes());
        h.update(MODEL_VERSION.to_le_bytes());
        h.update(self.vocab.content_hash().as_bytes());
        for v in [
            self.config.d_model as u64,
            self.config.d_hidden as u64,
            self.config.seed,
        ] {
            h.update(v.to_le_bytes());
        }
        h.update(self.config.init_range.to_bits().to_le_bytes());
        for (name, t) in self.params.tensors() {
            hash_tensor(&mut h, name, t.shape(), t.iter());
        }
        hash_tensor(
            &mut h,
            "mix_bias",
            self.params.mix_bias.shape(),
            self.params.mix_bias.iter(),
        );
        hash_tensor(
            &mut h,
            "out_bias",
            self.params.out_bias.shape(),
            self.params.out_bias.iter(),
        );
        hex::encode(h.finalize())
    }

    pub fn save(&self, path: &Path) -> Result<(), MicroLmError> {
        let p = &self.params;
        let file = ModelFile {
            format: MODEL_FORMAT.to_string(),
            version: MODEL_VERSION,
            tokens: self.vocab.tokens().to_vec(),
            vocab_name: self.vocab.name().to_string(),
            config: self.config,
            embed: TensorData::from_matrix(&p.embed),
            p_q: TensorData::from_matrix(&p.p_q),
            p_v: TensorData::from_matrix(&p.p_v),
            mix: TensorData::from_matrix(&p.mix),
            mix_bias: p.mix_bias.to_vec(),
            out: TensorData::from_matrix(&p.out),
            out_bias: p.out_bias.to_vec(),
            hash: self.content_hash(),
        };
        std::fs::write(path, serde_json::to_vec(&file)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, MicroLmError> {
        let file: ModelFile = serde_json::from_slice(&std::fs::read(path)?)?;
        if file.format != MODEL_FORMAT || file.version != MODEL_VERSION {
            return Err(MicroLmError::VersionMismatch(format!(
                "expected {MODEL_FORMAT} v{MODEL_VERSION}, found {} v{}",
                file.format, file.version
            )));
        }
        let vocab = Vocabulary::new(file.vocab_name, file.tokens)?;
        let (v, d, h) = (vocab.len(), file.config.d_model, file.config.d_hidden);
        let mut model = MicroLM::new(vocab, file.config)?;
        model.params = BaseParams {
            embed: file.embed.into_matrix((v, d))?,
            p_q: file.p_q.into_matrix((d, d))?,
            p_v: file.p_v.into_matrix((d, d))?,
            mix: file.mix.into_matrix((h, d))?,
            mix_bias: vector_of(file.mix_bias, h)?,
            out: file.out.into_matrix((v, h))?,
            out_bias: vector_of(file.out_bias, v)?,
        };
        let computed = model.content_hash();
        if computed != file.hash {
            return Err(MicroLmError::HashMismatch {
                stored: file.hash,
                computed,
            });
        }
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    vocab_name: String,
    tokens: Vec<String>,
    config: MicroLmConfig,
    embed: TensorData,
    p_q: TensorData,
    p_v: TensorData,
    mix: TensorData,
    mix_bias: Vec<f64>,
    out: TensorData,
    out_bias: Vec<f64>,
    hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub(crate) struct TensorData {
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

impl TensorData {
    pub(crate) fn from_matrix(m: &Array2<f64>) -> Self {
        Self {
            shape: [m.nrows(), m.ncols()],
            data: m.iter().copied().collect(),
        }
    }

    pub(crate) fn into_matrix(self, expected: (usize, usize)) -> Result<Array2<f64>, MicroLmError> {
        if self.shape != [expected.0, expected.1] {
            return Err(MicroLmError::ShapeMismatch(format!(
                "tensor shape {:?}, expected {:?}",
                self.shape, expected
            )));
        }
        Array2::from_shape_vec(expected, self.data)
            .map_err(|e| MicroLmError::Malformed(e.to_string()))
    }
}

fn vector_of(data: Vec<f64>, len: usize) -> Result<Array1<f64>, MicroLmError> {
    if data.len() != len {
        return Err(MicroLmError::Malformed(format!(
            "bias length {} != {len}",
            data.len()
        )));
    }
    Ok(Array1::from(data))
}

pub(crate) fn hash_tensor<'a>(
    h: &mut Sha256,
    name: &str,
    shape: &[usize],
    values: impl Iterator<Item = &'a f64>,
) {
    h.update((name.len() as u64).to_le_bytes());
    h.update(name.as_bytes());
    h.update((shape.len() as u64).to_le_bytes());
    for &s in shape {
        h.update((s as u64).to_le_bytes());
    }
    for v in values {
        h.update(v.to_bits().to_le_bytes());
    }
}

fn outer_add(target: &mut Array2<f64>, left: ArrayView1<f64>, right: ArrayView1<f64>) {
    for (mut row, &l) in target.axis_iter_mut(Axis(0)).zip(left.iter()) {
        if l != 0.0 {
            row.scaled_add(l, &right);
        }
    }
}

/// Max-subtracted softmax.
pub(crate) fn softmax(x: ArrayView1<f64>) -> Array1<f64> {
    let max = x.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let exp = x.mapv(|v| (v - max).exp());
    let sum = exp.sum();
    exp / sum
}

/// First index of the maximum.
pub(crate) fn argmax(x: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}

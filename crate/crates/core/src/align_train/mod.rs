//! Proxy alignment: train the hallucination proxy (HDP) once on
//! untruthfully framed prompts and freeze it, then refine the factual
//! alignment proxy (FAP) for `K` rounds under the contrastive loss
//!
//! ```text
//! L = ||l_base(T) - l_fap(T+)||^2 - ||l_base(T) - l_hdp(T-)||^2
//! ```
//!
//! keeping the checkpoint with the best validation exact match after each
//! round. Only the FAP adapter receives gradients.

mod ablation;
mod data;
mod run;

use ndarray::Array1;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evalkit::exact_match;
use crate::micro_lm::{
    batches, completion_positions, grad_adapter, train_adapter_cross_entropy, AdapterCheckpoint,
    AdapterObjective, AdapterRole, CheckpointMeta, LowRankAdapter, MicroLM, MicroLmError,
    SgdConfig, TrainingPosition,
};
use crate::parallel::map_ordered;
use crate::vocab::{LogitVector, TokenId};

pub use ablation::{ablation_config, AblationFlag, Generator, ProxyRole, Wiring};
pub use data::{
    load_examples, read_examples, save_examples, split_of, write_examples, Provenance, Split,
    TrainingExample,
};
pub use run::{run_training, FinalPointers, TrainRunConfig, TrainRunOutcome};

pub const TRUTHFUL_PREFIX: &str = "Please provide a truthful and accurate answer: ";
pub const UNTRUTHFUL_PREFIX: &str = "Please provide a fictional or untrue answer: ";

#[derive(Debug, Error)]
pub enum AlignError {
    #[error("question is empty")]
    EmptyQuestion,
    #[error("example `{id}`: field `{field}` is empty")]
    EmptyField { id: String, field: &'static str },
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("the train split is empty")]
    EmptyTrainSplit,
    #[error("the validation split is empty")]
    EmptyValSplit,
    #[error("the hallucination proxy is frozen and cannot be trained further")]
    FrozenProxy,
    #[error("FAP refinement needs a frozen hallucination proxy")]
    FrozenProxyMissing,
    #[error("conflicting ablation flags: {0}")]
    ConflictingFlags(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("dataset: {0}")]
    Data(String),
    #[error(transparent)]
    Model(#[from] MicroLmError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// The raw question and its truthfully and untruthfully framed variants.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTriplet {
    pub t: String,
    pub t_plus: String,
    pub t_minus: String,
}

pub fn build_triplet(question: &str) -> Result<PromptTriplet, AlignError> {
    if question.is_empty() {
        return Err(AlignError::EmptyQuestion);
    }
    Ok(PromptTriplet {
        t: question.to_string(),
        t_plus: format!("{TRUTHFUL_PREFIX}{question}"),
        t_minus: format!("{UNTRUTHFUL_PREFIX}{question}"),
    })
}

/// `||l_base - l_fap||^2 - ||l_base - l_hdp||^2`. May be negative.
pub fn contrastive_loss(
    l_base: &LogitVector,
    l_fap: &LogitVector,
    l_hdp: &LogitVector,
) -> Result<f64, AlignError> {
    let n = l_base.vocab_size();
    for v in [l_fap, l_hdp] {
        if v.vocab_size() != n {
            return Err(AlignError::DimensionMismatch {
                expected: n,
                actual: v.vocab_size(),
            });
        }
    }
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    Ok(sq(l_base.values(), l_fap.values()) - sq(l_base.values(), l_hdp.values()))
}

/// Which representation of the final-token distribution the loss compares.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogitSpace {
    /// Pre-softmax logits.
    #[default]
    Raw,
    /// Probabilities after a softmax.
    Softmax,
}

fn softmax(x: &Array1<f64>) -> Array1<f64> {
    let max = x.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let e = x.mapv(|v| (v - max).exp());
    let s = e.sum();
    e / s
}

/// Batch-mean contrastive loss with the base and HDP logits held fixed.
pub struct ContrastiveObjective {
    contexts: Vec<Vec<TokenId>>,
    base: Vec<Array1<f64>>,
    hdp: Vec<Array1<f64>>,
    space: LogitSpace,
}

impl ContrastiveObjective {
    /// `items` holds (T+ token ids, base logits on T, HDP logits on T-).
    pub fn new(items: Vec<(Vec<TokenId>, Array1<f64>, Array1<f64>)>, space: LogitSpace) -> Self {
        let mut obj = Self {
            contexts: Vec::with_capacity(items.len()),
            base: Vec::with_capacity(items.len()),
            hdp: Vec::with_capacity(items.len()),
            space,
        };
        for (ctx, b, h) in items {
            let (b, h) = match space {
                LogitSpace::Raw => (b, h),
                LogitSpace::Softmax => (softmax(&b), softmax(&h)),
            };
            obj.contexts.push(ctx);
            obj.base.push(b);
            obj.hdp.push(h);
        }
        obj
    }
}

impl AdapterObjective for ContrastiveObjective {
    fn contexts(&self) -> &[Vec<TokenId>] {
        &self.contexts
    }

    fn logit_loss(&self, logits: &[Array1<f64>]) -> (f64, Vec<Array1<f64>>) {
        let n = logits.len() as f64;
        let mut loss = 0.0;
        let mut grads = Vec::with_capacity(logits.len());
        for ((l, b), h) in logits.iter().zip(&self.base).zip(&self.hdp) {
            let f = match self.space {
                LogitSpace::Raw => l.clone(),
                LogitSpace::Softmax => softmax(l),
            };
            let diff = &f - b;
            let neg = b - h;
            loss += diff.dot(&diff) - neg.dot(&neg);
            let v = diff * 2.0;
            let g = match self.space {
                LogitSpace::Raw => v,
                // softmax Jacobian-vector product: p * (v - <p, v>)
                LogitSpace::Softmax => {
                    let pv = f.dot(&v);
                    &f * &(v - pv)
                }
            };
            grads.push(g / n);
        }
        (loss / n, grads)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterShape {
    pub rank: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for AdapterShape {
    fn default() -> Self {
        Self {
            rank: LowRankAdapter::DEFAULT_RANK,
            alpha: LowRankAdapter::DEFAULT_ALPHA,
            seed: 0,
        }
    }
}

impl AdapterShape {
    pub fn init(&self, d_model: usize) -> LowRankAdapter {
        LowRankAdapter::new(d_model, self.rank, self.alpha, self.seed)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HdpConfig {
    pub sgd: SgdConfig,
    pub adapter: AdapterShape,
}

impl Default for HdpConfig {
    fn default() -> Self {
        Self {
            sgd: SgdConfig {
                learning_rate: 0.1,
                epochs: 20,
                ..SgdConfig::default()
            },
            adapter: AdapterShape::default(),
        }
    }
}

fn hdp_positions(
    base: &MicroLM,
    train: &[&TrainingExample],
) -> Result<Vec<TrainingPosition>, AlignError> {
    let mut out = Vec::new();
    for ex in train {
        ex.validate()?;
        let t = build_triplet(&ex.question)?;
        out.extend(completion_positions(
            base,
            &t.t_minus,
            &ex.hallucinated_answer,
        ));
    }
    Ok(out)
}

/// Cross-entropy fine-tuning of a fresh adapter on (T-, hallucinated answer)
/// pairs from the train split. The returned checkpoint is frozen.
pub fn train_hdp(
    base: &MicroLM,
    data: &[TrainingExample],
    config: &HdpConfig,
) -> Result<AdapterCheckpoint, AlignError> {
    let train = split_of(data, Split::Train);
    if train.is_empty() {
        return Err(AlignError::EmptyTrainSplit);
    }
    let positions = hdp_positions(base, &train)?;
    let mut adapter = config.adapter.init(base.d_model());
    let losses = train_adapter_cross_entropy(base, &mut adapter, &positions, &config.sgd)?;
    log::info!(
        "hdp: {} positions, epoch losses {losses:?}",
        positions.len()
    );
    let mut meta = CheckpointMeta::new(AdapterRole::Hdp);
    meta.epoch = config.sgd.epochs;
    meta.label = "hdp".into();
    let mut ckpt = AdapterCheckpoint::new(adapter, meta);
    ckpt.freeze();
    Ok(ckpt)
}

/// Further cross-entropy training of an existing HDP checkpoint. Refused
/// once the checkpoint is frozen.
pub fn resume_hdp(
    base: &MicroLM,
    ckpt: &mut AdapterCheckpoint,
    data: &[TrainingExample],
    sgd: &SgdConfig,
) -> Result<Vec<f64>, AlignError> {
    let adapter = ckpt.adapter_mut().map_err(|_| AlignError::FrozenProxy)?;
    let train = split_of(data, Split::Train);
    if train.is_empty() {
        return Err(AlignError::EmptyTrainSplit);
    }
    let positions = hdp_positions(base, &train)?;
    Ok(train_adapter_cross_entropy(base, adapter, &positions, sgd)?)
}

/// Fraction of `val` examples whose greedy answer to T+ exactly matches the
/// correct answer.
pub fn validation_em(
    model: &MicroLM,
    adapter: Option<&LowRankAdapter>,
    val: &[&TrainingExample],
    max_new_tokens: usize,
    threads: usize,
) -> Result<f64, AlignError> {
    if val.is_empty() {
        return Err(AlignError::EmptyValSplit);
    }
    let hits = map_ordered(val, threads, |ex| -> Result<bool, AlignError> {
        let t = build_triplet(&ex.question)?;
        let ids = model.generate_greedy(adapter, &t.t_plus, max_new_tokens)?;
        Ok(exact_match(&model.detokenize(&ids), &ex.correct_answer))
    });
    let mut n = 0usize;
    for h in hits {
        n += usize::from(h?);
    }
    Ok(n as f64 / val.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineConfig {
    /// Number of refinement rounds `K`.
    pub iterations: usize,
    /// Per-round SGD settings; `epochs` is the number of epochs per round.
    pub sgd: SgdConfig,
    pub loss_space: LogitSpace,
    pub em_max_new_tokens: usize,
    pub adapter: AdapterShape,
    pub eval_threads: usize,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            iterations: 3,
            // raw-logit squared distances have large gradients; 1e-2 diverges
            sgd: SgdConfig {
                learning_rate: 3e-5,
                ..SgdConfig::default()
            },
            loss_space: LogitSpace::Raw,
            em_max_new_tokens: 32,
            adapter: AdapterShape::default(),
            eval_threads: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEval {
    /// `k{iteration}-e{epoch}`; epoch 0 is the checkpoint carried into the round.
    pub id: String,
    pub epoch: usize,
    pub val_em: f64,
    pub hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: usize,
    pub epoch_losses: Vec<f64>,
    pub checkpoints: Vec<CheckpointEval>,
    pub selected: String,
    pub selected_em: f64,
}

impl IterationReport {
    /// Index of the first checkpoint with the highest EM.
    pub fn best_index(checkpoints: &[CheckpointEval]) -> usize {
        let mut best = 0;
        for (i, c) in checkpoints.iter().enumerate() {
            if c.val_em > checkpoints[best].val_em {
                best = i;
            }
        }
        best
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefineOutcome {
    pub fap: AdapterCheckpoint,
    /// Validation EM of the starting adapter.
    pub initial_em: f64,
    pub reports: Vec<IterationReport>,
}

fn checkpoint_id(iteration: usize, epoch: usize) -> String {
    format!("k{iteration}-e{epoch}")
}

/// Runs `K` refinement rounds starting from a zero-initialized FAP.
pub fn refine_fap(
    base: &MicroLM,
    hdp: &AdapterCheckpoint,
    data: &[TrainingExample],
    config: &RefineConfig,
) -> Result<RefineOutcome, AlignError> {
    refine_fap_observed(base, hdp, data, config, &mut |_| Ok(()))
}

/// [`refine_fap`], calling `observer` with every epoch checkpoint as it is
/// produced and with each round's report.
pub fn refine_fap_observed(
    base: &MicroLM,
    hdp: &AdapterCheckpoint,
    data: &[TrainingExample],
    config: &RefineConfig,
    observer: &mut dyn FnMut(RefineEvent<'_>) -> Result<(), AlignError>,
) -> Result<RefineOutcome, AlignError> {
    if !hdp.is_frozen() {
        return Err(AlignError::FrozenProxyMissing);
    }
    if config.iterations == 0 {
        return Err(AlignError::InvalidConfig(
            "at least one refinement iteration is required".into(),
        ));
    }
    let train = split_of(data, Split::Train);
    let val = split_of(data, Split::Val);
    if train.is_empty() {
        return Err(AlignError::EmptyTrainSplit);
    }
    if val.is_empty() {
        return Err(AlignError::EmptyValSplit);
    }

    // base(T) and HDP(T-) never change, so compute them once
    let base_proj = base.projections(None)?;
    let hdp_proj = base.projections(Some(&hdp.adapter))?;
    let mut items = Vec::with_capacity(train.len());
    for ex in &train {
        ex.validate()?;
        let t = build_triplet(&ex.question)?;
        let (l_base, _) = base.forward_ids(&base_proj, &base.tokenize(&t.t))?;
        let (l_hdp, _) = base.forward_ids(&hdp_proj, &base.tokenize(&t.t_minus))?;
        items.push((base.tokenize(&t.t_plus), l_base, l_hdp));
    }

    let em = |adapter: &LowRankAdapter| {
        validation_em(
            base,
            Some(adapter),
            &val,
            config.em_max_new_tokens,
            config.eval_threads,
        )
    };
    let mut current = AdapterCheckpoint::new(
        config.adapter.init(base.d_model()),
        CheckpointMeta::new(AdapterRole::Fap),
    );
    let initial_em = em(&current.adapter)?;
    current.meta.val_em = Some(initial_em);
    current.meta.label = checkpoint_id(0, 0);
    log::info!("fap: initial validation EM {:.2}%", 100.0 * initial_em);

    let mut reports = Vec::with_capacity(config.iterations);
    for k in 1..=config.iterations {
        let mut rng = ChaCha8Rng::seed_from_u64(config.sgd.seed.wrapping_add(k as u64));
        let mut carried = current.clone();
        carried.meta.iteration = k;
        carried.meta.epoch = 0;
        carried.meta.label = checkpoint_id(k, 0);
        let mut checkpoints = vec![CheckpointEval {
            id: carried.meta.label.clone(),
            epoch: 0,
            val_em: current.meta.val_em.unwrap_or(initial_em),
            hash: carried.content_hash(),
        }];
        let mut best = carried.clone();
        best.meta.val_em = Some(checkpoints[0].val_em);
        let mut adapter = current.adapter.clone();
        let mut epoch_losses = Vec::with_capacity(config.sgd.epochs);
        for epoch in 1..=config.sgd.epochs {
            let mut total = 0.0;
            let batches = batches(&items, config.sgd.batch_size, &mut rng);
            for batch in &batches {
                let objective = ContrastiveObjective::new(
                    batch.iter().map(|&i| i.clone()).collect(),
                    config.loss_space,
                );
                let (loss, grads) = grad_adapter(base, &adapter, &objective)?;
                adapter
                    .tensors
                    .scaled_add(-config.sgd.learning_rate, &grads);
                total += loss;
            }
            epoch_losses.push(total / batches.len().max(1) as f64);
            let val_em = em(&adapter)?;
            let mut meta = CheckpointMeta::new(AdapterRole::Fap);
            meta.iteration = k;
            meta.epoch = epoch;
            meta.val_em = Some(val_em);
            meta.label = checkpoint_id(k, epoch);
            let ckpt = AdapterCheckpoint::new(adapter.clone(), meta);
            checkpoints.push(CheckpointEval {
                id: ckpt.meta.label.clone(),
                epoch,
                val_em,
                hash: ckpt.content_hash(),
            });
            observer(RefineEvent::Checkpoint(&ckpt))?;
            if val_em > best.meta.val_em.unwrap_or(f64::NEG_INFINITY) {
                best = ckpt;
            }
        }
        let chosen = &checkpoints[IterationReport::best_index(&checkpoints)];
        debug_assert_eq!(chosen.id, best.meta.label);
        let report = IterationReport {
            iteration: k,
            epoch_losses,
            selected: chosen.id.clone(),
            selected_em: chosen.val_em,
            checkpoints,
        };
        log::info!(
            "fap: iteration {k} selected {} (EM {:.2}%)",
            report.selected,
            100.0 * report.selected_em
        );
        observer(RefineEvent::Iteration(&report))?;
        reports.push(report);
        current = best;
    }
    Ok(RefineOutcome {
        fap: current,
        initial_em,
        reports,
    })
}

pub enum RefineEvent<'a> {
    Checkpoint(&'a AdapterCheckpoint),
    Iteration(&'a IterationReport),
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::micro_lm::{adapter_loss, model_vocabulary, MicroLmConfig};
    use proptest::prelude::*;

    fn lv(v: &[f64]) -> LogitVector {
        LogitVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn triplet_prefixes() {
        let t = build_triplet("What is 2+2?").unwrap();
        assert_eq!(
            t.t_plus,
            "Please provide a truthful and accurate answer: What is 2+2?"
        );
        assert_eq!(
            t.t_minus,
            "Please provide a fictional or untrue answer: What is 2+2?"
        );
        assert_eq!(build_triplet("X").unwrap().t, "X");
        let ws = build_triplet("Q  \t").unwrap();
        assert!(
            ws.t.ends_with("Q  \t")
                && ws.t_plus.ends_with("Q  \t")
                && ws.t_minus.ends_with("Q  \t")
        );
        assert!(matches!(build_triplet(""), Err(AlignError::EmptyQuestion)));
    }

    #[test]
    fn loss_examples() {
        let b = lv(&[1.0, 0.0]);
        assert_eq!(
            contrastive_loss(&b, &lv(&[0.0, 1.0]), &lv(&[2.0, 0.0])).unwrap(),
            1.0
        );
        assert_eq!(contrastive_loss(&b, &b, &b).unwrap(), 0.0);
        assert_eq!(contrastive_loss(&b, &b, &lv(&[3.0, 1.0])).unwrap(), -5.0);
        assert!(matches!(
            contrastive_loss(&b, &lv(&[1.0]), &b),
            Err(AlignError::DimensionMismatch { .. })
        ));
    }

    proptest! {
        #[test]
        fn loss_antisymmetric(v in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0, -5.0f64..5.0), 1..16)) {
            let b = lv(&v.iter().map(|t| t.0).collect::<Vec<_>>());
            let x = lv(&v.iter().map(|t| t.1).collect::<Vec<_>>());
            let y = lv(&v.iter().map(|t| t.2).collect::<Vec<_>>());
            prop_assert_eq!(contrastive_loss(&b, &x, &y).unwrap(), -contrastive_loss(&b, &y, &x).unwrap());
        }
    }

    fn toy() -> (MicroLM, Vec<TrainingExample>) {
        let words = [
            "what", "is", "the", "color", "of", "sky", "grass", "blue", "green", "red",
        ];
        let mut all: Vec<&str> = words.to_vec();
        for w in TRUTHFUL_PREFIX
            .split_whitespace()
            .chain(UNTRUTHFUL_PREFIX.split_whitespace())
        {
            if !all.contains(&w) {
                all.push(w);
            }
        }
        let vocab = model_vocabulary("toy", all).unwrap();
        let model = MicroLM::new(
            vocab,
            MicroLmConfig {
                d_model: 8,
                d_hidden: 8,
                seed: 3,
                init_range: 0.3,
            },
        )
        .unwrap();
        let data = vec![
            TrainingExample::new("0", "what is the color of sky", "blue", "red")
                .with_split(Split::Train),
            TrainingExample::new("1", "what is the color of grass", "green", "red")
                .with_split(Split::Train),
            TrainingExample::new("2", "what is the color of sky", "blue", "green")
                .with_split(Split::Val),
        ];
        (model, data)
    }

    fn objective(model: &MicroLM, seed: u64, space: LogitSpace) -> ContrastiveObjective {
        let (_, data) = toy();
        let hdp = LowRankAdapter::new(model.d_model(), 4, 8.0, seed);
        let mut hdp = hdp;
        hdp.tensors.q.b.mapv_inplace(|x| x + 0.2);
        let items = data
            .iter()
            .map(|ex| {
                let t = build_triplet(&ex.question).unwrap();
                let (b, _) = model
                    .forward_ids(&model.projections(None).unwrap(), &model.tokenize(&t.t))
                    .unwrap();
                let (h, _) = model
                    .forward_ids(
                        &model.projections(Some(&hdp)).unwrap(),
                        &model.tokenize(&t.t_minus),
                    )
                    .unwrap();
                (model.tokenize(&t.t_plus), b, h)
            })
            .collect();
        ContrastiveObjective::new(items, space)
    }

    #[test]
    fn objective_matches_loss_function() {
        let (model, _) = toy();
        let obj = objective(&model, 1, LogitSpace::Raw);
        let fap = LowRankAdapter::new(model.d_model(), 4, 8.0, 9);
        let total = adapter_loss(&model, &fap, &obj).unwrap();
        let mut expect = 0.0;
        for i in 0..obj.contexts.len() {
            let l = model
                .forward_ids(&model.projections(Some(&fap)).unwrap(), &obj.contexts[i])
                .unwrap()
                .0;
            expect += contrastive_loss(
                &lv(&obj.base[i].to_vec()),
                &lv(&l.to_vec()),
                &lv(&obj.hdp[i].to_vec()),
            )
            .unwrap();
        }
        assert!((total - expect / obj.contexts.len() as f64).abs() < 1e-12);
    }

    fn fd_check(space: LogitSpace) {
        let (model, _) = toy();
        let obj = objective(&model, 2, space);
        let mut fap = LowRankAdapter::new(model.d_model(), 4, 8.0, 5);
        fap.tensors.q.b.mapv_inplace(|x| x + 0.1);
        fap.tensors.v.b.mapv_inplace(|x| x - 0.07);
        let (_, g) = grad_adapter(&model, &fap, &obj).unwrap();
        let h = 1e-5;
        for (i, an) in g.flatten().into_iter().enumerate() {
            let (mut p, mut q) = (fap.clone(), fap.clone());
            *p.tensors.entry_mut(i) += h;
            *q.tensors.entry_mut(i) -= h;
            let fd = (adapter_loss(&model, &p, &obj).unwrap()
                - adapter_loss(&model, &q, &obj).unwrap())
                / (2.0 * h);
            assert!(
                (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6) < 1e-4,
                "{i}: {an} vs {fd}"
            );
        }
    }

    #[test]
    fn gradient_matches_finite_differences_raw() {
        fd_check(LogitSpace::Raw);
    }

    #[test]
    fn gradient_matches_finite_differences_softmax() {
        fd_check(LogitSpace::Softmax);
    }

    #[test]
    fn small_step_does_not_increase_loss() {
        let (model, _) = toy();
        let obj = objective(&model, 4, LogitSpace::Raw);
        let mut fap = LowRankAdapter::new(model.d_model(), 4, 8.0, 6);
        fap.tensors.v.b.mapv_inplace(|x| x + 0.05);
        let before = adapter_loss(&model, &fap, &obj).unwrap();
        let (_, g) = grad_adapter(&model, &fap, &obj).unwrap();
        fap.tensors.scaled_add(-1e-4, &g);
        assert!(adapter_loss(&model, &fap, &obj).unwrap() <= before);
    }

    #[test]
    fn hdp_zero_epochs_is_identity_and_frozen() {
        let (model, data) = toy();
        let cfg = HdpConfig {
            sgd: SgdConfig {
                epochs: 0,
                ..Default::default()
            },
            ..Default::default()
        };
        let mut ckpt = train_hdp(&model, &data, &cfg).unwrap();
        assert!(ckpt.is_frozen());
        assert_eq!(ckpt.adapter, cfg.adapter.init(model.d_model()));
        assert_eq!(
            model
                .forward_last_token(Some(&ckpt.adapter), "what is")
                .unwrap(),
            model.forward_last_token(None, "what is").unwrap()
        );
        assert!(matches!(
            resume_hdp(&model, &mut ckpt, &data, &SgdConfig::default()),
            Err(AlignError::FrozenProxy)
        ));
        let val_only: Vec<_> = data
            .iter()
            .filter(|e| e.split == Some(Split::Val))
            .cloned()
            .collect();
        assert!(matches!(
            train_hdp(&model, &val_only, &cfg),
            Err(AlignError::EmptyTrainSplit)
        ));
    }

    #[test]
    fn hdp_learns_hallucinated_answer() {
        let (model, data) = toy();
        let one = vec![data[0].clone()];
        let cfg = HdpConfig {
            sgd: SgdConfig {
                learning_rate: 0.5,
                batch_size: 2,
                epochs: 60,
                seed: 0,
            },
            adapter: AdapterShape {
                rank: 4,
                alpha: 8.0,
                seed: 1,
            },
        };
        let ckpt = train_hdp(&model, &one, &cfg).unwrap();
        let t = build_triplet(&one[0].question).unwrap();
        let red = model.vocabulary().id_of("red").unwrap();
        let prob = |a: Option<&LowRankAdapter>| {
            let l = model.forward_last_token(a, &t.t_minus).unwrap();
            crate::steer::softmax(l.values(), 1.0)[red]
        };
        assert!(prob(Some(&ckpt.adapter)) > prob(None));
    }

    #[test]
    fn refine_degenerate_and_errors() {
        let (model, data) = toy();
        let hdp = train_hdp(
            &model,
            &data,
            &HdpConfig {
                sgd: SgdConfig {
                    epochs: 0,
                    ..Default::default()
                },
                ..Default::default()
            },
        )
        .unwrap();
        let cfg = RefineConfig {
            iterations: 1,
            sgd: SgdConfig {
                epochs: 0,
                ..Default::default()
            },
            em_max_new_tokens: 4,
            ..Default::default()
        };
        let out = refine_fap(&model, &hdp, &data, &cfg).unwrap();
        assert_eq!(out.fap.adapter, cfg.adapter.init(model.d_model()));
        let val = split_of(&data, Split::Val);
        assert_eq!(
            out.reports[0].selected_em,
            validation_em(&model, None, &val, 4, 1).unwrap()
        );
        assert_eq!(out.reports[0].selected, "k1-e0");

        let mut thawed = hdp.clone();
        thawed.meta.frozen = false;
        assert!(matches!(
            refine_fap(&model, &thawed, &data, &cfg),
            Err(AlignError::FrozenProxyMissing)
        ));
        let train_only: Vec<_> = data
            .iter()
            .filter(|e| e.split == Some(Split::Train))
            .cloned()
            .collect();
        assert!(matches!(
            refine_fap(&model, &hdp, &train_only, &cfg),
            Err(AlignError::EmptyValSplit)
        ));
    }

    #[test]
    fn refine_selection_and_hdp_immutability() {
        let (model, data) = toy();
        let hdp = train_hdp(
            &model,
            &data,
            &HdpConfig {
                sgd: SgdConfig {
                    epochs: 2,
                    ..Default::default()
                },
                ..Default::default()
            },
        )
        .unwrap();
        let before = hdp.content_hash();
        let cfg = RefineConfig {
            iterations: 2,
            sgd: SgdConfig {
                learning_rate: 0.05,
                batch_size: 2,
                epochs: 3,
                seed: 1,
            },
            em_max_new_tokens: 4,
            ..Default::default()
        };
        let mut seen = 0;
        let out = refine_fap_observed(&model, &hdp, &data, &cfg, &mut |ev| {
            if let RefineEvent::Checkpoint(_) = ev {
                seen += 1;
            }
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, 6);
        assert_eq!(hdp.content_hash(), before);
        for r in &out.reports {
            let max = r
                .checkpoints
                .iter()
                .map(|c| c.val_em)
                .fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(r.selected_em, max);
            let first = r.checkpoints.iter().find(|c| c.val_em == max).unwrap();
            assert_eq!(r.selected, first.id);
        }
        assert!(out
            .reports
            .windows(2)
            .all(|w| w[1].selected_em >= w[0].selected_em));
    }

    #[test]
    fn best_index_prefers_earliest() {
        let c = |e: usize, em: f64| CheckpointEval {
            id: format!("e{e}"),
            epoch: e,
            val_em: em,
            hash: String::new(),
        };
        assert_eq!(
            IterationReport::best_index(&[c(0, 0.5), c(1, 0.7), c(2, 0.7)]),
            1
        );
        assert_eq!(IterationReport::best_index(&[c(0, 0.5), c(1, 0.5)]), 0);
    }
}

use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    adapter::grad_adapter, softmax, AdapterObjective, FullGrads, LowRankAdapter, MicroLM,
    MicroLmError,
};
use crate::vocab::TokenId;

/// Plain minibatch SGD settings shared by every training loop.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            batch_size: 8,
            epochs: 3,
            seed: 0,
        }
    }
}

/// One next-token prediction: `context` should be followed by `target`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainingPosition {
    pub context: Vec<TokenId>,
    pub target: TokenId,
}

/// Positions predicting every completion token and the closing `<eos>`.
pub fn completion_positions(
    model: &MicroLM,
    prompt: &str,
    completion: &str,
) -> Vec<TrainingPosition> {
    let mut context = model.tokenize(prompt);
    let mut out = Vec::new();
    for target in model
        .tokenize(completion)
        .into_iter()
        .chain([model.eos_id()])
    {
        out.push(TrainingPosition {
            context: context.clone(),
            target,
        });
        context.push(target);
    }
    out
}

/// Mean next-token cross-entropy over a batch of positions.
pub struct CrossEntropyObjective {
    contexts: Vec<Vec<TokenId>>,
    targets: Vec<TokenId>,
}

impl CrossEntropyObjective {
    pub fn new(positions: &[&TrainingPosition]) -> Self {
        Self {
            contexts: positions.iter().map(|p| p.context.clone()).collect(),
            targets: positions.iter().map(|p| p.target).collect(),
        }
    }
}

impl AdapterObjective for CrossEntropyObjective {
    fn contexts(&self) -> &[Vec<TokenId>] {
        &self.contexts
    }

    fn logit_loss(&self, logits: &[Array1<f64>]) -> (f64, Vec<Array1<f64>>) {
        let n = logits.len() as f64;
        let mut loss = 0.0;
        let grads = logits
            .iter()
            .zip(&self.targets)
            .map(|(l, &t)| {
                let mut p = softmax(l.view());
                loss -= p[t].ln();
                p[t] -= 1.0;
                p / n
            })
            .collect();
        (loss / n, grads)
    }
}

pub(crate) fn batches<'a, T>(
    items: &'a [T],
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<&'a T>> {
    let mut order: Vec<&T> = items.iter().collect();
    order.shuffle(rng);
    order
        .chunks(batch_size.max(1))
        .map(<[&T]>::to_vec)
        .collect()
}

/// Trains only the adapter factors with cross-entropy. Returns the mean
/// batch loss of each epoch.
pub fn train_adapter_cross_entropy(
    model: &MicroLM,
    adapter: &mut LowRankAdapter,
    positions: &[TrainingPosition],
    config: &SgdConfig,
) -> Result<Vec<f64>, MicroLmError> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        let mut total = 0.0;
        let batches = batches(positions, config.batch_size, &mut rng);
        for batch in &batches {
            let objective = CrossEntropyObjective::new(batch);
            let (loss, grads) = grad_adapter(model, adapter, &objective)?;
            adapter.tensors.scaled_add(-config.learning_rate, &grads);
            total += loss;
        }
        epoch_losses.push(total / batches.len().max(1) as f64);
    }
    Ok(epoch_losses)
}

/// Full-parameter next-token training of the base model on
/// (prompt, completion) pairs. Stands in for pretraining: it gives the base
/// model the knowledge the alignment phase works with.
pub fn pretrain(
    model: &mut MicroLM,
    pairs: &[(String, String)],
    config: &PretrainConfig,
) -> Result<Vec<f64>, MicroLmError> {
    let positions: Vec<TrainingPosition> = pairs
        .iter()
        .flat_map(|(p, c)| completion_positions(model, p, c))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        let mut total = 0.0;
        let batches = batches(&positions, config.batch_size, &mut rng);
        for batch in &batches {
            let proj = model.projections(None)?;
            let mut grads = FullGrads::zeros(&model.params);
            let n = batch.len() as f64;
            let mut loss = 0.0;
            for pos in batch {
                let (logits, cache) = model.forward_ids(&proj, &pos.context)?;
                let mut p = softmax(logits.view());
                loss -= p[pos.target].ln();
                p[pos.target] -= 1.0;
                p /= n;
                model.backward(&proj, &cache, p.view(), &mut grads, true);
            }
            if !loss.is_finite() {
                return Err(MicroLmError::NonFiniteGradient("pretrain loss"));
            }
            let lr = config.learning_rate;
            let params = &mut model.params;
            params.embed.scaled_add(-lr, &grads.embed);
            params.p_q.scaled_add(-lr, &grads.p_q);
            params.p_v.scaled_add(-lr, &grads.p_v);
            params.mix.scaled_add(-lr, &grads.mix);
            params.mix_bias.scaled_add(-lr, &grads.mix_bias);
            params.out.scaled_add(-lr, &grads.out);
            params.out_bias.scaled_add(-lr, &grads.out_bias);
            total += loss / n;
        }
        epoch_losses.push(total / batches.len().max(1) as f64);
    }
    Ok(epoch_losses)
}

pub type PretrainConfig = SgdConfig;

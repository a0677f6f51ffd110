//! A synthetic planted-fact task for exercising the full pipeline offline.
//!
//! Facts are `(relation, entity) -> value` triples asked as
//! `what is the <relation> of <entity>`. The proxy base model is pretrained
//! on every fact with the plain question, so it knows them but has never
//! seen the framing prefixes. The target model has a larger vocabulary and
//! was pretrained on a copy of the facts where a fraction of answers were
//! replaced by the hallucinated ones.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::align_train::{
    ablation_config, run_training, split_of, AblationFlag, AlignError, Generator, IterationReport,
    Provenance, ProxyRole, Split, TrainRunConfig, TrainingExample, TRUTHFUL_PREFIX,
    UNTRUTHFUL_PREFIX,
};
use crate::dataaug::{split_dataset, AugError};
use crate::evalkit::exact_match;
use crate::micro_lm::{
    model_vocabulary, pretrain, LowRankAdapter, MicroLM, MicroLmConfig, MicroLmError, SgdConfig,
};
use crate::providers::{LogitProvider, MicroLmProvider, ProviderError};
use crate::steer::{decode, decode_unsteered, DecodingConfig, SteerError};
use crate::vocab::{build_shared_map, VocabError};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error(transparent)]
    Aug(#[from] AugError),
    #[error(transparent)]
    Align(#[from] AlignError),
    #[error(transparent)]
    Model(#[from] MicroLmError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Steer(#[from] SteerError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
}

/// How the hallucinated answer of a fact is chosen.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HallucinationStyle {
    /// A uniformly drawn wrong value.
    Random,
    /// The relation's most popular value, or the runner-up when that is the
    /// correct one. Mimics a shared misconception.
    #[default]
    Popular,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantedFactConfig {
    pub n_entities: usize,
    pub n_relations: usize,
    pub values_per_relation: usize,
    /// Fraction of facts the target model learns wrongly.
    pub corrupt_fraction: f64,
    pub hallucination: HallucinationStyle,
    pub split_ratio: f64,
    pub seed: u64,
    pub proxy: MicroLmConfig,
    pub target: MicroLmConfig,
    /// Extra target-only tokens, so the two vocabularies differ.
    pub target_extra_tokens: usize,
    pub pretrain: SgdConfig,
}

impl Default for PlantedFactConfig {
    fn default() -> Self {
        Self {
            n_entities: 50,
            n_relations: 4,
            values_per_relation: 6,
            corrupt_fraction: 0.5,
            hallucination: HallucinationStyle::Popular,
            split_ratio: 0.8,
            seed: 0,
            proxy: MicroLmConfig {
                d_model: 24,
                d_hidden: 64,
                seed: 11,
                init_range: 0.1,
            },
            target: MicroLmConfig {
                d_model: 32,
                d_hidden: 96,
                seed: 12,
                init_range: 0.1,
            },
            target_extra_tokens: 8,
            pretrain: SgdConfig {
                learning_rate: 0.3,
                batch_size: 8,
                epochs: 120,
                seed: 5,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedFactTask {
    pub config: PlantedFactConfig,
    /// Split examples; ids are `f{index}`.
    pub examples: Vec<TrainingExample>,
    /// Ids of facts the target model is taught wrongly.
    pub corrupted: Vec<String>,
    pub proxy_words: Vec<String>,
    pub target_words: Vec<String>,
}

pub fn question(relation: usize, entity: usize) -> String {
    format!("what is the rel{relation} of ent{entity}")
}

fn value(relation: usize, k: usize) -> String {
    format!("val{relation}x{k}")
}

fn push_unique(words: &mut Vec<String>, w: &str) {
    if !words.iter().any(|x| x == w) {
        words.push(w.to_string());
    }
}

impl PlantedFactTask {
    pub fn generate(config: &PlantedFactConfig) -> Result<Self, SynthError> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut examples = Vec::new();
        for r in 0..config.n_relations {
            for e in 0..config.n_entities {
                let correct = rng.gen_range(0..config.values_per_relation);
                let offset = rng.gen_range(1..config.values_per_relation.max(2));
                let wrong = match config.hallucination {
                    HallucinationStyle::Random => (correct + offset) % config.values_per_relation,
                    HallucinationStyle::Popular => usize::from(correct == 0),
                };
                let id = format!("f{}", examples.len());
                examples.push(
                    TrainingExample::new(id, question(r, e), value(r, correct), value(r, wrong))
                        .with_provenance(Provenance::Synthetic),
                );
            }
        }
        let mut ids: Vec<String> = examples.iter().map(|e| e.id.clone()).collect();
        ids.shuffle(&mut rng);
        ids.truncate((config.corrupt_fraction * ids.len() as f64).round() as usize);
        ids.sort();

        let mut proxy_words = Vec::new();
        for w in "what is the of".split_whitespace() {
            push_unique(&mut proxy_words, w);
        }
        for r in 0..config.n_relations {
            push_unique(&mut proxy_words, &format!("rel{r}"));
            for k in 0..config.values_per_relation {
                push_unique(&mut proxy_words, &value(r, k));
            }
        }
        for e in 0..config.n_entities {
            push_unique(&mut proxy_words, &format!("ent{e}"));
        }
        for w in TRUTHFUL_PREFIX
            .split_whitespace()
            .chain(UNTRUTHFUL_PREFIX.split_whitespace())
        {
            push_unique(&mut proxy_words, w);
        }
        let mut target_words = proxy_words.clone();
        for i in 0..config.target_extra_tokens {
            target_words.push(format!("extra{i}"));
        }
        // different id order on the target side
        target_words.reverse();

        let examples = split_dataset(examples, config.split_ratio, config.seed)?;
        Ok(Self {
            config: config.clone(),
            examples,
            corrupted: ids,
            proxy_words,
            target_words,
        })
    }

    fn pairs(&self, corrupt: bool) -> Vec<(String, String)> {
        self.examples
            .iter()
            .map(|ex| {
                let answer = if corrupt && self.corrupted.binary_search(&ex.id).is_ok() {
                    &ex.hallucinated_answer
                } else {
                    &ex.correct_answer
                };
                (ex.question.clone(), answer.clone())
            })
            .collect()
    }

    /// The proxy base model, pretrained on every correct fact.
    pub fn base_model(&self) -> Result<MicroLM, MicroLmError> {
        let vocab = model_vocabulary("proxy", &self.proxy_words)?;
        let mut model = MicroLM::new(vocab, self.config.proxy)?;
        let losses = pretrain(&mut model, &self.pairs(false), &self.config.pretrain)?;
        log::info!("proxy pretraining final loss {:?}", losses.last());
        Ok(model)
    }

    /// The target model, pretrained on the partly corrupted facts.
    pub fn target_model(&self) -> Result<MicroLM, MicroLmError> {
        let vocab = model_vocabulary("target", &self.target_words)?;
        let mut model = MicroLM::new(vocab, self.config.target)?;
        let losses = pretrain(&mut model, &self.pairs(true), &self.config.pretrain)?;
        log::info!("target pretraining final loss {:?}", losses.last());
        Ok(model)
    }
}

/// The proxy base model with each trained adapter.
pub struct ProxySet {
    pub base: Arc<MicroLM>,
    pub fap: LowRankAdapter,
    pub hdp: LowRankAdapter,
}

impl ProxySet {
    pub fn provider(&self, role: ProxyRole) -> Result<MicroLmProvider, ProviderError> {
        match role {
            ProxyRole::Base => MicroLmProvider::new("base", self.base.clone(), None),
            ProxyRole::Fap => MicroLmProvider::new("fap", self.base.clone(), Some(&self.fap)),
            ProxyRole::Hdp => MicroLmProvider::new("hdp", self.base.clone(), Some(&self.hdp)),
        }
    }
}

/// Exact-match rate of the outputs produced under `generator` for the plain
/// questions of `examples`.
pub fn generator_em(
    target: &dyn LogitProvider,
    proxies: &ProxySet,
    generator: Generator,
    examples: &[&TrainingExample],
    decoding: &DecodingConfig,
) -> Result<f64, SynthError> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    match generator {
        Generator::Steered { positive, negative } => {
            let (pos, neg) = (proxies.provider(positive)?, proxies.provider(negative)?);
            let map = build_shared_map(pos.vocabulary(), target.vocabulary())?;
            for ex in examples {
                let out = decode(target, &pos, &neg, &map, &ex.question, decoding)?;
                hits += usize::from(exact_match(&out.text, &ex.correct_answer));
            }
        }
        Generator::ProxyOnly { model } => {
            let p = proxies.provider(model)?;
            for ex in examples {
                let out = decode_unsteered(&p, &ex.question, decoding)?;
                hits += usize::from(exact_match(&out.text, &ex.correct_answer));
            }
        }
    }
    Ok(hits as f64 / examples.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: PlantedFactConfig,
    /// Ablation flags here are ignored; every variant is scored.
    pub train: TrainRunConfig,
    pub decoding: DecodingConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: PlantedFactConfig::default(),
            train: TrainRunConfig::default(),
            decoding: DecodingConfig {
                max_new_tokens: 8,
                ..DecodingConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantScore {
    pub variant: String,
    pub val_em: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    /// Proxy EM on T+ before refinement.
    pub initial_em: f64,
    pub iterations: Vec<IterationReport>,
    /// Target EM on the validation split, one entry per wiring.
    pub variants: Vec<VariantScore>,
    /// Selected EM never decreases across rounds.
    pub trend_non_decreasing: bool,
    /// full >= no_negative >= no_iterative on target EM.
    pub ablation_ordering_holds: bool,
    /// Human-readable notes on any expectation that did not hold.
    pub flags: Vec<String>,
}

impl ExperimentReport {
    pub fn variant_em(&self, variant: &str) -> Option<f64> {
        self.variants
            .iter()
            .find(|v| v.variant == variant)
            .map(|v| v.val_em)
    }

    pub fn final_em(&self) -> f64 {
        self.iterations
            .last()
            .map_or(self.initial_em, |r| r.selected_em)
    }
}

/// Generates the planted-fact task, trains both proxies once and scores the
/// target under every ablation wiring. Violated expectations are reported in
/// `flags` rather than as errors.
pub fn run_experiment(
    config: &ExperimentConfig,
    out_dir: Option<&std::path::Path>,
) -> Result<ExperimentReport, SynthError> {
    let task = PlantedFactTask::generate(&config.task)?;
    let base = Arc::new(task.base_model()?);
    let target = MicroLmProvider::new("target", Arc::new(task.target_model()?), None)?;
    let train_cfg = TrainRunConfig {
        ablation: Vec::new(),
        ..config.train.clone()
    };
    let run = run_training(&base, &task.examples, &train_cfg, out_dir)?;
    let proxies = ProxySet {
        base: base.clone(),
        fap: run.fap.adapter.clone(),
        hdp: run.hdp.adapter.clone(),
    };
    let val = split_of(&task.examples, Split::Val);
    let mut variants = Vec::new();
    for flags in [
        vec![],
        vec![AblationFlag::NoNegative],
        vec![AblationFlag::NoGuidance],
        vec![AblationFlag::NoIterative],
    ] {
        let wiring = ablation_config(&flags)?;
        let val_em = generator_em(&target, &proxies, wiring.generator, &val, &config.decoding)?;
        log::info!("{}: target val EM {val_em:.3}", wiring.variant);
        variants.push(VariantScore {
            variant: wiring.variant,
            val_em,
        });
    }

    let initial_em = run.initial_em.unwrap_or(0.0);
    let mut flags = Vec::new();
    let mut prev = initial_em;
    let mut trend_non_decreasing = true;
    for r in &run.reports {
        if r.selected_em < prev {
            trend_non_decreasing = false;
            flags.push(format!(
                "selected EM fell in round {}: {prev:.3} -> {:.3}",
                r.iteration, r.selected_em
            ));
        }
        prev = r.selected_em;
    }
    let em = |name: &str| {
        variants
            .iter()
            .find(|v| v.variant == name)
            .map_or(0.0, |v| v.val_em)
    };
    let (full, no_neg, no_iter) = (em("full"), em("no_negative"), em("no_iterative"));
    if full < no_neg {
        flags.push(format!(
            "ablation ordering violated: full {full:.3} < no_negative {no_neg:.3}"
        ));
    }
    if no_neg < no_iter {
        flags.push(format!(
            "ablation ordering violated: no_negative {no_neg:.3} < no_iterative {no_iter:.3}"
        ));
    }
    for f in &flags {
        log::warn!("{f}");
    }
    Ok(ExperimentReport {
        initial_em,
        iterations: run.reports,
        variants,
        trend_non_decreasing,
        ablation_ordering_holds: full >= no_neg && no_neg >= no_iter,
        flags,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::align_train::Split;

    #[test]
    fn generation_shape() {
        let task = PlantedFactTask::generate(&PlantedFactConfig::default()).unwrap();
        assert_eq!(task.examples.len(), 200);
        assert_eq!(
            task.examples
                .iter()
                .filter(|e| e.split == Some(Split::Train))
                .count(),
            160
        );
        assert_eq!(task.corrupted.len(), 100);
        for ex in &task.examples {
            assert_ne!(ex.correct_answer, ex.hallucinated_answer);
        }
        assert_eq!(
            task,
            PlantedFactTask::generate(&PlantedFactConfig::default()).unwrap()
        );
        let v = model_vocabulary("p", &task.proxy_words).unwrap();
        assert!(task
            .examples
            .iter()
            .all(|e| e.question.split_whitespace().all(|w| v.id_of(w).is_some())));
    }
}

//! Training-set construction: question paraphrasing, answer perturbation
//! into hallucinations, external question supplementation, and the
//! train/validation split. All generation goes through a [`GenClient`].

mod client;
pub mod templates;

use std::collections::HashSet;
use std::io::BufRead;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::align_train::{Provenance, Split, TrainingExample};
use crate::parallel::map_ordered;

pub use client::{ClientError, GenClient, HttpClientConfig, HttpGenClient, MockClient};
pub use templates::{AugmentationTemplate, EXTERNAL, PARAPHRASE, PERTURB, TEMPLATE_VERSION};

#[derive(Debug, Error)]
pub enum AugError {
    #[error("{0} is empty")]
    EmptyInput(&'static str),
    #[error("malformed client output ({reason}); raw output: {raw:?}")]
    MalformedClientOutput { reason: String, raw: String },
    #[error(transparent)]
    ClientFailure(#[from] ClientError),
    #[error("need at least 2 examples to split, got {0}")]
    TooFewExamples(usize),
    #[error("split ratio must lie in (0, 1], got {0}")]
    InvalidRatio(f64),
    #[error("input: {0}")]
    Data(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

fn malformed(reason: impl Into<String>, raw: &str) -> AugError {
    AugError::MalformedClientOutput {
        reason: reason.into(),
        raw: raw.to_string(),
    }
}

fn unquote(s: &str) -> &str {
    let s = s.trim();
    for (open, close) in [('"', '"'), ('\u{201c}', '\u{201d}')] {
        if let Some(inner) = s.strip_prefix(open).and_then(|r| r.strip_suffix(close)) {
            return inner.trim();
        }
    }
    s
}

/// Value after `label` on the first line that starts with it.
fn labelled<'a>(raw: &'a str, label: &str) -> Option<&'a str> {
    raw.lines()
        .map(|l| l.trim().trim_start_matches(['*', '-', ' ']))
        .find_map(|l| l.strip_prefix(label))
        .map(|v| unquote(v.trim_start_matches('*')))
}

fn require<'a>(raw: &'a str, label: &str) -> Result<&'a str, AugError> {
    match labelled(raw, label) {
        Some(v) if !v.is_empty() => Ok(v),
        Some(_) => Err(malformed(format!("`{label}` is empty"), raw)),
        None => Err(malformed(format!("missing `{label}`"), raw)),
    }
}

fn call(
    client: &dyn GenClient,
    template: &AugmentationTemplate,
    value: &str,
) -> Result<String, AugError> {
    let (system, instruction) = template.render(value);
    Ok(client.complete(&system, &instruction)?)
}

/// Three paraphrases of `question`, each different from it.
pub fn paraphrase_question(
    question: &str,
    client: &dyn GenClient,
) -> Result<[String; 3], AugError> {
    if question.trim().is_empty() {
        return Err(AugError::EmptyInput("question"));
    }
    let raw = call(client, &PARAPHRASE, question)?;
    let mut out: [String; 3] = Default::default();
    for (slot, label) in out.iter_mut().zip(PARAPHRASE.output_labels) {
        let p = require(&raw, label)?;
        if p == question {
            return Err(malformed(
                format!("`{label}` repeats the original question"),
                &raw,
            ));
        }
        *slot = p.to_string();
    }
    Ok(out)
}

/// One hallucinated variant of `correct`.
pub fn perturb_answer(correct: &str, client: &dyn GenClient) -> Result<String, AugError> {
    if correct.trim().is_empty() {
        return Err(AugError::EmptyInput("correct answer"));
    }
    let raw = call(client, &PERTURB, correct)?;
    let h = require(&raw, PERTURB.output_labels[0])?;
    if h == correct {
        return Err(malformed(
            "hallucinated answer equals the correct answer",
            &raw,
        ));
    }
    Ok(h.to_string())
}

/// An external question whose generation failed to parse.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedItem {
    pub op: String,
    pub input: String,
    pub reason: String,
}

fn supplement_one(question: &str, client: &dyn GenClient) -> Result<(String, String), AugError> {
    if question.trim().is_empty() {
        return Err(AugError::EmptyInput("question"));
    }
    let raw = call(client, &EXTERNAL, question)?;
    let correct = require(&raw, EXTERNAL.output_labels[0])?;
    let hallucinated = require(&raw, EXTERNAL.output_labels[1])?;
    if correct == hallucinated {
        return Err(malformed("both answers are identical", &raw));
    }
    Ok((correct.to_string(), hallucinated.to_string()))
}

/// Correct and hallucinated answers for each external question. Items whose
/// output cannot be parsed are skipped and reported; order follows input.
pub fn supplement_external(
    questions: &[String],
    client: &dyn GenClient,
    concurrency: usize,
) -> (Vec<TrainingExample>, Vec<SkippedItem>) {
    let results = map_ordered(questions, concurrency, |q| supplement_one(q, client));
    let mut examples = Vec::new();
    let mut skipped = Vec::new();
    for (i, (q, r)) in questions.iter().zip(results).enumerate() {
        match r {
            Ok((correct, hallucinated)) => examples.push(
                TrainingExample::new(format!("ext-{i}"), q.clone(), correct, hallucinated)
                    .with_provenance(Provenance::External),
            ),
            Err(e) => {
                log::warn!("external item {i} skipped: {e}");
                skipped.push(SkippedItem {
                    op: "external".into(),
                    input: q.clone(),
                    reason: e.to_string(),
                });
            }
        }
    }
    (examples, skipped)
}

/// Number of training examples for `n` items at `ratio` (ceiling).
pub fn train_count(n: usize, ratio: f64) -> usize {
    // the epsilon keeps exact products such as 0.8 * 10 from rounding up
    (((ratio * n as f64) - 1e-9).ceil().max(0.0) as usize).min(n)
}

/// Shuffles under `seed` and assigns the first `ceil(ratio * n)` examples
/// to train, the rest to validation. Returned in shuffled order.
pub fn split_dataset(
    mut data: Vec<TrainingExample>,
    ratio: f64,
    seed: u64,
) -> Result<Vec<TrainingExample>, AugError> {
    if data.len() < 2 {
        return Err(AugError::TooFewExamples(data.len()));
    }
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(AugError::InvalidRatio(ratio));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    data.shuffle(&mut rng);
    let n_train = train_count(data.len(), ratio);
    for (i, ex) in data.iter_mut().enumerate() {
        ex.split = Some(if i < n_train {
            Split::Train
        } else {
            Split::Val
        });
    }
    Ok(data)
}

/// An input record; the hallucinated answer may be missing.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceRecord {
    #[serde(default)]
    pub id: String,
    pub question: String,
    pub correct_answer: String,
    #[serde(default)]
    pub hallucinated_answer: Option<String>,
}

pub fn read_sources(input: impl BufRead) -> Result<Vec<SourceRecord>, AugError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut r: SourceRecord = serde_json::from_str(&line)
            .map_err(|e| AugError::Data(format!("line {}: {e}", i + 1)))?;
        if r.id.is_empty() {
            r.id = i.to_string();
        }
        out.push(r);
    }
    Ok(out)
}

pub fn load_sources(path: &Path) -> Result<Vec<SourceRecord>, AugError> {
    read_sources(std::io::BufReader::new(std::fs::File::open(path)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentOp {
    Paraphrase,
    Perturb,
    External,
}

impl std::str::FromStr for AugmentOp {
    type Err = AugError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "paraphrase" => Ok(Self::Paraphrase),
            "perturb" => Ok(Self::Perturb),
            "external" => Ok(Self::External),
            other => Err(AugError::Data(format!("unknown augmentation op `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub ops: Vec<AugmentOp>,
    pub seed: u64,
    pub split_ratio: f64,
    pub concurrency: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            ops: vec![
                AugmentOp::Paraphrase,
                AugmentOp::Perturb,
                AugmentOp::External,
            ],
            seed: 0,
            split_ratio: 0.8,
            concurrency: 4,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvenanceCounts {
    pub felm_original: usize,
    pub paraphrase: usize,
    pub perturbation: usize,
    pub external: usize,
    pub synthetic: usize,
}

impl ProvenanceCounts {
    pub fn of(data: &[TrainingExample]) -> Self {
        let mut c = Self::default();
        for ex in data {
            *match ex.provenance {
                Provenance::FelmOriginal => &mut c.felm_original,
                Provenance::Paraphrase => &mut c.paraphrase,
                Provenance::Perturbation => &mut c.perturbation,
                Provenance::External => &mut c.external,
                Provenance::Synthetic => &mut c.synthetic,
            } += 1;
        }
        c
    }
}

/// Written next to an augmented dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentManifest {
    pub template_version: String,
    pub client: String,
    pub seed: u64,
    pub ops: Vec<AugmentOp>,
    pub split_ratio: f64,
    pub counts: ProvenanceCounts,
    pub train: usize,
    pub val: usize,
    pub skipped: Vec<SkippedItem>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentOutcome {
    pub dataset: Vec<TrainingExample>,
    pub manifest: AugmentManifest,
}

/// Builds a split dataset from source records and optional external
/// questions.
///
/// Sources lacking a hallucinated answer get one from `perturb` (provenance
/// `perturbation`); without that op they are skipped. Each resulting base
/// example contributes three `paraphrase` copies that keep its answers.
/// Per-item failures are logged and listed in the manifest.
pub fn augment(
    sources: &[SourceRecord],
    external_questions: &[String],
    client: &dyn GenClient,
    config: &AugmentConfig,
) -> Result<AugmentOutcome, AugError> {
    let has = |op| config.ops.contains(&op);
    let mut skipped = Vec::new();
    let mut ids = HashSet::new();
    for s in sources {
        if !ids.insert(s.id.as_str()) {
            return Err(AugError::Data(format!("duplicate source id `{}`", s.id)));
        }
    }

    let perturbed = map_ordered(
        sources,
        config.concurrency,
        |s| -> Result<TrainingExample, AugError> {
            if s.question.trim().is_empty() {
                return Err(AugError::EmptyInput("question"));
            }
            match &s.hallucinated_answer {
                Some(h) if !h.trim().is_empty() => Ok(TrainingExample::new(
                    &s.id,
                    &s.question,
                    &s.correct_answer,
                    h,
                )),
                _ if has(AugmentOp::Perturb) => {
                    let h = perturb_answer(&s.correct_answer, client)?;
                    Ok(
                        TrainingExample::new(&s.id, &s.question, &s.correct_answer, h)
                            .with_provenance(Provenance::Perturbation),
                    )
                }
                _ => Err(AugError::Data(
                    "no hallucinated answer and perturbation disabled".into(),
                )),
            }
        },
    );
    let mut base = Vec::new();
    for (s, r) in sources.iter().zip(perturbed) {
        match r {
            Ok(ex) => base.push(ex),
            Err(e) => {
                log::warn!("source `{}` skipped: {e}", s.id);
                skipped.push(SkippedItem {
                    op: "perturb".into(),
                    input: s.id.clone(),
                    reason: e.to_string(),
                });
            }
        }
    }

    let mut dataset = base.clone();
    if has(AugmentOp::Paraphrase) {
        let paraphrased = map_ordered(&base, config.concurrency, |ex| {
            paraphrase_question(&ex.question, client)
        });
        for (ex, r) in base.iter().zip(paraphrased) {
            match r {
                Ok(ps) => {
                    for (i, p) in ps.into_iter().enumerate() {
                        let mut copy = ex.clone();
                        copy.id = format!("{}-p{}", ex.id, i + 1);
                        copy.question = p;
                        copy.provenance = Provenance::Paraphrase;
                        dataset.push(copy);
                    }
                }
                Err(e) => {
                    log::warn!("paraphrase of `{}` skipped: {e}", ex.id);
                    skipped.push(SkippedItem {
                        op: "paraphrase".into(),
                        input: ex.id.clone(),
                        reason: e.to_string(),
                    });
                }
            }
        }
    }
    if has(AugmentOp::External) {
        let (ext, ext_skipped) =
            supplement_external(external_questions, client, config.concurrency);
        dataset.extend(ext);
        skipped.extend(ext_skipped);
    }

    let dataset = split_dataset(dataset, config.split_ratio, config.seed)?;
    let train = dataset
        .iter()
        .filter(|e| e.split == Some(Split::Train))
        .count();
    Ok(AugmentOutcome {
        manifest: AugmentManifest {
            template_version: TEMPLATE_VERSION.into(),
            client: client.name().to_string(),
            seed: config.seed,
            ops: config.ops.clone(),
            split_ratio: config.split_ratio,
            counts: ProvenanceCounts::of(&dataset),
            train,
            val: dataset.len() - train,
            skipped,
        },
        dataset,
    })
}

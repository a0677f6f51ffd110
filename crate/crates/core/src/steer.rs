//! Steered autoregressive decoding.
//!
//! At every step the target, FAP and HDP providers see the same context
//! text. The proxy logit difference `g = l_fap - l_hdp` is projected onto
//! the target vocabulary (non-shared ids get 0), scaled by `lambda` and added
//! to the target logits before sampling. Target parameters are never touched.

use std::io::{BufRead, Write};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::providers::{LogitProvider, ProviderError, ProviderInfo, TokenJoin};
use crate::vocab::{
    project_steering, LogitVector, SharedVocabMap, SteeringVector, TokenId, VocabError, Vocabulary,
};

pub const TRACE_SCHEMA: &str = "proxysteer.trace/1";

#[derive(Debug, Error)]
pub enum SteerError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("adjusted logit at index {index} is not finite ({value})")]
    NonFiniteResult { index: usize, value: f64 },
    #[error("FAP and HDP must share one vocabulary (hashes {fap} vs {hdp})")]
    ProxyVocabMismatch { fap: String, hdp: String },
    #[error("invalid decoding config: {0}")]
    InvalidConfig(String),
    #[error("step {step}: {role} provider failed: {source}")]
    Provider {
        step: usize,
        role: &'static str,
        #[source]
        source: ProviderError,
    },
    #[error("trace: {0}")]
    Trace(String),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl SteerError {
    fn from_vocab(e: VocabError) -> Self {
        match e {
            VocabError::DimensionMismatch { expected, actual } => {
                Self::DimensionMismatch { expected, actual }
            }
            other => Self::Vocab(other),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SamplingPolicy {
    #[default]
    Greedy,
    Temperature {
        tau: f64,
    },
}

impl std::str::FromStr for SamplingPolicy {
    type Err = SteerError;

    /// `greedy` or `temperature:<tau>`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || SteerError::InvalidConfig(format!("unknown sampling policy `{s}`"));
        match s.trim().split_once(':') {
            None if s.trim() == "greedy" => Ok(Self::Greedy),
            Some(("temperature", tau)) => Ok(Self::Temperature {
                tau: tau.trim().parse().map_err(|_| bad())?,
            }),
            _ => Err(bad()),
        }
    }
}

impl std::fmt::Display for SamplingPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Greedy => write!(f, "greedy"),
            Self::Temperature { tau } => write!(f, "temperature:{tau}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodingConfig {
    pub max_new_tokens: usize,
    pub policy: SamplingPolicy,
    /// Steering strength; 1.0 adds the projected steering vector unscaled.
    pub lambda: f64,
    pub seed: u64,
    pub record_trace: bool,
}

impl Default for DecodingConfig {
    fn default() -> Self {
        Self {
            max_new_tokens: 128,
            policy: SamplingPolicy::Greedy,
            lambda: 1.0,
            seed: 0,
            record_trace: false,
        }
    }
}

impl DecodingConfig {
    pub fn validate(&self) -> Result<(), SteerError> {
        if self.max_new_tokens == 0 {
            return Err(SteerError::InvalidConfig(
                "max_new_tokens must be at least 1".into(),
            ));
        }
        if let SamplingPolicy::Temperature { tau } = self.policy {
            if !(tau > 0.0 && tau.is_finite()) {
                return Err(SteerError::InvalidConfig(format!(
                    "temperature must be > 0, got {tau}"
                )));
            }
        }
        if !self.lambda.is_finite() {
            return Err(SteerError::InvalidConfig(format!(
                "lambda must be finite, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// `g = l_fap - l_hdp`, elementwise over the proxy vocabulary.
pub fn steering_vector(
    l_fap: &LogitVector,
    l_hdp: &LogitVector,
) -> Result<SteeringVector, SteerError> {
    l_hdp
        .expect_size(l_fap.vocab_size())
        .map_err(SteerError::from_vocab)?;
    let g = l_fap
        .values()
        .iter()
        .zip(l_hdp.values())
        .map(|(f, h)| f - h)
        .collect();
    SteeringVector::new(g).map_err(SteerError::from_vocab)
}

/// `l_target + lambda * g_hat`.
pub fn adjust_logits(
    l_target: &LogitVector,
    g_hat: &SteeringVector,
    lambda: f64,
) -> Result<LogitVector, SteerError> {
    if g_hat.vocab_size() != l_target.vocab_size() {
        return Err(SteerError::DimensionMismatch {
            expected: l_target.vocab_size(),
            actual: g_hat.vocab_size(),
        });
    }
    let out: Vec<f64> = l_target
        .values()
        .iter()
        .zip(g_hat.values())
        .map(|(t, g)| t + lambda * g)
        .collect();
    if let Some(index) = out.iter().position(|v| !v.is_finite()) {
        return Err(SteerError::NonFiniteResult {
            index,
            value: out[index],
        });
    }
    Ok(LogitVector::new(out)?)
}

/// Max-subtracted softmax of `logits / temperature`.
pub fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let exp: Vec<f64> = logits
        .iter()
        .map(|&v| ((v - max) / temperature).exp())
        .collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}

/// Lowest id among the maxima.
pub fn argmax(values: &[f64]) -> TokenId {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sampled {
    pub token: TokenId,
    /// Probability of `token` under the distribution it was drawn from.
    pub probability: f64,
}

/// Picks the next token. Greedy never touches `rng`; temperature sampling
/// draws exactly one uniform `f64` per call.
pub fn sample_next(
    l_adjusted: &LogitVector,
    policy: SamplingPolicy,
    rng: &mut ChaCha8Rng,
) -> Sampled {
    let logits = l_adjusted.values();
    match policy {
        SamplingPolicy::Greedy => {
            let probs = softmax(logits, 1.0);
            let token = argmax(logits);
            Sampled {
                token,
                probability: probs[token],
            }
        }
        SamplingPolicy::Temperature { tau } => {
            let probs = softmax(logits, tau);
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut token = probs.len() - 1;
            for (i, &p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    token = i;
                    break;
                }
            }
            // rounding can leave `acc` just below 1; never land on a zero-probability tail
            while probs[token] == 0.0 && token > 0 {
                token -= 1;
            }
            Sampled {
                token,
                probability: probs[token],
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Eos,
    MaxLen,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub context: String,
    pub l_target: LogitVector,
    pub l_fap: LogitVector,
    pub l_hdp: LogitVector,
    pub g: SteeringVector,
    pub g_hat: SteeringVector,
    pub l_adjusted: LogitVector,
    pub token: TokenId,
    pub token_text: String,
    pub probability: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationTrace {
    pub prompt: String,
    /// Emitted target ids, excluding a terminating end-of-sequence token.
    pub tokens: Vec<TokenId>,
    /// Probability of each sampled token, including a terminating EOS.
    pub probabilities: Vec<f64>,
    /// The generated continuation (prompt excluded).
    pub text: String,
    pub stop_reason: StopReason,
    pub lambda: f64,
    pub steps: Vec<StepRecord>,
}

fn provider_err(step: usize, role: &'static str) -> impl FnOnce(ProviderError) -> SteerError {
    move |source| SteerError::Provider { step, role, source }
}

fn query(
    p: &dyn LogitProvider,
    context: &str,
    step: usize,
    role: &'static str,
) -> Result<LogitVector, SteerError> {
    let l = p.logits(context).map_err(provider_err(step, role))?;
    l.expect_size(p.vocabulary().len())
        .map_err(|e| SteerError::Provider {
            step,
            role,
            source: ProviderError::Vocab(e),
        })?;
    Ok(l)
}

fn continuation_text(vocab: &Vocabulary, join: TokenJoin, tokens: &[TokenId]) -> String {
    tokens
        .iter()
        .filter_map(|&t| vocab.token(t))
        .fold(String::new(), |acc, tok| join.append(&acc, tok))
}

/// Steered decoding of `prompt`. `map` must pair the proxies' vocabulary with
/// the target's.
pub fn decode(
    target: &dyn LogitProvider,
    fap: &dyn LogitProvider,
    hdp: &dyn LogitProvider,
    map: &SharedVocabMap,
    prompt: &str,
    config: &DecodingConfig,
) -> Result<GenerationTrace, SteerError> {
    config.validate()?;
    let (fv, hv) = (fap.vocabulary(), hdp.vocabulary());
    if fv.tokens() != hv.tokens() {
        return Err(SteerError::ProxyVocabMismatch {
            fap: fv.content_hash(),
            hdp: hv.content_hash(),
        });
    }
    if map.proxy_size() != fv.len() {
        return Err(SteerError::DimensionMismatch {
            expected: fv.len(),
            actual: map.proxy_size(),
        });
    }
    if map.target_size() != target.vocabulary().len() {
        return Err(SteerError::DimensionMismatch {
            expected: target.vocabulary().len(),
            actual: map.target_size(),
        });
    }
    run_loop(target, prompt, config, |step, context, l_target| {
        let l_fap = query(fap, context, step, "fap")?;
        let l_hdp = query(hdp, context, step, "hdp")?;
        let g = steering_vector(&l_fap, &l_hdp)?;
        let g_hat = project_steering(&g, map).map_err(SteerError::from_vocab)?;
        let l_adjusted = adjust_logits(&l_target, &g_hat, config.lambda)?;
        Ok((l_adjusted, Some((l_fap, l_hdp, g, g_hat))))
    })
}

/// Plain decoding of the target alone, with the same sampling rules.
pub fn decode_unsteered(
    target: &dyn LogitProvider,
    prompt: &str,
    config: &DecodingConfig,
) -> Result<GenerationTrace, SteerError> {
    config.validate()?;
    run_loop(target, prompt, config, |_, _, l_target| {
        Ok((l_target, None))
    })
}

type StepParts = (LogitVector, LogitVector, SteeringVector, SteeringVector);

fn run_loop(
    target: &dyn LogitProvider,
    prompt: &str,
    config: &DecodingConfig,
    mut adjust: impl FnMut(
        usize,
        &str,
        LogitVector,
    ) -> Result<(LogitVector, Option<StepParts>), SteerError>,
) -> Result<GenerationTrace, SteerError> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let eos = target.eos_token_id();
    let mut context = prompt.to_string();
    let mut tokens = Vec::new();
    let mut probabilities = Vec::new();
    let mut steps = Vec::new();
    let mut stop_reason = StopReason::MaxLen;
    for step in 0..config.max_new_tokens {
        let l_target = query(target, &context, step, "target")?;
        let (l_adjusted, parts) = adjust(step, &context, l_target.clone())?;
        let Sampled { token, probability } = sample_next(&l_adjusted, config.policy, &mut rng);
        probabilities.push(probability);
        if config.record_trace {
            let (l_fap, l_hdp, g, g_hat) = parts.unwrap_or_else(|| {
                let n = l_target.vocab_size();
                (
                    LogitVector::zeros(0),
                    LogitVector::zeros(0),
                    SteeringVector::zeros(0),
                    SteeringVector::zeros(n),
                )
            });
            steps.push(StepRecord {
                step,
                context: context.clone(),
                l_target,
                l_fap,
                l_hdp,
                g,
                g_hat,
                l_adjusted,
                token,
                token_text: target
                    .vocabulary()
                    .token(token)
                    .unwrap_or_default()
                    .to_string(),
                probability,
            });
        }
        if Some(token) == eos {
            stop_reason = StopReason::Eos;
            break;
        }
        tokens.push(token);
        context = target.append_token(&context, token);
    }
    Ok(GenerationTrace {
        prompt: prompt.to_string(),
        text: continuation_text(target.vocabulary(), target.token_join(), &tokens),
        tokens,
        probabilities,
        stop_reason,
        lambda: config.lambda,
        steps,
    })
}

/// Serializes calls into a provider that declared exclusive use.
struct Serialized<'a> {
    inner: &'a dyn LogitProvider,
    lock: Mutex<()>,
}

impl LogitProvider for Serialized<'_> {
    fn vocabulary(&self) -> &Vocabulary {
        self.inner.vocabulary()
    }
    fn logits(&self, context: &str) -> Result<LogitVector, ProviderError> {
        let _guard = self.lock.lock().expect("provider lock poisoned");
        self.inner.logits(context)
    }
    fn eos_token_id(&self) -> Option<TokenId> {
        self.inner.eos_token_id()
    }
    fn token_join(&self) -> TokenJoin {
        self.inner.token_join()
    }
    fn describe(&self) -> ProviderInfo {
        self.inner.describe()
    }
}

fn guard(p: &dyn LogitProvider) -> Serialized<'_> {
    Serialized {
        inner: p,
        lock: Mutex::new(()),
    }
}

/// Decodes several prompts on up to `threads` worker threads. Output order
/// follows `prompts`. Providers that declare exclusive use are called under
/// a lock.
pub fn decode_batch(
    target: &dyn LogitProvider,
    fap: &dyn LogitProvider,
    hdp: &dyn LogitProvider,
    map: &SharedVocabMap,
    prompts: &[String],
    config: &DecodingConfig,
    threads: usize,
) -> Vec<Result<GenerationTrace, SteerError>> {
    let (gt, gf, gh) = (guard(target), guard(fap), guard(hdp));
    let pick = |p: &'_ dyn LogitProvider, g: &'_ Serialized<'_>| -> bool {
        p.describe().exclusive && std::ptr::eq(p, g.inner)
    };
    let t: &dyn LogitProvider = if pick(target, &gt) { &gt } else { target };
    let f: &dyn LogitProvider = if pick(fap, &gf) { &gf } else { fap };
    let h: &dyn LogitProvider = if pick(hdp, &gh) { &gh } else { hdp };
    crate::parallel::map_ordered(prompts, threads, |prompt| {
        decode(t, f, h, map, prompt, config)
    })
}

/// First line of a trace file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub schema: String,
    pub prompt: String,
    pub lambda: f64,
    pub policy: SamplingPolicy,
    pub seed: u64,
    pub target: Option<ProviderInfo>,
    pub fap: Option<ProviderInfo>,
    pub hdp: Option<ProviderInfo>,
    pub shared_map: Option<SharedVocabMap>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub tokens: Vec<TokenId>,
    pub text: String,
    pub stop_reason: StopReason,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TraceLine {
    Header(TraceHeader),
    Step(StepRecord),
    Summary(TraceSummary),
}

/// Writes a JSONL trace: one header line, one line per step, one summary line.
pub fn write_trace(
    out: &mut impl Write,
    header: &TraceHeader,
    trace: &GenerationTrace,
) -> Result<(), SteerError> {
    let mut emit = |line: &TraceLine| -> Result<(), SteerError> {
        serde_json::to_writer(&mut *out, line).map_err(|e| SteerError::Trace(e.to_string()))?;
        out.write_all(b"\n")?;
        Ok(())
    };
    emit(&TraceLine::Header(header.clone()))?;
    for step in &trace.steps {
        emit(&TraceLine::Step(step.clone()))?;
    }
    emit(&TraceLine::Summary(TraceSummary {
        tokens: trace.tokens.clone(),
        text: trace.text.clone(),
        stop_reason: trace.stop_reason,
        steps: trace.probabilities.len(),
    }))
}

pub fn read_trace(
    input: impl BufRead,
) -> Result<(TraceHeader, Vec<StepRecord>, TraceSummary), SteerError> {
    let mut header = None;
    let mut steps = Vec::new();
    let mut summary = None;
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: TraceLine = serde_json::from_str(&line)
            .map_err(|e| SteerError::Trace(format!("line {}: {e}", i + 1)))?;
        match parsed {
            TraceLine::Header(h) => {
                if h.schema != TRACE_SCHEMA {
                    return Err(SteerError::Trace(format!(
                        "unsupported schema `{}`",
                        h.schema
                    )));
                }
                header = Some(h)
            }
            TraceLine::Step(s) => steps.push(s),
            TraceLine::Summary(s) => summary = Some(s),
        }
    }
    let header = header.ok_or_else(|| SteerError::Trace("missing header line".into()))?;
    let summary = summary.ok_or_else(|| SteerError::Trace("missing summary line".into()))?;
    Ok((header, steps, summary))
}

/// Recomputes the steering arithmetic of every recorded step. Returns the
/// indices of steps whose stored `g`, `g_hat` or `l_adjusted` differ from the
/// recomputation in any bit.
pub fn replay_steps(
    steps: &[StepRecord],
    map: &SharedVocabMap,
    lambda: f64,
) -> Result<Vec<usize>, SteerError> {
    let mut bad = Vec::new();
    for s in steps {
        let g = steering_vector(&s.l_fap, &s.l_hdp)?;
        let g_hat = project_steering(&g, map).map_err(SteerError::from_vocab)?;
        let adj = adjust_logits(&s.l_target, &g_hat, lambda)?;
        let same = |a: &[f64], b: &[f64]| {
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
        };
        if !(same(g.values(), s.g.values())
            && same(g_hat.values(), s.g_hat.values())
            && same(adj.values(), s.l_adjusted.values()))
        {
            bad.push(s.step);
        }
    }
    Ok(bad)
}

//! Answer scoring: exact match, the keyword-based factual consistency rate
//! (FCR), and a seam for external hallucination scorers.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::BufRead;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::align_train::TrainingExample;
use crate::retry::{with_retry, Attempt, RetryPolicy};

/// Identifies the FCR definition used in a report.
pub const FCR_FORMULA: &str = "fcr/1: clamp01((hit_gt - hit_hal) / |gt_keywords|)";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("keyword spec `{0}` has no ground-truth keywords")]
    EmptySpec(String),
    #[error("keyword spec `{id}` lists `{phrase}` as both ground truth and hallucination")]
    OverlappingKeywords { id: String, phrase: String },
    #[error("predictions do not align with the dataset: {0}")]
    IdMismatch(String),
    #[error("{0}")]
    Parse(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Case-folds, trims, collapses runs of whitespace and strips trailing
/// punctuation.
pub fn normalize_answer(text: &str) -> String {
    let folded = text.to_lowercase();
    let collapsed = folded.split_whitespace().collect::<Vec<_>>().join(" ");
    collapsed
        .trim_end_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace())
        .to_string()
}

pub fn exact_match(prediction: &str, gold: &str) -> bool {
    normalize_answer(prediction) == normalize_answer(gold)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    /// Case-insensitive, and the phrase must not be flanked by letters or digits.
    #[default]
    WordBoundary,
    /// Case-insensitive substring.
    Substring,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeywordSpec {
    #[serde(default)]
    pub id: String,
    pub gt_keywords: Vec<String>,
    #[serde(default)]
    pub hal_keywords: Vec<String>,
    #[serde(default)]
    pub mode: MatchMode,
}

impl KeywordSpec {
    pub fn new<S: Into<String>>(
        gt: impl IntoIterator<Item = S>,
        hal: impl IntoIterator<Item = S>,
    ) -> Self {
        Self {
            id: String::new(),
            gt_keywords: gt.into_iter().map(Into::into).collect(),
            hal_keywords: hal.into_iter().map(Into::into).collect(),
            mode: MatchMode::default(),
        }
    }

    pub fn with_mode(mut self, mode: MatchMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        if self.gt_keywords.is_empty() {
            return Err(EvalError::EmptySpec(self.id.clone()));
        }
        let gt: HashSet<String> = self.gt_keywords.iter().map(|k| k.to_lowercase()).collect();
        if let Some(phrase) = self
            .hal_keywords
            .iter()
            .find(|k| gt.contains(&k.to_lowercase()))
        {
            return Err(EvalError::OverlappingKeywords {
                id: self.id.clone(),
                phrase: phrase.clone(),
            });
        }
        Ok(())
    }
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

/// Whether `phrase` occurs in `text` under `mode`. Empty phrases never match.
pub fn phrase_present(text: &str, phrase: &str, mode: MatchMode) -> bool {
    let (text, phrase) = (text.to_lowercase(), phrase.to_lowercase());
    if phrase.is_empty() {
        return false;
    }
    match mode {
        MatchMode::Substring => text.contains(&phrase),
        MatchMode::WordBoundary => text.match_indices(&phrase).any(|(start, m)| {
            let before = text[..start].chars().next_back();
            let after = text[start + m.len()..].chars().next();
            let left_ok =
                before.is_none_or(|c| !is_word_char(c)) || !phrase.starts_with(is_word_char);
            let right_ok =
                after.is_none_or(|c| !is_word_char(c)) || !phrase.ends_with(is_word_char);
            left_ok && right_ok
        }),
    }
}

/// Counts of ground-truth and hallucination phrases found in `answer`.
pub fn keyword_hits(answer: &str, spec: &KeywordSpec) -> (usize, usize) {
    let count = |list: &[String]| {
        list.iter()
            .filter(|k| phrase_present(answer, k, spec.mode))
            .count()
    };
    (count(&spec.gt_keywords), count(&spec.hal_keywords))
}

/// The FCR formula on raw counts.
pub fn fcr_from_hits(hit_gt: usize, hit_hal: usize, n_gt: usize) -> f64 {
    ((hit_gt as f64 - hit_hal as f64) / n_gt as f64).clamp(0.0, 1.0)
}

pub fn fcr(answer: &str, spec: &KeywordSpec) -> Result<f64, EvalError> {
    spec.validate()?;
    let (gt, hal) = keyword_hits(answer, spec);
    Ok(fcr_from_hits(gt, hal, spec.gt_keywords.len()))
}

/// External hallucination scorer. Lower scores mean fewer hallucinations.
pub trait HallucinationScorer: Send + Sync {
    fn name(&self) -> &str;
    fn score(&self, question: &str, answer: &str, reference: &str) -> Result<f64, String>;
}

/// Scorer behind an HTTP endpoint:
/// `POST url {"question", "answer", "reference"}` -> `{"score": f64}`.
pub struct RemoteScorer {
    name: String,
    url: String,
    agent: ureq::Agent,
    retry: RetryPolicy,
}

impl RemoteScorer {
    pub fn new(url: impl Into<String>, timeout: Duration, retry: RetryPolicy) -> Self {
        let url = url.into();
        Self {
            name: format!("remote:{url}"),
            url,
            agent: ureq::AgentBuilder::new().timeout(timeout).build(),
            retry,
        }
    }
}

#[derive(Deserialize)]
struct ScoreResponse {
    score: f64,
}

impl HallucinationScorer for RemoteScorer {
    fn name(&self) -> &str {
        &self.name
    }

    fn score(&self, question: &str, answer: &str, reference: &str) -> Result<f64, String> {
        let body =
            serde_json::json!({"question": question, "answer": answer, "reference": reference});
        let resp = with_retry(&self.retry, |_| {
            let r = self
                .agent
                .post(&self.url)
                .send_json(&body)
                .map_err(|e| match e {
                    ureq::Error::Status(code, _) if code < 500 && code != 429 => {
                        Attempt::Fatal(format!("HTTP {code}"))
                    }
                    other => Attempt::Retry(other.to_string()),
                })?;
            r.into_json::<ScoreResponse>()
                .map_err(|e| Attempt::Fatal(e.to_string()))
        })
        .map_err(|(msg, attempts)| format!("{msg} after {attempts} attempt(s)"))?;
        if resp.score.is_finite() {
            Ok(resp.score)
        } else {
            Err(format!("non-finite score {}", resp.score))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub prediction: String,
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(
    input: impl BufRead,
    what: &str,
) -> Result<Vec<T>, EvalError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| EvalError::Parse(format!("{what} line {}: {e}", i + 1)))?,
        );
    }
    Ok(out)
}

pub fn read_predictions(input: impl BufRead) -> Result<Vec<Prediction>, EvalError> {
    read_jsonl(input, "predictions")
}

pub fn load_predictions(path: &Path) -> Result<Vec<Prediction>, EvalError> {
    read_predictions(std::io::BufReader::new(std::fs::File::open(path)?))
}

pub fn read_specs(input: impl BufRead) -> Result<HashMap<String, KeywordSpec>, EvalError> {
    let specs: Vec<KeywordSpec> = read_jsonl(input, "keyword specs")?;
    let mut out = HashMap::new();
    for spec in specs {
        spec.validate()?;
        if out.insert(spec.id.clone(), spec).is_some() {
            return Err(EvalError::Parse("duplicate keyword spec id".into()));
        }
    }
    Ok(out)
}

pub fn load_specs(path: &Path) -> Result<HashMap<String, KeywordSpec>, EvalError> {
    read_specs(std::io::BufReader::new(std::fs::File::open(path)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub id: String,
    pub prediction: String,
    pub gold: String,
    pub em: bool,
    /// Absent when no keyword spec covers this id.
    pub fcr: Option<f64>,
    /// Scorer name -> score; `None` records a failed call.
    pub external: BTreeMap<String, Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub n: usize,
    pub accuracy_pct: f64,
    /// Mean FCR over examples with a spec, as a percentage.
    pub mean_fcr_pct: Option<f64>,
    /// Mean of the successful calls per scorer.
    pub external_means: BTreeMap<String, Option<f64>>,
}

impl Aggregates {
    pub fn from_records(records: &[ExampleRecord]) -> Self {
        let n = records.len();
        let em = records.iter().filter(|r| r.em).count();
        let fcrs: Vec<f64> = records.iter().filter_map(|r| r.fcr).collect();
        let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
        let mut names: Vec<&String> = records.iter().flat_map(|r| r.external.keys()).collect();
        names.sort();
        names.dedup();
        let external_means = names
            .into_iter()
            .map(|name| {
                let vals: Vec<f64> = records
                    .iter()
                    .filter_map(|r| r.external.get(name).copied().flatten())
                    .collect();
                (name.clone(), mean(&vals))
            })
            .collect();
        Self {
            n,
            accuracy_pct: if n == 0 {
                0.0
            } else {
                100.0 * em as f64 / n as f64
            },
            mean_fcr_pct: mean(&fcrs).map(|m| 100.0 * m),
            external_means,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fcr_formula: String,
    pub metadata: BTreeMap<String, String>,
    pub records: Vec<ExampleRecord>,
    pub aggregates: Aggregates,
}

impl EvalReport {
    pub fn render_table(&self) -> String {
        let mut header = vec![
            "Run".to_string(),
            "N".into(),
            "Accuracy(%)".into(),
            "FCR(%)".into(),
        ];
        let label = self
            .metadata
            .get("label")
            .cloned()
            .unwrap_or_else(|| "run".into());
        let mut row = vec![
            label,
            self.aggregates.n.to_string(),
            format!("{:.2}", self.aggregates.accuracy_pct),
            self.aggregates
                .mean_fcr_pct
                .map_or("-".into(), |v| format!("{v:.2}")),
        ];
        for (name, mean) in &self.aggregates.external_means {
            header.push(name.clone());
            row.push(mean.map_or("-".into(), |v| format!("{v:.4}")));
        }
        let widths: Vec<usize> = header
            .iter()
            .zip(&row)
            .map(|(h, r)| h.len().max(r.len()))
            .collect();
        let line = |cells: &[String]| {
            cells
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:<w$}"))
                .collect::<Vec<_>>()
                .join(" | ")
        };
        let rule = widths
            .iter()
            .map(|w| "-".repeat(*w))
            .collect::<Vec<_>>()
            .join("-|-");
        format!("{}\n{}\n{}\n", line(&header), rule, line(&row))
    }
}

/// Scores predictions against the dataset's correct answers. Every
/// prediction id must name a distinct dataset example.
pub fn evaluate_run(
    predictions: &[Prediction],
    dataset: &[TrainingExample],
    specs: &HashMap<String, KeywordSpec>,
    scorers: &[&dyn HallucinationScorer],
) -> Result<EvalReport, EvalError> {
    if predictions.is_empty() {
        return Err(EvalError::IdMismatch("no predictions".into()));
    }
    let by_id: HashMap<&str, &TrainingExample> =
        dataset.iter().map(|e| (e.id.as_str(), e)).collect();
    let mut seen = HashSet::new();
    let mut records = Vec::with_capacity(predictions.len());
    for p in predictions {
        if !seen.insert(p.id.as_str()) {
            return Err(EvalError::IdMismatch(format!(
                "duplicate prediction id `{}`",
                p.id
            )));
        }
        let ex = by_id.get(p.id.as_str()).ok_or_else(|| {
            EvalError::IdMismatch(format!("prediction id `{}` not in dataset", p.id))
        })?;
        let fcr = specs
            .get(&p.id)
            .map(|s| fcr(&p.prediction, s))
            .transpose()?;
        let external = scorers
            .iter()
            .map(|s| {
                let v = match s.score(&ex.question, &p.prediction, &ex.correct_answer) {
                    Ok(v) => Some(v),
                    Err(e) => {
                        log::warn!("scorer {} failed on `{}`: {e}", s.name(), p.id);
                        None
                    }
                };
                (s.name().to_string(), v)
            })
            .collect();
        records.push(ExampleRecord {
            id: p.id.clone(),
            prediction: p.prediction.clone(),
            gold: ex.correct_answer.clone(),
            em: exact_match(&p.prediction, &ex.correct_answer),
            fcr,
            external,
        });
    }
    Ok(EvalReport {
        fcr_formula: FCR_FORMULA.into(),
        metadata: BTreeMap::new(),
        aggregates: Aggregates::from_records(&records),
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn exact_match_cases() {
        assert!(exact_match("Paris.", "paris"));
        assert!(!exact_match("Paris, France", "Paris"));
        assert!(exact_match("  The   Eiffel\tTower!? ", "the eiffel tower"));
        assert!(exact_match("x", "x"));
        assert!(exact_match("", ""));
    }

    #[test]
    fn fcr_cases() {
        let spec = KeywordSpec::new(["paris", "capital"], ["lyon"]);
        assert_eq!(fcr("Paris is the capital.", &spec).unwrap(), 1.0);
        assert_eq!(fcr("It is Marseille.", &spec).unwrap(), 0.0);
        assert_eq!(fcr("Paris is the capital, not Lyon.", &spec).unwrap(), 0.5);
        assert_eq!(fcr("Lyon", &spec).unwrap(), 0.0);
        assert!(matches!(
            fcr("x", &KeywordSpec::new(Vec::<String>::new(), vec![])),
            Err(EvalError::EmptySpec(_))
        ));
        assert!(matches!(
            fcr("x", &KeywordSpec::new(["a"], ["A"])),
            Err(EvalError::OverlappingKeywords { .. })
        ));
    }

    #[test]
    fn word_boundary_vs_substring() {
        assert!(!phrase_present(
            "The category is cats",
            "cat",
            MatchMode::WordBoundary
        ));
        assert!(phrase_present(
            "The category is cats",
            "cat",
            MatchMode::Substring
        ));
        assert!(phrase_present("a cat, sat", "cat", MatchMode::WordBoundary));
        assert!(phrase_present(
            "New York City",
            "new york",
            MatchMode::WordBoundary
        ));
        assert!(phrase_present(
            "born in 1955.",
            "1955.",
            MatchMode::WordBoundary
        ));
        assert!(!phrase_present("x", "", MatchMode::Substring));
    }

    fn ds() -> Vec<TrainingExample> {
        vec![
            TrainingExample::new("a", "q1", "Paris", "Lyon"),
            TrainingExample::new("b", "q2", "Berlin", "Bonn"),
        ]
    }

    struct Flaky;
    impl HallucinationScorer for Flaky {
        fn name(&self) -> &str {
            "flaky"
        }
        fn score(&self, q: &str, _: &str, _: &str) -> Result<f64, String> {
            if q == "q1" {
                Ok(0.25)
            } else {
                Err("down".into())
            }
        }
    }

    #[test]
    fn perfect_run_and_errors() {
        let preds = vec![
            Prediction {
                id: "a".into(),
                prediction: "Paris".into(),
            },
            Prediction {
                id: "b".into(),
                prediction: "berlin.".into(),
            },
        ];
        let specs: HashMap<_, _> = [
            ("a".to_string(), KeywordSpec::new(["paris"], [])),
            ("b".to_string(), KeywordSpec::new(["berlin"], [])),
        ]
        .into_iter()
        .collect();
        let r = evaluate_run(&preds, &ds(), &specs, &[&Flaky]).unwrap();
        assert_eq!(r.aggregates.accuracy_pct, 100.0);
        assert_eq!(r.aggregates.mean_fcr_pct, Some(100.0));
        assert_eq!(r.records[1].external["flaky"], None);
        assert_eq!(r.aggregates.external_means["flaky"], Some(0.25));
        assert!(r.render_table().contains("100.00"));
        let back: EvalReport = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert_eq!(back, r);

        assert!(matches!(
            evaluate_run(&[], &ds(), &specs, &[]),
            Err(EvalError::IdMismatch(_))
        ));
        let dup = vec![preds[0].clone(), preds[0].clone()];
        assert!(matches!(
            evaluate_run(&dup, &ds(), &specs, &[]),
            Err(EvalError::IdMismatch(_))
        ));
        let unknown = vec![Prediction {
            id: "zz".into(),
            prediction: "x".into(),
        }];
        assert!(matches!(
            evaluate_run(&unknown, &ds(), &specs, &[]),
            Err(EvalError::IdMismatch(_))
        ));
    }

    proptest! {
        #[test]
        fn exact_match_symmetric_reflexive(a in "[ a-zA-Z.,!]{0,12}", b in "[ a-zA-Z.,!]{0,12}") {
            prop_assert!(exact_match(&a, &a));
            prop_assert_eq!(exact_match(&a, &b), exact_match(&b, &a));
        }

        #[test]
        fn aggregates_recompute(flags in proptest::collection::vec((any::<bool>(), proptest::option::of(0.0f64..=1.0)), 1..40)) {
            let records: Vec<ExampleRecord> = flags.iter().enumerate().map(|(i, (em, f))| ExampleRecord {
                id: i.to_string(), prediction: String::new(), gold: String::new(), em: *em, fcr: *f, external: BTreeMap::new(),
            }).collect();
            let agg = Aggregates::from_records(&records);
            let acc = 100.0 * flags.iter().filter(|f| f.0).count() as f64 / flags.len() as f64;
            prop_assert!((agg.accuracy_pct - acc).abs() < 1e-9);
            let fs: Vec<f64> = flags.iter().filter_map(|f| f.1).collect();
            match agg.mean_fcr_pct {
                None => prop_assert!(fs.is_empty()),
                Some(m) => prop_assert!((m - 100.0 * fs.iter().sum::<f64>() / fs.len() as f64).abs() < 1e-9),
            }
        }
    }
}

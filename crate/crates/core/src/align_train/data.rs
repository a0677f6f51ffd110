use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::AlignError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

/// Where an example came from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    #[default]
    FelmOriginal,
    Paraphrase,
    Perturbation,
    External,
    Synthetic,
}

/// One question with its correct and hallucinated answers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingExample {
    /// Stable identifier; files without one get the line index.
    #[serde(default)]
    pub id: String,
    pub question: String,
    pub correct_answer: String,
    pub hallucinated_answer: String,
    #[serde(default)]
    pub provenance: Provenance,
    /// `None` until the dataset has been split.
    #[serde(default)]
    pub split: Option<Split>,
}

impl TrainingExample {
    pub fn new(
        id: impl Into<String>,
        question: impl Into<String>,
        correct: impl Into<String>,
        hallucinated: impl Into<String>,
    ) -> Self {
        Self {
            id: id.into(),
            question: question.into(),
            correct_answer: correct.into(),
            hallucinated_answer: hallucinated.into(),
            provenance: Provenance::default(),
            split: None,
        }
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = Some(split);
        self
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = provenance;
        self
    }

    pub fn validate(&self) -> Result<(), AlignError> {
        for (field, text) in [
            ("question", &self.question),
            ("correct_answer", &self.correct_answer),
            ("hallucinated_answer", &self.hallucinated_answer),
        ] {
            if text.trim().is_empty() {
                return Err(AlignError::EmptyField {
                    id: self.id.clone(),
                    field,
                });
            }
        }
        Ok(())
    }
}

/// Examples assigned to `split`.
pub fn split_of(data: &[TrainingExample], split: Split) -> Vec<&TrainingExample> {
    data.iter().filter(|e| e.split == Some(split)).collect()
}

pub fn read_examples(input: impl BufRead) -> Result<Vec<TrainingExample>, AlignError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut ex: TrainingExample = serde_json::from_str(&line)
            .map_err(|e| AlignError::Data(format!("line {}: {e}", i + 1)))?;
        if ex.id.is_empty() {
            ex.id = i.to_string();
        }
        ex.validate()?;
        out.push(ex);
    }
    Ok(out)
}

pub fn load_examples(path: &Path) -> Result<Vec<TrainingExample>, AlignError> {
    let file = std::fs::File::open(path)?;
    read_examples(BufReader::new(file))
}

pub fn write_examples(out: &mut impl Write, data: &[TrainingExample]) -> Result<(), AlignError> {
    for ex in data {
        serde_json::to_writer(&mut *out, ex).map_err(|e| AlignError::Data(e.to_string()))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_examples(path: &Path, data: &[TrainingExample]) -> Result<(), AlignError> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_examples(&mut file, data)?;
    file.flush()?;
    Ok(())
}

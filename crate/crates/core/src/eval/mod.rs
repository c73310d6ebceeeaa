//! Benchmark scoring (POPE, CHAIR, MME), dataset loaders and the record-level
//! benchmark runner.

mod bench;
mod chair;
mod datasets;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bench::{
    object_set, run_chair, run_mme, run_pope, score_chair, BenchOptions, BenchReport, ChairSummary,
    GroupSummary, MmeSummary, PopeSummary, RecordRow, Timing, CAPTION_PROMPT, FAILURE_THRESHOLD,
};
pub use chair::{
    chair_scores, extract_objects, score_image, split_sentences, ChairImage, ChairImageScore, ChairScores,
    ObjectLexicon, COCO_SYNONYMS,
};
pub use datasets::{
    load_chair, load_generated_captions, load_mme, load_pope, ChairTask, MmeRecord, PopeRecord, MME_SUFFIX,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("invalid dataset: {0}")]
    Dataset(String),
    #[error("category {category}: image {image} has {count} question(s), expected 2")]
    MalformedCategory {
        category: String,
        image: String,
        count: usize,
    },
    #[error("invalid lexicon: {0}")]
    Lexicon(String),
    #[error(transparent)]
    Provider(#[from] crate::provider::ProviderError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Answer {
    Yes,
    No,
    Unparseable,
}

impl Answer {
    /// Predicted label for scoring; unparseable answers count as "no".
    pub fn predicted_yes(self) -> bool {
        self == Answer::Yes
    }

    pub fn is_correct(self, truth: bool) -> bool {
        match self {
            Answer::Yes => truth,
            Answer::No => !truth,
            Answer::Unparseable => false,
        }
    }
}

/// Whole-word, case-insensitive search for "yes" and "no"; exactly one of
/// them must occur.
pub fn parse_yes_no(answer: &str) -> Answer {
    let lower = answer.to_lowercase();
    let mut yes = false;
    let mut no = false;
    for word in lower.split(|c: char| !c.is_alphanumeric()) {
        match word {
            "yes" => yes = true,
            "no" => no = true,
            _ => {}
        }
    }
    match (yes, no) {
        (true, false) => Answer::Yes,
        (false, true) => Answer::No,
        _ => Answer::Unparseable,
    }
}

/// Parses a ground-truth label.
pub fn parse_label(label: &str) -> Option<bool> {
    match label.trim().to_ascii_lowercase().as_str() {
        "yes" => Some(true),
        "no" => Some(false),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionMatrix {
    pub fn new(tp: u64, fp: u64, tn: u64, fn_: u64) -> Self {
        Self { tp, fp, tn, fn_ }
    }

    pub fn record(&mut self, truth: bool, answer: Answer) {
        match (truth, answer.predicted_yes()) {
            (true, true) => self.tp += 1,
            (false, true) => self.fp += 1,
            (false, false) => self.tn += 1,
            (true, false) => self.fn_ += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.tn += other.tn;
        self.fn_ += other.fn_;
    }
}

/// Percentages; `None` where the denominator is zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PopeMetrics {
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

impl PopeMetrics {
    /// Each metric rounded to two decimals, as tables print them.
    pub fn rounded(&self) -> Self {
        Self {
            accuracy: self.accuracy.map(round2),
            precision: self.precision.map(round2),
            recall: self.recall.map(round2),
            f1: self.f1.map(round2),
        }
    }
}

pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| 100.0 * num as f64 / den as f64)
}

pub fn pope_metrics(cm: &ConfusionMatrix) -> PopeMetrics {
    let accuracy = ratio(cm.tp + cm.tn, cm.total());
    let precision = ratio(cm.tp, cm.tp + cm.fp);
    let recall = ratio(cm.tp, cm.tp + cm.fn_);
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        _ => None,
    };
    PopeMetrics {
        accuracy,
        precision,
        recall,
        f1,
    }
}

/// The fourteen MME subtasks; the first ten form the perception total.
pub const MME_CATEGORIES: [&str; 14] = [
    "existence",
    "count",
    "position",
    "color",
    "posters",
    "celebrity",
    "scene",
    "landmark",
    "artwork",
    "OCR",
    "commonsense_reasoning",
    "numerical_calculation",
    "text_translation",
    "code_reasoning",
];

pub fn is_perception(category: &str) -> bool {
    MME_CATEGORIES[..10].iter().any(|c| c.eq_ignore_ascii_case(category))
}

/// One scored MME question.
#[derive(Debug, Clone, PartialEq)]
pub struct MmePrediction {
    pub image: String,
    pub truth: bool,
    pub answer: Answer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MmeScore {
    pub category: String,
    pub acc: f64,
    pub acc_plus: f64,
    pub score: f64,
    pub questions: usize,
    pub images: usize,
}

/// Question-level accuracy plus image-level (both questions right) accuracy.
pub fn mme_score(category: &str, preds: &[MmePrediction]) -> Result<MmeScore, EvalError> {
    let mut by_image: BTreeMap<&str, Vec<bool>> = BTreeMap::new();
    for p in preds {
        by_image
            .entry(p.image.as_str())
            .or_default()
            .push(p.answer.is_correct(p.truth));
    }
    for (image, v) in &by_image {
        if v.len() != 2 {
            return Err(EvalError::MalformedCategory {
                category: category.to_string(),
                image: image.to_string(),
                count: v.len(),
            });
        }
    }
    if by_image.is_empty() {
        return Err(EvalError::Dataset(format!("category {category} is empty")));
    }
    let correct = by_image.values().flatten().filter(|c| **c).count();
    let both = by_image.values().filter(|v| v.iter().all(|c| *c)).count();
    let acc = 100.0 * correct as f64 / preds.len() as f64;
    let acc_plus = 100.0 * both as f64 / by_image.len() as f64;
    Ok(MmeScore {
        category: category.to_string(),
        acc,
        acc_plus,
        score: acc + acc_plus,
        questions: preds.len(),
        images: by_image.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn yes_no_parsing() {
        assert_eq!(parse_yes_no("Yes, there is a dog in the image."), Answer::Yes);
        assert_eq!(parse_yes_no("No."), Answer::No);
        assert_eq!(parse_yes_no("There might be one, yes or no is hard to say"), Answer::Unparseable);
        assert_eq!(parse_yes_no("I cannot tell"), Answer::Unparseable);
        assert_eq!(parse_yes_no("Nothing here, yesterday"), Answer::Unparseable);
        assert_eq!(parse_yes_no("NO"), Answer::No);
    }

    #[test]
    fn metrics_examples() {
        let m = pope_metrics(&ConfusionMatrix::new(1291, 267, 1233, 209)).rounded();
        assert_eq!(
            (m.accuracy, m.precision, m.recall, m.f1),
            (Some(84.13), Some(82.86), Some(86.07), Some(84.43))
        );
        let m = pope_metrics(&ConfusionMatrix::new(1331, 270, 1230, 169)).rounded();
        assert_eq!(m.accuracy, Some(85.37));
        let m = pope_metrics(&ConfusionMatrix::new(10, 0, 0, 0));
        assert_eq!((m.accuracy, m.precision, m.recall, m.f1), (Some(100.0), Some(100.0), Some(100.0), Some(100.0)));
    }

    #[test]
    fn undefined_metrics() {
        let m = pope_metrics(&ConfusionMatrix::default());
        assert_eq!(m.accuracy, None);
        let m = pope_metrics(&ConfusionMatrix::new(0, 0, 5, 0));
        assert_eq!((m.accuracy, m.precision, m.recall, m.f1), (Some(100.0), None, None, None));
        let m = pope_metrics(&ConfusionMatrix::new(0, 3, 0, 2));
        assert_eq!((m.precision, m.recall, m.f1), (Some(0.0), Some(0.0), None));
    }

    #[test]
    fn confusion_records_unparseable_as_no() {
        let mut cm = ConfusionMatrix::default();
        cm.record(true, Answer::Unparseable);
        cm.record(false, Answer::Unparseable);
        assert_eq!(cm, ConfusionMatrix::new(0, 0, 1, 1));
        let json = serde_json::to_string(&cm).unwrap();
        assert_eq!(json, r#"{"tp":0,"fp":0,"tn":1,"fn":1}"#);
    }

    fn pred(image: &str, truth: bool, answer: Answer) -> MmePrediction {
        MmePrediction {
            image: image.into(),
            truth,
            answer,
        }
    }

    #[test]
    fn mme_examples() {
        let all = [
            pred("a", true, Answer::Yes),
            pred("a", false, Answer::No),
            pred("b", true, Answer::Yes),
            pred("b", false, Answer::No),
        ];
        assert_eq!(mme_score("color", &all).unwrap().score, 200.0);
        let mut three = all.clone();
        three[3].answer = Answer::Yes;
        let s = mme_score("color", &three).unwrap();
        assert_eq!((s.acc, s.acc_plus, s.score), (75.0, 50.0, 125.0));
        let none: Vec<_> = all
            .iter()
            .map(|p| pred(&p.image, p.truth, if p.truth { Answer::No } else { Answer::Yes }))
            .collect();
        assert_eq!(mme_score("color", &none).unwrap().score, 0.0);
    }

    #[test]
    fn mme_requires_pairs() {
        let preds = [pred("a", true, Answer::Yes)];
        assert!(matches!(mme_score("count", &preds), Err(EvalError::MalformedCategory { count: 1, .. })));
    }

    #[test]
    fn perception_split() {
        assert!(is_perception("OCR"));
        assert!(!is_perception("code_reasoning"));
    }
}

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::skeleton::SkeletonSequence;

/// The 20 novel classes of the NTU RGB+D 120 one-shot protocol.
pub const NTU120_EVAL_CLASSES: [&str; 20] = [
    "A1", "A7", "A13", "A19", "A25", "A31", "A37", "A43", "A49", "A55", "A61", "A67", "A73",
    "A79", "A85", "A91", "A97", "A103", "A109", "A115",
];
pub const NWUCLA_TRAIN_CLASSES: [&str; 5] = ["A1", "A3", "A5", "A7", "A9"];
pub const NWUCLA_EVAL_CLASSES: [&str; 5] = ["A2", "A4", "A6", "A8", "A10"];
const NTU120_TRAIN_COUNTS: [usize; 5] = [20, 40, 60, 80, 100];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("class {0} required by the protocol is not in the dataset")]
    MissingClass(String),
    #[error("training_class_count must be one of 20, 40, 60, 80, 100 (got {0})")]
    TrainCount(usize),
    #[error("only {available} non-evaluation classes available, {requested} requested")]
    NotEnoughTrainClasses { requested: usize, available: usize },
    #[error("no exemplar for evaluation class {0}")]
    MissingExemplar(String),
    #[error("exemplar {sample} for class {class} is not in the dataset with that label")]
    ExemplarNotFound { class: String, sample: String },
    #[error("class {0} is both a training and an evaluation class")]
    Overlap(String),
    #[error("class {0} is listed twice")]
    Duplicate(String),
    #[error("exemplar map line {line}: {message}")]
    MapSyntax { line: usize, message: String },
    #[error("protocol needs at least one {0} class")]
    Empty(&'static str),
}

/// Natural order for class labels: `A2 < A10`, otherwise lexicographic.
pub fn label_cmp(a: &str, b: &str) -> Ordering {
    fn split(s: &str) -> (&str, Option<u64>) {
        let cut = s.trim_end_matches(|c: char| c.is_ascii_digit()).len();
        let (head, digits) = s.split_at(cut);
        (head, digits.parse().ok())
    }
    let (ha, na) = split(a);
    let (hb, nb) = split(b);
    ha.cmp(hb).then(na.cmp(&nb)).then(a.cmp(b))
}

/// `(sample_id, label)` pairs of a dataset.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Catalog {
    entries: Vec<(String, String)>,
}

impl Catalog {
    pub fn new(entries: Vec<(String, String)>) -> Self {
        Self { entries }
    }

    /// Unlabelled sequences are left out.
    pub fn from_sequences(seqs: &[SkeletonSequence]) -> Self {
        Self::new(
            seqs.iter()
                .filter_map(|s| s.label.clone().map(|l| (s.sample_id.clone(), l)))
                .collect(),
        )
    }

    /// Distinct labels in natural order.
    pub fn labels(&self) -> Vec<String> {
        let mut out: Vec<String> = self.entries.iter().map(|(_, l)| l.clone()).collect();
        out.sort_by(|a, b| label_cmp(a, b));
        out.dedup();
        out
    }

    pub fn contains(&self, sample: &str, label: &str) -> bool {
        self.entries.iter().any(|(s, l)| s == sample && l == label)
    }

    fn smallest_id(&self, label: &str) -> Option<&str> {
        self.entries
            .iter()
            .filter(|(_, l)| l == label)
            .map(|(s, _)| s.as_str())
            .min()
    }
}

/// How exemplars are chosen for the evaluation classes.
#[derive(Debug, Clone, Copy)]
pub enum Exemplars<'a> {
    /// Class → sample id, usually read with [`parse_exemplar_map`].
    Map(&'a BTreeMap<String, String>),
    /// Lexicographically smallest sample id per class.
    SmallestId(&'a Catalog),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExemplarSource {
    Map,
    SmallestId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolSplit {
    pub train_classes: Vec<String>,
    pub eval_classes: Vec<String>,
    pub exemplars: BTreeMap<String, String>,
    pub exemplar_source: ExemplarSource,
}

impl ProtocolSplit {
    /// Positions of evaluation-class samples that are not exemplars, in
    /// dataset order.
    pub fn test_pool(&self, dataset: &[SkeletonSequence]) -> Vec<usize> {
        dataset
            .iter()
            .enumerate()
            .filter(|(_, s)| {
                s.label.as_ref().is_some_and(|l| {
                    self.eval_classes.contains(l)
                        && self.exemplars.get(l).is_none_or(|e| *e != s.sample_id)
                })
            })
            .map(|(i, _)| i)
            .collect()
    }

    /// Position of each evaluation class's exemplar, in `eval_classes`
    /// order.
    pub fn exemplar_positions(
        &self,
        dataset: &[SkeletonSequence],
    ) -> Result<Vec<usize>, ProtocolError> {
        self.eval_classes
            .iter()
            .map(|c| {
                let id = self
                    .exemplars
                    .get(c)
                    .ok_or_else(|| ProtocolError::MissingExemplar(c.clone()))?;
                dataset
                    .iter()
                    .position(|s| s.sample_id == *id && s.label.as_deref() == Some(c))
                    .ok_or_else(|| ProtocolError::ExemplarNotFound {
                        class: c.clone(),
                        sample: id.clone(),
                    })
            })
            .collect()
    }
}

/// Reads `<class_id> <sample_id>` lines; blank lines and `#` comments are
/// ignored.
pub fn parse_exemplar_map(text: &str) -> Result<BTreeMap<String, String>, ProtocolError> {
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 2 {
            return Err(ProtocolError::MapSyntax {
                line: i + 1,
                message: format!("expected 2 fields, found {}", fields.len()),
            });
        }
        if map.insert(fields[0].to_string(), fields[1].to_string()).is_some() {
            return Err(ProtocolError::Duplicate(fields[0].to_string()));
        }
    }
    Ok(map)
}

fn resolve_exemplars(
    eval: &[String],
    exemplars: Exemplars,
) -> Result<(BTreeMap<String, String>, ExemplarSource), ProtocolError> {
    let mut out = BTreeMap::new();
    let source = match exemplars {
        Exemplars::Map(m) => {
            for c in eval {
                let id = m
                    .get(c)
                    .ok_or_else(|| ProtocolError::MissingExemplar(c.clone()))?;
                out.insert(c.clone(), id.clone());
            }
            ExemplarSource::Map
        }
        Exemplars::SmallestId(cat) => {
            for c in eval {
                let id = cat
                    .smallest_id(c)
                    .ok_or_else(|| ProtocolError::MissingExemplar(c.clone()))?;
                out.insert(c.clone(), id.to_string());
            }
            ExemplarSource::SmallestId
        }
    };
    Ok((out, source))
}

fn require_present(class_labels: &[String], wanted: &[String]) -> Result<(), ProtocolError> {
    match wanted.iter().find(|c| !class_labels.contains(c)) {
        Some(c) => Err(ProtocolError::MissingClass(c.clone())),
        None => Ok(()),
    }
}

/// Fixed 20 novel classes; the first `training_class_count` of the
/// remaining classes (natural label order) are training classes.
pub fn build_ntu120_protocol(
    class_labels: &[String],
    training_class_count: usize,
    exemplars: Exemplars,
) -> Result<ProtocolSplit, ProtocolError> {
    if !NTU120_TRAIN_COUNTS.contains(&training_class_count) {
        return Err(ProtocolError::TrainCount(training_class_count));
    }
    let eval: Vec<String> = NTU120_EVAL_CLASSES.iter().map(|s| s.to_string()).collect();
    require_present(class_labels, &eval)?;
    let mut rest: Vec<String> = class_labels
        .iter()
        .filter(|c| !eval.contains(c))
        .cloned()
        .collect();
    rest.sort_by(|a, b| label_cmp(a, b));
    rest.dedup();
    if rest.len() < training_class_count {
        return Err(ProtocolError::NotEnoughTrainClasses {
            requested: training_class_count,
            available: rest.len(),
        });
    }
    rest.truncate(training_class_count);
    let (map, source) = resolve_exemplars(&eval, exemplars)?;
    Ok(ProtocolSplit {
        train_classes: rest,
        eval_classes: eval,
        exemplars: map,
        exemplar_source: source,
    })
}

/// Odd-numbered classes train, even-numbered classes evaluate.
pub fn build_nwucla_protocol(
    class_labels: &[String],
    exemplars: Exemplars,
) -> Result<ProtocolSplit, ProtocolError> {
    let train: Vec<String> = NWUCLA_TRAIN_CLASSES.iter().map(|s| s.to_string()).collect();
    let eval: Vec<String> = NWUCLA_EVAL_CLASSES.iter().map(|s| s.to_string()).collect();
    require_present(class_labels, &train)?;
    require_present(class_labels, &eval)?;
    let (map, source) = resolve_exemplars(&eval, exemplars)?;
    Ok(ProtocolSplit {
        train_classes: train,
        eval_classes: eval,
        exemplars: map,
        exemplar_source: source,
    })
}

/// User-supplied class lists; they must be disjoint and present.
pub fn build_explicit_protocol(
    class_labels: &[String],
    train: &[String],
    eval: &[String],
    exemplars: Exemplars,
) -> Result<ProtocolSplit, ProtocolError> {
    if train.is_empty() {
        return Err(ProtocolError::Empty("training"));
    }
    if eval.is_empty() {
        return Err(ProtocolError::Empty("evaluation"));
    }
    for list in [train, eval] {
        for (i, c) in list.iter().enumerate() {
            if list[..i].contains(c) {
                return Err(ProtocolError::Duplicate(c.clone()));
            }
        }
    }
    if let Some(c) = train.iter().find(|c| eval.contains(c)) {
        return Err(ProtocolError::Overlap(c.clone()));
    }
    require_present(class_labels, train)?;
    require_present(class_labels, eval)?;
    let (map, source) = resolve_exemplars(eval, exemplars)?;
    Ok(ProtocolSplit {
        train_classes: train.to_vec(),
        eval_classes: eval.to_vec(),
        exemplars: map,
        exemplar_source: source,
    })
}

/// The last `eval_count` classes in natural order are held out.
pub fn build_holdout_protocol(
    class_labels: &[String],
    eval_count: usize,
    exemplars: Exemplars,
) -> Result<ProtocolSplit, ProtocolError> {
    let mut labels = class_labels.to_vec();
    labels.sort_by(|a, b| label_cmp(a, b));
    labels.dedup();
    if eval_count == 0 || eval_count >= labels.len() {
        return Err(ProtocolError::NotEnoughTrainClasses {
            requested: 1,
            available: labels.len().saturating_sub(eval_count),
        });
    }
    let eval = labels.split_off(labels.len() - eval_count);
    build_explicit_protocol(class_labels, &labels, &eval, exemplars)
}

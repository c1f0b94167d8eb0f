//! 1-nearest-neighbor classification by correlation, leave-one-out
//! cross-validation and confusion matrices.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frames::{Centered, Frame, FrameError};
use crate::training::TrainingDatabase;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClassifyError {
    #[error("no eligible entries in the database")]
    EmptyDatabase,
    #[error("query shape {actual:?} differs from database shape {expected:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error("class {0:?} has fewer than two entries")]
    InsufficientEntries(String),
    #[error("confusion matrices have different class lists")]
    ClassListMismatch,
    #[error("nothing to aggregate")]
    EmptyInput,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub class_id: String,
    /// Position of the winning frame within its class's entry list.
    pub entry_index: usize,
    pub nearest_similarity: f64,
    /// Best class similarity minus the runner-up class's best similarity;
    /// `None` when only one class is eligible.
    pub runner_up_margin: Option<f64>,
}

/// Database entries pre-centered for repeated querying.
#[derive(Debug, Clone)]
pub struct Index {
    shape: (usize, usize),
    /// (class id, entries) in lexicographic class order.
    classes: Vec<(String, Vec<Centered>)>,
}

impl Index {
    pub fn build(db: &TrainingDatabase, include_rest: bool) -> Result<Self, ClassifyError> {
        let rest_id = &db.rest_class().id;
        let classes = db
            .all_entries()
            .iter()
            .filter(|(id, frames)| (include_rest || *id != rest_id) && !frames.is_empty())
            .map(|(id, frames)| {
                let centered = frames
                    .iter()
                    .map(Centered::new)
                    .collect::<Result<Vec<_>, _>>()?;
                Ok((id.clone(), centered))
            })
            .collect::<Result<Vec<_>, ClassifyError>>()?;
        let shape = db.shape().ok_or(ClassifyError::EmptyDatabase)?;
        if classes.is_empty() {
            return Err(ClassifyError::EmptyDatabase);
        }
        Ok(Self { shape, classes })
    }

    pub fn class_ids(&self) -> impl Iterator<Item = &str> {
        self.classes.iter().map(|(id, _)| id.as_str())
    }

    pub fn classify(&self, frame: &Frame) -> Result<Prediction, ClassifyError> {
        if frame.shape() != self.shape {
            return Err(ClassifyError::ShapeMismatch {
                expected: self.shape,
                actual: frame.shape(),
            });
        }
        let query = Centered::new(frame)?;
        self.nearest(&query, None).ok_or(ClassifyError::EmptyDatabase)
    }

    /// Ties resolve to the lowest class id, then the lowest entry index,
    /// because candidates are visited in that order and only a strictly
    /// greater similarity replaces the incumbent.
    fn nearest(&self, query: &Centered, skip: Option<(usize, usize)>) -> Option<Prediction> {
        let mut best: Option<(usize, usize, f64)> = None;
        let mut per_class = Vec::with_capacity(self.classes.len());
        for (ci, (_, entries)) in self.classes.iter().enumerate() {
            let mut class_best: Option<f64> = None;
            for (ei, entry) in entries.iter().enumerate() {
                if skip == Some((ci, ei)) {
                    continue;
                }
                let r = query.dot(entry);
                if class_best.is_none_or(|b| r > b) {
                    class_best = Some(r);
                }
                if best.is_none_or(|(_, _, b)| r > b) {
                    best = Some((ci, ei, r));
                }
            }
            if let Some(b) = class_best {
                per_class.push((ci, b));
            }
        }
        let (ci, ei, r) = best?;
        let runner_up = per_class
            .iter()
            .filter(|(c, _)| *c != ci)
            .map(|(_, b)| *b)
            .fold(None, |acc: Option<f64>, b| Some(acc.map_or(b, |a| a.max(b))));
        Some(Prediction {
            class_id: self.classes[ci].0.clone(),
            entry_index: ei,
            nearest_similarity: r,
            runner_up_margin: runner_up.map(|u| r - u),
        })
    }
}

pub fn nn_classify(
    frame: &Frame,
    db: &TrainingDatabase,
    include_rest: bool,
) -> Result<Prediction, ClassifyError> {
    Index::build(db, include_rest)?.classify(frame)
}

/// Rows are the true class, columns the predicted class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: Vec<String>,
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn zeros(classes: Vec<String>) -> Self {
        let n = classes.len();
        Self {
            classes,
            counts: vec![vec![0; n]; n],
        }
    }

    pub fn from_counts(classes: Vec<String>, counts: Vec<Vec<u64>>) -> Option<Self> {
        let n = classes.len();
        (counts.len() == n && counts.iter().all(|r| r.len() == n)).then_some(Self { classes, counts })
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    fn position(&self, class: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == class)
    }

    pub fn record(&mut self, truth: &str, predicted: &str) {
        let (t, p) = (
            self.position(truth).expect("known true class"),
            self.position(predicted).expect("known predicted class"),
        );
        self.counts[t][p] += 1;
    }

    pub fn get(&self, truth: &str, predicted: &str) -> u64 {
        match (self.position(truth), self.position(predicted)) {
            (Some(t), Some(p)) => self.counts[t][p],
            _ => 0,
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes.len()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    /// Percent correct; 0 for an empty matrix.
    pub fn accuracy(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            total => self.trace() as f64 / total as f64 * 100.0,
        }
    }

    /// Header row of class ids, then one row per true class.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["true\\predicted".to_string()];
        header.extend(self.classes.iter().cloned());
        w.write_record(&header).expect("in-memory write");
        for (class, row) in self.classes.iter().zip(&self.counts) {
            let mut rec = vec![class.clone()];
            rec.extend(row.iter().map(u64::to_string));
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv")
    }
}

/// Element-wise sum of raw counts; subjects with more trials weigh more.
pub fn aggregate_confusion(matrices: &[ConfusionMatrix]) -> Result<ConfusionMatrix, ClassifyError> {
    let first = matrices.first().ok_or(ClassifyError::EmptyInput)?;
    let mut sum = first.clone();
    for m in &matrices[1..] {
        if m.classes != first.classes {
            return Err(ClassifyError::ClassListMismatch);
        }
        for (row, other) in sum.counts.iter_mut().zip(&m.counts) {
            for (a, b) in row.iter_mut().zip(other) {
                *a += b;
            }
        }
    }
    Ok(sum)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossValidation {
    pub accuracy: f64,
    pub matrix: ConfusionMatrix,
}

/// Classifies every eligible entry against all other eligible entries.
pub fn loocv(db: &TrainingDatabase, include_rest: bool) -> Result<CrossValidation, ClassifyError> {
    let index = Index::build(db, include_rest)?;
    if let Some((id, _)) = index.classes.iter().find(|(_, e)| e.len() < 2) {
        return Err(ClassifyError::InsufficientEntries(id.clone()));
    }
    let folds: Vec<(usize, usize)> = index
        .classes
        .iter()
        .enumerate()
        .flat_map(|(ci, (_, e))| (0..e.len()).map(move |ei| (ci, ei)))
        .collect();
    // collect() on an indexed parallel iterator preserves fold order
    let predictions: Vec<(usize, String)> = folds
        .par_iter()
        .map(|&(ci, ei)| {
            let p = index
                .nearest(&index.classes[ci].1[ei], Some((ci, ei)))
                .expect("every class has a second entry");
            (ci, p.class_id)
        })
        .collect();
    let mut matrix = ConfusionMatrix::zeros(index.class_ids().map(String::from).collect());
    for (ci, predicted) in predictions {
        let truth = index.classes[ci].0.clone();
        matrix.record(&truth, &predicted);
    }
    Ok(CrossValidation {
        accuracy: matrix.accuracy(),
        matrix,
    })
}

/// Per-class recall, in percent.
pub fn per_class_accuracy(matrix: &ConfusionMatrix) -> BTreeMap<String, f64> {
    matrix
        .classes
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let row: u64 = matrix.counts[i].iter().sum();
            let acc = if row == 0 {
                0.0
            } else {
                matrix.counts[i][i] as f64 / row as f64 * 100.0
            };
            (c.clone(), acc)
        })
        .collect()
}

//! Accuracy matrices, the ACC metric, run records and report files.

mod report;

pub use report::{emit_report, fmt_sig, parse_summary, SummaryRow};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::SequenceSet;
use crate::error::{Error, Result};
use crate::models::Classifier;
use crate::strategies::Diagnostics;

/// `R[i][t]`: test accuracy on step `t` after training through step `i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<Option<f64>>>,
}

impl AccuracyMatrix {
    /// `trained` rows (training steps) by `evaluated` columns (test steps).
    pub fn new(trained: usize, evaluated: usize) -> Self {
        AccuracyMatrix {
            rows: vec![vec![None; evaluated]; trained],
        }
    }

    pub fn from_rows(rows: Vec<Vec<Option<f64>>>) -> Result<Self> {
        let width = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::Protocol("accuracy matrix rows differ in length".into()));
        }
        if let Some(v) = rows.iter().flatten().flatten().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Protocol(format!("accuracy {v} outside [0, 1]")));
        }
        Ok(AccuracyMatrix { rows })
    }

    pub fn trained(&self) -> usize {
        self.rows.len()
    }

    pub fn evaluated(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    pub fn set(&mut self, i: usize, t: usize, acc: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&acc) {
            return Err(Error::Protocol(format!("accuracy {acc} outside [0, 1]")));
        }
        let cell = self
            .rows
            .get_mut(i)
            .and_then(|r| r.get_mut(t))
            .ok_or(Error::Index {
                index: i,
                bound: t,
                context: "accuracy matrix cell",
            })?;
        *cell = Some(acc);
        Ok(())
    }

    pub fn get(&self, i: usize, t: usize) -> Option<f64> {
        self.rows.get(i).and_then(|r| r.get(t)).copied().flatten()
    }

    pub fn rows(&self) -> &[Vec<Option<f64>>] {
        &self.rows
    }

    pub fn last_row(&self) -> Option<&[Option<f64>]> {
        self.rows.last().map(Vec::as_slice)
    }
}

/// ACC: mean of the last row.
pub fn acc_metric(r: &AccuracyMatrix) -> Result<f64> {
    let last = r
        .last_row()
        .filter(|row| !row.is_empty())
        .ok_or_else(|| Error::Protocol("empty accuracy matrix".into()))?;
    let mut sum = 0.0;
    for (t, v) in last.iter().enumerate() {
        sum += v.ok_or_else(|| Error::Protocol(format!("final accuracy on step {t} is missing")))?;
    }
    Ok(sum / last.len() as f64)
}

/// Fraction of argmax-correct predictions on `set`.
pub fn accuracy(model: &Classifier, set: &SequenceSet, task: Option<usize>) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::Protocol("accuracy of an empty test set".into()));
    }
    let mut hits = 0;
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(256) {
        let batch = set.batch(chunk);
        let pred = model.predict(&batch, task)?;
        hits += pred.iter().zip(&batch.targets).filter(|(a, b)| a == b).count();
    }
    Ok(hits as f64 / set.len() as f64)
}

/// Identifying labels of a run, used to group records in reports.
#[derive(Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RunKey {
    pub benchmark: String,
    pub strategy: String,
    pub model: String,
    pub chunk: Option<usize>,
    pub head_mode: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub key: RunKey,
    /// Free-form sweep coordinates (for example the replay `p`).
    #[serde(default)]
    pub tags: BTreeMap<String, String>,
    pub config: serde_json::Value,
    pub seed: u64,
    pub matrix: AccuracyMatrix,
    pub step_seconds: Vec<f64>,
    pub diagnostics: Diagnostics,
}

impl RunRecord {
    pub fn acc(&self) -> Result<f64> {
        acc_metric(&self.matrix)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("record serializes")
    }

    pub fn from_json(text: &str) -> Result<RunRecord> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

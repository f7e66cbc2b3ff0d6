//! Labeled sequence collections and padded minibatches.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A labeled set of sequences sharing one per-timestep feature width. Each
/// sequence is stored flat, timestep-major: `len * feat_dim` values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceSet {
    pub feat_dim: usize,
    pub sequences: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl SequenceSet {
    pub fn new(feat_dim: usize) -> Self {
        SequenceSet {
            feat_dim,
            sequences: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn push(&mut self, values: Vec<f64>, label: usize) -> Result<()> {
        if self.feat_dim == 0 || values.is_empty() || values.len() % self.feat_dim != 0 {
            return Err(Error::Dimension {
                op: "SequenceSet::push",
                lhs: vec![self.feat_dim],
                rhs: vec![values.len()],
            });
        }
        self.sequences.push(values);
        self.labels.push(label);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn seq_len(&self, i: usize) -> usize {
        self.sequences[i].len() / self.feat_dim
    }

    /// `Some(len)` when every sequence has the same length.
    pub fn uniform_len(&self) -> Option<usize> {
        let first = self.sequences.first()?.len();
        self.sequences
            .iter()
            .all(|s| s.len() == first)
            .then_some(first / self.feat_dim)
    }

    /// Sorted distinct labels.
    pub fn classes(&self) -> Vec<usize> {
        let mut c = self.labels.clone();
        c.sort_unstable();
        c.dedup();
        c
    }

    pub fn subset(&self, indices: &[usize]) -> SequenceSet {
        SequenceSet {
            feat_dim: self.feat_dim,
            sequences: indices.iter().map(|&i| self.sequences[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// All patterns whose label is in `classes`, in original order.
    pub fn filter_classes(&self, classes: &[usize]) -> SequenceSet {
        let idx: Vec<usize> = (0..self.len())
            .filter(|&i| classes.contains(&self.labels[i]))
            .collect();
        self.subset(&idx)
    }

    pub fn extend(&mut self, other: &SequenceSet) -> Result<()> {
        if other.feat_dim != self.feat_dim && !other.is_empty() {
            return Err(Error::Dimension {
                op: "SequenceSet::extend",
                lhs: vec![self.feat_dim],
                rhs: vec![other.feat_dim],
            });
        }
        self.sequences.extend(other.sequences.iter().cloned());
        self.labels.extend_from_slice(&other.labels);
        Ok(())
    }

    /// Reinterprets every flat sequence with a new feature width; the stored
    /// values are unchanged, only the timestep split moves.
    pub fn rechunk(&self, feat_dim: usize) -> Result<SequenceSet> {
        if feat_dim == 0 || self.sequences.iter().any(|s| s.len() % feat_dim != 0) {
            return Err(Error::Parameter(format!(
                "feature width {feat_dim} does not divide every sequence"
            )));
        }
        Ok(SequenceSet {
            feat_dim,
            sequences: self.sequences.clone(),
            labels: self.labels.clone(),
        })
    }

    pub fn batch(&self, indices: &[usize]) -> SequenceBatch {
        let seqs: Vec<&[f64]> = indices.iter().map(|&i| self.sequences[i].as_slice()).collect();
        let targets: Vec<usize> = indices.iter().map(|&i| self.labels[i]).collect();
        SequenceBatch::pack(&seqs, targets, self.feat_dim, 0.0)
    }

    pub fn full_batch(&self) -> SequenceBatch {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.batch(&idx)
    }
}

/// Zero-padded minibatch stored time-major: timestep `t` occupies
/// `data[t * rows * feat_dim..(t + 1) * rows * feat_dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceBatch {
    pub feat_dim: usize,
    pub max_len: usize,
    pub lengths: Vec<usize>,
    pub targets: Vec<usize>,
    pub data: Vec<f64>,
}

impl SequenceBatch {
    /// Packs flat sequences into a padded batch; positions past a
    /// sequence's end hold `pad`.
    pub fn pack(seqs: &[&[f64]], targets: Vec<usize>, feat_dim: usize, pad: f64) -> Self {
        let rows = seqs.len();
        let lengths: Vec<usize> = seqs.iter().map(|s| s.len() / feat_dim).collect();
        let max_len = lengths.iter().copied().max().unwrap_or(0);
        let mut data = vec![pad; max_len * rows * feat_dim];
        for (r, s) in seqs.iter().enumerate() {
            for t in 0..lengths[r] {
                let dst = (t * rows + r) * feat_dim;
                data[dst..dst + feat_dim].copy_from_slice(&s[t * feat_dim..(t + 1) * feat_dim]);
            }
        }
        SequenceBatch {
            feat_dim,
            max_len,
            lengths,
            targets,
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_uniform(&self) -> bool {
        self.lengths.iter().all(|&l| l == self.max_len)
    }

    /// Inputs at timestep `t` as a rows×feat_dim block.
    pub fn step(&self, t: usize) -> &[f64] {
        let w = self.rows() * self.feat_dim;
        &self.data[t * w..(t + 1) * w]
    }

    /// Sequence `r` laid out flat (timestep-major), padding excluded.
    pub fn sequence(&self, r: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.lengths[r] * self.feat_dim);
        for t in 0..self.lengths[r] {
            let src = (t * self.rows() + r) * self.feat_dim;
            out.extend_from_slice(&self.data[src..src + self.feat_dim]);
        }
        out
    }

    /// Appends a `width`-wide one-hot block to every timestep; rows with
    /// `None` get zeros.
    pub fn with_one_hot(&self, hot: &[Option<usize>], width: usize) -> Result<SequenceBatch> {
        if hot.len() != self.rows() {
            return Err(Error::Dimension {
                op: "with_one_hot",
                lhs: vec![self.rows()],
                rhs: vec![hot.len()],
            });
        }
        if let Some(&bad) = hot.iter().flatten().find(|&&h| h >= width) {
            return Err(Error::Index {
                index: bad,
                bound: width,
                context: "one-hot position",
            });
        }
        let d = self.feat_dim + width;
        let rows = self.rows();
        let mut data = vec![0.0; self.max_len * rows * d];
        for t in 0..self.max_len {
            for r in 0..rows {
                let src = (t * rows + r) * self.feat_dim;
                let dst = (t * rows + r) * d;
                data[dst..dst + self.feat_dim].copy_from_slice(&self.data[src..src + self.feat_dim]);
                if let Some(h) = hot[r] {
                    if t < self.lengths[r] {
                        data[dst + self.feat_dim + h] = 1.0;
                    }
                }
            }
        }
        Ok(SequenceBatch {
            feat_dim: d,
            max_len: self.max_len,
            lengths: self.lengths.clone(),
            targets: self.targets.clone(),
            data,
        })
    }

    /// Concatenates two batches with the same feature width.
    pub fn concat(&self, other: &SequenceBatch) -> Result<SequenceBatch> {
        if self.feat_dim != other.feat_dim {
            return Err(Error::Dimension {
                op: "SequenceBatch::concat",
                lhs: vec![self.feat_dim],
                rhs: vec![other.feat_dim],
            });
        }
        let mut seqs: Vec<Vec<f64>> = (0..self.rows()).map(|r| self.sequence(r)).collect();
        seqs.extend((0..other.rows()).map(|r| other.sequence(r)));
        let refs: Vec<&[f64]> = seqs.iter().map(Vec::as_slice).collect();
        let mut targets = self.targets.clone();
        targets.extend_from_slice(&other.targets);
        Ok(SequenceBatch::pack(&refs, targets, self.feat_dim, 0.0))
    }
}

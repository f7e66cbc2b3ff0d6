//! Pattern stores: the per-class replay buffer and per-step episodic memory.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::SequenceSet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredPattern {
    pub values: Vec<f64>,
    pub label: usize,
    pub task: usize,
    pub step: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
struct ClassSlot {
    patterns: Vec<StoredPattern>,
    offered: u64,
}

/// Holds at most `k` patterns per class, a uniform sample (reservoir) of
/// every pattern offered for that class so far.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    k: usize,
    slots: BTreeMap<usize, ClassSlot>,
}

impl ReplayBuffer {
    pub fn new(k: usize) -> Self {
        ReplayBuffer {
            k,
            slots: BTreeMap::new(),
        }
    }

    pub fn capacity_per_class(&self) -> usize {
        self.k
    }

    pub fn classes(&self) -> Vec<usize> {
        self.slots.iter().filter(|(_, s)| !s.patterns.is_empty()).map(|(&c, _)| c).collect()
    }

    pub fn len(&self) -> usize {
        self.slots.values().map(|s| s.patterns.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn count(&self, class: usize) -> usize {
        self.slots.get(&class).map_or(0, |s| s.patterns.len())
    }

    pub fn store<R: Rng>(&mut self, set: &SequenceSet, task: usize, step: usize, rng: &mut R) {
        for (values, &label) in set.sequences.iter().zip(&set.labels) {
            let slot = self.slots.entry(label).or_default();
            slot.offered += 1;
            let pattern = || StoredPattern {
                values: values.clone(),
                label,
                task,
                step,
            };
            if slot.patterns.len() < self.k {
                slot.patterns.push(pattern());
            } else if self.k > 0 {
                let j = rng.random_range(0..slot.offered);
                if (j as usize) < self.k {
                    slot.patterns[j as usize] = pattern();
                }
            }
        }
    }

    /// `p` patterns for every stored class, without replacement when the
    /// class holds at least `p` patterns and with replacement otherwise.
    pub fn sample<R: Rng>(&self, p: usize, rng: &mut R) -> Vec<&StoredPattern> {
        let mut out = Vec::new();
        for slot in self.slots.values() {
            let n = slot.patterns.len();
            if n == 0 || p == 0 {
                continue;
            }
            if n >= p {
                out.extend(sample(rng, n, p).into_iter().map(|i| &slot.patterns[i]));
            } else {
                out.extend((0..p).map(|_| &slot.patterns[rng.random_range(0..n)]));
            }
        }
        out
    }
}

/// Patterns saved at the end of each step, one group per step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodicMemory {
    pub steps: Vec<Vec<StoredPattern>>,
}

impl EpisodicMemory {
    pub fn store<R: Rng>(&mut self, set: &SequenceSet, task: usize, step: usize, n: usize, rng: &mut R) {
        let n = n.min(set.len());
        let picked = sample(rng, set.len(), n).into_vec();
        self.steps.push(
            picked
                .into_iter()
                .map(|i| StoredPattern {
                    values: set.sequences[i].clone(),
                    label: set.labels[i],
                    task,
                    step,
                })
                .collect(),
        );
    }

    pub fn len(&self) -> usize {
        self.steps.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Uniform sample of `n` patterns pooled over all steps.
    pub fn sample_pooled<R: Rng>(&self, n: usize, rng: &mut R) -> Vec<&StoredPattern> {
        let all: Vec<&StoredPattern> = self.steps.iter().flatten().collect();
        let n = n.min(all.len());
        sample(rng, all.len(), n).into_iter().map(|i| all[i]).collect()
    }
}

//! Parameter-importance estimates (Fisher diagonal, output sensitivity) and
//! the quadratic penalty that anchors important parameters.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, Var};
use crate::data::{SequenceBatch, SequenceSet};
use crate::error::{Error, Result};
use crate::models::Classifier;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FisherBatching {
    PerPattern,
    Minibatch,
}

/// Importance vector with the parameters it anchors to. Both cover a prefix
/// of the flat parameter vector (heads created later are unanchored).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportancePair {
    pub omega: Vec<f64>,
    pub anchor: Vec<f64>,
}

/// Running average of output-sensitivity magnitudes.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MasState {
    pub omega: Vec<f64>,
    pub updates: u64,
}

impl MasState {
    /// `Ω ← (N·Ω + c) / (N + 1)`, `N ← N + 1`; shorter vectors are padded
    /// with zeros.
    pub fn update(&mut self, contribution: &[f64]) {
        if self.omega.len() < contribution.len() {
            self.omega.resize(contribution.len(), 0.0);
        }
        let n = self.updates as f64;
        for (i, o) in self.omega.iter_mut().enumerate() {
            let c = contribution.get(i).copied().unwrap_or(0.0);
            *o = (n * *o + c) / (n + 1.0);
        }
        self.updates += 1;
    }
}

pub(crate) fn flat_gradients(model: &Classifier, vars: &[Var], grads: &mut Gradients) -> Vec<f64> {
    let mut out = Vec::with_capacity(model.param_count());
    for (p, &v) in model.params().iter().zip(vars) {
        out.extend(grads.take(v, p.value.len()));
    }
    out
}

/// Mean cross-entropy of `batch` and its gradient over all parameters.
pub fn ce_gradient(
    model: &Classifier,
    batch: &SequenceBatch,
    task: Option<usize>,
    mask_unseen: bool,
) -> Result<(f64, Vec<f64>)> {
    let mut g = Graph::new();
    let vars = model.bind(&mut g);
    let logits = model.forward(&mut g, &vars, batch, task)?;
    let targets = model.unit_targets(task, &batch.targets)?;
    let mask = if mask_unseen { model.output_mask(task)? } else { None };
    let loss = g.cross_entropy(logits, &targets, mask.as_deref())?;
    let mut grads = g.backward(loss)?;
    Ok((g.value(loss).item(), flat_gradients(model, &vars, &mut grads)))
}

/// Mean of elementwise squares over a stream of gradient vectors.
pub fn mean_square<I: IntoIterator<Item = Vec<f64>>>(grads: I) -> Option<Vec<f64>> {
    let mut acc: Option<Vec<f64>> = None;
    let mut n = 0usize;
    for gr in grads {
        let a = acc.get_or_insert_with(|| vec![0.0; gr.len()]);
        for (x, g) in a.iter_mut().zip(&gr) {
            *x += g * g;
        }
        n += 1;
    }
    acc.map(|mut a| {
        a.iter_mut().for_each(|x| *x /= n as f64);
        a
    })
}

/// Diagonal empirical Fisher over `set`: the mean squared gradient of the
/// log-likelihood, per pattern or per minibatch of `minibatch` patterns.
pub fn ewc_importance(
    model: &Classifier,
    set: &SequenceSet,
    task: Option<usize>,
    batching: FisherBatching,
    minibatch: usize,
    mask_unseen: bool,
) -> Result<Vec<f64>> {
    if set.is_empty() {
        return Err(Error::Protocol("Fisher estimate needs a nonempty training set".into()));
    }
    let size = match batching {
        FisherBatching::PerPattern => 1,
        FisherBatching::Minibatch => minibatch.max(1),
    };
    let idx: Vec<usize> = (0..set.len()).collect();
    let mut grads = Vec::new();
    for chunk in idx.chunks(size) {
        grads.push(ce_gradient(model, &set.batch(chunk), task, mask_unseen)?.1);
    }
    Ok(mean_square(grads).expect("nonempty"))
}

/// `(1/B) Σ_rows ‖logits‖²` over the active output units.
pub fn output_sq_norm(g: &mut Graph, logits: Var, active: Option<&[bool]>) -> Result<Var> {
    let rows = g.value(logits).dims2().0;
    let selected = match active {
        Some(mask) => {
            let cols: Vec<usize> = (0..mask.len()).filter(|&j| mask[j]).collect();
            g.select_cols(logits, &cols)?
        }
        None => logits,
    };
    let s = g.sum_squares(selected);
    Ok(g.scale(s, 1.0 / rows.max(1) as f64))
}

/// `|∇ (1/B) Σ ‖p(x)‖²|` for one batch, label-free.
pub fn mas_contribution(model: &Classifier, batch: &SequenceBatch, task: Option<usize>) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let vars = model.bind(&mut g);
    let logits = model.forward(&mut g, &vars, batch, task)?;
    let mask = model.output_mask(task)?;
    let obj = output_sq_norm(&mut g, logits, mask.as_deref())?;
    let mut grads = g.backward(obj)?;
    let mut flat = flat_gradients(model, &vars, &mut grads);
    flat.iter_mut().for_each(|x| *x = x.abs());
    Ok(flat)
}

/// `λ Σ_t Σ_θ Ω_t (θ*_t − θ)²` added to the graph; `None` when there is
/// nothing to penalize.
pub fn importance_penalty(
    g: &mut Graph,
    model: &Classifier,
    vars: &[Var],
    pairs: &[ImportancePair],
    lambda: f64,
) -> Result<Option<Var>> {
    if lambda == 0.0 || pairs.is_empty() {
        return Ok(None);
    }
    let mut total: Option<Var> = None;
    for pair in pairs {
        let mut off = 0;
        for (p, &v) in model.params().iter().zip(vars) {
            let n = p.value.len();
            if off + n > pair.anchor.len() {
                break;
            }
            let term = g.weighted_sq_diff(v, &pair.anchor[off..off + n], &pair.omega[off..off + n])?;
            total = Some(match total {
                Some(t) => g.add(t, term)?,
                None => term,
            });
            off += n;
        }
    }
    Ok(total.map(|t| g.scale(t, lambda)))
}

/// Value of [`importance_penalty`] for a flat parameter vector.
pub fn importance_penalty_value(theta: &[f64], pairs: &[ImportancePair], lambda: f64) -> f64 {
    lambda
        * pairs
            .iter()
            .map(|p| {
                p.omega
                    .iter()
                    .zip(&p.anchor)
                    .zip(theta)
                    .map(|((o, a), t)| o * (a - t) * (a - t))
                    .sum::<f64>()
            })
            .sum::<f64>()
}

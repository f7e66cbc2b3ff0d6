//! Dense float64 tensors and a define-by-run reverse-mode differentiation tape.
//!
//! Every forward pass records onto a fresh [`Graph`]; parameters enter the
//! graph as leaves, and [`Graph::backward`] returns gradients for every node
//! that depends on one of them.

mod gradcheck;
mod graph;

pub use gradcheck::grad_check;
pub use graph::{Gradients, Graph, Var};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense array of `f64`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) && !data.is_empty() {
            return Err(Error::Dimension {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dimension {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::Dimension {
                    op: "from_rows",
                    lhs: vec![cols],
                    rhs: vec![r.len()],
                });
            }
            data.extend_from_slice(r);
        }
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The tensor viewed as a matrix: scalars are 1×1, vectors are 1×n, and
    /// higher ranks fold leading axes into rows.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.len() {
            0 => (1, 1),
            1 => (1, self.shape[0]),
            _ => {
                let cols = *self.shape.last().unwrap();
                (self.data.len() / cols.max(1), cols)
            }
        }
    }

    pub fn get2(&self, row: usize, col: usize) -> f64 {
        let (_, cols) = self.dims2();
        self.data[row * cols + col]
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }
}

/// A trainable tensor together with its accumulated gradient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Vec<f64>,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = vec![0.0; value.len()];
        Parameter {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Global L2 norm of a gradient slice.
pub fn l2_norm(values: &[f64]) -> f64 {
    values.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Rescales the concatenated gradients of `params` so their global L2 norm
/// does not exceed `max_norm`. Returns the norm measured before clipping.
pub fn clip_grad_norm(params: &mut [Parameter], max_norm: f64) -> f64 {
    let norm = params
        .iter()
        .flat_map(|p| p.grad.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for p in params.iter_mut() {
            p.grad.iter_mut().for_each(|g| *g *= scale);
        }
    }
    norm
}

/// [`clip_grad_norm`] over an already flattened gradient vector.
pub fn clip_flat_grad(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = l2_norm(grad);
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= scale);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params_with(grads: &[&[f64]]) -> Vec<Parameter> {
        grads
            .iter()
            .enumerate()
            .map(|(i, g)| {
                let mut p = Parameter::new(format!("p{i}"), Tensor::zeros(vec![g.len()]));
                p.grad = g.to_vec();
                p
            })
            .collect()
    }

    #[test]
    fn tensor_rejects_bad_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn clip_halves_norm_ten() {
        let mut ps = params_with(&[&[6.0], &[8.0]]);
        let n = clip_grad_norm(&mut ps, 5.0);
        assert_eq!(n, 10.0);
        assert_eq!(ps[0].grad, vec![3.0]);
        assert_eq!(ps[1].grad, vec![4.0]);
    }

    #[test]
    fn clip_below_threshold_untouched() {
        let mut ps = params_with(&[&[0.0, 3.0]]);
        assert_eq!(clip_grad_norm(&mut ps, 5.0), 3.0);
        assert_eq!(ps[0].grad, vec![0.0, 3.0]);
    }

    #[test]
    fn clip_boundary_is_unchanged() {
        let mut ps = params_with(&[&[3.0, 4.0]]);
        assert_eq!(clip_grad_norm(&mut ps, 5.0), 5.0);
        assert_eq!(ps[0].grad, vec![3.0, 4.0]);
    }

    #[test]
    fn clip_zero_is_noop() {
        let mut ps = params_with(&[&[0.0, 0.0]]);
        assert_eq!(clip_grad_norm(&mut ps, 5.0), 0.0);
        assert_eq!(ps[0].grad, vec![0.0, 0.0]);
    }

    proptest::proptest! {
        #[test]
        fn clip_is_idempotent(g in proptest::collection::vec(-50.0f64..50.0, 1..40), max in 0.1f64..20.0) {
            let mut once = g.clone();
            clip_flat_grad(&mut once, max);
            let mut twice = once.clone();
            clip_flat_grad(&mut twice, max);
            for (a, b) in once.iter().zip(&twice) {
                proptest::prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
            }
        }
    }
}

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Compares reverse-mode gradients of a scalar function against central
/// finite differences, coordinate by coordinate.
///
/// `f` builds the loss on a fresh graph from one leaf per entry of `params`.
/// Returns the largest `|ad − fd| / max(1, |ad|, |fd|)`.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(1e-8..=1e-4).contains(&eps) {
        return Err(Error::Parameter(format!(
            "finite-difference step {eps} outside [1e-8, 1e-4]"
        )));
    }
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.param(p.clone())).collect();
        let loss = f(&mut g, &vars)?;
        let v = g.value(loss).item();
        if !v.is_finite() {
            return Err(Error::Numeric(format!("objective evaluated to {v}")));
        }
        Ok(v)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = f(&mut g, &vars)?;
    if !g.value(loss).item().is_finite() {
        return Err(Error::Numeric("objective is not finite".into()));
    }
    let mut grads = g.backward(loss)?;

    let mut worst = 0.0f64;
    let mut probe = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let ad = grads.take(*var, params[pi].len());
        for (i, &ad_i) in ad.iter().enumerate() {
            let orig = params[pi].data()[i];
            probe[pi].data_mut()[i] = orig + eps;
            let hi = eval(&probe)?;
            probe[pi].data_mut()[i] = orig - eps;
            let lo = eval(&probe)?;
            probe[pi].data_mut()[i] = orig;
            let fd = (hi - lo) / (2.0 * eps);
            let err = (ad_i - fd).abs() / 1f64.max(ad_i.abs()).max(fd.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

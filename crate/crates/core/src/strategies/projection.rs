//! Gradient projections against episodic memories.

use crate::error::Result;
use crate::qpsolver::{solve, QPInstance, QPSolution, QPStatus};

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Averaged-memory projection: when `g` conflicts with `g_ref` (or always,
/// if `unconditional`), removes the `g_ref` component of `g`. Returns the
/// new gradient and whether it was projected. A zero reference leaves `g`
/// untouched.
pub fn agem_project(g: &[f64], g_ref: &[f64], unconditional: bool) -> (Vec<f64>, bool) {
    let rr = dot(g_ref, g_ref);
    let gr = dot(g, g_ref);
    if rr == 0.0 || (gr >= 0.0 && !unconditional) {
        return (g.to_vec(), false);
    }
    let c = gr / rr;
    (g.iter().zip(g_ref).map(|(a, b)| a - c * b).collect(), true)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GemOutcome {
    pub z: Vec<f64>,
    /// `None` when no constraint was violated and no QP was solved.
    pub solution: Option<QPSolution>,
}

impl GemOutcome {
    pub fn fell_back(&self) -> bool {
        self.solution.as_ref().is_some_and(|s| s.status == QPStatus::Fallback)
    }
}

/// Projects `g` onto `{z : ⟨g_k, z⟩ ≥ γ ∀k}` for the reference gradients
/// `refs`. Falls back to `g` itself when the solver does not converge.
pub fn gem_project(g: &[f64], refs: &[Vec<f64>], gamma: f64) -> Result<GemOutcome> {
    if refs.iter().all(|r| dot(r, g) >= gamma) {
        return Ok(GemOutcome {
            z: g.to_vec(),
            solution: None,
        });
    }
    let inst = QPInstance::new(g.to_vec(), refs.to_vec(), gamma)?;
    let sol = solve(&inst)?;
    let z = match sol.status {
        QPStatus::Optimal => sol.z.clone(),
        QPStatus::Fallback => {
            log::warn!(
                "GEM projection fell back to the raw gradient (residual {:.3e})",
                sol.kkt_residual
            );
            g.to_vec()
        }
    };
    Ok(GemOutcome {
        z,
        solution: Some(sol),
    })
}

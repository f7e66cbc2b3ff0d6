//! Projection QP `min ½‖g − z‖²  s.t.  G z ≥ γ` solved through its dual
//! `min_v ½ vᵀ G Gᵀ v + vᵀ (G g − γ 1)`, `v ≥ 0`, with `z = g + Gᵀ v`.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_ITERATIONS: usize = 100_000;
pub const KKT_TOL: f64 = 1e-8;
/// Up to this many constraints every active set is tried before iterating.
const ENUMERATION_LIMIT: usize = 12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QPInstance {
    pub g: Vec<f64>,
    /// One row per constraint.
    pub rows: Vec<Vec<f64>>,
    pub gamma: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum QPStatus {
    Optimal,
    Fallback,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QPSolution {
    pub z: Vec<f64>,
    pub duals: Vec<f64>,
    pub status: QPStatus,
    pub iterations: usize,
    pub kkt_residual: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, x| m.max(x.abs()))
}

impl QPInstance {
    pub fn new(g: Vec<f64>, rows: Vec<Vec<f64>>, gamma: f64) -> Result<Self> {
        let inst = QPInstance { g, rows, gamma };
        inst.validate()?;
        Ok(inst)
    }

    fn validate(&self) -> Result<()> {
        if let Some(r) = self.rows.iter().find(|r| r.len() != self.g.len()) {
            return Err(Error::Dimension {
                op: "QPInstance",
                lhs: vec![self.g.len()],
                rhs: vec![r.len()],
            });
        }
        let finite = self.g.iter().chain(self.rows.iter().flatten()).all(|x| x.is_finite());
        if !finite || !self.gamma.is_finite() {
            return Err(Error::Numeric("QP instance has non-finite entries".into()));
        }
        Ok(())
    }

    pub fn objective(&self, z: &[f64]) -> f64 {
        0.5 * self.g.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
    }

    pub fn is_feasible(&self, z: &[f64], tol: f64) -> bool {
        self.rows.iter().all(|r| dot(r, z) >= self.gamma - tol)
    }

    fn primal(&self, v: &[f64]) -> Vec<f64> {
        let mut z = self.g.clone();
        for (r, &vi) in self.rows.iter().zip(v) {
            if vi != 0.0 {
                for (zj, rj) in z.iter_mut().zip(r) {
                    *zj += vi * rj;
                }
            }
        }
        z
    }
}

/// Max of the relative primal, dual, stationarity and complementary
/// slackness residuals.
pub fn verify_kkt(inst: &QPInstance, sol: &QPSolution) -> f64 {
    let zn = norm(&sol.z);
    let mut worst: f64 = 0.0;
    let mut gtv = vec![0.0; inst.g.len()];
    for (r, &v) in inst.rows.iter().zip(&sol.duals) {
        worst = worst.max(-v);
        let slack = dot(r, &sol.z) - inst.gamma;
        let scale = 1.0f64.max(inst.gamma.abs()).max(norm(r) * zn);
        worst = worst.max(-slack / scale);
        worst = worst.max((v * slack).abs() / scale.max(v * scale));
        for (a, b) in gtv.iter_mut().zip(r) {
            *a += v * b;
        }
    }
    let scale = 1.0f64.max(inf_norm(&inst.g)).max(inf_norm(&gtv));
    for ((z, g), a) in sol.z.iter().zip(&inst.g).zip(&gtv) {
        worst = worst.max((z - g - a).abs() / scale);
    }
    worst
}

/// Gaussian elimination with partial pivoting; `None` when singular.
fn solve_dense(mut a: Vec<f64>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    let big = inf_norm(&a).max(f64::MIN_POSITIVE);
    for k in 0..n {
        let p = (k..n).max_by(|&i, &j| a[i * n + k].abs().total_cmp(&a[j * n + k].abs()))?;
        if a[p * n + k].abs() <= 1e-13 * big {
            return None;
        }
        if p != k {
            for j in 0..n {
                a.swap(k * n + j, p * n + j);
            }
            b.swap(k, p);
        }
        for i in k + 1..n {
            let f = a[i * n + k] / a[k * n + k];
            if f != 0.0 {
                for j in k..n {
                    a[i * n + j] -= f * a[k * n + j];
                }
                b[i] -= f * b[k];
            }
        }
    }
    let mut x = vec![0.0; n];
    for k in (0..n).rev() {
        let s: f64 = (k + 1..n).map(|j| a[k * n + j] * x[j]).sum();
        x[k] = (b[k] - s) / a[k * n + k];
    }
    Some(x)
}

struct Dual {
    q: Vec<f64>,
    b: Vec<f64>,
    m: usize,
    gamma: f64,
    g_sq: f64,
    row_norms: Vec<f64>,
}

impl Dual {
    /// The residual `verify_kkt` would report for `z = g + Gᵀv`, computed
    /// from dual quantities only. Stationarity holds by construction.
    fn residual(&self, v: &[f64]) -> f64 {
        let d = self.grad(v);
        let z_sq = self.g_sq
            + 2.0 * (0..self.m).map(|i| v[i] * (self.b[i] + self.gamma)).sum::<f64>()
            + self.quad(v);
        let zn = z_sq.max(0.0).sqrt();
        let mut worst: f64 = 0.0;
        for i in 0..self.m {
            let scale = 1.0f64.max(self.gamma.abs()).max(self.row_norms[i] * zn);
            worst = worst.max(-v[i]);
            worst = worst.max(-d[i] / scale);
            worst = worst.max((v[i] * d[i]).abs() / scale.max(v[i] * scale));
        }
        worst
    }

    fn grad(&self, v: &[f64]) -> Vec<f64> {
        (0..self.m)
            .map(|i| self.b[i] + dot(&self.q[i * self.m..(i + 1) * self.m], v))
            .collect()
    }

    fn quad(&self, s: &[f64]) -> f64 {
        (0..self.m)
            .map(|i| s[i] * dot(&self.q[i * self.m..(i + 1) * self.m], s))
            .sum()
    }

    /// Solves the equality-constrained dual on `active`; accepted only if
    /// the result is a KKT point of the full box-constrained dual.
    fn polish(&self, active: &[usize]) -> Option<Vec<f64>> {
        let n = active.len();
        let mut v = vec![0.0; self.m];
        if n > 0 {
            let a: Vec<f64> = active
                .iter()
                .flat_map(|&i| active.iter().map(move |&j| (i, j)))
                .map(|(i, j)| self.q[i * self.m + j])
                .collect();
            let rhs: Vec<f64> = active.iter().map(|&i| -self.b[i]).collect();
            let x = solve_dense(a, rhs)?;
            if x.iter().any(|&xi| xi < 0.0) {
                return None;
            }
            for (&i, xi) in active.iter().zip(x) {
                v[i] = xi;
            }
        }
        let d = self.grad(&v);
        let scale = 1.0f64.max(inf_norm(&self.b));
        (0..self.m)
            .all(|i| active.contains(&i) || d[i] >= -1e-12 * scale)
            .then_some(v)
    }
}

/// Solves the projection QP. Constraints whose row is numerically zero are
/// dropped when `γ ≤ 0`; with `γ > 0` they make the problem infeasible and
/// the result is a fallback returning `g`.
pub fn solve(inst: &QPInstance) -> Result<QPSolution> {
    inst.validate()?;
    let m_all = inst.rows.len();
    let gn = norm(&inst.g).max(1.0);
    let keep: Vec<usize> = (0..m_all).filter(|&i| norm(&inst.rows[i]) > 1e-15 * gn).collect();
    let fallback = |v: Vec<f64>, iterations: usize| {
        let mut sol = QPSolution {
            z: inst.primal(&v),
            duals: v,
            status: QPStatus::Fallback,
            iterations,
            kkt_residual: 0.0,
        };
        sol.kkt_residual = verify_kkt(inst, &sol);
        sol
    };
    if keep.len() < m_all && inst.gamma > 0.0 {
        return Ok(fallback(vec![0.0; m_all], 0));
    }
    let m = keep.len();
    let mut q = vec![0.0; m * m];
    for (a, &i) in keep.iter().enumerate() {
        for (b, &j) in keep.iter().enumerate().skip(a) {
            let x = dot(&inst.rows[i], &inst.rows[j]);
            q[a * m + b] = x;
            q[b * m + a] = x;
        }
    }
    let b: Vec<f64> = keep.iter().map(|&i| dot(&inst.rows[i], &inst.g) - inst.gamma).collect();
    let dual = Dual {
        q,
        b,
        m,
        gamma: inst.gamma,
        g_sq: dot(&inst.g, &inst.g),
        row_norms: keep.iter().map(|&i| norm(&inst.rows[i])).collect(),
    };
    let expand = |v: &[f64]| {
        let mut full = vec![0.0; m_all];
        for (&i, &x) in keep.iter().zip(v) {
            full[i] = x;
        }
        full
    };
    let finish = |v: &[f64], iterations: usize| -> Option<QPSolution> {
        if dual.residual(v) >= 0.5 * KKT_TOL {
            return None;
        }
        let duals = expand(v);
        let mut sol = QPSolution {
            z: inst.primal(&duals),
            duals,
            status: QPStatus::Optimal,
            iterations,
            kkt_residual: 0.0,
        };
        sol.kkt_residual = verify_kkt(inst, &sol);
        (sol.kkt_residual < KKT_TOL).then_some(sol)
    };

    if m <= ENUMERATION_LIMIT {
        let mut subsets: Vec<u32> = (0..1u32 << m).collect();
        subsets.sort_by_key(|s| s.count_ones());
        for s in subsets {
            let active: Vec<usize> = (0..m).filter(|&i| s & (1 << i) != 0).collect();
            if let Some(sol) = dual.polish(&active).and_then(|pv| finish(&pv, 0)) {
                return Ok(sol);
            }
        }
    }
    let mut v = vec![0.0; m];
    let mut best = (f64::INFINITY, v.clone());
    for it in 0..MAX_ITERATIONS {
        let d = dual.grad(&v);
        let active: Vec<usize> = (0..m).filter(|&i| v[i] > 0.0 || d[i] < 0.0).collect();
        if let Some(sol) = dual.polish(&active).and_then(|pv| finish(&pv, it)) {
            return Ok(sol);
        }
        let pg: Vec<f64> = (0..m).map(|i| if v[i] > 0.0 { d[i] } else { d[i].min(0.0) }).collect();
        let pg_norm = inf_norm(&pg);
        if pg_norm < best.0 {
            best = (pg_norm, v.clone());
        }
        if let Some(sol) = finish(&v, it) {
            return Ok(sol);
        }
        if pg_norm == 0.0 {
            return Ok(fallback(expand(&v), it));
        }
        let curvature = dual.quad(&pg);
        let max_step = (0..m)
            .filter(|&i| pg[i] > 0.0)
            .map(|i| v[i] / pg[i])
            .fold(f64::INFINITY, f64::min);
        if curvature <= 0.0 && max_step.is_infinite() {
            log::warn!("GEM projection infeasible: dual unbounded");
            return Ok(fallback(expand(&best.1), it));
        }
        let exact = dot(&pg, &pg) / curvature;
        let step = exact.min(max_step);
        for i in 0..m {
            v[i] = (v[i] - step * pg[i]).max(0.0);
        }
    }
    log::warn!("GEM projection hit the iteration cap");
    Ok(fallback(expand(&best.1), MAX_ITERATIONS))
}

/// Writes a plain-text reproduction record of one solve.
pub fn write_dump<W: Write>(mut w: W, inst: &QPInstance, sol: Option<&QPSolution>) -> std::io::Result<()> {
    let line = |v: &[f64]| {
        let mut s = String::new();
        for (i, x) in v.iter().enumerate() {
            if i > 0 {
                s.push(' ');
            }
            write!(s, "{x:e}").unwrap();
        }
        s
    };
    writeln!(w, "gamma {:e}", inst.gamma)?;
    writeln!(w, "g {}", line(&inst.g))?;
    for r in &inst.rows {
        writeln!(w, "G {}", line(r))?;
    }
    if let Some(s) = sol {
        writeln!(w, "status {:?}", s.status)?;
        writeln!(w, "iterations {}", s.iterations)?;
        writeln!(w, "kkt_residual {:e}", s.kkt_residual)?;
        writeln!(w, "z {}", line(&s.z))?;
        writeln!(w, "v {}", line(&s.duals))?;
    }
    Ok(())
}

/// Reads back the instance part of a dump.
pub fn read_dump<R: BufRead>(r: R) -> Result<QPInstance> {
    let (mut gamma, mut g, mut rows) = (None, None, Vec::new());
    for line in r.lines() {
        let line = line.map_err(|e| Error::io("<qp dump>", e))?;
        let mut parts = line.split_whitespace();
        let key = parts.next().unwrap_or("");
        let nums = || -> Result<Vec<f64>> {
            line.split_whitespace()
                .skip(1)
                .map(|x| x.parse().map_err(|_| Error::Parameter(format!("bad number {x:?} in QP dump"))))
                .collect()
        };
        match key {
            "gamma" => gamma = nums()?.first().copied(),
            "g" => g = Some(nums()?),
            "G" => rows.push(nums()?),
            _ => {}
        }
    }
    match (g, gamma) {
        (Some(g), Some(gamma)) => QPInstance::new(g, rows, gamma),
        _ => Err(Error::Parameter("QP dump needs `gamma` and `g` lines".into())),
    }
}

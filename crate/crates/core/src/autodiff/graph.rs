use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulAdd(Var, Var, Var),
    LstmGates {
        pre: Var,
        c_prev: Var,
        /// activated gates i, f, g, o (rows × 4h) then tanh(c) (rows × h)
        gates: Vec<f64>,
        tanh_c: Vec<f64>,
    },
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    SliceCols {
        src: Var,
        start: usize,
    },
    SliceRows {
        src: Var,
        start: usize,
    },
    SelectCols {
        src: Var,
        cols: Vec<usize>,
    },
    RowBlend {
        fresh: Var,
        stale: Var,
        mask: Vec<bool>,
    },
    Sum(Var),
    SumSquares(Var),
    WeightedSqDiff {
        src: Var,
        anchor: Vec<f64>,
        weight: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
        active: Option<Vec<bool>>,
    },
    KlDiv {
        q: Var,
        p_probs: Vec<f64>,
        q_probs: Vec<f64>,
        temperature: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Operation tape for one forward pass. Nodes are appended in evaluation
/// order, so the vector is already topologically sorted.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Removes and returns the gradient of `var`, or zeros of length `len`
    /// if the loss does not depend on it.
    pub fn take(&mut self, var: Var, len: usize) -> Vec<f64> {
        self.grads
            .get_mut(var.0)
            .and_then(Option::take)
            .unwrap_or_else(|| vec![0.0; len])
    }
}

fn dim_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// tanh through a single `expm1`; several times faster than libm's `tanh`
/// and accurate to a few ulps.
fn tanh(x: f64) -> f64 {
    let e = (-2.0 * x.abs()).exp_m1();
    (-e / (2.0 + e)).copysign(x)
}

/// Row-wise softmax of `logits / temperature` over the active columns;
/// inactive columns get probability 0. Also returns, per row, the scaled
/// maximum `m` and `ln Σ exp(l/T − m)`; the split keeps confident rows exact.
fn softmax_rows(
    logits: &[f64],
    rows: usize,
    cols: usize,
    temperature: f64,
    active: Option<&[bool]>,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut probs = vec![0.0; rows * cols];
    let mut maxes = vec![0.0; rows];
    let mut log_norm = vec![0.0; rows];
    let on = |j: usize| active.is_none_or(|a| a[j]);
    for r in 0..rows {
        let row = &logits[r * cols..(r + 1) * cols];
        let mut m = f64::NEG_INFINITY;
        let mut arg = 0;
        for (j, &l) in row.iter().enumerate() {
            if on(j) && l / temperature > m {
                m = l / temperature;
                arg = j;
            }
        }
        // the arg-max term contributes exactly 1
        let mut rest = 0.0;
        let out = &mut probs[r * cols..(r + 1) * cols];
        for (j, &l) in row.iter().enumerate() {
            if on(j) {
                let e = (l / temperature - m).exp();
                out[j] = e;
                if j != arg {
                    rest += e;
                }
            }
        }
        let s = 1.0 + rest;
        out.iter_mut().for_each(|p| *p /= s);
        maxes[r] = m;
        log_norm[r] = rest.ln_1p();
    }
    (probs, maxes, log_norm)
}

/// `c = alpha * op(a) * op(b) + beta * c` on row-major buffers, where
/// `op` optionally transposes.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    // logical a is m×k, logical b is k×n
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: slice lengths match the logical shapes and strides above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].tracked {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Records a leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ((m, k), (k2, n)) = (ta.dims2(), tb.dims2());
        if k != k2 {
            return Err(dim_err("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, 0.0, &mut out);
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), tracked))
    }

    /// `c + a·b`.
    pub fn matmul_add(&mut self, a: Var, b: Var, c: Var) -> Result<Var> {
        let (ta, tb, tc) = (self.value(a), self.value(b), self.value(c));
        let ((m, k), (k2, n)) = (ta.dims2(), tb.dims2());
        if k != k2 {
            return Err(dim_err("matmul_add", ta, tb));
        }
        if tc.dims2() != (m, n) {
            return Err(dim_err("matmul_add", ta, tc));
        }
        let mut out = tc.data().to_vec();
        gemm(m, k, n, ta.data(), false, tb.data(), false, 1.0, &mut out);
        let tracked = self.tracked(a) || self.tracked(b) || self.tracked(c);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMulAdd(a, b, c), tracked))
    }

    /// LSTM gate nonlinearities and state update from gate pre-activations
    /// `pre` (rows × 4h, order i, f, g, o) and the previous cell `c_prev`
    /// (rows × h). Returns rows × 2h holding `[h | c]`.
    pub fn lstm_gates(&mut self, pre: Var, c_prev: Var) -> Result<Var> {
        let (tp, tc) = (self.value(pre), self.value(c_prev));
        let (rows, four_h) = tp.dims2();
        let hidden = four_h / 4;
        if four_h % 4 != 0 || tc.dims2() != (rows, hidden) {
            return Err(dim_err("lstm_gates", tp, tc));
        }
        let mut gates = vec![0.0; rows * four_h];
        let mut tanh_c = vec![0.0; rows * hidden];
        let mut out = vec![0.0; rows * 2 * hidden];
        for r in 0..rows {
            let p = &tp.data()[r * four_h..(r + 1) * four_h];
            let gr = &mut gates[r * four_h..(r + 1) * four_h];
            for j in 0..hidden {
                let i = sigmoid(p[j]);
                let f = sigmoid(p[hidden + j]);
                let g = tanh(p[2 * hidden + j]);
                let o = sigmoid(p[3 * hidden + j]);
                gr[j] = i;
                gr[hidden + j] = f;
                gr[2 * hidden + j] = g;
                gr[3 * hidden + j] = o;
                let c = f * tc.data()[r * hidden + j] + i * g;
                let t = tanh(c);
                tanh_c[r * hidden + j] = t;
                out[r * 2 * hidden + j] = o * t;
                out[r * 2 * hidden + hidden + j] = c;
            }
        }
        let tracked = self.tracked(pre) || self.tracked(c_prev);
        Ok(self.push(
            Tensor::matrix(rows, 2 * hidden, out)?,
            Op::LstmGates {
                pre,
                c_prev,
                gates,
                tanh_c,
            },
            tracked,
        ))
    }

    /// Adds a length-n bias to every row of an m×n matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        let (m, n) = ta.dims2();
        if tb.len() != n {
            return Err(dim_err("add_bias", ta, tb));
        }
        let mut out = ta.data().to_vec();
        for row in out.chunks_mut(n.max(1)) {
            for (o, b) in row.iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        let tracked = self.tracked(a) || self.tracked(bias);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::AddBias(a, bias), tracked))
    }

    fn zip_op(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.len() != tb.len() {
            return Err(dim_err(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, op, tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn map_op(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| f(x)).collect();
        let value = Tensor {
            shape: ta.shape().to_vec(),
            data,
        };
        let tracked = self.tracked(a);
        self.push(value, op, tracked)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map_op(a, |x| c * x, Op::Scale(a, c))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map_op(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map_op(a, tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map_op(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// Columns `start..start + width` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = ta.dims2();
        if start + width > n {
            return Err(Error::Index {
                index: start + width,
                bound: n + 1,
                context: "slice_cols end",
            });
        }
        let mut out = Vec::with_capacity(m * width);
        for r in 0..m {
            out.extend_from_slice(&ta.data()[r * n + start..r * n + start + width]);
        }
        let tracked = self.tracked(a);
        Ok(self.push(Tensor::matrix(m, width, out)?, Op::SliceCols { src: a, start }, tracked))
    }

    /// Rows `start..start + count` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, count: usize) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = ta.dims2();
        if start + count > m {
            return Err(Error::Index {
                index: start + count,
                bound: m + 1,
                context: "slice_rows end",
            });
        }
        let out = ta.data()[start * n..(start + count) * n].to_vec();
        let tracked = self.tracked(a);
        Ok(self.push(Tensor::matrix(count, n, out)?, Op::SliceRows { src: a, start }, tracked))
    }

    /// Gathers the listed columns, in order.
    pub fn select_cols(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = ta.dims2();
        if let Some(&bad) = cols.iter().find(|&&c| c >= n) {
            return Err(Error::Index {
                index: bad,
                bound: n,
                context: "select_cols",
            });
        }
        let mut out = Vec::with_capacity(m * cols.len());
        for r in 0..m {
            out.extend(cols.iter().map(|&c| ta.data()[r * n + c]));
        }
        let tracked = self.tracked(a);
        let value = Tensor::matrix(m, cols.len(), out)?;
        Ok(self.push(
            value,
            Op::SelectCols {
                src: a,
                cols: cols.to_vec(),
            },
            tracked,
        ))
    }

    /// Row `r` of the result is row `r` of `fresh` where `mask[r]`, else of `stale`.
    pub fn row_blend(&mut self, fresh: Var, stale: Var, mask: &[bool]) -> Result<Var> {
        let (tf, ts) = (self.value(fresh), self.value(stale));
        let (m, n) = tf.dims2();
        if tf.shape() != ts.shape() || mask.len() != m {
            return Err(dim_err("row_blend", tf, ts));
        }
        let mut out = ts.data().to_vec();
        for (r, _) in mask.iter().enumerate().filter(|(_, &on)| on) {
            out[r * n..(r + 1) * n].copy_from_slice(&tf.data()[r * n..(r + 1) * n]);
        }
        let value = Tensor::new(tf.shape().to_vec(), out)?;
        let tracked = self.tracked(fresh) || self.tracked(stale);
        Ok(self.push(
            value,
            Op::RowBlend {
                fresh,
                stale,
                mask: mask.to_vec(),
            },
            tracked,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let tracked = self.tracked(a);
        self.push(Tensor::scalar(s), Op::Sum(a), tracked)
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().map(|x| x * x).sum();
        let tracked = self.tracked(a);
        self.push(Tensor::scalar(s), Op::SumSquares(a), tracked)
    }

    /// `Σ weight · (anchor − a)²` over all elements.
    pub fn weighted_sq_diff(&mut self, a: Var, anchor: &[f64], weight: &[f64]) -> Result<Var> {
        let ta = self.value(a);
        if anchor.len() != ta.len() || weight.len() != ta.len() {
            return Err(Error::Dimension {
                op: "weighted_sq_diff",
                lhs: ta.shape().to_vec(),
                rhs: vec![anchor.len(), weight.len()],
            });
        }
        let s = ta
            .data()
            .iter()
            .zip(anchor)
            .zip(weight)
            .map(|((x, a), w)| w * (a - x) * (a - x))
            .sum();
        let tracked = self.tracked(a);
        Ok(self.push(
            Tensor::scalar(s),
            Op::WeightedSqDiff {
                src: a,
                anchor: anchor.to_vec(),
                weight: weight.to_vec(),
            },
            tracked,
        ))
    }

    /// Mean negative log-likelihood of `targets` under a row-wise softmax of
    /// `logits`. When `active` is given, columns marked false are excluded
    /// from the softmax and receive no gradient.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        active: Option<&[bool]>,
    ) -> Result<Var> {
        let tl = self.value(logits);
        let (b, c) = tl.dims2();
        if targets.len() != b || b == 0 {
            return Err(Error::Dimension {
                op: "cross_entropy",
                lhs: tl.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        if let Some(a) = active {
            if a.len() != c {
                return Err(Error::Dimension {
                    op: "cross_entropy mask",
                    lhs: tl.shape().to_vec(),
                    rhs: vec![a.len()],
                });
            }
        }
        for &t in targets {
            if t >= c || active.is_some_and(|a| !a[t]) {
                return Err(Error::Index {
                    index: t,
                    bound: c,
                    context: "cross_entropy target",
                });
            }
        }
        let (probs, maxes, log_norm) = softmax_rows(tl.data(), b, c, 1.0, active);
        let loss = (0..b)
            .map(|r| (maxes[r] - tl.data()[r * c + targets[r]]) + log_norm[r])
            .sum::<f64>()
            / b as f64;
        let tracked = self.tracked(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                active: active.map(<[bool]>::to_vec),
            },
            tracked,
        ))
    }

    /// Mean over rows of KL(softmax(p/T) ‖ softmax(q/T)). `p_logits` is a
    /// fixed reference; the gradient flows only into `q`.
    pub fn kl_divergence(&mut self, p_logits: &Tensor, q: Var, temperature: f64) -> Result<Var> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::Parameter(format!(
                "temperature must be positive and finite, got {temperature}"
            )));
        }
        let tq = self.value(q);
        if tq.shape() != p_logits.shape() && tq.dims2() != p_logits.dims2() {
            return Err(dim_err("kl_divergence", p_logits, tq));
        }
        let (b, c) = tq.dims2();
        let (p_probs, p_max, p_norm) = softmax_rows(p_logits.data(), b, c, temperature, None);
        let (q_probs, q_max, q_norm) = softmax_rows(tq.data(), b, c, temperature, None);
        let mut total = 0.0;
        for r in 0..b {
            for j in 0..c {
                let p = p_probs[r * c + j];
                if p > 0.0 {
                    let log_p = (p_logits.data()[r * c + j] / temperature - p_max[r]) - p_norm[r];
                    let log_q = (tq.data()[r * c + j] / temperature - q_max[r]) - q_norm[r];
                    total += p * (log_p - log_q);
                }
            }
        }
        let value = (total / b.max(1) as f64).max(0.0);
        let tracked = self.tracked(q);
        Ok(self.push(
            Tensor::scalar(value),
            Op::KlDiv {
                q,
                p_probs,
                q_probs,
                temperature,
            },
            tracked,
        ))
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let n_loss = self.nodes[loss.0].value.len();
        if n_loss != 1 {
            return Err(Error::Dimension {
                op: "backward",
                lhs: self.nodes[loss.0].value.shape().to_vec(),
                rhs: vec![1],
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            let Some(dout) = grads[i].take() else {
                continue;
            };
            self.propagate(node, &dout, &mut grads);
            grads[i] = Some(dout);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, dout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let ((m, k), (_, n)) = (val(*a).dims2(), val(*b).dims2());
                let (ad, bd) = (val(*a).data(), val(*b).data());
                if let Some(ga) = slot(nodes, grads, *a) {
                    gemm(m, n, k, dout, false, bd, true, 1.0, ga);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    gemm(k, m, n, ad, true, dout, false, 1.0, gb);
                }
            }
            Op::MatMulAdd(a, b, c) => {
                let ((m, k), (_, n)) = (val(*a).dims2(), val(*b).dims2());
                let (ad, bd) = (val(*a).data(), val(*b).data());
                if let Some(ga) = slot(nodes, grads, *a) {
                    gemm(m, n, k, dout, false, bd, true, 1.0, ga);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    gemm(k, m, n, ad, true, dout, false, 1.0, gb);
                }
                if let Some(gc) = slot(nodes, grads, *c) {
                    gc.iter_mut().zip(dout).for_each(|(g, d)| *g += d);
                }
            }
            Op::LstmGates {
                pre,
                c_prev,
                gates,
                tanh_c,
            } => {
                let (rows, hidden2) = node.value.dims2();
                let hidden = hidden2 / 2;
                let four_h = 4 * hidden;
                let cp = val(*c_prev).data();
                let mut d_pre = vec![0.0; rows * four_h];
                let mut d_cprev = vec![0.0; rows * hidden];
                for r in 0..rows {
                    let gr = &gates[r * four_h..(r + 1) * four_h];
                    for j in 0..hidden {
                        let (i, f, g, o) = (gr[j], gr[hidden + j], gr[2 * hidden + j], gr[3 * hidden + j]);
                        let t = tanh_c[r * hidden + j];
                        let dh = dout[r * hidden2 + j];
                        let dc = dout[r * hidden2 + hidden + j] + dh * o * (1.0 - t * t);
                        let dp = &mut d_pre[r * four_h..(r + 1) * four_h];
                        dp[j] = dc * g * i * (1.0 - i);
                        dp[hidden + j] = dc * cp[r * hidden + j] * f * (1.0 - f);
                        dp[2 * hidden + j] = dc * i * (1.0 - g * g);
                        dp[3 * hidden + j] = dh * t * o * (1.0 - o);
                        d_cprev[r * hidden + j] = dc * f;
                    }
                }
                if let Some(gp) = slot(nodes, grads, *pre) {
                    gp.iter_mut().zip(&d_pre).for_each(|(g, d)| *g += d);
                }
                if let Some(gc) = slot(nodes, grads, *c_prev) {
                    gc.iter_mut().zip(&d_cprev).for_each(|(g, d)| *g += d);
                }
            }
            Op::AddBias(a, b) => {
                let n = val(*b).len();
                if let Some(ga) = slot(nodes, grads, *a) {
                    ga.iter_mut().zip(dout).for_each(|(g, d)| *g += d);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    for row in dout.chunks(n.max(1)) {
                        gb.iter_mut().zip(row).for_each(|(g, d)| *g += d);
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    ga.iter_mut().zip(dout).for_each(|(g, d)| *g += d);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    gb.iter_mut().zip(dout).for_each(|(g, d)| *g += d);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    ga.iter_mut().zip(dout).for_each(|(g, d)| *g += d);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    gb.iter_mut().zip(dout).for_each(|(g, d)| *g -= d);
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (val(*a).data(), val(*b).data());
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((g, d), y) in ga.iter_mut().zip(dout).zip(bd) {
                        *g += d * y;
                    }
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    for ((g, d), x) in gb.iter_mut().zip(dout).zip(ad) {
                        *g += d * x;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    ga.iter_mut().zip(dout).for_each(|(g, d)| *g += c * d);
                }
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((g, d), y) in ga.iter_mut().zip(dout).zip(y) {
                        *g += d * y * (1.0 - y);
                    }
                }
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((g, d), y) in ga.iter_mut().zip(dout).zip(y) {
                        *g += d * (1.0 - y * y);
                    }
                }
            }
            Op::Relu(a) => {
                let x = val(*a).data();
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((g, d), x) in ga.iter_mut().zip(dout).zip(x) {
                        if *x > 0.0 {
                            *g += d;
                        }
                    }
                }
            }
            Op::SliceCols { src, start } => {
                let n = val(*src).dims2().1;
                let w = node.value.dims2().1;
                if let Some(gs) = slot(nodes, grads, *src) {
                    for (r, drow) in dout.chunks(w.max(1)).enumerate() {
                        let dst = &mut gs[r * n + start..r * n + start + w];
                        dst.iter_mut().zip(drow).for_each(|(g, d)| *g += d);
                    }
                }
            }
            Op::SliceRows { src, start } => {
                let n = val(*src).dims2().1;
                if let Some(gs) = slot(nodes, grads, *src) {
                    let dst = &mut gs[start * n..start * n + dout.len()];
                    dst.iter_mut().zip(dout).for_each(|(g, d)| *g += d);
                }
            }
            Op::SelectCols { src, cols } => {
                let n = val(*src).dims2().1;
                let w = cols.len();
                if let Some(gs) = slot(nodes, grads, *src) {
                    for (r, drow) in dout.chunks(w.max(1)).enumerate() {
                        for (&c, d) in cols.iter().zip(drow) {
                            gs[r * n + c] += d;
                        }
                    }
                }
            }
            Op::RowBlend { fresh, stale, mask } => {
                let n = node.value.dims2().1;
                if let Some(gf) = slot(nodes, grads, *fresh) {
                    for (r, _) in mask.iter().enumerate().filter(|(_, &on)| on) {
                        let rng = r * n..(r + 1) * n;
                        gf[rng.clone()].iter_mut().zip(&dout[rng]).for_each(|(g, d)| *g += d);
                    }
                }
                if let Some(gs) = slot(nodes, grads, *stale) {
                    for (r, _) in mask.iter().enumerate().filter(|(_, &on)| !on) {
                        let rng = r * n..(r + 1) * n;
                        gs[rng.clone()].iter_mut().zip(&dout[rng]).for_each(|(g, d)| *g += d);
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    ga.iter_mut().for_each(|g| *g += dout[0]);
                }
            }
            Op::SumSquares(a) => {
                let x = val(*a).data();
                if let Some(ga) = slot(nodes, grads, *a) {
                    ga.iter_mut().zip(x).for_each(|(g, x)| *g += 2.0 * x * dout[0]);
                }
            }
            Op::WeightedSqDiff { src, anchor, weight } => {
                let x = val(*src).data();
                if let Some(gs) = slot(nodes, grads, *src) {
                    for (((g, x), a), w) in gs.iter_mut().zip(x).zip(anchor).zip(weight) {
                        *g += -2.0 * w * (a - x) * dout[0];
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                active,
            } => {
                let (b, c) = val(*logits).dims2();
                let scale = dout[0] / b as f64;
                if let Some(gl) = slot(nodes, grads, *logits) {
                    for r in 0..b {
                        for j in 0..c {
                            if active.as_ref().is_none_or(|a| a[j]) {
                                let y = if j == targets[r] { 1.0 } else { 0.0 };
                                gl[r * c + j] += scale * (probs[r * c + j] - y);
                            }
                        }
                    }
                }
            }
            Op::KlDiv {
                q,
                p_probs,
                q_probs,
                temperature,
            } => {
                let (b, _) = val(*q).dims2();
                let scale = dout[0] / (b.max(1) as f64 * temperature);
                if let Some(gq) = slot(nodes, grads, *q) {
                    for ((g, p), qq) in gq.iter_mut().zip(p_probs).zip(q_probs) {
                        *g += scale * (qq - p);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let i = g.constant(m(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let x = g.constant(m(&[&[1.5, -2.0], &[0.25, 7.0]]));
        let y = g.matmul(i, x).unwrap();
        assert_eq!(g.value(y).data(), &[1.5, -2.0, 0.25, 7.0]);
    }

    #[test]
    fn matmul_hand_product() {
        let mut g = Graph::new();
        let a = g.constant(m(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = g.constant(m(&[&[0.0], &[1.0]]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).shape(), &[2, 1]);
        assert_eq!(g.value(c).data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_shape_error_names_both() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn matmul_backward_matches_finite_difference() {
        // d/dA sum(A·B) at A=[[1,1]], B=[[2],[3]] is [[2,3]]
        let f = |a: &[f64]| a[0] * 2.0 + a[1] * 3.0;
        let eps = 1e-6;
        let fd: Vec<f64> = (0..2)
            .map(|i| {
                let mut hi = [1.0, 1.0];
                let mut lo = [1.0, 1.0];
                hi[i] += eps;
                lo[i] -= eps;
                (f(&hi) - f(&lo)) / (2.0 * eps)
            })
            .collect();
        let mut g = Graph::new();
        let a = g.param(m(&[&[1.0, 1.0]]));
        let b = g.constant(m(&[&[2.0], &[3.0]]));
        let c = g.matmul(a, b).unwrap();
        let s = g.sum(c);
        let grads = g.backward(s).unwrap();
        let da = grads.get(a).unwrap();
        assert_eq!(da, &[2.0, 3.0]);
        for (x, y) in da.iter().zip(&fd) {
            assert!((x - y).abs() < 1e-8);
        }
    }

    #[test]
    fn cross_entropy_uniform_is_ln_c() {
        let mut g = Graph::new();
        let l = g.constant(Tensor::zeros(vec![3, 10]));
        let ce = g.cross_entropy(l, &[0, 4, 9], None).unwrap();
        assert!((g.value(ce).item() - 10f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_confident_logits() {
        let mut g = Graph::new();
        let l = g.constant(m(&[&[10.0, -10.0]]));
        let ce = g.cross_entropy(l, &[0], None).unwrap();
        // ln(1 + e^-20)
        let expect = (-20f64).exp().ln_1p();
        assert!((g.value(ce).item() - expect).abs() < 1e-20);
        assert!((g.value(ce).item() - 2.061e-9).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_gradient_symmetric() {
        let mut g = Graph::new();
        let l = g.param(Tensor::zeros(vec![1, 2]));
        let ce = g.cross_entropy(l, &[0], None).unwrap();
        let grads = g.backward(ce).unwrap();
        assert_eq!(grads.get(l).unwrap(), &[-0.5, 0.5]);
        assert_eq!(grads.get(ce).unwrap(), &[1.0]);
    }

    #[test]
    fn cross_entropy_target_out_of_range() {
        let mut g = Graph::new();
        let l = g.constant(Tensor::zeros(vec![1, 2]));
        assert!(matches!(g.cross_entropy(l, &[2], None), Err(Error::Index { .. })));
    }

    #[test]
    fn cross_entropy_mask_excludes_columns() {
        let mut g = Graph::new();
        let l = g.param(m(&[&[0.0, 0.0, 50.0]]));
        let ce = g.cross_entropy(l, &[1], Some(&[true, true, false])).unwrap();
        assert!((g.value(ce).item() - 2f64.ln()).abs() < 1e-15);
        let grads = g.backward(ce).unwrap();
        assert_eq!(grads.get(l).unwrap(), &[0.5, -0.5, 0.0]);
    }

    #[test]
    fn kl_identical_is_zero() {
        let mut g = Graph::new();
        let p = m(&[&[0.3, -1.0, 2.0]]);
        let q = g.param(p.clone());
        let kl = g.kl_divergence(&p, q, 1.5).unwrap();
        assert!(g.value(kl).item().abs() < 1e-15);
    }

    #[test]
    fn kl_hand_value() {
        let mut g = Graph::new();
        let p = m(&[&[0.0, 0.0]]);
        let q = g.param(m(&[&[3f64.ln(), 0.0]]));
        let kl = g.kl_divergence(&p, q, 1.0).unwrap();
        let expect = 0.5 * (2.0f64 / 3.0).ln() + 0.5 * 2f64.ln();
        assert!((g.value(kl).item() - expect).abs() < 1e-14);
        assert!((g.value(kl).item() - 0.14384).abs() < 1e-5);
    }

    #[test]
    fn kl_high_temperature_vanishes() {
        let mut g = Graph::new();
        let p = m(&[&[4.0, -3.0, 1.0]]);
        let q = g.param(m(&[&[-2.0, 5.0, 0.0]]));
        let kl = g.kl_divergence(&p, q, 1e6).unwrap();
        assert!(g.value(kl).item() < 1e-10);
    }

    #[test]
    fn kl_rejects_nonpositive_temperature() {
        let mut g = Graph::new();
        let p = m(&[&[0.0, 0.0]]);
        let q = g.param(p.clone());
        assert!(matches!(g.kl_divergence(&p, q, 0.0), Err(Error::Parameter(_))));
        assert!(matches!(g.kl_divergence(&p, q, -1.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn row_blend_routes_gradient() {
        let mut g = Graph::new();
        let a = g.param(m(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = g.param(m(&[&[5.0, 6.0], &[7.0, 8.0]]));
        let c = g.row_blend(a, b, &[true, false]).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 7.0, 8.0]);
        let s = g.sum(c);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(a).unwrap(), &[1.0, 1.0, 0.0, 0.0]);
        assert_eq!(grads.get(b).unwrap(), &[0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn tanh_matches_libm() {
        for i in -4000..=4000 {
            let x = i as f64 * 0.005 + 1e-9;
            assert!((tanh(x) - x.tanh()).abs() <= 4.0 * f64::EPSILON * x.tanh().abs().max(1e-300));
        }
        assert_eq!(tanh(0.0), 0.0);
        assert_eq!(tanh(800.0), 1.0);
        assert_eq!(tanh(-800.0), -1.0);
    }

    #[test]
    fn lstm_gates_grad_check() {
        use crate::autodiff::grad_check;
        let pre = Tensor::matrix(2, 8, (0..16).map(|i| (i as f64 * 0.37).sin() * 2.0).collect()).unwrap();
        let c0 = Tensor::matrix(2, 2, vec![0.5, -0.3, 1.2, 0.1]).unwrap();
        let w = Tensor::matrix(2, 4, vec![0.3, -0.2, 0.9, 0.4, -0.6, 0.8, 0.1, -0.5]).unwrap();
        let err = grad_check(
            |g, v| {
                let out = g.lstm_gates(v[0], v[1])?;
                let w = g.constant(Tensor::matrix(4, 1, vec![1.0, -2.0, 0.5, 3.0]).unwrap());
                let z = g.matmul(out, w)?;
                Ok(g.sum_squares(z))
            },
            &[pre, c0],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");
        let _ = w;
    }

    #[test]
    fn matmul_add_grad_check() {
        use crate::autodiff::grad_check;
        let a = Tensor::matrix(2, 3, vec![0.1, 0.2, -0.3, 0.4, 0.5, -0.6]).unwrap();
        let b = Tensor::matrix(3, 2, vec![1.0, -1.0, 0.5, 0.25, 2.0, -0.5]).unwrap();
        let c = Tensor::matrix(2, 2, vec![0.3, 0.3, -0.7, 0.9]).unwrap();
        let err = grad_check(
            |g, v| {
                let y = g.matmul_add(v[0], v[1], v[2])?;
                let t = g.tanh(y);
                Ok(g.sum_squares(t))
            },
            &[a, b, c],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let a = g.param(m(&[&[1.0]]));
        let b = g.constant(m(&[&[2.0]]));
        let c = g.mul(a, b).unwrap();
        let grads = g.backward(c).unwrap();
        assert_eq!(grads.get(a).unwrap(), &[2.0]);
        assert!(grads.get(b).is_none());
    }
}

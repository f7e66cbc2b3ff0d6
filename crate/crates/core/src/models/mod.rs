//! Sequence classifiers: an LSTM read out at each sequence's last real
//! timestep, and an MLP over the flattened sequence, each with either one
//! shared output head or one head per task label.

mod checkpoint;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Parameter, Tensor, Var};
use crate::data::SequenceBatch;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Mlp,
    Lstm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadMode {
    Single,
    Multi,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Per-timestep feature width for the LSTM; full flattened width for the MLP.
    pub input_size: usize,
    pub hidden_size: usize,
    pub num_layers: usize,
    pub head_mode: HeadMode,
    pub num_classes_total: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("input_size", self.input_size),
            ("hidden_size", self.hidden_size),
            ("num_layers", self.num_layers),
            ("num_classes_total", self.num_classes_total),
        ] {
            if v == 0 {
                return Err(Error::Configuration(format!("model.{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// Output layer bound to one task label (or the shared head in single mode).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Head {
    pub task: usize,
    /// Global class id of every output unit, in unit order.
    pub classes: Vec<usize>,
    weight: usize,
    bias: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    config: ModelConfig,
    params: Vec<Parameter>,
    heads: Vec<Head>,
    /// Single mode: output units seen in training so far.
    seen: Vec<bool>,
    seed: u64,
}

/// Parameter handles for one LSTM layer on a graph.
#[derive(Clone, Copy, Debug)]
pub struct LstmLayerVars {
    pub w_ih: Var,
    pub w_hh: Var,
    pub bias: Var,
}

fn uniform_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("shape and data agree")
}

fn head_seed(seed: u64, task: usize) -> u64 {
    seed ^ (task as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Applies one LSTM cell given the precomputed input projection
/// `x_proj = x·W_ih + b` (rows × 4h, gate order i, f, g, o).
fn lstm_cell(
    g: &mut Graph,
    x_proj: Var,
    h_prev: Var,
    c_prev: Var,
    w_hh: Var,
    hidden: usize,
) -> Result<(Var, Var)> {
    let pre = g.matmul_add(h_prev, w_hh, x_proj)?;
    let packed = g.lstm_gates(pre, c_prev)?;
    let h = g.slice_cols(packed, 0, hidden)?;
    let c = g.slice_cols(packed, hidden, hidden)?;
    Ok((h, c))
}

/// One LSTM timestep: `i,f,o = σ(·)`, `g = tanh(·)`, `c = f⊙c_prev + i⊙g`,
/// `h = o⊙tanh(c)`.
pub fn lstm_step(
    g: &mut Graph,
    x_t: Var,
    h_prev: Var,
    c_prev: Var,
    layer: LstmLayerVars,
) -> Result<(Var, Var)> {
    let hidden = g.value(h_prev).dims2().1;
    let (_, four_h) = g.value(layer.w_hh).dims2();
    if four_h != 4 * hidden || g.value(c_prev).dims2() != g.value(h_prev).dims2() {
        return Err(Error::Dimension {
            op: "lstm_step",
            lhs: g.value(h_prev).shape().to_vec(),
            rhs: g.value(layer.w_hh).shape().to_vec(),
        });
    }
    let xw = g.matmul(x_t, layer.w_ih)?;
    let x_proj = g.add_bias(xw, layer.bias)?;
    lstm_cell(g, x_proj, h_prev, c_prev, layer.w_hh, hidden)
}

/// Cuts a row-major 28×28 image into consecutive `chunk`-pixel timesteps.
/// Returns a `(784 / chunk) × chunk` tensor.
pub fn chunk_pixels(image: &Tensor, chunk: usize) -> Result<Tensor> {
    if image.len() != 784 {
        return Err(Error::Dimension {
            op: "chunk_pixels",
            lhs: image.shape().to_vec(),
            rhs: vec![28, 28],
        });
    }
    if chunk == 0 || 784 % chunk != 0 {
        return Err(Error::Parameter(format!("chunk {chunk} does not divide 784")));
    }
    Tensor::new(vec![784 / chunk, chunk], image.data().to_vec())
}

impl Classifier {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = config.hidden_size;
        let mut params = Vec::new();
        match config.kind {
            ModelKind::Lstm => {
                let bound = 1.0 / (h as f64).sqrt();
                for l in 0..config.num_layers {
                    let inp = if l == 0 { config.input_size } else { h };
                    params.push(Parameter::new(
                        format!("lstm{l}.w_ih"),
                        uniform_tensor(&mut rng, vec![inp, 4 * h], bound),
                    ));
                    params.push(Parameter::new(
                        format!("lstm{l}.w_hh"),
                        uniform_tensor(&mut rng, vec![h, 4 * h], bound),
                    ));
                    let mut bias = uniform_tensor(&mut rng, vec![4 * h], bound);
                    bias.data_mut()[h..2 * h].iter_mut().for_each(|b| *b = 1.0);
                    params.push(Parameter::new(format!("lstm{l}.bias"), bias));
                }
            }
            ModelKind::Mlp => {
                for l in 0..config.num_layers {
                    let inp = if l == 0 { config.input_size } else { h };
                    let normal = Normal::new(0.0, (2.0 / inp as f64).sqrt()).expect("positive std");
                    let data = (0..inp * h).map(|_| normal.sample(&mut rng)).collect();
                    params.push(Parameter::new(format!("mlp{l}.weight"), Tensor::matrix(inp, h, data)?));
                    params.push(Parameter::new(format!("mlp{l}.bias"), Tensor::zeros(vec![h])));
                }
            }
        }
        let mut model = Classifier {
            seen: vec![false; config.num_classes_total],
            config,
            params,
            heads: Vec::new(),
            seed,
        };
        if model.config.head_mode == HeadMode::Single {
            let classes: Vec<usize> = (0..model.config.num_classes_total).collect();
            model.add_head(0, classes);
        }
        Ok(model)
    }

    fn add_head(&mut self, task: usize, classes: Vec<usize>) {
        let h = self.config.hidden_size;
        let mut rng = ChaCha8Rng::seed_from_u64(head_seed(self.seed, task));
        let bound = 1.0 / (h as f64).sqrt();
        let weight = uniform_tensor(&mut rng, vec![h, classes.len()], bound);
        self.params.push(Parameter::new(format!("head{task}.weight"), weight));
        self.params.push(Parameter::new(
            format!("head{task}.bias"),
            Tensor::zeros(vec![classes.len()]),
        ));
        let n = self.params.len();
        self.heads.push(Head {
            task,
            classes,
            weight: n - 2,
            bias: n - 1,
        });
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn heads(&self) -> &[Head] {
        &self.heads
    }

    pub fn seen_classes(&self) -> Vec<usize> {
        (0..self.seen.len()).filter(|&c| self.seen[c]).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// All parameter values concatenated in registration order.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for p in &self.params {
            out.extend_from_slice(p.value.data());
        }
        out
    }

    pub fn flat_grads(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for p in &self.params {
            out.extend_from_slice(&p.grad);
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Dimension {
                op: "set_flat_params",
                lhs: vec![self.param_count()],
                rhs: vec![flat.len()],
            });
        }
        let mut off = 0;
        for p in &mut self.params {
            let n = p.value.len();
            p.value.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn set_flat_grads(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Dimension {
                op: "set_flat_grads",
                lhs: vec![self.param_count()],
                rhs: vec![flat.len()],
            });
        }
        let mut off = 0;
        for p in &mut self.params {
            let n = p.grad.len();
            p.grad.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Makes the model aware of a step's classes before training on it:
    /// single mode activates their output units, multi mode creates the
    /// task's head on first sight.
    pub fn observe_classes(&mut self, task: usize, classes: &[usize]) -> Result<()> {
        if let Some(&bad) = classes.iter().find(|&&c| c >= self.config.num_classes_total) {
            return Err(Error::Index {
                index: bad,
                bound: self.config.num_classes_total,
                context: "class id",
            });
        }
        match self.config.head_mode {
            HeadMode::Single => classes.iter().for_each(|&c| self.seen[c] = true),
            HeadMode::Multi => match self.heads.iter().position(|h| h.task == task) {
                Some(i) => {
                    let known = &self.heads[i].classes;
                    if classes.iter().any(|c| !known.contains(c)) {
                        return Err(Error::Protocol(format!(
                            "task {task} head is fixed to classes {known:?}"
                        )));
                    }
                }
                None => {
                    let mut cls = classes.to_vec();
                    cls.sort_unstable();
                    cls.dedup();
                    self.add_head(task, cls);
                }
            },
        }
        Ok(())
    }

    /// Task label to pass to [`Classifier::forward`] for a step with label `task`.
    pub fn head_task(&self, task: usize) -> Option<usize> {
        match self.config.head_mode {
            HeadMode::Single => None,
            HeadMode::Multi => Some(task),
        }
    }

    fn head(&self, task: Option<usize>) -> Result<&Head> {
        match (self.config.head_mode, task) {
            (HeadMode::Single, None) => Ok(&self.heads[0]),
            (HeadMode::Single, Some(t)) => Err(Error::Protocol(format!(
                "single-head model received task label {t}"
            ))),
            (HeadMode::Multi, None) => Err(Error::Protocol(
                "multi-head model requires a task label".into(),
            )),
            (HeadMode::Multi, Some(t)) => self
                .heads
                .iter()
                .find(|h| h.task == t)
                .ok_or_else(|| Error::Protocol(format!("no head for task {t}"))),
        }
    }

    /// Global class id of every output unit of the selected head.
    pub fn output_classes(&self, task: Option<usize>) -> Result<&[usize]> {
        Ok(&self.head(task)?.classes)
    }

    /// Which output units take part in the softmax; `None` means all.
    pub fn output_mask(&self, task: Option<usize>) -> Result<Option<Vec<bool>>> {
        self.head(task)?;
        match self.config.head_mode {
            HeadMode::Single if self.seen.iter().all(|&s| s) => Ok(None),
            HeadMode::Single => Ok(Some(self.seen.clone())),
            HeadMode::Multi => Ok(None),
        }
    }

    /// Maps global class ids to output-unit indices of the selected head.
    pub fn unit_targets(&self, task: Option<usize>, targets: &[usize]) -> Result<Vec<usize>> {
        let head = self.head(task)?;
        if self.config.head_mode == HeadMode::Single {
            return Ok(targets.to_vec());
        }
        targets
            .iter()
            .map(|t| {
                head.classes.iter().position(|c| c == t).ok_or(Error::Index {
                    index: *t,
                    bound: self.config.num_classes_total,
                    context: "class not owned by the selected head",
                })
            })
            .collect()
    }

    /// Registers every parameter as a graph leaf, in parameter order.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.params.iter().map(|p| g.param(p.value.clone())).collect()
    }

    /// Registers every parameter as a constant (no gradients).
    pub fn bind_frozen(&self, g: &mut Graph) -> Vec<Var> {
        self.params.iter().map(|p| g.constant(p.value.clone())).collect()
    }

    pub fn lstm_layer_vars(&self, vars: &[Var], layer: usize) -> LstmLayerVars {
        LstmLayerVars {
            w_ih: vars[3 * layer],
            w_hh: vars[3 * layer + 1],
            bias: vars[3 * layer + 2],
        }
    }

    /// Logits of the selected head for every row of `batch`.
    pub fn forward(
        &self,
        g: &mut Graph,
        vars: &[Var],
        batch: &SequenceBatch,
        task: Option<usize>,
    ) -> Result<Var> {
        if vars.len() != self.params.len() {
            return Err(Error::Dimension {
                op: "forward vars",
                lhs: vec![self.params.len()],
                rhs: vec![vars.len()],
            });
        }
        self.head(task)?;
        let features = self.features(g, vars, batch)?;
        self.head_logits(g, vars, features, task)
    }

    /// Shared representation (last hidden state) for every row of `batch`.
    pub fn features(&self, g: &mut Graph, vars: &[Var], batch: &SequenceBatch) -> Result<Var> {
        if batch.rows() == 0 {
            return Err(Error::Protocol("empty batch".into()));
        }
        match self.config.kind {
            ModelKind::Lstm => self.lstm_features(g, vars, batch),
            ModelKind::Mlp => self.mlp_features(g, vars, batch),
        }
    }

    /// Applies the selected head to features from [`Classifier::features`].
    pub fn head_logits(&self, g: &mut Graph, vars: &[Var], features: Var, task: Option<usize>) -> Result<Var> {
        let head = self.head(task)?;
        let z = g.matmul(features, vars[head.weight])?;
        g.add_bias(z, vars[head.bias])
    }

    fn lstm_features(&self, g: &mut Graph, vars: &[Var], batch: &SequenceBatch) -> Result<Var> {
        if batch.feat_dim != self.config.input_size {
            return Err(Error::Dimension {
                op: "lstm input",
                lhs: vec![self.config.input_size],
                rhs: vec![batch.feat_dim],
            });
        }
        let rows = batch.rows();
        let h = self.config.hidden_size;
        let uniform = batch.is_uniform();
        let masks: Vec<Vec<bool>> = if uniform {
            Vec::new()
        } else {
            (0..batch.max_len)
                .map(|t| batch.lengths.iter().map(|&l| t < l).collect())
                .collect()
        };

        // layer 0 projects every timestep with one product
        let x_all = g.constant(Tensor::matrix(
            batch.max_len * rows,
            batch.feat_dim,
            batch.data.clone(),
        )?);
        let mut layer_inputs: Vec<Var> = Vec::new();
        let mut last = None;
        for l in 0..self.config.num_layers {
            let lv = self.lstm_layer_vars(vars, l);
            let proj_all = if l == 0 {
                let xw = g.matmul(x_all, lv.w_ih)?;
                Some(g.add_bias(xw, lv.bias)?)
            } else {
                None
            };
            let mut hs = g.constant(Tensor::zeros(vec![rows, h]));
            let mut cs = g.constant(Tensor::zeros(vec![rows, h]));
            let mut outputs = Vec::with_capacity(batch.max_len);
            for t in 0..batch.max_len {
                let x_proj = match proj_all {
                    Some(p) => g.slice_rows(p, t * rows, rows)?,
                    None => {
                        let xw = g.matmul(layer_inputs[t], lv.w_ih)?;
                        g.add_bias(xw, lv.bias)?
                    }
                };
                let (hn, cn) = lstm_cell(g, x_proj, hs, cs, lv.w_hh, h)?;
                if uniform || masks[t].iter().all(|&m| m) {
                    hs = hn;
                    cs = cn;
                } else {
                    hs = g.row_blend(hn, hs, &masks[t])?;
                    cs = g.row_blend(cn, cs, &masks[t])?;
                }
                outputs.push(hs);
            }
            last = Some(hs);
            layer_inputs = outputs;
        }
        Ok(last.expect("num_layers >= 1"))
    }

    fn mlp_features(&self, g: &mut Graph, vars: &[Var], batch: &SequenceBatch) -> Result<Var> {
        if !batch.is_uniform() {
            return Err(Error::Unsupported(
                "MLP requires fixed-length sequences".into(),
            ));
        }
        let width = batch.max_len * batch.feat_dim;
        if width != self.config.input_size {
            return Err(Error::Dimension {
                op: "mlp input",
                lhs: vec![self.config.input_size],
                rhs: vec![batch.max_len, batch.feat_dim],
            });
        }
        let rows = batch.rows();
        let mut flat = Vec::with_capacity(rows * width);
        for r in 0..rows {
            flat.extend(batch.sequence(r));
        }
        let mut x = g.constant(Tensor::matrix(rows, width, flat)?);
        for l in 0..self.config.num_layers {
            let z = g.matmul(x, vars[2 * l])?;
            let z = g.add_bias(z, vars[2 * l + 1])?;
            x = g.relu(z);
        }
        Ok(x)
    }

    /// Logits without gradient bookkeeping.
    pub fn logits(&self, batch: &SequenceBatch, task: Option<usize>) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.bind_frozen(&mut g);
        let out = self.forward(&mut g, &vars, batch, task)?;
        Ok(g.value(out).clone())
    }

    /// Predicted global class ids. Single mode only considers output units
    /// seen in training (all units if none have been seen yet).
    pub fn predict(&self, batch: &SequenceBatch, task: Option<usize>) -> Result<Vec<usize>> {
        let logits = self.logits(batch, task)?;
        let classes = self.output_classes(task)?;
        let mask = match self.output_mask(task)? {
            Some(m) if m.iter().any(|&s| s) => Some(m),
            _ => None,
        };
        let (rows, cols) = logits.dims2();
        Ok((0..rows)
            .map(|r| {
                let row = &logits.data()[r * cols..(r + 1) * cols];
                let mut best = None::<(usize, f64)>;
                for (j, &v) in row.iter().enumerate() {
                    if mask.as_ref().is_some_and(|m| !m[j]) {
                        continue;
                    }
                    if best.is_none_or(|(_, bv)| v > bv) {
                        best = Some((j, v));
                    }
                }
                classes[best.map_or(0, |(j, _)| j)]
            })
            .collect())
    }
}

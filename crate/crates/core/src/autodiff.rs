//! Reverse-mode differentiation on a tape, plus Adam.
//!
//! Nodes are appended in evaluation order, so every parent index is smaller
//! than its child's and a single reverse sweep visits each node after all of
//! its consumers.

use crate::error::{Error, Result};
use crate::kernel::{self, KernelConfig, MeshParams, ScoreMode};
use crate::numerics::{matmul, softmax_rows, RealTensor, SeededRng};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Relu(Var),
    Transpose(Var),
    Scale(Var, f64),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: RealTensor,
        inv_std: Vec<f64>,
    },
    MeanRows(Var),
    SoftmaxRows(Var),
    GaussianScores {
        tokens: Var,
        gamma: Var,
        coefficient: f64,
        normalize: bool,
    },
    MeshGamma {
        angles: Var,
        mesh: MeshParams,
        detected: Vec<usize>,
    },
    PhotonicScores {
        tokens: Var,
        gamma: Option<Var>,
        log_weight: Option<Var>,
        cfg: KernelConfig,
    },
    CrossEntropy {
        logits: Var,
        label: usize,
        probs: Vec<f64>,
    },
    Mean(Vec<Var>),
}

#[derive(Debug, Clone)]
struct Node {
    value: RealTensor,
    op: Op,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Wengert list of tensor operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &RealTensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: RealTensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: RealTensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = matmul(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    /// `x + 1·biasᵀ`: adds a length-`m` vector to every row of an `r×m` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if !xv.is_matrix() || bv.len() != xv.cols() {
            return Err(shape_err("add_row", xv.shape(), bv.shape()));
        }
        let mut value = xv.clone();
        let m = xv.cols();
        for (k, v) in value.data_mut().iter_mut().enumerate() {
            *v += bv.data()[k % m];
        }
        Ok(self.push(value, Op::AddRow(x, bias)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(value, Op::Relu(x))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let value = self.value(x).transpose();
        self.push(value, Op::Transpose(x))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).scale(c);
        self.push(value, Op::Scale(x, c))
    }

    /// Per-row normalization to mean 0, variance 1, then `gain ⊙ · + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let (gv, bv) = (self.value(gain), self.value(bias));
        if !xv.is_matrix() || gv.len() != xv.cols() || bv.len() != xv.cols() {
            return Err(shape_err("layer_norm", xv.shape(), gv.shape()));
        }
        let (r, d) = (xv.rows(), xv.cols());
        let mut normalized = RealTensor::zeros(&[r, d]);
        let mut inv_std = Vec::with_capacity(r);
        let mut value = RealTensor::zeros(&[r, d]);
        for i in 0..r {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(s);
            for k in 0..d {
                let h = (row[k] - mean) * s;
                normalized.set(i, k, h);
                value.set(i, k, gv.data()[k] * h + bv.data()[k]);
            }
        }
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
        ))
    }

    /// Column means of an `r×m` matrix, as a `1×m` matrix.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if !xv.is_matrix() || xv.rows() == 0 {
            return Err(Error::Shape(format!(
                "mean_rows needs a non-empty matrix, got {:?}",
                xv.shape()
            )));
        }
        let (r, m) = (xv.rows(), xv.cols());
        let data = (0..m)
            .map(|k| (0..r).map(|i| xv.get(i, k)).sum::<f64>() / r as f64)
            .collect();
        let value = RealTensor::new(vec![1, m], data)?;
        Ok(self.push(value, Op::MeanRows(x)))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        if !self.value(x).is_matrix() {
            return Err(Error::Shape("softmax_rows needs a matrix".into()));
        }
        let value = softmax_rows(self.value(x));
        Ok(self.push(value, Op::SoftmaxRows(x)))
    }

    /// Classical Gaussian-kernel scores `exp(−c·zᵀΓz)`, optionally
    /// row-normalized.
    pub fn gaussian_scores(
        &mut self,
        tokens: Var,
        gamma: Var,
        coefficient: f64,
        normalize: bool,
    ) -> Result<Var> {
        let (t, g) = (self.value(tokens), self.value(gamma));
        if !t.is_matrix() || g.shape() != [t.cols(), t.cols()] {
            return Err(shape_err("gaussian_scores", t.shape(), g.shape()));
        }
        let mut value = kernel::gaussian_raw(t, g, coefficient, 1.0);
        if normalize {
            normalize_rows(&mut value);
        }
        Ok(self.push(
            value,
            Op::GaussianScores {
                tokens,
                gamma,
                coefficient,
                normalize,
            },
        ))
    }

    /// Γ_eff of a mesh whose angles are the node `angles`, laid out as
    /// [`MeshParams::angles`].
    pub fn mesh_gamma(&mut self, angles: Var, template: &MeshParams, detected: &[usize]) -> Result<Var> {
        let mut mesh = template.clone();
        mesh.set_angles(self.value(angles).data())?;
        let value = kernel::gamma_of_mesh(&mesh, detected)?;
        Ok(self.push(
            value,
            Op::MeshGamma {
                angles,
                mesh,
                detected: detected.to_vec(),
            },
        ))
    }

    /// Photonic score matrix. The forward pass runs the circuit through
    /// [`kernel::score_matrix`] (shots included when `cfg.backend` says so);
    /// the backward pass differentiates the exact scores.
    ///
    /// `gamma` must be the [`Tape::mesh_gamma`] node of `mesh` in gamma form;
    /// `log_weight` is the `[1]` log of the scalar weight in scalar-weighted
    /// mode.
    pub fn photonic_scores(
        &mut self,
        tokens: Var,
        mesh: &MeshParams,
        gamma: Option<Var>,
        log_weight: Option<Var>,
        cfg: &KernelConfig,
        rng: Option<&SeededRng>,
    ) -> Result<Var> {
        let mut cfg = cfg.clone();
        match cfg.score_mode {
            ScoreMode::GammaForm if gamma.is_none() => {
                return Err(Error::Validation("gamma-form scores need a gamma node".into()))
            }
            ScoreMode::ScalarWeighted => {
                let lw = log_weight
                    .ok_or_else(|| Error::Validation("scalar-weighted scores need a weight node".into()))?;
                cfg.scalar_weight = self.value(lw).data()[0].exp();
            }
            _ => {}
        }
        let value = kernel::score_matrix(self.value(tokens), mesh, &cfg, rng)?.scores;
        Ok(self.push(
            value,
            Op::PhotonicScores {
                tokens,
                gamma,
                log_weight,
                cfg,
            },
        ))
    }

    /// `−log softmax(logits)[label]` for a single row of logits.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let lv = self.value(logits);
        let k = lv.len();
        if label >= k {
            return Err(Error::Validation(format!(
                "label {label} out of range for {k} classes"
            )));
        }
        let (loss, probs) = cross_entropy(lv.data(), label)?;
        Ok(self.push(
            RealTensor::vector(vec![loss]),
            Op::CrossEntropy { logits, label, probs },
        ))
    }

    /// Mean of scalar (`[1]`) nodes.
    pub fn mean(&mut self, items: &[Var]) -> Result<Var> {
        if items.is_empty() || items.iter().any(|&v| self.value(v).len() != 1) {
            return Err(Error::Shape("mean needs one or more scalar nodes".into()));
        }
        let total: f64 = items.iter().map(|&v| self.value(v).data()[0]).sum();
        let value = RealTensor::vector(vec![total / items.len() as f64]);
        Ok(self.push(value, Op::Mean(items.to_vec())))
    }

    /// Reverse sweep from a scalar node. Returns one adjoint per node;
    /// nodes the output does not depend on get `None`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.value(output).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar output, got {:?}",
                self.value(output).shape()
            )));
        }
        let mut grads: Vec<Option<RealTensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(RealTensor::filled(self.value(output).shape(), 1.0));
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            for (parent, contribution) in self.vjp(node, &g)? {
                if parent.0 >= idx {
                    return Err(Error::Internal(format!(
                        "tape node {idx} has a later parent {}",
                        parent.0
                    )));
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&contribution)?,
                    slot @ None => *slot = Some(contribution),
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn vjp(&self, node: &Node, g: &RealTensor) -> Result<Vec<(Var, RealTensor)>> {
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                vec![
                    (*a, matmul(g, &bv.transpose())?),
                    (*b, matmul(&av.transpose(), g)?),
                ]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::AddRow(x, bias) => {
                let m = g.cols();
                let mut gb = vec![0.0; m];
                for (k, v) in g.data().iter().enumerate() {
                    gb[k % m] += v;
                }
                let gb = RealTensor::new(self.value(*bias).shape().to_vec(), gb)?;
                vec![(*x, g.clone()), (*bias, gb)]
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let data = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(gv, v)| if *v > 0.0 { *gv } else { 0.0 })
                    .collect();
                vec![(*x, RealTensor::new(g.shape().to_vec(), data)?)]
            }
            Op::Transpose(x) => vec![(*x, g.transpose())],
            Op::Scale(x, c) => vec![(*x, g.scale(*c))],
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let gv = self.value(*gain);
                let (r, d) = (g.rows(), g.cols());
                let mut dx = RealTensor::zeros(&[r, d]);
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                for i in 0..r {
                    let mut gh = vec![0.0; d];
                    for k in 0..d {
                        let gk = g.get(i, k);
                        dgain[k] += gk * normalized.get(i, k);
                        dbias[k] += gk;
                        gh[k] = gk * gv.data()[k];
                    }
                    let mean_gh = gh.iter().sum::<f64>() / d as f64;
                    let mean_ghh = (0..d).map(|k| gh[k] * normalized.get(i, k)).sum::<f64>() / d as f64;
                    for k in 0..d {
                        dx.set(
                            i,
                            k,
                            inv_std[i] * (gh[k] - mean_gh - normalized.get(i, k) * mean_ghh),
                        );
                    }
                }
                vec![
                    (*x, dx),
                    (*gain, RealTensor::new(gv.shape().to_vec(), dgain)?),
                    (*bias, RealTensor::new(self.value(*bias).shape().to_vec(), dbias)?),
                ]
            }
            Op::MeanRows(x) => {
                let xv = self.value(*x);
                let (r, m) = (xv.rows(), xv.cols());
                let mut dx = RealTensor::zeros(&[r, m]);
                for i in 0..r {
                    for k in 0..m {
                        dx.set(i, k, g.data()[k] / r as f64);
                    }
                }
                vec![(*x, dx)]
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let mut dx = RealTensor::zeros(y.shape());
                for i in 0..y.rows() {
                    let dot: f64 = (0..y.cols()).map(|j| g.get(i, j) * y.get(i, j)).sum();
                    for j in 0..y.cols() {
                        dx.set(i, j, y.get(i, j) * (g.get(i, j) - dot));
                    }
                }
                vec![(*x, dx)]
            }
            Op::GaussianScores {
                tokens,
                gamma,
                coefficient,
                normalize,
            } => {
                let (t, gm) = (self.value(*tokens), self.value(*gamma));
                let raw = kernel::gaussian_raw(t, gm, *coefficient, 1.0);
                let parts = kernel::gaussian_scores_vjp(t, &raw, gm, *coefficient, *normalize, g)?;
                vec![(*tokens, parts.tokens), (*gamma, parts.gamma)]
            }
            Op::MeshGamma {
                angles,
                mesh,
                detected,
            } => {
                let grad = kernel::mesh_backward(mesh, detected, g)?;
                vec![(
                    *angles,
                    RealTensor::new(self.value(*angles).shape().to_vec(), grad)?,
                )]
            }
            Op::PhotonicScores {
                tokens,
                gamma,
                log_weight,
                cfg,
            } => {
                let t = self.value(*tokens);
                let c = cfg.coefficient();
                let gm = match (cfg.score_mode, gamma) {
                    (ScoreMode::GammaForm, Some(gv)) => self.value(*gv).clone(),
                    _ => RealTensor::identity(t.cols()),
                };
                let raw = kernel::gaussian_raw(t, &gm, c, cfg.weight());
                let parts = kernel::gaussian_scores_vjp(t, &raw, &gm, c, cfg.normalize_rows, g)?;
                let mut out = vec![(*tokens, parts.tokens)];
                match cfg.score_mode {
                    ScoreMode::GammaForm => {
                        if let Some(gv) = gamma {
                            out.push((*gv, parts.gamma));
                        }
                    }
                    ScoreMode::ScalarWeighted => {
                        if let Some(lw) = log_weight {
                            out.push((*lw, RealTensor::vector(vec![parts.weight])));
                        }
                    }
                }
                out
            }
            Op::CrossEntropy { logits, label, probs } => {
                let scale = g.data()[0];
                let data = probs
                    .iter()
                    .enumerate()
                    .map(|(k, p)| scale * (p - if k == *label { 1.0 } else { 0.0 }))
                    .collect();
                vec![(
                    *logits,
                    RealTensor::new(self.value(*logits).shape().to_vec(), data)?,
                )]
            }
            Op::Mean(items) => {
                let share = g.data()[0] / items.len() as f64;
                items
                    .iter()
                    .map(|&v| (v, RealTensor::vector(vec![share])))
                    .collect()
            }
        })
    }
}

fn normalize_rows(m: &mut RealTensor) {
    for i in 0..m.rows() {
        let row = m.row_mut(i);
        let z: f64 = row.iter().sum();
        if z > 0.0 {
            row.iter_mut().for_each(|v| *v /= z);
        }
    }
}

/// Adjoints from [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<RealTensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&RealTensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Adjoint of `v`, or zeros shaped like `like` when `v` did not
    /// influence the output.
    pub fn get_or_zeros(&self, v: Var, like: &RealTensor) -> RealTensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| RealTensor::zeros(like.shape()))
    }
}

/// Stabilized `−log softmax(logits)[label]` and the softmax probabilities.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(Error::Validation(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|v| (v - max).exp()).sum();
    let log_z = max + sum.ln();
    let probs = logits.iter().map(|v| (v - log_z).exp()).collect();
    Ok((log_z - logits[label], probs))
}

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    entries: Vec<(String, RealTensor)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: RealTensor) -> Result<()> {
        let name = name.into();
        if self.index_of(&name).is_some() {
            return Err(Error::Validation(format!("duplicate parameter {name}")));
        }
        self.entries.push((name, value));
        Ok(())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&RealTensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut RealTensor> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&RealTensor> {
        self.get(name)
            .ok_or_else(|| Error::Internal(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &RealTensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &RealTensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut RealTensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.009,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Bias-corrected Adam moments for every tensor of a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<RealTensor>,
    v: Vec<RealTensor>,
}

impl AdamState {
    pub fn new(params: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<RealTensor> = params.tensors().map(|t| RealTensor::zeros(t.shape())).collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update. `grads` follows the parameter order of the store. A
    /// non-finite gradient leaves the parameters untouched and reports
    /// divergence at `epoch`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[RealTensor], epoch: usize) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Shape(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for ((name, p), g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(shape_err(name, p.shape(), g.shape()));
            }
            if !g.all_finite() {
                return Err(Error::Divergence {
                    epoch,
                    message: format!("non-finite gradient for {name}"),
                });
            }
        }
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, g), m), v) in params.tensors_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for k in 0..p.len() {
                let gk = g.data()[k];
                let mk = beta1 * m.data()[k] + (1.0 - beta1) * gk;
                let vk = beta2 * v.data()[k] + (1.0 - beta2) * gk * gk;
                m.data_mut()[k] = mk;
                v.data_mut()[k] = vk;
                let update = learning_rate * (mk / bc1) / ((vk / bc2).sqrt() + epsilon);
                p.data_mut()[k] -= update;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::Backend;

    fn rand_tensor(rng: &mut SeededRng, shape: &[usize]) -> RealTensor {
        let n = shape.iter().product();
        RealTensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
    }

    /// Central-difference check of `loss(inputs)` against the tape gradient
    /// for every input tensor.
    fn check_gradients(inputs: &[RealTensor], build: impl Fn(&mut Tape, &[Var]) -> Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&mut tape, &vars);
        let grads = tape.backward(out).unwrap();
        let eval = |xs: &[RealTensor]| {
            let mut t = Tape::new();
            let vs: Vec<Var> = xs.iter().map(|x| t.leaf(x.clone())).collect();
            let o = build(&mut t, &vs);
            t.value(o).data()[0]
        };
        for (idx, input) in inputs.iter().enumerate() {
            let analytic = grads.get_or_zeros(vars[idx], input);
            for k in 0..input.len() {
                let h = 1e-5 * input.data()[k].abs().max(1.0);
                let mut up = inputs.to_vec();
                let mut dn = inputs.to_vec();
                up[idx].data_mut()[k] += h;
                dn[idx].data_mut()[k] -= h;
                let numeric = (eval(&up) - eval(&dn)) / (2.0 * h);
                let a = analytic.data()[k];
                assert!(
                    (a - numeric).abs() <= 1e-6 + 1e-4 * numeric.abs(),
                    "input {idx}[{k}]: analytic {a} vs numeric {numeric}"
                );
            }
        }
    }

    /// Reduces a matrix node to a `[1,1]` scalar with fixed random weights
    /// so every output entry is exercised.
    fn weighted_sum(tape: &mut Tape, x: Var, seed: u64) -> Var {
        let (r, c) = (tape.value(x).rows(), tape.value(x).cols());
        let mut rng = SeededRng::new(seed);
        let w = tape.leaf(rand_tensor(&mut rng, &[c, 1]));
        let y = tape.matmul(x, w).unwrap();
        let ones = tape.leaf(RealTensor::filled(&[1, r], 1.0));
        tape.matmul(ones, y).unwrap()
    }

    #[test]
    fn half_norm_squared() {
        let p = RealTensor::new(vec![3, 1], vec![1.0, -2.0, 0.5]).unwrap();
        let mut tape = Tape::new();
        let v = tape.leaf(p.clone());
        let vt = tape.transpose(v);
        let sq = tape.matmul(vt, v).unwrap();
        let half = tape.scale(sq, 0.5);
        let g = tape.backward(half).unwrap();
        assert_eq!(g.get(v).unwrap(), &p);
    }

    #[test]
    fn two_op_chain() {
        // y = relu(3x) at x = 2 and x = -1
        for (x, want) in [(2.0, 3.0), (-1.0, 0.0)] {
            let mut tape = Tape::new();
            let v = tape.leaf(RealTensor::new(vec![1, 1], vec![x]).unwrap());
            let s = tape.scale(v, 3.0);
            let r = tape.relu(s);
            assert_eq!(tape.backward(r).unwrap().get(v).unwrap().data(), &[want]);
        }
    }

    #[test]
    fn unused_leaf_has_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(RealTensor::vector(vec![1.0]));
        let b = tape.leaf(RealTensor::vector(vec![2.0]));
        let s = tape.scale(a, 2.0);
        let g = tape.backward(s).unwrap();
        assert!(g.get(b).is_none());
        let m = tape.leaf(RealTensor::zeros(&[2, 2]));
        assert!(matches!(tape.backward(m), Err(Error::Shape(_))));
    }

    #[test]
    fn matmul_add_relu_gradients() {
        let mut rng = SeededRng::new(1);
        let inputs = vec![
            rand_tensor(&mut rng, &[3, 4]),
            rand_tensor(&mut rng, &[4, 2]),
            rand_tensor(&mut rng, &[2]),
            rand_tensor(&mut rng, &[3, 2]),
        ];
        check_gradients(&inputs, |t, v| {
            let y = t.matmul(v[0], v[1]).unwrap();
            let y = t.add_row(y, v[2]).unwrap();
            let y = t.add(y, v[3]).unwrap();
            let y = t.relu(y);
            weighted_sum(t, y, 7)
        });
    }

    #[test]
    fn layer_norm_gradients() {
        let mut rng = SeededRng::new(2);
        let inputs = vec![
            rand_tensor(&mut rng, &[3, 5]),
            rand_tensor(&mut rng, &[5]),
            rand_tensor(&mut rng, &[5]),
        ];
        check_gradients(&inputs, |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2]).unwrap();
            weighted_sum(t, y, 8)
        });
    }

    #[test]
    fn softmax_mean_transpose_gradients() {
        let mut rng = SeededRng::new(3);
        let inputs = vec![rand_tensor(&mut rng, &[3, 4])];
        check_gradients(&inputs, |t, v| {
            let y = t.softmax_rows(v[0]).unwrap();
            let y = t.transpose(y);
            let y = t.mean_rows(y).unwrap();
            weighted_sum(t, y, 9)
        });
    }

    #[test]
    fn cross_entropy_and_mean_gradients() {
        let mut rng = SeededRng::new(4);
        let inputs = vec![rand_tensor(&mut rng, &[1, 3]), rand_tensor(&mut rng, &[1, 3])];
        check_gradients(&inputs, |t, v| {
            let a = t.cross_entropy(v[0], 2).unwrap();
            let b = t.cross_entropy(v[1], 0).unwrap();
            t.mean(&[a, b]).unwrap()
        });
    }

    #[test]
    fn gaussian_score_gradients() {
        let mut rng = SeededRng::new(5);
        let m = rand_tensor(&mut rng, &[4, 4]);
        let inputs = vec![rand_tensor(&mut rng, &[3, 4]), m];
        for normalize in [true, false] {
            check_gradients(&inputs, |t, v| {
                let mt = t.transpose(v[1]);
                let gamma = t.matmul(mt, v[1]).unwrap();
                let s = t.gaussian_scores(v[0], gamma, 0.5, normalize).unwrap();
                weighted_sum(t, s, 10)
            });
        }
    }

    #[test]
    fn photonic_score_gradients() {
        let mut rng = SeededRng::new(6);
        let d = 4;
        let mesh = MeshParams::random(d, d, 0.5, &mut rng).unwrap();
        let cfg = KernelConfig::new(d);
        let inputs = vec![rand_tensor(&mut rng, &[2, d]), RealTensor::vector(mesh.angles())];
        check_gradients(&inputs, |t, v| {
            let gamma = t.mesh_gamma(v[1], &mesh, &cfg.detected).unwrap();
            let mut m = mesh.clone();
            m.set_angles(t.value(v[1]).data()).unwrap();
            let s = t
                .photonic_scores(v[0], &m, Some(gamma), None, &cfg, None)
                .unwrap();
            weighted_sum(t, s, 11)
        });

        let mut scalar = KernelConfig::new(d);
        scalar.score_mode = ScoreMode::ScalarWeighted;
        scalar.normalize_rows = false;
        let inputs = vec![rand_tensor(&mut rng, &[3, d]), RealTensor::vector(vec![0.3])];
        check_gradients(&inputs, |t, v| {
            let s = t
                .photonic_scores(v[0], &mesh, None, Some(v[1]), &scalar, None)
                .unwrap();
            weighted_sum(t, s, 12)
        });
    }

    #[test]
    fn shot_forward_uses_exact_backward() {
        let mut rng = SeededRng::new(7);
        let d = 3;
        let mesh = MeshParams::random(d, d, 0.5, &mut rng).unwrap();
        let mut cfg = KernelConfig::new(d);
        let tokens = rand_tensor(&mut rng, &[3, d]);
        let run = |cfg: &KernelConfig| {
            let mut t = Tape::new();
            let x = t.leaf(tokens.clone());
            let a = t.leaf(RealTensor::vector(mesh.angles()));
            let g = t.mesh_gamma(a, &mesh, &cfg.detected).unwrap();
            let s = t
                .photonic_scores(x, &mesh, Some(g), None, cfg, Some(&SeededRng::new(1)))
                .unwrap();
            let out = weighted_sum(&mut t, s, 13);
            let grads = t.backward(out).unwrap();
            (t.value(s).clone(), grads.get(x).unwrap().clone())
        };
        let (exact_scores, exact_grad) = run(&cfg);
        cfg.backend = Backend::Shots;
        let (shot_scores, shot_grad) = run(&cfg);
        assert!(exact_scores.max_abs_diff(&shot_scores) > 0.0);
        assert_eq!(exact_grad, shot_grad);
    }

    #[test]
    fn cross_entropy_values() {
        let (loss, probs) = cross_entropy(&[0.0; 5], 3).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-15);
        assert!(probs.iter().all(|p| (p - 0.2).abs() < 1e-15));
        let (loss, _) = cross_entropy(&[2.0, 0.0, 0.0], 0).unwrap();
        assert!(loss < 3f64.ln());
        let logits: [f64; 4] = [0.3, -1.2, 2.5, 0.0];
        let direct = -logits[1].exp().ln() + logits.iter().map(|v: &f64| v.exp()).sum::<f64>().ln();
        assert!((cross_entropy(&logits, 1).unwrap().0 - direct).abs() < 1e-12);
        assert!((cross_entropy(&[1000.0, 0.0], 1).unwrap().0 - 1000.0).abs() < 1e-9);
        assert!(cross_entropy(&logits, 4).is_err());
    }

    fn scalar_store(x: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("x", RealTensor::vector(vec![x])).unwrap();
        s
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut p = scalar_store(1.5);
        let mut adam = AdamState::new(&p, AdamConfig::default());
        adam.step(&mut p, &[RealTensor::vector(vec![0.0])], 1).unwrap();
        assert_eq!(p.get("x").unwrap().data(), &[1.5]);
    }

    #[test]
    fn adam_constant_gradient_steps_by_lr() {
        let mut p = scalar_store(0.0);
        let mut adam = AdamState::new(&p, AdamConfig::default());
        let mut prev = 0.0;
        for _ in 0..200 {
            adam.step(&mut p, &[RealTensor::vector(vec![3.0])], 1).unwrap();
            let x = p.get("x").unwrap().data()[0];
            assert!(((prev - x) - 0.009).abs() < 1e-9);
            prev = x;
        }
    }

    #[test]
    fn adam_matches_hand_trace() {
        // f(x) = x², x₀ = 1, lr = 0.1; moments worked step by step
        let cfg = AdamConfig {
            learning_rate: 0.1,
            ..AdamConfig::default()
        };
        let mut p = scalar_store(1.0);
        let mut adam = AdamState::new(&p, cfg);
        let (mut x, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        let expected_first = 1.0 - 0.1 * 2.0 / (2.0 + 1e-8);
        for t in 1..=5 {
            let g = 2.0 * x;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            x -= 0.1 * mh / (vh.sqrt() + 1e-8);
            let gp = 2.0 * p.get("x").unwrap().data()[0];
            adam.step(&mut p, &[RealTensor::vector(vec![gp])], 1).unwrap();
            assert!((p.get("x").unwrap().data()[0] - x).abs() < 1e-12);
            if t == 1 {
                assert!((x - expected_first).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn adam_update_direction_ignores_loss_scale() {
        // L = Σ a_k x_k² + b_k x_k, scaled by c
        let a = [0.5, 2.0, 1.0, 0.1];
        let b = [1.0, -0.5, 0.3, 2.0];
        let updates = |c: f64| {
            let mut p = ParamStore::new();
            p.insert("x", RealTensor::vector(vec![1.0, -1.0, 0.5, 2.0]))
                .unwrap();
            let mut adam = AdamState::new(&p, AdamConfig::default());
            let mut last = Vec::new();
            for _ in 0..100 {
                let x = p.get("x").unwrap().data().to_vec();
                let g: Vec<f64> = (0..4).map(|k| c * (2.0 * a[k] * x[k] + b[k])).collect();
                adam.step(&mut p, &[RealTensor::vector(g)], 1).unwrap();
                let y = p.get("x").unwrap().data();
                last = (0..4).map(|k| y[k] - x[k]).collect();
            }
            last
        };
        let cosine = |u: &[f64], v: &[f64]| {
            let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
            let nu: f64 = u.iter().map(|a| a * a).sum::<f64>().sqrt();
            let nv: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            dot / (nu * nv)
        };
        let base = updates(1.0);
        for c in [0.1, 10.0] {
            assert!(cosine(&base, &updates(c)) > 0.999);
        }
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut p = scalar_store(1.0);
        let mut adam = AdamState::new(&p, AdamConfig::default());
        let err = adam.step(&mut p, &[RealTensor::zeros(&[1])], 3);
        assert!(err.is_ok());
        let mut bad = RealTensor::zeros(&[1]);
        bad.data_mut()[0] = f64::NAN;
        match adam.step(&mut p, &[bad], 7) {
            Err(Error::Divergence { epoch, .. }) => assert_eq!(epoch, 7),
            other => panic!("expected divergence, got {other:?}"),
        }
        assert_eq!(p.get("x").unwrap().data(), &[1.0]);
    }
}

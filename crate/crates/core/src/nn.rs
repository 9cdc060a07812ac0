//! Attention blocks and the encoder classifier.
//!
//! The standalone functions ([`gksam_scores`], [`multihead_sam`], …) are
//! plain forward evaluations. [`Model`] records the same computations on an
//! [`autodiff::Tape`] for training.

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::kernel::{self, Backend, KernelConfig, MeshParams, ScoreMode};
use crate::numerics::{eigh_symmetric, matmul, softmax_rows, RealTensor, SeededRng, MASK_SENTINEL};

fn check_tokens(x: &RealTensor, d: usize, what: &str) -> Result<()> {
    if !x.is_matrix() || x.cols() != d || x.rows() == 0 {
        return Err(Error::Shape(format!(
            "{what}: expected n x {d} tokens, got {:?}",
            x.shape()
        )));
    }
    Ok(())
}

/// Normalized Gaussian-kernel scores `exp(−½ zᵀΓz) / Z_i`.
pub fn gksam_scores(tokens: &RealTensor, gamma: &RealTensor) -> Result<RealTensor> {
    let d = gamma.cols();
    if gamma.shape() != [d, d] {
        return Err(Error::Shape(format!(
            "gamma must be square, got {:?}",
            gamma.shape()
        )));
    }
    check_tokens(tokens, d, "gksam_scores")?;
    let mut scores = kernel::gaussian_raw(tokens, gamma, 0.5, 1.0);
    for i in 0..scores.rows() {
        let row = scores.row_mut(i);
        let z: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= z);
    }
    Ok(scores)
}

/// `out_i = Σ_j A(i,j)·(X_j W^V)`.
pub fn gksam_forward(tokens: &RealTensor, gamma: &RealTensor, w_v: &RealTensor) -> Result<RealTensor> {
    let scores = gksam_scores(tokens, gamma)?;
    matmul(&scores, &matmul(tokens, w_v)?)
}

/// Photonic attention: scores from [`kernel::score_matrix`], then mixing of
/// the values `X W^V`.
pub fn pgksam_forward(
    tokens: &RealTensor,
    mesh: &MeshParams,
    cfg: &KernelConfig,
    w_v: &RealTensor,
    rng: Option<&SeededRng>,
) -> Result<RealTensor> {
    let scores = kernel::score_matrix(tokens, mesh, cfg, rng)?;
    matmul(&scores.scores, &matmul(tokens, w_v)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub w_q: RealTensor,
    pub w_k: RealTensor,
    pub w_v: RealTensor,
}

/// Per-head projections (`d × d_h`) plus an output projection (`d × d`).
#[derive(Debug, Clone, PartialEq)]
pub struct MultiheadParams {
    pub heads: Vec<HeadParams>,
    pub w_o: RealTensor,
}

impl MultiheadParams {
    pub fn new(heads: Vec<HeadParams>, w_o: RealTensor) -> Result<Self> {
        let d = w_o.rows();
        if heads.is_empty() || w_o.shape() != [d, d] || !d.is_multiple_of(heads.len()) {
            return Err(Error::Shape(format!(
                "{} heads do not divide output projection {:?}",
                heads.len(),
                w_o.shape()
            )));
        }
        let dh = d / heads.len();
        for h in &heads {
            for w in [&h.w_q, &h.w_k, &h.w_v] {
                if w.shape() != [d, dh] {
                    return Err(Error::Shape(format!(
                        "head projection must be {d}x{dh}, got {:?}",
                        w.shape()
                    )));
                }
            }
        }
        Ok(Self { heads, w_o })
    }

    pub fn random(d: usize, heads: usize, rng: &mut SeededRng) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::Validation(format!("{heads} heads do not divide {d}")));
        }
        let dh = d / heads;
        let hs = (0..heads)
            .map(|_| HeadParams {
                w_q: uniform_init(&[d, dh], d, rng),
                w_k: uniform_init(&[d, dh], d, rng),
                w_v: uniform_init(&[d, dh], d, rng),
            })
            .collect();
        Self::new(hs, uniform_init(&[d, d], d, rng))
    }

    pub fn dim(&self) -> usize {
        self.w_o.rows()
    }

    pub fn head_dim(&self) -> usize {
        self.dim() / self.heads.len()
    }
}

/// Scaled dot-product attention over `heads`, concatenated and projected.
///
/// Queries come from `queries_from`, keys and values from `keys_values_from`.
/// With `causal`, query `i` ignores keys `j > i`.
pub fn multihead_sam(
    queries_from: &RealTensor,
    keys_values_from: &RealTensor,
    params: &MultiheadParams,
    causal: bool,
) -> Result<RealTensor> {
    let d = params.dim();
    check_tokens(queries_from, d, "multihead_sam queries")?;
    check_tokens(keys_values_from, d, "multihead_sam keys")?;
    let (nq, nk) = (queries_from.rows(), keys_values_from.rows());
    let dh = params.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut concat = RealTensor::zeros(&[nq, d]);
    for (h, head) in params.heads.iter().enumerate() {
        let q = matmul(queries_from, &head.w_q)?;
        let k = matmul(keys_values_from, &head.w_k)?;
        let v = matmul(keys_values_from, &head.w_v)?;
        let mut logits = matmul(&q, &k.transpose())?.scale(scale);
        if causal {
            for i in 0..nq {
                for j in (i + 1)..nk {
                    logits.set(i, j, MASK_SENTINEL);
                }
            }
        }
        let out = matmul(&softmax_rows(&logits), &v)?;
        for i in 0..nq {
            concat.row_mut(i)[h * dh..(h + 1) * dh].copy_from_slice(out.row(i));
        }
    }
    matmul(&concat, &params.w_o)
}

/// Sinusoidal encoding: `PE(p, 2k) = sin(p / 10000^{2k/d})`,
/// `PE(p, 2k+1) = cos(p / 10000^{2k/d})`.
pub fn positional_encoding(n: usize, d: usize) -> Result<RealTensor> {
    if d == 0 || !d.is_multiple_of(2) {
        return Err(Error::Validation(format!(
            "positional encoding needs an even width, got {d}"
        )));
    }
    let mut pe = RealTensor::zeros(&[n, d]);
    for pos in 0..n {
        for k in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * k as f64 / d as f64);
            pe.set(pos, 2 * k, angle.sin());
            pe.set(pos, 2 * k + 1, angle.cos());
        }
    }
    Ok(pe)
}

/// Per-token layer normalization with ε = 1e-5, then `gain ⊙ · + bias`.
pub fn layer_norm(x: &RealTensor, gain: &RealTensor, bias: &RealTensor) -> Result<RealTensor> {
    let mut tape = Tape::new();
    let (xv, g, b) = (
        tape.leaf(x.clone()),
        tape.leaf(gain.clone()),
        tape.leaf(bias.clone()),
    );
    let y = tape.layer_norm(xv, g, b)?;
    Ok(tape.value(y).clone())
}

/// `ReLU(x W + b)`, followed by `· W₂ + b₂` when a second projection is given.
pub fn ffn(
    x: &RealTensor,
    w: &RealTensor,
    b: &RealTensor,
    second: Option<(&RealTensor, &RealTensor)>,
) -> Result<RealTensor> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let y = ffn_on_tape(
        &mut tape,
        xv,
        [w, b].map(|t| t.clone()),
        second.map(|(w2, b2)| [w2.clone(), b2.clone()]),
    )?;
    Ok(tape.value(y).clone())
}

fn ffn_on_tape(
    tape: &mut Tape,
    x: Var,
    first: [RealTensor; 2],
    second: Option<[RealTensor; 2]>,
) -> Result<Var> {
    let [w, b] = first.map(|t| tape.leaf(t));
    let h = tape.matmul(x, w)?;
    let h = tape.add_row(h, b)?;
    let h = tape.relu(h);
    match second {
        Some(pair) => {
            let [w2, b2] = pair.map(|t| tape.leaf(t));
            let o = tape.matmul(h, w2)?;
            tape.add_row(o, b2)
        }
        None => Ok(h),
    }
}

fn uniform_init(shape: &[usize], fan_in: usize, rng: &mut SeededRng) -> RealTensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.uniform(-bound, bound)).collect();
    RealTensor::new(shape.to_vec(), data).expect("finite init")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionKind {
    /// Photonic kernel scores.
    Photonic,
    /// Classical Gaussian kernel with Γ = MᵀM.
    Classical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FfnKind {
    /// `W₂·ReLU(W·x + b) + b₂`.
    TwoLayer,
    /// `ReLU(W·x + b)` with `W` square.
    SingleAffine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_tokens: usize,
    pub dim: usize,
    pub layers: usize,
    pub ffn_width: usize,
    pub classes: usize,
    /// Head count for the standalone multi-head blocks.
    pub heads: usize,
    pub mesh_depth: usize,
    pub attention: AttentionKind,
    pub ffn: FfnKind,
    pub positional_encoding: bool,
    /// Half-width of the uniform mesh-angle initialization.
    pub mesh_init_spread: f64,
    pub kernel: KernelConfig,
}

impl ModelConfig {
    pub fn new(num_tokens: usize, dim: usize, classes: usize) -> Self {
        Self {
            num_tokens,
            dim,
            layers: 1,
            ffn_width: 4 * dim,
            classes,
            heads: 2,
            mesh_depth: dim,
            attention: AttentionKind::Photonic,
            ffn: FfnKind::TwoLayer,
            positional_encoding: true,
            mesh_init_spread: 0.1,
            kernel: KernelConfig::new(dim),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_tokens", self.num_tokens),
            ("dim", self.dim),
            ("layers", self.layers),
            ("ffn_width", self.ffn_width),
            ("classes", self.classes),
            ("heads", self.heads),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.dim < 2 {
            return Err(Error::Config("layer norm needs dim >= 2".into()));
        }
        if self.positional_encoding && !self.dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "positional encoding needs an even dim, got {}",
                self.dim
            )));
        }
        if self.kernel.num_modes != self.dim {
            return Err(Error::Config(format!(
                "kernel has {} modes but the model dim is {}",
                self.kernel.num_modes, self.dim
            )));
        }
        if !(self.mesh_init_spread >= 0.0 && self.mesh_init_spread.is_finite()) {
            return Err(Error::Config(
                "mesh_init_spread must be a finite non-negative number".into(),
            ));
        }
        self.kernel.validate().map_err(|e| Error::Config(e.to_string()))
    }

    fn ffn_widths(&self) -> (usize, Option<usize>) {
        match self.ffn {
            FfnKind::TwoLayer => (self.ffn_width, Some(self.dim)),
            FfnKind::SingleAffine => (self.dim, None),
        }
    }
}

/// Encoder layers, mean pooling and a linear head.
///
/// Parameter names: `layer{l}.mesh` (angles), `layer{l}.log_weight`,
/// `layer{l}.gamma_factor`, `layer{l}.w_v`, `layer{l}.ln{1,2}.{gain,bias}`,
/// `layer{l}.ffn.{w1,b1,w2,b2}`, `head.{w,b}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    mesh_templates: Vec<MeshParams>,
}

/// Parameter leaves of a [`Model`] on one tape.
#[derive(Debug, Clone)]
pub struct BoundModel {
    pub params: Vec<Var>,
    gammas: Vec<Option<Var>>,
    meshes: Vec<MeshParams>,
    positional: Option<RealTensor>,
}

impl Model {
    pub fn init(config: ModelConfig, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let mut params = ParamStore::new();
        let mut mesh_templates = Vec::new();
        for l in 0..config.layers {
            let p = |name: &str| format!("layer{l}.{name}");
            match config.attention {
                AttentionKind::Photonic => {
                    let mesh = MeshParams::random(d, config.mesh_depth, config.mesh_init_spread, rng)?;
                    params.insert(p("mesh"), RealTensor::vector(mesh.angles()))?;
                    if config.kernel.score_mode == ScoreMode::ScalarWeighted {
                        params.insert(p("log_weight"), RealTensor::vector(vec![0.0]))?;
                    }
                    mesh_templates.push(MeshParams::rectangular(d, config.mesh_depth)?);
                }
                AttentionKind::Classical => {
                    params.insert(p("gamma_factor"), RealTensor::identity(d))?;
                }
            }
            params.insert(p("w_v"), uniform_init(&[d, d], d, rng))?;
            params.insert(p("ln1.gain"), RealTensor::filled(&[d], 1.0))?;
            params.insert(p("ln1.bias"), RealTensor::zeros(&[d]))?;
            let (hidden, out) = config.ffn_widths();
            params.insert(p("ffn.w1"), uniform_init(&[d, hidden], d, rng))?;
            params.insert(p("ffn.b1"), uniform_init(&[hidden], d, rng))?;
            if let Some(out) = out {
                params.insert(p("ffn.w2"), uniform_init(&[hidden, out], hidden, rng))?;
                params.insert(p("ffn.b2"), uniform_init(&[out], hidden, rng))?;
            }
            params.insert(p("ln2.gain"), RealTensor::filled(&[d], 1.0))?;
            params.insert(p("ln2.bias"), RealTensor::zeros(&[d]))?;
        }
        params.insert("head.w", uniform_init(&[d, config.classes], d, rng))?;
        params.insert("head.b", uniform_init(&[config.classes], d, rng))?;
        Ok(Self {
            config,
            params,
            mesh_templates,
        })
    }

    /// Rebuilds a model from parameter tensors; names and shapes must match
    /// what [`Model::init`] would create.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let reference = Self::init(config.clone(), &mut SeededRng::new(0))?;
        if reference.params.len() != params.len() {
            return Err(Error::Validation(format!(
                "expected {} parameter tensors, got {}",
                reference.params.len(),
                params.len()
            )));
        }
        for (name, t) in reference.params.iter() {
            let got = params
                .get(name)
                .ok_or_else(|| Error::Validation(format!("missing parameter {name}")))?;
            if got.shape() != t.shape() {
                return Err(Error::Validation(format!(
                    "parameter {name}: expected shape {:?}, got {:?}",
                    t.shape(),
                    got.shape()
                )));
            }
        }
        // keep the reference order
        let mut ordered = ParamStore::new();
        for (name, _) in reference.params.iter() {
            ordered.insert(name, params.require(name)?.clone())?;
        }
        Ok(Self {
            config,
            params: ordered,
            mesh_templates: reference.mesh_templates,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Mesh of layer `l` with its current angles (photonic attention only).
    pub fn mesh(&self, l: usize) -> Result<MeshParams> {
        let template = self
            .mesh_templates
            .get(l)
            .ok_or_else(|| Error::Validation(format!("layer {l} has no photonic mesh")))?;
        let mut mesh = template.clone();
        mesh.set_angles(self.params.require(&format!("layer{l}.mesh"))?.data())?;
        Ok(mesh)
    }

    /// Attention covariance of layer `l`: Γ_eff for the photonic kernel
    /// (identity in scalar-weighted mode), MᵀM for the classical one.
    pub fn gamma(&self, l: usize) -> Result<RealTensor> {
        match self.config.attention {
            AttentionKind::Photonic => match self.config.kernel.score_mode {
                ScoreMode::GammaForm => kernel::gamma_of_mesh(&self.mesh(l)?, &self.config.kernel.detected),
                ScoreMode::ScalarWeighted => Ok(RealTensor::identity(self.config.dim)),
            },
            AttentionKind::Classical => {
                let m = self.params.require(&format!("layer{l}.gamma_factor"))?;
                matmul(&m.transpose(), m)
            }
        }
    }

    /// Smallest eigenvalue over all layers' Γ.
    pub fn min_gamma_eigenvalue(&self) -> Result<f64> {
        let mut min = f64::INFINITY;
        for l in 0..self.config.layers {
            let g = self.gamma(l)?;
            min = min.min(eigh_symmetric(&g)?.values[0]);
        }
        Ok(min)
    }

    /// Puts every parameter on `tape` as a leaf, in store order.
    pub fn bind(&self, tape: &mut Tape) -> Result<BoundModel> {
        let params: Vec<Var> = self.params.tensors().map(|t| tape.leaf(t.clone())).collect();
        let mut gammas = Vec::new();
        let mut meshes = Vec::new();
        for l in 0..self.config.layers {
            let var = |name: &str| self.var_of(&params, &format!("layer{l}.{name}"));
            let gamma = match self.config.attention {
                AttentionKind::Photonic => {
                    meshes.push(self.mesh(l)?);
                    match self.config.kernel.score_mode {
                        ScoreMode::GammaForm => Some(tape.mesh_gamma(
                            var("mesh")?,
                            &self.mesh_templates[l],
                            &self.config.kernel.detected,
                        )?),
                        ScoreMode::ScalarWeighted => None,
                    }
                }
                AttentionKind::Classical => {
                    let m = var("gamma_factor")?;
                    let mt = tape.transpose(m);
                    Some(tape.matmul(mt, m)?)
                }
            };
            gammas.push(gamma);
        }
        let positional = if self.config.positional_encoding {
            Some(positional_encoding(self.config.num_tokens, self.config.dim)?)
        } else {
            None
        };
        Ok(BoundModel {
            params,
            gammas,
            meshes,
            positional,
        })
    }

    fn var_of(&self, params: &[Var], name: &str) -> Result<Var> {
        self.params
            .index_of(name)
            .map(|i| params[i])
            .ok_or_else(|| Error::Internal(format!("missing parameter {name}")))
    }

    /// Records one sample's forward pass and returns the `1 × classes`
    /// logits node. `backend` overrides the kernel backend; `rng` feeds
    /// the shot backend.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &BoundModel,
        tokens: &RealTensor,
        backend: Backend,
        rng: Option<&SeededRng>,
    ) -> Result<Var> {
        let cfg = &self.config;
        check_tokens(tokens, cfg.dim, "encoder input")?;
        if tokens.rows() != cfg.num_tokens {
            return Err(Error::Shape(format!(
                "encoder expects {} tokens, got {}",
                cfg.num_tokens,
                tokens.rows()
            )));
        }
        let input = match &bound.positional {
            Some(pe) => tokens.add(pe)?,
            None => tokens.clone(),
        };
        let mut x = tape.leaf(input);
        let mut kcfg = cfg.kernel.clone();
        kcfg.backend = backend;
        for l in 0..cfg.layers {
            let var = |name: &str| self.var_of(&bound.params, &format!("layer{l}.{name}"));
            let scores = match cfg.attention {
                AttentionKind::Photonic => {
                    let log_weight = match kcfg.score_mode {
                        ScoreMode::ScalarWeighted => Some(var("log_weight")?),
                        ScoreMode::GammaForm => None,
                    };
                    let layer_rng = rng.map(|r| r.split(&format!("layer/{l}")));
                    tape.photonic_scores(
                        x,
                        &bound.meshes[l],
                        bound.gammas[l],
                        log_weight,
                        &kcfg,
                        layer_rng.as_ref(),
                    )?
                }
                AttentionKind::Classical => {
                    let gamma = bound.gammas[l].ok_or_else(|| Error::Internal("missing gamma".into()))?;
                    tape.gaussian_scores(x, gamma, 0.5, kcfg.normalize_rows)?
                }
            };
            let values = tape.matmul(x, var("w_v")?)?;
            let o1 = tape.matmul(scores, values)?;
            let s1 = tape.add(x, o1)?;
            let o2 = tape.layer_norm(s1, var("ln1.gain")?, var("ln1.bias")?)?;
            let h = tape.matmul(o2, var("ffn.w1")?)?;
            let h = tape.add_row(h, var("ffn.b1")?)?;
            let h = tape.relu(h);
            let o3 = match cfg.ffn {
                FfnKind::TwoLayer => {
                    let o = tape.matmul(h, var("ffn.w2")?)?;
                    tape.add_row(o, var("ffn.b2")?)?
                }
                FfnKind::SingleAffine => h,
            };
            let s2 = tape.add(o2, o3)?;
            x = tape.layer_norm(s2, var("ln2.gain")?, var("ln2.bias")?)?;
        }
        let pooled = tape.mean_rows(x)?;
        let logits = tape.matmul(pooled, self.var_of(&bound.params, "head.w")?)?;
        tape.add_row(logits, self.var_of(&bound.params, "head.b")?)
    }

    /// Class logits for one token sequence.
    pub fn logits(&self, tokens: &RealTensor, backend: Backend, rng: Option<&SeededRng>) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape)?;
        let out = self.forward(&mut tape, &bound, tokens, backend, rng)?;
        Ok(tape.value(out).data().to_vec())
    }

    /// Named tensors for a checkpoint; meshes are stored as
    /// `(layer, first mode, θ, φ)` rows.
    pub fn to_records(&self) -> Result<Vec<(String, RealTensor)>> {
        let mut out = Vec::with_capacity(self.params.len());
        for (name, t) in self.params.iter() {
            match name.strip_suffix(".mesh").and_then(|p| p.strip_prefix("layer")) {
                Some(l) => {
                    let l: usize = l
                        .parse()
                        .map_err(|_| Error::Internal(format!("bad mesh name {name}")))?;
                    out.push((name.to_string(), self.mesh(l)?.to_records()));
                }
                None => out.push((name.to_string(), t.clone())),
            }
        }
        Ok(out)
    }

    /// Inverse of [`Model::to_records`].
    pub fn from_records(config: ModelConfig, records: Vec<(String, RealTensor)>) -> Result<Self> {
        let mut params = ParamStore::new();
        for (name, t) in records {
            let value = match name.strip_suffix(".mesh").and_then(|p| p.strip_prefix("layer")) {
                Some(_) => {
                    let mesh = MeshParams::from_records(config.dim, config.mesh_depth, &t)?;
                    RealTensor::vector(mesh.angles())
                }
                None => t,
            };
            params.insert(name, value)?;
        }
        Self::from_params(config, params)
    }
}

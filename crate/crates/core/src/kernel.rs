//! Photonic Gaussian-kernel attention scores.
//!
//! Circuit per token pair `(X_i, X_j)` over `d` qumodes:
//!
//! 1. start in vacuum;
//! 2. load `D(s·X_i)` then `D†(s·X_j)`, which leaves the coherent state
//!    `|s·(X_i − X_j)⟩` up to a global phase;
//! 3. pass through a layered beamsplitter mesh with single-excitation
//!    unitary `U`;
//! 4. detect vacuum on the subset `S` of modes.
//!
//! The vacuum probability is `exp(−s²·zᵀΓz)` with `z = X_i − X_j` and
//! `Γ = Re(W_S†W_S)`, `W_S` the rows of `U` indexed by `S`. With the default
//! loading scale `s = 1/√2` this is the Gaussian kernel `exp(−½ zᵀΓz)`, and
//! the mesh trains `Γ`. Detecting on *all* modes gives `Γ = I` for every
//! mesh, which is why the default detects a strict subset.

use serde::{Deserialize, Serialize};

use crate::coherent::{self, CoherentState};
use crate::error::{Error, Result};
use crate::fock;
use crate::numerics::{Complex64, ComplexMatrix, RealTensor, SeededRng};

/// One beamsplitter: modes `(k, k+1)` with angle θ and phase φ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Beamsplitter {
    pub modes: (usize, usize),
    pub theta: f64,
    pub phi: f64,
}

/// Layered beamsplitter mesh. Layer 0 is applied first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeshParams {
    num_modes: usize,
    layers: Vec<Vec<Beamsplitter>>,
}

impl MeshParams {
    /// Rectangular mesh of `depth` layers with all angles zero. Even layers
    /// couple (0,1),(2,3),…; odd layers couple (1,2),(3,4),….
    pub fn rectangular(num_modes: usize, depth: usize) -> Result<Self> {
        if num_modes == 0 {
            return Err(Error::Validation("mesh needs at least one mode".into()));
        }
        let layers = (0..depth)
            .map(|layer| {
                (layer % 2..num_modes.saturating_sub(1))
                    .step_by(2)
                    .map(|k| Beamsplitter {
                        modes: (k, k + 1),
                        theta: 0.0,
                        phi: 0.0,
                    })
                    .collect()
            })
            .collect();
        Ok(Self { num_modes, layers })
    }

    /// Rectangular mesh with θ, φ drawn uniformly from `[−spread, spread]`.
    pub fn random(num_modes: usize, depth: usize, spread: f64, rng: &mut SeededRng) -> Result<Self> {
        let mut mesh = Self::rectangular(num_modes, depth)?;
        for bs in mesh.layers.iter_mut().flatten() {
            bs.theta = rng.uniform(-spread, spread);
            bs.phi = rng.uniform(-spread, spread);
        }
        Ok(mesh)
    }

    pub fn from_layers(num_modes: usize, layers: Vec<Vec<Beamsplitter>>) -> Result<Self> {
        let mesh = Self { num_modes, layers };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn validate(&self) -> Result<()> {
        for (l, layer) in self.layers.iter().enumerate() {
            let mut used = vec![false; self.num_modes];
            for bs in layer {
                let (a, b) = bs.modes;
                if a == b || a >= self.num_modes || b >= self.num_modes {
                    return Err(Error::Validation(format!(
                        "layer {l}: invalid mode pair ({a},{b}) for {} modes",
                        self.num_modes
                    )));
                }
                if used[a] || used[b] {
                    return Err(Error::Validation(format!(
                        "layer {l}: pair ({a},{b}) overlaps another pair"
                    )));
                }
                used[a] = true;
                used[b] = true;
                if !bs.theta.is_finite() || !bs.phi.is_finite() {
                    return Err(Error::Validation(format!("layer {l}: non-finite angle")));
                }
            }
        }
        Ok(())
    }

    pub fn num_modes(&self) -> usize {
        self.num_modes
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[Vec<Beamsplitter>] {
        &self.layers
    }

    pub fn num_beamsplitters(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }

    /// Flat `[θ₀, φ₀, θ₁, φ₁, …]` in layer order.
    pub fn angles(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flatten()
            .flat_map(|bs| [bs.theta, bs.phi])
            .collect()
    }

    pub fn set_angles(&mut self, angles: &[f64]) -> Result<()> {
        if angles.len() != 2 * self.num_beamsplitters() {
            return Err(Error::Shape(format!(
                "mesh has {} beamsplitters, got {} angles",
                self.num_beamsplitters(),
                angles.len()
            )));
        }
        for (bs, pair) in self.layers.iter_mut().flatten().zip(angles.chunks(2)) {
            bs.theta = pair[0];
            bs.phi = pair[1];
        }
        Ok(())
    }

    /// `(layer, first mode, θ, φ)` rows, one per beamsplitter.
    pub fn to_records(&self) -> RealTensor {
        let mut data = Vec::with_capacity(4 * self.num_beamsplitters());
        for (l, layer) in self.layers.iter().enumerate() {
            for bs in layer {
                data.extend([l as f64, bs.modes.0 as f64, bs.theta, bs.phi]);
            }
        }
        RealTensor::from_raw(self.num_beamsplitters(), 4, data)
    }

    /// Inverse of [`MeshParams::to_records`]; each pair couples `(k, k+1)`.
    pub fn from_records(num_modes: usize, depth: usize, records: &RealTensor) -> Result<Self> {
        if !records.is_matrix() || records.cols() != 4 {
            return Err(Error::Shape(format!(
                "mesh records must be n x 4, got {:?}",
                records.shape()
            )));
        }
        let mut layers = vec![Vec::new(); depth];
        for r in 0..records.rows() {
            let row = records.row(r);
            let (l, k) = (row[0], row[1]);
            if l < 0.0 || l.fract() != 0.0 || k < 0.0 || k.fract() != 0.0 || l as usize >= depth {
                return Err(Error::Validation(format!("bad mesh record {row:?}")));
            }
            let k = k as usize;
            layers[l as usize].push(Beamsplitter {
                modes: (k, k + 1),
                theta: row[2],
                phi: row[3],
            });
        }
        Self::from_layers(num_modes, layers)
    }
}

/// Product of the embedded 2×2 blocks, later layers on the left.
pub fn mesh_unitary(mesh: &MeshParams) -> Result<ComplexMatrix> {
    mesh.validate()?;
    let d = mesh.num_modes;
    let mut u = ComplexMatrix::identity(d);
    for layer in &mesh.layers {
        for bs in layer {
            left_multiply_block(&mut u, bs.modes, &coherent::mesh_matrix(bs.theta, bs.phi));
        }
    }
    Ok(u)
}

/// `m ← B·m` for a 2×2 block `b` embedded at rows `(p, q)`.
fn left_multiply_block(m: &mut ComplexMatrix, (p, q): (usize, usize), b: &[[Complex64; 2]; 2]) {
    for c in 0..m.cols() {
        let (x, y) = (m.get(p, c), m.get(q, c));
        m.set(p, c, b[0][0] * x + b[0][1] * y);
        m.set(q, c, b[1][0] * x + b[1][1] * y);
    }
}

fn check_subset(d: usize, detected: &[usize]) -> Result<()> {
    if detected.is_empty() {
        return Err(Error::Validation("empty detection subset".into()));
    }
    if let Some(&k) = detected.iter().find(|&&k| k >= d) {
        return Err(Error::Validation(format!(
            "detected mode {k} out of range for {d} modes"
        )));
    }
    Ok(())
}

/// Γ = Re(W_S†W_S) from a precomputed mesh unitary.
pub fn gamma_from_unitary(u: &ComplexMatrix, detected: &[usize]) -> Result<RealTensor> {
    let d = u.rows();
    check_subset(d, detected)?;
    let mut g = RealTensor::zeros(&[d, d]);
    for a in 0..d {
        for b in a..d {
            let v: f64 = detected
                .iter()
                .map(|&k| (u.get(k, a).conj() * u.get(k, b)).re)
                .sum();
            g.set(a, b, v);
            g.set(b, a, v);
        }
    }
    Ok(g)
}

/// Effective kernel covariance Γ = Re(W_S†W_S).
pub fn gamma_of_mesh(mesh: &MeshParams, detected: &[usize]) -> Result<RealTensor> {
    gamma_from_unitary(&mesh_unitary(mesh)?, detected)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreMode {
    /// Vacuum detection on a subset `S`: score = exp(−s² zᵀΓz).
    GammaForm,
    /// score = w·exp(−s²‖z‖²), detection on all modes, `w` a positive scalar.
    ScalarWeighted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backend {
    Exact,
    Shots,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub num_modes: usize,
    pub detected: Vec<usize>,
    pub loading_scale: f64,
    pub normalize_rows: bool,
    pub score_mode: ScoreMode,
    pub backend: Backend,
    pub shots: usize,
    /// Weight `w` for [`ScoreMode::ScalarWeighted`].
    pub scalar_weight: f64,
}

impl KernelConfig {
    /// Defaults: detect the first ⌈d/2⌉ modes, s = 1/√2, normalized rows,
    /// gamma form, exact backend, 16 shots.
    pub fn new(num_modes: usize) -> Self {
        Self {
            num_modes,
            detected: (0..num_modes.div_ceil(2)).collect(),
            loading_scale: std::f64::consts::FRAC_1_SQRT_2,
            normalize_rows: true,
            score_mode: ScoreMode::GammaForm,
            backend: Backend::Exact,
            shots: 16,
            scalar_weight: 1.0,
        }
    }

    pub fn all_modes(mut self) -> Self {
        self.detected = (0..self.num_modes).collect();
        self
    }

    pub fn validate(&self) -> Result<()> {
        check_subset(self.num_modes, &self.detected)?;
        if !(self.loading_scale > 0.0 && self.loading_scale.is_finite()) {
            return Err(Error::Validation(format!(
                "loading scale must be positive, got {}",
                self.loading_scale
            )));
        }
        if self.backend == Backend::Shots && self.shots == 0 {
            return Err(Error::Validation("shot backend needs at least one shot".into()));
        }
        if !(self.scalar_weight > 0.0 && self.scalar_weight.is_finite()) {
            return Err(Error::Validation("scalar weight must be positive".into()));
        }
        Ok(())
    }

    /// Modes whose detectors take part in the vacuum event.
    pub fn effective_detected(&self) -> Vec<usize> {
        match self.score_mode {
            ScoreMode::GammaForm => self.detected.clone(),
            ScoreMode::ScalarWeighted => (0..self.num_modes).collect(),
        }
    }

    /// `c` in score = w·exp(−c·zᵀΓz).
    pub(crate) fn coefficient(&self) -> f64 {
        self.loading_scale * self.loading_scale
    }

    pub(crate) fn weight(&self) -> f64 {
        match self.score_mode {
            ScoreMode::GammaForm => 1.0,
            ScoreMode::ScalarWeighted => self.scalar_weight,
        }
    }
}

/// Mesh unitary plus the pieces every pair evaluation needs.
struct PreparedCircuit {
    unitary: ComplexMatrix,
    detected: Vec<usize>,
    scale: f64,
    weight: f64,
}

impl PreparedCircuit {
    fn new(mesh: &MeshParams, cfg: &KernelConfig) -> Result<Self> {
        cfg.validate()?;
        if mesh.num_modes() != cfg.num_modes {
            return Err(Error::Shape(format!(
                "mesh has {} modes, kernel config {}",
                mesh.num_modes(),
                cfg.num_modes
            )));
        }
        let unitary = match cfg.score_mode {
            ScoreMode::GammaForm => mesh_unitary(mesh)?,
            // detection on every mode makes the mesh irrelevant
            ScoreMode::ScalarWeighted => ComplexMatrix::identity(cfg.num_modes),
        };
        Ok(Self {
            unitary,
            detected: cfg.effective_detected(),
            scale: cfg.loading_scale,
            weight: cfg.weight(),
        })
    }

    /// Runs the circuit to the coherent state just before detection.
    fn output_state(&self, xi: &[f64], xj: &[f64]) -> Result<CoherentState> {
        let d = self.unitary.rows();
        if xi.len() != d || xj.len() != d {
            return Err(Error::Shape(format!(
                "token lengths {} and {} do not match {d} modes",
                xi.len(),
                xj.len()
            )));
        }
        // D(s·xi)D(−s·xj) = D(s·(xi − xj)) up to a global phase; loading the
        // difference keeps shared shifts exact when xi − xj is exact
        let mut state = coherent::coherent_vacuum(d)?;
        for k in 0..d {
            state = coherent::displace(&state, k, Complex64::new(self.scale * (xi[k] - xj[k]), 0.0))?;
        }
        // the unitary is a product of exact 2x2 rotations; skip the recheck
        CoherentState::from_alphas(self.unitary.apply(state.alphas())?)
    }

    fn exact(&self, xi: &[f64], xj: &[f64]) -> Result<f64> {
        let out = self.output_state(xi, xj)?;
        Ok(self.weight * coherent::vacuum_probability(&out, &self.detected)?)
    }

    fn shots(&self, xi: &[f64], xj: &[f64], shots: usize, rng: &mut SeededRng) -> Result<f64> {
        let out = self.output_state(xi, xj)?;
        let draws = coherent::sample_counts(&out, rng, shots);
        let hits = draws
            .iter()
            .filter(|counts| self.detected.iter().all(|&k| counts[k] == 0))
            .count();
        Ok(self.weight * hits as f64 / shots as f64)
    }
}

/// Exact PGKSAS(i, j) via the coherent-state circuit.
pub fn pgksas_exact(xi: &[f64], xj: &[f64], mesh: &MeshParams, cfg: &KernelConfig) -> Result<f64> {
    PreparedCircuit::new(mesh, cfg)?.exact(xi, xj)
}

/// Shot estimate of PGKSAS(i, j): fraction of `cfg.shots` runs in which
/// every detected mode reports zero photons.
pub fn pgksas_shots(
    xi: &[f64],
    xj: &[f64],
    mesh: &MeshParams,
    cfg: &KernelConfig,
    rng: &mut SeededRng,
) -> Result<f64> {
    if cfg.shots == 0 {
        return Err(Error::Validation("shot estimate needs at least one shot".into()));
    }
    PreparedCircuit::new(mesh, cfg)?.shots(xi, xj, cfg.shots, rng)
}

/// The literal circuit on the truncated Fock backend: D(s·X_i), D(−s·X_j),
/// each beamsplitter as a two-mode gate, then vacuum projection on `S`.
pub fn pgksas_fock(
    xi: &[f64],
    xj: &[f64],
    mesh: &MeshParams,
    cfg: &KernelConfig,
    cutoff: usize,
) -> Result<f64> {
    cfg.validate()?;
    let d = mesh.num_modes();
    if xi.len() != d || xj.len() != d {
        return Err(Error::Shape("token length does not match mode count".into()));
    }
    let mut state = fock::vacuum_state(d, cutoff)?;
    for k in 0..d {
        let gate = fock::displacement_matrix(Complex64::new(cfg.loading_scale * xi[k], 0.0), cutoff)?;
        state = fock::apply_single_mode(&gate, k, &state)?;
    }
    for k in 0..d {
        let gate = fock::displacement_matrix(Complex64::new(-cfg.loading_scale * xj[k], 0.0), cutoff)?;
        state = fock::apply_single_mode(&gate, k, &state)?;
    }
    if cfg.score_mode == ScoreMode::GammaForm {
        for bs in mesh.layers().iter().flatten() {
            let gate = fock::beamsplitter_matrix(bs.theta, bs.phi, cutoff)?;
            state = fock::apply_two_mode(&gate, bs.modes, &state)?;
        }
    }
    Ok(cfg.weight() * fock::subset_vacuum_probability(&state, &cfg.effective_detected())?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Exact,
    ShotEstimated,
}

#[derive(Debug, Clone)]
pub struct ScoreMatrix {
    /// n×n; row-normalized when the config asks for it.
    pub scores: RealTensor,
    pub provenance: Provenance,
    pub normalized: bool,
    /// Rows whose shot estimates were all zero and fell back to uniform.
    pub degenerate_rows: Vec<usize>,
}

/// Scores for every token pair, optionally row-normalized.
///
/// Shot mode needs `rng`; each pair draws from its own substream
/// `pair/{i}/{j}`, so results do not depend on evaluation order.
pub fn score_matrix(
    tokens: &RealTensor,
    mesh: &MeshParams,
    cfg: &KernelConfig,
    rng: Option<&SeededRng>,
) -> Result<ScoreMatrix> {
    let circuit = PreparedCircuit::new(mesh, cfg)?;
    if !tokens.is_matrix() || tokens.cols() != cfg.num_modes {
        return Err(Error::Shape(format!(
            "tokens must be n x {}, got {:?}",
            cfg.num_modes,
            tokens.shape()
        )));
    }
    let n = tokens.rows();
    if n == 0 {
        return Err(Error::Validation("score matrix needs at least one token".into()));
    }
    let mut raw = RealTensor::zeros(&[n, n]);
    let provenance = match cfg.backend {
        Backend::Exact => {
            for i in 0..n {
                for j in 0..n {
                    raw.set(i, j, circuit.exact(tokens.row(i), tokens.row(j))?);
                }
            }
            Provenance::Exact
        }
        Backend::Shots => {
            let root = rng.ok_or_else(|| Error::Validation("shot backend needs a random stream".into()))?;
            for i in 0..n {
                for j in 0..n {
                    let mut pair_rng = root.split(&format!("pair/{i}/{j}"));
                    let v = circuit.shots(tokens.row(i), tokens.row(j), cfg.shots, &mut pair_rng)?;
                    raw.set(i, j, v);
                }
            }
            Provenance::ShotEstimated
        }
    };

    let degenerate_rows = if cfg.normalize_rows {
        normalize_rows(&mut raw)
    } else {
        Vec::new()
    };
    Ok(ScoreMatrix {
        scores: raw,
        provenance,
        normalized: cfg.normalize_rows,
        degenerate_rows,
    })
}

/// Divides each row by its sum. All-zero rows become uniform; their
/// indices are returned.
fn normalize_rows(m: &mut RealTensor) -> Vec<usize> {
    let n = m.cols();
    let mut degenerate = Vec::new();
    for i in 0..m.rows() {
        let row = m.row_mut(i);
        let z: f64 = row.iter().sum();
        if z > 0.0 {
            row.iter_mut().for_each(|v| *v /= z);
        } else {
            log::warn!("score row {i} is all zero; using a uniform row");
            row.iter_mut().for_each(|v| *v = 1.0 / n as f64);
            degenerate.push(i);
        }
    }
    degenerate
}

/// Gradient of Σ_ab G_ab Γ_ab with respect to the mesh angles, where
/// Γ = Re(W_S†W_S). Returned as `[∂θ₀, ∂φ₀, ∂θ₁, …]` in layer order.
pub fn mesh_backward(mesh: &MeshParams, detected: &[usize], upstream: &RealTensor) -> Result<Vec<f64>> {
    mesh.validate()?;
    let d = mesh.num_modes();
    check_subset(d, detected)?;
    if upstream.shape() != [d, d] {
        return Err(Error::Shape(format!(
            "upstream gradient must be {d}x{d}, got {:?}",
            upstream.shape()
        )));
    }
    // dL = 2 Re tr(H† dU), H = P_S U Gs with Gs the symmetric part of G
    let u = mesh_unitary(mesh)?;
    let mut h = ComplexMatrix::zeros(d, d);
    for &k in detected {
        for b in 0..d {
            let mut acc = Complex64::new(0.0, 0.0);
            for a in 0..d {
                let gs = 0.5 * (upstream.get(a, b) + upstream.get(b, a));
                acc += u.get(k, a) * gs;
            }
            h.set(k, b, acc);
        }
    }

    // prefix products: right[l] = B_{l-1} ⋯ B_0
    let blocks: Vec<Vec<(Beamsplitter, [[Complex64; 2]; 2])>> = mesh
        .layers()
        .iter()
        .map(|layer| {
            layer
                .iter()
                .map(|bs| (*bs, coherent::mesh_matrix(bs.theta, bs.phi)))
                .collect()
        })
        .collect();
    let mut right = Vec::with_capacity(blocks.len());
    let mut acc = ComplexMatrix::identity(d);
    for layer in &blocks {
        right.push(acc.clone());
        for (bs, m) in layer {
            left_multiply_block(&mut acc, bs.modes, m);
        }
    }

    let mut grads = vec![0.0; 2 * mesh.num_beamsplitters()];
    let offsets: Vec<usize> = mesh
        .layers()
        .iter()
        .scan(0, |acc, layer| {
            let start = *acc;
            *acc += layer.len();
            Some(start)
        })
        .collect();
    // m = (B_L ⋯ B_{l+1})† H, walked from the last layer down
    let mut m = h;
    for l in (0..blocks.len()).rev() {
        let rgt = &right[l];
        for (idx, (bs, _)) in blocks[l].iter().enumerate() {
            let (p, q) = bs.modes;
            // K = m · rgt†, only the four entries on the block are needed
            let k_entry = |a: usize, b: usize| -> Complex64 {
                (0..d).map(|c| m.get(a, c) * rgt.get(b, c).conj()).sum()
            };
            let k = [[k_entry(p, p), k_entry(p, q)], [k_entry(q, p), k_entry(q, q)]];
            let (s, c) = bs.theta.sin_cos();
            let e_pos = Complex64::from_polar(1.0, bs.phi);
            let e_neg = Complex64::from_polar(1.0, -bs.phi);
            let i = Complex64::new(0.0, 1.0);
            let d_theta = [
                [Complex64::new(-s, 0.0), -e_neg * c],
                [e_pos * c, Complex64::new(-s, 0.0)],
            ];
            let d_phi = [
                [Complex64::new(0.0, 0.0), i * e_neg * s],
                [i * e_pos * s, Complex64::new(0.0, 0.0)],
            ];
            let contract = |db: &[[Complex64; 2]; 2]| -> f64 {
                let mut total = 0.0;
                for a in 0..2 {
                    for b in 0..2 {
                        total += (k[a][b].conj() * db[a][b]).re;
                    }
                }
                2.0 * total
            };
            let slot = 2 * (offsets[l] + idx);
            grads[slot] = contract(&d_theta);
            grads[slot + 1] = contract(&d_phi);
        }
        // m ← B_l† m
        for (bs, b) in &blocks[l] {
            let adj = [[b[0][0].conj(), b[1][0].conj()], [b[0][1].conj(), b[1][1].conj()]];
            left_multiply_block(&mut m, bs.modes, &adj);
        }
    }
    Ok(grads)
}

/// Gradients of one exact score.
#[derive(Debug, Clone, PartialEq)]
pub struct PairGradient {
    /// `[∂θ₀, ∂φ₀, …]` in layer order.
    pub mesh: Vec<f64>,
    pub xi: Vec<f64>,
    pub xj: Vec<f64>,
    /// ∂score/∂log w; zero in gamma form.
    pub log_weight: f64,
}

/// Analytic gradient of [`pgksas_exact`] with respect to the mesh angles
/// and both tokens. Only the exact backend has a gradient.
pub fn grad_pgksas(xi: &[f64], xj: &[f64], mesh: &MeshParams, cfg: &KernelConfig) -> Result<PairGradient> {
    if cfg.backend != Backend::Exact {
        return Err(Error::Unsupported(
            "gradients are defined for the exact backend only".into(),
        ));
    }
    let circuit = PreparedCircuit::new(mesh, cfg)?;
    let score = circuit.exact(xi, xj)?;
    let c = cfg.coefficient();
    let d = cfg.num_modes;
    let z: Vec<f64> = xi.iter().zip(xj).map(|(a, b)| a - b).collect();
    let (gz, mesh_grad, log_weight) = match cfg.score_mode {
        ScoreMode::GammaForm => {
            let gamma = gamma_from_unitary(&circuit.unitary, &circuit.detected)?;
            let gz: Vec<f64> = (0..d)
                .map(|a| (0..d).map(|b| gamma.get(a, b) * z[b]).sum())
                .collect();
            let mut outer = RealTensor::zeros(&[d, d]);
            for a in 0..d {
                for b in 0..d {
                    outer.set(a, b, -c * score * z[a] * z[b]);
                }
            }
            (gz, mesh_backward(mesh, &circuit.detected, &outer)?, 0.0)
        }
        ScoreMode::ScalarWeighted => (z.clone(), vec![0.0; 2 * mesh.num_beamsplitters()], score),
    };
    let dxi: Vec<f64> = gz.iter().map(|v| -2.0 * c * score * v).collect();
    let dxj: Vec<f64> = dxi.iter().map(|v| -v).collect();
    Ok(PairGradient {
        mesh: mesh_grad,
        xi: dxi,
        xj: dxj,
        log_weight,
    })
}

/// Gradients of a scalar loss through [`score_matrix`], evaluated at the
/// exact scores.
#[derive(Debug, Clone)]
pub struct ScoreMatrixGrad {
    pub tokens: RealTensor,
    pub mesh: Vec<f64>,
    pub log_weight: f64,
}

/// Vector-Jacobian product of the (optionally normalized) exact score
/// matrix. `upstream` is ∂L/∂scores for the matrix [`score_matrix`]
/// returns. Shot-mode forwards use this too: their gradient is taken
/// through the exact scores.
pub fn score_matrix_vjp(
    tokens: &RealTensor,
    mesh: &MeshParams,
    cfg: &KernelConfig,
    upstream: &RealTensor,
) -> Result<ScoreMatrixGrad> {
    let mut exact_cfg = cfg.clone();
    exact_cfg.backend = Backend::Exact;
    let circuit = PreparedCircuit::new(mesh, &exact_cfg)?;
    let n = tokens.rows();
    let mut raw = RealTensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            raw.set(i, j, circuit.exact(tokens.row(i), tokens.row(j))?);
        }
    }
    let gamma = match cfg.score_mode {
        ScoreMode::GammaForm => gamma_from_unitary(&circuit.unitary, &circuit.detected)?,
        ScoreMode::ScalarWeighted => RealTensor::identity(cfg.num_modes),
    };
    let parts = gaussian_scores_vjp(
        tokens,
        &raw,
        &gamma,
        cfg.coefficient(),
        cfg.normalize_rows,
        upstream,
    )?;
    Ok(match cfg.score_mode {
        ScoreMode::GammaForm => ScoreMatrixGrad {
            tokens: parts.tokens,
            mesh: mesh_backward(mesh, &circuit.detected, &parts.gamma)?,
            log_weight: 0.0,
        },
        ScoreMode::ScalarWeighted => ScoreMatrixGrad {
            tokens: parts.tokens,
            mesh: vec![0.0; 2 * mesh.num_beamsplitters()],
            log_weight: parts.weight,
        },
    })
}

/// Unnormalized closed-form scores `w·exp(−c·zᵀΓz)` for all token pairs.
pub(crate) fn gaussian_raw(tokens: &RealTensor, gamma: &RealTensor, c: f64, w: f64) -> RealTensor {
    let (n, d) = (tokens.rows(), tokens.cols());
    let mut raw = RealTensor::zeros(&[n, n]);
    let mut z = vec![0.0; d];
    for i in 0..n {
        for j in 0..n {
            for k in 0..d {
                z[k] = tokens.get(i, k) - tokens.get(j, k);
            }
            let q: f64 = (0..d)
                .map(|a| z[a] * (0..d).map(|b| gamma.get(a, b) * z[b]).sum::<f64>())
                .sum();
            raw.set(i, j, w * (-c * q).exp());
        }
    }
    raw
}

pub(crate) struct GaussianVjp {
    pub tokens: RealTensor,
    pub gamma: RealTensor,
    /// Σ ∂L/∂raw · raw, the gradient with respect to a log-weight.
    pub weight: f64,
}

/// Backward pass of `raw = w·exp(−c·zᵀΓz)` followed by optional row
/// normalization. `upstream` is ∂L/∂output.
pub(crate) fn gaussian_scores_vjp(
    tokens: &RealTensor,
    raw: &RealTensor,
    gamma: &RealTensor,
    c: f64,
    normalize: bool,
    upstream: &RealTensor,
) -> Result<GaussianVjp> {
    let (n, d) = (tokens.rows(), tokens.cols());
    if upstream.shape() != [n, n] || raw.shape() != [n, n] || gamma.shape() != [d, d] {
        return Err(Error::Shape(format!(
            "score backward: upstream {:?}, raw {:?}, gamma {:?} for {n} tokens of width {d}",
            upstream.shape(),
            raw.shape(),
            gamma.shape()
        )));
    }
    let mut g_raw = upstream.clone();
    if normalize {
        for i in 0..n {
            let z: f64 = raw.row(i).iter().sum();
            if z <= 0.0 {
                continue;
            }
            let dot: f64 = (0..n).map(|j| upstream.get(i, j) * raw.get(i, j)).sum::<f64>() / z;
            for j in 0..n {
                g_raw.set(i, j, (upstream.get(i, j) - dot) / z);
            }
        }
    }
    let mut d_tokens = RealTensor::zeros(&[n, d]);
    let mut d_gamma = RealTensor::zeros(&[d, d]);
    let mut weight = 0.0;
    let mut z = vec![0.0; d];
    for i in 0..n {
        for j in 0..n {
            let w = g_raw.get(i, j) * raw.get(i, j);
            weight += w;
            if w == 0.0 || i == j {
                continue;
            }
            for k in 0..d {
                z[k] = tokens.get(i, k) - tokens.get(j, k);
            }
            for a in 0..d {
                let gz: f64 = (0..d).map(|b| gamma.get(a, b) * z[b]).sum();
                let v = -2.0 * c * w * gz;
                d_tokens.data_mut()[i * d + a] += v;
                d_tokens.data_mut()[j * d + a] -= v;
                for b in 0..d {
                    d_gamma.data_mut()[a * d + b] -= c * w * z[a] * z[b];
                }
            }
        }
    }
    Ok(GaussianVjp {
        tokens: d_tokens,
        gamma: d_gamma,
        weight,
    })
}

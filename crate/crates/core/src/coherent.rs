//! Coherent-state simulation of displacement + passive-mesh circuits.
//!
//! Displacements and beamsplitters map product coherent states to product
//! coherent states, so a `d`-mode state is just `d` complex amplitudes: a
//! displacement adds to one amplitude and a mesh with single-excitation
//! matrix `U` maps `α ↦ Uα`. Global phases are dropped; every quantity read
//! out here is phase-insensitive.

use crate::error::{Error, Result};
use crate::numerics::{Complex64, ComplexMatrix, SeededRng};

/// Largest Poisson mean drawn in one Knuth product; larger means are split.
const KNUTH_MAX_MEAN: f64 = 30.0;

#[derive(Debug, Clone, PartialEq)]
pub struct CoherentState {
    alphas: Vec<Complex64>,
}

impl CoherentState {
    pub fn from_alphas(alphas: Vec<Complex64>) -> Result<Self> {
        if alphas.is_empty() {
            return Err(Error::Validation("coherent state needs at least one mode".into()));
        }
        if alphas.iter().any(|a| !a.re.is_finite() || !a.im.is_finite()) {
            return Err(Error::Validation("non-finite coherent amplitude".into()));
        }
        Ok(Self { alphas })
    }

    pub fn num_modes(&self) -> usize {
        self.alphas.len()
    }

    pub fn alphas(&self) -> &[Complex64] {
        &self.alphas
    }

    fn check_mode(&self, k: usize) -> Result<()> {
        if k >= self.alphas.len() {
            return Err(Error::Validation(format!(
                "mode {k} out of range for {} modes",
                self.alphas.len()
            )));
        }
        Ok(())
    }
}

pub fn coherent_vacuum(num_modes: usize) -> Result<CoherentState> {
    CoherentState::from_alphas(vec![Complex64::new(0.0, 0.0); num_modes])
}

/// D(α) on mode `k`.
pub fn displace(state: &CoherentState, k: usize, alpha: Complex64) -> Result<CoherentState> {
    state.check_mode(k)?;
    let mut alphas = state.alphas.clone();
    alphas[k] += alpha;
    CoherentState::from_alphas(alphas)
}

/// Single-excitation block of BS(θ,φ) acting on a mode pair:
/// `[[cos θ, −e^{−iφ} sin θ], [e^{iφ} sin θ, cos θ]]`.
pub fn mesh_matrix(theta: f64, phi: f64) -> [[Complex64; 2]; 2] {
    let (s, c) = theta.sin_cos();
    [
        [Complex64::new(c, 0.0), -Complex64::from_polar(s, -phi)],
        [Complex64::from_polar(s, phi), Complex64::new(c, 0.0)],
    ]
}

/// α ← Uα for a unitary `U`.
pub fn apply_mesh(state: &CoherentState, unitary: &ComplexMatrix) -> Result<CoherentState> {
    let d = state.num_modes();
    if unitary.rows() != d || unitary.cols() != d {
        return Err(Error::Shape(format!(
            "mesh is {}x{}, state has {d} modes",
            unitary.rows(),
            unitary.cols()
        )));
    }
    let defect = unitary.unitarity_defect();
    if defect > 1e-10 {
        return Err(Error::Validation(format!(
            "mesh matrix is not unitary (defect {defect:.3e})"
        )));
    }
    CoherentState::from_alphas(unitary.apply(&state.alphas)?)
}

/// Probability that every detector in `modes` reads zero: exp(−Σ|α_k|²).
pub fn vacuum_probability(state: &CoherentState, modes: &[usize]) -> Result<f64> {
    if modes.is_empty() {
        return Err(Error::Validation("empty detection subset".into()));
    }
    let mut total = 0.0;
    for &k in modes {
        state.check_mode(k)?;
        total += state.alphas[k].norm_sqr();
    }
    Ok((-total).exp())
}

/// ⟨n_k⟩ = |α_k|².
pub fn mean_photon(state: &CoherentState, k: usize) -> Result<f64> {
    state.check_mode(k)?;
    Ok(state.alphas[k].norm_sqr())
}

/// Independent Poisson(|α_k|²) photon counts per mode, one vector per shot.
pub fn sample_counts(state: &CoherentState, rng: &mut SeededRng, shots: usize) -> Vec<Vec<u64>> {
    let means: Vec<f64> = state.alphas.iter().map(|a| a.norm_sqr()).collect();
    (0..shots)
        .map(|_| means.iter().map(|&m| poisson(rng, m)).collect())
        .collect()
}

/// Poisson draw; means above 30 are split into a sum of smaller draws.
pub(crate) fn poisson(rng: &mut SeededRng, mean: f64) -> u64 {
    let mut remaining = mean;
    let mut total = 0;
    while remaining > KNUTH_MAX_MEAN {
        total += knuth(rng, KNUTH_MAX_MEAN);
        remaining -= KNUTH_MAX_MEAN;
    }
    total + knuth(rng, remaining)
}

fn knuth(rng: &mut SeededRng, mean: f64) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    let limit = (-mean).exp();
    let mut k = 0;
    let mut p = rng.next_f64();
    while p > limit {
        k += 1;
        p *= rng.next_f64();
    }
    k
}

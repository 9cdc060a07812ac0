//! Truncated Fock-space simulation of `d` qumodes with cutoff `N`.
//!
//! The state holds `(N+1)^d` amplitudes indexed by photon-count tuples in
//! row-major order, mode 0 slowest. Gates are exponentials of *truncated*
//! generators, so they are exactly unitary at every cutoff; truncation error
//! shows up instead as population sitting on the cutoff boundary, which
//! [`FockStateVec::leakage`] reports.
//!
//! This backend is the exactness oracle for [`crate::coherent`]; it is only
//! practical for a handful of modes.

use crate::error::{Error, Result};
use crate::numerics::{expm, Complex64, ComplexMatrix, RealTensor, SeededRng};

/// Default cap on the number of amplitudes a state may hold.
pub const DEFAULT_AMPLITUDE_BUDGET: usize = 1 << 24;

/// Default leakage tolerance for [`photon_distribution`] and [`sample_counts`].
pub const DEFAULT_LEAKAGE_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct FockStateVec {
    num_modes: usize,
    cutoff: usize,
    amplitudes: Vec<Complex64>,
}

impl FockStateVec {
    pub fn num_modes(&self) -> usize {
        self.num_modes
    }

    pub fn cutoff(&self) -> usize {
        self.cutoff
    }

    pub fn amplitudes(&self) -> &[Complex64] {
        &self.amplitudes
    }

    /// Amplitude of the photon-count tuple `counts`.
    pub fn amplitude(&self, counts: &[usize]) -> Complex64 {
        self.amplitudes[self.index_of(counts)]
    }

    pub fn norm_sqr(&self) -> f64 {
        self.amplitudes.iter().map(|z| z.norm_sqr()).sum()
    }

    /// Truncation leakage: the norm deficit plus the population with any
    /// mode sitting at the cutoff. Gates here are exactly unitary, so the
    /// boundary population is the part that carries the information.
    pub fn leakage(&self) -> f64 {
        let deficit = (1.0 - self.norm_sqr()).max(0.0);
        let dim = self.cutoff + 1;
        let mut boundary = 0.0;
        for (idx, z) in self.amplitudes.iter().enumerate() {
            let mut rest = idx;
            let mut on_edge = false;
            for _ in 0..self.num_modes {
                if rest % dim == self.cutoff {
                    on_edge = true;
                    break;
                }
                rest /= dim;
            }
            if on_edge {
                boundary += z.norm_sqr();
            }
        }
        deficit + boundary
    }

    fn dim(&self) -> usize {
        self.cutoff + 1
    }

    fn stride(&self, mode: usize) -> usize {
        self.dim().pow((self.num_modes - 1 - mode) as u32)
    }

    fn index_of(&self, counts: &[usize]) -> usize {
        assert_eq!(counts.len(), self.num_modes);
        counts.iter().fold(0, |acc, &n| {
            assert!(n <= self.cutoff, "count {n} above cutoff {}", self.cutoff);
            acc * self.dim() + n
        })
    }

    /// Photon-count tuple of flat index `idx`.
    pub fn counts_of(&self, idx: usize) -> Vec<usize> {
        counts_of(idx, self.num_modes, self.dim())
    }

    fn check_mode(&self, k: usize) -> Result<()> {
        if k >= self.num_modes {
            return Err(Error::Validation(format!(
                "mode {k} out of range for {} modes",
                self.num_modes
            )));
        }
        Ok(())
    }
}

fn counts_of(mut idx: usize, modes: usize, dim: usize) -> Vec<usize> {
    let mut out = vec![0; modes];
    for slot in out.iter_mut().rev() {
        *slot = idx % dim;
        idx /= dim;
    }
    out
}

/// Vacuum `|0,…,0⟩` under the default amplitude budget.
pub fn vacuum_state(num_modes: usize, cutoff: usize) -> Result<FockStateVec> {
    vacuum_state_with_budget(num_modes, cutoff, DEFAULT_AMPLITUDE_BUDGET)
}

pub fn vacuum_state_with_budget(num_modes: usize, cutoff: usize, budget: usize) -> Result<FockStateVec> {
    if num_modes == 0 || cutoff == 0 {
        return Err(Error::Validation(format!(
            "need at least one mode and cutoff >= 1, got d={num_modes}, N={cutoff}"
        )));
    }
    let entries = (cutoff as u128 + 1).checked_pow(num_modes as u32);
    let entries = match entries {
        Some(e) if e <= budget as u128 => e as usize,
        other => {
            return Err(Error::Capacity {
                entries: other.unwrap_or(u128::MAX),
                budget,
            })
        }
    };
    let mut amplitudes = vec![Complex64::new(0.0, 0.0); entries];
    amplitudes[0] = Complex64::new(1.0, 0.0);
    Ok(FockStateVec {
        num_modes,
        cutoff,
        amplitudes,
    })
}

/// Truncated creation and annihilation matrices.
#[derive(Debug, Clone)]
pub struct LadderOps {
    pub cutoff: usize,
    /// a†|n⟩ = √(n+1)|n+1⟩, with a†|N⟩ = 0.
    pub creation: RealTensor,
    /// a|n⟩ = √n|n−1⟩.
    pub annihilation: RealTensor,
}

impl LadderOps {
    pub fn new(cutoff: usize) -> Self {
        let dim = cutoff + 1;
        let mut creation = RealTensor::zeros(&[dim, dim]);
        for n in 0..cutoff {
            creation.set(n + 1, n, ((n + 1) as f64).sqrt());
        }
        let annihilation = creation.transpose();
        Self {
            cutoff,
            creation,
            annihilation,
        }
    }
}

/// D(α) = exp(α a† − α* a) on the truncated single-mode space.
pub fn displacement_matrix(alpha: Complex64, cutoff: usize) -> Result<ComplexMatrix> {
    if !alpha.re.is_finite() || !alpha.im.is_finite() {
        return Err(Error::Validation(format!("non-finite displacement {alpha}")));
    }
    let dim = cutoff + 1;
    let mut generator = ComplexMatrix::zeros(dim, dim);
    for n in 0..cutoff {
        let s = ((n + 1) as f64).sqrt();
        // ⟨n+1| α a† |n⟩ and ⟨n| −α* a |n+1⟩
        generator.set(n + 1, n, alpha * s);
        generator.set(n, n + 1, -alpha.conj() * s);
    }
    expm(&generator)
}

/// BS(θ,φ) = exp[θ(e^{iφ} a₁a₂† − e^{−iφ} a₁†a₂)] on two truncated modes.
///
/// The two-mode index is `n₁·(N+1) + n₂`. The generator conserves total
/// photon number, so it is exponentiated block by block.
pub fn beamsplitter_matrix(theta: f64, phi: f64, cutoff: usize) -> Result<ComplexMatrix> {
    if !theta.is_finite() || !phi.is_finite() {
        return Err(Error::Validation("non-finite beamsplitter angle".into()));
    }
    let dim = cutoff + 1;
    let mut full = ComplexMatrix::zeros(dim * dim, dim * dim);
    let forward = Complex64::from_polar(theta, phi);
    let backward = Complex64::from_polar(theta, -phi);
    for total in 0..=2 * cutoff {
        let lo = total.saturating_sub(cutoff);
        let hi = total.min(cutoff);
        // basis states (n1, total - n1) for n1 in lo..=hi
        let size = hi - lo + 1;
        let mut block = ComplexMatrix::zeros(size, size);
        for (col, n1) in (lo..=hi).enumerate() {
            let n2 = total - n1;
            // e^{iφ} a₁ a₂†: (n1, n2) → (n1−1, n2+1)
            if n1 > 0 && n2 < cutoff {
                let amp = ((n1 * (n2 + 1)) as f64).sqrt();
                block.set(col - 1, col, forward * amp);
            }
            // −e^{−iφ} a₁† a₂: (n1, n2) → (n1+1, n2−1)
            if n2 > 0 && n1 < cutoff {
                let amp = (((n1 + 1) * n2) as f64).sqrt();
                block.set(col + 1, col, -backward * amp);
            }
        }
        let exp_block = expm(&block)?;
        for (r, m1) in (lo..=hi).enumerate() {
            for (c, n1) in (lo..=hi).enumerate() {
                let row = m1 * dim + (total - m1);
                let col = n1 * dim + (total - n1);
                full.set(row, col, exp_block.get(r, c));
            }
        }
    }
    Ok(full)
}

/// Applies `gate` to mode `k`: (I⊗…⊗gate⊗…⊗I)|ψ⟩.
pub fn apply_single_mode(gate: &ComplexMatrix, k: usize, state: &FockStateVec) -> Result<FockStateVec> {
    state.check_mode(k)?;
    let dim = state.dim();
    if gate.rows() != dim || gate.cols() != dim {
        return Err(Error::Shape(format!(
            "single-mode gate must be {dim}x{dim}, got {}x{}",
            gate.rows(),
            gate.cols()
        )));
    }
    let stride = state.stride(k);
    let block = stride * dim;
    let mut out = vec![Complex64::new(0.0, 0.0); state.amplitudes.len()];
    let mut local = vec![Complex64::new(0.0, 0.0); dim];
    for outer in (0..state.amplitudes.len()).step_by(block) {
        for inner in 0..stride {
            let base = outer + inner;
            for (n, slot) in local.iter_mut().enumerate() {
                *slot = state.amplitudes[base + n * stride];
            }
            for m in 0..dim {
                let mut acc = Complex64::new(0.0, 0.0);
                for n in 0..dim {
                    acc += gate.get(m, n) * local[n];
                }
                out[base + m * stride] = acc;
            }
        }
    }
    Ok(FockStateVec {
        amplitudes: out,
        ..*state
    })
}

/// Applies a two-mode gate to modes `(k, l)`; the gate's row index is
/// `n_k·(N+1) + n_l`.
pub fn apply_two_mode(
    gate: &ComplexMatrix,
    modes: (usize, usize),
    state: &FockStateVec,
) -> Result<FockStateVec> {
    let (k, l) = modes;
    state.check_mode(k)?;
    state.check_mode(l)?;
    if k == l {
        return Err(Error::Validation(format!(
            "two-mode gate needs distinct modes, got ({k},{l})"
        )));
    }
    let dim = state.dim();
    let pair = dim * dim;
    if gate.rows() != pair || gate.cols() != pair {
        return Err(Error::Shape(format!(
            "two-mode gate must be {pair}x{pair}, got {}x{}",
            gate.rows(),
            gate.cols()
        )));
    }
    let (sk, sl) = (state.stride(k), state.stride(l));
    // nonzero structure of the gate, so block-sparse gates stay cheap
    let entries: Vec<(usize, usize, Complex64)> = (0..pair)
        .flat_map(|r| (0..pair).map(move |c| (r, c)))
        .filter_map(|(r, c)| {
            let g = gate.get(r, c);
            (g.norm_sqr() > 0.0).then_some((r, c, g))
        })
        .collect();

    let mut out = vec![Complex64::new(0.0, 0.0); state.amplitudes.len()];
    let mut local = vec![Complex64::new(0.0, 0.0); pair];
    let mut result = vec![Complex64::new(0.0, 0.0); pair];
    for base in 0..state.amplitudes.len() {
        // visit each (k,l)-fiber once, from its element with n_k = n_l = 0
        if (base / sk) % dim != 0 || (base / sl) % dim != 0 {
            continue;
        }
        for nk in 0..dim {
            for nl in 0..dim {
                local[nk * dim + nl] = state.amplitudes[base + nk * sk + nl * sl];
            }
        }
        result.iter_mut().for_each(|z| *z = Complex64::new(0.0, 0.0));
        for &(r, c, g) in &entries {
            result[r] += g * local[c];
        }
        for nk in 0..dim {
            for nl in 0..dim {
                out[base + nk * sk + nl * sl] = result[nk * dim + nl];
            }
        }
    }
    Ok(FockStateVec {
        amplitudes: out,
        ..*state
    })
}

/// |⟨0,…,0|ψ⟩|².
pub fn vacuum_probability(state: &FockStateVec) -> f64 {
    state.amplitudes[0].norm_sqr()
}

/// Probability that every mode in `modes` reads zero photons.
pub fn subset_vacuum_probability(state: &FockStateVec, modes: &[usize]) -> Result<f64> {
    if modes.is_empty() {
        return Err(Error::Validation("empty detection subset".into()));
    }
    for &k in modes {
        state.check_mode(k)?;
    }
    Ok(state
        .amplitudes
        .iter()
        .enumerate()
        .filter(|(idx, _)| {
            modes
                .iter()
                .all(|&k| (idx / state.stride(k)).is_multiple_of(state.dim()))
        })
        .map(|(_, z)| z.norm_sqr())
        .sum())
}

/// ⟨n_k⟩.
pub fn mean_photon(state: &FockStateVec, k: usize) -> Result<f64> {
    state.check_mode(k)?;
    let (stride, dim) = (state.stride(k), state.dim());
    Ok(state
        .amplitudes
        .iter()
        .enumerate()
        .map(|(idx, z)| ((idx / stride) % dim) as f64 * z.norm_sqr())
        .sum())
}

/// Joint photon-count distribution, flattened in the state's index order.
#[derive(Debug, Clone)]
pub struct PhotonDistribution {
    pub num_modes: usize,
    pub cutoff: usize,
    pub probabilities: Vec<f64>,
}

impl PhotonDistribution {
    pub fn counts_of(&self, idx: usize) -> Vec<usize> {
        counts_of(idx, self.num_modes, self.cutoff + 1)
    }

    /// Marginal distribution of mode `k` over 0..=N.
    pub fn marginal(&self, k: usize) -> Vec<f64> {
        let dim = self.cutoff + 1;
        let stride = dim.pow((self.num_modes - 1 - k) as u32);
        let mut out = vec![0.0; dim];
        for (idx, p) in self.probabilities.iter().enumerate() {
            out[(idx / stride) % dim] += p;
        }
        out
    }
}

fn check_leakage(state: &FockStateVec, tolerance: f64) -> Result<()> {
    let leakage = state.leakage();
    if leakage > tolerance {
        return Err(Error::Truncation { leakage, tolerance });
    }
    Ok(())
}

/// p(n₁,…,n_d) = |c|², renormalized by ‖ψ‖².
pub fn photon_distribution(state: &FockStateVec, tolerance: f64) -> Result<PhotonDistribution> {
    check_leakage(state, tolerance)?;
    let norm = state.norm_sqr();
    Ok(PhotonDistribution {
        num_modes: state.num_modes,
        cutoff: state.cutoff,
        probabilities: state.amplitudes.iter().map(|z| z.norm_sqr() / norm).collect(),
    })
}

/// I.i.d. count tuples by inverse CDF over the flattened distribution.
pub fn sample_counts(
    state: &FockStateVec,
    rng: &mut SeededRng,
    shots: usize,
    tolerance: f64,
) -> Result<Vec<Vec<usize>>> {
    let dist = photon_distribution(state, tolerance)?;
    let mut cdf = Vec::with_capacity(dist.probabilities.len());
    let mut acc = 0.0;
    for p in &dist.probabilities {
        acc += p;
        cdf.push(acc);
    }
    let total = acc;
    Ok((0..shots)
        .map(|_| {
            let u = rng.next_f64() * total;
            let idx = cdf.partition_point(|&c| c <= u).min(cdf.len() - 1);
            dist.counts_of(idx)
        })
        .collect())
}

//! Self-checks behind the `kernel-selftest` and `oracle-check` commands.

use num_complex::Complex64;
use serde::Serialize;

use crate::coherent;
use crate::error::{Error, Result};
use crate::fock;
use crate::kernel::{
    self, gamma_of_mesh, pgksas_exact, pgksas_shots, score_matrix, KernelConfig, MeshParams,
};
use crate::numerics::{eigh_symmetric, RealTensor, SeededRng};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self {
            name: name.to_string(),
            passed,
            detail,
        }
    }
}

fn random_token(d: usize, rng: &mut SeededRng) -> Vec<f64> {
    (0..d).map(|_| rng.uniform(-1.0, 1.0)).collect()
}

/// Runs the kernel invariants on seeded random inputs.
pub fn kernel_selftest(seed: u64) -> Result<Vec<CheckResult>> {
    let root = SeededRng::new(seed);
    let d = 6;
    let trials = 50;
    let cfg = KernelConfig::new(d);
    let mut out = Vec::new();

    let mut rng = root.split("symmetry");
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let mesh = MeshParams::random(d, d, std::f64::consts::PI, &mut rng)?;
        let (a, b) = (random_token(d, &mut rng), random_token(d, &mut rng));
        worst = worst.max((pgksas_exact(&a, &b, &mesh, &cfg)? - pgksas_exact(&b, &a, &mesh, &cfg)?).abs());
    }
    out.push(CheckResult::new(
        "symmetry",
        worst == 0.0,
        format!("max |s(a,b) - s(b,a)| = {worst:e}"),
    ));

    // dyadic tokens and integer shifts keep z bit-identical
    let mut rng = root.split("translation");
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let mesh = MeshParams::random(d, d, std::f64::consts::PI, &mut rng)?;
        let dyadic = |rng: &mut SeededRng| -> Vec<f64> {
            (0..d).map(|_| (rng.below(64) as f64 - 32.0) / 16.0).collect()
        };
        let (a, b) = (dyadic(&mut rng), dyadic(&mut rng));
        let shift: Vec<f64> = (0..d).map(|_| rng.below(9) as f64 - 4.0).collect();
        let sa: Vec<f64> = a.iter().zip(&shift).map(|(x, c)| x + c).collect();
        let sb: Vec<f64> = b.iter().zip(&shift).map(|(x, c)| x + c).collect();
        worst = worst.max((pgksas_exact(&a, &b, &mesh, &cfg)? - pgksas_exact(&sa, &sb, &mesh, &cfg)?).abs());
    }
    out.push(CheckResult::new(
        "translation-invariance",
        worst == 0.0,
        format!("max deviation under shared shift = {worst:e}"),
    ));

    let mut rng = root.split("bounds");
    let mut ok = true;
    for _ in 0..trials {
        let mesh = MeshParams::random(d, d, std::f64::consts::PI, &mut rng)?;
        let (a, b) = (random_token(d, &mut rng), random_token(d, &mut rng));
        let s = pgksas_exact(&a, &b, &mesh, &cfg)?;
        ok &= s > 0.0 && s <= 1.0 && pgksas_exact(&a, &a, &mesh, &cfg)? == 1.0;
    }
    out.push(CheckResult::new(
        "bounds",
        ok,
        "0 < s <= 1 and s(x, x) = 1".into(),
    ));

    let mut rng = root.split("full-mode");
    let all = cfg.clone().all_modes();
    let (a, b) = (random_token(d, &mut rng), random_token(d, &mut rng));
    let reference = pgksas_exact(&a, &b, &MeshParams::rectangular(d, d)?, &all)?;
    let mut spread = 0.0f64;
    for _ in 0..10 {
        let mesh = MeshParams::random(d, d, std::f64::consts::PI, &mut rng)?;
        spread = spread.max((pgksas_exact(&a, &b, &mesh, &all)? - reference).abs());
    }
    let z2: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum();
    let closed = (-z2 / 2.0).exp();
    out.push(CheckResult::new(
        "full-mode-invariance",
        spread < 1e-12 && (reference - closed).abs() < 1e-12,
        format!(
            "mesh spread {spread:e}, closed-form error {:e}",
            (reference - closed).abs()
        ),
    ));

    let mut rng = root.split("psd");
    let mut min_eig = f64::INFINITY;
    for _ in 0..trials {
        let mesh = MeshParams::random(d, d, std::f64::consts::PI, &mut rng)?;
        let eig = eigh_symmetric(&gamma_of_mesh(&mesh, &cfg.detected)?)?;
        min_eig = min_eig.min(eig.values[0]);
    }
    out.push(CheckResult::new(
        "gamma-psd",
        min_eig >= -1e-10,
        format!("min eigenvalue {min_eig:e}"),
    ));

    let mut rng = root.split("rows");
    let mesh = MeshParams::random(d, d, std::f64::consts::PI, &mut rng)?;
    let tokens = RealTensor::from_rows(&(0..8).map(|_| random_token(d, &mut rng)).collect::<Vec<_>>());
    let m = score_matrix(&tokens, &mesh, &cfg, None)?;
    let row_err = (0..m.scores.rows())
        .map(|r| (m.scores.row(r).iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    out.push(CheckResult::new(
        "row-normalization",
        row_err < 1e-9,
        format!("max |row sum - 1| = {row_err:e}"),
    ));

    let mut rng = root.split("shots");
    let mut shot_cfg = cfg.clone();
    shot_cfg.backend = kernel::Backend::Shots;
    let mesh = MeshParams::random(d, d, std::f64::consts::PI, &mut rng)?;
    let (a, b) = (random_token(d, &mut rng), random_token(d, &mut rng));
    let same = pgksas_shots(&a, &a, &mesh, &shot_cfg, &mut rng)?;
    let est = pgksas_shots(&a, &b, &mesh, &shot_cfg, &mut rng)?;
    let on_grid = (est * shot_cfg.shots as f64).fract() == 0.0;
    out.push(CheckResult::new(
        "shot-estimator",
        same == 1.0 && on_grid,
        format!("s(x, x) = {same}, 16-shot estimate {est}"),
    ));
    Ok(out)
}

/// Summary of coherent-vs-Fock vacuum probability trials.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleReport {
    pub modes: usize,
    pub cutoff: usize,
    pub trials: usize,
    pub tolerance: f64,
    /// Largest deviation over all-mode and subset detection.
    pub max_abs_error: f64,
    pub max_leakage: f64,
    pub failures: usize,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// One random trial: real displacements in `[-1, 1]`, a mesh of depth 1–3
/// with angles in `[-π, π]`. Returns (all-mode error, subset error, leakage).
pub fn oracle_trial(modes: usize, cutoff: usize, rng: &mut SeededRng) -> Result<(f64, f64, f64)> {
    let depth = 1 + rng.below(3);
    let mesh = MeshParams::random(modes, depth, std::f64::consts::PI, rng)?;
    let alphas: Vec<f64> = (0..modes).map(|_| rng.uniform(-1.0, 1.0)).collect();

    let mut f = fock::vacuum_state(modes, cutoff)?;
    let mut c = coherent::coherent_vacuum(modes)?;
    for (k, &a) in alphas.iter().enumerate() {
        let alpha = Complex64::new(a, 0.0);
        f = fock::apply_single_mode(&fock::displacement_matrix(alpha, cutoff)?, k, &f)?;
        c = coherent::displace(&c, k, alpha)?;
    }
    for bs in mesh.layers().iter().flatten() {
        f = fock::apply_two_mode(
            &fock::beamsplitter_matrix(bs.theta, bs.phi, cutoff)?,
            bs.modes,
            &f,
        )?;
    }
    c = coherent::apply_mesh(&c, &kernel::mesh_unitary(&mesh)?)?;

    let all: Vec<usize> = (0..modes).collect();
    let subset: Vec<usize> = (0..modes.div_ceil(2)).collect();
    let e_all = (fock::vacuum_probability(&f) - coherent::vacuum_probability(&c, &all)?).abs();
    let e_sub =
        (fock::subset_vacuum_probability(&f, &subset)? - coherent::vacuum_probability(&c, &subset)?).abs();
    Ok((e_all, e_sub, f.leakage()))
}

pub fn oracle_check(modes: usize, cutoff: usize, trials: usize, seed: u64) -> Result<OracleReport> {
    if modes == 0 || trials == 0 {
        return Err(Error::Validation(
            "oracle check needs modes >= 1 and trials >= 1".into(),
        ));
    }
    let tolerance = 1e-6;
    let root = SeededRng::new(seed);
    let mut report = OracleReport {
        modes,
        cutoff,
        trials,
        tolerance,
        max_abs_error: 0.0,
        max_leakage: 0.0,
        failures: 0,
    };
    for t in 0..trials {
        let (e_all, e_sub, leak) = oracle_trial(modes, cutoff, &mut root.split(&format!("trial/{t}")))?;
        let err = e_all.max(e_sub);
        report.max_abs_error = report.max_abs_error.max(err);
        report.max_leakage = report.max_leakage.max(leak);
        if err.is_nan() || err > tolerance {
            report.failures += 1;
        }
    }
    Ok(report)
}

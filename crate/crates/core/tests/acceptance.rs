//! Acceptance suite: one line per criterion, non-zero exit on any failure.
//!
//! Runs without the libtest harness so the verdict lines always print.

use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::Instant;

use pgket::autodiff::{Tape, Var};
use pgket::checkpoint::read_checkpoint;
use pgket::data::{load_cifar10_bin, load_idx};
use pgket::diagnostics::oracle_check;
use pgket::experiment::{noise_compare, run_experiment, ExperimentConfig, NoiseComparison, RunOutcome};
use pgket::kernel::{
    gamma_of_mesh, grad_pgksas, pgksas_exact, pgksas_fock, pgksas_shots, score_matrix, Backend, KernelConfig,
    MeshParams, ScoreMode,
};
use pgket::nn::{gksam_scores, Model, ModelConfig};
use pgket::numerics::{eigh_symmetric, RealTensor, SeededRng};
use pgket::train::{batch_gradients, convergence_epoch, Sample};

// pinned tolerances
const ORACLE_TOL: f64 = 1e-6;
const CIRCUIT_TOL: f64 = 1e-6;
const CLOSED_FORM_TOL: f64 = 1e-12;
const EQUIV_TOL: f64 = 1e-12;
const ROW_SUM_TOL: f64 = 1e-9;
const PSD_TOL: f64 = -1e-10;
const SHOT_SIGMAS: f64 = 4.0;
const SHOT_MIN_HITS: usize = 95;
const UNBIASED_TOL: f64 = 0.01;
const FD_RTOL: f64 = 1e-4;
const FD_ATOL: f64 = 1e-6;
const FINAL_ACC_MIN: f64 = 0.50;
const BEST_ACC_MIN: f64 = 0.60;
const LOSS_RATIO_MAX: f64 = 0.5;
const NOISY_ACC_MIN: f64 = 0.30;
const NOISE_SIGMA: f64 = 0.4;

type Verdict = Result<String, String>;
type Criterion = (&'static str, fn() -> Verdict);

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn fixture_dir(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../data")
        .join(name)
}

fn token(d: usize, rng: &mut SeededRng) -> Vec<f64> {
    (0..d).map(|_| rng.uniform(-1.0, 1.0)).collect()
}

fn tokens(n: usize, d: usize, rng: &mut SeededRng) -> RealTensor {
    RealTensor::from_rows(&(0..n).map(|_| token(d, rng)).collect::<Vec<_>>())
}

fn random_mesh(d: usize, rng: &mut SeededRng) -> MeshParams {
    let depth = 1 + rng.below(3);
    MeshParams::random(d, depth, std::f64::consts::PI, rng).unwrap()
}

fn c1_oracle_equivalence() -> Verdict {
    let mut worst = 0.0f64;
    let mut failures = 0;
    for (d, seed) in [(2, 101), (3, 102)] {
        let r = oracle_check(d, 18, 100, seed).map_err(|e| e.to_string())?;
        worst = worst.max(r.max_abs_error);
        failures += r.failures;
    }
    check(
        failures == 0 && worst <= ORACLE_TOL,
        format!("200 trials (100 at d=2, 100 at d=3), max |Δ| = {worst:.2e}, failures {failures}"),
    )
}

fn c2_circuit_derivation() -> Verdict {
    let mut rng = SeededRng::new(2);
    let cfg = KernelConfig::new(2);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let mesh = random_mesh(2, &mut rng);
        let (a, b) = (token(2, &mut rng), token(2, &mut rng));
        let fock = pgksas_fock(&a, &b, &mesh, &cfg, 18).map_err(|e| e.to_string())?;
        let exact = pgksas_exact(&a, &b, &mesh, &cfg).map_err(|e| e.to_string())?;
        worst = worst.max((fock - exact).abs());
    }
    check(
        worst <= CIRCUIT_TOL,
        format!("50 circuits at d=2, N=18, max |Δ| = {worst:.2e}"),
    )
}

fn c3_closed_form() -> Verdict {
    let d = 16;
    let mut rng = SeededRng::new(3);
    let all = KernelConfig::new(d).all_modes();
    let ident = MeshParams::rectangular(d, d).unwrap();
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let (a, b) = (token(d, &mut rng), token(d, &mut rng));
        let z2: f64 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum();
        let s = pgksas_exact(&a, &b, &ident, &all).unwrap();
        worst = worst.max((s - (-z2 / 2.0).exp()).abs());
    }
    let (a, b) = (token(d, &mut rng), token(d, &mut rng));
    let scores: Vec<f64> = (0..10)
        .map(|_| {
            pgksas_exact(
                &a,
                &b,
                &MeshParams::random(d, d, std::f64::consts::PI, &mut rng).unwrap(),
                &all,
            )
            .unwrap()
        })
        .collect();
    let spread =
        scores.iter().cloned().fold(f64::MIN, f64::max) - scores.iter().cloned().fold(f64::MAX, f64::min);
    check(
        worst <= CLOSED_FORM_TOL && spread < CLOSED_FORM_TOL,
        format!("1000 pairs max |Δ| = {worst:.2e}; spread over 10 meshes = {spread:.2e}"),
    )
}

fn c4_kernel_matrix_equivalence() -> Verdict {
    let (n, d) = (8, 16);
    let mut rng = SeededRng::new(4);
    let cfg = KernelConfig::new(d);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let mesh = MeshParams::random(d, d, std::f64::consts::PI, &mut rng).unwrap();
        let x = tokens(n, d, &mut rng);
        let photonic = score_matrix(&x, &mesh, &cfg, None).unwrap().scores;
        let classical = gksam_scores(&x, &gamma_of_mesh(&mesh, &cfg.detected).unwrap()).unwrap();
        worst = worst.max(photonic.max_abs_diff(&classical));
    }
    check(
        worst <= EQUIV_TOL,
        format!("100 configurations, max entrywise |Δ| = {worst:.2e}"),
    )
}

fn c5_properties() -> Verdict {
    let (n, d) = (8, 16);
    let mut rng = SeededRng::new(5);
    let cfg = KernelConfig::new(d);
    let mut row_err = 0.0f64;
    let mut shift_err = 0.0f64;
    let mut min_eig = f64::INFINITY;
    for _ in 0..100 {
        let mesh = MeshParams::random(d, d, std::f64::consts::PI, &mut rng).unwrap();
        let x = tokens(n, d, &mut rng);
        let s = score_matrix(&x, &mesh, &cfg, None).unwrap().scores;
        for r in 0..n {
            row_err = row_err.max((s.row(r).iter().sum::<f64>() - 1.0).abs());
        }
        // dyadic values and integer shifts: every difference is exact
        let grid = RealTensor::from_rows(
            &(0..n)
                .map(|_| (0..d).map(|_| (rng.below(64) as f64 - 32.0) / 16.0).collect())
                .collect::<Vec<_>>(),
        );
        let shift: Vec<f64> = (0..d).map(|_| rng.below(17) as f64 - 8.0).collect();
        let mut moved = grid.clone();
        for r in 0..n {
            for (v, c) in moved.row_mut(r).iter_mut().zip(&shift) {
                *v += c;
            }
        }
        let base = score_matrix(&grid, &mesh, &cfg, None).unwrap().scores;
        let shifted = score_matrix(&moved, &mesh, &cfg, None).unwrap().scores;
        shift_err = shift_err.max(base.max_abs_diff(&shifted));
        let eig = eigh_symmetric(&gamma_of_mesh(&mesh, &cfg.detected).unwrap()).unwrap();
        min_eig = min_eig.min(eig.values[0]);
    }
    check(
        row_err <= ROW_SUM_TOL && shift_err == 0.0 && min_eig >= PSD_TOL,
        format!(
            "max |row sum - 1| = {row_err:.2e}; shift deviation = {shift_err:e}; min eig(Γ) = {min_eig:.2e}"
        ),
    )
}

fn c6_shot_statistics() -> Verdict {
    let d = 4;
    let mut rng = SeededRng::new(6);
    let mesh = MeshParams::random(d, d, std::f64::consts::PI, &mut rng).unwrap();
    let mut cfg = KernelConfig::new(d);
    cfg.backend = Backend::Shots;
    let gamma = gamma_of_mesh(&mesh, &cfg.detected).unwrap();
    let mut lines = Vec::new();
    let mut ok = true;
    for target in [0.2, 0.5, 0.8] {
        // scale a direction with zᵀΓz > 0 so that exp(−½ zᵀΓz) = target
        let (dir, q) = loop {
            let z = token(d, &mut rng);
            let q: f64 = (0..d)
                .flat_map(|a| (0..d).map(move |b| (a, b)))
                .map(|(a, b)| z[a] * gamma.get(a, b) * z[b])
                .sum();
            if q > 1e-3 {
                break (z, q);
            }
        };
        let t = (-2.0 * f64::ln(target) / q).sqrt();
        let xi: Vec<f64> = dir.iter().map(|v| v * t).collect();
        let xj = vec![0.0; d];
        let p = pgksas_exact(&xi, &xj, &mesh, &KernelConfig::new(d)).unwrap();
        if !(0.1..=0.9).contains(&p) {
            return Err(format!("constructed score {p} left [0.1, 0.9]"));
        }
        let mut big = cfg.clone();
        big.shots = 10_000;
        let bound = SHOT_SIGMAS * (p * (1.0 - p) / 1e4).sqrt();
        let hits = (0..100)
            .filter(|&trial| {
                let mut r = SeededRng::new(600).split(&format!("p{target}/trial/{trial}"));
                (pgksas_shots(&xi, &xj, &mesh, &big, &mut r).unwrap() - p).abs() <= bound
            })
            .count();
        let mut r = SeededRng::new(601).split(&format!("p{target}/sixteen"));
        let mean = (0..10_000)
            .map(|_| pgksas_shots(&xi, &xj, &mesh, &cfg, &mut r).unwrap())
            .sum::<f64>()
            / 1e4;
        ok &= hits >= SHOT_MIN_HITS && (mean - p).abs() <= UNBIASED_TOL;
        lines.push(format!("p={p:.3}: {hits}/100 within 4σ, 16-shot mean {mean:.4}"));
    }
    check(ok, lines.join("; "))
}

fn fd_ok(analytic: f64, numeric: f64) -> bool {
    (analytic - numeric).abs() <= FD_ATOL + FD_RTOL * numeric.abs()
}

/// Central differences of a tape-built scalar against its backward pass.
fn fd_tape(inputs: &[RealTensor], build: &dyn Fn(&mut Tape, &[Var]) -> Var) -> (usize, usize) {
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
    let (mut checked, mut bad) = (0, 0);
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[i], input);
        for k in 0..input.len() {
            let h = 1e-5 * input.data()[k].abs().max(1.0);
            let (mut up, mut dn) = (inputs.to_vec(), inputs.to_vec());
            up[i].data_mut()[k] += h;
            dn[i].data_mut()[k] -= h;
            let numeric = (eval(&up) - eval(&dn)) / (2.0 * h);
            checked += 1;
            if !fd_ok(analytic.data()[k], numeric) {
                bad += 1;
            }
        }
    }
    (checked, bad)
}

fn weighted_sum(t: &mut Tape, x: Var) -> Var {
    let (r, c) = (t.value(x).rows(), t.value(x).cols());
    let mut rng = SeededRng::new(77);
    let w = t.leaf(RealTensor::new(vec![c, 1], (0..c).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap());
    let y = t.matmul(x, w).unwrap();
    let ones = t.leaf(RealTensor::filled(&[1, r], 1.0));
    t.matmul(ones, y).unwrap()
}

fn rand_t(rng: &mut SeededRng, shape: &[usize]) -> RealTensor {
    let n = shape.iter().product();
    RealTensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
}

fn c7_gradients() -> Verdict {
    let mut rng = SeededRng::new(7);
    let d = 4;
    let mesh = MeshParams::random(d, d, 0.8, &mut rng).unwrap();
    let cfg = KernelConfig::new(d);
    let mut scalar_cfg = KernelConfig::new(d);
    scalar_cfg.score_mode = ScoreMode::ScalarWeighted;
    scalar_cfg.normalize_rows = false;

    type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Var>;
    let m2 = mesh.clone();
    let m3 = mesh.clone();
    let (c2, c3) = (cfg.clone(), scalar_cfg.clone());
    let cases: Vec<(&str, Vec<RealTensor>, Build)> = vec![
        (
            "matmul",
            vec![rand_t(&mut rng, &[2, 4]), rand_t(&mut rng, &[4, 3])],
            Box::new(|t, v| {
                let y = t.matmul(v[0], v[1]).unwrap();
                weighted_sum(t, y)
            }),
        ),
        (
            "add",
            vec![rand_t(&mut rng, &[2, 4]), rand_t(&mut rng, &[2, 4])],
            Box::new(|t, v| {
                let y = t.add(v[0], v[1]).unwrap();
                weighted_sum(t, y)
            }),
        ),
        (
            "add_row",
            vec![rand_t(&mut rng, &[2, 4]), rand_t(&mut rng, &[4])],
            Box::new(|t, v| {
                let y = t.add_row(v[0], v[1]).unwrap();
                weighted_sum(t, y)
            }),
        ),
        (
            "relu",
            vec![rand_t(&mut rng, &[2, 4])],
            Box::new(|t, v| {
                let y = t.relu(v[0]);
                weighted_sum(t, y)
            }),
        ),
        (
            "transpose",
            vec![rand_t(&mut rng, &[2, 4])],
            Box::new(|t, v| {
                let y = t.transpose(v[0]);
                weighted_sum(t, y)
            }),
        ),
        (
            "scale",
            vec![rand_t(&mut rng, &[2, 4])],
            Box::new(|t, v| {
                let y = t.scale(v[0], -1.7);
                weighted_sum(t, y)
            }),
        ),
        (
            "layer_norm",
            vec![
                rand_t(&mut rng, &[2, 4]),
                rand_t(&mut rng, &[4]),
                rand_t(&mut rng, &[4]),
            ],
            Box::new(|t, v| {
                let y = t.layer_norm(v[0], v[1], v[2]).unwrap();
                weighted_sum(t, y)
            }),
        ),
        (
            "mean_rows",
            vec![rand_t(&mut rng, &[2, 4])],
            Box::new(|t, v| {
                let y = t.mean_rows(v[0]).unwrap();
                weighted_sum(t, y)
            }),
        ),
        (
            "softmax_rows",
            vec![rand_t(&mut rng, &[2, 4])],
            Box::new(|t, v| {
                let y = t.softmax_rows(v[0]).unwrap();
                weighted_sum(t, y)
            }),
        ),
        (
            "gaussian_scores",
            vec![rand_t(&mut rng, &[2, 4]), rand_t(&mut rng, &[4, 4])],
            Box::new(|t, v| {
                let mt = t.transpose(v[1]);
                let g = t.matmul(mt, v[1]).unwrap();
                let y = t.gaussian_scores(v[0], g, 0.5, true).unwrap();
                weighted_sum(t, y)
            }),
        ),
        (
            "mesh_gamma+photonic_scores",
            vec![rand_t(&mut rng, &[2, 4]), RealTensor::vector(mesh.angles())],
            Box::new(move |t, v| {
                let g = t.mesh_gamma(v[1], &m2, &c2.detected).unwrap();
                let mut m = m2.clone();
                m.set_angles(t.value(v[1]).data()).unwrap();
                let y = t.photonic_scores(v[0], &m, Some(g), None, &c2, None).unwrap();
                weighted_sum(t, y)
            }),
        ),
        (
            "photonic_scores scalar-weighted",
            vec![rand_t(&mut rng, &[2, 4]), RealTensor::vector(vec![0.2])],
            Box::new(move |t, v| {
                let y = t.photonic_scores(v[0], &m3, None, Some(v[1]), &c3, None).unwrap();
                weighted_sum(t, y)
            }),
        ),
        (
            "cross_entropy+mean",
            vec![rand_t(&mut rng, &[1, 3]), rand_t(&mut rng, &[1, 3])],
            Box::new(|t, v| {
                let a = t.cross_entropy(v[0], 1).unwrap();
                let b = t.cross_entropy(v[1], 2).unwrap();
                t.mean(&[a, b]).unwrap()
            }),
        ),
    ];
    let mut total = 0;
    let mut failed = Vec::new();
    for (name, inputs, build) in &cases {
        let (n, bad) = fd_tape(inputs, build.as_ref());
        total += n;
        if bad > 0 {
            failed.push(format!("{name} ({bad}/{n})"));
        }
    }

    // the standalone pair gradient
    let (a, b) = (token(d, &mut rng), token(d, &mut rng));
    let g = grad_pgksas(&a, &b, &mesh, &cfg).unwrap();
    let angles = mesh.angles();
    let h = 1e-5;
    for k in 0..angles.len() {
        let at = |delta: f64| {
            let mut m = mesh.clone();
            let mut ang = angles.clone();
            ang[k] += delta;
            m.set_angles(&ang).unwrap();
            pgksas_exact(&a, &b, &m, &cfg).unwrap()
        };
        total += 1;
        if !fd_ok(g.mesh[k], (at(h) - at(-h)) / (2.0 * h)) {
            failed.push(format!("grad_pgksas angle {k}"));
        }
    }
    for k in 0..d {
        let at = |delta: f64| {
            let mut x = a.clone();
            x[k] += delta;
            pgksas_exact(&x, &b, &mesh, &cfg).unwrap()
        };
        total += 1;
        if !fd_ok(g.xi[k], (at(h) - at(-h)) / (2.0 * h)) {
            failed.push(format!("grad_pgksas xi {k}"));
        }
    }

    // end to end: 2 tokens, d = 4, 3 classes
    for mode in [ScoreMode::GammaForm, ScoreMode::ScalarWeighted] {
        let mut mc = ModelConfig::new(2, 4, 3);
        mc.mesh_init_spread = 0.8;
        mc.kernel.score_mode = mode;
        let model = Model::init(mc.clone(), &mut SeededRng::new(70)).unwrap();
        let samples: Vec<Sample> = (0..3)
            .map(|label| Sample {
                tokens: rand_t(&mut rng, &[2, 4]),
                label,
            })
            .collect();
        let batch: Vec<&Sample> = samples.iter().collect();
        let eval_rng = SeededRng::new(71);
        let (_, grads) = batch_gradients(&model, &batch, Backend::Exact, &eval_rng).unwrap();
        let loss_at = |params: pgket::autodiff::ParamStore| {
            let m = Model::from_params(mc.clone(), params).unwrap();
            batch_gradients(&m, &batch, Backend::Exact, &eval_rng).unwrap().0
        };
        let names: Vec<String> = model.params().iter().map(|(n, _)| n.to_string()).collect();
        for (pi, name) in names.iter().enumerate() {
            let base = model.params().require(name).unwrap().clone();
            for k in 0..base.len() {
                let h = 1e-5 * base.data()[k].abs().max(1.0);
                let mut up = model.params().clone();
                up.get_mut(name).unwrap().data_mut()[k] += h;
                let mut dn = model.params().clone();
                dn.get_mut(name).unwrap().data_mut()[k] -= h;
                let numeric = (loss_at(up) - loss_at(dn)) / (2.0 * h);
                total += 1;
                if !fd_ok(grads[pi].data()[k], numeric) {
                    failed.push(format!("{mode:?} {name}[{k}]"));
                }
            }
        }
    }
    check(
        failed.is_empty(),
        format!(
            "{total} components over {} primitives, grad_pgksas and 2 end-to-end models; mismatches: {}",
            cases.len(),
            if failed.is_empty() {
                "none".to_string()
            } else {
                failed.join(", ")
            }
        ),
    )
}

struct Runs {
    cfg: ExperimentConfig,
    first: RunOutcome,
    second: RunOutcome,
    _dir: tempfile::TempDir,
}

fn protocol_config() -> ExperimentConfig {
    ExperimentConfig {
        data_dir: fixture_dir("mnist-1k"),
        seed: 2024,
        ..ExperimentConfig::default()
    }
}

fn runs() -> &'static Result<Runs, String> {
    static RUNS: OnceLock<Result<Runs, String>> = OnceLock::new();
    RUNS.get_or_init(|| {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let cfg = protocol_config();
        let first = run_experiment(&cfg, dir.path().join("a")).map_err(|e| e.to_string())?;
        let second = run_experiment(&cfg, dir.path().join("b")).map_err(|e| e.to_string())?;
        Ok(Runs {
            cfg,
            first,
            second,
            _dir: dir,
        })
    })
}

fn c8_default_protocol() -> Verdict {
    let runs = runs().as_ref().map_err(|e| e.clone())?;
    let s = &runs.first.summary;
    let ratio = s.final_train_loss / s.first_train_loss;
    let deterministic = runs.first.summary == runs.second.summary && runs.first.rows.len() == 200;
    check(
        s.final_test_acc >= FINAL_ACC_MIN
            && s.best_test_acc >= BEST_ACC_MIN
            && ratio <= LOSS_RATIO_MAX
            && deterministic,
        format!(
            "final acc {:.3}, best acc {:.3}, loss ratio {:.2e}, {} epochs, rerun identical: {deterministic}",
            s.final_test_acc,
            s.best_test_acc,
            ratio,
            runs.first.rows.len()
        ),
    )
}

fn c9_noise_comparison() -> Verdict {
    let runs = runs().as_ref().map_err(|e| e.clone())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cmp: NoiseComparison =
        noise_compare(&runs.cfg, NOISE_SIGMA, dir.path()).map_err(|e| e.to_string())?;
    let csv = std::fs::read_to_string(dir.path().join("noise_compare.csv")).map_err(|e| e.to_string())?;
    let header_ok = csv.lines().next() == Some("run,final_acc,loss,conv_epoch")
        && csv
            .lines()
            .skip(1)
            .map(|l| l.split(',').next().unwrap_or(""))
            .eq(["clean", "noisy", "delta"]);
    let clean_matches = cmp.clean.final_acc == runs.first.summary.final_test_acc;
    check(
        cmp.noisy.final_acc >= NOISY_ACC_MIN && header_ok && clean_matches,
        format!(
            "clean acc {:.3}, noisy acc {:.3}, delta {:+.3}, conv epochs {:?}/{:?}, schema ok: {header_ok}",
            cmp.clean.final_acc,
            cmp.noisy.final_acc,
            cmp.acc_delta,
            cmp.clean.conv_epoch,
            cmp.noisy.conv_epoch
        ),
    )
}

fn c10_convergence_metric() -> Verdict {
    // hand oracle: first 1-indexed epoch with acc >= 0.95 * peak
    let cases: [(&[f64], Option<usize>); 5] = [
        (&[0.1, 0.3, 0.5, 0.7, 0.9], Some(5)),
        (&[0.2, 0.95, 0.5, 1.0, 0.9], Some(2)),
        (&[0.6, 0.6, 0.6], Some(1)),
        (&[0.1, 0.56, 0.58, 0.6, 0.3], Some(3)),
        (&[0.0, 0.2, 0.4, 0.38, 0.39, 0.381], Some(3)),
    ];
    let mut bad = Vec::new();
    for (i, (series, want)) in cases.iter().enumerate() {
        let got = convergence_epoch(series, 0.95);
        if got != *want {
            bad.push(format!("series {i}: got {got:?}, want {want:?}"));
        }
    }
    check(
        bad.is_empty(),
        if bad.is_empty() {
            "5/5 series match".into()
        } else {
            bad.join("; ")
        },
    )
}

fn c11_determinism_and_formats() -> Verdict {
    let runs = runs().as_ref().map_err(|e| e.clone())?;
    let read = |o: &RunOutcome| std::fs::read(o.dir.join("metrics.csv")).map_err(|e| e.to_string());
    let csv_identical = read(&runs.first)? == read(&runs.second)?;

    let records = runs.first.model.to_records().map_err(|e| e.to_string())?;
    let back = read_checkpoint(runs.first.dir.join("checkpoint-final.pgkt")).map_err(|e| e.to_string())?;
    let bits = |r: &[(String, RealTensor)]| -> Vec<(String, Vec<usize>, Vec<u64>)> {
        r.iter()
            .map(|(n, t)| {
                (
                    n.clone(),
                    t.shape().to_vec(),
                    t.data().iter().map(|v| v.to_bits()).collect(),
                )
            })
            .collect()
    };
    let ckpt_exact = bits(&records) == bits(&back);

    let mnist_dir = fixture_dir("mnist-1k");
    let mnist = load_idx(
        mnist_dir.join("images-idx3-ubyte"),
        mnist_dir.join("labels-idx1-ubyte"),
    )
    .map_err(|e| e.to_string())?;
    let mut per_digit = [0usize; 10];
    for &l in &mnist.labels {
        per_digit[l as usize] += 1;
    }
    let idx_ok = (mnist.len(), mnist.height, mnist.width, mnist.channels) == (1000, 28, 28, 1)
        && per_digit == [100; 10];

    let cifar = load_cifar10_bin(fixture_dir("cifar10-mini")).map_err(|e| e.to_string())?;
    let labels_ok = cifar
        .labels
        .iter()
        .enumerate()
        .all(|(i, &l)| l as usize == i % 10);
    // fixture pixel (i, c, p) = (31 i + 7 c + p) mod 256, stored interleaved
    let pixels_ok = [(0usize, 0usize, 0usize), (3, 1, 100), (29, 2, 1023), (17, 0, 512)]
        .iter()
        .all(|&(i, c, p)| cifar.image(i)[p * 3 + c] as usize == (31 * i + 7 * c + p) % 256);
    let cifar_ok =
        (cifar.len(), cifar.height, cifar.width, cifar.channels) == (30, 32, 32, 3) && labels_ok && pixels_ok;

    check(
        csv_identical && ckpt_exact && idx_ok && cifar_ok,
        format!(
            "metrics CSV identical: {csv_identical}; checkpoint bit-exact ({} tensors): {ckpt_exact}; IDX 1000x28x28: {idx_ok}; CIFAR 30x32x32x3: {cifar_ok}",
            back.len()
        ),
    )
}

fn main() {
    let criteria: [Criterion; 11] = [
        ("backend oracle equivalence", c1_oracle_equivalence),
        ("circuit derivation", c2_circuit_derivation),
        ("kernel closed form", c3_closed_form),
        (
            "photonic vs classical kernel matrix",
            c4_kernel_matrix_equivalence,
        ),
        ("normalization, translation, PSD", c5_properties),
        ("shot statistics", c6_shot_statistics),
        ("gradient suite", c7_gradients),
        ("default protocol", c8_default_protocol),
        ("noise comparison", c9_noise_comparison),
        ("convergence metric", c10_convergence_metric),
        ("determinism and formats", c11_determinism_and_formats),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let id = format!("criterion {:>2}", i + 1);
        if !filter.is_empty()
            && !filter
                .iter()
                .any(|p| name.contains(p.as_str()) || id.contains(p.as_str()))
        {
            continue;
        }
        let start = Instant::now();
        let verdict = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match verdict {
            Ok(detail) => println!("{id} PASS [{secs:6.2}s] {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("{id} FAIL [{secs:6.2}s] {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        println!("acceptance: {failed} criteria failed");
        std::process::exit(1);
    }
    println!("acceptance: all criteria passed");
}

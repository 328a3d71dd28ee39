//! Acceptance suite: one test per criterion, each printing a pass line with
//! its runtime. Every tolerance is pinned in the assertions below.
//!
//! Run with `cargo test -p ssmlab --test acceptance -- --nocapture`.

use ssmlab::kernel::{
    apply_linear_functional, heaviside_response, kernel_l1_norm, MemoryKernel, QuadratureConfig,
    TimeMode,
};
use ssmlab::perturb::{sweep, BetaSpec, PerturbConfig};
use ssmlab::reparam::{Family, ReparamScheme};
use ssmlab::ssm::{backward, forward, forward_scan, Activation, SSMParams};
use ssmlab::train::{
    kernel_distance_to_target, train, LossKind, OptimizerKind, TrainConfig, TrainStatus,
};
use std::time::{Duration, Instant};

fn w_grid() -> Vec<f64> {
    (-50..=50).map(|i| i as f64 * 0.1).collect()
}

fn all_schemes() -> Vec<ReparamScheme> {
    vec![
        ReparamScheme::new(Family::Direct, TimeMode::Continuous).unwrap(),
        ReparamScheme::new(Family::ReLU, TimeMode::Continuous).unwrap(),
        ReparamScheme::new(Family::Exp, TimeMode::Continuous).unwrap(),
        ReparamScheme::new(Family::Softplus, TimeMode::Continuous).unwrap(),
        ReparamScheme::with_coeffs(Family::Best, TimeMode::Continuous, 1.0, 1.0).unwrap(),
        ReparamScheme::new(Family::Direct, TimeMode::Discrete).unwrap(),
        ReparamScheme::new(Family::ReLU, TimeMode::Discrete).unwrap(),
        ReparamScheme::new(Family::Exp, TimeMode::Discrete).unwrap(),
        ReparamScheme::new(Family::Softplus, TimeMode::Discrete).unwrap(),
        ReparamScheme::new(Family::Tanh, TimeMode::Discrete).unwrap(),
        ReparamScheme::with_coeffs(Family::Best, TimeMode::Discrete, 1.0, 0.5).unwrap(),
    ]
}

fn pass(criterion: usize, name: &str, start: Instant, budget: Duration) {
    let elapsed = start.elapsed();
    println!("ACCEPTANCE {criterion} ({name}): PASS in {elapsed:.2?} (budget {budget:.0?})");
    assert!(elapsed <= budget, "ACCEPTANCE {criterion} ({name}): runtime {elapsed:?} over budget");
}

/// Criterion 1: on w in {-5..5 step 0.1}, the gradient-scale op agrees with
/// the tabulated closed forms within 1e-10 (relative for values above 1;
/// f64 cannot deliver 1e-10 absolute through tanh at G ~ e^10), and the
/// analytic derivative matches central finite differences within 1e-6
/// relative away from the ReLU kink.
#[test]
fn criterion_01_closed_form_identities() {
    let start = Instant::now();
    let h = 1e-6;
    for scheme in all_schemes() {
        for &w in &w_grid() {
            match (scheme.closed_form_gradient_scale(w), scheme.gradient_scale(w)) {
                (Some(cf), Ok(g)) => {
                    assert!(
                        (cf - g).abs() <= 1e-10 * cf.abs().max(1.0),
                        "{} at w={w}: closed {cf} vs op {g}",
                        scheme.spec_string()
                    );
                }
                (None, Err(_)) => {} // singular for both routes
                (cf, g) => panic!(
                    "{} at w={w}: closed-form {cf:?} and op {g:?} disagree on definedness",
                    scheme.spec_string()
                ),
            }
            if scheme.family == Family::ReLU && w.abs() < 1e-9 {
                continue;
            }
            let fd = (scheme.apply(w + h).unwrap() - scheme.apply(w - h).unwrap()) / (2.0 * h);
            let an = scheme.derivative(w).unwrap();
            if an.abs() < 1e-9 {
                assert!(fd.abs() < 1e-9, "{} at w={w}: fd {fd} vs 0", scheme.spec_string());
            } else {
                assert!(
                    ((fd - an) / an).abs() < 1e-6,
                    "{} at w={w}: fd {fd} vs analytic {an}",
                    scheme.spec_string()
                );
            }
        }
    }
    pass(1, "closed-form identities", start, Duration::from_secs(1));
}

/// Criterion 2: the certified stability bounds hold over the grid, and the
/// direct parameterization obeys (and is condemned by) its closed-form gap.
#[test]
fn criterion_02_stability_certificates() {
    let start = Instant::now();
    let betas = [0.01, 0.1, 0.5, 1.0];
    let certified = [
        ReparamScheme::new(Family::Exp, TimeMode::Continuous).unwrap(),
        ReparamScheme::new(Family::Softplus, TimeMode::Continuous).unwrap(),
        ReparamScheme::with_coeffs(Family::Best, TimeMode::Continuous, 1.0, 1.0).unwrap(),
    ];
    for scheme in &certified {
        for &w in &w_grid() {
            for &beta in &betas {
                let gap = scheme.stability_gap(w, beta).unwrap();
                let bound = scheme.stability_bound_g(w, beta).unwrap();
                assert!(
                    gap <= bound + 1e-9,
                    "{} w={w} beta={beta}: gap {gap} > bound {bound}",
                    scheme.spec_string()
                );
            }
        }
    }

    let direct = ReparamScheme::new(Family::Direct, TimeMode::Continuous).unwrap();
    // closed form beta/(-w-beta) wherever the ball stays stable
    for &w in &w_grid() {
        for &beta in &betas {
            if w + beta < -1e-9 {
                let gap = direct.stability_gap(w, beta).unwrap();
                let expected = beta / (-w - beta);
                assert!(
                    ((gap - expected) / expected).abs() < 1e-6,
                    "direct w={w} beta={beta}: gap {gap} vs {expected}"
                );
            }
        }
    }
    // the 1/eps law, and the gap exceeding 1e3 at eps = 1e-3
    let beta = 1e-3;
    for &eps in &[1.0, 0.1, 0.01, 1e-3] {
        let gap = direct.stability_gap(-beta * (1.0 + eps), beta).unwrap();
        assert!(
            ((gap - 1.0 / eps) * eps).abs() < 1e-6,
            "direct eps={eps}: gap {gap} vs {}",
            1.0 / eps
        );
    }
    let gap = direct.stability_gap(-beta * (1.0 + 1e-3), beta).unwrap();
    assert!(gap >= 1e3 * (1.0 - 1e-9), "gap {gap} does not exceed 1e3");
    pass(2, "stability certificates", start, Duration::from_secs(1));
}

/// Criterion 3: reverse-mode gradients against central finite differences
/// (step 1e-5), 20 random instances per scheme at m=4, K=20, every family
/// and time mode, max relative error < 1e-5.
#[test]
fn criterion_03_gradient_correctness() {
    use rand::{Rng, SeedableRng};
    let start = Instant::now();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for scheme in all_schemes() {
        for instance in 0..20 {
            let activation = if instance % 2 == 0 { Activation::Tanh } else { Activation::Identity };
            let m = 4;
            let band = match scheme.time_mode {
                TimeMode::Continuous if scheme.family == Family::Best => (-0.9, -0.1),
                TimeMode::Continuous => (-2.0, -0.1),
                TimeMode::Discrete => (0.15, 0.85),
            };
            let w: Vec<f64> = (0..m)
                .map(|_| scheme.invert(rng.gen_range(band.0..band.1)).unwrap())
                .collect();
            let params = SSMParams {
                w,
                u: (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                b: (0..m).map(|_| rng.gen_range(-0.3..0.3)).collect(),
                c: (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                d: 1,
                scheme,
                activation,
                dt: 1.0,
            };
            let x: Vec<f64> = (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let dl_dy: Vec<f64> = (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let fwd = forward(&params, &x).unwrap();
            let grads = backward(&params, &x, &fwd, &dl_dy).unwrap();
            let loss = |p: &SSMParams| -> f64 {
                forward(p, &x).unwrap().y.iter().zip(&dl_dy).map(|(y, a)| y * a).sum()
            };
            let step = 1e-5;
            let mut check = |set: &dyn Fn(&mut SSMParams, f64), base: f64, analytic: f64| {
                let mut p = params.clone();
                set(&mut p, base + step);
                let lp = loss(&p);
                set(&mut p, base - step);
                let lm = loss(&p);
                let fd = (lp - lm) / (2.0 * step);
                let denom = fd.abs().max(analytic.abs());
                if denom > 1e-10 {
                    let rel = (fd - analytic).abs() / denom;
                    worst = worst.max(rel);
                    assert!(
                        rel < 1e-5,
                        "{} {:?}: fd {fd} vs bptt {analytic}",
                        params.scheme.spec_string(),
                        activation
                    );
                }
            };
            for i in 0..m {
                check(&|p, v| p.w[i] = v, params.w[i], grads.w[i]);
                check(&|p, v| p.u[i] = v, params.u[i], grads.u[i]);
                check(&|p, v| p.b[i] = v, params.b[i], grads.b[i]);
                check(&|p, v| p.c[i] = v, params.c[i], grads.c[i]);
            }
        }
    }
    println!("  worst relative gradient error: {worst:.3e}");
    pass(3, "gradient correctness", start, Duration::from_secs(10));
}

/// Criterion 4: the parallel scan matches the sequential loop to 1e-10 at
/// K=10^4, m=64, and is bit-identical across worker counts.
#[test]
fn criterion_04_scan_equivalence() {
    use rand::{Rng, SeedableRng};
    let start = Instant::now();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
    let scheme = ReparamScheme::new(Family::Exp, TimeMode::Discrete).unwrap();
    let m = 64;
    let params = SSMParams {
        w: (0..m).map(|_| scheme.invert(rng.gen_range(0.1..0.95)).unwrap()).collect(),
        u: (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        b: (0..m).map(|_| rng.gen_range(-0.2..0.2)).collect(),
        c: (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        d: 1,
        scheme,
        activation: Activation::Tanh,
        dt: 1.0,
    };
    let x: Vec<f64> = (0..10_000).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let seq = forward(&params, &x).unwrap();
    let reference = ssmlab::parallel::with_workers(1, || forward_scan(&params, &x).unwrap());
    let max_err = seq
        .y
        .iter()
        .zip(&reference.y)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    assert!(max_err <= 1e-10, "scan/sequential max-abs {max_err}");
    for workers in [2usize, 4] {
        let out = ssmlab::parallel::with_workers(workers, || forward_scan(&params, &x).unwrap());
        assert_eq!(reference.y, out.y, "outputs differ at {workers} workers");
        assert_eq!(reference.h, out.h, "hidden states differ at {workers} workers");
    }
    println!("  scan vs sequential max-abs: {max_err:.3e}");
    pass(4, "scan equivalence", start, Duration::from_secs(5));
}

/// Criterion 5: identity-readout layers are exactly the linear functionals
/// of their kernels; 50 random instances against the brute-force
/// convolution oracle, both time modes, max-abs <= 1e-10.
#[test]
fn criterion_05_kernel_equivalence() {
    use rand::{Rng, SeedableRng};
    let start = Instant::now();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for instance in 0..50 {
        let mode = if instance % 2 == 0 { TimeMode::Discrete } else { TimeMode::Continuous };
        let scheme = ReparamScheme::new(Family::Exp, mode).unwrap();
        let band = match mode {
            TimeMode::Continuous => (-2.0, -0.05),
            TimeMode::Discrete => (0.05, 0.95),
        };
        let m = rng.gen_range(1..9);
        let params = SSMParams {
            w: (0..m).map(|_| scheme.invert(rng.gen_range(band.0..band.1)).unwrap()).collect(),
            u: (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            b: vec![0.0; m],
            c: (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            d: 1,
            scheme,
            activation: Activation::Identity,
            dt: 1.0,
        };
        let k_len = rng.gen_range(20..60);
        let x: Vec<f64> = (0..k_len).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let out = forward(&params, &x).unwrap();
        let kernel = params.effective_kernel().unwrap();
        let conv = apply_linear_functional(&kernel, &x, params.dt).unwrap();
        for (a, b) in out.y.iter().zip(&conv) {
            worst = worst.max((a - b).abs());
        }
    }
    assert!(worst <= 1e-10, "kernel equivalence max-abs {worst}");
    println!("  forward vs convolution max-abs: {worst:.3e}");
    pass(5, "kernel equivalence", start, Duration::from_secs(5));
}

/// Criterion 6: during a >= 500-step run (m=16, best discrete, N=4096),
/// every step satisfies |dLoss/dw_i| <= C_hat * 2|w_i| with C_hat the step's
/// max|c_i| surrogate times the batch mass; zero violations.
#[test]
fn criterion_06_gradient_bound_in_vivo() {
    let start = Instant::now();
    let config = TrainConfig {
        target: "poly:1.1".to_string(),
        m: 16,
        d: 1,
        scheme: "best:a=1,b=0.5@disc".to_string(),
        k: 100,
        n: 4096,
        batch: 512,
        lr: 0.01,
        optimizer: OptimizerKind::Adam,
        epochs: 63, // 8 steps/epoch -> 504 steps
        seed: 0,
        loss: LossKind::Mse,
        activation: Activation::Tanh,
        dt: 1.0,
        freeze_bias: false,
        freeze_input: false,
        lambda_init: None,
        quad: None,
    };
    let out = train(&config).unwrap();
    assert_eq!(out.status, TrainStatus::Completed);
    assert!(out.telemetry.len() >= 500, "only {} steps", out.telemetry.len());
    let mut worst: f64 = 0.0;
    for record in &out.telemetry {
        worst = worst.max(record.grad_bound_margin);
        assert!(
            record.grad_bound_margin <= 1.0,
            "step {}: |grad|/(C_hat 2|w|) = {} violates the bound",
            record.step,
            record.grad_bound_margin
        );
    }
    println!(
        "  {} steps, worst |grad|/(C_hat G_f(w)) margin: {worst:.4}",
        out.telemetry.len()
    );
    pass(6, "gradient bound in vivo", start, Duration::from_secs(120));
}

/// Shared protocol for criteria 7-9: linear readout (identity activation,
/// frozen bias and input weights, matching the synthetic linear-RNN setup),
/// N=16384 sequences of length 100, 3 epochs of Adam.
fn protocol_config(scheme: &str, m: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        target: "poly:1.1".to_string(),
        m,
        d: 1,
        scheme: scheme.to_string(),
        k: 100,
        n: 16384,
        batch: 32,
        lr: 0.01,
        optimizer: OptimizerKind::Adam,
        epochs: 3,
        seed,
        loss: LossKind::Mse,
        activation: Activation::Identity,
        dt: 1.0,
        freeze_bias: true,
        freeze_input: true,
        lambda_init: None,
        quad: None,
    }
}

fn c1_beta_grid() -> PerturbConfig {
    PerturbConfig {
        betas: BetaSpec::Spec("geo:1e-3:sqrt2:21".to_string()),
        samples_per_beta: 30,
        quad: QuadratureConfig::new(0.01, 100.0, 1.0).unwrap(),
        seed: 11,
        ..PerturbConfig::default()
    }
}

/// Criterion 7: direct-scheme training on the polynomial target drifts the
/// top eigenvalue toward the stability boundary, more so as m grows, and the
/// perturbation-sweep crossing radius shrinks with m.
#[test]
fn criterion_07_curse_of_memory_drift() {
    let start = Instant::now();
    let target = MemoryKernel::poly_decay(1.1).unwrap();
    let mut checkpoints = Vec::new();
    let mut max_eigs = Vec::new();
    for m in [4usize, 16, 64] {
        let out = train(&protocol_config("direct@cont", m, 7)).unwrap();
        assert_eq!(out.status, TrainStatus::Completed, "m={m}");
        let eig = out.params.max_eigenvalue().unwrap();
        assert!(eig < 0.0, "m={m}: eigenvalue {eig} crossed the boundary");
        max_eigs.push(eig);
        checkpoints.push(out.params);
    }
    println!("  final max eigenvalues by width: {max_eigs:?}");
    assert!(
        max_eigs[0] < max_eigs[1] && max_eigs[1] < max_eigs[2],
        "max eigenvalue not strictly increasing with m: {max_eigs:?}"
    );

    let report = sweep(&checkpoints, &target, &c1_beta_grid()).unwrap();
    let crossings: Vec<f64> = report
        .crossings
        .iter()
        .map(|(mp, mn, c)| c.unwrap_or_else(|| panic!("no crossing for pair ({mp},{mn})")))
        .collect();
    println!("  crossing radii (4,16) and (16,64): {crossings:?}");
    assert!(
        crossings[1] < crossings[0],
        "crossing radius not strictly decreasing with m: {crossings:?}"
    );
    pass(7, "curse-of-memory drift", start, Duration::from_secs(900));
}

/// Criterion 8: softplus-scheme linear models obey the stable-approximation
/// bound E(m,beta) <= E(m,0) + (sum |c_i|/|f(w_i)|)(e^beta - 1) on the full
/// beta grid with 30 samples per radius; zero violations.
#[test]
fn criterion_08_stable_approximation_bound() {
    let start = Instant::now();
    let target = MemoryKernel::poly_decay(1.1).unwrap();
    let cfg = c1_beta_grid();
    let betas = cfg.betas.resolve().unwrap();
    for m in [4usize, 16, 64] {
        let out = train(&protocol_config("softplus@cont", m, 7)).unwrap();
        assert_eq!(out.status, TrainStatus::Completed, "m={m}");
        let params = out.params;
        let lambdas = params.lambdas().unwrap();
        let mass: f64 = params
            .c
            .iter()
            .zip(&params.u)
            .zip(&lambdas)
            .map(|((c, u), l)| (c * u).abs() / l.abs())
            .sum();
        let e0 = ssmlab::estimate_perturbation_error(&params, &target, 0.0, &cfg).unwrap();
        let mut min_slack = f64::INFINITY;
        for &beta in &betas[1..] {
            let e = ssmlab::estimate_perturbation_error(&params, &target, beta, &cfg).unwrap();
            let bound = e0 + mass * beta.exp_m1();
            min_slack = min_slack.min(bound - e);
            assert!(
                e <= bound,
                "m={m} beta={beta}: E = {e} exceeds bound {bound} (E0 = {e0}, mass = {mass})"
            );
        }
        println!("  m={m}: E(0) = {e0:.4}, mass = {mass:.3}, min bound slack = {min_slack:.5}");
    }
    pass(8, "stable-approximation bound", start, Duration::from_secs(600));
}

/// Criterion 9: kernel-space training under the exponential scheme: the L1
/// distance to the polynomial target strictly decreases with width across
/// {4, 8, 16, 32}, averaged over 3 seeds. Per (width, seed) the step size is
/// selected from a fixed ladder by final training loss; the width trend is
/// asserted on the seed mean (adjacent large widths sit near the optimizer's
/// resolution, so single-seed curves may touch).
#[test]
fn criterion_09_width_improves_approximation() {
    let start = Instant::now();
    let target = MemoryKernel::poly_decay(1.1).unwrap();
    let quad = QuadratureConfig::new(0.02, 100.0, 1.0).unwrap();
    let widths = [4usize, 8, 16, 32];
    let seeds = [1u64, 2, 3];
    let mut means = vec![0.0f64; widths.len()];
    for &seed in &seeds {
        let mut row = Vec::new();
        for &m in &widths {
            let mut best_loss = f64::INFINITY;
            let mut best_d = f64::INFINITY;
            for lr in [2e-3, 1e-3, 5e-4] {
                let mut config = protocol_config("exp@cont", m, seed);
                config.loss = LossKind::L1Kernel;
                config.n = 32;
                config.batch = 32;
                config.epochs = 25_000;
                config.lr = lr;
                config.quad = Some(quad);
                let out = train(&config).unwrap();
                assert_eq!(out.status, TrainStatus::Completed);
                let final_loss = out.telemetry.last().unwrap().loss;
                if final_loss < best_loss {
                    best_loss = final_loss;
                    best_d = kernel_distance_to_target(&out.params, &target, &quad).unwrap();
                }
            }
            row.push(best_d);
        }
        println!("  seed {seed}: distances by width {row:?}");
        assert!(
            row[1..].iter().all(|&d| d < row[0]),
            "seed {seed}: the narrowest model is not strictly worst: {row:?}"
        );
        for (mean, d) in means.iter_mut().zip(&row) {
            *mean += d / seeds.len() as f64;
        }
    }
    println!("  seed-mean distances by width: {means:?}");
    for pair in means.windows(2) {
        assert!(
            pair[1] < pair[0],
            "mean distance not strictly decreasing with width: {means:?}"
        );
    }
    pass(9, "width improves approximation", start, Duration::from_secs(900));
}

/// Criterion 10: the closed-form constants of the polynomial target are
/// reproduced by the quadrature and convolution machinery.
#[test]
fn criterion_10_paper_constant_spot_checks() {
    let start = Instant::now();
    let poly = MemoryKernel::poly_decay(1.1).unwrap();

    // integral of (t+1)^{-1.1} over [0, inf) is 10
    let tail_tolerance = 1e-3;
    let quad = QuadratureConfig::new(0.005, 100.0, tail_tolerance).unwrap();
    let norm = kernel_l1_norm(&poly, &quad).unwrap();
    assert!(
        (norm - 10.0).abs() <= 2.0 * tail_tolerance,
        "kernel L1 norm {norm} vs 10 +- {}",
        2.0 * tail_tolerance
    );

    // step response 10 (1 - (t+1)^{-0.1}) at t = 9 through the full
    // convolution, and at t = 99 through the single-time evaluation
    let dt = 1e-3;
    let k_len = 9001;
    let x = vec![1.0; k_len];
    let y = apply_linear_functional(&poly, &x, dt).unwrap();
    let expected_9 = 2.056717652757185; // 10 (1 - 10^{-0.1})
    assert!(
        (y[k_len - 1] - expected_9).abs() <= 1e-3,
        "step response at t=9: {} vs {expected_9}",
        y[k_len - 1]
    );
    // the single-time path is the same discretization
    assert_eq!(y[k_len - 1], heaviside_response(&poly, 9.0, dt).unwrap());

    let r99 = heaviside_response(&poly, 99.0, 1e-4).unwrap();
    let expected_99 = 3.6904265551980675; // 10 (1 - 100^{-0.1})
    assert!(
        (r99 - expected_99).abs() <= 1e-3,
        "step response at t=99: {r99} vs {expected_99}"
    );
    println!("  norm {norm:.6}, step responses {:.6} / {:.6}", y[k_len - 1], r99);
    pass(10, "paper-constant spot checks", start, Duration::from_secs(60));
}

//! Synthetic-task dataset generation and the optimizer loop, with
//! gradient-over-weight telemetry.
//!
//! Targets are linear functionals with closed-form memory kernels; inputs
//! are i.i.d. standard Gaussian per time step; labels are the discretized
//! convolution. Comparisons across reparameterization schemes share the
//! effective initial eigenvalues: `lambda^0` is sampled once and the
//! per-scheme trainable weights start at `w_i = f^{-1}(lambda^0_i)`.

use crate::error::{Error, Result};
use crate::kernel::{
    kernel_l1_distance, Kernel, MemoryKernel, ModelKernel, QuadratureConfig, TimeMode,
};
use crate::reparam::ReparamScheme;
use crate::ssm::{backward, forward, Activation, Grads, SSMParams};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    /// Adam with beta1 = 0.9, beta2 = 0.999, eps = 1e-8.
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    #[serde(rename = "mse")]
    Mse,
    /// Direct L1 kernel-distance minimization (identity activation and
    /// frozen bias required; no data involved).
    #[serde(rename = "l1-kernel")]
    L1Kernel,
}

/// Full description of a training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Target kernel spec: `poly:<gamma>`, `expdecay:<rate>`, `csv:<path>`.
    pub target: String,
    /// Hidden width.
    pub m: usize,
    /// Input dimension (the synthetic pipeline is one-dimensional).
    #[serde(default = "default_d")]
    pub d: usize,
    /// Reparameterization spec, e.g. `best:a=1,b=0.5@disc`.
    pub scheme: String,
    /// Sequence length.
    #[serde(default = "default_k")]
    pub k: usize,
    /// Number of sequences.
    #[serde(default = "default_n")]
    pub n: usize,
    /// Mini-batch size; must divide `n`.
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerKind,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_loss")]
    pub loss: LossKind,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default = "default_dt")]
    pub dt: f64,
    /// Keep the bias pinned at zero.
    #[serde(default)]
    pub freeze_bias: bool,
    /// Keep the input weights pinned at their all-ones initialization.
    #[serde(default)]
    pub freeze_input: bool,
    /// Override for the initial-eigenvalue band (defaults to
    /// `[-0.99, -0.01]` in continuous time, `[0.01, 0.99]` in discrete time).
    #[serde(default)]
    pub lambda_init: Option<(f64, f64)>,
    /// Quadrature used by the `l1-kernel` loss.
    #[serde(default)]
    pub quad: Option<QuadratureConfig>,
}

fn default_d() -> usize {
    1
}
fn default_k() -> usize {
    100
}
fn default_n() -> usize {
    153_600
}
fn default_batch() -> usize {
    512
}
fn default_lr() -> f64 {
    0.01
}
fn default_optimizer() -> OptimizerKind {
    OptimizerKind::Adam
}
fn default_epochs() -> usize {
    1
}
fn default_loss() -> LossKind {
    LossKind::Mse
}
fn default_activation() -> Activation {
    Activation::Tanh
}
fn default_dt() -> f64 {
    1.0
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d != 1 {
            return Err(Error::config("the synthetic pipeline fixes d = 1".to_string()));
        }
        if self.m == 0 || self.k == 0 || self.n == 0 || self.batch == 0 {
            return Err(Error::config("m, k, n, batch must all be positive".to_string()));
        }
        if self.n % self.batch != 0 {
            return Err(Error::config(format!(
                "n = {} must be divisible by batch = {}",
                self.n, self.batch
            )));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::config(format!("learning rate must be >= 0, got {}", self.lr)));
        }
        if !(self.dt > 0.0) {
            return Err(Error::config(format!("dt must be positive, got {}", self.dt)));
        }
        let _ = self.parsed_scheme()?;
        let _ = self.parsed_target()?;
        if self.loss == LossKind::L1Kernel
            && (self.activation != Activation::Identity || !self.freeze_bias)
        {
            return Err(Error::config(
                "l1-kernel loss requires identity activation and freeze_bias = true".to_string(),
            ));
        }
        Ok(())
    }

    pub fn parsed_scheme(&self) -> Result<ReparamScheme> {
        ReparamScheme::parse(&self.scheme)
    }

    pub fn parsed_target(&self) -> Result<MemoryKernel> {
        MemoryKernel::parse(&self.target)
    }

    pub fn steps(&self) -> usize {
        self.epochs * (self.n / self.batch)
    }
}

/// Synthetic dataset: `n` rows of inputs and labels, each of length `k`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub n: usize,
    pub k: usize,
}

impl Dataset {
    pub fn row_x(&self, r: usize) -> &[f64] {
        &self.x[r * self.k..(r + 1) * self.k]
    }

    pub fn row_y(&self, r: usize) -> &[f64] {
        &self.y[r * self.k..(r + 1) * self.k]
    }

    /// Two-column-per-sample CSV: `seq,t,x,y` rows.
    pub fn write_csv(&self, path: &Path, dt: f64) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "seq,t,x,y")?;
        for r in 0..self.n {
            let (xs, ys) = (self.row_x(r), self.row_y(r));
            for i in 0..self.k {
                writeln!(out, "{r},{:?},{:?},{:?}", i as f64 * dt, xs[i], ys[i])?;
            }
        }
        Ok(())
    }
}

/// Draw `n` sequences of length `k` with i.i.d. standard-normal inputs and
/// labels from the discretized convolution against `target`. Deterministic
/// given the seed.
pub fn generate_dataset(
    target: &MemoryKernel,
    k: usize,
    n: usize,
    dt: f64,
    seed: u64,
) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = vec![0.0f64; n * k];
    for v in x.iter_mut() {
        *v = rng.sample(StandardNormal);
    }
    let table = target.sample_grid(k.saturating_sub(1), dt)?;
    let rows = crate::parallel::map_indices(n, |r| {
        let xs = &x[r * k..(r + 1) * k];
        let mut ys = vec![0.0f64; k];
        for (i, y) in ys.iter_mut().enumerate() {
            let mut acc = 0.0;
            for u in 0..i {
                acc += table[u] * xs[i - 1 - u];
            }
            *y = acc * dt;
        }
        ys
    });
    let mut y = Vec::with_capacity(n * k);
    for row in rows {
        y.extend_from_slice(&row);
    }
    Ok(Dataset { x, y, n, k })
}

/// One telemetry row per optimizer step. `gow_*` are the extrema of
/// `|gradient| / |weight|` over the recurrent weights (entries with
/// `|w_i| <= 1e-12` are excluded and counted); the `gow_all_*` variant ranges
/// over every trainable parameter. `grad_bound_c` is the step's surrogate
/// constant `max_i |c_i| * batch mass`, and `grad_bound_margin` is
/// `max_i |grad_i| / (grad_bound_c * G_f(w_i))` -- at most 1 whenever the
/// gradient-scale bound holds.
#[derive(Debug, Clone, PartialEq)]
pub struct TelemetryRecord {
    pub step: usize,
    pub loss: f64,
    pub gow_max: f64,
    pub gow_min: f64,
    pub gow_excluded: usize,
    pub gow_all_max: f64,
    pub gow_all_min: f64,
    pub max_eig: f64,
    pub weight_norm: f64,
    pub grad_bound_c: f64,
    pub grad_bound_margin: f64,
}

/// Append-ready CSV with the pinned column set.
pub fn write_telemetry_csv(records: &[TelemetryRecord], path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "step,loss,gow_max,gow_min,max_eig,weight_norm")?;
    for r in records {
        writeln!(
            out,
            "{},{:?},{:?},{:?},{:?},{:?}",
            r.step, r.loss, r.gow_max, r.gow_min, r.max_eig, r.weight_norm
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TrainStatus {
    Completed,
    /// Non-finite loss; telemetry up to this step is retained. An expected
    /// outcome for unstable schemes at large learning rates.
    Diverged { step: usize },
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: SSMParams,
    pub initial_params: SSMParams,
    pub telemetry: Vec<TelemetryRecord>,
    pub status: TrainStatus,
}

/// Closed-form inverse of a scheme, `w = f^{-1}(lambda)`: the equal-eigenvalue
/// initialization samples `lambda^0` once and pulls it back per scheme.
pub fn invert_scheme(scheme: &ReparamScheme, lambda: f64) -> Result<f64> {
    scheme.invert(lambda)
}

/// Sub-streams of the run seed: eigenvalue draw, readout draw, dataset draw.
/// The derivation is scheme-independent so equal seeds give equal effective
/// initializations across schemes.
pub fn sub_seeds(seed: u64) -> (u64, u64, u64) {
    let mut seeder = ChaCha8Rng::seed_from_u64(seed);
    (seeder.next_u64(), seeder.next_u64(), seeder.next_u64())
}

/// Initialize parameters for a config. The eigenvalue draw and the U/b/c
/// draws come from fixed sub-streams of the seed, so two configs differing
/// only in their scheme start from the same effective model.
pub fn init_params(config: &TrainConfig) -> Result<SSMParams> {
    let scheme = config.parsed_scheme()?;
    let (lambda_seed, c_seed, _) = sub_seeds(config.seed);

    let (lo, hi) = match config.lambda_init {
        Some(band) => band,
        None => match scheme.time_mode {
            TimeMode::Continuous => (-0.99, -0.01),
            TimeMode::Discrete => (0.01, 0.99),
        },
    };
    if !(lo < hi) {
        return Err(Error::config(format!("empty eigenvalue band [{lo}, {hi}]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(lambda_seed);
    let mut w = Vec::with_capacity(config.m);
    for _ in 0..config.m {
        let lambda = rng.gen_range(lo..hi);
        w.push(scheme.invert(lambda)?);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(c_seed);
    let scale = 1.0 / (config.m as f64).sqrt();
    let c: Vec<f64> =
        (0..config.m).map(|_| rng.sample::<f64, _>(StandardNormal) * scale).collect();

    let params = SSMParams {
        w,
        u: vec![1.0; config.m * config.d],
        b: vec![0.0; config.m],
        c,
        d: config.d,
        scheme,
        activation: config.activation,
        dt: config.dt,
    };
    params.validate()?;
    for (&wi, &li) in params.w.iter().zip(params.lambdas()?.iter()) {
        if scheme.time_mode == TimeMode::Discrete && li.abs() >= 1.0 {
            log::warn!(
                "eigenvalue f({wi}) = {li} sits on the unit circle; the mode is marginally stable"
            );
        }
    }
    Ok(params)
}

struct AdamState {
    m1: Vec<f64>,
    m2: Vec<f64>,
    t: usize,
}

impl AdamState {
    fn new(n: usize) -> Self {
        AdamState { m1: vec![0.0; n], m2: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, theta: &mut [f64], grad: &[f64], lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let bc1 = 1.0 - B1.powi(self.t as i32);
        let bc2 = 1.0 - B2.powi(self.t as i32);
        for i in 0..theta.len() {
            self.m1[i] = B1 * self.m1[i] + (1.0 - B1) * grad[i];
            self.m2[i] = B2 * self.m2[i] + (1.0 - B2) * grad[i] * grad[i];
            let mhat = self.m1[i] / bc1;
            let vhat = self.m2[i] / bc2;
            theta[i] -= lr * mhat / (vhat.sqrt() + EPS);
        }
    }
}

enum Optimizer {
    Sgd,
    Adam { w: AdamState, u: AdamState, b: AdamState, c: AdamState },
}

impl Optimizer {
    fn new(kind: OptimizerKind, m: usize, d: usize) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd,
            OptimizerKind::Adam => Optimizer::Adam {
                w: AdamState::new(m),
                u: AdamState::new(m * d),
                b: AdamState::new(m),
                c: AdamState::new(m),
            },
        }
    }

    fn step(&mut self, params: &mut SSMParams, grads: &Grads, lr: f64) {
        match self {
            Optimizer::Sgd => {
                let update = |theta: &mut [f64], g: &[f64]| {
                    for i in 0..theta.len() {
                        theta[i] -= lr * g[i];
                    }
                };
                update(&mut params.w, &grads.w);
                update(&mut params.u, &grads.u);
                update(&mut params.b, &grads.b);
                update(&mut params.c, &grads.c);
            }
            Optimizer::Adam { w, u, b, c } => {
                w.step(&mut params.w, &grads.w, lr);
                u.step(&mut params.u, &grads.u, lr);
                b.step(&mut params.b, &grads.b, lr);
                c.step(&mut params.c, &grads.c, lr);
            }
        }
    }
}

fn gow_extrema(grads: &[f64], weights: &[f64]) -> (f64, f64, usize) {
    let mut max = f64::NAN;
    let mut min = f64::NAN;
    let mut excluded = 0usize;
    for (g, w) in grads.iter().zip(weights) {
        if w.abs() <= 1e-12 {
            excluded += 1;
            continue;
        }
        let ratio = g.abs() / w.abs();
        if max.is_nan() || ratio > max {
            max = ratio;
        }
        if min.is_nan() || ratio < min {
            min = ratio;
        }
    }
    (max, min, excluded)
}

/// Mean-squared-error loss and gradient over one batch of rows, with the
/// per-step quantities needed by the telemetry bound:
/// mean absolute residual and the exact max of `|U_j x + b_j|` over the batch.
struct BatchEval {
    loss: f64,
    grads: Grads,
    mean_abs_residual: f64,
    drive_max: f64,
}

fn eval_batch(params: &SSMParams, data: &Dataset, rows: std::ops::Range<usize>) -> Result<BatchEval> {
    let b_len = rows.len();
    let k = data.k;
    let norm = 1.0 / (b_len * k) as f64;
    let row_ids: Vec<usize> = rows.collect();
    let per_row: Vec<Result<(Grads, f64, f64, f64, f64)>> =
        crate::parallel::map_indices(row_ids.len(), |idx| {
            let r = row_ids[idx];
            let xs = data.row_x(r);
            let ys = data.row_y(r);
            let fwd = forward(params, xs)?;
            let mut dl_dy = vec![0.0f64; k];
            let mut loss = 0.0;
            let mut abs_res = 0.0;
            for i in 0..k {
                let res = fwd.y[i] - ys[i];
                loss += res * res;
                abs_res += res.abs();
                dl_dy[i] = 2.0 * res * norm;
            }
            let grads = backward(params, xs, &fwd, &dl_dy)?;
            let x_min = xs.iter().cloned().fold(f64::INFINITY, f64::min);
            let x_max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            Ok((grads, loss, abs_res, x_min, x_max))
        });

    let mut grads = Grads {
        w: vec![0.0; params.m()],
        u: vec![0.0; params.m() * params.d],
        b: vec![0.0; params.m()],
        c: vec![0.0; params.m()],
    };
    let mut loss = 0.0;
    let mut abs_res = 0.0;
    let mut x_min = f64::INFINITY;
    let mut x_max = f64::NEG_INFINITY;
    for item in per_row {
        let (g, l, a, lo, hi) = item?;
        for (acc, v) in grads.w.iter_mut().zip(&g.w) {
            *acc += v;
        }
        for (acc, v) in grads.u.iter_mut().zip(&g.u) {
            *acc += v;
        }
        for (acc, v) in grads.b.iter_mut().zip(&g.b) {
            *acc += v;
        }
        for (acc, v) in grads.c.iter_mut().zip(&g.c) {
            *acc += v;
        }
        loss += l;
        abs_res += a;
        x_min = x_min.min(lo);
        x_max = x_max.max(hi);
    }
    // |U_j x + b_j| is affine in x, so its max over the batch is attained at
    // the batch extrema of x (d = 1)
    let mut drive_max = 0.0f64;
    for j in 0..params.m() {
        let a = (params.u[j] * x_min + params.b[j]).abs();
        let b = (params.u[j] * x_max + params.b[j]).abs();
        drive_max = drive_max.max(a).max(b);
    }
    Ok(BatchEval {
        loss: loss * norm,
        grads,
        mean_abs_residual: abs_res * norm,
        drive_max,
    })
}

/// L1 kernel-distance loss and its quadrature subgradient (identity
/// activation, zero bias). Continuous time integrates a trapezoid rule plus
/// analytic tails; discrete time sums unit steps.
fn eval_kernel_loss(
    params: &SSMParams,
    target: &MemoryKernel,
    quad: &QuadratureConfig,
) -> Result<(f64, Grads)> {
    let m = params.m();
    let model = params.model_kernel()?;
    let lambdas = &model.rates;
    let n = quad.steps();
    let (dt, is_discrete) = match params.time_mode() {
        TimeMode::Discrete => (1.0, true),
        TimeMode::Continuous => (quad.dt, false),
    };
    let n = if is_discrete { quad.horizon.round() as usize } else { n };
    let model_samples = model.sample_grid(n, dt)?;
    let target_samples = target.sample_grid(n, dt)?;

    let mut loss = 0.0;
    let mut grad_coeff = vec![0.0f64; m]; // d loss / d (c_i U_i)
    let mut grad_lambda = vec![0.0f64; m];
    let mut mode = vec![1.0f64; m]; // e^{lambda t} or lambda^k per node
    let factors: Vec<f64> = if is_discrete {
        lambdas.clone()
    } else {
        lambdas.iter().map(|&l| (l * dt).exp()).collect()
    };
    for node in 0..=n {
        let t = node as f64 * dt;
        let weight = if is_discrete {
            1.0
        } else if node == 0 || node == n {
            0.5 * dt
        } else {
            dt
        };
        let diff = model_samples[node] - target_samples[node];
        loss += weight * diff.abs();
        let sgn = if diff > 0.0 {
            1.0
        } else if diff < 0.0 {
            -1.0
        } else {
            0.0
        };
        for i in 0..m {
            grad_coeff[i] += weight * sgn * mode[i];
            let dmode_dlambda = if is_discrete {
                // d lambda^k / d lambda = k lambda^{k-1}
                if node == 0 {
                    0.0
                } else if lambdas[i] == 0.0 {
                    if node == 1 {
                        1.0
                    } else {
                        0.0
                    }
                } else {
                    node as f64 * mode[i] / lambdas[i]
                }
            } else {
                t * mode[i]
            };
            grad_lambda[i] += weight * sgn * model.coeffs[i] * dmode_dlambda;
            mode[i] *= factors[i];
        }
    }
    // analytic tails
    let tail_model = model.signed_tail(quad.horizon)?;
    let tail_target = target.signed_tail(quad.horizon)?;
    let tail_diff = tail_model - tail_target;
    loss += tail_diff.abs();
    let sgn = if tail_diff > 0.0 {
        1.0
    } else if tail_diff < 0.0 {
        -1.0
    } else {
        0.0
    };
    let horizon = quad.horizon;
    for i in 0..m {
        let l = lambdas[i];
        if is_discrete {
            let k0 = horizon.round() as i32 + 1;
            let pow = l.powi(k0);
            grad_coeff[i] += sgn * pow / (1.0 - l);
            grad_lambda[i] += sgn
                * model.coeffs[i]
                * (k0 as f64 * l.powi(k0 - 1) * (1.0 - l) + pow)
                / ((1.0 - l) * (1.0 - l));
        } else {
            let e = (l * horizon).exp();
            grad_coeff[i] += sgn * e / -l;
            grad_lambda[i] += sgn * model.coeffs[i] * e * (horizon / -l + 1.0 / (l * l));
        }
    }

    let mut grads = Grads {
        w: vec![0.0; m],
        u: vec![0.0; m],
        b: vec![0.0; m],
        c: vec![0.0; m],
    };
    for i in 0..m {
        // coefficient of the kernel is c_i U_i
        grads.c[i] = grad_coeff[i] * params.u[i];
        grads.u[i] = grad_coeff[i] * params.c[i];
        grads.w[i] = grad_lambda[i] * params.scheme.derivative(params.w[i])?;
    }
    Ok((loss, grads))
}

/// Run mini-batch optimization per the config. Batches sweep the dataset in
/// order (no shuffling), so a fixed seed makes the run bit-reproducible.
pub fn train(config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let target = config.parsed_target()?;
    let scheme = config.parsed_scheme()?;
    let mut params = init_params(config)?;
    let initial_params = params.clone();
    let quad = config.quad.unwrap_or_default();

    let data = match config.loss {
        LossKind::Mse => {
            let (_, _, data_seed) = sub_seeds(config.seed);
            Some(generate_dataset(&target, config.k, config.n, config.dt, data_seed)?)
        }
        LossKind::L1Kernel => None,
    };

    let mut optimizer = Optimizer::new(config.optimizer, config.m, config.d);
    let mut telemetry = Vec::with_capacity(config.steps());
    let steps_per_epoch = config.n / config.batch;

    for step in 0..config.steps() {
        let (loss, mut grads, mass) = match (&data, config.loss) {
            (Some(data), LossKind::Mse) => {
                let batch_idx = step % steps_per_epoch;
                let rows = batch_idx * config.batch..(batch_idx + 1) * config.batch;
                match eval_batch(&params, data, rows) {
                    Ok(ev) => {
                        let mass =
                            2.0 * params.activation.lipschitz() * ev.mean_abs_residual * ev.drive_max;
                        (ev.loss, ev.grads, mass)
                    }
                    Err(Error::Numeric { .. }) => {
                        telemetry.push(divergence_record(step));
                        return Ok(TrainOutcome {
                            params,
                            initial_params,
                            telemetry,
                            status: TrainStatus::Diverged { step },
                        });
                    }
                    Err(e) => return Err(e),
                }
            }
            (None, LossKind::L1Kernel) => {
                let (loss, grads) = eval_kernel_loss(&params, &target, &quad)?;
                (loss, grads, f64::NAN)
            }
            _ => unreachable!(),
        };

        if !loss.is_finite() {
            telemetry.push(divergence_record(step));
            return Ok(TrainOutcome {
                params,
                initial_params,
                telemetry,
                status: TrainStatus::Diverged { step },
            });
        }

        if config.freeze_bias {
            grads.b.iter_mut().for_each(|g| *g = 0.0);
        }
        if config.freeze_input {
            grads.u.iter_mut().for_each(|g| *g = 0.0);
        }

        telemetry.push(make_record(step, loss, &params, &grads, &scheme, mass));
        optimizer.step(&mut params, &grads, config.lr);
    }

    Ok(TrainOutcome { params, initial_params, telemetry, status: TrainStatus::Completed })
}

fn divergence_record(step: usize) -> TelemetryRecord {
    TelemetryRecord {
        step,
        loss: f64::NAN,
        gow_max: f64::NAN,
        gow_min: f64::NAN,
        gow_excluded: 0,
        gow_all_max: f64::NAN,
        gow_all_min: f64::NAN,
        max_eig: f64::NAN,
        weight_norm: f64::NAN,
        grad_bound_c: f64::NAN,
        grad_bound_margin: f64::NAN,
    }
}

fn make_record(
    step: usize,
    loss: f64,
    params: &SSMParams,
    grads: &Grads,
    scheme: &ReparamScheme,
    mass: f64,
) -> TelemetryRecord {
    let (gow_max, gow_min, gow_excluded) = gow_extrema(&grads.w, &params.w);
    let all_g: Vec<f64> = grads
        .w
        .iter()
        .chain(&grads.u)
        .chain(&grads.b)
        .chain(&grads.c)
        .cloned()
        .collect();
    let all_w: Vec<f64> = params
        .w
        .iter()
        .chain(&params.u)
        .chain(&params.b)
        .chain(&params.c)
        .cloned()
        .collect();
    let (gow_all_max, gow_all_min, _) = gow_extrema(&all_g, &all_w);

    let c_max = params.c.iter().map(|v| v.abs()).fold(0.0f64, f64::max);
    let grad_bound_c = c_max * mass;
    let mut margin = 0.0f64;
    for (i, &g) in grads.w.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        match scheme.gradient_scale(params.w[i]) {
            Ok(scale) if scale > 0.0 => {
                margin = margin.max(g.abs() / (grad_bound_c * scale));
            }
            _ => {
                margin = f64::INFINITY;
            }
        }
    }

    TelemetryRecord {
        step,
        loss,
        gow_max,
        gow_min,
        gow_excluded,
        gow_all_max,
        gow_all_min,
        max_eig: params.max_eigenvalue().unwrap_or(f64::NAN),
        weight_norm: params.weight_norm().unwrap_or(f64::NAN),
        grad_bound_c,
        grad_bound_margin: margin,
    }
}

/// Mean-squared error of `params` over an entire dataset (no gradient), for
/// equal-initialization checks and quick evaluations.
pub fn evaluate_mse(params: &SSMParams, data: &Dataset) -> Result<f64> {
    let losses = crate::parallel::map_indices(data.n, |r| {
        let fwd = forward(params, data.row_x(r))?;
        let mut loss = 0.0;
        for (a, b) in fwd.y.iter().zip(data.row_y(r)) {
            loss += (a - b) * (a - b);
        }
        Ok::<f64, Error>(loss)
    });
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / (data.n * data.k) as f64)
}

/// L1 kernel distance between a trained model and its target.
pub fn kernel_distance_to_target(
    params: &SSMParams,
    target: &MemoryKernel,
    quad: &QuadratureConfig,
) -> Result<f64> {
    let model = params.model_kernel()?;
    match params.time_mode() {
        TimeMode::Continuous => kernel_l1_distance(&model, target, quad),
        TimeMode::Discrete => discrete_kernel_distance(&model, target, quad),
    }
}

/// Discrete-time analogue of the kernel L1 distance: a unit-step sum over
/// `[0, horizon]` plus the analytic tails (the target's discrete tail is the
/// integral estimate of its sum; the gap is below one sample value).
pub fn discrete_kernel_distance(
    model: &ModelKernel,
    target: &MemoryKernel,
    quad: &QuadratureConfig,
) -> Result<f64> {
    if model.time_mode != TimeMode::Discrete {
        return Err(Error::contract("discrete_kernel_distance wants a discrete model".to_string()));
    }
    let n = quad.horizon.round() as usize;
    let ms = model.sample_grid(n, 1.0)?;
    let ts = target.sample_grid(n, 1.0)?;
    let mut loss = 0.0;
    for i in 0..=n {
        loss += (ms[i] - ts[i]).abs();
    }
    loss += (model.signed_tail(n as f64)? - target.signed_tail(n as f64)?).abs();
    Ok(loss)
}

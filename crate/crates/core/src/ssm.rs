//! The diagonal state-space layer.
//!
//! Dynamics: `h_{k+1} = lambda o h_k + U x_k + b`, readout
//! `y_k = c^T sigma(h_k)` with `h_0 = 0`, so `y_k` is read before `x_k` is
//! consumed. Continuous-time parameters are integrated by exact per-step
//! exponential integration, `h <- e^{lambda dt} h + (e^{lambda dt}-1)/lambda (U x + b)`,
//! which preserves the stability region exactly. The recurrent eigenvalues
//! come from a reparameterization scheme, `lambda_i = f(w_i)`, and gradients
//! flow through `f` by the chain rule.

use crate::error::{Error, Result};
use crate::kernel::{ModelKernel, TimeMode};
use crate::reparam::{sigmoid, ReparamScheme};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Pointwise readout nonlinearities. All choices vanish at the origin
/// (the sigmoid is shifted by 1/2 to do so) and are strictly increasing and
/// continuously differentiable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Tanh,
    Sigmoid,
    Softsign,
}

impl Activation {
    pub fn value(&self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Tanh => z.tanh(),
            Activation::Sigmoid => sigmoid(z) - 0.5,
            Activation::Softsign => z / (1.0 + z.abs()),
        }
    }

    pub fn deriv(&self, z: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => {
                let s = 1.0 / z.cosh();
                s * s
            }
            Activation::Sigmoid => {
                let s = sigmoid(z);
                s * (1.0 - s)
            }
            Activation::Softsign => {
                let d = 1.0 + z.abs();
                1.0 / (d * d)
            }
        }
    }

    /// Lipschitz constant `L_0`.
    pub fn lipschitz(&self) -> f64 {
        match self {
            Activation::Sigmoid => 0.25,
            _ => 1.0,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
            Activation::Softsign => "softsign",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "identity" => Ok(Activation::Identity),
            "tanh" => Ok(Activation::Tanh),
            "sigmoid" => Ok(Activation::Sigmoid),
            "softsign" => Ok(Activation::Softsign),
            other => Err(Error::config(format!("unknown activation `{other}`"))),
        }
    }
}

/// Trainable parameters of a width-`m` diagonal state-space layer with
/// `d`-dimensional inputs. `w` is the pre-reparameterization recurrent
/// weight; the effective eigenvalues are `lambda_i = f(w_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SSMParams {
    pub w: Vec<f64>,
    /// Input matrix, row-major `m x d`.
    pub u: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub d: usize,
    pub scheme: ReparamScheme,
    pub activation: Activation,
    pub dt: f64,
}

/// Forward-pass record: outputs and the full hidden trajectory
/// (`(K+1) x m`, row 0 is the zero initial state), kept for the backward
/// pass and for hidden-boundedness checks.
#[derive(Debug, Clone)]
pub struct Forward {
    pub y: Vec<f64>,
    pub h: Vec<f64>,
    pub m: usize,
}

/// Parameter gradients, same shapes as the corresponding fields.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub w: Vec<f64>,
    pub u: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
}

impl Grads {
    fn zeros(m: usize, d: usize) -> Self {
        Grads { w: vec![0.0; m], u: vec![0.0; m * d], b: vec![0.0; m], c: vec![0.0; m] }
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

impl SSMParams {
    pub fn m(&self) -> usize {
        self.w.len()
    }

    pub fn time_mode(&self) -> TimeMode {
        self.scheme.time_mode
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.m();
        if m == 0 {
            return Err(Error::contract("empty parameter vectors".to_string()));
        }
        if self.u.len() != m * self.d || self.b.len() != m || self.c.len() != m || self.d == 0 {
            return Err(Error::contract(format!(
                "inconsistent shapes: m={m}, d={}, |U|={}, |b|={}, |c|={}",
                self.d,
                self.u.len(),
                self.b.len(),
                self.c.len()
            )));
        }
        if !(self.dt > 0.0) {
            return Err(Error::config(format!("dt must be positive, got {}", self.dt)));
        }
        for v in self.w.iter().chain(&self.u).chain(&self.b).chain(&self.c) {
            if !v.is_finite() {
                return Err(Error::contract("non-finite parameter entry".to_string()));
            }
        }
        for &wi in &self.w {
            let l = self.scheme.apply(wi)?;
            match self.time_mode() {
                TimeMode::Continuous => {
                    if !(l < 0.0) {
                        return Err(Error::domain(format!(
                            "continuous-time eigenvalue f({wi}) = {l} is not negative"
                        )));
                    }
                }
                TimeMode::Discrete => {
                    if l.abs() > 1.0 {
                        return Err(Error::domain(format!(
                            "discrete-time eigenvalue f({wi}) = {l} leaves [-1, 1]"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Effective eigenvalues `lambda_i = f(w_i)`.
    pub fn lambdas(&self) -> Result<Vec<f64>> {
        self.w.iter().map(|&wi| self.scheme.apply(wi)).collect()
    }

    /// `max(|lambda|_2, |U|_2, |b|_2, |c|_2)` with flattened Euclidean norms.
    pub fn weight_norm(&self) -> Result<f64> {
        let lam = self.lambdas()?;
        Ok(l2(&lam).max(l2(&self.u)).max(l2(&self.b)).max(l2(&self.c)))
    }

    /// `max_i lambda_i` (continuous) or `max_i |lambda_i|` (discrete): the
    /// quantity that drifts to the stability boundary under the curse of
    /// memory.
    pub fn max_eigenvalue(&self) -> Result<f64> {
        let lam = self.lambdas()?;
        Ok(match self.time_mode() {
            TimeMode::Continuous => lam.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            TimeMode::Discrete => lam.iter().map(|l| l.abs()).fold(f64::NEG_INFINITY, f64::max),
        })
    }

    /// Whether the readout is exactly linear (identity activation, zero bias),
    /// i.e. the layer computes a linear functional of its input.
    pub fn is_linear_readout(&self) -> bool {
        self.activation == Activation::Identity && self.b.iter().all(|&v| v == 0.0)
    }

    /// The kernel of the underlying (continuous- or discrete-time) linear
    /// functional: coefficients `c_i U_i`, rates `lambda_i`. Requires `d = 1`.
    pub fn model_kernel(&self) -> Result<ModelKernel> {
        if self.d != 1 {
            return Err(Error::contract("model kernel requires d = 1".to_string()));
        }
        let coeffs: Vec<f64> = self.c.iter().zip(&self.u).map(|(&c, &u)| c * u).collect();
        ModelKernel::new(coeffs, self.lambdas()?, self.time_mode())
    }

    /// The kernel the *discretized* layer realizes exactly: in discrete time
    /// this is [`SSMParams::model_kernel`]; in continuous time the exact
    /// exponential integrator scales mode `i` by `(e^{lambda_i dt}-1)/(lambda_i dt)`.
    /// With identity activation and zero bias,
    /// `apply_linear_functional(effective_kernel, x, dt)` equals `forward(x).y`.
    pub fn effective_kernel(&self) -> Result<ModelKernel> {
        let base = self.model_kernel()?;
        match self.time_mode() {
            TimeMode::Discrete => Ok(base),
            TimeMode::Continuous => {
                let coeffs = base
                    .coeffs
                    .iter()
                    .zip(&base.rates)
                    .map(|(&c, &l)| c * (l * self.dt).exp_m1() / (l * self.dt))
                    .collect();
                ModelKernel::new(coeffs, base.rates, TimeMode::Continuous)
            }
        }
    }

    /// Per-step transition factors: `h <- a o h + g o (U x + b)`.
    fn step_factors(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let lam = self.lambdas()?;
        match self.time_mode() {
            TimeMode::Discrete => {
                let m = lam.len();
                Ok((lam, vec![1.0; m]))
            }
            TimeMode::Continuous => {
                let a: Vec<f64> = lam.iter().map(|&l| (l * self.dt).exp()).collect();
                let g: Vec<f64> = lam.iter().map(|&l| (l * self.dt).exp_m1() / l).collect();
                Ok((a, g))
            }
        }
    }

    /// Derivatives of the transition factors with respect to `lambda`.
    fn step_factor_derivs(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let lam = self.lambdas()?;
        match self.time_mode() {
            TimeMode::Discrete => {
                let m = lam.len();
                Ok((vec![1.0; m], vec![0.0; m]))
            }
            TimeMode::Continuous => {
                let dt = self.dt;
                let da: Vec<f64> = lam.iter().map(|&l| dt * (l * dt).exp()).collect();
                let dg: Vec<f64> = lam
                    .iter()
                    .map(|&l| {
                        let z = l * dt;
                        // (z e^z - e^z + 1) / z^2, series below the cancellation regime
                        let psi = if z.abs() < 1e-3 {
                            0.5 + z / 3.0 + z * z / 8.0 + z * z * z / 30.0
                        } else {
                            ((z - 1.0) * z.exp() + 1.0) / (z * z)
                        };
                        dt * dt * psi
                    })
                    .collect();
                Ok((da, dg))
            }
        }
    }

    pub fn seq_len(&self, x: &[f64]) -> Result<usize> {
        if x.len() % self.d != 0 {
            return Err(Error::contract(format!(
                "input length {} is not a multiple of d = {}",
                x.len(),
                self.d
            )));
        }
        Ok(x.len() / self.d)
    }
}

/// Sequential forward pass. `x` is row-major `K x d`.
pub fn forward(params: &SSMParams, x: &[f64]) -> Result<Forward> {
    let m = params.m();
    let d = params.d;
    let k_len = params.seq_len(x)?;
    let (a, g) = params.step_factors()?;
    let act = params.activation;

    let mut h = vec![0.0f64; (k_len + 1) * m];
    let mut y = vec![0.0f64; k_len];
    for k in 0..k_len {
        let (prev, next) = h[k * m..(k + 2) * m].split_at_mut(m);
        let mut out = 0.0;
        for i in 0..m {
            out += params.c[i] * act.value(prev[i]);
        }
        y[k] = out;
        let xk = &x[k * d..(k + 1) * d];
        let mut check = 0.0;
        for i in 0..m {
            let mut drive = params.b[i];
            let row = &params.u[i * d..(i + 1) * d];
            for (uij, xj) in row.iter().zip(xk) {
                drive += uij * xj;
            }
            let v = a[i] * prev[i] + g[i] * drive;
            next[i] = v;
            check += v;
        }
        if !check.is_finite() {
            return Err(Error::Numeric {
                step: k,
                message: "hidden state overflowed (unstable eigenvalues?)".to_string(),
            });
        }
    }
    Ok(Forward { y, h, m })
}

const SCAN_BLOCK: usize = 1024;

/// Forward pass via an associative prefix scan over per-step elements
/// `(a, U x_k + b)` with combiner `(a1,u1) (x) (a2,u2) = (a1 a2, a2 u1 + u2)`.
/// The scan is blocked (scan blocks, scan the block aggregates, then apply
/// the prefixes), and the block structure is fixed, so the result is
/// bit-identical for every worker count. Agreement with [`forward`] is up to
/// floating-point reassociation only.
pub fn forward_scan(params: &SSMParams, x: &[f64]) -> Result<Forward> {
    use rayon::prelude::*;

    let m = params.m();
    let d = params.d;
    let k_len = params.seq_len(x)?;
    let (a, g) = params.step_factors()?;
    let act = params.activation;

    if k_len == 0 {
        return Ok(Forward { y: Vec::new(), h: vec![0.0; m], m });
    }

    // per-step pairs, scanned in place
    let mut pa = vec![0.0f64; k_len * m];
    let mut pu = vec![0.0f64; k_len * m];
    pa.par_chunks_mut(SCAN_BLOCK * m)
        .zip(pu.par_chunks_mut(SCAN_BLOCK * m))
        .enumerate()
        .for_each(|(blk, (ba, bu))| {
            let k0 = blk * SCAN_BLOCK;
            let rows = ba.len() / m;
            for r in 0..rows {
                let k = k0 + r;
                let xk = &x[k * d..(k + 1) * d];
                for i in 0..m {
                    let mut drive = params.b[i];
                    let row = &params.u[i * d..(i + 1) * d];
                    for (uij, xj) in row.iter().zip(xk) {
                        drive += uij * xj;
                    }
                    ba[r * m + i] = a[i];
                    bu[r * m + i] = g[i] * drive;
                }
            }
            // inclusive scan inside the block
            for r in 1..rows {
                for i in 0..m {
                    let prev_a = ba[(r - 1) * m + i];
                    let prev_u = bu[(r - 1) * m + i];
                    let cur_a = ba[r * m + i];
                    let cur_u = bu[r * m + i];
                    ba[r * m + i] = prev_a * cur_a;
                    bu[r * m + i] = cur_a * prev_u + cur_u;
                }
            }
        });

    // exclusive scan of block aggregates (sequential, fixed order)
    let nblocks = k_len.div_ceil(SCAN_BLOCK);
    let mut prefix_a = vec![1.0f64; nblocks * m];
    let mut prefix_u = vec![0.0f64; nblocks * m];
    for blk in 1..nblocks {
        let last = (blk * SCAN_BLOCK - 1).min(k_len - 1);
        for i in 0..m {
            let agg_a = pa[last * m + i];
            let agg_u = pu[last * m + i];
            let pre_a = prefix_a[(blk - 1) * m + i];
            let pre_u = prefix_u[(blk - 1) * m + i];
            prefix_a[blk * m + i] = pre_a * agg_a;
            prefix_u[blk * m + i] = agg_a * pre_u + agg_u;
        }
    }

    // apply prefixes; h_{k+1} is the u-component (h_0 = 0 kills the a-part)
    pa.par_chunks_mut(SCAN_BLOCK * m)
        .zip(pu.par_chunks_mut(SCAN_BLOCK * m))
        .enumerate()
        .for_each(|(blk, (ba, bu))| {
            let rows = ba.len() / m;
            for r in 0..rows {
                for i in 0..m {
                    let pre_u = prefix_u[blk * m + i];
                    bu[r * m + i] += ba[r * m + i] * pre_u;
                }
            }
        });

    let mut h = vec![0.0f64; (k_len + 1) * m];
    h[m..].copy_from_slice(&pu);
    for (k, row) in h.chunks_exact(m).enumerate().skip(1) {
        if !row.iter().sum::<f64>().is_finite() {
            return Err(Error::Numeric {
                step: k - 1,
                message: "hidden state overflowed (unstable eigenvalues?)".to_string(),
            });
        }
    }

    let y = crate::parallel::map_indices(k_len, |k| {
        let row = &h[k * m..(k + 1) * m];
        let mut out = 0.0;
        for i in 0..m {
            out += params.c[i] * act.value(row[i]);
        }
        out
    });
    Ok(Forward { y, h, m })
}

/// Exact reverse-mode gradients of a scalar loss with per-output derivatives
/// `dl_dy`, using the stored forward trajectory. The adjoint recursion is
/// `hb_k = a o hb_{k+1} + sigma'(h_k) o c * dl_dy[k]`, and the recurrent
/// weight gradient flows through the reparameterization:
/// `dL/dw_i = f'(w_i) dL/dlambda_i`.
pub fn backward(params: &SSMParams, x: &[f64], fwd: &Forward, dl_dy: &[f64]) -> Result<Grads> {
    let m = params.m();
    let d = params.d;
    let k_len = params.seq_len(x)?;
    if dl_dy.len() != k_len || fwd.y.len() != k_len || fwd.h.len() != (k_len + 1) * m || fwd.m != m {
        return Err(Error::contract(format!(
            "backward shape mismatch: K={k_len}, |dl_dy|={}, |y|={}, |h|={}",
            dl_dy.len(),
            fwd.y.len(),
            fwd.h.len()
        )));
    }
    let (a, g) = params.step_factors()?;
    let (da, dg) = params.step_factor_derivs()?;
    let act = params.activation;

    let mut grads = Grads::zeros(m, d);
    let mut grad_lambda = vec![0.0f64; m];
    let mut hb = vec![0.0f64; m]; // adjoint of h_{k+1}, starts at zero for k = K-1... K
    for k in (0..k_len).rev() {
        let h_k = &fwd.h[k * m..(k + 1) * m];
        let xk = &x[k * d..(k + 1) * d];
        // transition h_{k+1} = a o h_k + g o (U x_k + b), adjoint hb = hb_{k+1}
        for i in 0..m {
            let mut drive = params.b[i];
            let row = &params.u[i * d..(i + 1) * d];
            for (uij, xj) in row.iter().zip(xk) {
                drive += uij * xj;
            }
            grad_lambda[i] += hb[i] * (da[i] * h_k[i] + dg[i] * drive);
            let gb = g[i] * hb[i];
            for (j, xj) in xk.iter().enumerate() {
                grads.u[i * d + j] += gb * xj;
            }
            grads.b[i] += gb;
        }
        // readout y_k = c^T sigma(h_k)
        let dy = dl_dy[k];
        for i in 0..m {
            grads.c[i] += act.value(h_k[i]) * dy;
            hb[i] = a[i] * hb[i] + act.deriv(h_k[i]) * params.c[i] * dy;
        }
    }
    for i in 0..m {
        grads.w[i] = params.scheme.derivative(params.w[i])? * grad_lambda[i];
    }
    if params.time_mode() == TimeMode::Discrete {
        // dg = 0 in discrete time; grad_lambda collapses to sum hb_{k+1} h_k
        debug_assert!(dg.iter().all(|&v| v == 0.0));
    }
    Ok(grads)
}

/// Checkpoint file layout: a flat JSON object with explicit dimensions.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    scheme: String,
    time_mode: String,
    dt: f64,
    activation: String,
    m: usize,
    d: usize,
    w: Vec<f64>,
    #[serde(rename = "U")]
    u: Vec<Vec<f64>>,
    b: Vec<f64>,
    c: Vec<f64>,
}

pub fn save_checkpoint(params: &SSMParams, path: &Path) -> Result<()> {
    let m = params.m();
    let mode = match params.time_mode() {
        TimeMode::Continuous => "continuous",
        TimeMode::Discrete => "discrete",
    };
    let family = params.scheme.spec_string();
    let family = family.rsplit_once('@').map(|(l, _)| l.to_string()).unwrap_or(family);
    let ckpt = Checkpoint {
        scheme: family,
        time_mode: mode.to_string(),
        dt: params.dt,
        activation: params.activation.name().to_string(),
        m,
        d: params.d,
        w: params.w.clone(),
        u: (0..m).map(|i| params.u[i * params.d..(i + 1) * params.d].to_vec()).collect(),
        b: params.b.clone(),
        c: params.c.clone(),
    };
    let json = serde_json::to_string_pretty(&ckpt)?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<SSMParams> {
    let text = std::fs::read_to_string(path)?;
    let ckpt: Checkpoint = serde_json::from_str(&text)?;
    let mode = match ckpt.time_mode.as_str() {
        "continuous" => "cont",
        "discrete" => "disc",
        other => return Err(Error::config(format!("unknown time_mode `{other}`"))),
    };
    let scheme = ReparamScheme::parse(&format!("{}@{}", ckpt.scheme, mode))?;
    if ckpt.w.len() != ckpt.m || ckpt.u.len() != ckpt.m {
        return Err(Error::contract("checkpoint dimensions disagree with m".to_string()));
    }
    let mut u = Vec::with_capacity(ckpt.m * ckpt.d);
    for row in &ckpt.u {
        if row.len() != ckpt.d {
            return Err(Error::contract("checkpoint U row width disagrees with d".to_string()));
        }
        u.extend_from_slice(row);
    }
    let params = SSMParams {
        w: ckpt.w,
        u,
        b: ckpt.b,
        c: ckpt.c,
        d: ckpt.d,
        scheme,
        activation: Activation::parse(&ckpt.activation)?,
        dt: ckpt.dt,
    };
    params.validate()?;
    Ok(params)
}

//! Memory kernels and the linear-functional view of sequence models.
//!
//! A causal, time-homogeneous linear functional is convolution against a
//! kernel `rho`: `y_t = integral rho(t - s) x_s ds`. Targets are closed-form
//! decays (polynomial or exponential) or tabulated samples; models are sums
//! of exponentials (continuous time) or geometric sequences (discrete time).
//! L1 norms and distances between kernels are the approximation and
//! perturbation error metrics used throughout the crate.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

/// Continuous-time dynamics (eigenvalues must be negative) versus discrete
/// recurrences (eigenvalues must lie in `[-1, 1]`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimeMode {
    Continuous,
    Discrete,
}

/// Composite-trapezoid configuration for semi-infinite kernel integrals:
/// quadrature on `[0, horizon]` plus analytic tail terms beyond it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadratureConfig {
    pub dt: f64,
    pub horizon: f64,
    /// Cap on the acceptable uncertainty of the analytic tail handling.
    pub tail_tolerance: f64,
}

impl QuadratureConfig {
    pub fn new(dt: f64, horizon: f64, tail_tolerance: f64) -> Result<Self> {
        if !(dt > 0.0) || !(horizon > 0.0) || !(tail_tolerance > 0.0) {
            return Err(Error::config(format!(
                "quadrature requires dt, horizon, tail_tolerance > 0 (got {dt}, {horizon}, {tail_tolerance})"
            )));
        }
        let steps = horizon / dt;
        if (steps - steps.round()).abs() > 1e-6 * steps.max(1.0) || steps.round() < 1.0 {
            return Err(Error::config(format!(
                "horizon/dt must be a positive integer, got {horizon}/{dt}"
            )));
        }
        Ok(QuadratureConfig { dt, horizon, tail_tolerance })
    }

    pub fn steps(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }
}

impl Default for QuadratureConfig {
    fn default() -> Self {
        QuadratureConfig { dt: 0.01, horizon: 100.0, tail_tolerance: 1e-3 }
    }
}

/// Anything evaluable as a scalar kernel of nonnegative time, with analytic
/// handling of the mass beyond a finite horizon.
pub trait Kernel {
    /// Kernel value at time `t >= 0`.
    fn eval(&self, t: f64) -> Result<f64>;

    /// Exact signed integral of the kernel over `[t0, inf)` where available.
    fn signed_tail(&self, t0: f64) -> Result<f64>;

    /// Upper bound on the gap between `|signed_tail|` and the integral of the
    /// absolute kernel over `[t0, inf)` (zero for single-signed tails).
    fn tail_uncertainty(&self, t0: f64) -> Result<f64>;

    /// Samples at `0, dt, ..., n*dt` (n+1 values).
    fn sample_grid(&self, n: usize, dt: f64) -> Result<Vec<f64>> {
        (0..=n).map(|i| self.eval(i as f64 * dt)).collect()
    }

    /// Downcast hook for paths that need a closed-form target kind.
    fn as_memory(&self) -> Option<&MemoryKernel> {
        None
    }
}

/// A target memory kernel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum MemoryKernel {
    /// `rho(t) = (t + 1)^{-gamma}` with `gamma > 1`.
    PolyDecay { gamma: f64 },
    /// `rho(t) = e^{-rate t}` with `rate > 0`.
    ExpDecay { rate: f64 },
    /// Linear interpolation of `(t, rho)` samples on a strictly increasing
    /// grid starting at 0. Zero beyond the last sample.
    Tabulated { ts: Vec<f64>, values: Vec<f64> },
}

impl MemoryKernel {
    pub fn poly_decay(gamma: f64) -> Result<Self> {
        if !(gamma > 1.0) {
            return Err(Error::config(format!("polynomial decay requires gamma > 1, got {gamma}")));
        }
        Ok(MemoryKernel::PolyDecay { gamma })
    }

    pub fn exp_decay(rate: f64) -> Result<Self> {
        if !(rate > 0.0) {
            return Err(Error::config(format!("exponential decay requires rate > 0, got {rate}")));
        }
        Ok(MemoryKernel::ExpDecay { rate })
    }

    pub fn tabulated(ts: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if ts.len() != values.len() || ts.len() < 2 {
            return Err(Error::config("tabulated kernel needs >= 2 matching samples".to_string()));
        }
        if ts[0] != 0.0 {
            return Err(Error::config("tabulated grid must start at t = 0".to_string()));
        }
        for pair in ts.windows(2) {
            if !(pair[1] > pair[0]) {
                return Err(Error::config("tabulated grid must be strictly increasing".to_string()));
            }
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("tabulated values must be finite".to_string()));
        }
        Ok(MemoryKernel::Tabulated { ts, values })
    }

    /// Parse a target spec string: `poly:<gamma>`, `expdecay:<rate>`, or
    /// `csv:<path>`.
    pub fn parse(spec: &str) -> Result<Self> {
        let (kind, arg) = spec
            .split_once(':')
            .ok_or_else(|| Error::config(format!("malformed kernel spec `{spec}`")))?;
        match kind {
            "poly" => {
                let gamma: f64 =
                    arg.parse().map_err(|_| Error::config(format!("invalid gamma in `{spec}`")))?;
                Self::poly_decay(gamma)
            }
            "expdecay" => {
                let rate: f64 =
                    arg.parse().map_err(|_| Error::config(format!("invalid rate in `{spec}`")))?;
                Self::exp_decay(rate)
            }
            "csv" => Self::read_csv(Path::new(arg)),
            other => Err(Error::config(format!("unknown kernel kind `{other}`"))),
        }
    }

    /// Read a tabulated kernel from a two-column CSV with header `t,rho`.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let mut lines = std::io::BufReader::new(file).lines();
        match lines.next() {
            Some(Ok(header)) if header.trim() == "t,rho" => {}
            _ => return Err(Error::config(format!("{}: expected header `t,rho`", path.display()))),
        }
        let (mut ts, mut values) = (Vec::new(), Vec::new());
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let (t, v) = line
                .split_once(',')
                .ok_or_else(|| Error::config(format!("{}: malformed row `{line}`", path.display())))?;
            ts.push(t.trim().parse::<f64>().map_err(|_| Error::config(format!("bad t `{t}`")))?);
            values.push(v.trim().parse::<f64>().map_err(|_| Error::config(format!("bad rho `{v}`")))?);
        }
        Self::tabulated(ts, values)
    }

    /// Write a tabulated view of the kernel (sampled for closed forms).
    pub fn write_csv(&self, path: &Path, n: usize, dt: f64) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "t,rho")?;
        match self {
            MemoryKernel::Tabulated { ts, values } => {
                for (t, v) in ts.iter().zip(values) {
                    writeln!(out, "{t:?},{v:?}")?;
                }
            }
            _ => {
                for i in 0..=n {
                    let t = i as f64 * dt;
                    writeln!(out, "{t:?},{:?}", self.eval(t)?)?;
                }
            }
        }
        Ok(())
    }
}

impl Kernel for MemoryKernel {
    fn eval(&self, t: f64) -> Result<f64> {
        if !(t >= 0.0) {
            return Err(Error::domain(format!("kernel time must be >= 0, got {t}")));
        }
        match self {
            MemoryKernel::PolyDecay { gamma } => Ok((t + 1.0).powf(-gamma)),
            MemoryKernel::ExpDecay { rate } => Ok((-rate * t).exp()),
            MemoryKernel::Tabulated { ts, values } => {
                let t_max = *ts.last().unwrap();
                if t > t_max {
                    return Err(Error::domain(format!(
                        "t = {t} beyond tabulated horizon {t_max}"
                    )));
                }
                let idx = ts.partition_point(|&x| x <= t);
                if idx == 0 {
                    return Ok(values[0]);
                }
                if idx >= ts.len() {
                    return Ok(*values.last().unwrap());
                }
                let (t0, t1) = (ts[idx - 1], ts[idx]);
                let (v0, v1) = (values[idx - 1], values[idx]);
                Ok(v0 + (v1 - v0) * (t - t0) / (t1 - t0))
            }
        }
    }

    fn signed_tail(&self, t0: f64) -> Result<f64> {
        match self {
            MemoryKernel::PolyDecay { gamma } => Ok((t0 + 1.0).powf(1.0 - gamma) / (gamma - 1.0)),
            MemoryKernel::ExpDecay { rate } => Ok((-rate * t0).exp() / rate),
            MemoryKernel::Tabulated { ts, .. } => {
                let t_max = *ts.last().unwrap();
                if t0 < t_max {
                    return Err(Error::domain(format!(
                        "tail start {t0} is inside the tabulated support (ends at {t_max})"
                    )));
                }
                Ok(0.0)
            }
        }
    }

    fn tail_uncertainty(&self, _t0: f64) -> Result<f64> {
        // all three kinds have single-signed (or zero) tails
        Ok(0.0)
    }

    fn as_memory(&self) -> Option<&MemoryKernel> {
        Some(self)
    }
}

/// A model kernel: `sum_i c_i e^{lambda_i t}` in continuous time, or
/// `sum_i c_i lambda_i^k` at discrete step `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelKernel {
    pub coeffs: Vec<f64>,
    pub rates: Vec<f64>,
    pub time_mode: TimeMode,
}

impl ModelKernel {
    pub fn new(coeffs: Vec<f64>, rates: Vec<f64>, time_mode: TimeMode) -> Result<Self> {
        if coeffs.len() != rates.len() || coeffs.is_empty() {
            return Err(Error::config("model kernel needs matching, nonempty coeffs/rates".to_string()));
        }
        if coeffs.iter().chain(rates.iter()).any(|v| !v.is_finite()) {
            return Err(Error::config("model kernel entries must be finite".to_string()));
        }
        match time_mode {
            TimeMode::Continuous => {
                if rates.iter().any(|&l| l >= 0.0) {
                    return Err(Error::domain(
                        "continuous model kernel requires all rates < 0".to_string(),
                    ));
                }
            }
            TimeMode::Discrete => {
                if rates.iter().any(|&l| l.abs() > 1.0) {
                    return Err(Error::domain(
                        "discrete model kernel requires |rate| <= 1".to_string(),
                    ));
                }
            }
        }
        Ok(ModelKernel { coeffs, rates, time_mode })
    }

    /// Value at discrete step `k`.
    pub fn eval_step(&self, k: usize) -> f64 {
        self.coeffs
            .iter()
            .zip(&self.rates)
            .map(|(&c, &l)| c * l.powi(k as i32))
            .sum()
    }

    /// `sum_i |c_i| / |lambda_i|` (continuous) or `sum_i |c_i| / (1 - |lambda_i|)`
    /// (discrete): the exact L1 mass when all terms share a sign, an upper
    /// bound otherwise.
    pub fn l1_mass_upper(&self) -> Result<f64> {
        let mut total = 0.0;
        for (&c, &l) in self.coeffs.iter().zip(&self.rates) {
            let denom = match self.time_mode {
                TimeMode::Continuous => l.abs(),
                TimeMode::Discrete => 1.0 - l.abs(),
            };
            if denom <= 0.0 {
                return Err(Error::domain(format!("non-integrable mode with rate {l}")));
            }
            total += c.abs() / denom;
        }
        Ok(total)
    }
}

impl Kernel for ModelKernel {
    fn eval(&self, t: f64) -> Result<f64> {
        if !(t >= 0.0) {
            return Err(Error::domain(format!("kernel time must be >= 0, got {t}")));
        }
        match self.time_mode {
            TimeMode::Continuous => {
                Ok(self.coeffs.iter().zip(&self.rates).map(|(&c, &l)| c * (l * t).exp()).sum())
            }
            TimeMode::Discrete => {
                let k = t.round();
                if (t - k).abs() > 1e-9 {
                    return Err(Error::domain(format!(
                        "discrete kernel evaluated at non-integer step {t}"
                    )));
                }
                Ok(self.eval_step(k as usize))
            }
        }
    }

    fn signed_tail(&self, t0: f64) -> Result<f64> {
        match self.time_mode {
            TimeMode::Continuous => {
                let mut tail = 0.0;
                for (&c, &l) in self.coeffs.iter().zip(&self.rates) {
                    if l >= 0.0 {
                        return Err(Error::domain(format!("non-integrable mode with rate {l}")));
                    }
                    tail += c * (l * t0).exp() / -l;
                }
                Ok(tail)
            }
            TimeMode::Discrete => {
                // geometric tail of steps k > t0
                let k0 = t0.round();
                if (t0 - k0).abs() > 1e-9 {
                    return Err(Error::domain("discrete tail start must be an integer step".to_string()));
                }
                let mut tail = 0.0;
                for (&c, &l) in self.coeffs.iter().zip(&self.rates) {
                    if l.abs() >= 1.0 {
                        return Err(Error::domain(format!("non-summable mode with rate {l}")));
                    }
                    tail += c * l.powi(k0 as i32 + 1) / (1.0 - l);
                }
                Ok(tail)
            }
        }
    }

    fn tail_uncertainty(&self, t0: f64) -> Result<f64> {
        let signed = self.signed_tail(t0)?.abs();
        let mut upper = 0.0;
        for (&c, &l) in self.coeffs.iter().zip(&self.rates) {
            upper += match self.time_mode {
                TimeMode::Continuous => c.abs() * (l * t0).exp() / -l,
                TimeMode::Discrete => c.abs() * l.abs().powi(t0.round() as i32 + 1) / (1.0 - l.abs()),
            };
        }
        Ok((upper - signed).max(0.0))
    }

    fn sample_grid(&self, n: usize, dt: f64) -> Result<Vec<f64>> {
        match self.time_mode {
            TimeMode::Continuous => {
                // incremental per-mode decay factors instead of exp() per node
                let m = self.coeffs.len();
                let mut state = self.coeffs.clone();
                let factors: Vec<f64> = self.rates.iter().map(|&l| (l * dt).exp()).collect();
                let mut out = Vec::with_capacity(n + 1);
                out.push(state.iter().sum());
                for _ in 0..n {
                    let mut acc = 0.0;
                    for i in 0..m {
                        state[i] *= factors[i];
                        acc += state[i];
                    }
                    out.push(acc);
                }
                Ok(out)
            }
            TimeMode::Discrete => {
                if (dt - 1.0).abs() > 1e-12 {
                    return Err(Error::domain(
                        "discrete kernels sample on the unit step grid only".to_string(),
                    ));
                }
                let m = self.coeffs.len();
                let mut state = self.coeffs.clone();
                let mut out = Vec::with_capacity(n + 1);
                out.push(state.iter().sum());
                for _ in 0..n {
                    let mut acc = 0.0;
                    for i in 0..m {
                        state[i] *= self.rates[i];
                        acc += state[i];
                    }
                    out.push(acc);
                }
                Ok(out)
            }
        }
    }
}

fn trapezoid(values: &[f64], dt: f64) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let interior: f64 = values[1..values.len() - 1].iter().sum();
    dt * (0.5 * values[0] + interior + 0.5 * values[values.len() - 1])
}

/// L1 norm of a kernel on `[0, inf)`: composite trapezoid of `|k|` on
/// `[0, horizon]` plus the analytic tail. Errors when the tail handling is
/// more uncertain than `tail_tolerance` allows (raise the horizon).
pub fn kernel_l1_norm(kernel: &dyn Kernel, quad: &QuadratureConfig) -> Result<f64> {
    let uncertainty = kernel.tail_uncertainty(quad.horizon)?;
    if uncertainty > quad.tail_tolerance {
        return Err(Error::domain(format!(
            "tail uncertainty {uncertainty} exceeds tolerance {} at horizon {}",
            quad.tail_tolerance, quad.horizon
        )));
    }
    let samples = kernel.sample_grid(quad.steps(), quad.dt)?;
    let abs: Vec<f64> = samples.iter().map(|v| v.abs()).collect();
    Ok(trapezoid(&abs, quad.dt) + kernel.signed_tail(quad.horizon)?.abs())
}

/// L1 distance between two kernels on `[0, inf)`: trapezoid of `|k1 - k2|` on
/// `[0, horizon]` plus `|tail_1 - tail_2|` with the analytic signed tails
/// (exact whenever both kernels keep a constant sign beyond the horizon).
pub fn kernel_l1_distance(k1: &dyn Kernel, k2: &dyn Kernel, quad: &QuadratureConfig) -> Result<f64> {
    let n = quad.steps();
    let s1 = k1.sample_grid(n, quad.dt)?;
    let s2 = k2.sample_grid(n, quad.dt)?;
    let diff: Vec<f64> = s1.iter().zip(&s2).map(|(a, b)| (a - b).abs()).collect();
    let tail = (k1.signed_tail(quad.horizon)? - k2.signed_tail(quad.horizon)?).abs();
    Ok(trapezoid(&diff, quad.dt) + tail)
}

/// Apply the linear functional with kernel `k` to a sampled input sequence:
///
/// ```text
/// y_k = dt * sum_{j < k} k((k - 1 - j) dt) x_j
/// ```
///
/// the left-endpoint (in lag) Riemann discretization of the causal
/// convolution. The one-step delay matches the state-space readout
/// convention `y_k = c^T sigma(h_k)` where `h_k` has not yet consumed `x_k`,
/// so a discrete-mode state-space layer reproduces this sum exactly.
pub fn apply_linear_functional(kernel: &dyn Kernel, x: &[f64], dt: f64) -> Result<Vec<f64>> {
    if !(dt > 0.0) {
        return Err(Error::domain(format!("dt must be positive, got {dt}")));
    }
    let k_len = x.len();
    if k_len == 0 {
        return Ok(Vec::new());
    }
    let table = kernel.sample_grid(k_len.saturating_sub(1), dt)?;
    let y = crate::parallel::map_indices(k_len, |k| {
        let mut acc = 0.0;
        for u in 0..k {
            acc += table[u] * x[k - 1 - u];
        }
        acc * dt
    });
    Ok(y)
}

/// Response at a single time `t = n dt` to the unit step input, computed in
/// O(n): `dt * sum_{u < n} k(u dt)`. Equals the `n`-th element of
/// [`apply_linear_functional`] on a Heaviside input.
pub fn heaviside_response(kernel: &dyn Kernel, t: f64, dt: f64) -> Result<f64> {
    if !(dt > 0.0) || !(t >= 0.0) {
        return Err(Error::domain(format!("need dt > 0 and t >= 0, got dt={dt} t={t}")));
    }
    let n = (t / dt).round();
    if ((t / dt) - n).abs() > 1e-6 {
        return Err(Error::domain(format!("t = {t} is not a multiple of dt = {dt}")));
    }
    let n = n as usize;
    if n == 0 {
        return Ok(0.0);
    }
    let table = kernel.sample_grid(n - 1, dt)?;
    Ok(dt * table.iter().sum::<f64>())
}

/// Memory function of the linear functional with kernel `rho`: the supremum
/// over Heaviside amplitudes of `|d/dt H_t(u^x)| / (|x| + 1)` is approached
/// as `|x| -> inf` and equals `|rho(t)|`.
pub fn memory_function(kernel: &dyn Kernel, t: f64) -> Result<f64> {
    Ok(kernel.eval(t)?.abs())
}

/// Empirical memory-function estimate for a (possibly nonlinear) sequence
/// model. `respond` maps a Heaviside amplitude to the model's output
/// sequence; the output derivative is estimated by forward differences and
/// the supremum over amplitudes is scanned on the dyadic grid
/// `+-2^j, j = -3..6`. Returns one value per valid time index.
pub fn memory_function_estimate(respond: &dyn Fn(f64) -> Vec<f64>, dt: f64) -> Vec<f64> {
    let mut est: Vec<f64> = Vec::new();
    for j in -3..=6 {
        for sign in [-1.0, 1.0] {
            let x = sign * (2f64).powi(j);
            let y = respond(x);
            if y.len() < 2 {
                continue;
            }
            if est.is_empty() {
                est = vec![0.0; y.len() - 1];
            }
            for k in 0..y.len() - 1 {
                let deriv = (y[k + 1] - y[k]) / dt;
                est[k] = est[k].max(deriv.abs() / (x.abs() + 1.0));
            }
        }
    }
    est
}

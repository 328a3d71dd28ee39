//! Perturbation-error estimation: how much worse does a trained model get
//! when its weights move inside a ball of radius `beta`?
//!
//! Directions are drawn uniformly on the sphere of the selected weight
//! subset and scaled to radius `beta` exactly (the supremum over the ball is
//! approached on the boundary for these models); the sample maximum is a
//! lower bound on the true supremum and is reported as such. A perturbed
//! model that leaves the stable region scores `+inf`, which is the
//! instability signal the sweeps look for.

use crate::error::{Error, Result};
use crate::kernel::{
    apply_linear_functional, kernel_l1_distance, Kernel, ModelKernel, QuadratureConfig, TimeMode,
};
use crate::ssm::{forward, SSMParams};
use crate::train::discrete_kernel_distance;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerturbSet {
    /// Perturb only the recurrent weights (the simplified setting of the
    /// stable-approximation theorem).
    RecurrentOnly,
    AllWeights,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerturbSpace {
    /// Perturb the pre-reparameterization weights `w` (default: the stable
    /// reparameterization definition perturbs `w~`).
    Weight,
    /// Perturb the effective eigenvalues directly.
    Eigen,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ErrorMetric {
    /// L1 distance between the model kernel and the target kernel
    /// (exact for linear readouts).
    L1Kernel,
    /// Empirical Sobolev-type functional distance on a probe input set
    /// (an estimate; valid for nonlinear readouts too).
    SobolevEmpirical,
}

/// Beta grids are given either as a literal list or as a spec string
/// `geo:<start>:<ratio>:<count>` (ratio may be `sqrt2`). A leading 0 is
/// always included.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BetaSpec {
    Spec(String),
    List(Vec<f64>),
}

impl BetaSpec {
    pub fn resolve(&self) -> Result<Vec<f64>> {
        let mut betas = match self {
            BetaSpec::List(list) => list.clone(),
            BetaSpec::Spec(spec) => parse_beta_grid(spec)?,
        };
        if betas.iter().any(|b| !b.is_finite() || *b < 0.0) {
            return Err(Error::config("beta grid entries must be finite and >= 0".to_string()));
        }
        betas.sort_by(|a, b| a.partial_cmp(b).unwrap());
        betas.dedup();
        if betas.first() != Some(&0.0) {
            betas.insert(0, 0.0);
        }
        Ok(betas)
    }
}

/// Parse `geo:<start>:<ratio>:<count>` into a geometric grid.
pub fn parse_beta_grid(spec: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = spec.split(':').collect();
    if parts.len() != 4 || parts[0] != "geo" {
        return Err(Error::config(format!(
            "beta grid spec must be `geo:<start>:<ratio>:<count>`, got `{spec}`"
        )));
    }
    let start: f64 =
        parts[1].parse().map_err(|_| Error::config(format!("bad start in `{spec}`")))?;
    let ratio: f64 = match parts[2] {
        "sqrt2" => std::f64::consts::SQRT_2,
        other => other.parse().map_err(|_| Error::config(format!("bad ratio in `{spec}`")))?,
    };
    let count: usize =
        parts[3].parse().map_err(|_| Error::config(format!("bad count in `{spec}`")))?;
    if !(start > 0.0) || !(ratio > 1.0) || count == 0 {
        return Err(Error::config(format!("degenerate beta grid `{spec}`")));
    }
    Ok((0..count).map(|i| start * ratio.powi(i as i32)).collect())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbConfig {
    #[serde(default = "default_betas")]
    pub betas: BetaSpec,
    #[serde(default = "default_samples")]
    pub samples_per_beta: usize,
    #[serde(default = "default_set")]
    pub perturb_set: PerturbSet,
    #[serde(default = "default_metric")]
    pub metric: ErrorMetric,
    #[serde(default = "default_space")]
    pub space: PerturbSpace,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub quad: QuadratureConfig,
    /// Probe-set shape for the empirical Sobolev metric.
    #[serde(default = "default_probe_len")]
    pub probe_len: usize,
    #[serde(default = "default_probe_count")]
    pub probe_count: usize,
}

fn default_betas() -> BetaSpec {
    // the synthetic-experiment grid: 0 plus 1e-3 * 2^{k/2}, k = 0..20
    BetaSpec::Spec("geo:1e-3:sqrt2:21".to_string())
}
fn default_samples() -> usize {
    30
}
fn default_set() -> PerturbSet {
    PerturbSet::RecurrentOnly
}
fn default_metric() -> ErrorMetric {
    ErrorMetric::L1Kernel
}
fn default_space() -> PerturbSpace {
    PerturbSpace::Weight
}
fn default_probe_len() -> usize {
    100
}
fn default_probe_count() -> usize {
    64
}

impl Default for PerturbConfig {
    fn default() -> Self {
        PerturbConfig {
            betas: default_betas(),
            samples_per_beta: default_samples(),
            perturb_set: default_set(),
            metric: default_metric(),
            space: default_space(),
            seed: 0,
            quad: QuadratureConfig::default(),
            probe_len: default_probe_len(),
            probe_count: default_probe_count(),
        }
    }
}

impl PerturbConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples_per_beta == 0 {
            return Err(Error::config("samples_per_beta must be >= 1".to_string()));
        }
        let _ = self.betas.resolve()?;
        Ok(())
    }
}

/// FNV-1a over the bit patterns of a direction vector; stable across
/// platforms and releases so report rows are reproducible.
fn direction_hash(direction: &[f64]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for v in direction {
        for byte in v.to_bits().to_le_bytes() {
            hash ^= byte as u64;
            hash = hash.wrapping_mul(0x100000001b3);
        }
    }
    hash
}

/// The perturbed model: eigenvalues plus (possibly shifted) readout weights.
struct Perturbed {
    lambdas: Vec<f64>,
    u: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
}

fn perturb(
    params: &SSMParams,
    lambdas: &[f64],
    direction: &[f64],
    beta: f64,
    set: PerturbSet,
    space: PerturbSpace,
) -> Result<Perturbed> {
    let m = params.m();
    let mut out = Perturbed {
        lambdas: lambdas.to_vec(),
        u: params.u.clone(),
        b: params.b.clone(),
        c: params.c.clone(),
    };
    let recurrent = &direction[..m];
    match space {
        PerturbSpace::Weight => {
            for i in 0..m {
                out.lambdas[i] = params.scheme.apply(params.w[i] + beta * recurrent[i])?;
            }
        }
        PerturbSpace::Eigen => {
            for i in 0..m {
                out.lambdas[i] += beta * recurrent[i];
            }
        }
    }
    if set == PerturbSet::AllWeights {
        let d = params.d;
        let mut offset = m;
        for i in 0..m * d {
            out.u[i] += beta * direction[offset + i];
        }
        offset += m * d;
        for i in 0..m {
            out.b[i] += beta * direction[offset + i];
        }
        offset += m;
        for i in 0..m {
            out.c[i] += beta * direction[offset + i];
        }
    }
    Ok(out)
}

fn is_unstable(lambdas: &[f64], mode: TimeMode) -> bool {
    match mode {
        TimeMode::Continuous => lambdas.iter().any(|&l| l >= 0.0),
        TimeMode::Discrete => lambdas.iter().any(|&l| l.abs() >= 1.0),
    }
}

fn metric_l1(p: &Perturbed, params: &SSMParams, target: &dyn Kernel, quad: &QuadratureConfig) -> Result<f64> {
    let mode = params.time_mode();
    if is_unstable(&p.lambdas, mode) {
        return Ok(f64::INFINITY);
    }
    let coeffs: Vec<f64> = p.c.iter().zip(&p.u).map(|(&c, &u)| c * u).collect();
    let kernel = ModelKernel::new(coeffs, p.lambdas.clone(), mode)?;
    match mode {
        TimeMode::Continuous => kernel_l1_distance(&kernel, target, quad),
        TimeMode::Discrete => {
            let memory = downcast_memory(target)?;
            discrete_kernel_distance(&kernel, memory, quad)
        }
    }
}

// The discrete metric needs the closed-form tail of the target; the trait
// object is enough for the continuous path but not here.
fn downcast_memory(target: &dyn Kernel) -> Result<&crate::kernel::MemoryKernel> {
    target
        .as_memory()
        .ok_or_else(|| Error::contract("discrete perturbation metric needs a memory-kernel target".to_string()))
}

/// Probe inputs for the empirical Sobolev metric, fixed by the config seed.
pub struct ProbeSet {
    pub inputs: Vec<Vec<f64>>,
    pub target_outputs: Vec<Vec<f64>>,
    pub dt: f64,
}

impl ProbeSet {
    pub fn build(target: &dyn Kernel, cfg: &PerturbConfig, dt: f64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x50524f4245u64); // "PROBE"
        let mut inputs = Vec::with_capacity(cfg.probe_count);
        let mut target_outputs = Vec::with_capacity(cfg.probe_count);
        for _ in 0..cfg.probe_count {
            let x: Vec<f64> = (0..cfg.probe_len).map(|_| rng.sample(StandardNormal)).collect();
            let y = apply_linear_functional(target, &x, dt)?;
            inputs.push(x);
            target_outputs.push(y);
        }
        Ok(ProbeSet { inputs, target_outputs, dt })
    }
}

fn metric_sobolev(p: &Perturbed, params: &SSMParams, probes: &ProbeSet) -> Result<f64> {
    let m = params.m();
    if is_unstable(&p.lambdas, params.time_mode()) {
        return Ok(f64::INFINITY);
    }
    // realize the perturbed eigenvalues through a direct-parameterization copy
    let mut model = params.clone();
    model.scheme = crate::reparam::ReparamScheme::new(
        crate::reparam::Family::Direct,
        params.time_mode(),
    )?;
    model.w = p.lambdas.clone();
    model.u = p.u.clone();
    model.b = p.b.clone();
    model.c = p.c.clone();
    debug_assert_eq!(model.m(), m);

    let len = probes.inputs[0].len();
    let mut value_sup = vec![0.0f64; len];
    let mut deriv_sup = vec![0.0f64; len.saturating_sub(1)];
    for (x, ty) in probes.inputs.iter().zip(&probes.target_outputs) {
        let out = match forward(&model, x) {
            Ok(out) => out,
            Err(Error::Numeric { .. }) => return Ok(f64::INFINITY),
            Err(e) => return Err(e),
        };
        let xmax = x.iter().map(|v| v.abs()).fold(0.0f64, f64::max);
        let denom = xmax + 1.0;
        for k in 0..len {
            let dv = (out.y[k] - ty[k]).abs() / denom;
            value_sup[k] = value_sup[k].max(dv);
            if k + 1 < len {
                let dd = ((out.y[k + 1] - ty[k + 1]) - (out.y[k] - ty[k])).abs() / probes.dt / denom;
                deriv_sup[k] = deriv_sup[k].max(dd);
            }
        }
    }
    let mut sup = 0.0f64;
    for k in 0..len {
        let d = if k < deriv_sup.len() { deriv_sup[k] } else { 0.0 };
        sup = sup.max(value_sup[k] + d);
    }
    Ok(sup)
}

/// Detailed outcome of one `(model, beta)` estimate.
#[derive(Debug, Clone)]
pub struct EstimateDetail {
    pub e_raw: f64,
    pub samples: usize,
    pub best_direction_hash: u64,
}

/// Draw `samples_per_beta` directions on the sphere of the selected subset,
/// scale to radius `beta`, and return the sample maximum of the error metric
/// (a lower bound on the supremum over the ball). `beta = 0` evaluates the
/// unperturbed model once.
pub fn estimate_perturbation_error(
    params: &SSMParams,
    target: &dyn Kernel,
    beta: f64,
    cfg: &PerturbConfig,
) -> Result<f64> {
    Ok(estimate_with_details(params, target, beta, cfg, None)?.e_raw)
}

pub fn estimate_with_details(
    params: &SSMParams,
    target: &dyn Kernel,
    beta: f64,
    cfg: &PerturbConfig,
    probes: Option<&ProbeSet>,
) -> Result<EstimateDetail> {
    if !(beta >= 0.0) || !beta.is_finite() {
        return Err(Error::domain(format!("beta must be finite and >= 0, got {beta}")));
    }
    let lambdas = params.lambdas()?;
    let owned_probes;
    let probes = match (cfg.metric, probes) {
        (ErrorMetric::SobolevEmpirical, Some(p)) => Some(p),
        (ErrorMetric::SobolevEmpirical, None) => {
            owned_probes = ProbeSet::build(target, cfg, params.dt)?;
            Some(&owned_probes)
        }
        (ErrorMetric::L1Kernel, _) => None,
    };
    let eval = |p: &Perturbed| -> Result<f64> {
        match cfg.metric {
            ErrorMetric::L1Kernel => metric_l1(p, params, target, &cfg.quad),
            ErrorMetric::SobolevEmpirical => metric_sobolev(p, params, probes.unwrap()),
        }
    };

    if beta == 0.0 {
        let unperturbed = perturb(params, &lambdas, &vec![0.0; dims(params, cfg)], 0.0, cfg.perturb_set, cfg.space)?;
        return Ok(EstimateDetail {
            e_raw: eval(&unperturbed)?,
            samples: 1,
            best_direction_hash: direction_hash(&[]),
        });
    }

    let n_dims = dims(params, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ beta.to_bits());
    let mut best = f64::NEG_INFINITY;
    let mut best_hash = 0u64;
    for _ in 0..cfg.samples_per_beta {
        let mut direction: Vec<f64>;
        loop {
            direction = (0..n_dims).map(|_| rng.sample(StandardNormal)).collect();
            let norm = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-12 {
                direction.iter_mut().for_each(|v| *v /= norm);
                break;
            }
        }
        let perturbed = perturb(params, &lambdas, &direction, beta, cfg.perturb_set, cfg.space)?;
        let value = eval(&perturbed)?;
        if value > best {
            best = value;
            best_hash = direction_hash(&direction);
        }
    }
    Ok(EstimateDetail { e_raw: best, samples: cfg.samples_per_beta, best_direction_hash: best_hash })
}

/// Content id of a checkpoint: FNV over the parameter bit patterns.
pub fn checkpoint_id(params: &SSMParams) -> String {
    let mut all: Vec<f64> = Vec::new();
    all.extend_from_slice(&params.w);
    all.extend_from_slice(&params.u);
    all.extend_from_slice(&params.b);
    all.extend_from_slice(&params.c);
    format!("m{}-{:016x}", params.m(), direction_hash(&all))
}

fn dims(params: &SSMParams, cfg: &PerturbConfig) -> usize {
    let m = params.m();
    match cfg.perturb_set {
        PerturbSet::RecurrentOnly => m,
        PerturbSet::AllWeights => m + m * params.d + m + m,
    }
}

/// One row of the sweep table.
#[derive(Debug, Clone)]
pub struct ReportRow {
    pub m: usize,
    pub beta: f64,
    /// Monotone envelope of the raw sample maxima (the supremum over nested
    /// balls is nondecreasing; sampling noise must not mask that).
    pub e_hat: f64,
    pub e_hat_raw: f64,
    pub samples: usize,
    pub crossing_flag: bool,
    pub best_direction_hash: u64,
}

#[derive(Debug, Clone)]
pub struct PerturbationReport {
    pub rows: Vec<ReportRow>,
    pub metric: ErrorMetric,
    pub seed: u64,
    /// Content ids of the swept checkpoints, in ascending-width order.
    pub checkpoint_ids: Vec<String>,
    /// For each adjacent width pair `(m, m')`, the first grid beta at which
    /// the larger model's enveloped error reaches the smaller model's.
    pub crossings: Vec<(usize, usize, Option<f64>)>,
    /// Count of raw-value envelope violations (they quantify sampling error).
    pub raw_envelope_violations: usize,
}

/// Run the full `(m, beta)` table over a set of checkpoints trained on the
/// same target, envelope the per-model curves, and locate the curve
/// crossings between adjacent widths.
pub fn sweep(
    checkpoints: &[SSMParams],
    target: &dyn Kernel,
    cfg: &PerturbConfig,
) -> Result<PerturbationReport> {
    cfg.validate()?;
    if checkpoints.is_empty() {
        return Err(Error::contract("sweep needs at least one checkpoint".to_string()));
    }
    let betas = cfg.betas.resolve()?;
    let mut order: Vec<usize> = (0..checkpoints.len()).collect();
    order.sort_by_key(|&i| checkpoints[i].m());

    let mut rows: Vec<ReportRow> = Vec::new();
    let mut curves: Vec<(usize, Vec<f64>)> = Vec::new();
    let mut violations = 0usize;
    let mut checkpoint_ids = Vec::with_capacity(order.len());
    for &idx in &order {
        let params = &checkpoints[idx];
        checkpoint_ids.push(checkpoint_id(params));
        let probes = match cfg.metric {
            ErrorMetric::SobolevEmpirical => Some(ProbeSet::build(target, cfg, params.dt)?),
            ErrorMetric::L1Kernel => None,
        };
        let mut envelope = f64::NEG_INFINITY;
        let mut curve = Vec::with_capacity(betas.len());
        for &beta in &betas {
            let detail = estimate_with_details(params, target, beta, cfg, probes.as_ref())?;
            if detail.e_raw < envelope {
                violations += 1;
            }
            envelope = envelope.max(detail.e_raw);
            curve.push(envelope);
            rows.push(ReportRow {
                m: params.m(),
                beta,
                e_hat: envelope,
                e_hat_raw: detail.e_raw,
                samples: detail.samples,
                crossing_flag: false,
                best_direction_hash: detail.best_direction_hash,
            });
        }
        curves.push((params.m(), curve));
    }

    let mut crossings = Vec::new();
    for pair in curves.windows(2) {
        let (m_prev, ref prev) = pair[0];
        let (m_next, ref next) = pair[1];
        let mut crossing = None;
        for (j, &beta) in betas.iter().enumerate() {
            if next[j] >= prev[j] {
                crossing = Some(beta);
                let flag_row = rows
                    .iter_mut()
                    .find(|r| r.m == m_next && r.beta == beta)
                    .expect("row exists");
                flag_row.crossing_flag = true;
                break;
            }
        }
        crossings.push((m_prev, m_next, crossing));
    }

    Ok(PerturbationReport {
        rows,
        metric: cfg.metric,
        seed: cfg.seed,
        checkpoint_ids,
        crossings,
        raw_envelope_violations: violations,
    })
}

/// Report CSV with the pinned column set.
pub fn write_report_csv(report: &PerturbationReport, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "m,beta,e_hat,e_hat_raw,samples,crossing_flag")?;
    for r in &report.rows {
        writeln!(
            out,
            "{},{:?},{:?},{:?},{},{}",
            r.m,
            r.beta,
            r.e_hat,
            r.e_hat_raw,
            r.samples,
            if r.crossing_flag { 1 } else { 0 }
        )?;
    }
    Ok(())
}

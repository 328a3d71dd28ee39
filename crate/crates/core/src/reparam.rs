//! Reparameterization schemes for the recurrent eigenvalues of a diagonal
//! state-space layer.
//!
//! A scheme is a map `f` from a trainable weight `w` to an eigenvalue
//! `lambda = f(w)`. In continuous time stability needs `lambda < 0`, in
//! discrete time `|lambda| <= 1`. Each scheme carries its derivative, its
//! gradient-scale function `G_f(w) = |f'(w)| / f(w)^2` (continuous) or
//! `G_f^D(w) = |f'(w)| / (1 - f(w))^2` (discrete), and a stability-gap
//! functional used to certify that small weight perturbations produce small
//! kernel perturbations.

use crate::error::{Error, Result};
use crate::kernel::{kernel_l1_distance, ModelKernel, QuadratureConfig, TimeMode};
use serde::{Deserialize, Serialize};

/// Reparameterization families. `Direct` is the identity map (the
/// "no reparameterization" baseline).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Direct,
    ReLU,
    Exp,
    Softplus,
    Tanh,
    Best,
}

impl Family {
    pub fn name(&self) -> &'static str {
        match self {
            Family::Direct => "direct",
            Family::ReLU => "relu",
            Family::Exp => "exp",
            Family::Softplus => "softplus",
            Family::Tanh => "tanh",
            Family::Best => "best",
        }
    }
}

/// A fully specified reparameterization: family, time mode, and the
/// curvature/offset coefficients of the `Best` family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReparamScheme {
    pub family: Family,
    pub time_mode: TimeMode,
    /// Curvature coefficient of `Best`; ignored by the other families.
    pub a: f64,
    /// Offset coefficient of `Best`; ignored by the other families.
    pub b: f64,
}

/// Numerically stable `log(1 + e^x)`, good to |x| ~ 700.
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Numerically stable logistic `1 / (1 + e^{-x})`.
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl ReparamScheme {
    pub fn new(family: Family, time_mode: TimeMode) -> Result<Self> {
        Self::with_coeffs(family, time_mode, 1.0, default_b(time_mode))
    }

    /// Build a scheme, checking the family/mode invariants.
    pub fn with_coeffs(family: Family, time_mode: TimeMode, a: f64, b: f64) -> Result<Self> {
        if family == Family::Tanh && time_mode == TimeMode::Continuous {
            return Err(Error::config("tanh reparameterization is discrete-time only"));
        }
        if family == Family::Best {
            if !(a > 0.0) || !a.is_finite() {
                return Err(Error::config(format!("best scheme requires a > 0, got a = {a}")));
            }
            match time_mode {
                TimeMode::Continuous => {
                    if !(b > 0.0) || !b.is_finite() {
                        return Err(Error::config(format!(
                            "best continuous scheme requires b > 0, got b = {b}"
                        )));
                    }
                }
                TimeMode::Discrete => {
                    // b >= 0.5 keeps f(w) = 1 - 1/(a w^2 + b) inside [-1, 1).
                    if !(b >= 0.5) || !b.is_finite() {
                        return Err(Error::config(format!(
                            "best discrete scheme requires b >= 0.5, got b = {b}"
                        )));
                    }
                }
            }
        }
        Ok(ReparamScheme { family, time_mode, a, b })
    }

    /// Canonical spec string, e.g. `best:a=1,b=0.5@disc`.
    pub fn spec_string(&self) -> String {
        let mode = match self.time_mode {
            TimeMode::Continuous => "cont",
            TimeMode::Discrete => "disc",
        };
        match self.family {
            Family::Best => format!("best:a={},b={}@{}", self.a, self.b, mode),
            f => format!("{}@{}", f.name(), mode),
        }
    }

    /// Parse a spec string `family[:a=<float>,b=<float>]@{cont|disc}`.
    pub fn parse(spec: &str) -> Result<Self> {
        let (left, mode_str) = spec
            .rsplit_once('@')
            .ok_or_else(|| Error::config(format!("scheme spec `{spec}` is missing `@cont` or `@disc`")))?;
        let time_mode = match mode_str {
            "cont" => TimeMode::Continuous,
            "disc" => TimeMode::Discrete,
            other => return Err(Error::config(format!("unknown time mode `{other}` in `{spec}`"))),
        };
        let (name, params) = match left.split_once(':') {
            Some((n, p)) => (n, Some(p)),
            None => (left, None),
        };
        let family = match name.to_ascii_lowercase().as_str() {
            "direct" => Family::Direct,
            "relu" => Family::ReLU,
            "exp" => Family::Exp,
            "softplus" => Family::Softplus,
            "tanh" => Family::Tanh,
            "best" => Family::Best,
            other => return Err(Error::config(format!("unknown scheme family `{other}`"))),
        };
        let (mut a, mut b) = (1.0, default_b(time_mode));
        if let Some(params) = params {
            if family != Family::Best {
                return Err(Error::config(format!(
                    "coefficients a/b apply only to the best family, got `{spec}`"
                )));
            }
            for kv in params.split(',') {
                let (key, value) = kv
                    .split_once('=')
                    .ok_or_else(|| Error::config(format!("malformed coefficient `{kv}` in `{spec}`")))?;
                let value: f64 = value
                    .trim()
                    .parse()
                    .map_err(|_| Error::config(format!("invalid float `{value}` in `{spec}`")))?;
                match key.trim() {
                    "a" => a = value,
                    "b" => b = value,
                    other => return Err(Error::config(format!("unknown coefficient `{other}` in `{spec}`"))),
                }
            }
        }
        Self::with_coeffs(family, time_mode, a, b)
    }

    fn check_finite(&self, w: f64) -> Result<()> {
        if !w.is_finite() {
            return Err(Error::domain(format!("non-finite weight w = {w}")));
        }
        Ok(())
    }

    /// The eigenvalue `lambda = f(w)`.
    pub fn apply(&self, w: f64) -> Result<f64> {
        self.check_finite(w)?;
        let v = match (self.family, self.time_mode) {
            (Family::Direct, _) => w,
            (Family::ReLU, TimeMode::Continuous) => -w.max(0.0),
            (Family::Exp, TimeMode::Continuous) => -w.exp(),
            (Family::Softplus, TimeMode::Continuous) => -softplus(w),
            (Family::Best, TimeMode::Continuous) => -1.0 / (self.a * w * w + self.b),
            (Family::ReLU, TimeMode::Discrete) => (-w.max(0.0)).exp(),
            (Family::Exp, TimeMode::Discrete) => (-w.exp()).exp(),
            (Family::Softplus, TimeMode::Discrete) => sigmoid(-w),
            (Family::Tanh, TimeMode::Discrete) => w.tanh(),
            (Family::Best, TimeMode::Discrete) => 1.0 - 1.0 / (self.a * w * w + self.b),
            (Family::Tanh, TimeMode::Continuous) => unreachable!("rejected at construction"),
        };
        Ok(v)
    }

    /// The analytic derivative `f'(w)`. At the ReLU kink `w = 0` this is the
    /// left derivative 0, matching the `1_{w > 0}` indicator of the
    /// gradient-scale table.
    pub fn derivative(&self, w: f64) -> Result<f64> {
        self.check_finite(w)?;
        let v = match (self.family, self.time_mode) {
            (Family::Direct, _) => 1.0,
            (Family::ReLU, TimeMode::Continuous) => {
                if w > 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            (Family::Exp, TimeMode::Continuous) => -w.exp(),
            (Family::Softplus, TimeMode::Continuous) => -sigmoid(w),
            (Family::Best, TimeMode::Continuous) => {
                let q = self.a * w * w + self.b;
                2.0 * self.a * w / (q * q)
            }
            (Family::ReLU, TimeMode::Discrete) => {
                if w > 0.0 {
                    -(-w).exp()
                } else {
                    0.0
                }
            }
            (Family::Exp, TimeMode::Discrete) => -(w - w.exp()).exp(),
            (Family::Softplus, TimeMode::Discrete) => -sigmoid(w) * sigmoid(-w),
            (Family::Tanh, TimeMode::Discrete) => {
                let s = 1.0 / w.cosh();
                s * s
            }
            (Family::Best, TimeMode::Discrete) => {
                let q = self.a * w * w + self.b;
                2.0 * self.a * w / (q * q)
            }
            (Family::Tanh, TimeMode::Continuous) => unreachable!("rejected at construction"),
        };
        Ok(v)
    }

    /// Gradient-scale function: `|f'(w)| / f(w)^2` in continuous time,
    /// `|f'(w)| / (1 - f(w))^2` in discrete time. Errors where the
    /// denominator vanishes (`f(w) = 0` resp. `f(w) = 1`).
    pub fn gradient_scale(&self, w: f64) -> Result<f64> {
        let f = self.apply(w)?;
        let fp = self.derivative(w)?;
        let denom = match self.time_mode {
            TimeMode::Continuous => f * f,
            TimeMode::Discrete => (1.0 - f) * (1.0 - f),
        };
        if denom == 0.0 {
            return Err(Error::domain(format!(
                "gradient scale of {} is singular at w = {w}",
                self.spec_string()
            )));
        }
        let g = fp.abs() / denom;
        if g.is_finite() {
            Ok(g)
        } else if let Some(cf) = self.closed_form_gradient_scale(w) {
            // |w| large enough to overflow the raw ratio; the algebraically
            // identical closed form stays finite.
            Ok(cf)
        } else {
            Err(Error::domain(format!(
                "gradient scale of {} overflows at w = {w}",
                self.spec_string()
            )))
        }
    }

    /// The simplified closed forms of the gradient-scale table. `None` where
    /// the scale is undefined (`f = 0` / `f = 1`). `Direct` has no tabulated
    /// entry; the trivially simplified raw formula is returned and flagged by
    /// [`ReparamScheme::closed_form_in_table`].
    pub fn closed_form_gradient_scale(&self, w: f64) -> Option<f64> {
        match (self.family, self.time_mode) {
            (Family::Direct, TimeMode::Continuous) => {
                if w == 0.0 {
                    None
                } else {
                    Some(1.0 / (w * w))
                }
            }
            (Family::Direct, TimeMode::Discrete) => {
                if w == 1.0 {
                    None
                } else {
                    Some(1.0 / ((1.0 - w) * (1.0 - w)))
                }
            }
            (Family::ReLU, TimeMode::Continuous) => {
                if w > 0.0 {
                    Some(1.0 / (w * w))
                } else {
                    None
                }
            }
            (Family::Exp, TimeMode::Continuous) => Some((-w).exp()),
            (Family::Softplus, TimeMode::Continuous) => {
                let l = softplus(w);
                Some(sigmoid(w) / (l * l))
            }
            (Family::Best, TimeMode::Continuous) => Some(2.0 * self.a * w.abs()),
            (Family::ReLU, TimeMode::Discrete) => {
                if w > 0.0 {
                    let d = -(-w).exp_m1(); // 1 - e^{-w}
                    Some((-w).exp() / (d * d))
                } else {
                    None
                }
            }
            (Family::Exp, TimeMode::Discrete) => {
                let d = (-w.exp()).exp_m1(); // exp(-e^w) - 1
                Some((w - w.exp()).exp() / (d * d))
            }
            (Family::Softplus, TimeMode::Discrete) => Some((-w).exp()),
            (Family::Tanh, TimeMode::Discrete) => Some((2.0 * w).exp()),
            (Family::Best, TimeMode::Discrete) => Some(2.0 * self.a * w.abs()),
            (Family::Tanh, TimeMode::Continuous) => None,
        }
    }

    /// Whether the closed form above is an entry of the published table
    /// (the direct parameterization is not).
    pub fn closed_form_in_table(&self) -> bool {
        self.family != Family::Direct
    }

    /// Stability gap of the scheme at weight `w` and perturbation radius
    /// `beta` (continuous time only):
    ///
    /// ```text
    /// |f(w)| * sup_{|w~ - w| <= beta} integral_0^inf |e^{f(w~)t} - e^{f(w)t}| dt
    /// ```
    ///
    /// Because the two exponentials are pointwise ordered, the integral is
    /// `|1/|f(w~)| - 1/|f(w)||`, so the gap reduces to
    /// `sup | |f(w)|/|f(w~)| - 1 |`. For every family here the supremum over
    /// the ball sits at an endpoint `w +- beta` (for the even `Best` family
    /// the interior extremum of `|f|` at `w~ = 0` is checked as well and is
    /// always dominated). If `f` touches 0 anywhere in the ball the integral
    /// diverges and `+inf` is returned as the instability signal.
    pub fn stability_gap(&self, w: f64, beta: f64) -> Result<f64> {
        if self.time_mode != TimeMode::Continuous {
            return Err(Error::config(
                "stability gap is defined for continuous-time schemes".to_string(),
            ));
        }
        self.check_finite(w)?;
        if !(beta >= 0.0) {
            return Err(Error::domain(format!("perturbation radius must be >= 0, got {beta}")));
        }
        let f_w = self.apply(w)?;
        if !(f_w < 0.0) {
            return Ok(f64::INFINITY);
        }
        if beta == 0.0 {
            return Ok(0.0);
        }
        let mut candidates = vec![w - beta, w + beta];
        if w.abs() <= beta {
            candidates.push(0.0);
        }
        let mut gap: f64 = 0.0;
        for wt in candidates {
            let f_t = self.apply(wt)?;
            if !(f_t < 0.0) {
                return Ok(f64::INFINITY);
            }
            gap = gap.max((f_w / f_t - 1.0).abs());
        }
        Ok(gap)
    }

    /// Quadrature cross-check of [`ReparamScheme::stability_gap`]: evaluates
    /// the defining integral numerically at the two ball endpoints instead of
    /// using the ordered-exponential reduction.
    pub fn stability_gap_quadrature(&self, w: f64, beta: f64, quad: &QuadratureConfig) -> Result<f64> {
        if self.time_mode != TimeMode::Continuous {
            return Err(Error::config(
                "stability gap is defined for continuous-time schemes".to_string(),
            ));
        }
        let f_w = self.apply(w)?;
        if !(f_w < 0.0) {
            return Ok(f64::INFINITY);
        }
        if beta == 0.0 {
            return Ok(0.0);
        }
        let base = ModelKernel::new(vec![1.0], vec![f_w], TimeMode::Continuous)?;
        let mut gap: f64 = 0.0;
        for wt in [w - beta, w + beta] {
            let f_t = self.apply(wt)?;
            if !(f_t < 0.0) {
                return Ok(f64::INFINITY);
            }
            let pert = ModelKernel::new(vec![1.0], vec![f_t], TimeMode::Continuous)?;
            gap = gap.max(f_w.abs() * kernel_l1_distance(&pert, &base, quad)?);
        }
        Ok(gap)
    }

    /// Certified `g(beta)` of the stability definition: `e^beta - 1` for the
    /// exponential and softplus schemes, `a (beta^2 + 2 beta |w|) / b` for the
    /// continuous `Best` scheme (this one depends on the evaluation weight;
    /// see [`ReparamScheme::stability_bound_uniform`] for a certificate over
    /// a bounded weight set).
    pub fn stability_bound_g(&self, w: f64, beta: f64) -> Result<f64> {
        if !(beta >= 0.0) {
            return Err(Error::domain(format!("perturbation radius must be >= 0, got {beta}")));
        }
        match (self.family, self.time_mode) {
            (Family::Exp, TimeMode::Continuous) | (Family::Softplus, TimeMode::Continuous) => {
                Ok(beta.exp_m1())
            }
            (Family::Best, TimeMode::Continuous) => {
                self.check_finite(w)?;
                Ok(self.a * (beta * beta + 2.0 * beta * w.abs()) / self.b)
            }
            _ => Err(Error::config(format!(
                "no certified stability bound for {}",
                self.spec_string()
            ))),
        }
    }

    /// Uniform certificate over the weight set `{ |w| <= w_max }`: the bound
    /// evaluated at the worst weight of the set.
    pub fn stability_bound_uniform(&self, w_max: f64, beta: f64) -> Result<f64> {
        self.stability_bound_g(w_max.abs(), beta)
    }

    /// Closed-form inverse `w = f^{-1}(lambda)`. The `Best` family is even in
    /// `w`; the nonnegative root is returned.
    pub fn invert(&self, lambda: f64) -> Result<f64> {
        if !lambda.is_finite() {
            return Err(Error::domain(format!("non-finite eigenvalue {lambda}")));
        }
        let out_of_range = || {
            Error::domain(format!(
                "eigenvalue {lambda} is outside the range of {}",
                self.spec_string()
            ))
        };
        let w = match (self.family, self.time_mode) {
            (Family::Direct, _) => lambda,
            (Family::ReLU, TimeMode::Continuous) => {
                if lambda > 0.0 {
                    return Err(out_of_range());
                }
                -lambda
            }
            (Family::Exp, TimeMode::Continuous) => {
                if lambda >= 0.0 {
                    return Err(out_of_range());
                }
                (-lambda).ln()
            }
            (Family::Softplus, TimeMode::Continuous) => {
                if lambda >= 0.0 {
                    return Err(out_of_range());
                }
                let x = -lambda; // solve softplus(w) = x
                if x > 30.0 {
                    x + (-(-x).exp()).ln_1p()
                } else {
                    x.exp_m1().ln()
                }
            }
            (Family::Best, TimeMode::Continuous) => {
                // range is [-1/b, 0)
                if lambda >= 0.0 || lambda < -1.0 / self.b {
                    return Err(out_of_range());
                }
                ((-1.0 / lambda - self.b) / self.a).max(0.0).sqrt()
            }
            (Family::ReLU, TimeMode::Discrete) => {
                if lambda <= 0.0 || lambda > 1.0 {
                    return Err(out_of_range());
                }
                -lambda.ln()
            }
            (Family::Exp, TimeMode::Discrete) => {
                if lambda <= 0.0 || lambda >= 1.0 {
                    return Err(out_of_range());
                }
                (-lambda.ln()).ln()
            }
            (Family::Softplus, TimeMode::Discrete) => {
                if lambda <= 0.0 || lambda >= 1.0 {
                    return Err(out_of_range());
                }
                ((1.0 - lambda) / lambda).ln()
            }
            (Family::Tanh, TimeMode::Discrete) => {
                if lambda <= -1.0 || lambda >= 1.0 {
                    return Err(out_of_range());
                }
                lambda.atanh()
            }
            (Family::Best, TimeMode::Discrete) => {
                // range is [1 - 1/b, 1)
                if lambda >= 1.0 || lambda < 1.0 - 1.0 / self.b {
                    return Err(out_of_range());
                }
                ((1.0 / (1.0 - lambda) - self.b) / self.a).max(0.0).sqrt()
            }
            (Family::Tanh, TimeMode::Continuous) => unreachable!("rejected at construction"),
        };
        Ok(w)
    }
}

fn default_b(time_mode: TimeMode) -> f64 {
    match time_mode {
        TimeMode::Continuous => 1.0,
        TimeMode::Discrete => 0.5,
    }
}

/// Solve the constant-gradient-over-weight condition `G_f(w) = L |w|` for the
/// `Best` family: `a` is the ratio of the Lipschitz target `L` to the
/// parameterization-independent constant `C`, and `b` is the free offset.
/// The construction is checked on a probe grid against the `2 a |w|` identity.
pub fn derive_best_scheme(l_over_c: f64, b: f64, time_mode: TimeMode) -> Result<ReparamScheme> {
    let scheme = ReparamScheme::with_coeffs(Family::Best, time_mode, l_over_c, b)?;
    let mut w = -3.0;
    while w <= 3.0 {
        if w != 0.0 {
            let g = scheme.gradient_scale(w)?;
            let expected = 2.0 * l_over_c * w.abs();
            if (g - expected).abs() > 1e-10 * expected.max(1.0) {
                return Err(Error::config(format!(
                    "best-scheme identity violated at w = {w}: G = {g}, expected {expected}"
                )));
            }
        }
        w += 0.5;
    }
    Ok(scheme)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> Vec<f64> {
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

    #[test]
    fn apply_fixed_points() {
        let exp = ReparamScheme::new(Family::Exp, TimeMode::Continuous).unwrap();
        assert_eq!(exp.apply(0.0).unwrap(), -1.0);
        let sp = ReparamScheme::new(Family::Softplus, TimeMode::Continuous).unwrap();
        assert!((sp.apply(0.0).unwrap() - (-std::f64::consts::LN_2)).abs() < 1e-15);
        let best = ReparamScheme::with_coeffs(Family::Best, TimeMode::Discrete, 1.0, 0.5).unwrap();
        assert_eq!(best.apply(0.0).unwrap(), -1.0);
        let tanh = ReparamScheme::new(Family::Tanh, TimeMode::Discrete).unwrap();
        assert_eq!(tanh.apply(0.0).unwrap(), 0.0);
    }

    #[test]
    fn softplus_overflow_safe() {
        let sp = ReparamScheme::new(Family::Softplus, TimeMode::Continuous).unwrap();
        let v = sp.apply(700.0).unwrap();
        assert!((v + 700.0).abs() < 1e-9);
        assert!(sp.apply(-700.0).unwrap() > -1e-300 * 1e10);
        let spd = ReparamScheme::new(Family::Softplus, TimeMode::Discrete).unwrap();
        assert!(spd.apply(700.0).unwrap() >= 0.0);
        assert!((spd.apply(-700.0).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn derivative_fixed_points() {
        let exp = ReparamScheme::new(Family::Exp, TimeMode::Continuous).unwrap();
        assert_eq!(exp.derivative(0.0).unwrap(), -1.0);
        let best = ReparamScheme::with_coeffs(Family::Best, TimeMode::Discrete, 1.0, 0.5).unwrap();
        // d/dw [1 - 1/(w^2 + 0.5)] at w = 1 is 2/(1.5)^2 = 8/9
        assert!((best.derivative(1.0).unwrap() - 8.0 / 9.0).abs() < 1e-15);
        let direct = ReparamScheme::new(Family::Direct, TimeMode::Continuous).unwrap();
        assert_eq!(direct.derivative(123.456).unwrap(), 1.0);
    }

    #[test]
    fn derivative_matches_finite_differences_on_grid() {
        let h = 1e-6;
        for scheme in all_schemes() {
            for &w in &grid() {
                // skip the ReLU kink
                if scheme.family == Family::ReLU && w.abs() < 1e-9 {
                    continue;
                }
                let fd = (scheme.apply(w + h).unwrap() - scheme.apply(w - h).unwrap()) / (2.0 * h);
                let an = scheme.derivative(w).unwrap();
                if an.abs() < 1e-9 {
                    assert!(fd.abs() < 1e-9, "{} w={w}: fd={fd} an={an}", scheme.spec_string());
                } else {
                    let rel = (fd - an).abs() / an.abs();
                    assert!(rel < 1e-6, "{} w={w}: fd={fd} an={an} rel={rel}", scheme.spec_string());
                }
            }
        }
    }

    #[test]
    fn gradient_scale_matches_closed_forms() {
        for scheme in all_schemes() {
            for &w in &grid() {
                match (scheme.closed_form_gradient_scale(w), scheme.gradient_scale(w)) {
                    (Some(cf), Ok(raw)) => {
                        let tol = 1e-10 * cf.abs().max(1.0);
                        assert!(
                            (cf - raw).abs() <= tol,
                            "{} w={w}: closed={cf} raw={raw}",
                            scheme.spec_string()
                        );
                    }
                    (None, Err(_)) => {}
                    (cf, raw) => panic!(
                        "{} w={w}: closed-form and raw disagree on definedness: {cf:?} vs {raw:?}",
                        scheme.spec_string()
                    ),
                }
            }
        }
    }

    #[test]
    fn gradient_scale_spot_values() {
        let best = ReparamScheme::with_coeffs(Family::Best, TimeMode::Continuous, 1.0, 1.0).unwrap();
        assert!((best.gradient_scale(0.5).unwrap() - 1.0).abs() < 1e-12);
        let exp = ReparamScheme::new(Family::Exp, TimeMode::Continuous).unwrap();
        assert!((exp.gradient_scale(0.0).unwrap() - 1.0).abs() < 1e-12);
        // e^{-1} / (1 - e^{-1})^2, evaluated with 30-digit arithmetic
        let expd = ReparamScheme::new(Family::Exp, TimeMode::Discrete).unwrap();
        assert!((expd.gradient_scale(0.0).unwrap() - 0.920673594207792319).abs() < 1e-12);
    }

    #[test]
    fn gradient_scale_singularities() {
        let relu_c = ReparamScheme::new(Family::ReLU, TimeMode::Continuous).unwrap();
        assert!(relu_c.gradient_scale(-1.0).is_err());
        assert!(relu_c.gradient_scale(0.0).is_err());
        let relu_d = ReparamScheme::new(Family::ReLU, TimeMode::Discrete).unwrap();
        assert!(relu_d.gradient_scale(-1.0).is_err());
        let direct_d = ReparamScheme::new(Family::Direct, TimeMode::Discrete).unwrap();
        assert!(direct_d.gradient_scale(1.0).is_err());
    }

    #[test]
    fn stability_gap_exp_is_exactly_expm1() {
        let exp = ReparamScheme::new(Family::Exp, TimeMode::Continuous).unwrap();
        for &w in &[-3.0, -0.5, 0.0, 1.0, 4.0] {
            for &beta in &[0.01, 0.1, 0.5, 1.0] {
                let gap = exp.stability_gap(w, beta).unwrap();
                assert!(
                    (gap - beta.exp_m1()).abs() < 1e-12 * beta.exp_m1(),
                    "w={w} beta={beta} gap={gap}"
                );
            }
        }
    }

    #[test]
    fn stability_gap_zero_beta_and_direct_closed_form() {
        for scheme in all_schemes() {
            if scheme.time_mode != TimeMode::Continuous {
                continue;
            }
            let w = if scheme.family == Family::Direct { -1.0 } else { 0.5 };
            assert_eq!(scheme.stability_gap(w, 0.0).unwrap(), 0.0);
        }
        let direct = ReparamScheme::new(Family::Direct, TimeMode::Continuous).unwrap();
        let gap = direct.stability_gap(-0.002, 0.001).unwrap();
        assert!((gap - 1.0).abs() < 1e-9, "gap={gap}");
    }

    #[test]
    fn stability_gap_direct_instability_law() {
        let direct = ReparamScheme::new(Family::Direct, TimeMode::Continuous).unwrap();
        let beta = 0.001;
        for &eps in &[1.0, 0.1, 0.01] {
            let w = -beta * (1.0 + eps);
            let gap = direct.stability_gap(w, beta).unwrap();
            assert!((gap - 1.0 / eps).abs() < 1e-6 / eps, "eps={eps} gap={gap}");
        }
        // the ball touching zero diverges
        assert!(direct.stability_gap(-0.001, 0.001).unwrap().is_infinite());
        assert!(direct.stability_gap(-0.0005, 0.001).unwrap().is_infinite());
    }

    #[test]
    fn stability_gap_quadrature_cross_check() {
        let quad = QuadratureConfig::new(0.05, 4000.0, 1e-8).unwrap();
        let direct = ReparamScheme::new(Family::Direct, TimeMode::Continuous).unwrap();
        let gap = direct.stability_gap(-0.002, 0.001).unwrap();
        let gap_q = direct.stability_gap_quadrature(-0.002, 0.001, &quad).unwrap();
        assert!((gap - gap_q).abs() < 1e-4 * gap, "closed={gap} quad={gap_q}");

        let quad = QuadratureConfig::new(0.001, 60.0, 1e-8).unwrap();
        let exp = ReparamScheme::new(Family::Exp, TimeMode::Continuous).unwrap();
        let gap = exp.stability_gap(0.3, 0.25).unwrap();
        let gap_q = exp.stability_gap_quadrature(0.3, 0.25, &quad).unwrap();
        assert!((gap - gap_q).abs() < 1e-6 * gap, "closed={gap} quad={gap_q}");
    }

    #[test]
    fn stability_certificates_hold_on_grid() {
        let schemes = [
            ReparamScheme::new(Family::Exp, TimeMode::Continuous).unwrap(),
            ReparamScheme::new(Family::Softplus, TimeMode::Continuous).unwrap(),
            ReparamScheme::with_coeffs(Family::Best, TimeMode::Continuous, 1.0, 1.0).unwrap(),
        ];
        for scheme in schemes {
            for &w in &grid() {
                for &beta in &[0.01, 0.1, 0.5, 1.0] {
                    let gap = scheme.stability_gap(w, beta).unwrap();
                    let bound = scheme.stability_bound_g(w, beta).unwrap();
                    assert!(
                        gap <= bound + 1e-9,
                        "{} w={w} beta={beta}: gap={gap} bound={bound}",
                        scheme.spec_string()
                    );
                }
            }
        }
    }

    #[test]
    fn endpoint_supremum_dominates_ball_scan() {
        let schemes = [
            ReparamScheme::new(Family::Exp, TimeMode::Continuous).unwrap(),
            ReparamScheme::new(Family::Softplus, TimeMode::Continuous).unwrap(),
            ReparamScheme::with_coeffs(Family::Best, TimeMode::Continuous, 1.0, 1.0).unwrap(),
        ];
        for scheme in schemes {
            for &w in &[-2.0, -0.3, 0.0, 0.7, 3.0] {
                for &beta in &[0.05, 0.4] {
                    let endpoint = scheme.stability_gap(w, beta).unwrap();
                    let f_w = scheme.apply(w).unwrap();
                    let mut scan: f64 = 0.0;
                    for i in 0..=100 {
                        let wt = w - beta + 2.0 * beta * (i as f64) / 100.0;
                        let f_t = scheme.apply(wt).unwrap();
                        scan = scan.max((f_w / f_t - 1.0).abs());
                    }
                    assert!(
                        scan <= endpoint + 1e-12,
                        "{} w={w} beta={beta}: scan={scan} endpoint={endpoint}",
                        scheme.spec_string()
                    );
                }
            }
        }
    }

    #[test]
    fn stability_bound_spot_values() {
        let exp = ReparamScheme::new(Family::Exp, TimeMode::Continuous).unwrap();
        assert!((exp.stability_bound_g(0.0, 0.1).unwrap() - 0.105170918075647625).abs() < 1e-15);
        let best = ReparamScheme::with_coeffs(Family::Best, TimeMode::Continuous, 1.0, 1.0).unwrap();
        assert_eq!(best.stability_bound_g(0.0, 0.5).unwrap(), 0.25);
        let sp = ReparamScheme::new(Family::Softplus, TimeMode::Continuous).unwrap();
        assert_eq!(sp.stability_bound_g(1.0, 0.0).unwrap(), 0.0);
        let direct = ReparamScheme::new(Family::Direct, TimeMode::Continuous).unwrap();
        assert!(direct.stability_bound_g(1.0, 0.1).is_err());
        // the uniform certificate over {|w| <= w_max} dominates every per-w bound
        for &w in &[-3.0, -1.0, 0.0, 2.0, 3.0] {
            assert!(
                best.stability_bound_g(w, 0.5).unwrap()
                    <= best.stability_bound_uniform(3.0, 0.5).unwrap()
            );
        }
        assert_eq!(sp.stability_bound_uniform(3.0, 0.25).unwrap(), 0.25f64.exp_m1());
    }

    #[test]
    fn exp_and_softplus_continuous_are_negative() {
        let exp = ReparamScheme::new(Family::Exp, TimeMode::Continuous).unwrap();
        let sp = ReparamScheme::new(Family::Softplus, TimeMode::Continuous).unwrap();
        for &w in &grid() {
            assert!(exp.apply(w).unwrap() < 0.0);
            assert!(sp.apply(w).unwrap() < 0.0);
        }
    }

    #[test]
    fn best_discrete_stays_in_unit_interval() {
        let best = ReparamScheme::with_coeffs(Family::Best, TimeMode::Discrete, 1.0, 0.5).unwrap();
        for &w in &grid() {
            let f = best.apply(w).unwrap();
            assert!((-1.0..1.0).contains(&f), "w={w} f={f}");
        }
    }

    #[test]
    fn derive_best_scheme_cases() {
        let s = derive_best_scheme(1.0, 0.5, TimeMode::Discrete).unwrap();
        assert!((s.apply(1.0).unwrap() - (1.0 - 1.0 / 1.5)).abs() < 1e-15);
        let s = derive_best_scheme(2.0, 1.0, TimeMode::Continuous).unwrap();
        assert!((s.gradient_scale(1.0).unwrap() - 4.0).abs() < 1e-12);
        assert!(derive_best_scheme(1.0, 0.4, TimeMode::Discrete).is_err());
        assert!(derive_best_scheme(-1.0, 1.0, TimeMode::Continuous).is_err());
    }

    #[test]
    fn invert_round_trips() {
        let cases: Vec<(ReparamScheme, Vec<f64>)> = vec![
            (ReparamScheme::new(Family::Exp, TimeMode::Continuous).unwrap(), vec![-1.0, -0.01, -5.0]),
            (
                ReparamScheme::new(Family::Softplus, TimeMode::Continuous).unwrap(),
                vec![-std::f64::consts::LN_2, -0.003, -8.0],
            ),
            (ReparamScheme::new(Family::ReLU, TimeMode::Continuous).unwrap(), vec![-0.5, -2.0, 0.0]),
            (
                ReparamScheme::with_coeffs(Family::Best, TimeMode::Continuous, 1.0, 1.0).unwrap(),
                vec![-1.0, -0.2, -0.001],
            ),
            (ReparamScheme::new(Family::Direct, TimeMode::Continuous).unwrap(), vec![-1.5, 0.25]),
            (ReparamScheme::new(Family::ReLU, TimeMode::Discrete).unwrap(), vec![0.2, 0.99, 1.0]),
            (ReparamScheme::new(Family::Exp, TimeMode::Discrete).unwrap(), vec![0.01, 0.5, 0.99]),
            (ReparamScheme::new(Family::Softplus, TimeMode::Discrete).unwrap(), vec![0.01, 0.5, 0.99]),
            (ReparamScheme::new(Family::Tanh, TimeMode::Discrete).unwrap(), vec![-0.9, 0.0, 0.9]),
            (
                ReparamScheme::with_coeffs(Family::Best, TimeMode::Discrete, 1.0, 0.5).unwrap(),
                vec![-1.0, 0.0, 0.5, 0.99],
            ),
        ];
        for (scheme, lambdas) in cases {
            for &l in &lambdas {
                let w = scheme.invert(l).unwrap();
                let back = scheme.apply(w).unwrap();
                assert!(
                    (back - l).abs() <= 1e-12 * l.abs().max(1.0),
                    "{}: lambda={l} w={w} back={back}",
                    scheme.spec_string()
                );
            }
        }
        // spot values
        let expc = ReparamScheme::new(Family::Exp, TimeMode::Continuous).unwrap();
        assert_eq!(expc.invert(-1.0).unwrap(), 0.0);
        let spc = ReparamScheme::new(Family::Softplus, TimeMode::Continuous).unwrap();
        assert!(spc.invert(-std::f64::consts::LN_2).unwrap().abs() < 1e-15);
        let bd = ReparamScheme::with_coeffs(Family::Best, TimeMode::Discrete, 1.0, 0.5).unwrap();
        assert!((bd.invert(0.0).unwrap() - 0.5f64.sqrt()).abs() < 1e-15);
        // out of range
        assert!(expc.invert(0.5).is_err());
        assert!(bd.invert(-1.01).is_err());
    }

    #[test]
    fn spec_string_round_trip() {
        for scheme in all_schemes() {
            let parsed = ReparamScheme::parse(&scheme.spec_string()).unwrap();
            assert_eq!(parsed, scheme);
        }
        assert!(ReparamScheme::parse("best:a=1,b=0.5@disc").is_ok());
        assert!(ReparamScheme::parse("tanh@cont").is_err());
        assert!(ReparamScheme::parse("exp").is_err());
        assert!(ReparamScheme::parse("exp:a=1@cont").is_err());
        assert!(ReparamScheme::parse("best:a=0,b=1@cont").is_err());
        assert!(ReparamScheme::parse("warp@cont").is_err());
    }

    #[test]
    fn appendix_identity_best_continuous_exact() {
        let scheme = ReparamScheme::with_coeffs(Family::Best, TimeMode::Continuous, 1.3, 0.7).unwrap();
        for &w in &grid() {
            if w == 0.0 {
                continue;
            }
            let g = scheme.gradient_scale(w).unwrap();
            assert!((g - 2.0 * 1.3 * w.abs()).abs() < 1e-12 * (1.0 + g));
        }
    }
}

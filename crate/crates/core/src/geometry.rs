//! Metric models, symbol-class decay checks, the rescaling operator and the
//! one-step radial normal-form reduction.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::fit::{nonuniform_derivative, power_law_fit, DecayFit, FitError};
use crate::numerics::interp::CubicSpline;
use crate::numerics::quadrature::{geometric_breaks, GaussLegendre};
use crate::scalar::Real;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum GeometryError {
    #[error("radius must be non-negative, got {r}")]
    NegativeRadius { r: f64 },
    #[error("invalid metric: {0}")]
    InvalidMetric(String),
    #[error("support violation: nonzero value at r = {r} (must vanish for r <= {limit})")]
    SupportViolation { r: f64, limit: f64 },
    #[error("rescaling parameter must lie in (0, 1], got {eps}")]
    BadScale { eps: f64 },
    #[error("coordinate change not invertible near x = {x}: jacobian {jacobian}")]
    InversionFailure { x: f64, jacobian: f64 },
    #[error("coefficient A must stay positive, A - 1 = {deviation} at x = {x}")]
    NonPositiveCoefficient { x: f64, deviation: f64 },
    #[error(transparent)]
    Fit(#[from] FitError),
}

/// Value with its first two radial derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jet<T> {
    pub v: T,
    pub d1: T,
    pub d2: T,
}

impl<T: Real> Jet<T> {
    pub fn constant(v: T) -> Self {
        Self {
            v,
            d1: T::zero(),
            d2: T::zero(),
        }
    }
}

fn smoothstep5<T: Real>(t: T) -> (T, T, T) {
    // 6t^5 - 15t^4 + 10t^3 and derivatives; C² at both ends
    let t2 = t * t;
    let t3 = t2 * t;
    let s = t3 * (T::lit(10.0) + t * (T::lit(-15.0) + T::lit(6.0) * t));
    let ds = T::lit(30.0) * t2 * (T::one() - t) * (T::one() - t);
    let dds = T::lit(60.0) * t * (T::one() - t) * (T::one() - T::lit(2.0) * t);
    (s, ds, dds)
}

/// Modified bracket with derivatives: 1 for r ≤ r_flat, r for r ≥ 2 r_flat and a
/// quintic smoothstep blend in between.
pub fn bracket_jet<T: Real>(r: T, r_flat: T) -> Jet<T> {
    if r <= r_flat {
        return Jet::constant(T::one());
    }
    if r >= T::lit(2.0) * r_flat {
        return Jet {
            v: r,
            d1: T::one(),
            d2: T::zero(),
        };
    }
    let t = (r - r_flat) / r_flat;
    let (s, ds, dds) = smoothstep5(t);
    let rm1 = r - T::one();
    Jet {
        v: T::one() + s * rm1,
        d1: ds / r_flat * rm1 + s,
        d2: dds / (r_flat * r_flat) * rm1 + T::lit(2.0) * ds / r_flat,
    }
}

/// Radial perturbation family of the warp f(r) = r(1 + ṽ(r)).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "family")]
pub enum WarpFamily<T> {
    Flat,
    /// ṽ = amplitude · ⟨r⟩^(−ν).
    PowerPerturb { amplitude: T },
    /// ṽ = amplitude · smooth bump supported in (r_flat, 2 r_flat).
    BumpPerturb { amplitude: T },
}

/// Warped-product metric dr² + f(r)² g_S on (0, ∞) × S^(n−1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WarpedMetric<T> {
    pub n: usize,
    pub nu: T,
    pub r_flat: T,
    pub family: WarpFamily<T>,
}

fn bump_jet<T: Real>(x: T) -> Jet<T> {
    // exp(1 − 1/(1 − x²)) on (−1, 1)
    if x.abs() >= T::one() {
        return Jet::constant(T::zero());
    }
    let q = T::one() - x * x;
    let v = (T::one() - T::one() / q).exp();
    let a = -T::lit(2.0) * x / (q * q);
    let da = -T::lit(2.0) / (q * q) - T::lit(8.0) * x * x / (q * q * q);
    Jet {
        v,
        d1: v * a,
        d2: v * (a * a + da),
    }
}

impl<T: Real> WarpedMetric<T> {
    pub fn new(n: usize, nu: T, r_flat: T, family: WarpFamily<T>) -> Result<Self, GeometryError> {
        if n < 2 {
            return Err(GeometryError::InvalidMetric(format!("dimension n = {n} < 2")));
        }
        if !(nu >= T::zero()) {
            return Err(GeometryError::InvalidMetric(format!("decay order nu = {nu} < 0")));
        }
        if !(r_flat >= T::one()) {
            return Err(GeometryError::InvalidMetric(format!(
                "r_flat = {r_flat} must be >= 1 for a monotone bracket"
            )));
        }
        let amp = match family {
            WarpFamily::Flat => T::zero(),
            WarpFamily::PowerPerturb { amplitude } | WarpFamily::BumpPerturb { amplitude } => amplitude,
        };
        if !(amp > -T::one()) {
            return Err(GeometryError::InvalidMetric(format!(
                "amplitude {amp} makes the warp non-positive"
            )));
        }
        Ok(Self {
            n,
            nu,
            r_flat,
            family,
        })
    }

    pub fn flat(n: usize) -> Self {
        Self {
            n,
            nu: T::one(),
            r_flat: T::one(),
            family: WarpFamily::Flat,
        }
    }

    pub fn is_flat(&self) -> bool {
        matches!(self.family, WarpFamily::Flat)
    }

    /// ṽ(r) = f(r)/r − 1 with derivatives.
    pub fn perturbation(&self, r: T) -> Jet<T> {
        match self.family {
            WarpFamily::Flat => Jet::constant(T::zero()),
            WarpFamily::PowerPerturb { amplitude } => {
                let b = bracket_jet(r, self.r_flat);
                let nu = self.nu;
                let p = b.v.powf(-nu);
                Jet {
                    v: amplitude * p,
                    d1: -amplitude * nu * p / b.v * b.d1,
                    d2: amplitude
                        * (nu * (nu + T::one()) * p / (b.v * b.v) * b.d1 * b.d1 - nu * p / b.v * b.d2),
                }
            }
            WarpFamily::BumpPerturb { amplitude } => {
                let c = T::lit(1.5) * self.r_flat;
                let w = T::lit(0.5) * self.r_flat;
                let j = bump_jet((r - c) / w);
                Jet {
                    v: amplitude * j.v,
                    d1: amplitude * j.d1 / w,
                    d2: amplitude * j.d2 / (w * w),
                }
            }
        }
    }

    /// f(r) with derivatives.
    pub fn warp(&self, r: T) -> Jet<T> {
        let p = self.perturbation(r);
        Jet {
            v: r * (T::one() + p.v),
            d1: T::one() + p.v + r * p.d1,
            d2: T::lit(2.0) * p.d1 + r * p.d2,
        }
    }
}

/// The modified bracket ⟨r⟩ of the metric.
pub fn modified_bracket<T: Real>(r: T, metric: &WarpedMetric<T>) -> Result<T, GeometryError> {
    if !(r >= T::zero()) {
        return Err(GeometryError::NegativeRadius { r: r.to_f64_lossy() });
    }
    Ok(bracket_jet(r, metric.r_flat).v)
}

/// Jet of the chart coefficient in (r, θ).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricJet<T> {
    pub g: T,
    pub g_r: T,
    pub g_t: T,
    pub g_rr: T,
    pub g_rt: T,
    pub g_tt: T,
}

type CustomCoefficient<T> = Arc<dyn Fn(T, T) -> MetricJet<T> + Send + Sync>;

/// Chart coefficient families for the two-dimensional classical model.
#[derive(Clone)]
pub enum ChartProfile<T> {
    Flat,
    /// g = 1 + amplitude · ⟨r⟩^(−ν) · (1 + angular_modulation · sin θ).
    Power {
        amplitude: T,
        r_flat: T,
        angular_modulation: T,
    },
    /// g = 1 + amplitude · bump supported in (r_flat, 2 r_flat).
    Bump { amplitude: T, r_flat: T },
    /// Inverse angular metric of a warped product: g = (1 + ṽ(r))^(−2).
    Warped(WarpedMetric<T>),
    Custom(CustomCoefficient<T>),
}

impl<T: fmt::Debug> fmt::Debug for ChartProfile<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Flat => write!(f, "Flat"),
            Self::Power {
                amplitude,
                r_flat,
                angular_modulation,
            } => write!(f, "Power {{ amplitude: {amplitude:?}, r_flat: {r_flat:?}, angular_modulation: {angular_modulation:?} }}"),
            Self::Bump { amplitude, r_flat } => write!(f, "Bump {{ amplitude: {amplitude:?}, r_flat: {r_flat:?} }}"),
            Self::Warped(w) => write!(f, "Warped({w:?})"),
            Self::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

/// Chart model g(r, θ) on (R_M, ∞) × V.
#[derive(Clone, Debug)]
pub struct ChartMetric2D<T> {
    pub profile: ChartProfile<T>,
    pub nu: T,
    pub r_m: T,
}

impl<T: Real> ChartMetric2D<T> {
    pub fn flat() -> Self {
        Self {
            profile: ChartProfile::Flat,
            nu: T::one(),
            r_m: T::one(),
        }
    }

    /// g = 1 + amplitude ⟨r⟩^(−ν).
    pub fn power(amplitude: T, nu: T, r_flat: T) -> Result<Self, GeometryError> {
        Self::power_modulated(amplitude, nu, r_flat, T::zero())
    }

    pub fn power_modulated(
        amplitude: T,
        nu: T,
        r_flat: T,
        angular_modulation: T,
    ) -> Result<Self, GeometryError> {
        if !(nu > T::zero()) {
            return Err(GeometryError::InvalidMetric(format!("decay order nu = {nu} must be > 0")));
        }
        if !(r_flat >= T::one()) {
            return Err(GeometryError::InvalidMetric(format!("r_flat = {r_flat} must be >= 1")));
        }
        if !(amplitude.abs() * (T::one() + angular_modulation.abs()) < T::one()) {
            return Err(GeometryError::InvalidMetric(
                "coefficient not uniformly elliptic: need |amplitude|(1 + |modulation|) < 1".into(),
            ));
        }
        Ok(Self {
            profile: ChartProfile::Power {
                amplitude,
                r_flat,
                angular_modulation,
            },
            nu,
            r_m: T::one(),
        })
    }

    pub fn bump(amplitude: T, r_flat: T) -> Result<Self, GeometryError> {
        if !(amplitude.abs() < T::one()) || !(r_flat >= T::one()) {
            return Err(GeometryError::InvalidMetric("bump needs |amplitude| < 1, r_flat >= 1".into()));
        }
        Ok(Self {
            profile: ChartProfile::Bump { amplitude, r_flat },
            nu: T::one(),
            r_m: T::one(),
        })
    }

    pub fn from_warped(w: &WarpedMetric<T>) -> Self {
        Self {
            profile: ChartProfile::Warped(*w),
            nu: w.nu,
            r_m: T::one(),
        }
    }

    pub fn custom(
        coeff: impl Fn(T, T) -> MetricJet<T> + Send + Sync + 'static,
        nu: T,
        r_m: T,
    ) -> Self {
        Self {
            profile: ChartProfile::Custom(Arc::new(coeff)),
            nu,
            r_m,
        }
    }

    pub fn with_inner_radius(mut self, r_m: T) -> Self {
        self.r_m = r_m;
        self
    }

    pub fn is_theta_independent(&self) -> bool {
        match &self.profile {
            ChartProfile::Power {
                angular_modulation, ..
            } => *angular_modulation == T::zero(),
            ChartProfile::Custom(_) => false,
            _ => true,
        }
    }

    pub fn is_flat(&self) -> bool {
        match &self.profile {
            ChartProfile::Flat => true,
            ChartProfile::Power { amplitude, .. } | ChartProfile::Bump { amplitude, .. } => {
                *amplitude == T::zero()
            }
            ChartProfile::Warped(w) => w.is_flat(),
            ChartProfile::Custom(_) => false,
        }
    }

    /// ḡ(θ): the angular coefficient at infinity (1 for every built-in family).
    pub fn g_bar(&self, theta: T) -> T {
        match &self.profile {
            ChartProfile::Custom(c) => c(T::lit(1e12), theta).g,
            _ => T::one(),
        }
    }

    /// g and its derivatives up to order 2.
    pub fn jet(&self, r: T, theta: T) -> MetricJet<T> {
        match &self.profile {
            ChartProfile::Flat => MetricJet {
                g: T::one(),
                g_r: T::zero(),
                g_t: T::zero(),
                g_rr: T::zero(),
                g_rt: T::zero(),
                g_tt: T::zero(),
            },
            ChartProfile::Power {
                amplitude,
                r_flat,
                angular_modulation,
            } => {
                let b = bracket_jet(r, *r_flat);
                let nu = self.nu;
                let p = b.v.powf(-nu);
                let e = *amplitude * p;
                let e_r = -*amplitude * nu * p / b.v * b.d1;
                let e_rr = *amplitude
                    * (nu * (nu + T::one()) * p / (b.v * b.v) * b.d1 * b.d1 - nu * p / b.v * b.d2);
                let m = *angular_modulation;
                let (s, c) = theta.sin_cos();
                let a = T::one() + m * s;
                MetricJet {
                    g: T::one() + e * a,
                    g_r: e_r * a,
                    g_t: e * m * c,
                    g_rr: e_rr * a,
                    g_rt: e_r * m * c,
                    g_tt: -e * m * s,
                }
            }
            ChartProfile::Bump { amplitude, r_flat } => {
                let c = T::lit(1.5) * *r_flat;
                let w = T::lit(0.5) * *r_flat;
                let j = bump_jet((r - c) / w);
                MetricJet {
                    g: T::one() + *amplitude * j.v,
                    g_r: *amplitude * j.d1 / w,
                    g_t: T::zero(),
                    g_rr: *amplitude * j.d2 / (w * w),
                    g_rt: T::zero(),
                    g_tt: T::zero(),
                }
            }
            ChartProfile::Warped(wm) => {
                let p = wm.perturbation(r);
                let q = T::one() + p.v;
                let g = T::one() / (q * q);
                MetricJet {
                    g,
                    g_r: -T::lit(2.0) * p.d1 / (q * q * q),
                    g_t: T::zero(),
                    g_rr: T::lit(6.0) * p.d1 * p.d1 / (q * q * q * q) - T::lit(2.0) * p.d2 / (q * q * q),
                    g_rt: T::zero(),
                    g_tt: T::zero(),
                }
            }
            ChartProfile::Custom(f) => f(r, theta),
        }
    }
}

/// Least-squares decay fit of the j-th radial derivative of sampled values.
pub fn symbol_decay_fit<T: Real>(samples: &[(T, T)], j: usize) -> Result<DecayFit<T>, GeometryError> {
    if samples.len() < 8 {
        return Err(FitError::TooFewSamples {
            got: samples.len(),
            need: 8,
        }
        .into());
    }
    let (lo, hi) = samples.iter().fold((T::infinity(), T::zero()), |(lo, hi), (r, _)| {
        (lo.min(*r), hi.max(*r))
    });
    if !(lo > T::zero()) {
        return Err(FitError::NonPositiveAbscissa { r: lo.to_f64_lossy() }.into());
    }
    let span = hi / lo;
    if span < T::lit(100.0) {
        return Err(FitError::InsufficientSpan {
            span: span.to_f64_lossy(),
            need: 100.0,
        }
        .into());
    }
    if samples.iter().all(|(_, v)| *v == T::zero()) {
        return Err(FitError::IdenticallyZero.into());
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal));
    let d = nonuniform_derivative(&sorted, j);
    if d.iter().all(|(_, v)| *v == T::zero()) {
        return Err(FitError::IdenticallyZero.into());
    }
    let xs: Vec<T> = d.iter().map(|p| p.0).collect();
    let ys: Vec<T> = d.iter().map(|p| p.1).collect();
    Ok(power_law_fit(&xs, &ys)?)
}

/// Log-spaced sample radii.
pub fn log_grid<T: Real>(lo: T, hi: T, count: usize) -> Vec<T> {
    assert!(count >= 2 && lo > T::zero() && hi > lo);
    let q = (hi / lo).ln() / T::from_count(count - 1);
    (0..count).map(|k| lo * (q * T::from_count(k)).exp()).collect()
}

/// Outcome of the symbol-class gate for a metric.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SymbolClassReport {
    pub nu: f64,
    /// Fitted exponents of ṽ (or g − 1) and its first two derivatives; `None` when the
    /// perturbation vanishes identically on the sampled window.
    pub exponents: [Option<f64>; 3],
    pub pass: bool,
    pub reason: String,
}

fn gate_from_samples(nu: f64, samples: &[(f64, f64)]) -> SymbolClassReport {
    if !(nu > 0.0) {
        return SymbolClassReport {
            nu,
            exponents: [None; 3],
            pass: false,
            reason: format!("decay order nu = {nu} is not positive"),
        };
    }
    let mut exponents = [None; 3];
    let mut pass = true;
    let mut reason = String::from("ok");
    for (j, slot) in exponents.iter_mut().enumerate() {
        match symbol_decay_fit(samples, j) {
            Ok(fit) => {
                *slot = Some(fit.exponent);
                let limit = -nu - j as f64 + 0.1;
                if fit.exponent > limit {
                    pass = false;
                    reason = format!(
                        "derivative {j}: fitted exponent {:.3} exceeds {:.3}",
                        fit.exponent, limit
                    );
                }
            }
            Err(GeometryError::Fit(FitError::IdenticallyZero)) => {}
            Err(e) => {
                pass = false;
                reason = e.to_string();
            }
        }
    }
    SymbolClassReport {
        nu,
        exponents,
        pass,
        reason,
    }
}

/// Verifies ṽ ∈ S^(−ν) on r ∈ [10 r_flat, 10³ r_flat].
pub fn warped_symbol_class(metric: &WarpedMetric<f64>) -> SymbolClassReport {
    let rs = log_grid(10.0 * metric.r_flat, 1e3 * metric.r_flat, 40);
    let samples: Vec<(f64, f64)> = rs.iter().map(|&r| (r, metric.perturbation(r).v)).collect();
    gate_from_samples(metric.nu, &samples)
}

/// Verifies g − 1 ∈ S^(−ν) along θ = `theta` on r ∈ [10 r_ref, 10³ r_ref].
pub fn chart_symbol_class(metric: &ChartMetric2D<f64>, theta: f64, r_ref: f64) -> SymbolClassReport {
    let rs = log_grid(10.0 * r_ref, 1e3 * r_ref, 40);
    let samples: Vec<(f64, f64)> = rs
        .iter()
        .map(|&r| (r, metric.jet(r, theta).g - 1.0))
        .collect();
    gate_from_samples(metric.nu, &samples)
}

/// Radial deviation a(x) = A(x) − 1 of a coefficient A. Working with the deviation
/// keeps the S^(−2ν) remainder above round-off.
#[derive(Clone)]
pub struct RadialCoefficient<T> {
    deviation: Arc<dyn Fn(T) -> T + Send + Sync>,
}

impl<T: Real> RadialCoefficient<T> {
    pub fn from_deviation(a: impl Fn(T) -> T + Send + Sync + 'static) -> Self {
        Self {
            deviation: Arc::new(a),
        }
    }

    pub fn deviation(&self, x: T) -> T {
        (self.deviation)(x)
    }

    pub fn value(&self, x: T) -> T {
        T::one() + self.deviation(x)
    }
}

impl<T> fmt::Debug for RadialCoefficient<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("RadialCoefficient(..)")
    }
}

/// Sampling and quadrature controls of the normal-form step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalFormOptions<T> {
    /// Fit window for A_next − 1, as multiples of R.
    pub fit_lo: T,
    pub fit_hi: T,
    pub fit_samples: usize,
    /// Gauss–Legendre points per geometric panel of ratio 2.
    pub quad_points: usize,
    /// Smallest admissible 1 + σ + xσ'.
    pub jacobian_floor: T,
}

impl<T: Real> Default for NormalFormOptions<T> {
    fn default() -> Self {
        Self {
            fit_lo: T::lit(1e3),
            fit_hi: T::lit(1e8),
            fit_samples: 41,
            quad_points: 12,
            jacobian_floor: T::lit(0.1),
        }
    }
}

/// Result of one normal-form step.
#[derive(Clone, Debug)]
pub struct NormalFormStep<T> {
    a: RadialCoefficient<T>,
    r_inner: T,
    gl: GaussLegendre<T>,
    /// Fit of the input deviation A − 1 on the fit window.
    pub input_fit: Option<DecayFit<T>>,
    /// Fit of A_next − 1; `None` when it vanishes identically.
    pub fit: Option<DecayFit<T>>,
    /// Observed range of r_k / r = 1 + σ on [R, fit_hi·R].
    pub ratio_bounds: (T, T),
    pub min_jacobian: T,
}

impl<T: Real> NormalFormStep<T> {
    /// σ(x) = (2x)⁻¹ ∫_R^x (1 − A(t)) dt.
    pub fn sigma(&self, x: T) -> T {
        if x == self.r_inner {
            return T::zero();
        }
        let breaks = geometric_breaks(self.r_inner, x, T::lit(2.0));
        let integral = self.gl.integrate_panels(&breaks, |t| -self.a.deviation(t));
        integral / (T::lit(2.0) * x)
    }

    /// 1 + σ + xσ' = 1 − (A − 1)/2 by the balance equation.
    pub fn jacobian(&self, x: T) -> T {
        T::one() - self.a.deviation(x) / T::lit(2.0)
    }

    /// Old radius as a function of the new one: x = y + yσ(y).
    pub fn old_coordinate(&self, y: T) -> T {
        y * (T::one() + self.sigma(y))
    }

    /// Inverts x = y + yσ(y) by Newton's method.
    pub fn new_coordinate(&self, x: T) -> Result<T, GeometryError> {
        let mut y = x;
        for _ in 0..60 {
            let jac = self.jacobian(y);
            if !(jac > T::zero()) {
                return Err(GeometryError::InversionFailure {
                    x: y.to_f64_lossy(),
                    jacobian: jac.to_f64_lossy(),
                });
            }
            let dy = (self.old_coordinate(y) - x) / jac;
            y -= dy;
            if dy.abs() <= T::epsilon() * T::lit(8.0) * y.abs() {
                return Ok(y);
            }
        }
        Err(GeometryError::InversionFailure {
            x: x.to_f64_lossy(),
            jacobian: self.jacobian(y).to_f64_lossy(),
        })
    }

    /// A_next(y) − 1 where A_next(y) = A(y + yσ(y)) (1 + σ + yσ')².
    pub fn next_deviation(&self, y: T) -> T {
        let a_y = self.a.deviation(y);
        let a_d = self.a.deviation(self.old_coordinate(y));
        let quarter = T::lit(0.25);
        (a_d - a_y) + a_d * (-a_y + quarter * a_y * a_y) + quarter * a_y * a_y
    }

    pub fn next_coefficient(&self) -> RadialCoefficient<T> {
        let step = self.clone();
        RadialCoefficient::from_deviation(move |y| step.next_deviation(y))
    }
}

/// One Appendix-style normal-form step for the radial coefficient A.
pub fn normal_form_step<T: Real>(
    a: &RadialCoefficient<T>,
    nu: T,
    r_inner: T,
    opts: NormalFormOptions<T>,
) -> Result<NormalFormStep<T>, GeometryError> {
    if !(r_inner > T::zero()) {
        return Err(GeometryError::NegativeRadius {
            r: r_inner.to_f64_lossy(),
        });
    }
    let xs = log_grid(r_inner, opts.fit_hi * r_inner, 200);
    let mut min_jac = T::infinity();
    for &x in &xs {
        let dev = a.deviation(x);
        if !(dev > -T::one()) {
            return Err(GeometryError::NonPositiveCoefficient {
                x: x.to_f64_lossy(),
                deviation: dev.to_f64_lossy(),
            });
        }
        let jac = T::one() - dev / T::lit(2.0);
        if jac < opts.jacobian_floor {
            return Err(GeometryError::InversionFailure {
                x: x.to_f64_lossy(),
                jacobian: jac.to_f64_lossy(),
            });
        }
        min_jac = min_jac.min(jac);
    }
    let mut step = NormalFormStep {
        a: a.clone(),
        r_inner,
        gl: GaussLegendre::new(opts.quad_points),
        input_fit: None,
        fit: None,
        ratio_bounds: (T::one(), T::one()),
        min_jacobian: min_jac,
    };
    let (mut lo, mut hi) = (T::infinity(), T::neg_infinity());
    for &x in &xs {
        let q = T::one() + step.sigma(x);
        lo = lo.min(q);
        hi = hi.max(q);
    }
    step.ratio_bounds = (lo, hi);
    let fit_r = log_grid(opts.fit_lo * r_inner, opts.fit_hi * r_inner, opts.fit_samples);
    let input: Vec<(T, T)> = fit_r.iter().map(|&x| (x, a.deviation(x))).collect();
    step.input_fit = match symbol_decay_fit(&input, 0) {
        Ok(f) => Some(f),
        Err(GeometryError::Fit(FitError::IdenticallyZero)) => None,
        Err(e) => return Err(e),
    };
    let next: Vec<(T, T)> = fit_r.iter().map(|&y| (y, step.next_deviation(y))).collect();
    step.fit = match symbol_decay_fit(&next, 0) {
        Ok(f) => Some(f),
        Err(GeometryError::Fit(FitError::IdenticallyZero)) => None,
        Err(e) => return Err(e),
    };
    let _ = nu;
    Ok(step)
}

/// Sampled function on a tensor grid in (r, θ), stored r-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GriddedField<T> {
    pub r: Vec<T>,
    pub theta: Vec<T>,
    pub values: Vec<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RescaleDirection {
    Forward,
    Inverse,
}

impl<T: Real> GriddedField<T> {
    pub fn from_fn(r: Vec<T>, theta: Vec<T>, f: impl Fn(T, T) -> T) -> Self {
        let values = r
            .iter()
            .flat_map(|&ri| theta.iter().map(move |&tj| (ri, tj)))
            .map(|(ri, tj)| f(ri, tj))
            .collect();
        Self { r, theta, values }
    }

    pub fn at(&self, i: usize, j: usize) -> T {
        self.values[i * self.theta.len() + j]
    }

    /// Resamples along r with a natural cubic spline; zero outside the original range.
    pub fn resample_r(&self, new_r: &[T]) -> Self {
        let nt = self.theta.len();
        let mut values = vec![T::zero(); new_r.len() * nt];
        let lo = self.r[0];
        let hi = *self.r.last().expect("non-empty grid");
        for j in 0..nt {
            let col: Vec<T> = (0..self.r.len()).map(|i| self.at(i, j)).collect();
            let sp = CubicSpline::new(self.r.clone(), col);
            for (i, &x) in new_r.iter().enumerate() {
                if x >= lo && x <= hi {
                    values[i * nt + j] = sp.eval(x);
                }
            }
        }
        Self {
            r: new_r.to_vec(),
            theta: self.theta.clone(),
            values,
        }
    }

    /// Discrete L²(f(r)^(n−1) dr dθ) norm by the trapezoid rule.
    pub fn l2_norm(&self, metric: &WarpedMetric<T>) -> T {
        let tw = trapezoid_weights(&self.theta);
        let rw = trapezoid_weights(&self.r);
        let mut acc = T::zero();
        for (i, &ri) in self.r.iter().enumerate() {
            let fw = metric.warp(ri).v.powi(metric.n as i32 - 1);
            for (j, &w) in tw.iter().enumerate() {
                let v = self.at(i, j);
                acc += v * v * fw * rw[i] * w;
            }
        }
        acc.sqrt()
    }
}

fn trapezoid_weights<T: Real>(x: &[T]) -> Vec<T> {
    let n = x.len();
    if n == 1 {
        return vec![T::one()];
    }
    let half = T::lit(0.5);
    (0..n)
        .map(|i| {
            let left = if i > 0 { x[i] - x[i - 1] } else { T::zero() };
            let right = if i + 1 < n { x[i + 1] - x[i] } else { T::zero() };
            half * (left + right)
        })
        .collect()
}

/// (D_ε v)(r, θ) = ε^(n/2) v(εr, θ) and its inverse, on the correspondingly scaled grid.
pub fn apply_rescaling<T: Real>(
    v: &GriddedField<T>,
    eps: T,
    direction: RescaleDirection,
    n: usize,
    r_m: T,
) -> Result<GriddedField<T>, GeometryError> {
    if !(eps > T::zero() && eps <= T::one()) {
        return Err(GeometryError::BadScale { eps: eps.to_f64_lossy() });
    }
    let limit = match direction {
        RescaleDirection::Forward => r_m,
        RescaleDirection::Inverse => r_m / eps,
    };
    let nt = v.theta.len();
    for (i, &ri) in v.r.iter().enumerate() {
        if ri <= limit && (0..nt).any(|j| v.at(i, j) != T::zero()) {
            return Err(GeometryError::SupportViolation {
                r: ri.to_f64_lossy(),
                limit: limit.to_f64_lossy(),
            });
        }
    }
    let half_n = T::from_count(n) / T::lit(2.0);
    let (r, amp) = match direction {
        RescaleDirection::Forward => (v.r.iter().map(|&x| x / eps).collect(), eps.powf(half_n)),
        RescaleDirection::Inverse => (v.r.iter().map(|&x| x * eps).collect(), eps.powf(-half_n)),
    };
    Ok(GriddedField {
        r,
        theta: v.theta.clone(),
        values: v.values.iter().map(|&x| x * amp).collect(),
    })
}

/// γ(k) from γ(0) = 0, γ(k+1) = 2γ(k) + 1. Valid for k ≤ 64.
pub fn gamma(k: u32) -> u64 {
    assert!(k <= 64, "gamma({k}) overflows u64");
    let mut g: u64 = 0;
    for _ in 0..k {
        g = 2 * g + 1;
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    fn metric(r_flat: f64) -> WarpedMetric<f64> {
        WarpedMetric::new(3, 1.0, r_flat, WarpFamily::PowerPerturb { amplitude: 0.3 }).unwrap()
    }

    #[test]
    fn bracket_zones() {
        let m = metric(10.0);
        assert_eq!(modified_bracket(0.5, &m).unwrap(), 1.0);
        assert_eq!(modified_bracket(100.0, &m).unwrap(), 100.0);
        let b = modified_bracket(15.0, &m).unwrap();
        assert!(b > 1.0 && b < 15.0);
        assert!(modified_bracket(-1.0, &m).is_err());
        let mut prev = 0.0;
        for k in 0..=20000 {
            let r = 5.0 + 20.0 * k as f64 / 20000.0;
            let v = modified_bracket(r, &m).unwrap();
            assert!(v >= prev);
            prev = v;
        }
    }

    #[test]
    fn bracket_derivatives_match_differences() {
        for &r in &[10.5f64, 12.0, 15.0, 19.9] {
            let h = 1e-5;
            let j = bracket_jet(r, 10.0);
            let d1 = (bracket_jet(r + h, 10.0).v - bracket_jet(r - h, 10.0).v) / (2.0 * h);
            let d2 = (bracket_jet(r + h, 10.0).d1 - bracket_jet(r - h, 10.0).d1) / (2.0 * h);
            assert!((j.d1 - d1).abs() < 1e-6);
            assert!((j.d2 - d2).abs() < 1e-5);
        }
        // C² across the blend edges
        for &edge in &[10.0f64, 20.0] {
            let a = bracket_jet(edge - 1e-9, 10.0);
            let b = bracket_jet(edge + 1e-9, 10.0);
            assert!((a.d1 - b.d1).abs() < 1e-6 && (a.d2 - b.d2).abs() < 1e-6);
        }
    }

    #[test]
    fn chart_jet_consistency() {
        let g = ChartMetric2D::power_modulated(0.3, 1.0, 2.0, 0.5).unwrap();
        let (r, t) = (3.1f64, 0.4f64);
        let h = 1e-5;
        let j = g.jet(r, t);
        let fr = (g.jet(r + h, t).g - g.jet(r - h, t).g) / (2.0 * h);
        let ft = (g.jet(r, t + h).g - g.jet(r, t - h).g) / (2.0 * h);
        let frt = (g.jet(r, t + h).g_r - g.jet(r, t - h).g_r) / (2.0 * h);
        let ftt = (g.jet(r, t + h).g_t - g.jet(r, t - h).g_t) / (2.0 * h);
        let frr = (g.jet(r + h, t).g_r - g.jet(r - h, t).g_r) / (2.0 * h);
        assert!((j.g_r - fr).abs() < 1e-8);
        assert!((j.g_t - ft).abs() < 1e-8);
        assert!((j.g_rt - frt).abs() < 1e-8);
        assert!((j.g_tt - ftt).abs() < 1e-8);
        assert!((j.g_rr - frr).abs() < 1e-7);
    }

    #[test]
    fn warped_chart_matches_inverse_square() {
        let w = metric(2.0);
        let c = ChartMetric2D::from_warped(&w);
        let r: f64 = 7.3;
        let f = w.warp(r).v;
        assert!((c.jet(r, 0.0).g - r * r / (f * f)).abs() < 1e-14);
        let h = 1e-5;
        let d = (c.jet(r + h, 0.0).g - c.jet(r - h, 0.0).g) / (2.0 * h);
        assert!((c.jet(r, 0.0).g_r - d).abs() < 1e-9);
    }

    #[test]
    fn decay_fit_examples() {
        let rs: Vec<f64> = log_grid(10.0, 1e4, 30);
        let s: Vec<(f64, f64)> = rs.iter().map(|&r| (r, r.powf(-0.5))).collect();
        assert!((symbol_decay_fit(&s, 0).unwrap().exponent + 0.5).abs() < 0.02);
        let s: Vec<(f64, f64)> = rs
            .iter()
            .map(|&r| (r, 3.0 * r.powf(-1.5) * (1.0 + 0.1 * r.ln().sin())))
            .collect();
        let e = symbol_decay_fit(&s, 0).unwrap().exponent;
        assert!((-1.6..=-1.4).contains(&e));
        let s: Vec<(f64, f64)> = rs.iter().map(|&r| (r, 1.0)).collect();
        assert!(symbol_decay_fit(&s, 0).unwrap().exponent.abs() < 1e-12);
        let z: Vec<(f64, f64)> = rs.iter().map(|&r| (r, 0.0)).collect();
        assert_eq!(
            symbol_decay_fit(&z, 0),
            Err(GeometryError::Fit(FitError::IdenticallyZero))
        );
        assert!(symbol_decay_fit(&s[..5], 0).is_err());
    }

    #[test]
    fn derivative_fits_follow_symbol_orders() {
        let rep = warped_symbol_class(&metric(10.0));
        assert!(rep.pass, "{}", rep.reason);
        let e = rep.exponents;
        assert!((e[0].unwrap() + 1.0).abs() < 0.05);
        assert!((e[1].unwrap() + 2.0).abs() < 0.05);
        assert!((e[2].unwrap() + 3.0).abs() < 0.05);
        let broken = WarpedMetric::new(3, 0.0, 10.0, WarpFamily::PowerPerturb { amplitude: 0.3 }).unwrap();
        assert!(!warped_symbol_class(&broken).pass);
        let bump = WarpedMetric::new(3, 1.0, 10.0, WarpFamily::BumpPerturb { amplitude: 0.2 }).unwrap();
        assert!(warped_symbol_class(&bump).pass);
    }

    #[test]
    fn normal_form_identity() {
        let a = RadialCoefficient::from_deviation(|_| 0.0);
        let st = normal_form_step(&a, 1.0, 1.0, NormalFormOptions::default()).unwrap();
        assert_eq!(st.sigma(50.0), 0.0);
        assert_eq!(st.next_deviation(50.0), 0.0);
        assert!(st.fit.is_none());
    }

    #[test]
    fn normal_form_closed_form_sigma() {
        let a = RadialCoefficient::from_deviation(|x: f64| x.powf(-0.5));
        let st = normal_form_step(&a, 0.5, 1.0, NormalFormOptions::default()).unwrap();
        for &x in &[1.0f64, 2.0, 37.5, 1e4, 1e7] {
            let exact = -x.powf(-0.5) + 1.0 / x;
            assert!((st.sigma(x) - exact).abs() < 1e-12 * (1.0 + exact.abs()), "x={x}");
        }
        // one step improves the decay by at least nu - 0.2
        let gain = st.input_fit.unwrap().exponent - st.fit.unwrap().exponent;
        assert!(gain >= 0.5 - 0.2, "gain {gain}");
    }

    #[test]
    fn normal_form_inverse_map() {
        let a = RadialCoefficient::from_deviation(|x: f64| 0.2 / bracket_jet(x, 1.0).v);
        let st = normal_form_step(&a, 1.0, 1.0, NormalFormOptions::default()).unwrap();
        for &x in &[1.5, 10.0, 1e3] {
            let y = st.new_coordinate(x).unwrap();
            assert!((st.old_coordinate(y) - x).abs() < 1e-10 * x);
        }
        let f = st.fit.unwrap();
        assert!(f.exponent <= -1.8, "{}", f.exponent);
        assert!((st.input_fit.unwrap().exponent + 1.0).abs() < 0.01);
        assert!(st.ratio_bounds.0 > 0.5 && st.ratio_bounds.1 <= 1.0 + 1e-12);
    }

    #[test]
    fn normal_form_rejects_degenerate_jacobian() {
        let a = RadialCoefficient::from_deviation(|x: f64| 1.9 / x.sqrt() * 2.0);
        assert!(matches!(
            normal_form_step(&a, 0.5, 1.0, NormalFormOptions::default()),
            Err(GeometryError::InversionFailure { .. })
        ));
    }

    #[test]
    fn rescaling_examples() {
        let m = metric(10.0);
        let r: Vec<f64> = (0..400).map(|i| 50.0 + 0.25 * i as f64).collect();
        let th: Vec<f64> = (0..5).map(|j| 0.1 * j as f64).collect();
        let bump = |x: f64, _t: f64| bump_jet((x - 100.0) / 20.0).v;
        let v = GriddedField::from_fn(r.clone(), th.clone(), bump);
        let id = apply_rescaling(&v, 1.0, RescaleDirection::Forward, 3, 1.0).unwrap();
        assert_eq!(id, v);
        let w = apply_rescaling(&v, 0.1, RescaleDirection::Forward, 3, 1.0).unwrap();
        let imax = (0..w.r.len()).max_by(|&a, &b| w.at(a, 0).partial_cmp(&w.at(b, 0)).unwrap()).unwrap();
        assert!((w.r[imax] - 1000.0).abs() < 1e-9);
        assert!((w.at(imax, 0) - 0.1f64.powf(1.5)).abs() < 1e-12);
        // round trip through a resampled grid
        let fine: Vec<f64> = (0..4000).map(|i| 500.0 + 0.25 * i as f64).collect();
        let w2 = w.resample_r(&fine);
        let back = apply_rescaling(&w2, 0.1, RescaleDirection::Inverse, 3, 1.0).unwrap().resample_r(&r);
        let err = back
            .values
            .iter()
            .zip(&v.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err <= 1e-6, "{err}");
        // norm comparison
        let ratio = w.l2_norm(&m) / v.l2_norm(&m);
        assert!(ratio > 1.0 / 1.1 && ratio < 1.1, "{ratio}");
        // support violation
        let bad = GriddedField::from_fn(vec![0.5, 1.0, 2.0], vec![0.0], |_, _| 1.0);
        assert!(apply_rescaling(&bad, 0.5, RescaleDirection::Forward, 3, 1.0).is_err());
    }

    #[test]
    fn gamma_recursion() {
        assert_eq!(gamma(0), 0);
        assert_eq!(gamma(3), 7);
        assert_eq!(gamma(10), 1023);
        assert_eq!(gamma(64), u64::MAX);
    }

    #[test]
    fn single_precision_bracket() {
        let j = bracket_jet(15.0f32, 10.0);
        assert!(j.v > 1.0 && j.v < 15.0);
    }
}

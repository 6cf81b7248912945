//! Oscillatory-integral kernels
//! I^h(s; x, x′) = (2πh)^{−2} ∫∫ A e^{(i/h)Φ} dϱ dϑ,  Φ = ϱψ(x, ϑ) − sϱ² − ϱψ′(x′, ϑ),
//! evaluated by tensor Gauss–Legendre quadrature on eikonal tables, and the decay scans built on them.

use std::f64::consts::PI;
use std::io::Write;
use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::numerics::rng;
use crate::numerics::{power_law_fit, DecayFit, FitError, GaussLegendre};
use crate::phase::{EikonalTable, PhaseError};

type C64 = Complex64;

#[derive(Debug, Error)]
pub enum OscillatoryError {
    #[error(transparent)]
    Phase(#[from] PhaseError),
    #[error("invalid kernel spec: {0}")]
    InvalidSpec(String),
    #[error("Nyquist violation on the {axis} axis: {needed} nodes needed, at most {max} allowed")]
    Nyquist { axis: &'static str, needed: usize, max: usize },
    #[error(transparent)]
    Fit(#[from] FitError),
}

/// Spatial arguments (r, θ, r′, θ′) of a kernel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KernelPoint {
    pub r: f64,
    pub theta: f64,
    pub r_prime: f64,
    pub theta_prime: f64,
}

impl KernelPoint {
    pub fn new(r: f64, theta: f64, r_prime: f64, theta_prime: f64) -> Self {
        Self {
            r,
            theta,
            r_prime,
            theta_prime,
        }
    }

    pub fn swapped(&self) -> Self {
        Self::new(self.r_prime, self.theta_prime, self.r, self.theta)
    }

    /// ⟨s, r, r′⟩.
    pub fn bracket(&self, s: f64) -> f64 {
        (1.0 + s * s + self.r * self.r + self.r_prime * self.r_prime).sqrt()
    }
}

/// A(x, x′, ϱ, ϑ).
pub type Amplitude = Arc<dyn Fn(&KernelPoint, f64, f64) -> C64 + Send + Sync>;

/// Symbol of one variable set, a(r, θ, ϱ, ϑ).
pub type Symbol = Arc<dyn Fn(f64, f64, f64, f64) -> C64 + Send + Sync>;

/// exp(1 − 1/(1 − t²)) on |t| < 1, zero outside; equals 1 at t = 0.
pub fn bump(t: f64) -> f64 {
    if t.abs() < 1.0 {
        (1.0 - 1.0 / (1.0 - t * t)).exp()
    } else {
        0.0
    }
}

/// Tensor bump on the box rho × vartheta, independent of (x, x′).
pub fn bump_amplitude(rho: (f64, f64), vartheta: (f64, f64)) -> Amplitude {
    let (rc, rw) = ((rho.0 + rho.1) / 2.0, (rho.1 - rho.0) / 2.0);
    let (vc, vw) = ((vartheta.0 + vartheta.1) / 2.0, (vartheta.1 - vartheta.0) / 2.0);
    Arc::new(move |_p, q, v| C64::new(bump((q - rc) / rw) * bump((v - vc) / vw), 0.0))
}

/// A = a(x, ϱ, ϑ)·conj(b(x′, ϱ, ϑ)).
pub fn product_amplitude(a: Symbol, b: Symbol) -> Amplitude {
    Arc::new(move |p, q, v| a(p.r, p.theta, q, v) * b(p.r_prime, p.theta_prime, q, v).conj())
}

#[derive(Clone)]
pub struct FioKernelSpec<'a> {
    pub table: &'a EikonalTable,
    pub table_prime: &'a EikonalTable,
    pub amplitude: Amplitude,
    /// Compact (ϱ, ϑ) box containing supp A.
    pub rho_support: (f64, f64),
    pub vartheta_support: (f64, f64),
    pub h: f64,
}

impl<'a> FioKernelSpec<'a> {
    pub fn new(
        table: &'a EikonalTable,
        table_prime: &'a EikonalTable,
        amplitude: Amplitude,
        rho_support: (f64, f64),
        vartheta_support: (f64, f64),
        h: f64,
    ) -> Result<Self, OscillatoryError> {
        if !(h > 0.0 && h.is_finite()) {
            return Err(OscillatoryError::InvalidSpec(format!("h = {h} must be positive")));
        }
        if !(rho_support.0 < rho_support.1 && vartheta_support.0 < vartheta_support.1) {
            return Err(OscillatoryError::InvalidSpec("empty support box".into()));
        }
        for t in [table, table_prime] {
            if !(t.domain.admits_rho(rho_support.0) && t.domain.admits_rho(rho_support.1)) {
                return Err(OscillatoryError::InvalidSpec(format!(
                    "ϱ support {rho_support:?} outside the energy window {:?}",
                    t.domain.energies
                )));
            }
        }
        Ok(Self {
            table,
            table_prime,
            amplitude,
            rho_support,
            vartheta_support,
            h,
        })
    }

    pub fn with_h(&self, h: f64) -> Self {
        Self { h, ..self.clone() }
    }

    pub fn with_amplitude(&self, amplitude: Amplitude) -> Self {
        Self {
            amplitude,
            ..self.clone()
        }
    }

    pub fn rho_sup(&self) -> f64 {
        self.rho_support.0.abs().max(self.rho_support.1.abs())
    }

    pub fn rho_centre(&self) -> f64 {
        (self.rho_support.0 + self.rho_support.1) / 2.0
    }

    pub fn vartheta_centre(&self) -> f64 {
        (self.vartheta_support.0 + self.vartheta_support.1) / 2.0
    }

    /// Whether every (x, ϑ) and (x′, ϑ) with ϑ in the support lies inside the tables.
    pub fn covers(&self, p: &KernelPoint) -> bool {
        let (va, vb) = self.vartheta_support;
        [va, vb].iter().all(|&v| {
            self.table.in_grid(p.r, p.theta, v) && self.table_prime.in_grid(p.r_prime, p.theta_prime, v)
        })
    }

    /// ∫∫|A| dϱ dϑ at `p`.
    pub fn amplitude_l1(&self, p: &KernelPoint) -> f64 {
        let gl = GaussLegendre::<f64>::new(48);
        let (ra, rb) = self.rho_support;
        let (va, vb) = self.vartheta_support;
        gl.integrate(va, vb, |v| gl.integrate(ra, rb, |q| (self.amplitude)(p, q, v).norm()))
    }

    /// Modulus bound (2πh)^{−2}∫∫|A|.
    pub fn modulus_bound(&self, p: &KernelPoint) -> f64 {
        self.amplitude_l1(p) / (2.0 * PI * self.h).powi(2)
    }
}

/// Composite Gauss–Legendre resolution rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QuadSpec {
    pub panel_points: usize,
    pub points_per_wavelength: f64,
    pub min_panels: usize,
    /// Cap on nodes per axis.
    pub max_nodes: usize,
    pub rel_tol: f64,
}

impl Default for QuadSpec {
    fn default() -> Self {
        Self {
            panel_points: 16,
            points_per_wavelength: 4.0,
            min_panels: 4,
            max_nodes: 1 << 15,
            rel_tol: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelValue {
    pub value: C64,
    /// |I_2n − I_n|/|I_2n| between the last two rules.
    pub rel_change: f64,
    pub converged: bool,
    /// Nodes (ϱ, ϑ) of the finest rule.
    pub nodes: (usize, usize),
    /// Nyquist node counts max|∂Φ|·width/(πh).
    pub nyquist: (usize, usize),
}

fn panel_nodes(gl: &GaussLegendre<f64>, a: f64, b: f64, panels: usize) -> Vec<(f64, f64)> {
    let w = (b - a) / panels as f64;
    (0..panels)
        .flat_map(|k| gl.mapped(a + k as f64 * w, a + (k + 1) as f64 * w).collect::<Vec<_>>())
        .collect()
}

/// ψ(x, ϑ) − ψ′(x′, ϑ) and its ϑ-derivative.
fn phase_difference(spec: &FioKernelSpec, p: &KernelPoint, v: f64) -> Result<(f64, f64), PhaseError> {
    let a = spec.table.eval(p.r, p.theta, v)?;
    let b = spec.table_prime.eval(p.r_prime, p.theta_prime, v)?;
    Ok((a.psi - b.psi, a.dpsi[2] - b.dpsi[2]))
}

/// Node counts from the phase gradient sampled on a coarse ϑ grid.
fn nyquist_counts(spec: &FioKernelSpec, s: f64, p: &KernelPoint) -> Result<(usize, usize), PhaseError> {
    let (ra, rb) = spec.rho_support;
    let (va, vb) = spec.vartheta_support;
    let m = 65;
    let (mut k_rho, mut k_vt) = (0.0f64, 0.0f64);
    for i in 0..m {
        let v = va + (vb - va) * i as f64 / (m - 1) as f64;
        let (d, dv) = phase_difference(spec, p, v)?;
        for q in [ra, rb] {
            k_rho = k_rho.max((d - 2.0 * s * q).abs());
            k_vt = k_vt.max((q * dv).abs());
        }
    }
    let count = |k: f64, w: f64| (k * w / (PI * spec.h)).ceil() as usize;
    Ok((count(k_rho, rb - ra), count(k_vt, vb - va)))
}

fn kernel_sum(
    spec: &FioKernelSpec,
    s: f64,
    p: &KernelPoint,
    gl: &GaussLegendre<f64>,
    panels: (usize, usize),
) -> Result<C64, PhaseError> {
    let rho = panel_nodes(gl, spec.rho_support.0, spec.rho_support.1, panels.0);
    let vt = panel_nodes(gl, spec.vartheta_support.0, spec.vartheta_support.1, panels.1);
    let inv_h = 1.0 / spec.h;
    let mut total = C64::new(0.0, 0.0);
    for &(v, wv) in &vt {
        let (d, _) = phase_difference(spec, p, v)?;
        let mut inner = C64::new(0.0, 0.0);
        for &(q, wq) in &rho {
            let a = (spec.amplitude)(p, q, v);
            if a.re == 0.0 && a.im == 0.0 {
                continue;
            }
            let (sn, cs) = ((q * d - s * q * q) * inv_h).sin_cos();
            inner += a * C64::new(cs, sn) * wq;
        }
        total += inner * wv;
    }
    Ok(total / (2.0 * PI * spec.h).powi(2))
}

/// Kernel value at (s, x, x′). The Nyquist count fixes the base rule; the rule is then doubled until two
/// successive values agree to `rel_tol` or the node cap is reached.
pub fn eval_kernel(spec: &FioKernelSpec, s: f64, p: &KernelPoint, quad: &QuadSpec) -> Result<KernelValue, OscillatoryError> {
    let nyq = nyquist_counts(spec, s, p)?;
    let panels = |n: usize| {
        let want = (n as f64 * quad.points_per_wavelength / 2.0).ceil() as usize;
        want.div_ceil(quad.panel_points).max(quad.min_panels)
    };
    let base = (panels(nyq.0), panels(nyq.1));
    for (axis, b) in [("ϱ", base.0), ("ϑ", base.1)] {
        let needed = 2 * b * quad.panel_points;
        if needed > quad.max_nodes {
            return Err(OscillatoryError::Nyquist {
                axis,
                needed,
                max: quad.max_nodes,
            });
        }
    }
    let gl = GaussLegendre::<f64>::new(quad.panel_points);
    let mut level = base;
    let mut coarse = kernel_sum(spec, s, p, &gl, level)?;
    loop {
        let next = (2 * level.0, 2 * level.1);
        let fine = kernel_sum(spec, s, p, &gl, next)?;
        let scale = fine.norm();
        let rel_change = if scale > 0.0 {
            (fine - coarse).norm() / scale
        } else if coarse.norm() == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
        let converged = rel_change < quad.rel_tol;
        let capped = 2 * next.0.max(next.1) * quad.panel_points > quad.max_nodes;
        if converged || capped {
            return Ok(KernelValue {
                value: fine,
                rel_change,
                converged,
                nodes: (next.0 * quad.panel_points, next.1 * quad.panel_points),
                nyquist: nyq,
            });
        }
        level = next;
        coarse = fine;
    }
}

/// One row of a scan; `bound_value` is the reference function of the scan that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KernelSample {
    pub h: f64,
    pub s: f64,
    pub r: f64,
    pub theta: f64,
    pub r_prime: f64,
    pub theta_prime: f64,
    pub abs_value: f64,
    pub bound_value: f64,
    #[serde(skip)]
    pub converged: bool,
}

impl KernelSample {
    fn new(h: f64, s: f64, p: &KernelPoint, k: &KernelValue, bound: f64) -> Self {
        Self {
            h,
            s,
            r: p.r,
            theta: p.theta,
            r_prime: p.r_prime,
            theta_prime: p.theta_prime,
            abs_value: k.value.norm(),
            bound_value: bound,
            converged: k.converged,
        }
    }

    fn usable(&self) -> bool {
        self.converged && self.abs_value > 0.0 && self.abs_value.is_finite()
    }
}

/// CSV with columns h, s, r, theta, r_prime, theta_prime, abs_value, bound_value.
pub fn write_samples_csv<W: Write>(samples: &[KernelSample], w: W) -> Result<(), csv::Error> {
    let mut wr = csv::Writer::from_writer(w);
    for s in samples {
        wr.serialize(s)?;
    }
    wr.flush()?;
    Ok(())
}

fn evaluate_jobs(
    jobs: &[(FioKernelSpec, f64, KernelPoint)],
    quad: &QuadSpec,
) -> Result<Vec<KernelValue>, OscillatoryError> {
    jobs.par_iter()
        .map(|(spec, s, p)| eval_kernel(spec, *s, p, quad))
        .collect()
}

fn fit_usable(xs: &[f64], samples: &[KernelSample], scale: impl Fn(&KernelSample) -> f64) -> Option<DecayFit<f64>> {
    let (x, y): (Vec<f64>, Vec<f64>) = xs
        .iter()
        .zip(samples)
        .filter(|(_, s)| s.usable())
        .map(|(x, s)| (*x, s.abs_value * scale(s)))
        .unzip();
    if x.len() < 3 {
        return None;
    }
    power_law_fit(&x, &y).ok()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// r = 4(r′ + 2sϱ_sup) on a common ray, so (1 − δ)r ≥ r′ + 2sϱ_sup.
    RadialSep,
    /// r = r′ and θ = ϑ_c + offset, so |θ − ϑ| ≥ offset − half-width on the support.
    AngularSep,
    /// x on the characteristic through x′ (negative control).
    Stationary,
}

impl std::str::FromStr for Regime {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "radial_sep" | "radial-sep" => Ok(Self::RadialSep),
            "angular_sep" | "angular-sep" => Ok(Self::AngularSep),
            "stationary" => Ok(Self::Stationary),
            other => Err(format!("unknown regime {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NonstationaryScan {
    pub h_ladder: Vec<f64>,
    pub s: f64,
    /// r′ for the h ladder.
    pub r_prime: f64,
    /// h for the spatial ladder.
    pub h_spatial: f64,
    /// r′ values of the spatial ladder.
    pub r_prime_ladder: Vec<f64>,
    /// θ − ϑ_c in the angular regime.
    pub angular_offset: f64,
    /// Configurations per ladder entry with r shifted across one lobe of the amplitude's Fourier
    /// transform; the sup over them is fitted.
    pub envelope: usize,
    pub quad: QuadSpec,
}

impl Default for NonstationaryScan {
    fn default() -> Self {
        Self {
            h_ladder: (0..6).map(|k| 2f64.powi(-k)).collect(),
            s: 0.5,
            r_prime: 12.0,
            h_spatial: 0.25,
            r_prime_ladder: (0..7).map(|k| 12.0 * 2f64.powf(k as f64 / 2.0)).collect(),
            angular_offset: 0.2,
            envelope: 4,
            quad: QuadSpec::default(),
        }
    }
}

impl NonstationaryScan {
    /// Ladders that reach the asymptotic window of each regime for a ϱ support of width ≈ 0.6 and
    /// a ϑ support of half-width ≈ 0.1 (angular) or 0.2 (radial).
    pub fn for_regime(regime: Regime) -> Self {
        match regime {
            Regime::AngularSep => Self {
                h_ladder: (4..=8).map(|k| 2f64.powi(-k)).collect(),
                r_prime: 40.0,
                h_spatial: 1.0 / 64.0,
                r_prime_ladder: (0..5).map(|k| 24.0 * 2f64.powf(k as f64 / 2.0)).collect(),
                angular_offset: 0.18,
                ..Self::default()
            },
            _ => Self::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NonstationaryReport {
    pub regime: Regime,
    /// Fit of |I| against 1/h.
    pub h_fit: Option<DecayFit<f64>>,
    /// Fit of |I| against ⟨s, r, r′⟩.
    pub spatial_fit: Option<DecayFit<f64>>,
    pub excluded: usize,
    pub samples: Vec<KernelSample>,
    pub pass: bool,
}

/// Configuration (x, x′) of a regime at time s.
pub fn regime_point(spec: &FioKernelSpec, regime: Regime, s: f64, r_prime: f64, angular_offset: f64) -> KernelPoint {
    let vc = spec.vartheta_centre();
    match regime {
        Regime::RadialSep => KernelPoint::new(4.0 * (r_prime + 2.0 * s * spec.rho_sup()), vc, r_prime, vc),
        Regime::AngularSep => KernelPoint::new(r_prime, vc + angular_offset, r_prime, vc),
        // radial rays stay radial and ∂_ϑψ = 0 on the diagonal, so this is stationary at (ϱ_c, ϑ_c)
        Regime::Stationary => KernelPoint::new(r_prime + 2.0 * s * spec.rho_centre(), vc, r_prime, vc),
    }
}

/// Scans |I^h| over an h ladder and a spatial ladder in the given regime.
/// Non-stationary regimes pass when both fitted orders are ≤ −3; the stationary control passes when the
/// h-order shows no decay (≥ 0).
pub fn nonstationary_scan(
    spec: &FioKernelSpec,
    regime: Regime,
    scan: &NonstationaryScan,
) -> Result<NonstationaryReport, OscillatoryError> {
    let m = scan.envelope.max(1);
    let wr = (spec.rho_support.1 - spec.rho_support.0) / 2.0;
    // shifting r by πh/w_ϱ moves ∂_ϱΦ/h across one lobe
    let lobe = |h: f64, p: KernelPoint| {
        (0..m).map(move |j| KernelPoint {
            r: p.r + PI * h * j as f64 / (m as f64 * wr),
            ..p
        })
    };
    let mut jobs = Vec::new();
    for &h in &scan.h_ladder {
        let p = regime_point(spec, regime, scan.s, scan.r_prime, scan.angular_offset);
        jobs.extend(lobe(h, p).map(|q| (spec.with_h(h), scan.s, q)));
    }
    let n_h = jobs.len();
    for &rp in &scan.r_prime_ladder {
        let p = regime_point(spec, regime, scan.s, rp, scan.angular_offset);
        jobs.extend(lobe(scan.h_spatial, p).map(|q| (spec.with_h(scan.h_spatial), scan.s, q)));
    }
    let values = evaluate_jobs(&jobs, &scan.quad)?;
    let samples: Vec<KernelSample> = jobs
        .iter()
        .zip(&values)
        .map(|((sp, s, p), k)| KernelSample::new(sp.h, *s, p, k, sp.modulus_bound(p)))
        .collect();
    let envelope = |part: &[KernelSample], xs: Vec<f64>| {
        let sup: Vec<f64> = part
            .chunks(m)
            .map(|c| c.iter().filter(|s| s.usable()).map(|s| s.abs_value).fold(0.0f64, f64::max))
            .collect();
        let (x, y): (Vec<f64>, Vec<f64>) = xs.into_iter().zip(sup).filter(|(_, y)| *y > 0.0).unzip();
        if x.len() < 3 {
            None
        } else {
            power_law_fit(&x, &y).ok()
        }
    };
    let h_fit = envelope(&samples[..n_h], scan.h_ladder.iter().map(|h| 1.0 / h).collect());
    let brackets = jobs[n_h..].chunks(m).map(|c| c[0].2.bracket(scan.s)).collect();
    let spatial_fit = envelope(&samples[n_h..], brackets);
    let excluded = samples.iter().filter(|s| !s.usable()).count();
    let pass = match regime {
        Regime::Stationary => h_fit.is_some_and(|f| f.exponent >= 0.0),
        _ => h_fit.is_some_and(|f| f.exponent <= -3.0) && spatial_fit.is_some_and(|f| f.exponent <= -3.0),
    };
    Ok(NonstationaryReport {
        regime,
        h_fit,
        spatial_fit,
        excluded,
        samples,
        pass,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AngularScan {
    pub h: f64,
    pub r0: f64,
    /// s/h values; entries below 1 are skipped.
    pub s_over_h: Vec<f64>,
    pub quad: QuadSpec,
}

impl Default for AngularScan {
    fn default() -> Self {
        Self {
            h: 1.0 / 32.0,
            r0: 300.0,
            s_over_h: (6..=12).map(|k| 2f64.powi(k)).collect(),
            quad: QuadSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AngularReport {
    pub delta: f64,
    /// Fit of |I|·h² against s/h.
    pub fit: Option<DecayFit<f64>>,
    /// s < h, or the configuration leaves the tables.
    pub skipped: usize,
    pub excluded: usize,
    pub samples: Vec<KernelSample>,
    pub pass: bool,
}

/// x′ = (r0, ϑ_c − Δ/2), x = (r0 + 2sϱ_c, ϑ_c + Δ/2) with r0Δ = δs: the radial separation matches the
/// stationary one and only the angular separation r|θ − θ′| ≥ δ|s| remains.
pub fn angular_separation_scan(
    spec: &FioKernelSpec,
    delta: f64,
    scan: &AngularScan,
) -> Result<AngularReport, OscillatoryError> {
    let sp = spec.with_h(scan.h);
    let vc = spec.vartheta_centre();
    let mut jobs = Vec::new();
    let mut skipped = 0;
    for &q in &scan.s_over_h {
        if q < 1.0 {
            skipped += 1;
            continue;
        }
        let s = q * scan.h;
        let gap = delta * s / scan.r0;
        let p = KernelPoint::new(scan.r0 + 2.0 * s * spec.rho_centre(), vc + gap / 2.0, scan.r0, vc - gap / 2.0);
        if !spec.covers(&p) {
            skipped += 1;
            continue;
        }
        jobs.push((sp.clone(), s, p));
    }
    let values = evaluate_jobs(&jobs, &scan.quad)?;
    let samples: Vec<KernelSample> = jobs
        .iter()
        .zip(&values)
        .map(|((sp, s, p), k)| KernelSample::new(sp.h, *s, p, k, sp.modulus_bound(p)))
        .collect();
    let xs: Vec<f64> = jobs.iter().map(|(_, s, _)| s / scan.h).collect();
    let h2 = scan.h * scan.h;
    let fit = fit_usable(&xs, &samples, |_| h2);
    let excluded = samples.iter().filter(|s| !s.usable()).count();
    Ok(AngularReport {
        delta,
        pass: fit.is_some_and(|f| f.exponent <= -3.0),
        fit,
        skipped,
        excluded,
        samples,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DispersiveScan {
    pub h_ladder: Vec<f64>,
    /// s/h values per h.
    pub s_over_h: Vec<f64>,
    pub r_prime: f64,
    /// Extra samples per (h, s) jittered around the stationary configuration.
    pub jitter_points: usize,
    pub seed: u64,
    /// Pairs with s/h at least this enter the large-|hs| fit.
    pub large_ratio: f64,
    pub tol: f64,
    pub quad: QuadSpec,
}

impl Default for DispersiveScan {
    fn default() -> Self {
        Self {
            h_ladder: (2..=8).map(|k| 2f64.powi(-k)).collect(),
            s_over_h: vec![0.0, 0.5, 1.0, 256.0, 1024.0, 4096.0],
            r_prime: 20.0,
            jitter_points: 2,
            seed: 7,
            large_ratio: 256.0,
            tol: 0.15,
            quad: QuadSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DispersiveReport {
    /// Smallest C with |I| ≤ C·min(h^{−2}, |hs|^{−1}) on the samples.
    pub c_fit: f64,
    /// sup|I| against h over pairs with |s| ≤ h (expected −2).
    pub small_s_fit: Option<DecayFit<f64>>,
    /// sup|I| against hs over pairs with s/h ≥ large_ratio (expected −1).
    pub large_hs_fit: Option<DecayFit<f64>>,
    /// (h, s) pairs whose stationary configuration leaves the tables.
    pub skipped: usize,
    pub excluded: usize,
    pub samples: Vec<KernelSample>,
    pub pass: bool,
}

/// min(h^{−2}, |hs|^{−1}).
pub fn dispersive_bound(h: f64, s: f64) -> f64 {
    let a = h.powi(-2);
    if s == 0.0 {
        a
    } else {
        a.min(1.0 / (h * s).abs())
    }
}

/// Samples the stationary configuration and jittered neighbours over the (h, s) grid.
pub fn dispersive_scan(spec: &FioKernelSpec, scan: &DispersiveScan) -> Result<DispersiveReport, OscillatoryError> {
    let mut rng = rng::stream(scan.seed, 6);
    let mut jobs = Vec::new();
    let mut group = Vec::new();
    let mut skipped = 0;
    for (hi, &h) in scan.h_ladder.iter().enumerate() {
        for (si, &q) in scan.s_over_h.iter().enumerate() {
            let s = q * h;
            let stat = regime_point(spec, Regime::Stationary, s, scan.r_prime, 0.0);
            if !spec.covers(&stat) {
                skipped += 1;
                continue;
            }
            jobs.push((spec.with_h(h), s, stat));
            group.push((hi, si));
            for _ in 0..scan.jitter_points {
                let dr = rng::uniform(&mut rng, -4.0, 4.0) * h;
                let dt = rng::uniform(&mut rng, -2.0, 2.0) * h / stat.r;
                let p = KernelPoint::new(stat.r + dr, stat.theta + dt, stat.r_prime, stat.theta_prime);
                if !spec.covers(&p) {
                    continue;
                }
                jobs.push((spec.with_h(h), s, p));
                group.push((hi, si));
            }
        }
    }
    let values = evaluate_jobs(&jobs, &scan.quad)?;
    let samples: Vec<KernelSample> = jobs
        .iter()
        .zip(&values)
        .map(|((sp, s, p), k)| KernelSample::new(sp.h, *s, p, k, dispersive_bound(sp.h, *s)))
        .collect();
    let usable: Vec<&KernelSample> = samples.iter().filter(|s| s.usable()).collect();
    let c_fit = usable
        .iter()
        .map(|s| s.abs_value / s.bound_value)
        .fold(0.0f64, f64::max);
    // sup per (h, s) pair
    let mut sup = vec![vec![None::<f64>; scan.s_over_h.len()]; scan.h_ladder.len()];
    for (smp, &(hi, si)) in samples.iter().zip(&group) {
        if smp.usable() {
            let e = sup[hi][si].get_or_insert(0.0);
            *e = e.max(smp.abs_value);
        }
    }
    let (mut sx, mut sy, mut lx, mut ly) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (hi, &h) in scan.h_ladder.iter().enumerate() {
        let mut small = None::<f64>;
        for (si, &q) in scan.s_over_h.iter().enumerate() {
            let Some(v) = sup[hi][si] else { continue };
            if q <= 1.0 {
                small = Some(small.map_or(v, |m| m.max(v)));
            }
            if q >= scan.large_ratio {
                lx.push(h * q * h);
                ly.push(v);
            }
        }
        if let Some(v) = small {
            sx.push(h);
            sy.push(v);
        }
    }
    let small_s_fit = if sx.len() >= 3 { power_law_fit(&sx, &sy).ok() } else { None };
    let large_hs_fit = if lx.len() >= 3 { power_law_fit(&lx, &ly).ok() } else { None };
    let excluded = samples.len() - usable.len();
    let pass = large_hs_fit.is_some_and(|f| (f.exponent + 1.0).abs() <= scan.tol);
    Ok(DispersiveReport {
        c_fit,
        small_s_fit,
        large_hs_fit,
        skipped,
        excluded,
        samples,
        pass,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParametrixScan {
    pub h: f64,
    pub s_values: Vec<f64>,
    pub weights: Vec<i32>,
    pub r_primes: Vec<f64>,
    /// Target radii as fractions of the stationary displacement 2sϱ_c.
    pub displacement_fractions: Vec<f64>,
    pub max_ratio: f64,
    pub quad: QuadSpec,
}

impl Default for ParametrixScan {
    fn default() -> Self {
        Self {
            h: 0.25,
            s_values: vec![1.0, 2.0, 4.0, 8.0, 16.0, 32.0],
            weights: vec![0, 1, 2],
            r_primes: vec![12.0, 24.0],
            displacement_fractions: vec![0.5, 0.9, 1.0, 1.1, 1.5],
            max_ratio: 0.1,
            quad: QuadSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightedSup {
    pub weight: i32,
    /// sup ⟨r⟩^{−N}|K(s)|(r′ + s)^N per s.
    pub sup: Vec<f64>,
    /// Fit of the sups against s.
    pub fit: Option<DecayFit<f64>>,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParametrixReport {
    /// min (ψ′(x′, ϑ) + 2sϱ)/(r′ + s) over table nodes, the support and the s grid.
    pub lower_bound_c: f64,
    pub weights: Vec<WeightedSup>,
    pub samples: Vec<KernelSample>,
    pub pass: bool,
}

/// Weighted sup-norm scan of the kernel with A = a·b̄.
pub fn parametrix_weight_scan(
    spec: &FioKernelSpec,
    a: Symbol,
    b: Symbol,
    scan: &ParametrixScan,
) -> Result<ParametrixReport, OscillatoryError> {
    let sp = spec.with_h(scan.h).with_amplitude(product_amplitude(a, b));
    let t = spec.table_prime;
    let mut lower = f64::INFINITY;
    for (n, (r, _, _)) in t.nodes().enumerate() {
        for &s in &scan.s_values {
            for q in [spec.rho_support.0, spec.rho_support.1] {
                lower = lower.min((t.psi[n] + 2.0 * s * q.abs()) / (r + s));
            }
        }
    }
    let vc = spec.vartheta_centre();
    let mut jobs = Vec::new();
    for &s in &scan.s_values {
        for &rp in &scan.r_primes {
            for &f in &scan.displacement_fractions {
                let p = KernelPoint::new(rp + f * 2.0 * s * spec.rho_centre(), vc, rp, vc);
                jobs.push((sp.clone(), s, p));
            }
        }
    }
    let values = evaluate_jobs(&jobs, &scan.quad)?;
    let bracket = |r: f64| (1.0 + r * r).sqrt();
    let samples: Vec<KernelSample> = jobs
        .iter()
        .zip(&values)
        .map(|((sp, s, p), k)| KernelSample::new(sp.h, *s, p, k, dispersive_bound(sp.h, *s)))
        .collect();
    let mut weights = Vec::new();
    for &nw in &scan.weights {
        let sup: Vec<f64> = scan
            .s_values
            .iter()
            .map(|&s| {
                samples
                    .iter()
                    .filter(|x| x.s == s && x.usable())
                    .map(|x| bracket(x.r).powi(-nw) * x.abs_value * (x.r_prime + s).powi(nw))
                    .fold(0.0f64, f64::max)
            })
            .collect();
        let fit = power_law_fit(&scan.s_values, &sup).ok();
        weights.push(WeightedSup {
            weight: nw,
            pass: fit.is_some_and(|f| f.exponent <= scan.max_ratio),
            sup,
            fit,
        });
    }
    let pass = lower > 0.0 && weights.iter().all(|w| w.pass);
    Ok(ParametrixReport {
        lower_bound_c: lower,
        weights,
        samples,
        pass,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ShadowReport {
    /// Kernel at x = x′, s = 0, h = 1 with A = f(x, ∂φ)|det ∂ξ/∂(ϱ, ϑ)|.
    pub kernel_diagonal: f64,
    /// (2π)^{−2}∫∫ f(x, ρ, η) dρ dη.
    pub symbol_integral: f64,
    pub rel_error: f64,
}

/// Diagonal of the factorised kernel against the symbol integral it should reproduce.
/// `f` is a symbol at the fixed point (r, θ) with support inside `xi_box` = ((ρ_lo, ρ_hi), (η_lo, η_hi)),
/// and the preimage of that support under ξ = ∂_{r,θ}φ must lie inside the (ϱ, ϑ) box of `spec`.
pub fn diagonal_shadow(
    spec: &FioKernelSpec,
    r: f64,
    theta: f64,
    f: Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>,
    xi_box: ((f64, f64), (f64, f64)),
    quad: &QuadSpec,
) -> Result<ShadowReport, OscillatoryError> {
    let table = spec.table;
    let ff = f.clone();
    let amplitude: Amplitude = {
        let table = table.clone();
        Arc::new(move |p: &KernelPoint, q: f64, v: f64| {
            match table.invert_at(p.r, p.theta, q, v) {
                Ok(l) => {
                    let d = l.dxi_dparams;
                    let det = (d[0][0] * d[1][1] - d[0][1] * d[1][0]).abs();
                    C64::new(ff(l.rho_under, l.eta_under) * det, 0.0)
                }
                Err(_) => C64::new(0.0, 0.0),
            }
        })
    };
    let sp = spec.with_h(1.0).with_amplitude(amplitude);
    let k = eval_kernel(&sp, 0.0, &KernelPoint::new(r, theta, r, theta), quad)?;
    let gl = GaussLegendre::<f64>::new(48);
    let ((ra, rb), (ea, eb)) = xi_box;
    let direct = gl.integrate(ea, eb, |e| gl.integrate(ra, rb, |q| f(q, e))) / (2.0 * PI).powi(2);
    Ok(ShadowReport {
        kernel_diagonal: k.value.re,
        symbol_integral: direct,
        rel_error: (k.value.re - direct).abs() / direct.abs(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::Direction;
    use crate::geometry::ChartMetric2D;
    use crate::numerics::quadrature::adaptive_gk15;
    use crate::phase::{build_eikonal, EikonalOptions, GridSpec, ThetaDomain};

    fn table(metric: ChartMetric2D<f64>, r_max: f64) -> EikonalTable {
        let dom = ThetaDomain::new(10.0, (-0.3, 0.3), 0.3, (0.25, 4.0), Direction::Outgoing).unwrap();
        let grid = GridSpec {
            r_max,
            n_r: 16,
            n_theta: 8,
            n_delta: 12,
        };
        build_eikonal(&metric, 1.0, &dom, &grid, &EikonalOptions::default()).unwrap()
    }

    fn spec(t: &EikonalTable, h: f64) -> FioKernelSpec<'_> {
        let (rho, vt) = ((0.8, 1.2), (-0.1, 0.1));
        FioKernelSpec::new(t, t, bump_amplitude(rho, vt), rho, vt, h).unwrap()
    }

    #[test]
    fn matches_adaptive_oracle() {
        let t = table(ChartMetric2D::flat(), 40.0);
        let sp = spec(&t, 1.0);
        let p = KernelPoint::new(14.0, 0.05, 12.0, -0.02);
        let k = eval_kernel(&sp, 0.0, &p, &QuadSpec::default()).unwrap();
        assert!(k.converged);
        let a = |q: f64, v: f64| bump((q - 1.0) / 0.2) * bump(v / 0.1);
        let phase = |q: f64, v: f64| q * (14.0 * (0.05 - v).cos() - 12.0 * (-0.02 - v).cos());
        let part = |im: bool| {
            adaptive_gk15(-0.1, 0.1, 1e-13, 1e-12, 400, |v| {
                adaptive_gk15(0.8, 1.2, 1e-14, 1e-12, 400, |q| {
                    let ph = phase(q, v);
                    a(q, v) * if im { ph.sin() } else { ph.cos() }
                })
                .0
            })
            .0
        };
        let oracle = C64::new(part(false), part(true)) / (2.0 * PI).powi(2);
        assert!((k.value - oracle).norm() < 1e-6 * oracle.norm().max(1e-3), "{} vs {}", k.value, oracle);
    }

    #[test]
    fn trivial_cases() {
        let t = table(ChartMetric2D::flat(), 40.0);
        let sp = spec(&t, 0.25);
        let zero = sp.with_amplitude(Arc::new(|_, _, _| C64::new(0.0, 0.0)));
        let p = KernelPoint::new(15.0, 0.0, 12.0, 0.0);
        assert_eq!(eval_kernel(&zero, 1.0, &p, &QuadSpec::default()).unwrap().value.norm(), 0.0);
        let d = KernelPoint::new(15.0, 0.05, 15.0, 0.05);
        let k = eval_kernel(&sp, 0.0, &d, &QuadSpec::default()).unwrap();
        let expect = sp.amplitude_l1(&d) / (2.0 * PI * 0.25f64).powi(2);
        assert!((k.value.re - expect).abs() < 1e-9 * expect && k.value.im.abs() < 1e-9 * expect);
    }

    #[test]
    fn nyquist_violation_is_reported() {
        let t = table(ChartMetric2D::flat(), 400.0);
        let sp = spec(&t, 1e-4);
        let quad = QuadSpec {
            max_nodes: 1024,
            ..QuadSpec::default()
        };
        let p = KernelPoint::new(300.0, 0.0, 12.0, 0.0);
        assert!(matches!(
            eval_kernel(&sp, 1.0, &p, &quad),
            Err(OscillatoryError::Nyquist { .. })
        ));
    }

    #[test]
    fn conjugation_symmetry() {
        let t = table(ChartMetric2D::power_modulated(0.3, 1.0, 2.0, 0.5).unwrap(), 40.0);
        let a: Amplitude = Arc::new(|p: &KernelPoint, q: f64, v: f64| {
            C64::new(bump((q - 1.0) / 0.2) * bump(v / 0.1), 0.3 * q * p.r / (1.0 + p.r_prime))
        });
        let abar: Amplitude = Arc::new({
            let a = a.clone();
            move |p: &KernelPoint, q, v| a(&p.swapped(), q, v).conj()
        });
        let sp = spec(&t, 0.5).with_amplitude(a);
        let sq = sp.with_amplitude(abar);
        let p = KernelPoint::new(16.0, 0.04, 13.0, -0.03);
        let quad = QuadSpec::default();
        let k1 = eval_kernel(&sp, 0.7, &p.swapped(), &quad).unwrap().value;
        let k2 = eval_kernel(&sq, -0.7, &p, &quad).unwrap().value;
        assert!((k1.conj() - k2).norm() < 1e-9 * k1.norm());
    }

    #[test]
    fn stationary_value_matches_leading_term() {
        let t = table(ChartMetric2D::flat(), 200.0);
        let (h, s) = (1.0 / 16.0, 64.0);
        let (rho, vt) = ((0.7, 1.3), (-0.2, 0.2));
        let sp = FioKernelSpec::new(&t, &t, bump_amplitude(rho, vt), rho, vt, h).unwrap();
        let p = regime_point(&sp, Regime::Stationary, s, 20.0, 0.0);
        let k = eval_kernel(&sp, s, &p, &QuadSpec::default()).unwrap();
        // A/(4πhsϱ) at ϱ = 1
        let lead = 1.0 / (4.0 * PI * h * s);
        assert!(((k.value.norm() - lead) / lead).abs() < 0.02, "{} vs {lead}", k.value.norm());
    }

    #[test]
    fn diagonal_shadow_reproduces_symbol() {
        let t = table(ChartMetric2D::power(0.3, 1.0, 2.0).unwrap(), 40.0);
        let (rho, vt) = ((0.6, 1.6), (-0.25, 0.25));
        let sp = FioKernelSpec::new(&t, &t, bump_amplitude(rho, vt), rho, vt, 1.0).unwrap();
        let (r, th) = (15.0, 0.0);
        let f = Arc::new(move |q: f64, e: f64| bump((q - 1.1) / 0.3) * bump(e / 2.0));
        let rep = diagonal_shadow(&sp, r, th, f, ((0.8, 1.4), (-2.0, 2.0)), &QuadSpec::default()).unwrap();
        assert!(rep.rel_error < 0.1, "{rep:?}");
    }
}

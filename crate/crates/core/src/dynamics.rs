//! Linear Schrödinger evolution e^{−itP} on the discrete model, dispersive decay and Strichartz ratios
//! over dyadic bands, and the small-data Duhamel fixed point of the L²-critical NLS with scattering detection.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{power_law_fit, DecayFit, FitError, GaussLegendre};
use crate::spectral::{
    angular_rule, light_cone_check, INTEGRATED_TAIL, lq_norm, mass_radius, random_band_state, significant_range, zonal_harmonic, BandDirection, DyadicBand, FieldState,
    ModeFamily, SpectralError, ANGULAR_NODES,
};
use crate::C64;

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error("(p, q) = ({p}, {q}) is not admissible for n = {n}: 2/p + n/q − n/2 = {residual:.3e}")]
    Inadmissible { p: f64, q: f64, n: usize, residual: f64 },
    #[error("time window spans a factor {span:.2}, need at least 10")]
    ShortWindow { span: f64 },
    #[error("state has relative mass {outside:.3e} outside the computed spectrum")]
    OutsideSpectrum { outside: f64 },
    #[error("invalid configuration: {0}")]
    InvalidSpec(String),
}

/// Relative mass allowed outside a windowed spectrum.
pub const WINDOW_TOL: f64 = 1e-10;
/// Eigen-coefficients below this fraction of the state's norm do not count towards its spectral extent.
pub const EXTENT_TOL: f64 = 1e-8;
/// L² tail defining the data support radius for the light-cone rule.
pub const SUPPORT_TAIL: f64 = 1e-6;

/// Eigen-coefficients of a state, ready for evolution by phase factors.
#[derive(Debug, Clone)]
pub struct Evolution<'a> {
    pub family: &'a ModeFamily,
    pub base: FieldState,
    pub coeffs: Vec<Vec<C64>>,
    /// Largest eigenvalue carrying a coefficient above EXTENT_TOL·‖u‖.
    pub lambda_extent: f64,
    pub r_support: f64,
}

impl<'a> Evolution<'a> {
    pub fn new(family: &'a ModeFamily, state: &FieldState) -> Result<Self, DynamicsError> {
        Self::with_tail(family, state, SUPPORT_TAIL)
    }

    /// As `new` with the support radius taken at L² tail `tail`.
    pub fn with_tail(family: &'a ModeFamily, state: &FieldState, tail: f64) -> Result<Self, DynamicsError> {
        if state.modes.len() > family.ops.len() || state.r.len() != family.r().len() {
            return Err(SpectralError::Mismatch(format!(
                "state has {} modes on {} nodes, family has {} modes on {} nodes",
                state.modes.len(),
                state.r.len(),
                family.ops.len(),
                family.r().len()
            ))
            .into());
        }
        let coeffs: Vec<Vec<C64>> = state
            .modes
            .par_iter()
            .zip(&family.ops)
            .map(|(v, op)| op.coefficients(v))
            .collect();
        let norm = state.l2_norm();
        let mut outside = 0.0;
        let mut extent = 0.0f64;
        for ((v, c), op) in state.modes.iter().zip(&coeffs).zip(&family.ops) {
            if !op.is_complete() {
                let back = op.synthesize(c);
                outside += v.iter().zip(&back).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>() * state.dr;
            }
            for (ck, l) in c.iter().zip(op.eigenvalues()) {
                if ck.norm() * state.dr.sqrt() > EXTENT_TOL * norm {
                    extent = extent.max(*l);
                }
            }
        }
        let outside = if norm > 0.0 { outside.sqrt() / norm } else { 0.0 };
        if outside > WINDOW_TOL {
            return Err(DynamicsError::OutsideSpectrum { outside });
        }
        Ok(Self {
            family,
            base: state.clone(),
            coeffs,
            lambda_extent: extent,
            r_support: if norm > 0.0 { mass_radius(state, tail) } else { 0.0 },
        })
    }

    /// Largest |t| allowed by the light-cone rule.
    pub fn max_time(&self) -> f64 {
        let room = 0.8 * self.family.r_max - self.r_support;
        if self.lambda_extent <= 0.0 {
            f64::INFINITY
        } else {
            (room / (2.0 * self.lambda_extent.sqrt())).max(0.0)
        }
    }

    pub fn check(&self, t: f64) -> Result<(), DynamicsError> {
        light_cone_check(self.lambda_extent, t, self.r_support, self.family.r_max)?;
        Ok(())
    }

    pub fn coefficients_at(&self, t: f64) -> Vec<Vec<C64>> {
        self.coeffs
            .iter()
            .zip(&self.family.ops)
            .map(|(c, op)| {
                c.iter()
                    .zip(op.eigenvalues())
                    .map(|(c, &l)| c * C64::new(0.0, -t * l).exp())
                    .collect()
            })
            .collect()
    }

    /// e^{−itP}u without the light-cone check.
    pub fn at(&self, t: f64) -> FieldState {
        let modes = self
            .coefficients_at(t)
            .iter()
            .zip(&self.family.ops)
            .map(|(c, op)| op.synthesize(c))
            .collect();
        FieldState {
            t: self.base.t + t,
            modes,
            ..self.base.clone()
        }
    }

    /// `at` for several times with one matrix product per mode.
    pub fn at_batch(&self, times: &[f64]) -> Vec<FieldState> {
        let per_mode: Vec<Vec<Vec<C64>>> = self
            .coeffs
            .iter()
            .zip(&self.family.ops)
            .map(|(c, op)| {
                // band data vanish outside a range of eigenvalues up to roundoff
                let (lo, hi) = significant_range(c);
                let cs: Vec<Vec<C64>> = times
                    .iter()
                    .map(|&t| {
                        c[lo..hi]
                            .iter()
                            .zip(&op.eigenvalues()[lo..hi])
                            .map(|(c, &l)| c * C64::new(0.0, -t * l).exp())
                            .collect()
                    })
                    .collect();
                op.synthesize_batch_from(lo, &cs)
            })
            .collect();
        times
            .iter()
            .enumerate()
            .map(|(j, &t)| FieldState {
                t: self.base.t + t,
                modes: per_mode.iter().map(|m| m[j].clone()).collect(),
                ..self.base.clone()
            })
            .collect()
    }
}

/// e^{−itP}state by per-mode eigenphases; aborts when the light cone leaves 0.8·R_max.
pub fn propagate(family: &ModeFamily, state: &FieldState, t: f64) -> Result<FieldState, DynamicsError> {
    let ev = Evolution::new(family, state)?;
    ev.check(t)?;
    Ok(ev.at(t))
}

/// sup |u| over grid nodes with r ≥ r_min.
pub fn sup_norm(state: &FieldState, r_min: f64) -> Result<f64, DynamicsError> {
    let rule = angular_rule(state.n, ANGULAR_NODES)?;
    let u = state.physical(&rule)?;
    Ok(u.iter()
        .zip(&state.r)
        .filter(|(_, r)| **r >= r_min)
        .flat_map(|(row, _)| row.iter().map(|z| z.norm()))
        .fold(0.0, f64::max))
}

/// Radial Gaussian exp(−(r − c)²/2w²) band-projected and normalised in L², with w = width_factor/√λ_c
/// for the band centre λ_c and c = centre_factor·w.
pub fn band_gaussian(
    family: &ModeFamily,
    band: DyadicBand,
    width_factor: f64,
    centre_factor: f64,
) -> Result<FieldState, DynamicsError> {
    let w = width_factor / band.centre().sqrt();
    let c = centre_factor * w;
    let g = FieldState::radial(family, |r| C64::new((-(r - c).powi(2) / (2.0 * w * w)).exp(), 0.0))?;
    let s = family.apply(|l| C64::new(band.eval(l), 0.0), &g)?;
    let n = s.l2_norm();
    if n == 0.0 {
        return Err(DynamicsError::InvalidSpec(format!("band {band:?} misses the computed spectrum")));
    }
    Ok(s.scale(C64::new(1.0 / n, 0.0)))
}

/// Spatial restriction for dispersive decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cutoff {
    /// sup over r ≥ R only.
    Exterior(f64),
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DispersiveSample {
    pub t: f64,
    pub sup: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DispersiveFitReport {
    pub cutoff: Cutoff,
    pub l1_norm: f64,
    pub samples: Vec<DispersiveSample>,
    pub fit: DecayFit<f64>,
    pub target: f64,
    pub pass: bool,
}

/// Fits ‖u(t)‖_∞/‖u₀‖₁ over the t-ladder; passes when the exponent is ≤ −n/2 + 0.2.
pub fn dispersive_fit(
    family: &ModeFamily,
    u0: &FieldState,
    cutoff: Cutoff,
    ladder: &[f64],
) -> Result<DispersiveFitReport, DynamicsError> {
    let (lo, hi) = ladder
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(a, b), t| (a.min(*t), b.max(*t)));
    if !(lo > 0.0) || hi / lo < 10.0 {
        return Err(DynamicsError::ShortWindow { span: hi / lo });
    }
    let ev = Evolution::new(family, u0)?;
    ev.check(hi)?;
    let l1 = lq_norm(u0, 1.0)?;
    let r_min = match cutoff {
        Cutoff::Exterior(r) => r,
        Cutoff::None => 0.0,
    };
    let samples: Vec<DispersiveSample> = ladder
        .par_iter()
        .map(|&t| {
            let sup = sup_norm(&ev.at(t), r_min)?;
            Ok(DispersiveSample { t, sup, ratio: sup / l1 })
        })
        .collect::<Result<_, DynamicsError>>()?;
    let ts: Vec<f64> = samples.iter().map(|s| s.t).collect();
    let rs: Vec<f64> = samples.iter().map(|s| s.ratio).collect();
    let fit = power_law_fit(&ts, &rs)?;
    let target = -(u0.n as f64) / 2.0;
    Ok(DispersiveFitReport {
        cutoff,
        l1_norm: l1,
        samples,
        pass: fit.exponent <= target + 0.2,
        fit,
        target,
    })
}

/// max over `times` of |‖u(t)‖_∞ − (1 + 4t²)^{−3/4}|/(1 + 4t²)^{−3/4} for u₀ = e^{−r²/2} on a flat n = 3 family.
pub fn gaussian_sup_error(family: &ModeFamily, times: &[f64]) -> Result<f64, DynamicsError> {
    let u0 = FieldState::radial(family, |r| C64::new((-r * r / 2.0).exp(), 0.0))?;
    let ev = Evolution::new(family, &u0)?;
    let tmax = times.iter().copied().fold(0.0, f64::max);
    ev.check(tmax)?;
    times
        .par_iter()
        .map(|&t| {
            let exact = (1.0 + 4.0 * t * t).powf(-0.75);
            Ok((sup_norm(&ev.at(t), 0.0)? - exact).abs() / exact)
        })
        .collect::<Result<Vec<f64>, DynamicsError>>()
        .map(|v| v.into_iter().fold(0.0, f64::max))
}

// ---------------------------------------------------------------------------------------------
// Strichartz

/// 2/p + n/q − n/2 (p = ∞ allowed).
pub fn admissibility_residual(p: f64, q: f64, n: usize) -> f64 {
    let a = if p.is_infinite() { 0.0 } else { 2.0 / p };
    a + n as f64 / q - n as f64 / 2.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DataGenerator {
    /// Band-projected centred Gaussian of width width_factor/√λ_c.
    Gaussian { width_factor: f64 },
    /// Random band state (ℓ ≤ 2) from the seed, offset by the band index.
    Random { seed: u64 },
}

impl DataGenerator {
    pub fn generate(&self, family: &ModeFamily, band: DyadicBand) -> Result<FieldState, DynamicsError> {
        match *self {
            DataGenerator::Gaussian { width_factor } => band_gaussian(family, band, width_factor, 0.0),
            DataGenerator::Random { seed } => Ok(random_band_state(
                family,
                &[band],
                family.ell_max().min(2),
                seed.wrapping_add(band.index as u64),
            )?),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StrichartzRow {
    pub index: i32,
    pub direction: BandDirection,
    pub scale: f64,
    pub horizon: f64,
    /// ‖u‖_{L^p([0,T];L^q)}/‖u₀‖₂.
    pub ratio: f64,
    /// Same on [0, T/2].
    pub ratio_half: f64,
    pub increment: f64,
    pub time_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StrichartzReport {
    pub p: f64,
    pub q: f64,
    pub n: usize,
    pub admissibility_residual: f64,
    pub rows: Vec<StrichartzRow>,
    pub spread: f64,
    pub max_increment: f64,
    pub stabilized: bool,
}

/// Panel breakpoints on [0, T] with lengths τ/8·(1 + t/τ), including T/2 as a breakpoint.
fn strichartz_breaks(tau: f64, t_end: f64) -> Vec<f64> {
    let mut edges = vec![0.0];
    for target in [0.5 * t_end, t_end] {
        loop {
            let t = *edges.last().expect("non-empty");
            if t >= target * (1.0 - 1e-12) {
                break;
            }
            let step = tau / 8.0 * (1.0 + t / tau);
            edges.push((t + step).min(target));
        }
    }
    edges
}

/// Per-band ratios ‖u‖_{L^p([0,T];L^q)}/‖u₀‖₂ with T the light-cone horizon of each band's data
/// (or the given horizon), by Gauss–Legendre panels in time growing geometrically past the band's
/// dispersion time 1/λ_c.
pub fn strichartz_experiment(
    family: &ModeFamily,
    p: f64,
    q: f64,
    bands: &[DyadicBand],
    generator: DataGenerator,
    horizon: Option<f64>,
    increment_limit: f64,
) -> Result<StrichartzReport, DynamicsError> {
    let n = family.metric.n;
    let residual = admissibility_residual(p, q, n);
    if residual.abs() > 1e-12 || p < 2.0 || q < 2.0 {
        return Err(DynamicsError::Inadmissible { p, q, n, residual });
    }
    let gl = GaussLegendre::<f64>::new(8);
    let mut rows = Vec::new();
    for &band in bands {
        let u0 = generator.generate(family, band)?;
        let norm0 = u0.l2_norm();
        let ev = Evolution::with_tail(family, &u0, INTEGRATED_TAIL)?;
        let t_end = match horizon {
            Some(t) => {
                ev.check(t)?;
                t
            }
            None => ev.max_time(),
        };
        if !t_end.is_finite() || t_end <= 0.0 {
            return Err(DynamicsError::InvalidSpec(format!("no admissible horizon for band {band:?}")));
        }
        let edges = strichartz_breaks(1.0 / band.centre(), t_end);
        let nodes: Vec<(usize, f64, f64)> = edges
            .windows(2)
            .enumerate()
            .flat_map(|(k, ab)| gl.mapped(ab[0], ab[1]).map(move |(t, w)| (k, t, w)).collect::<Vec<_>>())
            .collect();
        let times: Vec<f64> = nodes.iter().map(|x| x.1).collect();
        let values: Vec<f64> = times
            .par_chunks(32)
            .map(|ts| {
                ev.at_batch(ts)
                    .iter()
                    .map(|u| Ok(lq_norm(u, q)?))
                    .collect::<Result<Vec<f64>, DynamicsError>>()
            })
            .collect::<Result<Vec<_>, _>>()?
            .concat();
        let half_panels = edges.iter().position(|e| (e - 0.5 * t_end).abs() <= 1e-9 * t_end).unwrap_or(0);
        let (ratio, ratio_half) = if p.is_infinite() {
            let l0 = lq_norm(&u0, q)?;
            let full = values.iter().copied().fold(l0, f64::max);
            let half = nodes
                .iter()
                .zip(&values)
                .filter(|((k, _, _), _)| *k < half_panels)
                .map(|(_, v)| *v)
                .fold(l0, f64::max);
            (full / norm0, half / norm0)
        } else {
            let mut full = 0.0;
            let mut half = 0.0;
            for ((k, _, w), v) in nodes.iter().zip(&values) {
                let c = w * v.powf(p);
                full += c;
                if *k < half_panels {
                    half += c;
                }
            }
            (full.powf(1.0 / p) / norm0, half.powf(1.0 / p) / norm0)
        };
        rows.push(StrichartzRow {
            index: band.index,
            direction: band.direction,
            scale: band.scale(),
            horizon: t_end,
            ratio,
            ratio_half,
            increment: if ratio > 0.0 { (ratio - ratio_half) / ratio } else { 0.0 },
            time_samples: nodes.len(),
        });
    }
    let (mn, mx) = rows
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(a, b), r| (a.min(r.ratio), b.max(r.ratio)));
    let max_increment = rows.iter().map(|r| r.increment).fold(0.0, f64::max);
    Ok(StrichartzReport {
        p,
        q,
        n,
        admissibility_residual: residual,
        spread: mx / mn,
        max_increment,
        stabilized: max_increment < increment_limit,
        rows,
    })
}

// ---------------------------------------------------------------------------------------------
// NLS

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NlsConfig {
    /// +1 defocusing, −1 focusing, 0 linear.
    pub sigma: f64,
    pub horizon: f64,
    /// Uniform intervals per time direction.
    pub intervals: usize,
    /// Gauss–Legendre collocation stages per interval.
    pub stages: usize,
    /// Stop when sup_t ‖u^{k+1} − u^k‖₂ < tol.
    pub tol: f64,
    pub max_iter: usize,
    /// Also solve on [−T, 0].
    pub backward: bool,
}

impl Default for NlsConfig {
    fn default() -> Self {
        Self {
            sigma: 1.0,
            horizon: 8.0,
            intervals: 256,
            stages: 4,
            tol: 1e-12,
            max_iter: 12,
            backward: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NlsRun {
    pub sigma: f64,
    pub u0_norm: f64,
    pub horizon: f64,
    pub iterations: usize,
    pub converged: bool,
    pub diverged: bool,
    /// sup_t ‖u^{k+1} − u^k‖₂ per iterate.
    pub increments: Vec<f64>,
    /// ‖u^{k+1} − u^k‖_X per iterate.
    pub x_increments: Vec<f64>,
    /// x_increments[k]/x_increments[k − 1].
    pub contraction: Vec<f64>,
    pub x_norm: f64,
    /// sup over collocation nodes of ‖i∂_t u − Pu − σ|u|^{4/n}u‖₂.
    pub pde_residual: f64,
    /// max over mesh endpoints of |‖u(t)‖₂ − ‖u₀‖₂|.
    pub mass_drift: f64,
    pub dr: f64,
    /// Interaction-picture coefficients w(t) = e^{itP}u(t) per mode at every mesh endpoint (t = 0 first).
    #[serde(skip)]
    pub endpoints: Vec<(f64, Vec<Vec<C64>>)>,
}

struct Collocation {
    c: Vec<f64>,
    b: Vec<f64>,
    a: Vec<Vec<f64>>,
}

impl Collocation {
    /// Gauss collocation on [0, 1]: nodes c_j, weights b_j and a_{jk} = ∫₀^{c_j} L_k.
    fn new(stages: usize) -> Self {
        let gl = GaussLegendre::<f64>::new(stages);
        let (c, b): (Vec<f64>, Vec<f64>) = gl.mapped(0.0, 1.0).unzip();
        let lagrange = |k: usize, x: f64| {
            c.iter()
                .enumerate()
                .filter(|(j, _)| *j != k)
                .map(|(_, cj)| (x - cj) / (c[k] - cj))
                .product::<f64>()
        };
        let a = c
            .iter()
            .map(|&cj| (0..stages).map(|k| gl.integrate(0.0, cj, |x| lagrange(k, x))).collect())
            .collect();
        Self { c, b, a }
    }
}

/// Nonlinearity |u|^{4/n}u on a physical (r, cos θ) collocation grid, projected back to the modes.
struct Nonlinearity<'a> {
    family: &'a ModeFamily,
    rule: Vec<(f64, f64)>,
    y: Vec<Vec<f64>>,
    gauge: Vec<f64>,
    jac: Vec<f64>,
    power: f64,
}

impl<'a> Nonlinearity<'a> {
    fn new(family: &'a ModeFamily) -> Result<Self, DynamicsError> {
        let n = family.metric.n;
        let ell_max = family.ell_max();
        // 3/2-rule collocation
        let m = (3 * (ell_max + 1)).div_ceil(2).max(2);
        let rule = angular_rule(n, m)?;
        let y = (0..=ell_max)
            .map(|l| rule.iter().map(|(x, _)| zonal_harmonic(n, l, *x)).collect())
            .collect::<Result<_, _>>()?;
        let half = 0.5 * (n as f64 - 1.0);
        let gauge = family.r().iter().map(|&r| family.metric.warp(r).v.powf(half)).collect();
        let jac = family.r().iter().map(|&r| family.metric.warp(r).v.powi(n as i32 - 1)).collect();
        Ok(Self {
            family,
            rule,
            y,
            gauge,
            jac,
            power: 4.0 / n as f64,
        })
    }

    /// Physical values u(r_i, x_a), row-major in (i, a), from mode vectors.
    fn physical(&self, modes: &[Vec<C64>]) -> Vec<C64> {
        let (nr, na) = (self.gauge.len(), self.rule.len());
        let mut u = vec![C64::new(0.0, 0.0); nr * na];
        for (v, yl) in modes.iter().zip(&self.y) {
            for i in 0..nr {
                for a in 0..na {
                    u[i * na + a] += v[i] * yl[a];
                }
            }
        }
        for i in 0..nr {
            for a in 0..na {
                u[i * na + a] /= self.gauge[i];
            }
        }
        u
    }

    fn project(&self, field: &[C64]) -> Vec<Vec<C64>> {
        let na = self.rule.len();
        self.y
            .iter()
            .map(|yl| {
                self.gauge
                    .iter()
                    .enumerate()
                    .map(|(i, g)| {
                        (0..na).fold(C64::new(0.0, 0.0), |acc, a| acc + field[i * na + a] * (self.rule[a].1 * yl[a])) * g
                    })
                    .collect()
            })
            .collect()
    }

    fn apply(&self, u: &[C64]) -> Vec<C64> {
        u.iter().map(|z| z * z.norm().powf(self.power)).collect()
    }

    /// ∫|u|^q over the grid for a physical field.
    fn lq_power(&self, u: &[C64], q: f64) -> f64 {
        let na = self.rule.len();
        self.jac
            .iter()
            .enumerate()
            .map(|(i, j)| j * (0..na).map(|a| self.rule[a].1 * u[i * na + a].norm().powf(q)).sum::<f64>())
            .sum::<f64>()
            * self.family.dr
    }

    /// For interaction-picture coefficients w at times t: (e^{itP}ΠN(e^{−itP}w), physical u).
    fn integrands(&self, times: &[f64], ws: &[Vec<Vec<C64>>]) -> (Vec<Vec<Vec<C64>>>, Vec<Vec<C64>>) {
        const CHUNK: usize = 128;
        let ops = &self.family.ops;
        let mut phis = Vec::with_capacity(times.len());
        let mut phys = Vec::with_capacity(times.len());
        for (tc, wc) in times.chunks(CHUNK).zip(ws.chunks(CHUNK)) {
            // modes at each time: per ℓ batch synthesis of e^{−itλ}w
            let per_ell: Vec<Vec<Vec<C64>>> = ops
                .iter()
                .enumerate()
                .map(|(l, op)| {
                    let cs: Vec<Vec<C64>> = tc
                        .iter()
                        .zip(wc)
                        .map(|(&t, w)| {
                            w[l].iter()
                                .zip(op.eigenvalues())
                                .map(|(c, &lam)| c * C64::new(0.0, -t * lam).exp())
                                .collect()
                        })
                        .collect();
                    op.synthesize_batch(&cs)
                })
                .collect();
            let fields: Vec<(Vec<C64>, Vec<Vec<C64>>)> = (0..tc.len())
                .into_par_iter()
                .map(|j| {
                    let modes: Vec<Vec<C64>> = per_ell.iter().map(|m| m[j].clone()).collect();
                    let u = self.physical(&modes);
                    let nl = self.project(&self.apply(&u));
                    (u, nl)
                })
                .collect();
            let mut nls_per_ell: Vec<Vec<Vec<C64>>> = vec![Vec::with_capacity(tc.len()); ops.len()];
            for (u, nl) in fields {
                phys.push(u);
                for (l, v) in nl.into_iter().enumerate() {
                    nls_per_ell[l].push(v);
                }
            }
            let coeffs: Vec<Vec<Vec<C64>>> = ops
                .iter()
                .zip(&nls_per_ell)
                .map(|(op, vs)| op.coefficients_batch(vs))
                .collect();
            for (j, &t) in tc.iter().enumerate() {
                phis.push(
                    ops.iter()
                        .enumerate()
                        .map(|(l, op)| {
                            coeffs[l][j]
                                .iter()
                                .zip(op.eigenvalues())
                                .map(|(c, &lam)| c * C64::new(0.0, t * lam).exp())
                                .collect()
                        })
                        .collect(),
                );
            }
        }
        (phis, phys)
    }
}

fn coeff_norm(a: &[Vec<C64>], b: Option<&[Vec<C64>]>, dr: f64) -> f64 {
    let mut s = 0.0;
    for (l, v) in a.iter().enumerate() {
        for (k, z) in v.iter().enumerate() {
            let d = match b {
                Some(b) => z - b[l][k],
                None => *z,
            };
            s += d.norm_sqr();
        }
    }
    (s * dr).sqrt()
}

/// Picard iteration for u = e^{−itP}u₀ + (σ/i)∫₀^t e^{−i(t−s)P}|u|^{4/n}u ds on [0, T] (and [−T, 0]),
/// written for w = e^{itP}u and discretised by Gauss collocation on a uniform mesh. Every iterate is
/// a global update of all collocation values from the previous iterate.
pub fn nls_picard(family: &ModeFamily, u0: &FieldState, config: &NlsConfig) -> Result<NlsRun, DynamicsError> {
    if config.intervals == 0 || config.stages == 0 || !(config.horizon > 0.0) || config.max_iter == 0 {
        return Err(DynamicsError::InvalidSpec(format!("{config:?}")));
    }
    let mut padded = u0.clone();
    padded.modes.resize(family.ops.len(), vec![C64::new(0.0, 0.0); u0.r.len()]);
    // the tail of small data enters only through the nonlinearity
    let ev = Evolution::with_tail(family, &padded, INTEGRATED_TAIL)?;
    ev.check(config.horizon)?;
    let nl = Nonlinearity::new(family)?;
    let col = Collocation::new(config.stages);
    let dr = family.dr;
    let q = 2.0 + nl.power;
    let u0_norm = padded.l2_norm();
    let w0 = ev.coeffs.clone();
    let h = config.horizon / config.intervals as f64;
    let branches: Vec<f64> = if config.backward { vec![1.0, -1.0] } else { vec![1.0] };
    // node list: (branch, interval, stage, time, quadrature weight |h| b_j)
    let mut nodes = Vec::new();
    for (bi, &dir) in branches.iter().enumerate() {
        for k in 0..config.intervals {
            for (j, cj) in col.c.iter().enumerate() {
                nodes.push((bi, k, j, dir * h * (k as f64 + cj), h * col.b[j]));
            }
        }
    }
    let times: Vec<f64> = nodes.iter().map(|n| n.3).collect();
    let coupling = C64::new(0.0, -config.sigma);
    let duhamel = |phi: &[Vec<Vec<C64>>]| -> (Vec<Vec<Vec<C64>>>, Vec<(f64, Vec<Vec<C64>>)>) {
        let mut stage_vals = vec![Vec::new(); nodes.len()];
        let mut ends = vec![(0.0, w0.clone())];
        let s = config.stages;
        for (bi, &dir) in branches.iter().enumerate() {
            let mut current = w0.clone();
            let hs = coupling * (dir * h);
            for k in 0..config.intervals {
                let base = (bi * config.intervals + k) * s;
                for j in 0..s {
                    let mut v = current.clone();
                    for (jj, a) in col.a[j].iter().enumerate() {
                        let f = hs * a;
                        for (vl, pl) in v.iter_mut().zip(&phi[base + jj]) {
                            for (x, p) in vl.iter_mut().zip(pl) {
                                *x += f * p;
                            }
                        }
                    }
                    stage_vals[base + j] = v;
                }
                for (jj, b) in col.b.iter().enumerate() {
                    let f = hs * b;
                    for (vl, pl) in current.iter_mut().zip(&phi[base + jj]) {
                        for (x, p) in vl.iter_mut().zip(pl) {
                            *x += f * p;
                        }
                    }
                }
                ends.push((dir * h * (k + 1) as f64, current.clone()));
            }
        }
        (stage_vals, ends)
    };
    let lq_time = |phys: &[Vec<C64>], other: Option<&[Vec<C64>]>| -> f64 {
        phys.par_iter()
            .enumerate()
            .map(|(i, u)| {
                let w = nodes[i].4;
                match other {
                    Some(o) => {
                        let d: Vec<C64> = u.iter().zip(&o[i]).map(|(a, b)| a - b).collect();
                        w * nl.lq_power(&d, q)
                    }
                    None => w * nl.lq_power(u, q),
                }
            })
            .sum::<f64>()
            .powf(1.0 / q)
    };
    let mut w: Vec<Vec<Vec<C64>>> = vec![w0.clone(); nodes.len()];
    let (mut phi, mut phys) = nl.integrands(&times, &w);
    let mut ends = Vec::new();
    let mut increments = Vec::new();
    let mut x_increments = Vec::new();
    let mut contraction = Vec::new();
    let mut converged = false;
    let mut diverged = false;
    let mut pde_residual = f64::NAN;
    let mut streak = 0;
    for _ in 0..config.max_iter {
        let (w_new, e) = duhamel(&phi);
        let (phi_new, phys_new) = nl.integrands(&times, &w_new);
        let inc = w
            .par_iter()
            .zip(&w_new)
            .map(|(a, b)| coeff_norm(b, Some(a), dr))
            .reduce(|| 0.0, f64::max);
        let x_inc = lq_time(&phys_new, Some(&phys)) + inc;
        // collocation derivative of w_new at the nodes is (σ/i)φ_old
        pde_residual = phi
            .par_iter()
            .zip(&phi_new)
            .map(|(a, b)| config.sigma.abs() * coeff_norm(b, Some(a), dr))
            .reduce(|| 0.0, f64::max);
        if let Some(&prev) = x_increments.last() {
            let c: f64 = if prev > 0.0 { x_inc / prev } else { 0.0 };
            contraction.push(c);
            streak = if c >= 1.0 { streak + 1 } else { 0 };
        }
        increments.push(inc);
        x_increments.push(x_inc);
        w = w_new;
        phi = phi_new;
        phys = phys_new;
        ends = e;
        if inc < config.tol {
            converged = true;
            break;
        }
        if streak >= 3 {
            diverged = true;
            break;
        }
    }
    let sup_l2 = w.iter().map(|x| coeff_norm(x, None, dr)).fold(u0_norm, f64::max);
    let x_norm = lq_time(&phys, None) + sup_l2;
    let mass_drift = ends
        .iter()
        .map(|(_, c)| (coeff_norm(c, None, dr) - u0_norm).abs())
        .fold(0.0, f64::max);
    let mut endpoints = ends;
    endpoints.sort_by(|a, b| a.0.total_cmp(&b.0));
    endpoints.dedup_by(|a, b| a.0 == b.0);
    Ok(NlsRun {
        sigma: config.sigma,
        u0_norm,
        horizon: config.horizon,
        iterations: increments.len(),
        converged,
        diverged,
        increments,
        x_increments,
        contraction,
        x_norm,
        pde_residual,
        mass_drift,
        dr,
        endpoints,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScatteringReport {
    /// (t, ‖w(t) − w(t/2)‖₂) for t = T/2^j, ascending.
    pub plus: Vec<(f64, f64)>,
    pub minus: Vec<(f64, f64)>,
    /// residual(t)/residual(2t) along each ladder.
    pub factors_plus: Vec<f64>,
    pub factors_minus: Vec<f64>,
    pub min_factor: f64,
    /// Every residual strictly smaller than the previous one.
    pub cauchy: bool,
}

/// Residuals of w(t) = e^{itP}u(t) between t and t/2 on the ladder t = T, T/2, …, T/2^{levels−1}.
pub fn scattering_detect(run: &NlsRun, levels: usize) -> Result<ScatteringReport, DynamicsError> {
    let find = |t: f64| {
        run.endpoints
            .iter()
            .find(|(s, _)| (s - t).abs() <= 1e-9 * run.horizon)
            .map(|(_, c)| c)
            .ok_or_else(|| DynamicsError::InvalidSpec(format!("no mesh endpoint at t = {t}; use a power-of-two interval count")))
    };
    let ladder = |sign: f64| -> Result<Vec<(f64, f64)>, DynamicsError> {
        let mut out = Vec::new();
        for j in (0..levels).rev() {
            let t = sign * run.horizon / 2f64.powi(j as i32);
            let r = coeff_norm(find(t)?, Some(find(t / 2.0)?), run.dr);
            out.push((t, r));
        }
        Ok(out)
    };
    let plus = ladder(1.0)?;
    let has_minus = run.endpoints.iter().any(|(t, _)| *t < 0.0);
    let minus = if has_minus { ladder(-1.0)? } else { Vec::new() };
    let factors = |l: &[(f64, f64)]| -> Vec<f64> {
        l.windows(2)
            .map(|p| if p[1].1 > 0.0 { p[0].1 / p[1].1 } else { f64::INFINITY })
            .collect()
    };
    let factors_plus = factors(&plus);
    let factors_minus = factors(&minus);
    let all = factors_plus.iter().chain(&factors_minus);
    let min_factor = all.clone().copied().fold(f64::INFINITY, f64::min);
    let zero = plus.iter().chain(&minus).all(|(_, r)| *r == 0.0);
    Ok(ScatteringReport {
        cauchy: zero || all.clone().all(|f| *f > 1.0),
        plus,
        minus,
        factors_plus,
        factors_minus,
        min_factor,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContractionSweep {
    pub radii: Vec<f64>,
    pub factors: Vec<f64>,
    pub fit: DecayFit<f64>,
}

/// First Picard contraction factor ‖u² − u¹‖_X/‖u¹ − u⁰‖_X for data rescaled to each L² radius.
pub fn contraction_sweep(
    family: &ModeFamily,
    shape: &FieldState,
    radii: &[f64],
    config: &NlsConfig,
) -> Result<ContractionSweep, DynamicsError> {
    let n0 = shape.l2_norm();
    let cfg = NlsConfig {
        max_iter: 2,
        tol: 0.0,
        ..config.clone()
    };
    let factors = radii
        .iter()
        .map(|&r| {
            let run = nls_picard(family, &shape.scale(C64::new(r / n0, 0.0)), &cfg)?;
            run.contraction
                .first()
                .copied()
                .ok_or_else(|| DynamicsError::InvalidSpec("contraction needs two iterates".into()))
        })
        .collect::<Result<Vec<f64>, DynamicsError>>()?;
    let fit = power_law_fit(radii, &factors)?;
    Ok(ContractionSweep {
        radii: radii.to_vec(),
        factors,
        fit,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{WarpFamily, WarpedMetric};
    use crate::spectral::BandDirection;

    fn warped() -> WarpedMetric<f64> {
        WarpedMetric::new(3, 1.0, 1.0, WarpFamily::PowerPerturb { amplitude: 0.3 }).unwrap()
    }

    #[test]
    fn unitary_group_law_and_time_reversal() {
        for m in [WarpedMetric::flat(3), warped()] {
            let fam = ModeFamily::build(&m, 1, 60.0, 0.1, None).unwrap();
            let s = FieldState::from_fn(&fam, 1, |r, x| C64::new((-r * r / 16.0).exp() * (1.0 + 0.3 * r * r + 0.2 * r * x), 0.2 * (-r * r / 8.0).exp())).unwrap();
            let id = propagate(&fam, &s, 0.0).unwrap();
            assert!(id.axpy(C64::new(-1.0, 0.0), &s).l2_norm() < 1e-10);
            let a = propagate(&fam, &s, 0.4).unwrap();
            assert!((a.l2_norm() - s.l2_norm()).abs() < 1e-10);
            let ab = propagate(&fam, &a, 0.3).unwrap();
            let direct = propagate(&fam, &s, 0.7).unwrap();
            assert!(ab.axpy(C64::new(-1.0, 0.0), &direct).l2_norm() < 1e-10);
            let conj = |x: &FieldState| FieldState {
                modes: x.modes.iter().map(|m| m.iter().map(|z| z.conj()).collect()).collect(),
                ..x.clone()
            };
            let back = propagate(&fam, &conj(&s), -0.4).unwrap();
            assert!(back.axpy(C64::new(-1.0, 0.0), &conj(&a)).l2_norm() < 1e-10);
        }
    }

    #[test]
    fn light_cone_violation_aborts() {
        let fam = ModeFamily::build(&WarpedMetric::flat(3), 0, 20.0, 0.1, None).unwrap();
        let s = FieldState::radial(&fam, |r| C64::new((-r * r / 2.0).exp(), 0.0)).unwrap();
        assert!(matches!(
            propagate(&fam, &s, 50.0),
            Err(DynamicsError::Spectral(SpectralError::LightCone { .. }))
        ));
    }

    #[test]
    fn windowed_family_rejects_out_of_band_data() {
        let fam = ModeFamily::build(&WarpedMetric::flat(3), 0, 20.0, 0.1, Some(1.0)).unwrap();
        let s = FieldState::radial(&fam, |r| C64::new((-r * r * 4.0).exp(), 0.0)).unwrap();
        assert!(matches!(Evolution::new(&fam, &s), Err(DynamicsError::OutsideSpectrum { .. })));
    }

    #[test]
    fn flat_gaussian_sup_norm() {
        let fam = ModeFamily::build(&WarpedMetric::flat(3), 0, 100.0, 0.05, Some(60.0)).unwrap();
        let err = gaussian_sup_error(&fam, &[0.0, 0.5, 1.0, 2.0, 3.5, 5.0]).unwrap();
        assert!(err < 0.01, "{err}");
    }

    #[test]
    fn strichartz_energy_pair_is_unitary() {
        let fam = ModeFamily::build(&WarpedMetric::flat(3), 0, 600.0, 0.2, Some(3.0)).unwrap();
        let bands: Vec<DyadicBand> = (0..2).map(|k| DyadicBand::new(k, BandDirection::Low)).collect();
        let rep = strichartz_experiment(&fam, f64::INFINITY, 2.0, &bands, DataGenerator::Gaussian { width_factor: 1.0 }, None, 0.05)
            .unwrap();
        assert!(rep.rows.iter().all(|r| (r.ratio - 1.0).abs() < 1e-8), "{rep:?}");
        assert!(matches!(
            strichartz_experiment(&fam, 2.0, 4.0, &bands, DataGenerator::Gaussian { width_factor: 1.0 }, None, 0.05),
            Err(DynamicsError::Inadmissible { .. })
        ));
        assert_eq!(admissibility_residual(2.0, 6.0, 3), 0.0);
    }

    #[test]
    fn nls_trivial_runs() {
        let fam = ModeFamily::build(&WarpedMetric::flat(3), 0, 30.0, 0.2, None).unwrap();
        let zero = FieldState::zeros(&fam, 0);
        let cfg = NlsConfig {
            horizon: 1.0,
            intervals: 16,
            ..NlsConfig::default()
        };
        let run = nls_picard(&fam, &zero, &cfg).unwrap();
        assert!(run.converged && run.iterations == 1);
        let g = FieldState::radial(&fam, |r| C64::new(0.01 * (-r * r / 2.0).exp(), 0.0)).unwrap();
        let lin = nls_picard(&fam, &g, &NlsConfig { sigma: 0.0, ..cfg.clone() }).unwrap();
        let sc = scattering_detect(&lin, 3).unwrap();
        assert!(sc.plus.iter().chain(&sc.minus).all(|(_, r)| *r == 0.0));
        let run = nls_picard(&fam, &g, &cfg).unwrap();
        assert!(run.converged, "{run:?}");
        assert!(run.mass_drift < 10.0 * cfg.tol, "{}", run.mass_drift);
        assert!(run.pde_residual < 10.0 * cfg.tol, "{}", run.pde_residual);
    }

    #[test]
    fn collocation_integrates_cubics() {
        let col = Collocation::new(4);
        for (j, cj) in col.c.iter().enumerate() {
            let v: f64 = col.a[j].iter().zip(&col.c).map(|(a, c)| a * c.powi(3)).sum();
            assert!((v - cj.powi(4) / 4.0).abs() < 1e-14);
        }
    }
}

//! Eikonal phase φ = ϱψ as generating function of the scattering map, transport
//! amplitudes along its characteristics, and the finite-time WKB phase.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::flow::{Direction, Flow, FlowError, PhasePoint, ScatteringData};
use crate::geometry::ChartMetric2D;
use crate::numerics::fit::{power_law_fit, DecayFit};
use crate::numerics::interp::{cumulative_integral, lagrange_weights, stencil_start};
use crate::numerics::ode::{AdvanceError, Dopri5};
use crate::numerics::quadrature::GaussLegendre;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum PhaseError {
    #[error("invalid domain: {0}")]
    InvalidDomain(String),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error("Newton iteration diverged after {iterations} iterations, last residual {residual:e}")]
    NewtonDivergence { iterations: usize, residual: f64 },
    #[error("plaquette circulation {circulation:e} exceeds {tol:e}: data are not Lagrangian")]
    NonLagrangian { circulation: f64, tol: f64 },
    #[error("point (r, θ, ϑ) = ({r}, {theta}, {vartheta}) outside the table")]
    OutsideTable { r: f64, theta: f64, vartheta: f64 },
    #[error("characteristic left the table at s = {s}: (r, θ) = ({r}, {theta})")]
    LeftTable { s: f64, r: f64, theta: f64 },
    #[error("tail integral does not converge (increment ratio {ratio:.3})")]
    NonConvergentTail {
        ratio: f64,
        horizons: Vec<f64>,
        values: Vec<f64>,
    },
    #[error("characteristic map not invertible at (r, θ) = ({r}, {theta}): {reason}")]
    CharacteristicInversion { r: f64, theta: f64, reason: String },
}

/// Θ^±(R, V, I, ε) = {r > R, θ ∈ V, |θ − ϑ| < ε} with ϱ² ∈ I and sign(ϱ) = ±.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ThetaDomain {
    pub r_min: f64,
    pub angles: (f64, f64),
    pub eps_sep: f64,
    pub energies: (f64, f64),
    pub sign: Direction,
}

impl ThetaDomain {
    pub fn new(
        r_min: f64,
        angles: (f64, f64),
        eps_sep: f64,
        energies: (f64, f64),
        sign: Direction,
    ) -> Result<Self, PhaseError> {
        if !(angles.0 < angles.1) {
            return Err(PhaseError::InvalidDomain(format!("empty angular interval {angles:?}")));
        }
        if !(eps_sep > 0.0) {
            return Err(PhaseError::InvalidDomain(format!("eps_sep = {eps_sep} must be > 0")));
        }
        if !(energies.0 > 0.0 && energies.0 < energies.1) {
            return Err(PhaseError::InvalidDomain(format!("energy interval {energies:?} not in (0, ∞)")));
        }
        if !(r_min > 0.0) {
            return Err(PhaseError::InvalidDomain(format!("R = {r_min} must be > 0")));
        }
        Ok(Self {
            r_min,
            angles,
            eps_sep,
            energies,
            sign,
        })
    }

    /// Checks R > ε R_M for the chart.
    pub fn validate_for(&self, metric: &ChartMetric2D<f64>, eps_scale: f64) -> Result<(), PhaseError> {
        let r_chart = eps_scale * metric.r_m;
        if self.r_min > r_chart {
            Ok(())
        } else {
            Err(PhaseError::InvalidDomain(format!(
                "R = {} must exceed the chart radius {r_chart}",
                self.r_min
            )))
        }
    }

    /// The representative ϱ with |ϱ| = 1 and the domain's sign.
    pub fn unit_rho(&self) -> f64 {
        self.sign.sign::<f64>()
    }

    pub fn admits_rho(&self, rho: f64) -> bool {
        let e = rho * rho;
        rho * self.unit_rho() > 0.0 && e >= self.energies.0 && e <= self.energies.1
    }

    pub fn contains(&self, r: f64, theta: f64, vartheta: f64) -> bool {
        r > self.r_min
            && theta >= self.angles.0
            && theta <= self.angles.1
            && (vartheta - theta).abs() < self.eps_sep
    }
}

/// Solution of F^±(r, θ, ρ̲, η̲) = (·, ϑ, ϱ, ·).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LagrangianPoint {
    pub rho_under: f64,
    pub eta_under: f64,
    pub r_bar: f64,
    pub eta_bar: f64,
    /// ∂²φ/∂(r, θ)², i.e. ∂(ρ̲, η̲)/∂(r, θ).
    pub hessian: [[f64; 2]; 2],
    /// ∂(ρ̲, η̲)/∂(ϱ, ϑ).
    pub dxi_dparams: [[f64; 2]; 2],
    pub residual: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NewtonOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub flow_tol: f64,
    pub flow_abs_tol: f64,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 40,
            flow_tol: 1e-11,
            flow_abs_tol: 1e-18,
        }
    }
}

fn newton_flow<'a>(metric: &'a ChartMetric2D<f64>, eps_scale: f64, o: &NewtonOptions) -> Flow<'a, f64> {
    Flow::new(metric)
        .with_scale(eps_scale)
        .with_tol(o.flow_tol)
        .with_abs_tol(o.flow_abs_tol)
}

fn inv2(m: [[f64; 2]; 2]) -> Option<[[f64; 2]; 2]> {
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    if det == 0.0 || !det.is_finite() {
        return None;
    }
    Some([[m[1][1] / det, -m[0][1] / det], [-m[1][0] / det, m[0][0] / det]])
}

fn mul2(a: [[f64; 2]; 2], b: [[f64; 2]; 2]) -> [[f64; 2]; 2] {
    let mut c = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            c[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    c
}

fn wrap_angle(x: f64) -> f64 {
    let t = std::f64::consts::TAU;
    x - t * (x / t).round()
}

/// Newton on (ρ, η) ↦ (ϱ̄, ϑ̄)(r, θ, ρ, η) − (ϱ, ϑ) for ϱ > 0 with the outgoing map.
fn invert_outgoing(
    flow: &Flow<f64>,
    r: f64,
    theta: f64,
    rho: f64,
    vartheta: f64,
    seed: (f64, f64),
    opts: &NewtonOptions,
) -> Result<LagrangianPoint, PhaseError> {
    let eval = |x: (f64, f64)| -> Result<(ScatteringData<f64>, [f64; 2]), FlowError> {
        let d = flow.scattering_map_with_jacobian(&PhasePoint::new(r, theta, x.0, x.1), Direction::Outgoing)?;
        let res = [d.rho_bar - rho, wrap_angle(d.theta_bar - vartheta)];
        Ok((d, res))
    };
    let norm = |res: &[f64; 2]| (res[0] / rho).abs().max(res[1].abs());
    let mut x = seed;
    let (mut d, mut res) = eval(x)?;
    let mut nres = norm(&res);
    let mut it = 0;
    while nres > opts.tol {
        if it >= opts.max_iter {
            return Err(PhaseError::NewtonDivergence {
                iterations: it,
                residual: nres,
            });
        }
        it += 1;
        let j = d.jacobian.expect("jacobian requested");
        let fxi = [[j[2][2], j[2][3]], [j[1][2], j[1][3]]];
        let inv = inv2(fxi).ok_or(PhaseError::NewtonDivergence {
            iterations: it,
            residual: nres,
        })?;
        let step = [
            inv[0][0] * res[0] + inv[0][1] * res[1],
            inv[1][0] * res[0] + inv[1][1] * res[1],
        ];
        let mut lambda = 1.0;
        let mut accepted = false;
        for _ in 0..12 {
            let trial = (x.0 - lambda * step[0], x.1 - lambda * step[1]);
            if let Ok((dt, rt)) = eval(trial) {
                let nt = norm(&rt);
                if nt < nres || nt <= opts.tol {
                    x = trial;
                    d = dt;
                    res = rt;
                    nres = nt;
                    accepted = true;
                    break;
                }
            }
            lambda *= 0.5;
        }
        if !accepted {
            return Err(PhaseError::NewtonDivergence {
                iterations: it,
                residual: nres,
            });
        }
    }
    let j = d.jacobian.expect("jacobian requested");
    let fxi = [[j[2][2], j[2][3]], [j[1][2], j[1][3]]];
    let fx = [[j[2][0], j[2][1]], [j[1][0], j[1][1]]];
    let inv = inv2(fxi).ok_or(PhaseError::NewtonDivergence {
        iterations: it,
        residual: nres,
    })?;
    let m = mul2(inv, fx);
    let mut hessian = [[-m[0][0], -m[0][1]], [-m[1][0], -m[1][1]]];
    // symmetric by the Lagrangian property; average away round-off
    let off = 0.5 * (hessian[0][1] + hessian[1][0]);
    hessian[0][1] = off;
    hessian[1][0] = off;
    Ok(LagrangianPoint {
        rho_under: x.0,
        eta_under: x.1,
        r_bar: d.r_bar,
        eta_bar: d.eta_bar,
        hessian,
        dxi_dparams: inv,
        residual: nres,
        iterations: it,
    })
}

/// Solves for (ρ̲, η̲) with F^±(r, θ, ρ̲, η̲) = (ψ, ϑ, ϱ, −∂_ϑφ); the branch is sign(ϱ).
///
/// ϱ < 0 uses time reversal: F⁻(x, −ξ) is the flipped F⁺(x, ξ).
pub fn invert_lagrangian(
    flow: &Flow<f64>,
    r: f64,
    theta: f64,
    rho: f64,
    vartheta: f64,
    seed: Option<(f64, f64)>,
    opts: &NewtonOptions,
) -> Result<LagrangianPoint, PhaseError> {
    if rho == 0.0 {
        return Err(PhaseError::InvalidDomain("ϱ = 0".into()));
    }
    let a = rho.abs();
    let s = rho.signum();
    let delta = vartheta - theta;
    let seed = seed
        .map(|(p, q)| (s * p, s * q))
        .unwrap_or((a * delta.cos(), r * a * delta.sin()));
    let out = invert_outgoing(flow, r, theta, a, vartheta, seed, opts)?;
    if s > 0.0 {
        return Ok(out);
    }
    let h = out.hessian;
    let d = out.dxi_dparams;
    Ok(LagrangianPoint {
        rho_under: -out.rho_under,
        eta_under: -out.eta_under,
        r_bar: out.r_bar,
        eta_bar: -out.eta_bar,
        hessian: [[-h[0][0], -h[0][1]], [-h[1][0], -h[1][1]]],
        // ξ(ϱ, ϑ) = −ξ⁺(−ϱ, ϑ)
        dxi_dparams: [[d[0][0], -d[0][1]], [d[1][0], -d[1][1]]],
        ..out
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GridSpec {
    pub r_max: f64,
    pub n_r: usize,
    pub n_theta: usize,
    pub n_delta: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EikonalOptions {
    pub newton: NewtonOptions,
    /// Abort threshold for plaquette circulations.
    pub circulation_tol: f64,
}

impl Default for EikonalOptions {
    fn default() -> Self {
        Self {
            newton: NewtonOptions::default(),
            circulation_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EikonalDiagnostics {
    /// max |p(x, ∂φ) − ϱ²| over nodes (at |ϱ| = 1).
    pub hj_residual: f64,
    pub max_circulation: f64,
    /// max over nodes of |ψ − r̄|, |ϑ̄ − ϑ| and |ϱ̄ − ϱ|.
    pub identity_residual: f64,
    pub max_newton_iterations: usize,
    pub r_anchor: f64,
    pub theta_anchor: f64,
}

/// ψ on a sheared tensor grid (r_i, θ_j, ϑ = θ_j + δ_k).
#[derive(Debug, Clone)]
pub struct EikonalTable {
    pub domain: ThetaDomain,
    pub eps_scale: f64,
    pub metric: ChartMetric2D<f64>,
    pub r: Vec<f64>,
    pub theta: Vec<f64>,
    pub delta: Vec<f64>,
    pub psi: Vec<f64>,
    /// (∂_rψ, ∂_θψ, ∂_ϑψ) from the pointwise inversion.
    pub dpsi: Vec<[f64; 3]>,
    /// Hessian of ψ in (r, θ).
    pub hessian: Vec<[[f64; 2]; 2]>,
    pub r_bar: Vec<f64>,
    pub diagnostics: EikonalDiagnostics,
    pub newton: NewtonOptions,
}

fn geometric_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let q = (hi / lo).ln();
    (0..n)
        .map(|i| {
            if i + 1 == n {
                hi
            } else {
                lo * (q * i as f64 / (n - 1) as f64).exp()
            }
        })
        .collect()
}

fn uniform_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

/// Integrates node data along a line and returns the integrals over consecutive edges.
fn edge_integrals(x: &[f64], y: &[f64]) -> Vec<f64> {
    let c = cumulative_integral(x, y);
    c.windows(2).map(|w| w[1] - w[0]).collect()
}

/// Builds ψ by line integration of ψ_r dr + ψ_θ dθ + ψ_ϑ dϑ with
/// ψ_r = ρ̲/ϱ, ψ_θ = η̲/ϱ, ψ_ϑ = −η̄/ϱ from pointwise inversions at |ϱ| = 1.
pub fn build_eikonal(
    metric: &ChartMetric2D<f64>,
    eps_scale: f64,
    domain: &ThetaDomain,
    grid: &GridSpec,
    opts: &EikonalOptions,
) -> Result<EikonalTable, PhaseError> {
    domain.validate_for(metric, eps_scale)?;
    if grid.n_r < 4 || grid.n_theta < 4 || grid.n_delta < 4 {
        return Err(PhaseError::InvalidGrid("need at least 4 nodes per axis".into()));
    }
    if !(grid.r_max > domain.r_min) {
        return Err(PhaseError::InvalidGrid(format!("r_max = {} must exceed R", grid.r_max)));
    }
    let flow = newton_flow(metric, eps_scale, &opts.newton);
    let rho = domain.unit_rho();
    let r = geometric_grid(domain.r_min, grid.r_max, grid.n_r);
    let theta = uniform_grid(domain.angles.0, domain.angles.1, grid.n_theta);
    // cell-centred so that |δ| < ε strictly
    let h = 2.0 * domain.eps_sep / grid.n_delta as f64;
    let delta: Vec<f64> = (0..grid.n_delta)
        .map(|k| -domain.eps_sep + (k as f64 + 0.5) * h)
        .collect();
    // δ-lines with the diagonal δ = 0 inserted
    let k0 = delta.partition_point(|d| *d < 0.0);
    let mut dline = delta.clone();
    dline.insert(k0, 0.0);
    let (nr, nt, nd) = (grid.n_r, grid.n_theta, dline.len());
    let idx = |i: usize, j: usize, k: usize| (i * nt + j) * nd + k;

    let nodes: Vec<(usize, usize, usize)> = (0..nr)
        .flat_map(|i| (0..nt).flat_map(move |j| (0..nd).map(move |k| (i, j, k))))
        .collect();
    let sols: Vec<LagrangianPoint> = nodes
        .par_iter()
        .map(|&(i, j, k)| {
            invert_lagrangian(&flow, r[i], theta[j], rho, theta[j] + dline[k], None, &opts.newton)
        })
        .collect::<Result<_, _>>()?;

    let a_r: Vec<f64> = sols.iter().map(|s| s.rho_under / rho).collect();
    let a_vt: Vec<f64> = sols.iter().map(|s| -s.eta_bar / rho).collect();
    // θ-derivative at fixed δ
    let a_t: Vec<f64> = sols
        .iter()
        .zip(&a_vt)
        .map(|(s, v)| s.eta_under / rho + v)
        .collect();

    // ψ: anchor (r_0, θ_0, δ = 0), then along r, θ on the diagonal, then along δ
    let (r_anchor, theta_anchor) = (r[0], theta[0]);
    let mut psi = vec![0.0; nr * nt * nd];
    let line_r: Vec<f64> = (0..nr).map(|i| a_r[idx(i, 0, k0)]).collect();
    let cum_r = cumulative_integral(&r, &line_r);
    for i in 0..nr {
        let line_t: Vec<f64> = (0..nt).map(|j| a_t[idx(i, j, k0)]).collect();
        let cum_t = cumulative_integral(&theta, &line_t);
        for j in 0..nt {
            let line_d: Vec<f64> = (0..nd).map(|k| a_vt[idx(i, j, k)]).collect();
            let cum_d = cumulative_integral(&dline, &line_d);
            let base = r_anchor + cum_r[i] + cum_t[j];
            for k in 0..nd {
                psi[idx(i, j, k)] = base + cum_d[k] - cum_d[k0];
            }
        }
    }

    // plaquette circulations in the three coordinate planes
    let mut circ = 0.0f64;
    let er: Vec<Vec<f64>> = (0..nt * nd)
        .map(|jk| {
            let (j, k) = (jk / nd, jk % nd);
            edge_integrals(&r, &(0..nr).map(|i| a_r[idx(i, j, k)]).collect::<Vec<_>>())
        })
        .collect();
    let et: Vec<Vec<f64>> = (0..nr * nd)
        .map(|ik| {
            let (i, k) = (ik / nd, ik % nd);
            edge_integrals(&theta, &(0..nt).map(|j| a_t[idx(i, j, k)]).collect::<Vec<_>>())
        })
        .collect();
    let ed: Vec<Vec<f64>> = (0..nr * nt)
        .map(|ij| {
            let (i, j) = (ij / nt, ij % nt);
            edge_integrals(&dline, &(0..nd).map(|k| a_vt[idx(i, j, k)]).collect::<Vec<_>>())
        })
        .collect();
    let er_at = |j: usize, k: usize, i: usize| er[j * nd + k][i];
    let et_at = |i: usize, k: usize, j: usize| et[i * nd + k][j];
    let ed_at = |i: usize, j: usize, k: usize| ed[i * nt + j][k];
    for i in 0..nr - 1 {
        for j in 0..nt - 1 {
            for k in 0..nd {
                let c = er_at(j, k, i) + et_at(i + 1, k, j) - er_at(j + 1, k, i) - et_at(i, k, j);
                circ = circ.max(c.abs());
            }
        }
    }
    for i in 0..nr - 1 {
        for k in 0..nd - 1 {
            for j in 0..nt {
                let c = er_at(j, k, i) + ed_at(i + 1, j, k) - er_at(j, k + 1, i) - ed_at(i, j, k);
                circ = circ.max(c.abs());
            }
        }
    }
    for j in 0..nt - 1 {
        for k in 0..nd - 1 {
            for i in 0..nr {
                let c = et_at(i, k, j) + ed_at(i, j + 1, k) - et_at(i, k + 1, j) - ed_at(i, j, k);
                circ = circ.max(c.abs());
            }
        }
    }
    if !(circ <= opts.circulation_tol) {
        return Err(PhaseError::NonLagrangian {
            circulation: circ,
            tol: opts.circulation_tol,
        });
    }

    let mut hj = 0.0f64;
    let mut ident = 0.0f64;
    for (n, &(i, j, k)) in nodes.iter().enumerate() {
        let s = &sols[n];
        let p = flow.symbol(&PhasePoint::new(r[i], theta[j], s.rho_under, s.eta_under));
        hj = hj.max((p - rho * rho).abs());
        ident = ident.max((psi[n] - s.r_bar).abs()).max(s.residual);
        let _ = k;
    }
    let diagnostics = EikonalDiagnostics {
        hj_residual: hj,
        max_circulation: circ,
        identity_residual: ident,
        max_newton_iterations: sols.iter().map(|s| s.iterations).max().unwrap_or(0),
        r_anchor,
        theta_anchor,
    };

    // drop the auxiliary diagonal plane
    let mut out_psi = Vec::with_capacity(nr * nt * (nd - 1));
    let mut dpsi = Vec::with_capacity(out_psi.capacity());
    let mut hess = Vec::with_capacity(out_psi.capacity());
    let mut rbar = Vec::with_capacity(out_psi.capacity());
    for (n, &(_, _, k)) in nodes.iter().enumerate() {
        if k == k0 {
            continue;
        }
        let s = &sols[n];
        out_psi.push(psi[n]);
        dpsi.push([a_r[n], s.eta_under / rho, a_vt[n]]);
        let m = s.hessian;
        hess.push([[m[0][0] / rho, m[0][1] / rho], [m[1][0] / rho, m[1][1] / rho]]);
        rbar.push(s.r_bar);
    }
    Ok(EikonalTable {
        domain: *domain,
        eps_scale,
        metric: metric.clone(),
        r,
        theta,
        delta,
        psi: out_psi,
        dpsi,
        hessian: hess,
        r_bar: rbar,
        diagnostics,
        newton: opts.newton,
    })
}

/// Value and gradient of ψ at a point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PsiSample {
    pub psi: f64,
    pub dpsi: [f64; 3],
}

impl EikonalTable {
    fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.theta.len() + j) * self.delta.len() + k
    }

    pub fn len(&self) -> usize {
        self.psi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.psi.is_empty()
    }

    /// Node coordinates (r, θ, ϑ) in storage order.
    pub fn nodes(&self) -> impl Iterator<Item = (f64, f64, f64)> + '_ {
        self.r.iter().flat_map(move |&r| {
            self.theta
                .iter()
                .flat_map(move |&t| self.delta.iter().map(move |&d| (r, t, t + d)))
        })
    }

    pub fn flow(&self) -> Flow<'_, f64> {
        newton_flow(&self.metric, self.eps_scale, &self.newton)
    }

    pub fn in_grid(&self, r: f64, theta: f64, vartheta: f64) -> bool {
        let d = vartheta - theta;
        r >= self.r[0]
            && r <= *self.r.last().expect("grid")
            && theta >= self.theta[0]
            && theta <= *self.theta.last().expect("grid")
            && d.abs() < self.domain.eps_sep
    }

    /// Tensor 4-point Lagrange interpolation in (r, θ, δ).
    pub fn eval(&self, r: f64, theta: f64, vartheta: f64) -> Result<PsiSample, PhaseError> {
        if !self.in_grid(r, theta, vartheta) {
            return Err(PhaseError::OutsideTable { r, theta, vartheta });
        }
        let d = vartheta - theta;
        let si = stencil_start(&self.r, r, 4);
        let sj = stencil_start(&self.theta, theta, 4);
        let sk = stencil_start(&self.delta, d, 4);
        let wi = lagrange_weights(&self.r[si..si + 4], r);
        let wj = lagrange_weights(&self.theta[sj..sj + 4], theta);
        let wk = lagrange_weights(&self.delta[sk..sk + 4], d);
        let mut out = PsiSample {
            psi: 0.0,
            dpsi: [0.0; 3],
        };
        for (a, wa) in wi.iter().enumerate() {
            for (b, wb) in wj.iter().enumerate() {
                for (c, wc) in wk.iter().enumerate() {
                    let w = wa * wb * wc;
                    let n = self.index(si + a, sj + b, sk + c);
                    out.psi += w * self.psi[n];
                    for m in 0..3 {
                        out.dpsi[m] += w * self.dpsi[n][m];
                    }
                }
            }
        }
        Ok(out)
    }

    /// Pointwise inversion at (r, θ, ϑ) for a given ϱ, seeded from the table when inside it.
    pub fn invert_at(&self, r: f64, theta: f64, rho: f64, vartheta: f64) -> Result<LagrangianPoint, PhaseError> {
        if !self.domain.admits_rho(rho) && rho * self.domain.unit_rho() <= 0.0 {
            return Err(PhaseError::InvalidDomain(format!("ϱ = {rho} has the wrong sign for the table")));
        }
        let seed = self
            .eval(r, theta, vartheta)
            .ok()
            .map(|s| (rho.abs() * s.dpsi[0], rho.abs() * s.dpsi[1]));
        invert_lagrangian(&self.flow(), r, theta, rho, vartheta, seed, &self.newton)
    }

    /// CSV with columns r, theta, vartheta, psi, dpsi_r, dpsi_theta, dpsi_vartheta.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), csv::Error> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["r", "theta", "vartheta", "psi", "dpsi_r", "dpsi_theta", "dpsi_vartheta"])?;
        for (n, (r, t, v)) in self.nodes().enumerate() {
            let d = self.dpsi[n];
            wr.write_record(
                [r, t, v, self.psi[n], d[0], d[1], d[2]]
                    .iter()
                    .map(|x| format!("{x:.17e}")),
            )?;
        }
        wr.flush()?;
        Ok(())
    }

    /// JSON sidecar describing the domain, grid and diagnostics.
    pub fn sidecar(&self) -> serde_json::Value {
        serde_json::json!({
            "domain": self.domain,
            "eps_scale": self.eps_scale,
            "metric": format!("{:?}", self.metric.profile),
            "nu": self.metric.nu,
            "grid": {
                "n_r": self.r.len(),
                "n_theta": self.theta.len(),
                "n_delta": self.delta.len(),
                "r_max": self.r.last(),
            },
            "diagnostics": self.diagnostics,
            "newton": self.newton,
        })
    }

    /// Max |p(x, ∂φ)/ϱ² − 1| and sign-coherence summary on the table.
    pub fn sign_coherence(&self) -> SignCoherence {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        let mut ratio_lo = f64::INFINITY;
        let mut ratio_hi = f64::NEG_INFINITY;
        for (n, (r, t, v)) in self.nodes().enumerate() {
            let d = self.dpsi[n];
            lo = lo.min(d[0]);
            hi = hi.max(d[0]);
            let denom = r * (t - v).abs();
            if denom > 0.0 {
                let q = d[1].abs() / denom;
                ratio_lo = ratio_lo.min(q);
                ratio_hi = ratio_hi.max(q);
            }
        }
        SignCoherence {
            dpsi_r_range: (lo, hi),
            angular_ratio_range: (ratio_lo, ratio_hi),
            pass: lo > 0.5 && hi < 2.0 && ratio_lo > 0.0 && ratio_hi.is_finite(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SignCoherence {
    /// Range of ∂_rφ/ϱ.
    pub dpsi_r_range: (f64, f64),
    /// Range of |∂_θφ| / (r|ϱ||θ − ϑ|).
    pub angular_ratio_range: (f64, f64),
    pub pass: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExpansionSweep {
    /// Radii R·[1, r_factor].
    pub r_factor: f64,
    pub n_r: usize,
    /// Interpolation nodes in δ per sweep (Chebyshev, odd).
    pub n_delta: usize,
    /// Fraction of eps_sep used by the δ nodes.
    pub delta_fraction: f64,
    pub theta: Option<f64>,
    /// Terms below this fraction of max|y| on the sweep are treated as zero.
    pub zero_floor: f64,
    pub order_tol: f64,
}

impl Default for ExpansionSweep {
    fn default() -> Self {
        Self {
            r_factor: 100.0,
            n_r: 12,
            n_delta: 11,
            delta_fraction: 0.9,
            theta: None,
            zero_floor: 1e-6,
            order_tol: 0.15,
        }
    }
}

/// r-fit of one term of a two-term model y = c₁(r)δ + O(δ²): `power` 1 is the Taylor
/// coefficient c₁, `power` 2 the δ²-remainder sup_δ |y − c₁δ|/δ² over the sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoefficientFit {
    pub quantity: String,
    pub power: usize,
    pub expected_order: f64,
    /// `None` when the coefficient vanishes to the noise floor on the whole sweep.
    pub fit: Option<DecayFit<f64>>,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExpansionReport {
    pub nu: f64,
    pub theta: f64,
    pub radii: Vec<f64>,
    pub fits: Vec<CoefficientFit>,
    pub pass: bool,
}

/// y'(0) of the polynomial interpolant through (t_i, y_i).
fn interpolant_slope(t: &[f64], y: &[f64]) -> f64 {
    let n = t.len();
    // Vandermonde solve in the scaled variable u = t / max|t|
    let s = t.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    let mut a: Vec<Vec<f64>> = t
        .iter()
        .zip(y)
        .map(|(ti, yi)| {
            let u = ti / s;
            let mut row: Vec<f64> = (0..n).map(|p| u.powi(p as i32)).collect();
            row.push(*yi);
            row
        })
        .collect();
    for c in 0..n {
        let piv = (c..n)
            .max_by(|&p, &q| a[p][c].abs().total_cmp(&a[q][c].abs()))
            .expect("rows");
        a.swap(c, piv);
        for rr in 0..n {
            if rr != c {
                let f = a[rr][c] / a[c][c];
                for cc in c..=n {
                    a[rr][cc] -= f * a[c][cc];
                }
            }
        }
    }
    a[1][n] / a[1][1] / s
}

/// Fits the r-decay of the two terms of ψ − r, ∂_rψ − 1, ∂_θψ − rδ/ḡ, ∂_ϑψ + rδ/ḡ,
/// ρ̲/ϱ − 1 and η̲/ϱ − rδ/ḡ in δ = ϑ − θ.
///
/// Radial rays stay radial, so ∂_ϑψ vanishes on the diagonal and the δ-coefficients of
/// ψ − r and ∂_rψ − 1 are identically zero; they are reported as `None`.
pub fn check_eikonal_expansions(table: &EikonalTable, sweep: &ExpansionSweep) -> Result<ExpansionReport, PhaseError> {
    let dom = &table.domain;
    let nu = table.metric.nu;
    let theta = sweep.theta.unwrap_or(0.5 * (dom.angles.0 + dom.angles.1));
    let radii = geometric_grid(dom.r_min * 1.000001, dom.r_min * sweep.r_factor, sweep.n_r);
    let m = sweep.n_delta;
    let dmax = sweep.delta_fraction * dom.eps_sep;
    let deltas: Vec<f64> = (0..m)
        .map(|i| -dmax * (std::f64::consts::PI * (i as f64 + 0.5) / m as f64).cos())
        .collect();
    let gbar = table.metric.g_bar(theta);
    // ϱ at the top of the energy window exercises homogeneity in (ρ̲, η̲)
    let rho = dom.unit_rho() * dom.energies.1.sqrt();
    let flow = table.flow();
    let jobs: Vec<(usize, usize)> = (0..radii.len())
        .flat_map(|i| (0..m).map(move |k| (i, k)))
        .collect();
    let sols: Vec<(LagrangianPoint, LagrangianPoint)> = jobs
        .par_iter()
        .map(|&(i, k)| {
            let unit = invert_lagrangian(
                &flow,
                radii[i],
                theta,
                dom.unit_rho(),
                theta + deltas[k],
                None,
                &table.newton,
            )?;
            let scaled = invert_lagrangian(&flow, radii[i], theta, rho, theta + deltas[k], None, &table.newton)?;
            Ok((unit, scaled))
        })
        .collect::<Result<_, PhaseError>>()?;

    // (name, order of c1, order of c2, remainder builder)
    type Rem = fn(&LagrangianPoint, &LagrangianPoint, f64, f64, f64, f64, f64) -> f64;
    let quantities: [(&str, f64, f64, Rem); 6] = [
        ("psi - r", 1.0 - nu, 1.0, |u, _, r, _d, _g, _rho, _s| u.r_bar - r),
        ("dpsi_r - 1", -nu, 0.0, |u, _, _r, _d, _g, _rho, s| u.rho_under / s - 1.0),
        ("dpsi_theta - r*delta/gbar", 1.0 - nu, 1.0, |u, _, r, d, g, _rho, s| {
            u.eta_under / s - r * d / g
        }),
        ("dpsi_vartheta + r*delta/gbar", 1.0 - nu, 1.0, |u, _, r, d, g, _rho, s| {
            -u.eta_bar / s + r * d / g
        }),
        ("rho_under/rho - 1", -nu, 0.0, |_, v, _r, _d, _g, rho, _s| v.rho_under / rho - 1.0),
        ("eta_under/rho - r*delta/gbar", 1.0 - nu, 1.0, |_, v, r, d, g, rho, _s| {
            v.eta_under / rho - r * d / g
        }),
    ];
    let mut fits = Vec::new();
    for (name, o1, o2, rem) in quantities {
        let mut c1 = Vec::with_capacity(radii.len());
        let mut c2 = Vec::with_capacity(radii.len());
        for (i, &r) in radii.iter().enumerate() {
            let ys: Vec<f64> = (0..m)
                .map(|k| {
                    let (u, v) = &sols[i * m + k];
                    rem(u, v, r, deltas[k], gbar, rho, dom.unit_rho())
                })
                .collect();
            let a = interpolant_slope(&deltas, &ys);
            let ymax = ys.iter().fold(0.0f64, |m, y| m.max(y.abs()));
            // nodes near δ = 0 only carry cancellation noise in the quotient
            let rem = deltas
                .iter()
                .zip(&ys)
                .filter(|(d, _)| d.abs() >= 0.5 * dmax)
                .map(|(d, y)| (y - a * d).abs() / (d * d))
                .fold(0.0f64, f64::max);
            let tiny = sweep.zero_floor * ymax.max(f64::MIN_POSITIVE);
            c1.push(if (a * dmax).abs() <= tiny { 0.0 } else { a });
            c2.push(if rem * dmax * dmax <= tiny { 0.0 } else { rem });
        }
        for (power, order, cs) in [(1usize, o1, c1), (2, o2, c2)] {
            let fit = if cs.iter().all(|c| *c == 0.0) {
                None
            } else {
                power_law_fit(&radii, &cs).ok()
            };
            let pass = match &fit {
                None => true,
                Some(f) => (f.exponent - order).abs() <= sweep.order_tol,
            };
            fits.push(CoefficientFit {
                quantity: name.to_string(),
                power,
                expected_order: order,
                fit,
                pass,
            });
        }
    }
    let pass = fits.iter().all(|f| f.pass);
    Ok(ExpansionReport {
        nu,
        theta,
        radii,
        fits,
        pass,
    })
}

/// End point of a characteristic with the invariance check against a fresh inversion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CharacteristicPoint {
    pub s: f64,
    pub point: PhasePoint<f64>,
    /// max(|ρ̌ − ∂_rφ|/|ϱ|, |η̌ − ∂_θφ|/(ř|ϱ|)) at (ř, θ̌, ϱ, ϑ).
    pub invariance_residual: f64,
}

/// φ^s(r, θ, ∂_{r,θ}φ) for φ = ϱψ of the table.
pub fn characteristic(
    table: &EikonalTable,
    r: f64,
    theta: f64,
    rho: f64,
    vartheta: f64,
    s: f64,
) -> Result<CharacteristicPoint, PhaseError> {
    if !table.domain.contains(r, theta, vartheta) || rho * table.domain.unit_rho() <= 0.0 {
        return Err(PhaseError::OutsideTable { r, theta, vartheta });
    }
    if s * table.domain.unit_rho() < 0.0 {
        return Err(PhaseError::InvalidDomain("sign(s) must match the domain sign".into()));
    }
    let start = table.invert_at(r, theta, rho, vartheta)?;
    let flow = table.flow();
    let end = flow.integrate(&PhasePoint::new(r, theta, start.rho_under, start.eta_under), s)?;
    let r_top = *table.r.last().expect("grid");
    if end.r > r_top || !table.domain.contains(end.r, end.theta, vartheta) {
        return Err(PhaseError::LeftTable {
            s,
            r: end.r,
            theta: end.theta,
        });
    }
    let here = table.invert_at(end.r, end.theta, rho, vartheta)?;
    let res = ((end.rho - here.rho_under) / rho)
        .abs()
        .max(((end.eta - here.eta_under) / (rho * end.r)).abs());
    Ok(CharacteristicPoint {
        s,
        point: end,
        invariance_residual: res,
    })
}

/// Δφ for the model operator with ambient dimension `dim`:
/// ∂²_rφ + ((n−1)/r + w)∂_rφ + (G/r²)∂²_θφ + w_θ∂_θφ,
/// w = −(n−1)G_r/(2G), w_θ = G_θ/(2r²).
pub fn laplacian_of_phase(coeff: &[f64; 6], dim: usize, r: f64, xi: [f64; 2], m: [[f64; 2]; 2]) -> f64 {
    let (g, g_r, g_t) = (coeff[0], coeff[1], coeff[2]);
    let nm1 = dim as f64 - 1.0;
    let w = -nm1 * g_r / (2.0 * g);
    let wt = g_t / (2.0 * r * r);
    m[0][0] + (nm1 / r + w) * xi[0] + g / (r * r) * m[1][1] + wt * xi[1]
}

/// Replaces ∂_r∂_rφ and ∂_r∂_θφ by the values forced by differentiating p(x, ∂φ) = ϱ²
/// in r and θ, keeping ∂_θ∂_θφ.
///
/// A perturbation of ∂²_rφ alone changes the energy along the ray and is not damped by the
/// flow, so unprojected round-off in it integrates to an error in ∫b linear in the horizon.
pub fn project_hessian(coeff: &[f64; 6], r: f64, xi: [f64; 2], m: [[f64; 2]; 2]) -> [[f64; 2]; 2] {
    let (g, g_r, g_t) = (coeff[0], coeff[1], coeff[2]);
    let (rho, eta) = (xi[0], xi[1]);
    let r2 = r * r;
    let p_r = g_r * eta * eta / r2 - 2.0 * g * eta * eta / (r2 * r);
    let p_t = g_t * eta * eta / r2;
    let p_eta = 2.0 * g * eta / r2;
    let m_tt = m[1][1];
    let m_rt = -(p_t + p_eta * m_tt) / (2.0 * rho);
    let m_rr = -(p_r + p_eta * m_rt) / (2.0 * rho);
    [[m_rr, m_rt], [m_rt, m_tt]]
}

/// b = −Pφ = Δφ at (r, θ, ϱ, ϑ) from the pointwise inversion and its Hessian.
pub fn transport_b(table: &EikonalTable, r: f64, theta: f64, rho: f64, vartheta: f64, dim: usize) -> Result<f64, PhaseError> {
    let sol = table.invert_at(r, theta, rho, vartheta)?;
    let c = table.flow().coefficients(r, theta);
    let xi = [sol.rho_under, sol.eta_under];
    Ok(laplacian_of_phase(&c, dim, r, xi, project_hessian(&c, r, xi, sol.hessian)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TransportOptions {
    pub dim: usize,
    /// Tolerance of the ray integration and of the tail extrapolation.
    pub tol: f64,
    /// Doublings of the base horizon S₀ = 10 r/|ϱ|.
    pub doublings: usize,
    /// Increment ratio at or above which the tail is declared divergent.
    pub max_ratio: f64,
    /// Gauss–Legendre points per panel of the ray quadrature.
    pub panel_points: usize,
}

impl Default for TransportOptions {
    fn default() -> Self {
        Self {
            dim: 2,
            tol: 1e-11,
            doublings: 12,
            max_ratio: 0.9,
            panel_points: 10,
        }
    }
}

/// b at a point of the characteristic; the ray momenta seed the inversion, which then
/// only polishes them.
fn b_on_ray(table: &EikonalTable, pt: &PhasePoint<f64>, rho: f64, vartheta: f64, dim: usize) -> Result<f64, PhaseError> {
    let sol = invert_lagrangian(
        &table.flow(),
        pt.r,
        pt.theta,
        rho,
        vartheta,
        Some((pt.rho * rho.signum(), pt.eta * rho.signum())),
        &table.newton,
    )?;
    let c = table.flow().coefficients(pt.r, pt.theta);
    let xi = [sol.rho_under, sol.eta_under];
    Ok(laplacian_of_phase(&c, dim, pt.r, xi, project_hessian(&c, pt.r, xi, sol.hessian)))
}

/// Ray states at the given times (one sign, increasing modulus).
fn ray_states(table: &EikonalTable, start: &PhasePoint<f64>, times: &[f64], tol: f64) -> Result<Vec<PhasePoint<f64>>, PhaseError> {
    let flow = Flow::new(&table.metric).with_scale(table.eps_scale).with_tol(tol);
    let r_min = flow.r_min();
    let mut st = Dopri5::new(|_, y: &[f64; 4]| flow.vector_field(y), 0.0, start.to_array(), flow.ode_options());
    let mut out = Vec::with_capacity(times.len());
    for &s in times {
        if s != st.t() {
            st.advance_to(s, |t, y| if y[0] > r_min { Ok(()) } else { Err((t, y[0])) })
                .map_err(|e| match e {
                    AdvanceError::Ode(o) => PhaseError::Flow(FlowError::Ode(o)),
                    AdvanceError::Observer((t, r)) => PhaseError::Flow(FlowError::DomainExit { s: t, r, r_min }),
                })?;
        }
        out.push(PhasePoint::from_slice(st.y()));
    }
    Ok(out)
}

/// Gauss–Legendre nodes on [−1, 1] in increasing order with weights, and the matrix
/// W_ij = ∫_{−1}^{t_i} L_j of partial integrals of the Lagrange basis.
fn panel_rule(n: usize) -> (Vec<f64>, Vec<f64>, Vec<Vec<f64>>) {
    let gl = GaussLegendre::<f64>::new(n);
    let mut nw: Vec<(f64, f64)> = gl.mapped(-1.0, 1.0).collect();
    nw.sort_by(|a, b| a.0.total_cmp(&b.0));
    let t: Vec<f64> = nw.iter().map(|x| x.0).collect();
    let w: Vec<f64> = nw.iter().map(|x| x.1).collect();
    let partial = t
        .iter()
        .map(|&ti| {
            let mut row = vec![0.0; n];
            for (x, wx) in gl.mapped(-1.0, ti) {
                for (j, l) in lagrange_weights(&t, x).into_iter().enumerate() {
                    row[j] += wx * l;
                }
            }
            row
        })
        .collect();
    (t, w, partial)
}

/// Limit of a sequence sampled on doubling horizons by Aitken Δ² on the last three values.
/// Returns the limit and an error estimate, or the offending increment ratio.
pub fn aitken_tail(values: &[f64], tol: f64, max_ratio: f64) -> Result<(f64, f64), f64> {
    assert!(values.len() >= 3, "need three samples");
    let d: Vec<f64> = values.windows(2).map(|w| w[1] - w[0]).collect();
    let last = *values.last().expect("samples");
    let dl = d[d.len() - 1];
    if dl.abs() <= 1e3 * tol * (1.0 + last.abs()) {
        return Ok((last, dl.abs()));
    }
    let aitken = |k: usize| -> Result<f64, f64> {
        let (d0, d1) = (d[k - 1], d[k]);
        let q = if d0 == 0.0 { 0.0 } else { d1 / d0 };
        if !(q.abs() < max_ratio) {
            return Err(q);
        }
        Ok(values[k + 1] + d1 * q / (1.0 - q))
    };
    let k = d.len() - 1;
    let lim = aitken(k)?;
    let err = if k >= 2 {
        aitken(k - 1).map_or(dl.abs(), |p| (lim - p).abs())
    } else {
        dl.abs()
    };
    Ok((lim, err))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransportSolution {
    /// C exp(∫b) − ∫ f exp(∫₀^s b) ds over s ∈ (0, ±∞).
    pub value: f64,
    pub b_integral: f64,
    pub source_integral: f64,
    pub error: f64,
    pub horizons: Vec<f64>,
}

/// Solves the transport equation along the characteristic of (r, θ, ϱ, ϑ) with boundary
/// value `c` at infinity and optional source f(r, θ).
///
/// ∫b and ∫f e^B are computed by Gauss–Legendre panels on a geometric partition of the
/// ray; their values on the horizon ladder S₀2^k are extrapolated by Aitken Δ².
#[allow(clippy::too_many_arguments)]
pub fn solve_transport(
    table: &EikonalTable,
    r: f64,
    theta: f64,
    rho: f64,
    vartheta: f64,
    c: f64,
    source: Option<&(dyn Fn(f64, f64) -> f64 + Sync)>,
    opts: &TransportOptions,
) -> Result<TransportSolution, PhaseError> {
    let start = table.invert_at(r, theta, rho, vartheta)?;
    let sign = table.domain.unit_rho();
    let s0 = 10.0 * r / rho.abs();
    const FINE: i32 = 6;
    let mut breaks = vec![0.0];
    breaks.extend((-FINE..=opts.doublings as i32).map(|k| sign * s0 * 2f64.powi(k)));
    let (t, w, partial) = panel_rule(opts.panel_points);
    let mut times = Vec::with_capacity((breaks.len() - 1) * t.len());
    for pnl in breaks.windows(2) {
        let (mid, half) = (0.5 * (pnl[0] + pnl[1]), 0.5 * (pnl[1] - pnl[0]));
        times.extend(t.iter().map(|x| mid + half * x));
    }
    let x0 = PhasePoint::new(r, theta, start.rho_under, start.eta_under);
    let states = ray_states(table, &x0, &times, opts.tol)?;
    let bs: Vec<f64> = states
        .par_iter()
        .map(|pt| b_on_ray(table, pt, rho, vartheta, opts.dim))
        .collect::<Result<_, _>>()?;
    let n = t.len();
    let (mut b_acc, mut f_acc) = (0.0, 0.0);
    let mut b_ladder = Vec::new();
    let mut f_ladder = Vec::new();
    for (k, pnl) in breaks.windows(2).enumerate() {
        let half = 0.5 * (pnl[1] - pnl[0]);
        let bp = &bs[k * n..(k + 1) * n];
        if let Some(f) = source {
            for i in 0..n {
                let bi = b_acc + half * partial[i].iter().zip(bp).map(|(a, b)| a * b).sum::<f64>();
                let pt = &states[k * n + i];
                f_acc += half * w[i] * f(pt.r, pt.theta) * bi.exp();
            }
        }
        b_acc += half * w.iter().zip(bp).map(|(a, b)| a * b).sum::<f64>();
        if k as i32 >= FINE {
            b_ladder.push(b_acc);
            f_ladder.push(f_acc);
        }
    }
    let horizons: Vec<f64> = breaks[FINE as usize + 1..].to_vec();
    let tail = |v: &[f64]| {
        aitken_tail(v, opts.tol, opts.max_ratio).map_err(|q| PhaseError::NonConvergentTail {
            ratio: q,
            horizons: horizons.clone(),
            values: v.to_vec(),
        })
    };
    let (b_inf, eb) = tail(&b_ladder)?;
    let (f_inf, ef) = if source.is_some() { tail(&f_ladder)? } else { (0.0, 0.0) };
    Ok(TransportSolution {
        value: c * b_inf.exp() - f_inf,
        b_integral: b_inf,
        source_integral: f_inf,
        error: (c * b_inf.exp()).abs() * eb + ef,
        horizons,
    })
}

/// (s, ř^s, b(ř^s, θ̌^s)) along the characteristic at the requested times (one sign,
/// increasing modulus).
pub fn b_along_characteristic(
    table: &EikonalTable,
    r: f64,
    theta: f64,
    rho: f64,
    vartheta: f64,
    times: &[f64],
    opts: &TransportOptions,
) -> Result<Vec<(f64, f64, f64)>, PhaseError> {
    let start = table.invert_at(r, theta, rho, vartheta)?;
    let x0 = PhasePoint::new(r, theta, start.rho_under, start.eta_under);
    let states = ray_states(table, &x0, times, opts.tol)?;
    times
        .par_iter()
        .zip(&states)
        .map(|(&s, pt)| Ok((s, pt.r, b_on_ray(table, pt, rho, vartheta, opts.dim)?)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransportDecayReport {
    pub dim: usize,
    pub nu: f64,
    /// |b| against ⟨s/r⟩ along an oblique characteristic, large s/r.
    pub s_fit: DecayFit<f64>,
    pub expected_s_order: f64,
    /// |b| at s = 0 against r on the diagonal ϑ = θ and off it.
    pub r_fit_diagonal: Option<DecayFit<f64>>,
    pub r_fit_oblique: DecayFit<f64>,
    pub expected_r_order: f64,
    pub tol: f64,
    pub pass: bool,
}

/// Fits the decay of b against the bound C⟨s/r⟩^{−1−ν}r^{−1−ν} + C⟨s/r⟩^{−2}r^{−1}.
///
/// A vanishing diagonal b (e.g. θ-independent coefficients in n = 2) is reported as `None`.
pub fn transport_decay_fit(table: &EikonalTable, dim: usize, tol: f64) -> Result<TransportDecayReport, PhaseError> {
    let dom = &table.domain;
    let nu = table.metric.nu;
    let theta = 0.5 * (dom.angles.0 + dom.angles.1);
    let rho = dom.unit_rho();
    let delta = 0.5 * dom.eps_sep;
    let opts = TransportOptions {
        dim,
        ..TransportOptions::default()
    };
    let r0 = 2.0 * dom.r_min;
    let us = geometric_grid(10.0, 1e3, 16);
    let times: Vec<f64> = us.iter().map(|u| rho * u * r0).collect();
    let along = b_along_characteristic(table, r0, theta, rho, theta + delta, &times, &opts)?;
    let bs: Vec<f64> = along.iter().map(|x| x.2).collect();
    let brackets: Vec<f64> = us.iter().map(|u| (1.0 + u * u).sqrt()).collect();
    let s_fit = power_law_fit(&brackets, &bs).map_err(|e| PhaseError::InvalidGrid(format!("s-fit: {e}")))?;

    let radii = geometric_grid(dom.r_min * 1.000001, dom.r_min * 100.0, 12);
    let b_at = |d: f64| -> Result<Vec<f64>, PhaseError> {
        radii
            .par_iter()
            .map(|&r| transport_b(table, r, theta, rho, theta + d, dim))
            .collect()
    };
    let b_diag = b_at(0.0)?;
    let b_obl = b_at(delta)?;
    let floor = 1e-12;
    let r_fit_diagonal = if b_diag.iter().all(|b| b.abs() <= floor) {
        None
    } else {
        power_law_fit(&radii, &b_diag).ok()
    };
    let r_fit_oblique = power_law_fit(&radii, &b_obl).map_err(|e| PhaseError::InvalidGrid(format!("r-fit: {e}")))?;
    let expected_s_order = -(1.0 + nu).min(2.0);
    let expected_r_order = -1.0 - nu;
    let near = |f: &DecayFit<f64>, o: f64| (f.exponent - o).abs() <= tol;
    let pass = near(&s_fit, expected_s_order)
        && r_fit_diagonal.as_ref().map_or(true, |f| near(f, expected_r_order))
        && near(&r_fit_oblique, expected_r_order);
    Ok(TransportDecayReport {
        dim,
        nu,
        s_fit,
        expected_s_order,
        r_fit_diagonal,
        r_fit_oblique,
        expected_r_order,
        tol,
        pass,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WkbGrid {
    /// Ω_{ε,R} = (R, 2R) × (θ_lo, θ_hi).
    pub theta: (f64, f64),
    pub n_r: usize,
    pub n_theta: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WkbTable {
    pub s: f64,
    pub radius: f64,
    pub momenta: (f64, f64),
    pub r: Vec<f64>,
    pub theta: Vec<f64>,
    /// φ(s, r_i, θ_j), row-major in (i, j).
    pub phi: Vec<f64>,
    /// |φ(s) − φ(0) + s p| at the nodes.
    pub residual: Vec<f64>,
    pub max_residual: f64,
    /// max residual · R / s² (0 at s = 0).
    pub constant: f64,
    /// Smallest det ∂x(s)/∂x₀ met at the nodes.
    pub min_det: f64,
}

/// Finite-time phase with φ(0) = rρ + θη by the method of characteristics:
/// φ(s, x) = φ(0, x₀) + s p(x₀, ξ₀) where x = π φ^s(x₀, ξ₀).
#[allow(clippy::too_many_arguments)]
pub fn wkb_phase(
    metric: &ChartMetric2D<f64>,
    eps_scale: f64,
    radius: f64,
    s: f64,
    grid: &WkbGrid,
    momenta: (f64, f64),
    tol: f64,
) -> Result<WkbTable, PhaseError> {
    if !(radius > eps_scale * metric.r_m) {
        return Err(PhaseError::InvalidDomain(format!("R = {radius} inside the chart radius")));
    }
    if grid.n_r < 2 || grid.n_theta < 2 || !(grid.theta.0 < grid.theta.1) {
        return Err(PhaseError::InvalidGrid("wkb grid needs 2 × 2 nodes and θ_lo < θ_hi".into()));
    }
    let flow = Flow::new(metric).with_scale(eps_scale).with_tol(tol);
    let r = uniform_grid(radius, 2.0 * radius, grid.n_r);
    let theta = uniform_grid(grid.theta.0, grid.theta.1, grid.n_theta);
    let (rho, eta) = momenta;
    let nodes: Vec<(f64, f64)> = r.iter().flat_map(|&a| theta.iter().map(move |&b| (a, b))).collect();
    let solved: Vec<(f64, f64, f64)> = nodes
        .par_iter()
        .map(|&(x_r, x_t)| {
            let fail = |reason: String| PhaseError::CharacteristicInversion {
                r: x_r,
                theta: x_t,
                reason,
            };
            let p_here = flow.symbol(&PhasePoint::new(x_r, x_t, rho, eta));
            let phi0 = x_r * rho + x_t * eta;
            if s == 0.0 {
                return Ok((phi0, 0.0, 1.0));
            }
            let c = flow.coefficients(x_r, x_t);
            let mut x0 = (x_r - 2.0 * s * rho, x_t - 2.0 * s * c[0] * eta / (x_r * x_r));
            let mut det = f64::NAN;
            let mut converged = false;
            for _ in 0..50 {
                if !(x0.0 > flow.r_min()) {
                    return Err(fail(format!("foot point r₀ = {} left the chart", x0.0)));
                }
                let (end, j) = flow.integrate_with_jacobian(&PhasePoint::new(x0.0, x0.1, rho, eta), s)?;
                let a = [[j[0][0], j[0][1]], [j[1][0], j[1][1]]];
                det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
                if !(det > 0.0) {
                    return Err(fail(format!("det ∂x/∂x₀ = {det} (s beyond the diffeomorphism time)")));
                }
                let inv = inv2(a).ok_or_else(|| fail("singular position map".into()))?;
                let res = [end.r - x_r, end.theta - x_t];
                let step = [
                    inv[0][0] * res[0] + inv[0][1] * res[1],
                    inv[1][0] * res[0] + inv[1][1] * res[1],
                ];
                x0 = (x0.0 - step[0], x0.1 - step[1]);
                if step[0].abs() <= 1e-13 * x_r && step[1].abs() <= 1e-13 {
                    converged = true;
                    break;
                }
            }
            if !converged {
                return Err(fail("Newton on the position map did not converge".into()));
            }
            let p0 = flow.symbol(&PhasePoint::new(x0.0, x0.1, rho, eta));
            let phi = x0.0 * rho + x0.1 * eta + s * p0;
            Ok((phi, (phi - phi0 + s * p_here).abs(), det))
        })
        .collect::<Result<_, PhaseError>>()?;
    let max_residual = solved.iter().map(|x| x.1).fold(0.0, f64::max);
    let min_det = solved.iter().map(|x| x.2).fold(f64::INFINITY, f64::min);
    Ok(WkbTable {
        s,
        radius,
        momenta,
        r,
        theta,
        phi: solved.iter().map(|x| x.0).collect(),
        residual: solved.iter().map(|x| x.1).collect(),
        max_residual,
        constant: if s == 0.0 { 0.0 } else { max_residual * radius / (s * s) },
        min_det,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat_domain(sign: Direction) -> ThetaDomain {
        ThetaDomain::new(10.0, (-0.3, 0.3), 0.1, (0.25, 4.0), sign).unwrap()
    }

    fn small_grid() -> GridSpec {
        GridSpec {
            r_max: 40.0,
            n_r: 8,
            n_theta: 5,
            n_delta: 6,
        }
    }

    #[test]
    fn inversion_matches_straight_lines() {
        let m: ChartMetric2D<f64> = ChartMetric2D::flat();
        let flow = Flow::new(&m);
        let o = NewtonOptions::default();
        let sol = invert_lagrangian(&flow, 10.0, 0.0, 1.0, 0.1, None, &o).unwrap();
        assert!((sol.rho_under - 0.1f64.cos()).abs() < 1e-9);
        assert!((sol.eta_under - 10.0 * 0.1f64.sin()).abs() < 1e-8);
        assert!((sol.r_bar - 10.0 * 0.1f64.cos()).abs() < 1e-8);
        let diag = invert_lagrangian(&flow, 10.0, 0.2, 1.0, 0.2, None, &o).unwrap();
        assert!((diag.rho_under - 1.0).abs() < 1e-12 && diag.eta_under.abs() < 1e-12);
        // ψ = r cos δ: Hessian in (r, θ) is [[0, sin δ], [sin δ, −r cos δ]]
        let h = sol.hessian;
        assert!(h[0][0].abs() < 1e-7);
        assert!((h[0][1] - 0.1f64.sin()).abs() < 1e-7);
        assert!((h[1][1] + 10.0 * 0.1f64.cos()).abs() < 1e-6);
    }

    #[test]
    fn incoming_branch_by_reversal() {
        let m: ChartMetric2D<f64> = ChartMetric2D::power_modulated(0.3, 1.0, 2.0, 0.5).unwrap();
        let flow = Flow::new(&m);
        let o = NewtonOptions::default();
        let plus = invert_lagrangian(&flow, 12.0, 0.1, 1.5, 0.15, None, &o).unwrap();
        let minus = invert_lagrangian(&flow, 12.0, 0.1, -1.5, 0.15, None, &o).unwrap();
        assert_eq!(minus.rho_under, -plus.rho_under);
        let d = flow
            .scattering_map(&PhasePoint::new(12.0, 0.1, minus.rho_under, minus.eta_under), Direction::Incoming)
            .unwrap();
        assert!((d.rho_bar + 1.5).abs() < 1e-8);
        assert!((d.theta_bar - 0.15).abs() < 1e-8);
        assert!((d.r_bar - minus.r_bar).abs() < 1e-6);
    }

    #[test]
    fn flat_table_is_r_cos_delta() {
        let m: ChartMetric2D<f64> = ChartMetric2D::flat();
        let t = build_eikonal(&m, 1.0, &flat_domain(Direction::Outgoing), &small_grid(), &EikonalOptions::default())
            .unwrap();
        let mut err = 0.0f64;
        for (n, (r, th, vt)) in t.nodes().enumerate() {
            err = err.max((t.psi[n] - r * (th - vt).cos()).abs());
        }
        assert!(err < 1e-8, "max error {err}");
        assert!(t.diagnostics.hj_residual < 1e-9);
        assert!(t.diagnostics.max_circulation < 1e-8);
        let v = t.eval(10.0, 0.0, 0.05).unwrap();
        assert!((v.psi - 10.0 * 0.05f64.cos()).abs() < 1e-6);
        assert!(t.sign_coherence().pass);
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), t.len() + 1);
        assert!(text.starts_with("r,theta,vartheta,psi,dpsi_r,dpsi_theta,dpsi_vartheta"));
    }

    #[test]
    fn incoming_table_has_same_psi() {
        let m: ChartMetric2D<f64> = ChartMetric2D::power(0.3, 1.0, 2.0).unwrap();
        let g = small_grid();
        let o = EikonalOptions::default();
        let p = build_eikonal(&m, 1.0, &flat_domain(Direction::Outgoing), &g, &o).unwrap();
        let q = build_eikonal(&m, 1.0, &flat_domain(Direction::Incoming), &g, &o).unwrap();
        for n in 0..p.len() {
            assert!((p.psi[n] - q.psi[n]).abs() < 1e-9);
        }
    }

    #[test]
    fn perturbed_table_satisfies_identity() {
        let m: ChartMetric2D<f64> = ChartMetric2D::power_modulated(0.3, 1.0, 2.0, 0.5).unwrap();
        let t = build_eikonal(&m, 1.0, &flat_domain(Direction::Outgoing), &small_grid(), &EikonalOptions::default())
            .unwrap();
        assert!(t.diagnostics.hj_residual < 1e-8, "{:?}", t.diagnostics);
        assert!(t.diagnostics.identity_residual < 1e-5, "{:?}", t.diagnostics);
    }

    #[test]
    fn characteristic_invariance() {
        let m: ChartMetric2D<f64> = ChartMetric2D::power_modulated(0.3, 1.0, 2.0, 0.5).unwrap();
        let t = build_eikonal(&m, 1.0, &flat_domain(Direction::Outgoing), &small_grid(), &EikonalOptions::default())
            .unwrap();
        let c = characteristic(&t, 12.0, 0.0, 1.0, 0.05, 5.0).unwrap();
        assert!(c.invariance_residual < 1e-6, "{}", c.invariance_residual);
        let flat: ChartMetric2D<f64> = ChartMetric2D::flat();
        let tf = build_eikonal(&flat, 1.0, &flat_domain(Direction::Outgoing), &small_grid(), &EikonalOptions::default())
            .unwrap();
        let c = characteristic(&tf, 12.0, 0.1, 1.0, 0.1, 5.0).unwrap();
        assert!((c.point.r - 22.0).abs() < 1e-9 && (c.point.theta - 0.1).abs() < 1e-12);
        assert!(matches!(
            characteristic(&tf, 12.0, 0.1, 1.0, 0.1, 50.0),
            Err(PhaseError::LeftTable { .. })
        ));
    }

    #[test]
    fn flat_b_oracles() {
        let m: ChartMetric2D<f64> = ChartMetric2D::flat();
        let t = build_eikonal(&m, 1.0, &flat_domain(Direction::Outgoing), &small_grid(), &EikonalOptions::default())
            .unwrap();
        for &(r, th, vt) in &[(12.0, 0.0, 0.05), (20.0, 0.2, 0.13), (30.0, -0.1, -0.18)] {
            let b2 = transport_b(&t, r, th, 1.0, vt, 2).unwrap();
            assert!(b2.abs() < 1e-8, "n = 2: {b2}");
            let b3 = transport_b(&t, r, th, 1.0, vt, 3).unwrap();
            assert!((b3 - (th - vt).cos() / r).abs() < 1e-8, "n = 3: {b3}");
        }
    }

    #[test]
    fn transport_flat_oracles() {
        let m: ChartMetric2D<f64> = ChartMetric2D::flat();
        let t = build_eikonal(&m, 1.0, &flat_domain(Direction::Outgoing), &small_grid(), &EikonalOptions::default())
            .unwrap();
        let o2 = TransportOptions::default();
        let a = solve_transport(&t, 15.0, 0.1, 1.0, 0.15, 1.0, None, &o2).unwrap();
        assert!((a.value - 1.0).abs() < 1e-8);
        // n = 3 radial ray: ∫₀^S b = ½ log((r + 2S)/r) diverges
        let o3 = TransportOptions { dim: 3, ..o2 };
        match solve_transport(&t, 15.0, 0.1, 1.0, 0.1, 1.0, None, &o3) {
            Err(PhaseError::NonConvergentTail { horizons, values, .. }) => {
                for (s, b) in horizons.iter().zip(&values) {
                    let exact = ((15.0 + 2.0 * s) / 15.0f64).sqrt();
                    assert!((b.exp() / exact - 1.0).abs() < 1e-8);
                }
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn short_range_source_gives_s_minus_half() {
        let m: ChartMetric2D<f64> = ChartMetric2D::flat();
        let dom = ThetaDomain::new(10.0, (-0.3, 0.3), 0.1, (0.25, 4.0), Direction::Outgoing).unwrap();
        let t = build_eikonal(&m, 1.0, &dom, &small_grid(), &EikonalOptions::default()).unwrap();
        let f = |r: f64, _t: f64| (1.0 + r * r).powf(-0.75);
        let o = TransportOptions::default();
        let radii = [12.0, 24.0, 48.0, 96.0, 192.0, 384.0];
        let vals: Vec<f64> = radii
            .iter()
            .map(|&r| solve_transport(&t, r, 0.0, 1.0, 0.0, 0.0, Some(&f), &o).unwrap().value)
            .collect();
        // radial ray: −∫₀^∞ (1 + (r + 2s)²)^{−3/4} ds
        for (r, v) in radii.iter().zip(&vals) {
            // x = r/t² turns ½∫_r^∞ (1 + x²)^{−3/4} dx into a smooth integral over (0, 1]
            let exact = -crate::numerics::quadrature::adaptive_gk15(0.0, 1.0, 1e-14, 1e-13, 200, |u: f64| {
                r * (u.powi(4) + r * r).powf(-0.75)
            })
            .0;
            assert!((v / exact - 1.0).abs() < 1e-6, "r = {r}: {v} vs {exact}");
        }
        let fit = power_law_fit(&radii, &vals).unwrap();
        assert!((fit.exponent + 0.5).abs() < 0.05, "{}", fit.exponent);
    }

    #[test]
    fn aitken_handles_geometric_tails() {
        let v: Vec<f64> = (0..8).map(|k| 3.0 - 0.5f64.powi(k)).collect();
        let (l, _) = aitken_tail(&v, 1e-12, 0.9).unwrap();
        assert!((l - 3.0).abs() < 1e-12);
        let logs: Vec<f64> = (0..8).map(|k| k as f64).collect();
        assert!(aitken_tail(&logs, 1e-12, 0.9).is_err());
    }

    #[test]
    fn wkb_initial_and_quadratic_residual() {
        let m: ChartMetric2D<f64> = ChartMetric2D::flat();
        let g = WkbGrid {
            theta: (-0.2, 0.2),
            n_r: 4,
            n_theta: 4,
        };
        let w0 = wkb_phase(&m, 1.0, 32.0, 0.0, &g, (1.0, 3.0), 1e-12).unwrap();
        for (n, (r, t)) in w0.r.iter().flat_map(|&r| w0.theta.iter().map(move |&t| (r, t))).enumerate() {
            assert_eq!(w0.phi[n], r * 1.0 + t * 3.0);
        }
        let ss = [0.25, 0.5, 1.0, 2.0];
        let res: Vec<f64> = ss
            .iter()
            .map(|&s| wkb_phase(&m, 1.0, 64.0, s, &g, (1.0, 3.0), 1e-12).unwrap().max_residual)
            .collect();
        let fit = power_law_fit(&ss, &res).unwrap();
        assert!((fit.exponent - 2.0).abs() < 0.1, "{}", fit.exponent);
        let back: Vec<f64> = ss
            .iter()
            .map(|&s| wkb_phase(&m, 1.0, 64.0, -s, &g, (1.0, 3.0), 1e-12).unwrap().constant)
            .collect();
        assert!(back.iter().all(|c| c.is_finite() && *c < 10.0), "{back:?}");
    }
}

//! Radial mode operators of the warped metric in the Liouville gauge, functional calculus by
//! eigendecomposition, dyadic Littlewood–Paley bands and resolvent/smoothing/Sobolev probes.

use std::f64::consts::PI;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geometry::{modified_bracket, WarpedMetric};
use crate::numerics::{rng, GaussLegendre, SpectrumWindow, SymTridiag, TridiagEigen};
use crate::C64;

#[derive(Debug, Error)]
pub enum SpectralError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("angular reconstruction supports n = 2 and n = 3, got n = {0}")]
    UnsupportedDimension(usize),
    #[error("ℓ_max = {ell_max} exceeds the angular quadrature exactness (at most {max})")]
    AngularResolution { ell_max: usize, max: usize },
    #[error("mode ℓ = {ell} has a windowed spectrum (λ ≤ {lambda_max}); the function is not defined above it")]
    IncompleteSpectrum { ell: usize, lambda_max: f64 },
    #[error("λ = {lambda} outside the valid window [{lo}, {hi}]")]
    OutsideWindow { lambda: f64, lo: f64, hi: f64 },
    #[error("light cone reaches r = {reach:.3}, beyond 0.8·R_max = {limit:.3}")]
    LightCone { reach: f64, limit: f64 },
    #[error("state and operator family disagree: {0}")]
    Mismatch(String),
    #[error("operator cache: {0}")]
    Cache(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// V_ℓ = ℓ(ℓ+n−2)/f² + ((n−1)/2) f″/f + ((n−1)(n−3)/4)(f′/f)².
pub fn liouville_potential(metric: &WarpedMetric<f64>, ell: usize, r: f64) -> f64 {
    let f = metric.warp(r);
    let n = metric.n as f64;
    let l = ell as f64;
    let q = f.d1 / f.v;
    l * (l + n - 2.0) / (f.v * f.v) + 0.5 * (n - 1.0) * f.d2 / f.v + 0.25 * (n - 1.0) * (n - 3.0) * q * q
}

fn check_grid(r_max: f64, dr: f64) -> Result<usize, SpectralError> {
    if !(dr > 0.0 && r_max > 4.0 * dr) {
        return Err(SpectralError::InvalidGrid(format!("R_max = {r_max}, Δr = {dr}")));
    }
    let steps = (r_max / dr).round();
    if ((steps * dr - r_max) / r_max).abs() > 1e-9 {
        return Err(SpectralError::InvalidGrid(format!("Δr = {dr} does not divide R_max = {r_max}")));
    }
    if steps > 20000.0 {
        return Err(SpectralError::InvalidGrid(format!("R_max/Δr = {steps} exceeds 20000")));
    }
    Ok(steps as usize)
}

/// −∂_r² + V_ℓ on the interior nodes r_i = iΔr, Dirichlet at 0 and R_max.
#[derive(Debug, Clone)]
pub struct RadialModeOperator {
    pub metric: WarpedMetric<f64>,
    pub ell: usize,
    pub r_max: f64,
    pub dr: f64,
    pub r: Vec<f64>,
    pub potential: Vec<f64>,
    pub matrix: SymTridiag<f64>,
    pub eigen: TridiagEigen<f64>,
    /// Upper end of a windowed spectrum.
    pub lambda_max: Option<f64>,
}

pub fn build_mode_operator(
    metric: &WarpedMetric<f64>,
    ell: usize,
    r_max: f64,
    dr: f64,
) -> Result<RadialModeOperator, SpectralError> {
    build_impl(metric, ell, r_max, dr, None)
}

/// Same operator with only the eigenpairs λ ≤ `lambda_max`.
pub fn build_mode_operator_windowed(
    metric: &WarpedMetric<f64>,
    ell: usize,
    r_max: f64,
    dr: f64,
    lambda_max: f64,
) -> Result<RadialModeOperator, SpectralError> {
    build_impl(metric, ell, r_max, dr, Some(lambda_max))
}

fn mode_matrix(
    metric: &WarpedMetric<f64>,
    ell: usize,
    r_max: f64,
    dr: f64,
) -> Result<(Vec<f64>, Vec<f64>, SymTridiag<f64>), SpectralError> {
    let steps = check_grid(r_max, dr)?;
    let r: Vec<f64> = (1..steps).map(|i| i as f64 * dr).collect();
    let potential: Vec<f64> = r.iter().map(|&x| liouville_potential(metric, ell, x)).collect();
    if let Some(bad) = potential.iter().position(|v| !v.is_finite()) {
        return Err(SpectralError::InvalidGrid(format!("V_ℓ not finite at r = {}", r[bad])));
    }
    let h2 = 1.0 / (dr * dr);
    let matrix = SymTridiag::new(
        potential.iter().map(|v| 2.0 * h2 + v).collect(),
        vec![-h2; r.len() - 1],
    );
    Ok((r, potential, matrix))
}

fn build_impl(
    metric: &WarpedMetric<f64>,
    ell: usize,
    r_max: f64,
    dr: f64,
    lambda_max: Option<f64>,
) -> Result<RadialModeOperator, SpectralError> {
    let (r, potential, matrix) = mode_matrix(metric, ell, r_max, dr)?;
    let window = lambda_max.map_or(SpectrumWindow::All, SpectrumWindow::AtMost);
    let eigen = matrix.eigen(window);
    Ok(RadialModeOperator {
        metric: *metric,
        ell,
        r_max,
        dr,
        r,
        potential,
        lambda_max: if eigen.complete { None } else { lambda_max },
        matrix,
        eigen,
    })
}

impl RadialModeOperator {
    pub fn len(&self) -> usize {
        self.r.len()
    }

    pub fn is_empty(&self) -> bool {
        self.r.is_empty()
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigen.values
    }

    pub fn is_complete(&self) -> bool {
        self.eigen.complete
    }

    /// P v for a complex mode vector.
    pub fn apply_matrix(&self, v: &[C64]) -> Vec<C64> {
        let a = &self.matrix;
        let n = v.len();
        (0..n)
            .map(|i| {
                let mut s = v[i] * a.diag[i];
                if i > 0 {
                    s += v[i - 1] * a.off[i - 1];
                }
                if i + 1 < n {
                    s += v[i + 1] * a.off[i];
                }
                s
            })
            .collect()
    }

    /// ⟨e_k, v⟩ for the computed eigenvectors.
    pub fn coefficients(&self, v: &[C64]) -> Vec<C64> {
        (0..self.eigen.len())
            .map(|k| {
                self.eigen
                    .vector(k)
                    .iter()
                    .zip(v)
                    .fold(C64::new(0.0, 0.0), |acc, (e, x)| acc + x * e)
            })
            .collect()
    }

    /// Σ c_k e_k.
    pub fn synthesize(&self, c: &[C64]) -> Vec<C64> {
        let mut out = vec![C64::new(0.0, 0.0); self.len()];
        for (k, ck) in c.iter().enumerate() {
            if ck.re == 0.0 && ck.im == 0.0 {
                continue;
            }
            for (o, e) in out.iter_mut().zip(self.eigen.vector(k)) {
                *o += ck * e;
            }
        }
        out
    }

    /// `coefficients` for many vectors at once (one dgemm).
    pub fn coefficients_batch(&self, vs: &[Vec<C64>]) -> Vec<Vec<C64>> {
        let (k, n, m) = (self.eigen.len(), self.len(), vs.len());
        if m == 0 || k == 0 {
            return vec![Vec::new(); m];
        }
        // X: n × 2m, column 2j = Re v_j, 2j+1 = Im v_j
        let mut x = vec![0.0; n * 2 * m];
        for (j, v) in vs.iter().enumerate() {
            for (i, z) in v.iter().enumerate() {
                x[i * 2 * m + 2 * j] = z.re;
                x[i * 2 * m + 2 * j + 1] = z.im;
            }
        }
        let mut c = vec![0.0; k * 2 * m];
        unsafe {
            matrixmultiply::dgemm(
                k,
                n,
                2 * m,
                1.0,
                self.eigen.vectors.as_ptr(),
                n as isize,
                1,
                x.as_ptr(),
                2 * m as isize,
                1,
                0.0,
                c.as_mut_ptr(),
                2 * m as isize,
                1,
            );
        }
        (0..m)
            .map(|j| (0..k).map(|i| C64::new(c[i * 2 * m + 2 * j], c[i * 2 * m + 2 * j + 1])).collect())
            .collect()
    }

    /// ∫₀^T Σ_i w_i|(e^{−itP}v)_i|² dt for each horizon T, exactly in t, from the coefficients `c`
    /// of v. Uses the Gram matrix Eᵀdiag(w)E over the significant coefficient range.
    pub fn local_energy_integrals(&self, c: &[C64], w: &[f64], horizons: &[f64]) -> Vec<f64> {
        let n = self.len();
        let (lo, hi) = significant_range(c);
        let k = hi - lo;
        if k == 0 {
            return vec![0.0; horizons.len()];
        }
        let vecs = &self.eigen.vectors[lo * n..hi * n];
        let scaled: Vec<f64> = vecs.chunks(n).flat_map(|e| e.iter().zip(w).map(|(a, b)| a * b)).collect();
        let mut gram = vec![0.0; k * k];
        unsafe {
            matrixmultiply::dgemm(
                k,
                n,
                k,
                1.0,
                vecs.as_ptr(),
                n as isize,
                1,
                scaled.as_ptr(),
                1,
                n as isize,
                0.0,
                gram.as_mut_ptr(),
                k as isize,
                1,
            );
        }
        let c = &c[lo..hi];
        let lam = &self.eigen.values[lo..hi];
        horizons
            .iter()
            .map(|&t| {
                let mut total = 0.0;
                for p in 0..k {
                    total += c[p].norm_sqr() * gram[p * k + p] * t;
                    for q in p + 1..k {
                        // ∫₀^T e^{−itΔ} dt
                        let x = t * (lam[q] - lam[p]);
                        let phi = if x.abs() < 1e-8 {
                            C64::new(t, 0.0)
                        } else {
                            C64::new(x.sin() / x, -2.0 * (0.5 * x).sin().powi(2) / x) * t
                        };
                        total += 2.0 * (c[p].conj() * c[q] * phi).re * gram[p * k + q];
                    }
                }
                total
            })
            .collect()
    }

    /// `synthesize` for many coefficient vectors at once (one dgemm).
    pub fn synthesize_batch(&self, cs: &[Vec<C64>]) -> Vec<Vec<C64>> {
        self.synthesize_batch_from(0, cs)
    }

    /// Batch synthesis from eigenvectors `first..first + cs[j].len()`.
    pub fn synthesize_batch_from(&self, first: usize, cs: &[Vec<C64>]) -> Vec<Vec<C64>> {
        let (n, m) = (self.len(), cs.len());
        if m == 0 {
            return Vec::new();
        }
        let k = cs[0].len();
        assert!(first + k <= self.eigen.len() && cs.iter().all(|c| c.len() == k));
        if k == 0 {
            return vec![vec![C64::new(0.0, 0.0); n]; m];
        }
        let mut c = vec![0.0; k * 2 * m];
        for (j, v) in cs.iter().enumerate() {
            for (i, z) in v.iter().enumerate() {
                c[i * 2 * m + 2 * j] = z.re;
                c[i * 2 * m + 2 * j + 1] = z.im;
            }
        }
        let mut x = vec![0.0; n * 2 * m];
        unsafe {
            matrixmultiply::dgemm(
                n,
                k,
                2 * m,
                1.0,
                self.eigen.vectors[first * n..].as_ptr(),
                1,
                n as isize,
                c.as_ptr(),
                2 * m as isize,
                1,
                0.0,
                x.as_mut_ptr(),
                2 * m as isize,
                1,
            );
        }
        (0..m)
            .map(|j| (0..n).map(|i| C64::new(x[i * 2 * m + 2 * j], x[i * 2 * m + 2 * j + 1])).collect())
            .collect()
    }

    /// Σ g(λ_k)⟨e_k, v⟩e_k; requires the full spectrum.
    pub fn apply_spectral_function(&self, g: impl Fn(f64) -> C64, v: &[C64]) -> Result<Vec<C64>, SpectralError> {
        if let Some(lambda_max) = self.lambda_max {
            return Err(SpectralError::IncompleteSpectrum {
                ell: self.ell,
                lambda_max,
            });
        }
        Ok(self.apply_windowed(g, v))
    }

    /// Σ_{λ_k in window} g(λ_k)⟨e_k, v⟩e_k, i.e. g(P) composed with the spectral projector of the window.
    pub fn apply_windowed(&self, g: impl Fn(f64) -> C64, v: &[C64]) -> Vec<C64> {
        let c: Vec<C64> = self
            .coefficients(v)
            .into_iter()
            .zip(&self.eigen.values)
            .map(|(c, &l)| c * g(l))
            .collect();
        self.synthesize(&c)
    }

    /// max |A_ij − A_ji| of the assembled matrix (zero by construction of the storage).
    pub fn symmetry_defect(&self) -> f64 {
        0.0
    }

    /// max |⟨e_i, e_j⟩ − δ_ij| over the computed eigenvectors.
    pub fn orthonormality_defect(&self) -> f64 {
        let k = self.eigen.len();
        let n = self.len();
        let mut g = vec![0.0; k * k];
        // Gram matrix EᵀE with E stored row-per-eigenvector
        unsafe {
            matrixmultiply::dgemm(
                k,
                n,
                k,
                1.0,
                self.eigen.vectors.as_ptr(),
                n as isize,
                1,
                self.eigen.vectors.as_ptr(),
                1,
                n as isize,
                0.0,
                g.as_mut_ptr(),
                k as isize,
                1,
            );
        }
        let mut worst = 0.0f64;
        for i in 0..k {
            for j in 0..k {
                let d = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((g[i * k + j] - d).abs());
            }
        }
        worst
    }
}

/// Mode operators ℓ = 0..=ℓ_max on a common grid.
#[derive(Debug, Clone)]
pub struct ModeFamily {
    pub metric: WarpedMetric<f64>,
    pub r_max: f64,
    pub dr: f64,
    pub ops: Vec<RadialModeOperator>,
}

impl ModeFamily {
    /// Builds the modes in parallel; `lambda_max` restricts every spectrum to λ ≤ lambda_max.
    pub fn build(
        metric: &WarpedMetric<f64>,
        ell_max: usize,
        r_max: f64,
        dr: f64,
        lambda_max: Option<f64>,
    ) -> Result<Self, SpectralError> {
        check_grid(r_max, dr)?;
        let ops = (0..=ell_max)
            .into_par_iter()
            .map(|l| build_impl(metric, l, r_max, dr, lambda_max))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            metric: *metric,
            r_max,
            dr,
            ops,
        })
    }

    pub fn ell_max(&self) -> usize {
        self.ops.len() - 1
    }

    pub fn r(&self) -> &[f64] {
        &self.ops[0].r
    }

    pub fn lambda_max(&self) -> Option<f64> {
        self.ops.iter().filter_map(|o| o.lambda_max).reduce(f64::min)
    }

    fn check(&self, s: &FieldState) -> Result<(), SpectralError> {
        if s.modes.len() > self.ops.len() || s.r.len() != self.ops[0].len() || (s.dr - self.dr).abs() > 1e-12 {
            return Err(SpectralError::Mismatch(format!(
                "state has {} modes on {} nodes, family has {} modes on {} nodes",
                s.modes.len(),
                s.r.len(),
                self.ops.len(),
                self.ops[0].len()
            )));
        }
        Ok(())
    }

    /// g(P) per mode; modes with a windowed spectrum are projected onto the window.
    pub fn apply(&self, g: impl Fn(f64) -> C64 + Sync, s: &FieldState) -> Result<FieldState, SpectralError> {
        self.check(s)?;
        let modes = s
            .modes
            .par_iter()
            .zip(&self.ops)
            .map(|(v, op)| op.apply_windowed(&g, v))
            .collect();
        Ok(FieldState { modes, ..s.clone() })
    }

    /// Same as `apply` but refuses windowed spectra.
    pub fn apply_exact(&self, g: impl Fn(f64) -> C64 + Sync, s: &FieldState) -> Result<FieldState, SpectralError> {
        if let Some(op) = self.ops.iter().find(|o| !o.is_complete()) {
            return Err(SpectralError::IncompleteSpectrum {
                ell: op.ell,
                lambda_max: op.lambda_max.unwrap_or(f64::INFINITY),
            });
        }
        self.apply(g, s)
    }

    /// Pv per mode.
    pub fn apply_operator(&self, s: &FieldState) -> Result<FieldState, SpectralError> {
        self.check(s)?;
        let modes = s.modes.iter().zip(&self.ops).map(|(v, op)| op.apply_matrix(v)).collect();
        Ok(FieldState { modes, ..s.clone() })
    }

    /// Largest computed eigenvalue over modes with non-negligible weight in `s`.
    pub fn spectral_extent(&self, s: &FieldState, tol: f64) -> f64 {
        let total = s.l2_norm().max(f64::MIN_POSITIVE);
        let mut top = 0.0f64;
        for (v, op) in s.modes.iter().zip(&self.ops) {
            for (c, l) in op.coefficients(v).iter().zip(op.eigenvalues()) {
                if c.norm() > tol * total {
                    top = top.max(*l);
                }
            }
        }
        top
    }
}

/// Axisymmetric state: mode amplitudes v_ℓ(r_i) in the Liouville gauge v = f^{(n−1)/2}u_ℓ.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldState {
    pub t: f64,
    pub n: usize,
    pub dr: f64,
    pub r: Vec<f64>,
    pub metric: WarpedMetric<f64>,
    pub modes: Vec<Vec<C64>>,
}

/// Normalised zonal harmonic of degree ℓ on S^{n−1} at x = cos θ (n = 2: cos ℓθ; n = 3: Legendre).
pub fn zonal_harmonic(n: usize, ell: usize, x: f64) -> Result<f64, SpectralError> {
    match n {
        2 => {
            let th = x.clamp(-1.0, 1.0).acos();
            Ok(if ell == 0 {
                (2.0 * PI).powf(-0.5)
            } else {
                (ell as f64 * th).cos() / PI.sqrt()
            })
        }
        3 => {
            let (mut p0, mut p1) = (1.0, x);
            let p = if ell == 0 {
                1.0
            } else {
                for k in 1..ell {
                    let kf = k as f64;
                    let p2 = ((2.0 * kf + 1.0) * x * p1 - kf * p0) / (kf + 1.0);
                    p0 = p1;
                    p1 = p2;
                }
                p1
            };
            Ok(((2 * ell + 1) as f64 / (4.0 * PI)).sqrt() * p)
        }
        other => Err(SpectralError::UnsupportedDimension(other)),
    }
}

/// Angular nodes x_a = cos θ_a and sphere weights: n = 3 Gauss–Legendre in x (weights 2π w_a),
/// n = 2 midpoint rule in θ ∈ (0, π) (weights 2π/m, even functions on the circle).
pub fn angular_rule(n: usize, m: usize) -> Result<Vec<(f64, f64)>, SpectralError> {
    match n {
        2 => Ok((0..m)
            .map(|a| {
                let th = PI * (a as f64 + 0.5) / m as f64;
                (th.cos(), 2.0 * PI / m as f64)
            })
            .collect()),
        3 => Ok(GaussLegendre::<f64>::new(m)
            .mapped(-1.0, 1.0)
            .map(|(x, w)| (x, 2.0 * PI * w))
            .collect()),
        other => Err(SpectralError::UnsupportedDimension(other)),
    }
}

pub const ANGULAR_NODES: usize = 64;

impl FieldState {
    pub fn zeros(family: &ModeFamily, ell_max: usize) -> Self {
        let n = family.r().len();
        Self {
            t: 0.0,
            n: family.metric.n,
            dr: family.dr,
            r: family.r().to_vec(),
            metric: family.metric,
            modes: vec![vec![C64::new(0.0, 0.0); n]; ell_max + 1],
        }
    }

    /// Radial state u(r) in mode ℓ = 0.
    pub fn radial(family: &ModeFamily, u: impl Fn(f64) -> C64) -> Result<Self, SpectralError> {
        let mut s = Self::zeros(family, 0);
        let y0 = zonal_harmonic(s.n, 0, 1.0)?;
        let m = 0.5 * (s.n as f64 - 1.0);
        for (v, &r) in s.modes[0].iter_mut().zip(&family.ops[0].r) {
            *v = u(r) * family.metric.warp(r).v.powf(m) / y0;
        }
        Ok(s)
    }

    /// Projection of u(r, cos θ) onto the zonal harmonics ℓ ≤ ℓ_max.
    pub fn from_fn(family: &ModeFamily, ell_max: usize, u: impl Fn(f64, f64) -> C64 + Sync) -> Result<Self, SpectralError> {
        if ell_max > family.ell_max() {
            return Err(SpectralError::Mismatch(format!("ℓ_max = {ell_max} above the family's {}", family.ell_max())));
        }
        let mut s = Self::zeros(family, ell_max);
        let rule = angular_rule(s.n, ANGULAR_NODES)?;
        let m = 0.5 * (s.n as f64 - 1.0);
        for l in 0..=ell_max {
            let y: Vec<f64> = rule.iter().map(|(x, _)| zonal_harmonic(s.n, l, *x)).collect::<Result<_, _>>()?;
            let metric = s.metric;
            s.modes[l] = s
                .r
                .par_iter()
                .map(|&r| {
                    let proj = rule
                        .iter()
                        .zip(&y)
                        .fold(C64::new(0.0, 0.0), |acc, ((x, w), yl)| acc + u(r, *x) * (w * yl));
                    proj * metric.warp(r).v.powf(m)
                })
                .collect();
        }
        Ok(s)
    }

    pub fn ell_max(&self) -> usize {
        self.modes.len() - 1
    }

    /// (Σ_ℓ Σ_i |v_ℓ(r_i)|² Δr)^{1/2}.
    pub fn l2_norm(&self) -> f64 {
        (self.modes.iter().flatten().map(|v| v.norm_sqr()).sum::<f64>() * self.dr).sqrt()
    }

    pub fn inner(&self, other: &Self) -> C64 {
        self.modes
            .iter()
            .flatten()
            .zip(other.modes.iter().flatten())
            .fold(C64::new(0.0, 0.0), |acc, (a, b)| acc + a.conj() * b)
            * self.dr
    }

    pub fn scale(&self, a: C64) -> Self {
        Self {
            modes: self.modes.iter().map(|m| m.iter().map(|v| v * a).collect()).collect(),
            ..self.clone()
        }
    }

    /// self + a·other (mode counts may differ).
    pub fn axpy(&self, a: C64, other: &Self) -> Self {
        let len = self.modes.len().max(other.modes.len());
        let zero = vec![C64::new(0.0, 0.0); self.r.len()];
        let modes = (0..len)
            .map(|l| {
                let x = self.modes.get(l).unwrap_or(&zero);
                let y = other.modes.get(l).unwrap_or(&zero);
                x.iter().zip(y).map(|(p, q)| p + q * a).collect()
            })
            .collect();
        Self { modes, ..self.clone() }
    }

    /// Multiplies u by a radial function w(r).
    pub fn weight(&self, w: impl Fn(f64) -> f64) -> Self {
        let wr: Vec<f64> = self.r.iter().map(|&r| w(r)).collect();
        Self {
            modes: self
                .modes
                .iter()
                .map(|m| m.iter().zip(&wr).map(|(v, w)| v * w).collect())
                .collect(),
            ..self.clone()
        }
    }

    /// u(r_i, x_a) on the angular rule, rows r_i, columns a.
    pub fn physical(&self, rule: &[(f64, f64)]) -> Result<Vec<Vec<C64>>, SpectralError> {
        let y: Vec<Vec<f64>> = (0..self.modes.len())
            .map(|l| rule.iter().map(|(x, _)| zonal_harmonic(self.n, l, *x)).collect())
            .collect::<Result<_, _>>()?;
        let m = 0.5 * (self.n as f64 - 1.0);
        Ok(self
            .r
            .par_iter()
            .enumerate()
            .map(|(i, &r)| {
                let g = self.metric.warp(r).v.powf(-m);
                (0..rule.len())
                    .map(|a| {
                        self.modes
                            .iter()
                            .zip(&y)
                            .fold(C64::new(0.0, 0.0), |acc, (v, yl)| acc + v[i] * yl[a])
                            * g
                    })
                    .collect()
            })
            .collect())
    }
}

/// ‖u‖_{L^q(M)}: ∫|u|^q f^{n−1} dr dσ on the radial nodes and the angular rule; q = ∞ is the grid sup.
pub fn lq_norm(state: &FieldState, q: f64) -> Result<f64, SpectralError> {
    // radial states are constant on spheres
    let nodes = if state.ell_max() == 0 { 2 } else { ANGULAR_NODES };
    lq_norm_with(state, q, nodes)
}

pub fn lq_norm_with(state: &FieldState, q: f64, nodes: usize) -> Result<f64, SpectralError> {
    if !(q >= 1.0) {
        return Err(SpectralError::InvalidGrid(format!("q = {q} < 1")));
    }
    let max = match state.n {
        3 => nodes - 1,
        _ => nodes.saturating_sub(1),
    };
    if state.ell_max() > max {
        return Err(SpectralError::AngularResolution {
            ell_max: state.ell_max(),
            max,
        });
    }
    let rule = angular_rule(state.n, nodes)?;
    let u = state.physical(&rule)?;
    if q.is_infinite() {
        return Ok(u.iter().flatten().map(|z| z.norm()).fold(0.0, f64::max));
    }
    let mut total = 0.0;
    for (row, &r) in u.iter().zip(&state.r) {
        let jac = state.metric.warp(r).v.powi(state.n as i32 - 1);
        let ang: f64 = row.iter().zip(&rule).map(|(z, (_, w))| w * z.norm().powf(q)).sum();
        total += ang * jac;
    }
    Ok((total * state.dr).powf(1.0 / q))
}

/// Scale of the weighted norm: h-type ⟨r⟩^μ(h²P + 1)^j or ε-type ⟨εr⟩^μ(P/ε² + 1)^j.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormScale {
    H(f64),
    Eps(f64),
}

/// ‖⟨·r⟩^μ (·P + 1)^j u‖₂.
pub fn weighted_norm(family: &ModeFamily, state: &FieldState, mu: f64, j: i32, scale: NormScale) -> Result<f64, SpectralError> {
    let (c, rs) = match scale {
        NormScale::H(h) => (h * h, 1.0),
        NormScale::Eps(e) => (1.0 / (e * e), e),
    };
    let v = if j == 0 {
        state.clone()
    } else {
        family.apply(|l| C64::new((c * l + 1.0).powi(j), 0.0), state)?
    };
    let metric = family.metric;
    Ok(v.weight(|r| bracket(&metric, rs * r).powf(mu)).l2_norm())
}

fn bracket(metric: &WarpedMetric<f64>, r: f64) -> f64 {
    modified_bracket(r, metric).expect("non-negative radius")
}

/// Aborts when 2√λ_max·T + r_support > 0.8·R_max.
pub fn light_cone_check(lambda_max: f64, t: f64, r_support: f64, r_max: f64) -> Result<(), SpectralError> {
    let reach = 2.0 * lambda_max.max(0.0).sqrt() * t.abs() + r_support;
    let limit = 0.8 * r_max;
    if reach > limit {
        return Err(SpectralError::LightCone { reach, limit });
    }
    Ok(())
}

/// First `count` positive zeros of j₁, i.e. the roots of tan x = x, by bisection on (kπ, kπ + π/2).
pub fn spherical_bessel_j1_zeros(count: usize) -> Vec<f64> {
    (1..=count)
        .map(|k| {
            let g = |x: f64| x * x.cos() - x.sin();
            let (mut a, mut b) = (k as f64 * PI, (k as f64 + 0.5) * PI - 1e-12);
            for _ in 0..200 {
                let m = 0.5 * (a + b);
                if g(a) * g(m) <= 0.0 {
                    b = m;
                } else {
                    a = m;
                }
            }
            0.5 * (a + b)
        })
        .collect()
}

/// Relative eigenvalue errors of the lowest `count` modes against the flat oracles:
/// (kπ/R)² for ℓ = 0 and (j₁-zero/R)² for ℓ = 1.
pub fn flat_eigenvalue_errors(op: &RadialModeOperator, count: usize) -> Result<Vec<f64>, SpectralError> {
    let exact: Vec<f64> = match op.ell {
        0 => (1..=count).map(|k| (k as f64 * PI / op.r_max).powi(2)).collect(),
        1 => spherical_bessel_j1_zeros(count).iter().map(|x| (x / op.r_max).powi(2)).collect(),
        l => return Err(SpectralError::Mismatch(format!("no closed-form oracle for ℓ = {l}"))),
    };
    if op.eigenvalues().len() < count {
        return Err(SpectralError::Mismatch(format!("{} eigenvalues computed, {count} requested", op.eigenvalues().len())));
    }
    Ok(exact
        .iter()
        .zip(op.eigenvalues())
        .map(|(e, l)| ((l - e) / e).abs())
        .collect())
}

/// Observed order p of λ_k(Δr) − λ_k from the three-level ladder Δr, Δr/2, Δr/4; the worst (smallest)
/// order over the lowest `count` eigenvalues.
pub fn halving_order(metric: &WarpedMetric<f64>, ell: usize, r_max: f64, dr: f64, count: usize) -> Result<f64, SpectralError> {
    let levels = [dr, dr / 2.0, dr / 4.0]
        .iter()
        .map(|&d| {
            let (_, _, m) = mode_matrix(metric, ell, r_max, d)?;
            Ok((0..count).into_par_iter().map(|k| m.eigenvalue(k)).collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>, SpectralError>>()?;
    Ok((0..count)
        .map(|k| ((levels[0][k] - levels[1][k]) / (levels[1][k] - levels[2][k])).abs().log2())
        .fold(f64::INFINITY, f64::min))
}

/// Random state with independent normal eigen-coefficients in each mode ℓ ≤ ℓ_max, weighted by the
/// given bands and normalised in L².
pub fn random_band_state(
    family: &ModeFamily,
    bands: &[DyadicBand],
    ell_max: usize,
    seed: u64,
) -> Result<FieldState, SpectralError> {
    let mut s = FieldState::zeros(family, ell_max);
    for l in 0..=ell_max.min(family.ell_max()) {
        let op = &family.ops[l];
        let mut g = rng::stream(seed, l as u64);
        let c: Vec<C64> = op
            .eigenvalues()
            .iter()
            .map(|&lam| {
                let w: f64 = bands.iter().map(|b| b.eval(lam)).sum();
                C64::new(rng::normal(&mut g), rng::normal(&mut g)) * w
            })
            .collect();
        s.modes[l] = op.synthesize(&c);
    }
    let n = s.l2_norm();
    Ok(if n > 0.0 { s.scale(C64::new(1.0 / n, 0.0)) } else { s })
}

// ---------------------------------------------------------------------------------------------
// Littlewood–Paley

fn smooth_step_kernel(t: f64) -> f64 {
    if t > 0.0 {
        (-1.0 / t).exp()
    } else {
        0.0
    }
}

/// f₀: even, ≡ 1 on [−1, 1], supported in [−2, 2], C^∞.
pub fn f0(lambda: f64) -> f64 {
    let a = lambda.abs();
    if a <= 1.0 {
        return 1.0;
    }
    if a >= 2.0 {
        return 0.0;
    }
    let p = smooth_step_kernel(2.0 - a);
    let q = smooth_step_kernel(a - 1.0);
    p / (p + q)
}

/// f(λ) = f₀(λ) − f₀(2λ), supported in [1/2, 2] on the positive axis.
pub fn lp_band(lambda: f64) -> f64 {
    f0(lambda) - f0(2.0 * lambda)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandDirection {
    /// f(2^ℓ P), ℓ ≥ 0, summing to f₀(P).
    Low,
    /// f(2^{−ℓ} P), ℓ ≥ 1, summing to (1 − f₀)(P).
    High,
}

/// One dyadic band: low f(2^ℓ λ) with scale ε = 2^{−ℓ/2}, high f(2^{−ℓ} λ) with h = 2^{−ℓ/2}.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DyadicBand {
    pub index: i32,
    pub direction: BandDirection,
}

impl DyadicBand {
    pub fn new(index: i32, direction: BandDirection) -> Self {
        Self { index, direction }
    }

    pub fn scale(&self) -> f64 {
        2f64.powf(-self.index as f64 / 2.0)
    }

    pub fn eval(&self, lambda: f64) -> f64 {
        match self.direction {
            BandDirection::Low => lp_band(2f64.powi(self.index) * lambda),
            BandDirection::High => lp_band(2f64.powi(-self.index) * lambda),
        }
    }

    /// Geometric centre of the band's support in λ.
    pub fn centre(&self) -> f64 {
        let (a, b) = self.support();
        (a * b).sqrt()
    }

    /// Eigenvalue interval where the band can be non-zero.
    pub fn support(&self) -> (f64, f64) {
        let s = match self.direction {
            BandDirection::Low => 2f64.powi(-self.index),
            BandDirection::High => 2f64.powi(self.index),
        };
        (0.5 * s, 2.0 * s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LpReconstruction {
    pub direction: BandDirection,
    pub terms: usize,
    pub max_residual: f64,
    /// max over samples of the telescoping remainder |f₀(2^{L}λ)| (low) or |f₀(2^{−L}λ) − 1| (high).
    pub tail_bound: f64,
}

/// Truncated telescoping sums against f₀ (low) or 1 − f₀ (high); λ ≤ 0 samples are skipped.
pub fn lp_reconstruct(samples: &[f64], direction: BandDirection, terms: usize) -> LpReconstruction {
    let mut max_residual = 0.0f64;
    let mut tail_bound = 0.0f64;
    for &l in samples.iter().filter(|l| **l > 0.0) {
        let (sum, target, tail) = match direction {
            BandDirection::Low => {
                let s: f64 = (0..terms).map(|k| DyadicBand::new(k as i32, direction).eval(l)).sum();
                (s, f0(l), f0(2f64.powi(terms as i32) * l).abs())
            }
            BandDirection::High => {
                let s: f64 = (1..=terms).map(|k| DyadicBand::new(k as i32, direction).eval(l)).sum();
                (s, 1.0 - f0(l), (f0(2f64.powi(-(terms as i32)) * l) - 1.0).abs())
            }
        };
        max_residual = max_residual.max((sum - target).abs());
        tail_bound = tail_bound.max(tail);
    }
    LpReconstruction {
        direction,
        terms,
        max_residual,
        tail_bound,
    }
}

/// ‖f(2^j P) f(2^l P)‖ = max over the computed spectrum of |band_j(λ) band_l(λ)|.
pub fn band_product_norm(family: &ModeFamily, a: DyadicBand, b: DyadicBand) -> f64 {
    family
        .ops
        .iter()
        .flat_map(|o| o.eigenvalues().iter())
        .map(|&l| (a.eval(l) * b.eval(l)).abs())
        .fold(0.0, f64::max)
}

/// Bands whose support meets the computed spectrum [λ_min, λ_max].
pub fn active_bands(family: &ModeFamily, direction: BandDirection) -> Vec<DyadicBand> {
    let all = family.ops.iter().flat_map(|o| o.eigenvalues().iter().copied());
    let (lo, hi) = all.fold((f64::INFINITY, 0.0f64), |(a, b), l| (a.min(l), b.max(l)));
    let lo = lo.max(f64::MIN_POSITIVE);
    let range: Vec<i32> = match direction {
        BandDirection::Low => (0..=((2.0 / lo).log2().ceil().max(0.0) as i32 + 1)).collect(),
        BandDirection::High => (1..=((2.0 * hi).log2().ceil().max(1.0) as i32 + 1)).collect(),
    };
    range
        .into_iter()
        .map(|k| DyadicBand::new(k, direction))
        .filter(|b| {
            let (a, c) = b.support();
            c >= lo && a <= hi
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LpProbeReport {
    pub direction: BandDirection,
    pub q: f64,
    pub bands: usize,
    /// ‖f₀(P)v‖_q (low) or ‖(1 − f₀)(P)v‖_q (high).
    pub lhs: f64,
    /// ‖(Σ_band |f_band(P)v|²)^{1/2}‖_q.
    pub square_function: f64,
    /// ‖⟨r⟩^{−1} f₀(P)v‖₂ (low) or ‖⟨r⟩^{−1}(1 − f₀)(P)v‖₂ (high).
    pub correction: f64,
    pub rhs: f64,
    pub ratio: f64,
}

/// Square-function inequality: lhs against the band square function plus the ⟨r⟩^{−1} L² correction.
pub fn lp_inequality_probe(
    family: &ModeFamily,
    v: &FieldState,
    q: f64,
    direction: BandDirection,
) -> Result<LpProbeReport, SpectralError> {
    let bands = active_bands(family, direction);
    let projected = match direction {
        BandDirection::Low => family.apply(|l| C64::new(f0(l), 0.0), v)?,
        BandDirection::High => family.apply(|l| C64::new(1.0 - f0(l), 0.0), v)?,
    };
    let lhs = lq_norm(&projected, q)?;
    let rule = angular_rule(v.n, ANGULAR_NODES)?;
    let pieces: Vec<Vec<Vec<C64>>> = bands
        .par_iter()
        .map(|b| {
            let s = family.apply(|l| C64::new(b.eval(l), 0.0), v)?;
            s.physical(&rule)
        })
        .collect::<Result<_, _>>()?;
    let mut total = 0.0;
    for (i, &r) in v.r.iter().enumerate() {
        let jac = v.metric.warp(r).v.powi(v.n as i32 - 1);
        let mut ang = 0.0;
        for (a, (_, w)) in rule.iter().enumerate() {
            let sq: f64 = pieces.iter().map(|p| p[i][a].norm_sqr()).sum();
            ang += w * sq.powf(q / 2.0);
        }
        total += ang * jac;
    }
    let square_function = (total * v.dr).powf(1.0 / q);
    let metric = family.metric;
    let correction = projected.weight(|r| 1.0 / bracket(&metric, r)).l2_norm();
    let rhs = square_function + correction;
    Ok(LpProbeReport {
        direction,
        q,
        bands: bands.len(),
        lhs,
        square_function,
        correction,
        rhs,
        ratio: if rhs > 0.0 { lhs / rhs } else { 0.0 },
    })
}

// ---------------------------------------------------------------------------------------------
// Resolvent

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weight {
    /// ⟨r⟩^{−k}.
    Bracket(f64),
    None,
}

impl Weight {
    fn eval(&self, metric: &WarpedMetric<f64>, r: f64) -> f64 {
        match *self {
            Weight::Bracket(k) => bracket(metric, r).powf(-k),
            Weight::None => 1.0,
        }
    }
}

/// Largest singular value of the linear map `a` (with adjoint `ah`) by power iteration on a^*a.
fn operator_norm(
    dim: usize,
    a: impl Fn(&[C64]) -> Vec<C64>,
    ah: impl Fn(&[C64]) -> Vec<C64>,
    tol: f64,
    max_iter: usize,
) -> f64 {
    let mut x: Vec<C64> = (0..dim)
        .map(|i| C64::new(1.0 + 0.37 * ((i * 7919) % 101) as f64 / 101.0, 0.0))
        .collect();
    let norm = |v: &[C64]| v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    let mut sigma = 0.0;
    for _ in 0..max_iter {
        let nx = norm(&x);
        x.iter_mut().for_each(|z| *z /= nx);
        let y = ah(&a(&x));
        let s = norm(&y).sqrt();
        x = y;
        if (s - sigma).abs() <= tol * s {
            return s;
        }
        sigma = s;
    }
    sigma
}

/// ‖W(P_ℓ − z)^{−1}W‖ for one mode through its eigendecomposition.
pub fn weighted_resolvent_norm(op: &RadialModeOperator, z: C64, weight: Weight) -> Result<f64, SpectralError> {
    if !op.is_complete() {
        return Err(SpectralError::IncompleteSpectrum {
            ell: op.ell,
            lambda_max: op.lambda_max.unwrap_or(f64::INFINITY),
        });
    }
    let w: Vec<f64> = op.r.iter().map(|&r| weight.eval(&op.metric, r)).collect();
    let d: Vec<C64> = op.eigenvalues().iter().map(|&l| 1.0 / (C64::new(l, 0.0) - z)).collect();
    let apply = |x: &[C64], conj: bool| {
        let wx: Vec<C64> = x.iter().zip(&w).map(|(a, b)| a * b).collect();
        let c: Vec<C64> = op
            .coefficients(&wx)
            .into_iter()
            .zip(&d)
            .map(|(c, d)| c * if conj { d.conj() } else { *d })
            .collect();
        op.synthesize(&c).into_iter().zip(&w).map(|(a, b)| a * b).collect::<Vec<_>>()
    };
    Ok(operator_norm(op.len(), |x| apply(x, false), |x| apply(x, true), 1e-7, 2000))
}

/// Where the spectral parameter sits relative to the discrete spectrum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    /// Midpoint of the spectral gap containing λ.
    MidGap,
    /// Nearest eigenvalue (negative control: the norm grows like 1/δ).
    Eigenvalue,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResolventReport {
    pub lambda_requested: f64,
    pub lambda: f64,
    pub placement: Placement,
    pub weight: Weight,
    /// (δ, max_ℓ ‖W(P_ℓ − λ − iδ)^{−1}W‖).
    pub norms: Vec<(f64, f64)>,
    /// max/min of the norms over the δ ladder.
    pub spread: f64,
    pub plateau: bool,
    /// Value at the smallest δ of the ladder.
    pub level: f64,
    /// Smallest δ at which a wave packet at energy λ loses 99% of its amplitude over one round trip of the box.
    pub absorbing_delta: f64,
    /// 2N(δ_a) − N(2δ_a) at the requested λ: the limiting-absorption value with the box reflections damped.
    pub extrapolated: f64,
}

/// Valid λ window: above four level spacings of the ℓ = 0 spectrum and below (π/Δr)²/4.
pub fn resolvent_window(family: &ModeFamily) -> (f64, f64) {
    let ev = family.ops[0].eigenvalues();
    let gap = if ev.len() > 1 { ev[1] - ev[0] } else { 0.0 };
    (4.0 * gap.max(ev[0]), (PI / family.dr).powi(2) / 4.0)
}

fn max_mode_norm(family: &ModeFamily, z: C64, weight: Weight) -> Result<f64, SpectralError> {
    Ok(family
        .ops
        .iter()
        .map(|op| weighted_resolvent_norm(op, z, weight))
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .fold(0.0, f64::max))
}

/// Weighted resolvent norms over a δ ladder; the values plateau when their spread over the ladder stays
/// below `plateau_factor`.
pub fn resolvent_probe(
    family: &ModeFamily,
    lambda: f64,
    deltas: &[f64],
    weight: Weight,
    placement: Placement,
    plateau_factor: f64,
) -> Result<ResolventReport, SpectralError> {
    let (lo, hi) = resolvent_window(family);
    if !(lambda >= lo && lambda <= hi) {
        return Err(SpectralError::OutsideWindow { lambda, lo, hi });
    }
    let mut all: Vec<f64> = family.ops.iter().flat_map(|o| o.eigenvalues().iter().copied()).collect();
    all.sort_by(f64::total_cmp);
    let k = all.partition_point(|&l| l < lambda);
    let below = k.checked_sub(1).map(|i| all[i]);
    let above = all.get(k).copied();
    let at = match (placement, below, above) {
        (Placement::MidGap, Some(a), Some(b)) => 0.5 * (a + b),
        (Placement::Eigenvalue, Some(a), Some(b)) => {
            if lambda - a < b - lambda {
                a
            } else {
                b
            }
        }
        (_, a, b) => a.or(b).unwrap_or(lambda),
    };
    let norms: Vec<(f64, f64)> = deltas
        .par_iter()
        .map(|&d| Ok((d, max_mode_norm(family, C64::new(at, d), weight)?)))
        .collect::<Result<_, SpectralError>>()?;
    let (mn, mx) = norms
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(a, b), (_, v)| (a.min(*v), b.max(*v)));
    let level = norms
        .iter()
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .map(|x| x.1)
        .unwrap_or(0.0);
    // Im √(λ + iδ) ≈ δ/(2√λ); amplitude e^{−2R Im k} ≤ 10⁻²
    let absorbing_delta = lambda.sqrt() * 100f64.ln() / family.r_max;
    let n1 = max_mode_norm(family, C64::new(lambda, absorbing_delta), weight)?;
    let n2 = max_mode_norm(family, C64::new(lambda, 2.0 * absorbing_delta), weight)?;
    Ok(ResolventReport {
        lambda_requested: lambda,
        lambda: at,
        placement,
        weight,
        spread: mx / mn,
        plateau: mx / mn < plateau_factor,
        norms,
        level,
        absorbing_delta,
        extrapolated: 2.0 * n1 - n2,
    })
}

/// Continuum ‖W(−∂_r² − λ − i0)^{−1}W‖ on the half-line with Dirichlet at 0, kernel
/// sin(k r_<) e^{ik r_>}/k, by Nyström discretisation on [0, r_cut].
pub fn continuum_resolvent_norm(metric: &WarpedMetric<f64>, lambda: f64, weight: Weight, r_cut: f64) -> f64 {
    let k = lambda.sqrt();
    let gl = GaussLegendre::<f64>::new(12);
    let panel = (PI / k).min(1.0);
    let panels = (r_cut / panel).ceil() as usize;
    let mut nodes = Vec::new();
    for p in 0..panels {
        let a = p as f64 * r_cut / panels as f64;
        let b = (p + 1) as f64 * r_cut / panels as f64;
        nodes.extend(gl.mapped(a, b));
    }
    let sw: Vec<f64> = nodes.iter().map(|(r, w)| w.sqrt() * weight.eval(metric, *r)).collect();
    let m = nodes.len();
    let kernel = |i: usize, j: usize| {
        let (a, b) = (nodes[i].0, nodes[j].0);
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        C64::new(0.0, k * hi).exp() * ((k * lo).sin() / k) * sw[i] * sw[j]
    };
    let mat: Vec<C64> = (0..m * m).into_par_iter().map(|ij| kernel(ij / m, ij % m)).collect();
    // the kernel is complex symmetric: A^* x = conj(A conj(x))
    let mul = |x: &[C64]| -> Vec<C64> {
        (0..m)
            .into_par_iter()
            .map(|i| mat[i * m..(i + 1) * m].iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    };
    operator_norm(
        m,
        &mul,
        |x| {
            let xc: Vec<C64> = x.iter().map(|z| z.conj()).collect();
            mul(&xc).into_iter().map(|z| z.conj()).collect()
        },
        1e-8,
        2000,
    )
}

// ---------------------------------------------------------------------------------------------
// Smoothing

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SmoothingReport {
    pub eps: f64,
    pub horizons: Vec<f64>,
    /// (∫₀^T ‖⟨r⟩^{−1}e^{−itP}f(P/ε²)u₀‖² dt)^{1/2}/‖f(P/ε²)u₀‖ per horizon.
    pub ratios: Vec<f64>,
    /// Same integral divided by ‖u₀‖.
    pub raw_ratios: Vec<f64>,
    /// Relative increment of the ratio over the last doubling.
    pub increment: f64,
    pub stabilized: bool,
}

/// L² tail defining the data support radius in time-integrated experiments, where a reflected
/// tail of this size stays far below the measured tolerances.
pub const INTEGRATED_TAIL: f64 = 1e-4;

/// Time-integrated local energy of the band-projected evolution, by Gauss–Legendre panels in t.
/// The light-cone rule is enforced at the largest horizon with r_support taken at INTEGRATED_TAIL.
pub fn smoothing_probe(
    family: &ModeFamily,
    eps: f64,
    u0: &FieldState,
    horizons: &[f64],
    stabilization_tol: f64,
) -> Result<SmoothingReport, SpectralError> {
    let band = |l: f64| lp_band(l / (eps * eps));
    let g = family.apply(|l| C64::new(band(l), 0.0), u0)?;
    let base = g.l2_norm();
    let raw = u0.l2_norm();
    let t_max = horizons.iter().copied().fold(0.0, f64::max);
    if base == 0.0 {
        return Ok(SmoothingReport {
            eps,
            horizons: horizons.to_vec(),
            ratios: vec![0.0; horizons.len()],
            raw_ratios: vec![0.0; horizons.len()],
            increment: 0.0,
            stabilized: true,
        });
    }
    light_cone_check(2.0 * eps * eps, t_max, mass_radius(&g, INTEGRATED_TAIL), family.r_max)?;
    let metric = family.metric;
    let w2: Vec<f64> = g.r.iter().map(|&r| bracket(&metric, r).powi(-2)).collect();
    let energy: Vec<f64> = g
        .modes
        .par_iter()
        .zip(&family.ops)
        .map(|(v, op)| op.local_energy_integrals(&op.coefficients(v), &w2, horizons))
        .reduce(
            || vec![0.0; horizons.len()],
            |a, b| a.iter().zip(&b).map(|(x, y)| x + y).collect(),
        );
    let at = |h: f64| {
        horizons
            .iter()
            .position(|&x| x == h)
            .map_or(0.0, |i| energy[i] * g.dr)
    };
    let mut sorted = horizons.to_vec();
    sorted.sort_by(f64::total_cmp);
    let ratios: Vec<f64> = horizons.iter().map(|&h| at(h).sqrt() / base).collect();
    let raw_ratios: Vec<f64> = horizons.iter().map(|&h| at(h).sqrt() / raw).collect();
    let increment = if sorted.len() >= 2 {
        let a = at(sorted[sorted.len() - 2]).sqrt();
        let b = at(sorted[sorted.len() - 1]).sqrt();
        (b - a).abs() / b
    } else {
        f64::INFINITY
    };
    Ok(SmoothingReport {
        eps,
        horizons: horizons.to_vec(),
        ratios,
        raw_ratios,
        increment,
        stabilized: increment < stabilization_tol,
    })
}

/// Relative size of eigen-coefficients treated as roundoff at the ends of a spectrum.
pub const TRIM_TOL: f64 = 1e-14;

/// Index range outside which every coefficient is below TRIM_TOL of the vector's norm.
pub fn significant_range(c: &[C64]) -> (usize, usize) {
    let floor = TRIM_TOL * c.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    let lo = c.iter().position(|z| z.norm() > floor).unwrap_or(0);
    let hi = c.iter().rposition(|z| z.norm() > floor).map_or(lo, |i| i + 1);
    (lo, hi)
}

/// Smallest r with all but `tail` of the mass inside.
pub fn mass_radius(s: &FieldState, tail: f64) -> f64 {
    let per: Vec<f64> = (0..s.r.len())
        .map(|i| s.modes.iter().map(|m| m[i].norm_sqr()).sum::<f64>())
        .collect();
    let total: f64 = per.iter().sum();
    let mut outer = 0.0;
    for (i, p) in per.iter().enumerate().rev() {
        outer += p;
        if outer > tail * tail * total {
            return s.r[i];
        }
    }
    s.r[0]
}

// ---------------------------------------------------------------------------------------------
// Sobolev

/// ‖v‖_{2*}/‖P^{1/2}v‖₂ with 2* = 2n/(n − 2); `inhomogeneous` uses (P + 1)^{1/2}.
pub fn sobolev_ratio(family: &ModeFamily, v: &FieldState, inhomogeneous: bool) -> Result<f64, SpectralError> {
    let n = v.n as f64;
    if v.n < 3 {
        return Err(SpectralError::UnsupportedDimension(v.n));
    }
    let q = 2.0 * n / (n - 2.0);
    let shift = if inhomogeneous { 1.0 } else { 0.0 };
    // ‖P^{1/2}v‖² = ⟨v, Pv⟩
    let pv = family.apply(|l| C64::new(l + shift, 0.0), v)?;
    let energy = v.inner(&pv).re.max(0.0).sqrt();
    Ok(lq_norm(v, q)? / energy)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SobolevReport {
    pub ratios: Vec<f64>,
    pub max_ratio: f64,
    pub skipped: usize,
}

pub fn sobolev_probe(family: &ModeFamily, states: &[FieldState]) -> Result<SobolevReport, SpectralError> {
    let mut ratios = Vec::new();
    let mut skipped = 0;
    for s in states {
        if s.l2_norm() == 0.0 {
            skipped += 1;
            continue;
        }
        ratios.push(sobolev_ratio(family, s, false)?);
    }
    Ok(SobolevReport {
        max_ratio: ratios.iter().copied().fold(0.0, f64::max),
        ratios,
        skipped,
    })
}

/// Radial maximiser of ‖v‖_{2*}/‖P^{1/2}v‖₂ by the fixed-point iteration v ← P^{−1}(|u|^{2*−2}u),
/// started from `start`; returns the final ratio and the iterate.
pub fn sobolev_extremizer(
    family: &ModeFamily,
    start: &FieldState,
    iterations: usize,
) -> Result<(f64, FieldState), SpectralError> {
    let n = start.n as f64;
    let q = 2.0 * n / (n - 2.0);
    let op = &family.ops[0];
    let jm = 0.5 * (n - 1.0);
    let f: Vec<f64> = start.r.iter().map(|&r| family.metric.warp(r).v.powf(jm)).collect();
    let y0 = zonal_harmonic(start.n, 0, 1.0)?;
    let mut v = FieldState {
        modes: vec![start.modes[0].clone()],
        ..start.clone()
    };
    let mut best = sobolev_ratio(family, &v, false)?;
    for _ in 0..iterations {
        // nonlinearity in physical variables u = v y0 / f, mapped back to the gauge
        let rhs: Vec<C64> = v.modes[0]
            .iter()
            .zip(&f)
            .map(|(x, fi)| {
                let u = x * y0 / fi;
                u * u.norm().powf(q - 2.0) * fi / y0
            })
            .collect();
        let next = op.apply_spectral_function(|l| C64::new(1.0 / l, 0.0), &rhs)?;
        let candidate = FieldState {
            modes: vec![next],
            ..v.clone()
        };
        let s = candidate.l2_norm();
        let candidate = candidate.scale(C64::new(1.0 / s, 0.0));
        let r = sobolev_ratio(family, &candidate, false)?;
        v = candidate;
        if (r - best).abs() < 1e-10 * r {
            best = best.max(r);
            break;
        }
        best = best.max(r);
    }
    Ok((best, v))
}

/// Sharp constant of ‖u‖_{2*} ≤ K‖∇u‖₂ on ℝⁿ.
pub fn sobolev_sharp_constant(n: usize) -> f64 {
    let nf = n as f64;
    (1.0 / (PI * nf * (nf - 2.0))).sqrt() * (gamma(nf) / gamma(nf / 2.0)).powf(1.0 / nf)
}

fn gamma(x: f64) -> f64 {
    // integer and half-integer arguments only
    if (x - x.round()).abs() < 1e-12 {
        (1..x.round() as u64).map(|k| k as f64).product()
    } else {
        let mut v = PI.sqrt();
        let mut a = 0.5;
        while a < x - 1e-12 {
            v *= a;
            a += 1.0;
        }
        v
    }
}

// ---------------------------------------------------------------------------------------------
// Cache

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CacheHeader {
    metric: WarpedMetric<f64>,
    ell: usize,
    r_max: f64,
    dr: f64,
    lambda_max: Option<f64>,
    count: usize,
    n: usize,
    complete: bool,
}

/// On-disk operator cache: `<key>.bin` holds a length-prefixed JSON header followed by little-endian
/// eigenvalues and eigenvectors; the key is the SHA-256 of the build parameters.
#[derive(Debug, Clone)]
pub struct OperatorCache {
    pub dir: PathBuf,
}

impl OperatorCache {
    pub fn new(dir: impl AsRef<Path>) -> Result<Self, SpectralError> {
        fs::create_dir_all(dir.as_ref())?;
        Ok(Self {
            dir: dir.as_ref().to_path_buf(),
        })
    }

    pub fn key(metric: &WarpedMetric<f64>, ell: usize, r_max: f64, dr: f64, lambda_max: Option<f64>) -> String {
        let text = serde_json::to_string(&(metric, ell, r_max.to_bits(), dr.to_bits(), lambda_max.map(f64::to_bits)))
            .expect("serialisable key");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn load_or_build(
        &self,
        metric: &WarpedMetric<f64>,
        ell: usize,
        r_max: f64,
        dr: f64,
        lambda_max: Option<f64>,
    ) -> Result<RadialModeOperator, SpectralError> {
        let path = self.dir.join(format!("{}.bin", Self::key(metric, ell, r_max, dr, lambda_max)));
        if path.exists() {
            return self.load(&path, metric, ell, r_max, dr, lambda_max);
        }
        let op = build_impl(metric, ell, r_max, dr, lambda_max)?;
        let header = CacheHeader {
            metric: *metric,
            ell,
            r_max,
            dr,
            lambda_max,
            count: op.eigen.len(),
            n: op.len(),
            complete: op.eigen.complete,
        };
        let json = serde_json::to_vec(&header).map_err(|e| SpectralError::Cache(e.to_string()))?;
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&(json.len() as u64).to_le_bytes())?;
        f.write_all(&json)?;
        for x in op.eigen.values.iter().chain(&op.eigen.vectors) {
            f.write_all(&x.to_le_bytes())?;
        }
        f.sync_all()?;
        fs::rename(tmp, &path)?;
        Ok(op)
    }

    fn load(
        &self,
        path: &Path,
        metric: &WarpedMetric<f64>,
        ell: usize,
        r_max: f64,
        dr: f64,
        lambda_max: Option<f64>,
    ) -> Result<RadialModeOperator, SpectralError> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        let bad = |m: &str| SpectralError::Cache(format!("{}: {m}", path.display()));
        if bytes.len() < 8 {
            return Err(bad("truncated"));
        }
        let hl = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
        let header: CacheHeader =
            serde_json::from_slice(bytes.get(8..8 + hl).ok_or_else(|| bad("truncated header"))?)
                .map_err(|e| bad(&e.to_string()))?;
        if header.metric != *metric || header.ell != ell || header.r_max != r_max || header.dr != dr {
            return Err(bad("header does not match the request"));
        }
        let body = &bytes[8 + hl..];
        let want = (header.count + header.count * header.n) * 8;
        if body.len() != want {
            return Err(bad("payload size mismatch"));
        }
        let data: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let (r, potential, matrix) = mode_matrix(metric, ell, r_max, dr)?;
        Ok(RadialModeOperator {
            metric: *metric,
            ell,
            r_max,
            dr,
            r,
            potential,
            matrix,
            eigen: TridiagEigen {
                values: data[..header.count].to_vec(),
                vectors: data[header.count..].to_vec(),
                n: header.n,
                complete: header.complete,
            },
            lambda_max: if header.complete { None } else { lambda_max },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::WarpFamily;

    fn flat3() -> WarpedMetric<f64> {
        WarpedMetric::flat(3)
    }

    #[test]
    fn flat_s_wave_matches_dirichlet_spectrum() {
        let op = build_mode_operator(&flat3(), 0, 40.0, 0.02).unwrap();
        assert!(op.potential.iter().all(|v| v.abs() < 1e-14));
        let l0 = (PI / 40.0).powi(2);
        assert!(((op.eigenvalues()[0] - l0) / l0).abs() < 1e-3);
        assert!(op.eigenvalues()[0] > -1e-8);
    }

    #[test]
    fn spectral_calculus_identities() {
        let fam = ModeFamily::build(&flat3(), 1, 20.0, 0.1, None).unwrap();
        let s = FieldState::from_fn(&fam, 1, |r, x| C64::new((-(r - 5.0).powi(2)).exp() * (1.0 + x), 0.3 * (-r * r / 8.0).exp()))
            .unwrap();
        let id = fam.apply(|_| C64::new(1.0, 0.0), &s).unwrap();
        assert!(id.axpy(C64::new(-1.0, 0.0), &s).l2_norm() < 1e-10 * s.l2_norm());
        let u = fam.apply(|l| C64::new(0.0, -3.7 * l).exp(), &s).unwrap();
        assert!((u.l2_norm() - s.l2_norm()).abs() < 1e-10 * s.l2_norm());
        // apply(fg) = apply(f)∘apply(g)
        let f = |l: f64| C64::new((1.0 + l).recip(), 0.0);
        let g = |l: f64| C64::new(l.sin(), l);
        let fg = fam.apply(|l| f(l) * g(l), &s).unwrap();
        let f_g = fam.apply(f, &fam.apply(g, &s).unwrap()).unwrap();
        assert!(fg.axpy(C64::new(-1.0, 0.0), &f_g).l2_norm() < 1e-10 * fg.l2_norm());
        // band idempotence with a wider cutoff ≡ 1 on the band
        let band = |l: f64| C64::new(lp_band(l), 0.0);
        let wide = |l: f64| C64::new(f0(l / 2.0) - f0(8.0 * l), 0.0);
        let once = fam.apply(band, &s).unwrap();
        let twice = fam.apply(wide, &once).unwrap();
        assert!(once.axpy(C64::new(-1.0, 0.0), &twice).l2_norm() < 1e-10 * s.l2_norm());
    }

    #[test]
    fn self_adjoint_and_orthonormal() {
        let m = WarpedMetric::new(3, 1.0, 2.0, WarpFamily::PowerPerturb { amplitude: 0.3 }).unwrap();
        let fam = ModeFamily::build(&m, 2, 30.0, 0.1, None).unwrap();
        for op in &fam.ops {
            assert!(op.orthonormality_defect() < 1e-10);
            assert!(op.eigenvalues()[0] > -1e-8);
        }
        let a = FieldState::from_fn(&fam, 2, |r, x| C64::new((-(r - 4.0).powi(2)).exp() * x, (-(r - 6.0).powi(2)).exp())).unwrap();
        let b = FieldState::from_fn(&fam, 2, |r, x| C64::new((-(r - 5.0).powi(2) / 2.0).exp(), x * x * (-r).exp())).unwrap();
        let pa = fam.apply_operator(&a).unwrap();
        let pb = fam.apply_operator(&b).unwrap();
        let lhs = pa.inner(&b);
        let rhs = a.inner(&pb);
        assert!((lhs - rhs).norm() < 1e-10 * lhs.norm().max(1.0));
    }

    #[test]
    fn windowed_apply_refuses_exact_calculus() {
        let op = build_mode_operator_windowed(&flat3(), 0, 20.0, 0.1, 0.5).unwrap();
        assert!(!op.is_complete());
        let v = vec![C64::new(1.0, 0.0); op.len()];
        assert!(matches!(
            op.apply_spectral_function(|_| C64::new(1.0, 0.0), &v),
            Err(SpectralError::IncompleteSpectrum { .. })
        ));
    }

    #[test]
    fn lq_norm_parseval_and_gaussian() {
        let fam = ModeFamily::build(&flat3(), 0, 20.0, 0.02, Some(1.0)).unwrap();
        let s = FieldState::radial(&fam, |r| C64::new((-r * r / 2.0).exp(), 0.0)).unwrap();
        let l2 = lq_norm(&s, 2.0).unwrap();
        assert!((l2 - s.l2_norm()).abs() < 1e-8 * l2);
        assert!((l2 * l2 - PI.powf(1.5)).abs() < 1e-6);
        let l4 = lq_norm(&s, 4.0).unwrap();
        let linf = lq_norm(&s, f64::INFINITY).unwrap();
        assert!(l4 <= (l2 * linf).sqrt());
    }

    #[test]
    fn angular_resolution_is_checked() {
        let fam = ModeFamily::build(&flat3(), 0, 10.0, 0.1, Some(1.0)).unwrap();
        let mut s = FieldState::zeros(&fam, 0);
        s.modes = vec![vec![C64::new(0.0, 0.0); s.r.len()]; 70];
        assert!(matches!(lq_norm(&s, 2.0), Err(SpectralError::AngularResolution { .. })));
    }

    #[test]
    fn telescoping_is_exact() {
        let samples: Vec<f64> = (1..200).map(|i| 0.013 * i as f64).collect();
        let low = lp_reconstruct(&samples, BandDirection::Low, 30);
        assert_eq!(low.max_residual, 0.0);
        assert_eq!(low.tail_bound, 0.0);
        let high = lp_reconstruct(&[5.0, 0.7, 3.3], BandDirection::High, 30);
        assert_eq!(high.max_residual, 0.0);
        assert!((lp_band(0.3) == 0.0) && lp_band(1.0) > 0.0 && lp_band(2.0) == 0.0);
    }

    #[test]
    fn weighted_norm_cases() {
        let fam = ModeFamily::build(&flat3(), 0, 100.0, 0.1, None).unwrap();
        let s = FieldState::radial(&fam, |r| C64::new((-(r - 50.0).powi(2) / 2.0).exp() / r, 0.0)).unwrap();
        let base = weighted_norm(&fam, &s, 0.0, 0, NormScale::H(1.0)).unwrap();
        assert!((base - s.l2_norm()).abs() < 1e-12 * base);
        let w = weighted_norm(&fam, &s, 1.0, 0, NormScale::H(1.0)).unwrap();
        assert!((w / base - 50.0).abs() < 0.5);
        let res = weighted_norm(&fam, &s, 0.0, -1, NormScale::H(1.0)).unwrap();
        assert!(res <= base);
    }

    #[test]
    fn cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cache = OperatorCache::new(dir.path()).unwrap();
        let a = cache.load_or_build(&flat3(), 1, 10.0, 0.1, None).unwrap();
        let b = cache.load_or_build(&flat3(), 1, 10.0, 0.1, None).unwrap();
        assert_eq!(a.eigen, b.eigen);
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn light_cone_rule() {
        assert!(light_cone_check(1.0, 10.0, 5.0, 40.0).is_ok());
        assert!(matches!(light_cone_check(1.0, 20.0, 5.0, 40.0), Err(SpectralError::LightCone { .. })));
    }

    #[test]
    fn sharp_sobolev_constant_three_dimensions() {
        assert!((sobolev_sharp_constant(3) - 0.4273).abs() < 1e-3);
    }

    #[test]
    fn flat_eigenvalue_oracles() {
        let flat = flat3();
        let s0 = build_mode_operator_windowed(&flat, 0, 40.0, 0.02, 3.0).unwrap();
        assert!(flat_eigenvalue_errors(&s0, 20).unwrap().iter().all(|e| *e < 1e-3));
        let p1 = build_mode_operator_windowed(&flat, 1, 40.0, 0.02, 3.0).unwrap();
        assert!(flat_eigenvalue_errors(&p1, 20).unwrap().iter().all(|e| *e < 5e-3));
        assert!(halving_order(&flat, 1, 40.0, 0.08, 20).unwrap() >= 1.8);
        let z = spherical_bessel_j1_zeros(2);
        assert!((z[0] - 4.493409).abs() < 1e-6 && (z[1] - 7.725252).abs() < 1e-6);
    }

    #[test]
    fn bands_with_separated_indices_are_orthogonal() {
        let fam = ModeFamily::build(&flat3(), 1, 60.0, 0.1, None).unwrap();
        for j in 0..6 {
            for l in j + 3..9 {
                let a = DyadicBand::new(j, BandDirection::Low);
                let b = DyadicBand::new(l, BandDirection::Low);
                assert_eq!(band_product_norm(&fam, a, b), 0.0);
            }
        }
    }

    #[test]
    fn single_band_square_function() {
        let fam = ModeFamily::build(&flat3(), 0, 100.0, 0.1, Some(2.5)).unwrap();
        let v = random_band_state(&fam, &[DyadicBand::new(2, BandDirection::Low)], 0, 3).unwrap();
        let rep = lp_inequality_probe(&fam, &v, 6.0, BandDirection::Low).unwrap();
        assert!(rep.ratio <= 1.0 + 1e-9, "{rep:?}");
    }

    #[test]
    fn resolvent_matches_free_continuum() {
        let flat = flat3();
        let fam = ModeFamily::build(&flat, 0, 80.0, 0.2, None).unwrap();
        let ladder = [1e-1, 1e-2, 1e-3, 1e-4];
        let rep = resolvent_probe(&fam, 0.5, &ladder, Weight::Bracket(1.0), Placement::MidGap, 3.0).unwrap();
        assert!(rep.plateau);
        let cont = continuum_resolvent_norm(&flat, 0.5, Weight::Bracket(1.0), 300.0);
        assert!((rep.extrapolated / cont - 1.0).abs() < 0.25, "{} vs {cont}", rep.extrapolated);
        let bare = resolvent_probe(&fam, 0.5, &ladder, Weight::None, Placement::Eigenvalue, 3.0).unwrap();
        assert!(!bare.plateau);
        assert!((bare.norms[3].1 * 1e-4 - 1.0).abs() < 1e-6);
        assert!(matches!(
            resolvent_probe(&fam, 1e3, &ladder, Weight::None, Placement::MidGap, 3.0),
            Err(SpectralError::OutsideWindow { .. })
        ));
    }

    #[test]
    fn smoothing_vanishes_off_band() {
        let fam = ModeFamily::build(&flat3(), 0, 100.0, 0.1, Some(1.0)).unwrap();
        let b = DyadicBand::new(6, BandDirection::High);
        let u0 = random_band_state(&fam, &[b], 0, 1).unwrap();
        let rep = smoothing_probe(&fam, 0.5, &u0, &[5.0, 10.0], 0.05).unwrap();
        assert!(rep.ratios.iter().all(|r| *r == 0.0));
    }

    #[test]
    fn sobolev_extremizer_near_sharp_constant() {
        let fam = ModeFamily::build(&flat3(), 0, 60.0, 0.05, None).unwrap();
        let g = FieldState::radial(&fam, |r| C64::new((-r * r / 2.0).exp(), 0.0)).unwrap();
        let gauss = sobolev_ratio(&fam, &g, false).unwrap();
        // ℝ³ value for the Gaussian: (π/3)^{1/4}/(3π^{3/2}/2)^{1/2}
        let exact = (PI / 3.0).powf(0.25) / (1.5 * PI.powf(1.5)).sqrt();
        assert!((gauss / exact - 1.0).abs() < 1e-3);
        let (best, _) = sobolev_extremizer(&fam, &g, 200).unwrap();
        assert!(best >= gauss && (best / sobolev_sharp_constant(3) - 1.0).abs() < 0.05);
        assert!(sobolev_ratio(&fam, &g, true).unwrap() < gauss);
    }

    #[test]
    fn batch_transforms_match_single() {
        let op = build_mode_operator(&flat3(), 1, 10.0, 0.1).unwrap();
        let vs: Vec<Vec<C64>> = (0..3)
            .map(|j| op.r.iter().map(|r| C64::new((r * (j + 1) as f64).sin(), (-r).exp())).collect())
            .collect();
        let cb = op.coefficients_batch(&vs);
        let sb = op.synthesize_batch(&cb);
        for (j, v) in vs.iter().enumerate() {
            let c = op.coefficients(v);
            assert!(c.iter().zip(&cb[j]).all(|(a, b)| (a - b).norm() < 1e-12));
            assert!(v.iter().zip(&sb[j]).all(|(a, b)| (a - b).norm() < 1e-10));
        }
    }

    #[test]
    fn mass_radius_of_a_shell() {
        let fam = ModeFamily::build(&flat3(), 0, 60.0, 0.1, Some(1.0)).unwrap();
        let s = FieldState::radial(&fam, |r| C64::new(((-(r - 20.0).powi(2)) / 2.0).exp(), 0.0)).unwrap();
        let r = mass_radius(&s, 1e-6);
        assert!(r > 24.0 && r < 30.0, "{r}");
    }
}

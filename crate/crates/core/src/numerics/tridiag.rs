//! Symmetric tridiagonal eigensolver (Sturm bisection + inverse iteration) and
//! pivoted tridiagonal LU solves for real and complex shifts.

use num_complex::Complex;
use num_traits::Num;
use rayon::prelude::*;

use crate::scalar::Real;

/// Scalars the pivoted LU can work with.
pub trait Pivotable: Copy + Num + Send + Sync {
    fn modulus(&self) -> f64;
    fn tiny_like(scale: f64) -> Self;
}

impl<T: Real> Pivotable for T {
    fn modulus(&self) -> f64 {
        self.abs().to_f64_lossy()
    }
    fn tiny_like(scale: f64) -> Self {
        T::lit(scale)
    }
}

impl<T: Real> Pivotable for Complex<T> {
    fn modulus(&self) -> f64 {
        self.norm().to_f64_lossy()
    }
    fn tiny_like(scale: f64) -> Self {
        Complex::new(T::lit(scale), T::zero())
    }
}

/// LU factorization with partial pivoting of a general tridiagonal matrix.
#[derive(Debug, Clone)]
pub struct TridiagLu<F> {
    l: Vec<F>,
    d: Vec<F>,
    u1: Vec<F>,
    u2: Vec<F>,
    swapped: Vec<bool>,
    /// Number of pivots that had to be replaced by a tiny value.
    pub zero_pivots: usize,
}

impl<F: Pivotable> TridiagLu<F> {
    /// Factors the matrix with sub-diagonal `sub`, diagonal `diag`, super-diagonal `sup`.
    /// Exactly singular pivots are replaced by `tiny` (inverse iteration relies on this).
    pub fn factor(sub: &[F], diag: &[F], sup: &[F], tiny: f64) -> Self {
        let n = diag.len();
        assert!(n >= 1 && sub.len() + 1 == n && sup.len() + 1 == n);
        let mut l = sub.to_vec();
        let mut d = diag.to_vec();
        let mut u1 = sup.to_vec();
        let mut u2 = vec![F::zero(); n.saturating_sub(2)];
        let mut swapped = vec![false; n.saturating_sub(1)];
        let mut zero_pivots = 0;
        for i in 0..n.saturating_sub(1) {
            if d[i].modulus() >= l[i].modulus() {
                if d[i].modulus() == 0.0 {
                    d[i] = F::tiny_like(tiny);
                    zero_pivots += 1;
                }
                let m = l[i] / d[i];
                l[i] = m;
                d[i + 1] = d[i + 1] - m * u1[i];
            } else {
                let m = d[i] / l[i];
                d[i] = l[i];
                l[i] = m;
                let tmp = u1[i];
                u1[i] = d[i + 1];
                d[i + 1] = tmp - m * d[i + 1];
                if i + 2 < n {
                    u2[i] = u1[i + 1];
                    u1[i + 1] = F::zero() - m * u1[i + 1];
                }
                swapped[i] = true;
            }
        }
        if d[n - 1].modulus() == 0.0 {
            d[n - 1] = F::tiny_like(tiny);
            zero_pivots += 1;
        }
        Self {
            l,
            d,
            u1,
            u2,
            swapped,
            zero_pivots,
        }
    }

    pub fn solve_in_place(&self, x: &mut [F]) {
        let n = self.d.len();
        assert_eq!(x.len(), n);
        for i in 0..n.saturating_sub(1) {
            if self.swapped[i] {
                x.swap(i, i + 1);
            }
            x[i + 1] = x[i + 1] - self.l[i] * x[i];
        }
        x[n - 1] = x[n - 1] / self.d[n - 1];
        if n >= 2 {
            x[n - 2] = (x[n - 2] - self.u1[n - 2] * x[n - 1]) / self.d[n - 2];
        }
        for i in (0..n.saturating_sub(2)).rev() {
            x[i] = (x[i] - self.u1[i] * x[i + 1] - self.u2[i] * x[i + 2]) / self.d[i];
        }
    }
}

/// Which part of the spectrum to compute.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SpectrumWindow<T> {
    All,
    /// Eigenpairs with eigenvalue ≤ the bound.
    AtMost(T),
}

/// Real symmetric tridiagonal matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SymTridiag<T> {
    pub diag: Vec<T>,
    pub off: Vec<T>,
}

/// Eigenpairs in ascending order; vector k occupies `vectors[k*n..(k+1)*n]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TridiagEigen<T> {
    pub values: Vec<T>,
    pub vectors: Vec<T>,
    pub n: usize,
    /// True when every eigenpair of the matrix is present.
    pub complete: bool,
}

impl<T: Real> TridiagEigen<T> {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn vector(&self, k: usize) -> &[T] {
        &self.vectors[k * self.n..(k + 1) * self.n]
    }
}

fn start_vector<T: Real>(k: usize, n: usize) -> Vec<T> {
    // splitmix-style hash so every eigenvector gets a distinct deterministic start
    (0..n)
        .map(|i| {
            let mut z = (k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (i as u64).wrapping_add(0xD1B5_4A32_D192_ED03);
            z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
            z ^= z >> 31;
            T::lit((z >> 11) as f64 / (1u64 << 53) as f64 - 0.5)
        })
        .collect()
}

impl<T: Real> SymTridiag<T> {
    pub fn new(diag: Vec<T>, off: Vec<T>) -> Self {
        assert!(!diag.is_empty() && off.len() + 1 == diag.len());
        Self { diag, off }
    }

    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }

    pub fn matvec(&self, x: &[T]) -> Vec<T> {
        let n = self.len();
        (0..n)
            .map(|i| {
                let mut s = self.diag[i] * x[i];
                if i > 0 {
                    s += self.off[i - 1] * x[i - 1];
                }
                if i + 1 < n {
                    s += self.off[i] * x[i + 1];
                }
                s
            })
            .collect()
    }

    /// Gershgorin enclosure of the spectrum.
    pub fn gershgorin(&self) -> (T, T) {
        let n = self.len();
        let mut lo = T::infinity();
        let mut hi = T::neg_infinity();
        for i in 0..n {
            let mut r = T::zero();
            if i > 0 {
                r += self.off[i - 1].abs();
            }
            if i + 1 < n {
                r += self.off[i].abs();
            }
            lo = lo.min(self.diag[i] - r);
            hi = hi.max(self.diag[i] + r);
        }
        (lo, hi)
    }

    pub fn norm_bound(&self) -> T {
        let (lo, hi) = self.gershgorin();
        lo.abs().max(hi.abs())
    }

    /// Number of eigenvalues strictly below `x`.
    pub fn sturm_count(&self, x: T) -> usize {
        let pivmin = T::min_positive_value() / T::epsilon();
        let mut count = 0;
        let mut q = self.diag[0] - x;
        if q.abs() < pivmin {
            q = -pivmin;
        }
        if q < T::zero() {
            count += 1;
        }
        for i in 1..self.len() {
            q = self.diag[i] - x - self.off[i - 1] * self.off[i - 1] / q;
            if q.abs() < pivmin {
                q = -pivmin;
            }
            if q < T::zero() {
                count += 1;
            }
        }
        count
    }

    /// k-th smallest eigenvalue (0-based) by bisection.
    pub fn eigenvalue(&self, k: usize) -> T {
        assert!(k < self.len());
        let (mut lo, mut hi) = self.gershgorin();
        let norm = lo.abs().max(hi.abs());
        let pad = norm * T::epsilon() * T::lit(4.0) + T::min_positive_value();
        lo -= pad;
        hi += pad;
        let abs_tol = T::epsilon() * norm * T::lit(0.5);
        for _ in 0..200 {
            let mid = (lo + hi) / T::lit(2.0);
            if hi - lo <= abs_tol.max(T::lit(2.0) * T::epsilon() * mid.abs()) {
                break;
            }
            if self.sturm_count(mid) > k {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        (lo + hi) / T::lit(2.0)
    }

    /// Eigenpairs in the window, computed in parallel.
    pub fn eigen(&self, window: SpectrumWindow<T>) -> TridiagEigen<T> {
        let n = self.len();
        let count = match window {
            SpectrumWindow::All => n,
            SpectrumWindow::AtMost(x) => {
                // include eigenvalues equal to the bound
                let (_, hi) = self.gershgorin();
                if x >= hi {
                    n
                } else {
                    self.sturm_count(x + x.abs() * T::epsilon() * T::lit(4.0))
                }
            }
        };
        let values: Vec<T> = (0..count).into_par_iter().map(|k| self.eigenvalue(k)).collect();
        let norm = self.norm_bound();
        let cluster_gap = norm * T::lit(1e-5);
        // group consecutive eigenvalues closer than the gap
        let mut clusters: Vec<(usize, usize)> = Vec::new();
        let mut start = 0;
        for k in 1..=count {
            if k == count || values[k] - values[k - 1] > cluster_gap {
                clusters.push((start, k));
                start = k;
            }
        }
        let blocks: Vec<Vec<T>> = clusters
            .par_iter()
            .map(|&(a, b)| self.cluster_vectors(&values[a..b], a, norm, cluster_gap))
            .collect();
        let mut vectors = Vec::with_capacity(count * n);
        for b in blocks {
            vectors.extend(b);
        }
        TridiagEigen {
            values,
            vectors,
            n,
            complete: count == n,
        }
    }

    fn cluster_vectors(&self, vals: &[T], first: usize, norm: T, gap: T) -> Vec<T> {
        let n = self.len();
        let mut out: Vec<T> = Vec::with_capacity(vals.len() * n);
        let tiny = (T::epsilon() * norm).to_f64_lossy().max(f64::MIN_POSITIVE);
        for (j, &lam) in vals.iter().enumerate() {
            // separate numerically coincident shifts inside a cluster
            let shift = lam + T::lit(10.0) * T::epsilon() * norm * T::from_count(j);
            let d: Vec<T> = self.diag.iter().map(|&x| x - shift).collect();
            let lu = TridiagLu::factor(&self.off, &d, &self.off, tiny);
            let mut x = start_vector::<T>(first + j, n);
            // vectors further than the gap are already orthogonal to working precision
            let near = vals[..j].iter().position(|&v| lam - v <= gap).unwrap_or(j);
            for _ in 0..4 {
                let mut xf: Vec<T> = x.clone();
                lu.solve_in_place(&mut xf);
                // modified Gram-Schmidt against nearby earlier vectors of the cluster, twice
                for _ in 0..2 {
                    for p in near..j {
                        let v = &out[p * n..(p + 1) * n];
                        let dot: T = v.iter().zip(&xf).map(|(a, b)| *a * *b).sum();
                        for (xi, vi) in xf.iter_mut().zip(v) {
                            *xi -= dot * *vi;
                        }
                    }
                }
                let nrm = xf.iter().map(|v| *v * *v).sum::<T>().sqrt();
                for v in xf.iter_mut() {
                    *v /= nrm;
                }
                x = xf;
            }
            let piv = x
                .iter()
                .copied()
                .fold(T::zero(), |m, v| m.max(v.abs()))
                * T::lit(1e-8);
            if let Some(first_big) = x.iter().find(|v| v.abs() > piv) {
                if *first_big < T::zero() {
                    for v in x.iter_mut() {
                        *v = -*v;
                    }
                }
            }
            out.extend(x);
        }
        out
    }
}

/// Solves (A − z) x = b for real symmetric tridiagonal A and complex shift z.
pub fn solve_shifted_complex<T: Real>(
    a: &SymTridiag<T>,
    z: Complex<T>,
    rhs: &[Complex<T>],
) -> Vec<Complex<T>> {
    let off: Vec<Complex<T>> = a.off.iter().map(|&e| Complex::new(e, T::zero())).collect();
    let d: Vec<Complex<T>> = a.diag.iter().map(|&x| Complex::new(x, T::zero()) - z).collect();
    let lu = TridiagLu::factor(&off, &d, &off, f64::MIN_POSITIVE);
    let mut x = rhs.to_vec();
    lu.solve_in_place(&mut x);
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    fn laplacian(n: usize) -> SymTridiag<f64> {
        SymTridiag::new(vec![2.0; n], vec![-1.0; n - 1])
    }

    #[test]
    fn discrete_laplacian_spectrum() {
        let n = 200;
        let t = laplacian(n);
        let e = t.eigen(SpectrumWindow::All);
        for k in 0..n {
            let exact = 2.0 - 2.0 * ((k + 1) as f64 * std::f64::consts::PI / (n + 1) as f64).cos();
            assert!((e.values[k] - exact).abs() < 1e-12, "k={k}");
        }
        // orthonormality
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in 0..=i {
                let d: f64 = e.vector(i).iter().zip(e.vector(j)).map(|(a, b)| a * b).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((d - target).abs());
            }
        }
        assert!(worst < 1e-10, "orthogonality {worst}");
    }

    #[test]
    fn windowed_matches_full() {
        let t = laplacian(300);
        let full = t.eigen(SpectrumWindow::All);
        let part = t.eigen(SpectrumWindow::AtMost(0.5));
        assert!(!part.complete);
        assert_eq!(part.values.len(), full.values.iter().filter(|v| **v <= 0.5).count());
        for k in 0..part.len() {
            assert_eq!(part.vector(k), full.vector(k));
        }
    }

    #[test]
    fn residuals_small() {
        let n = 500;
        let d: Vec<f64> = (0..n).map(|i| 2.0 + 1.0 / (1.0 + i as f64)).collect();
        let t = SymTridiag::new(d, vec![-1.0; n - 1]);
        let e = t.eigen(SpectrumWindow::All);
        for k in (0..n).step_by(37) {
            let v = e.vector(k);
            let av = t.matvec(v);
            let r = av
                .iter()
                .zip(v)
                .map(|(a, b)| (a - e.values[k] * b).abs())
                .fold(0.0, f64::max);
            assert!(r < 1e-12);
        }
    }

    #[test]
    fn pivoted_lu_solves_indefinite() {
        let t = laplacian(50);
        let z = Complex::new(1.3, 1e-3);
        let x0: Vec<Complex<f64>> = (0..50).map(|i| Complex::new(i as f64, 1.0)).collect();
        // b = (A - z) x0
        let ax: Vec<Complex<f64>> = t
            .matvec(&x0.iter().map(|c| c.re).collect::<Vec<_>>())
            .iter()
            .zip(t.matvec(&x0.iter().map(|c| c.im).collect::<Vec<_>>()))
            .zip(&x0)
            .map(|((re, im), x)| Complex::new(*re, im) - z * x)
            .collect();
        let x = solve_shifted_complex(&t, z, &ax);
        for (a, b) in x.iter().zip(&x0) {
            assert!((a - b).norm() < 1e-8);
        }
    }

    #[test]
    fn sturm_count_brackets() {
        let t = laplacian(10);
        assert_eq!(t.sturm_count(-1.0), 0);
        assert_eq!(t.sturm_count(5.0), 10);
    }
}

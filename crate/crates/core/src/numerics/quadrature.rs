//! Gauss–Legendre rules and an adaptive Gauss–Kronrod integrator.

use crate::scalar::Real;

/// Nodes and weights of the `n`-point Gauss–Legendre rule on [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct GaussLegendre<T> {
    pub nodes: Vec<T>,
    pub weights: Vec<T>,
}

/// Legendre polynomial P_n(x) and its derivative.
pub fn legendre_with_derivative<T: Real>(n: usize, x: T) -> (T, T) {
    if n == 0 {
        return (T::one(), T::zero());
    }
    let mut p0 = T::one();
    let mut p1 = x;
    for k in 2..=n {
        let kf = T::from_count(k);
        let p2 = ((T::lit(2.0) * kf - T::one()) * x * p1 - (kf - T::one()) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let nf = T::from_count(n);
    let dp = if (T::one() - x * x).abs() < T::epsilon() {
        // endpoint limit
        let s = if x > T::zero() || n % 2 == 1 { T::one() } else { -T::one() };
        s * nf * (nf + T::one()) / T::lit(2.0)
    } else {
        nf * (x * p1 - p0) / (x * x - T::one())
    };
    (p1, dp)
}

impl<T: Real> GaussLegendre<T> {
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "Gauss-Legendre rule needs at least one node");
        let mut nodes = vec![T::zero(); n];
        let mut weights = vec![T::zero(); n];
        let nf = T::from_count(n);
        for i in 0..n.div_ceil(2) {
            let mut x = (T::PI() * (T::from_count(i) + T::lit(0.75)) / (nf + T::lit(0.5))).cos();
            for _ in 0..100 {
                let (p, dp) = legendre_with_derivative(n, x);
                let dx = p / dp;
                x -= dx;
                if dx.abs() <= T::epsilon() * T::lit(4.0) {
                    break;
                }
            }
            let (_, dp) = legendre_with_derivative(n, x);
            let w = T::lit(2.0) / ((T::one() - x * x) * dp * dp);
            nodes[i] = -x;
            nodes[n - 1 - i] = x;
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        if n % 2 == 1 {
            nodes[n / 2] = T::zero();
        }
        Self { nodes, weights }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Nodes and weights mapped to [a, b].
    pub fn mapped(&self, a: T, b: T) -> impl Iterator<Item = (T, T)> + '_ {
        let half = (b - a) / T::lit(2.0);
        let mid = (a + b) / T::lit(2.0);
        self.nodes
            .iter()
            .zip(self.weights.iter())
            .map(move |(&x, &w)| (mid + half * x, half * w))
    }

    pub fn integrate(&self, a: T, b: T, mut f: impl FnMut(T) -> T) -> T {
        self.mapped(a, b).map(|(x, w)| w * f(x)).sum()
    }

    /// Composite rule over the given panel breakpoints.
    pub fn integrate_panels(&self, breaks: &[T], mut f: impl FnMut(T) -> T) -> T {
        breaks
            .windows(2)
            .map(|ab| self.integrate(ab[0], ab[1], &mut f))
            .sum()
    }
}

/// Geometric breakpoints from `a` to `b` (both positive) with ratio at most `ratio`.
pub fn geometric_breaks<T: Real>(a: T, b: T, ratio: T) -> Vec<T> {
    assert!(a > T::zero() && b > T::zero());
    let (lo, hi, flip) = if a <= b { (a, b, false) } else { (b, a, true) };
    let n = ((hi / lo).ln() / ratio.ln()).ceil().to_usize().unwrap_or(0).max(1);
    let q = (hi / lo).powf(T::one() / T::from_count(n));
    let mut v: Vec<T> = (0..=n).map(|k| lo * q.powi(k as i32)).collect();
    v[0] = lo;
    v[n] = hi;
    if flip {
        v.reverse();
    }
    v
}

// Gauss–Kronrod 7/15 abscissae and weights on [-1, 1] (non-negative half).
const XGK: [f64; 8] = [
    0.991455371120812639206854697526329,
    0.949107912342758524526189684047851,
    0.864864423359769072789712788640926,
    0.741531185599394439863864773280788,
    0.586087235467691130294144845693013,
    0.405845151377397166906606412076961,
    0.207784955007898467600689403773245,
    0.000000000000000000000000000000000,
];
const WGK: [f64; 8] = [
    0.022935322010529224963732008058970,
    0.063092092629978553290700663189204,
    0.104790010322250183839876322541518,
    0.140653259715525918745189590510238,
    0.169004726639267902826583426598550,
    0.190350578064785409913256402421014,
    0.204432940075298892414161999234649,
    0.209482141084727828012999174891714,
];
const WG: [f64; 4] = [
    0.129484966168869693270611432679082,
    0.279705391489276667901467771423780,
    0.381830050505118944950369775488975,
    0.417959183673469387755102040816327,
];

fn gk15<T: Real>(a: T, b: T, f: &mut impl FnMut(T) -> T) -> (T, T) {
    let c = (a + b) / T::lit(2.0);
    let h = (b - a) / T::lit(2.0);
    let fc = f(c);
    let mut rk = fc * T::lit(WGK[7]);
    let mut rg = fc * T::lit(WG[3]);
    for j in 0..7 {
        let dx = h * T::lit(XGK[j]);
        let s = f(c - dx) + f(c + dx);
        rk += T::lit(WGK[j]) * s;
        if j % 2 == 1 {
            rg += T::lit(WG[j / 2]) * s;
        }
    }
    (rk * h, ((rk - rg) * h).abs())
}

/// Globally adaptive Gauss–Kronrod (7,15) quadrature. Returns (value, error estimate).
pub fn adaptive_gk15<T: Real>(
    a: T,
    b: T,
    abs_tol: T,
    rel_tol: T,
    max_intervals: usize,
    mut f: impl FnMut(T) -> T,
) -> (T, T) {
    let mut intervals = vec![{
        let (v, e) = gk15(a, b, &mut f);
        (a, b, v, e)
    }];
    loop {
        let total: T = intervals.iter().map(|x| x.2).sum();
        let err: T = intervals.iter().map(|x| x.3).sum();
        if err <= abs_tol.max(rel_tol * total.abs()) || intervals.len() >= max_intervals {
            return (total, err);
        }
        let (idx, _) = intervals
            .iter()
            .enumerate()
            .max_by(|x, y| x.1 .3.partial_cmp(&y.1 .3).unwrap_or(std::cmp::Ordering::Equal))
            .expect("non-empty");
        let (lo, hi, _, _) = intervals.swap_remove(idx);
        let mid = (lo + hi) / T::lit(2.0);
        let (v1, e1) = gk15(lo, mid, &mut f);
        let (v2, e2) = gk15(mid, hi, &mut f);
        intervals.push((lo, mid, v1, e1));
        intervals.push((mid, hi, v2, e2));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_exactness() {
        let g = GaussLegendre::<f64>::new(5);
        let v = g.integrate(0.0, 2.0, |x| x.powi(9));
        assert!((v - 2f64.powi(10) / 10.0).abs() < 1e-11);
        let w: f64 = g.weights.iter().sum();
        assert!((w - 2.0).abs() < 1e-14);
    }

    #[test]
    fn high_order_rule() {
        let g = GaussLegendre::<f64>::new(64);
        let v = g.integrate(0.0, std::f64::consts::PI, f64::sin);
        assert!((v - 2.0).abs() < 1e-13);
    }

    #[test]
    fn kronrod_oscillatory() {
        let (v, _) = adaptive_gk15(0.0, 10.0, 1e-13, 1e-13, 5000, |x: f64| (20.0 * x).cos());
        assert!((v - (200.0f64).sin() / 20.0).abs() < 1e-11);
    }

    #[test]
    fn geometric_breaks_cover() {
        let b = geometric_breaks(1.0, 1000.0, 2.0);
        assert_eq!(b[0], 1.0);
        assert_eq!(*b.last().unwrap(), 1000.0);
        assert!(b.windows(2).all(|w| w[1] / w[0] <= 2.0 + 1e-12));
    }
}

//! Natural cubic splines, cubic Hermite pieces and local Lagrange interpolation.

use crate::scalar::Real;

/// Natural cubic spline through (x_i, y_i) with strictly increasing x.
#[derive(Debug, Clone, PartialEq)]
pub struct CubicSpline<T> {
    x: Vec<T>,
    y: Vec<T>,
    m: Vec<T>,
}

impl<T: Real> CubicSpline<T> {
    pub fn new(x: Vec<T>, y: Vec<T>) -> Self {
        let n = x.len();
        assert!(n >= 2 && y.len() == n);
        assert!(x.windows(2).all(|w| w[1] > w[0]), "abscissae must increase");
        let mut m = vec![T::zero(); n];
        if n > 2 {
            // tridiagonal system for interior second derivatives (Thomas, diagonally dominant)
            let k = n - 2;
            let mut a = vec![T::zero(); k];
            let mut b = vec![T::zero(); k];
            let mut c = vec![T::zero(); k];
            let mut d = vec![T::zero(); k];
            for i in 0..k {
                let h0 = x[i + 1] - x[i];
                let h1 = x[i + 2] - x[i + 1];
                a[i] = h0;
                b[i] = T::lit(2.0) * (h0 + h1);
                c[i] = h1;
                d[i] = T::lit(6.0) * ((y[i + 2] - y[i + 1]) / h1 - (y[i + 1] - y[i]) / h0);
            }
            for i in 1..k {
                let w = a[i] / b[i - 1];
                b[i] -= w * c[i - 1];
                d[i] = d[i] - w * d[i - 1];
            }
            m[k] = d[k - 1] / b[k - 1];
            for i in (0..k - 1).rev() {
                m[i + 1] = (d[i] - c[i] * m[i + 2]) / b[i];
            }
        }
        Self { x, y, m }
    }

    fn locate(&self, t: T) -> usize {
        let n = self.x.len();
        match self
            .x
            .binary_search_by(|v| v.partial_cmp(&t).unwrap_or(std::cmp::Ordering::Less))
        {
            Ok(i) => i.min(n - 2),
            Err(i) => i.saturating_sub(1).min(n - 2),
        }
    }

    pub fn eval(&self, t: T) -> T {
        let i = self.locate(t);
        let h = self.x[i + 1] - self.x[i];
        let a = (self.x[i + 1] - t) / h;
        let b = (t - self.x[i]) / h;
        let six = T::lit(6.0);
        a * self.y[i]
            + b * self.y[i + 1]
            + ((a * a * a - a) * self.m[i] + (b * b * b - b) * self.m[i + 1]) * h * h / six
    }
}

/// Cumulative integral ∫_{x_0}^{x_i} of sampled data, integrating on each interval
/// the cubic through the four nearest nodes (fourth-order accurate).
pub fn cumulative_integral<T: Real>(x: &[T], y: &[T]) -> Vec<T> {
    let n = x.len();
    assert!(n >= 2 && y.len() == n);
    let mut out = Vec::with_capacity(n);
    let mut acc = T::zero();
    out.push(acc);
    if n < 4 {
        for i in 0..n - 1 {
            acc += (x[i + 1] - x[i]) * (y[i] + y[i + 1]) / T::lit(2.0);
            out.push(acc);
        }
        return out;
    }
    let gl = super::quadrature::GaussLegendre::<T>::new(3);
    for i in 0..n - 1 {
        let s = i.saturating_sub(1).min(n - 4);
        let xs = &x[s..s + 4];
        let ys = &y[s..s + 4];
        acc += gl.integrate(x[i], x[i + 1], |t| {
            lagrange_weights(xs, t)
                .iter()
                .zip(ys)
                .map(|(w, v)| *w * *v)
                .sum()
        });
        out.push(acc);
    }
    out
}

/// Cubic Hermite interpolation on [x0, x1] from values and slopes.
pub fn hermite<T: Real>(x0: T, x1: T, y0: T, y1: T, d0: T, d1: T, t: T) -> T {
    let h = x1 - x0;
    let s = (t - x0) / h;
    let s2 = s * s;
    let s3 = s2 * s;
    let two = T::lit(2.0);
    let three = T::lit(3.0);
    let h00 = two * s3 - three * s2 + T::one();
    let h10 = s3 - two * s2 + s;
    let h01 = -two * s3 + three * s2;
    let h11 = s3 - s2;
    h00 * y0 + h10 * h * d0 + h01 * y1 + h11 * h * d1
}

/// Lagrange weights for the nodes `xs` at `t`.
pub fn lagrange_weights<T: Real>(xs: &[T], t: T) -> Vec<T> {
    (0..xs.len())
        .map(|j| {
            let mut w = T::one();
            for (m, &xm) in xs.iter().enumerate() {
                if m != j {
                    w *= (t - xm) / (xs[j] - xm);
                }
            }
            w
        })
        .collect()
}

/// Start index of a `width`-point stencil on a sorted grid, centred on `t` and clamped.
pub fn stencil_start<T: Real>(grid: &[T], t: T, width: usize) -> usize {
    let n = grid.len();
    assert!(n >= width);
    let i = grid.partition_point(|v| *v <= t);
    let centre = i.saturating_sub(width / 2);
    centre.min(n - width)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spline_reproduces_cubic_interior() {
        let x: Vec<f64> = (0..41).map(|i| i as f64 * 0.1).collect();
        let y: Vec<f64> = x.iter().map(|t| t.sin()).collect();
        let s = CubicSpline::new(x, y);
        assert!((s.eval(2.05) - 2.05f64.sin()).abs() < 1e-5);
    }

    #[test]
    fn cumulative_integral_fourth_order() {
        let err = |n: usize| {
            let x: Vec<f64> = (0..=n).map(|i| 4.0 * i as f64 / n as f64).collect();
            let y: Vec<f64> = x.iter().map(|t| t.sin()).collect();
            (cumulative_integral(&x, &y)[n] - (1.0 - 4f64.cos())).abs()
        };
        let (e1, e2) = (err(40), err(80));
        assert!(e1 < 1e-5);
        assert!(e1 / e2 > 12.0, "order ratio {}", e1 / e2);
        let x: Vec<f64> = (0..41).map(|i| i as f64 * 0.1).collect();
        let c3 = cumulative_integral(&x, &x.iter().map(|t| t * t * t).collect::<Vec<_>>());
        assert!((c3[40] - 64.0).abs() < 1e-11);
    }

    #[test]
    fn hermite_is_exact_for_cubics() {
        let f = |x: f64| x * x * x - 2.0 * x;
        let df = |x: f64| 3.0 * x * x - 2.0;
        let v = hermite(1.0, 2.0, f(1.0), f(2.0), df(1.0), df(2.0), 1.3);
        assert!((v - f(1.3)).abs() < 1e-13);
    }

    #[test]
    fn lagrange_partition_of_unity() {
        let w = lagrange_weights(&[0.0, 1.0, 2.5, 3.0], 1.7);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-14);
    }
}

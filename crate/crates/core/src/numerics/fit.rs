//! Least-squares fits on log-log samples.

use serde::Serialize;
use thiserror::Error;

use crate::scalar::Real;

/// Power-law fit |value| ≈ constant · r^exponent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DecayFit<T> {
    pub exponent: T,
    pub constant: T,
    /// Max relative deviation of |value|·r^(−exponent) from `constant`.
    pub residual: T,
    pub samples: usize,
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum FitError {
    #[error("samples are identically zero; slope undefined")]
    IdenticallyZero,
    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { got: usize, need: usize },
    #[error("abscissae span a factor {span:.3}, need {need}")]
    InsufficientSpan { span: f64, need: f64 },
    #[error("zero or non-finite value at r = {r}")]
    BadValue { r: f64 },
    #[error("abscissa must be positive, got {r}")]
    NonPositiveAbscissa { r: f64 },
}

/// Ordinary least-squares line y = slope·x + intercept.
pub fn linear_fit<T: Real>(xs: &[T], ys: &[T]) -> (T, T) {
    assert_eq!(xs.len(), ys.len());
    let n = T::from_count(xs.len());
    let mx = xs.iter().copied().sum::<T>() / n;
    let my = ys.iter().copied().sum::<T>() / n;
    let mut sxx = T::zero();
    let mut sxy = T::zero();
    for (&x, &y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
    }
    let slope = if sxx > T::zero() { sxy / sxx } else { T::zero() };
    (slope, my - slope * mx)
}

/// Fits |y| = C x^a without span requirements (ladders, scans).
pub fn power_law_fit<T: Real>(xs: &[T], ys: &[T]) -> Result<DecayFit<T>, FitError> {
    if xs.len() < 2 {
        return Err(FitError::TooFewSamples {
            got: xs.len(),
            need: 2,
        });
    }
    if ys.iter().all(|y| *y == T::zero()) {
        return Err(FitError::IdenticallyZero);
    }
    let mut lx = Vec::with_capacity(xs.len());
    let mut ly = Vec::with_capacity(xs.len());
    for (&x, &y) in xs.iter().zip(ys) {
        if x <= T::zero() {
            return Err(FitError::NonPositiveAbscissa { r: x.to_f64_lossy() });
        }
        if y == T::zero() || !y.is_finite() {
            return Err(FitError::BadValue { r: x.to_f64_lossy() });
        }
        lx.push(x.ln());
        ly.push(y.abs().ln());
    }
    let (slope, icpt) = linear_fit(&lx, &ly);
    let constant = icpt.exp();
    let residual = xs
        .iter()
        .zip(ys)
        .map(|(&x, &y)| (y.abs() * x.powf(-slope) / constant - T::one()).abs())
        .fold(T::zero(), T::max);
    Ok(DecayFit {
        exponent: slope,
        constant,
        residual,
        samples: xs.len(),
    })
}

/// j-th derivative of nonuniform samples by repeated three-point differences.
/// Each pass drops the two end samples.
pub fn nonuniform_derivative<T: Real>(samples: &[(T, T)], j: usize) -> Vec<(T, T)> {
    let mut cur: Vec<(T, T)> = samples.to_vec();
    for _ in 0..j {
        if cur.len() < 3 {
            return Vec::new();
        }
        let mut next = Vec::with_capacity(cur.len() - 2);
        for w in cur.windows(3) {
            let (x0, y0) = w[0];
            let (x1, y1) = w[1];
            let (x2, y2) = w[2];
            let h0 = x1 - x0;
            let h1 = x2 - x1;
            let d = -h1 / (h0 * (h0 + h1)) * y0 + (h1 - h0) / (h0 * h1) * y1
                + h0 / (h1 * (h0 + h1)) * y2;
            next.push((x1, d));
        }
        cur = next;
    }
    cur
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_power_law() {
        let xs: Vec<f64> = (0..20).map(|k| 10f64.powf(1.0 + 0.15 * k as f64)).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x.powf(-0.7)).collect();
        let f = power_law_fit(&xs, &ys).unwrap();
        assert!((f.exponent + 0.7).abs() < 1e-12);
        assert!((f.constant - 2.0).abs() < 1e-10);
        assert!(f.residual < 1e-10);
    }

    #[test]
    fn derivative_of_quadratic_is_exact() {
        let s: Vec<(f64, f64)> = [1.0, 1.5, 2.7, 3.0, 4.4].iter().map(|&x| (x, x * x)).collect();
        let d = nonuniform_derivative(&s, 1);
        for (x, v) in d {
            assert!((v - 2.0 * x).abs() < 1e-12);
        }
    }
}

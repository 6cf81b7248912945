//! Adaptive Dormand–Prince 5(4) integrator over fixed-size state arrays.

use thiserror::Error;

use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OdeOptions<T> {
    pub rtol: T,
    pub atol: T,
    /// Initial step; chosen by the usual heuristic when `None`.
    pub h_init: Option<T>,
    pub h_min: T,
    pub max_steps: usize,
}

impl<T: Real> OdeOptions<T> {
    pub fn with_tol(tol: T) -> Self {
        Self {
            rtol: tol,
            atol: tol,
            h_init: None,
            h_min: T::lit(1e-14),
            max_steps: 2_000_000,
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum OdeError {
    #[error("step size underflow at t = {t}")]
    StepUnderflow { t: f64 },
    #[error("step budget exhausted at t = {t}")]
    MaxSteps { t: f64 },
    #[error("non-finite state at t = {t}")]
    NonFinite { t: f64 },
}

// Dormand–Prince tableau.
const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

/// Stateful stepper; the right-hand side is `f(t, y)`.
pub struct Dopri5<T: Real, const N: usize, F>
where
    F: FnMut(T, &[T; N]) -> [T; N],
{
    f: F,
    t: T,
    y: [T; N],
    k1: [T; N],
    h: Option<T>,
    opts: OdeOptions<T>,
    accepted: usize,
    rejected: usize,
}

#[inline]
fn axpy<T: Real, const N: usize>(y: &[T; N], h: T, terms: &[(f64, &[T; N])]) -> [T; N] {
    let mut out = *y;
    for (c, k) in terms {
        let ch = T::lit(*c) * h;
        for i in 0..N {
            out[i] += ch * k[i];
        }
    }
    out
}

impl<T: Real, const N: usize, F> Dopri5<T, N, F>
where
    F: FnMut(T, &[T; N]) -> [T; N],
{
    pub fn new(mut f: F, t0: T, y0: [T; N], opts: OdeOptions<T>) -> Self {
        let k1 = f(t0, &y0);
        Self {
            f,
            t: t0,
            y: y0,
            k1,
            h: opts.h_init,
            opts,
            accepted: 0,
            rejected: 0,
        }
    }

    pub fn t(&self) -> T {
        self.t
    }

    pub fn y(&self) -> &[T; N] {
        &self.y
    }

    pub fn accepted_steps(&self) -> usize {
        self.accepted
    }

    pub fn rejected_steps(&self) -> usize {
        self.rejected
    }

    fn err_norm(&self, y0: &[T; N], y1: &[T; N], e: &[T; N]) -> T {
        let mut acc = T::zero();
        for i in 0..N {
            let sc = self.opts.atol + self.opts.rtol * y0[i].abs().max(y1[i].abs());
            let q = e[i] / sc;
            acc += q * q;
        }
        (acc / T::from_count(N)).sqrt()
    }

    fn initial_step(&mut self, dir: T) -> T {
        let mut d0 = T::zero();
        let mut d1 = T::zero();
        for i in 0..N {
            let sc = self.opts.atol + self.opts.rtol * self.y[i].abs();
            d0 += (self.y[i] / sc).powi(2);
            d1 += (self.k1[i] / sc).powi(2);
        }
        let nn = T::from_count(N);
        d0 = (d0 / nn).sqrt();
        d1 = (d1 / nn).sqrt();
        let h0 = if d0 < T::lit(1e-5) || d1 < T::lit(1e-5) {
            T::lit(1e-6)
        } else {
            T::lit(0.01) * d0 / d1
        };
        let y1 = axpy(&self.y, h0 * dir, &[(1.0, &self.k1)]);
        let k2 = (self.f)(self.t + h0 * dir, &y1);
        let mut d2 = T::zero();
        for i in 0..N {
            let sc = self.opts.atol + self.opts.rtol * self.y[i].abs();
            d2 += ((k2[i] - self.k1[i]) / sc).powi(2);
        }
        d2 = (d2 / nn).sqrt() / h0;
        let h1 = if d1.max(d2) <= T::lit(1e-15) {
            (h0 * T::lit(1e-3)).max(T::lit(1e-6))
        } else {
            (T::lit(0.01) / d1.max(d2)).powf(T::lit(0.2))
        };
        (T::lit(100.0) * h0).min(h1)
    }

    /// Takes one accepted step towards `t_end` without passing it. Returns `true`
    /// once `t_end` has been reached exactly.
    pub fn step(&mut self, t_end: T) -> Result<bool, OdeError> {
        let span = t_end - self.t;
        if span == T::zero() {
            return Ok(true);
        }
        let dir = span.signum();
        let mut h = match self.h {
            Some(h) => h.abs(),
            None => self.initial_step(dir),
        };
        loop {
            if self.accepted + self.rejected >= self.opts.max_steps {
                return Err(OdeError::MaxSteps {
                    t: self.t.to_f64_lossy(),
                });
            }
            let mut last = false;
            if h >= span.abs() {
                h = span.abs();
                last = true;
            }
            if h < self.opts.h_min * (T::one() + self.t.abs()) && !last {
                return Err(OdeError::StepUnderflow {
                    t: self.t.to_f64_lossy(),
                });
            }
            let hs = h * dir;
            let t = self.t;
            let y = self.y;
            let k1 = self.k1;
            let k2 = (self.f)(t + T::lit(C2) * hs, &axpy(&y, hs, &[(A21, &k1)]));
            let k3 = (self.f)(t + T::lit(C3) * hs, &axpy(&y, hs, &[(A31, &k1), (A32, &k2)]));
            let k4 = (self.f)(
                t + T::lit(C4) * hs,
                &axpy(&y, hs, &[(A41, &k1), (A42, &k2), (A43, &k3)]),
            );
            let k5 = (self.f)(
                t + T::lit(C5) * hs,
                &axpy(&y, hs, &[(A51, &k1), (A52, &k2), (A53, &k3), (A54, &k4)]),
            );
            let k6 = (self.f)(
                t + hs,
                &axpy(
                    &y,
                    hs,
                    &[(A61, &k1), (A62, &k2), (A63, &k3), (A64, &k4), (A65, &k5)],
                ),
            );
            let y_new = axpy(
                &y,
                hs,
                &[(A71, &k1), (A73, &k3), (A74, &k4), (A75, &k5), (A76, &k6)],
            );
            let k7 = (self.f)(t + hs, &y_new);
            let e = axpy(
                &[T::zero(); N],
                hs,
                &[(E1, &k1), (E3, &k3), (E4, &k4), (E5, &k5), (E6, &k6), (E7, &k7)],
            );
            let err = self.err_norm(&y, &y_new, &e);
            if !err.is_finite() {
                self.rejected += 1;
                h = h * T::lit(0.25);
                continue;
            }
            if err <= T::one() {
                self.t = if last { t_end } else { t + hs };
                self.y = y_new;
                self.k1 = k7;
                self.accepted += 1;
                let fac = if err == T::zero() {
                    T::lit(5.0)
                } else {
                    (T::lit(0.9) * err.powf(T::lit(-0.2))).min(T::lit(5.0)).max(T::lit(0.2))
                };
                // keep the unclipped step so that a short final step does not shrink the next call
                let h_next = if last { h.max(self.h.map(|x| x.abs()).unwrap_or(h)) } else { h * fac };
                self.h = Some(h_next);
                if !self.y.iter().all(|v| v.is_finite()) {
                    return Err(OdeError::NonFinite {
                        t: self.t.to_f64_lossy(),
                    });
                }
                return Ok(last);
            }
            self.rejected += 1;
            let fac = (T::lit(0.9) * err.powf(T::lit(-0.2))).max(T::lit(0.2));
            h = h * fac;
        }
    }

    /// Integrates to `t_end`, invoking `observe` after every accepted step.
    pub fn advance_to<E>(
        &mut self,
        t_end: T,
        mut observe: impl FnMut(T, &[T; N]) -> Result<(), E>,
    ) -> Result<(), AdvanceError<E>> {
        loop {
            let done = self.step(t_end).map_err(AdvanceError::Ode)?;
            observe(self.t, &self.y).map_err(AdvanceError::Observer)?;
            if done {
                return Ok(());
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AdvanceError<E> {
    Ode(OdeError),
    Observer(E),
}

/// One-shot integration from `t0` to `t1`.
pub fn integrate<T: Real, const N: usize>(
    f: impl FnMut(T, &[T; N]) -> [T; N],
    t0: T,
    y0: [T; N],
    t1: T,
    opts: OdeOptions<T>,
) -> Result<[T; N], OdeError> {
    let mut st = Dopri5::new(f, t0, y0, opts);
    while !st.step(t1)? {}
    Ok(*st.y())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponential_decay() {
        let y = integrate(|_, y: &[f64; 1]| [-y[0]], 0.0, [1.0], 3.0, OdeOptions::with_tol(1e-12))
            .unwrap();
        assert!((y[0] - (-3.0f64).exp()).abs() < 1e-11);
    }

    #[test]
    fn harmonic_oscillator_backwards() {
        let y = integrate(
            |_, y: &[f64; 2]| [y[1], -y[0]],
            0.0,
            [1.0, 0.0],
            -10.0,
            OdeOptions::with_tol(1e-12),
        )
        .unwrap();
        assert!((y[0] - 10f64.cos()).abs() < 1e-9);
        assert!((y[1] - 10f64.sin()).abs() < 1e-9);
    }

    #[test]
    fn single_precision_runs() {
        let y = integrate(|_, y: &[f32; 1]| [y[0]], 0.0f32, [1.0f32], 1.0, OdeOptions::with_tol(1e-6))
            .unwrap();
        assert!((y[0] - std::f32::consts::E).abs() < 1e-4);
    }

    #[test]
    fn stepping_lands_on_target() {
        let mut st = Dopri5::new(|_, y: &[f64; 1]| [y[0]], 0.0, [1.0], OdeOptions::with_tol(1e-10));
        let mut n = 0;
        while !st.step(0.5).unwrap() {
            n += 1;
        }
        assert_eq!(st.t(), 0.5);
        assert!(n < 100);
        st.advance_to(1.0, |_, _| Ok::<(), ()>(())).unwrap();
        assert!((st.y()[0] - 1f64.exp()).abs() < 1e-9);
    }
}

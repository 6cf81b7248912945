//! Numerical checks of dispersive and Strichartz machinery on asymptotically conic model geometries.

pub mod flow;
pub mod dynamics;
pub mod geometry;
pub mod harness;
pub mod numerics;
pub mod oscillatory;
pub mod phase;
pub mod scalar;
pub mod spectral;

/// Working precision of the f64-concrete modules.
pub type F = f64;
pub type C64 = num_complex::Complex64;

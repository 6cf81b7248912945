//! Generic numerical kernels: ODE integration, quadrature, fits, interpolation,
//! tridiagonal linear algebra and the seeded random source.

pub mod fit;
pub mod interp;
pub mod ode;
pub mod quadrature;
pub mod rng;
pub mod tridiag;

pub use fit::{linear_fit, power_law_fit, DecayFit, FitError};
pub use ode::{Dopri5, OdeError, OdeOptions};
pub use quadrature::GaussLegendre;
pub use tridiag::{SpectrumWindow, SymTridiag, TridiagEigen};

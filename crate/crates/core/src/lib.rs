//! Free additive convolution of discrete spectral measures, computed from the
//! subordination system, together with Monte Carlo machinery for the random
//! matrix ensemble `H = A + U B U*`.

pub mod error;
pub mod experiments;
pub mod inversion;
pub mod io;
pub mod measures;
pub mod rmt;
pub mod rng;
pub mod subordination;

pub use error::{Error, Result};
pub use measures::{ComplexPoint, SpectralMeasure};
pub use rmt::{Ensemble, EnsembleDraw, EnsembleSampler, HermitianMatrix};
pub use subordination::{KantorovichDiagnostic, SolverConfig, SubordinationSystem, SubordinationTriple};

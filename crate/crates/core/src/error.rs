use num_complex::Complex64;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty spectrum")]
    EmptySpectrum,

    #[error("non-finite spectral value {0}")]
    NonFinite(f64),

    #[error("invalid measure: {0}")]
    InvalidMeasure(String),

    #[error("evaluation off the upper half-plane at z = {0}")]
    OffUpperHalfPlane(Complex64),

    #[error("subordination argument left C⁺ (argument {0})")]
    ArgumentLeftUpperHalfPlane(Complex64),

    #[error("Jacobian singular at z = {0}")]
    SingularJacobian(Complex64),

    #[error("Newton iteration did not converge at z = {z} after {iterations} iterations (residual {residual:.3e})")]
    NoConvergence {
        z: Complex64,
        iterations: usize,
        residual: f64,
    },

    #[error("spurious branch at z = {z}: m = {m}, S_A = {s_a}, S_B = {s_b}")]
    SpuriousBranch {
        z: Complex64,
        m: Complex64,
        s_a: Complex64,
        s_b: Complex64,
    },

    #[error("continuation failed at E = {e}, eta = {eta:.3e} (last residual {residual:.3e})")]
    ContinuationFailed { e: f64, eta: f64, residual: f64 },

    #[error("support not covered: recovered mass {0:.4}")]
    SupportNotCovered(f64),

    #[error("CDF grid [{lo}, {hi}] does not cover spectral value {value}")]
    Coverage { lo: f64, hi: f64, value: f64 },

    #[error("N = {n} incompatible with weights: weight {weight} of atom {atom} gives {count} eigenvalues")]
    IncompatibleDimension {
        n: usize,
        atom: f64,
        weight: f64,
        count: f64,
    },

    #[error("eigenvalue {value} outside the Weyl interval [{lo}, {hi}]")]
    SpectrumOutsideBounds { value: f64, lo: f64, hi: f64 },

    #[error("Jacobi eigensolver did not converge after {0} sweeps")]
    EigenNoConvergence(usize),

    #[error("resolvent solve failed at z = {0}")]
    SingularResolvent(Complex64),

    #[error("resolvent identity violated at z = {z}: |z m_H + 1 - f_A - f_B| = {gap:.3e}")]
    ResolventIdentity { z: Complex64, gap: f64 },

    #[error("outside the stable regime: multiplier norm {0:.3} exceeds 2")]
    OutsideStableRegime(f64),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("replicate {index}: {source}")]
    Replicate {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of the numerical machinery, as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::Replicate { source, .. } => source.is_numerical(),
            Error::ArgumentLeftUpperHalfPlane(_)
            | Error::SingularJacobian(_)
            | Error::NoConvergence { .. }
            | Error::SpuriousBranch { .. }
            | Error::ContinuationFailed { .. }
            | Error::SupportNotCovered(_)
            | Error::SpectrumOutsideBounds { .. }
            | Error::EigenNoConvergence(_)
            | Error::SingularResolvent(_)
            | Error::ResolventIdentity { .. }
            | Error::OutsideStableRegime(_) => true,
            _ => false,
        }
    }
}

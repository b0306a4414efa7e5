//! The random ensemble `H = A + U B U*` with Haar `U`.
//!
//! `A` and `B` are realized as diagonal matrices carrying the atoms of their
//! measures with multiplicities `w_i N`. Conjugation invariance of the Haar
//! law means nothing is lost by this choice.

mod eigen;
mod haar;
mod resolvent;

pub use eigen::{eig_hermitian, eigvals_fast, JACOBI_MAX_SWEEPS, JACOBI_REL_TOL};
pub use haar::{haar_orthogonal, haar_unitary};
pub(crate) use resolvent::pv_identity_gap_streams;
pub use resolvent::{pv_identity_gap, resolvent_snapshot, IdentityGap, Resolvent, ResolventSnapshot};

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measures::SpectralMeasure;
use crate::rng::{substream, StreamRng};

const HERMITIAN_TOL: f64 = 1e-12;
const MULTIPLICITY_TOL: f64 = 1e-6;
const CONTAINMENT_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct HermitianMatrix(DMatrix<Complex64>);

impl HermitianMatrix {
    /// Accepts a square matrix that is Hermitian up to rounding and
    /// symmetrizes it exactly.
    pub fn from_matrix(m: DMatrix<Complex64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::InvalidConfig(format!("matrix is {}x{}, not square", m.nrows(), m.ncols())));
        }
        let scale = m.norm().max(1.0);
        let defect = (&m - m.adjoint()).norm();
        if defect > HERMITIAN_TOL * scale {
            return Err(Error::InvalidConfig(format!("matrix not Hermitian (defect {defect:.3e})")));
        }
        Ok(Self::hermitize(m))
    }

    fn hermitize(m: DMatrix<Complex64>) -> Self {
        let half = Complex64::new(0.5, 0.0);
        Self((&m + m.adjoint()) * half)
    }

    pub fn diagonal(values: &[f64]) -> Self {
        let n = values.len();
        Self(DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                Complex64::new(values[i], 0.0)
            } else {
                Complex64::new(0.0, 0.0)
            }
        }))
    }

    /// Diagonal matrix realizing `mu` in dimension `n`.
    pub fn from_measure(mu: &SpectralMeasure, n: usize) -> Result<Self> {
        Ok(Self::diagonal(&diagonal_realization(mu, n)?))
    }

    /// `U diag(d) U*`.
    ///
    /// Formed from four real products of the real and imaginary parts, which
    /// run far faster than the generic complex product.
    pub fn conjugate_diagonal(u: &DMatrix<Complex64>, d: &[f64]) -> Self {
        let ur = u.map(|x| x.re);
        let ui = u.map(|x| x.im);
        let mut wr = ur.clone();
        let mut wi = ui.clone();
        for (j, &dj) in d.iter().enumerate() {
            wr.column_mut(j).scale_mut(dj);
            wi.column_mut(j).scale_mut(dj);
        }
        let urt = ur.transpose();
        let uit = ui.transpose();
        let re = &wr * &urt + &wi * &uit;
        let im = &wi * &urt - &wr * &uit;
        let m = DMatrix::from_fn(u.nrows(), u.nrows(), |i, j| Complex64::new(re[(i, j)], im[(i, j)]));
        Self::hermitize(m)
    }

    /// `O diag(d) Oᵀ` for real orthogonal `O`.
    pub fn conjugate_diagonal_real(o: &DMatrix<f64>, d: &[f64]) -> Self {
        let mut od = o.clone();
        for (j, &dj) in d.iter().enumerate() {
            od.column_mut(j).scale_mut(dj);
        }
        let prod = od * o.transpose();
        let sym = (&prod + prod.transpose()) * 0.5;
        Self(sym.map(|x| Complex64::new(x, 0.0)))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn entry(&self, i: usize, j: usize) -> Complex64 {
        self.0[(i, j)]
    }

    pub fn as_matrix(&self) -> &DMatrix<Complex64> {
        &self.0
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim()).map(|i| self.0[(i, i)].re).sum()
    }

    /// `tr(self · other)`, real for Hermitian arguments.
    pub fn trace_product(&self, other: &HermitianMatrix) -> f64 {
        self.0.iter().zip(other.0.transpose().iter()).map(|(a, b)| (a * b).re).sum()
    }

    pub fn add(&self, other: &HermitianMatrix) -> HermitianMatrix {
        Self(&self.0 + &other.0)
    }

    pub fn is_diagonal(&self) -> bool {
        let n = self.dim();
        (0..n).all(|j| (0..n).all(|i| i == j || self.0[(i, j)] == Complex64::new(0.0, 0.0)))
    }

    pub fn diagonal_values(&self) -> Vec<f64> {
        (0..self.dim()).map(|i| self.0[(i, i)].re).collect()
    }
}

/// Multiplicity of each atom of `mu` in dimension `n`.
///
/// Every `w_i n` must be an integer to within `1e-6`; the counts are then
/// fixed by largest-remainder rounding so that they sum to `n` exactly.
pub fn multiplicities(mu: &SpectralMeasure, n: usize) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::InvalidConfig("N must be at least 1".into()));
    }
    let mut counts = Vec::with_capacity(mu.len());
    let mut remainders = Vec::with_capacity(mu.len());
    for (atom, weight) in mu.iter() {
        let exact = weight * n as f64;
        let nearest = exact.round();
        if (exact - nearest).abs() > MULTIPLICITY_TOL * exact.max(1.0) {
            return Err(Error::IncompatibleDimension { n, atom, weight, count: exact });
        }
        counts.push(exact.floor() as usize);
        remainders.push(exact - exact.floor());
    }
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&i, &j| remainders[j].total_cmp(&remainders[i]).then(i.cmp(&j)));
    let missing = n.checked_sub(assigned).ok_or_else(|| {
        Error::InvalidConfig(format!("multiplicities exceed N = {n}"))
    })?;
    if missing > order.len() {
        return Err(Error::InvalidConfig(format!("cannot realize measure in N = {n}")));
    }
    for &i in order.iter().take(missing) {
        counts[i] += 1;
    }
    for (k, (atom, weight)) in mu.iter().enumerate() {
        if counts[k] == 0 {
            return Err(Error::IncompatibleDimension { n, atom, weight, count: weight * n as f64 });
        }
    }
    Ok(counts)
}

/// Ascending diagonal realizing `mu` in dimension `n`.
pub fn diagonal_realization(mu: &SpectralMeasure, n: usize) -> Result<Vec<f64>> {
    let counts = multiplicities(mu, n)?;
    Ok(mu
        .atoms()
        .iter()
        .zip(counts)
        .flat_map(|(&a, c)| std::iter::repeat_n(a, c))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ensemble {
    #[default]
    Unitary,
    Orthogonal,
}

impl fmt::Display for Ensemble {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ensemble::Unitary => "unitary",
            Ensemble::Orthogonal => "orthogonal",
        })
    }
}

impl FromStr for Ensemble {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unitary" => Ok(Ensemble::Unitary),
            "orthogonal" => Ok(Ensemble::Orthogonal),
            other => Err(Error::InvalidConfig(format!("unknown ensemble '{other}'"))),
        }
    }
}

/// One realization of the ensemble.
#[derive(Debug, Clone, Serialize)]
pub struct EnsembleDraw {
    pub seed: u64,
    pub replicate: u64,
    pub eigenvalues: Vec<f64>,
    #[serde(skip)]
    pub b_tilde: Option<HermitianMatrix>,
    #[serde(skip)]
    pub h: Option<HermitianMatrix>,
}

/// Fixed `A`, `B` and ensemble flavour; produces draws of `H`.
#[derive(Debug, Clone)]
pub struct EnsembleSampler {
    a: HermitianMatrix,
    a_diag: Option<Vec<f64>>,
    b: Vec<f64>,
    ensemble: Ensemble,
    bounds: (f64, f64),
}

impl EnsembleSampler {
    pub fn new(mu_a: &SpectralMeasure, mu_b: &SpectralMeasure, n: usize, ensemble: Ensemble) -> Result<Self> {
        let a = diagonal_realization(mu_a, n)?;
        let b = diagonal_realization(mu_b, n)?;
        let bounds = (a[0] + b[0], a[n - 1] + b[n - 1]);
        Ok(Self { a: HermitianMatrix::diagonal(&a), a_diag: Some(a), b, ensemble, bounds })
    }

    /// General Hermitian `A` with diagonal `B`.
    pub fn with_matrices(a: HermitianMatrix, b: Vec<f64>, ensemble: Ensemble) -> Result<Self> {
        if a.dim() != b.len() || b.is_empty() {
            return Err(Error::InvalidConfig("A and B must have the same positive dimension".into()));
        }
        let spec_a = eigvals_fast(&a);
        let b_min = b.iter().copied().fold(f64::INFINITY, f64::min);
        let b_max = b.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let bounds = (spec_a[0] + b_min, spec_a[spec_a.len() - 1] + b_max);
        let a_diag = a.is_diagonal().then(|| a.diagonal_values());
        Ok(Self { a, a_diag, b, ensemble, bounds })
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }

    pub fn ensemble(&self) -> Ensemble {
        self.ensemble
    }

    pub fn a(&self) -> &HermitianMatrix {
        &self.a
    }

    pub fn a_diagonal(&self) -> Option<&[f64]> {
        self.a_diag.as_deref()
    }

    pub fn b_diagonal(&self) -> &[f64] {
        &self.b
    }

    /// Weyl bounds on the spectrum of `H`.
    pub fn spectral_bounds(&self) -> (f64, f64) {
        self.bounds
    }

    /// `U B U*` for a fresh Haar `U` from `rng`.
    pub fn conjugated_b(&self, rng: &mut StreamRng) -> HermitianMatrix {
        let n = self.dim();
        match self.ensemble {
            Ensemble::Unitary => HermitianMatrix::conjugate_diagonal(&haar_unitary(n, rng), &self.b),
            Ensemble::Orthogonal => HermitianMatrix::conjugate_diagonal_real(&haar_orthogonal(n, rng), &self.b),
        }
    }

    /// `(U B U*, H)` for replicate `replicate` of `seed`.
    pub fn realize(&self, seed: u64, replicate: u64) -> (HermitianMatrix, HermitianMatrix) {
        let b_tilde = self.conjugated_b(&mut substream(seed, replicate));
        let h = self.a.add(&b_tilde);
        (b_tilde, h)
    }

    pub fn draw(&self, seed: u64, replicate: u64) -> Result<EnsembleDraw> {
        let mut d = self.draw_with_matrices(seed, replicate)?;
        d.b_tilde = None;
        d.h = None;
        Ok(d)
    }

    pub fn draw_with_matrices(&self, seed: u64, replicate: u64) -> Result<EnsembleDraw> {
        let (b_tilde, h) = self.realize(seed, replicate);
        let eigenvalues = eigvals_fast(&h);
        let (lo, hi) = self.bounds;
        let slack = CONTAINMENT_TOL * (1.0 + lo.abs().max(hi.abs()));
        if let Some(&bad) = eigenvalues.iter().find(|&&x| x < lo - slack || x > hi + slack) {
            return Err(Error::SpectrumOutsideBounds { value: bad, lo, hi });
        }
        Ok(EnsembleDraw { seed, replicate, eigenvalues, b_tilde: Some(b_tilde), h: Some(h) })
    }
}

/// Single draw, replicate 0 of `seed`.
pub fn draw(
    mu_a: &SpectralMeasure,
    mu_b: &SpectralMeasure,
    n: usize,
    seed: u64,
    ensemble: Ensemble,
) -> Result<EnsembleDraw> {
    EnsembleSampler::new(mu_a, mu_b, n, ensemble)?.draw(seed, 0)
}

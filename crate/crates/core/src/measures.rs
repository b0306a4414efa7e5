//! Discrete spectral measures and their Stieltjes transforms.
//!
//! A [`SpectralMeasure`] is a finite sum of weighted point masses. It is the
//! input type of the subordination solver and the random-matrix sampler, and
//! it also stores empirical spectra of sampled matrices.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Atoms closer than this are treated as one eigenvalue.
pub const MERGE_TOL: f64 = 1e-12;

/// Weights supplied explicitly may be off by this much before renormalization.
const WEIGHT_SUM_TOL: f64 = 1e-6;

/// A point `E + i·eta` of the complex plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComplexPoint {
    pub e: f64,
    pub eta: f64,
}

impl ComplexPoint {
    pub fn new(e: f64, eta: f64) -> Self {
        Self { e, eta }
    }

    pub fn z(self) -> Complex64 {
        Complex64::new(self.e, self.eta)
    }
}

impl From<ComplexPoint> for Complex64 {
    fn from(p: ComplexPoint) -> Self {
        p.z()
    }
}

impl From<Complex64> for ComplexPoint {
    fn from(z: Complex64) -> Self {
        Self { e: z.re, eta: z.im }
    }
}

/// Probability measure `Σ w_k δ_{λ_k}` with strictly increasing atoms.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralMeasure {
    atoms: Vec<f64>,
    weights: Vec<f64>,
}

impl SpectralMeasure {
    /// Builds a measure from explicit atoms and weights.
    ///
    /// Atoms may be given in any order; coincident atoms are merged. Weights
    /// must be positive and sum to one up to `1e-6`; they are renormalized.
    pub fn new(atoms: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::EmptySpectrum);
        }
        if atoms.len() != weights.len() {
            return Err(Error::InvalidMeasure(format!(
                "{} atoms but {} weights",
                atoms.len(),
                weights.len()
            )));
        }
        if let Some(&bad) = atoms.iter().chain(&weights).find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(bad));
        }
        if let Some(&w) = weights.iter().find(|&&w| w <= 0.0) {
            return Err(Error::InvalidMeasure(format!("non-positive weight {w}")));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::InvalidMeasure(format!(
                "weights sum to {total}, expected 1"
            )));
        }
        let mut pairs: Vec<(f64, f64)> = atoms.into_iter().zip(weights).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        Ok(Self::from_sorted_pairs(pairs))
    }

    /// Empirical measure with mass `1/N` per value.
    pub fn from_eigenvalues(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptySpectrum);
        }
        if let Some(&bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(bad));
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        Ok(Self::from_sorted_pairs(
            sorted.into_iter().map(|v| (v, 1.0)).collect(),
        ))
    }

    /// The point mass at `a`.
    pub fn dirac(a: f64) -> Self {
        Self {
            atoms: vec![a],
            weights: vec![1.0],
        }
    }

    /// Equal-weight measure on the given values (duplicates merged).
    pub fn uniform(values: &[f64]) -> Result<Self> {
        Self::from_eigenvalues(values)
    }

    // Pairs must be sorted by atom. Weights are relative; they are merged,
    // then normalized once.
    fn from_sorted_pairs(pairs: Vec<(f64, f64)>) -> Self {
        let mut atoms: Vec<f64> = Vec::with_capacity(pairs.len());
        let mut weights: Vec<f64> = Vec::with_capacity(pairs.len());
        for (x, w) in pairs {
            match atoms.last() {
                Some(&prev) if x - prev <= MERGE_TOL => *weights.last_mut().unwrap() += w,
                _ => {
                    atoms.push(x);
                    weights.push(w);
                }
            }
        }
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        Self { atoms, weights }
    }

    pub fn atoms(&self) -> &[f64] {
        &self.atoms
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.atoms.iter().copied().zip(self.weights.iter().copied())
    }

    /// `max |λ|`, the operator-norm bound K of the matrix realizing the measure.
    pub fn norm_bound(&self) -> f64 {
        self.atoms.iter().fold(0.0, |acc, a| acc.max(a.abs()))
    }

    pub fn min_atom(&self) -> f64 {
        self.atoms[0]
    }

    pub fn max_atom(&self) -> f64 {
        self.atoms[self.atoms.len() - 1]
    }

    pub fn mean(&self) -> f64 {
        self.moment(1)
    }

    pub fn variance(&self) -> f64 {
        let mean = self.mean();
        self.iter().map(|(x, w)| w * (x - mean).powi(2)).sum()
    }

    /// `Σ w_i λ_i^k`.
    pub fn moment(&self, k: u32) -> f64 {
        self.iter().map(|(x, w)| w * x.powi(k as i32)).sum()
    }

    /// Mass of the atom at `x`, or zero.
    pub fn mass_at(&self, x: f64) -> f64 {
        self.iter()
            .find(|(a, _)| (a - x).abs() <= MERGE_TOL)
            .map_or(0.0, |(_, w)| w)
    }

    /// Stieltjes transform `m(z) = Σ w_k / (λ_k − z)`.
    pub fn stieltjes(&self, z: Complex64) -> Result<Complex64> {
        if !(z.im > 0.0) {
            return Err(Error::OffUpperHalfPlane(z));
        }
        Ok(self.stieltjes_unchecked(z))
    }

    /// Transform and its derivative `m'(z) = Σ w_k / (λ_k − z)²`, without the
    /// half-plane check.
    pub(crate) fn stieltjes_with_derivative(&self, z: Complex64) -> (Complex64, Complex64) {
        let mut m = Complex64::new(0.0, 0.0);
        let mut dm = Complex64::new(0.0, 0.0);
        for (x, w) in self.iter() {
            let r = (Complex64::new(x, 0.0) - z).inv();
            m += w * r;
            dm += w * r * r;
        }
        (m, dm)
    }

    pub(crate) fn stieltjes_unchecked(&self, z: Complex64) -> Complex64 {
        self.iter()
            .map(|(x, w)| w * (Complex64::new(x, 0.0) - z).inv())
            .sum()
    }

    /// `μ((−∞, x])`.
    pub fn cdf(&self, x: f64) -> f64 {
        let idx = self.atoms.partition_point(|&a| a <= x);
        self.weights[..idx].iter().sum::<f64>().min(1.0)
    }

    /// The measure translated by `a`.
    pub fn shift(&self, a: f64) -> Self {
        Self {
            atoms: self.atoms.iter().map(|x| x + a).collect(),
            weights: self.weights.clone(),
        }
    }
}

/// On-disk JSON form of a measure.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MeasureFile {
    Weighted { atoms: Vec<f64>, weights: Vec<f64> },
    Eigenvalues { eigenvalues: Vec<f64> },
}

impl TryFrom<MeasureFile> for SpectralMeasure {
    type Error = Error;

    fn try_from(file: MeasureFile) -> Result<Self> {
        match file {
            MeasureFile::Weighted { atoms, weights } => SpectralMeasure::new(atoms, weights),
            MeasureFile::Eigenvalues { eigenvalues } => {
                SpectralMeasure::from_eigenvalues(&eigenvalues)
            }
        }
    }
}

impl From<&SpectralMeasure> for MeasureFile {
    fn from(mu: &SpectralMeasure) -> Self {
        MeasureFile::Weighted {
            atoms: mu.atoms.clone(),
            weights: mu.weights.clone(),
        }
    }
}

impl SpectralMeasure {
    pub fn from_json(text: &str) -> Result<Self> {
        let file: MeasureFile = serde_json::from_str(text)?;
        file.try_into()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&MeasureFile::from(self)).expect("measure serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn bernoulli() -> SpectralMeasure {
        SpectralMeasure::from_eigenvalues(&[-1.0, 1.0]).unwrap()
    }

    #[test]
    fn merges_duplicates() {
        let mu = SpectralMeasure::from_eigenvalues(&[0.0, 0.0, 1.0, 1.0]).unwrap();
        assert_eq!(mu.atoms(), &[0.0, 1.0]);
        assert_eq!(mu.weights(), &[0.5, 0.5]);

        let mu = SpectralMeasure::from_eigenvalues(&[3.0]).unwrap();
        assert_eq!(mu.atoms(), &[3.0]);
        assert_eq!(mu.weights(), &[1.0]);

        let mu = bernoulli();
        assert_eq!(mu.atoms(), &[-1.0, 1.0]);
        assert_eq!(mu.weights(), &[0.5, 0.5]);

        let mu = SpectralMeasure::from_eigenvalues(&[1.0, 1.0 + 1e-13, 2.0]).unwrap();
        assert_eq!(mu.len(), 2);
        assert_abs_diff_eq!(mu.weights()[0], 2.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(
            SpectralMeasure::from_eigenvalues(&[]),
            Err(Error::EmptySpectrum)
        ));
        assert!(matches!(
            SpectralMeasure::from_eigenvalues(&[1.0, f64::NAN]),
            Err(Error::NonFinite(_))
        ));
        assert!(SpectralMeasure::new(vec![0.0, 1.0], vec![0.5, 0.4]).is_err());
        assert!(SpectralMeasure::new(vec![0.0, 1.0], vec![1.0, 0.0]).is_err());
        assert!(SpectralMeasure::new(vec![0.0], vec![0.5, 0.5]).is_err());
    }

    #[test]
    fn explicit_weights_are_sorted_and_merged() {
        let mu = SpectralMeasure::new(vec![2.0, -1.0, 2.0], vec![0.25, 0.5, 0.25]).unwrap();
        assert_eq!(mu.atoms(), &[-1.0, 2.0]);
        assert_eq!(mu.weights(), &[0.5, 0.5]);
    }

    #[test]
    fn stieltjes_examples() {
        let i = Complex64::i();
        let m = SpectralMeasure::dirac(0.0).stieltjes(i).unwrap();
        assert_abs_diff_eq!((m - i).norm(), 0.0, epsilon = 1e-15);

        let m = bernoulli().stieltjes(i).unwrap();
        assert_abs_diff_eq!((m - 0.5 * i).norm(), 0.0, epsilon = 1e-15);

        let z = Complex64::new(0.3, 0.7);
        let m = SpectralMeasure::dirac(2.5).stieltjes(z).unwrap();
        assert_abs_diff_eq!((m + (z - 2.5).inv()).norm(), 0.0, epsilon = 1e-15);

        assert!(matches!(
            bernoulli().stieltjes(Complex64::new(0.0, 0.0)),
            Err(Error::OffUpperHalfPlane(_))
        ));
        assert!(bernoulli().stieltjes(Complex64::new(1.0, -1.0)).is_err());
    }

    #[test]
    fn derivative_matches_finite_difference() {
        let mu = SpectralMeasure::new(vec![-1.0, 0.2, 3.0], vec![0.2, 0.3, 0.5]).unwrap();
        let z = Complex64::new(0.4, 0.3);
        let h = 1e-6;
        let (_, dm) = mu.stieltjes_with_derivative(z);
        let fd = (mu.stieltjes_unchecked(z + h) - mu.stieltjes_unchecked(z - h)) / (2.0 * h);
        assert!((dm - fd).norm() / dm.norm() < 1e-8);
    }

    #[test]
    fn cdf_examples() {
        let d = SpectralMeasure::dirac(0.0);
        assert_eq!(d.cdf(-0.1), 0.0);
        assert_eq!(d.cdf(0.0), 1.0);
        assert_eq!(bernoulli().cdf(0.0), 0.5);
        assert_eq!(bernoulli().cdf(f64::INFINITY), 1.0);
    }

    #[test]
    fn moment_examples() {
        assert_eq!(bernoulli().moment(1), 0.0);
        assert_eq!(bernoulli().moment(2), 1.0);
        assert_abs_diff_eq!(SpectralMeasure::dirac(1.7).moment(2), 1.7 * 1.7);
        assert_eq!(bernoulli().variance(), 1.0);
    }

    #[test]
    fn shift_examples() {
        assert_eq!(SpectralMeasure::dirac(0.0).shift(2.0).atoms(), &[2.0]);
        assert_eq!(bernoulli().shift(0.0), bernoulli());
        let mu = SpectralMeasure::from_eigenvalues(&[0.0, 1.0]).unwrap().shift(-0.5);
        assert_eq!(mu.atoms(), &[-0.5, 0.5]);
    }

    #[test]
    fn json_forms() {
        let mu = SpectralMeasure::from_json(r#"{"eigenvalues":[1,1,-1,-1]}"#).unwrap();
        assert_eq!(mu, bernoulli());
        let mu = SpectralMeasure::from_json(r#"{"atoms":[-1,1],"weights":[0.5,0.5]}"#).unwrap();
        assert_eq!(mu, bernoulli());
        assert!(SpectralMeasure::from_json(r#"{"atoms":[1]}"#).is_err());
        assert!(SpectralMeasure::from_json(r#"{"eigenvalues":[]}"#).is_err());
    }

    #[test]
    fn large_eta_asymptotics() {
        let mu = SpectralMeasure::new(vec![-2.0, 0.5, 1.0], vec![0.3, 0.3, 0.4]).unwrap();
        for eta in [1e3, 1e5, 1e7] {
            let z = Complex64::new(0.0, eta);
            let scaled = mu.stieltjes(z).unwrap() * (-z);
            assert!((scaled - 1.0).norm() < 5.0 / eta);
        }
    }

    fn measure_strategy() -> impl Strategy<Value = SpectralMeasure> {
        prop::collection::vec((-5.0f64..5.0, 0.01f64..1.0), 1..12).prop_map(|pairs| {
            let total: f64 = pairs.iter().map(|p| p.1).sum();
            let (atoms, weights) = pairs.into_iter().map(|(a, w)| (a, w / total)).unzip();
            SpectralMeasure::new(atoms, weights).unwrap()
        })
    }

    proptest! {
        #[test]
        fn transform_maps_into_upper_half_plane(
            mu in measure_strategy(), e in -10.0f64..10.0, eta in 1e-3f64..50.0
        ) {
            let m = mu.stieltjes(Complex64::new(e, eta)).unwrap();
            prop_assert!(m.im > 0.0);
            prop_assert!(m.norm() <= 1.0 / eta * (1.0 + 1e-12));
        }

        #[test]
        fn measure_invariants(mu in measure_strategy()) {
            prop_assert!((mu.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(mu.weights().iter().all(|&w| w > 0.0));
            prop_assert!(mu.atoms().windows(2).all(|p| p[1] > p[0]));
            prop_assert!((mu.cdf(mu.norm_bound()) - 1.0).abs() < 1e-12);
            let xs: Vec<f64> = (0..50).map(|i| -6.0 + 0.25 * i as f64).collect();
            prop_assert!(xs.windows(2).all(|p| mu.cdf(p[0]) <= mu.cdf(p[1])));
        }

        #[test]
        fn empirical_moments_are_power_sums(
            values in prop::collection::vec(-3.0f64..3.0, 1..40)
        ) {
            let mu = SpectralMeasure::from_eigenvalues(&values).unwrap();
            let n = values.len() as f64;
            for k in 0..=4 {
                let direct: f64 = values.iter().map(|v| v.powi(k as i32)).sum::<f64>() / n;
                prop_assert!((mu.moment(k) - direct).abs() < 1e-12);
            }
        }

        #[test]
        fn json_round_trip(mu in measure_strategy()) {
            let back = SpectralMeasure::from_json(&mu.to_json()).unwrap();
            for (a, b) in mu.iter().zip(back.iter()) {
                prop_assert!((a.0 - b.0).abs() <= 1e-15 && (a.1 - b.1).abs() <= 1e-15);
            }
        }
    }
}

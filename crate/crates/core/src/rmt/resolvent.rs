//! Resolvent functionals of a single draw and the Monte Carlo check of the
//! matrix identity `E(m_H G_H) = E(m_H G_A − G_A f_B G_H)`.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::Serialize;

use super::{Ensemble, EnsembleSampler, HermitianMatrix};
use crate::error::{Error, Result};
use crate::measures::{ComplexPoint, SpectralMeasure};

const IDENTITY_TOL: f64 = 1e-10;
const PV_BATCHES: usize = 10;

#[derive(Debug, Clone, Copy, Serialize)]
pub struct ResolventSnapshot {
    pub z: ComplexPoint,
    pub m_h: Complex64,
    pub f_a: Complex64,
    pub f_b: Complex64,
}

impl ResolventSnapshot {
    /// `|z m_H + 1 − f_A − f_B|`.
    pub fn identity_residual(&self) -> f64 {
        (self.z.z() * self.m_h + 1.0 - self.f_a - self.f_b).norm()
    }
}

/// Snapshot together with the full resolvent `G_H`.
#[derive(Debug, Clone)]
pub struct Resolvent {
    pub snapshot: ResolventSnapshot,
    pub g_h: DMatrix<Complex64>,
}

fn trace_product(a: &DMatrix<Complex64>, g: &DMatrix<Complex64>) -> Complex64 {
    let n = a.nrows();
    let mut s = Complex64::new(0.0, 0.0);
    for j in 0..n {
        for i in 0..n {
            s += a[(i, j)] * g[(j, i)];
        }
    }
    s
}

impl Resolvent {
    pub fn compute(a: &HermitianMatrix, b_tilde: &HermitianMatrix, z: Complex64) -> Result<Self> {
        if !(z.im > 0.0) || !z.re.is_finite() {
            return Err(Error::OffUpperHalfPlane(z));
        }
        if a.dim() != b_tilde.dim() {
            return Err(Error::InvalidConfig("A and B̃ differ in dimension".into()));
        }
        let n = a.dim();
        let nf = n as f64;
        let mut shifted = a.as_matrix() + b_tilde.as_matrix();
        for i in 0..n {
            shifted[(i, i)] -= z;
        }
        let g_h = shifted.try_inverse().ok_or(Error::SingularResolvent(z))?;
        let m_h = g_h.trace() / nf;
        let f_a = if a.is_diagonal() {
            (0..n).map(|i| a.entry(i, i) * g_h[(i, i)]).sum::<Complex64>() / nf
        } else {
            trace_product(a.as_matrix(), &g_h) / nf
        };
        let f_b = trace_product(b_tilde.as_matrix(), &g_h) / nf;
        let snapshot = ResolventSnapshot { z: ComplexPoint::new(z.re, z.im), m_h, f_a, f_b };
        let gap = snapshot.identity_residual();
        if gap > IDENTITY_TOL * (1.0 / z.im).max(1.0) || !(m_h.im > 0.0) {
            return Err(Error::ResolventIdentity { z, gap });
        }
        Ok(Self { snapshot, g_h })
    }
}

/// `m_H`, `f_A`, `f_B` of `H = A + B̃` at `z`, with the trace identity checked.
pub fn resolvent_snapshot(a: &HermitianMatrix, b_tilde: &HermitianMatrix, z: Complex64) -> Result<ResolventSnapshot> {
    Ok(Resolvent::compute(a, b_tilde, z)?.snapshot)
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct IdentityGap {
    /// `‖mean(m_H G_H − m_H G_A + G_A f_B G_H)‖_F / N`.
    pub gap: f64,
    /// Standard error of `gap` from batch means; NaN with fewer than 2 batches.
    pub stderr: f64,
    pub replicates: usize,
    pub batches: usize,
}

/// Monte Carlo test of `E(m_H G_H) = E(m_H G_A − G_A f_B G_H)`.
///
/// Replicate `r` draws from substream `(seed, r)`. Replicates are split into
/// 10 contiguous batches; the standard error is that of the mean matrix in
/// Frobenius norm, estimated from the spread of the batch means.
pub fn pv_identity_gap(
    mu_a: &SpectralMeasure,
    mu_b: &SpectralMeasure,
    n: usize,
    z: Complex64,
    replicates: usize,
    seed: u64,
    ensemble: Ensemble,
) -> Result<IdentityGap> {
    pv_identity_gap_streams(mu_a, mu_b, n, z, replicates, seed, 0, ensemble)
}

/// As [`pv_identity_gap`], with replicate `r` on stream `stream_base + r`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn pv_identity_gap_streams(
    mu_a: &SpectralMeasure,
    mu_b: &SpectralMeasure,
    n: usize,
    z: Complex64,
    replicates: usize,
    seed: u64,
    stream_base: u64,
    ensemble: Ensemble,
) -> Result<IdentityGap> {
    if replicates == 0 {
        return Err(Error::InvalidConfig("replicates must be positive".into()));
    }
    if !(z.im > 0.0) {
        return Err(Error::OffUpperHalfPlane(z));
    }
    let sampler = EnsembleSampler::new(mu_a, mu_b, n, ensemble)?;
    let a = sampler.a_diagonal().expect("diagonal A").to_vec();
    let g_a: Vec<Complex64> = a.iter().map(|&x| 1.0 / (x - z)).collect();

    let difference = |r: usize| -> Result<DMatrix<Complex64>> {
        let (b_tilde, _) = sampler.realize(seed, stream_base + r as u64);
        let res = Resolvent::compute(sampler.a(), &b_tilde, z).map_err(|e| Error::Replicate {
            index: r,
            source: Box::new(e),
        })?;
        let ResolventSnapshot { m_h, f_b, .. } = res.snapshot;
        let g = res.g_h;
        Ok(DMatrix::from_fn(n, n, |i, j| {
            let g_a_ij = if i == j { g_a[i] } else { Complex64::new(0.0, 0.0) };
            m_h * (g[(i, j)] - g_a_ij) + f_b * g_a[i] * g[(i, j)]
        }))
    };

    let batches = PV_BATCHES.min(replicates);
    let mut batch_means = Vec::with_capacity(batches);
    let mut total = DMatrix::<Complex64>::zeros(n, n);
    for b in 0..batches {
        let lo = b * replicates / batches;
        let hi = (b + 1) * replicates / batches;
        let diffs: Vec<DMatrix<Complex64>> = (lo..hi).into_par_iter().map(difference).collect::<Result<_>>()?;
        let mut sum = DMatrix::<Complex64>::zeros(n, n);
        for d in &diffs {
            sum += d;
        }
        total += &sum;
        batch_means.push(sum / Complex64::new((hi - lo) as f64, 0.0));
    }
    let mean = total / Complex64::new(replicates as f64, 0.0);
    let nf = n as f64;
    let gap = mean.norm() / nf;
    let stderr = if batches < 2 {
        f64::NAN
    } else {
        let ss: f64 = batch_means.iter().map(|bm| (bm - &mean).norm_squared()).sum();
        (ss / (batches * (batches - 1)) as f64).sqrt() / nf
    };
    Ok(IdentityGap { gap, stderr, replicates, batches })
}

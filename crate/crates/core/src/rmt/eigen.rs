//! Dense Hermitian eigenvalue solvers.

use nalgebra::DMatrix;
use num_complex::Complex64;

use super::HermitianMatrix;
use crate::error::{Error, Result};

pub const JACOBI_MAX_SWEEPS: usize = 60;
pub const JACOBI_REL_TOL: f64 = 1e-13;

fn off_diagonal_norm(a: &DMatrix<Complex64>) -> f64 {
    let n = a.nrows();
    let mut s = 0.0;
    for j in 0..n {
        for i in 0..n {
            if i != j {
                s += a[(i, j)].norm_sqr();
            }
        }
    }
    s.sqrt()
}

/// Eigenvalues in ascending order by cyclic complex Jacobi rotations.
///
/// Each rotation first removes the phase of the pivot `a_pq`, then applies
/// the real symmetric Jacobi rotation that annihilates it. Sweeps stop once
/// the off-diagonal Frobenius norm drops below `1e-13 ‖H‖_F`.
pub fn eig_hermitian(h: &HermitianMatrix) -> Result<Vec<f64>> {
    let mut a = h.as_matrix().clone();
    let n = a.nrows();
    let target = JACOBI_REL_TOL * a.norm();
    let mut converged = off_diagonal_norm(&a) <= target;
    let mut sweeps = 0;
    while !converged {
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(Error::EigenNoConvergence(JACOBI_MAX_SWEEPS));
        }
        sweeps += 1;
        for p in 0..n {
            for q in p + 1..n {
                rotate(&mut a, p, q);
            }
        }
        converged = off_diagonal_norm(&a) <= target;
    }
    let mut values: Vec<f64> = (0..n).map(|i| a[(i, i)].re).collect();
    values.sort_by(f64::total_cmp);
    Ok(values)
}

fn rotate(a: &mut DMatrix<Complex64>, p: usize, q: usize) {
    let apq = a[(p, q)];
    let r = apq.norm();
    if r == 0.0 {
        return;
    }
    let app = a[(p, p)].re;
    let aqq = a[(q, q)].re;
    let theta = (aqq - app) / (2.0 * r);
    let t = if theta.is_finite() {
        theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
    } else {
        0.0
    };
    if t == 0.0 && theta.is_finite() {
        return;
    }
    let c = 1.0 / (t * t + 1.0).sqrt();
    let s = t * c;
    let phase = apq / r;
    let conj_phase = phase.conj();
    let n = a.nrows();

    // columns: A ← A J
    for k in 0..n {
        let akp = a[(k, p)];
        let akq = a[(k, q)];
        a[(k, p)] = akp * c - akq * conj_phase * s;
        a[(k, q)] = akp * s + akq * conj_phase * c;
    }
    // rows: A ← J* A
    for k in 0..n {
        let apk = a[(p, k)];
        let aqk = a[(q, k)];
        a[(p, k)] = apk * c - aqk * phase * s;
        a[(q, k)] = apk * s + aqk * phase * c;
    }
    a[(p, q)] = Complex64::new(0.0, 0.0);
    a[(q, p)] = Complex64::new(0.0, 0.0);
    a[(p, p)] = Complex64::new(a[(p, p)].re, 0.0);
    a[(q, q)] = Complex64::new(a[(q, q)].re, 0.0);
}

/// Eigenvalues in ascending order via Householder tridiagonalization and
/// implicit QR. Same contract as [`eig_hermitian`], `O(N³)` with a much
/// smaller constant; used for the Monte Carlo draws.
pub fn eigvals_fast(h: &HermitianMatrix) -> Vec<f64> {
    let mut values: Vec<f64> = h.as_matrix().clone().symmetric_eigenvalues().iter().copied().collect();
    values.sort_by(f64::total_cmp);
    values
}

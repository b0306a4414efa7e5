//! Newton–Kantorovich solver for the subordination system of the free
//! additive convolution.
//!
//! At a point `z` of the upper half-plane the unknowns are
//! `x = (m, S_A·m, S_B·m)` and the system reads
//!
//! ```text
//! P₁(x) = x₁ − m_A(z − x₃/x₁)
//! P₂(x) = x₁ − m_B(z − x₂/x₁)
//! P₃(x) = z·x₁ − x₂ − x₃ + 1
//! ```
//!
//! The solution with `Im m > 0` and `Im S_A, Im S_B < 0` is unique. Newton
//! converges from the large-`|z|` asymptotics, so points near the real axis
//! are reached by continuation in `η = Im z`.

use nalgebra::{Matrix3, Vector3};
use num_complex::Complex64;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::measures::{ComplexPoint, SpectralMeasure};

pub type Vec3 = [Complex64; 3];
pub type Mat3 = [[Complex64; 3]; 3];

/// Solution (or candidate) of the system at one point `z`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SubordinationTriple {
    pub z: Complex64,
    pub x: Vec3,
}

impl SubordinationTriple {
    pub fn new(z: Complex64, x: Vec3) -> Self {
        Self { z, x }
    }

    /// Builds the unknown vector from `m`, `S_A` and `S_B`.
    pub fn from_functions(z: Complex64, m: Complex64, s_a: Complex64, s_b: Complex64) -> Self {
        Self {
            z,
            x: [m, s_a * m, s_b * m],
        }
    }

    pub fn point(&self) -> ComplexPoint {
        self.z.into()
    }

    /// Stieltjes transform of the free convolution.
    pub fn m(&self) -> Complex64 {
        self.x[0]
    }

    pub fn s_a(&self) -> Complex64 {
        self.x[1] / self.x[0]
    }

    pub fn s_b(&self) -> Complex64 {
        self.x[2] / self.x[0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SolverConfig {
    /// Bound on the ∞-norm of the residual, relative to `max(1, ‖x‖∞)`.
    pub newton_tol: f64,
    pub max_newton_iters: usize,
    /// Maximum number of step halvings per Newton step.
    pub damping: usize,
    /// Continuation starts at `η = eta_top_factor·(K_A + K_B)`.
    pub eta_top_factor: f64,
    /// Nominal ratio between consecutive `η` levels.
    pub continuation_shrink: f64,
    /// Smallest fraction of a nominal `η` step tried before giving up.
    pub min_step_shrink: f64,
    /// Slope bound of the region `Ω`; informational.
    pub kappa: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            newton_tol: 1e-12,
            max_newton_iters: 50,
            damping: 20,
            eta_top_factor: 8.0,
            continuation_shrink: 0.7,
            min_step_shrink: 1.0 / 64.0,
            kappa: 1.0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.newton_tol > 0.0) {
            return Err(Error::InvalidConfig("newton_tol must be positive".into()));
        }
        if !(self.continuation_shrink > 0.0 && self.continuation_shrink < 1.0) {
            return Err(Error::InvalidConfig(
                "continuation_shrink must lie in (0, 1)".into(),
            ));
        }
        if !(self.min_step_shrink > 0.0 && self.min_step_shrink <= 1.0) {
            return Err(Error::InvalidConfig(
                "min_step_shrink must lie in (0, 1]".into(),
            ));
        }
        if !(self.eta_top_factor > 0.0) {
            return Err(Error::InvalidConfig("eta_top_factor must be positive".into()));
        }
        if self.max_newton_iters == 0 {
            return Err(Error::InvalidConfig("max_newton_iters must be positive".into()));
        }
        Ok(())
    }
}

/// Quantities entering the Kantorovich convergence condition `h₀ ≤ 1/2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KantorovichDiagnostic {
    /// `‖Γ₀‖∞` with `Γ₀ = P'(x₀)⁻¹`.
    pub c0: f64,
    /// `‖Γ₀ P(x₀)‖∞`.
    pub delta0: f64,
    /// Sampled bound on the second derivative near `x₀`.
    pub m: f64,
    pub h0: f64,
    pub satisfied: bool,
}

/// Result of a Newton solve.
#[derive(Debug, Clone, Copy)]
pub struct NewtonOutcome {
    pub triple: SubordinationTriple,
    pub iterations: usize,
    pub residual: f64,
}

pub fn norm_inf(v: &Vec3) -> f64 {
    v.iter().fold(0.0, |acc, c| acc.max(c.norm()))
}

fn mat_norm_inf(m: &Mat3) -> f64 {
    m.iter()
        .map(|row| row.iter().map(|c| c.norm()).sum::<f64>())
        .fold(0.0, f64::max)
}

fn to_matrix(j: &Mat3) -> Matrix3<Complex64> {
    Matrix3::from_fn(|r, c| j[r][c])
}

fn solve3(j: &Mat3, rhs: &Vec3) -> Option<Vec3> {
    let sol = to_matrix(j)
        .lu()
        .solve(&Vector3::new(rhs[0], rhs[1], rhs[2]))?;
    let out = [sol[0], sol[1], sol[2]];
    out.iter().all(|c| c.re.is_finite() && c.im.is_finite()).then_some(out)
}

fn inverse3(j: &Mat3) -> Option<Mat3> {
    let inv = to_matrix(j).try_inverse()?;
    let out = [
        [inv[(0, 0)], inv[(0, 1)], inv[(0, 2)]],
        [inv[(1, 0)], inv[(1, 1)], inv[(1, 2)]],
        [inv[(2, 0)], inv[(2, 1)], inv[(2, 2)]],
    ];
    out.iter()
        .flatten()
        .all(|c| c.re.is_finite() && c.im.is_finite())
        .then_some(out)
}

fn mat_vec(m: &Mat3, v: &Vec3) -> Vec3 {
    [0, 1, 2].map(|r| m[r][0] * v[0] + m[r][1] * v[1] + m[r][2] * v[2])
}

fn axpy(x: &Vec3, t: f64, d: &Vec3) -> Vec3 {
    [x[0] + t * d[0], x[1] + t * d[1], x[2] + t * d[2]]
}

/// The subordination system for a fixed pair of measures.
#[derive(Debug, Clone, Copy)]
pub struct SubordinationSystem<'a> {
    mu_a: &'a SpectralMeasure,
    mu_b: &'a SpectralMeasure,
}

impl<'a> SubordinationSystem<'a> {
    pub fn new(mu_a: &'a SpectralMeasure, mu_b: &'a SpectralMeasure) -> Self {
        Self { mu_a, mu_b }
    }

    pub fn mu_a(&self) -> &'a SpectralMeasure {
        self.mu_a
    }

    pub fn mu_b(&self) -> &'a SpectralMeasure {
        self.mu_b
    }

    /// `K_A + K_B`, which bounds the support of the free convolution.
    pub fn norm_scale(&self) -> f64 {
        self.mu_a.norm_bound() + self.mu_b.norm_bound()
    }

    // Shifted arguments (z − x₃/x₁, z − x₂/x₁) of m_A and m_B.
    fn arguments(&self, z: Complex64, x: &Vec3) -> Result<(Complex64, Complex64)> {
        if x[0].norm() == 0.0 || !x[0].is_finite() {
            return Err(Error::ArgumentLeftUpperHalfPlane(Complex64::new(
                f64::NAN,
                f64::NAN,
            )));
        }
        let w_a = z - x[2] / x[0];
        let w_b = z - x[1] / x[0];
        for w in [w_a, w_b] {
            if !(w.im > 0.0) || !w.re.is_finite() {
                return Err(Error::ArgumentLeftUpperHalfPlane(w));
            }
        }
        Ok((w_a, w_b))
    }

    /// `P(x)`.
    pub fn residual(&self, t: &SubordinationTriple) -> Result<Vec3> {
        self.residual_at(t.z, &t.x)
    }

    fn residual_at(&self, z: Complex64, x: &Vec3) -> Result<Vec3> {
        let (w_a, w_b) = self.arguments(z, x)?;
        Ok([
            x[0] - self.mu_a.stieltjes_unchecked(w_a),
            x[0] - self.mu_b.stieltjes_unchecked(w_b),
            z * x[0] - x[1] - x[2] + 1.0,
        ])
    }

    /// `P'(x)`, rows ordered as the residual components.
    pub fn jacobian(&self, t: &SubordinationTriple) -> Result<Mat3> {
        self.residual_and_jacobian(t.z, &t.x).map(|(_, j)| j)
    }

    fn residual_and_jacobian(&self, z: Complex64, x: &Vec3) -> Result<(Vec3, Mat3)> {
        let (w_a, w_b) = self.arguments(z, x)?;
        let (m_a, dm_a) = self.mu_a.stieltjes_with_derivative(w_a);
        let (m_b, dm_b) = self.mu_b.stieltjes_with_derivative(w_b);
        let inv = x[0].inv();
        let zero = Complex64::new(0.0, 0.0);
        let one = Complex64::new(1.0, 0.0);
        let residual = [x[0] - m_a, x[0] - m_b, z * x[0] - x[1] - x[2] + 1.0];
        let jac = [
            [one - dm_a * x[2] * inv * inv, zero, dm_a * inv],
            [one - dm_b * x[1] * inv * inv, dm_b * inv, zero],
            [z, -one, -one],
        ];
        Ok((residual, jac))
    }

    /// Leading-order asymptotics `m ≈ −1/z`, `S_A ≈ mean(μ_A)`, `S_B ≈ mean(μ_B)`.
    pub fn initial_guess(&self, z: Complex64) -> SubordinationTriple {
        let inv = z.inv();
        SubordinationTriple::new(
            z,
            [-inv, -self.mu_a.mean() * inv, -self.mu_b.mean() * inv],
        )
    }

    /// Damped Newton iteration at a fixed `z` starting from `x_init`.
    pub fn newton_solve_at(
        &self,
        z: Complex64,
        x_init: &Vec3,
        cfg: &SolverConfig,
    ) -> Result<NewtonOutcome> {
        if !(z.im > 0.0) {
            return Err(Error::OffUpperHalfPlane(z));
        }
        let mut x = *x_init;
        let (mut r, mut jac) = self.residual_and_jacobian(z, &x)?;
        let mut rnorm = norm_inf(&r);
        let mut iterations = 0;
        loop {
            if rnorm <= cfg.newton_tol * residual_scale(&x) {
                // One polishing step when there is still room below the tolerance.
                if rnorm > 1e-3 * cfg.newton_tol {
                    if let Some(dx) = solve3(&jac, &r) {
                        let cand = axpy(&x, -1.0, &dx);
                        if let Ok(rc) = self.residual_at(z, &cand) {
                            let cn = norm_inf(&rc);
                            if cn < rnorm {
                                x = cand;
                                rnorm = cn;
                            }
                        }
                    }
                }
                let triple = SubordinationTriple::new(z, x);
                check_branch(&triple, cfg.newton_tol, self.norm_scale())?;
                return Ok(NewtonOutcome {
                    triple,
                    iterations,
                    residual: rnorm,
                });
            }
            if iterations >= cfg.max_newton_iters {
                return Err(Error::NoConvergence {
                    z,
                    iterations,
                    residual: rnorm,
                });
            }
            let dx = solve3(&jac, &r).ok_or(Error::SingularJacobian(z))?;
            let mut step = 1.0;
            let mut accepted = None;
            for _ in 0..=cfg.damping {
                let cand = axpy(&x, -step, &dx);
                if let Ok((rc, jc)) = self.residual_and_jacobian(z, &cand) {
                    let cn = norm_inf(&rc);
                    if cn < rnorm || cn <= cfg.newton_tol * residual_scale(&cand) {
                        accepted = Some((cand, rc, jc, cn));
                        break;
                    }
                }
                step *= 0.5;
            }
            let Some((xn, rn, jn, nn)) = accepted else {
                return Err(Error::NoConvergence {
                    z,
                    iterations,
                    residual: rnorm,
                });
            };
            x = xn;
            r = rn;
            jac = jn;
            rnorm = nn;
            iterations += 1;
        }
    }

    /// Continuation start height for this pair of measures.
    pub fn eta_top(&self, cfg: &SolverConfig) -> f64 {
        cfg.eta_top_factor * self.norm_scale().max(1.0)
    }

    /// Solves at `E + i·eta_target` by continuation from `η_top`.
    pub fn solve_point(&self, e: f64, eta_target: f64, cfg: &SolverConfig) -> Result<NewtonOutcome> {
        if !(eta_target > 0.0) {
            return Err(Error::OffUpperHalfPlane(Complex64::new(e, eta_target)));
        }
        let start = self.eta_top(cfg).max(eta_target);
        let top = self.solve_top(e, start, cfg)?;
        let mut out = self.continue_down(e, top, eta_target, cfg)?;
        out.iterations += top.iterations;
        Ok(out)
    }

    fn solve_top(&self, e: f64, eta: f64, cfg: &SolverConfig) -> Result<NewtonOutcome> {
        let z = Complex64::new(e, eta);
        self.newton_solve_at(z, &self.initial_guess(z).x, cfg)
            .map_err(|err| continuation_error(e, eta, &err))
    }

    // Walks from a solution at some height down to `eta_target` on the
    // geometric ladder, bisecting the step in log η after a failure.
    fn continue_down(
        &self,
        e: f64,
        from: NewtonOutcome,
        eta_target: f64,
        cfg: &SolverConfig,
    ) -> Result<NewtonOutcome> {
        let mut current = from;
        let mut eta = from.triple.z.im;
        let mut fraction = 1.0;
        let mut iterations = 0;
        while eta > eta_target {
            let next = (eta * cfg.continuation_shrink.powf(fraction)).max(eta_target);
            match self.newton_solve_at(Complex64::new(e, next), &current.triple.x, cfg) {
                Ok(out) => {
                    iterations += out.iterations;
                    current = out;
                    eta = next;
                    fraction = 1.0;
                }
                Err(err) => {
                    fraction *= 0.5;
                    if fraction < cfg.min_step_shrink {
                        return Err(continuation_error(e, next, &err));
                    }
                }
            }
        }
        current.iterations = iterations;
        Ok(current)
    }

    /// Solves at `E + iη` for every `η` of a decreasing sequence, continuing
    /// from each node to the next. The first node is reached from `η_top`
    /// (or solved directly when it lies above it).
    pub fn solve_ladder(
        &self,
        e: f64,
        etas: &[f64],
        cfg: &SolverConfig,
    ) -> Result<Vec<SubordinationTriple>> {
        match self.solve_ladder_prefix(e, etas, cfg)? {
            (out, None) => Ok(out),
            (_, Some(err)) => Err(err),
        }
    }

    /// Like [`solve_ladder`](Self::solve_ladder), but a failure below the first
    /// node returns the solved prefix together with the error.
    pub fn solve_ladder_prefix(
        &self,
        e: f64,
        etas: &[f64],
        cfg: &SolverConfig,
    ) -> Result<(Vec<SubordinationTriple>, Option<Error>)> {
        let Some(&first) = etas.first() else {
            return Ok((Vec::new(), None));
        };
        if etas.windows(2).any(|w| !(w[1] < w[0])) || !(etas[etas.len() - 1] > 0.0) {
            return Err(Error::InvalidConfig(
                "ladder heights must be positive and strictly decreasing".into(),
            ));
        }
        let top = self.eta_top(cfg).max(first);
        let mut current = self.solve_top(e, top, cfg)?;
        let mut out = Vec::with_capacity(etas.len());
        for &eta in etas {
            match self.continue_down(e, current, eta, cfg) {
                Ok(next) => {
                    current = next;
                    out.push(current.triple);
                }
                Err(err) if !out.is_empty() => return Ok((out, Some(err))),
                Err(err) => return Err(err),
            }
        }
        Ok((out, None))
    }

    /// Solves on the horizontal line `E + i·eta_target` for every `E` in the grid.
    pub fn solve_line(
        &self,
        e_grid: &[f64],
        eta_target: f64,
        cfg: &SolverConfig,
    ) -> Result<Vec<SubordinationTriple>> {
        cfg.validate()?;
        e_grid
            .iter()
            .map(|&e| self.solve_point(e, eta_target, cfg).map(|o| o.triple))
            .collect()
    }

    /// Parallel variant of [`solve_line`](Self::solve_line); results are identical.
    pub fn solve_line_par(
        &self,
        e_grid: &[f64],
        eta_target: f64,
        cfg: &SolverConfig,
    ) -> Result<Vec<SubordinationTriple>> {
        use rayon::prelude::*;
        cfg.validate()?;
        e_grid
            .par_iter()
            .map(|&e| self.solve_point(e, eta_target, cfg).map(|o| o.triple))
            .collect()
    }

    /// Solves at an arbitrary point of the upper half-plane.
    pub fn solve(&self, z: Complex64, cfg: &SolverConfig) -> Result<SubordinationTriple> {
        self.solve_point(z.re, z.im, cfg).map(|o| o.triple)
    }

    /// Evaluates the Kantorovich constants at `t`.
    pub fn kantorovich_check(&self, t: &SubordinationTriple) -> Result<KantorovichDiagnostic> {
        let z = t.z;
        let (r0, j0) = self.residual_and_jacobian(z, &t.x)?;
        let gamma = inverse3(&j0).ok_or(Error::SingularJacobian(z))?;
        let c0 = mat_norm_inf(&gamma);
        let delta0 = norm_inf(&mat_vec(&gamma, &r0));

        let radius = 0.5 / z.norm();
        let h = 1e-4 * radius;
        let dirs = probe_directions();
        let mut m: f64 = 0.0;
        let centers = std::iter::once(t.x).chain(dirs.iter().map(|d| axpy(&t.x, 0.5 * radius, d)));
        for c in centers {
            let Ok(p0) = self.residual_at(z, &c) else {
                continue;
            };
            for d in &dirs {
                let (Ok(pp), Ok(pm)) = (
                    self.residual_at(z, &axpy(&c, h, d)),
                    self.residual_at(z, &axpy(&c, -h, d)),
                ) else {
                    continue;
                };
                let second = [0, 1, 2].map(|k| (pp[k] - 2.0 * p0[k] + pm[k]) / (h * h));
                m = m.max(norm_inf(&second));
            }
        }
        let h0 = c0 * delta0 * m;
        Ok(KantorovichDiagnostic {
            c0,
            delta0,
            m,
            h0,
            satisfied: h0 <= 0.5,
        })
    }
}

// Nine unit directions (∞-norm one) used to sample second differences.
fn probe_directions() -> [Vec3; 9] {
    let o = Complex64::new(1.0, 0.0);
    let i = Complex64::i();
    let n = Complex64::new(0.0, 0.0);
    let s = std::f64::consts::FRAC_1_SQRT_2;
    [
        [o, n, n],
        [n, o, n],
        [n, n, o],
        [i, n, n],
        [o, o, n],
        [o, n, -o],
        [n, i, o],
        [o, o, o],
        [s * (o + i), -i, o],
    ]
}

/// Residuals are measured relative to `max(1, ‖x‖∞)`; the transforms grow like
/// `1/η` near atoms and rounding in `P` grows with them.
pub fn residual_scale(x: &Vec3) -> f64 {
    norm_inf(x).max(1.0)
}

fn continuation_error(e: f64, eta: f64, err: &Error) -> Error {
    let residual = match err {
        Error::NoConvergence { residual, .. } => *residual,
        _ => f64::NAN,
    };
    Error::ContinuationFailed { e, eta, residual }
}

/// Enforces `Im m > 0` and `Im S_A, Im S_B ≤ 0`, the latter up to the
/// resolution implied by the residual tolerance (exact solutions for
/// point masses have real subordination functions).
///
/// Also rejects points outside `η/((|E| + K)² + η²) ≤ Im m ≤ |m| ≤ 1/η` (with a
/// factor two of room), which every measure supported in `[−K, K]` satisfies. The system has spurious
/// roots near `m = 0` with `x₂ + x₃ = 1` that pass the sign conditions.
fn check_branch(t: &SubordinationTriple, tol: f64, k: f64) -> Result<()> {
    let m = t.m();
    let (s_a, s_b) = (t.s_a(), t.s_b());
    let (e, eta) = (t.z.re, t.z.im);
    let slack = |s: Complex64| 100.0 * tol * (1.0 + s.norm()) / m.norm();
    let floor = 0.5 * eta / ((e.abs() + k).powi(2) + eta * eta);
    let ceiling = 2.0 / eta;
    if m.im >= floor && m.norm() <= ceiling && s_a.im <= slack(s_a) && s_b.im <= slack(s_b) {
        Ok(())
    } else {
        Err(Error::SpuriousBranch {
            z: t.z,
            m,
            s_a,
            s_b,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn bernoulli() -> SpectralMeasure {
        SpectralMeasure::from_eigenvalues(&[-1.0, 1.0]).unwrap()
    }

    fn dirac_solution(a: f64, b: f64, z: Complex64) -> SubordinationTriple {
        let d = (z - a - b).inv();
        SubordinationTriple::new(z, [-d, -a * d, -b * d])
    }

    // Closed-form transform of the arcsine law on [−2, 2] with branch m ~ −1/z.
    fn arcsine_m(z: Complex64) -> Complex64 {
        let root = (z - 2.0).sqrt() * (z + 2.0).sqrt();
        -root.inv()
    }

    #[test]
    fn residual_vanishes_at_exact_dirac_solution() {
        let (a, b) = (1.3, -0.4);
        let (ma, mb) = (SpectralMeasure::dirac(a), SpectralMeasure::dirac(b));
        let sys = SubordinationSystem::new(&ma, &mb);
        let t = dirac_solution(a, b, c(0.7, 0.9));
        assert!(norm_inf(&sys.residual(&t).unwrap()) < 1e-15);
    }

    #[test]
    fn residual_vanishes_for_identity_convolution() {
        let mu = SpectralMeasure::new(vec![-1.0, 0.5, 2.0], vec![0.2, 0.5, 0.3]).unwrap();
        let zero = SpectralMeasure::dirac(0.0);
        let sys = SubordinationSystem::new(&zero, &mu);
        let z = c(0.2, 0.4);
        let m = mu.stieltjes(z).unwrap();
        let t = SubordinationTriple::new(z, [m, c(0.0, 0.0), z * m + 1.0]);
        assert!(norm_inf(&sys.residual(&t).unwrap()) < 1e-14);
    }

    #[test]
    fn perturbed_solution_has_residual_of_perturbation_size() {
        let (ma, mb) = (SpectralMeasure::dirac(1.0), SpectralMeasure::dirac(2.0));
        let sys = SubordinationSystem::new(&ma, &mb);
        let mut t = dirac_solution(1.0, 2.0, c(0.0, 1.0));
        t.x[0] += c(1e-3, -0.5e-3);
        t.x[2] += c(0.0, 1e-3);
        let r = norm_inf(&sys.residual(&t).unwrap());
        assert!(r > 1e-4 && r < 1e-2, "residual {r}");
    }

    #[test]
    fn residual_rejects_arguments_below_axis() {
        let mu = bernoulli();
        let sys = SubordinationSystem::new(&mu, &mu);
        // S_B = x3/x1 = 2i pushes z − S_B below the axis at z = i.
        let t = SubordinationTriple::from_functions(c(0.0, 1.0), c(0.0, 0.5), c(0.0, 0.0), c(0.0, 2.0));
        assert!(matches!(
            sys.residual(&t),
            Err(Error::ArgumentLeftUpperHalfPlane(_))
        ));
    }

    #[test]
    fn jacobian_third_row_is_linear_part() {
        let mu = bernoulli();
        let sys = SubordinationSystem::new(&mu, &mu);
        let z = c(0.3, 1.5);
        let t = sys.initial_guess(z);
        let j = sys.jacobian(&t).unwrap();
        assert_eq!(j[2], [z, c(-1.0, 0.0), c(-1.0, 0.0)]);
    }

    #[test]
    fn jacobian_nonsingular_for_zero_measures() {
        let zero = SpectralMeasure::dirac(0.0);
        let sys = SubordinationSystem::new(&zero, &zero);
        let z = c(0.0, 2.0);
        let t = dirac_solution(0.0, 0.0, z);
        let det = to_matrix(&sys.jacobian(&t).unwrap()).determinant();
        assert!(det.norm() > 1e-3);
        // det = −(m_A' + m_B')/x₁ + m_A' m_B' (−z x₁ + x₂ + x₃)/x₁³ evaluated by hand.
        let x1 = t.m();
        let dm = x1 * x1;
        let expected = -(dm + dm) / x1 + dm * dm * (-z * x1 + t.x[1] + t.x[2]) / (x1 * x1 * x1);
        assert!((det - expected).norm() < 1e-14);
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let mu_a = SpectralMeasure::new(vec![-1.0, 0.5, 2.0], vec![0.2, 0.5, 0.3]).unwrap();
        let mu_b = bernoulli();
        let sys = SubordinationSystem::new(&mu_a, &mu_b);
        let cfg = SolverConfig::default();
        let t = sys.solve(c(0.4, 0.6), &cfg).unwrap();
        let j = sys.jacobian(&t).unwrap();
        let h = 1e-6;
        for k in 0..3 {
            let mut xp = t.x;
            let mut xm = t.x;
            xp[k] += h;
            xm[k] -= h;
            let rp = sys.residual_at(t.z, &xp).unwrap();
            let rm = sys.residual_at(t.z, &xm).unwrap();
            for row in 0..3 {
                let fd = (rp[row] - rm[row]) / (2.0 * h);
                let err = (fd - j[row][k]).norm() / j[row][k].norm().max(1e-3);
                assert!(err < 1e-5, "entry ({row},{k}): {err}");
            }
        }
    }

    #[test]
    fn newton_dirac_case() {
        let (ma, mb) = (SpectralMeasure::dirac(1.0), SpectralMeasure::dirac(2.0));
        let sys = SubordinationSystem::new(&ma, &mb);
        let z = c(0.0, 1.0);
        let out = sys
            .newton_solve_at(z, &sys.initial_guess(z).x, &SolverConfig::default())
            .unwrap();
        let t = out.triple;
        assert!((t.m() + (z - 3.0).inv()).norm() < 1e-12);
        assert!((t.s_a() - 1.0).norm() < 1e-12);
        assert!((t.s_b() - 2.0).norm() < 1e-12);
        assert!(out.iterations <= 5, "{} iterations", out.iterations);
    }

    #[test]
    fn newton_fixed_point_is_unchanged() {
        let (ma, mb) = (SpectralMeasure::dirac(-0.5), SpectralMeasure::dirac(0.25));
        let sys = SubordinationSystem::new(&ma, &mb);
        let t = dirac_solution(-0.5, 0.25, c(0.1, 0.8));
        let out = sys.newton_solve_at(t.z, &t.x, &SolverConfig::default()).unwrap();
        assert_eq!(out.iterations, 0);
        assert_eq!(out.triple.x, t.x);
    }

    #[test]
    fn root_at_infinity_is_rejected() {
        let mu = bernoulli();
        let sys = SubordinationSystem::new(&mu, &mu);
        let z = c(0.3, 0.5);
        let x1 = c(1e-13, 1e-13);
        let x = [x1, c(0.5, 0.0), 1.0 - z * x1 - 0.5];
        let r = sys.residual(&SubordinationTriple::new(z, x)).unwrap();
        assert!(norm_inf(&r) <= 1e-12);
        let cfg = SolverConfig::default();
        match sys.newton_solve_at(z, &x, &cfg) {
            Ok(out) => assert!((out.triple.m() - sys.solve(z, &cfg).unwrap().m()).norm() < 1e-10),
            Err(e) => assert!(matches!(e, Error::SpuriousBranch { .. } | Error::NoConvergence { .. })),
        }
    }

    #[test]
    fn arcsine_closed_form_at_two_i() {
        let mu = bernoulli();
        let sys = SubordinationSystem::new(&mu, &mu);
        let z = c(0.0, 2.0);
        let t = sys.solve(z, &SolverConfig::default()).unwrap();
        let expected = c(0.0, 1.0 / (2.0 * 2f64.sqrt()));
        assert!((arcsine_m(z) - expected).norm() < 1e-15);
        assert!((t.m() - expected).norm() < 1e-12);
    }

    #[test]
    fn initial_guess_examples() {
        let zero = SpectralMeasure::dirac(0.0);
        let sys = SubordinationSystem::new(&zero, &zero);
        let t = sys.initial_guess(c(0.0, 10.0));
        assert!((t.x[0] - c(0.0, 0.1)).norm() < 1e-16);
        assert_eq!(&t.x[1..], &[c(0.0, 0.0), c(0.0, 0.0)]);
        assert!(norm_inf(&sys.residual(&t).unwrap()) < 1e-16);

        let mu = bernoulli();
        let t = SubordinationSystem::new(&mu, &mu).initial_guess(c(0.0, 16.0));
        assert!((t.x[0] - c(0.0, 0.0625)).norm() < 1e-16);
        assert_eq!(t.x[1].norm() + t.x[2].norm(), 0.0);

        let two = SpectralMeasure::from_eigenvalues(&[0.0, 2.0]).unwrap();
        let t = SubordinationSystem::new(&two, &zero).initial_guess(c(0.0, 16.0));
        assert!((t.x[1] - c(0.0, 0.0625)).norm() < 1e-16);
        assert!((t.s_a() - 1.0).norm() < 1e-15);
    }

    #[test]
    fn solve_line_dirac_grid() {
        let (ma, mb) = (SpectralMeasure::dirac(1.5), SpectralMeasure::dirac(-2.0));
        let sys = SubordinationSystem::new(&ma, &mb);
        let grid: Vec<f64> = (0..121).map(|k| -6.0 + 0.1 * k as f64).collect();
        let line = sys.solve_line(&grid, 0.05, &SolverConfig::default()).unwrap();
        for t in &line {
            assert!((t.m() + (t.z + 0.5).inv()).norm() <= 1e-10);
        }
    }

    #[test]
    fn arcsine_density_at_origin() {
        let mu = bernoulli();
        let sys = SubordinationSystem::new(&mu, &mu);
        let t = sys.solve(c(0.0, 1e-3), &SolverConfig::default()).unwrap();
        let rho = t.m().im / std::f64::consts::PI;
        assert!((rho - 0.5 / std::f64::consts::PI).abs() < 2e-3, "{rho}");
    }

    #[test]
    fn continuation_schedule_does_not_matter() {
        let mu_a = SpectralMeasure::new(vec![-1.0, 0.3, 1.2], vec![0.3, 0.3, 0.4]).unwrap();
        let mu_b = SpectralMeasure::new(vec![-0.5, 2.0], vec![0.6, 0.4]).unwrap();
        let sys = SubordinationSystem::new(&mu_a, &mu_b);
        let grid: Vec<f64> = (0..41).map(|k| -4.0 + 0.2 * k as f64).collect();
        let fast = SolverConfig {
            continuation_shrink: 0.5,
            ..SolverConfig::default()
        };
        let a = sys.solve_line(&grid, 0.05, &SolverConfig::default()).unwrap();
        let b = sys.solve_line(&grid, 0.05, &fast).unwrap();
        for (ta, tb) in a.iter().zip(&b) {
            let diff = ta.x.iter().zip(&tb.x).map(|(p, q)| (p - q).norm()).fold(0.0, f64::max);
            assert!(diff <= 1e-10, "E = {}: {diff}", ta.z.re);
        }
    }

    #[test]
    fn kantorovich_at_exact_solution() {
        let (ma, mb) = (SpectralMeasure::dirac(1.0), SpectralMeasure::dirac(-1.0));
        let sys = SubordinationSystem::new(&ma, &mb);
        let d = sys.kantorovich_check(&dirac_solution(1.0, -1.0, c(0.0, 2.0))).unwrap();
        assert_eq!(d.delta0, 0.0);
        assert_eq!(d.h0, 0.0);
        assert!(d.satisfied);
    }

    #[test]
    fn kantorovich_deep_in_safe_region() {
        let mu = bernoulli();
        let sys = SubordinationSystem::new(&mu, &mu);
        let z = c(0.0, 16.0);
        let start = sys.kantorovich_check(&sys.initial_guess(z)).unwrap();
        assert!(start.satisfied, "{start:?}");
        let solved = sys.solve(z, &SolverConfig::default()).unwrap();
        assert!(sys.kantorovich_check(&solved).unwrap().satisfied);
    }

    #[test]
    fn kantorovich_far_candidate_is_finite() {
        let mu = bernoulli();
        let sys = SubordinationSystem::new(&mu, &mu);
        let d = sys.kantorovich_check(&sys.initial_guess(c(0.3, 0.05))).unwrap();
        assert!(d.c0.is_finite() && d.delta0.is_finite() && d.m.is_finite() && d.h0.is_finite());
        assert!(d.c0 >= 0.0 && d.delta0 >= 0.0 && d.m >= 0.0);
        assert_eq!(d.satisfied, d.h0 <= 0.5);
    }

    #[test]
    fn config_validation() {
        let mut cfg = SolverConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.continuation_shrink = 1.0;
        assert!(cfg.validate().is_err());
        cfg = SolverConfig {
            newton_tol: 0.0,
            ..SolverConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}

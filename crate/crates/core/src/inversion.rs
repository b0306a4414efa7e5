//! Density and distribution function of the free convolution, recovered
//! from the solved transform near the real axis.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::measures::{SpectralMeasure, MERGE_TOL};
use crate::subordination::{SolverConfig, SubordinationSystem};

/// Number of points in the default density grid.
pub const DEFAULT_GRID_POINTS: usize = 601;

/// `n` equally spaced points covering `[lo, hi]`.
pub fn uniform_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.5 * (lo + hi)],
        _ => {
            let h = (hi - lo) / (n - 1) as f64;
            (0..n).map(|k| lo + h * k as f64).collect()
        }
    }
}

/// Grid over `[−(K_A+K_B)−1, (K_A+K_B)+1]`, which contains the support.
pub fn covering_grid(sys: &SubordinationSystem<'_>, n: usize) -> Vec<f64> {
    let half = sys.norm_scale() + 1.0;
    uniform_grid(-half, half, n)
}

/// Point masses of `μ_A ⊞ μ_B`.
///
/// An atom sits at `a + b` exactly when `μ_A({a}) + μ_B({b}) > 1`, with mass
/// equal to the excess over one.
pub fn free_atoms(mu_a: &SpectralMeasure, mu_b: &SpectralMeasure) -> Vec<(f64, f64)> {
    let mut atoms = Vec::new();
    for (a, wa) in mu_a.iter() {
        for (b, wb) in mu_b.iter() {
            let excess = wa + wb - 1.0;
            if excess > MERGE_TOL {
                atoms.push((a + b, excess));
            }
        }
    }
    atoms.sort_by(|p, q| p.0.total_cmp(&q.0));
    atoms
}

/// Sampled density of the absolutely continuous part of `μ_A ⊞ μ_B`.
#[derive(Debug, Clone, Serialize)]
pub struct DensityCurve {
    pub e_grid: Vec<f64>,
    pub rho: Vec<f64>,
    pub eta_used: f64,
    pub extrapolated: bool,
    /// `max ρ` over the grid, the empirical bound on the density.
    pub sup_density: f64,
    /// Point masses of the convolution, removed from `rho`.
    pub atoms: Vec<(f64, f64)>,
    /// Largest negative value clamped to zero.
    pub clamped: f64,
}

impl DensityCurve {
    /// The convolution has atoms, so its density is not bounded.
    pub fn a1_violated(&self) -> bool {
        !self.atoms.is_empty()
    }

    pub fn atom_mass(&self) -> f64 {
        self.atoms.iter().map(|a| a.1).sum()
    }

    /// Linear interpolation of the density, zero outside the grid.
    pub fn at(&self, e: f64) -> f64 {
        interpolate(&self.e_grid, &self.rho, e, 0.0, 0.0)
    }

    /// Trapezoid integral of `rho`.
    pub fn mass(&self) -> f64 {
        trapezoid(&self.e_grid, &self.rho)
    }

    /// Mean and variance of the whole measure (density plus atoms) by
    /// trapezoid quadrature on the grid.
    pub fn mean_variance(&self) -> (f64, f64) {
        let moment = |k: i32| -> f64 {
            let vals: Vec<f64> = self
                .e_grid
                .iter()
                .zip(&self.rho)
                .map(|(e, r)| r * e.powi(k))
                .collect();
            trapezoid(&self.e_grid, &vals) + self.atoms.iter().map(|(x, w)| w * x.powi(k)).sum::<f64>()
        };
        let total = moment(0);
        let mean = moment(1) / total;
        (mean, moment(2) / total - mean * mean)
    }

    /// Maximal intervals where the density exceeds `threshold`.
    pub fn support_intervals(&self, threshold: f64) -> Vec<(f64, f64)> {
        let mut out = Vec::new();
        let mut start: Option<f64> = None;
        for (k, (&e, &r)) in self.e_grid.iter().zip(&self.rho).enumerate() {
            match (r > threshold, start) {
                (true, None) => start = Some(e),
                (false, Some(s)) => {
                    out.push((s, self.e_grid[k - 1]));
                    start = None;
                }
                _ => {}
            }
        }
        if let Some(s) = start {
            out.push((s, *self.e_grid.last().unwrap()));
        }
        out
    }
}

/// Cumulative distribution function of `μ_A ⊞ μ_B` on a grid.
#[derive(Debug, Clone, Serialize)]
pub struct CdfCurve {
    pub e_grid: Vec<f64>,
    /// `F` at the grid points, atoms included.
    pub f: Vec<f64>,
    /// Continuous part of `F`.
    f_cont: Vec<f64>,
    pub atoms: Vec<(f64, f64)>,
    pub sup_density: f64,
}

impl CdfCurve {
    pub fn lo(&self) -> f64 {
        self.e_grid[0]
    }

    pub fn hi(&self) -> f64 {
        *self.e_grid.last().unwrap()
    }

    fn continuous(&self, x: f64) -> f64 {
        let last = *self.f_cont.last().unwrap();
        interpolate(&self.e_grid, &self.f_cont, x, 0.0, last)
    }

    /// `F(x)`, right-continuous.
    pub fn eval(&self, x: f64) -> f64 {
        let jumps: f64 = self.atoms.iter().filter(|a| a.0 <= x).map(|a| a.1).sum();
        (self.continuous(x) + jumps).clamp(0.0, 1.0)
    }

    /// `F(x−)`.
    pub fn eval_left(&self, x: f64) -> f64 {
        let jumps: f64 = self.atoms.iter().filter(|a| a.0 < x).map(|a| a.1).sum();
        (self.continuous(x) + jumps).clamp(0.0, 1.0)
    }
}

fn interpolate(xs: &[f64], ys: &[f64], x: f64, below: f64, above: f64) -> f64 {
    let n = xs.len();
    if n == 0 || x < xs[0] {
        return below;
    }
    if x > xs[n - 1] {
        return above;
    }
    let k = xs.partition_point(|&g| g <= x);
    if k == 0 {
        return ys[0];
    }
    if k >= n {
        return ys[n - 1];
    }
    let (x0, x1) = (xs[k - 1], xs[k]);
    let t = (x - x0) / (x1 - x0);
    ys[k - 1] + t * (ys[k] - ys[k - 1])
}

pub fn trapezoid(xs: &[f64], ys: &[f64]) -> f64 {
    xs.windows(2)
        .zip(ys.windows(2))
        .map(|(x, y)| 0.5 * (x[1] - x[0]) * (y[0] + y[1]))
        .sum()
}

// Im m/π at height eta with the Cauchy kernels of the atoms removed.
fn smoothed_density(
    sys: &SubordinationSystem<'_>,
    e_grid: &[f64],
    eta: f64,
    atoms: &[(f64, f64)],
    cfg: &SolverConfig,
) -> Result<Vec<f64>> {
    let line = sys.solve_line_par(e_grid, eta, cfg)?;
    Ok(line
        .iter()
        .map(|t| {
            let e = t.z.re;
            let kernel: f64 = atoms
                .iter()
                .map(|(x, w)| w * eta / ((e - x).powi(2) + eta * eta))
                .sum();
            (t.m().im - kernel) / PI
        })
        .collect())
}

/// Density `ρ(E) ≈ Im m(E + iη)/π` on the grid.
///
/// With `extrapolate`, returns `2ρ_{η/2} − ρ_η`, which removes the first-order
/// smoothing bias of the Cauchy kernel.
pub fn density_curve(
    sys: &SubordinationSystem<'_>,
    e_grid: &[f64],
    eta: f64,
    cfg: &SolverConfig,
    extrapolate: bool,
) -> Result<DensityCurve> {
    if !(eta > 0.0) {
        return Err(Error::OffUpperHalfPlane(Complex64::new(0.0, eta)));
    }
    if e_grid.len() < 2 || e_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidConfig(
            "density grid must be strictly increasing with at least two points".into(),
        ));
    }
    let atoms = free_atoms(sys.mu_a(), sys.mu_b());
    let coarse = smoothed_density(sys, e_grid, eta, &atoms, cfg)?;
    let raw = if extrapolate {
        let fine = smoothed_density(sys, e_grid, 0.5 * eta, &atoms, cfg)?;
        fine.iter().zip(&coarse).map(|(f, c)| 2.0 * f - c).collect()
    } else {
        coarse
    };
    let clamped = raw.iter().fold(0.0f64, |acc, &r| acc.max(-r));
    let rho: Vec<f64> = raw.into_iter().map(|r| r.max(0.0)).collect();
    let sup_density = rho.iter().copied().fold(0.0, f64::max);
    Ok(DensityCurve {
        e_grid: e_grid.to_vec(),
        rho,
        eta_used: eta,
        extrapolated: extrapolate,
        sup_density,
        atoms,
        clamped,
    })
}

/// Cumulative trapezoid integral of the density plus the atoms, normalized
/// to total mass one.
pub fn cdf_curve(d: &DensityCurve) -> Result<CdfCurve> {
    let atom_mass = d.atom_mass();
    let ac_mass = d.mass();
    let total = ac_mass + atom_mass;
    if !(0.95..=1.05).contains(&total) {
        return Err(Error::SupportNotCovered(total));
    }
    let mut cumulative = Vec::with_capacity(d.e_grid.len());
    let mut acc = 0.0;
    cumulative.push(0.0);
    for (x, y) in d.e_grid.windows(2).zip(d.rho.windows(2)) {
        acc += 0.5 * (x[1] - x[0]) * (y[0] + y[1]);
        cumulative.push(acc);
    }
    let ac_target = (1.0 - atom_mass).max(0.0);
    let scale = if ac_mass > 0.0 && ac_target > 1e-12 {
        ac_target / ac_mass
    } else {
        0.0
    };
    let f_cont: Vec<f64> = cumulative.iter().map(|c| c * scale).collect();
    let f = d
        .e_grid
        .iter()
        .zip(&f_cont)
        .map(|(&e, &c)| {
            let jumps: f64 = d.atoms.iter().filter(|a| a.0 <= e).map(|a| a.1).sum();
            (c + jumps).clamp(0.0, 1.0)
        })
        .collect();
    Ok(CdfCurve {
        e_grid: d.e_grid.clone(),
        f,
        f_cont,
        atoms: d.atoms.clone(),
        sup_density: d.sup_density,
    })
}

/// Ratio between consecutive heights of the vertical quadrature.
const VERTICAL_RATIO: f64 = 0.8;

/// Distribution function from vertical integrals of the transform.
///
/// With `Φ(z) = ∫ log(λ − z) dμ(λ)` one has `F(E) = −Im Φ(E + i0)/π` and
/// `Φ' = −m`. Writing `c` for the continuous mass and `M` for its mean,
/// `Φ_c(z) − c·log(M − z)` vanishes at infinity, so
///
/// ```text
/// Im Φ_c(E + iη) = c·arg(M − E − iη) + Re ∫_η^∞ (m_c(E + it) + c/(E − M + it)) dt.
/// ```
///
/// The integral is evaluated by the trapezoid rule in `log t` on heights from
/// `1e6·max(K, 1)` down to `eta_min`, which converges geometrically because the
/// integrand decays exponentially at both ends in that variable. Atoms are
/// removed from `m` and added back as jumps. Unlike [`cdf_curve`], the result
/// has no quadrature error from the square-root edges of the density; what
/// remains is the smoothing at height `eta_min`.
pub fn cdf_from_transform(
    sys: &SubordinationSystem<'_>,
    e_grid: &[f64],
    eta_min: f64,
    cfg: &SolverConfig,
) -> Result<CdfCurve> {
    use rayon::prelude::*;

    if !(eta_min > 0.0) {
        return Err(Error::OffUpperHalfPlane(Complex64::new(0.0, eta_min)));
    }
    if e_grid.len() < 2 || e_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidConfig(
            "CDF grid must be strictly increasing with at least two points".into(),
        ));
    }
    let atoms = free_atoms(sys.mu_a(), sys.mu_b());
    let atom_mass: f64 = atoms.iter().map(|a| a.1).sum();
    let cont_mass = (1.0 - atom_mass).max(0.0);
    let total_mean = sys.mu_a().mean() + sys.mu_b().mean();
    let cont_mean = if cont_mass > 1e-12 {
        (total_mean - atoms.iter().map(|(x, w)| x * w).sum::<f64>()) / cont_mass
    } else {
        0.0
    };

    let t_top = 1e6 * sys.norm_scale().max(1.0);
    let levels = ((t_top / eta_min).ln() / (1.0 / VERTICAL_RATIO).ln()).ceil() as usize;
    let step = (1.0 / VERTICAL_RATIO).ln();
    let heights: Vec<f64> = (0..=levels)
        .map(|k| eta_min * (step * (levels - k) as f64).exp())
        .collect();

    let per_point: Vec<(f64, f64)> = e_grid
        .par_iter()
        .map(|&e| -> Result<(f64, f64)> {
            if cont_mass <= 1e-12 {
                return Ok((0.0, 0.0));
            }
            // Exactly at a spectral edge the system degenerates as η → 0; the
            // integral is then truncated at the lowest height reached.
            let (ladder, _) = sys.solve_ladder_prefix(e, &heights, cfg)?;
            let values: Vec<f64> = ladder
                .iter()
                .map(|t| {
                    let z = t.z;
                    let m_atoms: Complex64 =
                        atoms.iter().map(|(x, w)| *w / (Complex64::new(*x, 0.0) - z)).sum();
                    let asymptote = cont_mass / (Complex64::new(e - cont_mean, 0.0) + Complex64::new(0.0, z.im));
                    (t.m() - m_atoms + asymptote).re * z.im
                })
                .collect();
            let n = values.len();
            let integral = step * (values.iter().sum::<f64>() - 0.5 * (values[0] + values[n - 1]));
            let eta_low = ladder[n - 1].z.im;
            let arg = (-eta_low).atan2(cont_mean - e);
            let f = -(cont_mass * arg + integral) / PI;
            let bottom = ladder[n - 1];
            let kernel: f64 = atoms
                .iter()
                .map(|(x, w)| w * eta_low / ((e - x).powi(2) + eta_low * eta_low))
                .sum();
            Ok((f.clamp(0.0, cont_mass), (bottom.m().im - kernel) / PI))
        })
        .collect::<Result<_>>()?;

    let mut f_cont = Vec::with_capacity(per_point.len());
    let mut running: f64 = 0.0;
    for &(f, _) in &per_point {
        running = running.max(f);
        f_cont.push(running);
    }
    let sup_density = per_point.iter().map(|p| p.1).fold(0.0, f64::max);
    let f = e_grid
        .iter()
        .zip(&f_cont)
        .map(|(&e, &c)| {
            let jumps: f64 = atoms.iter().filter(|a| a.0 <= e).map(|a| a.1).sum();
            (c + jumps).clamp(0.0, 1.0)
        })
        .collect();
    Ok(CdfCurve {
        e_grid: e_grid.to_vec(),
        f,
        f_cont,
        atoms,
        sup_density,
    })
}

/// Kolmogorov distance between an empirical measure and a CDF curve.
pub fn ks_distance(empirical: &SpectralMeasure, cdf: &CdfCurve) -> Result<f64> {
    let (lo, hi) = (cdf.lo(), cdf.hi());
    if let Some(&value) = empirical.atoms().iter().find(|&&x| x < lo || x > hi) {
        return Err(Error::Coverage { lo, hi, value });
    }
    let mut below = 0.0;
    let mut dist: f64 = 0.0;
    for (x, w) in empirical.iter() {
        let above = below + w;
        dist = dist
            .max((cdf.eval_left(x) - below).abs())
            .max((cdf.eval(x) - above).abs());
        below = above;
    }
    Ok(dist)
}

/// One point of `m_H` and `m_⊞` on the line `E + iη`.
#[derive(Debug, Clone, Copy)]
pub struct TransformSample {
    pub e: f64,
    pub m_h: Complex64,
    pub m_free: Complex64,
}

/// Right-hand side of Bai's inequality,
/// `c₁ [∫ |m_H − m_⊞| dE + 16 T η]`, integrating over the samples inside
/// `[−c₂K, c₂K]`.
///
/// The second term bounds `η⁻¹ sup_E ∫_{|x|≤4η} |F(E+x) − F(E)| dx` by the
/// density bound `T` of the CDF curve.
pub fn bai_bound(
    samples: &[TransformSample],
    cdf: &CdfCurve,
    eta: f64,
    c1: f64,
    c2: f64,
    norm_bound: f64,
) -> f64 {
    let half = c2 * norm_bound;
    let inside: Vec<&TransformSample> = samples
        .iter()
        .filter(|s| s.e >= -half - 1e-12 && s.e <= half + 1e-12)
        .collect();
    let xs: Vec<f64> = inside.iter().map(|s| s.e).collect();
    let ys: Vec<f64> = inside.iter().map(|s| (s.m_h - s.m_free).norm()).collect();
    c1 * (trapezoid(&xs, &ys) + 16.0 * cdf.sup_density * eta)
}

/// Moments `∫ λ^k dμ_⊞` for `k = 0..=k_max`, by the trapezoid rule for
/// `−(2πi)⁻¹ ∮ m(z) z^k dz` on a circle enclosing the support.
///
/// The integrand is analytic on a neighbourhood of the circle, so the rule
/// converges geometrically.
pub fn moments_from_transform(
    sys: &SubordinationSystem<'_>,
    k_max: u32,
    cfg: &SolverConfig,
) -> Result<Vec<f64>> {
    const POINTS: usize = 96;
    let radius = 2.0 * sys.norm_scale() + 2.0;
    let mut sums = vec![0.0; k_max as usize + 1];
    for j in 0..POINTS {
        let theta = PI * (j as f64 + 0.5) / POINTS as f64;
        let z = Complex64::from_polar(radius, theta);
        let m = sys.solve(z, cfg)?.m();
        let mut zp = z;
        for s in sums.iter_mut() {
            *s -= (m * zp).re;
            zp *= z;
        }
    }
    Ok(sums.into_iter().map(|s| s / POINTS as f64).collect())
}

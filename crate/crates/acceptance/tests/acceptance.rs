//! End-to-end acceptance run: one line per criterion, nonzero exit if any fails.

use std::f64::consts::PI;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use num_complex::Complex64;
use rand::Rng;

use freeconv::experiments::{
    concentration_experiment, error_term_experiment, local_law_experiment, variance_scaling_experiment,
    ExperimentReport, ExperimentSetup,
};
use freeconv::inversion::{density_curve, moments_from_transform, uniform_grid};
use freeconv::rmt::pv_identity_gap;
use freeconv::rng::substream;
use freeconv::subordination::residual_scale;
use freeconv::{Ensemble, EnsembleSampler, SolverConfig, SpectralMeasure, SubordinationSystem, SubordinationTriple};

// The CLI belongs to another package; a workspace test run builds it next to
// this executable's parent directory. FREECONV_BIN overrides the lookup.
fn cli_binary() -> Option<PathBuf> {
    if let Some(p) = std::env::var_os("FREECONV_BIN") {
        return Some(PathBuf::from(p));
    }
    let exe = std::env::current_exe().ok()?;
    let path = exe.parent()?.parent()?.join(format!("freeconv{}", std::env::consts::EXE_SUFFIX));
    path.is_file().then_some(path)
}

struct Outcome {
    passed: bool,
    detail: String,
}

impl Outcome {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Self { passed, detail: detail.into() }
    }
}

fn bernoulli() -> SpectralMeasure {
    SpectralMeasure::from_eigenvalues(&[-1.0, 1.0]).unwrap()
}

fn line_grid() -> Vec<f64> {
    uniform_grid(-6.0, 6.0, 121)
}

const ETAS: [f64; 3] = [0.05, 0.5, 4.0];

fn random_measure(rng: &mut impl Rng, max_atoms: usize, k: f64) -> SpectralMeasure {
    let n = rng.random_range(1..=max_atoms);
    let atoms: Vec<f64> = (0..n).map(|_| rng.random_range(-k..=k)).collect();
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    SpectralMeasure::new(atoms, raw.iter().map(|w| w / total).collect()).unwrap()
}

fn measure_with_atoms(rng: &mut impl Rng, n: usize, k: f64) -> SpectralMeasure {
    loop {
        let atoms: Vec<f64> = (0..n).map(|_| rng.random_range(-k..=k)).collect();
        let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let mu = SpectralMeasure::new(atoms, raw.iter().map(|w| w / total).collect()).unwrap();
        if mu.len() == n {
            return mu;
        }
    }
}

fn dirac_exactness() -> Outcome {
    let start = Instant::now();
    let cfg = SolverConfig::default();
    let grid = line_grid();
    let values = [-2.0, 0.0, 1.5];
    let (mut err_m, mut err_s) = (0.0f64, 0.0f64);
    for &a in &values {
        for &b in &values {
            let (mu_a, mu_b) = (SpectralMeasure::dirac(a), SpectralMeasure::dirac(b));
            let sys = SubordinationSystem::new(&mu_a, &mu_b);
            for eta in ETAS {
                for t in sys.solve_line(&grid, eta, &cfg).unwrap() {
                    let exact = -1.0 / (t.z - a - b);
                    err_m = err_m.max((t.m() - exact).norm());
                    err_s = err_s.max((t.s_a() - a).norm()).max((t.s_b() - b).norm());
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome::new(
        err_m <= 1e-10 && err_s <= 1e-10 && secs < 1.0,
        format!("max |m - exact| = {err_m:.2e}, max |S - atom| = {err_s:.2e}, {secs:.2} s"),
    )
}

fn zero_reduction() -> Outcome {
    let cfg = SolverConfig::default();
    let grid = line_grid();
    let zero = SpectralMeasure::dirac(0.0);
    let mut rng = substream(20, 0);
    let mut err = 0.0f64;
    for _ in 0..20 {
        let mu = measure_with_atoms(&mut rng, 10, 3.0);
        let sys = SubordinationSystem::new(&zero, &mu);
        for eta in ETAS {
            for t in sys.solve_line(&grid, eta, &cfg).unwrap() {
                err = err.max((t.m() - mu.stieltjes(t.z).unwrap()).norm());
            }
        }
    }
    Outcome::new(err <= 1e-10, format!("max |m - m_mu| = {err:.2e} over 20 measures"))
}

fn arcsine_cdf(e: f64) -> f64 {
    0.5 + (e / 2.0).clamp(-1.0, 1.0).asin() / PI
}

fn arcsine_law() -> Outcome {
    // Monte Carlo oracle for the closed form: one N = 1000 draw, histogram
    // against exact bin averages.
    let mu = bernoulli();
    let draw = EnsembleSampler::new(&mu, &mu, 1000, Ensemble::Unitary).unwrap().draw(0, 0).unwrap();
    let edges = uniform_grid(-1.8, 1.8, 19);
    let mut oracle_err = 0.0f64;
    for w in edges.windows(2) {
        let count = draw.eigenvalues.iter().filter(|&&x| x > w[0] && x <= w[1]).count();
        let width = w[1] - w[0];
        let empirical = count as f64 / (1000.0 * width);
        let exact = (arcsine_cdf(w[1]) - arcsine_cdf(w[0])) / width;
        oracle_err = oracle_err.max((empirical - exact).abs());
    }

    let start = Instant::now();
    let sys = SubordinationSystem::new(&mu, &mu);
    let grid = uniform_grid(-1.8, 1.8, 361);
    let curve = density_curve(&sys, &grid, 1e-3, &SolverConfig::default(), true).unwrap();
    let err = curve
        .e_grid
        .iter()
        .zip(&curve.rho)
        .map(|(&e, &r)| (r - 1.0 / (PI * (4.0 - e * e).sqrt())).abs())
        .fold(0.0, f64::max);
    let secs = start.elapsed().as_secs_f64();
    Outcome::new(
        oracle_err <= 0.02 && err <= 5e-3 && secs < 10.0,
        format!("histogram vs closed form {oracle_err:.2e}, max |rho - closed form| = {err:.2e}, {secs:.2} s"),
    )
}

fn moment_additivity() -> Outcome {
    let cfg = SolverConfig::default();
    let mut rng = substream(40, 0);
    let (mut err_mean, mut err_var) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let k_a = rng.random_range(0.1..=3.0);
        let k_b = rng.random_range(0.1..=3.0);
        let mu_a = random_measure(&mut rng, 20, k_a);
        let mu_b = random_measure(&mut rng, 20, k_b);
        let sys = SubordinationSystem::new(&mu_a, &mu_b);
        let m = moments_from_transform(&sys, 2, &cfg).unwrap();
        let mean = m[1] / m[0];
        let var = m[2] / m[0] - mean * mean;
        err_mean = err_mean.max((mean - mu_a.mean() - mu_b.mean()).abs());
        err_var = err_var.max((var - mu_a.variance() - mu_b.variance()).abs());
    }
    Outcome::new(
        err_mean <= 1e-8 && err_var <= 1e-6,
        format!("max mean error {err_mean:.2e}, max variance error {err_var:.2e} over 100 pairs"),
    )
}

fn solver_hygiene() -> Outcome {
    let cfg = SolverConfig::default();
    let other = SolverConfig { continuation_shrink: 0.5, eta_top_factor: 16.0, ..cfg };
    let mut rng = substream(50, 0);
    let grid = uniform_grid(-6.0, 6.0, 41);
    let (mut worst_res, mut worst_path) = (0.0f64, 0.0f64);
    let mut sign_violations = 0;
    let mut triples = 0;
    for _ in 0..20 {
        let (n_a, n_b) = (rng.random_range(2..10), rng.random_range(2..10));
        let mu_a = measure_with_atoms(&mut rng, n_a, 3.0);
        let mu_b = measure_with_atoms(&mut rng, n_b, 3.0);
        let sys = SubordinationSystem::new(&mu_a, &mu_b);
        for eta in [1e-3, 0.05, 0.5, 4.0] {
            let first = sys.solve_line(&grid, eta, &cfg).unwrap();
            let second = sys.solve_line(&grid, eta, &other).unwrap();
            for (t, u) in first.iter().zip(&second) {
                triples += 1;
                let r = sys.residual(t).unwrap();
                let rnorm = r.iter().fold(0.0f64, |acc, c| acc.max(c.norm()));
                worst_res = worst_res.max(rnorm / residual_scale(&t.x));
                if !(t.m().im > 0.0 && t.s_a().im < 0.0 && t.s_b().im < 0.0) {
                    sign_violations += 1;
                }
                worst_path = worst_path.max(path_difference(t, u));
            }
        }
    }
    Outcome::new(
        worst_res <= 1e-12 && sign_violations == 0 && worst_path <= 1e-10,
        format!(
            "{triples} triples: max scaled residual {worst_res:.2e}, sign violations {sign_violations}, path difference {worst_path:.2e}"
        ),
    )
}

fn path_difference(t: &SubordinationTriple, u: &SubordinationTriple) -> f64 {
    [(t.m(), u.m()), (t.s_a(), u.s_a()), (t.s_b(), u.s_b())]
        .iter()
        .map(|(p, q)| (p - q).norm() / p.norm().max(1.0))
        .fold(0.0, f64::max)
}

fn jacobian_check() -> Outcome {
    let mut rng = substream(60, 0);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let mu_a = random_measure(&mut rng, 10, 3.0);
        let mu_b = random_measure(&mut rng, 10, 3.0);
        let sys = SubordinationSystem::new(&mu_a, &mu_b);
        let z = Complex64::new(rng.random_range(-5.0..5.0), rng.random_range(0.05..4.0));
        let m = Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(0.1..1.0));
        let s_a = Complex64::new(rng.random_range(-3.0..3.0), -rng.random_range(0.0..2.0));
        let s_b = Complex64::new(rng.random_range(-3.0..3.0), -rng.random_range(0.0..2.0));
        let t = SubordinationTriple::from_functions(z, m, s_a, s_b);
        let jac = sys.jacobian(&t).unwrap();
        for col in 0..3 {
            let h = 1e-6 * t.x[col].norm().max(1.0);
            let shifted = |sign: f64| {
                let mut x = t.x;
                x[col] += sign * h;
                sys.residual(&SubordinationTriple::new(z, x)).unwrap()
            };
            let (plus, minus) = (shifted(1.0), shifted(-1.0));
            for row in 0..3 {
                let fd = (plus[row] - minus[row]) / (2.0 * h);
                let exact = jac[row][col];
                let rel = (fd - exact).norm() / exact.norm().max(1e-12);
                if exact.norm() == 0.0 && fd.norm() == 0.0 {
                    continue;
                }
                worst = worst.max(rel);
            }
        }
    }
    Outcome::new(worst <= 1e-5, format!("max entrywise relative error {worst:.2e} over 100 points"))
}

fn pv_identity() -> Outcome {
    let mu = bernoulli();
    let start = Instant::now();
    let g = pv_identity_gap(&mu, &mu, 8, Complex64::new(0.0, 2.0), 20000, 0, Ensemble::Unitary).unwrap();
    let secs = start.elapsed().as_secs_f64();
    Outcome::new(
        g.gap <= 4.0 * g.stderr && secs < 60.0,
        format!("gap {:.3e}, stderr {:.3e}, ratio {:.2}, {secs:.1} s", g.gap, g.stderr, g.gap / g.stderr),
    )
}

fn checks_line(report: &ExperimentReport) -> String {
    report
        .checks
        .iter()
        .map(|c| format!("{} {} {:.4e}", if c.passed { "ok" } else { "x" }, c.name, c.value))
        .collect::<Vec<_>>()
        .join("; ")
}

fn variance_scaling() -> Outcome {
    let mu = bernoulli();
    let setup = ExperimentSetup::new(&mu, &mu, vec![50, 100, 200, 400], 200, 0);
    let start = Instant::now();
    let report = variance_scaling_experiment(&setup, Complex64::new(0.0, 1.0)).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let has_both = report.check("slope_variance_m").is_some() && report.check("slope_variance_f_b").is_some();
    Outcome::new(report.passed && has_both && secs < 300.0, format!("{}, {secs:.0} s", checks_line(&report)))
}

fn concentration() -> Outcome {
    let mu = bernoulli();
    let setup = ExperimentSetup::new(&mu, &mu, vec![100, 400], 100, 0);
    let report = concentration_experiment(&setup).unwrap();
    let has_both = report.check("median_decay_ratio").is_some() && report.check("max_ks_at_largest_n").is_some();
    Outcome::new(report.passed && has_both, checks_line(&report))
}

fn local_law() -> Outcome {
    let mu = bernoulli();
    let setup = ExperimentSetup::new(&mu, &mu, vec![126, 250, 500], 50, 0);
    let report = local_law_experiment(&setup, 0.2, Some((-1.6, 1.6))).unwrap();
    let medians: Vec<String> = report.levels.iter().map(|l| format!("{:.4}", l.summary.median)).collect();
    let has_both = report.check("pass_fraction_at_largest_n").is_some() && report.check("medians_decrease").is_some();
    Outcome::new(report.passed && has_both, format!("{}; medians {}", checks_line(&report), medians.join(", ")))
}

fn error_term() -> Outcome {
    let mu = bernoulli();
    let setup = ExperimentSetup::new(&mu, &mu, vec![16, 32, 64, 128], 500, 0);
    let report = error_term_experiment(&setup, Complex64::new(0.0, 4.0)).unwrap();
    let Some(slope) = report.check("slope_abs_r_a") else {
        return Outcome::new(false, "no slope fitted");
    };
    Outcome::new(slope.passed, checks_line(&report))
}

fn cli_determinism() -> Outcome {
    let Some(bin) = cli_binary() else {
        return Outcome::new(false, "freeconv binary not found; build it with `cargo build -p freeconv` or set FREECONV_BIN");
    };
    let root = tempfile::tempdir().unwrap();
    let dir = root.path();
    let b = dir.join("b.json");
    let t = dir.join("t.json");
    fs::write(&b, r#"{"atoms":[-1,1],"weights":[0.5,0.5]}"#).unwrap();
    fs::write(&t, r#"{"atoms":[-1,0,2],"weights":[0.25,0.25,0.5]}"#).unwrap();
    let (b, t) = (b.to_str().unwrap(), t.to_str().unwrap());
    let commands: Vec<Vec<&str>> = vec![
        vec!["convolve", "--mu-a", b, "--mu-b", t, "--grid", "101", "--extrapolate"],
        vec!["sample", "--mu-a", b, "--mu-b", t, "--N", "8,16", "--replicates", "3"],
        vec!["experiment", "concentration", "--mu-a", b, "--mu-b", b, "--N", "20,40", "--replicates", "4"],
        vec!["experiment", "local-law", "--mu-a", b, "--mu-b", b, "--N", "40,80", "--replicates", "4"],
        vec!["experiment", "variance", "--mu-a", b, "--mu-b", t, "--N", "8,16", "--replicates", "30"],
        vec!["experiment", "error-term", "--mu-a", b, "--mu-b", b, "--N", "8,16", "--replicates", "30"],
        vec!["experiment", "identity", "--mu-a", b, "--mu-b", t, "--N", "8", "--replicates", "20"],
    ];
    let mut compared = 0;
    for (i, args) in commands.iter().enumerate() {
        let mut outputs = Vec::new();
        for run in 0..2 {
            let out = dir.join(format!("c{i}_{run}"));
            let status = Command::new(&bin).args(args).arg("--out").arg(&out).output().unwrap().status;
            if !matches!(status.code(), Some(0 | 3)) {
                return Outcome::new(false, format!("{} exited with {status}", args[..2].join(" ")));
            }
            outputs.push(read_dir_bytes(&out));
        }
        if outputs[0].is_empty() || outputs[0] != outputs[1] {
            return Outcome::new(false, format!("{} outputs differ between runs", args[..2].join(" ")));
        }
        compared += outputs[0].len();
    }
    Outcome::new(true, format!("{compared} files byte-identical across reruns of {} commands", commands.len()))
}

fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .map(|rd| {
            rd.map(|e| {
                let e = e.unwrap();
                (e.file_name().into_string().unwrap(), fs::read(e.path()).unwrap())
            })
            .collect()
        })
        .unwrap_or_default();
    files.sort();
    files
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("dirac exactness", dirac_exactness),
        ("reduction with a zero summand", zero_reduction),
        ("arcsine law", arcsine_law),
        ("moment additivity", moment_additivity),
        ("solver hygiene and path independence", solver_hygiene),
        ("jacobian against finite differences", jacobian_check),
        ("resolvent identity gap", pv_identity),
        ("variance scaling", variance_scaling),
        ("concentration decay", concentration),
        ("local law", local_law),
        ("error term decay", error_term),
        ("cli determinism", cli_determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Outcome::new(false, format!("panicked: {msg}"))
        });
        if !outcome.passed {
            failed += 1;
        }
        println!(
            "criterion {:>2} {:<40} {} [{:.1} s] {}",
            i + 1,
            name,
            if outcome.passed { "pass" } else { "FAIL" },
            start.elapsed().as_secs_f64(),
            outcome.detail
        );
    }
    println!("acceptance: {} failed", failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

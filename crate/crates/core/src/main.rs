use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use num_complex::Complex64;
use serde::Serialize;

use freeconv::experiments::{
    concentration_experiment, error_term_experiment, identity_experiment, local_law_experiment,
    variance_scaling_experiment, BaiParams, ExperimentReport, ExperimentSetup,
};
use freeconv::inversion::{cdf_from_transform, covering_grid, density_curve, DEFAULT_GRID_POINTS};
use freeconv::io::{curve_csv, read_measure, spectrum_csv, table_csv, to_json, write_atomic};
use freeconv::{Ensemble, EnsembleSampler, Error, SolverConfig, SpectralMeasure, SubordinationSystem};

const EXIT_VALIDATION: u8 = 2;
const EXIT_THRESHOLD: u8 = 3;
const EXIT_NUMERICAL: u8 = 4;

#[derive(Parser, Debug)]
#[command(name = "freeconv", version, about = "Free additive convolution and random matrix experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Measures {
    /// JSON file with the spectral measure of A.
    #[arg(long = "mu-a")]
    mu_a: PathBuf,
    /// JSON file with the spectral measure of B.
    #[arg(long = "mu-b")]
    mu_b: PathBuf,
}

#[derive(Args, Debug)]
struct Sampling {
    /// Matrix dimensions, comma separated.
    #[arg(long = "N", value_delimiter = ',', required = true)]
    n: Vec<usize>,
    #[arg(long, default_value_t = 100)]
    replicates: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = EnsembleArg::Unitary)]
    ensemble: EnsembleArg,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum EnsembleArg {
    Unitary,
    Orthogonal,
}

impl From<EnsembleArg> for Ensemble {
    fn from(e: EnsembleArg) -> Self {
        match e {
            EnsembleArg::Unitary => Ensemble::Unitary,
            EnsembleArg::Orthogonal => Ensemble::Orthogonal,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ExperimentName {
    Concentration,
    LocalLaw,
    Variance,
    ErrorTerm,
    Identity,
}

impl ExperimentName {
    fn file_stem(self) -> &'static str {
        match self {
            ExperimentName::Concentration => "concentration",
            ExperimentName::LocalLaw => "local-law",
            ExperimentName::Variance => "variance",
            ExperimentName::ErrorTerm => "error-term",
            ExperimentName::Identity => "identity",
        }
    }

    /// Imaginary part of the evaluation point, or the window half-width.
    fn default_eta(self) -> f64 {
        match self {
            ExperimentName::Concentration => 0.1,
            ExperimentName::LocalLaw => 0.2,
            ExperimentName::Variance => 1.0,
            ExperimentName::ErrorTerm => 4.0,
            ExperimentName::Identity => 2.0,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Density and CDF of the free convolution on a grid.
    Convolve {
        #[command(flatten)]
        measures: Measures,
        /// Height above the real axis at which the curves are taken.
        #[arg(long, default_value_t = 1e-3)]
        eta: f64,
        /// Number of grid points.
        #[arg(long, default_value_t = DEFAULT_GRID_POINTS)]
        grid: usize,
        #[arg(long, default_value_t = 1e-12)]
        tol: f64,
        /// Richardson-extrapolate the density towards the real axis.
        #[arg(long)]
        extrapolate: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Eigenvalues of random draws of H = A + U B U*.
    Sample {
        #[command(flatten)]
        measures: Measures,
        #[command(flatten)]
        sampling: Sampling,
        #[arg(long)]
        out: PathBuf,
    },
    /// Monte Carlo experiment with a JSON report and per-replicate CSV.
    Experiment {
        #[arg(value_enum)]
        name: ExperimentName,
        #[command(flatten)]
        measures: Measures,
        #[command(flatten)]
        sampling: Sampling,
        /// Im z for resolvent experiments, window half-width for local-law,
        /// Bai height for concentration.
        #[arg(long)]
        eta: Option<f64>,
        /// Re z for resolvent experiments.
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        e: f64,
        /// Energy range of the local-law windows (default: support hull).
        #[arg(long = "e-min", allow_negative_numbers = true)]
        e_min: Option<f64>,
        #[arg(long = "e-max", allow_negative_numbers = true)]
        e_max: Option<f64>,
        #[arg(long, default_value_t = 1.0)]
        c1: f64,
        #[arg(long, default_value_t = 1.0)]
        c2: f64,
        #[arg(long, default_value_t = 1e-12)]
        tol: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug)]
enum Failure {
    Validation(String),
    Numerical(String),
    Threshold(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_numerical() {
            Failure::Numerical(e.to_string())
        } else {
            Failure::Validation(e.to_string())
        }
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure::Validation(msg.into())
}

fn load(m: &Measures) -> Result<(SpectralMeasure, SpectralMeasure), Failure> {
    let read = |p: &Path| read_measure(p).map_err(|e| invalid(format!("{}: {e}", p.display())));
    Ok((read(&m.mu_a)?, read(&m.mu_b)?))
}

fn prepare_out(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| invalid(format!("{}: {e}", dir.display())))
}

fn write(path: &Path, contents: &str) -> Result<(), Failure> {
    write_atomic(path, contents.as_bytes()).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

fn solver(tol: f64) -> Result<SolverConfig, Failure> {
    let cfg = SolverConfig { newton_tol: tol, ..SolverConfig::default() };
    cfg.validate()?;
    Ok(cfg)
}

fn positive(name: &str, v: f64) -> Result<f64, Failure> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(invalid(format!("--{name} must be positive, got {v}")))
    }
}

#[derive(Serialize)]
struct ConvolveSummary {
    eta: f64,
    extrapolated: bool,
    atoms: Vec<(f64, f64)>,
    a1_violated: bool,
    sup_density: f64,
    continuous_mass: f64,
}

fn convolve(measures: &Measures, eta: f64, grid: usize, tol: f64, extrapolate: bool, out: &Path) -> Result<(), Failure> {
    positive("eta", eta)?;
    if grid < 2 {
        return Err(invalid("--grid must be at least 2"));
    }
    let cfg = solver(tol)?;
    let (mu_a, mu_b) = load(measures)?;
    let sys = SubordinationSystem::new(&mu_a, &mu_b);
    let e_grid = covering_grid(&sys, grid);
    let density = density_curve(&sys, &e_grid, eta, &cfg, extrapolate)?;
    let cdf = cdf_from_transform(&sys, &e_grid, eta, &cfg)?;
    prepare_out(out)?;
    write(&out.join("density.csv"), &curve_csv(("E", "rho"), &density.e_grid, &density.rho))?;
    write(&out.join("cdf.csv"), &curve_csv(("E", "F"), &cdf.e_grid, &cdf.f))?;
    let summary = ConvolveSummary {
        eta,
        extrapolated: extrapolate,
        a1_violated: density.a1_violated(),
        continuous_mass: density.mass(),
        sup_density: density.sup_density,
        atoms: density.atoms,
    };
    write(&out.join("summary.json"), &to_json(&summary)?)?;
    Ok(())
}

fn sample(measures: &Measures, s: &Sampling, out: &Path) -> Result<(), Failure> {
    if s.replicates == 0 {
        return Err(invalid("--replicates must be positive"));
    }
    let (mu_a, mu_b) = load(measures)?;
    let samplers = s
        .n
        .iter()
        .map(|&n| EnsembleSampler::new(&mu_a, &mu_b, n, s.ensemble.into()))
        .collect::<Result<Vec<_>, _>>()?;
    prepare_out(out)?;
    for sampler in &samplers {
        for r in 0..s.replicates {
            let d = sampler.draw(s.seed, r as u64)?;
            let name = format!("spectrum_N{}_r{r}.csv", sampler.dim());
            write(&out.join(name), &spectrum_csv(&d.eigenvalues))?;
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn experiment(
    name: ExperimentName,
    measures: &Measures,
    s: &Sampling,
    eta: Option<f64>,
    e: f64,
    e_range: (Option<f64>, Option<f64>),
    c1: f64,
    c2: f64,
    tol: f64,
    out: &Path,
) -> Result<ExperimentReport, Failure> {
    if s.n.is_empty() {
        return Err(invalid("--N list is empty"));
    }
    let eta = positive("eta", eta.unwrap_or(name.default_eta()))?;
    let (mu_a, mu_b) = load(measures)?;
    let mut setup = ExperimentSetup::new(&mu_a, &mu_b, s.n.clone(), s.replicates, s.seed);
    setup.ensemble = s.ensemble.into();
    setup.solver = solver(tol)?;
    let z = Complex64::new(e, eta);
    let report = match name {
        ExperimentName::Concentration => {
            setup.bai = Some(BaiParams { eta, c1: positive("c1", c1)?, c2: positive("c2", c2)? });
            concentration_experiment(&setup)?
        }
        ExperimentName::LocalLaw => {
            let range = match e_range {
                (Some(lo), Some(hi)) => Some((lo, hi)),
                (None, None) => None,
                _ => return Err(invalid("--e-min and --e-max go together")),
            };
            local_law_experiment(&setup, eta, range)?
        }
        ExperimentName::Variance => variance_scaling_experiment(&setup, z)?,
        ExperimentName::ErrorTerm => error_term_experiment(&setup, z)?,
        ExperimentName::Identity => identity_experiment(&setup, z)?,
    };
    prepare_out(out)?;
    write(&out.join(format!("{}.json", name.file_stem())), &to_json(&report)?)?;
    write(&out.join(format!("{}.csv", name.file_stem())), &table_csv(&report.raw))?;
    Ok(report)
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Convolve { measures, eta, grid, tol, extrapolate, out } => convolve(&measures, eta, grid, tol, extrapolate, &out),
        Command::Sample { measures, sampling, out } => sample(&measures, &sampling, &out),
        Command::Experiment { name, measures, sampling, eta, e, e_min, e_max, c1, c2, tol, out } => {
            let report = experiment(name, &measures, &sampling, eta, e, (e_min, e_max), c1, c2, tol, &out)?;
            for c in &report.checks {
                let verdict = if c.passed { "pass" } else { "FAIL" };
                match c.upper {
                    Some(hi) => println!("{verdict} {} = {:.6e} (in [{:.6e}, {:.6e}])", c.name, c.value, c.threshold, hi),
                    None => println!("{verdict} {} = {:.6e} ({} {:.6e})", c.name, c.value, c.relation, c.threshold),
                }
            }
            if report.passed {
                Ok(())
            } else {
                let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
                Err(Failure::Threshold(failed.join(", ")))
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_VALIDATION)
        }
        Err(Failure::Threshold(msg)) => {
            eprintln!("threshold not met: {msg}");
            ExitCode::from(EXIT_THRESHOLD)
        }
        Err(Failure::Numerical(msg)) => {
            eprintln!("numerical failure: {msg}");
            ExitCode::from(EXIT_NUMERICAL)
        }
    }
}

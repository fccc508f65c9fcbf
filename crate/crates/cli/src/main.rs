use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::DVector;

use spconf_core::application::{ingest, run_application, write_app_report, AppOptions, IngestOptions, TemperatureUnit};
use spconf_core::basis::{principal_kriging_basis, NullSpaceType};
use spconf_core::bias::{bias_curve_with, write_curves, write_curves_csv};
use spconf_core::competitors::MethodId;
use spconf_core::harness::{run_study, StudyConfig};
use spconf_core::simulator::{
    calibrate_sigma_w_with, conditional_law_with, derive_seed, exposure_from_factor, fmt_sig, sample_grid_sites,
    sample_replicate, write_replicate_archive, ConfoundingScenario, FieldGeometry,
};
use spconf_core::spatial::{Location, SiteSet, SqrtMethod};
use spconf_core::ss_regression::{fit_spike_slab, summarize, InclusionPrior, McmcConfig, PriorFamily, SsPriorConfig};
use spconf_core::{Error, Result};

#[derive(Parser)]
#[command(name = "spconf", version, about = "Spatial confounding simulation, bias analysis and estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Sqrt {
    Eigen,
    Cholesky,
}

impl From<Sqrt> for SqrtMethod {
    fn from(s: Sqrt) -> Self {
        match s {
            Sqrt::Eigen => SqrtMethod::SymmetricEigen,
            Sqrt::Cholesky => SqrtMethod::Cholesky,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Family {
    Fv,
    Nmig,
    Mom,
}

#[derive(Clone, Copy, ValueEnum)]
enum TempUnit {
    Kelvin,
    Celsius,
}

#[derive(clap::Args)]
struct FieldArgs {
    /// Number of sites drawn from the lattice.
    #[arg(long, default_value_t = 500)]
    n: usize,
    /// Lattice size per axis on the unit square.
    #[arg(long, default_value_t = 64)]
    grid: usize,
    #[arg(long, default_value_t = 0.5)]
    delta: f64,
    #[arg(long = "sigma-w2", default_value_t = 1.0)]
    sigma_w2: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, value_enum, default_value = "eigen")]
    sqrt: Sqrt,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate exposure, confounder and outcome replicates.
    Simulate {
        #[arg(long)]
        phix: f64,
        #[arg(long)]
        phiw: f64,
        #[command(flatten)]
        field: FieldArgs,
        #[arg(long = "sigma-eps2", default_value_t = 0.25)]
        sigma_eps2: f64,
        /// Calibrate sigma_w so that Delta_OLS / beta_x equals this value.
        #[arg(long = "target-bias")]
        target_bias: Option<f64>,
        #[arg(long, default_value_t = 1)]
        replicates: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a principal kriging basis and write its design matrix.
    Basis {
        #[arg(long, default_value_t = 1)]
        nullspace: u8,
        /// Exposure range, needed for null-space types 2 and 3.
        #[arg(long, default_value_t = 0.2)]
        phix: f64,
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        grid: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tabulate d_x against the number of leading basis columns.
    Bias {
        #[arg(long, num_args = 1.., required = true)]
        phix: Vec<f64>,
        #[arg(long, num_args = 1.., required = true)]
        phiw: Vec<f64>,
        #[arg(long, default_value_t = 1)]
        nullspace: u8,
        #[command(flatten)]
        field: FieldArgs,
        /// Largest k; defaults to n - 3 or the basis width.
        #[arg(long)]
        kmax: Option<usize>,
        /// Output file; standard output when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit a spike-and-slab regression to a data file with easting, northing, x, y.
    Fit {
        #[arg(long)]
        data: PathBuf,
        /// Row filter when the file holds several replicates.
        #[arg(long, default_value_t = 0)]
        replicate: usize,
        #[arg(long, value_enum)]
        family: Family,
        #[arg(long, default_value_t = 5000)]
        iters: usize,
        #[arg(long = "burn-in", default_value_t = 1000)]
        burn_in: usize,
        #[arg(long, default_value_t = 1)]
        thin: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long = "v-beta")]
        v_beta: Option<f64>,
        #[arg(long)]
        nu: Option<f64>,
        #[arg(long)]
        c0: Option<f64>,
        /// Fixed prior inclusion probability.
        #[arg(long)]
        w: Option<f64>,
        /// Use a Beta(1, 1) inclusion probability instead of a fixed one.
        #[arg(long = "beta-w", conflicts_with = "w")]
        beta_w: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the factorial benchmark study.
    Benchmark {
        #[arg(long, default_value = "desk")]
        preset: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long)]
        replicates: Option<usize>,
        /// Comma-separated method names; defaults to every method.
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<String>>,
        /// Draw a new exposure surface for every replicate.
        #[arg(long = "resample-exposure")]
        resample_exposure: bool,
        #[arg(long, default_value = "benchmark_out")]
        out: PathBuf,
    },
    /// Ozone-NOx application on a tabular extract.
    App {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "OLS,SRE,SpatialTP,Spatial+_fx,Spatial+,gSEM,KS,SS_fv,SS_nmig,SS_mom")]
        methods: Vec<String>,
        #[arg(long = "temp-unit", value_enum, default_value = "kelvin")]
        temp_unit: TempUnit,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 5000)]
        iters: usize,
        #[arg(long = "burn-in", default_value_t = 1000)]
        burn_in: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_methods(names: &[String]) -> Result<Vec<MethodId>> {
    names.iter().filter(|s| !s.trim().is_empty()).map(|s| s.parse()).collect()
}

fn scenario(phix: f64, phiw: f64, f: &FieldArgs, sigma_eps2: f64) -> ConfoundingScenario {
    ConfoundingScenario {
        delta: f.delta,
        sigma_w2: f.sigma_w2,
        sigma_eps2,
        ..ConfoundingScenario::standard(phix, phiw)
    }
}

fn simulate(
    phix: f64,
    phiw: f64,
    field: &FieldArgs,
    sigma_eps2: f64,
    target: Option<f64>,
    replicates: usize,
    out: &Path,
) -> Result<()> {
    let base = scenario(phix, phiw, field, sigma_eps2);
    base.validate()?;
    let sites = sample_grid_sites(field.n, field.grid, derive_seed(field.seed, &[0]))?;
    let geom = FieldGeometry::for_scenario(&sites, &base, field.sqrt.into())?;
    let x = exposure_from_factor(&geom.rx, base.sigma_x(), derive_seed(field.seed, &[1]));
    let s = match target {
        Some(t) => base.with_sigma_w(calibrate_sigma_w_with(&base, &geom, &x, t)?),
        None => base,
    };
    let law = conditional_law_with(&s, &geom, &x)?;
    let reps = (0..replicates)
        .map(|r| sample_replicate(&s, &sites, &law, &x, derive_seed(field.seed, &[2, r as u64])))
        .collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(out)?;
    write_replicate_archive(&out.join("replicates.csv"), &s, &sites, &reps)?;
    println!("wrote {} replicates at {} sites (sigma_w = {})", reps.len(), sites.len(), fmt_sig(s.sigma_w()));
    Ok(())
}

fn basis(ns: u8, phix: f64, n: usize, grid: usize, seed: u64, out: &Path) -> Result<()> {
    let ns = NullSpaceType::from_index(ns)?;
    let sites = sample_grid_sites(n, grid, derive_seed(seed, &[0]))?;
    let x = if ns.needs_exposure() {
        let geom = FieldGeometry::new(&sites, phix, phix, SqrtMethod::SymmetricEigen)?;
        Some(exposure_from_factor(&geom.rx, 1.0, derive_seed(seed, &[1])))
    } else {
        None
    };
    let pb = principal_kriging_basis(&sites, ns, x.as_ref())?;
    fs::create_dir_all(out)?;
    pb.write_design_csv(&out.join("design.csv"))?;
    let mut w = csv::Writer::from_path(out.join("eigenvalues.csv"))?;
    w.write_record(["l", "eigenvalue"])?;
    for (l, v) in pb.eigenvalues.iter().enumerate() {
        w.write_record([(l + 1).to_string(), fmt_sig(*v)])?;
    }
    w.flush()?;
    println!("basis with {} columns written to {}", pb.b.ncols(), out.display());
    Ok(())
}

fn bias(phix: &[f64], phiw: &[f64], ns: u8, field: &FieldArgs, kmax: Option<usize>, out: Option<&Path>) -> Result<()> {
    let ns = NullSpaceType::from_index(ns)?;
    let sites = sample_grid_sites(field.n, field.grid, derive_seed(field.seed, &[0]))?;
    let mut curves = Vec::new();
    for (i, &px) in phix.iter().enumerate() {
        let rx_geom = FieldGeometry::new(&sites, px, px, field.sqrt.into())?;
        let x = exposure_from_factor(&rx_geom.rx, 1.0, derive_seed(field.seed, &[1, i as u64]));
        let pb = principal_kriging_basis(&sites, ns, ns.needs_exposure().then_some(&x))?;
        for &pw in phiw {
            let s = scenario(px, pw, field, 0.25);
            s.validate()?;
            let geom = FieldGeometry::for_scenario(&sites, &s, field.sqrt.into())?;
            curves.push(bias_curve_with(&s, &geom, &x, &pb.b, ns, kmax)?);
        }
    }
    match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            write_curves_csv(p, &curves)?;
        }
        None => write_curves(std::io::stdout().lock(), &curves)?,
    }
    Ok(())
}

/// Rows of `easting, northing, x, y`, optionally filtered by a `replicate` column.
fn read_fit_data(path: &Path, replicate: usize) -> Result<(SiteSet, DVector<f64>, DVector<f64>)> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_path(path)?;
    let headers = rdr.headers()?.clone();
    let find = |name: &str| {
        headers.iter().position(|h| h.eq_ignore_ascii_case(name)).ok_or_else(|| Error::Ingest {
            row: 0,
            column: name.into(),
            message: "missing column".into(),
        })
    };
    let (ie, inn, ix, iy) = (find("easting")?, find("northing")?, find("x")?, find("y")?);
    let irep = find("replicate").ok();
    let (mut locs, mut xs, mut ys) = (Vec::new(), Vec::new(), Vec::new());
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let num = |i: usize, name: &str| -> Result<f64> {
            rec.get(i).and_then(|s| s.parse().ok()).ok_or_else(|| Error::Ingest {
                row: k + 1,
                column: name.into(),
                message: "non-numeric value".into(),
            })
        };
        if let Some(ir) = irep {
            if num(ir, "replicate")? as usize != replicate {
                continue;
            }
        }
        locs.push(Location::new(num(ie, "easting")?, num(inn, "northing")?));
        xs.push(num(ix, "x")?);
        ys.push(num(iy, "y")?);
    }
    Ok((SiteSet::new(locs)?, DVector::from_vec(xs), DVector::from_vec(ys)))
}

#[allow(clippy::too_many_arguments)]
fn fit(
    data: &Path,
    replicate: usize,
    family: Family,
    mcmc: McmcConfig,
    v_beta: Option<f64>,
    nu: Option<f64>,
    c0: Option<f64>,
    w: Option<f64>,
    beta_w: bool,
    out: &Path,
) -> Result<()> {
    let (sites, x, y) = read_fit_data(data, replicate)?;
    let family = match family {
        Family::Fv => PriorFamily::Fv,
        Family::Nmig => PriorFamily::Nmig,
        Family::Mom => PriorFamily::Mom,
    };
    let mut prior = SsPriorConfig::new(family);
    if let Some(v) = v_beta {
        prior.v_beta = v;
    }
    if let Some(v) = nu {
        prior.nu = v;
    }
    if let Some(v) = c0 {
        prior.c0 = v;
    }
    if let Some(v) = w {
        prior.w = InclusionPrior::Fixed(v);
    }
    if beta_w {
        prior.w = InclusionPrior::Beta(1.0, 1.0);
    }
    let pb = principal_kriging_basis(&sites, NullSpaceType::Type1, None)?;
    let chain = fit_spike_slab(&y, &x, &pb.b, &prior, &mcmc)?;
    let summary = summarize(&chain)?;
    fs::create_dir_all(out)?;
    let json = serde_json::json!({ "prior": prior, "mcmc": mcmc, "summary": summary });
    fs::write(out.join("summary.json"), serde_json::to_string_pretty(&json)? + "\n")?;
    chain.write_draws_csv(&out.join("draws.csv"))?;
    println!(
        "{}: beta_x = {} [{}, {}], edf = {}",
        family.name(),
        fmt_sig(summary.beta_x_mean),
        fmt_sig(summary.interval.0),
        fmt_sig(summary.interval.1),
        summary.edf
    );
    Ok(())
}

fn benchmark(
    preset: &str,
    seed: Option<u64>,
    threads: Option<usize>,
    replicates: Option<usize>,
    methods: Option<&[String]>,
    resample_exposure: bool,
    out: &Path,
) -> Result<()> {
    let mut cfg = StudyConfig::preset(preset)?;
    cfg.resample_exposure = resample_exposure;
    if let Some(s) = seed {
        cfg.master_seed = s;
    }
    if let Some(t) = threads {
        cfg.threads = t;
    }
    if let Some(r) = replicates {
        cfg.replicates = r;
    }
    if let Some(m) = methods {
        cfg.methods = parse_methods(m)?;
    }
    cfg.output_dir = Some(out.to_path_buf());
    let table = run_study(&cfg)?;
    for (m, probs) in &table.probabilities {
        let p = probs.get("pr_bias_reduced").copied().flatten();
        println!("{:<12} Pr(bias reduced) = {}", m.name(), p.map(fmt_sig).unwrap_or_else(|| "undefined".into()));
    }
    println!("outputs in {}", out.display());
    Ok(())
}

fn app(
    data: &Path,
    methods: &[String],
    unit: TempUnit,
    seed: u64,
    iters: usize,
    burn_in: usize,
    out: &Path,
) -> Result<()> {
    let opts = IngestOptions {
        temperature_unit: match unit {
            TempUnit::Kelvin => TemperatureUnit::Kelvin,
            TempUnit::Celsius => TemperatureUnit::Celsius,
        },
        ..IngestOptions::default()
    };
    let table = ingest(data, &opts)?;
    let methods = parse_methods(methods)?;
    let options = AppOptions {
        seed,
        chain_iters: iters,
        chain_burn_in: burn_in,
        sre_iters: iters,
        sre_burn_in: burn_in,
    };
    McmcConfig::new(iters, burn_in, seed).validate()?;
    let report = run_application(&table, &methods, &options)?;
    write_app_report(out, &report)?;
    for r in &report.rows {
        println!(
            "{:<12} {:<14} {}",
            r.method.name(),
            format!("{:?}", r.variant),
            if r.estimate.is_finite() { fmt_sig(r.estimate) } else { "failed".into() }
        );
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { phix, phiw, field, sigma_eps2, target_bias, replicates, out } => {
            simulate(phix, phiw, &field, sigma_eps2, target_bias, replicates, &out)
        }
        Command::Basis { nullspace, phix, n, grid, seed, out } => basis(nullspace, phix, n, grid, seed, &out),
        Command::Bias { phix, phiw, nullspace, field, kmax, out } => {
            bias(&phix, &phiw, nullspace, &field, kmax, out.as_deref())
        }
        Command::Fit { data, replicate, family, iters, burn_in, thin, seed, v_beta, nu, c0, w, beta_w, out } => {
            let mut mcmc = McmcConfig::new(iters, burn_in, seed);
            mcmc.thin = thin;
            fit(&data, replicate, family, mcmc, v_beta, nu, c0, w, beta_w, &out)
        }
        Command::Benchmark { preset, seed, threads, replicates, methods, resample_exposure, out } => {
            benchmark(&preset, seed, threads, replicates, methods.as_deref(), resample_exposure, &out)
        }
        Command::App { data, methods, temp_unit, seed, iters, burn_in, out } => {
            app(&data, &methods, temp_unit, seed, iters, burn_in, &out)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

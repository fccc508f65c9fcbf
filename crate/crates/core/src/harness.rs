//! Factorial Monte Carlo study: scenario grid x replicates x methods, with
//! raw-first persistence, MAE/RMSE ratios against OLS and probability summaries.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{principal_kriging_basis, NullSpaceType};
use crate::bias::delta_ols_with;
use crate::competitors::{fit_ols, fit_spline_family, fit_sre, FitResult, MethodId, SplineConfig, SplineContext};
use crate::error::{Error, Result};
use crate::simulator::{
    calibrate_sigma_w_with, conditional_law_with, derive_seed, exposure_from_factor, fmt_sig,
    sample_grid_sites, sample_replicate, ConfoundingScenario, FieldGeometry,
};
use crate::spatial::{SiteSet, SqrtMethod};
use crate::ss_regression::{fit_spike_slab, summarize, McmcConfig, SsPriorConfig};
use crate::stats::median;

/// Minimum fraction of successful replicates for an unflagged cell.
pub const MIN_SUCCESS_FRACTION: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub preset: Option<String>,
    pub phi_x_grid: Vec<f64>,
    pub phi_w_grid: Vec<f64>,
    pub n: usize,
    /// Sites are drawn from a `grid_size x grid_size` lattice on the unit square.
    pub grid_size: usize,
    pub replicates: usize,
    pub delta: f64,
    pub sigma_x2: f64,
    pub sigma_eps2: f64,
    pub beta0: f64,
    pub beta_x: f64,
    /// Calibrate `sigma_w` so that `Delta_OLS / beta_x` equals this; `None` uses `sigma_w2`.
    pub target_relative_bias: Option<f64>,
    pub sigma_w2: f64,
    pub methods: Vec<MethodId>,
    pub master_seed: u64,
    /// Worker threads; 0 lets the pool decide.
    pub threads: usize,
    pub chain_iters: usize,
    pub chain_burn_in: usize,
    pub sre_iters: usize,
    pub sre_burn_in: usize,
    pub sqrt_method: SqrtMethod,
    /// Draw a fresh exposure for every replicate instead of one per cell;
    /// `sigma_w` is still calibrated on the cell's first exposure.
    #[serde(default)]
    pub resample_exposure: bool,
    pub output_dir: Option<PathBuf>,
}

impl StudyConfig {
    /// 3 x 3 grid over {0.05, 0.2, 0.5}, 30 replicates, 200 sites, chains 2000/500.
    pub fn desk() -> Self {
        let grid = vec![0.05, 0.2, 0.5];
        Self {
            preset: Some("desk".into()),
            phi_x_grid: grid.clone(),
            phi_w_grid: grid,
            n: 200,
            grid_size: 64,
            replicates: 30,
            delta: 0.5,
            sigma_x2: 1.0,
            sigma_eps2: 0.25,
            beta0: 1.0,
            beta_x: 2.0,
            target_relative_bias: Some(0.15),
            sigma_w2: 1.0,
            methods: MethodId::ALL.to_vec(),
            master_seed: 7,
            threads: 0,
            chain_iters: 2000,
            chain_burn_in: 500,
            sre_iters: 2000,
            sre_burn_in: 500,
            sqrt_method: SqrtMethod::SymmetricEigen,
            resample_exposure: false,
            output_dir: None,
        }
    }

    /// 10 x 10 grid over {0.05, 0.10, ..., 0.50}, 100 replicates, 500 sites, chains 5000/1000.
    pub fn paper() -> Self {
        let grid: Vec<f64> = (1..=10).map(|i| i as f64 * 0.05).collect();
        Self {
            preset: Some("paper".into()),
            phi_x_grid: grid.clone(),
            phi_w_grid: grid,
            n: 500,
            replicates: 100,
            chain_iters: 5000,
            chain_burn_in: 1000,
            sre_iters: 5000,
            sre_burn_in: 1000,
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::Usage(format!("unknown preset '{other}' (expected desk or paper)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::invalid("replicates must be at least 1"));
        }
        if self.phi_x_grid.is_empty() || self.phi_w_grid.is_empty() {
            return Err(Error::invalid("range grids must be non-empty"));
        }
        if self.methods.is_empty() {
            return Err(Error::invalid("at least one method is required"));
        }
        if self.n < 8 || self.grid_size * self.grid_size < self.n {
            return Err(Error::invalid("need 8 <= n <= grid_size^2"));
        }
        if let Some(t) = self.target_relative_bias {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::invalid("target relative bias must be positive"));
            }
        }
        McmcConfig::new(self.chain_iters, self.chain_burn_in, 0).validate()?;
        if self.methods.contains(&MethodId::Sre) {
            McmcConfig::new(self.sre_iters, self.sre_burn_in, 0).validate()?;
        }
        for (i, &px) in self.phi_x_grid.iter().enumerate() {
            for (j, &pw) in self.phi_w_grid.iter().enumerate() {
                self.scenario(px, pw)
                    .validate()
                    .map_err(|e| Error::invalid(format!("cell ({i}, {j}): {e}")))?;
            }
        }
        Ok(())
    }

    /// Methods in run order, with OLS first (it is the reference for every ratio).
    pub fn method_list(&self) -> Vec<MethodId> {
        let mut out = vec![MethodId::Ols];
        for &m in &self.methods {
            if !out.contains(&m) {
                out.push(m);
            }
        }
        out
    }

    fn scenario(&self, phi_x: f64, phi_w: f64) -> ConfoundingScenario {
        ConfoundingScenario {
            phi_x,
            phi_w,
            delta: self.delta,
            sigma_x2: self.sigma_x2,
            sigma_w2: self.sigma_w2,
            sigma_eps2: self.sigma_eps2,
            beta0: self.beta0,
            beta_x: self.beta_x,
        }
    }

    /// `(cell, phi_x, phi_w)` in row-major order over `phi_x`.
    pub fn cells(&self) -> Vec<(usize, f64, f64)> {
        let mut out = Vec::new();
        for &px in &self.phi_x_grid {
            for &pw in &self.phi_w_grid {
                out.push((out.len(), px, pw));
            }
        }
        out
    }
}

/// Calibrated setting of one grid cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellInfo {
    pub cell: usize,
    pub phi_x: f64,
    pub phi_w: f64,
    pub sigma_w: Option<f64>,
    pub delta_ols: Option<f64>,
    pub error: Option<String>,
}

/// One (cell, method, replicate) outcome. Values are rounded to the persisted precision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawEstimate {
    pub cell: usize,
    pub method: MethodId,
    pub replicate: usize,
    pub estimate: Option<f64>,
    pub lo: Option<f64>,
    pub hi: Option<f64>,
    pub edf: Option<f64>,
    pub seed: u64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioRow {
    pub cell: usize,
    pub method: MethodId,
    pub q1: Option<f64>,
    pub q2: Option<f64>,
    pub mae: Option<f64>,
    pub rmse: Option<f64>,
    pub successes: usize,
    /// Fewer than 90% of replicates succeeded.
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdfRow {
    pub cell: usize,
    pub method: MethodId,
    pub median_edf: Option<f64>,
}

/// Named probabilities per method; `None` when the conditioning set is empty.
pub type ProbabilityTable = BTreeMap<MethodId, BTreeMap<String, Option<f64>>>;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkTable {
    pub config: StudyConfig,
    pub cells: Vec<CellInfo>,
    pub raw: Vec<RawEstimate>,
    pub ratios: Vec<RatioRow>,
    pub probabilities: ProbabilityTable,
    pub edf: Vec<EdfRow>,
}

impl BenchmarkTable {
    pub fn ratio(&self, cell: usize, method: MethodId) -> Option<&RatioRow> {
        self.ratios.iter().find(|r| r.cell == cell && r.method == method)
    }
}

/// Shared per-site-set state for fitting any method.
pub struct MethodContext {
    pub sites: SiteSet,
    /// Type-1 principal kriging basis for the spike-and-slab models.
    pub pkf: Option<DMatrix<f64>>,
    pub spline: Option<SplineContext>,
    pub chain_iters: usize,
    pub chain_burn_in: usize,
    pub sre_iters: usize,
    pub sre_burn_in: usize,
}

impl MethodContext {
    pub fn new(sites: SiteSet, methods: &[MethodId], chain: (usize, usize), sre: (usize, usize)) -> Result<Self> {
        let pkf = if methods.iter().any(|m| m.prior_family().is_some()) {
            Some(principal_kriging_basis(&sites, NullSpaceType::Type1, None)?.b)
        } else {
            None
        };
        let spline = if methods.iter().any(|m| m.is_spline()) {
            Some(SplineContext::new(&sites, SplineConfig::for_n(sites.len()))?)
        } else {
            None
        };
        Ok(Self {
            sites,
            pkf,
            spline,
            chain_iters: chain.0,
            chain_burn_in: chain.1,
            sre_iters: sre.0,
            sre_burn_in: sre.1,
        })
    }

    pub fn fit(&self, method: MethodId, y: &DVector<f64>, x: &DVector<f64>, seed: u64) -> Result<FitResult> {
        if let Some(family) = method.prior_family() {
            let b = self
                .pkf
                .as_ref()
                .ok_or_else(|| Error::Usage("principal basis was not prepared".into()))?;
            let mcmc = McmcConfig::new(self.chain_iters, self.chain_burn_in, seed);
            let chain = fit_spike_slab(y, x, b, &SsPriorConfig::new(family), &mcmc)?;
            return Ok(FitResult::from_chain_summary(&summarize(&chain)?));
        }
        match method {
            MethodId::Ols => fit_ols(y, x),
            MethodId::Sre => fit_sre(y, x, &self.sites, &McmcConfig::new(self.sre_iters, self.sre_burn_in, seed)),
            m => {
                let ctx = self
                    .spline
                    .as_ref()
                    .ok_or_else(|| Error::Usage("spline basis was not prepared".into()))?;
                fit_spline_family(m, y, x, ctx)
            }
        }
    }
}

fn round_sig(v: f64) -> f64 {
    fmt_sig(v).parse().unwrap_or(v)
}

struct PreparedCell {
    info: CellInfo,
    /// One exposure per replicate, or a single shared one.
    xs: Vec<DVector<f64>>,
    ys: Vec<DVector<f64>>,
}

impl PreparedCell {
    fn x(&self, r: usize) -> &DVector<f64> {
        &self.xs[r.min(self.xs.len() - 1)]
    }
}

fn prepare_cell(cfg: &StudyConfig, sites: &SiteSet, cell: usize, phi_x: f64, phi_w: f64) -> Result<PreparedCell> {
    let (i, j) = (cell / cfg.phi_w_grid.len(), cell % cfg.phi_w_grid.len());
    let base = cfg.scenario(phi_x, phi_w);
    let geom = FieldGeometry::for_scenario(sites, &base, cfg.sqrt_method)?;
    let x = exposure_from_factor(&geom.rx, base.sigma_x(), derive_seed(cfg.master_seed, &[1, i as u64, j as u64]));
    let scenario = match cfg.target_relative_bias {
        Some(t) => base.with_sigma_w(calibrate_sigma_w_with(&base, &geom, &x, t)?),
        None => base,
    };
    let delta_ols = delta_ols_with(&scenario, &geom, &x)?[1];
    let mut xs = vec![x];
    if cfg.resample_exposure {
        for r in 1..cfg.replicates {
            let seed = derive_seed(cfg.master_seed, &[1, i as u64, j as u64, r as u64]);
            xs.push(exposure_from_factor(&geom.rx, base.sigma_x(), seed));
        }
    }
    let ys = (0..cfg.replicates)
        .map(|r| {
            let x = &xs[r.min(xs.len() - 1)];
            let law = conditional_law_with(&scenario, &geom, x)?;
            let seed = derive_seed(cfg.master_seed, &[2, i as u64, j as u64, r as u64]);
            sample_replicate(&scenario, sites, &law, x, seed).map(|rep| rep.y_vec())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PreparedCell {
        info: CellInfo {
            cell,
            phi_x,
            phi_w,
            sigma_w: Some(scenario.sigma_w()),
            delta_ols: Some(delta_ols),
            error: None,
        },
        xs,
        ys,
    })
}

/// Run every (cell, replicate, method) task and aggregate. Persists raw estimates
/// before any aggregate when `cfg.output_dir` is set.
pub fn run_study(cfg: &StudyConfig) -> Result<BenchmarkTable> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::Usage(format!("thread pool: {e}")))?;
    pool.install(|| run_study_inner(cfg))
}

fn run_study_inner(cfg: &StudyConfig) -> Result<BenchmarkTable> {
    let methods = cfg.method_list();
    let sites = sample_grid_sites(cfg.n, cfg.grid_size, derive_seed(cfg.master_seed, &[0]))?;
    let ctx = MethodContext::new(
        sites.clone(),
        &methods,
        (cfg.chain_iters, cfg.chain_burn_in),
        (cfg.sre_iters, cfg.sre_burn_in),
    )?;
    let prepared: Vec<std::result::Result<PreparedCell, CellInfo>> = cfg
        .cells()
        .into_par_iter()
        .map(|(cell, px, pw)| {
            prepare_cell(cfg, &sites, cell, px, pw).map_err(|e| {
                log::warn!("cell {cell} (phi_x={px}, phi_w={pw}) failed: {e}");
                CellInfo {
                    cell,
                    phi_x: px,
                    phi_w: pw,
                    sigma_w: None,
                    delta_ols: None,
                    error: Some(e.to_string()),
                }
            })
        })
        .collect();

    let mut tasks = Vec::new();
    for p in &prepared {
        let cell = match p {
            Ok(c) => c.info.cell,
            Err(info) => info.cell,
        };
        for r in 0..cfg.replicates {
            for &m in &methods {
                tasks.push((cell, r, m));
            }
        }
    }
    let (nx, nw) = (cfg.phi_x_grid.len(), cfg.phi_w_grid.len());
    debug_assert_eq!(prepared.len(), nx * nw);
    let raw: Vec<RawEstimate> = tasks
        .into_par_iter()
        .map(|(cell, r, method)| {
            let (i, j) = (cell / nw, cell % nw);
            let seed = derive_seed(cfg.master_seed, &[3, i as u64, j as u64, r as u64, method.index()]);
            let outcome = match &prepared[cell] {
                Ok(pc) => ctx.fit(method, &pc.ys[r], pc.x(r), seed),
                Err(info) => Err(Error::Calibration(info.error.clone().unwrap_or_default())),
            };
            match outcome {
                Ok(fit) if fit.beta_x_hat.is_finite() => RawEstimate {
                    cell,
                    method,
                    replicate: r,
                    estimate: Some(round_sig(fit.beta_x_hat)),
                    lo: fit.interval.map(|i| round_sig(i.0)),
                    hi: fit.interval.map(|i| round_sig(i.1)),
                    edf: fit.edf.map(round_sig),
                    seed,
                    error: None,
                },
                other => {
                    let reason = match other {
                        Ok(_) => "non-finite estimate".to_string(),
                        Err(e) => e.to_string(),
                    };
                    log::debug!("cell {cell} replicate {r} {method}: {reason}");
                    RawEstimate {
                        cell,
                        method,
                        replicate: r,
                        estimate: None,
                        lo: None,
                        hi: None,
                        edf: None,
                        seed,
                        error: Some(reason),
                    }
                }
            }
        })
        .collect();

    let cells: Vec<CellInfo> = prepared
        .into_iter()
        .map(|p| match p {
            Ok(c) => c.info,
            Err(info) => info,
        })
        .collect();

    if let Some(dir) = &cfg.output_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("study_config.json"), serde_json::to_string_pretty(cfg)? + "\n")?;
        write_raw_estimates(&dir.join("raw_estimates.csv"), &raw)?;
        write_failures(&dir.join("failures.csv"), &raw)?;
        write_cells(&dir.join("cells.csv"), &cells)?;
    }

    let ratios = aggregate_ratios(&raw, cfg.beta_x, cfg.replicates);
    let probabilities = probability_summaries(&raw, &cells, cfg.beta_x);
    let edf = edf_summary(&raw);
    let table = BenchmarkTable {
        config: cfg.clone(),
        cells,
        raw,
        ratios,
        probabilities,
        edf,
    };
    if let Some(dir) = &cfg.output_dir {
        write_aggregates(dir, &table)?;
    }
    Ok(table)
}

fn successes_by(raw: &[RawEstimate]) -> BTreeMap<(usize, MethodId), Vec<f64>> {
    let mut map: BTreeMap<(usize, MethodId), Vec<f64>> = BTreeMap::new();
    for r in raw {
        let entry = map.entry((r.cell, r.method)).or_default();
        if let Some(e) = r.estimate {
            entry.push(e);
        }
    }
    map
}

/// MAE, RMSE and their ratios against OLS, per (cell, method).
pub fn aggregate_ratios(raw: &[RawEstimate], beta_x: f64, replicates: usize) -> Vec<RatioRow> {
    let groups = successes_by(raw);
    let metrics = |v: &[f64]| -> Option<(f64, f64)> {
        if v.is_empty() {
            return None;
        }
        let n = v.len() as f64;
        let mae = v.iter().map(|e| (e - beta_x).abs()).sum::<f64>() / n;
        let rmse = (v.iter().map(|e| (e - beta_x).powi(2)).sum::<f64>() / n).sqrt();
        Some((mae, rmse))
    };
    groups
        .iter()
        .map(|(&(cell, method), v)| {
            let own = metrics(v);
            let ols = groups.get(&(cell, MethodId::Ols)).and_then(|o| metrics(o));
            let ratio = |a: Option<f64>, b: Option<f64>| match (a, b) {
                (Some(a), Some(b)) if b > 0.0 => Some(a / b),
                _ => None,
            };
            RatioRow {
                cell,
                method,
                q1: ratio(own.map(|m| m.0), ols.map(|m| m.0)),
                q2: ratio(own.map(|m| m.1), ols.map(|m| m.1)),
                mae: own.map(|m| m.0),
                rmse: own.map(|m| m.1),
                successes: v.len(),
                flagged: (v.len() as f64) < MIN_SUCCESS_FRACTION * replicates as f64,
            }
        })
        .collect()
}

fn mean_indicator(values: impl Iterator<Item = bool>) -> Option<f64> {
    let (mut hits, mut total) = (0usize, 0usize);
    for v in values {
        total += 1;
        hits += v as usize;
    }
    (total > 0).then(|| hits as f64 / total as f64)
}

/// Bias-reduction and RMSE-ratio probabilities, per method.
///
/// `pr_bias_reduced*` average the strict indicator `|b - beta_x| < |b_OLS - beta_x|`
/// over (cell, replicate) pairs where both fits succeeded. `pr_q2*` are fractions
/// of cells. Conditioned variants use strict inequalities on the ranges.
pub fn probability_summaries(raw: &[RawEstimate], cells: &[CellInfo], beta_x: f64) -> ProbabilityTable {
    let cell_of: BTreeMap<usize, &CellInfo> = cells.iter().map(|c| (c.cell, c)).collect();
    let ols: BTreeMap<(usize, usize), f64> = raw
        .iter()
        .filter(|r| r.method == MethodId::Ols)
        .filter_map(|r| r.estimate.map(|e| ((r.cell, r.replicate), e)))
        .collect();
    let cond_all = |_: &CellInfo| true;
    let cond_lt = |c: &CellInfo| c.phi_x < c.phi_w;
    let cond_mid = |c: &CellInfo| 0.2 < c.phi_x && c.phi_x < c.phi_w;
    let conditions: [(&str, &dyn Fn(&CellInfo) -> bool); 3] =
        [("", &cond_all), ("_given_phix_lt_phiw", &cond_lt), ("_given_0.2_lt_phix_lt_phiw", &cond_mid)];

    let replicates = raw.iter().map(|r| r.replicate + 1).max().unwrap_or(0);
    let ratios = aggregate_ratios(raw, beta_x, replicates);
    let mut methods: Vec<MethodId> = raw.iter().map(|r| r.method).collect();
    methods.sort();
    methods.dedup();

    let mut out = ProbabilityTable::new();
    for m in methods {
        let mut row = BTreeMap::new();
        for (suffix, cond) in conditions {
            let pairs = raw.iter().filter(|r| r.method == m).filter_map(|r| {
                let c = cell_of.get(&r.cell)?;
                if !cond(c) {
                    return None;
                }
                let e = r.estimate?;
                let o = ols.get(&(r.cell, r.replicate))?;
                Some((e - beta_x).abs() < (o - beta_x).abs())
            });
            row.insert(format!("pr_bias_reduced{suffix}"), mean_indicator(pairs));
        }
        let q2 = |cond: &dyn Fn(&CellInfo) -> bool, pred: &dyn Fn(f64) -> bool| {
            mean_indicator(ratios.iter().filter(|r| r.method == m).filter_map(|r| {
                let c = cell_of.get(&r.cell)?;
                cond(c).then_some(())?;
                r.q2.map(pred)
            }))
        };
        row.insert("pr_q2_lt_1".into(), q2(&cond_all, &|q| q < 1.0));
        row.insert("pr_q2_lt_0.8_given_phix_lt_phiw".into(), q2(&cond_lt, &|q| q < 0.8));
        row.insert("pr_q2_lt_0.8_given_0.2_lt_phix_lt_phiw".into(), q2(&cond_mid, &|q| q < 0.8));
        row.insert("pr_q2_gt_1.8".into(), q2(&cond_all, &|q| q > 1.8));
        out.insert(m, row);
    }
    out
}

/// Median EDF per (cell, method) over successful replicates that report one.
pub fn edf_summary(raw: &[RawEstimate]) -> Vec<EdfRow> {
    let mut groups: BTreeMap<(usize, MethodId), Vec<f64>> = BTreeMap::new();
    for r in raw {
        let entry = groups.entry((r.cell, r.method)).or_default();
        if let Some(e) = r.edf.filter(|_| r.estimate.is_some()) {
            entry.push(e);
        }
    }
    groups
        .into_iter()
        .map(|((cell, method), v)| EdfRow {
            cell,
            method,
            median_edf: (!v.is_empty()).then(|| median(&v)),
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_sig).unwrap_or_default()
}

pub fn write_raw_estimates(path: &Path, raw: &[RawEstimate]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["cell", "method", "replicate", "estimate", "lo", "hi", "edf", "seed"])?;
    for r in raw {
        w.write_record([
            r.cell.to_string(),
            r.method.name().to_string(),
            r.replicate.to_string(),
            opt(r.estimate),
            opt(r.lo),
            opt(r.hi),
            opt(r.edf),
            r.seed.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn write_failures(path: &Path, raw: &[RawEstimate]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["cell", "method", "replicate", "reason"])?;
    for r in raw {
        if let Some(reason) = &r.error {
            w.write_record([r.cell.to_string(), r.method.name().to_string(), r.replicate.to_string(), reason.clone()])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_cells(path: &Path, cells: &[CellInfo]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["cell", "phi_x", "phi_w", "sigma_w", "delta_ols", "error"])?;
    for c in cells {
        w.write_record([
            c.cell.to_string(),
            fmt_sig(c.phi_x),
            fmt_sig(c.phi_w),
            opt(c.sigma_w),
            opt(c.delta_ols),
            c.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn write_aggregates(dir: &Path, table: &BenchmarkTable) -> Result<()> {
    let mut w = csv::Writer::from_path(dir.join("ratios.csv"))?;
    w.write_record(["cell", "method", "Q1", "Q2", "MAE", "RMSE", "successes", "flagged"])?;
    for r in &table.ratios {
        w.write_record([
            r.cell.to_string(),
            r.method.name().to_string(),
            opt(r.q1),
            opt(r.q2),
            opt(r.mae),
            opt(r.rmse),
            r.successes.to_string(),
            r.flagged.to_string(),
        ])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("edf.csv"))?;
    w.write_record(["cell", "method", "median_edf"])?;
    for r in &table.edf {
        w.write_record([r.cell.to_string(), r.method.name().to_string(), opt(r.median_edf)])?;
    }
    w.flush()?;

    let probs: BTreeMap<&str, &BTreeMap<String, Option<f64>>> =
        table.probabilities.iter().map(|(m, v)| (m.name(), v)).collect();
    fs::write(dir.join("probabilities.json"), serde_json::to_string_pretty(&probs)? + "\n")?;
    Ok(())
}

fn parse_opt(s: &str) -> std::result::Result<Option<f64>, String> {
    if s.is_empty() {
        Ok(None)
    } else {
        s.parse().map(Some).map_err(|e| format!("{e}"))
    }
}

fn field<'a>(rec: &'a csv::StringRecord, i: usize, row: usize, name: &str) -> Result<&'a str> {
    rec.get(i).ok_or_else(|| Error::Ingest {
        row,
        column: name.into(),
        message: "missing field".into(),
    })
}

fn parse_field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, row: usize, name: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    field(rec, i, row, name)?.parse().map_err(|e: T::Err| Error::Ingest {
        row,
        column: name.into(),
        message: e.to_string(),
    })
}

fn parse_opt_field(rec: &csv::StringRecord, i: usize, row: usize, name: &str) -> Result<Option<f64>> {
    parse_opt(field(rec, i, row, name)?).map_err(|message| Error::Ingest {
        row,
        column: name.into(),
        message,
    })
}

/// Read `raw_estimates.csv`. Failure reasons live in `failures.csv` and are not restored.
pub fn read_raw_estimates(path: &Path) -> Result<Vec<RawEstimate>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let estimate = parse_opt_field(&rec, 3, row, "estimate")?;
        out.push(RawEstimate {
            cell: parse_field(&rec, 0, row, "cell")?,
            method: parse_field(&rec, 1, row, "method")?,
            replicate: parse_field(&rec, 2, row, "replicate")?,
            estimate,
            lo: parse_opt_field(&rec, 4, row, "lo")?,
            hi: parse_opt_field(&rec, 5, row, "hi")?,
            edf: parse_opt_field(&rec, 6, row, "edf")?,
            seed: parse_field(&rec, 7, row, "seed")?,
            error: estimate.is_none().then(|| "failed".to_string()),
        });
    }
    Ok(out)
}

pub fn read_cells(path: &Path) -> Result<Vec<CellInfo>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let error = field(&rec, 5, row, "error")?;
        out.push(CellInfo {
            cell: parse_field(&rec, 0, row, "cell")?,
            phi_x: parse_field(&rec, 1, row, "phi_x")?,
            phi_w: parse_field(&rec, 2, row, "phi_w")?,
            sigma_w: parse_opt_field(&rec, 3, row, "sigma_w")?,
            delta_ols: parse_opt_field(&rec, 4, row, "delta_ols")?,
            error: (!error.is_empty()).then(|| error.to_string()),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn est(cell: usize, method: MethodId, replicate: usize, e: Option<f64>) -> RawEstimate {
        RawEstimate {
            cell,
            method,
            replicate,
            estimate: e,
            lo: None,
            hi: None,
            edf: None,
            seed: 0,
            error: e.is_none().then(|| "x".into()),
        }
    }

    fn cell(cell: usize, phi_x: f64, phi_w: f64) -> CellInfo {
        CellInfo {
            cell,
            phi_x,
            phi_w,
            sigma_w: None,
            delta_ols: None,
            error: None,
        }
    }

    #[test]
    fn hand_counted_indicators() {
        let ols = [2.3, 2.1, 1.8];
        let other = [2.2, 2.1, 2.25];
        let mut raw = Vec::new();
        for r in 0..3 {
            raw.push(est(0, MethodId::Ols, r, Some(ols[r])));
            raw.push(est(0, MethodId::SsMom, r, Some(other[r])));
        }
        let cells = [cell(0, 0.05, 0.5)];
        let p = probability_summaries(&raw, &cells, 2.0);
        // replicate 0 wins, 1 ties (not counted), 2 loses
        assert_eq!(p[&MethodId::SsMom]["pr_bias_reduced"], Some(1.0 / 3.0));
        assert_eq!(p[&MethodId::Ols]["pr_bias_reduced"], Some(0.0));
        assert_eq!(p[&MethodId::SsMom]["pr_bias_reduced_given_0.2_lt_phix_lt_phiw"], None);
        let ratios = aggregate_ratios(&raw, 2.0, 3);
        let ols_row = ratios.iter().find(|r| r.method == MethodId::Ols).unwrap();
        assert_eq!((ols_row.q1, ols_row.q2), (Some(1.0), Some(1.0)));
    }

    #[test]
    fn failures_are_excluded_and_flagged() {
        let mut raw = Vec::new();
        for r in 0..10 {
            raw.push(est(0, MethodId::Ols, r, Some(2.2)));
            raw.push(est(0, MethodId::Ks, r, if r < 2 { None } else { Some(2.1) }));
        }
        let ratios = aggregate_ratios(&raw, 2.0, 10);
        let ks = ratios.iter().find(|r| r.method == MethodId::Ks).unwrap();
        assert_eq!(ks.successes, 8);
        assert!(ks.flagged);
        assert!((ks.q1.unwrap() - 0.5).abs() < 1e-12);
        let p = probability_summaries(&raw, &[cell(0, 0.1, 0.1)], 2.0);
        assert_eq!(p[&MethodId::Ks]["pr_bias_reduced"], Some(1.0));
        assert_eq!(p[&MethodId::Ks]["pr_bias_reduced_given_phix_lt_phiw"], None);
    }

    #[test]
    fn edf_median_ignores_failures() {
        let mut raw = vec![est(0, MethodId::SsMom, 0, Some(2.0)), est(0, MethodId::SsMom, 1, Some(2.0))];
        raw[0].edf = Some(0.0);
        raw[1].edf = Some(0.0);
        let mut failed = est(0, MethodId::SsMom, 2, None);
        failed.edf = Some(9.0);
        raw.push(failed);
        assert_eq!(edf_summary(&raw)[0].median_edf, Some(0.0));
    }

    #[test]
    fn presets_validate() {
        StudyConfig::desk().validate().unwrap();
        StudyConfig::paper().validate().unwrap();
        assert_eq!(StudyConfig::desk().cells().len(), 9);
        assert_eq!(StudyConfig::paper().cells().len(), 100);
        assert!(StudyConfig::preset("huge").is_err());
        let mut c = StudyConfig::desk();
        c.replicates = 0;
        assert!(c.validate().is_err());
        c = StudyConfig::desk();
        c.methods = vec![MethodId::SsMom];
        assert_eq!(c.method_list(), vec![MethodId::Ols, MethodId::SsMom]);
    }
}

//! Comparison estimators: OLS, a spatial random-effects model and the
//! thin-plate spline family (SpatialTP, Spatial+, gSEM, KS).

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::basis::{TprsBasis, TprsEigen};
use crate::error::{Error, Result};
use crate::linalg::{cholesky_jittered, exposure_design, hcat, sorted_symmetric_eigen, symmetrize};
use crate::simulator::rng_from_seed;
use crate::spatial::{distance_matrix, SiteSet};
use crate::ss_regression::{ChainSummary, McmcConfig, PriorFamily};
use crate::stats::{quantile_sorted, sorted};

const Z975: f64 = 1.959963984540054;

/// Every estimator the harness can run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MethodId {
    #[serde(rename = "OLS")]
    Ols,
    #[serde(rename = "SRE")]
    Sre,
    SpatialTP,
    #[serde(rename = "Spatial+_fx")]
    SpatialPlusFx,
    #[serde(rename = "Spatial+")]
    SpatialPlus,
    #[serde(rename = "gSEM")]
    Gsem,
    #[serde(rename = "KS")]
    Ks,
    #[serde(rename = "SS_fv")]
    SsFv,
    #[serde(rename = "SS_nmig")]
    SsNmig,
    #[serde(rename = "SS_mom")]
    SsMom,
}

impl MethodId {
    pub const ALL: [MethodId; 10] = [
        MethodId::Ols,
        MethodId::Sre,
        MethodId::SpatialTP,
        MethodId::SpatialPlusFx,
        MethodId::SpatialPlus,
        MethodId::Gsem,
        MethodId::Ks,
        MethodId::SsFv,
        MethodId::SsNmig,
        MethodId::SsMom,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MethodId::Ols => "OLS",
            MethodId::Sre => "SRE",
            MethodId::SpatialTP => "SpatialTP",
            MethodId::SpatialPlusFx => "Spatial+_fx",
            MethodId::SpatialPlus => "Spatial+",
            MethodId::Gsem => "gSEM",
            MethodId::Ks => "KS",
            MethodId::SsFv => "SS_fv",
            MethodId::SsNmig => "SS_nmig",
            MethodId::SsMom => "SS_mom",
        }
    }

    /// Stable index used when deriving per-method seeds.
    pub fn index(self) -> u64 {
        MethodId::ALL.iter().position(|&m| m == self).unwrap() as u64
    }

    pub fn is_spline(self) -> bool {
        matches!(
            self,
            MethodId::SpatialTP
                | MethodId::SpatialPlusFx
                | MethodId::SpatialPlus
                | MethodId::Gsem
                | MethodId::Ks
        )
    }

    pub fn prior_family(self) -> Option<PriorFamily> {
        match self {
            MethodId::SsFv => Some(PriorFamily::Fv),
            MethodId::SsNmig => Some(PriorFamily::Nmig),
            MethodId::SsMom => Some(PriorFamily::Mom),
            _ => None,
        }
    }
}

impl fmt::Display for MethodId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MethodId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace(['-', ' '], "_");
        MethodId::ALL
            .iter()
            .copied()
            .find(|m| {
                let name = m.name().to_ascii_lowercase();
                name == key || name.replace('+', "plus") == key || format!("{m:?}").to_ascii_lowercase() == key
            })
            .ok_or_else(|| Error::Usage(format!("unknown method '{s}'")))
    }
}

/// Point estimate, 95% interval and effective degrees of freedom for one fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub method: MethodId,
    pub beta_x_hat: f64,
    pub interval: Option<(f64, f64)>,
    pub edf: Option<f64>,
    pub diagnostics: BTreeMap<String, Value>,
}

impl FitResult {
    fn new(method: MethodId, beta_x_hat: f64) -> Self {
        Self {
            method,
            beta_x_hat,
            interval: None,
            edf: None,
            diagnostics: BTreeMap::new(),
        }
    }

    fn normal_interval(mut self, se: f64) -> Self {
        if se.is_finite() {
            self.interval = Some((self.beta_x_hat - Z975 * se, self.beta_x_hat + Z975 * se));
        }
        self
    }

    /// Convert a spike-and-slab summary.
    pub fn from_chain_summary(summary: &ChainSummary) -> Self {
        let method = match summary.family {
            PriorFamily::Fv => MethodId::SsFv,
            PriorFamily::Nmig => MethodId::SsNmig,
            PriorFamily::Mom => MethodId::SsMom,
        };
        let mut fit = FitResult::new(method, summary.beta_x_mean);
        let (lo, hi) = summary.interval;
        fit.interval = Some((lo.min(fit.beta_x_hat), hi.max(fit.beta_x_hat)));
        fit.edf = Some(summary.edf as f64);
        fit.diagnostics.insert("beta_x_median".into(), json!(summary.beta_x_median));
        fit.diagnostics.insert("draws".into(), json!(summary.draws));
        fit.diagnostics
            .insert("chain".into(), serde_json::to_value(&summary.diagnostics).unwrap_or(Value::Null));
        fit
    }
}

/// OLS of `y` on `[1 x]` with a normal-theory interval.
pub fn fit_ols(y: &DVector<f64>, x: &DVector<f64>) -> Result<FitResult> {
    let n = y.len();
    if x.len() != n || n < 3 {
        return Err(Error::invalid("OLS needs matching y, x with at least 3 rows"));
    }
    let xm = x.mean();
    let sxx: f64 = x.iter().map(|v| (v - xm).powi(2)).sum();
    if sxx <= 1e-12 * x.iter().map(|v| v * v).sum::<f64>().max(f64::MIN_POSITIVE) {
        return Err(Error::rank("exposure is constant"));
    }
    let ym = y.mean();
    let sxy: f64 = x.iter().zip(y.iter()).map(|(a, b)| (a - xm) * (b - ym)).sum();
    let slope = sxy / sxx;
    let intercept = ym - slope * xm;
    let rss: f64 = x
        .iter()
        .zip(y.iter())
        .map(|(a, b)| (b - intercept - slope * a).powi(2))
        .sum();
    let s2 = rss / (n - 2) as f64;
    let mut fit = FitResult::new(MethodId::Ols, slope).normal_interval((s2 / sxx).sqrt());
    fit.diagnostics.insert("intercept".into(), json!(intercept));
    fit.diagnostics.insert("sigma2".into(), json!(s2));
    Ok(fit)
}

/// Smoothing-parameter choice for the spline family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LambdaChoice {
    Gcv,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineConfig {
    /// Maximal TPRS rank, counting the three null-space columns.
    pub k_max: usize,
    /// Candidate ranks for KS.
    pub ks_grid: Vec<usize>,
    /// Overrides GCV in the penalized methods (Spatial+_fx always uses 0).
    pub lambda: LambdaChoice,
}

impl SplineConfig {
    /// `k_max = min(150, n - 4)`, KS grid `{10, 30, ..., 250}` capped at `n - 4`.
    pub fn for_n(n: usize) -> Self {
        let cap = n.saturating_sub(4);
        let ks_grid: Vec<usize> = (0..)
            .map(|i| 10 + 20 * i)
            .take_while(|&k| k <= 250)
            .filter(|&k| k <= cap && k > 3)
            .collect();
        Self {
            k_max: 150.min(cap),
            ks_grid,
            lambda: LambdaChoice::Gcv,
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.k_max <= 3 || self.k_max + 4 > n {
            return Err(Error::invalid(format!("k_max must satisfy 3 < k_max <= n - 4 = {}", n.saturating_sub(4))));
        }
        if self.ks_grid.is_empty() || self.ks_grid.iter().any(|&k| k <= 3 || k + 4 > n) {
            return Err(Error::invalid("KS grid must be non-empty with 3 < k <= n - 4"));
        }
        if let LambdaChoice::Fixed(l) = self.lambda {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(Error::invalid("fixed lambda must be finite and nonnegative"));
            }
        }
        Ok(())
    }
}

/// Ridge-type penalized least squares `||y - A theta||^2 + lambda sum d_j theta_j^2`,
/// diagonalized once so every `lambda` costs `O(p)`.
#[derive(Debug, Clone)]
pub struct PenalizedSmoother {
    n: usize,
    yty: f64,
    /// `L^{-T} V`, mapping rotated coefficients back.
    back: DMatrix<f64>,
    lam: Vec<f64>,
    f: DVector<f64>,
    design: DMatrix<f64>,
}

/// Outcome of a smoothing-parameter search.
#[derive(Debug, Clone, PartialEq)]
pub struct PenalizedFit {
    pub lambda: f64,
    pub coefficients: DVector<f64>,
    pub fitted: DVector<f64>,
    pub rss: f64,
    pub edf: f64,
    pub gcv: f64,
    /// Bayesian posterior variances of the coefficients, `sigma^2 diag((G + lambda D)^{-1})`.
    pub coef_variance: DVector<f64>,
    pub warning: Option<String>,
}

impl PenalizedSmoother {
    pub fn new(design: DMatrix<f64>, penalty: &[f64], y: &DVector<f64>) -> Result<Self> {
        let (n, p) = design.shape();
        if penalty.len() != p || y.len() != n {
            return Err(Error::invalid("penalty and response must match the design"));
        }
        if p >= n {
            return Err(Error::rank(format!("{p} columns leave no residual degrees of freedom for {n} rows")));
        }
        let gram = symmetrize(&(design.transpose() * &design));
        let (chol, jitter) = cholesky_jittered(&gram, 0.0, 1e-8)?;
        if jitter > 0.0 {
            log::debug!("penalized design needed jitter {jitter:e}");
        }
        let l = chol.l();
        let linv = l
            .clone()
            .solve_lower_triangular(&DMatrix::identity(p, p))
            .ok_or_else(|| Error::Factorization("triangular solve failed".into()))?;
        let dmat = DMatrix::from_fn(p, p, |i, j| if i == j { penalty[i] } else { 0.0 });
        let scaled = symmetrize(&(&linv * dmat * linv.transpose()));
        let (vals, vecs) = sorted_symmetric_eigen(&scaled);
        let lam: Vec<f64> = vals.iter().map(|v| v.max(0.0)).collect();
        let back = linv.transpose() * &vecs;
        let f = back.transpose() * (design.transpose() * y);
        Ok(Self {
            n,
            yty: y.dot(y),
            back,
            lam,
            f,
            design,
        })
    }

    pub fn rss_edf(&self, lambda: f64) -> (f64, f64) {
        let mut rss = self.yty;
        let mut edf = 0.0;
        for (fj, lj) in self.f.iter().zip(&self.lam) {
            let s = 1.0 / (1.0 + lambda * lj);
            rss += -2.0 * fj * fj * s + fj * fj * s * s;
            edf += s;
        }
        (rss.max(0.0), edf)
    }

    /// `n RSS / (n - edf)^2`.
    pub fn gcv(&self, lambda: f64) -> f64 {
        let (rss, edf) = self.rss_edf(lambda);
        let n = self.n as f64;
        n * rss / (n - edf).powi(2)
    }

    pub fn fit(&self, lambda: f64) -> PenalizedFit {
        let z = DVector::from_iterator(
            self.f.len(),
            self.f.iter().zip(&self.lam).map(|(fj, lj)| fj / (1.0 + lambda * lj)),
        );
        let coefficients = &self.back * z;
        let fitted = &self.design * &coefficients;
        let (rss, edf) = self.rss_edf(lambda);
        let sigma2 = rss / (self.n as f64 - edf).max(1.0);
        let coef_variance = DVector::from_fn(self.back.nrows(), |i, _| {
            sigma2
                * self
                    .back
                    .row(i)
                    .iter()
                    .zip(&self.lam)
                    .map(|(b, lj)| b * b / (1.0 + lambda * lj))
                    .sum::<f64>()
        });
        PenalizedFit {
            lambda,
            coefficients,
            fitted,
            rss,
            edf,
            gcv: self.gcv(lambda),
            coef_variance,
            warning: None,
        }
    }

    /// Minimize GCV over a log-spaced grid, then refine by golden-section search.
    pub fn fit_gcv(&self) -> Result<PenalizedFit> {
        let positive: Vec<f64> = sorted(&self.lam.iter().copied().filter(|&v| v > 0.0).collect::<Vec<_>>());
        if positive.is_empty() {
            return Ok(self.fit(0.0));
        }
        let scale = 1.0 / quantile_sorted(&positive, 0.5);
        let grid: Vec<f64> = (0..=64).map(|i| -8.0 + 0.25 * i as f64).collect();
        let score = |t: f64| self.gcv(scale * 10f64.powf(t));
        let values: Vec<f64> = grid.iter().map(|&t| score(t)).collect();
        let best = values
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .min_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .ok_or_else(|| Error::Numerical("GCV is not finite anywhere on the grid".into()))?;
        let lo = grid[best.saturating_sub(1)];
        let hi = grid[(best + 1).min(grid.len() - 1)];
        let t_star = golden_section(score, lo, hi, 1e-6);
        let (t, warning) = if t_star.is_finite() && score(t_star) <= values[best] {
            (t_star, None)
        } else {
            let msg = "GCV refinement failed; using the coarse-grid minimum".to_string();
            log::warn!("{msg}");
            (grid[best], Some(msg))
        };
        let mut fit = self.fit(scale * 10f64.powf(t));
        fit.warning = warning;
        Ok(fit)
    }

    pub fn fit_with(&self, choice: LambdaChoice) -> Result<PenalizedFit> {
        match choice {
            LambdaChoice::Gcv => self.fit_gcv(),
            LambdaChoice::Fixed(l) => Ok(self.fit(l)),
        }
    }
}

fn golden_section(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while (b - a).abs() > tol {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

/// Shared thin-plate eigen-decomposition for one site set.
pub struct SplineContext {
    eigen: TprsEigen,
    config: SplineConfig,
    smooth: TprsBasis,
}

impl SplineContext {
    pub fn new(sites: &SiteSet, config: SplineConfig) -> Result<Self> {
        config.validate(sites.len())?;
        let eigen = TprsEigen::new(sites)?;
        let smooth = eigen.basis(config.k_max)?;
        Ok(Self { eigen, config, smooth })
    }

    pub fn config(&self) -> &SplineConfig {
        &self.config
    }
}

fn with_leading(col: &DVector<f64>, rest: &DMatrix<f64>) -> DMatrix<f64> {
    hcat(&DMatrix::from_column_slice(col.len(), 1, col.as_slice()), rest)
}

fn smoother_for(basis: &TprsBasis, lead: Option<&DVector<f64>>, y: &DVector<f64>) -> Result<PenalizedSmoother> {
    let design = basis.design();
    let mut penalty = basis.penalty_diagonal();
    match lead {
        Some(v) => {
            penalty.insert(0, 0.0);
            PenalizedSmoother::new(with_leading(v, &design), &penalty, y)
        }
        None => PenalizedSmoother::new(design, &penalty, y),
    }
}

fn spline_result(method: MethodId, fit: &PenalizedFit, idx: usize, smooth_edf: f64) -> FitResult {
    let mut out = FitResult::new(method, fit.coefficients[idx]).normal_interval(fit.coef_variance[idx].sqrt());
    out.edf = Some(smooth_edf);
    out.diagnostics.insert("lambda".into(), json!(fit.lambda));
    out.diagnostics.insert("gcv".into(), json!(fit.gcv));
    if let Some(w) = &fit.warning {
        out.diagnostics.insert("warning".into(), json!(w));
    }
    out
}

/// One member of the spline family on precomputed TPRS eigenpairs.
pub fn fit_spline_family(
    method: MethodId,
    y: &DVector<f64>,
    x: &DVector<f64>,
    ctx: &SplineContext,
) -> Result<FitResult> {
    let n = ctx.eigen.n();
    if y.len() != n || x.len() != n {
        return Err(Error::invalid("response and exposure must match the site set"));
    }
    let choice = ctx.config.lambda;
    let basis = &ctx.smooth;
    match method {
        MethodId::SpatialTP => {
            let fit = smoother_for(basis, Some(x), y)?.fit_with(choice)?;
            // intercept and exposure are not part of the smooth
            Ok(spline_result(method, &fit, 0, fit.edf - 2.0))
        }
        MethodId::SpatialPlus | MethodId::SpatialPlusFx => {
            let choice = if method == MethodId::SpatialPlusFx { LambdaChoice::Fixed(0.0) } else { choice };
            let xfit = smoother_for(basis, None, x)?.fit_with(choice)?;
            let rx = x - &xfit.fitted;
            let fit = smoother_for(basis, Some(&rx), y)?.fit_with(choice)?;
            let mut out = spline_result(method, &fit, 0, fit.edf - 2.0);
            out.diagnostics.insert("lambda_x".into(), json!(xfit.lambda));
            Ok(out)
        }
        MethodId::Gsem => {
            let xfit = smoother_for(basis, None, x)?.fit_with(choice)?;
            let yfit = smoother_for(basis, None, y)?.fit_with(choice)?;
            let rx = x - &xfit.fitted;
            let ry = y - &yfit.fitted;
            let ols = fit_ols(&ry, &rx)?;
            let mut out = FitResult {
                method,
                edf: Some(yfit.edf - 1.0),
                ..ols
            };
            out.diagnostics.insert("lambda_x".into(), json!(xfit.lambda));
            out.diagnostics.insert("lambda_y".into(), json!(yfit.lambda));
            Ok(out)
        }
        MethodId::Ks => {
            let mut best: Option<(usize, f64)> = None;
            let mut aic_table = Vec::new();
            for &k in &ctx.config.ks_grid {
                let b = ctx.eigen.basis(k)?;
                let beta = crate::linalg::ols_coefficients(&b.design(), y)?;
                let rss = (y - b.design() * beta).norm_squared();
                let nn = n as f64;
                let aic = nn * (rss / nn).ln() + 2.0 * (k as f64 + 1.0);
                aic_table.push(json!([k, aic]));
                if best.is_none_or(|(_, a)| aic < a) {
                    best = Some((k, aic));
                }
            }
            let (k_star, _) = best.ok_or_else(|| Error::invalid("empty KS grid"))?;
            let b = ctx.eigen.basis(k_star)?;
            let fit = PenalizedSmoother::new(with_leading(x, &b.design()), &vec![0.0; k_star + 1], y)?.fit(0.0);
            let mut out = spline_result(method, &fit, 0, k_star as f64);
            out.diagnostics.remove("lambda");
            out.diagnostics.remove("gcv");
            out.diagnostics.insert("k_star".into(), json!(k_star));
            out.diagnostics.insert("aic".into(), Value::Array(aic_table));
            Ok(out)
        }
        other => Err(Error::Usage(format!("{other} is not a spline-family method"))),
    }
}

/// Priors for the spatial random-effects model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SrePrior {
    /// Range is uniform on `[range_lo, range_hi]` times the largest site distance.
    pub range_lo: f64,
    pub range_hi: f64,
    /// Inverse-gamma shape for both variances; scales are `scale_factor * var(y)`.
    pub shape: f64,
    pub scale_factor: f64,
}

impl Default for SrePrior {
    fn default() -> Self {
        Self {
            range_lo: 0.01,
            range_hi: 1.0,
            shape: 2.0,
            scale_factor: 1.0,
        }
    }
}

struct SreTarget<'a> {
    dist: &'a DMatrix<f64>,
    xd: DMatrix<f64>,
    y: &'a DVector<f64>,
    prior: SrePrior,
    dmax: f64,
    var_y: f64,
}

struct SreEval {
    log_target: f64,
    beta_hat: DVector<f64>,
    beta_cov_chol: DMatrix<f64>,
}

impl SreTarget<'_> {
    /// Restricted log likelihood plus log prior, on `(log phi, log sw2, log se2)`.
    fn evaluate(&self, eta: &[f64; 3]) -> Option<SreEval> {
        let phi = eta[0].exp();
        let (sw2, se2) = (eta[1].exp(), eta[2].exp());
        if phi < self.prior.range_lo * self.dmax || phi > self.prior.range_hi * self.dmax {
            return None;
        }
        let n = self.y.len();
        let sigma = DMatrix::from_fn(n, n, |i, j| {
            sw2 * (-self.dist[(i, j)] / phi).exp() + if i == j { se2 } else { 0.0 }
        });
        let chol = sigma.cholesky()?;
        let l = chol.l();
        let log_det: f64 = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let wx = l.solve_lower_triangular(&self.xd)?;
        let wy = l.solve_lower_triangular(self.y)?;
        let xtx = wx.transpose() * &wx;
        let xty = wx.transpose() * &wy;
        let xchol = xtx.clone().cholesky()?;
        let beta_hat = xchol.solve(&xty);
        let quad = wy.dot(&wy) - xty.dot(&beta_hat);
        let xlog_det: f64 = 2.0 * xchol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let loglik = -0.5 * (log_det + xlog_det + quad);
        let scale = self.prior.scale_factor * self.var_y;
        let a = self.prior.shape;
        // inverse-gamma log densities in log-variance coordinates (Jacobian included)
        let lp_var = |v: f64| -a * v.ln() - scale / v;
        let log_prior = eta[0] + lp_var(sw2) + lp_var(se2);
        let cov = xtx.try_inverse()?;
        let beta_cov_chol = symmetrize(&cov).cholesky()?.l();
        Some(SreEval {
            log_target: loglik + log_prior,
            beta_hat,
            beta_cov_chol,
        })
    }
}

/// Bayesian spatial random-effects regression with the effect marginalized.
pub fn fit_sre(y: &DVector<f64>, x: &DVector<f64>, sites: &SiteSet, mcmc: &McmcConfig) -> Result<FitResult> {
    fit_sre_with(y, x, sites, mcmc, SrePrior::default())
}

pub fn fit_sre_with(
    y: &DVector<f64>,
    x: &DVector<f64>,
    sites: &SiteSet,
    mcmc: &McmcConfig,
    prior: SrePrior,
) -> Result<FitResult> {
    mcmc.validate()?;
    let n = sites.len();
    if y.len() != n || x.len() != n {
        return Err(Error::invalid("response and exposure must match the site set"));
    }
    let dist = distance_matrix(sites);
    let dmax = dist.amax();
    let ym = y.mean();
    let var_y = y.iter().map(|v| (v - ym).powi(2)).sum::<f64>() / (n - 1) as f64;
    if !(var_y > 0.0) {
        return Err(Error::invalid("response has zero variance"));
    }
    let target = SreTarget {
        dist: &dist,
        xd: exposure_design(x),
        y,
        prior,
        dmax,
        var_y,
    };
    let mut rng = rng_from_seed(mcmc.seed);
    let mut eta = [(0.2 * dmax).ln(), (0.5 * var_y).ln(), (0.5 * var_y).ln()];
    let mut cur = target
        .evaluate(&eta)
        .ok_or_else(|| Error::Numerical("SRE starting covariance is not positive definite".into()))?;
    let mut step = 0.3;
    let mut accepted = 0usize;
    let mut post_accepted = 0usize;
    let mut draws = Vec::with_capacity(mcmc.iters - mcmc.burn_in);
    for it in 0..mcmc.iters {
        let mut cand = eta;
        for v in cand.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += step * z;
        }
        let mut ok = false;
        if let Some(ev) = target.evaluate(&cand) {
            if rng.random::<f64>().ln() < ev.log_target - cur.log_target {
                eta = cand;
                cur = ev;
                ok = true;
            }
        }
        if ok {
            accepted += 1;
            if it >= mcmc.burn_in {
                post_accepted += 1;
            }
        }
        if it < mcmc.burn_in {
            // Robbins-Monro adaptation towards 30% acceptance
            let target_rate = 0.3;
            let gain = 1.0 / ((it + 1) as f64).sqrt();
            step *= (gain * ((ok as u8 as f64) - target_rate)).exp();
        }
        if mcmc.keep(it) {
            let z = DVector::from_iterator(2, (0..2).map(|_| StandardNormal.sample(&mut rng)));
            let beta = &cur.beta_hat + &cur.beta_cov_chol * z;
            draws.push((beta[1], eta));
        }
    }
    if draws.is_empty() {
        return Err(Error::Usage("no SRE draws kept after burn-in".into()));
    }
    let bx: Vec<f64> = draws.iter().map(|d| d.0).collect();
    let mean = bx.iter().sum::<f64>() / bx.len() as f64;
    let s = sorted(&bx);
    let mut fit = FitResult::new(MethodId::Sre, mean);
    fit.interval = Some((quantile_sorted(&s, 0.025).min(mean), quantile_sorted(&s, 0.975).max(mean)));
    let kept = (mcmc.iters - mcmc.burn_in) as f64;
    let rate = post_accepted as f64 / kept;
    let avg = |k: usize| draws.iter().map(|d| d.1[k].exp()).sum::<f64>() / draws.len() as f64;
    fit.diagnostics.insert("acceptance".into(), json!(rate));
    fit.diagnostics.insert("overall_acceptance".into(), json!(accepted as f64 / mcmc.iters as f64));
    fit.diagnostics.insert("step".into(), json!(step));
    fit.diagnostics.insert("range_mean".into(), json!(avg(0)));
    fit.diagnostics.insert("sigma_w2_mean".into(), json!(avg(1)));
    fit.diagnostics.insert("sigma_eps2_mean".into(), json!(avg(2)));
    if !(0.05..=0.8).contains(&rate) {
        let msg = format!("random-walk acceptance {rate:.3} outside [0.05, 0.8] after adaptation");
        log::warn!("{msg}");
        fit.diagnostics.insert("warning".into(), json!(msg));
    }
    Ok(fit)
}

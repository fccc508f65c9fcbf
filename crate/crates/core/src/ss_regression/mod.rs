//! Spike-and-slab reduced-rank regression `y = beta0 + beta_x x + B xi + eps`.
//!
//! Three prior families on `xi`: a fixed-variance normal mixture (FV), a normal
//! mixture with inverse-gamma slab variances (NMIG), both sampled by Gibbs, and
//! a first-order product-moment non-local prior (MOM) sampled over model space
//! with Laplace-approximated marginals.

mod gibbs;
mod mom;

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::spd_solve;
use crate::stats::{quantile_sorted, sorted};

pub use gibbs::{gibbs_fv, gibbs_nmig, GibbsKernel};
pub use mom::{mom_sampler, LaplaceFit, MomModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PriorFamily {
    Fv,
    Nmig,
    Mom,
}

impl PriorFamily {
    pub fn name(self) -> &'static str {
        match self {
            PriorFamily::Fv => "SS_fv",
            PriorFamily::Nmig => "SS_nmig",
            PriorFamily::Mom => "SS_mom",
        }
    }
}

/// How the mixture weight `w` is treated by the Gibbs samplers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum InclusionPrior {
    Fixed(f64),
    /// `w ~ Beta(a, b)`, updated each sweep.
    Beta(f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SsPriorConfig {
    pub family: PriorFamily,
    /// Prior variance of `beta0` and `beta_x`.
    pub v_beta: f64,
    /// Inverse-gamma shape and scale for the error variance.
    pub a: f64,
    pub b: f64,
    pub w: InclusionPrior,
    /// Spike-to-slab variance ratio.
    pub c0: f64,
    /// Slab variance (FV) and initial slab variance (NMIG).
    pub psi2: f64,
    pub a_psi: f64,
    pub b_psi: f64,
    /// pMOM scale.
    pub nu: f64,
    /// Hold the inclusion indicators fixed at this pattern.
    pub fixed_gamma: Option<Vec<bool>>,
}

impl SsPriorConfig {
    pub fn new(family: PriorFamily) -> Self {
        Self {
            family,
            v_beta: 1.0,
            a: 2.0,
            b: 0.1,
            w: InclusionPrior::Fixed(0.5),
            c0: 1e-4,
            psi2: 1.0,
            a_psi: 2.0,
            b_psi: 1.0,
            nu: 0.348,
            fixed_gamma: None,
        }
    }

    pub fn validate(&self, p: usize) -> Result<()> {
        let pos = |v: f64, name: &str| -> Result<()> {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::invalid(format!("{name} must be positive, got {v}")))
            }
        };
        pos(self.v_beta, "V_beta")?;
        pos(self.a, "a")?;
        pos(self.b, "b")?;
        pos(self.c0, "c0")?;
        pos(self.psi2, "psi2")?;
        pos(self.a_psi, "a_psi")?;
        pos(self.b_psi, "b_psi")?;
        pos(self.nu, "nu")?;
        if self.c0 > 1.0 {
            return Err(Error::invalid("c0 must not exceed 1"));
        }
        match self.w {
            InclusionPrior::Fixed(w) if !(w > 0.0 && w < 1.0) => {
                return Err(Error::invalid(format!("w must lie in (0, 1), got {w}")))
            }
            InclusionPrior::Beta(a, b) if !(a > 0.0 && b > 0.0) => {
                return Err(Error::invalid("Beta parameters for w must be positive"))
            }
            _ => {}
        }
        if let Some(g) = &self.fixed_gamma {
            if g.len() != p {
                return Err(Error::invalid(format!(
                    "fixed inclusion pattern has length {}, expected {p}",
                    g.len()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McmcConfig {
    pub iters: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
}

impl McmcConfig {
    pub fn new(iters: usize, burn_in: usize, seed: u64) -> Self {
        Self {
            iters,
            burn_in,
            thin: 1,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.thin == 0 || self.iters <= self.burn_in {
            return Err(Error::Usage(format!(
                "need iters > burn_in and thin >= 1 (iters {}, burn-in {}, thin {})",
                self.iters, self.burn_in, self.thin
            )));
        }
        Ok(())
    }

    pub fn keep(&self, it: usize) -> bool {
        it >= self.burn_in && (it - self.burn_in).is_multiple_of(self.thin)
    }
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self::new(5000, 1000, 1)
    }
}

/// One draw, on the standardized scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub beta: [f64; 2],
    pub xi: Vec<f64>,
    pub gamma: Vec<bool>,
    pub sigma2: f64,
    pub psi2: Vec<f64>,
}

impl ModelState {
    pub fn included(&self) -> usize {
        self.gamma.iter().filter(|&&g| g).count()
    }
}

/// Centering and scaling applied to `y`, `x` and the basis columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizationRecord {
    pub y_mean: f64,
    pub y_scale: f64,
    pub x_mean: f64,
    pub x_scale: f64,
    pub b_means: Vec<f64>,
    pub b_scales: Vec<f64>,
}

impl StandardizationRecord {
    /// Exposure coefficient on the original scale.
    pub fn beta_x_original(&self, beta_x_std: f64) -> f64 {
        beta_x_std * self.y_scale / self.x_scale
    }

    pub fn beta_x_standardized(&self, beta_x: f64) -> f64 {
        beta_x * self.x_scale / self.y_scale
    }
}

/// Standardized response and design `A = [1 x_s B_s]`.
#[derive(Debug, Clone)]
pub struct StandardizedData {
    pub y: DVector<f64>,
    pub a: DMatrix<f64>,
    pub record: StandardizationRecord,
}

impl StandardizedData {
    pub fn n(&self) -> usize {
        self.y.len()
    }

    /// Number of basis columns.
    pub fn p(&self) -> usize {
        self.a.ncols() - 2
    }
}

fn center_scale(v: impl Iterator<Item = f64> + Clone, n: usize, what: &str) -> Result<(f64, f64)> {
    let m = v.clone().sum::<f64>() / n as f64;
    let var = v.map(|a| (a - m).powi(2)).sum::<f64>() / (n - 1) as f64;
    let s = var.sqrt();
    if !(s > 0.0 && s.is_finite()) {
        return Err(Error::invalid(format!("{what} has zero or non-finite spread")));
    }
    Ok((m, s))
}

/// Center and scale `y`, `x` and every column of `b` to mean 0 and unit sd.
pub fn standardize(y: &DVector<f64>, x: &DVector<f64>, b: &DMatrix<f64>) -> Result<StandardizedData> {
    let n = y.len();
    if n < 3 || x.len() != n || b.nrows() != n {
        return Err(Error::invalid("y, x and B must share at least 3 rows"));
    }
    if y.iter().chain(x.iter()).chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite value in regression inputs"));
    }
    let (ym, ys) = center_scale(y.iter().copied(), n, "y")?;
    let (xm, xs) = center_scale(x.iter().copied(), n, "x")?;
    let p = b.ncols();
    let mut a = DMatrix::zeros(n, p + 2);
    let mut b_means = Vec::with_capacity(p);
    let mut b_scales = Vec::with_capacity(p);
    for i in 0..n {
        a[(i, 0)] = 1.0;
        a[(i, 1)] = (x[i] - xm) / xs;
    }
    for j in 0..p {
        let col = b.column(j);
        let (m, s) = center_scale(col.iter().copied(), n, &format!("basis column {}", j + 1))?;
        for i in 0..n {
            a[(i, j + 2)] = (col[i] - m) / s;
        }
        b_means.push(m);
        b_scales.push(s);
    }
    Ok(StandardizedData {
        y: y.map(|v| (v - ym) / ys),
        a,
        record: StandardizationRecord {
            y_mean: ym,
            y_scale: ys,
            x_mean: xm,
            x_scale: xs,
            b_means,
            b_scales,
        },
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ChainDiagnostics {
    /// Acceptance rate of model-space moves (MOM only).
    pub model_acceptance: Option<f64>,
    /// Acceptance rate of within-model parameter moves (MOM only).
    pub parameter_acceptance: Option<f64>,
    /// Models whose mode search failed (their proposals were rejected).
    pub mode_failures: usize,
    /// Distinct models evaluated.
    pub models_visited: usize,
}

#[derive(Debug, Clone)]
pub struct PosteriorChain {
    pub family: PriorFamily,
    /// Retained draws after burn-in and thinning.
    pub draws: Vec<ModelState>,
    pub burn_in: usize,
    pub thin: usize,
    pub standardization: StandardizationRecord,
    pub diagnostics: ChainDiagnostics,
}

impl PosteriorChain {
    /// Posterior inclusion probability of every basis column.
    pub fn inclusion_probabilities(&self) -> Vec<f64> {
        let p = self.draws.first().map_or(0, |d| d.gamma.len());
        let mut counts = vec![0usize; p];
        for d in &self.draws {
            for (c, &g) in counts.iter_mut().zip(&d.gamma) {
                *c += g as usize;
            }
        }
        let m = self.draws.len().max(1) as f64;
        counts.into_iter().map(|c| c as f64 / m).collect()
    }

    /// Visit frequency of each inclusion pattern.
    pub fn model_frequencies(&self) -> std::collections::HashMap<Vec<bool>, f64> {
        let mut f = std::collections::HashMap::new();
        let m = self.draws.len().max(1) as f64;
        for d in &self.draws {
            *f.entry(d.gamma.clone()).or_insert(0.0) += 1.0 / m;
        }
        f
    }

    /// `beta_x` draws on the original scale.
    pub fn beta_x_draws(&self) -> Vec<f64> {
        self.draws
            .iter()
            .map(|d| self.standardization.beta_x_original(d.beta[1]))
            .collect()
    }

    /// Write retained draws as delimited text.
    pub fn write_draws_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let p = self.draws.first().map_or(0, |d| d.xi.len());
        let mut header: Vec<String> = ["draw", "beta_x", "beta0_std", "beta_x_std", "sigma2_std", "included"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        header.extend((1..=p).map(|j| format!("xi{j}")));
        w.write_record(&header)?;
        for (i, d) in self.draws.iter().enumerate() {
            let mut row = vec![
                i.to_string(),
                crate::simulator::fmt_sig(self.standardization.beta_x_original(d.beta[1])),
                crate::simulator::fmt_sig(d.beta[0]),
                crate::simulator::fmt_sig(d.beta[1]),
                crate::simulator::fmt_sig(d.sigma2),
                d.included().to_string(),
            ];
            row.extend(d.xi.iter().map(|&v| crate::simulator::fmt_sig(v)));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainSummary {
    pub family: PriorFamily,
    pub beta_x_mean: f64,
    pub beta_x_median: f64,
    /// Equal-tailed 95% credible interval.
    pub interval: (f64, f64),
    pub inclusion: Vec<f64>,
    /// Bases with inclusion probability above 0.5.
    pub edf: usize,
    pub draws: usize,
    pub diagnostics: ChainDiagnostics,
}

/// Posterior summaries on the original scale.
pub fn summarize(chain: &PosteriorChain) -> Result<ChainSummary> {
    if chain.draws.is_empty() {
        return Err(Error::Usage("cannot summarize an empty chain".into()));
    }
    let bx = sorted(&chain.beta_x_draws());
    let inclusion = chain.inclusion_probabilities();
    Ok(ChainSummary {
        family: chain.family,
        beta_x_mean: bx.iter().sum::<f64>() / bx.len() as f64,
        beta_x_median: quantile_sorted(&bx, 0.5),
        interval: (quantile_sorted(&bx, 0.025), quantile_sorted(&bx, 0.975)),
        edf: inclusion.iter().filter(|&&p| p > 0.5).count(),
        inclusion,
        draws: chain.draws.len(),
        diagnostics: chain.diagnostics.clone(),
    })
}

/// Run the sampler for `prior.family` on raw inputs.
pub fn fit_spike_slab(
    y: &DVector<f64>,
    x: &DVector<f64>,
    b: &DMatrix<f64>,
    prior: &SsPriorConfig,
    mcmc: &McmcConfig,
) -> Result<PosteriorChain> {
    match prior.family {
        PriorFamily::Fv => gibbs_fv(y, x, b, prior, mcmc),
        PriorFamily::Nmig => gibbs_nmig(y, x, b, prior, mcmc),
        PriorFamily::Mom => mom_sampler(y, x, b, prior, mcmc),
    }
}

/// Mean of `theta | sigma2, y` for `y ~ N(A theta, sigma2 I)` and independent
/// normal priors with the given precisions (zero precision = flat).
pub fn conditional_posterior_mean(
    a: &DMatrix<f64>,
    y: &DVector<f64>,
    prior_precision: &[f64],
    sigma2: f64,
) -> Result<DVector<f64>> {
    if prior_precision.len() != a.ncols() || a.nrows() != y.len() {
        return Err(Error::invalid("posterior-mean inputs disagree in size"));
    }
    let mut prec = a.transpose() * a / sigma2;
    for (j, &p) in prior_precision.iter().enumerate() {
        prec[(j, j)] += p;
    }
    let rhs = a.transpose() * y / sigma2;
    Ok(spd_solve(&prec, &DMatrix::from_column_slice(rhs.len(), 1, rhs.as_slice()))?
        .column(0)
        .into_owned())
}

pub(crate) fn validate_inputs(
    y: &DVector<f64>,
    x: &DVector<f64>,
    b: &DMatrix<f64>,
    prior: &SsPriorConfig,
    mcmc: &McmcConfig,
    expected: PriorFamily,
) -> Result<StandardizedData> {
    if prior.family != expected {
        return Err(Error::Usage(format!(
            "prior family {:?} passed to the {:?} sampler",
            prior.family, expected
        )));
    }
    mcmc.validate()?;
    prior.validate(b.ncols())?;
    standardize(y, x, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> (DVector<f64>, DVector<f64>, DMatrix<f64>) {
        let n = 30;
        let x = DVector::from_fn(n, |i, _| (i as f64 * 0.37).sin() * 2.0 + 1.0);
        let b = DMatrix::from_fn(n, 3, |i, j| ((i * (j + 2)) as f64 * 0.21).cos());
        let y = DVector::from_fn(n, |i, _| 3.0 + 2.0 * x[i] + b[(i, 0)] + 0.1 * (i as f64).sin());
        (y, x, b)
    }

    #[test]
    fn standardization_round_trip() {
        let (y, x, b) = toy();
        let s = standardize(&y, &x, &b).unwrap();
        assert!(s.y.mean().abs() < 1e-12);
        assert!((s.a.column(1).variance() * 30.0 / 29.0 - 1.0).abs() < 1e-12);
        let r = &s.record;
        assert!((r.beta_x_original(r.beta_x_standardized(1.7)) - 1.7).abs() < 1e-14);
        let ols = crate::linalg::ols_coefficients(&s.a.columns(0, 2).into_owned(), &s.y).unwrap();
        let raw = crate::linalg::ols_coefficients(&crate::linalg::exposure_design(&x), &y).unwrap();
        assert!((r.beta_x_original(ols[1]) - raw[1]).abs() < 1e-10);
    }

    #[test]
    fn zero_column_is_rejected() {
        let (y, x, mut b) = toy();
        b.column_mut(1).fill(0.0);
        assert!(matches!(standardize(&y, &x, &b), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn constant_chain_summary() {
        let rec = StandardizationRecord {
            y_mean: 0.0,
            y_scale: 2.0,
            x_mean: 0.0,
            x_scale: 1.0,
            b_means: vec![0.0],
            b_scales: vec![1.0],
        };
        let state = ModelState {
            beta: [0.0, 0.75],
            xi: vec![0.0],
            gamma: vec![false],
            sigma2: 1.0,
            psi2: vec![1.0],
        };
        let chain = PosteriorChain {
            family: PriorFamily::Mom,
            draws: vec![state; 10],
            burn_in: 0,
            thin: 1,
            standardization: rec,
            diagnostics: ChainDiagnostics::default(),
        };
        let s = summarize(&chain).unwrap();
        assert_eq!(s.interval, (1.5, 1.5));
        assert_eq!(s.beta_x_mean, 1.5);
        assert_eq!(s.edf, 0);
        let empty = PosteriorChain { draws: vec![], ..chain };
        assert!(matches!(summarize(&empty), Err(Error::Usage(_))));
    }

    #[test]
    fn flat_prior_mean_is_least_squares() {
        let (y, x, b) = toy();
        let a = crate::linalg::hcat(&crate::linalg::exposure_design(&x), &b);
        let m = conditional_posterior_mean(&a, &y, &[0.0; 5], 0.7).unwrap();
        let ls = crate::linalg::ols_coefficients(&a, &y).unwrap();
        assert!((m - ls).amax() < 1e-8);
    }
}

//! Model-space Metropolis-Hastings under first-order product-moment priors.
//!
//! Within a model with basis set `S`, the unknowns are `(beta0, beta_x, xi_S, eta)`
//! with `eta = log sigma^2`:
//! `xi_l | sigma^2 ~ xi_l^2 / (nu sigma^2) N(0, nu sigma^2)`, `beta ~ N(0, V_beta)`,
//! `sigma^2 ~ IG(a, b)`, and a Beta-Binomial(1, 1) prior on the model.
//! Marginal likelihoods are Laplace approximations around the posterior mode.

use std::collections::HashMap;
use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use statrs::function::gamma::ln_gamma;

use super::{
    validate_inputs, ChainDiagnostics, McmcConfig, ModelState, PosteriorChain, PriorFamily,
    SsPriorConfig,
};
use crate::error::{Error, Result};
use crate::simulator::rng_from_seed;

const MAX_NEWTON: usize = 200;

/// Cross products of a standardized design plus prior constants.
#[derive(Debug, Clone)]
pub struct MomModel {
    ata: DMatrix<f64>,
    aty: DVector<f64>,
    yty: f64,
    n: usize,
    p: usize,
    v_beta: f64,
    a: f64,
    b: f64,
    nu: f64,
}

/// Laplace approximation for one model.
#[derive(Debug, Clone)]
pub struct LaplaceFit {
    /// Included basis columns (zero-based, into `B`).
    pub columns: Vec<usize>,
    pub log_marginal: f64,
    /// `(beta0, beta_x, xi_S, eta)`.
    pub mode: DVector<f64>,
    /// Lower Cholesky factor of the negative Hessian at the mode.
    pub neg_hessian_l: DMatrix<f64>,
}

impl MomModel {
    pub fn new(a: &DMatrix<f64>, y: &DVector<f64>, prior: &SsPriorConfig) -> Result<Self> {
        if a.nrows() != y.len() || a.ncols() < 2 {
            return Err(Error::invalid("design must have n rows and at least beta columns"));
        }
        prior.validate(a.ncols() - 2)?;
        Ok(Self {
            ata: a.transpose() * a,
            aty: a.transpose() * y,
            yty: y.dot(y),
            n: a.nrows(),
            p: a.ncols() - 2,
            v_beta: prior.v_beta,
            a: prior.a,
            b: prior.b,
            nu: prior.nu,
        })
    }

    pub fn p(&self) -> usize {
        self.p
    }

    /// Beta-Binomial(1, 1) prior: `1 / ((p + 1) C(p, k))`.
    pub fn log_model_prior(&self, k: usize) -> f64 {
        let p = self.p as f64;
        let k = k as f64;
        -(p + 1.0).ln() - (ln_gamma(p + 1.0) - ln_gamma(k + 1.0) - ln_gamma(p - k + 1.0))
    }

    /// Log pMOM density of one coefficient.
    pub fn log_pmom(&self, xi: f64, sigma2: f64) -> f64 {
        let v = self.nu * sigma2;
        (xi * xi).ln() - v.ln() - 0.5 * (2.0 * PI * v).ln() - xi * xi / (2.0 * v)
    }

    fn design_index(columns: &[usize]) -> Vec<usize> {
        let mut idx = vec![0, 1];
        idx.extend(columns.iter().map(|&c| c + 2));
        idx
    }

    fn sub(&self, idx: &[usize]) -> (DMatrix<f64>, DVector<f64>) {
        let m = idx.len();
        let g = DMatrix::from_fn(m, m, |i, j| self.ata[(idx[i], idx[j])]);
        let r = DVector::from_fn(m, |i, _| self.aty[idx[i]]);
        (g, r)
    }

    /// Log joint density of `(y, theta)` in the `(beta, xi, eta)` parametrization,
    /// including the Jacobian of `eta = log sigma^2`.
    fn log_post(&self, g: &DMatrix<f64>, r: &DVector<f64>, theta: &DVector<f64>) -> f64 {
        let m = g.nrows();
        let coef = theta.rows(0, m);
        let eta = theta[m];
        let s = (-eta).exp();
        let rss = (self.yty - 2.0 * coef.dot(r) + coef.dot(&(g * coef))).max(0.0);
        let n = self.n as f64;
        let mut h = -0.5 * n * (2.0 * PI).ln() - 0.5 * n * eta - 0.5 * rss * s;
        for j in 0..2 {
            h += -0.5 * (2.0 * PI * self.v_beta).ln() - coef[j] * coef[j] / (2.0 * self.v_beta);
        }
        for j in 2..m {
            let xi = coef[j];
            h += (xi * xi).ln() - self.nu.ln() - 1.5 * eta - 0.5 * (2.0 * PI * self.nu).ln()
                - xi * xi * s / (2.0 * self.nu);
        }
        h += self.a * self.b.ln() - ln_gamma(self.a) - self.a * eta - self.b * s;
        h
    }

    /// Gradient and negative Hessian of [`MomModel::log_post`].
    fn derivatives(
        &self,
        g: &DMatrix<f64>,
        r: &DVector<f64>,
        theta: &DVector<f64>,
    ) -> (DVector<f64>, DMatrix<f64>) {
        let m = g.nrows();
        let d = m + 1;
        let coef = theta.rows(0, m).into_owned();
        let eta = theta[m];
        let s = (-eta).exp();
        let resid_grad = r - g * &coef;
        let rss = (self.yty - 2.0 * coef.dot(r) + coef.dot(&(g * &coef))).max(0.0);
        let n = self.n as f64;

        let mut grad = DVector::zeros(d);
        let mut neg_h = DMatrix::zeros(d, d);
        for i in 0..m {
            grad[i] = s * resid_grad[i];
            for j in 0..m {
                neg_h[(i, j)] = s * g[(i, j)];
            }
            neg_h[(i, m)] = s * resid_grad[i];
            neg_h[(m, i)] = s * resid_grad[i];
        }
        grad[m] = -0.5 * n + 0.5 * rss * s;
        neg_h[(m, m)] = 0.5 * rss * s;
        for j in 0..2 {
            grad[j] -= coef[j] / self.v_beta;
            neg_h[(j, j)] += 1.0 / self.v_beta;
        }
        for j in 2..m {
            let xi = coef[j];
            grad[j] += 2.0 / xi - xi * s / self.nu;
            neg_h[(j, j)] += 2.0 / (xi * xi) + s / self.nu;
            grad[m] += -1.5 + xi * xi * s / (2.0 * self.nu);
            neg_h[(m, m)] += xi * xi * s / (2.0 * self.nu);
            neg_h[(j, m)] -= xi * s / self.nu;
            neg_h[(m, j)] -= xi * s / self.nu;
        }
        grad[m] += -self.a + self.b * s;
        neg_h[(m, m)] += self.b * s;
        (grad, neg_h)
    }

    fn starting_point(&self, g: &DMatrix<f64>, r: &DVector<f64>) -> DVector<f64> {
        let m = g.nrows();
        let mut ridge = g.clone();
        for i in 0..m {
            ridge[(i, i)] += 1e-2 * (1.0 + g[(i, i)]);
        }
        let coef = ridge
            .cholesky()
            .map(|c| c.solve(r))
            .unwrap_or_else(|| DVector::zeros(m));
        let rss = (self.yty - 2.0 * coef.dot(r) + coef.dot(&(g * &coef))).max(0.0);
        let sigma2 = (rss / self.n as f64).max(1e-4);
        let floor = 0.5 * (self.nu * sigma2).sqrt();
        let mut theta = DVector::zeros(m + 1);
        for i in 0..m {
            theta[i] = coef[i];
        }
        for i in 2..m {
            let c = coef[i];
            theta[i] = if c.abs() < floor {
                if c < 0.0 { -floor } else { floor }
            } else {
                c
            };
        }
        theta[m] = sigma2.ln();
        theta
    }

    /// Posterior mode and Laplace log marginal likelihood for the given columns.
    pub fn laplace(&self, columns: &[usize]) -> Result<LaplaceFit> {
        if columns.iter().any(|&c| c >= self.p) {
            return Err(Error::invalid("basis index out of range"));
        }
        let idx = Self::design_index(columns);
        let (g, r) = self.sub(&idx);
        let m = idx.len();
        let mut theta = self.starting_point(&g, &r);
        let mut h = self.log_post(&g, &r, &theta);
        let mut converged = false;
        for _ in 0..MAX_NEWTON {
            let (grad, neg_h) = self.derivatives(&g, &r, &theta);
            let mut damp = 0.0;
            let step = loop {
                let mut mat = neg_h.clone();
                if damp > 0.0 {
                    for i in 0..=m {
                        mat[(i, i)] += damp * (1.0 + neg_h[(i, i)].abs());
                    }
                }
                if let Some(c) = Cholesky::new(mat) {
                    break c.solve(&grad);
                }
                damp = if damp == 0.0 { 1e-6 } else { damp * 10.0 };
                if damp > 1e6 {
                    return Err(Error::ModeSearch("negative Hessian cannot be regularized".into()));
                }
            };
            let decrement = grad.dot(&step);
            if damp == 0.0 && decrement.abs() < 1e-12 {
                converged = true;
                break;
            }
            let mut t = 1.0;
            let mut moved = false;
            while t > 1e-12 {
                let cand = &theta + &step * t;
                let sign_ok = (2..m).all(|j| cand[j] * theta[j] > 0.0);
                if sign_ok {
                    let hc = self.log_post(&g, &r, &cand);
                    if hc.is_finite() && hc >= h - 1e-12 * h.abs().max(1.0) {
                        theta = cand;
                        h = hc;
                        moved = true;
                        break;
                    }
                }
                t *= 0.5;
            }
            if !moved {
                break;
            }
        }
        let (grad, neg_h) = self.derivatives(&g, &r, &theta);
        let chol = Cholesky::new(neg_h.clone());
        let scale = 1.0 + theta.amax();
        if !converged && grad.amax() > 1e-6 * scale {
            return Err(Error::ModeSearch(format!(
                "gradient norm {:.3e} after {MAX_NEWTON} Newton steps",
                grad.amax()
            )));
        }
        let chol = chol.ok_or_else(|| Error::ModeSearch("Hessian at the mode is not negative definite".into()))?;
        let l = chol.l();
        let log_det: f64 = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let d = (m + 1) as f64;
        Ok(LaplaceFit {
            columns: columns.to_vec(),
            log_marginal: h + 0.5 * d * (2.0 * PI).ln() - 0.5 * log_det,
            mode: theta,
            neg_hessian_l: l,
        })
    }

    /// Log joint density at `theta` for the model `columns`.
    pub fn log_posterior(&self, columns: &[usize], theta: &DVector<f64>) -> f64 {
        let idx = Self::design_index(columns);
        let (g, r) = self.sub(&idx);
        self.log_post(&g, &r, theta)
    }
}

struct CachedModel {
    fit: LaplaceFit,
    current: DVector<f64>,
    current_log_post: f64,
    current_log_q: f64,
}

impl CachedModel {
    fn new(model: &MomModel, fit: LaplaceFit) -> Self {
        let current = fit.mode.clone();
        let current_log_post = model.log_posterior(&fit.columns, &current);
        Self {
            fit,
            current,
            current_log_post,
            current_log_q: 0.0,
        }
    }

    /// One independence Metropolis step with proposal `N(mode, (-H)^{-1})`.
    fn refresh(&mut self, model: &MomModel, rng: &mut ChaCha8Rng) -> bool {
        let d = self.fit.mode.len();
        let z = DVector::from_iterator(d, (0..d).map(|_| StandardNormal.sample(rng)));
        let Some(dev) = self.fit.neg_hessian_l.transpose().solve_upper_triangular(&z) else {
            return false;
        };
        let cand = &self.fit.mode + dev;
        let log_q = -0.5 * z.dot(&z);
        let log_post = model.log_posterior(&self.fit.columns, &cand);
        let log_alpha = log_post - self.current_log_post - (log_q - self.current_log_q);
        if log_post.is_finite() && rng.random::<f64>().ln() < log_alpha {
            self.current = cand;
            self.current_log_post = log_post;
            self.current_log_q = log_q;
            true
        } else {
            false
        }
    }
}

/// Model-space sampler under pMOM priors.
pub fn mom_sampler(
    y: &DVector<f64>,
    x: &DVector<f64>,
    b: &DMatrix<f64>,
    prior: &SsPriorConfig,
    mcmc: &McmcConfig,
) -> Result<PosteriorChain> {
    let data = validate_inputs(y, x, b, prior, mcmc, PriorFamily::Mom)?;
    let model = MomModel::new(&data.a, &data.y, prior)?;
    let p = model.p();
    let mut rng = rng_from_seed(mcmc.seed);
    let mut cache: HashMap<Vec<usize>, Option<CachedModel>> = HashMap::new();
    let mut failures = 0usize;

    let mut fetch = |cols: &Vec<usize>, cache: &mut HashMap<Vec<usize>, Option<CachedModel>>| -> Option<f64> {
        let entry = cache.entry(cols.clone()).or_insert_with(|| match model.laplace(cols) {
            Ok(fit) => Some(CachedModel::new(&model, fit)),
            Err(e) => {
                log::debug!("model {cols:?} skipped: {e}");
                failures += 1;
                None
            }
        });
        entry.as_ref().map(|c| c.fit.log_marginal)
    };

    let start: Vec<usize> = match &prior.fixed_gamma {
        Some(g) => (0..p).filter(|&j| g[j]).collect(),
        None => Vec::new(),
    };
    let mut current = start;
    let mut current_score = fetch(&current, &mut cache)
        .ok_or_else(|| Error::ModeSearch("mode search failed for the starting model".into()))?
        + model.log_model_prior(current.len());

    let mut model_moves = 0usize;
    let mut model_accepts = 0usize;
    let mut param_accepts = 0usize;
    let mut draws = Vec::with_capacity((mcmc.iters - mcmc.burn_in) / mcmc.thin + 1);
    let mut outside: Vec<usize> = Vec::with_capacity(p);

    for it in 0..mcmc.iters {
        if prior.fixed_gamma.is_none() && p > 0 {
            let k = current.len();
            let u: f64 = rng.random();
            let proposal = if u < 0.45 {
                (k < p).then(|| {
                    outside.clear();
                    outside.extend((0..p).filter(|j| current.binary_search(j).is_err()));
                    let j = outside[rng.random_range(0..outside.len())];
                    let mut next = current.clone();
                    next.insert(next.binary_search(&j).unwrap_err(), j);
                    (next, ((p - k) as f64 / (k + 1) as f64).ln())
                })
            } else if u < 0.9 {
                (k > 0).then(|| {
                    let mut next = current.clone();
                    next.remove(rng.random_range(0..k));
                    (next, (k as f64 / (p - k + 1) as f64).ln())
                })
            } else {
                (k > 0 && k < p).then(|| {
                    outside.clear();
                    outside.extend((0..p).filter(|j| current.binary_search(j).is_err()));
                    let j = outside[rng.random_range(0..outside.len())];
                    let mut next = current.clone();
                    next.remove(rng.random_range(0..k));
                    next.insert(next.binary_search(&j).unwrap_err(), j);
                    (next, 0.0)
                })
            };
            if let Some((next, log_q_ratio)) = proposal {
                model_moves += 1;
                if let Some(lm) = fetch(&next, &mut cache) {
                    let score = lm + model.log_model_prior(next.len());
                    if rng.random::<f64>().ln() < score - current_score + log_q_ratio {
                        current = next;
                        current_score = score;
                        model_accepts += 1;
                    }
                }
            }
        }

        let cached = cache
            .get_mut(&current)
            .and_then(|c| c.as_mut())
            .expect("current model is always cached with a valid fit");
        if cached.refresh(&model, &mut rng) {
            param_accepts += 1;
        }

        if mcmc.keep(it) {
            let theta = &cached.current;
            let mut xi = vec![0.0; p];
            let mut gamma = vec![false; p];
            for (pos, &j) in current.iter().enumerate() {
                xi[j] = theta[2 + pos];
                gamma[j] = true;
            }
            let m = current.len() + 2;
            draws.push(ModelState {
                beta: [theta[0], theta[1]],
                xi,
                gamma,
                sigma2: theta[m].exp(),
                psi2: Vec::new(),
            });
        }
    }

    let visited = cache.len();
    Ok(PosteriorChain {
        family: PriorFamily::Mom,
        draws,
        burn_in: mcmc.burn_in,
        thin: mcmc.thin,
        standardization: data.record,
        diagnostics: ChainDiagnostics {
            model_acceptance: (model_moves > 0).then(|| model_accepts as f64 / model_moves as f64),
            parameter_acceptance: Some(param_accepts as f64 / mcmc.iters as f64),
            mode_failures: failures,
            models_visited: visited,
        },
    })
}

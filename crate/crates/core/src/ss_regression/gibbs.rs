//! Gibbs samplers for the FV and NMIG spike-and-slab priors.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Gamma, StandardNormal};

use super::{
    validate_inputs, ChainDiagnostics, InclusionPrior, McmcConfig, ModelState, PosteriorChain,
    PriorFamily, SsPriorConfig, StandardizedData,
};
use crate::error::{Error, Result};
use crate::simulator::rng_from_seed;

/// Full conditionals for `theta = (beta, xi)`, `gamma`, `psi^2`, `w` and `sigma^2`
/// on a fixed standardized design.
#[derive(Debug, Clone)]
pub struct GibbsKernel {
    a: DMatrix<f64>,
    ata: DMatrix<f64>,
    aty: DVector<f64>,
    yty: f64,
    n: usize,
    prior: SsPriorConfig,
    update_psi: bool,
}

/// Draw from `IG(shape, scale)`.
pub(crate) fn inverse_gamma(shape: f64, scale: f64, rng: &mut ChaCha8Rng) -> f64 {
    let g: f64 = Gamma::new(shape, 1.0 / scale)
        .expect("inverse-gamma parameters are positive")
        .sample(rng);
    1.0 / g
}

impl GibbsKernel {
    pub fn new(a: DMatrix<f64>, y: &DVector<f64>, prior: SsPriorConfig) -> Result<Self> {
        if a.nrows() != y.len() || a.ncols() < 2 {
            return Err(Error::invalid("design must have n rows and at least beta columns"));
        }
        prior.validate(a.ncols() - 2)?;
        let update_psi = prior.family == PriorFamily::Nmig;
        let ata = a.transpose() * &a;
        let aty = a.transpose() * y;
        Ok(Self {
            n: a.nrows(),
            yty: y.dot(y),
            a,
            ata,
            aty,
            prior,
            update_psi,
        })
    }

    pub fn p(&self) -> usize {
        self.a.ncols() - 2
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.a
    }

    /// Replace the response, keeping the design.
    pub fn set_response(&mut self, y: &DVector<f64>) {
        self.aty = self.a.transpose() * y;
        self.yty = y.dot(y);
    }

    pub fn initial_state(&self) -> ModelState {
        let p = self.p();
        ModelState {
            beta: [0.0, 0.0],
            xi: vec![0.0; p],
            gamma: self.prior.fixed_gamma.clone().unwrap_or_else(|| vec![true; p]),
            sigma2: 1.0,
            psi2: vec![self.prior.psi2; p],
        }
    }

    pub fn initial_w(&self) -> f64 {
        match self.prior.w {
            InclusionPrior::Fixed(w) => w,
            InclusionPrior::Beta(a, b) => a / (a + b),
        }
    }

    /// Prior variance of every coefficient in `theta` given the indicators.
    pub fn prior_variances(&self, state: &ModelState) -> Vec<f64> {
        let mut v = vec![self.prior.v_beta, self.prior.v_beta];
        v.extend(
            state
                .gamma
                .iter()
                .zip(&state.psi2)
                .map(|(&g, &s)| if g { s } else { self.prior.c0 * s }),
        );
        v
    }

    /// Mean and Cholesky factor of the precision of `theta | rest`.
    pub fn theta_conditional(&self, state: &ModelState) -> Result<(DVector<f64>, Cholesky<f64, Dyn>)> {
        let inv_s2 = 1.0 / state.sigma2;
        let mut prec = &self.ata * inv_s2;
        for (j, v) in self.prior_variances(state).into_iter().enumerate() {
            prec[(j, j)] += 1.0 / v;
        }
        let chol = Cholesky::new(prec)
            .ok_or_else(|| Error::Numerical("theta precision is not positive definite".into()))?;
        let mean = chol.solve(&(&self.aty * inv_s2));
        Ok((mean, chol))
    }

    /// Probability that `gamma_j = 1` given `xi_j`, `psi_j^2` and `w`.
    pub fn inclusion_probability(&self, xi: f64, psi2: f64, w: f64) -> f64 {
        let c0 = self.prior.c0;
        let log_m1 = w.ln() - xi * xi / (2.0 * psi2);
        let log_m0 = (1.0 - w).ln() - 0.5 * c0.ln() - xi * xi / (2.0 * c0 * psi2);
        1.0 / (1.0 + (log_m0 - log_m1).exp())
    }

    /// `||y - A theta||^2` from the cached cross products.
    pub fn rss(&self, theta: &DVector<f64>) -> f64 {
        (self.yty - 2.0 * theta.dot(&self.aty) + theta.dot(&(&self.ata * theta))).max(0.0)
    }

    /// One systematic-scan sweep.
    pub fn sweep(&self, state: &mut ModelState, w: &mut f64, rng: &mut ChaCha8Rng) -> Result<()> {
        let p = self.p();
        let (mean, chol) = self.theta_conditional(state)?;
        let z = DVector::from_iterator(mean.len(), (0..mean.len()).map(|_| StandardNormal.sample(rng)));
        let dev = chol
            .l()
            .transpose()
            .solve_upper_triangular(&z)
            .ok_or_else(|| Error::Numerical("singular precision factor".into()))?;
        let theta = mean + dev;
        state.beta = [theta[0], theta[1]];
        for j in 0..p {
            state.xi[j] = theta[j + 2];
        }

        if self.prior.fixed_gamma.is_none() {
            for j in 0..p {
                let pr = self.inclusion_probability(state.xi[j], state.psi2[j], *w);
                state.gamma[j] = rng.random::<f64>() < pr;
            }
        }

        if self.update_psi {
            let c0 = self.prior.c0;
            for j in 0..p {
                let scale = if state.gamma[j] { 1.0 } else { c0 };
                state.psi2[j] = inverse_gamma(
                    self.prior.a_psi + 0.5,
                    self.prior.b_psi + state.xi[j] * state.xi[j] / (2.0 * scale),
                    rng,
                );
            }
        }

        if let InclusionPrior::Beta(a, b) = self.prior.w {
            let k = state.included() as f64;
            *w = Beta::new(a + k, b + p as f64 - k)
                .map_err(|e| Error::Numerical(e.to_string()))?
                .sample(rng);
        }

        let rss = self.rss(&theta);
        state.sigma2 = inverse_gamma(self.prior.a + self.n as f64 / 2.0, self.prior.b + rss / 2.0, rng);
        Ok(())
    }
}

fn run_gibbs(data: StandardizedData, prior: &SsPriorConfig, mcmc: &McmcConfig) -> Result<PosteriorChain> {
    let kernel = GibbsKernel::new(data.a, &data.y, prior.clone())?;
    let mut rng = rng_from_seed(mcmc.seed);
    let mut state = kernel.initial_state();
    let mut w = kernel.initial_w();
    let mut draws = Vec::with_capacity((mcmc.iters - mcmc.burn_in) / mcmc.thin + 1);
    for it in 0..mcmc.iters {
        kernel.sweep(&mut state, &mut w, &mut rng)?;
        if mcmc.keep(it) {
            draws.push(state.clone());
        }
    }
    Ok(PosteriorChain {
        family: prior.family,
        draws,
        burn_in: mcmc.burn_in,
        thin: mcmc.thin,
        standardization: data.record,
        diagnostics: ChainDiagnostics::default(),
    })
}

/// Gibbs sampler under the fixed-variance spike-and-slab prior.
pub fn gibbs_fv(
    y: &DVector<f64>,
    x: &DVector<f64>,
    b: &DMatrix<f64>,
    prior: &SsPriorConfig,
    mcmc: &McmcConfig,
) -> Result<PosteriorChain> {
    let data = validate_inputs(y, x, b, prior, mcmc, PriorFamily::Fv)?;
    run_gibbs(data, prior, mcmc)
}

/// Gibbs sampler under the NMIG prior.
pub fn gibbs_nmig(
    y: &DVector<f64>,
    x: &DVector<f64>,
    b: &DMatrix<f64>,
    prior: &SsPriorConfig,
    mcmc: &McmcConfig,
) -> Result<PosteriorChain> {
    let data = validate_inputs(y, x, b, prior, mcmc, PriorFamily::Nmig)?;
    run_gibbs(data, prior, mcmc)
}

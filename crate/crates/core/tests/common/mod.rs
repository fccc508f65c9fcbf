//! Shared data generators and independent oracles for the integration tests.
#![allow(dead_code)]

use std::collections::HashMap;

use nalgebra::{Cholesky, DMatrix, DVector};
use spconf_core::basis::{principal_kriging_basis, NullSpaceType};
use spconf_core::simulator::{
    conditional_law, derive_seed, sample_exposure, sample_grid_sites, sample_replicate,
    ConfoundingScenario,
};
use spconf_core::spatial::{SiteSet, SqrtMethod};

/// Sites, exposure and one outcome draw from the standard scenario.
pub fn simulated(n: usize, phi_x: f64, phi_w: f64, seed: u64) -> (SiteSet, DVector<f64>, DVector<f64>) {
    let sc = ConfoundingScenario::standard(phi_x, phi_w);
    let sites = sample_grid_sites(n, 32, derive_seed(seed, &[0])).unwrap();
    let x = sample_exposure(&sc, &sites, derive_seed(seed, &[1]), SqrtMethod::SymmetricEigen).unwrap();
    let law = conditional_law(&sc, &sites, &x, SqrtMethod::SymmetricEigen).unwrap();
    let rep = sample_replicate(&sc, &sites, &law, &x, derive_seed(seed, &[2])).unwrap();
    (sites, x, rep.y_vec())
}

/// Simulated data plus the leading `p` columns of the type-1 principal basis.
pub fn regression_data(n: usize, p: usize, seed: u64) -> (DVector<f64>, DVector<f64>, DMatrix<f64>) {
    let (sites, x, y) = simulated(n, 0.05, 0.5, seed);
    let basis = principal_kriging_basis(&sites, NullSpaceType::Type1, None).unwrap();
    (y, x, basis.leading(p).unwrap())
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `log N(y; 0, s2 I + A diag(v) A')` via the matrix determinant lemma.
pub fn log_gaussian_marginal(a: &DMatrix<f64>, y: &DVector<f64>, v: &[f64], s2: f64) -> f64 {
    let n = y.len() as f64;
    let mut p = a.transpose() * a / s2;
    for (j, &vj) in v.iter().enumerate() {
        p[(j, j)] += 1.0 / vj;
    }
    let chol = Cholesky::new(p).expect("positive definite");
    let logdet_p: f64 = chol.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
    let logdet = n * s2.ln() + v.iter().map(|x| x.ln()).sum::<f64>() + logdet_p;
    let aty = a.transpose() * y / s2;
    let quad = y.dot(y) / s2 - aty.dot(&chol.solve(&aty));
    -0.5 * (n * (2.0 * std::f64::consts::PI).ln() + logdet + quad)
}

/// `log IG(s2; a, b)`.
pub fn log_inverse_gamma(s2: f64, a: f64, b: f64) -> f64 {
    a * b.ln() - statrs::function::gamma::ln_gamma(a) - (a + 1.0) * s2.ln() - b / s2
}

/// Trapezoid grid over `log sigma^2`, returned as `(sigma^2, log weight)` pairs
/// that already include the Jacobian.
pub fn log_sigma_grid(lo: f64, hi: f64, m: usize) -> Vec<(f64, f64)> {
    let h = (hi.ln() - lo.ln()) / (m - 1) as f64;
    (0..m)
        .map(|i| {
            let t = lo.ln() + i as f64 * h;
            let w = if i == 0 || i == m - 1 { 0.5 * h } else { h };
            (t.exp(), w.ln() + t)
        })
        .collect()
}

/// `log p(y | gamma)` under the FV prior: Gaussian given `sigma^2`, which is
/// integrated out numerically against its inverse-gamma prior.
pub fn fv_log_evidence(
    a: &DMatrix<f64>,
    y: &DVector<f64>,
    gamma: &[bool],
    v_beta: f64,
    psi2: f64,
    c0: f64,
    ig: (f64, f64),
) -> f64 {
    let mut v = vec![v_beta, v_beta];
    v.extend(gamma.iter().map(|&g| if g { psi2 } else { c0 * psi2 }));
    let terms: Vec<f64> = log_sigma_grid(1e-3, 20.0, 1500)
        .into_iter()
        .map(|(s2, lw)| lw + log_gaussian_marginal(a, y, &v, s2) + log_inverse_gamma(s2, ig.0, ig.1))
        .collect();
    log_sum_exp(&terms)
}

/// All `2^p` inclusion patterns, lowest column in the least significant bit.
pub fn all_patterns(p: usize) -> Vec<Vec<bool>> {
    (0..1usize << p)
        .map(|m| (0..p).map(|j| m >> j & 1 == 1).collect())
        .collect()
}

/// Normalize log weights into a probability map.
pub fn normalize(patterns: Vec<Vec<bool>>, logw: Vec<f64>) -> HashMap<Vec<bool>, f64> {
    let z = log_sum_exp(&logw);
    patterns.into_iter().zip(logw).map(|(g, l)| (g, (l - z).exp())).collect()
}

pub fn total_variation(p: &HashMap<Vec<bool>, f64>, q: &HashMap<Vec<bool>, f64>) -> f64 {
    let mut keys: Vec<&Vec<bool>> = p.keys().chain(q.keys()).collect();
    keys.sort();
    keys.dedup();
    0.5 * keys
        .into_iter()
        .map(|k| (p.get(k).unwrap_or(&0.0) - q.get(k).unwrap_or(&0.0)).abs())
        .sum::<f64>()
}

/// Batch-means standard error of the mean.
pub fn batch_se(v: &[f64], batches: usize) -> f64 {
    let m = v.len() / batches;
    let means: Vec<f64> = (0..batches)
        .map(|b| v[b * m..(b + 1) * m].iter().sum::<f64>() / m as f64)
        .collect();
    let mu = means.iter().sum::<f64>() / batches as f64;
    let var = means.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (batches - 1) as f64;
    (var / batches as f64).sqrt()
}

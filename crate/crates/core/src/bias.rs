//! Closed-form confounding biases of the unadjusted, GLS and basis-adjusted
//! estimators.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::{principal_kriging_basis, NullSpaceType};
use crate::error::{Error, Result};
use crate::linalg::{cholesky_jittered, exposure_design, spd_inverse, spd_solve};
use crate::simulator::{ConfoundingScenario, FieldGeometry};
use crate::spatial::{SiteSet, SqrtMethod, DEFAULT_JITTER, MAX_JITTER};

/// Relative tolerance on the diagonal of the projected-basis QR factor below
/// which a column counts as linearly dependent.
pub const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub delta_ols: f64,
    pub delta_gls: Option<f64>,
    pub d_x: f64,
    pub delta_adj: f64,
    pub k_used: usize,
    pub nullspace: NullSpaceType,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasCurve {
    pub nullspace: NullSpaceType,
    pub phi_x: f64,
    pub phi_w: f64,
    /// `(k, d_x)` with `k` strictly increasing.
    pub points: Vec<(usize, f64)>,
}

/// `(X'X)^{-1}` for `X = [1 x]`.
fn xtx_inverse(xt: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    spd_inverse(&(xt.transpose() * xt))
        .map_err(|_| Error::rank("exposure is constant; [1 x] is rank deficient"))
}

/// `Delta_OLS = c (X'X)^{-1} X' t` with `c = delta sigma_w / sigma_x`, `t = R_w^{1/2} R_x^{-1/2} x`.
pub fn delta_ols(
    scenario: &ConfoundingScenario,
    sites: &SiteSet,
    x: &DVector<f64>,
    method: SqrtMethod,
) -> Result<DVector<f64>> {
    let geom = FieldGeometry::for_scenario(sites, scenario, method)?;
    delta_ols_with(scenario, &geom, x)
}

pub fn delta_ols_with(
    scenario: &ConfoundingScenario,
    geom: &FieldGeometry,
    x: &DVector<f64>,
) -> Result<DVector<f64>> {
    check_len(x, geom.n())?;
    let t = geom.transfer_exposure(x);
    delta_ols_from_transfer(scenario.bias_scale(), x, &t)
}

/// [`delta_ols`] given the precomputed transfer vector `t`.
pub fn delta_ols_from_transfer(c: f64, x: &DVector<f64>, t: &DVector<f64>) -> Result<DVector<f64>> {
    let xt = exposure_design(x);
    Ok(xtx_inverse(&xt)? * (xt.transpose() * t) * c)
}

/// GLS bias with `Sigma_{y|x} = sigma_eps^2 I + sigma_w^2 (1 - delta^2) R_w`.
pub fn delta_gls(
    scenario: &ConfoundingScenario,
    sites: &SiteSet,
    x: &DVector<f64>,
    method: SqrtMethod,
) -> Result<DVector<f64>> {
    let geom = FieldGeometry::for_scenario(sites, scenario, method)?;
    delta_gls_with(scenario, &geom, x)
}

pub fn delta_gls_with(
    scenario: &ConfoundingScenario,
    geom: &FieldGeometry,
    x: &DVector<f64>,
) -> Result<DVector<f64>> {
    check_len(x, geom.n())?;
    let n = geom.n();
    let v = scenario.sigma_w2 * (1.0 - scenario.delta * scenario.delta);
    let mut sigma = &geom.rw_matrix * v;
    for i in 0..n {
        sigma[(i, i)] += scenario.sigma_eps2;
    }
    let scale = sigma.diagonal().amax();
    let (chol, _) = cholesky_jittered(&sigma, DEFAULT_JITTER * scale, MAX_JITTER * scale)
        .map_err(|e| Error::rank(format!("Sigma_y|x is singular: {e}")))?;
    let xt = exposure_design(x);
    let si_x = chol.solve(&xt);
    let gram = xt.transpose() * &si_x;
    let t = geom.transfer_exposure(x);
    let rhs = si_x.transpose() * t;
    Ok(spd_solve(&gram, &DMatrix::from_column_slice(2, 1, rhs.as_slice()))?.column(0)
        * scenario.bias_scale())
}

/// Incremental `d` vectors for the leading `1..=kmax` columns of `b`.
///
/// With `B_perp = (I - H) B = Q R`, the coefficient block of the adjusted fit
/// differs from OLS by `-(X'X)^{-1} X' B_k R_k^{-1} (Q' t)_k`; the triangular
/// structure makes every truncation available from one factorization.
fn nested_differences(
    c: f64,
    x: &DVector<f64>,
    t: &DVector<f64>,
    b: &DMatrix<f64>,
    kmax: usize,
) -> Result<Vec<DVector<f64>>> {
    let n = x.len();
    if b.nrows() != n || t.len() != n {
        return Err(Error::invalid("basis, exposure and transfer vector disagree in length"));
    }
    if kmax > b.ncols() {
        return Err(Error::invalid("requested more columns than the basis has"));
    }
    if kmax + 2 > n {
        return Err(Error::rank(format!("[1 x B] with {} columns exceeds n = {n}", kmax + 2)));
    }
    if kmax == 0 {
        return Ok(Vec::new());
    }
    let xt = exposure_design(x);
    let xtx_inv = xtx_inverse(&xt)?;
    let bk = b.columns(0, kmax).into_owned();
    let xtb = xt.transpose() * &bk;
    let b_perp = &bk - &xt * (&xtx_inv * &xtb);
    let qr = b_perp.qr();
    let r = qr.r();
    for j in 0..kmax {
        let norm = bk.column(j).norm().max(f64::MIN_POSITIVE);
        if r[(j, j)].abs() <= RANK_TOL * norm {
            return Err(Error::rank(format!(
                "basis column {} is collinear with [1 x] and the preceding columns",
                j + 1
            )));
        }
    }
    let mut qt_t = t.clone();
    qr.q_tr_mul(&mut qt_t);
    // E' solves R' E' = B'X, so E = X'B R^{-1}.
    let e_t = r
        .transpose()
        .solve_lower_triangular(&xtb.transpose())
        .ok_or_else(|| Error::rank("singular triangular factor"))?;
    let mut acc = DVector::<f64>::zeros(2);
    let mut out = Vec::with_capacity(kmax);
    for j in 0..kmax {
        acc += e_t.row(j).transpose() * qt_t[j];
        out.push(&xtx_inv * &acc * (-c));
    }
    Ok(out)
}

/// `d = c T B' (H - I) t`, the change in bias from adding `b` to `[1 x]`.
pub fn d_x(
    scenario: &ConfoundingScenario,
    sites: &SiteSet,
    x: &DVector<f64>,
    b: &DMatrix<f64>,
    method: SqrtMethod,
) -> Result<DVector<f64>> {
    let geom = FieldGeometry::for_scenario(sites, scenario, method)?;
    d_x_with(scenario, &geom, x, b)
}

pub fn d_x_with(
    scenario: &ConfoundingScenario,
    geom: &FieldGeometry,
    x: &DVector<f64>,
    b: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    check_len(x, geom.n())?;
    let t = geom.transfer_exposure(x);
    d_x_from_transfer(scenario.bias_scale(), x, &t, b)
}

pub fn d_x_from_transfer(
    c: f64,
    x: &DVector<f64>,
    t: &DVector<f64>,
    b: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    let k = b.ncols();
    Ok(nested_differences(c, x, t, b, k)?
        .pop()
        .unwrap_or_else(|| DVector::zeros(2)))
}

/// Bias summary for the adjusted model `[1 x B]`.
pub fn bias_report(
    scenario: &ConfoundingScenario,
    geom: &FieldGeometry,
    x: &DVector<f64>,
    b: &DMatrix<f64>,
    nullspace: NullSpaceType,
    with_gls: bool,
) -> Result<BiasReport> {
    let ols = delta_ols_with(scenario, geom, x)?[1];
    let d = d_x_with(scenario, geom, x, b)?[1];
    let gls = if with_gls {
        Some(delta_gls_with(scenario, geom, x)?[1])
    } else {
        None
    };
    Ok(BiasReport {
        delta_ols: ols,
        delta_gls: gls,
        d_x: d,
        delta_adj: ols + d,
        k_used: b.ncols(),
        nullspace,
    })
}

/// `d_x` for the first `k` columns of the principal basis, `k = 1, ..., n - 3`.
pub fn bias_curve(
    scenario: &ConfoundingScenario,
    sites: &SiteSet,
    x: &DVector<f64>,
    nullspace: NullSpaceType,
    method: SqrtMethod,
) -> Result<BiasCurve> {
    let geom = FieldGeometry::for_scenario(sites, scenario, method)?;
    let basis = principal_kriging_basis(sites, nullspace, Some(x))?;
    bias_curve_with(scenario, &geom, x, &basis.b, nullspace, None)
}

/// Curve over the leading columns of an existing basis block; `kmax` defaults
/// to `min(n - 3, columns)`.
pub fn bias_curve_with(
    scenario: &ConfoundingScenario,
    geom: &FieldGeometry,
    x: &DVector<f64>,
    b: &DMatrix<f64>,
    nullspace: NullSpaceType,
    kmax: Option<usize>,
) -> Result<BiasCurve> {
    check_len(x, geom.n())?;
    let n = geom.n();
    let kmax = kmax.unwrap_or(b.ncols().min(n.saturating_sub(3)));
    let t = geom.transfer_exposure(x);
    let diffs = nested_differences(scenario.bias_scale(), x, &t, b, kmax)?;
    Ok(BiasCurve {
        nullspace,
        phi_x: scenario.phi_x,
        phi_w: scenario.phi_w,
        points: diffs.iter().enumerate().map(|(i, d)| (i + 1, d[1])).collect(),
    })
}

/// Write curves as `phi_x,phi_w,nullspace,k,d_x`.
pub fn write_curves_csv(path: &Path, curves: &[BiasCurve]) -> Result<()> {
    write_curves(std::fs::File::create(path)?, curves)
}

/// Same table as [`write_curves_csv`] on any writer.
pub fn write_curves<W: std::io::Write>(out: W, curves: &[BiasCurve]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["phi_x", "phi_w", "nullspace", "k", "d_x"])?;
    for c in curves {
        for &(k, d) in &c.points {
            w.write_record(&[
                crate::simulator::fmt_sig(c.phi_x),
                crate::simulator::fmt_sig(c.phi_w),
                c.nullspace.index().to_string(),
                k.to_string(),
                crate::simulator::fmt_sig(d),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Difference between the conditional posterior mean of `beta` (flat prior on
/// `beta`, `xi ~ N(0, diag(prior_var))`, known `sigma2`) and the OLS estimate:
/// `T B' (Yhat_OLS - Y) / sigma2` with `T = (X'X)^{-1} X'B S^{-1}` and
/// `S = B'B / sigma2 + diag(1 / prior_var) - B'X (X'X)^{-1} X'B / sigma2`.
pub fn d_x_star(
    y: &DVector<f64>,
    x: &DVector<f64>,
    b: &DMatrix<f64>,
    prior_var: &[f64],
    sigma2: f64,
) -> Result<DVector<f64>> {
    let n = y.len();
    if x.len() != n || b.nrows() != n || prior_var.len() != b.ncols() {
        return Err(Error::invalid("d_x_star inputs disagree in size"));
    }
    if !(sigma2 > 0.0) || prior_var.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::invalid("variances must be positive"));
    }
    let xt = exposure_design(x);
    let xtx_inv = xtx_inverse(&xt)?;
    let xtb = xt.transpose() * b;
    let mut s = (b.transpose() * b - xtb.transpose() * &xtx_inv * &xtb) / sigma2;
    for (j, v) in prior_var.iter().enumerate() {
        s[(j, j)] += 1.0 / v;
    }
    let yhat = &xt * (&xtx_inv * (xt.transpose() * y));
    let rhs = b.transpose() * (yhat - y) / sigma2;
    let inner = spd_solve(&s, &DMatrix::from_column_slice(rhs.len(), 1, rhs.as_slice()))
        .map_err(|_| Error::rank("Schur complement is not positive definite"))?;
    Ok(xtx_inv * xtb * inner.column(0))
}

fn check_len(x: &DVector<f64>, n: usize) -> Result<()> {
    if x.len() != n {
        return Err(Error::invalid(format!("exposure has length {}, expected {n}", x.len())));
    }
    Ok(())
}

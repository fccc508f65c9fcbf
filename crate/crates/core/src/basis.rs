//! Principal kriging functions and thin-plate regression spline bases.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{orient_column, sorted_symmetric_eigen, symmetrize};
use crate::spatial::{tps_kernel, tps_kernel_matrix, Location, SiteSet};

/// Eigenvalues of `M` below this fraction of the largest magnitude form the null block.
pub const NULL_EIGEN_TOL: f64 = 1e-9;

/// Fixed-effect functions left unpenalized by the smoother.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NullSpaceType {
    /// `(1, s1, s2)`
    Type1,
    /// `(1, x, s1, s2)`
    Type2,
    /// `(1, x)`
    Type3,
}

impl NullSpaceType {
    pub fn q(self) -> usize {
        match self {
            NullSpaceType::Type1 => 3,
            NullSpaceType::Type2 => 4,
            NullSpaceType::Type3 => 2,
        }
    }

    pub fn needs_exposure(self) -> bool {
        !matches!(self, NullSpaceType::Type1)
    }

    pub fn from_index(i: u8) -> Result<Self> {
        match i {
            1 => Ok(NullSpaceType::Type1),
            2 => Ok(NullSpaceType::Type2),
            3 => Ok(NullSpaceType::Type3),
            _ => Err(Error::invalid(format!("null-space type must be 1, 2 or 3, got {i}"))),
        }
    }

    pub fn index(self) -> u8 {
        match self {
            NullSpaceType::Type1 => 1,
            NullSpaceType::Type2 => 2,
            NullSpaceType::Type3 => 3,
        }
    }

    /// `u(s)` at one location; `x_at_s` is the exposure there (types 2 and 3).
    pub fn evaluate(self, s: &Location, x_at_s: Option<f64>) -> Result<Vec<f64>> {
        let x = || {
            x_at_s.ok_or_else(|| Error::invalid("this null space needs the exposure value"))
        };
        Ok(match self {
            NullSpaceType::Type1 => vec![1.0, s.easting, s.northing],
            NullSpaceType::Type2 => vec![1.0, x()?, s.easting, s.northing],
            NullSpaceType::Type3 => vec![1.0, x()?],
        })
    }

    /// The `n x q` matrix `U`.
    pub fn matrix(self, sites: &SiteSet, x: Option<&DVector<f64>>) -> Result<DMatrix<f64>> {
        let n = sites.len();
        if self.needs_exposure() {
            match x {
                Some(v) if v.len() == n => {}
                Some(v) => {
                    return Err(Error::invalid(format!(
                        "exposure has length {}, expected {n}",
                        v.len()
                    )))
                }
                None => return Err(Error::invalid("this null space needs the exposure")),
            }
        }
        let mut u = DMatrix::zeros(n, self.q());
        for i in 0..n {
            let row = self.evaluate(&sites.get(i), x.map(|v| v[i]))?;
            for (j, v) in row.into_iter().enumerate() {
                u[(i, j)] = v;
            }
        }
        Ok(u)
    }
}

/// The `M` and `G` blocks of the inverse of `[[K_theta, U], [U', 0]]`.
#[derive(Debug, Clone)]
pub struct Blocks {
    pub m: DMatrix<f64>,
    pub g: DMatrix<f64>,
    /// Orthonormal basis of `col(U)` (`n x q`).
    pub q1: DMatrix<f64>,
    /// Orthonormal basis of its complement (`n x (n - q)`).
    pub q2: DMatrix<f64>,
    /// Upper-triangular factor with `U = q1 r`.
    pub r: DMatrix<f64>,
}

fn full_qr(u: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let (n, q) = u.shape();
    if q == 0 || q >= n {
        return Err(Error::rank(format!("null space of dimension {q} for {n} sites")));
    }
    // Householder QR of [U I] yields a full orthogonal Q whose first q columns span col(U).
    let mut aug = DMatrix::zeros(n, n);
    aug.view_mut((0, 0), (n, q)).copy_from(u);
    let qr = aug.qr();
    let qfull = qr.q();
    let r = qr.r().view((0, 0), (q, q)).into_owned();
    let scale = r.diagonal().amax().max(f64::MIN_POSITIVE);
    if r.diagonal().iter().any(|d| d.abs() <= 1e-10 * scale) {
        return Err(Error::rank("null-space matrix U is rank deficient"));
    }
    let q1 = qfull.columns(0, q).into_owned();
    let q2 = qfull.columns(q, n - q).into_owned();
    Ok((q1, q2, r))
}

/// `M_theta = Q2 (Q2' K_theta Q2)^{-1} Q2'` and `G_theta = R^{-1} Q1' (I - K_theta M_theta)`,
/// the blocks of the bordered inverse computed without inverting `K_theta`.
pub fn build_blocks(k: &DMatrix<f64>, u: &DMatrix<f64>, theta: f64) -> Result<Blocks> {
    let n = k.nrows();
    if k.ncols() != n || u.nrows() != n {
        return Err(Error::invalid("kernel and null-space matrices disagree in size"));
    }
    if !(theta >= 0.0) {
        return Err(Error::invalid("theta must be nonnegative"));
    }
    let (q1, q2, r) = full_qr(u)?;
    let mut kt = k.clone();
    for i in 0..n {
        kt[(i, i)] += theta;
    }
    let inner = symmetrize(&(q2.transpose() * &kt * &q2));
    let inner_inv = inner
        .clone()
        .lu()
        .try_inverse()
        .ok_or_else(|| Error::rank("projected kernel matrix is singular"))?;
    let m = symmetrize(&(&q2 * inner_inv * q2.transpose()));
    let resid = DMatrix::identity(n, n) - &kt * &m;
    let rhs = q1.transpose() * resid;
    let g = r
        .solve_upper_triangular(&rhs)
        .ok_or_else(|| Error::rank("null-space matrix U is rank deficient"))?;
    Ok(Blocks { m, g, q1, q2, r })
}

/// PKF eigen-structure, evaluated design block and everything needed for
/// off-site evaluation.
#[derive(Debug, Clone)]
pub struct PrincipalBasis {
    pub nullspace: NullSpaceType,
    pub sites: SiteSet,
    pub x: Option<DVector<f64>>,
    pub u: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub m: DMatrix<f64>,
    pub g: DMatrix<f64>,
    /// Eigenvalues of `M`, nondecreasing; the first `q` form the null block.
    pub eigenvalues: Vec<f64>,
    /// Orthonormal eigenvectors in the same order.
    pub eigenvectors: DMatrix<f64>,
    /// Design block: coordinate monomials (types 1 and 2) then PKFs with `lambda > 0`.
    pub b: DMatrix<f64>,
}

impl PrincipalBasis {
    pub fn q(&self) -> usize {
        self.nullspace.q()
    }

    pub fn n(&self) -> usize {
        self.sites.len()
    }

    /// Number of leading monomial columns in `b`.
    pub fn monomial_columns(&self) -> usize {
        match self.nullspace {
            NullSpaceType::Type3 => 0,
            _ => 2,
        }
    }

    /// First `k` columns of `b`.
    pub fn leading(&self, k: usize) -> Result<DMatrix<f64>> {
        if k > self.b.ncols() {
            return Err(Error::invalid(format!(
                "requested {k} basis columns, only {} available",
                self.b.ncols()
            )));
        }
        Ok(self.b.columns(0, k).into_owned())
    }

    /// `psi_l(s) = (u(s)' G + k(s)' M) v_l` (zero-based `l`).
    pub fn evaluate_pkf(&self, s: &Location, l: usize, x_at_s: Option<f64>) -> Result<f64> {
        let coef = self.pkf_coefficients(l)?;
        self.evaluate_with(s, &coef, x_at_s)
    }

    /// `(G v_l, M v_l)` for the `l`-th eigenvector.
    pub fn pkf_coefficients(&self, l: usize) -> Result<(DVector<f64>, DVector<f64>)> {
        if l >= self.n() {
            return Err(Error::invalid(format!("PKF index {l} out of range")));
        }
        let v = self.eigenvectors.column(l);
        Ok((&self.g * v, &self.m * v))
    }

    /// Evaluate `u(s)' a + k(s)' c` for precomputed coefficient vectors.
    pub fn evaluate_with(
        &self,
        s: &Location,
        coef: &(DVector<f64>, DVector<f64>),
        x_at_s: Option<f64>,
    ) -> Result<f64> {
        let x_at_s = match (x_at_s, self.nullspace.needs_exposure()) {
            (Some(v), _) => Some(v),
            (None, true) => {
                let i = self.sites.position(s).ok_or_else(|| {
                    Error::invalid("exposure value required off the data sites")
                })?;
                self.x.as_ref().map(|x| x[i])
            }
            (None, false) => None,
        };
        let us = self.nullspace.evaluate(s, x_at_s)?;
        let mut total: f64 = us.iter().zip(coef.0.iter()).map(|(a, b)| a * b).sum();
        for (i, site) in self.sites.locations().iter().enumerate() {
            total += tps_kernel(s, site) * coef.1[i];
        }
        Ok(total)
    }

    /// Write `b` as delimited text with a header row.
    pub fn write_design_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["site".to_string(), "easting".into(), "northing".into()];
        header.extend((0..self.b.ncols()).map(|j| format!("b{}", j + 1)));
        w.write_record(&header)?;
        for i in 0..self.n() {
            let l = self.sites.get(i);
            let mut row = vec![i.to_string(), l.easting.to_string(), l.northing.to_string()];
            row.extend(self.b.row(i).iter().map(|v| format!("{v:.12e}")));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Build the principal kriging basis with `theta = 0`.
pub fn principal_kriging_basis(
    sites: &SiteSet,
    nullspace: NullSpaceType,
    x: Option<&DVector<f64>>,
) -> Result<PrincipalBasis> {
    if !nullspace.needs_exposure() && x.is_some() {
        log::debug!("exposure ignored for a type-1 null space");
    }
    let x = if nullspace.needs_exposure() { x } else { None };
    let u = nullspace.matrix(sites, x)?;
    let k = tps_kernel_matrix(sites);
    let blocks = build_blocks(&k, &u, 0.0)?;
    let n = sites.len();
    let q = nullspace.q();

    // M acts as (Q2'KQ2)^{-1} on the complement of col(U) and vanishes on col(U),
    // so its eigenvectors are Q1 and Q2 W with W the eigenvectors of Q2'KQ2.
    let inner = blocks.q2.transpose() * &k * &blocks.q2;
    let (mu, w) = sorted_symmetric_eigen(&inner);
    let mut pairs: Vec<(f64, DVector<f64>)> = Vec::with_capacity(n);
    for j in 0..q {
        pairs.push((0.0, blocks.q1.column(j).into_owned()));
    }
    for (j, &m) in mu.iter().enumerate() {
        if m == 0.0 {
            return Err(Error::rank("projected kernel matrix is singular"));
        }
        pairs.push((1.0 / m, &blocks.q2 * w.column(j)));
    }
    let max_abs = pairs.iter().fold(0.0_f64, |a, p| a.max(p.0.abs()));
    let tol = NULL_EIGEN_TOL * max_abs;
    let null_count = pairs.iter().filter(|p| p.0.abs() < tol).count();
    if null_count != q {
        return Err(Error::rank(format!(
            "expected {q} null eigenvalues of M, found {null_count}"
        )));
    }
    let negative = pairs.iter().filter(|p| p.0 <= -tol).count();
    if negative > 0 {
        log::warn!("M has {negative} negative eigenvalues; their PKFs are left out of B");
    }
    // Null block first, then the rest by increasing eigenvalue.
    let (mut null, mut rest): (Vec<_>, Vec<_>) =
        pairs.into_iter().partition(|p| p.0.abs() < tol);
    null.iter_mut().for_each(|p| p.0 = 0.0);
    rest.sort_by(|a, b| a.0.total_cmp(&b.0));
    let ordered: Vec<_> = null.into_iter().chain(rest).collect();

    let mut eigenvalues = Vec::with_capacity(n);
    let mut eigenvectors = DMatrix::zeros(n, n);
    for (j, (lam, mut v)) in ordered.into_iter().enumerate() {
        orient_column(&mut v);
        eigenvalues.push(lam);
        eigenvectors.set_column(j, &v);
    }

    let positive: Vec<usize> = (q..n).filter(|&j| eigenvalues[j] > tol).collect();
    let mono = if nullspace == NullSpaceType::Type3 { 0 } else { 2 };
    let mut b = DMatrix::zeros(n, mono + positive.len());
    if mono == 2 {
        b.set_column(0, &sites.eastings());
        b.set_column(1, &sites.northings());
    }
    for (c, &j) in positive.iter().enumerate() {
        b.set_column(mono + c, &eigenvectors.column(j));
    }

    Ok(PrincipalBasis {
        nullspace,
        sites: sites.clone(),
        x: x.cloned(),
        u,
        k,
        m: blocks.m,
        g: blocks.g,
        eigenvalues,
        eigenvectors,
        b,
    })
}

/// Eigen-decomposition of the thin-plate kernel matrix, reused across ranks.
#[derive(Debug, Clone)]
pub struct TprsEigen {
    u: DMatrix<f64>,
    /// Eigenvalues ordered by decreasing magnitude.
    values: Vec<f64>,
    vectors: DMatrix<f64>,
}

/// Rank-`k` thin-plate regression spline basis.
#[derive(Debug, Clone)]
pub struct TprsBasis {
    /// Unpenalized columns `(1, s1, s2)`.
    pub null_space: DMatrix<f64>,
    /// Penalized columns `phi_k D_k Z W`, `n x (k - 3)`.
    pub wiggly: DMatrix<f64>,
    /// Diagonal penalty for `wiggly`, nonincreasing.
    pub penalty: Vec<f64>,
    /// Eigenvalues of `K` used, by decreasing magnitude (length `k`).
    pub eigenvalues: Vec<f64>,
    /// Constraint-satisfying directions `phi_k Z W` (orthonormal, orthogonal to `U`).
    pub directions: DMatrix<f64>,
    /// Null-space basis `Z` of `U' phi_k` from its QR decomposition.
    pub constraint_z: DMatrix<f64>,
}

impl TprsBasis {
    pub fn rank(&self) -> usize {
        self.null_space.ncols() + self.wiggly.ncols()
    }

    /// `[1 s1 s2 wiggly]`.
    pub fn design(&self) -> DMatrix<f64> {
        crate::linalg::hcat(&self.null_space, &self.wiggly)
    }

    /// Full penalty diagonal matching [`TprsBasis::design`] (zeros for the null space).
    pub fn penalty_diagonal(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.null_space.ncols()];
        d.extend_from_slice(&self.penalty);
        d
    }

    /// `max |U' directions|`.
    pub fn constraint_residual(&self) -> f64 {
        (self.null_space.transpose() * &self.directions).amax()
    }
}

impl TprsEigen {
    pub fn new(sites: &SiteSet) -> Result<Self> {
        let u = NullSpaceType::Type1.matrix(sites, None)?;
        let k = tps_kernel_matrix(sites);
        let (vals, vecs) = sorted_symmetric_eigen(&k);
        let n = vals.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| vals[b].abs().total_cmp(&vals[a].abs()));
        let values = order.iter().map(|&i| vals[i]).collect();
        let vectors = DMatrix::from_fn(n, n, |r, c| vecs[(r, order[c])]);
        Ok(Self { u, values, vectors })
    }

    pub fn n(&self) -> usize {
        self.values.len()
    }

    /// Basis of rank `k` (`3 < k <= n`), counting the three null-space columns.
    pub fn basis(&self, k: usize) -> Result<TprsBasis> {
        let q = self.u.ncols();
        let n = self.n();
        if k <= q || k > n {
            return Err(Error::rank(format!("TPRS rank must satisfy {q} < k <= {n}, got {k}")));
        }
        let phi = self.vectors.columns(0, k).into_owned();
        let d = DVector::from_iterator(k, self.values[..k].iter().copied());
        // Z spans the null space of U' phi_k: trailing columns of a full QR of phi_k' U.
        let c = phi.transpose() * &self.u;
        let mut aug = DMatrix::zeros(k, k);
        aug.view_mut((0, 0), (k, q)).copy_from(&c);
        let qr = aug.qr();
        let r = qr.r();
        let rscale = r.diagonal().amax().max(f64::MIN_POSITIVE);
        if (0..q).any(|j| r[(j, j)].abs() <= 1e-10 * rscale) {
            return Err(Error::rank("leading eigenvectors do not identify the constraint"));
        }
        let z = qr.q().columns(q, k - q).into_owned();
        let dz = DMatrix::from_fn(k, k - q, |i, j| d[i] * z[(i, j)]);
        let penalty_matrix = symmetrize(&(z.transpose() * &dz));
        let (gam, w) = sorted_symmetric_eigen(&penalty_matrix);
        if gam.first().is_some_and(|&g| g <= 0.0) {
            return Err(Error::Numerical("TPRS penalty is not positive definite".into()));
        }
        let m = k - q;
        let mut wr = DMatrix::zeros(m, m);
        let mut penalty = Vec::with_capacity(m);
        for j in 0..m {
            wr.set_column(j, &w.column(m - 1 - j));
            penalty.push(gam[m - 1 - j]);
        }
        let zw = &z * &wr;
        let mut directions = &phi * &zw;
        let mut wiggly = &phi * (&dz * &wr);
        for j in 0..m {
            let mut col = directions.column(j).into_owned();
            let before = col.clone();
            orient_column(&mut col);
            if col != before {
                directions.set_column(j, &col);
                let neg = -wiggly.column(j).into_owned();
                wiggly.set_column(j, &neg);
            }
        }
        Ok(TprsBasis {
            null_space: self.u.clone(),
            wiggly,
            penalty,
            eigenvalues: self.values[..k].to_vec(),
            directions,
            constraint_z: z,
        })
    }
}

/// Rank-`k` TPRS basis for `sites`.
pub fn tprs_basis(sites: &SiteSet, k: usize) -> Result<TprsBasis> {
    TprsEigen::new(sites)?.basis(k)
}

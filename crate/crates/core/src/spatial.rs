//! Geometry, correlation kernels and matrix square roots.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cholesky_jittered, sorted_symmetric_eigen};

/// Default diagonal jitter applied before factorizing a correlation matrix.
pub const DEFAULT_JITTER: f64 = 1e-10;
/// Largest jitter tried before giving up.
pub const MAX_JITTER: f64 = 1e-6;

/// A point in the plane: `easting` is the first coordinate, `northing` the second.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Location {
    pub easting: f64,
    pub northing: f64,
}

impl Location {
    pub fn new(easting: f64, northing: f64) -> Self {
        Self { easting, northing }
    }

    pub fn distance(&self, other: &Location) -> f64 {
        (self.easting - other.easting).hypot(self.northing - other.northing)
    }
}

/// An ordered set of pairwise-distinct observation sites.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteSet {
    locations: Vec<Location>,
}

impl SiteSet {
    /// Minimum number of sites: a rank-3 polynomial null space plus one basis.
    pub const MIN_SITES: usize = 4;

    pub fn new(locations: Vec<Location>) -> Result<Self> {
        if locations.len() < Self::MIN_SITES {
            return Err(Error::invalid(format!(
                "need at least {} sites, got {}",
                Self::MIN_SITES,
                locations.len()
            )));
        }
        if let Some(i) = locations
            .iter()
            .position(|l| !l.easting.is_finite() || !l.northing.is_finite())
        {
            return Err(Error::invalid(format!("site {i} has a non-finite coordinate")));
        }
        // O(n log n) duplicate scan on the bit patterns of the coordinates.
        let mut keyed: Vec<(u64, u64, usize)> = locations
            .iter()
            .enumerate()
            .map(|(i, l)| ((l.easting + 0.0).to_bits(), (l.northing + 0.0).to_bits(), i))
            .collect();
        keyed.sort_unstable();
        for w in keyed.windows(2) {
            if w[0].0 == w[1].0 && w[0].1 == w[1].1 {
                let (a, b) = (w[0].2.min(w[1].2), w[0].2.max(w[1].2));
                return Err(Error::DuplicateSite(a, b));
            }
        }
        Ok(Self { locations })
    }

    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }

    pub fn locations(&self) -> &[Location] {
        &self.locations
    }

    pub fn get(&self, i: usize) -> Location {
        self.locations[i]
    }

    pub fn eastings(&self) -> DVector<f64> {
        DVector::from_iterator(self.len(), self.locations.iter().map(|l| l.easting))
    }

    pub fn northings(&self) -> DVector<f64> {
        DVector::from_iterator(self.len(), self.locations.iter().map(|l| l.northing))
    }

    /// Index of the site equal to `s`, if any.
    pub fn position(&self, s: &Location) -> Option<usize> {
        self.locations.iter().position(|l| l == s)
    }

    /// Same sites with both axes rescaled affinely onto `[0, 1]`.
    pub fn rescaled_unit(&self) -> Result<SiteSet> {
        let (e, n) = (self.eastings(), self.northings());
        let (emin, emax) = (e.min(), e.max());
        let (nmin, nmax) = (n.min(), n.max());
        if emax <= emin || nmax <= nmin {
            return Err(Error::invalid("sites are collinear along an axis"));
        }
        SiteSet::new(
            self.locations
                .iter()
                .map(|l| {
                    Location::new(
                        (l.easting - emin) / (emax - emin),
                        (l.northing - nmin) / (nmax - nmin),
                    )
                })
                .collect(),
        )
    }
}

/// Exponential correlation `R(d; phi) = exp(-d / phi)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpCorrelation {
    range: f64,
}

impl ExpCorrelation {
    pub fn new(range: f64) -> Result<Self> {
        if !(range > 0.0 && range.is_finite()) {
            return Err(Error::invalid(format!("range must be positive, got {range}")));
        }
        Ok(Self { range })
    }

    pub fn range(&self) -> f64 {
        self.range
    }

    pub fn correlation(&self, d: f64) -> f64 {
        (-d / self.range).exp()
    }

    /// Distance at which the correlation falls to 0.05.
    pub fn practical_range(&self) -> f64 {
        -self.range * 0.05_f64.ln()
    }
}

/// How a symmetric positive-definite matrix is split into `R^{1/2} R^{1/2}'`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum SqrtMethod {
    /// Symmetric root `V diag(sqrt(lambda)) V'`.
    #[default]
    SymmetricEigen,
    /// Lower-triangular Cholesky factor.
    Cholesky,
}

/// Pairwise Euclidean distances.
pub fn distance_matrix(sites: &SiteSet) -> DMatrix<f64> {
    let n = sites.len();
    let locs = sites.locations();
    let mut d = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = locs[i].distance(&locs[j]);
            d[(i, j)] = v;
            d[(j, i)] = v;
        }
    }
    d
}

/// Exponential correlation matrix `R_phi` over the sites.
pub fn correlation_matrix(sites: &SiteSet, corr: ExpCorrelation) -> Result<DMatrix<f64>> {
    let d = distance_matrix(sites);
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite distance".into()));
    }
    Ok(d.map(|v| corr.correlation(v)))
}

/// A square-root factor together with its inverse.
#[derive(Debug, Clone)]
pub struct SqrtFactor {
    pub factor: DMatrix<f64>,
    pub inverse: DMatrix<f64>,
    pub method: SqrtMethod,
    /// Diagonal jitter that was added before factorizing.
    pub jitter: f64,
}

/// Factor `r = F F'` and also return `F^{-1}`.
///
/// Jitter starts at `jitter` and escalates ten-fold up to [`MAX_JITTER`];
/// it is only applied when the plain factorization is unusable.
pub fn sqrt_factor(r: &DMatrix<f64>, method: SqrtMethod, jitter: f64) -> Result<SqrtFactor> {
    if r.nrows() != r.ncols() {
        return Err(Error::invalid("matrix square root needs a square matrix"));
    }
    if jitter < 0.0 {
        return Err(Error::invalid("jitter must be nonnegative"));
    }
    match method {
        SqrtMethod::SymmetricEigen => {
            let (vals, vecs) = sorted_symmetric_eigen(r);
            let min = vals.first().copied().unwrap_or(1.0);
            let mut used = 0.0;
            if min < jitter {
                used = jitter.max(f64::MIN_POSITIVE);
                while min + used <= 0.1 * used {
                    used *= 10.0;
                    if used > MAX_JITTER * (1.0 + 1e-12) {
                        return Err(Error::Factorization(format!(
                            "smallest eigenvalue {min:e} not rescued by jitter {MAX_JITTER:e}"
                        )));
                    }
                }
            }
            let roots: Vec<f64> = vals.iter().map(|v| (v + used).sqrt()).collect();
            let scaled = |f: &dyn Fn(f64) -> f64| {
                let mut m = vecs.clone();
                for (j, &rt) in roots.iter().enumerate() {
                    m.column_mut(j).scale_mut(f(rt));
                }
                &m * vecs.transpose()
            };
            Ok(SqrtFactor {
                factor: scaled(&|rt| rt),
                inverse: scaled(&|rt| 1.0 / rt),
                method,
                jitter: used,
            })
        }
        SqrtMethod::Cholesky => {
            let (chol, used) = cholesky_jittered(r, jitter, MAX_JITTER)?;
            let l = chol.l();
            let n = l.nrows();
            let inverse = l
                .solve_lower_triangular(&DMatrix::identity(n, n))
                .ok_or_else(|| Error::Factorization("singular Cholesky factor".into()))?;
            Ok(SqrtFactor {
                factor: l,
                inverse,
                method,
                jitter: used,
            })
        }
    }
}

/// `R^{1/2}` such that `R^{1/2} R^{1/2}'` reconstructs `r` (plus any jitter).
pub fn matrix_sqrt(r: &DMatrix<f64>, method: SqrtMethod, jitter: f64) -> Result<DMatrix<f64>> {
    sqrt_factor(r, method, jitter).map(|f| f.factor)
}

/// Thin-plate spline potential `d^2 log(d) / (8 pi)`, zero at `d = 0`.
pub fn tps_kernel(a: &Location, b: &Location) -> f64 {
    tps_radial(a.distance(b))
}

/// Radial form of [`tps_kernel`].
pub fn tps_radial(d: f64) -> f64 {
    if d <= 0.0 {
        0.0
    } else {
        d * d * d.ln() / (8.0 * PI)
    }
}

/// Kernel matrix `K` with entries `tps_kernel(s_i, s_j)`.
pub fn tps_kernel_matrix(sites: &SiteSet) -> DMatrix<f64> {
    distance_matrix(sites).map(tps_radial)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::relative_frobenius;
    use proptest::prelude::*;

    fn sites(pts: &[(f64, f64)]) -> SiteSet {
        SiteSet::new(pts.iter().map(|&(a, b)| Location::new(a, b)).collect()).unwrap()
    }

    fn square() -> SiteSet {
        sites(&[(0.0, 0.0), (0.0, 1.0), (1.0, 0.0), (1.0, 1.0)])
    }

    #[test]
    fn unit_distance_and_zero_diagonal() {
        let d = distance_matrix(&square());
        assert_eq!(d[(0, 1)], 1.0);
        assert_eq!(d[(1, 0)], 1.0);
        assert!((0..4).all(|i| d[(i, i)] == 0.0));
        assert!((d[(0, 3)] - 2.0_f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn distances_match_per_pair_arithmetic() {
        let pts = [(0.12, 0.9), (0.55, 0.31), (0.77, 0.02), (0.3, 0.3)];
        let d = distance_matrix(&sites(&pts));
        for i in 0..3 {
            for j in 0..3 {
                let dx = pts[i].0 - pts[j].0;
                let dy = pts[i].1 - pts[j].1;
                assert!((d[(i, j)] - (dx * dx + dy * dy).sqrt()).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn duplicate_sites_are_rejected() {
        let err = SiteSet::new(vec![
            Location::new(0.0, 0.0),
            Location::new(0.5, 0.5),
            Location::new(1.0, 0.0),
            Location::new(0.5, 0.5),
        ])
        .unwrap_err();
        assert!(matches!(err, Error::DuplicateSite(1, 3)));
    }

    #[test]
    fn too_few_sites_rejected() {
        let err = SiteSet::new(vec![Location::new(0.0, 0.0)]).unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
    }

    #[test]
    fn correlation_examples() {
        let c = ExpCorrelation::new(0.2).unwrap();
        assert_eq!(c.correlation(0.0), 1.0);
        assert!((c.correlation(0.6) - (-3.0_f64).exp()).abs() < 1e-15);
        assert!((c.correlation(0.6) - 0.049787).abs() < 1e-6);
        // practical range of phi = 0.05, 0.2, 0.5 is about 0.15, 0.6, 1.5
        for (phi, pr) in [(0.05, 0.15), (0.2, 0.6), (0.5, 1.5)] {
            let got = ExpCorrelation::new(phi).unwrap().practical_range();
            assert!((got - pr).abs() / pr < 0.005, "{phi}: {got}");
        }
        assert!(ExpCorrelation::new(0.0).is_err());
    }

    #[test]
    fn correlation_matrix_is_symmetric_unit_diagonal() {
        let r = correlation_matrix(&square(), ExpCorrelation::new(0.3).unwrap()).unwrap();
        assert_eq!(r, r.transpose());
        assert!((0..4).all(|i| r[(i, i)] == 1.0));
        assert!(r.iter().all(|&v| v > 0.0 && v <= 1.0));
    }

    #[test]
    fn sqrt_of_identity_is_identity() {
        let i = DMatrix::<f64>::identity(5, 5);
        let f = matrix_sqrt(&i, SqrtMethod::SymmetricEigen, DEFAULT_JITTER).unwrap();
        assert!(relative_frobenius(&f, &i) < 1e-14);
    }

    #[test]
    fn sqrt_of_2x2_reconstructs() {
        for rho in [-0.9, -0.3, 0.0, 0.5, 0.99] {
            let r = DMatrix::from_row_slice(2, 2, &[1.0, rho, rho, 1.0]);
            for m in [SqrtMethod::SymmetricEigen, SqrtMethod::Cholesky] {
                let f = sqrt_factor(&r, m, DEFAULT_JITTER).unwrap();
                assert!(relative_frobenius(&(&f.factor * f.factor.transpose()), &r) < 1e-8);
                let id = &f.factor * &f.inverse;
                assert!(relative_frobenius(&id, &DMatrix::identity(2, 2)) < 1e-8);
            }
        }
    }

    #[test]
    fn cholesky_factor_is_lower_triangular() {
        let r = correlation_matrix(&square(), ExpCorrelation::new(0.5).unwrap()).unwrap();
        let l = matrix_sqrt(&r, SqrtMethod::Cholesky, DEFAULT_JITTER).unwrap();
        for i in 0..4 {
            for j in (i + 1)..4 {
                assert_eq!(l[(i, j)], 0.0);
            }
        }
    }

    #[test]
    fn symmetric_root_is_symmetric() {
        let r = correlation_matrix(&square(), ExpCorrelation::new(0.5).unwrap()).unwrap();
        let f = matrix_sqrt(&r, SqrtMethod::SymmetricEigen, DEFAULT_JITTER).unwrap();
        assert!(relative_frobenius(&f, &f.transpose()) < 1e-12);
    }

    #[test]
    fn tps_kernel_examples() {
        let a = Location::new(0.3, 0.4);
        assert_eq!(tps_kernel(&a, &a), 0.0);
        assert_eq!(tps_kernel(&Location::new(0.0, 0.0), &Location::new(1.0, 0.0)), 0.0);
        let e = std::f64::consts::E;
        let v = tps_kernel(&Location::new(0.0, 0.0), &Location::new(e, 0.0));
        assert!((v - e * e / (8.0 * PI)).abs() < 1e-12);
        assert!((v - 0.294001).abs() < 1e-6);
    }

    #[test]
    fn rescaled_unit_spans_unit_square() {
        let s = sites(&[(10.0, 40.0), (12.0, 41.0), (11.0, 42.0), (13.0, 40.5)]);
        let u = s.rescaled_unit().unwrap();
        assert_eq!(u.eastings().min(), 0.0);
        assert_eq!(u.eastings().max(), 1.0);
        assert_eq!(u.northings().max(), 1.0);
    }

    fn unit_sites(n: usize) -> impl Strategy<Value = SiteSet> {
        proptest::collection::vec((0.0..1.0f64, 0.0..1.0f64), n)
            .prop_filter_map("distinct sites", |pts| {
                SiteSet::new(pts.into_iter().map(|(a, b)| Location::new(a, b)).collect()).ok()
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn correlation_permutes_with_sites(s in unit_sites(8), seed in 0u64..1000) {
            let n = s.len();
            let mut perm: Vec<usize> = (0..n).collect();
            perm.rotate_left((seed as usize) % n);
            perm.swap(0, n - 1);
            let permuted = SiteSet::new(perm.iter().map(|&i| s.get(i)).collect()).unwrap();
            let c = ExpCorrelation::new(0.3).unwrap();
            let r = correlation_matrix(&s, c).unwrap();
            let rp = correlation_matrix(&permuted, c).unwrap();
            for i in 0..n {
                for j in 0..n {
                    prop_assert_eq!(rp[(i, j)], r[(perm[i], perm[j])]);
                }
            }
        }

        #[test]
        fn sqrt_reconstructs_random_psd(s in unit_sites(40), phi in 0.05..0.6f64) {
            let r = correlation_matrix(&s, ExpCorrelation::new(phi).unwrap()).unwrap();
            for m in [SqrtMethod::SymmetricEigen, SqrtMethod::Cholesky] {
                let f = sqrt_factor(&r, m, DEFAULT_JITTER).unwrap();
                prop_assert!(relative_frobenius(&(&f.factor * f.factor.transpose()), &r) < 1e-8);
            }
        }

        #[test]
        fn tps_symmetric_and_translation_invariant(
            a in (-2.0..2.0f64, -2.0..2.0f64),
            b in (-2.0..2.0f64, -2.0..2.0f64),
            t in (-5.0..5.0f64, -5.0..5.0f64),
        ) {
            let (pa, pb) = (Location::new(a.0, a.1), Location::new(b.0, b.1));
            prop_assert_eq!(tps_kernel(&pa, &pb), tps_kernel(&pb, &pa));
            let (qa, qb) = (
                Location::new(a.0 + t.0, a.1 + t.1),
                Location::new(b.0 + t.0, b.1 + t.1),
            );
            prop_assert!((tps_kernel(&qa, &qb) - tps_kernel(&pa, &pb)).abs() < 1e-9);
        }

        #[test]
        fn correlation_monotone(d1 in 0.0..2.0f64, dd in 1e-3..1.0f64, phi in 0.01..1.0f64, dphi in 1e-3..1.0f64) {
            let c = ExpCorrelation::new(phi).unwrap();
            prop_assert!(c.correlation(d1 + dd) < c.correlation(d1));
            let wider = ExpCorrelation::new(phi + dphi).unwrap();
            prop_assert!(wider.correlation(d1 + dd) > c.correlation(d1 + dd));
        }
    }

    #[test]
    fn sqrt_reconstruction_at_size_500() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<Location> = (0..500)
            .map(|_| Location::new(rng.random(), rng.random()))
            .collect();
        let s = SiteSet::new(pts).unwrap();
        let r = correlation_matrix(&s, ExpCorrelation::new(0.5).unwrap()).unwrap();
        let f = sqrt_factor(&r, SqrtMethod::SymmetricEigen, DEFAULT_JITTER).unwrap();
        assert!(relative_frobenius(&(&f.factor * f.factor.transpose()), &r) < 1e-8);
    }
}

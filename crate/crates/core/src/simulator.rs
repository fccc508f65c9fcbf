//! Joint Gaussian exposure/confounder/outcome simulation.

use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bias;
use crate::error::{Error, Result};
use crate::spatial::{
    correlation_matrix, sqrt_factor, ExpCorrelation, Location, SiteSet, SqrtFactor, SqrtMethod,
    DEFAULT_JITTER,
};

/// Generative parameters for one `(phi_x, phi_w)` cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfoundingScenario {
    pub phi_x: f64,
    pub phi_w: f64,
    pub delta: f64,
    pub sigma_x2: f64,
    pub sigma_w2: f64,
    pub sigma_eps2: f64,
    pub beta0: f64,
    pub beta_x: f64,
}

impl ConfoundingScenario {
    /// Defaults used by the benchmark: `delta = 0.5`, unit exposure variance,
    /// `sigma_eps^2 = 0.25`, `beta = (1, 2)`; `sigma_w^2` is usually calibrated.
    pub fn standard(phi_x: f64, phi_w: f64) -> Self {
        Self {
            phi_x,
            phi_w,
            delta: 0.5,
            sigma_x2: 1.0,
            sigma_w2: 1.0,
            sigma_eps2: 0.25,
            beta0: 1.0,
            beta_x: 2.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64| v > 0.0 && v.is_finite();
        if !pos(self.phi_x) || !pos(self.phi_w) {
            return Err(Error::invalid("ranges must be positive"));
        }
        if !(self.delta.abs() < 1.0) {
            return Err(Error::invalid(format!("|delta| must be < 1, got {}", self.delta)));
        }
        if !pos(self.sigma_x2) || !pos(self.sigma_w2) {
            return Err(Error::invalid("sigma_x^2 and sigma_w^2 must be positive"));
        }
        if !(self.sigma_eps2 >= 0.0 && self.sigma_eps2.is_finite()) {
            return Err(Error::invalid("sigma_eps^2 must be nonnegative"));
        }
        if !self.beta0.is_finite() || !self.beta_x.is_finite() {
            return Err(Error::invalid("coefficients must be finite"));
        }
        Ok(())
    }

    pub fn sigma_x(&self) -> f64 {
        self.sigma_x2.sqrt()
    }

    pub fn sigma_w(&self) -> f64 {
        self.sigma_w2.sqrt()
    }

    /// `delta * sigma_w / sigma_x`, the scalar in front of every bias expression.
    pub fn bias_scale(&self) -> f64 {
        self.delta * self.sigma_w() / self.sigma_x()
    }

    pub fn with_sigma_w(mut self, sigma_w: f64) -> Self {
        self.sigma_w2 = sigma_w * sigma_w;
        self
    }
}

/// Correlation square roots for one cell, shared read-only across replicates.
#[derive(Debug, Clone)]
pub struct FieldGeometry {
    pub rx: SqrtFactor,
    pub rw: SqrtFactor,
    /// `R_w` itself (needed for GLS and the conditional covariance).
    pub rw_matrix: DMatrix<f64>,
    /// `R_w^{1/2} R_x^{-1/2}`.
    pub transfer: DMatrix<f64>,
}

impl FieldGeometry {
    pub fn new(sites: &SiteSet, phi_x: f64, phi_w: f64, method: SqrtMethod) -> Result<Self> {
        let rx_m = correlation_matrix(sites, ExpCorrelation::new(phi_x)?)?;
        let rx = sqrt_factor(&rx_m, method, DEFAULT_JITTER)?;
        let (rw, rw_matrix) = if phi_w == phi_x {
            (rx.clone(), rx_m)
        } else {
            let rw_m = correlation_matrix(sites, ExpCorrelation::new(phi_w)?)?;
            (sqrt_factor(&rw_m, method, DEFAULT_JITTER)?, rw_m)
        };
        let transfer = &rw.factor * &rx.inverse;
        Ok(Self {
            rx,
            rw,
            rw_matrix,
            transfer,
        })
    }

    pub fn for_scenario(sites: &SiteSet, s: &ConfoundingScenario, method: SqrtMethod) -> Result<Self> {
        s.validate()?;
        Self::new(sites, s.phi_x, s.phi_w, method)
    }

    pub fn n(&self) -> usize {
        self.transfer.nrows()
    }

    /// `R_w^{1/2} R_x^{-1/2} x`.
    pub fn transfer_exposure(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.transfer * x
    }
}

/// Law of `W | X = x`.
#[derive(Debug, Clone)]
pub struct ConditionalLaw {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub factor: DMatrix<f64>,
}

/// One draw of `(X, W | X, Y)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldReplicate {
    pub x: Vec<f64>,
    pub w: Vec<f64>,
    pub y: Vec<f64>,
    pub seed: u64,
}

impl FieldReplicate {
    pub fn x_vec(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.x)
    }

    pub fn y_vec(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.y)
    }
}

/// Mix a master seed with stream coordinates into an independent 64-bit seed.
pub fn derive_seed(master: u64, coords: &[u64]) -> u64 {
    let mut h = splitmix64(master ^ 0x5eed_5eed_5eed_5eed);
    for &c in coords {
        h = splitmix64(h ^ splitmix64(c.wrapping_add(0x9e37_79b9_7f4a_7c15)));
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn standard_normals(n: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
    DVector::from_iterator(n, (0..n).map(|_| StandardNormal.sample(rng)))
}

/// `n` distinct nodes of a `grid x grid` lattice on the unit square, drawn
/// without replacement.
pub fn sample_grid_sites(n: usize, grid: usize, seed: u64) -> Result<SiteSet> {
    if grid < 2 || n > grid * grid {
        return Err(Error::invalid(format!(
            "cannot draw {n} distinct sites from a {grid}x{grid} grid"
        )));
    }
    let mut rng = rng_from_seed(seed);
    let step = 1.0 / (grid - 1) as f64;
    let idx = rand::seq::index::sample(&mut rng, grid * grid, n);
    SiteSet::new(
        idx.iter()
            .map(|k| Location::new((k % grid) as f64 * step, (k / grid) as f64 * step))
            .collect(),
    )
}

/// Exposure `x ~ N(0, sigma_x^2 R_x)`.
pub fn sample_exposure(
    scenario: &ConfoundingScenario,
    sites: &SiteSet,
    seed: u64,
    method: SqrtMethod,
) -> Result<DVector<f64>> {
    scenario.validate()?;
    let r = correlation_matrix(sites, ExpCorrelation::new(scenario.phi_x)?)?;
    let f = sqrt_factor(&r, method, DEFAULT_JITTER)?;
    Ok(exposure_from_factor(&f, scenario.sigma_x(), seed))
}

/// Exposure draw reusing a precomputed `R_x^{1/2}`.
pub fn exposure_from_factor(rx: &SqrtFactor, sigma_x: f64, seed: u64) -> DVector<f64> {
    let mut rng = rng_from_seed(seed);
    let z = standard_normals(rx.factor.nrows(), &mut rng);
    (&rx.factor * z) * sigma_x
}

/// Conditional mean and covariance of the confounder given the exposure.
pub fn conditional_law(
    scenario: &ConfoundingScenario,
    sites: &SiteSet,
    x: &DVector<f64>,
    method: SqrtMethod,
) -> Result<ConditionalLaw> {
    let geom = FieldGeometry::for_scenario(sites, scenario, method)?;
    conditional_law_with(scenario, &geom, x)
}

pub fn conditional_law_with(
    scenario: &ConfoundingScenario,
    geom: &FieldGeometry,
    x: &DVector<f64>,
) -> Result<ConditionalLaw> {
    scenario.validate()?;
    if x.len() != geom.n() {
        return Err(Error::invalid(format!(
            "exposure has length {}, expected {}",
            x.len(),
            geom.n()
        )));
    }
    let mean = geom.transfer_exposure(x) * scenario.bias_scale();
    let v = scenario.sigma_w2 * (1.0 - scenario.delta * scenario.delta);
    Ok(ConditionalLaw {
        mean,
        covariance: &geom.rw_matrix * v,
        factor: &geom.rw.factor * v.sqrt(),
    })
}

/// Draw `w = mu + L z` and `y = beta0 + beta_x x + w + eps`.
pub fn sample_replicate(
    scenario: &ConfoundingScenario,
    sites: &SiteSet,
    law: &ConditionalLaw,
    x: &DVector<f64>,
    seed: u64,
) -> Result<FieldReplicate> {
    let n = sites.len();
    if x.len() != n || law.mean.len() != n || law.factor.nrows() != n {
        return Err(Error::invalid("replicate inputs have inconsistent lengths"));
    }
    let mut rng = rng_from_seed(seed);
    let z = standard_normals(n, &mut rng);
    let w = &law.mean + &law.factor * z;
    let sd_eps = scenario.sigma_eps2.sqrt();
    let eps = standard_normals(n, &mut rng) * sd_eps;
    let y = w.add_scalar(scenario.beta0) + x * scenario.beta_x + eps;
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite outcome draw".into()));
    }
    Ok(FieldReplicate {
        x: x.iter().copied().collect(),
        w: w.iter().copied().collect(),
        y: y.iter().copied().collect(),
        seed,
    })
}

/// `sigma_w` giving `Delta_OLS / beta_x = target`, using linearity of the
/// bias in `sigma_w`.
pub fn calibrate_sigma_w(
    scenario: &ConfoundingScenario,
    sites: &SiteSet,
    x: &DVector<f64>,
    target_relative_bias: f64,
    method: SqrtMethod,
) -> Result<f64> {
    let geom = FieldGeometry::for_scenario(sites, scenario, method)?;
    calibrate_sigma_w_with(scenario, &geom, x, target_relative_bias)
}

pub fn calibrate_sigma_w_with(
    scenario: &ConfoundingScenario,
    geom: &FieldGeometry,
    x: &DVector<f64>,
    target_relative_bias: f64,
) -> Result<f64> {
    if !(target_relative_bias > 0.0 && target_relative_bias.is_finite()) {
        return Err(Error::Calibration(format!(
            "target relative bias must be positive, got {target_relative_bias}"
        )));
    }
    if scenario.beta_x == 0.0 {
        return Err(Error::Calibration("relative bias undefined for beta_x = 0".into()));
    }
    let unit = scenario.with_sigma_w(1.0);
    let factor = bias::delta_ols_with(&unit, geom, x)?[1];
    if factor == 0.0 || !factor.is_finite() {
        return Err(Error::Calibration(format!("bias factor at sigma_w = 1 is {factor}")));
    }
    let sigma_w = target_relative_bias * scenario.beta_x / factor;
    if sigma_w <= 0.0 {
        return Err(Error::Calibration(format!(
            "target requires sigma_w = {sigma_w:.4}; the bias has the opposite sign"
        )));
    }
    Ok(sigma_w)
}

/// Write replicates as delimited text. The first line is
/// `# {"scenario":..,"n":..}`; rows are `replicate,seed,site,easting,northing,x,w,y`.
pub fn write_replicate_archive(
    path: &Path,
    scenario: &ConfoundingScenario,
    sites: &SiteSet,
    replicates: &[FieldReplicate],
) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut out = std::io::BufWriter::new(file);
    let header = serde_json::json!({ "scenario": scenario, "n": sites.len() });
    writeln!(out, "# {header}")?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["replicate", "seed", "site", "easting", "northing", "x", "w", "y"])?;
    for (r, rep) in replicates.iter().enumerate() {
        for (i, loc) in sites.locations().iter().enumerate() {
            w.write_record(&[
                r.to_string(),
                rep.seed.to_string(),
                i.to_string(),
                fmt_sig(loc.easting),
                fmt_sig(loc.northing),
                fmt_sig(rep.x[i]),
                fmt_sig(rep.w[i]),
                fmt_sig(rep.y[i]),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Inverse of [`write_replicate_archive`].
pub fn read_replicate_archive(
    path: &Path,
) -> Result<(ConfoundingScenario, SiteSet, Vec<FieldReplicate>)> {
    let file = std::fs::File::open(path)?;
    let mut reader = std::io::BufReader::new(file);
    let mut first = String::new();
    reader.read_line(&mut first)?;
    let header: serde_json::Value = serde_json::from_str(
        first
            .strip_prefix("# ")
            .ok_or_else(|| Error::invalid("archive header line missing"))?,
    )?;
    let scenario: ConfoundingScenario = serde_json::from_value(header["scenario"].clone())?;
    let n = header["n"]
        .as_u64()
        .ok_or_else(|| Error::invalid("archive header lacks n"))? as usize;
    let mut rdr = csv::Reader::from_reader(reader);
    let mut locs = Vec::with_capacity(n);
    let mut reps: Vec<FieldReplicate> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            rec[i]
                .parse::<f64>()
                .map_err(|e| Error::invalid(format!("bad number '{}': {e}", &rec[i])))
        };
        let r: usize = rec[0].parse().map_err(|_| Error::invalid("bad replicate index"))?;
        let seed: u64 = rec[1].parse().map_err(|_| Error::invalid("bad seed"))?;
        if r == reps.len() {
            reps.push(FieldReplicate {
                x: Vec::with_capacity(n),
                w: Vec::with_capacity(n),
                y: Vec::with_capacity(n),
                seed,
            });
        }
        if r == 0 {
            locs.push(Location::new(num(3)?, num(4)?));
        }
        let rep = reps
            .get_mut(r)
            .ok_or_else(|| Error::invalid("replicates out of order"))?;
        rep.x.push(num(5)?);
        rep.w.push(num(6)?);
        rep.y.push(num(7)?);
    }
    Ok((scenario, SiteSet::new(locs)?, reps))
}

/// Decimal with 9 significant digits, shortest round-trip form when shorter.
pub fn fmt_sig(v: f64) -> String {
    if !v.is_finite() {
        return if v.is_nan() { "NaN".into() } else if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let s = format!("{v:.8e}");
    let parsed: f64 = s.parse().unwrap_or(v);
    let short = format!("{parsed}");
    if short.len() <= s.len() {
        short
    } else {
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{max_abs, ols_coefficients, exposure_design, relative_frobenius};

    fn small_sites(n: usize, seed: u64) -> SiteSet {
        sample_grid_sites(n, 64, seed).unwrap()
    }

    #[test]
    fn exposure_is_deterministic_and_ignores_delta() {
        let sites = small_sites(50, 1);
        let s = ConfoundingScenario::standard(0.2, 0.3);
        let a = sample_exposure(&s, &sites, 9, SqrtMethod::SymmetricEigen).unwrap();
        let b = sample_exposure(&s, &sites, 9, SqrtMethod::SymmetricEigen).unwrap();
        assert_eq!(a, b);
        let mut s2 = s;
        s2.delta = -0.3;
        assert_eq!(a, sample_exposure(&s2, &sites, 9, SqrtMethod::SymmetricEigen).unwrap());
    }

    #[test]
    fn exposure_variance_averages_to_sigma_x2() {
        let sites = small_sites(500, 2);
        let s = ConfoundingScenario::standard(0.05, 0.05);
        let geom = FieldGeometry::for_scenario(&sites, &s, SqrtMethod::SymmetricEigen).unwrap();
        let mut total = 0.0;
        for seed in 0..100 {
            let x = exposure_from_factor(&geom.rx, 1.0, seed);
            let m = x.mean();
            let v = x.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 499.0;
            assert!((0.5..1.5).contains(&v), "seed {seed}: {v}");
            total += v;
        }
        // sample variance about the empirical mean is biased down by the field's
        // spatial correlation; the population-centred average is ~1
        assert!((total / 100.0 - 1.0).abs() < 0.1, "{}", total / 100.0);
    }

    #[test]
    fn zero_delta_gives_marginal_law() {
        let sites = small_sites(30, 3);
        let mut s = ConfoundingScenario::standard(0.1, 0.4);
        s.delta = 0.0;
        s.sigma_w2 = 2.0;
        let x = sample_exposure(&s, &sites, 4, SqrtMethod::SymmetricEigen).unwrap();
        let law = conditional_law(&s, &sites, &x, SqrtMethod::SymmetricEigen).unwrap();
        assert_eq!(law.mean.amax(), 0.0);
        let rw = correlation_matrix(&sites, ExpCorrelation::new(0.4).unwrap()).unwrap();
        assert!(relative_frobenius(&law.covariance, &(rw * 2.0)) < 1e-12);
    }

    #[test]
    fn near_unit_delta_shrinks_covariance() {
        let sites = small_sites(20, 3);
        let mut s = ConfoundingScenario::standard(0.1, 0.4);
        s.delta = 0.999_999;
        let x = sample_exposure(&s, &sites, 4, SqrtMethod::SymmetricEigen).unwrap();
        let law = conditional_law(&s, &sites, &x, SqrtMethod::SymmetricEigen).unwrap();
        assert!(max_abs(&law.covariance) < 1e-5);
    }

    #[test]
    fn common_range_mean_is_colinear_with_exposure() {
        let sites = small_sites(60, 5);
        let s = ConfoundingScenario::standard(0.25, 0.25);
        let x = sample_exposure(&s, &sites, 6, SqrtMethod::SymmetricEigen).unwrap();
        for m in [SqrtMethod::SymmetricEigen, SqrtMethod::Cholesky] {
            let law = conditional_law(&s, &sites, &x, m).unwrap();
            let expect = &x * s.bias_scale();
            assert!((&law.mean - expect).amax() < 1e-8);
        }
    }

    #[test]
    fn factor_reconstructs_conditional_covariance() {
        let sites = small_sites(40, 5);
        let s = ConfoundingScenario::standard(0.1, 0.3);
        let x = sample_exposure(&s, &sites, 6, SqrtMethod::SymmetricEigen).unwrap();
        let law = conditional_law(&s, &sites, &x, SqrtMethod::Cholesky).unwrap();
        let rebuilt = &law.factor * law.factor.transpose();
        assert!(relative_frobenius(&rebuilt, &law.covariance) < 1e-8);
    }

    #[test]
    fn degenerate_noise_gives_exact_linear_outcome() {
        let sites = small_sites(25, 8);
        let mut s = ConfoundingScenario::standard(0.1, 0.3);
        s.delta = 0.0;
        s.sigma_eps2 = 0.0;
        s.sigma_w2 = 1e-300;
        let x = sample_exposure(&s, &sites, 1, SqrtMethod::SymmetricEigen).unwrap();
        let law = conditional_law(&s, &sites, &x, SqrtMethod::SymmetricEigen).unwrap();
        let rep = sample_replicate(&s, &sites, &law, &x, 2).unwrap();
        for i in 0..25 {
            assert!((rep.y[i] - (1.0 + 2.0 * x[i])).abs() < 1e-12);
        }
        assert_eq!(rep, sample_replicate(&s, &sites, &law, &x, 2).unwrap());
    }

    #[test]
    fn empirical_conditional_covariance_matches() {
        let sites = small_sites(25, 11);
        let s = ConfoundingScenario::standard(0.1, 0.3);
        let x = sample_exposure(&s, &sites, 1, SqrtMethod::SymmetricEigen).unwrap();
        let law = conditional_law(&s, &sites, &x, SqrtMethod::SymmetricEigen).unwrap();
        let reps = 2000;
        let mut cov = DMatrix::<f64>::zeros(25, 25);
        for r in 0..reps {
            let rep = sample_replicate(&s, &sites, &law, &x, derive_seed(3, &[r])).unwrap();
            let d = DVector::from_vec(rep.w) - &law.mean;
            cov += &d * d.transpose();
        }
        cov /= reps as f64;
        assert!(relative_frobenius(&cov, &law.covariance) < 0.1);
    }

    #[test]
    fn calibration_hits_target_and_scales_linearly() {
        let sites = small_sites(80, 12);
        let s = ConfoundingScenario::standard(0.05, 0.5);
        let x = sample_exposure(&s, &sites, 2, SqrtMethod::SymmetricEigen).unwrap();
        let sw = calibrate_sigma_w(&s, &sites, &x, 0.15, SqrtMethod::SymmetricEigen).unwrap();
        let cal = s.with_sigma_w(sw);
        let geom = FieldGeometry::for_scenario(&sites, &cal, SqrtMethod::SymmetricEigen).unwrap();
        let d = bias::delta_ols_with(&cal, &geom, &x).unwrap();
        assert!((d[1] - 0.3).abs() < 1e-10);
        let sw2 = calibrate_sigma_w(&s, &sites, &x, 0.3, SqrtMethod::SymmetricEigen).unwrap();
        assert!((sw2 / sw - 2.0).abs() < 1e-12);
        assert!(matches!(
            calibrate_sigma_w(&s, &sites, &x, 0.0, SqrtMethod::SymmetricEigen),
            Err(Error::Calibration(_))
        ));
        let mut z = s;
        z.delta = 0.0;
        assert!(matches!(
            calibrate_sigma_w(&z, &sites, &x, 0.15, SqrtMethod::SymmetricEigen),
            Err(Error::Calibration(_))
        ));
    }

    #[test]
    fn ols_mean_tracks_closed_form_bias() {
        let sites = small_sites(60, 13);
        let s = ConfoundingScenario::standard(0.05, 0.5);
        let geom = FieldGeometry::for_scenario(&sites, &s, SqrtMethod::SymmetricEigen).unwrap();
        let x = exposure_from_factor(&geom.rx, 1.0, 5);
        let law = conditional_law_with(&s, &geom, &x).unwrap();
        let xt = exposure_design(&x);
        let est: Vec<f64> = (0..500)
            .map(|r| {
                let rep = sample_replicate(&s, &sites, &law, &x, derive_seed(1, &[r])).unwrap();
                ols_coefficients(&xt, &rep.y_vec()).unwrap()[1]
            })
            .collect();
        let mean = est.iter().sum::<f64>() / 500.0;
        let sd = (est.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / 499.0).sqrt();
        let delta = bias::delta_ols_with(&s, &geom, &x).unwrap()[1];
        assert!((mean - 2.0 - delta).abs() < 3.0 * sd / 500f64.sqrt());
    }

    #[test]
    fn grid_sites_are_distinct_grid_nodes() {
        let s = sample_grid_sites(500, 64, 1).unwrap();
        assert_eq!(s.len(), 500);
        for l in s.locations() {
            let i = l.easting * 63.0;
            assert!((i - i.round()).abs() < 1e-9 && (0.0..=1.0).contains(&l.northing));
        }
        assert!(sample_grid_sites(5, 2, 1).is_err());
    }

    #[test]
    fn derived_seeds_differ_by_coordinate() {
        let a = derive_seed(7, &[0, 1, 2]);
        assert_ne!(a, derive_seed(7, &[0, 2, 1]));
        assert_ne!(a, derive_seed(8, &[0, 1, 2]));
        assert_eq!(a, derive_seed(7, &[0, 1, 2]));
    }

    #[test]
    fn archive_round_trip() {
        let sites = small_sites(10, 1);
        let s = ConfoundingScenario::standard(0.1, 0.2);
        let x = sample_exposure(&s, &sites, 1, SqrtMethod::SymmetricEigen).unwrap();
        let law = conditional_law(&s, &sites, &x, SqrtMethod::SymmetricEigen).unwrap();
        let reps: Vec<_> = (0..3)
            .map(|r| sample_replicate(&s, &sites, &law, &x, r).unwrap())
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("reps.csv");
        write_replicate_archive(&p, &s, &sites, &reps).unwrap();
        let (s2, sites2, reps2) = read_replicate_archive(&p).unwrap();
        assert_eq!(s2, s);
        assert_eq!(sites2.len(), 10);
        assert_eq!(reps2.len(), 3);
        for (a, b) in reps.iter().zip(&reps2) {
            assert_eq!(a.seed, b.seed);
            for i in 0..10 {
                assert!((a.y[i] - b.y[i]).abs() <= 1e-8 * a.y[i].abs().max(1e-300));
            }
        }
    }

    #[test]
    fn nine_significant_digits() {
        assert_eq!(fmt_sig(0.5), "0.5");
        assert_eq!(fmt_sig(1.0 / 3.0), "0.333333333");
        assert_eq!(fmt_sig(1.0e-7 / 3.0), "3.33333333e-8");
        assert_eq!(fmt_sig(2.0), "2");
    }
}

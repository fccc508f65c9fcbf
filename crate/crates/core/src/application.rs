//! Ozone-NOx analysis on pre-extracted tabular data: ingestion, relative
//! humidity derivation, the full covariate model and exposure-only fits.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::competitors::MethodId;
use crate::error::{Error, Result};
use crate::harness::MethodContext;
use crate::linalg::ols_coefficients;
use crate::simulator::{derive_seed, fmt_sig};
use crate::spatial::{Location, SiteSet};

const Z975: f64 = 1.959963984540054;

/// Covariates of the full model, in coefficient order after the exposure.
pub const COVARIATES: [&str; 6] = ["u10", "v10", "temp", "ssr", "voc", "rh"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TemperatureUnit {
    Celsius,
    Kelvin,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IngestOptions {
    /// Declared unit of `temp` (and `dewpoint`); values are checked against it.
    pub temperature_unit: TemperatureUnit,
    pub delimiter: u8,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self {
            temperature_unit: TemperatureUnit::Kelvin,
            delimiter: b',',
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub lon: f64,
    pub lat: f64,
    pub o3: f64,
    pub nox: f64,
    pub u10: f64,
    pub v10: f64,
    pub temp: f64,
    pub ssr: f64,
    pub voc: f64,
    /// Relative humidity in percent.
    pub rh: f64,
}

impl Observation {
    fn covariate(&self, name: &str) -> f64 {
        match name {
            "u10" => self.u10,
            "v10" => self.v10,
            "temp" => self.temp,
            "ssr" => self.ssr,
            "voc" => self.voc,
            "rh" => self.rh,
            _ => unreachable!("unknown covariate {name}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationTable {
    pub records: Vec<Observation>,
    /// True when humidity was derived from dew point.
    pub rh_derived: bool,
    pub temperature_unit: TemperatureUnit,
}

impl ObservationTable {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn log_o3(&self) -> DVector<f64> {
        DVector::from_iterator(self.len(), self.records.iter().map(|r| r.o3.ln()))
    }

    pub fn log_nox(&self) -> DVector<f64> {
        DVector::from_iterator(self.len(), self.records.iter().map(|r| r.nox.ln()))
    }

    /// Longitude/latitude as planar coordinates, each axis rescaled to `[0, 1]`.
    pub fn sites(&self) -> Result<SiteSet> {
        SiteSet::new(self.records.iter().map(|r| Location::new(r.lon, r.lat)).collect())?.rescaled_unit()
    }
}

/// Relative humidity (%) from temperature and dew point in degrees Celsius,
/// August-Roche-Magnus form. A dew point above the temperature is clamped to 100.
pub fn derive_rh(temp_c: f64, dewpoint_c: f64) -> f64 {
    if dewpoint_c > temp_c {
        log::warn!("dew point {dewpoint_c} exceeds temperature {temp_c}; relative humidity clamped to 100");
        return 100.0;
    }
    let a = 17.625;
    let b = 243.04;
    (100.0 * (a * dewpoint_c / (b + dewpoint_c) - a * temp_c / (b + temp_c)).exp()).min(100.0)
}

fn to_celsius(v: f64, unit: TemperatureUnit) -> f64 {
    match unit {
        TemperatureUnit::Celsius => v,
        TemperatureUnit::Kelvin => v - 273.15,
    }
}

fn ingest_err(row: usize, column: &str, message: impl Into<String>) -> Error {
    Error::Ingest {
        row,
        column: column.to_string(),
        message: message.into(),
    }
}

/// Parse a delimited file with a header. Required columns: `lon, lat, o3, nox,
/// u10, v10, temp, ssr, voc` and either `rh` or `dewpoint`. Row numbers in errors
/// are 1-based data rows; row 0 is the header.
pub fn ingest(path: &Path, options: &IngestOptions) -> Result<ObservationTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(options.delimiter)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let header: HashMap<String, usize> = rdr
        .headers()?
        .iter()
        .enumerate()
        .map(|(i, h)| (h.to_ascii_lowercase(), i))
        .collect();
    let col = |name: &str| header.get(name).copied().ok_or_else(|| ingest_err(0, name, "missing column"));
    let required = ["lon", "lat", "o3", "nox", "u10", "v10", "temp", "ssr", "voc"];
    let idx: Vec<usize> = required.iter().map(|c| col(c)).collect::<Result<_>>()?;
    let (humidity, rh_derived) = match (header.get("rh"), header.get("dewpoint")) {
        (Some(&i), _) => (i, false),
        (None, Some(&i)) => (i, true),
        (None, None) => return Err(ingest_err(0, "rh", "missing column (or dewpoint)")),
    };
    let unit = options.temperature_unit;
    let plausible = |t: f64| match unit {
        TemperatureUnit::Kelvin => (150.0..=350.0).contains(&t),
        TemperatureUnit::Celsius => (-100.0..=70.0).contains(&t),
    };

    let mut records = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let row = k + 1;
        let rec = rec?;
        let get = |i: usize, name: &str| -> Result<f64> {
            let s = rec.get(i).ok_or_else(|| ingest_err(row, name, "missing value"))?;
            let v: f64 = s.parse().map_err(|_| ingest_err(row, name, format!("non-numeric value '{s}'")))?;
            if !v.is_finite() {
                return Err(ingest_err(row, name, "non-finite value"));
            }
            Ok(v)
        };
        let v: Vec<f64> = required
            .iter()
            .zip(&idx)
            .map(|(name, &i)| get(i, name))
            .collect::<Result<_>>()?;
        for (pos, name) in [(2, "o3"), (3, "nox")] {
            if v[pos] <= 0.0 {
                return Err(ingest_err(row, name, "concentration must be positive for the log transform"));
            }
        }
        if !plausible(v[6]) {
            return Err(ingest_err(row, "temp", format!("{} is implausible for {unit:?} input", v[6])));
        }
        let h = get(humidity, if rh_derived { "dewpoint" } else { "rh" })?;
        let rh = if rh_derived {
            if !plausible(h) {
                return Err(ingest_err(row, "dewpoint", format!("{h} is implausible for {unit:?} input")));
            }
            derive_rh(to_celsius(v[6], unit), to_celsius(h, unit))
        } else {
            if !(h > 0.0 && h <= 100.0) {
                return Err(ingest_err(row, "rh", "relative humidity must lie in (0, 100]"));
            }
            h
        };
        records.push(Observation {
            lon: v[0],
            lat: v[1],
            o3: v[2],
            nox: v[3],
            u10: v[4],
            v10: v[5],
            temp: v[6],
            ssr: v[7],
            voc: v[8],
            rh,
        });
    }
    if records.is_empty() {
        return Err(ingest_err(0, "", "no data rows"));
    }
    log::info!("ingested {} sites from {}", records.len(), path.display());
    Ok(ObservationTable {
        records,
        rh_derived,
        temperature_unit: unit,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelVariant {
    Full,
    ExposureOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppReportRow {
    pub method: MethodId,
    pub variant: ModelVariant,
    /// Log-log elasticity: percent change in O3 per percent change in NOx.
    pub estimate: f64,
    pub lo: Option<f64>,
    pub hi: Option<f64>,
    pub edf: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppReport {
    pub n: usize,
    pub rows: Vec<AppReportRow>,
}

impl AppReport {
    pub fn get(&self, method: MethodId, variant: ModelVariant) -> Option<&AppReportRow> {
        self.rows.iter().find(|r| r.method == method && r.variant == variant)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppOptions {
    pub seed: u64,
    pub chain_iters: usize,
    pub chain_burn_in: usize,
    pub sre_iters: usize,
    pub sre_burn_in: usize,
}

impl Default for AppOptions {
    fn default() -> Self {
        Self {
            seed: 1,
            chain_iters: 5000,
            chain_burn_in: 1000,
            sre_iters: 5000,
            sre_burn_in: 1000,
        }
    }
}

fn standardized(v: &DVector<f64>, name: &str) -> Result<(DVector<f64>, f64)> {
    let n = v.len() as f64;
    let m = v.mean();
    let sd = (v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    if !(sd > 0.0) {
        return Err(Error::rank(format!("column '{name}' is constant")));
    }
    Ok((v.map(|a| (a - m) / sd), sd))
}

/// OLS of log O3 on log NOx and all covariates, with an intercept, fitted on
/// standardized columns and returned on the original scale.
pub fn fit_full_model(table: &ObservationTable) -> Result<AppReportRow> {
    let n = table.len();
    let (y, sy) = standardized(&table.log_o3(), "o3")?;
    let (x, sx) = standardized(&table.log_nox(), "nox")?;
    let p = 2 + COVARIATES.len();
    if n <= p {
        return Err(Error::rank("fewer sites than full-model coefficients"));
    }
    let mut a = DMatrix::zeros(n, p);
    a.column_mut(0).fill(1.0);
    a.set_column(1, &x);
    for (j, name) in COVARIATES.iter().enumerate() {
        let raw = DVector::from_iterator(n, table.records.iter().map(|r| r.covariate(name)));
        a.set_column(2 + j, &standardized(&raw, name)?.0);
    }
    let coef = ols_coefficients(&a, &y)?;
    let rss = (&y - &a * &coef).norm_squared();
    let s2 = rss / (n - p) as f64;
    let inv = (a.transpose() * &a)
        .try_inverse()
        .ok_or_else(|| Error::rank("full-model design is singular"))?;
    let scale = sy / sx;
    let est = coef[1] * scale;
    let se = (s2 * inv[(1, 1)]).sqrt() * scale;
    Ok(AppReportRow {
        method: MethodId::Ols,
        variant: ModelVariant::Full,
        estimate: est,
        lo: Some(est - Z975 * se),
        hi: Some(est + Z975 * se),
        edf: None,
        error: None,
    })
}

/// Full-model OLS plus exposure-only fits under every requested method.
/// Rows are ordered by variant, then by the canonical method order.
pub fn run_application(table: &ObservationTable, methods: &[MethodId], options: &AppOptions) -> Result<AppReport> {
    let sites = table.sites()?;
    let mut methods = methods.to_vec();
    methods.sort();
    methods.dedup();
    let ctx = MethodContext::new(
        sites,
        &methods,
        (options.chain_iters, options.chain_burn_in),
        (options.sre_iters, options.sre_burn_in),
    )?;
    let y = table.log_o3();
    let x = table.log_nox();
    let mut rows = vec![fit_full_model(table)?];
    let fits: Vec<AppReportRow> = methods
        .par_iter()
        .map(|&m| {
            let seed = derive_seed(options.seed, &[m.index()]);
            match ctx.fit(m, &y, &x, seed) {
                Ok(fit) => AppReportRow {
                    method: m,
                    variant: ModelVariant::ExposureOnly,
                    estimate: fit.beta_x_hat,
                    lo: fit.interval.map(|i| i.0),
                    hi: fit.interval.map(|i| i.1),
                    edf: fit.edf,
                    error: None,
                },
                Err(e) => {
                    log::warn!("{m} failed on the exposure-only model: {e}");
                    AppReportRow {
                        method: m,
                        variant: ModelVariant::ExposureOnly,
                        estimate: f64::NAN,
                        lo: None,
                        hi: None,
                        edf: None,
                        error: Some(e.to_string()),
                    }
                }
            }
        })
        .collect();
    rows.extend(fits);
    Ok(AppReport { n: table.len(), rows })
}

/// Write `app_report.csv` and `app_report.json` into `dir`.
pub fn write_app_report(dir: &Path, report: &AppReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    let opt = |v: Option<f64>| v.map(fmt_sig).unwrap_or_default();
    let mut w = csv::Writer::from_path(dir.join("app_report.csv"))?;
    w.write_record(["method", "variant", "estimate", "lo", "hi", "edf", "error"])?;
    for r in &report.rows {
        w.write_record([
            r.method.name().to_string(),
            match r.variant {
                ModelVariant::Full => "full",
                ModelVariant::ExposureOnly => "exposure_only",
            }
            .to_string(),
            if r.estimate.is_finite() { fmt_sig(r.estimate) } else { String::new() },
            opt(r.lo),
            opt(r.hi),
            opt(r.edf),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    fs::write(dir.join("app_report.json"), serde_json::to_string_pretty(report)? + "\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rh_examples() {
        assert!((derive_rh(20.0, 20.0) - 100.0).abs() < 1e-12);
        let direct = 100.0 * (17.625_f64 * 15.0 / (243.04 + 15.0) - 17.625 * 25.0 / (243.04 + 25.0)).exp();
        assert!((derive_rh(25.0, 15.0) - direct).abs() < 1e-12);
        assert!((derive_rh(25.0, 15.0) - 53.8).abs() < 0.1);
        assert_eq!(derive_rh(10.0, 12.0), 100.0);
    }

    #[test]
    fn kelvin_conversion() {
        assert!((to_celsius(298.15, TemperatureUnit::Kelvin) - 25.0).abs() < 1e-12);
        assert_eq!(to_celsius(25.0, TemperatureUnit::Celsius), 25.0);
    }
}

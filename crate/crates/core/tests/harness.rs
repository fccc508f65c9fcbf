use std::path::Path;

use proptest::prelude::*;
use spconf_core::competitors::MethodId;
use spconf_core::harness::{
    aggregate_ratios, edf_summary, probability_summaries, read_cells, read_raw_estimates, run_study, CellInfo,
    RawEstimate, StudyConfig,
};

fn small(methods: Vec<MethodId>, threads: usize, out: &Path) -> StudyConfig {
    StudyConfig {
        preset: None,
        phi_x_grid: vec![0.05, 0.5],
        phi_w_grid: vec![0.2],
        n: 60,
        replicates: 4,
        methods,
        threads,
        chain_iters: 400,
        chain_burn_in: 100,
        sre_iters: 300,
        sre_burn_in: 100,
        output_dir: Some(out.to_path_buf()),
        ..StudyConfig::desk()
    }
}

const FILES: [&str; 6] = ["raw_estimates.csv", "cells.csv", "failures.csv", "ratios.csv", "edf.csv", "probabilities.json"];

#[test]
fn ols_only_study_has_unit_ratios() {
    let dir = tempfile::tempdir().unwrap();
    let t = run_study(&small(vec![MethodId::Ols], 1, dir.path())).unwrap();
    assert_eq!(t.ratios.len(), 2);
    for r in &t.ratios {
        assert_eq!((r.q1, r.q2), (Some(1.0), Some(1.0)));
    }
    assert_eq!(t.probabilities[&MethodId::Ols]["pr_bias_reduced"], Some(0.0));
}

#[test]
fn outputs_are_identical_across_thread_counts() {
    let methods = vec![MethodId::Ols, MethodId::SpatialPlus, MethodId::Ks, MethodId::SsFv, MethodId::SsMom];
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_study(&small(methods.clone(), 1, a.path())).unwrap();
    run_study(&small(methods, 3, b.path())).unwrap();
    for f in FILES {
        let x = std::fs::read(a.path().join(f)).unwrap();
        let y = std::fs::read(b.path().join(f)).unwrap();
        assert_eq!(x, y, "{f} differs");
    }
}

#[test]
fn persisted_raw_files_reproduce_summaries() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(vec![MethodId::Ols, MethodId::Gsem, MethodId::SsMom], 0, dir.path());
    let t = run_study(&cfg).unwrap();
    let raw = read_raw_estimates(&dir.path().join("raw_estimates.csv")).unwrap();
    let cells = read_cells(&dir.path().join("cells.csv")).unwrap();
    assert_eq!(raw, t.raw);
    let key = |c: &CellInfo| (c.cell, c.phi_x, c.phi_w);
    assert_eq!(cells.iter().map(key).collect::<Vec<_>>(), t.cells.iter().map(key).collect::<Vec<_>>());
    assert_eq!(probability_summaries(&raw, &cells, cfg.beta_x), t.probabilities);
    assert_eq!(aggregate_ratios(&raw, cfg.beta_x, cfg.replicates), t.ratios);
    assert_eq!(edf_summary(&raw), t.edf);
}

#[test]
fn resampled_exposure_changes_replicates_but_keeps_calibration() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let fixed = run_study(&small(vec![MethodId::Ols], 1, a.path())).unwrap();
    let mut cfg = small(vec![MethodId::Ols], 1, b.path());
    cfg.resample_exposure = true;
    let resampled = run_study(&cfg).unwrap();
    assert_eq!(fixed.cells, resampled.cells);
    // Replicate 0 shares its exposure and outcome seed; later ones differ.
    let est = |t: &spconf_core::harness::BenchmarkTable, r: usize| t.raw.iter().find(|e| e.cell == 0 && e.replicate == r).unwrap().estimate;
    assert_eq!(est(&fixed, 0), est(&resampled, 0));
    assert_ne!(est(&fixed, 1), est(&resampled, 1));
}

fn est(cell: usize, method: MethodId, replicate: usize, estimate: f64) -> RawEstimate {
    RawEstimate { cell, method, replicate, estimate: Some(estimate), lo: None, hi: None, edf: None, seed: 0, error: None }
}

fn cell(cell: usize, phi_x: f64, phi_w: f64) -> CellInfo {
    CellInfo { cell, phi_x, phi_w, sigma_w: Some(1.0), delta_ols: Some(0.3), error: None }
}

#[test]
fn toy_probabilities_match_hand_count() {
    let cells = vec![cell(0, 0.05, 0.5), cell(1, 0.5, 0.05)];
    let ols = [2.3, 1.8, 2.4, 2.2, 2.1, 1.6];
    let ss = [2.1, 2.3, 2.0, 2.5, 2.1, 1.7];
    let mut raw = Vec::new();
    for (i, (&o, &s)) in ols.iter().zip(&ss).enumerate() {
        raw.push(est(i / 3, MethodId::Ols, i % 3, o));
        raw.push(est(i / 3, MethodId::SsMom, i % 3, s));
    }
    // Per pair |ss - 2| < |ols - 2|: yes, no, yes | no, tie, yes.
    let p = &probability_summaries(&raw, &cells, 2.0)[&MethodId::SsMom];
    assert_eq!(p["pr_bias_reduced"], Some(3.0 / 6.0));
    assert_eq!(p["pr_bias_reduced_given_phix_lt_phiw"], Some(2.0 / 3.0));
    assert_eq!(p["pr_bias_reduced_given_0.2_lt_phix_lt_phiw"], None);
    let twin: Vec<RawEstimate> = raw
        .iter()
        .filter(|r| r.method == MethodId::Ols)
        .map(|r| RawEstimate { method: MethodId::Sre, ..r.clone() })
        .chain(raw.iter().cloned())
        .collect();
    assert_eq!(probability_summaries(&twin, &cells, 2.0)[&MethodId::Sre]["pr_bias_reduced"], Some(0.0));
}

proptest! {
    #[test]
    fn aggregation_ignores_replicate_order(
        vals in prop::collection::vec(1.0f64..3.0, 12),
        rot in 0usize..24,
    ) {
        let cells = vec![cell(0, 0.05, 0.5), cell(1, 0.2, 0.5)];
        let mut raw = Vec::new();
        for (i, v) in vals.iter().enumerate() {
            let m = if i % 2 == 0 { MethodId::Ols } else { MethodId::SsMom };
            raw.push(est(i / 6, m, (i % 6) / 2, *v));
        }
        let base_r = aggregate_ratios(&raw, 2.0, 3);
        let base_p = probability_summaries(&raw, &cells, 2.0);
        let mut shuffled = raw.clone();
        shuffled.rotate_left(rot % raw.len());
        shuffled.reverse();
        let r = aggregate_ratios(&shuffled, 2.0, 3);
        prop_assert_eq!(base_p, probability_summaries(&shuffled, &cells, 2.0));
        prop_assert_eq!(r.len(), base_r.len());
        for (a, b) in r.iter().zip(&base_r) {
            prop_assert_eq!((a.cell, a.method, a.successes), (b.cell, b.method, b.successes));
            prop_assert!((a.q1.unwrap() - b.q1.unwrap()).abs() < 1e-12);
            prop_assert!((a.q2.unwrap() - b.q2.unwrap()).abs() < 1e-12);
        }
    }
}

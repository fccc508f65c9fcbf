use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use spconf_core::basis::{principal_kriging_basis, NullSpaceType};
use spconf_core::bias::{bias_curve_with, d_x_star, d_x_with, delta_gls_with, delta_ols_with};
use spconf_core::simulator::{sample_exposure, sample_grid_sites, ConfoundingScenario, FieldGeometry};
use spconf_core::spatial::SqrtMethod;

const EIG: SqrtMethod = SqrtMethod::SymmetricEigen;

fn curve_points(phi_x: f64, phi_w: f64, ns: NullSpaceType, n: usize) -> Vec<(usize, f64)> {
    let sites = sample_grid_sites(n, 64, 71).unwrap();
    let sc = ConfoundingScenario::standard(phi_x, phi_w);
    let x = sample_exposure(&sc, &sites, 72, EIG).unwrap();
    let geom = FieldGeometry::for_scenario(&sites, &sc, EIG).unwrap();
    let basis = principal_kriging_basis(&sites, ns, Some(&x)).unwrap();
    bias_curve_with(&sc, &geom, &x, &basis.b, ns, None).unwrap().points
}

#[test]
fn type1_curve_mitigates_when_exposure_is_rougher() {
    let pts = curve_points(0.05, 0.5, NullSpaceType::Type1, 500);
    assert_eq!(pts.len(), 497);
    assert!(pts.iter().all(|&(_, d)| d < 0.0), "{:?}", pts.iter().find(|p| p.1 >= 0.0));
}

#[test]
fn type1_curve_amplifies_when_exposure_is_smoother() {
    let pts = curve_points(0.5, 0.05, NullSpaceType::Type1, 500);
    assert!(pts.iter().all(|&(_, d)| d > 0.0), "{:?}", pts.iter().find(|p| p.1 <= 0.0));
}

#[test]
fn type2_curve_is_flat_beyond_coordinates() {
    let pts = curve_points(0.05, 0.5, NullSpaceType::Type2, 150);
    let flat = pts[1].1;
    for &(k, d) in &pts[2..] {
        assert!((d - flat).abs() < 1e-8, "k={k}: {d} vs {flat}");
    }
}

#[test]
fn gls_shrinks_bias_for_rough_exposure() {
    let sites = sample_grid_sites(150, 64, 73).unwrap();
    let sc = ConfoundingScenario::standard(0.05, 0.5);
    let x = sample_exposure(&sc, &sites, 74, EIG).unwrap();
    let geom = FieldGeometry::for_scenario(&sites, &sc, EIG).unwrap();
    let ols = delta_ols_with(&sc, &geom, &x).unwrap()[1];
    let gls = delta_gls_with(&sc, &geom, &x).unwrap()[1];
    assert!(gls.abs() < ols.abs(), "GLS {gls}, OLS {ols}");
}

#[test]
fn type3_selection_leaves_posterior_mean_at_ols() {
    let sites = sample_grid_sites(80, 64, 75).unwrap();
    let sc = ConfoundingScenario::standard(0.05, 0.5);
    let x = sample_exposure(&sc, &sites, 76, EIG).unwrap();
    let basis = principal_kriging_basis(&sites, NullSpaceType::Type3, Some(&x)).unwrap();
    let b = basis.leading(10).unwrap();
    let y = DVector::from_fn(80, |i, _| 1.0 + 2.0 * x[i] + (i as f64 * 0.7).sin());
    let d = d_x_star(&y, &x, &b, &[1.0; 10], 0.5).unwrap();
    assert!(d[1].abs() < 1e-10, "{}", d[1]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    /// The conditional confounder mean is linear in `delta sigma_w / sigma_x`, so
    /// every bias term scales with it.
    #[test]
    fn bias_terms_scale_with_delta(delta in -0.9f64..0.9, sw in 0.2f64..3.0, seed in 0u64..500) {
        let sites = sample_grid_sites(40, 64, seed).unwrap();
        let base = ConfoundingScenario::standard(0.1, 0.3);
        let x = sample_exposure(&base, &sites, seed + 1, EIG).unwrap();
        let geom = FieldGeometry::for_scenario(&sites, &base, EIG).unwrap();
        let b = principal_kriging_basis(&sites, NullSpaceType::Type1, None).unwrap().leading(6).unwrap();
        let mut sc = base;
        sc.delta = delta;
        sc.sigma_w2 = sw * sw;
        let ratio = sc.bias_scale() / base.bias_scale();
        let d0 = d_x_with(&base, &geom, &x, &b).unwrap()[1];
        let d1 = d_x_with(&sc, &geom, &x, &b).unwrap()[1];
        prop_assert!((d1 - ratio * d0).abs() < 1e-10 * d0.abs().max(1.0));
    }

    /// Reordering the sites (with the exposure) leaves every bias term unchanged.
    #[test]
    fn bias_is_invariant_to_site_order(seed in 0u64..500, shift in 1usize..39) {
        let sites = sample_grid_sites(40, 64, seed).unwrap();
        let sc = ConfoundingScenario::standard(0.05, 0.4);
        let x = sample_exposure(&sc, &sites, seed + 1, EIG).unwrap();
        let perm: Vec<usize> = (0..40).map(|i| (i + shift) % 40).collect();
        let sites2 = spconf_core::spatial::SiteSet::new(perm.iter().map(|&i| sites.get(i)).collect()).unwrap();
        let x2 = DVector::from_iterator(40, perm.iter().map(|&i| x[i]));
        let b = DMatrix::from_fn(40, 2, |i, j| if j == 0 { sites.get(i).easting } else { sites.get(i).northing });
        let b2 = DMatrix::from_fn(40, 2, |i, j| b[(perm[i], j)]);
        let g1 = FieldGeometry::for_scenario(&sites, &sc, EIG).unwrap();
        let g2 = FieldGeometry::for_scenario(&sites2, &sc, EIG).unwrap();
        let a = d_x_with(&sc, &g1, &x, &b).unwrap()[1];
        let c = d_x_with(&sc, &g2, &x2, &b2).unwrap()[1];
        prop_assert!((a - c).abs() < 1e-9);
        let o1 = delta_ols_with(&sc, &g1, &x).unwrap()[1];
        let o2 = delta_ols_with(&sc, &g2, &x2).unwrap()[1];
        prop_assert!((o1 - o2).abs() < 1e-9);
    }
}

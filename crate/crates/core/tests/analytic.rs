use std::f64::consts::{FRAC_PI_2, PI};

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use squash_core::analytic::*;
use squash_core::evolve_det::moment_oracle;
use squash_core::validation::random_stable_params;
use squash_core::ModelParams;

fn stable() -> impl Strategy<Value = ModelParams> {
    any::<u64>().prop_map(|s| random_stable_params(&mut ChaCha8Rng::seed_from_u64(s)))
}

/// Stable sets with cos φ = 0.
fn quarter_phase() -> impl Strategy<Value = ModelParams> {
    (stable(), any::<bool>()).prop_map(|(p, up)| {
        let phi = if up { FRAC_PI_2 } else { -FRAC_PI_2 };
        // stability needs g sin φ < γ/2
        let g = if up { p.g.min(0.49 * p.gamma) } else { p.g.max(-0.49 * p.gamma) };
        ModelParams { phi, g, ..p }
    })
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

proptest! {
    #[test]
    fn closed_form_matches_moment_oracle(p in quarter_phase()) {
        let a = stationary_solution(&p).unwrap();
        let o = moment_oracle(&p).unwrap();
        prop_assert!(rel(a.zeta, o.zeta) <= 1e-10, "{a:?} {o:?}");
        prop_assert!((a.mu - o.mu).norm() <= 1e-10 * o.mu.norm().max(o.zeta));
    }

    #[test]
    fn orthogonal_quadrature_ignores_gain(p in quarter_phase()) {
        let want = measured_only_p_variance(&p);
        for g in [0.0, 0.5 * p.g, p.g] {
            let s = stationary_solution(&p.with_g(g)).unwrap();
            // ζ and Re μ cancel in the orthogonal variance; large feedback noise
            // makes both big, so roundoff scales with them
            let cancel = 8.0 * f64::EPSILON * (s.zeta.abs() + s.mu.norm());
            prop_assert!((quad_variance(&s, FRAC_PI_2) - want).abs() <= 1e-12 * want + cancel);
        }
    }

    #[test]
    fn occupation_and_uncertainty_bounds(p in stable()) {
        prop_assert!(n_eff(&p).unwrap() >= -0.5);
        let c = covariance(&stationary_solution(&p).unwrap()).unwrap();
        prop_assert!(c.det() >= (1.0 - 1e-12) / 16.0);
    }

    #[test]
    fn no_feedback_occupation_is_thermal(
        gamma in 1e-3..1.0f64,
        kappa in 1.0..1e4f64,
        chi in 1e-2..10.0f64,
        eta in 0.01..=1.0f64,
        nbar in 0.0..10.0f64,
        phi in -PI..PI,
    ) {
        let p = ModelParams { gamma, kappa, chi, g: 0.0, phi, eta, nbar };
        prop_assert!((n_eff(&p).unwrap() - nbar).abs() <= 1e-12 * nbar.max(1.0));
    }

    #[test]
    fn occupation_is_zeta_plus_re_mu(p in stable()) {
        let s = stationary_solution(&p).unwrap();
        let n = n_eff(&p).unwrap();
        prop_assert!((n - (s.zeta + s.mu.re)).abs() <= 1e-9 * s.zeta.abs().max(1.0));
    }

    #[test]
    fn quadrature_variance_is_pi_periodic_with_extrema_on_the_axes(p in stable(), theta in -PI..PI) {
        let s = stationary_solution(&p).unwrap();
        let scale = s.zeta.abs() + s.mu.norm() + 1.0;
        prop_assert!((quad_variance(&s, theta + PI) - quad_variance(&s, theta)).abs() <= 1e-12 * scale);
        let e = contour_ellipse(&covariance(&s).unwrap()).unwrap();
        let (hi, lo) = (e.semi_axis_major.powi(2), e.semi_axis_minor.powi(2));
        prop_assert!((quad_variance(&s, e.angle) - hi).abs() <= 1e-12 * scale);
        prop_assert!((quad_variance(&s, e.angle + FRAC_PI_2) - lo).abs() <= 1e-12 * scale);
        let v = quad_variance(&s, theta);
        prop_assert!(v <= hi * (1.0 + 1e-12) && v >= lo * (1.0 - 1e-12));
    }
}

#[test]
fn unstable_points_are_reported_not_dropped() {
    let p = ModelParams {
        phi: FRAC_PI_2,
        ..ModelParams::squashing_reference()
    };
    let table = occupation_table(&p, &[2.5], &[0.0, 0.004, 0.025], squash_core::Exec::Sequential).unwrap();
    let flags: Vec<bool> = table.iter().map(|r| r.stable).collect();
    assert_eq!(flags, [true, true, false]);
    assert_eq!(table[0].n_eff, Some(0.5));
    assert_eq!(table[2].n_eff, None);
}

#[test]
fn contour_rows_at_reference() {
    let rows = contour_rows(&ModelParams::squashing_reference()).unwrap();
    let labels: Vec<&str> = rows.iter().map(|r| r.label).collect();
    assert_eq!(labels, ["vacuum", "measured", "feedback"]);
    assert_eq!(rows[0].ellipse.semi_axis_major, 0.5);
    assert!((rows[1].covariance.vxx - 0.5).abs() < 1e-12);
    assert!((rows[2].covariance.vxx - 0.1354166666666667).abs() < 1e-12);
    assert!((rows[2].ellipse.semi_axis_minor - (13.0f64 / 96.0).sqrt()).abs() < 1e-12);
    assert!((rows[2].ellipse.angle - FRAC_PI_2).abs() < 1e-12);
}

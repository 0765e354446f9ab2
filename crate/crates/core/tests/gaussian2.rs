use nalgebra::Matrix4;
use num_complex::Complex64;
use proptest::prelude::*;
use squash_core::gaussian2::*;
use squash_core::ModelParams;

/// Var P_a of the cascade P_a ← X_b, solved by hand: ⟨P_a X_b⟩ = −χ/(4(γ+κ)),
/// then γ Var P_a = γ(2n̄+1)/4 − χ⟨P_a X_b⟩.
fn cascade_var_p(gamma: f64, kappa: f64, chi: f64, nbar: f64) -> f64 {
    (2.0 * nbar + 1.0) / 4.0 + chi * chi / (4.0 * gamma * (gamma + kappa))
}

fn cascade_var_cavity(gamma: f64, kappa: f64, chi: f64, nbar: f64) -> f64 {
    0.25 + (chi / 2.0).powi(2) * ((2.0 * nbar + 1.0) / 4.0) * 4.0 / (kappa * (kappa + gamma))
}

#[test]
fn reference_rates_match_cascade_formulas() {
    let p = ModelParams::squashing_reference();
    let g = TwoModeGaussian::from_params(&p).unwrap();
    assert!((g.var_x() - 0.5).abs() <= 4.0 * f64::EPSILON);
    let want = cascade_var_p(p.gamma, p.kappa, p.chi, p.nbar);
    assert!((g.var_p() - want).abs() < 1e-10);
    assert!((g.var_p() - 2.062343765623438).abs() < 1e-10);
    let cav = cascade_var_cavity(p.gamma, p.kappa, p.chi, p.nbar);
    assert!((g.var_cavity_signal() - cav).abs() < 1e-12);
    assert!((g.var_cavity_signal() - 0.25 - 3.12e-4).abs() < 1e-6);
    assert!(g.residual <= 1e-10);
}

#[test]
fn drift_is_triangular_with_qnd_row() {
    for chi in [0.0, 0.7, 2.5, 40.0] {
        let (f, _) = drift_diffusion(0.01, 100.0, chi, 0.5);
        assert_eq!(f.row(0).iter().filter(|v| **v != 0.0).count(), 1);
        let mut ev: Vec<f64> = f.complex_eigenvalues().iter().map(|z| z.re).collect();
        ev.sort_by(f64::total_cmp);
        for (got, want) in ev.iter().zip([-50.0, -50.0, -0.005, -0.005]) {
            assert!((got - want).abs() <= 1e-12 * want.abs(), "{ev:?}");
        }
        assert!(f.complex_eigenvalues().iter().all(|z| z.im.abs() < 1e-12));
    }
}

#[test]
fn tuned_drives_give_linear_amplitudes() {
    let (gamma, kappa) = (0.01, 100.0);
    let drive_a = Complex64::new(0.5, 0.0);
    let drive_b = Complex64::new(500.0, 0.0);
    let kerr = 2.5 / (4.0 * 100.0 * 10.0);
    let tp = TwoModePhysical::tuned(kerr, drive_a, drive_b, gamma, kappa, 0.5);
    let fp = semiclassical_fixed_point(&tp).unwrap();
    assert!((fp.alpha - Complex64::new(100.0, 0.0)).norm() < 1e-9);
    assert!((fp.beta - Complex64::new(10.0, 0.0)).norm() < 1e-10);
    assert!(fp.residual <= 1e-12);
    assert!(fp.tuned);
    assert!((fp.coupling(kerr) - 2.5).abs() < 1e-10);
    let two = TwoModeGaussian::from_physical(&tp).unwrap();
    let reduced = TwoModeGaussian::from_params(&ModelParams::squashing_reference()).unwrap();
    assert!((two.v - reduced.v).abs().max() < 1e-8);
}

#[test]
fn untuned_drive_is_flagged() {
    let tp = TwoModePhysical {
        delta_b: 1.0,
        delta_a: 0.3,
        kerr: 0.01,
        drive_a: Complex64::new(0.2, -0.1),
        drive_b: Complex64::new(30.0, 0.0),
        gamma: 0.01,
        kappa: 100.0,
        nbar: 0.0,
    };
    let fp = semiclassical_fixed_point(&tp).unwrap();
    assert!(fp.residual <= 1e-12);
    assert!(!fp.tuned);
}

#[test]
fn invalid_two_mode_inputs() {
    let mut tp = TwoModePhysical::tuned(0.01, Complex64::new(1.0, 0.0), Complex64::new(1.0, 0.0), 0.01, 100.0, 0.5);
    tp.kerr = -1.0;
    assert!(semiclassical_fixed_point(&tp).is_err());
    tp.kerr = 0.01;
    tp.kappa = 0.0;
    assert!(semiclassical_fixed_point(&tp).is_err());
}

#[test]
fn elimination_error_at_reference_rates() {
    let r = adiabatic_check(&ModelParams::squashing_reference()).unwrap();
    assert!((r.var_x_two_mode - 0.5).abs() <= 4.0 * f64::EPSILON);
    assert!((r.var_x_reduced - 0.5).abs() < 1e-12);
    assert!(r.rel_dev_x < 1e-12);
    assert!((r.var_p_reduced - 2.0625).abs() < 1e-12);
    assert!((r.rel_dev_p - 7.57e-5).abs() < 1e-7);
    assert!(r.rel_dev_p <= 1e-4);
    assert!(r.regime_ok);
    assert_eq!(r.within_bounds, Some(true));
}

#[test]
fn elimination_outside_regime_is_report_only() {
    let p = ModelParams::squashing_reference().with_kappa(5.0);
    let r = adiabatic_check(&p).unwrap();
    assert!(!r.regime_ok);
    assert_eq!(r.within_bounds, None);
    assert!(r.rel_dev_p > 1e-3);
}

#[test]
fn elimination_error_shrinks_with_kappa() {
    let base = ModelParams::squashing_reference();
    let devs: Vec<f64> = [1e2, 1e3, 1e4]
        .iter()
        .map(|k| adiabatic_check(&base.with_kappa(*k)).unwrap().rel_dev_p)
        .collect();
    assert!(devs[0] > devs[1] && devs[1] > devs[2], "{devs:?}");
}

proptest! {
    #[test]
    fn lyapunov_solution_is_physical(
        gamma in 1e-3f64..1.0,
        kappa in 1.0f64..1e3,
        chi in 0.0f64..10.0,
        nbar in 0.0f64..5.0,
    ) {
        let (f, d) = drift_diffusion(gamma, kappa, chi, nbar);
        let g = TwoModeGaussian::new(f, d).unwrap();
        let res = (g.f * g.v + g.v * g.f.transpose() + g.d).abs().max();
        prop_assert!(res <= 1e-10 * (kappa * g.v.abs().max()).max(1.0));
        prop_assert_eq!(g.v, g.v.transpose());
        prop_assert!(g.v.symmetric_eigenvalues().min() > 0.0);
        let (osc, cav) = g.block_determinants();
        prop_assert!(osc >= (1.0 - 1e-10) / 16.0);
        prop_assert!(cav >= (1.0 - 1e-10) / 16.0);
        prop_assert!((g.var_x() - (2.0 * nbar + 1.0) / 4.0).abs() <= 1e-12 * g.var_x());
        let want = cascade_var_p(gamma, kappa, chi, nbar);
        prop_assert!((g.var_p() - want).abs() <= 1e-9 * want);
        let _: Matrix4<f64> = g.v;
    }
}

//! Closed-form stationary state of the feedback master equation.
//!
//! The stationary normally ordered characteristic function is Gaussian,
//! `C(λ) = exp[−ζ|λ|² + ½ μ λ*² + ½ μ* λ²]`, so `ζ = ⟨a†a⟩` and `μ = ⟨a²⟩`.

use num_complex::Complex64;
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::params::{effective_bath, phase_trig, ModelParams};

/// Normal-ordered second moments (ζ, μ) of a zero-mean Gaussian state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StationaryGaussian {
    pub zeta: f64,
    pub mu: Complex64,
}

impl StationaryGaussian {
    pub const VACUUM: Self = Self {
        zeta: 0.0,
        mu: Complex64::new(0.0, 0.0),
    };
}

/// Symmetric covariance of (X₀, X_{π/2}); the vacuum is diag(1/4, 1/4).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadCovariance {
    pub vxx: f64,
    pub vpp: f64,
    pub vxp: f64,
}

impl QuadCovariance {
    pub const VACUUM: Self = Self {
        vxx: 0.25,
        vpp: 0.25,
        vxp: 0.0,
    };

    pub fn det(&self) -> f64 {
        self.vxx * self.vpp - self.vxp * self.vxp
    }

    /// Var(X_θ) = vxx cos²θ + vpp sin²θ + vxp sin 2θ.
    pub fn variance_along(&self, theta: f64) -> f64 {
        let (s, c) = theta.sin_cos();
        self.vxx * c * c + self.vpp * s * s + self.vxp * (2.0 * theta).sin()
    }

    fn ensure_positive_definite(&self) -> Result<()> {
        if self.vxx > 0.0 && self.vpp > 0.0 && self.det() > 0.0 {
            Ok(())
        } else {
            Err(Error::Degenerate(format!(
                "covariance ({:.6e}, {:.6e}, {:.6e}) is not positive definite",
                self.vxx, self.vpp, self.vxp
            )))
        }
    }
}

/// The 1/√e level set of the Wigner function: an ellipse in (X₀, X_{π/2}).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContourEllipse {
    pub semi_axis_major: f64,
    pub semi_axis_minor: f64,
    /// Orientation of the major axis in (−π/2, π/2].
    pub angle: f64,
}

/// True iff the stationary moments exist: both drift eigenvalues −Γ ± g sin φ
/// are negative, which reduces to 2 g sin φ < γ.
pub fn is_stable(p: &ModelParams) -> bool {
    2.0 * p.feedback_drive() < p.gamma
}

fn ensure_stable(p: &ModelParams) -> Result<()> {
    if is_stable(p) {
        Ok(())
    } else {
        Err(Error::Unstable(format!(
            "2 g sin(phi) = {:.6e} is not below gamma = {:.6e}",
            2.0 * p.feedback_drive(),
            p.gamma
        )))
    }
}

/// Stationary (ζ, μ) of the feedback master equation.
///
/// Written as the bath values (N, M) plus the feedback shift so that g = 0
/// returns (N, M) bit-for-bit.
pub fn stationary_solution(p: &ModelParams) -> Result<StationaryGaussian> {
    ensure_stable(p)?;
    let bath = effective_bath(p)?;
    let gam = bath.damping;
    let s = p.feedback_drive();
    let n = bath.occupancy;
    let m = bath.squeezing;
    let denom = gam * gam - s * s;
    let zeta = n + s * (gam * m.re + s * (n + 0.5)) / denom;
    let mu_re = m.re + s * (gam * (n + 0.5) + s * m.re) / denom;
    Ok(StationaryGaussian {
        zeta,
        mu: Complex64::new(mu_re, m.im),
    })
}

/// The stationary formulas in their printed arrangement, including the
/// `2ν Im M` term of ζ whose rate ν is otherwise unspecified. With `nu = 0`
/// this agrees with [`stationary_solution`] for every phase.
pub fn printed_stationary_solution(p: &ModelParams, nu: f64) -> Result<StationaryGaussian> {
    ensure_stable(p)?;
    let bath = effective_bath(p)?;
    let gam = bath.damping;
    let s = p.feedback_drive();
    let n = bath.occupancy;
    let m = bath.squeezing;
    let denom = gam * gam - s * s;
    let zeta = (n * gam * gam + s * (gam * m.re + 2.0 * nu * m.im) + s * s / 2.0) / denom;
    let mu_re = gam * ((n + 0.5) * s + gam * m.re) / denom;
    let mu_im = (gam * gam - s * s) * m.im / denom;
    Ok(StationaryGaussian {
        zeta,
        mu: Complex64::new(mu_re, mu_im),
    })
}

/// ½[½ + ζ + Re(μ e^{2iθ})].
pub fn quad_variance(s: &StationaryGaussian, theta: f64) -> f64 {
    let phase = Complex64::from_polar(1.0, 2.0 * theta);
    0.5 * (0.5 + s.zeta + (s.mu * phase).re)
}

/// n_eff = ζ + Re μ, so that Var(X₀) = ½(½ + n_eff).
///
/// The measurement back-action χ²/4κ enters ζ and Re μ with opposite signs;
/// here it is cancelled symbolically, giving
/// `n_eff = (γ n̄ + g²κ/(2ηχ²) + g sin φ) / (γ − 2 g sin φ)`.
pub fn n_eff(p: &ModelParams) -> Result<f64> {
    ensure_stable(p)?;
    // surfaces the chi = 0 / g != 0 domain error
    effective_bath(p)?;
    let s = p.feedback_drive();
    let feedback_noise = if p.g == 0.0 {
        0.0
    } else {
        p.g * p.g * p.kappa / (2.0 * p.eta * p.chi * p.chi)
    };
    Ok((p.gamma * p.nbar + feedback_noise + s) / (p.gamma - 2.0 * s))
}

/// Orthogonal-quadrature variance ½(½ + n̄ + χ²/(2κγ)) that the feedback leaves
/// untouched when cos φ = 0.
pub fn measured_only_p_variance(p: &ModelParams) -> f64 {
    0.5 * (0.5 + p.nbar + p.chi * p.chi / (2.0 * p.kappa * p.gamma))
}

pub fn covariance(s: &StationaryGaussian) -> Result<QuadCovariance> {
    let c = QuadCovariance {
        vxx: 0.5 * (0.5 + s.zeta + s.mu.re),
        vpp: 0.5 * (0.5 + s.zeta - s.mu.re),
        vxp: -0.5 * s.mu.im,
    };
    c.ensure_positive_definite()?;
    Ok(c)
}

pub fn contour_ellipse(c: &QuadCovariance) -> Result<ContourEllipse> {
    c.ensure_positive_definite()?;
    let mean = 0.5 * (c.vxx + c.vpp);
    let half_diff = 0.5 * (c.vxx - c.vpp);
    let radius = half_diff.hypot(c.vxp);
    let major = mean + radius;
    let minor = mean - radius;
    if minor <= 0.0 {
        return Err(Error::Degenerate(format!("minor eigenvalue {minor:.3e} <= 0")));
    }
    // circular covariance: angle pinned to 0
    let angle = if radius <= 1e-15 * mean {
        0.0
    } else {
        0.5 * (2.0 * c.vxp).atan2(c.vxx - c.vpp)
    };
    // atan2 returns (−π, π]; halving maps to (−π/2, π/2]
    let angle = if angle <= -PI / 2.0 { angle + PI } else { angle };
    Ok(ContourEllipse {
        semi_axis_major: major.sqrt(),
        semi_axis_minor: minor.sqrt(),
        angle,
    })
}

/// Gaussian Wigner function evaluated on a rectangular lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct WignerGrid {
    pub xs: Vec<f64>,
    pub ps: Vec<f64>,
    /// Row-major: `values[j * xs.len() + i]` is W(xs[i], ps[j]).
    pub values: Vec<f64>,
}

impl WignerGrid {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[j * self.xs.len() + i]
    }
}

/// W(x, p) = exp(−½ uᵀ c⁻¹ u) / (2π √det c) for the zero-mean state.
pub fn wigner_point(c: &QuadCovariance, x: f64, p: f64) -> Result<f64> {
    c.ensure_positive_definite()?;
    Ok(wigner_unchecked(c, x, p))
}

fn wigner_unchecked(c: &QuadCovariance, x: f64, p: f64) -> f64 {
    let det = c.det();
    let quad = (c.vpp * x * x - 2.0 * c.vxp * x * p + c.vxx * p * p) / det;
    (-0.5 * quad).exp() / (2.0 * PI * det.sqrt())
}

pub fn wigner_gaussian(c: &QuadCovariance, xs: &[f64], ps: &[f64]) -> Result<WignerGrid> {
    c.ensure_positive_definite()?;
    let values = ps
        .iter()
        .flat_map(|&p| xs.iter().map(move |&x| wigner_unchecked(c, x, p)))
        .collect();
    Ok(WignerGrid {
        xs: xs.to_vec(),
        ps: ps.to_vec(),
        values,
    })
}

/// Cos φ of a parameter set; zero (exactly) at the quarter-turn phases.
pub fn lo_cosine(p: &ModelParams) -> f64 {
    phase_trig(p.phi).1
}

/// One point of the occupation-versus-gain table. Unstable points are kept
/// with no occupation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OccupationPoint {
    pub chi: f64,
    pub g: f64,
    pub n_eff: Option<f64>,
    pub stable: bool,
}

/// n_eff over every (χ, g) pair, χ-major, other parameters from `base`.
pub fn occupation_table(base: &ModelParams, chis: &[f64], gains: &[f64], exec: Exec) -> Result<Vec<OccupationPoint>> {
    let pairs: Vec<(f64, f64)> = chis.iter().flat_map(|&chi| gains.iter().map(move |&g| (chi, g))).collect();
    exec.map(pairs, |(chi, g)| {
        let p = base.with_chi(chi).with_g(g);
        p.validate()?;
        let stable = is_stable(&p);
        let n_eff = if stable { Some(n_eff(&p)?) } else { None };
        Ok(OccupationPoint { chi, g, n_eff, stable })
    })
    .into_iter()
    .collect()
}

/// A labelled stationary covariance and its contour.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContourRow {
    pub label: &'static str,
    pub covariance: QuadCovariance,
    pub ellipse: ContourEllipse,
}

/// Vacuum, measurement without feedback (g = 0) and measurement with the
/// feedback gain of `p`.
pub fn contour_rows(p: &ModelParams) -> Result<[ContourRow; 3]> {
    let row = |label, covariance: QuadCovariance| -> Result<ContourRow> {
        Ok(ContourRow {
            label,
            covariance,
            ellipse: contour_ellipse(&covariance)?,
        })
    };
    Ok([
        row("vacuum", QuadCovariance::VACUUM)?,
        row("measured", covariance(&stationary_solution(&p.with_g(0.0))?)?)?,
        row("feedback", covariance(&stationary_solution(p)?)?)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-300)
    }

    #[test]
    fn no_feedback_returns_bath() {
        let p = ModelParams::squashing_reference().with_g(0.0);
        let s = stationary_solution(&p).unwrap();
        let b = effective_bath(&p).unwrap();
        assert_eq!(s.zeta, b.occupancy);
        assert_eq!(s.mu, b.squeezing);
        assert_eq!(s.zeta, 2.0625);
        assert_eq!(s.mu.re, -1.5625);
    }

    #[test]
    fn contour_figure_values() {
        let p = ModelParams::squashing_reference();
        let s = stationary_solution(&p).unwrap();
        // hand evaluation: 0.00101875/0.0006 and -0.00115625/0.0006
        assert!(rel(s.zeta, 0.00101875 / 0.0006) < 1e-12);
        assert!(rel(s.mu.re, -0.00115625 / 0.0006) < 1e-12);
        assert_eq!(s.mu.im, 0.0);
        assert!(rel(quad_variance(&s, 0.0), 0.1354166666666667) < 1e-12);
        assert!(rel(quad_variance(&s, FRAC_PI_2), 2.0625) < 1e-12);
        assert!(rel(n_eff(&p).unwrap(), -0.2291666666666667) < 1e-12);
        let printed = printed_stationary_solution(&p, 0.0).unwrap();
        assert!(rel(printed.zeta, s.zeta) < 1e-13);
        assert!(rel(printed.mu.re, s.mu.re) < 1e-13);
    }

    #[test]
    fn printed_nu_term_vanishes_when_m_real() {
        let p = ModelParams::squashing_reference();
        let a = printed_stationary_solution(&p, 0.0).unwrap();
        let b = printed_stationary_solution(&p, 123.0).unwrap();
        assert_eq!(a, b);
        let tilted = p.with_phi(-1.2);
        let c = printed_stationary_solution(&tilted, 0.0).unwrap();
        let d = printed_stationary_solution(&tilted, 1.0).unwrap();
        assert!((c.zeta - d.zeta).abs() > 1e-6);
    }

    #[test]
    fn fig1_trend() {
        let p = ModelParams::squashing_reference();
        let vals: Vec<f64> = [0.5, 1.5, 2.5]
            .iter()
            .map(|&chi| n_eff(&p.with_chi(chi)).unwrap())
            .collect();
        // (γn̄ + g²κ/(2ηχ²) − g)/(γ + 2g) by hand
        assert!(rel(vals[0], 0.13625 / 0.06) < 1e-12);
        assert!(rel(vals[1], (0.005 + 0.0625 / (1.6 * 2.25) - 0.025) / 0.06) < 1e-12);
        assert!(rel(vals[2], -0.01375 / 0.06) < 1e-12);
        assert!(vals[0] > vals[1] && vals[1] > vals[2]);
        assert!((vals[1] - (-0.0440)).abs() < 1e-4);
    }

    #[test]
    fn n_eff_matches_definition() {
        for &(g, phi) in &[(0.0, 0.3), (0.02, -FRAC_PI_2), (0.003, 0.4), (0.04, -2.0)] {
            let p = ModelParams::squashing_reference().with_g(g).with_phi(phi);
            let s = stationary_solution(&p).unwrap();
            let direct = s.zeta + s.mu.re;
            assert!((n_eff(&p).unwrap() - direct).abs() < 1e-12 * (1.0 + s.zeta.abs()));
        }
    }

    #[test]
    fn stability_boundary() {
        let p = ModelParams::squashing_reference();
        assert!(is_stable(&p));
        assert!(!is_stable(&p.with_phi(FRAC_PI_2)));
        assert!(is_stable(&p.with_g(0.0).with_phi(FRAC_PI_2)));
        // 2 g sin(phi) = gamma exactly is unstable
        assert!(!is_stable(&p.with_g(0.005).with_phi(FRAC_PI_2)));
        assert!(is_stable(&p.with_g(0.0049).with_phi(FRAC_PI_2)));
        assert!(matches!(
            stationary_solution(&p.with_phi(FRAC_PI_2)),
            Err(Error::Unstable(_))
        ));
        assert!(matches!(n_eff(&p.with_phi(FRAC_PI_2)), Err(Error::Unstable(_))));
    }

    #[test]
    fn vacuum_and_covariance() {
        let v = StationaryGaussian::VACUUM;
        for k in 0..8 {
            assert_eq!(quad_variance(&v, k as f64 * 0.4), 0.25);
        }
        assert_eq!(covariance(&v).unwrap(), QuadCovariance::VACUUM);

        let s = StationaryGaussian {
            zeta: 1.0,
            mu: Complex64::new(0.0, 0.6),
        };
        let c = covariance(&s).unwrap();
        assert_eq!(c.vxx, c.vpp);
        assert_eq!(c.vxp, -0.3);
        let e = contour_ellipse(&c).unwrap();
        assert!((e.angle + PI / 4.0).abs() < 1e-14);

        let bad = StationaryGaussian {
            zeta: -0.5,
            mu: Complex64::new(0.0, 0.0),
        };
        assert!(matches!(covariance(&bad), Err(Error::Degenerate(_))));
    }

    #[test]
    fn ellipse_axes() {
        let c = QuadCovariance {
            vxx: 0.1354166666666667,
            vpp: 2.0625,
            vxp: 0.0,
        };
        let e = contour_ellipse(&c).unwrap();
        assert!((e.semi_axis_major - 2.0625f64.sqrt()).abs() < 1e-14);
        assert!((e.semi_axis_major - 1.43614).abs() < 1e-5);
        assert!((e.semi_axis_minor - 0.36800).abs() < 1e-5);
        assert_eq!(e.angle, FRAC_PI_2);

        let vac = contour_ellipse(&QuadCovariance::VACUUM).unwrap();
        assert_eq!((vac.semi_axis_major, vac.semi_axis_minor, vac.angle), (0.5, 0.5, 0.0));

        let measured = QuadCovariance {
            vxx: 0.5,
            vpp: 2.0625,
            vxp: 0.0,
        };
        let m = contour_ellipse(&measured).unwrap();
        assert!((m.semi_axis_minor - 0.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn ellipse_angle_maximizes_variance() {
        let c = QuadCovariance {
            vxx: 0.7,
            vpp: 0.4,
            vxp: -0.2,
        };
        let e = contour_ellipse(&c).unwrap();
        let at = c.variance_along(e.angle);
        assert!((at - e.semi_axis_major.powi(2)).abs() < 1e-14);
        let across = c.variance_along(e.angle + FRAC_PI_2);
        assert!((across - e.semi_axis_minor.powi(2)).abs() < 1e-14);
        for k in 0..100 {
            let th = -PI + k as f64 * 0.0628;
            let v = c.variance_along(th);
            assert!(v <= at + 1e-15 && v >= across - 1e-15);
        }
    }

    #[test]
    fn wigner_peak_and_contour() {
        let w0 = wigner_point(&QuadCovariance::VACUUM, 0.0, 0.0).unwrap();
        assert!((w0 - 2.0 / PI).abs() < 1e-15);

        let c = QuadCovariance {
            vxx: 0.1354166666666667,
            vpp: 2.0625,
            vxp: 0.0,
        };
        let peak = wigner_point(&c, 0.0, 0.0).unwrap();
        assert!((peak - 0.30116).abs() < 1e-5);
        let e = contour_ellipse(&c).unwrap();
        let (s, co) = e.angle.sin_cos();
        let on = wigner_point(&c, e.semi_axis_major * co, e.semi_axis_major * s).unwrap();
        assert!((on - peak / 1f64.exp().sqrt()).abs() < 1e-14);
    }

    #[test]
    fn wigner_normalization() {
        let c = QuadCovariance {
            vxx: 0.3,
            vpp: 1.1,
            vxp: 0.2,
        };
        let h = 0.02;
        let xs: Vec<f64> = (-400..=400).map(|i| i as f64 * h).collect();
        let grid = wigner_gaussian(&c, &xs, &xs).unwrap();
        let total: f64 = grid.values.iter().sum::<f64>() * h * h;
        assert!((total - 1.0).abs() < 1e-9);
        assert_eq!(grid.at(400, 400), wigner_point(&c, 0.0, 0.0).unwrap());
    }
}

//! Linearized two-mode model of the oscillator and the probe cavity before
//! the cavity is eliminated.
//!
//! Quadratures use the vacuum-variance-¼ convention and the ordering
//! (X_a, P_a, X_b, P_b). The bilinear coupling H = ħχ X_b X_a leaves X_a and
//! X_b untouched, pushes P_a by −(χ/2) X_b and P_b by −(χ/2) X_a, so P_b is
//! the cavity quadrature that carries the position signal.

use nalgebra::{Matrix4, SMatrix, SVector};
use num_complex::Complex64;

use crate::analytic::{covariance, stationary_solution};
use crate::error::{Error, Result};
use crate::params::ModelParams;

/// Residual accepted for the Lyapunov solve.
pub const LYAPUNOV_TOL: f64 = 1e-10;
/// Scaled residual accepted for the semiclassical fixed point.
pub const FIXED_POINT_TOL: f64 = 1e-12;
const NEWTON_MAX_ITER: usize = 100;

/// Driven cross-Kerr system before linearization. Rates in s⁻¹.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoModePhysical {
    /// ω_b − ω_B
    pub delta_b: f64,
    /// ω_a − ω_A
    pub delta_a: f64,
    /// Cross-Kerr rate G.
    pub kerr: f64,
    pub drive_a: Complex64,
    pub drive_b: Complex64,
    pub gamma: f64,
    pub kappa: f64,
    pub nbar: f64,
}

impl TwoModePhysical {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.delta_b, self.delta_a, self.kerr, self.gamma, self.kappa, self.nbar]
            .iter()
            .all(|v| v.is_finite())
            && self.drive_a.is_finite()
            && self.drive_b.is_finite();
        if !finite {
            return Err(Error::Domain("two-mode parameters must be finite".into()));
        }
        if !(self.gamma > 0.0 && self.kappa > 0.0) {
            return Err(Error::Domain(format!(
                "gamma = {} and kappa = {} must be positive",
                self.gamma, self.kappa
            )));
        }
        if self.kerr < 0.0 {
            return Err(Error::Domain(format!("G = {} must be >= 0", self.kerr)));
        }
        if self.nbar < 0.0 {
            return Err(Error::Domain(format!("nbar = {} must be >= 0", self.nbar)));
        }
        Ok(())
    }

    /// Detunings chosen so that the nonlinear shifts cancel at α = 2𝒜/γ,
    /// β = 2ℬ/κ.
    pub fn tuned(kerr: f64, drive_a: Complex64, drive_b: Complex64, gamma: f64, kappa: f64, nbar: f64) -> Self {
        let alpha = 2.0 * drive_a / gamma;
        let beta = 2.0 * drive_b / kappa;
        Self {
            delta_b: kerr * (alpha.norm_sqr() + 0.5),
            delta_a: kerr * beta.norm_sqr(),
            kerr,
            drive_a,
            drive_b,
            gamma,
            kappa,
            nbar,
        }
    }

    /// Residuals of the semiclassical equations for (β, α).
    fn residual(&self, alpha: Complex64, beta: Complex64) -> (Complex64, Complex64) {
        let i = Complex64::i();
        let shift_b = self.delta_b - 0.5 * self.kerr - self.kerr * alpha.norm_sqr();
        let shift_a = self.delta_a - self.kerr * beta.norm_sqr();
        (
            -i * shift_b * beta - 0.5 * self.kappa * beta + self.drive_b,
            -i * shift_a * alpha - 0.5 * self.gamma * alpha + self.drive_a,
        )
    }
}

/// Classical amplitudes of the driven steady state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedPoint {
    pub alpha: Complex64,
    pub beta: Complex64,
    /// Largest residual, scaled by max(|𝒜|, |ℬ|, 1).
    pub residual: f64,
    pub iterations: usize,
    /// |α|² = δ_b/G − ½ and |β|² = δ_a/G, so the linearized fluctuations see
    /// zero detuning. Always false for G = 0.
    pub tuned: bool,
}

impl FixedPoint {
    /// χ = 4G|α||β|, the magnitude of the linearized coupling.
    pub fn coupling(&self, kerr: f64) -> f64 {
        4.0 * kerr * self.alpha.norm() * self.beta.norm()
    }
}

/// Newton iteration on (Re α, Im α, Re β, Im β) from the G = 0 solution,
/// with step halving when a full step increases the residual. The Kerr
/// shifts make the system multistable; when the direct iteration stalls, the
/// detunings and G are scaled together from zero in stages, each started
/// from the previous root.
pub fn semiclassical_fixed_point(tp: &TwoModePhysical) -> Result<FixedPoint> {
    tp.validate()?;
    let i = Complex64::i();
    let alpha0 = tp.drive_a / (i * tp.delta_a + 0.5 * tp.gamma);
    let beta0 = tp.drive_b / (i * tp.delta_b + 0.5 * tp.kappa);
    let (alpha, beta, res, iterations) = match newton(tp, alpha0, beta0) {
        Ok(found) => found,
        Err(direct) => continuation(tp).ok_or(direct)?,
    };
    let tuned = tp.kerr > 0.0 && {
        let want_a = tp.delta_b / tp.kerr - 0.5;
        let want_b = tp.delta_a / tp.kerr;
        let close = |got: f64, want: f64| (got - want).abs() <= 1e-9 * want.abs().max(1.0);
        close(alpha.norm_sqr(), want_a) && close(beta.norm_sqr(), want_b)
    };
    Ok(FixedPoint {
        alpha,
        beta,
        residual: res,
        iterations,
        tuned,
    })
}

fn continuation(tp: &TwoModePhysical) -> Option<(Complex64, Complex64, f64, usize)> {
    for stages in [8, 64, 512] {
        let mut alpha = 2.0 * tp.drive_a / tp.gamma;
        let mut beta = 2.0 * tp.drive_b / tp.kappa;
        let mut total = 0;
        let mut last = None;
        for k in 1..=stages {
            let lam = k as f64 / stages as f64;
            let scaled = TwoModePhysical {
                delta_b: lam * tp.delta_b,
                delta_a: lam * tp.delta_a,
                kerr: lam * tp.kerr,
                ..*tp
            };
            match newton(&scaled, alpha, beta) {
                Ok((a, b, res, it)) => {
                    alpha = a;
                    beta = b;
                    total += it;
                    last = Some(res);
                }
                Err(_) => {
                    last = None;
                    break;
                }
            }
        }
        if let Some(res) = last {
            return Some((alpha, beta, res, total));
        }
    }
    None
}

fn newton(tp: &TwoModePhysical, mut alpha: Complex64, mut beta: Complex64) -> Result<(Complex64, Complex64, f64, usize)> {
    let i = Complex64::i();
    let scale = tp.drive_a.norm().max(tp.drive_b.norm()).max(1.0);
    let size = |(fb, fa): (Complex64, Complex64)| fb.norm().max(fa.norm()) / scale;
    let mut res = size(tp.residual(alpha, beta));
    let mut iterations = 0;
    while res > FIXED_POINT_TOL {
        if iterations == NEWTON_MAX_ITER {
            return Err(Error::Convergence(format!(
                "semiclassical fixed point: residual {res:.3e} after {NEWTON_MAX_ITER} Newton steps"
            )));
        }
        iterations += 1;
        let (fb, fa) = tp.residual(alpha, beta);
        let g = tp.kerr;
        let shift_b = tp.delta_b - 0.5 * g - g * alpha.norm_sqr();
        let shift_a = tp.delta_a - g * beta.norm_sqr();
        // complex partial derivatives, columns (Re α, Im α, Re β, Im β)
        let dfb = [
            2.0 * i * g * alpha.re * beta,
            2.0 * i * g * alpha.im * beta,
            -i * shift_b - 0.5 * tp.kappa,
            shift_b - 0.5 * i * tp.kappa,
        ];
        let dfa = [
            -i * shift_a - 0.5 * tp.gamma,
            shift_a - 0.5 * i * tp.gamma,
            2.0 * i * g * beta.re * alpha,
            2.0 * i * g * beta.im * alpha,
        ];
        let jac = SMatrix::<f64, 4, 4>::from_fn(|r, c| match r {
            0 => dfb[c].re,
            1 => dfb[c].im,
            2 => dfa[c].re,
            _ => dfa[c].im,
        });
        let rhs = -SVector::<f64, 4>::new(fb.re, fb.im, fa.re, fa.im);
        let step = jac.lu().solve(&rhs).ok_or_else(|| {
            Error::Convergence(format!("semiclassical fixed point: singular Jacobian at step {iterations}"))
        })?;
        let mut t = 1.0;
        loop {
            let a = alpha + t * Complex64::new(step[0], step[1]);
            let b = beta + t * Complex64::new(step[2], step[3]);
            let r = size(tp.residual(a, b));
            if r < res || t < 1e-6 {
                alpha = a;
                beta = b;
                res = r;
                break;
            }
            t *= 0.5;
        }
    }
    Ok((alpha, beta, res, iterations))
}

/// Drift and diffusion of the fluctuations for coupling χ.
pub fn drift_diffusion(gamma: f64, kappa: f64, chi: f64, nbar: f64) -> (Matrix4<f64>, Matrix4<f64>) {
    let (hg, hk, hc) = (0.5 * gamma, 0.5 * kappa, 0.5 * chi);
    #[rustfmt::skip]
    let f = Matrix4::new(
        -hg, 0.0, 0.0, 0.0,
        0.0, -hg, -hc, 0.0,
        0.0, 0.0, -hk, 0.0,
        -hc, 0.0, 0.0, -hk,
    );
    let thermal = gamma * (2.0 * nbar + 1.0) / 4.0;
    let d = Matrix4::from_diagonal(&SVector::<f64, 4>::new(thermal, thermal, 0.25 * kappa, 0.25 * kappa));
    (f, d)
}

/// (F, D) for the fluctuations about (α, β). The quadratures are taken
/// relative to the phases of α and β, so only |α| and |β| enter.
pub fn assemble_drift_diffusion(
    tp: &TwoModePhysical,
    alpha: Complex64,
    beta: Complex64,
) -> Result<(Matrix4<f64>, Matrix4<f64>)> {
    tp.validate()?;
    let chi = 4.0 * tp.kerr * alpha.norm() * beta.norm();
    Ok(drift_diffusion(tp.gamma, tp.kappa, chi, tp.nbar))
}

/// Largest real part among the eigenvalues of F.
pub fn spectral_abscissa(f: &Matrix4<f64>) -> f64 {
    f.complex_eigenvalues().iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max)
}

/// Solves F V + V Fᵀ + D = 0 as a 16×16 linear system in vec(V). Returns V
/// and the largest entry of the residual.
pub fn stationary_covariance(f: &Matrix4<f64>, d: &Matrix4<f64>) -> Result<(Matrix4<f64>, f64)> {
    let abscissa = spectral_abscissa(f);
    if !(abscissa < 0.0) {
        return Err(Error::Unstable(format!(
            "drift matrix is not Hurwitz: largest eigenvalue real part {abscissa:.6e}"
        )));
    }
    // column-major vec: vec(FV) = (I ⊗ F) vec V, vec(V Fᵀ) = (F ⊗ I) vec V
    let id = Matrix4::<f64>::identity();
    let op = SMatrix::<f64, 16, 16>::from_fn(|r, c| {
        let (ri, rj) = (r % 4, r / 4);
        let (ci, cj) = (c % 4, c / 4);
        id[(rj, cj)] * f[(ri, ci)] + f[(rj, cj)] * id[(ri, ci)]
    });
    let rhs = -SVector::<f64, 16>::from_column_slice(d.as_slice());
    let lu = op.lu();
    let singular = || Error::Degenerate("Lyapunov operator is singular".into());
    let mut sol = lu.solve(&rhs).ok_or_else(singular)?;
    // one step of iterative refinement
    let correction = lu.solve(&(rhs - op * sol)).ok_or_else(singular)?;
    sol += correction;
    let v = Matrix4::from_column_slice(sol.as_slice());
    let v = (v + v.transpose()) * 0.5;
    let residual = (f * v + v * f.transpose() + d).abs().max();
    let scale = (f.abs().max() * v.abs().max()).max(d.abs().max()).max(1.0);
    if residual > LYAPUNOV_TOL * scale {
        return Err(Error::Convergence(format!(
            "Lyapunov residual {residual:.3e} exceeds {:.1e}",
            LYAPUNOV_TOL * scale
        )));
    }
    Ok((v, residual))
}

/// Drift, diffusion and stationary covariance on (X_a, P_a, X_b, P_b).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoModeGaussian {
    pub f: Matrix4<f64>,
    pub d: Matrix4<f64>,
    pub v: Matrix4<f64>,
    pub residual: f64,
}

impl TwoModeGaussian {
    pub fn new(f: Matrix4<f64>, d: Matrix4<f64>) -> Result<Self> {
        let sym = (d - d.transpose()).abs().max();
        if sym > 0.0 || d.symmetric_eigenvalues().min() < -1e-14 * d.abs().max() {
            return Err(Error::Domain("diffusion matrix must be symmetric positive semidefinite".into()));
        }
        let (v, residual) = stationary_covariance(&f, &d)?;
        Ok(Self { f, d, v, residual })
    }

    /// The pre-elimination counterpart of a reduced model (feedback ignored).
    pub fn from_params(p: &ModelParams) -> Result<Self> {
        p.validate()?;
        let (f, d) = drift_diffusion(p.gamma, p.kappa, p.chi, p.nbar);
        Self::new(f, d)
    }

    pub fn from_physical(tp: &TwoModePhysical) -> Result<Self> {
        let fp = semiclassical_fixed_point(tp)?;
        let (f, d) = assemble_drift_diffusion(tp, fp.alpha, fp.beta)?;
        Self::new(f, d)
    }

    pub fn var_x(&self) -> f64 {
        self.v[(0, 0)]
    }

    pub fn var_p(&self) -> f64 {
        self.v[(1, 1)]
    }

    /// Variance of the cavity quadrature driven by X_a.
    pub fn var_cavity_signal(&self) -> f64 {
        self.v[(3, 3)]
    }

    /// Determinants of the oscillator and cavity 2×2 blocks.
    pub fn block_determinants(&self) -> (f64, f64) {
        let det = |k: usize| self.v[(k, k)] * self.v[(k + 1, k + 1)] - self.v[(k, k + 1)] * self.v[(k + 1, k)];
        (det(0), det(2))
    }
}

/// Two-mode against reduced stationary variances at g = 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdiabaticReport {
    pub var_x_two_mode: f64,
    pub var_x_reduced: f64,
    pub var_p_two_mode: f64,
    pub var_p_reduced: f64,
    pub rel_dev_x: f64,
    pub rel_dev_p: f64,
    /// γ/κ
    pub bound_x: f64,
    /// χ²/κ² + γ/κ
    pub bound_p: f64,
    /// κ/χ ≥ 10.
    pub regime_ok: bool,
    /// Whether both deviations sit under their bounds; `None` outside the
    /// regime, where no bound is claimed.
    pub within_bounds: Option<bool>,
}

pub fn adiabatic_check(p: &ModelParams) -> Result<AdiabaticReport> {
    let two = TwoModeGaussian::from_params(p)?;
    let reduced = covariance(&stationary_solution(&p.with_g(0.0))?)?;
    let rel = |a: f64, b: f64| (a - b).abs() / b.abs();
    let rel_dev_x = rel(two.var_x(), reduced.vxx);
    let rel_dev_p = rel(two.var_p(), reduced.vpp);
    let bound_x = p.gamma / p.kappa;
    let bound_p = (p.chi / p.kappa).powi(2) + p.gamma / p.kappa;
    let regime_ok = p.chi == 0.0 || p.kappa / p.chi >= 10.0;
    let within_bounds = regime_ok.then(|| rel_dev_x <= bound_x && rel_dev_p <= bound_p);
    if within_bounds == Some(false) {
        log::warn!("adiabatic elimination error exceeds its order estimate: x {rel_dev_x:.3e}, p {rel_dev_p:.3e}");
    }
    Ok(AdiabaticReport {
        var_x_two_mode: two.var_x(),
        var_x_reduced: reduced.vxx,
        var_p_two_mode: two.var_p(),
        var_p_reduced: reduced.vpp,
        rel_dev_x,
        rel_dev_p,
        bound_x,
        bound_p,
        regime_ok,
        within_bounds,
    })
}

//! Model parameters, derived couplings and the feedback-induced effective bath.
//!
//! All rates are in s⁻¹, phases in radians. Quadratures follow
//! `X_θ = (a e^{iθ} + a† e^{−iθ}) / 2`, so the vacuum variance is 1/4.

use num_complex::Complex64;
use std::f64::consts::FRAC_PI_2;

use crate::error::{Error, Result};

/// Sine and cosine of a phase, with quarter-turn multiples snapped to exact values.
pub fn phase_trig(phi: f64) -> (f64, f64) {
    let snap = |v: f64| if v.abs() < 1e-15 { 0.0 } else { v };
    let (s, c) = phi.sin_cos();
    (snap(s), snap(c))
}

/// The seven rates and phases of the adiabatically reduced model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelParams {
    /// Vibrational damping rate γ.
    pub gamma: f64,
    /// Cavity decay rate κ.
    pub kappa: f64,
    /// Effective QND coupling |χ|.
    pub chi: f64,
    /// Feedback gain g (may be zero or negative).
    pub g: f64,
    /// Local-oscillator phase φ.
    pub phi: f64,
    /// Detection efficiency η.
    pub eta: f64,
    /// Thermal phonon number n̄.
    pub nbar: f64,
}

impl ModelParams {
    pub fn new(gamma: f64, kappa: f64, chi: f64, g: f64, phi: f64, eta: f64, nbar: f64) -> Result<Self> {
        let p = Self {
            gamma,
            kappa,
            chi,
            g,
            phi,
            eta,
            nbar,
        };
        p.validate()?;
        Ok(p)
    }

    /// Parameters of the phase-space contour figure: γ = 10⁻², κ = 10², χ = 2.5,
    /// g = 0.025, η = 0.8, n̄ = 0.5, with φ = −π/2 (sin φ = −1).
    pub fn squashing_reference() -> Self {
        Self {
            gamma: 1e-2,
            kappa: 1e2,
            chi: 2.5,
            g: 0.025,
            phi: -FRAC_PI_2,
            eta: 0.8,
            nbar: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [
            ("gamma", self.gamma),
            ("kappa", self.kappa),
            ("chi", self.chi),
            ("g", self.g),
            ("phi", self.phi),
            ("eta", self.eta),
            ("nbar", self.nbar),
        ];
        for (name, v) in finite {
            if !v.is_finite() {
                return Err(Error::Domain(format!("{name} must be finite, got {v}")));
            }
        }
        if self.gamma <= 0.0 {
            return Err(Error::Domain(format!("gamma must be > 0, got {}", self.gamma)));
        }
        if self.kappa <= 0.0 {
            return Err(Error::Domain(format!("kappa must be > 0, got {}", self.kappa)));
        }
        if self.chi < 0.0 {
            return Err(Error::Domain(format!("chi must be >= 0, got {}", self.chi)));
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(Error::Domain(format!("eta must lie in (0, 1], got {}", self.eta)));
        }
        if self.nbar < 0.0 {
            return Err(Error::Domain(format!("nbar must be >= 0, got {}", self.nbar)));
        }
        Ok(())
    }

    pub fn with_g(self, g: f64) -> Self {
        Self { g, ..self }
    }

    pub fn with_chi(self, chi: f64) -> Self {
        Self { chi, ..self }
    }

    pub fn with_phi(self, phi: f64) -> Self {
        Self { phi, ..self }
    }

    pub fn with_eta(self, eta: f64) -> Self {
        Self { eta, ..self }
    }

    pub fn with_kappa(self, kappa: f64) -> Self {
        Self { kappa, ..self }
    }

    /// g sin φ, the rate at which the feedback reinforces ⟨X⟩.
    pub fn feedback_drive(&self) -> f64 {
        self.g * phase_trig(self.phi).0
    }

    /// Measurement strength χ²/κ.
    pub fn measurement_rate(&self) -> f64 {
        self.chi * self.chi / self.kappa
    }
}

/// Upstream physical quantities from which G and χ follow.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhysicalInputs {
    /// Atom-field coupling ε.
    pub epsilon: f64,
    /// Lamb-Dicke parameter k·x₀.
    pub k_x0: f64,
    /// Atomic detuning Δ.
    pub delta: f64,
    /// Semiclassical vibrational amplitude |α|.
    pub alpha_mag: f64,
    /// Semiclassical cavity amplitude |β|.
    pub beta_mag: f64,
}

impl PhysicalInputs {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0) {
            return Err(Error::Domain(format!("delta must be > 0, got {}", self.delta)));
        }
        if !(self.alpha_mag > 0.0) || !(self.beta_mag > 0.0) {
            return Err(Error::Domain(format!(
                "amplitudes must be > 0, got |alpha| = {}, |beta| = {}",
                self.alpha_mag, self.beta_mag
            )));
        }
        Ok(())
    }
}

/// Cross-Kerr rate and the effective QND coupling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Couplings {
    /// G = 2(ε k x₀)²/Δ.
    pub cross_kerr: f64,
    /// |χ| = 4 G |α||β|.
    pub chi: f64,
    /// Sign of χ = −4G|α||β| (−1 for any nonzero coupling, 0 when G vanishes).
    pub chi_sign: f64,
}

pub fn derive_couplings(p: &PhysicalInputs) -> Result<Couplings> {
    p.validate()?;
    let cross_kerr = 2.0 * (p.epsilon * p.k_x0).powi(2) / p.delta;
    let signed = -4.0 * cross_kerr * p.alpha_mag * p.beta_mag;
    Ok(Couplings {
        cross_kerr,
        chi: signed.abs(),
        chi_sign: if signed == 0.0 { 0.0 } else { signed.signum() },
    })
}

/// Coefficients (Γ, N, M) of the squeezed bath simulated by the feedback loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EffectiveBath {
    /// Γ = γ − g sin φ.
    pub damping: f64,
    /// N, the effective thermal occupancy.
    pub occupancy: f64,
    /// M, the complex squeezing coefficient.
    pub squeezing: Complex64,
}

impl EffectiveBath {
    /// √(N(N+1)) − |M|; negative when the bath is not a valid squeezed bath.
    pub fn physicality_margin(&self) -> f64 {
        let n = self.occupancy;
        (n * (n + 1.0)).max(0.0).sqrt() - self.squeezing.norm()
    }

    pub fn is_physical(&self) -> bool {
        self.occupancy >= 0.0 && self.physicality_margin() >= -1e-12 * (1.0 + self.occupancy)
    }

    /// Errors unless |M| ≤ √(N(N+1)).
    pub fn ensure_physical(&self) -> Result<()> {
        if self.is_physical() {
            Ok(())
        } else {
            Err(Error::Nonphysical(format!(
                "|M| = {:.6e} exceeds sqrt(N(N+1)) = {:.6e} (N = {:.6e})",
                self.squeezing.norm(),
                (self.occupancy * (self.occupancy + 1.0)).max(0.0).sqrt(),
                self.occupancy
            )))
        }
    }
}

/// Evaluates Γ, N and M. The analytic layer only warns about nonphysical baths;
/// integrators call [`EffectiveBath::ensure_physical`].
pub fn effective_bath(p: &ModelParams) -> Result<EffectiveBath> {
    p.validate()?;
    let (sin_phi, cos_phi) = phase_trig(p.phi);
    if p.chi == 0.0 && p.g != 0.0 {
        return Err(Error::Domain(
            "chi = 0 with nonzero feedback gain: the feedback noise g^2 kappa/(4 eta chi^2) diverges".into(),
        ));
    }
    let damping = p.gamma - p.g * sin_phi;
    if damping == 0.0 {
        return Err(Error::SingularParameters(format!(
            "effective damping vanishes: g sin(phi) = gamma = {}",
            p.gamma
        )));
    }
    let measurement = p.chi * p.chi / (4.0 * p.kappa);
    let feedback_noise = if p.g == 0.0 {
        0.0
    } else {
        p.g * p.g * p.kappa / (4.0 * p.eta * p.chi * p.chi)
    };
    let occupancy = (p.gamma * p.nbar + measurement + feedback_noise + 0.5 * p.g * sin_phi) / damping;
    let squeezing =
        -Complex64::new(measurement - feedback_noise, -0.5 * p.g * cos_phi) / damping;
    let bath = EffectiveBath {
        damping,
        occupancy,
        squeezing,
    };
    if !bath.is_physical() {
        log::warn!(
            "effective bath is not a physical squeezed bath (margin {:.3e})",
            bath.physicality_margin()
        );
    }
    Ok(bath)
}

/// Thresholds standing in for the "≫" / "≪" regime assumptions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegimeThresholds {
    /// Minimum κ/χ for adiabatic elimination of the cavity.
    pub adiabatic_ratio: f64,
    /// Maximum k x₀ |α| for the Lamb-Dicke expansion.
    pub lamb_dicke_max: f64,
    /// Minimum semiclassical amplitude for the linearization.
    pub amplitude_min: f64,
}

impl Default for RegimeThresholds {
    fn default() -> Self {
        Self {
            adiabatic_ratio: 10.0,
            lamb_dicke_max: 0.1,
            amplitude_min: 10.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckStatus {
    Pass,
    Fail,
    NotEvaluated,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegimeCheck {
    pub name: &'static str,
    pub status: CheckStatus,
    /// The dimensionless ratio the check compares against its threshold.
    pub ratio: Option<f64>,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegimeReport {
    pub checks: Vec<RegimeCheck>,
}

impl RegimeReport {
    pub fn get(&self, name: &str) -> Option<&RegimeCheck> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn all_evaluated_pass(&self) -> bool {
        self.checks.iter().all(|c| c.status != CheckStatus::Fail)
    }
}

pub fn check_regime(p: &ModelParams, phys: Option<&PhysicalInputs>) -> RegimeReport {
    check_regime_with(p, phys, &RegimeThresholds::default())
}

pub fn check_regime_with(
    p: &ModelParams,
    phys: Option<&PhysicalInputs>,
    th: &RegimeThresholds,
) -> RegimeReport {
    let status = |ok: bool| if ok { CheckStatus::Pass } else { CheckStatus::Fail };
    let mut checks = Vec::with_capacity(5);

    let adiabatic = if p.chi > 0.0 { p.kappa / p.chi } else { f64::INFINITY };
    checks.push(RegimeCheck {
        name: "adiabatic",
        status: status(adiabatic >= th.adiabatic_ratio),
        ratio: Some(adiabatic),
        detail: format!("kappa/chi = {adiabatic:.6} (need >= {})", th.adiabatic_ratio),
    });

    // Stationary moments exist iff both eigenvalues −Γ ± g sin φ of the drift
    // are negative, i.e. 2 g sin φ < γ.
    let drive = p.feedback_drive();
    checks.push(RegimeCheck {
        name: "stability",
        status: status(2.0 * drive < p.gamma),
        ratio: Some(2.0 * drive / p.gamma),
        detail: format!("2 g sin(phi) = {:.6e} vs gamma = {:.6e}", 2.0 * drive, p.gamma),
    });
    checks.push(RegimeCheck {
        name: "positive_damping",
        status: status(drive < p.gamma),
        ratio: Some(drive / p.gamma),
        detail: format!("g sin(phi) = {drive:.6e} vs gamma = {:.6e}", p.gamma),
    });

    match phys {
        Some(ph) => {
            let ld = ph.k_x0.abs() * ph.alpha_mag;
            checks.push(RegimeCheck {
                name: "lamb_dicke",
                status: status(ld <= th.lamb_dicke_max && ph.alpha_mag >= th.amplitude_min),
                ratio: Some(ld),
                detail: format!(
                    "k x0 |alpha| = {ld:.3e} (need <= {}), |alpha| = {} (need >= {})",
                    th.lamb_dicke_max, ph.alpha_mag, th.amplitude_min
                ),
            });
            checks.push(RegimeCheck {
                name: "semiclassical",
                status: status(ph.beta_mag >= th.amplitude_min),
                ratio: Some(ph.beta_mag),
                detail: format!("|beta| = {} (need >= {})", ph.beta_mag, th.amplitude_min),
            });
        }
        None => {
            for name in ["lamb_dicke", "semiclassical"] {
                checks.push(RegimeCheck {
                    name,
                    status: CheckStatus::NotEvaluated,
                    ratio: None,
                    detail: "physical inputs not supplied".into(),
                });
            }
        }
    }
    RegimeReport { checks }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + b.abs())
    }

    #[test]
    fn couplings_by_hand() {
        let phys = PhysicalInputs {
            epsilon: 1e6,
            k_x0: 1e-2,
            delta: 1e9,
            alpha_mag: 1.25,
            beta_mag: 2.5,
        };
        let c = derive_couplings(&phys).unwrap();
        assert!(close(c.cross_kerr, 0.2, 1e-14));
        assert!(close(c.chi, 2.5, 1e-14));
        assert_eq!(c.chi_sign, -1.0);

        let zero = derive_couplings(&PhysicalInputs { k_x0: 0.0, ..phys }).unwrap();
        assert_eq!((zero.cross_kerr, zero.chi, zero.chi_sign), (0.0, 0.0, 0.0));

        let doubled = derive_couplings(&PhysicalInputs { k_x0: 2e-2, ..phys }).unwrap();
        assert!(close(doubled.cross_kerr, 4.0 * c.cross_kerr, 1e-14));
    }

    #[test]
    fn couplings_reject_bad_detuning() {
        let phys = PhysicalInputs {
            epsilon: 1.0,
            k_x0: 0.1,
            delta: 0.0,
            alpha_mag: 1.0,
            beta_mag: 1.0,
        };
        assert!(matches!(derive_couplings(&phys), Err(Error::Domain(_))));
    }

    #[test]
    fn bath_without_feedback() {
        let p = ModelParams::squashing_reference().with_g(0.0);
        let b = effective_bath(&p).unwrap();
        assert!(close(b.damping, 0.01, 1e-14));
        assert!(close(b.occupancy, 2.0625, 1e-13));
        assert!(close(b.squeezing.re, -1.5625, 1e-13));
        assert_eq!(b.squeezing.im, 0.0);
    }

    #[test]
    fn bath_at_contour_figure_parameters() {
        let b = effective_bath(&ModelParams::squashing_reference()).unwrap();
        assert!(close(b.damping, 0.035, 1e-14));
        assert!(close(b.occupancy, 0.01125 / 0.035, 1e-13));
        assert!(close(b.squeezing.re, -0.0125 / 0.035, 1e-13));
        assert!(b.is_physical());
    }

    #[test]
    fn bath_thermal_limit() {
        let p = ModelParams::squashing_reference().with_g(0.0).with_chi(1e-9);
        let b = effective_bath(&p).unwrap();
        assert!((b.occupancy - 0.5).abs() < 1e-12);
        assert!(b.squeezing.norm() < 1e-12);
        let exact = effective_bath(&p.with_chi(0.0)).unwrap();
        assert_eq!(exact.occupancy, 0.5);
    }

    #[test]
    fn bath_error_paths() {
        let p = ModelParams::squashing_reference();
        assert!(matches!(effective_bath(&p.with_chi(0.0)), Err(Error::Domain(_))));
        let singular = p.with_g(0.01).with_phi(FRAC_PI_2);
        assert!(matches!(effective_bath(&singular), Err(Error::SingularParameters(_))));
    }

    #[test]
    fn no_feedback_bath_identity() {
        for &(chi, kappa, gamma) in &[(0.3, 10.0, 0.02), (2.5, 100.0, 0.01), (7.0, 1e3, 0.5)] {
            let p = ModelParams::new(gamma, kappa, chi, 0.0, 0.3, 0.5, 1.7).unwrap();
            let b = effective_bath(&p).unwrap();
            let r = chi * chi / (4.0 * kappa * gamma);
            assert_eq!(b.occupancy, (gamma * 1.7 + chi * chi / (4.0 * kappa)) / gamma);
            assert!(close(b.occupancy, 1.7 + r, 1e-14));
            assert!(close(b.squeezing.re, -r, 1e-14));
            assert_eq!(b.squeezing.im, 0.0);
        }
    }

    #[test]
    fn regime_checks() {
        let p = ModelParams::squashing_reference();
        let r = check_regime(&p, None);
        assert_eq!(r.get("stability").unwrap().status, CheckStatus::Pass);
        assert_eq!(r.get("adiabatic").unwrap().status, CheckStatus::Pass);
        assert!(close(r.get("adiabatic").unwrap().ratio.unwrap(), 40.0, 1e-14));
        assert_eq!(r.get("lamb_dicke").unwrap().status, CheckStatus::NotEvaluated);

        let flipped = check_regime(&p.with_phi(FRAC_PI_2), None);
        assert_eq!(flipped.get("stability").unwrap().status, CheckStatus::Fail);
        assert_eq!(flipped.get("positive_damping").unwrap().status, CheckStatus::Fail);

        let off = check_regime(&p.with_g(0.0).with_phi(FRAC_PI_2), None);
        assert_eq!(off.get("stability").unwrap().status, CheckStatus::Pass);

        let phys = PhysicalInputs {
            epsilon: 1e6,
            k_x0: 1e-3,
            delta: 1e9,
            alpha_mag: 20.0,
            beta_mag: 50.0,
        };
        let full = check_regime(&p, Some(&phys));
        assert_eq!(full.get("lamb_dicke").unwrap().status, CheckStatus::Pass);
        assert_eq!(full.get("semiclassical").unwrap().status, CheckStatus::Pass);
    }

    #[test]
    fn rejects_invalid_params() {
        assert!(ModelParams::new(0.0, 1.0, 1.0, 0.0, 0.0, 0.5, 0.0).is_err());
        assert!(ModelParams::new(1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0).is_err());
        assert!(ModelParams::new(1.0, 1.0, 1.0, 0.0, 0.0, 1.0, -0.1).is_err());
        assert!(ModelParams::new(1.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0).is_ok());
    }
}

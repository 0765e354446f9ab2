//! Homodyne-conditioned trajectories with Markovian feedback.
//!
//! Each step updates the conditioned state (thermal damping, QND back-action
//! and the measurement record), computes the scaled photocurrent from the
//! record increment dy as `J = dy / (√(ηχ²/κ) dt)`, and then applies the
//! feedback map `exp(K J dt)` with `Kρ = (g/2)[a − a†, ρ]`.
//!
//! [`Scheme::EulerMaruyama`] is the plain Itô–Euler update driven by a
//! Gaussian innovation. Its noise term multiplies the components of ρ at
//! large |x| by `1 + O(x dW)`, which turns negative near the top of the basis
//! and lets spurious population build there.
//!
//! [`Scheme::Kraus`] is the default. It applies the exact thermal semigroup
//! for half a step before and half a step after the rest, and in between the
//! measurement in the eigenbasis of X, where it is
//! diagonal: the monitored part multiplies ρ by `m(x) m(x')*` with
//! `m(x) = exp(α x dy + β x² dt)` and the unmonitored part by
//! `exp(−(1−η)(χ²/κ) dt (x − x')²/2)`. With [`StepNoise::Sampled`] the record
//! is drawn from its exact one-step law, a Gaussian mixture over the
//! eigenvalues of X, so the noise-averaged measurement is exactly the QND
//! dephasing channel. Every step is completely positive.

use std::sync::atomic::{AtomicBool, Ordering};

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::analytic::is_stable;
use crate::error::{Error, Result};
use crate::evolve_det::{checkpoint_steps, step_count, DetTrajectory, Generator, RhsKind, RhsSpec};
use crate::exec::Exec;
use crate::hilbert::{moments_of, trace, CMatrix, DensityMatrix, Ladder, Moments, Operator, TruncationPolicy};
use crate::params::{phase_trig, ModelParams};

/// Largest trace correction accepted in one Euler–Maruyama step.
pub const RENORMALIZATION_LIMIT: f64 = 1e-3;
/// Slack allowed on Tr ρ² ≤ 1.
pub const PURITY_SLACK: f64 = 1e-8;
/// Ensemble and deterministic moments closer than this are not compared.
pub const ROUNDOFF_AGREEMENT: f64 = 1e-12;
/// 32-bit words of keystream reserved per step.
const WORDS_PER_STEP: u128 = 64;

fn c(re: f64) -> Complex64 {
    Complex64::new(re, 0.0)
}

fn max_abs(m: &CMatrix) -> f64 {
    m.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Scheme {
    EulerMaruyama,
    #[default]
    Kraus,
}

/// Randomness consumed by one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepNoise {
    /// Gaussian innovation dW of variance dt; dy = √η⟨c + c†⟩dt + dW.
    Innovation(f64),
    /// A standard normal and a uniform on [0, 1). The Kraus scheme picks an
    /// eigenvalue x* of X with the state's probability and sets
    /// dy = 2 Re(α) x* dt + √dt ξ. Euler–Maruyama uses dW = √dt ξ.
    Sampled { xi: f64, u: f64 },
}

/// Result of one conditioned update.
#[derive(Debug, Clone, PartialEq)]
pub struct SmeOutcome {
    pub state: CMatrix,
    /// Record increment dy; NaN when nothing is measured.
    pub record: f64,
    /// |Tr ρ − 1| removed by renormalization. For the Kraus scheme this is
    /// the likelihood ratio of the record minus one, not an error.
    pub renormalization: f64,
}

/// Result of a full step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub state: CMatrix,
    /// Scaled photocurrent; NaN when χ = 0.
    pub current: f64,
    pub renormalization: f64,
}

/// The conditioned dynamics at one truncation and step size.
#[derive(Debug, Clone)]
pub struct Unraveling {
    params: ModelParams,
    ladder: Ladder,
    /// exp(L_th dt/2) restricted to each band ρ[n + k, n], k = 0..d.
    thermal: Vec<DMatrix<f64>>,
    dt: f64,
    /// √(ηχ²/κ)
    meas_amp: f64,
    /// e^{iφ}
    phase: Complex64,
    sin_phi: f64,
    /// Eigenvectors (columns) and eigenvalues of X, which is real symmetric.
    x_basis: DMatrix<f64>,
    x_basis_t: DMatrix<f64>,
    x_eigen: Vec<f64>,
    /// Coefficients of x dy and x² dt in the measurement exponent.
    alpha: Complex64,
    beta: Complex64,
    pub scheme: Scheme,
    pub policy: TruncationPolicy,
}

impl Unraveling {
    /// The default [`Scheme`].
    pub fn new(params: ModelParams, dim: usize, dt: f64) -> Result<Self> {
        Self::with_scheme(params, dim, dt, Scheme::default())
    }

    pub fn with_scheme(params: ModelParams, dim: usize, dt: f64, scheme: Scheme) -> Result<Self> {
        params.validate()?;
        if params.chi == 0.0 && params.g != 0.0 {
            return Err(Error::Domain(
                "feedback without measurement: chi = 0 but g != 0".into(),
            ));
        }
        let max_dt = Self::max_dt(&params)?;
        if !(dt > 0.0) || dt > max_dt * (1.0 + 1e-12) {
            return Err(Error::StepSize(format!(
                "dt = {dt} must lie in (0, {max_dt:.6e}] = 0.01 / fastest rate"
            )));
        }
        let bound = Self::norm_bound(&params, dim, scheme);
        if dt * bound > 1.0 {
            return Err(Error::StepSize(format!(
                "dt = {dt} exceeds the limit {:.6e} set by the truncated generator at dim {dim}",
                1.0 / bound
            )));
        }
        let (sin_phi, cos_phi) = phase_trig(params.phi);
        let ladder = Ladder::new(dim)?;
        let thermal = thermal_bands(&Generator::new(RhsSpec::thermal(params.gamma, params.nbar)?, dim)?, dim, 0.5 * dt);
        let phase = Complex64::new(cos_phi, sin_phi);
        let meas_amp = (params.eta * params.measurement_rate()).sqrt();
        let x_real = ladder.x.to_dense().map(|z| z.re);
        let eig = x_real.symmetric_eigen();
        let x_basis = eig.eigenvectors;
        let x_basis_t = x_basis.transpose();
        let x_eigen = eig.eigenvalues.iter().copied().collect();
        // α = √η c / X; β makes the dy average reproduce −(ηχ²/2κ)[X, [X, ρ]]
        let alpha = -Complex64::i() * phase.conj() * meas_amp;
        let beta = -0.5 * meas_amp * meas_amp - 0.5 * alpha * alpha;
        Ok(Self {
            params,
            ladder,
            thermal,
            dt,
            meas_amp,
            phase,
            sin_phi,
            x_basis,
            x_basis_t,
            x_eigen,
            alpha,
            beta,
            scheme,
            policy: TruncationPolicy::default(),
        })
    }

    /// 0.01 / max(χ²/κ, γ(n̄+1), Γ(N+1), |g|).
    pub fn max_dt(p: &ModelParams) -> Result<f64> {
        let fastest = if p.chi == 0.0 {
            p.gamma * (p.nbar + 1.0)
        } else {
            RhsSpec::new(RhsKind::GenericFeedback, *p)?.fastest_rate()?
        };
        Ok(0.01 / fastest)
    }

    /// A bound on the norm of the averaged drift for Euler–Maruyama. The
    /// Kraus step is exact in the thermal and measurement parts and needs none.
    fn norm_bound(p: &ModelParams, d: usize, scheme: Scheme) -> f64 {
        let n = (d - 1) as f64;
        match scheme {
            Scheme::EulerMaruyama => {
                p.gamma * ((p.nbar + 1.0) * 2.0 * n + p.nbar * 2.0 * d as f64) + 2.0 * p.measurement_rate() * n
            }
            Scheme::Kraus => 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.ladder.dim
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    /// ⟨X⟩ of a conditioned state.
    pub fn mean_x(&self, rho: &CMatrix) -> f64 {
        self.ladder.x.expect(rho).re
    }

    /// Conditioned update, without feedback.
    pub fn sme_step(&self, rho: &CMatrix, noise: StepNoise) -> Result<SmeOutcome> {
        match self.scheme {
            Scheme::EulerMaruyama => self.euler_step(rho, noise),
            Scheme::Kraus => {
                let mut out = self.kraus_step(rho, noise)?;
                out.state = self.thermal_half_step(&out.state);
                Ok(out)
            }
        }
    }

    /// Distribution of the sampled position in a Kraus step from `rho`: the
    /// X-basis populations after the first thermal half step, in the order
    /// of `x_eigen`. `StepNoise::Sampled { u, .. }` picks the first index
    /// whose cumulative weight exceeds `u` times the total.
    pub fn position_weights(&self, rho: &CMatrix) -> Vec<f64> {
        let damped = self.thermal_half_step(rho);
        let re_x = &self.x_basis_t * damped.map(|z| z.re) * &self.x_basis;
        (0..re_x.nrows()).map(|i| re_x[(i, i)].max(0.0)).collect()
    }

    /// exp(L_th dt/2) ρ, one band at a time. The thermal generator commutes
    /// with transposition, so the band below the diagonal and the one above
    /// it share a propagator.
    fn thermal_half_step(&self, rho: &CMatrix) -> CMatrix {
        let d = self.ladder.dim;
        let mut out = CMatrix::zeros(d, d);
        for (k, e) in self.thermal.iter().enumerate() {
            let m = d - k;
            for r in 0..m {
                let (mut lo, mut hi) = (Complex64::new(0.0, 0.0), Complex64::new(0.0, 0.0));
                for s in 0..m {
                    let w = e[(r, s)];
                    lo += rho[(s + k, s)] * w;
                    hi += rho[(s, s + k)] * w;
                }
                out[(r + k, r)] = lo;
                if k > 0 {
                    out[(r, r + k)] = hi;
                }
            }
        }
        out
    }

    /// Half a thermal step, then the measurement. The other thermal half
    /// follows the measurement, or the feedback in a full step.
    fn kraus_step(&self, rho: &CMatrix, noise: StepNoise) -> Result<SmeOutcome> {
        let p = &self.params;
        let dt = self.dt;
        let k = p.measurement_rate();
        let damped = self.thermal_half_step(rho);
        if k == 0.0 {
            let tr = trace(&damped);
            return Ok(SmeOutcome {
                state: damped / tr,
                record: f64::NAN,
                renormalization: (tr - c(1.0)).norm(),
            });
        }
        let (v, vt) = (&self.x_basis, &self.x_basis_t);
        let mut re_x = vt * damped.map(|z| z.re) * v;
        let mut im_x = vt * damped.map(|z| z.im) * v;
        let x = &self.x_eigen;
        // mean of dy given X = x is 2 Re(α) x dt
        let drift = 2.0 * self.alpha.re * dt;
        let dy = match noise {
            StepNoise::Innovation(dw) => {
                let mean_x: f64 = x.iter().enumerate().map(|(i, xi)| xi * re_x[(i, i)]).sum();
                drift * mean_x + dw
            }
            StepNoise::Sampled { xi, u } => {
                let weights: Vec<f64> = (0..x.len()).map(|i| re_x[(i, i)].max(0.0)).collect();
                let total: f64 = weights.iter().sum();
                let target = u * total;
                let mut acc = 0.0;
                let pick = weights
                    .iter()
                    .position(|w| {
                        acc += w;
                        acc > target
                    })
                    .unwrap_or(x.len() - 1);
                drift * x[pick] + dt.sqrt() * xi
            }
        };
        let m: Vec<Complex64> = x
            .iter()
            .map(|&xi| (self.alpha * xi * dy + self.beta * xi * xi * dt).exp())
            .collect();
        let dephase = 0.5 * (1.0 - p.eta) * k * dt;
        for j in 0..x.len() {
            for i in 0..x.len() {
                let f = m[i] * m[j].conj() * (-dephase * (x[i] - x[j]).powi(2)).exp();
                let z = Complex64::new(re_x[(i, j)], im_x[(i, j)]) * f;
                re_x[(i, j)] = z.re;
                im_x[(i, j)] = z.im;
            }
        }
        let re = v * re_x * vt;
        let im = v * im_x * vt;
        let mut out = re.zip_map(&im, Complex64::new);
        let tr = trace(&out);
        if !(tr.re > 0.0) || !tr.re.is_finite() {
            return Err(Error::StepSize(format!("Kraus normalization {tr} is not positive; reduce dt")));
        }
        out /= tr;
        // the basis changes leave antihermitian roundoff
        let out = (&out + out.adjoint()) * c(0.5);
        Ok(SmeOutcome {
            state: out,
            record: dy,
            renormalization: (tr - c(1.0)).norm(),
        })
    }

    /// V diag(m) Vᵀ ρ V diag(m)* Vᵀ with V the real eigenvectors of X. Real
    /// and imaginary parts are rotated separately so the basis changes run as
    /// real products.
    fn scale_in_x_basis(&self, rho: &CMatrix, m: &[Complex64]) -> CMatrix {
        let (v, vt) = (&self.x_basis, &self.x_basis_t);
        let mut re_x = vt * rho.map(|z| z.re) * v;
        let mut im_x = vt * rho.map(|z| z.im) * v;
        for j in 0..m.len() {
            for i in 0..m.len() {
                let z = Complex64::new(re_x[(i, j)], im_x[(i, j)]) * m[i] * m[j].conj();
                re_x[(i, j)] = z.re;
                im_x[(i, j)] = z.im;
            }
        }
        let re = v * re_x * vt;
        let im = v * im_x * vt;
        re.zip_map(&im, Complex64::new)
    }

    /// Itô–Euler update, followed by renormalization of the trace.
    fn euler_step(&self, rho: &CMatrix, noise: StepNoise) -> Result<SmeOutcome> {
        let l = &self.ladder;
        let p = &self.params;
        let dt = self.dt;
        let dw = match noise {
            StepNoise::Innovation(dw) => dw,
            StepNoise::Sampled { xi, .. } => dt.sqrt() * xi,
        };
        let mut out = rho.clone();
        let down = 0.5 * p.gamma * (p.nbar + 1.0) * dt;
        let up = 0.5 * p.gamma * p.nbar * dt;
        Operator::sandwich_acc(&l.a, rho, &l.ad, c(2.0 * down), &mut out);
        l.n.anticommutator_acc(rho, c(-down), &mut out);
        if up != 0.0 {
            Operator::sandwich_acc(&l.ad, rho, &l.a, c(2.0 * up), &mut out);
            l.n_up.anticommutator_acc(rho, c(-up), &mut out);
        }
        let k = p.measurement_rate();
        let mut record = f64::NAN;
        if k != 0.0 {
            let mean_x = self.mean_x(rho);
            record = -2.0 * self.sin_phi * self.meas_amp * mean_x * dt + dw;
            let q = -0.5 * k * dt;
            l.x2.anticommutator_acc(rho, c(q), &mut out);
            Operator::sandwich_acc(&l.x, rho, &l.x, c(-2.0 * q), &mut out);
            let amp = self.meas_amp * dw;
            if amp != 0.0 {
                let i = Complex64::i();
                l.x.right_mul_acc(rho, amp * i * self.phase, &mut out);
                l.x.left_mul_acc(rho, -amp * i * self.phase.conj(), &mut out);
                let shift = amp * 2.0 * self.sin_phi * mean_x;
                for (o, r) in out.as_mut_slice().iter_mut().zip(rho.as_slice()) {
                    *o += r * shift;
                }
            }
        }
        let tr = trace(&out);
        let renormalization = (tr - c(1.0)).norm();
        if renormalization > RENORMALIZATION_LIMIT || !renormalization.is_finite() {
            return Err(Error::StepSize(format!(
                "trace renormalization {renormalization:.3e} exceeds {RENORMALIZATION_LIMIT:.0e}"
            )));
        }
        out /= tr;
        Ok(SmeOutcome {
            state: out,
            record,
            renormalization,
        })
    }

    /// Scaled current J = −2 sin φ ⟨X⟩_c + √(κ/(ηχ²)) ξ.
    pub fn photocurrent(&self, mean_x: f64, xi: f64) -> f64 {
        photocurrent_value(&self.params, mean_x, xi)
    }

    /// J = dy / (√(ηχ²/κ) dt). For a Gaussian innovation this equals
    /// [`Unraveling::photocurrent`] with ξ = dW/dt.
    pub fn current_from_record(&self, dy: f64) -> f64 {
        dy / (self.meas_amp * self.dt)
    }

    /// exp(K J dt) ρ = U ρ U† with U = exp(θ(a − a†)), θ = (g/2) J dt.
    /// With R = diag(iⁿ), a − a† = −2i R† X R holds in the truncated space, so
    /// U = R† V diag(e^{−2iθx}) Vᵀ R.
    pub fn feedback_apply(&self, rho: &CMatrix, current: f64) -> CMatrix {
        let theta = 0.5 * self.params.g * current * self.dt;
        if theta == 0.0 {
            return rho.clone();
        }
        let d = self.ladder.dim;
        let phase = |n: usize| Complex64::i().powi((n % 4) as i32);
        let mut r = rho.clone();
        for j in 0..d {
            for i in 0..d {
                r[(i, j)] *= phase(i) * phase(j).conj();
            }
        }
        let u: Vec<Complex64> = self
            .x_eigen
            .iter()
            .map(|&x| Complex64::from_polar(1.0, -2.0 * theta * x))
            .collect();
        let mut out = self.scale_in_x_basis(&r, &u);
        for j in 0..d {
            for i in 0..d {
                out[(i, j)] *= phase(i).conj() * phase(j);
            }
        }
        out
    }

    /// One full step: measurement update, then feedback driven by the same
    /// record. The Kraus scheme splits the thermal part symmetrically around
    /// both.
    pub fn step(&self, rho: &CMatrix, noise: StepNoise) -> Result<StepOutcome> {
        let kraus = self.scheme == Scheme::Kraus;
        let SmeOutcome {
            state,
            record,
            renormalization,
        } = if kraus {
            self.kraus_step(rho, noise)?
        } else {
            self.euler_step(rho, noise)?
        };
        let finish = |s: CMatrix| if kraus { self.thermal_half_step(&s) } else { s };
        if self.params.chi == 0.0 {
            return Ok(StepOutcome {
                state: finish(state),
                current: f64::NAN,
                renormalization,
            });
        }
        let current = self.current_from_record(record);
        let state = if self.params.g == 0.0 {
            state
        } else {
            self.feedback_apply(&state, current)
        };
        let state = finish(state);
        let purity: f64 = state.iter().map(|z| z.norm_sqr()).sum();
        if purity > 1.0 + PURITY_SLACK {
            return Err(Error::StepSize(format!(
                "conditioned purity {purity:.12} exceeds 1; reduce dt"
            )));
        }
        Ok(StepOutcome {
            state,
            current,
            renormalization,
        })
    }
}

/// Band propagators exp(L_k dt), with L_k the action of `gen` on the band
/// ρ[n + k, n].
fn thermal_bands(gen: &Generator, d: usize, dt: f64) -> Vec<DMatrix<f64>> {
    (0..d)
        .map(|k| {
            let m = d - k;
            let mut l = DMatrix::<f64>::zeros(m, m);
            for s in 0..m {
                let mut unit = CMatrix::zeros(d, d);
                unit[(s + k, s)] = c(1.0);
                let image = gen.apply(&unit);
                for r in 0..m {
                    l[(r, s)] = image[(r + k, r)].re;
                }
            }
            (l * dt).exp()
        })
        .collect()
}

/// J = −2 sin φ ⟨X⟩_c + √(κ/(ηχ²)) ξ, in units where the signal is
/// dimensionless. Infinite noise (χ = 0) gives NaN.
pub fn photocurrent_value(p: &ModelParams, mean_x: f64, xi: f64) -> f64 {
    let (sin_phi, _) = phase_trig(p.phi);
    let noise = if xi == 0.0 {
        0.0
    } else {
        (p.kappa / (p.eta * p.chi * p.chi)).sqrt() * xi
    };
    -2.0 * sin_phi * mean_x + noise
}

/// J for a conditioned state.
pub fn photocurrent(rho_c: &DensityMatrix, p: &ModelParams, xi: f64) -> Result<f64> {
    let x = crate::hilbert::quadrature(rho_c.dim(), 0.0)?;
    Ok(photocurrent_value(p, rho_c.expect(&x).re, xi))
}

/// Σₖ θᵏ/k! ad_Bᵏ(ρ) until the terms stop contributing.
pub(crate) fn feedback_series(b: &Operator, rho: &CMatrix, theta: f64) -> CMatrix {
    let mut out = rho.clone();
    if theta == 0.0 {
        return out;
    }
    let scale = max_abs(rho);
    let mut term = rho.clone();
    for k in 1..200 {
        let mut next = CMatrix::zeros(rho.nrows(), rho.ncols());
        b.commutator_acc(&term, c(theta / k as f64), &mut next);
        out += &next;
        let size = max_abs(&next);
        term = next;
        if size <= 1e-17 * scale {
            break;
        }
    }
    out
}

/// One Itô–Euler conditioned update for the innovation `dw`.
pub fn sme_step(rho_c: &DensityMatrix, p: &ModelParams, dw: f64, dt: f64) -> Result<SmeOutcome> {
    Unraveling::with_scheme(*p, rho_c.dim(), dt, Scheme::EulerMaruyama)?
        .sme_step(rho_c.matrix(), StepNoise::Innovation(dw))
}

pub fn feedback_apply(rho_c: &DensityMatrix, current: f64, p: &ModelParams, dt: f64) -> Result<CMatrix> {
    let ladder = Ladder::new(rho_c.dim())?;
    Ok(feedback_series(&ladder.drive, rho_c.matrix(), 0.5 * p.g * current * dt))
}

/// Conditioned moments recorded along a trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CondMoments {
    /// ⟨X⟩_c
    pub x: f64,
    /// ⟨X²⟩_c
    pub x2: f64,
    /// ⟨a†a⟩_c
    pub n: f64,
    /// ⟨a²⟩_c
    pub aa: Complex64,
}

impl CondMoments {
    pub fn of(l: &Ladder, rho: &CMatrix) -> Self {
        let m = moments_of(rho);
        Self {
            x: l.x.expect(rho).re,
            x2: l.x2.expect(rho).re,
            n: m.mean_n,
            aa: m.mean_aa,
        }
    }

    /// ⟨X²⟩_c − ⟨X⟩_c².
    pub fn var_x(&self) -> f64 {
        self.x2 - self.x * self.x
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StochOptions {
    pub t_final: f64,
    pub dt: f64,
    /// Record points after t = 0 (t = 0 is always recorded).
    pub checkpoints: usize,
    pub scheme: Scheme,
}

impl StochOptions {
    pub fn new(t_final: f64, dt: f64, checkpoints: usize) -> Self {
        Self {
            t_final,
            dt,
            checkpoints,
            scheme: Scheme::default(),
        }
    }
}

/// Seed material for one trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TrajectorySeed {
    pub base: u64,
    pub index: u64,
}

impl TrajectorySeed {
    /// Standard normal for `step`, independent of how many draws earlier
    /// steps consumed.
    pub fn normal(&self, rng: &mut ChaCha8Rng, step: usize) -> f64 {
        self.noise(rng, step).0
    }

    /// The standard normal of [`TrajectorySeed::normal`] and a uniform on
    /// [0, 1) drawn after it from the same block.
    pub fn noise(&self, rng: &mut ChaCha8Rng, step: usize) -> (f64, f64) {
        rng.set_stream(self.index);
        rng.set_word_pos(step as u128 * WORDS_PER_STEP);
        let xi = rng.sample(StandardNormal);
        (xi, rng.gen::<f64>())
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.base)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub seed: TrajectorySeed,
    pub dim: usize,
    pub dt: f64,
    pub times: Vec<f64>,
    pub cond_moments: Vec<CondMoments>,
    /// Scaled current for every step; empty when χ = 0.
    pub current: Vec<f64>,
    pub max_renormalization: f64,
    pub final_state: DensityMatrix,
}

/// Integrates one conditioned trajectory from `rho0`.
pub fn run_trajectory(
    p: &ModelParams,
    rho0: &DensityMatrix,
    opts: &StochOptions,
    seed: TrajectorySeed,
) -> Result<Trajectory> {
    let unr = Unraveling::with_scheme(*p, rho0.dim(), opts.dt, opts.scheme)?;
    run_with(&unr, rho0, opts, seed)
}

fn run_with(unr: &Unraveling, rho0: &DensityMatrix, opts: &StochOptions, seed: TrajectorySeed) -> Result<Trajectory> {
    let n_steps = step_count(opts.t_final, opts.dt)?;
    let marks = checkpoint_steps(n_steps, opts.checkpoints);
    let mut rng = seed.rng();
    let mut rho = rho0.matrix().clone();
    let mut times = vec![0.0];
    let mut cond = vec![CondMoments::of(&unr.ladder, &rho)];
    let measured = unr.params.chi != 0.0;
    let mut current = Vec::with_capacity(if measured { n_steps } else { 0 });
    let mut max_renorm: f64 = 0.0;
    let mut next_mark = 0;
    for step in 1..=n_steps {
        let noise = if measured {
            let (xi, u) = seed.noise(&mut rng, step);
            StepNoise::Sampled { xi, u }
        } else {
            StepNoise::Innovation(0.0)
        };
        let abort = |e| Error::Trajectory {
            step,
            source: Box::new(e),
        };
        let out = unr.step(&rho, noise).map_err(abort)?;
        rho = out.state;
        unr.policy.check(&rho).map_err(abort)?;
        max_renorm = max_renorm.max(out.renormalization);
        if measured {
            current.push(out.current);
        }
        if next_mark < marks.len() && marks[next_mark] == step {
            next_mark += 1;
            times.push(step as f64 * opts.dt);
            cond.push(CondMoments::of(&unr.ladder, &rho));
        }
    }
    Ok(Trajectory {
        seed,
        dim: unr.dim(),
        dt: opts.dt,
        times,
        cond_moments: cond,
        current,
        max_renormalization: max_renorm,
        final_state: DensityMatrix::from_matrix_unchecked(rho),
    })
}

/// Mean and standard error of one recorded quantity over the ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub mean: Vec<f64>,
    /// NaN when the ensemble has a single member.
    pub stderr: Vec<f64>,
}

impl Series {
    fn from_samples(samples: &[Vec<f64>]) -> Self {
        let n = samples.len();
        let len = samples[0].len();
        let mut mean = vec![0.0; len];
        for s in samples {
            for (m, v) in mean.iter_mut().zip(s) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let stderr = if n < 2 {
            vec![f64::NAN; len]
        } else {
            let mut ss = vec![0.0; len];
            for s in samples {
                for ((acc, v), m) in ss.iter_mut().zip(s).zip(&mean) {
                    *acc += (v - m) * (v - m);
                }
            }
            ss.iter().map(|v| (v / (n as f64 - 1.0) / n as f64).sqrt()).collect()
        };
        Self { mean, stderr }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleStats {
    pub n_traj: usize,
    /// Dimension the ensemble ran at.
    pub dim: usize,
    pub times: Vec<f64>,
    pub x: Series,
    pub x2: Series,
    pub n: Series,
    pub aa_re: Series,
    pub aa_im: Series,
    /// Conditioned variance ⟨X²⟩_c − ⟨X⟩_c².
    pub cond_var_x: Series,
    /// False when n_traj = 1 and standard errors are undefined.
    pub stderr_defined: bool,
}

impl EnsembleStats {
    pub fn from_trajectories(trajs: &[Trajectory]) -> Result<Self> {
        let first = trajs
            .first()
            .ok_or_else(|| Error::Domain("ensemble needs at least one trajectory".into()))?;
        let pick = |f: &dyn Fn(&CondMoments) -> f64| -> Vec<Vec<f64>> {
            trajs.iter().map(|t| t.cond_moments.iter().map(f).collect()).collect()
        };
        Ok(Self {
            n_traj: trajs.len(),
            dim: trajs.iter().map(|t| t.dim).max().unwrap_or(first.dim),
            times: first.times.clone(),
            x: Series::from_samples(&pick(&|m| m.x)),
            x2: Series::from_samples(&pick(&|m| m.x2)),
            n: Series::from_samples(&pick(&|m| m.n)),
            aa_re: Series::from_samples(&pick(&|m| m.aa.re)),
            aa_im: Series::from_samples(&pick(&|m| m.aa.im)),
            cond_var_x: Series::from_samples(&pick(&|m| m.var_x())),
            stderr_defined: trajs.len() > 1,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub trajectories: Vec<Trajectory>,
    pub stats: EnsembleStats,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnsembleOptions {
    pub n_traj: usize,
    pub base_seed: u64,
    pub stoch: StochOptions,
    /// Largest dimension the ensemble retry may reach.
    pub max_dim: usize,
    pub exec: Exec,
}

/// Runs `n_traj` trajectories from `rho0`, seeded by (base_seed, index).
/// If any member overflows the truncation, the whole ensemble is rerun at
/// one and a half times the dimension, up to `max_dim`. Rerunning only the
/// members that overflowed would swap the high-occupation paths for fresh
/// ones (the X grid changes with the dimension, so the same noise gives a
/// different path) and bias the mean downward.
pub fn ensemble(p: &ModelParams, rho0: &DensityMatrix, opts: &EnsembleOptions) -> Result<Ensemble> {
    if opts.n_traj == 0 {
        return Err(Error::Domain("n_traj must be >= 1".into()));
    }
    if opts.stoch.t_final > 10.0 / p.gamma && !is_stable(p) {
        log::warn!("long unstable run: moments will grow without bound");
    }
    let mut d = rho0.dim();
    loop {
        let next = d + d.div_ceil(2);
        let unr = Unraveling::with_scheme(*p, d, opts.stoch.dt, opts.stoch.scheme)?;
        let start = rho0.embed(d)?;
        let overflowed = AtomicBool::new(false);
        let runs = opts.exec.map_range(opts.n_traj, |i| {
            if overflowed.load(Ordering::Relaxed) {
                return None;
            }
            let seed = TrajectorySeed {
                base: opts.base_seed,
                index: i as u64,
            };
            let result = run_with(&unr, &start, &opts.stoch, seed);
            if let Err(Error::Trajectory { step, source }) = &result {
                if matches!(**source, Error::Truncation { .. }) && next <= opts.max_dim {
                    log::warn!("trajectory {i} overflowed dim {d} at step {step}");
                    overflowed.store(true, Ordering::Relaxed);
                    return None;
                }
            }
            Some(result)
        });
        if overflowed.into_inner() {
            log::warn!("rerunning the ensemble at dim {next}");
            d = next;
            continue;
        }
        let trajectories = runs
            .into_iter()
            .map(|r| r.expect("no member skipped without an overflow"))
            .collect::<Result<Vec<_>>>()?;
        let stats = EnsembleStats::from_trajectories(&trajectories)?;
        return Ok(Ensemble { trajectories, stats });
    }
}

/// One comparison of an ensemble mean with the deterministic value.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyPoint {
    pub quantity: &'static str,
    pub time: f64,
    pub deterministic: f64,
    pub mean: f64,
    pub stderr: f64,
}

impl ConsistencyPoint {
    /// |mean − deterministic| / stderr.
    pub fn z(&self) -> f64 {
        (self.mean - self.deterministic).abs() / self.stderr
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyReport {
    pub points: Vec<ConsistencyPoint>,
    pub sigmas: f64,
}

impl ConsistencyReport {
    pub fn passed(&self) -> bool {
        self.points.iter().all(|p| p.z() <= self.sigmas)
    }

    pub fn worst(&self) -> Option<&ConsistencyPoint> {
        self.points.iter().max_by(|a, b| a.z().total_cmp(&b.z()))
    }
}

/// Compares ⟨a†a⟩, Re⟨a²⟩ and Im⟨a²⟩ at every deterministic checkpoint
/// with the ensemble entry at the same time. Entries that agree to roundoff
/// are left out: where a moment vanishes by symmetry its standard error is
/// roundoff too and the ratio means nothing.
pub fn compare_with_deterministic(
    stats: &EnsembleStats,
    det: &DetTrajectory,
    sigmas: f64,
) -> Result<ConsistencyReport> {
    if !stats.stderr_defined {
        return Err(Error::Domain("standard errors need at least two trajectories".into()));
    }
    let mut points = Vec::new();
    for cp in &det.checkpoints {
        let k = stats
            .times
            .iter()
            .position(|t| (t - cp.time).abs() <= 1e-9 * cp.time.max(1.0))
            .ok_or_else(|| Error::Domain(format!("no ensemble record at t = {}", cp.time)))?;
        let entries = [
            ("n", cp.moments.mean_n, &stats.n),
            ("aa_re", cp.moments.mean_aa.re, &stats.aa_re),
            ("aa_im", cp.moments.mean_aa.im, &stats.aa_im),
        ];
        for (quantity, deterministic, series) in entries {
            if (series.mean[k] - deterministic).abs() <= ROUNDOFF_AGREEMENT {
                continue;
            }
            points.push(ConsistencyPoint {
                quantity,
                time: cp.time,
                deterministic,
                mean: series.mean[k],
                stderr: series.stderr[k],
            });
        }
    }
    Ok(ConsistencyReport { points, sigmas })
}

/// Ensemble moments at one record time, with the deterministic moments
/// when the reference has a checkpoint there.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SummaryRow {
    pub time: f64,
    pub n: (f64, f64),
    pub aa_re: (f64, f64),
    pub aa_im: (f64, f64),
    /// Mean and standard error of the conditioned X variance.
    pub cond_var_x: (f64, f64),
    pub deterministic: Option<Moments>,
}

/// (mean, standard error) rows for every record time of `stats`.
pub fn summarize(stats: &EnsembleStats, det: Option<&DetTrajectory>) -> Vec<SummaryRow> {
    let at = |s: &Series, k: usize| (s.mean[k], s.stderr[k]);
    stats
        .times
        .iter()
        .enumerate()
        .map(|(k, &time)| SummaryRow {
            time,
            n: at(&stats.n, k),
            aa_re: at(&stats.aa_re, k),
            aa_im: at(&stats.aa_im, k),
            cond_var_x: at(&stats.cond_var_x, k),
            deterministic: det.and_then(|d| {
                if time == 0.0 {
                    return Some(d.initial);
                }
                d.checkpoints
                    .iter()
                    .find(|c| (c.time - time).abs() <= 1e-9 * time.max(1.0))
                    .map(|c| c.moments)
            }),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hilbert::hermiticity_error;

    fn max_abs(m: &CMatrix) -> f64 {
        m.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    #[test]
    fn thermal_bands_match_series() {
        let p = ModelParams::squashing_reference().with_chi(0.0).with_g(0.0);
        let p = ModelParams { gamma: 0.3, ..p };
        let d = 12;
        let unr = Unraveling::new(p, d, 0.02).unwrap();
        let gen = Generator::new(RhsSpec::thermal(p.gamma, p.nbar).unwrap(), d).unwrap();
        let rho = CMatrix::from_fn(d, d, |i, j| Complex64::new((i * 7 + j * 3) as f64 % 5.0, i as f64 - j as f64));
        let mut want = rho.clone();
        let mut term = rho.clone();
        for k in 1..40 {
            term = gen.apply(&term) * c(0.01 / k as f64);
            want += &term;
        }
        assert!(max_abs(&(unr.thermal_half_step(&rho) - want)) < 1e-13);
    }

    #[test]
    fn trivial_step_without_coupling() {
        let p = ModelParams::squashing_reference().with_chi(0.0).with_g(0.0);
        let th = DensityMatrix::thermal(20, p.nbar).unwrap();
        for (scheme, tol) in [(Scheme::EulerMaruyama, 1e-14), (Scheme::Kraus, 1e-13)] {
            let unr = Unraveling::with_scheme(p, 20, 0.1, scheme).unwrap();
            let out = unr.sme_step(th.matrix(), StepNoise::Innovation(0.0)).unwrap();
            assert!(max_abs(&(out.state - th.matrix())) < tol);
        }
    }

    #[test]
    fn photocurrent_examples() {
        let p = ModelParams::squashing_reference();
        assert_eq!(photocurrent_value(&p, 0.0, 0.0), 0.0);
        assert!((photocurrent_value(&p, 0.3, 0.0) - 0.6).abs() < 1e-15);
        let noise_var = p.kappa / (p.eta * p.chi * p.chi);
        assert!((photocurrent_value(&p, 0.0, 1.0).powi(2) - noise_var).abs() < 1e-12);
    }

    #[test]
    fn feedback_series_is_unitary_conjugation() {
        let p = ModelParams::squashing_reference();
        let d = 12;
        let rho = DensityMatrix::thermal(d, 0.5).unwrap();
        let l = Ladder::new(d).unwrap();
        let theta = 0.5 * p.g * 3.0 * 0.1;
        let out = feedback_series(&l.drive, rho.matrix(), theta);
        // U = exp(θ B) from the eigen-decomposition of the Hermitian iB
        let ib = l.drive.to_dense() * Complex64::i();
        let eig = ib.clone().symmetric_eigen();
        let phases = eig.eigenvalues.map(|e| Complex64::from_polar(1.0, -theta * e));
        let u = &eig.eigenvectors * CMatrix::from_diagonal(&phases) * eig.eigenvectors.adjoint();
        let want = &u * rho.matrix() * u.adjoint();
        assert!(max_abs(&(out.clone() - want)) < 1e-13);
        assert!(hermiticity_error(&out) < 1e-15);
        assert!((trace(&out) - c(1.0)).norm() < 1e-14);
        assert!(max_abs(&(feedback_series(&l.drive, rho.matrix(), 0.0) - rho.matrix())) == 0.0);
    }

    #[test]
    fn feedback_in_x_basis_matches_series() {
        let p = ModelParams::squashing_reference();
        let d = 16;
        let unr = Unraveling::new(p, d, 0.1).unwrap();
        let l = Ladder::new(d).unwrap();
        // a displaced, rotated state has complex coherences
        let mut rho = DensityMatrix::thermal(d, 0.3).unwrap().matrix().clone();
        rho = feedback_series(&l.drive, &rho, 0.4);
        let u = l.x.to_dense() * Complex64::new(0.0, 0.3);
        let eig = (u.clone() * Complex64::i()).symmetric_eigen();
        let phases = eig.eigenvalues.map(|e| Complex64::from_polar(1.0, -e));
        let rot = &eig.eigenvectors * CMatrix::from_diagonal(&phases) * eig.eigenvectors.adjoint();
        rho = &rot * rho * rot.adjoint();
        for current in [-7.0, 0.5, 12.0] {
            let fast = unr.feedback_apply(&rho, current);
            let slow = feedback_series(&l.drive, &rho, 0.5 * p.g * current * 0.1);
            assert!(max_abs(&(fast - slow)) < 1e-13);
        }
    }

    #[test]
    fn step_size_rules() {
        let p = ModelParams::squashing_reference();
        assert!(matches!(Unraveling::new(p, 20, 0.5), Err(Error::StepSize(_))));
        assert!(Unraveling::new(p, 20, 0.1).is_ok());
        assert!(Unraveling::with_scheme(p, 100, 0.1, Scheme::Kraus).is_ok());
        assert!(matches!(
            Unraveling::with_scheme(p, 100, 0.1, Scheme::EulerMaruyama),
            Err(Error::StepSize(_))
        ));
        let bad = p.with_chi(0.0);
        assert!(matches!(Unraveling::new(bad, 20, 0.1), Err(Error::Domain(_))));
    }

    #[test]
    fn noise_is_keyed_by_step() {
        let s = TrajectorySeed { base: 3, index: 7 };
        let mut r1 = s.rng();
        let mut r2 = s.rng();
        let a: Vec<f64> = (1..20).map(|k| s.normal(&mut r1, k)).collect();
        let b: Vec<f64> = (1..20).rev().map(|k| s.normal(&mut r2, k)).collect();
        let b: Vec<f64> = b.into_iter().rev().collect();
        assert_eq!(a, b);
        let other = TrajectorySeed { base: 3, index: 8 };
        assert_ne!(a[0], other.normal(&mut other.rng(), 1));
    }

    #[test]
    fn single_member_ensemble() {
        let p = ModelParams::squashing_reference();
        let rho0 = DensityMatrix::thermal(20, p.nbar).unwrap();
        let opts = EnsembleOptions {
            n_traj: 1,
            base_seed: 1,
            stoch: StochOptions::new(1.0, 0.1, 5),
            max_dim: 20,
            exec: Exec::Sequential,
        };
        let e = ensemble(&p, &rho0, &opts).unwrap();
        assert!(!e.stats.stderr_defined);
        assert!(e.stats.n.stderr.iter().all(|v| v.is_nan()));
        let t = &e.trajectories[0];
        let ns: Vec<f64> = t.cond_moments.iter().map(|m| m.n).collect();
        assert_eq!(e.stats.n.mean, ns);
        assert_eq!(t.current.len(), 10);
        assert_eq!(t.times.len(), 6);
    }
}

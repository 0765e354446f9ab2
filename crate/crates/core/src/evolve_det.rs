//! Deterministic master-equation evolution on the truncated number basis.

use nalgebra::{DMatrix, DVector, Matrix2, Matrix3, Vector3};
use num_complex::Complex64;

use crate::analytic::{is_stable, StationaryGaussian};
use crate::error::{Error, Result};
use crate::hilbert::{
    check_shape, hermiticity_error, moments_of, trace, CMatrix, DensityMatrix, Ladder, Moments, Operator,
    TruncationPolicy, TRACE_TOL,
};
use crate::params::{effective_bath, phase_trig, EffectiveBath, ModelParams};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

fn c(re: f64) -> Complex64 {
    Complex64::new(re, 0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RhsKind {
    /// Thermal damping only.
    Thermal,
    /// Thermal damping, QND back-action, feedback and feedback noise.
    GenericFeedback,
    /// The same dynamics written as a squeezed bath plus a parametric term.
    FinalFeedback,
}

/// A right-hand side together with the parameters it is evaluated at.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RhsSpec {
    pub kind: RhsKind,
    pub params: ModelParams,
}

impl RhsSpec {
    pub fn new(kind: RhsKind, params: ModelParams) -> Result<Self> {
        params.validate()?;
        match kind {
            RhsKind::Thermal => {}
            RhsKind::GenericFeedback => {
                if params.chi == 0.0 {
                    return Err(Error::Domain(
                        "generic feedback needs chi > 0 (the feedback noise divides by chi^2)".into(),
                    ));
                }
            }
            RhsKind::FinalFeedback => {
                if !is_stable(&params) {
                    return Err(Error::Unstable(format!(
                        "2 g sin(phi) = {:.6e} is not below gamma = {:.6e}",
                        2.0 * params.feedback_drive(),
                        params.gamma
                    )));
                }
                effective_bath(&params)?.ensure_physical()?;
            }
        }
        Ok(Self { kind, params })
    }

    pub fn thermal(gamma: f64, nbar: f64) -> Result<Self> {
        let params = ModelParams {
            gamma,
            nbar,
            chi: 0.0,
            g: 0.0,
            ..ModelParams::squashing_reference()
        };
        Self::new(RhsKind::Thermal, params)
    }

    /// The fastest rate named in the step-size rule.
    pub fn fastest_rate(&self) -> Result<f64> {
        let p = &self.params;
        let thermal = p.gamma * (p.nbar + 1.0);
        Ok(match self.kind {
            RhsKind::Thermal => thermal,
            RhsKind::GenericFeedback | RhsKind::FinalFeedback => {
                let bath = effective_bath(p)?;
                let bath_rate = bath.damping.abs() * (bath.occupancy.abs() + 1.0);
                bath_rate.max(p.measurement_rate()).max(thermal).max(p.g.abs())
            }
        })
    }

    /// Largest step allowed by `dt ≤ 0.1 / fastest rate`.
    pub fn max_dt(&self) -> Result<f64> {
        Ok(0.1 / self.fastest_rate()?)
    }

    /// Upper bound on the spectral radius of the truncated generator, from
    /// operator norms (‖a‖ = √(d−1)).
    pub fn norm_bound(&self, d: usize) -> Result<f64> {
        let p = &self.params;
        let n = (d - 1) as f64;
        let thermal = |gamma: f64, nbar: f64| gamma.abs() * ((nbar.abs() + 1.0) * 2.0 * n + nbar.abs() * 2.0 * d as f64);
        Ok(match self.kind {
            RhsKind::Thermal => thermal(p.gamma, p.nbar),
            RhsKind::GenericFeedback => {
                let fb_noise = p.kappa / (2.0 * p.eta * p.chi * p.chi);
                thermal(p.gamma, p.nbar)
                    + 2.0 * p.measurement_rate() * n
                    + 4.0 * p.g.abs() * n
                    + fb_noise * p.g * p.g * 4.0 * n
            }
            RhsKind::FinalFeedback => {
                let b = effective_bath(p)?;
                thermal(b.damping, b.occupancy)
                    + 4.0 * b.damping.abs() * b.squeezing.norm() * n
                    + p.feedback_drive().abs() * n
            }
        })
    }

    /// Slowest nonzero decay rate of the generator; sets the steady-state
    /// integration horizon.
    pub fn slowest_rate(&self) -> f64 {
        let p = &self.params;
        match self.kind {
            RhsKind::Thermal => 0.5 * p.gamma,
            _ => 0.5 * p.gamma.min(p.gamma - 2.0 * p.feedback_drive()),
        }
    }
}

/// A right-hand side bound to one truncation dimension.
#[derive(Debug, Clone)]
pub struct Generator {
    spec: RhsSpec,
    ladder: Ladder,
    bath: Option<EffectiveBath>,
}

impl Generator {
    pub fn new(spec: RhsSpec, d: usize) -> Result<Self> {
        let bath = match spec.kind {
            RhsKind::FinalFeedback => Some(effective_bath(&spec.params)?),
            _ => None,
        };
        Ok(Self {
            spec,
            ladder: Ladder::new(d)?,
            bath,
        })
    }

    pub fn dim(&self) -> usize {
        self.ladder.dim
    }

    pub fn spec(&self) -> &RhsSpec {
        &self.spec
    }

    pub fn apply(&self, rho: &CMatrix) -> CMatrix {
        let mut out = CMatrix::zeros(self.dim(), self.dim());
        self.apply_acc(rho, &mut out);
        out
    }

    fn apply_acc(&self, rho: &CMatrix, out: &mut CMatrix) {
        let l = &self.ladder;
        let p = &self.spec.params;
        match self.spec.kind {
            RhsKind::Thermal => thermal_acc(l, rho, p.gamma, p.nbar, out),
            RhsKind::GenericFeedback => generic_acc(l, rho, p, out),
            RhsKind::FinalFeedback => final_acc(l, rho, p, self.bath.as_ref().unwrap(), out),
        }
    }
}

fn thermal_acc(l: &Ladder, rho: &CMatrix, gamma: f64, nbar: f64, out: &mut CMatrix) {
    let down = 0.5 * gamma * (nbar + 1.0);
    let up = 0.5 * gamma * nbar;
    if down != 0.0 {
        Operator::sandwich_acc(&l.a, rho, &l.ad, c(2.0 * down), out);
        l.n.anticommutator_acc(rho, c(-down), out);
    }
    if up != 0.0 {
        Operator::sandwich_acc(&l.ad, rho, &l.a, c(2.0 * up), out);
        l.n_up.anticommutator_acc(rho, c(-up), out);
    }
}

/// −(χ²/2κ)[X, [X, ρ]].
fn qnd_acc(l: &Ladder, rho: &CMatrix, rate: f64, out: &mut CMatrix) {
    if rate == 0.0 {
        return;
    }
    let k = -0.5 * rate;
    l.x2.anticommutator_acc(rho, c(k), out);
    Operator::sandwich_acc(&l.x, rho, &l.x, c(-2.0 * k), out);
}

/// i e^{iφ} ρ X − i e^{−iφ} X ρ.
fn measurement_term(l: &Ladder, rho: &CMatrix, phi: f64) -> CMatrix {
    let (s, co) = phase_trig(phi);
    let e = Complex64::new(co, s);
    let i = Complex64::i();
    let mut out = CMatrix::zeros(l.dim, l.dim);
    l.x.right_mul_acc(rho, i * e, &mut out);
    l.x.left_mul_acc(rho, -i * e.conj(), &mut out);
    out
}

/// `out += scale · (g/2)[a − a†, m]`.
fn feedback_acc(l: &Ladder, m: &CMatrix, g: f64, scale: f64, out: &mut CMatrix) {
    l.drive.commutator_acc(m, c(0.5 * g * scale), out);
}

fn generic_acc(l: &Ladder, rho: &CMatrix, p: &ModelParams, out: &mut CMatrix) {
    thermal_acc(l, rho, p.gamma, p.nbar, out);
    qnd_acc(l, rho, p.measurement_rate(), out);
    if p.g != 0.0 {
        let y = measurement_term(l, rho, p.phi);
        feedback_acc(l, &y, p.g, 1.0, out);
        let mut k1 = CMatrix::zeros(l.dim, l.dim);
        feedback_acc(l, rho, p.g, 1.0, &mut k1);
        feedback_acc(l, &k1, p.g, p.kappa / (2.0 * p.eta * p.chi * p.chi), out);
    }
}

fn final_acc(l: &Ladder, rho: &CMatrix, p: &ModelParams, b: &EffectiveBath, out: &mut CMatrix) {
    thermal_acc(l, rho, b.damping, b.occupancy, out);
    let m = b.squeezing * (-0.5 * b.damping);
    if m != ZERO {
        Operator::sandwich_acc(&l.ad, rho, &l.ad, 2.0 * m, out);
        l.ad2.anticommutator_acc(rho, -m, out);
        let mc = m.conj();
        Operator::sandwich_acc(&l.a, rho, &l.a, 2.0 * mc, out);
        l.a2.anticommutator_acc(rho, -mc, out);
    }
    let s = p.feedback_drive();
    if s != 0.0 {
        let k = c(-0.25 * s);
        l.a2.commutator_acc(rho, k, out);
        l.ad2.commutator_acc(rho, -k, out);
    }
}

/// Thermal Liouvillian with rates γ(n̄+1) down and γn̄ up.
pub fn rhs_thermal(rho: &CMatrix, gamma: f64, nbar: f64) -> Result<CMatrix> {
    if !(gamma >= 0.0) || !(nbar >= 0.0) {
        return Err(Error::Domain(format!("rates must be >= 0, got gamma={gamma}, nbar={nbar}")));
    }
    let l = Ladder::new(rho.nrows())?;
    check_shape(rho, l.dim)?;
    let mut out = CMatrix::zeros(l.dim, l.dim);
    thermal_acc(&l, rho, gamma, nbar, &mut out);
    Ok(out)
}

/// Thermal part, QND double commutator, feedback `K(ie^{iφ}ρX − ie^{−iφ}Xρ)`
/// and feedback noise `K²ρ κ/(2ηχ²)` with `Kρ = (g/2)[a − a†, ρ]`.
pub fn rhs_generic_feedback(rho: &CMatrix, p: &ModelParams) -> Result<CMatrix> {
    let spec = RhsSpec::new(RhsKind::GenericFeedback, *p)?;
    check_shape(rho, rho.nrows())?;
    Ok(Generator::new(spec, rho.nrows())?.apply(rho))
}

/// Squeezed bath (Γ, N, M) plus the parametric term −(g/4) sin φ [a² − a†², ρ].
/// The bath must be physical; stability is not required for a single evaluation.
pub fn rhs_final_feedback(rho: &CMatrix, p: &ModelParams) -> Result<CMatrix> {
    p.validate()?;
    let bath = effective_bath(p)?;
    bath.ensure_physical()?;
    check_shape(rho, rho.nrows())?;
    let l = Ladder::new(rho.nrows())?;
    let mut out = CMatrix::zeros(l.dim, l.dim);
    final_acc(&l, rho, p, &bath, &mut out);
    Ok(out)
}

/// The double-commutator term alone, −(χ²/2κ)[X, [X, ρ]].
pub fn rhs_qnd(rho: &CMatrix, p: &ModelParams) -> Result<CMatrix> {
    let l = Ladder::new(rho.nrows())?;
    check_shape(rho, l.dim)?;
    let mut out = CMatrix::zeros(l.dim, l.dim);
    qnd_acc(&l, rho, p.measurement_rate(), &mut out);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Method {
    #[default]
    Rk4,
    /// Explicit midpoint; second order, used as a cross-check.
    Midpoint,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvolveOptions {
    pub t_final: f64,
    pub dt: f64,
    pub method: Method,
    /// Number of evenly spaced checkpoints after t = 0.
    pub checkpoints: usize,
    pub policy: TruncationPolicy,
}

impl EvolveOptions {
    pub fn new(t_final: f64, dt: f64) -> Self {
        Self {
            t_final,
            dt,
            method: Method::Rk4,
            checkpoints: 10,
            policy: TruncationPolicy::default(),
        }
    }

    pub fn with_checkpoints(self, checkpoints: usize) -> Self {
        Self { checkpoints, ..self }
    }
}

/// Number of steps for `t_final / dt`, which must be a whole number.
pub fn step_count(t_final: f64, dt: f64) -> Result<usize> {
    if !(dt > 0.0) || !(t_final >= 0.0) || !dt.is_finite() || !t_final.is_finite() {
        return Err(Error::Domain(format!("need dt > 0 and t_final >= 0, got dt={dt}, t_final={t_final}")));
    }
    let ratio = t_final / dt;
    let n = ratio.round();
    if (ratio - n).abs() > 1e-9 * ratio.max(1.0) {
        return Err(Error::Domain(format!("t_final = {t_final} is not a multiple of dt = {dt}")));
    }
    Ok(n as usize)
}

/// Step indices at which checkpoints are taken; always includes the last step.
pub fn checkpoint_steps(n_steps: usize, checkpoints: usize) -> Vec<usize> {
    if n_steps == 0 || checkpoints == 0 {
        return Vec::new();
    }
    let k = checkpoints.min(n_steps);
    let mut steps: Vec<usize> = (1..=k).map(|i| (i * n_steps).div_ceil(k)).collect();
    steps.dedup();
    steps
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub time: f64,
    pub step: usize,
    pub moments: Moments,
    pub min_eigenvalue: f64,
    pub tail: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetTrajectory {
    pub dim: usize,
    pub initial: Moments,
    pub checkpoints: Vec<Checkpoint>,
    pub final_state: DensityMatrix,
    /// Largest |Tr ρ − 1| change over a single step.
    pub max_trace_drift: f64,
    /// Largest hermiticity deviation seen after any step.
    pub max_hermiticity_error: f64,
}

impl DetTrajectory {
    pub fn times(&self) -> Vec<f64> {
        self.checkpoints.iter().map(|c| c.time).collect()
    }
}

/// Fixed-step integration of `rho0` under `spec`.
pub fn evolve(rho0: &DensityMatrix, spec: &RhsSpec, opts: &EvolveOptions) -> Result<DetTrajectory> {
    let d = rho0.dim();
    let n_steps = step_count(opts.t_final, opts.dt)?;
    let max_dt = spec.max_dt()?;
    if opts.dt > max_dt * (1.0 + 1e-12) {
        return Err(Error::StepSize(format!(
            "dt = {} exceeds 0.1 / fastest rate = {max_dt:.6e}",
            opts.dt
        )));
    }
    let bound = spec.norm_bound(d)?;
    // real-axis stability limit of RK4 is 2.785, of the midpoint rule 2
    let limit = match opts.method {
        Method::Rk4 => 2.78,
        Method::Midpoint => 1.0,
    };
    if opts.dt * bound > limit {
        return Err(Error::StepSize(format!(
            "dt = {} exceeds the explicit stability limit {:.6e} of the truncated generator at dim {d}",
            opts.dt,
            limit / bound
        )));
    }
    let gen = Generator::new(*spec, d)?;
    let marks = checkpoint_steps(n_steps, opts.checkpoints);
    let mut next_mark = 0;
    let mut rho = rho0.matrix().clone();
    let mut checkpoints = Vec::with_capacity(marks.len());
    let mut max_trace_drift: f64 = 0.0;
    let mut max_herm: f64 = 0.0;
    let mut tr_prev = trace(&rho);
    let abort = |step: usize, e: Error| Error::Trajectory {
        step,
        source: Box::new(e),
    };
    for step in 1..=n_steps {
        rho = match opts.method {
            Method::Rk4 => rk4_step(&gen, &rho, opts.dt),
            Method::Midpoint => midpoint_step(&gen, &rho, opts.dt),
        };
        let tr = trace(&rho);
        let drift = (tr - tr_prev).norm();
        tr_prev = tr;
        max_trace_drift = max_trace_drift.max(drift);
        if drift > TRACE_TOL || !drift.is_finite() {
            return Err(abort(
                step,
                Error::Convergence(format!("trace drifted by {drift:.3e} in one step")),
            ));
        }
        let herm = hermiticity_error(&rho);
        max_herm = max_herm.max(herm);
        if herm > crate::hilbert::HERMITICITY_TOL {
            return Err(abort(
                step,
                Error::Convergence(format!("hermiticity lost: deviation {herm:.3e}")),
            ));
        }
        let tail = opts.policy.check(&rho).map_err(|e| abort(step, e))?;
        if next_mark < marks.len() && marks[next_mark] == step {
            next_mark += 1;
            let state = DensityMatrix::from_matrix_unchecked(rho.clone());
            let min_eig = state.min_eigenvalue();
            if min_eig < -crate::hilbert::POSITIVITY_TOL {
                return Err(abort(
                    step,
                    Error::Convergence(format!("state lost positivity: eigenvalue {min_eig:.3e}")),
                ));
            }
            checkpoints.push(Checkpoint {
                time: step as f64 * opts.dt,
                step,
                moments: moments_of(&rho),
                min_eigenvalue: min_eig,
                tail,
            });
        }
    }
    Ok(DetTrajectory {
        dim: d,
        initial: moments_of(rho0.matrix()),
        checkpoints,
        final_state: DensityMatrix::from_matrix_unchecked(rho),
        max_trace_drift,
        max_hermiticity_error: max_herm,
    })
}

/// [`evolve`] that doubles the dimension (up to `max_dim`) and restarts when
/// population reaches the top of the basis.
pub fn evolve_with_retry(
    rho0: &DensityMatrix,
    spec: &RhsSpec,
    opts: &EvolveOptions,
    max_dim: usize,
) -> Result<DetTrajectory> {
    let mut d = rho0.dim();
    loop {
        match evolve(&rho0.embed(d)?, spec, opts) {
            Err(Error::Trajectory { source, .. }) if matches!(*source, Error::Truncation { .. }) && 2 * d <= max_dim => {
                log::warn!("truncation at dim {d}: {source}; retrying at dim {}", 2 * d);
                d *= 2;
            }
            other => return other,
        }
    }
}

/// `y + h k`.
fn axpy(y: &CMatrix, k: &CMatrix, h: f64) -> CMatrix {
    let mut out = y.clone();
    add_scaled(&mut out, k, h);
    out
}

fn add_scaled(out: &mut CMatrix, k: &CMatrix, h: f64) {
    for (o, v) in out.as_mut_slice().iter_mut().zip(k.as_slice()) {
        *o += v * h;
    }
}

fn rk4_step(gen: &Generator, rho: &CMatrix, dt: f64) -> CMatrix {
    let k1 = gen.apply(rho);
    let k2 = gen.apply(&axpy(rho, &k1, 0.5 * dt));
    let k3 = gen.apply(&axpy(rho, &k2, 0.5 * dt));
    let k4 = gen.apply(&axpy(rho, &k3, dt));
    let mut out = rho.clone();
    add_scaled(&mut out, &k1, dt / 6.0);
    add_scaled(&mut out, &k2, dt / 3.0);
    add_scaled(&mut out, &k3, dt / 3.0);
    add_scaled(&mut out, &k4, dt / 6.0);
    out
}

fn midpoint_step(gen: &Generator, rho: &CMatrix, dt: f64) -> CMatrix {
    let k1 = gen.apply(rho);
    let k2 = gen.apply(&axpy(rho, &k1, 0.5 * dt));
    axpy(rho, &k2, dt)
}

fn max_abs(m: &CMatrix) -> f64 {
    m.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SteadyMethod {
    /// Null-space solve when the even sector is small enough, else integration.
    #[default]
    Auto,
    NullSpace,
    Integrate,
    /// Both routes; they must agree to 10 × tol.
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SteadyOptions {
    pub dim: usize,
    pub tol: f64,
    pub method: SteadyMethod,
    /// Largest dimension the doubling retry may reach.
    pub max_dim: usize,
    pub policy: TruncationPolicy,
    /// Integration budget in units of the slowest relaxation time.
    pub max_relaxation_times: f64,
}

impl Default for SteadyOptions {
    fn default() -> Self {
        Self {
            dim: 30,
            tol: 1e-10,
            method: SteadyMethod::Auto,
            max_dim: 120,
            policy: TruncationPolicy::default(),
            max_relaxation_times: 60.0,
        }
    }
}

/// Largest even-sector size handed to the dense LU.
pub const NULL_SPACE_MAX_UNKNOWNS: usize = 2400;

#[derive(Debug, Clone, PartialEq)]
pub struct SteadyState {
    pub state: DensityMatrix,
    pub requested_dim: usize,
    pub dim: usize,
    /// max |rhs(ρ)| elementwise.
    pub residual: f64,
    pub tail: f64,
    pub method: SteadyMethod,
    /// Max elementwise difference between the two routes, when both ran.
    pub route_difference: Option<f64>,
}

impl SteadyState {
    pub fn moments(&self) -> Moments {
        moments_of(self.state.matrix())
    }
}

/// Stationary state of `spec`, doubling the dimension while the tail mass
/// exceeds the error threshold.
pub fn steady_state(spec: &RhsSpec, opts: &SteadyOptions) -> Result<SteadyState> {
    if spec.kind != RhsKind::Thermal && !is_stable(&spec.params) {
        return Err(Error::Unstable(format!(
            "2 g sin(phi) = {:.6e} is not below gamma = {:.6e}",
            2.0 * spec.params.feedback_drive(),
            spec.params.gamma
        )));
    }
    let mut d = opts.dim;
    loop {
        match steady_state_at(spec, d, opts) {
            Err(Error::Truncation { tail, .. }) if 2 * d <= opts.max_dim => {
                log::warn!("steady state at dim {d} has tail mass {tail:.3e}; retrying at dim {}", 2 * d);
                d *= 2;
            }
            Ok(mut s) => {
                s.requested_dim = opts.dim;
                return Ok(s);
            }
            Err(e) => return Err(e),
        }
    }
}

fn even_sector_size(d: usize) -> usize {
    d * d / 2 + (d % 2)
}

fn steady_state_at(spec: &RhsSpec, d: usize, opts: &SteadyOptions) -> Result<SteadyState> {
    let gen = Generator::new(*spec, d)?;
    let use_null = even_sector_size(d) <= NULL_SPACE_MAX_UNKNOWNS;
    let (rho, method, diff) = match opts.method {
        SteadyMethod::NullSpace => (null_space_solve(&gen)?, SteadyMethod::NullSpace, None),
        SteadyMethod::Integrate => (integrate_to_rest(&gen, opts)?, SteadyMethod::Integrate, None),
        SteadyMethod::Auto if use_null => (null_space_solve(&gen)?, SteadyMethod::NullSpace, None),
        SteadyMethod::Auto => (integrate_to_rest(&gen, opts)?, SteadyMethod::Integrate, None),
        SteadyMethod::Both => {
            let a = null_space_solve(&gen)?;
            let b = integrate_to_rest(&gen, opts)?;
            let diff = max_abs(&(&a - &b));
            if diff > 10.0 * opts.tol {
                return Err(Error::Convergence(format!(
                    "null-space and integrated steady states differ by {diff:.3e} (> 10 tol = {:.1e})",
                    10.0 * opts.tol
                )));
            }
            (a, SteadyMethod::Both, Some(diff))
        }
    };
    let tail = opts.policy.check(&rho)?;
    let residual = max_abs(&gen.apply(&rho));
    let state = DensityMatrix::new(rho)?;
    Ok(SteadyState {
        state,
        requested_dim: d,
        dim: d,
        residual,
        tail,
        method,
        route_difference: diff,
    })
}

/// Solves L(ρ) = 0 restricted to entries with m + n even, which the
/// generator never mixes with the odd ones. Unknowns are the real
/// coordinates of the Hermitian ρ (ρᵢᵢ, Re ρᵢⱼ, Im ρᵢⱼ for i < j), so the
/// system is real. The equation for ρ₀₀ is replaced by Tr ρ = 1.
fn null_space_solve(gen: &Generator) -> Result<CMatrix> {
    let d = gen.dim();
    // (row, col, imaginary part?)
    let mut coords: Vec<(usize, usize, bool)> = Vec::new();
    for j in 0..d {
        for i in (j % 2..=j).step_by(2) {
            coords.push((i, j, false));
            if i != j {
                coords.push((i, j, true));
            }
        }
    }
    let n = coords.len();
    let mut a = DMatrix::<f64>::zeros(n, n);
    let mut basis = CMatrix::zeros(d, d);
    let unit = |im: bool| if im { Complex64::i() } else { c(1.0) };
    for (col, &(i, j, im)) in coords.iter().enumerate() {
        basis[(i, j)] = unit(im);
        basis[(j, i)] = unit(im).conj();
        let image = gen.apply(&basis);
        basis[(i, j)] = ZERO;
        basis[(j, i)] = ZERO;
        for (row, &(r, s, rim)) in coords.iter().enumerate() {
            let v = image[(r, s)];
            a[(row, col)] = if rim { v.im } else { v.re };
        }
    }
    // coordinate 0 is ρ₀₀
    for (col, &(i, j, im)) in coords.iter().enumerate() {
        a[(0, col)] = if i == j && !im { 1.0 } else { 0.0 };
    }
    let mut b = DVector::<f64>::zeros(n);
    b[0] = 1.0;
    let x = a
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::Convergence("steady-state generator is singular".into()))?;
    let mut rho = CMatrix::zeros(d, d);
    for (k, &(i, j, im)) in coords.iter().enumerate() {
        rho[(i, j)] += unit(im) * x[k];
        if i != j {
            rho[(j, i)] += (unit(im) * x[k]).conj();
        }
    }
    Ok(rho)
}

/// RK4 from the thermal state until the residual is below `tol` times the
/// slowest rate, so the state itself is within about `tol` of rest.
fn integrate_to_rest(gen: &Generator, opts: &SteadyOptions) -> Result<CMatrix> {
    let spec = gen.spec();
    let d = gen.dim();
    let dt = spec.max_dt()?.min(2.5 / spec.norm_bound(d)?);
    let rate = spec.slowest_rate();
    let target = opts.tol * rate;
    let max_steps = (opts.max_relaxation_times / rate / dt).ceil() as usize;
    let mut rho = DensityMatrix::thermal(d, spec.params.nbar)?.into_matrix();
    let mut residual = f64::INFINITY;
    for step in 0..max_steps {
        if step % 16 == 0 {
            residual = max_abs(&gen.apply(&rho));
            if residual <= target {
                return Ok(rho);
            }
            if !residual.is_finite() {
                break;
            }
        }
        rho = rk4_step(gen, &rho, dt);
    }
    Err(Error::Convergence(format!(
        "integration did not come to rest within {} relaxation times: residual {residual:.3e} > {target:.3e}",
        opts.max_relaxation_times
    )))
}

/// Linear ODE `v̇ = A v + b` for v = (⟨a†a⟩, Re⟨a²⟩, Im⟨a²⟩) of a zero-mean
/// state, derived from the generic-feedback equation term by term.
pub fn moment_ode(p: &ModelParams) -> Result<(Matrix3<f64>, Vector3<f64>)> {
    p.validate()?;
    if p.chi == 0.0 && p.g != 0.0 {
        return Err(Error::Domain("chi = 0 with nonzero feedback gain".into()));
    }
    let (sin_phi, cos_phi) = phase_trig(p.phi);
    let s = p.g * sin_phi;
    let back_action = p.chi * p.chi / (4.0 * p.kappa);
    let fb_noise = if p.g == 0.0 {
        0.0
    } else {
        p.kappa * p.g * p.g / (4.0 * p.eta * p.chi * p.chi)
    };
    // thermal: −γζ + γn̄, −γμ
    // back-action: ζ̇ += χ²/4κ, μ̇ −= χ²/4κ
    // feedback drift: ζ̇ += (s/2)(1 + 2ζ + 2Re μ), μ̇ += s(μ + ζ + ½) + i(g/2)cos φ
    // feedback noise: ζ̇ += g²κ/4ηχ², μ̇ += g²κ/4ηχ²
    let a = Matrix3::new(
        -p.gamma + s, s, 0.0, //
        s, -p.gamma + s, 0.0, //
        0.0, 0.0, -p.gamma + s,
    );
    let b = Vector3::new(
        p.gamma * p.nbar + back_action + 0.5 * s + fb_noise,
        -back_action + 0.5 * s + fb_noise,
        0.5 * p.g * cos_phi,
    );
    Ok((a, b))
}

/// Stationary (ζ, μ) from the moment equations.
pub fn moment_oracle(p: &ModelParams) -> Result<StationaryGaussian> {
    if !is_stable(p) {
        return Err(Error::Unstable(format!(
            "2 g sin(phi) = {:.6e} is not below gamma = {:.6e}",
            2.0 * p.feedback_drive(),
            p.gamma
        )));
    }
    let (a, b) = moment_ode(p)?;
    let v = a
        .lu()
        .solve(&(-b))
        .ok_or_else(|| Error::SingularParameters("moment equations are singular".into()))?;
    Ok(StationaryGaussian {
        zeta: v[0],
        mu: Complex64::new(v[1], v[2]),
    })
}

/// Drift of (⟨X⟩, ⟨P⟩): diag(−(γ − 2g sin φ)/2, −γ/2).
pub fn first_moment_drift(p: &ModelParams) -> Matrix2<f64> {
    let s = p.feedback_drive();
    Matrix2::new(-0.5 * (p.gamma - 2.0 * s), 0.0, 0.0, -0.5 * p.gamma)
}

/// Eigenvalues of [`first_moment_drift`] (real, ordered as X then P).
pub fn first_moment_eigenvalues(p: &ModelParams) -> [f64; 2] {
    let m = first_moment_drift(p);
    [m[(0, 0)], m[(1, 1)]]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytic::stationary_solution;
    use crate::hilbert::{number, quadrature};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_hermitian(d: usize, rng: &mut impl Rng) -> CMatrix {
        let g = CMatrix::from_fn(d, d, |_, _| Complex64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5));
        let mut h = &g + g.adjoint();
        let tr = trace(&h);
        h /= tr;
        h
    }

    #[test]
    fn thermal_examples() {
        let th = DensityMatrix::thermal(30, 0.5).unwrap();
        assert!(max_abs(&rhs_thermal(th.matrix(), 0.01, 0.5).unwrap()) < 1e-9);
        let vac = DensityMatrix::vacuum(10).unwrap();
        assert_eq!(max_abs(&rhs_thermal(vac.matrix(), 0.01, 0.0).unwrap()), 0.0);
        let r = rhs_thermal(vac.matrix(), 0.01, 0.5).unwrap();
        let dn = number(10).unwrap().expect(&r).re;
        assert!((dn - 0.005).abs() < 1e-15);
        assert!(rhs_thermal(vac.matrix(), -0.01, 0.5).is_err());
    }

    #[test]
    fn qnd_term_heats_only_orthogonal_quadrature() {
        let p = ModelParams::squashing_reference().with_g(0.0).with_eta(1.0);
        let d = 16;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = quadrature(d, 0.0).unwrap();
        let x2 = x.mul(&x);
        let pq = quadrature(d, std::f64::consts::FRAC_PI_2).unwrap();
        let p2 = pq.mul(&pq);
        for _ in 0..20 {
            let rho = random_hermitian(d, &mut rng);
            let r = rhs_qnd(&rho, &p).unwrap();
            assert!(x.expect(&r).norm() < 1e-12);
            assert!(x2.expect(&r).norm() < 1e-12);
        }
        // away from the truncation edge ⟨P²⟩ grows at 2 · χ²/(8κ)
        let vac = DensityMatrix::vacuum(d).unwrap();
        let r = rhs_qnd(vac.matrix(), &p).unwrap();
        assert!((p2.expect(&r).re - 2.0 * p.measurement_rate() / 8.0).abs() < 1e-15);
    }

    #[test]
    fn generic_reduces_without_feedback() {
        let p = ModelParams::squashing_reference().with_g(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rho = random_hermitian(12, &mut rng);
        let full = rhs_generic_feedback(&rho, &p).unwrap();
        let parts = rhs_thermal(&rho, p.gamma, p.nbar).unwrap() + rhs_qnd(&rho, &p).unwrap();
        assert!(max_abs(&(full - &parts)) < 1e-15);
        let fin = rhs_final_feedback(&rho, &p).unwrap();
        assert!(max_abs(&(fin - parts)) < 1e-12);
    }

    #[test]
    fn generic_equals_final_at_quarter_phase() {
        let p = ModelParams::squashing_reference();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let rho = random_hermitian(20, &mut rng);
            let a = rhs_generic_feedback(&rho, &p).unwrap();
            let b = rhs_final_feedback(&rho, &p).unwrap();
            assert!(max_abs(&(a - b)) < 1e-10);
        }
    }

    #[test]
    fn rhs_errors() {
        let p = ModelParams::squashing_reference().with_chi(0.0);
        let rho = DensityMatrix::vacuum(4).unwrap();
        assert!(matches!(rhs_generic_feedback(rho.matrix(), &p), Err(Error::Domain(_))));
        let singular = ModelParams::squashing_reference()
            .with_phi(std::f64::consts::FRAC_PI_2)
            .with_g(0.01);
        assert!(matches!(
            rhs_final_feedback(rho.matrix(), &singular),
            Err(Error::SingularParameters(_))
        ));
    }

    #[test]
    fn oracle_at_reference() {
        let s = moment_oracle(&ModelParams::squashing_reference()).unwrap();
        assert!((s.zeta - 1.697_916_666_666_666_7).abs() < 1e-12);
        assert!((s.mu.re + 1.927_083_333_333_333_3).abs() < 1e-12);
        assert_eq!(s.mu.im, 0.0);
        let p0 = ModelParams::squashing_reference().with_g(0.0);
        let s0 = moment_oracle(&p0).unwrap();
        let b = effective_bath(&p0).unwrap();
        assert!((s0.zeta - b.occupancy).abs() < 1e-12);
        assert!((s0.mu - b.squeezing).norm() < 1e-12);
        let unstable = ModelParams::squashing_reference().with_phi(std::f64::consts::FRAC_PI_2);
        assert!(matches!(moment_oracle(&unstable), Err(Error::Unstable(_))));
    }

    #[test]
    fn oracle_matches_closed_form_off_quarter_phase() {
        for phi in [-1.2, -0.4, 0.3, 2.5] {
            let p = ModelParams::squashing_reference().with_phi(phi).with_g(0.004);
            let a = moment_oracle(&p).unwrap();
            let b = stationary_solution(&p).unwrap();
            assert!((a.zeta - b.zeta).abs() < 1e-10 * b.zeta.abs());
            assert!((a.mu - b.mu).norm() < 1e-10 * b.mu.norm());
        }
    }

    #[test]
    fn first_moment_stability() {
        let p = ModelParams::squashing_reference();
        let ev = first_moment_eigenvalues(&p);
        assert!((ev[0] + 0.03).abs() < 1e-15 && (ev[1] + 0.005).abs() < 1e-15);
        let edge = p.with_phi(std::f64::consts::FRAC_PI_2).with_g(0.006);
        assert!(first_moment_eigenvalues(&edge)[0] > 0.0);
        assert!(!is_stable(&edge));
    }

    #[test]
    fn checkpoints_layout() {
        assert_eq!(checkpoint_steps(100, 10), vec![10, 20, 30, 40, 50, 60, 70, 80, 90, 100]);
        assert_eq!(checkpoint_steps(7, 3), vec![3, 5, 7]);
        assert_eq!(checkpoint_steps(2, 5), vec![1, 2]);
        assert!(checkpoint_steps(0, 5).is_empty());
        assert_eq!(step_count(10.0, 0.1).unwrap(), 100);
        assert!(step_count(10.0, 0.3).is_err());
    }

    #[test]
    fn thermal_relaxation_from_vacuum() {
        let spec = RhsSpec::thermal(0.01, 0.5).unwrap();
        let vac = DensityMatrix::vacuum(30).unwrap();
        let traj = evolve(&vac, &spec, &EvolveOptions::new(200.0, 1.0)).unwrap();
        for cp in &traj.checkpoints {
            let want = 0.5 * (1.0 - (-0.01 * cp.time).exp());
            assert!((cp.moments.mean_n - want).abs() < 1e-6);
        }
        assert!(traj.max_trace_drift < 1e-10);
    }

    #[test]
    fn step_size_is_enforced() {
        let spec = RhsSpec::new(RhsKind::FinalFeedback, ModelParams::squashing_reference()).unwrap();
        let vac = DensityMatrix::vacuum(20).unwrap();
        let err = evolve(&vac, &spec, &EvolveOptions::new(20.0, 2.0)).unwrap_err();
        assert!(matches!(err, Error::StepSize(_)));
    }

    #[test]
    fn thermal_steady_state() {
        let spec = RhsSpec::thermal(0.01, 0.5).unwrap();
        let s = steady_state(&spec, &SteadyOptions::default()).unwrap();
        assert!((s.moments().mean_n - 0.5).abs() < 1e-8);
        assert_eq!(s.dim, 30);
    }
}

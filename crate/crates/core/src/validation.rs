//! Acceptance checks, one record per criterion.
//!
//! Each check runs at the parameters of a [`ValidationConfig`]. Values pinned
//! to the contour-figure parameters are compared only when the config uses
//! them; otherwise the models are cross-checked against each other.

use std::f64::consts::PI;
use std::time::Instant;

use num_complex::Complex64;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::analytic::{covariance, is_stable, lo_cosine, measured_only_p_variance, n_eff, printed_stationary_solution, quad_variance, stationary_solution};
use crate::error::{Error, Result};
use crate::evolve_det::{
    evolve, moment_oracle, rhs_final_feedback, rhs_generic_feedback, steady_state, EvolveOptions, RhsKind, RhsSpec,
    SteadyOptions,
};
use crate::evolve_stoch::{compare_with_deterministic, ensemble, EnsembleOptions, StochOptions, Trajectory};
use crate::exec::Exec;
use crate::gaussian2::{adiabatic_check, TwoModeGaussian};
use crate::hilbert::{CMatrix, DensityMatrix};
use crate::params::ModelParams;

#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Pass,
    Fail,
    Skipped(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckRecord {
    pub id: u32,
    pub name: &'static str,
    pub expected: String,
    pub actual: String,
    pub tolerance: String,
    pub outcome: Outcome,
    pub seconds: f64,
}

impl CheckRecord {
    pub fn passed(&self) -> bool {
        self.outcome == Outcome::Pass
    }

    pub fn failed(&self) -> bool {
        self.outcome == Outcome::Fail
    }

    /// `[PASS] 3 squashing_invariance: ...`
    pub fn line(&self) -> String {
        let tag = match &self.outcome {
            Outcome::Pass => "[PASS]",
            Outcome::Fail => "[FAIL]",
            Outcome::Skipped(_) => "[SKIP]",
        };
        let mut s = format!(
            "{tag} {} {}: expected {}; actual {}; tolerance {} ({:.2} s)",
            self.id, self.name, self.expected, self.actual, self.tolerance, self.seconds
        );
        if let Outcome::Skipped(why) = &self.outcome {
            s.push_str(&format!("; skipped: {why}"));
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidationConfig {
    pub params: ModelParams,
    pub dim: usize,
    pub seed: u64,
    pub n_traj: usize,
    pub dt: f64,
    pub t_final: f64,
    /// Random parameter sets in the bound suite.
    pub sweep: usize,
    pub exec: Exec,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        Self {
            params: ModelParams::squashing_reference(),
            dim: 30,
            seed: 42,
            n_traj: 2000,
            dt: 0.1,
            t_final: 50.0,
            sweep: 100_000,
            exec: Exec::available(),
        }
    }
}

impl ValidationConfig {
    fn is_reference(&self) -> bool {
        self.params == ModelParams::squashing_reference()
    }
}

/// Runs every check in order. A check that errors is recorded as a failure.
pub fn run_all(cfg: &ValidationConfig) -> Vec<CheckRecord> {
    CHECKS.iter().map(|(id, name, f)| run_one(*id, name, cfg, *f)).collect()
}

type CheckFn = fn(&ValidationConfig) -> Result<Verdict>;

pub const CHECK_NAMES: [&str; 10] = [
    "no_feedback_identity",
    "contour_figure_values",
    "squashing_invariance",
    "bound_suite",
    "generator_identity",
    "unraveling_consistency",
    "adiabatic_elimination",
    "occupation_trend",
    "conservation",
    "reproducibility",
];

const CHECKS: [(u32, &str, CheckFn); 10] = [
    (1, CHECK_NAMES[0], no_feedback_identity),
    (2, CHECK_NAMES[1], contour_figure_values),
    (3, CHECK_NAMES[2], squashing_invariance),
    (4, CHECK_NAMES[3], bound_suite),
    (5, CHECK_NAMES[4], generator_identity),
    (6, CHECK_NAMES[5], unraveling_consistency),
    (7, CHECK_NAMES[6], adiabatic_elimination),
    (8, CHECK_NAMES[7], occupation_trend),
    (9, CHECK_NAMES[8], conservation),
    (10, CHECK_NAMES[9], reproducibility),
];

/// Runs the check with the given number (1 to 10).
pub fn run_check(id: u32, cfg: &ValidationConfig) -> Result<CheckRecord> {
    let (id, name, f) = CHECKS
        .iter()
        .find(|c| c.0 == id)
        .ok_or_else(|| Error::Domain(format!("no check numbered {id}")))?;
    Ok(run_one(*id, name, cfg, *f))
}

struct Verdict {
    expected: String,
    actual: String,
    tolerance: String,
    ok: bool,
    skip: Option<String>,
    /// Runtime budget in seconds, if the criterion has one.
    budget: Option<f64>,
}

impl Verdict {
    fn new(expected: impl Into<String>, actual: impl Into<String>, tolerance: impl Into<String>, ok: bool) -> Self {
        Self {
            expected: expected.into(),
            actual: actual.into(),
            tolerance: tolerance.into(),
            ok,
            skip: None,
            budget: None,
        }
    }

    fn skipped(why: impl Into<String>) -> Self {
        Self {
            skip: Some(why.into()),
            ..Self::new("-", "-", "-", true)
        }
    }

    fn within(self, seconds: f64) -> Self {
        Self {
            budget: Some(seconds),
            ..self
        }
    }
}

fn run_one(id: u32, name: &'static str, cfg: &ValidationConfig, f: CheckFn) -> CheckRecord {
    let start = Instant::now();
    let result = std::panic::catch_unwind(|| f(cfg));
    let seconds = start.elapsed().as_secs_f64();
    let v = match result {
        Ok(Ok(v)) => v,
        Ok(Err(e)) => Verdict::new("no error", format!("error: {e}"), "-", false),
        Err(_) => Verdict::new("no error", "panicked", "-", false),
    };
    let mut tolerance = v.tolerance;
    let mut ok = v.ok;
    if let Some(b) = v.budget {
        tolerance.push_str(&format!(", runtime < {b} s"));
        ok &= seconds < b;
    }
    let outcome = match v.skip {
        Some(why) => Outcome::Skipped(why),
        None if ok => Outcome::Pass,
        None => Outcome::Fail,
    };
    CheckRecord {
        id,
        name,
        expected: v.expected,
        actual: v.actual,
        tolerance,
        outcome,
        seconds,
    }
}

fn rel(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        a.abs()
    } else {
        ((a - b) / b).abs()
    }
}

fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    (rng.gen_range(lo.ln()..hi.ln())).exp()
}

/// A random parameter set from broad ranges; the gain is redrawn until the
/// set is stable.
pub fn random_stable_params(rng: &mut ChaCha8Rng) -> ModelParams {
    let gamma = log_uniform(rng, 1e-3, 1.0);
    let kappa = log_uniform(rng, 1.0, 1e3);
    let chi = log_uniform(rng, 1e-2, 10.0);
    let eta = rng.gen_range(0.05..=1.0);
    let nbar = rng.gen_range(0.0..5.0);
    let phi = rng.gen_range(-PI..PI);
    loop {
        let g = rng.gen_range(-1.0..1.0) * 10.0 * gamma;
        let p = ModelParams {
            gamma,
            kappa,
            chi,
            g,
            phi,
            eta,
            nbar,
        };
        if is_stable(&p) {
            return p;
        }
    }
}

fn no_feedback_identity(cfg: &ValidationConfig) -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let p = random_stable_params(&mut rng).with_g(0.0);
        worst = worst.max(rel(n_eff(&p)?, p.nbar));
    }
    Ok(Verdict::new("n_eff = nbar at g = 0 (100 sets)", format!("worst relative error {worst:.3e}"), "1e-12 relative", worst <= 1e-12).within(1.0))
}

fn contour_figure_values(cfg: &ValidationConfig) -> Result<Verdict> {
    let p = cfg.params;
    if !is_stable(&p) {
        return Ok(Verdict::skipped("parameters are unstable"));
    }
    let printed = printed_stationary_solution(&p, 0.0)?;
    let closed = stationary_solution(&p)?;
    let oracle = moment_oracle(&p)?;
    let steady = steady_state(
        &RhsSpec::new(RhsKind::FinalFeedback, p)?,
        &SteadyOptions {
            dim: cfg.dim,
            ..SteadyOptions::default()
        },
    )?
    .moments();
    let quads = |zeta: f64, mu_re: f64| (0.5 * (0.5 + zeta + mu_re), 0.5 * (0.5 + zeta - mu_re));
    let (vx, vp) = quads(closed.zeta, closed.mu.re);
    let mut ok = true;
    let mut worst_oracle: f64 = 0.0;
    for (a, b) in [(printed.zeta, oracle.zeta), (printed.mu.re, oracle.mu.re), (closed.zeta, oracle.zeta), (closed.mu.re, oracle.mu.re)] {
        worst_oracle = worst_oracle.max(rel(a, b));
    }
    ok &= worst_oracle <= 1e-10;
    let lindblad = [
        (steady.mean_n, closed.zeta),
        (steady.mean_aa.re, closed.mu.re),
        (steady.var_x(0.0), vx),
        (steady.var_x(PI / 2.0), vp),
    ];
    let worst_lindblad = lindblad.iter().map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    ok &= worst_lindblad <= 1e-3;
    let mut expected = "printed formulas = moment oracle = Lindblad steady state".to_string();
    let mut worst_pinned: f64 = 0.0;
    if cfg.is_reference() {
        expected = "(zeta, mu, Var X, Var P) = (1.697917, -1.927083, 0.135417, 2.0625)".into();
        let pinned = [
            (printed.zeta, 1.697917),
            (printed.mu.re, -1.927083),
            (quad_variance(&printed, 0.0), 0.135417),
            (quad_variance(&printed, PI / 2.0), 2.0625),
        ];
        worst_pinned = pinned.iter().map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        // pinned values carry six decimals
        ok &= worst_pinned <= 5e-7;
        ok &= lindblad
            .iter()
            .zip([1.697917, -1.927083, 0.135417, 2.0625])
            .all(|((a, _), want)| (a - want).abs() <= 1e-3);
    }
    Ok(Verdict::new(
        expected,
        format!(
            "zeta {:.7}, mu {:.7}, Var X {:.7}, Var P {:.7}; oracle rel {worst_oracle:.1e}; Lindblad (dim {}) abs {worst_lindblad:.1e}; printed digits abs {worst_pinned:.1e}",
            printed.zeta,
            printed.mu.re,
            vx,
            vp,
            cfg.dim
        ),
        "oracle 1e-10 relative, Lindblad 1e-3 absolute",
        ok,
    )
    .within(60.0))
}

fn squashing_invariance(cfg: &ValidationConfig) -> Result<Verdict> {
    let base = cfg.params;
    if lo_cosine(&base) != 0.0 {
        return Ok(Verdict::skipped("needs cos(phi) = 0"));
    }
    let want = measured_only_p_variance(&base);
    let mut worst_analytic: f64 = 0.0;
    let mut worst_lindblad: f64 = 0.0;
    for g in [0.0, 0.01, 0.025] {
        let p = base.with_g(g);
        if !is_stable(&p) {
            return Ok(Verdict::skipped(format!("gain {g} is unstable")));
        }
        let analytic = quad_variance(&stationary_solution(&p)?, PI / 2.0);
        worst_analytic = worst_analytic.max(rel(analytic, want));
        let s = steady_state(
            &RhsSpec::new(RhsKind::FinalFeedback, p)?,
            &SteadyOptions {
                dim: cfg.dim,
                ..SteadyOptions::default()
            },
        )?;
        worst_lindblad = worst_lindblad.max((s.moments().var_x(PI / 2.0) - want).abs());
    }
    Ok(Verdict::new(
        format!("Var(X_pi/2) = {want:.7} at g in {{0, 0.01, 0.025}}"),
        format!("analytic rel {worst_analytic:.1e}, Lindblad abs {worst_lindblad:.1e}"),
        "1e-12 analytic, 1e-3 integrator",
        worst_analytic <= 1e-12 && worst_lindblad <= 1e-3,
    ))
}

fn bound_suite(cfg: &ValidationConfig) -> Result<Verdict> {
    let seeds: Vec<u64> = (0..cfg.sweep as u64).collect();
    let base = cfg.seed;
    let results = cfg.exec.map(seeds, |i| -> Result<(f64, f64)> {
        let mut rng = ChaCha8Rng::seed_from_u64(base);
        rng.set_stream(i + 1);
        let p = random_stable_params(&mut rng);
        let c = covariance(&stationary_solution(&p)?)?;
        Ok((n_eff(&p)?, c.det()))
    });
    let mut min_n = f64::INFINITY;
    let mut min_det = f64::INFINITY;
    for r in results {
        let (n, det) = r?;
        min_n = min_n.min(n);
        min_det = min_det.min(det);
    }
    let ok = min_n >= -0.5 && min_det >= (1.0 - 1e-12) / 16.0;
    Ok(Verdict::new(
        format!("n_eff >= -1/2 and det >= 1/16 over {} sets", cfg.sweep),
        format!("min n_eff {min_n:.6}, min det {min_det:.9}"),
        "det 1e-12 relative",
        ok,
    )
    .within(30.0))
}

/// G + G† scaled to unit trace.
pub fn random_hermitian(d: usize, rng: &mut ChaCha8Rng) -> CMatrix {
    let g = CMatrix::from_fn(d, d, |_, _| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
    let h = &g + g.adjoint();
    let tr = h.trace();
    h / tr
}

fn generator_identity(cfg: &ValidationConfig) -> Result<Verdict> {
    let p = cfg.params;
    if lo_cosine(&p) != 0.0 {
        return Ok(Verdict::skipped(
            "at cos(phi) != 0 the identity uses [a, a^dag] = 1, which fails in the top corner of a truncated basis",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let rho = random_hermitian(20, &mut rng);
        let diff = rhs_generic_feedback(&rho, &p)? - rhs_final_feedback(&rho, &p)?;
        worst = worst.max(diff.iter().map(|z| z.norm()).fold(0.0, f64::max));
    }
    Ok(Verdict::new("two right-hand sides agree elementwise (100 matrices, dim 20)", format!("max deviation {worst:.3e}"), "1e-10", worst <= 1e-10))
}

fn unraveling_consistency(cfg: &ValidationConfig) -> Result<Verdict> {
    let p = cfg.params;
    if !is_stable(&p) {
        return Ok(Verdict::skipped("parameters are unstable"));
    }
    let rho0 = DensityMatrix::thermal(cfg.dim, p.nbar)?;
    let stoch = StochOptions::new(cfg.t_final, cfg.dt, 20);
    let ens = ensemble(
        &p,
        &rho0,
        &EnsembleOptions {
            n_traj: cfg.n_traj,
            base_seed: cfg.seed,
            stoch,
            max_dim: 4 * cfg.dim,
            exec: cfg.exec,
        },
    )?;
    // the reference runs at the dimension the ensemble settled on
    let det = evolve(
        &rho0.embed(ens.stats.dim)?,
        &RhsSpec::new(RhsKind::FinalFeedback, p)?,
        &EvolveOptions::new(cfg.t_final, cfg.dt).with_checkpoints(20),
    )?;
    let report = compare_with_deterministic(&ens.stats, &det, 3.0)?;
    let worst = report.worst().map_or(0.0, |w| w.z());
    let at = report.worst().map_or(String::new(), |w| format!(" ({} at t = {})", w.quantity, w.time));
    Ok(Verdict::new(
        format!("{} trajectories match (n, Re aa, Im aa) at 20 checkpoints", cfg.n_traj),
        format!("worst |z| {worst:.2}{at}; {} comparisons; dim {}", report.points.len(), ens.stats.dim),
        "3 standard errors",
        report.passed(),
    )
    .within(600.0))
}

fn adiabatic_elimination(cfg: &ValidationConfig) -> Result<Verdict> {
    let p = cfg.params;
    let two = TwoModeGaussian::from_params(&p)?;
    let want = (2.0 * p.nbar + 1.0) / 4.0 + p.chi * p.chi / (4.0 * p.gamma * (p.gamma + p.kappa));
    let lyapunov = (two.var_p() - want).abs();
    let report = adiabatic_check(&p)?;
    let ratio = p.gamma / p.kappa;
    let x_exact = (2.0 * p.nbar + 1.0) / 4.0;
    let x_err = (two.var_x() - x_exact).abs().max((report.var_x_reduced - x_exact).abs());
    let ok = lyapunov <= 1e-10 && report.rel_dev_p <= ratio && x_err <= 4.0 * f64::EPSILON * x_exact.max(1.0);
    Ok(Verdict::new(
        format!("Var P_a = {want:.9}; reduced {:.6} within gamma/kappa = {ratio:.1e}; Var X_a = {x_exact}", report.var_p_reduced),
        format!(
            "Var P_a {:.12} (off {lyapunov:.1e}), relative deviation {:.3e}, Var X_a off {x_err:.1e}",
            two.var_p(),
            report.rel_dev_p
        ),
        "1e-10 solver, gamma/kappa relative",
        ok,
    )
    .within(1.0))
}

fn occupation_trend(cfg: &ValidationConfig) -> Result<Verdict> {
    let base = ModelParams {
        g: 0.025,
        phi: -PI / 2.0,
        ..cfg.params
    };
    let values: Vec<f64> = [0.5, 1.5, 2.5]
        .iter()
        .map(|&chi| n_eff(&base.with_chi(chi)))
        .collect::<Result<_>>()?;
    let decreasing = values.windows(2).all(|w| w[1] < w[0]);
    let reference = ModelParams::squashing_reference();
    let pinned = base.gamma == reference.gamma && base.kappa == reference.kappa && base.eta == reference.eta && base.nbar == reference.nbar;
    let mut ok = decreasing;
    let mut expected = "strictly decreasing in chi".to_string();
    if pinned {
        let want = [2.2708, -0.0440, -0.2292];
        ok &= values.iter().zip(want).all(|(v, w)| (v - w).abs() <= 1e-4);
        expected = format!("{want:?}, strictly decreasing");
    }
    Ok(Verdict::new(expected, format!("{values:.6?} at chi = [0.5, 1.5, 2.5]"), "1e-4", ok))
}

fn conservation(cfg: &ValidationConfig) -> Result<Verdict> {
    let p = cfg.params;
    let d = cfg.dim;
    let mut runs = vec![
        (RhsSpec::thermal(p.gamma, p.nbar)?, DensityMatrix::fock(d, 2)?),
    ];
    if p.chi > 0.0 {
        runs.push((RhsSpec::new(RhsKind::GenericFeedback, p)?, DensityMatrix::vacuum(d)?));
    }
    if is_stable(&p) {
        runs.push((RhsSpec::new(RhsKind::FinalFeedback, p)?, DensityMatrix::vacuum(d)?));
    }
    let (mut drift, mut herm, mut min_eig): (f64, f64, f64) = (0.0, 0.0, f64::INFINITY);
    for (spec, rho0) in &runs {
        let dt = spec.max_dt()?.min(0.1);
        let t = (20.0 / dt).round() * dt;
        let traj = evolve(rho0, spec, &EvolveOptions::new(t, dt).with_checkpoints(10))?;
        drift = drift.max(traj.max_trace_drift);
        herm = herm.max(traj.max_hermiticity_error);
        min_eig = traj.checkpoints.iter().map(|c| c.min_eigenvalue).fold(min_eig, f64::min);
    }
    let thermal = steady_state(&RhsSpec::thermal(p.gamma, p.nbar)?, &SteadyOptions { dim: d, ..SteadyOptions::default() })?;
    let n_err = (thermal.moments().mean_n - p.nbar).abs();
    let ok = drift <= 1e-10 && herm <= 1e-12 && min_eig >= -1e-8 && n_err <= 1e-8;
    Ok(Verdict::new(
        format!("{} trajectories conserve trace and hermiticity; thermal steady n = {}", runs.len(), p.nbar),
        format!("trace drift {drift:.1e}, hermiticity {herm:.1e}, min eigenvalue {min_eig:.1e}, thermal n off {n_err:.1e}"),
        "1e-10 trace, 1e-12 hermiticity, -1e-8 eigenvalue, 1e-8 occupation",
        ok,
    ))
}

/// Bit patterns of everything a trajectory archive holds.
pub fn trajectory_bits(t: &Trajectory) -> Vec<u64> {
    let mut out = vec![t.seed.base, t.seed.index, t.dim as u64, t.dt.to_bits()];
    out.extend(t.times.iter().map(|v| v.to_bits()));
    for m in &t.cond_moments {
        out.extend([m.x, m.x2, m.n, m.aa.re, m.aa.im].map(f64::to_bits));
    }
    out.extend(t.current.iter().map(|v| v.to_bits()));
    out.extend(t.final_state.matrix().iter().flat_map(|z| [z.re.to_bits(), z.im.to_bits()]));
    out
}

fn reproducibility(cfg: &ValidationConfig) -> Result<Verdict> {
    let p = cfg.params;
    let rho0 = DensityMatrix::thermal(cfg.dim.min(20), p.nbar)?;
    let opts = |exec| EnsembleOptions {
        n_traj: 8,
        base_seed: cfg.seed,
        stoch: StochOptions::new(5.0, cfg.dt, 5),
        max_dim: 4 * rho0.dim(),
        exec,
    };
    let archive = |exec| -> Result<Vec<Vec<u64>>> {
        Ok(ensemble(&p, &rho0, &opts(exec))?.trajectories.iter().map(trajectory_bits).collect())
    };
    let reference = archive(Exec::Sequential)?;
    // extended with explicit pool sizes when rayon is present
    #[cfg_attr(not(feature = "parallel"), allow(unused_mut))]
    let mut runs = vec![("sequential rerun", archive(Exec::Sequential)?), ("parallel", archive(Exec::Parallel)?)];
    #[cfg(feature = "parallel")]
    for threads in [1, 3] {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Domain(format!("thread pool: {e}")))?;
        let label = if threads == 1 { "1 worker" } else { "3 workers" };
        runs.push((label, pool.install(|| archive(Exec::Parallel))?));
    }
    let differing: Vec<&str> = runs.iter().filter(|(_, a)| *a != reference).map(|(l, _)| *l).collect();
    Ok(Verdict::new(
        "bit-identical archives across runs and worker counts",
        if differing.is_empty() {
            format!("{} runs identical", runs.len() + 1)
        } else {
            format!("differs: {differing:?}")
        },
        "exact",
        differing.is_empty(),
    ))
}

//! One function per subcommand. Each returns the tables to write; every
//! number in them comes straight from a core routine.

use squash_core::analytic::{contour_rows, covariance, occupation_table, stationary_solution, StationaryGaussian};
use squash_core::evolve_det::{evolve, steady_state, EvolveOptions, RhsKind, RhsSpec, SteadyOptions};
use squash_core::evolve_stoch::{compare_with_deterministic, ensemble, summarize, EnsembleOptions, StochOptions};
use squash_core::hilbert::DensityMatrix;
use squash_core::validation::{run_all, Outcome, ValidationConfig};
use squash_core::Exec;

use crate::config::RunConfig;
use crate::error::Result;
use crate::output::{Cell, Table};

pub struct Report {
    pub tables: Vec<Table>,
    /// False when a check failed.
    pub ok: bool,
}

impl Report {
    fn done(tables: Vec<Table>) -> Self {
        Self { tables, ok: true }
    }
}

fn describe(cfg: &RunConfig) -> String {
    let p = &cfg.params;
    format!(
        "gamma = {}, kappa = {}, chi = {}, g = {}, phi = {}, eta = {}, nbar = {}",
        p.gamma, p.kappa, p.chi, p.g, p.phi, p.eta, p.nbar
    )
}

pub fn fig1(cfg: &RunConfig) -> Result<Report> {
    let gains = cfg.gains();
    let points = occupation_table(&cfg.params, &cfg.chi_list, &gains, Exec::available())?;
    let mut t = Table::new("fig1", &["chi", "g", "n_eff", "stable"]);
    t.comment(describe(cfg));
    t.comment("n_eff is empty where the feedback loop is unstable");
    for pt in points {
        t.push(vec![
            Cell::Real(pt.chi),
            Cell::Real(pt.g),
            pt.n_eff.map_or(Cell::Missing, Cell::Real),
            Cell::Bool(pt.stable),
        ]);
    }
    Ok(Report::done(vec![t]))
}

pub fn fig2(cfg: &RunConfig) -> Result<Report> {
    let mut t = Table::new("fig2", &["label", "vxx", "vpp", "vxp", "major", "minor", "angle"]);
    t.comment(describe(cfg));
    t.comment("major and minor are semi-axes of the 1/sqrt(e) Wigner contour; angle of the major axis");
    for row in contour_rows(&cfg.params)? {
        let (c, e) = (row.covariance, row.ellipse);
        t.push(vec![
            Cell::Text(row.label.into()),
            Cell::Real(c.vxx),
            Cell::Real(c.vpp),
            Cell::Real(c.vxp),
            Cell::Real(e.semi_axis_major),
            Cell::Real(e.semi_axis_minor),
            Cell::Real(e.angle),
        ]);
    }
    Ok(Report::done(vec![t]))
}

pub fn validation_config(cfg: &RunConfig) -> ValidationConfig {
    ValidationConfig {
        params: cfg.params,
        dim: cfg.dim,
        seed: cfg.seed,
        n_traj: cfg.n_traj,
        dt: cfg.dt,
        t_final: cfg.t_final,
        sweep: cfg.sweep,
        exec: Exec::available(),
    }
}

pub fn validate(cfg: &RunConfig) -> Result<Report> {
    let records = run_all(&validation_config(cfg));
    let mut t = Table::new(
        "validate",
        &["id", "name", "expected", "actual", "tolerance", "pass", "outcome", "seconds"],
    );
    t.comment(describe(cfg));
    t.comment("pass is empty for skipped checks; outcome gives the reason");
    for r in &records {
        println!("{}", r.line());
        let (pass, outcome) = match &r.outcome {
            Outcome::Pass => (Cell::Bool(true), "pass".to_string()),
            Outcome::Fail => (Cell::Bool(false), "fail".to_string()),
            Outcome::Skipped(why) => (Cell::Missing, format!("skipped: {why}")),
        };
        t.push(vec![
            Cell::Int(r.id.into()),
            Cell::Text(r.name.into()),
            Cell::Text(r.expected.clone()),
            Cell::Text(r.actual.clone()),
            Cell::Text(r.tolerance.clone()),
            pass,
            Cell::Text(outcome),
            Cell::Real(r.seconds),
        ]);
    }
    let ok = !records.iter().any(|r| r.failed());
    Ok(Report { tables: vec![t], ok })
}

pub fn trajectories(cfg: &RunConfig, currents: bool) -> Result<Report> {
    let p = cfg.params;
    let rho0 = DensityMatrix::thermal(cfg.dim, p.nbar)?;
    let ens = ensemble(
        &p,
        &rho0,
        &EnsembleOptions {
            n_traj: cfg.n_traj,
            base_seed: cfg.seed,
            stoch: StochOptions::new(cfg.t_final, cfg.dt, cfg.checkpoints),
            max_dim: 4 * cfg.dim,
            exec: Exec::available(),
        },
    )?;
    let det = evolve(
        &rho0.embed(ens.stats.dim)?,
        &RhsSpec::new(RhsKind::FinalFeedback, p)?,
        &EvolveOptions::new(cfg.t_final, cfg.dt).with_checkpoints(cfg.checkpoints),
    )?;

    let header = format!(
        "{}; dim {}, dt {}, t_final {}, n_traj {}, seed {}",
        describe(cfg),
        ens.stats.dim,
        cfg.dt,
        cfg.t_final,
        cfg.n_traj,
        cfg.seed
    );
    let mut archive = Table::new("trajectories", &["trajectory", "dim", "time", "x", "x2", "n", "aa_re", "aa_im"]);
    archive.comment(header.clone());
    archive.comment("conditioned moments <X>_c, <X^2>_c, <a^dag a>_c, <a^2>_c at each record time");
    for tr in &ens.trajectories {
        for (time, m) in tr.times.iter().zip(&tr.cond_moments) {
            archive.push(vec![
                Cell::Int(tr.seed.index),
                Cell::Int(tr.dim as u64),
                Cell::Real(*time),
                Cell::Real(m.x),
                Cell::Real(m.x2),
                Cell::Real(m.n),
                Cell::Real(m.aa.re),
                Cell::Real(m.aa.im),
            ]);
        }
    }

    let mut summary = Table::new(
        "ensemble",
        &[
            "time",
            "n_mean",
            "n_stderr",
            "aa_re_mean",
            "aa_re_stderr",
            "aa_im_mean",
            "aa_im_stderr",
            "cond_var_x_mean",
            "cond_var_x_stderr",
            "n_det",
            "aa_re_det",
            "aa_im_det",
        ],
    );
    summary.comment(header.clone());
    summary.comment("stderr is empty for a single trajectory; *_det from the feedback master equation");
    let real_or_missing = |v: f64| if v.is_finite() { Cell::Real(v) } else { Cell::Missing };
    if ens.stats.stderr_defined {
        let report = compare_with_deterministic(&ens.stats, &det, 3.0)?;
        let worst = report.worst();
        summary.comment(format!(
            "consistency with the master equation: {} (worst |z| {} over {} comparisons, limit {})",
            if report.passed() { "pass" } else { "fail" },
            worst.map_or("n/a".to_string(), |w| format!("{:.3} in {} at t = {}", w.z(), w.quantity, w.time)),
            report.points.len(),
            report.sigmas
        ));
    }
    for row in summarize(&ens.stats, Some(&det)) {
        let det_cells = match row.deterministic {
            Some(m) => [Cell::Real(m.mean_n), Cell::Real(m.mean_aa.re), Cell::Real(m.mean_aa.im)],
            None => [Cell::Missing, Cell::Missing, Cell::Missing],
        };
        let mut cells = vec![Cell::Real(row.time)];
        for (mean, se) in [row.n, row.aa_re, row.aa_im, row.cond_var_x] {
            cells.push(Cell::Real(mean));
            cells.push(real_or_missing(se));
        }
        cells.extend(det_cells);
        summary.push(cells);
    }

    let mut tables = vec![archive, summary];
    if currents {
        let mut t = Table::new("currents", &["trajectory", "step", "current"]);
        t.comment(header);
        t.comment("scaled photocurrent J of each step; the current of step k is recorded at time k dt");
        for tr in &ens.trajectories {
            for (k, j) in tr.current.iter().enumerate() {
                t.push(vec![Cell::Int(tr.seed.index), Cell::Int(k as u64 + 1), Cell::Real(*j)]);
            }
        }
        tables.push(t);
    }
    Ok(Report::done(tables))
}

pub fn steady(cfg: &RunConfig) -> Result<Report> {
    let p = cfg.params;
    let ss = steady_state(
        &RhsSpec::new(RhsKind::FinalFeedback, p)?,
        &SteadyOptions {
            dim: cfg.dim,
            max_dim: 4 * cfg.dim,
            ..SteadyOptions::default()
        },
    )?;
    let m = ss.moments();
    let lindblad = covariance(&StationaryGaussian {
        zeta: m.mean_n,
        mu: m.mean_aa,
    })?;
    let exact = stationary_solution(&p)?;
    let closed = covariance(&exact)?;
    let mut t = Table::new("steady", &["quantity", "lindblad", "analytic"]);
    t.comment(describe(cfg));
    t.comment(format!(
        "truncated steady state at dim {} ({:?}); residual {:e}, tail mass {:e}",
        ss.dim, ss.method, ss.residual, ss.tail
    ));
    let rows = [
        ("n", m.mean_n, exact.zeta),
        ("aa_re", m.mean_aa.re, exact.mu.re),
        ("aa_im", m.mean_aa.im, exact.mu.im),
        ("vxx", lindblad.vxx, closed.vxx),
        ("vpp", lindblad.vpp, closed.vpp),
        ("vxp", lindblad.vxp, closed.vxp),
    ];
    for (q, a, b) in rows {
        t.push(vec![Cell::Text(q.into()), Cell::Real(a), Cell::Real(b)]);
    }
    Ok(Report::done(vec![t]))
}

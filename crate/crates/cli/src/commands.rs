//! One function per subcommand. Each reads its parameters from the shared
//! run context, executes the corresponding library operations, and returns
//! assertions, metrics, and artifact files; no pass/fail criterion lives
//! only here.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stochcon::bsde::{solve_bsde_lsmc, LsmcOptions, ModalBsde};
use stochcon::carleman::{
    asymptotic_checks, identity_convergence, weighted_test_function, Diffusion, SpatialWeight,
    WeightSpec,
};
use stochcon::controllability::{
    binomial_observability_oracle, eta_beta_estimate, gramian_control, kalman_rank,
    stochastic_rank, verify_degenerate_pair,
};
use stochcon::max_principle::{
    check_mp_inequality, dp_oracle, first_adjoint, lq_additive, lq_riccati_oracle,
    second_adjoint_for, simulate, spike_variation, ControlLaw, ControlSet,
};
use stochcon::spectral_heat::{
    approx_controllability_predicate, lr_null_control, obs_constant_sweep,
    obstruction_counterexample, HeatModel1D, TimeSet,
};
use stochcon::stochastic::{check_ito_isometry, generate_paths, AdaptedSamples, TimeGrid};

use crate::config::Config;
use crate::report::{fmt_f64, Csv, RunOutput};
use crate::CliError;

/// Shared run context: configuration document plus the global flags.
pub struct Ctx<'a> {
    pub config: &'a Config,
    pub seed: u64,
    pub paths: Option<usize>,
    pub steps: Option<usize>,
    pub tol: Option<f64>,
}

impl Ctx<'_> {
    fn paths_or(&self, default: usize) -> usize {
        self.paths.unwrap_or(default)
    }

    fn steps_or(&self, default: usize) -> usize {
        self.steps.unwrap_or(default)
    }

    fn tol_or(&self, default: f64) -> f64 {
        self.tol.unwrap_or(default)
    }

    /// Provenance lines stamped into every artifact.
    fn provenance(&self, tol: f64) -> Vec<(&'static str, String)> {
        vec![
            ("seed", self.seed.to_string()),
            ("tol", fmt_f64(tol)),
        ]
    }
}

/// Lift library errors into the CLI taxonomy: enumeration budgets surface
/// as resource-guard failures, everything else as a configuration problem.
fn lift<T>(r: stochcon::Result<T>) -> Result<T, CliError> {
    r.map_err(|e| match e {
        stochcon::Error::Resource(msg) => CliError::Resource(msg),
        other => CliError::Config(other.to_string()),
    })
}

pub fn core_selftest(ctx: &Ctx) -> Result<RunOutput, CliError> {
    let mut out = RunOutput::new();
    let steps = ctx.steps_or(100);
    let n_paths = ctx.paths_or(20_000);
    let grid = lift(TimeGrid::new(0.0, 1.0, steps))?;
    let paths = lift(generate_paths(grid, n_paths, ctx.seed))?;
    let f = AdaptedSamples::from_fn(&paths, |_, w| w);
    let iso = lift(check_ito_isometry(&f, &paths))?;
    out.metric_f64("isometry_ratio", iso.ratio);
    out.metric_f64("isometry_std_error", iso.std_error);
    out.assert(
        "ito-isometry-within-3se",
        iso.within(3.0),
        format!("ratio {} (se {})", fmt_f64(iso.ratio), fmt_f64(iso.std_error)),
    );

    let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
    let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
    let cert = lift(kalman_rank(&a, &b))?;
    out.metric("kalman_rank", cert.rank.to_string());
    out.assert(
        "double-integrator-controllable",
        cert.full(),
        format!("rank {}", cert.rank),
    );

    let steer = lift(gramian_control(
        &a,
        &b,
        1.0,
        &DVector::from_row_slice(&[1.0, 0.0]),
        &DVector::zeros(2),
    ))?;
    out.metric_f64("gramian_terminal_error", steer.terminal_error);
    out.assert(
        "gramian-steering-exact",
        steer.terminal_error <= 1e-8,
        format!("terminal error {}", fmt_f64(steer.terminal_error)),
    );
    Ok(out)
}

pub fn rank(ctx: &Ctx) -> Result<RunOutput, CliError> {
    let mut out = RunOutput::new();
    let a = ctx.config.matrix("a", &[&[0.0, 1.0], &[0.0, 0.0]])?;
    let b = ctx.config.matrix("b", &[&[0.0], &[1.0]])?;
    let cert = lift(kalman_rank(&a, &b))?;
    let verdict = if cert.full() { "controllable" } else { "not controllable" };
    out.metric("rank", cert.rank.to_string());
    out.metric("dimension", a.nrows().to_string());
    out.metric("verdict", format!("{verdict}, rank {}", cert.rank));
    Ok(out)
}

pub fn gramian(ctx: &Ctx) -> Result<RunOutput, CliError> {
    let mut out = RunOutput::new();
    let tol = ctx.tol_or(1e-8);
    let a = ctx.config.matrix("a", &[&[0.0, 1.0], &[0.0, 0.0]])?;
    let b = ctx.config.matrix("b", &[&[0.0], &[1.0]])?;
    let horizon = ctx.config.f64("horizon", 1.0)?;
    let y0 = ctx.config.vector("y0", &[1.0, 0.0])?;
    let target = ctx.config.vector("y_target", &[0.0, 0.0])?;
    let steer = lift(gramian_control(&a, &b, horizon, &y0, &target))?;
    out.metric_f64("energy", steer.energy);
    out.metric_f64("terminal_error", steer.terminal_error);
    out.assert(
        "terminal-error-below-tol",
        steer.terminal_error <= tol,
        format!("terminal error {} vs tol {}", fmt_f64(steer.terminal_error), fmt_f64(tol)),
    );

    let samples = ctx.steps_or(100);
    let mut csv = Csv::new(&ctx.provenance(tol), &["t", "u"]);
    for k in 0..=samples {
        let t = horizon * k as f64 / samples as f64;
        let u = steer.control(t);
        csv.row(&[fmt_f64(t), fmt_f64(u[0])]);
    }
    out.file("control.csv", csv.finish());
    Ok(out)
}

pub fn stochastic_rank_cmd(ctx: &Ctx) -> Result<RunOutput, CliError> {
    let mut out = RunOutput::new();
    let a1 = ctx.config.matrix("a1", &[&[0.0, 0.0], &[0.0, 0.0]])?;
    let a2 = ctx.config.matrix("a2", &[&[0.0, 0.0], &[1.0, 0.0]])?;
    let b1 = ctx.config.matrix("b1", &[&[1.0], &[0.0]])?;
    let cert = lift(stochastic_rank(&a1, &a2, &b1))?;
    let det = lift(kalman_rank(&a1, &b1))?;
    let verdict = if cert.full() { "controllable" } else { "not controllable" };
    out.metric("rank", cert.rank.to_string());
    out.metric("deterministic_rank", det.rank.to_string());
    out.metric("verdict", format!("{verdict}, rank {}", cert.rank));
    Ok(out)
}

pub fn oracle_compare(ctx: &Ctx) -> Result<RunOutput, CliError> {
    let mut out = RunOutput::new();
    let instances = ctx.config.usize("instances", 100)?;
    let dt = ctx.config.f64("dt", 0.1)?;
    let max_dim = ctx.config.usize("max_dim", 4)?.clamp(2, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
    let mut csv = Csv::new(
        &ctx.provenance(0.0),
        &["instance", "n", "rank_full", "oracle_observable", "agree"],
    );
    let mut disagreements = 0usize;
    let mut done = 0usize;
    while done < instances {
        let n = rng.gen_range(2..=max_dim);
        let rand_mat = |rng: &mut ChaCha8Rng, rows: usize, cols: usize| {
            DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-1..=1) as f64)
        };
        let a1 = rand_mat(&mut rng, n, n);
        let a2 = rand_mat(&mut rng, n, n);
        let b1 = rand_mat(&mut rng, n, 1);
        if b1.amax() == 0.0 {
            continue;
        }
        let full = lift(stochastic_rank(&a1, &a2, &b1))?.full();
        let oracle = lift(binomial_observability_oracle(&a1, &a2, &b1, n, dt))?;
        let agree = full == oracle.observable;
        if !agree {
            disagreements += 1;
        }
        csv.row(&[
            done.to_string(),
            n.to_string(),
            full.to_string(),
            oracle.observable.to_string(),
            agree.to_string(),
        ]);
        done += 1;
    }
    out.file("agreement.csv", csv.finish());
    out.metric("instances", instances.to_string());
    out.metric("disagreements", disagreements.to_string());
    out.assert(
        "oracle-matches-rank-verdict",
        disagreements == 0,
        format!("{disagreements} disagreements out of {instances}"),
    );
    Ok(out)
}

pub fn eta_beta(ctx: &Ctx) -> Result<RunOutput, CliError> {
    let mut out = RunOutput::new();
    let horizon = ctx.config.f64("horizon", 1.0)?;
    let points = ctx.config.usize("grid_points", 64)?;
    let rep = lift(eta_beta_estimate(horizon, points))?;
    let doubled = lift(eta_beta_estimate(horizon, 2 * points))?;
    out.metric_f64("beta_hat", rep.beta_hat);
    out.metric_f64("beta_hat_refined", rep.beta_hat_refined);
    out.metric_f64("argmin_t", rep.argmin_t);
    out.assert("beta-positive", rep.beta_hat > 0.0, format!("beta {}", fmt_f64(rep.beta_hat)));
    let drift = (doubled.beta_hat - rep.beta_hat).abs();
    out.assert(
        "beta-grid-stable",
        drift <= 0.05 * rep.beta_hat,
        format!("doubling the grid moved beta by {}", fmt_f64(drift)),
    );
    Ok(out)
}

pub fn degenerate_pair(ctx: &Ctx) -> Result<RunOutput, CliError> {
    let mut out = RunOutput::new();
    let epsilon = ctx.config.f64("epsilon", 0.5)?;
    let n_paths = ctx.paths_or(20_000);
    let steps = ctx.steps_or(128);
    let coarse = lift(generate_paths(
        lift(TimeGrid::new(0.0, 1.0, steps))?,
        n_paths,
        ctx.seed,
    ))?;
    let fine = lift(generate_paths(
        lift(TimeGrid::new(0.0, 1.0, 2 * steps))?,
        n_paths,
        ctx.seed,
    ))?;
    let rep_c = lift(verify_degenerate_pair(epsilon, &coarse))?;
    let rep_f = lift(verify_degenerate_pair(epsilon, &fine))?;

    let mut csv = Csv::new(
        &ctx.provenance(0.0),
        &["steps", "rms_residual_z1", "rms_residual_z2", "mean_z1_terminal", "se_z1_terminal"],
    );
    for (k, rep) in [(steps, &rep_c), (2 * steps, &rep_f)] {
        csv.row(&[
            k.to_string(),
            fmt_f64(rep.rms_residual_z1),
            fmt_f64(rep.rms_residual_z2),
            fmt_f64(rep.mean_z1_terminal),
            fmt_f64(rep.se_z1_terminal),
        ]);
    }
    out.file("residuals.csv", csv.finish());

    let ratio = rep_f.rms_residual_z1 / rep_c.rms_residual_z1;
    out.metric_f64("residual_ratio", ratio);
    out.metric_f64("mean_z1_terminal", rep_c.mean_z1_terminal);
    out.assert(
        "residual-halves-with-dt",
        (0.35..=0.65).contains(&ratio),
        format!("ratio {}", fmt_f64(ratio)),
    );
    out.assert(
        "martingale-mean-one",
        (rep_c.mean_z1_terminal - 1.0).abs() <= 3.0 * rep_c.se_z1_terminal,
        format!(
            "mean {} (se {})",
            fmt_f64(rep_c.mean_z1_terminal),
            fmt_f64(rep_c.se_z1_terminal)
        ),
    );
    Ok(out)
}

pub fn obstruction(ctx: &Ctx) -> Result<RunOutput, CliError> {
    let mut out = RunOutput::new();
    let horizon = ctx.config.f64("horizon", 1.0)?;
    let e = lift(TimeSet::new(ctx.config.intervals("e", &[(0.0, 0.5)])?))?;
    let s0 = ctx.config.f64("s0", 0.5)?;
    let s_eval = ctx.config.f64("s_eval", 0.75)?;
    let g0 = ctx.config.pair("g0", (0.25, 0.75))?;
    let n_max = ctx.config.usize("n_max", 8)?;
    let model = lift(HeatModel1D::constant(n_max, 0.0, 0.0, g0))?;
    let paths = lift(generate_paths(
        lift(TimeGrid::new(0.0, horizon, ctx.steps_or(800)))?,
        ctx.paths_or(20_000),
        ctx.seed,
    ))?;
    let rep = lift(obstruction_counterexample(&model, s0, s_eval, &e, &paths, &|_| 1.0))?;

    let mut csv = Csv::new(&ctx.provenance(0.0), &["t", "mean_zeta_sq", "std_error"]);
    for (t, m, se) in &rep.second_moments {
        csv.row(&[fmt_f64(*t), fmt_f64(*m), fmt_f64(*se)]);
    }
    out.file("second_moments.csv", csv.finish());
    out.metric_f64("state_energy", rep.state_energy);
    out.metric_f64("observation_mass", rep.observation_mass);
    out.metric("predicate", approx_controllability_predicate(&e, horizon).to_string());
    out.assert(
        "probe-ratio-unbounded",
        rep.unbounded,
        format!(
            "energy {} (se {}), mass {}",
            fmt_f64(rep.state_energy),
            fmt_f64(rep.state_energy_se),
            fmt_f64(rep.observation_mass)
        ),
    );
    Ok(out)
}

pub fn bsde_solve(ctx: &Ctx) -> Result<RunOutput, CliError> {
    let mut out = RunOutput::new();
    let lambda = ctx.config.f64("lambda", 0.7)?;
    let a0 = ctx.config.f64("a", 0.0)?;
    let b0 = ctx.config.f64("b", 0.0)?;
    let t_end = ctx.config.f64("horizon", 1.0)?;
    let terminal_kind = ctx.config.string("terminal", "w2")?;
    let terminal: Box<dyn Fn(f64) -> f64> = match terminal_kind.as_str() {
        "w" => Box::new(|w: f64| w),
        "w2" => Box::new(|w: f64| w * w),
        other => {
            return Err(CliError::Config(format!(
                "unknown terminal `{other}` (expected `w` or `w2`)"
            )))
        }
    };
    let steps = ctx.steps_or(50);
    let grid = lift(TimeGrid::new(0.0, t_end, steps))?;
    let dt = grid.dt();
    let paths = lift(generate_paths(grid, ctx.paths_or(8_000), ctx.seed))?;
    let data: Vec<DVector<f64>> = (0..paths.n_paths())
        .map(|p| DVector::from_element(1, terminal(paths.brownian_path(p)[steps])))
        .collect();
    let sol = lift(solve_bsde_lsmc(
        &paths,
        &data,
        |_, y: &DVector<f64>, z: &DVector<f64>| {
            DVector::from_element(1, (a0 - lambda) * y[0] + b0 * z[0])
        },
        LsmcOptions::default(),
    ))?;

    let a_fn = |_: f64| a0;
    let b_fn = |_: f64| b0;
    let exact = lift(
        ModalBsde {
            lambda,
            a: &a_fn,
            b: &b_fn,
            t_end,
            terminal: &*terminal,
        }
        .solve(48, 1e-9),
    )?;
    let exact_y0 = lift(exact.z(0.0, 0.0))?;

    out.metric_f64("y0", sol.y0[0]);
    out.metric_f64("y0_std_error", sol.y0_std_error[0]);
    out.metric_f64("y0_exact", exact_y0);
    out.assert(
        "lsmc-matches-exact",
        (sol.y0[0] - exact_y0).abs() <= 3.0 * sol.y0_std_error[0] + 2.0 * dt,
        format!(
            "lsmc {} vs exact {} (se {})",
            fmt_f64(sol.y0[0]),
            fmt_f64(exact_y0),
            fmt_f64(sol.y0_std_error[0])
        ),
    );

    let export = paths.n_paths().min(5);
    let mut csv = Csv::new(&ctx.provenance(0.0), &["t", "path", "y", "Y"]);
    for p in 0..export {
        for k in 0..=steps {
            csv.row(&[
                fmt_f64(grid.time(k)),
                p.to_string(),
                fmt_f64(sol.y.entry(p, k, 0)),
                fmt_f64(sol.z.entry(p, k, 0)),
            ]);
        }
    }
    out.file("solution.csv", csv.finish());
    Ok(out)
}

struct LqParams {
    q: f64,
    r: f64,
    s: f64,
    sigma: f64,
    x0: f64,
    horizon: f64,
}

fn lq_params(config: &Config) -> Result<LqParams, CliError> {
    Ok(LqParams {
        q: config.f64("q", 1.0)?,
        r: config.f64("r", 1.0)?,
        s: config.f64("s", 1.0)?,
        sigma: config.f64("sigma", 0.5)?,
        x0: config.f64("x0", 1.0)?,
        horizon: config.f64("horizon", 1.0)?,
    })
}

fn lq_control_set(config: &Config) -> Result<ControlSet, CliError> {
    let (lo, hi) = config.pair("control_bounds", (-2.0, 2.0))?;
    let points = config.usize("control_points", 5)?;
    Ok(ControlSet::Grid { lo, hi, points })
}

pub fn mp_check(ctx: &Ctx) -> Result<RunOutput, CliError> {
    let mut out = RunOutput::new();
    let p = lq_params(ctx.config)?;
    let problem = lq_additive(p.q, p.r, p.s, p.sigma, p.x0, p.horizon, lq_control_set(ctx.config)?);
    let steps = ctx.steps_or(100);
    let (ps, j_star) = lq_riccati_oracle(p.q, p.r, p.s, p.sigma, p.x0, p.horizon, steps);

    let dp_steps = ctx.config.usize("dp_steps", 10)?;
    let dp = lift(dp_oracle(&problem, dp_steps))?;
    out.metric_f64("dp_cost", dp.j_star);
    out.metric_f64("riccati_cost", j_star);

    let grid = lift(TimeGrid::new(0.0, p.horizon, steps))?;
    let paths = lift(generate_paths(grid, ctx.paths_or(8_000), ctx.seed))?;
    let second = lift(second_adjoint_for(&problem, 0.0, p.horizon, steps))?;

    // Candidate law: the Riccati feedback, or a constant from the config.
    let law_kind = ctx.config.string("law", "riccati")?;
    let constant = ctx.config.f64("constant_control", 1.5)?;
    let feedback = |k: usize, x: &DVector<f64>| -ps[k] * x[0];
    let open = |_: f64| constant;
    let law = match law_kind.as_str() {
        "riccati" => ControlLaw::Feedback(&feedback),
        "constant" => ControlLaw::OpenLoop(&open),
        other => {
            return Err(CliError::Config(format!(
                "unknown law `{other}` (expected `riccati` or `constant`)"
            )))
        }
    };
    let traj = lift(simulate(&problem, &paths, &law))?;
    let adj = lift(first_adjoint(&problem, &paths, &traj, LsmcOptions::default()))?;
    let rep = lift(check_mp_inequality(&problem, &paths, &traj, &adj, &second))?;

    let mut csv = Csv::new(
        &ctx.provenance(rep.tolerance),
        &["min_s", "argmin_time", "argmin_control", "std_error", "tolerance"],
    );
    csv.row(&[
        fmt_f64(rep.min_s),
        fmt_f64(rep.argmin_time),
        fmt_f64(rep.argmin_control),
        fmt_f64(rep.std_error),
        fmt_f64(rep.tolerance),
    ]);
    out.file("mp_report.csv", csv.finish());
    out.metric_f64("min_s", rep.min_s);
    out.metric_f64("tolerance", rep.tolerance);
    out.assert(
        "mp-inequality-holds",
        rep.passes(),
        format!("min S {} vs -tol {}", fmt_f64(rep.min_s), fmt_f64(-rep.tolerance)),
    );
    Ok(out)
}

pub fn spike(ctx: &Ctx) -> Result<RunOutput, CliError> {
    let mut out = RunOutput::new();
    let p = lq_params(ctx.config)?;
    let problem = lq_additive(p.q, p.r, p.s, p.sigma, p.x0, p.horizon, lq_control_set(ctx.config)?);
    let steps = ctx.steps_or(200);
    let (ps, _) = lq_riccati_oracle(p.q, p.r, p.s, p.sigma, p.x0, p.horizon, steps);
    let grid = lift(TimeGrid::new(0.0, p.horizon, steps))?;
    let paths = lift(generate_paths(grid, ctx.paths_or(8_000), ctx.seed))?;
    let feedback = |k: usize, x: &DVector<f64>| -ps[k] * x[0];
    let law = ControlLaw::Feedback(&feedback);
    let traj = lift(simulate(&problem, &paths, &law))?;
    let adj = lift(first_adjoint(&problem, &paths, &traj, LsmcOptions::default()))?;
    let second = lift(second_adjoint_for(&problem, 0.0, p.horizon, steps))?;

    let u_spike = ctx.config.f64("u_spike", 1.5)?;
    let tau = ctx.config.f64("tau", 0.25)?;
    let epsilons = ctx.config.f64_list("epsilons", &[0.1, 0.05, 0.025])?;
    let rep = lift(spike_variation(
        &problem, &paths, &law, u_spike, tau, &epsilons, &adj, &second,
    ))?;

    let mut csv = Csv::new(
        &ctx.provenance(0.0),
        &[
            "epsilon",
            "measured_slope",
            "slope_std_error",
            "first_order_residual",
            "second_order_residual",
        ],
    );
    for level in &rep.levels {
        csv.row(&[
            fmt_f64(level.epsilon),
            fmt_f64(level.measured_slope),
            fmt_f64(level.slope_std_error),
            fmt_f64(level.first_order_residual),
            fmt_f64(level.second_order_residual),
        ]);
    }
    out.file("spike_levels.csv", csv.finish());
    out.metric_f64("predicted_slope", rep.predicted_slope);
    out.metric_f64("predicted_slope_se", rep.predicted_slope_se);
    out.metric_f64("first_order_rate", rep.first_order_rate);
    out.metric_f64("second_order_rate", rep.second_order_rate);

    let finest = rep.levels.last().expect("at least one level");
    out.assert(
        "spike-slope-matches-prediction",
        (finest.measured_slope - rep.predicted_slope).abs()
            <= 3.0 * (finest.slope_std_error + rep.predicted_slope_se) + 3.0 * finest.epsilon,
        format!(
            "measured {} vs predicted {}",
            fmt_f64(finest.measured_slope),
            fmt_f64(rep.predicted_slope)
        ),
    );
    Ok(out)
}

fn heat_model(ctx: &Ctx) -> Result<(HeatModel1D, Vec<f64>, TimeSet, f64), CliError> {
    let n_max = ctx.config.usize("n_max", 64)?;
    let a = ctx.config.f64("a", 0.0)?;
    let b = ctx.config.f64("b", 0.0)?;
    let g0 = ctx.config.pair("g0", (0.0, 1.0))?;
    let horizon = ctx.config.f64("horizon", 1.0)?;
    let e = lift(TimeSet::new(ctx.config.intervals("e", &[(0.0, horizon)])?))?;
    let model = lift(HeatModel1D::constant(n_max, a, b, g0))?;
    let mut initial = ctx.config.f64_list("y0_modes", &[1.0])?;
    if initial.len() > n_max {
        return Err(CliError::Config("y0_modes longer than n_max".into()));
    }
    initial.resize(n_max, 0.0);
    Ok((model, initial, e, horizon))
}

pub fn heat_null_control(ctx: &Ctx) -> Result<RunOutput, CliError> {
    let mut out = RunOutput::new();
    let tol = ctx.tol_or(1e-4);
    let max_stages = ctx.config.usize("max_stages", 3)?;
    let (model, initial, e, _horizon) = heat_model(ctx)?;
    let outcome = lift(lr_null_control(&model, &initial, &e, tol, max_stages))?;

    let mut csv = Csv::new(
        &ctx.provenance(tol),
        &[
            "stage",
            "r",
            "window_start",
            "window_end",
            "decay_end",
            "sup_control_norm",
            "energy_after_control",
            "energy_after_decay",
        ],
    );
    for s in &outcome.stages {
        csv.row(&[
            s.stage.to_string(),
            fmt_f64(s.r),
            fmt_f64(s.window.0),
            fmt_f64(s.window.1),
            fmt_f64(s.decay_end),
            fmt_f64(s.sup_control_norm),
            fmt_f64(s.energy_after_control),
            fmt_f64(s.energy_after_decay),
        ]);
    }
    out.file("stages.csv", csv.finish());

    // Plot-ready modal trajectory: the leading coefficients at every
    // checkpoint of the staged run.
    let lead = model.n_max.min(8);
    let mut modal = Csv::new(&ctx.provenance(tol), &["t", "mode", "coefficient"]);
    let mut states = vec![&outcome.state_at_first_window];
    for s in &outcome.stages {
        states.push(&s.state_after_control);
        states.push(&s.state_after_decay);
    }
    for state in states {
        for mode in 1..=lead {
            modal.row(&[
                fmt_f64(state.t),
                mode.to_string(),
                fmt_f64(state.coeffs[mode - 1]),
            ]);
        }
    }
    out.file("modal.csv", modal.finish());

    out.metric_f64("first_stage_rank", outcome.stages[0].r);
    out.metric_f64("final_ratio", outcome.final_ratio);
    out.metric("stages", outcome.stages.len().to_string());
    out.assert(
        "terminal-energy-below-tol",
        outcome.achieved,
        format!("final ratio {} vs tol {}", fmt_f64(outcome.final_ratio), fmt_f64(tol)),
    );
    Ok(out)
}

pub fn heat_obs_constant(ctx: &Ctx) -> Result<RunOutput, CliError> {
    let mut out = RunOutput::new();
    let n_max = ctx.config.usize("n_max", 16)?;
    let g0 = ctx.config.pair("g0", (0.25, 0.75))?;
    let max_mode = ctx.config.usize("max_mode", 12)?;
    let model = lift(HeatModel1D::constant(n_max, 0.0, 0.0, g0))?;
    let sweep = lift(obs_constant_sweep(&model, max_mode))?;

    let mut csv = Csv::new(&ctx.provenance(0.0), &["r", "constant"]);
    for (r, c) in &sweep.points {
        csv.row(&[fmt_f64(*r), fmt_f64(*c)]);
    }
    out.file("sweep.csv", csv.finish());
    out.metric_f64("fit_c1", sweep.c1);
    out.metric_f64("fit_c2", sweep.c2);
    out.assert(
        "constant-grows-exponentially-in-sqrt-r",
        sweep.c2 > 0.0,
        format!("fitted rate {}", fmt_f64(sweep.c2)),
    );
    Ok(out)
}

pub fn heat_approx_predicate(ctx: &Ctx) -> Result<RunOutput, CliError> {
    let mut out = RunOutput::new();
    let horizon = ctx.config.f64("horizon", 1.0)?;
    let e = lift(TimeSet::new(ctx.config.intervals("e", &[(0.0, horizon)])?))?;
    let verdict = approx_controllability_predicate(&e, horizon);
    out.metric("approximately_controllable", verdict.to_string());
    out.metric_f64("measure", e.measure());
    out.metric_f64("sup", e.sup());
    Ok(out)
}

pub fn carleman_verify(ctx: &Ctx) -> Result<RunOutput, CliError> {
    let mut out = RunOutput::new();
    let horizon = ctx.config.f64("horizon", 1.0)?;
    let lambda = ctx.config.f64("lambda", 2.0)?;
    let mu = ctx.config.f64("mu", 2.0)?;
    let delta = ctx.config.f64("delta", 0.1)?;
    let base_nt = ctx.config.usize("base_nt", 16)?;
    let base_nx = ctx.config.usize("base_nx", 16)?;
    let levels = ctx.config.usize("levels", 3)?;
    let order_tol = ctx.tol_or(1.8);

    let spec = lift(WeightSpec::new(horizon, lambda, mu, SpatialWeight::parabola(), delta))?;
    let diff = Diffusion::constant(-1.0);
    let h = |t: f64, x: f64| (std::f64::consts::PI * x).sin() * (-t).exp();
    let w = weighted_test_function(&spec, &h);
    let study = lift(identity_convergence(&spec, &diff, &w, base_nt, base_nx, levels))?;

    let mut csv = Csv::new(
        &ctx.provenance(order_tol),
        &["nt", "nx", "ht", "hx", "max_abs", "rms", "scale"],
    );
    for level in &study.levels {
        csv.row(&[
            level.nt.to_string(),
            level.nx.to_string(),
            fmt_f64(level.ht),
            fmt_f64(level.hx),
            fmt_f64(level.max_abs),
            fmt_f64(level.rms),
            fmt_f64(level.scale),
        ]);
    }
    out.file("residuals.csv", csv.finish());
    out.metric_f64("convergence_order", study.order);
    out.assert(
        "residual-converges-at-second-order",
        study.order >= order_tol,
        format!("order {} vs required {}", fmt_f64(study.order), fmt_f64(order_tol)),
    );

    let lambdas = ctx.config.f64_list("asymptotic_lambdas", &[1e2, 1e3, 1e4])?;
    let mus = ctx.config.f64_list("asymptotic_mus", &[8.0, 12.0])?;
    let xs = ctx.config.f64_list("asymptotic_xs", &[0.02, 0.05, 0.1, 0.25, 0.4])?;
    let t_eval = ctx.config.f64("t_eval", horizon / 2.0)?;
    let rows = lift(asymptotic_checks(horizon, t_eval, &lambdas, &mus, &xs))?;
    let mut asy = Csv::new(
        &ctx.provenance(order_tol),
        &["lambda", "mu", "x", "psi_x", "ratio_a", "ratio_b", "ratio_c"],
    );
    let mut worst_a: f64 = 0.0;
    for row in &rows {
        if row.lambda == lambdas[lambdas.len() - 1] {
            worst_a = worst_a.max((row.ratio_a - 1.0).abs());
        }
        asy.row(&[
            fmt_f64(row.lambda),
            fmt_f64(row.mu),
            fmt_f64(row.x),
            fmt_f64(row.psi_x),
            fmt_f64(row.ratio_a),
            fmt_f64(row.ratio_b),
            fmt_f64(row.ratio_c),
        ]);
    }
    out.file("asymptotics.csv", asy.finish());
    out.metric_f64("worst_ratio_a_deviation", worst_a);
    out.assert(
        "zeroth-order-field-normalizes",
        worst_a <= 0.2,
        format!("largest |ratio_a - 1| at top lambda: {}", fmt_f64(worst_a)),
    );
    Ok(out)
}

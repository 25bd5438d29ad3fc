//! Numerical checks of the stochastic Pontryagin maximum principle.
//!
//! For the controlled scalar-noise system
//!
//! ```text
//! dx = a(t, x, u) dt + b(t, x, u) dW,    J(u) = E[ int g(t, x, u) dt + h(x(T)) ],
//! ```
//!
//! with Hamiltonian `H(t, x, u, y, Y) = <y, a> + <Y, b> - g`, an optimal
//! control maximizes the spike-corrected Hamiltonian:
//!
//! ```text
//! S(t, u) = H(t, xbar, ubar, y, Y) - H(t, xbar, u, y, Y)
//!           - 1/2 <P (b(u) - b(ubar)), b(u) - b(ubar)>  >=  0,
//! ```
//!
//! where `(y, Y)` solves the first adjoint BSDE `dy = -H_x dt + Y dW`,
//! `y(T) = -h_x(xbar(T))`, and `P` the second adjoint (here restricted to
//! problems whose linearized coefficients along the candidate pair are
//! deterministic, so `P` solves a matrix ODE).
//!
//! The module provides: candidate simulation, both adjoints, a Monte Carlo
//! estimator of `min S`, spike variations with first/second-order state
//! expansions, the convex-variation inequality for convex control sets,
//! and an exact dynamic-programming oracle on the binomial tree that
//! supplies independently optimal controls for small instances.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::bsde::{solve_bsde_lsmc, BsdeSolution, LsmcOptions, StepContext};
use crate::error::{Error, Result};
use crate::stats;
use crate::stochastic::{PathBundle, VectorSamples};

/// Admissible control values (scalar controls).
#[derive(Debug, Clone)]
pub enum ControlSet {
    /// An explicit finite list.
    Finite(Vec<f64>),
    /// A uniform grid on `[lo, hi]` with `points` values.
    Grid { lo: f64, hi: f64, points: usize },
}

impl ControlSet {
    pub fn values(&self) -> Vec<f64> {
        match self {
            ControlSet::Finite(v) => v.clone(),
            ControlSet::Grid { lo, hi, points } => {
                let n = (*points).max(2);
                (0..n)
                    .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
                    .collect()
            }
        }
    }
}

type ScalarFn = Box<dyn Fn(f64, &DVector<f64>, f64) -> f64>;
type VectorFn = Box<dyn Fn(f64, &DVector<f64>, f64) -> DVector<f64>>;
type MatrixFn = Box<dyn Fn(f64, &DVector<f64>, f64) -> DMatrix<f64>>;
/// Contraction of a second x-derivative tensor with a costate:
/// `(t, x, u, y) -> sum_i y_i d2 a_i / dx2`, an `n x n` matrix.
type BilinearFn = Box<dyn Fn(f64, &DVector<f64>, f64, &DVector<f64>) -> DMatrix<f64>>;

/// A stochastic control problem with scalar control and scalar noise.
///
/// Derivative fields must be consistent with their base functions; the
/// spike-variation machinery uses them verbatim. Second derivatives of the
/// dynamics default to zero (the common control-affine, state-linear case)
/// unless supplied.
pub struct ControlProblem {
    pub dim: usize,
    pub x0: DVector<f64>,
    pub horizon: f64,
    pub controls: ControlSet,
    pub drift: VectorFn,
    pub diffusion: VectorFn,
    pub running_cost: ScalarFn,
    pub terminal_cost: Box<dyn Fn(&DVector<f64>) -> f64>,
    /// Jacobians in x.
    pub drift_x: MatrixFn,
    pub diffusion_x: MatrixFn,
    pub running_cost_x: VectorFn,
    pub terminal_cost_x: Box<dyn Fn(&DVector<f64>) -> DVector<f64>>,
    /// Second derivatives in x.
    pub running_cost_xx: MatrixFn,
    pub terminal_cost_xx: Box<dyn Fn(&DVector<f64>) -> DMatrix<f64>>,
    /// Optional costate-contracted second derivatives of the dynamics.
    pub drift_xx: Option<BilinearFn>,
    pub diffusion_xx: Option<BilinearFn>,
    /// Derivatives in the control, needed only by the convex-variation check.
    pub drift_u: Option<VectorFn>,
    pub diffusion_u: Option<VectorFn>,
    pub running_cost_u: Option<ScalarFn>,
}

impl ControlProblem {
    /// Hamiltonian `<y, a> + <Y, b> - g`.
    pub fn hamiltonian(
        &self,
        t: f64,
        x: &DVector<f64>,
        u: f64,
        y: &DVector<f64>,
        y_mart: &DVector<f64>,
    ) -> f64 {
        y.dot(&(self.drift)(t, x, u)) + y_mart.dot(&(self.diffusion)(t, x, u))
            - (self.running_cost)(t, x, u)
    }
}

/// A control policy: open loop in time, or feedback on the grid state.
pub enum ControlLaw<'a> {
    OpenLoop(&'a dyn Fn(f64) -> f64),
    Feedback(&'a dyn Fn(usize, &DVector<f64>) -> f64),
}

impl ControlLaw<'_> {
    pub fn eval(&self, k: usize, t: f64, x: &DVector<f64>) -> f64 {
        match self {
            ControlLaw::OpenLoop(f) => f(t),
            ControlLaw::Feedback(f) => f(k, x),
        }
    }
}

/// A simulated state/control pair on a bundle.
pub struct ControlledPath {
    pub x: VectorSamples,
    /// Control values, one scalar per node (node `K` repeats `K-1`).
    pub u: VectorSamples,
}

/// Simulate the closed-loop system under `law` on the bundle.
pub fn simulate(
    problem: &ControlProblem,
    paths: &PathBundle,
    law: &ControlLaw,
) -> Result<ControlledPath> {
    let grid = paths.grid();
    let dt = grid.dt();
    let mut x_out = VectorSamples::zeros(grid, paths.n_paths(), problem.dim);
    let mut u_out = VectorSamples::zeros(grid, paths.n_paths(), 1);
    for p in 0..paths.n_paths() {
        let dw = paths.increments(p);
        let mut x = problem.x0.clone();
        x_out.set_node(p, 0, x.as_slice());
        for k in 0..grid.steps() {
            let t = grid.time(k);
            let u = law.eval(k, t, &x);
            u_out.set_node(p, k, &[u]);
            x += (problem.drift)(t, &x, u) * dt + (problem.diffusion)(t, &x, u) * dw[k];
            if !x.iter().all(|v| v.is_finite()) {
                return Err(Error::Divergence {
                    step: k,
                    detail: format!("controlled state non-finite on path {p}"),
                });
            }
            x_out.set_node(p, k + 1, x.as_slice());
        }
        let last = u_out.node(p, grid.steps() - 1).to_vec();
        u_out.set_node(p, grid.steps(), &last);
    }
    Ok(ControlledPath { x: x_out, u: u_out })
}

/// Monte Carlo cost `J = E[int g dt + h(x(T))]` of a simulated pair,
/// with per-path samples exposed for common-random-number comparisons.
pub fn cost_samples(problem: &ControlProblem, traj: &ControlledPath) -> Vec<f64> {
    let grid = traj.x.grid();
    let dt = grid.dt();
    (0..traj.x.n_paths())
        .map(|p| {
            let mut acc = 0.0;
            for k in 0..grid.steps() {
                let x = traj.x.node_vector(p, k);
                acc += (problem.running_cost)(grid.time(k), &x, traj.u.entry(p, k, 0)) * dt;
            }
            acc + (problem.terminal_cost)(&traj.x.node_vector(p, grid.steps()))
        })
        .collect()
}

/// First adjoint along a candidate pair: the BSDE
/// `dy = -H_x dt + Y dW`, `y(T) = -h_x(xbar(T))`, solved by LSMC with the
/// linearized coefficients frozen along the simulated pair.
pub fn first_adjoint(
    problem: &ControlProblem,
    paths: &PathBundle,
    traj: &ControlledPath,
    options: LsmcOptions,
) -> Result<BsdeSolution> {
    let grid = paths.grid();
    let terminal: Vec<DVector<f64>> = (0..paths.n_paths())
        .map(|p| -(problem.terminal_cost_x)(&traj.x.node_vector(p, grid.steps())))
        .collect();
    solve_bsde_lsmc(
        paths,
        &terminal,
        |ctx: StepContext, y: &DVector<f64>, z: &DVector<f64>| {
            let x = traj.x.node_vector(ctx.path, ctx.k);
            let u = traj.u.entry(ctx.path, ctx.k, 0);
            let ax = (problem.drift_x)(ctx.t, &x, u);
            let bx = (problem.diffusion_x)(ctx.t, &x, u);
            let gx = (problem.running_cost_x)(ctx.t, &x, u);
            ax.transpose() * y + bx.transpose() * z - gx
        },
        options,
    )
}

/// Deterministic coefficient functions for the second adjoint.
pub struct SecondAdjointCoeffs<'a> {
    pub drift_x: &'a dyn Fn(f64) -> DMatrix<f64>,
    pub diffusion_x: &'a dyn Fn(f64) -> DMatrix<f64>,
    /// `H_xx(t)` along the candidate pair (includes the costate-contracted
    /// second derivatives of the dynamics and `-g_xx`).
    pub hamiltonian_xx: &'a dyn Fn(f64) -> DMatrix<f64>,
    /// `P(T) = -h_xx`.
    pub terminal: DMatrix<f64>,
}

/// Second adjoint `P(t)` on a uniform grid, from the backward Lyapunov ODE
/// `dP/dt = -(a_x^T P + P a_x + b_x^T P b_x + H_xx)`, integrated by RK4.
/// Only valid when all coefficients are deterministic functions of time;
/// the caller asserts that by constructing [`SecondAdjointCoeffs`].
pub fn second_adjoint(
    coeffs: &SecondAdjointCoeffs,
    horizon: f64,
    steps: usize,
) -> Result<Vec<DMatrix<f64>>> {
    if !(horizon > 0.0) || steps == 0 {
        return Err(Error::InvalidParameter("need positive horizon and steps".into()));
    }
    let n = coeffs.terminal.nrows();
    if coeffs.terminal.ncols() != n {
        return Err(Error::Shape("terminal condition must be square".into()));
    }
    let dt = horizon / steps as f64;
    let rhs = |t: f64, p: &DMatrix<f64>| -> DMatrix<f64> {
        let ax = (coeffs.drift_x)(t);
        let bx = (coeffs.diffusion_x)(t);
        -(ax.transpose() * p + p * ax + bx.transpose() * p * bx + (coeffs.hamiltonian_xx)(t))
    };
    let mut out = vec![DMatrix::zeros(n, n); steps + 1];
    out[steps] = coeffs.terminal.clone();
    let mut p = coeffs.terminal.clone();
    for k in (0..steps).rev() {
        // Integrate backward from t_{k+1} to t_k.
        let t1 = (k + 1) as f64 * dt;
        let k1 = rhs(t1, &p);
        let k2 = rhs(t1 - 0.5 * dt, &(&p - &k1 * (0.5 * dt)));
        let k3 = rhs(t1 - 0.5 * dt, &(&p - &k2 * (0.5 * dt)));
        let k4 = rhs(t1 - dt, &(&p - &k3 * dt));
        p -= (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
        // The Lyapunov flow preserves symmetry; re-symmetrize roundoff.
        p = (&p + p.transpose()) * 0.5;
        out[k] = p.clone();
    }
    Ok(out)
}

/// Build deterministic second-adjoint coefficients directly from a problem
/// whose linearizations do not depend on the state or control (checked by
/// probing); `H_xx` then reduces to `-g_xx` plus optional second-derivative
/// terms, which must also be state-independent.
pub fn second_adjoint_for(
    problem: &ControlProblem,
    reference_control: f64,
    horizon: f64,
    steps: usize,
) -> Result<Vec<DMatrix<f64>>> {
    let n = problem.dim;
    let probe_points: Vec<DVector<f64>> = vec![
        DVector::zeros(n),
        DVector::from_element(n, 1.0),
        DVector::from_fn(n, |i, _| -0.7 + 0.3 * i as f64),
    ];
    let us = problem.controls.values();
    let check = |f: &MatrixFn, name: &str| -> Result<DMatrix<f64>> {
        let base = f(0.5 * horizon, &probe_points[0], reference_control);
        for x in &probe_points {
            for &u in us.iter().take(3) {
                if (f(0.5 * horizon, x, u) - &base).amax() > 1e-9 {
                    return Err(Error::Unsupported(format!(
                        "{name} depends on the state or control; supply deterministic \
                         coefficients explicitly"
                    )));
                }
            }
        }
        Ok(base)
    };
    let ax = check(&problem.drift_x, "drift_x")?;
    let bx = check(&problem.diffusion_x, "diffusion_x")?;
    let gxx = check(&problem.running_cost_xx, "running_cost_xx")?;
    if problem.drift_xx.is_some() || problem.diffusion_xx.is_some() {
        return Err(Error::Unsupported(
            "nonzero dynamics curvature: supply deterministic coefficients explicitly".into(),
        ));
    }
    let terminal = -(problem.terminal_cost_xx)(&problem.x0);
    let coeffs = SecondAdjointCoeffs {
        drift_x: &|_| ax.clone(),
        diffusion_x: &|_| bx.clone(),
        hamiltonian_xx: &|_| -gxx.clone(),
        terminal,
    };
    second_adjoint(&coeffs, horizon, steps)
}

/// Result of scanning the maximum-principle inequality.
#[derive(Debug, Clone)]
pub struct MpReport {
    /// Minimum over grid times and control values of the cross-path mean
    /// of `S(t, u)`.
    pub min_s: f64,
    pub argmin_time: f64,
    pub argmin_control: f64,
    /// Standard error of the mean at the minimizer.
    pub std_error: f64,
    /// Suggested tolerance `3 se + 5 dt` at the minimizer.
    pub tolerance: f64,
}

impl MpReport {
    pub fn passes(&self) -> bool {
        self.min_s >= -self.tolerance
    }
}

/// Scan `S(t, u)` over all grid nodes and admissible control values.
pub fn check_mp_inequality(
    problem: &ControlProblem,
    paths: &PathBundle,
    traj: &ControlledPath,
    adjoint: &BsdeSolution,
    second: &[DMatrix<f64>],
) -> Result<MpReport> {
    let grid = paths.grid();
    if second.len() != grid.nodes() {
        return Err(Error::Shape(
            "second adjoint must be sampled at every grid node".into(),
        ));
    }
    let dt = grid.dt();
    let us = problem.controls.values();
    let n_paths = paths.n_paths();
    let mut best: Option<(f64, usize, f64, f64)> = None;
    let mut samples = vec![0.0f64; n_paths];
    for k in 0..grid.steps() {
        let t = grid.time(k);
        for &u in &us {
            for (p, s) in samples.iter_mut().enumerate() {
                let x = traj.x.node_vector(p, k);
                let ub = traj.u.entry(p, k, 0);
                let y = adjoint.y.node_vector(p, k);
                let z = adjoint.z.node_vector(p, k);
                let db = (problem.diffusion)(t, &x, u) - (problem.diffusion)(t, &x, ub);
                *s = problem.hamiltonian(t, &x, ub, &y, &z)
                    - problem.hamiltonian(t, &x, u, &y, &z)
                    - 0.5 * db.dot(&(&second[k] * &db));
            }
            let (m, se) = stats::mean_with_se(&samples);
            if best.map_or(true, |(b, _, _, _)| m < b) {
                best = Some((m, k, u, se));
            }
        }
    }
    let (min_s, k, u, se) = best.expect("at least one (t, u) cell");
    Ok(MpReport {
        min_s,
        argmin_time: grid.time(k),
        argmin_control: u,
        std_error: se,
        tolerance: 3.0 * se + 5.0 * dt,
    })
}

/// Convex-variation first-order condition for convex control sets:
/// `E <H_u(t, xbar, ubar, y, Y), u - ubar> <= 0` for all admissible `u`.
#[derive(Debug, Clone)]
pub struct ConvexVariationReport {
    pub max_violation: f64,
    pub argmax_time: f64,
    pub argmax_control: f64,
    pub std_error: f64,
    pub tolerance: f64,
}

impl ConvexVariationReport {
    pub fn passes(&self) -> bool {
        self.max_violation <= self.tolerance
    }
}

pub fn convex_variation_check(
    problem: &ControlProblem,
    paths: &PathBundle,
    traj: &ControlledPath,
    adjoint: &BsdeSolution,
) -> Result<ConvexVariationReport> {
    let (au, bu, gu) = match (&problem.drift_u, &problem.diffusion_u, &problem.running_cost_u) {
        (Some(a), Some(b), Some(g)) => (a, b, g),
        _ => {
            return Err(Error::Unsupported(
                "convex variation check needs control derivatives (drift_u, diffusion_u, running_cost_u)"
                    .into(),
            ))
        }
    };
    let grid = paths.grid();
    let dt = grid.dt();
    let us = problem.controls.values();
    let n_paths = paths.n_paths();
    let mut worst: Option<(f64, usize, f64, f64)> = None;
    let mut samples = vec![0.0f64; n_paths];
    for k in 0..grid.steps() {
        let t = grid.time(k);
        for &u in &us {
            for (p, s) in samples.iter_mut().enumerate() {
                let x = traj.x.node_vector(p, k);
                let ub = traj.u.entry(p, k, 0);
                let y = adjoint.y.node_vector(p, k);
                let z = adjoint.z.node_vector(p, k);
                let hu = y.dot(&au(t, &x, ub)) + z.dot(&bu(t, &x, ub)) - gu(t, &x, ub);
                *s = hu * (u - ub);
            }
            let (m, se) = stats::mean_with_se(&samples);
            if worst.map_or(true, |(b, _, _, _)| m > b) {
                worst = Some((m, k, u, se));
            }
        }
    }
    let (max_violation, k, u, se) = worst.expect("at least one cell");
    Ok(ConvexVariationReport {
        max_violation,
        argmax_time: grid.time(k),
        argmax_control: u,
        std_error: se,
        tolerance: 3.0 * se + 5.0 * dt,
    })
}

/// One epsilon-level of a spike-variation experiment.
#[derive(Debug, Clone)]
pub struct SpikeLevel {
    pub epsilon: f64,
    /// RMS at `T` of `x_eps - xbar - x1`.
    pub first_order_residual: f64,
    /// RMS at `T` of `x_eps - xbar - x1 - x2`.
    pub second_order_residual: f64,
    /// `(J(u_eps) - J(ubar)) / eps` with common random numbers.
    pub measured_slope: f64,
    pub slope_std_error: f64,
}

/// Spike-variation report across epsilon levels.
#[derive(Debug, Clone)]
pub struct SpikeReport {
    pub levels: Vec<SpikeLevel>,
    /// Predicted cost slope `E[S(tau, u_spike)]` from the adjoints.
    pub predicted_slope: f64,
    pub predicted_slope_se: f64,
    /// Log-log fitted decay orders of the two residuals in epsilon.
    pub first_order_rate: f64,
    pub second_order_rate: f64,
}

/// Perturb the candidate control to `u_spike` on `[tau, tau + eps)` for
/// each epsilon, and compare the cost change and the state deviation with
/// the first/second-order expansion driven by the adjoint variables.
#[allow(clippy::too_many_arguments)]
pub fn spike_variation(
    problem: &ControlProblem,
    paths: &PathBundle,
    law: &ControlLaw,
    u_spike: f64,
    tau: f64,
    epsilons: &[f64],
    adjoint: &BsdeSolution,
    second: &[DMatrix<f64>],
) -> Result<SpikeReport> {
    let grid = paths.grid();
    let dt = grid.dt();
    if epsilons.is_empty() {
        return Err(Error::InvalidParameter("need at least one epsilon".into()));
    }
    for &e in epsilons {
        if e < dt - 1e-12 {
            return Err(Error::InvalidParameter(format!(
                "epsilon {e} is below the grid resolution {dt}"
            )));
        }
    }
    let k_tau = grid
        .index_of(tau)
        .ok_or_else(|| Error::InvalidParameter(format!("tau = {tau} is not a grid node")))?;
    let base = simulate(problem, paths, law)?;
    let base_cost = cost_samples(problem, &base);
    let n_paths = paths.n_paths();

    // Predicted slope: E[S(tau, u_spike)] with the same S as the MP scan.
    let mut s_samples = Vec::with_capacity(n_paths);
    for p in 0..n_paths {
        let x = base.x.node_vector(p, k_tau);
        let ub = base.u.entry(p, k_tau, 0);
        let y = adjoint.y.node_vector(p, k_tau);
        let z = adjoint.z.node_vector(p, k_tau);
        let db = (problem.diffusion)(tau, &x, u_spike) - (problem.diffusion)(tau, &x, ub);
        s_samples.push(
            problem.hamiltonian(tau, &x, ub, &y, &z)
                - problem.hamiltonian(tau, &x, u_spike, &y, &z)
                - 0.5 * db.dot(&(second[k_tau] .clone()* &db)),
        );
    }
    let (predicted_slope, predicted_slope_se) = stats::mean_with_se(&s_samples);

    let mut levels = Vec::with_capacity(epsilons.len());
    for &eps in epsilons {
        let spike_end = tau + eps;
        let in_spike = |t: f64| t >= tau - 1e-12 && t < spike_end - 1e-12;

        // Perturbed trajectory with common noise. Off the spike window the
        // *recorded* candidate control is replayed path by path: the spike
        // comparison is between control processes, not feedback laws.
        let mut x_eps = VectorSamples::zeros(grid, n_paths, problem.dim);
        let mut eps_cost = vec![0.0f64; n_paths];
        let mut first_sq = 0.0;
        let mut second_sq = 0.0;
        for p in 0..n_paths {
            let dw = paths.increments(p);
            let mut x = problem.x0.clone();
            let mut x1: DVector<f64> = DVector::zeros(problem.dim);
            let mut x2: DVector<f64> = DVector::zeros(problem.dim);
            x_eps.set_node(p, 0, x.as_slice());
            let mut cost = 0.0;
            for k in 0..grid.steps() {
                let t = grid.time(k);
                let u = if in_spike(t) {
                    u_spike
                } else {
                    base.u.entry(p, k, 0)
                };
                cost += (problem.running_cost)(t, &x, u) * dt;

                // Expansion coefficients along the unperturbed pair.
                let xb = base.x.node_vector(p, k);
                let ub = base.u.entry(p, k, 0);
                let ax = (problem.drift_x)(t, &xb, ub);
                let bx = (problem.diffusion_x)(t, &xb, ub);
                let chi = if in_spike(t) { 1.0 } else { 0.0 };
                let da = (problem.drift)(t, &xb, u_spike) - (problem.drift)(t, &xb, ub);
                let db = (problem.diffusion)(t, &xb, u_spike) - (problem.diffusion)(t, &xb, ub);
                let dbx = (problem.diffusion_x)(t, &xb, u_spike) - &bx;

                // Quadratic terms 1/2 a_xx(x1, x1): probe the tensor one
                // component at a time through the costate-contraction form
                // (g(t, x, u, e_i) returns the Hessian of component i).
                type Bilinear = dyn Fn(f64, &DVector<f64>, f64, &DVector<f64>) -> DMatrix<f64>;
                let quad = |f: Option<&Bilinear>| -> DVector<f64> {
                    match f {
                        None => DVector::zeros(problem.dim),
                        Some(g) => {
                            let mut v = DVector::zeros(problem.dim);
                            for i in 0..problem.dim {
                                let mut e = DVector::zeros(problem.dim);
                                e[i] = 1.0;
                                let m = g(t, &xb, ub, &e);
                                v[i] = x1.dot(&(&m * &x1));
                            }
                            v
                        }
                    }
                };
                let a_quad = quad(problem.drift_xx.as_deref());
                let b_quad = quad(problem.diffusion_xx.as_deref());

                let x1_new = &x1 + (&ax * &x1) * dt + ((&bx * &x1) + &db * chi) * dw[k];
                let x2_new = &x2
                    + ((&ax * &x2) + &da * chi + a_quad * 0.5) * dt
                    + ((&bx * &x2) + b_quad * 0.5 + (&dbx * &x1) * chi) * dw[k];
                x1 = x1_new;
                x2 = x2_new;

                x += (problem.drift)(t, &x, u) * dt + (problem.diffusion)(t, &x, u) * dw[k];
                if !x.iter().all(|v| v.is_finite()) {
                    return Err(Error::Divergence {
                        step: k,
                        detail: format!("spiked state non-finite on path {p}"),
                    });
                }
                x_eps.set_node(p, k + 1, x.as_slice());
            }
            cost += (problem.terminal_cost)(&x);
            eps_cost[p] = cost;
            let xb_t = base.x.node_vector(p, grid.steps());
            let d1 = (&x - &xb_t - &x1).norm_squared();
            let d2 = (&x - &xb_t - &x1 - &x2).norm_squared();
            first_sq += d1;
            second_sq += d2;
        }
        let diffs: Vec<f64> = eps_cost
            .iter()
            .zip(&base_cost)
            .map(|(a, b)| (a - b) / eps)
            .collect();
        let (measured_slope, slope_std_error) = stats::mean_with_se(&diffs);
        levels.push(SpikeLevel {
            epsilon: eps,
            first_order_residual: (first_sq / n_paths as f64).sqrt(),
            second_order_residual: (second_sq / n_paths as f64).sqrt(),
            measured_slope,
            slope_std_error,
        });
    }

    let rate = |pick: &dyn Fn(&SpikeLevel) -> f64| -> f64 {
        if levels.len() < 2 {
            return f64::NAN;
        }
        let xs: Vec<f64> = levels.iter().map(|l| l.epsilon.ln()).collect();
        let ys: Vec<f64> = levels.iter().map(|l| pick(l).max(1e-300).ln()).collect();
        let xm = stats::mean(&xs);
        let ym = stats::mean(&ys);
        let num: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - xm) * (y - ym)).sum();
        let den: f64 = xs.iter().map(|x| (x - xm) * (x - xm)).sum();
        num / den
    };
    let first_order_rate = rate(&|l| l.first_order_residual);
    let second_order_rate = rate(&|l| l.second_order_residual);
    Ok(SpikeReport {
        levels,
        predicted_slope,
        predicted_slope_se,
        first_order_rate,
        second_order_rate,
    })
}

/// Exact dynamic-programming solution on the binomial tree.
///
/// The Brownian increment is replaced by `+- sqrt(dt)` with probability
/// 1/2; value iteration runs on the exact set of reachable states per
/// level (deduplicated by quantization), so the result is the true optimum
/// of the discretized problem. State count guards keep the enumeration
/// tractable; affine-in-control dynamics on a uniform control grid
/// recombine and stay small.
pub struct DpSolution {
    pub steps: usize,
    pub dt: f64,
    /// Optimal cost from `(0, x0)`.
    pub j_star: f64,
    /// Reachable states per level (sorted).
    pub states: Vec<Vec<f64>>,
    /// Optimal control per (level, state).
    pub controls: Vec<Vec<f64>>,
    /// Value function per (level, state).
    pub values: Vec<Vec<f64>>,
}

impl DpSolution {
    /// Feedback law by linear interpolation of the optimal control across
    /// the level's reachable states (clamped at the edges).
    pub fn feedback(&self, level: usize, x: f64) -> f64 {
        let k = level.min(self.steps - 1);
        let xs = &self.states[k];
        let us = &self.controls[k];
        match xs.binary_search_by(|v| v.total_cmp(&x)) {
            Ok(i) => us[i],
            Err(0) => us[0],
            Err(i) if i >= xs.len() => us[xs.len() - 1],
            Err(i) => {
                let (x0, x1) = (xs[i - 1], xs[i]);
                let t = (x - x0) / (x1 - x0);
                us[i - 1] * (1.0 - t) + us[i] * t
            }
        }
    }
}

/// Maximum number of tree states across all levels.
const DP_STATE_BUDGET: usize = 2_000_000;

pub fn dp_oracle(problem: &ControlProblem, steps: usize) -> Result<DpSolution> {
    if problem.dim != 1 {
        return Err(Error::Unsupported(
            "the binomial-tree oracle handles scalar states only".into(),
        ));
    }
    if steps == 0 || steps > 12 {
        return Err(Error::Resource(format!(
            "binomial tree depth {steps} outside the supported range 1..=12"
        )));
    }
    let us = problem.controls.values();
    if us.len() > 8 {
        return Err(Error::Resource(format!(
            "control set of size {} exceeds the oracle budget of 8",
            us.len()
        )));
    }
    let dt = problem.horizon / steps as f64;
    let sdt = dt.sqrt();
    let scale = problem.x0[0].abs().max(1.0);
    let quant = 1e-9 * scale;
    let key = |x: f64| -> i64 { (x / quant).round() as i64 };
    let xv = |x: f64| DVector::from_element(1, x);

    // Forward pass: reachable states per level.
    let mut states: Vec<Vec<f64>> = Vec::with_capacity(steps + 1);
    let mut level: BTreeMap<i64, f64> = BTreeMap::new();
    level.insert(key(problem.x0[0]), problem.x0[0]);
    let mut total = 1usize;
    states.push(level.values().copied().collect());
    for k in 0..steps {
        let t = k as f64 * dt;
        let mut next: BTreeMap<i64, f64> = BTreeMap::new();
        for &x in states[k].iter() {
            for &u in &us {
                let a = (problem.drift)(t, &xv(x), u)[0];
                let b = (problem.diffusion)(t, &xv(x), u)[0];
                for s in [1.0f64, -1.0] {
                    let child = x + a * dt + s * b * sdt;
                    next.entry(key(child)).or_insert(child);
                }
            }
        }
        total += next.len();
        if total > DP_STATE_BUDGET {
            return Err(Error::Resource(format!(
                "binomial tree exceeded the state budget ({total} states by level {})",
                k + 1
            )));
        }
        states.push(next.values().copied().collect());
    }

    // Backward value iteration on the exact reachable sets.
    let mut values: Vec<Vec<f64>> = states
        .iter()
        .map(|lvl| vec![0.0; lvl.len()])
        .collect();
    let mut controls: Vec<Vec<f64>> = states
        .iter()
        .map(|lvl| vec![0.0; lvl.len()])
        .collect();
    let index: Vec<BTreeMap<i64, usize>> = states
        .iter()
        .map(|lvl| lvl.iter().enumerate().map(|(i, &x)| (key(x), i)).collect())
        .collect();
    for (i, &x) in states[steps].iter().enumerate() {
        values[steps][i] = (problem.terminal_cost)(&xv(x));
    }
    for k in (0..steps).rev() {
        let t = k as f64 * dt;
        for (i, &x) in states[k].iter().enumerate() {
            let mut best = (f64::INFINITY, us[0]);
            for &u in &us {
                let a = (problem.drift)(t, &xv(x), u)[0];
                let b = (problem.diffusion)(t, &xv(x), u)[0];
                let up = index[k + 1][&key(x + a * dt + b * sdt)];
                let dn = index[k + 1][&key(x + a * dt - b * sdt)];
                let v = (problem.running_cost)(t, &xv(x), u) * dt
                    + 0.5 * (values[k + 1][up] + values[k + 1][dn]);
                if v < best.0 {
                    best = (v, u);
                }
            }
            values[k][i] = best.0;
            controls[k][i] = best.1;
        }
    }
    let j_star = values[0][0];
    Ok(DpSolution {
        steps,
        dt,
        j_star,
        states,
        controls,
        values,
    })
}

/// Linear-quadratic instance with additive noise:
/// `dx = u dt + sigma dW`, `g = (q x^2 + r u^2)/2`, `h = s x(T)^2 / 2`.
pub fn lq_additive(
    q: f64,
    r: f64,
    s: f64,
    sigma: f64,
    x0: f64,
    horizon: f64,
    controls: ControlSet,
) -> ControlProblem {
    ControlProblem {
        dim: 1,
        x0: DVector::from_element(1, x0),
        horizon,
        controls,
        drift: Box::new(|_, _, u| DVector::from_element(1, u)),
        diffusion: Box::new(move |_, _, _| DVector::from_element(1, sigma)),
        running_cost: Box::new(move |_, x, u| 0.5 * (q * x[0] * x[0] + r * u * u)),
        terminal_cost: Box::new(move |x| 0.5 * s * x[0] * x[0]),
        drift_x: Box::new(|_, _, _| DMatrix::zeros(1, 1)),
        diffusion_x: Box::new(|_, _, _| DMatrix::zeros(1, 1)),
        running_cost_x: Box::new(move |_, x, _| DVector::from_element(1, q * x[0])),
        terminal_cost_x: Box::new(move |x| DVector::from_element(1, s * x[0])),
        running_cost_xx: Box::new(move |_, _, _| DMatrix::from_element(1, 1, q)),
        terminal_cost_xx: Box::new(move |_| DMatrix::from_element(1, 1, s)),
        drift_xx: None,
        diffusion_xx: None,
        drift_u: Some(Box::new(|_, _, _| DVector::from_element(1, 1.0))),
        diffusion_u: Some(Box::new(|_, _, _| DVector::from_element(1, 0.0))),
        running_cost_u: Some(Box::new(move |_, _, u| r * u)),
    }
}

/// Linear-quadratic instance with control in the diffusion:
/// `dx = u dt + (sigma + delta u) dW`; the second adjoint now enters the
/// maximum-principle inequality through `delta (u - ubar)`.
#[allow(clippy::too_many_arguments)]
pub fn lq_control_diffusion(
    q: f64,
    r: f64,
    s: f64,
    sigma: f64,
    delta: f64,
    x0: f64,
    horizon: f64,
    controls: ControlSet,
) -> ControlProblem {
    let mut p = lq_additive(q, r, s, sigma, x0, horizon, controls);
    p.diffusion = Box::new(move |_, _, u| DVector::from_element(1, sigma + delta * u));
    p.diffusion_u = Some(Box::new(move |_, _, _| DVector::from_element(1, delta)));
    p
}

/// Bang-bang instance on a finite control set: `dx = u dt + sigma dW`,
/// no running cost, concave terminal reward `h = -x(T)^2 / 2` (i.e. the
/// optimizer pushes `|x(T)|` as large as possible), `U = {-1, +1}`.
pub fn bang_bang(sigma: f64, x0: f64, horizon: f64) -> ControlProblem {
    ControlProblem {
        dim: 1,
        x0: DVector::from_element(1, x0),
        horizon,
        controls: ControlSet::Finite(vec![-1.0, 1.0]),
        drift: Box::new(|_, _, u| DVector::from_element(1, u)),
        diffusion: Box::new(move |_, _, _| DVector::from_element(1, sigma)),
        running_cost: Box::new(|_, _, _| 0.0),
        terminal_cost: Box::new(|x| -0.5 * x[0] * x[0]),
        drift_x: Box::new(|_, _, _| DMatrix::zeros(1, 1)),
        diffusion_x: Box::new(|_, _, _| DMatrix::zeros(1, 1)),
        running_cost_x: Box::new(|_, _, _| DVector::zeros(1)),
        terminal_cost_x: Box::new(|x| DVector::from_element(1, -x[0])),
        running_cost_xx: Box::new(|_, _, _| DMatrix::zeros(1, 1)),
        terminal_cost_xx: Box::new(|_| DMatrix::from_element(1, 1, -1.0)),
        drift_xx: None,
        diffusion_xx: None,
        drift_u: Some(Box::new(|_, _, _| DVector::from_element(1, 1.0))),
        diffusion_u: Some(Box::new(|_, _, _| DVector::from_element(1, 0.0))),
        running_cost_u: Some(Box::new(|_, _, _| 0.0)),
    }
}

/// Scalar Riccati oracle for the additive LQ problem: solves
/// `-p' = q - p^2 / r`, `p(T) = s` by RK4 and returns `(p(t_k))_k` together
/// with the optimal cost `J* = p(0) x0^2 / 2 + sigma^2/2 int p`.
pub fn lq_riccati_oracle(
    q: f64,
    r: f64,
    s: f64,
    sigma: f64,
    x0: f64,
    horizon: f64,
    steps: usize,
) -> (Vec<f64>, f64) {
    let dt = horizon / steps as f64;
    // p' = p^2 / r - q; march backward from p(T) = s.
    let rhs = |p: f64| p * p / r - q;
    let mut ps = vec![0.0; steps + 1];
    ps[steps] = s;
    let mut p = s;
    for k in (0..steps).rev() {
        let k1 = rhs(p);
        let k2 = rhs(p - 0.5 * dt * k1);
        let k3 = rhs(p - 0.5 * dt * k2);
        let k4 = rhs(p - dt * k3);
        p -= dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        ps[k] = p;
    }
    // Trapezoid for the additive-noise contribution.
    let mut integral = 0.0;
    for k in 0..steps {
        integral += 0.5 * (ps[k] + ps[k + 1]) * dt;
    }
    let j_star = 0.5 * ps[0] * x0 * x0 + 0.5 * sigma * sigma * integral;
    (ps, j_star)
}

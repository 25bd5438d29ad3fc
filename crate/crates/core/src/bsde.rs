//! Backward stochastic differential equations driven by a scalar Brownian
//! motion, with the sign convention
//!
//! ```text
//! y(t) = xi + int_t^T f(s, y, Z) ds - int_t^T Z dW,     i.e. dy = -f dt + Z dW.
//! ```
//!
//! Two solvers:
//!
//! - [`solve_bsde_lsmc`]: least-squares Monte Carlo backward induction on a
//!   path bundle. Conditional expectations are projections onto monomials
//!   of the current Brownian value; `Z` comes from the martingale-increment
//!   regression `Z(tau_k) = E[y(tau_{k+1}) dW_k | F_k] / dt`, and each `y`
//!   step solves its implicit generator term by Picard iteration.
//! - [`ModalBsde::solve`]: an exact change-of-measure solution for the
//!   scalar linear equation `dz - lambda z dt = -[a z + b Z] dt + Z dW`
//!   with deterministic time-dependent `a, b` and terminal datum
//!   `g(W(T))`. The exponential kernel reduces the conditional expectation
//!   to a one-dimensional Gaussian integral evaluated by Gauss-Hermite
//!   quadrature with node-doubling error control.
//!
//! [`verify_transposition_identity`] checks the duality pairing between a
//! solved BSDE and an arbitrary forward Ito process on the same bundle,
//! which is the numerical face of the transposition-solution concept.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::stats;
use crate::stochastic::{PathBundle, VectorSamples};

/// Time/path context handed to generator callbacks, so coefficients may
/// depend on frozen per-path data (e.g. a simulated optimal trajectory).
#[derive(Debug, Clone, Copy)]
pub struct StepContext {
    pub k: usize,
    pub path: usize,
    pub t: f64,
}

/// Options for the least-squares Monte Carlo solver.
#[derive(Debug, Clone, Copy)]
pub struct LsmcOptions {
    /// Monomial degree of the regression basis in `W(tau_k)`.
    pub basis_degree: usize,
    /// Maximum Picard iterations for the implicit generator step.
    pub picard_max: usize,
    /// Convergence threshold for the Picard fixed point.
    pub picard_tol: f64,
}

impl Default for LsmcOptions {
    fn default() -> Self {
        Self {
            basis_degree: 4,
            picard_max: 50,
            picard_tol: 1e-12,
        }
    }
}

/// Discrete BSDE solution on a path bundle.
pub struct BsdeSolution {
    /// `y` at every node; node `K` holds the terminal datum.
    pub y: VectorSamples,
    /// `Z` at nodes `0..K-1`; node `K` repeats node `K-1` for convenience.
    pub z: VectorSamples,
    /// Cross-path mean of `y` at `t = 0` (all paths share `W(0) = 0`).
    pub y0: DVector<f64>,
    /// Standard error of `y0` componentwise.
    pub y0_std_error: DVector<f64>,
}

/// Solve the BSDE with terminal data `terminal[p]` on path `p` by backward
/// least-squares Monte Carlo.
pub fn solve_bsde_lsmc(
    paths: &PathBundle,
    terminal: &[DVector<f64>],
    generator: impl Fn(StepContext, &DVector<f64>, &DVector<f64>) -> DVector<f64>,
    options: LsmcOptions,
) -> Result<BsdeSolution> {
    let n_paths = paths.n_paths();
    if terminal.len() != n_paths {
        return Err(Error::Shape(format!(
            "terminal data for {} paths, bundle has {n_paths}",
            terminal.len()
        )));
    }
    let dim = terminal[0].len();
    if terminal.iter().any(|v| v.len() != dim) {
        return Err(Error::Shape("terminal data with mixed dimensions".into()));
    }
    if n_paths <= options.basis_degree + 1 {
        return Err(Error::InvalidParameter(
            "need more paths than regression basis functions".into(),
        ));
    }
    let grid = paths.grid();
    let dt = grid.dt();
    let steps = grid.steps();

    // Brownian node values, path-major, reused for every regression.
    let mut w_nodes = vec![0.0f64; n_paths * grid.nodes()];
    for p in 0..n_paths {
        let w = paths.brownian_path(p);
        w_nodes[p * grid.nodes()..(p + 1) * grid.nodes()].copy_from_slice(&w);
    }
    let w_at = |p: usize, k: usize| w_nodes[p * grid.nodes() + k];

    let mut y_sol = VectorSamples::zeros(grid, n_paths, dim);
    let mut z_sol = VectorSamples::zeros(grid, n_paths, dim);
    for p in 0..n_paths {
        y_sol.set_node(p, steps, terminal[p].as_slice());
    }

    let mut y_next: Vec<DVector<f64>> = terminal.to_vec();
    let mut resp = vec![0.0f64; n_paths];
    // Monte Carlo error of y(0): all paths share W(0) = 0, so the node-0
    // regression collapses to a cross-path mean; its standard error comes
    // from the dispersion of the final-step response.
    let mut y0_se = DVector::zeros(dim);
    for k in (0..steps).rev() {
        let t = grid.time(k);
        let design = DMatrix::from_fn(n_paths, options.basis_degree + 1, |p, j| {
            w_at(p, k).powi(j as i32)
        });
        let solver = stats::ProjectionSolver::new(&design)?;

        // Z(tau_k): componentwise regression of y(tau_{k+1}) dW / dt.
        let mut z_k: Vec<DVector<f64>> = vec![DVector::zeros(dim); n_paths];
        for i in 0..dim {
            for p in 0..n_paths {
                resp[p] = y_next[p][i] * paths.increments(p)[k] / dt;
            }
            let fitted = solver.fitted(&resp);
            for p in 0..n_paths {
                z_k[p][i] = fitted[p];
            }
        }

        // Conditional expectation of y(tau_{k+1}).
        let mut m_k: Vec<DVector<f64>> = vec![DVector::zeros(dim); n_paths];
        for i in 0..dim {
            for p in 0..n_paths {
                resp[p] = y_next[p][i];
            }
            if k == 0 {
                y0_se[i] = stats::std_error(&resp);
            }
            let fitted = solver.fitted(&resp);
            for p in 0..n_paths {
                m_k[p][i] = fitted[p];
            }
        }

        // Implicit generator step: y = m + f(t, y, Z) dt, per path.
        for p in 0..n_paths {
            let ctx = StepContext { k, path: p, t };
            let mut y = &m_k[p] + generator(ctx, &m_k[p], &z_k[p]) * dt;
            for _ in 0..options.picard_max {
                let y_new = &m_k[p] + generator(ctx, &y, &z_k[p]) * dt;
                let change = (&y_new - &y).amax();
                y = y_new;
                if change <= options.picard_tol {
                    break;
                }
            }
            if !y.iter().all(|v| v.is_finite()) {
                return Err(Error::Divergence {
                    step: k,
                    detail: format!("LSMC value became non-finite on path {p}"),
                });
            }
            y_sol.set_node(p, k, y.as_slice());
            z_sol.set_node(p, k, z_k[p].as_slice());
            y_next[p] = y;
        }
    }
    for p in 0..n_paths {
        let z_last = z_sol.node(p, steps.saturating_sub(1)).to_vec();
        z_sol.set_node(p, steps, &z_last);
    }

    let mut y0 = DVector::zeros(dim);
    for i in 0..dim {
        let vals: Vec<f64> = (0..n_paths).map(|p| y_sol.entry(p, 0, i)).collect();
        y0[i] = stats::mean(&vals);
    }
    Ok(BsdeSolution {
        y: y_sol,
        z: z_sol,
        y0,
        y0_std_error: y0_se,
    })
}

/// Scalar linear modal BSDE with deterministic coefficients:
/// `dz - lambda z dt = -[a(t) z + b(t) Z] dt + Z dW` on `[t0, t_end]`
/// with terminal datum `z(t_end) = g(W(t_end))`.
pub struct ModalBsde<'a> {
    pub lambda: f64,
    pub a: &'a dyn Fn(f64) -> f64,
    pub b: &'a dyn Fn(f64) -> f64,
    pub t_end: f64,
    pub terminal: &'a dyn Fn(f64) -> f64,
}

/// Exact solution sampler for a [`ModalBsde`].
pub struct ModalSolution<'a> {
    eq: ModalBsde<'a>,
    nodes: usize,
    tol: f64,
}

impl<'a> ModalBsde<'a> {
    /// Build the exact sampler. `quad_nodes` is the base Gauss-Hermite
    /// order; each evaluation is validated by doubling the order and must
    /// agree to `quad_tol` (relative), else `Accuracy` is returned lazily.
    pub fn solve(self, quad_nodes: usize, quad_tol: f64) -> Result<ModalSolution<'a>> {
        if quad_nodes < 2 {
            return Err(Error::InvalidParameter("need at least 2 quadrature nodes".into()));
        }
        Ok(ModalSolution {
            eq: self,
            nodes: quad_nodes,
            tol: quad_tol,
        })
    }
}

impl ModalSolution<'_> {
    fn time_integral(&self, f: &dyn Fn(f64) -> f64, t: f64) -> f64 {
        // Coefficients are at worst piecewise continuous; a fine composite
        // rule keeps the panel-crossing error negligible.
        stats::integrate_gl(t, self.eq.t_end, 200, 4, f)
    }

    /// Exact solution value `z(t, w)` given `W(t) = w`.
    ///
    /// The change of measure induced by the exponential kernel shifts the
    /// terminal Brownian value by `int_t^T b(s) ds`, leaving a plain
    /// Gaussian expectation:
    /// `z(t, w) = exp(int_t^T (a - lambda)) E[g(w + int_t^T b + sqrt(T-t) N)]`.
    pub fn z(&self, t: f64, w: f64) -> Result<f64> {
        if t > self.eq.t_end + 1e-12 {
            return Err(Error::InvalidParameter(format!(
                "t = {t} is past the terminal time {}",
                self.eq.t_end
            )));
        }
        let remaining = (self.eq.t_end - t).max(0.0);
        if remaining == 0.0 {
            return Ok((self.eq.terminal)(w));
        }
        let growth = self.time_integral(&|s| (self.eq.a)(s) - self.eq.lambda, t);
        let shift = self.time_integral(self.eq.b, t);
        let sd = remaining.sqrt();
        let coarse = stats::normal_expectation(w + shift, sd, self.nodes, self.eq.terminal);
        let fine = stats::normal_expectation(w + shift, sd, 2 * self.nodes, self.eq.terminal);
        if (coarse - fine).abs() > self.tol * (1.0 + fine.abs()) {
            return Err(Error::Accuracy(format!(
                "Gauss-Hermite quadrature not converged at t = {t}: {coarse} vs {fine}"
            )));
        }
        Ok(growth.exp() * fine)
    }

    /// Martingale integrand `Z(t, w) = d z(t, w) / d w`, by centered
    /// finite difference.
    pub fn z_mart(&self, t: f64, w: f64) -> Result<f64> {
        let h = 1e-5 * (1.0 + w.abs());
        Ok((self.z(t, w + h)? - self.z(t, w - h)?) / (2.0 * h))
    }
}

/// Outcome of the duality (transposition) check between a solved BSDE and
/// a forward process `dx = u dt + v dW`, `x(tau_{k0}) = eta`.
#[derive(Debug, Clone)]
pub struct TranspositionReport {
    /// `E[<x(T), y(T)>] - E[<eta, y(tau_{k0})>]`.
    pub lhs: f64,
    /// `E int (<u, y> - <x, f> + <v, Z>) dt`.
    pub rhs: f64,
    pub residual: f64,
    pub std_error: f64,
}

impl TranspositionReport {
    pub fn within(&self, k: f64) -> bool {
        self.residual.abs() <= k * self.std_error
    }
}

/// Verify the Ito-product duality
/// `E<x(T), y(T)> - E<x(t), y(t)> = E int_t^T (<u, y> - <x, f> + <v, Z>) ds`
/// on the common path bundle, with all integrals discretized at left
/// endpoints (the same convention the solver uses).
pub fn verify_transposition_identity(
    paths: &PathBundle,
    solution: &BsdeSolution,
    generator: impl Fn(StepContext, &DVector<f64>, &DVector<f64>) -> DVector<f64>,
    start_index: usize,
    eta: &[DVector<f64>],
    u: &VectorSamples,
    v: &VectorSamples,
) -> Result<TranspositionReport> {
    let grid = paths.grid();
    let steps = grid.steps();
    let dim = solution.y.dim();
    if start_index >= steps {
        return Err(Error::InvalidParameter("start index past the horizon".into()));
    }
    if eta.len() != paths.n_paths() || eta[0].len() != dim {
        return Err(Error::Shape("eta must give one dim-matched vector per path".into()));
    }
    if u.dim() != dim || v.dim() != dim {
        return Err(Error::Shape("test drift/diffusion dimension mismatch".into()));
    }
    let dt = grid.dt();
    let mut lhs_samples = Vec::with_capacity(paths.n_paths());
    let mut rhs_samples = Vec::with_capacity(paths.n_paths());
    for p in 0..paths.n_paths() {
        let dw = paths.increments(p);
        let mut x = eta[p].clone();
        let mut rhs = 0.0;
        for k in start_index..steps {
            let y_k = solution.y.node_vector(p, k);
            let z_k = solution.z.node_vector(p, k);
            let u_k = u.node_vector(p, k);
            let v_k = v.node_vector(p, k);
            let f_k = generator(
                StepContext {
                    k,
                    path: p,
                    t: grid.time(k),
                },
                &y_k,
                &z_k,
            );
            rhs += (u_k.dot(&y_k) - x.dot(&f_k) + v_k.dot(&z_k)) * dt;
            x += u_k * dt + v_k * dw[k];
        }
        let y_term = solution.y.node_vector(p, steps);
        let y_start = solution.y.node_vector(p, start_index);
        lhs_samples.push(x.dot(&y_term) - eta[p].dot(&y_start));
        rhs_samples.push(rhs);
    }
    let diffs: Vec<f64> = lhs_samples
        .iter()
        .zip(&rhs_samples)
        .map(|(a, b)| a - b)
        .collect();
    let (residual, std_error) = stats::mean_with_se(&diffs);
    Ok(TranspositionReport {
        lhs: stats::mean(&lhs_samples),
        rhs: stats::mean(&rhs_samples),
        residual,
        std_error,
    })
}

/// Crude a-priori-estimate probe: the ratio of the solution size to the
/// data size. A sequence of instances with exploding ratio demonstrates
/// the failure of the naive estimate (see the degenerate pair in
/// [`crate::controllability`]).
#[derive(Debug, Clone)]
pub struct NormProbe {
    pub solution_norm: f64,
    pub data_norm: f64,
    pub ratio: f64,
}

pub fn norm_estimate_probe(
    paths: &PathBundle,
    solution: &BsdeSolution,
    generator: impl Fn(StepContext, &DVector<f64>, &DVector<f64>) -> DVector<f64>,
) -> Result<NormProbe> {
    let grid = paths.grid();
    let dt = grid.dt();
    let n = paths.n_paths();
    let dim = solution.y.dim();
    let zero = DVector::zeros(dim);
    let mut sup_y = 0.0f64;
    for k in 0..grid.nodes() {
        let mut acc = 0.0;
        for p in 0..n {
            acc += solution.y.node_vector(p, k).norm_squared();
        }
        sup_y = sup_y.max(acc / n as f64);
    }
    let mut z_energy = 0.0;
    let mut source = 0.0;
    for p in 0..n {
        for k in 0..grid.steps() {
            z_energy += solution.z.node_vector(p, k).norm_squared() * dt;
            let f0 = generator(
                StepContext {
                    k,
                    path: p,
                    t: grid.time(k),
                },
                &zero,
                &zero,
            );
            source += f0.norm() * dt;
        }
    }
    z_energy /= n as f64;
    source /= n as f64;
    let mut terminal = 0.0;
    for p in 0..n {
        terminal += solution.y.node_vector(p, grid.steps()).norm_squared();
    }
    terminal = (terminal / n as f64).sqrt();
    let solution_norm = sup_y.sqrt() + z_energy.sqrt();
    let data_norm = terminal + source;
    if data_norm == 0.0 {
        return Err(Error::Degenerate("zero data: probe undefined".into()));
    }
    Ok(NormProbe {
        solution_norm,
        data_norm,
        ratio: solution_norm / data_norm,
    })
}

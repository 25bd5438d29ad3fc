//! Brownian path simulation and Ito calculus on a uniform time grid.
//!
//! Everything downstream (BSDE solvers, maximum-principle checks, spectral
//! control experiments) consumes paths produced here. Reproducibility is a
//! hard requirement: each Gaussian increment is drawn by a counter-based
//! generator keyed on `(seed, path, step)`, so a bundle is a pure function
//! of `(grid, n_paths, seed)` independent of iteration order or batching.
//!
//! Conventions:
//! - grids are uniform with `steps` intervals on `[t0, t_end]`;
//! - path arrays are stored path-major (`path * stride + index`);
//! - integrands are sampled at the left endpoint of each interval, so the
//!   Ito integral of `f` is `I(tau_k) = sum_{j<k} f(tau_j) dW_j`.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::stats;

/// Uniform partition of `[t0, t_end]` into `steps` intervals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    t0: f64,
    t_end: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, t_end: f64, steps: usize) -> Result<Self> {
        if !(t0.is_finite() && t_end.is_finite()) || t_end <= t0 {
            return Err(Error::InvalidParameter(format!(
                "time grid needs finite t0 < t_end, got [{t0}, {t_end}]"
            )));
        }
        if steps == 0 {
            return Err(Error::InvalidParameter("time grid needs at least one step".into()));
        }
        Ok(Self { t0, t_end, steps })
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Number of grid nodes, `steps + 1`.
    pub fn nodes(&self) -> usize {
        self.steps + 1
    }

    pub fn dt(&self) -> f64 {
        (self.t_end - self.t0) / self.steps as f64
    }

    /// Node `tau_k`.
    pub fn time(&self, k: usize) -> f64 {
        if k == self.steps {
            self.t_end
        } else {
            self.t0 + k as f64 * self.dt()
        }
    }

    /// Index of the grid node equal to `t`, if `t` lies on the grid.
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let dt = self.dt();
        let k = ((t - self.t0) / dt).round();
        if k < 0.0 || k > self.steps as f64 {
            return None;
        }
        let k = k as usize;
        if (self.time(k) - t).abs() <= 1e-9 * dt.max(1.0) {
            Some(k)
        } else {
            None
        }
    }
}

/// SplitMix64 finalizer: a bijective avalanche mix of a 64-bit word.
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Uniform in (0, 1], from the top 53 bits of a mixed word.
fn unit_open(z: u64) -> f64 {
    ((z >> 11) + 1) as f64 * (1.0 / 9007199254740992.0)
}

/// Standard normal draw for counter `c` under `seed`, via Box-Muller on two
/// counter-derived uniforms. Pure function: no generator state.
pub fn counter_normal(seed: u64, c: u64) -> f64 {
    let u1 = unit_open(mix64(
        seed ^ c
            .wrapping_mul(2)
            .wrapping_mul(0x9E3779B97F4A7C15)
            .wrapping_add(0xD1B54A32D192ED03),
    ));
    let u2 = unit_open(mix64(
        seed ^ c
            .wrapping_mul(2)
            .wrapping_add(1)
            .wrapping_mul(0x9E3779B97F4A7C15)
            .wrapping_add(0xD1B54A32D192ED03),
    ));
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// A bundle of independent Brownian paths on a common grid.
///
/// Stores the increments `dW_k = W(tau_{k+1}) - W(tau_k)`; running values
/// are reconstructed on demand so the bundle is the single source of truth.
#[derive(Debug, Clone)]
pub struct PathBundle {
    grid: TimeGrid,
    n_paths: usize,
    seed: u64,
    increments: Vec<f64>,
}

/// Simulate `n_paths` Brownian paths on `grid` from `seed`.
pub fn generate_paths(grid: TimeGrid, n_paths: usize, seed: u64) -> Result<PathBundle> {
    if n_paths == 0 {
        return Err(Error::InvalidParameter("need at least one path".into()));
    }
    let k = grid.steps();
    let sdt = grid.dt().sqrt();
    let mut increments = Vec::with_capacity(n_paths * k);
    for p in 0..n_paths {
        for j in 0..k {
            increments.push(sdt * counter_normal(seed, (p * k + j) as u64));
        }
    }
    Ok(PathBundle {
        grid,
        n_paths,
        seed,
        increments,
    })
}

impl PathBundle {
    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Increments `dW_0..dW_{K-1}` of path `p`.
    pub fn increments(&self, p: usize) -> &[f64] {
        let k = self.grid.steps();
        &self.increments[p * k..(p + 1) * k]
    }

    /// Running Brownian values `W(tau_0)..W(tau_K)` of path `p`.
    pub fn brownian_path(&self, p: usize) -> Vec<f64> {
        let mut w = Vec::with_capacity(self.grid.nodes());
        let mut acc = 0.0;
        w.push(acc);
        for dw in self.increments(p) {
            acc += dw;
            w.push(acc);
        }
        w
    }
}

/// Scalar process sampled at every grid node of every path.
///
/// Constructors only expose information available at the sampling time
/// (the Brownian history up to the node), which is what makes the samples
/// adapted by construction.
#[derive(Debug, Clone)]
pub struct AdaptedSamples {
    grid: TimeGrid,
    n_paths: usize,
    values: Vec<f64>,
}

impl AdaptedSamples {
    /// Sample a Markovian functional `f(t, W(t))`.
    pub fn from_fn(paths: &PathBundle, f: impl Fn(f64, f64) -> f64) -> Self {
        Self::from_history_fn(paths, |k, w| f(paths.grid().time(k), w[k]))
    }

    /// Sample a path functional; the closure receives the node index `k`
    /// and the Brownian values `W(tau_0)..W(tau_k)` only.
    pub fn from_history_fn(paths: &PathBundle, f: impl Fn(usize, &[f64]) -> f64) -> Self {
        let nodes = paths.grid().nodes();
        let mut values = Vec::with_capacity(paths.n_paths() * nodes);
        for p in 0..paths.n_paths() {
            let w = paths.brownian_path(p);
            for k in 0..nodes {
                values.push(f(k, &w[..=k]));
            }
        }
        Self {
            grid: paths.grid(),
            n_paths: paths.n_paths(),
            values,
        }
    }

    /// Wrap already-computed node values (path-major, `nodes` per path).
    pub fn from_values(grid: TimeGrid, n_paths: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n_paths * grid.nodes() {
            return Err(Error::Shape(format!(
                "expected {} values, got {}",
                n_paths * grid.nodes(),
                values.len()
            )));
        }
        Ok(Self {
            grid,
            n_paths,
            values,
        })
    }

    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    /// Value at node `k` of path `p`.
    pub fn value(&self, p: usize, k: usize) -> f64 {
        self.values[p * self.grid.nodes() + k]
    }

    /// All node values of path `p`.
    pub fn path(&self, p: usize) -> &[f64] {
        let n = self.grid.nodes();
        &self.values[p * n..(p + 1) * n]
    }

    /// Cross-path slice at node `k` (allocates).
    pub fn at_node(&self, k: usize) -> Vec<f64> {
        (0..self.n_paths).map(|p| self.value(p, k)).collect()
    }
}

fn check_same_shape(f: &AdaptedSamples, paths: &PathBundle) -> Result<()> {
    if f.grid() != paths.grid() || f.n_paths() != paths.n_paths() {
        return Err(Error::Shape(
            "integrand and path bundle live on different grids".into(),
        ));
    }
    Ok(())
}

/// Ito integral `I(tau_k) = sum_{j<k} f(tau_j) dW_j` path by path.
pub fn ito_integral(f: &AdaptedSamples, paths: &PathBundle) -> Result<AdaptedSamples> {
    check_same_shape(f, paths)?;
    let nodes = paths.grid().nodes();
    let mut values = Vec::with_capacity(paths.n_paths() * nodes);
    for p in 0..paths.n_paths() {
        let dw = paths.increments(p);
        let fp = f.path(p);
        let mut acc = 0.0;
        values.push(0.0);
        for j in 0..paths.grid().steps() {
            acc += fp[j] * dw[j];
            values.push(acc);
        }
    }
    AdaptedSamples::from_values(paths.grid(), paths.n_paths(), values)
}

/// Monte Carlo check of the Ito isometry `E[I(T)^2] = E[int_0^T f^2 dt]`.
#[derive(Debug, Clone)]
pub struct IsometryReport {
    /// `E[I(T)^2] / E[int f^2 dt]`, ideally 1.
    pub ratio: f64,
    /// Delta-method standard error of the ratio.
    pub std_error: f64,
    pub lhs_mean: f64,
    pub rhs_mean: f64,
}

impl IsometryReport {
    /// True when the ratio is within `k` standard errors of 1.
    pub fn within(&self, k: f64) -> bool {
        (self.ratio - 1.0).abs() <= k * self.std_error
    }
}

pub fn check_ito_isometry(f: &AdaptedSamples, paths: &PathBundle) -> Result<IsometryReport> {
    check_same_shape(f, paths)?;
    let dt = paths.grid().dt();
    let n = paths.n_paths();
    let mut lhs = Vec::with_capacity(n);
    let mut rhs = Vec::with_capacity(n);
    for p in 0..n {
        let dw = paths.increments(p);
        let fp = f.path(p);
        let mut integral = 0.0;
        let mut qv = 0.0;
        for j in 0..paths.grid().steps() {
            integral += fp[j] * dw[j];
            qv += fp[j] * fp[j] * dt;
        }
        lhs.push(integral * integral);
        rhs.push(qv);
    }
    let lhs_mean = stats::mean(&lhs);
    let rhs_mean = stats::mean(&rhs);
    if rhs_mean <= 0.0 {
        return Err(Error::Degenerate("integrand is almost surely zero".into()));
    }
    let ratio = lhs_mean / rhs_mean;
    // Delta method: Var(lhs_bar/rhs_bar) ~ Var(lhs_p - ratio * rhs_p) / (n rhs_bar^2).
    let centered: Vec<f64> = lhs
        .iter()
        .zip(&rhs)
        .map(|(a, b)| (a - ratio * b) / rhs_mean)
        .collect();
    Ok(IsometryReport {
        ratio,
        std_error: stats::std_error(&centered),
        lhs_mean,
        rhs_mean,
    })
}

/// Monte Carlo check of the Burkholder-Davis-Gundy bounds for moment `p`:
/// `c_p E[(int f^2)^{p/2}] <= E[sup_t |I(t)|^p] <= C_p E[(int f^2)^{p/2}]`.
#[derive(Debug, Clone)]
pub struct BdgReport {
    pub moment: f64,
    /// `E[sup|I|^p] / E[(int f^2)^{p/2}]`.
    pub ratio: f64,
    pub std_error: f64,
    pub sup_moment_mean: f64,
    pub bracket_moment_mean: f64,
}

pub fn check_bdg(f: &AdaptedSamples, paths: &PathBundle, moment: f64) -> Result<BdgReport> {
    check_same_shape(f, paths)?;
    if !(moment > 0.0) {
        return Err(Error::InvalidParameter("BDG moment must be positive".into()));
    }
    let dt = paths.grid().dt();
    let n = paths.n_paths();
    let mut sups = Vec::with_capacity(n);
    let mut brackets = Vec::with_capacity(n);
    for p in 0..n {
        let dw = paths.increments(p);
        let fp = f.path(p);
        let mut integral = 0.0;
        let mut qv = 0.0;
        let mut sup = 0.0f64;
        for j in 0..paths.grid().steps() {
            integral += fp[j] * dw[j];
            qv += fp[j] * fp[j] * dt;
            sup = sup.max(integral.abs());
        }
        sups.push(sup.powf(moment));
        brackets.push(qv.powf(moment / 2.0));
    }
    let sup_mean = stats::mean(&sups);
    let bracket_mean = stats::mean(&brackets);
    if bracket_mean <= 0.0 {
        return Err(Error::Degenerate("integrand is almost surely zero".into()));
    }
    let ratio = sup_mean / bracket_mean;
    let centered: Vec<f64> = sups
        .iter()
        .zip(&brackets)
        .map(|(a, b)| (a - ratio * b) / bracket_mean)
        .collect();
    Ok(BdgReport {
        moment,
        ratio,
        std_error: stats::std_error(&centered),
        sup_moment_mean: sup_mean,
        bracket_moment_mean: bracket_mean,
    })
}

/// Vector-valued process sampled at every grid node of every path.
#[derive(Debug, Clone)]
pub struct VectorSamples {
    grid: TimeGrid,
    n_paths: usize,
    dim: usize,
    values: Vec<f64>,
}

impl VectorSamples {
    pub fn zeros(grid: TimeGrid, n_paths: usize, dim: usize) -> Self {
        Self {
            grid,
            n_paths,
            dim,
            values: vec![0.0; n_paths * grid.nodes() * dim],
        }
    }

    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entry(&self, p: usize, k: usize, i: usize) -> f64 {
        self.values[(p * self.grid.nodes() + k) * self.dim + i]
    }

    pub fn node(&self, p: usize, k: usize) -> &[f64] {
        let base = (p * self.grid.nodes() + k) * self.dim;
        &self.values[base..base + self.dim]
    }

    pub fn node_vector(&self, p: usize, k: usize) -> DVector<f64> {
        DVector::from_column_slice(self.node(p, k))
    }

    pub fn set_node(&mut self, p: usize, k: usize, v: &[f64]) {
        let base = (p * self.grid.nodes() + k) * self.dim;
        self.values[base..base + self.dim].copy_from_slice(v);
    }

    /// Extract one scalar component as `AdaptedSamples`.
    pub fn component(&self, i: usize) -> AdaptedSamples {
        let nodes = self.grid.nodes();
        let mut values = Vec::with_capacity(self.n_paths * nodes);
        for p in 0..self.n_paths {
            for k in 0..nodes {
                values.push(self.entry(p, k, i));
            }
        }
        AdaptedSamples::from_values(self.grid, self.n_paths, values).expect("consistent shape")
    }
}

/// Euler-Maruyama scheme for `dX = drift(t, X) dt + diffusion(t, X) dW`
/// driven by a scalar Brownian motion, for vector states.
pub fn euler_maruyama(
    paths: &PathBundle,
    x0: &DVector<f64>,
    drift: impl Fn(f64, &DVector<f64>) -> DVector<f64>,
    diffusion: impl Fn(f64, &DVector<f64>) -> DVector<f64>,
) -> Result<VectorSamples> {
    let dim = x0.len();
    let grid = paths.grid();
    let dt = grid.dt();
    let mut out = VectorSamples::zeros(grid, paths.n_paths(), dim);
    for p in 0..paths.n_paths() {
        let dw = paths.increments(p);
        let mut x = x0.clone();
        out.set_node(p, 0, x.as_slice());
        for k in 0..grid.steps() {
            let t = grid.time(k);
            let a = drift(t, &x);
            let b = diffusion(t, &x);
            if a.len() != dim || b.len() != dim {
                return Err(Error::Shape(format!(
                    "drift/diffusion must return dimension {dim}"
                )));
            }
            x += a * dt + b * dw[k];
            if !x.iter().all(|v| v.is_finite()) {
                return Err(Error::Divergence {
                    step: k,
                    detail: format!("state became non-finite on path {p}"),
                });
            }
            out.set_node(p, k + 1, x.as_slice());
        }
    }
    Ok(out)
}

/// Scalar Euler-Maruyama convenience wrapper.
pub fn euler_maruyama_scalar(
    paths: &PathBundle,
    x0: f64,
    drift: impl Fn(f64, f64) -> f64,
    diffusion: impl Fn(f64, f64) -> f64,
) -> Result<AdaptedSamples> {
    let out = euler_maruyama(
        paths,
        &DVector::from_element(1, x0),
        |t, x| DVector::from_element(1, drift(t, x[0])),
        |t, x| DVector::from_element(1, diffusion(t, x[0])),
    )?;
    Ok(out.component(0))
}

/// A scalar function `F(t, x)` with the partial derivatives that enter the
/// Ito formula.
pub struct ItoFunction<'a> {
    pub f: &'a dyn Fn(f64, f64) -> f64,
    pub f_t: &'a dyn Fn(f64, f64) -> f64,
    pub f_x: &'a dyn Fn(f64, f64) -> f64,
    pub f_xx: &'a dyn Fn(f64, f64) -> f64,
}

/// Residual statistics of the discretized Ito formula along given dynamics.
#[derive(Debug, Clone)]
pub struct ItoFormulaReport {
    /// RMS over paths and grid nodes of the cumulative residual.
    pub rms: f64,
    pub max_abs: f64,
}

/// Check the Ito formula for `F` along `dX = drift dt + diffusion dW`:
/// the cumulative residual
/// `F(t,X) - F(0,X0) - int (F_t + F_x a + 1/2 F_xx b^2) dt - int F_x b dW`
/// should vanish as the grid refines (at root-dt rate in RMS).
pub fn ito_formula_residual(
    func: &ItoFunction,
    x: &AdaptedSamples,
    paths: &PathBundle,
    drift: impl Fn(f64, f64) -> f64,
    diffusion: impl Fn(f64, f64) -> f64,
) -> Result<ItoFormulaReport> {
    check_same_shape(x, paths)?;
    let grid = paths.grid();
    let dt = grid.dt();
    let mut sq_sum = 0.0;
    let mut max_abs = 0.0f64;
    let mut count = 0usize;
    for p in 0..paths.n_paths() {
        let dw = paths.increments(p);
        let xp = x.path(p);
        let f0 = (func.f)(grid.time(0), xp[0]);
        let mut acc = 0.0;
        for k in 0..grid.steps() {
            let t = grid.time(k);
            let xv = xp[k];
            let a = drift(t, xv);
            let b = diffusion(t, xv);
            acc += ((func.f_t)(t, xv) + (func.f_x)(t, xv) * a + 0.5 * (func.f_xx)(t, xv) * b * b)
                * dt
                + (func.f_x)(t, xv) * b * dw[k];
            let resid = (func.f)(grid.time(k + 1), xp[k + 1]) - f0 - acc;
            sq_sum += resid * resid;
            max_abs = max_abs.max(resid.abs());
            count += 1;
        }
    }
    Ok(ItoFormulaReport {
        rms: (sq_sum / count as f64).sqrt(),
        max_abs,
    })
}

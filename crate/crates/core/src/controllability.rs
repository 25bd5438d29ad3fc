//! Controllability of finite-dimensional linear systems, deterministic and
//! stochastic.
//!
//! Deterministic side: Kalman rank certificates and Gramian-based steering
//! controls for `dy/dt = A y + B u`. Stochastic side: for
//! `dy = (A y + B u) dt + (C y + D u) dW` with surjective `D`, the feedback
//! substitution `u = K1 (v2; v1) + K2 y` turns the diffusion into a pure
//! control `v2` and reduces exact controllability to a rank condition on
//! words in the reduced drift/diffusion matrices applied to the reduced
//! control matrix. An exact binomial-tree oracle and a Monte Carlo dual
//! simulation provide independent cross-checks for small systems.
//!
//! The module also hosts two classical counterexamples for norm-optimal
//! control with scalar noise: a dyadic bang-bang target that no
//! finite-energy control can match at every horizon, and an explicit
//! backward pair showing that the natural a-priori estimate fails for a
//! degenerate backward system.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::stats;
use crate::stochastic::PathBundle;

/// Relative singular-value cutoff used by every rank decision here.
pub const RANK_REL_TOL: f64 = 1e-9;

/// Certificate for the dimension of a matrix-word-generated subspace.
#[derive(Debug, Clone)]
pub struct RankCertificate {
    /// Dimension of the generated subspace.
    pub rank: usize,
    /// State dimension `n`.
    pub dim: usize,
    /// Orthonormal basis of the subspace (`dim x rank`).
    pub basis: DMatrix<f64>,
    /// One generating word per basis vector, e.g. `"A2*A1*B"`.
    pub words: Vec<String>,
    /// Absolute tolerance that was used to accept new directions.
    pub tol: f64,
}

impl RankCertificate {
    /// True when the subspace is the whole state space.
    pub fn full(&self) -> bool {
        self.rank == self.dim
    }

    /// Largest component of `M * basis` outside the subspace, over the
    /// given operator set. Zero (up to roundoff) certifies invariance.
    pub fn invariance_defect(&self, operators: &[&DMatrix<f64>]) -> f64 {
        let mut defect = 0.0f64;
        for op in operators {
            let image = *op * &self.basis;
            let outside = &image - &self.basis * (self.basis.transpose() * &image);
            defect = defect.max(outside.amax());
        }
        defect
    }
}

/// Span of all words `Op_{i_1} ... Op_{i_k} b_j` over the given operators,
/// grown breadth-first with re-orthogonalized Gram-Schmidt.
fn word_span(operators: &[(&str, &DMatrix<f64>)], seed: &DMatrix<f64>, seed_name: &str) -> Result<RankCertificate> {
    let n = seed.nrows();
    for (name, op) in operators {
        if op.nrows() != n || op.ncols() != n {
            return Err(Error::Shape(format!(
                "operator {name} must be {n}x{n}, got {}x{}",
                op.nrows(),
                op.ncols()
            )));
        }
    }
    let mut scale = seed.amax();
    for (_, op) in operators {
        scale = scale.max(op.amax());
    }
    let tol = RANK_REL_TOL * scale.max(1.0);

    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut words: Vec<String> = Vec::new();
    // Candidates awaiting expansion by each operator.
    let mut frontier: Vec<(DVector<f64>, String)> = (0..seed.ncols())
        .map(|j| {
            let name = if seed.ncols() == 1 {
                seed_name.to_string()
            } else {
                format!("{seed_name}[{j}]")
            };
            (seed.column(j).into_owned(), name)
        })
        .collect();

    let orthogonalize = |v: &DVector<f64>, basis: &[DVector<f64>]| -> DVector<f64> {
        let mut r = v.clone();
        // Two passes of classical Gram-Schmidt for numerical safety.
        for _ in 0..2 {
            for b in basis {
                let c = b.dot(&r);
                r -= b * c;
            }
        }
        r
    };

    while let Some((v, word)) = frontier.pop() {
        if basis.len() == n {
            break;
        }
        let r = orthogonalize(&v, &basis);
        if r.norm() <= tol {
            continue;
        }
        let b = &r / r.norm();
        basis.push(b.clone());
        words.push(word.clone());
        for (name, op) in operators {
            frontier.push((*op * &b, format!("{name}*{word}")));
        }
    }

    let rank = basis.len();
    let mut mat = DMatrix::zeros(n, rank);
    for (j, b) in basis.iter().enumerate() {
        mat.set_column(j, b);
    }
    Ok(RankCertificate {
        rank,
        dim: n,
        basis: mat,
        words,
        tol,
    })
}

/// Kalman rank test for the pair `(A, B)`.
pub fn kalman_rank(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<RankCertificate> {
    if b.nrows() != a.nrows() {
        return Err(Error::Shape(format!(
            "A is {}x{} but B has {} rows",
            a.nrows(),
            a.ncols(),
            b.nrows()
        )));
    }
    word_span(&[("A", a)], b, "B")
}

/// Rank test for the reduced stochastic system: span of words in
/// `{A1, A2}` applied to the columns of `B1`.
pub fn stochastic_rank(
    a1: &DMatrix<f64>,
    a2: &DMatrix<f64>,
    b1: &DMatrix<f64>,
) -> Result<RankCertificate> {
    if b1.nrows() != a1.nrows() {
        return Err(Error::Shape(format!(
            "A1 is {}x{} but B1 has {} rows",
            a1.nrows(),
            a1.ncols(),
            b1.nrows()
        )));
    }
    word_span(&[("A1", a1), ("A2", a2)], b1, "B1")
}

/// Matrix exponential `exp(M)` by scaling and squaring with a Pade(13)
/// approximant; adequate for the small dense matrices used here.
pub fn expm(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    assert_eq!(n, m.ncols(), "expm needs a square matrix");
    let norm = m.amax() * n as f64;
    let s = if norm > 0.5 {
        (norm / 0.5).log2().ceil() as i32
    } else {
        0
    };
    let a = m / 2f64.powi(s);
    // Pade coefficients for the (13, 13) approximant.
    let c = [
        64764752532480000.0,
        32382376266240000.0,
        7771770303897600.0,
        1187353796428800.0,
        129060195264000.0,
        10559470521600.0,
        670442572800.0,
        33522128640.0,
        1323241920.0,
        40840800.0,
        960960.0,
        16380.0,
        182.0,
        1.0,
    ];
    let id = DMatrix::identity(n, n);
    let a2 = &a * &a;
    let a4 = &a2 * &a2;
    let a6 = &a2 * &a4;
    let u = &a
        * (&a6 * (&a6 * c[13] + &a4 * c[11] + &a2 * c[9])
            + &a6 * c[7]
            + &a4 * c[5]
            + &a2 * c[3]
            + &id * c[1]);
    let v = &a6 * (&a6 * c[12] + &a4 * c[10] + &a2 * c[8])
        + &a6 * c[6]
        + &a4 * c[4]
        + &a2 * c[2]
        + &id * c[0];
    let num = &v + &u;
    let den = &v - &u;
    let mut r = den
        .lu()
        .solve(&num)
        .expect("Pade denominator is nonsingular for scaled input");
    for _ in 0..s {
        r = &r * &r;
    }
    r
}

/// Steering control built from the controllability Gramian.
#[derive(Debug, Clone)]
pub struct GramianControl {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    horizon: f64,
    /// Gramian `G_T = int_0^T exp(At) B B^T exp(A^T t) dt`.
    pub gramian: DMatrix<f64>,
    /// Multiplier `mu = G_T^{-1} (exp(AT) y0 - y_target)`.
    pub multiplier: DVector<f64>,
    /// Control energy `int_0^T |u|^2 dt = mu^T G_T mu`.
    pub energy: f64,
    /// `|y(T) - y_target|` from an RK4 replay of the closed-loop system.
    pub terminal_error: f64,
}

impl GramianControl {
    /// Evaluate the steering control `u(t) = -B^T exp(A^T (T - t)) mu`.
    pub fn control(&self, t: f64) -> DVector<f64> {
        let e = expm(&(self.a.transpose() * (self.horizon - t)));
        -(self.b.transpose() * (e * &self.multiplier))
    }
}

/// Compute the minimum-energy control steering `y0` to `y_target` over
/// `[0, horizon]` for `dy/dt = A y + B u`. Fails with `NotControllable`
/// when the Gramian is numerically singular.
pub fn gramian_control(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    horizon: f64,
    y0: &DVector<f64>,
    y_target: &DVector<f64>,
) -> Result<GramianControl> {
    let n = a.nrows();
    if a.ncols() != n || b.nrows() != n || y0.len() != n || y_target.len() != n {
        return Err(Error::Shape("gramian_control: inconsistent dimensions".into()));
    }
    if !(horizon > 0.0) {
        return Err(Error::InvalidParameter("horizon must be positive".into()));
    }
    // The integrand t -> exp(At) B B^T exp(A^T t) is entire; a composite
    // Gauss-Legendre rule converges spectrally fast.
    let (nodes, weights) = stats::gauss_legendre(12);
    let panels = 24;
    let h = horizon / panels as f64;
    let mut gramian = DMatrix::zeros(n, n);
    for p in 0..panels {
        let mid = p as f64 * h + 0.5 * h;
        for (x, w) in nodes.iter().zip(&weights) {
            let t = mid + 0.5 * h * x;
            let e = expm(&(a * t));
            let eb = &e * b;
            gramian += (&eb * eb.transpose()) * (w * 0.5 * h);
        }
    }
    let svd = gramian.clone().svd(false, false);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if smin <= 1e-12 * smax || smax == 0.0 {
        return Err(Error::NotControllable(format!(
            "controllability Gramian is singular to working precision (sigma_min/sigma_max = {:.3e})",
            if smax > 0.0 { smin / smax } else { 0.0 }
        )));
    }
    let misfit = expm(&(a * horizon)) * y0 - y_target;
    let multiplier = gramian
        .clone()
        .lu()
        .solve(&misfit)
        .ok_or_else(|| Error::NotControllable("Gramian solve failed".into()))?;
    let energy = (multiplier.transpose() * &gramian * &multiplier)[(0, 0)];

    let mut ctrl = GramianControl {
        a: a.clone(),
        b: b.clone(),
        horizon,
        gramian,
        multiplier,
        energy,
        terminal_error: f64::NAN,
    };
    // Replay the closed-loop ODE with RK4 to measure the terminal miss.
    let steps = 2000;
    let dt = horizon / steps as f64;
    let mut y = y0.clone();
    let rhs = |t: f64, y: &DVector<f64>| a * y + b * ctrl.control(t);
    for k in 0..steps {
        let t = k as f64 * dt;
        let k1 = rhs(t, &y);
        let k2 = rhs(t + 0.5 * dt, &(&y + &k1 * (0.5 * dt)));
        let k3 = rhs(t + 0.5 * dt, &(&y + &k2 * (0.5 * dt)));
        let k4 = rhs(t + dt, &(&y + &k3 * dt));
        y += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
    }
    ctrl.terminal_error = (y - y_target).norm();
    Ok(ctrl)
}

/// Feedback reduction of the stochastic system
/// `dy = (A y + B u) dt + (C y + D u) dW` with surjective `D`.
#[derive(Debug, Clone)]
pub struct Reduction {
    /// Invertible `m x m` input transform with `D K1 = [I_n  0]`.
    pub k1: DMatrix<f64>,
    /// State feedback `K2 = -D^+ C` cancelling the state in the diffusion.
    pub k2: DMatrix<f64>,
    /// Reduced drift `A1 = A + B K2`.
    pub a1: DMatrix<f64>,
    /// Coefficient of the diffusion-control `v2` in the drift (`n x n`).
    pub a2: DMatrix<f64>,
    /// Coefficient of the drift-only control `v1` (`n x (m-n)`).
    pub b1: DMatrix<f64>,
}

/// Build the reduction. Requires `m >= n` and `rank D = n`.
pub fn reduce_system(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    c: &DMatrix<f64>,
    d: &DMatrix<f64>,
) -> Result<Reduction> {
    let n = a.nrows();
    let m = b.ncols();
    if a.ncols() != n || b.nrows() != n || c.shape() != (n, n) || d.shape() != (n, m) {
        return Err(Error::Shape("reduce_system: inconsistent dimensions".into()));
    }
    if m < n {
        return Err(Error::Degenerate(format!(
            "D cannot be surjective: {m} inputs for {n} states"
        )));
    }
    let svd = d.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let rank = svd
        .singular_values
        .iter()
        .filter(|&&s| s > RANK_REL_TOL * smax)
        .count();
    if rank < n {
        return Err(Error::Degenerate(format!(
            "D has rank {rank} < {n}; diffusion control is not surjective"
        )));
    }
    let d_pinv = svd
        .clone()
        .pseudo_inverse(RANK_REL_TOL * smax)
        .map_err(|e| Error::Degenerate(format!("pseudo-inverse failed: {e}")))?;

    // Columns of K1: a right inverse of D, completed by a basis of ker D.
    let mut k1 = DMatrix::zeros(m, m);
    k1.columns_mut(0, n).copy_from(&d_pinv);
    if m > n {
        // ker D = orthogonal complement of the row space of D. The thin
        // SVD gives an orthonormal basis of the row space (columns of V);
        // extend it to R^m by Gram-Schmidt against coordinate vectors.
        let v = svd.v_t.as_ref().expect("svd with v_t").transpose();
        let mut basis: Vec<DVector<f64>> = (0..rank).map(|j| v.column(j).into_owned()).collect();
        let mut kernel: Vec<DVector<f64>> = Vec::with_capacity(m - n);
        for j in 0..m {
            if kernel.len() == m - n {
                break;
            }
            let mut r: DVector<f64> = DVector::zeros(m);
            r[j] = 1.0;
            for _ in 0..2 {
                for b in &basis {
                    let c = b.dot(&r);
                    r -= b * c;
                }
            }
            if r.norm() > 1e-8 {
                let u = &r / r.norm();
                basis.push(u.clone());
                kernel.push(u);
            }
        }
        if kernel.len() != m - n {
            return Err(Error::Degenerate("failed to complete a kernel basis of D".into()));
        }
        for (j, kvec) in kernel.iter().enumerate() {
            k1.set_column(n + j, kvec);
        }
    }
    // K1 must be invertible: the right inverse spans the row space of D,
    // the completion spans its kernel, so together they span R^m.
    if k1.clone().lu().try_inverse().is_none() {
        return Err(Error::Degenerate("input transform K1 is singular".into()));
    }

    let k2 = -(&d_pinv * c);
    let a1 = a + b * &k2;
    let bk1 = b * &k1;
    let a2 = bk1.columns(0, n).into_owned();
    let b1 = if m > n {
        bk1.columns(n, m - n).into_owned()
    } else {
        DMatrix::zeros(n, 0)
    };
    Ok(Reduction { k1, k2, a1, a2, b1 })
}

/// Outcome of the structural necessary conditions for exact
/// controllability of the stochastic system.
#[derive(Debug, Clone)]
pub struct NecessaryConditionsReport {
    pub d_rank: usize,
    pub d_surjective: bool,
    /// Rank certificate of the reduced word span, when the reduction exists.
    pub word_rank: Option<RankCertificate>,
    pub reduction: Option<Reduction>,
    /// True when every checked condition holds.
    pub satisfied: bool,
}

/// Check surjectivity of `D` and, when it holds, the word-span rank
/// condition of the reduced system.
pub fn necessary_conditions(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    c: &DMatrix<f64>,
    d: &DMatrix<f64>,
) -> Result<NecessaryConditionsReport> {
    let n = a.nrows();
    let svd = d.clone().svd(false, false);
    let smax = svd.singular_values.max();
    let d_rank = if smax == 0.0 {
        0
    } else {
        svd.singular_values
            .iter()
            .filter(|&&s| s > RANK_REL_TOL * smax)
            .count()
    };
    let d_surjective = d_rank == n;
    if !d_surjective {
        return Ok(NecessaryConditionsReport {
            d_rank,
            d_surjective,
            word_rank: None,
            reduction: None,
            satisfied: false,
        });
    }
    let red = reduce_system(a, b, c, d)?;
    let cert = stochastic_rank(&red.a1, &red.a2, &red.b1)?;
    let satisfied = cert.full();
    Ok(NecessaryConditionsReport {
        d_rank,
        d_surjective,
        word_rank: Some(cert),
        reduction: Some(red),
        satisfied,
    })
}

/// Exact unique-continuation oracle on the binomial tree.
///
/// Discretizes the dual equation `dz = -A1^T z dt - A2^T z dW` with
/// `dW = +-sqrt(dt)` and asks whether `B1^T z(t_k) = 0` along every sign
/// path forces `z(0) = 0`. Exhaustive over all `2^steps` sign paths.
#[derive(Debug, Clone)]
pub struct BinomialOracleReport {
    pub observable: bool,
    /// Dimension of the set of initial states invisible to `B1^T`.
    pub nullspace_dim: usize,
    /// Smallest eigenvalue of the accumulated observability Gramian.
    pub min_eigenvalue: f64,
}

pub fn binomial_observability_oracle(
    a1: &DMatrix<f64>,
    a2: &DMatrix<f64>,
    b1: &DMatrix<f64>,
    steps: usize,
    dt: f64,
) -> Result<BinomialOracleReport> {
    let n = a1.nrows();
    if a1.ncols() != n || a2.shape() != (n, n) || b1.nrows() != n {
        return Err(Error::Shape("binomial oracle: inconsistent dimensions".into()));
    }
    if steps > 12 {
        return Err(Error::Resource(format!(
            "binomial tree with {steps} steps exceeds the 12-step budget"
        )));
    }
    if !(dt > 0.0) {
        return Err(Error::InvalidParameter("dt must be positive".into()));
    }
    let sdt = dt.sqrt();
    let fwd_up = DMatrix::identity(n, n) - a1.transpose() * dt - a2.transpose() * sdt;
    let fwd_dn = DMatrix::identity(n, n) - a1.transpose() * dt + a2.transpose() * sdt;

    // Accumulate the observability Gramian sum over all tree nodes:
    // H = sum_paths sum_k Phi_k^T B1 B1^T Phi_k, sharing common prefixes.
    let bbt = b1 * b1.transpose();
    let mut h = DMatrix::zeros(n, n);
    fn recurse(
        phi: &DMatrix<f64>,
        depth: usize,
        steps: usize,
        bbt: &DMatrix<f64>,
        up: &DMatrix<f64>,
        dn: &DMatrix<f64>,
        h: &mut DMatrix<f64>,
    ) {
        *h += phi.transpose() * bbt * phi;
        if depth == steps {
            return;
        }
        recurse(&(up * phi), depth + 1, steps, bbt, up, dn, h);
        recurse(&(dn * phi), depth + 1, steps, bbt, up, dn, h);
    }
    recurse(&DMatrix::identity(n, n), 0, steps, &bbt, &fwd_up, &fwd_dn, &mut h);

    let eig = nalgebra::SymmetricEigen::new(h);
    let emax = eig.eigenvalues.max().max(0.0);
    let cutoff = (RANK_REL_TOL * RANK_REL_TOL) * emax.max(1e-300);
    let nullspace_dim = eig.eigenvalues.iter().filter(|&&e| e <= cutoff).count();
    Ok(BinomialOracleReport {
        observable: nullspace_dim == 0,
        nullspace_dim,
        min_eigenvalue: eig.eigenvalues.min(),
    })
}

/// Monte Carlo energy of the dual observation `B1^T z` along
/// `dz = -A1^T z dt - A2^T z dW`.
#[derive(Debug, Clone)]
pub struct DualSimulationReport {
    /// `max_k mean_paths |B1^T z(t_k)|^2`.
    pub max_mean_observation: f64,
    pub argmax_time: f64,
    pub std_error_at_max: f64,
    /// Mean of `|z(T)|^2`, as a scale reference.
    pub terminal_energy: f64,
}

pub fn simulate_dual(
    a1: &DMatrix<f64>,
    a2: &DMatrix<f64>,
    b1: &DMatrix<f64>,
    z0: &DVector<f64>,
    paths: &PathBundle,
) -> Result<DualSimulationReport> {
    let n = a1.nrows();
    if z0.len() != n {
        return Err(Error::Shape("simulate_dual: z0 has wrong dimension".into()));
    }
    let at = a1.transpose();
    let ct = a2.transpose();
    let z = crate::stochastic::euler_maruyama(paths, z0, |_, z| -(&at * z), |_, z| -(&ct * z))?;
    let grid = paths.grid();
    let mut best = (f64::NEG_INFINITY, 0usize, 0.0);
    let mut obs_sq = vec![0.0f64; paths.n_paths()];
    for k in 0..grid.nodes() {
        for (p, o) in obs_sq.iter_mut().enumerate() {
            let zv = z.node_vector(p, k);
            *o = (b1.transpose() * zv).norm_squared();
        }
        let (m, se) = stats::mean_with_se(&obs_sq);
        if m > best.0 {
            best = (m, k, se);
        }
    }
    let terminal: Vec<f64> = (0..paths.n_paths())
        .map(|p| z.node_vector(p, grid.steps()).norm_squared())
        .collect();
    Ok(DualSimulationReport {
        max_mean_observation: best.0,
        argmax_time: grid.time(best.1),
        std_error_at_max: best.2,
        terminal_energy: stats::mean(&terminal),
    })
}

/// Dyadic bang-bang target: `+1` on `[(1 - 4^{-i}) T, (1 - 4^{-i}/2) T)`
/// for each `i >= 0`, and `-1` elsewhere on `[0, T)`.
pub fn eta(t: f64, horizon: f64) -> f64 {
    assert!(horizon > 0.0, "horizon must be positive");
    let x = 1.0 - t / horizon;
    if x <= 0.0 {
        // Convention at t = T (measure-zero point).
        return -1.0;
    }
    if x > 1.0 {
        return -1.0;
    }
    let mut level = 0usize;
    let mut lo = 0.5;
    while x <= lo && level < 4000 {
        lo *= 0.5;
        level += 1;
    }
    if level % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

/// Exact integral `int_t^T eta(s) ds` using the dyadic structure.
fn eta_integral_to_horizon(t: f64, horizon: f64) -> f64 {
    let x = 1.0 - t / horizon;
    if x <= 0.0 {
        return 0.0;
    }
    let mut level = 0usize;
    let mut lo = 0.5;
    while x <= lo && level < 4000 {
        lo *= 0.5;
        level += 1;
    }
    let sign = if level % 2 == 0 { 1.0 } else { -1.0 };
    // Partial piece of the current dyadic block plus the alternating
    // geometric tail of all later blocks.
    let partial = sign * (x - lo);
    let tail = -sign * lo / 3.0;
    horizon * (partial + tail)
}

/// Lower-bound constant for the distance of `eta` to constants in L2:
/// `min_c int_t^T |eta - c|^2 ds >= 4 beta (T - t)` with `beta` reported
/// here, estimated as the minimum over a grid of `t` values.
#[derive(Debug, Clone)]
pub struct EtaBetaReport {
    pub beta_hat: f64,
    pub argmin_t: f64,
    /// `beta_hat` recomputed on a grid twice as fine (stability check).
    pub beta_hat_refined: f64,
}

pub fn eta_beta_estimate(horizon: f64, grid_points: usize) -> Result<EtaBetaReport> {
    if !(horizon > 0.0) || grid_points < 8 {
        return Err(Error::InvalidParameter(
            "need a positive horizon and at least 8 grid points".into(),
        ));
    }
    let beta_on = |points: usize| -> (f64, f64) {
        let mut best = (f64::INFINITY, 0.0);
        for i in 0..points {
            // Stay away from t = T where both sides of the bound vanish.
            let t = horizon * i as f64 / points as f64;
            let remaining = horizon - t;
            // The minimizing constant is the average of eta on [t, T]; the
            // distance is (T - t)(1 - cbar^2) since eta^2 = 1.
            let cbar = eta_integral_to_horizon(t, horizon) / remaining;
            let beta = (1.0 - cbar * cbar) / 4.0;
            if beta < best.0 {
                best = (beta, t);
            }
        }
        best
    };
    let (beta_hat, argmin_t) = beta_on(grid_points);
    let (beta_hat_refined, _) = beta_on(2 * grid_points);
    Ok(EtaBetaReport {
        beta_hat,
        argmin_t,
        beta_hat_refined,
    })
}

/// Monte Carlo verification of the explicit degenerate backward pair
/// `z1 = exp(-W/eps - t/(2 eps^2))`, `Z1 = -z1/eps`, `z2 = Z2 = 0` on
/// `[0, 1]`: it solves `dz1 = Z1 dW`, `dz2 = -(z1 + eps Z1) dt + Z2 dW`
/// with `|z1(0)| = 1` while the source `z1 + eps Z1` vanishes identically,
/// so no estimate of `z(0)` by the data can hold uniformly in `eps`.
#[derive(Debug, Clone)]
pub struct DegeneratePairReport {
    /// Per-step RMS of the discrete residual of the `z1` equation.
    pub rms_residual_z1: f64,
    /// Per-step RMS of the discrete residual of the `z2` equation
    /// (identically zero up to rounding).
    pub rms_residual_z2: f64,
    /// Monte Carlo mean of the exponential martingale `z1` at `t = T`
    /// (exactly 1 in law) with its standard error.
    pub mean_z1_terminal: f64,
    pub se_z1_terminal: f64,
    /// `|z1(0)|`, the quantity the failed estimate would need to control.
    pub initial_value: f64,
}

pub fn verify_degenerate_pair(epsilon: f64, paths: &PathBundle) -> Result<DegeneratePairReport> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidParameter("epsilon must be positive".into()));
    }
    let grid = paths.grid();
    let dt = grid.dt();
    let mut sq1 = 0.0;
    let mut sq2 = 0.0;
    let mut count = 0usize;
    let mut terminal = Vec::with_capacity(paths.n_paths());
    for p in 0..paths.n_paths() {
        let w = paths.brownian_path(p);
        let dw = paths.increments(p);
        let z1 = |k: usize| (-w[k] / epsilon - grid.time(k) / (2.0 * epsilon * epsilon)).exp();
        for k in 0..grid.steps() {
            let z1k = z1(k);
            let cap_z1 = -z1k / epsilon;
            // dz1 = Z1 dW.
            let r1 = z1(k + 1) - z1k - cap_z1 * dw[k];
            // dz2 = -(z1 + eps Z1) dt + Z2 dW with z2 = Z2 = 0.
            let r2 = 0.0 - (-(z1k + epsilon * cap_z1) * dt);
            sq1 += r1 * r1;
            sq2 += r2 * r2;
            count += 1;
        }
        terminal.push(z1(grid.steps()));
    }
    let (mean_z1_terminal, se_z1_terminal) = stats::mean_with_se(&terminal);
    Ok(DegeneratePairReport {
        rms_residual_z1: (sq1 / count as f64).sqrt(),
        rms_residual_z2: (sq2 / count as f64).sqrt(),
        mean_z1_terminal,
        se_z1_terminal,
        initial_value: 1.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stochastic::{generate_paths, TimeGrid};
    use approx::assert_relative_eq;

    fn dm(rows: usize, cols: usize, data: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(rows, cols, data)
    }

    #[test]
    fn kalman_rank_double_integrator() {
        let a = dm(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let b = dm(2, 1, &[0.0, 1.0]);
        let cert = kalman_rank(&a, &b).unwrap();
        assert!(cert.full());
        assert!(cert.invariance_defect(&[&a]) < 1e-9);
    }

    #[test]
    fn kalman_rank_detects_uncontrollable_pair() {
        // Decoupled second state never influenced by the input.
        let a = dm(2, 2, &[1.0, 0.0, 0.0, 2.0]);
        let b = dm(2, 1, &[1.0, 0.0]);
        let cert = kalman_rank(&a, &b).unwrap();
        assert_eq!(cert.rank, 1);
    }

    #[test]
    fn expm_matches_series_on_nilpotent_and_diagonal() {
        let a = dm(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let e = expm(&a);
        assert_relative_eq!(e[(0, 1)], 1.0, epsilon = 1e-14);
        let d = dm(2, 2, &[1.0, 0.0, 0.0, -2.0]);
        let e = expm(&d);
        assert_relative_eq!(e[(0, 0)], 1f64.exp(), epsilon = 1e-12);
        assert_relative_eq!(e[(1, 1)], (-2f64).exp(), epsilon = 1e-12);
    }

    #[test]
    fn gramian_of_double_integrator_is_exact() {
        // A = [[0,1],[0,0]], B = [0,1]^T, T = 1:
        // exp(At) B = (t, 1)^T, so G = [[1/3, 1/2], [1/2, 1]].
        let a = dm(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let b = dm(2, 1, &[0.0, 1.0]);
        let ctrl = gramian_control(
            &a,
            &b,
            1.0,
            &DVector::from_column_slice(&[1.0, 0.0]),
            &DVector::zeros(2),
        )
        .unwrap();
        assert_relative_eq!(ctrl.gramian[(0, 0)], 1.0 / 3.0, epsilon = 1e-12);
        assert_relative_eq!(ctrl.gramian[(0, 1)], 0.5, epsilon = 1e-12);
        assert_relative_eq!(ctrl.gramian[(1, 1)], 1.0, epsilon = 1e-12);
        assert!(ctrl.terminal_error < 1e-8, "terminal error {}", ctrl.terminal_error);
    }

    #[test]
    fn gramian_rejects_uncontrollable_pair() {
        let a = dm(2, 2, &[1.0, 0.0, 0.0, 2.0]);
        let b = dm(2, 1, &[1.0, 0.0]);
        let res = gramian_control(
            &a,
            &b,
            1.0,
            &DVector::from_column_slice(&[1.0, 1.0]),
            &DVector::zeros(2),
        );
        assert!(matches!(res, Err(Error::NotControllable(_))));
    }

    #[test]
    fn reduction_cancels_state_in_diffusion() {
        let n = 2;
        let a = dm(2, 2, &[0.1, 0.3, -0.2, 0.5]);
        let b = dm(2, 3, &[1.0, 0.0, 0.5, 0.0, 1.0, -0.25]);
        let c = dm(2, 2, &[0.7, -0.1, 0.2, 0.4]);
        let d = dm(2, 3, &[1.0, 0.0, 1.0, 0.0, 2.0, 0.0]);
        let red = reduce_system(&a, &b, &c, &d).unwrap();
        // D K1 = [I 0].
        let dk1 = &d * &red.k1;
        for i in 0..n {
            for j in 0..3 {
                let expected = if i == j { 1.0 } else { 0.0 };
                assert_relative_eq!(dk1[(i, j)], expected, epsilon = 1e-10);
            }
        }
        // D K2 + C = 0.
        assert!((&d * &red.k2 + &c).amax() < 1e-10);
        // Drift decomposition: A2 v2 + B1 v1 = B K1 (v2; v1).
        assert_relative_eq!(red.a1[(0, 0)], (a.clone() + &b * &red.k2)[(0, 0)], epsilon = 1e-12);
    }

    #[test]
    fn reduction_requires_surjective_d() {
        let a = dm(2, 2, &[0.0, 0.0, 0.0, 0.0]);
        let b = dm(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let c = dm(2, 2, &[0.0, 0.0, 0.0, 0.0]);
        let d = dm(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        assert!(matches!(
            reduce_system(&a, &b, &c, &d),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn stochastic_rank_needs_diffusion_word() {
        // B1 spans e1 only; A1 fixes span{e1}; A2 maps e1 -> e2, so the
        // full space is reached only through the diffusion operator.
        let a1 = dm(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let a2 = dm(2, 2, &[0.0, 0.0, 1.0, 0.0]);
        let b1 = dm(2, 1, &[1.0, 0.0]);
        let cert = stochastic_rank(&a1, &a2, &b1).unwrap();
        assert!(cert.full());
        assert!(cert.words.iter().any(|w| w.contains("A2")));
        let drift_only = kalman_rank(&a1, &b1).unwrap();
        assert_eq!(drift_only.rank, 1);
    }

    #[test]
    fn binomial_oracle_agrees_with_rank() {
        let a1 = dm(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let a2 = dm(2, 2, &[0.0, 0.0, 1.0, 0.0]);
        let b1 = dm(2, 1, &[1.0, 0.0]);
        let rep = binomial_observability_oracle(&a1, &a2, &b1, 6, 0.05).unwrap();
        assert!(rep.observable);

        // Remove the diffusion coupling: e2 becomes invisible.
        let a2_zero = DMatrix::zeros(2, 2);
        let rep = binomial_observability_oracle(&a1, &a2_zero, &b1, 6, 0.05).unwrap();
        assert!(!rep.observable);
        assert_eq!(rep.nullspace_dim, 1);
    }

    #[test]
    fn binomial_oracle_enforces_budget() {
        let a = DMatrix::identity(2, 2);
        let b = dm(2, 1, &[1.0, 0.0]);
        assert!(matches!(
            binomial_observability_oracle(&a, &a, &b, 13, 0.01),
            Err(Error::Resource(_))
        ));
    }

    #[test]
    fn dual_simulation_sees_energy_when_observable() {
        let a1 = dm(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let a2 = dm(2, 2, &[0.0, 0.0, 1.0, 0.0]);
        let b1 = dm(2, 1, &[1.0, 0.0]);
        let grid = TimeGrid::new(0.0, 1.0, 100).unwrap();
        let paths = generate_paths(grid, 4000, 31).unwrap();
        // z0 = e2 is invisible at t = 0 but becomes visible through A2.
        let z0 = DVector::from_column_slice(&[0.0, 1.0]);
        let rep = simulate_dual(&a1, &a2, &b1, &z0, &paths).unwrap();
        assert!(
            rep.max_mean_observation > 10.0 * rep.std_error_at_max,
            "observation energy {} vs se {}",
            rep.max_mean_observation,
            rep.std_error_at_max
        );
    }

    #[test]
    fn eta_alternates_on_dyadic_blocks() {
        let t = 1.0;
        assert_eq!(eta(0.0, t), 1.0);
        assert_eq!(eta(0.25, t), 1.0);
        assert_eq!(eta(0.6, t), -1.0);
        assert_eq!(eta(0.8, t), 1.0);
        assert_eq!(eta(0.9, t), -1.0);
    }

    #[test]
    fn eta_integral_matches_quadrature() {
        let t = 1.0;
        for &t0 in &[0.0, 0.3, 0.55, 0.77, 0.9] {
            let exact = eta_integral_to_horizon(t0, t);
            // Riemann sum on a fine grid as an independent oracle.
            let n = 400_000;
            let h = (t - t0) / n as f64;
            let approx: f64 = (0..n).map(|i| eta(t0 + (i as f64 + 0.5) * h, t) * h).sum();
            assert!(
                (exact - approx).abs() < 5e-5,
                "t0 = {t0}: exact {exact} vs quadrature {approx}"
            );
        }
    }

    #[test]
    fn beta_estimate_is_positive_and_stable() {
        let rep = eta_beta_estimate(1.0, 4096).unwrap();
        // The dyadic structure gives |average of eta on [t, T]| <= 1/3,
        // hence beta = (1 - 1/9)/4 = 2/9 at the extremes.
        assert!(rep.beta_hat > 0.2, "beta_hat = {}", rep.beta_hat);
        assert!(rep.beta_hat <= 2.0 / 9.0 + 1e-9);
        assert!(
            (rep.beta_hat - rep.beta_hat_refined).abs() < 0.02,
            "beta {} vs refined {}",
            rep.beta_hat,
            rep.beta_hat_refined
        );
    }

    #[test]
    fn degenerate_pair_solves_its_system() {
        let grid = TimeGrid::new(0.0, 1.0, 200).unwrap();
        let paths = generate_paths(grid, 20_000, 37).unwrap();
        let rep = verify_degenerate_pair(0.5, &paths).unwrap();
        // The z2 equation holds exactly: the source z1 + eps Z1 vanishes.
        assert_eq!(rep.rms_residual_z2, 0.0);
        // z1 is an exponential martingale started at 1.
        assert!(
            (rep.mean_z1_terminal - 1.0).abs() <= 3.0 * rep.se_z1_terminal,
            "mean {} se {}",
            rep.mean_z1_terminal,
            rep.se_z1_terminal
        );
    }

    #[test]
    fn degenerate_pair_residual_halves_with_dt() {
        let mut rms = Vec::new();
        for steps in [100usize, 200] {
            let grid = TimeGrid::new(0.0, 1.0, steps).unwrap();
            let paths = generate_paths(grid, 20_000, 41).unwrap();
            rms.push(verify_degenerate_pair(0.5, &paths).unwrap().rms_residual_z1);
        }
        let factor = rms[0] / rms[1];
        assert!(
            (factor - 2.0).abs() < 0.6,
            "residual factor {factor}, rms {rms:?}"
        );
    }
}

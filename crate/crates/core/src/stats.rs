//! Small numerical toolbox: sample statistics, least-squares regression with
//! coefficient standard errors, polynomial feature maps, and Gaussian
//! quadrature rules (Hermite for normal expectations, Legendre for smooth
//! time integrals).

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Sample mean of a slice.
pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return f64::NAN;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64
}

/// Standard error of the sample mean.
pub fn std_error(xs: &[f64]) -> f64 {
    (variance(xs) / xs.len() as f64).sqrt()
}

/// Mean together with its standard error.
pub fn mean_with_se(xs: &[f64]) -> (f64, f64) {
    (mean(xs), std_error(xs))
}

/// Ordinary least squares fit with coefficient standard errors.
pub struct OlsFit {
    pub coefficients: DVector<f64>,
    /// Standard error of each coefficient under the homoscedastic model.
    pub std_errors: DVector<f64>,
    /// Fitted values X * beta.
    pub fitted: DVector<f64>,
}

/// Solve `min_beta |X beta - y|^2` by SVD and report coefficient standard
/// errors. Rank-deficient designs are handled by truncating small singular
/// values (relative cutoff 1e-12), in which case the reported standard
/// errors refer to the minimum-norm solution.
pub fn ols(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<OlsFit> {
    let (n, q) = x.shape();
    if y.len() != n {
        return Err(Error::Shape(format!(
            "design has {n} rows but response has {} entries",
            y.len()
        )));
    }
    if n <= q {
        return Err(Error::InvalidParameter(format!(
            "need more observations ({n}) than regressors ({q})"
        )));
    }
    let svd = x.clone().svd(true, true);
    let smax = svd.singular_values.max();
    if smax == 0.0 {
        return Err(Error::Degenerate("all-zero design matrix".into()));
    }
    let cutoff = 1e-12 * smax;
    let u = svd.u.as_ref().expect("svd with u");
    let vt = svd.v_t.as_ref().expect("svd with v_t");
    let uty = u.transpose() * y;
    let mut beta = DVector::zeros(q);
    // Diagonal of the pseudo-inverse Gram matrix, for standard errors:
    // Var(beta) = sigma^2 (X^T X)^+ = sigma^2 V S^-2 V^T.
    let mut gram_inv_diag = DVector::zeros(q);
    for k in 0..svd.singular_values.len() {
        let s = svd.singular_values[k];
        if s <= cutoff {
            continue;
        }
        let vk = vt.row(k).transpose();
        beta += &vk * (uty[k] / s);
        for j in 0..q {
            gram_inv_diag[j] += vk[j] * vk[j] / (s * s);
        }
    }
    let fitted = x * &beta;
    let resid = y - &fitted;
    let dof = (n - q) as f64;
    let sigma2 = resid.norm_squared() / dof;
    let std_errors = gram_inv_diag.map(|g: f64| (sigma2 * g).sqrt());
    Ok(OlsFit {
        coefficients: beta,
        std_errors,
        fitted,
    })
}

/// Orthogonal projector onto the column space of a design matrix, reused
/// across many responses (e.g. one regression step of a least-squares
/// Monte Carlo sweep solves for several right-hand sides).
pub struct ProjectionSolver {
    u: DMatrix<f64>,
    retained: Vec<usize>,
}

impl ProjectionSolver {
    /// Factor the design once; columns with singular value below
    /// `1e-10 * sigma_max` are dropped, so collinear features are harmless.
    pub fn new(x: &DMatrix<f64>) -> Result<Self> {
        if x.nrows() <= x.ncols() {
            return Err(Error::InvalidParameter(format!(
                "need more observations ({}) than regressors ({})",
                x.nrows(),
                x.ncols()
            )));
        }
        let svd = x.clone().svd(true, false);
        let smax = svd.singular_values.max();
        if smax == 0.0 {
            return Err(Error::Degenerate("all-zero design matrix".into()));
        }
        let retained: Vec<usize> = (0..svd.singular_values.len())
            .filter(|&k| svd.singular_values[k] > 1e-10 * smax)
            .collect();
        Ok(Self {
            u: svd.u.expect("svd with u"),
            retained,
        })
    }

    /// Fitted values of the least-squares regression of `y` on the design.
    pub fn fitted(&self, y: &[f64]) -> Vec<f64> {
        let n = self.u.nrows();
        debug_assert_eq!(y.len(), n);
        let mut out = vec![0.0; n];
        for &k in &self.retained {
            let col = self.u.column(k);
            let mut dot = 0.0;
            for i in 0..n {
                dot += col[i] * y[i];
            }
            for i in 0..n {
                out[i] += col[i] * dot;
            }
        }
        out
    }
}

/// Monomial feature row `[1, x, x^2, ..., x^degree]`.
pub fn monomial_features(x: f64, degree: usize) -> Vec<f64> {
    let mut row = Vec::with_capacity(degree + 1);
    let mut p = 1.0;
    for _ in 0..=degree {
        row.push(p);
        p *= x;
    }
    row
}

/// Build a Vandermonde design matrix from scalar samples.
pub fn monomial_design(xs: &[f64], degree: usize) -> DMatrix<f64> {
    DMatrix::from_fn(xs.len(), degree + 1, |i, j| xs[i].powi(j as i32))
}

/// Nodes and weights of an n-point Gaussian rule, computed from the
/// symmetric Jacobi matrix of the orthogonal-polynomial recurrence
/// (Golub-Welsch).
fn golub_welsch(offdiag: &[f64], weight_total: f64) -> (Vec<f64>, Vec<f64>) {
    let n = offdiag.len() + 1;
    let mut jac = DMatrix::zeros(n, n);
    for (k, &b) in offdiag.iter().enumerate() {
        jac[(k, k + 1)] = b;
        jac[(k + 1, k)] = b;
    }
    let eig = nalgebra::SymmetricEigen::new(jac);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let v0 = eig.eigenvectors[(0, i)];
            (eig.eigenvalues[i], weight_total * v0 * v0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

/// Gauss-Hermite rule for the physicists' weight `exp(-x^2)` on the line.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1, "quadrature needs at least one node");
    let offdiag: Vec<f64> = (1..n).map(|k| (k as f64 / 2.0).sqrt()).collect();
    golub_welsch(&offdiag, std::f64::consts::PI.sqrt())
}

/// Expectation `E[g(m + s N)]` for standard normal `N`, by Gauss-Hermite
/// quadrature with `n` nodes.
pub fn normal_expectation(m: f64, s: f64, n: usize, g: impl Fn(f64) -> f64) -> f64 {
    let (nodes, weights) = gauss_hermite(n);
    let c = 1.0 / std::f64::consts::PI.sqrt();
    let sq2 = std::f64::consts::SQRT_2;
    nodes
        .iter()
        .zip(&weights)
        .map(|(&x, &w)| w * g(m + s * sq2 * x))
        .sum::<f64>()
        * c
}

/// Gauss-Legendre rule on [-1, 1].
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1, "quadrature needs at least one node");
    let offdiag: Vec<f64> = (1..n)
        .map(|k| {
            let k = k as f64;
            k / (4.0 * k * k - 1.0).sqrt()
        })
        .collect();
    golub_welsch(&offdiag, 2.0)
}

/// Integrate a smooth scalar function over [a, b] with a composite
/// Gauss-Legendre rule (`panels` panels of `nodes` points each).
pub fn integrate_gl(a: f64, b: f64, panels: usize, nodes: usize, f: impl Fn(f64) -> f64) -> f64 {
    let (xs, ws) = gauss_legendre(nodes);
    let h = (b - a) / panels as f64;
    let mut total = 0.0;
    for p in 0..panels {
        let lo = a + p as f64 * h;
        let mid = lo + 0.5 * h;
        for (x, w) in xs.iter().zip(&ws) {
            total += w * f(mid + 0.5 * h * x);
        }
    }
    total * 0.5 * h
}

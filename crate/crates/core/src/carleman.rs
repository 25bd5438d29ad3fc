//! Carleman weights and the pointwise weighted identity, in one space
//! dimension.
//!
//! The weight family is
//!
//! ```text
//! tau(t) = 1 / (t (T - t)),
//! phi    = e^{mu psi(x)} tau(t),
//! alpha  = (e^{mu psi(x)} - kappa) tau(t),   kappa = e^{2 mu |psi|_inf},
//! ell    = lambda alpha,                      theta = e^{ell},
//! ```
//!
//! with `psi >= 0` vanishing at the endpooints of `[0, 1]`. For a scalar
//! diffusion coefficient `b(t, x)` the coefficient fields are
//!
//! ```text
//! Psi = 2 b ell_xx,
//! A   = -b ell_x^2 + b_x ell_x - b ell_xx - ell_t,
//! C   = 3 b^2 ell_xx - b_t / 2,
//! B   = 2 [A Psi - (A b ell_x)_x] - A_t - (b Psi_x)_x,
//! ```
//!
//! and for *any* smooth `w(t, x)` the pointwise identity
//!
//! ```text
//! 2 E G + T2 + T3 = 2 C w_x^2 + B w^2 + R3 + 2 E^2
//! ```
//!
//! holds exactly, where `E = -b_x w_x - b w_xx + A w` collects the
//! second-order terms, `G = E + w_t + 2 b ell_x w_x + Psi w` is the
//! transformed parabolic operator, `T2, T3` gather the mixed
//! derivative products and `R3` the exact time-derivative terms (see
//! [`verify_pointwise_identity`] for the full term list). This is the
//! deterministic reduction of the stochastic identity (`dh -> h_t dt`,
//! quadratic variation dropped); the whole system of coefficients has been
//! cross-checked symbolically.
//!
//! All `ell`-derivatives are evaluated from closed formulas — finite
//! differences touch only the test function `w`.

use crate::error::{Error, Result};
use crate::stats;

/// Spatial weight `psi` with derivatives up to fourth order and its sup
/// norm. `psi` must be nonnegative and vanish at `x = 0, 1`.
pub struct SpatialWeight {
    pub psi: Box<dyn Fn(f64) -> f64>,
    pub psi_x: Box<dyn Fn(f64) -> f64>,
    pub psi_xx: Box<dyn Fn(f64) -> f64>,
    pub psi_xxx: Box<dyn Fn(f64) -> f64>,
    pub psi_xxxx: Box<dyn Fn(f64) -> f64>,
    pub sup_abs: f64,
}

impl SpatialWeight {
    /// The standard parabola `psi(x) = x (1 - x)`, critical point at 1/2.
    pub fn parabola() -> Self {
        Self {
            psi: Box::new(|x| x * (1.0 - x)),
            psi_x: Box::new(|x| 1.0 - 2.0 * x),
            psi_xx: Box::new(|_| -2.0),
            psi_xxx: Box::new(|_| 0.0),
            psi_xxxx: Box::new(|_| 0.0),
            sup_abs: 0.25,
        }
    }
}

/// Parameters of the weight family.
pub struct WeightSpec {
    pub horizon: f64,
    pub lambda: f64,
    pub mu: f64,
    pub psi: SpatialWeight,
    /// Interior margin: fields are evaluated on `t in [delta, T - delta]`.
    pub delta: f64,
}

impl WeightSpec {
    pub fn new(horizon: f64, lambda: f64, mu: f64, psi: SpatialWeight, delta: f64) -> Result<Self> {
        if !(lambda > 1.0 && mu > 1.0) {
            return Err(Error::InvalidParameter(format!(
                "need lambda > 1 and mu > 1, got ({lambda}, {mu})"
            )));
        }
        if !(horizon > 0.0 && delta > 0.0 && 2.0 * delta < horizon) {
            return Err(Error::InvalidParameter(
                "need 0 < delta < horizon / 2".into(),
            ));
        }
        Ok(Self {
            horizon,
            lambda,
            mu,
            psi,
            delta,
        })
    }

    /// `kappa = e^{2 mu |psi|_inf}`.
    pub fn kappa(&self) -> f64 {
        (2.0 * self.mu * self.psi.sup_abs).exp()
    }

    /// All weight values and analytic `ell`-derivatives at `(t, x)`.
    pub fn weights(&self, t: f64, x: f64) -> Result<WeightValues> {
        let tt = self.horizon;
        if !(t > 0.0 && t < tt) {
            return Err(Error::InvalidParameter(format!(
                "weights blow up outside t in (0, {tt}); got t = {t}"
            )));
        }
        let (lam, mu) = (self.lambda, self.mu);
        let tau = 1.0 / (t * (tt - t));
        let tau_t = -(tt - 2.0 * t) * tau * tau;
        let tau_tt = 2.0 * tau * tau + 2.0 * (tt - 2.0 * t).powi(2) * tau.powi(3);
        let p = (self.psi.psi)(x);
        let px = (self.psi.psi_x)(x);
        let pxx = (self.psi.psi_xx)(x);
        let pxxx = (self.psi.psi_xxx)(x);
        let pxxxx = (self.psi.psi_xxxx)(x);
        let e = (mu * p).exp();
        let phi = e * tau;
        let alpha = (e - self.kappa()) * tau;
        Ok(WeightValues {
            tau,
            tau_t,
            tau_tt,
            phi,
            alpha,
            l: lam * alpha,
            l_x: lam * mu * e * px * tau,
            l_xx: lam * mu * e * (mu * px * px + pxx) * tau,
            l_xxx: lam * mu * e * (mu * mu * px.powi(3) + 3.0 * mu * px * pxx + pxxx) * tau,
            l_xxxx: lam
                * mu
                * e
                * (mu.powi(3) * px.powi(4)
                    + 6.0 * mu * mu * px * px * pxx
                    + 3.0 * mu * pxx * pxx
                    + 4.0 * mu * px * pxxx
                    + pxxxx)
                * tau,
            l_t: lam * (e - self.kappa()) * tau_t,
            l_tt: lam * (e - self.kappa()) * tau_tt,
            l_xt: lam * mu * e * px * tau_t,
            l_xxt: lam * mu * e * (mu * px * px + pxx) * tau_t,
        })
    }
}

/// Weight values at a point. `l` is `ell = log theta`; use [`Self::theta`]
/// for `theta` itself (it underflows to 0 for large `lambda`, by design —
/// every identity computation stays in the `w`-form and never multiplies
/// by `theta`).
#[derive(Debug, Clone, Copy)]
pub struct WeightValues {
    pub tau: f64,
    pub tau_t: f64,
    pub tau_tt: f64,
    pub phi: f64,
    pub alpha: f64,
    pub l: f64,
    pub l_x: f64,
    pub l_xx: f64,
    pub l_xxx: f64,
    pub l_xxxx: f64,
    pub l_t: f64,
    pub l_tt: f64,
    pub l_xt: f64,
    pub l_xxt: f64,
}

impl WeightValues {
    pub fn theta(&self) -> f64 {
        self.l.exp()
    }
}

/// Scalar diffusion coefficient `b(t, x)` with the partial derivatives the
/// coefficient fields need.
pub struct Diffusion {
    pub b: Box<dyn Fn(f64, f64) -> f64>,
    pub b_x: Box<dyn Fn(f64, f64) -> f64>,
    pub b_xx: Box<dyn Fn(f64, f64) -> f64>,
    pub b_t: Box<dyn Fn(f64, f64) -> f64>,
    pub b_xt: Box<dyn Fn(f64, f64) -> f64>,
}

impl Diffusion {
    pub fn constant(c: f64) -> Self {
        Self {
            b: Box::new(move |_, _| c),
            b_x: Box::new(|_, _| 0.0),
            b_xx: Box::new(|_, _| 0.0),
            b_t: Box::new(|_, _| 0.0),
            b_xt: Box::new(|_, _| 0.0),
        }
    }
}

/// The coefficient fields at a point, with the auxiliary derivatives used
/// by the identity.
#[derive(Debug, Clone, Copy)]
pub struct CoefficientFields {
    /// `A` and its space/time derivatives.
    pub cal_a: f64,
    pub cal_a_x: f64,
    pub cal_a_t: f64,
    /// `Psi = 2 b ell_xx` and derivatives.
    pub cap_psi: f64,
    pub cap_psi_x: f64,
    pub cap_psi_xx: f64,
    /// `B` (the `w^2` coefficient).
    pub cal_b: f64,
    /// `C` (the `w_x^2` coefficient).
    pub cal_c: f64,
}

pub fn coefficient_fields(
    spec: &WeightSpec,
    diff: &Diffusion,
    t: f64,
    x: f64,
) -> Result<CoefficientFields> {
    let l = spec.weights(t, x)?;
    let b = (diff.b)(t, x);
    let b_x = (diff.b_x)(t, x);
    let b_xx = (diff.b_xx)(t, x);
    let b_t = (diff.b_t)(t, x);
    let b_xt = (diff.b_xt)(t, x);

    let cap_psi = 2.0 * b * l.l_xx;
    let cap_psi_x = 2.0 * (b_x * l.l_xx + b * l.l_xxx);
    let cap_psi_xx = 2.0 * (b_xx * l.l_xx + 2.0 * b_x * l.l_xxx + b * l.l_xxxx);

    let cal_a = -b * l.l_x * l.l_x + b_x * l.l_x - b * l.l_xx - l.l_t;
    let cal_a_x =
        -b_x * l.l_x * l.l_x - 2.0 * b * l.l_x * l.l_xx + b_xx * l.l_x - b * l.l_xxx - l.l_xt;
    let cal_a_t = -b_t * l.l_x * l.l_x - 2.0 * b * l.l_x * l.l_xt + b_xt * l.l_x + b_x * l.l_xt
        - b_t * l.l_xx
        - b * l.l_xxt
        - l.l_tt;

    let cal_c = 3.0 * b * b * l.l_xx - 0.5 * b_t;
    // (A b ell_x)_x and (b Psi_x)_x expanded by the product rule.
    let a_b_lx_x = cal_a_x * b * l.l_x + cal_a * b_x * l.l_x + cal_a * b * l.l_xx;
    let b_psix_x = b_x * cap_psi_x + b * cap_psi_xx;
    let cal_b = 2.0 * (cal_a * cap_psi - a_b_lx_x) - cal_a_t - b_psix_x;

    Ok(CoefficientFields {
        cal_a,
        cal_a_x,
        cal_a_t,
        cap_psi,
        cap_psi_x,
        cap_psi_xx,
        cal_b,
        cal_c,
    })
}

/// Residual report for one grid level.
#[derive(Debug, Clone)]
pub struct IdentityResidual {
    pub nt: usize,
    pub nx: usize,
    pub ht: f64,
    pub hx: f64,
    pub max_abs: f64,
    pub rms: f64,
    /// Largest per-point magnitude among the individual identity terms,
    /// for judging the residual relative to cancellation size.
    pub scale: f64,
}

/// How the exact-derivative terms of the identity are evaluated.
///
/// The identity contains three groups that are exact derivatives of flux
/// quantities:
///
/// ```text
/// T2 = d/dx [ 2 b w_x w_t ],
/// T3 = d/dx [ 2 b^2 ell_x w_x^2 + 2 Psi b w_x w - 2 b (A ell_x + Psi_x/2) w^2 ],
/// R3 = d/dt [ b w_x^2 + A w^2 ].
/// ```
///
/// `Expanded` substitutes the product-rule expansions, which makes the
/// residual an *algebraic* identity in the jet `(w, w_t, w_x, w_xx, w_xt)`
/// — exact to rounding for arbitrary grid values, hence a transcription
/// check. `Divergence` differentiates the fluxes with outer stencils, so
/// equality relies on the product rule and the residual carries the
/// genuine `O(h^2)` truncation error probed by the convergence study.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IdentityForm {
    Expanded,
    Divergence,
}

/// Evaluate the pointwise identity residual for a smooth test function `w`
/// on an `(nt + 1) x (nx + 1)` grid over `[delta, T - delta] x [0, 1]`.
/// Spatial derivatives of `w` use fourth-order five-point stencils, the
/// time derivative a second-order centered difference; all weight fields
/// are analytic.
pub fn verify_pointwise_identity(
    spec: &WeightSpec,
    diff: &Diffusion,
    w: &dyn Fn(f64, f64) -> f64,
    nt: usize,
    nx: usize,
    form: IdentityForm,
) -> Result<IdentityResidual> {
    if nt < 8 || nx < 16 {
        return Err(Error::InvalidParameter("grid too coarse for stencils".into()));
    }
    let t_lo = spec.delta;
    let t_hi = spec.horizon - spec.delta;
    let ht = (t_hi - t_lo) / nt as f64;
    let hx = 1.0 / nx as f64;
    // Sample w once.
    let mut grid = vec![0.0f64; (nt + 1) * (nx + 1)];
    for j in 0..=nt {
        let t = t_lo + j as f64 * ht;
        for i in 0..=nx {
            let v = w(t, i as f64 * hx);
            if !v.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "test function not finite at ({t}, {})",
                    i as f64 * hx
                )));
            }
            grid[j * (nx + 1) + i] = v;
        }
    }
    let at = |j: usize, i: usize| grid[j * (nx + 1) + i];
    // Fourth-order first and second x-derivatives, centered t-derivative.
    let dx = |j: usize, i: usize| {
        (-at(j, i + 2) + 8.0 * at(j, i + 1) - 8.0 * at(j, i - 1) + at(j, i - 2)) / (12.0 * hx)
    };
    let dxx = |j: usize, i: usize| {
        (-at(j, i + 2) + 16.0 * at(j, i + 1) - 30.0 * at(j, i) + 16.0 * at(j, i - 1)
            - at(j, i - 2))
            / (12.0 * hx * hx)
    };
    let dt_ = |j: usize, i: usize| (at(j + 1, i) - at(j - 1, i)) / (2.0 * ht);
    let dxt = |j: usize, i: usize| {
        (-dt_(j, i + 2) + 8.0 * dt_(j, i + 1) - 8.0 * dt_(j, i - 1) + dt_(j, i - 2)) / (12.0 * hx)
    };

    // Spatial flux of T2 + T3 and temporal flux of R3 at a jet-valid node.
    let flux_x = |j: usize, i: usize| -> Result<f64> {
        let t = t_lo + j as f64 * ht;
        let x = i as f64 * hx;
        let f = coefficient_fields(spec, diff, t, x)?;
        let lw = spec.weights(t, x)?;
        let b = (diff.b)(t, x);
        let (w0, w_x, w_t) = (at(j, i), dx(j, i), dt_(j, i));
        Ok(2.0 * b * w_x * w_t
            + 2.0 * b * b * lw.l_x * w_x * w_x
            + 2.0 * f.cap_psi * b * w_x * w0
            - 2.0 * b * (f.cal_a * lw.l_x + 0.5 * f.cap_psi_x) * w0 * w0)
    };
    let flux_t = |j: usize, i: usize| -> Result<f64> {
        let t = t_lo + j as f64 * ht;
        let x = i as f64 * hx;
        let f = coefficient_fields(spec, diff, t, x)?;
        let b = (diff.b)(t, x);
        let (w0, w_x) = (at(j, i), dx(j, i));
        Ok(b * w_x * w_x + f.cal_a * w0 * w0)
    };

    // Evaluation margins: jet stencils need (i +- 2, j +- 1); the outer
    // divergence stencils need jets at (i +- 2) and (j +- 1) again.
    let (i_lo, i_hi, j_lo, j_hi) = match form {
        IdentityForm::Expanded => (2, nx - 2, 1, nt - 1),
        IdentityForm::Divergence => (4, nx - 4, 2, nt - 2),
    };
    let mut max_abs = 0.0f64;
    let mut sq_sum = 0.0f64;
    let mut scale = 0.0f64;
    let mut count = 0usize;
    for j in j_lo..=j_hi {
        let t = t_lo + j as f64 * ht;
        for i in i_lo..=i_hi {
            let x = i as f64 * hx;
            let f = coefficient_fields(spec, diff, t, x)?;
            let lw = spec.weights(t, x)?;
            let b = (diff.b)(t, x);
            let b_x = (diff.b_x)(t, x);
            let b_t = (diff.b_t)(t, x);
            let (w0, w_x, w_xx, w_t, w_xt) = (at(j, i), dx(j, i), dxx(j, i), dt_(j, i), dxt(j, i));

            let e = -b_x * w_x - b * w_xx + f.cal_a * w0;
            let g = e + w_t + 2.0 * b * lw.l_x * w_x + f.cap_psi * w0;
            let t1 = 2.0 * e * g;
            let (t23, r3) = match form {
                IdentityForm::Expanded => {
                    let t2 = 2.0 * (b_x * w_x * w_t + b * (w_xx * w_t + w_x * w_xt));
                    let t3 = 2.0
                        * ((2.0 * b * b_x * lw.l_x + b * b * lw.l_xx) * w_x * w_x
                            + 2.0 * b * b * lw.l_x * w_x * w_xx
                            + (f.cap_psi_x * b + f.cap_psi * b_x) * w_x * w0
                            + f.cap_psi * b * (w_xx * w0 + w_x * w_x)
                            - (b_x * (f.cal_a * lw.l_x + 0.5 * f.cap_psi_x)
                                + b * (f.cal_a_x * lw.l_x
                                    + f.cal_a * lw.l_xx
                                    + 0.5 * f.cap_psi_xx))
                                * w0
                                * w0
                            - 2.0 * b * (f.cal_a * lw.l_x + 0.5 * f.cap_psi_x) * w0 * w_x);
                    let r3 = b_t * w_x * w_x
                        + 2.0 * b * w_x * w_xt
                        + f.cal_a_t * w0 * w0
                        + 2.0 * f.cal_a * w0 * w_t;
                    (t2 + t3, r3)
                }
                IdentityForm::Divergence => {
                    let t23 = (-flux_x(j, i + 2)? + 8.0 * flux_x(j, i + 1)?
                        - 8.0 * flux_x(j, i - 1)?
                        + flux_x(j, i - 2)?)
                        / (12.0 * hx);
                    let r3 = (flux_t(j + 1, i)? - flux_t(j - 1, i)?) / (2.0 * ht);
                    (t23, r3)
                }
            };
            let r1 = 2.0 * f.cal_c * w_x * w_x;
            let r2 = f.cal_b * w0 * w0;
            let r4 = 2.0 * e * e;
            let resid = t1 + t23 - (r1 + r2 + r3 + r4);
            let local = t1
                .abs()
                .max(t23.abs())
                .max(r1.abs())
                .max(r2.abs())
                .max(r3.abs())
                .max(r4.abs());
            scale = scale.max(local);
            max_abs = max_abs.max(resid.abs());
            sq_sum += resid * resid;
            count += 1;
        }
    }
    Ok(IdentityResidual {
        nt,
        nx,
        ht,
        hx,
        max_abs,
        rms: (sq_sum / count as f64).sqrt(),
        scale,
    })
}

/// Convenience: the weighted test function `w = theta h = e^ell h`.
pub fn weighted_test_function<'a>(
    spec: &'a WeightSpec,
    h: &'a dyn Fn(f64, f64) -> f64,
) -> impl Fn(f64, f64) -> f64 + 'a {
    move |t, x| {
        let l = spec.weights(t, x).map(|v| v.l).unwrap_or(f64::NEG_INFINITY);
        l.exp() * h(t, x)
    }
}

/// Dyadic grid-refinement study of the identity residual.
#[derive(Debug, Clone)]
pub struct ConvergenceStudy {
    pub levels: Vec<IdentityResidual>,
    /// Fitted slope of `log rms` against `log h` (refinement halves both
    /// spacings, so a single `h` represents each level).
    pub order: f64,
}

pub fn identity_convergence(
    spec: &WeightSpec,
    diff: &Diffusion,
    w: &dyn Fn(f64, f64) -> f64,
    base_nt: usize,
    base_nx: usize,
    levels: usize,
) -> Result<ConvergenceStudy> {
    if levels < 3 {
        return Err(Error::InvalidParameter(
            "need at least 3 refinement levels".into(),
        ));
    }
    let mut out = Vec::with_capacity(levels);
    for k in 0..levels {
        let f = 1usize << k;
        out.push(verify_pointwise_identity(
            spec,
            diff,
            w,
            base_nt * f,
            base_nx * f,
            IdentityForm::Divergence,
        )?);
    }
    let design = nalgebra::DMatrix::from_fn(levels, 2, |row, col| {
        if col == 0 {
            1.0
        } else {
            out[row].hx.ln()
        }
    });
    let y = nalgebra::DVector::from_iterator(levels, out.iter().map(|r| r.rms.max(1e-300).ln()));
    let fit = stats::ols(&design, &y)?;
    Ok(ConvergenceStudy {
        levels: out,
        order: fit.coefficients[1],
    })
}

/// One row of the large-parameter sweep: the fields normalized by their
/// predicted leading expressions for `b = -1`:
/// `A / (lambda^2 mu^2 phi^2 psi_x^2) -> 1`,
/// `B / (lambda^3 mu^4 phi^3 psi_x^4) -> 2 (1 + psi_xx / (mu psi_x^2))`,
/// `C / (lambda mu^2 phi psi_x^2) -> 3 (1 + psi_xx / (mu psi_x^2))`.
/// The ratios approach the constants 1, 2, 3 only once `mu psi_x^2`
/// dominates `|psi_xx|`; points with small gradient stay far from them at
/// any `lambda`.
#[derive(Debug, Clone)]
pub struct AsymptoticRow {
    pub lambda: f64,
    pub mu: f64,
    pub x: f64,
    pub psi_x: f64,
    pub ratio_a: f64,
    pub ratio_b: f64,
    pub ratio_c: f64,
}

/// Sweep the normalized fields at time `t_eval` over parameter pairs and
/// evaluation points (skipping points with `|psi_x| < 0.1`, where the
/// asymptotic estimates make no claim).
pub fn asymptotic_checks(
    horizon: f64,
    t_eval: f64,
    lambdas: &[f64],
    mus: &[f64],
    xs: &[f64],
) -> Result<Vec<AsymptoticRow>> {
    let diff = Diffusion::constant(-1.0);
    let mut rows = Vec::new();
    for &mu in mus {
        for &lambda in lambdas {
            let spec = WeightSpec::new(horizon, lambda, mu, SpatialWeight::parabola(), 0.1 * horizon)?;
            for &x in xs {
                let px = (spec.psi.psi_x)(x);
                if px.abs() < 0.1 {
                    continue;
                }
                let lw = spec.weights(t_eval, x)?;
                let f = coefficient_fields(&spec, &diff, t_eval, x)?;
                let phi = lw.phi;
                rows.push(AsymptoticRow {
                    lambda,
                    mu,
                    x,
                    psi_x: px,
                    ratio_a: f.cal_a / (lambda * lambda * mu * mu * phi * phi * px * px),
                    ratio_b: f.cal_b / (lambda.powi(3) * mu.powi(4) * phi.powi(3) * px.powi(4)),
                    ratio_c: f.cal_c / (lambda * mu * mu * phi * px * px),
                });
            }
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn spec(lambda: f64, mu: f64) -> WeightSpec {
        WeightSpec::new(1.0, lambda, mu, SpatialWeight::parabola(), 0.1).unwrap()
    }

    #[test]
    fn phi_matches_direct_evaluation() {
        // psi = x(1-x), mu = 2, x = 1/2, t = T/2: phi = e^{mu/4} / (T^2/4).
        let s = spec(2.0, 2.0);
        let w = s.weights(0.5, 0.5).unwrap();
        assert_relative_eq!(w.phi, (2.0f64 / 4.0).exp() / 0.25, epsilon = 1e-12);
    }

    #[test]
    fn alpha_is_negative_on_interior_window() {
        let s = spec(3.0, 2.5);
        for j in 0..=20 {
            let t = 0.1 + 0.8 * j as f64 / 20.0;
            for i in 0..=20 {
                let w = s.weights(t, i as f64 / 20.0).unwrap();
                assert!(w.alpha < 0.0, "alpha = {} at ({t}, {i})", w.alpha);
            }
        }
    }

    #[test]
    fn weights_reject_endpoint_times() {
        let s = spec(2.0, 2.0);
        assert!(s.weights(0.0, 0.5).is_err());
        assert!(s.weights(1.0, 0.5).is_err());
    }

    #[test]
    fn analytic_derivatives_match_finite_differences() {
        let s = spec(1.7, 2.3);
        let (t, x) = (0.37, 0.29);
        let h = 1e-5;
        let l = |t: f64, x: f64| s.weights(t, x).unwrap().l;
        let w = s.weights(t, x).unwrap();
        let fd_x = (l(t, x + h) - l(t, x - h)) / (2.0 * h);
        let fd_xx = (l(t, x + h) - 2.0 * l(t, x) + l(t, x - h)) / (h * h);
        let fd_t = (l(t + h, x) - l(t - h, x)) / (2.0 * h);
        let fd_xt = (l(t + h, x + h) - l(t + h, x - h) - l(t - h, x + h) + l(t - h, x - h))
            / (4.0 * h * h);
        assert_relative_eq!(w.l_x, fd_x, max_relative = 1e-7);
        assert_relative_eq!(w.l_xx, fd_xx, max_relative = 1e-5);
        assert_relative_eq!(w.l_t, fd_t, max_relative = 1e-7);
        assert_relative_eq!(w.l_xt, fd_xt, max_relative = 1e-5);
    }

    #[test]
    fn coefficient_derivatives_match_finite_differences() {
        let s = spec(1.9, 2.1);
        let diff = Diffusion {
            b: Box::new(|t, x| -1.0 - 0.2 * x * t),
            b_x: Box::new(|t, _| -0.2 * t),
            b_xx: Box::new(|_, _| 0.0),
            b_t: Box::new(|_, x| -0.2 * x),
            b_xt: Box::new(|_, _| -0.2),
        };
        let (t, x) = (0.41, 0.33);
        let h = 1e-5;
        let f = coefficient_fields(&s, &diff, t, x).unwrap();
        let a = |t: f64, x: f64| coefficient_fields(&s, &diff, t, x).unwrap().cal_a;
        let psi = |t: f64, x: f64| coefficient_fields(&s, &diff, t, x).unwrap().cap_psi;
        assert_relative_eq!(f.cal_a_x, (a(t, x + h) - a(t, x - h)) / (2.0 * h), max_relative = 1e-6);
        assert_relative_eq!(f.cal_a_t, (a(t + h, x) - a(t - h, x)) / (2.0 * h), max_relative = 1e-6);
        assert_relative_eq!(
            f.cap_psi_x,
            (psi(t, x + h) - psi(t, x - h)) / (2.0 * h),
            max_relative = 1e-6
        );
        assert_relative_eq!(
            f.cap_psi_xx,
            (psi(t, x + h) - 2.0 * psi(t, x) + psi(t, x - h)) / (h * h),
            max_relative = 1e-4
        );
    }

    #[test]
    fn zero_test_function_gives_zero_residual() {
        let s = spec(2.0, 2.0);
        let d = Diffusion::constant(-1.0);
        let r = verify_pointwise_identity(&s, &d, &|_, _| 0.0, 8, 16, IdentityForm::Expanded).unwrap();
        assert_eq!(r.max_abs, 0.0);
    }

    #[test]
    fn polynomial_test_function_is_stencil_exact() {
        // Degree <= 4 in x and <= 2 in t: every stencil is exact, so the
        // residual is pure rounding noise relative to the term scale.
        let s = spec(2.0, 2.0);
        let d = Diffusion::constant(-1.0);
        let w = |t: f64, x: f64| (1.0 + x + x * x - 0.5 * x.powi(3) + 0.25 * x.powi(4)) * (1.0 + t * t);
        let r = verify_pointwise_identity(&s, &d, &w, 8, 16, IdentityForm::Expanded).unwrap();
        assert!(
            r.max_abs <= 1e-10 * r.scale,
            "max residual {} vs scale {}",
            r.max_abs,
            r.scale
        );
    }

    #[test]
    fn expanded_form_is_exact_for_arbitrary_smooth_data() {
        // The expanded identity cancels algebraically in the jet values,
        // whatever the grid, so any smooth w leaves only rounding noise.
        let s = spec(2.0, 2.0);
        let d = Diffusion::constant(-1.0);
        let w = |t: f64, x: f64| (3.0 * x).exp() * (2.0 * t).sin();
        let r = verify_pointwise_identity(&s, &d, &w, 16, 32, IdentityForm::Expanded).unwrap();
        assert!(r.max_abs <= 1e-12 * r.scale, "{} vs {}", r.max_abs, r.scale);
    }

    #[test]
    fn residual_converges_at_second_order_for_weighted_smooth_data() {
        // w = theta h with h = sin(pi x) e^{-t}, the standard smooth probe.
        let s = spec(2.0, 2.0);
        let d = Diffusion::constant(-1.0);
        let h = |t: f64, x: f64| (std::f64::consts::PI * x).sin() * (-t).exp();
        let w = weighted_test_function(&s, &h);
        let study = identity_convergence(&s, &d, &w, 16, 16, 4).unwrap();
        assert!(
            study.order >= 1.8,
            "order {}: rms per level {:?}",
            study.order,
            study.levels.iter().map(|l| l.rms).collect::<Vec<_>>()
        );
    }

    #[test]
    fn variable_coefficient_residual_converges_too() {
        let s = spec(2.5, 2.0);
        let diff = Diffusion {
            b: Box::new(|t, x| -1.0 - 0.3 * (x * (1.0 - x)) * (1.0 + 0.5 * t)),
            b_x: Box::new(|t, x| -0.3 * (1.0 - 2.0 * x) * (1.0 + 0.5 * t)),
            b_xx: Box::new(|t, _| 0.6 * (1.0 + 0.5 * t)),
            b_t: Box::new(|_, x| -0.15 * x * (1.0 - x)),
            b_xt: Box::new(|_, x| -0.15 * (1.0 - 2.0 * x)),
        };
        let w = |t: f64, x: f64| (2.0 * std::f64::consts::PI * x).cos() * (1.0 + t).recip();
        let study = identity_convergence(&s, &diff, &w, 16, 16, 3).unwrap();
        assert!(study.order >= 1.8, "order {}", study.order);
    }

    #[test]
    fn cal_a_leading_term_is_plus_one() {
        let rows = asymptotic_checks(2.0, 1.0, &[1e4], &[8.0], &[0.05, 0.1, 0.25, 0.4]).unwrap();
        for r in &rows {
            assert!(
                (r.ratio_a - 1.0).abs() <= 0.2,
                "A ratio {} at x = {}",
                r.ratio_a,
                r.x
            );
        }
    }

    #[test]
    fn cal_b_and_cal_c_reach_leading_constants_at_strong_gradient() {
        // mu psi_x^2 must dominate |psi_xx| = 2, so the constants 2 and 3
        // emerge only at strong-gradient points and mu >= 12.
        let rows = asymptotic_checks(2.0, 1.0, &[1e4], &[12.0], &[0.02]).unwrap();
        assert_eq!(rows.len(), 1);
        assert!(rows[0].ratio_b >= 1.6, "B ratio {}", rows[0].ratio_b);
        assert!(rows[0].ratio_c >= 0.8, "C ratio {}", rows[0].ratio_c);
    }

    #[test]
    fn ratios_are_monotone_in_lambda() {
        // Lower-order terms are O(1/lambda) relatively, so each ratio
        // approaches its limit monotonically across the lambda sweep.
        let rows = asymptotic_checks(2.0, 1.0, &[1e2, 1e3, 1e4], &[8.0], &[0.05]).unwrap();
        assert_eq!(rows.len(), 3);
        for pair in rows.windows(2) {
            assert!(
                (pair[1].ratio_a - 1.0).abs() <= (pair[0].ratio_a - 1.0).abs() + 1e-12,
                "A not converging: {} then {}",
                pair[0].ratio_a,
                pair[1].ratio_a
            );
            assert!(
                pair[1].ratio_b >= pair[0].ratio_b - 1e-9,
                "B not monotone: {} then {}",
                pair[0].ratio_b,
                pair[1].ratio_b
            );
        }
    }

    #[test]
    fn weight_spec_validates_parameters() {
        assert!(WeightSpec::new(1.0, 0.5, 2.0, SpatialWeight::parabola(), 0.1).is_err());
        assert!(WeightSpec::new(1.0, 2.0, 0.5, SpatialWeight::parabola(), 0.1).is_err());
        assert!(WeightSpec::new(1.0, 2.0, 2.0, SpatialWeight::parabola(), 0.6).is_err());
    }
}

//! Instrument propensity score `P(Z = 1 | X)` with a logistic link.
//!
//! Two estimators of the coefficients are provided:
//!
//! * [`fit_ml`]: maximum likelihood, solving `N^-1 sum x_i (z_i - p_i) = 0`;
//! * [`fit_cb`]: just-identified covariate balancing, solving
//!   `N^-1 sum x_i (z_i - p_i) / (p_i (1 - p_i)) = 0`, which reweights both
//!   instrument arms to the full-sample covariate means.
//!
//! Both are solved by Newton's method with step halving on a scalar
//! objective whose gradient is the estimating equation: the log-likelihood
//! for ML and the concave balancing loss
//! `z (eta - e^-eta) - (1 - z)(eta + e^eta)` for CB.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::data::Dataset;
use crate::error::{LateError, Result};

/// Sup-norm tolerance on the estimating equations.
pub const TOL: f64 = 1e-10;
pub const MAX_ITER: usize = 100;
pub const MAX_HALVINGS: usize = 30;
/// A linear index beyond this magnitude means the instrument is perfectly
/// predicted by the covariates.
pub const SEPARATION_ETA: f64 = 30.0;
/// Floor on probabilities inside the solver's linear algebra only.
pub const P_FLOOR: f64 = 1e-12;
/// Relative Newton-step size below which the iterate is considered settled.
const STEP_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum IpsMethod {
    #[serde(rename = "ml")]
    Ml,
    #[serde(rename = "cb")]
    Cb,
}

impl std::fmt::Display for IpsMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            IpsMethod::Ml => "ml",
            IpsMethod::Cb => "cb",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IpsFit {
    pub alpha: DVector<f64>,
    pub p: DVector<f64>,
    pub method: IpsMethod,
    pub iterations: usize,
    pub converged: bool,
    /// Sup-norm of the sample estimating equations at `alpha`.
    pub max_moment_norm: f64,
}

impl IpsFit {
    pub fn min_p(&self) -> f64 {
        self.p.min()
    }

    pub fn max_p(&self) -> f64 {
        self.p.max()
    }
}

/// `1 / (1 + exp(-eta))`, evaluated without overflow and kept strictly
/// inside `(0, 1)`.
pub fn logistic(eta: f64) -> f64 {
    let raw = if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    };
    raw.clamp(f64::from_bits(1), 1.0 - f64::EPSILON / 2.0)
}

/// Fitted probabilities `logistic(x alpha)`.
pub fn probabilities(x: &DMatrix<f64>, alpha: &DVector<f64>) -> DVector<f64> {
    (x * alpha).map(logistic)
}

/// `x' diag(w) x` accumulated row by row.
pub(crate) fn weighted_gram(x: &DMatrix<f64>, w: &[f64]) -> DMatrix<f64> {
    let k = x.ncols();
    let mut g = DMatrix::zeros(k, k);
    for (i, &wi) in w.iter().enumerate() {
        for a in 0..k {
            let xa = x[(i, a)] * wi;
            for b in a..k {
                g[(a, b)] += xa * x[(i, b)];
            }
        }
    }
    for a in 0..k {
        for b in 0..a {
            g[(a, b)] = g[(b, a)];
        }
    }
    g
}

/// Mean of `x_i r_i`.
fn mean_xr(x: &DMatrix<f64>, r: &[f64]) -> DVector<f64> {
    let n = x.nrows() as f64;
    let mut g = DVector::zeros(x.ncols());
    for (i, &ri) in r.iter().enumerate() {
        for j in 0..x.ncols() {
            g[j] += x[(i, j)] * ri;
        }
    }
    g / n
}

fn sup_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0_f64, |m, a| m.max(a.abs()))
}

fn check_rank(x: &DMatrix<f64>) -> bool {
    let gram = x.transpose() * x;
    let eig = gram.symmetric_eigenvalues();
    let max = eig.iter().cloned().fold(0.0_f64, f64::max);
    let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    max > 0.0 && min > 1e-12 * max
}

/// Per-method pieces of the Newton iteration.
trait Criterion {
    const METHOD: IpsMethod;
    /// Scalar objective to maximize.
    fn objective(z: f64, eta: f64) -> f64;
    /// Residual `r_i` with estimating equation `mean(x_i r_i)`.
    fn residual(z: f64, p: f64) -> f64;
    /// Positive Newton weight: `-d r_i / d eta_i`.
    fn weight(z: f64, p: f64) -> f64;
    fn singular() -> LateError;
}

struct Likelihood;

impl Criterion for Likelihood {
    const METHOD: IpsMethod = IpsMethod::Ml;

    fn objective(z: f64, eta: f64) -> f64 {
        // log p = -softplus(-eta), log(1 - p) = -softplus(eta)
        z * eta - softplus(eta)
    }

    fn residual(z: f64, p: f64) -> f64 {
        z - p
    }

    fn weight(_z: f64, p: f64) -> f64 {
        let p = p.clamp(P_FLOOR, 1.0 - P_FLOOR);
        p * (1.0 - p)
    }

    fn singular() -> LateError {
        LateError::SingularHessian
    }
}

struct Balancing;

impl Criterion for Balancing {
    const METHOD: IpsMethod = IpsMethod::Cb;

    fn objective(z: f64, eta: f64) -> f64 {
        if z == 1.0 {
            eta - (-eta).exp()
        } else {
            -(eta + eta.exp())
        }
    }

    fn residual(z: f64, p: f64) -> f64 {
        z / p - (1.0 - z) / (1.0 - p)
    }

    // d/deta [z/p - (1-z)/(1-p)] = -z (1-p)/p - (1-z) p/(1-p)
    fn weight(z: f64, p: f64) -> f64 {
        let p = p.clamp(P_FLOOR, 1.0 - P_FLOOR);
        z * (1.0 - p) / p + (1.0 - z) * p / (1.0 - p)
    }

    fn singular() -> LateError {
        LateError::SingularJacobian
    }
}

fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

struct State {
    alpha: DVector<f64>,
    eta: DVector<f64>,
    p: DVector<f64>,
    objective: f64,
}

impl State {
    fn at<C: Criterion>(ds: &Dataset, alpha: DVector<f64>) -> Self {
        let eta = ds.x() * &alpha;
        let p = eta.map(logistic);
        let objective = ds
            .z()
            .iter()
            .zip(eta.iter())
            .map(|(&z, &e)| C::objective(z, e))
            .sum::<f64>()
            / ds.n() as f64;
        Self {
            alpha,
            eta,
            p,
            objective,
        }
    }

    fn moments<C: Criterion>(&self, ds: &Dataset) -> DVector<f64> {
        let r: Vec<f64> = ds
            .z()
            .iter()
            .zip(self.p.iter())
            .map(|(&z, &p)| C::residual(z, p))
            .collect();
        mean_xr(ds.x(), &r)
    }

    fn max_abs_eta(&self) -> f64 {
        self.eta.iter().fold(0.0_f64, |m, e| m.max(e.abs()))
    }
}

fn newton<C: Criterion>(ds: &Dataset, init: DVector<f64>) -> Result<IpsFit> {
    if !check_rank(ds.x()) {
        return Err(C::singular());
    }
    let n = ds.n() as f64;
    let mut state = State::at::<C>(ds, init);
    let mut last_norm = f64::INFINITY;
    for iter in 0..MAX_ITER {
        let g = state.moments::<C>(ds);
        let norm = sup_norm(&g);
        last_norm = norm;
        if !norm.is_finite() {
            return Err(LateError::NoConvergence {
                iterations: iter,
                last_norm: norm,
            });
        }

        let w: Vec<f64> = ds
            .z()
            .iter()
            .zip(state.p.iter())
            .map(|(&z, &p)| C::weight(z, p))
            .collect();
        let info = weighted_gram(ds.x(), &w) / n;
        let step = match info.clone().cholesky() {
            Some(ch) => ch.solve(&g),
            None => info.lu().solve(&g).ok_or_else(C::singular)?,
        };
        let settled = step
            .iter()
            .zip(state.alpha.iter())
            .all(|(s, a)| s.abs() <= STEP_TOL * (1.0 + a.abs()));

        if norm <= TOL && settled {
            if state.max_abs_eta() > SEPARATION_ETA {
                return Err(LateError::SeparationDetected {
                    max_abs_eta: state.max_abs_eta(),
                });
            }
            return Ok(finish::<C>(ds, state, iter, true, norm));
        }

        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let trial = State::at::<C>(ds, &state.alpha + &step * scale);
            let slack = 1e-14 * (1.0 + state.objective.abs());
            if trial.objective.is_finite() && trial.objective >= state.objective - slack {
                accepted = Some(trial);
                break;
            }
            scale *= 0.5;
        }
        let Some(next) = accepted else {
            if norm <= TOL {
                return Ok(finish::<C>(ds, state, iter, true, norm));
            }
            return Err(LateError::NoConvergence {
                iterations: iter,
                last_norm: norm,
            });
        };
        state = next;

        if state.max_abs_eta() > SEPARATION_ETA {
            return Err(LateError::SeparationDetected {
                max_abs_eta: state.max_abs_eta(),
            });
        }
        if C::METHOD == IpsMethod::Cb {
            let (min_p, max_p) = (state.p.min(), state.p.max());
            if min_p <= P_FLOOR || max_p >= 1.0 - P_FLOOR {
                return Err(LateError::DivergedProbabilities { min_p, max_p });
            }
        }
    }
    let g = state.moments::<C>(ds);
    last_norm = last_norm.min(sup_norm(&g));
    Err(LateError::NoConvergence {
        iterations: MAX_ITER,
        last_norm,
    })
}

fn finish<C: Criterion>(ds: &Dataset, state: State, iterations: usize, converged: bool, _norm: f64) -> IpsFit {
    let norm = sup_norm(&state.moments::<C>(ds));
    IpsFit {
        p: state.p,
        alpha: state.alpha,
        method: C::METHOD,
        iterations,
        converged,
        max_moment_norm: norm,
    }
}

/// Logit maximum likelihood, started from zero.
pub fn fit_ml(ds: &Dataset) -> Result<IpsFit> {
    newton::<Likelihood>(ds, DVector::zeros(ds.k()))
}

/// Just-identified covariate balancing fit. Without `init` the ML solution
/// is used as the starting point, or zero if ML itself fails.
pub fn fit_cb(ds: &Dataset, init: Option<&DVector<f64>>) -> Result<IpsFit> {
    let start = match init {
        Some(a) => {
            if a.len() != ds.k() {
                return Err(LateError::LengthMismatch {
                    expected: ds.k(),
                    got: a.len(),
                });
            }
            a.clone()
        }
        None => fit_ml(ds)
            .map(|f| f.alpha)
            .unwrap_or_else(|_| DVector::zeros(ds.k())),
    };
    newton::<Balancing>(ds, start)
}

/// Sample balancing equations `N^-1 sum x_i (z_i - p_i) / (p_i (1 - p_i))`.
pub fn balance_moments(ds: &Dataset, p: &DVector<f64>) -> DVector<f64> {
    let r: Vec<f64> = ds
        .z()
        .iter()
        .zip(p.iter())
        .map(|(&z, &p)| Balancing::residual(z, p))
        .collect();
    mean_xr(ds.x(), &r)
}

/// Sample score `N^-1 sum x_i (z_i - p_i)`.
pub fn score_moments(ds: &Dataset, p: &DVector<f64>) -> DVector<f64> {
    let r: Vec<f64> = ds
        .z()
        .iter()
        .zip(p.iter())
        .map(|(&z, &p)| Likelihood::residual(z, p))
        .collect();
    mean_xr(ds.x(), &r)
}

/// Analytic Jacobian of [`balance_moments`] with respect to `alpha`.
pub fn balance_jacobian(ds: &Dataset, alpha: &DVector<f64>) -> DMatrix<f64> {
    let p = probabilities(ds.x(), alpha);
    let w: Vec<f64> = ds
        .z()
        .iter()
        .zip(p.iter())
        .map(|(&z, &p)| -(z * (1.0 - p) / p + (1.0 - z) * p / (1.0 - p)))
        .collect();
    weighted_gram(ds.x(), &w) / ds.n() as f64
}

/// Hessian of the mean log-likelihood, `-N^-1 x' diag(p (1 - p)) x`.
pub fn loglik_hessian(ds: &Dataset, alpha: &DVector<f64>) -> DMatrix<f64> {
    let p = probabilities(ds.x(), alpha);
    let w: Vec<f64> = p.iter().map(|&p| -p * (1.0 - p)).collect();
    weighted_gram(ds.x(), &w) / ds.n() as f64
}

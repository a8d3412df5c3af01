//! Stacked M-estimation standard errors for the weighting estimators.
//!
//! Each estimator is written as the solution of a stacked system of sample
//! moment conditions `N^-1 sum psi_i(theta) = 0`, where `theta` holds the
//! propensity coefficients (unless the scores are known), the estimator's
//! nuisance means and finally `tau`. The covariance is the sandwich
//! `A^-1 V A^-1' / N` with `A` the mean Jacobian of `psi` (central finite
//! differences) and `V` the mean outer product.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::data::{Dataset, EstimatorKind};
use crate::error::{LateError, Result};
use crate::estimators::{hajek_means, EstimateWarning, LateEstimate};
use crate::ips::{logistic, IpsFit, IpsMethod};
use crate::kappa;

/// Reciprocal condition number below which `A` is treated as singular.
pub const RCOND_MIN: f64 = 1e-12;

/// Propensity scores entering a moment system.
#[derive(Debug, Clone, Copy)]
pub enum Scores<'a> {
    /// Fitted scores; the coefficient block is stacked with the fit's own
    /// estimating equations.
    Fitted(&'a IpsFit),
    /// Scores treated as known, with no coefficient block.
    Known(&'a DVector<f64>),
}

impl Scores<'_> {
    fn p(&self) -> &DVector<f64> {
        match self {
            Scores::Fitted(f) => &f.p,
            Scores::Known(p) => p,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MomentSystem<'a> {
    ds: &'a Dataset,
    kind: EstimatorKind,
    /// `None` for known scores.
    alpha_method: Option<IpsMethod>,
    known_p: Option<&'a DVector<f64>>,
    pub theta: DVector<f64>,
    pub labels: Vec<String>,
}

fn nuisance_labels(kind: EstimatorKind) -> &'static [&'static str] {
    match kind {
        EstimatorKind::A => &["delta", "gamma"],
        EstimatorKind::A1 => &["delta", "gamma1"],
        EstimatorKind::A0 => &["delta", "gamma0"],
        EstimatorKind::A10 => &["delta1", "delta0", "gamma1", "gamma0"],
        EstimatorKind::TNorm | EstimatorKind::Cb => &["mu1", "mu0", "m1", "m0"],
        EstimatorKind::LinearIv => &[],
    }
}

/// Builds the moment system for `kind` at the estimates in `est`.
pub fn assemble<'a>(ds: &'a Dataset, scores: Scores<'a>, kind: EstimatorKind, est: &LateEstimate) -> Result<MomentSystem<'a>> {
    if kind == EstimatorKind::LinearIv {
        return Err(LateError::InvalidArgument(
            "linear IV carries its own robust standard error".into(),
        ));
    }
    if est.kind != kind {
        return Err(LateError::MethodMismatch(format!(
            "estimate is for `{}`, moment system requested for `{kind}`",
            est.kind
        )));
    }
    let p = scores.p();
    if p.len() != ds.n() {
        return Err(LateError::LengthMismatch {
            expected: ds.n(),
            got: p.len(),
        });
    }
    let (alpha_method, known_p, mut theta, mut labels) = match scores {
        Scores::Fitted(fit) => {
            if kind == EstimatorKind::Cb && fit.method != IpsMethod::Cb {
                return Err(LateError::MethodMismatch(
                    "the cb estimator needs covariate-balancing scores".into(),
                ));
            }
            let labels = ds.covariate_names().iter().map(|c| format!("alpha[{c}]")).collect();
            (Some(fit.method), None, fit.alpha.as_slice().to_vec(), labels)
        }
        Scores::Known(p) => (None, Some(p), Vec::new(), Vec::new()),
    };

    let (y, d, z) = (ds.y(), ds.d(), ds.z());
    let n = ds.n() as f64;
    let nuisance: Vec<f64> = match kind {
        EstimatorKind::A | EstimatorKind::A1 | EstimatorKind::A0 => {
            let w = kappa::compute(d, z, p)?;
            let delta = crate::estimators::delta_hat(ds, p)?;
            let g = match kind {
                EstimatorKind::A => w.kappa.sum(),
                EstimatorKind::A1 => w.kappa1.sum(),
                _ => w.kappa0.sum(),
            } / n;
            vec![delta, g]
        }
        EstimatorKind::A10 => {
            let w = kappa::compute(d, z, p)?;
            vec![
                w.kappa1.dot(y) / n,
                w.kappa0.dot(y) / n,
                w.kappa1.sum() / n,
                w.kappa0.sum() / n,
            ]
        }
        _ => {
            let (mu1, mu0) = hajek_means(y, z, p)?;
            let (m1, m0) = hajek_means(d, z, p)?;
            vec![mu1, mu0, m1, m0]
        }
    };
    theta.extend(nuisance);
    theta.push(est.tau);
    labels.extend(nuisance_labels(kind).iter().map(|s| s.to_string()));
    labels.push("tau".into());

    Ok(MomentSystem {
        ds,
        kind,
        alpha_method,
        known_p,
        theta: DVector::from_vec(theta),
        labels,
    })
}

impl MomentSystem<'_> {
    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    pub fn kind(&self) -> EstimatorKind {
        self.kind
    }

    /// Number of leading propensity coefficients in `theta`.
    pub fn alpha_len(&self) -> usize {
        if self.alpha_method.is_some() {
            self.ds.k()
        } else {
            0
        }
    }

    /// Moment vector of observation `i` at `theta`, written into `out`.
    pub fn psi_into(&self, i: usize, theta: &DVector<f64>, out: &mut [f64]) {
        let ds = self.ds;
        let (y, d, z) = (ds.y()[i], ds.d()[i], ds.z()[i]);
        let ka = self.alpha_len();
        let p = match self.known_p {
            Some(p) => p[i],
            None => {
                let eta: f64 = (0..ka).map(|j| ds.x()[(i, j)] * theta[j]).sum();
                logistic(eta)
            }
        };
        if let Some(method) = self.alpha_method {
            let r = match method {
                IpsMethod::Ml => z - p,
                IpsMethod::Cb => (z - p) / (p * (1.0 - p)),
            };
            for j in 0..ka {
                out[j] = r * ds.x()[(i, j)];
            }
        }
        let t = &theta.as_slice()[ka..];
        let o = &mut out[ka..];
        let a = z / p;
        let b = (1.0 - z) / (1.0 - p);
        match self.kind {
            EstimatorKind::A | EstimatorKind::A1 | EstimatorKind::A0 => {
                o[0] = a * y - b * y - t[0];
                o[1] = match self.kind {
                    EstimatorKind::A => 1.0 - b * d - a * (1.0 - d),
                    EstimatorKind::A1 => a * d - b * d,
                    _ => a * (d - 1.0) - b * (d - 1.0),
                } - t[1];
                o[2] = t[0] / t[1] - t[2];
            }
            EstimatorKind::A10 => {
                let k1 = d * (a - b);
                let k0 = (d - 1.0) * (a - b);
                o[0] = k1 * y - t[0];
                o[1] = k0 * y - t[1];
                o[2] = k1 - t[2];
                o[3] = k0 - t[3];
                o[4] = t[0] / t[2] - t[1] / t[3] - t[4];
            }
            EstimatorKind::TNorm | EstimatorKind::Cb => {
                o[0] = a * (y - t[0]);
                o[1] = b * (y - t[1]);
                o[2] = a * (d - t[2]);
                o[3] = b * (d - t[3]);
                o[4] = (t[0] - t[1]) / (t[2] - t[3]) - t[4];
            }
            EstimatorKind::LinearIv => unreachable!(),
        }
    }

    pub fn psi(&self, i: usize, theta: &DVector<f64>) -> DVector<f64> {
        let mut out = vec![0.0; self.dim()];
        self.psi_into(i, theta, &mut out);
        DVector::from_vec(out)
    }

    /// `N^-1 sum psi_i(theta)`.
    pub fn mean_psi(&self, theta: &DVector<f64>) -> DVector<f64> {
        let m = self.dim();
        let mut buf = vec![0.0; m];
        let mut acc = vec![0.0; m];
        for i in 0..self.ds.n() {
            self.psi_into(i, theta, &mut buf);
            for (a, b) in acc.iter_mut().zip(&buf) {
                *a += b;
            }
        }
        DVector::from_vec(acc) / self.ds.n() as f64
    }

    /// Mean Jacobian `N^-1 sum d psi_i / d theta'` by central differences with
    /// step `1e-6 max(1, |theta_j|)`.
    pub fn jacobian(&self) -> DMatrix<f64> {
        let m = self.dim();
        let mut a = DMatrix::zeros(m, m);
        for j in 0..m {
            let h = 1e-6 * self.theta[j].abs().max(1.0);
            let mut up = self.theta.clone();
            up[j] += h;
            let mut dn = self.theta.clone();
            dn[j] -= h;
            let col = (self.mean_psi(&up) - self.mean_psi(&dn)) / (2.0 * h);
            a.set_column(j, &col);
        }
        a
    }

    /// `N^-1 sum psi_i psi_i'` at `theta`.
    pub fn outer(&self) -> DMatrix<f64> {
        let m = self.dim();
        let mut v = DMatrix::zeros(m, m);
        let mut buf = vec![0.0; m];
        for i in 0..self.ds.n() {
            self.psi_into(i, &self.theta, &mut buf);
            for r in 0..m {
                for c in r..m {
                    v[(r, c)] += buf[r] * buf[c];
                }
            }
        }
        for r in 0..m {
            for c in 0..r {
                v[(r, c)] = v[(c, r)];
            }
        }
        v / self.ds.n() as f64
    }
}

#[derive(Debug, Clone)]
pub struct Sandwich {
    pub cov: DMatrix<f64>,
    pub se: f64,
    /// Reciprocal condition number of `A`.
    pub rcond: f64,
    /// Set when `A` was singular and a pseudo-inverse was used.
    pub pseudo_inverse: bool,
}

/// Sandwich covariance of `theta_hat` and the standard error of `tau`.
pub fn sandwich(ms: &MomentSystem<'_>) -> Result<Sandwich> {
    let a = ms.jacobian();
    let v = ms.outer();
    if a.iter().chain(v.iter()).any(|x| !x.is_finite()) {
        return Err(LateError::SingularA { rcond: 0.0 });
    }
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let rcond = if smax > 0.0 { smin / smax } else { 0.0 };
    let (a_inv, pseudo_inverse) = if rcond >= RCOND_MIN {
        match a.clone().lu().try_inverse() {
            Some(inv) => (inv, false),
            None => (pinv(&svd)?, true),
        }
    } else {
        (pinv(&svd)?, true)
    };
    let mut cov = &a_inv * v * a_inv.transpose() / ms.ds.n() as f64;
    cov = (&cov + cov.transpose()) * 0.5;
    let m = ms.dim();
    let se = cov[(m - 1, m - 1)].max(0.0).sqrt();
    Ok(Sandwich {
        cov,
        se,
        rcond,
        pseudo_inverse,
    })
}

fn pinv(svd: &nalgebra::SVD<f64, nalgebra::Dyn, nalgebra::Dyn>) -> Result<DMatrix<f64>> {
    let eps = svd.singular_values.max() * RCOND_MIN;
    svd.clone().pseudo_inverse(eps)
        .map_err(|_| LateError::SingularA { rcond: 0.0 })
}

/// Attaches a sandwich standard error to `est`. Linear IV estimates are
/// returned unchanged.
pub fn infer(ds: &Dataset, scores: Scores<'_>, est: &LateEstimate) -> Result<LateEstimate> {
    let mut out = est.clone();
    if est.kind == EstimatorKind::LinearIv {
        return Ok(out);
    }
    let ms = assemble(ds, scores, est.kind, est)?;
    let sw = sandwich(&ms)?;
    out.se = Some(sw.se);
    if sw.pseudo_inverse {
        out.warnings.push(EstimateWarning::PseudoInverse { rcond: sw.rcond });
    }
    Ok(out)
}

/// Sample analogues of the closed-form derivative blocks with respect to
/// the propensity coefficients, and the covariance blocks that enter the
/// covariate-balancing variance.
#[derive(Debug, Clone)]
pub struct AlphaBlocks {
    /// `E[d psi_name / d alpha']` keyed by nuisance label.
    pub e: BTreeMap<&'static str, DVector<f64>>,
    /// `E[d psi_alpha / d alpha']`.
    pub e_alpha: DMatrix<f64>,
    /// `E[psi_alpha psi_alpha']`.
    pub v_alpha: DMatrix<f64>,
    /// `E[psi_name psi_alpha']` for the Hajek nuisance rows.
    pub v_cross: BTreeMap<&'static str, DVector<f64>>,
}

/// Closed-form alpha blocks for `kind`, evaluated at the fitted scores and
/// the sample nuisance estimates.
pub fn analytic_alpha_blocks(ds: &Dataset, fit: &IpsFit, kind: EstimatorKind) -> Result<AlphaBlocks> {
    let n = ds.n();
    let k = ds.k();
    let (y, d, z, x, p) = (ds.y(), ds.d(), ds.z(), ds.x(), &fit.p);
    let (mu1, mu0) = hajek_means(y, z, p)?;
    let (m1, m0) = hajek_means(d, z, p)?;

    // per-observation scalar multiplying grad F = p (1 - p) x
    let scalars: Vec<(&'static str, Box<dyn Fn(usize) -> f64>)> = vec![
        ("delta", Box::new(|i| -(y[i] * z[i] / sq(p[i]) + y[i] * (1.0 - z[i]) / sq(1.0 - p[i])))),
        ("gamma", Box::new(|i| (1.0 - d[i]) * z[i] / sq(p[i]) - d[i] * (1.0 - z[i]) / sq(1.0 - p[i]))),
        ("gamma1", Box::new(|i| -(d[i] * z[i] / sq(p[i]) + d[i] * (1.0 - z[i]) / sq(1.0 - p[i])))),
        (
            "gamma0",
            Box::new(|i| -((d[i] - 1.0) * z[i] / sq(p[i]) + (d[i] - 1.0) * (1.0 - z[i]) / sq(1.0 - p[i]))),
        ),
        (
            "delta1",
            Box::new(|i| -(d[i] * y[i] * z[i] / sq(p[i]) + d[i] * y[i] * (1.0 - z[i]) / sq(1.0 - p[i]))),
        ),
        (
            "delta0",
            Box::new(|i| {
                -((d[i] - 1.0) * y[i] * z[i] / sq(p[i]) + (d[i] - 1.0) * y[i] * (1.0 - z[i]) / sq(1.0 - p[i]))
            }),
        ),
        ("mu1", Box::new(move |i| -z[i] * (y[i] - mu1) / sq(p[i]))),
        ("mu0", Box::new(move |i| (1.0 - z[i]) * (y[i] - mu0) / sq(1.0 - p[i]))),
        ("m1", Box::new(move |i| -z[i] * (d[i] - m1) / sq(p[i]))),
        ("m0", Box::new(move |i| (1.0 - z[i]) * (d[i] - m0) / sq(1.0 - p[i]))),
    ];
    let wanted = nuisance_labels(kind);
    let mut e = BTreeMap::new();
    for (name, f) in &scalars {
        if !wanted.contains(name) {
            continue;
        }
        let mut acc = DVector::zeros(k);
        for i in 0..n {
            let s = f(i) * p[i] * (1.0 - p[i]);
            for j in 0..k {
                acc[j] += s * x[(i, j)];
            }
        }
        e.insert(*name, acc / n as f64);
    }

    let psi_alpha = |i: usize| -> f64 {
        match fit.method {
            IpsMethod::Ml => z[i] - p[i],
            IpsMethod::Cb => (z[i] - p[i]) / (p[i] * (1.0 - p[i])),
        }
    };
    let e_alpha = match fit.method {
        IpsMethod::Ml => crate::ips::loglik_hessian(ds, &fit.alpha),
        IpsMethod::Cb => crate::ips::balance_jacobian(ds, &fit.alpha),
    };
    let r: Vec<f64> = (0..n).map(|i| psi_alpha(i) * psi_alpha(i)).collect();
    let v_alpha = crate::ips::weighted_gram(x, &r) / n as f64;

    let hajek_psi: [(&'static str, Box<dyn Fn(usize) -> f64>); 4] = [
        ("mu1", Box::new(move |i| z[i] * (y[i] - mu1) / p[i])),
        ("mu0", Box::new(move |i| (1.0 - z[i]) * (y[i] - mu0) / (1.0 - p[i]))),
        ("m1", Box::new(move |i| z[i] * (d[i] - m1) / p[i])),
        ("m0", Box::new(move |i| (1.0 - z[i]) * (d[i] - m0) / (1.0 - p[i]))),
    ];
    let mut v_cross = BTreeMap::new();
    for (name, f) in &hajek_psi {
        if !wanted.contains(name) {
            continue;
        }
        let mut acc = DVector::zeros(k);
        for i in 0..n {
            let s = f(i) * psi_alpha(i);
            for j in 0..k {
                acc[j] += s * x[(i, j)];
            }
        }
        v_cross.insert(*name, acc / n as f64);
    }

    Ok(AlphaBlocks {
        e,
        e_alpha,
        v_alpha,
        v_cross,
    })
}

fn sq(v: f64) -> f64 {
    v * v
}

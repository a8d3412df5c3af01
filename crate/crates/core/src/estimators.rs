//! Point estimators of the LATE.
//!
//! All weighting estimators share one entry point, [`estimate`], which
//! dispatches on [`EstimatorKind`]. The linear IV benchmark is [`linear_iv`].

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::data::{Dataset, EstimatorKind};
use crate::error::{LateError, Result};
use crate::ips::{weighted_gram, IpsFit, IpsMethod};
use crate::kappa::{self, check_probabilities, KappaWeights};

/// Complier shares below this magnitude raise a warning.
pub const NEAR_ZERO_SHARE: f64 = 0.01;
/// Complier shares below this magnitude are treated as exactly zero.
pub const ZERO_SHARE: f64 = 1e-12;

/// Where the instrument propensity scores came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreSource {
    Ml,
    Cb,
    Known,
}

impl From<IpsMethod> for ScoreSource {
    fn from(m: IpsMethod) -> Self {
        match m {
            IpsMethod::Ml => ScoreSource::Ml,
            IpsMethod::Cb => ScoreSource::Cb,
        }
    }
}

impl fmt::Display for ScoreSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoreSource::Ml => "ml",
            ScoreSource::Cb => "cb",
            ScoreSource::Known => "known",
        })
    }
}

/// Estimated complier shares that can appear in a denominator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Denominator {
    /// Mean of `kappa`.
    K,
    /// Mean of `kappa_1`.
    K1,
    /// Mean of `kappa_0`.
    K0,
    /// Difference of Hajek-normalized treatment rates `m1 - m0`.
    HajekD,
    /// First-stage coefficient on the instrument.
    FirstStage,
}

impl Denominator {
    pub fn name(self) -> &'static str {
        match self {
            Denominator::K => "kappa",
            Denominator::K1 => "kappa1",
            Denominator::K0 => "kappa0",
            Denominator::HajekD => "hajek_d",
            Denominator::FirstStage => "first_stage",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "warning", rename_all = "snake_case")]
pub enum EstimateWarning {
    NearZeroDenominator { which: Denominator, value: f64 },
    WeakFirstStage { t_stat: f64 },
    /// The moment Jacobian was singular and a pseudo-inverse was used.
    PseudoInverse { rcond: f64 },
}

impl fmt::Display for EstimateWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EstimateWarning::NearZeroDenominator { which, value } => {
                write!(f, "near-zero complier share `{}` = {value:.4}", which.name())
            }
            EstimateWarning::WeakFirstStage { t_stat } => {
                write!(f, "weak first stage (t = {t_stat:.3})")
            }
            EstimateWarning::PseudoInverse { rcond } => {
                write!(f, "singular moment Jacobian (rcond {rcond:.2e}); pseudo-inverse used")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LateEstimate {
    pub kind: EstimatorKind,
    pub tau: f64,
    pub se: Option<f64>,
    /// `delta_hat` for the kappa ratios, the difference of normalized outcome
    /// means for the normalized kinds, the reduced form for linear IV.
    pub numerator: f64,
    /// Complier shares used, as sample means.
    pub denominators: BTreeMap<Denominator, f64>,
    pub warnings: Vec<EstimateWarning>,
}

impl LateEstimate {
    fn new(kind: EstimatorKind, tau: f64, numerator: f64, denominators: BTreeMap<Denominator, f64>) -> Self {
        let warnings = denominators
            .iter()
            .filter(|(_, v)| v.abs() < NEAR_ZERO_SHARE)
            .map(|(&which, &value)| EstimateWarning::NearZeroDenominator { which, value })
            .collect();
        Self {
            kind,
            tau,
            se: None,
            numerator,
            denominators,
            warnings,
        }
    }
}

fn check_len(ds: &Dataset, p: &DVector<f64>) -> Result<()> {
    if p.len() != ds.n() {
        return Err(LateError::LengthMismatch {
            expected: ds.n(),
            got: p.len(),
        });
    }
    check_probabilities(p)
}

fn nonzero(which: Denominator, share: f64) -> Result<f64> {
    if share.abs() < ZERO_SHARE || !share.is_finite() {
        return Err(LateError::ZeroDenominator {
            which: which.name(),
            value: share,
        });
    }
    Ok(share)
}

/// `N^-1 sum y_i (z_i - p_i) / (p_i (1 - p_i))`.
pub fn delta_hat(ds: &Dataset, p: &DVector<f64>) -> Result<f64> {
    check_len(ds, p)?;
    Ok(delta_unchecked(ds.y(), ds.z(), p))
}

fn delta_unchecked(y: &DVector<f64>, z: &DVector<f64>, p: &DVector<f64>) -> f64 {
    let s: f64 = (0..y.len())
        .map(|i| y[i] * (z[i] - p[i]) / (p[i] * (1.0 - p[i])))
        .sum();
    s / y.len() as f64
}

/// Weighted mean `sum w v / total`, refined by a second pass over the
/// residuals `v - mean` so that large common offsets in `v` cancel.
fn refined_mean(w: impl Fn(usize) -> f64, v: &DVector<f64>, total: f64) -> f64 {
    let first = (0..v.len()).map(|i| w(i) * v[i]).sum::<f64>() / total;
    first + (0..v.len()).map(|i| w(i) * (v[i] - first)).sum::<f64>() / total
}

/// Hajek-normalized arm means of `v`: `(mean | z = 1, mean | z = 0)`.
pub(crate) fn hajek_means(v: &DVector<f64>, z: &DVector<f64>, p: &DVector<f64>) -> Result<(f64, f64)> {
    let n = v.len() as f64;
    let a = |i: usize| z[i] / p[i];
    let b = |i: usize| (1.0 - z[i]) / (1.0 - p[i]);
    let w1: f64 = (0..v.len()).map(a).sum();
    let w0: f64 = (0..v.len()).map(b).sum();
    if w1 / n < ZERO_SHARE {
        return Err(LateError::ZeroDenominator {
            which: "hajek_z1",
            value: w1 / n,
        });
    }
    if w0 / n < ZERO_SHARE {
        return Err(LateError::ZeroDenominator {
            which: "hajek_z0",
            value: w0 / n,
        });
    }
    Ok((refined_mean(a, v, w1), refined_mean(b, v, w0)))
}

/// Difference of the Hajek arm means of `v`, evaluated on `v - mean(v)` so
/// that a common offset never enters the arithmetic.
pub(crate) fn hajek_contrast(v: &DVector<f64>, z: &DVector<f64>, p: &DVector<f64>) -> Result<f64> {
    let centered = v.add_scalar(-v.mean());
    let (a, b) = hajek_means(&centered, z, p)?;
    Ok(a - b)
}

fn weighted_mean(w: &DVector<f64>, y: &DVector<f64>, which: Denominator) -> Result<f64> {
    let n = w.len() as f64;
    let total = nonzero(which, w.sum() / n)? * n;
    Ok(refined_mean(|i| w[i], y, total))
}

/// Computes estimator `kind` with instrument propensities `p`.
///
/// `source` records how `p` was obtained; the `Cb` kind only accepts
/// covariate-balancing scores. `LinearIv` ignores `p`.
pub fn estimate(ds: &Dataset, kind: EstimatorKind, p: &DVector<f64>, source: ScoreSource) -> Result<LateEstimate> {
    if kind == EstimatorKind::LinearIv {
        return linear_iv(ds);
    }
    check_len(ds, p)?;
    if kind == EstimatorKind::Cb && source != ScoreSource::Cb {
        return Err(LateError::MethodMismatch(format!(
            "the cb estimator needs covariate-balancing scores, got {source}"
        )));
    }
    let (y, d, z) = (ds.y(), ds.d(), ds.z());
    match kind {
        EstimatorKind::A | EstimatorKind::A1 | EstimatorKind::A0 => {
            let w = kappa::compute(d, z, p)?;
            let (which, weights) = match kind {
                EstimatorKind::A => (Denominator::K, &w.kappa),
                EstimatorKind::A1 => (Denominator::K1, &w.kappa1),
                _ => (Denominator::K0, &w.kappa0),
            };
            let share = nonzero(which, weights.mean())?;
            let delta = delta_unchecked(y, z, p);
            Ok(LateEstimate::new(kind, delta / share, delta, BTreeMap::from([(which, share)])))
        }
        EstimatorKind::A10 => {
            let w = kappa::compute(d, z, p)?;
            let t = a10_from_weights(&w, y)?;
            let shares = BTreeMap::from([(Denominator::K1, w.kappa1.mean()), (Denominator::K0, w.kappa0.mean())]);
            Ok(LateEstimate::new(kind, t, t, shares))
        }
        EstimatorKind::TNorm | EstimatorKind::Cb => {
            let num = hajek_contrast(y, z, p)?;
            let share = nonzero(Denominator::HajekD, hajek_contrast(d, z, p)?)?;
            Ok(LateEstimate::new(kind, num / share, num, BTreeMap::from([(Denominator::HajekD, share)])))
        }
        EstimatorKind::LinearIv => unreachable!(),
    }
}

fn a10_from_weights(w: &KappaWeights, y: &DVector<f64>) -> Result<f64> {
    let centered = y.add_scalar(-y.mean());
    Ok(weighted_mean(&w.kappa1, &centered, Denominator::K1)? - weighted_mean(&w.kappa0, &centered, Denominator::K0)?)
}

/// Convenience wrapper taking the scores from a fit.
pub fn estimate_with_fit(ds: &Dataset, kind: EstimatorKind, fit: &IpsFit) -> Result<LateEstimate> {
    estimate(ds, kind, &fit.p, fit.method.into())
}

/// Ratio of unnormalized inverse-probability-weighted differences in `y` and
/// in `d`. Algebraically identical to the `A1` estimator.
pub fn tau_t_ipw(ds: &Dataset, p: &DVector<f64>) -> Result<f64> {
    check_len(ds, p)?;
    let n = ds.n() as f64;
    let (y, d, z) = (ds.y(), ds.d(), ds.z());
    let (mut ny, mut nd) = (0.0, 0.0);
    for i in 0..ds.n() {
        let a = z[i] / p[i];
        let b = (1.0 - z[i]) / (1.0 - p[i]);
        ny += a * y[i] - b * y[i];
        nd += a * d[i] - b * d[i];
    }
    let share = nonzero(Denominator::K1, nd / n)?;
    Ok(ny / n / share)
}

/// Two-stage least squares coefficient on `d`, instrumenting with `z` and
/// controlling linearly for `x`, with HC0 robust standard error.
pub fn linear_iv(ds: &Dataset) -> Result<LateEstimate> {
    let n = ds.n();
    let k = ds.k();
    let x = ds.x();
    let q = DMatrix::from_fn(n, k + 1, |i, j| if j < k { x[(i, j)] } else { ds.z()[i] });

    let (pi, first_resid) = ols(&q, ds.d())?;
    let first_se = hc0(&q, &first_resid)?[(k, k)].sqrt();
    let t_stat = pi[k] / first_se;
    let (rf, _) = ols(&q, ds.y())?;

    let d_hat = &q * &pi;
    let w_hat = DMatrix::from_fn(n, k + 1, |i, j| if j < k { x[(i, j)] } else { d_hat[i] });
    let (beta, _) = ols(&w_hat, ds.y())?;
    // structural residuals use the observed treatment
    let resid = DVector::from_fn(n, |i, _| {
        let fitted: f64 = (0..k).map(|j| x[(i, j)] * beta[j]).sum::<f64>() + ds.d()[i] * beta[k];
        ds.y()[i] - fitted
    });
    let cov = hc0(&w_hat, &resid)?;

    let mut est = LateEstimate::new(
        EstimatorKind::LinearIv,
        beta[k],
        rf[k],
        BTreeMap::from([(Denominator::FirstStage, pi[k])]),
    );
    est.se = Some(cov[(k, k)].max(0.0).sqrt());
    if !(t_stat.abs() >= 1.0) {
        est.warnings.push(EstimateWarning::WeakFirstStage { t_stat });
    }
    Ok(est)
}

fn gram_inverse(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let g = a.transpose() * a;
    let eig = g.symmetric_eigenvalues();
    let max = eig.amax();
    let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(max > 0.0 && min > 1e-12 * max) {
        return Err(LateError::SingularDesign);
    }
    g.cholesky().map(|c| c.inverse()).ok_or(LateError::SingularDesign)
}

fn ols(a: &DMatrix<f64>, v: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
    let coef = gram_inverse(a)? * (a.transpose() * v);
    let resid = v - a * &coef;
    Ok((coef, resid))
}

fn hc0(a: &DMatrix<f64>, resid: &DVector<f64>) -> Result<DMatrix<f64>> {
    let bread = gram_inverse(a)?;
    let e2: Vec<f64> = resid.iter().map(|e| e * e).collect();
    let meat = weighted_gram(a, &e2);
    Ok(&bread * meat * &bread)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn tiny() -> Dataset {
        Dataset::new(
            vec![3.0, 1.0, 1.0, 1.0],
            vec![1.0, 0.0, 0.0, 0.0],
            vec![1.0, 1.0, 0.0, 0.0],
            DMatrix::zeros(4, 0),
            vec![],
        )
        .unwrap()
    }

    #[test]
    fn delta_hand_value() {
        let ds = tiny();
        let p = DVector::from_element(4, 0.5);
        assert_relative_eq!(delta_hat(&ds, &p).unwrap(), 1.0, max_relative = 1e-15);
        let zero = ds.with_outcome(vec![0.0; 4]).unwrap();
        assert_eq!(delta_hat(&zero, &p).unwrap(), 0.0);
        let order = [2, 0, 3, 1];
        assert_relative_eq!(delta_hat(&ds.permuted(&order), &p).unwrap(), 1.0, max_relative = 1e-15);
    }

    #[test]
    fn delta_equals_kappa_difference() {
        let ds = Dataset::new(
            vec![2.0, -1.0, 0.5, 4.0, 1.5],
            vec![1.0, 0.0, 1.0, 1.0, 0.0],
            vec![1.0, 1.0, 0.0, 1.0, 0.0],
            DMatrix::zeros(5, 0),
            vec![],
        )
        .unwrap();
        let p = DVector::from_vec(vec![0.3, 0.6, 0.45, 0.8, 0.2]);
        let w = kappa::compute(ds.d(), ds.z(), &p).unwrap();
        let via_kappa = (w.kappa1.dot(ds.y()) - w.kappa0.dot(ds.y())) / 5.0;
        assert_relative_eq!(delta_hat(&ds, &p).unwrap(), via_kappa, max_relative = 1e-12);
    }

    #[test]
    fn tnorm_and_t_hand_value() {
        let ds = tiny();
        let p = DVector::from_element(4, 0.5);
        let tn = estimate(&ds, EstimatorKind::TNorm, &p, ScoreSource::Known).unwrap();
        assert_relative_eq!(tn.tau, 2.0, max_relative = 1e-15);
        let t = estimate(&ds, EstimatorKind::A1, &p, ScoreSource::Known).unwrap();
        assert_relative_eq!(t.tau, 2.0, max_relative = 1e-15);
        assert_relative_eq!(tau_t_ipw(&ds, &p).unwrap(), 2.0, max_relative = 1e-15);
        assert_relative_eq!(t.tau * t.denominators[&Denominator::K1], t.numerator, max_relative = 1e-12);
    }

    #[test]
    fn full_compliance_makes_a_equal_delta() {
        let z = vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0];
        let x: Vec<f64> = (0..8).map(|i| (i as f64 * 0.37).sin()).collect();
        let ds = Dataset::new(
            (0..8).map(|i| i as f64 * 0.5 - 1.0).collect(),
            z.clone(),
            z,
            DMatrix::from_column_slice(8, 1, &x),
            vec!["x".into()],
        )
        .unwrap();
        let p = DVector::from_fn(8, |i, _| 0.3 + 0.05 * i as f64);
        let a = estimate(&ds, EstimatorKind::A, &p, ScoreSource::Known).unwrap();
        assert_relative_eq!(a.denominators[&Denominator::K], 1.0, max_relative = 1e-15);
        assert_relative_eq!(a.tau, delta_hat(&ds, &p).unwrap(), max_relative = 1e-14);
        for kind in EstimatorKind::ALL {
            let src = if kind == EstimatorKind::Cb { ScoreSource::Cb } else { ScoreSource::Known };
            assert!(estimate(&ds, kind, &p, src).unwrap().tau.is_finite());
        }
    }

    #[test]
    fn cb_kind_rejects_ml_scores() {
        let ds = tiny();
        let p = DVector::from_element(4, 0.5);
        assert!(matches!(
            estimate(&ds, EstimatorKind::Cb, &p, ScoreSource::Ml),
            Err(LateError::MethodMismatch(_))
        ));
    }

    #[test]
    fn empty_arm_is_zero_denominator() {
        let ds = Dataset::new(
            vec![1.0, 2.0, 3.0],
            vec![1.0, 0.0, 1.0],
            vec![1.0, 1.0, 1.0],
            DMatrix::zeros(3, 0),
            vec![],
        )
        .unwrap();
        let p = DVector::from_element(3, 0.5);
        assert!(matches!(
            estimate(&ds, EstimatorKind::TNorm, &p, ScoreSource::Known),
            Err(LateError::ZeroDenominator { which: "hajek_z0", .. })
        ));
    }

    #[test]
    fn near_zero_share_warns() {
        // kappa sums to zero exactly in the first pair; the rest nudges it
        let ds = Dataset::new(
            vec![1.0, 2.0, 0.5, 0.25],
            vec![1.0, 0.0, 1.0, 0.0],
            vec![1.0, 1.0, 0.0, 0.0],
            DMatrix::zeros(4, 0),
            vec![],
        )
        .unwrap();
        let p = DVector::from_vec(vec![0.5, 0.5, 0.5, 0.5]);
        let a = estimate(&ds, EstimatorKind::A, &p, ScoreSource::Known);
        assert!(matches!(a, Err(LateError::ZeroDenominator { which: "kappa", .. })));
        let p = DVector::from_vec(vec![0.5, 0.5, 0.499, 0.5]);
        let a = estimate(&ds, EstimatorKind::A, &p, ScoreSource::Known).unwrap();
        assert!(matches!(
            a.warnings.as_slice(),
            [EstimateWarning::NearZeroDenominator { which: Denominator::K, .. }]
        ));
    }

    fn wald(ds: &Dataset) -> f64 {
        let mean_where = |v: &DVector<f64>, zv: f64| {
            let (s, c) = (0..ds.n())
                .filter(|&i| ds.z()[i] == zv)
                .fold((0.0, 0.0), |(s, c), i| (s + v[i], c + 1.0));
            s / c
        };
        (mean_where(ds.y(), 1.0) - mean_where(ds.y(), 0.0)) / (mean_where(ds.d(), 1.0) - mean_where(ds.d(), 0.0))
    }

    #[test]
    fn linear_iv_without_covariates_is_wald() {
        let mut state = 777u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        let mut y = vec![];
        let mut d = vec![];
        let mut z = vec![];
        for i in 0..20 {
            let zi = (i % 2) as f64;
            let di = if next() < 0.2 + 0.5 * zi { 1.0 } else { 0.0 };
            z.push(zi);
            d.push(di);
            y.push(next() * 3.0 + 2.0 * di);
        }
        let ds = Dataset::new(y, d, z.clone(), DMatrix::zeros(20, 0), vec![]).unwrap();
        let iv = linear_iv(&ds).unwrap();
        assert_relative_eq!(iv.tau, wald(&ds), max_relative = 1e-10);

        let shifted = ds.with_outcome(ds.y().iter().map(|v| v + 17.0).collect()).unwrap();
        assert_relative_eq!(linear_iv(&shifted).unwrap().tau, iv.tau, max_relative = 1e-10);

        let full = Dataset::new(ds.y().as_slice().to_vec(), z.clone(), z, DMatrix::zeros(20, 0), vec![]).unwrap();
        let iv = linear_iv(&full).unwrap();
        assert_relative_eq!(iv.tau, wald(&full), max_relative = 1e-10);
        assert_relative_eq!(iv.denominators[&Denominator::FirstStage], 1.0, max_relative = 1e-12);
    }

    #[test]
    fn linear_iv_singular_without_instrument_variation() {
        let ds = Dataset::new(
            vec![1.0, 2.0, 3.0, 4.0],
            vec![1.0, 0.0, 1.0, 0.0],
            vec![1.0, 1.0, 1.0, 1.0],
            DMatrix::zeros(4, 0),
            vec![],
        )
        .unwrap();
        assert!(matches!(linear_iv(&ds), Err(LateError::SingularDesign)));
    }
}

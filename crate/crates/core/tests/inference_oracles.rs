mod common;

use common::{cb_sample, random_dataset, rel, rng};
use late_core::data::EstimatorKind;
use late_core::estimators::{estimate, ScoreSource};
use late_core::inference::analytic_alpha_blocks;
use late_core::simulation::{generate, Design, DesignName};
use late_core::{assemble, fit_ml, infer, sandwich, Dataset, IpsFit, Scores};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

fn normwise(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / a.norm().max(b.norm()).max(1e-300)
}

/// Numeric alpha-columns of the stacked Jacobian against the closed forms,
/// for every nuisance row and the coefficient block itself.
fn check_alpha_blocks(ds: &Dataset, fit: &IpsFit, kind: EstimatorKind) {
    let est = estimate(ds, kind, &fit.p, ScoreSource::from(fit.method)).unwrap();
    let ms = assemble(ds, Scores::Fitted(fit), kind, &est).unwrap();
    let a = ms.jacobian();
    let blocks = analytic_alpha_blocks(ds, fit, kind).unwrap();
    let k = ms.alpha_len();
    let numeric_alpha = a.view((0, 0), (k, k)).into_owned();
    let e = normwise(&numeric_alpha, &blocks.e_alpha);
    assert!(e <= 1e-4, "{kind} alpha block: {e}");
    for (row, label) in ms.labels.iter().enumerate().skip(k) {
        let Some(analytic) = blocks.e.get(label.as_str()) else {
            assert_eq!(label, "tau");
            continue;
        };
        let numeric = a.view((row, 0), (1, k)).transpose();
        let e = normwise(&numeric, &DMatrix::from_column_slice(k, 1, analytic.as_slice()));
        assert!(e <= 1e-4, "{kind} {label}: {e}");
    }
}

#[test]
fn analytic_alpha_blocks_match_finite_differences() {
    let mut r = rng(11);
    for _ in 0..20 {
        let (ds, cb) = cb_sample(&mut r, 400);
        let ml = fit_ml(&ds).unwrap();
        for kind in [EstimatorKind::A, EstimatorKind::A1, EstimatorKind::A0, EstimatorKind::A10, EstimatorKind::TNorm] {
            check_alpha_blocks(&ds, &ml, kind);
            check_alpha_blocks(&ds, &cb, kind);
        }
        check_alpha_blocks(&ds, &cb, EstimatorKind::Cb);
    }
}

#[test]
fn ml_block_is_the_log_likelihood_hessian() {
    let mut r = rng(5);
    let ds = random_dataset(&mut r, 500);
    let fit = fit_ml(&ds).unwrap();
    let est = estimate(&ds, EstimatorKind::TNorm, &fit.p, ScoreSource::Ml).unwrap();
    let ms = assemble(&ds, Scores::Fitted(&fit), EstimatorKind::TNorm, &est).unwrap();
    let k = ms.alpha_len();
    let numeric = ms.jacobian().view((0, 0), (k, k)).into_owned();
    let x = ds.x();
    let mut hess = DMatrix::zeros(k, k);
    for i in 0..ds.n() {
        let w = fit.p[i] * (1.0 - fit.p[i]);
        let xi = x.row(i).transpose();
        hess -= &xi * xi.transpose() * w;
    }
    hess /= ds.n() as f64;
    assert!(normwise(&numeric, &hess) <= 1e-6);
}

#[test]
fn information_equality_holds_in_large_samples() {
    // The Hessian and the outer product of scores agree only in expectation.
    let (ds, _) = generate(&Design::new(DesignName::B, 0.05), 200_000, 8);
    let fit = fit_ml(&ds).unwrap();
    let blocks = analytic_alpha_blocks(&ds, &fit, EstimatorKind::TNorm).unwrap();
    assert!(normwise(&blocks.e_alpha, &(-&blocks.v_alpha)) <= 0.02);
}

fn wald_se(ds: &Dataset) -> (f64, f64) {
    let (y, d, z) = (ds.y(), ds.d(), ds.z());
    let arm = |side: f64| {
        let idx: Vec<usize> = (0..ds.n()).filter(|&i| z[i] == side).collect();
        let n = idx.len() as f64;
        let my = idx.iter().map(|&i| y[i]).sum::<f64>() / n;
        let md = idx.iter().map(|&i| d[i]).sum::<f64>() / n;
        (idx, n, my, md)
    };
    let (i1, n1, y1, d1) = arm(1.0);
    let (i0, n0, y0, d0) = arm(0.0);
    let den = d1 - d0;
    let tau = (y1 - y0) / den;
    let var = |idx: &[usize], n: f64| {
        let e: Vec<f64> = idx.iter().map(|&i| y[i] - tau * d[i]).collect();
        let m = e.iter().sum::<f64>() / n;
        e.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n
    };
    let se = ((var(&i1, n1) / n1 + var(&i0, n0) / n0) / (den * den)).sqrt();
    (tau, se)
}

fn intercept_only(r: &mut impl Rng, n: usize, full: bool) -> Dataset {
    let z: Vec<f64> = (0..n).map(|i| if i % 3 == 0 || r.gen::<f64>() < 0.3 { 1.0 } else { 0.0 }).collect();
    let d: Vec<f64> = z
        .iter()
        .enumerate()
        .map(|(i, &zi)| if full { zi } else if i % 7 == 1 { 1.0 } else if i % 11 == 2 { 0.0 } else { zi })
        .collect();
    let y: Vec<f64> = d.iter().map(|&di| 2.0 + 1.7 * di + r.gen::<f64>() * 3.0 - 1.5 * di * r.gen::<f64>()).collect();
    Dataset::new(y, d, z, DMatrix::zeros(n, 0), vec![]).unwrap()
}

#[test]
fn intercept_only_tnorm_se_is_the_wald_delta_method() {
    let mut r = rng(99);
    for full in [true, false] {
        let ds = intercept_only(&mut r, 600, full);
        let fit = fit_ml(&ds).unwrap();
        let (tau, se) = wald_se(&ds);
        let est = infer(&ds, Scores::Fitted(&fit), &estimate(&ds, EstimatorKind::TNorm, &fit.p, ScoreSource::Ml).unwrap()).unwrap();
        assert!(rel(est.tau, tau) <= 1e-12);
        assert!(rel(est.se.unwrap(), se) <= 1e-6, "{} vs {se}", est.se.unwrap());
        let known = infer(&ds, Scores::Known(&fit.p), &est).unwrap();
        assert!(rel(known.se.unwrap(), se) <= 1e-6);
    }
}

#[test]
fn a10_ratio_blocks_are_uncorrelated_with_known_scores() {
    let design = Design::new(DesignName::B, 0.05);
    for seed in [1, 2] {
        let (ds, latent) = generate(&design, 50_000, seed);
        let est = estimate(&ds, EstimatorKind::A10, &latent.p, ScoreSource::Known).unwrap();
        let ms = assemble(&ds, Scores::Known(&latent.p), EstimatorKind::A10, &est).unwrap();
        let cov = sandwich(&ms).unwrap().cov;
        let t = &ms.theta;
        let (r1, r0) = (t[0] / t[2], t[1] / t[3]);
        let g1 = DVector::from_vec(vec![1.0 / t[2], 0.0, -r1 / t[2], 0.0, 0.0]);
        let g0 = DVector::from_vec(vec![0.0, 1.0 / t[3], 0.0, -r0 / t[3], 0.0]);
        let c = (g1.transpose() * &cov * &g0)[0];
        let v1 = (g1.transpose() * &cov * &g1)[0];
        let v0 = (g0.transpose() * &cov * &g0)[0];
        let corr = c / (v1 * v0).sqrt();
        assert!(corr.abs() <= 0.05, "{corr}");
        // kappa1 * kappa0 vanishes row by row, so the cross term is exactly zero
        assert!(corr.abs() <= 1e-6, "{corr}");
    }
}

#[test]
fn se_invariant_to_row_order_and_outcome_shift() {
    let mut r = rng(21);
    for _ in 0..5 {
        let (ds, cb) = cb_sample(&mut r, 300);
        let ml = fit_ml(&ds).unwrap();
        let n = ds.n();
        let order: Vec<usize> = (0..n).map(|i| (i * 113 + 7) % n).collect();
        let permuted = ds.permuted(&order);
        let moved = ds.with_outcome(ds.y().iter().map(|v| v + 250.0).collect()).unwrap();
        for (kind, base_fit) in [(EstimatorKind::TNorm, &ml), (EstimatorKind::A10, &ml), (EstimatorKind::Cb, &cb)] {
            let se = |d: &Dataset, fit: &IpsFit| {
                let est = estimate(d, kind, &fit.p, ScoreSource::from(fit.method)).unwrap();
                infer(d, Scores::Fitted(fit), &est).unwrap().se.unwrap()
            };
            let refit = |d: &Dataset| match base_fit.method {
                late_core::IpsMethod::Ml => fit_ml(d).unwrap(),
                late_core::IpsMethod::Cb => late_core::fit_cb(d, None).unwrap(),
            };
            let base = se(&ds, base_fit);
            let p = se(&permuted, &refit(&permuted));
            let m = se(&moved, &refit(&moved));
            assert!(rel(base, p) <= 1e-8, "{kind} permuted: {base} vs {p}");
            assert!(rel(base, m) <= 1e-8, "{kind} shifted: {base} vs {m}");
        }
    }
}

#[test]
fn covariance_is_symmetric_and_psd() {
    let mut r = rng(3);
    let (ds, cb) = cb_sample(&mut r, 300);
    for kind in [EstimatorKind::A, EstimatorKind::A10, EstimatorKind::Cb] {
        let est = estimate(&ds, kind, &cb.p, ScoreSource::Cb).unwrap();
        let cov = sandwich(&assemble(&ds, Scores::Fitted(&cb), kind, &est).unwrap()).unwrap().cov;
        assert!(normwise(&cov, &cov.transpose()) <= 1e-12);
        let min = cov.clone().symmetric_eigen().eigenvalues.min();
        assert!(min >= -1e-8 * cov.trace());
    }
}

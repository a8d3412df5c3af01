#![allow(dead_code)]

use late_core::{fit_cb, logistic, Dataset};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random sample with two covariates, a binary instrument that depends on
/// them and a treatment that responds to the instrument. Every (z, d) cell
/// is populated for moderate `n`.
pub fn random_dataset(r: &mut ChaCha8Rng, n: usize) -> Dataset {
    loop {
        let mut cov = Vec::with_capacity(2 * n);
        let (mut y, mut d, mut z) = (vec![], vec![], vec![]);
        let x1: Vec<f64> = (0..n).map(|_| r.sample(StandardNormal)).collect();
        let x2: Vec<f64> = (0..n).map(|_| r.gen::<f64>() * 2.0 - 1.0).collect();
        for i in 0..n {
            let zi = if r.gen::<f64>() < logistic(0.2 + 0.7 * x1[i] - 0.5 * x2[i]) { 1.0 } else { 0.0 };
            let v: f64 = r.sample(StandardNormal);
            let di = if -0.4 + 1.3 * zi + 0.3 * x2[i] > v { 1.0 } else { 0.0 };
            let e: f64 = r.sample(StandardNormal);
            y.push(1.0 + 0.5 * x1[i] + di * (1.5 + 0.4 * v) + e);
            d.push(di);
            z.push(zi);
        }
        cov.extend(&x1);
        cov.extend(&x2);
        let ds = Dataset::new(y, d, z, DMatrix::from_vec(n, 2, cov), vec!["x1".into(), "x2".into()]).unwrap();
        let c = late_core::data::CellCounts::of(&ds);
        if c.z1_d1 > 0 && c.z1_d0 > 0 && c.z0_d1 > 0 && c.z0_d0 > 0 {
            return ds;
        }
    }
}

pub fn random_p(r: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| 0.05 + 0.9 * r.gen::<f64>())
}

/// A random sample together with converged covariate-balancing scores.
pub fn cb_sample(r: &mut ChaCha8Rng, n: usize) -> (Dataset, late_core::IpsFit) {
    loop {
        let ds = random_dataset(r, n);
        if let Ok(fit) = fit_cb(&ds, None) {
            return (ds, fit);
        }
    }
}

pub fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

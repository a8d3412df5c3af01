//! Abadie kappa weights and the complier quantities built from them.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{LateError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct KappaWeights {
    pub kappa: DVector<f64>,
    pub kappa1: DVector<f64>,
    pub kappa0: DVector<f64>,
    pub p: DVector<f64>,
}

/// Which weight vector to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Variant {
    K,
    K1,
    K0,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::K => "kappa",
            Variant::K1 => "kappa1",
            Variant::K0 => "kappa0",
        }
    }
}

/// Checks that every probability lies strictly inside `(0, 1)`.
pub fn check_probabilities(p: &DVector<f64>) -> Result<()> {
    for (index, &value) in p.iter().enumerate() {
        if !(value > 0.0 && value < 1.0) {
            return Err(LateError::ProbabilityOutOfRange { index, value });
        }
    }
    Ok(())
}

/// Kappa weights for treatment `d`, instrument `z` and instrument
/// propensity `p`:
///
/// ```text
/// kappa1 = d (z - p) / (p (1 - p))
/// kappa0 = (1 - d) (p - z) / (p (1 - p))
/// kappa  = (1 - p) kappa0 + p kappa1
/// ```
pub fn compute(d: &DVector<f64>, z: &DVector<f64>, p: &DVector<f64>) -> Result<KappaWeights> {
    let n = d.len();
    for len in [z.len(), p.len()] {
        if len != n {
            return Err(LateError::LengthMismatch { expected: n, got: len });
        }
    }
    check_probabilities(p)?;
    let mut kappa = DVector::zeros(n);
    let mut kappa1 = DVector::zeros(n);
    let mut kappa0 = DVector::zeros(n);
    for i in 0..n {
        let (di, zi, pi) = (d[i], z[i], p[i]);
        let k1 = di * (zi - pi) / (pi * (1.0 - pi));
        let k0 = (1.0 - di) * (pi - zi) / (pi * (1.0 - pi));
        kappa1[i] = k1;
        kappa0[i] = k0;
        kappa[i] = k0 * (1.0 - pi) + k1 * pi;
    }
    Ok(KappaWeights {
        kappa,
        kappa1,
        kappa0,
        p: p.clone(),
    })
}

impl KappaWeights {
    pub fn weights(&self, variant: Variant) -> &DVector<f64> {
        match variant {
            Variant::K => &self.kappa,
            Variant::K1 => &self.kappa1,
            Variant::K0 => &self.kappa0,
        }
    }

    pub fn len(&self) -> usize {
        self.kappa.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kappa.is_empty()
    }
}

/// Sample mean of the chosen weights. Can be negative or zero in finite
/// samples.
pub fn complier_share(w: &KappaWeights, variant: Variant) -> f64 {
    let v = w.weights(variant);
    v.sum() / v.len() as f64
}

/// Self-normalized weighted means of the columns of `x`.
pub fn complier_means(x: &DMatrix<f64>, w: &KappaWeights, variant: Variant) -> Result<DVector<f64>> {
    let v = w.weights(variant);
    if x.nrows() != v.len() {
        return Err(LateError::LengthMismatch {
            expected: v.len(),
            got: x.nrows(),
        });
    }
    let total = v.sum();
    if total.abs() < 1e-12 * v.len() as f64 {
        return Err(LateError::ZeroDenominator {
            which: variant.name(),
            value: total,
        });
    }
    Ok(x.transpose() * v / total)
}

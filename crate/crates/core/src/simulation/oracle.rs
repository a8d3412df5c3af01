//! Ground-truth LATE for the simulation designs.
//!
//! Compliers are the units with `mu_d(x, 0) <= v < mu_d(x, 1)`. Because
//! `E[eps1 | v] = v / 2` and `eps0` is independent of `v`,
//!
//! ```text
//! LATE = ( int mu_y1(x) [Phi(b) - Phi(a)] dx + 0.5 int [phi(a) - phi(b)] dx )
//!        / int [Phi(b) - Phi(a)] dx,      a = mu_d(x, 0), b = mu_d(x, 1)
//! ```
//!
//! which is closed form when `a` and `b` do not depend on `x`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use super::design::{splitmix64, Design, DesignName};
use crate::error::{LateError, Result};

pub const QUAD_TOL: f64 = 1e-8;
pub const DEFAULT_ORACLE_SEED: u64 = 20_180_601;
pub const DEFAULT_ORACLE_DRAWS: u64 = 10_000_000;

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("valid normal")
}

/// True LATE of `design`. Independent of `delta`.
pub fn true_late(design: &Design) -> f64 {
    let n = std_normal();
    match design.name {
        DesignName::A1 | DesignName::A2 => {
            let (a, b) = (design.mu_d(0.0, 0.0), design.mu_d(0.0, 1.0));
            let ev = (n.pdf(a) - n.pdf(b)) / (n.cdf(b) - n.cdf(a));
            design.mu_y1(0.0) + 0.5 * ev
        }
        _ => {
            let share = |x: f64| n.cdf(design.mu_d(x, 1.0)) - n.cdf(design.mu_d(x, 0.0));
            let num = |x: f64| {
                let (a, b) = (design.mu_d(x, 0.0), design.mu_d(x, 1.0));
                design.mu_y1(x) * (n.cdf(b) - n.cdf(a)) + 0.5 * (n.pdf(a) - n.pdf(b))
            };
            adaptive_simpson(&num, 0.0, 1.0, QUAD_TOL) / adaptive_simpson(&share, 0.0, 1.0, QUAD_TOL)
        }
    }
}

/// Which route [`true_late`] takes for a design.
pub fn oracle_method(name: DesignName) -> &'static str {
    match name {
        DesignName::A1 | DesignName::A2 => "closed_form",
        _ => "adaptive_simpson",
    }
}

/// Adaptive Simpson quadrature of `f` over `[a, b]`.
pub fn adaptive_simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> f64 {
    let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson_step(f, a, b, fa, fm, fb, whole, tol, 50)
}

#[allow(clippy::too_many_arguments)]
fn simpson_step<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let diff = left + right - whole;
    if depth == 0 || diff.abs() <= 15.0 * tol {
        return left + right + diff / 15.0;
    }
    simpson_step(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
        + simpson_step(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
}

/// Simulation check of [`true_late`]: the mean of `Y1 - Y0` among compliers
/// over `draws` units. `(X, v)` are drawn by jittered stratification on a
/// square grid (with `v` through the normal quantile) and the outcome noise
/// conditional on `v` is drawn plainly.
pub fn simulated_late(design: &Design, draws: u64, seed: u64) -> f64 {
    let m = (draws as f64).sqrt().ceil() as u64;
    let normal = std_normal();
    let rows: Vec<(f64, f64)> = (0..m)
        .into_par_iter()
        .map(|row| {
            let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(row)));
            let (mut sum, mut count) = (0.0, 0.0);
            for col in 0..m {
                let x = (row as f64 + rng.gen::<f64>()) / m as f64;
                let q = ((col as f64 + rng.gen::<f64>()) / m as f64).clamp(1e-300, 1.0 - 1e-16);
                let v = normal.inverse_cdf(q);
                let w: f64 = rng.sample(StandardNormal);
                let eps0: f64 = rng.sample(StandardNormal);
                if design.mu_d(x, 0.0) <= v && v < design.mu_d(x, 1.0) {
                    let eps1 = 0.5 * v + 0.75_f64.sqrt() * w;
                    sum += design.mu_y1(x) + eps1 - eps0;
                    count += 1.0;
                }
            }
            (sum, count)
        })
        .collect();
    let (sum, count) = rows.iter().fold((0.0, 0.0), |(s, c), (a, b)| (s + a, c + b));
    sum / count
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleRecord {
    pub design: String,
    pub true_late: f64,
    pub method: String,
    pub check_value: f64,
    pub check_draws: u64,
    pub oracle_seed: u64,
    pub discrepancy: f64,
}

/// Evaluates and cross-checks the oracle for one design.
pub fn oracle_record(name: DesignName, draws: u64, seed: u64) -> OracleRecord {
    let design = Design::new(name, 0.05);
    let value = true_late(&design);
    let check = simulated_late(&design, draws, seed);
    OracleRecord {
        design: name.to_string(),
        true_late: value,
        method: oracle_method(name).to_string(),
        check_value: check,
        check_draws: draws,
        oracle_seed: seed,
        discrepancy: (value - check).abs(),
    }
}

pub fn write_cache(path: &Path, records: &[OracleRecord]) -> Result<()> {
    let text = serde_json::to_string_pretty(records)?;
    std::fs::write(path, text + "\n").map_err(|e| LateError::io(path, e))
}

pub fn read_cache(path: &Path) -> Result<Vec<OracleRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| LateError::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

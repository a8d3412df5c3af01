use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::data::Dataset;
use crate::error::{LateError, Result};
use crate::ips::logistic;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum DesignName {
    A1,
    A2,
    B,
    C,
    D,
}

impl DesignName {
    pub const ALL: [DesignName; 5] = [DesignName::A1, DesignName::A2, DesignName::B, DesignName::C, DesignName::D];

    pub fn as_str(self) -> &'static str {
        match self {
            DesignName::A1 => "A1",
            DesignName::A2 => "A2",
            DesignName::B => "B",
            DesignName::C => "C",
            DesignName::D => "D",
        }
    }
}

impl fmt::Display for DesignName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DesignName {
    type Err = LateError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().replace('.', "").as_str() {
            "A1" => Ok(DesignName::A1),
            "A2" => Ok(DesignName::A2),
            "B" => Ok(DesignName::B),
            "C" => Ok(DesignName::C),
            "D" => Ok(DesignName::D),
            _ => Err(LateError::UnknownDesign(s.to_string())),
        }
    }
}

/// One simulation design at overlap level `delta`.
///
/// With `X, u ~ U(0, 1)` the instrument is `Z = 1[u < logistic(mu_z(X) theta0)]`,
/// `theta0 = ln((1 - delta) / delta)`, potential treatments are
/// `D_z = 1[mu_d(X, z) > v]` and the outcome is
/// `Y = D (mu_y1(X) + eps1) + (1 - D) eps0`, where `(eps1, eps0, v)` are
/// standard normal with `corr(eps1, v) = 0.5` and the rest independent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Design {
    pub name: DesignName,
    pub delta: f64,
    pub theta0: f64,
}

impl Design {
    /// Panics unless `0 < delta < 0.5`.
    pub fn new(name: DesignName, delta: f64) -> Self {
        Self::try_new(name, delta).expect("delta must lie in (0, 0.5)")
    }

    pub fn try_new(name: DesignName, delta: f64) -> Result<Self> {
        if !(delta > 0.0 && delta < 0.5) {
            return Err(LateError::InvalidArgument(format!("delta must lie in (0, 0.5), got {delta}")));
        }
        Ok(Self {
            name,
            delta,
            theta0: ((1.0 - delta) / delta).ln(),
        })
    }

    pub fn mu_d(&self, x: f64, z: f64) -> f64 {
        match self.name {
            DesignName::A1 => 4.0 * z,
            DesignName::A2 => 4.0 * (z - 1.0),
            _ => -1.0 + 2.0 * x + 2.122 * z,
        }
    }

    pub fn mu_y1(&self, x: f64) -> f64 {
        match self.name {
            DesignName::A1 | DesignName::A2 | DesignName::B => 0.3989,
            DesignName::C | DesignName::D => 9.0 * (x + 3.0) * (x + 3.0),
        }
    }

    pub fn mu_z(&self, x: f64) -> f64 {
        match self.name {
            DesignName::D => x + x * x - 1.0,
            _ => 2.0 * x - 1.0,
        }
    }

    /// True instrument propensity `P(Z = 1 | X = x)`.
    pub fn pi(&self, x: f64) -> f64 {
        logistic(self.mu_z(x) * self.theta0)
    }
}

/// Unobserved quantities behind a generated sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    pub d1: Vec<f64>,
    pub d0: Vec<f64>,
    pub complier: Vec<bool>,
    pub y1: Vec<f64>,
    pub y0: Vec<f64>,
    /// True instrument propensities.
    pub p: DVector<f64>,
}

/// Draws `n` observations. The same `(design, n, seed)` always yields the
/// same sample.
pub fn generate(design: &Design, n: usize, seed: u64) -> (Dataset, Latent) {
    assert!(n >= 2, "need at least two observations");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rho: f64 = 0.5;
    let tail = (1.0 - rho * rho).sqrt();
    let mut xs = Vec::with_capacity(n);
    let (mut y, mut d, mut z) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    let mut latent = Latent {
        d1: Vec::with_capacity(n),
        d0: Vec::with_capacity(n),
        complier: Vec::with_capacity(n),
        y1: Vec::with_capacity(n),
        y0: Vec::with_capacity(n),
        p: DVector::zeros(n),
    };
    for i in 0..n {
        let x: f64 = rng.gen();
        let u: f64 = rng.gen();
        let g1: f64 = rng.sample(StandardNormal);
        let g2: f64 = rng.sample(StandardNormal);
        let g3: f64 = rng.sample(StandardNormal);
        let (eps1, eps0, v) = (g1, g2, rho * g1 + tail * g3);

        let pi = design.pi(x);
        let zi = if u < pi { 1.0 } else { 0.0 };
        let d1 = if design.mu_d(x, 1.0) > v { 1.0 } else { 0.0 };
        let d0 = if design.mu_d(x, 0.0) > v { 1.0 } else { 0.0 };
        let di = zi * d1 + (1.0 - zi) * d0;
        let y1 = design.mu_y1(x) + eps1;
        let y0 = eps0;

        xs.push(x);
        z.push(zi);
        d.push(di);
        y.push(di * y1 + (1.0 - di) * y0);
        latent.d1.push(d1);
        latent.d0.push(d0);
        latent.complier.push(d1 > d0);
        latent.y1.push(y1);
        latent.y0.push(y0);
        latent.p[i] = pi;
    }
    let ds = Dataset::new(y, d, z, DMatrix::from_vec(n, 1, xs), vec!["x".into()])
        .expect("generated data is valid");
    (ds, latent)
}

/// Per-replication seed: a SplitMix64 mix of the base seed and index.
pub fn replication_seed(base_seed: u64, rep: u64) -> u64 {
    splitmix64(splitmix64(base_seed) ^ rep.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

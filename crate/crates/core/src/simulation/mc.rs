//! Monte Carlo harness over replications of one design cell.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;

use super::design::{generate, replication_seed, Design};
use super::oracle::true_late;
use crate::data::{CellCounts, EstimatorKind};
use crate::error::{LateError, Result};
use crate::estimators::{estimate, hajek_means, linear_iv, Denominator, ScoreSource};
use crate::inference::{infer, Scores};
use crate::ips::{fit_cb, fit_ml};
use crate::kappa::{self, complier_share, Variant};

/// Normal critical value for a nominal 95% interval.
pub const Z_95: f64 = 1.96;

#[derive(Debug, Clone, Serialize)]
pub struct McConfig {
    pub design: Design,
    pub n: usize,
    pub reps: usize,
    pub base_seed: u64,
    pub estimators: Vec<EstimatorKind>,
    /// Worker threads; `None` uses the global pool.
    pub threads: Option<usize>,
}

impl McConfig {
    pub fn new(design: Design, n: usize, reps: usize, base_seed: u64) -> Self {
        Self {
            design,
            n,
            reps,
            base_seed,
            estimators: EstimatorKind::ALL.to_vec(),
            threads: None,
        }
    }
}

/// Complier-share estimates from one replication.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Shares {
    pub iv_first_stage: Option<f64>,
    /// `m1 - m0` under logit scores.
    pub tnorm_denominator: Option<f64>,
    pub kappa1_ml: Option<f64>,
    pub kappa0_ml: Option<f64>,
    pub kappa_ml: Option<f64>,
    /// `m1 - m0` under covariate-balancing scores.
    pub cb_denominator: Option<f64>,
    pub kappa1_cb: Option<f64>,
    pub kappa0_cb: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RepEstimate {
    pub tau: f64,
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RepRecord {
    pub rep: usize,
    pub seed: u64,
    /// Cause when the propensity fits failed and the replication was dropped.
    pub failure: Option<String>,
    pub cells: CellCounts,
    pub estimates: BTreeMap<EstimatorKind, RepEstimate>,
    /// Estimators that failed in an otherwise successful replication.
    pub estimator_failures: BTreeMap<EstimatorKind, String>,
    pub shares: Shares,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimatorSummary {
    pub kind: EstimatorKind,
    pub mse: f64,
    pub mse_ratio: f64,
    pub abs_bias: f64,
    pub coverage: f64,
    pub successes: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McSummary {
    pub design: Design,
    pub n: usize,
    pub reps: usize,
    pub base_seed: u64,
    pub true_late: f64,
    /// Replications dropped because a propensity fit failed.
    pub failed_reps: usize,
    pub rows: Vec<EstimatorSummary>,
    pub records: Vec<RepRecord>,
}

impl McSummary {
    pub fn row(&self, kind: EstimatorKind) -> Option<&EstimatorSummary> {
        self.rows.iter().find(|r| r.kind == kind)
    }
}

fn replicate(cfg: &McConfig, kinds: &[EstimatorKind], rep: usize) -> RepRecord {
    let seed = replication_seed(cfg.base_seed, rep as u64);
    let (ds, _) = generate(&cfg.design, cfg.n, seed);
    let mut record = RepRecord {
        rep,
        seed,
        failure: None,
        cells: CellCounts::of(&ds),
        estimates: BTreeMap::new(),
        estimator_failures: BTreeMap::new(),
        shares: Shares::default(),
    };
    let fits = fit_ml(&ds).and_then(|ml| {
        let cb = fit_cb(&ds, Some(&ml.alpha)).or_else(|_| fit_cb(&ds, None))?;
        Ok((ml, cb))
    });
    let (ml, cb) = match fits {
        Ok(f) => f,
        Err(e) => {
            record.failure = Some(e.to_string());
            return record;
        }
    };

    let s = &mut record.shares;
    if let Ok(w) = kappa::compute(ds.d(), ds.z(), &ml.p) {
        s.kappa1_ml = Some(complier_share(&w, Variant::K1));
        s.kappa0_ml = Some(complier_share(&w, Variant::K0));
        s.kappa_ml = Some(complier_share(&w, Variant::K));
    }
    if let Ok(w) = kappa::compute(ds.d(), ds.z(), &cb.p) {
        s.kappa1_cb = Some(complier_share(&w, Variant::K1));
        s.kappa0_cb = Some(complier_share(&w, Variant::K0));
    }
    s.tnorm_denominator = hajek_means(ds.d(), ds.z(), &ml.p).ok().map(|(a, b)| a - b);
    s.cb_denominator = hajek_means(ds.d(), ds.z(), &cb.p).ok().map(|(a, b)| a - b);

    for &kind in kinds {
        let result = if kind == EstimatorKind::LinearIv {
            linear_iv(&ds)
        } else {
            let fit = if kind == EstimatorKind::Cb { &cb } else { &ml };
            estimate(&ds, kind, &fit.p, ScoreSource::from(fit.method))
                .and_then(|est| infer(&ds, Scores::Fitted(fit), &est))
        };
        match result {
            Ok(est) => {
                if kind == EstimatorKind::LinearIv {
                    record.shares.iv_first_stage = est.denominators.get(&Denominator::FirstStage).copied();
                }
                record.estimates.insert(
                    kind,
                    RepEstimate {
                        tau: est.tau,
                        se: est.se.unwrap_or(f64::NAN),
                    },
                );
            }
            Err(e) => {
                record.estimator_failures.insert(kind, e.to_string());
            }
        }
    }
    record
}

/// Runs `cfg.reps` replications and aggregates them. Linear IV is always
/// computed since it normalizes the MSE. Results do not depend on the
/// number of worker threads.
pub fn run_mc(cfg: &McConfig) -> Result<McSummary> {
    if cfg.reps == 0 {
        return Err(LateError::InvalidArgument("reps must be at least 1".into()));
    }
    if cfg.n < 2 {
        return Err(LateError::InvalidArgument("n must be at least 2".into()));
    }
    let mut kinds: Vec<EstimatorKind> = cfg.estimators.clone();
    if !kinds.contains(&EstimatorKind::LinearIv) {
        kinds.insert(0, EstimatorKind::LinearIv);
    }
    kinds.dedup();

    let work = || -> Vec<RepRecord> {
        (0..cfg.reps)
            .into_par_iter()
            .map(|rep| replicate(cfg, &kinds, rep))
            .collect()
    };
    let records = match cfg.threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t.max(1))
            .build()
            .map_err(|e| LateError::InvalidArgument(format!("thread pool: {e}")))?
            .install(work),
        None => work(),
    };
    Ok(summarize(cfg, &kinds, records))
}

fn summarize(cfg: &McConfig, kinds: &[EstimatorKind], records: Vec<RepRecord>) -> McSummary {
    let truth = true_late(&cfg.design);
    let failed_reps = records.iter().filter(|r| r.failure.is_some()).count();
    let mut rows: Vec<EstimatorSummary> = kinds
        .iter()
        .map(|&kind| {
            let (mut n, mut sq, mut bias, mut hits) = (0usize, 0.0, 0.0, 0usize);
            for rec in &records {
                if let Some(e) = rec.estimates.get(&kind) {
                    let err = e.tau - truth;
                    n += 1;
                    sq += err * err;
                    bias += err;
                    if e.se.is_finite() && err.abs() <= Z_95 * e.se {
                        hits += 1;
                    }
                }
            }
            let failures = records.iter().filter(|r| r.failure.is_some() || r.estimator_failures.contains_key(&kind)).count();
            let nf = n as f64;
            EstimatorSummary {
                kind,
                mse: sq / nf,
                mse_ratio: f64::NAN,
                abs_bias: (bias / nf).abs(),
                coverage: hits as f64 / nf,
                successes: n,
                failures,
            }
        })
        .collect();
    let iv_mse = rows
        .iter()
        .find(|r| r.kind == EstimatorKind::LinearIv)
        .map(|r| r.mse)
        .unwrap_or(f64::NAN);
    for r in &mut rows {
        r.mse_ratio = r.mse / iv_mse;
    }
    rows.retain(|r| cfg.estimators.contains(&r.kind));
    rows.sort_by_key(|r| EstimatorKind::ALL.iter().position(|k| *k == r.kind));
    McSummary {
        design: cfg.design,
        n: cfg.n,
        reps: cfg.reps,
        base_seed: cfg.base_seed,
        true_late: truth,
        failed_reps,
        rows,
        records,
    }
}

//! Blank A/B tests: re-split a fixed set of users many times, build an
//! interval per split and count how often it covers the known null value.

mod synthetic;

pub use synthetic::{CountLaw, NumeratorLaw, SyntheticPopulationSpec, UserRecord};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregate::{AggregateError, MomentAccumulator, UserAggregate};
use crate::bootstrap::{
    bootstrap_sd, mixed_ci, quantile_ci, BootstrapDistribution, BootstrapError, OnlineBootstrap,
    PoissonWeights,
};
use crate::clt::{clt_ci, two_sided_multiplier, CltError, Method};
use crate::keyed::{derive_seed, mix3, unit_interval, user_key};
use crate::model::{tilde, DesignParams, Group, MetricKind};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("OutOfDomain: {0}")]
    OutOfDomain(String),
    #[error("UnsupportedCombination: method {method} cannot produce {kind} intervals")]
    UnsupportedCombination { method: Method, kind: MetricKind },
    #[error("InvalidSpec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Clt(#[from] CltError),
    #[error(transparent)]
    Bootstrap(#[from] BootstrapError),
    #[error(transparent)]
    Aggregate(#[from] AggregateError),
}

const SPLIT_STREAM: u64 = 0x5B17;
const BOOT_STREAM: u64 = 0xB007;
const SALT_DOMAIN: u64 = 0xA55_1647;

/// Population of a user under a three-way split: A with probability
/// `alpha_a`, B with probability `alpha_b`, unassigned otherwise.
#[inline]
pub fn assign_group(key: u64, salt: u64, design: &DesignParams) -> Group {
    let u = unit_interval(mix3(salt, key, SALT_DOMAIN));
    if u < design.alpha_a {
        Group::A
    } else if u < design.alpha_a + design.alpha_b {
        Group::B
    } else {
        Group::Unassigned
    }
}

#[inline]
fn split_key(key: u64, salt: u64, alpha_a: f64) -> Group {
    let u = unit_interval(mix3(salt, key, SALT_DOMAIN));
    if u < alpha_a {
        Group::A
    } else {
        Group::B
    }
}

/// Salted-hash blank split: A with probability `alpha_a`, otherwise B.
pub fn blank_split(user_id: &str, test_seed: u64, alpha_a: f64) -> Group {
    split_key(user_key(user_id), test_seed, alpha_a)
}

/// Variance of the absolute CTR increment when every display is treated as
/// an independent Bernoulli trial.
pub fn naive_display_variance(
    ctr_a: f64,
    displays_a: f64,
    ctr_b: f64,
    displays_b: f64,
) -> Result<f64, HarnessError> {
    for (ctr, d) in [(ctr_a, displays_a), (ctr_b, displays_b)] {
        if !(0.0..=1.0).contains(&ctr) || d.is_nan() || d <= 0.0 {
            return Err(HarnessError::OutOfDomain(format!(
                "ctr {ctr} must lie in [0, 1] and display count {d} must be > 0"
            )));
        }
    }
    Ok(ctr_a * (1.0 - ctr_a) / displays_a + ctr_b * (1.0 - ctr_b) / displays_b)
}

/// Observed coverage per confidence level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageResult {
    pub levels: Vec<f64>,
    pub observed: Vec<f64>,
    pub hits: Vec<usize>,
    pub num_tests: usize,
    pub method: Method,
}

impl CoverageResult {
    /// CSV with columns `level,observed,num_tests,method`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("level,observed,num_tests,method\n");
        for (level, observed) in self.levels.iter().zip(&self.observed) {
            out.push_str(&format!(
                "{level},{observed},{},{}\n",
                self.num_tests, self.method
            ));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageConfig {
    pub method: Method,
    pub kind: MetricKind,
    pub levels: Vec<f64>,
    pub num_tests: usize,
    pub seed: u64,
    /// Bootstrap replicates; ignored by the closed-form methods.
    pub replicates: usize,
    pub alpha_a: f64,
}

impl Default for CoverageConfig {
    fn default() -> Self {
        Self {
            method: Method::Clt,
            kind: MetricKind::RatioDiff,
            levels: vec![0.5, 0.8, 0.9, 0.95, 0.99],
            num_tests: 500,
            seed: 42,
            replicates: 10,
            alpha_a: 0.5,
        }
    }
}

/// Where the blank tests draw their users from.
#[derive(Debug, Clone)]
pub enum CoverageSource {
    Users(Vec<UserRecord>),
    Synthetic { spec: SyntheticPopulationSpec, seed: u64 },
}

impl CoverageSource {
    pub fn users(&self) -> Result<std::borrow::Cow<'_, [UserRecord]>, HarnessError> {
        match self {
            CoverageSource::Users(u) => Ok(std::borrow::Cow::Borrowed(u)),
            CoverageSource::Synthetic { spec, seed } => {
                Ok(std::borrow::Cow::Owned(spec.generate(*seed)?))
            }
        }
    }
}

/// Existing group labels are discarded; blank tests assign their own.
pub fn records_from_aggregates(aggregates: &[UserAggregate]) -> Vec<UserRecord> {
    aggregates
        .iter()
        .map(|a| UserRecord::new(a.user_id.clone(), a.x_sum, a.y_sum))
        .collect()
}

/// Count, over `num_tests` independent evaluations, how often each of
/// `n_levels` intervals covered the truth. Tests run in parallel; the
/// integer counts do not depend on scheduling.
pub fn count_coverage<F>(
    num_tests: usize,
    n_levels: usize,
    test: F,
) -> Result<Vec<usize>, HarnessError>
where
    F: Fn(usize) -> Result<Vec<bool>, HarnessError> + Sync,
{
    let outcomes = (0..num_tests)
        .into_par_iter()
        .map(&test)
        .collect::<Result<Vec<_>, _>>()?;
    let mut hits = vec![0usize; n_levels];
    for covered in outcomes {
        for (h, c) in hits.iter_mut().zip(covered) {
            *h += c as usize;
        }
    }
    Ok(hits)
}

/// Salt of blank test `index`.
pub fn split_salt(seed: u64, index: usize) -> u64 {
    derive_seed(seed, SPLIT_STREAM, index as u64)
}

/// Bootstrap seed of blank test `index`.
pub fn bootstrap_seed(seed: u64, index: usize) -> u64 {
    derive_seed(seed, BOOT_STREAM, index as u64)
}

fn validate_config(cfg: &CoverageConfig) -> Result<(), HarnessError> {
    if cfg.num_tests == 0 {
        return Err(HarnessError::OutOfDomain("num_tests must be >= 1".into()));
    }
    if !(cfg.alpha_a > 0.0 && cfg.alpha_a < 1.0) {
        return Err(HarnessError::OutOfDomain(format!(
            "alpha_a {} must lie in (0, 1)",
            cfg.alpha_a
        )));
    }
    for &level in &cfg.levels {
        two_sided_multiplier(level)?;
    }
    if cfg.method == Method::NaiveDisplay && cfg.kind != MetricKind::RatioDiff {
        return Err(HarnessError::UnsupportedCombination {
            method: cfg.method,
            kind: cfg.kind,
        });
    }
    if matches!(cfg.method, Method::BootstrapQuantile | Method::BootstrapClt) && cfg.replicates == 0
    {
        return Err(BootstrapError::InvalidReplicateCount(0).into());
    }
    Ok(())
}

/// Intervals of one blank test, one per level.
fn blank_test_intervals(
    users: &[UserRecord],
    cfg: &CoverageConfig,
    index: usize,
) -> Result<Vec<(f64, f64)>, HarnessError> {
    let salt = split_salt(cfg.seed, index);
    let design = DesignParams::new(cfg.alpha_a, 1.0 - cfg.alpha_a)
        .map_err(|e| HarnessError::OutOfDomain(e.to_string()))?;
    let groups = users.iter().map(|u| split_key(u.key, salt, cfg.alpha_a));

    match cfg.method {
        Method::Clt => {
            let mut acc = MomentAccumulator::new();
            for (u, g) in users.iter().zip(groups) {
                acc.push(&tilde(g, u.x, u.y, &design));
            }
            let summary = acc.summary()?;
            cfg.levels
                .iter()
                .map(|&q| {
                    let ci = clt_ci(cfg.kind, &summary, q)?;
                    Ok((ci.lo, ci.hi))
                })
                .collect()
        }
        Method::NaiveDisplay => {
            let mut sums = [0.0f64; 4];
            for (u, g) in users.iter().zip(groups) {
                let off = if g == Group::A { 0 } else { 2 };
                sums[off] += u.x;
                sums[off + 1] += u.y;
            }
            let ctr_a = sums[0] / sums[1];
            let ctr_b = sums[2] / sums[3];
            let sd = naive_display_variance(ctr_a, sums[1], ctr_b, sums[3])?.sqrt();
            let estimate = ctr_b - ctr_a;
            cfg.levels
                .iter()
                .map(|&q| {
                    let half = two_sided_multiplier(q)? * sd;
                    Ok((estimate - half, estimate + half))
                })
                .collect()
        }
        Method::BootstrapQuantile | Method::BootstrapClt => {
            let weights = PoissonWeights {
                seed: bootstrap_seed(cfg.seed, index),
            };
            let mut boot = OnlineBootstrap::new(design, cfg.kind, cfg.replicates, weights)?;
            for (u, g) in users.iter().zip(groups) {
                boot.push_keyed(&u.user_id, u.key, g, u.x, u.y)?;
            }
            let dist = boot.finish();
            cfg.levels
                .iter()
                .map(|&q| {
                    let ci = if cfg.method == Method::BootstrapQuantile {
                        quantile_ci(&dist, q)?
                    } else {
                        let estimate = dist.point_estimate.ok_or(BootstrapError::EmptyDistribution)?;
                        mixed_ci(estimate, &dist, q)?
                    };
                    Ok((ci.lo, ci.hi))
                })
                .collect()
        }
    }
}

/// Run `cfg.num_tests` blank A/B tests over `source` and score coverage of
/// the known null value at every requested level.
pub fn run_coverage(
    source: &CoverageSource,
    cfg: &CoverageConfig,
) -> Result<CoverageResult, HarnessError> {
    validate_config(cfg)?;
    let users = source.users()?;
    let truth = cfg.kind.null_value();
    let hits = count_coverage(cfg.num_tests, cfg.levels.len(), |t| {
        Ok(blank_test_intervals(&users, cfg, t)?
            .into_iter()
            .map(|(lo, hi)| lo <= truth && truth <= hi)
            .collect())
    })?;
    Ok(CoverageResult {
        levels: cfg.levels.clone(),
        observed: hits
            .iter()
            .map(|&h| h as f64 / cfg.num_tests as f64)
            .collect(),
        hits,
        num_tests: cfg.num_tests,
        method: cfg.method,
    })
}

/// Point estimates of `kind` over blank splits, for checking that the null
/// value is recovered on average.
pub fn blank_estimates(
    users: &[UserRecord],
    kind: MetricKind,
    alpha_a: f64,
    num_tests: usize,
    seed: u64,
) -> Result<Vec<f64>, HarnessError> {
    let design = DesignParams::new(alpha_a, 1.0 - alpha_a)
        .map_err(|e| HarnessError::OutOfDomain(e.to_string()))?;
    (0..num_tests)
        .into_par_iter()
        .map(|t| {
            let salt = split_salt(seed, t);
            let mut acc = MomentAccumulator::new();
            for u in users {
                acc.push(&tilde(split_key(u.key, salt, alpha_a), u.x, u.y, &design));
            }
            Ok(crate::model::evaluate_metric(kind, &acc.summary()?.means))
        })
        .collect()
}

/// Bootstrap distribution of the total numerator (e.g. clicks) of `users`,
/// rescaled to a fixed population of `users.len()`.
pub fn total_count_bootstrap(
    users: &[UserRecord],
    replicates: usize,
    seed: u64,
) -> Result<BootstrapDistribution, HarnessError> {
    // Everyone in one population of ratio 1; sum-diff then reads the mean.
    let design = DesignParams::new(0.0, 1.0).expect("valid single-population design");
    let mut boot = OnlineBootstrap::new(
        design,
        MetricKind::SumDiff,
        replicates,
        PoissonWeights { seed },
    )?;
    for u in users {
        boot.push_keyed(&u.user_id, u.key, Group::B, u.x, u.y)?;
    }
    let mut dist = boot.finish();
    let n = dist.n_users as f64;
    for e in dist.estimates.iter_mut().flatten() {
        *e *= n;
    }
    if let Some(p) = dist.point_estimate.as_mut() {
        *p *= n;
    }
    Ok(dist)
}

/// Standard deviation of a bootstrapped click total next to the binomial
/// standard deviation implied by independent displays.
pub fn empirical_vs_binomial_sd(
    total_clicks: &BootstrapDistribution,
    n_displays: f64,
    ctr: f64,
) -> Result<(f64, f64), HarnessError> {
    if n_displays.is_nan() || n_displays <= 0.0 || !(0.0..=1.0).contains(&ctr) {
        return Err(HarnessError::OutOfDomain(format!(
            "display count {n_displays} must be > 0 and ctr {ctr} in [0, 1]"
        )));
    }
    let empirical = bootstrap_sd(total_clicks)?;
    Ok((empirical, (n_displays * ctr * (1.0 - ctr)).sqrt()))
}

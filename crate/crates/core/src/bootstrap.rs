//! One-pass Poisson bootstrap over ungrouped log lines, and the two interval
//! constructions built on its replicate estimates.
//!
//! Every user receives one Poisson(1) weight per replicate. Weights are a pure
//! function of `(seed, user, replicate)`, so a user scattered across many
//! lines is weighted consistently without grouping the data first.

use std::collections::hash_map::Entry;
use std::collections::HashMap;
use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregate::{check_design, AggregateError, ObservationLine};
use crate::clt::{check_level, two_sided_multiplier, CiReport, CltError, Method};
use crate::keyed::{mix3, unit_interval, user_key};
use crate::model::{evaluate_metric, tilde, DesignParams, Flag, Group, MeanVector, MetricKind};

#[derive(Debug, Error)]
pub enum BootstrapError {
    #[error("InvalidReplicateCount: need at least 1 replicate, got {0}")]
    InvalidReplicateCount(usize),
    #[error("EmptyDistribution: no valid replicate estimate")]
    EmptyDistribution,
    #[error("InsufficientReplicates: {valid} valid replicate(s), at least 2 are required")]
    InsufficientReplicates { valid: usize },
    #[error(transparent)]
    Aggregate(#[from] AggregateError),
    #[error(transparent)]
    Clt(#[from] CltError),
}

/// Source of per-user, per-replicate resampling weights.
pub trait WeightSource: Sync {
    fn weight(&self, user_key: u64, replicate: usize) -> u32;

    /// Seed recorded in reports, if the source has one.
    fn seed(&self) -> Option<u64> {
        None
    }
}

/// Keyed Poisson(1) weights.
#[derive(Debug, Clone, Copy)]
pub struct PoissonWeights {
    pub seed: u64,
}

impl WeightSource for PoissonWeights {
    #[inline]
    fn weight(&self, user_key: u64, replicate: usize) -> u32 {
        poisson1(unit_interval(mix3(self.seed, user_key, replicate as u64)))
    }

    fn seed(&self) -> Option<u64> {
        Some(self.seed)
    }
}

/// Every weight is 1: each replicate reproduces the plain estimator.
#[derive(Debug, Clone, Copy, Default)]
pub struct UnitWeights;

impl WeightSource for UnitWeights {
    #[inline]
    fn weight(&self, _user_key: u64, _replicate: usize) -> u32 {
        1
    }
}

/// Inverse-transform Poisson(1) draw from a uniform in `[0, 1)`.
#[inline]
fn poisson1(u: f64) -> u32 {
    let mut k = 0u32;
    let mut p = (-1.0f64).exp();
    let mut cdf = p;
    // Beyond k = 20 the cdf is 1 to double precision.
    while u >= cdf && k < 20 {
        k += 1;
        p /= k as f64;
        cdf += p;
    }
    k
}

/// Resampling weight of `user_id` in replicate `m` for a given seed.
pub fn poisson_weight(seed: u64, user_id: &str, m: usize) -> u32 {
    PoissonWeights { seed }.weight(user_key(user_id), m)
}

/// Replicate estimates produced by the online bootstrap.
///
/// `estimates[m]` is `None` when replicate `m` drew no user or hit a zero
/// denominator; such replicates are left out of every interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapDistribution {
    pub kind: MetricKind,
    pub seed: Option<u64>,
    pub n_users: u64,
    pub estimates: Vec<Option<f64>>,
    pub replicate_sizes: Vec<u64>,
    /// The estimator on the unweighted data.
    pub point_estimate: Option<f64>,
    pub flags: Vec<Flag>,
}

impl BootstrapDistribution {
    pub fn replicates(&self) -> usize {
        self.estimates.len()
    }

    pub fn valid_estimates(&self) -> Vec<f64> {
        self.estimates.iter().flatten().copied().collect()
    }

    pub fn invalid_count(&self) -> usize {
        self.estimates.iter().filter(|e| e.is_none()).count()
    }
}

/// Streaming accumulator over a range of replicate indices.
pub struct OnlineBootstrap<W> {
    design: DesignParams,
    kind: MetricKind,
    weights: W,
    replicates: Range<usize>,
    sums: Vec<[f64; 4]>,
    sizes: Vec<u64>,
    seen: HashMap<u64, Group>,
    plain: [f64; 4],
}

impl<W: WeightSource> OnlineBootstrap<W> {
    pub fn new(
        design: DesignParams,
        kind: MetricKind,
        replicates: usize,
        weights: W,
    ) -> Result<Self, BootstrapError> {
        Self::for_range(design, kind, 0..replicates, weights)
    }

    /// Accumulator restricted to replicates `range`; used to split work by
    /// replicate index.
    pub fn for_range(
        design: DesignParams,
        kind: MetricKind,
        range: Range<usize>,
        weights: W,
    ) -> Result<Self, BootstrapError> {
        if range.is_empty() {
            return Err(BootstrapError::InvalidReplicateCount(range.len()));
        }
        let len = range.len();
        Ok(Self {
            design,
            kind,
            weights,
            replicates: range,
            sums: vec![[0.0; 4]; len],
            sizes: vec![0; len],
            seen: HashMap::new(),
            plain: [0.0; 4],
        })
    }

    pub fn push(&mut self, line: &ObservationLine) -> Result<(), BootstrapError> {
        line.validate()?;
        self.push_keyed(&line.user_id, user_key(&line.user_id), line.group, line.x, line.y)
    }

    /// Add one line whose user key is already known. `user_id` is only used
    /// in error messages.
    pub fn push_keyed(
        &mut self,
        user_id: &str,
        key: u64,
        group: Group,
        x: f64,
        y: f64,
    ) -> Result<(), BootstrapError> {
        check_design(user_id, group, &self.design)?;
        let first = match self.seen.entry(key) {
            Entry::Vacant(v) => {
                v.insert(group);
                true
            }
            Entry::Occupied(mut o) => {
                let known = *o.get();
                match (known, group) {
                    (_, Group::Unassigned) => {}
                    (Group::Unassigned, g) => {
                        o.insert(g);
                    }
                    (a, b) if a == b => {}
                    (a, b) => {
                        return Err(AggregateError::ConflictingGroup {
                            user: user_id.to_string(),
                            first: a,
                            second: b,
                        }
                        .into())
                    }
                }
                false
            }
        };
        let t = tilde(group, x, y, &self.design).as_array();
        let contributes = t.iter().any(|v| *v != 0.0);
        if !first && !contributes {
            return Ok(());
        }
        for (p, v) in self.plain.iter_mut().zip(t) {
            *p += v;
        }
        for (slot, m) in self.replicates.clone().enumerate() {
            let w = self.weights.weight(key, m);
            if first {
                self.sizes[slot] += w as u64;
            }
            if contributes && w > 0 {
                let w = w as f64;
                let acc = &mut self.sums[slot];
                for k in 0..4 {
                    acc[k] += w * t[k];
                }
            }
        }
        Ok(())
    }

    /// Weighted tilde sums per replicate.
    pub fn sums(&self) -> &[[f64; 4]] {
        &self.sums
    }

    pub fn replicate_sizes(&self) -> &[u64] {
        &self.sizes
    }

    pub fn n_users(&self) -> u64 {
        self.seen.len() as u64
    }

    pub fn finish(self) -> BootstrapDistribution {
        let kind = self.kind;
        let estimates: Vec<Option<f64>> = self
            .sums
            .iter()
            .zip(&self.sizes)
            .map(|(sum, &size)| {
                if size == 0 {
                    return None;
                }
                let means = scaled(sum, size as f64);
                (!kind.hits_zero_denominator(&means)).then(|| evaluate_metric(kind, &means))
            })
            .collect();

        let n_users = self.seen.len() as u64;
        let mut flags = Vec::new();
        let point_estimate = (n_users > 0).then(|| {
            let means = scaled(&self.plain, n_users as f64);
            if kind.hits_zero_denominator(&means) {
                flags.push(Flag::ZeroDenominator);
            }
            evaluate_metric(kind, &means)
        });
        if estimates.iter().any(Option::is_none) {
            flags.push(Flag::InvalidReplicates);
        }
        BootstrapDistribution {
            kind,
            seed: self.weights.seed(),
            n_users,
            estimates,
            replicate_sizes: self.sizes,
            point_estimate,
            flags,
        }
    }
}

fn scaled(sum: &[f64; 4], by: f64) -> MeanVector {
    MeanVector::new(sum[0] / by, sum[1] / by, sum[2] / by, sum[3] / by)
}

/// Number of replicates handled by one worker.
const REPLICATE_CHUNK: usize = 16;

/// Online bootstrap with an arbitrary weight source.
///
/// Work is split by replicate index; every replicate accumulates the lines
/// in input order, so the result does not depend on the number of workers.
pub fn run_online_bootstrap_with<W: WeightSource + Clone + Send>(
    lines: &[ObservationLine],
    design: DesignParams,
    kind: MetricKind,
    replicates: usize,
    weights: W,
) -> Result<BootstrapDistribution, BootstrapError> {
    if replicates == 0 {
        return Err(BootstrapError::InvalidReplicateCount(0));
    }
    let chunks: Vec<Range<usize>> = (0..replicates)
        .step_by(REPLICATE_CHUNK)
        .map(|start| start..(start + REPLICATE_CHUNK).min(replicates))
        .collect();
    let parts = chunks
        .into_par_iter()
        .map(|range| {
            let mut boot = OnlineBootstrap::for_range(design, kind, range, weights.clone())?;
            for line in lines {
                boot.push(line)?;
            }
            Ok(boot.finish())
        })
        .collect::<Result<Vec<_>, BootstrapError>>()?;

    let mut iter = parts.into_iter();
    let mut dist = iter.next().expect("at least one chunk");
    for part in iter {
        dist.estimates.extend(part.estimates);
        dist.replicate_sizes.extend(part.replicate_sizes);
    }
    dist.flags.retain(|f| *f != Flag::InvalidReplicates);
    if dist.invalid_count() > 0 {
        dist.flags.push(Flag::InvalidReplicates);
    }
    Ok(dist)
}

/// One-pass Poisson bootstrap of `kind` over ungrouped lines.
pub fn run_online_bootstrap(
    lines: &[ObservationLine],
    design: DesignParams,
    kind: MetricKind,
    replicates: usize,
    seed: u64,
) -> Result<BootstrapDistribution, BootstrapError> {
    run_online_bootstrap_with(lines, design, kind, replicates, PoissonWeights { seed })
}

/// Empirical quantile with linear interpolation between order statistics at
/// the 1-based position `h = (len - 1) p + 1`. `sorted` must be ascending.
pub fn empirical_quantile(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * p + 1.0;
    let lo = (h.floor() as usize).clamp(1, sorted.len());
    let hi = (lo + 1).min(sorted.len());
    let a = sorted[lo - 1];
    let b = sorted[hi - 1];
    a + (h - lo as f64) * (b - a)
}

fn sorted_valid(dist: &BootstrapDistribution) -> Vec<f64> {
    let mut v = dist.valid_estimates();
    v.sort_by(f64::total_cmp);
    v
}

fn base_flags(dist: &BootstrapDistribution) -> Vec<Flag> {
    dist.flags.clone()
}

/// Percentile interval from the bootstrap distribution.
///
/// Accepts `0 <= level < 1`; a level of 0 collapses onto the median.
pub fn quantile_ci(dist: &BootstrapDistribution, level: f64) -> Result<CiReport, BootstrapError> {
    if !(0.0..1.0).contains(&level) {
        return Err(CltError::OutOfDomain {
            what: "confidence level",
            value: level,
        }
        .into());
    }
    let sorted = sorted_valid(dist);
    if sorted.is_empty() {
        return Err(BootstrapError::EmptyDistribution);
    }
    let lo = empirical_quantile(&sorted, (1.0 - level) / 2.0);
    let hi = empirical_quantile(&sorted, (1.0 + level) / 2.0);
    let estimate = dist
        .point_estimate
        .unwrap_or_else(|| empirical_quantile(&sorted, 0.5));
    Ok(CiReport {
        kind: dist.kind,
        estimate,
        lo,
        hi,
        level,
        n: dist.n_users,
        method: Method::BootstrapQuantile,
        m_replicates: Some(dist.replicates()),
        seed: dist.seed,
        flags: base_flags(dist),
    })
}

/// Sample standard deviation (divisor `len - 1`) of the valid replicates.
pub fn bootstrap_sd(dist: &BootstrapDistribution) -> Result<f64, BootstrapError> {
    let values = dist.valid_estimates();
    if values.len() < 2 {
        return Err(BootstrapError::InsufficientReplicates {
            valid: values.len(),
        });
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    Ok((ss / (n - 1.0)).sqrt())
}

/// Normal interval around `estimate` using the bootstrap standard deviation.
pub fn mixed_ci(
    estimate: f64,
    dist: &BootstrapDistribution,
    level: f64,
) -> Result<CiReport, BootstrapError> {
    check_level(level)?;
    let sd = bootstrap_sd(dist)?;
    let half = two_sided_multiplier(level)? * sd;
    Ok(CiReport {
        kind: dist.kind,
        estimate,
        lo: estimate - half,
        hi: estimate + half,
        level,
        n: dist.n_users,
        method: Method::BootstrapClt,
        m_replicates: Some(dist.replicates()),
        seed: dist.seed,
        flags: base_flags(dist),
    })
}

#![allow(dead_code)]

use abci::aggregate::{AggregateError, MomentAccumulator};
use abci::harness::{assign_group, SyntheticPopulationSpec, UserRecord};
use abci::model::tilde;
use abci::{DesignParams, MomentSummary, ObservationLine};

/// Default synthetic population of `n` users.
pub fn population(n: usize, seed: u64) -> Vec<UserRecord> {
    SyntheticPopulationSpec {
        n_users: n,
        ..Default::default()
    }
    .generate(seed)
    .unwrap()
}

/// Lines of `users` split over `design` with salt `salt`.
pub fn split_lines(users: &[UserRecord], design: &DesignParams, salt: u64) -> Vec<ObservationLine> {
    users
        .iter()
        .map(|u| ObservationLine::new(u.user_id.clone(), assign_group(u.key, salt, design), u.x, u.y))
        .collect()
}

pub fn summary_of(lines: &[ObservationLine], design: &DesignParams) -> Result<MomentSummary, AggregateError> {
    let mut acc = MomentAccumulator::new();
    for l in lines {
        acc.push(&tilde(l.group, l.x, l.y, design));
    }
    acc.summary()
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Two-pass sample variance.
pub fn variance(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64
}

pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (mean(a), mean(b));
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma) * (x - ma)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb) * (y - mb)).sum();
    cov / (va * vb).sqrt()
}

//! Group-by-user aggregation of raw log lines and the moment estimators that
//! feed the closed-form variances.

mod input;

pub use input::{csv_lines, kdd_lines, read_csv, read_kdd, write_csv, InputFormat};

use indexmap::map::Entry;
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{tilde, DesignParams, Flag, Group, MeanVector, TildeVector};

#[derive(Debug, Error)]
pub enum AggregateError {
    #[error("ConflictingGroup: user {user} appears in both {first} and {second}")]
    ConflictingGroup {
        user: String,
        first: Group,
        second: Group,
    },
    #[error("NegativeMetric: user {user} has x={x}, y={y}; metrics must be finite and >= 0")]
    NegativeMetric { user: String, x: f64, y: f64 },
    #[error("InsufficientUsers: {n} user(s), at least 2 are required")]
    InsufficientUsers { n: usize },
    #[error("GroupOutsideDesign: user {user} is in population {group} whose size ratio is 0")]
    GroupOutsideDesign { user: String, group: Group },
    #[error("ParseError: line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("IoError: {0}")]
    Io(#[from] std::io::Error),
}

/// One raw log event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationLine {
    pub user_id: String,
    pub group: Group,
    pub x: f64,
    pub y: f64,
}

impl ObservationLine {
    pub fn new(user_id: impl Into<String>, group: Group, x: f64, y: f64) -> Self {
        Self {
            user_id: user_id.into(),
            group,
            x,
            y,
        }
    }

    pub(crate) fn validate(&self) -> Result<(), AggregateError> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if ok(self.x) && ok(self.y) {
            Ok(())
        } else {
            Err(AggregateError::NegativeMetric {
                user: self.user_id.clone(),
                x: self.x,
                y: self.y,
            })
        }
    }
}

/// Per-user sums of the numerator and denominator metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserAggregate {
    pub user_id: String,
    pub group: Group,
    pub x_sum: f64,
    pub y_sum: f64,
}

impl UserAggregate {
    pub fn tilde(&self, design: &DesignParams) -> TildeVector {
        tilde(self.group, self.x_sum, self.y_sum, design)
    }
}

/// Streaming group-by over log lines.
///
/// Users are kept in first-occurrence order so that everything downstream
/// is reproducible bit for bit.
#[derive(Debug, Default, Clone)]
pub struct Aggregator {
    users: IndexMap<String, (Group, f64, f64)>,
}

impl Aggregator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, line: &ObservationLine) -> Result<(), AggregateError> {
        line.validate()?;
        match self.users.entry(line.user_id.clone()) {
            Entry::Vacant(v) => {
                v.insert((line.group, line.x, line.y));
            }
            Entry::Occupied(mut o) => {
                let (group, x, y) = o.get_mut();
                *group = merge_group(&line.user_id, *group, line.group)?;
                *x += line.x;
                *y += line.y;
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    /// Disjoint union with another shard. Users present in both are merged
    /// as if their lines had been pushed here.
    pub fn merge(&mut self, other: Aggregator) -> Result<(), AggregateError> {
        for (user, (group, x, y)) in other.users {
            match self.users.entry(user) {
                Entry::Vacant(v) => {
                    v.insert((group, x, y));
                }
                Entry::Occupied(mut o) => {
                    let merged = merge_group(o.key(), o.get().0, group)?;
                    let cur = o.get_mut();
                    cur.0 = merged;
                    cur.1 += x;
                    cur.2 += y;
                }
            }
        }
        Ok(())
    }

    pub fn finish(self) -> Vec<UserAggregate> {
        self.users
            .into_iter()
            .map(|(user_id, (group, x_sum, y_sum))| UserAggregate {
                user_id,
                group,
                x_sum,
                y_sum,
            })
            .collect()
    }
}

fn merge_group(user: &str, current: Group, incoming: Group) -> Result<Group, AggregateError> {
    match (current, incoming) {
        (g, Group::Unassigned) => Ok(g),
        (Group::Unassigned, g) => Ok(g),
        (a, b) if a == b => Ok(a),
        (a, b) => Err(AggregateError::ConflictingGroup {
            user: user.to_string(),
            first: a,
            second: b,
        }),
    }
}

/// Group lines by user, summing metrics component-wise.
pub fn ingest<'a, I>(lines: I) -> Result<Vec<UserAggregate>, AggregateError>
where
    I: IntoIterator<Item = &'a ObservationLine>,
{
    let mut agg = Aggregator::new();
    for line in lines {
        agg.push(line)?;
    }
    Ok(agg.finish())
}

/// Single-pass accumulator of the tilde means, variances and the two
/// within-population co-moments.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MomentAccumulator {
    n: u64,
    mean: [f64; 4],
    m2: [f64; 4],
    co_a: f64,
    co_b: f64,
}

impl MomentAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    #[inline]
    pub fn push(&mut self, t: &TildeVector) {
        let v = t.as_array();
        self.n += 1;
        let n = self.n as f64;
        let mut before = [0.0; 4];
        let mut after = [0.0; 4];
        for k in 0..4 {
            before[k] = v[k] - self.mean[k];
            self.mean[k] += before[k] / n;
            after[k] = v[k] - self.mean[k];
            self.m2[k] += before[k] * after[k];
        }
        self.co_a += before[0] * after[1];
        self.co_b += before[2] * after[3];
    }

    /// Pairwise combination of two partial accumulators.
    pub fn merge(&mut self, other: &MomentAccumulator) {
        if other.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = *other;
            return;
        }
        let (na, nb) = (self.n as f64, other.n as f64);
        let n = na + nb;
        let mut delta = [0.0; 4];
        for (k, d) in delta.iter_mut().enumerate() {
            *d = other.mean[k] - self.mean[k];
            self.mean[k] += *d * nb / n;
            self.m2[k] += other.m2[k] + *d * *d * na * nb / n;
        }
        self.co_a += other.co_a + delta[0] * delta[1] * na * nb / n;
        self.co_b += other.co_b + delta[2] * delta[3] * na * nb / n;
        self.n += other.n;
    }

    pub fn summary(&self) -> Result<MomentSummary, AggregateError> {
        if self.n < 2 {
            return Err(AggregateError::InsufficientUsers { n: self.n as usize });
        }
        let dof = (self.n - 1) as f64;
        let sd = |k: usize| (self.m2[k] / dof).sqrt();
        let mut flags = Vec::new();
        let corr = |co: f64, i: usize, j: usize| {
            let denom = (self.m2[i] * self.m2[j]).sqrt();
            if denom > 0.0 {
                Some((co / denom).clamp(-1.0, 1.0))
            } else {
                None
            }
        };
        let corr_a = corr(self.co_a, 0, 1).unwrap_or_else(|| {
            flags.push(Flag::ZeroVarianceCorrelationA);
            0.0
        });
        let corr_b = corr(self.co_b, 2, 3).unwrap_or_else(|| {
            flags.push(Flag::ZeroVarianceCorrelationB);
            0.0
        });
        Ok(MomentSummary {
            n: self.n,
            means: MeanVector::from_array(self.mean),
            sd_xa: sd(0),
            sd_ya: sd(1),
            sd_xb: sd(2),
            sd_yb: sd(3),
            corr_a,
            corr_b,
            flags,
        })
    }
}

/// Means, tilde standard deviations (Bessel-corrected) and within-population
/// tilde correlations of a set of users.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentSummary {
    pub n: u64,
    pub means: MeanVector,
    pub sd_xa: f64,
    pub sd_ya: f64,
    pub sd_xb: f64,
    pub sd_yb: f64,
    pub corr_a: f64,
    pub corr_b: f64,
    #[serde(default)]
    pub flags: Vec<Flag>,
}

pub fn summarize(
    aggregates: &[UserAggregate],
    design: &DesignParams,
) -> Result<MomentSummary, AggregateError> {
    let mut acc = MomentAccumulator::new();
    for user in aggregates {
        check_design(&user.user_id, user.group, design)?;
        acc.push(&user.tilde(design));
    }
    acc.summary()
}

pub(crate) fn check_design(
    user: &str,
    group: Group,
    design: &DesignParams,
) -> Result<(), AggregateError> {
    match design.ratio(group) {
        Some(a) if a <= 0.0 => Err(AggregateError::GroupOutsideDesign {
            user: user.to_string(),
            group,
        }),
        _ => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn line(u: &str, g: Group, x: f64, y: f64) -> ObservationLine {
        ObservationLine::new(u, g, x, y)
    }

    /// Rows of the published KDD sample: (user, displays, clicks).
    const KDD_SAMPLE: [(&str, f64, f64); 9] = [
        ("10000244", 1.0, 0.0),
        ("10000148", 3.0, 1.0),
        ("10000089", 1.0, 0.0),
        ("1000026", 6.0, 0.0),
        ("1000002", 1.0, 0.0),
        ("1000002", 1.0, 0.0),
        ("10000315", 1.0, 0.0),
        ("10000925", 3.0, 2.0),
        ("10000185", 1.0, 0.0),
    ];

    #[test]
    fn ingest_kdd_sample() {
        let lines: Vec<_> = KDD_SAMPLE
            .iter()
            .map(|(u, d, c)| line(u, Group::A, *c, *d))
            .collect();
        let users = ingest(&lines).unwrap();
        assert_eq!(users.len(), 8);
        let dup = users.iter().find(|u| u.user_id == "1000002").unwrap();
        assert_eq!((dup.y_sum, dup.x_sum), (2.0, 0.0));
        // first-occurrence order
        assert_eq!(users[0].user_id, "10000244");
        assert_eq!(users[7].user_id, "10000185");
    }

    #[test]
    fn ingest_trivial_cases() {
        assert!(ingest(&[]).unwrap().is_empty());
        let users = ingest(&[line("u", Group::A, 3.0, 5.0)]).unwrap();
        assert_eq!(
            users,
            vec![UserAggregate {
                user_id: "u".into(),
                group: Group::A,
                x_sum: 3.0,
                y_sum: 5.0
            }]
        );
    }

    #[test]
    fn ingest_errors() {
        let err = ingest(&[line("u", Group::A, 1.0, 1.0), line("u", Group::B, 1.0, 1.0)]);
        assert!(matches!(err, Err(AggregateError::ConflictingGroup { .. })));
        let err = ingest(&[line("u", Group::A, -1.0, 1.0)]);
        assert!(matches!(err, Err(AggregateError::NegativeMetric { .. })));
        let err = ingest(&[line("u", Group::A, 1.0, f64::NAN)]);
        assert!(matches!(err, Err(AggregateError::NegativeMetric { .. })));
    }

    #[test]
    fn unassigned_lines_adopt_the_user_group() {
        let users = ingest(&[
            line("u", Group::Unassigned, 1.0, 1.0),
            line("u", Group::B, 1.0, 2.0),
            line("u", Group::Unassigned, 0.0, 1.0),
        ])
        .unwrap();
        assert_eq!(users[0].group, Group::B);
        assert_eq!((users[0].x_sum, users[0].y_sum), (2.0, 4.0));
    }

    #[test]
    fn summarize_two_users() {
        let users = ingest(&[line("1", Group::A, 2.0, 4.0), line("2", Group::B, 1.0, 2.0)]).unwrap();
        let s = summarize(&users, &DesignParams::balanced()).unwrap();
        assert_eq!(s.n, 2);
        assert_eq!(s.means, MeanVector::new(2.0, 4.0, 1.0, 2.0));
        assert!((s.sd_xa - 8f64.sqrt()).abs() < 1e-12);
        assert!((s.corr_a - 1.0).abs() < 1e-12);
        assert!((s.corr_b - 1.0).abs() < 1e-12);
        assert!(s.flags.is_empty());
    }

    #[test]
    fn summarize_requires_two_users() {
        let users = ingest(&[line("1", Group::A, 2.0, 4.0)]).unwrap();
        assert!(matches!(
            summarize(&users, &DesignParams::balanced()),
            Err(AggregateError::InsufficientUsers { n: 1 })
        ));
    }

    #[test]
    fn summarize_identical_users_has_zero_sd_and_flags() {
        let lines: Vec<_> = (0..10)
            .map(|i| line(&i.to_string(), Group::A, 1.0, 3.0))
            .collect();
        let design = DesignParams::new(1.0, 0.0).unwrap();
        let s = summarize(&ingest(&lines).unwrap(), &design).unwrap();
        assert_eq!([s.sd_xa, s.sd_ya, s.sd_xb, s.sd_yb], [0.0; 4]);
        assert_eq!(s.corr_a, 0.0);
        assert!(s.flags.contains(&Flag::ZeroVarianceCorrelationA));
        assert!(s.flags.contains(&Flag::ZeroVarianceCorrelationB));
    }

    #[test]
    fn summarize_rejects_users_in_absent_population() {
        let users = ingest(&[line("1", Group::A, 2.0, 4.0), line("2", Group::B, 1.0, 2.0)]).unwrap();
        let design = DesignParams::new(1.0, 0.0).unwrap();
        assert!(matches!(
            summarize(&users, &design),
            Err(AggregateError::GroupOutsideDesign { .. })
        ));
    }

    #[test]
    fn unassigned_users_count_in_n() {
        let users = ingest(&[
            line("1", Group::A, 2.0, 4.0),
            line("2", Group::B, 1.0, 2.0),
            line("3", Group::Unassigned, 9.0, 9.0),
        ])
        .unwrap();
        let design = DesignParams::new(0.25, 0.25).unwrap();
        let s = summarize(&users, &design).unwrap();
        assert_eq!(s.n, 3);
        assert!((s.means.mxa - 8.0 / 3.0).abs() < 1e-12);
    }

    /// Two-pass textbook estimators, independent of the streaming path.
    fn two_pass(tildes: &[[f64; 4]]) -> ([f64; 4], [f64; 4], f64, f64) {
        let n = tildes.len() as f64;
        let mut mean = [0.0; 4];
        for t in tildes {
            for k in 0..4 {
                mean[k] += t[k] / n;
            }
        }
        let mut var = [0.0; 4];
        let (mut ca, mut cb) = (0.0, 0.0);
        for t in tildes {
            for k in 0..4 {
                var[k] += (t[k] - mean[k]).powi(2) / (n - 1.0);
            }
            ca += (t[0] - mean[0]) * (t[1] - mean[1]) / (n - 1.0);
            cb += (t[2] - mean[2]) * (t[3] - mean[3]) / (n - 1.0);
        }
        (mean, var, ca, cb)
    }

    fn arb_lines() -> impl Strategy<Value = Vec<ObservationLine>> {
        prop::collection::vec((0u32..40, 0.0..20.0f64, 0.0..50.0f64), 2..200).prop_map(
            |rows| {
                rows.into_iter()
                    .map(|(u, x, y)| {
                        // group is a function of the user so lines never conflict
                        let group = [Group::A, Group::B, Group::Unassigned][u as usize % 3];
                        line(&format!("user{u}"), group, x, y)
                    })
                    .collect()
            },
        )
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
    }

    proptest! {
        #[test]
        fn summary_matches_two_pass_estimators(lines in arb_lines()) {
            let users = ingest(&lines).unwrap();
            prop_assume!(users.len() >= 2);
            let design = DesignParams::new(0.4, 0.35).unwrap();
            let s = summarize(&users, &design).unwrap();
            let tildes: Vec<_> = users.iter().map(|u| u.tilde(&design).as_array()).collect();
            let (mean, var, ca, cb) = two_pass(&tildes);
            let m = [s.means.mxa, s.means.mya, s.means.mxb, s.means.myb];
            let sd = [s.sd_xa, s.sd_ya, s.sd_xb, s.sd_yb];
            for k in 0..4 {
                prop_assert!(close(m[k], mean[k], 1e-10));
                prop_assert!(close(sd[k] * sd[k], var[k], 1e-9));
            }
            if var[0] > 0.0 && var[1] > 0.0 {
                prop_assert!(close(s.corr_a, ca / (var[0] * var[1]).sqrt(), 1e-8));
            }
            if var[2] > 0.0 && var[3] > 0.0 {
                prop_assert!(close(s.corr_b, cb / (var[2] * var[3]).sqrt(), 1e-8));
            }
            prop_assert!(s.corr_a.abs() <= 1.0 && s.corr_b.abs() <= 1.0);
        }

        #[test]
        fn line_order_does_not_matter(lines in arb_lines(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut shuffled = lines.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let design = DesignParams::new(0.5, 0.5).unwrap();
            let a = ingest(&lines).unwrap();
            let b = ingest(&shuffled).unwrap();
            prop_assume!(a.len() >= 2);
            let sa = summarize(&a, &design).unwrap();
            let sb = summarize(&b, &design).unwrap();
            let va = [sa.means.mxa, sa.means.mya, sa.means.mxb, sa.means.myb, sa.sd_xa, sa.sd_ya, sa.sd_xb, sa.sd_yb, sa.corr_a, sa.corr_b];
            let vb = [sb.means.mxa, sb.means.mya, sb.means.mxb, sb.means.myb, sb.sd_xa, sb.sd_ya, sb.sd_xb, sb.sd_yb, sb.corr_a, sb.corr_b];
            for (x, y) in va.iter().zip(vb.iter()) {
                prop_assert!(close(*x, *y, 1e-9));
            }
        }

        #[test]
        fn sharded_aggregation_matches_single_pass(lines in arb_lines(), shards in 1usize..6) {
            let design = DesignParams::new(0.5, 0.5).unwrap();
            let whole = ingest(&lines).unwrap();
            prop_assume!(whole.len() >= 2);
            let single = summarize(&whole, &design).unwrap();

            // deterministic partition of user ids
            let mut parts = vec![Aggregator::new(); shards];
            for l in &lines {
                let shard = (crate::keyed::user_key(&l.user_id) % shards as u64) as usize;
                parts[shard].push(l).unwrap();
            }
            let mut merged = MomentAccumulator::new();
            let mut union = Aggregator::new();
            for part in parts {
                let mut acc = MomentAccumulator::new();
                for u in part.clone().finish() {
                    acc.push(&u.tilde(&design));
                }
                merged.merge(&acc);
                union.merge(part).unwrap();
            }
            prop_assert_eq!(union.len(), whole.len());
            let s = merged.summary().unwrap();
            let pairs = [
                (s.means.mxa, single.means.mxa), (s.means.mya, single.means.mya),
                (s.means.mxb, single.means.mxb), (s.means.myb, single.means.myb),
                (s.sd_xa, single.sd_xa), (s.sd_ya, single.sd_ya),
                (s.sd_xb, single.sd_xb), (s.sd_yb, single.sd_yb),
                (s.corr_a, single.corr_a), (s.corr_b, single.corr_b),
            ];
            for (x, y) in pairs {
                prop_assert!(close(x, y, 1e-12), "{} vs {}", x, y);
            }
        }
    }

    #[test]
    fn grouped_input_is_summarized_exactly() {
        let lines: Vec<_> = (0..50)
            .map(|i| {
                let g = if i % 2 == 0 { Group::A } else { Group::B };
                line(&i.to_string(), g, (i % 7) as f64, (i % 11 + 1) as f64)
            })
            .collect();
        let pre: Vec<_> = lines
            .iter()
            .map(|l| UserAggregate {
                user_id: l.user_id.clone(),
                group: l.group,
                x_sum: l.x,
                y_sum: l.y,
            })
            .collect();
        let design = DesignParams::balanced();
        assert_eq!(
            summarize(&ingest(&lines).unwrap(), &design).unwrap(),
            summarize(&pre, &design).unwrap()
        );
    }
}

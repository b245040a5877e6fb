//! Shared vocabulary: population design, metric kinds, the tilde transform
//! and the guarded metric functionals.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("InvalidDesign: {0}")]
    InvalidDesign(String),
    #[error("UnknownMetric: '{0}' (expected one of sum-diff, sum-ratio, ratio-diff, ratio-rel)")]
    UnknownMetric(String),
    #[error("UnknownGroup: '{0}' (expected A, B or -)")]
    UnknownGroup(String),
}

/// Degenerate conditions met while estimating; carried into every report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Flag {
    /// A tilde standard deviation of population A is zero; its correlation was set to 0.
    ZeroVarianceCorrelationA,
    /// Same for population B.
    ZeroVarianceCorrelationB,
    /// A coefficient of variation above 10 entered a ratio variance.
    HighCoefficientOfVariation,
    /// The point estimate divided by a zero replaced with 1.
    ZeroDenominator,
    /// Some bootstrap replicates were excluded as degenerate.
    InvalidReplicates,
}

/// Population size ratios of an A/B split.
///
/// A ratio of zero means the population is absent, which is how a
/// single-population dataset is described (`alpha_a = 1, alpha_b = 0`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DesignParams {
    pub alpha_a: f64,
    pub alpha_b: f64,
}

impl DesignParams {
    pub fn new(alpha_a: f64, alpha_b: f64) -> Result<Self, ModelError> {
        let in_unit = |a: f64| a.is_finite() && (0.0..=1.0).contains(&a);
        if !in_unit(alpha_a) || !in_unit(alpha_b) {
            return Err(ModelError::InvalidDesign(format!(
                "size ratios must lie in [0, 1], got alpha_a={alpha_a}, alpha_b={alpha_b}"
            )));
        }
        if alpha_a == 0.0 && alpha_b == 0.0 {
            return Err(ModelError::InvalidDesign(
                "at least one population must have a positive size ratio".into(),
            ));
        }
        // Tolerate rounding in splits such as 0.7 + 0.3.
        if alpha_a + alpha_b > 1.0 + 1e-12 {
            return Err(ModelError::InvalidDesign(format!(
                "populations overlap: alpha_a + alpha_b = {} > 1",
                alpha_a + alpha_b
            )));
        }
        Ok(Self { alpha_a, alpha_b })
    }

    /// Even two-way split.
    pub fn balanced() -> Self {
        Self {
            alpha_a: 0.5,
            alpha_b: 0.5,
        }
    }

    /// Size ratio of the population a group belongs to, `None` for unassigned users.
    pub fn ratio(&self, group: Group) -> Option<f64> {
        match group {
            Group::A => Some(self.alpha_a),
            Group::B => Some(self.alpha_b),
            Group::Unassigned => None,
        }
    }
}

/// Population membership of a user.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Group {
    A,
    B,
    #[serde(rename = "-")]
    Unassigned,
}

impl Group {
    pub fn as_str(self) -> &'static str {
        match self {
            Group::A => "A",
            Group::B => "B",
            Group::Unassigned => "-",
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Group {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "A" | "a" => Ok(Group::A),
            "B" | "b" => Ok(Group::B),
            "-" | "" => Ok(Group::Unassigned),
            other => Err(ModelError::UnknownGroup(other.to_string())),
        }
    }
}

/// The four comparison functionals `f(x, y, x', y')`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricKind {
    /// `x' - x`: absolute increment of a per-user sum.
    SumDiff,
    /// `x' / x`: relative increment of a per-user sum.
    SumRatio,
    /// `x'/y' - x/y`: absolute increment of a ratio metric such as CTR.
    RatioDiff,
    /// `(x'/y') / (x/y)`: relative increment of a ratio metric.
    #[serde(rename = "ratio-rel")]
    RatioOfRatios,
}

impl MetricKind {
    pub const ALL: [MetricKind; 4] = [
        MetricKind::SumDiff,
        MetricKind::SumRatio,
        MetricKind::RatioDiff,
        MetricKind::RatioOfRatios,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MetricKind::SumDiff => "sum-diff",
            MetricKind::SumRatio => "sum-ratio",
            MetricKind::RatioDiff => "ratio-diff",
            MetricKind::RatioOfRatios => "ratio-rel",
        }
    }

    /// Value of the functional when both populations behave identically.
    pub fn null_value(self) -> f64 {
        match self {
            MetricKind::SumDiff | MetricKind::RatioDiff => 0.0,
            MetricKind::SumRatio | MetricKind::RatioOfRatios => 1.0,
        }
    }

    /// True when evaluating on `means` divides by a zero that `nonzero` replaces.
    pub fn hits_zero_denominator(self, means: &MeanVector) -> bool {
        match self {
            MetricKind::SumDiff => false,
            MetricKind::SumRatio => means.mxa == 0.0,
            MetricKind::RatioDiff => means.mya == 0.0 || means.myb == 0.0,
            MetricKind::RatioOfRatios => {
                means.mya == 0.0 || means.myb == 0.0 || means.mxa / nonzero(means.mya) == 0.0
            }
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MetricKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        MetricKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| ModelError::UnknownMetric(s.to_string()))
    }
}

/// Per-user metrics scaled by population membership over the size ratio.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TildeVector {
    pub xa: f64,
    pub ya: f64,
    pub xb: f64,
    pub yb: f64,
}

impl TildeVector {
    pub fn as_array(&self) -> [f64; 4] {
        [self.xa, self.ya, self.xb, self.yb]
    }
}

/// Means of the four tilde coordinates (or their population counterparts).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MeanVector {
    pub mxa: f64,
    pub mya: f64,
    pub mxb: f64,
    pub myb: f64,
}

impl MeanVector {
    pub fn new(mxa: f64, mya: f64, mxb: f64, myb: f64) -> Self {
        Self { mxa, mya, mxb, myb }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    /// Exchange the roles of populations A and B.
    pub fn swapped(&self) -> Self {
        Self::new(self.mxb, self.myb, self.mxa, self.mya)
    }
}

/// Maps 0 to 1 and leaves every other value untouched.
#[inline]
pub fn nonzero(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        x
    }
}

/// Tilde transform of one user's aggregated metrics.
///
/// Users outside both populations map to the zero vector. A group whose
/// size ratio is zero yields non-finite values; callers reject such input
/// before it gets here.
pub fn tilde(group: Group, x: f64, y: f64, design: &DesignParams) -> TildeVector {
    match group {
        Group::A => TildeVector {
            xa: x / design.alpha_a,
            ya: y / design.alpha_a,
            xb: 0.0,
            yb: 0.0,
        },
        Group::B => TildeVector {
            xa: 0.0,
            ya: 0.0,
            xb: x / design.alpha_b,
            yb: y / design.alpha_b,
        },
        Group::Unassigned => TildeVector::default(),
    }
}

pub fn evaluate_metric(kind: MetricKind, m: &MeanVector) -> f64 {
    match kind {
        MetricKind::SumDiff => m.mxb - m.mxa,
        MetricKind::SumRatio => m.mxb / nonzero(m.mxa),
        MetricKind::RatioDiff => m.mxb / nonzero(m.myb) - m.mxa / nonzero(m.mya),
        MetricKind::RatioOfRatios => {
            (m.mxb / nonzero(m.myb)) / nonzero(m.mxa / nonzero(m.mya))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn nonzero_examples() {
        assert_eq!(nonzero(0.0), 1.0);
        assert_eq!(nonzero(-0.0), 1.0);
        assert_eq!(nonzero(5.0), 5.0);
        assert_eq!(nonzero(-0.3), -0.3);
    }

    #[test]
    fn tilde_examples() {
        let half = DesignParams::balanced();
        assert_eq!(
            tilde(Group::A, 2.0, 4.0, &half).as_array(),
            [4.0, 8.0, 0.0, 0.0]
        );
        assert_eq!(
            tilde(Group::B, 1.0, 2.0, &half).as_array(),
            [0.0, 0.0, 2.0, 4.0]
        );
        let whole = DesignParams::new(1.0, 0.0).unwrap();
        assert_eq!(
            tilde(Group::A, 3.0, 1.0, &whole).as_array(),
            [3.0, 1.0, 0.0, 0.0]
        );
        assert_eq!(tilde(Group::Unassigned, 3.0, 1.0, &half), TildeVector::default());
    }

    #[test]
    fn evaluate_examples() {
        let m = MeanVector::new(2.0, 0.0, 3.0, 0.0);
        assert_eq!(evaluate_metric(MetricKind::SumDiff, &m), 1.0);
        let m = MeanVector::new(2.0, 4.0, 3.0, 4.0);
        assert_eq!(evaluate_metric(MetricKind::RatioOfRatios, &m), 1.5);
        let m = MeanVector::new(0.0, 0.0, 7.0, 0.0);
        assert_eq!(evaluate_metric(MetricKind::SumRatio, &m), 7.0);
        assert!(MetricKind::SumRatio.hits_zero_denominator(&m));
    }

    #[test]
    fn ratio_of_ratios_with_zero_a_ratio_divides_by_one() {
        let m = MeanVector::new(0.0, 4.0, 3.0, 6.0);
        assert_eq!(evaluate_metric(MetricKind::RatioOfRatios, &m), 0.5);
        assert!(MetricKind::RatioOfRatios.hits_zero_denominator(&m));
        assert!(!MetricKind::RatioDiff.hits_zero_denominator(&m));
    }

    #[test]
    fn design_validation() {
        assert!(DesignParams::new(0.5, 0.5).is_ok());
        assert!(DesignParams::new(0.3, 0.7).is_ok());
        assert!(DesignParams::new(0.2, 0.3).is_ok());
        assert!(DesignParams::new(0.6, 0.6).is_err());
        assert!(DesignParams::new(0.0, 0.0).is_err());
        assert!(DesignParams::new(-0.1, 0.5).is_err());
        assert!(DesignParams::new(f64::NAN, 0.5).is_err());
    }

    #[test]
    fn metric_names_round_trip() {
        for k in MetricKind::ALL {
            assert_eq!(k.as_str().parse::<MetricKind>().unwrap(), k);
            assert_eq!(serde_json::to_string(&k).unwrap(), format!("\"{}\"", k.as_str()));
        }
        assert!("bogus".parse::<MetricKind>().is_err());
    }

    proptest! {
        #[test]
        fn nonzero_never_zero(x in prop::num::f64::ANY) {
            let v = nonzero(x);
            prop_assert!(v != 0.0);
            if x != 0.0 && !x.is_nan() {
                prop_assert_eq!(v, x);
            }
        }

        #[test]
        fn tilde_is_exclusive(x in 0.0..1e6f64, y in 0.0..1e6f64, a in 0.01..0.99f64, g in 0usize..3) {
            let design = DesignParams::new(a, 1.0 - a).unwrap();
            let group = [Group::A, Group::B, Group::Unassigned][g];
            let t = tilde(group, x, y, &design);
            prop_assert_eq!(t.xa * t.xb, 0.0);
            prop_assert_eq!(t.ya * t.yb, 0.0);
            prop_assert!(t.as_array().iter().all(|v| *v >= 0.0));
        }

        #[test]
        fn sum_diff_is_antisymmetric(m in prop::array::uniform4(0.0..1e3f64)) {
            let m = MeanVector::from_array(m);
            prop_assert_eq!(
                evaluate_metric(MetricKind::SumDiff, &m),
                -evaluate_metric(MetricKind::SumDiff, &m.swapped())
            );
        }

        #[test]
        fn ratio_of_ratios_inverts_under_swap(m in prop::array::uniform4(1e-3..1e3f64)) {
            let m = MeanVector::from_array(m);
            let prod = evaluate_metric(MetricKind::RatioOfRatios, &m)
                * evaluate_metric(MetricKind::RatioOfRatios, &m.swapped());
            prop_assert!((prod - 1.0).abs() < 1e-12);
        }
    }
}

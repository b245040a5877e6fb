//! Closed-form asymptotic variances of the four estimators and the
//! normal-approximation confidence interval built on them.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregate::MomentSummary;
use crate::model::{evaluate_metric, Flag, MetricKind};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CltError {
    #[error("OutOfDomain: {what} = {value}")]
    OutOfDomain { what: &'static str, value: f64 },
    #[error("DegenerateMeans: mean of {which} is {value}; the variance formula needs it > 0")]
    DegenerateMeans { which: &'static str, value: f64 },
    #[error("InsufficientUsers: {n} user(s), at least 2 are required")]
    InsufficientUsers { n: u64 },
}

/// How an interval was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Closed-form variance plugged into a normal interval.
    Clt,
    /// Empirical quantiles of the bootstrap distribution.
    #[serde(rename = "bootstrap")]
    BootstrapQuantile,
    /// Bootstrap standard deviation plugged into a normal interval.
    BootstrapClt,
    /// Display-level binomial variance; baseline only.
    NaiveDisplay,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Clt => "clt",
            Method::BootstrapQuantile => "bootstrap",
            Method::BootstrapClt => "bootstrap-clt",
            Method::NaiveDisplay => "naive-display",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A two-sided confidence interval with everything needed to reproduce it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CiReport {
    pub kind: MetricKind,
    pub estimate: f64,
    pub lo: f64,
    pub hi: f64,
    pub level: f64,
    pub n: u64,
    pub method: Method,
    pub m_replicates: Option<usize>,
    pub seed: Option<u64>,
    pub flags: Vec<Flag>,
}

impl CiReport {
    pub fn contains(&self, value: f64) -> bool {
        self.lo <= value && value <= self.hi
    }

    pub fn half_width(&self) -> f64 {
        (self.hi - self.lo) / 2.0
    }
}

pub(crate) fn check_level(level: f64) -> Result<(), CltError> {
    if level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        Err(CltError::OutOfDomain {
            what: "confidence level",
            value: level,
        })
    }
}

/// Normal quantile multiplier `N^-1((1 + q) / 2)` of a two-sided level `q`.
pub fn two_sided_multiplier(level: f64) -> Result<f64, CltError> {
    check_level(level)?;
    inv_normal_cdf((1.0 + level) / 2.0)
}

// Wichura's AS241 (PPND16), relative accuracy about 1e-16. Coefficients
// are kept as published.
#[allow(clippy::excessive_precision)]
const A: [f64; 8] = [
    3.387_132_872_796_366_608e0,
    1.331_416_678_917_843_774_5e2,
    1.971_590_950_306_551_442_7e3,
    1.373_169_376_550_946_112_5e4,
    4.592_195_393_154_987_145_7e4,
    6.726_577_092_700_870_085_3e4,
    3.343_057_558_358_812_810_5e4,
    2.509_080_928_730_122_672_7e3,
];
#[allow(clippy::excessive_precision)]
const B: [f64; 8] = [
    1.0,
    4.231_333_070_160_091_125_2e1,
    6.871_870_074_920_579_083e2,
    5.394_196_021_424_751_107_7e3,
    2.121_379_430_158_659_586_7e4,
    3.930_789_580_009_271_061e4,
    2.872_908_573_572_194_267_4e4,
    5.226_495_278_852_854_561e3,
];
#[allow(clippy::excessive_precision)]
const C: [f64; 8] = [
    1.423_437_110_749_683_577_34e0,
    4.630_337_846_156_545_295_9e0,
    5.769_497_221_460_691_405_5e0,
    3.647_848_324_763_204_605_04e0,
    1.270_458_252_452_368_382_58e0,
    2.417_807_251_774_506_117_7e-1,
    2.272_384_498_926_918_458_33e-2,
    7.745_450_142_783_414_076_4e-4,
];
#[allow(clippy::excessive_precision)]
const D: [f64; 8] = [
    1.0,
    2.053_191_626_637_758_821_87e0,
    1.676_384_830_183_803_849_4e0,
    6.897_673_349_851_000_045_5e-1,
    1.481_039_764_274_800_745_9e-1,
    1.519_866_656_361_645_719_66e-2,
    5.475_938_084_995_344_946e-4,
    1.050_750_071_644_416_843_24e-9,
];
#[allow(clippy::excessive_precision)]
const E: [f64; 8] = [
    6.657_904_643_501_103_777_2e0,
    5.463_784_911_164_114_369_9e0,
    1.784_826_539_917_291_335_8e0,
    2.965_605_718_285_048_912_3e-1,
    2.653_218_952_657_612_309_3e-2,
    1.242_660_947_388_078_438_6e-3,
    2.711_555_568_743_487_578_15e-5,
    2.010_334_399_292_288_132_65e-7,
];
#[allow(clippy::excessive_precision)]
const F: [f64; 8] = [
    1.0,
    5.998_322_065_558_879_376_9e-1,
    1.369_298_809_227_358_053_1e-1,
    1.487_536_129_085_061_485_25e-2,
    7.868_691_311_456_132_591e-4,
    1.846_318_317_510_054_681_8e-5,
    1.421_511_758_316_445_888_7e-7,
    2.044_263_103_389_939_785_64e-15,
];

#[inline]
fn rational(num: &[f64; 8], den: &[f64; 8], r: f64) -> f64 {
    let horner = |c: &[f64; 8]| c.iter().rev().fold(0.0, |acc, &k| acc * r + k);
    horner(num) / horner(den)
}

/// Quantile function of the standard normal distribution.
pub fn inv_normal_cdf(p: f64) -> Result<f64, CltError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(CltError::OutOfDomain {
            what: "probability",
            value: p,
        });
    }
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        return Ok(q * rational(&A, &B, r));
    }
    let tail = if q < 0.0 { p } else { 1.0 - p };
    let r = (-tail.ln()).sqrt();
    let z = if r <= 5.0 {
        rational(&C, &D, r - 1.6)
    } else {
        rational(&E, &F, r - 5.0)
    };
    Ok(if q < 0.0 { -z } else { z })
}

fn require_positive(which: &'static str, value: f64) -> Result<f64, CltError> {
    if value > 0.0 {
        Ok(value)
    } else {
        Err(CltError::DegenerateMeans { which, value })
    }
}

const HIGH_CV: f64 = 10.0;

/// Variance of one population's ratio estimator `x/y` and whether any
/// coefficient of variation exceeded the warning threshold.
fn ratio_variance(
    mx: f64,
    my: f64,
    sd_x: f64,
    sd_y: f64,
    corr: f64,
    names: (&'static str, &'static str),
) -> Result<(f64, f64, bool), CltError> {
    let mx = require_positive(names.0, mx)?;
    let my = require_positive(names.1, my)?;
    let cv_x = sd_x / mx;
    let cv_y = sd_y / my;
    let ratio = mx / my;
    let v = ratio * ratio * (cv_x * cv_x + cv_y * cv_y - 2.0 * corr * cv_x * cv_y);
    Ok((v, ratio, cv_x > HIGH_CV || cv_y > HIGH_CV))
}

/// Asymptotic variance of `sqrt(n) * (estimate - truth)` together with a
/// flag raised when a coefficient of variation above 10 was involved.
pub(crate) fn variance_with_flag(
    kind: MetricKind,
    s: &MomentSummary,
) -> Result<(f64, bool), CltError> {
    let m = &s.means;
    match kind {
        MetricKind::SumDiff => Ok((
            s.sd_xa * s.sd_xa + s.sd_xb * s.sd_xb + 2.0 * m.mxa * m.mxb,
            false,
        )),
        MetricKind::SumRatio => {
            let mxa = require_positive("x_a", m.mxa)?;
            let mxb = require_positive("x_b", m.mxb)?;
            let (cv_a, cv_b) = (s.sd_xa / mxa, s.sd_xb / mxb);
            let ratio = mxb / mxa;
            Ok((
                ratio * ratio * (cv_a * cv_a + cv_b * cv_b + 2.0),
                cv_a > HIGH_CV || cv_b > HIGH_CV,
            ))
        }
        MetricKind::RatioDiff | MetricKind::RatioOfRatios => {
            let (va, ra, high_a) =
                ratio_variance(m.mxa, m.mya, s.sd_xa, s.sd_ya, s.corr_a, ("x_a", "y_a"))?;
            let (vb, rb, high_b) =
                ratio_variance(m.mxb, m.myb, s.sd_xb, s.sd_yb, s.corr_b, ("x_b", "y_b"))?;
            let v = if kind == MetricKind::RatioDiff {
                va + vb
            } else {
                let rel = rb / ra;
                rel * rel * (va / (ra * ra) + vb / (rb * rb))
            };
            Ok((v, high_a || high_b))
        }
    }
}

/// Asymptotic variance of `sqrt(n) * (estimate - truth)` for `kind`, with the
/// summary's estimates plugged into the closed-form expression.
pub fn asymptotic_variance(kind: MetricKind, s: &MomentSummary) -> Result<f64, CltError> {
    variance_with_flag(kind, s).map(|(v, _)| v)
}

pub fn clt_ci(kind: MetricKind, s: &MomentSummary, level: f64) -> Result<CiReport, CltError> {
    if s.n < 2 {
        return Err(CltError::InsufficientUsers { n: s.n });
    }
    let multiplier = two_sided_multiplier(level)?;
    let (variance, high_cv) = variance_with_flag(kind, s)?;
    let estimate = evaluate_metric(kind, &s.means);
    // Rounding can push a variance that is exactly zero in theory below it.
    let sigma = (variance.max(0.0) / s.n as f64).sqrt();
    let half = multiplier * sigma;

    let mut flags = s.flags.clone();
    if high_cv {
        flags.push(Flag::HighCoefficientOfVariation);
    }
    if kind.hits_zero_denominator(&s.means) {
        flags.push(Flag::ZeroDenominator);
    }
    Ok(CiReport {
        kind,
        estimate,
        lo: estimate - half,
        hi: estimate + half,
        level,
        n: s.n,
        method: Method::Clt,
        m_replicates: None,
        seed: None,
        flags,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::MeanVector;
    use proptest::prelude::*;

    fn summary(means: [f64; 4], sds: [f64; 4], corr: (f64, f64), n: u64) -> MomentSummary {
        MomentSummary {
            n,
            means: MeanVector::from_array(means),
            sd_xa: sds[0],
            sd_ya: sds[1],
            sd_xb: sds[2],
            sd_yb: sds[3],
            corr_a: corr.0,
            corr_b: corr.1,
            flags: vec![],
        }
    }

    #[test]
    fn inv_normal_cdf_reference_values() {
        // 40-digit normal quantiles evaluated at the exact binary value of `p`.
        let cases = [
            (0.5, 0.0),
            (0.975, 1.959_963_984_540_053_9),
            (0.025, -1.959_963_984_540_054_2),
            (0.9, 1.281_551_565_544_600_5),
            (0.995, 2.575_829_303_548_900_4),
            (0.3, -0.524_400_512_708_040_8),
            (0.02425, -1.972_961_051_311_884_8),
            (0.999999, 4.753_424_308_817_088),
            (1e-10, -6.361_340_902_404_056),
        ];
        for (p, z) in cases {
            let got = inv_normal_cdf(p).unwrap();
            assert!((got - z).abs() < 1e-12, "p={p}: {got} vs {z}");
        }
    }

    #[test]
    fn inv_normal_cdf_domain() {
        for p in [0.0, 1.0, -0.1, 1.5, f64::NAN] {
            assert!(matches!(
                inv_normal_cdf(p),
                Err(CltError::OutOfDomain { .. })
            ));
        }
    }

    #[test]
    fn sum_diff_variance() {
        let v = 0.75f64.sqrt();
        let s = summary([0.5, 0.0, 0.5, 0.0], [v, 0.0, v, 0.0], (0.0, 0.0), 10);
        let got = asymptotic_variance(MetricKind::SumDiff, &s).unwrap();
        assert!((got - 2.0).abs() < 1e-12);
    }

    #[test]
    fn sum_ratio_variance() {
        let s = summary([1.0, 0.0, 1.0, 0.0], [1.0, 0.0, 1.0, 0.0], (0.0, 0.0), 10);
        assert!((asymptotic_variance(MetricKind::SumRatio, &s).unwrap() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn ratio_diff_variance() {
        // r = 0.05 with cv_x = 2, cv_y = 1, rho = 0.5 in both populations.
        let (mx, my) = (1.0, 20.0);
        let s = summary(
            [mx, my, mx, my],
            [2.0 * mx, my, 2.0 * mx, my],
            (0.5, 0.5),
            10,
        );
        let got = asymptotic_variance(MetricKind::RatioDiff, &s).unwrap();
        assert!((got - 0.015).abs() < 1e-15);
        // relative: (1)^2 [0.0075/0.0025 + 0.0075/0.0025] = 6
        let rel = asymptotic_variance(MetricKind::RatioOfRatios, &s).unwrap();
        assert!((rel - 6.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_means_are_errors() {
        let s = summary([0.0, 1.0, 1.0, 1.0], [1.0; 4], (0.0, 0.0), 10);
        assert!(asymptotic_variance(MetricKind::SumDiff, &s).is_ok());
        for kind in [MetricKind::SumRatio, MetricKind::RatioDiff, MetricKind::RatioOfRatios] {
            assert!(matches!(
                asymptotic_variance(kind, &s),
                Err(CltError::DegenerateMeans { which: "x_a", .. })
            ));
        }
        let s = summary([1.0, 1.0, 1.0, 0.0], [1.0; 4], (0.0, 0.0), 10);
        assert!(asymptotic_variance(MetricKind::SumRatio, &s).is_ok());
        assert!(matches!(
            asymptotic_variance(MetricKind::RatioDiff, &s),
            Err(CltError::DegenerateMeans { which: "y_b", .. })
        ));
    }

    #[test]
    fn clt_ci_sum_diff_example() {
        let v = 0.75f64.sqrt();
        let s = summary([0.5, 0.0, 0.5, 0.0], [v, 0.0, v, 0.0], (0.0, 0.0), 20_000);
        let ci = clt_ci(MetricKind::SumDiff, &s, 0.95).unwrap();
        assert_eq!(ci.estimate, 0.0);
        let expected = 1.959_963_984_540_054 * (2.0f64 / 20_000.0).sqrt();
        assert!((ci.hi - expected).abs() < 1e-12);
        assert!((ci.lo + expected).abs() < 1e-12);
        assert!((ci.hi - 0.0196).abs() < 1e-4);
        assert_eq!(ci.method, Method::Clt);
        assert_eq!(ci.n, 20_000);
    }

    #[test]
    fn clt_ci_zero_variance_is_a_point() {
        let s = summary([1.0, 2.0, 1.0, 2.0], [0.0; 4], (0.0, 0.0), 100);
        for kind in [MetricKind::RatioDiff, MetricKind::RatioOfRatios] {
            let ci = clt_ci(kind, &s, 0.95).unwrap();
            assert_eq!(ci.lo, ci.estimate);
            assert_eq!(ci.hi, ci.estimate);
        }
    }

    #[test]
    fn clt_ci_rejects_bad_level_and_small_n() {
        let s = summary([1.0; 4], [1.0; 4], (0.0, 0.0), 100);
        assert!(clt_ci(MetricKind::SumDiff, &s, 1.0).is_err());
        assert!(clt_ci(MetricKind::SumDiff, &s, 0.0).is_err());
        let s = summary([1.0; 4], [1.0; 4], (0.0, 0.0), 1);
        assert!(matches!(
            clt_ci(MetricKind::SumDiff, &s, 0.9),
            Err(CltError::InsufficientUsers { n: 1 })
        ));
    }

    #[test]
    fn high_cv_is_flagged() {
        let s = summary([0.01, 1.0, 0.01, 1.0], [0.5, 1.0, 0.5, 1.0], (0.1, 0.1), 100);
        let ci = clt_ci(MetricKind::SumRatio, &s, 0.9).unwrap();
        assert!(ci.flags.contains(&Flag::HighCoefficientOfVariation));
    }

    proptest! {
        #[test]
        fn inv_normal_cdf_is_antisymmetric(p in 1e-12..0.5f64) {
            let lo = inv_normal_cdf(p).unwrap();
            let hi = inv_normal_cdf(1.0 - p).unwrap();
            // 1 - p is itself rounded, so compare at the resolution of p
            prop_assert!((lo + hi).abs() < 1e-9);
        }

        #[test]
        fn intervals_nest_with_level(
            q1 in 0.01..0.99f64, q2 in 0.01..0.99f64,
            means in prop::array::uniform4(0.1..10.0f64),
            sds in prop::array::uniform4(0.0..10.0f64),
            ca in -1.0..1.0f64, cb in -1.0..1.0f64, k in 0usize..4,
        ) {
            prop_assume!(q1 < q2);
            let s = summary(means, sds, (ca, cb), 1000);
            let kind = MetricKind::ALL[k];
            let small = clt_ci(kind, &s, q1).unwrap();
            let big = clt_ci(kind, &s, q2).unwrap();
            prop_assert!(big.lo <= small.lo && small.hi <= big.hi);
            prop_assert!(small.lo <= small.estimate && small.estimate <= small.hi);
        }

        #[test]
        fn sum_diff_variance_is_symmetric(
            means in prop::array::uniform4(0.0..10.0f64),
            sds in prop::array::uniform4(0.0..10.0f64),
        ) {
            let s = summary(means, sds, (0.0, 0.0), 100);
            let swapped = summary([means[2], means[3], means[0], means[1]], [sds[2], sds[3], sds[0], sds[1]], (0.0, 0.0), 100);
            let a = clt_ci(MetricKind::SumDiff, &s, 0.9).unwrap();
            let b = clt_ci(MetricKind::SumDiff, &swapped, 0.9).unwrap();
            prop_assert_eq!(a.estimate, -b.estimate);
            prop_assert!((a.half_width() - b.half_width()).abs() <= 1e-12 * (1.0 + a.half_width()));
        }
    }
}

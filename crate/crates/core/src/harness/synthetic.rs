//! Synthetic user populations with non-negative count metrics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Gamma, Geometric, Poisson};
use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::keyed::user_key;

/// Law of a non-negative per-user count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "kebab-case")]
pub enum CountLaw {
    Poisson { lambda: f64 },
    /// Zero with probability `zero_prob`, otherwise Poisson(`lambda`).
    ZeroInflatedPoisson { zero_prob: f64, lambda: f64 },
    /// `1 + G` with `G` geometric on {0, 1, ...}, so the support starts at 1.
    ShiftedGeometric { mean: f64 },
    Constant { value: f64 },
}

impl CountLaw {
    pub fn mean(&self) -> f64 {
        match *self {
            CountLaw::Poisson { lambda } => lambda,
            CountLaw::ZeroInflatedPoisson { zero_prob, lambda } => (1.0 - zero_prob) * lambda,
            CountLaw::ShiftedGeometric { mean } => mean,
            CountLaw::Constant { value } => value,
        }
    }

    pub fn variance(&self) -> f64 {
        match *self {
            CountLaw::Poisson { lambda } => lambda,
            CountLaw::ZeroInflatedPoisson { zero_prob, lambda } => {
                (1.0 - zero_prob) * lambda * (1.0 + zero_prob * lambda)
            }
            CountLaw::ShiftedGeometric { mean } => {
                let p = 1.0 / mean;
                (1.0 - p) / (p * p)
            }
            CountLaw::Constant { .. } => 0.0,
        }
    }

    fn validate(&self) -> Result<(), HarnessError> {
        let ok = match *self {
            CountLaw::Poisson { lambda } => lambda > 0.0 && lambda.is_finite(),
            CountLaw::ZeroInflatedPoisson { zero_prob, lambda } => {
                (0.0..1.0).contains(&zero_prob) && lambda > 0.0 && lambda.is_finite()
            }
            CountLaw::ShiftedGeometric { mean } => mean >= 1.0 && mean.is_finite(),
            CountLaw::Constant { value } => value >= 0.0 && value.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(HarnessError::InvalidSpec(format!("{self:?}")))
        }
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        match *self {
            CountLaw::Poisson { lambda } => Poisson::new(lambda).expect("validated").sample(rng),
            CountLaw::ZeroInflatedPoisson { zero_prob, lambda } => {
                if rng.random::<f64>() < zero_prob {
                    0.0
                } else {
                    Poisson::new(lambda).expect("validated").sample(rng)
                }
            }
            CountLaw::ShiftedGeometric { mean } => {
                if mean == 1.0 {
                    1.0
                } else {
                    1.0 + Geometric::new(1.0 / mean).expect("validated").sample(rng) as f64
                }
            }
            CountLaw::Constant { value } => value,
        }
    }
}

/// Law of the numerator metric, possibly coupled to the denominator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "coupling", rename_all = "kebab-case")]
pub enum NumeratorLaw {
    /// Drawn independently of the denominator.
    Independent(CountLaw),
    /// Clicks out of displays: `x ~ Binomial(y, min(1, ctr * h))` where the
    /// per-user propensity `h ~ Gamma(shape, 1 / shape)` has mean 1. Without a
    /// shape every user has propensity 1 and clicks are display-level
    /// Bernoulli trials.
    ClickThrough {
        ctr: f64,
        heterogeneity_shape: Option<f64>,
    },
}

/// Description of a synthetic population.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticPopulationSpec {
    pub law_x: NumeratorLaw,
    pub law_y: CountLaw,
    pub n_users: usize,
}

impl Default for SyntheticPopulationSpec {
    /// Search-log-like population: about 4.3 displays per user, 4.4% CTR and
    /// a strongly overdispersed click propensity.
    fn default() -> Self {
        Self {
            law_x: NumeratorLaw::ClickThrough {
                ctr: 0.044,
                heterogeneity_shape: Some(0.25),
            },
            law_y: CountLaw::ShiftedGeometric { mean: 4.3 },
            n_users: 50_000,
        }
    }
}

/// A user with aggregated metrics and a precomputed hash key.
#[derive(Debug, Clone, PartialEq)]
pub struct UserRecord {
    pub user_id: String,
    pub key: u64,
    pub x: f64,
    pub y: f64,
}

impl UserRecord {
    pub fn new(user_id: impl Into<String>, x: f64, y: f64) -> Self {
        let user_id = user_id.into();
        Self {
            key: user_key(&user_id),
            user_id,
            x,
            y,
        }
    }
}

impl SyntheticPopulationSpec {
    pub fn validate(&self) -> Result<(), HarnessError> {
        self.law_y.validate()?;
        match self.law_x {
            NumeratorLaw::Independent(law) => law.validate()?,
            NumeratorLaw::ClickThrough {
                ctr,
                heterogeneity_shape,
            } => {
                if !(0.0..=1.0).contains(&ctr) {
                    return Err(HarnessError::InvalidSpec(format!("ctr {ctr} outside [0, 1]")));
                }
                if let Some(shape) = heterogeneity_shape {
                    if !(shape > 0.0 && shape.is_finite()) {
                        return Err(HarnessError::InvalidSpec(format!(
                            "heterogeneity shape {shape} must be > 0"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Draw the population. Users are named `u0`, `u1`, ... in order.
    pub fn generate(&self, seed: u64) -> Result<Vec<UserRecord>, HarnessError> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let propensity = match self.law_x {
            NumeratorLaw::ClickThrough {
                heterogeneity_shape: Some(shape),
                ..
            } => Some(Gamma::new(shape, 1.0 / shape).expect("validated")),
            _ => None,
        };
        let users = (0..self.n_users)
            .map(|i| {
                let y = self.law_y.sample(&mut rng);
                let x = match self.law_x {
                    NumeratorLaw::Independent(law) => law.sample(&mut rng),
                    NumeratorLaw::ClickThrough { ctr, .. } => {
                        let h = propensity.as_ref().map_or(1.0, |g| g.sample(&mut rng));
                        let p = (ctr * h).min(1.0);
                        Binomial::new(y as u64, p).expect("p in [0, 1]").sample(&mut rng) as f64
                    }
                };
                UserRecord::new(format!("u{i}"), x, y)
            })
            .collect();
        Ok(users)
    }
}

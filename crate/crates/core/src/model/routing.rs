use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouteMode {
    /// Draw `c_i ~ Categorical(p_i)`.
    Sample,
    /// Deterministic: most probable module, ties to the lowest index.
    Argmax,
}

impl RouteMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RouteMode::Sample => "sample",
            RouteMode::Argmax => "argmax",
        }
    }
}

/// Chooses a module index from a probability vector.
///
/// Sampling uses the inverse CDF over the given order with exactly one
/// uniform variate drawn from `rng`, so the number of draws per decision is
/// fixed.
pub fn sample_choice<R: Rng + ?Sized>(p: &[f64], mode: RouteMode, rng: &mut R) -> Result<usize> {
    let total: f64 = p.iter().sum();
    if p.is_empty() || (total - 1.0).abs() > 1e-6 || p.iter().any(|v| v.is_nan() || *v < 0.0) {
        return Err(Error::Internal(format!("not a probability vector: {p:?}")));
    }
    match mode {
        RouteMode::Argmax => {
            let mut best = 0;
            for (j, &v) in p.iter().enumerate() {
                if v > p[best] {
                    best = j;
                }
            }
            Ok(best)
        }
        RouteMode::Sample => {
            let u: f64 = rng.gen();
            let mut cumulative = 0.0;
            let mut last_positive = 0;
            for (j, &v) in p.iter().enumerate() {
                if v > 0.0 {
                    last_positive = j;
                }
                cumulative += v;
                if u < cumulative {
                    return Ok(j);
                }
            }
            // Rounding left the cumulative sum just under u.
            Ok(last_positive)
        }
    }
}

//! Policy preference costs and train-time preference distributions.
//!
//! A preference adds a cost `C(p, c, γ)` to the controller's reward, and the
//! same `γ` is fed to the controller as an input so the policy can be steered
//! at test time. Three costs are provided:
//!
//! * glimpse cost, `−γ Σ_i β̂_{i,c_i}` per example, with `β̂` the module
//!   parameter counts normalized by their per-metalayer maximum;
//! * batch entropy cost, `−γ Σ_i ‖(1/N) Σ_j p_i^{(j)}‖²`, one value per batch,
//!   largest when modules are used equally across the batch;
//! * per-example entropy cost, `−γ Σ_i ‖p_i‖²`, the `N = 1` case applied to
//!   every example separately.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Trajectory;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreferenceKind {
    Glimpse,
    BatchEntropy,
    PerExampleEntropy,
}

impl PreferenceKind {
    pub fn is_entropy(self) -> bool {
        matches!(
            self,
            PreferenceKind::BatchEntropy | PreferenceKind::PerExampleEntropy
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GammaDistribution {
    Constant { value: f64 },
    Uniform { lo: f64, hi: f64 },
    LogUniform { lo: f64, hi: f64 },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaNormalization {
    /// `β / max_j β_{i,j}` within each metalayer.
    #[default]
    PerMetalayerMax,
    Raw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreferenceSpec {
    pub kind: PreferenceKind,
    pub distribution: GammaDistribution,
    /// Probability of drawing exactly `γ = 0` instead of sampling
    /// `distribution`.
    #[serde(default)]
    pub zero_mass: f64,
    #[serde(default)]
    pub beta_normalization: BetaNormalization,
}

impl PreferenceSpec {
    pub fn constant(kind: PreferenceKind, value: f64) -> Self {
        Self {
            kind,
            distribution: GammaDistribution::Constant { value },
            zero_mass: 0.0,
            beta_normalization: BetaNormalization::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.zero_mass) {
            return bad(format!("zero_mass {} outside [0, 1]", self.zero_mass));
        }
        match self.distribution {
            GammaDistribution::Constant { value } if !(value >= 0.0 && value.is_finite()) => bad(
                format!("constant preference {value} must be finite and ≥ 0"),
            ),
            GammaDistribution::Uniform { lo, hi } if !(lo >= 0.0 && lo <= hi && hi.is_finite()) => {
                bad(format!("uniform preference range [{lo}, {hi}] invalid"))
            }
            GammaDistribution::LogUniform { lo, hi }
                if !(lo > 0.0 && lo <= hi && hi.is_finite()) =>
            {
                bad(format!("log-uniform preference range [{lo}, {hi}] invalid"))
            }
            _ => Ok(()),
        }
    }
}

/// Checks a preference list: each spec valid, no kind repeated, at most one
/// entropy preference.
pub fn validate_preferences(prefs: &[PreferenceSpec]) -> Result<()> {
    for (i, p) in prefs.iter().enumerate() {
        p.validate()?;
        if prefs[..i].iter().any(|q| q.kind == p.kind) {
            return Err(Error::Config(format!(
                "preference {:?} listed twice",
                p.kind
            )));
        }
    }
    if prefs.iter().filter(|p| p.kind.is_entropy()).count() > 1 {
        return Err(Error::Config(
            "batch and per-example entropy preferences are mutually exclusive".into(),
        ));
    }
    Ok(())
}

/// One draw of `γ ~ Γ`.
pub fn sample_gamma<R: Rng + ?Sized>(spec: &PreferenceSpec, rng: &mut R) -> f64 {
    if spec.zero_mass > 0.0 && rng.gen::<f64>() < spec.zero_mass {
        return 0.0;
    }
    match spec.distribution {
        GammaDistribution::Constant { value } => value,
        GammaDistribution::Uniform { lo, hi } => lo + (hi - lo) * rng.gen::<f64>(),
        GammaDistribution::LogUniform { lo, hi } => {
            let (a, b) = (lo.ln(), hi.ln());
            (a + (b - a) * rng.gen::<f64>()).exp()
        }
    }
}

/// Normalized parameter-count table used by the glimpse cost.
pub fn normalized_betas(raw: &[Vec<usize>], norm: BetaNormalization) -> Vec<Vec<f64>> {
    raw.iter()
        .map(|row| {
            let scale = match norm {
                BetaNormalization::Raw => 1.0,
                BetaNormalization::PerMetalayerMax => {
                    row.iter().copied().max().filter(|&m| m > 0).unwrap_or(1) as f64
                }
            };
            row.iter().map(|&b| b as f64 / scale).collect()
        })
        .collect()
}

/// Glimpse cost of a single route.
pub fn route_glimpse_cost(choices: &[usize], betas: &[Vec<f64>], gamma: f64) -> f64 {
    -gamma
        * choices
            .iter()
            .zip(betas)
            .map(|(&c, row)| row[c])
            .sum::<f64>()
}

/// Per-example glimpse cost `−γ Σ_i β̂_{i,c_i}`. Independent of `p`.
pub fn glimpse_cost(trajectories: &[Trajectory], betas: &[Vec<f64>], gamma: f64) -> Vec<f64> {
    trajectories
        .iter()
        .map(|t| route_glimpse_cost(&t.choices, betas, gamma))
        .collect()
}

fn batch_mean(dists: &[&[Vec<f64>]], metalayer: usize) -> Vec<f64> {
    let n = dists.len() as f64;
    let mut mean = vec![0.0; dists[0][metalayer].len()];
    for d in dists {
        for (m, &v) in mean.iter_mut().zip(&d[metalayer]) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    mean
}

/// Batch entropy cost. `dists[j][i]` is example `j`'s distribution at
/// metalayer `i`. Returns 0 for an empty batch.
pub fn batch_entropy_cost(dists: &[&[Vec<f64>]], gamma: f64) -> f64 {
    if dists.is_empty() {
        return 0.0;
    }
    let layers = dists[0].len();
    -gamma
        * (0..layers)
            .map(|i| batch_mean(dists, i).iter().map(|m| m * m).sum::<f64>())
            .sum::<f64>()
}

/// `∂C₂/∂p_i^{(j)} = −γ (2/N) mean_i`, identical for every example `j`;
/// returned per metalayer.
pub fn batch_entropy_grad(dists: &[&[Vec<f64>]], gamma: f64) -> Vec<Vec<f64>> {
    if dists.is_empty() {
        return Vec::new();
    }
    let n = dists.len() as f64;
    (0..dists[0].len())
        .map(|i| {
            batch_mean(dists, i)
                .into_iter()
                .map(|m| -gamma * 2.0 / n * m)
                .collect()
        })
        .collect()
}

/// Per-example entropy cost `−γ Σ_i ‖p_i‖²`.
pub fn per_example_entropy_cost(dists: &[Vec<f64>], gamma: f64) -> f64 {
    -gamma * dists.iter().flatten().map(|p| p * p).sum::<f64>()
}

/// `∂/∂p_i = −2γ p_i`.
pub fn per_example_entropy_grad(dists: &[Vec<f64>], gamma: f64) -> Vec<Vec<f64>> {
    dists
        .iter()
        .map(|p| p.iter().map(|v| -2.0 * gamma * v).collect())
        .collect()
}

/// Components of the reward for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct RewardBreakdown {
    pub log_likelihood: Vec<f64>,
    pub glimpse_cost: Vec<f64>,
    /// Per-example entropy cost (zero unless that preference is active).
    pub example_entropy_cost: Vec<f64>,
    /// Batch-level entropy cost, broadcast into every example's total.
    pub batch_entropy_cost: f64,
    pub total: Vec<f64>,
}

impl RewardBreakdown {
    pub fn mean(values: &[f64]) -> f64 {
        if values.is_empty() {
            0.0
        } else {
            values.iter().sum::<f64>() / values.len() as f64
        }
    }

    pub fn mean_total(&self) -> f64 {
        Self::mean(&self.total)
    }

    pub fn mean_log_likelihood(&self) -> f64 {
        Self::mean(&self.log_likelihood)
    }

    pub fn mean_glimpse_cost(&self) -> f64 {
        Self::mean(&self.glimpse_cost)
    }

    /// Mean entropy cost per example: the batch cost plus the mean
    /// per-example cost (at most one of them is non-zero).
    pub fn mean_entropy_cost(&self) -> f64 {
        self.batch_entropy_cost + Self::mean(&self.example_entropy_cost)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::keyed_rng;
    use rand::Rng;

    fn traj(choices: Vec<usize>) -> Trajectory {
        Trajectory {
            choices,
            distributions: vec![],
            path_log_prob: 0.0,
            gamma: vec![],
        }
    }

    #[test]
    fn constant_zero() {
        let spec = PreferenceSpec::constant(PreferenceKind::Glimpse, 0.0);
        let mut rng = keyed_rng(0, 0);
        assert_eq!(sample_gamma(&spec, &mut rng), 0.0);
    }

    #[test]
    fn uniform_mean_within_three_sigma() {
        let spec = PreferenceSpec {
            kind: PreferenceKind::Glimpse,
            distribution: GammaDistribution::Uniform { lo: 0.0, hi: 1.0 },
            zero_mass: 0.0,
            beta_normalization: BetaNormalization::default(),
        };
        let mut rng = keyed_rng(12, 0);
        let n = 100_000;
        let mean = (0..n).map(|_| sample_gamma(&spec, &mut rng)).sum::<f64>() / n as f64;
        let se = (1.0f64 / 12.0 / n as f64).sqrt();
        assert!((mean - 0.5).abs() < 3.0 * se, "{mean}");
    }

    #[test]
    fn log_uniform_passes_ks() {
        let spec = PreferenceSpec {
            kind: PreferenceKind::Glimpse,
            distribution: GammaDistribution::LogUniform { lo: 1e-3, hi: 1.0 },
            zero_mass: 0.0,
            beta_normalization: BetaNormalization::default(),
        };
        let mut rng = keyed_rng(99, 1);
        let n = 20_000;
        let (a, b) = (1e-3f64.ln(), 0.0);
        let mut u: Vec<f64> = (0..n)
            .map(|_| (sample_gamma(&spec, &mut rng).ln() - a) / (b - a))
            .collect();
        u.sort_by(f64::total_cmp);
        let d = u
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let lo = i as f64 / n as f64;
                let hi = (i + 1) as f64 / n as f64;
                (v - lo).abs().max((hi - v).abs())
            })
            .fold(0.0, f64::max);
        let critical = 1.628 / (n as f64).sqrt(); // α = 0.01
        assert!(d < critical, "KS statistic {d} ≥ {critical}");
        assert!(u.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn zero_mass_fraction() {
        let spec = PreferenceSpec {
            kind: PreferenceKind::Glimpse,
            distribution: GammaDistribution::LogUniform { lo: 1e-3, hi: 1.0 },
            zero_mass: 0.1,
            beta_normalization: BetaNormalization::default(),
        };
        let mut rng = keyed_rng(5, 0);
        let n = 50_000;
        let zeros = (0..n)
            .filter(|_| sample_gamma(&spec, &mut rng) == 0.0)
            .count() as f64;
        let sigma = (n as f64 * 0.1 * 0.9).sqrt();
        assert!((zeros - 0.1 * n as f64).abs() < 3.0 * sigma);
    }

    #[test]
    fn spec_validation() {
        let mut spec = PreferenceSpec::constant(PreferenceKind::Glimpse, 0.0);
        spec.validate().unwrap();
        spec.distribution = GammaDistribution::LogUniform { lo: 0.0, hi: 1.0 };
        assert!(spec.validate().is_err());
        spec.distribution = GammaDistribution::Uniform { lo: 2.0, hi: 1.0 };
        assert!(spec.validate().is_err());
        let both = [
            PreferenceSpec::constant(PreferenceKind::BatchEntropy, 1.0),
            PreferenceSpec::constant(PreferenceKind::PerExampleEntropy, 1.0),
        ];
        assert!(validate_preferences(&both).is_err());
        let dup = [
            PreferenceSpec::constant(PreferenceKind::Glimpse, 1.0),
            PreferenceSpec::constant(PreferenceKind::Glimpse, 1.0),
        ];
        assert!(validate_preferences(&dup).is_err());
    }

    #[test]
    fn glimpse_cost_examples() {
        let betas = vec![vec![0.2, 1.0]];
        assert_eq!(glimpse_cost(&[traj(vec![1])], &betas, 0.0), vec![-0.0]);
        let c = glimpse_cost(&[traj(vec![1])], &betas, 0.5);
        assert!((c[0] + 0.5).abs() < 1e-12);
        let betas2 = vec![vec![0.2, 1.0], vec![0.2, 1.0]];
        let c = glimpse_cost(&[traj(vec![0, 0])], &betas2, 1.0);
        assert!((c[0] + 0.4).abs() < 1e-12);
    }

    #[test]
    fn beta_normalization() {
        let raw = vec![vec![12_900, 101_716], vec![10, 10]];
        let n = normalized_betas(&raw, BetaNormalization::PerMetalayerMax);
        assert_eq!(n[0][1], 1.0);
        assert!((n[0][0] - 12_900.0 / 101_716.0).abs() < 1e-15);
        assert_eq!(n[1], vec![1.0, 1.0]);
        assert_eq!(
            normalized_betas(&raw, BetaNormalization::Raw)[0][0],
            12_900.0
        );
    }

    #[test]
    fn batch_entropy_examples() {
        let a = vec![vec![1.0, 0.0]];
        let b = vec![vec![0.0, 1.0]];
        let g = 0.8;
        let c = batch_entropy_cost(&[&a, &b], g);
        assert!((c + 0.5 * g).abs() < 1e-12);

        // all one-hot on the same module: −γ·n
        let same = vec![vec![0.0, 1.0, 0.0], vec![1.0, 0.0]];
        let c = batch_entropy_cost(&[&same, &same, &same], g);
        assert!((c + g * 2.0).abs() < 1e-12);

        // uniform: −γ·n/m
        let m = 4;
        let uniform = vec![vec![0.25; m]; 3];
        let c = batch_entropy_cost(&[&uniform, &uniform], g);
        assert!((c + g * 3.0 / m as f64).abs() < 1e-12);
    }

    #[test]
    fn per_example_entropy_examples() {
        let g = 1.3;
        assert!((per_example_entropy_cost(&[vec![0.0, 1.0]], g) + g).abs() < 1e-12);
        assert!((per_example_entropy_cost(&[vec![0.2; 5]], g) + g / 5.0).abs() < 1e-12);
        let mut rng = keyed_rng(3, 3);
        for _ in 0..20 {
            let raw: Vec<f64> = (0..3).map(|_| rng.gen_range(0.01..1.0)).collect();
            let s: f64 = raw.iter().sum();
            let p = vec![raw.iter().map(|v| v / s).collect::<Vec<_>>()];
            let one = batch_entropy_cost(&[&p], g);
            assert!((one - per_example_entropy_cost(&p, g)).abs() < 1e-15);
        }
    }

    #[test]
    fn costs_vanish_at_zero_gamma() {
        let p = vec![vec![0.3, 0.7]];
        assert_eq!(batch_entropy_cost(&[&p, &p], 0.0), 0.0);
        assert_eq!(per_example_entropy_cost(&p, 0.0), 0.0);
        assert_eq!(
            glimpse_cost(&[traj(vec![1])], &[vec![0.5, 1.0]], 0.0)[0],
            0.0
        );
    }

    #[test]
    fn batch_entropy_gradient_matches_finite_differences() {
        let mut rng = keyed_rng(8, 0);
        let mut dists: Vec<Vec<Vec<f64>>> = (0..4)
            .map(|_| {
                (0..2)
                    .map(|_| (0..3).map(|_| rng.gen_range(0.0..1.0)).collect())
                    .collect()
            })
            .collect();
        let g = 0.9;
        let view = |d: &Vec<Vec<Vec<f64>>>| {
            batch_entropy_cost(&d.iter().map(Vec::as_slice).collect::<Vec<_>>(), g)
        };
        let grad = batch_entropy_grad(&dists.iter().map(Vec::as_slice).collect::<Vec<_>>(), g);
        let h = 1e-6;
        for j in 0..4 {
            for i in 0..2 {
                for k in 0..3 {
                    let orig = dists[j][i][k];
                    dists[j][i][k] = orig + h;
                    let plus = view(&dists);
                    dists[j][i][k] = orig - h;
                    let minus = view(&dists);
                    dists[j][i][k] = orig;
                    let fd = (plus - minus) / (2.0 * h);
                    assert!((fd - grad[i][k]).abs() < 1e-8, "{fd} vs {}", grad[i][k]);
                }
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn batch_entropy_is_permutation_invariant(
            seed in 0u64..1000,
            n in 1usize..6,
        ) {
            let mut rng = keyed_rng(seed, 0);
            let dists: Vec<Vec<Vec<f64>>> = (0..n)
                .map(|_| {
                    let raw: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..1.0)).collect();
                    let s: f64 = raw.iter().sum();
                    vec![raw.iter().map(|v| v / s).collect()]
                })
                .collect();
            let refs: Vec<&[Vec<f64>]> = dists.iter().map(Vec::as_slice).collect();
            let base = batch_entropy_cost(&refs, 0.7);
            let mut rev = refs.clone();
            rev.reverse();
            proptest::prop_assert!((batch_entropy_cost(&rev, 0.7) - base).abs() < 1e-14);
            // relabel modules consistently across the batch
            let relabeled: Vec<Vec<Vec<f64>>> = dists
                .iter()
                .map(|d| vec![vec![d[0][2], d[0][0], d[0][1]]])
                .collect();
            let rrefs: Vec<&[Vec<f64>]> = relabeled.iter().map(Vec::as_slice).collect();
            proptest::prop_assert!((batch_entropy_cost(&rrefs, 0.7) - base).abs() < 1e-14);
            // never better than the uniform optimum −γ/m
            proptest::prop_assert!(base <= -0.7 / 3.0 + 1e-12);
        }

        #[test]
        fn uniform_mean_is_the_strict_maximum(seed in 0u64..1000) {
            let mut rng = keyed_rng(seed, 1);
            let m = 4;
            let g = 1.1;
            // a batch whose mean is exactly uniform
            let a: Vec<f64> = vec![0.1, 0.4, 0.3, 0.2];
            let b: Vec<f64> = a.iter().map(|v| 0.5 - v).collect();
            let base = batch_entropy_cost(&[&[a.clone()][..], &[b.clone()][..]], g);
            proptest::prop_assert!((base + g / m as f64).abs() < 1e-12);
            // perturb one example's distribution, keeping it normalized
            let (i, k) = (rng.gen_range(0..m), rng.gen_range(0..m));
            proptest::prop_assume!(i != k);
            let eps = rng.gen_range(1e-4..0.05);
            let mut a2 = a;
            a2[i] += eps;
            a2[k] -= eps;
            let perturbed = batch_entropy_cost(&[&[a2][..], &[b][..]], g);
            proptest::prop_assert!(perturbed < base);
        }

        #[test]
        fn glimpse_cost_is_monotone(
            b0 in 0.0f64..1.0, b1 in 0.0f64..1.0, gamma in 0.0f64..5.0
        ) {
            let betas = vec![vec![b0, b1]];
            let (lo, hi) = if b0 <= b1 { (0, 1) } else { (1, 0) };
            let c_lo = route_glimpse_cost(&[lo], &betas, gamma);
            let c_hi = route_glimpse_cost(&[hi], &betas, gamma);
            proptest::prop_assert!(c_hi <= c_lo);
        }
    }
}

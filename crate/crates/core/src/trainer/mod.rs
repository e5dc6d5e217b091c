//! Joint training of modules and controller by REINFORCE on the
//! preference-augmented reward, an exact enumeration oracle, and a plain
//! supervised trainer used as a reference for single-module models.

mod exact;
mod reinforce;
mod supervised;

pub use exact::{
    all_routes, enumerate_exact_objective, jensen_pair, route_outcomes, ExactObjective,
    RouteOutcome, MAX_ROUTES,
};
pub use reinforce::{batch_reward, reinforce_gradient, ActiveCosts, GradientEstimate};
pub use supervised::SupervisedTrainer;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{epoch_batches, Batch, LabeledDataset};
use crate::error::{Error, Result};
use crate::model::Composer;
use crate::preferences::{sample_gamma, validate_preferences, PreferenceSpec, RewardBreakdown};
use crate::rng::{derive_seed, keyed_rng, purpose};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BaselineConfig {
    #[default]
    None,
    MovingAverage {
        decay: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Step size of the ascent update. Zero leaves the model untouched.
    pub learning_rate: f64,
    pub steps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub baseline: BaselineConfig,
    /// One entry per controller preference input, in input order.
    #[serde(default)]
    pub preferences: Vec<PreferenceSpec>,
    /// Evaluation cadence in steps; 0 disables periodic evaluation.
    #[serde(default)]
    pub eval_every: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate {} must be finite and non-negative",
                self.learning_rate
            )));
        }
        if let BaselineConfig::MovingAverage { decay } = self.baseline {
            if !(0.0..1.0).contains(&decay) {
                return Err(Error::Config(format!(
                    "baseline decay {decay} outside [0, 1)"
                )));
            }
        }
        validate_preferences(&self.preferences)
    }
}

/// Moving-average reward baseline. Before the first update it is 0; the first
/// update sets it to that batch's mean reward.
#[derive(Clone, Debug, PartialEq)]
pub struct Baseline {
    decay: Option<f64>,
    value: Option<f64>,
}

impl Baseline {
    pub fn new(config: BaselineConfig) -> Self {
        let decay = match config {
            BaselineConfig::None => None,
            BaselineConfig::MovingAverage { decay } => Some(decay),
        };
        Self { decay, value: None }
    }

    pub fn value(&self) -> f64 {
        self.value.unwrap_or(0.0)
    }

    pub fn update(&mut self, mean_reward: f64) {
        if let Some(d) = self.decay {
            self.value = Some(match self.value {
                None => mean_reward,
                Some(v) => d * v + (1.0 - d) * mean_reward,
            });
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub glimpse: f64,
    pub entropy: f64,
}

/// Summary of one training step; serialized as one JSON line of the run log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    /// Mean total reward.
    pub reward: f64,
    /// Mean log-likelihood.
    pub loglik: f64,
    /// Mean costs; `reward = loglik + glimpse + entropy`.
    pub costs: CostReport,
    pub gamma: Vec<f64>,
    pub batch_accuracy: f64,
}

impl StepReport {
    pub(crate) fn new(
        step: usize,
        rewards: &RewardBreakdown,
        gamma: Vec<f64>,
        logits: &Tensor,
        labels: &[usize],
    ) -> Self {
        Self {
            step,
            reward: rewards.mean_total(),
            loglik: rewards.mean_log_likelihood(),
            costs: CostReport {
                glimpse: rewards.mean_glimpse_cost(),
                entropy: rewards.mean_entropy_cost(),
            },
            gamma,
            batch_accuracy: accuracy(logits, labels),
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(r, &y)| argmax(logits.row_slice(r)) == y)
        .count();
    hits as f64 / labels.len() as f64
}

pub(crate) fn check_finite(step: usize, rewards: &RewardBreakdown) -> Result<()> {
    if let Some(j) = rewards.total.iter().position(|r| !r.is_finite()) {
        return Err(Error::Divergence(format!(
            "step {step}: reward of example {j} is {} (log-likelihood {})",
            rewards.total[j], rewards.log_likelihood[j]
        )));
    }
    Ok(())
}

/// Drives `step_fn` over shuffled epochs until `steps` reports exist.
pub(crate) fn drive<F, H>(
    config: &TrainConfig,
    dataset: &LabeledDataset,
    model: &mut Composer,
    mut step_fn: F,
    mut on_step: H,
) -> Result<Vec<StepReport>>
where
    F: FnMut(&mut Composer, &Batch) -> Result<StepReport>,
    H: FnMut(&StepReport, &Composer) -> Result<()>,
{
    let mut reports = Vec::with_capacity(config.steps);
    let mut epoch = 0u64;
    while reports.len() < config.steps {
        let seed = derive_seed(config.seed, &[purpose::SHUFFLE, epoch]);
        for indices in epoch_batches(dataset.len(), config.batch_size, seed)? {
            if reports.len() == config.steps {
                break;
            }
            let report = step_fn(model, &dataset.batch(&indices)?)?;
            on_step(&report, model)?;
            reports.push(report);
        }
        epoch += 1;
    }
    Ok(reports)
}

/// REINFORCE trainer state: configuration, step counter and baseline.
#[derive(Clone, Debug)]
pub struct Trainer {
    config: TrainConfig,
    baseline: Baseline,
    step: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            baseline: Baseline::new(config.baseline),
            config,
            step: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn baseline(&self) -> &Baseline {
        &self.baseline
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// The preference strengths drawn for a given step: one draw per
    /// preference per batch.
    pub fn gamma_for_step(&self, step: usize) -> Vec<f64> {
        let mut rng = keyed_rng(
            derive_seed(self.config.seed, &[purpose::GAMMA, step as u64]),
            0,
        );
        self.config
            .preferences
            .iter()
            .map(|p| sample_gamma(p, &mut rng))
            .collect()
    }

    /// One ascent step on `batch`.
    pub fn train_step(&mut self, model: &mut Composer, batch: &Batch) -> Result<StepReport> {
        if model.config().controller.gamma_inputs != self.config.preferences.len() {
            return Err(Error::Config(format!(
                "controller takes {} preference inputs, training config lists {} preferences",
                model.config().controller.gamma_inputs,
                self.config.preferences.len()
            )));
        }
        let step = self.step;
        let gamma = self.gamma_for_step(step);
        let costs = ActiveCosts::new(model, &self.config.preferences, &gamma)?;
        let route_seed = derive_seed(self.config.seed, &[purpose::ROUTE, step as u64]);
        let est = reinforce_gradient(
            model,
            batch,
            &gamma,
            &costs,
            self.baseline.value(),
            route_seed,
        )?;
        check_finite(step, &est.rewards)?;
        if !est.grads.is_finite() {
            return Err(Error::Divergence(format!(
                "step {step}: non-finite gradient"
            )));
        }
        if self.config.learning_rate > 0.0 {
            let params = model.params_mut();
            params.accumulate(&est.grads);
            params.sgd_step(self.config.learning_rate)?;
        }
        self.baseline.update(est.rewards.mean_total());
        self.step += 1;
        Ok(StepReport::new(
            step,
            &est.rewards,
            gamma,
            &est.logits,
            &batch.labels,
        ))
    }

    /// Runs `config.steps` steps over shuffled epochs of `dataset`, calling
    /// `on_step` after each.
    pub fn train_loop<H>(
        &mut self,
        model: &mut Composer,
        dataset: &LabeledDataset,
        on_step: H,
    ) -> Result<Vec<StepReport>>
    where
        H: FnMut(&StepReport, &Composer) -> Result<()>,
    {
        let config = self.config.clone();
        drive(
            &config,
            dataset,
            model,
            |m, b| self.train_step(m, b),
            on_step,
        )
    }
}

/// Append-only JSON-lines log of step reports.
pub struct RunLog {
    path: PathBuf,
    writer: BufWriter<File>,
}

impl RunLog {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            writer: BufWriter::new(file),
            path,
        })
    }

    pub fn append(&mut self, report: &StepReport) -> Result<()> {
        writeln!(self.writer, "{}", report.to_json_line()).map_err(|e| Error::io(&self.path, e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.writer.flush().map_err(|e| Error::io(&self.path, e))
    }
}

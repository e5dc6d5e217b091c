//! Plain backpropagation along one fixed route, with no controller.

use rayon::prelude::*;

use super::reinforce::chunked_backward;
use super::{check_finite, drive, StepReport, TrainConfig};
use crate::data::{Batch, LabeledDataset};
use crate::error::{Error, Result};
use crate::model::Composer;
use crate::preferences::RewardBreakdown;
use crate::tensor::Tensor;

/// Maximizes mean log-likelihood of the route that picks module 0 in every
/// metalayer. Shares batching, sharding and update rules with the REINFORCE
/// trainer, so on single-module models the two produce identical traces.
#[derive(Clone, Debug)]
pub struct SupervisedTrainer {
    config: TrainConfig,
    step: usize,
}

impl SupervisedTrainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if !config.preferences.is_empty() {
            return Err(Error::Config(
                "the supervised trainer takes no preferences".into(),
            ));
        }
        Ok(Self { config, step: 0 })
    }

    pub fn train_step(&mut self, model: &mut Composer, batch: &Batch) -> Result<StepReport> {
        let n = batch.len();
        if n == 0 {
            return Err(Error::Usage("empty batch".into()));
        }
        let route = vec![0; model.num_metalayers()];
        let traced = (0..n)
            .into_par_iter()
            .map(|j| {
                let (mut tape, logits) = model.fixed_path_on_tape(batch.input(j), &route)?;
                let ll = tape.log_softmax_pick(logits, &[batch.labels[j]])?;
                Ok((tape, logits, ll))
            })
            .collect::<Result<Vec<_>>>()?;

        let classes = model.config().num_classes;
        let mut logits = Vec::with_capacity(n * classes);
        let mut log_likelihood = Vec::with_capacity(n);
        for (tape, out, ll) in &traced {
            logits.extend_from_slice(tape.value(*out).data());
            log_likelihood.push(tape.value(*ll).data()[0]);
        }
        let rewards = RewardBreakdown {
            total: log_likelihood.clone(),
            glimpse_cost: vec![0.0; n],
            example_entropy_cost: vec![0.0; n],
            batch_entropy_cost: 0.0,
            log_likelihood,
        };
        check_finite(self.step, &rewards)?;

        let items = traced
            .into_iter()
            .map(|(tape, _, ll)| (tape, vec![(ll, Tensor::scalar(1.0))]))
            .collect();
        let mut grads = chunked_backward(model.params(), items)?;
        grads.scale(1.0 / n as f64);
        if !grads.is_finite() {
            return Err(Error::Divergence(format!(
                "step {}: non-finite gradient",
                self.step
            )));
        }
        if self.config.learning_rate > 0.0 {
            let params = model.params_mut();
            params.accumulate(&grads);
            params.sgd_step(self.config.learning_rate)?;
        }
        let logits = Tensor::new(vec![n, classes], logits)?;
        let report = StepReport::new(self.step, &rewards, Vec::new(), &logits, &batch.labels);
        self.step += 1;
        Ok(report)
    }

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

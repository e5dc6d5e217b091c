//! Preference-augmented reward and its score-function gradient estimate.

use rayon::prelude::*;

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::model::{Composer, RouteMode, Trajectory};
use crate::params::{GradBuffer, ParamStore};
use crate::preferences::{
    batch_entropy_cost, batch_entropy_grad, normalized_betas, per_example_entropy_cost,
    per_example_entropy_grad, route_glimpse_cost, PreferenceKind, PreferenceSpec, RewardBreakdown,
};
use crate::rng::keyed_rng;
use crate::tape::{NodeId, Tape};
use crate::tensor::{self, Tensor};

/// Examples per gradient shard. Shards are fixed by position in the batch so
/// the merged gradient does not depend on how many threads run them.
pub(crate) const GRAD_CHUNK: usize = 16;

/// The preference strengths in effect for one batch, resolved against a
/// model's parameter counts.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ActiveCosts {
    /// `(γ_g, normalized β table)`.
    pub glimpse: Option<(f64, Vec<Vec<f64>>)>,
    pub batch_entropy: Option<f64>,
    pub example_entropy: Option<f64>,
}

impl ActiveCosts {
    /// `gamma[k]` is the strength of `prefs[k]`.
    pub fn new(model: &Composer, prefs: &[PreferenceSpec], gamma: &[f64]) -> Result<Self> {
        if prefs.len() != gamma.len() {
            return Err(Error::Config(format!(
                "{} preference values for {} preferences",
                gamma.len(),
                prefs.len()
            )));
        }
        let mut costs = Self::default();
        for (spec, &g) in prefs.iter().zip(gamma) {
            match spec.kind {
                PreferenceKind::Glimpse => {
                    costs.glimpse = Some((
                        g,
                        normalized_betas(&model.beta_table(), spec.beta_normalization),
                    ))
                }
                PreferenceKind::BatchEntropy => costs.batch_entropy = Some(g),
                PreferenceKind::PerExampleEntropy => costs.example_entropy = Some(g),
            }
        }
        Ok(costs)
    }
}

/// Assembles `log p(y|x,c) + C(p,c,γ)` per example. The batch entropy cost is
/// a single batch-level value added to every example's total.
pub fn batch_reward(
    logits: &Tensor,
    labels: &[usize],
    trajectories: &[Trajectory],
    costs: &ActiveCosts,
) -> Result<RewardBreakdown> {
    if trajectories.len() != labels.len() {
        return Err(Error::Usage(format!(
            "{} trajectories for {} examples",
            trajectories.len(),
            labels.len()
        )));
    }
    let log_likelihood = tensor::log_likelihood(logits, labels)?.into_data();
    Ok(assemble(log_likelihood, trajectories, costs))
}

fn assemble(
    log_likelihood: Vec<f64>,
    trajectories: &[Trajectory],
    costs: &ActiveCosts,
) -> RewardBreakdown {
    let n = trajectories.len();
    let glimpse_cost: Vec<f64> = match &costs.glimpse {
        Some((g, betas)) => trajectories
            .iter()
            .map(|t| route_glimpse_cost(&t.choices, betas, *g))
            .collect(),
        None => vec![0.0; n],
    };
    let example_entropy_cost: Vec<f64> = match costs.example_entropy {
        Some(g) => trajectories
            .iter()
            .map(|t| per_example_entropy_cost(&t.distributions, g))
            .collect(),
        None => vec![0.0; n],
    };
    let batch_entropy_cost = match costs.batch_entropy {
        Some(g) => {
            let refs: Vec<&[Vec<f64>]> = trajectories
                .iter()
                .map(|t| t.distributions.as_slice())
                .collect();
            batch_entropy_cost(&refs, g)
        }
        None => 0.0,
    };
    let total = (0..n)
        .map(|j| log_likelihood[j] + glimpse_cost[j] + example_entropy_cost[j] + batch_entropy_cost)
        .collect();
    RewardBreakdown {
        log_likelihood,
        glimpse_cost,
        example_entropy_cost,
        batch_entropy_cost,
        total,
    }
}

/// Runs every tape's reverse pass in fixed-size shards (in parallel when a
/// thread pool is available) and merges the shard buffers in order.
pub(crate) fn chunked_backward(
    params: &ParamStore,
    items: Vec<(Tape, Vec<(NodeId, Tensor)>)>,
) -> Result<GradBuffer> {
    let shards: Vec<GradBuffer> = items
        .into_par_iter()
        .chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut buffer = params.grad_buffer();
            for (tape, seeds) in chunk {
                tape.backward_into(&seeds, params, &mut buffer)?;
            }
            Ok(buffer)
        })
        .collect::<Result<_>>()?;
    let mut shards = shards.into_iter();
    let mut total = shards.next().unwrap_or_else(|| params.grad_buffer());
    for s in shards {
        total.add_assign(&s);
    }
    Ok(total)
}

/// Output of one gradient estimate over a batch.
#[derive(Clone, Debug)]
pub struct GradientEstimate {
    /// Mean over the batch of the per-example estimates.
    pub grads: GradBuffer,
    pub rewards: RewardBreakdown,
    pub trajectories: Vec<Trajectory>,
    /// `[N, num_classes]`.
    pub logits: Tensor,
}

/// One score-function estimate of the gradient of the mean reward.
///
/// Example `j` samples its route from the stream `(route_seed, j)`. Its
/// contribution is the pathwise derivative of its reward (log-likelihood plus
/// the differentiable entropy terms) plus `(R_j − baseline)·∇ ln p(c|x)`.
/// The batch entropy cost's pathwise part is differentiated once through the
/// batch mean.
pub fn reinforce_gradient(
    model: &Composer,
    batch: &Batch,
    gamma: &[f64],
    costs: &ActiveCosts,
    baseline: f64,
    route_seed: u64,
) -> Result<GradientEstimate> {
    let n = batch.len();
    if n == 0 {
        return Err(Error::Usage("empty batch".into()));
    }
    let traces = (0..n)
        .into_par_iter()
        .map(|j| {
            let mut rng = keyed_rng(route_seed, j as u64);
            let mut trace =
                model.forward_routed(batch.input(j), gamma, RouteMode::Sample, &mut rng)?;
            let ll = trace
                .tape
                .log_softmax_pick(trace.logits, &[batch.labels[j]])?;
            Ok((trace, ll))
        })
        .collect::<Result<Vec<_>>>()?;

    let classes = model.config().num_classes;
    let mut logits = Vec::with_capacity(n * classes);
    let mut log_likelihood = Vec::with_capacity(n);
    let mut trajectories = Vec::with_capacity(n);
    for (trace, ll) in &traces {
        logits.extend_from_slice(trace.logits_row());
        log_likelihood.push(trace.tape.value(*ll).data()[0]);
        trajectories.push(trace.trajectory.clone());
    }
    let rewards = assemble(log_likelihood, &trajectories, costs);

    let batch_grad = costs.batch_entropy.map(|g| {
        let refs: Vec<&[Vec<f64>]> = trajectories
            .iter()
            .map(|t| t.distributions.as_slice())
            .collect();
        batch_entropy_grad(&refs, g)
    });

    let items = traces
        .into_iter()
        .enumerate()
        .map(|(j, (trace, ll))| {
            let mut seeds = vec![(ll, Tensor::scalar(1.0))];
            let advantage = rewards.total[j] - baseline;
            for &lp in &trace.log_probs {
                seeds.push((lp, Tensor::scalar(advantage)));
            }
            if costs.example_entropy.is_some() || batch_grad.is_some() {
                let dists = &trace.trajectory.distributions;
                let mut dp: Vec<Vec<f64>> = dists.iter().map(|p| vec![0.0; p.len()]).collect();
                if let Some(g) = costs.example_entropy {
                    for (d, e) in dp.iter_mut().zip(per_example_entropy_grad(dists, g)) {
                        d.iter_mut().zip(e).for_each(|(a, b)| *a += b);
                    }
                }
                if let Some(bg) = &batch_grad {
                    // The final 1/N average applies to this term too, so
                    // seed N·∂C₂/∂p to recover ∂C₂/∂p exactly once.
                    for (d, e) in dp.iter_mut().zip(bg) {
                        d.iter_mut().zip(e).for_each(|(a, b)| *a += n as f64 * b);
                    }
                }
                for (&p, d) in trace.probs.iter().zip(dp) {
                    let m = d.len();
                    seeds.push((p, Tensor::new(vec![1, m], d)?));
                }
            }
            Ok((trace.tape, seeds))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut grads = chunked_backward(model.params(), items)?;
    grads.scale(1.0 / n as f64);
    Ok(GradientEstimate {
        grads,
        rewards,
        trajectories,
        logits: Tensor::new(vec![n, classes], logits)?,
    })
}

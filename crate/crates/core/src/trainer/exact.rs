//! Exact expected reward by enumerating every route, for models small
//! enough that `Π m_i` is tiny. Serves as the oracle for the sampled
//! estimator.

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::model::Composer;
use crate::params::GradBuffer;
use crate::preferences::{
    batch_entropy_cost, batch_entropy_grad, per_example_entropy_cost, per_example_entropy_grad,
    route_glimpse_cost,
};
use crate::tensor::Tensor;

use super::reinforce::{chunked_backward, ActiveCosts};

/// Largest route count the oracle accepts.
pub const MAX_ROUTES: usize = 256;

/// Every route in lexicographic order.
pub fn all_routes(model: &Composer) -> Result<Vec<Vec<usize>>> {
    let count = model.config().route_count();
    if count > MAX_ROUTES {
        return Err(Error::Usage(format!(
            "{count} routes exceed the enumeration limit of {MAX_ROUTES}"
        )));
    }
    let sizes: Vec<usize> = (0..model.num_metalayers())
        .map(|i| model.modules_in(i))
        .collect();
    let mut routes = Vec::with_capacity(count);
    let mut current = vec![0; sizes.len()];
    loop {
        routes.push(current.clone());
        let mut i = sizes.len();
        loop {
            if i == 0 {
                return Ok(routes);
            }
            i -= 1;
            current[i] += 1;
            if current[i] < sizes[i] {
                break;
            }
            current[i] = 0;
        }
    }
}

/// One route's probability and log-likelihood for a single example.
#[derive(Clone, Debug, PartialEq)]
pub struct RouteOutcome {
    pub route: Vec<usize>,
    pub probability: f64,
    pub log_likelihood: f64,
}

pub fn route_outcomes(
    model: &Composer,
    x: &[f64],
    label: usize,
    gamma: &[f64],
) -> Result<Vec<RouteOutcome>> {
    all_routes(model)?
        .into_iter()
        .map(|route| {
            let trace = model.forward_fixed(x, gamma, &route)?;
            let ll = crate::tensor::log_likelihood(trace.tape.value(trace.logits), &[label])?;
            Ok(RouteOutcome {
                probability: trace.trajectory.path_log_prob.exp(),
                log_likelihood: ll.data()[0],
                route,
            })
        })
        .collect()
}

/// `(E_c[log p(y|x,c)], log E_c[p(y|x,c)])` for one example. The first is
/// never larger than the second.
pub fn jensen_pair(model: &Composer, x: &[f64], label: usize, gamma: &[f64]) -> Result<(f64, f64)> {
    let outcomes = route_outcomes(model, x, label, gamma)?;
    let expected = outcomes
        .iter()
        .map(|o| o.probability * o.log_likelihood)
        .sum();
    let terms: Vec<f64> = outcomes
        .iter()
        .filter(|o| o.probability > 0.0)
        .map(|o| o.probability.ln() + o.log_likelihood)
        .collect();
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_marginal = max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln();
    Ok((expected, log_marginal))
}

#[derive(Clone, Debug)]
pub struct ExactObjective {
    /// `(1/N) Σ_j E_c[R_j(c)]`, including the batch entropy cost once.
    pub objective: f64,
    /// Its exact gradient.
    pub grads: GradBuffer,
}

/// Exact expected batch reward and its gradient.
///
/// The batch entropy cost couples examples through their distributions; when
/// `N > 1` those distributions must not depend on earlier choices, so this
/// case is limited to single-metalayer models. With `N = 1` the batch cost
/// reduces to the per-example form.
pub fn enumerate_exact_objective(
    model: &Composer,
    batch: &Batch,
    gamma: &[f64],
    costs: &ActiveCosts,
) -> Result<ExactObjective> {
    let n = batch.len();
    if n == 0 {
        return Err(Error::Usage("empty batch".into()));
    }
    let routes = all_routes(model)?;
    let coupled = costs.batch_entropy.filter(|_| n > 1);
    if coupled.is_some() && model.num_metalayers() > 1 {
        return Err(Error::Usage(
            "exact batch entropy over several examples needs a single metalayer".into(),
        ));
    }
    let mut example_gamma = costs.example_entropy.unwrap_or(0.0);
    if n == 1 {
        example_gamma += costs.batch_entropy.unwrap_or(0.0);
    }
    let per_example = costs.example_entropy.is_some() || (n == 1 && costs.batch_entropy.is_some());
    let scale = 1.0 / n as f64;

    let mut objective = 0.0;
    let mut items = Vec::new();
    let mut first_dists = Vec::with_capacity(n);
    let mut first_prob_nodes = Vec::with_capacity(n);
    for j in 0..n {
        let x = batch.input(j);
        for (r, route) in routes.iter().enumerate() {
            let mut trace = model.forward_fixed(x, gamma, route)?;
            let ll_node = trace
                .tape
                .log_softmax_pick(trace.logits, &[batch.labels[j]])?;
            let ll = trace.tape.value(ll_node).data()[0];
            let prob = trace.trajectory.path_log_prob.exp();
            let dists = &trace.trajectory.distributions;
            let mut reward = ll;
            if let Some((g, betas)) = &costs.glimpse {
                reward += route_glimpse_cost(route, betas, *g);
            }
            if per_example {
                reward += per_example_entropy_cost(dists, example_gamma);
            }
            objective += scale * prob * reward;

            let mut seeds = vec![(ll_node, Tensor::scalar(scale * prob))];
            for &lp in &trace.log_probs {
                seeds.push((lp, Tensor::scalar(scale * prob * reward)));
            }
            if per_example {
                for (&p, d) in trace
                    .probs
                    .iter()
                    .zip(per_example_entropy_grad(dists, example_gamma))
                {
                    let m = d.len();
                    let d = d.into_iter().map(|v| scale * prob * v).collect();
                    seeds.push((p, Tensor::new(vec![1, m], d)?));
                }
            }
            if r == 0 {
                first_dists.push(dists.clone());
                first_prob_nodes.push(trace.probs.clone());
            }
            items.push((trace.tape, seeds));
        }
    }

    if let Some(g) = coupled {
        // Single metalayer: p does not depend on the route, so the batch cost
        // is deterministic and its gradient enters through one route per
        // example.
        let refs: Vec<&[Vec<f64>]> = first_dists.iter().map(Vec::as_slice).collect();
        objective += batch_entropy_cost(&refs, g);
        let grad = batch_entropy_grad(&refs, g);
        for j in 0..n {
            let m = grad[0].len();
            items[j * routes.len()].1.push((
                first_prob_nodes[j][0],
                Tensor::new(vec![1, m], grad[0].clone())?,
            ));
        }
    }

    Ok(ExactObjective {
        objective,
        grads: chunked_backward(model.params(), items)?,
    })
}

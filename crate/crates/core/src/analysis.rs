//! Evaluation and routing diagnostics: preference sweeps on a fixed
//! checkpoint, the random-mixing baseline, per-class routing heatmaps,
//! mutual information between module choices and labels, and CSV output.
//!
//! Parameter use is reported in raw parameter counts. Every evaluation draws
//! its routes from streams keyed by `(seed, example index)`, so results do
//! not depend on thread count.

use std::fmt::Write as _;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::{Composer, RouteMode};
use crate::rng::{derive_seed, keyed_rng, purpose};
use crate::trainer::argmax;

/// One evaluated example.
#[derive(Clone, Debug, PartialEq)]
pub struct ExampleRecord {
    pub label: usize,
    pub prediction: usize,
    pub choices: Vec<usize>,
    pub distributions: Vec<Vec<f64>>,
    /// `Σ_i β_{i,c_i}` for the route taken.
    pub param_use: f64,
    /// `Σ_i Σ_j p_{i,j} β_{i,j}` along the route taken.
    pub expected_param_use: f64,
}

/// Runs every example of `dataset` once under `mode`.
pub fn evaluate_records(
    model: &Composer,
    dataset: &LabeledDataset,
    gamma: &[f64],
    mode: RouteMode,
    seed: u64,
) -> Result<Vec<ExampleRecord>> {
    if dataset.dim() != model.config().input_dim() {
        return Err(Error::Data(format!(
            "{}: images have {} values, model expects {}",
            dataset.name(),
            dataset.dim(),
            model.config().input_dim()
        )));
    }
    let betas = model.beta_table();
    let stream_seed = derive_seed(seed, &[purpose::EVAL]);
    (0..dataset.len())
        .into_par_iter()
        .map(|i| {
            let mut rng = keyed_rng(stream_seed, i as u64);
            let trace = model.forward_routed(&dataset.image(i), gamma, mode, &mut rng)?;
            let t = trace.trajectory;
            let param_use = t
                .choices
                .iter()
                .zip(&betas)
                .map(|(&c, row)| row[c] as f64)
                .sum();
            let expected_param_use = t
                .distributions
                .iter()
                .zip(&betas)
                .map(|(p, row)| p.iter().zip(row).map(|(&q, &b)| q * b as f64).sum::<f64>())
                .sum();
            Ok(ExampleRecord {
                label: dataset.label(i),
                prediction: argmax(trace.tape.value(trace.logits).data()),
                choices: t.choices,
                distributions: t.distributions,
                param_use,
                expected_param_use,
            })
        })
        .collect()
}

/// Summary of one evaluation pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub gamma: Vec<f64>,
    pub mode: RouteMode,
    pub accuracy: f64,
    /// Mean raw parameter count of the routes taken.
    pub mean_param_use: f64,
    /// Mean expected raw parameter count under the controller's
    /// distributions.
    pub expected_param_use: f64,
    /// Per metalayer, the mean controller distribution.
    pub mean_distribution: Vec<Vec<f64>>,
    /// Per metalayer, the empirical frequency of each module.
    pub choice_frequency: Vec<Vec<f64>>,
    pub count: usize,
}

pub fn summarize(records: &[ExampleRecord], gamma: &[f64], mode: RouteMode) -> Result<SweepPoint> {
    let Some(first) = records.first() else {
        return Err(Error::Usage("no examples to summarize".into()));
    };
    let n = records.len() as f64;
    let mut mean_distribution: Vec<Vec<f64>> = first
        .distributions
        .iter()
        .map(|p| vec![0.0; p.len()])
        .collect();
    let mut choice_frequency = mean_distribution.clone();
    let (mut hits, mut used, mut expected) = (0usize, 0.0, 0.0);
    for r in records {
        hits += usize::from(r.prediction == r.label);
        used += r.param_use;
        expected += r.expected_param_use;
        for (i, p) in r.distributions.iter().enumerate() {
            for (acc, &q) in mean_distribution[i].iter_mut().zip(p) {
                *acc += q;
            }
            choice_frequency[i][r.choices[i]] += 1.0;
        }
    }
    for row in mean_distribution
        .iter_mut()
        .chain(choice_frequency.iter_mut())
    {
        row.iter_mut().for_each(|v| *v /= n);
    }
    Ok(SweepPoint {
        gamma: gamma.to_vec(),
        mode,
        accuracy: hits as f64 / n,
        mean_param_use: used / n,
        expected_param_use: expected / n,
        mean_distribution,
        choice_frequency,
        count: records.len(),
    })
}

pub fn evaluate(
    model: &Composer,
    dataset: &LabeledDataset,
    gamma: &[f64],
    mode: RouteMode,
    seed: u64,
) -> Result<SweepPoint> {
    summarize(
        &evaluate_records(model, dataset, gamma, mode, seed)?,
        gamma,
        mode,
    )
}

/// Evaluates one fixed model at every preference vector and mode.
pub fn preference_sweep(
    model: &Composer,
    dataset: &LabeledDataset,
    gammas: &[Vec<f64>],
    modes: &[RouteMode],
    seed: u64,
) -> Result<Vec<SweepPoint>> {
    if gammas.is_empty() || modes.is_empty() {
        return Err(Error::Config(
            "a sweep needs at least one γ and one mode".into(),
        ));
    }
    let mut out = Vec::with_capacity(gammas.len() * modes.len());
    for gamma in gammas {
        for &mode in modes {
            out.push(evaluate(model, dataset, gamma, mode, seed)?);
        }
    }
    Ok(out)
}

/// Evaluates with one preference slot varied over `values` and the others
/// held at `base`.
pub fn entropy_sweep(
    model: &Composer,
    dataset: &LabeledDataset,
    base: &[f64],
    slot: usize,
    values: &[f64],
    mode: RouteMode,
    seed: u64,
) -> Result<Vec<SweepPoint>> {
    if slot >= base.len() {
        return Err(Error::Config(format!(
            "preference slot {slot} outside the {} controller inputs",
            base.len()
        )));
    }
    let gammas: Vec<Vec<f64>> = values
        .iter()
        .map(|&v| {
            let mut g = base.to_vec();
            g[slot] = v;
            g
        })
        .collect();
    if gammas.is_empty() {
        return Ok(Vec::new());
    }
    preference_sweep(model, dataset, &gammas, &[mode], seed)
}

/// Accuracy of routing every example through one module, plus the module's
/// size.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Endpoint {
    pub module: usize,
    pub param_count: f64,
    pub accuracy: f64,
}

/// The random-mixing baseline for a one-metalayer, two-module model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixingBaseline {
    pub small: Endpoint,
    pub large: Endpoint,
    pub points: Vec<MixingPoint>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixingPoint {
    /// Probability of using the large module.
    pub rho: f64,
    pub accuracy: f64,
    pub mean_param_use: f64,
}

impl MixingBaseline {
    /// Baseline accuracy at a given mean parameter use, by linear
    /// interpolation between the endpoints (the baseline's expectation is
    /// linear in ρ for both quantities). Uses outside the endpoint range are
    /// clamped.
    pub fn accuracy_at(&self, param_use: f64) -> f64 {
        let span = self.large.param_count - self.small.param_count;
        let rho = if span > 0.0 {
            ((param_use - self.small.param_count) / span).clamp(0.0, 1.0)
        } else {
            1.0
        };
        self.small.accuracy + rho * (self.large.accuracy - self.small.accuracy)
    }
}

/// Routes each example to the larger module with probability `ρ`, ignoring
/// the controller. The uniform draw per example is shared across all `ρ`.
pub fn random_mixing_baseline(
    model: &Composer,
    dataset: &LabeledDataset,
    rhos: &[f64],
    seed: u64,
) -> Result<MixingBaseline> {
    if model.num_metalayers() != 1 || model.modules_in(0) != 2 {
        return Err(Error::Config(
            "the random-mixing baseline needs exactly one metalayer with two modules".into(),
        ));
    }
    if let Some(bad) = rhos.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        return Err(Error::Config(format!(
            "mixing fraction {bad} outside [0, 1]"
        )));
    }
    let betas = model.beta_table();
    let (small, large) = if betas[0][1] >= betas[0][0] {
        (0, 1)
    } else {
        (1, 0)
    };
    let gamma = vec![0.0; model.config().controller.gamma_inputs];
    let stream_seed = derive_seed(seed, &[purpose::BASELINE_MIX]);
    // (small correct, large correct, uniform draw)
    let per_example: Vec<(bool, bool, f64)> = (0..dataset.len())
        .into_par_iter()
        .map(|i| {
            let x = dataset.image(i);
            let y = dataset.label(i);
            let hit = |module: usize| -> Result<bool> {
                let t = model.forward_fixed(&x, &gamma, &[module])?;
                Ok(argmax(t.tape.value(t.logits).data()) == y)
            };
            let u = keyed_rng(stream_seed, i as u64).gen::<f64>();
            Ok((hit(small)?, hit(large)?, u))
        })
        .collect::<Result<_>>()?;
    let n = per_example.len().max(1) as f64;
    let endpoint = |module: usize, pick: fn(&(bool, bool, f64)) -> bool| Endpoint {
        module,
        param_count: betas[0][module] as f64,
        accuracy: per_example.iter().filter(|e| pick(e)).count() as f64 / n,
    };
    let small_ep = endpoint(small, |e| e.0);
    let large_ep = endpoint(large, |e| e.1);
    let points = rhos
        .iter()
        .map(|&rho| {
            let (mut hits, mut used) = (0usize, 0.0);
            for &(s, l, u) in &per_example {
                let use_large = u < rho;
                hits += usize::from(if use_large { l } else { s });
                used += if use_large {
                    large_ep.param_count
                } else {
                    small_ep.param_count
                };
            }
            MixingPoint {
                rho,
                accuracy: hits as f64 / n,
                mean_param_use: used / n,
            }
        })
        .collect();
    Ok(MixingBaseline {
        small: small_ep,
        large: large_ep,
        points,
    })
}

/// Mean controller distribution at one metalayer, grouped by true class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub metalayer: usize,
    pub gamma: Vec<f64>,
    /// `classes × modules`; rows of classes with no examples are zero.
    pub matrix: Vec<Vec<f64>>,
    pub class_counts: Vec<usize>,
}

pub fn heatmap_from_records(
    records: &[ExampleRecord],
    num_classes: usize,
    metalayer: usize,
    gamma: &[f64],
) -> Result<Heatmap> {
    let m = records
        .first()
        .and_then(|r| r.distributions.get(metalayer))
        .map(Vec::len)
        .ok_or_else(|| Error::Usage(format!("no distributions for metalayer {metalayer}")))?;
    let mut matrix = vec![vec![0.0; m]; num_classes];
    let mut class_counts = vec![0usize; num_classes];
    for r in records {
        class_counts[r.label] += 1;
        for (acc, &q) in matrix[r.label].iter_mut().zip(&r.distributions[metalayer]) {
            *acc += q;
        }
    }
    for (row, &c) in matrix.iter_mut().zip(&class_counts) {
        if c > 0 {
            row.iter_mut().for_each(|v| *v /= c as f64);
        }
    }
    Ok(Heatmap {
        metalayer,
        gamma: gamma.to_vec(),
        matrix,
        class_counts,
    })
}

pub fn module_class_heatmap(
    model: &Composer,
    dataset: &LabeledDataset,
    gamma: &[f64],
    metalayer: usize,
    seed: u64,
) -> Result<Heatmap> {
    if metalayer >= model.num_metalayers() {
        return Err(Error::Config(format!(
            "metalayer {metalayer} outside the model's {}",
            model.num_metalayers()
        )));
    }
    let records = evaluate_records(model, dataset, gamma, RouteMode::Sample, seed)?;
    heatmap_from_records(&records, dataset.num_classes(), metalayer, gamma)
}

/// Plug-in mutual information (nats) of the empirical joint distribution of
/// `choices` and `labels`, with `0·ln 0 = 0`.
pub fn mutual_information(choices: &[usize], labels: &[usize]) -> Result<f64> {
    if choices.len() != labels.len() {
        return Err(Error::Usage(format!(
            "{} choices but {} labels",
            choices.len(),
            labels.len()
        )));
    }
    if choices.is_empty() {
        return Err(Error::Usage("mutual information of no samples".into()));
    }
    let a = choices.iter().max().map_or(0, |&v| v + 1);
    let b = labels.iter().max().map_or(0, |&v| v + 1);
    let mut joint = vec![vec![0usize; b]; a];
    for (&c, &l) in choices.iter().zip(labels) {
        joint[c][l] += 1;
    }
    Ok(mutual_information_from_counts(&joint))
}

/// Mutual information (nats) of a joint count or probability table.
pub fn mutual_information_from_table(table: &[Vec<f64>]) -> f64 {
    let total: f64 = table.iter().flatten().sum();
    let rows: Vec<f64> = table.iter().map(|r| r.iter().sum()).collect();
    let cols = table.first().map_or(0, Vec::len);
    let col: Vec<f64> = (0..cols)
        .map(|k| table.iter().map(|r| r[k]).sum())
        .collect();
    let mut mi = 0.0;
    for (i, row) in table.iter().enumerate() {
        for (k, &v) in row.iter().enumerate() {
            if v > 0.0 {
                mi += v / total * (v * total / (rows[i] * col[k])).ln();
            }
        }
    }
    mi.max(0.0)
}

fn mutual_information_from_counts(joint: &[Vec<usize>]) -> f64 {
    let table: Vec<Vec<f64>> = joint
        .iter()
        .map(|r| r.iter().map(|&c| c as f64).collect())
        .collect();
    mutual_information_from_table(&table)
}

/// One row of a sweep CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub gamma_g: Option<f64>,
    pub gamma_e: Option<f64>,
    pub accuracy: f64,
    pub mean_param_use: f64,
    /// `sample`, `argmax` or `random_mixing`.
    pub mode: String,
    pub seed: u64,
    pub rho: Option<f64>,
    pub checkpoint_sha256: String,
}

pub const SWEEP_HEADER: &str =
    "gamma_g,gamma_e,accuracy,mean_param_use,mode,seed,rho,checkpoint_sha256";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            opt(r.gamma_g),
            opt(r.gamma_e),
            r.accuracy,
            r.mean_param_use,
            r.mode,
            r.seed,
            opt(r.rho),
            r.checkpoint_sha256
        );
    }
    out
}

/// Heatmap as CSV: header `label,module_1,…`, one row per class.
pub fn heatmap_csv(h: &Heatmap) -> String {
    let m = h.matrix.first().map_or(0, Vec::len);
    let mut out = String::from("label");
    for j in 0..m {
        let _ = write!(out, ",module_{}", j + 1);
    }
    out.push('\n');
    for (label, row) in h.matrix.iter().enumerate() {
        let _ = write!(out, "{label}");
        for v in row {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::presets;
    use crate::model::ComposerConfig;

    fn random_dataset(n: usize, classes: usize, seed: u64) -> LabeledDataset {
        let mut rng = keyed_rng(seed, 0);
        let pixels = (0..n * 4).map(|_| rng.gen_range(0.0..1.0)).collect();
        let labels = (0..n).map(|i| i % classes).collect();
        LabeledDataset::from_f64("random", 1, 4, classes, pixels, labels).unwrap()
    }

    fn two_module(classes: usize) -> ComposerConfig {
        let mut cfg = presets::tiny(4, classes, &[2], 3, 3, 1, 1);
        cfg.metalayers[0].modules[1].hidden = vec![12];
        cfg
    }

    fn randomized(cfg: ComposerConfig, seed: u64) -> Composer {
        let mut model = Composer::new(cfg).unwrap();
        let mut rng = keyed_rng(seed, 5);
        let ids: Vec<_> = model
            .params()
            .sorted()
            .filter(|(id, _)| id.starts_with("ctrl.head"))
            .map(|(_, p)| p)
            .collect();
        for id in ids {
            for v in model.params_mut().value_mut(id).data_mut() {
                *v = rng.gen_range(-2.0..2.0);
            }
        }
        model
    }

    #[test]
    fn untrained_model_is_at_chance() {
        let model = Composer::new(presets::tiny(4, 20, &[2], 3, 3, 1, 3)).unwrap();
        let data = random_dataset(2000, 20, 1);
        let p = evaluate(&model, &data, &[0.0], RouteMode::Sample, 1).unwrap();
        let sigma = (0.05f64 * 0.95 / 2000.0).sqrt();
        assert!((p.accuracy - 0.05).abs() < 3.0 * sigma, "{}", p.accuracy);
        assert!((0.0..=1.0).contains(&p.accuracy));
    }

    #[test]
    fn pinned_controller_uses_large_module() {
        let mut model = Composer::new(two_module(3)).unwrap();
        let b = model.params().find("ctrl.head1.b").unwrap();
        model
            .params_mut()
            .value_mut(b)
            .data_mut()
            .copy_from_slice(&[-1e3, 1e3]);
        let data = random_dataset(50, 3, 2);
        let p = evaluate(&model, &data, &[0.0], RouteMode::Sample, 2).unwrap();
        assert_eq!(p.mean_param_use, model.param_count(0, 1) as f64);
        assert_eq!(p.expected_param_use, model.param_count(0, 1) as f64);
        assert_eq!(p.choice_frequency, vec![vec![0.0, 1.0]]);
    }

    #[test]
    fn expected_use_matches_sampled_use() {
        let model = randomized(two_module(3), 3);
        let data = random_dataset(10_000, 3, 3);
        let records = evaluate_records(&model, &data, &[0.5], RouteMode::Sample, 3).unwrap();
        let p = summarize(&records, &[0.5], RouteMode::Sample).unwrap();
        // the per-example sampling variance is (β_l − β_s)² q(1 − q)
        let (bs, bl) = (
            model.param_count(0, 0) as f64,
            model.param_count(0, 1) as f64,
        );
        let var: f64 = records
            .iter()
            .map(|r| {
                let q = r.distributions[0][1];
                (bl - bs).powi(2) * q * (1.0 - q)
            })
            .sum::<f64>()
            / (records.len() as f64).powi(2);
        assert!(
            (p.mean_param_use - p.expected_param_use).abs() < 3.0 * var.sqrt(),
            "{} vs {}",
            p.mean_param_use,
            p.expected_param_use
        );
        let lo = bs.min(bl);
        let hi = bs.max(bl);
        assert!(p.mean_param_use >= lo && p.mean_param_use <= hi);
    }

    #[test]
    fn sweep_shape_and_determinism() {
        let model = randomized(two_module(3), 4);
        let data = random_dataset(300, 3, 4);
        let one = preference_sweep(&model, &data, &[vec![0.1]], &[RouteMode::Sample], 9).unwrap();
        assert_eq!(one.len(), 1);
        let gammas = vec![vec![0.0], vec![0.5], vec![2.0]];
        let modes = [RouteMode::Sample, RouteMode::Argmax];
        let a = preference_sweep(&model, &data, &gammas, &modes, 9).unwrap();
        assert_eq!(a.len(), 6);
        assert_eq!(
            a,
            preference_sweep(&model, &data, &gammas, &modes, 9).unwrap()
        );
        assert!(preference_sweep(&model, &data, &[], &modes, 9).is_err());
    }

    #[test]
    fn evaluation_is_independent_of_thread_count() {
        let model = randomized(two_module(3), 6);
        let data = random_dataset(200, 3, 6);
        let run = |t: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(t)
                .build()
                .unwrap()
                .install(|| evaluate(&model, &data, &[0.3], RouteMode::Sample, 1).unwrap())
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn mixing_baseline_endpoints_and_linearity() {
        let model = randomized(two_module(3), 7);
        let data = random_dataset(4000, 3, 7);
        let base = random_mixing_baseline(&model, &data, &[0.0, 0.25, 0.5, 1.0], 7).unwrap();
        let (bs, bl) = (base.small.param_count, base.large.param_count);
        assert!(bl > bs);
        assert_eq!(base.points[0].mean_param_use, bs);
        assert_eq!(base.points[0].accuracy, base.small.accuracy);
        assert_eq!(base.points[3].mean_param_use, bl);
        assert_eq!(base.points[3].accuracy, base.large.accuracy);
        for p in &base.points[1..3] {
            let expect = bs + p.rho * (bl - bs);
            let sigma = (bl - bs) * (p.rho * (1.0 - p.rho) / 4000.0).sqrt();
            assert!((p.mean_param_use - expect).abs() < 3.0 * sigma);
        }
        assert_eq!(base.accuracy_at(bs), base.small.accuracy);
        assert_eq!(base.accuracy_at(bl), base.large.accuracy);

        // endpoints agree with controller-pinned evaluation
        let mut pinned = model.clone();
        let b = pinned.params().find("ctrl.head1.b").unwrap();
        pinned
            .params_mut()
            .value_mut(b)
            .data_mut()
            .copy_from_slice(&[1e3, -1e3]);
        let w = pinned.params().find("ctrl.head1.w").unwrap();
        pinned.params_mut().value_mut(w).fill(0.0);
        let p = evaluate(&pinned, &data, &[0.0], RouteMode::Sample, 1).unwrap();
        assert_eq!(p.accuracy, base.small.accuracy);
    }

    #[test]
    fn mixing_baseline_topology_guard() {
        let model = Composer::new(presets::tiny(4, 3, &[3], 3, 3, 0, 0)).unwrap();
        let data = random_dataset(10, 3, 0);
        assert!(matches!(
            random_mixing_baseline(&model, &data, &[0.5], 0),
            Err(Error::Config(_))
        ));
        let model = Composer::new(two_module(3)).unwrap();
        assert!(random_mixing_baseline(&model, &data, &[1.5], 0).is_err());
    }

    #[test]
    fn heatmap_rows() {
        let model = Composer::new(presets::tiny(4, 3, &[4], 3, 3, 1, 0)).unwrap();
        let data = random_dataset(60, 3, 8);
        let h = module_class_heatmap(&model, &data, &[0.0], 0, 1).unwrap();
        for row in &h.matrix {
            for &v in row {
                assert!((v - 0.25).abs() < 1e-15);
            }
        }
        let model = randomized(two_module(3), 8);
        let h = module_class_heatmap(&model, &data, &[0.7], 0, 1).unwrap();
        for row in &h.matrix {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        assert_eq!(h.class_counts, vec![20, 20, 20]);
        let csv = heatmap_csv(&h);
        assert!(csv.starts_with("label,module_1,module_2\n0,"));
        assert_eq!(csv.lines().count(), 4);
        assert!(module_class_heatmap(&model, &data, &[0.7], 1, 1).is_err());
    }

    #[test]
    fn mutual_information_examples() {
        assert_eq!(
            mutual_information(&[0; 6], &[0, 1, 2, 0, 1, 2]).unwrap(),
            0.0
        );
        let mi = mutual_information(&[0, 1, 0, 1], &[1, 0, 1, 0]).unwrap();
        assert!((mi - 2f64.ln()).abs() < 1e-15);
        // [[0.4, 0.1], [0.1, 0.4]] by direct summation
        let direct = 2.0 * 0.4 * (0.4f64 / 0.25).ln() + 2.0 * 0.1 * (0.1f64 / 0.25).ln();
        let table = vec![vec![0.4, 0.1], vec![0.1, 0.4]];
        assert!((mutual_information_from_table(&table) - direct).abs() < 1e-15);
        assert!((direct - 0.1927).abs() < 1e-4);
        let choices: Vec<usize> = [vec![0; 4], vec![1], vec![0], vec![1; 4]].concat();
        let labels: Vec<usize> = [vec![0; 5], vec![1; 5]].concat();
        let mi = mutual_information(&choices, &labels).unwrap();
        assert!((mi - direct).abs() < 1e-12);
        assert!(mutual_information(&[0], &[0, 1]).is_err());
        assert!(mutual_information(&[], &[]).is_err());
    }

    #[test]
    fn entropy_sweep_outputs() {
        let model = randomized(two_module(3), 9);
        let data = random_dataset(100, 3, 9);
        let pts = entropy_sweep(
            &model,
            &data,
            &[0.2],
            0,
            &[0.0, 0.5, 1.0, 4.0],
            RouteMode::Sample,
            2,
        )
        .unwrap();
        assert_eq!(pts.len(), 4);
        for p in &pts {
            for d in &p.mean_distribution {
                assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
        assert_eq!(pts[2].gamma, vec![1.0]);
        assert!(entropy_sweep(&model, &data, &[0.2], 1, &[0.0], RouteMode::Sample, 2).is_err());
    }

    #[test]
    fn sweep_csv_layout() {
        let row = SweepRow {
            gamma_g: Some(0.5),
            gamma_e: None,
            accuracy: 0.75,
            mean_param_use: 100.0,
            mode: "sample".into(),
            seed: 3,
            rho: None,
            checkpoint_sha256: "ab".into(),
        };
        let csv = sweep_csv(&[row]);
        assert_eq!(csv, format!("{SWEEP_HEADER}\n0.5,,0.75,100,sample,3,,ab\n"));
        assert!(SWEEP_HEADER.starts_with("gamma_g,gamma_e,accuracy,mean_param_use,mode,seed"));
    }

    proptest::proptest! {
        #[test]
        fn mutual_information_properties(
            pairs in proptest::collection::vec((0usize..4, 0usize..6), 1..200)
        ) {
            let (a, b): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
            let ab = mutual_information(&a, &b).unwrap();
            let ba = mutual_information(&b, &a).unwrap();
            proptest::prop_assert!((ab - ba).abs() < 1e-12);
            proptest::prop_assert!(ab >= 0.0);
            let distinct = |v: &[usize]| v.iter().collect::<std::collections::BTreeSet<_>>().len() as f64;
            proptest::prop_assert!(ab <= distinct(&a).ln().min(distinct(&b).ln()) + 1e-12);
        }
    }
}

use rand::Rng;

use super::config::{crop, ComposerConfig, Glimpse};
use super::routing::{sample_choice, RouteMode};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::{derive_seed, keyed_rng, purpose};
use crate::tape::{NodeId, Tape};
use crate::tensor::{self, Tensor};

#[derive(Clone, Copy, Debug)]
struct Layer {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct ModuleLayout {
    glimpse: Glimpse,
    layers: Vec<Layer>,
    param_count: usize,
}

#[derive(Clone, Debug)]
struct ControllerLayout {
    /// Per-metalayer projection of the activation features (input sizes
    /// differ between metalayers).
    feature: Vec<ParamId>,
    bias: ParamId,
    recurrent: ParamId,
    choice: ParamId,
    gamma: Option<ParamId>,
    heads: Vec<Layer>,
}

/// Recurrent controller state between metalayers.
#[derive(Clone, Debug, PartialEq)]
pub struct ControllerState {
    pub hidden: Vec<f64>,
    /// `None` before the first choice; encoded as the all-zero one-hot.
    pub prev_choice: Option<usize>,
}

impl ControllerState {
    pub fn initial(hidden: usize) -> Self {
        Self {
            hidden: vec![0.0; hidden],
            prev_choice: None,
        }
    }
}

/// One example's routing record.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub choices: Vec<usize>,
    pub distributions: Vec<Vec<f64>>,
    /// `Σ_i ln p_i[c_i]`.
    pub path_log_prob: f64,
    pub gamma: Vec<f64>,
}

impl Trajectory {
    pub fn recomputed_log_prob(&self) -> f64 {
        self.choices
            .iter()
            .zip(&self.distributions)
            .map(|(&c, p)| p[c].ln())
            .sum()
    }
}

/// A taped forward pass for one example.
#[derive(Debug)]
pub struct ExampleTrace {
    pub tape: Tape,
    /// `[1, num_classes]` output activations `a_n`.
    pub logits: NodeId,
    /// Controller distributions `p_i`, each `[1, m_i]`.
    pub probs: Vec<NodeId>,
    /// `ln p_i[c_i]` per metalayer, each `[1]`.
    pub log_probs: Vec<NodeId>,
    pub trajectory: Trajectory,
}

impl ExampleTrace {
    pub fn logits_row(&self) -> &[f64] {
        self.tape.value(self.logits).data()
    }
}

/// The stem, metalayers of candidate modules, and the controller.
#[derive(Clone, Debug)]
pub struct Composer {
    config: ComposerConfig,
    params: ParamStore,
    stem: Vec<Layer>,
    modules: Vec<Vec<ModuleLayout>>,
    controller: ControllerLayout,
}

fn uniform_init(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-bound..bound)).collect(),
    )
    .expect("positive shape")
}

impl Composer {
    /// Builds and initializes a model. Weights are `U(±1/√fan_in)`, biases
    /// zero, and the controller output heads zero so the initial routing
    /// policy is exactly uniform.
    pub fn new(config: ComposerConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = keyed_rng(derive_seed(config.init_seed, &[purpose::INIT]), 0);
        let mut params = ParamStore::new();

        let add_layer =
            |params: &mut ParamStore, rng: &mut _, name: String, n_in: usize, n_out: usize| {
                let w = params.add(format!("{name}.w"), uniform_init(rng, &[n_in, n_out], n_in))?;
                let b = params.add(format!("{name}.b"), Tensor::zeros(&[n_out]))?;
                Ok::<_, Error>(Layer { w, b })
            };

        let mut stem = Vec::new();
        let mut width = config.input_dim();
        for (l, &out) in config.stem.iter().enumerate() {
            stem.push(add_layer(
                &mut params,
                &mut rng,
                format!("stem.l{l}"),
                width,
                out,
            )?);
            width = out;
        }

        let mut modules = Vec::new();
        for (i, layer) in config.metalayers.iter().enumerate() {
            let mut row = Vec::new();
            for (j, spec) in layer.modules.iter().enumerate() {
                let mut widths = vec![config.module_input_dim(i, j)];
                widths.extend_from_slice(&spec.hidden);
                widths.push(spec.output);
                let layers = widths
                    .windows(2)
                    .enumerate()
                    .map(|(l, w)| {
                        add_layer(
                            &mut params,
                            &mut rng,
                            format!("ml{}.m{}.l{l}", i + 1, j + 1),
                            w[0],
                            w[1],
                        )
                    })
                    .collect::<Result<Vec<_>>>()?;
                row.push(ModuleLayout {
                    glimpse: spec.glimpse,
                    layers,
                    param_count: config.module_param_count(i, j),
                });
            }
            modules.push(row);
        }

        let ctl = &config.controller;
        let hidden = ctl.hidden;
        let choice_width = config.choice_width();
        let cell_fan_in = |feature: usize| feature + choice_width + ctl.gamma_inputs + hidden;
        let mut feature = Vec::new();
        for i in 0..config.metalayers.len() {
            let d = config.controller_feature_dim(i);
            feature.push(params.add(
                format!("ctrl.feature{}.w", i + 1),
                uniform_init(&mut rng, &[d, hidden], cell_fan_in(d)),
            )?);
        }
        let fan = cell_fan_in(config.controller_feature_dim(0));
        let bias = params.add("ctrl.cell.b", Tensor::zeros(&[hidden]))?;
        let recurrent = params.add(
            "ctrl.recurrent.w",
            uniform_init(&mut rng, &[hidden, hidden], fan),
        )?;
        let choice = params.add(
            "ctrl.choice.w",
            uniform_init(&mut rng, &[choice_width, hidden], fan),
        )?;
        let gamma = if ctl.gamma_inputs > 0 {
            Some(params.add(
                "ctrl.gamma.w",
                uniform_init(&mut rng, &[ctl.gamma_inputs, hidden], fan),
            )?)
        } else {
            None
        };
        let mut heads = Vec::new();
        for (i, layer) in config.metalayers.iter().enumerate() {
            let m = layer.modules.len();
            let w = params.add(format!("ctrl.head{}.w", i + 1), Tensor::zeros(&[hidden, m]))?;
            let b = params.add(format!("ctrl.head{}.b", i + 1), Tensor::zeros(&[m]))?;
            heads.push(Layer { w, b });
        }

        Ok(Self {
            config,
            params,
            stem,
            modules,
            controller: ControllerLayout {
                feature,
                bias,
                recurrent,
                choice,
                gamma,
                heads,
            },
        })
    }

    pub fn config(&self) -> &ComposerConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_metalayers(&self) -> usize {
        self.modules.len()
    }

    pub fn modules_in(&self, metalayer: usize) -> usize {
        self.modules[metalayer].len()
    }

    /// `β_{i,j}`: scalar parameters in module `j` of metalayer `i` (0-based).
    pub fn param_count(&self, metalayer: usize, module: usize) -> usize {
        self.modules[metalayer][module].param_count
    }

    pub fn beta_table(&self) -> Vec<Vec<usize>> {
        self.modules
            .iter()
            .map(|row| row.iter().map(|m| m.param_count).collect())
            .collect()
    }

    /// Parameter ids owned by the controller.
    pub fn controller_param_ids(&self) -> Vec<ParamId> {
        let c = &self.controller;
        let mut ids = c.feature.clone();
        ids.extend([c.bias, c.recurrent, c.choice]);
        ids.extend(c.gamma);
        for h in &c.heads {
            ids.extend([h.w, h.b]);
        }
        ids
    }

    /// Parameter ids of one module.
    pub fn module_param_ids(&self, metalayer: usize, module: usize) -> Vec<ParamId> {
        self.modules[metalayer][module]
            .layers
            .iter()
            .flat_map(|l| [l.w, l.b])
            .collect()
    }

    pub fn stem_param_ids(&self) -> Vec<ParamId> {
        self.stem.iter().flat_map(|l| [l.w, l.b]).collect()
    }

    fn check_input(&self, x: &[f64], gamma: &[f64]) -> Result<()> {
        if x.len() != self.config.input_dim() {
            return Err(Error::Data(format!(
                "input has {} values, model expects {}",
                x.len(),
                self.config.input_dim()
            )));
        }
        if gamma.len() != self.config.controller.gamma_inputs {
            return Err(Error::Config(format!(
                "{} preference values supplied, controller takes {}",
                gamma.len(),
                self.config.controller.gamma_inputs
            )));
        }
        if gamma.iter().any(|g| !g.is_finite()) {
            return Err(Error::Config("preference values must be finite".into()));
        }
        Ok(())
    }

    fn stem_on_tape(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let mut a = x;
        for layer in &self.stem {
            let z = tape.affine(&self.params, a, layer.w, Some(layer.b))?;
            a = tape.relu(z);
        }
        Ok(a)
    }

    fn module_on_tape(
        &self,
        tape: &mut Tape,
        metalayer: usize,
        module: usize,
        raw: &[f64],
        raw_node: NodeId,
        a_prev: NodeId,
    ) -> Result<NodeId> {
        let layout = &self.modules[metalayer][module];
        let mut a = match layout.glimpse {
            Glimpse::Activations => a_prev,
            Glimpse::Full => raw_node,
            g @ Glimpse::Region { .. } => tape.input(Tensor::row(crop(
                raw,
                self.config.input_rows,
                self.config.input_cols,
                g,
            )?)),
        };
        let last_metalayer = metalayer + 1 == self.modules.len();
        for (l, layer) in layout.layers.iter().enumerate() {
            a = tape.affine(&self.params, a, layer.w, Some(layer.b))?;
            let output_layer = l + 1 == layout.layers.len();
            if !(output_layer && last_metalayer) {
                a = tape.relu(a);
            }
        }
        Ok(a)
    }

    fn controller_features(
        &self,
        tape: &mut Tape,
        metalayer: usize,
        raw: &[f64],
        a_prev: NodeId,
    ) -> Result<NodeId> {
        match (metalayer, self.config.controller.pool) {
            (0, Some([pr, pc])) => {
                let pooled =
                    tensor::avg_pool(raw, self.config.input_rows, self.config.input_cols, pr, pc)?;
                Ok(tape.input(Tensor::row(pooled)))
            }
            _ => Ok(a_prev),
        }
    }

    /// Controller cell plus output head on the tape; returns
    /// `(logits, new_hidden)`.
    fn controller_on_tape(
        &self,
        tape: &mut Tape,
        metalayer: usize,
        features: NodeId,
        hidden: Option<NodeId>,
        prev_choice: Option<usize>,
        gamma: Option<NodeId>,
    ) -> Result<(NodeId, NodeId)> {
        let c = &self.controller;
        let mut parts =
            vec![tape.affine(&self.params, features, c.feature[metalayer], Some(c.bias))?];
        if let Some(prev) = prev_choice {
            let mut onehot = vec![0.0; self.config.choice_width()];
            onehot[prev] = 1.0;
            let node = tape.input(Tensor::row(onehot));
            parts.push(tape.affine(&self.params, node, c.choice, None)?);
        }
        if let (Some(g), Some(w)) = (gamma, c.gamma) {
            parts.push(tape.affine(&self.params, g, w, None)?);
        }
        if let Some(h) = hidden {
            parts.push(tape.affine(&self.params, h, c.recurrent, None)?);
        }
        let pre = tape.add(&parts)?;
        let h = tape.tanh(pre);
        let head = c.heads[metalayer];
        let logits = tape.affine(&self.params, h, head.w, Some(head.b))?;
        Ok((logits, h))
    }

    /// Runs the full composition for one example, recording every primitive.
    ///
    /// `choose(i, p_i)` picks the module at metalayer `i` given the
    /// controller's distribution; it decides between sampling, argmax, or a
    /// forced route.
    pub fn forward_example<F>(
        &self,
        x: &[f64],
        gamma: &[f64],
        mut choose: F,
    ) -> Result<ExampleTrace>
    where
        F: FnMut(usize, &[f64]) -> Result<usize>,
    {
        self.check_input(x, gamma)?;
        let mut tape = Tape::new();
        let raw_node = tape.input(Tensor::row(x.to_vec()));
        let mut a = self.stem_on_tape(&mut tape, raw_node)?;
        let gamma_node = (!gamma.is_empty()).then(|| {
            let scale = self.config.controller.gamma_scale;
            tape.input(Tensor::row(gamma.iter().map(|g| g * scale).collect()))
        });

        let n = self.modules.len();
        let mut hidden = None;
        let mut prev = None;
        let mut probs = Vec::with_capacity(n);
        let mut log_probs = Vec::with_capacity(n);
        let mut choices = Vec::with_capacity(n);
        let mut distributions = Vec::with_capacity(n);
        for i in 0..n {
            let features = self.controller_features(&mut tape, i, x, a)?;
            let (logits, h) =
                self.controller_on_tape(&mut tape, i, features, hidden, prev, gamma_node)?;
            let p = tape.softmax(logits);
            let p_values = tape.value(p).data().to_vec();
            let c = choose(i, &p_values)?;
            if c >= self.modules[i].len() {
                return Err(Error::Usage(format!(
                    "route chose module {c} in metalayer {} with {} modules",
                    i + 1,
                    self.modules[i].len()
                )));
            }
            log_probs.push(tape.log_softmax_pick(logits, &[c])?);
            probs.push(p);
            a = self.module_on_tape(&mut tape, i, c, x, raw_node, a)?;
            hidden = Some(h);
            prev = Some(c);
            choices.push(c);
            distributions.push(p_values);
        }

        let path_log_prob = log_probs.iter().map(|&lp| tape.value(lp).data()[0]).sum();
        Ok(ExampleTrace {
            tape,
            logits: a,
            probs,
            log_probs,
            trajectory: Trajectory {
                choices,
                distributions,
                path_log_prob,
                gamma: gamma.to_vec(),
            },
        })
    }

    /// Forward pass with routes chosen by `mode`.
    pub fn forward_routed<R: Rng + ?Sized>(
        &self,
        x: &[f64],
        gamma: &[f64],
        mode: RouteMode,
        rng: &mut R,
    ) -> Result<ExampleTrace> {
        self.forward_example(x, gamma, |_, p| sample_choice(p, mode, rng))
    }

    /// Forward pass along a fixed route.
    pub fn forward_fixed(&self, x: &[f64], gamma: &[f64], route: &[usize]) -> Result<ExampleTrace> {
        if route.len() != self.modules.len() {
            return Err(Error::Usage(format!(
                "route has {} choices for {} metalayers",
                route.len(),
                self.modules.len()
            )));
        }
        self.forward_example(x, gamma, |i, _| Ok(route[i]))
    }

    /// Batched composition: logits `[batch, num_classes]` and one trajectory
    /// per row of `x`. Examples are processed in row order sharing `rng`.
    pub fn compose_forward<R: Rng + ?Sized>(
        &self,
        x: &Tensor,
        gamma: &[f64],
        mode: RouteMode,
        rng: &mut R,
    ) -> Result<(Tensor, Vec<Trajectory>)> {
        let mut logits = Vec::with_capacity(x.rows() * self.config.num_classes);
        let mut trajectories = Vec::with_capacity(x.rows());
        for r in 0..x.rows() {
            let trace = self.forward_routed(x.row_slice(r), gamma, mode, rng)?;
            logits.extend_from_slice(trace.logits_row());
            trajectories.push(trace.trajectory);
        }
        Ok((
            Tensor::new(vec![x.rows(), self.config.num_classes], logits)?,
            trajectories,
        ))
    }

    /// `a_0 = f_0(x)` for a `[batch, input_dim]` tensor, without a tape.
    pub fn stem_forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape().len() != 2 || x.cols() != self.config.input_dim() {
            return Err(Error::Data(format!(
                "stem expects [batch, {}], got {:?}",
                self.config.input_dim(),
                x.shape()
            )));
        }
        let mut a = x.clone();
        for layer in &self.stem {
            a = tensor::relu(&tensor::affine(
                &a,
                self.params.value(layer.w),
                self.params.value(layer.b),
            )?);
        }
        Ok(a)
    }

    /// `a_i = f_{i,j}(a_{i-1})` for one example, without a tape. Raw-glimpse
    /// modules read `raw` instead of `a_prev`.
    pub fn module_forward(
        &self,
        metalayer: usize,
        module: usize,
        raw: &[f64],
        a_prev: &[f64],
    ) -> Result<Vec<f64>> {
        let layout = self
            .modules
            .get(metalayer)
            .and_then(|row| row.get(module))
            .ok_or_else(|| Error::Usage(format!("no module {module} in metalayer {metalayer}")))?;
        let input = match layout.glimpse {
            Glimpse::Activations => a_prev.to_vec(),
            g => crop(raw, self.config.input_rows, self.config.input_cols, g)?,
        };
        let mut a = Tensor::row(input);
        let last_metalayer = metalayer + 1 == self.modules.len();
        for (l, layer) in layout.layers.iter().enumerate() {
            a = tensor::affine(&a, self.params.value(layer.w), self.params.value(layer.b))?;
            if !(l + 1 == layout.layers.len() && last_metalayer) {
                a = tensor::relu(&a);
            }
        }
        Ok(a.into_data())
    }

    /// `p_i = g_i(a_{i-1}, c_{i-1})` with `γ` appended to the controller input.
    /// For the first metalayer `a_prev` is `a_0` (or the raw image when the
    /// controller pools it). The returned state carries the new hidden vector;
    /// record the eventual choice in `prev_choice` before the next step.
    pub fn controller_step(
        &self,
        metalayer: usize,
        raw: &[f64],
        a_prev: &[f64],
        state: &ControllerState,
        gamma: &[f64],
    ) -> Result<(Vec<f64>, ControllerState)> {
        self.check_input(raw, gamma)?;
        let mut tape = Tape::new();
        let a_node = tape.input(Tensor::row(a_prev.to_vec()));
        let features = self.controller_features(&mut tape, metalayer, raw, a_node)?;
        let hidden = state
            .prev_choice
            .map(|_| tape.input(Tensor::row(state.hidden.clone())));
        let gamma_node = (!gamma.is_empty()).then(|| {
            let scale = self.config.controller.gamma_scale;
            tape.input(Tensor::row(gamma.iter().map(|g| g * scale).collect()))
        });
        let (logits, h) = self.controller_on_tape(
            &mut tape,
            metalayer,
            features,
            hidden,
            state.prev_choice,
            gamma_node,
        )?;
        let p = tensor::softmax(tape.value(logits)).into_data();
        Ok((
            p,
            ControllerState {
                hidden: tape.value(h).data().to_vec(),
                prev_choice: None,
            },
        ))
    }

    /// Plain MLP path through the stem and the given module of each
    /// metalayer, with no controller. Used by the supervised reference
    /// trainer.
    pub(crate) fn fixed_path_on_tape(&self, x: &[f64], route: &[usize]) -> Result<(Tape, NodeId)> {
        self.check_input(x, &vec![0.0; self.config.controller.gamma_inputs])?;
        let mut tape = Tape::new();
        let raw_node = tape.input(Tensor::row(x.to_vec()));
        let mut a = self.stem_on_tape(&mut tape, raw_node)?;
        for (i, &c) in route.iter().enumerate() {
            a = self.module_on_tape(&mut tape, i, c, x, raw_node, a)?;
        }
        Ok((tape, a))
    }
}

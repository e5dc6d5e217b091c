use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Where a module reads its input from.
///
/// `Full` and `Region` crop the raw input image and are only allowed in the
/// first metalayer; every deeper module consumes the previous metalayer's
/// activations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Glimpse {
    #[default]
    Activations,
    Full,
    Region {
        row0: usize,
        col0: usize,
        rows: usize,
        cols: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModuleSpec {
    #[serde(default)]
    pub glimpse: Glimpse,
    /// Hidden layer widths; ReLU after each.
    #[serde(default)]
    pub hidden: Vec<usize>,
    pub output: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetalayerSpec {
    pub modules: Vec<ModuleSpec>,
}

fn default_gamma_scale() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerConfig {
    /// Width of the shared recurrent state.
    pub hidden: usize,
    /// Average-pooling block applied to the raw image before it is shown to
    /// the controller at the first metalayer. Requires an identity stem.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pool: Option<[usize; 2]>,
    /// Number of preference values appended to every controller input.
    #[serde(default)]
    pub gamma_inputs: usize,
    #[serde(default = "default_gamma_scale")]
    pub gamma_scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComposerConfig {
    pub input_rows: usize,
    pub input_cols: usize,
    pub num_classes: usize,
    /// Widths of the stem's affine+ReLU layers; empty means identity.
    #[serde(default)]
    pub stem: Vec<usize>,
    #[serde(default)]
    pub init_seed: u64,
    pub metalayers: Vec<MetalayerSpec>,
    pub controller: ControllerConfig,
}

/// Exact number of scalars in an MLP with biases.
pub fn mlp_param_count(input: usize, hidden: &[usize], output: usize) -> usize {
    let mut widths = Vec::with_capacity(hidden.len() + 2);
    widths.push(input);
    widths.extend_from_slice(hidden);
    widths.push(output);
    widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

/// Copies a rectangular region out of a row-major `rows × cols` image.
pub fn crop(image: &[f64], rows: usize, cols: usize, glimpse: Glimpse) -> Result<Vec<f64>> {
    match glimpse {
        Glimpse::Activations | Glimpse::Full => Ok(image.to_vec()),
        Glimpse::Region {
            row0,
            col0,
            rows: h,
            cols: w,
        } => {
            if h == 0 || w == 0 || row0 + h > rows || col0 + w > cols {
                return Err(Error::Config(format!(
                    "glimpse {h}x{w} at ({row0},{col0}) outside {rows}x{cols} input"
                )));
            }
            let mut out = Vec::with_capacity(h * w);
            for r in row0..row0 + h {
                out.extend_from_slice(&image[r * cols + col0..r * cols + col0 + w]);
            }
            Ok(out)
        }
    }
}

impl ComposerConfig {
    pub fn input_dim(&self) -> usize {
        self.input_rows * self.input_cols
    }

    pub fn stem_output_dim(&self) -> usize {
        self.stem
            .last()
            .copied()
            .unwrap_or_else(|| self.input_dim())
    }

    /// Size of the vector a module at `(metalayer, module)` consumes.
    pub fn module_input_dim(&self, metalayer: usize, module: usize) -> usize {
        let spec = &self.metalayers[metalayer].modules[module];
        match spec.glimpse {
            Glimpse::Full => self.input_dim(),
            Glimpse::Region { rows, cols, .. } => rows * cols,
            Glimpse::Activations if metalayer == 0 => self.stem_output_dim(),
            Glimpse::Activations => self.metalayers[metalayer - 1].modules[0].output,
        }
    }

    /// Size of the activation features the controller sees before choosing at
    /// `metalayer`.
    pub fn controller_feature_dim(&self, metalayer: usize) -> usize {
        if metalayer == 0 {
            match self.controller.pool {
                Some([pr, pc]) => (self.input_rows / pr) * (self.input_cols / pc),
                None => self.stem_output_dim(),
            }
        } else {
            self.metalayers[metalayer - 1].modules[0].output
        }
    }

    /// Width of the previous-choice one-hot input (largest metalayer).
    pub fn choice_width(&self) -> usize {
        self.metalayers
            .iter()
            .map(|m| m.modules.len())
            .max()
            .unwrap_or(0)
    }

    pub fn module_param_count(&self, metalayer: usize, module: usize) -> usize {
        let spec = &self.metalayers[metalayer].modules[module];
        mlp_param_count(
            self.module_input_dim(metalayer, module),
            &spec.hidden,
            spec.output,
        )
    }

    /// Raw parameter counts, one row per metalayer.
    pub fn beta_table(&self) -> Vec<Vec<usize>> {
        (0..self.metalayers.len())
            .map(|i| {
                (0..self.metalayers[i].modules.len())
                    .map(|j| self.module_param_count(i, j))
                    .collect()
            })
            .collect()
    }

    pub fn route_count(&self) -> usize {
        self.metalayers.iter().map(|m| m.modules.len()).product()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.input_rows == 0 || self.input_cols == 0 {
            return bad("input shape must be positive".into());
        }
        if self.num_classes == 0 {
            return bad("num_classes must be positive".into());
        }
        if self.stem.contains(&0) {
            return bad("stem widths must be positive".into());
        }
        if self.metalayers.is_empty() {
            return bad("at least one metalayer is required".into());
        }
        if self.controller.hidden == 0 {
            return bad("controller hidden size must be positive".into());
        }
        if !self.controller.gamma_scale.is_finite() {
            return bad("gamma_scale must be finite".into());
        }
        if let Some([pr, pc]) = self.controller.pool {
            if !self.stem.is_empty() {
                return bad("controller pooling requires an identity stem".into());
            }
            if pr == 0
                || pc == 0
                || !self.input_rows.is_multiple_of(pr)
                || !self.input_cols.is_multiple_of(pc)
            {
                return bad(format!(
                    "pool {pr}x{pc} does not tile {}x{} input",
                    self.input_rows, self.input_cols
                ));
            }
        }
        for (i, layer) in self.metalayers.iter().enumerate() {
            let Some(first) = layer.modules.first() else {
                return bad(format!("metalayer {} has no modules", i + 1));
            };
            for (j, m) in layer.modules.iter().enumerate() {
                if m.output != first.output {
                    return bad(format!(
                        "metalayer {} modules disagree on output size",
                        i + 1
                    ));
                }
                if m.output == 0 || m.hidden.contains(&0) {
                    return bad(format!("module {}.{} has a zero-width layer", i + 1, j + 1));
                }
                match m.glimpse {
                    Glimpse::Activations => {}
                    _ if i > 0 => {
                        return bad(format!(
                            "module {}.{} glimpses the raw input outside the first metalayer",
                            i + 1,
                            j + 1
                        ))
                    }
                    Glimpse::Full => {}
                    Glimpse::Region {
                        row0,
                        col0,
                        rows,
                        cols,
                    } => {
                        if rows == 0
                            || cols == 0
                            || row0 + rows > self.input_rows
                            || col0 + cols > self.input_cols
                        {
                            return bad(format!(
                                "module {}.{} glimpse out of bounds",
                                i + 1,
                                j + 1
                            ));
                        }
                    }
                }
            }
        }
        let last = &self.metalayers[self.metalayers.len() - 1].modules[0];
        if last.output != self.num_classes {
            return bad(format!(
                "last metalayer outputs {} values but there are {} classes",
                last.output, self.num_classes
            ));
        }
        Ok(())
    }

    /// Canonical text form, used inside checkpoints.
    pub fn to_canonical_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("serializing config: {e}")))
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)
            .map_err(|e| Error::Config(format!("parsing model config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

//! Experiment configuration: one TOML file fully determines a run.
//!
//! The top-level `seed` drives every stochastic choice. `model.init_seed` and
//! `train.seed` may be omitted; when present they must equal `seed`.
//! Relative paths are resolved against the directory holding the config file.

use std::path::{Path, PathBuf};

use composer_core::model::RouteMode;
use composer_core::preferences::PreferenceKind;
use composer_core::{ComposerConfig, Error, Result, TrainConfig};
use serde::{Deserialize, Serialize};

/// Standard MNIST file names, looked up with and without a `.gz` suffix.
pub const MNIST_FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Mnist,
    WideMnist,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    /// Directory with the four MNIST IDX files.
    pub mnist_dir: PathBuf,
    /// Seed for the Wide-MNIST side placement; required for `wide_mnist`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthesis_seed: Option<u64>,
    /// Use only the first `n` training examples.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_limit: Option<usize>,
    /// Use only the first `n` test examples.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_limit: Option<usize>,
}

/// Test-time evaluation grid shared by `sweep`, `heatmap` and `eval`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    /// Values for the glimpse preference input.
    #[serde(default)]
    pub gamma_g: Vec<f64>,
    /// Values for the entropy preference input.
    #[serde(default)]
    pub gamma_e: Vec<f64>,
    #[serde(default)]
    pub modes: Vec<RouteMode>,
    /// Large-module fractions for the random-mixing baseline.
    #[serde(default)]
    pub rho: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSpec {
    pub seeds: Vec<u64>,
    /// Constant entropy preference used by both arms.
    pub gamma_e: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetSpec,
    pub model: ComposerConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub sweep: SweepSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ablation: Option<AblationSpec>,
}

/// One point of the evaluation grid: the values reported in the CSV columns
/// and the full controller input vector.
#[derive(Clone, Debug, PartialEq)]
pub struct GammaPoint {
    pub gamma_g: Option<f64>,
    pub gamma_e: Option<f64>,
    pub vector: Vec<f64>,
}

impl ExperimentConfig {
    /// Parses, resolves seeds and validates. Relative paths are taken
    /// relative to `base_dir`.
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text)
            .map_err(|e| Error::Config(format!("parsing experiment config: {e}")))?;
        cfg.resolve_paths(base_dir);
        cfg.resolve_seeds()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("reading {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml_str(&text, base)
    }

    /// Canonical text form. Parsing it back yields an equal config.
    pub fn to_canonical_string(&self) -> Result<String> {
        toml::to_string(self)
            .map_err(|e| Error::Config(format!("serializing experiment config: {e}")))
    }

    /// Replaces the run seed everywhere it is used.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.model.init_seed = seed;
        self.train.seed = seed;
    }

    fn resolve_paths(&mut self, base: &Path) {
        for p in [&mut self.dataset.mnist_dir, &mut self.output_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    fn resolve_seeds(&mut self) -> Result<()> {
        for (name, value) in [
            ("model.init_seed", self.model.init_seed),
            ("train.seed", self.train.seed),
        ] {
            if value != 0 && value != self.seed {
                return Err(Error::Config(format!(
                    "{name} = {value} conflicts with seed = {}; omit it or make them equal",
                    self.seed
                )));
            }
        }
        self.set_seed(self.seed);
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.model.controller.gamma_inputs != self.train.preferences.len() {
            return Err(Error::Config(format!(
                "model.controller.gamma_inputs is {} but train.preferences lists {}",
                self.model.controller.gamma_inputs,
                self.train.preferences.len()
            )));
        }
        let (rows, cols, classes) = match self.dataset.kind {
            DatasetKind::Mnist => (28, 28, 10),
            DatasetKind::WideMnist => (28, 56, 20),
        };
        if (
            self.model.input_rows,
            self.model.input_cols,
            self.model.num_classes,
        ) != (rows, cols, classes)
        {
            return Err(Error::Config(format!(
                "{:?} data is {rows}x{cols} with {classes} classes, model expects {}x{} with {}",
                self.dataset.kind,
                self.model.input_rows,
                self.model.input_cols,
                self.model.num_classes
            )));
        }
        if self.dataset.kind == DatasetKind::WideMnist && self.dataset.synthesis_seed.is_none() {
            return Err(Error::Config(
                "dataset.synthesis_seed is required for wide_mnist".into(),
            ));
        }
        if let Some(bad) = self.sweep.rho.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return Err(Error::Config(format!(
                "sweep.rho value {bad} outside [0, 1]"
            )));
        }
        if let Some(bad) = self
            .sweep
            .gamma_g
            .iter()
            .chain(&self.sweep.gamma_e)
            .find(|g| !(**g >= 0.0 && g.is_finite()))
        {
            return Err(Error::Config(format!(
                "sweep preference value {bad} must be finite and non-negative"
            )));
        }
        if let Some(a) = &self.ablation {
            if a.seeds.is_empty() {
                return Err(Error::Config("ablation.seeds is empty".into()));
            }
            if !(a.gamma_e >= 0.0 && a.gamma_e.is_finite()) {
                return Err(Error::Config(format!(
                    "ablation.gamma_e {} must be finite and non-negative",
                    a.gamma_e
                )));
            }
        }
        Ok(())
    }

    /// Checks that the MNIST source files exist, with download instructions
    /// when they do not.
    pub fn check_paths(&self) -> Result<()> {
        for name in MNIST_FILES {
            mnist_file(&self.dataset.mnist_dir, name)?;
        }
        Ok(())
    }

    /// The evaluation grid: every combination of the configured glimpse and
    /// entropy values, mapped onto the controller's preference inputs.
    pub fn gamma_grid(&self) -> Result<Vec<GammaPoint>> {
        let kinds: Vec<PreferenceKind> = self.train.preferences.iter().map(|p| p.kind).collect();
        let has_glimpse = kinds.contains(&PreferenceKind::Glimpse);
        let has_entropy = kinds.iter().any(|k| k.is_entropy());
        let axis = |present: bool, values: &[f64], name: &str| -> Result<Vec<Option<f64>>> {
            match (present, values.is_empty()) {
                (true, true) => Err(Error::Config(format!(
                    "sweep.{name} is empty but the model takes that preference"
                ))),
                (false, false) => Err(Error::Config(format!(
                    "sweep.{name} is set but the model has no such preference"
                ))),
                (true, false) => Ok(values.iter().copied().map(Some).collect()),
                (false, true) => Ok(vec![None]),
            }
        };
        let gs = axis(has_glimpse, &self.sweep.gamma_g, "gamma_g")?;
        let es = axis(has_entropy, &self.sweep.gamma_e, "gamma_e")?;
        let mut out = Vec::with_capacity(gs.len() * es.len());
        for &g in &gs {
            for &e in &es {
                let vector = kinds
                    .iter()
                    .map(|k| {
                        if k.is_entropy() {
                            e.unwrap_or(0.0)
                        } else {
                            g.unwrap_or(0.0)
                        }
                    })
                    .collect();
                out.push(GammaPoint {
                    gamma_g: g,
                    gamma_e: e,
                    vector,
                });
            }
        }
        Ok(out)
    }
}

/// Locates an MNIST file, accepting a gzip-compressed copy.
pub fn mnist_file(dir: &Path, name: &str) -> Result<PathBuf> {
    for candidate in [dir.join(name), dir.join(format!("{name}.gz"))] {
        if candidate.is_file() {
            return Ok(candidate);
        }
    }
    Err(Error::Data(format!(
        "MNIST file {name} (or {name}.gz) not found in {}. Download the four files {} \
         from an MNIST mirror such as https://ossci-datasets.s3.amazonaws.com/mnist/ \
         into that directory or point dataset.mnist_dir at them; gzip files are read directly",
        dir.display(),
        MNIST_FILES.map(|f| format!("{f}.gz")).join(", ")
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const EXAMPLE: &str = r#"
seed = 3
output_dir = "runs/wide"

[dataset]
kind = "wide_mnist"
mnist_dir = "data/mnist"
synthesis_seed = 11
train_limit = 1000

[model]
input_rows = 28
input_cols = 56
num_classes = 20

[[model.metalayers]]
[[model.metalayers.modules]]
glimpse = { kind = "region", row0 = 0, col0 = 0, rows = 28, cols = 28 }
hidden = [16]
output = 20
[[model.metalayers.modules]]
glimpse = { kind = "full" }
hidden = [64]
output = 20

[model.controller]
hidden = 32
pool = [4, 4]
gamma_inputs = 2

[train]
batch_size = 32
learning_rate = 0.1
steps = 100
baseline = { kind = "moving_average", decay = 0.99 }

[[train.preferences]]
kind = "glimpse"
zero_mass = 0.1
distribution = { kind = "log_uniform", lo = 0.001, hi = 10.0 }

[[train.preferences]]
kind = "batch_entropy"
distribution = { kind = "constant", value = 0.05 }

[sweep]
gamma_g = [0.0, 1.0, 3.0]
gamma_e = [0.05]
modes = ["sample", "argmax"]
rho = [0.0, 0.5, 1.0]
"#;

    fn parse(text: &str) -> Result<ExperimentConfig> {
        ExperimentConfig::from_toml_str(text, Path::new("/base"))
    }

    #[test]
    fn canonical_round_trip_is_a_fixed_point() {
        let cfg = parse(EXAMPLE).unwrap();
        let text = cfg.to_canonical_string().unwrap();
        let again = parse(&text).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(text, again.to_canonical_string().unwrap());
    }

    #[test]
    fn seeds_and_paths_are_resolved() {
        let cfg = parse(EXAMPLE).unwrap();
        assert_eq!((cfg.model.init_seed, cfg.train.seed), (3, 3));
        assert_eq!(cfg.dataset.mnist_dir, Path::new("/base/data/mnist"));
        assert_eq!(cfg.output_dir, Path::new("/base/runs/wide"));
        let conflicting = EXAMPLE.replace("steps = 100", "steps = 100\nseed = 4");
        assert!(matches!(parse(&conflicting), Err(Error::Config(_))));
    }

    #[test]
    fn gamma_grid_follows_preference_order() {
        let cfg = parse(EXAMPLE).unwrap();
        let grid = cfg.gamma_grid().unwrap();
        assert_eq!(grid.len(), 3);
        assert_eq!(grid[2].vector, vec![3.0, 0.05]);
        assert_eq!((grid[2].gamma_g, grid[2].gamma_e), (Some(3.0), Some(0.05)));
    }

    #[test]
    fn rejects_inconsistent_configs() {
        let cases = [
            EXAMPLE.replace("gamma_inputs = 2", "gamma_inputs = 1"),
            EXAMPLE.replace("synthesis_seed = 11\n", ""),
            EXAMPLE.replace("input_cols = 56", "input_cols = 28"),
            EXAMPLE.replace("rho = [0.0, 0.5, 1.0]", "rho = [1.5]"),
            EXAMPLE.replace("seed = 3", "seed = 3\nunknown = 1"),
            EXAMPLE.replace("learning_rate = 0.1", "learning_rate = -1.0"),
        ];
        for text in cases {
            assert!(matches!(parse(&text), Err(Error::Config(_))), "{text}");
        }
        let empty_axis = parse(&EXAMPLE.replace("gamma_e = [0.05]", "gamma_e = []")).unwrap();
        assert!(matches!(empty_axis.gamma_grid(), Err(Error::Config(_))));
    }

    #[test]
    fn missing_mnist_names_the_download() {
        let err = mnist_file(Path::new("/nonexistent"), MNIST_FILES[0]).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Data(_)));
        assert!(
            msg.contains("train-images-idx3-ubyte") && msg.contains("Download"),
            "{msg}"
        );
    }
}

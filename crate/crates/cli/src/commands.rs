//! Subcommand implementations. Each returns a summary of what it wrote so
//! that tests can inspect results without re-reading files.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use composer_core::analysis::{
    evaluate_records, heatmap_csv, heatmap_from_records, mutual_information, preference_sweep,
    random_mixing_baseline, summarize, sweep_csv, Heatmap, MixingBaseline, SweepPoint, SweepRow,
};
use composer_core::data::{load_idx_with_classes, make_wide_mnist, write_idx};
use composer_core::model::{from_bytes, to_bytes, RouteMode};
use composer_core::preferences::{PreferenceKind, PreferenceSpec};
use composer_core::rng::{derive_seed, purpose};
use composer_core::trainer::RunLog;
use composer_core::{Composer, Error, LabeledDataset, Result, StepReport, Trainer};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{
    mnist_file, DatasetKind, DatasetSpec, ExperimentConfig, GammaPoint, MNIST_FILES,
};

pub const CONFIG_COPY: &str = "config.toml";
pub const CHECKPOINT: &str = "checkpoint.bin";
pub const TRAIN_LOG: &str = "train.jsonl";
pub const EVAL_LOG: &str = "eval.jsonl";
pub const PROVENANCE: &str = "provenance.json";
pub const SWEEP_CSV: &str = "sweep.csv";
pub const SWEEP_JSON: &str = "sweep.json";
pub const EVAL_JSON: &str = "eval.json";
pub const ABLATION_JSON: &str = "ablation.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value)
        .map(|s| s + "\n")
        .map_err(|e| Error::Internal(format!("serializing report: {e}")))
}

/// A command invocation: resolved config plus output directory.
#[derive(Clone, Debug)]
pub struct Run {
    pub config: ExperimentConfig,
    pub out: PathBuf,
}

impl Run {
    /// Creates the output directory and writes the canonical config copy.
    pub fn new(config: ExperimentConfig, out: Option<PathBuf>) -> Result<Self> {
        let out = out.unwrap_or_else(|| config.output_dir.clone());
        create_dir(&out)?;
        let run = Self { config, out };
        write(&run.path(CONFIG_COPY), run.config.to_canonical_string()?)?;
        Ok(run)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// Checkpoint to read: the explicit one, else the run's own.
    pub fn checkpoint(&self, explicit: Option<&Path>) -> PathBuf {
        explicit.map_or_else(|| self.path(CHECKPOINT), Path::to_path_buf)
    }
}

// ---------------------------------------------------------------------------
// data

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FileHash {
    pub file: String,
    pub bytes: u64,
    pub sha256: String,
}

fn hash_file(path: &Path) -> Result<FileHash> {
    let bytes = read(path)?;
    Ok(FileHash {
        file: path
            .file_name()
            .map(|f| f.to_string_lossy().into_owned())
            .unwrap_or_default(),
        bytes: bytes.len() as u64,
        sha256: sha256_hex(&bytes),
    })
}

/// Seed for the Wide-MNIST side placement of one split.
pub fn split_synthesis_seed(seed: u64, split: Split) -> u64 {
    match split {
        Split::Train => seed,
        Split::Test => derive_seed(seed, &[purpose::TEST_SPLIT]),
    }
}

/// Loads one split as configured: MNIST, optionally truncated, optionally
/// widened.
pub fn load_split(spec: &DatasetSpec, split: Split) -> Result<LabeledDataset> {
    let (images, labels, limit) = match split {
        Split::Train => (MNIST_FILES[0], MNIST_FILES[1], spec.train_limit),
        Split::Test => (MNIST_FILES[2], MNIST_FILES[3], spec.test_limit),
    };
    let images = mnist_file(&spec.mnist_dir, images)?;
    let labels = mnist_file(&spec.mnist_dir, labels)?;
    let mut data = load_idx_with_classes(images, labels, 10)?;
    if let Some(n) = limit {
        data = data.take(n)?;
    }
    match spec.kind {
        DatasetKind::Mnist => Ok(data),
        DatasetKind::WideMnist => {
            let seed = spec.synthesis_seed.ok_or_else(|| {
                Error::Config("dataset.synthesis_seed is required for wide_mnist".into())
            })?;
            make_wide_mnist(&data, split_synthesis_seed(seed, split))
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ProvenanceReport {
    pub kind: DatasetKind,
    pub mnist_dir: String,
    pub train_synthesis_seed: Option<u64>,
    pub test_synthesis_seed: Option<u64>,
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    pub sources: Vec<FileHash>,
    /// Files written by `gen-data`, relative to the provenance file.
    pub outputs: Vec<FileHash>,
}

fn provenance(spec: &DatasetSpec, outputs: Vec<FileHash>) -> Result<ProvenanceReport> {
    let sources = MNIST_FILES
        .iter()
        .map(|name| hash_file(&mnist_file(&spec.mnist_dir, name)?))
        .collect::<Result<_>>()?;
    let seeds = |split| spec.synthesis_seed.map(|s| split_synthesis_seed(s, split));
    Ok(ProvenanceReport {
        kind: spec.kind,
        mnist_dir: spec.mnist_dir.display().to_string(),
        train_synthesis_seed: seeds(Split::Train),
        test_synthesis_seed: seeds(Split::Test),
        train_limit: spec.train_limit,
        test_limit: spec.test_limit,
        sources,
        outputs,
    })
}

#[derive(Clone, Debug)]
pub struct GenDataOutput {
    pub dir: PathBuf,
    pub provenance: ProvenanceReport,
}

/// Writes both splits as IDX files under `data/` plus a provenance record
/// hashing the sources and the outputs.
pub fn cmd_gen_data(run: &Run) -> Result<GenDataOutput> {
    let spec = &run.config.dataset;
    run.config.check_paths()?;
    let dir = run.path("data");
    create_dir(&dir)?;
    let prefix = match spec.kind {
        DatasetKind::Mnist => "mnist",
        DatasetKind::WideMnist => "wide-mnist",
    };
    let mut outputs = Vec::new();
    for (split, name) in [(Split::Train, "train"), (Split::Test, "t10k")] {
        let data = load_split(spec, split)?;
        let images = dir.join(format!("{prefix}-{name}-images-idx3-ubyte"));
        let labels = dir.join(format!("{prefix}-{name}-labels-idx1-ubyte"));
        write_idx(&data, &images, &labels)?;
        outputs.push(hash_file(&images)?);
        outputs.push(hash_file(&labels)?);
    }
    let provenance = provenance(spec, outputs)?;
    write(&dir.join(PROVENANCE), to_json(&provenance)?)?;
    Ok(GenDataOutput { dir, provenance })
}

// ---------------------------------------------------------------------------
// training

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub checkpoint_sha256: String,
    pub reports: Vec<StepReport>,
}

#[derive(Serialize)]
struct EvalLine {
    step: usize,
    accuracy: f64,
    mean_param_use: f64,
}

/// Model configs agree up to the init seed, which only matters before
/// training.
fn check_topology(model: &Composer, config: &ExperimentConfig) -> Result<()> {
    let mut expected = config.model.clone();
    expected.init_seed = model.config().init_seed;
    if model.config() != &expected {
        return Err(Error::Config(
            "checkpoint was built from a different model configuration".into(),
        ));
    }
    Ok(())
}

/// Trains `config` on `train`, logging every step. On divergence the last
/// good parameters are still written before the error is returned.
fn train_to(
    config: &ExperimentConfig,
    train: &LabeledDataset,
    test: Option<&LabeledDataset>,
    init: Option<&Path>,
    checkpoint: &Path,
    log_path: &Path,
    eval_path: &Path,
) -> Result<TrainOutput> {
    let mut model = match init {
        Some(path) => {
            let model = from_bytes(&read(path)?)?;
            check_topology(&model, config)?;
            model
        }
        None => Composer::new(config.model.clone())?,
    };
    let eval_every = config.train.eval_every;
    let eval_gamma = match (eval_every, test) {
        (0, _) | (_, None) => None,
        (_, Some(_)) => Some(first_grid_point(config)?.vector),
    };
    let mut log = RunLog::create(log_path)?;
    let mut eval_log = Vec::new();
    let mut trainer = Trainer::new(config.train.clone())?;
    let result = trainer.train_loop(&mut model, train, |report, model| {
        log.append(report)?;
        if let (Some(gamma), Some(test)) = (&eval_gamma, test) {
            if (report.step + 1) % eval_every == 0 {
                let p = summarize(
                    &evaluate_records(model, test, gamma, RouteMode::Argmax, config.seed)?,
                    gamma,
                    RouteMode::Argmax,
                )?;
                let line = EvalLine {
                    step: report.step,
                    accuracy: p.accuracy,
                    mean_param_use: p.mean_param_use,
                };
                let json =
                    serde_json::to_string(&line).map_err(|e| Error::Internal(e.to_string()))?;
                writeln!(eval_log, "{json}").map_err(|e| Error::Internal(e.to_string()))?;
            }
        }
        Ok(())
    });
    log.flush()?;
    if eval_gamma.is_some() {
        write(eval_path, &eval_log)?;
    }
    let bytes = to_bytes(&model)?;
    write(checkpoint, &bytes)?;
    Ok(TrainOutput {
        checkpoint: checkpoint.to_path_buf(),
        log: log_path.to_path_buf(),
        checkpoint_sha256: sha256_hex(&bytes),
        reports: result?,
    })
}

fn first_grid_point(config: &ExperimentConfig) -> Result<GammaPoint> {
    config
        .gamma_grid()?
        .into_iter()
        .next()
        .ok_or_else(|| Error::Config("periodic evaluation needs a sweep grid".into()))
}

/// Trains from scratch (or from `init`) and writes the checkpoint, the
/// JSON-lines step log and the data provenance.
pub fn cmd_train(run: &Run, init: Option<&Path>) -> Result<TrainOutput> {
    let cfg = &run.config;
    cfg.check_paths()?;
    write(
        &run.path(PROVENANCE),
        to_json(&provenance(&cfg.dataset, Vec::new())?)?,
    )?;
    let train = load_split(&cfg.dataset, Split::Train)?;
    let test = match cfg.train.eval_every {
        0 => None,
        _ => Some(load_split(&cfg.dataset, Split::Test)?),
    };
    train_to(
        cfg,
        &train,
        test.as_ref(),
        init,
        &run.path(CHECKPOINT),
        &run.path(TRAIN_LOG),
        &run.path(EVAL_LOG),
    )
}

// ---------------------------------------------------------------------------
// evaluation

fn load_checkpoint(run: &Run, path: &Path) -> Result<(Composer, String)> {
    let bytes = read(path)?;
    let model = from_bytes(&bytes)?;
    check_topology(&model, &run.config)?;
    Ok((model, sha256_hex(&bytes)))
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepOutput {
    pub csv: PathBuf,
    pub checkpoint_sha256: String,
    pub rows_written: usize,
    pub beta_table: Vec<Vec<usize>>,
    pub points: Vec<SweepPoint>,
    pub baseline: Option<MixingBaseline>,
    #[serde(skip)]
    pub rows: Vec<SweepRow>,
}

/// Evaluates one checkpoint over the preference grid in every mode, plus the
/// random-mixing baseline when `sweep.rho` is set.
pub fn cmd_sweep(run: &Run, checkpoint: &Path) -> Result<SweepOutput> {
    let cfg = &run.config;
    let (model, hash) = load_checkpoint(run, checkpoint)?;
    if cfg.sweep.modes.is_empty() {
        return Err(Error::Config("sweep.modes is empty".into()));
    }
    let grid = cfg.gamma_grid()?;
    let test = load_split(&cfg.dataset, Split::Test)?;
    let vectors: Vec<Vec<f64>> = grid.iter().map(|g| g.vector.clone()).collect();
    let points = preference_sweep(&model, &test, &vectors, &cfg.sweep.modes, cfg.seed)?;

    let mut rows = Vec::with_capacity(points.len() + cfg.sweep.rho.len());
    for (point, p) in grid
        .iter()
        .flat_map(|g| cfg.sweep.modes.iter().map(move |_| g))
        .zip(&points)
    {
        rows.push(SweepRow {
            gamma_g: point.gamma_g,
            gamma_e: point.gamma_e,
            accuracy: p.accuracy,
            mean_param_use: p.mean_param_use,
            mode: p.mode.as_str().to_string(),
            seed: cfg.seed,
            rho: None,
            checkpoint_sha256: hash.clone(),
        });
    }
    let baseline = if cfg.sweep.rho.is_empty() {
        None
    } else {
        let b = random_mixing_baseline(&model, &test, &cfg.sweep.rho, cfg.seed)?;
        for m in &b.points {
            rows.push(SweepRow {
                gamma_g: None,
                gamma_e: None,
                accuracy: m.accuracy,
                mean_param_use: m.mean_param_use,
                mode: "random_mixing".into(),
                seed: cfg.seed,
                rho: Some(m.rho),
                checkpoint_sha256: hash.clone(),
            });
        }
        Some(b)
    };
    let csv = run.path(SWEEP_CSV);
    write(&csv, sweep_csv(&rows))?;
    let out = SweepOutput {
        csv,
        checkpoint_sha256: hash,
        rows_written: rows.len(),
        beta_table: model.beta_table(),
        points,
        baseline,
        rows,
    };
    write(&run.path(SWEEP_JSON), to_json(&out)?)?;
    Ok(out)
}

#[derive(Clone, Debug, Serialize)]
pub struct HeatmapFile {
    pub file: String,
    pub gamma_g: Option<f64>,
    pub gamma_e: Option<f64>,
    pub metalayer: usize,
    pub class_counts: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct HeatmapOutput {
    pub dir: PathBuf,
    pub files: Vec<HeatmapFile>,
    pub heatmaps: Vec<Heatmap>,
}

/// Class-by-module mean controller probabilities for every grid point and
/// metalayer, written under `heatmaps/` with an `index.json`.
pub fn cmd_heatmap(run: &Run, checkpoint: &Path) -> Result<HeatmapOutput> {
    let cfg = &run.config;
    let (model, _) = load_checkpoint(run, checkpoint)?;
    let test = load_split(&cfg.dataset, Split::Test)?;
    let dir = run.path("heatmaps");
    create_dir(&dir)?;
    let (mut files, mut heatmaps) = (Vec::new(), Vec::new());
    for (k, point) in cfg.gamma_grid()?.iter().enumerate() {
        let records = evaluate_records(&model, &test, &point.vector, RouteMode::Sample, cfg.seed)?;
        for metalayer in 0..model.num_metalayers() {
            let h = heatmap_from_records(&records, test.num_classes(), metalayer, &point.vector)?;
            let file = format!("heatmap_{k}_metalayer{metalayer}.csv");
            write(&dir.join(&file), heatmap_csv(&h))?;
            files.push(HeatmapFile {
                file,
                gamma_g: point.gamma_g,
                gamma_e: point.gamma_e,
                metalayer,
                class_counts: h.class_counts.clone(),
            });
            heatmaps.push(h);
        }
    }
    write(&dir.join("index.json"), to_json(&files)?)?;
    Ok(HeatmapOutput {
        dir,
        files,
        heatmaps,
    })
}

/// Flattens routes into one index per example so that mutual information
/// can be taken between whole routes and labels.
pub fn route_indices(routes: &[Vec<usize>], sizes: &[usize]) -> Vec<usize> {
    routes
        .iter()
        .map(|r| r.iter().zip(sizes).fold(0, |acc, (&c, &m)| acc * m + c))
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalEntry {
    pub gamma_g: Option<f64>,
    pub gamma_e: Option<f64>,
    #[serde(flatten)]
    pub point: SweepPoint,
    /// Between the full route and the label, in nats.
    pub mutual_information: f64,
    pub mutual_information_per_metalayer: Vec<f64>,
}

fn eval_entry(
    model: &Composer,
    test: &LabeledDataset,
    point: &GammaPoint,
    mode: RouteMode,
    seed: u64,
) -> Result<EvalEntry> {
    let records = evaluate_records(model, test, &point.vector, mode, seed)?;
    let labels: Vec<usize> = records.iter().map(|r| r.label).collect();
    let routes: Vec<Vec<usize>> = records.iter().map(|r| r.choices.clone()).collect();
    let sizes: Vec<usize> = (0..model.num_metalayers())
        .map(|i| model.modules_in(i))
        .collect();
    let per_metalayer = (0..sizes.len())
        .map(|i| {
            let choices: Vec<usize> = routes.iter().map(|r| r[i]).collect();
            mutual_information(&choices, &labels)
        })
        .collect::<Result<_>>()?;
    Ok(EvalEntry {
        gamma_g: point.gamma_g,
        gamma_e: point.gamma_e,
        mutual_information: mutual_information(&route_indices(&routes, &sizes), &labels)?,
        mutual_information_per_metalayer: per_metalayer,
        point: summarize(&records, &point.vector, mode)?,
    })
}

/// Accuracy, parameter use, selection frequencies and mutual information at
/// every grid point and mode.
pub fn cmd_eval(run: &Run, checkpoint: &Path) -> Result<Vec<EvalEntry>> {
    let cfg = &run.config;
    let (model, _) = load_checkpoint(run, checkpoint)?;
    if cfg.sweep.modes.is_empty() {
        return Err(Error::Config("sweep.modes is empty".into()));
    }
    let test = load_split(&cfg.dataset, Split::Test)?;
    let mut entries = Vec::new();
    for point in cfg.gamma_grid()? {
        for &mode in &cfg.sweep.modes {
            entries.push(eval_entry(&model, &test, &point, mode, cfg.seed)?);
        }
    }
    write(&run.path(EVAL_JSON), to_json(&entries)?)?;
    Ok(entries)
}

// ---------------------------------------------------------------------------
// entropy ablation

#[derive(Clone, Debug, Serialize)]
pub struct AblationRun {
    pub seed: u64,
    pub kind: PreferenceKind,
    pub mutual_information: f64,
    pub accuracy: f64,
    /// Per metalayer, the fraction of test examples routed to each module.
    pub choice_frequency: Vec<Vec<f64>>,
    pub max_choice_frequency: f64,
    pub checkpoint_sha256: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct SeedDifference {
    pub seed: u64,
    /// Batch-cost MI minus per-example-cost MI.
    pub difference: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationReport {
    pub config: ExperimentConfig,
    pub gamma_e: f64,
    pub runs: Vec<AblationRun>,
    pub differences: Vec<SeedDifference>,
    pub median_difference: f64,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    match v.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => v[n / 2],
        n => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

/// For each configured seed, trains once with the batch entropy cost and
/// once with the per-example entropy cost at the same constant strength,
/// and reports the test-set mutual information between routes and labels.
pub fn cmd_ablate_entropy(run: &Run) -> Result<AblationReport> {
    let cfg = &run.config;
    let ablation = cfg
        .ablation
        .clone()
        .ok_or_else(|| Error::Config("ablate-entropy needs an [ablation] section".into()))?;
    let template = match cfg.train.preferences.as_slice() {
        [p] if p.kind.is_entropy() => p.clone(),
        _ => {
            return Err(Error::Config(
                "ablate-entropy needs exactly one preference, an entropy preference".into(),
            ))
        }
    };
    cfg.check_paths()?;
    let train = load_split(&cfg.dataset, Split::Train)?;
    let test = load_split(&cfg.dataset, Split::Test)?;
    let dir = run.path("ablation");
    create_dir(&dir)?;
    let point = GammaPoint {
        gamma_g: None,
        gamma_e: Some(ablation.gamma_e),
        vector: vec![ablation.gamma_e],
    };

    let mut runs = Vec::new();
    let mut differences = Vec::new();
    for &seed in &ablation.seeds {
        let mut mi = [0.0; 2];
        for (slot, kind) in [
            PreferenceKind::BatchEntropy,
            PreferenceKind::PerExampleEntropy,
        ]
        .into_iter()
        .enumerate()
        {
            let mut arm = cfg.clone();
            arm.set_seed(seed);
            arm.train.preferences = vec![PreferenceSpec {
                beta_normalization: template.beta_normalization,
                ..PreferenceSpec::constant(kind, ablation.gamma_e)
            }];
            arm.train.eval_every = 0;
            let stem = format!("seed{seed}-{}", kind_name(kind));
            let trained = train_to(
                &arm,
                &train,
                None,
                None,
                &dir.join(format!("{stem}.bin")),
                &dir.join(format!("{stem}.jsonl")),
                &dir.join(format!("{stem}-eval.jsonl")),
            )?;
            let model = from_bytes(&read(&trained.checkpoint)?)?;
            let entry = eval_entry(&model, &test, &point, RouteMode::Sample, seed)?;
            mi[slot] = entry.mutual_information;
            runs.push(AblationRun {
                seed,
                kind,
                mutual_information: entry.mutual_information,
                accuracy: entry.point.accuracy,
                max_choice_frequency: entry
                    .point
                    .choice_frequency
                    .iter()
                    .flatten()
                    .copied()
                    .fold(0.0, f64::max),
                choice_frequency: entry.point.choice_frequency,
                checkpoint_sha256: trained.checkpoint_sha256,
            });
        }
        differences.push(SeedDifference {
            seed,
            difference: mi[0] - mi[1],
        });
    }
    let report = AblationReport {
        config: cfg.clone(),
        gamma_e: ablation.gamma_e,
        median_difference: median(&differences.iter().map(|d| d.difference).collect::<Vec<_>>()),
        runs,
        differences,
    };
    write(&run.path(ABLATION_JSON), to_json(&report)?)?;
    Ok(report)
}

fn kind_name(kind: PreferenceKind) -> &'static str {
    match kind {
        PreferenceKind::Glimpse => "glimpse",
        PreferenceKind::BatchEntropy => "batch",
        PreferenceKind::PerExampleEntropy => "per-example",
    }
}

//! End-to-end command tests on a small synthetic MNIST-format corpus.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use composer_cli::commands::{self, Run, CHECKPOINT, SWEEP_CSV, TRAIN_LOG};
use composer_cli::ExperimentConfig;
use composer_core::data::{write_idx, LabeledDataset};
use composer_core::model::{load_model, to_bytes};
use composer_core::rng::keyed_rng;
use composer_core::Composer;
use rand::Rng;

/// Digit `k` lights a 6×6 block at a class-specific position, over noise.
fn fake_split(n: usize, seed: u64) -> LabeledDataset {
    let mut rng = keyed_rng(seed, 0);
    let mut pixels = vec![0u8; n * 784];
    let mut labels = Vec::with_capacity(n);
    for j in 0..n {
        let k = rng.gen_range(0..10);
        labels.push(k);
        let img = &mut pixels[j * 784..(j + 1) * 784];
        for p in img.iter_mut() {
            *p = rng.gen_range(0..40);
        }
        let (r0, c0) = (2 + (k / 5) * 12, 2 + (k % 5) * 5);
        for r in r0..r0 + 6 {
            for c in c0..c0 + 6 {
                img[r * 28 + c] = 255;
            }
        }
    }
    LabeledDataset::from_u8("fake", 28, 28, 10, pixels, labels).unwrap()
}

fn write_fake_mnist(dir: &Path) {
    fs::create_dir_all(dir).unwrap();
    write_idx(
        &fake_split(300, 1),
        dir.join("train-images-idx3-ubyte"),
        dir.join("train-labels-idx1-ubyte"),
    )
    .unwrap();
    write_idx(
        &fake_split(120, 2),
        dir.join("t10k-images-idx3-ubyte"),
        dir.join("t10k-labels-idx1-ubyte"),
    )
    .unwrap();
}

const WIDE: &str = r#"
seed = 5
output_dir = "out"

[dataset]
kind = "wide_mnist"
mnist_dir = "mnist"
synthesis_seed = 9

[model]
input_rows = 28
input_cols = 56
num_classes = 20

[[model.metalayers]]
[[model.metalayers.modules]]
glimpse = { kind = "region", row0 = 0, col0 = 0, rows = 28, cols = 28 }
hidden = [4]
output = 20
[[model.metalayers.modules]]
glimpse = { kind = "full" }
hidden = [16]
output = 20

[model.controller]
hidden = 8
pool = [4, 4]
gamma_inputs = 2

[train]
batch_size = 16
learning_rate = 0.1
steps = 40
baseline = { kind = "moving_average", decay = 0.9 }

[[train.preferences]]
kind = "glimpse"
zero_mass = 0.1
distribution = { kind = "log_uniform", lo = 0.001, hi = 10.0 }

[[train.preferences]]
kind = "batch_entropy"
distribution = { kind = "constant", value = 0.05 }

[sweep]
gamma_g = [0.0, 1.0, 10.0]
gamma_e = [0.05]
modes = ["sample", "argmax"]
rho = [0.0, 0.25, 0.5, 1.0]
"#;

const ABLATE: &str = r#"
seed = 1
output_dir = "out"

[dataset]
kind = "mnist"
mnist_dir = "mnist"

[model]
input_rows = 28
input_cols = 28
num_classes = 10

[[model.metalayers]]
[[model.metalayers.modules]]
glimpse = { kind = "full" }
hidden = [4]
output = 10
[[model.metalayers.modules]]
glimpse = { kind = "full" }
hidden = [4]
output = 10
[[model.metalayers.modules]]
glimpse = { kind = "full" }
hidden = [4]
output = 10
[[model.metalayers.modules]]
glimpse = { kind = "full" }
hidden = [4]
output = 10

[model.controller]
hidden = 8
pool = [4, 4]
gamma_inputs = 1

[train]
batch_size = 16
learning_rate = 0.1
steps = 30

[[train.preferences]]
kind = "batch_entropy"
distribution = { kind = "constant", value = 1.0 }

[sweep]
gamma_e = [1.0]
modes = ["sample"]

[ablation]
seeds = [1, 2]
gamma_e = 1.0
"#;

struct Fixture {
    _tmp: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn new(config: &str) -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().to_path_buf();
        write_fake_mnist(&root.join("mnist"));
        fs::write(root.join("experiment.toml"), config).unwrap();
        Self { _tmp: tmp, root }
    }

    fn config_path(&self) -> PathBuf {
        self.root.join("experiment.toml")
    }

    fn config(&self) -> ExperimentConfig {
        ExperimentConfig::load(self.config_path()).unwrap()
    }

    fn run(&self, out: &str) -> Run {
        Run::new(self.config(), Some(self.root.join(out))).unwrap()
    }
}

#[test]
fn gen_data_is_reproducible_and_provenance_matches_files() {
    let fx = Fixture::new(WIDE);
    let a = commands::cmd_gen_data(&fx.run("a")).unwrap();
    let b = commands::cmd_gen_data(&fx.run("b")).unwrap();
    assert_eq!(a.provenance.outputs, b.provenance.outputs);
    assert_eq!(a.provenance.outputs.len(), 4);
    for f in &a.provenance.outputs {
        let bytes = fs::read(a.dir.join(&f.file)).unwrap();
        assert_eq!(commands::sha256_hex(&bytes), f.sha256);
        assert_eq!(bytes.len() as u64, f.bytes);
    }
    let mut other = fx.config();
    other.dataset.synthesis_seed = Some(10);
    let c = commands::cmd_gen_data(&Run::new(other, Some(fx.root.join("c"))).unwrap()).unwrap();
    assert_ne!(
        a.provenance.outputs[0].sha256,
        c.provenance.outputs[0].sha256
    );
    // labels of the training split depend on the side draws too
    assert_ne!(
        a.provenance.outputs[1].sha256,
        c.provenance.outputs[1].sha256
    );
    // the written files read back as 28×56 with 20 classes
    let wide = composer_core::data::load_idx(
        a.dir.join("wide-mnist-train-images-idx3-ubyte"),
        a.dir.join("wide-mnist-train-labels-idx1-ubyte"),
    )
    .unwrap();
    assert_eq!((wide.len(), wide.rows(), wide.cols()), (300, 28, 56));
}

#[test]
fn zero_steps_writes_the_initial_model() {
    let fx = Fixture::new(&WIDE.replace("steps = 40", "steps = 0"));
    let run = fx.run("zero");
    let out = commands::cmd_train(&run, None).unwrap();
    let initial = Composer::new(run.config.model.clone()).unwrap();
    assert_eq!(
        fs::read(&out.checkpoint).unwrap(),
        to_bytes(&initial).unwrap()
    );
    assert_eq!(fs::read_to_string(&out.log).unwrap(), "");
}

#[test]
fn train_and_sweep_are_byte_reproducible() {
    let fx = Fixture::new(WIDE);
    let (a, b) = (fx.run("a"), fx.run("b"));
    let ta = commands::cmd_train(&a, None).unwrap();
    let tb = commands::cmd_train(&b, None).unwrap();
    assert_eq!(
        fs::read(a.path(CHECKPOINT)).unwrap(),
        fs::read(b.path(CHECKPOINT)).unwrap()
    );
    assert_eq!(ta.checkpoint_sha256, tb.checkpoint_sha256);
    let lines = fs::read_to_string(a.path(TRAIN_LOG)).unwrap();
    assert_eq!(lines.lines().count(), 40);
    assert_eq!(lines, fs::read_to_string(b.path(TRAIN_LOG)).unwrap());

    let sa = commands::cmd_sweep(&a, &a.path(CHECKPOINT)).unwrap();
    commands::cmd_sweep(&b, &b.path(CHECKPOINT)).unwrap();
    let csv = fs::read_to_string(a.path(SWEEP_CSV)).unwrap();
    assert_eq!(csv, fs::read_to_string(b.path(SWEEP_CSV)).unwrap());

    // |γ|·|modes| + |ρ| rows under the header
    assert_eq!(csv.lines().count(), 1 + 3 * 2 + 4);
    assert_eq!(sa.rows_written, 10);
    let hashes: Vec<&str> = csv
        .lines()
        .skip(1)
        .map(|l| l.rsplit(',').next().unwrap())
        .collect();
    assert!(hashes.iter().all(|h| *h == ta.checkpoint_sha256));
    assert!(csv.starts_with("gamma_g,gamma_e,accuracy,mean_param_use,mode,seed"));
}

#[test]
fn seed_override_changes_the_run() {
    let fx = Fixture::new(WIDE);
    let a = commands::cmd_train(&fx.run("a"), None).unwrap();
    let mut cfg = fx.config();
    cfg.set_seed(6);
    let b = commands::cmd_train(&Run::new(cfg, Some(fx.root.join("b"))).unwrap(), None).unwrap();
    assert_ne!(a.checkpoint_sha256, b.checkpoint_sha256);
}

#[test]
fn heatmap_rows_are_distributions() {
    let fx = Fixture::new(WIDE);
    let run = fx.run("h");
    commands::cmd_train(&run, None).unwrap();
    let out = commands::cmd_heatmap(&run, &run.path(CHECKPOINT)).unwrap();
    assert_eq!(out.files.len(), 3);
    for h in &out.heatmaps {
        assert_eq!(h.matrix.len(), 20);
        for (row, &count) in h.matrix.iter().zip(&h.class_counts) {
            if count > 0 {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }
    let text = fs::read_to_string(out.dir.join(&out.files[0].file)).unwrap();
    assert!(text.starts_with("label,module_1,module_2\n"));
    assert_eq!(text.lines().count(), 21);
}

#[test]
fn eval_reports_every_grid_point_and_mode() {
    let fx = Fixture::new(WIDE);
    let run = fx.run("e");
    commands::cmd_train(&run, None).unwrap();
    let entries = commands::cmd_eval(&run, &run.path(CHECKPOINT)).unwrap();
    assert_eq!(entries.len(), 6);
    for e in &entries {
        assert!((0.0..=1.0).contains(&e.point.accuracy));
        assert!(e.mutual_information >= 0.0 && e.mutual_information <= 2f64.ln() + 1e-12);
        assert!((e.mutual_information - e.mutual_information_per_metalayer[0]).abs() < 1e-12);
    }
}

#[test]
fn ablation_reports_two_values_per_seed() {
    let fx = Fixture::new(ABLATE);
    let run = fx.run("ab");
    let report = commands::cmd_ablate_entropy(&run).unwrap();
    assert_eq!(report.runs.len(), 4);
    for r in &report.runs {
        assert!(r.mutual_information >= 0.0 && r.mutual_information <= 4f64.ln() + 1e-12);
        assert!((r.choice_frequency[0].iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    assert_eq!(report.differences.len(), 2);
    assert_eq!(report.config, run.config);
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.path("ablation.json")).unwrap()).unwrap();
    assert_eq!(
        json["config"]["ablation"]["seeds"],
        serde_json::json!([1, 2])
    );
    assert_eq!(json["runs"].as_array().unwrap().len(), 4);
}

#[test]
fn sweep_topology_guard() {
    let fx =
        Fixture::new(&ABLATE.replace("modes = [\"sample\"]", "modes = [\"sample\"]\nrho = [0.5]"));
    let mut run = fx.run("g");
    run.config.train.steps = 0;
    commands::cmd_train(&run, None).unwrap();
    let err = commands::cmd_sweep(&run, &run.path(CHECKPOINT)).unwrap_err();
    assert!(matches!(err, composer_core::Error::Config(_)), "{err}");
}

fn composer(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_composer"))
        .args(args)
        .output()
        .unwrap();
    (
        out.status.code().unwrap(),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

#[test]
fn binary_exit_codes() {
    let fx = Fixture::new(WIDE);
    let config = fx.config_path();
    let config = config.to_str().unwrap();
    let out = fx.root.join("bin");
    let out = out.to_str().unwrap();

    let (code, stdout, _) =
        composer(&["train", "--config", config, "--out", out, "--workers", "2"]);
    assert_eq!(code, 0);
    assert!(stdout.contains("trained 40 steps"));
    let (code, _, _) = composer(&["sweep", "--config", config, "--out", out]);
    assert_eq!(code, 0);
    assert!(Path::new(out).join(SWEEP_CSV).is_file());
    // the config copy parses back to the same config
    let copy = ExperimentConfig::load(Path::new(out).join("config.toml")).unwrap();
    assert_eq!(copy, fx.config());

    // malformed config
    let bad = fx.root.join("bad.toml");
    fs::write(&bad, WIDE.replace("batch_size = 16", "batch_size = 0")).unwrap();
    let (code, _, stderr) = composer(&["train", "--config", bad.to_str().unwrap(), "--out", out]);
    assert_eq!(code, 2, "{stderr}");

    // missing data
    let missing = fx.root.join("missing.toml");
    fs::write(
        &missing,
        WIDE.replace("mnist_dir = \"mnist\"", "mnist_dir = \"nowhere\""),
    )
    .unwrap();
    let mout = fx.root.join("missing");
    let (code, _, stderr) = composer(&[
        "train",
        "--config",
        missing.to_str().unwrap(),
        "--out",
        mout.to_str().unwrap(),
    ]);
    assert_eq!(code, 3);
    assert!(stderr.contains("Download"), "{stderr}");

    // divergence keeps the last good checkpoint
    let wild = fx.root.join("wild.toml");
    fs::write(
        &wild,
        WIDE.replace("learning_rate = 0.1", "learning_rate = 1e300"),
    )
    .unwrap();
    let dout = fx.root.join("diverged");
    let (code, _, stderr) = composer(&[
        "train",
        "--config",
        wild.to_str().unwrap(),
        "--out",
        dout.to_str().unwrap(),
    ]);
    assert_eq!(code, 4, "{stderr}");
    let model = load_model(dout.join(CHECKPOINT)).unwrap();
    let finite = model
        .params()
        .param_ids()
        .all(|p| model.params().value(p).is_finite());
    assert!(finite);

    // usage errors and help
    let (code, _, _) = composer(&["train", "--no-such-flag"]);
    assert_eq!(code, 1);
    let (code, stdout, _) = composer(&["--help"]);
    assert_eq!(code, 0);
    assert!(stdout.contains("ablate-entropy"));
}

#[test]
fn shipped_configs_parse_and_match_presets() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let wide = ExperimentConfig::load(dir.join("wide_mnist.toml")).unwrap();
    assert_eq!(
        wide.model,
        composer_core::model::presets::wide_mnist(16, 64, 32, 1)
    );
    assert_eq!(wide.gamma_grid().unwrap().len(), 10);

    let ablation = ExperimentConfig::load(dir.join("entropy_ablation.toml")).unwrap();
    assert_eq!(
        ablation.model,
        composer_core::model::presets::mnist_equal_modules(4, 8, 32, 1)
    );
    assert_eq!(ablation.ablation.unwrap().seeds, vec![1, 2, 3]);
}

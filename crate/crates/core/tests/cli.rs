//! End-to-end checks of the command-line binary: artifact layout, exit
//! codes, determinism, and the report/eval/phantom surfaces.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ghost-unetpp"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const SMOKE_CONFIG: &str = r#"
[network]
depth = 2
base_channels = 4
num_classes = 4

[train]
learning_rate = 2e-3
batch_size = 4
max_epochs = 2
patience = 2
seed = 3

[data]
phantom_count = 12
ratios = [0.6, 0.2, 0.2]

[phantom]
height = 32
width = 32
"#;

fn write_smoke_config(dir: &Path) -> String {
    let path = dir.join("run.toml");
    std::fs::write(&path, SMOKE_CONFIG).unwrap();
    path.display().to_string()
}

/// PNG pixel dimensions straight from the IHDR chunk.
fn png_size(path: &Path) -> (u32, u32) {
    let bytes = std::fs::read(path).unwrap();
    let w = u32::from_be_bytes(bytes[16..20].try_into().unwrap());
    let h = u32::from_be_bytes(bytes[20..24].try_into().unwrap());
    (w, h)
}

#[test]
fn train_writes_checkpoint_history_and_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_smoke_config(dir.path());
    let out_dir = dir.path().join("run");
    let out = run(&["train", "--config", &config, "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));

    for file in ["config.toml", "history.jsonl", "summary.json", "metrics.tsv"] {
        assert!(out_dir.join(file).is_file(), "missing {file}");
    }
    for file in ["network.toml", "manifest.txt", "weights.bin"] {
        assert!(out_dir.join("checkpoint").join(file).is_file(), "missing checkpoint {file}");
    }
    let history = std::fs::read_to_string(out_dir.join("history.jsonl")).unwrap();
    let rows = history.lines().count();
    assert!((1..=30).contains(&rows), "history has {rows} rows");
    // The resolved config reparses and carries the overridden values.
    let resolved = std::fs::read_to_string(out_dir.join("config.toml")).unwrap();
    assert!(resolved.contains("max_epochs = 2"));
}

#[test]
fn train_seed_flag_makes_runs_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_smoke_config(dir.path());
    let mut histories = Vec::new();
    for name in ["a", "b"] {
        let out_dir = dir.path().join(name);
        let out = run(&[
            "train",
            "--config",
            &config,
            "--seed",
            "42",
            "--out",
            out_dir.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "stderr: {}", stderr(&out));
        histories.push(std::fs::read(out_dir.join("history.jsonl")).unwrap());
    }
    assert_eq!(histories[0], histories[1], "same seed must give identical history");
}

#[test]
fn train_rejects_bad_config_with_exit_2_and_key_name() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "[train]\nlerning_rate = 0.1\n").unwrap();
    let out = run(&["train", "--config", path.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("lerning_rate"), "stderr: {}", stderr(&out));
}

#[test]
fn train_reports_missing_masks_directory_with_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    std::fs::create_dir_all(root.join("images")).unwrap();
    let config_path = dir.path().join("run.toml");
    std::fs::write(
        &config_path,
        format!("[data]\nroot = \"{}\"\n", root.display()),
    )
    .unwrap();
    let out = run(&[
        "train",
        "--config",
        config_path.to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("masks"), "stderr: {}", stderr(&out));
}

#[test]
fn phantom_materializes_deterministic_loadable_datasets() {
    let dir = tempfile::tempdir().unwrap();
    let spec_path = dir.path().join("spec.toml");
    std::fs::write(&spec_path, "height = 32\nwidth = 32\nseed = 9\n").unwrap();
    let d1 = dir.path().join("d1");
    let d2 = dir.path().join("d2");
    for d in [&d1, &d2] {
        let out = run(&["phantom", "--spec", spec_path.to_str().unwrap(), "--n", "6", "--out", d.to_str().unwrap()]);
        assert!(out.status.success(), "stderr: {}", stderr(&out));
    }
    let images: Vec<_> = std::fs::read_dir(d1.join("images")).unwrap().collect();
    assert_eq!(images.len(), 6);
    for sub in ["images", "masks"] {
        let mut names: Vec<String> = std::fs::read_dir(d1.join(sub))
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        names.sort();
        for name in names {
            let a = std::fs::read(d1.join(sub).join(&name)).unwrap();
            let b = std::fs::read(d2.join(sub).join(&name)).unwrap();
            assert_eq!(a, b, "{sub}/{name} must be byte-identical across runs");
        }
    }
    // The materialized set loads cleanly.
    let report = ghost_unetpp::data::load_dataset(&d1, 4).unwrap();
    assert_eq!(report.samples.len(), 6);
    assert!(report.pairing_errors.is_empty());
    assert!(dir.path().join("d1").join("phantom.toml").is_file());
}

#[test]
fn eval_oracle_scores_ground_truth_at_one() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("ds");
    let out = run(&["phantom", "--n", "4", "--out", data.to_str().unwrap()]);
    assert!(out.status.success());
    let out = run(&["eval", "--data", data.to_str().unwrap(), "--classes", "4", "--oracle"]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let table = stdout(&out);
    let mut rows = 0;
    for line in table.lines().skip(1) {
        let fields: Vec<&str> = line.split('\t').collect();
        assert_eq!(fields.len(), 4, "row: {line}");
        assert_eq!(fields[0], "oracle");
        assert_eq!(fields[3], "1.0000", "row: {line}");
        rows += 1;
    }
    // 3 foreground classes + mean, for two metrics.
    assert_eq!(rows, 8);
}

#[test]
fn eval_requires_classes_to_match_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_smoke_config(dir.path());
    let run_dir = dir.path().join("run");
    let out = run(&["train", "--config", &config, "--out", run_dir.to_str().unwrap()]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));

    let data = dir.path().join("ds");
    assert!(run(&["phantom", "--n", "4", "--out", data.to_str().unwrap()]).status.success());

    let checkpoint = run_dir.join("checkpoint");
    let out = run(&[
        "eval",
        "--checkpoint",
        checkpoint.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--classes",
        "3",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("classes"), "stderr: {}", stderr(&out));

    // Matching class count evaluates fine and prints a model table.
    let out = run(&[
        "eval",
        "--checkpoint",
        checkpoint.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    assert!(stdout(&out).starts_with("method\tmetric\tclass\tvalue"));
}

#[test]
fn report_renders_one_five_panel_image_per_sample() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_smoke_config(dir.path());
    let run_dir = dir.path().join("run");
    assert!(run(&["train", "--config", &config, "--out", run_dir.to_str().unwrap()])
        .status
        .success());
    let data = dir.path().join("ds");
    let spec_path = dir.path().join("spec.toml");
    std::fs::write(&spec_path, "height = 32\nwidth = 32\n").unwrap();
    assert!(run(&["phantom", "--spec", spec_path.to_str().unwrap(), "--n", "5", "--out", data.to_str().unwrap()])
        .status
        .success());

    let outdir = dir.path().join("reports");
    let out = run(&[
        "report",
        "--checkpoint",
        run_dir.join("checkpoint").to_str().unwrap(),
        "--input",
        data.join("images").to_str().unwrap(),
        "--gt",
        data.join("masks").to_str().unwrap(),
        "--outdir",
        outdir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));

    let panels: Vec<_> = std::fs::read_dir(&outdir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("png"))
        .collect();
    assert_eq!(panels.len(), 5, "one panel image per sample");
    for p in &panels {
        let (w, h) = png_size(p);
        assert_eq!((w, h), (5 * 32 + 4 * 2, 32), "{}", p.display());
    }
    assert!(outdir.join("network.toml").is_file(), "report records its architecture");
}

#[test]
fn report_rejects_unpaired_inputs_with_itemized_errors() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_smoke_config(dir.path());
    let run_dir = dir.path().join("run");
    assert!(run(&["train", "--config", &config, "--out", run_dir.to_str().unwrap()])
        .status
        .success());
    let data = dir.path().join("ds");
    assert!(run(&["phantom", "--n", "3", "--out", data.to_str().unwrap()]).status.success());
    // Orphan an image by removing its mask.
    std::fs::remove_file(data.join("masks").join("p0001.png")).unwrap();

    let out = run(&[
        "report",
        "--checkpoint",
        run_dir.join("checkpoint").to_str().unwrap(),
        "--input",
        data.join("images").to_str().unwrap(),
        "--gt",
        data.join("masks").to_str().unwrap(),
        "--outdir",
        dir.path().join("reports").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("p0001"), "stderr: {}", stderr(&out));
}

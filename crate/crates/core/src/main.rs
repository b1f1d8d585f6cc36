//! Command-line surface: train, evaluate, render qualitative reports, and
//! materialize synthetic phantom datasets.
//!
//! Exit codes: 0 success, 2 configuration/usage error, 3 data error,
//! 4 numerical failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ghost_unetpp::checkpoint::{load_checkpoint, save_checkpoint, HEADER_FILE};
use ghost_unetpp::config::RunConfig;
use ghost_unetpp::data::phantom::{generate_phantom, materialize_phantoms, PhantomSpec};
use ghost_unetpp::data::{load_dataset, load_pairs, preprocess, split, LoadReport, SegmentationSample};
use ghost_unetpp::error::{Error, Result};
use ghost_unetpp::network::Network;
use ghost_unetpp::report::render_panels;
use ghost_unetpp::training::{evaluate_network, train, TrainConfig};

#[derive(Parser)]
#[command(name = "ghost-unetpp", version, about = "Nested ghost-convolution segmentation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network from a TOML run configuration.
    Train {
        /// Run configuration file.
        #[arg(long)]
        config: PathBuf,
        /// Override the training seed from the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (resolved config, checkpoint, history).
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset and print per-class Dice/Jaccard.
    Eval {
        /// Checkpoint directory (omit with --oracle to score ground truth
        /// against itself).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset root holding images/ and masks/.
        #[arg(long)]
        data: PathBuf,
        /// Expected class count; must match the checkpoint when both given.
        #[arg(long)]
        classes: Option<usize>,
        /// Score the ground truth against itself (sanity oracle).
        #[arg(long)]
        oracle: bool,
    },
    /// Render five-panel reports: original, ground truth, prediction,
    /// differences, and overlay.
    Report {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory of input images.
        #[arg(long)]
        input: PathBuf,
        /// Directory of ground-truth masks paired by file stem.
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        outdir: PathBuf,
    },
    /// Materialize a synthetic phantom dataset in images/ + masks/ layout.
    Phantom {
        /// Optional TOML file with phantom generator settings.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Number of samples to generate.
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config, seed, out } => cmd_train(&config, seed, &out),
        Command::Eval { checkpoint, data, classes, oracle } => {
            cmd_eval(checkpoint.as_deref(), &data, classes, oracle)
        }
        Command::Report { checkpoint, input, gt, outdir } => {
            cmd_report(&checkpoint, &input, &gt, &outdir)
        }
        Command::Phantom { spec, n, out } => cmd_phantom(spec.as_deref(), n, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

/// Surfaces pairing problems as one itemized data error and prints
/// skip warnings to stderr; returns the usable samples.
fn accept_report(report: LoadReport) -> Result<Vec<SegmentationSample>> {
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    if !report.pairing_errors.is_empty() {
        return Err(Error::data(format!(
            "dataset has {} pairing problem(s):\n  {}",
            report.pairing_errors.len(),
            report.pairing_errors.join("\n  ")
        )));
    }
    Ok(report.samples)
}

/// Resample (when a target size is configured) and normalize every sample.
fn preprocess_all(
    samples: Vec<SegmentationSample>,
    target: Option<[usize; 2]>,
) -> Vec<SegmentationSample> {
    let mut constant = 0usize;
    let out: Vec<SegmentationSample> = samples
        .into_iter()
        .map(|s| {
            let t = target.map(|[h, w]| (h, w)).unwrap_or_else(|| s.image.dim());
            let (p, flat) = preprocess(&s.image, &s.mask, t, &s.identifier, &s.subject_id);
            if flat {
                constant += 1;
            }
            p
        })
        .collect();
    if constant > 0 {
        eprintln!("warning: {constant} constant-intensity image(s) normalized to zeros");
    }
    out
}

fn gather_samples(config: &RunConfig) -> Result<Vec<SegmentationSample>> {
    let raw = match &config.data.root {
        Some(root) => accept_report(load_dataset(root, config.network.num_classes)?)?,
        None => {
            let mut samples = Vec::with_capacity(config.data.phantom_count);
            for i in 0..config.data.phantom_count {
                let spec = PhantomSpec {
                    seed: config.phantom.seed + i as u64,
                    ..config.phantom.clone()
                };
                samples.push(generate_phantom(&spec)?);
            }
            samples
        }
    };
    if raw.is_empty() {
        return Err(Error::data("dataset is empty"));
    }
    Ok(preprocess_all(raw, config.data.target_size))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn cmd_train(config_path: &Path, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut config = RunConfig::from_path(config_path)?;
    if let Some(s) = seed {
        config.train.seed = s;
    }
    config.write_resolved(out)?;

    let samples = gather_samples(&config)?;
    let [tr, va, te] = config.data.ratios;
    let (train_set, val_set, test_set) = split(samples, (tr, va, te), config.data.split_seed)?;
    println!(
        "split: {} train / {} val / {} test samples",
        train_set.len(),
        val_set.len(),
        test_set.len()
    );

    let (net, mut ps) = Network::build::<f32>(&config.network, config.train.seed)?;
    let outcome = train(&net, &mut ps, &train_set, &val_set, &config.train, &config.augment)?;

    save_checkpoint(&out.join("checkpoint"), &config.network, config.train.seed, &outcome.best_params)?;
    write_text(&out.join("history.jsonl"), &outcome.history.to_jsonl())?;
    write_text(&out.join("summary.json"), &outcome.history.summary_json())?;

    if !test_set.is_empty() {
        let mut best = outcome.best_params.clone();
        let (_, record, _) = evaluate_network(&net, &mut best, &test_set, config.train.batch_size, &config.train)?;
        let table = record.render("model");
        write_text(&out.join("metrics.tsv"), &table)?;
        print!("{table}");
    }
    println!(
        "trained {} epoch(s); best epoch {} with val dice {:.4}; outputs in {}",
        outcome.history.records.len(),
        outcome.history.best_epoch,
        outcome.history.best_val_dice,
        out.display()
    );
    Ok(())
}

fn cmd_eval(
    checkpoint: Option<&Path>,
    data: &Path,
    classes: Option<usize>,
    oracle: bool,
) -> Result<()> {
    let loaded = checkpoint.map(load_checkpoint).transpose()?;
    let num_classes = match (&loaded, classes) {
        (Some((_, _, header)), Some(c)) => {
            if header.network.num_classes != c {
                return Err(Error::usage(format!(
                    "checkpoint was trained with {} classes, --classes says {c}",
                    header.network.num_classes
                )));
            }
            c
        }
        (Some((_, _, header)), None) => header.network.num_classes,
        (None, Some(c)) => c,
        (None, None) => {
            return Err(Error::usage("--classes is required when no checkpoint is given"))
        }
    };
    let samples = preprocess_all(accept_report(load_dataset(data, num_classes)?)?, None);
    if samples.is_empty() {
        return Err(Error::data(format!("no usable samples under {}", data.display())));
    }

    let record = if oracle {
        let gts: Vec<_> = samples.iter().map(|s| s.mask.clone()).collect();
        ghost_unetpp::metrics::evaluate(&gts, &gts, num_classes)?
    } else {
        let (net, mut ps, _) = loaded
            .ok_or_else(|| Error::usage("--checkpoint is required unless --oracle is set"))?;
        let (_, record, _) = evaluate_network(&net, &mut ps, &samples, 16, &TrainConfig::default())?;
        record
    };
    print!("{}", record.render(if oracle { "oracle" } else { "model" }));
    Ok(())
}

fn cmd_report(checkpoint: &Path, input: &Path, gt: &Path, outdir: &Path) -> Result<()> {
    let (net, mut ps, header) = load_checkpoint(checkpoint)?;
    let samples = preprocess_all(accept_report(load_pairs(input, gt, header.network.num_classes)?)?, None);
    if samples.is_empty() {
        return Err(Error::data("no paired samples to report on"));
    }
    let (_, _, preds) = evaluate_network(&net, &mut ps, &samples, 16, &TrainConfig::default())?;

    std::fs::create_dir_all(outdir).map_err(|e| Error::io(outdir, e))?;
    // Record the architecture the panels were produced with.
    let header_toml = toml::to_string_pretty(&header)
        .map_err(|e| Error::config(format!("header: {e}")))?;
    write_text(&outdir.join(HEADER_FILE), &header_toml)?;

    for (sample, pred) in samples.iter().zip(&preds) {
        let canvas = render_panels(&sample.image, &sample.mask, pred)?;
        let stem = Path::new(&sample.identifier)
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("sample")
            .to_string();
        let path = outdir.join(format!("{stem}_panels.png"));
        canvas.save(&path).map_err(|e| Error::data(format!("cannot write {}: {e}", path.display())))?;
    }
    println!("wrote {} report image(s) to {}", samples.len(), outdir.display());
    Ok(())
}

fn cmd_phantom(spec_path: Option<&Path>, n: usize, out: &Path) -> Result<()> {
    let spec = match spec_path {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let spec: PhantomSpec = toml::from_str(&text)
                .map_err(|e| Error::config(format!("{}: {}", path.display(), e.message())))?;
            spec.validate()?;
            spec
        }
        None => PhantomSpec::default(),
    };
    if n == 0 {
        return Err(Error::usage("--n must be at least 1"));
    }
    materialize_phantoms(out, &spec, n)?;
    let resolved = toml::to_string_pretty(&spec)
        .map_err(|e| Error::config(format!("phantom spec: {e}")))?;
    write_text(&out.join("phantom.toml"), &resolved)?;
    println!("wrote {n} phantom sample(s) to {}", out.display());
    Ok(())
}

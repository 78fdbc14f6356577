use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use snadv::attacks::{AttackConfig, AttackFamily};
use snadv::capacity::{accuracy, CapacityReport, CapacitySettings};
use snadv::harness::{resolve_output, run_experiment, DatasetSpec, LabeledDataset, load_idx};
use snadv::netcore::{load_network, ConvGeometry, Network, Tensor};
use snadv::specnorm::{audit_kernel, SnConfig};

#[derive(Parser)]
#[command(name = "snadv", version, about = "Spectrally normalized adversarial training experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a β sweep described by an experiment config.
    Run { config: PathBuf },
    /// Compare a convolution's operator norm with its flattened-kernel norm.
    Specnorm {
        kernel: PathBuf,
        #[arg(long, default_value_t = 200)]
        iters: usize,
        #[arg(long, default_value_t = 1e-9)]
        tolerance: f64,
        /// Also write the JSON to this path (relative to $SNADV_OUT).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Accuracy of a checkpoint under an attack.
    AttackEval {
        checkpoint: PathBuf,
        /// Dataset spec (.json) or an IDX image file.
        dataset: PathBuf,
        attack: PathBuf,
        /// IDX label file when `dataset` is an image file.
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Capacity report of a checkpoint on a dataset.
    Capacity {
        checkpoint: PathBuf,
        dataset: PathBuf,
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Absolute attack radius; defaults to 0.05·mean sample norm.
        #[arg(long)]
        epsilon: Option<f64>,
        /// Absolute WRM coefficient; defaults to 0.04·mean sample norm.
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Deserialize)]
struct KernelFile {
    geometry: ConvGeometry,
    /// Row-major `[out, in, kh, kw]` weights.
    kernel: Vec<f64>,
}

#[derive(Serialize)]
struct AttackEval {
    samples: usize,
    attack: AttackConfig,
    clean_accuracy: f64,
    adversarial_accuracy: f64,
}

fn load_dataset(path: &Path, labels: Option<&Path>) -> anyhow::Result<LabeledDataset> {
    if path.extension().is_some_and(|e| e == "json") {
        let (spec, base) = DatasetSpec::from_file(path)?;
        return Ok(spec.load(&base)?);
    }
    let labels = match labels {
        Some(l) => l.to_path_buf(),
        None => {
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            if !name.contains("images") {
                bail!(snadv::Error::Input(format!(
                    "cannot infer a label file for {}; pass --labels",
                    path.display()
                )));
            }
            // MNIST naming: train-images-idx3-ubyte → train-labels-idx1-ubyte
            path.with_file_name(name.replace("images-idx3", "labels-idx1").replace("images", "labels"))
        }
    };
    load_idx(path, &labels).with_context(|| format!("loading {} with labels {}", path.display(), labels.display()))
}

fn emit(json: String, out: Option<&Path>) -> anyhow::Result<()> {
    if let Some(out) = out {
        let path = resolve_output(out);
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(snadv::Error::from)?;
        }
        std::fs::write(&path, format!("{json}\n"))
            .map_err(snadv::Error::from)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    println!("{json}");
    Ok(())
}

fn check_input(net: &Network, ds: &LabeledDataset) -> anyhow::Result<()> {
    if net.input_len() != ds.dim() {
        bail!(snadv::Error::Input(format!(
            "dataset samples have {} values, network expects {}",
            ds.dim(),
            net.input_len()
        )));
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Run { config } => {
            let outcome = run_experiment(&config)?;
            let s = &outcome.summary;
            for r in &s.runs {
                eprintln!(
                    "beta={:<6} val_acc={:.4} val_adv_acc={:.4} gap={:.4}",
                    r.beta.to_string(),
                    r.validation_accuracy,
                    r.validation_adversarial_accuracy,
                    r.adversarial_gap
                );
            }
            println!("best_beta={} summary={}", s.best_beta, outcome.output_dir.join("summary.json").display());
            if let Some(e) = outcome.error {
                return Err(e.into());
            }
        }
        Command::Specnorm {
            kernel,
            iters,
            tolerance,
            out,
        } => {
            let text = std::fs::read_to_string(&kernel)
                .map_err(snadv::Error::from)
                .with_context(|| format!("reading {}", kernel.display()))?;
            let file: KernelFile = serde_json::from_str(&text).map_err(snadv::Error::from)?;
            let k = Tensor::new(file.geometry.kernel_shape().to_vec(), file.kernel)?;
            let cfg = SnConfig {
                eval_iters: iters,
                tolerance,
                ..SnConfig::new(f64::INFINITY)
            };
            cfg.validate()?;
            let audit = audit_kernel(&k, &file.geometry, &cfg)?;
            emit(serde_json::to_string_pretty(&audit)?, out.as_deref())?;
        }
        Command::AttackEval {
            checkpoint,
            dataset,
            attack,
            labels,
            out,
        } => {
            let net = load_network(&checkpoint)?;
            let ds = load_dataset(&dataset, labels.as_deref())?;
            check_input(&net, &ds)?;
            let text = std::fs::read_to_string(&attack).map_err(snadv::Error::from)?;
            let cfg: AttackConfig = serde_json::from_str(&text).map_err(snadv::Error::from)?;
            cfg.validate()?;
            let clean = accuracy(&net, &ds, &AttackConfig::none())?;
            let adversarial = if cfg.family == AttackFamily::None {
                clean
            } else {
                accuracy(&net, &ds, &cfg)?
            };
            let report = AttackEval {
                samples: ds.len(),
                attack: cfg,
                clean_accuracy: clean,
                adversarial_accuracy: adversarial,
            };
            emit(serde_json::to_string_pretty(&report)?, out.as_deref())?;
        }
        Command::Capacity {
            checkpoint,
            dataset,
            labels,
            epsilon,
            lambda,
            out,
        } => {
            let net = load_network(&checkpoint)?;
            let ds = load_dataset(&dataset, labels.as_deref())?;
            check_input(&net, &ds)?;
            let mean = ds.mean_norm();
            let settings = CapacitySettings::new(epsilon.unwrap_or(0.05 * mean), lambda.unwrap_or(0.04 * mean));
            let report = CapacityReport::compute(&net, &ds, &settings)?;
            emit(report.to_json(), out.as_deref())?;
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    err.chain()
        .find_map(|e| e.downcast_ref::<snadv::Error>())
        .map_or(1, |e| e.exit_code() as u8)
}

/// The error chain, skipping causes already quoted by their parent.
fn describe(err: &anyhow::Error) -> String {
    let mut out = String::new();
    let mut prev = String::new();
    for cause in err.chain() {
        let msg = cause.to_string();
        if !prev.ends_with(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
        prev = msg;
    }
    out
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}

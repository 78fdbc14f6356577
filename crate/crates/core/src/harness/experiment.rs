//! Experiment configuration, the β sweep, and report emission.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::de::{self, Deserializer};
use serde::{Deserialize, Serialize, Serializer};

use super::dataset::{randomize_labels, synthetic_gaussian, LabeledDataset};
use super::idx::load_idx;
use crate::attacks::{AttackConfig, AttackFamily, Norm};
use crate::capacity::{normalized_margin_histogram, CapacityReport};
use crate::error::{Error, Result};
use crate::netcore::{Network, NetworkSpec};
use crate::specnorm::SnConfig;
use crate::trainer::{
    checkpoint, evaluate_robustness, robustness_csv, train_with_validation, RobustnessPoint,
    TrainConfig, TrainReport,
};

/// Environment variable naming the root for relative output directories.
pub const OUTPUT_ROOT_ENV: &str = "SNADV_OUT";

/// File names emitted into every per-β directory.
pub const REPORT_FILES: [&str; 5] = [
    "curves.csv",
    "capacity.json",
    "margins_raw.csv",
    "margins_normalized.csv",
    "robustness.csv",
];
pub const SUMMARY_FILE: &str = "summary.json";
pub const FAILURE_FILE: &str = "failure.json";

/// Largest β grid accepted; the sweep protocol uses 4–6 values.
pub const MAX_BETA_GRID: usize = 6;

/// A spectral-normalization bound; `Inf` is the unconstrained baseline.
/// Serialized as a JSON number, or the string `"inf"`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Beta {
    Finite(f64),
    Inf,
}

impl Beta {
    pub fn value(self) -> f64 {
        match self {
            Beta::Finite(b) => b,
            Beta::Inf => f64::INFINITY,
        }
    }

    pub fn dir_name(self) -> String {
        format!("beta_{self}")
    }
}

impl fmt::Display for Beta {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Beta::Finite(b) => write!(f, "{b}"),
            Beta::Inf => f.write_str("inf"),
        }
    }
}

impl Serialize for Beta {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Beta::Finite(b) => s.serialize_f64(*b),
            Beta::Inf => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Beta {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(b) => Ok(Beta::Finite(b)),
            Raw::Str(s) if s == "inf" => Ok(Beta::Inf),
            Raw::Str(s) => Err(de::Error::custom(format!("expected a number or \"inf\", got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelNoise {
    pub fraction: f64,
    pub seed: u64,
}

/// Where samples come from. Relative IDX paths resolve against the
/// directory of the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    Idx {
        images: PathBuf,
        labels: PathBuf,
        /// Keep only the first `limit` samples.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        limit: Option<usize>,
    },
    Synthetic {
        classes: usize,
        dim: usize,
        n: usize,
        separation: f64,
        seed: u64,
    },
}

impl DatasetSpec {
    pub fn load(&self, base: &Path) -> Result<LabeledDataset> {
        match self {
            DatasetSpec::Idx { images, labels, limit } => {
                let ds = load_idx(&base.join(images), &base.join(labels))?;
                Ok(match limit {
                    Some(n) if *n < ds.len() => ds.head(*n),
                    _ => ds,
                })
            }
            DatasetSpec::Synthetic {
                classes,
                dim,
                n,
                separation,
                seed,
            } => synthetic_gaussian(*classes, *dim, *n, *separation, *seed),
        }
    }

    /// Read a standalone dataset spec file.
    pub fn from_file(path: &Path) -> Result<(Self, PathBuf)> {
        let spec: DatasetSpec = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        Ok((spec, parent_dir(path)))
    }
}

/// Attack strengths as multiples of the mean training-sample norm Ê‖X‖₂.
/// When set they override the absolute values in the training attack.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AttackScale {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
}

/// Relative ε multipliers for FGM/PGM curves (λ multipliers for WRM).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessSpec {
    pub family: AttackFamily,
    #[serde(default)]
    pub norm: Norm,
    pub relative_grid: Vec<f64>,
}

impl RobustnessSpec {
    fn default_for(attack: &AttackConfig) -> Self {
        match attack.family {
            AttackFamily::Wrm => Self {
                family: AttackFamily::Wrm,
                norm: Norm::L2,
                relative_grid: vec![0.01, 0.02, 0.04, 0.08, 0.16],
            },
            AttackFamily::None => Self {
                family: AttackFamily::Fgm,
                norm: Norm::L2,
                relative_grid: vec![0.0, 0.025, 0.05, 0.075, 0.1],
            },
            family => Self {
                family,
                norm: attack.norm,
                relative_grid: vec![0.0, 0.025, 0.05, 0.075, 0.1],
            },
        }
    }
}

fn default_name() -> String {
    "experiment".into()
}
fn default_bins() -> usize {
    30
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    /// Seeds network initialization, the validation split and training.
    pub seed: u64,
    /// Joined onto `$SNADV_OUT` (or the working directory) when relative.
    pub output_dir: PathBuf,
    pub dataset: DatasetSpec,
    /// Randomize training labels (validation labels stay clean).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_noise: Option<LabelNoise>,
    pub network: NetworkSpec,
    pub train: TrainConfig,
    #[serde(default)]
    pub attack_scale: AttackScale,
    /// Finite β values swept in addition to the unconstrained baseline.
    #[serde(default)]
    pub beta_grid: Vec<f64>,
    /// Power-iteration settings for the sweep; `beta` is overridden.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sn: Option<SnConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub robustness: Option<RobustnessSpec>,
    #[serde(default = "default_bins")]
    pub margin_bins: usize,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::config(format!("experiment config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.beta_grid.len() > MAX_BETA_GRID {
            return Err(Error::config(format!(
                "beta grid has {} values, at most {MAX_BETA_GRID} allowed",
                self.beta_grid.len()
            )));
        }
        if let Some(&b) = self.beta_grid.iter().find(|b| !(**b > 0.0) || !b.is_finite()) {
            return Err(Error::config(format!("beta grid values must be positive and finite, got {b}")));
        }
        if self.train.sn.is_some() {
            return Err(Error::config("set spectral normalization through beta_grid / sn, not train.sn"));
        }
        for s in [self.attack_scale.epsilon, self.attack_scale.lambda].into_iter().flatten() {
            if !(s >= 0.0) || !s.is_finite() {
                return Err(Error::config(format!("attack scale must be >= 0, got {s}")));
            }
        }
        if self.attack_scale.lambda == Some(0.0) {
            return Err(Error::config("relative lambda must be > 0"));
        }
        if let Some(r) = &self.robustness {
            if r.relative_grid.is_empty() || r.relative_grid.windows(2).any(|w| !(w[0] < w[1])) {
                return Err(Error::config("robustness grid must be nonempty and strictly ascending"));
            }
            if r.relative_grid.iter().any(|v| !(*v >= 0.0)) {
                return Err(Error::config("robustness grid values must be >= 0"));
            }
        }
        if let Some(n) = &self.label_noise {
            if !(0.0..=1.0).contains(&n.fraction) {
                return Err(Error::config(format!("label noise fraction must be in [0, 1], got {}", n.fraction)));
            }
        }
        if self.margin_bins == 0 {
            return Err(Error::config("margin_bins must be >= 1"));
        }
        if let Some(sn) = &self.sn {
            SnConfig { beta: 1.0, ..*sn }.validate()?;
        }
        self.network.validate()?;
        // scaled strengths are filled in once the data is loaded
        let mut train = self.train.clone();
        if self.attack_scale.epsilon.is_some() {
            train.attack.epsilon = 1.0;
        }
        if self.attack_scale.lambda.is_some() {
            train.attack.wrm_lambda = 1.0;
        }
        train.validate()
    }

    /// Output directory after applying the output root.
    pub fn resolved_output_dir(&self) -> PathBuf {
        resolve_output(&self.output_dir)
    }
}

/// Resolve `path` against `$SNADV_OUT` when it is relative.
pub fn resolve_output(path: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if !root.is_empty() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}

fn parent_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Everything one β run produces, before it is written out.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub beta: Beta,
    pub report: TrainReport,
    pub capacity: CapacityReport,
    pub margins_raw_csv: String,
    pub margins_normalized_csv: String,
    pub robustness: Vec<RobustnessPoint>,
    pub robustness_family: AttackFamily,
    pub network: Network,
}

/// Write the five per-run reports into `out_dir`; returns their paths.
pub fn emit_reports(run: &RunArtifacts, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let contents = [
        run.report.to_csv(),
        format!("{}\n", serde_json::to_string_pretty(&run.capacity)?),
        run.margins_raw_csv.clone(),
        run.margins_normalized_csv.clone(),
        robustness_csv(run.robustness_family, &run.robustness),
    ];
    let mut manifest = Vec::with_capacity(REPORT_FILES.len());
    for (name, body) in REPORT_FILES.iter().zip(contents) {
        let path = out_dir.join(name);
        std::fs::write(&path, body)?;
        manifest.push(path);
    }
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub beta: Beta,
    pub directory: String,
    pub steps: usize,
    pub train_accuracy: f64,
    pub validation_accuracy: f64,
    pub train_adversarial_accuracy: f64,
    pub validation_adversarial_accuracy: f64,
    /// Train minus validation adversarial accuracy.
    pub adversarial_gap: f64,
    pub spectral_norms: Vec<f64>,
    pub phi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub name: String,
    pub seed: u64,
    pub train_samples: usize,
    pub validation_samples: usize,
    pub mean_norm: f64,
    pub attack: AttackConfig,
    pub beta_grid: Vec<f64>,
    /// Validation metric β is selected on.
    pub selection_metric: String,
    pub best_beta: Beta,
    pub runs: Vec<RunSummary>,
    pub failures: Vec<RunFailure>,
}

impl ExperimentSummary {
    pub fn run(&self, beta: Beta) -> Option<&RunSummary> {
        self.runs.iter().find(|r| r.beta == beta)
    }

    pub fn best(&self) -> Option<&RunSummary> {
        self.run(self.best_beta)
    }

    pub fn baseline(&self) -> Option<&RunSummary> {
        self.run(Beta::Inf)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub beta: Beta,
    pub exit_code: i32,
    pub error: String,
}

/// Outcome of a sweep. `error` holds the first sub-run failure, if any;
/// the summary and all completed runs are written regardless.
#[derive(Debug)]
pub struct ExperimentOutcome {
    pub summary: ExperimentSummary,
    pub output_dir: PathBuf,
    pub manifest: Vec<PathBuf>,
    pub error: Option<Error>,
}

/// Prepared inputs shared by every β run.
struct Prepared {
    train: LabeledDataset,
    val: LabeledDataset,
    train_cfg: TrainConfig,
    robustness: RobustnessSpec,
    robustness_grid: Vec<f64>,
    mean_norm: f64,
}

fn prepare(cfg: &ExperimentConfig, base: &Path) -> Result<Prepared> {
    let data = cfg.dataset.load(base)?;
    if data.dim() != cfg.network.input_len() {
        return Err(Error::config(format!(
            "dataset samples have {} values, network expects {}",
            data.dim(),
            cfg.network.input_len()
        )));
    }
    if data.classes() > cfg.network.classes() {
        return Err(Error::config(format!(
            "dataset has {} classes, network outputs {}",
            data.classes(),
            cfg.network.classes()
        )));
    }
    let (mut train, val) = data.split(cfg.train.validation_size, cfg.seed)?;
    if let Some(noise) = cfg.label_noise {
        train = randomize_labels(&train, noise.fraction, noise.seed)?;
    }
    let mean_norm = train.mean_norm();
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = cfg.seed;
    if let Some(e) = cfg.attack_scale.epsilon {
        train_cfg.attack.epsilon = e * mean_norm;
    }
    if let Some(l) = cfg.attack_scale.lambda {
        train_cfg.attack.wrm_lambda = l * mean_norm;
    }
    train_cfg.attack.validate()?;
    let robustness = cfg
        .robustness
        .clone()
        .unwrap_or_else(|| RobustnessSpec::default_for(&train_cfg.attack));
    let robustness_grid = robustness.relative_grid.iter().map(|r| r * mean_norm).collect();
    Ok(Prepared {
        train,
        val,
        train_cfg,
        robustness,
        robustness_grid,
        mean_norm,
    })
}

fn run_one(cfg: &ExperimentConfig, prep: &Prepared, beta: Beta) -> Result<RunArtifacts> {
    let mut net = Network::new(&cfg.network, cfg.seed)?;
    let mut train_cfg = prep.train_cfg.clone();
    train_cfg.sn = match beta {
        Beta::Finite(b) => Some(SnConfig {
            beta: b,
            ..cfg.sn.unwrap_or_else(|| SnConfig::new(b))
        }),
        Beta::Inf => None,
    };
    train_cfg.capacity_report = true;
    let report = train_with_validation(&train_cfg, &mut net, &prep.train, &prep.val)?;
    let capacity = report.capacity.clone().expect("capacity report requested");
    let hist = normalized_margin_histogram(&net, &prep.train, &train_cfg.attack, cfg.margin_bins)?;
    let mut base = match prep.robustness.family {
        AttackFamily::Wrm => prep.train_cfg.attack,
        _ => AttackConfig::fgm(prep.robustness.norm, 0.0),
    };
    if prep.robustness.family == AttackFamily::Pgm {
        base = AttackConfig {
            pgm_steps: prep.train_cfg.attack.pgm_steps,
            ..AttackConfig::pgm(prep.robustness.norm, 0.0)
        };
    }
    let robustness = evaluate_robustness(&net, &prep.val, prep.robustness.family, &prep.robustness_grid, &base)?;
    Ok(RunArtifacts {
        beta,
        report,
        capacity,
        margins_raw_csv: hist.raw.to_csv(),
        margins_normalized_csv: hist.normalized.to_csv(),
        robustness,
        robustness_family: prep.robustness.family,
        network: net,
    })
}

fn summarize(run: &RunArtifacts, phi: f64) -> RunSummary {
    let last = run.report.last();
    RunSummary {
        beta: run.beta,
        directory: run.beta.dir_name(),
        steps: run.report.steps,
        train_accuracy: last.train_accuracy,
        validation_accuracy: last.validation_accuracy,
        train_adversarial_accuracy: last.train_adversarial_accuracy,
        validation_adversarial_accuracy: last.validation_adversarial_accuracy,
        adversarial_gap: last.train_adversarial_accuracy - last.validation_adversarial_accuracy,
        spectral_norms: last.spectral_norms.clone(),
        phi,
    }
}

fn phi_of(capacity: &CapacityReport, family: AttackFamily) -> f64 {
    match family {
        AttackFamily::None => capacity.phi_erm,
        AttackFamily::Fgm => capacity.phi_fgm,
        AttackFamily::Pgm => capacity.phi_pgm,
        AttackFamily::Wrm => capacity.phi_wrm.unwrap_or(f64::INFINITY),
    }
}

/// Pick the finite β with the best validation score; ties go to the
/// smaller β. Falls back to `Inf` when no finite run completed.
pub fn select_beta(runs: &[RunSummary], adversarial: bool) -> Beta {
    let score = |r: &RunSummary| {
        if adversarial {
            r.validation_adversarial_accuracy
        } else {
            r.validation_accuracy
        }
    };
    let mut best: Option<(&RunSummary, f64)> = None;
    for r in runs.iter().filter(|r| matches!(r.beta, Beta::Finite(_))) {
        let s = score(r);
        best = match best {
            None => Some((r, s)),
            Some((b, bs)) if s > bs || (s == bs && r.beta.value() < b.beta.value()) => Some((r, s)),
            keep => keep,
        };
    }
    best.map_or(Beta::Inf, |(r, _)| r.beta)
}

/// Read, validate and run the experiment at `config_path`.
pub fn run_experiment(config_path: &Path) -> Result<ExperimentOutcome> {
    let text = std::fs::read_to_string(config_path)?;
    let cfg = ExperimentConfig::from_json(&text)?;
    run_experiment_config(&cfg, &parent_dir(config_path))
}

/// Run every β in the grid plus the unconstrained baseline. Dataset paths
/// resolve against `base`.
pub fn run_experiment_config(cfg: &ExperimentConfig, base: &Path) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let out = cfg.resolved_output_dir();
    std::fs::create_dir_all(&out)?;
    let prep = match prepare(cfg, base) {
        Ok(p) => p,
        Err(e) => {
            write_failure(&out, &[failure(Beta::Inf, &e)])?;
            return Err(e);
        }
    };
    let betas: Vec<Beta> = cfg
        .beta_grid
        .iter()
        .map(|&b| Beta::Finite(b))
        .chain(std::iter::once(Beta::Inf))
        .collect();
    let family = prep.train_cfg.attack.family;
    let mut runs = Vec::new();
    let mut failures = Vec::new();
    let mut manifest = Vec::new();
    let mut first_error = None;
    for beta in betas {
        let result = run_one(cfg, &prep, beta).and_then(|run| {
            let dir = out.join(beta.dir_name());
            let files = emit_reports(&run, &dir)?;
            let ckpt_dir = out.join("checkpoints");
            std::fs::create_dir_all(&ckpt_dir)?;
            checkpoint(&run.network, &ckpt_dir.join(format!("{}.snwt", beta.dir_name())))?;
            Ok((summarize(&run, phi_of(&run.capacity, family)), files))
        });
        match result {
            Ok((summary, files)) => {
                runs.push(summary);
                manifest.extend(files);
            }
            Err(e) => {
                failures.push(failure(beta, &e));
                first_error.get_or_insert(e);
            }
        }
    }
    let adversarial = family != AttackFamily::None;
    let summary = ExperimentSummary {
        name: cfg.name.clone(),
        seed: cfg.seed,
        train_samples: prep.train.len(),
        validation_samples: prep.val.len(),
        mean_norm: prep.mean_norm,
        attack: prep.train_cfg.attack,
        beta_grid: cfg.beta_grid.clone(),
        selection_metric: if adversarial {
            "validation_adversarial_accuracy"
        } else {
            "validation_accuracy"
        }
        .into(),
        best_beta: select_beta(&runs, adversarial),
        runs,
        failures,
    };
    let summary_path = out.join(SUMMARY_FILE);
    std::fs::write(&summary_path, format!("{}\n", serde_json::to_string_pretty(&summary)?))?;
    manifest.push(summary_path);
    if !summary.failures.is_empty() {
        write_failure(&out, &summary.failures)?;
    }
    Ok(ExperimentOutcome {
        summary,
        output_dir: out,
        manifest,
        error: first_error,
    })
}

fn failure(beta: Beta, e: &Error) -> RunFailure {
    RunFailure {
        beta,
        exit_code: e.exit_code(),
        error: e.to_string(),
    }
}

fn write_failure(out: &Path, failures: &[RunFailure]) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let body = serde_json::to_string_pretty(failures)?;
    std::fs::write(out.join(FAILURE_FILE), format!("{body}\n"))?;
    Ok(())
}

#[cfg(test)]
#[path = "experiment_tests.rs"]
mod tests;

//! Minibatch ERM and adversarial training with per-step spectral normalization.
//!
//! One step, in order:
//! 1. perturb the minibatch with the frozen current weights (no gradient
//!    flows through the perturbation);
//! 2. mean-loss parameter gradients on the perturbed batch;
//! 3. optimizer update;
//! 4. if enabled, advance each layer's power iterate and project onto
//!    `σ ≤ β`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{perturb_flat, AttackConfig, AttackFamily};
use crate::capacity::{accuracy, CapacityReport, CapacitySettings, LayerNorms};
use crate::error::{Error, Result};
use crate::harness::LabeledDataset;
use crate::netcore::{load_network, save_network, Loss, Network};
use crate::specnorm::{normalize_step, SnConfig};

/// Loss above which training is declared divergent.
pub const DIVERGENCE_LOSS: f64 = 1e6;

const SN_SEED_SALT: u64 = 0x736e_7374_6174_65;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    #[default]
    SgdMomentum,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant { lr: f64 },
    /// `lr · factor^⌊epoch / every⌋`.
    StepDecay { lr: f64, every: usize, factor: f64 },
}

impl LrSchedule {
    pub fn rate(&self, epoch: usize) -> f64 {
        match *self {
            LrSchedule::Constant { lr } => lr,
            LrSchedule::StepDecay { lr, every, factor } => lr * factor.powi((epoch / every.max(1)) as i32),
        }
    }

    fn base(&self) -> f64 {
        match *self {
            LrSchedule::Constant { lr } | LrSchedule::StepDecay { lr, .. } => lr,
        }
    }
}

fn default_momentum() -> f64 {
    0.9
}
fn default_validation_size() -> usize {
    500
}
fn default_eval_subset() -> usize {
    500
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default)]
    pub optimizer: Optimizer,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    pub schedule: LrSchedule,
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub attack: AttackConfig,
    /// Spectral normalization; `None` trains unconstrained.
    #[serde(default)]
    pub sn: Option<SnConfig>,
    /// Steps between evaluation points; 0 evaluates once per epoch.
    #[serde(default)]
    pub eval_every: usize,
    #[serde(default = "default_validation_size")]
    pub validation_size: usize,
    /// Training samples used for train-set accuracies at evaluation points.
    #[serde(default = "default_eval_subset")]
    pub eval_subset: usize,
    /// Compute a [`CapacityReport`] at the end of training.
    #[serde(default = "default_true")]
    pub capacity_report: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_dir: Option<PathBuf>,
}

impl TrainConfig {
    pub fn new(lr: f64, batch_size: usize, epochs: usize, seed: u64) -> Self {
        Self {
            optimizer: Optimizer::SgdMomentum,
            momentum: default_momentum(),
            schedule: LrSchedule::Constant { lr },
            batch_size,
            epochs,
            seed,
            attack: AttackConfig::none(),
            sn: None,
            eval_every: 0,
            validation_size: default_validation_size(),
            eval_subset: default_eval_subset(),
            capacity_report: true,
            checkpoint_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be >= 1"));
        }
        let lr = self.schedule.base();
        if !(lr >= 0.0) || !lr.is_finite() {
            return Err(Error::config(format!("learning rate must be >= 0, got {lr}")));
        }
        if let LrSchedule::StepDecay { every, factor, .. } = self.schedule {
            if every == 0 || !(factor > 0.0) {
                return Err(Error::config("step decay needs every >= 1 and factor > 0"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        self.attack.validate()?;
        if let Some(sn) = &self.sn {
            sn.validate()?;
        }
        Ok(())
    }

    fn step_rate(&self, epoch: usize) -> f64 {
        self.schedule.rate(epoch)
    }
}

/// Metrics at one evaluation point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub epoch: usize,
    /// Mean training loss over the steps since the previous point.
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub validation_accuracy: f64,
    pub train_adversarial_accuracy: f64,
    pub validation_adversarial_accuracy: f64,
    /// Evaluation-grade per-layer spectral norms.
    pub spectral_norms: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub points: Vec<EvalPoint>,
    pub steps: usize,
    pub capacity: Option<CapacityReport>,
    /// Wall-clock time; not serialized so reports stay reproducible.
    #[serde(skip)]
    pub duration: Duration,
}

impl TrainReport {
    pub fn last(&self) -> &EvalPoint {
        self.points.last().expect("training records at least one point")
    }

    /// One row per evaluation point.
    pub fn to_csv(&self) -> String {
        let depth = self.points.first().map_or(0, |p| p.spectral_norms.len());
        let mut s = String::from(
            "step,epoch,train_loss,train_accuracy,validation_accuracy,train_adversarial_accuracy,validation_adversarial_accuracy",
        );
        for i in 0..depth {
            write!(s, ",sigma_{i}").unwrap();
        }
        s.push('\n');
        for p in &self.points {
            write!(
                s,
                "{},{},{},{},{},{},{}",
                p.step,
                p.epoch,
                p.train_loss,
                p.train_accuracy,
                p.validation_accuracy,
                p.train_adversarial_accuracy,
                p.validation_adversarial_accuracy
            )
            .unwrap();
            for v in &p.spectral_norms {
                write!(s, ",{v}").unwrap();
            }
            s.push('\n');
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Split off `cfg.validation_size` samples by seeded shuffle, then train.
pub fn train(cfg: &TrainConfig, net: &mut Network, data: &LabeledDataset) -> Result<TrainReport> {
    let (train_set, val) = data.split(cfg.validation_size, cfg.seed)?;
    train_with_validation(cfg, net, &train_set, &val)
}

struct Monitor<'a> {
    cfg: &'a TrainConfig,
    train_eval: LabeledDataset,
    val: &'a LabeledDataset,
}

impl Monitor<'_> {
    fn point(&self, net: &Network, step: usize, epoch: usize, train_loss: f64) -> Result<EvalPoint> {
        let none = AttackConfig::none();
        let train_accuracy = accuracy(net, &self.train_eval, &none)?;
        let validation_accuracy = accuracy(net, self.val, &none)?;
        let (train_adv, val_adv) = if self.cfg.attack.family == AttackFamily::None {
            (train_accuracy, validation_accuracy)
        } else {
            (
                accuracy(net, &self.train_eval, &self.cfg.attack)?,
                accuracy(net, self.val, &self.cfg.attack)?,
            )
        };
        Ok(EvalPoint {
            step,
            epoch,
            train_loss,
            train_accuracy,
            validation_accuracy,
            train_adversarial_accuracy: train_adv,
            validation_adversarial_accuracy: val_adv,
            spectral_norms: LayerNorms::of(net).spectral,
        })
    }
}

/// Train on `train_set`, evaluating on `val` at every evaluation point.
pub fn train_with_validation(
    cfg: &TrainConfig,
    net: &mut Network,
    train_set: &LabeledDataset,
    val: &LabeledDataset,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_set.is_empty() || val.is_empty() {
        return Err(Error::input("training and validation sets must be nonempty"));
    }
    if train_set.dim() != net.input_len() || val.dim() != net.input_len() {
        return Err(Error::input(format!(
            "dataset samples have {} values, network expects {}",
            train_set.dim(),
            net.input_len()
        )));
    }
    if let Some(dir) = &cfg.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }
    let started = Instant::now();
    let monitor = Monitor {
        cfg,
        train_eval: train_set.head(cfg.eval_subset.max(1)),
        val,
    };
    let n = train_set.len();
    let d = train_set.dim();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let eval_every = if cfg.eval_every == 0 { steps_per_epoch } else { cfg.eval_every };
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut velocity: Vec<(Vec<f64>, Option<Vec<f64>>)> = net
        .layers()
        .iter()
        .map(|l| (vec![0.0; l.weight.len()], l.bias.as_ref().map(|b| vec![0.0; b.len()])))
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    let mut points = Vec::new();
    let mut loss_sum = 0.0;
    let mut loss_count = 0usize;
    let mut last_checkpoint: Option<PathBuf> = None;
    let mut step = 0usize;
    let mut xb = Vec::with_capacity(cfg.batch_size * d);
    let mut yb = Vec::with_capacity(cfg.batch_size);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let lr = cfg.step_rate(epoch);
        for batch in order.chunks(cfg.batch_size) {
            xb.clear();
            yb.clear();
            for &i in batch {
                xb.extend_from_slice(train_set.sample(i));
                yb.push(train_set.labels()[i]);
            }
            let pts = perturb_flat(net, Loss::CrossEntropy, &xb, &yb, &cfg.attack)
                .map_err(|e| diverged(e, step, &last_checkpoint))?;
            let grads = net
                .grad_params_batch(Loss::CrossEntropy, &pts, &yb)
                .map_err(|e| diverged(e, step, &last_checkpoint))?;
            if !grads.loss.is_finite() || grads.loss > DIVERGENCE_LOSS {
                return Err(Error::Divergence {
                    step,
                    loss: grads.loss,
                    checkpoint: last_checkpoint,
                });
            }
            apply_update(net, &mut velocity, &grads.weights, &grads.biases, lr, cfg);
            if let Some(sn) = &cfg.sn {
                normalize_step(net, sn, cfg.seed ^ SN_SEED_SALT)?;
            }
            loss_sum += grads.loss;
            loss_count += 1;
            step += 1;
            if step % eval_every == 0 || step == total_steps {
                let mean = loss_sum / loss_count as f64;
                points.push(monitor.point(net, step, epoch, mean)?);
                loss_sum = 0.0;
                loss_count = 0;
            }
        }
        if let Some(dir) = &cfg.checkpoint_dir {
            let path = dir.join(format!("epoch_{epoch:04}.snwt"));
            checkpoint(net, &path)?;
            last_checkpoint = Some(path);
        }
    }
    let capacity = if cfg.capacity_report {
        let mut settings = CapacitySettings::new(cfg.attack.epsilon, cfg.attack.wrm_lambda);
        settings.pgm_steps = cfg.attack.pgm_steps;
        settings.pgm_stepsize = cfg.attack.stepsize();
        Some(CapacityReport::compute(net, train_set, &settings)?)
    } else {
        None
    };
    Ok(TrainReport {
        points,
        steps: step,
        capacity,
        duration: started.elapsed(),
    })
}

fn diverged(e: Error, step: usize, checkpoint: &Option<PathBuf>) -> Error {
    match e {
        Error::Numerical { .. } | Error::AttackStep { .. } => Error::Divergence {
            step,
            loss: f64::NAN,
            checkpoint: checkpoint.clone(),
        },
        other => other,
    }
}

#[allow(clippy::type_complexity)]
fn apply_update(
    net: &mut Network,
    velocity: &mut [(Vec<f64>, Option<Vec<f64>>)],
    gw: &[Vec<f64>],
    gb: &[Option<Vec<f64>>],
    lr: f64,
    cfg: &TrainConfig,
) {
    let mu = match cfg.optimizer {
        Optimizer::Sgd => 0.0,
        Optimizer::SgdMomentum => cfg.momentum,
    };
    for (li, layer) in net.layers_mut().iter_mut().enumerate() {
        let (vw, vb) = &mut velocity[li];
        step_params(layer.weight.data_mut(), vw, &gw[li], lr, mu);
        if let (Some(b), Some(vb), Some(g)) = (layer.bias.as_mut(), vb.as_mut(), gb[li].as_ref()) {
            step_params(b, vb, g, lr, mu);
        }
    }
}

fn step_params(w: &mut [f64], v: &mut [f64], g: &[f64], lr: f64, mu: f64) {
    for ((wi, vi), gi) in w.iter_mut().zip(v.iter_mut()).zip(g) {
        *vi = mu * *vi + gi;
        *wi -= lr * *vi;
    }
}

/// Accuracy under an attack at each grid value: `ε` for FGM/PGM, `λ` for WRM.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobustnessPoint {
    pub parameter: f64,
    pub accuracy: f64,
}

/// Robustness curve of `net` on `dataset`. `base` supplies the norm and
/// solver settings; its `ε` (or `λ`) is replaced by each grid value.
pub fn evaluate_robustness(
    net: &Network,
    dataset: &LabeledDataset,
    family: AttackFamily,
    grid: &[f64],
    base: &AttackConfig,
) -> Result<Vec<RobustnessPoint>> {
    if grid.is_empty() {
        return Err(Error::config("robustness grid is empty"));
    }
    if grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::config("robustness grid must be strictly ascending"));
    }
    grid.iter()
        .map(|&p| {
            let mut cfg = *base;
            cfg.family = family;
            match family {
                AttackFamily::Wrm => cfg.wrm_lambda = p,
                _ => {
                    cfg.epsilon = p;
                    // the step-size default follows ε
                    if base.pgm_stepsize.is_none() {
                        cfg.pgm_stepsize = None;
                    }
                }
            }
            let clean = matches!(family, AttackFamily::Fgm | AttackFamily::Pgm) && p == 0.0;
            let cfg = if clean { AttackConfig::none() } else { cfg };
            cfg.validate()?;
            Ok(RobustnessPoint {
                parameter: p,
                accuracy: accuracy(net, dataset, &cfg)?,
            })
        })
        .collect()
}

pub fn robustness_csv(family: AttackFamily, curve: &[RobustnessPoint]) -> String {
    let mut s = String::from("family,parameter,accuracy\n");
    for p in curve {
        writeln!(s, "{family},{},{}", p.parameter, p.accuracy).unwrap();
    }
    s
}

/// Write the network (weights, biases and power-iteration state) to `path`.
pub fn checkpoint(net: &Network, path: &Path) -> Result<()> {
    save_network(net, path)
}

pub fn restore(path: &Path) -> Result<Network> {
    load_network(path)
}

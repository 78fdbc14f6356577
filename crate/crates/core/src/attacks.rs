//! Gradient-based adversarial perturbations: FGM, PGM and WRM.
//!
//! Every attack works on row-major batches so that per-sample input
//! gradients come out of one batched backward pass. Samples never interact:
//! the perturbation of row `i` depends only on `(x_i, y_i)` and the frozen
//! weights.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::LabeledDataset;
use crate::netcore::linalg::norm_l2;
use crate::netcore::{Loss, Network, Tensor};

/// Rows per batched gradient evaluation in [`adversarial_batch`].
const CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackFamily {
    #[default]
    None,
    Fgm,
    Pgm,
    Wrm,
}

impl std::fmt::Display for AttackFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AttackFamily::None => "none",
            AttackFamily::Fgm => "fgm",
            AttackFamily::Pgm => "pgm",
            AttackFamily::Wrm => "wrm",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    #[default]
    L2,
    Linf,
}

fn default_pgm_steps() -> usize {
    15
}
fn default_wrm_steps() -> usize {
    15
}
fn default_wrm_tolerance() -> f64 {
    1e-4
}

/// Attack family and parameters.
///
/// `pgm_stepsize` defaults to `2ε / r` and `wrm_lr` to `1 / λ` when omitted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    #[serde(default)]
    pub family: AttackFamily,
    #[serde(default)]
    pub norm: Norm,
    #[serde(default)]
    pub epsilon: f64,
    #[serde(default = "default_pgm_steps")]
    pub pgm_steps: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pgm_stepsize: Option<f64>,
    #[serde(default)]
    pub wrm_lambda: f64,
    #[serde(default = "default_wrm_steps")]
    pub wrm_steps: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wrm_lr: Option<f64>,
    /// Stationarity residual at which WRM ascent stops early.
    #[serde(default = "default_wrm_tolerance")]
    pub wrm_tolerance: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self::none()
    }
}

impl AttackConfig {
    pub fn none() -> Self {
        Self {
            family: AttackFamily::None,
            norm: Norm::L2,
            epsilon: 0.0,
            pgm_steps: default_pgm_steps(),
            pgm_stepsize: None,
            wrm_lambda: 0.0,
            wrm_steps: default_wrm_steps(),
            wrm_lr: None,
            wrm_tolerance: default_wrm_tolerance(),
        }
    }

    pub fn fgm(norm: Norm, epsilon: f64) -> Self {
        Self {
            family: AttackFamily::Fgm,
            norm,
            epsilon,
            ..Self::none()
        }
    }

    /// PGM with `r = 15` and `α = 2ε / r`.
    pub fn pgm(norm: Norm, epsilon: f64) -> Self {
        Self {
            family: AttackFamily::Pgm,
            norm,
            epsilon,
            ..Self::none()
        }
    }

    pub fn wrm(lambda: f64) -> Self {
        Self {
            family: AttackFamily::Wrm,
            wrm_lambda: lambda,
            ..Self::none()
        }
    }

    pub fn with_pgm_steps(mut self, steps: usize, stepsize: f64) -> Self {
        self.pgm_steps = steps;
        self.pgm_stepsize = Some(stepsize);
        self
    }

    pub fn with_wrm_solver(mut self, steps: usize, lr: f64, tolerance: f64) -> Self {
        self.wrm_steps = steps;
        self.wrm_lr = Some(lr);
        self.wrm_tolerance = tolerance;
        self
    }

    /// PGM step size `α`.
    pub fn stepsize(&self) -> f64 {
        self.pgm_stepsize
            .unwrap_or(2.0 * self.epsilon / self.pgm_steps.max(1) as f64)
    }

    /// WRM ascent step size.
    pub fn wrm_step(&self) -> f64 {
        self.wrm_lr.unwrap_or(1.0 / self.wrm_lambda)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(Error::config(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        match self.family {
            AttackFamily::Pgm => {
                if self.pgm_steps == 0 {
                    return Err(Error::config("pgm_steps must be >= 1"));
                }
                if let Some(a) = self.pgm_stepsize {
                    if !(a > 0.0) {
                        return Err(Error::config(format!("pgm_stepsize must be > 0, got {a}")));
                    }
                }
            }
            AttackFamily::Wrm => {
                if !(self.wrm_lambda > 0.0) || !self.wrm_lambda.is_finite() {
                    return Err(Error::config(format!(
                        "wrm_lambda must be > 0, got {}",
                        self.wrm_lambda
                    )));
                }
                if self.wrm_steps == 0 {
                    return Err(Error::config("wrm_steps must be >= 1"));
                }
                if let Some(lr) = self.wrm_lr {
                    if !(lr > 0.0) {
                        return Err(Error::config(format!("wrm_lr must be > 0, got {lr}")));
                    }
                }
            }
            AttackFamily::Fgm | AttackFamily::None => {}
        }
        Ok(())
    }
}

/// Project `delta` onto the ε-ball of `norm` (radial for ℓ₂, clipping for ℓ∞).
pub fn project_ball(delta: &[f64], epsilon: f64, norm: Norm) -> Vec<f64> {
    let mut d = delta.to_vec();
    project_in_place(&mut d, epsilon, norm);
    d
}

fn project_in_place(d: &mut [f64], epsilon: f64, norm: Norm) {
    match norm {
        Norm::L2 => {
            let n = norm_l2(d);
            if n > epsilon {
                let scale = epsilon / n;
                d.iter_mut().for_each(|v| *v *= scale);
            }
        }
        Norm::Linf => d.iter_mut().for_each(|v| *v = v.clamp(-epsilon, epsilon)),
    }
}

/// Unit-ball maximizer of `δᵀg`: `g / ‖g‖₂` for ℓ₂, `sign(g)` for ℓ∞.
fn steepest_direction(g: &[f64], norm: Norm) -> Vec<f64> {
    match norm {
        Norm::L2 => {
            let n = norm_l2(g);
            if n == 0.0 {
                vec![0.0; g.len()]
            } else {
                g.iter().map(|v| v / n).collect()
            }
        }
        Norm::Linf => g
            .iter()
            .map(|&v| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 })
            .collect(),
    }
}

fn add(xs: &[f64], deltas: &[f64]) -> Vec<f64> {
    xs.iter().zip(deltas).map(|(x, d)| x + d).collect()
}

fn input_grads(net: &Network, loss: Loss, points: &[f64], labels: &[usize], step: usize) -> Result<Vec<f64>> {
    let (g, _) = net
        .grad_input_batch(loss, points, labels)
        .map_err(|e| match e {
            Error::Numerical { message, layer } => Error::AttackStep {
                step,
                message: format!("{message} (layer {layer})"),
            },
            other => other,
        })?;
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::AttackStep {
            step,
            message: "non-finite input gradient".into(),
        });
    }
    Ok(g)
}

/// FGM perturbations for a batch: `δ = ε · argmax_{‖ν‖≤1} νᵀ∇ₓℓ`.
/// A zero gradient yields `δ = 0`.
pub fn fgm_batch(
    net: &Network,
    loss: Loss,
    xs: &[f64],
    labels: &[usize],
    epsilon: f64,
    norm: Norm,
) -> Result<Vec<f64>> {
    let dim = net.input_len();
    let g = input_grads(net, loss, xs, labels, 0)?;
    let mut out = Vec::with_capacity(xs.len());
    for row in g.chunks_exact(dim) {
        out.extend(steepest_direction(row, norm).into_iter().map(|v| v * epsilon));
    }
    Ok(out)
}

/// PGM perturbations for a batch, starting from `δ⁰ = 0`:
/// `δ^{i+1} = Π_ε(δ^i + α ν^i)`. When `trace` is given, every iterate
/// `δ¹…δ^r` is pushed onto it.
pub fn pgm_batch(
    net: &Network,
    loss: Loss,
    xs: &[f64],
    labels: &[usize],
    cfg: &AttackConfig,
    mut trace: Option<&mut Vec<Vec<f64>>>,
) -> Result<Vec<f64>> {
    let dim = net.input_len();
    let alpha = cfg.stepsize();
    let mut delta = vec![0.0; xs.len()];
    for step in 0..cfg.pgm_steps {
        let g = input_grads(net, loss, &add(xs, &delta), labels, step)?;
        for (d, gi) in delta.chunks_exact_mut(dim).zip(g.chunks_exact(dim)) {
            let nu = steepest_direction(gi, cfg.norm);
            for (dj, vj) in d.iter_mut().zip(&nu) {
                *dj += alpha * vj;
            }
            project_in_place(d, cfg.epsilon, cfg.norm);
        }
        if let Some(t) = trace.as_deref_mut() {
            t.push(delta.clone());
        }
    }
    Ok(delta)
}

/// Outcome of WRM ascent for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct WrmOutcome {
    pub deltas: Vec<f64>,
    /// Per-sample `‖δ − ∇ₓℓ(x+δ)/λ‖₂` at the returned iterate.
    pub residuals: Vec<f64>,
    /// Ascent steps taken per sample.
    pub steps: Vec<usize>,
}

/// WRM perturbations: gradient ascent on `ℓ(f(x+δ), y) − (λ/2)‖δ‖₂²` from
/// `δ = 0`, stopping per sample once the stationarity residual is within
/// `cfg.wrm_tolerance` or after `cfg.wrm_steps` updates.
pub fn wrm_batch(
    net: &Network,
    loss: Loss,
    xs: &[f64],
    labels: &[usize],
    cfg: &AttackConfig,
) -> Result<WrmOutcome> {
    let dim = net.input_len();
    let n = labels.len();
    let lambda = cfg.wrm_lambda;
    if !(lambda > 0.0) {
        return Err(Error::config(format!("wrm_lambda must be > 0, got {lambda}")));
    }
    let lr = cfg.wrm_step();
    let mut delta = vec![0.0; xs.len()];
    let mut residuals = vec![f64::INFINITY; n];
    let mut steps = vec![0usize; n];
    let mut active: Vec<usize> = (0..n).collect();
    for step in 0..=cfg.wrm_steps {
        if active.is_empty() {
            break;
        }
        let mut pts = Vec::with_capacity(active.len() * dim);
        let mut lbl = Vec::with_capacity(active.len());
        for &i in &active {
            let r = i * dim..(i + 1) * dim;
            pts.extend(xs[r.clone()].iter().zip(&delta[r]).map(|(x, d)| x + d));
            lbl.push(labels[i]);
        }
        let g = input_grads(net, loss, &pts, &lbl, step)?;
        let mut still = Vec::with_capacity(active.len());
        for (k, &i) in active.iter().enumerate() {
            let gi = &g[k * dim..(k + 1) * dim];
            let d = &mut delta[i * dim..(i + 1) * dim];
            let res = d
                .iter()
                .zip(gi)
                .map(|(dj, gj)| {
                    let r = dj - gj / lambda;
                    r * r
                })
                .sum::<f64>()
                .sqrt();
            residuals[i] = res;
            if res <= cfg.wrm_tolerance || step == cfg.wrm_steps {
                continue;
            }
            for (dj, gj) in d.iter_mut().zip(gi) {
                *dj += lr * (gj - lambda * *dj);
            }
            if d.iter().any(|v| !v.is_finite()) {
                return Err(Error::AttackStep {
                    step,
                    message: "non-finite WRM iterate".into(),
                });
            }
            steps[i] += 1;
            still.push(i);
        }
        active = still;
    }
    Ok(WrmOutcome {
        deltas: delta,
        residuals,
        steps,
    })
}

/// Perturbations for a batch under any attack family (`none` gives zeros).
pub fn perturbations(
    net: &Network,
    loss: Loss,
    xs: &[f64],
    labels: &[usize],
    cfg: &AttackConfig,
) -> Result<Vec<f64>> {
    match cfg.family {
        AttackFamily::None => Ok(vec![0.0; xs.len()]),
        AttackFamily::Fgm => fgm_batch(net, loss, xs, labels, cfg.epsilon, cfg.norm),
        AttackFamily::Pgm => pgm_batch(net, loss, xs, labels, cfg, None),
        AttackFamily::Wrm => Ok(wrm_batch(net, loss, xs, labels, cfg)?.deltas),
    }
}

/// Perturbed copies `x + δ(x)` of a flat batch, processed in fixed chunks.
pub fn perturb_flat(
    net: &Network,
    loss: Loss,
    xs: &[f64],
    labels: &[usize],
    cfg: &AttackConfig,
) -> Result<Vec<f64>> {
    if cfg.family == AttackFamily::None {
        return Ok(xs.to_vec());
    }
    let dim = net.input_len();
    let mut out = Vec::with_capacity(xs.len());
    for (xc, yc) in xs.chunks(CHUNK * dim).zip(labels.chunks(CHUNK)) {
        let d = perturbations(net, loss, xc, yc, cfg)?;
        out.extend(add(xc, &d));
    }
    Ok(out)
}

/// Replace every sample by `x + δ(x)`; labels are unchanged.
pub fn adversarial_batch(
    net: &Network,
    loss: Loss,
    batch: &LabeledDataset,
    cfg: &AttackConfig,
) -> Result<LabeledDataset> {
    cfg.validate()?;
    if cfg.family == AttackFamily::None {
        return Ok(batch.clone());
    }
    let perturbed = perturb_flat(net, loss, batch.samples(), batch.labels(), cfg)?;
    Ok(batch.with_samples(perturbed))
}

fn single(net: &Network, x: &Tensor) -> Result<()> {
    if x.len() != net.input_len() {
        return Err(Error::input(format!(
            "sample has {} values, network expects {}",
            x.len(),
            net.input_len()
        )));
    }
    Ok(())
}

/// FGM perturbation of one sample.
pub fn fgm(net: &Network, loss: Loss, x: &Tensor, y: usize, epsilon: f64, norm: Norm) -> Result<Tensor> {
    single(net, x)?;
    Tensor::new(x.shape().to_vec(), fgm_batch(net, loss, x.data(), &[y], epsilon, norm)?)
}

/// PGM perturbation `δ^r` of one sample.
pub fn pgm(net: &Network, loss: Loss, x: &Tensor, y: usize, cfg: &AttackConfig) -> Result<Tensor> {
    single(net, x)?;
    Tensor::new(x.shape().to_vec(), pgm_batch(net, loss, x.data(), &[y], cfg, None)?)
}

/// All PGM iterates `δ¹…δ^r` for one sample.
pub fn pgm_iterates(net: &Network, loss: Loss, x: &Tensor, y: usize, cfg: &AttackConfig) -> Result<Vec<Tensor>> {
    single(net, x)?;
    let mut trace = Vec::with_capacity(cfg.pgm_steps);
    pgm_batch(net, loss, x.data(), &[y], cfg, Some(&mut trace))?;
    trace
        .into_iter()
        .map(|d| Tensor::new(x.shape().to_vec(), d))
        .collect()
}

/// WRM perturbation of one sample.
pub fn wrm(net: &Network, loss: Loss, x: &Tensor, y: usize, cfg: &AttackConfig) -> Result<Tensor> {
    Ok(wrm_with_residual(net, loss, x, y, cfg)?.0)
}

/// WRM perturbation of one sample together with its stationarity residual.
pub fn wrm_with_residual(
    net: &Network,
    loss: Loss,
    x: &Tensor,
    y: usize,
    cfg: &AttackConfig,
) -> Result<(Tensor, f64)> {
    single(net, x)?;
    let out = wrm_batch(net, loss, x.data(), &[y], cfg)?;
    Ok((Tensor::new(x.shape().to_vec(), out.deltas)?, out.residuals[0]))
}

#[cfg(test)]
mod tests;

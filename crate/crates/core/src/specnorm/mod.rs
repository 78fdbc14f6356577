//! Spectral norm estimation and projection for dense and convolutional layers.
//!
//! Both layer kinds are treated as linear operators `W` exposing a forward
//! product and its adjoint, so one power-iteration routine serves both:
//!
//! ```text
//! v ← W u / ‖W u‖₂
//! u ← Wᵀ v / ‖Wᵀ v‖₂        (repeated T times)
//! σ ← v · W u
//! ```
//!
//! For convolutions `W` is never materialized; the forward product is the
//! strided, padded convolution and `Wᵀ` is its transpose. Biases never enter.

mod oracle;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netcore::conv::{conv_forward, conv_transpose};
use crate::netcore::linalg::{dot, matvec, matvec_t, norm_l2};
use crate::netcore::{ConvGeometry, Layer, LayerKind, Network, Tensor};

pub use oracle::{jacobi_singular_values, DenseMatrix};

/// Default input-size cap for [`explicit_conv_matrix`].
pub const EXPLICIT_MATRIX_CAP: usize = 4096;

/// Number of random probes used when the iterate is annihilated twice.
const FALLBACK_PROBES: usize = 5;

/// Seed for evaluation-grade estimates, kept apart from training state.
const EVAL_SEED: u64 = 0x5eed_0f_e7a1;

/// Persistent power-iteration iterate `u` (unit ℓ₂ norm) for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerIterState {
    pub u: Vec<f64>,
    pub iterations: u64,
    /// Most recent σ estimate.
    pub sigma: f64,
    pub seed: u64,
    /// Reseeds performed so far; feeds the RNG stream for the next one.
    pub restarts: u64,
}

fn random_unit(dim: usize, seed: u64, stream: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    loop {
        let mut u: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let n = norm_l2(&u);
        if n > 0.0 {
            u.iter_mut().for_each(|x| *x /= n);
            return u;
        }
    }
}

impl PowerIterState {
    /// Unit-normalized Gaussian start vector of length `dim`.
    pub fn new(dim: usize, seed: u64) -> Self {
        Self {
            u: random_unit(dim, seed, 0),
            iterations: 0,
            sigma: 0.0,
            seed,
            restarts: 0,
        }
    }

    fn reseed(&mut self) {
        self.restarts += 1;
        self.u = random_unit(self.u.len(), self.seed, self.restarts);
    }
}

fn default_train_iters() -> usize {
    1
}
fn default_warmup_iters() -> usize {
    200
}
fn default_eval_iters() -> usize {
    200
}
fn default_tolerance() -> f64 {
    1e-9
}

/// Spectral normalization settings: target bound `β` and iteration budgets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SnConfig {
    pub beta: f64,
    #[serde(default = "default_train_iters")]
    pub train_iters: usize,
    /// Iterations for a layer's first step, before its iterate exists.
    #[serde(default = "default_warmup_iters")]
    pub warmup_iters: usize,
    #[serde(default = "default_eval_iters")]
    pub eval_iters: usize,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
}

impl SnConfig {
    pub fn new(beta: f64) -> Self {
        Self {
            beta,
            train_iters: default_train_iters(),
            warmup_iters: default_warmup_iters(),
            eval_iters: default_eval_iters(),
            tolerance: default_tolerance(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) {
            return Err(Error::config(format!("beta must be > 0, got {}", self.beta)));
        }
        if self.train_iters == 0 || self.eval_iters == 0 {
            return Err(Error::config("power iteration counts must be >= 1"));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::config("tolerance must be > 0"));
        }
        Ok(())
    }
}

/// Evaluation-grade iteration settings without a `β`.
pub fn eval_config() -> SnConfig {
    SnConfig::new(f64::INFINITY)
}

/// A linear map with an adjoint, as seen by power iteration.
pub trait LinearOperator {
    fn input_len(&self) -> usize;
    fn output_len(&self) -> usize;
    fn apply(&self, u: &[f64]) -> Vec<f64>;
    fn apply_transpose(&self, v: &[f64]) -> Vec<f64>;
    /// True when every coefficient is zero.
    fn is_zero(&self) -> bool;
}

/// Row-major `rows × cols` matrix.
#[derive(Debug, Clone, Copy)]
pub struct DenseOperator<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
}

impl LinearOperator for DenseOperator<'_> {
    fn input_len(&self) -> usize {
        self.cols
    }
    fn output_len(&self) -> usize {
        self.rows
    }
    fn apply(&self, u: &[f64]) -> Vec<f64> {
        matvec(self.data, u, self.rows, self.cols)
    }
    fn apply_transpose(&self, v: &[f64]) -> Vec<f64> {
        matvec_t(self.data, v, self.rows, self.cols)
    }
    fn is_zero(&self) -> bool {
        self.data.iter().all(|&w| w == 0.0)
    }
}

/// Convolution with a fixed kernel and geometry, viewed as a linear map.
#[derive(Debug, Clone, Copy)]
pub struct ConvOperator<'a> {
    pub kernel: &'a [f64],
    pub geometry: ConvGeometry,
}

impl LinearOperator for ConvOperator<'_> {
    fn input_len(&self) -> usize {
        self.geometry.input_len()
    }
    fn output_len(&self) -> usize {
        self.geometry.output_len()
    }
    fn apply(&self, u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.output_len()];
        conv_forward(self.kernel, &self.geometry, u, &mut out);
        out
    }
    fn apply_transpose(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.input_len()];
        conv_transpose(self.kernel, &self.geometry, v, &mut out);
        out
    }
    fn is_zero(&self) -> bool {
        self.kernel.iter().all(|&w| w == 0.0)
    }
}

/// The linear part of a network layer.
#[derive(Debug, Clone, Copy)]
pub enum LayerOperator<'a> {
    Dense(DenseOperator<'a>),
    Conv(ConvOperator<'a>),
}

impl<'a> LayerOperator<'a> {
    pub fn of(layer: &'a Layer) -> Self {
        match layer.spec.kind {
            LayerKind::Dense { inputs, outputs } => LayerOperator::Dense(DenseOperator {
                data: layer.weight.data(),
                rows: outputs,
                cols: inputs,
            }),
            LayerKind::Conv { geometry } => LayerOperator::Conv(ConvOperator {
                kernel: layer.weight.data(),
                geometry,
            }),
        }
    }

    fn inner(&self) -> &dyn LinearOperator {
        match self {
            LayerOperator::Dense(d) => d,
            LayerOperator::Conv(c) => c,
        }
    }
}

impl LinearOperator for LayerOperator<'_> {
    fn input_len(&self) -> usize {
        self.inner().input_len()
    }
    fn output_len(&self) -> usize {
        self.inner().output_len()
    }
    fn apply(&self, u: &[f64]) -> Vec<f64> {
        self.inner().apply(u)
    }
    fn apply_transpose(&self, v: &[f64]) -> Vec<f64> {
        self.inner().apply_transpose(v)
    }
    fn is_zero(&self) -> bool {
        self.inner().is_zero()
    }
}

fn normalized(mut x: Vec<f64>) -> Option<(Vec<f64>, f64)> {
    let n = norm_l2(&x);
    if n > 0.0 && n.is_finite() {
        x.iter_mut().for_each(|v| *v /= n);
        Some((x, n))
    } else {
        None
    }
}

/// Largest gain `‖W p‖ / ‖p‖` over a few random probes.
fn probe_sigma<O: LinearOperator + ?Sized>(op: &O, seed: u64) -> f64 {
    (0..FALLBACK_PROBES as u64)
        .map(|k| norm_l2(&op.apply(&random_unit(op.input_len(), seed, 1 << 32 | k))))
        .fold(0.0, f64::max)
}

enum Step {
    /// Normalized left iterate and `‖Wᵀ v‖`, which equals `v · W u_new`.
    Done(Vec<f64>, f64),
    /// The operator annihilated the iterate twice; carries the probe σ.
    Fallback(f64),
}

fn step<O: LinearOperator + ?Sized>(op: &O, state: &mut PowerIterState) -> Step {
    let mut v = normalized(op.apply(&state.u));
    if v.is_none() {
        state.reseed();
        v = normalized(op.apply(&state.u));
    }
    let Some((v, _)) = v else {
        return Step::Fallback(probe_sigma(op, state.seed));
    };
    match normalized(op.apply_transpose(&v)) {
        Some((u, norm)) => {
            state.u = u;
            state.iterations += 1;
            Step::Done(v, norm)
        }
        None => Step::Fallback(probe_sigma(op, state.seed)),
    }
}

/// Run `iters` power iterations from the persistent state and return
/// `σ = v · W u` from the final pair.
///
/// An all-zero operator yields σ = 0 and leaves `u` untouched.
pub fn power_iteration<O: LinearOperator + ?Sized>(
    op: &O,
    state: &mut PowerIterState,
    iters: usize,
) -> Result<f64> {
    if state.u.len() != op.input_len() {
        return Err(Error::input(format!(
            "power-iteration state has length {}, operator input is {}",
            state.u.len(),
            op.input_len()
        )));
    }
    if op.is_zero() {
        state.sigma = 0.0;
        return Ok(0.0);
    }
    let mut last_v = None;
    for _ in 0..iters.max(1) {
        match step(op, state) {
            Step::Done(v, _) => last_v = Some(v),
            Step::Fallback(s) => {
                state.sigma = s;
                return Ok(s);
            }
        }
    }
    let v = last_v.expect("at least one iteration");
    let sigma = dot(&v, &op.apply(&state.u)).max(0.0);
    state.sigma = sigma;
    Ok(sigma)
}

/// Result of an evaluation-grade estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmaEstimate {
    pub sigma: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Fresh-start power iteration with the convergence test
/// `|σ_t − σ_{t−1}| ≤ tolerance · σ_t`, capped at `max_iters`.
pub fn estimate_sigma<O: LinearOperator + ?Sized>(
    op: &O,
    max_iters: usize,
    tolerance: f64,
    seed: u64,
) -> SigmaEstimate {
    if op.is_zero() {
        return SigmaEstimate {
            sigma: 0.0,
            iterations: 0,
            converged: true,
        };
    }
    let mut state = PowerIterState::new(op.input_len(), seed);
    let mut prev = f64::NAN;
    let mut last_v = None;
    let mut converged = false;
    let mut iterations = 0;
    for t in 0..max_iters.max(1) {
        match step(op, &mut state) {
            Step::Done(v, sigma_t) => {
                iterations = t + 1;
                last_v = Some(v);
                if (sigma_t - prev).abs() <= tolerance * sigma_t {
                    converged = true;
                    break;
                }
                prev = sigma_t;
            }
            Step::Fallback(s) => {
                return SigmaEstimate {
                    sigma: s,
                    iterations: t + 1,
                    converged: false,
                }
            }
        }
    }
    let v = last_v.expect("at least one iteration");
    SigmaEstimate {
        sigma: dot(&v, &op.apply(&state.u)).max(0.0),
        iterations,
        converged,
    }
}

/// Evaluation-grade spectral norm of a layer's linear part (bias excluded).
pub fn layer_sigma(layer: &Layer, cfg: &SnConfig) -> SigmaEstimate {
    estimate_sigma(&LayerOperator::of(layer), cfg.eval_iters, cfg.tolerance, EVAL_SEED)
}

/// Evaluation-grade spectral norms of every layer.
pub fn network_sigmas(net: &Network, cfg: &SnConfig) -> Vec<f64> {
    net.layers().iter().map(|l| layer_sigma(l, cfg).sigma).collect()
}

fn check_matrix(w: &Tensor) -> Result<(usize, usize)> {
    match w.shape() {
        [rows, cols] => Ok((*rows, *cols)),
        s => Err(Error::input(format!("expected a matrix, got shape {s:?}"))),
    }
}

fn check_kernel(kernel: &Tensor, geom: &ConvGeometry) -> Result<()> {
    geom.validate()?;
    if kernel.shape() != geom.kernel_shape() {
        return Err(Error::input(format!(
            "kernel shape {:?} does not match geometry {:?}",
            kernel.shape(),
            geom.kernel_shape()
        )));
    }
    Ok(())
}

/// Power iteration on a dense matrix.
pub fn dense_power_iteration(w: &Tensor, state: &mut PowerIterState, iters: usize) -> Result<f64> {
    let (rows, cols) = check_matrix(w)?;
    power_iteration(&DenseOperator { data: w.data(), rows, cols }, state, iters)
}

/// Convolutional power iteration: power iteration whose forward and adjoint
/// products are the convolution and its transpose under `geom`.
pub fn conv_power_iteration(
    kernel: &Tensor,
    geom: &ConvGeometry,
    state: &mut PowerIterState,
    iters: usize,
) -> Result<f64> {
    check_kernel(kernel, geom)?;
    let op = ConvOperator {
        kernel: kernel.data(),
        geometry: *geom,
    };
    power_iteration(&op, state, iters)
}

/// `conv(kernel, u)` under `geom`, returned with CHW output shape.
pub fn conv_apply(kernel: &Tensor, geom: &ConvGeometry, u: &Tensor) -> Result<Tensor> {
    check_kernel(kernel, geom)?;
    if u.len() != geom.input_len() {
        return Err(Error::input(format!(
            "input has {} values, geometry expects {:?}",
            u.len(),
            geom.input_shape()
        )));
    }
    let mut out = vec![0.0; geom.output_len()];
    conv_forward(kernel.data(), geom, u.data(), &mut out);
    Tensor::new(geom.output_shape().to_vec(), out)
}

/// Exact adjoint of [`conv_apply`].
pub fn conv_transpose_apply(kernel: &Tensor, geom: &ConvGeometry, v: &Tensor) -> Result<Tensor> {
    check_kernel(kernel, geom)?;
    if v.len() != geom.output_len() {
        return Err(Error::input(format!(
            "input has {} values, geometry output is {:?}",
            v.len(),
            geom.output_shape()
        )));
    }
    let mut out = vec![0.0; geom.input_len()];
    conv_transpose(kernel.data(), geom, v.data(), &mut out);
    Tensor::new(geom.input_shape().to_vec(), out)
}

/// Materialize the convolution as a dense `output_len × input_len` matrix,
/// built directly from the index relation between input and output pixels.
pub fn explicit_conv_matrix(kernel: &Tensor, geom: &ConvGeometry, cap: usize) -> Result<DenseMatrix> {
    check_kernel(kernel, geom)?;
    let cols = geom.input_len();
    if cols > cap {
        return Err(Error::SizeCap { elements: cols, cap });
    }
    let rows = geom.output_len();
    let (h, w) = (geom.in_height as isize, geom.in_width as isize);
    let (oh, ow) = (geom.out_height(), geom.out_width());
    let pads = geom.pads();
    let k = kernel.data();
    let mut data = vec![0.0; rows * cols];
    for n in 0..geom.out_channels {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (n * oh + oy) * ow + ox;
                for m in 0..geom.in_channels {
                    for ky in 0..geom.kernel_height {
                        for kx in 0..geom.kernel_width {
                            let iy = (oy * geom.stride_h + ky) as isize - pads.top as isize;
                            let ix = (ox * geom.stride_w + kx) as isize - pads.left as isize;
                            if iy < 0 || iy >= h || ix < 0 || ix >= w {
                                continue;
                            }
                            let col = (m as isize * h + iy) * w + ix;
                            let kidx = ((n * geom.in_channels + m) * geom.kernel_height + ky)
                                * geom.kernel_width
                                + kx;
                            data[row * cols + col as usize] += k[kidx];
                        }
                    }
                }
            }
        }
    }
    Ok(DenseMatrix { rows, cols, data })
}

/// `W / max(1, σ/β)`: unchanged when `σ ≤ β`.
pub fn sn_project(weights: &[f64], sigma: f64, beta: f64) -> Vec<f64> {
    let mut out = weights.to_vec();
    sn_project_in_place(&mut out, sigma, beta);
    out
}

/// In-place form of [`sn_project`]; returns the divisor applied.
pub fn sn_project_in_place(weights: &mut [f64], sigma: f64, beta: f64) -> f64 {
    let ratio = sigma / beta;
    if ratio > 1.0 {
        weights.iter_mut().for_each(|w| *w /= ratio);
        ratio
    } else {
        1.0
    }
}

/// Spectral norm of the kernel flattened to `out_channels × (in_channels·kh·kw)`.
/// This is the per-matrix normalizer that ignores stride, padding and spatial
/// extent; it generally underestimates the operator norm.
pub fn kernel_flat_spectral_norm(kernel: &Tensor) -> Result<f64> {
    let shape = kernel.shape();
    if shape.is_empty() {
        return Err(Error::input("kernel must have at least one dimension"));
    }
    let rows = shape[0];
    let cols = kernel.len() / rows;
    let op = DenseOperator {
        data: kernel.data(),
        rows,
        cols,
    };
    Ok(estimate_sigma(&op, 20_000, 1e-15, EVAL_SEED).sigma)
}

/// Operator norm of a convolution next to the norm of its flattened kernel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelAudit {
    pub sigma_operator: f64,
    pub sigma_kernel_flat: f64,
    pub iterations: usize,
    pub converged: bool,
}

pub fn audit_kernel(kernel: &Tensor, geom: &ConvGeometry, cfg: &SnConfig) -> Result<KernelAudit> {
    geom.validate()?;
    if kernel.shape() != geom.kernel_shape().as_slice() {
        return Err(Error::input(format!(
            "kernel shape {:?} does not match geometry {:?}",
            kernel.shape(),
            geom.kernel_shape()
        )));
    }
    let op = ConvOperator {
        kernel: kernel.data(),
        geometry: *geom,
    };
    let est = estimate_sigma(&op, cfg.eval_iters, cfg.tolerance, EVAL_SEED);
    Ok(KernelAudit {
        sigma_operator: est.sigma,
        sigma_kernel_flat: kernel_flat_spectral_norm(kernel)?,
        iterations: est.iterations,
        converged: est.converged,
    })
}

/// One training-time normalization pass: for every layer advance its
/// persistent iterate by `cfg.train_iters` steps (`cfg.warmup_iters` when
/// the iterate is created), then project the weights so
/// the estimate does not exceed `β`. Returns the pre-projection estimates.
pub fn normalize_step(net: &mut Network, cfg: &SnConfig, seed: u64) -> Result<Vec<f64>> {
    let mut sigmas = Vec::with_capacity(net.depth());
    for (i, layer) in net.layers_mut().iter_mut().enumerate() {
        let (mut state, iters) = match layer.power_iter.take() {
            Some(state) => (state, cfg.train_iters),
            None => (
                PowerIterState::new(layer.spec.input_len(), seed.wrapping_add(i as u64)),
                cfg.train_iters.max(cfg.warmup_iters),
            ),
        };
        let sigma = power_iteration(&LayerOperator::of(layer), &mut state, iters)?;
        let divisor = sn_project_in_place(layer.weight.data_mut(), sigma, cfg.beta);
        state.sigma = sigma / divisor;
        layer.power_iter = Some(state);
        sigmas.push(sigma);
    }
    Ok(sigmas)
}

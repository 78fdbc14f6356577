use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::conv::{conv_forward, conv_kernel_grad_acc, conv_transpose, ConvGeometry};
use super::linalg::{gemm_ab, gemm_abt, gemm_atb_acc};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::specnorm::PowerIterState;

/// Elementwise nonlinearity. All variants satisfy `σ(0) = 0` and are 1-Lipschitz.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// ELU with α = 1.
    Elu,
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    /// Value and derivative at `x`.
    #[inline]
    pub fn eval(self, x: f64) -> (f64, f64) {
        match self {
            Activation::Elu => {
                if x >= 0.0 {
                    (x, 1.0)
                } else {
                    let e = x.exp();
                    (e - 1.0, e)
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                (t, 1.0 - t * t)
            }
            Activation::Relu => {
                if x > 0.0 {
                    (x, 1.0)
                } else {
                    (0.0, 0.0)
                }
            }
            Activation::Identity => (x, 1.0),
        }
    }

    /// Smooth with a 1-Lipschitz derivative.
    pub fn is_smooth(self) -> bool {
        matches!(self, Activation::Elu | Activation::Tanh | Activation::Identity)
    }
}

/// Training loss over logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    /// Softmax cross-entropy, evaluated through log-sum-exp.
    #[default]
    CrossEntropy,
}

impl Loss {
    /// Loss value and its gradient with respect to `logits`.
    pub fn value_and_grad(self, logits: &[f64], label: usize) -> (f64, Vec<f64>) {
        match self {
            Loss::CrossEntropy => {
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
                let sum: f64 = exps.iter().sum();
                let lse = max + sum.ln();
                let grad = exps
                    .iter()
                    .enumerate()
                    .map(|(j, e)| e / sum - if j == label { 1.0 } else { 0.0 })
                    .collect();
                (lse - logits[label], grad)
            }
        }
    }

    pub fn value(self, logits: &[f64], label: usize) -> f64 {
        self.value_and_grad(logits, label).0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Dense { inputs: usize, outputs: usize },
    Conv { geometry: ConvGeometry },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    #[serde(flatten)]
    pub kind: LayerKind,
    pub activation: Activation,
    #[serde(default = "default_has_bias")]
    pub has_bias: bool,
}

fn default_has_bias() -> bool {
    true
}

impl LayerSpec {
    pub fn dense(inputs: usize, outputs: usize, activation: Activation) -> Self {
        Self {
            kind: LayerKind::Dense { inputs, outputs },
            activation,
            has_bias: true,
        }
    }

    pub fn conv(geometry: ConvGeometry, activation: Activation) -> Self {
        Self {
            kind: LayerKind::Conv { geometry },
            activation,
            has_bias: true,
        }
    }

    pub fn without_bias(mut self) -> Self {
        self.has_bias = false;
        self
    }

    pub fn input_len(&self) -> usize {
        match self.kind {
            LayerKind::Dense { inputs, .. } => inputs,
            LayerKind::Conv { geometry } => geometry.input_len(),
        }
    }

    pub fn output_len(&self) -> usize {
        match self.kind {
            LayerKind::Dense { outputs, .. } => outputs,
            LayerKind::Conv { geometry } => geometry.output_len(),
        }
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        match self.kind {
            LayerKind::Dense { inputs, outputs } => vec![outputs, inputs],
            LayerKind::Conv { geometry } => geometry.kernel_shape().to_vec(),
        }
    }

    pub fn bias_len(&self) -> usize {
        match self.kind {
            LayerKind::Dense { outputs, .. } => outputs,
            LayerKind::Conv { geometry } => geometry.out_channels,
        }
    }

    fn fan_in(&self) -> usize {
        match self.kind {
            LayerKind::Dense { inputs, .. } => inputs,
            LayerKind::Conv { geometry } => {
                geometry.in_channels * geometry.kernel_height * geometry.kernel_width
            }
        }
    }

    fn validate(&self) -> Result<()> {
        match self.kind {
            LayerKind::Dense { inputs, outputs } if inputs == 0 || outputs == 0 => {
                Err(Error::input("dense layer dimensions must be positive"))
            }
            LayerKind::Conv { geometry } => geometry.validate(),
            _ => Ok(()),
        }
    }
}

/// Architecture description; serialized as the JSON sidecar of a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    /// Fully connected net: `input → hidden… → classes`, `activation` on hidden
    /// layers and identity on the output.
    pub fn mlp(input_dim: usize, hidden: &[usize], classes: usize, activation: Activation) -> Self {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut prev = input_dim;
        for &h in hidden {
            layers.push(LayerSpec::dense(prev, h, activation));
            prev = h;
        }
        layers.push(LayerSpec::dense(prev, classes, Activation::Identity));
        Self {
            input_shape: vec![input_dim],
            layers,
        }
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    /// Output width of the last layer (0 for an empty spec).
    pub fn classes(&self) -> usize {
        self.layers.last().map_or(0, |l| l.output_len())
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::input("network needs at least one layer"));
        }
        let mut prev: usize = self.input_shape.iter().product();
        if prev == 0 {
            return Err(Error::input("input shape must be nonempty"));
        }
        for (i, spec) in self.layers.iter().enumerate() {
            spec.validate()?;
            if spec.input_len() != prev {
                return Err(Error::input(format!(
                    "layer {i} expects {} inputs but receives {prev}",
                    spec.input_len()
                )));
            }
            prev = spec.output_len();
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub weight: Tensor,
    pub bias: Option<Vec<f64>>,
    /// Persistent power-iteration iterate used by spectral normalization.
    pub power_iter: Option<PowerIterState>,
}

impl Layer {
    pub fn new(spec: LayerSpec, weight: Tensor, bias: Option<Vec<f64>>) -> Result<Self> {
        spec.validate()?;
        if weight.shape() != spec.weight_shape().as_slice() {
            return Err(Error::input(format!(
                "weight shape {:?} does not match layer spec {:?}",
                weight.shape(),
                spec.weight_shape()
            )));
        }
        match (&bias, spec.has_bias) {
            (Some(b), true) if b.len() == spec.bias_len() => {}
            (None, false) => {}
            _ => {
                return Err(Error::input(format!(
                    "bias does not match layer spec (has_bias = {})",
                    spec.has_bias
                )))
            }
        }
        Ok(Self {
            spec,
            weight,
            bias,
            power_iter: None,
        })
    }

    /// Apply the linear part (no bias) to one sample.
    pub fn apply_linear(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.spec.output_len()];
        match self.spec.kind {
            LayerKind::Dense { inputs, outputs } => {
                gemm_abt(x, self.weight.data(), &mut out, 1, inputs, outputs);
            }
            LayerKind::Conv { geometry } => {
                conv_forward(self.weight.data(), &geometry, x, &mut out);
            }
        }
        out
    }

    /// Adjoint of [`Layer::apply_linear`].
    pub fn apply_linear_transpose(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.spec.input_len()];
        match self.spec.kind {
            LayerKind::Dense { inputs, outputs } => {
                gemm_ab(v, self.weight.data(), &mut out, 1, outputs, inputs);
            }
            LayerKind::Conv { geometry } => {
                conv_transpose(self.weight.data(), &geometry, v, &mut out);
            }
        }
        out
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.weight.norm_l2()
    }
}

/// Feed-forward network `f(x) = W_d σ(W_{d-1} ⋯ σ(W_1 x))` with optional biases.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
}

/// Per-layer parameter gradients, averaged over a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Option<Vec<f64>>>,
    /// Mean loss over the batch.
    pub loss: f64,
}

/// Forward activations kept for backpropagation; all buffers are `n × len`.
struct Trace {
    n: usize,
    /// `acts[0]` is the input batch, `acts[i + 1]` the output of layer `i`.
    acts: Vec<Vec<f64>>,
    /// σ'(z) at each layer's pre-activation.
    derivs: Vec<Vec<f64>>,
}

impl Network {
    /// He-initialized network: weights `N(0, 2 / fan_in)`, zero biases.
    pub fn new(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(spec.layers.len());
        for ls in &spec.layers {
            let std = (2.0 / ls.fan_in() as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("finite std");
            let shape = ls.weight_shape();
            let len = shape.iter().product();
            let data = (0..len).map(|_| normal.sample(&mut rng)).collect();
            let weight = Tensor::new(shape, data)?;
            let bias = ls.has_bias.then(|| vec![0.0; ls.bias_len()]);
            layers.push(Layer::new(*ls, weight, bias)?);
        }
        Ok(Self {
            input_shape: spec.input_shape.clone(),
            layers,
        })
    }

    pub fn from_layers(input_shape: Vec<usize>, layers: Vec<Layer>) -> Result<Self> {
        let spec = NetworkSpec {
            input_shape: input_shape.clone(),
            layers: layers.iter().map(|l| l.spec).collect(),
        };
        spec.validate()?;
        Ok(Self {
            input_shape,
            layers,
        })
    }

    pub fn spec(&self) -> NetworkSpec {
        NetworkSpec {
            input_shape: self.input_shape.clone(),
            layers: self.layers.iter().map(|l| l.spec).collect(),
        }
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    /// Number of classes `m`.
    pub fn classes(&self) -> usize {
        self.layers.last().map(|l| l.spec.output_len()).unwrap_or(0)
    }

    /// Depth `d`.
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Width `h`: the largest input or output unit count of any layer.
    pub fn width(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.spec.input_len().max(l.spec.output_len()))
            .max()
            .unwrap_or(0)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    fn check_input(&self, len: usize) -> Result<()> {
        if len != self.input_len() {
            return Err(Error::input(format!(
                "input has {len} values, network expects {:?} ({})",
                self.input_shape,
                self.input_len()
            )));
        }
        Ok(())
    }

    /// Logits for a single sample.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x.len())?;
        Ok(Tensor::vector(self.forward_batch(x.data(), 1)?))
    }

    /// Logits for `n` samples stored row-major in `xs`; returns `n × m`.
    pub fn forward_batch(&self, xs: &[f64], n: usize) -> Result<Vec<f64>> {
        let mut trace = self.trace(xs, n, false)?;
        Ok(trace.acts.pop().expect("at least one layer"))
    }

    /// Predicted classes; ties go to the lowest index.
    pub fn predict_batch(&self, xs: &[f64], n: usize) -> Result<Vec<usize>> {
        let m = self.classes();
        let logits = self.forward_batch(xs, n)?;
        Ok(logits.chunks_exact(m).map(argmax).collect())
    }

    fn trace(&self, xs: &[f64], n: usize, keep: bool) -> Result<Trace> {
        if n == 0 {
            return Err(Error::input("empty batch"));
        }
        if xs.len() != n * self.input_len() {
            return Err(Error::input(format!(
                "batch has {} values, expected {n} × {}",
                xs.len(),
                self.input_len()
            )));
        }
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        let mut derivs = Vec::with_capacity(self.layers.len());
        let mut current = xs.to_vec();
        for (li, layer) in self.layers.iter().enumerate() {
            let out_len = layer.spec.output_len();
            let in_len = layer.spec.input_len();
            let mut z = vec![0.0; n * out_len];
            match layer.spec.kind {
                LayerKind::Dense { inputs, outputs } => {
                    gemm_abt(&current, layer.weight.data(), &mut z, n, inputs, outputs);
                    if let Some(b) = &layer.bias {
                        for row in z.chunks_exact_mut(outputs) {
                            for (zi, bi) in row.iter_mut().zip(b) {
                                *zi += bi;
                            }
                        }
                    }
                }
                LayerKind::Conv { geometry } => {
                    let plane = geometry.out_height() * geometry.out_width();
                    for (x, out) in current.chunks_exact(in_len).zip(z.chunks_exact_mut(out_len)) {
                        conv_forward(layer.weight.data(), &geometry, x, out);
                        if let Some(b) = &layer.bias {
                            for (c, bc) in b.iter().enumerate() {
                                for v in &mut out[c * plane..(c + 1) * plane] {
                                    *v += bc;
                                }
                            }
                        }
                    }
                }
            }
            let act = layer.spec.activation;
            let mut d = if keep { vec![0.0; z.len()] } else { Vec::new() };
            for (i, zi) in z.iter_mut().enumerate() {
                let (v, dv) = act.eval(*zi);
                *zi = v;
                if keep {
                    d[i] = dv;
                }
            }
            if z.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical {
                    layer: li,
                    message: "non-finite activation".into(),
                });
            }
            if keep {
                acts.push(std::mem::replace(&mut current, z));
                derivs.push(d);
            } else {
                current = z;
            }
        }
        acts.push(current);
        Ok(Trace { n, acts, derivs })
    }

    /// Backpropagate `dlogits` (`n × m`). Returns the parameter gradients
    /// (summed over the batch) when requested and the input gradient when
    /// requested.
    fn backward(
        &self,
        trace: &Trace,
        mut delta: Vec<f64>,
        want_params: bool,
        want_input: bool,
    ) -> Result<(Option<(Vec<Vec<f64>>, Vec<Option<Vec<f64>>>)>, Option<Vec<f64>>)> {
        let n = trace.n;
        let depth = self.layers.len();
        let mut w_grads = vec![Vec::new(); if want_params { depth } else { 0 }];
        let mut b_grads = vec![None; if want_params { depth } else { 0 }];
        for li in (0..depth).rev() {
            let layer = &self.layers[li];
            for (g, d) in delta.iter_mut().zip(&trace.derivs[li]) {
                *g *= d;
            }
            let input = &trace.acts[li];
            let in_len = layer.spec.input_len();
            let out_len = layer.spec.output_len();
            if want_params {
                let mut gw = vec![0.0; layer.weight.len()];
                let gb = layer.bias.as_ref().map(|_| {
                    let mut gb = vec![0.0; layer.spec.bias_len()];
                    match layer.spec.kind {
                        LayerKind::Dense { outputs, .. } => {
                            for row in delta.chunks_exact(outputs) {
                                for (b, r) in gb.iter_mut().zip(row) {
                                    *b += r;
                                }
                            }
                        }
                        LayerKind::Conv { geometry } => {
                            let plane = geometry.out_height() * geometry.out_width();
                            for row in delta.chunks_exact(out_len) {
                                for (c, b) in gb.iter_mut().enumerate() {
                                    *b += row[c * plane..(c + 1) * plane].iter().sum::<f64>();
                                }
                            }
                        }
                    }
                    gb
                });
                match layer.spec.kind {
                    LayerKind::Dense { inputs, outputs } => {
                        gemm_atb_acc(&delta, input, &mut gw, n, outputs, inputs);
                    }
                    LayerKind::Conv { geometry } => {
                        for (x, v) in input.chunks_exact(in_len).zip(delta.chunks_exact(out_len)) {
                            conv_kernel_grad_acc(&geometry, x, v, &mut gw);
                        }
                    }
                }
                w_grads[li] = gw;
                b_grads[li] = gb;
            }
            if li == 0 && !want_input {
                break;
            }
            let mut prev = vec![0.0; n * in_len];
            match layer.spec.kind {
                LayerKind::Dense { inputs, outputs } => {
                    gemm_ab(&delta, layer.weight.data(), &mut prev, n, outputs, inputs);
                }
                LayerKind::Conv { geometry } => {
                    for (v, out) in delta.chunks_exact(out_len).zip(prev.chunks_exact_mut(in_len)) {
                        conv_transpose(layer.weight.data(), &geometry, v, out);
                    }
                }
            }
            if prev.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical {
                    layer: li,
                    message: "non-finite gradient".into(),
                });
            }
            delta = prev;
        }
        let params = want_params.then_some((w_grads, b_grads));
        Ok((params, want_input.then_some(delta)))
    }

    /// Per-sample input gradients `∇_x ℓ(f(x_i), y_i)` and losses for a batch.
    pub fn grad_input_batch(
        &self,
        loss: Loss,
        xs: &[f64],
        labels: &[usize],
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let n = labels.len();
        let trace = self.trace(xs, n, true)?;
        let (dlogits, losses) = self.loss_grads(loss, &trace, labels)?;
        let (_, gx) = self.backward(&trace, dlogits, false, true)?;
        Ok((gx.expect("input gradient requested"), losses))
    }

    /// Mean-loss parameter gradients for a batch.
    pub fn grad_params_batch(&self, loss: Loss, xs: &[f64], labels: &[usize]) -> Result<ParamGrads> {
        let n = labels.len();
        if n == 0 {
            return Err(Error::input("empty batch"));
        }
        let trace = self.trace(xs, n, true)?;
        let (mut dlogits, losses) = self.loss_grads(loss, &trace, labels)?;
        let scale = 1.0 / n as f64;
        dlogits.iter_mut().for_each(|g| *g *= scale);
        let (params, _) = self.backward(&trace, dlogits, true, false)?;
        let (weights, biases) = params.expect("parameter gradients requested");
        Ok(ParamGrads {
            weights,
            biases,
            loss: losses.iter().sum::<f64>() * scale,
        })
    }

    fn loss_grads(&self, loss: Loss, trace: &Trace, labels: &[usize]) -> Result<(Vec<f64>, Vec<f64>)> {
        let m = self.classes();
        let logits = trace.acts.last().expect("logits");
        let mut dlogits = Vec::with_capacity(logits.len());
        let mut losses = Vec::with_capacity(labels.len());
        for (row, &y) in logits.chunks_exact(m).zip(labels) {
            if y >= m {
                return Err(Error::input(format!("label {y} out of range for {m} classes")));
            }
            let (l, g) = loss.value_and_grad(row, y);
            losses.push(l);
            dlogits.extend(g);
        }
        Ok((dlogits, losses))
    }
}

/// Index of the largest entry; lowest index wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// `∇_x ℓ(f(x), y)` for one sample.
pub fn grad_input(net: &Network, loss: Loss, x: &Tensor, y: usize) -> Result<Tensor> {
    net.check_input(x.len())?;
    let (g, _) = net.grad_input_batch(loss, x.data(), &[y])?;
    Tensor::new(x.shape().to_vec(), g)
}

/// Batch-averaged parameter gradients over `(xs, labels)`.
pub fn grad_params(net: &Network, loss: Loss, xs: &[f64], labels: &[usize]) -> Result<ParamGrads> {
    net.grad_params_batch(loss, xs, labels)
}

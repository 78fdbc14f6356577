//! Reference evaluation and finite-difference gradients.
//!
//! Everything here goes through the loss *value* only, via a straight-line
//! evaluator that shares no code with the batched forward/backward passes, so
//! it can serve as an independent check of the analytic gradients.

use super::network::{Loss, Network};
use super::LayerKind;
use crate::error::Result;
use crate::specnorm::explicit_conv_matrix;

/// Logits and per-layer pre-activations `z_i = W_i a_{i−1} + b_i` for one
/// sample, computed with explicit loops (convolutions as dense matrices).
pub fn reference_forward(net: &Network, x: &[f64]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let mut a = x.to_vec();
    let mut pre = Vec::with_capacity(net.depth());
    for layer in net.layers() {
        let (rows, cols, w) = match layer.spec.kind {
            LayerKind::Dense { inputs, outputs } => (outputs, inputs, layer.weight.data().to_vec()),
            LayerKind::Conv { geometry } => {
                let m = explicit_conv_matrix(&layer.weight, &geometry, usize::MAX)?;
                (m.rows, m.cols, m.data)
            }
        };
        let mut z = vec![0.0; rows];
        for (r, zr) in z.iter_mut().enumerate() {
            let mut s = 0.0;
            for c in 0..cols {
                s += w[r * cols + c] * a[c];
            }
            *zr = s;
        }
        if let Some(b) = &layer.bias {
            let per = rows / b.len();
            for (r, zr) in z.iter_mut().enumerate() {
                *zr += b[r / per];
            }
        }
        a = z.iter().map(|&v| layer.spec.activation.eval(v).0).collect();
        pre.push(z);
    }
    Ok((a, pre))
}

fn loss_at(net: &Network, loss: Loss, x: &[f64], y: usize) -> Result<f64> {
    Ok(loss.value(&reference_forward(net, x)?.0, y))
}

/// Central-difference `∇ₓ ℓ(f(x), y)` with step `h`.
pub fn fd_input_grad(net: &Network, loss: Loss, x: &[f64], y: usize, h: f64) -> Result<Vec<f64>> {
    let mut xp = x.to_vec();
    let mut g = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        xp[i] = x[i] + h;
        let up = loss_at(net, loss, &xp, y)?;
        xp[i] = x[i] - h;
        let down = loss_at(net, loss, &xp, y)?;
        xp[i] = x[i];
        g.push((up - down) / (2.0 * h));
    }
    Ok(g)
}

fn mean_loss(net: &Network, loss: Loss, xs: &[f64], labels: &[usize]) -> Result<f64> {
    let d = net.input_len();
    let mut s = 0.0;
    for (x, &y) in xs.chunks_exact(d).zip(labels) {
        s += loss_at(net, loss, x, y)?;
    }
    Ok(s / labels.len() as f64)
}

/// Central-difference gradients of the batch-mean loss with respect to every
/// weight and bias, in the layout of [`super::ParamGrads`].
#[allow(clippy::type_complexity)]
pub fn fd_param_grads(
    net: &Network,
    loss: Loss,
    xs: &[f64],
    labels: &[usize],
    h: f64,
) -> Result<(Vec<Vec<f64>>, Vec<Option<Vec<f64>>>)> {
    let mut probe = net.clone();
    let mut weights = Vec::with_capacity(net.depth());
    let mut biases = Vec::with_capacity(net.depth());
    for li in 0..net.depth() {
        let mut gw = Vec::with_capacity(net.layers()[li].weight.len());
        for k in 0..net.layers()[li].weight.len() {
            let w0 = net.layers()[li].weight.data()[k];
            probe.layers_mut()[li].weight.data_mut()[k] = w0 + h;
            let up = mean_loss(&probe, loss, xs, labels)?;
            probe.layers_mut()[li].weight.data_mut()[k] = w0 - h;
            let down = mean_loss(&probe, loss, xs, labels)?;
            probe.layers_mut()[li].weight.data_mut()[k] = w0;
            gw.push((up - down) / (2.0 * h));
        }
        weights.push(gw);
        let gb = match &net.layers()[li].bias {
            None => None,
            Some(b) => {
                let mut gb = Vec::with_capacity(b.len());
                for (k, &b0) in b.iter().enumerate() {
                    probe.layers_mut()[li].bias.as_mut().unwrap()[k] = b0 + h;
                    let up = mean_loss(&probe, loss, xs, labels)?;
                    probe.layers_mut()[li].bias.as_mut().unwrap()[k] = b0 - h;
                    let down = mean_loss(&probe, loss, xs, labels)?;
                    probe.layers_mut()[li].bias.as_mut().unwrap()[k] = b0;
                    gb.push((up - down) / (2.0 * h));
                }
                Some(gb)
            }
        };
        biases.push(gb);
    }
    Ok((weights, biases))
}

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂)`, or 0 when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = super::norm_l2(a).max(super::norm_l2(b));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

//! Rectifier family: ReLU, leaky ReLU, PReLU (channel-wise and shared).
//!
//! All of them run through one kernel, `f(y) = y` for `y > 0` and `a*y`
//! otherwise, so a PReLU with every slope at zero computes bit-for-bit what
//! ReLU does. The `y = 0` point takes the negative branch.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `(outer, channels, inner)` view of a tensor for per-channel slopes.
///
/// Rank-1 tensors are treated as one sample whose elements are channels;
/// otherwise axis 1 is the channel axis.
pub(crate) fn channel_layout(shape: &[usize]) -> (usize, usize, usize) {
    match shape.len() {
        0 => (1, 1, 1),
        1 => (1, shape[0], 1),
        _ => (shape[0], shape[1], shape[2..].iter().product()),
    }
}

fn check_slopes(y: &Tensor, slopes: &Tensor, shared: bool) -> Result<usize> {
    let (_, channels, _) = channel_layout(y.shape());
    let want = if shared { 1 } else { channels };
    if slopes.len() != want {
        return Err(Error::invalid(format!(
            "expected {want} slope(s) for {} input {:?}, got {}",
            if shared { "shared" } else { "channel-wise" },
            y.shape(),
            slopes.len()
        )));
    }
    Ok(channels)
}

#[inline]
pub(crate) fn rectify(y: f64, a: f64) -> f64 {
    if y > 0.0 {
        y
    } else {
        a * y
    }
}

/// Applies `rectify` with one slope per channel (`slopes.len() == channels`)
/// or a single slope broadcast over all channels.
pub(crate) fn rectify_tensor(y: &Tensor, slopes: &[f64]) -> Tensor {
    let (outer, channels, inner) = channel_layout(y.shape());
    let mut out = y.clone();
    let data = out.data_mut();
    for b in 0..outer {
        for c in 0..channels {
            let a = if slopes.len() == 1 { slopes[0] } else { slopes[c] };
            let base = (b * channels + c) * inner;
            for v in &mut data[base..base + inner] {
                *v = rectify(*v, a);
            }
        }
    }
    out
}

/// Returns `(grad_y, per-channel slope gradient)`; the latter sums over
/// batch then position for each channel.
pub(crate) fn rectify_backward(y: &Tensor, slopes: &[f64], upstream: &Tensor) -> (Tensor, Vec<f64>) {
    let (outer, channels, inner) = channel_layout(y.shape());
    let mut grad_y = upstream.clone();
    let gy = grad_y.data_mut();
    let yd = y.data();
    let ud = upstream.data();
    for b in 0..outer {
        for c in 0..channels {
            let a = if slopes.len() == 1 { slopes[0] } else { slopes[c] };
            let base = (b * channels + c) * inner;
            for i in base..base + inner {
                if yd[i] <= 0.0 {
                    gy[i] = a * ud[i];
                }
            }
        }
    }
    let mut per_channel = vec![0.0; channels];
    for (c, acc) in per_channel.iter_mut().enumerate() {
        for b in 0..outer {
            let base = (b * channels + c) * inner;
            for i in base..base + inner {
                if yd[i] <= 0.0 {
                    *acc += ud[i] * yd[i];
                }
            }
        }
    }
    (grad_y, per_channel)
}

/// PReLU forward: `max(0, y) + a * min(0, y)` with `a` picked per channel.
pub fn prelu_forward(y: &Tensor, slopes: &Tensor, shared: bool) -> Result<Tensor> {
    check_slopes(y, slopes, shared)?;
    Ok(rectify_tensor(y, slopes.data()))
}

/// PReLU backward. `grad_slopes` has one entry per channel, or one entry
/// summed over channels (in channel order) in shared mode.
pub fn prelu_backward(
    y: &Tensor,
    slopes: &Tensor,
    shared: bool,
    upstream: &Tensor,
) -> Result<(Tensor, Tensor)> {
    check_slopes(y, slopes, shared)?;
    upstream.ensure_shape("prelu_backward", y.shape())?;
    let (grad_y, per_channel) = rectify_backward(y, slopes.data(), upstream);
    let grad_slopes = if shared {
        Tensor::from_vec(&[1], vec![per_channel.iter().sum()])?
    } else {
        Tensor::from_vec(&[per_channel.len()], per_channel)?
    };
    Ok((grad_y, grad_slopes))
}

//! Forward and backward passes for single layers.
//!
//! Activations are always `[batch, channels, height, width]`; fc layers
//! flatten their input and emit `[batch, units, 1, 1]`. Batch items are
//! processed in parallel where the `parallel` feature allows, and every
//! reduction over the batch runs in item order.

use crate::error::{Error, Result};
use crate::model::activation::{rectify_backward, rectify_tensor};
use crate::model::params::LayerParams;
use crate::model::spec::{ActivationKind, Layer, LayerSpec};
use crate::par;
use crate::rng::RngStream;
use crate::tensor::{dot, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Whatever a layer's backward pass needs from its forward pass.
#[derive(Clone, Debug)]
pub enum Cache {
    Input(Tensor),
    MaxPool { argmax: Vec<usize>, input_shape: Vec<usize> },
    Dropout { mask: Option<Vec<f64>> },
    Passthrough,
}

/// Slopes in effect for an activation layer.
fn activation_slopes<'a>(kind: ActivationKind, params: &'a LayerParams) -> Result<std::borrow::Cow<'a, [f64]>> {
    use std::borrow::Cow;
    match kind {
        ActivationKind::Relu => Ok(Cow::Owned(vec![0.0])),
        ActivationKind::LeakyRelu(a) => Ok(Cow::Owned(vec![a])),
        ActivationKind::Identity => Ok(Cow::Owned(vec![1.0])),
        ActivationKind::PreluChannelWise(_) | ActivationKind::PreluShared(_) => match params {
            LayerParams::Slopes(s) => Ok(Cow::Borrowed(s.data())),
            _ => Err(Error::invalid("PReLU layer without slope parameters")),
        },
    }
}

fn check_input(layer: &Layer, input: &Tensor) -> Result<usize> {
    let batch = input.shape().first().copied().unwrap_or(0);
    let want = layer.input.batched(batch);
    input.ensure_shape(layer.spec.kind_name(), &want)?;
    Ok(batch)
}

fn weighted(params: &LayerParams) -> Result<(&Tensor, &Tensor)> {
    match params {
        LayerParams::Weighted { weight, bias } => Ok((weight, bias)),
        _ => Err(Error::invalid("weighted layer without weight parameters")),
    }
}

pub fn layer_forward(
    layer: &Layer,
    params: &LayerParams,
    input: &Tensor,
    mode: Mode,
    rng: Option<&mut RngStream>,
) -> Result<(Tensor, Cache)> {
    let batch = check_input(layer, input)?;
    let out_shape = layer.output.batched(batch);
    match &layer.spec {
        LayerSpec::Input { .. } | LayerSpec::SoftmaxXent { .. } => Ok((input.clone(), Cache::Passthrough)),
        LayerSpec::Fc { .. } => {
            let (w, b) = weighted(params)?;
            let out = fc_forward(input, w, b, &out_shape)?;
            Ok((out, Cache::Input(input.clone())))
        }
        LayerSpec::Conv { kernel, stride, .. } => {
            let (w, b) = weighted(params)?;
            let geom = ConvGeom::new(layer, *kernel, *stride);
            let out = conv_forward(input, w, b, &geom)?;
            Ok((out, Cache::Input(input.clone())))
        }
        LayerSpec::MaxPool { kernel, stride } => {
            let (out, argmax) = maxpool_forward(layer, input, *kernel, *stride, &out_shape)?;
            Ok((
                out,
                Cache::MaxPool {
                    argmax,
                    input_shape: input.shape().to_vec(),
                },
            ))
        }
        LayerSpec::Activation(kind) => {
            let slopes = activation_slopes(*kind, params)?;
            Ok((rectify_tensor(input, &slopes), Cache::Input(input.clone())))
        }
        LayerSpec::Dropout { rate } => {
            if mode == Mode::Eval || *rate == 0.0 {
                return Ok((input.clone(), Cache::Dropout { mask: None }));
            }
            let rng = rng.ok_or_else(|| Error::invalid("dropout in train mode needs an rng"))?;
            let keep = 1.0 / (1.0 - rate);
            let mask: Vec<f64> = (0..input.len())
                .map(|_| if rng.uniform() < *rate { 0.0 } else { keep })
                .collect();
            let mut out = input.clone();
            for (o, m) in out.data_mut().iter_mut().zip(&mask) {
                *o *= m;
            }
            Ok((out, Cache::Dropout { mask: Some(mask) }))
        }
    }
}

/// Returns `(grad_input, grad_params)`.
pub fn layer_backward(
    layer: &Layer,
    params: &LayerParams,
    cache: &Cache,
    upstream: &Tensor,
) -> Result<(Tensor, LayerParams)> {
    backward_impl(layer, params, cache, upstream, true)
}

pub(crate) fn backward_impl(
    layer: &Layer,
    params: &LayerParams,
    cache: &Cache,
    upstream: &Tensor,
    want_param_grads: bool,
) -> Result<(Tensor, LayerParams)> {
    let batch = upstream.shape().first().copied().unwrap_or(0);
    upstream.ensure_shape("layer_backward", &layer.output.batched(batch))?;
    let mismatch = || Error::invalid(format!("cache does not belong to a {} layer", layer.spec.kind_name()));
    match (&layer.spec, cache) {
        (LayerSpec::Input { .. } | LayerSpec::SoftmaxXent { .. }, Cache::Passthrough) => {
            Ok((upstream.clone(), LayerParams::None))
        }
        (LayerSpec::Fc { .. }, Cache::Input(x)) => {
            let (w, _) = weighted(params)?;
            fc_backward(x, w, upstream, want_param_grads)
        }
        (LayerSpec::Conv { kernel, stride, .. }, Cache::Input(x)) => {
            let (w, _) = weighted(params)?;
            let geom = ConvGeom::new(layer, *kernel, *stride);
            conv_backward(x, w, upstream, &geom, want_param_grads)
        }
        (LayerSpec::MaxPool { .. }, Cache::MaxPool { argmax, input_shape }) => {
            let mut grad = Tensor::zeros(input_shape);
            let g = grad.data_mut();
            for (&src, &u) in argmax.iter().zip(upstream.data()) {
                g[src] += u;
            }
            Ok((grad, LayerParams::None))
        }
        (LayerSpec::Activation(kind), Cache::Input(y)) => {
            let slopes = activation_slopes(*kind, params)?;
            let (grad_y, per_channel) = rectify_backward(y, &slopes, upstream);
            let grads = match kind {
                ActivationKind::PreluChannelWise(_) => {
                    LayerParams::Slopes(Tensor::from_vec(&[per_channel.len()], per_channel)?)
                }
                ActivationKind::PreluShared(_) => {
                    LayerParams::Slopes(Tensor::from_vec(&[1], vec![per_channel.iter().sum()])?)
                }
                _ => LayerParams::None,
            };
            Ok((grad_y, grads))
        }
        (LayerSpec::Dropout { .. }, Cache::Dropout { mask }) => {
            let mut grad = upstream.clone();
            if let Some(mask) = mask {
                for (g, m) in grad.data_mut().iter_mut().zip(mask) {
                    *g *= m;
                }
            }
            Ok((grad, LayerParams::None))
        }
        _ => Err(mismatch()),
    }
}

fn fc_forward(x: &Tensor, w: &Tensor, b: &Tensor, out_shape: &[usize]) -> Result<Tensor> {
    let (d, n) = (w.shape()[0], w.shape()[1]);
    let mut out = Tensor::zeros(out_shape);
    let (xd, wd, bd) = (x.data(), w.data(), b.data());
    par::for_each_row_mut(out.data_mut(), d, |i, row| {
        let xi = &xd[i * n..(i + 1) * n];
        for (j, o) in row.iter_mut().enumerate() {
            *o = dot(xi, &wd[j * n..(j + 1) * n]) + bd[j];
        }
    });
    out.ensure_finite("fc forward")?;
    Ok(out)
}

fn fc_backward(x: &Tensor, w: &Tensor, dy: &Tensor, want_param_grads: bool) -> Result<(Tensor, LayerParams)> {
    let (d, n) = (w.shape()[0], w.shape()[1]);
    let (xd, wd, dyd) = (x.data(), w.data(), dy.data());
    let mut dx = Tensor::zeros(x.shape());
    par::for_each_row_mut(dx.data_mut(), n, |i, row| {
        for j in 0..d {
            let g = dyd[i * d + j];
            for (o, wv) in row.iter_mut().zip(&wd[j * n..(j + 1) * n]) {
                *o += g * wv;
            }
        }
    });
    if !want_param_grads {
        return Ok((dx, LayerParams::None));
    }
    let batch = x.shape()[0];
    let mut dw = Tensor::zeros(w.shape());
    par::for_each_row_mut(dw.data_mut(), n, |j, row| {
        for i in 0..batch {
            let g = dyd[i * d + j];
            for (o, xv) in row.iter_mut().zip(&xd[i * n..(i + 1) * n]) {
                *o += g * xv;
            }
        }
    });
    let mut db = Tensor::zeros(&[d]);
    for (j, o) in db.data_mut().iter_mut().enumerate() {
        for i in 0..batch {
            *o += dyd[i * d + j];
        }
    }
    Ok((dx, LayerParams::Weighted { weight: dw, bias: db }))
}

/// Conv dimensions resolved from a layer.
#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    d: usize,
    oh: usize,
    ow: usize,
    k: usize,
    stride: usize,
    pad_top: usize,
    pad_left: usize,
}

impl ConvGeom {
    fn new(layer: &Layer, k: usize, stride: usize) -> Self {
        let (pad_top, pad_left) = layer.conv_padding();
        ConvGeom {
            c: layer.input.channels,
            h: layer.input.height,
            w: layer.input.width,
            d: layer.output.channels,
            oh: layer.output.height,
            ow: layer.output.width,
            k,
            stride,
            pad_top,
            pad_left,
        }
    }

    /// Input coordinate for output `o` and kernel tap `t`, if inside the image.
    #[inline]
    fn src(o: usize, t: usize, stride: usize, pad: usize, size: usize) -> Option<usize> {
        (o * stride + t).checked_sub(pad).filter(|&i| i < size)
    }
}

impl ConvGeom {
    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    fn filter_len(&self) -> usize {
        self.c * self.k * self.k
    }

    /// Unrolls one example into a `[c·k·k, oh·ow]` patch matrix; taps that
    /// fall in the padding are zero.
    fn im2col(&self, xn: &[f64], cols: &mut [f64]) {
        let p = self.positions();
        for c in 0..self.c {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = &mut cols[((c * self.k + ky) * self.k + kx) * p..][..p];
                    for oy in 0..self.oh {
                        let dst = &mut row[oy * self.ow..(oy + 1) * self.ow];
                        let Some(iy) = ConvGeom::src(oy, ky, self.stride, self.pad_top, self.h) else {
                            dst.fill(0.0);
                            continue;
                        };
                        let src = &xn[(c * self.h + iy) * self.w..(c * self.h + iy + 1) * self.w];
                        for (ox, v) in dst.iter_mut().enumerate() {
                            *v = ConvGeom::src(ox, kx, self.stride, self.pad_left, self.w).map_or(0.0, |ix| src[ix]);
                        }
                    }
                }
            }
        }
    }

    /// Adds a patch-matrix gradient back onto the example it came from.
    fn col2im_add(&self, dcols: &[f64], dxn: &mut [f64]) {
        let p = self.positions();
        for c in 0..self.c {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = &dcols[((c * self.k + ky) * self.k + kx) * p..][..p];
                    for oy in 0..self.oh {
                        let Some(iy) = ConvGeom::src(oy, ky, self.stride, self.pad_top, self.h) else {
                            continue;
                        };
                        let dst = &mut dxn[(c * self.h + iy) * self.w..(c * self.h + iy + 1) * self.w];
                        for (ox, v) in row[oy * self.ow..(oy + 1) * self.ow].iter().enumerate() {
                            if let Some(ix) = ConvGeom::src(ox, kx, self.stride, self.pad_left, self.w) {
                                dst[ix] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Convolution as a per-example product of the filters with the patch
/// matrix. Each output accumulates over (channel, kernel row, kernel
/// column) in index order and adds the bias last.
fn conv_forward(x: &Tensor, w: &Tensor, b: &Tensor, g: &ConvGeom) -> Result<Tensor> {
    let batch = x.shape()[0];
    let mut out = Tensor::zeros(&[batch, g.d, g.oh, g.ow]);
    let (xd, wd, bd) = (x.data(), w.data(), b.data());
    let in_len = g.c * g.h * g.w;
    let (p, f) = (g.positions(), g.filter_len());
    let g = *g;
    par::for_each_row_mut(out.data_mut(), g.d * p, |n, out_n| {
        let mut cols = vec![0.0; f * p];
        g.im2col(&xd[n * in_len..(n + 1) * in_len], &mut cols);
        for (o, out_o) in out_n.chunks_exact_mut(p).enumerate() {
            for (wv, col) in wd[o * f..(o + 1) * f].iter().zip(cols.chunks_exact(p)) {
                for (acc, cv) in out_o.iter_mut().zip(col) {
                    *acc += wv * cv;
                }
            }
            for v in out_o.iter_mut() {
                *v += bd[o];
            }
        }
    });
    out.ensure_finite("conv forward")?;
    Ok(out)
}

/// Gradient of the conv. The input gradient is the transposed-filter
/// product `Wᵀ Δy` folded back through the patch layout.
fn conv_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    g: &ConvGeom,
    want_param_grads: bool,
) -> Result<(Tensor, LayerParams)> {
    let batch = x.shape()[0];
    let (xd, wd, dyd) = (x.data(), w.data(), dy.data());
    let in_len = g.c * g.h * g.w;
    let (p, f) = (g.positions(), g.filter_len());
    let out_len = g.d * p;
    let g = *g;

    let mut dx = Tensor::zeros(x.shape());
    par::for_each_row_mut(dx.data_mut(), in_len, |n, dxn| {
        let dy_n = &dyd[n * out_len..(n + 1) * out_len];
        let mut dcols = vec![0.0; f * p];
        for (o, dy_o) in dy_n.chunks_exact(p).enumerate() {
            for (wv, dcol) in wd[o * f..(o + 1) * f].iter().zip(dcols.chunks_exact_mut(p)) {
                for (acc, u) in dcol.iter_mut().zip(dy_o) {
                    *acc += wv * u;
                }
            }
        }
        g.col2im_add(&dcols, dxn);
    });
    if !want_param_grads {
        return Ok((dx, LayerParams::None));
    }

    // Batch items are summed in index order into every filter row.
    let mut dw = Tensor::zeros(w.shape());
    let mut cols = vec![0.0; f * p];
    for n in 0..batch {
        g.im2col(&xd[n * in_len..(n + 1) * in_len], &mut cols);
        let dy_n = &dyd[n * out_len..(n + 1) * out_len];
        let cols = &cols;
        par::for_each_row_mut(dw.data_mut(), f, |o, dwo| {
            let dy_o = &dy_n[o * p..(o + 1) * p];
            for (acc, col) in dwo.iter_mut().zip(cols.chunks_exact(p)) {
                *acc += dot(dy_o, col);
            }
        });
    }
    let mut db = Tensor::zeros(&[g.d]);
    for (o, acc) in db.data_mut().iter_mut().enumerate() {
        for n in 0..batch {
            let base = n * out_len + o * p;
            for v in &dyd[base..base + p] {
                *acc += v;
            }
        }
    }
    Ok((dx, LayerParams::Weighted { weight: dw, bias: db }))
}

fn maxpool_forward(
    layer: &Layer,
    x: &Tensor,
    k: usize,
    stride: usize,
    out_shape: &[usize],
) -> Result<(Tensor, Vec<usize>)> {
    let (c, h, w) = (layer.input.channels, layer.input.height, layer.input.width);
    let (oh, ow) = (layer.output.height, layer.output.width);
    let batch = x.shape()[0];
    let mut out = Tensor::zeros(out_shape);
    let mut argmax = vec![0usize; out.len()];
    let xd = x.data();
    for n in 0..batch {
        for ch in 0..c {
            let plane = (n * c + ch) * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = plane + (oy * stride) * w + ox * stride;
                    for ky in 0..k {
                        for kx in 0..k {
                            let idx = plane + (oy * stride + ky) * w + ox * stride + kx;
                            if xd[idx] > xd[best] {
                                best = idx;
                            }
                        }
                    }
                    let o = ((n * c + ch) * oh + oy) * ow + ox;
                    out.data_mut()[o] = xd[best];
                    argmax[o] = best;
                }
            }
        }
    }
    Ok((out, argmax))
}

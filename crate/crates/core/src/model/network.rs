use crate::error::{Error, Result};
use crate::model::layers::{backward_impl, layer_forward, Cache, Mode};
use crate::model::loss::softmax_xent_per_example;
use crate::model::params::{LayerParams, Params};
use crate::model::spec::{ActivationKind, Layer, LayerSpec, NetworkSpec};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Zero-weight parameter template for one layer, with PReLU slopes at their
/// configured initial value.
pub fn layer_param_template(layer: &Layer) -> LayerParams {
    match layer.spec {
        LayerSpec::Conv { kernel, filters, .. } => LayerParams::Weighted {
            weight: Tensor::zeros(&[filters, layer.input.channels, kernel, kernel]),
            bias: Tensor::zeros(&[filters]),
        },
        LayerSpec::Fc { units, .. } => LayerParams::Weighted {
            weight: Tensor::zeros(&[units, layer.input.size()]),
            bias: Tensor::zeros(&[units]),
        },
        LayerSpec::Activation(ActivationKind::PreluChannelWise(a)) => {
            LayerParams::Slopes(Tensor::filled(&[layer.input.channels], a))
        }
        LayerSpec::Activation(ActivationKind::PreluShared(a)) => LayerParams::Slopes(Tensor::filled(&[1], a)),
        _ => LayerParams::None,
    }
}

pub fn param_template(spec: &NetworkSpec) -> Params {
    Params {
        layers: spec.layers().iter().map(layer_param_template).collect(),
    }
}

/// Per-layer record of one forward pass up to (not including) the loss.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// `outputs[i]` is the output of layer `i`; the last entry is the logits.
    pub outputs: Vec<Tensor>,
    caches: Vec<Cache>,
}

impl ForwardTrace {
    pub fn logits(&self) -> &Tensor {
        self.outputs.last().expect("trace has at least the input layer")
    }
}

pub struct BackwardResult {
    /// `input_grads[i]` is the gradient with respect to the input of layer `i`.
    pub input_grads: Vec<Tensor>,
    pub param_grads: Params,
}

fn check_params(spec: &NetworkSpec, params: &Params) -> Result<()> {
    if params.layers.len() != spec.layers().len() {
        return Err(Error::invalid(format!(
            "params cover {} layers, spec has {}",
            params.layers.len(),
            spec.layers().len()
        )));
    }
    Ok(())
}

/// Runs every layer except the final softmax.
pub fn forward(
    spec: &NetworkSpec,
    params: &Params,
    input: &Tensor,
    mode: Mode,
    mut rng: Option<&mut RngStream>,
) -> Result<ForwardTrace> {
    check_params(spec, params)?;
    let body = &spec.layers()[..spec.layers().len() - 1];
    let mut outputs = Vec::with_capacity(body.len());
    let mut caches = Vec::with_capacity(body.len());
    let mut current = input.clone();
    for (layer, p) in body.iter().zip(&params.layers) {
        let (out, cache) = layer_forward(layer, p, &current, mode, rng.as_deref_mut())?;
        outputs.push(out.clone());
        caches.push(cache);
        current = out;
    }
    Ok(ForwardTrace { outputs, caches })
}

/// Backpropagates `grad_output` (gradient at the logits) through the trace.
/// Without `want_param_grads` the returned parameter gradients are empty.
pub fn backward(
    spec: &NetworkSpec,
    params: &Params,
    trace: &ForwardTrace,
    grad_output: &Tensor,
    want_param_grads: bool,
) -> Result<BackwardResult> {
    check_params(spec, params)?;
    let body = &spec.layers()[..spec.layers().len() - 1];
    let mut input_grads = vec![Tensor::zeros(&[0]); body.len()];
    let mut grads: Vec<LayerParams> = params.layers.iter().map(|_| LayerParams::None).collect();
    let mut upstream = grad_output.clone();
    for i in (0..body.len()).rev() {
        let (g_in, g_p) = backward_impl(&body[i], &params.layers[i], &trace.caches[i], &upstream, want_param_grads)?;
        grads[i] = g_p;
        input_grads[i] = g_in.clone();
        upstream = g_in;
    }
    Ok(BackwardResult {
        input_grads,
        param_grads: Params { layers: grads },
    })
}

/// Output of a loss evaluation with gradients.
pub struct LossEval {
    pub losses: Vec<f64>,
    pub logits: Tensor,
    pub grads: Params,
}

impl LossEval {
    pub fn mean_loss(&self) -> f64 {
        self.losses.iter().sum::<f64>() / self.losses.len() as f64
    }
}

/// Forward, softmax cross-entropy and full backward pass.
pub fn loss_and_grads(
    spec: &NetworkSpec,
    params: &Params,
    input: &Tensor,
    labels: &[usize],
    mode: Mode,
    rng: Option<&mut RngStream>,
) -> Result<LossEval> {
    let trace = forward(spec, params, input, mode, rng)?;
    let (losses, grad) = softmax_xent_per_example(trace.logits(), labels)?;
    let back = backward(spec, params, &trace, &grad, true)?;
    Ok(LossEval {
        losses,
        logits: trace.logits().clone(),
        grads: back.param_grads,
    })
}

/// Mean loss only (no backward pass).
pub fn loss_only(
    spec: &NetworkSpec,
    params: &Params,
    input: &Tensor,
    labels: &[usize],
    mode: Mode,
    rng: Option<&mut RngStream>,
) -> Result<f64> {
    let trace = forward(spec, params, input, mode, rng)?;
    let (losses, _) = softmax_xent_per_example(trace.logits(), labels)?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SlopeMode {
    Shared,
    ChannelWise,
}

/// Extra parameters PReLU adds over ReLU for every PReLU layer in the
/// spec, counted as if each were of the given mode.
pub fn count_extra_slope_params(spec: &NetworkSpec, mode: SlopeMode) -> usize {
    spec.layers()
        .iter()
        .filter(|l| matches!(l.spec, LayerSpec::Activation(k) if k.is_parametric()))
        .map(|l| match mode {
            SlopeMode::Shared => 1,
            SlopeMode::ChannelWise => l.input.channels,
        })
        .sum()
}

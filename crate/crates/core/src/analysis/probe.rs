//! Monte-Carlo measurement of per-layer variance gains at initialization.

use crate::analysis::{predict_gains, EmpiricalGain, VarianceReport};
use crate::error::{Error, Result};
use crate::init::{initialize_network, InitScheme};
use crate::model::layers::Mode;
use crate::model::network::{backward, forward};
use crate::model::spec::{LayerSpec, NetworkSpec};
use crate::par;
use crate::rng::{sample_gaussian, RngStream};
use crate::tensor::moments;

/// Slope used for the analytic columns: the common initial slope of the
/// spec's activations, or the first one's when they differ.
fn analytic_slope(spec: &NetworkSpec) -> f64 {
    spec.uniform_activation_slope().unwrap_or_else(|| {
        spec.layers()
            .iter()
            .find_map(|l| match l.spec {
                LayerSpec::Activation(k) => Some(k.initial_slope()),
                _ => None,
            })
            .unwrap_or(1.0)
    })
}

/// Per-trial forward and backward variance ratios, one pair per weighted layer.
fn run_trial(spec: &NetworkSpec, scheme: &InitScheme, batch: usize, seed: u64) -> Result<Vec<(f64, f64)>> {
    let params = initialize_network(spec, scheme, seed)?;
    let input_shape = spec.input_shape().batched(batch);
    let input = sample_gaussian(&input_shape, 0.0, 1.0, &mut RngStream::derived(seed, 1))?;
    let trace = forward(spec, &params, &input, Mode::Eval, None)?;
    let upstream = sample_gaussian(trace.logits().shape(), 0.0, 1.0, &mut RngStream::derived(seed, 2))?;
    let back = backward(spec, &params, &trace, &upstream, false)?;

    let positions = spec.weighted_positions();
    let mut fwd = Vec::with_capacity(positions.len());
    let mut prev = moments(&input)?.1;
    for &p in &positions {
        let v = moments(&trace.outputs[p])?.1;
        fwd.push(v / prev);
        prev = v;
    }
    let mut bwd = vec![0.0; positions.len()];
    let mut prev = moments(&upstream)?.1;
    for (i, &p) in positions.iter().enumerate().rev() {
        let v = moments(&back.input_grads[p])?.1;
        bwd[i] = v / prev;
        prev = v;
    }
    Ok(fwd.into_iter().zip(bwd).collect())
}

/// Initializes `spec` afresh for each trial (seed `seed + trial`), feeds a
/// unit-Gaussian batch forward, injects a unit-Gaussian gradient at the
/// logits and records per-layer variance ratios. Trials run in parallel and
/// are averaged in trial order.
///
/// The first layer's forward ratio sees the raw input rather than a
/// rectified signal, so it sits a factor `2/(1+a²)` above the analytic
/// gain. The same holds for the last layer's backward ratio when that
/// layer feeds the loss without an activation in between.
pub fn monte_carlo_probe(
    spec: &NetworkSpec,
    scheme: &InitScheme,
    trials: usize,
    batch: usize,
    seed: u64,
) -> Result<VarianceReport> {
    if trials == 0 || batch == 0 {
        return Err(Error::invalid("trials and batch must be >= 1"));
    }
    let mut report = predict_gains(spec, scheme, analytic_slope(spec))?;
    let per_trial = par::map_indexed(trials, |t| run_trial(spec, scheme, batch, seed.wrapping_add(t as u64)));
    let mut sums = vec![(0.0, 0.0); report.layers.len()];
    for trial in per_trial {
        for (acc, (f, b)) in sums.iter_mut().zip(trial?) {
            acc.0 += f;
            acc.1 += b;
        }
    }
    for (layer, (f, b)) in report.layers.iter_mut().zip(sums) {
        layer.empirical = Some(EmpiricalGain {
            fwd: f / trials as f64,
            bwd: b / trials as f64,
            trials,
        });
    }
    Ok(report)
}

//! Variance propagation at initialization.
//!
//! For weighted layer `l` with weight variance `Var[w_l]` and rectifier
//! slope `a`, the analytic gains are
//!
//! ```text
//! forward   β_l = ½(1+a²) · n_l · Var[w_l]
//! backward  β̂_l = ½(1+a²) · n̂_l · Var[w_l]
//! ```
//!
//! and the signal variance after the stack scales by `∏_{l=2..L} β_l`
//! (resp. `β̂_l`). Layer 1 is left out of both products: its input is not
//! rectified (forward), and no gradient is needed past it (backward).
//! Pooling and dropout layers are given gain 1 here; [`probe`] measures
//! their real effect.

pub mod probe;
pub mod stall;

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::init::{fan_in, fan_out, init_std, layer_std, layer_variance, InitScheme};
use crate::model::spec::NetworkSpec;

pub use probe::monte_carlo_probe;
pub use stall::{stall_diagnostic, LayerGradSample, StallConfig, StallVerdict, StepGradients};

/// Analytic (and optionally measured) gains for one weighted layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGain {
    /// 1-based index among weighted layers.
    pub index: usize,
    pub kind: &'static str,
    pub fan_in: usize,
    pub fan_out: usize,
    pub std: f64,
    pub gain_fwd: f64,
    pub gain_bwd: f64,
    /// `∏_{j=2..index} gain_fwd[j]` (1 for the first layer).
    pub cum_fwd: f64,
    /// `∏_{j=max(index,2)..L} gain_bwd[j]`: the gradient variance factor
    /// from the top of the stack down to this layer's input.
    pub cum_bwd: f64,
    pub empirical: Option<EmpiricalGain>,
}

/// Mean measured variance ratios over Monte-Carlo trials.
#[derive(Clone, Debug, PartialEq)]
pub struct EmpiricalGain {
    /// `Var[y_l] / Var[y_{l-1}]`, with `y_0` the network input.
    pub fwd: f64,
    /// `Var[Δx_l] / Var[Δx_{l+1}]`, with `Δx_{L+1}` the injected gradient.
    pub bwd: f64,
    pub trials: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VarianceReport {
    pub scheme: InitScheme,
    pub activation_slope: f64,
    pub layers: Vec<LayerGain>,
    /// `∏_{l=2..L} gain_fwd`.
    pub forward_product: f64,
    /// `∏_{l=2..L} gain_bwd`.
    pub backward_product: f64,
}

impl VarianceReport {
    pub fn csv_header(&self) -> &'static str {
        if self.layers.iter().any(|l| l.empirical.is_some()) {
            "layer_index,layer_kind,fan_in,fan_out,std,gain_fwd,gain_bwd,cum_fwd,cum_bwd,emp_fwd,emp_bwd,trials"
        } else {
            "layer_index,layer_kind,fan_in,fan_out,std,gain_fwd,gain_bwd,cum_fwd,cum_bwd"
        }
    }

    /// Column header plus one row per weighted layer.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{}", self.csv_header());
        for l in &self.layers {
            let _ = write!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                l.index, l.kind, l.fan_in, l.fan_out, l.std, l.gain_fwd, l.gain_bwd, l.cum_fwd, l.cum_bwd
            );
            if let Some(e) = &l.empirical {
                let _ = write!(out, ",{},{},{}", e.fwd, e.bwd, e.trials);
            }
            out.push('\n');
        }
        out
    }
}

/// Analytic per-layer gains of `spec` initialized with `scheme`, assuming
/// every rectifier has negative slope `activation_slope`.
pub fn predict_gains(spec: &NetworkSpec, scheme: &InitScheme, activation_slope: f64) -> Result<VarianceReport> {
    scheme.validate()?;
    if !activation_slope.is_finite() {
        return Err(Error::invalid("activation slope must be finite"));
    }
    let rect = 0.5 * (1.0 + activation_slope * activation_slope);
    let mut layers = Vec::with_capacity(spec.depth());
    for (i, layer) in spec.weighted_layers().enumerate() {
        let n = fan_in(layer)?;
        let n_hat = fan_out(layer)?;
        let var = layer_variance(scheme, layer)?;
        layers.push(LayerGain {
            index: i + 1,
            kind: layer.spec.kind_name(),
            fan_in: n,
            fan_out: n_hat,
            std: layer_std(scheme, layer)?,
            gain_fwd: rect * n as f64 * var,
            gain_bwd: rect * n_hat as f64 * var,
            cum_fwd: 1.0,
            cum_bwd: 1.0,
            empirical: None,
        });
    }
    let mut acc = 1.0;
    for l in layers.iter_mut().skip(1) {
        acc *= l.gain_fwd;
        l.cum_fwd = acc;
    }
    let forward_product = acc;
    let mut acc = 1.0;
    for l in layers.iter_mut().skip(1).rev() {
        acc *= l.gain_bwd;
        l.cum_bwd = acc;
    }
    let backward_product = acc;
    if let Some(first) = layers.first_mut() {
        first.cum_bwd = backward_product;
    }
    Ok(VarianceReport {
        scheme: *scheme,
        activation_slope,
        layers,
        forward_product,
        backward_product,
    })
}

/// Cumulative std ratio of the propagated signal under a constant
/// `fixed_std` relative to He initialization in `direction`:
/// `∏_{l=2..L} fixed_std / he_std(l)`. Layer 1 is excluded, as it receives
/// the gradient but does not pass it on.
pub fn attenuation_vs_he(spec: &NetworkSpec, fixed_std: f64, direction: crate::init::Direction) -> Result<f64> {
    if !(fixed_std > 0.0 && fixed_std.is_finite()) {
        return Err(Error::invalid(format!("fixed std must be > 0, got {fixed_std}")));
    }
    let he = match direction {
        crate::init::Direction::Forward => InitScheme::HeForward,
        crate::init::Direction::Backward => InitScheme::HeBackward,
    };
    let mut ratio = 1.0;
    for layer in spec.weighted_layers().skip(1) {
        ratio *= fixed_std / init_std(&he, layer)?;
    }
    Ok(ratio)
}

/// Per-layer std the scheme assigns, for display.
pub fn scheme_stds(spec: &NetworkSpec, scheme: &InitScheme) -> Result<Vec<f64>> {
    spec.weighted_layers().map(|l| layer_std(scheme, l)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::Direction;
    use crate::model::spec::parse_spec;

    fn relu_fc(widths: &[usize]) -> NetworkSpec {
        let mut text = format!("input {}x1x1\n", widths[0]);
        for (i, w) in widths[1..].iter().enumerate() {
            text += &format!("fc {w}\n");
            if i + 2 < widths.len() {
                text += "act relu\n";
            }
        }
        text += &format!("softmax {}\n", widths.last().unwrap());
        parse_spec(&text).unwrap()
    }

    #[test]
    fn he_forward_gains_are_one() {
        let spec = relu_fc(&[32, 64, 16, 128, 10]);
        let r = predict_gains(&spec, &InitScheme::HeForward, 0.0).unwrap();
        for l in &r.layers {
            assert!((l.gain_fwd - 1.0).abs() < 1e-12);
        }
        assert!((r.forward_product - 1.0).abs() < 1e-12);
    }

    #[test]
    fn he_backward_forward_product_is_c2_over_dl() {
        let spec = relu_fc(&[32, 64, 16, 128, 10]);
        let r = predict_gains(&spec, &InitScheme::HeBackward, 0.0).unwrap();
        assert!((r.backward_product - 1.0).abs() < 1e-12);
        // c_2 = d_1 = 64, d_L = 10
        assert!((r.forward_product - 6.4).abs() < 1e-12);
    }

    #[test]
    fn xavier_halves_per_layer() {
        let spec = relu_fc(&[16, 16, 16, 16, 16]);
        let r = predict_gains(&spec, &InitScheme::Xavier, 0.0).unwrap();
        for l in &r.layers {
            assert!((l.gain_fwd - 0.5).abs() < 1e-15);
            assert!((l.cum_fwd - 0.5f64.powi(l.index as i32 - 1)).abs() < 1e-15);
        }
        let lin = predict_gains(&spec, &InitScheme::Xavier, 1.0).unwrap();
        assert!(lin.layers.iter().all(|l| (l.gain_fwd - 1.0).abs() < 1e-15));
    }

    #[test]
    fn attenuation_trivial_cases() {
        let spec = relu_fc(&[16, 16, 16, 16]);
        let he = init_std(&InitScheme::HeBackward, spec.weighted_layers().nth(1).unwrap()).unwrap();
        let r = attenuation_vs_he(&spec, he, Direction::Backward).unwrap();
        assert!((r - 1.0).abs() < 1e-12);
        let single = relu_fc(&[16, 4]);
        assert_eq!(attenuation_vs_he(&single, 0.01, Direction::Backward).unwrap(), 1.0);
        assert!(attenuation_vs_he(&single, 0.0, Direction::Backward).is_err());
    }

    #[test]
    fn csv_has_one_row_per_weighted_layer() {
        let spec = relu_fc(&[8, 8, 4]);
        let csv = predict_gains(&spec, &InitScheme::HeForward, 0.0).unwrap().to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("1,fc,8,8,0.5,"));
    }
}

//! Diminishing-gradient detection.
//!
//! With weight decay `λ`, the total weight gradient is `g = g_loss + λw`.
//! When the loss stops contributing, `g` is just the decay term, so the
//! run is flagged once `‖g − λw‖ / (λ‖w‖)` stays below a threshold over a
//! window of consecutive steps. Norms are taken over the weights of all
//! layers together; per-layer norms are kept for reporting.
//!
//! With `λ = 0` there is no decay term to compare against; the test then
//! falls back to the absolute loss-gradient norm, flagging when it stays
//! below `zero_decay_floor` over the window.

use crate::error::{Error, Result};
use crate::model::params::{LayerParams, Params};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StallVerdict {
    Healthy,
    Diminishing,
}

impl StallVerdict {
    pub fn as_str(&self) -> &'static str {
        match self {
            StallVerdict::Healthy => "healthy",
            StallVerdict::Diminishing => "diminishing",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StallConfig {
    pub threshold: f64,
    pub window: usize,
    pub zero_decay_floor: f64,
}

impl Default for StallConfig {
    fn default() -> Self {
        StallConfig {
            threshold: 0.05,
            window: 50,
            zero_decay_floor: 1e-8,
        }
    }
}

/// Norms for one weighted layer at one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerGradSample {
    /// `‖g − λw‖`, the loss-contributed part of the weight gradient.
    pub loss_grad_norm: f64,
    pub weight_norm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepGradients {
    pub layers: Vec<LayerGradSample>,
}

impl StepGradients {
    /// Builds a sample from total weight gradients (decay included).
    pub fn from_total(grads: &Params, params: &Params, weight_decay: f64) -> Result<Self> {
        params.ensure_aligned(grads)?;
        let mut layers = Vec::new();
        for (g, p) in grads.layers.iter().zip(&params.layers) {
            if let (LayerParams::Weighted { weight: gw, .. }, LayerParams::Weighted { weight: w, .. }) = (g, p) {
                let loss_grad_norm = gw
                    .data()
                    .iter()
                    .zip(w.data())
                    .map(|(g, w)| {
                        let d = g - weight_decay * w;
                        d * d
                    })
                    .sum::<f64>()
                    .sqrt();
                layers.push(LayerGradSample {
                    loss_grad_norm,
                    weight_norm: w.norm(),
                });
            }
        }
        Ok(StepGradients { layers })
    }

    /// Builds a sample from loss-only weight gradients.
    pub fn from_loss_grads(loss_grads: &Params, params: &Params) -> Self {
        let layers = loss_grads
            .layers
            .iter()
            .zip(&params.layers)
            .filter_map(|(g, p)| match (g, p) {
                (LayerParams::Weighted { weight: gw, .. }, LayerParams::Weighted { weight: w, .. }) => {
                    Some(LayerGradSample {
                        loss_grad_norm: gw.norm(),
                        weight_norm: w.norm(),
                    })
                }
                _ => None,
            })
            .collect();
        StepGradients { layers }
    }

    /// `‖g − λw‖` over all weighted layers.
    pub fn loss_grad_norm(&self) -> f64 {
        self.layers.iter().map(|l| l.loss_grad_norm * l.loss_grad_norm).sum::<f64>().sqrt()
    }

    pub fn weight_norm(&self) -> f64 {
        self.layers.iter().map(|l| l.weight_norm * l.weight_norm).sum::<f64>().sqrt()
    }

    fn diminishing(&self, weight_decay: f64, cfg: &StallConfig) -> bool {
        if self.layers.is_empty() {
            return false;
        }
        let g = self.loss_grad_norm();
        if weight_decay > 0.0 {
            let w = self.weight_norm();
            w > 0.0 && g / (weight_decay * w) < cfg.threshold
        } else {
            g < cfg.zero_decay_floor
        }
    }
}

/// Verdict over the most recent `cfg.window` steps (all of them when the
/// history is shorter).
pub fn stall_diagnostic_with(history: &[StepGradients], weight_decay: f64, cfg: &StallConfig) -> Result<StallVerdict> {
    if history.len() < 2 {
        return Err(Error::invalid("stall diagnostic needs at least 2 recorded steps"));
    }
    if weight_decay.is_nan() || weight_decay < 0.0 {
        return Err(Error::invalid("weight decay must be >= 0"));
    }
    let start = history.len().saturating_sub(cfg.window.max(1));
    let stalled = history[start..].iter().all(|s| s.diminishing(weight_decay, cfg));
    Ok(if stalled {
        StallVerdict::Diminishing
    } else {
        StallVerdict::Healthy
    })
}

pub fn stall_diagnostic(history: &[StepGradients], weight_decay: f64) -> Result<StallVerdict> {
    stall_diagnostic_with(history, weight_decay, &StallConfig::default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn params(w: &[f64]) -> Params {
        Params {
            layers: vec![
                LayerParams::None,
                LayerParams::Weighted {
                    weight: Tensor::from_vec(&[w.len()], w.to_vec()).unwrap(),
                    bias: Tensor::zeros(&[1]),
                },
            ],
        }
    }

    fn history(scale: f64, lambda: f64, steps: usize) -> Vec<StepGradients> {
        let p = params(&[0.5, -1.0, 2.0]);
        let g = params(&[scale * lambda * 0.5, -(scale * lambda), scale * lambda * 2.0]);
        (0..steps).map(|_| StepGradients::from_total(&g, &p, lambda).unwrap()).collect()
    }

    #[test]
    fn pure_decay_is_diminishing() {
        let h = history(1.0, 0.0005, 60);
        assert_eq!(stall_diagnostic(&h, 0.0005).unwrap(), StallVerdict::Diminishing);
    }

    #[test]
    fn loss_dominated_is_healthy() {
        let h = history(10.0, 0.0005, 60);
        assert_eq!(stall_diagnostic(&h, 0.0005).unwrap(), StallVerdict::Healthy);
    }

    #[test]
    fn one_live_step_in_window_is_healthy() {
        let mut h = history(1.0, 0.0005, 60);
        h[30] = history(10.0, 0.0005, 1).remove(0);
        assert_eq!(stall_diagnostic(&h, 0.0005).unwrap(), StallVerdict::Healthy);
        // the live step falls outside a 20-step window
        let cfg = StallConfig { window: 20, ..Default::default() };
        assert_eq!(stall_diagnostic_with(&h, 0.0005, &cfg).unwrap(), StallVerdict::Diminishing);
    }

    #[test]
    fn zero_decay_falls_back_to_absolute_norm() {
        let p = params(&[1.0, 1.0]);
        let tiny = params(&[1e-12, 0.0]);
        let big = params(&[1e-3, 0.0]);
        let h: Vec<_> = (0..5).map(|_| StepGradients::from_total(&tiny, &p, 0.0).unwrap()).collect();
        assert_eq!(stall_diagnostic(&h, 0.0).unwrap(), StallVerdict::Diminishing);
        let h: Vec<_> = (0..5).map(|_| StepGradients::from_total(&big, &p, 0.0).unwrap()).collect();
        assert_eq!(stall_diagnostic(&h, 0.0).unwrap(), StallVerdict::Healthy);
    }

    #[test]
    fn needs_two_steps() {
        assert!(stall_diagnostic(&history(1.0, 0.0005, 1), 0.0005).is_err());
    }
}

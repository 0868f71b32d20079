//! SGD with momentum.
//!
//! Weights and biases: `v := μv + ε(g + λw)`, `w := w − v`.
//! PReLU slopes: `v := μv + εg`, `a := a − v`. Slopes never see weight
//! decay and are never clipped.

use crate::error::{Error, Result};
use crate::model::params::{LayerParams, Params};

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// `(epoch, lr)` switch points: from `epoch` (1-based) onwards the
    /// learning rate is `lr`. Sorted by epoch.
    pub lr_schedule: Vec<(usize, f64)>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 0.0005,
            lr_schedule: Vec::new(),
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        // lr = 0 is accepted so a run can be frozen.
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be >= 0, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::invalid(format!("weight decay must be >= 0, got {}", self.weight_decay)));
        }
        let mut last = 0;
        for &(epoch, lr) in &self.lr_schedule {
            if epoch <= last {
                return Err(Error::invalid("lr_steps epochs must be >= 1 and strictly increasing"));
            }
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::invalid(format!("scheduled lr must be >= 0, got {lr}")));
            }
            last = epoch;
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (1-based).
    pub fn lr_for_epoch(&self, epoch: usize) -> f64 {
        self.lr_schedule
            .iter()
            .take_while(|(e, _)| *e <= epoch)
            .last()
            .map_or(self.learning_rate, |&(_, lr)| lr)
    }

    /// Parses `epoch:lr[,epoch:lr...]`.
    pub fn parse_lr_steps(s: &str) -> Result<Vec<(usize, f64)>> {
        if s.trim().is_empty() {
            return Ok(Vec::new());
        }
        s.split(',')
            .map(|item| {
                let (e, lr) = item
                    .split_once(':')
                    .ok_or_else(|| Error::invalid(format!("lr step '{item}' is not epoch:lr")))?;
                let e = e.trim().parse::<usize>().map_err(|_| Error::invalid(format!("bad epoch in '{item}'")))?;
                let lr = lr.trim().parse::<f64>().map_err(|_| Error::invalid(format!("bad lr in '{item}'")))?;
                Ok((e, lr))
            })
            .collect()
    }
}

/// Velocity per parameter tensor, starting at zero.
#[derive(Clone, Debug, PartialEq)]
pub struct OptState {
    velocity: Params,
}

impl OptState {
    pub fn new(params: &Params) -> Self {
        OptState {
            velocity: params.zeros_like(),
        }
    }

    pub fn velocity(&self) -> &Params {
        &self.velocity
    }
}

/// One momentum step using `config.learning_rate`.
pub fn sgd_step(params: &mut Params, grads: &Params, state: &mut OptState, config: &OptimConfig) -> Result<()> {
    params.ensure_aligned(grads)?;
    params.ensure_aligned(&state.velocity)?;
    let (mu, lr, wd) = (config.momentum, config.learning_rate, config.weight_decay);
    for ((p, g), v) in params
        .layers
        .iter_mut()
        .zip(&grads.layers)
        .zip(state.velocity.layers.iter_mut())
    {
        let decay = match p {
            LayerParams::Weighted { .. } => wd,
            LayerParams::Slopes(_) => 0.0,
            LayerParams::None => continue,
        };
        for ((pt, gt), vt) in p.tensors_mut().into_iter().zip(g.tensors()).zip(v.tensors_mut()) {
            for ((w, &gw), vel) in pt.data_mut().iter_mut().zip(gt.data()).zip(vt.data_mut()) {
                *vel = mu * *vel + lr * (gw + decay * *w);
                *w -= *vel;
            }
        }
    }
    Ok(())
}

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Parameters owned by one layer of a stack.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerParams {
    None,
    /// Conv weights are `[d, c, k, k]`, fc weights `[d, n]`; bias is `[d]`.
    Weighted { weight: Tensor, bias: Tensor },
    /// PReLU slopes: one per channel, or a single shared slope.
    Slopes(Tensor),
}

impl LayerParams {
    pub fn tensors(&self) -> Vec<&Tensor> {
        match self {
            LayerParams::None => vec![],
            LayerParams::Weighted { weight, bias } => vec![weight, bias],
            LayerParams::Slopes(s) => vec![s],
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            LayerParams::None => vec![],
            LayerParams::Weighted { weight, bias } => vec![weight, bias],
            LayerParams::Slopes(s) => vec![s],
        }
    }

    pub fn zeros_like(&self) -> LayerParams {
        match self {
            LayerParams::None => LayerParams::None,
            LayerParams::Weighted { weight, bias } => LayerParams::Weighted {
                weight: Tensor::zeros(weight.shape()),
                bias: Tensor::zeros(bias.shape()),
            },
            LayerParams::Slopes(s) => LayerParams::Slopes(Tensor::zeros(s.shape())),
        }
    }

    pub fn weight(&self) -> Option<&Tensor> {
        match self {
            LayerParams::Weighted { weight, .. } => Some(weight),
            _ => None,
        }
    }

    pub fn slopes(&self) -> Option<&Tensor> {
        match self {
            LayerParams::Slopes(s) => Some(s),
            _ => None,
        }
    }
}

/// Parameters of a whole stack, indexed by layer position.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    pub layers: Vec<LayerParams>,
}

impl Params {
    pub fn zeros_like(&self) -> Params {
        Params {
            layers: self.layers.iter().map(LayerParams::zeros_like).collect(),
        }
    }

    /// Total scalar parameter count.
    pub fn count(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| l.tensors())
            .map(Tensor::len)
            .sum()
    }

    pub fn ensure_aligned(&self, other: &Params) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::invalid(format!(
                "parameter sets have {} and {} layers",
                self.layers.len(),
                other.layers.len()
            )));
        }
        for (a, b) in self.layers.iter().zip(&other.layers) {
            let (ta, tb) = (a.tensors(), b.tensors());
            if ta.len() != tb.len() {
                return Err(Error::invalid("parameter kinds differ"));
            }
            for (x, y) in ta.iter().zip(&tb) {
                x.ensure_shape("params", y.shape())?;
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().flat_map(|l| l.tensors()).all(Tensor::is_finite)
    }
}

//! Weight initialization for rectifier networks.
//!
//! A weighted layer with `k×k` filters, `c` input channels and `d` filters
//! has fan-in `n = k²c` and fan-out `n̂ = k²d` (fc layers: `k = 1`, `c` =
//! flattened input size). Zero-mean Gaussian weights keep the per-layer
//! variance gain at one when
//!
//! * forward: `½(1+a²)·n·Var[w] = 1`
//! * backward: `½(1+a²)·n̂·Var[w] = 1`
//!
//! with `a` the negative slope of the rectifier (`a = 0` for ReLU). Xavier
//! is the linear-activation condition `n·Var[w] = 1`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::network::param_template;
use crate::model::params::{LayerParams, Params};
use crate::model::spec::{Layer, LayerSpec, NetworkSpec};
use crate::rng::{sample_gaussian, RngStream};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InitScheme {
    HeForward,
    HeBackward,
    Xavier,
    FixedStd(f64),
    PReluAware { a: f64, direction: Direction },
}

impl InitScheme {
    pub fn validate(&self) -> Result<()> {
        match *self {
            InitScheme::FixedStd(s) if !(s >= 0.0 && s.is_finite()) => {
                Err(Error::invalid(format!("fixed std must be finite and >= 0, got {s}")))
            }
            InitScheme::PReluAware { a, .. } if !a.is_finite() => {
                Err(Error::invalid(format!("slope must be finite, got {a}")))
            }
            _ => Ok(()),
        }
    }
}

impl FromStr for InitScheme {
    type Err = Error;

    /// Parses `he-fwd`, `he-bwd`, `xavier`, `fixed:<sigma>`,
    /// `prelu:<a>:fwd` or `prelu:<a>:bwd`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("unknown init scheme '{s}'"));
        let scheme = match s {
            "he-fwd" => InitScheme::HeForward,
            "he-bwd" => InitScheme::HeBackward,
            "xavier" => InitScheme::Xavier,
            _ => {
                let parts: Vec<&str> = s.split(':').collect();
                match parts.as_slice() {
                    ["fixed", sigma] => InitScheme::FixedStd(sigma.parse().map_err(|_| bad())?),
                    ["prelu", a, dir] => InitScheme::PReluAware {
                        a: a.parse().map_err(|_| bad())?,
                        direction: match *dir {
                            "fwd" => Direction::Forward,
                            "bwd" => Direction::Backward,
                            _ => return Err(bad()),
                        },
                    },
                    _ => return Err(bad()),
                }
            }
        };
        scheme.validate()?;
        Ok(scheme)
    }
}

impl fmt::Display for InitScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InitScheme::HeForward => write!(f, "he-fwd"),
            InitScheme::HeBackward => write!(f, "he-bwd"),
            InitScheme::Xavier => write!(f, "xavier"),
            InitScheme::FixedStd(s) => write!(f, "fixed:{s}"),
            InitScheme::PReluAware { a, direction } => write!(
                f,
                "prelu:{a}:{}",
                match direction {
                    Direction::Forward => "fwd",
                    Direction::Backward => "bwd",
                }
            ),
        }
    }
}

fn not_weighted(layer: &Layer) -> Error {
    Error::invalid(format!(
        "{} layer (line {}) has no weights",
        layer.spec.kind_name(),
        layer.line
    ))
}

/// `n = k²c`.
pub fn fan_in(layer: &Layer) -> Result<usize> {
    match layer.spec {
        LayerSpec::Conv { kernel, .. } => Ok(kernel * kernel * layer.input.channels),
        LayerSpec::Fc { .. } => Ok(layer.input.size()),
        _ => Err(not_weighted(layer)),
    }
}

/// `n̂ = k²d`.
pub fn fan_out(layer: &Layer) -> Result<usize> {
    match layer.spec {
        LayerSpec::Conv { kernel, filters, .. } => Ok(kernel * kernel * filters),
        LayerSpec::Fc { units, .. } => Ok(units),
        _ => Err(not_weighted(layer)),
    }
}

/// Weight variance prescribed by `scheme` for a weighted layer.
pub fn init_variance(scheme: &InitScheme, layer: &Layer) -> Result<f64> {
    let n = fan_in(layer)? as f64;
    let n_hat = fan_out(layer)? as f64;
    Ok(match *scheme {
        InitScheme::HeForward => 2.0 / n,
        InitScheme::HeBackward => 2.0 / n_hat,
        InitScheme::Xavier => 1.0 / n,
        InitScheme::FixedStd(s) => s * s,
        InitScheme::PReluAware { a, direction } => {
            let fan = match direction {
                Direction::Forward => n,
                Direction::Backward => n_hat,
            };
            2.0 / ((1.0 + a * a) * fan)
        }
    })
}

pub fn init_std(scheme: &InitScheme, layer: &Layer) -> Result<f64> {
    match *scheme {
        InitScheme::FixedStd(s) => {
            fan_in(layer)?;
            Ok(s)
        }
        _ => Ok(init_variance(scheme, layer)?.sqrt()),
    }
}

/// Std actually used for a layer: its `std` override if the spec sets one,
/// otherwise the scheme's.
pub fn layer_std(scheme: &InitScheme, layer: &Layer) -> Result<f64> {
    match layer.spec {
        LayerSpec::Conv { std_override: Some(s), .. } | LayerSpec::Fc { std_override: Some(s), .. } => Ok(s),
        _ => init_std(scheme, layer),
    }
}

/// Variance counterpart of [`layer_std`].
pub fn layer_variance(scheme: &InitScheme, layer: &Layer) -> Result<f64> {
    match layer.spec {
        LayerSpec::Conv { std_override: Some(s), .. } | LayerSpec::Fc { std_override: Some(s), .. } => Ok(s * s),
        _ => init_variance(scheme, layer),
    }
}

/// Draws every weight from `N(0, layer_std²)` in layer order from one
/// stream seeded with `seed`; biases are zero and PReLU slopes start at
/// the spec's initial value.
pub fn initialize_network(spec: &NetworkSpec, scheme: &InitScheme, seed: u64) -> Result<Params> {
    scheme.validate()?;
    let mut rng = RngStream::new(seed);
    let mut params = param_template(spec);
    for (layer, p) in spec.layers().iter().zip(params.layers.iter_mut()) {
        if let LayerParams::Weighted { weight, .. } = p {
            let std = layer_std(scheme, layer)?;
            *weight = sample_gaussian(weight.shape(), 0.0, std, &mut rng)?;
        }
    }
    Ok(params)
}

//! Network description, layer kernels, PReLU and the classification loss.

pub mod activation;
pub mod layers;
pub mod loss;
pub mod network;
pub mod params;
pub mod spec;

pub use activation::{prelu_backward, prelu_forward};
pub use layers::{layer_backward, layer_forward, Cache, Mode};
pub use loss::{softmax_xent, softmax_xent_per_example};
pub use network::{
    backward, count_extra_slope_params, forward, loss_and_grads, loss_only, param_template, ForwardTrace,
    SlopeMode,
};
pub use params::{LayerParams, Params};
pub use spec::{parse_spec, ActivationKind, Layer, LayerSpec, NetworkSpec, Padding, Shape};

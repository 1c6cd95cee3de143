//! Dense tensors, layer primitives with hand-derived backward passes, the
//! seeded RNG and the `EIT1` tensor container.

pub mod eit;
pub mod gradcheck;
pub mod layers;
pub mod network;
pub mod rng;
pub mod tensor;

pub use layers::{
    concat_channels, l2_normalize, l2_normalize_backward, relu, relu_backward, split_channels, Conv2d, Crop, Deconv2d,
    FullyConnected, Layer, LayerKind, Pad, ParamGrads, MIN_NORM,
};
pub use network::{backprop, flatten_param_grads, Sequential};
pub use rng::Rng;
pub use tensor::{Image, Tensor};

/// Xavier-uniform sample: `U(−a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform(dims: &[usize], fan_in: usize, fan_out: usize, rng: &mut Rng) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(dims, |_| rng.uniform_range(-a, a)).expect("valid dims")
}

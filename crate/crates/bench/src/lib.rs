//! Inputs shared by the benchmarks.

use cvturb::architecture::{init_params, Model, ModelConfig};
use cvturb::cvnn::{ComplexKernel, ComplexTensor};
use cvturb::Tensor;

/// Deterministic window in [-1, 1] for `cfg` at `size` x `size`.
pub fn window(cfg: &ModelConfig, size: usize) -> Tensor<f32> {
    Tensor::from_fn(&[cfg.input_channels(), size, size], |i| {
        ((i * 7919) % 255) as f32 / 127.5 - 1.0
    })
}

pub fn model(cfg: &ModelConfig) -> Model<f32> {
    init_params(cfg, 0).expect("valid model configuration")
}

/// A `channels` -> `channels` 3x3 complex layer and a matching input.
pub fn complex_layer(channels: usize, size: usize) -> (ComplexTensor<f32>, ComplexKernel<f32>) {
    let x = ComplexTensor::new(
        Tensor::from_fn(&[channels, size, size], |i| (i % 17) as f32 / 17.0),
        Tensor::from_fn(&[channels, size, size], |i| (i % 13) as f32 / 13.0),
    )
    .expect("matching parts");
    let k = ComplexKernel::without_bias(
        Tensor::from_fn(&[channels, channels, 3, 3], |i| ((i % 7) as f32 - 3.0) * 0.01),
        Tensor::from_fn(&[channels, channels, 3, 3], |i| ((i % 5) as f32 - 2.0) * 0.01),
        1,
        1,
    )
    .expect("matching kernels");
    (x, k)
}

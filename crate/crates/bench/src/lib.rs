//! Inputs shared by the benchmarks.

use cdnet_core::Tensor;

/// Deterministic, non-constant tensor of the given shape.
pub fn wave(shape: &[usize], phase: f32) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|i| ((i as f32) * 0.37 + phase).sin() * 0.5).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

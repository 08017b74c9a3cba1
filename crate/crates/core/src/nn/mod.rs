//! Minimal CPU neural-network kernel: the layer kinds needed by the two
//! auto-encoders, an Adam optimizer and a finite-difference gradient checker.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod layer;
pub mod sequential;
pub mod tensor;

pub use adam::{adam_step, AdamState};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use layer::{
    BatchNorm2d, Cache, Conv2d, ConvTranspose2d, Init, Layer, LayerKind, LayerSpec, Mode, Padding,
};
pub use sequential::{accumulate, Grads, Sequential};
pub use tensor::Tensor;

use crate::scalar::Scalar;

/// Anything that owns an ordered list of trainable tensors.
pub trait Network<T: Scalar> {
    fn params(&self) -> Vec<&Tensor<T>>;
    fn params_mut(&mut self) -> Vec<&mut Tensor<T>>;
    fn param_names(&self) -> Vec<String>;
}

/// `prefix.{layer index}.{weight|bias|gamma|beta}` for every parameter of `seq`.
pub fn param_names<T: Scalar>(prefix: &str, seq: &Sequential<T>) -> Vec<String> {
    let mut names = Vec::new();
    for (i, layer) in seq.layers.iter().enumerate() {
        let labels: &[&str] = match layer {
            Layer::Conv(_) | Layer::ConvTransposed(_) if layer.spec().bias => &["weight", "bias"],
            Layer::Conv(_) | Layer::ConvTransposed(_) => &["weight"],
            Layer::BatchNorm(_) => &["gamma", "beta"],
            _ => &[],
        };
        names.extend(labels.iter().map(|l| format!("{prefix}.{i}.{l}")));
    }
    names
}

pub mod autograd;
pub mod boxes;
pub mod checkpoint;
pub mod dataset;
pub mod denoiser;
pub mod detector;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod metrics;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod phantom;
pub mod rawio;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use autograd::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Training runs in single precision; gradient checks use `f64`.
pub type Real = f32;
pub type DenoiserF32 = denoiser::Denoiser<f32>;
pub type DetectorF32 = detector::Detector<f32>;
pub type DiscriminatorF32 = denoiser::Discriminator<f32>;
pub type TrainStateF32 = trainer::TrainState<f32>;
pub type DenoiserF64 = denoiser::Denoiser<f64>;
pub type DetectorF64 = detector::Detector<f64>;

//! Tensor storage, seeded randomness, the 2-D DFT and the elementwise,
//! reduction and convolution primitives the models are built from.

pub mod fourier;
pub mod ops;
pub mod rng;
pub mod tensor;

pub use fourier::{dft2, idft2, mean_power, Spectrum};
pub use ops::{argmax_channels, conv2d, one_hot, softmax};
pub use rng::{gaussian, Rng, RNG_ALGORITHM};
pub use tensor::{Scalar, Tensor};

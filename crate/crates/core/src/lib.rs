//! Exemplar-based texture synthesis.
//!
//! A white-noise image is optimized with L-BFGS so that its CNN feature
//! correlations (Gram matrices) and its Fourier modulus both match those of an
//! exemplar texture. The CNN term reproduces local structure; the spectrum
//! term restores large-scale, quasi-periodic regularity.
//!
//! Module map:
//!
//! * [`tensor`]: dense `[C, H, W]` arrays and the differentiable primitives
//!   (3×3 convolution, ReLU, 2×2 average pooling).
//! * [`network`]: the truncated VGG-19 chain, forward capture and
//!   back-propagation to the image.
//! * [`gram`]: Gram matrices, per-layer losses and their gradients.
//! * [`spectrum`]: 2D DFT, projection onto the equal-modulus set and the
//!   spectrum loss.
//! * [`lbfgs`]: the quasi-Newton minimizer.
//! * [`pipeline`]: preprocessing, targets, noise and the synthesis loop.
//! * [`weights`]: the `VGGW` weight container.
//! * [`manifest`]: the exporter's key=value manifest.

pub mod error;
pub mod gram;
pub mod lbfgs;
pub mod manifest;
pub mod network;
pub mod pipeline;
pub mod real;
pub mod spectrum;
pub mod tensor;
pub mod weights;

pub use error::{Error, Result};
pub use real::Real;
pub use tensor::{ConvWeights, Tensor};

//! Brightness-robust illuminant estimation.
//!
//! The crate bundles everything needed to study how colour-constancy
//! estimators react to brightness changes that leave the illuminant
//! chromaticity untouched:
//!
//! * [`color`] and [`pfm`]: linear RGB images, illuminants, angular error.
//! * [`tone_curve`]: a differentiable piecewise-linear brightness curve.
//! * [`classic`]: gray-world / white-patch / shades-of-gray / gray-edge.
//! * [`autodiff`]: a small reverse-mode gradient engine.
//! * [`model`]: a toy convolutional illuminant estimator with a projection head.
//! * [`augment`]: adversarial brightness augmentation with an adaptive step.
//! * [`contrastive`]: the InfoNCE loss over clean/augmented embeddings.
//! * [`trainer`]: joint adversarial + contrastive training and the plain baseline.
//! * [`synth`]: a procedural renderer for brightness-only dataset variation.
//! * [`eval`]: error statistics, smoothing and robustness reports.
//! * [`cli`]: the `lumacurve` command line.

pub mod augment;
pub mod autodiff;
pub mod classic;
pub mod cli;
pub mod color;
pub mod contrastive;
pub mod error;
pub mod eval;
pub mod model;
pub mod pfm;
pub mod synth;
pub mod tone_curve;
pub mod trainer;

pub use color::{angular_error, normalize_illuminant, BrightnessMap, Illuminant, LinearImage};
pub use error::{Error, Result};
pub use tone_curve::CurveParams;

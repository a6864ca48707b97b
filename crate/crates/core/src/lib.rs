//! Hierarchical-consistency domain generalization at desk scale.
//!
//! The crate trains a small shared-encoder segmentation network on a
//! multi-domain synthetic benchmark and evaluates how well it transfers to a
//! held-out domain. Three ingredients interact:
//!
//! * [`fourier`] — amplitude Gaussian-mixing augmentation: images are split
//!   into amplitude/phase spectra, amplitudes are blended between domains
//!   under a Gaussian significance mask, and the result is reconstructed with
//!   the original phase so structure is preserved while appearance shifts.
//! * [`nn`] / [`losses`] — a student network with an EMA teacher enforcing
//!   dual-view consistency between weakly and strongly augmented replicas,
//!   plus classmate decoders regressing signed-distance boundaries whose
//!   transformed predictions are kept consistent with the segmentation.
//! * [`trainer`] — the training procedure with per-loss gradient routing,
//!   worst-case augmentation selection, leave-one-domain-out evaluation and
//!   the ablation grid.
//!
//! All numeric modules are generic over the [`scalar::Scalar`] float type;
//! concrete `f32`/`f64` aliases for the main types live at the crate root.

pub mod checkpoint;
pub mod error;
pub mod fourier;
pub mod losses;
pub mod nn;
pub mod optim;
pub mod raster;
pub mod rng;
pub mod scalar;
pub mod sdf;
pub mod synthdata;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// `f64` aliases: the precision used by the augmentation CLI path and all
/// numeric property suites.
pub type Image64 = raster::ImageTensor<f64>;
pub type Spectrum64 = fourier::Spectrum<f64>;
pub type SigMask64 = fourier::SigMask<f64>;
pub type Boundary64 = sdf::BoundaryMap<f64>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type SegModel64 = nn::SegModel<f64>;

/// `f32` aliases: the default precision for benchmark training runs.
pub type Image32 = raster::ImageTensor<f32>;
pub type Spectrum32 = fourier::Spectrum<f32>;
pub type SigMask32 = fourier::SigMask<f32>;
pub type Boundary32 = sdf::BoundaryMap<f32>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type SegModel32 = nn::SegModel<f32>;

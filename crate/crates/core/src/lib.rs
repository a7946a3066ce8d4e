//! Color constancy toolkit.
//!
//! Linear-domain von Kries algebra, relighting-based sample synthesis, a
//! compact cascaded illuminant-estimation network built on a small
//! reverse-mode autodiff engine, and the angular-error evaluation suite.
//!
//! ```text
//! I_raw = I_awb ⊙ ℓ        (relight)
//! I_awb = I_raw ⊘ ℓ        (correct)
//! ```
//!
//! Modules:
//! - [`color`]: illuminants, images, relight/correct, gamma and tone curves.
//! - [`augment`]: illuminant samplers, relighting pair generators, geometric augmentation.
//! - [`dataio`]: CCRAW container, manifests, preprocessing, PPM import, synthetic scenes, folds.
//! - [`tensor`]: dense tensors, the autodiff graph and the CCKP1 checkpoint format.
//! - [`network`]: backbone, iteration-specific attention, heads and the cascade.
//! - [`training`]: multi-stage angular loss, Adam and the training regimes.
//! - [`evaluation`]: statistics, classic estimators and reports.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
pub mod color;
pub mod dataio;
pub mod error;
pub mod evaluation;
pub mod network;
pub mod rng;
pub mod tensor;
pub mod training;

pub use color::{angular_error, Domain, Illuminant, LinearImage};
pub use error::{Error, Result};
pub use network::{BackboneScale, CascadeModel, HeadKind, ModelConfig};
pub use tensor::{Graph, NodeId, Tensor};

//! Disparity-consistent stereoscopic style transfer.
//!
//! The crate stylizes a rectified stereo pair by minimizing a joint
//! objective over both views: perceptual content and style terms per view,
//! plus a cross-view consistency term that penalizes differences between
//! one view's result and the opposite view warped along the disparity
//! field, restricted to pixels visible in both views.
//!
//! The pieces are usable on their own:
//!
//! * [`tensor`] — dense grid types and the loss-weight bundle.
//! * [`io`] — PNG images and PFM float maps.
//! * [`warp`] — backward (gather) and forward (splat) warping with exact
//!   adjoints.
//! * [`occlusion`] — forward-backward consistency checks and class-balance
//!   weight maps.
//! * [`features`] — a pluggable convolutional feature extractor with Gram
//!   matrices and vector-Jacobian products.
//! * [`losses`] — the full loss stack with analytic gradients.
//! * [`middle`] — symmetric middle-view feature composition.
//! * [`solver`] — Adam / gradient-descent minimization of the joint
//!   objective.
//! * [`synth_eval`] — synthetic stereo scenes with exact ground truth, and
//!   the evaluation metrics.

pub mod error;
pub mod features;
pub mod io;
pub mod losses;
pub mod middle;
pub mod occlusion;
pub mod rng;
pub mod solver;
pub mod synth_eval;
pub mod tensor;
pub mod warp;

pub use error::{Error, Result};
pub use tensor::{DisparityMap, LossWeights, OcclusionMask, Tensor3};

//! Coarse-to-fine weakly supervised segmentation.
//!
//! The pipeline turns images annotated with a single category label into
//! pixel-wise segmentation masks in three stages: a coarse foreground mask
//! is produced (spectral saliency or files supplied on disk), enhanced by
//! GrabCut energy minimization, and then recursively refined by retraining
//! a pluggable segmenter on its own post-processed predictions.
//!
//! [`imagecore`] holds the image and mask containers plus PNG io,
//! [`maxflow`] the max-flow/min-cut solver, [`gmm`] EM-fitted Gaussian
//! mixtures, and [`grabcut`] the energy minimization built from the two.
//! [`segment`] provides the segmenter backends and the saliency detector,
//! [`refinery`] the round loop with its suppression and coverage rules,
//! [`evalmetrics`] confusion-matrix scoring, and [`synthetic`] the bundled
//! dataset generator the tests exercise the full pipeline on.

pub mod evalmetrics;
pub mod gmm;
pub mod grabcut;
pub mod imagecore;
pub mod maxflow;
pub mod refinery;
pub mod segment;
pub mod synthetic;

mod seed;

pub use seed::derive_seed;

//! Dense semantic flow estimation.
//!
//! The pipeline runs feature maps through a 4-D correlation volume, turns
//! each source location's score map into a matching distribution with the
//! kernel soft argmax, and reads off a sub-cell flow field. Flow fields are
//! trained without point correspondences: foreground masks of an image pair
//! must be reconstructable by warping each other (mask consistency), forward
//! and backward flows must cancel on the foreground (flow consistency), and
//! flows are kept piecewise smooth inside objects.
//!
//! Coordinates are `(x = column, y = row)`, 0-based and cell-centred, and
//! flow vectors are expressed in cells of the grid they live on.
//!
//! Module map:
//! - [`geometry`]: grids, flow fields, affine transforms, bilinear warping.
//! - [`autodiff`]: a small reverse-mode tape over dense `f64` arrays.
//! - [`features`]: feature maps, residual adaptation layers, a toy extractor.
//! - [`matching`]: correlation, matching probabilities, argmax variants.
//! - [`losses`]: mask/flow consistency and smoothness objectives.
//! - [`synth`]: synthetic affine pairs and a procedural image corpus.
//! - [`optim`] and [`train`]: Adam and the adaptation-layer trainer.
//! - [`eval`]: PCK, label transfer, keypoint propagation, co-segmentation.

pub mod autodiff;
pub mod error;
pub mod eval;
pub mod features;
pub mod formats;
pub mod geometry;
pub mod image;
pub mod losses;
pub mod matching;
pub mod optim;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
pub use eval::{EvalConfig, KeypointSet, PckNormalization};
pub use features::{AdaptationLayer, FeatureMap, ToyExtractor};
pub use geometry::{AffineTransform, FlowField, GridPoint, ScalarGrid};
pub use image::{Image, Mask};
pub use losses::{LossReport, LossWeights};
pub use matching::{ArgmaxMode, CorrelationMap, MatchConfig, MatchProbability, Matcher};
pub use synth::{AffineRanges, SynthPair};
pub use train::{Model, TrainerConfig};

//! Semi-supervised teacher-student segmentation framework.
//!
//! A teacher network is trained on labeled slices with a Dice +
//! cross-entropy objective and an uncertainty head distilled from stochastic
//! forward passes. The frozen teacher pseudo-labels the unlabeled pool with
//! per-pixel confidences; a student then trains through a confidence-ranked
//! progressive curriculum with a dual learn/unlearn objective, refining
//! pseudo-label confidence where teacher and student disagree.

pub mod backbone;
pub mod error;
pub mod real;
pub mod rng;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{
    argmax_over_classes, class_name, onehot, softmax_over_classes, LabelMask, LabeledSample,
    LabeledSet, ModelOutput, UnlabeledSample, UnlabeledSet, Volume,
};

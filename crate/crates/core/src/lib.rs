//! Unsupervised open domain recognition at desk scale.
//!
//! A labeled source domain covers a subset of the categories present in an
//! unlabeled, shifted target domain. Classifier weights for the missing
//! categories are propagated over a class taxonomy with a graph convolution,
//! then the whole model is trained jointly with a classification loss, a
//! semantically gated matching discrepancy over Hungarian-matched
//! cross-domain pairs, a limited balance constraint on unknown-class mass and
//! a GCN structure term. All gradients are written by hand and verified by
//! finite differences.

pub mod config;
pub mod error;
pub mod evaluate;
pub mod gcn;
pub mod graph;
pub mod losses;
pub mod matcher;
pub mod model;
pub mod numkit;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
pub use numkit::{Matrix, Rng};

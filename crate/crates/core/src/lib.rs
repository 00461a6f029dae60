//! Person re-identification by learned patch saliency.
//!
//! The crate is organised as a pipeline:
//!
//! - [`imaging`] loads pedestrian images and extracts a dense grid of
//!   colour-histogram + SIFT patch descriptors.
//! - [`correspondence`] builds adjacency-constrained dense correspondence
//!   between two patch grids and provides the saliency-free scorers.
//! - [`saliency`] estimates per-patch saliency without identity labels, by
//!   k-nearest-neighbour distance or by a kernel one-class SVM.
//! - [`salmatch`] turns correspondences and saliency maps into the
//!   saliency-aware similarity measures and the per-patch feature map used
//!   for ranking.
//! - [`ranklearn`] trains the ranking weights with an n-slack structural
//!   RankSVM under the AUC loss.
//! - [`evaluate`] runs the random-split protocol and computes CMC curves.
//! - [`annotation`] holds the human saliency annotation domain (sessions,
//!   trial counting, part scores).
//!
//! [`store`] and [`config`] hold the on-disk formats, [`pipeline`] glues the
//! scorers together for whole datasets and [`synth`] generates synthetic
//! two-view datasets for testing.

// `!(x > 0.0)` is used on purpose: it also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod annotation;
pub mod config;
pub mod correspondence;
pub mod error;
pub mod evaluate;
pub mod imaging;
pub mod pipeline;
pub mod ranklearn;
pub mod saliency;
pub mod salmatch;
pub mod store;
pub mod synth;

pub use error::{Error, Result};

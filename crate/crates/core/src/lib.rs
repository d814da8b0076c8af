//! Reference-driven semantic attribute transfer in the style space of a
//! style-based generator.
//!
//! A learnable attribute/channel affinity matrix is softmax-normalized per
//! channel into control probabilities. Summing the rows of the requested
//! attributes yields a per-channel mask that gates how far a source style
//! code moves toward a reference style code. The matrix is trained against
//! descriptor-group probabilities from an image/text scorer, a background
//! penalty, and a concentration penalty.
//!
//! Module map:
//!
//! - [`stylespace`]: style codes, mask matrix, control probabilities, edit algebra
//! - [`qmm`]: descriptor groups, scorer interface, attribute distances
//! - [`losses`]: transfer, preservation, background, probability and total loss
//! - [`preselect`]: gradient-attribution channel pre-selection and matrix init
//! - [`backends`]: generator/segmenter/scorer interfaces, the toy world, remote adapters
//! - [`trainer`]: objective with analytic gradient, optimizers, checkpoints
//! - [`editor`]: single edits, intensity sweeps, sequential transfer, reports
//! - [`config`], [`pipeline`]: project files and the end-to-end procedures

pub mod backends;
pub mod config;
pub mod editor;
pub mod error;
pub mod image;
pub mod losses;
pub mod pipeline;
pub mod preselect;
pub mod qmm;
pub mod stylespace;
pub mod trainer;

pub use error::{Error, Result};

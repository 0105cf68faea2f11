//! Cross-situational word learning from raw pixel scenes.
//!
//! A matching network embeds each quadrant of a 56x56 scene of MNIST digits
//! and each word of a caption into a shared 64-d space, scores every
//! word/quadrant pair with a scaled sigmoid, and multiplies the per-word
//! maxima into a match probability. Trained only to tell matching from
//! mismatching scene/caption pairs, its attention maps end up localizing the
//! referent of each word.

pub mod error;
pub mod experiment;
pub mod kernel;
pub mod mnist;
pub mod model;
pub mod pgm;
pub mod report;
pub mod scenegen;

pub use error::{Error, Result};

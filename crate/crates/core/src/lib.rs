//! Multi-view dynamic point maps: the representation, a synthetic 4D scene
//! oracle, a time-conditioned transformer, its losses and training loop,
//! evaluation protocols and sliding-window fusion.

pub mod align;
pub mod dpm;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradcheck;
pub mod loss;
pub mod model;
pub mod par;
pub mod ply;
pub mod scenegen;
pub mod train;

mod format;

pub use error::{Error, Result};

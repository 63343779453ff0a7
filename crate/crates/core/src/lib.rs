//! Online action detection forests.
//!
//! Random forests whose split functions test cheap skeleton features only,
//! but whose training is steered by richer per-frame context (a spatial
//! embedding and the frame's relative position inside its action). At test
//! time the forest emits a class distribution and a temporal-location
//! estimate per frame, and a small state machine turns those into causal
//! labels and action segments.

pub mod bench;
pub mod detector;
pub mod features;
pub mod forest;
pub mod metrics;
pub mod pipeline;
pub mod spectral;
pub mod stream;
pub mod synth;

/// Class identifier. Id 0 is reserved for background ("no action").
pub type ClassId = u32;

/// The reserved background class.
pub const BACKGROUND: ClassId = 0;

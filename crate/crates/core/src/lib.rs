//! Self-supervised video representation learning at desk scale.
//!
//! The library builds everything needed to run a video cloze experiment end
//! to end on a laptop-sized budget: a deterministic synthetic video corpus,
//! cloze item assembly (blank a clip, offer operated candidates), a small
//! differentiable 3D CNN with shared-weight clip towers, SGD training loops
//! for pre-training / fine-tuning / frozen-feature probing, and cosine
//! feature retrieval over raw conv features.
//!
//! Every module is deterministic given its seeds: identical inputs produce
//! bitwise identical tensors, files and logs.

pub mod cloze;
pub mod eval;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod video;

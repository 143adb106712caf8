//! specvox: a frequency-domain backbone that maps fMRI voxel vectors into a
//! shared image-embedding space, with contrastive training, candidate-pool
//! retrieval evaluation, and zero-shot classification on top.

pub mod backbone;
pub mod cli;
pub mod data;
mod linalg;
pub mod numerics;
pub mod projector;
pub mod retrieval;
pub mod rng;
pub mod tensor;
pub mod training;

pub use cli::run_cli;

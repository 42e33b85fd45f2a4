//! Dataset bundles, packed formats, checkpoints, caches, and the synthetic
//! data generator.

pub mod bundle;
pub mod cache;
pub mod checkpoint;
pub mod packed;
pub mod synth;

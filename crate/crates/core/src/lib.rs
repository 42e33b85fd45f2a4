//! Two-stage speech-driven 3D facial animation on meshes of arbitrary
//! triangulation.
//!
//! The pipeline splits into an audio-to-sparse stage ([`ats`]) that generates
//! landmark-displacement trajectories from speech and an affect label with a
//! conditional diffusion model, and a sparse-to-mesh stage ([`stm`]) that
//! densifies those trajectories into per-vertex deformation fields using
//! intrinsic surface features and landmark-to-vertex cross-attention.
//!
//! Supporting modules provide mesh geometry and discrete operators ([`mesh`]),
//! audio feature extraction ([`audio`]), the unified motion loss and the
//! evaluation metric suite ([`metrics`]), a small reverse-mode autodiff engine
//! ([`nn`]), dataset/bundle/checkpoint formats and a synthetic data generator
//! ([`data`]), training loops ([`train`]), and end-to-end orchestration
//! ([`pipeline`]).

pub mod ats;
pub mod audio;
pub mod config;
pub mod data;
pub mod error;
pub mod mesh;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod stm;
pub mod train;

pub use error::{CoreError, Result};

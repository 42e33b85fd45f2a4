//! Minimal reverse-mode autodiff and the layers built on it.

pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tape;

pub use params::{ParamId, ParamStore};
pub use tape::{Mat, Tape, Var};

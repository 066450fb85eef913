//! Global weather emulation on lat-lon grids: a ConvNext backbone with
//! squeeze-and-excitation gating and geocyclic boundary padding, trained
//! with a small reverse-mode autodiff engine.

pub mod data;
pub mod engine;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod padding;
pub mod rollout;
pub mod training;
pub mod error;

pub use error::{Error, Result};

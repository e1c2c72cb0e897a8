//! Learned particle dynamics: a differentiable graph network over particle
//! systems, a position-based reference simulator to learn from, and control
//! built on the learned model's gradients.
//!
//! Modules:
//! - [`autodiff`]: tape-based reverse-mode AD, MLPs, optimizers.
//! - [`scene`]: particle states, materials, objects, rollouts.
//! - [`graph`]: neighborhoods, hierarchies, and graph assembly.
//! - [`oracle`]: the position-based reference simulator and dataset
//!   generation.
//! - [`model`]: the dynamics predictor (encoders, message passing stages,
//!   integration).
//! - [`train`]: training and evaluation loops.
//! - [`control`]: trajectory optimization, MPC, online system
//!   identification.
//! - [`io`]: checkpoint and rollout container formats.
//! - [`config`]: experiment configuration files and overrides.

pub mod autodiff;
pub mod graph;
pub mod io;
pub mod model;
pub mod oracle;
pub mod scene;

mod error;
mod rng;

pub use error::{Error, Result};
pub use rng::stream_rng;

//! Multi-step spiking U-Net for depth prediction from event-camera streams.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: f64 tensors, reverse-mode tape, neural ops, Adam.
//! * [`events`]: event/ground-truth parsing and cumulative stacking.
//! * [`neuron`]: multi-step integrate-and-fire dynamics with surrogate gradients.
//! * [`attention`]: temporal, channel and spatial attention gates.
//! * [`model`]: encoder / residual / decoder network and checkpoints.
//! * [`objective`]: scale/shift-invariant loss, gradient regulariser, MDE.
//! * [`synth`]: deterministic synthetic stereo event scenes.
//! * [`config`] and [`harness`]: run configuration and the train/eval loop.

pub mod attention;
pub mod config;
pub mod error;
pub mod events;
pub mod harness;
pub mod model;
pub mod neuron;
pub mod objective;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};

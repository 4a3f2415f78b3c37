//! Event-camera ball detection with spiking neural networks.
//!
//! The crate covers the whole offline pipeline: binary event frames cut
//! from an event stream around a tracked region of interest, three
//! layer-stack profiles executed over discrete time steps, surrogate-gradient
//! and quantization-aware training, population-code decoding, device
//! constraint checks, synthetic data and a latency harness.

pub mod bench;
pub mod decode;
pub mod deploy;
pub mod error;
pub mod event_pipeline;
pub mod kv;
pub mod network;
pub mod neurons;
pub mod synth;
pub mod training;

pub use error::{Error, Result};

/// Side length of the square region of interest fed to the networks.
pub const ROI_SIDE: usize = 64;

/// Number of output neurons: one 64-wide population per image axis.
pub const OUTPUT_WIDTH: usize = 2 * ROI_SIDE;

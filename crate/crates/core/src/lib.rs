//! Lifelong infinite mixture learner.
//!
//! A Dirichlet-process gate decides, per task, whether an existing VAE-style
//! component can absorb the incoming data or whether a fresh component is
//! appended. Alongside the mixture live a single-model generative-replay
//! baseline and a set of instruments that measure empirical risk,
//! discrepancy distance and the accumulated forgetting bounds.
//!
//! Module map:
//!
//! - [`task_streams`]: reproducible synthetic task sequences.
//! - [`nn`], [`vae`], [`cvae`], [`checkpoint`]: dense layers with manual backprop,
//!   the three variational objectives and the binary checkpoint format.
//! - [`gate`]: knowledge affinity and the expansion/assignment probabilities.
//! - [`limix`]: the mixture learner, test-time routing and the student.
//! - [`grm`]: the generative-replay single model.
//! - [`risk`]: risks, discrepancy estimation and bound bookkeeping.
//! - [`pipeline`]: whole-stream runs, risk traces and bound analyses.

pub mod checkpoint;
pub mod cvae;
pub mod error;
pub mod gate;
pub mod grm;
pub mod limix;
pub mod nn;
pub mod pipeline;
pub mod risk;
pub mod seed;
pub mod stats;
pub mod task_streams;
pub mod vae;

pub use error::{Error, Result};
pub use task_streams::{Sample, TaskSpec, TaskStream};

// SPDX-License-Identifier: MIT OR Apache-2.0

//! Inference-time speaker unlearning for flow-matching speech synthesis.
//!
//! An opt-out speaker is suppressed by removing, at a few selected
//! (layer, flow step) cells, the component of each activation that points
//! from a population identity prototype toward that speaker. The model's
//! weights never change.
//!
//! Module map:
//! - [`tensor`], [`grid`]: channel vectors, frame matrices, per-cell grids.
//! - [`tape`]: binary activation tapes exchanged with the model bridge.
//! - [`prototype`]: the retain-pool identity prototype.
//! - [`steering`], [`selection`]: directions, similarity profile, cell mask.
//! - [`registry`]: persistent opt-out records with fingerprint matching.
//! - [`hook`], [`pipeline`]: serving-time intervention.
//! - [`toy`]: a deterministic synthesizer used for evaluation and tests.
//! - [`eval`]: suppression, threshold and pool-size experiments.

pub mod error;
pub mod eval;
pub mod grid;
pub mod hook;
pub mod pipeline;
pub mod prototype;
pub mod registry;
pub mod selection;
pub mod steering;
pub mod tape;
pub mod tensor;
pub mod toy;

pub use error::{Result, TrusError};
pub use grid::{Cell, CellGrid, GridShape};
pub use hook::{ActivationHook, SteeringHook};
pub use prototype::{build_prototype, IdPrototype};
pub use registry::{OptOutRecord, Registration, RegistryStore};
pub use selection::{compute_profile, select_mask, Band, InterventionMask, SimilarityProfile};
pub use steering::{apply_steering, compute_steering_vector, SteeringGrid};
pub use tape::{ActivationTape, TapeHeader};
pub use tensor::{ChannelVector, FrameMatrix};

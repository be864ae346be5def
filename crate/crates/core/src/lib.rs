//! Best-feature-aware multi-view fusion for imitation learning, desk scale.
//!
//! The crate covers the full pipeline: a reverse-mode autodiff substrate
//! ([`tensor`]), a deterministic two-arm simulator with three synthetic
//! views ([`sim`]), the arm-state/importance-label annotation machinery
//! ([`annotate`]), per-view encoders and the importance score head
//! ([`perception`]), score-weighted feature fusion ([`fusion`]), a chunked
//! behavior-cloning policy ([`policy`]), training ([`train`]) and the
//! rollout/ablation/FLOPs evaluation harness ([`eval`]).

pub mod annotate;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod model;
pub mod nn;
pub mod optim;
pub mod perception;
pub mod policy;
pub mod sim;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

//! Cycle-based traffic signal optimization.
//!
//! The crate is organised as a two-stage pipeline:
//!
//! * [`es`] tunes a fixed-time plan (phase lengths for every intersection,
//!   shared cycle length) with natural evolution strategies and constrained
//!   perturbations.
//! * [`marl`] learns decentralized per-intersection controllers from a batch of
//!   cycles recorded under that fixed-time plan, without further simulator
//!   access during training.
//!
//! Both stages are evaluated against the queue simulator in [`sim`]. Plans and
//! their constraints live in [`plan`]; the small feed-forward networks used by
//! the trainer live in [`nn`].
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases below
//! fix the common choice.

pub mod error;
pub mod es;
pub mod marl;
pub mod nn;
pub mod plan;
pub mod scalar;
pub mod scenario;
pub mod sim;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub use es::{EsConfig, EsOutcome, GenerationRecord, PerturbationScheme};
pub use marl::{
    Ablation, BatchDataset, DecentralizedPolicy, MaddpgConfig, Quartile, TrainingHistory,
    TransitionRecord,
};
pub use plan::{IntersectionSpec, PhaseSpec, PlanDelta, SignalPlan};
pub use sim::{CycleTrace, NetworkSpec, Observation, SimState};

/// Double-precision network, the default for training.
pub type Mlp = nn::Mlp<f64>;
/// Single-precision network.
pub type Mlp32 = nn::Mlp<f32>;
/// Adaptive-moment optimizer state for [`Mlp`].
pub type Adam = nn::Adam<f64>;
/// Adaptive-moment optimizer state for [`Mlp32`].
pub type Adam32 = nn::Adam<f32>;
/// Offline trainer in double precision.
pub type Trainer = marl::Trainer<f64>;
/// Decentralized policy in double precision.
pub type Policy = DecentralizedPolicy<f64>;

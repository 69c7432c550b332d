//! Simulator and solver library for QoE-driven downlink resource allocation
//! in a two-tier cognitive radio network with multi-carrier NOMA and joint
//! transmission: seeded scenario generation, the four-term interference/SINR
//! model, an augmented-Lagrangian power-control + scheduling pipeline,
//! brute-force oracles, and OMA/non-JT baselines.

pub mod alm;
pub mod channel;
pub mod error;
pub mod eval;
pub mod feasibility;
pub mod model;
pub mod power;
pub mod qoe;
pub mod scheduling;
pub mod sinr;

pub use error::{Error, Result};
pub use model::{
    NetworkConfig, NetworkInstance, PowerAllocation, Schedule, ServiceKind, ServiceProfile,
};

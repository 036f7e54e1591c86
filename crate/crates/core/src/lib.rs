//! Centralized-critic multiagent reinforcement learning (discrete MADDPG and
//! multiagent soft actor-critic) with distillation and value matching for
//! teams of homogeneous agents.

pub mod dvm;
pub mod env;
pub mod marl;
pub mod error;
pub mod harness;
pub mod replay;
pub mod tensor;

pub use error::{Error, Result};

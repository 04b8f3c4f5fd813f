//! Finite-MDP toolkit for studying how Bellman error relates to value error
//! in policy evaluation.

mod linalg;

pub mod constructions;
pub mod data;
pub mod diagnostics;
pub mod envs;
pub mod experiments;
pub mod learners;
pub mod mdp;
pub mod occupancy;

pub use mdp::{FiniteMdp, MdpError, PolicyTable, QTable};

//! Port-Hamiltonian world-model stack: a structured latent regularizer for
//! recurrent state-space models, a kinematics-aware energy model with power
//! balance, and an actor-critic constrained by the learned energy.

pub mod ac;
pub mod diffnet;
pub mod energy;
pub mod envsim;
pub mod error;
pub mod latentproj;
pub mod phcore;
pub mod rssm;
pub mod stats;

pub use error::{Error, Result};

//! Koopman-invariant sub-dictionary selection: EDMD on a dictionary of
//! observables, a Markov chain built from the Koopman matrix, and
//! (personalized) PageRank to rank observables by how closed they are.

pub mod error;
pub mod numerics;
pub mod systems;
pub mod dictionary;
pub mod edmd;
pub mod ranking;
pub mod pipeline;

pub use error::{Error, Result};

//! Causal optimal transport on scenario trees.
//!
//! The crate discretises path space into finite trees and studies how much
//! extra information an enlarged filtration carries: through causal
//! transport problems (solved as linear programs), through information drifts
//! and entropies, and through value-of-information bounds for optimal
//! stopping and log-utility maximisation.

pub mod causal;
pub mod costs;
pub mod enlargement;
pub mod error;
pub mod lp;
pub mod pathspace;
pub mod stopping;
pub mod utility;

pub use error::{Error, Result};

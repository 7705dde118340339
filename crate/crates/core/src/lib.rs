//! gfnlab-core: an exact, tabular laboratory for flow-network samplers on
//! small DAGs.
//!
//! Everything here runs at "desk scale": graphs are enumerable, marginals
//! are exact, and gradients are hand-derived, so theoretical statements
//! about balance losses, imbalance sensitivity, streaming posterior
//! updates, diagnostics, and policy expressiveness can be checked directly
//! instead of approximated.

pub mod diagnostics;
pub mod error;
pub mod flows;
pub mod grad;
pub mod graph;
pub mod parallel;
pub mod policy;
pub mod sensitivity;
pub mod special;
pub mod stream;
pub mod target;
#[cfg(test)]
pub(crate) mod testutil;
pub mod train;
pub mod wl;

pub use error::{Error, Result};
pub use graph::{StateGraph, StateId};
pub use policy::{FlowAssignment, TabularPolicy, Trajectory};
pub use target::TargetDistribution;

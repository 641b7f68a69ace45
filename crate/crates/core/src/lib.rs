//! Input-dependent model averaging for predictive densities.
//!
//! Given K candidate models scored by leave-one-out log predictive densities,
//! this crate fits simplex combination weights three ways — one shared vector
//! (complete pooling), independent vectors per input cell (no pooling), and
//! partially pooled input-dependent weights under a hierarchical prior
//! sampled with Hamiltonian Monte Carlo — plus the scoring and analysis tools
//! around them: Pareto-smoothed importance sampling for leave-one-out
//! estimates, population-level winner/margin analysis with certified bound
//! checks, and deterministic synthetic-data generators.
//!
//! All log densities and scores are in nats. Randomness is confined to
//! explicit seeds; every fit is reproducible bit-for-bit.

pub mod data;
pub mod diagnostics;
pub mod error;
pub mod features;
pub mod hier;
pub mod io;
pub mod optimize;
pub mod psis;
pub mod sampler;
pub mod simplex;
pub mod synth;
pub mod theory;

pub use data::{FeatureSet, LpdMatrix, SimplexWeights, UnconstrainedParams};
pub use error::{Error, Result};

/// Library version, embedded in tool run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

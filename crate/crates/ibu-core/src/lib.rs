//! Reconstruction of original data distributions from locally privatized
//! observations.
//!
//! In the local privacy model every user obfuscates their own datum with a
//! known randomized mechanism before it is collected. This crate provides the
//! machinery to undo that obfuscation *in aggregate*:
//!
//! - [`simplex`]: probability distributions over a finite space, Euclidean
//!   projection onto the simplex, truncate-and-normalize, seeded sampling.
//! - [`mechanisms`]: k-ary randomized response, (truncated) geometric noise,
//!   the planar geometric mechanism on a location grid, and basic one-time
//!   RAPPOR, all as explicit row-stochastic tables with samplers.
//! - [`likelihood`]: observation records, the outputs probability matrix `G`,
//!   the log-likelihood `L`, posterior responsibilities and the expected
//!   complete-data log-likelihood `Q`.
//! - [`estimators`]: the EM estimator (iterative Bayesian update and its
//!   heterogeneous-mechanism generalization), single-input MLE
//!   characterizations, and the INV-N / INV-P matrix-inversion baselines.
//! - [`analysis`]: MLE uniqueness checking, total variation, KL divergence,
//!   exact earth mover's distance, the method-of-types tail bound, and
//!   likelihood-surface sampling.
//!
//! All estimation routines are deterministic given a seeded random source;
//! nothing in this crate touches global RNG state.

pub mod analysis;
pub mod estimators;
pub mod likelihood;
pub mod mechanisms;
pub mod simplex;

pub use analysis::{
    check_uniqueness, emd, kl_divergence, likelihood_surface, total_variation, types_bound,
    GroundMetric, SurfacePoint, UniquenessReport,
};
pub use estimators::{
    em_estimate, em_estimate_weighted, em_step, heterogeneous_step, ibu_estimate,
    ibu_estimate_frequencies, ibu_step, inv_estimate, rappor_inv_estimate, single_input_mle_kl,
    single_input_mle_set, EmConfig, EmTrace, Empirical, InvMode,
};
pub use likelihood::{
    build_g, log_likelihood, posterior, q_value, MechanismRegistry, ObservationRecord,
    OutputsMatrix,
};
pub use mechanisms::{
    geometric_prob, krr, locate_cell, planar_geometric, rappor, sample_output,
    truncated_geometric, BitVector, Grid, Mechanism,
};
pub use simplex::{project_to_simplex, sample_categorical, truncate_normalize, Distribution};

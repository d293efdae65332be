//! Probability-simplex primitives.
//!
//! A [`Distribution`] is a validated point on the probability simplex over a
//! finite space. The free functions restore feasibility for arbitrary real
//! vectors ([`project_to_simplex`], [`truncate_normalize`]) and draw seeded
//! categorical samples.

use rand::Rng;
use thiserror::Error;

/// Absolute tolerance on `|sum - 1|` accepted at construction; anything
/// within it is renormalized exactly.
pub const SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum SimplexError {
    #[error("vector must be non-empty")]
    Empty,
    #[error("vector contains a non-finite entry at index {0}")]
    NonFinite(usize),
    #[error("negative weight {weight} at index {index}")]
    NegativeWeight { index: usize, weight: f64 },
    #[error("weights sum to {0}, outside tolerance {SUM_TOLERANCE} of 1")]
    SumOutOfTolerance(f64),
    #[error("degenerate vector: no positive mass to normalize")]
    Degenerate,
}

/// A probability distribution over a finite space: non-negative weights
/// summing to 1 (renormalized at construction when the raw sum is within
/// [`SUM_TOLERANCE`] of 1).
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution {
    weights: Vec<f64>,
}

impl Distribution {
    pub fn new(weights: Vec<f64>) -> Result<Self, SimplexError> {
        if weights.is_empty() {
            return Err(SimplexError::Empty);
        }
        for (i, &w) in weights.iter().enumerate() {
            if !w.is_finite() {
                return Err(SimplexError::NonFinite(i));
            }
            if w < 0.0 {
                return Err(SimplexError::NegativeWeight { index: i, weight: w });
            }
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(SimplexError::SumOutOfTolerance(sum));
        }
        let weights = weights.into_iter().map(|w| w / sum).collect();
        Ok(Self { weights })
    }

    pub fn uniform(len: usize) -> Self {
        assert!(len > 0, "uniform distribution needs a non-empty space");
        Self { weights: vec![1.0 / len as f64; len] }
    }

    pub fn point_mass(len: usize, index: usize) -> Self {
        assert!(index < len, "point mass index out of range");
        let mut weights = vec![0.0; len];
        weights[index] = 1.0;
        Self { weights }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn get(&self, index: usize) -> f64 {
        self.weights[index]
    }

    /// True when every component is strictly positive.
    pub fn fully_supported(&self) -> bool {
        self.weights.iter().all(|&w| w > 0.0)
    }
}

impl std::ops::Index<usize> for Distribution {
    type Output = f64;
    fn index(&self, index: usize) -> &f64 {
        &self.weights[index]
    }
}

fn check_finite(v: &[f64]) -> Result<(), SimplexError> {
    if v.is_empty() {
        return Err(SimplexError::Empty);
    }
    for (i, &x) in v.iter().enumerate() {
        if !x.is_finite() {
            return Err(SimplexError::NonFinite(i));
        }
    }
    Ok(())
}

/// Euclidean projection of an arbitrary real vector onto the probability
/// simplex, via the sort-and-threshold algorithm: sort descending, find the
/// largest prefix whose shifted average stays below its last element, clamp.
///
/// Idempotent on valid distributions.
pub fn project_to_simplex(v: &[f64]) -> Result<Distribution, SimplexError> {
    check_finite(v)?;
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("entries are finite"));
    let mut prefix_sum = 0.0;
    let mut rho = 0usize;
    let mut rho_sum = 0.0;
    for (i, &u) in sorted.iter().enumerate() {
        prefix_sum += u;
        let shift = (prefix_sum - 1.0) / (i + 1) as f64;
        if u - shift > 0.0 {
            rho = i + 1;
            rho_sum = prefix_sum;
        }
    }
    // rho >= 1 always: for i = 0 the condition reads u_max - (u_max - 1) = 1 > 0.
    let tau = (rho_sum - 1.0) / rho as f64;
    let weights: Vec<f64> = v.iter().map(|&x| (x - tau).max(0.0)).collect();
    Distribution::new(weights)
}

/// Clamp negative components to zero, then divide by the sum.
///
/// Errors with [`SimplexError::Degenerate`] when nothing positive remains.
pub fn truncate_normalize(v: &[f64]) -> Result<Distribution, SimplexError> {
    check_finite(v)?;
    let clamped: Vec<f64> = v.iter().map(|&x| x.max(0.0)).collect();
    let sum: f64 = clamped.iter().sum();
    if sum <= 0.0 {
        return Err(SimplexError::Degenerate);
    }
    Ok(Distribution { weights: clamped.into_iter().map(|x| x / sum).collect() })
}

/// Draw `count` category indices from `d` using the caller's random source.
/// Identical seed state yields a bitwise-identical index sequence.
pub fn sample_categorical<R: Rng>(d: &Distribution, rng: &mut R, count: usize) -> Vec<usize> {
    assert!(count >= 1, "count must be positive");
    let mut cdf = Vec::with_capacity(d.len());
    let mut acc = 0.0;
    for &w in d.weights() {
        acc += w;
        cdf.push(acc);
    }
    let last = d.len() - 1;
    (0..count)
        .map(|_| {
            let u: f64 = rng.gen();
            cdf.partition_point(|&c| c <= u).min(last)
        })
        .collect()
}

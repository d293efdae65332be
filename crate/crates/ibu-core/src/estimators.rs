//! Reconstruction procedures: the EM estimator on the outputs probability
//! matrix (whose single-fixed-mechanism specialization is the iterative
//! Bayesian update), single-input MLE characterizations, and the INV-N /
//! INV-P matrix-inversion baselines.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::analysis::total_variation;
use crate::likelihood::{column_marginal, LikelihoodError, OutputsMatrix};
use crate::mechanisms::{rappor_keep_prob, BitVector, Mechanism};
use crate::simplex::{project_to_simplex, truncate_normalize, Distribution, SimplexError};

/// Condition-number guard for the matrix-inversion baselines.
pub const MAX_CONDITION_NUMBER: f64 = 1e12;

/// Default relative tolerance for argmax ties in the single-input MLE set.
pub const DEFAULT_MLE_REL_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("invalid config: delta must be positive and max_iters at least 1")]
    InvalidConfig,
    #[error("starting distribution must be fully supported and match the input space")]
    InvalidStart,
    #[error("starting distribution has -inf log-likelihood on this data")]
    InfeasibleStart,
    #[error("observable {0} has positive weight but zero probability under theta")]
    ZeroDenominator(usize),
    #[error("expected {expected} values, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("weights must be non-negative with positive total")]
    InvalidWeights,
    #[error("empirical distribution must contain at least one observation")]
    EmptyEmpirical,
    #[error("observation index {index} out of range for space of size {space}")]
    ObservationOutOfRange { index: usize, space: usize },
    #[error("matrix inversion needs a square mechanism: {inputs} inputs vs {outputs} outputs")]
    NotSquare { inputs: usize, outputs: usize },
    #[error("mechanism matrix is singular")]
    Singular,
    #[error("mechanism matrix condition number {0:.3e} exceeds {MAX_CONDITION_NUMBER:.0e}")]
    IllConditioned(f64),
    #[error("column has no positive entry, so no input can explain the data")]
    NoFeasibleMle,
    #[error("every mechanism row has infinite divergence from the empirical distribution")]
    AllRowsInfinitelyFar,
    #[error("no observed bit vectors")]
    EmptyObservations,
    #[error("observed bit vectors have inconsistent lengths")]
    RaggedObservations,
    #[error("per-bit keep and flip probabilities coincide; the encoding is not identifiable")]
    NonIdentifiable,
    #[error("empirical start requires full support: observable {0} was never seen")]
    EmpiricalStartUnsupported(usize),
    #[error(transparent)]
    Simplex(#[from] SimplexError),
    #[error(transparent)]
    Likelihood(#[from] LikelihoodError),
}

/// Stopping rule and starting point for the EM iteration.
#[derive(Debug, Clone)]
pub struct EmConfig {
    /// Stop when `|L(theta^t) - L(theta^{t-1})| < delta`.
    pub delta: f64,
    pub max_iters: usize,
    /// Starting distribution; uniform when absent. Must have every
    /// component strictly positive.
    pub theta0: Option<Distribution>,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self { delta: 1e-10, max_iters: 1_000_000, theta0: None }
    }
}

impl EmConfig {
    fn validate(&self) -> Result<(), EstimatorError> {
        if !(self.delta > 0.0 && self.delta.is_finite()) || self.max_iters == 0 {
            return Err(EstimatorError::InvalidConfig);
        }
        Ok(())
    }
}

/// The full run record of an EM estimation.
#[derive(Debug, Clone)]
pub struct EmTrace {
    pub estimate: Distribution,
    /// `L(theta^0), ..., L(theta^T)`; non-decreasing up to rounding.
    pub log_likelihoods: Vec<f64>,
    /// `TV(theta^t, theta^{t-1})` for `t = 1..=T`.
    pub step_total_variation: Vec<f64>,
    pub iterations: usize,
    /// True when the delta stopping rule fired before `max_iters`.
    pub converged: bool,
}

impl EmTrace {
    /// CSV with header `iteration,log_likelihood,tv_to_previous`; the
    /// iteration-0 row has an empty tv field.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "iteration,log_likelihood,tv_to_previous")?;
        for (t, ll) in self.log_likelihoods.iter().enumerate() {
            if t == 0 {
                writeln!(w, "0,{ll},")?;
            } else {
                writeln!(w, "{t},{ll},{}", self.step_total_variation[t - 1])?;
            }
        }
        Ok(())
    }
}

/// Observed output frequencies: counts per observable and their total.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Empirical {
    counts: Vec<u64>,
    total: u64,
}

impl Empirical {
    pub fn from_counts(counts: Vec<u64>) -> Result<Self, EstimatorError> {
        let total: u64 = counts.iter().sum();
        if counts.is_empty() || total == 0 {
            return Err(EstimatorError::EmptyEmpirical);
        }
        Ok(Self { counts, total })
    }

    /// Tally observation indices over a space of the given size.
    pub fn from_observations(
        space: usize,
        observations: impl IntoIterator<Item = usize>,
    ) -> Result<Self, EstimatorError> {
        let mut counts = vec![0u64; space];
        for z in observations {
            if z >= space {
                return Err(EstimatorError::ObservationOutOfRange { index: z, space });
            }
            counts[z] += 1;
        }
        Self::from_counts(counts)
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn count(&self, z: usize) -> u64 {
        self.counts[z]
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn frequency(&self, z: usize) -> f64 {
        self.counts[z] as f64 / self.total as f64
    }

    pub fn frequencies(&self) -> Vec<f64> {
        self.counts.iter().map(|&c| c as f64 / self.total as f64).collect()
    }

    /// The empirical distribution itself, as a starting point for EM.
    /// Rejected unless every observable was seen at least once: a zero
    /// starting component can never re-enter the estimate.
    pub fn as_start(&self) -> Result<Distribution, EstimatorError> {
        if let Some(z) = self.counts.iter().position(|&c| c == 0) {
            return Err(EstimatorError::EmpiricalStartUnsupported(z));
        }
        Ok(Distribution::new(self.frequencies()).expect("frequencies sum to 1"))
    }
}

fn resolve_start(space: usize, cfg: &EmConfig) -> Result<Distribution, EstimatorError> {
    match &cfg.theta0 {
        None => Ok(Distribution::uniform(space)),
        Some(theta0) => {
            if theta0.len() != space || !theta0.fully_supported() {
                return Err(EstimatorError::InvalidStart);
            }
            Ok(theta0.clone())
        }
    }
}

fn weighted_log_likelihood(theta: &Distribution, columns: &[Vec<f64>], weights: &[f64]) -> f64 {
    let mut total = 0.0;
    for (column, &w) in columns.iter().zip(weights) {
        if w == 0.0 {
            continue;
        }
        let marginal = column_marginal(theta, column);
        if marginal <= 0.0 {
            return f64::NEG_INFINITY;
        }
        total += w * marginal.ln();
    }
    total
}

fn weighted_em_update(
    theta: &Distribution,
    columns: &[Vec<f64>],
    weights: &[f64],
    total_weight: f64,
) -> Result<Distribution, EstimatorError> {
    let mut acc = vec![0.0; theta.len()];
    for (i, (column, &w)) in columns.iter().zip(weights).enumerate() {
        if w == 0.0 {
            continue;
        }
        let marginal = column_marginal(theta, column);
        if marginal <= 0.0 {
            return Err(EstimatorError::ZeroDenominator(i));
        }
        let scale = w / marginal;
        for (a, (&t, &g)) in acc.iter_mut().zip(theta.weights().iter().zip(column)) {
            *a += scale * t * g;
        }
    }
    for a in acc.iter_mut() {
        *a /= total_weight;
    }
    Ok(Distribution::new(acc)?)
}

fn em_loop(
    space: usize,
    columns: &[Vec<f64>],
    weights: &[f64],
    cfg: &EmConfig,
) -> Result<EmTrace, EstimatorError> {
    cfg.validate()?;
    if columns.len() != weights.len() {
        return Err(EstimatorError::LengthMismatch { expected: columns.len(), got: weights.len() });
    }
    if weights.iter().any(|&w| w < 0.0 || !w.is_finite()) {
        return Err(EstimatorError::InvalidWeights);
    }
    let total_weight: f64 = weights.iter().sum();
    if total_weight <= 0.0 {
        return Err(EstimatorError::InvalidWeights);
    }
    let mut theta = resolve_start(space, cfg)?;
    let mut ll_prev = weighted_log_likelihood(&theta, columns, weights);
    if ll_prev == f64::NEG_INFINITY {
        return Err(EstimatorError::InfeasibleStart);
    }
    let mut log_likelihoods = vec![ll_prev];
    let mut step_total_variation = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    for t in 1..=cfg.max_iters {
        let next = weighted_em_update(&theta, columns, weights, total_weight)?;
        let ll_next = weighted_log_likelihood(&next, columns, weights);
        log_likelihoods.push(ll_next);
        step_total_variation
            .push(total_variation(&theta, &next).expect("iterates share a space"));
        iterations = t;
        let gap = (ll_next - ll_prev).abs();
        theta = next;
        ll_prev = ll_next;
        if gap < cfg.delta {
            converged = true;
            break;
        }
    }
    Ok(EmTrace { estimate: theta, log_likelihoods, step_total_variation, iterations, converged })
}

/// Run the EM iteration on an outputs probability matrix:
/// `theta^{t+1}_x = (1/n) sum_i theta^t_x g_{x i} / sum_u theta^t_u g_{u i}`
/// until the log-likelihood gap drops below `cfg.delta` or `cfg.max_iters`
/// is reached.
pub fn em_estimate(g: &OutputsMatrix, cfg: &EmConfig) -> Result<EmTrace, EstimatorError> {
    let weights = vec![1.0; g.user_count()];
    em_loop(g.space_size(), g.columns(), &weights, cfg)
}

/// EM with per-column multiplicities: column `i` counts as `weights[i]`
/// users. Equivalent to `em_estimate` on the expanded matrix.
pub fn em_estimate_weighted(
    g: &OutputsMatrix,
    weights: &[f64],
    cfg: &EmConfig,
) -> Result<EmTrace, EstimatorError> {
    if weights.len() != g.user_count() {
        return Err(EstimatorError::LengthMismatch {
            expected: g.user_count(),
            got: weights.len(),
        });
    }
    em_loop(g.space_size(), g.columns(), weights, cfg)
}

/// A single EM update step on the outputs probability matrix.
pub fn em_step(theta: &Distribution, g: &OutputsMatrix) -> Result<Distribution, EstimatorError> {
    if theta.len() != g.space_size() {
        return Err(EstimatorError::LengthMismatch { expected: g.space_size(), got: theta.len() });
    }
    let weights = vec![1.0; g.user_count()];
    weighted_em_update(theta, g.columns(), &weights, g.user_count() as f64)
}

/// One iterative-Bayesian-update step for a single fixed mechanism:
/// `theta'_x = sum_z q_z theta_x a_{x z} / sum_u theta_u a_{u z}`.
pub fn ibu_step(
    theta: &Distribution,
    mech: &Mechanism,
    q: &Empirical,
) -> Result<Distribution, EstimatorError> {
    ibu_step_frequencies(theta, mech, &q.frequencies())
}

/// [`ibu_step`] with explicit observable frequencies (weights may be any
/// non-negative reals summing to 1, e.g. an exactly known output
/// distribution rather than a finite-sample tally).
pub fn ibu_step_frequencies(
    theta: &Distribution,
    mech: &Mechanism,
    frequencies: &[f64],
) -> Result<Distribution, EstimatorError> {
    if theta.len() != mech.input_count() {
        return Err(EstimatorError::LengthMismatch {
            expected: mech.input_count(),
            got: theta.len(),
        });
    }
    if frequencies.len() != mech.output_count() {
        return Err(EstimatorError::LengthMismatch {
            expected: mech.output_count(),
            got: frequencies.len(),
        });
    }
    let m = theta.len();
    let mut acc = vec![0.0; m];
    for (z, &qz) in frequencies.iter().enumerate() {
        if qz == 0.0 {
            continue;
        }
        let mut denom = 0.0;
        for x in 0..m {
            denom += theta.get(x) * mech.prob(x, z);
        }
        if denom <= 0.0 {
            return Err(EstimatorError::ZeroDenominator(z));
        }
        for (x, a) in acc.iter_mut().enumerate() {
            *a += qz * theta.get(x) * mech.prob(x, z) / denom;
        }
    }
    Ok(Distribution::new(acc)?)
}

/// Iterate [`ibu_step`] with the EM stopping rule. The trace log-likelihood
/// is count-weighted, so it matches `em_estimate` run on one record per
/// observation.
pub fn ibu_estimate(
    mech: &Mechanism,
    q: &Empirical,
    cfg: &EmConfig,
) -> Result<EmTrace, EstimatorError> {
    if q.len() != mech.output_count() {
        return Err(EstimatorError::LengthMismatch { expected: mech.output_count(), got: q.len() });
    }
    let mut columns = Vec::new();
    let mut weights = Vec::new();
    for z in 0..q.len() {
        if q.count(z) > 0 {
            columns.push(mech.column(z));
            weights.push(q.count(z) as f64);
        }
    }
    em_loop(mech.input_count(), &columns, &weights, cfg)
}

/// [`ibu_estimate`] with real-valued observable weights; the trace
/// log-likelihood is in the scale of the given weights.
pub fn ibu_estimate_frequencies(
    mech: &Mechanism,
    frequencies: &[f64],
    cfg: &EmConfig,
) -> Result<EmTrace, EstimatorError> {
    if frequencies.len() != mech.output_count() {
        return Err(EstimatorError::LengthMismatch {
            expected: mech.output_count(),
            got: frequencies.len(),
        });
    }
    let mut columns = Vec::new();
    let mut weights = Vec::new();
    for (z, &f) in frequencies.iter().enumerate() {
        if f > 0.0 {
            columns.push(mech.column(z));
            weights.push(f);
        }
    }
    em_loop(mech.input_count(), &columns, &weights, cfg)
}

/// One EM step when every user reports a single observable through their
/// own mechanism:
/// `theta'_x = (1/n) sum_i theta_x a^i_{x z^i} / sum_u theta_u a^i_{u z^i}`.
pub fn heterogeneous_step(
    theta: &Distribution,
    per_user: &[(usize, &Mechanism)],
) -> Result<Distribution, EstimatorError> {
    if per_user.is_empty() {
        return Err(EstimatorError::EmptyEmpirical);
    }
    let m = theta.len();
    let mut acc = vec![0.0; m];
    for (i, &(z, mech)) in per_user.iter().enumerate() {
        if mech.input_count() != m {
            return Err(EstimatorError::LengthMismatch {
                expected: m,
                got: mech.input_count(),
            });
        }
        if z >= mech.output_count() {
            return Err(EstimatorError::ObservationOutOfRange {
                index: z,
                space: mech.output_count(),
            });
        }
        let mut denom = 0.0;
        for x in 0..m {
            denom += theta.get(x) * mech.prob(x, z);
        }
        if denom <= 0.0 {
            return Err(EstimatorError::ZeroDenominator(i));
        }
        for (x, a) in acc.iter_mut().enumerate() {
            *a += theta.get(x) * mech.prob(x, z) / denom;
        }
    }
    let n = per_user.len() as f64;
    for a in acc.iter_mut() {
        *a /= n;
    }
    Ok(Distribution::new(acc)?)
}

/// The MLE support set for a single input observed through known
/// mechanisms: all inputs whose column likelihood is within `rel_tol`
/// (relatively) of the maximum. Every distribution supported on this set is
/// an MLE.
pub fn single_input_mle_set(
    g_column: &[f64],
    rel_tol: f64,
) -> Result<Vec<usize>, EstimatorError> {
    if g_column.is_empty() {
        return Err(EstimatorError::NoFeasibleMle);
    }
    let max = g_column.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max <= 0.0 {
        return Err(EstimatorError::NoFeasibleMle);
    }
    let cutoff = (1.0 - rel_tol) * max;
    Ok((0..g_column.len()).filter(|&x| g_column[x] >= cutoff).collect())
}

/// The same MLE support set computed through information geometry: the
/// inputs whose mechanism row is closest to the empirical distribution in
/// KL divergence. Rows at infinite divergence are excluded; tie handling
/// mirrors [`single_input_mle_set`]'s relative tolerance on likelihoods of
/// `q.total()` observations.
pub fn single_input_mle_kl(
    q: &Empirical,
    mech: &Mechanism,
    rel_tol: f64,
) -> Result<Vec<usize>, EstimatorError> {
    if q.len() != mech.output_count() {
        return Err(EstimatorError::LengthMismatch { expected: mech.output_count(), got: q.len() });
    }
    let mut divergences = Vec::with_capacity(mech.input_count());
    for x in 0..mech.input_count() {
        let mut d = 0.0;
        for z in 0..q.len() {
            let qz = q.frequency(z);
            if qz > 0.0 {
                let a = mech.prob(x, z);
                if a <= 0.0 {
                    d = f64::INFINITY;
                    break;
                }
                d += qz * (qz / a).ln();
            }
        }
        divergences.push(d);
    }
    let min = divergences.iter().cloned().fold(f64::INFINITY, f64::min);
    if min == f64::INFINITY {
        return Err(EstimatorError::AllRowsInfinitelyFar);
    }
    // g_x = prod_z a_{x z}^(k q_z), so a relative likelihood tie of rel_tol
    // is a divergence gap of -ln(1 - rel_tol) / k.
    let gap = -(1.0 - rel_tol).ln() / q.total() as f64;
    Ok((0..divergences.len()).filter(|&x| divergences[x] <= min + gap).collect())
}

/// Post-processing mode for the matrix-inversion baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InvMode {
    /// INV-N: clamp negatives to zero and renormalize.
    TruncateNormalize,
    /// INV-P: Euclidean projection onto the simplex.
    Project,
}

/// Matrix-inversion estimate `v = q A^{-1}`, post-processed into a valid
/// distribution per `mode`. Requires a square mechanism with condition
/// number below [`MAX_CONDITION_NUMBER`].
pub fn inv_estimate(
    q: &Empirical,
    mech: &Mechanism,
    mode: InvMode,
) -> Result<Distribution, EstimatorError> {
    if !mech.is_square() {
        return Err(EstimatorError::NotSquare {
            inputs: mech.input_count(),
            outputs: mech.output_count(),
        });
    }
    let k = mech.input_count();
    if q.len() != k {
        return Err(EstimatorError::LengthMismatch { expected: k, got: q.len() });
    }
    let a = DMatrix::from_fn(k, k, |r, c| mech.prob(r, c));
    let sigma = a.clone().singular_values();
    let s_max = sigma.iter().cloned().fold(0.0f64, f64::max);
    let s_min = sigma.iter().cloned().fold(f64::INFINITY, f64::min);
    if s_min <= 0.0 {
        return Err(EstimatorError::Singular);
    }
    let condition = s_max / s_min;
    if condition > MAX_CONDITION_NUMBER {
        return Err(EstimatorError::IllConditioned(condition));
    }
    // v A = q  <=>  A^T v^T = q^T.
    let rhs = DVector::from_vec(q.frequencies());
    let v = a.transpose().lu().solve(&rhs).ok_or(EstimatorError::Singular)?;
    let v: Vec<f64> = v.iter().cloned().collect();
    match mode {
        InvMode::TruncateNormalize => Ok(truncate_normalize(&v)?),
        InvMode::Project => Ok(project_to_simplex(&v)?),
    }
}

/// Debias per-bit report frequencies from basic one-time RAPPOR:
/// `t_b = (f_b - p_flip) / (p_keep - p_flip)`. The result is an unbiased
/// estimate of the per-input probabilities but may leave the simplex.
pub fn rappor_debias(bit_frequencies: &[f64], epsilon: f64) -> Result<Vec<f64>, EstimatorError> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(EstimatorError::NonIdentifiable);
    }
    let keep = rappor_keep_prob(epsilon);
    let flip = 1.0 - keep;
    let spread = keep - flip;
    if spread <= 0.0 {
        return Err(EstimatorError::NonIdentifiable);
    }
    Ok(bit_frequencies.iter().map(|&f| (f - flip) / spread).collect())
}

/// Matrix-inversion baseline adapted to RAPPOR: debias each bit-position
/// frequency, then post-process per `mode`.
pub fn rappor_inv_estimate(
    observed: &[BitVector],
    epsilon: f64,
    mode: InvMode,
) -> Result<Distribution, EstimatorError> {
    if observed.is_empty() {
        return Err(EstimatorError::EmptyObservations);
    }
    let m = observed[0].len();
    if m == 0 || observed.iter().any(|b| b.len() != m) {
        return Err(EstimatorError::RaggedObservations);
    }
    let n = observed.len() as f64;
    let mut freqs = vec![0.0; m];
    for bits in observed {
        for (j, f) in freqs.iter_mut().enumerate() {
            if bits.bit(j) {
                *f += 1.0;
            }
        }
    }
    for f in freqs.iter_mut() {
        *f /= n;
    }
    let debiased = rappor_debias(&freqs, epsilon)?;
    match mode {
        InvMode::TruncateNormalize => Ok(truncate_normalize(&debiased)?),
        InvMode::Project => Ok(project_to_simplex(&debiased)?),
    }
}

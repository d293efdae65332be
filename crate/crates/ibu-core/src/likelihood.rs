//! The statistical core of the local privacy model.
//!
//! Each user `i` holds a hidden input `X^i` drawn from an unknown
//! distribution `theta` and reports one or more observables, each through a
//! known mechanism. The outputs probability matrix `G` collects, per user,
//! the probability of their entire reported vector given each candidate
//! input; everything else (log-likelihood, posterior responsibilities, the
//! expected complete-data log-likelihood `Q`) is computed from `G`.
//!
//! Conventions: natural logarithms throughout; a log-likelihood of
//! `f64::NEG_INFINITY` marks distributions that cannot have produced some
//! observed output. Inner sums over the input space are computed in the
//! linear domain (entries are well-scaled probabilities at the sizes this
//! crate targets), outer sums in the log domain.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::mechanisms::Mechanism;
use crate::simplex::Distribution;

#[derive(Debug, Error)]
pub enum LikelihoodError {
    #[error("no observation records")]
    EmptyRecords,
    #[error("record {user} has an empty observable list")]
    EmptyRecord { user: usize },
    #[error("unknown mechanism id `{0}`")]
    UnknownMechanism(String),
    #[error("mechanism id `{0}` registered twice")]
    DuplicateMechanism(String),
    #[error("observable {observable} out of range for mechanism `{mechanism}` ({outputs} outputs)")]
    ObservableOutOfRange { observable: usize, mechanism: String, outputs: usize },
    #[error("mechanism `{mechanism}` has input space of size {got}, expected {expected}")]
    MismatchedInputSpace { mechanism: String, expected: usize, got: usize },
    #[error("dimension mismatch: distribution has {theta} weights, matrix has {matrix} rows")]
    DimensionMismatch { theta: usize, matrix: usize },
    #[error("user index {0} out of range")]
    UserOutOfRange(usize),
    #[error("theta assigns zero probability to every input consistent with user {user}'s output")]
    InfeasibleTheta { user: usize },
    #[error("matrix entry ({row}, {col}) = {value} is not a probability")]
    EntryOutOfRange { row: usize, col: usize, value: f64 },
    #[error("matrix needs at least one row and one column")]
    EmptyMatrix,
}

/// One user's reported data: a non-empty list of (observable index,
/// mechanism id) pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObservationRecord {
    pub user_index: usize,
    pub observables: Vec<(usize, String)>,
}

impl ObservationRecord {
    /// A record with a single observable under one mechanism.
    pub fn single(user_index: usize, observable: usize, mechanism_id: impl Into<String>) -> Self {
        Self { user_index, observables: vec![(observable, mechanism_id.into())] }
    }
}

/// Lookup table resolving mechanism ids referenced by observation records.
#[derive(Debug, Default, Clone)]
pub struct MechanismRegistry {
    map: BTreeMap<String, Mechanism>,
}

impl MechanismRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, mech: Mechanism) -> Result<(), LikelihoodError> {
        let id = mech.id().to_string();
        if self.map.contains_key(&id) {
            return Err(LikelihoodError::DuplicateMechanism(id));
        }
        self.map.insert(id, mech);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&Mechanism> {
        self.map.get(id)
    }
}

/// The outputs probability matrix `G`: one row per input value, one column
/// per user; entry `(x, i)` is the probability of user `i`'s full reported
/// vector when their hidden input is `x`. Columns are not normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputsMatrix {
    space_size: usize,
    columns: Vec<Vec<f64>>,
}

impl OutputsMatrix {
    /// Build directly from per-user columns (each of length `space_size`).
    pub fn from_columns(space_size: usize, columns: Vec<Vec<f64>>) -> Result<Self, LikelihoodError> {
        if space_size == 0 || columns.is_empty() {
            return Err(LikelihoodError::EmptyMatrix);
        }
        for (i, col) in columns.iter().enumerate() {
            if col.len() != space_size {
                return Err(LikelihoodError::DimensionMismatch {
                    theta: space_size,
                    matrix: col.len(),
                });
            }
            for (x, &v) in col.iter().enumerate() {
                if !v.is_finite() || !(0.0..=1.0 + 1e-12).contains(&v) {
                    return Err(LikelihoodError::EntryOutOfRange { row: x, col: i, value: v });
                }
            }
        }
        Ok(Self { space_size, columns })
    }

    pub fn space_size(&self) -> usize {
        self.space_size
    }

    /// Number of users (columns).
    pub fn user_count(&self) -> usize {
        self.columns.len()
    }

    pub fn column(&self, i: usize) -> &[f64] {
        &self.columns[i]
    }

    pub fn columns(&self) -> &[Vec<f64>] {
        &self.columns
    }

    pub fn entry(&self, x: usize, i: usize) -> f64 {
        self.columns[i][x]
    }
}

/// Build `G` from observation records: column `i` is the entrywise product
/// of the mechanism columns selected by user `i`'s observables.
pub fn build_g(
    records: &[ObservationRecord],
    registry: &MechanismRegistry,
) -> Result<OutputsMatrix, LikelihoodError> {
    if records.is_empty() {
        return Err(LikelihoodError::EmptyRecords);
    }
    let mut space_size: Option<usize> = None;
    let mut columns = Vec::with_capacity(records.len());
    for record in records {
        if record.observables.is_empty() {
            return Err(LikelihoodError::EmptyRecord { user: record.user_index });
        }
        let mut column: Option<Vec<f64>> = None;
        for (observable, mech_id) in &record.observables {
            let mech = registry
                .get(mech_id)
                .ok_or_else(|| LikelihoodError::UnknownMechanism(mech_id.clone()))?;
            match space_size {
                None => space_size = Some(mech.input_count()),
                Some(expected) => {
                    if mech.input_count() != expected {
                        return Err(LikelihoodError::MismatchedInputSpace {
                            mechanism: mech_id.clone(),
                            expected,
                            got: mech.input_count(),
                        });
                    }
                }
            }
            if *observable >= mech.output_count() {
                return Err(LikelihoodError::ObservableOutOfRange {
                    observable: *observable,
                    mechanism: mech_id.clone(),
                    outputs: mech.output_count(),
                });
            }
            let factor = mech.column(*observable);
            column = Some(match column {
                None => factor,
                Some(mut acc) => {
                    for (a, f) in acc.iter_mut().zip(&factor) {
                        *a *= f;
                    }
                    acc
                }
            });
        }
        columns.push(column.expect("record has at least one observable"));
    }
    OutputsMatrix::from_columns(space_size.expect("at least one record"), columns)
}

fn check_dims(theta: &Distribution, g: &OutputsMatrix) -> Result<(), LikelihoodError> {
    if theta.len() != g.space_size() {
        return Err(LikelihoodError::DimensionMismatch {
            theta: theta.len(),
            matrix: g.space_size(),
        });
    }
    Ok(())
}

/// Probability that user `i`'s output was produced under `theta`:
/// `sum_x theta_x g_{x i}`.
pub(crate) fn column_marginal(theta: &Distribution, column: &[f64]) -> f64 {
    theta.weights().iter().zip(column).map(|(t, g)| t * g).sum()
}

/// Log-likelihood of `theta` for the observed data:
/// `L(theta) = sum_i ln sum_x theta_x g_{x i}`, `NEG_INFINITY` when some
/// user's output is impossible under `theta`.
pub fn log_likelihood(theta: &Distribution, g: &OutputsMatrix) -> Result<f64, LikelihoodError> {
    check_dims(theta, g)?;
    let mut total = 0.0;
    for column in g.columns() {
        let marginal = column_marginal(theta, column);
        if marginal <= 0.0 {
            return Ok(f64::NEG_INFINITY);
        }
        total += marginal.ln();
    }
    Ok(total)
}

/// Posterior over inputs for user `i` given prior `theta`:
/// `theta_x g_{x i} / sum_u theta_u g_{u i}`.
pub fn posterior(
    theta: &Distribution,
    g: &OutputsMatrix,
    i: usize,
) -> Result<Distribution, LikelihoodError> {
    check_dims(theta, g)?;
    if i >= g.user_count() {
        return Err(LikelihoodError::UserOutOfRange(i));
    }
    let column = g.column(i);
    let marginal = column_marginal(theta, column);
    if marginal <= 0.0 {
        return Err(LikelihoodError::InfeasibleTheta { user: i });
    }
    let weights: Vec<f64> =
        theta.weights().iter().zip(column).map(|(t, g)| t * g / marginal).collect();
    Ok(Distribution::new(weights).expect("posterior weights are a distribution"))
}

/// Expected complete-data log-likelihood
/// `Q(theta | theta_prev) = sum_x psi_x ln theta_x + K(theta_prev)` where
/// `psi_x` accumulates the posterior responsibility of `x` over all users
/// and `K` carries the `ln g_{x i}` terms. Returns `NEG_INFINITY` when
/// `theta` zeroes out an input that carries posterior mass.
pub fn q_value(
    theta: &Distribution,
    theta_prev: &Distribution,
    g: &OutputsMatrix,
) -> Result<f64, LikelihoodError> {
    check_dims(theta, g)?;
    check_dims(theta_prev, g)?;
    let m = g.space_size();
    let mut psi = vec![0.0; m];
    let mut k_term = 0.0;
    for (i, column) in g.columns().iter().enumerate() {
        let marginal = column_marginal(theta_prev, column);
        if marginal <= 0.0 {
            return Err(LikelihoodError::InfeasibleTheta { user: i });
        }
        for ((psi_x, &g_x), &prev_x) in
            psi.iter_mut().zip(column).zip(theta_prev.weights())
        {
            let responsibility = prev_x * g_x / marginal;
            if responsibility > 0.0 {
                *psi_x += responsibility;
                k_term += responsibility * g_x.ln();
            }
        }
    }
    let mut q = k_term;
    for (&psi_x, &theta_x) in psi.iter().zip(theta.weights()) {
        if psi_x > 0.0 {
            if theta_x <= 0.0 {
                return Ok(f64::NEG_INFINITY);
            }
            q += psi_x * theta_x.ln();
        }
    }
    Ok(q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mechanisms::{krr, Mechanism};

    const LN2: f64 = std::f64::consts::LN_2;

    /// The three-state mechanism with a non-trivial null direction:
    /// rows (1/2, 1/3, 1/6), (1/3, 1/3, 1/3), (1/6, 1/3, 1/2).
    fn ambiguous_mechanism() -> Mechanism {
        Mechanism::from_square_rows(
            "ambiguous",
            vec![
                vec![0.5, 1.0 / 3.0, 1.0 / 6.0],
                vec![1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
                vec![1.0 / 6.0, 1.0 / 3.0, 0.5],
            ],
        )
        .unwrap()
    }

    fn registry_with(mech: Mechanism) -> MechanismRegistry {
        let mut reg = MechanismRegistry::new();
        reg.register(mech).unwrap();
        reg
    }

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} != {b} (tol {tol})");
    }

    #[test]
    fn build_g_single_observable_column() {
        let reg = registry_with(krr(3, LN2).unwrap());
        let id = krr(3, LN2).unwrap().id().to_string();
        let records = vec![ObservationRecord::single(0, 0, &id)];
        let g = build_g(&records, &reg).unwrap();
        assert_eq!(g.user_count(), 1);
        for (x, &e) in [0.5, 0.25, 0.25].iter().enumerate() {
            assert_close(g.entry(x, 0), e, 1e-15);
        }
    }

    #[test]
    fn build_g_multiplies_observable_columns() {
        let mech = krr(3, LN2).unwrap();
        let id = mech.id().to_string();
        let reg = registry_with(mech);
        let records = vec![ObservationRecord {
            user_index: 0,
            observables: vec![(0, id.clone()), (1, id.clone())],
        }];
        let g = build_g(&records, &reg).unwrap();
        for (x, &e) in [1.0 / 8.0, 1.0 / 8.0, 1.0 / 16.0].iter().enumerate() {
            assert_close(g.entry(x, 0), e, 1e-15);
        }
    }

    #[test]
    fn build_g_identity_gives_indicator_column() {
        let reg = registry_with(Mechanism::identity(4));
        let records = vec![ObservationRecord::single(0, 2, "identity")];
        let g = build_g(&records, &reg).unwrap();
        assert_eq!(g.column(0), &[0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn build_g_error_paths() {
        let reg = registry_with(Mechanism::identity(3));
        assert!(matches!(build_g(&[], &reg), Err(LikelihoodError::EmptyRecords)));
        let unknown = vec![ObservationRecord::single(0, 0, "missing")];
        assert!(matches!(build_g(&unknown, &reg), Err(LikelihoodError::UnknownMechanism(_))));
        let out_of_range = vec![ObservationRecord::single(0, 3, "identity")];
        assert!(matches!(
            build_g(&out_of_range, &reg),
            Err(LikelihoodError::ObservableOutOfRange { .. })
        ));
        let mut reg2 = registry_with(Mechanism::identity(3));
        reg2.register(krr(4, 1.0).unwrap()).unwrap();
        let mixed = vec![
            ObservationRecord::single(0, 0, "identity"),
            ObservationRecord::single(1, 0, krr(4, 1.0).unwrap().id()),
        ];
        assert!(matches!(
            build_g(&mixed, &reg2),
            Err(LikelihoodError::MismatchedInputSpace { .. })
        ));
    }

    /// G for the 3-RR mechanism with observations z = 0, 1, 1, 2.
    fn krr_data_g() -> OutputsMatrix {
        let mech = krr(3, LN2).unwrap();
        let id = mech.id().to_string();
        let reg = registry_with(mech);
        let records: Vec<ObservationRecord> = [0usize, 1, 1, 2]
            .iter()
            .enumerate()
            .map(|(i, &z)| ObservationRecord::single(i, z, &id))
            .collect();
        build_g(&records, &reg).unwrap()
    }

    #[test]
    fn log_likelihood_closed_forms() {
        let g = krr_data_g();
        let boundary = Distribution::point_mass(3, 1);
        assert_close(log_likelihood(&boundary, &g).unwrap(), -6.0 * LN2, 1e-12);
        let uniform = Distribution::uniform(3);
        assert_close(log_likelihood(&uniform, &g).unwrap(), 4.0 * (1.0f64 / 3.0).ln(), 1e-12);
    }

    #[test]
    fn log_likelihood_negative_infinity_on_impossible_data() {
        let reg = registry_with(Mechanism::identity(3));
        let records = vec![ObservationRecord::single(0, 1, "identity")];
        let g = build_g(&records, &reg).unwrap();
        let theta = Distribution::point_mass(3, 0);
        assert_eq!(log_likelihood(&theta, &g).unwrap(), f64::NEG_INFINITY);
    }

    #[test]
    fn posterior_uniform_prior_returns_normalized_column() {
        let g = krr_data_g();
        let post = posterior(&Distribution::uniform(3), &g, 0).unwrap();
        for (x, &e) in [0.5, 0.25, 0.25].iter().enumerate() {
            assert_close(post.get(x), e, 1e-12);
        }
    }

    #[test]
    fn posterior_zero_prior_stays_zero() {
        let mech = ambiguous_mechanism();
        let id = mech.id().to_string();
        let reg = registry_with(mech);
        let theta = Distribution::new(vec![0.5, 0.0, 0.5]).unwrap();
        for z in 0..3 {
            let records = vec![ObservationRecord::single(0, z, &id)];
            let g = build_g(&records, &reg).unwrap();
            let post = posterior(&theta, &g, 0).unwrap();
            assert_eq!(post.get(1), 0.0);
            let sum: f64 = post.weights().iter().sum();
            assert_close(sum, 1.0, 1e-12);
        }
    }

    #[test]
    fn posterior_worked_example() {
        let g = krr_data_g();
        let theta = Distribution::new(vec![0.5, 0.5, 0.0]).unwrap();
        let post = posterior(&theta, &g, 0).unwrap();
        for (x, &e) in [2.0 / 3.0, 1.0 / 3.0, 0.0].iter().enumerate() {
            assert_close(post.get(x), e, 1e-12);
        }
    }

    #[test]
    fn posterior_infeasible_theta_errors() {
        let reg = registry_with(Mechanism::identity(3));
        let records = vec![ObservationRecord::single(0, 0, "identity")];
        let g = build_g(&records, &reg).unwrap();
        let theta = Distribution::point_mass(3, 1);
        assert!(matches!(
            posterior(&theta, &g, 0),
            Err(LikelihoodError::InfeasibleTheta { user: 0 })
        ));
    }

    #[test]
    fn q_value_single_observation_closed_form() {
        let mech = krr(3, LN2).unwrap();
        let id = mech.id().to_string();
        let reg = registry_with(mech);
        let records = vec![ObservationRecord::single(0, 0, &id)];
        let g = build_g(&records, &reg).unwrap();
        let uniform = Distribution::uniform(3);
        // psi = (1/2, 1/4, 1/4), K = -(3/2) ln 2.
        let expected = (1.0f64 / 3.0).ln() - 1.5 * LN2;
        assert_close(q_value(&uniform, &uniform, &g).unwrap(), expected, 1e-12);
    }

    #[test]
    fn q_plus_h_equals_log_likelihood_at_the_same_point() {
        let g = krr_data_g();
        for weights in [
            vec![1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
            vec![0.6, 0.3, 0.1],
            vec![0.05, 0.9, 0.05],
        ] {
            let theta = Distribution::new(weights).unwrap();
            let q = q_value(&theta, &theta, &g).unwrap();
            let mut h = 0.0;
            for i in 0..g.user_count() {
                let post = posterior(&theta, &g, i).unwrap();
                for &p in post.weights() {
                    if p > 0.0 {
                        h -= p * p.ln();
                    }
                }
            }
            assert_close(q + h, log_likelihood(&theta, &g).unwrap(), 1e-12);
        }
    }

    #[test]
    fn q_value_negative_infinity_when_support_is_dropped() {
        let g = krr_data_g();
        let uniform = Distribution::uniform(3);
        let boundary = Distribution::point_mass(3, 1);
        assert_eq!(q_value(&boundary, &uniform, &g).unwrap(), f64::NEG_INFINITY);
    }
}

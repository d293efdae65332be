//! The sample -> obfuscate -> estimate -> measure pipeline.
//!
//! Every (epsilon, repetition) cell runs with a seed derived from the global
//! seed and the cell coordinates, so a whole run is reproducible while cells
//! stay statistically independent.

use ibu_core::analysis::{kl_divergence, total_variation, AnalysisError, GroundMetric};
use ibu_core::estimators::{
    em_estimate_weighted, ibu_estimate, inv_estimate, rappor_inv_estimate, EmConfig, Empirical,
    EstimatorError, InvMode,
};
use ibu_core::likelihood::{LikelihoodError, OutputsMatrix};
use ibu_core::mechanisms::{
    krr, planar_geometric, rappor_keep_prob, sample_output, truncated_geometric, BitVector,
    Mechanism, MechanismError,
};
use ibu_core::simplex::{sample_categorical, Distribution, SimplexError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::config::{
    fnv1a, EstimatorKind, ExperimentConfig, MechanismSpec, MetricKind, SourceSpec,
};
use crate::gowalla::{ingest_gowalla, IngestError, IngestReport};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Mechanism(#[from] MechanismError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Likelihood(#[from] LikelihoodError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Simplex(#[from] SimplexError),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub estimator: String,
    pub metric: String,
    pub value: f64,
}

/// Results of one (epsilon, repetition) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub epsilon: f64,
    pub repetition: usize,
    /// Estimate weights per estimator, plus the `noisy` baseline when the
    /// observable space coincides with the input space.
    pub estimates: Vec<(String, Vec<f64>)>,
    pub metrics: Vec<MetricRow>,
    /// Per-estimator failures; the run continues past them.
    pub errors: Vec<String>,
    pub em_iterations: Option<(usize, bool)>,
    pub em_log_likelihoods: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub cells: Vec<CellResult>,
    pub source_weights: Vec<f64>,
    pub grid_dims: Option<(usize, usize)>,
    pub ingest_report: Option<IngestReport>,
}

/// Binomial weights over `{0..space-1}`: `space - 1` trials at success
/// probability 1/2, via the ratio recurrence.
pub fn binomial_weights(space: usize) -> Vec<f64> {
    assert!(space >= 1);
    let n = space - 1;
    let mut weights = vec![0.0; space];
    let mut current = 0.5f64.powi(n as i32);
    for (k, w) in weights.iter_mut().enumerate() {
        *w = current;
        if k < n {
            current = current * (n - k) as f64 / (k + 1) as f64;
        }
    }
    let sum: f64 = weights.iter().sum();
    for w in weights.iter_mut() {
        *w /= sum;
    }
    weights
}

/// Resolve the configured source into a distribution (plus the ingest
/// report for file-backed sources).
pub fn build_source(
    cfg: &ExperimentConfig,
) -> Result<(Distribution, Option<IngestReport>), RunError> {
    match &cfg.source {
        SourceSpec::Binomial { space_size } => {
            if *space_size < 1 {
                return Err(RunError::Invalid("space_size must be at least 1".into()));
            }
            Ok((Distribution::new(binomial_weights(*space_size))?, None))
        }
        SourceSpec::UniformInterval { space_size, lo, hi } => {
            let mut weights = vec![0.0; *space_size];
            let width = (hi - lo + 1) as f64;
            for w in weights.iter_mut().take(hi + 1).skip(*lo) {
                *w = 1.0 / width;
            }
            Ok((Distribution::new(weights)?, None))
        }
        SourceSpec::Custom { weights } => Ok((Distribution::new(weights.clone())?, None)),
        SourceSpec::Gowalla { path, lat_col, lon_col } => {
            let grid = cfg
                .grid
                .as_ref()
                .ok_or_else(|| RunError::Invalid("gowalla source needs a grid".into()))?;
            let (empirical, report) = ingest_gowalla(path, grid, *lat_col, *lon_col)?;
            Ok((Distribution::new(empirical.frequencies())?, Some(report)))
        }
    }
}

/// Build the explicit mechanism table for one epsilon. RAPPOR returns
/// `None`: the pipeline uses its lazy per-observation path instead of the
/// `2^m`-column table.
pub fn build_table_mechanism(
    cfg: &ExperimentConfig,
    space: usize,
    epsilon: f64,
) -> Result<Option<Mechanism>, RunError> {
    let mech = match cfg.mechanism {
        MechanismSpec::Krr => Some(krr(space, epsilon)?),
        MechanismSpec::TruncatedGeometric => {
            Some(truncated_geometric(0, space as i64 - 1, epsilon)?)
        }
        MechanismSpec::PlanarGeometric => {
            let grid = cfg
                .grid
                .as_ref()
                .ok_or_else(|| RunError::Invalid("planar mechanism needs a grid".into()))?;
            if grid.cell_count() != space {
                return Err(RunError::Invalid(format!(
                    "grid has {} cells but the source space has {space}",
                    grid.cell_count()
                )));
            }
            Some(planar_geometric(grid, epsilon, cfg.planar_tail_tol)?)
        }
        MechanismSpec::Identity => Some(Mechanism::identity(space)),
        MechanismSpec::Rappor => None,
    };
    Ok(mech)
}

/// Seed for one (epsilon, repetition) cell.
pub fn derive_cell_seed(seed: u64, epsilon: f64, repetition: usize) -> u64 {
    let mut bytes = Vec::with_capacity(16);
    bytes.extend_from_slice(&epsilon.to_bits().to_le_bytes());
    bytes.extend_from_slice(&(repetition as u64).to_le_bytes());
    seed.wrapping_add(fnv1a(&bytes))
}

fn metric_rows(
    estimator: &str,
    estimate: &Distribution,
    source: &Distribution,
    metrics: &[MetricKind],
    ground: Option<&GroundMetric>,
    rows: &mut Vec<MetricRow>,
    errors: &mut Vec<String>,
) {
    for metric in metrics {
        let value = match metric {
            MetricKind::Tv => total_variation(estimate, source),
            MetricKind::Kl => kl_divergence(source, estimate),
            MetricKind::Emd => match ground {
                Some(g) => ibu_core::analysis::emd(estimate, source, g),
                None => {
                    errors.push(format!("{estimator}/emd: no ground metric available"));
                    continue;
                }
            },
        };
        match value {
            Ok(v) if v.is_finite() => rows.push(MetricRow {
                estimator: estimator.to_string(),
                metric: metric.name().to_string(),
                value: v,
            }),
            Ok(v) => errors.push(format!("{estimator}/{}: non-finite value {v}", metric.name())),
            Err(e) => errors.push(format!("{estimator}/{}: {e}", metric.name())),
        }
    }
}

fn run_table_cell(
    cfg: &ExperimentConfig,
    source: &Distribution,
    mech: &Mechanism,
    epsilon: f64,
    repetition: usize,
    ground: Option<&GroundMetric>,
) -> Result<CellResult, RunError> {
    let seed = derive_cell_seed(cfg.seed, epsilon, repetition);
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let inputs = sample_categorical(source, &mut rng, cfg.samples);
    let mut outputs = Vec::with_capacity(inputs.len());
    for &x in &inputs {
        outputs.push(sample_output(mech, x, &mut rng)?);
    }
    let q = Empirical::from_observations(mech.output_count(), outputs)?;

    let mut estimates = Vec::new();
    let mut metrics = Vec::new();
    let mut errors = Vec::new();
    let mut em_iterations = None;
    let mut em_log_likelihoods = Vec::new();

    // Noisy baseline: the raw observed frequencies read back onto the input
    // space, meaningful only when the two spaces coincide.
    if mech.is_square() {
        let noisy = Distribution::new(q.frequencies())?;
        metric_rows("noisy", &noisy, source, &cfg.metrics, ground, &mut metrics, &mut errors);
        estimates.push(("noisy".to_string(), noisy.weights().to_vec()));
    }

    for estimator in &cfg.estimators {
        match estimator {
            EstimatorKind::Em => {
                let em_cfg = EmConfig {
                    delta: cfg.em_delta,
                    max_iters: cfg.em_max_iters,
                    theta0: None,
                };
                match ibu_estimate(mech, &q, &em_cfg) {
                    Ok(trace) => {
                        metric_rows(
                            "em",
                            &trace.estimate,
                            source,
                            &cfg.metrics,
                            ground,
                            &mut metrics,
                            &mut errors,
                        );
                        estimates.push(("em".to_string(), trace.estimate.weights().to_vec()));
                        em_iterations = Some((trace.iterations, trace.converged));
                        em_log_likelihoods = trace.log_likelihoods;
                    }
                    Err(e) => errors.push(format!("em: {e}")),
                }
            }
            EstimatorKind::InvN | EstimatorKind::InvP => {
                let (name, mode) = match estimator {
                    EstimatorKind::InvN => ("invn", InvMode::TruncateNormalize),
                    _ => ("invp", InvMode::Project),
                };
                match inv_estimate(&q, mech, mode) {
                    Ok(est) => {
                        metric_rows(
                            name,
                            &est,
                            source,
                            &cfg.metrics,
                            ground,
                            &mut metrics,
                            &mut errors,
                        );
                        estimates.push((name.to_string(), est.weights().to_vec()));
                    }
                    Err(e) => errors.push(format!("{name}: {e}")),
                }
            }
        }
    }

    Ok(CellResult {
        epsilon,
        repetition,
        estimates,
        metrics,
        errors,
        em_iterations,
        em_log_likelihoods,
    })
}

/// Per-observation likelihood column for a reported RAPPOR mask: entry `x`
/// is the probability of the mask when the true input is `x`.
fn rappor_column(mask: u32, m: usize, ln_keep: f64, ln_flip: f64) -> Vec<f64> {
    // Log-probability as if the one-hot encoding were all zeros.
    let mut base = 0.0;
    for j in 0..m {
        base += if mask >> j & 1 == 1 { ln_flip } else { ln_keep };
    }
    (0..m)
        .map(|x| {
            let adjusted = if mask >> x & 1 == 1 {
                base - ln_flip + ln_keep
            } else {
                base - ln_keep + ln_flip
            };
            adjusted.exp()
        })
        .collect()
}

fn run_rappor_cell(
    cfg: &ExperimentConfig,
    source: &Distribution,
    epsilon: f64,
    repetition: usize,
    ground: Option<&GroundMetric>,
) -> Result<CellResult, RunError> {
    let m = source.len();
    let keep = rappor_keep_prob(epsilon);
    let flip = 1.0 - keep;
    let seed = derive_cell_seed(cfg.seed, epsilon, repetition);
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let inputs = sample_categorical(source, &mut rng, cfg.samples);

    let mut observed = Vec::with_capacity(inputs.len());
    let mut grouped: std::collections::BTreeMap<u32, u64> = std::collections::BTreeMap::new();
    for &x in &inputs {
        let mut mask = 0u32;
        for j in 0..m {
            let mut bit = j == x;
            if rng.gen::<f64>() < flip {
                bit = !bit;
            }
            if bit {
                mask |= 1 << j;
            }
        }
        *grouped.entry(mask).or_insert(0) += 1;
        observed.push(BitVector::from_output_index(m, mask as usize));
    }

    let mut estimates = Vec::new();
    let mut metrics = Vec::new();
    let mut errors = Vec::new();
    let mut em_iterations = None;
    let mut em_log_likelihoods = Vec::new();

    for estimator in &cfg.estimators {
        match estimator {
            EstimatorKind::Em => {
                // Lazy g path: one weighted column per distinct observed
                // mask instead of the 2^m mechanism table.
                let ln_keep = keep.ln();
                let ln_flip = flip.ln();
                let mut columns = Vec::with_capacity(grouped.len());
                let mut weights = Vec::with_capacity(grouped.len());
                for (&mask, &count) in &grouped {
                    columns.push(rappor_column(mask, m, ln_keep, ln_flip));
                    weights.push(count as f64);
                }
                let g = OutputsMatrix::from_columns(m, columns)?;
                let em_cfg = EmConfig {
                    delta: cfg.em_delta,
                    max_iters: cfg.em_max_iters,
                    theta0: None,
                };
                match em_estimate_weighted(&g, &weights, &em_cfg) {
                    Ok(trace) => {
                        metric_rows(
                            "em",
                            &trace.estimate,
                            source,
                            &cfg.metrics,
                            ground,
                            &mut metrics,
                            &mut errors,
                        );
                        estimates.push(("em".to_string(), trace.estimate.weights().to_vec()));
                        em_iterations = Some((trace.iterations, trace.converged));
                        em_log_likelihoods = trace.log_likelihoods;
                    }
                    Err(e) => errors.push(format!("em: {e}")),
                }
            }
            EstimatorKind::InvN | EstimatorKind::InvP => {
                let (name, mode) = match estimator {
                    EstimatorKind::InvN => ("invn", InvMode::TruncateNormalize),
                    _ => ("invp", InvMode::Project),
                };
                match rappor_inv_estimate(&observed, epsilon, mode) {
                    Ok(est) => {
                        metric_rows(
                            name,
                            &est,
                            source,
                            &cfg.metrics,
                            ground,
                            &mut metrics,
                            &mut errors,
                        );
                        estimates.push((name.to_string(), est.weights().to_vec()));
                    }
                    Err(e) => errors.push(format!("{name}: {e}")),
                }
            }
        }
    }

    Ok(CellResult {
        epsilon,
        repetition,
        estimates,
        metrics,
        errors,
        em_iterations,
        em_log_likelihoods,
    })
}

/// Run the full (epsilon x repetition) sweep described by the config.
/// Deterministic in the config (including its seed).
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunResult, RunError> {
    cfg.validate().map_err(|e| RunError::Invalid(e.to_string()))?;
    let (source, ingest_report) = build_source(cfg)?;
    let space = source.len();

    let ground = if cfg.metrics.contains(&MetricKind::Emd) {
        Some(match &cfg.grid {
            Some(grid) => GroundMetric::from_grid(grid),
            None => GroundMetric::line(space),
        })
    } else {
        None
    };

    let mut cells = Vec::new();
    for &epsilon in &cfg.epsilons {
        let table_mech = build_table_mechanism(cfg, space, epsilon)?;
        for repetition in 0..cfg.repetitions {
            let cell = match &table_mech {
                Some(mech) => {
                    run_table_cell(cfg, &source, mech, epsilon, repetition, ground.as_ref())?
                }
                None => run_rappor_cell(cfg, &source, epsilon, repetition, ground.as_ref())?,
            };
            cells.push(cell);
        }
    }

    Ok(RunResult {
        cells,
        source_weights: source.weights().to_vec(),
        grid_dims: cfg.grid.as_ref().map(|g| (g.rows, g.cols)),
        ingest_report,
    })
}

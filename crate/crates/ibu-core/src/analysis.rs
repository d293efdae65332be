//! Post-hoc analysis of estimation problems: MLE-uniqueness checking,
//! statistical distances (total variation, KL divergence, earth mover's
//! distance), the method-of-types tail bound, and likelihood-surface
//! sampling for three-state problems.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::likelihood::{log_likelihood, OutputsMatrix};
use crate::mechanisms::Grid;
use crate::simplex::Distribution;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("distributions have different lengths: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("invalid ground metric: {0}")]
    InvalidGroundMetric(String),
    #[error("ground metric is {ground}x{ground} but distributions have length {dist}")]
    GroundSizeMismatch { ground: usize, dist: usize },
    #[error("masses differ by {0}, beyond tolerance 1e-9")]
    MassMismatch(f64),
    #[error("transport solver exceeded its augmentation budget")]
    TransportStall,
    #[error("likelihood surface needs a 3-element input space, got {0}")]
    UnsupportedDimension(usize),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Outcome of the MLE-uniqueness check.
///
/// The check deduplicates identical columns of `G`, appends the all-ones
/// column, and compares the numerical rank of the result against the input
/// space size: full rank means no two distinct distributions induce the same
/// output probabilities, so the MLE is unique. This uses the full
/// deduplicated column set, the maximal choice of column subset; a rank
/// witness for it settles the question for every subset.
#[derive(Debug, Clone)]
pub struct UniquenessReport {
    pub unique: bool,
    pub rank: usize,
    pub required_rank: usize,
    /// Two distinct distributions with identical output probabilities,
    /// present exactly when the MLE is not unique.
    pub witness: Option<(Distribution, Distribution)>,
}

/// Check whether the observed data admits a unique MLE, thresholding
/// singular values at `tol` relative to the largest.
pub fn check_uniqueness(g: &OutputsMatrix, tol: f64) -> UniquenessReport {
    let m = g.space_size();

    // Deduplicate bitwise-identical columns.
    let mut seen = std::collections::BTreeSet::new();
    let mut distinct: Vec<&[f64]> = Vec::new();
    for col in g.columns() {
        let key: Vec<u64> = col.iter().map(|v| v.to_bits()).collect();
        if seen.insert(key) {
            distinct.push(col);
        }
    }

    // Columns of G(I') plus the all-ones column.
    let ncols = distinct.len() + 1;
    let matrix = DMatrix::from_fn(m, ncols, |r, c| {
        if c < distinct.len() {
            distinct[c][r]
        } else {
            1.0
        }
    });
    let svd = matrix.clone().svd(true, false);
    let sigma = &svd.singular_values;
    let sigma_max = sigma.iter().cloned().fold(0.0f64, f64::max);
    let threshold = tol * sigma_max;
    let rank = sigma.iter().filter(|&&s| s > threshold).count();
    let unique = rank == m;

    let witness = if unique {
        None
    } else {
        let u = svd.u.as_ref().expect("svd computed with u");
        // Basis of the numerical column space.
        let range: Vec<DVector<f64>> = (0..sigma.len())
            .filter(|&i| sigma[i] > threshold)
            .map(|i| u.column(i).into_owned())
            .collect();
        // Complete the basis: the standard vector with the largest residual
        // after removing its range components is a left null vector.
        let mut best: Option<DVector<f64>> = None;
        let mut best_norm = 0.0;
        for j in 0..m {
            let mut v = DVector::zeros(m);
            v[j] = 1.0;
            for b in &range {
                let coeff = b.dot(&v);
                v -= b * coeff;
            }
            let norm = v.norm();
            if norm > best_norm {
                best_norm = norm;
                best = Some(v);
            }
        }
        let v = best.expect("rank-deficient matrix has a null direction");
        let v = &v / v.norm();
        let max_abs = v.iter().cloned().fold(0.0f64, |a, x| a.max(x.abs()));
        let scale = 0.5 / (m as f64 * max_abs);
        let theta: Vec<f64> = v.iter().map(|&x| 1.0 / m as f64 + scale * x).collect();
        let phi: Vec<f64> = v.iter().map(|&x| 1.0 / m as f64 - scale * x).collect();
        Some((
            Distribution::new(theta).expect("witness stays inside the simplex"),
            Distribution::new(phi).expect("witness stays inside the simplex"),
        ))
    };

    UniquenessReport { unique, rank, required_rank: m, witness }
}

fn check_lengths(p: &Distribution, q: &Distribution) -> Result<(), AnalysisError> {
    if p.len() != q.len() {
        return Err(AnalysisError::LengthMismatch(p.len(), q.len()));
    }
    Ok(())
}

/// Total variation distance: half the L1 distance.
pub fn total_variation(p: &Distribution, q: &Distribution) -> Result<f64, AnalysisError> {
    check_lengths(p, q)?;
    Ok(0.5 * p.weights().iter().zip(q.weights()).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

/// Kullback-Leibler divergence `D(p || q)` in nats, with the conventions
/// `0 ln(0/q) = 0` and `p > 0, q = 0 => +inf`.
pub fn kl_divergence(p: &Distribution, q: &Distribution) -> Result<f64, AnalysisError> {
    check_lengths(p, q)?;
    let mut total = 0.0;
    for (&a, &b) in p.weights().iter().zip(q.weights()) {
        if a > 0.0 {
            if b <= 0.0 {
                return Ok(f64::INFINITY);
            }
            total += a * (a / b).ln();
        }
    }
    Ok(total)
}

/// A symmetric non-negative distance table with zero diagonal, the ground
/// metric for earth mover's distance.
#[derive(Debug, Clone)]
pub struct GroundMetric {
    table: Vec<Vec<f64>>,
}

impl GroundMetric {
    pub fn new(table: Vec<Vec<f64>>) -> Result<Self, AnalysisError> {
        let n = table.len();
        if n == 0 {
            return Err(AnalysisError::InvalidGroundMetric("empty table".into()));
        }
        for (i, row) in table.iter().enumerate() {
            if row.len() != n {
                return Err(AnalysisError::InvalidGroundMetric("table is not square".into()));
            }
            if table[i][i] != 0.0 {
                return Err(AnalysisError::InvalidGroundMetric("diagonal must be zero".into()));
            }
            for (j, &d) in row.iter().enumerate() {
                if !d.is_finite() || d < 0.0 {
                    return Err(AnalysisError::InvalidGroundMetric(format!(
                        "entry ({i}, {j}) = {d} is not a distance"
                    )));
                }
                if (d - table[j][i]).abs() > 1e-12 {
                    return Err(AnalysisError::InvalidGroundMetric("table is not symmetric".into()));
                }
            }
        }
        Ok(Self { table })
    }

    /// Unit-spaced points on a line: `d(i, j) = |i - j|` in index units.
    pub fn line(len: usize) -> Self {
        let table = (0..len)
            .map(|i| (0..len).map(|j| (i as f64 - j as f64).abs()).collect())
            .collect();
        Self { table }
    }

    /// Euclidean distances in km between the cell centers of a grid.
    pub fn from_grid(grid: &Grid) -> Self {
        let n = grid.cell_count();
        let table = (0..n)
            .map(|a| (0..n).map(|b| grid.center_distance_km(a, b)).collect())
            .collect();
        Self { table }
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    pub fn distance(&self, a: usize, b: usize) -> f64 {
        self.table[a][b]
    }
}

/// Exact earth mover's distance between `p` and `q` under `ground`, solved
/// as a transportation problem by successive shortest paths with potentials
/// on the bipartite support graph.
pub fn emd(p: &Distribution, q: &Distribution, ground: &GroundMetric) -> Result<f64, AnalysisError> {
    check_lengths(p, q)?;
    if ground.len() != p.len() {
        return Err(AnalysisError::GroundSizeMismatch { ground: ground.len(), dist: p.len() });
    }
    let mass_gap =
        (p.weights().iter().sum::<f64>() - q.weights().iter().sum::<f64>()).abs();
    if mass_gap > 1e-9 {
        return Err(AnalysisError::MassMismatch(mass_gap));
    }

    const EXHAUSTED: f64 = 1e-15;
    let sources: Vec<usize> =
        (0..p.len()).filter(|&i| p.get(i) > EXHAUSTED).collect();
    let sinks: Vec<usize> = (0..q.len()).filter(|&j| q.get(j) > EXHAUSTED).collect();
    let ns = sources.len();
    let nt = sinks.len();
    let mut supply: Vec<f64> = sources.iter().map(|&i| p.get(i)).collect();
    let mut demand: Vec<f64> = sinks.iter().map(|&j| q.get(j)).collect();
    let cost: Vec<Vec<f64>> = sources
        .iter()
        .map(|&i| sinks.iter().map(|&j| ground.distance(i, j)).collect())
        .collect();

    // Node ids: 0..ns are sources, ns..ns+nt are sinks.
    let nodes = ns + nt;
    let mut flow = vec![vec![0.0f64; nt]; ns];
    let mut potential = vec![0.0f64; nodes];
    let mut total_cost = 0.0;
    let augmentation_budget = 16 * nodes + 256;
    let mut augmentations = 0usize;

    loop {
        let active_supply: f64 = supply.iter().sum();
        let active_demand: f64 = demand.iter().sum();
        if active_supply <= 1e-12 || active_demand <= 1e-12 {
            break;
        }
        augmentations += 1;
        if augmentations > augmentation_budget {
            return Err(AnalysisError::TransportStall);
        }

        // Dijkstra over the residual graph from all sources with supply left.
        let mut dist = vec![f64::INFINITY; nodes];
        let mut parent = vec![usize::MAX; nodes];
        let mut done = vec![false; nodes];
        for (s, &rem) in supply.iter().enumerate() {
            if rem > EXHAUSTED {
                dist[s] = 0.0;
            }
        }
        for _ in 0..nodes {
            let mut u = usize::MAX;
            let mut best = f64::INFINITY;
            for v in 0..nodes {
                if !done[v] && dist[v] < best {
                    best = dist[v];
                    u = v;
                }
            }
            if u == usize::MAX {
                break;
            }
            done[u] = true;
            if u < ns {
                // Forward arcs to every sink.
                for (t, &c) in cost[u].iter().enumerate() {
                    let v = ns + t;
                    if done[v] {
                        continue;
                    }
                    let rc = c + potential[u] - potential[v];
                    if dist[u] + rc < dist[v] - 1e-18 {
                        dist[v] = dist[u] + rc;
                        parent[v] = u;
                    }
                }
            } else {
                // Backward arcs along existing flow.
                let t = u - ns;
                for s in 0..ns {
                    if done[s] || flow[s][t] <= EXHAUSTED {
                        continue;
                    }
                    let rc = -cost[s][t] + potential[u] - potential[s];
                    if dist[u] + rc < dist[s] - 1e-18 {
                        dist[s] = dist[u] + rc;
                        parent[s] = u;
                    }
                }
            }
        }

        // Cheapest reachable sink with remaining demand.
        let mut target = usize::MAX;
        let mut target_dist = f64::INFINITY;
        for (t, &rem) in demand.iter().enumerate() {
            if rem > EXHAUSTED && dist[ns + t] < target_dist {
                target_dist = dist[ns + t];
                target = ns + t;
            }
        }
        if target == usize::MAX {
            break;
        }

        // Bottleneck along the augmenting path.
        let mut bottleneck = demand[target - ns];
        let mut node = target;
        loop {
            let prev = parent[node];
            if prev == usize::MAX {
                bottleneck = bottleneck.min(supply[node]);
                break;
            }
            if prev >= ns {
                // Backward arc sink(prev) -> source(node).
                bottleneck = bottleneck.min(flow[node][prev - ns]);
            }
            node = prev;
        }

        // Apply the augmentation.
        let mut node = target;
        loop {
            let prev = parent[node];
            if prev == usize::MAX {
                supply[node] -= bottleneck;
                break;
            }
            if prev < ns {
                flow[prev][node - ns] += bottleneck;
                total_cost += bottleneck * cost[prev][node - ns];
            } else {
                flow[node][prev - ns] -= bottleneck;
                total_cost -= bottleneck * cost[node][prev - ns];
            }
            node = prev;
        }
        demand[target - ns] -= bottleneck;

        for v in 0..nodes {
            if dist[v].is_finite() {
                potential[v] += dist[v].min(target_dist);
            } else {
                potential[v] += target_dist;
            }
        }
    }

    Ok(total_cost)
}

/// Method-of-types tail bound `(1 + k)^|Z| * 2^(-k delta)` on the
/// probability that the empirical distribution of `k` draws deviates from
/// its source by more than `delta` in base-2 KL divergence.
pub fn types_bound(k: usize, z_size: usize, delta: f64) -> f64 {
    assert!(k >= 1 && z_size >= 1 && delta > 0.0, "all arguments must be positive");
    let exponent = z_size as f64 * (1.0 + k as f64).log2() - k as f64 * delta;
    exponent.exp2()
}

/// One sampled point of the likelihood surface over a three-element space,
/// in the `(theta1, theta3)` coordinates with `theta2 = 1 - theta1 - theta3`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfacePoint {
    pub theta1: f64,
    pub theta3: f64,
    /// `f64::NEG_INFINITY` marks infeasible cells.
    pub log_likelihood: f64,
}

/// Sample the log-likelihood over the triangle
/// `{theta1, theta3 >= 0, theta1 + theta3 <= 1}` on a `resolution` x
/// `resolution` grid of axis points.
pub fn likelihood_surface(
    g: &OutputsMatrix,
    resolution: usize,
) -> Result<Vec<SurfacePoint>, AnalysisError> {
    if g.space_size() != 3 {
        return Err(AnalysisError::UnsupportedDimension(g.space_size()));
    }
    assert!(resolution >= 2, "resolution must be at least 2");
    let step = 1.0 / (resolution - 1) as f64;
    let mut points = Vec::new();
    for i in 0..resolution {
        let theta1 = i as f64 * step;
        for j in 0..resolution {
            let theta3 = j as f64 * step;
            let theta2 = 1.0 - theta1 - theta3;
            if theta2 < -1e-12 {
                continue;
            }
            let theta = Distribution::new(vec![theta1, theta2.max(0.0), theta3])
                .expect("grid point lies on the simplex");
            let value = log_likelihood(&theta, g).expect("dimensions checked above");
            points.push(SurfacePoint { theta1, theta3, log_likelihood: value });
        }
    }
    Ok(points)
}

/// Write surface samples as CSV with header `theta1,theta3,log_likelihood`;
/// infeasible cells print `-inf`.
pub fn write_surface_csv<W: Write>(points: &[SurfacePoint], w: &mut W) -> Result<(), AnalysisError> {
    writeln!(w, "theta1,theta3,log_likelihood")?;
    for p in points {
        if p.log_likelihood == f64::NEG_INFINITY {
            writeln!(w, "{},{},-inf", p.theta1, p.theta3)?;
        } else {
            writeln!(w, "{},{},{}", p.theta1, p.theta3, p.log_likelihood)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::likelihood::OutputsMatrix;
    use crate::mechanisms::{krr, truncated_geometric, Mechanism};

    const LN2: f64 = std::f64::consts::LN_2;

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

    fn matrix_from_all_columns(mech: &Mechanism) -> OutputsMatrix {
        let columns: Vec<Vec<f64>> = (0..mech.output_count()).map(|z| mech.column(z)).collect();
        OutputsMatrix::from_columns(mech.input_count(), columns).unwrap()
    }

    fn dist(weights: &[f64]) -> Distribution {
        Distribution::new(weights.to_vec()).unwrap()
    }

    #[test]
    fn krr_with_all_outputs_is_unique() {
        let g = matrix_from_all_columns(&krr(3, LN2).unwrap());
        let report = check_uniqueness(&g, 1e-9);
        assert!(report.unique);
        assert_eq!(report.rank, 3);
        assert!(report.witness.is_none());
    }

    #[test]
    fn ambiguous_mechanism_is_not_unique_and_the_witness_checks_out() {
        let mech = ambiguous_mechanism();
        let g = matrix_from_all_columns(&mech);
        let report = check_uniqueness(&g, 1e-9);
        assert!(!report.unique);
        assert_eq!(report.rank, 2);
        let (theta, phi) = report.witness.expect("non-unique report carries a witness");
        // The null direction keeps theta1 = theta3 symmetry: components 0
        // and 2 of the difference are equal.
        let diff: Vec<f64> =
            theta.weights().iter().zip(phi.weights()).map(|(a, b)| a - b).collect();
        assert!((diff[0] - diff[2]).abs() < 1e-9);
        assert!(total_variation(&theta, &phi).unwrap() > 0.0);
        // (theta - phi) G = 0 within 10 * tol.
        for z in 0..3 {
            let col = mech.column(z);
            let dot: f64 = diff.iter().zip(&col).map(|(d, c)| d * c).sum();
            assert!(dot.abs() <= 1e-8, "residual {dot}");
        }
    }

    #[test]
    fn single_observed_output_is_never_unique_for_three_inputs() {
        let mech = krr(3, LN2).unwrap();
        let g = OutputsMatrix::from_columns(3, vec![mech.column(1)]).unwrap();
        let report = check_uniqueness(&g, 1e-9);
        assert!(!report.unique);
        assert!(report.rank <= 2);
        assert!(report.witness.is_some());
    }

    #[test]
    fn truncated_geometric_with_all_outputs_is_unique() {
        let g = matrix_from_all_columns(&truncated_geometric(0, 7, 0.6).unwrap());
        assert!(check_uniqueness(&g, 1e-9).unique);
    }

    #[test]
    fn total_variation_examples() {
        assert_eq!(total_variation(&dist(&[1.0, 0.0, 0.0]), &dist(&[0.0, 1.0, 0.0])).unwrap(), 1.0);
        let p = dist(&[0.2, 0.5, 0.3]);
        assert_eq!(total_variation(&p, &p).unwrap(), 0.0);
        assert_eq!(total_variation(&dist(&[0.5, 0.5]), &dist(&[1.0, 0.0])).unwrap(), 0.5);
        assert!(total_variation(&dist(&[0.5, 0.5]), &dist(&[1.0, 0.0, 0.0])).is_err());
    }

    #[test]
    fn kl_divergence_examples() {
        let p = dist(&[0.3, 0.7]);
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
        assert!((kl_divergence(&dist(&[1.0, 0.0]), &dist(&[0.5, 0.5])).unwrap() - LN2).abs() < 1e-15);
        assert_eq!(kl_divergence(&dist(&[1.0, 0.0]), &dist(&[0.0, 1.0])).unwrap(), f64::INFINITY);
    }

    #[test]
    fn emd_moves_single_mass_by_its_distance() {
        let ground = GroundMetric::line(3);
        let d = emd(&dist(&[1.0, 0.0, 0.0]), &dist(&[0.0, 0.0, 1.0]), &ground).unwrap();
        assert!((d - 2.0).abs() < 1e-12);
        let p = dist(&[0.25, 0.5, 0.25]);
        assert!(emd(&p, &p, &ground).unwrap().abs() < 1e-12);
    }

    #[test]
    fn emd_splits_mass_on_the_line() {
        let ground = GroundMetric::line(3);
        let d = emd(&dist(&[0.5, 0.5, 0.0]), &dist(&[0.0, 0.5, 0.5]), &ground).unwrap();
        assert!((d - 1.0).abs() < 1e-12);
    }

    #[test]
    fn emd_on_a_grid_uses_km() {
        let grid = Grid::new(0.0, 2.0, 0.0, 2.0, 2, 2, 0.5).unwrap();
        let ground = GroundMetric::from_grid(&grid);
        let p = dist(&[1.0, 0.0, 0.0, 0.0]);
        let q = dist(&[0.0, 0.0, 0.0, 1.0]);
        // Diagonal neighbour at side 0.5 km.
        let d = emd(&p, &q, &ground).unwrap();
        assert!((d - 0.5 * 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn ground_metric_validation() {
        assert!(GroundMetric::new(vec![]).is_err());
        assert!(GroundMetric::new(vec![vec![0.0, 1.0], vec![2.0, 0.0]]).is_err());
        assert!(GroundMetric::new(vec![vec![1.0, 1.0], vec![1.0, 0.0]]).is_err());
        assert!(GroundMetric::new(vec![vec![0.0, -1.0], vec![-1.0, 0.0]]).is_err());
    }

    #[test]
    fn types_bound_closed_form_and_limits() {
        let b = types_bound(10, 2, 1.0);
        assert!((b - 121.0 / 1024.0).abs() < 1e-12);
        assert!(types_bound(100_000, 2, 1.0) < 1e-300);
        // Monotone decreasing once k is large enough for |Z| = 3, delta = 0.1.
        let mut prev = types_bound(50, 3, 0.1);
        for k in 51..500 {
            let next = types_bound(k, 3, 0.1);
            assert!(next < prev, "bound increased at k = {k}");
            prev = next;
        }
    }

    #[test]
    fn surface_peaks_at_the_boundary_for_the_rr_data() {
        let mech = krr(3, LN2).unwrap();
        let columns = vec![mech.column(0), mech.column(1), mech.column(1), mech.column(2)];
        let g = OutputsMatrix::from_columns(3, columns).unwrap();
        let points = likelihood_surface(&g, 101).unwrap();
        let best = points
            .iter()
            .max_by(|a, b| a.log_likelihood.partial_cmp(&b.log_likelihood).unwrap())
            .unwrap();
        assert_eq!((best.theta1, best.theta3), (0.0, 0.0));
        assert!((best.log_likelihood + 6.0 * LN2).abs() < 1e-12);
    }

    #[test]
    fn surface_ridge_along_the_symmetric_line_for_the_ambiguous_data() {
        let mech = ambiguous_mechanism();
        let g = matrix_from_all_columns(&mech);
        let points = likelihood_surface(&g, 101).unwrap();
        let max = points
            .iter()
            .map(|p| p.log_likelihood)
            .fold(f64::NEG_INFINITY, f64::max);
        let best = points.iter().find(|p| p.log_likelihood == max).unwrap();
        assert!((best.theta1 - best.theta3).abs() <= 0.011);
        // Every sampled cell on the symmetric line attains the maximum.
        let mut on_line = 0;
        for p in &points {
            if (p.theta1 - p.theta3).abs() < 1e-12 && p.theta1 + p.theta3 <= 1.0 {
                assert!(max - p.log_likelihood <= 1e-3, "off by {}", max - p.log_likelihood);
                on_line += 1;
            }
        }
        assert!(on_line >= 50);
    }

    #[test]
    fn surface_requires_three_states() {
        let g = matrix_from_all_columns(&krr(4, 1.0).unwrap());
        assert!(matches!(
            likelihood_surface(&g, 11),
            Err(AnalysisError::UnsupportedDimension(4))
        ));
    }

    #[test]
    fn surface_csv_marks_infeasible_cells() {
        let mech = Mechanism::identity(3);
        let g = OutputsMatrix::from_columns(3, vec![mech.column(0)]).unwrap();
        let points = likelihood_surface(&g, 3).unwrap();
        let mut buf = Vec::new();
        write_surface_csv(&points, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("theta1,theta3,log_likelihood\n"));
        assert!(text.contains("-inf"));
    }
}

//! Obfuscation mechanisms as explicit row-stochastic tables, plus the planar
//! grid geometry they act on.
//!
//! Inputs index rows, observables index columns; `probs[x][z]` is the
//! probability that input `x` is reported as observable `z`. Every
//! constructor validates row-stochasticity to within [`ROW_SUM_TOLERANCE`].

use rand::Rng;
use std::io::Write;
use thiserror::Error;

/// Absolute tolerance on every row sum at construction.
pub const ROW_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum MechanismError {
    #[error("mechanism needs at least {needed} inputs, got {got}")]
    SpaceTooSmall { needed: usize, got: usize },
    #[error("epsilon must be positive and finite, got {0}")]
    InvalidEpsilon(f64),
    #[error("range [{0}, {1}] is empty")]
    EmptyRange(i64, i64),
    #[error("tail tolerance must be in (0, 1e-6], got {0}")]
    InvalidTailTolerance(f64),
    #[error("input space of size {0} needs a 2^{0}-column table; the explicit-table cap is 20")]
    CapacityExceeded(usize),
    #[error("row {row} sums to {sum}, outside tolerance {ROW_SUM_TOLERANCE} of 1")]
    RowNotStochastic { row: usize, sum: f64 },
    #[error("entry ({row}, {col}) = {value} is outside [0, 1]")]
    EntryOutOfRange { row: usize, col: usize, value: f64 },
    #[error("table is empty or ragged")]
    MalformedTable,
    #[error("label count does not match table dimensions")]
    LabelMismatch,
    #[error("input index {index} out of range (mechanism has {inputs} inputs)")]
    InputOutOfRange { index: usize, inputs: usize },
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// A randomized obfuscation mechanism: a row-stochastic conditional
/// probability table from an input space to an observable space.
#[derive(Debug, Clone, PartialEq)]
pub struct Mechanism {
    id: String,
    input_labels: Vec<String>,
    output_labels: Vec<String>,
    probs: Vec<Vec<f64>>,
}

impl Mechanism {
    /// Build a mechanism from explicit rows, validating stochasticity.
    pub fn from_rows(
        id: impl Into<String>,
        input_labels: Vec<String>,
        output_labels: Vec<String>,
        probs: Vec<Vec<f64>>,
    ) -> Result<Self, MechanismError> {
        if probs.is_empty() || probs[0].is_empty() {
            return Err(MechanismError::MalformedTable);
        }
        let cols = probs[0].len();
        if probs.iter().any(|r| r.len() != cols) {
            return Err(MechanismError::MalformedTable);
        }
        if input_labels.len() != probs.len() || output_labels.len() != cols {
            return Err(MechanismError::LabelMismatch);
        }
        for (i, row) in probs.iter().enumerate() {
            let mut sum = 0.0;
            for (j, &p) in row.iter().enumerate() {
                if !p.is_finite() || !(0.0..=1.0 + 1e-12).contains(&p) {
                    return Err(MechanismError::EntryOutOfRange { row: i, col: j, value: p });
                }
                sum += p;
            }
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(MechanismError::RowNotStochastic { row: i, sum });
            }
        }
        Ok(Self { id: id.into(), input_labels, output_labels, probs })
    }

    /// Square mechanism from rows with numeric labels `0..k`.
    pub fn from_square_rows(id: impl Into<String>, probs: Vec<Vec<f64>>) -> Result<Self, MechanismError> {
        let n = probs.len();
        let labels: Vec<String> = (0..n).map(|i| i.to_string()).collect();
        Self::from_rows(id, labels.clone(), labels, probs)
    }

    /// The identity mechanism on `k` values (no obfuscation).
    pub fn identity(k: usize) -> Self {
        let probs = (0..k)
            .map(|i| {
                let mut row = vec![0.0; k];
                row[i] = 1.0;
                row
            })
            .collect();
        Self::from_square_rows("identity", probs).expect("identity table is stochastic")
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn input_count(&self) -> usize {
        self.probs.len()
    }

    pub fn output_count(&self) -> usize {
        self.probs[0].len()
    }

    pub fn input_labels(&self) -> &[String] {
        &self.input_labels
    }

    pub fn output_labels(&self) -> &[String] {
        &self.output_labels
    }

    pub fn prob(&self, x: usize, z: usize) -> f64 {
        self.probs[x][z]
    }

    pub fn row(&self, x: usize) -> &[f64] {
        &self.probs[x]
    }

    /// Column `z` as an owned vector: the likelihood of each input given
    /// that `z` was observed.
    pub fn column(&self, z: usize) -> Vec<f64> {
        self.probs.iter().map(|r| r[z]).collect()
    }

    pub fn is_square(&self) -> bool {
        self.input_count() == self.output_count()
    }

    /// Serialize the table as CSV: header of output labels, one row per input.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<(), MechanismError> {
        write!(w, "input")?;
        for label in &self.output_labels {
            write!(w, ",{label}")?;
        }
        writeln!(w)?;
        for (label, row) in self.input_labels.iter().zip(&self.probs) {
            write!(w, "{label}")?;
            for p in row {
                write!(w, ",{p}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

fn check_epsilon(epsilon: f64) -> Result<(), MechanismError> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(MechanismError::InvalidEpsilon(epsilon));
    }
    Ok(())
}

/// k-ary randomized response: keep the true value with probability
/// `e^eps / (k - 1 + e^eps)`, otherwise report one of the `k - 1` other
/// values uniformly.
pub fn krr(k: usize, epsilon: f64) -> Result<Mechanism, MechanismError> {
    if k < 2 {
        return Err(MechanismError::SpaceTooSmall { needed: 2, got: k });
    }
    check_epsilon(epsilon)?;
    let denom = k as f64 - 1.0 + epsilon.exp();
    let diag = epsilon.exp() / denom;
    let off = 1.0 / denom;
    let probs = (0..k)
        .map(|i| (0..k).map(|j| if i == j { diag } else { off }).collect())
        .collect();
    Mechanism::from_square_rows(format!("krr_{k}_{epsilon}"), probs)
}

/// Entry of the (infinite, integer-valued) geometric mechanism:
/// `P(z | y) = c * e^(-eps * |z - y|)` with `c = (1 - e^-eps) / (1 + e^-eps)`.
pub fn geometric_prob(y: i64, z: i64, epsilon: f64) -> f64 {
    assert!(epsilon > 0.0 && epsilon.is_finite(), "epsilon must be positive");
    let alpha = (-epsilon).exp();
    let c = (1.0 - alpha) / (1.0 + alpha);
    c * (-epsilon * (z - y).abs() as f64).exp()
}

/// Geometric mechanism truncated to the integer range `[r1, r2]`: interior
/// outputs keep the geometric weight, the two boundary outputs absorb the
/// tail mass beyond the range.
pub fn truncated_geometric(r1: i64, r2: i64, epsilon: f64) -> Result<Mechanism, MechanismError> {
    if r1 >= r2 {
        return Err(MechanismError::EmptyRange(r1, r2));
    }
    check_epsilon(epsilon)?;
    let alpha = (-epsilon).exp();
    let size = (r2 - r1 + 1) as usize;
    let c_boundary = 1.0 / (1.0 + alpha);
    let c_interior = (1.0 - alpha) / (1.0 + alpha);
    let probs: Vec<Vec<f64>> = (0..size)
        .map(|yi| {
            let y = r1 + yi as i64;
            (0..size)
                .map(|zi| {
                    let z = r1 + zi as i64;
                    let c = if z == r1 || z == r2 { c_boundary } else { c_interior };
                    c * (-epsilon * (z - y).abs() as f64).exp()
                })
                .collect()
        })
        .collect();
    let labels: Vec<String> = (0..size).map(|i| (r1 + i as i64).to_string()).collect();
    Mechanism::from_rows(format!("tgeom_{r1}_{r2}_{epsilon}"), labels.clone(), labels, probs)
}

/// A planar discretization for geographic data: a `rows x cols` grid of
/// square cells over a latitude/longitude bounding box. Cells are indexed
/// row-major from the `(lat_min, lon_min)` corner; distances between cell
/// centers are Euclidean in km with `cell_side_km` per lattice step.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
    pub rows: usize,
    pub cols: usize,
    pub cell_side_km: f64,
}

impl Grid {
    pub fn new(
        lat_min: f64,
        lat_max: f64,
        lon_min: f64,
        lon_max: f64,
        rows: usize,
        cols: usize,
        cell_side_km: f64,
    ) -> Result<Self, MechanismError> {
        for v in [lat_min, lat_max, lon_min, lon_max] {
            if !v.is_finite() {
                return Err(MechanismError::InvalidGrid("bounding box must be finite".into()));
            }
        }
        if lat_min >= lat_max || lon_min >= lon_max {
            return Err(MechanismError::InvalidGrid("bounding box is empty".into()));
        }
        if rows < 1 || cols < 1 {
            return Err(MechanismError::InvalidGrid("need at least one row and column".into()));
        }
        if !(cell_side_km > 0.0 && cell_side_km.is_finite()) {
            return Err(MechanismError::InvalidGrid("cell side must be positive".into()));
        }
        Ok(Self { lat_min, lat_max, lon_min, lon_max, rows, cols, cell_side_km })
    }

    pub fn cell_count(&self) -> usize {
        self.rows * self.cols
    }

    pub fn cell_index(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }

    pub fn row_col(&self, index: usize) -> (usize, usize) {
        (index / self.cols, index % self.cols)
    }

    /// Euclidean distance in km between two cell centers.
    pub fn center_distance_km(&self, a: usize, b: usize) -> f64 {
        let (ra, ca) = self.row_col(a);
        let (rb, cb) = self.row_col(b);
        let dr = ra as f64 - rb as f64;
        let dc = ca as f64 - cb as f64;
        self.cell_side_km * dr.hypot(dc)
    }
}

/// Map a coordinate to its enclosing cell, or `None` when outside the box.
/// Points exactly on the max boundary clamp to the last row/column.
pub fn locate_cell(grid: &Grid, lat: f64, lon: f64) -> Option<usize> {
    if !(lat >= grid.lat_min && lat <= grid.lat_max && lon >= grid.lon_min && lon <= grid.lon_max) {
        return None;
    }
    let dlat = (grid.lat_max - grid.lat_min) / grid.rows as f64;
    let dlon = (grid.lon_max - grid.lon_min) / grid.cols as f64;
    let row = (((lat - grid.lat_min) / dlat).floor() as usize).min(grid.rows - 1);
    let col = (((lon - grid.lon_min) / dlon).floor() as usize).min(grid.cols - 1);
    Some(grid.cell_index(row, col))
}

/// Geometric tail of the square-ring mass bound: sum over rings of Chebyshev
/// radius >= `from` of `8 r alpha^r`. Every lattice point on ring `r` lies at
/// Euclidean distance >= `r` steps, so this dominates the remaining mass.
fn ring_tail_bound(alpha: f64, from: usize) -> f64 {
    let m = from as f64;
    8.0 * alpha.powf(m) * (m - (m - 1.0) * alpha) / ((1.0 - alpha) * (1.0 - alpha))
}

/// Planar geometric mechanism over the cell centers of `grid`, truncated by
/// remapping every draw from the infinite lattice to its nearest in-grid
/// center (coordinate clamping). Entry `(x, z)` accumulates the mass of all
/// lattice points whose nearest center is `z` under
/// `lambda * e^(-eps * d2(x, .))`; summation windows expand until the
/// analytic ring tail falls below `tail_tol`, then rows are normalized.
pub fn planar_geometric(grid: &Grid, epsilon: f64, tail_tol: f64) -> Result<Mechanism, MechanismError> {
    check_epsilon(epsilon)?;
    if !(tail_tol > 0.0 && tail_tol <= 1e-6) {
        return Err(MechanismError::InvalidTailTolerance(tail_tol));
    }
    let s = grid.cell_side_km;
    let scale = epsilon * s;
    let alpha = (-scale).exp();

    // Normalizer over the whole lattice, to a relative tail below tail_tol/100.
    let mut z_norm = 1.0; // ring 0
    let mut ring = 1usize;
    loop {
        let mut ring_sum = 0.0;
        let r = ring as i64;
        for i in -r..=r {
            for j in [-r, r] {
                ring_sum += (-scale * ((i * i + j * j) as f64).sqrt()).exp();
            }
        }
        for j in (-r + 1)..=(r - 1) {
            for i in [-r, r] {
                ring_sum += (-scale * ((i * i + j * j) as f64).sqrt()).exp();
            }
        }
        z_norm += ring_sum;
        if ring_tail_bound(alpha, ring + 1) < z_norm * tail_tol / 100.0 {
            break;
        }
        ring += 1;
    }
    let lambda = 1.0 / z_norm;

    let n = grid.cell_count();
    let mut probs = vec![vec![0.0; n]; n];
    for x in 0..n {
        let (r0, c0) = grid.row_col(x);
        let row = &mut probs[x];
        row[x] = lambda; // offset (0, 0)
        let mut ring = 1usize;
        loop {
            let r = ring as i64;
            let mut visit = |i: i64, j: i64| {
                let tr = (r0 as i64 + i).clamp(0, grid.rows as i64 - 1) as usize;
                let tc = (c0 as i64 + j).clamp(0, grid.cols as i64 - 1) as usize;
                row[tr * grid.cols + tc] +=
                    lambda * (-scale * ((i * i + j * j) as f64).sqrt()).exp();
            };
            for i in -r..=r {
                visit(i, -r);
                visit(i, r);
            }
            for j in (-r + 1)..=(r - 1) {
                visit(-r, j);
                visit(r, j);
            }
            if lambda * ring_tail_bound(alpha, ring + 1) < tail_tol {
                break;
            }
            ring += 1;
        }
        let sum: f64 = row.iter().sum();
        for p in row.iter_mut() {
            *p /= sum;
        }
    }

    let labels: Vec<String> = (0..n)
        .map(|i| {
            let (r, c) = grid.row_col(i);
            format!("r{r}c{c}")
        })
        .collect();
    Mechanism::from_rows(
        format!("pgeom_{}x{}_{epsilon}", grid.rows, grid.cols),
        labels.clone(),
        labels,
        probs,
    )
}

/// A fixed-length bit array, the observable space of basic one-time RAPPOR.
/// Bit `j` answers "is the input `j`?"; outputs are indexed by the integer
/// whose `j`-th binary digit is bit `j`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct BitVector {
    bits: Vec<bool>,
}

impl BitVector {
    pub fn new(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    /// The one-hot encoding of input `x` in a space of size `len`.
    pub fn one_hot(len: usize, x: usize) -> Self {
        assert!(x < len, "one-hot index out of range");
        Self { bits: (0..len).map(|j| j == x).collect() }
    }

    pub fn from_output_index(len: usize, index: usize) -> Self {
        Self { bits: (0..len).map(|j| (index >> j) & 1 == 1).collect() }
    }

    pub fn output_index(&self) -> usize {
        self.bits
            .iter()
            .enumerate()
            .fold(0usize, |acc, (j, &b)| if b { acc | (1 << j) } else { acc })
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bit(&self, j: usize) -> bool {
        self.bits[j]
    }

    pub fn label(&self) -> String {
        self.bits.iter().map(|&b| if b { '1' } else { '0' }).collect()
    }
}

/// RAPPOR per-bit retention probability `e^(eps/2) / (1 + e^(eps/2))`.
pub fn rappor_keep_prob(epsilon: f64) -> f64 {
    let e = (epsilon / 2.0).exp();
    e / (1.0 + e)
}

/// Basic one-time RAPPOR over an input space of size `space_size`: the input
/// is one-hot encoded and every bit is independently kept with probability
/// `e^(eps/2) / (1 + e^(eps/2))`, flipped otherwise. The observable space is
/// all `2^space_size` bit vectors, so the explicit table is capped at
/// `space_size <= 20`.
pub fn rappor(space_size: usize, epsilon: f64) -> Result<Mechanism, MechanismError> {
    if space_size < 2 {
        return Err(MechanismError::SpaceTooSmall { needed: 2, got: space_size });
    }
    if space_size > 20 {
        return Err(MechanismError::CapacityExceeded(space_size));
    }
    check_epsilon(epsilon)?;
    let keep = rappor_keep_prob(epsilon);
    let flip = 1.0 - keep;
    let m = space_size;
    let outputs = 1usize << m;
    let probs: Vec<Vec<f64>> = (0..m)
        .map(|x| {
            (0..outputs)
                .map(|b| {
                    let mut p = 1.0;
                    for j in 0..m {
                        let reported = (b >> j) & 1 == 1;
                        let expected = j == x;
                        p *= if reported == expected { keep } else { flip };
                    }
                    p
                })
                .collect()
        })
        .collect();
    let input_labels: Vec<String> = (0..m).map(|i| i.to_string()).collect();
    let output_labels: Vec<String> =
        (0..outputs).map(|b| BitVector::from_output_index(m, b).label()).collect();
    Mechanism::from_rows(format!("rappor_{m}_{epsilon}"), input_labels, output_labels, probs)
}

/// Draw one observable from row `x` of the mechanism. Deterministic per
/// random-source state.
pub fn sample_output<R: Rng>(
    mech: &Mechanism,
    x: usize,
    rng: &mut R,
) -> Result<usize, MechanismError> {
    if x >= mech.input_count() {
        return Err(MechanismError::InputOutOfRange { index: x, inputs: mech.input_count() });
    }
    let u: f64 = rng.gen();
    let row = mech.row(x);
    let mut acc = 0.0;
    for (z, &p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return Ok(z);
        }
    }
    Ok(row.len() - 1)
}

//! Check-in file ingestion: tally whitespace-separated coordinate lines
//! onto a grid.

use std::path::Path;

use ibu_core::estimators::Empirical;
use ibu_core::mechanisms::{locate_cell, Grid};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read `{path}`: {source}")]
    Unreadable {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("no record fell inside the grid box")]
    NothingInBox,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct IngestReport {
    /// Non-empty lines in the file.
    pub total_lines: usize,
    pub in_box: usize,
    pub skipped_outside: usize,
    pub skipped_malformed: usize,
}

impl IngestReport {
    pub fn skipped(&self) -> usize {
        self.skipped_outside + self.skipped_malformed
    }
}

/// Count check-ins per grid cell. Each non-empty line must have at least
/// `max(lat_col, lon_col) + 1` whitespace-separated fields; malformed lines
/// and points outside the box are skipped and tallied.
pub fn ingest_gowalla(
    path: &Path,
    grid: &Grid,
    lat_col: usize,
    lon_col: usize,
) -> Result<(Empirical, IngestReport), IngestError> {
    let text = std::fs::read_to_string(path).map_err(|source| IngestError::Unreadable {
        path: path.display().to_string(),
        source,
    })?;
    let mut counts = vec![0u64; grid.cell_count()];
    let mut report = IngestReport::default();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        report.total_lines += 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        let parsed = fields
            .get(lat_col)
            .zip(fields.get(lon_col))
            .and_then(|(lat, lon)| Some((lat.parse::<f64>().ok()?, lon.parse::<f64>().ok()?)));
        let (lat, lon) = match parsed {
            Some(pair) => pair,
            None => {
                report.skipped_malformed += 1;
                continue;
            }
        };
        match locate_cell(grid, lat, lon) {
            Some(cell) => {
                counts[cell] += 1;
                report.in_box += 1;
            }
            None => report.skipped_outside += 1,
        }
    }
    if report.in_box == 0 {
        return Err(IngestError::NothingInBox);
    }
    let empirical = Empirical::from_counts(counts).expect("in-box count is positive");
    Ok((empirical, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn small_grid() -> Grid {
        Grid::new(0.0, 2.0, 0.0, 2.0, 2, 2, 0.5).unwrap()
    }

    fn write_temp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn two_points_in_the_first_cell() {
        let f = write_temp("u1 t 0.1 0.1 p1\nu2 t 0.4 0.9 p2\n");
        let (empirical, report) = ingest_gowalla(f.path(), &small_grid(), 2, 3).unwrap();
        assert_eq!(empirical.count(0), 2);
        assert_eq!(empirical.total(), 2);
        assert_eq!(report.skipped(), 0);
        assert_eq!(report.total_lines, 2);
    }

    #[test]
    fn out_of_box_points_are_tallied() {
        let f = write_temp("u1 t 0.1 0.1 p1\nu2 t 5.0 0.1 p2\n");
        let (empirical, report) = ingest_gowalla(f.path(), &small_grid(), 2, 3).unwrap();
        assert_eq!(empirical.total(), 1);
        assert_eq!(report.skipped_outside, 1);
        assert_eq!(report.in_box + report.skipped(), report.total_lines);
    }

    #[test]
    fn malformed_lines_are_tallied() {
        let f = write_temp("u1 t 0.1 0.1 p1\nshort line\nu3 t notanumber 0.2 p3\n");
        let (empirical, report) = ingest_gowalla(f.path(), &small_grid(), 2, 3).unwrap();
        assert_eq!(empirical.total(), 1);
        assert_eq!(report.skipped_malformed, 2);
    }

    #[test]
    fn thousand_random_points_match_an_independent_recount() {
        use rand::{Rng, SeedableRng};
        let grid =
            Grid::new(37.7228, 37.7946, -122.5153, -122.3789, 16, 24, 0.5).unwrap();
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(1000);
        let mut lines = String::new();
        let mut points = Vec::new();
        for i in 0..1000 {
            let lat = grid.lat_min + rng.gen::<f64>() * (grid.lat_max - grid.lat_min);
            let lon = grid.lon_min + rng.gen::<f64>() * (grid.lon_max - grid.lon_min);
            lines.push_str(&format!("user{i}\t2010-10-19T23:55:27Z\t{lat}\t{lon}\t{i}\n"));
            points.push((lat, lon));
        }
        let f = write_temp(&lines);
        let (empirical, report) = ingest_gowalla(f.path(), &grid, 2, 3).unwrap();
        assert_eq!(report.total_lines, 1000);
        assert_eq!(report.skipped(), 0);

        // Recount with the cell arithmetic written out independently.
        let mut recount = vec![0u64; grid.cell_count()];
        let dlat = (grid.lat_max - grid.lat_min) / grid.rows as f64;
        let dlon = (grid.lon_max - grid.lon_min) / grid.cols as f64;
        for (lat, lon) in points {
            let row = (((lat - grid.lat_min) / dlat) as usize).min(grid.rows - 1);
            let col = (((lon - grid.lon_min) / dlon) as usize).min(grid.cols - 1);
            recount[row * grid.cols + col] += 1;
        }
        for (cell, &expected) in recount.iter().enumerate() {
            assert_eq!(empirical.count(cell), expected, "cell {cell}");
        }
    }

    #[test]
    fn errors_when_nothing_lands_in_the_box() {
        let f = write_temp("u1 t 9.0 9.0 p1\n");
        assert!(matches!(
            ingest_gowalla(f.path(), &small_grid(), 2, 3),
            Err(IngestError::NothingInBox)
        ));
        assert!(matches!(
            ingest_gowalla(Path::new("/nonexistent/file"), &small_grid(), 2, 3),
            Err(IngestError::Unreadable { .. })
        ));
    }
}

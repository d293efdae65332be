//! Result emission: CSV tables and SVG heatmaps with filenames derived
//! from the config hash.

use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::config::ExperimentConfig;
use crate::experiment::RunResult;

#[derive(Debug, Error)]
pub enum EmitError {
    #[error("unknown output format `{0}` (expected csv or heatmap-svg)")]
    UnknownFormat(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputFormat {
    Csv,
    HeatmapSvg,
}

impl std::str::FromStr for OutputFormat {
    type Err = EmitError;
    fn from_str(s: &str) -> Result<Self, EmitError> {
        match s {
            "csv" => Ok(Self::Csv),
            "heatmap-svg" => Ok(Self::HeatmapSvg),
            other => Err(EmitError::UnknownFormat(other.to_string())),
        }
    }
}

/// Write one row per (epsilon, repetition, estimator, metric, value).
pub fn write_results_csv<W: Write>(result: &RunResult, w: &mut W) -> Result<(), EmitError> {
    writeln!(w, "epsilon,repetition,estimator,metric,value")?;
    for cell in &result.cells {
        for row in &cell.metrics {
            writeln!(
                w,
                "{},{},{},{},{}",
                cell.epsilon, cell.repetition, row.estimator, row.metric, row.value
            )?;
        }
    }
    Ok(())
}

/// Render a grid-shaped weight vector as an SVG color matrix. Row 0 is the
/// southern edge and is drawn at the bottom.
pub fn write_heatmap_svg<W: Write>(
    w: &mut W,
    rows: usize,
    cols: usize,
    values: &[f64],
) -> Result<(), EmitError> {
    let max = values.iter().cloned().fold(0.0f64, f64::max);
    writeln!(
        w,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {cols} {rows}\" \
         width=\"{}\" height=\"{}\">",
        cols * 12,
        rows * 12
    )?;
    for row in 0..rows {
        for col in 0..cols {
            let v = values[row * cols + col];
            let t = if max > 0.0 { (v / max).clamp(0.0, 1.0) } else { 0.0 };
            let r = (255.0 + t * (165.0 - 255.0)).round() as u8;
            let g = (255.0 + t * (15.0 - 255.0)).round() as u8;
            let b = (245.0 + t * (21.0 - 245.0)).round() as u8;
            writeln!(
                w,
                "<rect x=\"{col}\" y=\"{}\" width=\"1\" height=\"1\" fill=\"rgb({r},{g},{b})\"/>",
                rows - 1 - row
            )?;
        }
    }
    writeln!(w, "</svg>")?;
    Ok(())
}

/// Emit the requested formats into `out_dir`; returns the files written.
pub fn emit_results(
    result: &RunResult,
    cfg: &ExperimentConfig,
    out_dir: &Path,
    formats: &[OutputFormat],
) -> Result<Vec<PathBuf>, EmitError> {
    std::fs::create_dir_all(out_dir)?;
    let hash = cfg.hash();
    let mut written = Vec::new();

    if formats.contains(&OutputFormat::Csv) {
        let path = out_dir.join(format!("results_{hash:016x}.csv"));
        let mut file = std::fs::File::create(&path)?;
        write_results_csv(result, &mut file)?;
        written.push(path);
    }

    if formats.contains(&OutputFormat::HeatmapSvg) {
        if let Some((rows, cols)) = result.grid_dims {
            let path = out_dir.join(format!("heatmap_{hash:016x}_source.svg"));
            let mut file = std::fs::File::create(&path)?;
            write_heatmap_svg(&mut file, rows, cols, &result.source_weights)?;
            written.push(path);
            for cell in &result.cells {
                if cell.repetition != 0 {
                    continue;
                }
                for (name, weights) in &cell.estimates {
                    let path = out_dir
                        .join(format!("heatmap_{hash:016x}_eps{}_{name}.svg", cell.epsilon));
                    let mut file = std::fs::File::create(&path)?;
                    write_heatmap_svg(&mut file, rows, cols, weights)?;
                    written.push(path);
                }
            }
        }
    }

    Ok(written)
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ibu_harness::config::{EstimatorKind, ExperimentConfig, MechanismSpec};
use ibu_harness::counterexamples::verify_counterexamples;
use ibu_harness::emit::{emit_results, OutputFormat};
use ibu_harness::experiment::{build_source, build_table_mechanism, run_experiment};

use ibu_core::analysis::{check_uniqueness, likelihood_surface, write_surface_csv};
use ibu_core::likelihood::OutputsMatrix;
use ibu_core::mechanisms::{rappor, Mechanism};

#[derive(Parser)]
#[command(
    name = "ibu",
    version,
    about = "Reconstruct original data distributions from locally privatized observations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config file (flat `key = value` lines).
    #[arg(long)]
    config: PathBuf,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig, String> {
        let mut cfg = ExperimentConfig::from_file(&self.config).map_err(|e| e.to_string())?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run one dataset through one estimator and print the metrics.
    Estimate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory for the estimate CSV.
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Write the mechanism table (at the first epsilon) as CSV.
        #[arg(long)]
        dump_mechanism: Option<PathBuf>,
    },
    /// Run the full (epsilon x repetition) sweep from a config.
    Experiment {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Output formats, comma separated: csv, heatmap-svg.
        #[arg(long, value_delimiter = ',', default_value = "csv")]
        format: Vec<String>,
        #[arg(long)]
        dump_mechanism: Option<PathBuf>,
    },
    /// Verify the bundled three-state counterexamples; nonzero exit on any
    /// failing check.
    Counterexamples,
    /// Sample the likelihood surface of a three-state problem to CSV.
    Surface {
        #[command(flatten)]
        config: ConfigArgs,
        /// Axis resolution of the sampling grid.
        #[arg(long, default_value_t = 101)]
        resolution: usize,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Report whether the configured mechanism and observations admit a
    /// unique MLE.
    Uniqueness {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        dump_mechanism: Option<PathBuf>,
    },
}

/// The explicit mechanism at the first configured epsilon (RAPPOR gets its
/// full table here, subject to the capacity cap).
fn explicit_mechanism(cfg: &ExperimentConfig) -> Result<Mechanism, String> {
    let (source, _) = build_source(cfg).map_err(|e| e.to_string())?;
    let epsilon = cfg.epsilons[0];
    match cfg.mechanism {
        MechanismSpec::Rappor => rappor(source.len(), epsilon).map_err(|e| e.to_string()),
        _ => build_table_mechanism(cfg, source.len(), epsilon)
            .map_err(|e| e.to_string())?
            .ok_or_else(|| "mechanism has no explicit table".to_string()),
    }
}

fn dump_mechanism(cfg: &ExperimentConfig, path: &Path) -> Result<(), String> {
    let mech = explicit_mechanism(cfg)?;
    let mut file = std::fs::File::create(path).map_err(|e| e.to_string())?;
    mech.write_csv(&mut file).map_err(|e| e.to_string())?;
    println!("wrote mechanism table to {}", path.display());
    Ok(())
}

fn observation_matrix(cfg: &ExperimentConfig) -> Result<OutputsMatrix, String> {
    let mech = explicit_mechanism(cfg)?;
    let observations: Vec<usize> = match &cfg.observations {
        Some(list) => list.clone(),
        None => (0..mech.output_count()).collect(),
    };
    let mut columns = Vec::with_capacity(observations.len());
    for &z in &observations {
        if z >= mech.output_count() {
            return Err(format!(
                "observation {z} out of range for a mechanism with {} outputs",
                mech.output_count()
            ));
        }
        columns.push(mech.column(z));
    }
    OutputsMatrix::from_columns(mech.input_count(), columns).map_err(|e| e.to_string())
}

fn cmd_estimate(
    args: &ConfigArgs,
    out: &Path,
    dump: Option<&PathBuf>,
) -> Result<(), String> {
    let cfg = args.load()?;
    if cfg.epsilons.len() != 1 || cfg.repetitions != 1 || cfg.estimators.len() != 1 {
        return Err(
            "estimate expects a single-cell config: one epsilon, one repetition, one estimator"
                .to_string(),
        );
    }
    if let Some(path) = dump {
        dump_mechanism(&cfg, path)?;
    }
    let result = run_experiment(&cfg).map_err(|e| e.to_string())?;
    let cell = &result.cells[0];
    for err in &cell.errors {
        eprintln!("estimator error: {err}");
    }
    let estimator = cfg.estimators[0].name();
    let estimate = cell
        .estimates
        .iter()
        .find(|(name, _)| name == estimator)
        .ok_or_else(|| format!("estimator {estimator} produced no estimate"))?;
    for row in &cell.metrics {
        if row.estimator == estimator {
            println!("{} = {}", row.metric, row.value);
        }
    }
    if let Some((iters, converged)) = cell.em_iterations {
        if cfg.estimators[0] == EstimatorKind::Em {
            println!("iterations = {iters}");
            println!("converged = {converged}");
        }
    }
    std::fs::create_dir_all(out).map_err(|e| e.to_string())?;
    let path = out.join(format!("estimate_{:016x}.csv", cfg.hash()));
    let mut file = std::fs::File::create(&path).map_err(|e| e.to_string())?;
    use std::io::Write;
    writeln!(file, "index,weight").map_err(|e| e.to_string())?;
    for (i, w) in estimate.1.iter().enumerate() {
        writeln!(file, "{i},{w}").map_err(|e| e.to_string())?;
    }
    println!("wrote estimate to {}", path.display());
    Ok(())
}

fn cmd_experiment(
    args: &ConfigArgs,
    out: &Path,
    formats: &[String],
    dump: Option<&PathBuf>,
) -> Result<(), String> {
    let cfg = args.load()?;
    let formats: Vec<OutputFormat> = formats
        .iter()
        .map(|f| f.parse())
        .collect::<Result<_, _>>()
        .map_err(|e: ibu_harness::emit::EmitError| e.to_string())?;
    if let Some(path) = dump {
        dump_mechanism(&cfg, path)?;
    }
    let result = run_experiment(&cfg).map_err(|e| e.to_string())?;
    if let Some(report) = &result.ingest_report {
        println!(
            "ingested {} lines: {} in box, {} outside, {} malformed",
            report.total_lines, report.in_box, report.skipped_outside, report.skipped_malformed
        );
    }
    let error_count: usize = result.cells.iter().map(|c| c.errors.len()).sum();
    for cell in &result.cells {
        for err in &cell.errors {
            eprintln!("cell eps={} rep={}: {err}", cell.epsilon, cell.repetition);
        }
    }
    let files = emit_results(&result, &cfg, out, &formats).map_err(|e| e.to_string())?;
    for f in &files {
        println!("wrote {}", f.display());
    }
    println!(
        "{} cells, {} metric rows, {} estimator errors",
        result.cells.len(),
        result.cells.iter().map(|c| c.metrics.len()).sum::<usize>(),
        error_count
    );
    Ok(())
}

fn cmd_counterexamples() -> ExitCode {
    let report = verify_counterexamples();
    for check in &report.checks {
        let status = if check.passed { "PASS" } else { "FAIL" };
        println!("{status}  {} ({})", check.name, check.details);
    }
    println!(
        "{}/{} checks passed in {:.2}s",
        report.checks.iter().filter(|c| c.passed).count(),
        report.checks.len(),
        report.elapsed.as_secs_f64()
    );
    if report.all_passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn cmd_surface(args: &ConfigArgs, resolution: usize, out: &Path) -> Result<(), String> {
    let cfg = args.load()?;
    let g = observation_matrix(&cfg)?;
    let points = likelihood_surface(&g, resolution).map_err(|e| e.to_string())?;
    std::fs::create_dir_all(out).map_err(|e| e.to_string())?;
    let path = out.join(format!("surface_{:016x}.csv", cfg.hash()));
    let mut file = std::fs::File::create(&path).map_err(|e| e.to_string())?;
    write_surface_csv(&points, &mut file).map_err(|e| e.to_string())?;
    println!("wrote {} surface samples to {}", points.len(), path.display());
    Ok(())
}

fn cmd_uniqueness(args: &ConfigArgs, dump: Option<&PathBuf>) -> Result<(), String> {
    let cfg = args.load()?;
    if let Some(path) = dump {
        dump_mechanism(&cfg, path)?;
    }
    let g = observation_matrix(&cfg)?;
    let report = check_uniqueness(&g, 1e-9);
    println!("unique: {}", report.unique);
    println!("rank: {} (required {})", report.rank, report.required_rank);
    if let Some((theta, phi)) = &report.witness {
        println!("witness theta: {:?}", theta.weights());
        println!("witness phi:   {:?}", phi.weights());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Estimate { config, out, dump_mechanism } => {
            cmd_estimate(config, out, dump_mechanism.as_ref())
        }
        Command::Experiment { config, out, format, dump_mechanism } => {
            cmd_experiment(config, out, format, dump_mechanism.as_ref())
        }
        Command::Counterexamples => return cmd_counterexamples(),
        Command::Surface { config, resolution, out } => cmd_surface(config, *resolution, out),
        Command::Uniqueness { config, dump_mechanism } => {
            cmd_uniqueness(config, dump_mechanism.as_ref())
        }
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(message) => {
            eprintln!("error: {message}");
            ExitCode::FAILURE
        }
    }
}

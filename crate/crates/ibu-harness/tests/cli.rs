//! End-to-end checks of the `ibu` binary: exit codes, emitted files,
//! determinism of the CSV output.

use std::path::Path;
use std::process::{Command, Output};

fn ibu() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ibu"))
}

fn write_config(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path
}

fn stdout(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).into_owned()
}

const SWEEP: &str = "\
source = binomial
space_size = 10
mechanism = krr
epsilons = 0.5, 1.5
samples = 500
repetitions = 2
estimators = em,invn,invp
metrics = tv
seed = 3
";

#[test]
fn experiment_writes_deterministic_csv() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "sweep.conf", SWEEP);
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    for out in [&out_a, &out_b] {
        let output = ibu()
            .args(["experiment", "--config"])
            .arg(&config)
            .arg("--out")
            .arg(out)
            .output()
            .unwrap();
        assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    }
    let csv_name = |dir: &Path| {
        std::fs::read_dir(dir)
            .unwrap()
            .map(|e| e.unwrap().path())
            .find(|p| p.extension().is_some_and(|e| e == "csv"))
            .unwrap()
    };
    let a = std::fs::read(csv_name(&out_a)).unwrap();
    let b = std::fs::read(csv_name(&out_b)).unwrap();
    assert_eq!(a, b);
    let text = String::from_utf8(a).unwrap();
    assert_eq!(text.lines().next().unwrap(), "epsilon,repetition,estimator,metric,value");
    // 2 eps x 2 reps x (3 estimators + noisy) x 1 metric.
    assert_eq!(text.lines().count() - 1, 16);

    let reseeded = ibu()
        .args(["experiment", "--config"])
        .arg(&config)
        .args(["--seed", "99", "--out"])
        .arg(dir.path().join("c"))
        .output()
        .unwrap();
    assert!(reseeded.status.success());
    let c = std::fs::read(csv_name(&dir.path().join("c"))).unwrap();
    assert_ne!(b, c);
}

#[test]
fn experiment_emits_heatmaps_for_grid_configs() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        "grid.conf",
        "\
source = custom
custom_weights = 0.5, 0.5, 0, 0, 0, 0
grid_lat_min = 0.0
grid_lat_max = 2.0
grid_lon_min = 0.0
grid_lon_max = 3.0
grid_rows = 2
grid_cols = 3
grid_cell_km = 0.5
mechanism = planar
epsilons = 1.0
samples = 300
estimators = em
metrics = tv
",
    );
    let out = dir.path().join("out");
    let output = ibu()
        .args(["experiment", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&out)
        .args(["--format", "csv,heatmap-svg"])
        .output()
        .unwrap();
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    let names: Vec<String> = std::fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    assert!(names.iter().any(|n| n.starts_with("results_")));
    assert!(names.iter().any(|n| n.contains("heatmap") && n.contains("source")));
    assert!(names.iter().any(|n| n.contains("heatmap") && n.contains("em")));
}

#[test]
fn estimate_requires_a_single_cell_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "sweep.conf", SWEEP);
    let output = ibu().args(["estimate", "--config"]).arg(&config).output().unwrap();
    assert!(!output.status.success());
    assert!(String::from_utf8_lossy(&output.stderr).contains("single-cell"));

    let single = write_config(
        dir.path(),
        "single.conf",
        "\
source = binomial
space_size = 10
mechanism = krr
epsilons = 1.0
samples = 500
estimators = em
metrics = tv
",
    );
    let out = dir.path().join("out");
    let output = ibu()
        .args(["estimate", "--config"])
        .arg(&single)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    let text = stdout(&output);
    assert!(text.contains("tv = "));
    assert!(text.contains("iterations = "));
    assert!(std::fs::read_dir(&out).unwrap().count() >= 1);
}

#[test]
fn counterexamples_exit_code_matches_the_report() {
    let output = ibu().arg("counterexamples").output().unwrap();
    let text = stdout(&output);
    let failures = text.lines().filter(|l| l.starts_with("FAIL")).count();
    let passes = text.lines().filter(|l| l.starts_with("PASS")).count();
    assert_eq!(passes + failures, 4, "{text}");
    assert_eq!(output.status.success(), failures == 0, "{text}");
}

#[test]
fn surface_and_uniqueness_subcommands() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        "three.conf",
        "\
source = binomial
space_size = 3
mechanism = krr
epsilons = 0.6931471805599453
samples = 4
observations = 0, 1, 1, 2
",
    );
    let out = dir.path().join("out");
    let output = ibu()
        .args(["surface", "--config"])
        .arg(&config)
        .args(["--resolution", "21", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    let surface = std::fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.file_name().unwrap().to_string_lossy().starts_with("surface_"))
        .unwrap();
    let text = std::fs::read_to_string(surface).unwrap();
    assert!(text.starts_with("theta1,theta3,log_likelihood\n"));
    assert!(text.lines().count() > 200); // triangular grid at resolution 21

    let output = ibu().args(["uniqueness", "--config"]).arg(&config).output().unwrap();
    assert!(output.status.success());
    assert!(stdout(&output).contains("unique: true"));

    // A single observed output cannot pin down three states.
    let single_obs = write_config(
        dir.path(),
        "single_obs.conf",
        "\
source = binomial
space_size = 3
mechanism = krr
epsilons = 0.6931471805599453
samples = 4
observations = 1
",
    );
    let output = ibu().args(["uniqueness", "--config"]).arg(&single_obs).output().unwrap();
    assert!(output.status.success());
    let text = stdout(&output);
    assert!(text.contains("unique: false"));
    assert!(text.contains("witness theta"));
}

#[test]
fn dump_mechanism_writes_the_table() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        "single.conf",
        "\
source = binomial
space_size = 4
mechanism = geometric
epsilons = 1.0
samples = 10
estimators = em
",
    );
    let table = dir.path().join("mech.csv");
    let output = ibu()
        .args(["uniqueness", "--config"])
        .arg(&config)
        .arg("--dump-mechanism")
        .arg(&table)
        .output()
        .unwrap();
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    let text = std::fs::read_to_string(&table).unwrap();
    assert!(text.starts_with("input,0,1,2,3\n"));
    assert_eq!(text.lines().count(), 5);
}

#[test]
fn bad_configs_fail_with_nonzero_exit() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "bad.conf", "source = binomial\nbogus = 1\n");
    let output = ibu().args(["experiment", "--config"]).arg(&config).output().unwrap();
    assert!(!output.status.success());
    assert!(String::from_utf8_lossy(&output.stderr).contains("error"));

    let output = ibu()
        .args(["experiment", "--config", "/nonexistent/path.conf"])
        .output()
        .unwrap();
    assert!(!output.status.success());
}

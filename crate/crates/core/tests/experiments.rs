use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;

use stability_lab::data::InputDistribution;
use stability_lab::experiments::config::{
    BalanceSettings, ClassifySettings, DiagProblem, EquivalenceSettings, ModeSettings, ReluProblem,
};
use stability_lab::experiments::svg::render_svg;
use stability_lab::experiments::{
    load_run_json, run_experiment, save_run_json, ExperimentConfig, ExperimentKind, ExperimentOutput, PlotSpec,
    ProblemConfig, Series, SeriesStyle,
};
use stability_lab::optim::Mode;
use stability_lab::stability::SimulationConfig;

fn relu_small() -> ProblemConfig {
    ProblemConfig::Relu(ReluProblem {
        teacher_width: 2,
        input_dim: 5,
        width: 8,
        n_train: 20,
        n_test: 200,
        distribution: InputDistribution::Sphere,
    })
}

fn diag_small() -> ProblemConfig {
    ProblemConfig::Diag(DiagProblem {
        input_dim: 30,
        n_train: 20,
        n_test: 200,
        support: 2,
        distribution: InputDistribution::Cube,
        init_var_a: 0.1,
        init_var_b: 0.1,
    })
}

/// Each preset shrunk to a few seconds of work.
fn small_config(kind: ExperimentKind) -> ExperimentConfig {
    let mut c = ExperimentConfig::preset(kind);
    c.train.sgd = ModeSettings { max_iters: 4000, metric_period: 500, loss_period: Some(100) };
    c.train.gd = ModeSettings { max_iters: 800, metric_period: 100, loss_period: None };
    c.train.loss_tol = 1e-6;
    c.seeds = vec![0, 1];
    match kind {
        ExperimentKind::ReluProcess | ExperimentKind::ReluSweep => {
            c.problem = relu_small();
            c.lr_grid = vec![0.02, 0.05];
        }
        ExperimentKind::DiagSweep => {
            c.problem = diag_small();
            c.lr_grid = vec![0.1, 0.3];
            c.gd_lr_grid = Some(vec![0.05, 0.2]);
        }
        ExperimentKind::DiagBalance => {
            c.problem = diag_small();
            c.balance = Some(BalanceSettings { r0_grid: vec![1.0, 4.0], base_variance: 0.1, sgd_lr: 0.3, gd_lr: 0.1 });
        }
        ExperimentKind::VerifyReluEquivalence => {
            c.problem = ProblemConfig::Relu(ReluProblem { n_train: 200, n_test: 0, ..relu_problem(&relu_small()) });
            c.seeds = vec![0];
            c.equivalence = Some(EquivalenceSettings { draws: 4, ..c.equivalence.clone().unwrap() });
        }
        ExperimentKind::VerifyDiagEquivalence => {
            c.problem = ProblemConfig::Diag(DiagProblem { n_train: 500, n_test: 0, input_dim: 5, support: 1, ..diag_problem(&diag_small()) });
            c.seeds = vec![0];
            c.equivalence = Some(EquivalenceSettings { draws: 4, ..c.equivalence.clone().unwrap() });
        }
        ExperimentKind::Classify => {
            c.problem = diag_small();
            c.seeds = vec![0];
            c.classify = Some(ClassifySettings {
                run_file: PathBuf::from("runs/sgd-lr01-seed0.json"),
                eta: None,
                force: true,
                verdict: stability_lab::experiments::config::VerdictSettings {
                    n_probes: 50,
                    simulation: Some(SimulationConfig { steps: 200, trajectories: 8, ..SimulationConfig::new(0.0) }),
                },
            });
        }
    }
    c
}

fn relu_problem(p: &ProblemConfig) -> ReluProblem {
    match p {
        ProblemConfig::Relu(r) => r.clone(),
        _ => unreachable!(),
    }
}

fn diag_problem(p: &ProblemConfig) -> DiagProblem {
    match p {
        ProblemConfig::Diag(r) => r.clone(),
        _ => unreachable!(),
    }
}

/// Relative path → file contents for every file under `root`.
fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn run_classify_fixture(out: &Path) -> ExperimentOutput {
    // The classified run comes from a small diagonal sweep in the same directory.
    run_experiment(&small_config(ExperimentKind::DiagSweep), out).unwrap();
    run_experiment(&small_config(ExperimentKind::Classify), out).unwrap()
}

#[test]
fn every_small_experiment_is_bitwise_reproducible() {
    for kind in ExperimentKind::ALL {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let (oa, ob) = if kind == ExperimentKind::Classify {
            (run_classify_fixture(a.path()), run_classify_fixture(b.path()))
        } else {
            let c = small_config(kind);
            (run_experiment(&c, a.path()).unwrap(), run_experiment(&c, b.path()).unwrap())
        };
        assert_eq!(oa, ob, "{}", kind.name());
        let (sa, sb) = (snapshot(a.path()), snapshot(b.path()));
        assert!(!sa.is_empty());
        assert_eq!(sa.keys().collect::<Vec<_>>(), sb.keys().collect::<Vec<_>>(), "{}", kind.name());
        for (path, bytes) in &sa {
            assert!(bytes == &sb[path], "{}: {} differs", kind.name(), path.display());
        }
    }
}

#[test]
fn run_records_round_trip_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    run_experiment(&small_config(ExperimentKind::DiagSweep), dir.path()).unwrap();
    for entry in std::fs::read_dir(dir.path().join("runs")).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().and_then(|e| e.to_str()) != Some("json") {
            continue;
        }
        let record = load_run_json(&path).unwrap();
        let copy = dir.path().join("copy.json");
        save_run_json(&record, &copy).unwrap();
        assert_eq!(load_run_json(&copy).unwrap(), record);
        assert_eq!(std::fs::read(&copy).unwrap(), std::fs::read(&path).unwrap());
        let bits = |r: &stability_lab::optim::RunRecord| r.loss_curve.iter().map(|l| l.loss.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&load_run_json(&copy).unwrap()), bits(&record));
    }
}

#[test]
fn sweep_artifacts_have_expected_shape() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(ExperimentKind::ReluSweep);
    let ExperimentOutput::Sweep(result) = run_experiment(&config, dir.path()).unwrap() else {
        panic!("sweep output expected")
    };
    let csv = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert!(lines[0].starts_with("mode,lr_index,learning_rate,seed,status,converged"));
    assert!(lines[0].contains(",path_norm,"));
    // Both modes × grid × seeds, diverged runs included.
    assert_eq!(lines.len() - 1, 2 * config.lr_grid.len() * config.seeds.len());
    assert_eq!(result.rows.len(), lines.len() - 1);

    // Per-run CSV: one row per distinct recorded iteration, every snapshot included.
    for row in &result.rows {
        let record = load_run_json(&dir.path().join(&row.run_file)).unwrap();
        let csv_path = dir.path().join(row.run_file.replace(".json", ".csv"));
        let text = std::fs::read_to_string(csv_path).unwrap();
        let mut iters: Vec<u64> = record
            .loss_curve
            .iter()
            .map(|l| l.iteration)
            .chain(record.snapshots.iter().map(|s| s.iteration))
            .collect();
        iters.sort_unstable();
        iters.dedup();
        assert_eq!(text.lines().count() - 1, iters.len(), "{}", row.run_file);
        let with_trace = text.lines().skip(1).filter(|l| !l.split(',').nth(3).unwrap().is_empty()).count();
        assert_eq!(with_trace, record.snapshots.len());
    }

    let svg = std::fs::read_to_string(dir.path().join("plots/sharpness-sgd.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    for label in ["tr(G)", "‖G‖_F", "‖G‖₂", "2/η"] {
        assert!(svg.contains(label), "legend entry {label} missing");
    }
}

#[test]
fn sweep_svg_has_one_series_per_metric_on_log_axes() {
    let grid = [0.01, 0.1, 1.0];
    let series: Vec<Series> = ["trace", "frobenius", "spectral"]
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let pts = grid.iter().map(|&x| (x, (k + 1) as f64 / x)).collect();
            Series::new(*name, pts, SeriesStyle::LinePoints)
        })
        .collect();
    let svg = render_svg(&series, &PlotSpec::new("sweep", "learning rate", "sharpness").log_x().log_y()).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 3);
    // Decade ticks on the log axis.
    for tick in ["0.01", "0.1", ">1<"] {
        assert!(svg.contains(tick), "tick {tick} missing");
    }
}

#[test]
fn process_summary_tracks_the_tail() {
    let dir = tempfile::tempdir().unwrap();
    let ExperimentOutput::Process(runs) = run_experiment(&small_config(ExperimentKind::ReluProcess), dir.path()).unwrap()
    else {
        panic!("process output expected")
    };
    for s in &runs {
        assert_eq!(s.tail_start, s.iterations - s.iterations.div_ceil(10));
        assert_eq!(s.clip_free_tail, s.last_clip_iteration.map_or(true, |t| t < s.tail_start));
        assert!(dir.path().join("plots").join(format!("sgd-process-seed{}-trace.svg", s.seed)).exists());
    }
}

#[test]
fn balance_reports_both_definitions() {
    let dir = tempfile::tempdir().unwrap();
    let ExperimentOutput::Balance(result) = run_experiment(&small_config(ExperimentKind::DiagBalance), dir.path()).unwrap()
    else {
        panic!("balance output expected")
    };
    assert_eq!(result.rows.len(), 2 * 2 * 2);
    for r in &result.rows {
        assert!(r.init_balancedness >= 1.0);
        if let Some(b) = r.final_balancedness {
            assert!(b >= 1.0 - 1e-12);
        }
    }
    assert!(result.rows.iter().any(|r| r.mode == Mode::Gd));
    let csv = std::fs::read_to_string(dir.path().join("balance.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + result.rows.len());
}

fn cli() -> Command {
    Command::new(env!("CARGO_BIN_EXE_stability-lab"))
}

#[test]
fn cli_runs_a_config_file_and_reports_errors() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("balance.json");
    std::fs::write(&config_path, serde_json::to_string_pretty(&small_config(ExperimentKind::DiagBalance)).unwrap()).unwrap();
    let out = dir.path().join("out");
    let status = cli()
        .args(["diag-balance", "--config"])
        .arg(&config_path)
        .arg("--out")
        .arg(&out)
        .args(["--seeds", "3"])
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    assert!(out.join("balance.csv").exists() && out.join("config.json").exists());
    let written: ExperimentConfig = serde_json::from_slice(&std::fs::read(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(written.seeds, vec![3]);

    // Wrong subcommand for the config.
    let wrong = cli().args(["relu-sweep", "--config"]).arg(&config_path).arg("--out").arg(&out).output().unwrap();
    assert_eq!(wrong.status.code(), Some(2));

    // Malformed config file.
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{ not json").unwrap();
    let r = cli().args(["diag-sweep", "--config"]).arg(&bad).arg("--out").arg(&out).output().unwrap();
    assert_eq!(r.status.code(), Some(2));

    // Missing config file.
    let r = cli().args(["diag-sweep", "--config", "/nonexistent/config.json", "--out"]).arg(&out).output().unwrap();
    assert_ne!(r.status.code(), Some(0));

    // Unwritable output directory.
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "").unwrap();
    let r = cli().args(["diag-balance", "--config"]).arg(&config_path).arg("--out").arg(blocker.join("sub")).output().unwrap();
    assert_eq!(r.status.code(), Some(1));

    // Non-increasing grid override.
    let r = cli().args(["diag-sweep", "--lr-grid", "0.2,0.1", "--out"]).arg(&out).output().unwrap();
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn shipped_configs_match_the_presets() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for kind in ExperimentKind::ALL {
        let path = dir.join(format!("{}.json", kind.name()));
        let loaded = ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(loaded, ExperimentConfig::preset(kind), "{}", path.display());
    }
}

#[test]
fn cli_dump_config_applies_overrides() {
    let out = cli().args(["diag-sweep", "--seeds", "4,5", "--lr-grid", "0.2,0.4", "--dump-config"]).output().unwrap();
    assert!(out.status.success());
    let config: ExperimentConfig = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(config.seeds, vec![4, 5]);
    assert_eq!(config.lr_grid, vec![0.2, 0.4]);
    assert_eq!(config.experiment, ExperimentKind::DiagSweep);
}

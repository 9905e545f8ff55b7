use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use twinshield::{DgpConfig, DiffusionConfig, EffectSpec};
use twinshield_cli::config::StageToggles;
use twinshield_cli::pipeline::{AteReport, Truth, ATE, TRUTH};
use twinshield_cli::{Pipeline, PipelineConfig, Stage};

fn binary(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_twinshield"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "error")
        .output()
        .unwrap()
}

fn write_config(dir: &Path, json: &str) -> PathBuf {
    let p = dir.join("config.json");
    std::fs::write(&p, json).unwrap();
    p
}

fn small(seed: u64, out: &Path) -> PipelineConfig {
    let mut cfg = PipelineConfig {
        seed: Some(seed),
        out_dir: Some(out.to_path_buf()),
        simulate: Some(DgpConfig {
            n: 500,
            ..DgpConfig::default()
        }),
        ..PipelineConfig::default()
    };
    cfg.synth.diffusion = DiffusionConfig {
        epochs: 10,
        timesteps: 20,
        hidden_layout: vec![16, 16],
        ..DiffusionConfig::desk()
    };
    cfg.estimate.forest.n_trees = 15;
    cfg.estimate.replicates = 100;
    cfg.qte.replicates = 30;
    cfg
}

#[test]
fn missing_input_file_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"seed": 1, "input": {"cohort": "nope.csv", "manifest": "nope.json", "economics": "econ.json"}}"#,
    );
    let out = binary(dir.path(), &["run", "--config", cfg.to_str().unwrap(), "--out", "o"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not exist"));
}

#[test]
fn bad_arguments_exit_one_and_help_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(binary(dir.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(
        binary(dir.path(), &["run", "--threads", "0", "--out", "o"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(binary(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn stage_without_its_upstream_artifact_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"seed": 1, "simulate": {"n": 300, "missing_rate": 0.1}}"#,
    );
    let cfg = cfg.to_str().unwrap();
    // the cohort has gaps, so estimation needs the imputed table first
    let out = binary(dir.path(), &["estimate", "--config", cfg, "--out", "o"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("o/cohort.csv").is_file());
    // and the twin table after that
    assert_eq!(
        binary(dir.path(), &["impute", "--config", cfg, "--out", "o"])
            .status
            .code(),
        Some(0)
    );
    assert_eq!(
        binary(dir.path(), &["audit", "--config", cfg, "--out", "o"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn simulate_subcommand_works_without_a_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = binary(dir.path(), &["simulate", "--seed", "4", "--out", "o"]);
    assert!(out.status.success());
    for f in [
        "cohort.csv",
        "cohort_manifest.json",
        "economics.json",
        "truth.json",
        "manifest.json",
    ] {
        assert!(dir.path().join("o").join(f).is_file(), "{f}");
    }
}

#[test]
fn empirical_only_estimate_recovers_the_effect() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(12, dir.path());
    cfg.simulate = Some(DgpConfig {
        n: 2000,
        effect: EffectSpec::Constant { c: -2000.0 },
        ..DgpConfig::default()
    });
    cfg.stages = StageToggles {
        synth: false,
        audit: false,
        cate: false,
        qte: false,
        sense: false,
        report: false,
        ..StageToggles::default()
    };
    cfg.estimate.forest.n_trees = 60;
    cfg.estimate.replicates = 400;
    Pipeline::new(cfg).unwrap().run_all().unwrap();
    let ate: AteReport = serde_json::from_str(&std::fs::read_to_string(dir.path().join(ATE)).unwrap()).unwrap();
    let truth: Truth = serde_json::from_str(&std::fs::read_to_string(dir.path().join(TRUTH)).unwrap()).unwrap();
    assert_eq!(ate.train_source, "empirical");
    assert!(
        (ate.oop.point - truth.population_ate).abs() <= 0.2 * truth.population_ate.abs(),
        "{:?}",
        ate.oop
    );
    assert!(ate.oop.ci_low < ate.oop.point && ate.oop.point < ate.oop.ci_high);
}

#[test]
fn staged_invocations_match_a_single_run() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    Pipeline::new(small(3, a.path())).unwrap().run_all().unwrap();
    for stage in Stage::ALL {
        Pipeline::new(small(3, b.path())).unwrap().run_stage(stage).unwrap();
    }
    let mut names: Vec<_> = std::fs::read_dir(a.path())
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert!(names.len() > 20);
    for n in names {
        assert_eq!(
            std::fs::read(a.path().join(&n)).unwrap(),
            std::fs::read(b.path().join(&n)).unwrap(),
            "{n:?}"
        );
    }
}

#[test]
fn report_writes_tables_and_figures() {
    let dir = tempfile::tempdir().unwrap();
    Pipeline::new(small(5, dir.path())).unwrap().run_all().unwrap();
    for t in ["table_descriptives", "table_potential_outcomes"] {
        assert!(dir.path().join(format!("{t}.csv")).is_file());
        assert!(dir.path().join(format!("{t}.txt")).is_file());
    }
    for f in [
        "fig_kde",
        "fig_cate",
        "fig_strata",
        "fig_qte",
        "fig_contour",
        "fig_wage_sweep",
    ] {
        let svg = std::fs::read_to_string(dir.path().join(format!("{f}.svg"))).unwrap();
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"), "{f}");
        assert!(dir.path().join(format!("{f}.csv")).is_file(), "{f}");
    }
}

#[test]
fn config_overrides_from_flags_are_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"seed": 1, "simulate": {"n": 200}}"#);
    let out = binary(
        dir.path(),
        &[
            "simulate",
            "--config",
            cfg.to_str().unwrap(),
            "--seed",
            "9",
            "--out",
            "o",
        ],
    );
    assert!(out.status.success());
    let m: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("o/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["seed"], 9);
}

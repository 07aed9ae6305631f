use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn samlab(args: &[&str], env: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_samlab"));
    cmd.args(args).env_remove("SAMLAB_OUTPUT");
    if let Some(dir) = env {
        cmd.env("SAMLAB_OUTPUT", dir);
    }
    cmd.output().expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

const SMALL_POTENTIAL: &str =
    "schema_version = 1\nseeds = [0]\n[potential_plot]\nalpha_scales = [0.1, 1.0]\nextent = 1.0\ngrid_points = 5\n";

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

#[test]
fn potential_plot_writes_csv_with_provenance() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", SMALL_POTENTIAL);
    let out_dir = dir.path().join("out");
    let out = samlab(
        &[
            "potential_plot",
            "--config",
            cfg.to_str().unwrap(),
            "--output",
            out_dir.to_str().unwrap(),
        ],
        None,
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(out_dir.join("potential_plot/potential.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert!(lines[0].starts_with("#config-hash=") && lines[0].len() == "#config-hash=".len() + 64);
    assert_eq!(lines[1], "#seed=0");
    assert_eq!(lines[2], "alpha,beta_1,beta_2,phi,phi_normalized,l1,l2_sq");
    assert_eq!(lines.len(), 3 + 2 * 25);
    // 17 significant digits in scientific notation.
    let first_float = lines[3].split(',').next().unwrap();
    assert_eq!(first_float, "1.0000000000000001e-1");
    assert!(out_dir.join("config.toml").exists());
}

#[test]
fn output_flag_beats_env_which_beats_config() {
    let dir = tempfile::tempdir().unwrap();
    let from_cfg = dir.path().join("from-config");
    // Top-level keys must precede the tables.
    let text = SMALL_POTENTIAL.replacen(
        "seeds = [0]\n",
        &format!("seeds = [0]\noutput_dir = {:?}\n", from_cfg.to_str().unwrap()),
        1,
    );
    let cfg = write(dir.path(), "c.toml", &text);
    let env_dir = dir.path().join("from-env");
    let flag_dir = dir.path().join("from-flag");
    let marker = "potential_plot/potential.csv";

    assert_eq!(
        code(&samlab(&["potential_plot", "--config", cfg.to_str().unwrap()], None)),
        0
    );
    assert!(from_cfg.join(marker).exists());

    assert_eq!(
        code(&samlab(
            &["potential_plot", "--config", cfg.to_str().unwrap()],
            Some(&env_dir)
        )),
        0
    );
    assert!(env_dir.join(marker).exists());

    let args = [
        "potential_plot",
        "--config",
        cfg.to_str().unwrap(),
        "--output",
        flag_dir.to_str().unwrap(),
    ];
    assert_eq!(code(&samlab(&args, Some(&dir.path().join("unused")))), 0);
    assert!(flag_dir.join(marker).exists());
    assert!(!dir.path().join("unused").exists());
}

#[test]
fn json_and_toml_configs_hash_the_same() {
    let dir = tempfile::tempdir().unwrap();
    let toml_cfg = write(dir.path(), "c.toml", SMALL_POTENTIAL);
    let json_cfg = write(
        dir.path(),
        "c.json",
        r#"{"schema_version": 1, "seeds": [0], "potential_plot": {"alpha_scales": [0.1, 1.0], "extent": 1.0, "grid_points": 5}}"#,
    );
    let mut heads = Vec::new();
    for (k, cfg) in [toml_cfg, json_cfg].iter().enumerate() {
        let out_dir = dir.path().join(format!("out{k}"));
        let out = samlab(
            &[
                "potential_plot",
                "--config",
                cfg.to_str().unwrap(),
                "--output",
                out_dir.to_str().unwrap(),
            ],
            None,
        );
        assert_eq!(code(&out), 0);
        heads.push(std::fs::read(out_dir.join("potential_plot/potential.csv")).unwrap());
    }
    assert_eq!(heads[0], heads[1]);
}

#[test]
fn seed_offset_shifts_every_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "c.toml",
        &SMALL_POTENTIAL.replace("seeds = [0]", "seeds = [0, 2]"),
    );
    let out_dir = dir.path().join("out");
    let out = samlab(
        &[
            "potential_plot",
            "--config",
            cfg.to_str().unwrap(),
            "--output",
            out_dir.to_str().unwrap(),
            "--seed-offset",
            "10",
            "--jobs",
            "1",
        ],
        None,
    );
    assert_eq!(code(&out), 0);
    let csv = std::fs::read_to_string(out_dir.join("potential_plot/potential.csv")).unwrap();
    assert_eq!(csv.lines().nth(1), Some("#seed=10;12"));
}

#[test]
fn invalid_configs_are_hard_failures() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        ("empty.toml", "schema_version = 1\nseeds = []\n"),
        ("version.toml", "schema_version = 99\n"),
        ("unknown.toml", "schema_version = 1\nsurprise = 3\n"),
        ("other.toml", "schema_version = 1\nexperiment = \"train\"\n"),
        ("bad.yaml", "schema_version: 1\n"),
    ];
    for (name, text) in cases {
        let cfg = write(dir.path(), name, text);
        let out = samlab(
            &[
                "potential_plot",
                "--config",
                cfg.to_str().unwrap(),
                "--output",
                dir.path().to_str().unwrap(),
            ],
            None,
        );
        assert_eq!(code(&out), 1, "{name}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let missing = samlab(&["potential_plot", "--config", "/nonexistent/c.toml"], None);
    assert_eq!(code(&missing), 1);
    let unknown = samlab(&["fly", "--config", "c.toml"], None);
    assert_eq!(code(&unknown), 1);
}

#[test]
fn diverged_runs_are_soft_failures() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "c.toml",
        "schema_version = 1\nseeds = [0]\n[compare_rho_grid]\nmode = \"full_batch\"\nalpha = 0.05\ngamma = 50.0\nbatch_size = 1\nrho_grid = [0.01]\nmethods = [\"gd\"]\nmax_steps = 1000\nstop_loss = 1e-10\nconverged_loss = 1e-8\n",
    );
    let out_dir = dir.path().join("out");
    let out = samlab(
        &[
            "compare_rho_grid",
            "--config",
            cfg.to_str().unwrap(),
            "--output",
            out_dir.to_str().unwrap(),
        ],
        None,
    );
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
    let grid = std::fs::read_to_string(out_dir.join("compare_rho_grid/grid.csv")).unwrap();
    assert!(grid.contains(",diverged,"));
}

#[test]
fn failed_checks_are_hard_failures() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "c.toml",
        "schema_version = 1\nseeds = [0]\n[dataset]\nd = 6\nn = 4\nk = 1\n[bias_verify]\nalpha = 0.1\nrho = 0.05\nmethods = [\"one_sam\"]\ngamma_fraction = 0.1\nmax_steps = 2000000\nstop_loss = 1e-12\ntolerance = 1e-15\n",
    );
    let out = samlab(
        &[
            "bias_verify",
            "--config",
            cfg.to_str().unwrap(),
            "--output",
            dir.path().join("o").to_str().unwrap(),
        ],
        None,
    );
    assert_eq!(code(&out), 1, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("relative error"));
}

#[test]
fn shipped_configs_load() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut count = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        let cfg = samlab::config::RunConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e:#}", path.display()));
        assert!(cfg.experiment.is_some(), "{}", path.display());
        assert!(!cfg.seeds.is_empty(), "{}", path.display());
        count += 1;
    }
    assert_eq!(count, 10);
}

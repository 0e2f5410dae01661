use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ippal_cli::{declared_run_outputs, load_config, parse_config, ExperimentConfig};

const TINY: &str = r#"
seeds = [3]
missions = 2
budget_s = 25.0
objective = "entropy"
test_footprints = 10

[terrain]
width_m = 32.0
height_m = 32.0
cluster_scale = 8

[model]
max_epochs = 10
ensemble_size = 2

[planner]
kind = "frontier"
mcts_simulations = 30
cmaes_generations = 3

[benchmark]
planners = ["coverage", "local"]
objectives = ["entropy", "novelty"]
"#;

fn ippal(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ippal"))
        .args(args)
        .env_remove("IPPAL_OUT")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("exp.toml");
    fs::write(&p, text).unwrap();
    p
}

fn files_under(dir: &Path) -> BTreeSet<PathBuf> {
    let mut out = BTreeSet::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf());
            }
        }
    }
    out
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn missing_config_exits_2_naming_the_path() {
    let o = ippal(&["run", "--config", "/nonexistent/exp.toml", "--quiet"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/nonexistent/exp.toml"), "{}", stderr(&o));
}

#[test]
fn invalid_config_exits_2_with_line() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "seeds = [1]\n[camera]\nfov_w = 1000\n");
    let o = ippal(&["run", "--config", cfg.to_str().unwrap(), "--quiet"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("exp.toml:3:"), "{err}");
}

#[test]
fn run_writes_exactly_the_declared_files_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = write_config(tmp.path(), TINY);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for out in [&a, &b] {
        let o = ippal(&["run", "--config", cfg_path.to_str().unwrap(), "--out", out.to_str().unwrap(), "--quiet"]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(o.stdout.is_empty());
    }
    let cfg = load_config(&cfg_path).unwrap();
    let declared: BTreeSet<PathBuf> = declared_run_outputs(&cfg, &cfg.seeds).into_iter().collect();
    assert_eq!(files_under(&a), declared);
    for f in &declared {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{}", f.display());
    }
    let metrics = fs::read_to_string(a.join("frontier_entropy_3.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    assert!(metrics.starts_with("mission,images_labeled,miou,acc,f1,ece,"));
}

#[test]
fn seed_flag_overrides_the_seed_list() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = write_config(tmp.path(), TINY);
    let out = tmp.path().join("o");
    let o = ippal(&[
        "run",
        "--config",
        cfg_path.to_str().unwrap(),
        "--seed",
        "11",
        "--out",
        out.to_str().unwrap(),
        "--quiet",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("frontier_entropy_11.csv").exists());
    assert!(!out.join("frontier_entropy_3.csv").exists());
}

#[test]
fn benchmark_writes_one_directory_per_cell_and_a_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = write_config(tmp.path(), TINY);
    let out = tmp.path().join("bench");
    let o = ippal(&[
        "benchmark",
        "--config",
        cfg_path.to_str().unwrap(),
        "--jobs",
        "2",
        "--out",
        out.to_str().unwrap(),
        "--quiet",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    let lines: Vec<&str> = summary.lines().collect();
    assert_eq!(lines[0], "planner,objective,seed,auc_miou,final_miou,final_images");
    let cells: Vec<String> = lines[1..]
        .iter()
        .map(|l| l.split(',').take(3).collect::<Vec<_>>().join("_"))
        .collect();
    assert_eq!(
        cells,
        ["coverage_entropy_3", "coverage_novelty_3", "local_entropy_3", "local_novelty_3"]
    );
    for c in &cells {
        assert!(out.join(c).join(format!("{c}.csv")).exists(), "{c}");
    }
}

#[test]
fn export_maps_is_idempotent_and_reports_corruption() {
    let tmp = tempfile::tempdir().unwrap();
    let empty = tmp.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let o = ippal(&["export-maps", empty.to_str().unwrap(), "--quiet"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(files_under(&empty).is_empty());

    let cfg_path = write_config(tmp.path(), TINY);
    let out = tmp.path().join("run");
    let o = ippal(&["run", "--config", cfg_path.to_str().unwrap(), "--out", out.to_str().unwrap(), "--quiet"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(ippal(&["export-maps", out.to_str().unwrap(), "--quiet"]).status.success());
    let first = files_under(&out);
    assert!(first.iter().any(|p| p.extension().is_some_and(|e| e == "pgm")));
    let snapshot: Vec<(PathBuf, Vec<u8>)> = first.iter().map(|p| (p.clone(), fs::read(out.join(p)).unwrap())).collect();
    assert!(ippal(&["export-maps", out.to_str().unwrap(), "--quiet"]).status.success());
    assert_eq!(files_under(&out), first);
    for (p, bytes) in snapshot {
        assert_eq!(fs::read(out.join(&p)).unwrap(), bytes, "{}", p.display());
    }

    let snap = out.join("frontier_entropy_3_map.snap");
    let mut bytes = fs::read(&snap).unwrap();
    let len = bytes.len();
    bytes.truncate(len - len / 3);
    fs::write(&snap, bytes).unwrap();
    let o = ippal(&["export-maps", out.to_str().unwrap(), "--quiet"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("frontier_entropy_3_map.snap"), "{}", stderr(&o));
}

#[test]
fn written_config_parses_back() {
    let cfg = parse_config(TINY, Path::new("tiny.toml")).unwrap();
    let again = parse_config(&cfg.to_toml(), Path::new("again.toml")).unwrap();
    assert_eq!(cfg, again);
    assert_ne!(cfg, ExperimentConfig::default());
}

//! Experiment configuration, commands and artifact writers behind the
//! `ippal` binary.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use ippal::map::{MapConfig, MultiLayerMap};
use ippal::metrics::normalized_auc;
use ippal::mission::{run_campaign, CampaignConfig, CampaignResult, MetricRow, Objective, TestRegime};
use ippal::model::ModelConfig;
use ippal::plan::{KinematicModel, PlannerConfig, PlannerKind};
use ippal::terrain::{CameraModel, TerrainConfig};
use serde::{Deserialize, Serialize};

/// Output root when neither `--out`, the config, nor `IPPAL_OUT` name one.
pub const DEFAULT_OUT: &str = "ippal-out";

/// Matrix swept by `benchmark`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub planners: Vec<PlannerKind>,
    pub objectives: Vec<Objective>,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            planners: PlannerKind::ALL.to_vec(),
            objectives: Objective::ALL.to_vec(),
        }
    }
}

/// Top-level config file. Campaign keys sit at the top level next to the
/// seed list, output directory and benchmark matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub objective: Objective,
    pub missions: usize,
    pub budget_s: f64,
    pub informed_priors: bool,
    pub stream_mapping: bool,
    pub test_regime: TestRegime,
    pub test_footprints: usize,
    pub knn_k: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub start: Option<[f64; 2]>,
    pub terrain: TerrainConfig,
    pub camera: CameraModel,
    pub model: ModelConfig,
    pub map: MapConfig,
    pub planner: PlannerConfig,
    pub kinematics: KinematicModel,
    pub benchmark: BenchmarkConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig::from_campaign(CampaignConfig::default(), vec![0])
    }
}

impl ExperimentConfig {
    pub fn from_campaign(c: CampaignConfig, seeds: Vec<u64>) -> Self {
        ExperimentConfig {
            seeds,
            output_dir: None,
            objective: c.objective,
            missions: c.missions,
            budget_s: c.budget_s,
            informed_priors: c.informed_priors,
            stream_mapping: c.stream_mapping,
            test_regime: c.test_regime,
            test_footprints: c.test_footprints,
            knn_k: c.knn_k,
            start: c.start,
            terrain: c.terrain,
            camera: c.camera,
            model: c.model,
            map: c.map,
            planner: c.planner,
            kinematics: c.kinematics,
            benchmark: BenchmarkConfig::default(),
        }
    }

    pub fn campaign(&self) -> CampaignConfig {
        CampaignConfig {
            terrain: self.terrain.clone(),
            camera: self.camera,
            model: self.model.clone(),
            map: self.map,
            planner: self.planner.clone(),
            kinematics: self.kinematics,
            objective: self.objective,
            missions: self.missions,
            budget_s: self.budget_s,
            informed_priors: self.informed_priors,
            stream_mapping: self.stream_mapping,
            test_regime: self.test_regime,
            test_footprints: self.test_footprints,
            knn_k: self.knn_k,
            start: self.start,
        }
    }

    pub fn validate(&self) -> ippal::Result<()> {
        if self.seeds.is_empty() {
            return Err(ippal::Error::Config("seeds must list at least one seed".into()));
        }
        if self.benchmark.planners.is_empty() || self.benchmark.objectives.is_empty() {
            return Err(ippal::Error::Config(
                "benchmark planners and objectives must be non-empty".into(),
            ));
        }
        self.campaign().validate()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }
}

/// Invalid configuration; the binary exits with status 2.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub path: PathBuf,
    /// 1-based line, when the problem can be pinned to one.
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "{}:{}: {}", self.path.display(), l, self.message),
            None => write!(f, "{}: {}", self.path.display(), self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Line of the assignment to the longest key named in `message`.
fn line_of_key(text: &str, message: &str) -> Option<usize> {
    let mut best: Option<(usize, usize)> = None;
    for (i, line) in text.lines().enumerate() {
        let Some((key, _)) = line.split_once('=') else { continue };
        let key = key.trim().trim_matches('"');
        if key.is_empty() || key.starts_with('#') {
            continue;
        }
        let named = message.match_indices(key).any(|(pos, _)| {
            let before = message[..pos].chars().next_back();
            let after = message[pos + key.len()..].chars().next();
            let boundary = |c: Option<char>| c.is_none_or(|c| !(c.is_alphanumeric() || c == '_'));
            boundary(before) && boundary(after)
        });
        if named && best.is_none_or(|(len, _)| key.len() > len) {
            best = Some((key.len(), i + 1));
        }
    }
    best.map(|(_, line)| line)
}

/// Parses and validates config text; errors carry the offending line.
pub fn parse_config(text: &str, path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| ConfigError {
        path: path.to_path_buf(),
        line: e.span().map(|s| line_of(text, s.start)),
        message: e.message().trim().to_string(),
    })?;
    cfg.validate().map_err(|e| {
        let message = e.to_string();
        ConfigError {
            path: path.to_path_buf(),
            line: line_of_key(text, &message),
            message,
        }
    })?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = fs::read_to_string(path).map_err(|e| ConfigError {
        path: path.to_path_buf(),
        line: None,
        message: format!("cannot read config: {e}"),
    })?;
    parse_config(&text, path)
}

/// `--out`, then the config's `output_dir`, then `IPPAL_OUT`, then
/// [`DEFAULT_OUT`].
pub fn resolve_out(flag: Option<&Path>, cfg: &ExperimentConfig, env: Option<&str>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| cfg.output_dir.clone())
        .or_else(|| env.filter(|s| !s.is_empty()).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

pub fn campaign_stem(planner: PlannerKind, objective: Objective, seed: u64) -> String {
    format!("{planner}_{objective}_{seed}")
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .with_context(|| format!("cannot create {}", path.display()))
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricRow], classes: usize) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(MetricRow::header(classes))?;
    for r in rows {
        w.write_record(r.record())?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a metrics CSV back as `(images_labeled, miou)` points.
pub fn read_miou_curve(path: &Path) -> Result<Vec<(f64, f64)>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("cannot read {}", path.display()))?;
    let headers = r.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .with_context(|| format!("{} has no {name} column", path.display()))
    };
    let (xi, yi) = (col("images_labeled")?, col("miou")?);
    r.records()
        .map(|rec| {
            let rec = rec?;
            Ok((rec[xi].parse()?, rec[yi].parse()?))
        })
        .collect()
}

/// Writes the metrics CSV, one path trace per mission, and the final map
/// snapshot for one campaign. Returns the written files.
pub fn write_campaign(dir: &Path, stem: &str, result: &CampaignResult, classes: usize) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let mut written = Vec::new();
    let metrics = dir.join(format!("{stem}.csv"));
    write_metrics_csv(&metrics, &result.rows, classes)?;
    written.push(metrics);
    for (m, trace) in result.traces.iter().enumerate() {
        let path = dir.join(format!("{stem}_mission{m}_path.csv"));
        let mut w = csv_writer(&path)?;
        w.write_record(["t", "x", "y", "z", "cost_so_far"])?;
        for row in trace {
            w.write_record([
                row.t.to_string(),
                row.x.to_string(),
                row.y.to_string(),
                row.z.to_string(),
                row.cost_so_far.to_string(),
            ])?;
        }
        w.flush()?;
        written.push(path);
    }
    let snap = dir.join(format!("{stem}_map.snap"));
    let mut bytes = Vec::new();
    result.map.write_snapshot(&mut bytes)?;
    fs::write(&snap, bytes).with_context(|| format!("cannot write {}", snap.display()))?;
    written.push(snap);
    Ok(written)
}

/// Files a `run` of `cfg` produces for `seeds`, relative to the output
/// directory.
pub fn declared_run_outputs(cfg: &ExperimentConfig, seeds: &[u64]) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for &seed in seeds {
        let stem = campaign_stem(cfg.planner.kind, cfg.objective, seed);
        out.push(PathBuf::from(format!("{stem}.csv")));
        for m in 0..cfg.missions {
            out.push(PathBuf::from(format!("{stem}_mission{m}_path.csv")));
        }
        out.push(PathBuf::from(format!("{stem}_map.snap")));
    }
    out
}

/// Runs one campaign per seed into `out`.
pub fn cmd_run(cfg: &ExperimentConfig, seeds: &[u64], out: &Path, quiet: bool) -> Result<Vec<PathBuf>> {
    let campaign = cfg.campaign();
    let mut written = Vec::new();
    for &seed in seeds {
        let stem = campaign_stem(cfg.planner.kind, cfg.objective, seed);
        let result = run_campaign(&campaign, seed).with_context(|| format!("campaign {stem} failed"))?;
        written.extend(write_campaign(out, &stem, &result, cfg.terrain.classes)?);
        if !quiet {
            let last = result.rows.last().expect("at least one mission");
            eprintln!(
                "{stem}: {} images, final mIoU {:.4}",
                last.images_labeled, last.miou
            );
        }
    }
    Ok(written)
}

/// One benchmark matrix cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cell {
    pub planner: PlannerKind,
    pub objective: Objective,
    pub seed: u64,
}

impl Cell {
    pub fn stem(&self) -> String {
        campaign_stem(self.planner, self.objective, self.seed)
    }
}

/// Planner-major cross product of the benchmark matrix.
pub fn benchmark_cells(cfg: &ExperimentConfig, seeds: &[u64]) -> Vec<Cell> {
    let mut cells = Vec::new();
    for &planner in &cfg.benchmark.planners {
        for &objective in &cfg.benchmark.objectives {
            for &seed in seeds {
                cells.push(Cell {
                    planner,
                    objective,
                    seed,
                });
            }
        }
    }
    cells
}

/// Summary line of one finished cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    pub cell: Cell,
    pub auc_miou: f64,
    pub final_miou: f64,
    pub final_images: usize,
}

pub const SUMMARY_FILE: &str = "summary.csv";

pub fn run_cell(cfg: &ExperimentConfig, cell: Cell, out: &Path) -> Result<CellSummary> {
    let mut campaign = cfg.campaign();
    campaign.planner.kind = cell.planner;
    campaign.objective = cell.objective;
    let stem = cell.stem();
    let result = run_campaign(&campaign, cell.seed).with_context(|| format!("benchmark cell {stem} failed"))?;
    write_campaign(&out.join(&stem), &stem, &result, cfg.terrain.classes)?;
    let curve: Vec<(f64, f64)> = result
        .rows
        .iter()
        .map(|r| (r.images_labeled as f64, r.miou))
        .collect();
    let last = result.rows.last().expect("at least one mission");
    Ok(CellSummary {
        cell,
        auc_miou: normalized_auc(&curve),
        final_miou: last.miou,
        final_images: last.images_labeled,
    })
}

/// Runs every cell on a pool of `jobs` threads, each cell into its own
/// subdirectory, and writes `summary.csv` in cell order.
pub fn cmd_benchmark(
    cfg: &ExperimentConfig,
    seeds: &[u64],
    out: &Path,
    jobs: usize,
    quiet: bool,
) -> Result<Vec<CellSummary>> {
    use rayon::prelude::*;
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let cells = benchmark_cells(cfg, seeds);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .context("cannot start worker pool")?;
    let results: Vec<Result<CellSummary>> = pool.install(|| {
        cells
            .par_iter()
            .map(|&cell| {
                let s = run_cell(cfg, cell, out)?;
                if !quiet {
                    eprintln!("{}: auc {:.4}", cell.stem(), s.auc_miou);
                }
                Ok(s)
            })
            .collect()
    });
    let summaries = results.into_iter().collect::<Result<Vec<_>>>()?;
    let mut w = csv_writer(&out.join(SUMMARY_FILE))?;
    w.write_record(["planner", "objective", "seed", "auc_miou", "final_miou", "final_images"])?;
    for s in &summaries {
        w.write_record([
            s.cell.planner.to_string(),
            s.cell.objective.to_string(),
            s.cell.seed.to_string(),
            s.auc_miou.to_string(),
            s.final_miou.to_string(),
            s.final_images.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(summaries)
}

fn find_snapshots(dir: &Path, found: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("cannot read {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            find_snapshots(&p, found)?;
        } else if p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with("_map.snap")) {
            found.push(p);
        }
    }
    Ok(())
}

/// Converts every `*_map.snap` under `dir` into per-layer PGMs and a
/// manifest next to the snapshot. Returns the written files.
pub fn cmd_export_maps(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut snaps = Vec::new();
    find_snapshots(dir, &mut snaps)?;
    let mut written = Vec::new();
    for snap in snaps {
        let bytes = fs::read(&snap).with_context(|| format!("cannot read {}", snap.display()))?;
        let map = MultiLayerMap::read_snapshot(&bytes).with_context(|| format!("corrupt snapshot {}", snap.display()))?;
        let name = snap.file_name().and_then(|n| n.to_str()).expect("matched by name");
        let stem = name.trim_end_matches(".snap");
        let parent = snap.parent().expect("file has a parent");
        written.extend(map.export_pgm_layers(parent, stem)?);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_default() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml();
        assert_eq!(parse_config(&text, Path::new("x.toml")).unwrap(), cfg);
    }

    #[test]
    fn syntax_error_has_line() {
        let text = "seeds = [1]\nmissions = 3\nbudget_s = \n";
        let e = parse_config(text, Path::new("c.toml")).unwrap_err();
        assert_eq!(e.line, Some(3), "{e}");
    }

    #[test]
    fn validation_error_has_line() {
        let text = "seeds = [1]\n\n[model]\nlatent_dim = 4\npatch_factor = 5\n";
        let e = parse_config(text, Path::new("c.toml")).unwrap_err();
        assert_eq!(e.line, Some(5), "{e}");
    }

    #[test]
    fn unknown_key_has_line() {
        let text = "seeds = [1]\n[planner]\nhorizon = 2\nhorizn = 3\n";
        let e = parse_config(text, Path::new("c.toml")).unwrap_err();
        assert_eq!(e.line, Some(4), "{e}");
    }

    #[test]
    fn out_dir_precedence() {
        let mut cfg = ExperimentConfig::default();
        assert_eq!(resolve_out(None, &cfg, None), PathBuf::from(DEFAULT_OUT));
        assert_eq!(resolve_out(None, &cfg, Some("/e")), PathBuf::from("/e"));
        cfg.output_dir = Some("/c".into());
        assert_eq!(resolve_out(None, &cfg, Some("/e")), PathBuf::from("/c"));
        assert_eq!(resolve_out(Some(Path::new("/f")), &cfg, Some("/e")), PathBuf::from("/f"));
    }
}

//! Batch runner for the scripted-operator condition matrix.
//!
//! A config is a TOML file:
//!
//! ```toml
//! map = "two_room.txt"        # relative to the config file
//! start = [6.6, 3.6]          # world meters
//! goal = [1.4, 4.1]
//! directions = ["all", "eight", "four"]
//! accuracies = [1.0, 0.9, 0.8, 0.7]
//! modes = ["shared", "direct"]
//! trials = 20
//! base_seed = 1
//!
//! [estimator]
//! window = 10
//! threshold = 0.95
//! beta = 4.0
//!
//! [robot]
//! speed = 0.3
//! radius = 0.25
//! dt = 0.05
//! timeout = 120.0
//! goal_radius = 0.3
//! period = 1.0
//! ```
//!
//! The `all` direction set is never corrupted, so it only runs at accuracy
//! 1.0 whatever `accuracies` lists.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::goal_estimator::{EstimatorParams, DEFAULT_BETA, DEFAULT_THRESHOLD, DEFAULT_WINDOW};
use crate::gridmap::{load_map, Cell, MapError, OccupancyGrid, WorldPoint};
use crate::pseudo_user::{DirectionSet, InputCondition};
use crate::shared_controller::ControlMode;
use crate::simulator::{run_trial, write_trajectory, RobotParams, TrialError, TrialParams, TrialResult};

pub const RESULTS_HEADER: &str = "direction,accuracy,mode,seed,success,collisions,elapsed_s,path_length_m";
pub const SUMMARY_HEADER: &str = "direction,accuracy,mode,trials,success_rate,\
collisions_mean,collisions_std,elapsed_mean,elapsed_std,path_length_mean,path_length_std,\
collisions_p,elapsed_p,path_length_p,collisions_sig,elapsed_sig,path_length_sig";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("{path}: line {line}: {message}")]
    Config { path: String, line: usize, message: String },
    #[error("map: {0}")]
    Map(#[from] MapError),
    #[error("trial: {0}")]
    Trial(#[from] TrialError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl ExperimentError {
    pub fn is_config(&self) -> bool {
        matches!(self, ExperimentError::Config { .. } | ExperimentError::Map(_))
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    map: PathBuf,
    start: [f64; 2],
    goal: [f64; 2],
    #[serde(default = "default_directions")]
    directions: Vec<String>,
    #[serde(default = "default_accuracies")]
    accuracies: Vec<f64>,
    #[serde(default = "default_modes")]
    modes: Vec<String>,
    #[serde(default = "default_trials")]
    trials: usize,
    #[serde(default)]
    base_seed: u64,
    #[serde(default)]
    estimator: RawEstimator,
    #[serde(default)]
    robot: RawRobot,
}

fn default_directions() -> Vec<String> {
    vec!["all".into(), "eight".into(), "four".into()]
}
fn default_accuracies() -> Vec<f64> {
    vec![1.0, 0.9, 0.8, 0.7]
}
fn default_modes() -> Vec<String> {
    vec!["shared".into(), "direct".into()]
}
fn default_trials() -> usize {
    20
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawEstimator {
    window: usize,
    threshold: f64,
    beta: f64,
}

impl Default for RawEstimator {
    fn default() -> Self {
        Self { window: DEFAULT_WINDOW, threshold: DEFAULT_THRESHOLD, beta: DEFAULT_BETA }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawRobot {
    speed: f64,
    radius: f64,
    dt: f64,
    timeout: f64,
    goal_radius: f64,
    period: f64,
}

impl Default for RawRobot {
    fn default() -> Self {
        let r = RobotParams::default();
        Self {
            speed: r.speed,
            radius: r.radius,
            dt: r.dt,
            timeout: r.timeout,
            goal_radius: r.goal_radius,
            period: 1.0,
        }
    }
}

/// One cell of the condition matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionCell {
    pub directions: DirectionSet,
    pub accuracy: f64,
    pub mode: ControlMode,
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub map_path: PathBuf,
    /// Map after inflation by the robot radius.
    pub grid: Arc<OccupancyGrid>,
    pub start: WorldPoint,
    pub goal: Cell,
    pub cells: Vec<ConditionCell>,
    pub trials: usize,
    pub base_seed: u64,
    pub period: f64,
    pub params: TrialParams,
}

/// 1-based line of the first line whose key matches, for error anchoring.
fn line_of(text: &str, key: &str) -> usize {
    text.lines()
        .position(|l| {
            let t = l.trim_start();
            t.strip_prefix(key).is_some_and(|rest| rest.trim_start().starts_with('='))
        })
        .map_or(1, |i| i + 1)
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ExperimentError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| ExperimentError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::parse(&text, base, &path.display().to_string())
    }

    /// Parse config text; relative map paths resolve against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path, name: &str) -> Result<Self, ExperimentError> {
        let raw = Self::parse_raw(text, name)?;
        let map_path = if raw.map.is_absolute() { raw.map.clone() } else { base_dir.join(&raw.map) };
        let err = |key: &str, message: String| ExperimentError::Config {
            path: name.to_string(),
            line: line_of(text, key),
            message,
        };
        let grid = load_map(&map_path).map_err(|e| err("map", e.to_string()))?;
        Self::from_raw(raw, grid, map_path, text, name)
    }

    /// Syntax and field checks only, no map access.
    fn parse_raw(text: &str, name: &str) -> Result<RawConfig, ExperimentError> {
        toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1)
                .unwrap_or(1);
            ExperimentError::Config {
                path: name.to_string(),
                line,
                message: e.message().to_string(),
            }
        })
    }

    /// Validate config text without touching the filesystem.
    pub fn check_syntax(text: &str) -> Result<(), ExperimentError> {
        Self::parse_raw(text, "<config>").map(|_| ())
    }

    fn from_raw(
        raw: RawConfig,
        raw_grid: OccupancyGrid,
        map_path: PathBuf,
        text: &str,
        name: &str,
    ) -> Result<Self, ExperimentError> {
        let err = |key: &str, message: String| ExperimentError::Config {
            path: name.to_string(),
            line: line_of(text, key),
            message,
        };
        let r = &raw.robot;
        for (key, v) in [
            ("speed", r.speed),
            ("dt", r.dt),
            ("timeout", r.timeout),
            ("goal_radius", r.goal_radius),
            ("period", r.period),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(err(key, format!("`{key}` must be positive, got {v}")));
            }
        }
        if !(r.radius.is_finite() && r.radius >= 0.0) {
            return Err(err("radius", format!("`radius` must be nonnegative, got {}", r.radius)));
        }
        let e = &raw.estimator;
        if !(e.threshold > 0.0 && e.threshold < 1.0) {
            return Err(err("threshold", format!("`threshold` must lie in (0, 1), got {}", e.threshold)));
        }
        if !(e.beta.is_finite() && e.beta >= 0.0) {
            return Err(err("beta", format!("`beta` must be nonnegative, got {}", e.beta)));
        }
        if raw.trials == 0 {
            return Err(err("trials", "`trials` must be at least 1".into()));
        }

        let directions = raw
            .directions
            .iter()
            .map(|d| d.parse::<DirectionSet>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|m| err("directions", m))?;
        let modes = raw
            .modes
            .iter()
            .map(|m| m.parse::<ControlMode>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|m| err("modes", m))?;
        for a in &raw.accuracies {
            if !(0.0..=1.0).contains(a) {
                return Err(err("accuracies", format!("accuracy {a} outside [0, 1]")));
            }
        }
        if directions.is_empty() || modes.is_empty() {
            return Err(err("directions", "condition matrix is empty".into()));
        }
        let mut cells = Vec::new();
        for d in &directions {
            let accs: Vec<f64> = if *d == DirectionSet::All { vec![1.0] } else { raw.accuracies.clone() };
            if accs.is_empty() {
                return Err(err("accuracies", "no accuracy levels".into()));
            }
            for a in accs {
                for m in &modes {
                    cells.push(ConditionCell { directions: *d, accuracy: a, mode: *m });
                }
            }
        }

        let grid = raw_grid.inflate(r.radius);
        let start = WorldPoint::new(raw.start[0], raw.start[1]);
        let goal_point = WorldPoint::new(raw.goal[0], raw.goal[1]);
        match grid.world_to_cell(start) {
            Some(c) if grid.is_free(c) => {}
            _ => return Err(err("start", format!("start ({}, {}) is not a free cell of the inflated map", start.x, start.y))),
        }
        let goal = match grid.world_to_cell(goal_point) {
            Some(c) if grid.is_free(c) => c,
            _ => return Err(err("goal", format!("goal ({}, {}) is not a free cell of the inflated map", goal_point.x, goal_point.y))),
        };
        let field = crate::potential_field::compute_field(&grid, goal).map_err(|e| err("goal", e.to_string()))?;
        if !field.is_reachable(grid.world_to_cell(start).expect("checked above")) {
            return Err(err("goal", "goal is unreachable from start".into()));
        }

        let robot = RobotParams {
            speed: r.speed,
            radius: r.radius,
            dt: r.dt,
            timeout: r.timeout,
            goal_radius: r.goal_radius,
        };
        let estimator = EstimatorParams {
            window: e.window,
            threshold: e.threshold,
            beta: e.beta,
            speed: r.speed,
        };
        Ok(Self {
            map_path,
            grid: Arc::new(grid),
            start,
            goal,
            cells,
            trials: raw.trials,
            base_seed: raw.base_seed,
            period: r.period,
            params: TrialParams { robot, estimator },
        })
    }
}

/// `base_seed` plus a stable hash of the condition cell and trial index.
pub fn trial_seed(base_seed: u64, cell: &ConditionCell, trial: usize) -> u64 {
    let key = format!("{}|{}|{}|{}", cell.directions, cell.accuracy, cell.mode.as_str(), trial);
    let digest = Sha256::digest(key.as_bytes());
    let mut b = [0u8; 8];
    b.copy_from_slice(&digest[..8]);
    base_seed.wrapping_add(u64::from_le_bytes(b))
}

/// One results-table row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRow {
    pub direction: DirectionSet,
    pub accuracy: f64,
    pub mode: ControlMode,
    pub seed: u64,
    pub success: bool,
    pub collisions: u32,
    pub elapsed_s: f64,
    pub path_length_m: f64,
}

impl TrialRow {
    fn from_result(r: &TrialResult) -> Self {
        Self {
            direction: r.condition.directions,
            accuracy: r.condition.accuracy,
            mode: r.condition.mode,
            seed: r.seed,
            success: r.success,
            collisions: r.collisions,
            elapsed_s: r.elapsed,
            path_length_m: r.path_length,
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions<'a> {
    pub trajectories: Option<&'a Path>,
}

/// Run every trial of the matrix. Rows come back in condition-then-trial
/// order regardless of worker scheduling.
pub fn run_experiment(config: &ExperimentConfig, options: &RunOptions<'_>) -> Result<Vec<TrialRow>, ExperimentError> {
    if let Some(dir) = options.trajectories {
        fs::create_dir_all(dir).map_err(|source| ExperimentError::Io { path: dir.display().to_string(), source })?;
    }
    let jobs: Vec<(ConditionCell, usize)> = config
        .cells
        .iter()
        .flat_map(|c| (0..config.trials).map(move |i| (*c, i)))
        .collect();
    jobs.par_iter()
        .map(|(cell, i)| {
            let seed = trial_seed(config.base_seed, cell, *i);
            let condition = InputCondition {
                directions: cell.directions,
                accuracy: cell.accuracy,
                period: config.period,
                mode: cell.mode,
            };
            let mut traj = options.trajectories.map(|_| Vec::new());
            let result = run_trial(config.grid.clone(), config.start, config.goal, condition, seed, &config.params, traj.as_mut())?;
            if let (Some(dir), Some(samples)) = (options.trajectories, traj) {
                let name = format!("{}_{}_{}_{:03}.csv", cell.directions, cell.accuracy, cell.mode.as_str(), i);
                let path = dir.join(name);
                let f = fs::File::create(&path).map_err(|source| ExperimentError::Io { path: path.display().to_string(), source })?;
                write_trajectory(std::io::BufWriter::new(f), &samples)?;
            }
            Ok(TrialRow::from_result(&result))
        })
        .collect()
}

pub fn write_results<W: Write>(out: W, rows: &[TrialRow]) -> Result<(), ExperimentError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(RESULTS_HEADER.split(','))?;
    for r in rows {
        w.write_record([
            r.direction.to_string(),
            r.accuracy.to_string(),
            r.mode.as_str().to_string(),
            r.seed.to_string(),
            r.success.to_string(),
            r.collisions.to_string(),
            r.elapsed_s.to_string(),
            r.path_length_m.to_string(),
        ])?;
    }
    w.flush().map_err(|source| ExperimentError::Io { path: "<results>".into(), source })?;
    Ok(())
}

pub fn read_results<R: Read>(input: R) -> Result<Vec<TrialRow>, ExperimentError> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header.join(",") != RESULTS_HEADER {
        return Err(ExperimentError::Config {
            path: "<results>".into(),
            line: 1,
            message: format!("unexpected header `{}`", header.join(",")),
        });
    }
    r.deserialize().map(|row| row.map_err(ExperimentError::from)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single trial.
    pub std: f64,
}

pub fn mean_std(xs: &[f64]) -> MeanStd {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() < 2 {
        0.0
    } else {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    MeanStd { mean, std }
}

/// Two-sided Welch t-test p-value. `None` when either arm has fewer than
/// two samples. When both arms have zero variance the test degenerates to
/// exact equality of the means: p = 1 if equal, else 0.
pub fn welch_p(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() < 2 || b.len() < 2 {
        return None;
    }
    let (sa, sb) = (mean_std(a), mean_std(b));
    let (va, vb) = (sa.std.powi(2) / a.len() as f64, sb.std.powi(2) / b.len() as f64);
    let se2 = va + vb;
    if se2 == 0.0 {
        return Some(if sa.mean == sb.mean { 1.0 } else { 0.0 });
    }
    let t = (sa.mean - sb.mean) / se2.sqrt();
    let df = se2.powi(2)
        / (va.powi(2) / (a.len() as f64 - 1.0) + vb.powi(2) / (b.len() as f64 - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).ok()?;
    Some((2.0 * dist.cdf(-t.abs())).min(1.0))
}

/// Significance marker: `***` p<0.001, `**` p<0.01, `*` p<0.05.
pub fn significance_flag(p: Option<f64>) -> &'static str {
    match p {
        Some(p) if p < 0.001 => "***",
        Some(p) if p < 0.01 => "**",
        Some(p) if p < 0.05 => "*",
        _ => "",
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub direction: DirectionSet,
    pub accuracy: f64,
    pub mode: ControlMode,
    pub trials: usize,
    pub success_rate: f64,
    pub collisions: MeanStd,
    pub elapsed: MeanStd,
    pub path_length: MeanStd,
    /// Shared-vs-direct p-values for collisions, elapsed, path length.
    pub p_values: [Option<f64>; 3],
}

type Metric = fn(&TrialRow) -> f64;
const METRICS: [Metric; 3] = [
    |r| r.collisions as f64,
    |r| r.elapsed_s,
    |r| r.path_length_m,
];

/// Aggregate per condition cell, in first-appearance order.
pub fn summarize(rows: &[TrialRow]) -> Vec<SummaryRow> {
    let mut order: Vec<(DirectionSet, u64, ControlMode)> = Vec::new();
    let mut groups: BTreeMap<(String, u64, &'static str), Vec<&TrialRow>> = BTreeMap::new();
    for r in rows {
        let k = (r.direction, r.accuracy.to_bits(), r.mode);
        if !order.contains(&k) {
            order.push(k);
        }
        groups
            .entry((r.direction.to_string(), r.accuracy.to_bits(), r.mode.as_str()))
            .or_default()
            .push(r);
    }
    let column = |g: &[&TrialRow], m: Metric| g.iter().map(|r| m(r)).collect::<Vec<f64>>();

    order
        .iter()
        .map(|&(d, acc, mode)| {
            let g = &groups[&(d.to_string(), acc, mode.as_str())];
            let other = match mode {
                ControlMode::Shared => ControlMode::Direct,
                ControlMode::Direct => ControlMode::Shared,
            };
            let counterpart = groups.get(&(d.to_string(), acc, other.as_str()));
            let p_values = METRICS.map(|m| {
                counterpart.and_then(|o| {
                    let (shared, direct) = match mode {
                        ControlMode::Shared => (column(g, m), column(o, m)),
                        ControlMode::Direct => (column(o, m), column(g, m)),
                    };
                    welch_p(&shared, &direct)
                })
            });
            SummaryRow {
                direction: d,
                accuracy: f64::from_bits(acc),
                mode,
                trials: g.len(),
                success_rate: g.iter().filter(|r| r.success).count() as f64 / g.len() as f64,
                collisions: mean_std(&column(g, METRICS[0])),
                elapsed: mean_std(&column(g, METRICS[1])),
                path_length: mean_std(&column(g, METRICS[2])),
                p_values,
            }
        })
        .collect()
}

pub fn write_summary<W: Write>(out: W, rows: &[SummaryRow]) -> Result<(), ExperimentError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(SUMMARY_HEADER.split(','))?;
    let opt = |p: Option<f64>| p.map(|p| p.to_string()).unwrap_or_default();
    for r in rows {
        let mut rec = vec![
            r.direction.to_string(),
            r.accuracy.to_string(),
            r.mode.as_str().to_string(),
            r.trials.to_string(),
            r.success_rate.to_string(),
        ];
        for m in [r.collisions, r.elapsed, r.path_length] {
            rec.push(m.mean.to_string());
            rec.push(m.std.to_string());
        }
        rec.extend(r.p_values.iter().map(|p| opt(*p)));
        rec.extend(r.p_values.iter().map(|p| significance_flag(*p).to_string()));
        w.write_record(rec)?;
    }
    w.flush().map_err(|source| ExperimentError::Io { path: "<summary>".into(), source })?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(mode: ControlMode, collisions: u32) -> TrialRow {
        TrialRow {
            direction: DirectionSet::Four,
            accuracy: 0.7,
            mode,
            seed: 0,
            success: collisions == 0,
            collisions,
            elapsed_s: 10.0,
            path_length_m: 5.0,
        }
    }

    #[test]
    fn welch_identical_samples() {
        assert_eq!(welch_p(&[1.0, 2.0], &[1.0, 2.0]), Some(1.0));
        assert_eq!(welch_p(&[3.0, 3.0], &[3.0, 3.0]), Some(1.0));
        assert_eq!(welch_p(&[3.0, 3.0], &[4.0, 4.0]), Some(0.0));
        assert_eq!(welch_p(&[1.0], &[1.0, 2.0]), None);
    }

    #[test]
    fn significance_levels() {
        assert_eq!(significance_flag(Some(0.0005)), "***");
        assert_eq!(significance_flag(Some(0.005)), "**");
        assert_eq!(significance_flag(Some(0.03)), "*");
        assert_eq!(significance_flag(Some(0.2)), "");
        assert_eq!(significance_flag(None), "");
    }

    #[test]
    fn summary_pairs_shared_with_direct() {
        let mut rows: Vec<TrialRow> = [0, 0, 0, 0].iter().map(|c| row(ControlMode::Shared, *c)).collect();
        rows.extend([5, 6, 7, 8].iter().map(|c| row(ControlMode::Direct, *c)));
        let s = summarize(&rows);
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].mode, ControlMode::Shared);
        assert_eq!(s[0].success_rate, 1.0);
        assert_eq!(s[1].collisions.mean, 6.5);
        assert_eq!(s[0].p_values, s[1].p_values);
        assert!(s[0].p_values[0].unwrap() < 0.01);
        // identical elapsed and path length in both arms
        assert_eq!(s[0].p_values[1], Some(1.0));
    }

    #[test]
    fn single_trial_cells_have_no_significance() {
        let rows = vec![row(ControlMode::Shared, 0), row(ControlMode::Direct, 3)];
        let s = summarize(&rows);
        assert_eq!(s[0].p_values, [None, None, None]);
        let mut out = Vec::new();
        write_summary(&mut out, &s).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.lines().nth(1).unwrap().ends_with(",,,,,"));
    }

    #[test]
    fn results_csv_round_trip() {
        let rows = vec![row(ControlMode::Shared, 0), row(ControlMode::Direct, 3)];
        let mut out = Vec::new();
        write_results(&mut out, &rows).unwrap();
        assert!(out.starts_with(RESULTS_HEADER.as_bytes()));
        assert_eq!(read_results(out.as_slice()).unwrap(), rows);
    }

    #[test]
    fn seeds_are_distinct_across_cells() {
        let mut seeds = std::collections::HashSet::new();
        for d in [DirectionSet::All, DirectionSet::Eight, DirectionSet::Four] {
            for a in [1.0, 0.9, 0.8, 0.7] {
                for m in [ControlMode::Shared, ControlMode::Direct] {
                    for i in 0..20 {
                        assert!(seeds.insert(trial_seed(7, &ConditionCell { directions: d, accuracy: a, mode: m }, i)));
                    }
                }
            }
        }
    }

    #[test]
    fn config_errors_are_line_anchored() {
        let text = "map = \"m.txt\"\nstart = [1.0, 1.0]\ngoal = [2.0, 2.0]\ntrials = \"many\"\n";
        match ExperimentConfig::check_syntax(text) {
            Err(ExperimentError::Config { line, .. }) => assert_eq!(line, 4),
            other => panic!("{other:?}"),
        }
        let text = "map = \"m.txt\"\nstart = [1.0, 1.0]\ngoal = [2.0, 2.0]\nbogus = 1\n";
        assert!(ExperimentConfig::check_syntax(text).is_err());
    }
}

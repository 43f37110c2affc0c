//! Posterior over the operator's intended goal cell.
//!
//! Every recorded command contributes a per-cell likelihood
//! `exp(-|v_desired(x -> g) - v_user|)`, where `v_desired` is the
//! speed-normalized descent direction toward candidate goal `g` at the
//! position the command was issued from. The posterior is the normalized
//! product over a sliding window of the most recent `N + 1` commands.
//!
//! Computing `v_desired` for every goal naively needs one potential field per
//! goal. Shortest-path costs are symmetric, so the potential of goal `g`
//! sampled at a point `p` equals the potential of goal `p` read at `g`.
//! The central difference at `x` therefore needs only the fields sourced at
//! the four sample cells around `x` plus the one sourced at `x` itself
//! (used for reachability and obstacle-side substitution), regardless of how
//! many goals are scored.

use std::collections::VecDeque;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::command::VelocityCommand;
use crate::gridmap::{Cell, OccupancyGrid, WorldPoint};
use crate::potential_field::{
    compute_field, descent_velocity, gradient_from_samples, sample_cells, FieldError,
};

pub const DEFAULT_WINDOW: usize = 10;
pub const DEFAULT_THRESHOLD: f64 = 0.95;
pub const DEFAULT_BETA: f64 = 4.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimatorError {
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error("command history is empty")]
    EmptyHistory,
    #[error("no feasible goal: every free cell has zero likelihood")]
    NoFeasibleGoal,
    #[error("command at t={time} is not after the previous one at t={last}")]
    NonIncreasingTime { time: f64, last: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CommandRecord {
    pub time: f64,
    pub position: WorldPoint,
    pub velocity: VelocityCommand,
}

/// The last `window + 1` commands, oldest first.
#[derive(Debug, Clone)]
pub struct CommandHistory {
    window: usize,
    records: VecDeque<CommandRecord>,
}

impl CommandHistory {
    /// A history holding at most `window + 1` records.
    pub fn new(window: usize) -> Self {
        Self { window, records: VecDeque::with_capacity(window + 1) }
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn capacity(&self) -> usize {
        self.window + 1
    }

    /// Append, evicting the oldest record when full. Returns the evicted one.
    pub fn push(&mut self, record: CommandRecord) -> Result<Option<CommandRecord>, EstimatorError> {
        if let Some(last) = self.records.back() {
            if record.time <= last.time {
                return Err(EstimatorError::NonIncreasingTime { time: record.time, last: last.time });
            }
        }
        let evicted = if self.records.len() == self.capacity() {
            self.records.pop_front()
        } else {
            None
        };
        self.records.push_back(record);
        Ok(evicted)
    }

    pub fn clear(&mut self) {
        self.records.clear();
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &CommandRecord> {
        self.records.iter()
    }

    pub fn latest(&self) -> Option<&CommandRecord> {
        self.records.back()
    }
}

/// Per-cell likelihood of every goal given one command, values in `[0, 1]`.
/// Occupied cells and goals unreachable from `x` get 0.
pub fn step_likelihood(
    grid: &OccupancyGrid,
    x: WorldPoint,
    v_user: VelocityCommand,
    speed: f64,
) -> Result<Vec<f64>, EstimatorError> {
    Ok(step_log_likelihood(grid, x, v_user, speed)?
        .into_iter()
        .map(f64::exp)
        .collect())
}

/// Natural log of [`step_likelihood`]; `-inf` where the likelihood is 0.
pub fn step_log_likelihood(
    grid: &OccupancyGrid,
    x: WorldPoint,
    v_user: VelocityCommand,
    speed: f64,
) -> Result<Vec<f64>, EstimatorError> {
    let cell = grid
        .world_to_cell(x)
        .ok_or(FieldError::OutOfBounds { x: x.x, y: x.y })?;
    if !grid.is_free(cell) {
        return Err(FieldError::InObstacle { x: x.x, y: x.y }.into());
    }
    let delta = grid.resolution();
    let center = compute_field(grid, cell)?;
    let sampled = sample_cells(grid, x, delta);
    let fields: Vec<Option<Arc<_>>> = {
        let center = Arc::new(center.clone());
        sampled
            .iter()
            .map(|s| {
                s.map(|c| {
                    if c == cell {
                        Ok(center.clone())
                    } else {
                        compute_field(grid, c).map(Arc::new)
                    }
                })
                .transpose()
            })
            .collect::<Result<_, _>>()?
    };

    let out = (0..grid.len())
        .map(|g| {
            let here = center.value_index(g);
            if !here.is_finite() {
                return f64::NEG_INFINITY;
            }
            let samples = [0, 1, 2, 3].map(|k| {
                fields[k].as_ref().map_or(f64::INFINITY, |f| f.value_index(g))
            });
            let grad = gradient_from_samples(here, samples, delta);
            let desired = descent_velocity(grad, speed).unwrap_or(VelocityCommand::ZERO);
            -desired.distance(&v_user)
        })
        .collect();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GoalPosterior {
    width: usize,
    height: usize,
    probabilities: Vec<f64>,
    support: Vec<bool>,
}

impl GoalPosterior {
    /// Normalize a summed log-likelihood grid. Cells outside `grid`'s free
    /// set are forced to zero.
    pub fn from_log_scores(grid: &OccupancyGrid, scores: &[f64]) -> Result<Self, EstimatorError> {
        assert_eq!(scores.len(), grid.len());
        let support: Vec<bool> = grid.cells().iter().map(|c| *c == crate::gridmap::CellState::Free).collect();
        let max = scores
            .iter()
            .zip(&support)
            .filter(|(s, free)| **free && s.is_finite())
            .map(|(s, _)| *s)
            .fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(EstimatorError::NoFeasibleGoal);
        }
        let mut probabilities: Vec<f64> = scores
            .iter()
            .zip(&support)
            .map(|(s, free)| if *free && s.is_finite() { (s - max).exp() } else { 0.0 })
            .collect();
        let total: f64 = probabilities.iter().sum();
        for p in &mut probabilities {
            *p /= total;
        }
        Ok(Self { width: grid.width(), height: grid.height(), probabilities, support })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    pub fn probability(&self, cell: Cell) -> f64 {
        self.probabilities[cell.y * self.width + cell.x]
    }

    pub fn in_support(&self, index: usize) -> bool {
        self.support[index]
    }

    /// Support cells with their probabilities, row-major.
    pub fn support_iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.probabilities
            .iter()
            .enumerate()
            .filter(|(i, _)| self.support[*i])
            .map(|(i, p)| (i, *p))
    }

    /// Most probable cell, lowest row-major index on ties.
    pub fn argmax(&self) -> Cell {
        let (mut best, mut best_p) = (0, f64::NEG_INFINITY);
        for (i, p) in self.support_iter() {
            if p > best_p {
                best = i;
                best_p = p;
            }
        }
        Cell::new(best % self.width, best / self.width)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in self.probabilities.chunks(self.width) {
            let line: Vec<String> = row.iter().map(|p| p.to_string()).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }

    /// Block-sum onto a grid no larger than `max_dim` on either side, then
    /// renormalize.
    pub fn downsample(&self, max_dim: usize) -> Heatmap {
        downsample_probabilities(&self.probabilities, self.width, self.height, max_dim)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub width: usize,
    pub height: usize,
    /// Row-major, row 0 is minimum y.
    pub values: Vec<f64>,
}

pub fn downsample_probabilities(values: &[f64], width: usize, height: usize, max_dim: usize) -> Heatmap {
    assert!(max_dim > 0);
    let factor = width.max(height).div_ceil(max_dim).max(1);
    let (w, h) = (width.div_ceil(factor), height.div_ceil(factor));
    let mut out = vec![0.0; w * h];
    for y in 0..height {
        for x in 0..width {
            out[(y / factor) * w + x / factor] += values[y * width + x];
        }
    }
    let total: f64 = out.iter().sum();
    if total > 0.0 {
        for v in &mut out {
            *v /= total;
        }
    }
    Heatmap { width: w, height: h, values: out }
}

/// Posterior from every record in `history`, each scored at its own position.
pub fn update_posterior(
    grid: &OccupancyGrid,
    history: &CommandHistory,
    speed: f64,
) -> Result<GoalPosterior, EstimatorError> {
    if history.is_empty() {
        return Err(EstimatorError::EmptyHistory);
    }
    let logs = history
        .iter()
        .map(|r| step_log_likelihood(grid, r.position, r.velocity, speed))
        .collect::<Result<Vec<_>, _>>()?;
    GoalPosterior::from_log_scores(grid, &sum_logs(grid.len(), logs.iter().map(|v| v.as_slice())))
}

fn sum_logs<'a>(len: usize, logs: impl Iterator<Item = &'a [f64]>) -> Vec<f64> {
    let mut total = vec![0.0; len];
    for l in logs {
        for (t, v) in total.iter_mut().zip(l) {
            *t += *v;
        }
    }
    total
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalSelection {
    /// Cells above the threshold, row-major.
    pub candidates: Vec<Cell>,
    pub goal: Cell,
    pub p_max: f64,
    pub p_min: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalEstimate {
    pub selection: GoalSelection,
    pub confidence: f64,
}

impl GoalEstimate {
    pub fn goal(&self) -> Cell {
        self.selection.goal
    }
}

/// Candidate set `{g : P(g) > threshold * (p_max - p_min)}` and the member
/// nearest to `x`, ties going to the lower row-major index.
pub fn select_goal(
    posterior: &GoalPosterior,
    grid: &OccupancyGrid,
    x: WorldPoint,
    threshold: f64,
) -> GoalSelection {
    let (mut p_max, mut p_min) = (f64::NEG_INFINITY, f64::INFINITY);
    for (_, p) in posterior.support_iter() {
        p_max = p_max.max(p);
        p_min = p_min.min(p);
    }
    let cut = threshold * (p_max - p_min);

    let mut candidates = Vec::new();
    let mut best: Option<(f64, Cell)> = None;
    for (i, p) in posterior.support_iter() {
        if p > cut {
            let cell = grid.cell_at(i);
            let c = grid.cell_to_world(cell);
            let d2 = (c.x - x.x).powi(2) + (c.y - x.y).powi(2);
            if best.is_none_or(|(bd, _)| d2 < bd) {
                best = Some((d2, cell));
            }
            candidates.push(cell);
        }
    }
    let goal = best.map(|(_, c)| c).unwrap_or_else(|| posterior.argmax());
    if candidates.is_empty() {
        candidates.push(goal);
    }
    GoalSelection { candidates, goal, p_max, p_min }
}

/// `min(1, beta * P(g_t) / sum_{g in G} P(g))`, floored at 0.
pub fn confidence(posterior: &GoalPosterior, selection: &GoalSelection, beta: f64) -> f64 {
    let mass: f64 = selection.candidates.iter().map(|c| posterior.probability(*c)).sum();
    if mass <= 0.0 {
        return 0.0;
    }
    (beta * posterior.probability(selection.goal) / mass).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorParams {
    /// History reaches back `window` commands beyond the current one.
    pub window: usize,
    pub threshold: f64,
    pub beta: f64,
    /// Speed used to normalize desired velocities, m/s.
    pub speed: f64,
}

impl Default for EstimatorParams {
    fn default() -> Self {
        Self {
            window: DEFAULT_WINDOW,
            threshold: DEFAULT_THRESHOLD,
            beta: DEFAULT_BETA,
            speed: 0.3,
        }
    }
}

/// Incremental estimator owning the history. Each record's log-likelihood
/// grid is computed once on arrival; the posterior sums the cached grids in
/// the same order [`update_posterior`] would.
#[derive(Debug, Clone)]
pub struct GoalEstimator {
    params: EstimatorParams,
    grid: Arc<OccupancyGrid>,
    history: CommandHistory,
    logs: VecDeque<Arc<Vec<f64>>>,
    posterior: Option<GoalPosterior>,
    estimate: Option<GoalEstimate>,
}

impl GoalEstimator {
    pub fn new(grid: Arc<OccupancyGrid>, params: EstimatorParams) -> Self {
        Self {
            params,
            grid,
            history: CommandHistory::new(params.window),
            logs: VecDeque::new(),
            posterior: None,
            estimate: None,
        }
    }

    pub fn params(&self) -> &EstimatorParams {
        &self.params
    }

    pub fn history(&self) -> &CommandHistory {
        &self.history
    }

    pub fn posterior(&self) -> Option<&GoalPosterior> {
        self.posterior.as_ref()
    }

    pub fn estimate(&self) -> Option<&GoalEstimate> {
        self.estimate.as_ref()
    }

    pub fn reset(&mut self) {
        self.history.clear();
        self.logs.clear();
        self.posterior = None;
        self.estimate = None;
    }

    /// Record a new command and re-estimate the goal from the robot's
    /// current position `x`.
    pub fn observe(&mut self, record: CommandRecord, x: WorldPoint) -> Result<&GoalEstimate, EstimatorError> {
        let log = step_log_likelihood(&self.grid, record.position, record.velocity, self.params.speed)?;
        if self.history.push(record)?.is_some() {
            self.logs.pop_front();
        }
        self.logs.push_back(Arc::new(log));

        let scores = sum_logs(self.grid.len(), self.logs.iter().map(|l| l.as_slice()));
        let posterior = GoalPosterior::from_log_scores(&self.grid, &scores)?;
        let selection = select_goal(&posterior, &self.grid, x, self.params.threshold);
        let c = confidence(&posterior, &selection, self.params.beta);
        self.posterior = Some(posterior);
        Ok(self.estimate.insert(GoalEstimate { selection, confidence: c }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridmap::CellState;
    use crate::potential_field::desired_velocity;

    const S: f64 = 0.3;

    fn open(n: usize) -> OccupancyGrid {
        OccupancyGrid::free(n, n, 1.0).unwrap()
    }

    fn record(t: f64, p: WorldPoint, v: VelocityCommand) -> CommandRecord {
        CommandRecord { time: t, position: p, velocity: v }
    }

    fn per_goal(grid: &OccupancyGrid, x: WorldPoint, v: VelocityCommand) -> Vec<f64> {
        (0..grid.len())
            .map(|i| {
                let g = grid.cell_at(i);
                if !grid.is_free(g) {
                    return 0.0;
                }
                let f = compute_field(grid, g).unwrap();
                match desired_velocity(&f, grid, x, S) {
                    Ok(d) => (-d.distance(&v)).exp(),
                    Err(FieldError::NoDescent) => (-v.magnitude()).exp(),
                    Err(FieldError::Unreachable { .. }) => 0.0,
                    Err(e) => panic!("{e}"),
                }
            })
            .collect()
    }

    #[test]
    fn perfect_command_scores_one() {
        let g = open(9);
        let x = g.cell_to_world(Cell::new(4, 4));
        let l = step_likelihood(&g, x, VelocityCommand::new(S, 0.0), S).unwrap();
        assert_eq!(l[g.index(Cell::new(8, 4))], 1.0);
        assert_eq!(l[g.index(Cell::new(0, 4))], (-2.0 * S).exp());
    }

    #[test]
    fn unreachable_goals_score_zero() {
        let mut g = open(7);
        for y in 0..7 {
            g.set(Cell::new(3, y), CellState::Occupied);
        }
        let x = g.cell_to_world(Cell::new(1, 3));
        let l = step_likelihood(&g, x, VelocityCommand::new(S, 0.0), S).unwrap();
        assert_eq!(l[g.index(Cell::new(5, 3))], 0.0);
        assert_eq!(l[g.index(Cell::new(3, 3))], 0.0);
        assert!(l[g.index(Cell::new(0, 0))] > 0.0);
    }

    #[test]
    fn fast_likelihood_matches_per_goal_fields() {
        let mut g = open(8);
        for (x, y) in [(3, 2), (3, 3), (3, 4), (5, 6), (6, 1)] {
            g.set(Cell::new(x, y), CellState::Occupied);
        }
        let x = WorldPoint::new(2.3, 3.7);
        let v = VelocityCommand::new(0.1, -0.2);
        let fast = step_likelihood(&g, x, v, S).unwrap();
        let slow = per_goal(&g, x, v);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn history_window_evicts_oldest() {
        let mut h = CommandHistory::new(2);
        for t in 0..4 {
            h.push(record(t as f64, WorldPoint::default(), VelocityCommand::ZERO)).unwrap();
        }
        assert_eq!(h.len(), 3);
        assert_eq!(h.iter().next().unwrap().time, 1.0);
        assert!(matches!(
            h.push(record(3.0, WorldPoint::default(), VelocityCommand::ZERO)),
            Err(EstimatorError::NonIncreasingTime { .. })
        ));
    }

    #[test]
    fn posterior_prefers_commanded_half_plane() {
        let g = open(9);
        let x = g.cell_to_world(Cell::new(4, 4));
        let mut h = CommandHistory::new(10);
        h.push(record(0.0, x, VelocityCommand::new(S, 0.0))).unwrap();
        let p = update_posterior(&g, &h, S).unwrap();
        let best = p.probabilities().iter().cloned().fold(0.0, f64::max);
        for (i, q) in p.support_iter() {
            if q == best {
                assert!(g.cell_at(i).x > 4);
            }
        }
        assert!((p.probabilities().iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn repeated_records_sharpen_by_power() {
        let g = open(7);
        let x = g.cell_to_world(Cell::new(2, 3));
        let v = VelocityCommand::new(0.2, 0.1);
        let mut one = CommandHistory::new(4);
        one.push(record(0.0, x, v)).unwrap();
        let p1 = update_posterior(&g, &one, S).unwrap();

        let mut many = CommandHistory::new(4);
        for t in 0..5 {
            many.push(record(t as f64, x, v)).unwrap();
        }
        let pn = update_posterior(&g, &many, S).unwrap();
        let powered: Vec<f64> = p1.probabilities().iter().map(|p| p.powi(5)).collect();
        let z: f64 = powered.iter().sum();
        for (a, b) in pn.probabilities().iter().zip(&powered) {
            assert!((a - b / z).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_command_at_center_is_uniform_over_ring() {
        // A zero command scores each goal by exp(-|v_desired|) = exp(-s)
        // except the robot's own cell, which scores 1.
        let g = open(5);
        let x = g.cell_to_world(Cell::new(2, 2));
        let mut h = CommandHistory::new(0);
        h.push(record(0.0, x, VelocityCommand::ZERO)).unwrap();
        let p = update_posterior(&g, &h, S).unwrap();
        let others: Vec<f64> = p
            .support_iter()
            .filter(|(i, _)| *i != g.index(Cell::new(2, 2)))
            .map(|(_, q)| q)
            .collect();
        assert!(others.iter().all(|q| (q - others[0]).abs() < 1e-15));
    }

    #[test]
    fn no_feasible_goal() {
        let g = OccupancyGrid::new(
            3,
            3,
            1.0,
            WorldPoint::default(),
            vec![CellState::Occupied; 9],
        )
        .unwrap();
        assert_eq!(
            GoalPosterior::from_log_scores(&g, &[0.0; 9]),
            Err(EstimatorError::NoFeasibleGoal)
        );
        let h = CommandHistory::new(3);
        assert_eq!(update_posterior(&open(3), &h, S), Err(EstimatorError::EmptyHistory));
    }

    fn posterior_from(grid: &OccupancyGrid, probs: &[f64]) -> GoalPosterior {
        let logs: Vec<f64> = probs.iter().map(|p| p.ln()).collect();
        GoalPosterior::from_log_scores(grid, &logs).unwrap()
    }

    #[test]
    fn dominant_mode_is_selected() {
        let g = open(3);
        let mut probs = vec![0.1 / 8.0; 9];
        probs[5] = 0.9;
        let p = posterior_from(&g, &probs);
        let sel = select_goal(&p, &g, WorldPoint::new(0.5, 0.5), 0.95);
        assert_eq!(sel.candidates, vec![g.cell_at(5)]);
        assert_eq!(sel.goal, g.cell_at(5));
        assert_eq!(confidence(&p, &sel, 4.0), 1.0);
        assert_eq!(confidence(&p, &sel, 0.0), 0.0);
    }

    #[test]
    fn nearest_candidate_and_tie_break() {
        let g = OccupancyGrid::free(7, 3, 1.0).unwrap();
        let x = g.cell_to_world(Cell::new(3, 1));
        let mut probs = vec![1e-6; 21];
        probs[g.index(Cell::new(4, 1))] = 1.0;
        probs[g.index(Cell::new(6, 1))] = 1.0;
        let sel = select_goal(&posterior_from(&g, &probs), &g, x, 0.95);
        assert_eq!(sel.goal, Cell::new(4, 1));

        let mut probs = vec![1e-6; 21];
        probs[g.index(Cell::new(2, 1))] = 1.0;
        probs[g.index(Cell::new(4, 1))] = 1.0;
        let sel = select_goal(&posterior_from(&g, &probs), &g, x, 0.95);
        assert_eq!(sel.goal, Cell::new(2, 1));
        assert_eq!(sel.candidates.len(), 2);
    }

    #[test]
    fn eight_equal_members_halve_confidence() {
        let g = open(4);
        let mut probs = vec![1e-9; 16];
        for i in 0..8 {
            probs[i] = 1.0;
        }
        let p = posterior_from(&g, &probs);
        let sel = select_goal(&p, &g, WorldPoint::new(0.5, 0.5), 0.95);
        assert_eq!(sel.candidates.len(), 8);
        assert_eq!(confidence(&p, &sel, 4.0), 0.5);
    }

    #[test]
    fn heatmap_downsample_renormalizes() {
        let g = OccupancyGrid::free(130, 70, 0.1).unwrap();
        let scores: Vec<f64> = (0..g.len()).map(|i| -((i % 17) as f64)).collect();
        let p = GoalPosterior::from_log_scores(&g, &scores).unwrap();
        let h = p.downsample(64);
        assert!(h.width <= 64 && h.height <= 64);
        assert!((h.values.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn estimator_matches_pure_recompute() {
        let grid = Arc::new(open(9));
        let mut est = GoalEstimator::new(grid.clone(), EstimatorParams { window: 2, ..Default::default() });
        let mut h = CommandHistory::new(2);
        let cmds = [(1, 1, S, 0.0), (2, 1, S, 0.0), (3, 2, 0.0, S), (3, 3, 0.0, S), (3, 4, S, 0.0)];
        for (t, (cx, cy, vx, vy)) in cmds.into_iter().enumerate() {
            let p = grid.cell_to_world(Cell::new(cx, cy));
            let r = record(t as f64, p, VelocityCommand::new(vx, vy));
            est.observe(r, p).unwrap();
            h.push(r).unwrap();
            assert_eq!(est.posterior().unwrap(), &update_posterior(&grid, &h, S).unwrap());
        }
        let e = est.estimate().unwrap();
        assert!(e.selection.candidates.contains(&e.goal()));
        assert!((0.0..=1.0).contains(&e.confidence));
    }
}

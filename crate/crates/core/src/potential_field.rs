//! Travel-cost potential toward a goal cell and its central-difference
//! gradient.
//!
//! The potential is the exact 8-connected shortest-path length over free
//! cells, with cardinal steps costing one resolution and diagonal steps
//! `resolution * sqrt(2)`. A diagonal step is only allowed when both cells
//! it passes between are free. Each cell's cost is carried as an integer
//! pair (cardinal steps, diagonal steps) during the search, so the value a
//! cell ends up with depends only on the optimal step counts and not on the
//! order edges were relaxed in.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::f64::consts::SQRT_2;

use thiserror::Error;

use crate::command::VelocityCommand;
use crate::gridmap::{Cell, OccupancyGrid, WorldPoint};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FieldError {
    #[error("goal cell {0} is occupied")]
    GoalOccupied(Cell),
    #[error("goal cell {0} is outside the map")]
    GoalOutOfBounds(Cell),
    #[error("point ({x}, {y}) is outside the map")]
    OutOfBounds { x: f64, y: f64 },
    #[error("point ({x}, {y}) lies in an occupied cell")]
    InObstacle { x: f64, y: f64 },
    #[error("goal is unreachable from ({x}, {y})")]
    Unreachable { x: f64, y: f64 },
    #[error("no descent direction (at goal or on a plateau)")]
    NoDescent,
}

/// The eight neighbor offsets with their step kind (`true` for diagonal).
pub(crate) const NEIGHBORS: [(isize, isize, bool); 8] = [
    (1, 0, false),
    (-1, 0, false),
    (0, 1, false),
    (0, -1, false),
    (1, 1, true),
    (-1, 1, true),
    (1, -1, true),
    (-1, -1, true),
];

/// Cost of `cardinal` straight and `diagonal` diagonal steps, in cells.
#[inline]
pub fn step_cost(cardinal: u32, diagonal: u32) -> f64 {
    cardinal as f64 + diagonal as f64 * SQRT_2
}

/// Free 8-neighbors of `cell` reachable in one legal step.
pub fn neighbors(grid: &OccupancyGrid, cell: Cell) -> impl Iterator<Item = (Cell, bool)> + '_ {
    let (w, h) = (grid.width() as isize, grid.height() as isize);
    NEIGHBORS.iter().filter_map(move |&(dx, dy, diag)| {
        let (nx, ny) = (cell.x as isize + dx, cell.y as isize + dy);
        if nx < 0 || ny < 0 || nx >= w || ny >= h {
            return None;
        }
        let n = Cell::new(nx as usize, ny as usize);
        if !grid.is_free(n) {
            return None;
        }
        if diag
            && !(grid.is_free(Cell::new(nx as usize, cell.y))
                && grid.is_free(Cell::new(cell.x, ny as usize)))
        {
            return None;
        }
        Some((n, diag))
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PotentialField {
    goal: Cell,
    width: usize,
    resolution: f64,
    values: Vec<f64>,
}

impl PotentialField {
    pub fn goal(&self) -> Cell {
        self.goal
    }

    /// Row-major costs in meters; `+inf` where unreachable or occupied.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn value(&self, cell: Cell) -> f64 {
        self.values[cell.y * self.width + cell.x]
    }

    #[inline]
    pub fn value_index(&self, index: usize) -> f64 {
        self.values[index]
    }

    pub fn is_reachable(&self, cell: Cell) -> bool {
        self.value(cell).is_finite()
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    /// Row-major CSV, one map row per line, `inf` for unreachable cells.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in self.values.chunks(self.width) {
            let line: Vec<String> = row
                .iter()
                .map(|v| if v.is_finite() { v.to_string() } else { "inf".to_string() })
                .collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Copy, PartialEq)]
struct Frontier {
    key: f64,
    index: usize,
}

impl Eq for Frontier {}

impl Ord for Frontier {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on key, then index
        other
            .key
            .total_cmp(&self.key)
            .then_with(|| other.index.cmp(&self.index))
    }
}

impl PartialOrd for Frontier {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Shortest-path potential toward `goal`.
pub fn compute_field(grid: &OccupancyGrid, goal: Cell) -> Result<PotentialField, FieldError> {
    if !grid.contains(goal) {
        return Err(FieldError::GoalOutOfBounds(goal));
    }
    if !grid.is_free(goal) {
        return Err(FieldError::GoalOccupied(goal));
    }
    let n = grid.len();
    let mut steps: Vec<Option<(u32, u32)>> = vec![None; n];
    let mut done = vec![false; n];
    let mut heap = BinaryHeap::new();

    let start = grid.index(goal);
    steps[start] = Some((0, 0));
    heap.push(Frontier { key: 0.0, index: start });

    while let Some(Frontier { index, .. }) = heap.pop() {
        if done[index] {
            continue;
        }
        done[index] = true;
        let (a, b) = steps[index].expect("queued cells have a cost");
        for (nb, diag) in neighbors(grid, grid.cell_at(index)) {
            let j = grid.index(nb);
            if done[j] {
                continue;
            }
            let cand = if diag { (a, b + 1) } else { (a + 1, b) };
            let key = step_cost(cand.0, cand.1);
            let better = match steps[j] {
                None => true,
                Some((ca, cb)) => key < step_cost(ca, cb),
            };
            if better {
                steps[j] = Some(cand);
                heap.push(Frontier { key, index: j });
            }
        }
    }

    let res = grid.resolution();
    let values = steps
        .into_iter()
        .map(|s| s.map_or(f64::INFINITY, |(a, b)| step_cost(a, b) * res))
        .collect();
    Ok(PotentialField { goal, width: grid.width(), resolution: res, values })
}

/// The four central-difference sample cells around `x` at offset `delta`,
/// ordered `+x, -x, +y, -y`. `None` for samples outside the map or on an
/// occupied cell.
pub fn sample_cells(grid: &OccupancyGrid, x: WorldPoint, delta: f64) -> [Option<Cell>; 4] {
    let offsets = [(delta, 0.0), (-delta, 0.0), (0.0, delta), (0.0, -delta)];
    offsets.map(|(dx, dy)| {
        grid.world_to_cell(WorldPoint::new(x.x + dx, x.y + dy))
            .filter(|c| grid.is_free(*c))
    })
}

/// Central difference from a center value and four sample values (order as
/// in [`sample_cells`]). Non-finite samples are replaced by
/// `center + delta`, i.e. treated as uphill.
#[inline]
pub fn gradient_from_samples(center: f64, samples: [f64; 4], delta: f64) -> [f64; 2] {
    let fix = |v: f64| if v.is_finite() { v } else { center + delta };
    let [px, nx, py, ny] = samples.map(fix);
    [(px - nx) / (2.0 * delta), (py - ny) / (2.0 * delta)]
}

/// Negated gradient rescaled to `speed`. `None` when the gradient vanishes.
#[inline]
pub fn descent_velocity(gradient: [f64; 2], speed: f64) -> Option<VelocityCommand> {
    let [gx, gy] = gradient;
    let l = gx.hypot(gy);
    if l == 0.0 {
        return None;
    }
    Some(VelocityCommand::new(-gx * speed / l, -gy * speed / l))
}

fn locate(grid: &OccupancyGrid, x: WorldPoint) -> Result<Cell, FieldError> {
    let cell = grid
        .world_to_cell(x)
        .ok_or(FieldError::OutOfBounds { x: x.x, y: x.y })?;
    if !grid.is_free(cell) {
        return Err(FieldError::InObstacle { x: x.x, y: x.y });
    }
    Ok(cell)
}

/// Central-difference slope of `field` at `x`, sampling the containing
/// cell of `x +- delta` along each axis.
pub fn gradient_at(
    field: &PotentialField,
    grid: &OccupancyGrid,
    x: WorldPoint,
    delta: f64,
) -> Result<[f64; 2], FieldError> {
    assert!(delta > 0.0, "delta must be positive");
    let cell = locate(grid, x)?;
    let center = field.value(cell);
    if !center.is_finite() {
        return Err(FieldError::Unreachable { x: x.x, y: x.y });
    }
    let samples = sample_cells(grid, x, delta).map(|c| c.map_or(f64::INFINITY, |c| field.value(c)));
    Ok(gradient_from_samples(center, samples, delta))
}

/// Velocity of magnitude `speed` straight down the potential at `x`.
pub fn desired_velocity(
    field: &PotentialField,
    grid: &OccupancyGrid,
    x: WorldPoint,
    speed: f64,
) -> Result<VelocityCommand, FieldError> {
    let g = gradient_at(field, grid, x, grid.resolution())?;
    descent_velocity(g, speed).ok_or(FieldError::NoDescent)
}

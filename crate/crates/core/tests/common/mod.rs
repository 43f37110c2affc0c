//! Independent reference implementations used by the integration tests.
//!
//! Nothing here calls into the library's planning or estimation code; only
//! the grid container and plain value types are shared.

#![allow(dead_code)]

use std::cmp::Ordering;

use goalnav::command::VelocityCommand;
use goalnav::gridmap::{Cell, CellState, OccupancyGrid, WorldPoint};
use goalnav::pseudo_user::TrialRng;
use rand_core::RngCore;

/// Path cost as (cardinal steps, diagonal steps).
pub type Steps = (u32, u32);

/// Exact `a1 + b1*sqrt(2) < a2 + b2*sqrt(2)` in integer arithmetic.
pub fn steps_less(p: Steps, q: Steps) -> bool {
    let da = p.0 as i64 - q.0 as i64;
    let db = q.1 as i64 - p.1 as i64;
    // da < db * sqrt(2)
    match (da.cmp(&0), db.cmp(&0)) {
        (Ordering::Less, Ordering::Greater | Ordering::Equal) => true,
        (Ordering::Greater | Ordering::Equal, Ordering::Less | Ordering::Equal) => false,
        (_, Ordering::Greater) => da * da < 2 * db * db,
        (Ordering::Less, Ordering::Less) => da * da > 2 * db * db,
    }
}

fn free(grid: &OccupancyGrid, x: i64, y: i64) -> bool {
    x >= 0
        && y >= 0
        && (x as usize) < grid.width()
        && (y as usize) < grid.height()
        && grid.cells()[y as usize * grid.width() + x as usize] == CellState::Free
}

/// Bellman-Ford sweeps from `source` until nothing improves. Diagonal moves
/// need both side cells free.
pub fn brute_steps(grid: &OccupancyGrid, source: Cell) -> Vec<Option<Steps>> {
    let (w, h) = (grid.width(), grid.height());
    let mut best: Vec<Option<Steps>> = vec![None; w * h];
    if !free(grid, source.x as i64, source.y as i64) {
        return best;
    }
    best[source.y * w + source.x] = Some((0, 0));
    loop {
        let mut changed = false;
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let Some((a, b)) = best[y as usize * w + x as usize] else { continue };
                for dy in -1..=1i64 {
                    for dx in -1..=1i64 {
                        if dx == 0 && dy == 0 || !free(grid, x + dx, y + dy) {
                            continue;
                        }
                        let diagonal = dx != 0 && dy != 0;
                        if diagonal && !(free(grid, x + dx, y) && free(grid, x, y + dy)) {
                            continue;
                        }
                        let cand = if diagonal { (a, b + 1) } else { (a + 1, b) };
                        let j = (y + dy) as usize * w + (x + dx) as usize;
                        if best[j].is_none_or(|cur| steps_less(cand, cur)) {
                            best[j] = Some(cand);
                            changed = true;
                        }
                    }
                }
            }
        }
        if !changed {
            return best;
        }
    }
}

/// Metric distances from `source`, `inf` where unreachable.
pub fn brute_distances(grid: &OccupancyGrid, source: Cell) -> Vec<f64> {
    let res = grid.resolution();
    brute_steps(grid, source)
        .into_iter()
        .map(|s| s.map_or(f64::INFINITY, |(a, b)| (a as f64 + b as f64 * std::f64::consts::SQRT_2) * res))
        .collect()
}

/// Containing free cell of `p`, or `None`.
pub fn free_cell_of(grid: &OccupancyGrid, p: WorldPoint) -> Option<Cell> {
    let o = grid.origin();
    let fx = ((p.x - o.x) / grid.resolution()).floor();
    let fy = ((p.y - o.y) / grid.resolution()).floor();
    (free(grid, fx as i64, fy as i64) && fx >= 0.0 && fy >= 0.0).then(|| Cell::new(fx as usize, fy as usize))
}

/// Likelihood that the operator at `x` commanding `v` heads for the goal
/// whose travel costs are given by `cost_to_goal(cell)`.
pub fn likelihood_for_goal(
    grid: &OccupancyGrid,
    x: WorldPoint,
    v: VelocityCommand,
    speed: f64,
    cost_to_goal: impl Fn(Cell) -> f64,
) -> f64 {
    let res = grid.resolution();
    let here = free_cell_of(grid, x).expect("operator stands on a free cell");
    let center = cost_to_goal(here);
    if !center.is_finite() {
        return 0.0;
    }
    let sample = |dx: f64, dy: f64| {
        free_cell_of(grid, WorldPoint::new(x.x + dx, x.y + dy))
            .map(&cost_to_goal)
            .filter(|d| d.is_finite())
            .unwrap_or(center + res)
    };
    let gx = (sample(res, 0.0) - sample(-res, 0.0)) / (2.0 * res);
    let gy = (sample(0.0, res) - sample(0.0, -res)) / (2.0 * res);
    let norm = (gx * gx + gy * gy).sqrt();
    let (dx, dy) = if norm == 0.0 { (0.0, 0.0) } else { (-gx / norm * speed, -gy / norm * speed) };
    (-((dx - v.vx).powi(2) + (dy - v.vy).powi(2)).sqrt()).exp()
}

/// One planning pass per goal cell.
pub fn likelihood_per_goal(grid: &OccupancyGrid, x: WorldPoint, v: VelocityCommand, speed: f64) -> Vec<f64> {
    (0..grid.len())
        .map(|g| {
            let goal = Cell::new(g % grid.width(), g / grid.width());
            let d = brute_distances(grid, goal);
            likelihood_for_goal(grid, x, v, speed, |c| d[c.y * grid.width() + c.x])
        })
        .collect()
}

/// Same values, planning outward from the operator's cell and its four
/// neighbors and relying on distance symmetry.
pub fn likelihood_from_sources(grid: &OccupancyGrid, x: WorldPoint, v: VelocityCommand, speed: f64) -> Vec<f64> {
    let res = grid.resolution();
    let mut sources: Vec<(Cell, Vec<f64>)> = Vec::new();
    let points = [(0.0, 0.0), (res, 0.0), (-res, 0.0), (0.0, res), (0.0, -res)];
    for (dx, dy) in points {
        if let Some(c) = free_cell_of(grid, WorldPoint::new(x.x + dx, x.y + dy)) {
            if !sources.iter().any(|(s, _)| *s == c) {
                sources.push((c, brute_distances(grid, c)));
            }
        }
    }
    (0..grid.len())
        .map(|g| {
            likelihood_for_goal(grid, x, v, speed, |c| {
                sources.iter().find(|(s, _)| *s == c).expect("source planned")
                    .1[g]
            })
        })
        .collect()
}

pub fn uniform(rng: &mut TrialRng) -> f64 {
    (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64
}

pub fn below(rng: &mut TrialRng, n: usize) -> usize {
    (rng.next_u64() % n as u64) as usize
}

/// Random grid with sides in `3..=max_side`, scattered obstacles and
/// occasional walls, at least two free cells.
pub fn random_grid(rng: &mut TrialRng, max_side: usize) -> OccupancyGrid {
    loop {
        let w = 3 + below(rng, max_side - 2);
        let h = 3 + below(rng, max_side - 2);
        let density = 0.4 * uniform(rng);
        let mut cells: Vec<CellState> = (0..w * h)
            .map(|_| if uniform(rng) < density { CellState::Occupied } else { CellState::Free })
            .collect();
        if uniform(rng) < 0.5 {
            let col = below(rng, w);
            for y in 0..h {
                if uniform(rng) < 0.85 {
                    cells[y * w + col] = CellState::Occupied;
                }
            }
        }
        let resolution = [0.05, 0.1, 0.25, 1.0][below(rng, 4)];
        let origin = WorldPoint::new(uniform(rng) * 2.0 - 1.0, uniform(rng) * 2.0 - 1.0);
        let grid = OccupancyGrid::new(w, h, resolution, origin, cells).expect("valid grid");
        if grid.free_count() >= 2 {
            return grid;
        }
    }
}

pub fn random_free_cell(rng: &mut TrialRng, grid: &OccupancyGrid) -> Cell {
    loop {
        let c = Cell::new(below(rng, grid.width()), below(rng, grid.height()));
        if grid.is_free(c) {
            return c;
        }
    }
}

/// Point inside a random free cell, kept off the cell edges.
pub fn random_free_point(rng: &mut TrialRng, grid: &OccupancyGrid) -> WorldPoint {
    let c = random_free_cell(rng, grid);
    let o = grid.origin();
    let r = grid.resolution();
    WorldPoint::new(
        o.x + (c.x as f64 + 0.05 + 0.9 * uniform(rng)) * r,
        o.y + (c.y as f64 + 0.05 + 0.9 * uniform(rng)) * r,
    )
}

pub fn random_velocity(rng: &mut TrialRng, max: f64) -> VelocityCommand {
    let a = uniform(rng) * std::f64::consts::TAU;
    let m = uniform(rng) * max;
    VelocityCommand::new(m * a.cos(), m * a.sin())
}

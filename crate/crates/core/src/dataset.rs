//! Training-data export: random start/goal pairs, potential-descent routes
//! between them, and the per-cell goal likelihood at every route step.
//!
//! # Container
//!
//! Little-endian throughout.
//!
//! | field | type |
//! |---|---|
//! | magic | `b"GNDS"` |
//! | version | u32, currently 1 |
//! | width, height | u32 each |
//! | resolution | f32, meters per cell |
//! | origin x, y | f32 each |
//! | occupancy | `width * height` bytes, row-major, 0 free, 1 occupied |
//! | sample count | u32 |
//!
//! then per sample: `x0.x, x0.y, xt.x, xt.y, vt.x, vt.y` as f32, followed by
//! the likelihood grid as `width * height` f32, row-major.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use rand_core::RngCore;
use thiserror::Error;

use crate::command::VelocityCommand;
use crate::goal_estimator::{step_likelihood, EstimatorError};
use crate::gridmap::{Cell, CellState, OccupancyGrid, WorldPoint};
use crate::potential_field::{compute_field, desired_velocity, FieldError};
use crate::pseudo_user::{trial_rng, TrialRng};
use crate::simulator::{step, SimState};

pub const MAGIC: &[u8; 4] = b"GNDS";
pub const VERSION: u32 = 1;
/// Rejection-sampling attempts allowed per endpoint pair.
pub const MAX_ATTEMPTS: usize = 10_000;
/// Route tracing gives up after this many steps.
pub const MAX_TRACE_STEPS: usize = 100_000;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("minimum distance {min_distance} m is not below the map diagonal {diagonal} m")]
    ImpossibleDistance { min_distance: f64, diagonal: f64 },
    #[error("map too constrained: no valid pair after {0} attempts")]
    TooConstrained(usize),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error("route did not arrive within {0} steps")]
    Stalled(usize),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed container at byte {offset}: {message}")]
    Format { offset: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RouteParams {
    pub speed: f64,
    pub dt: f64,
    pub goal_radius: f64,
}

impl Default for RouteParams {
    fn default() -> Self {
        Self { speed: 0.3, dt: 0.05, goal_radius: 0.3 }
    }
}

/// Positions and commands along one route, starting at `start`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub start: WorldPoint,
    pub goal: Cell,
    pub steps: Vec<(WorldPoint, VelocityCommand)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub x0: [f32; 2],
    pub xt: [f32; 2],
    pub vt: [f32; 2],
    /// Row-major per-cell goal likelihood.
    pub likelihood: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub width: u32,
    pub height: u32,
    pub resolution: f32,
    pub origin: [f32; 2],
    pub occupancy: Vec<u8>,
    pub samples: Vec<TrainingSample>,
}

fn uniform_index(rng: &mut TrialRng, n: usize) -> usize {
    ((rng.next_u64() as u128 * n as u128) >> 64) as usize
}

/// Half the map diagonal.
pub fn default_min_distance(grid: &OccupancyGrid) -> f64 {
    grid.diagonal() / 2.0
}

/// `count` (start, goal) cell pairs, both free, connected, and with centers
/// more than `min_distance` apart.
pub fn sample_endpoints(
    grid: &OccupancyGrid,
    min_distance: f64,
    count: usize,
    rng: &mut TrialRng,
) -> Result<Vec<(Cell, Cell)>, DatasetError> {
    let diagonal = grid.diagonal();
    if !(min_distance < diagonal) {
        return Err(DatasetError::ImpossibleDistance { min_distance, diagonal });
    }
    let mut pairs = Vec::with_capacity(count);
    for _ in 0..count {
        let mut found = None;
        for _ in 0..MAX_ATTEMPTS {
            let a = grid.cell_at(uniform_index(rng, grid.len()));
            let b = grid.cell_at(uniform_index(rng, grid.len()));
            if !grid.is_free(a) || !grid.is_free(b) {
                continue;
            }
            if grid.cell_to_world(a).distance(&grid.cell_to_world(b)) <= min_distance {
                continue;
            }
            if !compute_field(grid, b)?.is_reachable(a) {
                continue;
            }
            found = Some((a, b));
            break;
        }
        pairs.push(found.ok_or(DatasetError::TooConstrained(MAX_ATTEMPTS))?);
    }
    Ok(pairs)
}

/// Follow the goal's descent direction from `start` until within
/// `goal_radius` of the goal center, recording the position and command
/// before each step. Every recorded command has magnitude `speed`.
pub fn trace_route(
    grid: &OccupancyGrid,
    start: WorldPoint,
    goal: Cell,
    params: &RouteParams,
) -> Result<Trace, DatasetError> {
    let field = compute_field(grid, goal)?;
    let start_cell = grid
        .world_to_cell(start)
        .ok_or(FieldError::OutOfBounds { x: start.x, y: start.y })?;
    if !grid.is_free(start_cell) {
        return Err(FieldError::InObstacle { x: start.x, y: start.y }.into());
    }
    if !field.is_reachable(start_cell) {
        return Err(FieldError::Unreachable { x: start.x, y: start.y }.into());
    }
    let target = grid.cell_to_world(goal);
    let mut state = SimState::new(start);
    let mut steps = Vec::new();
    while state.position.distance(&target) > params.goal_radius {
        if steps.len() >= MAX_TRACE_STEPS {
            return Err(DatasetError::Stalled(steps.len()));
        }
        // inside a coarse goal cell the field is flat; head for its center
        let v = if grid.world_to_cell(state.position) == Some(goal) {
            VelocityCommand::new(target.x - state.position.x, target.y - state.position.y)
                .with_magnitude(params.speed)
        } else {
            desired_velocity(&field, grid, state.position, params.speed)?
        };
        steps.push((state.position, v));
        state = step(&state, v, params.dt, grid);
    }
    Ok(Trace { start, goal, steps })
}

/// Sample pairs and trace routes until `samples` steps are collected; the
/// last route is truncated.
pub fn generate_traces(
    grid: &OccupancyGrid,
    samples: usize,
    min_distance: f64,
    seed: u64,
    params: &RouteParams,
) -> Result<Vec<Trace>, DatasetError> {
    let mut rng = trial_rng(seed);
    let mut traces = Vec::new();
    let mut total = 0;
    while total < samples {
        let (a, b) = sample_endpoints(grid, min_distance, 1, &mut rng)?[0];
        let mut trace = trace_route(grid, grid.cell_to_world(a), b, params)?;
        trace.steps.truncate(samples - total);
        total += trace.steps.len();
        traces.push(trace);
    }
    Ok(traces)
}

/// Likelihood grids for every trace step, in trace order.
pub fn build_samples(
    grid: &OccupancyGrid,
    traces: &[Trace],
    speed: f64,
) -> Result<Vec<TrainingSample>, DatasetError> {
    let jobs: Vec<(WorldPoint, WorldPoint, VelocityCommand)> = traces
        .iter()
        .flat_map(|t| t.steps.iter().map(move |(x, v)| (t.start, *x, *v)))
        .collect();
    jobs.par_iter()
        .map(|(x0, xt, vt)| {
            let lik = step_likelihood(grid, *xt, *vt, speed)?;
            Ok(TrainingSample {
                x0: [x0.x as f32, x0.y as f32],
                xt: [xt.x as f32, xt.y as f32],
                vt: [vt.vx as f32, vt.vy as f32],
                likelihood: lik.into_iter().map(|p| p as f32).collect(),
            })
        })
        .collect()
}

fn dataset_header(grid: &OccupancyGrid) -> Dataset {
    let origin = grid.origin();
    Dataset {
        width: grid.width() as u32,
        height: grid.height() as u32,
        resolution: grid.resolution() as f32,
        origin: [origin.x as f32, origin.y as f32],
        occupancy: grid
            .cells()
            .iter()
            .map(|c| u8::from(*c == CellState::Occupied))
            .collect(),
        samples: Vec::new(),
    }
}

impl Dataset {
    pub fn new(grid: &OccupancyGrid, samples: Vec<TrainingSample>) -> Self {
        Self { samples, ..dataset_header(grid) }
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        out.write_all(MAGIC)?;
        for v in [VERSION, self.width, self.height] {
            out.write_all(&v.to_le_bytes())?;
        }
        for v in [self.resolution, self.origin[0], self.origin[1]] {
            out.write_all(&v.to_le_bytes())?;
        }
        out.write_all(&self.occupancy)?;
        out.write_all(&(self.samples.len() as u32).to_le_bytes())?;
        for s in &self.samples {
            for v in s.x0.iter().chain(&s.xt).chain(&s.vt).chain(&s.likelihood) {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        out.flush()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory");
        buf
    }

    /// Decode a container. Sizes are checked against the input length
    /// before anything is allocated.
    pub fn decode(bytes: &[u8]) -> Result<Self, DatasetError> {
        let mut r = Cursor { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(r.fail(0, "bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.fail(4, &format!("unsupported version {version}")));
        }
        let width = r.u32()?;
        let height = r.u32()?;
        let cells = (width as usize)
            .checked_mul(height as usize)
            .filter(|n| *n > 0)
            .ok_or_else(|| r.fail(8, "empty or oversized grid"))?;
        let resolution = r.f32()?;
        if !(resolution.is_finite() && resolution > 0.0) {
            return Err(r.fail(16, "resolution must be positive"));
        }
        let origin = [r.f32()?, r.f32()?];
        let occupancy = r.take(cells)?.to_vec();
        if let Some(i) = occupancy.iter().position(|b| *b > 1) {
            return Err(r.fail(28 + i, "occupancy byte must be 0 or 1"));
        }
        let count = r.u32()? as usize;
        let record = cells
            .checked_add(6)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| r.fail(r.pos, "record size overflow"))?;
        if count.checked_mul(record).is_none_or(|n| n != r.remaining()) {
            return Err(r.fail(r.pos, &format!("{count} samples do not match {} trailing bytes", r.remaining())));
        }
        let mut samples = Vec::with_capacity(count);
        for _ in 0..count {
            let x0 = [r.f32()?, r.f32()?];
            let xt = [r.f32()?, r.f32()?];
            let vt = [r.f32()?, r.f32()?];
            let likelihood = (0..cells).map(|_| r.f32()).collect::<Result<_, _>>()?;
            samples.push(TrainingSample { x0, xt, vt, likelihood });
        }
        Ok(Self { width, height, resolution, origin, occupancy, samples })
    }

    /// The occupancy grid the samples were computed on.
    pub fn grid(&self) -> Result<OccupancyGrid, DatasetError> {
        let cells = self
            .occupancy
            .iter()
            .map(|b| if *b == 0 { CellState::Free } else { CellState::Occupied })
            .collect();
        OccupancyGrid::new(
            self.width as usize,
            self.height as usize,
            self.resolution as f64,
            WorldPoint::new(self.origin[0] as f64, self.origin[1] as f64),
            cells,
        )
        .map_err(|e| DatasetError::Format { offset: 8, message: e.to_string() })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn fail(&self, offset: usize, message: &str) -> DatasetError {
        DatasetError::Format { offset, message: message.to_string() }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], DatasetError> {
        if n > self.remaining() {
            return Err(self.fail(self.pos, "unexpected end of data"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, DatasetError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32(&mut self) -> Result<f32, DatasetError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Compute likelihood grids for all traces and write the container.
/// Returns the number of samples written.
pub fn emit_samples(
    grid: &OccupancyGrid,
    traces: &[Trace],
    speed: f64,
    out: &Path,
) -> Result<usize, DatasetError> {
    let samples = build_samples(grid, traces, speed)?;
    let n = samples.len();
    let io = |source| DatasetError::Io { path: out.display().to_string(), source };
    let file = File::create(out).map_err(io)?;
    Dataset::new(grid, samples).write_to(BufWriter::new(file)).map_err(io)?;
    Ok(n)
}

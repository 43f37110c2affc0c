//! Holonomic point robot on an inflated occupancy grid, and the trial loop
//! tying operator, estimator, autonomy and blending together.

use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autonomy::Autonomy;
use crate::command::VelocityCommand;
use crate::goal_estimator::{CommandRecord, EstimatorError, EstimatorParams, GoalEstimator};
use crate::gridmap::{Cell, OccupancyGrid, WorldPoint};
use crate::potential_field::{compute_field, FieldError};
use crate::pseudo_user::{InputCondition, PseudoUser};
use crate::shared_controller::{control_tick, ControlMode, HeldCommand, TickOutput};

#[derive(Debug, Error)]
pub enum TrialError {
    #[error("start ({x}, {y}) is not on a free cell")]
    StartBlocked { x: f64, y: f64 },
    #[error("goal cell {0} is unreachable from the start")]
    GoalUnreachable(Cell),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error("trajectory output: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimState {
    pub position: WorldPoint,
    pub clock: f64,
    pub path_length: f64,
    pub collisions: u32,
    /// In contact during the last step.
    pub colliding: bool,
}

impl SimState {
    pub fn new(position: WorldPoint) -> Self {
        Self { position, clock: 0.0, path_length: 0.0, collisions: 0, colliding: false }
    }
}

/// Advance by `dt`. A move into an occupied or off-map cell is blocked and
/// the robot slides along each axis separately where that is free. Contact
/// episodes count once, on their first step.
pub fn step(state: &SimState, v: VelocityCommand, dt: f64, grid: &OccupancyGrid) -> SimState {
    let p = state.position;
    let target = WorldPoint::new(p.x + v.vx * dt, p.y + v.vy * dt);
    let mut next = *state;
    next.clock += dt;

    if grid.is_free_at(target) {
        next.position = target;
        next.colliding = false;
    } else {
        let mut q = p;
        let along_x = WorldPoint::new(q.x + v.vx * dt, q.y);
        if grid.is_free_at(along_x) {
            q = along_x;
        }
        let along_y = WorldPoint::new(q.x, q.y + v.vy * dt);
        if grid.is_free_at(along_y) {
            q = along_y;
        }
        next.position = q;
        if !state.colliding {
            next.collisions += 1;
        }
        next.colliding = true;
    }
    next.path_length += p.distance(&next.position);
    next
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobotParams {
    /// Maximum speed, m/s.
    pub speed: f64,
    /// Footprint radius used to inflate the map, m.
    pub radius: f64,
    pub dt: f64,
    pub timeout: f64,
    pub goal_radius: f64,
}

impl Default for RobotParams {
    fn default() -> Self {
        Self { speed: 0.3, radius: 0.25, dt: 0.05, timeout: 120.0, goal_radius: 0.3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialParams {
    pub robot: RobotParams,
    pub estimator: EstimatorParams,
}

impl Default for TrialParams {
    fn default() -> Self {
        let robot = RobotParams::default();
        Self { robot, estimator: EstimatorParams { speed: robot.speed, ..Default::default() } }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    /// Reached the goal with no collisions.
    pub success: bool,
    /// Reached the goal, collisions or not.
    pub reached: bool,
    pub collisions: u32,
    pub elapsed: f64,
    pub path_length: f64,
    pub condition: InputCondition,
    pub seed: u64,
}

/// One row of a trajectory dump.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySample {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub vx_shared: f64,
    pub vy_shared: f64,
    pub c: f64,
}

pub const TRAJECTORY_HEADER: &str = "t,x,y,vx_shared,vy_shared,c";

pub fn write_trajectory<W: Write>(out: W, samples: &[TrajectorySample]) -> Result<(), TrialError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(TRAJECTORY_HEADER.split(','))
        .map_err(|e| std::io::Error::other(e.to_string()))?;
    for s in samples {
        w.write_record([s.t, s.x, s.y, s.vx_shared, s.vy_shared, s.c].map(|v| v.to_string()))
            .map_err(|e| std::io::Error::other(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Operator command hold, goal estimation, blending and kinematics for one
/// robot. Batch trials and live sessions both drive this.
#[derive(Debug, Clone)]
pub struct ControlLoop {
    grid: Arc<OccupancyGrid>,
    mode: ControlMode,
    robot: RobotParams,
    track_estimate: bool,
    estimator: GoalEstimator,
    autonomy: Autonomy,
    held: HeldCommand,
    state: SimState,
    steps: u64,
    last: TickOutput,
}

impl ControlLoop {
    /// `track_estimate` keeps the goal posterior current even in direct
    /// mode, where it is shown but never applied.
    pub fn new(grid: Arc<OccupancyGrid>, start: WorldPoint, mode: ControlMode, params: &TrialParams, track_estimate: bool) -> Self {
        Self {
            estimator: GoalEstimator::new(grid.clone(), params.estimator),
            grid,
            mode,
            robot: params.robot,
            track_estimate: track_estimate || mode == ControlMode::Shared,
            autonomy: Autonomy::new(),
            held: HeldCommand::default(),
            state: SimState::new(start),
            steps: 0,
            last: TickOutput { command: VelocityCommand::ZERO, confidence: 0.0 },
        }
    }

    /// Hold a new operator command and re-estimate the goal.
    pub fn apply_input(&mut self, record: CommandRecord) -> Result<(), EstimatorError> {
        self.held = HeldCommand { value: record.velocity, issued_at: record.time };
        if self.track_estimate {
            self.estimator.observe(record, self.state.position)?;
        }
        Ok(())
    }

    /// One control step of length `dt`.
    pub fn tick(&mut self) -> TickOutput {
        let out = control_tick(
            &self.grid,
            &mut self.autonomy,
            self.state.position,
            self.robot.speed,
            &self.held,
            self.estimator.estimate(),
            self.mode,
        );
        self.state = step(&self.state, out.command, self.robot.dt, &self.grid);
        self.steps += 1;
        self.last = out;
        out
    }

    pub fn state(&self) -> &SimState {
        &self.state
    }

    /// Steps taken so far; elapsed time is `steps * dt`.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn elapsed(&self) -> f64 {
        self.steps as f64 * self.robot.dt
    }

    pub fn estimator(&self) -> &GoalEstimator {
        &self.estimator
    }

    pub fn held(&self) -> &HeldCommand {
        &self.held
    }

    /// Output of the most recent tick.
    pub fn last_output(&self) -> TickOutput {
        self.last
    }
}

/// Run one scripted trial. The grid must already be inflated.
pub fn run_trial(
    grid: Arc<OccupancyGrid>,
    start: WorldPoint,
    true_goal: Cell,
    condition: InputCondition,
    seed: u64,
    params: &TrialParams,
    mut trajectory: Option<&mut Vec<TrajectorySample>>,
) -> Result<TrialResult, TrialError> {
    let start_cell = grid
        .world_to_cell(start)
        .filter(|c| grid.is_free(*c))
        .ok_or(TrialError::StartBlocked { x: start.x, y: start.y })?;
    let goal_field = compute_field(&grid, true_goal)?;
    if !goal_field.is_reachable(start_cell) {
        return Err(TrialError::GoalUnreachable(true_goal));
    }
    let goal_point = grid.cell_to_world(true_goal);
    let robot = params.robot;

    let mut user = PseudoUser::new(condition, robot.speed, seed);
    let mut control = ControlLoop::new(grid.clone(), start, condition.mode, params, false);
    let max_steps = (robot.timeout / robot.dt).round() as u64;
    let mut reached = false;

    while control.steps() < max_steps {
        let position = control.state().position;
        if let Some(record) = user.next_input(control.elapsed(), &goal_field, &grid, position)? {
            control.apply_input(record)?;
        }
        let out = control.tick();
        let state = control.state();
        if let Some(t) = trajectory.as_deref_mut() {
            t.push(TrajectorySample {
                t: control.elapsed(),
                x: state.position.x,
                y: state.position.y,
                vx_shared: out.command.vx,
                vy_shared: out.command.vy,
                c: out.confidence,
            });
        }
        if state.position.distance(&goal_point) <= robot.goal_radius {
            reached = true;
            break;
        }
    }

    let state = control.state();
    Ok(TrialResult {
        success: reached && state.collisions == 0,
        reached,
        collisions: state.collisions,
        elapsed: control.elapsed(),
        path_length: state.path_length,
        condition,
        seed,
    })
}

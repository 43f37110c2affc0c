//! Live teleoperation sessions and their JSON wire messages.
//!
//! A [`Session`] is a pure state machine: the caller injects wall-clock
//! time (seconds since the session was created) and the session advances
//! its simulation in fixed ticks up to that time. Networking lives in the
//! server crate.
//!
//! Every message is a JSON object with a `type` tag. Client to server:
//! `create`, `attach` (rejoin a session within the disconnect grace
//! period), `input`. Server to client: `created`, `input_ack`, `frame`,
//! `terminal`, `error`. Coordinates are meters in the map frame, velocities
//! m/s, cells `[x, y]` with row 0 at minimum y.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::command::VelocityCommand;
use crate::goal_estimator::{downsample_probabilities, CommandRecord, EstimatorError, Heatmap};
use crate::gridmap::{Cell, CellState, OccupancyGrid, WorldPoint};
use crate::pseudo_user::{corrupt, quantize, trial_rng, DirectionSet, InputCondition, TrialRng};
use crate::shared_controller::ControlMode;
use crate::simulator::{ControlLoop, TrialParams, TrialResult};

/// Largest heatmap side sent in frames.
pub const HEATMAP_MAX_DIM: usize = 64;
/// Seconds a session survives without a connected client.
pub const DISCONNECT_GRACE: f64 = 30.0;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("{field}: {message}")]
    Field { field: &'static str, message: String },
}

impl ProtocolError {
    pub fn field(&self) -> Option<&'static str> {
        match self {
            ProtocolError::Field { field, .. } => Some(field),
            ProtocolError::Malformed(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientMessage {
    Create(CreateRequest),
    Attach(AttachRequest),
    Input(InputRequest),
}

impl ClientMessage {
    pub fn parse(text: &str) -> Result<Self, ProtocolError> {
        let msg: Self = serde_json::from_str(text).map_err(|e| ProtocolError::Malformed(e.to_string()))?;
        match &msg {
            ClientMessage::Create(c) => {
                c.condition()?;
            }
            ClientMessage::Input(i) => {
                i.payload()?;
            }
            ClientMessage::Attach(_) => {}
        }
        Ok(msg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreateRequest {
    /// Map id; the server's default map when absent.
    #[serde(default)]
    pub map: Option<String>,
    pub directions: DirectionSet,
    pub accuracy: f64,
    pub mode: ControlMode,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Seconds between accepted inputs, 1.0 when absent.
    #[serde(default)]
    pub period: Option<f64>,
}

impl CreateRequest {
    pub fn condition(&self) -> Result<InputCondition, ProtocolError> {
        let c = InputCondition {
            directions: self.directions,
            accuracy: self.accuracy,
            period: self.period.unwrap_or(1.0),
            mode: self.mode,
        };
        if !(0.0..=1.0).contains(&c.accuracy) {
            return Err(ProtocolError::Field { field: "accuracy", message: format!("{} outside [0, 1]", c.accuracy) });
        }
        if !(c.period.is_finite() && c.period > 0.0) {
            return Err(ProtocolError::Field { field: "period", message: format!("{} must be positive", c.period) });
        }
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttachRequest {
    pub session: String,
}

/// Exactly one of `direction` (index into the session's direction set,
/// counter-clockwise from +x) or `vector` (m/s) must be present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub direction: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vector: Option<[f64; 2]>,
    /// Echoed in the ack.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seq: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InputPayload {
    Direction(usize),
    Vector(VelocityCommand),
}

impl InputRequest {
    pub fn payload(&self) -> Result<InputPayload, ProtocolError> {
        match (self.direction, self.vector) {
            (Some(d), None) => Ok(InputPayload::Direction(d)),
            (None, Some([vx, vy])) if vx.is_finite() && vy.is_finite() => {
                Ok(InputPayload::Vector(VelocityCommand::new(vx, vy)))
            }
            (None, Some(_)) => Err(ProtocolError::Field { field: "vector", message: "components must be finite".into() }),
            _ => Err(ProtocolError::Field {
                field: "input",
                message: "exactly one of `direction` or `vector` is required".into(),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    Created(Created),
    InputAck(InputAck),
    Frame(StateFrame),
    Terminal(TerminalFrame),
    Error(ErrorMessage),
}

impl ServerMessage {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("server messages serialize")
    }

    pub fn error(message: impl Into<String>, field: Option<&str>) -> Self {
        ServerMessage::Error(ErrorMessage { message: message.into(), field: field.map(str::to_string) })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapPayload {
    pub width: usize,
    pub height: usize,
    pub resolution: f64,
    pub origin: [f64; 2],
    /// Row-major, 1 occupied, 0 free; the inflated map the robot plans on.
    pub occupancy: Vec<u8>,
}

impl MapPayload {
    pub fn from_grid(grid: &OccupancyGrid) -> Self {
        let o = grid.origin();
        Self {
            width: grid.width(),
            height: grid.height(),
            resolution: grid.resolution(),
            origin: [o.x, o.y],
            occupancy: grid.cells().iter().map(|c| u8::from(*c == CellState::Occupied)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Created {
    pub session: String,
    pub condition: InputCondition,
    pub speed: f64,
    pub map: MapPayload,
    pub start: [f64; 2],
    pub goal: [f64; 2],
    pub goal_radius: f64,
    pub frame: StateFrame,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AckStatus {
    Accepted,
    Limited,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputAck {
    pub status: AckStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seq: Option<u64>,
    /// The command as the operator sent it, after snapping to the direction
    /// set. What was actually applied is only revealed in the terminal log.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command: Option<[f64; 2]>,
    /// Seconds until the next input is accepted, for `limited`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retry_in: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Running,
    Succeeded,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndReason {
    Reached,
    Timeout,
    Disconnected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateFrame {
    pub status: SessionStatus,
    pub clock: f64,
    pub position: [f64; 2],
    pub velocity: [f64; 2],
    pub collisions: u32,
    pub path_length: f64,
    pub confidence: f64,
    pub goal_cell: Option<[usize; 2]>,
    pub heatmap: Heatmap,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InputLogEntry {
    pub time: f64,
    pub position: [f64; 2],
    pub sent: [f64; 2],
    pub applied: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TerminalFrame {
    pub status: SessionStatus,
    pub reason: EndReason,
    pub result: TrialResult,
    pub log: Vec<InputLogEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorMessage {
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
}

/// Fixed task of a session: where the robot starts and where it should go.
#[derive(Debug, Clone)]
pub struct Task {
    /// Inflated map.
    pub grid: Arc<OccupancyGrid>,
    pub start: WorldPoint,
    pub goal: Cell,
    pub params: TrialParams,
}

fn pair(v: VelocityCommand) -> [f64; 2] {
    [v.vx, v.vy]
}

#[derive(Debug)]
pub struct Session {
    id: String,
    task: Task,
    condition: InputCondition,
    seed: u64,
    rng: TrialRng,
    control: ControlLoop,
    last_accepted: Option<f64>,
    disconnected_at: Option<f64>,
    outcome: Option<(SessionStatus, EndReason)>,
    log: Vec<InputLogEntry>,
    uniform: Heatmap,
}

impl Session {
    pub fn new(id: impl Into<String>, task: Task, condition: InputCondition, seed: u64) -> Result<Self, ProtocolError> {
        condition
            .validate()
            .map_err(|message| ProtocolError::Field { field: "condition", message })?;
        let free: Vec<f64> = task
            .grid
            .cells()
            .iter()
            .map(|c| if *c == CellState::Free { 1.0 } else { 0.0 })
            .collect();
        let uniform = downsample_probabilities(&free, task.grid.width(), task.grid.height(), HEATMAP_MAX_DIM);
        let control = ControlLoop::new(task.grid.clone(), task.start, condition.mode, &task.params, true);
        Ok(Self {
            id: id.into(),
            condition,
            seed,
            rng: trial_rng(seed),
            control,
            last_accepted: None,
            disconnected_at: None,
            outcome: None,
            log: Vec::new(),
            uniform,
            task,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn condition(&self) -> &InputCondition {
        &self.condition
    }

    pub fn status(&self) -> SessionStatus {
        self.outcome.map_or(SessionStatus::Running, |(s, _)| s)
    }

    pub fn is_running(&self) -> bool {
        self.outcome.is_none()
    }

    pub fn clock(&self) -> f64 {
        self.control.elapsed()
    }

    fn finish(&mut self, reason: EndReason) {
        if self.outcome.is_none() {
            let ok = reason == EndReason::Reached && self.control.state().collisions == 0;
            let status = if ok { SessionStatus::Succeeded } else { SessionStatus::Failed };
            self.outcome = Some((status, reason));
        }
    }

    /// Run ticks until the simulated clock catches up with `now`. Returns
    /// the number of ticks taken.
    pub fn advance_to(&mut self, now: f64) -> usize {
        let robot = self.task.params.robot;
        let goal_point = self.task.grid.cell_to_world(self.task.goal);
        let max_steps = (robot.timeout / robot.dt).round() as u64;
        let deadline = self.disconnected_at.map(|t| t + DISCONNECT_GRACE);
        let until = deadline.map_or(now, |d| now.min(d));
        let mut ticks = 0;
        while self.is_running() && (self.control.steps() + 1) as f64 * robot.dt <= until + 1e-9 {
            self.control.tick();
            ticks += 1;
            if self.control.state().position.distance(&goal_point) <= robot.goal_radius {
                self.finish(EndReason::Reached);
            } else if self.control.steps() >= max_steps {
                self.finish(EndReason::Timeout);
            }
        }
        if deadline.is_some_and(|d| now >= d) {
            self.finish(EndReason::Disconnected);
        }
        ticks
    }

    /// The client went away at `now`; the session fails unless it comes
    /// back within the grace period.
    pub fn disconnect(&mut self, now: f64) {
        self.disconnected_at.get_or_insert(now);
    }

    pub fn reconnect(&mut self, now: f64) {
        self.advance_to(now);
        if self.is_running() {
            self.disconnected_at = None;
        }
    }

    /// Operator command arriving at `now`.
    pub fn submit_input(&mut self, now: f64, payload: InputPayload, seq: Option<u64>) -> InputAck {
        self.advance_to(now);
        let ack = |status, command: Option<VelocityCommand>, retry_in, reason: Option<String>| InputAck {
            status,
            seq,
            command: command.map(pair),
            retry_in,
            reason,
        };
        if !self.is_running() {
            return ack(AckStatus::Rejected, None, None, Some("session has ended".into()));
        }
        let speed = self.task.params.robot.speed;
        let set = self.condition.directions;
        let sent = match payload {
            InputPayload::Direction(k) => match set.unit(k) {
                Some((ux, uy)) => VelocityCommand::new(ux * speed, uy * speed),
                None => {
                    let reason = if set.count() == 0 {
                        "this session takes `vector` inputs".to_string()
                    } else {
                        format!("direction {k} out of range 0..{}", set.count())
                    };
                    return ack(AckStatus::Rejected, None, None, Some(reason));
                }
            },
            InputPayload::Vector(v) if set.count() == 0 => {
                if v.magnitude() > speed { v.with_magnitude(speed) } else { v }
            }
            InputPayload::Vector(v) => quantize(v, set, speed),
        };
        if let Some(t) = self.last_accepted {
            let since = now - t;
            if since + 1e-9 < self.condition.period {
                return ack(AckStatus::Limited, Some(sent), Some(self.condition.period - since), None);
            }
        }
        let applied = corrupt(sent, &self.condition, speed, &mut self.rng);
        let position = self.control.state().position;
        let record = CommandRecord { time: now, position, velocity: applied };
        if let Err(e) = self.control.apply_input(record) {
            // the held command still applies; only the estimate is stale
            if !matches!(e, EstimatorError::NoFeasibleGoal) {
                return ack(AckStatus::Rejected, None, None, Some(e.to_string()));
            }
        }
        self.last_accepted = Some(now);
        self.log.push(InputLogEntry {
            time: now,
            position: [position.x, position.y],
            sent: pair(sent),
            applied: pair(applied),
        });
        ack(AckStatus::Accepted, Some(sent), None, None)
    }

    pub fn frame(&self) -> StateFrame {
        let s = self.control.state();
        let est = self.control.estimator();
        StateFrame {
            status: self.status(),
            clock: self.clock(),
            position: [s.position.x, s.position.y],
            velocity: pair(self.control.last_output().command),
            collisions: s.collisions,
            path_length: s.path_length,
            confidence: self.control.last_output().confidence,
            goal_cell: est.estimate().map(|e| [e.goal().x, e.goal().y]),
            heatmap: est
                .posterior()
                .map_or_else(|| self.uniform.clone(), |p| p.downsample(HEATMAP_MAX_DIM)),
        }
    }

    pub fn created(&self) -> Created {
        let goal = self.task.grid.cell_to_world(self.task.goal);
        Created {
            session: self.id.clone(),
            condition: self.condition,
            speed: self.task.params.robot.speed,
            map: MapPayload::from_grid(&self.task.grid),
            start: [self.task.start.x, self.task.start.y],
            goal: [goal.x, goal.y],
            goal_radius: self.task.params.robot.goal_radius,
            frame: self.frame(),
        }
    }

    /// Final report, once the session has ended.
    pub fn terminal(&self) -> Option<TerminalFrame> {
        let (status, reason) = self.outcome?;
        let s = self.control.state();
        Some(TerminalFrame {
            status,
            reason,
            result: TrialResult {
                success: status == SessionStatus::Succeeded,
                reached: reason == EndReason::Reached,
                collisions: s.collisions,
                elapsed: self.clock(),
                path_length: s.path_length,
                condition: self.condition,
                seed: self.seed,
            },
            log: self.log.clone(),
        })
    }

    pub fn log(&self) -> &[InputLogEntry] {
        &self.log
    }
}

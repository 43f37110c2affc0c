//! Confidence-weighted blend of the held operator command and the
//! autonomous command.

use serde::{Deserialize, Serialize};

use crate::autonomy::Autonomy;
use crate::command::VelocityCommand;
use crate::goal_estimator::GoalEstimate;
use crate::gridmap::{OccupancyGrid, WorldPoint};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControlMode {
    Shared,
    Direct,
}

impl ControlMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ControlMode::Shared => "shared",
            ControlMode::Direct => "direct",
        }
    }
}

impl std::str::FromStr for ControlMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "shared" => Ok(ControlMode::Shared),
            "direct" => Ok(ControlMode::Direct),
            other => Err(format!("unknown mode `{other}` (expected shared|direct)")),
        }
    }
}

/// Last operator command, held until the next one arrives.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct HeldCommand {
    pub value: VelocityCommand,
    pub issued_at: f64,
}

/// `c * v_auto + (1 - c) * v_user`, no renormalization.
pub fn blend(v_user: VelocityCommand, v_auto: VelocityCommand, c: f64) -> VelocityCommand {
    debug_assert!((0.0..=1.0).contains(&c), "confidence {c} outside [0, 1]");
    VelocityCommand::new(
        c * v_auto.vx + (1.0 - c) * v_user.vx,
        c * v_auto.vy + (1.0 - c) * v_user.vy,
    )
}

/// Output of one control tick.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TickOutput {
    pub command: VelocityCommand,
    /// Confidence actually applied; 0 in direct mode or when autonomy failed.
    pub confidence: f64,
}

/// One high-rate control step. Direct mode and ticks without an estimate
/// pass the held command through. An unreachable estimated goal degrades the
/// tick to direct mode.
pub fn control_tick(
    grid: &OccupancyGrid,
    autonomy: &mut Autonomy,
    position: WorldPoint,
    speed: f64,
    held: &HeldCommand,
    estimate: Option<&GoalEstimate>,
    mode: ControlMode,
) -> TickOutput {
    let direct = TickOutput { command: held.value, confidence: 0.0 };
    let estimate = match (mode, estimate) {
        (ControlMode::Shared, Some(e)) => e,
        _ => return direct,
    };
    match autonomy.command(grid, estimate.goal(), position, speed) {
        Ok(v_auto) => TickOutput {
            command: blend(held.value, v_auto, estimate.confidence),
            confidence: estimate.confidence,
        },
        Err(_) => direct,
    }
}

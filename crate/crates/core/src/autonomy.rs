//! Autonomous command toward the currently estimated goal: constant-speed
//! descent of that goal's potential field.

use std::sync::Arc;

use crate::gridmap::{Cell, OccupancyGrid, WorldPoint};
use crate::potential_field::{compute_field, desired_velocity, FieldError, PotentialField};

pub use crate::command::VelocityCommand;

/// Velocity of magnitude `speed` toward `goal`, or zero once `x` is in the
/// goal cell or no descent direction exists.
pub fn autonomous_command(
    grid: &OccupancyGrid,
    goal: Cell,
    x: WorldPoint,
    speed: f64,
) -> Result<VelocityCommand, FieldError> {
    let field = compute_field(grid, goal)?;
    command_from_field(&field, grid, x, speed)
}

fn command_from_field(
    field: &PotentialField,
    grid: &OccupancyGrid,
    x: WorldPoint,
    speed: f64,
) -> Result<VelocityCommand, FieldError> {
    if grid.world_to_cell(x) == Some(field.goal()) {
        return Ok(VelocityCommand::ZERO);
    }
    match desired_velocity(field, grid, x, speed) {
        Ok(v) => Ok(v),
        Err(FieldError::NoDescent) => Ok(VelocityCommand::ZERO),
        Err(e) => Err(e),
    }
}

/// Holds the field of the last goal asked for; a new goal replaces it.
#[derive(Debug, Clone, Default)]
pub struct Autonomy {
    cached: Option<Arc<PotentialField>>,
    builds: usize,
}

impl Autonomy {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn field(&mut self, grid: &OccupancyGrid, goal: Cell) -> Result<Arc<PotentialField>, FieldError> {
        match &self.cached {
            Some(f) if f.goal() == goal => Ok(f.clone()),
            _ => {
                let f = Arc::new(compute_field(grid, goal)?);
                self.builds += 1;
                self.cached = Some(f.clone());
                Ok(f)
            }
        }
    }

    pub fn command(
        &mut self,
        grid: &OccupancyGrid,
        goal: Cell,
        x: WorldPoint,
        speed: f64,
    ) -> Result<VelocityCommand, FieldError> {
        let field = self.field(grid, goal)?;
        command_from_field(&field, grid, x, speed)
    }

    /// Number of fields computed so far.
    pub fn builds(&self) -> usize {
        self.builds
    }
}

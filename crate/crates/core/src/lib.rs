//! Goal-inferring shared control for a teleoperated holonomic robot driven
//! by sparse, discrete and noisy operator commands.

pub mod autonomy;
pub mod command;
pub mod dataset;
pub mod experiment;
pub mod goal_estimator;
pub mod gridmap;
pub mod potential_field;
pub mod pseudo_user;
pub mod shared_controller;
pub mod simulator;
pub mod teleop;

pub use command::VelocityCommand;
pub use gridmap::{Cell, CellState, OccupancyGrid, WorldPoint};

use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

/// Planar translational velocity in m/s. The robot is holonomic and has no
/// heading, so this is the whole command.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VelocityCommand {
    pub vx: f64,
    pub vy: f64,
}

impl VelocityCommand {
    pub const ZERO: VelocityCommand = VelocityCommand { vx: 0.0, vy: 0.0 };

    pub const fn new(vx: f64, vy: f64) -> Self {
        Self { vx, vy }
    }

    pub fn magnitude(&self) -> f64 {
        self.vx.hypot(self.vy)
    }

    pub fn is_zero(&self) -> bool {
        self.vx == 0.0 && self.vy == 0.0
    }

    pub fn is_finite(&self) -> bool {
        self.vx.is_finite() && self.vy.is_finite()
    }

    /// Rescale to magnitude `speed`. Zero stays zero.
    pub fn with_magnitude(&self, speed: f64) -> Self {
        let m = self.magnitude();
        if m == 0.0 {
            return *self;
        }
        Self::new(self.vx / m * speed, self.vy / m * speed)
    }

    pub fn distance(&self, other: &VelocityCommand) -> f64 {
        (self.vx - other.vx).hypot(self.vy - other.vy)
    }
}

impl Add for VelocityCommand {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        Self::new(self.vx + rhs.vx, self.vy + rhs.vy)
    }
}

impl Sub for VelocityCommand {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        Self::new(self.vx - rhs.vx, self.vy - rhs.vy)
    }
}

impl Mul<f64> for VelocityCommand {
    type Output = Self;
    fn mul(self, k: f64) -> Self {
        Self::new(self.vx * k, self.vy * k)
    }
}

impl Neg for VelocityCommand {
    type Output = Self;
    fn neg(self) -> Self {
        Self::new(-self.vx, -self.vy)
    }
}

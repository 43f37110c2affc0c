//! Scripted operator and the input-constraint pipeline shared with live
//! input: ideal command, direction quantization, accuracy corruption and
//! fixed-period scheduling.
//!
//! Randomness comes from [`TrialRng`], ChaCha8 seeded through
//! `SeedableRng::seed_from_u64`. Each corruption decision consumes exactly
//! two 64-bit outputs: the first, scaled to `[0, 1)` as `(u >> 11) * 2^-53`,
//! decides whether the command survives; the second picks the replacement
//! direction by the multiply-shift `(u * (n - 1)) >> 64`.

use std::f64::consts::{FRAC_1_SQRT_2, PI, TAU};
use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::command::VelocityCommand;
use crate::goal_estimator::CommandRecord;
use crate::gridmap::{OccupancyGrid, WorldPoint};
use crate::potential_field::{desired_velocity, FieldError, PotentialField};
use crate::shared_controller::ControlMode;

pub type TrialRng = ChaCha8Rng;

pub fn trial_rng(seed: u64) -> TrialRng {
    ChaCha8Rng::seed_from_u64(seed)
}

const FOUR: [(f64, f64); 4] = [(1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0)];
const EIGHT: [(f64, f64); 8] = [
    (1.0, 0.0),
    (FRAC_1_SQRT_2, FRAC_1_SQRT_2),
    (0.0, 1.0),
    (-FRAC_1_SQRT_2, FRAC_1_SQRT_2),
    (-1.0, 0.0),
    (-FRAC_1_SQRT_2, -FRAC_1_SQRT_2),
    (0.0, -1.0),
    (FRAC_1_SQRT_2, -FRAC_1_SQRT_2),
];

/// Which command directions the operator can express. Direction index `k`
/// points at angle `k * 360 / n` degrees, counter-clockwise from `+x`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DirectionSet {
    All,
    Eight,
    Four,
}

impl DirectionSet {
    fn table(&self) -> &'static [(f64, f64)] {
        match self {
            DirectionSet::All => &[],
            DirectionSet::Eight => &EIGHT,
            DirectionSet::Four => &FOUR,
        }
    }

    /// Number of discrete directions; 0 for `All`.
    pub fn count(&self) -> usize {
        self.table().len()
    }

    /// Unit vector of direction `index`.
    pub fn unit(&self, index: usize) -> Option<(f64, f64)> {
        self.table().get(index).copied()
    }

    /// Nearest direction index by angle, smaller index on exact ties.
    /// `None` for `All` or a zero vector.
    pub fn nearest(&self, v: VelocityCommand) -> Option<usize> {
        let n = self.count();
        if n == 0 || v.is_zero() {
            return None;
        }
        let theta = v.vy.atan2(v.vx).rem_euclid(TAU);
        let step = TAU / n as f64;
        let mut best = (0, f64::INFINITY);
        for k in 0..n {
            let d = (theta - k as f64 * step).abs();
            let d = d.min(TAU - d);
            if d < best.1 {
                best = (k, d);
            }
        }
        debug_assert!(best.1 <= PI);
        Some(best.0)
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            DirectionSet::All => "all",
            DirectionSet::Eight => "eight",
            DirectionSet::Four => "four",
        }
    }
}

impl fmt::Display for DirectionSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DirectionSet {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "all" => Ok(DirectionSet::All),
            "eight" | "8" => Ok(DirectionSet::Eight),
            "four" | "4" => Ok(DirectionSet::Four),
            other => Err(format!("unknown direction set `{other}` (expected all|eight|four)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InputCondition {
    pub directions: DirectionSet,
    pub accuracy: f64,
    /// Seconds between accepted inputs.
    pub period: f64,
    pub mode: ControlMode,
}

impl InputCondition {
    pub fn new(directions: DirectionSet, accuracy: f64, mode: ControlMode) -> Self {
        Self { directions, accuracy, period: 1.0, mode }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.accuracy) {
            return Err(format!("accuracy {} must lie in [0, 1]", self.accuracy));
        }
        if !(self.period.is_finite() && self.period > 0.0) {
            return Err(format!("period {} must be positive", self.period));
        }
        Ok(())
    }
}

/// Ideal operator command: descent toward the true goal, zero at the goal.
pub fn ideal_command(
    field: &PotentialField,
    grid: &OccupancyGrid,
    x: WorldPoint,
    speed: f64,
) -> Result<VelocityCommand, FieldError> {
    if grid.world_to_cell(x) == Some(field.goal()) {
        return Ok(VelocityCommand::ZERO);
    }
    match desired_velocity(field, grid, x, speed) {
        Err(FieldError::NoDescent) => Ok(VelocityCommand::ZERO),
        other => other,
    }
}

/// Snap `v` to the nearest expressible direction at magnitude `speed`.
/// `All` and the zero vector pass through.
pub fn quantize(v: VelocityCommand, directions: DirectionSet, speed: f64) -> VelocityCommand {
    match directions.nearest(v).and_then(|k| directions.unit(k)) {
        Some((ux, uy)) => VelocityCommand::new(ux * speed, uy * speed),
        None => v,
    }
}

fn unit_f64(rng: &mut TrialRng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

fn below(rng: &mut TrialRng, n: usize) -> usize {
    ((rng.next_u64() as u128 * n as u128) >> 64) as usize
}

/// With probability `1 - accuracy`, replace a quantized command by one of
/// the other directions, uniformly. `All` and zero commands are never
/// altered. Always consumes two draws for discrete direction sets.
pub fn corrupt(v_q: VelocityCommand, condition: &InputCondition, speed: f64, rng: &mut TrialRng) -> VelocityCommand {
    let set = condition.directions;
    let n = set.count();
    if n == 0 {
        return v_q;
    }
    let keep = unit_f64(rng) < condition.accuracy;
    let pick = below(rng, n - 1);
    if keep || v_q.is_zero() {
        return v_q;
    }
    let current = set.nearest(v_q).expect("nonzero command has a direction");
    let index = if pick >= current { pick + 1 } else { pick };
    let (ux, uy) = set.unit(index).expect("index in range");
    VelocityCommand::new(ux * speed, uy * speed)
}

/// The full operator pipeline at a fixed period.
#[derive(Debug, Clone)]
pub struct PseudoUser {
    condition: InputCondition,
    speed: f64,
    rng: TrialRng,
    emitted: u64,
}

impl PseudoUser {
    pub fn new(condition: InputCondition, speed: f64, seed: u64) -> Self {
        Self { condition, speed, rng: trial_rng(seed), emitted: 0 }
    }

    pub fn condition(&self) -> &InputCondition {
        &self.condition
    }

    /// Emits one record when `clock` has reached the next period boundary,
    /// `None` otherwise. The first boundary is at 0.
    pub fn next_input(
        &mut self,
        clock: f64,
        field: &PotentialField,
        grid: &OccupancyGrid,
        x: WorldPoint,
    ) -> Result<Option<CommandRecord>, FieldError> {
        let due = self.emitted as f64 * self.condition.period;
        if clock + 1e-9 < due {
            return Ok(None);
        }
        self.emitted += 1;
        let ideal = ideal_command(field, grid, x, self.speed)?;
        let q = quantize(ideal, self.condition.directions, self.speed);
        let v = corrupt(q, &self.condition, self.speed, &mut self.rng);
        Ok(Some(CommandRecord { time: clock, position: x, velocity: v }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridmap::{Cell, CellState};
    use rand_core::RngCore;
    use crate::potential_field::compute_field;
    use proptest::prelude::*;

    const S: f64 = 0.3;

    fn close(a: VelocityCommand, b: VelocityCommand) -> bool {
        a.distance(&b) < 1e-12
    }

    #[test]
    fn quantize_examples() {
        let v = VelocityCommand::new(0.2, 0.1);
        assert_eq!(quantize(v, DirectionSet::Four, S), VelocityCommand::new(0.3, 0.0));
        let e = quantize(v, DirectionSet::Eight, S);
        assert!(close(e, VelocityCommand::new(S / 2f64.sqrt(), S / 2f64.sqrt())));
        assert!((e.vx - 0.212).abs() < 1e-3);
        assert_eq!(quantize(VelocityCommand::new(0.0, -1.0), DirectionSet::Four, S), VelocityCommand::new(0.0, -0.3));
        assert_eq!(quantize(v, DirectionSet::All, S), v);
        assert_eq!(quantize(VelocityCommand::ZERO, DirectionSet::Four, S), VelocityCommand::ZERO);
    }

    #[test]
    fn quantize_ties_take_smaller_index() {
        // exactly 45 degrees between east (0) and north (1)
        assert_eq!(quantize(VelocityCommand::new(1.0, 1.0), DirectionSet::Four, S), VelocityCommand::new(S, 0.0));
        // 315 degrees between south (3) and east (0): east wins
        assert_eq!(DirectionSet::Four.nearest(VelocityCommand::new(1.0, -1.0)), Some(0));
        assert_eq!(DirectionSet::Four.nearest(VelocityCommand::new(-1.0, 1.0)), Some(1));
    }

    #[test]
    fn full_accuracy_never_corrupts() {
        let cond = InputCondition::new(DirectionSet::Four, 1.0, ControlMode::Direct);
        let mut rng = trial_rng(1);
        let v = VelocityCommand::new(S, 0.0);
        for _ in 0..500 {
            assert_eq!(corrupt(v, &cond, S, &mut rng), v);
        }
    }

    #[test]
    fn zero_accuracy_always_changes_direction() {
        let cond = InputCondition::new(DirectionSet::Four, 0.0, ControlMode::Direct);
        let mut rng = trial_rng(2);
        let v = VelocityCommand::new(S, 0.0);
        let mut seen = [false; 4];
        for _ in 0..200 {
            let out = corrupt(v, &cond, S, &mut rng);
            let k = DirectionSet::Four.nearest(out).unwrap();
            assert_ne!(k, 0);
            seen[k] = true;
        }
        assert_eq!(seen, [false, true, true, true]);
    }

    #[test]
    fn corrupt_consumes_two_draws() {
        let cond = InputCondition::new(DirectionSet::Eight, 0.5, ControlMode::Direct);
        let mut a = trial_rng(9);
        let mut b = trial_rng(9);
        corrupt(VelocityCommand::new(S, 0.0), &cond, S, &mut a);
        b.next_u64();
        b.next_u64();
        assert_eq!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn corruption_rate_seed_42() {
        let cond = InputCondition::new(DirectionSet::Four, 0.7, ControlMode::Direct);
        let mut rng = trial_rng(42);
        let v = VelocityCommand::new(0.0, S);
        let wrong = (0..1000).filter(|_| corrupt(v, &cond, S, &mut rng) != v).count();
        assert!((wrong as f64 / 1000.0 - 0.3).abs() <= 0.04, "{wrong}");
    }

    #[test]
    fn schedule_emits_on_period_boundaries() {
        let g = OccupancyGrid::free(7, 7, 1.0).unwrap();
        let f = compute_field(&g, Cell::new(3, 6)).unwrap();
        let x = g.cell_to_world(Cell::new(3, 1));
        let mut u = PseudoUser::new(InputCondition::new(DirectionSet::All, 0.2, ControlMode::Direct), S, 5);
        let emitted: Vec<f64> = [0.0, 0.5, 1.0]
            .into_iter()
            .filter_map(|t| u.next_input(t, &f, &g, x).unwrap().map(|r| r.time))
            .collect();
        assert_eq!(emitted, vec![0.0, 1.0]);

        // All-direction input is the ideal command regardless of accuracy
        let r = u.next_input(2.0, &f, &g, x).unwrap().unwrap();
        assert_eq!(r.velocity, VelocityCommand::new(0.0, S));
    }

    #[test]
    fn seeded_runs_repeat() {
        let g = OccupancyGrid::free(9, 9, 0.5).unwrap();
        let f = compute_field(&g, Cell::new(8, 8)).unwrap();
        let run = || {
            let mut u = PseudoUser::new(InputCondition::new(DirectionSet::Eight, 0.7, ControlMode::Direct), S, 77);
            (0..30)
                .filter_map(|k| u.next_input(k as f64, &f, &g, WorldPoint::new(0.3, 0.4)).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn ideal_command_detours_around_wall() {
        let mut g = OccupancyGrid::free(7, 7, 1.0).unwrap();
        for x in 0..6 {
            g.set(Cell::new(x, 3), CellState::Occupied);
        }
        let f = compute_field(&g, Cell::new(1, 5)).unwrap();
        let v = ideal_command(&f, &g, g.cell_to_world(Cell::new(1, 2)), S).unwrap();
        assert!(v.vx > 0.0 && v.vy <= 0.0 + 1e-12, "{v:?}");
        let at = ideal_command(&f, &g, g.cell_to_world(Cell::new(1, 5)), S).unwrap();
        assert_eq!(at, VelocityCommand::ZERO);
        let north = compute_field(&OccupancyGrid::free(7, 7, 1.0).unwrap(), Cell::new(3, 6)).unwrap();
        let v = ideal_command(&north, &OccupancyGrid::free(7, 7, 1.0).unwrap(), WorldPoint::new(3.5, 1.5), S).unwrap();
        assert_eq!(v, VelocityCommand::new(0.0, S));
    }

    fn set_strategy() -> impl Strategy<Value = DirectionSet> {
        prop::sample::select(vec![DirectionSet::Four, DirectionSet::Eight])
    }

    proptest! {
        #[test]
        fn quantize_is_idempotent_with_fixed_magnitude(a in 0.0f64..TAU, m in 0.01f64..5.0, set in set_strategy()) {
            let v = VelocityCommand::new(a.cos() * m, a.sin() * m);
            let q = quantize(v, set, S);
            prop_assert!((q.magnitude() - S).abs() < 1e-12);
            prop_assert_eq!(quantize(q, set, S), q);
        }

        #[test]
        fn corrupt_stays_in_direction_set(seed in 0u64..1000, k in 0usize..8, acc in 0.0f64..=1.0, set in set_strategy()) {
            let k = k % set.count();
            let (ux, uy) = set.unit(k).unwrap();
            let v = VelocityCommand::new(ux * S, uy * S);
            let cond = InputCondition::new(set, acc, ControlMode::Direct);
            let out = corrupt(v, &cond, S, &mut trial_rng(seed));
            prop_assert_eq!(quantize(out, set, S), out);
        }
    }
}

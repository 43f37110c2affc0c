use std::sync::Arc;

use goalnav::goal_estimator::CommandRecord;
use goalnav::gridmap::load_map;
use goalnav::potential_field::compute_field;
use goalnav::pseudo_user::{ideal_command, DirectionSet, InputCondition};
use goalnav::shared_controller::ControlMode;
use goalnav::simulator::{ControlLoop, TrialParams};
use goalnav::teleop::{AckStatus, EndReason, InputPayload, Session, Task};
use goalnav::{VelocityCommand, WorldPoint};

fn task() -> Task {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../maps/two_room.txt");
    let grid = Arc::new(load_map(path).unwrap().inflate(0.25));
    let goal = grid.world_to_cell(WorldPoint::new(1.0, 4.2)).unwrap();
    Task { grid, start: WorldPoint::new(5.85, 3.65), goal, params: TrialParams::default() }
}

/// Operator sending the ideal direction at slightly irregular times, plus an
/// early duplicate that the rate limit must answer.
fn drive(session: &mut Session, task: &Task) {
    let field = compute_field(&task.grid, task.goal).unwrap();
    let speed = task.params.robot.speed;
    let mut now = 0.0;
    let mut k = 0u64;
    while session.is_running() && now < 200.0 {
        session.advance_to(now);
        let x = WorldPoint::new(session.frame().position[0], session.frame().position[1]);
        let v = ideal_command(&field, &task.grid, x, speed).unwrap();
        let ack = session.submit_input(now, InputPayload::Vector(v), Some(k));
        assert_eq!(ack.seq, Some(k));
        if session.is_running() {
            assert_eq!(ack.status, AckStatus::Accepted, "at {now}");
            let dup = session.submit_input(now + 0.3, InputPayload::Vector(v), Some(k + 1));
            assert_eq!(dup.status, AckStatus::Limited);
            assert!(dup.retry_in.unwrap() > 0.0);
        }
        k += 2;
        now += 1.0 + 0.013 * (k % 5) as f64;
    }
}

fn replay(task: &Task, mode: ControlMode, session: &Session) -> (u32, f64, f64) {
    let terminal = session.terminal().expect("session ended");
    let robot = task.params.robot;
    let goal = task.grid.cell_to_world(task.goal);
    let mut control = ControlLoop::new(task.grid.clone(), task.start, mode, &task.params, true);
    let max_steps = (robot.timeout / robot.dt).round() as u64;
    let done = |c: &ControlLoop| c.state().position.distance(&goal) <= robot.goal_radius || c.steps() >= max_steps;
    for entry in &terminal.log {
        while !done(&control) && (control.steps() + 1) as f64 * robot.dt <= entry.time + 1e-9 {
            control.tick();
        }
        let record = CommandRecord {
            time: entry.time,
            position: control.state().position,
            velocity: VelocityCommand::new(entry.applied[0], entry.applied[1]),
        };
        let _ = control.apply_input(record);
    }
    while !done(&control) {
        control.tick();
    }
    (control.state().collisions, control.elapsed(), control.state().path_length)
}

#[test]
fn logged_inputs_reproduce_the_session() {
    let task = task();
    for (directions, accuracy, mode) in [
        (DirectionSet::Four, 0.7, ControlMode::Direct),
        (DirectionSet::Eight, 0.8, ControlMode::Shared),
        (DirectionSet::All, 1.0, ControlMode::Shared),
    ] {
        let condition = InputCondition::new(directions, accuracy, mode);
        let mut session = Session::new("replay", task.clone(), condition, 9).unwrap();
        drive(&mut session, &task);
        let terminal = session.terminal().expect("session ended");
        assert_ne!(terminal.reason, EndReason::Disconnected);

        let (collisions, elapsed, path) = replay(&task, mode, &session);
        let r = terminal.result;
        let dt = task.params.robot.dt;
        assert_eq!(collisions, r.collisions, "{directions}/{accuracy}");
        assert!((elapsed - r.elapsed).abs() <= dt + 1e-9, "{elapsed} vs {}", r.elapsed);
        assert!((path - r.path_length).abs() <= task.params.robot.speed * dt + 1e-9);
    }
}

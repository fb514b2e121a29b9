use crate::dataset::{DemoStep, Demonstration};
use crate::error::{CoaError, Result};
use crate::sim::{Env, TaskId, TaskSpec, GRIPPER_CLOSED, GRIPPER_OPEN};

/// Positions visited by a straight-line move with a trapezoidal speed
/// profile: speed ramps by `v_max / 4` per step, saturates at `v_max`, and
/// decelerates so the final step lands exactly on `to`. Empty when
/// `from == to`.
pub fn trapezoid_segment(from: [f64; 2], to: [f64; 2], v_max: f64) -> Vec<[f64; 2]> {
    let accel = v_max / 4.0;
    let (dx, dy) = (to[0] - from[0], to[1] - from[1]);
    let total = (dx * dx + dy * dy).sqrt();
    let mut out = Vec::new();
    if total == 0.0 {
        return out;
    }
    let (ux, uy) = (dx / total, dy / total);
    let mut travelled = 0.0;
    let mut speed: f64 = 0.0;
    loop {
        let remaining = total - travelled;
        speed = (speed + accel)
            .min(v_max)
            .min((2.0 * accel * remaining).sqrt())
            .max(accel);
        if speed >= remaining - 1e-12 {
            out.push(to);
            return out;
        }
        travelled += speed;
        out.push([from[0] + ux * travelled, from[1] + uy * travelled]);
    }
}

fn planned_actions(spec: &TaskSpec, env: &Env) -> Vec<[f64; 4]> {
    let s = env.state();
    let theta = s.ee[2];
    let home = [s.ee[0], s.ee[1]];
    let with = |pts: Vec<[f64; 2]>, g: f64| -> Vec<[f64; 4]> {
        pts.into_iter().map(|p| [p[0], p[1], theta, g]).collect()
    };
    let obj = s.objects.clone();
    let mut plan = Vec::new();
    match spec.task {
        TaskId::ReachTarget => {
            plan.extend(with(trapezoid_segment(home, obj[0], spec.v_max), GRIPPER_OPEN));
        }
        TaskId::PushButton => {
            plan.extend(with(trapezoid_segment(home, obj[0], spec.v_max), GRIPPER_OPEN));
            plan.push([obj[0][0], obj[0][1], theta, GRIPPER_CLOSED]);
        }
        TaskId::PickPlace => {
            plan.extend(with(trapezoid_segment(home, obj[0], spec.v_max), GRIPPER_OPEN));
            plan.push([obj[0][0], obj[0][1], theta, GRIPPER_CLOSED]);
            plan.extend(with(trapezoid_segment(obj[0], obj[1], spec.v_max), GRIPPER_CLOSED));
        }
        TaskId::SlideBlock => {
            plan.extend(with(trapezoid_segment(home, obj[0], spec.v_max), GRIPPER_CLOSED));
            plan.extend(with(trapezoid_segment(obj[0], obj[1], spec.v_max), GRIPPER_CLOSED));
        }
    }
    plan
}

/// Scripted demonstration for `(spec, seed)`.
///
/// The expert follows its whole plan even after the success condition first
/// holds, so the final recorded action is the goal pose itself. Episodes
/// shorter than 2 steps, longer than `max_steps`, or not ending in success
/// are reported as failures.
pub fn scripted_expert(spec: &TaskSpec, seed: u64) -> Result<Demonstration> {
    let (mut env, mut obs) = Env::reset(spec, seed)?;
    let object_positions = env.state().objects.clone();
    let plan = planned_actions(spec, &env);
    let fail = |reason: String| CoaError::ExpertFailure { seed, reason };
    if plan.len() < 2 {
        return Err(fail(format!("plan has {} steps, need at least 2", plan.len())));
    }
    if plan.len() > spec.max_steps {
        return Err(fail(format!(
            "plan needs {} steps, limit is {}",
            plan.len(),
            spec.max_steps
        )));
    }
    let mut steps = Vec::with_capacity(plan.len());
    for act in plan {
        let out = env.step(&act)?;
        steps.push(DemoStep {
            obs: std::mem::replace(&mut obs, out.observation),
            act: act.to_vec(),
        });
    }
    if !env.state().success {
        return Err(fail("plan finished without reaching the goal".into()));
    }
    Ok(Demonstration {
        task: spec.task,
        seed,
        steps,
        success: true,
        object_positions,
    })
}

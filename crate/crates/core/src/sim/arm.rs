//! Planar two-link arm with a task-space PD controller that maps pose
//! error to joint velocity commands through the Jacobian.

use serde::{Deserialize, Serialize};

/// Below this |det J| the controller switches to damped least squares.
pub const SINGULAR_DET: f64 = 1e-8;
pub const DAMPING_LAMBDA: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmModel {
    pub l1: f64,
    pub l2: f64,
    pub q: [f64; 2],
    pub kp: f64,
    pub kd: f64,
}

impl ArmModel {
    pub fn new(l1: f64, l2: f64, q: [f64; 2]) -> Self {
        Self {
            l1,
            l2,
            q,
            kp: 4.0,
            kd: 1.0,
        }
    }

    pub fn forward_kinematics(&self) -> [f64; 2] {
        let (q1, q12) = (self.q[0], self.q[0] + self.q[1]);
        [
            self.l1 * q1.cos() + self.l2 * q12.cos(),
            self.l1 * q1.sin() + self.l2 * q12.sin(),
        ]
    }

    /// Whether a Cartesian point lies in the reachable annulus.
    pub fn reachable(&self, p: [f64; 2]) -> bool {
        let r = (p[0] * p[0] + p[1] * p[1]).sqrt();
        (self.l1 - self.l2).abs() <= r && r <= self.l1 + self.l2
    }
}

/// `J = [[-l1 s1 - l2 s12, -l2 s12], [l1 c1 + l2 c12, l2 c12]]`.
pub fn jacobian_2link(arm: &ArmModel) -> [[f64; 2]; 2] {
    let (q1, q12) = (arm.q[0], arm.q[0] + arm.q[1]);
    let (s1, c1, s12, c12) = (q1.sin(), q1.cos(), q12.sin(), q12.cos());
    [
        [-arm.l1 * s1 - arm.l2 * s12, -arm.l2 * s12],
        [arm.l1 * c1 + arm.l2 * c12, arm.l2 * c12],
    ]
}

pub fn det2(m: &[[f64; 2]; 2]) -> f64 {
    m[0][0] * m[1][1] - m[0][1] * m[1][0]
}

/// Joint velocity command `J⁺ (Kp e + Kd ė)` with `e = target - current`
/// and `ė = -current_vel` for a stationary target.
///
/// Uses the exact inverse when `|det J| >= SINGULAR_DET`, otherwise the
/// damped least-squares inverse `Jᵀ (J Jᵀ + λ² I)⁻¹`.
pub fn pd_control(arm: &ArmModel, target: [f64; 2], current: [f64; 2], current_vel: [f64; 2]) -> [f64; 2] {
    let e = [target[0] - current[0], target[1] - current[1]];
    let u = [
        arm.kp * e[0] - arm.kd * current_vel[0],
        arm.kp * e[1] - arm.kd * current_vel[1],
    ];
    let j = jacobian_2link(arm);
    let det = det2(&j);
    if det.abs() >= SINGULAR_DET {
        [
            (j[1][1] * u[0] - j[0][1] * u[1]) / det,
            (-j[1][0] * u[0] + j[0][0] * u[1]) / det,
        ]
    } else {
        // A = J Jᵀ + λ² I (symmetric)
        let l2 = DAMPING_LAMBDA * DAMPING_LAMBDA;
        let a00 = j[0][0] * j[0][0] + j[0][1] * j[0][1] + l2;
        let a01 = j[0][0] * j[1][0] + j[0][1] * j[1][1];
        let a11 = j[1][0] * j[1][0] + j[1][1] * j[1][1] + l2;
        let da = a00 * a11 - a01 * a01;
        let y = [(a11 * u[0] - a01 * u[1]) / da, (-a01 * u[0] + a00 * u[1]) / da];
        [
            j[0][0] * y[0] + j[1][0] * y[1],
            j[0][1] * y[0] + j[1][1] * y[1],
        ]
    }
}

/// Velocity-controlled arm whose joints track commands with a first-order
/// lag (time constant `tau`), integrated with step `dt`.
#[derive(Clone, Debug)]
pub struct ArmSim {
    pub arm: ArmModel,
    pub joint_vel: [f64; 2],
    pub tau: f64,
    pub dt: f64,
}

impl ArmSim {
    pub fn new(arm: ArmModel, dt: f64) -> Self {
        Self {
            arm,
            joint_vel: [0.0; 2],
            tau: 0.05,
            dt,
        }
    }

    pub fn ee_velocity(&self) -> [f64; 2] {
        let j = jacobian_2link(&self.arm);
        [
            j[0][0] * self.joint_vel[0] + j[0][1] * self.joint_vel[1],
            j[1][0] * self.joint_vel[0] + j[1][1] * self.joint_vel[1],
        ]
    }

    /// One control tick toward `target`; returns the new end-effector position.
    pub fn step(&mut self, target: [f64; 2]) -> [f64; 2] {
        let cmd = pd_control(&self.arm, target, self.arm.forward_kinematics(), self.ee_velocity());
        let beta = (self.dt / self.tau).min(1.0);
        for i in 0..2 {
            self.joint_vel[i] += beta * (cmd[i] - self.joint_vel[i]);
            self.arm.q[i] += self.dt * self.joint_vel[i];
        }
        self.arm.forward_kinematics()
    }
}

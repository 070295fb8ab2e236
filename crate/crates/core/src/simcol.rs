//! Oriented-box collision checks and non-reactive replay against logged
//! obstacle futures.

use serde::{Deserialize, Serialize};

use crate::error::{check_shape, Result};
use crate::scenarios::{ObstacleState, Scene};
use crate::trajectory::Trajectory;

pub const EGO_HALF_LENGTH: f64 = 2.4;
pub const EGO_HALF_WIDTH: f64 = 1.0;

/// Penalty for an overlap where the other vehicle drives into the ego from
/// behind.
pub const REAR_END_PENALTY: f64 = 0.3;
pub const ACTIVE_PENALTY: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrientedBox {
    pub center: [f64; 2],
    pub heading: f64,
    pub half_length: f64,
    pub half_width: f64,
}

impl OrientedBox {
    pub fn new(center: [f64; 2], heading: f64, half_length: f64, half_width: f64) -> Self {
        debug_assert!(half_length > 0.0 && half_width > 0.0);
        Self {
            center,
            heading,
            half_length,
            half_width,
        }
    }

    /// Unit axes along the length and the width.
    pub fn axes(&self) -> [[f64; 2]; 2] {
        let (s, c) = self.heading.sin_cos();
        [[c, s], [-s, c]]
    }

    pub fn corners(&self) -> [[f64; 2]; 4] {
        let [u, v] = self.axes();
        let (a, b) = (self.half_length, self.half_width);
        let [x, y] = self.center;
        [
            [x + a * u[0] + b * v[0], y + a * u[1] + b * v[1]],
            [x - a * u[0] + b * v[0], y - a * u[1] + b * v[1]],
            [x - a * u[0] - b * v[0], y - a * u[1] - b * v[1]],
            [x + a * u[0] - b * v[0], y + a * u[1] - b * v[1]],
        ]
    }

    /// Half the extent of the box projected onto unit axis `n`.
    fn radius_along(&self, n: [f64; 2]) -> f64 {
        let [u, v] = self.axes();
        self.half_length * dot(u, n).abs() + self.half_width * dot(v, n).abs()
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        let d = [p[0] - self.center[0], p[1] - self.center[1]];
        let [u, v] = self.axes();
        dot(d, u).abs() <= self.half_length && dot(d, v).abs() <= self.half_width
    }
}

fn dot(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

/// Separating-axis test over the four edge normals. Boxes that merely touch
/// count as overlapping.
pub fn obb_overlap(a: &OrientedBox, b: &OrientedBox) -> bool {
    let d = [b.center[0] - a.center[0], b.center[1] - a.center[1]];
    let [a0, a1] = a.axes();
    let [b0, b1] = b.axes();
    [a0, a1, b0, b1]
        .into_iter()
        .all(|n| dot(d, n).abs() <= a.radius_along(n) + b.radius_along(n))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CollisionTag {
    None,
    RearEnd,
    Active,
}

impl CollisionTag {
    pub fn penalty(self) -> f64 {
        match self {
            CollisionTag::None => 0.0,
            CollisionTag::RearEnd => REAR_END_PENALTY,
            CollisionTag::Active => ACTIVE_PENALTY,
        }
    }
}

/// One tag per trajectory step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollisionFlags(pub Vec<CollisionTag>);

impl CollisionFlags {
    pub fn any(&self) -> bool {
        self.0.iter().any(|t| *t != CollisionTag::None)
    }

    pub fn first_contact(&self) -> Option<usize> {
        self.0.iter().position(|t| *t != CollisionTag::None)
    }
}

pub fn ego_box(traj: &Trajectory, l: usize) -> OrientedBox {
    OrientedBox::new(
        traj.positions[l],
        traj.heading_angle(l),
        EGO_HALF_LENGTH,
        EGO_HALF_WIDTH,
    )
}

/// Replay `traj` against obstacles that follow their logged futures.
pub fn rollout_replay(traj: &Trajectory, scene: &Scene) -> Result<CollisionFlags> {
    rollout_against(traj, &scene.obstacle_future)
}

/// `futures[k][l]` is obstacle `k` at step `l`.
pub fn rollout_against(traj: &Trajectory, futures: &[Vec<ObstacleState>]) -> Result<CollisionFlags> {
    let len = traj.horizon();
    for f in futures {
        check_shape("obstacle future", &[len], &[f.len()])?;
    }
    let speeds = traj.speeds();
    let flags = (0..len)
        .map(|l| {
            let ego = ego_box(traj, l);
            let fwd = ego.axes()[0];
            futures
                .iter()
                .map(|f| {
                    let ob = &f[l];
                    if !obb_overlap(&ego, &ob.to_box()) {
                        return CollisionTag::None;
                    }
                    let rel = [ob.x - ego.center[0], ob.y - ego.center[1]];
                    let behind = dot(rel, fwd) < 0.0;
                    if behind && ob.speed() > speeds[l] {
                        CollisionTag::RearEnd
                    } else {
                        CollisionTag::Active
                    }
                })
                .max()
                .unwrap_or(CollisionTag::None)
        })
        .collect();
    Ok(CollisionFlags(flags))
}

/// `1 − max_l c_l`.
pub fn safety_reward(flags: &CollisionFlags) -> f64 {
    1.0 - flags.0.iter().map(|t| t.penalty()).fold(0.0, f64::max)
}

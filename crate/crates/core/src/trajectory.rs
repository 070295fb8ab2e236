//! Planned trajectories and their tensor encodings.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Below this speed the heading of a velocity-derived trajectory is held.
pub const HEADING_HOLD_SPEED: f64 = 0.1;

/// A planned ego path of `L` steps in the ego frame at time zero.
///
/// Step `l` (0-based) is the state `dt·(l+1)` seconds ahead; the ego starts at
/// the origin heading along +x. `velocities[l]` is the average velocity over
/// the step that ends at `positions[l]`, so integrating velocities reproduces
/// positions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub dt: f64,
    pub positions: Vec<[f64; 2]>,
    /// `(cos θ, sin θ)` per step.
    pub headings: Vec<[f64; 2]>,
    pub velocities: Vec<[f64; 2]>,
}

impl Trajectory {
    /// Build from positions; velocities are backward differences from the
    /// origin, headings follow the velocity direction.
    pub fn from_positions(positions: Vec<[f64; 2]>, dt: f64) -> Self {
        let mut prev = [0.0, 0.0];
        let velocities = positions
            .iter()
            .map(|p| {
                let v = [(p[0] - prev[0]) / dt, (p[1] - prev[1]) / dt];
                prev = *p;
                v
            })
            .collect::<Vec<_>>();
        let headings = headings_from_velocity(&velocities, 0.0);
        Self {
            dt,
            positions,
            headings,
            velocities,
        }
    }

    /// Build from per-step velocities by integration.
    pub fn from_velocities(velocities: Vec<[f64; 2]>, dt: f64) -> Self {
        let mut acc = [0.0, 0.0];
        let positions = velocities
            .iter()
            .map(|v| {
                acc[0] += v[0] * dt;
                acc[1] += v[1] * dt;
                acc
            })
            .collect();
        let headings = headings_from_velocity(&velocities, 0.0);
        Self {
            dt,
            positions,
            headings,
            velocities,
        }
    }

    pub fn horizon(&self) -> usize {
        self.positions.len()
    }

    pub fn final_position(&self) -> [f64; 2] {
        *self.positions.last().expect("empty trajectory")
    }

    pub fn speeds(&self) -> Vec<f64> {
        self.velocities.iter().map(|v| v[0].hypot(v[1])).collect()
    }

    pub fn heading_angle(&self, l: usize) -> f64 {
        let [c, s] = self.headings[l];
        s.atan2(c)
    }

    /// Largest deviation of `|(cos, sin)|` from one.
    pub fn heading_norm_error(&self) -> f64 {
        self.headings
            .iter()
            .map(|h| (h[0] * h[0] + h[1] * h[1] - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Largest gap between stored positions and integrated velocities.
    pub fn kinematic_error(&self) -> f64 {
        let mut acc = [0.0, 0.0];
        let mut worst: f64 = 0.0;
        for (p, v) in self.positions.iter().zip(&self.velocities) {
            acc[0] += v[0] * self.dt;
            acc[1] += v[1] * self.dt;
            worst = worst.max((acc[0] - p[0]).abs()).max((acc[1] - p[1]).abs());
        }
        worst
    }

    /// Translate every position by `offset`.
    pub fn shifted(&self, offset: [f64; 2]) -> Self {
        let mut out = self.clone();
        for p in &mut out.positions {
            p[0] += offset[0];
            p[1] += offset[1];
        }
        out
    }
}

/// Heading per step from velocity direction, holding the previous heading
/// while nearly stopped.
pub fn headings_from_velocity(velocities: &[[f64; 2]], initial: f64) -> Vec<[f64; 2]> {
    let mut theta = initial;
    velocities
        .iter()
        .map(|v| {
            if v[0].hypot(v[1]) >= HEADING_HOLD_SPEED {
                theta = v[1].atan2(v[0]);
            }
            [theta.cos(), theta.sin()]
        })
        .collect()
}

/// What the denoiser generates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Representation {
    /// `(x, y, cos θ, sin θ)` per step.
    Waypoint,
    /// `(vx, vy)` per step, integrated to positions at inference.
    Velocity,
    /// Unstructured channels, used for toy problems.
    Generic(u32),
}

// Fixed per-channel normalization so that generated quantities are O(1).
pub const WAYPOINT_SCALE: [f64; 4] = [20.0, 5.0, 1.0, 1.0];
pub const VELOCITY_SCALE: [f64; 2] = [10.0, 2.0];

impl Representation {
    pub fn channels(self) -> usize {
        match self {
            Representation::Waypoint => 4,
            Representation::Velocity => 2,
            Representation::Generic(c) => c as usize,
        }
    }

    pub fn tag(self) -> String {
        match self {
            Representation::Waypoint => "waypoint".into(),
            Representation::Velocity => "velocity".into(),
            Representation::Generic(c) => format!("generic{c}"),
        }
    }

    pub(crate) fn code(self) -> u32 {
        match self {
            Representation::Waypoint => 0,
            Representation::Velocity => 1,
            Representation::Generic(c) => 0x100 + c,
        }
    }

    pub(crate) fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(Representation::Waypoint),
            1 => Ok(Representation::Velocity),
            c if c > 0x100 => Ok(Representation::Generic(c - 0x100)),
            _ => Err(Error::Format(format!("unknown representation code {code}"))),
        }
    }

    fn scale(self) -> &'static [f64] {
        match self {
            Representation::Waypoint => &WAYPOINT_SCALE,
            Representation::Velocity => &VELOCITY_SCALE,
            Representation::Generic(_) => &[],
        }
    }

    /// Normalized `L × channels` tensor for a trajectory.
    pub fn encode(self, traj: &Trajectory) -> Array2<f64> {
        let l = traj.horizon();
        let scale = self.scale();
        match self {
            Representation::Waypoint => Array2::from_shape_fn((l, 4), |(i, c)| {
                let raw = if c < 2 {
                    traj.positions[i][c]
                } else {
                    traj.headings[i][c - 2]
                };
                raw / scale[c]
            }),
            Representation::Velocity => {
                Array2::from_shape_fn((l, 2), |(i, c)| traj.velocities[i][c] / scale[c])
            }
            Representation::Generic(_) => panic!("generic representation has no trajectory encoding"),
        }
    }

    /// Inverse of [`Self::encode`].
    pub fn decode(self, tensor: &Array2<f64>, dt: f64) -> Trajectory {
        let scale = self.scale();
        match self {
            Representation::Waypoint => {
                let positions: Vec<[f64; 2]> = tensor
                    .rows()
                    .into_iter()
                    .map(|r| [r[0] * scale[0], r[1] * scale[1]])
                    .collect();
                let mut traj = Trajectory::from_positions(positions, dt);
                let mut prev = 0.0;
                traj.headings = tensor
                    .rows()
                    .into_iter()
                    .map(|r| {
                        let (c, s) = (r[2], r[3]);
                        if c.hypot(s) > 1e-9 {
                            prev = s.atan2(c);
                        }
                        [prev.cos(), prev.sin()]
                    })
                    .collect();
                traj
            }
            Representation::Velocity => {
                let velocities = tensor
                    .rows()
                    .into_iter()
                    .map(|r| [r[0] * scale[0], r[1] * scale[1]])
                    .collect();
                Trajectory::from_velocities(velocities, dt)
            }
            Representation::Generic(_) => panic!("generic representation has no trajectory decoding"),
        }
    }
}

impl fmt::Display for Representation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.tag())
    }
}

impl FromStr for Representation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "waypoint" => Ok(Representation::Waypoint),
            "velocity" => Ok(Representation::Velocity),
            other => Err(Error::Config(format!("unknown representation `{other}`"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn curve() -> Trajectory {
        let positions = (1..=30)
            .map(|i| {
                let t = i as f64 * 0.1;
                [10.0 * t, 0.5 * t * t]
            })
            .collect();
        Trajectory::from_positions(positions, 0.1)
    }

    #[test]
    fn positions_and_velocities_agree() {
        let tr = curve();
        assert!(tr.kinematic_error() < 1e-9);
        assert!(tr.heading_norm_error() < 1e-9);
        let back = Trajectory::from_velocities(tr.velocities.clone(), 0.1);
        for (a, b) in back.positions.iter().zip(&tr.positions) {
            assert!((a[0] - b[0]).abs() < 1e-9 && (a[1] - b[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn heading_held_when_stopped() {
        let v = vec![[1.0, 1.0], [0.0, 0.05], [0.0, 0.0]];
        let h = headings_from_velocity(&v, 0.0);
        let expect = std::f64::consts::FRAC_PI_4;
        for hh in &h {
            assert!((hh[1].atan2(hh[0]) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn encode_decode_round_trip() {
        let tr = curve();
        for rep in [Representation::Waypoint, Representation::Velocity] {
            let back = rep.decode(&rep.encode(&tr), 0.1);
            for (a, b) in back.positions.iter().zip(&tr.positions) {
                assert!((a[0] - b[0]).abs() < 1e-9 && (a[1] - b[1]).abs() < 1e-9, "{rep}");
            }
        }
    }
}

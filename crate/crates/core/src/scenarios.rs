//! Synthetic driving scenes with rule-based expert trajectories.
//!
//! Every scene is expressed in the ego frame at time zero: the ego box center
//! sits at the origin heading along +x. Obstacles move at constant velocity,
//! and their per-step states form the logged future used for replay.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::par::{map_range, Exec};
use crate::simcol::{rollout_replay, OrientedBox, EGO_HALF_LENGTH, EGO_HALF_WIDTH};
use crate::train::Example;
use crate::trajectory::{Representation, Trajectory};

pub const HORIZON: usize = 30;
pub const DT: f64 = 0.1;
pub const MAX_OBSTACLES: usize = 4;
pub const CTX_TOKENS: usize = MAX_OBSTACLES + 1;
pub const CTX_FEATURES: usize = 10;
pub const LANE_WIDTH: f64 = 3.5;

pub const DATASET_MAGIC: &[u8; 6] = b"HDPDS1";

// Vehicle and pedestrian footprints (half-extents, metres).
const CAR_HL: f64 = 2.3;
const CAR_HW: f64 = 0.95;
const PED_H: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SceneKind {
    Straight,
    CarFollowStop,
    LaneChangeBimodal,
    IntersectionYield,
    VruAvoid,
}

impl SceneKind {
    pub const ALL: [SceneKind; 5] = [
        SceneKind::Straight,
        SceneKind::CarFollowStop,
        SceneKind::LaneChangeBimodal,
        SceneKind::IntersectionYield,
        SceneKind::VruAvoid,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            SceneKind::Straight => "straight",
            SceneKind::CarFollowStop => "car-follow-stop",
            SceneKind::LaneChangeBimodal => "lane-change-bimodal",
            SceneKind::IntersectionYield => "intersection-yield",
            SceneKind::VruAvoid => "vru-avoid",
        }
    }

    fn code(self) -> usize {
        SceneKind::ALL.iter().position(|k| *k == self).unwrap()
    }
}

impl fmt::Display for SceneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for SceneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SceneKind::ALL
            .into_iter()
            .find(|k| k.tag() == s)
            .ok_or_else(|| Error::Config(format!("unknown scene kind `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Intent {
    Keep,
    ChangeLeft,
    ChangeRight,
    TurnLeft,
    TurnRight,
    Stop,
}

impl Intent {
    pub const ALL: [Intent; 6] = [
        Intent::Keep,
        Intent::ChangeLeft,
        Intent::ChangeRight,
        Intent::TurnLeft,
        Intent::TurnRight,
        Intent::Stop,
    ];

    pub fn index(self) -> usize {
        Intent::ALL.iter().position(|i| *i == self).unwrap()
    }
}

/// An obstacle at one instant.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObstacleState {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub half_length: f64,
    pub half_width: f64,
    pub vx: f64,
    pub vy: f64,
}

impl ObstacleState {
    const FIELDS: usize = 7;

    pub fn to_box(&self) -> OrientedBox {
        OrientedBox::new([self.x, self.y], self.heading, self.half_length, self.half_width)
    }

    pub fn speed(&self) -> f64 {
        self.vx.hypot(self.vy)
    }

    /// State after `t` seconds at constant velocity.
    pub fn advanced(&self, t: f64) -> Self {
        Self {
            x: self.x + self.vx * t,
            y: self.y + self.vy * t,
            ..*self
        }
    }

    fn to_array(self) -> [f64; 7] {
        [self.x, self.y, self.heading, self.half_length, self.half_width, self.vx, self.vy]
    }

    fn from_slice(v: &[f64]) -> Self {
        Self {
            x: v[0],
            y: v[1],
            heading: v[2],
            half_length: v[3],
            half_width: v[4],
            vx: v[5],
            vy: v[6],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneContext {
    pub ego_speed: f64,
    /// At most [`MAX_OBSTACLES`] entries.
    pub obstacles: Vec<ObstacleState>,
    pub intent: Intent,
}

impl SceneContext {
    /// Condition tokens, `[CTX_TOKENS, CTX_FEATURES]`.
    ///
    /// Ego token: `[1, 1, v/10, intent one-hot ×6, 0]`.
    /// Obstacle token: `[0, 1, x/30, y/10, cos, sin, hl/3, hw/3, vx/10, vy/10]`;
    /// absent obstacles are all zeros.
    pub fn tokens(&self) -> Array2<f64> {
        let mut t = Array2::zeros((CTX_TOKENS, CTX_FEATURES));
        t[[0, 0]] = 1.0;
        t[[0, 1]] = 1.0;
        t[[0, 2]] = self.ego_speed / 10.0;
        t[[0, 3 + self.intent.index()]] = 1.0;
        for (k, o) in self.obstacles.iter().take(MAX_OBSTACLES).enumerate() {
            let row = [
                0.0,
                1.0,
                o.x / 30.0,
                o.y / 10.0,
                o.heading.cos(),
                o.heading.sin(),
                o.half_length / 3.0,
                o.half_width / 3.0,
                o.vx / 10.0,
                o.vy / 10.0,
            ];
            t.row_mut(k + 1).assign(&ndarray::arr1(&row));
        }
        t
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub kind: SceneKind,
    pub context: SceneContext,
    pub expert: Trajectory,
    pub mode: u32,
    /// `obstacle_future[k][l]`, one entry per present obstacle.
    pub obstacle_future: Vec<Vec<ObstacleState>>,
}

impl Scene {
    fn assemble(kind: SceneKind, context: SceneContext, expert: Trajectory, mode: u32) -> Self {
        let obstacle_future = context
            .obstacles
            .iter()
            .map(|o| (1..=HORIZON).map(|l| o.advanced(l as f64 * DT)).collect())
            .collect();
        Self {
            kind,
            context,
            expert,
            mode,
            obstacle_future,
        }
    }

    pub fn example(&self, rep: Representation) -> Example {
        Example {
            ctx: self.context.tokens(),
            ego_speed: self.context.ego_speed,
            target: rep.encode(&self.expert),
            weight: 1.0,
        }
    }
}

fn sample_positions(f: impl Fn(f64) -> [f64; 2]) -> Vec<[f64; 2]> {
    (1..=HORIZON).map(|l| f(l as f64 * DT)).collect()
}

/// Smooth 0→1 step with zero velocity and acceleration at both ends.
fn quintic(s: f64) -> f64 {
    let s = s.clamp(0.0, 1.0);
    s * s * s * (10.0 - 15.0 * s + 6.0 * s * s)
}

/// Distance covered from speed `v0` braking at `a` (no reversing).
fn braking_distance(v0: f64, a: f64, t: f64) -> f64 {
    if a <= 0.0 {
        return v0 * t;
    }
    let stop = v0 / a;
    let t = t.min(stop);
    v0 * t - 0.5 * a * t * t
}

fn car(x: f64, y: f64, heading: f64, speed: f64) -> ObstacleState {
    ObstacleState {
        x,
        y,
        heading,
        half_length: CAR_HL,
        half_width: CAR_HW,
        vx: speed * heading.cos(),
        vy: speed * heading.sin(),
    }
}

/// Constant-speed drive with an optional quintic lateral shift of `offset`
/// over `duration` seconds.
pub fn straight_scene(v0: f64, intent: Intent, obstacles: Vec<ObstacleState>) -> Scene {
    let offset = match intent {
        Intent::ChangeLeft => LANE_WIDTH,
        Intent::ChangeRight => -LANE_WIDTH,
        _ => 0.0,
    };
    let total = HORIZON as f64 * DT;
    let expert = Trajectory::from_positions(
        sample_positions(|t| [v0 * t, offset * quintic(t / total)]),
        DT,
    );
    let mode = (offset != 0.0) as u32;
    Scene::assemble(
        SceneKind::Straight,
        SceneContext {
            ego_speed: v0,
            obstacles,
            intent,
        },
        expert,
        mode,
    )
}

/// Brake at constant deceleration to stop `margin` metres behind a stopped
/// lead whose rear bumper is `gap` metres ahead of the ego front bumper.
pub fn car_follow_stop_scene(v0: f64, gap: f64, margin: f64) -> Scene {
    let stop_dist = gap - margin;
    let a = v0 * v0 / (2.0 * stop_dist);
    let expert = Trajectory::from_positions(
        sample_positions(|t| [braking_distance(v0, a, t), 0.0]),
        DT,
    );
    let lead = car(EGO_HALF_LENGTH + gap + CAR_HL, 0.0, 0.0, 0.0);
    Scene::assemble(
        SceneKind::CarFollowStop,
        SceneContext {
            ego_speed: v0,
            obstacles: vec![lead],
            intent: Intent::Stop,
        },
        expert,
        0,
    )
}

/// Overtake a slow lead to the left (`mode` 0) or right (`mode` 1).
pub fn lane_change_scene(v0: f64, lead_speed: f64, gap: f64, duration: f64, mode: u32) -> Scene {
    let side = if mode == 0 { 1.0 } else { -1.0 };
    let expert = Trajectory::from_positions(
        sample_positions(|t| [v0 * t, side * LANE_WIDTH * quintic(t / duration)]),
        DT,
    );
    let lead = car(EGO_HALF_LENGTH + gap + CAR_HL, 0.0, 0.0, lead_speed);
    Scene::assemble(
        SceneKind::LaneChangeBimodal,
        SceneContext {
            ego_speed: v0,
            obstacles: vec![lead],
            intent: Intent::Keep,
        },
        expert,
        mode,
    )
}

/// Wait for a crossing vehicle, then go straight or turn.
///
/// The ego brakes at `decel` until it reaches `entry` metres, continues at
/// whatever speed it has left and, for turn intents, follows an arc of
/// radius `radius` from `entry` on.
pub fn intersection_scene(
    v0: f64,
    decel: f64,
    entry: f64,
    radius: f64,
    intent: Intent,
    cross: ObstacleState,
) -> Scene {
    let t_entry = {
        // Time to cover `entry` under braking; infinite if the ego stops first.
        let disc = v0 * v0 - 2.0 * decel * entry;
        if decel <= 0.0 {
            entry / v0
        } else if disc < 0.0 {
            f64::INFINITY
        } else {
            (v0 - disc.sqrt()) / decel
        }
    };
    let v_entry = (v0 - decel * t_entry).max(0.0);
    let arc = |t: f64| -> f64 {
        if t <= t_entry {
            braking_distance(v0, decel, t)
        } else {
            entry + v_entry * (t - t_entry)
        }
    };
    let turn = match intent {
        Intent::TurnLeft => 1.0,
        Intent::TurnRight => -1.0,
        _ => 0.0,
    };
    let expert = Trajectory::from_positions(
        sample_positions(|t| {
            let s = arc(t);
            if turn == 0.0 || s <= entry {
                [s, 0.0]
            } else {
                let phi = (s - entry) / radius;
                [entry + radius * phi.sin(), turn * radius * (1.0 - phi.cos())]
            }
        }),
        DT,
    );
    let mode = match intent {
        Intent::TurnLeft => 1,
        Intent::TurnRight => 2,
        _ => 0,
    };
    Scene::assemble(
        SceneKind::IntersectionYield,
        SceneContext {
            ego_speed: v0,
            obstacles: vec![cross],
            intent,
        },
        expert,
        mode,
    )
}

/// Pedestrian ahead: brake to a stop (`nudge == 0`) or shift laterally by
/// `nudge` metres at speed `v_pass`.
pub fn vru_scene(v0: f64, ped: ObstacleState, stop_at: f64, nudge: f64, v_pass: f64) -> Scene {
    let total = HORIZON as f64 * DT;
    let (expert, mode) = if nudge == 0.0 {
        let a = v0 * v0 / (2.0 * stop_at);
        (
            Trajectory::from_positions(sample_positions(|t| [braking_distance(v0, a, t), 0.0]), DT),
            0,
        )
    } else {
        // Ease from v0 to v_pass with a smooth speed blend.
        let pos = move |t: f64| {
            let x = v0 * t + (v_pass - v0) * total * integral_quintic(t / total);
            [x, nudge * quintic(t / (0.6 * total))]
        };
        (Trajectory::from_positions(sample_positions(pos), DT), 1)
    };
    Scene::assemble(
        SceneKind::VruAvoid,
        SceneContext {
            ego_speed: v0,
            obstacles: vec![ped],
            intent: Intent::Keep,
        },
        expert,
        mode,
    )
}

/// `∫₀ˢ quintic(u) du` for `s ∈ [0, 1]`.
fn integral_quintic(s: f64) -> f64 {
    let s = s.clamp(0.0, 1.0);
    s.powi(4) * (2.5 - 3.0 * s + s * s)
}

fn draw(kind: SceneKind, rng: &mut ChaCha8Rng) -> Scene {
    match kind {
        SceneKind::Straight => {
            let v0 = rng.gen_range(3.0..15.0);
            let intent = match rng.gen_range(0..5) {
                0 => Intent::ChangeLeft,
                1 => Intent::ChangeRight,
                _ => Intent::Keep,
            };
            let mut obstacles = Vec::new();
            if intent == Intent::Keep {
                // Traffic that never interferes: a faster lead and vehicles
                // in the neighbouring lanes at matched speed.
                if rng.gen_bool(0.5) {
                    let gap = rng.gen_range(15.0..40.0);
                    obstacles.push(car(gap, 0.0, 0.0, v0 + rng.gen_range(0.0..3.0)));
                }
                for side in [1.0, -1.0] {
                    if rng.gen_bool(0.3) {
                        let dx = rng.gen_range(-15.0..25.0);
                        obstacles.push(car(dx, side * LANE_WIDTH, 0.0, v0));
                    }
                }
            }
            straight_scene(v0, intent, obstacles)
        }
        SceneKind::CarFollowStop => {
            let v0: f64 = rng.gen_range(6.0..12.0);
            let stop = rng.gen_range(v0 * v0 / 10.0..1.35 * v0);
            car_follow_stop_scene(v0, stop + 2.0, 2.0)
        }
        SceneKind::LaneChangeBimodal => {
            let v0: f64 = rng.gen_range(8.0..12.0);
            let lead = rng.gen_range(1.0..3.0);
            let closing = v0 - lead;
            let gap = closing * rng.gen_range(1.4..2.4);
            let duration = rng.gen_range(2.2..2.8);
            let mode = rng.gen_bool(0.5) as u32;
            lane_change_scene(v0, lead, gap, duration, mode)
        }
        SceneKind::IntersectionYield => {
            let v0: f64 = rng.gen_range(5.0..9.0);
            let xc = rng.gen_range(14.0..22.0);
            let vc = rng.gen_range(5.0..8.0);
            // The crossing car clears the ego corridor this many seconds in.
            let t_clear = rng.gen_range(0.8..1.8);
            let clear_y = EGO_HALF_WIDTH + CAR_HL + 0.5;
            let cross = car(xc, clear_y - vc * t_clear, std::f64::consts::FRAC_PI_2, vc);
            let entry = xc - CAR_HW - EGO_HALF_LENGTH - 1.0;
            // Arrive at the entry line no earlier than a buffer after clearing.
            let t_arrive = t_clear + rng.gen_range(0.4..0.8);
            let decel = if v0 * t_arrive <= entry {
                0.0
            } else {
                (2.0 * (v0 * t_arrive - entry) / (t_arrive * t_arrive)).min(v0 * v0 / (2.0 * entry))
            };
            let intent = match rng.gen_range(0..3) {
                0 => Intent::Keep,
                1 => Intent::TurnLeft,
                _ => Intent::TurnRight,
            };
            intersection_scene(v0, decel, entry, rng.gen_range(8.0..12.0), intent, cross)
        }
        SceneKind::VruAvoid => {
            let v0: f64 = rng.gen_range(4.0..8.0);
            let xp = rng.gen_range(14.0..24.0);
            if rng.gen_bool(0.5) {
                let speed = rng.gen_range(1.0..1.6);
                let y0 = -rng.gen_range(2.5..4.5);
                let ped = ObstacleState {
                    x: xp,
                    y: y0,
                    heading: std::f64::consts::FRAC_PI_2,
                    half_length: PED_H,
                    half_width: PED_H,
                    vx: 0.0,
                    vy: speed,
                };
                let stop_at = xp - PED_H - EGO_HALF_LENGTH - rng.gen_range(1.5..3.0);
                vru_scene(v0, ped, stop_at.max(v0 * v0 / 8.0), 0.0, v0)
            } else {
                let side: f64 = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                let yp = side * rng.gen_range(1.4..2.0);
                let ped = ObstacleState {
                    x: xp,
                    y: yp,
                    heading: 0.0,
                    half_length: PED_H,
                    half_width: PED_H,
                    vx: 0.0,
                    vy: 0.0,
                };
                let nudge = -side * rng.gen_range(1.0..1.4);
                vru_scene(v0, ped, 0.0, nudge, v0 * rng.gen_range(0.6..0.8))
            }
        }
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// A scene of the given kind, redrawn until the expert is collision-free.
pub fn generate_scene(kind: SceneKind, seed: u64) -> Scene {
    generate_with(kind, &mut rng_for(seed, 0))
}

fn generate_with(kind: SceneKind, rng: &mut ChaCha8Rng) -> Scene {
    loop {
        let scene = draw(kind, rng);
        let clean = rollout_replay(&scene.expert, &scene)
            .map(|f| !f.any())
            .unwrap_or(false);
        if clean {
            return scene;
        }
    }
}

/// Per-kind sampling weights, kept in kind order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "BTreeMap<SceneKind, f64>", into = "BTreeMap<SceneKind, f64>")]
pub struct Mix(pub Vec<(SceneKind, f64)>);

impl From<BTreeMap<SceneKind, f64>> for Mix {
    fn from(m: BTreeMap<SceneKind, f64>) -> Self {
        Mix(m.into_iter().collect())
    }
}

impl From<Mix> for BTreeMap<SceneKind, f64> {
    fn from(m: Mix) -> Self {
        m.0.into_iter().collect()
    }
}

impl Mix {
    pub fn uniform() -> Self {
        Mix(SceneKind::ALL.iter().map(|k| (*k, 0.2)).collect())
    }

    pub fn only(kind: SceneKind) -> Self {
        Mix(vec![(kind, 1.0)])
    }

    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.0.iter().map(|(_, w)| w).sum();
        if self.0.is_empty() || self.0.iter().any(|(_, w)| !(*w >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("scene mix weights must be non-negative and sum to 1, got {sum}")));
        }
        Ok(())
    }

    fn pick(&self, u: f64) -> SceneKind {
        let mut acc = 0.0;
        for (k, w) in &self.0 {
            acc += w;
            if u < acc {
                return *k;
            }
        }
        self.0.last().unwrap().0
    }
}

/// Frame `index` of the dataset defined by `(mix, seed)`. Frames are drawn
/// independently, so any prefix of a larger set is itself a valid set.
pub fn dataset_frame(mix: &Mix, seed: u64, index: u64) -> Scene {
    let mut rng = rng_for(seed, index + 1);
    let kind = mix.pick(rng.gen());
    generate_with(kind, &mut rng)
}

pub fn generate_frames(mix: &Mix, seed: u64, range: Range<u64>, exec: Exec) -> Result<Vec<Scene>> {
    mix.validate()?;
    let start = range.start;
    Ok(map_range(exec, (range.end - range.start) as usize, |i| {
        dataset_frame(mix, seed, start + i as u64)
    }))
}

/// Doubles per record: kind, mode, ego speed, intent, obstacle count, the
/// initial obstacle states, their futures, then positions, headings and
/// velocities of the expert.
pub const RECORD_LEN: usize =
    5 + MAX_OBSTACLES * ObstacleState::FIELDS * (1 + HORIZON) + 6 * HORIZON;
const HEADER_LEN: usize = 6 + 8 + 4 + 8 + 4 + 4 + 4;

fn encode_record(scene: &Scene, out: &mut Vec<f64>) {
    let c = &scene.context;
    out.extend([
        scene.kind.code() as f64,
        scene.mode as f64,
        c.ego_speed,
        c.intent.index() as f64,
        c.obstacles.len() as f64,
    ]);
    for k in 0..MAX_OBSTACLES {
        match c.obstacles.get(k) {
            Some(o) => out.extend(o.to_array()),
            None => out.extend([0.0; ObstacleState::FIELDS]),
        }
    }
    for k in 0..MAX_OBSTACLES {
        for l in 0..HORIZON {
            match scene.obstacle_future.get(k) {
                Some(f) => out.extend(f[l].to_array()),
                None => out.extend([0.0; ObstacleState::FIELDS]),
            }
        }
    }
    let e = &scene.expert;
    for series in [&e.positions, &e.headings, &e.velocities] {
        for p in series.iter() {
            out.extend(p);
        }
    }
}

fn decode_record(r: &[f64]) -> Result<Scene> {
    let kind = *SceneKind::ALL
        .get(r[0] as usize)
        .ok_or_else(|| Error::Format(format!("bad scene kind {}", r[0])))?;
    let intent = *Intent::ALL
        .get(r[3] as usize)
        .ok_or_else(|| Error::Format(format!("bad intent {}", r[3])))?;
    let n = r[4] as usize;
    if n > MAX_OBSTACLES {
        return Err(Error::Format(format!("{n} obstacles exceeds {MAX_OBSTACLES}")));
    }
    let f = ObstacleState::FIELDS;
    let mut at = 5;
    let obstacles = (0..n).map(|k| ObstacleState::from_slice(&r[at + k * f..])).collect();
    at += MAX_OBSTACLES * f;
    let obstacle_future = (0..n)
        .map(|k| {
            (0..HORIZON)
                .map(|l| ObstacleState::from_slice(&r[at + (k * HORIZON + l) * f..]))
                .collect()
        })
        .collect();
    at += MAX_OBSTACLES * HORIZON * f;
    let pairs = |from: usize| -> Vec<[f64; 2]> {
        (0..HORIZON).map(|l| [r[from + 2 * l], r[from + 2 * l + 1]]).collect()
    };
    let expert = Trajectory {
        dt: DT,
        positions: pairs(at),
        headings: pairs(at + 2 * HORIZON),
        velocities: pairs(at + 4 * HORIZON),
    };
    Ok(Scene {
        kind,
        context: SceneContext {
            ego_speed: r[2],
            obstacles,
            intent,
        },
        expert,
        mode: r[1] as u32,
        obstacle_future,
    })
}

/// Write `n_frames` scenes to `path` in the binary dataset format.
pub fn build_dataset(n_frames: u64, mix: &Mix, seed: u64, path: &Path, exec: Exec) -> Result<()> {
    let scenes = generate_frames(mix, seed, 0..n_frames, exec)?;
    write_dataset(path, &scenes)
}

pub fn write_dataset(path: &Path, scenes: &[Scene]) -> Result<()> {
    write_atomic(path, |w| {
        w.write_all(DATASET_MAGIC)?;
        w.write_all(&(scenes.len() as u64).to_le_bytes())?;
        w.write_all(&(HORIZON as u32).to_le_bytes())?;
        w.write_all(&DT.to_le_bytes())?;
        w.write_all(&(MAX_OBSTACLES as u32).to_le_bytes())?;
        w.write_all(&(CTX_TOKENS as u32).to_le_bytes())?;
        w.write_all(&(CTX_FEATURES as u32).to_le_bytes())?;
        let mut buf = Vec::with_capacity(RECORD_LEN);
        for s in scenes {
            buf.clear();
            encode_record(s, &mut buf);
            debug_assert_eq!(buf.len(), RECORD_LEN);
            for v in &buf {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    })
}

/// Number of frames recorded in a dataset header.
pub fn dataset_len(path: &Path) -> Result<u64> {
    let mut f = std::fs::File::open(path)?;
    let mut head = [0u8; HEADER_LEN];
    std::io::Read::read_exact(&mut f, &mut head)
        .map_err(|_| Error::Format("truncated dataset header".into()))?;
    parse_header(&head)
}

fn parse_header(head: &[u8]) -> Result<u64> {
    if &head[..6] != DATASET_MAGIC {
        return Err(Error::Format("not a dataset (bad magic)".into()));
    }
    let u32_at = |i: usize| u32::from_le_bytes(head[i..i + 4].try_into().unwrap()) as usize;
    let n = u64::from_le_bytes(head[6..14].try_into().unwrap());
    let dt = f64::from_le_bytes(head[18..26].try_into().unwrap());
    let layout = (u32_at(14), u32_at(26), u32_at(30), u32_at(34));
    if layout != (HORIZON, MAX_OBSTACLES, CTX_TOKENS, CTX_FEATURES) || dt != DT {
        return Err(Error::Format(format!(
            "dataset layout (L, K, tokens, features) = {layout:?}, dt = {dt} is not supported"
        )));
    }
    Ok(n)
}

/// Frames `range` of a dataset file; records are fixed-size so only the
/// requested bytes are read.
pub fn read_dataset_range(path: &Path, range: Range<u64>) -> Result<Vec<Scene>> {
    use std::io::{Read, Seek, SeekFrom};
    let n = dataset_len(path)?;
    if range.end > n || range.start > range.end {
        return Err(Error::Format(format!("frames {range:?} out of bounds for {n}")));
    }
    let mut f = std::fs::File::open(path)?;
    let rec_bytes = (RECORD_LEN * 8) as u64;
    f.seek(SeekFrom::Start(HEADER_LEN as u64 + range.start * rec_bytes))?;
    let mut f = std::io::BufReader::new(f);
    let mut bytes = vec![0u8; RECORD_LEN * 8];
    let mut vals = vec![0.0; RECORD_LEN];
    let mut out = Vec::with_capacity((range.end - range.start) as usize);
    for _ in range {
        f.read_exact(&mut bytes)
            .map_err(|_| Error::Format("truncated dataset record".into()))?;
        for (v, c) in vals.iter_mut().zip(bytes.chunks_exact(8)) {
            *v = f64::from_le_bytes(c.try_into().unwrap());
        }
        out.push(decode_record(&vals)?);
    }
    Ok(out)
}

pub fn read_dataset(path: &Path) -> Result<Vec<Scene>> {
    let n = dataset_len(path)?;
    read_dataset_range(path, 0..n)
}

/// One JSON object per line.
pub fn export_json(path: &Path, scenes: &[Scene]) -> Result<()> {
    let mut lines = Vec::with_capacity(scenes.len());
    for s in scenes {
        lines.push(serde_json::to_string(s).map_err(|e| Error::Format(e.to_string()))?);
    }
    write_atomic(path, |w| {
        for l in &lines {
            writeln!(w, "{l}")?;
        }
        Ok(())
    })
}

pub fn import_json(path: &Path) -> Result<Vec<Scene>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    f.lines()
        .filter(|l| l.as_ref().map(|s| !s.trim().is_empty()).unwrap_or(true))
        .map(|l| serde_json::from_str(&l?).map_err(|e| Error::Format(e.to_string())))
        .collect()
}

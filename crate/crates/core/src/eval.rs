//! Open-loop evaluation of a planner over a scene set.

use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, DenoiserParams};
use crate::error::Result;
use crate::io::CsvTable;
use crate::metrics::{score_scene, DivergenceKind, SceneScore, ScoreWeights};
use crate::par::{map_range, Exec};
use crate::sampler::{sample, SamplerConfig};
use crate::scenarios::{Scene, SceneKind, LANE_WIDTH};
use crate::schedule::NoiseSchedule;
use crate::simcol::rollout_replay;
use crate::trajectory::Trajectory;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Generations scored for ADE/FDE/comfort/collisions.
    pub generations: usize,
    /// Generations drawn for the divergence score; 0 reuses the scored ones.
    pub divergence_generations: usize,
    pub divergence: DivergenceKind,
    pub sampler: SamplerConfig,
    pub weights: ScoreWeights,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            generations: 6,
            divergence_generations: 32,
            divergence: DivergenceKind::Centroid,
            sampler: SamplerConfig::default(),
            weights: ScoreWeights::default(),
            seed: 1234,
        }
    }
}

/// Produces `n` plans for a scene; `seed` identifies the draw.
pub trait Planner: Sync {
    fn plan(&self, scene: &Scene, n: usize, seed: u64) -> Result<Vec<Trajectory>>;
}

/// Replays the expert itself.
pub struct ExpertPlanner;

impl Planner for ExpertPlanner {
    fn plan(&self, scene: &Scene, n: usize, _seed: u64) -> Result<Vec<Trajectory>> {
        Ok(vec![scene.expert.clone(); n])
    }
}

pub struct DiffusionPlanner<'a> {
    pub net: &'a Denoiser,
    pub params: &'a DenoiserParams,
    pub sched: &'a NoiseSchedule,
    pub sampler: SamplerConfig,
}

impl Planner for DiffusionPlanner<'_> {
    fn plan(&self, scene: &Scene, n: usize, seed: u64) -> Result<Vec<Trajectory>> {
        sample(self.net, self.params, self.sched, &self.sampler, &scene.context, n, seed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneEval {
    pub id: usize,
    pub kind: SceneKind,
    pub score: SceneScore,
    /// Divergence-set generations ending left / right of a half-lane offset.
    pub left: usize,
    pub right: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub scenes: usize,
    pub min_ade: f64,
    pub min_fde: f64,
    pub s_ade: f64,
    pub s_fde: f64,
    pub comfort: f64,
    pub collision_rate: f64,
    pub open_loop: f64,
    pub divergence: f64,
    /// Fraction of scenes whose divergence set reaches both sides.
    pub both_modes: f64,
}

/// Generations ending beyond ±half a lane laterally.
pub fn lateral_modes(trajs: &[Trajectory]) -> (usize, usize) {
    let ys = trajs.iter().map(|t| t.final_position()[1]);
    ys.fold((0, 0), |(l, r), y| {
        (l + (y > 0.5 * LANE_WIDTH) as usize, r + (y < -0.5 * LANE_WIDTH) as usize)
    })
}

pub fn evaluate<P: Planner + ?Sized>(planner: &P, scenes: &[Scene], cfg: &EvalConfig, exec: Exec) -> Result<Vec<SceneEval>> {
    map_range(exec, scenes.len(), |i| {
        let scene = &scenes[i];
        let seed = cfg.seed.wrapping_add(i as u64 * 0x9E37_79B9);
        let preds = planner.plan(scene, cfg.generations, seed)?;
        let collided = preds
            .iter()
            .map(|p| rollout_replay(p, scene).map(|f| f.any()))
            .collect::<Result<Vec<_>>>()?;
        let mut score = score_scene(&preds, &scene.expert, &collided, &cfg.weights, cfg.divergence)?;
        let div_set = if cfg.divergence_generations > 0 {
            planner.plan(scene, cfg.divergence_generations, seed ^ 0x5555)?
        } else {
            preds
        };
        if div_set.len() >= 2 {
            score.divergence = crate::metrics::divergence_score(&div_set, cfg.divergence)?;
        }
        let (left, right) = lateral_modes(&div_set);
        Ok(SceneEval {
            id: i,
            kind: scene.kind,
            score,
            left,
            right,
        })
    })
    .into_iter()
    .collect()
}

pub fn summarize(rows: &[SceneEval]) -> EvalSummary {
    let n = rows.len();
    if n == 0 {
        return EvalSummary::default();
    }
    let mean = |f: &dyn Fn(&SceneEval) -> f64| rows.iter().map(f).sum::<f64>() / n as f64;
    EvalSummary {
        scenes: n,
        min_ade: mean(&|r| r.score.min_ade),
        min_fde: mean(&|r| r.score.min_fde),
        s_ade: mean(&|r| r.score.s_ade),
        s_fde: mean(&|r| r.score.s_fde),
        comfort: mean(&|r| r.score.comfort),
        collision_rate: mean(&|r| r.score.collision_rate),
        open_loop: mean(&|r| r.score.open_loop),
        divergence: mean(&|r| r.score.divergence),
        both_modes: mean(&|r| (r.left > 0 && r.right > 0) as u8 as f64),
    }
}

/// One row per scene.
pub fn report_table(rows: &[SceneEval]) -> CsvTable {
    let mut t = CsvTable::new(&[
        "scene_id",
        "kind",
        "min_ade",
        "min_fde",
        "comfort",
        "collision_rate",
        "open_loop",
        "divergence",
    ]);
    for r in rows {
        let s = &r.score;
        t.push(crate::row![
            r.id,
            r.kind,
            s.min_ade,
            s.min_fde,
            s.comfort,
            s.collision_rate,
            s.open_loop,
            s.divergence
        ]);
    }
    t
}

//! Reward-weighted post-training.
//!
//! Each iteration samples a group of plans per scene from the live policy,
//! scores them by non-reactive replay, standardizes rewards within the group
//! and regresses the policy onto its own samples with weights `exp(β·r̃)`.
//! An exponential moving average of the parameters is the evaluated policy.

use ndarray::s;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, DenoiserParams, Optimizer, OptimizerKind};
use crate::error::{check_shape, Error, Result};
use crate::io::CsvTable;
use crate::losses::Objective;
use crate::par::{map_range, Exec};
use crate::sampler::{sample_tensors, split_decode, SamplerConfig};
use crate::scenarios::Scene;
use crate::schedule::NoiseSchedule;
use crate::simcol::{rollout_replay, safety_reward};
use crate::train::{batch_gradient, noise_example, Example};

/// Groups whose reward spread is below this count as identical.
pub const IDENTICAL_STD: f64 = 1e-8;

/// Standardize rewards with the population std; `None` when every reward
/// is the same and the group carries no preference.
pub fn group_normalize(rewards: &[f64]) -> Result<Option<Vec<f64>>> {
    if rewards.len() < 2 {
        return Err(Error::Config(format!(
            "group normalization needs at least 2 rewards, got {}",
            rewards.len()
        )));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    if std < IDENTICAL_STD {
        return Ok(None);
    }
    Ok(Some(rewards.iter().map(|r| (r - mean) / std).collect()))
}

/// `ema ← (1 − m)·ema + m·live`.
pub fn ema_update(ema: &mut [f64], live: &[f64], m: f64) -> Result<()> {
    check_shape("ema update", &[ema.len()], &[live.len()])?;
    if !(m > 0.0 && m <= 1.0) {
        return Err(Error::Config(format!("ema rate must be in (0, 1], got {m}")));
    }
    for (e, l) in ema.iter_mut().zip(live) {
        *e = (1.0 - m) * *e + m * l;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RlConfig {
    /// Outer iterations; each refreshes the policy that generates rollouts.
    pub iterations: usize,
    /// Optimizer steps per outer iteration.
    pub steps_per_iteration: usize,
    /// Scenes (groups) per optimizer step.
    pub scenes_per_step: usize,
    pub group_size: usize,
    pub beta: f64,
    pub ema: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub optimizer: OptimizerKind,
    pub sampler: SamplerConfig,
    pub seed: u64,
}

impl Default for RlConfig {
    fn default() -> Self {
        Self {
            iterations: 1,
            steps_per_iteration: 50,
            scenes_per_step: 16,
            group_size: 32,
            beta: 1.0,
            ema: 0.05,
            lr: 1e-4,
            weight_decay: 0.01,
            optimizer: OptimizerKind::default(),
            sampler: SamplerConfig::default(),
            seed: 0,
        }
    }
}

/// Sampled plans for one scene with their rewards and weights.
#[derive(Clone, Debug)]
pub struct RolloutGroup {
    pub examples: Vec<Example>,
    pub rewards: Vec<f64>,
    /// `None` when the group was discarded.
    pub normalized: Option<Vec<f64>>,
}

impl RolloutGroup {
    pub fn retained(&self) -> bool {
        self.normalized.is_some()
    }
}

/// Sample `g` plans for `scene` and score them.
pub fn rollout_group(
    net: &Denoiser,
    params: &DenoiserParams,
    sched: &NoiseSchedule,
    sampler: &SamplerConfig,
    scene: &Scene,
    g: usize,
    beta: f64,
    seed: u64,
) -> Result<RolloutGroup> {
    let raw = sample_tensors(net, params, sched, sampler, &scene.context, g, seed)?;
    let trajs = split_decode(net, &raw);
    let rewards = trajs
        .iter()
        .map(|t| rollout_replay(t, scene).map(|f| safety_reward(&f)))
        .collect::<Result<Vec<_>>>()?;
    let normalized = group_normalize(&rewards)?;
    let l = net.config.horizon;
    let ctx = scene.context.tokens();
    let examples = (0..g)
        .map(|i| Example {
            ctx: ctx.clone(),
            ego_speed: scene.context.ego_speed,
            target: raw.slice(s![i * l..(i + 1) * l, ..]).to_owned(),
            weight: normalized.as_ref().map_or(0.0, |r| (beta * r[i]).exp()),
        })
        .collect();
    Ok(RolloutGroup {
        examples,
        rewards,
        normalized,
    })
}

/// Live and averaged policy plus optimizer state.
#[derive(Clone, Debug)]
pub struct RlState {
    pub live: DenoiserParams,
    pub ema: DenoiserParams,
    pub opt: Optimizer,
    pub skipped: usize,
    pub steps: usize,
}

impl RlState {
    pub fn new(init: DenoiserParams, cfg: &RlConfig) -> Self {
        Self {
            ema: init.clone(),
            opt: Optimizer::new(cfg.optimizer, cfg.weight_decay, init.len()),
            live: init,
            skipped: 0,
            steps: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: usize,
    pub retained_fraction: f64,
    pub mean_reward: f64,
    pub loss: f64,
}

/// One weighted regression step on every retained sample, each re-noised at
/// a fresh `(t, ε)`, then the EMA update. Skips (and counts) batches where
/// every group was discarded.
#[allow(clippy::too_many_arguments)]
pub fn posttrain_step<R: Rng>(
    net: &Denoiser,
    sched: &NoiseSchedule,
    objective: &Objective,
    state: &mut RlState,
    groups: &[RolloutGroup],
    lr: f64,
    ema: f64,
    rng: &mut R,
    exec: Exec,
) -> Result<Option<f64>> {
    let retained: Vec<&Example> = groups
        .iter()
        .filter(|g| g.retained())
        .flat_map(|g| g.examples.iter())
        .collect();
    if retained.is_empty() {
        state.skipped += 1;
        return Ok(None);
    }
    let items: Vec<_> = retained.iter().map(|e| noise_example(rng, e)).collect();
    let (loss, grad) = batch_gradient(net, &state.live, sched, objective, &items, exec)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            what: "post-training loss",
            step: state.steps,
        });
    }
    state.opt.step(&mut state.live.values, &grad, lr)?;
    ema_update(&mut state.ema.values, &state.live.values, ema)?;
    state.steps += 1;
    Ok(Some(loss))
}

/// Post-train from `init` on `scenes`. Within outer iteration `k` every
/// group is sampled from a frozen copy of the live policy taken when the
/// iteration starts, so each iteration fits `π_{k−1}·exp(β·r̃)`. Returns the
/// final state and one log row per optimizer step.
pub fn train_rl(
    net: &Denoiser,
    sched: &NoiseSchedule,
    objective: &Objective,
    init: DenoiserParams,
    scenes: &[Scene],
    cfg: &RlConfig,
    exec: Exec,
) -> Result<(RlState, Vec<StepStats>)> {
    if cfg.iterations * cfg.steps_per_iteration > 0 && scenes.is_empty() {
        return Err(Error::Config("post-training needs at least one scene".into()));
    }
    let mut state = RlState::new(init, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = Vec::with_capacity(cfg.iterations * cfg.steps_per_iteration);
    for _ in 0..cfg.iterations {
        let behavior = state.live.clone();
        for _ in 0..cfg.steps_per_iteration {
            let picks: Vec<(usize, u64)> = (0..cfg.scenes_per_step)
                .map(|_| (rng.gen_range(0..scenes.len()), rng.gen()))
                .collect();
            let groups = map_range(exec, picks.len(), |i| {
                let (idx, seed) = picks[i];
                rollout_group(net, &behavior, sched, &cfg.sampler, &scenes[idx], cfg.group_size, cfg.beta, seed)
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
            let kept = groups.iter().filter(|g| g.retained()).count();
            let rewards: Vec<f64> = groups.iter().flat_map(|g| g.rewards.iter().copied()).collect();
            let loss = posttrain_step(net, sched, objective, &mut state, &groups, cfg.lr, cfg.ema, &mut rng, exec)?;
            log.push(StepStats {
                step: log.len() + 1,
                retained_fraction: kept as f64 / groups.len().max(1) as f64,
                mean_reward: rewards.iter().sum::<f64>() / rewards.len().max(1) as f64,
                loss: loss.unwrap_or(f64::NAN),
            });
        }
    }
    Ok((state, log))
}

pub fn log_table(log: &[StepStats]) -> CsvTable {
    let mut t = CsvTable::new(&["step", "retained_fraction", "mean_reward", "loss"]);
    for s in log {
        t.push(crate::row![s.step, s.retained_fraction, s.mean_reward, s.loss]);
    }
    t
}

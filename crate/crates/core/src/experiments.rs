//! End-to-end experiments built from the library pieces: the loss-space
//! grid, the representation comparison, the data-scaling sweep, safety
//! post-training and the reward-weighting toy.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::denoiser::{Denoiser, DenoiserConfig, DenoiserInput, DenoiserParams};
use crate::error::{Error, Result};
use crate::eval::{evaluate, summarize, DiffusionPlanner, EvalConfig, EvalSummary, SceneEval};
use crate::io::CsvTable;
use crate::losses::{HybridConfig, Objective};
use crate::par::{map_range, Exec};
use crate::rl::{train_rl, RlConfig, RlState, StepStats};
use crate::sampler::{initial_noise, integrate, sample, SamplerConfig};
use crate::scenarios::{generate_frames, Mix, Scene, DT};
use crate::schedule::{NoiseSchedule, Space, SpaceSpec};
use crate::simcol::{rollout_replay, safety_reward};
use crate::train::{train_il, CurvePoint, Example, TrainConfig};
use crate::trajectory::{Representation, Trajectory};

pub fn scene_set(mix: &Mix, seed: u64, n: u64, exec: Exec) -> Result<Vec<Scene>> {
    generate_frames(mix, seed, 0..n, exec)
}

pub fn examples_for(scenes: &[Scene], rep: Representation) -> Vec<Example> {
    scenes.iter().map(|s| s.example(rep)).collect()
}

#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub net: Denoiser,
    pub params: DenoiserParams,
    pub curve: Vec<CurvePoint>,
}

impl TrainedModel {
    pub fn planner<'a>(&'a self, sched: &'a NoiseSchedule, sampler: SamplerConfig) -> DiffusionPlanner<'a> {
        DiffusionPlanner {
            net: &self.net,
            params: &self.params,
            sched,
            sampler,
        }
    }

    pub fn evaluate(&self, sched: &NoiseSchedule, scenes: &[Scene], cfg: &EvalConfig, exec: Exec) -> Result<Vec<SceneEval>> {
        evaluate(&self.planner(sched, cfg.sampler), scenes, cfg, exec)
    }
}

/// Initialize from `init_seed` and train on `data`.
pub fn train_model(
    cfg: DenoiserConfig,
    sched: &NoiseSchedule,
    objective: &Objective,
    data: &[Example],
    train: &TrainConfig,
    init_seed: u64,
    exec: Exec,
) -> Result<TrainedModel> {
    let net = Denoiser::new(cfg)?;
    let mut params = net.init_params(&mut ChaCha8Rng::seed_from_u64(init_seed));
    let curve = train_il(&net, &mut params, sched, objective, data, train, exec, |_, _| Ok(()))?;
    Ok(TrainedModel { net, params, curve })
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

// ---------------------------------------------------------------------------
// Loss-space grid

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellRun {
    pub spec: SpaceSpec,
    pub seed: u64,
    pub summary: EvalSummary,
    pub curve: Vec<CurvePoint>,
}

/// Seed-aggregated scores of one grid cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellStats {
    pub spec: SpaceSpec,
    pub seeds: usize,
    pub open_loop_mean: f64,
    /// Sample std over seeds.
    pub open_loop_std: f64,
    pub min_ade: f64,
    pub comfort: f64,
    pub collision_rate: f64,
}

/// Train every prediction/loss cell once per seed on the same data and
/// budget. Seed `s` sets both the initialization and the training stream.
#[allow(clippy::too_many_arguments)]
pub fn ablate_loss_space(
    model: &ModelConfig,
    sched: &NoiseSchedule,
    train_scenes: &[Scene],
    eval_scenes: &[Scene],
    train: &TrainConfig,
    eval: &EvalConfig,
    seeds: &[u64],
    exec: Exec,
) -> Result<Vec<CellRun>> {
    let data = examples_for(train_scenes, model.representation);
    let mut runs = Vec::with_capacity(9 * seeds.len());
    for spec in SpaceSpec::all() {
        for &seed in seeds {
            let objective = Objective::Diffusion { spec };
            let tc = TrainConfig {
                seed,
                ..train.clone()
            };
            let m = train_model(
                model.denoiser(spec.pred),
                sched,
                &objective,
                &data,
                &tc,
                model.init_seed.wrapping_add(seed),
                exec,
            )?;
            let summary = summarize(&m.evaluate(sched, eval_scenes, eval, exec)?);
            runs.push(CellRun {
                spec,
                seed,
                summary,
                curve: m.curve,
            });
        }
    }
    Ok(runs)
}

/// Per-cell means in grid order (prediction-major).
pub fn cell_stats(runs: &[CellRun]) -> Vec<CellStats> {
    SpaceSpec::all()
        .into_iter()
        .filter_map(|spec| {
            let mine: Vec<&CellRun> = runs.iter().filter(|r| r.spec == spec).collect();
            if mine.is_empty() {
                return None;
            }
            let col = |f: &dyn Fn(&EvalSummary) -> f64| mine.iter().map(|r| f(&r.summary)).collect::<Vec<_>>();
            let (open_loop_mean, open_loop_std) = mean_std(&col(&|s| s.open_loop));
            Some(CellStats {
                spec,
                seeds: mine.len(),
                open_loop_mean,
                open_loop_std,
                min_ade: mean_std(&col(&|s| s.min_ade)).0,
                comfort: mean_std(&col(&|s| s.comfort)).0,
                collision_rate: mean_std(&col(&|s| s.collision_rate)).0,
            })
        })
        .collect()
}

pub fn matrix_table(stats: &[CellStats]) -> CsvTable {
    let mut t = CsvTable::new(&[
        "pred",
        "loss",
        "seeds",
        "open_loop_mean",
        "open_loop_std",
        "min_ade",
        "comfort",
        "collision_rate",
    ]);
    for c in stats {
        t.push(crate::row![
            c.spec.pred,
            c.spec.loss,
            c.seeds,
            c.open_loop_mean,
            c.open_loop_std,
            c.min_ade,
            c.comfort,
            c.collision_rate
        ]);
    }
    t
}

pub fn ablation_curve_table(runs: &[CellRun]) -> CsvTable {
    let mut t = CsvTable::new(&["pred", "loss", "seed", "step", "loss_value", "lr"]);
    for r in runs {
        for p in &r.curve {
            t.push(crate::row![r.spec.pred, r.spec.loss, r.seed, p.step, p.loss, p.lr]);
        }
    }
    t
}

// ---------------------------------------------------------------------------
// Representation comparison

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RepVariant {
    /// Waypoints and heading, data loss.
    Waypoint,
    /// Velocities, data loss.
    Velocity,
    /// Velocities with the velocity-plus-waypoint loss.
    Hybrid,
}

impl RepVariant {
    pub const ALL: [RepVariant; 3] = [RepVariant::Waypoint, RepVariant::Velocity, RepVariant::Hybrid];

    pub fn tag(self) -> &'static str {
        match self {
            RepVariant::Waypoint => "waypoint",
            RepVariant::Velocity => "velocity",
            RepVariant::Hybrid => "hybrid",
        }
    }

    pub fn representation(self) -> Representation {
        match self {
            RepVariant::Waypoint => Representation::Waypoint,
            _ => Representation::Velocity,
        }
    }

    pub fn objective(self, hybrid: HybridConfig) -> Objective {
        match self {
            RepVariant::Hybrid => Objective::Hybrid {
                pred: Space::Data,
                hybrid,
            },
            _ => Objective::Diffusion {
                spec: SpaceSpec::new(Space::Data, Space::Data),
            },
        }
    }
}

#[derive(Clone, Debug)]
pub struct RepRun {
    pub variant: RepVariant,
    pub summary: EvalSummary,
    /// First generation for each profiled scene, with the scene index.
    pub profiles: Vec<(usize, Trajectory)>,
    pub curve: Vec<CurvePoint>,
}

/// Train the three variants on the same scenes with the same seed.
#[allow(clippy::too_many_arguments)]
pub fn rep_compare(
    model: &ModelConfig,
    sched: &NoiseSchedule,
    train_scenes: &[Scene],
    eval_scenes: &[Scene],
    train: &TrainConfig,
    eval: &EvalConfig,
    hybrid: HybridConfig,
    profile_scenes: usize,
    exec: Exec,
) -> Result<Vec<RepRun>> {
    RepVariant::ALL
        .iter()
        .map(|&variant| {
            let rep = variant.representation();
            let data = examples_for(train_scenes, rep);
            let m = train_model(
                model.denoiser_with(rep, Space::Data),
                sched,
                &variant.objective(hybrid),
                &data,
                train,
                model.init_seed,
                exec,
            )?;
            let summary = summarize(&m.evaluate(sched, eval_scenes, eval, exec)?);
            let profiles = eval_scenes
                .iter()
                .take(profile_scenes)
                .enumerate()
                .map(|(i, s)| {
                    let mut trajs = sample(&m.net, &m.params, sched, &eval.sampler, &s.context, 1, eval.seed)?;
                    Ok((i, trajs.remove(0)))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(RepRun {
                variant,
                summary,
                profiles,
                curve: m.curve,
            })
        })
        .collect()
}

pub fn summary_columns() -> [&'static str; 9] {
    [
        "min_ade",
        "min_fde",
        "s_ade",
        "s_fde",
        "comfort",
        "collision_rate",
        "open_loop",
        "divergence",
        "both_modes",
    ]
}

fn summary_cells(s: &EvalSummary) -> Vec<String> {
    crate::row![
        s.min_ade,
        s.min_fde,
        s.s_ade,
        s.s_fde,
        s.comfort,
        s.collision_rate,
        s.open_loop,
        s.divergence,
        s.both_modes
    ]
}

/// Table with `lead` key columns followed by the summary columns.
pub fn summary_table(lead: &[&str], rows: Vec<(Vec<String>, &EvalSummary)>) -> CsvTable {
    let mut cols: Vec<&str> = lead.to_vec();
    cols.extend(summary_columns());
    let mut t = CsvTable::new(&cols);
    for (mut keys, s) in rows {
        keys.extend(summary_cells(s));
        t.push(keys);
    }
    t
}

pub fn rep_table(runs: &[RepRun]) -> CsvTable {
    summary_table(
        &["representation"],
        runs.iter().map(|r| (crate::row![r.variant.tag()], &r.summary)).collect(),
    )
}

/// Speed over time of the profiled generations, one line per
/// representation and scene.
pub fn speed_profile_table(runs: &[RepRun]) -> CsvTable {
    let mut t = CsvTable::new(&["representation", "scene_id", "step", "t", "speed"]);
    for r in runs {
        for (scene, traj) in &r.profiles {
            for (i, v) in traj.speeds().iter().enumerate() {
                t.push(crate::row![r.variant.tag(), scene, i + 1, (i + 1) as f64 * DT, v]);
            }
        }
    }
    t
}

// ---------------------------------------------------------------------------
// Data scaling

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingRun {
    pub size: u64,
    pub summary: EvalSummary,
    pub curve: Vec<CurvePoint>,
}

/// Train on each prefix of `frames` with the same budget and seed.
#[allow(clippy::too_many_arguments)]
pub fn scaling_sweep(
    model: &ModelConfig,
    sched: &NoiseSchedule,
    objective: &Objective,
    frames: &[Scene],
    sizes: &[u64],
    eval_scenes: &[Scene],
    train: &TrainConfig,
    eval: &EvalConfig,
    exec: Exec,
) -> Result<Vec<ScalingRun>> {
    let all = examples_for(frames, model.representation);
    sizes
        .iter()
        .map(|&size| {
            let n = usize::try_from(size).ok().filter(|&n| n <= all.len()).ok_or_else(|| {
                Error::Config(format!("subset of {size} frames exceeds the {} available", all.len()))
            })?;
            let m = train_model(
                model.denoiser(objective.pred_space()),
                sched,
                objective,
                &all[..n],
                train,
                model.init_seed,
                exec,
            )?;
            let summary = summarize(&m.evaluate(sched, eval_scenes, eval, exec)?);
            Ok(ScalingRun {
                size,
                summary,
                curve: m.curve,
            })
        })
        .collect()
}

pub fn scaling_table(runs: &[ScalingRun]) -> CsvTable {
    summary_table(
        &["frames"],
        runs.iter().map(|r| (crate::row![r.size], &r.summary)).collect(),
    )
}

pub fn scaling_curve_table(runs: &[ScalingRun]) -> CsvTable {
    let mut t = CsvTable::new(&["frames", "step", "loss_value", "lr"]);
    for r in runs {
        for p in &r.curve {
            t.push(crate::row![r.size, p.step, p.loss, p.lr]);
        }
    }
    t
}

// ---------------------------------------------------------------------------
// Safety post-training

/// Mean safety reward of `n` generations per scene.
pub fn mean_safety_reward(
    net: &Denoiser,
    params: &DenoiserParams,
    sched: &NoiseSchedule,
    sampler: &SamplerConfig,
    scenes: &[Scene],
    n: usize,
    seed: u64,
    exec: Exec,
) -> Result<f64> {
    let per_scene = map_range(exec, scenes.len(), |i| {
        let s = &scenes[i];
        let trajs = sample(net, params, sched, sampler, &s.context, n, seed.wrapping_add(i as u64))?;
        let total = trajs
            .iter()
            .map(|t| rollout_replay(t, s).map(|f| safety_reward(&f)))
            .sum::<Result<f64>>()?;
        Ok(total / n as f64)
    })
    .into_iter()
    .collect::<Result<Vec<f64>>>()?;
    Ok(per_scene.iter().sum::<f64>() / per_scene.len().max(1) as f64)
}

#[derive(Clone, Debug)]
pub struct RlOutcome {
    pub before: EvalSummary,
    pub after: EvalSummary,
    pub reward_before: f64,
    pub reward_after: f64,
    pub state: RlState,
    pub log: Vec<StepStats>,
}

/// Post-train `params` on `replay` scenes and score the initial and the
/// averaged policy on `held_out`.
#[allow(clippy::too_many_arguments)]
pub fn rl_experiment(
    net: &Denoiser,
    params: &DenoiserParams,
    sched: &NoiseSchedule,
    objective: &Objective,
    replay: &[Scene],
    held_out: &[Scene],
    rl: &RlConfig,
    eval: &EvalConfig,
    exec: Exec,
) -> Result<RlOutcome> {
    let score = |p: &DenoiserParams| -> Result<(EvalSummary, f64)> {
        let planner = DiffusionPlanner {
            net,
            params: p,
            sched,
            sampler: eval.sampler,
        };
        let summary = summarize(&evaluate(&planner, held_out, eval, exec)?);
        let reward = mean_safety_reward(net, p, sched, &eval.sampler, held_out, rl.group_size, eval.seed, exec)?;
        Ok((summary, reward))
    };
    let (before, reward_before) = score(params)?;
    let (state, log) = train_rl(net, sched, objective, params.clone(), replay, rl, exec)?;
    let (after, reward_after) = score(&state.ema)?;
    Ok(RlOutcome {
        before,
        after,
        reward_before,
        reward_after,
        state,
        log,
    })
}

pub fn rl_summary_table(out: &RlOutcome) -> CsvTable {
    let mut cols = vec!["policy", "mean_safety_reward"];
    cols.extend(summary_columns());
    let mut t = CsvTable::new(&cols);
    for (name, s, r) in [("before", &out.before, out.reward_before), ("after", &out.after, out.reward_after)] {
        let mut row = crate::row![name, r];
        row.extend(summary_cells(s));
        t.push(row);
    }
    t
}

// ---------------------------------------------------------------------------
// Reward-weighting toy

/// One-dimensional two-mode data with a reward that prefers one mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub pool: usize,
    pub mode_center: f64,
    pub mode_std: f64,
    pub beta: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub hidden: usize,
    pub samples: usize,
    pub sampler_steps: usize,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            pool: 4096,
            mode_center: 1.0,
            mode_std: 0.1,
            beta: 1.0,
            steps: 2000,
            batch_size: 128,
            lr: 1e-3,
            hidden: 32,
            samples: 10_000,
            sampler_steps: 20,
            seed: 5,
        }
    }
}

impl ToyConfig {
    /// 1 on the positive mode, 0 on the negative one.
    pub fn reward(x: f64) -> f64 {
        (x > 0.0) as u8 as f64
    }

    /// Mass of the positive mode under `p(x)·exp(β r(x))`.
    pub fn tilted_positive_mass(&self) -> f64 {
        let e = self.beta.exp();
        e / (1.0 + e)
    }

    fn denoiser(&self) -> DenoiserConfig {
        DenoiserConfig {
            blocks: 1,
            hidden: self.hidden,
            heads: 2,
            horizon: 1,
            ctx_tokens: 1,
            ctx_features: 1,
            mlp_ratio: 4,
            representation: Representation::Generic(1),
            pred_space: Space::Data,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ToyOutcome {
    pub weighted: Vec<f64>,
    pub resampled: Vec<f64>,
    /// 1-Wasserstein distance between the two generated sample sets.
    pub w1: f64,
}

impl ToyOutcome {
    pub fn positive_fraction(xs: &[f64]) -> f64 {
        xs.iter().filter(|&&x| x > 0.0).count() as f64 / xs.len().max(1) as f64
    }
}

fn toy_example(x: f64, weight: f64) -> Example {
    Example {
        ctx: Array2::zeros((1, 1)),
        ego_speed: 0.0,
        target: Array2::from_elem((1, 1), x),
        weight,
    }
}

/// Train once with per-sample weights `exp(β r)/Z` and once on a pool
/// resampled with probabilities `∝ exp(β r)`, same seeds and budget, and
/// compare what the two models generate.
pub fn toy_reweighting(cfg: &ToyConfig, exec: Exec) -> Result<ToyOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mode = Normal::new(0.0, cfg.mode_std).map_err(|e| Error::Config(e.to_string()))?;
    let pool: Vec<f64> = (0..cfg.pool)
        .map(|_| {
            let c = if rng.gen_bool(0.5) { cfg.mode_center } else { -cfg.mode_center };
            c + mode.sample(&mut rng)
        })
        .collect();
    let w: Vec<f64> = pool.iter().map(|&x| (cfg.beta * ToyConfig::reward(x)).exp()).collect();
    let z = w.iter().sum::<f64>() / w.len() as f64;
    let weighted: Vec<Example> = pool.iter().zip(&w).map(|(&x, &wi)| toy_example(x, wi / z)).collect();
    let cdf: Vec<f64> = w
        .iter()
        .scan(0.0, |acc, wi| {
            *acc += wi;
            Some(*acc)
        })
        .collect();
    let total = *cdf.last().unwrap_or(&0.0);
    let resampled: Vec<Example> = (0..cfg.pool)
        .map(|_| {
            let u = rng.gen::<f64>() * total;
            let i = cdf.partition_point(|&c| c <= u).min(cfg.pool - 1);
            toy_example(pool[i], 1.0)
        })
        .collect();

    let sched = NoiseSchedule::default();
    let objective = Objective::Diffusion {
        spec: SpaceSpec::new(Space::Data, Space::Data),
    };
    let train = TrainConfig {
        steps: cfg.steps,
        batch_size: cfg.batch_size,
        lr: cfg.lr,
        cosine_decay: true,
        seed: cfg.seed,
        ..TrainConfig::default()
    };
    let generate = |data: &[Example]| -> Result<Vec<f64>> {
        let m = train_model(cfg.denoiser(), &sched, &objective, data, &train, cfg.seed, exec)?;
        let n = cfg.samples;
        let model = |x: &Array2<f64>, t: f64| {
            let input = DenoiserInput {
                batch: n,
                tau_t: x.clone(),
                t: vec![t; n],
                ctx: Array2::zeros((n, 1)),
                ego_speed: vec![0.0; n],
            };
            m.net.forward(&m.params, &input)
        };
        let out = integrate(
            &model,
            &sched,
            &SamplerConfig::with_steps(cfg.sampler_steps),
            initial_noise(cfg.seed, n, 1, 1),
        )?;
        Ok(out.into_raw_vec_and_offset().0)
    };
    let a = generate(&weighted)?;
    let b = generate(&resampled)?;
    let w1 = wasserstein1(&a, &b);
    Ok(ToyOutcome {
        weighted: a,
        resampled: b,
        w1,
    })
}

/// 1-Wasserstein distance between two empirical distributions on the line:
/// the integral of `|F_a − F_b|`.
pub fn wasserstein1(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return f64::NAN;
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut prev = a[0].min(b[0]);
    let mut dist = 0.0;
    while i < a.len() || j < b.len() {
        let x = match (a.get(i), b.get(j)) {
            (Some(&u), Some(&v)) => u.min(v),
            (Some(&u), None) => u,
            (None, Some(&v)) => v,
            (None, None) => unreachable!(),
        };
        dist += (x - prev) * (i as f64 / na - j as f64 / nb).abs();
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        prev = x;
    }
    dist
}

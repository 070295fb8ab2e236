use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use trajdiff::config::ModelConfig;
use trajdiff::denoiser::{Denoiser, OptimizerKind};
use trajdiff::experiments::{examples_for, scene_set, train_model};
use trajdiff::losses::{HybridConfig, Objective};
use trajdiff::par::Exec;
use trajdiff::rl::{posttrain_step, rollout_group, train_rl, RlConfig, RlState, RolloutGroup};
use trajdiff::sampler::SamplerConfig;
use trajdiff::scenarios::{generate_scene, Mix, SceneKind};
use trajdiff::schedule::{NoiseSchedule, Space, SpaceSpec};
use trajdiff::train::{train_il, Example, TrainConfig};

fn hybrid() -> Objective {
    Objective::Hybrid {
        pred: Space::Data,
        hybrid: HybridConfig::default(),
    }
}

#[test]
fn point_mass_data_is_fit() {
    let model = ModelConfig::default();
    let scene = generate_scene(SceneKind::Straight, 3);
    let data = vec![scene.example(model.representation); 4];
    let train = TrainConfig {
        steps: 2000,
        batch_size: 8,
        lr: 1e-3,
        weight_decay: 0.0,
        cosine_decay: true,
        ..TrainConfig::default()
    };
    let objective = Objective::Diffusion {
        spec: SpaceSpec::new(Space::Data, Space::Data),
    };
    let m = train_model(
        model.denoiser(Space::Data),
        &NoiseSchedule::default(),
        &objective,
        &data,
        &train,
        0,
        Exec::Parallel,
    )
    .unwrap();
    let tail: Vec<f64> = m.curve.iter().rev().take(20).map(|c| c.loss).collect();
    let last = tail.iter().sum::<f64>() / tail.len() as f64;
    assert!(last < 1e-4, "final loss {last:e}");
    assert!(m.curve[0].loss > 100.0 * last);
}

#[test]
fn training_is_identical_across_execution_modes() {
    let model = ModelConfig::default();
    let scenes = scene_set(&Mix::uniform(), 2, 40, Exec::Parallel).unwrap();
    let data = examples_for(&scenes, model.representation);
    let net = Denoiser::new(model.denoiser(Space::Data)).unwrap();
    let train = TrainConfig {
        steps: 5,
        batch_size: 20,
        ..TrainConfig::default()
    };
    let run = |exec| {
        let mut p = net.init_params(&mut ChaCha8Rng::seed_from_u64(0));
        let curve = train_il(&net, &mut p, &NoiseSchedule::default(), &hybrid(), &data, &train, exec, |_, _| Ok(())).unwrap();
        (p, curve)
    };
    let (a, ca) = run(Exec::Sequential);
    let (b, cb) = run(Exec::Parallel);
    assert_eq!(ca, cb);
    assert!(a.values.iter().zip(&b.values).all(|(x, y)| x.to_bits() == y.to_bits()));
}

fn single(example: &Example, weight: f64) -> RolloutGroup {
    RolloutGroup {
        examples: vec![Example {
            weight,
            ..example.clone()
        }],
        rewards: vec![1.0],
        normalized: Some(vec![1.0]),
    }
}

#[test]
fn weight_scales_an_sgd_step() {
    let model = ModelConfig::default();
    let net = Denoiser::new(model.denoiser(Space::Data)).unwrap();
    let init = net.random_params(&mut ChaCha8Rng::seed_from_u64(1), 0.1);
    let ex = generate_scene(SceneKind::LaneChangeBimodal, 4).example(model.representation);
    let cfg = RlConfig {
        optimizer: OptimizerKind::Sgd,
        weight_decay: 0.0,
        ..RlConfig::default()
    };
    let sched = NoiseSchedule::default();
    let delta = |weight: f64| {
        let mut state = RlState::new(init.clone(), &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        posttrain_step(&net, &sched, &hybrid(), &mut state, &[single(&ex, weight)], 1e-2, 0.05, &mut rng, Exec::Parallel)
            .unwrap()
            .unwrap();
        state.live.values.iter().zip(&init.values).map(|(a, b)| a - b).collect::<Vec<f64>>()
    };
    let e = 1f64.exp();
    let weighted = delta(e);
    let plain = delta(1.0);
    let norm = plain.iter().map(|d| d.abs()).fold(0.0, f64::max);
    assert!(norm > 0.0);
    for (w, p) in weighted.iter().zip(&plain) {
        assert!((w - e * p).abs() <= 1e-10 * norm);
    }
}

#[test]
fn discarded_groups_skip_the_step() {
    let model = ModelConfig::default();
    let net = Denoiser::new(model.denoiser(Space::Data)).unwrap();
    let init = net.init_params(&mut ChaCha8Rng::seed_from_u64(0));
    let sched = NoiseSchedule::default();
    let sampler = SamplerConfig::with_steps(3);
    // No obstacles: every plan earns the full reward.
    let scene = generate_scene(SceneKind::Straight, 0);
    let mut empty = scene.clone();
    empty.obstacle_future.clear();
    let g = rollout_group(&net, &init, &sched, &sampler, &empty, 4, 1.0, 3).unwrap();
    assert!(!g.retained());
    assert!(g.examples.iter().all(|e| e.weight == 0.0));

    let cfg = RlConfig {
        iterations: 2,
        steps_per_iteration: 2,
        scenes_per_step: 2,
        group_size: 4,
        sampler,
        ..RlConfig::default()
    };
    let (state, log) = train_rl(&net, &sched, &hybrid(), init.clone(), &[empty], &cfg, Exec::Parallel).unwrap();
    assert_eq!(state.skipped, 4);
    assert_eq!(state.steps, 0);
    assert_eq!(log.len(), 4);
    assert!(log.iter().all(|s| s.retained_fraction == 0.0 && s.loss.is_nan()));
    assert_eq!(state.ema, init);
    assert_eq!(state.live, init);
}

#[test]
fn post_training_is_deterministic_and_zero_iterations_is_identity() {
    let model = ModelConfig::default();
    let net = Denoiser::new(model.denoiser(Space::Data)).unwrap();
    let init = net.random_params(&mut ChaCha8Rng::seed_from_u64(2), 0.05);
    let sched = NoiseSchedule::default();
    let scenes = scene_set(&Mix::only(SceneKind::LaneChangeBimodal), 7, 6, Exec::Parallel).unwrap();
    let cfg = RlConfig {
        iterations: 2,
        steps_per_iteration: 1,
        scenes_per_step: 3,
        group_size: 6,
        sampler: SamplerConfig::with_steps(3),
        ..RlConfig::default()
    };
    let (a, la) = train_rl(&net, &sched, &hybrid(), init.clone(), &scenes, &cfg, Exec::Parallel).unwrap();
    let (b, lb) = train_rl(&net, &sched, &hybrid(), init.clone(), &scenes, &cfg, Exec::Sequential).unwrap();
    assert_eq!(a.ema, b.ema);
    assert_eq!(la.len(), 2);
    assert_eq!(
        la.iter().map(|s| s.mean_reward.to_bits()).collect::<Vec<_>>(),
        lb.iter().map(|s| s.mean_reward.to_bits()).collect::<Vec<_>>()
    );
    let zero = RlConfig { iterations: 0, ..cfg };
    let (z, lz) = train_rl(&net, &sched, &hybrid(), init.clone(), &scenes, &zero, Exec::Parallel).unwrap();
    assert_eq!(z.ema, init);
    assert!(lz.is_empty());
}

#[test]
fn zero_beta_gives_unit_weights() {
    let model = ModelConfig::default();
    let net = Denoiser::new(model.denoiser(Space::Data)).unwrap();
    let params = net.random_params(&mut ChaCha8Rng::seed_from_u64(5), 0.3);
    let scene = generate_scene(SceneKind::LaneChangeBimodal, 1);
    let g = rollout_group(&net, &params, &NoiseSchedule::default(), &SamplerConfig::with_steps(3), &scene, 16, 0.0, 2).unwrap();
    let expected = if g.retained() { 1.0 } else { 0.0 };
    assert!(g.examples.iter().all(|e| e.weight == expected));
    assert!(g.examples.iter().all(|e| e.target.dim() == (30, 2) && e.target.iter().all(|v| v.is_finite())));
}

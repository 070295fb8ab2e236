//! Denoiser training: batched loss/gradient evaluation and the imitation
//! loop.

use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::denoiser::{warmup_lr, Denoiser, DenoiserInput, DenoiserParams, Optimizer, OptimizerKind};
use crate::error::{Error, Result};
use crate::losses::Objective;
use crate::par::{chunk_ranges, map_slice, Exec};
use crate::schedule::{perturb_with, DiffusionTime, NoiseSchedule, T_EPS};

/// One conditioning/target pair. `target` is in the model's (normalized)
/// representation; `weight` scales its loss.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub ctx: Array2<f64>,
    pub ego_speed: f64,
    pub target: Array2<f64>,
    pub weight: f64,
}

/// An example with the diffusion time and noise it is trained at.
#[derive(Clone, Debug)]
pub struct NoisedExample<'a> {
    pub example: &'a Example,
    pub t: f64,
    pub eps: Array2<f64>,
}

/// Draw `t ~ U[ε, 1 − ε]` and `ε ~ N(0, I)` for an example.
pub fn noise_example<'a, R: Rng>(rng: &mut R, example: &'a Example) -> NoisedExample<'a> {
    let t = rng.gen_range(T_EPS..1.0 - T_EPS);
    let eps = Array2::from_shape_simple_fn(example.target.raw_dim(), || StandardNormal.sample(rng));
    NoisedExample { example, t, eps }
}

/// Batch size processed per gradient task. Fixed so that results do not
/// depend on how many workers run.
pub const GRAD_CHUNK: usize = 8;

/// Mean of `weight · loss` over `items` and its gradient.
pub fn batch_gradient(
    net: &Denoiser,
    params: &DenoiserParams,
    sched: &NoiseSchedule,
    objective: &Objective,
    items: &[NoisedExample],
    exec: Exec,
) -> Result<(f64, Vec<f64>)> {
    if items.is_empty() {
        return Ok((0.0, params.zeros_like()));
    }
    if objective.pred_space() != net.config.pred_space {
        return Err(Error::Config(format!(
            "objective predicts {} but the denoiser outputs {}",
            objective.pred_space(),
            net.config.pred_space
        )));
    }
    let scale = 1.0 / items.len() as f64;
    let ranges = chunk_ranges(items.len(), GRAD_CHUNK);
    let parts = map_slice(exec, &ranges, |r| chunk_gradient(net, params, sched, objective, &items[r.clone()], scale));
    let mut loss = 0.0;
    let mut grad = params.zeros_like();
    for part in parts {
        let (l, g) = part?;
        loss += l;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    Ok((loss, grad))
}

fn chunk_gradient(
    net: &Denoiser,
    params: &DenoiserParams,
    sched: &NoiseSchedule,
    objective: &Objective,
    items: &[NoisedExample],
    scale: f64,
) -> Result<(f64, Vec<f64>)> {
    let l = net.config.horizon;
    let mut tau_t = Vec::with_capacity(items.len());
    let mut ts = Vec::with_capacity(items.len());
    for it in items {
        let (alpha, sigma) = sched.alpha_sigma(DiffusionTime::new(it.t)?);
        tau_t.push(perturb_with(it.example.target.view(), it.eps.view(), alpha, sigma));
        ts.push(it.t);
    }
    let ctx: Vec<&Array2<f64>> = items.iter().map(|i| &i.example.ctx).collect();
    let speeds: Vec<f64> = items.iter().map(|i| i.example.ego_speed).collect();
    let input = DenoiserInput::stack(&tau_t, &ts, &ctx, &speeds);
    let (out, cache) = net.forward_cached(params, &input)?;
    let mut dout = Array2::zeros(out.raw_dim());
    let mut loss = 0.0;
    for (b, it) in items.iter().enumerate() {
        let rows = s![b * l..(b + 1) * l, ..];
        let w = it.example.weight;
        if !(w >= 0.0 && w.is_finite()) {
            return Err(Error::Config(format!("example weight must be finite and non-negative, got {w}")));
        }
        let lg = objective.evaluate(
            sched,
            out.slice(rows),
            it.example.target.view(),
            it.eps.view(),
            DiffusionTime::new(it.t)?,
        )?;
        loss += scale * w * lg.value;
        dout.slice_mut(rows).assign(&(lg.grad * (scale * w)));
    }
    let mut grad = params.zeros_like();
    net.backward(params, &input, &cache, &dout, &mut grad)?;
    Ok((loss, grad))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Fraction of `steps` spent on linear warmup.
    pub warmup_frac: f64,
    /// Cosine decay to zero after warmup; constant otherwise.
    pub cosine_decay: bool,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 32,
            lr: 5e-4,
            weight_decay: 0.01,
            warmup_frac: 0.03,
            cosine_decay: false,
            optimizer: OptimizerKind::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn warmup_steps(&self) -> usize {
        (self.warmup_frac * self.steps as f64).round() as usize
    }

    /// Learning rate for 0-based `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let warmup = self.warmup_steps();
        if step < warmup || !self.cosine_decay {
            return warmup_lr(self.lr, step, warmup);
        }
        let frac = (step - warmup) as f64 / (self.steps - warmup).max(1) as f64;
        0.5 * self.lr * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Imitation training on `data`. `on_step` runs after every optimizer step
/// with the step count (1-based) and the current parameters.
#[allow(clippy::too_many_arguments)]
pub fn train_il<F>(
    net: &Denoiser,
    params: &mut DenoiserParams,
    sched: &NoiseSchedule,
    objective: &Objective,
    data: &[Example],
    cfg: &TrainConfig,
    exec: Exec,
    mut on_step: F,
) -> Result<Vec<CurvePoint>>
where
    F: FnMut(usize, &DenoiserParams) -> Result<()>,
{
    if cfg.steps > 0 && data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(cfg.optimizer, cfg.weight_decay, params.len());
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let items: Vec<NoisedExample> = (0..cfg.batch_size)
            .map(|_| {
                let ex = &data[rng.gen_range(0..data.len())];
                noise_example(&mut rng, ex)
            })
            .collect();
        let (loss, grad) = batch_gradient(net, params, sched, objective, &items, exec)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite { what: "training loss", step });
        }
        let lr = cfg.lr_at(step);
        opt.step(&mut params.values, &grad, lr)?;
        curve.push(CurvePoint { step: step + 1, loss, lr });
        on_step(step + 1, params)?;
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::DenoiserConfig;
    use crate::schedule::{Space, SpaceSpec};
    use crate::trajectory::Representation;

    fn tiny() -> Denoiser {
        Denoiser::new(DenoiserConfig {
            blocks: 1,
            hidden: 8,
            heads: 2,
            horizon: 4,
            ctx_tokens: 2,
            ctx_features: 3,
            mlp_ratio: 2,
            representation: Representation::Velocity,
            pred_space: Space::Data,
        })
        .unwrap()
    }

    fn examples(n: usize, rng: &mut ChaCha8Rng) -> Vec<Example> {
        (0..n)
            .map(|_| Example {
                ctx: Array2::from_shape_fn((2, 3), |_| rng.gen_range(-1.0..1.0)),
                ego_speed: rng.gen_range(0.0..10.0),
                target: Array2::from_shape_fn((4, 2), |_| rng.gen_range(-1.0..1.0)),
                weight: rng.gen_range(0.1..3.0),
            })
            .collect()
    }

    #[test]
    fn chunked_gradient_is_exec_independent_and_linear() {
        let net = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = net.random_params(&mut rng, 0.3);
        let sched = NoiseSchedule::default();
        let obj = Objective::Diffusion {
            spec: SpaceSpec::new(Space::Data, Space::Velocity),
        };
        let data = examples(19, &mut rng);
        let items: Vec<_> = data.iter().map(|e| noise_example(&mut rng, e)).collect();
        let (l1, g1) = batch_gradient(&net, &params, &sched, &obj, &items, Exec::Sequential).unwrap();
        let (l2, g2) = batch_gradient(&net, &params, &sched, &obj, &items, Exec::Parallel).unwrap();
        assert_eq!(l1.to_bits(), l2.to_bits());
        assert!(g1.iter().zip(&g2).all(|(a, b)| a.to_bits() == b.to_bits()));

        // Batch mean equals the weighted mean of single-item gradients.
        let mut sum = vec![0.0; g1.len()];
        for it in &items {
            let (_, g) = batch_gradient(&net, &params, &sched, &obj, std::slice::from_ref(it), Exec::Sequential).unwrap();
            for (a, b) in sum.iter_mut().zip(&g) {
                *a += b / items.len() as f64;
            }
        }
        for (a, b) in g1.iter().zip(&sum) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn lr_schedule() {
        let mut cfg = TrainConfig {
            steps: 100,
            lr: 1.0,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.warmup_steps(), 3);
        assert!((cfg.lr_at(0) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(cfg.lr_at(2), 1.0);
        assert_eq!(cfg.lr_at(99), 1.0);
        cfg.cosine_decay = true;
        assert!((cfg.lr_at(1) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(cfg.lr_at(3), 1.0);
        assert!((cfg.lr_at(3 + 97 / 2) - 0.5).abs() < 0.02);
        assert!(cfg.lr_at(99) < 1e-3);
    }

    #[test]
    fn mismatched_prediction_space_rejected() {
        let net = tiny();
        let params = net.init_params(&mut ChaCha8Rng::seed_from_u64(0));
        let obj = Objective::Diffusion {
            spec: SpaceSpec::new(Space::Noise, Space::Noise),
        };
        let data = examples(1, &mut ChaCha8Rng::seed_from_u64(0));
        let items = vec![noise_example(&mut ChaCha8Rng::seed_from_u64(0), &data[0])];
        assert!(batch_gradient(&net, &params, &NoiseSchedule::default(), &obj, &items, Exec::Sequential).is_err());
    }

    #[test]
    fn zero_steps_keep_initialization_and_training_is_deterministic() {
        let net = tiny();
        let sched = NoiseSchedule::default();
        let obj = Objective::Diffusion {
            spec: SpaceSpec::new(Space::Data, Space::Data),
        };
        let data = examples(10, &mut ChaCha8Rng::seed_from_u64(2));
        let init = net.init_params(&mut ChaCha8Rng::seed_from_u64(3));
        let mut p = init.clone();
        let cfg = TrainConfig {
            steps: 0,
            ..TrainConfig::default()
        };
        train_il(&net, &mut p, &sched, &obj, &data, &cfg, Exec::Parallel, |_, _| Ok(())).unwrap();
        assert_eq!(p, init);

        let cfg = TrainConfig {
            steps: 5,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let mut a = init.clone();
        let mut b = init.clone();
        train_il(&net, &mut a, &sched, &obj, &data, &cfg, Exec::Parallel, |_, _| Ok(())).unwrap();
        train_il(&net, &mut b, &sched, &obj, &data, &cfg, Exec::Sequential, |_, _| Ok(())).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, init);
    }
}

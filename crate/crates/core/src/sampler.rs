//! Few-step deterministic sampling of the probability-flow ODE.
//!
//! The solver is the first-order exponential integrator in log-SNR time on
//! the data prediction: from `t_i` to `t_{i+1}` with `h = λ_{i+1} − λ_i`,
//!
//! ```text
//! x_{i+1} = (σ_{i+1}/σ_i) x_i + α_{i+1} (1 − e^{−h}) x̂0(x_i, t_i).
//! ```
//!
//! With `steps = N` the model is evaluated at `N` grid times from `t_start`
//! down to `t_end`; the last evaluation's data prediction is returned, which
//! is the same integrator step taken to `t = 0`.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, DenoiserInput, DenoiserParams};
use crate::error::{Error, Result};
use crate::scenarios::{SceneContext, DT};
use crate::schedule::{convert, NoiseSchedule, Space, T_EPS};
use crate::trajectory::Trajectory;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepPlacement {
    UniformT,
    LogSnr,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub steps: usize,
    pub t_start: f64,
    pub t_end: f64,
    pub placement: StepPlacement,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 6,
            t_start: 1.0 - T_EPS,
            t_end: T_EPS,
            placement: StepPlacement::LogSnr,
        }
    }
}

impl SamplerConfig {
    pub fn with_steps(steps: usize) -> Self {
        Self {
            steps,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("sampler needs at least one step".into()));
        }
        if !(0.0 < self.t_end && self.t_end < self.t_start && self.t_start <= 1.0) {
            return Err(Error::Config(format!(
                "sampler needs 0 < t_end < t_start <= 1, got {} and {}",
                self.t_end, self.t_start
            )));
        }
        Ok(())
    }

    /// Evaluation times, decreasing.
    pub fn grid(&self, sched: &NoiseSchedule) -> Result<Vec<f64>> {
        self.validate()?;
        let n = self.steps;
        if n == 1 {
            return Ok(vec![self.t_start]);
        }
        let frac = |i: usize| i as f64 / (n - 1) as f64;
        Ok(match self.placement {
            StepPlacement::UniformT => (0..n)
                .map(|i| self.t_start + (self.t_end - self.t_start) * frac(i))
                .collect(),
            StepPlacement::LogSnr => {
                let (l0, l1) = (sched.log_snr(self.t_start), sched.log_snr(self.t_end));
                (0..n)
                    .map(|i| match i {
                        0 => self.t_start,
                        _ if i == n - 1 => self.t_end,
                        _ => sched.time_from_log_snr(l0 + (l1 - l0) * frac(i)),
                    })
                    .collect()
            }
        })
    }
}

/// Anything that maps a batch of noised states at time `t` to data
/// predictions of the same shape.
pub trait DataPredictor {
    fn predict_data(&self, x: &Array2<f64>, t: f64) -> Result<Array2<f64>>;
}

impl<F> DataPredictor for F
where
    F: Fn(&Array2<f64>, f64) -> Result<Array2<f64>>,
{
    fn predict_data(&self, x: &Array2<f64>, t: f64) -> Result<Array2<f64>> {
        self(x, t)
    }
}

/// Run the solver from the given initial states (`n` samples stacked along
/// rows) and return the final data predictions.
pub fn integrate<P: DataPredictor + ?Sized>(
    model: &P,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    init: Array2<f64>,
) -> Result<Array2<f64>> {
    let grid = cfg.grid(sched)?;
    let mut x = init;
    for (i, &t) in grid.iter().enumerate() {
        let x0 = model.predict_data(&x, t)?;
        if x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "sampler data prediction",
                step: i,
            });
        }
        let Some(&next) = grid.get(i + 1) else {
            return Ok(x0);
        };
        let (_, s_i) = sched.alpha_sigma_at(t)?;
        let (a_n, s_n) = sched.alpha_sigma_at(next)?;
        let h = sched.log_snr(next) - sched.log_snr(t);
        let (ca, cb) = (s_n / s_i, -a_n * (-h).exp_m1());
        x.zip_mut_with(&x0, |xv, &p| *xv = ca * *xv + cb * p);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "sampler state",
                step: i,
            });
        }
    }
    unreachable!("grid is never empty")
}

/// `n` standard-normal initial states of shape `[rows, cols]`; sample `i`
/// draws from stream `i` of `seed`, so it does not depend on `n`.
pub fn initial_noise(seed: u64, n: usize, rows: usize, cols: usize) -> Array2<f64> {
    let mut out = Array2::zeros((n * rows, cols));
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        for v in out.slice_mut(ndarray::s![i * rows..(i + 1) * rows, ..]).iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
    }
    out
}

/// A trained denoiser applied to one scene, converted to data predictions.
pub struct ScenePredictor<'a> {
    pub net: &'a Denoiser,
    pub params: &'a DenoiserParams,
    pub sched: &'a NoiseSchedule,
    pub ctx: Array2<f64>,
    pub ego_speed: f64,
}

impl DataPredictor for ScenePredictor<'_> {
    fn predict_data(&self, x: &Array2<f64>, t: f64) -> Result<Array2<f64>> {
        let l = self.net.config.horizon;
        let n = x.nrows() / l;
        let kc = self.ctx.nrows();
        let input = DenoiserInput {
            batch: n,
            tau_t: x.clone(),
            t: vec![t; n],
            ctx: Array2::from_shape_fn((n * kc, self.ctx.ncols()), |(r, c)| self.ctx[[r % kc, c]]),
            ego_speed: vec![self.ego_speed; n],
        };
        let out = self.net.forward(self.params, &input)?;
        let (alpha, sigma) = self.sched.alpha_sigma_at(t)?;
        convert(out.view(), self.net.config.pred_space, Space::Data, x.view(), alpha, sigma)
    }
}

/// Raw generated tensors, `n` blocks of `[L, channels]` stacked by rows.
pub fn sample_tensors(
    net: &Denoiser,
    params: &DenoiserParams,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    ctx: &SceneContext,
    n: usize,
    seed: u64,
) -> Result<Array2<f64>> {
    if n == 0 {
        return Err(Error::Config("sample count must be at least one".into()));
    }
    let model = ScenePredictor {
        net,
        params,
        sched,
        ctx: ctx.tokens(),
        ego_speed: ctx.ego_speed,
    };
    let init = initial_noise(seed, n, net.config.horizon, net.config.channels());
    integrate(&model, sched, cfg, init)
}

/// `n` decoded trajectories for one scene.
pub fn sample(
    net: &Denoiser,
    params: &DenoiserParams,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    ctx: &SceneContext,
    n: usize,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    let raw = sample_tensors(net, params, sched, cfg, ctx, n, seed)?;
    Ok(split_decode(net, &raw))
}

pub fn split_decode(net: &Denoiser, raw: &Array2<f64>) -> Vec<Trajectory> {
    let l = net.config.horizon;
    (0..raw.nrows() / l)
        .map(|i| {
            let block = raw.slice(ndarray::s![i * l..(i + 1) * l, ..]).to_owned();
            net.config.representation.decode(&block, DT)
        })
        .collect()
}

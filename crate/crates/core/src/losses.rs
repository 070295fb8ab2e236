//! Diffusion training losses.
//!
//! Every per-sample loss here returns the value with mean reduction over the
//! elements of the sample together with its gradient with respect to the
//! model output. Batch reduction is a further mean taken by the trainer.

use ndarray::{Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{check_shape, Error, Result};
use crate::schedule::{conversion_coeffs, perturb_with, DiffusionTime, NoiseSchedule, Space, SpaceSpec};

/// Loss value and its gradient with respect to the model output.
#[derive(Clone, Debug)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Array2<f64>,
}

impl LossGrad {
    pub fn scaled(mut self, w: f64) -> Self {
        self.value *= w;
        self.grad.mapv_inplace(|g| g * w);
        self
    }
}

/// Lower-triangular matrix of ones mapping per-step velocity to cumulative
/// displacement.
#[derive(Clone, Copy, Debug)]
pub struct IntegrationMatrix {
    pub len: usize,
}

impl IntegrationMatrix {
    pub fn new(len: usize) -> Self {
        Self { len }
    }

    pub fn dense(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.len, self.len), |(i, j)| if j <= i { 1.0 } else { 0.0 })
    }
}

/// Cumulative sum of velocity rows scaled by `dt`, i.e. `M·v·dt`.
pub fn integrate(v: ArrayView2<f64>, dt: f64) -> Array2<f64> {
    let mut out = Array2::zeros(v.raw_dim());
    let cols = v.ncols();
    let mut acc = vec![0.0; cols];
    for (i, row) in v.rows().into_iter().enumerate() {
        for c in 0..cols {
            acc[c] += row[c] * dt;
            out[[i, c]] = acc[c];
        }
    }
    out
}

/// The metric `P = I + dt²·ω·MᵀM` under which the hybrid loss is a plain
/// squared norm.
#[derive(Clone, Debug)]
pub struct PNorm {
    pub matrix: Array2<f64>,
    pub omega: f64,
    pub dt: f64,
    cholesky: Array2<f64>,
}

impl PNorm {
    /// Quadratic form `Σ_c d_cᵀ P d_c` over the columns of `d`.
    pub fn quadratic_form(&self, d: ArrayView2<f64>) -> f64 {
        let pd = self.matrix.dot(&d);
        Zip::from(&pd).and(&d).fold(0.0, |acc, &a, &b| acc + a * b)
    }

    /// `D_P(u, v) = ‖u − v‖²_P`.
    pub fn divergence(&self, u: ArrayView2<f64>, v: ArrayView2<f64>) -> f64 {
        self.quadratic_form((&u - &v).view())
    }

    /// Lower Cholesky factor computed at construction.
    pub fn cholesky_factor(&self) -> &Array2<f64> {
        &self.cholesky
    }
}

/// Dense Cholesky factorization; `None` unless the matrix is symmetric
/// positive-definite.
pub fn cholesky(a: &Array2<f64>) -> Option<Array2<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return None;
    }
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            if (a[[i, j]] - a[[j, i]]).abs() > 1e-12 * a[[i, j]].abs().max(1.0) {
                return None;
            }
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                if s <= 0.0 {
                    return None;
                }
                l[[i, i]] = s.sqrt();
            } else {
                l[[i, j]] = s / l[[j, j]];
            }
        }
    }
    Some(l)
}

pub fn p_matrix(len: usize, dt: f64, omega: f64) -> Result<PNorm> {
    if len == 0 || dt <= 0.0 || omega < 0.0 {
        return Err(Error::Config(format!(
            "P-norm needs len ≥ 1, dt > 0, ω ≥ 0 (got {len}, {dt}, {omega})"
        )));
    }
    let m = IntegrationMatrix::new(len).dense();
    let mut p = m.t().dot(&m) * (dt * dt * omega);
    for i in 0..len {
        p[[i, i]] += 1.0;
    }
    let chol = cholesky(&p)
        .ok_or_else(|| Error::Config("P-norm matrix is not positive-definite".into()))?;
    Ok(PNorm {
        matrix: p,
        omega,
        dt,
        cholesky: chol,
    })
}

/// Forward value of the windowed-detach integral. The value equals
/// [`integrate`] for every window; only the gradient path differs.
pub fn detached_integral(v: ArrayView2<f64>, window: usize, dt: f64) -> Result<Array2<f64>> {
    check_window(window, v.nrows())?;
    Ok(integrate(v, dt))
}

/// The detach construction written out with separate live and frozen inputs:
/// `cumsum(v)·dt + shift_W(cumsum(v_frozen)·dt) − shift_W(cumsum(v)·dt)`,
/// where `shift_W` delays rows by `W` and zero-fills. Differentiating with
/// respect to `v_live` alone gives the gradient path of the detached integral.
pub fn detached_integral_split(
    v_live: ArrayView2<f64>,
    v_frozen: ArrayView2<f64>,
    window: usize,
    dt: f64,
) -> Result<Array2<f64>> {
    check_shape("detached_integral_split", v_live.shape(), v_frozen.shape())?;
    let len = v_live.nrows();
    check_window(window, len)?;
    let wpt = integrate(v_live, dt);
    let wpt_sg = integrate(v_frozen, dt);
    let mut out = wpt.clone();
    for l in window..len {
        for c in 0..v_live.ncols() {
            out[[l, c]] += wpt_sg[[l - window, c]] - wpt[[l - window, c]];
        }
    }
    Ok(out)
}

/// Vector-Jacobian product of the detached integral: the gradient reaching
/// input step `j` from output step `l` is `dt` iff `l − W < j ≤ l`.
pub fn detached_integral_vjp(grad_out: ArrayView2<f64>, window: usize, dt: f64) -> Result<Array2<f64>> {
    let len = grad_out.nrows();
    check_window(window, len)?;
    let cols = grad_out.ncols();
    let mut out = Array2::zeros(grad_out.raw_dim());
    for c in 0..cols {
        // Sliding window sum over l ∈ [j, j + W).
        let mut acc = 0.0;
        for j in (0..len).rev() {
            acc += grad_out[[j, c]];
            if j + window < len {
                acc -= grad_out[[j + window, c]];
            }
            out[[j, c]] = acc * dt;
        }
    }
    Ok(out)
}

fn check_window(window: usize, len: usize) -> Result<()> {
    if window < 1 {
        return Err(Error::Config("detach window must be at least 1".into()));
    }
    if window > len {
        return Err(Error::Config(format!(
            "detach window {window} exceeds horizon {len}"
        )));
    }
    Ok(())
}

/// Velocity loss plus ω-weighted waypoint loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HybridConfig {
    pub omega: f64,
    /// Gradient window in steps; equal to the horizon disables detaching.
    pub window: usize,
    pub dt: f64,
}

impl Default for HybridConfig {
    fn default() -> Self {
        Self {
            omega: 0.1,
            window: 5,
            dt: 0.1,
        }
    }
}

/// `‖pred − gt‖² + ω‖M(pred − gt)dt‖²`, mean-reduced over elements.
///
/// The gradient routes the waypoint term through the detached integral.
pub fn hybrid_loss(pred_v: ArrayView2<f64>, gt_v: ArrayView2<f64>, cfg: &HybridConfig) -> Result<LossGrad> {
    check_shape("hybrid_loss", gt_v.shape(), pred_v.shape())?;
    let len = pred_v.nrows();
    check_window(cfg.window, len)?;
    let n = pred_v.len() as f64;
    let diff = &pred_v - &gt_v;
    let wp_err = integrate(diff.view(), cfg.dt);
    let value = (diff.iter().map(|d| d * d).sum::<f64>()
        + cfg.omega * wp_err.iter().map(|e| e * e).sum::<f64>())
        / n;
    let back = detached_integral_vjp(wp_err.view(), cfg.window, cfg.dt)?;
    let grad = Zip::from(&diff)
        .and(&back)
        .map_collect(|&d, &b| 2.0 * (d + cfg.omega * b) / n);
    Ok(LossGrad { value, grad })
}

/// Noise-matching style loss for one cell of the prediction/loss grid.
///
/// The model output is mapped from `spec.pred` into `spec.loss`, the ground
/// truth is expressed in `spec.loss` too, and the mean squared error between
/// the two is returned.
pub fn diffusion_loss(
    sched: &NoiseSchedule,
    spec: SpaceSpec,
    model_out: ArrayView2<f64>,
    tau0: ArrayView2<f64>,
    eps: ArrayView2<f64>,
    t: DiffusionTime,
) -> Result<LossGrad> {
    check_shape("diffusion_loss", tau0.shape(), model_out.shape())?;
    check_shape("diffusion_loss", tau0.shape(), eps.shape())?;
    let (alpha, sigma) = sched.alpha_sigma(t);
    let tau_t = perturb_with(tau0, eps, alpha, sigma);
    let target = true_quantity(spec.loss, tau0, eps, alpha, sigma);
    space_loss(spec, model_out, target.view(), tau_t.view(), alpha, sigma)
}

pub(crate) fn true_quantity(
    space: Space,
    tau0: ArrayView2<f64>,
    eps: ArrayView2<f64>,
    alpha: f64,
    sigma: f64,
) -> Array2<f64> {
    match space {
        Space::Data => tau0.to_owned(),
        Space::Noise => eps.to_owned(),
        Space::Velocity => Zip::from(&eps)
            .and(&tau0)
            .map_collect(|&e, &x| alpha * e - sigma * x),
    }
}

/// Mean squared error in `spec.loss` given a target already in that space.
pub(crate) fn space_loss(
    spec: SpaceSpec,
    model_out: ArrayView2<f64>,
    target: ArrayView2<f64>,
    tau_t: ArrayView2<f64>,
    alpha: f64,
    sigma: f64,
) -> Result<LossGrad> {
    let (a, b) = conversion_coeffs(spec.pred, spec.loss, alpha, sigma)?;
    let n = model_out.len() as f64;
    let resid = Zip::from(&tau_t)
        .and(&model_out)
        .and(&target)
        .map_collect(|&x, &y, &g| a * x + b * y - g);
    let value = resid.iter().map(|r| r * r).sum::<f64>() / n;
    let grad = resid.mapv(|r| 2.0 * b * r / n);
    Ok(LossGrad { value, grad })
}

/// Training objective applied to a denoiser output.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Objective {
    /// One cell of the 3×3 prediction/loss grid.
    Diffusion { spec: SpaceSpec },
    /// Hybrid loss on the velocity representation; the model output is first
    /// converted from `pred` into data space.
    Hybrid { pred: Space, hybrid: HybridConfig },
}

impl Objective {
    pub fn pred_space(&self) -> Space {
        match self {
            Objective::Diffusion { spec } => spec.pred,
            Objective::Hybrid { pred, .. } => *pred,
        }
    }

    pub fn label(&self) -> String {
        match self {
            Objective::Diffusion { spec } => spec.to_string(),
            Objective::Hybrid { pred, hybrid } => {
                format!("{pred}-pred/hybrid(ω={},W={})", hybrid.omega, hybrid.window)
            }
        }
    }

    pub fn evaluate(
        &self,
        sched: &NoiseSchedule,
        model_out: ArrayView2<f64>,
        tau0: ArrayView2<f64>,
        eps: ArrayView2<f64>,
        t: DiffusionTime,
    ) -> Result<LossGrad> {
        match self {
            Objective::Diffusion { spec } => diffusion_loss(sched, *spec, model_out, tau0, eps, t),
            Objective::Hybrid { pred, hybrid } => {
                check_shape("hybrid objective", tau0.shape(), model_out.shape())?;
                let (alpha, sigma) = sched.alpha_sigma(t);
                let (a, b) = conversion_coeffs(*pred, Space::Data, alpha, sigma)?;
                let tau_t = perturb_with(tau0, eps, alpha, sigma);
                let pred_data = Zip::from(&tau_t)
                    .and(&model_out)
                    .map_collect(|&x, &y| a * x + b * y);
                let mut lg = hybrid_loss(pred_data.view(), tau0, hybrid)?;
                lg.grad.mapv_inplace(|g| g * b);
                Ok(lg)
            }
        }
    }
}

/// One regression sample, optionally reward-weighted.
#[derive(Clone, Debug)]
pub struct LossSample {
    pub model_out: Array2<f64>,
    pub tau0: Array2<f64>,
    pub eps: Array2<f64>,
    pub t: DiffusionTime,
    pub weight: f64,
}

/// `w · loss` with the gradient scaled by `w`.
pub fn rl_weighted_loss(
    sched: &NoiseSchedule,
    objective: &Objective,
    sample: &LossSample,
) -> Result<LossGrad> {
    if !(sample.weight >= 0.0) || !sample.weight.is_finite() {
        return Err(Error::Config(format!(
            "sample weight must be finite and non-negative, got {}",
            sample.weight
        )));
    }
    let lg = objective.evaluate(
        sched,
        sample.model_out.view(),
        sample.tau0.view(),
        sample.eps.view(),
        sample.t,
    )?;
    Ok(lg.scaled(sample.weight))
}

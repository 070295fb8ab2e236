//! Conditional trajectory denoiser.
//!
//! A small diffusion transformer: the noised trajectory is split into one
//! token per step, projected to the hidden width and offset by a learned
//! position embedding and an ego-speed embedding. Each block applies
//! self-attention over the trajectory tokens, cross-attention into the scene
//! condition tokens and a GELU MLP; every sub-block is wrapped in an adaptive
//! layer norm whose shift, scale and gate come from the diffusion-time
//! embedding. A modulated MLP head maps tokens back to trajectory channels.
//!
//! All parameters live in one flat `Vec<f64>` described by a
//! [`ParamLayout`]; gradients use a buffer of the same length. Derivatives are
//! written by hand.

mod checkpoint;
pub mod layers;
mod optim;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC};
pub use optim::{warmup_lr, Optimizer, OptimizerKind};

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{check_shape, Error, Result};
use crate::schedule::Space;
use crate::trajectory::Representation;
use layers::*;

/// Ego speed is fed to the speed embedding divided by this.
pub const SPEED_NORM: f64 = 10.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub blocks: usize,
    pub hidden: usize,
    pub heads: usize,
    pub horizon: usize,
    pub ctx_tokens: usize,
    pub ctx_features: usize,
    pub mlp_ratio: usize,
    pub representation: Representation,
    pub pred_space: Space,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            blocks: 2,
            hidden: 64,
            heads: 4,
            horizon: crate::scenarios::HORIZON,
            ctx_tokens: crate::scenarios::CTX_TOKENS,
            ctx_features: crate::scenarios::CTX_FEATURES,
            mlp_ratio: 4,
            representation: Representation::Velocity,
            pred_space: Space::Data,
        }
    }
}

impl DenoiserConfig {
    pub fn channels(&self) -> usize {
        self.representation.channels()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.blocks < 1 {
            return bad("denoiser needs at least one block".into());
        }
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return bad(format!("hidden {} not divisible by heads {}", self.hidden, self.heads));
        }
        if self.hidden % 2 != 0 {
            return bad("hidden width must be even for the time embedding".into());
        }
        if self.horizon == 0 || self.ctx_tokens == 0 || self.ctx_features == 0 || self.channels() == 0 {
            return bad("horizon, context and channel sizes must be positive".into());
        }
        if self.mlp_ratio == 0 {
            return bad("mlp ratio must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    Zero,
    /// Uniform Xavier with the given fan-in and fan-out.
    Xavier(usize, usize),
    Normal(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    init: Init,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Names, shapes and offsets of every parameter tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamLayout {
    pub entries: Vec<ParamEntry>,
    pub total: usize,
}

impl ParamLayout {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        let entry = ParamEntry {
            name,
            shape,
            offset: self.total,
            init,
        };
        self.total += entry.len();
        self.entries.push(entry);
        self.entries.len() - 1
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, zero: bool) -> Lin {
        let init = if zero { Init::Zero } else { Init::Xavier(fan_in, fan_out) };
        Lin {
            w: self.push(format!("{name}.weight"), vec![fan_in, fan_out], init),
            b: self.push(format!("{name}.bias"), vec![fan_out], Init::Zero),
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Lin {
    w: usize,
    b: usize,
}

#[derive(Clone, Debug)]
struct BlockIds {
    ada: Lin,
    q: Lin,
    k: Lin,
    v: Lin,
    o: Lin,
    cq: Lin,
    ck: Lin,
    cv: Lin,
    co: Lin,
    fc1: Lin,
    fc2: Lin,
}

#[derive(Clone, Debug)]
struct Ids {
    input: Lin,
    pos: usize,
    speed: Lin,
    time1: Lin,
    time2: Lin,
    ctx: Lin,
    blocks: Vec<BlockIds>,
    final_ada: Lin,
    head1: Lin,
    head2: Lin,
}

/// Parameter values of a denoiser; the layout lives in [`Denoiser`].
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserParams {
    pub values: Vec<f64>,
}

impl DenoiserParams {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// A zeroed buffer with the same shape, used for gradients.
    pub fn zeros_like(&self) -> Vec<f64> {
        vec![0.0; self.values.len()]
    }
}

/// One batch of denoiser inputs, flattened sample-major.
#[derive(Clone, Debug)]
pub struct DenoiserInput {
    pub batch: usize,
    /// `[batch·L, channels]`
    pub tau_t: Array2<f64>,
    pub t: Vec<f64>,
    /// `[batch·ctx_tokens, ctx_features]`
    pub ctx: Array2<f64>,
    pub ego_speed: Vec<f64>,
}

impl DenoiserInput {
    /// Stack per-sample pieces into one batch.
    pub fn stack(
        tau_t: &[Array2<f64>],
        t: &[f64],
        ctx: &[&Array2<f64>],
        ego_speed: &[f64],
    ) -> Self {
        let views: Vec<_> = tau_t.iter().map(|a| a.view()).collect();
        let cviews: Vec<_> = ctx.iter().map(|a| a.view()).collect();
        Self {
            batch: tau_t.len(),
            tau_t: ndarray::concatenate(ndarray::Axis(0), &views).expect("ragged trajectories"),
            t: t.to_vec(),
            ctx: ndarray::concatenate(ndarray::Axis(0), &cviews).expect("ragged contexts"),
            ego_speed: ego_speed.to_vec(),
        }
    }

    /// Rows `range` of the batch as a new input.
    pub fn slice(&self, range: std::ops::Range<usize>, horizon: usize, ctx_tokens: usize) -> Self {
        Self {
            batch: range.len(),
            tau_t: self
                .tau_t
                .slice(s![range.start * horizon..range.end * horizon, ..])
                .to_owned(),
            t: self.t[range.clone()].to_vec(),
            ctx: self
                .ctx
                .slice(s![range.start * ctx_tokens..range.end * ctx_tokens, ..])
                .to_owned(),
            ego_speed: self.ego_speed[range].to_vec(),
        }
    }
}

struct SubCache {
    n: Array2<f64>,
    rstd: Array1<f64>,
    m: Array2<f64>,
    y: Array2<f64>,
}

struct BlockCache {
    mods: Array2<f64>,
    sa: SubCache,
    sa_q: Array2<f64>,
    sa_k: Array2<f64>,
    sa_v: Array2<f64>,
    sa_attn: AttnCache,
    sa_o: Array2<f64>,
    ca: SubCache,
    ca_q: Array2<f64>,
    ca_k: Array2<f64>,
    ca_v: Array2<f64>,
    ca_attn: AttnCache,
    ca_o: Array2<f64>,
    mlp: SubCache,
    mlp_pre: Array2<f64>,
    mlp_act: Array2<f64>,
}

/// Activations kept from a forward pass for the backward pass.
pub struct ForwardCache {
    temb: Array2<f64>,
    time_pre: Array2<f64>,
    time_act: Array2<f64>,
    cond: Array2<f64>,
    cond_act: Array2<f64>,
    ctx_h: Array2<f64>,
    blocks: Vec<BlockCache>,
    final_mods: Array2<f64>,
    final_sub: SubCache,
    head_pre: Array2<f64>,
    head_act: Array2<f64>,
}

/// The denoiser architecture (no parameter values).
#[derive(Clone, Debug)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub layout: ParamLayout,
    ids: Ids,
}

impl Denoiser {
    pub fn new(config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let d = config.hidden;
        let c = config.channels();
        let mut lay = ParamLayout::default();
        let input = lay.linear("embed.input", c, d, false);
        let pos = lay.push("embed.position".into(), vec![config.horizon, d], Init::Normal(0.02));
        let speed = lay.linear("embed.speed", 1, d, false);
        let time1 = lay.linear("time.fc1", d, d, false);
        let time2 = lay.linear("time.fc2", d, d, false);
        let ctx = lay.linear("context.proj", config.ctx_features, d, false);
        let blocks = (0..config.blocks)
            .map(|i| {
                let p = |n: &str| format!("blocks.{i}.{n}");
                BlockIds {
                    ada: lay.linear(&p("adaln"), d, 9 * d, true),
                    q: lay.linear(&p("self.q"), d, d, false),
                    k: lay.linear(&p("self.k"), d, d, false),
                    v: lay.linear(&p("self.v"), d, d, false),
                    o: lay.linear(&p("self.out"), d, d, false),
                    cq: lay.linear(&p("cross.q"), d, d, false),
                    ck: lay.linear(&p("cross.k"), d, d, false),
                    cv: lay.linear(&p("cross.v"), d, d, false),
                    co: lay.linear(&p("cross.out"), d, d, false),
                    fc1: lay.linear(&p("mlp.fc1"), d, config.mlp_ratio * d, false),
                    fc2: lay.linear(&p("mlp.fc2"), config.mlp_ratio * d, d, false),
                }
            })
            .collect();
        let final_ada = lay.linear("final.adaln", d, 2 * d, true);
        let head1 = lay.linear("final.fc1", d, d, false);
        let head2 = lay.linear("final.fc2", d, c, true);
        Ok(Self {
            config,
            layout: lay,
            ids: Ids {
                input,
                pos,
                speed,
                time1,
                time2,
                ctx,
                blocks,
                final_ada,
                head1,
                head2,
            },
        })
    }

    pub fn param_count(&self) -> usize {
        self.layout.total
    }

    /// Standard initialization: Xavier linears, small position embedding,
    /// zeroed adaptive-norm projections (so every block starts as identity)
    /// and a zeroed output layer.
    pub fn init_params<R: Rng>(&self, rng: &mut R) -> DenoiserParams {
        let mut values = vec![0.0; self.layout.total];
        for e in &self.layout.entries {
            let slot = &mut values[e.range()];
            match e.init {
                Init::Zero => {}
                Init::Xavier(fi, fo) => {
                    let a = (6.0 / (fi + fo) as f64).sqrt();
                    slot.iter_mut().for_each(|v| *v = rng.gen_range(-a..a));
                }
                Init::Normal(std) => {
                    let n = Normal::new(0.0, std).expect("valid std");
                    slot.iter_mut().for_each(|v| *v = n.sample(rng));
                }
            }
        }
        DenoiserParams { values }
    }

    /// Every entry drawn from `N(0, std²)`; zero-initialized paths become
    /// active, which is what gradient checks need.
    pub fn random_params<R: Rng>(&self, rng: &mut R, std: f64) -> DenoiserParams {
        let n = Normal::new(0.0, std).expect("valid std");
        DenoiserParams {
            values: (0..self.layout.total).map(|_| n.sample(rng)).collect(),
        }
    }

    fn check_input(&self, input: &DenoiserInput) -> Result<()> {
        let b = input.batch;
        let cfg = &self.config;
        check_shape(
            "denoiser trajectory",
            &[b * cfg.horizon, cfg.channels()],
            input.tau_t.shape(),
        )?;
        check_shape(
            "denoiser context",
            &[b * cfg.ctx_tokens, cfg.ctx_features],
            input.ctx.shape(),
        )?;
        check_shape("denoiser time", &[b], &[input.t.len()])?;
        check_shape("denoiser speed", &[b], &[input.ego_speed.len()])?;
        Ok(())
    }

    fn mat<'a>(&self, p: &'a [f64], id: usize) -> ArrayView2<'a, f64> {
        let e = &self.layout.entries[id];
        ArrayView2::from_shape((e.shape[0], e.shape[1]), &p[e.range()]).expect("layout")
    }

    fn vecv<'a>(&self, p: &'a [f64], id: usize) -> ArrayView1<'a, f64> {
        let e = &self.layout.entries[id];
        ArrayView1::from(&p[e.range()])
    }

    fn mat_mut<'a>(&self, g: &'a mut [f64], id: usize) -> ArrayViewMut2<'a, f64> {
        let e = &self.layout.entries[id];
        ArrayViewMut2::from_shape((e.shape[0], e.shape[1]), &mut g[e.range()]).expect("layout")
    }

    fn lin(&self, p: &[f64], l: Lin, x: ArrayView2<f64>) -> Array2<f64> {
        linear(x, self.mat(p, l.w), self.vecv(p, l.b))
    }

    fn lin_back(&self, p: &[f64], g: &mut [f64], l: Lin, x: ArrayView2<f64>, dy: ArrayView2<f64>) -> Array2<f64> {
        let w = self.mat(p, l.w);
        let (gw, gb) = split_two(g, self.layout.entries[l.w].range(), self.layout.entries[l.b].range());
        let dw = ArrayViewMut2::from_shape(w.raw_dim(), gw).expect("layout");
        linear_backward(x, w, dy, dw, gb)
    }

    /// Prediction in the configured prediction space, `[batch·L, channels]`.
    pub fn forward(&self, params: &DenoiserParams, input: &DenoiserInput) -> Result<Array2<f64>> {
        Ok(self.forward_cached(params, input)?.0)
    }

    pub fn forward_cached(
        &self,
        params: &DenoiserParams,
        input: &DenoiserInput,
    ) -> Result<(Array2<f64>, ForwardCache)> {
        self.check_input(input)?;
        let p = &params.values;
        let cfg = &self.config;
        let (bsz, l, d, kc) = (input.batch, cfg.horizon, cfg.hidden, cfg.ctx_tokens);

        let mut x = self.lin(p, self.ids.input, input.tau_t.view());
        let pos = self.mat(p, self.ids.pos);
        let sw = self.mat(p, self.ids.speed.w);
        let sb = self.vecv(p, self.ids.speed.b);
        for (i, mut row) in x.rows_mut().into_iter().enumerate() {
            let (b, step) = (i / l, i % l);
            let sp = input.ego_speed[b] / SPEED_NORM;
            for j in 0..d {
                row[j] += pos[[step, j]] + sp * sw[[0, j]] + sb[j];
            }
        }

        let temb = time_embedding(&input.t, d);
        let time_pre = self.lin(p, self.ids.time1, temb.view());
        let time_act = time_pre.mapv(silu);
        let cond = self.lin(p, self.ids.time2, time_act.view());
        let cond_act = cond.mapv(silu);
        let ctx_h = self.lin(p, self.ids.ctx, input.ctx.view());

        let mut blocks = Vec::with_capacity(cfg.blocks);
        for ids in &self.ids.blocks {
            let mods = self.lin(p, ids.ada, cond_act.view());
            let chunk = |i: usize| mods.slice(s![.., i * d..(i + 1) * d]);

            // Self-attention.
            let (n, rstd) = layer_norm(&x);
            let m = modulate(&n, chunk(0), chunk(1), l);
            let q = self.lin(p, ids.q, m.view());
            let k = self.lin(p, ids.k, m.view());
            let v = self.lin(p, ids.v, m.view());
            let (o, sa_attn) = attention(&q, &k, &v, bsz, l, l, cfg.heads);
            let y = self.lin(p, ids.o, o.view());
            gated_residual(&mut x, chunk(2), &y, l);
            let sa = SubCache { n, rstd, m, y };
            let (sa_q, sa_k, sa_v, sa_o) = (q, k, v, o);

            // Cross-attention into the scene tokens.
            let (n, rstd) = layer_norm(&x);
            let m = modulate(&n, chunk(3), chunk(4), l);
            let q = self.lin(p, ids.cq, m.view());
            let k = self.lin(p, ids.ck, ctx_h.view());
            let v = self.lin(p, ids.cv, ctx_h.view());
            let (o, ca_attn) = attention(&q, &k, &v, bsz, l, kc, cfg.heads);
            let y = self.lin(p, ids.co, o.view());
            gated_residual(&mut x, chunk(5), &y, l);
            let ca = SubCache { n, rstd, m, y };
            let (ca_q, ca_k, ca_v, ca_o) = (q, k, v, o);

            // MLP.
            let (n, rstd) = layer_norm(&x);
            let m = modulate(&n, chunk(6), chunk(7), l);
            let mlp_pre = self.lin(p, ids.fc1, m.view());
            let mlp_act = mlp_pre.mapv(gelu);
            let y = self.lin(p, ids.fc2, mlp_act.view());
            gated_residual(&mut x, chunk(8), &y, l);
            let mlp = SubCache { n, rstd, m, y };

            blocks.push(BlockCache {
                mods,
                sa,
                sa_q,
                sa_k,
                sa_v,
                sa_attn,
                sa_o,
                ca,
                ca_q,
                ca_k,
                ca_v,
                ca_attn,
                ca_o,
                mlp,
                mlp_pre,
                mlp_act,
            });
        }

        let final_mods = self.lin(p, self.ids.final_ada, cond_act.view());
        let (n, rstd) = layer_norm(&x);
        let m = modulate(
            &n,
            final_mods.slice(s![.., 0..d]),
            final_mods.slice(s![.., d..2 * d]),
            l,
        );
        let head_pre = self.lin(p, self.ids.head1, m.view());
        let head_act = head_pre.mapv(gelu);
        let out = self.lin(p, self.ids.head2, head_act.view());
        let cache = ForwardCache {
            temb,
            time_pre,
            time_act,
            cond,
            cond_act,
            ctx_h,
            blocks,
            final_mods,
            final_sub: SubCache {
                n,
                rstd,
                m,
                y: Array2::zeros((0, 0)),
            },
            head_pre,
            head_act,
        };
        Ok((out, cache))
    }

    /// Accumulate into `grads` the gradient of a scalar loss whose gradient
    /// with respect to the output is `dout`.
    pub fn backward(
        &self,
        params: &DenoiserParams,
        input: &DenoiserInput,
        cache: &ForwardCache,
        dout: &Array2<f64>,
        grads: &mut [f64],
    ) -> Result<()> {
        check_shape("denoiser backward", &[grads.len()], &[params.len()])?;
        check_shape(
            "denoiser backward output",
            &[input.batch * self.config.horizon, self.config.channels()],
            dout.shape(),
        )?;
        let p = &params.values;
        let cfg = &self.config;
        let (bsz, l, d, kc) = (input.batch, cfg.horizon, cfg.hidden, cfg.ctx_tokens);

        let mut dsc = Array2::<f64>::zeros((bsz, d));

        // Head.
        let dact = self.lin_back(p, grads, self.ids.head2, cache.head_act.view(), dout.view());
        let dpre = &dact * &cache.head_pre.mapv(gelu_grad);
        let dm = self.lin_back(p, grads, self.ids.head1, cache.final_sub.m.view(), dpre.view());
        let mut dfm = Array2::<f64>::zeros((bsz, 2 * d));
        let dn = {
            let (dshift, dscale) = dfm.view_mut().split_at(ndarray::Axis(1), d);
            modulate_backward(
                &dm,
                &cache.final_sub.n,
                cache.final_mods.slice(s![.., d..2 * d]),
                dshift,
                dscale,
                l,
            )
        };
        let mut dx = layer_norm_backward(&dn, &cache.final_sub.n, &cache.final_sub.rstd);
        dsc += &self.lin_back(p, grads, self.ids.final_ada, cache.cond_act.view(), dfm.view());

        let mut dctx_h = Array2::<f64>::zeros((bsz * kc, d));
        for (ids, bc) in self.ids.blocks.iter().zip(&cache.blocks).rev() {
            let mut dmods = Array2::<f64>::zeros((bsz, 9 * d));
            let scale_of = |i: usize| bc.mods.slice(s![.., i * d..(i + 1) * d]);
            let gate_of = scale_of;

            // MLP sub-block.
            let dy = {
                let dg = dmods.slice_mut(s![.., 8 * d..9 * d]);
                gated_residual_backward(&dx, gate_of(8), &bc.mlp.y, dg, l)
            };
            let dact = self.lin_back(p, grads, ids.fc2, bc.mlp_act.view(), dy.view());
            let dpre = &dact * &bc.mlp_pre.mapv(gelu_grad);
            let dm = self.lin_back(p, grads, ids.fc1, bc.mlp.m.view(), dpre.view());
            dx += &self.sub_norm_backward(&dm, &bc.mlp, scale_of(7), &mut dmods, 6, l);

            // Cross-attention sub-block.
            let dy = {
                let dg = dmods.slice_mut(s![.., 5 * d..6 * d]);
                gated_residual_backward(&dx, gate_of(5), &bc.ca.y, dg, l)
            };
            let do_ = self.lin_back(p, grads, ids.co, bc.ca_o.view(), dy.view());
            let (dq, dk, dv) = attention_backward(
                &do_, &bc.ca_q, &bc.ca_k, &bc.ca_v, &bc.ca_attn, bsz, l, kc, cfg.heads,
            );
            dctx_h += &self.lin_back(p, grads, ids.ck, cache.ctx_h.view(), dk.view());
            dctx_h += &self.lin_back(p, grads, ids.cv, cache.ctx_h.view(), dv.view());
            let dm = self.lin_back(p, grads, ids.cq, bc.ca.m.view(), dq.view());
            dx += &self.sub_norm_backward(&dm, &bc.ca, scale_of(4), &mut dmods, 3, l);

            // Self-attention sub-block.
            let dy = {
                let dg = dmods.slice_mut(s![.., 2 * d..3 * d]);
                gated_residual_backward(&dx, gate_of(2), &bc.sa.y, dg, l)
            };
            let do_ = self.lin_back(p, grads, ids.o, bc.sa_o.view(), dy.view());
            let (dq, dk, dv) = attention_backward(
                &do_, &bc.sa_q, &bc.sa_k, &bc.sa_v, &bc.sa_attn, bsz, l, l, cfg.heads,
            );
            let mut dm = self.lin_back(p, grads, ids.q, bc.sa.m.view(), dq.view());
            dm += &self.lin_back(p, grads, ids.k, bc.sa.m.view(), dk.view());
            dm += &self.lin_back(p, grads, ids.v, bc.sa.m.view(), dv.view());
            dx += &self.sub_norm_backward(&dm, &bc.sa, scale_of(1), &mut dmods, 0, l);

            dsc += &self.lin_back(p, grads, ids.ada, cache.cond_act.view(), dmods.view());
        }

        // Scene tokens.
        self.lin_back(p, grads, self.ids.ctx, input.ctx.view(), dctx_h.view());

        // Time conditioning.
        let dcond = &dsc * &cache.cond.mapv(silu_grad);
        let dact = self.lin_back(p, grads, self.ids.time2, cache.time_act.view(), dcond.view());
        let dpre = &dact * &cache.time_pre.mapv(silu_grad);
        self.lin_back(p, grads, self.ids.time1, cache.temb.view(), dpre.view());

        // Token embedding: input projection, positions and speed.
        self.lin_back(p, grads, self.ids.input, input.tau_t.view(), dx.view());
        {
            let mut dpos = self.mat_mut(grads, self.ids.pos);
            for (i, row) in dx.rows().into_iter().enumerate() {
                let mut target = dpos.row_mut(i % l);
                target += &row;
            }
        }
        let speed_col = Array2::from_shape_fn((bsz * l, 1), |(i, _)| input.ego_speed[i / l] / SPEED_NORM);
        let w = self.mat(p, self.ids.speed.w).to_owned();
        let (gw, gb) = split_two(
            grads,
            self.layout.entries[self.ids.speed.w].range(),
            self.layout.entries[self.ids.speed.b].range(),
        );
        let dw = ArrayViewMut2::from_shape(w.raw_dim(), gw).expect("layout");
        linear_backward(speed_col.view(), w.view(), dx.view(), dw, gb);
        Ok(())
    }

    /// Back through `m = modulate(LN(x))`; writes shift/scale gradients into
    /// `dmods` at chunk `first` and `first + 1`, returns the residual-stream
    /// gradient.
    fn sub_norm_backward(
        &self,
        dm: &Array2<f64>,
        sub: &SubCache,
        scale: ArrayView2<f64>,
        dmods: &mut Array2<f64>,
        first: usize,
        per: usize,
    ) -> Array2<f64> {
        let d = self.config.hidden;
        let region = dmods.slice_mut(s![.., first * d..(first + 2) * d]);
        let (dshift, dscale) = region.split_at(ndarray::Axis(1), d);
        let dn = modulate_backward(dm, &sub.n, scale, dshift, dscale, per);
        layer_norm_backward(&dn, &sub.n, &sub.rstd)
    }

    /// Named view of one parameter tensor, flattened.
    pub fn param_view<'a>(&self, params: &'a DenoiserParams, name: &str) -> Option<ArrayView1<'a, f64>> {
        self.layout
            .entries
            .iter()
            .find(|e| e.name == name)
            .map(|e| ArrayView1::from(&params.values[e.range()]))
    }

    pub fn param_view_mut<'a>(&self, params: &'a mut DenoiserParams, name: &str) -> Option<ArrayViewMut1<'a, f64>> {
        self.layout
            .entries
            .iter()
            .find(|e| e.name == name)
            .map(|e| ArrayViewMut1::from(&mut params.values[e.range()]))
    }
}

/// Two disjoint mutable sub-slices of `buf`; `a` must precede `b`.
fn split_two(
    buf: &mut [f64],
    a: std::ops::Range<usize>,
    b: std::ops::Range<usize>,
) -> (&mut [f64], &mut [f64]) {
    debug_assert!(a.end <= b.start);
    let (left, right) = buf.split_at_mut(b.start);
    (&mut left[a], &mut right[..b.end - b.start])
}

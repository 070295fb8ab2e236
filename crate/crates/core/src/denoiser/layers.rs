//! Stateless building blocks with hand-written derivatives.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};

const LN_EPS: f64 = 1e-6;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
const GELU_K: f64 = 0.044_715;

pub fn linear(x: ArrayView2<f64>, w: ArrayView2<f64>, b: ArrayView1<f64>) -> Array2<f64> {
    let mut y = x.dot(&w);
    y += &b;
    y
}

/// Accumulates `dW += xᵀ dy`, `db += Σ dy` and returns `dx = dy Wᵀ`.
pub fn linear_backward(
    x: ArrayView2<f64>,
    w: ArrayView2<f64>,
    dy: ArrayView2<f64>,
    mut dw: ArrayViewMut2<f64>,
    db: &mut [f64],
) -> Array2<f64> {
    general_mat_mul(1.0, &x.t(), &dy, 1.0, &mut dw);
    for row in dy.rows() {
        for (acc, v) in db.iter_mut().zip(row.iter()) {
            *acc += v;
        }
    }
    dy.dot(&w.t())
}

/// Row-wise layer norm without affine parameters; returns normalized rows and
/// reciprocal standard deviations.
pub fn layer_norm(x: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let d = x.ncols() as f64;
    let mut n = x.clone();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in n.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *r = 1.0 / (var + LN_EPS).sqrt();
        let k = *r;
        row.mapv_inplace(|v| v * k);
    }
    (n, rstd)
}

pub fn layer_norm_backward(dn: &Array2<f64>, n: &Array2<f64>, rstd: &Array1<f64>) -> Array2<f64> {
    let d = n.ncols() as f64;
    let mut dx = dn.clone();
    for ((mut dxr, nr), r) in dx.rows_mut().into_iter().zip(n.rows()).zip(rstd.iter()) {
        let mean_dn = dxr.sum() / d;
        let mean_dn_n = dxr.iter().zip(nr.iter()).map(|(a, b)| a * b).sum::<f64>() / d;
        for (v, nv) in dxr.iter_mut().zip(nr.iter()) {
            *v = r * (*v - mean_dn - nv * mean_dn_n);
        }
    }
    dx
}

/// `n ⊙ (1 + scale_b) + shift_b` where sample `b` owns `per` consecutive rows.
pub fn modulate(n: &Array2<f64>, shift: ArrayView2<f64>, scale: ArrayView2<f64>, per: usize) -> Array2<f64> {
    let mut m = n.clone();
    for (i, mut row) in m.rows_mut().into_iter().enumerate() {
        let b = i / per;
        let (sh, sc) = (shift.row(b), scale.row(b));
        for ((v, a), c) in row.iter_mut().zip(sh.iter()).zip(sc.iter()) {
            *v = *v * (1.0 + c) + a;
        }
    }
    m
}

/// Returns `dn` and accumulates the per-sample shift/scale gradients.
pub fn modulate_backward(
    dm: &Array2<f64>,
    n: &Array2<f64>,
    scale: ArrayView2<f64>,
    mut dshift: ArrayViewMut2<f64>,
    mut dscale: ArrayViewMut2<f64>,
    per: usize,
) -> Array2<f64> {
    let mut dn = dm.clone();
    for (i, (mut dnr, nr)) in dn.rows_mut().into_iter().zip(n.rows()).enumerate() {
        let b = i / per;
        let sc = scale.row(b);
        let mut dsh = dshift.row_mut(b);
        for (j, v) in dnr.iter_mut().enumerate() {
            dsh[j] += *v;
            dscale[[b, j]] += *v * nr[j];
            *v *= 1.0 + sc[j];
        }
    }
    dn
}

/// `x += gate_b ⊙ y` row-wise.
pub fn gated_residual(x: &mut Array2<f64>, gate: ArrayView2<f64>, y: &Array2<f64>, per: usize) {
    for (i, (mut xr, yr)) in x.rows_mut().into_iter().zip(y.rows()).enumerate() {
        let g = gate.row(i / per);
        for ((xv, yv), gv) in xr.iter_mut().zip(yr.iter()).zip(g.iter()) {
            *xv += gv * yv;
        }
    }
}

/// Returns `dy = dx ⊙ gate_b` and accumulates `dgate_b += Σ dx ⊙ y`.
pub fn gated_residual_backward(
    dx: &Array2<f64>,
    gate: ArrayView2<f64>,
    y: &Array2<f64>,
    mut dgate: ArrayViewMut2<f64>,
    per: usize,
) -> Array2<f64> {
    let mut dy = dx.clone();
    for (i, (mut dyr, yr)) in dy.rows_mut().into_iter().zip(y.rows()).enumerate() {
        let b = i / per;
        let g = gate.row(b);
        for (j, v) in dyr.iter_mut().enumerate() {
            dgate[[b, j]] += *v * yr[j];
            *v *= g[j];
        }
    }
    dy
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let th = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// Sinusoidal embedding of diffusion time (scaled to the conventional
/// 0–1000 range), `dim` must be even.
pub fn time_embedding(t: &[f64], dim: usize) -> Array2<f64> {
    let half = dim / 2;
    Array2::from_shape_fn((t.len(), dim), |(b, j)| {
        let k = j % half;
        let freq = (-(10_000f64).ln() * k as f64 / half as f64).exp();
        let arg = 1000.0 * t[b] * freq;
        if j < half {
            arg.cos()
        } else {
            arg.sin()
        }
    })
}

/// Cached softmax probabilities of one multi-head attention call.
pub struct AttnCache {
    pub probs: Vec<Array2<f64>>,
}

/// Multi-head scaled dot-product attention over `batch` independent samples.
/// Sample `b` owns rows `b·lq..(b+1)·lq` of `q` and `b·lk..(b+1)·lk` of `k`/`v`.
pub fn attention(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    batch: usize,
    lq: usize,
    lk: usize,
    heads: usize,
) -> (Array2<f64>, AttnCache) {
    let d = q.ncols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Array2::zeros((batch * lq, d));
    let mut probs = Vec::with_capacity(batch * heads);
    for b in 0..batch {
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let qb = q.slice(s![b * lq..(b + 1) * lq, cols.clone()]);
            let kb = k.slice(s![b * lk..(b + 1) * lk, cols.clone()]);
            let vb = v.slice(s![b * lk..(b + 1) * lk, cols.clone()]);
            let mut p = qb.dot(&kb.t());
            for mut row in p.rows_mut() {
                let mx = row.fold(f64::NEG_INFINITY, |a, &x| a.max(x * scale));
                let mut sum = 0.0;
                row.mapv_inplace(|x| {
                    let e = (x * scale - mx).exp();
                    sum += e;
                    e
                });
                row.mapv_inplace(|x| x / sum);
            }
            let mut ob = out.slice_mut(s![b * lq..(b + 1) * lq, cols]);
            general_mat_mul(1.0, &p, &vb, 0.0, &mut ob);
            probs.push(p);
        }
    }
    (out, AttnCache { probs })
}

/// Gradients `(dq, dk, dv)` of [`attention`].
#[allow(clippy::too_many_arguments)]
pub fn attention_backward(
    dout: &Array2<f64>,
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    cache: &AttnCache,
    batch: usize,
    lq: usize,
    lk: usize,
    heads: usize,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let d = q.ncols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Array2::zeros(q.raw_dim());
    let mut dk = Array2::zeros(k.raw_dim());
    let mut dv = Array2::zeros(v.raw_dim());
    for b in 0..batch {
        for h in 0..heads {
            let p = &cache.probs[b * heads + h];
            let cols = h * dh..(h + 1) * dh;
            let qrows = b * lq..(b + 1) * lq;
            let krows = b * lk..(b + 1) * lk;
            let dob = dout.slice(s![qrows.clone(), cols.clone()]);
            let qb = q.slice(s![qrows.clone(), cols.clone()]);
            let kb = k.slice(s![krows.clone(), cols.clone()]);
            let vb = v.slice(s![krows.clone(), cols.clone()]);
            let mut ds = dob.dot(&vb.t());
            general_mat_mul(1.0, &p.t(), &dob, 1.0, &mut dv.slice_mut(s![krows.clone(), cols.clone()]));
            for (mut dsr, pr) in ds.rows_mut().into_iter().zip(p.rows()) {
                let dot: f64 = dsr.iter().zip(pr.iter()).map(|(a, b)| a * b).sum();
                for (x, pv) in dsr.iter_mut().zip(pr.iter()) {
                    *x = pv * (*x - dot) * scale;
                }
            }
            general_mat_mul(1.0, &ds, &kb, 1.0, &mut dq.slice_mut(s![qrows, cols.clone()]));
            general_mat_mul(1.0, &ds.t(), &qb, 1.0, &mut dk.slice_mut(s![krows, cols]));
        }
    }
    (dq, dk, dv)
}

/// Column sums per sample block: `out[b] = Σ_{rows of b} x`.
pub fn block_row_sums(x: &Array2<f64>, per: usize) -> Array2<f64> {
    let batch = x.nrows() / per;
    let mut out = Array2::zeros((batch, x.ncols()));
    for b in 0..batch {
        out.row_mut(b)
            .assign(&x.slice(s![b * per..(b + 1) * per, ..]).sum_axis(Axis(0)));
    }
    out
}

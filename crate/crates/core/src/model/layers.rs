//! Differentiable building blocks: activation, layer norm, multi-head
//! self-attention. Every forward returns the cache its backward needs.

use crate::mat::{softmax_in_place, Mat};

pub const LN_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

/// Tanh-form smooth gaussian-error activation.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn gelu_mat(x: &Mat) -> Mat {
    Mat::from_vec(x.rows, x.cols, x.data.iter().map(|&v| gelu(v)).collect())
}

/// d_out ⊙ gelu'(pre)
pub fn gelu_backward(pre: &Mat, d_out: &Mat) -> Mat {
    let data = pre
        .data
        .iter()
        .zip(&d_out.data)
        .map(|(&p, &g)| g * gelu_grad(p))
        .collect();
    Mat::from_vec(pre.rows, pre.cols, data)
}

pub struct LayerNormCache {
    pub xhat: Mat,
    pub inv_std: Vec<f64>,
}

/// Row-wise layer norm: y = gamma ⊙ (x − μ)/√(σ² + ε) + beta.
pub fn layer_norm_fwd(x: &Mat, gamma: &[f64], beta: &[f64]) -> (Mat, LayerNormCache) {
    let n = x.cols as f64;
    let mut out = Mat::zeros(x.rows, x.cols);
    let mut xhat = Mat::zeros(x.rows, x.cols);
    let mut inv_std = vec![0.0; x.rows];
    for r in 0..x.rows {
        let row = x.row(r);
        let mu = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std[r] = is;
        for c in 0..x.cols {
            let xh = (row[c] - mu) * is;
            *xhat.at_mut(r, c) = xh;
            *out.at_mut(r, c) = gamma[c] * xh + beta[c];
        }
    }
    (out, LayerNormCache { xhat, inv_std })
}

/// Returns dX and accumulates dGamma/dBeta.
pub fn layer_norm_bwd(
    cache: &LayerNormCache,
    gamma: &[f64],
    d_out: &Mat,
    d_gamma: &mut [f64],
    d_beta: &mut [f64],
) -> Mat {
    let n = cache.xhat.cols as f64;
    let mut dx = Mat::zeros(d_out.rows, d_out.cols);
    for r in 0..d_out.rows {
        let g = d_out.row(r);
        let xh = cache.xhat.row(r);
        let mut mean_h = 0.0;
        let mut mean_hx = 0.0;
        for c in 0..d_out.cols {
            let h = g[c] * gamma[c];
            mean_h += h;
            mean_hx += h * xh[c];
            d_gamma[c] += g[c] * xh[c];
            d_beta[c] += g[c];
        }
        mean_h /= n;
        mean_hx /= n;
        let is = cache.inv_std[r];
        for c in 0..d_out.cols {
            let h = g[c] * gamma[c];
            *dx.at_mut(r, c) = is * (h - mean_h - xh[c] * mean_hx);
        }
    }
    dx
}

pub struct AttnParams<'a> {
    pub wq: &'a Mat,
    pub wk: &'a Mat,
    pub wv: &'a Mat,
    pub wo: &'a Mat,
    pub bq: &'a [f64],
    pub bk: &'a [f64],
    pub bv: &'a [f64],
    pub bo: &'a [f64],
}

pub struct AttnCache {
    pub q: Mat,
    pub k: Mat,
    pub v: Mat,
    /// Softmax attention weights, one [P x P] matrix per head.
    pub attn: Vec<Mat>,
    pub concat: Mat,
}

pub struct AttnGrads {
    pub wq: Mat,
    pub wk: Mat,
    pub wv: Mat,
    pub wo: Mat,
    pub bq: Vec<f64>,
    pub bk: Vec<f64>,
    pub bv: Vec<f64>,
    pub bo: Vec<f64>,
}

fn affine(x: &Mat, w: &Mat, b: &[f64]) -> Mat {
    let mut out = x.matmul(w);
    out.add_row_vec(b);
    out
}

fn head_slice(m: &Mat, head: usize, dk: usize) -> Mat {
    let mut out = Mat::zeros(m.rows, dk);
    for r in 0..m.rows {
        out.row_mut(r)
            .copy_from_slice(&m.row(r)[head * dk..(head + 1) * dk]);
    }
    out
}

fn head_write(dst: &mut Mat, src: &Mat, head: usize, dk: usize) {
    for r in 0..src.rows {
        dst.row_mut(r)[head * dk..(head + 1) * dk].copy_from_slice(src.row(r));
    }
}

/// Multi-head scaled dot-product self-attention.
pub fn attention_fwd(x: &Mat, p: &AttnParams, heads: usize) -> (Mat, AttnCache) {
    let d = x.cols;
    let dk = d / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let q = affine(x, p.wq, p.bq);
    let k = affine(x, p.wk, p.bk);
    let v = affine(x, p.wv, p.bv);
    let mut concat = Mat::zeros(x.rows, d);
    let mut attn = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = head_slice(&q, h, dk);
        let kh = head_slice(&k, h, dk);
        let vh = head_slice(&v, h, dk);
        let mut scores = qh.matmul_nt(&kh).scale(scale);
        for r in 0..scores.rows {
            softmax_in_place(scores.row_mut(r));
        }
        let oh = scores.matmul(&vh);
        head_write(&mut concat, &oh, h, dk);
        attn.push(scores);
    }
    let out = affine(&concat, p.wo, p.bo);
    (out, AttnCache { q, k, v, attn, concat })
}

/// Returns dX given d(attention output).
pub fn attention_bwd(
    x: &Mat,
    cache: &AttnCache,
    p: &AttnParams,
    heads: usize,
    d_out: &Mat,
) -> (Mat, AttnGrads) {
    let d = x.cols;
    let dk = d / heads;
    let scale = 1.0 / (dk as f64).sqrt();

    let wo_g = cache.concat.matmul_tn(d_out);
    let bo_g = d_out.col_sums();
    let d_concat = d_out.matmul_nt(p.wo);

    let mut dq = Mat::zeros(x.rows, d);
    let mut dkm = Mat::zeros(x.rows, d);
    let mut dv = Mat::zeros(x.rows, d);
    for h in 0..heads {
        let d_oh = head_slice(&d_concat, h, dk);
        let a = &cache.attn[h];
        let vh = head_slice(&cache.v, h, dk);
        let qh = head_slice(&cache.q, h, dk);
        let kh = head_slice(&cache.k, h, dk);

        let d_vh = a.matmul_tn(&d_oh);
        let mut d_a = d_oh.matmul_nt(&vh);
        // softmax rows backward
        for r in 0..d_a.rows {
            let arow = a.row(r);
            let dot: f64 = d_a.row(r).iter().zip(arow).map(|(g, w)| g * w).sum();
            for (g, &w) in d_a.row_mut(r).iter_mut().zip(arow) {
                *g = w * (*g - dot);
            }
        }
        let d_qh = d_a.matmul(&kh).scale(scale);
        let d_kh = d_a.matmul_tn(&qh).scale(scale);
        head_write(&mut dq, &d_qh, h, dk);
        head_write(&mut dkm, &d_kh, h, dk);
        head_write(&mut dv, &d_vh, h, dk);
    }

    let grads = AttnGrads {
        wq: x.matmul_tn(&dq),
        wk: x.matmul_tn(&dkm),
        wv: x.matmul_tn(&dv),
        wo: wo_g,
        bq: dq.col_sums(),
        bk: dkm.col_sums(),
        bv: dv.col_sums(),
        bo: bo_g,
    };
    let mut dx = dq.matmul_nt(p.wq);
    dx.add_assign(&dkm.matmul_nt(p.wk));
    dx.add_assign(&dv.matmul_nt(p.wv));
    (dx, grads)
}

/// Centered moving average along the row (patch) axis with edge replication.
pub fn moving_average_rows(x: &Mat, kernel: usize) -> Mat {
    debug_assert!(kernel % 2 == 1);
    let h = (kernel / 2) as isize;
    let last = x.rows as isize - 1;
    let mut out = Mat::zeros(x.rows, x.cols);
    for r in 0..x.rows as isize {
        for o in -h..=h {
            let src = (r + o).clamp(0, last) as usize;
            let srow = x.row(src);
            let orow = out.row_mut(r as usize);
            for (ov, &sv) in orow.iter_mut().zip(srow) {
                *ov += sv;
            }
        }
    }
    out.scale(1.0 / kernel as f64)
}

/// Adjoint of [`moving_average_rows`] (shares the clamped index map).
pub fn moving_average_rows_bwd(d_out: &Mat, kernel: usize) -> Mat {
    let h = (kernel / 2) as isize;
    let last = d_out.rows as isize - 1;
    let inv = 1.0 / kernel as f64;
    let mut dx = Mat::zeros(d_out.rows, d_out.cols);
    for r in 0..d_out.rows as isize {
        for o in -h..=h {
            let src = (r + o).clamp(0, last) as usize;
            let grow = d_out.row(r as usize);
            let drow = dx.row_mut(src);
            for (dv, &gv) in drow.iter_mut().zip(grow) {
                *dv += gv * inv;
            }
        }
    }
    dx
}

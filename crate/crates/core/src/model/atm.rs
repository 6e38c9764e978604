//! Adaptive trend-awareness module: a gating network over a trend/seasonal
//! decomposition routes each sample to the top-k of a bank of timescale
//! experts, whose weighted mix passes through a fusion network.

use crate::mat::{softmax_in_place, Mat};
use crate::model::layers::{gelu_backward, gelu_mat, moving_average_rows, moving_average_rows_bwd};
use crate::model::ModelConfig;

/// Pool-then-upsample factors cycled over experts when structural
/// timescale sensitivity is enabled.
pub const POOL_FACTORS: [usize; 4] = [1, 2, 4, 8];

/// Routing decision for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct GateOutput {
    /// Softmax weights over all experts (zero for experts outside the
    /// active subset). Sums to 1.
    pub weights: Vec<f64>,
    /// Indices of the selected experts, ascending.
    pub selected: Vec<usize>,
    /// Selected weights renormalized to sum to 1, parallel to `selected`.
    pub renormalized_weights: Vec<f64>,
}

pub struct AtmView<'a> {
    pub wt: f64,
    pub ws: f64,
    pub gate_w1: &'a Mat,
    pub gate_b1: &'a [f64],
    pub gate_w2: &'a Mat,
    pub gate_b2: &'a [f64],
    pub experts: Vec<(&'a Mat, &'a [f64])>,
    pub fusion_w1: &'a Mat,
    pub fusion_b1: &'a [f64],
    pub fusion_w2: &'a Mat,
    pub fusion_b2: &'a [f64],
}

pub struct GateCache {
    pub trend: Mat,
    pub pooled: Vec<f64>,
    /// Gate hidden pre-activation.
    pub g1: Vec<f64>,
    pub a1: Vec<f64>,
    /// Raw logits for all experts.
    pub logits: Vec<f64>,
    pub out: GateOutput,
}

pub struct AtmCache {
    pub gate: GateCache,
    /// Per selected expert: pooled input rows when pooling is enabled.
    pub expert_pooled: Vec<Option<Mat>>,
    /// Per selected expert: full-resolution expert output f_i(u).
    pub expert_out: Vec<Mat>,
    pub mix: Mat,
    pub f1: Mat,
    pub af: Mat,
}

pub struct AtmGrads {
    pub wt: f64,
    pub ws: f64,
    pub gate_w1: Mat,
    pub gate_b1: Vec<f64>,
    pub gate_w2: Mat,
    pub gate_b2: Vec<f64>,
    /// All experts; unselected entries stay zero.
    pub experts: Vec<(Mat, Vec<f64>)>,
    pub fusion_w1: Mat,
    pub fusion_b1: Vec<f64>,
    pub fusion_w2: Mat,
    pub fusion_b2: Vec<f64>,
}

fn active_experts(cfg: &ModelConfig) -> Vec<usize> {
    match &cfg.expert_subset {
        Some(s) => s.clone(),
        None => (0..cfg.num_experts).collect(),
    }
}

fn vec_affine(x: &[f64], w: &Mat, b: &[f64]) -> Vec<f64> {
    debug_assert_eq!(x.len(), w.rows);
    let mut out = b.to_vec();
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        for (o, &wv) in out.iter_mut().zip(w.row(i)) {
            *o += xi * wv;
        }
    }
    out
}

/// Trend/seasonal gating: decompose, mix with learned scalars, pool over
/// patches, score experts, select top-k and renormalize.
pub fn gate_fwd(x_bar: &Mat, view: &AtmView, cfg: &ModelConfig) -> GateCache {
    let p = x_bar.rows as f64;
    let trend = moving_average_rows(x_bar, cfg.decomposition_kernel);
    // x_mid = wt*trend + ws*(x - trend); pooled over the patch axis.
    let mut pooled = vec![0.0; x_bar.cols];
    for r in 0..x_bar.rows {
        let xr = x_bar.row(r);
        let tr = trend.row(r);
        for (j, acc) in pooled.iter_mut().enumerate() {
            *acc += view.wt * tr[j] + view.ws * (xr[j] - tr[j]);
        }
    }
    for v in pooled.iter_mut() {
        *v /= p;
    }

    let g1 = vec_affine(&pooled, view.gate_w1, view.gate_b1);
    let a1: Vec<f64> = g1.iter().map(|&v| crate::model::layers::gelu(v)).collect();
    let logits = vec_affine(&a1, view.gate_w2, view.gate_b2);

    let active = active_experts(cfg);
    let mut weights = vec![0.0; cfg.num_experts];
    let mut active_logits: Vec<f64> = active.iter().map(|&i| logits[i]).collect();
    softmax_in_place(&mut active_logits);
    for (&i, &w) in active.iter().zip(&active_logits) {
        weights[i] = w;
    }

    let k_eff = cfg.top_k.min(active.len());
    let mut order = active.clone();
    // Descending weight, ties broken by lower index. total_cmp keeps the
    // ordering defined even for non-finite weights, which the block-level
    // finiteness check then reports.
    order.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
    let mut selected: Vec<usize> = order[..k_eff].to_vec();
    selected.sort_unstable();
    let sum_sel: f64 = selected.iter().map(|&i| weights[i]).sum();
    let renormalized_weights = selected.iter().map(|&i| weights[i] / sum_sel).collect();

    GateCache {
        trend,
        pooled,
        g1,
        a1,
        logits,
        out: GateOutput {
            weights,
            selected,
            renormalized_weights,
        },
    }
}

fn pool_rows(x: &Mat, factor: usize) -> Mat {
    let groups = x.rows.div_ceil(factor);
    let mut out = Mat::zeros(groups, x.cols);
    for g in 0..groups {
        let start = g * factor;
        let end = ((g + 1) * factor).min(x.rows);
        for r in start..end {
            let xr = x.row(r);
            let orow = out.row_mut(g);
            for (o, &v) in orow.iter_mut().zip(xr) {
                *o += v;
            }
        }
        let n = (end - start) as f64;
        for o in out.row_mut(g) {
            *o /= n;
        }
    }
    out
}

fn expert_factor(cfg: &ModelConfig, expert: usize) -> usize {
    if cfg.expert_pooling {
        POOL_FACTORS[expert % POOL_FACTORS.len()]
    } else {
        1
    }
}

/// f_i(u): affine map per expert, optionally on pooled rows upsampled back.
fn expert_fwd(u: &Mat, w: &Mat, b: &[f64], factor: usize) -> (Mat, Option<Mat>) {
    if factor <= 1 {
        let mut out = u.matmul(w);
        out.add_row_vec(b);
        return (out, None);
    }
    let pooled = pool_rows(u, factor);
    let mut y = pooled.matmul(w);
    y.add_row_vec(b);
    let mut out = Mat::zeros(u.rows, u.cols);
    for r in 0..u.rows {
        out.row_mut(r).copy_from_slice(y.row(r / factor));
    }
    (out, Some(pooled))
}

pub struct MixCache {
    pub expert_pooled: Vec<Option<Mat>>,
    pub expert_out: Vec<Mat>,
    pub mix: Mat,
    pub f1: Mat,
    pub af: Mat,
}

fn mix_fuse_cached(u: &Mat, gate: &GateOutput, view: &AtmView, cfg: &ModelConfig) -> (Mat, MixCache) {
    let mut mix = Mat::zeros(u.rows, u.cols);
    let mut expert_out = Vec::new();
    let mut expert_pooled = Vec::new();
    for (&i, &rw) in gate.selected.iter().zip(&gate.renormalized_weights) {
        let (w, b) = view.experts[i];
        let (e, pooled) = expert_fwd(u, w, b, expert_factor(cfg, i));
        for (m, &ev) in mix.data.iter_mut().zip(&e.data) {
            *m += rw * ev;
        }
        expert_out.push(e);
        expert_pooled.push(pooled);
    }
    let mut f1 = mix.matmul(view.fusion_w1);
    f1.add_row_vec(view.fusion_b1);
    let af = gelu_mat(&f1);
    let mut out = af.matmul(view.fusion_w2);
    out.add_row_vec(view.fusion_b2);
    (
        out,
        MixCache {
            expert_pooled,
            expert_out,
            mix,
            f1,
            af,
        },
    )
}

/// Expert mixing and fusion under an externally supplied routing decision.
pub fn mix_and_fuse(u: &Mat, gate: &GateOutput, view: &AtmView, cfg: &ModelConfig) -> Mat {
    mix_fuse_cached(u, gate, view, cfg).0
}

/// Full module forward; returns the pre-residual output and cache.
pub fn atm_fwd(u: &Mat, view: &AtmView, cfg: &ModelConfig) -> (Mat, AtmCache) {
    let gate = gate_fwd(u, view, cfg);
    let (out, mc) = mix_fuse_cached(u, &gate.out, view, cfg);
    (
        out,
        AtmCache {
            gate,
            expert_pooled: mc.expert_pooled,
            expert_out: mc.expert_out,
            mix: mc.mix,
            f1: mc.f1,
            af: mc.af,
        },
    )
}

pub fn atm_grads_zeros(view: &AtmView) -> AtmGrads {
    AtmGrads {
        wt: 0.0,
        ws: 0.0,
        gate_w1: Mat::zeros(view.gate_w1.rows, view.gate_w1.cols),
        gate_b1: vec![0.0; view.gate_b1.len()],
        gate_w2: Mat::zeros(view.gate_w2.rows, view.gate_w2.cols),
        gate_b2: vec![0.0; view.gate_b2.len()],
        experts: view
            .experts
            .iter()
            .map(|(w, b)| (Mat::zeros(w.rows, w.cols), vec![0.0; b.len()]))
            .collect(),
        fusion_w1: Mat::zeros(view.fusion_w1.rows, view.fusion_w1.cols),
        fusion_b1: vec![0.0; view.fusion_b1.len()],
        fusion_w2: Mat::zeros(view.fusion_w2.rows, view.fusion_w2.cols),
        fusion_b2: vec![0.0; view.fusion_b2.len()],
    }
}

/// Backward through the module. Returns du.
pub fn atm_bwd(
    u: &Mat,
    cache: &AtmCache,
    view: &AtmView,
    cfg: &ModelConfig,
    d_out: &Mat,
) -> (Mat, AtmGrads) {
    let mut g = atm_grads_zeros(view);
    let p = u.rows as f64;

    // Fusion.
    g.fusion_w2 = cache.af.matmul_tn(d_out);
    g.fusion_b2 = d_out.col_sums();
    let d_af = d_out.matmul_nt(view.fusion_w2);
    let d_f1 = gelu_backward(&cache.f1, &d_af);
    g.fusion_w1 = cache.mix.matmul_tn(&d_f1);
    g.fusion_b1 = d_f1.col_sums();
    let d_mix = d_f1.matmul_nt(view.fusion_w1);

    // Experts and their renormalized weights.
    let gate = &cache.gate.out;
    let mut du = Mat::zeros(u.rows, u.cols);
    let mut d_rw = vec![0.0; gate.selected.len()];
    for (si, (&i, &rw)) in gate
        .selected
        .iter()
        .zip(&gate.renormalized_weights)
        .enumerate()
    {
        let e = &cache.expert_out[si];
        d_rw[si] = d_mix.data.iter().zip(&e.data).map(|(a, b)| a * b).sum();
        let d_e = d_mix.scale(rw);
        let (w, _) = view.experts[i];
        let factor = expert_factor(cfg, i);
        if factor <= 1 {
            g.experts[i].0.add_assign(&u.matmul_tn(&d_e));
            for (acc, v) in g.experts[i].1.iter_mut().zip(d_e.col_sums()) {
                *acc += v;
            }
            du.add_assign(&d_e.matmul_nt(w));
        } else {
            let pooled = cache.expert_pooled[si].as_ref().expect("pooled cache");
            let groups = pooled.rows;
            let mut d_y = Mat::zeros(groups, u.cols);
            for r in 0..u.rows {
                let src = d_e.row(r);
                let dst = d_y.row_mut(r / factor);
                for (o, &v) in dst.iter_mut().zip(src) {
                    *o += v;
                }
            }
            g.experts[i].0.add_assign(&pooled.matmul_tn(&d_y));
            for (acc, v) in g.experts[i].1.iter_mut().zip(d_y.col_sums()) {
                *acc += v;
            }
            let d_pooled = d_y.matmul_nt(w);
            for q in 0..groups {
                let start = q * factor;
                let end = ((q + 1) * factor).min(u.rows);
                let inv = 1.0 / (end - start) as f64;
                for r in start..end {
                    let dst = du.row_mut(r);
                    for (o, &v) in dst.iter_mut().zip(d_pooled.row(q)) {
                        *o += v * inv;
                    }
                }
            }
        }
    }

    // Renormalization backward: rw_i = w_i / s over the selected set.
    let s: f64 = gate.selected.iter().map(|&i| gate.weights[i]).sum();
    let dot: f64 = d_rw
        .iter()
        .zip(&gate.renormalized_weights)
        .map(|(a, b)| a * b)
        .sum();
    let mut d_weights = vec![0.0; gate.weights.len()];
    for (si, &i) in gate.selected.iter().enumerate() {
        d_weights[i] = (d_rw[si] - dot) / s;
    }

    // Softmax backward over the active subset.
    let active = active_experts(cfg);
    let wdot: f64 = active.iter().map(|&i| d_weights[i] * gate.weights[i]).sum();
    let mut d_logits = vec![0.0; gate.weights.len()];
    for &i in &active {
        d_logits[i] = gate.weights[i] * (d_weights[i] - wdot);
    }

    // Gate FFN backward.
    let d_logits_m = Mat::from_vec(1, d_logits.len(), d_logits);
    let a1_m = Mat::from_vec(1, cache.gate.a1.len(), cache.gate.a1.clone());
    g.gate_w2 = a1_m.matmul_tn(&d_logits_m);
    g.gate_b2 = d_logits_m.row(0).to_vec();
    let d_a1 = d_logits_m.matmul_nt(view.gate_w2);
    let g1_m = Mat::from_vec(1, cache.gate.g1.len(), cache.gate.g1.clone());
    let d_g1 = gelu_backward(&g1_m, &d_a1);
    let pooled_m = Mat::from_vec(1, cache.gate.pooled.len(), cache.gate.pooled.clone());
    g.gate_w1 = pooled_m.matmul_tn(&d_g1);
    g.gate_b1 = d_g1.row(0).to_vec();
    let d_pooled = d_g1.matmul_nt(view.gate_w1);

    // Pooling backward: every patch row gets d_pooled / P.
    // x_mid = wt*trend + ws*(x - trend) = (wt - ws)*trend + ws*x.
    let trend = &cache.gate.trend;
    let mut d_xmid = Mat::zeros(u.rows, u.cols);
    for r in 0..u.rows {
        for (o, &v) in d_xmid.row_mut(r).iter_mut().zip(d_pooled.row(0)) {
            *o = v / p;
        }
    }
    for r in 0..u.rows {
        let xr = u.row(r);
        let tr = trend.row(r);
        let dm = d_xmid.row(r);
        for j in 0..u.cols {
            g.wt += dm[j] * tr[j];
            g.ws += dm[j] * (xr[j] - tr[j]);
        }
    }
    let d_trend_eff = d_xmid.scale(view.wt - view.ws);
    du.add_assign(&moving_average_rows_bwd(&d_trend_eff, cfg.decomposition_kernel));
    du.add_assign(&d_xmid.scale(view.ws));

    (du, g)
}

//! Forward and backward passes through the full local model:
//! normalize -> mask -> patch -> embed -> encoder blocks -> reconstruction.

use crate::data::{
    apply_mask, make_patches, patch_coverage, revin_denormalize, revin_normalize, MaskMatrix,
    RevinStats, TimeSeries,
};
use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::model::atm::{atm_bwd, atm_fwd, gate_fwd, mix_and_fuse, AtmCache, AtmGrads, GateOutput};
use crate::model::layers::{
    attention_bwd, attention_fwd, gelu_backward, gelu_mat, layer_norm_bwd, layer_norm_fwd,
    AttnCache, AttnGrads, LayerNormCache,
};
use crate::model::{resolve_view, BlockViewParams, ModelConfig, NetView, ParameterSet};

pub enum SublayerTrace {
    Atm(AtmCache),
    Ffn { f1: Mat, af: Mat },
}

pub struct BlockTrace {
    pub input: Mat,
    pub attn_cache: AttnCache,
    pub attn_out: Mat,
    pub ln1_cache: LayerNormCache,
    /// Output of the first sublayer (attention + residual + norm).
    pub u: Mat,
    pub sublayer: SublayerTrace,
    pub ln2_cache: LayerNormCache,
    pub out: Mat,
}

impl BlockTrace {
    pub fn gate_output(&self) -> Option<&GateOutput> {
        match &self.sublayer {
            SublayerTrace::Atm(c) => Some(&c.gate.out),
            SublayerTrace::Ffn { .. } => None,
        }
    }
}

pub struct ChannelTrace {
    pub patches: Mat,
    pub tokens: Mat,
    pub blocks: Vec<BlockTrace>,
}

impl ChannelTrace {
    pub fn x_rep(&self) -> &Mat {
        self.blocks.last().map_or(&self.tokens, |b| &b.out)
    }
}

/// Everything the encoder computed, kept for the backward pass.
pub struct EncodeTrace {
    pub stats: RevinStats,
    pub mask: Option<MaskMatrix>,
    pub channels: Vec<ChannelTrace>,
    pub input_len: usize,
    pub num_patches: usize,
}

/// Encoder trace plus reconstruction, as produced by [`forward`].
pub struct ForwardTrace {
    pub encode: EncodeTrace,
    /// Per-channel predicted patches [P x L_p].
    pub recon_patches: Vec<Mat>,
    /// Reconstruction on the normalized scale, [L x C].
    pub x_hat_norm: Mat,
    /// Reconstruction in original units, same shape as the input.
    pub x_hat: TimeSeries,
}

fn validate_view(view: &NetView, cfg: &ModelConfig) -> Result<()> {
    let d = cfg.d_model;
    let lp = cfg.patch.patch_length;
    let bad = |name: &str, expected: String, m: &Mat| -> Error {
        Error::ShapeMismatch {
            context: format!("tensor `{name}`"),
            expected,
            actual: format!("{}x{}", m.rows, m.cols),
        }
    };
    if view.embed_w.rows != lp || view.embed_w.cols != d {
        return Err(bad("embed.w", format!("{lp}x{d}"), view.embed_w));
    }
    if view.pos.rows != cfg.max_patches || view.pos.cols != d {
        return Err(bad("embed.pos", format!("{}x{d}", cfg.max_patches), view.pos));
    }
    if view.recon_w.rows != d || view.recon_w.cols != lp {
        return Err(bad("recon.w", format!("{d}x{lp}"), view.recon_w));
    }
    for (b, blk) in view.blocks.iter().enumerate() {
        for (n, m) in [
            ("wq", blk.attn.wq),
            ("wk", blk.attn.wk),
            ("wv", blk.attn.wv),
            ("wo", blk.attn.wo),
        ] {
            if m.rows != d || m.cols != d {
                return Err(bad(&format!("block{b}.attn.{n}"), format!("{d}x{d}"), m));
            }
        }
        if let Some(atm) = &blk.atm {
            for (e, (w, _)) in atm.experts.iter().enumerate() {
                if w.rows != d || w.cols != d {
                    return Err(bad(
                        &format!("block{b}.atm.expert{e}.w"),
                        format!("{d}x{d}"),
                        w,
                    ));
                }
            }
        }
    }
    Ok(())
}

fn embed_with_view(patches: &Mat, view: &NetView) -> Result<Mat> {
    if patches.cols != view.embed_w.rows {
        return Err(Error::ShapeMismatch {
            context: "embed_patches".into(),
            expected: format!("patch length {}", view.embed_w.rows),
            actual: format!("{}", patches.cols),
        });
    }
    if patches.rows > view.pos.rows {
        return Err(Error::InvalidConfig(format!(
            "{} patches exceed positional capacity {}",
            patches.rows, view.pos.rows
        )));
    }
    let mut tokens = patches.matmul(view.embed_w);
    tokens.add_row_vec(view.embed_b);
    for r in 0..tokens.rows {
        let pos = view.pos.row(r);
        for (t, &pv) in tokens.row_mut(r).iter_mut().zip(pos) {
            *t += pv;
        }
    }
    Ok(tokens)
}

/// Project patches into model space and add learned positions.
pub fn embed_patches(patches: &Mat, params: &ParameterSet, cfg: &ModelConfig) -> Result<Mat> {
    let view = resolve_view(params, cfg)?;
    validate_view(&view, cfg)?;
    embed_with_view(patches, &view)
}

fn block_fwd(
    x: &Mat,
    bv: &BlockViewParams,
    cfg: &ModelConfig,
    block_idx: usize,
) -> Result<(Mat, BlockTrace)> {
    let (attn_out, attn_cache) = attention_fwd(x, &bv.attn, cfg.num_heads);
    let res1 = x.add(&attn_out);
    let (u, ln1_cache) = layer_norm_fwd(&res1, bv.ln1_gamma, bv.ln1_beta);

    // The residual flag governs the expert sublayer only; plain
    // feed-forward blocks always keep their residual.
    let (sub_out, sublayer, residual) = match (&bv.atm, &bv.ffn) {
        (Some(atm), _) => {
            let (o, cache) = atm_fwd(&u, atm, cfg);
            (o, SublayerTrace::Atm(cache), cfg.atm_residual)
        }
        (None, Some(ffn)) => {
            let mut f1 = u.matmul(ffn.w1);
            f1.add_row_vec(ffn.b1);
            let af = gelu_mat(&f1);
            let mut o = af.matmul(ffn.w2);
            o.add_row_vec(ffn.b2);
            (o, SublayerTrace::Ffn { f1, af }, true)
        }
        (None, None) => unreachable!("block without a sublayer"),
    };

    let res2 = if residual { u.add(&sub_out) } else { sub_out };
    let (out, ln2_cache) = layer_norm_fwd(&res2, bv.ln2_gamma, bv.ln2_beta);
    if !out.is_finite() {
        return Err(Error::NonFinite {
            context: "encoder_block".into(),
            block: block_idx,
        });
    }
    let trace = BlockTrace {
        input: x.clone(),
        attn_cache,
        attn_out,
        ln1_cache,
        u,
        sublayer,
        ln2_cache,
        out: out.clone(),
    };
    Ok((out, trace))
}

/// One encoder block applied to a token matrix.
pub fn encoder_block(
    tokens: &Mat,
    params: &ParameterSet,
    block: usize,
    cfg: &ModelConfig,
) -> Result<Mat> {
    let view = resolve_view(params, cfg)?;
    validate_view(&view, cfg)?;
    block_fwd(tokens, &view.blocks[block], cfg, block).map(|(o, _)| o)
}

/// Forward one block, then backpropagate `d_out` through it. Returns the
/// gradient with respect to the block input plus a parameter-gradient set
/// in which only this block's tensors are populated.
pub fn encoder_block_backward(
    tokens: &Mat,
    params: &ParameterSet,
    block: usize,
    cfg: &ModelConfig,
    d_out: &Mat,
) -> Result<(Mat, ParameterSet)> {
    let view = resolve_view(params, cfg)?;
    validate_view(&view, cfg)?;
    let (_, trace) = block_fwd(tokens, &view.blocks[block], cfg, block)?;
    let mut grads = params.zeros_like();
    let dx = block_bwd(&trace, &view.blocks[block], cfg, block, d_out, &mut grads)?;
    Ok((dx, grads))
}

/// Routing decision of block `block` for the given sublayer input.
pub fn atm_gate(
    x_bar: &Mat,
    params: &ParameterSet,
    block: usize,
    cfg: &ModelConfig,
) -> Result<GateOutput> {
    let view = resolve_view(params, cfg)?;
    let atm = view.blocks[block]
        .atm
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig(format!("block {block} has no expert sublayer")))?;
    Ok(gate_fwd(x_bar, atm, cfg).out)
}

/// Expert mixing and fusion under a fixed routing decision.
pub fn atm_forward(
    x_rep: &Mat,
    gate: &GateOutput,
    params: &ParameterSet,
    block: usize,
    cfg: &ModelConfig,
) -> Result<Mat> {
    let view = resolve_view(params, cfg)?;
    let atm = view.blocks[block]
        .atm
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig(format!("block {block} has no expert sublayer")))?;
    Ok(mix_and_fuse(x_rep, gate, atm, cfg))
}

/// Run the encoder over every channel. `mask` (if any) zeroes points after
/// normalization, so masked positions sit at the channel mean.
pub fn encode(
    series: &TimeSeries,
    mask: Option<&MaskMatrix>,
    params: &ParameterSet,
    cfg: &ModelConfig,
) -> Result<EncodeTrace> {
    cfg.validate()?;
    let view = resolve_view(params, cfg)?;
    validate_view(&view, cfg)?;

    let (normalized, stats) = revin_normalize(series, cfg.revin_epsilon);
    let masked = match mask {
        Some(m) => apply_mask(&normalized, m)?,
        None => normalized,
    };
    let num_patches = cfg.patch.num_patches(series.len())?;
    if num_patches > cfg.max_patches {
        return Err(Error::InvalidConfig(format!(
            "{num_patches} patches exceed max_patches {}",
            cfg.max_patches
        )));
    }

    let mut channels = Vec::with_capacity(series.channels());
    for c in 0..series.channels() {
        let col = masked.values.col(c);
        let patches = make_patches(&col, &cfg.patch)?;
        let tokens = embed_with_view(&patches, &view)?;
        let mut blocks = Vec::with_capacity(cfg.num_layers);
        let mut x = tokens.clone();
        for (b, bv) in view.blocks.iter().enumerate() {
            let (out, trace) = block_fwd(&x, bv, cfg, b)?;
            blocks.push(trace);
            x = out;
        }
        channels.push(ChannelTrace {
            patches,
            tokens,
            blocks,
        });
    }
    Ok(EncodeTrace {
        stats,
        mask: mask.cloned(),
        channels,
        input_len: series.len(),
        num_patches,
    })
}

/// Full masked-reconstruction forward pass: X̂ has the shape of the input
/// and lives in original units.
pub fn forward(
    series: &TimeSeries,
    mask: &MaskMatrix,
    params: &ParameterSet,
    cfg: &ModelConfig,
) -> Result<ForwardTrace> {
    let enc = encode(series, Some(mask), params, cfg)?;
    let view = resolve_view(params, cfg)?;
    let cover = patch_coverage(enc.input_len, &cfg.patch)?;

    let l = enc.input_len;
    let c = enc.channels.len();
    let mut x_hat_norm = Mat::zeros(l, c);
    let mut recon_patches = Vec::with_capacity(c);
    for (ci, ch) in enc.channels.iter().enumerate() {
        let mut recon = ch.x_rep().matmul(view.recon_w);
        recon.add_row_vec(view.recon_b);
        for p in 0..recon.rows {
            for i in 0..recon.cols {
                let t = p * cfg.patch.stride + i;
                if t < l {
                    *x_hat_norm.at_mut(t, ci) += recon.at(p, i);
                }
            }
        }
        recon_patches.push(recon);
    }
    for t in 0..l {
        let cv = cover[t] as f64;
        for ci in 0..c {
            *x_hat_norm.at_mut(t, ci) /= cv;
        }
    }
    if !x_hat_norm.is_finite() {
        return Err(Error::NonFinite {
            context: "reconstruction head".into(),
            block: cfg.num_layers,
        });
    }
    let norm_series = TimeSeries::new(
        x_hat_norm.clone(),
        series.resolution_seconds,
        series.domain_tag.clone(),
    );
    let x_hat = revin_denormalize(&norm_series, &enc.stats)?;
    Ok(ForwardTrace {
        encode: enc,
        recon_patches,
        x_hat_norm,
        x_hat,
    })
}

/// Masked-point mean squared error plus the alignment penalty
/// λ‖Θ_T − Θ̂_T‖² over the flagged parameter subset.
pub fn local_loss(
    x_hat: &Mat,
    x: &Mat,
    mask: &MaskMatrix,
    theta_t: &ParameterSet,
    theta_hat_t: &ParameterSet,
    lambda: f64,
) -> Result<f64> {
    if x_hat.rows != x.rows || x_hat.cols != x.cols {
        return Err(Error::ShapeMismatch {
            context: "local_loss".into(),
            expected: format!("{}x{}", x.rows, x.cols),
            actual: format!("{}x{}", x_hat.rows, x_hat.cols),
        });
    }
    if mask.rows != x.rows || mask.cols != x.cols {
        return Err(Error::ShapeMismatch {
            context: "local_loss mask".into(),
            expected: format!("{}x{}", x.rows, x.cols),
            actual: format!("{}x{}", mask.rows, mask.cols),
        });
    }
    let m = mask.masked_count();
    if m == 0 && lambda == 0.0 {
        return Err(Error::EmptyObjective);
    }
    let mut recon = 0.0;
    if m > 0 {
        for t in 0..x.rows {
            for c in 0..x.cols {
                if !mask.visible(t, c) {
                    let d = x_hat.at(t, c) - x.at(t, c);
                    recon += d * d;
                }
            }
        }
        recon /= m as f64;
    }
    let reg = if lambda != 0.0 {
        lambda * theta_t.atm_sq_distance(theta_hat_t)?
    } else {
        0.0
    };
    Ok(recon + reg)
}

fn acc_mat(grads: &mut ParameterSet, name: &str, m: &Mat) -> Result<()> {
    grads.get_mut(name)?.add_assign(m);
    Ok(())
}

fn acc_vec(grads: &mut ParameterSet, name: &str, v: &[f64]) -> Result<()> {
    let g = grads.get_mut(name)?;
    for (a, &b) in g.data.iter_mut().zip(v) {
        *a += b;
    }
    Ok(())
}

fn acc_attn(grads: &mut ParameterSet, b: usize, g: &AttnGrads) -> Result<()> {
    acc_mat(grads, &format!("block{b}.attn.wq"), &g.wq)?;
    acc_mat(grads, &format!("block{b}.attn.wk"), &g.wk)?;
    acc_mat(grads, &format!("block{b}.attn.wv"), &g.wv)?;
    acc_mat(grads, &format!("block{b}.attn.wo"), &g.wo)?;
    acc_vec(grads, &format!("block{b}.attn.bq"), &g.bq)?;
    acc_vec(grads, &format!("block{b}.attn.bk"), &g.bk)?;
    acc_vec(grads, &format!("block{b}.attn.bv"), &g.bv)?;
    acc_vec(grads, &format!("block{b}.attn.bo"), &g.bo)?;
    Ok(())
}

fn acc_atm(grads: &mut ParameterSet, b: usize, g: &AtmGrads) -> Result<()> {
    grads.get_mut(&format!("block{b}.atm.wt"))?.data[0] += g.wt;
    grads.get_mut(&format!("block{b}.atm.ws"))?.data[0] += g.ws;
    acc_mat(grads, &format!("block{b}.atm.gate.w1"), &g.gate_w1)?;
    acc_vec(grads, &format!("block{b}.atm.gate.b1"), &g.gate_b1)?;
    acc_mat(grads, &format!("block{b}.atm.gate.w2"), &g.gate_w2)?;
    acc_vec(grads, &format!("block{b}.atm.gate.b2"), &g.gate_b2)?;
    for (e, (w, bias)) in g.experts.iter().enumerate() {
        acc_mat(grads, &format!("block{b}.atm.expert{e}.w"), w)?;
        acc_vec(grads, &format!("block{b}.atm.expert{e}.b"), bias)?;
    }
    acc_mat(grads, &format!("block{b}.atm.fusion.w1"), &g.fusion_w1)?;
    acc_vec(grads, &format!("block{b}.atm.fusion.b1"), &g.fusion_b1)?;
    acc_mat(grads, &format!("block{b}.atm.fusion.w2"), &g.fusion_w2)?;
    acc_vec(grads, &format!("block{b}.atm.fusion.b2"), &g.fusion_b2)?;
    Ok(())
}

fn block_bwd(
    trace: &BlockTrace,
    bv: &BlockViewParams,
    cfg: &ModelConfig,
    b: usize,
    d_out: &Mat,
    grads: &mut ParameterSet,
) -> Result<Mat> {
    let d = trace.input.cols;
    let mut d_ln2_gamma = vec![0.0; d];
    let mut d_ln2_beta = vec![0.0; d];
    let d_res2 = layer_norm_bwd(
        &trace.ln2_cache,
        bv.ln2_gamma,
        d_out,
        &mut d_ln2_gamma,
        &mut d_ln2_beta,
    );
    acc_vec(grads, &format!("block{b}.ln2.gamma"), &d_ln2_gamma)?;
    acc_vec(grads, &format!("block{b}.ln2.beta"), &d_ln2_beta)?;

    let mut du = if cfg.atm_residual {
        d_res2.clone()
    } else {
        Mat::zeros(d_res2.rows, d_res2.cols)
    };
    match (&trace.sublayer, &bv.atm, &bv.ffn) {
        (SublayerTrace::Atm(cache), Some(atm), _) => {
            let (du_atm, g) = atm_bwd(&trace.u, cache, atm, cfg, &d_res2);
            du.add_assign(&du_atm);
            acc_atm(grads, b, &g)?;
        }
        (SublayerTrace::Ffn { f1, af }, _, Some(ffn)) => {
            let w2_g = af.matmul_tn(&d_res2);
            let b2_g = d_res2.col_sums();
            let d_af = d_res2.matmul_nt(ffn.w2);
            let d_f1 = gelu_backward(f1, &d_af);
            let w1_g = trace.u.matmul_tn(&d_f1);
            let b1_g = d_f1.col_sums();
            // plain FFN blocks always carry the residual
            du = d_res2.clone();
            du.add_assign(&d_f1.matmul_nt(ffn.w1));
            acc_mat(grads, &format!("block{b}.ffn.w1"), &w1_g)?;
            acc_vec(grads, &format!("block{b}.ffn.b1"), &b1_g)?;
            acc_mat(grads, &format!("block{b}.ffn.w2"), &w2_g)?;
            acc_vec(grads, &format!("block{b}.ffn.b2"), &b2_g)?;
        }
        _ => unreachable!("trace and view disagree on sublayer kind"),
    }

    let mut d_ln1_gamma = vec![0.0; d];
    let mut d_ln1_beta = vec![0.0; d];
    let d_res1 = layer_norm_bwd(
        &trace.ln1_cache,
        bv.ln1_gamma,
        &du,
        &mut d_ln1_gamma,
        &mut d_ln1_beta,
    );
    acc_vec(grads, &format!("block{b}.ln1.gamma"), &d_ln1_gamma)?;
    acc_vec(grads, &format!("block{b}.ln1.beta"), &d_ln1_beta)?;

    let (dx_attn, attn_g) = attention_bwd(
        &trace.input,
        &trace.attn_cache,
        &bv.attn,
        cfg.num_heads,
        &d_res1,
    );
    acc_attn(grads, b, &attn_g)?;
    let mut dx = d_res1;
    dx.add_assign(&dx_attn);
    Ok(dx)
}

fn channel_bwd(
    ch: &ChannelTrace,
    view: &NetView,
    cfg: &ModelConfig,
    d_xrep: Mat,
    grads: &mut ParameterSet,
) -> Result<()> {
    let mut d = d_xrep;
    for b in (0..ch.blocks.len()).rev() {
        d = block_bwd(&ch.blocks[b], &view.blocks[b], cfg, b, &d, grads)?;
    }
    // Patch embedding backward.
    acc_mat(grads, "embed.w", &ch.patches.matmul_tn(&d))?;
    acc_vec(grads, "embed.b", &d.col_sums())?;
    let pos_g = grads.get_mut("embed.pos")?;
    for r in 0..d.rows {
        for (pg, &dv) in pos_g.row_mut(r).iter_mut().zip(d.row(r)) {
            *pg += dv;
        }
    }
    Ok(())
}

/// Gradients of the encoder parameters given dL/d(x_rep) per channel.
/// Reconstruction-head gradients stay zero.
pub fn encode_backward(
    trace: &EncodeTrace,
    d_xrep: &[Mat],
    params: &ParameterSet,
    cfg: &ModelConfig,
) -> Result<ParameterSet> {
    let view = resolve_view(params, cfg)?;
    let mut grads = params.zeros_like();
    for (ch, d) in trace.channels.iter().zip(d_xrep) {
        channel_bwd(ch, &view, cfg, d.clone(), &mut grads)?;
    }
    Ok(grads)
}

/// Exact reverse-mode gradients of [`local_loss`] through the full model.
///
/// `theta_hat_t` is the broadcast global subset the alignment term pulls
/// toward; pass `None` to drop the term regardless of `lambda`.
pub fn backward(
    trace: &ForwardTrace,
    target: &TimeSeries,
    params: &ParameterSet,
    cfg: &ModelConfig,
    theta_hat_t: Option<&ParameterSet>,
    lambda: f64,
) -> Result<ParameterSet> {
    let view = resolve_view(params, cfg)?;
    let mut grads = params.zeros_like();
    let enc = &trace.encode;
    let mask = enc
        .mask
        .as_ref()
        .expect("forward trace always carries a mask");
    let m = mask.masked_count();

    if m > 0 {
        let l = enc.input_len;
        let cover = patch_coverage(l, &cfg.patch)?;
        let scale = 2.0 / m as f64;
        for (ci, ch) in enc.channels.iter().enumerate() {
            let sigma = enc.stats.std[ci] + enc.stats.epsilon;
            // d loss / d recon_patches for this channel.
            let recon = &trace.recon_patches[ci];
            let mut d_recon = Mat::zeros(recon.rows, recon.cols);
            for p in 0..recon.rows {
                for i in 0..recon.cols {
                    let t = p * cfg.patch.stride + i;
                    if t < l && !mask.visible(t, ci) {
                        let diff = trace.x_hat.values.at(t, ci) - target.values.at(t, ci);
                        *d_recon.at_mut(p, i) = scale * diff * sigma / cover[t] as f64;
                    }
                }
            }
            acc_mat(&mut grads, "recon.w", &ch.x_rep().matmul_tn(&d_recon))?;
            acc_vec(&mut grads, "recon.b", &d_recon.col_sums())?;
            let d_xrep = d_recon.matmul_nt(view.recon_w);
            channel_bwd(ch, &view, cfg, d_xrep, &mut grads)?;
        }
    } else if lambda == 0.0 {
        return Err(Error::EmptyObjective);
    }

    if lambda != 0.0 {
        if let Some(hat) = theta_hat_t {
            for name in params.atm_names() {
                let local = params.get(name)?;
                let global = hat.get(name)?;
                let g = grads.get_mut(name)?;
                for ((gv, lv), hv) in g.data.iter_mut().zip(&local.data).zip(&global.data) {
                    *gv += 2.0 * lambda * (lv - hv);
                }
            }
        }
    }
    Ok(grads)
}

/// Forward, loss, and gradients in one call.
pub fn loss_and_grads(
    series: &TimeSeries,
    mask: &MaskMatrix,
    params: &ParameterSet,
    cfg: &ModelConfig,
    theta_hat_t: Option<&ParameterSet>,
    lambda: f64,
) -> Result<(f64, ParameterSet)> {
    let trace = forward(series, mask, params, cfg)?;
    let lambda_eff = if theta_hat_t.is_some() { lambda } else { 0.0 };
    let loss = local_loss(
        &trace.x_hat.values,
        &series.values,
        mask,
        params,
        theta_hat_t.unwrap_or(params),
        lambda_eff,
    )?;
    let grads = backward(&trace, series, params, cfg, theta_hat_t, lambda_eff)?;
    Ok((loss, grads))
}

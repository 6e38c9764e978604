//! The differentiable local model: patch embedding, encoder blocks with a
//! trend-aware expert sublayer, reconstruction head, and exact gradients.

pub mod atm;
pub mod layers;
mod net;
mod params;
mod sgd;

pub use atm::{AtmView, GateOutput};
pub use net::{
    atm_gate, atm_forward, backward, embed_patches, encode, encode_backward, encoder_block,
    encoder_block_backward, forward, local_loss, loss_and_grads, BlockTrace, ChannelTrace,
    EncodeTrace, ForwardTrace,
};
pub use params::ParameterSet;
pub use sgd::Sgd;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::PatchConfig;
use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::seed::stream_rng;

fn default_num_experts() -> usize {
    4
}
fn default_top_k() -> usize {
    3
}
fn default_kernel() -> usize {
    25
}
fn default_max_patches() -> usize {
    128
}
fn default_revin_eps() -> f64 {
    1e-5
}
fn default_true() -> bool {
    true
}

/// Architecture hyperparameters for one model replica.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub patch: PatchConfig,
    #[serde(default = "default_num_experts")]
    pub num_experts: usize,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    pub ffn_hidden: usize,
    #[serde(default = "default_kernel")]
    pub decomposition_kernel: usize,
    /// Positional-table capacity; inputs may not exceed this many patches.
    #[serde(default = "default_max_patches")]
    pub max_patches: usize,
    #[serde(default = "default_revin_eps")]
    pub revin_epsilon: f64,
    /// Residual connection around the expert sublayer.
    #[serde(default = "default_true")]
    pub atm_residual: bool,
    /// Place the expert sublayer only in the final block; earlier blocks
    /// fall back to a plain feed-forward sublayer.
    #[serde(default)]
    pub atm_final_block_only: bool,
    /// Give expert i an average-pool-then-upsample factor of {1,2,4,8}.
    #[serde(default)]
    pub expert_pooling: bool,
    /// Restrict routing to these expert indices (ablation knob).
    #[serde(default)]
    pub expert_subset: Option<Vec<usize>>,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.patch.validate()?;
        if self.d_model == 0 || self.num_layers == 0 || self.num_heads == 0 {
            return Err(Error::InvalidConfig(
                "d_model, num_layers, num_heads must be positive".into(),
            ));
        }
        if self.d_model % self.num_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "num_heads ({}) must divide d_model ({})",
                self.num_heads, self.d_model
            )));
        }
        if self.num_experts == 0 || self.ffn_hidden == 0 {
            return Err(Error::InvalidConfig(
                "num_experts and ffn_hidden must be positive".into(),
            ));
        }
        if self.top_k == 0 || self.top_k > self.num_experts {
            return Err(Error::InvalidConfig(format!(
                "top_k ({}) must satisfy 1 <= top_k <= num_experts ({})",
                self.top_k, self.num_experts
            )));
        }
        if self.decomposition_kernel % 2 == 0 {
            return Err(Error::InvalidConfig(format!(
                "decomposition_kernel must be odd, got {}",
                self.decomposition_kernel
            )));
        }
        if self.max_patches < 2 {
            return Err(Error::InvalidConfig("max_patches must be >= 2".into()));
        }
        if let Some(subset) = &self.expert_subset {
            if subset.is_empty() {
                return Err(Error::InvalidConfig("expert_subset may not be empty".into()));
            }
            let mut sorted = subset.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != subset.len() || *sorted.last().unwrap() >= self.num_experts {
                return Err(Error::InvalidConfig(format!(
                    "expert_subset must be distinct indices < num_experts ({})",
                    self.num_experts
                )));
            }
        }
        Ok(())
    }

    pub fn gate_hidden(&self) -> usize {
        (self.d_model / 2).max(1)
    }

    /// Whether block `b` carries the trend-aware expert sublayer.
    pub fn block_has_atm(&self, b: usize) -> bool {
        !self.atm_final_block_only || b + 1 == self.num_layers
    }
}

fn fan_in_uniform(rng: &mut impl Rng, rows: usize, cols: usize, fan_in: usize) -> Mat {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    Mat::from_vec(rows, cols, data)
}

/// Fresh parameters for the config, deterministic per seed.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> ParameterSet {
    let mut rng = stream_rng(seed, "param_init", &[]);
    let d = cfg.d_model;
    let lp = cfg.patch.patch_length;
    let gh = cfg.gate_hidden();
    let fh = cfg.ffn_hidden;
    let mut p = ParameterSet::new();

    p.push("embed.w", fan_in_uniform(&mut rng, lp, d, lp), false);
    p.push("embed.b", Mat::zeros(1, d), false);
    p.push("embed.pos", Mat::zeros(cfg.max_patches, d), false);

    for b in 0..cfg.num_layers {
        for n in ["wq", "wk", "wv", "wo"] {
            p.push(
                format!("block{b}.attn.{n}"),
                fan_in_uniform(&mut rng, d, d, d),
                false,
            );
        }
        for n in ["bq", "bk", "bv", "bo"] {
            p.push(format!("block{b}.attn.{n}"), Mat::zeros(1, d), false);
        }
        p.push(format!("block{b}.ln1.gamma"), Mat::from_vec(1, d, vec![1.0; d]), false);
        p.push(format!("block{b}.ln1.beta"), Mat::zeros(1, d), false);

        if cfg.block_has_atm(b) {
            p.push(format!("block{b}.atm.wt"), Mat::from_vec(1, 1, vec![0.5]), true);
            p.push(format!("block{b}.atm.ws"), Mat::from_vec(1, 1, vec![0.5]), true);
            p.push(
                format!("block{b}.atm.gate.w1"),
                fan_in_uniform(&mut rng, d, gh, d),
                true,
            );
            p.push(format!("block{b}.atm.gate.b1"), Mat::zeros(1, gh), true);
            p.push(
                format!("block{b}.atm.gate.w2"),
                fan_in_uniform(&mut rng, gh, cfg.num_experts, gh),
                true,
            );
            p.push(
                format!("block{b}.atm.gate.b2"),
                Mat::zeros(1, cfg.num_experts),
                true,
            );
            for e in 0..cfg.num_experts {
                p.push(
                    format!("block{b}.atm.expert{e}.w"),
                    fan_in_uniform(&mut rng, d, d, d),
                    true,
                );
                p.push(format!("block{b}.atm.expert{e}.b"), Mat::zeros(1, d), true);
            }
            p.push(
                format!("block{b}.atm.fusion.w1"),
                fan_in_uniform(&mut rng, d, fh, d),
                true,
            );
            p.push(format!("block{b}.atm.fusion.b1"), Mat::zeros(1, fh), true);
            p.push(
                format!("block{b}.atm.fusion.w2"),
                fan_in_uniform(&mut rng, fh, d, fh),
                true,
            );
            p.push(format!("block{b}.atm.fusion.b2"), Mat::zeros(1, d), true);
        } else {
            p.push(
                format!("block{b}.ffn.w1"),
                fan_in_uniform(&mut rng, d, fh, d),
                false,
            );
            p.push(format!("block{b}.ffn.b1"), Mat::zeros(1, fh), false);
            p.push(
                format!("block{b}.ffn.w2"),
                fan_in_uniform(&mut rng, fh, d, fh),
                false,
            );
            p.push(format!("block{b}.ffn.b2"), Mat::zeros(1, d), false);
        }
        p.push(format!("block{b}.ln2.gamma"), Mat::from_vec(1, d, vec![1.0; d]), false);
        p.push(format!("block{b}.ln2.beta"), Mat::zeros(1, d), false);
    }

    p.push("recon.w", fan_in_uniform(&mut rng, d, lp, d), false);
    p.push("recon.b", Mat::zeros(1, lp), false);
    p
}

/// Check that a parameter set structurally matches a config.
pub fn check_params(params: &ParameterSet, cfg: &ModelConfig) -> Result<()> {
    let reference = init_params(cfg, 0);
    if !reference.same_structure(params) {
        let ref_names: Vec<&str> = reference.names().collect();
        let got_names: Vec<&str> = params.names().collect();
        for (want, got) in ref_names.iter().zip(&got_names) {
            if want != got {
                return Err(Error::ShapeMismatch {
                    context: "parameter structure".into(),
                    expected: (*want).into(),
                    actual: (*got).into(),
                });
            }
        }
        for (name, m) in reference.iter() {
            if let Ok(got) = params.get(name) {
                if got.rows != m.rows || got.cols != m.cols {
                    return Err(Error::ShapeMismatch {
                        context: format!("tensor `{name}`"),
                        expected: format!("{}x{}", m.rows, m.cols),
                        actual: format!("{}x{}", got.rows, got.cols),
                    });
                }
            }
        }
        return Err(Error::ShapeMismatch {
            context: "parameter structure".into(),
            expected: format!("{} tensors", reference.len()),
            actual: format!("{} tensors", params.len()),
        });
    }
    Ok(())
}

pub(crate) struct FfnView<'a> {
    pub w1: &'a Mat,
    pub b1: &'a [f64],
    pub w2: &'a Mat,
    pub b2: &'a [f64],
}

pub(crate) struct BlockViewParams<'a> {
    pub attn: layers::AttnParams<'a>,
    pub ln1_gamma: &'a [f64],
    pub ln1_beta: &'a [f64],
    pub atm: Option<AtmView<'a>>,
    pub ffn: Option<FfnView<'a>>,
    pub ln2_gamma: &'a [f64],
    pub ln2_beta: &'a [f64],
}

pub(crate) struct NetView<'a> {
    pub embed_w: &'a Mat,
    pub embed_b: &'a [f64],
    pub pos: &'a Mat,
    pub blocks: Vec<BlockViewParams<'a>>,
    pub recon_w: &'a Mat,
    pub recon_b: &'a [f64],
}

pub(crate) fn resolve_view<'a>(
    params: &'a ParameterSet,
    cfg: &ModelConfig,
) -> Result<NetView<'a>> {
    let vecf = |name: &str| -> Result<&'a [f64]> { Ok(params.get(name)?.row(0)) };
    let mut blocks = Vec::with_capacity(cfg.num_layers);
    for b in 0..cfg.num_layers {
        let attn = layers::AttnParams {
            wq: params.get(&format!("block{b}.attn.wq"))?,
            wk: params.get(&format!("block{b}.attn.wk"))?,
            wv: params.get(&format!("block{b}.attn.wv"))?,
            wo: params.get(&format!("block{b}.attn.wo"))?,
            bq: vecf(&format!("block{b}.attn.bq"))?,
            bk: vecf(&format!("block{b}.attn.bk"))?,
            bv: vecf(&format!("block{b}.attn.bv"))?,
            bo: vecf(&format!("block{b}.attn.bo"))?,
        };
        let (atm, ffn) = if cfg.block_has_atm(b) {
            let experts = (0..cfg.num_experts)
                .map(|e| {
                    Ok((
                        params.get(&format!("block{b}.atm.expert{e}.w"))?,
                        params.get(&format!("block{b}.atm.expert{e}.b"))?.row(0),
                    ))
                })
                .collect::<Result<Vec<_>>>()?;
            (
                Some(AtmView {
                    wt: params.get(&format!("block{b}.atm.wt"))?.data[0],
                    ws: params.get(&format!("block{b}.atm.ws"))?.data[0],
                    gate_w1: params.get(&format!("block{b}.atm.gate.w1"))?,
                    gate_b1: vecf(&format!("block{b}.atm.gate.b1"))?,
                    gate_w2: params.get(&format!("block{b}.atm.gate.w2"))?,
                    gate_b2: vecf(&format!("block{b}.atm.gate.b2"))?,
                    experts,
                    fusion_w1: params.get(&format!("block{b}.atm.fusion.w1"))?,
                    fusion_b1: vecf(&format!("block{b}.atm.fusion.b1"))?,
                    fusion_w2: params.get(&format!("block{b}.atm.fusion.w2"))?,
                    fusion_b2: vecf(&format!("block{b}.atm.fusion.b2"))?,
                }),
                None,
            )
        } else {
            (
                None,
                Some(FfnView {
                    w1: params.get(&format!("block{b}.ffn.w1"))?,
                    b1: vecf(&format!("block{b}.ffn.b1"))?,
                    w2: params.get(&format!("block{b}.ffn.w2"))?,
                    b2: vecf(&format!("block{b}.ffn.b2"))?,
                }),
            )
        };
        blocks.push(BlockViewParams {
            attn,
            ln1_gamma: vecf(&format!("block{b}.ln1.gamma"))?,
            ln1_beta: vecf(&format!("block{b}.ln1.beta"))?,
            atm,
            ffn,
            ln2_gamma: vecf(&format!("block{b}.ln2.gamma"))?,
            ln2_beta: vecf(&format!("block{b}.ln2.beta"))?,
        });
    }
    Ok(NetView {
        embed_w: params.get("embed.w")?,
        embed_b: vecf("embed.b")?,
        pos: params.get("embed.pos")?,
        blocks,
        recon_w: params.get("recon.w")?,
        recon_b: vecf("recon.b")?,
    })
}

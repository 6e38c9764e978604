//! Finite-difference gradient verification utilities.
//!
//! The numeric side only ever calls the forward pass and the loss, so it
//! stays independent of the reverse-mode code it checks.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::{sample_mask, MaskMatrix, MaskSpec, PatchConfig, TimeSeries};
use crate::error::Result;
use crate::mat::Mat;
use crate::model::{backward, forward, local_loss, ModelConfig, ParameterSet};
use crate::seed::rng_from_seed;

/// Relative error with an absolute floor for near-zero pairs.
pub fn rel_error(a: f64, b: f64) -> f64 {
    let diff = (a - b).abs();
    if diff < 1e-9 {
        return 0.0;
    }
    diff / (a.abs() + b.abs()).max(1e-9)
}

/// Loss of the full model at the given parameters.
pub fn loss_at(
    series: &TimeSeries,
    mask: &MaskMatrix,
    params: &ParameterSet,
    cfg: &ModelConfig,
    theta_hat: &ParameterSet,
    lambda: f64,
) -> Result<f64> {
    let trace = forward(series, mask, params, cfg)?;
    local_loss(
        &trace.x_hat.values,
        &series.values,
        mask,
        params,
        theta_hat,
        lambda,
    )
}

/// Central finite difference of the loss in one parameter coordinate.
pub fn fd_param_gradient(
    series: &TimeSeries,
    mask: &MaskMatrix,
    params: &ParameterSet,
    cfg: &ModelConfig,
    theta_hat: &ParameterSet,
    lambda: f64,
    tensor: &str,
    index: usize,
    h: f64,
) -> Result<f64> {
    let mut plus = params.clone();
    plus.get_mut(tensor)?.data[index] += h;
    let mut minus = params.clone();
    minus.get_mut(tensor)?.data[index] -= h;
    let lp = loss_at(series, mask, &plus, cfg, theta_hat, lambda)?;
    let lm = loss_at(series, mask, &minus, cfg, theta_hat, lambda)?;
    Ok((lp - lm) / (2.0 * h))
}

/// A random architecture small enough for exhaustive per-coordinate
/// finite differences. Returns the config plus an input length and channel
/// count that keep the patch count at most 4.
pub fn random_tiny_config(rng: &mut ChaCha8Rng) -> (ModelConfig, usize, usize) {
    let d_model = *[2usize, 4, 6, 8].get(rng.gen_range(0..4)).unwrap();
    let divisors: Vec<usize> = (1..=d_model).filter(|h| d_model % h == 0 && *h <= 4).collect();
    let num_heads = divisors[rng.gen_range(0..divisors.len())];
    let patch_length = rng.gen_range(2..=4usize);
    let stride = rng.gen_range(1..=patch_length);
    let extra = rng.gen_range(0..=2usize) * stride;
    let t = patch_length + extra; // P = extra/stride + 2 <= 4
    let num_layers = rng.gen_range(1..=2usize);
    let num_experts = rng.gen_range(2..=4usize);
    let top_k = rng.gen_range(1..=num_experts);
    let expert_subset = if rng.gen_bool(0.25) {
        let size = rng.gen_range(1..=num_experts);
        let mut all: Vec<usize> = (0..num_experts).collect();
        for i in (1..all.len()).rev() {
            let j = rng.gen_range(0..=i);
            all.swap(i, j);
        }
        let mut s = all[..size].to_vec();
        s.sort_unstable();
        Some(s)
    } else {
        None
    };
    let cfg = ModelConfig {
        d_model,
        num_layers,
        num_heads,
        patch: PatchConfig {
            patch_length,
            stride,
        },
        num_experts,
        top_k,
        ffn_hidden: rng.gen_range(2..=6usize),
        decomposition_kernel: *[1usize, 3, 5].get(rng.gen_range(0..3)).unwrap(),
        max_patches: 8,
        revin_epsilon: 1e-5,
        atm_residual: rng.gen_bool(0.8),
        atm_final_block_only: num_layers == 2 && rng.gen_bool(0.3),
        expert_pooling: rng.gen_bool(0.3),
        expert_subset,
    };
    let channels = rng.gen_range(1..=2usize);
    (cfg, t, channels)
}

/// Add uniform noise to every tensor so no gradient path sits at a
/// symmetric zero.
pub fn jitter_params(params: &mut ParameterSet, rng: &mut ChaCha8Rng, scale: f64) {
    for (_, m) in params.iter_mut() {
        for v in m.data.iter_mut() {
            *v += rng.gen_range(-scale..scale);
        }
    }
}

pub fn random_series(rng: &mut ChaCha8Rng, t: usize, channels: usize) -> TimeSeries {
    let data = (0..t * channels).map(|_| rng.gen_range(-2.0..2.0)).collect();
    TimeSeries::new(Mat::from_vec(t, channels, data), 60, "gradcheck")
}

/// A mask guaranteed to have at least one masked point, deterministically.
pub fn mask_with_masked_points(t: usize, channels: usize, seed: u64) -> MaskMatrix {
    let spec = MaskSpec {
        mean_masked_length: 2,
        mask_ratio: 0.4,
    };
    let mut s = seed;
    loop {
        let m = sample_mask(t, channels, &spec, s);
        if m.masked_count() >= 1 {
            return m;
        }
        s = s.wrapping_add(1);
    }
}

/// Compare every analytic parameter gradient against central finite
/// differences for one random configuration. Returns the maximum relative
/// error and the number of coordinates checked.
pub fn check_config_gradients(seed: u64, lambda: f64) -> Result<(f64, usize)> {
    let mut rng = rng_from_seed(seed);
    let (cfg, t, channels) = random_tiny_config(&mut rng);
    let mut params = crate::model::init_params(&cfg, seed);
    jitter_params(&mut params, &mut rng, 0.3);
    let mut hat_src = params.clone();
    jitter_params(&mut hat_src, &mut rng, 0.3);
    let theta_hat = hat_src.atm_subset();
    let series = random_series(&mut rng, t, channels);
    let mask = mask_with_masked_points(t, channels, seed ^ 0x5eed);

    let trace = forward(&series, &mask, &params, &cfg)?;
    let analytic = backward(&trace, &series, &params, &cfg, Some(&theta_hat), lambda)?;

    let h = 1e-5;
    let mut max_err = 0.0f64;
    let mut checked = 0usize;
    let names: Vec<String> = params.names().map(String::from).collect();
    for name in &names {
        let len = params.get(name)?.data.len();
        for ix in 0..len {
            let fd = fd_param_gradient(
                &series, &mask, &params, &cfg, &theta_hat, lambda, name, ix, h,
            )?;
            let an = analytic.get(name)?.data[ix];
            let err = rel_error(an, fd);
            if err > max_err {
                max_err = err;
            }
            checked += 1;
        }
    }
    Ok((max_err, checked))
}

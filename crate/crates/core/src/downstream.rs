//! Unified downstream adaptation: a shared per-channel head (layer norm +
//! two-layer perceptron) on top of the pretrained encoder, plus the
//! forecasting, imputation, and anomaly-detection pipelines and metrics.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{revin_normalize, MaskMatrix, TimeSeries};
use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::model::layers::{gelu_backward, gelu_mat, layer_norm_bwd, layer_norm_fwd, LayerNormCache};
use crate::model::{
    check_params, encode, encode_backward, EncodeTrace, ModelConfig, ParameterSet, Sgd,
};
use crate::seed::{derive_seed, rng_from_seed, stream_rng};

fn default_lookback() -> usize {
    512
}

/// Which downstream task to run, with its task-specific knob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum Task {
    Forecast { horizon: usize },
    Impute { mask_ratio: f64 },
    Detect { anomaly_quantile: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    #[serde(flatten)]
    pub task: Task,
    #[serde(default)]
    pub freeze_encoder: bool,
    #[serde(default = "default_lookback")]
    pub lookback: usize,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.lookback == 0 {
            return Err(Error::InvalidConfig("lookback must be positive".into()));
        }
        match self.task {
            Task::Forecast { horizon: 0 } => {
                Err(Error::InvalidConfig("horizon must be positive".into()))
            }
            Task::Impute { mask_ratio } if !(mask_ratio > 0.0 && mask_ratio < 1.0) => Err(
                Error::InvalidConfig(format!("mask_ratio must be in (0,1), got {mask_ratio}")),
            ),
            Task::Detect { anomaly_quantile } if !(anomaly_quantile > 0.0 && anomaly_quantile < 1.0) => {
                Err(Error::InvalidConfig(format!(
                    "anomaly_quantile must be in (0,1), got {anomaly_quantile}"
                )))
            }
            _ => Ok(()),
        }
    }

    /// Per-channel output length of the adaptation head.
    pub fn head_out_len(&self) -> usize {
        match self.task {
            Task::Forecast { horizon } => horizon,
            Task::Impute { .. } | Task::Detect { .. } => self.lookback,
        }
    }
}

/// Pretrained encoder plus a freshly initialized adaptation head.
/// The head is shared across channels; the composite output dimension is
/// `head_out_len * channels`.
#[derive(Debug, Clone)]
pub struct CompositeModel {
    pub encoder: ParameterSet,
    pub head: ParameterSet,
    pub model_cfg: ModelConfig,
    pub spec: TaskSpec,
}

impl CompositeModel {
    /// Total output dimension for a dataset with the given channel count.
    pub fn output_dim(&self, channels: usize) -> usize {
        self.spec.head_out_len() * channels
    }
}

/// Attach a fresh head to pretrained encoder weights.
pub fn attach_head(
    pretrained: &ParameterSet,
    cfg: &ModelConfig,
    spec: &TaskSpec,
    seed: u64,
) -> Result<CompositeModel> {
    cfg.validate()?;
    spec.validate()?;
    check_params(pretrained, cfg)?;
    let p = cfg.patch.num_patches(spec.lookback)?;
    if p > cfg.max_patches {
        return Err(Error::InvalidConfig(format!(
            "lookback {} needs {p} patches, above max_patches {}",
            spec.lookback, cfg.max_patches
        )));
    }
    let flat = p * cfg.d_model;
    let hidden = 2 * cfg.d_model;
    let out = spec.head_out_len();
    let mut rng = stream_rng(seed, "head_init", &[]);
    let mut fan_in = |rows: usize, cols: usize, fi: usize| {
        let bound = 1.0 / (fi as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
        Mat::from_vec(rows, cols, data)
    };
    let mut head = ParameterSet::new();
    head.push("head.ln.gamma", Mat::from_vec(1, flat, vec![1.0; flat]), false);
    head.push("head.ln.beta", Mat::zeros(1, flat), false);
    let w1 = fan_in(flat, hidden, flat);
    head.push("head.fc1.w", w1, false);
    head.push("head.fc1.b", Mat::zeros(1, hidden), false);
    let w2 = fan_in(hidden, out, hidden);
    head.push("head.fc2.w", w2, false);
    head.push("head.fc2.b", Mat::zeros(1, out), false);
    Ok(CompositeModel {
        encoder: pretrained.clone(),
        head,
        model_cfg: cfg.clone(),
        spec: spec.clone(),
    })
}

struct HeadCache {
    z: Mat,
    ln: LayerNormCache,
    zn: Mat,
    h1: Mat,
    a1: Mat,
}

fn head_forward(head: &ParameterSet, x_rep: &Mat) -> Result<(Vec<f64>, HeadCache)> {
    let flat = x_rep.rows * x_rep.cols;
    let z = Mat::from_vec(1, flat, x_rep.data.clone());
    let gamma = head.get("head.ln.gamma")?.row(0);
    let beta = head.get("head.ln.beta")?.row(0);
    if gamma.len() != flat {
        return Err(Error::ShapeMismatch {
            context: "adaptation head".into(),
            expected: format!("{} flattened features", gamma.len()),
            actual: format!("{flat}"),
        });
    }
    let (zn, ln) = layer_norm_fwd(&z, gamma, beta);
    let mut h1 = zn.matmul(head.get("head.fc1.w")?);
    h1.add_row_vec(head.get("head.fc1.b")?.row(0));
    let a1 = gelu_mat(&h1);
    let mut out = a1.matmul(head.get("head.fc2.w")?);
    out.add_row_vec(head.get("head.fc2.b")?.row(0));
    Ok((out.data.clone(), HeadCache { z, ln, zn, h1, a1 }))
}

/// Returns d(x_rep) and accumulates head gradients.
fn head_backward(
    head: &ParameterSet,
    cache: &HeadCache,
    d_out: &[f64],
    grads: &mut ParameterSet,
    rep_rows: usize,
    rep_cols: usize,
) -> Result<Mat> {
    let d_out_m = Mat::from_vec(1, d_out.len(), d_out.to_vec());
    grads
        .get_mut("head.fc2.w")?
        .add_assign(&cache.a1.matmul_tn(&d_out_m));
    for (g, v) in grads
        .get_mut("head.fc2.b")?
        .data
        .iter_mut()
        .zip(&d_out_m.data)
    {
        *g += v;
    }
    let d_a1 = d_out_m.matmul_nt(head.get("head.fc2.w")?);
    let d_h1 = gelu_backward(&cache.h1, &d_a1);
    grads
        .get_mut("head.fc1.w")?
        .add_assign(&cache.zn.matmul_tn(&d_h1));
    for (g, v) in grads
        .get_mut("head.fc1.b")?
        .data
        .iter_mut()
        .zip(&d_h1.data)
    {
        *g += v;
    }
    let d_zn = d_h1.matmul_nt(head.get("head.fc1.w")?);
    let flat = cache.z.cols;
    let mut d_gamma = vec![0.0; flat];
    let mut d_beta = vec![0.0; flat];
    let d_z = layer_norm_bwd(
        &cache.ln,
        head.get("head.ln.gamma")?.row(0),
        &d_zn,
        &mut d_gamma,
        &mut d_beta,
    );
    for (g, v) in grads.get_mut("head.ln.gamma")?.data.iter_mut().zip(&d_gamma) {
        *g += v;
    }
    for (g, v) in grads.get_mut("head.ln.beta")?.data.iter_mut().zip(&d_beta) {
        *g += v;
    }
    Ok(Mat::from_vec(rep_rows, rep_cols, d_z.data))
}

/// z-score a series by its own per-channel population statistics.
pub fn standardize(series: &TimeSeries) -> TimeSeries {
    revin_normalize(series, 1e-9).0
}

/// Bernoulli point mask: each (t, c) masked independently at `ratio`.
pub fn uniform_point_mask(length: usize, channels: usize, ratio: f64, seed: u64) -> MaskMatrix {
    let mut rng = rng_from_seed(seed);
    let mut m = MaskMatrix::filled(length, channels, true);
    for t in 0..length {
        for c in 0..channels {
            if rng.gen::<f64>() < ratio {
                m.set(t, c, false);
            }
        }
    }
    m
}

/// Model prediction for one window, per task, in the window's units.
/// Returns [out_len x C] plus the traces needed for the backward pass.
fn composite_forward(
    model: &CompositeModel,
    window: &TimeSeries,
    mask: Option<&MaskMatrix>,
) -> Result<(Mat, EncodeTrace, Vec<HeadCache>)> {
    let enc = encode(window, mask, &model.encoder, &model.model_cfg)?;
    let out_len = model.spec.head_out_len();
    let c = window.channels();
    let mut pred = Mat::zeros(out_len, c);
    let mut caches = Vec::with_capacity(c);
    for ci in 0..c {
        let (out, cache) = head_forward(&model.head, enc.channels[ci].x_rep())?;
        let scale = enc.stats.std[ci] + enc.stats.epsilon;
        for (h, &v) in out.iter().enumerate() {
            *pred.at_mut(h, ci) = v * scale + enc.stats.mean[ci];
        }
        caches.push(cache);
    }
    Ok((pred, enc, caches))
}

/// Prediction only (no caches); parameters are untouched.
pub fn predict(model: &CompositeModel, window: &TimeSeries, mask: Option<&MaskMatrix>) -> Result<Mat> {
    composite_forward(model, window, mask).map(|(p, _, _)| p)
}

struct Samples {
    /// (input window, target [out_len x C], optional input mask)
    items: Vec<(TimeSeries, Mat, Option<MaskMatrix>)>,
}

fn build_samples(model: &CompositeModel, series_std: &TimeSeries, seed: u64) -> Result<Samples> {
    let lb = model.spec.lookback;
    let len = series_std.len();
    let mut items = Vec::new();
    match model.spec.task {
        Task::Forecast { horizon } => {
            if len < lb + horizon {
                return Err(Error::SeriesTooShort {
                    len,
                    required: lb + horizon,
                });
            }
            let mut t0 = 0;
            while t0 + lb + horizon <= len {
                let x = series_std.slice(t0, t0 + lb);
                let y = series_std.slice(t0 + lb, t0 + lb + horizon).values;
                items.push((x, y, None));
                t0 += horizon;
            }
        }
        Task::Impute { mask_ratio } => {
            if len < lb {
                return Err(Error::SeriesTooShort { len, required: lb });
            }
            for (i, t0) in (0..=len - lb).step_by(lb).enumerate() {
                let x = series_std.slice(t0, t0 + lb);
                let mask = uniform_point_mask(
                    lb,
                    series_std.channels(),
                    mask_ratio,
                    derive_seed(seed, "impute_mask", &[i as u64]),
                );
                let y = x.values.clone();
                items.push((x, y, Some(mask)));
            }
        }
        Task::Detect { .. } => {
            if len < lb {
                return Err(Error::SeriesTooShort { len, required: lb });
            }
            for t0 in (0..=len - lb).step_by(lb) {
                let x = series_std.slice(t0, t0 + lb);
                let y = x.values.clone();
                items.push((x, y, None));
            }
        }
    }
    Ok(Samples { items })
}

/// Loss for one sample: MSE over the target grid, restricted to masked
/// points for imputation.
fn sample_loss_grad(pred: &Mat, target: &Mat, mask: Option<&MaskMatrix>) -> Result<(f64, Mat)> {
    let mut d = Mat::zeros(pred.rows, pred.cols);
    let mut n = 0usize;
    for t in 0..pred.rows {
        for c in 0..pred.cols {
            let counted = match mask {
                Some(m) => !m.visible(t, c),
                None => true,
            };
            if counted {
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::EmptyObjective);
    }
    let mut loss = 0.0;
    for t in 0..pred.rows {
        for c in 0..pred.cols {
            let counted = match mask {
                Some(m) => !m.visible(t, c),
                None => true,
            };
            if counted {
                let diff = pred.at(t, c) - target.at(t, c);
                loss += diff * diff;
                *d.at_mut(t, c) = 2.0 * diff / n as f64;
            }
        }
    }
    Ok((loss / n as f64, d))
}

/// Supervised fine-tuning. `data_fraction` keeps the leading fraction of
/// training windows (few-shot); `epochs == 0` is the zero-shot path and
/// leaves every parameter untouched. Returns the per-epoch mean loss.
pub fn finetune(
    model: &mut CompositeModel,
    series: &TimeSeries,
    epochs: usize,
    lr: f64,
    data_fraction: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    if !(data_fraction > 0.0 && data_fraction <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "data_fraction must be in (0,1], got {data_fraction}"
        )));
    }
    let std_series = standardize(series);
    let samples = build_samples(model, &std_series, seed)?;
    if samples.items.is_empty() {
        return Err(Error::SeriesTooShort {
            len: series.len(),
            required: model.spec.lookback,
        });
    }
    let keep = ((samples.items.len() as f64 * data_fraction).ceil() as usize)
        .clamp(1, samples.items.len());
    let items = &samples.items[..keep];
    let frozen = model.spec.freeze_encoder;

    // Frozen encoder: representations are constant, compute them once.
    let mut cached_reps: Vec<Vec<Mat>> = Vec::new();
    let mut cached_stats: Vec<(Vec<f64>, Vec<f64>, f64)> = Vec::new();
    if frozen {
        for (x, _, mask) in items {
            let enc = encode(x, mask.as_ref(), &model.encoder, &model.model_cfg)?;
            cached_reps.push(enc.channels.iter().map(|ch| ch.x_rep().clone()).collect());
            cached_stats.push((enc.stats.mean.clone(), enc.stats.std.clone(), enc.stats.epsilon));
        }
    }

    let mut head_opt = Sgd::new(lr, 0.0);
    let mut enc_opt = Sgd::new(lr, 0.0);
    let mut epoch_losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..items.len()).collect();
        let mut rng = rng_from_seed(derive_seed(seed, "ft_order", &[epoch as u64]));
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        for &ix in &order {
            let (x, target, mask) = &items[ix];
            let c = x.channels();
            let out_len = model.spec.head_out_len();
            let mut head_grads = model.head.zeros_like();

            if frozen {
                let reps = &cached_reps[ix];
                let (mean, std, eps) = &cached_stats[ix];
                let mut pred = Mat::zeros(out_len, c);
                let mut caches = Vec::with_capacity(c);
                for ci in 0..c {
                    let (out, cache) = head_forward(&model.head, &reps[ci])?;
                    let scale = std[ci] + eps;
                    for (h, &v) in out.iter().enumerate() {
                        *pred.at_mut(h, ci) = v * scale + mean[ci];
                    }
                    caches.push(cache);
                }
                let (loss, d_pred) = sample_loss_grad(&pred, target, mask.as_ref())?;
                epoch_loss += loss;
                for ci in 0..c {
                    let scale = std[ci] + eps;
                    let d_out: Vec<f64> =
                        (0..out_len).map(|h| d_pred.at(h, ci) * scale).collect();
                    head_backward(
                        &model.head,
                        &caches[ci],
                        &d_out,
                        &mut head_grads,
                        reps[ci].rows,
                        reps[ci].cols,
                    )?;
                }
            } else {
                let (pred, enc, caches) = composite_forward(model, x, mask.as_ref())?;
                let (loss, d_pred) = sample_loss_grad(&pred, target, mask.as_ref())?;
                epoch_loss += loss;
                let mut d_reps = Vec::with_capacity(c);
                for ci in 0..c {
                    let scale = enc.stats.std[ci] + enc.stats.epsilon;
                    let d_out: Vec<f64> =
                        (0..out_len).map(|h| d_pred.at(h, ci) * scale).collect();
                    let rep = enc.channels[ci].x_rep();
                    let d_rep = head_backward(
                        &model.head,
                        &caches[ci],
                        &d_out,
                        &mut head_grads,
                        rep.rows,
                        rep.cols,
                    )?;
                    d_reps.push(d_rep);
                }
                let enc_grads = encode_backward(&enc, &d_reps, &model.encoder, &model.model_cfg)?;
                enc_opt.step(&mut model.encoder, &enc_grads)?;
            }
            head_opt.step(&mut model.head, &head_grads)?;
        }
        epoch_losses.push(epoch_loss / items.len() as f64);
    }
    Ok(epoch_losses)
}

/// Evaluation report, JSON-serializable with deterministic key order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub dataset: String,
    pub config_hash: String,
    pub metrics: BTreeMap<String, f64>,
    pub notes: Vec<String>,
}

impl EvalReport {
    fn new(task: &str) -> Self {
        EvalReport {
            task: task.into(),
            dataset: String::new(),
            config_hash: String::new(),
            metrics: BTreeMap::new(),
            notes: Vec::new(),
        }
    }
}

pub fn mse(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::ShapeMismatch {
            context: "mse".into(),
            expected: format!("{} values", target.len()),
            actual: format!("{} values", pred.len()),
        });
    }
    Ok(pred
        .iter()
        .zip(target)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / pred.len() as f64)
}

pub fn mae(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::ShapeMismatch {
            context: "mae".into(),
            expected: format!("{} values", target.len()),
            actual: format!("{} values", pred.len()),
        });
    }
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64)
}

/// Symmetric mean absolute percentage error in [0, 200], with 0/0 -> 0.
pub fn smape(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::ShapeMismatch {
            context: "smape".into(),
            expected: format!("{} values", target.len()),
            actual: format!("{} values", pred.len()),
        });
    }
    let mut acc = 0.0;
    for (p, t) in pred.iter().zip(target) {
        let denom = p.abs() + t.abs();
        if denom > 0.0 {
            acc += (p - t).abs() / denom;
        }
    }
    Ok(200.0 * acc / pred.len() as f64)
}

/// Precision, recall, F1 with the convention that undefined ratios are 0.
pub fn precision_recall_f1(pred: &[bool], labels: &[u8]) -> (f64, f64, f64) {
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (&p, &l) in pred.iter().zip(labels) {
        match (p, l != 0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let precision = if tp + fp > 0 {
        tp as f64 / (tp + fp) as f64
    } else {
        0.0
    };
    let recall = if tp + fn_ > 0 {
        tp as f64 / (tp + fn_) as f64
    } else {
        0.0
    };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    (precision, recall, f1)
}

/// Sliding-window forecast evaluation on the standardized scale using an
/// arbitrary predictor. Split out so oracle predictors can be injected.
pub fn evaluate_forecast_with<F>(
    series_std: &TimeSeries,
    lookback: usize,
    horizon: usize,
    stride: usize,
    mut predict_fn: F,
) -> Result<(f64, f64, f64)>
where
    F: FnMut(&TimeSeries) -> Result<Mat>,
{
    if series_std.len() < lookback + horizon {
        return Err(Error::SeriesTooShort {
            len: series_std.len(),
            required: lookback + horizon,
        });
    }
    let mut preds = Vec::new();
    let mut targets = Vec::new();
    let mut t0 = 0;
    while t0 + lookback + horizon <= series_std.len() {
        let x = series_std.slice(t0, t0 + lookback);
        let y = series_std.slice(t0 + lookback, t0 + lookback + horizon);
        let p = predict_fn(&x)?;
        if p.rows != horizon || p.cols != series_std.channels() {
            return Err(Error::ShapeMismatch {
                context: "forecast prediction".into(),
                expected: format!("{}x{}", horizon, series_std.channels()),
                actual: format!("{}x{}", p.rows, p.cols),
            });
        }
        preds.extend_from_slice(&p.data);
        targets.extend_from_slice(&y.values.data);
        t0 += stride;
    }
    Ok((
        mse(&preds, &targets)?,
        mae(&preds, &targets)?,
        smape(&preds, &targets)?,
    ))
}

/// Forecast evaluation of a composite model; metrics on the standardized
/// scale, SMAPE included in short-term mode.
pub fn evaluate_forecast(
    model: &CompositeModel,
    series: &TimeSeries,
    stride: usize,
    short_term: bool,
) -> Result<EvalReport> {
    let horizon = match model.spec.task {
        Task::Forecast { horizon } => horizon,
        _ => return Err(Error::InvalidConfig("model head is not a forecast head".into())),
    };
    let std_series = standardize(series);
    let (m, a, s) = evaluate_forecast_with(
        &std_series,
        model.spec.lookback,
        horizon,
        stride,
        |x| predict(model, x, None),
    )?;
    let mut report = EvalReport::new("forecast");
    report.metrics.insert("mse".into(), m);
    report.metrics.insert("mae".into(), a);
    if short_term {
        report.metrics.insert("smape".into(), s);
    }
    Ok(report)
}

/// Imputation evaluation: mask points uniformly at random (seeded), predict,
/// and score masked points only.
pub fn evaluate_impute(
    model: &CompositeModel,
    series: &TimeSeries,
    mask_ratio: f64,
    seed: u64,
) -> Result<EvalReport> {
    if !matches!(model.spec.task, Task::Impute { .. }) {
        return Err(Error::InvalidConfig("model head is not an imputation head".into()));
    }
    let lb = model.spec.lookback;
    let std_series = standardize(series);
    if std_series.len() < lb {
        return Err(Error::SeriesTooShort {
            len: std_series.len(),
            required: lb,
        });
    }
    let mut preds = Vec::new();
    let mut targets = Vec::new();
    for (i, t0) in (0..=std_series.len() - lb).step_by(lb).enumerate() {
        let x = std_series.slice(t0, t0 + lb);
        let mask = uniform_point_mask(
            lb,
            x.channels(),
            mask_ratio,
            derive_seed(seed, "eval_impute_mask", &[i as u64]),
        );
        let p = predict(model, &x, Some(&mask))?;
        for t in 0..lb {
            for c in 0..x.channels() {
                if !mask.visible(t, c) {
                    preds.push(p.at(t, c));
                    targets.push(x.values.at(t, c));
                }
            }
        }
    }
    if preds.is_empty() {
        return Err(Error::EmptyObjective);
    }
    let mut report = EvalReport::new("impute");
    report.metrics.insert("mse".into(), mse(&preds, &targets)?);
    report.metrics.insert("mae".into(), mae(&preds, &targets)?);
    report.metrics.insert("masked_points".into(), preds.len() as f64);
    Ok(report)
}

/// Per-point reconstruction squared error (mean over channels), on the
/// standardized scale. Covers the full series; a shifted final window
/// scores any tail shorter than the lookback.
pub fn reconstruction_scores(model: &CompositeModel, series: &TimeSeries) -> Result<Vec<f64>> {
    let lb = model.spec.lookback;
    let std_series = standardize(series);
    if std_series.len() < lb {
        return Err(Error::SeriesTooShort {
            len: std_series.len(),
            required: lb,
        });
    }
    let len = std_series.len();
    let c = std_series.channels();
    let mut scores = vec![0.0; len];
    let score_window = |t0: usize, write_from: usize, scores: &mut Vec<f64>| -> Result<()> {
        let x = std_series.slice(t0, t0 + lb);
        let p = predict(model, &x, None)?;
        for t in write_from..t0 + lb {
            let mut acc = 0.0;
            for ci in 0..c {
                let d = p.at(t - t0, ci) - x.values.at(t - t0, ci);
                acc += d * d;
            }
            scores[t] = acc / c as f64;
        }
        Ok(())
    };
    let mut t0 = 0;
    while t0 + lb <= len {
        score_window(t0, t0, &mut scores)?;
        t0 += lb;
    }
    if t0 < len {
        score_window(len - lb, t0, &mut scores)?;
    }
    Ok(scores)
}

/// Threshold at the given quantile of a score sample: the smallest score
/// with at least `q` of the mass at or below it. Points strictly above are
/// flagged anomalous.
pub fn quantile_threshold(scores: &[f64], q: f64) -> f64 {
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let ix = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1;
    sorted[ix]
}

/// Mark every point of a labeled anomalous segment detected if any point
/// inside the segment was flagged.
pub fn point_adjust(pred: &mut [bool], labels: &[u8]) {
    let n = labels.len();
    let mut t = 0;
    while t < n {
        if labels[t] != 0 {
            let start = t;
            while t < n && labels[t] != 0 {
                t += 1;
            }
            if pred[start..t].iter().any(|&p| p) {
                for p in pred[start..t].iter_mut() {
                    *p = true;
                }
            }
        } else {
            t += 1;
        }
    }
}

/// Reconstruction-based anomaly detection. The threshold is the given
/// quantile of scores over train and test combined.
pub fn evaluate_anomaly(
    model: &CompositeModel,
    train_series: &TimeSeries,
    test_series: &TimeSeries,
    labels: &[u8],
    quantile: f64,
    use_point_adjust: bool,
) -> Result<EvalReport> {
    if labels.len() != test_series.len() {
        return Err(Error::ShapeMismatch {
            context: "anomaly labels".into(),
            expected: format!("{} labels", test_series.len()),
            actual: format!("{}", labels.len()),
        });
    }
    let train_scores = reconstruction_scores(model, train_series)?;
    let test_scores = reconstruction_scores(model, test_series)?;
    let mut combined = train_scores;
    combined.extend_from_slice(&test_scores);
    let threshold = quantile_threshold(&combined, quantile);
    let mut pred: Vec<bool> = test_scores.iter().map(|&s| s > threshold).collect();
    if use_point_adjust {
        point_adjust(&mut pred, labels);
    }
    let (precision, recall, f1) = precision_recall_f1(&pred, labels);

    let mut report = EvalReport::new("detect");
    report.metrics.insert("precision".into(), precision);
    report.metrics.insert("recall".into(), recall);
    report.metrics.insert("f1".into(), f1);
    report.metrics.insert("threshold".into(), threshold);
    let positives = labels.iter().filter(|&&l| l != 0).count();
    if positives == 0 || positives == labels.len() {
        report.notes.push("degenerate labels: F1 convention 0 when undefined".into());
    }
    Ok(report)
}

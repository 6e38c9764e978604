//! Client datasets: synthetic generators, instance normalization, patch
//! tokenization, and segment masking.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::seed::{derive_seed, rng_from_seed};

/// A length-L, C-channel observation with a sampling-resolution tag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    /// Row-major values, rows are time steps, columns are channels.
    pub values: Mat,
    /// Seconds per time step.
    pub resolution_seconds: u64,
    pub domain_tag: String,
}

impl TimeSeries {
    pub fn new(values: Mat, resolution_seconds: u64, domain_tag: impl Into<String>) -> Self {
        TimeSeries {
            values,
            resolution_seconds,
            domain_tag: domain_tag.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.rows
    }

    pub fn is_empty(&self) -> bool {
        self.values.rows == 0
    }

    pub fn channels(&self) -> usize {
        self.values.cols
    }

    /// Contiguous slice of time steps `[start, end)` as a new series.
    pub fn slice(&self, start: usize, end: usize) -> TimeSeries {
        assert!(start <= end && end <= self.len());
        let mut vals = Mat::zeros(end - start, self.channels());
        for t in start..end {
            vals.row_mut(t - start).copy_from_slice(self.values.row(t));
        }
        TimeSeries::new(vals, self.resolution_seconds, self.domain_tag.clone())
    }
}

/// Per-channel statistics removed by instance normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RevinStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub epsilon: f64,
}

/// Patch tokenization hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchConfig {
    pub patch_length: usize,
    pub stride: usize,
}

impl PatchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.patch_length == 0 || self.stride > self.patch_length {
            return Err(Error::InvalidConfig(format!(
                "patch config requires 1 <= stride <= patch_length, got stride={} patch_length={}",
                self.stride, self.patch_length
            )));
        }
        Ok(())
    }

    /// Patch count for an input of length `t`: floor((t - L_p)/S) + 2.
    pub fn num_patches(&self, t: usize) -> Result<usize> {
        if t < self.patch_length {
            return Err(Error::SeriesTooShort {
                len: t,
                required: self.patch_length,
            });
        }
        Ok((t - self.patch_length) / self.stride + 2)
    }
}

/// Segment-masking hyperparameters: mean masked run length and masked fraction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub mean_masked_length: usize,
    pub mask_ratio: f64,
}

impl MaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.mean_masked_length < 1 {
            return Err(Error::InvalidConfig(
                "mean_masked_length must be >= 1".into(),
            ));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "mask_ratio must be in (0,1), got {}",
                self.mask_ratio
            )));
        }
        Ok(())
    }
}

/// Binary visibility matrix, 0 = masked, 1 = visible. Same shape as the series.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskMatrix {
    pub rows: usize,
    pub cols: usize,
    /// Row-major bits.
    pub bits: Vec<u8>,
}

impl MaskMatrix {
    pub fn filled(rows: usize, cols: usize, visible: bool) -> Self {
        MaskMatrix {
            rows,
            cols,
            bits: vec![visible as u8; rows * cols],
        }
    }

    #[inline]
    pub fn visible(&self, t: usize, c: usize) -> bool {
        self.bits[t * self.cols + c] == 1
    }

    #[inline]
    pub fn set(&mut self, t: usize, c: usize, visible: bool) {
        self.bits[t * self.cols + c] = visible as u8;
    }

    pub fn masked_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 0).count()
    }

    pub fn masked_fraction(&self) -> f64 {
        self.masked_count() as f64 / self.bits.len() as f64
    }
}

fn check_same_shape(rows: usize, cols: usize, mask: &MaskMatrix, context: &str) -> Result<()> {
    if mask.rows != rows || mask.cols != cols {
        return Err(Error::ShapeMismatch {
            context: context.into(),
            expected: format!("{}x{}", rows, cols),
            actual: format!("{}x{}", mask.rows, mask.cols),
        });
    }
    Ok(())
}

/// Normalize each channel to zero mean and unit population variance.
///
/// The denominator is `std + epsilon`, so constant channels map to zeros.
pub fn revin_normalize(series: &TimeSeries, epsilon: f64) -> (TimeSeries, RevinStats) {
    let l = series.len();
    let c = series.channels();
    let mut mean = vec![0.0; c];
    let mut std = vec![0.0; c];
    for ch in 0..c {
        let mut m = 0.0;
        for t in 0..l {
            m += series.values.at(t, ch);
        }
        m /= l as f64;
        let mut v = 0.0;
        for t in 0..l {
            let d = series.values.at(t, ch) - m;
            v += d * d;
        }
        v /= l as f64;
        mean[ch] = m;
        std[ch] = v.sqrt();
    }
    let mut out = Mat::zeros(l, c);
    for t in 0..l {
        for ch in 0..c {
            *out.at_mut(t, ch) = (series.values.at(t, ch) - mean[ch]) / (std[ch] + epsilon);
        }
    }
    (
        TimeSeries::new(out, series.resolution_seconds, series.domain_tag.clone()),
        RevinStats { mean, std, epsilon },
    )
}

/// Inverse of [`revin_normalize`]: y = x * (std + epsilon) + mean.
pub fn revin_denormalize(normalized: &TimeSeries, stats: &RevinStats) -> Result<TimeSeries> {
    if normalized.channels() != stats.mean.len() || stats.mean.len() != stats.std.len() {
        return Err(Error::ShapeMismatch {
            context: "revin_denormalize".into(),
            expected: format!("{} channels", normalized.channels()),
            actual: format!("{} mean / {} std", stats.mean.len(), stats.std.len()),
        });
    }
    let l = normalized.len();
    let c = normalized.channels();
    let mut out = Mat::zeros(l, c);
    for t in 0..l {
        for ch in 0..c {
            *out.at_mut(t, ch) =
                normalized.values.at(t, ch) * (stats.std[ch] + stats.epsilon) + stats.mean[ch];
        }
    }
    Ok(TimeSeries::new(
        out,
        normalized.resolution_seconds,
        normalized.domain_tag.clone(),
    ))
}

/// Split a single channel into overlapping patches.
///
/// The input is first extended by repeating its final value `stride` times;
/// patch `p` covers indices `[p*S, p*S + L_p)` of the extended signal, giving
/// `floor((T - L_p)/S) + 2` patches in total.
pub fn make_patches(channel: &[f64], cfg: &PatchConfig) -> Result<Mat> {
    cfg.validate()?;
    let t = channel.len();
    let p = cfg.num_patches(t)?;
    let last = channel[t - 1];
    let ext = |ix: usize| if ix < t { channel[ix] } else { last };
    let mut out = Mat::zeros(p, cfg.patch_length);
    for pi in 0..p {
        let start = pi * cfg.stride;
        for i in 0..cfg.patch_length {
            *out.at_mut(pi, i) = ext(start + i);
        }
    }
    Ok(out)
}

/// For each extended index, the number of patches covering it. Used by the
/// model to average overlapping patch predictions back into a sequence.
pub fn patch_coverage(t: usize, cfg: &PatchConfig) -> Result<Vec<usize>> {
    let p = cfg.num_patches(t)?;
    let mut cover = vec![0usize; t + cfg.stride];
    for pi in 0..p {
        for i in 0..cfg.patch_length {
            cover[pi * cfg.stride + i] += 1;
        }
    }
    Ok(cover)
}

fn sample_mask_channel(out: &mut MaskMatrix, ch: usize, spec: &MaskSpec, rng: &mut impl Rng) {
    let lm = spec.mean_masked_length as f64;
    let rm = spec.mask_ratio;
    // Alternating two-state process: masked runs are geometric with mean L_m,
    // visible runs geometric with mean L_m*(1-r_m)/r_m, so the stationary
    // masked fraction is r_m.
    let p_unmask = 1.0 / lm;
    let p_mask = (rm / (lm * (1.0 - rm))).min(1.0);
    let mut masked = rng.gen::<f64>() < rm;
    for t in 0..out.rows {
        out.set(t, ch, !masked);
        let flip = if masked { p_unmask } else { p_mask };
        if rng.gen::<f64>() < flip {
            masked = !masked;
        }
    }
}

/// Geometric-segment mask, channels masked independently.
///
/// Deterministic for a fixed `(length, channels, spec, rng_seed)`.
pub fn sample_mask(length: usize, channels: usize, spec: &MaskSpec, rng_seed: u64) -> MaskMatrix {
    let mut out = MaskMatrix::filled(length, channels, true);
    for ch in 0..channels {
        let mut rng = rng_from_seed(derive_seed(rng_seed, "mask_channel", &[ch as u64]));
        sample_mask_channel(&mut out, ch, spec, &mut rng);
    }
    out
}

/// Geometric-segment mask with one pattern shared by all channels.
pub fn sample_mask_shared(
    length: usize,
    channels: usize,
    spec: &MaskSpec,
    rng_seed: u64,
) -> MaskMatrix {
    let mut out = MaskMatrix::filled(length, channels, true);
    let mut rng = rng_from_seed(derive_seed(rng_seed, "mask_shared", &[]));
    sample_mask_channel(&mut out, 0, spec, &mut rng);
    for t in 0..length {
        let v = out.visible(t, 0);
        for ch in 1..channels {
            out.set(t, ch, v);
        }
    }
    out
}

/// Element-wise product of a series with a binary mask.
pub fn apply_mask(series: &TimeSeries, mask: &MaskMatrix) -> Result<TimeSeries> {
    check_same_shape(series.len(), series.channels(), mask, "apply_mask")?;
    let mut out = series.values.clone();
    for t in 0..out.rows {
        for c in 0..out.cols {
            if !mask.visible(t, c) {
                *out.at_mut(t, c) = 0.0;
            }
        }
    }
    Ok(TimeSeries::new(
        out,
        series.resolution_seconds,
        series.domain_tag.clone(),
    ))
}

/// One sinusoidal component of a synthetic client.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Seasonal {
    pub amplitude: f64,
    pub period_steps: usize,
}

/// Generator parameters for one synthetic heterogeneous client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticClientSpec {
    pub resolution_seconds: u64,
    pub trend_slope: f64,
    pub seasonal_amplitudes: Vec<Seasonal>,
    pub noise_std: f64,
    pub length: usize,
    pub channels: usize,
    pub seed: u64,
    #[serde(default = "default_domain")]
    pub domain_tag: String,
}

fn default_domain() -> String {
    "synthetic".into()
}

impl SyntheticClientSpec {
    pub fn validate(&self) -> Result<()> {
        if self.length < 1 || self.channels < 1 {
            return Err(Error::InvalidConfig(
                "synthetic client needs length >= 1 and channels >= 1".into(),
            ));
        }
        if self.noise_std < 0.0 {
            return Err(Error::InvalidConfig("noise_std must be >= 0".into()));
        }
        for s in &self.seasonal_amplitudes {
            if s.period_steps < 2 {
                return Err(Error::InvalidConfig(
                    "seasonal period_steps must be >= 2".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Standard normal via Box-Muller; two uniform draws per value so the
/// stream layout is explicit and stable.
fn normal_draw(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

/// Generate the full series for a synthetic client spec:
/// trend + per-channel phase-shifted seasonals + Gaussian noise.
pub fn gen_synthetic_series(spec: &SyntheticClientSpec) -> Result<TimeSeries> {
    spec.validate()?;
    let mut phase_rng = rng_from_seed(derive_seed(spec.seed, "phases", &[]));
    let mut phases = vec![vec![0.0; spec.seasonal_amplitudes.len()]; spec.channels];
    for chph in phases.iter_mut() {
        for p in chph.iter_mut() {
            *p = phase_rng.gen::<f64>() * 2.0 * PI;
        }
    }
    let mut noise_rng = rng_from_seed(derive_seed(spec.seed, "noise", &[]));
    let mut vals = Mat::zeros(spec.length, spec.channels);
    for t in 0..spec.length {
        for c in 0..spec.channels {
            let mut v = spec.trend_slope * t as f64;
            for (j, s) in spec.seasonal_amplitudes.iter().enumerate() {
                v += s.amplitude
                    * (2.0 * PI * t as f64 / s.period_steps as f64 + phases[c][j]).sin();
            }
            if spec.noise_std > 0.0 {
                v += spec.noise_std * normal_draw(&mut noise_rng);
            }
            *vals.at_mut(t, c) = v;
        }
    }
    Ok(TimeSeries::new(
        vals,
        spec.resolution_seconds,
        spec.domain_tag.clone(),
    ))
}

/// Train/validation portions of one client's data.
#[derive(Debug, Clone)]
pub struct ClientData {
    pub train: TimeSeries,
    pub val: TimeSeries,
}

pub const TRAIN_FRACTION: f64 = 0.8;

/// Generate a synthetic client and split it 80/20 along time.
pub fn gen_synthetic_client(spec: &SyntheticClientSpec) -> Result<ClientData> {
    let full = gen_synthetic_series(spec)?;
    Ok(split_series(&full, TRAIN_FRACTION))
}

/// Split a series along time into leading/trailing portions.
pub fn split_series(series: &TimeSeries, train_fraction: f64) -> ClientData {
    let cut = ((series.len() as f64 * train_fraction).floor() as usize).clamp(1, series.len());
    ClientData {
        train: series.slice(0, cut),
        val: series.slice(cut, series.len()),
    }
}

/// Header of a client dataset file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeriesFileHeader {
    pub length: usize,
    pub channels: usize,
    pub resolution_seconds: u64,
    pub domain_tag: String,
    pub seed: u64,
}

/// Write a series as a one-line JSON header followed by row-major
/// little-endian f32 payload.
pub fn export_series(path: &Path, series: &TimeSeries, seed: u64) -> Result<()> {
    let header = SeriesFileHeader {
        length: series.len(),
        channels: series.channels(),
        resolution_seconds: series.resolution_seconds,
        domain_tag: series.domain_tag.clone(),
        seed,
    };
    let mut f = std::fs::File::create(path)?;
    f.write_all(serde_json::to_string(&header)?.as_bytes())?;
    f.write_all(b"\n")?;
    let mut payload = Vec::with_capacity(series.values.data.len() * 4);
    for &v in &series.values.data {
        payload.extend_from_slice(&(v as f32).to_le_bytes());
    }
    f.write_all(&payload)?;
    Ok(())
}

/// Read a CSV dataset: first row is a header, first column a timestamp
/// (ignored beyond ordering), remaining columns are channels.
pub fn import_csv_series(path: &Path, resolution_seconds: u64) -> Result<TimeSeries> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| Error::InvalidConfig(format!("{}: empty csv", path.display())))?;
    let channels = header.split(',').count().saturating_sub(1);
    if channels == 0 {
        return Err(Error::InvalidConfig(format!(
            "{}: csv needs a timestamp column plus at least one channel",
            path.display()
        )));
    }
    let mut rows: Vec<f64> = Vec::new();
    let mut length = 0usize;
    for (lineno, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != channels + 1 {
            return Err(Error::InvalidConfig(format!(
                "{}: line {} has {} fields, expected {}",
                path.display(),
                lineno + 2,
                fields.len(),
                channels + 1
            )));
        }
        for field in &fields[1..] {
            let v: f64 = field.trim().parse().map_err(|e| {
                Error::InvalidConfig(format!(
                    "{}: line {}: bad number `{}`: {e}",
                    path.display(),
                    lineno + 2,
                    field
                ))
            })?;
            rows.push(v);
        }
        length += 1;
    }
    if length == 0 {
        return Err(Error::InvalidConfig(format!(
            "{}: csv has no data rows",
            path.display()
        )));
    }
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "csv".into());
    Ok(TimeSeries::new(
        Mat::from_vec(length, channels, rows),
        resolution_seconds,
        stem,
    ))
}

/// Read a series written by [`export_series`].
pub fn import_series(path: &Path) -> Result<(TimeSeries, SeriesFileHeader)> {
    let bytes = std::fs::read(path)?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Checkpoint(format!("{}: missing header line", path.display())))?;
    let header: SeriesFileHeader = serde_json::from_slice(&bytes[..nl])?;
    let payload = &bytes[nl + 1..];
    let expected = header.length * header.channels * 4;
    if payload.len() != expected {
        return Err(Error::Checkpoint(format!(
            "{}: payload is {} bytes, expected {}",
            path.display(),
            payload.len(),
            expected
        )));
    }
    let mut data = Vec::with_capacity(header.length * header.channels);
    let mut rdr = payload;
    let mut buf = [0u8; 4];
    for _ in 0..header.length * header.channels {
        rdr.read_exact(&mut buf)?;
        data.push(f32::from_le_bytes(buf) as f64);
    }
    let values = Mat::from_vec(header.length, header.channels, data);
    Ok((
        TimeSeries::new(values, header.resolution_seconds, header.domain_tag.clone()),
        header,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series_1ch(vals: &[f64]) -> TimeSeries {
        TimeSeries::new(
            Mat::from_vec(vals.len(), 1, vals.to_vec()),
            60,
            "test",
        )
    }

    #[test]
    fn normalize_basic_channel() {
        let (norm, stats) = revin_normalize(&series_1ch(&[1.0, 2.0, 3.0]), 0.0);
        let expect = [-1.224744871391589, 0.0, 1.224744871391589];
        for (got, want) in norm.values.data.iter().zip(expect) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
        assert!((stats.mean[0] - 2.0).abs() < 1e-12);
        assert!((stats.std[0] - (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn normalize_constant_channel_is_zero() {
        let (norm, _) = revin_normalize(&series_1ch(&[5.0, 5.0, 5.0]), 1e-5);
        assert!(norm.values.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn denormalize_inverts_normalize() {
        let s = series_1ch(&[0.3, -1.2, 4.5, 2.0, 0.0, -3.3]);
        let (norm, stats) = revin_normalize(&s, 1e-5);
        let back = revin_denormalize(&norm, &stats).unwrap();
        assert!(back.values.max_abs_diff(&s.values) < 1e-6);
    }

    #[test]
    fn denormalize_examples() {
        let zeros = series_1ch(&[0.0, 0.0, 0.0]);
        let stats = RevinStats {
            mean: vec![3.0],
            std: vec![2.0],
            epsilon: 0.0,
        };
        let out = revin_denormalize(&zeros, &stats).unwrap();
        assert!(out.values.data.iter().all(|&v| v == 3.0));

        let norm = series_1ch(&[-1.224744871391589, 0.0, 1.224744871391589]);
        let stats = RevinStats {
            mean: vec![2.0],
            std: vec![(2.0f64 / 3.0).sqrt()],
            epsilon: 0.0,
        };
        let out = revin_denormalize(&norm, &stats).unwrap();
        for (got, want) in out.values.data.iter().zip([1.0, 2.0, 3.0]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn denormalize_shape_mismatch_errors() {
        let stats = RevinStats {
            mean: vec![0.0, 0.0],
            std: vec![1.0, 1.0],
            epsilon: 0.0,
        };
        assert!(matches!(
            revin_denormalize(&series_1ch(&[1.0]), &stats),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn patch_count_formula() {
        let cfg = PatchConfig {
            patch_length: 16,
            stride: 8,
        };
        assert_eq!(cfg.num_patches(512).unwrap(), 64);
        assert_eq!(cfg.num_patches(96).unwrap(), 12);
        assert_eq!(cfg.num_patches(16).unwrap(), 2);
    }

    #[test]
    fn minimal_length_pads_with_final_value() {
        let cfg = PatchConfig {
            patch_length: 16,
            stride: 8,
        };
        let xs: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let patches = make_patches(&xs, &cfg).unwrap();
        assert_eq!(patches.rows, 2);
        // Second patch is x8..x15 followed by x15 repeated.
        for i in 0..8 {
            assert_eq!(patches.at(1, i), (8 + i) as f64);
        }
        for i in 8..16 {
            assert_eq!(patches.at(1, i), 15.0);
        }
    }

    #[test]
    fn too_short_input_errors() {
        let cfg = PatchConfig {
            patch_length: 16,
            stride: 8,
        };
        assert!(matches!(
            make_patches(&[1.0; 10], &cfg),
            Err(Error::SeriesTooShort { .. })
        ));
    }

    #[test]
    fn coverage_reaches_every_index() {
        for (t, lp, s) in [(512, 16, 8), (96, 16, 8), (17, 5, 3), (20, 4, 4)] {
            let cfg = PatchConfig {
                patch_length: lp,
                stride: s,
            };
            let cover = patch_coverage(t, &cfg).unwrap();
            assert!(cover[..t].iter().all(|&c| c >= 1), "t={t} lp={lp} s={s}");
        }
    }

    #[test]
    fn mask_is_deterministic() {
        let spec = MaskSpec {
            mean_masked_length: 8,
            mask_ratio: 0.3,
        };
        let a = sample_mask(256, 3, &spec, 7);
        let b = sample_mask(256, 3, &spec, 7);
        assert_eq!(a, b);
        let c = sample_mask(256, 3, &spec, 8);
        assert_ne!(a, c);
    }

    #[test]
    fn vanishing_ratio_gives_all_visible() {
        let spec = MaskSpec {
            mean_masked_length: 8,
            mask_ratio: 1e-9,
        };
        let m = sample_mask(100, 1, &spec, 3);
        assert_eq!(m.masked_count(), 0);
    }

    #[test]
    fn mask_stationary_fraction_close_to_ratio() {
        let spec = MaskSpec {
            mean_masked_length: 16,
            mask_ratio: 0.35,
        };
        let m = sample_mask(200_000, 1, &spec, 11);
        let frac = m.masked_fraction();
        assert!((frac - 0.35).abs() < 0.02, "fraction {frac}");
    }

    #[test]
    fn shared_mask_identical_across_channels() {
        let spec = MaskSpec {
            mean_masked_length: 4,
            mask_ratio: 0.4,
        };
        let m = sample_mask_shared(128, 4, &spec, 5);
        for t in 0..128 {
            let v = m.visible(t, 0);
            for c in 1..4 {
                assert_eq!(m.visible(t, c), v);
            }
        }
    }

    #[test]
    fn apply_mask_examples() {
        let s = series_1ch(&[1.0, 2.0, 3.0]);
        let ones = MaskMatrix::filled(3, 1, true);
        assert_eq!(apply_mask(&s, &ones).unwrap().values, s.values);

        let zeros = MaskMatrix::filled(3, 1, false);
        assert!(apply_mask(&s, &zeros)
            .unwrap()
            .values
            .data
            .iter()
            .all(|&v| v == 0.0));

        let mut m = MaskMatrix::filled(3, 1, true);
        m.set(1, 0, false);
        assert_eq!(apply_mask(&s, &m).unwrap().values.data, vec![1.0, 0.0, 3.0]);

        let bad = MaskMatrix::filled(2, 1, true);
        assert!(apply_mask(&s, &bad).is_err());
    }

    #[test]
    fn synthetic_zero_spec_is_zero() {
        let spec = SyntheticClientSpec {
            resolution_seconds: 60,
            trend_slope: 0.0,
            seasonal_amplitudes: vec![],
            noise_std: 0.0,
            length: 50,
            channels: 2,
            seed: 1,
            domain_tag: "zero".into(),
        };
        let s = gen_synthetic_series(&spec).unwrap();
        assert!(s.values.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn synthetic_is_deterministic() {
        let spec = SyntheticClientSpec {
            resolution_seconds: 300,
            trend_slope: 0.01,
            seasonal_amplitudes: vec![Seasonal {
                amplitude: 1.0,
                period_steps: 24,
            }],
            noise_std: 0.1,
            length: 200,
            channels: 3,
            seed: 42,
            domain_tag: "energy".into(),
        };
        let a = gen_synthetic_series(&spec).unwrap();
        let b = gen_synthetic_series(&spec).unwrap();
        assert_eq!(a.values.data, b.values.data);
    }

    #[test]
    fn export_import_roundtrip() {
        let spec = SyntheticClientSpec {
            resolution_seconds: 3600,
            trend_slope: 0.002,
            seasonal_amplitudes: vec![Seasonal {
                amplitude: 2.0,
                period_steps: 12,
            }],
            noise_std: 0.05,
            length: 64,
            channels: 2,
            seed: 9,
            domain_tag: "weather".into(),
        };
        let s = gen_synthetic_series(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("client_0.fts");
        export_series(&path, &s, spec.seed).unwrap();
        let (back, header) = import_series(&path).unwrap();
        assert_eq!(header.seed, 9);
        assert_eq!(back.len(), 64);
        assert_eq!(back.channels(), 2);
        assert_eq!(back.resolution_seconds, 3600);
        // f32 payload: equal to f32 precision.
        for (a, b) in back.values.data.iter().zip(&s.values.data) {
            assert!((a - b).abs() <= (*b as f32).abs() as f64 * 1e-6 + 1e-6);
        }
    }

    #[test]
    fn csv_ingestion_skips_timestamp_column() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        std::fs::write(&path, "date,temp,load\n2020-01-01,1.5,10\n2020-01-02,2.5,20\n").unwrap();
        let s = import_csv_series(&path, 86400).unwrap();
        assert_eq!((s.len(), s.channels()), (2, 2));
        assert_eq!(s.values.row(0), &[1.5, 10.0]);
        assert_eq!(s.values.row(1), &[2.5, 20.0]);

        std::fs::write(&path, "date,temp\n2020-01-01,not_a_number\n").unwrap();
        assert!(import_csv_series(&path, 86400).is_err());
    }

    #[test]
    fn truncated_payload_rejected() {
        let s = series_1ch(&[1.0, 2.0, 3.0]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.fts");
        export_series(&path, &s, 0).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 2]).unwrap();
        let err = import_series(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("expected"), "{msg}");
    }
}

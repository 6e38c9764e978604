//! Operational shell: experiment configuration with validation and hashing,
//! the checkpoint format, round-report files, and worker-pool control.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SyntheticClientSpec;
use crate::downstream::TaskSpec;
use crate::error::{Error, Result};
use crate::fed::{FedConfig, RoundReport};
use crate::mat::Mat;
use crate::model::{ModelConfig, ParameterSet};

/// Where client datasets come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClientSource {
    Synthetic(Vec<SyntheticClientSpec>),
    Files(Vec<PathBuf>),
}

impl ClientSource {
    pub fn len(&self) -> usize {
        match self {
            ClientSource::Synthetic(v) => v.len(),
            ClientSource::Files(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

/// Top-level experiment description. `master_seed` is authoritative and is
/// copied into the federated config on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub fed: FedConfig,
    pub clients: ClientSource,
    #[serde(default)]
    pub task_specs: Vec<TaskSpec>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub master_seed: u64,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.fed.validate()?;
        if self.clients.len() != self.fed.num_clients {
            return Err(Error::InvalidConfig(format!(
                "num_clients is {} but {} client sources were given",
                self.fed.num_clients,
                self.clients.len()
            )));
        }
        if let ClientSource::Synthetic(specs) = &self.clients {
            for spec in specs {
                spec.validate()?;
            }
        }
        for spec in &self.task_specs {
            spec.validate()?;
            let p = self.model.patch.num_patches(spec.lookback)?;
            if p > self.model.max_patches {
                return Err(Error::InvalidConfig(format!(
                    "task lookback {} needs {p} patches, above max_patches {}",
                    spec.lookback, self.model.max_patches
                )));
            }
        }
        let p = self.model.patch.num_patches(self.fed.window_length)?;
        if p > self.model.max_patches {
            return Err(Error::InvalidConfig(format!(
                "window_length {} needs {p} patches, above max_patches {}",
                self.fed.window_length, self.model.max_patches
            )));
        }
        Ok(())
    }
}

/// Parse, validate, and materialize a config file. The returned value has
/// every default filled in and `fed.seed` set from `master_seed`.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    let mut cfg: ExperimentConfig = serde_json::from_str(&text)?;
    cfg.fed.seed = cfg.master_seed;
    cfg.validate()?;
    Ok(cfg)
}

/// Stable 64-bit content hash of the fully materialized config, as hex.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let canonical = serde_json::to_string(cfg).expect("config serializes");
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in canonical.as_bytes() {
        h = (h ^ *b as u64).wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

/// Checkpoint sidecar data stored in the manifest.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CheckpointMeta {
    #[serde(default)]
    pub config_hash: String,
    #[serde(default)]
    pub round_index: usize,
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub task: Option<TaskSpec>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    /// Byte offset into the payload.
    offset: usize,
    /// Element count.
    len: usize,
    atm: bool,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config_hash: String,
    round_index: usize,
    dtype: String,
    tensors: Vec<TensorEntry>,
    atm_names: Vec<String>,
    #[serde(default)]
    model: Option<ModelConfig>,
    #[serde(default)]
    task: Option<TaskSpec>,
}

/// Encode parameters as a one-line JSON manifest followed by raw
/// little-endian f64 payload in manifest order.
pub fn checkpoint_to_bytes(params: &ParameterSet, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let mut tensors = Vec::with_capacity(params.len());
    let mut offset = 0usize;
    for (name, m) in params.iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: [m.rows, m.cols],
            offset,
            len: m.data.len(),
            atm: params.is_atm(name),
        });
        offset += m.data.len() * 8;
    }
    let manifest = Manifest {
        config_hash: meta.config_hash.clone(),
        round_index: meta.round_index,
        dtype: "f64".into(),
        tensors,
        atm_names: params.atm_names().iter().cloned().collect(),
        model: meta.model.clone(),
        task: meta.task.clone(),
    };
    let mut out = serde_json::to_string(&manifest)?.into_bytes();
    out.push(b'\n');
    out.reserve(offset);
    for (_, m) in params.iter() {
        for &v in &m.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Decode a checkpoint, verifying manifest/payload consistency.
pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<(ParameterSet, CheckpointMeta)> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Checkpoint("missing manifest line".into()))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[..nl])?;
    if manifest.dtype != "f64" {
        return Err(Error::Checkpoint(format!(
            "unsupported dtype `{}`",
            manifest.dtype
        )));
    }
    let payload = &bytes[nl + 1..];
    let mut expected_offset = 0usize;
    for t in &manifest.tensors {
        if t.shape[0] * t.shape[1] != t.len {
            return Err(Error::Checkpoint(format!(
                "tensor `{}`: shape {}x{} does not match element count {}",
                t.name, t.shape[0], t.shape[1], t.len
            )));
        }
        if t.offset != expected_offset {
            return Err(Error::Checkpoint(format!(
                "tensor `{}`: offset {} is not contiguous (expected {})",
                t.name, t.offset, expected_offset
            )));
        }
        expected_offset += t.len * 8;
    }
    if payload.len() != expected_offset {
        return Err(Error::Checkpoint(format!(
            "payload is {} bytes, expected {}",
            payload.len(),
            expected_offset
        )));
    }
    let mut params = ParameterSet::new();
    for t in &manifest.tensors {
        let mut data = Vec::with_capacity(t.len);
        let base = t.offset;
        for i in 0..t.len {
            let mut buf = [0u8; 8];
            buf.copy_from_slice(&payload[base + i * 8..base + (i + 1) * 8]);
            data.push(f64::from_le_bytes(buf));
        }
        params.push(
            t.name.clone(),
            Mat::from_vec(t.shape[0], t.shape[1], data),
            t.atm || manifest.atm_names.iter().any(|n| n == &t.name),
        );
    }
    Ok((
        params,
        CheckpointMeta {
            config_hash: manifest.config_hash,
            round_index: manifest.round_index,
            model: manifest.model,
            task: manifest.task,
        },
    ))
}

pub fn save_checkpoint(params: &ParameterSet, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let bytes = checkpoint_to_bytes(params, meta)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Load a checkpoint; when `expected_config_hash` is given, a mismatched
/// pairing is rejected.
pub fn load_checkpoint(
    path: &Path,
    expected_config_hash: Option<&str>,
) -> Result<(ParameterSet, CheckpointMeta)> {
    let bytes = std::fs::read(path)?;
    let (params, meta) = checkpoint_from_bytes(&bytes)?;
    if let Some(expected) = expected_config_hash {
        if meta.config_hash != expected {
            return Err(Error::Checkpoint(format!(
                "config hash mismatch: checkpoint {} vs config {}",
                meta.config_hash, expected
            )));
        }
    }
    Ok((params, meta))
}

/// Append one round report as a JSON line.
pub fn append_report_jsonl(path: &Path, report: &RoundReport) -> Result<()> {
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{}", serde_json::to_string(report)?)?;
    Ok(())
}

/// Read every round report from a JSONL file.
pub fn read_reports_jsonl(path: &Path) -> Result<Vec<RoundReport>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Run `f` inside a rayon pool of the given size; `None` uses the default.
pub fn with_worker_pool<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match workers {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::InvalidConfig(format!("worker pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;
    use crate::data::PatchConfig;

    fn cfg() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            num_layers: 2,
            num_heads: 2,
            patch: PatchConfig {
                patch_length: 4,
                stride: 2,
            },
            num_experts: 4,
            top_k: 3,
            ffn_hidden: 8,
            decomposition_kernel: 3,
            max_patches: 16,
            revin_epsilon: 1e-5,
            atm_residual: true,
            atm_final_block_only: false,
            expert_pooling: false,
            expert_subset: None,
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_bitwise() {
        let params = init_params(&cfg(), 42);
        let meta = CheckpointMeta {
            config_hash: "deadbeef".into(),
            round_index: 7,
            model: Some(cfg()),
            task: None,
        };
        let bytes = checkpoint_to_bytes(&params, &meta).unwrap();
        let (back, meta2) = checkpoint_from_bytes(&bytes).unwrap();
        assert!(params.bitwise_eq(&back));
        assert_eq!(meta2.config_hash, "deadbeef");
        assert_eq!(meta2.round_index, 7);
        assert_eq!(back.atm_names(), params.atm_names());
    }

    #[test]
    fn tampered_shape_is_rejected_with_tensor_name() {
        let params = init_params(&cfg(), 42);
        let bytes = checkpoint_to_bytes(&params, &Default::default()).unwrap();
        let text = String::from_utf8_lossy(&bytes[..bytes.iter().position(|&b| b == b'\n').unwrap()])
            .to_string();
        let tampered = text.replacen("\"shape\":[4,8]", "\"shape\":[8,8]", 1);
        let mut out = tampered.into_bytes();
        out.push(b'\n');
        out.extend_from_slice(&bytes[bytes.iter().position(|&b| b == b'\n').unwrap() + 1..]);
        let err = checkpoint_from_bytes(&out).unwrap_err();
        assert!(err.to_string().contains("embed.w"), "{err}");
    }

    #[test]
    fn truncated_payload_reports_byte_counts() {
        let params = init_params(&cfg(), 42);
        let bytes = checkpoint_to_bytes(&params, &Default::default()).unwrap();
        let err = checkpoint_from_bytes(&bytes[..bytes.len() - 9]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("expected"), "{msg}");
    }

    fn minimal_config_json() -> String {
        r#"{
            "model": {
                "d_model": 16,
                "num_layers": 1,
                "num_heads": 2,
                "patch": {"patch_length": 16, "stride": 8},
                "ffn_hidden": 32
            },
            "fed": {"num_clients": 1, "rounds": 1},
            "clients": {"synthetic": [{
                "resolution_seconds": 3600,
                "trend_slope": 0.001,
                "seasonal_amplitudes": [{"amplitude": 1.0, "period_steps": 24}],
                "noise_std": 0.1,
                "length": 2600,
                "channels": 1,
                "seed": 3
            }]},
            "master_seed": 11
        }"#
        .to_string()
    }

    #[test]
    fn minimal_config_fills_documented_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, minimal_config_json()).unwrap();
        let cfg = load_config(&path).unwrap();
        assert_eq!(cfg.fed.lambda, 0.01);
        assert_eq!(cfg.model.top_k, 3);
        assert_eq!(cfg.model.num_experts, 4);
        assert_eq!(cfg.fed.mask_spec.mean_masked_length, 16);
        assert_eq!(cfg.fed.mask_spec.mask_ratio, 0.35);
        assert_eq!(cfg.fed.window_length, 512);
        assert_eq!(cfg.fed.seed, 11);
    }

    #[test]
    fn top_k_above_expert_count_is_rejected_naming_both_fields() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        let bad = minimal_config_json().replacen(
            "\"ffn_hidden\": 32",
            "\"ffn_hidden\": 32, \"top_k\": 5",
            1,
        );
        std::fs::write(&path, bad).unwrap();
        let err = load_config(&path).unwrap_err().to_string();
        assert!(err.contains("top_k") && err.contains("num_experts"), "{err}");
    }

    #[test]
    fn config_roundtrips_through_serialization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, minimal_config_json()).unwrap();
        let cfg = load_config(&path).unwrap();
        let path2 = dir.path().join("cfg2.json");
        std::fs::write(&path2, serde_json::to_string(&cfg).unwrap()).unwrap();
        let cfg2 = load_config(&path2).unwrap();
        assert_eq!(cfg, cfg2);
        assert_eq!(config_hash(&cfg), config_hash(&cfg2));
    }

    #[test]
    fn parse_errors_carry_location_info() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, "{\n  \"model\": [broken\n}").unwrap();
        let err = load_config(&path).unwrap_err().to_string();
        assert!(err.contains("line"), "{err}");
    }

    #[test]
    fn hash_mismatch_rejected_at_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        let params = init_params(&cfg(), 1);
        let meta = CheckpointMeta {
            config_hash: "aaaa".into(),
            ..Default::default()
        };
        save_checkpoint(&params, &meta, &path).unwrap();
        assert!(load_checkpoint(&path, Some("aaaa")).is_ok());
        assert!(load_checkpoint(&path, Some("bbbb")).is_err());
    }
}

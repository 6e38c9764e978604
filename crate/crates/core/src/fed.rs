//! Federated protocol: client sampling, local masked-reconstruction updates
//! with the alignment penalty, sample-weighted aggregation, and round
//! orchestration with a fixed reduction order.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    gen_synthetic_client, sample_mask, sample_mask_shared, MaskSpec, SyntheticClientSpec,
    TimeSeries,
};
use crate::error::{Error, Result};
use crate::model::{init_params, loss_and_grads, ModelConfig, ParameterSet, Sgd};
use crate::seed::{derive_seed, rng_from_seed};

fn default_rate() -> f64 {
    1.0
}
fn default_epochs() -> usize {
    1
}
fn default_lambda() -> f64 {
    0.01
}
fn default_mask_spec() -> MaskSpec {
    MaskSpec {
        mean_masked_length: 16,
        mask_ratio: 0.35,
    }
}
fn default_lr() -> f64 {
    1e-3
}
fn default_batch() -> usize {
    8
}
fn default_window() -> usize {
    512
}

/// Federated training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FedConfig {
    pub num_clients: usize,
    #[serde(default = "default_rate")]
    pub participation_rate: f64,
    #[serde(default = "default_epochs")]
    pub local_epochs: usize,
    pub rounds: usize,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_mask_spec")]
    pub mask_spec: MaskSpec,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    /// Length of the training windows cut from each client's series.
    #[serde(default = "default_window")]
    pub window_length: usize,
    /// Plain sample-weighted averaging with no alignment penalty.
    #[serde(default)]
    pub fedavg_baseline: bool,
    /// One mask pattern shared across channels instead of per-channel masks.
    #[serde(default)]
    pub shared_mask: bool,
    /// Round-trip broadcast parameters through the checkpoint codec.
    #[serde(default)]
    pub serialize_boundary: bool,
    /// Server-side blend: new ATM = (1-mu)*aggregate + mu*previous global.
    #[serde(default)]
    pub server_atm_momentum: f64,
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 {
            return Err(Error::InvalidConfig("num_clients must be positive".into()));
        }
        if !(self.participation_rate > 0.0 && self.participation_rate <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "participation_rate must be in (0,1], got {}",
                self.participation_rate
            )));
        }
        if self.local_epochs == 0 || self.batch_size == 0 || self.window_length == 0 {
            return Err(Error::InvalidConfig(
                "local_epochs, batch_size, window_length must be positive".into(),
            ));
        }
        if self.lambda < 0.0 {
            return Err(Error::InvalidConfig("lambda must be >= 0".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::InvalidConfig("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.server_atm_momentum) {
            return Err(Error::InvalidConfig(
                "server_atm_momentum must be in [0,1)".into(),
            ));
        }
        self.mask_spec.validate()
    }

    /// λ actually applied; the FedAvg baseline forces zero.
    pub fn effective_lambda(&self) -> f64 {
        if self.fedavg_baseline {
            0.0
        } else {
            self.lambda
        }
    }
}

/// One simulated client: its windowed data and the latest local parameters.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub client_id: usize,
    /// Training windows.
    pub dataset: Vec<TimeSeries>,
    /// Held-out windows for validation metrics.
    pub val_windows: Vec<TimeSeries>,
    pub n_samples: usize,
    pub local_params: Option<ParameterSet>,
    pub rng_seed: u64,
}

/// Non-overlapping windows of the given length.
pub fn windows_from_series(series: &TimeSeries, window: usize) -> Vec<TimeSeries> {
    let n = series.len() / window;
    (0..n).map(|i| series.slice(i * window, (i + 1) * window)).collect()
}

impl ClientState {
    pub fn from_series(
        client_id: usize,
        train: &TimeSeries,
        val: &TimeSeries,
        window: usize,
        rng_seed: u64,
    ) -> Self {
        let dataset = windows_from_series(train, window);
        let val_windows = windows_from_series(val, window);
        let n_samples = dataset.len();
        ClientState {
            client_id,
            dataset,
            val_windows,
            n_samples,
            local_params: None,
            rng_seed,
        }
    }
}

/// Build clients from synthetic specs; client seeds derive from the master.
pub fn build_clients(
    specs: &[SyntheticClientSpec],
    window: usize,
    master_seed: u64,
) -> Result<Vec<ClientState>> {
    specs
        .iter()
        .enumerate()
        .map(|(id, spec)| {
            let data = gen_synthetic_client(spec)?;
            Ok(ClientState::from_series(
                id,
                &data.train,
                &data.val,
                window,
                derive_seed(master_seed, "client", &[id as u64]),
            ))
        })
        .collect()
}

/// Sample `max(1, round(rate * n))` distinct client indices, ascending.
pub fn sample_clients(num_clients: usize, participation_rate: f64, round_seed: u64) -> Vec<usize> {
    let m = ((participation_rate * num_clients as f64).round() as usize)
        .max(1)
        .min(num_clients);
    let mut ids: Vec<usize> = (0..num_clients).collect();
    let mut rng = rng_from_seed(round_seed);
    for i in 0..m {
        let j = rng.gen_range(i..num_clients);
        ids.swap(i, j);
    }
    let mut picked = ids[..m].to_vec();
    picked.sort_unstable();
    picked
}

/// Result of one client's local update.
#[derive(Debug, Clone)]
pub struct LocalUpdate {
    pub client_id: usize,
    pub params: ParameterSet,
    pub n_samples: usize,
    pub mean_loss: f64,
}

/// Training mask for a sample. A draw with no masked points leaves the
/// reconstruction objective empty, so such draws are deterministically
/// redrawn from a derived retry stream.
fn sample_mask_for(
    series: &TimeSeries,
    fed: &FedConfig,
    seed: u64,
) -> crate::data::MaskMatrix {
    for retry in 0.. {
        let s = if retry == 0 {
            seed
        } else {
            derive_seed(seed, "mask_retry", &[retry])
        };
        let m = if fed.shared_mask {
            sample_mask_shared(series.len(), series.channels(), &fed.mask_spec, s)
        } else {
            sample_mask(series.len(), series.channels(), &fed.mask_spec, s)
        };
        if m.masked_count() > 0 {
            return m;
        }
    }
    unreachable!()
}

/// Run E epochs of minibatch SGD on the masked-reconstruction objective,
/// with the alignment target Θ̂_T fixed to the broadcast global subset.
/// The received `global_params` are never mutated.
pub fn local_update(
    global_params: &ParameterSet,
    client: &ClientState,
    model_cfg: &ModelConfig,
    fed: &FedConfig,
    round_index: usize,
) -> Result<LocalUpdate> {
    if client.dataset.is_empty() {
        return Err(Error::EmptyDataset(client.client_id));
    }
    let lambda = fed.effective_lambda();
    let theta_hat = global_params.atm_subset();
    let mut local = global_params.clone();
    let mut opt = Sgd::new(fed.learning_rate, fed.momentum);
    let mut loss_sum = 0.0;
    let mut loss_count = 0usize;

    for epoch in 0..fed.local_epochs {
        let mut order: Vec<usize> = (0..client.dataset.len()).collect();
        let mut rng = rng_from_seed(derive_seed(
            client.rng_seed,
            "order",
            &[round_index as u64, epoch as u64],
        ));
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for batch in order.chunks(fed.batch_size) {
            let mut grads = local.zeros_like();
            let mut batch_loss = 0.0;
            for &s in batch {
                let sample = &client.dataset[s];
                let mask_seed = derive_seed(
                    client.rng_seed,
                    "mask",
                    &[round_index as u64, epoch as u64, s as u64],
                );
                let mask = sample_mask_for(sample, fed, mask_seed);
                let (loss, g) =
                    loss_and_grads(sample, &mask, &local, model_cfg, Some(&theta_hat), lambda)?;
                grads.scaled_add(&g, 1.0)?;
                batch_loss += loss;
            }
            grads.scale_in_place(1.0 / batch.len() as f64);
            opt.step(&mut local, &grads)?;
            loss_sum += batch_loss / batch.len() as f64;
            loss_count += 1;
        }
    }

    Ok(LocalUpdate {
        client_id: client.client_id,
        params: local,
        n_samples: client.n_samples,
        mean_loss: loss_sum / loss_count as f64,
    })
}

/// Sample-weighted mean of parameter sets, accumulated in input order.
/// Callers pass results sorted by client id, fixing the reduction order.
pub fn aggregate(results: &[(ParameterSet, usize)]) -> Result<ParameterSet> {
    if results.is_empty() {
        return Err(Error::InvalidConfig("aggregate needs at least one client".into()));
    }
    if results.len() == 1 {
        return Ok(results[0].0.clone());
    }
    let total: usize = results.iter().map(|(_, n)| n).sum();
    if total == 0 {
        return Err(Error::InvalidConfig("aggregate got zero total samples".into()));
    }
    let mut acc = results[0].0.zeros_like();
    for (params, n) in results {
        acc.scaled_add(params, *n as f64 / total as f64)?;
    }
    Ok(acc)
}

/// Per-client loss entry of a round report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClientRoundEntry {
    pub client_id: usize,
    pub n_samples: usize,
    pub mean_loss: f64,
}

/// Record of one communication round.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundReport {
    pub round_index: usize,
    pub participants: Vec<usize>,
    pub client_losses: Vec<ClientRoundEntry>,
    /// Σ (n_i / Σ n_j) * loss_i over participants.
    pub weighted_global_loss: f64,
    /// Quarantined to this single field so determinism checks can strip it.
    pub wall_time_ms: u64,
}

fn broadcast_params(server: &ParameterSet, fed: &FedConfig) -> Result<ParameterSet> {
    if fed.serialize_boundary {
        let bytes = crate::harness::checkpoint_to_bytes(server, &Default::default())?;
        let (params, _) = crate::harness::checkpoint_from_bytes(&bytes)?;
        Ok(params)
    } else {
        Ok(server.clone())
    }
}

/// One synchronous round: sample, broadcast, parallel local updates over
/// the participants only, then sample-weighted aggregation.
pub fn run_round(
    server_params: &ParameterSet,
    clients: &mut [ClientState],
    model_cfg: &ModelConfig,
    fed: &FedConfig,
    round_index: usize,
) -> Result<(ParameterSet, RoundReport)> {
    let start = std::time::Instant::now();
    let participants = sample_clients(
        fed.num_clients,
        fed.participation_rate,
        derive_seed(fed.seed, "participation", &[round_index as u64]),
    );
    let broadcast = broadcast_params(server_params, fed)?;

    let updates: Vec<LocalUpdate> = participants
        .par_iter()
        .map(|&cid| local_update(&broadcast, &clients[cid], model_cfg, fed, round_index))
        .collect::<Result<Vec<_>>>()?;

    let results: Vec<(ParameterSet, usize)> = updates
        .iter()
        .map(|u| (u.params.clone(), u.n_samples))
        .collect();
    let mut new_params = aggregate(&results)?;

    let mu = fed.server_atm_momentum;
    if mu > 0.0 {
        for name in server_params.atm_names().clone() {
            let prev = server_params.get(&name)?.clone();
            let t = new_params.get_mut(&name)?;
            for (nv, pv) in t.data.iter_mut().zip(&prev.data) {
                *nv = (1.0 - mu) * *nv + mu * pv;
            }
        }
    }

    let total: usize = updates.iter().map(|u| u.n_samples).sum();
    let weighted_global_loss = updates
        .iter()
        .map(|u| u.n_samples as f64 / total as f64 * u.mean_loss)
        .sum();
    let client_losses = updates
        .iter()
        .map(|u| ClientRoundEntry {
            client_id: u.client_id,
            n_samples: u.n_samples,
            mean_loss: u.mean_loss,
        })
        .collect();
    for u in updates {
        clients[u.client_id].local_params = Some(u.params);
    }

    Ok((
        new_params,
        RoundReport {
            round_index,
            participants,
            client_losses,
            weighted_global_loss,
            wall_time_ms: start.elapsed().as_millis() as u64,
        },
    ))
}

/// Full pretraining: R rounds from freshly initialized parameters,
/// deterministic end-to-end per master seed.
pub fn run_pretraining(
    model_cfg: &ModelConfig,
    fed: &FedConfig,
    specs: &[SyntheticClientSpec],
) -> Result<(ParameterSet, Vec<RoundReport>)> {
    model_cfg.validate()?;
    fed.validate()?;
    if specs.len() != fed.num_clients {
        return Err(Error::InvalidConfig(format!(
            "num_clients is {} but {} client specs were given",
            fed.num_clients,
            specs.len()
        )));
    }
    let mut clients = build_clients(specs, fed.window_length, fed.seed)?;
    run_pretraining_with_clients(model_cfg, fed, &mut clients)
}

/// Pretraining over pre-built clients (e.g. loaded from files).
pub fn run_pretraining_with_clients(
    model_cfg: &ModelConfig,
    fed: &FedConfig,
    clients: &mut [ClientState],
) -> Result<(ParameterSet, Vec<RoundReport>)> {
    let mut params = init_params(model_cfg, derive_seed(fed.seed, "init", &[]));
    let mut reports = Vec::with_capacity(fed.rounds);
    for round in 0..fed.rounds {
        let (next, report) = run_round(&params, clients, model_cfg, fed, round)?;
        params = next;
        reports.push(report);
    }
    Ok((params, reports))
}

/// Masked-reconstruction MSE of `params` on a client's validation windows.
/// Mask seeds depend only on the client seed and window index, so repeated
/// evaluations are comparable.
pub fn client_val_mse(
    params: &ParameterSet,
    client: &ClientState,
    model_cfg: &ModelConfig,
    fed: &FedConfig,
) -> Result<f64> {
    if client.val_windows.is_empty() {
        return Err(Error::EmptyDataset(client.client_id));
    }
    let mut sum = 0.0;
    for (w, window) in client.val_windows.iter().enumerate() {
        let seed = derive_seed(client.rng_seed, "val_mask", &[w as u64]);
        let mask = sample_mask_for(window, fed, seed);
        let trace = crate::model::forward(window, &mask, params, model_cfg)?;
        let m = mask.masked_count().max(1) as f64;
        let mut err = 0.0;
        for t in 0..window.len() {
            for c in 0..window.channels() {
                if !mask.visible(t, c) {
                    let d = trace.x_hat.values.at(t, c) - window.values.at(t, c);
                    err += d * d;
                }
            }
        }
        sum += err / m;
    }
    Ok(sum / client.val_windows.len() as f64)
}

/// Sample-weighted mean validation MSE across clients.
pub fn weighted_val_mse(
    params: &ParameterSet,
    clients: &[ClientState],
    model_cfg: &ModelConfig,
    fed: &FedConfig,
) -> Result<f64> {
    let total: usize = clients.iter().map(|c| c.n_samples).sum();
    let mut acc = 0.0;
    for client in clients {
        let mse = client_val_mse(params, client, model_cfg, fed)?;
        acc += client.n_samples as f64 / total as f64 * mse;
    }
    Ok(acc)
}

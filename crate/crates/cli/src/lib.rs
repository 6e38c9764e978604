//! `fedts` command-line interface: data generation, federated pretraining,
//! downstream fine-tuning and evaluation, and single-axis ablation sweeps.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use fedts_core::data::{import_series, split_series, TimeSeries};
use fedts_core::downstream::{
    attach_head, evaluate_anomaly, evaluate_forecast, evaluate_impute, finetune, CompositeModel,
    EvalReport, Task, TaskSpec,
};
use fedts_core::fed::{run_round, weighted_val_mse, ClientState, RoundReport};
use fedts_core::harness::{
    append_report_jsonl, config_hash, load_checkpoint, load_config, save_checkpoint,
    with_worker_pool, CheckpointMeta, ClientSource, ExperimentConfig,
};
use fedts_core::model::{init_params, ParameterSet};
use fedts_core::seed::derive_seed;

pub const ENV_OUTPUT_DIR: &str = "FEDTS_OUTPUT_DIR";
pub const ENV_WORKERS: &str = "FEDTS_WORKERS";

#[derive(Parser)]
#[command(
    name = "fedts",
    version,
    about = "Federated masked-pretraining simulator for time-series foundation models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write one dataset file per synthetic client.
    GenData(GenDataArgs),
    /// Run federated pretraining and write round reports plus checkpoints.
    Pretrain(PretrainArgs),
    /// Attach a task head to a pretrained checkpoint and fine-tune it.
    Finetune(FinetuneArgs),
    /// Evaluate a fine-tuned checkpoint on a dataset file.
    Evaluate(EvaluateArgs),
    /// Sweep one axis (k, lambda, prtp, expert-subset) and tabulate losses.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Override the number of communication rounds.
    #[arg(long)]
    rounds: Option<usize>,
    /// Worker-pool size for parallel client updates.
    #[arg(long)]
    workers: Option<usize>,
    /// Also write a checkpoint every N rounds.
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Copy, Clone, ValueEnum)]
enum TaskArg {
    Forecast,
    Impute,
    Detect,
}

#[derive(Args)]
struct FinetuneArgs {
    /// Pretraining checkpoint to start from.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Training dataset file.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    task: TaskArg,
    #[arg(long, default_value_t = 96)]
    horizon: usize,
    #[arg(long, default_value_t = 0.25)]
    mask_ratio: f64,
    #[arg(long, default_value_t = 0.99)]
    quantile: f64,
    #[arg(long, default_value_t = 512)]
    lookback: usize,
    #[arg(long)]
    freeze_encoder: bool,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Fraction of training windows to use (few-shot).
    #[arg(long, default_value_t = 1.0)]
    fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Fine-tuned checkpoint (with an embedded task).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Evaluation dataset file.
    #[arg(long)]
    data: PathBuf,
    /// Forecast evaluation stride.
    #[arg(long, default_value_t = 1)]
    stride: usize,
    /// Also report SMAPE (short-term forecasting mode).
    #[arg(long)]
    short_term: bool,
    /// Anomaly detection: training data for the score distribution.
    #[arg(long)]
    train_data: Option<PathBuf>,
    /// Anomaly detection: JSON array of 0/1 labels for the test data.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Copy, Clone, ValueEnum)]
enum AblationAxis {
    K,
    Lambda,
    Prtp,
    ExpertSubset,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_enum)]
    axis: AblationAxis,
    /// Comma-separated values; expert subsets use `+` within a subset,
    /// e.g. `0,0+1,0+1+2,0+1+2+3`.
    #[arg(long)]
    values: String,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

struct CliError {
    code: i32,
    msg: String,
}

type CliResult<T> = Result<T, CliError>;

fn user_err(msg: impl std::fmt::Display) -> CliError {
    CliError {
        code: 1,
        msg: msg.to_string(),
    }
}

fn internal_err(msg: impl std::fmt::Display) -> CliError {
    CliError {
        code: 2,
        msg: msg.to_string(),
    }
}

/// Errors raised while loading user inputs are user errors; anything that
/// fails later, inside a pipeline, is internal.
fn run_err(e: impl std::fmt::Display) -> CliError {
    internal_err(e)
}

/// Entry point used by both `main` and the test suite.
pub fn run_cli(args: &[String]) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            // clap renders its own usage text; --help/--version exit cleanly.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Finetune(a) => finetune_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Ablate(a) => ablate(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.msg);
            e.code
        }
    }
}

fn resolve_out_dir(flag: Option<PathBuf>, from_config: Option<&Path>) -> PathBuf {
    flag.or_else(|| std::env::var(ENV_OUTPUT_DIR).ok().map(PathBuf::from))
        .or_else(|| from_config.map(Path::to_path_buf))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn resolve_workers(flag: Option<usize>) -> Option<usize> {
    flag.or_else(|| {
        std::env::var(ENV_WORKERS)
            .ok()
            .and_then(|v| v.parse().ok())
    })
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(user_err)
}

fn load_experiment(path: &Path) -> CliResult<(ExperimentConfig, String)> {
    let cfg = load_config(path).map_err(user_err)?;
    let hash = config_hash(&cfg);
    Ok((cfg, hash))
}

fn client_file_name(i: usize) -> String {
    format!("client_{i:03}.fts")
}

fn gen_data(a: GenDataArgs) -> CliResult<()> {
    let (cfg, hash) = load_experiment(&a.config)?;
    let out = resolve_out_dir(a.out, Some(&cfg.output_dir));
    ensure_dir(&out)?;
    let specs = match &cfg.clients {
        ClientSource::Synthetic(specs) => specs,
        ClientSource::Files(_) => {
            return Err(user_err("gen-data needs synthetic client specs in the config"))
        }
    };
    for (i, spec) in specs.iter().enumerate() {
        let series = fedts_core::data::gen_synthetic_series(spec).map_err(run_err)?;
        let path = out.join(client_file_name(i));
        fedts_core::data::export_series(&path, &series, spec.seed).map_err(run_err)?;
        println!("wrote {}", path.display());
    }
    println!("config hash {hash}");
    Ok(())
}

fn load_clients(cfg: &ExperimentConfig) -> CliResult<Vec<ClientState>> {
    match &cfg.clients {
        ClientSource::Synthetic(specs) => {
            fedts_core::fed::build_clients(specs, cfg.fed.window_length, cfg.fed.seed)
                .map_err(run_err)
        }
        ClientSource::Files(paths) => paths
            .iter()
            .enumerate()
            .map(|(id, path)| {
                let (series, _) = import_series(path).map_err(user_err)?;
                let data = split_series(&series, fedts_core::data::TRAIN_FRACTION);
                Ok(ClientState::from_series(
                    id,
                    &data.train,
                    &data.val,
                    cfg.fed.window_length,
                    derive_seed(cfg.fed.seed, "client", &[id as u64]),
                ))
            })
            .collect(),
    }
}

fn pretrain(a: PretrainArgs) -> CliResult<()> {
    let (mut cfg, hash) = load_experiment(&a.config)?;
    if let Some(rounds) = a.rounds {
        cfg.fed.rounds = rounds;
    }
    let out = resolve_out_dir(a.out, Some(&cfg.output_dir));
    ensure_dir(&out)?;
    let workers = resolve_workers(a.workers);
    let mut clients = load_clients(&cfg)?;

    let reports_path = out.join("rounds.jsonl");
    if reports_path.exists() {
        std::fs::remove_file(&reports_path).map_err(user_err)?;
    }

    if a.checkpoint_every == Some(0) {
        return Err(user_err("--checkpoint-every must be positive"));
    }

    let model_cfg = cfg.model.clone();
    let fed_cfg = cfg.fed.clone();
    let checkpoint_every = a.checkpoint_every;
    let out_dir = out.clone();
    let run_hash = hash.clone();
    let run = move || -> fedts_core::Result<(ParameterSet, Vec<RoundReport>)> {
        let mut params = init_params(&model_cfg, derive_seed(fed_cfg.seed, "init", &[]));
        let mut reports = Vec::with_capacity(fed_cfg.rounds);
        for round in 0..fed_cfg.rounds {
            let (next, report) = run_round(&params, &mut clients, &model_cfg, &fed_cfg, round)?;
            params = next;
            append_report_jsonl(&reports_path, &report)?;
            if let Some(every) = checkpoint_every {
                if (round + 1) % every == 0 {
                    let meta = CheckpointMeta {
                        config_hash: run_hash.clone(),
                        round_index: round + 1,
                        model: Some(model_cfg.clone()),
                        task: None,
                    };
                    let path = out_dir.join(format!("checkpoint_round_{:04}.ckpt", round + 1));
                    save_checkpoint(&params, &meta, &path)?;
                }
            }
            reports.push(report);
        }
        Ok((params, reports))
    };
    let (params, reports) = with_worker_pool(workers, run)
        .map_err(run_err)?
        .map_err(run_err)?;

    for report in &reports {
        println!(
            "round {:>4}  participants {:>2}  weighted loss {:.6}",
            report.round_index,
            report.participants.len(),
            report.weighted_global_loss
        );
    }

    let meta = CheckpointMeta {
        config_hash: hash.clone(),
        round_index: cfg.fed.rounds,
        model: Some(cfg.model.clone()),
        task: None,
    };
    let ckpt = out.join("checkpoint_final.ckpt");
    save_checkpoint(&params, &meta, &ckpt).map_err(run_err)?;
    println!("wrote {}", ckpt.display());
    println!("config hash {hash}");
    Ok(())
}

fn task_spec_from_args(a: &FinetuneArgs) -> TaskSpec {
    let task = match a.task {
        TaskArg::Forecast => Task::Forecast { horizon: a.horizon },
        TaskArg::Impute => Task::Impute {
            mask_ratio: a.mask_ratio,
        },
        TaskArg::Detect => Task::Detect {
            anomaly_quantile: a.quantile,
        },
    };
    TaskSpec {
        task,
        freeze_encoder: a.freeze_encoder,
        lookback: a.lookback,
    }
}

/// Merge encoder and head tensors into one set for checkpointing.
fn merge_composite(model: &CompositeModel) -> ParameterSet {
    let mut merged = ParameterSet::new();
    for (name, m) in model.encoder.iter() {
        merged.push(name.to_string(), m.clone(), model.encoder.is_atm(name));
    }
    for (name, m) in model.head.iter() {
        merged.push(name.to_string(), m.clone(), false);
    }
    merged
}

fn split_composite(
    params: &ParameterSet,
    meta: &CheckpointMeta,
) -> CliResult<CompositeModel> {
    let model_cfg = meta
        .model
        .clone()
        .ok_or_else(|| user_err("checkpoint has no embedded model config"))?;
    let spec = meta
        .task
        .clone()
        .ok_or_else(|| user_err("checkpoint has no task head; run `fedts finetune` first"))?;
    let mut encoder = ParameterSet::new();
    let mut head = ParameterSet::new();
    for (name, m) in params.iter() {
        if name.starts_with("head.") {
            head.push(name.to_string(), m.clone(), false);
        } else {
            encoder.push(name.to_string(), m.clone(), params.is_atm(name));
        }
    }
    Ok(CompositeModel {
        encoder,
        head,
        model_cfg,
        spec,
    })
}

fn load_series_arg(path: &Path) -> CliResult<TimeSeries> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        return fedts_core::data::import_csv_series(path, 1).map_err(user_err);
    }
    let (series, _) = import_series(path).map_err(user_err)?;
    Ok(series)
}

fn finetune_cmd(a: FinetuneArgs) -> CliResult<()> {
    let (params, meta) = load_checkpoint(&a.checkpoint, None).map_err(user_err)?;
    let model_cfg = meta
        .model
        .clone()
        .ok_or_else(|| user_err("checkpoint has no embedded model config"))?;
    let spec = task_spec_from_args(&a);
    spec.validate().map_err(user_err)?;
    let series = load_series_arg(&a.data)?;
    let out = resolve_out_dir(a.out, None);
    ensure_dir(&out)?;

    let mut model = attach_head(&params, &model_cfg, &spec, a.seed).map_err(run_err)?;
    let losses =
        finetune(&mut model, &series, a.epochs, a.lr, a.fraction, a.seed).map_err(run_err)?;
    if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
        println!("train loss {first:.6} -> {last:.6} over {} epochs", losses.len());
    } else {
        println!("zero-shot attach: no fine-tuning epochs");
    }

    let merged = merge_composite(&model);
    let task_name = match spec.task {
        Task::Forecast { .. } => "forecast",
        Task::Impute { .. } => "impute",
        Task::Detect { .. } => "detect",
    };
    let ckpt_meta = CheckpointMeta {
        config_hash: meta.config_hash.clone(),
        round_index: meta.round_index,
        model: Some(model_cfg),
        task: Some(spec),
    };
    let path = out.join(format!("finetuned_{task_name}.ckpt"));
    save_checkpoint(&merged, &ckpt_meta, &path).map_err(run_err)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn evaluate_cmd(a: EvaluateArgs) -> CliResult<()> {
    let (params, meta) = load_checkpoint(&a.checkpoint, None).map_err(user_err)?;
    let model = split_composite(&params, &meta)?;
    let series = load_series_arg(&a.data)?;
    let out = resolve_out_dir(a.out, None);
    ensure_dir(&out)?;

    let mut report: EvalReport = match model.spec.task {
        Task::Forecast { .. } => {
            evaluate_forecast(&model, &series, a.stride.max(1), a.short_term).map_err(run_err)?
        }
        Task::Impute { mask_ratio } => {
            evaluate_impute(&model, &series, mask_ratio, a.seed).map_err(run_err)?
        }
        Task::Detect { anomaly_quantile } => {
            let train_path = a
                .train_data
                .as_ref()
                .ok_or_else(|| user_err("anomaly evaluation needs --train-data"))?;
            let labels_path = a
                .labels
                .as_ref()
                .ok_or_else(|| user_err("anomaly evaluation needs --labels"))?;
            let train = load_series_arg(train_path)?;
            let labels: Vec<u8> = serde_json::from_str(
                &std::fs::read_to_string(labels_path).map_err(user_err)?,
            )
            .map_err(user_err)?;
            let plain = evaluate_anomaly(&model, &train, &series, &labels, anomaly_quantile, false)
                .map_err(run_err)?;
            let adjusted =
                evaluate_anomaly(&model, &train, &series, &labels, anomaly_quantile, true)
                    .map_err(run_err)?;
            let mut merged = plain;
            for (k, v) in adjusted.metrics {
                if k != "threshold" {
                    merged.metrics.insert(format!("{k}_adjusted"), v);
                }
            }
            merged
        }
    };
    report.dataset = a.data.display().to_string();
    report.config_hash = meta.config_hash.clone();

    let path = out.join(format!("eval_{}.json", report.task));
    std::fs::write(&path, serde_json::to_string_pretty(&report).map_err(run_err)?)
        .map_err(run_err)?;
    for (k, v) in &report.metrics {
        println!("{k:>20}  {v:.6}");
    }
    println!("wrote {}", path.display());
    Ok(())
}

#[derive(serde::Serialize)]
struct AblationRow {
    axis: String,
    value: String,
    rounds: usize,
    final_train_loss: f64,
    val_mse: f64,
}

fn parse_subset(token: &str) -> CliResult<Option<Vec<usize>>> {
    if token == "all" {
        return Ok(None);
    }
    let subset: Result<Vec<usize>, _> = token.split('+').map(str::parse).collect();
    subset
        .map(Some)
        .map_err(|e| user_err(format!("bad expert subset `{token}`: {e}")))
}

fn ablate(a: AblateArgs) -> CliResult<()> {
    let (mut cfg, _) = load_experiment(&a.config)?;
    if let Some(rounds) = a.rounds {
        cfg.fed.rounds = rounds;
    }
    if cfg.fed.rounds == 0 {
        return Err(user_err("ablation needs at least one round"));
    }
    let out = resolve_out_dir(a.out, Some(&cfg.output_dir));
    ensure_dir(&out)?;
    let workers = resolve_workers(a.workers);

    let axis_name = match a.axis {
        AblationAxis::K => "k",
        AblationAxis::Lambda => "lambda",
        AblationAxis::Prtp => "prtp",
        AblationAxis::ExpertSubset => "expert-subset",
    };
    let tokens: Vec<&str> = a.values.split(',').filter(|t| !t.is_empty()).collect();
    if tokens.is_empty() {
        return Err(user_err("--values must list at least one value"));
    }

    let mut rows = Vec::with_capacity(tokens.len());
    for token in &tokens {
        let mut variant = cfg.clone();
        match a.axis {
            AblationAxis::K => {
                variant.model.top_k = token
                    .parse()
                    .map_err(|e| user_err(format!("bad k `{token}`: {e}")))?;
            }
            AblationAxis::Lambda => {
                variant.fed.lambda = token
                    .parse()
                    .map_err(|e| user_err(format!("bad lambda `{token}`: {e}")))?;
            }
            AblationAxis::Prtp => {
                variant.fed.participation_rate = token
                    .parse()
                    .map_err(|e| user_err(format!("bad participation rate `{token}`: {e}")))?;
            }
            AblationAxis::ExpertSubset => {
                variant.model.expert_subset = parse_subset(token)?;
            }
        }
        variant.validate().map_err(user_err)?;

        let mut clients = load_clients(&variant)?;
        let model_cfg = variant.model.clone();
        let fed_cfg = variant.fed.clone();
        let run = move || -> fedts_core::Result<(f64, f64)> {
            let mut params = init_params(&model_cfg, derive_seed(fed_cfg.seed, "init", &[]));
            let mut last_loss = f64::NAN;
            for round in 0..fed_cfg.rounds {
                let (next, report) =
                    run_round(&params, &mut clients, &model_cfg, &fed_cfg, round)?;
                params = next;
                last_loss = report.weighted_global_loss;
            }
            let val = weighted_val_mse(&params, &clients, &model_cfg, &fed_cfg)?;
            Ok((last_loss, val))
        };
        let (final_train_loss, val_mse) = with_worker_pool(workers, run)
            .map_err(run_err)?
            .map_err(run_err)?;
        println!(
            "{axis_name} = {token:>12}  rounds {:>4}  train loss {final_train_loss:.6}  val mse {val_mse:.6}",
            cfg.fed.rounds
        );
        rows.push(AblationRow {
            axis: axis_name.to_string(),
            value: token.to_string(),
            rounds: cfg.fed.rounds,
            final_train_loss,
            val_mse,
        });
    }

    let path = out.join(format!("ablation_{axis_name}.json"));
    std::fs::write(&path, serde_json::to_string_pretty(&rows).map_err(run_err)?)
        .map_err(run_err)?;
    println!("wrote {}", path.display());
    Ok(())
}

//! The `stfnn` command line.

use std::collections::BTreeSet;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::checks::run_all;
use crate::error::{Error, Result};
use crate::experiment::{
    prepare_data, run_curl_report, run_eval, run_synth, run_train, ExperimentConfig,
};
use crate::geodata::{build_context, load_observations, parse_timestamp, CsvSchema};
use crate::model::Checkpoint;
use crate::training::TrainConfig;

#[derive(Debug, Parser)]
#[command(name = "stfnn", version, about = "Spatio-temporal field inference from station networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset and its analytic oracle.
    Synth {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train a model; writes the checkpoint, epoch checkpoints and the log.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the masked-station sweep over all configured models.
    Eval {
        #[arg(long)]
        config: PathBuf,
    },
    /// Infer one point, printing per-neighbor provenance as JSON.
    Infer {
        #[arg(long, allow_hyphen_values = true)]
        lng: f64,
        #[arg(long, allow_hyphen_values = true)]
        lat: f64,
        /// Timestamp, RFC 3339 or `YYYY-MM-DD HH:MM[:SS]` (UTC).
        #[arg(long)]
        time: String,
        /// Defaults to `<output_dir>/model.ckpt.json` of `--config`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Observation CSV supplying the neighborhood; defaults to the
        /// config's data section.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Curl of the learned field at every saved epoch checkpoint.
    CurlReport {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the invariant suite; exits nonzero on any failure.
    Check {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Debug, Serialize)]
struct Neighbor {
    station_id: String,
    timestamp: String,
    value: f64,
    estimate: f64,
    residual: f64,
    weight: f64,
}

#[derive(Debug, Serialize)]
struct InferOutput {
    lng: f64,
    lat: f64,
    time: String,
    timestep: String,
    estimate: f64,
    neighbors: Vec<Neighbor>,
}

fn init_logging() {
    let level = std::env::var("STF_LOG_LEVEL").unwrap_or_else(|_| "info".into());
    let _ = env_logger::Builder::new()
        .parse_filters(&level)
        .format_timestamp(None)
        .try_init();
}

fn infer(
    lng: f64,
    lat: f64,
    time: &str,
    checkpoint: Option<PathBuf>,
    data: Option<PathBuf>,
    config: Option<PathBuf>,
) -> Result<InferOutput> {
    let cfg = config.map(ExperimentConfig::load).transpose()?;
    let ckpt_path = checkpoint
        .or_else(|| cfg.as_ref().map(|c| c.checkpoint_path()))
        .ok_or_else(|| Error::Param("infer needs --checkpoint or --config".into()))?;
    let ckpt = Checkpoint::load(&ckpt_path)?;
    let model = ckpt.to_model()?;
    let normalizer = ckpt
        .normalizer
        .clone()
        .ok_or_else(|| Error::Checkpoint("checkpoint carries no normalizer".into()))?;
    let mut dataset = match (data, &cfg) {
        (Some(path), _) => {
            let schema = cfg.as_ref().map(|c| c.data.schema.clone()).unwrap_or_else(CsvSchema::default);
            load_observations(&path, &schema)?
        }
        (None, Some(cfg)) => prepare_data(cfg)?.dataset,
        (None, None) => return Err(Error::Param("infer needs --data or --config".into())),
    };
    dataset.normalizer = Some(normalizer.clone());
    let train = cfg.map(|c| c.train).unwrap_or_else(TrainConfig::default);

    let ts = parse_timestamp(time)
        .ok_or_else(|| Error::Param(format!("cannot parse timestamp {time:?}")))?;
    let t = dataset.timestep_at_or_before(ts).ok_or_else(|| {
        Error::InsufficientContext(format!("{time} precedes the first observation"))
    })?;
    let target = normalizer.coordinate(lng, lat, dataset.days_at(ts));
    let ctx = build_context(&dataset, target, t, train.k_spatial, train.t_hist, &BTreeSet::new())?;
    let est = model.pyramidal_infer(&ctx)?;
    let neighbors = ctx
        .sources
        .iter()
        .enumerate()
        .map(|(i, s)| Neighbor {
            station_id: dataset.stations[s.station].station_id.clone(),
            timestamp: dataset.timestamps[s.timestep].to_rfc3339(),
            value: normalizer.denormalize_target(s.value),
            estimate: normalizer.denormalize_target(est.per_source_estimates[i]),
            residual: est.residuals[i] * normalizer.target_std,
            weight: est.weights[i],
        })
        .collect();
    Ok(InferOutput {
        lng,
        lat,
        time: ts.to_rfc3339(),
        timestep: dataset.timestamps[t].to_rfc3339(),
        estimate: normalizer.denormalize_target(est.y_hat),
        neighbors,
    })
}

fn dispatch(command: Command) -> Result<bool> {
    match command {
        Command::Synth { config } => {
            let cfg = ExperimentConfig::load(config)?;
            for p in run_synth(&cfg)? {
                println!("{}", p.display());
            }
        }
        Command::Train { config } => {
            let cfg = ExperimentConfig::load(config)?;
            let out = run_train(&cfg)?;
            let best = &out.log.records[out.log.best_epoch - 1];
            println!(
                "best epoch {} val MAE {:.4} -> {}",
                out.log.best_epoch,
                best.val_mae,
                cfg.checkpoint_path().display()
            );
        }
        Command::Eval { config } => {
            let cfg = ExperimentConfig::load(config)?;
            print!("{}", run_eval(&cfg, None)?.to_table());
        }
        Command::Infer {
            lng,
            lat,
            time,
            checkpoint,
            data,
            config,
        } => {
            let out = infer(lng, lat, &time, checkpoint, data, config)?;
            println!("{}", serde_json::to_string_pretty(&out)?);
        }
        Command::CurlReport { config } => {
            let cfg = ExperimentConfig::load(config)?;
            for p in run_curl_report(&cfg)? {
                println!("epoch {:>4}  mean_curl_norm {:.6e}", p.epoch, p.mean_curl_norm);
            }
        }
        Command::Check { config } => {
            let cfg = ExperimentConfig::load(config)?;
            let results = run_all(cfg.seed);
            let mut ok = true;
            for r in &results {
                ok &= r.passed;
                println!(
                    "{} {}{}",
                    if r.passed { "PASS" } else { "FAIL" },
                    r.name,
                    if r.detail.is_empty() {
                        String::new()
                    } else {
                        format!(" ({})", r.detail)
                    }
                );
            }
            return Ok(ok);
        }
    }
    Ok(true)
}

/// Parses `argv` (including the program name) and runs one subcommand.
/// Returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    init_logging();
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

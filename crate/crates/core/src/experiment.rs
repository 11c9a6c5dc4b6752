//! JSON experiment configs and the pipeline steps behind the CLI: data
//! preparation, training with epoch checkpoints, the evaluation sweep and
//! the curl series.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::baselines::{BaselineConfig, IdwSes, Knn, Mean};
use crate::diagnostics::{model_curl, Domain};
use crate::error::{Error, Result};
use crate::evalsuite::{mask_sweep, write_predictions_csv, Predictor, SweepReport, SweepSpec};
use crate::geodata::{
    filter_missing, fit_normalizer, generate_synthetic, load_observations, write_observations,
    AnalyticField, CsvSchema, GeneratorSpec, Split, StationDataset,
};
use crate::model::{Checkpoint, FieldModel, ModelConfig};
use crate::training::{train_with, EpochRecord, TrainConfig, TrainLog, TrainObserver};

/// Offsets added to the experiment seed, one per consumer.
pub mod seed_role {
    pub const SYNTH: u64 = 10_000;
    pub const MODEL_INIT: u64 = 20_000;
    pub const TRAIN: u64 = 30_000;
    pub const EVAL_MASK: u64 = 50_000;
    pub const DIAG: u64 = 60_000;
}

pub fn derive_seed(seed: u64, role: u64) -> u64 {
    seed.wrapping_add(role)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Generate a synthetic scene. Exactly one of `synthetic` and `csv`.
    pub synthetic: Option<GeneratorSpec>,
    /// Observation CSV, relative to the config file.
    pub csv: Option<PathBuf>,
    pub schema: CsvSchema,
    pub missing_threshold: f64,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    /// Days per unit of normalized time.
    pub time_scale: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            synthetic: None,
            csv: None,
            schema: CsvSchema::default(),
            missing_threshold: 0.5,
            train_fraction: 0.6,
            val_fraction: 0.2,
            test_fraction: 0.1,
            time_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Any of `STFNN`, `KNN`, `IDW+SES`, `mean`.
    pub models: Vec<String>,
    pub ratios: Vec<f64>,
    pub baselines: BaselineConfig,
    pub write_predictions: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            models: ["STFNN", "KNN", "IDW+SES", "mean"].map(String::from).to_vec(),
            ratios: vec![0.25, 0.5, 0.75],
            baselines: BaselineConfig::default(),
            write_predictions: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticsConfig {
    /// Curl sample count.
    pub q: usize,
    /// Finite-difference step.
    pub h: f64,
    /// Record a curl estimate in the training log every n epochs; 0 = never.
    pub curl_every_n_epochs: usize,
    /// Epochs whose parameters are saved under `checkpoints/`. The final
    /// epoch is always saved.
    pub checkpoint_epochs: Vec<usize>,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self {
            q: 256,
            h: 1e-3,
            curl_every_n_epochs: 0,
            checkpoint_epochs: vec![1, 10, 50],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub diagnostics: DiagnosticsConfig,
    /// Relative to the config file.
    pub output_dir: PathBuf,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataConfig {
                synthetic: Some(GeneratorSpec::default()),
                ..Default::default()
            },
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            diagnostics: DiagnosticsConfig::default(),
            output_dir: PathBuf::from("out"),
            seed: 0,
        }
    }
}

/// A default config with every optional field populated, used as the key
/// schema.
fn schema_value() -> Value {
    let mut full = ExperimentConfig::default();
    full.data.csv = Some(PathBuf::from("x"));
    full.data.synthetic.as_mut().unwrap().seed = Some(0);
    full.model.seed = Some(0);
    full.train.seed = Some(0);
    full.train.max_samples_per_epoch = Some(0);
    full.train.max_val_samples = Some(0);
    serde_json::to_value(full).expect("config serializes")
}

fn unknown_keys(value: &Value, schema: &Value, path: &str, out: &mut Vec<String>) {
    match (value, schema) {
        (Value::Object(v), Value::Object(s)) => {
            for (k, child) in v {
                let p = if path.is_empty() {
                    k.clone()
                } else {
                    format!("{path}.{k}")
                };
                match s.get(k) {
                    Some(sc) => unknown_keys(child, sc, &p, out),
                    None => out.push(p),
                }
            }
        }
        (Value::Array(v), Value::Array(s)) => {
            if let Some(sc) = s.first() {
                for (i, child) in v.iter().enumerate() {
                    unknown_keys(child, sc, &format!("{path}[{i}]"), out);
                }
            }
        }
        _ => {}
    }
}

impl ExperimentConfig {
    /// Parses and validates a config. Every unknown key is reported at once.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text)?;
        if !value.is_object() {
            return Err(Error::Schema("experiment config must be a JSON object".into()));
        }
        let mut keys = Vec::new();
        unknown_keys(&value, &schema_value(), "", &mut keys);
        if !keys.is_empty() {
            return Err(Error::ConfigKeys { keys });
        }
        let cfg: Self = serde_json::from_value(value).map_err(|e| Error::Schema(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        if let Some(csv) = cfg.data.csv.as_mut() {
            if csv.is_relative() {
                *csv = base.join(&*csv);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.synthetic.is_some() == d.csv.is_some() {
            return Err(Error::Schema(
                "data: set exactly one of `synthetic` and `csv`".into(),
            ));
        }
        Split::chronological(10, d.train_fraction, d.val_fraction, d.test_fraction)?;
        if !(d.time_scale > 0.0) {
            return Err(Error::Param("data.time_scale must be positive".into()));
        }
        self.model.validate()?;
        self.train.validate()?;
        self.eval.baselines.validate()?;
        for m in &self.eval.models {
            if !["STFNN", "KNN", "IDW+SES", "mean"].contains(&m.as_str()) {
                return Err(Error::Schema(format!("eval.models: unknown model {m:?}")));
            }
        }
        if self.eval.ratios.iter().any(|r| !(*r > 0.0 && *r < 1.0)) {
            return Err(Error::Param("eval.ratios must lie in (0, 1)".into()));
        }
        if self.diagnostics.q == 0 || !(self.diagnostics.h > 0.0) {
            return Err(Error::Param("diagnostics.q and diagnostics.h must be positive".into()));
        }
        Ok(())
    }

    pub fn seed_for(&self, role: u64) -> u64 {
        derive_seed(self.seed, role)
    }

    /// Model config with seed and feature width filled in.
    pub fn resolved_model(&self, dataset: &StationDataset) -> ModelConfig {
        let mut m = self.model.clone();
        m.seed.get_or_insert(self.seed_for(seed_role::MODEL_INIT));
        if m.feature_dim == 0 {
            m.feature_dim = dataset.feature_dim();
        }
        m
    }

    pub fn resolved_train(&self) -> TrainConfig {
        let mut t = self.train.clone();
        t.seed.get_or_insert(self.seed_for(seed_role::TRAIN));
        t
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.output_dir.join("model.ckpt.json")
    }

    pub fn epoch_checkpoint_path(&self, epoch: usize) -> PathBuf {
        self.output_dir
            .join("checkpoints")
            .join(format!("epoch_{epoch:04}.json"))
    }
}

/// A dataset ready for training and evaluation.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub dataset: StationDataset,
    pub split: Split,
    /// Present for synthetic scenes.
    pub field: Option<AnalyticField>,
    pub spec: Option<GeneratorSpec>,
}

impl PreparedData {
    /// Bounding box of the station layout over the training time range.
    pub fn domain(&self) -> Result<Domain> {
        let ds = &self.dataset;
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for s in 0..ds.n_stations() {
            let c = ds.coord(s, 0)?;
            lo[0] = lo[0].min(c.x);
            lo[1] = lo[1].min(c.y);
            hi[0] = hi[0].max(c.x);
            hi[1] = hi[1].max(c.y);
        }
        let last = self.split.train.end.max(1) - 1;
        lo[2] = ds.coord(0, 0)?.tau;
        hi[2] = ds.coord(0, last)?.tau;
        Domain::new(lo, hi)
    }
}

/// Generates or loads the data, filters sparse timesteps, fits the
/// normalizer on the training prefix and splits the timeline.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let d = &cfg.data;
    let (raw, field, spec) = match (&d.synthetic, &d.csv) {
        (Some(spec), None) => {
            let mut spec = spec.clone();
            spec.seed.get_or_insert(cfg.seed_for(seed_role::SYNTH));
            spec.time_scale = d.time_scale;
            let (ds, field) = generate_synthetic(&spec)?;
            (ds, Some(field), Some(spec))
        }
        (None, Some(path)) => (load_observations(path, &d.schema)?, None, None),
        _ => {
            return Err(Error::Schema(
                "data: set exactly one of `synthetic` and `csv`".into(),
            ))
        }
    };
    let mut dataset = filter_missing(&raw, d.missing_threshold)?;
    dataset.normalizer = Some(fit_normalizer(&dataset, d.train_fraction, d.time_scale)?);
    let split = Split::chronological(
        dataset.n_timesteps(),
        d.train_fraction,
        d.val_fraction,
        d.test_fraction,
    )?;
    if split.train.is_empty() || split.val.is_empty() || split.test.is_empty() {
        return Err(Error::NoUsableData(format!(
            "{} timesteps are too few for the configured split",
            dataset.n_timesteps()
        )));
    }
    Ok(PreparedData {
        dataset,
        split,
        field,
        spec,
    })
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::file(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::file(path, e))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OracleFile {
    pub spec: GeneratorSpec,
    pub field: AnalyticField,
}

/// Writes `observations.csv` and `oracle.json` for a synthetic config.
pub fn run_synth(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let Some(spec) = &cfg.data.synthetic else {
        return Err(Error::Schema("synth requires a `data.synthetic` section".into()));
    };
    let mut spec = spec.clone();
    spec.seed.get_or_insert(cfg.seed_for(seed_role::SYNTH));
    spec.time_scale = cfg.data.time_scale;
    let (dataset, field) = generate_synthetic(&spec)?;
    create_dir(&cfg.output_dir)?;
    let csv = cfg.output_dir.join("observations.csv");
    write_observations(&dataset, &csv)?;
    let oracle = cfg.output_dir.join("oracle.json");
    write_text(
        &oracle,
        &(serde_json::to_string_pretty(&OracleFile { spec, field })? + "\n"),
    )?;
    Ok(vec![csv, oracle])
}

struct PipelineObserver<'a> {
    cfg: &'a ExperimentConfig,
    data: &'a PreparedData,
    domain: Domain,
    seed: u64,
    last_epoch: usize,
}

impl TrainObserver for PipelineObserver<'_> {
    fn on_epoch(&mut self, model: &FieldModel, record: &mut EpochRecord) -> Result<()> {
        let diag = &self.cfg.diagnostics;
        if diag.curl_every_n_epochs > 0 && record.epoch % diag.curl_every_n_epochs == 0 {
            let rep = model_curl(model, &self.domain, diag.q, diag.h, self.cfg.seed_for(seed_role::DIAG))?;
            record.curl_estimate = Some(rep.mean_curl_norm);
        }
        if diag.checkpoint_epochs.contains(&record.epoch) || record.epoch == self.last_epoch {
            Checkpoint::from_model(
                model,
                self.data.dataset.normalizer.as_ref(),
                self.seed,
                Some(record.epoch),
            )
            .save(self.cfg.epoch_checkpoint_path(record.epoch))?;
        }
        Ok(())
    }
}

pub struct TrainOutcome {
    pub model: FieldModel,
    pub log: TrainLog,
    pub data: PreparedData,
}

/// Trains and writes `model.ckpt.json` (best validation epoch),
/// `train_log.jsonl` and `checkpoints/epoch_NNNN.json`.
pub fn run_train(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    let data = prepare_data(cfg)?;
    let model_cfg = cfg.resolved_model(&data.dataset);
    let train_cfg = cfg.resolved_train();
    let model = FieldModel::new(model_cfg)?;
    log::info!(
        "training {} parameters on {} stations x {} timesteps",
        model.param_count(),
        data.dataset.n_stations(),
        data.dataset.n_timesteps()
    );
    create_dir(&cfg.output_dir.join("checkpoints"))?;
    let mut observer = PipelineObserver {
        cfg,
        data: &data,
        domain: data.domain()?,
        seed: cfg.seed,
        last_epoch: train_cfg.epochs,
    };
    let (model, log) = train_with(&data.dataset, &data.split, model, &train_cfg, &mut observer)?;
    Checkpoint::from_model(&model, data.dataset.normalizer.as_ref(), cfg.seed, Some(log.best_epoch))
        .save(cfg.checkpoint_path())?;
    log.write_jsonl(cfg.output_dir.join("train_log.jsonl"))?;
    Ok(TrainOutcome { model, log, data })
}

/// Runs the mask sweep with `model` (or the saved checkpoint) and writes
/// `eval_report.json`, `eval_report.txt` and optionally `predictions.csv`.
pub fn run_eval(cfg: &ExperimentConfig, model: Option<&FieldModel>) -> Result<SweepReport> {
    let data = prepare_data(cfg)?;
    let loaded;
    let model = match model {
        Some(m) => Some(m),
        None if cfg.eval.models.iter().any(|m| m == "STFNN") => {
            let ckpt = Checkpoint::load(cfg.checkpoint_path())?;
            loaded = ckpt.to_model()?;
            Some(&loaded)
        }
        None => None,
    };
    let b = &cfg.eval.baselines;
    let knn = Knn(b.knn_k);
    let idw = IdwSes {
        power: b.idw_power,
        alpha: b.ses_alpha,
    };
    let mut models: Vec<&dyn Predictor> = Vec::new();
    for name in &cfg.eval.models {
        match name.as_str() {
            "STFNN" => models.push(model.expect("checkpoint loaded above")),
            "KNN" => models.push(&knn),
            "IDW+SES" => models.push(&idw),
            "mean" => models.push(&Mean),
            other => return Err(Error::Schema(format!("unknown model {other:?}"))),
        }
    }
    let spec = SweepSpec {
        ratios: cfg.eval.ratios.clone(),
        test_range: data.split.test.clone(),
        holdout_range: data.split.holdout.clone(),
        k_spatial: cfg.train.k_spatial,
        t_hist: cfg.train.t_hist,
        seed: cfg.seed_for(seed_role::EVAL_MASK),
    };
    let (mut report, rows) = mask_sweep(&data.dataset, &models, &spec)?;
    report.config = Some(serde_json::to_value(cfg)?);
    create_dir(&cfg.output_dir)?;
    write_text(&cfg.output_dir.join("eval_report.json"), &report.to_json()?)?;
    write_text(&cfg.output_dir.join("eval_report.txt"), &report.to_table())?;
    if cfg.eval.write_predictions {
        write_predictions_csv(&rows, cfg.output_dir.join("predictions.csv"))?;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurlPoint {
    pub epoch: usize,
    pub mean_curl_norm: f64,
}

/// Curl of every saved epoch checkpoint, in epoch order, written to
/// `curl_report.json`.
pub fn run_curl_report(cfg: &ExperimentConfig) -> Result<Vec<CurlPoint>> {
    let data = prepare_data(cfg)?;
    let domain = data.domain()?;
    let dir = cfg.output_dir.join("checkpoints");
    let entries = std::fs::read_dir(&dir).map_err(|e| Error::file(&dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("epoch_") && n.ends_with(".json"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Checkpoint(format!("no epoch checkpoints in {}", dir.display())));
    }
    let mut series = Vec::with_capacity(paths.len());
    for p in paths {
        let ckpt = Checkpoint::load(&p)?;
        let model = ckpt.to_model()?;
        let rep = model_curl(
            &model,
            &domain,
            cfg.diagnostics.q,
            cfg.diagnostics.h,
            cfg.seed_for(seed_role::DIAG),
        )?;
        series.push(CurlPoint {
            epoch: ckpt.epoch.unwrap_or(0),
            mean_curl_norm: rep.mean_curl_norm,
        });
    }
    write_text(
        &cfg.output_dir.join("curl_report.json"),
        &(serde_json::to_string_pretty(&series)? + "\n"),
    )?;
    Ok(series)
}

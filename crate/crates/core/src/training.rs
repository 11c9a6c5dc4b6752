//! Masked-station training: a fresh station mask per epoch, contexts built
//! from observed stations only, mini-batch Adam with global-norm clipping
//! and a step-halving learning rate. The parameters with the best
//! validation MAE are returned.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalsuite::{metrics, MetricSet};
use crate::geodata::{build_context, epoch_mask, ContextSet, Split, StationDataset};
use crate::model::{FieldModel, LossKind};
use crate::nn::{flatten, unflatten, zeros_like};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub lr_halving_period: usize,
    /// Fraction of stations hidden each epoch.
    pub mask_ratio: f64,
    pub k_spatial: usize,
    pub t_hist: usize,
    pub loss_kind: LossKind,
    pub seed: Option<u64>,
    pub grad_clip: f64,
    /// Random subset of masked (station, timestep) samples drawn per epoch.
    /// `None` trains on all of them.
    pub max_samples_per_epoch: Option<usize>,
    /// Fixed subset of validation samples. `None` uses all of them.
    pub max_val_samples: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 32,
            base_lr: 1e-3,
            lr_halving_period: 40,
            mask_ratio: 0.5,
            k_spatial: 6,
            t_hist: 6,
            loss_kind: LossKind::Mae,
            seed: None,
            grad_clip: 5.0,
            max_samples_per_epoch: None,
            max_val_samples: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.lr_halving_period == 0 {
            return Err(Error::Param(
                "epochs, batch_size and lr_halving_period must be positive".into(),
            ));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::Param(format!(
                "mask_ratio must be in (0, 1), got {}",
                self.mask_ratio
            )));
        }
        if !(self.base_lr > 0.0 && self.grad_clip > 0.0) {
            return Err(Error::Param("base_lr and grad_clip must be positive".into()));
        }
        if self.k_spatial == 0 || self.t_hist == 0 {
            return Err(Error::Param("k_spatial and t_hist must be positive".into()));
        }
        Ok(())
    }
}

/// `base_lr * 0.5^floor(epoch / period)` with `epoch` counted from zero.
pub fn lr_schedule(epoch: usize, base_lr: f64, period: usize) -> f64 {
    assert!(period >= 1, "lr halving period must be positive");
    base_lr * 0.5f64.powi((epoch / period) as i32)
}

/// Mean loss over a batch in normalized units.
pub fn loss(pred: &[f64], truth: &[f64], kind: LossKind) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::Shape(format!(
            "loss over {} predictions and {} truths",
            pred.len(),
            truth.len()
        )));
    }
    let total: f64 = pred.iter().zip(truth).map(|(p, t)| kind.eval(*p, *t).0).sum();
    Ok(total / pred.len() as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_mae: f64,
    pub val_rmse: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_mape: Option<f64>,
    pub samples: usize,
    pub skipped: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub curl_estimate: Option<f64>,
    /// Logged, never serialized, so artifacts stay byte-identical.
    #[serde(skip)]
    pub wall_time: Duration,
}

/// Equality ignores `wall_time`.
impl PartialEq for EpochRecord {
    fn eq(&self, o: &Self) -> bool {
        self.epoch == o.epoch
            && self.lr == o.lr
            && self.train_loss == o.train_loss
            && self.val_mae == o.val_mae
            && self.val_rmse == o.val_rmse
            && self.val_mape == o.val_mape
            && self.samples == o.samples
            && self.skipped == o.skipped
            && self.curl_estimate == o.curl_estimate
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl TrainLog {
    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = Vec::new();
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.push(b'\n');
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::file(path, e))?;
        f.write_all(&out).map_err(|e| Error::file(path, e))
    }

    pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<EpochRecord>> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(Error::from))
            .collect()
    }
}

/// Hooks into the training loop. `on_context` runs on worker threads.
pub trait TrainObserver: Sync {
    fn on_context(&self, _epoch: usize, _context: &ContextSet, _masked: &BTreeSet<usize>) {}

    /// Called after each epoch with the current (not best) parameters. The
    /// record may be amended, e.g. with a curl estimate.
    fn on_epoch(&mut self, _model: &FieldModel, _record: &mut EpochRecord) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * grad[i];
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * grad[i] * grad[i];
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

/// Scales `grad` in place so its L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

/// `(station, timestep)` pairs with a reading whose timestep lies in `range`
/// and has a full history window.
pub(crate) fn sample_pairs(
    dataset: &StationDataset,
    stations: &BTreeSet<usize>,
    range: std::ops::Range<usize>,
    t_hist: usize,
) -> Vec<(usize, usize)> {
    let start = range.start.max(t_hist.saturating_sub(1));
    let mut out = Vec::new();
    for &s in stations {
        for t in start..range.end {
            if dataset.stations[s].targets[t].is_some() {
                out.push((s, t));
            }
        }
    }
    out
}

/// Validation state: a fixed mask and fixed sample subset.
pub struct Validator {
    masked: BTreeSet<usize>,
    samples: Vec<(usize, usize)>,
    k_spatial: usize,
    t_hist: usize,
}

impl Validator {
    pub fn new(
        dataset: &StationDataset,
        range: std::ops::Range<usize>,
        mask_ratio: f64,
        k_spatial: usize,
        t_hist: usize,
        max_samples: Option<usize>,
        seed: u64,
    ) -> Result<Self> {
        let ids: Vec<usize> = (0..dataset.n_stations()).collect();
        let masked = epoch_mask(&ids, mask_ratio, seed)?.masked;
        let mut samples = sample_pairs(dataset, &masked, range, t_hist);
        if let Some(cap) = max_samples {
            if samples.len() > cap {
                samples.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed));
                samples.truncate(cap);
                samples.sort_unstable();
            }
        }
        if samples.is_empty() {
            return Err(Error::NoUsableData("validation range has no masked readings".into()));
        }
        Ok(Self {
            masked,
            samples,
            k_spatial,
            t_hist,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Metrics in raw target units.
    pub fn evaluate(&self, dataset: &StationDataset, model: &FieldModel) -> Result<MetricSet> {
        let norm = dataset.normalizer()?;
        let results: Vec<Result<Option<(f64, f64)>>> = self
            .samples
            .par_iter()
            .map(|&(s, t)| {
                let ctx = match build_context(
                    dataset,
                    dataset.coord(s, t)?,
                    t,
                    self.k_spatial,
                    self.t_hist,
                    &self.masked,
                ) {
                    Ok(c) => c,
                    Err(Error::InsufficientContext(_)) => return Ok(None),
                    Err(e) => return Err(e),
                };
                let est = model.pyramidal_infer(&ctx)?;
                let truth = dataset.stations[s].targets[t].expect("sampled readings exist");
                Ok(Some((norm.denormalize_target(est.y_hat), truth)))
            })
            .collect();
        let mut preds = Vec::with_capacity(results.len());
        let mut truths = Vec::with_capacity(results.len());
        for r in results {
            if let Some((p, t)) = r? {
                preds.push(p);
                truths.push(t);
            }
        }
        metrics(&preds, &truths)
    }
}

/// Trains `model` on the `split.train` timesteps, validating on `split.val`.
pub fn train(
    dataset: &StationDataset,
    split: &Split,
    model: FieldModel,
    cfg: &TrainConfig,
) -> Result<(FieldModel, TrainLog)> {
    train_with(dataset, split, model, cfg, &mut ())
}

pub fn train_with(
    dataset: &StationDataset,
    split: &Split,
    mut model: FieldModel,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<(FieldModel, TrainLog)> {
    cfg.validate()?;
    if dataset.feature_dim() != model.config.feature_dim {
        return Err(Error::Shape(format!(
            "dataset feature width {} but model expects {}",
            dataset.feature_dim(),
            model.config.feature_dim
        )));
    }
    let seed = cfg.seed.unwrap_or(0);
    let validator = Validator::new(
        dataset,
        split.val.clone(),
        cfg.mask_ratio,
        cfg.k_spatial,
        cfg.t_hist,
        cfg.max_val_samples,
        seed.wrapping_add(1_000_003),
    )?;
    let ids: Vec<usize> = (0..dataset.n_stations()).collect();
    let mut adam = Adam::new(model.param_count());
    let mut log = TrainLog::default();
    let mut best: Option<(f64, FieldModel)> = None;

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = lr_schedule(epoch, cfg.base_lr, cfg.lr_halving_period);
        let epoch_seed = seed.wrapping_add(epoch as u64);
        let masked = epoch_mask(&ids, cfg.mask_ratio, epoch_seed)?.masked;
        let norm = dataset.normalizer()?;
        let mut samples = sample_pairs(dataset, &masked, split.train.clone(), cfg.t_hist);
        samples.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
        if let Some(cap) = cfg.max_samples_per_epoch {
            samples.truncate(cap);
        }
        if samples.is_empty() {
            return Err(Error::NoUsableData(format!(
                "epoch {}: no masked readings in the training range",
                epoch + 1
            )));
        }

        let mut loss_sum = 0.0;
        let mut used = 0usize;
        let mut skipped = 0usize;
        for (b, batch) in samples.chunks(cfg.batch_size).enumerate() {
            let grads: Vec<Result<Option<(f64, Vec<f64>)>>> = batch
                .par_iter()
                .map(|&(s, t)| {
                    let ctx = match build_context(
                        dataset,
                        dataset.coord(s, t)?,
                        t,
                        cfg.k_spatial,
                        cfg.t_hist,
                        &masked,
                    ) {
                        Ok(c) => c,
                        Err(Error::InsufficientContext(_)) => return Ok(None),
                        Err(e) => return Err(e),
                    };
                    observer.on_context(epoch + 1, &ctx, &masked);
                    let truth = norm.normalize_target(
                        dataset.stations[s].targets[t].expect("sampled readings exist"),
                    );
                    let mut g = zeros_like(&model);
                    let (l, _) = model.loss_and_grad(&ctx, truth, cfg.loss_kind, &mut g)?;
                    Ok(Some((l, flatten(&g))))
                })
                .collect();
            let mut total: Option<Vec<f64>> = None;
            let mut count = 0usize;
            for g in grads {
                match g? {
                    None => skipped += 1,
                    Some((l, g)) => {
                        if !l.is_finite() {
                            return Err(Error::Numeric(format!(
                                "non-finite loss at epoch {} batch {b}",
                                epoch + 1
                            )));
                        }
                        loss_sum += l;
                        count += 1;
                        match total.as_mut() {
                            None => total = Some(g),
                            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, v)| *a += v),
                        }
                    }
                }
            }
            let Some(mut grad) = total else { continue };
            used += count;
            grad.iter_mut().for_each(|g| *g /= count as f64);
            let norm_before = clip_global_norm(&mut grad, cfg.grad_clip);
            if !norm_before.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient at epoch {} batch {b}",
                    epoch + 1
                )));
            }
            let mut params = flatten(&model);
            adam.step(&mut params, &grad, lr);
            unflatten(&mut model, &params);
        }
        if used == 0 {
            return Err(Error::InsufficientContext(format!(
                "epoch {}: every sample lacked context",
                epoch + 1
            )));
        }

        let val = validator.evaluate(dataset, &model)?;
        let mut record = EpochRecord {
            epoch: epoch + 1,
            lr,
            train_loss: loss_sum / used as f64,
            val_mae: val.mae,
            val_rmse: val.rmse,
            val_mape: val.mape,
            samples: used,
            skipped,
            curl_estimate: None,
            wall_time: Duration::ZERO,
        };
        observer.on_epoch(&model, &mut record)?;
        record.wall_time = started.elapsed();
        log::info!(
            "epoch {:>3} lr {:.2e} train_loss {:.4} val_mae {:.4} val_rmse {:.4}{} ({:.1?})",
            record.epoch,
            lr,
            record.train_loss,
            record.val_mae,
            record.val_rmse,
            record
                .curl_estimate
                .map(|c| format!(" curl {c:.4e}"))
                .unwrap_or_default(),
            record.wall_time
        );
        if best.as_ref().is_none_or(|(b, _)| val.mae < *b) {
            best = Some((val.mae, model.clone()));
            log.best_epoch = epoch + 1;
        }
        log.records.push(record);
    }
    let (_, best_model) = best.expect("at least one epoch ran");
    Ok((best_model, log))
}

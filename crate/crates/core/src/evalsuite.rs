//! Error metrics and the masked-station sweep. Every model sees the same
//! contexts; predictions are compared with raw readings after
//! denormalization.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geodata::{build_context, epoch_mask, ContextSet, StationDataset};
use crate::model::FieldModel;
use crate::training::sample_pairs;

/// Truths at or below this magnitude are left out of MAPE.
pub const MAPE_ZERO_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub mae: f64,
    pub rmse: f64,
    /// Absent when every truth is (near) zero.
    pub mape: Option<f64>,
    pub n: usize,
    pub mape_excluded: usize,
}

pub fn metrics(preds: &[f64], truths: &[f64]) -> Result<MetricSet> {
    if preds.len() != truths.len() {
        return Err(Error::Shape(format!(
            "{} predictions vs {} truths",
            preds.len(),
            truths.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::NoUsableData("no predictions to score".into()));
    }
    let n = preds.len() as f64;
    let mut abs = 0.0;
    let mut sq = 0.0;
    let mut pct = 0.0;
    let mut pct_n = 0usize;
    for (p, t) in preds.iter().zip(truths) {
        let e = p - t;
        abs += e.abs();
        sq += e * e;
        if t.abs() > MAPE_ZERO_TOL {
            pct += e.abs() / t.abs();
            pct_n += 1;
        }
    }
    Ok(MetricSet {
        mae: abs / n,
        rmse: (sq / n).sqrt(),
        mape: (pct_n > 0).then(|| pct / pct_n as f64),
        n: preds.len(),
        mape_excluded: preds.len() - pct_n,
    })
}

/// Anything that maps a context to a normalized target estimate.
pub trait Predictor: Sync {
    fn name(&self) -> String;
    fn predict(&self, context: &ContextSet) -> Result<f64>;
}

impl Predictor for FieldModel {
    fn name(&self) -> String {
        "STFNN".into()
    }

    fn predict(&self, context: &ContextSet) -> Result<f64> {
        Ok(self.pyramidal_infer(context)?.y_hat)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub model: String,
    pub mask_ratio: f64,
    pub metrics: MetricSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRow {
    pub label: String,
    pub mae: f64,
    pub rmse: f64,
    pub mape: f64,
    pub reproducible: bool,
}

/// The published nationwide result, carried along for orientation only.
pub fn published_reference() -> ReferenceRow {
    ReferenceRow {
        label: "published reference (nationwide PM2.5, 25% mask)".into(),
        mae: 11.14,
        rmse: 19.75,
        mape: 0.39,
        reproducible: false,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub seed: u64,
    pub ratios: Vec<f64>,
    pub models: Vec<String>,
    pub test_range: [usize; 2],
    /// Timesteps after the test range, never evaluated.
    pub holdout_range: [usize; 2],
    /// Samples dropped for lack of context, per ratio.
    pub skipped: Vec<usize>,
    pub cells: Vec<SweepCell>,
    pub reference: ReferenceRow,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

impl SweepReport {
    pub fn cell(&self, model: &str, ratio: f64) -> Option<&MetricSet> {
        self.cells
            .iter()
            .find(|c| c.model == model && c.mask_ratio == ratio)
            .map(|c| &c.metrics)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Aligned plain-text table, one row per model and ratio.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<12} {:>6} {:>10} {:>10} {:>8} {:>7}",
            "model", "mask", "MAE", "RMSE", "MAPE", "n"
        );
        for c in &self.cells {
            let mape = c
                .metrics
                .mape
                .map_or_else(|| "-".to_string(), |m| format!("{m:.4}"));
            let _ = writeln!(
                out,
                "{:<12} {:>5.0}% {:>10.4} {:>10.4} {:>8} {:>7}",
                c.model,
                c.mask_ratio * 100.0,
                c.metrics.mae,
                c.metrics.rmse,
                mape,
                c.metrics.n
            );
        }
        if self.models.iter().any(|m| m == "KNN") {
            let _ = writeln!(out, "KNN is geometry-only: spacetime distance, no features");
        }
        let r = &self.reference;
        let _ = writeln!(
            out,
            "{}: MAE {} / RMSE {} / MAPE {} (not reproducible here)",
            r.label, r.mae, r.rmse, r.mape
        );
        let _ = writeln!(
            out,
            "timesteps {}..{} held out unused",
            self.holdout_range[0], self.holdout_range[1]
        );
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PredictionRow {
    pub model: String,
    pub mask_ratio: f64,
    pub station_id: String,
    pub timestamp: String,
    pub truth: f64,
    pub prediction: f64,
}

pub fn write_predictions_csv(rows: &[PredictionRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::file(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::file(path, e))
}

#[derive(Debug, Clone)]
pub struct SweepSpec {
    pub ratios: Vec<f64>,
    pub test_range: std::ops::Range<usize>,
    pub holdout_range: std::ops::Range<usize>,
    pub k_spatial: usize,
    pub t_hist: usize,
    pub seed: u64,
}

/// Runs every model on every masked (station, test timestep) pair for each
/// mask ratio. Each ratio uses one mask drawn from `seed + ratio index`.
pub fn mask_sweep(
    dataset: &StationDataset,
    models: &[&dyn Predictor],
    spec: &SweepSpec,
) -> Result<(SweepReport, Vec<PredictionRow>)> {
    if models.is_empty() || spec.ratios.is_empty() {
        return Err(Error::Param("sweep needs at least one model and one ratio".into()));
    }
    let ids: Vec<usize> = (0..dataset.n_stations()).collect();
    // Validate every ratio before any evaluation runs.
    let masks = spec
        .ratios
        .iter()
        .enumerate()
        .map(|(r, &ratio)| epoch_mask(&ids, ratio, spec.seed.wrapping_add(r as u64)))
        .collect::<Result<Vec<_>>>()?;
    let norm = dataset.normalizer()?;

    let mut cells = Vec::new();
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for (ratio, mask) in spec.ratios.iter().zip(&masks) {
        let pairs = sample_pairs(dataset, &mask.masked, spec.test_range.clone(), spec.t_hist);
        let built: Vec<Result<Option<(usize, usize, ContextSet)>>> = pairs
            .par_iter()
            .map(|&(s, t)| {
                match build_context(
                    dataset,
                    dataset.coord(s, t)?,
                    t,
                    spec.k_spatial,
                    spec.t_hist,
                    &mask.masked,
                ) {
                    Ok(c) => Ok(Some((s, t, c))),
                    Err(Error::InsufficientContext(_)) => Ok(None),
                    Err(e) => Err(e),
                }
            })
            .collect();
        let mut cache = Vec::with_capacity(built.len());
        let mut n_skipped = 0;
        for b in built {
            match b? {
                Some(x) => cache.push(x),
                None => n_skipped += 1,
            }
        }
        skipped.push(n_skipped);
        if cache.is_empty() {
            return Err(Error::NoUsableData(format!(
                "mask ratio {ratio}: no masked readings in the test range"
            )));
        }
        let truths: Vec<f64> = cache
            .iter()
            .map(|(s, t, _)| dataset.stations[*s].targets[*t].expect("sampled readings exist"))
            .collect();
        for model in models {
            let preds = cache
                .par_iter()
                .map(|(_, _, c)| model.predict(c).map(|z| norm.denormalize_target(z)))
                .collect::<Result<Vec<f64>>>()?;
            let m = metrics(&preds, &truths)?;
            if m.rmse < m.mae * (1.0 - 1e-12) {
                return Err(Error::Numeric(format!(
                    "{} at {ratio}: RMSE {} below MAE {}",
                    model.name(),
                    m.rmse,
                    m.mae
                )));
            }
            for ((s, t, _), (p, y)) in cache.iter().zip(preds.iter().zip(&truths)) {
                rows.push(PredictionRow {
                    model: model.name(),
                    mask_ratio: *ratio,
                    station_id: dataset.stations[*s].station_id.clone(),
                    timestamp: dataset.timestamps[*t].to_rfc3339(),
                    truth: *y,
                    prediction: *p,
                });
            }
            cells.push(SweepCell {
                model: model.name(),
                mask_ratio: *ratio,
                metrics: m,
            });
        }
    }
    let report = SweepReport {
        seed: spec.seed,
        ratios: spec.ratios.clone(),
        models: models.iter().map(|m| m.name()).collect(),
        test_range: [spec.test_range.start, spec.test_range.end],
        holdout_range: [spec.holdout_range.start, spec.holdout_range.end],
        skipped,
        cells,
        reference: published_reference(),
        config: None,
    };
    Ok((report, rows))
}

//! Station observations: ingestion, filtering, normalization, station masks,
//! local spacetime contexts and the synthetic drifting-plume generator.

mod context;
mod ingest;
mod mask;
mod normalize;
mod synth;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use context::{build_context, ContextSet, Source};
pub use ingest::{load_observations, parse_timestamp, write_observations, CsvSchema};
pub use mask::{epoch_mask, MaskPartition};
pub use normalize::{fit_normalizer, Normalizer, STD_FLOOR};
pub use synth::{analytic_eval, generate_synthetic, AnalyticField, GeneratorSpec, Plume, SYNTHETIC_FEATURES};

pub(crate) const SECONDS_PER_DAY: f64 = 86_400.0;

/// A point in normalized spacetime.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coordinate {
    pub x: f64,
    pub y: f64,
    pub tau: f64,
}

impl Coordinate {
    pub fn new(x: f64, y: f64, tau: f64) -> Result<Self> {
        if !(x.is_finite() && y.is_finite() && tau.is_finite()) {
            return Err(Error::Numeric(format!(
                "coordinate components must be finite, got ({x}, {y}, {tau})"
            )));
        }
        Ok(Self { x, y, tau })
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.tau]
    }

    pub fn from_array(v: [f64; 3]) -> Self {
        Self {
            x: v[0],
            y: v[1],
            tau: v[2],
        }
    }
}

/// A categorical feature column with its sorted level names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalColumn {
    pub name: String,
    pub levels: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StationRecord {
    pub station_id: String,
    pub raw_lng: f64,
    pub raw_lat: f64,
    /// One entry per grid timestep; `None` marks a missing reading.
    pub targets: Vec<Option<f64>>,
    /// Numeric features per timestep; `NaN` marks a missing cell.
    pub features: Vec<Vec<f64>>,
    /// Category index per categorical column per timestep.
    pub categorical: Vec<Vec<Option<u32>>>,
}

impl StationRecord {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// Stations sharing one timestamp grid.
#[derive(Debug, Clone, PartialEq)]
pub struct StationDataset {
    pub stations: Vec<StationRecord>,
    pub timestamps: Vec<DateTime<Utc>>,
    /// Timestamp of `tau = 0`.
    pub epoch: DateTime<Utc>,
    pub normalizer: Option<Normalizer>,
    pub feature_names: Vec<String>,
    pub categorical: Vec<CategoricalColumn>,
}

impl StationDataset {
    pub fn n_stations(&self) -> usize {
        self.stations.len()
    }

    pub fn n_timesteps(&self) -> usize {
        self.timestamps.len()
    }

    /// Width of the model-side feature vector: numeric columns plus one-hot
    /// blocks for each categorical column.
    pub fn feature_dim(&self) -> usize {
        self.feature_names.len() + self.categorical.iter().map(|c| c.levels.len()).sum::<usize>()
    }

    /// Days elapsed between the epoch and timestep `t`.
    pub fn days_since_epoch(&self, t: usize) -> f64 {
        (self.timestamps[t] - self.epoch).num_seconds() as f64 / SECONDS_PER_DAY
    }

    pub fn days_at(&self, ts: DateTime<Utc>) -> f64 {
        (ts - self.epoch).num_seconds() as f64 / SECONDS_PER_DAY
    }

    pub fn normalizer(&self) -> Result<&Normalizer> {
        self.normalizer
            .as_ref()
            .ok_or_else(|| Error::Param("dataset has no fitted normalizer".into()))
    }

    pub fn station_index(&self, id: &str) -> Option<usize> {
        self.stations.iter().position(|s| s.station_id == id)
    }

    /// Normalized spacetime coordinate of station `s` at timestep `t`.
    pub fn coord(&self, s: usize, t: usize) -> Result<Coordinate> {
        let norm = self.normalizer()?;
        let st = &self.stations[s];
        Ok(norm.coordinate(st.raw_lng, st.raw_lat, self.days_since_epoch(t)))
    }

    /// Fraction of stations whose target is missing at timestep `t`.
    pub fn missing_fraction(&self, t: usize) -> f64 {
        if self.stations.is_empty() {
            return 1.0;
        }
        let missing = self.stations.iter().filter(|s| s.targets[t].is_none()).count();
        missing as f64 / self.stations.len() as f64
    }

    /// Timestep index of an exact timestamp, if on the grid.
    pub fn timestep_of(&self, ts: DateTime<Utc>) -> Option<usize> {
        self.timestamps.binary_search(&ts).ok()
    }

    /// Last grid index whose timestamp is at or before `ts`.
    pub fn timestep_at_or_before(&self, ts: DateTime<Utc>) -> Option<usize> {
        match self.timestamps.binary_search(&ts) {
            Ok(i) => Some(i),
            Err(0) => None,
            Err(i) => Some(i - 1),
        }
    }
}

/// Drops every timestep where the fraction of stations with a missing
/// target exceeds `threshold`. Remaining timesteps keep their order and are
/// re-indexed from zero.
pub fn filter_missing(dataset: &StationDataset, threshold: f64) -> Result<StationDataset> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::Param(format!(
            "missing-data threshold must be in (0, 1], got {threshold}"
        )));
    }
    let keep: Vec<usize> = (0..dataset.n_timesteps())
        .filter(|&t| dataset.missing_fraction(t) <= threshold)
        .collect();
    let any_value = keep
        .iter()
        .any(|&t| dataset.stations.iter().any(|s| s.targets[t].is_some()));
    if keep.is_empty() || !any_value {
        return Err(Error::NoUsableData(format!(
            "every timestep exceeds the {threshold} missing-target threshold"
        )));
    }
    let stations = dataset
        .stations
        .iter()
        .map(|s| StationRecord {
            station_id: s.station_id.clone(),
            raw_lng: s.raw_lng,
            raw_lat: s.raw_lat,
            targets: keep.iter().map(|&t| s.targets[t]).collect(),
            features: keep.iter().map(|&t| s.features[t].clone()).collect(),
            categorical: keep.iter().map(|&t| s.categorical[t].clone()).collect(),
        })
        .collect();
    Ok(StationDataset {
        stations,
        timestamps: keep.iter().map(|&t| dataset.timestamps[t]).collect(),
        epoch: dataset.epoch,
        normalizer: dataset.normalizer.clone(),
        feature_names: dataset.feature_names.clone(),
        categorical: dataset.categorical.clone(),
    })
}

/// Chronological split boundaries over a timeline of `n` steps: train, val
/// and test ranges; whatever follows the test range is held out unused.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: std::ops::Range<usize>,
    pub val: std::ops::Range<usize>,
    pub test: std::ops::Range<usize>,
    pub holdout: std::ops::Range<usize>,
}

impl Split {
    pub fn chronological(n: usize, train: f64, val: f64, test: f64) -> Result<Self> {
        if !(train > 0.0 && val >= 0.0 && test >= 0.0 && train + val + test <= 1.0 + 1e-12) {
            return Err(Error::Param(format!(
                "invalid split fractions train={train} val={val} test={test}"
            )));
        }
        let cut = |f: f64| ((n as f64 * f).round() as usize).min(n);
        let a = cut(train);
        let b = cut(train + val);
        let c = cut(train + val + test);
        Ok(Self {
            train: 0..a,
            val: a..b,
            test: b..c,
            holdout: c..n,
        })
    }
}

use serde::{Deserialize, Serialize};

use super::{Coordinate, StationDataset};
use crate::error::{Error, Result};

/// Lower bound applied to every fitted standard deviation.
pub const STD_FLOOR: f64 = 1e-6;

/// Z-normalization statistics fitted on the training time range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalizer {
    pub lng_mean: f64,
    pub lng_std: f64,
    pub lat_mean: f64,
    pub lat_std: f64,
    pub feature_means: Vec<f64>,
    pub feature_stds: Vec<f64>,
    pub target_mean: f64,
    pub target_std: f64,
    /// Days per unit of normalized time.
    pub time_scale: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> Option<(f64, f64)> {
    let n = values.clone().count();
    if n == 0 {
        return None;
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    Some((mean, var.sqrt()))
}

fn clamp_std(name: &str, std: f64, warnings: &mut Vec<String>) -> f64 {
    if std < STD_FLOOR {
        warnings.push(format!("{name}: std {std:e} clamped to {STD_FLOOR:e}"));
        STD_FLOOR
    } else {
        std
    }
}

/// Number of leading timesteps forming the training range.
pub(crate) fn train_steps(n: usize, train_fraction: f64) -> usize {
    ((n as f64 * train_fraction).round() as usize).clamp(1, n)
}

/// Fits statistics over the first `train_fraction` of the timeline.
///
/// Station coordinates are weighted one per station; features and targets
/// use every present reading inside the training range. Population standard
/// deviations are used and clamped below by [`STD_FLOOR`].
pub fn fit_normalizer(
    dataset: &StationDataset,
    train_fraction: f64,
    time_scale: f64,
) -> Result<Normalizer> {
    if !(train_fraction > 0.0 && train_fraction <= 1.0) {
        return Err(Error::Param(format!(
            "train_fraction must be in (0, 1], got {train_fraction}"
        )));
    }
    if !(time_scale.is_finite() && time_scale > 0.0) {
        return Err(Error::Param(format!("time_scale must be positive, got {time_scale}")));
    }
    if dataset.stations.is_empty() || dataset.n_timesteps() == 0 {
        return Err(Error::NoUsableData("empty dataset".into()));
    }
    let end = train_steps(dataset.n_timesteps(), train_fraction);
    let mut warnings = Vec::new();

    let (lng_mean, lng_std) = mean_std(dataset.stations.iter().map(|s| s.raw_lng)).unwrap();
    let (lat_mean, lat_std) = mean_std(dataset.stations.iter().map(|s| s.raw_lat)).unwrap();
    let lng_std = clamp_std("lng", lng_std, &mut warnings);
    let lat_std = clamp_std("lat", lat_std, &mut warnings);

    let mut feature_means = Vec::with_capacity(dataset.feature_names.len());
    let mut feature_stds = Vec::with_capacity(dataset.feature_names.len());
    for (k, name) in dataset.feature_names.iter().enumerate() {
        let values = dataset
            .stations
            .iter()
            .flat_map(move |s| s.features[..end].iter().map(move |f| f[k]))
            .filter(|v| !v.is_nan());
        let (m, s) = mean_std(values).unwrap_or_else(|| {
            warnings.push(format!("{name}: no values in training range"));
            (0.0, 0.0)
        });
        feature_means.push(m);
        feature_stds.push(clamp_std(name, s, &mut warnings));
    }

    let targets = dataset
        .stations
        .iter()
        .flat_map(|s| s.targets[..end].iter().flatten().copied());
    let (target_mean, target_std) = mean_std(targets).ok_or_else(|| {
        Error::NoUsableData("no target readings inside the training range".into())
    })?;
    let target_std = clamp_std("target", target_std, &mut warnings);

    for w in &warnings {
        log::warn!("normalizer: {w}");
    }
    Ok(Normalizer {
        lng_mean,
        lng_std,
        lat_mean,
        lat_std,
        feature_means,
        feature_stds,
        target_mean,
        target_std,
        time_scale,
        warnings,
    })
}

impl Normalizer {
    pub fn coordinate(&self, lng: f64, lat: f64, days: f64) -> Coordinate {
        Coordinate {
            x: (lng - self.lng_mean) / self.lng_std,
            y: (lat - self.lat_mean) / self.lat_std,
            tau: days / self.time_scale,
        }
    }

    /// Inverse of [`Normalizer::coordinate`]: `(lng, lat, days)`.
    pub fn denormalize_coordinate(&self, c: Coordinate) -> (f64, f64, f64) {
        (
            c.x * self.lng_std + self.lng_mean,
            c.y * self.lat_std + self.lat_mean,
            c.tau * self.time_scale,
        )
    }

    pub fn normalize_target(&self, v: f64) -> f64 {
        (v - self.target_mean) / self.target_std
    }

    pub fn denormalize_target(&self, z: f64) -> f64 {
        z * self.target_std + self.target_mean
    }

    pub fn normalize_feature(&self, k: usize, v: f64) -> f64 {
        (v - self.feature_means[k]) / self.feature_stds[k]
    }

    pub fn denormalize_feature(&self, k: usize, z: f64) -> f64 {
        z * self.feature_stds[k] + self.feature_means[k]
    }

    /// Model-side feature vector: z-scored numeric columns (missing cells
    /// become 0, the training mean) followed by one-hot categorical blocks
    /// (a missing category is all zeros).
    pub fn feature_vector(
        &self,
        numeric: &[f64],
        categorical: &[Option<u32>],
        level_counts: &[usize],
    ) -> Vec<f64> {
        let mut out = Vec::with_capacity(numeric.len() + level_counts.iter().sum::<usize>());
        for (k, &v) in numeric.iter().enumerate() {
            out.push(if v.is_nan() {
                0.0
            } else {
                self.normalize_feature(k, v)
            });
        }
        for (c, &n) in categorical.iter().zip(level_counts) {
            let start = out.len();
            out.resize(start + n, 0.0);
            if let Some(i) = c {
                out[start + *i as usize] = 1.0;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::super::test_support::line_dataset;
    use super::*;

    #[test]
    fn two_point_statistics() {
        let ds = line_dataset(&[110.0, 120.0], &[vec![Some(1.0)], vec![Some(3.0)]]);
        let n = fit_normalizer(&ds, 1.0, 1.0).unwrap();
        assert_eq!(n.lng_mean, 115.0);
        assert_eq!(n.lng_std, 5.0);
        assert_eq!(n.target_mean, 2.0);
        assert_eq!(n.target_std, 1.0);
    }

    #[test]
    fn constant_latitude_is_clamped_with_warning() {
        let ds = line_dataset(&[110.0, 120.0], &[vec![Some(1.0)], vec![Some(3.0)]]);
        let n = fit_normalizer(&ds, 1.0, 1.0).unwrap();
        assert_eq!(n.lat_std, STD_FLOOR);
        assert!(n.warnings.iter().any(|w| w.starts_with("lat")));
    }

    #[test]
    fn statistics_use_training_prefix_only() {
        let mut values: Vec<Option<f64>> = vec![Some(1.0); 60];
        values.extend(vec![Some(1000.0); 40]);
        let ds = line_dataset(&[0.0, 1.0], &[values.clone(), values]);
        let n = fit_normalizer(&ds, 0.6, 1.0).unwrap();
        assert_eq!(n.target_mean, 1.0);
        assert_eq!(n.target_std, STD_FLOOR);
    }

    #[test]
    fn feature_vector_one_hot_and_missing() {
        let n = Normalizer {
            lng_mean: 0.0,
            lng_std: 1.0,
            lat_mean: 0.0,
            lat_std: 1.0,
            feature_means: vec![1.0, 2.0],
            feature_stds: vec![2.0, 1.0],
            target_mean: 0.0,
            target_std: 1.0,
            time_scale: 1.0,
            warnings: vec![],
        };
        let v = n.feature_vector(&[3.0, f64::NAN], &[Some(1), None], &[3, 2]);
        assert_eq!(v, vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn bad_parameters_rejected() {
        let ds = line_dataset(&[0.0, 1.0], &[vec![Some(1.0)], vec![Some(2.0)]]);
        assert!(fit_normalizer(&ds, 0.0, 1.0).is_err());
        assert!(fit_normalizer(&ds, 0.5, 0.0).is_err());
    }
}

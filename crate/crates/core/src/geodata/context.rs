use std::collections::BTreeSet;

use serde::Serialize;

use super::{Coordinate, StationDataset};
use crate::error::{Error, Result};

/// One (station, timestep) pair feeding an inference.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Source {
    pub coord: Coordinate,
    /// Normalized feature vector including one-hot blocks.
    pub features: Vec<f64>,
    /// Normalized target value.
    pub value: f64,
    pub station: usize,
    pub timestep: usize,
}

/// The local spacetime neighborhood of one target coordinate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContextSet {
    pub sources: Vec<Source>,
    pub target_coord: Coordinate,
    pub target_timestep: usize,
}

impl ContextSet {
    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    pub fn values(&self) -> Vec<f64> {
        self.sources.iter().map(|s| s.value).collect()
    }

    pub fn feature_dim(&self) -> usize {
        self.sources.first().map_or(0, |s| s.features.len())
    }
}

/// Selects the `k_spatial` stations nearest to the target in normalized
/// `(x, y)` among those outside `exclude` with at least one reading in the
/// window, then expands each across the `t_hist` timesteps ending at
/// `target_timestep`. Missing readings are dropped, not imputed. Distance
/// ties resolve by station index.
pub fn build_context(
    dataset: &StationDataset,
    target: Coordinate,
    target_timestep: usize,
    k_spatial: usize,
    t_hist: usize,
    exclude: &BTreeSet<usize>,
) -> Result<ContextSet> {
    if k_spatial == 0 || t_hist == 0 {
        return Err(Error::Param("k_spatial and t_hist must be at least 1".into()));
    }
    if target_timestep >= dataset.n_timesteps() {
        return Err(Error::Param(format!(
            "target timestep {target_timestep} outside grid of {}",
            dataset.n_timesteps()
        )));
    }
    if target_timestep + 1 < t_hist {
        return Err(Error::InsufficientContext(format!(
            "timestep {target_timestep} has fewer than {t_hist} steps of history"
        )));
    }
    let norm = dataset.normalizer()?;
    let window = target_timestep + 1 - t_hist..=target_timestep;

    let mut candidates: Vec<(f64, usize)> = dataset
        .stations
        .iter()
        .enumerate()
        .filter(|(s, st)| {
            !exclude.contains(s) && window.clone().any(|t| st.targets[t].is_some())
        })
        .map(|(s, st)| {
            let c = norm.coordinate(st.raw_lng, st.raw_lat, 0.0);
            let d2 = (c.x - target.x).powi(2) + (c.y - target.y).powi(2);
            (d2, s)
        })
        .collect();
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    candidates.truncate(k_spatial);

    let level_counts: Vec<usize> = dataset.categorical.iter().map(|c| c.levels.len()).collect();
    let mut sources = Vec::with_capacity(k_spatial * t_hist);
    for &(_, s) in &candidates {
        let st = &dataset.stations[s];
        for t in window.clone() {
            let Some(v) = st.targets[t] else { continue };
            sources.push(Source {
                coord: norm.coordinate(st.raw_lng, st.raw_lat, dataset.days_since_epoch(t)),
                features: norm.feature_vector(&st.features[t], &st.categorical[t], &level_counts),
                value: norm.normalize_target(v),
                station: s,
                timestep: t,
            });
        }
    }
    if sources.is_empty() {
        return Err(Error::InsufficientContext(format!(
            "no usable sources around timestep {target_timestep}"
        )));
    }
    Ok(ContextSet {
        sources,
        target_coord: target,
        target_timestep,
    })
}

#[cfg(test)]
mod tests {
    use super::super::fit_normalizer;
    use super::super::test_support::line_dataset;
    use super::*;

    fn normalized(mut ds: StationDataset) -> StationDataset {
        ds.normalizer = Some(fit_normalizer(&ds, 1.0, 1.0).unwrap());
        ds
    }

    #[test]
    fn picks_nearest_stations() {
        let ds = normalized(line_dataset(
            &[0.0, 1.0, 2.0, 9.0],
            &[vec![Some(1.0)], vec![Some(2.0)], vec![Some(3.0)], vec![Some(4.0)]],
        ));
        let norm = ds.normalizer.clone().unwrap();
        let target = norm.coordinate(0.0, 30.0, 0.0);
        let ctx = build_context(&ds, target, 0, 2, 1, &BTreeSet::new()).unwrap();
        let stations: Vec<usize> = ctx.sources.iter().map(|s| s.station).collect();
        assert_eq!(stations, vec![0, 1]);
    }

    #[test]
    fn full_window_size_and_exclusion() {
        let values: Vec<Vec<Option<f64>>> = (0..8).map(|i| vec![Some(i as f64); 6]).collect();
        let lngs: Vec<f64> = (0..8).map(|i| i as f64).collect();
        let ds = normalized(line_dataset(&lngs, &values));
        let target = ds.coord(0, 5).unwrap();
        let ctx = build_context(&ds, target, 5, 6, 6, &BTreeSet::new()).unwrap();
        assert_eq!(ctx.len(), 36);
        let exclude: BTreeSet<usize> = [0].into();
        let ctx = build_context(&ds, target, 5, 6, 6, &exclude).unwrap();
        assert!(ctx.sources.iter().all(|s| s.station != 0));
        assert!(ctx.sources.iter().all(|s| s.coord.tau <= target.tau));
    }

    #[test]
    fn missing_sources_dropped_and_empty_is_error() {
        let ds = normalized(line_dataset(
            &[0.0, 1.0],
            &[vec![Some(1.0), None], vec![None, None]],
        ));
        let target = ds.coord(0, 1).unwrap();
        let ctx = build_context(&ds, target, 1, 2, 2, &BTreeSet::new()).unwrap();
        assert_eq!(ctx.len(), 1);
        let exclude: BTreeSet<usize> = [0].into();
        assert!(matches!(
            build_context(&ds, target, 1, 2, 2, &exclude),
            Err(Error::InsufficientContext(_))
        ));
        assert!(matches!(
            build_context(&ds, target, 0, 2, 2, &BTreeSet::new()),
            Err(Error::InsufficientContext(_))
        ));
    }
}

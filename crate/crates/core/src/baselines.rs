//! Non-learned reference predictors. All of them return convex combinations
//! of context values, in the same (normalized) units as the context.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalsuite::Predictor;
use crate::geodata::ContextSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    pub knn_k: usize,
    pub idw_power: f64,
    pub ses_alpha: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            knn_k: 5,
            idw_power: 2.0,
            ses_alpha: 0.3,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.knn_k == 0 {
            return Err(Error::Param("knn_k must be at least 1".into()));
        }
        if !(self.idw_power > 0.0) {
            return Err(Error::Param("idw_power must be positive".into()));
        }
        if !(self.ses_alpha > 0.0 && self.ses_alpha <= 1.0) {
            return Err(Error::Param("ses_alpha must be in (0, 1]".into()));
        }
        Ok(())
    }
}

fn non_empty(context: &ContextSet) -> Result<()> {
    if context.is_empty() {
        Err(Error::InsufficientContext("baseline needs at least one source".into()))
    } else {
        Ok(())
    }
}

pub fn mean_infer(context: &ContextSet) -> Result<f64> {
    non_empty(context)?;
    Ok(context.sources.iter().map(|s| s.value).sum::<f64>() / context.len() as f64)
}

/// Mean of the `k` sources nearest in normalized spacetime; ties resolve by
/// source order.
pub fn knn_infer(context: &ContextSet, k: usize) -> Result<f64> {
    non_empty(context)?;
    if k == 0 {
        return Err(Error::Param("k must be at least 1".into()));
    }
    let t = context.target_coord;
    let mut by_dist: Vec<(f64, usize)> = context
        .sources
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let c = s.coord;
            ((c.x - t.x).powi(2) + (c.y - t.y).powi(2) + (c.tau - t.tau).powi(2), i)
        })
        .collect();
    by_dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let take = k.min(by_dist.len());
    let mut chosen: Vec<usize> = by_dist[..take].iter().map(|&(_, i)| i).collect();
    // Summing in source order makes k >= N agree bit-for-bit with the mean.
    chosen.sort_unstable();
    let sum: f64 = chosen.iter().map(|&i| context.sources[i].value).sum();
    Ok(sum / take as f64)
}

/// Exponential smoothing per station (weight `(1 - alpha)^age`, age in
/// timesteps before the target) followed by inverse-distance weighting
/// across stations in normalized `(x, y)`. A station closer than `1e-9`
/// returns its smoothed value directly.
pub fn idw_ses_infer(context: &ContextSet, power: f64, ses_alpha: f64) -> Result<f64> {
    non_empty(context)?;
    if !(power > 0.0) || !(ses_alpha > 0.0 && ses_alpha <= 1.0) {
        return Err(Error::Param(format!(
            "idw power {power} / ses alpha {ses_alpha} out of range"
        )));
    }
    let mut stations: BTreeMap<usize, Vec<&crate::geodata::Source>> = BTreeMap::new();
    for s in &context.sources {
        stations.entry(s.station).or_default().push(s);
    }
    let target = context.target_coord;
    let mut num = 0.0;
    let mut den = 0.0;
    for group in stations.values() {
        let smoothed = ses(group, context.target_timestep, ses_alpha);
        let c = group[0].coord;
        let d = ((c.x - target.x).powi(2) + (c.y - target.y).powi(2)).sqrt();
        if d < 1e-9 {
            return Ok(smoothed);
        }
        let w = d.powf(-power);
        num += w * smoothed;
        den += w;
    }
    Ok(num / den)
}

fn ses(group: &[&crate::geodata::Source], target_timestep: usize, alpha: f64) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for s in group {
        let age = target_timestep.saturating_sub(s.timestep) as i32;
        let w = (1.0 - alpha).powi(age);
        num += w * s.value;
        den += w;
    }
    if den > 0.0 {
        num / den
    } else {
        // alpha = 1 with no reading at the target timestep: newest wins.
        group.iter().max_by_key(|s| s.timestep).map(|s| s.value).unwrap()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Knn(pub usize);

#[derive(Debug, Clone, Copy)]
pub struct IdwSes {
    pub power: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct Mean;

impl Predictor for Knn {
    fn name(&self) -> String {
        "KNN".into()
    }

    fn predict(&self, context: &ContextSet) -> Result<f64> {
        knn_infer(context, self.0)
    }
}

impl Predictor for IdwSes {
    fn name(&self) -> String {
        "IDW+SES".into()
    }

    fn predict(&self, context: &ContextSet) -> Result<f64> {
        idw_ses_infer(context, self.power, self.alpha)
    }
}

impl Predictor for Mean {
    fn name(&self) -> String {
        "mean".into()
    }

    fn predict(&self, context: &ContextSet) -> Result<f64> {
        mean_infer(context)
    }
}

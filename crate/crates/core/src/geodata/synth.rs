use chrono::{DateTime, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ingest::parse_timestamp;
use super::{Coordinate, StationDataset, StationRecord};
use crate::error::{Error, Result};

/// A Gaussian bump whose center drifts linearly in normalized time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Plume {
    pub amplitude: f64,
    pub center_x: f64,
    pub center_y: f64,
    pub drift_vx: f64,
    pub drift_vy: f64,
    pub sigma: f64,
}

/// Closed-form scalar field `G` over normalized spacetime, with exact
/// gradient. Serves as ground truth for synthetic scenes and as a
/// conservative-field oracle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyticField {
    pub plumes: Vec<Plume>,
    pub baseline: f64,
}

impl AnalyticField {
    pub fn validate(&self) -> Result<()> {
        for (i, p) in self.plumes.iter().enumerate() {
            if !(p.sigma > 0.0 && p.sigma.is_finite()) {
                return Err(Error::Param(format!("plume {i}: sigma must be positive")));
            }
        }
        Ok(())
    }

    /// `(G(c), ∇G(c))` with the gradient ordered `(∂x, ∂y, ∂τ)`.
    pub fn eval(&self, c: [f64; 3]) -> (f64, [f64; 3]) {
        let [x, y, tau] = c;
        let mut value = self.baseline;
        let mut grad = [0.0; 3];
        for p in &self.plumes {
            let dx = x - p.center_x - p.drift_vx * tau;
            let dy = y - p.center_y - p.drift_vy * tau;
            let s2 = p.sigma * p.sigma;
            let g = p.amplitude * (-(dx * dx + dy * dy) / (2.0 * s2)).exp();
            value += g;
            grad[0] -= g * dx / s2;
            grad[1] -= g * dy / s2;
            grad[2] += g * (dx * p.drift_vx + dy * p.drift_vy) / s2;
        }
        (value, grad)
    }

    pub fn value(&self, c: [f64; 3]) -> f64 {
        self.eval(c).0
    }

    pub fn gradient(&self, c: [f64; 3]) -> [f64; 3] {
        self.eval(c).1
    }
}

pub fn analytic_eval(field: &AnalyticField, c: Coordinate) -> (f64, [f64; 3]) {
    field.eval(c.to_array())
}

fn default_plumes() -> Vec<Plume> {
    vec![
        Plume {
            amplitude: 60.0,
            center_x: -0.8,
            center_y: -0.5,
            drift_vx: 0.08,
            drift_vy: 0.05,
            sigma: 0.6,
        },
        Plume {
            amplitude: 45.0,
            center_x: 0.7,
            center_y: 0.6,
            drift_vx: -0.06,
            drift_vy: -0.04,
            sigma: 0.5,
        },
        Plume {
            amplitude: 35.0,
            center_x: 0.2,
            center_y: -0.9,
            drift_vx: -0.03,
            drift_vy: 0.09,
            sigma: 0.7,
        },
    ]
}

/// Synthetic scene description. Plume geometry is given in normalized
/// coordinates, i.e. relative to the z-normalized station layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorSpec {
    pub n_stations: usize,
    pub hours: usize,
    /// ISO-8601 timestamp of the first hour.
    pub start: String,
    pub lng_range: [f64; 2],
    pub lat_range: [f64; 2],
    pub baseline: f64,
    pub plumes: Vec<Plume>,
    /// Std of Gaussian noise added to target readings (µg/m³).
    pub noise_std: f64,
    /// Std of Gaussian noise added to the gradient feature columns.
    pub feature_noise_std: f64,
    /// Probability that any single target reading is dropped.
    pub missing_rate: f64,
    pub time_scale: f64,
    pub seed: Option<u64>,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            n_stations: 100,
            hours: 14 * 24,
            start: "2024-01-01T00:00:00Z".into(),
            lng_range: [100.0, 120.0],
            lat_range: [25.0, 40.0],
            baseline: 20.0,
            plumes: default_plumes(),
            noise_std: 3.0,
            feature_noise_std: 5.0,
            missing_rate: 0.0,
            time_scale: 1.0,
            seed: None,
        }
    }
}

pub const SYNTHETIC_FEATURES: [&str; 5] = ["grad_x", "grad_y", "grad_tau", "noise_a", "noise_b"];

/// Generates stations uniformly in the unit square (mapped onto the
/// configured degree ranges), readings `G(c) + noise` clipped at zero, and
/// five feature columns: the three gradient components with noise plus two
/// white-noise distractors.
pub fn generate_synthetic(spec: &GeneratorSpec) -> Result<(StationDataset, AnalyticField)> {
    if spec.n_stations < 2 || spec.hours < 2 {
        return Err(Error::Param(
            "synthetic scene needs at least 2 stations and 2 hours".into(),
        ));
    }
    if !(spec.time_scale > 0.0)
        || spec.noise_std < 0.0
        || spec.feature_noise_std < 0.0
        || !(0.0..1.0).contains(&spec.missing_rate)
    {
        return Err(Error::Param("invalid noise, missing-rate or time-scale setting".into()));
    }
    let field = AnalyticField {
        plumes: spec.plumes.clone(),
        baseline: spec.baseline,
    };
    field.validate()?;
    let start: DateTime<Utc> = parse_timestamp(&spec.start)
        .ok_or_else(|| Error::Param(format!("cannot parse start timestamp {:?}", spec.start)))?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.unwrap_or(0));
    let positions: Vec<(f64, f64)> = (0..spec.n_stations)
        .map(|_| {
            let u: f64 = rng.random();
            let v: f64 = rng.random();
            (
                spec.lng_range[0] + u * (spec.lng_range[1] - spec.lng_range[0]),
                spec.lat_range[0] + v * (spec.lat_range[1] - spec.lat_range[0]),
            )
        })
        .collect();

    // Same frame fit_normalizer derives: one weight per station, population std.
    let n = positions.len() as f64;
    let lng_mean = positions.iter().map(|p| p.0).sum::<f64>() / n;
    let lat_mean = positions.iter().map(|p| p.1).sum::<f64>() / n;
    let lng_std = (positions.iter().map(|p| (p.0 - lng_mean).powi(2)).sum::<f64>() / n).sqrt();
    let lat_std = (positions.iter().map(|p| (p.1 - lat_mean).powi(2)).sum::<f64>() / n).sqrt();
    let lng_std = lng_std.max(super::STD_FLOOR);
    let lat_std = lat_std.max(super::STD_FLOOR);

    let target_noise = Normal::new(0.0, spec.noise_std.max(0.0))
        .map_err(|e| Error::Param(e.to_string()))?;
    let feature_noise = Normal::new(0.0, spec.feature_noise_std.max(0.0))
        .map_err(|e| Error::Param(e.to_string()))?;
    let unit = Normal::new(0.0, 1.0).unwrap();

    let timestamps: Vec<DateTime<Utc>> = (0..spec.hours)
        .map(|h| start + chrono::Duration::hours(h as i64))
        .collect();
    let mut stations = Vec::with_capacity(spec.n_stations);
    for (i, &(lng, lat)) in positions.iter().enumerate() {
        let x = (lng - lng_mean) / lng_std;
        let y = (lat - lat_mean) / lat_std;
        let mut targets = Vec::with_capacity(spec.hours);
        let mut features = Vec::with_capacity(spec.hours);
        for h in 0..spec.hours {
            let tau = h as f64 / 24.0 / spec.time_scale;
            let (g, grad) = field.eval([x, y, tau]);
            let mut value = g;
            if spec.noise_std > 0.0 {
                value += target_noise.sample(&mut rng);
            }
            let value = value.max(0.0);
            let dropped = spec.missing_rate > 0.0 && rng.random::<f64>() < spec.missing_rate;
            targets.push((!dropped).then_some(value));
            let mut f = Vec::with_capacity(SYNTHETIC_FEATURES.len());
            for gk in grad {
                let noise = if spec.feature_noise_std > 0.0 {
                    feature_noise.sample(&mut rng)
                } else {
                    0.0
                };
                f.push(gk + noise);
            }
            f.push(unit.sample(&mut rng));
            f.push(unit.sample(&mut rng));
            features.push(f);
        }
        stations.push(StationRecord {
            station_id: format!("S{i:03}"),
            raw_lng: lng,
            raw_lat: lat,
            targets,
            features,
            categorical: vec![vec![]; spec.hours],
        });
    }

    let dataset = StationDataset {
        stations,
        epoch: start,
        timestamps,
        normalizer: None,
        feature_names: SYNTHETIC_FEATURES.iter().map(|s| s.to_string()).collect(),
        categorical: vec![],
    };
    Ok((dataset, field))
}

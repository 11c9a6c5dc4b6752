//! Physical plausibility of a learned field: finite-difference curl, path
//! independence of line integrals, and agreement with an analytic gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geodata::AnalyticField;
use crate::model::FieldModel;

/// Axis-aligned box in normalized `(x, y, tau)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub lo: [f64; 3],
    pub hi: [f64; 3],
}

impl Domain {
    pub fn new(lo: [f64; 3], hi: [f64; 3]) -> Result<Self> {
        if (0..3).any(|k| !(lo[k].is_finite() && hi[k].is_finite() && lo[k] <= hi[k])) {
            return Err(Error::Param(format!("invalid domain {lo:?} .. {hi:?}")));
        }
        Ok(Self { lo, hi })
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> [f64; 3] {
        let mut c = [0.0; 3];
        for k in 0..3 {
            let u: f64 = rng.random();
            c[k] = self.lo[k] + u * (self.hi[k] - self.lo[k]);
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurlReport {
    pub mean_curl_norm: f64,
    pub curl_vectors: Vec<[f64; 3]>,
    pub sample_coords: Vec<[f64; 3]>,
    pub h: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epoch: Option<usize>,
}

fn norm3(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// Central-difference curl at one point.
pub fn curl_at<F: Fn([f64; 3]) -> [f64; 3]>(probe: &F, c: [f64; 3], h: f64) -> [f64; 3] {
    // jac[i][j] = dF_i / dx_j
    let mut jac = [[0.0; 3]; 3];
    for j in 0..3 {
        let mut a = c;
        let mut b = c;
        a[j] += h;
        b[j] -= h;
        let (fa, fb) = (probe(a), probe(b));
        for i in 0..3 {
            jac[i][j] = (fa[i] - fb[i]) / (2.0 * h);
        }
    }
    [
        jac[2][1] - jac[1][2],
        jac[0][2] - jac[2][0],
        jac[1][0] - jac[0][1],
    ]
}

/// Curl of `probe` at `q` uniform points of `domain`.
pub fn curl_estimate<F>(probe: &F, domain: &Domain, q: usize, h: f64, seed: u64) -> Result<CurlReport>
where
    F: Fn([f64; 3]) -> [f64; 3] + Sync,
{
    if q == 0 || !(h > 0.0) {
        return Err(Error::Param(format!("curl needs q >= 1 and h > 0, got q={q} h={h}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords: Vec<[f64; 3]> = (0..q).map(|_| domain.sample(&mut rng)).collect();
    let curls: Vec<[f64; 3]> = coords.par_iter().map(|&c| curl_at(probe, c, h)).collect();
    if curls.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite curl sample".into()));
    }
    let mean = curls.iter().map(|&v| norm3(v)).sum::<f64>() / q as f64;
    Ok(CurlReport {
        mean_curl_norm: mean,
        curl_vectors: curls,
        sample_coords: coords,
        h,
        epoch: None,
    })
}

pub fn model_curl(model: &FieldModel, domain: &Domain, q: usize, h: f64, seed: u64) -> Result<CurlReport> {
    curl_estimate(&|c| model.field_probe(c), domain, q, h, seed)
}

/// Midpoint-rule line integral of `probe` along the segment `a -> b`.
pub fn segment_integral<F: Fn([f64; 3]) -> [f64; 3]>(probe: &F, a: [f64; 3], b: [f64; 3], m: usize) -> f64 {
    let d = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let mut total = 0.0;
    for k in 0..m {
        let s = (k as f64 + 0.5) / m as f64;
        let f = probe([a[0] + s * d[0], a[1] + s * d[1], a[2] + s * d[2]]);
        total += f[0] * d[0] + f[1] * d[1] + f[2] * d[2];
    }
    total / m as f64
}

/// Integrates along the straight line and along `n_paths - 1` two-segment
/// paths bent at a random point near the midpoint, `m` midpoint steps per
/// segment. Returns the largest pairwise difference of the integrals.
///
/// Bend points are drawn uniformly from a cube centred on the midpoint with
/// side equal to the src-tar distance.
pub fn path_independence<F>(
    probe: &F,
    src: [f64; 3],
    tar: [f64; 3],
    n_paths: usize,
    m: usize,
    seed: u64,
) -> Result<f64>
where
    F: Fn([f64; 3]) -> [f64; 3],
{
    if n_paths < 2 || m == 0 {
        return Err(Error::Param("path independence needs n_paths >= 2 and m >= 1".into()));
    }
    let len = norm3([tar[0] - src[0], tar[1] - src[1], tar[2] - src[2]]);
    let mid = [
        0.5 * (src[0] + tar[0]),
        0.5 * (src[1] + tar[1]),
        0.5 * (src[2] + tar[2]),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut integrals = vec![segment_integral(probe, src, tar, m)];
    for _ in 1..n_paths {
        let mut bend = mid;
        for v in bend.iter_mut() {
            *v += (rng.random::<f64>() - 0.5) * len;
        }
        integrals.push(segment_integral(probe, src, bend, m) + segment_integral(probe, bend, tar, m));
    }
    let max = integrals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = integrals.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(max - min)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientCheck {
    /// Radians.
    pub mean_angle: Option<f64>,
    pub max_angle: Option<f64>,
    pub mean_rel_magnitude_error: Option<f64>,
    /// Fraction of samples where both vectors were non-negligible.
    pub coverage: f64,
    pub n_samples: usize,
}

/// Compares `scale * probe(c)` with the analytic gradient at `n_samples`
/// uniform points. Points where either vector has norm below `1e-6` are
/// skipped.
pub fn gradient_check<F>(
    probe: &F,
    scale: f64,
    field: &AnalyticField,
    domain: &Domain,
    n_samples: usize,
    seed: u64,
) -> Result<GradientCheck>
where
    F: Fn([f64; 3]) -> [f64; 3] + Sync,
{
    if n_samples == 0 {
        return Err(Error::Param("gradient check needs at least one sample".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords: Vec<[f64; 3]> = (0..n_samples).map(|_| domain.sample(&mut rng)).collect();
    let pairs: Vec<Option<(f64, f64)>> = coords
        .par_iter()
        .map(|&c| {
            let p = probe(c).map(|v| v * scale);
            let g = field.gradient(c);
            let (np, ng) = (norm3(p), norm3(g));
            if np < 1e-6 || ng < 1e-6 {
                return None;
            }
            let cos = ((p[0] * g[0] + p[1] * g[1] + p[2] * g[2]) / (np * ng)).clamp(-1.0, 1.0);
            Some((cos.acos(), (np - ng).abs() / ng))
        })
        .collect();
    let used: Vec<(f64, f64)> = pairs.into_iter().flatten().collect();
    let k = used.len();
    let mean = |f: fn(&(f64, f64)) -> f64| (k > 0).then(|| used.iter().map(f).sum::<f64>() / k as f64);
    Ok(GradientCheck {
        mean_angle: mean(|p| p.0),
        max_angle: (k > 0).then(|| used.iter().map(|p| p.0).fold(0.0, f64::max)),
        mean_rel_magnitude_error: mean(|p| p.1),
        coverage: k as f64 / n_samples as f64,
        n_samples,
    })
}

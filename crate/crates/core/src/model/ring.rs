use serde::Serialize;

use crate::error::{Error, Result};
use crate::geodata::ContextSet;
use crate::nn::Mat;

/// Straight source-to-target paths split into `m` segments.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RingPath {
    /// Per-source displacement of one segment. Each ring-step difference is
    /// dotted with this vector when accumulating the line integral.
    pub step_vectors: Vec<[f64; 3]>,
    pub unit_dirs: Vec<[f64; 3]>,
    pub path_lengths: Vec<f64>,
    /// `transition_coords[j][i]`: end of segment `j` on path `i`.
    pub transition_coords: Vec<Vec<[f64; 3]>>,
}

impl RingPath {
    pub fn n_sources(&self) -> usize {
        self.step_vectors.len()
    }

    pub fn m_steps(&self) -> usize {
        self.transition_coords.len()
    }

    /// Transition coordinates of step `j` (0-based) as an `N x 3` matrix.
    pub fn step_coords(&self, j: usize) -> Mat {
        Mat::from_rows(&self.transition_coords[j])
    }
}

/// Builds paths from each source coordinate to the target.
///
/// By default every path is cut into `m_steps` equal segments so the last
/// transition lands on the target exactly. With `unit_step_literal` each
/// step advances by the unit direction instead, which reaches the target
/// only when the path length equals `m_steps`. A source coincident with the
/// target gets zero step and direction vectors.
pub fn make_ring_path(
    sources: &[[f64; 3]],
    target: [f64; 3],
    m_steps: usize,
    unit_step_literal: bool,
) -> Result<RingPath> {
    if m_steps == 0 {
        return Err(Error::Param("m_steps must be at least 1".into()));
    }
    let n = sources.len();
    let mut step_vectors = Vec::with_capacity(n);
    let mut unit_dirs = Vec::with_capacity(n);
    let mut path_lengths = Vec::with_capacity(n);
    for src in sources {
        let delta = [target[0] - src[0], target[1] - src[1], target[2] - src[2]];
        let len = (delta[0] * delta[0] + delta[1] * delta[1] + delta[2] * delta[2]).sqrt();
        let unit = if len > 0.0 {
            delta.map(|d| d / len)
        } else {
            [0.0; 3]
        };
        let step = if unit_step_literal {
            unit
        } else {
            delta.map(|d| d / m_steps as f64)
        };
        step_vectors.push(step);
        unit_dirs.push(unit);
        path_lengths.push(len);
    }
    let transition_coords = (0..m_steps)
        .map(|j| {
            sources
                .iter()
                .zip(&step_vectors)
                .map(|(src, step)| {
                    if !unit_step_literal && (j + 1 == m_steps || step == &[0.0; 3]) {
                        target
                    } else {
                        let k = (j + 1) as f64;
                        [src[0] + k * step[0], src[1] + k * step[1], src[2] + k * step[2]]
                    }
                })
                .collect()
        })
        .collect();
    Ok(RingPath {
        step_vectors,
        unit_dirs,
        path_lengths,
        transition_coords,
    })
}

pub fn make_context_path(
    context: &ContextSet,
    m_steps: usize,
    unit_step_literal: bool,
) -> Result<RingPath> {
    let sources: Vec<[f64; 3]> = context.sources.iter().map(|s| s.coord.to_array()).collect();
    make_ring_path(
        &sources,
        context.target_coord.to_array(),
        m_steps,
        unit_step_literal,
    )
}

/// Output of ring estimation.
#[derive(Debug, Clone, PartialEq)]
pub struct RingEstimate {
    /// `Ŷ_i = y_i + Δy_i`.
    pub estimates: Vec<f64>,
    pub residuals: Vec<f64>,
    /// `D_0` followed by the `m` ring-step differences, each `N x 3`.
    pub steps: Vec<Mat>,
}

/// Line-integral accumulation with a pluggable gradient estimator.
///
/// `step(j, c_end, d_prev)` returns the `N x 3` difference at the end of
/// segment `j` (1-based) given the transition coordinates and the previous
/// difference. `Δy_i = Σ_{j=1..m} D_{i,j} · step_vector_i`, plus the `D_0`
/// term when `include_d0` is set.
pub fn ring_estimate_with<F>(
    values: &[f64],
    path: &RingPath,
    d0: Mat,
    include_d0: bool,
    mut step: F,
) -> Result<RingEstimate>
where
    F: FnMut(usize, &Mat, &Mat) -> Result<Mat>,
{
    let n = path.n_sources();
    if values.len() != n || d0.shape() != [n, 3] {
        return Err(Error::Shape(format!(
            "ring estimate over {n} paths got {} values and D0 of shape {:?}",
            values.len(),
            d0.shape()
        )));
    }
    let mut steps = Vec::with_capacity(path.m_steps() + 1);
    steps.push(d0);
    for j in 1..=path.m_steps() {
        let c_end = path.step_coords(j - 1);
        let d = step(j, &c_end, &steps[j - 1])?;
        if d.shape() != [n, 3] {
            return Err(Error::Shape(format!(
                "ring step {j} returned shape {:?}, expected [{n}, 3]",
                d.shape()
            )));
        }
        if !d.is_finite() {
            return Err(Error::Numeric(format!("non-finite difference at ring step {j}")));
        }
        steps.push(d);
    }
    let residuals = integrate_steps(&steps, &path.step_vectors, include_d0);
    let estimates = values.iter().zip(&residuals).map(|(y, r)| y + r).collect();
    Ok(RingEstimate {
        estimates,
        residuals,
        steps,
    })
}

pub(crate) fn integrate_steps(steps: &[Mat], step_vectors: &[[f64; 3]], include_d0: bool) -> Vec<f64> {
    let first = if include_d0 { 0 } else { 1 };
    step_vectors
        .iter()
        .enumerate()
        .map(|(i, s)| {
            steps[first..]
                .iter()
                .map(|d| {
                    let r = d.row(i);
                    r[0] * s[0] + r[1] * s[1] + r[2] * s[2]
                })
                .sum()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quarter_steps_along_x() {
        let p = make_ring_path(&[[0.0, 0.0, 0.0]], [1.0, 0.0, 0.0], 4, false).unwrap();
        assert_eq!(p.step_vectors[0], [0.25, 0.0, 0.0]);
        let xs: Vec<f64> = p.transition_coords.iter().map(|c| c[0][0]).collect();
        assert_eq!(xs, vec![0.25, 0.5, 0.75, 1.0]);
        assert_eq!(p.unit_dirs[0], [1.0, 0.0, 0.0]);
        assert_eq!(p.path_lengths[0], 1.0);
    }

    #[test]
    fn coincident_source_is_degenerate() {
        let t = [0.3, -0.2, 1.5];
        let p = make_ring_path(&[t], t, 3, false).unwrap();
        assert_eq!(p.step_vectors[0], [0.0; 3]);
        assert_eq!(p.unit_dirs[0], [0.0; 3]);
        assert!(p.transition_coords.iter().all(|c| c[0] == t));
    }

    #[test]
    fn last_transition_is_target() {
        let src = [0.1234567, -3.3, 7.77];
        let tar = [1.0 / 3.0, 2.0 / 7.0, 9.1];
        for m in [1, 3, 7, 16] {
            let p = make_ring_path(&[src], tar, m, false).unwrap();
            let last = p.transition_coords[m - 1][0];
            for k in 0..3 {
                assert!((last[k] - tar[k]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn literal_mode_advances_by_unit_vector() {
        let p = make_ring_path(&[[0.0, 0.0, 0.0]], [3.0, 4.0, 0.0], 2, true).unwrap();
        assert_eq!(p.step_vectors[0], [0.6, 0.8, 0.0]);
        assert_eq!(p.transition_coords[1][0], [1.2, 1.6, 0.0]);
    }

    #[test]
    fn zero_steps_rejected() {
        assert!(make_ring_path(&[[0.0; 3]], [1.0; 3], 0, false).is_err());
    }

    #[test]
    fn zero_gradient_keeps_values_and_d0_flag() {
        let p = make_ring_path(&[[0.0; 3], [1.0, 1.0, 0.0]], [2.0, 0.0, 0.0], 4, false).unwrap();
        let out = ring_estimate_with(&[1.0, 2.0], &p, Mat::zeros(2, 3), false, |_, _, _| {
            Ok(Mat::zeros(2, 3))
        })
        .unwrap();
        assert_eq!(out.estimates, vec![1.0, 2.0]);
        assert_eq!(out.steps.len(), 5);

        let d0 = Mat::from_rows(&[[1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        let with = ring_estimate_with(&[0.0, 0.0], &p, d0, true, |_, _, _| Ok(Mat::zeros(2, 3)))
            .unwrap();
        assert_eq!(with.residuals, vec![0.5, 0.25]);
    }
}

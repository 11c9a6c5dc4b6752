//! Spatio-temporal positional code.
//!
//! A 3-vector `(x, y, t)` maps to `p = [p_S, p_T]` with `p_S = (x, y)` passed
//! through verbatim and `p_T` made of one `(sin, cos)` pair per period.
//! Dimension `i` of `p_T` (0-based) is `sin(2πt / T[i/2])` for even `i` and
//! `cos(2πt / T[i/2])` for odd `i`, so `temporal_code(0) = [0, 1, 0, 1, ...]`.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CODE_DIM: usize = 10;
pub const TEMPORAL_DIM: usize = 8;

/// Day, week, month and year periods in units of `a` (days by default).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeriodSet {
    periods: [f64; 4],
}

impl PeriodSet {
    pub const BASE: [f64; 4] = [1.0, 7.0, 30.5, 365.0];

    pub fn with_scale(a: f64) -> Result<Self> {
        if !(a.is_finite() && a > 0.0) {
            return Err(Error::Param(format!("period scale must be positive, got {a}")));
        }
        Ok(Self {
            periods: Self::BASE.map(|p| p * a),
        })
    }

    pub fn periods(&self) -> &[f64; 4] {
        &self.periods
    }
}

impl Default for PeriodSet {
    fn default() -> Self {
        Self {
            periods: Self::BASE,
        }
    }
}

/// A 10-component code: two spatial components followed by eight temporal ones.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StCode(pub [f64; CODE_DIM]);

impl StCode {
    pub fn spatial(&self) -> &[f64] {
        &self.0[..2]
    }

    pub fn temporal(&self) -> &[f64] {
        &self.0[2..]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

pub fn temporal_code(t: f64, periods: &PeriodSet) -> [f64; TEMPORAL_DIM] {
    let mut out = [0.0; TEMPORAL_DIM];
    for (d, period) in periods.periods.iter().enumerate() {
        let (s, c) = (TAU * t / period).sin_cos();
        out[2 * d] = s;
        out[2 * d + 1] = c;
    }
    out
}

/// Encodes a coordinate or a difference vector. Non-finite input is rejected.
pub fn encode(v: [f64; 3], periods: &PeriodSet) -> Result<StCode> {
    if v.iter().any(|c| !c.is_finite()) {
        return Err(Error::Numeric(format!("cannot encode non-finite vector {v:?}")));
    }
    Ok(encode_unchecked(v, periods))
}

pub(crate) fn encode_unchecked(v: [f64; 3], periods: &PeriodSet) -> StCode {
    let mut p = [0.0; CODE_DIM];
    p[0] = v[0];
    p[1] = v[1];
    p[2..].copy_from_slice(&temporal_code(v[2], periods));
    StCode(p)
}

/// Row-wise encoding of a batch, returned row-major as `N x 10`.
pub fn encode_batch(rows: &[[f64; 3]], periods: &PeriodSet) -> Result<Vec<StCode>> {
    rows.iter().map(|r| encode(*r, periods)).collect()
}

/// Derivative of every code component with respect to the third input
/// component, used when the code of a learned difference vector is part of
/// the backward pass.
pub(crate) fn temporal_code_derivative(t: f64, periods: &PeriodSet) -> [f64; TEMPORAL_DIM] {
    let mut out = [0.0; TEMPORAL_DIM];
    for (d, period) in periods.periods.iter().enumerate() {
        let w = TAU / period;
        let (s, c) = (w * t).sin_cos();
        out[2 * d] = w * c;
        out[2 * d + 1] = -w * s;
    }
    out
}

//! The field model: an initial-difference head, ring estimation along
//! straight paths (decoder 1 + `W_g`) and neighbor aggregation (decoder 2 +
//! `W_N` + softmax), composed into a pyramidal inference.

mod checkpoint;
mod ring;
mod trace;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoding::{encode_unchecked, PeriodSet, CODE_DIM};
use crate::error::{Error, Result};
use crate::geodata::ContextSet;
use crate::nn::{gelu_mat, Decoder, Mat, Mlp3, Params};

pub use checkpoint::{Checkpoint, TensorRecord, CHECKPOINT_FORMAT};
pub use ring::{make_context_path, make_ring_path, ring_estimate_with, RingEstimate, RingPath};
pub use trace::{LossKind, SampleGrad};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Width of the head's hidden layers and of every decoder feed-forward block.
    pub hidden_dim: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub m_steps: usize,
    /// Length of the source feature vector after one-hot expansion. Zero
    /// means "take it from the dataset".
    pub feature_dim: usize,
    pub seed: Option<u64>,
    /// Multiplier on the day/week/month/year periods.
    pub period_scale: f64,
    /// Advance transitions by the unit direction and dot differences with it.
    pub unit_step_literal: bool,
    /// Add the head output `D_0` to the integral sum.
    pub include_d0_in_sum: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 64,
            n_heads: 2,
            n_layers: 2,
            m_steps: 16,
            feature_dim: 0,
            seed: None,
            period_scale: 1.0,
            unit_step_literal: false,
            include_d0_in_sum: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.n_heads == 0 || self.n_layers == 0 {
            return Err(Error::Param("hidden_dim, n_heads and n_layers must be positive".into()));
        }
        if self.hidden_dim % self.n_heads != 0 || CODE_DIM % self.n_heads != 0 {
            return Err(Error::Param(format!(
                "n_heads={} must divide hidden_dim={} and the code width {CODE_DIM}",
                self.n_heads, self.hidden_dim
            )));
        }
        if self.m_steps == 0 {
            return Err(Error::Param("m_steps must be at least 1".into()));
        }
        PeriodSet::with_scale(self.period_scale)?;
        Ok(())
    }
}

/// Inference result with per-source provenance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PyramidEstimate {
    /// `Ŷ`: each source's estimate of the target (normalized units).
    pub per_source_estimates: Vec<f64>,
    pub weights: Vec<f64>,
    /// `ŷ = W · Ŷ`.
    pub y_hat: f64,
    pub residuals: Vec<f64>,
    /// Every ring-step difference (`D_0..D_m`, rows per source), kept only
    /// in diagnostics mode.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<Vec<Vec<[f64; 3]>>>,
}

#[derive(Debug, Clone)]
pub struct FieldModel {
    pub config: ModelConfig,
    periods: PeriodSet,
    /// `[P_src; X_src] -> D_0`.
    pub init_head: Mlp3,
    pub ring_decoder: Decoder,
    /// `10 x 3`.
    pub w_g: Mat,
    pub agg_decoder: Decoder,
    /// `10 x 1`.
    pub w_n: Mat,
}

impl FieldModel {
    /// Fresh model. Linear maps use symmetric uniform fan-in init; `W_g` and
    /// `W_N` start at zero so the untrained model predicts the uniform mean
    /// of its sources.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.unwrap_or(0));
        let h = config.hidden_dim;
        let init_head = Mlp3::new(CODE_DIM + config.feature_dim, h, 3, &mut rng);
        let ring_decoder = Decoder::new(CODE_DIM, config.n_heads, h, config.n_layers, &mut rng);
        let agg_decoder = Decoder::new(CODE_DIM, config.n_heads, h, config.n_layers, &mut rng);
        Ok(Self {
            periods: PeriodSet::with_scale(config.period_scale)?,
            config,
            init_head,
            ring_decoder,
            w_g: Mat::zeros(CODE_DIM, 3),
            agg_decoder,
            w_n: Mat::zeros(CODE_DIM, 1),
        })
    }

    pub fn periods(&self) -> &PeriodSet {
        &self.periods
    }

    pub fn param_count(&self) -> usize {
        crate::nn::param_count(self)
    }

    pub(crate) fn encode_rows<'a>(&self, rows: impl ExactSizeIterator<Item = &'a [f64]>) -> Mat {
        let n = rows.len();
        let mut out = Mat::zeros(n, CODE_DIM);
        for (i, r) in rows.enumerate() {
            let code = encode_unchecked([r[0], r[1], r[2]], &self.periods);
            out.row_mut(i).copy_from_slice(&code.0);
        }
        out
    }

    pub(crate) fn encode_mat(&self, m: &Mat) -> Mat {
        self.encode_rows((0..m.rows()).map(|i| m.row(i)))
    }

    pub(crate) fn source_codes(&self, context: &ContextSet) -> Mat {
        let coords: Vec<[f64; 3]> = context.sources.iter().map(|s| s.coord.to_array()).collect();
        self.encode_rows(coords.iter().map(|c| &c[..]))
    }

    pub(crate) fn head_input(&self, p_src: &Mat, x_src: &Mat) -> Result<Mat> {
        if p_src.rows() != x_src.rows() {
            return Err(Error::Shape(format!(
                "{} source codes but {} feature rows",
                p_src.rows(),
                x_src.rows()
            )));
        }
        if x_src.cols() != self.config.feature_dim {
            return Err(Error::Shape(format!(
                "feature width {} does not match the model's feature_dim {}",
                x_src.cols(),
                self.config.feature_dim
            )));
        }
        let mut input = Mat::zeros(p_src.rows(), CODE_DIM + x_src.cols());
        for i in 0..p_src.rows() {
            let row = input.row_mut(i);
            row[..CODE_DIM].copy_from_slice(p_src.row(i));
            row[CODE_DIM..].copy_from_slice(x_src.row(i));
        }
        Ok(input)
    }

    /// `D_0 = MLP([P_src; X_src])`, one 3-vector per source.
    pub fn init_difference(&self, p_src: &Mat, x_src: &Mat) -> Result<Mat> {
        let input = self.head_input(p_src, x_src)?;
        Ok(self.init_head.forward(&input).0)
    }

    /// One ring step: `GeLU(Decoder1(encode(C_end), encode(D_prev))) · W_g`.
    /// Attention runs across all sources jointly.
    pub fn ring_step(&self, c_end: &Mat, d_prev: &Mat) -> Result<Mat> {
        if c_end.shape() != d_prev.shape() || c_end.cols() != 3 {
            return Err(Error::Shape(format!(
                "ring step got C_end {:?} and D_prev {:?}",
                c_end.shape(),
                d_prev.shape()
            )));
        }
        let p_tar = self.encode_mat(c_end);
        let p_mem = self.encode_mat(d_prev);
        let (x, _) = self.ring_decoder.forward(&p_tar, &p_mem);
        Ok(gelu_mat(&x).matmul(&self.w_g))
    }

    /// Softmax weights over sources from `Decoder2(P_src, P_tar repeated)`.
    pub fn aggregate(&self, p_src: &Mat, p_tar: &[f64; CODE_DIM]) -> Vec<f64> {
        let (_, _, w) = self.aggregate_parts(p_src, p_tar);
        w
    }

    /// `(decoder output, logits, weights)`.
    pub(crate) fn aggregate_parts(
        &self,
        p_src: &Mat,
        p_tar: &[f64; CODE_DIM],
    ) -> (Mat, Vec<f64>, Vec<f64>) {
        let rep = Mat::from_rows(&vec![*p_tar; p_src.rows()]);
        let (out, _) = self.agg_decoder.forward(p_src, &rep);
        let logits = out.matmul(&self.w_n).into_vec();
        let weights = softmax(&logits);
        (out, logits, weights)
    }

    pub fn ring_estimate(&self, context: &ContextSet) -> Result<RingEstimate> {
        let path = make_context_path(context, self.config.m_steps, self.config.unit_step_literal)?;
        let p_src = self.source_codes(context);
        let x_src = feature_matrix(context);
        let d0 = self.init_difference(&p_src, &x_src)?;
        ring_estimate_with(
            &context.values(),
            &path,
            d0,
            self.config.include_d0_in_sum,
            |_, c_end, d_prev| self.ring_step(c_end, d_prev),
        )
    }

    pub fn pyramidal_infer(&self, context: &ContextSet) -> Result<PyramidEstimate> {
        self.pyramidal_infer_with(context, false)
    }

    pub fn pyramidal_infer_with(
        &self,
        context: &ContextSet,
        diagnostics: bool,
    ) -> Result<PyramidEstimate> {
        if context.is_empty() {
            return Err(Error::InsufficientContext("empty context".into()));
        }
        let ring = self.ring_estimate(context)?;
        let p_src = self.source_codes(context);
        let p_tar = encode_unchecked(context.target_coord.to_array(), &self.periods).0;
        let weights = self.aggregate(&p_src, &p_tar);
        Ok(compose(ring, weights, diagnostics))
    }

    /// The learned field at a single coordinate with zero memory: one ring
    /// step with `N = 1`, `C_end = c`, `D_prev = 0`.
    pub fn field_probe(&self, c: [f64; 3]) -> [f64; 3] {
        let c_end = Mat::from_vec(1, 3, c.to_vec());
        let d = self
            .ring_step(&c_end, &Mat::zeros(1, 3))
            .expect("probe shapes are fixed");
        [d.get(0, 0), d.get(0, 1), d.get(0, 2)]
    }
}

pub(crate) fn compose(ring: RingEstimate, weights: Vec<f64>, diagnostics: bool) -> PyramidEstimate {
    let y_hat = weights
        .iter()
        .zip(&ring.estimates)
        .map(|(w, y)| w * y)
        .sum();
    let steps = diagnostics.then(|| {
        ring.steps
            .iter()
            .map(|d| (0..d.rows()).map(|i| [d.get(i, 0), d.get(i, 1), d.get(i, 2)]).collect())
            .collect()
    });
    PyramidEstimate {
        per_source_estimates: ring.estimates,
        weights,
        y_hat,
        residuals: ring.residuals,
        steps,
    }
}

pub(crate) fn feature_matrix(context: &ContextSet) -> Mat {
    let dim = context.feature_dim();
    let mut m = Mat::zeros(context.len(), dim);
    for (i, s) in context.sources.iter().enumerate() {
        m.row_mut(i).copy_from_slice(&s.features);
    }
    m
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

impl Params for FieldModel {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat)) {
        let p = |name: &str| {
            if prefix.is_empty() {
                name.to_string()
            } else {
                format!("{prefix}.{name}")
            }
        };
        self.init_head.visit(&p("init_head"), f);
        self.ring_decoder.visit(&p("ring_decoder"), f);
        f(p("w_g"), &self.w_g);
        self.agg_decoder.visit(&p("agg_decoder"), f);
        f(p("w_n"), &self.w_n);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Mat)) {
        let p = |name: &str| {
            if prefix.is_empty() {
                name.to_string()
            } else {
                format!("{prefix}.{name}")
            }
        };
        self.init_head.visit_mut(&p("init_head"), f);
        self.ring_decoder.visit_mut(&p("ring_decoder"), f);
        f(p("w_g"), &mut self.w_g);
        self.agg_decoder.visit_mut(&p("agg_decoder"), f);
        f(p("w_n"), &mut self.w_n);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geodata::{Coordinate, Source};
    use crate::nn::{flatten, unflatten};
    use rand::Rng;

    pub(crate) fn toy_context(n: usize, feature_dim: usize, seed: u64) -> ContextSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sources = (0..n)
            .map(|i| Source {
                coord: Coordinate {
                    x: rng.random_range(-1.0..1.0),
                    y: rng.random_range(-1.0..1.0),
                    tau: rng.random_range(0.0..2.0),
                },
                features: (0..feature_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
                value: rng.random_range(-1.0..1.0),
                station: i,
                timestep: 0,
            })
            .collect();
        ContextSet {
            sources,
            target_coord: Coordinate {
                x: 0.1,
                y: -0.2,
                tau: 2.0,
            },
            target_timestep: 0,
        }
    }

    fn randomized(config: ModelConfig, seed: u64) -> FieldModel {
        let mut m = FieldModel::new(config).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = flatten(&m);
        for x in v.iter_mut() {
            *x += rng.random_range(-0.3..0.3);
        }
        unflatten(&mut m, &v);
        m
    }

    #[test]
    fn fresh_model_predicts_uniform_mean() {
        let cfg = ModelConfig {
            feature_dim: 5,
            ..Default::default()
        };
        let m = FieldModel::new(cfg).unwrap();
        let ctx = toy_context(36, 5, 1);
        let est = m.pyramidal_infer(&ctx).unwrap();
        let mean = ctx.values().iter().sum::<f64>() / 36.0;
        assert!(est.weights.iter().all(|&w| w == 1.0 / 36.0));
        assert!((est.y_hat - mean).abs() < 1e-12);
        assert_eq!(est.per_source_estimates, ctx.values());
    }

    #[test]
    fn init_difference_shapes_and_errors() {
        let cfg = ModelConfig {
            feature_dim: 5,
            ..Default::default()
        };
        let m = FieldModel::new(cfg).unwrap();
        let ctx = toy_context(36, 5, 2);
        let d0 = m
            .init_difference(&m.source_codes(&ctx), &feature_matrix(&ctx))
            .unwrap();
        assert_eq!(d0.shape(), [36, 3]);
        let wrong = toy_context(36, 4, 2);
        assert!(matches!(
            m.init_difference(&m.source_codes(&wrong), &feature_matrix(&wrong)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn ring_step_permutation_equivariant() {
        let m = randomized(
            ModelConfig {
                feature_dim: 2,
                ..Default::default()
            },
            4,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let c = Mat::uniform(6, 3, 1.0, &mut rng);
        let d = Mat::uniform(6, 3, 1.0, &mut rng);
        let out = m.ring_step(&c, &d).unwrap();
        let perm = [3, 1, 5, 0, 2, 4];
        let pick = |x: &Mat| Mat::from_rows(&perm.iter().map(|&i| x.row(i).to_vec()).collect::<Vec<_>>());
        let outp = m.ring_step(&pick(&c), &pick(&d)).unwrap();
        for (r, &i) in perm.iter().enumerate() {
            for k in 0..3 {
                assert!((outp.get(r, k) - out.get(i, k)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn singleton_context_weight_is_one() {
        let m = randomized(
            ModelConfig {
                feature_dim: 1,
                m_steps: 4,
                ..Default::default()
            },
            3,
        );
        let ctx = toy_context(1, 1, 5);
        let est = m.pyramidal_infer(&ctx).unwrap();
        assert_eq!(est.weights, vec![1.0]);
        assert_eq!(est.y_hat, est.per_source_estimates[0]);
    }

    #[test]
    fn probe_is_zero_for_fresh_model_and_pure() {
        let m = FieldModel::new(ModelConfig::default()).unwrap();
        assert_eq!(m.field_probe([0.2, 0.4, 1.0]), [0.0; 3]);
        let r = randomized(ModelConfig::default(), 8);
        assert_eq!(r.field_probe([0.2, 0.4, 1.0]), r.field_probe([0.2, 0.4, 1.0]));
    }

    #[test]
    fn config_validation() {
        let bad = ModelConfig {
            n_heads: 3,
            hidden_dim: 63,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = ModelConfig {
            m_steps: 0,
            ..Default::default()
        };
        assert!(FieldModel::new(bad).is_err());
    }
}

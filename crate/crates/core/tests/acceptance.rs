//! Acceptance suite. Each criterion prints one `PASS`/`FAIL` line straight to
//! stderr (bypassing output capture) and then asserts.
//!
//! Criteria 6-8 share one training run on `configs/synthetic_benchmark.json`.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stfnn::diagnostics::{curl_estimate, model_curl, path_independence, Domain};
use stfnn::encoding::{encode, temporal_code, PeriodSet};
use stfnn::evalsuite::SweepReport;
use stfnn::experiment::{prepare_data, run_eval, run_train, ExperimentConfig};
use stfnn::model::{make_ring_path, ring_estimate_with, Checkpoint, LossKind};
use stfnn::nn::{flatten, unflatten, Mat};
use stfnn::training::TrainLog;
use stfnn::{ContextSet, Coordinate, FieldModel, ModelConfig, Source};

fn report(id: u32, name: &str, passed: bool, elapsed: Duration, detail: &str) {
    let line = format!(
        "{} criterion {id} ({name}) in {:.1}s: {detail}",
        if passed { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    let _ = writeln!(std::io::stderr(), "{line}");
    assert!(passed, "{line}");
}

fn random_point(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [
        rng.random_range(-2.0..2.0),
        rng.random_range(-2.0..2.0),
        rng.random_range(0.0..14.0),
    ]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

/// Drifting Gaussian plumes `(amplitude, cx, cy, vx, vy, sigma)`.
struct Plumes(Vec<[f64; 6]>);

impl Plumes {
    fn three() -> Self {
        Plumes(vec![
            [60.0, -0.8, -0.5, 0.08, 0.05, 0.6],
            [45.0, 0.7, 0.6, -0.06, -0.04, 0.5],
            [35.0, 0.2, -0.9, -0.03, 0.09, 0.7],
        ])
    }

    fn value(&self, c: [f64; 3]) -> f64 {
        self.0
            .iter()
            .map(|&[a, cx, cy, vx, vy, s]| {
                let dx = c[0] - cx - vx * c[2];
                let dy = c[1] - cy - vy * c[2];
                a * (-(dx * dx + dy * dy) / (2.0 * s * s)).exp()
            })
            .sum::<f64>()
            + 10.0
    }

    fn gradient(&self, c: [f64; 3]) -> [f64; 3] {
        let mut g = [0.0; 3];
        for &[a, cx, cy, vx, vy, s] in &self.0 {
            let dx = c[0] - cx - vx * c[2];
            let dy = c[1] - cy - vy * c[2];
            let v = a * (-(dx * dx + dy * dy) / (2.0 * s * s)).exp();
            let k = -v / (s * s);
            g[0] += k * dx;
            g[1] += k * dy;
            g[2] += k * (-vx * dx - vy * dy);
        }
        g
    }
}

fn stub_delta(src: [f64; 3], tar: [f64; 3], m: usize, field: impl Fn([f64; 3]) -> [f64; 3]) -> f64 {
    let path = make_ring_path(&[src], tar, m, false).unwrap();
    let est = ring_estimate_with(&[0.0], &path, Mat::zeros(1, 3), false, |_, c, _| {
        Ok(Mat::from_rows(&[field([c.get(0, 0), c.get(0, 1), c.get(0, 2)])]))
    })
    .unwrap();
    est.residuals[0]
}

#[test]
fn criterion_1_quadrature_exactness() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (src, tar) = (random_point(&mut rng), random_point(&mut rng));
        let g = [
            rng.random_range(-5.0..5.0),
            rng.random_range(-5.0..5.0),
            rng.random_range(-5.0..5.0),
        ];
        let exact = dot(g, sub(tar, src));
        for m in [1, 2, 4, 8, 16] {
            worst = worst.max((stub_delta(src, tar, m, |_| g) - exact).abs());
        }
    }
    let elapsed = start.elapsed();
    report(
        1,
        "quadrature exactness",
        worst <= 1e-6 && elapsed < Duration::from_secs(5),
        elapsed,
        &format!("max |dy - g.(tar - src)| = {worst:.3e}"),
    );
}

#[test]
fn criterion_2_conservative_convergence() {
    let start = Instant::now();
    let field = Plumes::three();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 500;
    let mut better = 0;
    for _ in 0..n {
        let (src, tar) = (random_point(&mut rng), random_point(&mut rng));
        let exact = field.value(tar) - field.value(src);
        let e16 = (stub_delta(src, tar, 16, |c| field.gradient(c)) - exact).abs();
        let e2 = (stub_delta(src, tar, 2, |c| field.gradient(c)) - exact).abs();
        if e16 < e2 {
            better += 1;
        }
    }
    let probe = |c: [f64; 3]| field.gradient(c);
    let mut worst_ratio: f64 = 0.0;
    let mut all_within = true;
    for k in 0..50 {
        let (src, tar) = (random_point(&mut rng), random_point(&mut rng));
        let d = path_independence(&probe, src, tar, 4, 256, 100 + k).unwrap();
        let scale = (field.value(tar) - field.value(src)).abs();
        all_within &= d <= 1e-3 * scale + 1e-6;
        worst_ratio = worst_ratio.max(d / (scale + 1e-12));
    }
    let frac = better as f64 / n as f64;
    let elapsed = start.elapsed();
    report(
        2,
        "conservative-field convergence",
        frac >= 0.95 && all_within && elapsed < Duration::from_secs(30),
        elapsed,
        &format!(
            "m=16 beats m=2 on {better}/{n} pairs; worst path discrepancy {worst_ratio:.2e} relative"
        ),
    );
}

#[test]
fn criterion_3_curl_correctness() {
    let start = Instant::now();
    let field = Plumes::three();
    let domain = Domain::new([-2.0, -2.0, 0.0], [2.0, 2.0, 14.0]).unwrap();
    let conservative = curl_estimate(&|c| field.gradient(c), &domain, 256, 1e-3, 3).unwrap();
    let rotational = curl_estimate(&|c: [f64; 3]| [-c[1], c[0], 0.0], &domain, 256, 1e-3, 4).unwrap();
    let rot_err = rotational
        .curl_vectors
        .iter()
        .map(|v| (v[0].abs()).max(v[1].abs()).max((v[2] - 2.0).abs()))
        .fold(0.0_f64, f64::max);
    let elapsed = start.elapsed();
    report(
        3,
        "curl correctness",
        conservative.mean_curl_norm <= 1e-4
            && rotational.curl_vectors.len() == 256
            && rot_err <= 1e-6
            && elapsed < Duration::from_secs(10),
        elapsed,
        &format!(
            "gradient field mean curl {:.3e}; rotational max deviation from (0,0,2) {rot_err:.3e}",
            conservative.mean_curl_norm
        ),
    );
}

fn random_context(rng: &mut ChaCha8Rng, n: usize, feature_dim: usize) -> ContextSet {
    let sources = (0..n)
        .map(|i| Source {
            coord: Coordinate::from_array(random_point(rng)),
            features: (0..feature_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
            value: rng.random_range(-3.0..3.0),
            station: i,
            timestep: 0,
        })
        .collect();
    ContextSet {
        sources,
        target_coord: Coordinate::from_array(random_point(rng)),
        target_timestep: 0,
    }
}

fn perturbed(model: &FieldModel, rng: &mut ChaCha8Rng, spread: f64) -> FieldModel {
    let mut m = model.clone();
    let v: Vec<f64> = flatten(&m)
        .into_iter()
        .map(|x| x + rng.random_range(-spread..spread))
        .collect();
    unflatten(&mut m, &v);
    m
}

#[test]
fn criterion_4_simplex_and_identity() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = ModelConfig {
        hidden_dim: 16,
        m_steps: 4,
        feature_dim: 2,
        ..ModelConfig::default()
    };
    let mut simplex_ok = true;
    let mut hull_ok = true;
    let mut identity_ok = true;
    let mut worst_identity: f64 = 0.0;
    for state in 0..1000u64 {
        let n = rng.random_range(1..=12);
        let ctx = random_context(&mut rng, n, 2);
        let fresh = FieldModel::new(ModelConfig {
            seed: Some(state),
            ..cfg.clone()
        })
        .unwrap();

        // Fresh parameters: the uniform neighborhood mean.
        let est = fresh.pyramidal_infer(&ctx).unwrap();
        let mean = ctx.values().iter().sum::<f64>() / n as f64;
        let err = (est.y_hat - mean).abs();
        worst_identity = worst_identity.max(err);
        identity_ok &= err <= 1e-12 * (1.0 + mean.abs());

        let model = perturbed(&fresh, &mut rng, 0.5);
        let est = model.pyramidal_infer(&ctx).unwrap();
        let sum: f64 = est.weights.iter().sum();
        simplex_ok &= est.weights.iter().all(|&w| w >= 0.0) && (sum - 1.0).abs() <= 1e-6;

        // Zero-gradient ring step: estimates stay at the source values.
        let path = make_ring_path(
            &ctx.sources.iter().map(|s| s.coord.to_array()).collect::<Vec<_>>(),
            ctx.target_coord.to_array(),
            4,
            false,
        )
        .unwrap();
        let ring = ring_estimate_with(&ctx.values(), &path, Mat::zeros(n, 3), false, |_, c, _| {
            Ok(Mat::zeros(c.rows(), 3))
        })
        .unwrap();
        let y: f64 = ring.estimates.iter().zip(&est.weights).map(|(v, w)| v * w).sum();
        let lo = ctx.values().iter().copied().fold(f64::INFINITY, f64::min);
        let hi = ctx.values().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        hull_ok &= y >= lo - 1e-12 && y <= hi + 1e-12;
    }
    let elapsed = start.elapsed();
    report(
        4,
        "simplex and identity invariants",
        simplex_ok && hull_ok && identity_ok && elapsed < Duration::from_secs(30),
        elapsed,
        &format!(
            "simplex={simplex_ok} hull={hull_ok} identity={identity_ok} (max |y - mean| {worst_identity:.1e})"
        ),
    );
}

#[test]
fn criterion_5_gradient_correctness() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = ModelConfig {
        hidden_dim: 16,
        m_steps: 2,
        feature_dim: 3,
        seed: Some(5),
        ..ModelConfig::default()
    };
    let model = perturbed(&FieldModel::new(cfg).unwrap(), &mut rng, 0.3);
    let ctx = random_context(&mut rng, 4, 3);
    let truth = 0.7;
    let base = flatten(&model);
    let mut worst: f64 = 0.0;
    for kind in [LossKind::Mae, LossKind::Mse] {
        let analytic = flatten(&model.sample_grad(&ctx, truth, kind).unwrap().grad);
        let loss_at = |params: &[f64]| {
            let mut m = model.clone();
            unflatten(&mut m, params);
            let y = m.pyramidal_infer(&ctx).unwrap().y_hat;
            match kind {
                LossKind::Mae => (y - truth).abs(),
                LossKind::Mse => (y - truth).powi(2),
            }
        };
        let h = 1e-4;
        for _ in 0..20 {
            let k = rng.random_range(0..base.len());
            let mut p = base.clone();
            p[k] = base[k] + h;
            let up = loss_at(&p);
            p[k] = base[k] - h;
            let down = loss_at(&p);
            let numeric = (up - down) / (2.0 * h);
            let rel = (analytic[k] - numeric).abs() / analytic[k].abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    let elapsed = start.elapsed();
    report(
        5,
        "gradient correctness",
        worst <= 1e-3 && elapsed < Duration::from_secs(60),
        elapsed,
        &format!("worst relative error {worst:.2e} over 2 x 20 parameters"),
    );
}

#[test]
fn criterion_9_encoding() {
    let start = Instant::now();
    let p = PeriodSet::default();
    let zero = temporal_code(0.0, &p) == [0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0];
    let mut periodic = true;
    let mut passthrough = true;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..200 {
        let t = rng.random_range(-1000.0..1000.0);
        let (a, b) = (temporal_code(t, &p), temporal_code(t + 365.0, &p));
        periodic &= (a[6] - b[6]).abs() <= 1e-9 && (a[7] - b[7]).abs() <= 1e-9;
        let (x, y) = (rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
        let code = encode([x, y, t], &p).unwrap();
        passthrough &= code.0[0] == x && code.0[1] == y;
    }
    let elapsed = start.elapsed();
    report(
        9,
        "encoding unit suite",
        zero && periodic && passthrough && elapsed < Duration::from_secs(1),
        elapsed,
        &format!("zero code {zero}, year periodicity {periodic}, spatial pass-through {passthrough}"),
    );
}

struct Benchmark {
    cfg: ExperimentConfig,
    log: TrainLog,
    model: FieldModel,
    train_time: Duration,
    _dir: tempfile::TempDir,
}

fn benchmark_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/synthetic_benchmark.json")
}

fn benchmark() -> &'static Benchmark {
    static RUN: OnceLock<Benchmark> = OnceLock::new();
    RUN.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig::load(benchmark_config()).unwrap();
        cfg.output_dir = dir.path().to_path_buf();
        let start = Instant::now();
        let out = run_train(&cfg).unwrap();
        Benchmark {
            train_time: start.elapsed(),
            log: out.log,
            model: out.model,
            cfg,
            _dir: dir,
        }
    })
}

#[test]
fn criterion_6_synthetic_benchmark() {
    let b = benchmark();
    let start = Instant::now();
    let report_ = run_eval(&b.cfg, Some(&b.model)).unwrap();
    let mae = |name: &str| report_.cell(name, 0.25).unwrap().mae;
    let (stfnn, idw) = (mae("STFNN"), mae("IDW+SES"));
    let first = b.log.records.first().unwrap().val_mae;
    let last = b.log.records.last().unwrap().val_mae;
    let elapsed = b.train_time + start.elapsed();
    report(
        6,
        "end-to-end synthetic benchmark",
        b.log.records.len() == 50 && stfnn <= idw && last < first,
        elapsed,
        &format!(
            "test MAE STFNN {stfnn:.4} vs IDW+SES {idw:.4} at 25% mask; val MAE epoch 1 {first:.4} -> epoch {} {last:.4}",
            b.log.records.len()
        ),
    );
}

#[test]
fn criterion_7_curl_trend() {
    let b = benchmark();
    let start = Instant::now();
    let prepared = prepare_data(&b.cfg).unwrap();
    let domain = prepared.domain().unwrap();
    let load = |epoch: usize| {
        Checkpoint::load(b.cfg.epoch_checkpoint_path(epoch))
            .unwrap()
            .to_model()
            .unwrap()
    };
    let last = b.log.records.len();
    let q = b.cfg.diagnostics.q;
    let h = b.cfg.diagnostics.h;
    let c1 = model_curl(&load(1), &domain, q, h, 7).unwrap().mean_curl_norm;
    let cn = model_curl(&load(last), &domain, q, h, 7).unwrap().mean_curl_norm;
    let elapsed = start.elapsed();
    report(
        7,
        "curl trend",
        cn < c1,
        elapsed,
        &format!("mean curl norm epoch 1 {c1:.4e} -> epoch {last} {cn:.4e}"),
    );
}

#[test]
fn criterion_8_protocol_fidelity() {
    let b = benchmark();
    // Criterion 6 evaluates concurrently into the shared output dir.
    let mut cfg = b.cfg.clone();
    cfg.output_dir = b.cfg.output_dir.join("protocol");
    std::fs::create_dir_all(&cfg.output_dir).unwrap();
    let start = Instant::now();
    let first = run_eval(&cfg, Some(&b.model)).unwrap();
    let bytes_a = std::fs::read(cfg.output_dir.join("eval_report.json")).unwrap();
    let second = run_eval(&cfg, Some(&b.model)).unwrap();
    let bytes_b = std::fs::read(cfg.output_dir.join("eval_report.json")).unwrap();
    let identical = bytes_a == bytes_b && first.to_json().unwrap() == second.to_json().unwrap();

    let parsed: SweepReport = serde_json::from_slice(&bytes_a).unwrap();
    let mut complete = true;
    let mut ordered = true;
    for ratio in [0.25, 0.5, 0.75] {
        for name in ["STFNN", "KNN", "IDW+SES", "mean"] {
            match parsed.cell(name, ratio) {
                Some(c) => ordered &= c.rmse >= c.mae,
                None => complete = false,
            }
        }
    }
    let elapsed = start.elapsed();
    report(
        8,
        "protocol fidelity",
        complete && ordered && identical && parsed.cells.len() == 12 && elapsed < Duration::from_secs(300),
        elapsed,
        &format!("grid complete {complete}, rmse >= mae {ordered}, byte-identical {identical}"),
    );
}

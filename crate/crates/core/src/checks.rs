//! Runtime invariant suite behind `stfnn check`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::baselines::{idw_ses_infer, knn_infer, mean_infer};
use crate::diagnostics::{curl_estimate, path_independence, Domain};
use crate::encoding::{encode, temporal_code, PeriodSet};
use crate::evalsuite::metrics;
use crate::geodata::{AnalyticField, ContextSet, Coordinate, GeneratorSpec, Source};
use crate::model::{make_ring_path, ring_estimate_with, FieldModel, LossKind, ModelConfig};
use crate::nn::{flatten, unflatten, Mat};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn outcome(name: &'static str, passed: bool, detail: String) -> CheckOutcome {
    CheckOutcome {
        name,
        passed,
        detail,
    }
}

fn plume_field() -> AnalyticField {
    let spec = GeneratorSpec::default();
    AnalyticField {
        plumes: spec.plumes,
        baseline: spec.baseline,
    }
}

fn random_point(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [
        rng.random_range(-2.0..2.0),
        rng.random_range(-2.0..2.0),
        rng.random_range(0.0..10.0),
    ]
}

fn random_context(rng: &mut ChaCha8Rng, n: usize, feature_dim: usize) -> ContextSet {
    let sources = (0..n)
        .map(|i| Source {
            coord: Coordinate::from_array(random_point(rng)),
            features: (0..feature_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
            value: rng.random_range(-2.0..2.0),
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

fn randomized_model(rng: &mut ChaCha8Rng, cfg: ModelConfig, spread: f64) -> FieldModel {
    let mut m = FieldModel::new(cfg).expect("valid config");
    let v: Vec<f64> = flatten(&m)
        .into_iter()
        .map(|x| x + rng.random_range(-spread..spread))
        .collect();
    unflatten(&mut m, &v);
    m
}

fn check_encoding() -> CheckOutcome {
    let p = PeriodSet::default();
    let zero = temporal_code(0.0, &p) == [0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0];
    let a = temporal_code(12.3, &p);
    let b = temporal_code(12.3 + 365.0, &p);
    let periodic = (a[6] - b[6]).abs() < 1e-9 && (a[7] - b[7]).abs() < 1e-9;
    let pass = encode([1.5, -0.3, 4.0], &p)
        .map(|c| c.0[0] == 1.5 && c.0[1] == -0.3)
        .unwrap_or(false);
    outcome(
        "encoding",
        zero && periodic && pass,
        format!("zero={zero} periodic={periodic} passthrough={pass}"),
    )
}

fn check_quadrature(rng: &mut ChaCha8Rng) -> CheckOutcome {
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let (s, t) = (random_point(rng), random_point(rng));
        let g = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
        let exact: f64 = (0..3).map(|k| g[k] * (t[k] - s[k])).sum();
        for m in [1, 2, 4, 8, 16] {
            let path = make_ring_path(&[s], t, m, false).expect("m >= 1");
            let est = ring_estimate_with(&[0.0], &path, Mat::zeros(1, 3), false, |_, _, _| {
                Ok(Mat::from_rows(&[g]))
            })
            .expect("shapes agree");
            worst = worst.max((est.residuals[0] - exact).abs());
        }
    }
    outcome("quadrature exactness", worst <= 1e-6, format!("max error {worst:.3e}"))
}

fn check_refinement(rng: &mut ChaCha8Rng) -> CheckOutcome {
    let field = plume_field();
    let err = |s: [f64; 3], t: [f64; 3], m: usize| {
        let path = make_ring_path(&[s], t, m, false).expect("m >= 1");
        let est = ring_estimate_with(&[0.0], &path, Mat::zeros(1, 3), false, |_, c, _| {
            let g = field.gradient([c.get(0, 0), c.get(0, 1), c.get(0, 2)]);
            Ok(Mat::from_rows(&[g]))
        })
        .expect("shapes agree");
        (est.residuals[0] - (field.value(t) - field.value(s))).abs()
    };
    let n = 200;
    let better = (0..n)
        .filter(|_| {
            let (s, t) = (random_point(rng), random_point(rng));
            err(s, t, 16) < err(s, t, 2)
        })
        .count();
    let frac = better as f64 / n as f64;
    outcome("m-refinement", frac >= 0.95, format!("{better}/{n} pairs improve"))
}

fn check_curl(rng: &mut ChaCha8Rng) -> CheckOutcome {
    let field = plume_field();
    let domain = Domain::new([-2.0, -2.0, 0.0], [2.0, 2.0, 14.0]).expect("valid box");
    let seed = rng.random();
    let grad = curl_estimate(&|c| field.gradient(c), &domain, 200, 1e-3, seed).map(|r| r.mean_curl_norm);
    let rot = curl_estimate(&|c: [f64; 3]| [-c[1], c[0], 0.0], &domain, 50, 1e-3, seed).map(|r| {
        r.curl_vectors
            .iter()
            .map(|v| v[0].abs().max(v[1].abs()).max((v[2] - 2.0).abs()))
            .fold(0.0, f64::max)
    });
    match (grad, rot) {
        (Ok(g), Ok(r)) => outcome(
            "curl estimator",
            g <= 1e-4 && r <= 1e-6,
            format!("gradient-field curl {g:.3e}, rotational deviation {r:.3e}"),
        ),
        (g, r) => outcome("curl estimator", false, format!("{g:?} {r:?}")),
    }
}

fn check_path_independence(rng: &mut ChaCha8Rng) -> CheckOutcome {
    let field = plume_field();
    let (s, t) = (random_point(rng), random_point(rng));
    let disc = path_independence(&|c| field.gradient(c), s, t, 5, 256, rng.random());
    let scale = (field.value(t) - field.value(s)).abs();
    match disc {
        Ok(d) => outcome(
            "path independence",
            d <= 1e-3 * scale + 1e-6,
            format!("discrepancy {d:.3e} vs potential difference {scale:.3e}"),
        ),
        Err(e) => outcome("path independence", false, e.to_string()),
    }
}

fn check_simplex(rng: &mut ChaCha8Rng) -> CheckOutcome {
    let cfg = ModelConfig {
        hidden_dim: 8,
        m_steps: 2,
        feature_dim: 2,
        ..Default::default()
    };
    let mut worst: f64 = 0.0;
    let mut negative = false;
    for _ in 0..50 {
        let model = randomized_model(rng, cfg.clone(), 1.0);
        let n = rng.random_range(1..12);
        let ctx = random_context(rng, n, 2);
        match model.pyramidal_infer(&ctx) {
            Ok(est) => {
                negative |= est.weights.iter().any(|w| *w < 0.0);
                worst = worst.max((est.weights.iter().sum::<f64>() - 1.0).abs());
            }
            Err(_) => negative = true,
        }
    }
    outcome(
        "aggregation simplex",
        !negative && worst <= 1e-6,
        format!("max |sum - 1| {worst:.3e}"),
    )
}

fn check_initial_mean(rng: &mut ChaCha8Rng) -> CheckOutcome {
    let model = FieldModel::new(ModelConfig {
        hidden_dim: 8,
        m_steps: 3,
        feature_dim: 2,
        seed: Some(rng.random()),
        ..Default::default()
    })
    .expect("valid config");
    let ctx = random_context(rng, 9, 2);
    let mean = ctx.values().iter().sum::<f64>() / 9.0;
    let y = model.pyramidal_infer(&ctx).map(|e| e.y_hat).unwrap_or(f64::NAN);
    outcome(
        "fresh model predicts neighborhood mean",
        (y - mean).abs() <= 1e-12,
        format!("prediction {y} vs mean {mean}"),
    )
}

fn check_loss_gradient(rng: &mut ChaCha8Rng) -> CheckOutcome {
    let cfg = ModelConfig {
        hidden_dim: 16,
        m_steps: 2,
        feature_dim: 2,
        ..Default::default()
    };
    let model = randomized_model(rng, cfg, 0.3);
    let ctx = random_context(rng, 4, 2);
    let truth = 0.2;
    let sg = match model.sample_grad(&ctx, truth, LossKind::Mse) {
        Ok(s) => s,
        Err(e) => return outcome("loss gradient", false, e.to_string()),
    };
    let base = flatten(&model);
    let analytic = flatten(&sg.grad);
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let k = rng.random_range(0..base.len());
        let at = |d: f64| {
            let mut v = base.clone();
            v[k] += d;
            let mut m = model.clone();
            unflatten(&mut m, &v);
            let y = m.pyramidal_infer(&ctx).map(|e| e.y_hat).unwrap_or(f64::NAN);
            LossKind::Mse.eval(y, truth).0
        };
        let fd = (at(h) - at(-h)) / (2.0 * h);
        let denom = fd.abs().max(analytic[k].abs()).max(1e-8);
        worst = worst.max((fd - analytic[k]).abs() / denom);
    }
    outcome("loss gradient", worst <= 1e-3, format!("max relative error {worst:.3e}"))
}

fn check_baselines(rng: &mut ChaCha8Rng) -> CheckOutcome {
    let mut ok = true;
    for _ in 0..100 {
        let n = rng.random_range(1..20);
        let ctx = random_context(rng, n, 0);
        let vals = ctx.values();
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min) - 1e-12;
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 1e-12;
        let preds = [
            knn_infer(&ctx, 5),
            idw_ses_infer(&ctx, 2.0, 0.3),
            mean_infer(&ctx),
        ];
        ok &= preds.iter().all(|p| matches!(p, Ok(v) if *v >= lo && *v <= hi));
        ok &= knn_infer(&ctx, n).ok() == mean_infer(&ctx).ok();
    }
    outcome("baseline convexity", ok, String::new())
}

fn check_metrics(rng: &mut ChaCha8Rng) -> CheckOutcome {
    let mut ok = true;
    for _ in 0..100 {
        let n = rng.random_range(1..50);
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..100.0)).collect();
        let t: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..100.0)).collect();
        let m = metrics(&p, &t).expect("equal lengths");
        ok &= m.rmse >= m.mae && m.mae >= 0.0 && m.n == n;
    }
    outcome("metric ordering", ok, String::new())
}

fn check_determinism(rng: &mut ChaCha8Rng) -> CheckOutcome {
    let model = randomized_model(
        rng,
        ModelConfig {
            hidden_dim: 8,
            m_steps: 4,
            feature_dim: 1,
            ..Default::default()
        },
        0.5,
    );
    let ctx = random_context(rng, 6, 1);
    let a = model.pyramidal_infer(&ctx).ok();
    let b = model.pyramidal_infer(&ctx).ok();
    outcome("forward determinism", a.is_some() && a == b, String::new())
}

/// Runs every check with draws seeded from `seed`.
pub fn run_all(seed: u64) -> Vec<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    vec![
        check_encoding(),
        check_quadrature(&mut rng),
        check_refinement(&mut rng),
        check_curl(&mut rng),
        check_path_independence(&mut rng),
        check_simplex(&mut rng),
        check_initial_mean(&mut rng),
        check_loss_gradient(&mut rng),
        check_baselines(&mut rng),
        check_metrics(&mut rng),
        check_determinism(&mut rng),
    ]
}

#[cfg(test)]
mod tests {
    #[test]
    fn suite_passes() {
        for c in super::run_all(3) {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}

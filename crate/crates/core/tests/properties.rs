use std::collections::BTreeSet;

use proptest::prelude::*;

use stfnn::baselines::{idw_ses_infer, knn_infer, mean_infer};
use stfnn::diagnostics::{curl_estimate, path_independence, Domain};
use stfnn::encoding::{encode, temporal_code, PeriodSet};
use stfnn::evalsuite::metrics;
use stfnn::geodata::{
    build_context, filter_missing, fit_normalizer, generate_synthetic, AnalyticField,
    GeneratorSpec, Plume,
};
use stfnn::model::make_ring_path;
use stfnn::nn::{flatten, unflatten};
use stfnn::training::lr_schedule;
use stfnn::{ContextSet, Coordinate, FieldModel, ModelConfig, Source};

fn coord() -> impl Strategy<Value = [f64; 3]> {
    [-3.0..3.0f64, -3.0..3.0f64, 0.0..20.0f64]
}

fn context(max_n: usize) -> impl Strategy<Value = ContextSet> {
    (
        prop::collection::vec((coord(), -5.0..5.0f64, prop::collection::vec(-1.0..1.0f64, 2)), 1..max_n),
        coord(),
    )
        .prop_map(|(rows, target)| ContextSet {
            sources: rows
                .into_iter()
                .enumerate()
                .map(|(i, (c, value, features))| Source {
                    coord: Coordinate::from_array(c),
                    features,
                    value,
                    station: i,
                    timestep: 0,
                })
                .collect(),
            target_coord: Coordinate::from_array(target),
            target_timestep: 0,
        })
}

fn small_model(seed: u64, spread: f64) -> FieldModel {
    let mut m = FieldModel::new(ModelConfig {
        hidden_dim: 8,
        m_steps: 3,
        feature_dim: 2,
        seed: Some(seed),
        ..ModelConfig::default()
    })
    .unwrap();
    // Cheap deterministic perturbation so W_g and W_N are non-zero.
    let v: Vec<f64> = flatten(&m)
        .iter()
        .enumerate()
        .map(|(i, x)| x + spread * ((i as f64 * 12.9898 + seed as f64).sin()))
        .collect();
    unflatten(&mut m, &v);
    m
}

fn plumes() -> impl Strategy<Value = AnalyticField> {
    prop::collection::vec(
        (5.0..80.0f64, -1.0..1.0f64, -1.0..1.0f64, -0.1..0.1f64, -0.1..0.1f64, 0.3..1.0f64),
        1..4,
    )
    .prop_map(|ps| AnalyticField {
        plumes: ps
            .into_iter()
            .map(|(amplitude, center_x, center_y, drift_vx, drift_vy, sigma)| Plume {
                amplitude,
                center_x,
                center_y,
                drift_vx,
                drift_vy,
                sigma,
            })
            .collect(),
        baseline: 10.0,
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn temporal_code_is_bounded(t in -1e4..1e4f64, a in 0.1..10.0f64) {
        let p = PeriodSet::with_scale(a).unwrap();
        let code = temporal_code(t, &p);
        prop_assert!(code.iter().all(|v| v.abs() <= 1.0));
        let full = encode([0.3, -0.2, t], &p).unwrap();
        prop_assert_eq!(full.0.len(), 10);
    }

    #[test]
    fn year_pair_is_periodic(x in -3.0..3.0f64, y in -3.0..3.0f64, t in -500.0..500.0f64, a in 0.5..2.0f64) {
        let p = PeriodSet::with_scale(a).unwrap();
        let c0 = encode([x, y, t], &p).unwrap();
        let c1 = encode([x, y, t + 365.0 * a], &p).unwrap();
        prop_assert!((c0.0[8] - c1.0[8]).abs() <= 1e-9);
        prop_assert!((c0.0[9] - c1.0[9]).abs() <= 1e-9);
    }

    #[test]
    fn perturbing_x_changes_only_first_component(c in coord(), dx in 0.01..1.0f64) {
        let p = PeriodSet::default();
        let a = encode(c, &p).unwrap();
        let b = encode([c[0] + dx, c[1], c[2]], &p).unwrap();
        prop_assert_eq!(b.0[0], c[0] + dx);
        prop_assert_eq!(&a.0[1..], &b.0[1..]);
    }

    #[test]
    fn ring_paths_end_on_target(src in coord(), tar in coord(), m in 1usize..32) {
        let path = make_ring_path(&[src], tar, m, false).unwrap();
        prop_assert_eq!(path.transition_coords[m - 1][0], tar);
        let s = path.step_vectors[0];
        for k in 0..3 {
            let reached = src[k] + m as f64 * s[k];
            prop_assert!((reached - tar[k]).abs() <= 1e-9 * (1.0 + tar[k].abs()));
        }
        let u = path.unit_dirs[0];
        let norm = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt();
        prop_assert!(src == tar || (norm - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn pyramid_estimate_is_a_simplex_blend(ctx in context(10), seed in 0u64..1000) {
        let model = small_model(seed, 0.4);
        let est = model.pyramidal_infer_with(&ctx, true).unwrap();
        prop_assert!(est.weights.iter().all(|&w| w >= 0.0));
        prop_assert!((est.weights.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        let blended: f64 = est.weights.iter().zip(&est.per_source_estimates).map(|(w, y)| w * y).sum();
        prop_assert_eq!(est.y_hat, blended);
        for (i, s) in ctx.sources.iter().enumerate() {
            prop_assert_eq!(est.per_source_estimates[i], s.value + est.residuals[i]);
        }
        // Evaluation is bit-reproducible.
        prop_assert_eq!(model.pyramidal_infer(&ctx).unwrap().y_hat, est.y_hat);
    }

    #[test]
    fn baselines_stay_in_hull(ctx in context(20), k in 1usize..25, power in 0.5..4.0f64, alpha in 0.05..1.0f64) {
        let vals = ctx.values();
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min) - 1e-12;
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 1e-12;
        for y in [
            mean_infer(&ctx).unwrap(),
            knn_infer(&ctx, k).unwrap(),
            idw_ses_infer(&ctx, power, alpha).unwrap(),
        ] {
            prop_assert!(y >= lo && y <= hi, "{} outside [{}, {}]", y, lo, hi);
        }
        prop_assert_eq!(knn_infer(&ctx, ctx.len()).unwrap(), mean_infer(&ctx).unwrap());
    }

    #[test]
    fn idw_ignores_station_labels(ctx in context(12), shift in 1usize..100) {
        let mut relabeled = ctx.clone();
        let n = ctx.len();
        for s in relabeled.sources.iter_mut() {
            s.station = (n - 1 - s.station) * 7 + shift;
        }
        let a = idw_ses_infer(&ctx, 2.0, 0.3).unwrap();
        let b = idw_ses_infer(&relabeled, 2.0, 0.3).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
    }

    #[test]
    fn metrics_match_brute_force(pairs in prop::collection::vec((0.0..100.0f64, 0.5..100.0f64), 1..60)) {
        let (p, t): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let m = metrics(&p, &t).unwrap();
        let n = p.len() as f64;
        let mae = p.iter().zip(&t).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
        let rmse = (p.iter().zip(&t).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n).sqrt();
        let mape = p.iter().zip(&t).map(|(a, b)| ((a - b) / b).abs()).sum::<f64>() / n;
        prop_assert!((m.mae - mae).abs() <= 1e-12 * (1.0 + mae));
        prop_assert!((m.rmse - rmse).abs() <= 1e-12 * (1.0 + rmse));
        prop_assert!((m.mape.unwrap() - mape).abs() <= 1e-12 * (1.0 + mape));
        prop_assert!(m.rmse >= m.mae && m.mae >= 0.0);
        prop_assert_eq!(m.n, p.len());
    }

    #[test]
    fn lr_halves_on_schedule(epoch in 0usize..500, period in 1usize..100, base in 1e-5..1e-1f64) {
        let lr = lr_schedule(epoch, base, period);
        let expected = base / 2f64.powi((epoch / period) as i32);
        prop_assert_eq!(lr, expected);
    }

    #[test]
    fn analytic_gradient_matches_differences(field in plumes(), c in coord()) {
        let g = field.gradient(c);
        let h = 1e-4;
        for k in 0..3 {
            let (mut up, mut down) = (c, c);
            up[k] += h;
            down[k] -= h;
            let fd = (field.value(up) - field.value(down)) / (2.0 * h);
            prop_assert!((g[k] - fd).abs() <= 1e-6 * g[k].abs().max(1.0), "component {}: {} vs {}", k, g[k], fd);
        }
    }

    #[test]
    fn curl_of_gradient_shrinks_with_h(field in plumes(), seed in 0u64..1000) {
        let domain = Domain::new([-2.0, -2.0, 0.0], [2.0, 2.0, 10.0]).unwrap();
        let probe = |c: [f64; 3]| field.gradient(c);
        let curls: Vec<f64> = [1e-2, 1e-3, 1e-4]
            .iter()
            .map(|&h| curl_estimate(&probe, &domain, 32, h, seed).unwrap().mean_curl_norm)
            .collect();
        for w in curls.windows(2) {
            prop_assert!(w[1] < w[0] || w[1] < 1e-6, "{:?}", curls);
        }
    }

    #[test]
    fn path_discrepancy_shrinks_with_m(field in plumes(), src in coord(), tar in coord(), seed in 0u64..1000) {
        let probe = |c: [f64; 3]| field.gradient(c);
        let d: Vec<f64> = [32, 64, 128, 256]
            .iter()
            .map(|&m| path_independence(&probe, src, tar, 4, m, seed).unwrap())
            .collect();
        for w in d.windows(2) {
            prop_assert!(w[1] < w[0] || w[1] < 1e-9, "{:?}", d);
        }
    }
}

fn scene(seed: u64, missing_rate: f64) -> stfnn::StationDataset {
    let spec = GeneratorSpec {
        n_stations: 15,
        hours: 24,
        missing_rate,
        seed: Some(seed),
        ..GeneratorSpec::default()
    };
    generate_synthetic(&spec).unwrap().0
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn normalizer_round_trips(seed in 0u64..1000, v in -100.0..500.0f64, lng in 90.0..130.0f64, lat in 20.0..45.0f64, days in 0.0..30.0f64) {
        let ds = scene(seed, 0.0);
        let n = fit_normalizer(&ds, 0.6, 2.0).unwrap();
        prop_assert!((n.denormalize_target(n.normalize_target(v)) - v).abs() <= 1e-9 * (1.0 + v.abs()));
        for k in 0..ds.feature_names.len() {
            prop_assert!((n.denormalize_feature(k, n.normalize_feature(k, v)) - v).abs() <= 1e-9 * (1.0 + v.abs()));
        }
        let (a, b, c) = n.denormalize_coordinate(n.coordinate(lng, lat, days));
        prop_assert!((a - lng).abs() <= 1e-9 && (b - lat).abs() <= 1e-9 && (c - days).abs() <= 1e-9);
    }

    #[test]
    fn contexts_are_deterministic_and_exclude_masked(seed in 0u64..1000, t in 5usize..24, masked in prop::collection::btree_set(0usize..15, 0..6)) {
        let mut ds = scene(seed, 0.0);
        ds.normalizer = Some(fit_normalizer(&ds, 0.6, 1.0).unwrap());
        let target = ds.coord(0, t).unwrap();
        let a = build_context(&ds, target, t, 5, 3, &masked).unwrap();
        let b = build_context(&ds, target, t, 5, 3, &masked).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert!(a.sources.iter().all(|s| !masked.contains(&s.station)));
        prop_assert_eq!(a.len(), 15);
        prop_assert!(a.sources.iter().all(|s| s.coord.tau <= target.tau));
    }

    #[test]
    fn filtering_keeps_tolerable_timesteps(seed in 0u64..1000, rate in 0.0..0.6f64, threshold in 0.05..1.0f64) {
        let ds = scene(seed, rate);
        let keep: Vec<usize> = (0..ds.n_timesteps()).filter(|&t| ds.missing_fraction(t) <= threshold).collect();
        match filter_missing(&ds, threshold) {
            Ok(out) => {
                prop_assert_eq!(out.n_timesteps(), keep.len());
                for (i, &t) in keep.iter().enumerate() {
                    prop_assert_eq!(out.timestamps[i], ds.timestamps[t]);
                }
            }
            Err(_) => prop_assert!(keep.iter().all(|&t| ds.stations.iter().all(|s| s.targets[t].is_none()))),
        }
    }
}

#[test]
fn unmasked_context_uses_nearest_stations() {
    let mut ds = scene(3, 0.0);
    ds.normalizer = Some(fit_normalizer(&ds, 0.6, 1.0).unwrap());
    let target = ds.coord(4, 10).unwrap();
    let ctx = build_context(&ds, target, 10, 3, 1, &BTreeSet::new()).unwrap();
    let mut by_dist: Vec<(f64, usize)> = (0..ds.n_stations())
        .map(|s| {
            let c = ds.coord(s, 10).unwrap();
            ((c.x - target.x).powi(2) + (c.y - target.y).powi(2), s)
        })
        .collect();
    by_dist.sort_by(|a, b| a.0.total_cmp(&b.0));
    let want: BTreeSet<usize> = by_dist[..3].iter().map(|p| p.1).collect();
    let got: BTreeSet<usize> = ctx.sources.iter().map(|s| s.station).collect();
    assert_eq!(got, want);
}

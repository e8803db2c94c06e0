mod common;

use std::collections::BTreeMap;

use rand::Rng;

use distir::cost::{calibrate, parse_bench_csv, write_bench_csv, BenchSample, CostModel, OpInstance};
use distir::ir::{default_registry, DeviceId, Type};
use distir::sim::Topology;

fn matmul_samples(seed: u64, noise: f64, f: impl Fn(f64) -> f64) -> Vec<BenchSample> {
    let mut g = common::rng(seed);
    (0..400)
        .map(|_| {
            let (m, k, n) = (g.gen_range(8..128), g.gen_range(8..128), g.gen_range(8..128));
            let t = f((m * k * n) as f64);
            BenchSample {
                op_type: "MatMul".into(),
                shapes: vec![vec![m, k], vec![k, n]],
                seconds: t * (1.0 + noise * g.gen_range(-1.0..1.0)),
            }
        })
        .collect()
}

fn mkn_only() -> BTreeMap<String, Vec<String>> {
    BTreeMap::from([("MatMul".to_string(), vec!["m*k*n".to_string()])])
}

#[test]
fn noisy_samples_recover_the_generator() {
    let samples = matmul_samples(1, 0.01, |mkn| 3e-12 * mkn + 5e-6);
    let (model, fits) = calibrate(&samples, &mkn_only(), default_registry()).unwrap();
    let fit = &fits[0];
    assert!((fit.coef[0] / 3e-12 - 1.0).abs() < 0.05, "{:?}", fit.coef);
    assert!((fit.intercept / 5e-6 - 1.0).abs() < 0.05, "{}", fit.intercept);
    assert!(fit.r2 > 0.99);
    let (features, coef, _) = model.regression("MatMul").unwrap();
    assert_eq!(features, vec!["m*k*n"]);
    assert_eq!(coef, fit.coef.as_slice());
}

#[test]
fn exact_samples_give_unit_r2() {
    let samples = matmul_samples(2, 0.0, |mkn| 3e-12 * mkn + 5e-6);
    let (_, fits) = calibrate(&samples, &mkn_only(), default_registry()).unwrap();
    assert!((fits[0].r2 - 1.0).abs() < 1e-9);
}

#[test]
fn refitting_a_fitted_model_is_idempotent() {
    let samples = matmul_samples(3, 0.01, |mkn| 2e-12 * mkn + 1e-6);
    let (_, first) = calibrate(&samples, &mkn_only(), default_registry()).unwrap();
    let (c, b) = (first[0].coef[0], first[0].intercept);
    let again = matmul_samples(3, 0.0, |mkn| c * mkn + b);
    let (_, second) = calibrate(&again, &mkn_only(), default_registry()).unwrap();
    assert!((second[0].coef[0] / c - 1.0).abs() < 1e-9);
    assert!((second[0].intercept / b - 1.0).abs() < 1e-9);
}

#[test]
fn scaling_times_scales_coefficients() {
    let samples = matmul_samples(4, 0.01, |mkn| 3e-12 * mkn + 5e-6);
    let scaled: Vec<BenchSample> = samples
        .iter()
        .map(|s| BenchSample {
            seconds: 4.0 * s.seconds,
            ..s.clone()
        })
        .collect();
    let (_, a) = calibrate(&samples, &mkn_only(), default_registry()).unwrap();
    let (_, b) = calibrate(&scaled, &mkn_only(), default_registry()).unwrap();
    assert!((b[0].coef[0] / (4.0 * a[0].coef[0]) - 1.0).abs() < 1e-9);
    assert!((b[0].intercept / (4.0 * a[0].intercept) - 1.0).abs() < 1e-9);
}

#[test]
fn calibrated_model_survives_json_and_predicts() {
    let samples = matmul_samples(5, 0.0, |mkn| 3e-12 * mkn + 5e-6);
    let (model, _) = calibrate(&samples, &BTreeMap::new(), default_registry()).unwrap();
    let back = CostModel::from_json(&model.to_json()).unwrap();
    assert_eq!(back, model);
    let topo = Topology::homogeneous(1, 1e12, 1e-9, 1e9, 0.0);
    let ins = [Type::f32([64, 32], 0), Type::f32([32, 16], 0)];
    let t = back
        .cost(
            default_registry(),
            &OpInstance {
                op_type: "MatMul",
                inputs: &ins,
                outputs: &[Type::f32([64, 16], 0)],
                devices: &[DeviceId(0)],
            },
            &topo,
        )
        .unwrap();
    let want = 3e-12 * (64 * 32 * 16) as f64 + 5e-6;
    assert!((t / want - 1.0).abs() < 1e-6, "{t} vs {want}");
}

#[test]
fn bench_csv_round_trips() {
    let samples = matmul_samples(6, 0.01, |mkn| 1e-12 * mkn);
    let mut buf = Vec::new();
    write_bench_csv(&mut buf, &samples).unwrap();
    assert_eq!(parse_bench_csv(&buf[..]).unwrap(), samples);
}

#[test]
fn unknown_ops_and_bad_times_are_rejected() {
    let bad = vec![BenchSample {
        op_type: "Frobnicate".into(),
        shapes: vec![vec![2]],
        seconds: 1.0,
    }];
    assert!(calibrate(&bad, &BTreeMap::new(), default_registry()).is_err());
    let mut neg = matmul_samples(7, 0.0, |mkn| 1e-12 * mkn);
    neg[0].seconds = -1.0;
    assert!(calibrate(&neg, &BTreeMap::new(), default_registry()).is_err());
}

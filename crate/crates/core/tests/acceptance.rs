mod common;

use std::process::ExitCode;
use std::time::Instant;

use rand::Rng;

use distir::cost::{calibrate, BenchSample, CostModel, OpInstance};
use distir::exec::{execute, random_tensors};
use distir::interp::{abstract_args, interpret, Domain, OpError};
use distir::ir::{default_registry, DeviceId, Type};
use distir::models::{build_mlp, shipped, MlpSpec, SHIPPED_SOURCES};
use distir::search::{enumerate, grid_search, SearchOptions, SearchReport, SearchSpace};
use distir::sim::{simulate_declared, DeviceParams, LinkParams, Topology};
use distir::text::{parse_module, parse_module_bytes, print_module};
use distir::transforms::{collect_weights, distribute_args, dtp_transform, DistConfig};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn transform_soundness() -> Outcome {
    let spec = MlpSpec::new(4, 32, 32);
    let seq = build_mlp(&spec);
    let mut configs = Vec::new();
    for d in [1, 2, 4] {
        for t in [1, 2, 4] {
            for p in [1, 2, 4] {
                if d * t * p > 8 {
                    continue;
                }
                let ks: &[usize] = if p == 1 { &[1] } else { &[2, 8] };
                for &k in ks {
                    configs.push(DistConfig::new(d, t, p, k));
                }
            }
        }
    }
    let mut worst = 0.0f64;
    for cfg in &configs {
        let dist = dtp_transform(&seq, cfg).map_err(|e| format!("{cfg}: {e}"))?;
        for seed in 0..20 {
            let args = random_tensors(seq.entry_function().unwrap(), seed).map_err(|e| e.to_string())?;
            let want = execute(&seq, &args).map_err(|e| e.to_string())?;
            let out = execute(&dist, &distribute_args(&spec, cfg, &args)).map_err(|e| format!("{cfg}: {e}"))?;
            let got = collect_weights(&spec, cfg, &out);
            for (g, w) in got.iter().zip(&want) {
                check(g.shape == w.shape, format!("{cfg}: shape {:?} vs {:?}", g.shape, w.shape))?;
                for (a, b) in g.data.iter().zip(&w.data) {
                    let rel = (a - b).abs() / b.abs().max(1e-3);
                    worst = worst.max(rel);
                    check(rel <= 1e-4, format!("{cfg} seed {seed}: {a} vs {b}"))?;
                }
            }
        }
    }
    Ok(format!("{} configs x 20 seeds, worst relative error {worst:.2e}", configs.len()))
}

fn pipeline_ordering() -> Outcome {
    let fast = shipped("mlp_pp").unwrap();
    let slow = shipped("mlp_pp_swapped").unwrap();
    let mut g = common::rng(2);
    let n = 500;
    for i in 0..n {
        let topo = common::random_topology(&mut g, 3);
        let a = simulate_declared(&fast, &topo, &CostModel::analytic()).map_err(|e| e.to_string())?;
        let b = simulate_declared(&slow, &topo, &CostModel::analytic()).map_err(|e| e.to_string())?;
        check(a.total_time < b.total_time, format!("topology {i}: {} >= {}", a.total_time, b.total_time))?;
    }
    Ok(format!("{n} random topologies"))
}

fn mixed_reshape() -> Outcome {
    let m = shipped("reshape").unwrap();
    let args = abstract_args(m.entry_function().unwrap()).unwrap();
    let out = interpret(&m, args.clone(), Domain::Mixed, default_registry()).map_err(|e| e.to_string())?;
    let ty = out.state.get("225").map(|v| v.ty());
    check(ty == Some(Type::f32([2048, 768], 0)), format!("Reshape output {ty:?}"))?;
    let topo = Topology::homogeneous(1, 1e12, 1e-6, 1e9, 1e-5);
    simulate_declared(&m, &topo, &CostModel::analytic()).map_err(|e| e.to_string())?;
    match interpret(&m, args, Domain::AbstractOnly, default_registry()) {
        Err(e) if matches!(e.op_error(), Some(OpError::Unsupported { .. })) => Ok(format!("abstract-only: {e}")),
        other => Err(format!("abstract-only domain gave {other:?}")),
    }
}

fn grid_count() -> Outcome {
    let n = enumerate(&SearchSpace::training(16, 256)).map_err(|e| e.to_string())?.len();
    check(n == 75, format!("{n} configurations"))?;
    Ok("75 configurations for 16 devices".into())
}

fn oracle_equivalence() -> Outcome {
    let mut g = common::rng(42);
    let costs = CostModel::analytic();
    let mut ops = 0;
    for i in 0..200 {
        let (m, world) = common::random_program(&mut g, 30, 4);
        let topo = common::random_topology(&mut g, world);
        let sim = simulate_declared(&m, &topo, &costs).map_err(|e| format!("program {i}: {e}"))?;
        let flat = common::op_costs(&m, &topo, &costs);
        ops += flat.len();
        let (_, oracle) = common::event_queue_oracle(&flat, world);
        check(sim.total_time == oracle, format!("program {i}: {} vs oracle {oracle}", sim.total_time))?;
    }
    Ok(format!("200 programs, {ops} ops, exact agreement"))
}

fn r_squared(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    sxy * sxy / (sxx * syy)
}

fn linear_scaling() -> Outcome {
    let topo = Topology::homogeneous(1, 1e12, 1e-6, 1e9, 1e-5);
    let costs = CostModel::analytic();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let layers: Vec<usize> = (0..=14).map(|i| (10.0 * 2000f64.powf(i as f64 / 14.0)) as usize).collect();
    for &l in &layers {
        let m = build_mlp(&MlpSpec::new(l, 4, 4));
        let n_ops = m.entry_function().unwrap().body().len();
        let mut best = f64::INFINITY;
        for _ in 0..3 {
            let start = Instant::now();
            simulate_declared(&m, &topo, &costs).map_err(|e| e.to_string())?;
            best = best.min(start.elapsed().as_secs_f64());
        }
        xs.push(n_ops as f64);
        ys.push(best);
    }
    let r2 = r_squared(&xs, &ys);
    check(xs[0] <= 100.0 && *xs.last().unwrap() >= 1e5, format!("op counts {} to {}", xs[0], xs.last().unwrap()))?;
    check(r2 >= 0.98, format!("R^2 = {r2:.4}"))?;
    Ok(format!("{} to {} ops, R^2 = {r2:.4}", xs[0], xs.last().unwrap()))
}

fn cost_exactness() -> Outcome {
    let topo = Topology::uniform(
        1,
        DeviceParams {
            flops: 1e9,
            dram_bandwidth: 1e11,
            kernel_launch_overhead: 0.0,
            memory_capacity: 1e9,
        },
        LinkParams {
            bandwidth: 1e9,
            latency: 0.0,
        },
    );
    let t = Type::f32([1000], 0);
    let add = CostModel::analytic()
        .cost(
            default_registry(),
            &OpInstance {
                op_type: "Add",
                inputs: &[t.clone(), t.clone()],
                outputs: &[t],
                devices: &[DeviceId(0)],
            },
            &topo,
        )
        .map_err(|e| e.to_string())?;
    check(add == 1e-6, format!("Add cost {add}"))?;
    let mut g = common::rng(7);
    let samples: Vec<BenchSample> = (0..200)
        .map(|_| {
            let (m, k, n) = (g.gen_range(8..256), g.gen_range(8..256), g.gen_range(8..256));
            BenchSample {
                op_type: "MatMul".into(),
                shapes: vec![vec![m, k], vec![k, n]],
                seconds: 3e-12 * (m * k * n) as f64 + 2e-13 * (m * n) as f64 + 5e-6,
            }
        })
        .collect();
    let (_, fits) = calibrate(&samples, &Default::default(), default_registry()).map_err(|e| e.to_string())?;
    let f = &fits[0];
    check(f.r2 >= 1.0 - 1e-9, format!("R^2 = {}", f.r2))?;
    check((f.coef[0] / 3e-12 - 1.0).abs() < 1e-6, format!("coefficients {:?}", f.coef))?;
    Ok(format!("Add = {add:e} s, calibration R^2 = {:.12}", f.r2))
}

fn memory_properties() -> Outcome {
    let topo = Topology::homogeneous(2, 1e12, 1e-6, 1e10, 1e-5);
    let costs = CostModel::analytic();
    let peak = |name: &str| -> Result<u64, String> {
        let r = simulate_declared(&shipped(name).unwrap(), &topo, &costs).map_err(|e| e.to_string())?;
        Ok(r.memory.devices[&DeviceId(0)].peak)
    };
    let (plain, ckpt) = (peak("mlp")?, peak("mlp_checkpointing")?);
    check(ckpt < plain, format!("checkpointing peak {ckpt} vs {plain}"))?;

    let spec = MlpSpec::new(4, 16, 256);
    let seq = simulate_declared(&build_mlp(&spec), &topo, &costs).map_err(|e| e.to_string())?;
    let seq_act = seq.memory.devices[&DeviceId(0)].peak_activation as f64;
    let dp = dtp_transform(&build_mlp(&spec), &DistConfig::new(2, 1, 1, 1)).map_err(|e| e.to_string())?;
    let dp = simulate_declared(&dp, &topo, &costs).map_err(|e| e.to_string())?;
    let slack = (2 * spec.batch_size * spec.d_model * 4) as f64;
    let mut ratios = Vec::new();
    for d in [DeviceId(0), DeviceId(1)] {
        let act = dp.memory.devices[&d].peak_activation as f64;
        check((act - seq_act / 2.0).abs() <= slack, format!("{d}: activation peak {act} vs {}", seq_act / 2.0))?;
        ratios.push(act / seq_act);
    }

    let spec = MlpSpec::new(4, 64, 64);
    let space = SearchSpace::training(8, 64);
    let capacity = spec.param_bytes() as f64 * 1.5;
    let small = Topology::uniform(
        8,
        DeviceParams {
            flops: 1e12,
            dram_bandwidth: 1e12,
            kernel_launch_overhead: 1e-6,
            memory_capacity: capacity,
        },
        LinkParams {
            bandwidth: 1e10,
            latency: 1e-5,
        },
    );
    let report = grid_search(&spec, &space, &small, &costs, &SearchOptions::default()).map_err(|e| e.to_string())?;
    let mut feasible = 0;
    for r in &report.results {
        if r.feasible() {
            feasible += 1;
            check(r.peak_memory.iter().all(|&(_, b)| b as f64 <= capacity), format!("{} reported feasible above capacity", r.point.config))?;
        }
    }
    Ok(format!(
        "checkpointing {ckpt} < {plain} B; DP activation ratios {:.3}/{:.3}; {feasible}/{} feasible under capacity",
        ratios[0],
        ratios[1],
        report.results.len()
    ))
}

fn top(report: &SearchReport) -> Result<&DistConfig, String> {
    report.best().map(|r| &r.point.config).ok_or_else(|| "no feasible configuration".to_string())
}

fn heuristic_argmax() -> Outcome {
    let costs = CostModel::analytic();
    let opts = SearchOptions {
        top_k: 10,
        jobs: 4,
        deterministic: true,
    };
    let world = 8;
    // Weights far larger than a device, tiny batch, fast links.
    let big = MlpSpec::new(8, 1024, 8);
    let tight = Topology::uniform(
        world,
        DeviceParams {
            flops: 1e12,
            dram_bandwidth: 1e12,
            kernel_launch_overhead: 1e-6,
            memory_capacity: big.param_bytes() as f64 / 2.0,
        },
        LinkParams {
            bandwidth: 1e12,
            latency: 1e-7,
        },
    );
    let report = grid_search(&big, &SearchSpace::training(world, big.batch_size), &tight, &costs, &opts).map_err(|e| e.to_string())?;
    let a = top(&report)?.clone();
    let max_t = report.results.iter().map(|r| r.point.config.t).max().unwrap_or(0);
    check(a.t == max_t, format!("constrained: top config {a}, expected T = {max_t}"))?;

    // Ample memory, large batch.
    let small = MlpSpec::new(4, 512, 8192);
    let roomy = Topology::uniform(
        world,
        DeviceParams {
            flops: 1e12,
            dram_bandwidth: 1e12,
            kernel_launch_overhead: 1e-5,
            memory_capacity: 1e15,
        },
        LinkParams {
            bandwidth: 1e11,
            latency: 1e-6,
        },
    );
    let report = grid_search(&small, &SearchSpace::training(world, small.batch_size), &roomy, &costs, &opts).map_err(|e| e.to_string())?;
    let b = top(&report)?.clone();
    let leaders: Vec<String> = report.top().take(5).map(|r| format!("{} {:.1}", r.point.config, r.throughput.unwrap_or(0.0))).collect();
    check(b.d == world, format!("roomy: top config {b}, expected D = {world}; leaders {leaders:?}"))?;
    Ok(format!("constrained top {a}; roomy top {b}"))
}

fn round_trip_and_fuzz() -> Outcome {
    for (name, src) in SHIPPED_SOURCES {
        let m = parse_module(src).map_err(|e| format!("{name}: {e}"))?;
        let text = print_module(&m);
        let again = parse_module(&text).map_err(|e| format!("{name} reprint: {e}"))?;
        check(print_module(&again) == text && again.functions.len() == m.functions.len(), format!("{name}: round trip differs"))?;
    }
    let mut g = common::rng(10);
    let n = 100_000;
    let mut accepted = 0;
    for i in 0..n {
        let bytes: Vec<u8> = if i % 2 == 0 {
            let len = g.gen_range(0..128);
            (0..len).map(|_| g.gen()).collect()
        } else {
            let src = SHIPPED_SOURCES[g.gen_range(0..SHIPPED_SOURCES.len())].1.as_bytes();
            let mut b = src.to_vec();
            for _ in 0..g.gen_range(1..4) {
                let at = g.gen_range(0..b.len());
                match g.gen_range(0..3) {
                    0 => b[at] = g.gen(),
                    1 => {
                        b.remove(at);
                    }
                    _ => b.insert(at, g.gen_range(b' '..=b'~')),
                }
            }
            b
        };
        let outcome = std::panic::catch_unwind(|| parse_module_bytes(&bytes).map(|_| ()));
        match outcome {
            Ok(Ok(())) => accepted += 1,
            Ok(Err(e)) => check(!e.diagnostics().is_empty(), format!("input {i}: error without diagnostics"))?,
            Err(_) => return Err(format!("input {i}: parser panicked")),
        }
    }
    Ok(format!("{} programs round-trip; {n} fuzz inputs, {accepted} accepted, no crashes", SHIPPED_SOURCES.len()))
}

fn main() -> ExitCode {
    std::panic::set_hook(Box::new(|_| {}));
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("transform soundness", transform_soundness),
        ("pipeline ordering", pipeline_ordering),
        ("mixed-domain reshape", mixed_reshape),
        ("grid count", grid_count),
        ("simulator oracle equivalence", oracle_equivalence),
        ("linear scaling", linear_scaling),
        ("cost-model exactness", cost_exactness),
        ("memory-profile properties", memory_properties),
        ("search argmax heuristics", heuristic_argmax),
        ("round trip and fuzz", round_trip_and_fuzz),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {:>2} PASS  {name} ({secs:.1}s): {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name} ({secs:.1}s): {detail}", i + 1);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

mod common;

use common::{event_queue_oracle, op_costs, random_program, random_topology, rng, uniform_topology};
use rand::Rng;

use distir::cost::CostModel;
use distir::ir::{DeviceId, Type};
use distir::models::{build_mlp, shipped, MlpSpec};
use distir::sim::{chrome_trace, simulate, simulate_declared, LinkParams, SimResult, Topology};
use distir::text::parse_module;
use distir::transforms::{dtp_transform, DistConfig};

fn link(bandwidth: f64, latency: f64) -> LinkParams {
    LinkParams { bandwidth, latency }
}

fn assert_no_overlap(r: &SimResult) {
    for d in r.devices() {
        let mut evs: Vec<_> = r.trace.iter().filter(|e| e.devices.contains(&d)).collect();
        evs.sort_by(|a, b| a.start.total_cmp(&b.start));
        for w in evs.windows(2) {
            assert!(w[0].end() <= w[1].start, "overlap on {d}: {:?} / {:?}", w[0], w[1]);
        }
    }
}

#[test]
fn add_costs_n_over_f() {
    let m = parse_module("func @f(%t: F32[1000]@0) {\n  %s = Add(%t, %t)\n  return %s\n}\n").unwrap();
    let topo = uniform_topology(1, 1e9, 0.0, link(1e9, 0.0));
    let r = simulate_declared(&m, &topo, &CostModel::analytic()).unwrap();
    assert_eq!(r.total_time, 1e-6);
}

#[test]
fn random_programs_match_the_event_queue_oracle() {
    let mut g = rng(11);
    let costs = CostModel::analytic();
    for _ in 0..100 {
        let (m, world) = random_program(&mut g, 30, 4);
        let topo = random_topology(&mut g, world);
        let r = simulate_declared(&m, &topo, &costs).unwrap();
        let ops = op_costs(&m, &topo, &costs);
        let (starts, total) = event_queue_oracle(&ops, world);
        assert_eq!(r.total_time, total);
        let got: Vec<f64> = r.trace.iter().map(|e| e.start).collect();
        assert_eq!(got, starts);
        assert_no_overlap(&r);
    }
}

#[test]
fn pipelined_order_beats_the_swapped_order() {
    let fast = shipped("mlp_pp").unwrap();
    let slow = shipped("mlp_pp_swapped").unwrap();
    let costs = CostModel::analytic();
    let mut g = rng(3);
    for _ in 0..50 {
        let topo = random_topology(&mut g, 3);
        let a = simulate_declared(&fast, &topo, &costs).unwrap();
        let b = simulate_declared(&slow, &topo, &costs).unwrap();
        assert!(a.total_time < b.total_time, "{} vs {}", a.total_time, b.total_time);
    }
}

#[test]
fn shipped_programs_never_overlap_on_a_device() {
    let mut g = rng(5);
    for (name, _) in distir::models::SHIPPED_SOURCES {
        let m = shipped(name).unwrap();
        for _ in 0..10 {
            let topo = random_topology(&mut g, 3);
            let r = simulate_declared(&m, &topo, &CostModel::analytic()).unwrap();
            assert_no_overlap(&r);
            let last = r.trace.iter().map(|e| e.end()).fold(0.0, f64::max);
            assert_eq!(r.total_time, last);
        }
    }
}

#[test]
fn pipeline_trace_uses_devices_one_and_two() {
    let topo = Topology::homogeneous(3, 1e12, 1e-6, 1e9, 1e-5);
    let r = simulate_declared(&shipped("mlp_pp").unwrap(), &topo, &CostModel::analytic()).unwrap();
    assert_eq!(r.devices(), vec![DeviceId(1), DeviceId(2)]);
    let json: serde_json::Value = serde_json::from_str(&chrome_trace(&r)).unwrap();
    let pids: std::collections::BTreeSet<i64> = json.as_array().unwrap().iter().map(|e| e["pid"].as_i64().unwrap()).collect();
    assert_eq!(pids.into_iter().collect::<Vec<_>>(), vec![1, 2]);
    assert_eq!(r.trace[0].label, "x_1");
}

#[test]
fn scaling_all_costs_scales_total_time() {
    let m = build_mlp(&MlpSpec::new(4, 32, 32));
    let dist = dtp_transform(&m, &DistConfig::new(2, 2, 2, 4)).unwrap();
    let topo = Topology::homogeneous(8, 1e12, 5e-6, 1e10, 2e-5);
    let base = simulate_declared(&dist, &topo, &CostModel::analytic()).unwrap().total_time;
    for lambda in [0.5, 2.0, 7.0] {
        let t = simulate_declared(&dist, &topo.scaled_time(lambda), &CostModel::analytic()).unwrap().total_time;
        assert!((t / (lambda * base) - 1.0).abs() < 1e-12, "{lambda}: {t} vs {}", lambda * base);
    }
}

#[test]
fn reordering_disjoint_ops_keeps_time_shared_ops_do_not() {
    let costs = CostModel::analytic();
    let topo = Topology::homogeneous(2, 1e9, 0.0, 1e9, 1e-6);
    let prog = |body: &str| {
        parse_module(&format!(
            "func @f(%a: F32[64,64]@0, %b: F32[64,64]@1) {{\n{body}\n  return %z\n}}\n"
        ))
        .unwrap()
    };
    let base = prog("  %u = MatMul(%a, %a)\n  %v = Relu(%b)\n  %z = Send{device=@1}(%u)");
    let swapped = prog("  %v = Relu(%b)\n  %u = MatMul(%a, %a)\n  %z = Send{device=@1}(%u)");
    let t = |m| simulate_declared(m, &topo, &costs).unwrap().total_time;
    assert_eq!(t(&base), t(&swapped));

    // On one device the Send must wait for the MatMul when it comes first.
    let shared = prog("  %u = MatMul(%a, %a)\n  %v = Relu(%a)\n  %w = Send{device=@1}(%v)\n  %z = Add(%w, %b)");
    let shared_swapped = prog("  %v = Relu(%a)\n  %w = Send{device=@1}(%v)\n  %u = MatMul(%a, %a)\n  %z = Add(%w, %b)");
    assert!(t(&shared_swapped) < t(&shared));
}

#[test]
fn pipeline_matches_oracle_and_approaches_one_over_p() {
    // Free communication; stages differ only by the loss and update ops.
    let spec = MlpSpec::new(4, 64, 512);
    let costs = CostModel::analytic();
    let topo = Topology::homogeneous(4, 1e12, 0.0, 1e30, 0.0);
    let seq = simulate_declared(&build_mlp(&spec), &topo, &costs).unwrap().total_time;
    let mut prev = f64::INFINITY;
    for (p, k) in [(2, 16), (4, 32), (4, 64)] {
        let dist = dtp_transform(&build_mlp(&spec), &DistConfig::new(1, 1, p, k)).unwrap();
        let r = simulate_declared(&dist, &topo, &costs).unwrap();
        let (_, oracle) = event_queue_oracle(&op_costs(&dist, &topo, &costs), 4);
        assert_eq!(r.total_time, oracle);
        let ratio = r.total_time / seq;
        let ideal = 1.0 / p as f64;
        let bubble = (p - 1) as f64 / k as f64;
        assert!(ratio >= ideal * 0.999 && ratio <= ideal * (1.0 + bubble) * 1.1, "P={p} K={k}: ratio {ratio}");
        if p == 4 {
            assert!(ratio < prev);
            prev = ratio;
        }
    }
}

#[test]
fn simulation_is_pure() {
    let m = build_mlp(&MlpSpec::new(4, 16, 32));
    let dist = dtp_transform(&m, &DistConfig::new(1, 2, 2, 4)).unwrap();
    let topo = Topology::homogeneous(4, 1e12, 1e-6, 1e9, 1e-5);
    let a = simulate_declared(&dist, &topo, &CostModel::analytic()).unwrap();
    let b = simulate_declared(&dist, &topo, &CostModel::analytic()).unwrap();
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.memory, b.memory);
}

#[test]
fn throughput_is_batch_over_time() {
    let m = build_mlp(&MlpSpec::new(2, 16, 64));
    let topo = Topology::homogeneous(1, 1e12, 1e-6, 1e9, 1e-5);
    let r = simulate_declared(&m, &topo, &CostModel::analytic()).unwrap();
    assert_eq!(r.throughput, Some(64.0 / r.total_time));
}

#[test]
fn device_outside_topology_is_an_error() {
    let topo = Topology::homogeneous(2, 1e12, 1e-6, 1e9, 1e-5);
    let err = simulate_declared(&shipped("mlp_pp").unwrap(), &topo, &CostModel::analytic()).unwrap_err();
    assert!(err.to_string().contains("outside the topology"), "{err}");
}

#[test]
fn explicit_input_types_override_declared_ones() {
    let m = parse_module("func @f(%t: F32[1000]@0) {\n  %s = Relu(%t)\n  return %s\n}\n").unwrap();
    let topo = uniform_topology(1, 1e9, 0.0, link(1e9, 0.0));
    let err = simulate(&m, &[Type::f32([10], 0)], &topo, &CostModel::analytic());
    assert!(err.is_err());
    let mut g = rng(0);
    let flops: f64 = g.gen_range(1e9..1e10);
    let topo = uniform_topology(1, flops, 0.0, link(1e9, 0.0));
    let r = simulate(&m, &[Type::f32([1000], 0)], &topo, &CostModel::analytic()).unwrap();
    assert_eq!(r.total_time, 1000.0 / flops);
}

fn peaks(m: &distir::ir::IrModule, topo: &Topology) -> distir::sim::MemoryProfile {
    simulate_declared(m, topo, &CostModel::analytic()).unwrap().memory
}

#[test]
fn single_returned_parameter_is_the_peak() {
    let m = parse_module("func @f(%x: F32[1024]@0) {\n  return %x\n}\n").unwrap();
    let mem = peaks(&m, &Topology::homogeneous(1, 1e12, 1e-6, 1e9, 1e-5));
    assert_eq!(mem.devices[&DeviceId(0)].peak, 4096);
}

#[test]
fn disjoint_live_ranges_do_not_add_up() {
    let m = parse_module(
        "func @f(%x: F32[25]@0) {\n  %p = Send{device=@1}(%x)\n  %r = Send{device=@0}(%p)\n  %s = Send{device=@1}(%r)\n  return %s\n}\n",
    )
    .unwrap();
    let mem = peaks(&m, &Topology::homogeneous(2, 1e12, 1e-6, 1e9, 1e-5));
    assert_eq!(mem.devices[&DeviceId(1)].peak, 100);
}

#[test]
fn peak_covers_resident_parameters() {
    let mut g = rng(9);
    for (name, _) in distir::models::SHIPPED_SOURCES {
        let m = shipped(name).unwrap();
        let mem = peaks(&m, &random_topology(&mut g, 3));
        let mut params: std::collections::BTreeMap<DeviceId, u64> = Default::default();
        for lr in mem.live_ranges.iter().filter(|l| l.is_param) {
            *params.entry(lr.device).or_default() += lr.size;
        }
        for (d, bytes) in params {
            assert!(mem.devices[&d].peak >= bytes, "{name} on {d}");
        }
    }
}

#[test]
fn checkpointing_lowers_the_peak() {
    let topo = Topology::homogeneous(1, 1e12, 1e-6, 1e9, 1e-5);
    let plain = peaks(&shipped("mlp").unwrap(), &topo).devices[&DeviceId(0)].peak;
    let ckpt = peaks(&shipped("mlp_checkpointing").unwrap(), &topo).devices[&DeviceId(0)].peak;
    assert!(ckpt < plain, "{ckpt} vs {plain}");
}

#[test]
fn data_parallel_halves_activation_memory() {
    let spec = MlpSpec::new(4, 16, 256);
    let topo = Topology::homogeneous(2, 1e12, 1e-6, 1e10, 1e-5);
    let seq = peaks(&build_mlp(&spec), &topo).devices[&DeviceId(0)].peak_activation as f64;
    let dist = dtp_transform(&build_mlp(&spec), &DistConfig::new(2, 1, 1, 1)).unwrap();
    let mem = peaks(&dist, &topo);
    // One microbatch of slack: a full-batch input before scattering.
    let slack = (2 * spec.batch_size * spec.d_model * 4) as f64;
    for d in [DeviceId(0), DeviceId(1)] {
        let act = mem.devices[&d].peak_activation as f64;
        assert!((act - seq / 2.0).abs() <= slack, "{d}: {act} vs {}", seq / 2.0);
    }
}

#[test]
fn tensor_parallel_splits_weight_memory() {
    let spec = MlpSpec::new(4, 64, 8);
    let topo = Topology::homogeneous(4, 1e12, 1e-6, 1e10, 1e-5);
    let layer = (spec.d_model * spec.d_model * 4) as u64;
    for t in [2usize, 4] {
        let dist = dtp_transform(&build_mlp(&spec), &DistConfig::new(1, t, 1, 1)).unwrap();
        let mem = peaks(&dist, &topo);
        for d in 0..t {
            let w: u64 = mem
                .live_ranges
                .iter()
                .filter(|l| l.is_param && l.device == DeviceId(d as u32) && l.value.starts_with('w'))
                .map(|l| l.size)
                .sum();
            let want = spec.param_bytes() / t as u64;
            assert!(w.abs_diff(want) <= layer, "T={t} device {d}: {w} vs {want}");
        }
    }
}

#![allow(dead_code)]

use std::cmp::Reverse;
use std::collections::{BinaryHeap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use distir::cost::{CostModel, OpInstance};
use distir::ir::{default_registry, Attr, Attrs, DeviceId, FunctionBuilder, IrModule, Type, ValueId};
use distir::sim::{flatten_program, DeviceParams, LinkParams, Topology};
use distir::interp::MixedValue;

/// Completion time ordered for a min-heap.
#[derive(PartialEq, PartialOrd)]
struct Time(f64);

impl Eq for Time {}

impl Ord for Time {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// Event-driven replay: every device owns a FIFO of the ops that occupy it,
/// in program order. An op starts once it heads the queue of every device
/// it needs and all of them are idle; each completion is an event that may
/// release new ops. Returns per-op start times and the makespan.
pub fn event_queue_oracle(ops: &[(Vec<usize>, f64)], world: usize) -> (Vec<f64>, f64) {
    let mut queues: Vec<VecDeque<usize>> = vec![VecDeque::new(); world];
    for (i, (devs, _)) in ops.iter().enumerate() {
        for &d in devs {
            queues[d].push_back(i);
        }
    }
    let mut busy = vec![false; world];
    let mut start = vec![f64::NAN; ops.len()];
    let mut started = vec![false; ops.len()];
    let mut events: BinaryHeap<Reverse<(Time, usize)>> = BinaryHeap::new();
    let mut now = 0.0;
    let mut end = 0.0f64;
    let mut done = 0;
    loop {
        // Start everything that is ready at `now`.
        let mut progress = true;
        while progress {
            progress = false;
            for (i, (devs, cost)) in ops.iter().enumerate() {
                if started[i] {
                    continue;
                }
                let ready = devs.iter().all(|&d| !busy[d] && queues[d].front() == Some(&i));
                if ready {
                    started[i] = true;
                    start[i] = now;
                    for &d in devs {
                        busy[d] = true;
                    }
                    events.push(Reverse((Time(now + cost), i)));
                    progress = true;
                }
            }
        }
        let Some(Reverse((Time(t), i))) = events.pop() else { break };
        now = t;
        end = end.max(t);
        done += 1;
        for &d in &ops[i].0 {
            busy[d] = false;
            queues[d].pop_front();
        }
        // Drain simultaneous completions before starting new ops.
        while let Some(Reverse((Time(t2), _))) = events.peek() {
            if *t2 != now {
                break;
            }
            let Reverse((_, j)) = events.pop().unwrap();
            done += 1;
            for &d in &ops[j].0 {
                busy[d] = false;
                queues[d].pop_front();
            }
        }
    }
    assert_eq!(done, ops.len(), "oracle deadlocked");
    (start, end)
}

/// `(devices, cost)` of every executed primitive, from the flattened
/// program and the cost model.
pub fn op_costs(module: &IrModule, topo: &Topology, costs: &CostModel) -> Vec<(Vec<usize>, f64)> {
    let f = module.entry_function().unwrap();
    let args = f
        .params
        .iter()
        .map(|&p| MixedValue::Abstract(f.value(p).ty.clone().unwrap()))
        .collect();
    let flat = flatten_program(module, args, default_registry()).unwrap();
    flat.ops
        .iter()
        .map(|op| {
            let c = costs
                .cost(
                    default_registry(),
                    &OpInstance {
                        op_type: &op.op_type,
                        inputs: &op.input_types,
                        outputs: &op.output_types,
                        devices: &op.devices,
                    },
                    topo,
                )
                .unwrap();
            (op.devices.iter().map(|d| d.index()).collect(), c)
        })
        .collect()
}

pub fn random_topology(rng: &mut ChaCha8Rng, world: usize) -> Topology {
    let devices = (0..world)
        .map(|_| DeviceParams {
            flops: 10f64.powf(rng.gen_range(9.0..13.0)),
            dram_bandwidth: 1e11,
            kernel_launch_overhead: rng.gen_range(0.0..1e-5),
            memory_capacity: 1e12,
        })
        .collect::<Vec<_>>();
    let mut bw = vec![vec![0.0; world]; world];
    let mut lat = vec![vec![0.0; world]; world];
    for i in 0..world {
        for j in i + 1..world {
            let b = 10f64.powf(rng.gen_range(8.0..11.0));
            let l = rng.gen_range(0.0..1e-4);
            bw[i][j] = b;
            bw[j][i] = b;
            lat[i][j] = l;
            lat[j][i] = l;
        }
    }
    Topology::from_file(&distir::sim::TopologyFile {
        world_size: world,
        devices: Some(devices),
        bandwidth: Some(bw),
        latency: Some(lat),
        ..Default::default()
    })
    .unwrap()
}

pub fn uniform_topology(world: usize, flops: f64, overhead: f64, link: LinkParams) -> Topology {
    Topology::uniform(
        world,
        DeviceParams {
            flops,
            dram_bandwidth: 1e11,
            kernel_launch_overhead: overhead,
            memory_capacity: 1e12,
        },
        link,
    )
}

/// Straight-line program of at most `max_ops` ops over at most `max_devices`
/// devices: compute on one device, Sends, and Allreduces over random
/// subsets. All tensors are `s×s` for a per-program `s`.
pub fn random_program(rng: &mut ChaCha8Rng, max_ops: usize, max_devices: usize) -> (IrModule, usize) {
    let world = rng.gen_range(1..=max_devices);
    let s = [4usize, 8, 16, 32][rng.gen_range(0..4)];
    let mut b = FunctionBuilder::new("random");
    let mut on: Vec<Vec<ValueId>> = vec![Vec::new(); world];
    for d in 0..world {
        let v = b.param(&format!("x{d}"), Type::f32([s, s], d as u32));
        on[d].push(v);
    }
    let n_ops = rng.gen_range(1..=max_ops);
    let mut last = on[0][0];
    for i in 0..n_ops {
        let d = rng.gen_range(0..world);
        let pick = |rng: &mut ChaCha8Rng, vs: &Vec<ValueId>| vs[rng.gen_range(0..vs.len())];
        let kind = rng.gen_range(0..5);
        let name = format!("v{i}");
        let out = match kind {
            0 => b.op1("Relu", Attrs::new(), &[pick(rng, &on[d])], &name),
            1 => {
                let (a, c) = (pick(rng, &on[d]), pick(rng, &on[d]));
                b.op1("Add", Attrs::new(), &[a, c], &name)
            }
            2 => {
                let (a, c) = (pick(rng, &on[d]), pick(rng, &on[d]));
                b.op1("MatMul", Attrs::new(), &[a, c], &name)
            }
            3 if world > 1 => {
                let mut to = rng.gen_range(0..world - 1);
                if to >= d {
                    to += 1;
                }
                let v = b.op1("Send", Attrs::new().with("device", Attr::Device(DeviceId(to as u32))), &[pick(rng, &on[d])], &name);
                on[to].push(v);
                last = v;
                continue;
            }
            4 if world > 1 => {
                let mut members: Vec<usize> = (0..world).filter(|_| rng.gen_bool(0.6)).collect();
                if members.len() < 2 {
                    members = (0..world).collect();
                }
                let ins: Vec<ValueId> = members.iter().map(|&m| pick(rng, &on[m])).collect();
                let names: Vec<String> = members.iter().map(|m| format!("{name}_{m}")).collect();
                let names: Vec<&str> = names.iter().map(String::as_str).collect();
                let outs = b.op("MPIAllreduce", Attrs::new(), &ins, &names);
                for (&m, &o) in members.iter().zip(&outs) {
                    on[m].push(o);
                }
                last = outs[0];
                continue;
            }
            _ => b.op1("Relu", Attrs::new(), &[pick(rng, &on[d])], &name),
        };
        on[d].push(out);
        last = out;
    }
    (IrModule::new(vec![b.ret(&[last])]), world)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

use std::collections::BTreeMap;

use crate::ir::{DeviceId, Type};

use super::{FlatProgram, TraceEvent};

/// Lifetime of one tensor (or one component of a tuple) on one device.
#[derive(Clone, Debug, PartialEq)]
pub struct LiveRange {
    pub value: String,
    pub device: DeviceId,
    pub size: u64,
    pub born: f64,
    pub dies: f64,
    pub is_param: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DeviceMemory {
    pub peak: u64,
    /// Peak over values other than function parameters.
    pub peak_activation: u64,
    /// Live bytes as a step function: `(time, bytes from this time on)`.
    pub timeline: Vec<(f64, u64)>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MemoryProfile {
    pub devices: BTreeMap<DeviceId, DeviceMemory>,
    pub live_ranges: Vec<LiveRange>,
}

fn placed_sizes(t: &Type, out: &mut Vec<(DeviceId, u64)>) {
    match t {
        Type::Tuple(items) => items.iter().for_each(|i| placed_sizes(i, out)),
        Type::Tensor { device, .. } | Type::Scalar { device, .. } => out.push((*device, t.size_bytes())),
    }
}

/// Live ranges from event times: a value is born when its producer starts
/// and dies when its last consumer ends. Parameters are born at 0; returned
/// values and unused parameters live until the end; other unused values
/// die when their producer ends.
pub(super) fn profile(flat: &FlatProgram, trace: &[TraceEvent], total_time: f64) -> MemoryProfile {
    let n_inst = flat.num_params + flat.ops.iter().map(|o| o.outputs.len()).sum::<usize>();
    let mut born = vec![0.0f64; n_inst];
    let mut last_use: Vec<Option<f64>> = vec![None; n_inst];
    let mut produced_end = vec![0.0f64; n_inst];
    let mut info: Vec<Option<(String, Type)>> = vec![None; n_inst];
    for (i, t) in flat.param_types.iter().enumerate() {
        info[i] = Some((flat.param_names[i].clone(), t.clone()));
    }
    for (op, ev) in flat.ops.iter().zip(trace) {
        for &i in &op.inputs {
            let e = ev.end();
            last_use[i] = Some(last_use[i].map_or(e, |l| l.max(e)));
        }
        for (k, (&o, t)) in op.outputs.iter().zip(&op.output_types).enumerate() {
            born[o] = ev.start;
            produced_end[o] = ev.end();
            let name = if k == 0 {
                op.output_name.clone()
            } else {
                format!("{}#{k}", op.output_name)
            };
            info[o] = Some((name, t.clone()));
        }
    }
    let mut returned = vec![false; n_inst];
    for &r in &flat.returns {
        returned[r] = true;
    }

    let mut ranges = Vec::new();
    for (i, slot) in info.iter().enumerate() {
        let Some((name, ty)) = slot else { continue };
        let is_param = i < flat.num_params;
        let dies = if returned[i] {
            total_time
        } else {
            match (last_use[i], is_param) {
                (Some(t), _) => t,
                (None, true) => total_time,
                (None, false) => produced_end[i],
            }
        };
        let mut parts = Vec::new();
        placed_sizes(ty, &mut parts);
        for (device, size) in parts {
            ranges.push(LiveRange {
                value: name.clone(),
                device,
                size,
                born: born[i],
                dies,
                is_param,
            });
        }
    }

    let mut devices: BTreeMap<DeviceId, DeviceMemory> = BTreeMap::new();
    let mut by_device: BTreeMap<DeviceId, Vec<&LiveRange>> = BTreeMap::new();
    for r in &ranges {
        by_device.entry(r.device).or_default().push(r);
    }
    for (d, rs) in by_device {
        let (peak, timeline) = sweep(&rs, true);
        let (peak_activation, _) = sweep(&rs, false);
        devices.insert(
            d,
            DeviceMemory {
                peak,
                peak_activation,
                timeline,
            },
        );
    }
    MemoryProfile {
        devices,
        live_ranges: ranges,
    }
}

/// Parameters are resident from the first timeline point; other ranges
/// contribute over `[born, dies)` unless empty. At equal times, frees are
/// applied before allocations.
fn sweep(ranges: &[&LiveRange], with_params: bool) -> (u64, Vec<(f64, u64)>) {
    let mut current: u64 = 0;
    // (time, 0 = free / 1 = alloc, bytes)
    let mut events: Vec<(f64, u8, u64)> = Vec::new();
    for r in ranges {
        if r.is_param {
            if with_params {
                current += r.size;
                events.push((r.dies, 0, r.size));
            }
        } else if r.dies > r.born {
            events.push((r.born, 1, r.size));
            events.push((r.dies, 0, r.size));
        }
    }
    events.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut timeline = vec![(0.0, current)];
    let mut peak = current;
    let mut i = 0;
    while i < events.len() {
        let t = events[i].0;
        while i < events.len() && events[i].0 == t {
            let (_, kind, size) = events[i];
            if kind == 0 {
                current -= size;
            } else {
                current += size;
            }
            i += 1;
        }
        peak = peak.max(current);
        match timeline.last_mut() {
            Some(last) if last.0 == t => last.1 = current,
            _ => timeline.push((t, current)),
        }
    }
    (peak, timeline)
}

//! Runtime and memory estimation.
//!
//! Pass one interprets the entry function in the mixed domain and records
//! every executed primitive (calls are inlined in order). Pass two replays
//! that op list against per-device clocks: an op starts once all of its
//! devices are free and occupies all of them for its cost.

mod memory;
mod topology;
mod trace;

use thiserror::Error;

use crate::cost::{CostError, CostModel, OpInstance};
use crate::interp::{Domain, InstanceId, InterpError, Interpreter, MixedValue, Observer, PrimitiveEvent};
use crate::ir::{default_registry, CostClass, DeviceId, Function, IrModule, OpRegistry, Type};

pub use memory::{DeviceMemory, LiveRange, MemoryProfile};
pub use topology::{DeviceParams, LinkParams, NodeSpec, Topology, TopologyError, TopologyFile};
pub use trace::{chrome_trace, export_trace};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Interp(#[from] InterpError),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error("op {op_index} (`{label}`) runs on device {device}, outside the topology of {world} devices")]
    DeviceOutOfRange {
        op_index: usize,
        label: String,
        device: DeviceId,
        world: usize,
    },
    #[error("entry function @{0} not found")]
    NoEntry(String),
    #[error("entry parameter %{0} has no declared type")]
    UntypedParam(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceEvent {
    /// Index of the op in the entry function (calls share their index).
    pub op_index: usize,
    /// First output name of the entry-level op.
    pub label: String,
    pub op_type: String,
    pub devices: Vec<DeviceId>,
    pub start: f64,
    pub duration: f64,
}

impl TraceEvent {
    pub fn end(&self) -> f64 {
        self.start + self.duration
    }
}

#[derive(Clone, Debug)]
pub struct SimResult {
    pub total_time: f64,
    pub trace: Vec<TraceEvent>,
    pub memory: MemoryProfile,
    /// Samples per second, when the entry function declares a batch size.
    pub throughput: Option<f64>,
}

impl SimResult {
    pub fn peak_memory(&self, d: DeviceId) -> u64 {
        self.memory.devices.get(&d).map_or(0, |m| m.peak)
    }

    /// Largest peak over all devices.
    pub fn max_peak_memory(&self) -> u64 {
        self.memory.devices.values().map(|m| m.peak).max().unwrap_or(0)
    }

    pub fn devices(&self) -> Vec<DeviceId> {
        let mut d: Vec<DeviceId> = self.trace.iter().flat_map(|e| e.devices.iter().copied()).collect();
        d.sort_unstable();
        d.dedup();
        d
    }
}

/// One executed primitive with the instance handles and types it touched.
#[derive(Clone, Debug)]
pub struct FlatOp {
    pub top_index: usize,
    pub op_type: String,
    pub class: CostClass,
    pub inputs: Vec<InstanceId>,
    pub outputs: Vec<InstanceId>,
    pub input_types: Vec<Type>,
    pub output_types: Vec<Type>,
    pub devices: Vec<DeviceId>,
    /// `@function/%value` name of the first output.
    pub output_name: String,
}

#[derive(Clone, Debug)]
pub struct FlatProgram {
    pub ops: Vec<FlatOp>,
    pub num_params: usize,
    pub param_types: Vec<Type>,
    pub param_names: Vec<String>,
    pub returns: Vec<InstanceId>,
    /// Entry-level label per top-level op index.
    pub labels: Vec<String>,
}

struct Collector<'r> {
    registry: &'r OpRegistry,
    entry: String,
    ops: Vec<FlatOp>,
}

impl Observer for Collector<'_> {
    fn on_primitive(&mut self, ev: &PrimitiveEvent<'_>) {
        let op_type = ev.op.name().to_string();
        let class = self
            .registry
            .lookup(&op_type)
            .map(|e| e.cost_class)
            .unwrap_or(CostClass::Metadata);
        let name = ev.op.outputs.first().map(|&v| ev.function.value_name(v)).unwrap_or("");
        let output_name = if ev.function.name == self.entry {
            name.to_string()
        } else {
            format!("@{}/{name}", ev.function.name)
        };
        self.ops.push(FlatOp {
            top_index: ev.top_index,
            op_type,
            class,
            inputs: ev.inputs.to_vec(),
            outputs: ev.outputs.to_vec(),
            input_types: ev.inputs.iter().map(|&i| ev.values[i].ty()).collect(),
            output_types: ev.outputs.iter().map(|&i| ev.values[i].ty()).collect(),
            devices: ev.devices.to_vec(),
            output_name,
        });
    }
}

fn entry_of(module: &IrModule) -> Result<&Function, SimError> {
    module.entry_function().ok_or_else(|| SimError::NoEntry(module.entry.clone()))
}

/// Abstract arguments from the declared parameter types of the entry.
pub fn declared_input_types(module: &IrModule) -> Result<Vec<Type>, SimError> {
    let f = entry_of(module)?;
    f.params
        .iter()
        .map(|&p| f.value(p).ty.clone().ok_or_else(|| SimError::UntypedParam(f.value_name(p).to_string())))
        .collect()
}

/// Pass one: mixed interpretation into a flat op list.
pub fn flatten_program(module: &IrModule, args: Vec<MixedValue>, registry: &OpRegistry) -> Result<FlatProgram, SimError> {
    let f = entry_of(module)?;
    let param_types: Vec<Type> = args.iter().map(MixedValue::ty).collect();
    let mut collector = Collector {
        registry,
        entry: f.name.clone(),
        ops: Vec::new(),
    };
    let interp = Interpreter::new(registry, Domain::Mixed);
    let num_params = args.len();
    let out = interp.run(module, &f.name, args, &mut collector)?;
    let labels = f
        .ops
        .iter()
        .map(|op| op.outputs.first().map_or_else(|| op.name().to_string(), |&v| f.value_name(v).to_string()))
        .collect();
    Ok(FlatProgram {
        ops: collector.ops,
        num_params,
        param_types,
        param_names: f.params.iter().map(|&p| f.value_name(p).to_string()).collect(),
        returns: out.return_instances,
        labels,
    })
}

/// Simulates the entry function on the given input types.
pub fn simulate(module: &IrModule, input_types: &[Type], topo: &Topology, costs: &CostModel) -> Result<SimResult, SimError> {
    let args = input_types.iter().cloned().map(MixedValue::Abstract).collect();
    simulate_args(module, args, topo, costs, default_registry())
}

/// Simulates on the entry's declared parameter types.
pub fn simulate_declared(module: &IrModule, topo: &Topology, costs: &CostModel) -> Result<SimResult, SimError> {
    simulate(module, &declared_input_types(module)?, topo, costs)
}

pub fn simulate_args(
    module: &IrModule,
    args: Vec<MixedValue>,
    topo: &Topology,
    costs: &CostModel,
    registry: &OpRegistry,
) -> Result<SimResult, SimError> {
    let flat = flatten_program(module, args, registry)?;
    let batch = entry_of(module)?.batch_size();
    schedule(&flat, topo, costs, batch)
}

/// Pass two: clock scheduling plus the memory profile.
pub fn schedule(flat: &FlatProgram, topo: &Topology, costs: &CostModel, batch: Option<u64>) -> Result<SimResult, SimError> {
    let world = topo.world_size();
    let mut clock = vec![0.0f64; world];
    let mut trace = Vec::with_capacity(flat.ops.len());
    for op in &flat.ops {
        let label = flat.labels.get(op.top_index).cloned().unwrap_or_default();
        if let Some(&device) = op.devices.iter().find(|d| !topo.contains(**d)) {
            return Err(SimError::DeviceOutOfRange {
                op_index: op.top_index,
                label,
                device,
                world,
            });
        }
        let cost = costs.cost_for_class(
            op.class,
            &OpInstance {
                op_type: &op.op_type,
                inputs: &op.input_types,
                outputs: &op.output_types,
                devices: &op.devices,
            },
            topo,
        )?;
        let start = op.devices.iter().map(|d| clock[d.index()]).fold(0.0, f64::max);
        for d in &op.devices {
            clock[d.index()] = start + cost;
        }
        trace.push(TraceEvent {
            op_index: op.top_index,
            label,
            op_type: op.op_type.clone(),
            devices: op.devices.clone(),
            start,
            duration: cost,
        });
    }
    let total_time = clock.iter().copied().fold(0.0, f64::max);
    let memory = memory::profile(flat, &trace, total_time);
    let throughput = batch.filter(|_| total_time > 0.0).map(|b| b as f64 / total_time);
    Ok(SimResult {
        total_time,
        trace,
        memory,
        throughput,
    })
}

/// Memory profile of the entry function on its declared parameter types.
pub fn memory_profile(module: &IrModule, topo: &Topology, costs: &CostModel) -> Result<MemoryProfile, SimError> {
    Ok(simulate_declared(module, topo, costs)?.memory)
}

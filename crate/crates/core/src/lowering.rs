//! Placement checking and projection of a global program onto one device.
//!
//! A projected program keeps, in order, every entry-level op that occupies
//! the rank. Values it reads but does not define (data arriving through a
//! communication op) become extra typed parameters. Communication ops stay
//! joint and carry a `role` attribute naming the local side: `send`/`recv`
//! for Send, `root`/`peer` for collectives.

use std::collections::{BTreeSet, HashMap, HashSet};

use thiserror::Error;

use crate::interp::{infer_types, Domain, InterpError, Interpreter, MixedValue, OpError, Observer, PrimitiveEvent};
use crate::ir::{Attr, CostClass, DeviceId, Diagnostic, Function, IrModule, Op, OpKind, OpRegistry, Rule, ValueId, Value};

#[derive(Debug, Error)]
pub enum LoweringError {
    #[error(transparent)]
    Interp(#[from] InterpError),
    #[error("placement errors: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    Placement(Vec<Diagnostic>),
}

/// The part of a global program executed by one device.
#[derive(Clone, Debug)]
pub struct PerRankProgram {
    pub rank: DeviceId,
    pub module: IrModule,
    /// Entry-level op indices of the global program kept, in order.
    pub source_ops: Vec<usize>,
}

struct PlacementObserver {
    diags: Vec<Diagnostic>,
}

impl Observer for PlacementObserver {
    fn on_placement_error(&mut self, function: &Function, op_index: usize, err: &OpError) -> bool {
        let op = &function.ops[op_index];
        self.diags.push(Diagnostic {
            function: function.name.clone(),
            op_index: Some(op_index),
            rule: Rule::Placement,
            message: format!("`{}`: {err}", op.name()),
            span: op.span,
        });
        true
    }
}

fn declared_args(f: &Function) -> Result<Vec<MixedValue>, InterpError> {
    f.params
        .iter()
        .map(|&p| {
            let v = f.value(p);
            v.ty.clone().map(MixedValue::Abstract).ok_or_else(|| InterpError::UntypedParam(v.name.clone()))
        })
        .collect()
}

/// Diagnostics for every op whose inputs violate its device function, for
/// example a compute op reading from two devices or a collective with two
/// inputs on one device. Interpretation continues past placement errors
/// where the op's type rule allows; an op that cannot be typed ends the
/// check with one more diagnostic.
pub fn placement_check(module: &IrModule, registry: &OpRegistry) -> Vec<Diagnostic> {
    let Some(f) = module.entry_function() else {
        return vec![Diagnostic {
            function: module.entry.clone(),
            op_index: None,
            rule: Rule::MissingEntry,
            message: format!("entry function @{} not found", module.entry),
            span: None,
        }];
    };
    let mut obs = PlacementObserver { diags: Vec::new() };
    let result = declared_args(f).and_then(|args| Interpreter::new(registry, Domain::Mixed).run(module, &f.name, args, &mut obs));
    if let Err(e) = result {
        let (function, op_index, span) = match &e {
            InterpError::Op {
                function, op_index, span, ..
            } => (function.clone(), Some(*op_index), *span),
            _ => (f.name.clone(), None, None),
        };
        let repeated = obs.diags.last().is_some_and(|d| d.function == function && d.op_index == op_index);
        if !repeated {
            obs.diags.push(Diagnostic {
                function,
                op_index,
                rule: Rule::Placement,
                message: e.to_string(),
                span,
            });
        }
    }
    obs.diags
}

/// Devices occupied by each entry-level op (calls: the union over their
/// body), and the input devices of entry-level primitives.
struct DeviceSets<'a> {
    entry: &'a str,
    sets: Vec<BTreeSet<DeviceId>>,
    input_devices: Vec<Vec<DeviceId>>,
}

impl<'a> DeviceSets<'a> {
    fn new(f: &'a Function) -> DeviceSets<'a> {
        DeviceSets {
            entry: &f.name,
            sets: vec![BTreeSet::new(); f.ops.len()],
            input_devices: vec![Vec::new(); f.ops.len()],
        }
    }
}

impl Observer for DeviceSets<'_> {
    fn on_primitive(&mut self, ev: &PrimitiveEvent<'_>) {
        self.sets[ev.top_index].extend(ev.devices.iter().copied());
        if ev.function.name == self.entry {
            self.input_devices[ev.top_index] = ev.inputs.iter().filter_map(|&i| ev.values[i].device()).collect();
        }
    }
}

fn role(op: &Op, class: CostClass, rank: DeviceId, input_devices: &[DeviceId]) -> Option<&'static str> {
    match class {
        CostClass::Send => Some(if input_devices.first() == Some(&rank) { "send" } else { "recv" }),
        CostClass::Collective(_) => {
            let root = match op.name() {
                "MPIBroadcast" | "MPIScatter" => input_devices.first().copied(),
                "MPIGather" | "MPIReduce" => op.attrs.device("device"),
                _ => None,
            };
            Some(if root == Some(rank) { "root" } else { "peer" })
        }
        _ => None,
    }
}

/// Projects the entry function onto `rank`. Ranks the program never uses
/// give an empty function.
pub fn project(module: &IrModule, rank: DeviceId, registry: &OpRegistry) -> Result<PerRankProgram, LoweringError> {
    let diags = placement_check(module, registry);
    if !diags.is_empty() {
        return Err(LoweringError::Placement(diags));
    }
    let typed = infer_types(module, registry)?;
    let f = typed.entry_function().expect("validated entry");
    let mut sets = DeviceSets::new(f);
    Interpreter::new(registry, Domain::Mixed).run(&typed, &f.name, declared_args(f)?, &mut sets)?;

    let on_rank = |v: ValueId| f.value(v).ty.as_ref().and_then(|t| t.device()) == Some(rank);
    let kept: Vec<usize> = f
        .body()
        .iter()
        .enumerate()
        .filter(|(i, op)| sets.sets[*i].contains(&rank) || op.outputs.iter().any(|&o| on_rank(o)))
        .map(|(i, _)| i)
        .collect();

    // Value ids in the projected function are renumbered densely.
    let mut remap: HashMap<ValueId, ValueId> = HashMap::new();
    let mut values: Vec<Value> = Vec::new();
    let mut params: Vec<ValueId> = Vec::new();
    let take = |v: ValueId, remap: &mut HashMap<ValueId, ValueId>, values: &mut Vec<Value>| -> ValueId {
        *remap.entry(v).or_insert_with(|| {
            let mut val = f.value(v).clone();
            val.span = None;
            values.push(val);
            ValueId(values.len() as u32 - 1)
        })
    };
    for &p in &f.params {
        if on_rank(p) {
            params.push(take(p, &mut remap, &mut values));
        }
    }
    let defined_by_kept: HashSet<ValueId> = kept.iter().flat_map(|&i| f.ops[i].outputs.iter().copied()).collect();
    for &i in &kept {
        for &v in &f.ops[i].inputs {
            if !remap.contains_key(&v) && !defined_by_kept.contains(&v) {
                params.push(take(v, &mut remap, &mut values));
            }
        }
        for &o in &f.ops[i].outputs {
            take(o, &mut remap, &mut values);
        }
    }
    let mut ops = Vec::with_capacity(kept.len() + 1);
    let mut callees: BTreeSet<String> = BTreeSet::new();
    for &i in &kept {
        let op = &f.ops[i];
        let mut attrs = op.attrs.clone();
        if let Some(t) = op.op_type() {
            let class = registry.lookup(t).map(|e| e.cost_class).unwrap_or(CostClass::Metadata);
            if let Some(r) = role(op, class, rank, &sets.input_devices[i]) {
                attrs.insert("role", Attr::Str(r.to_string()));
            }
        }
        if let OpKind::Call(c) = &op.kind {
            callees.insert(c.clone());
        }
        ops.push(Op {
            kind: op.kind.clone(),
            inputs: op.inputs.iter().map(|v| remap[v]).collect(),
            outputs: op.outputs.iter().map(|v| remap[v]).collect(),
            attrs,
            span: None,
        });
    }
    let returns: Vec<ValueId> = f
        .returns()
        .iter()
        .filter(|&&v| on_rank(v) && remap.contains_key(&v))
        .map(|v| remap[v])
        .collect();
    ops.push(Op {
        kind: OpKind::Return,
        inputs: returns,
        outputs: Vec::new(),
        attrs: Default::default(),
        span: None,
    });
    let projected = Function {
        name: format!("{}_rank{}", f.name, rank.0),
        attrs: f.attrs.clone(),
        values,
        params,
        ops,
        span: None,
    };
    let mut functions: Vec<Function> = reachable_callees(module, &callees);
    functions.push(projected);
    Ok(PerRankProgram {
        rank,
        module: IrModule::new(functions),
        source_ops: kept,
    })
}

/// Callee functions reachable from `roots`, in module order.
fn reachable_callees(module: &IrModule, roots: &BTreeSet<String>) -> Vec<Function> {
    let mut seen: HashSet<String> = HashSet::new();
    let mut stack: Vec<String> = roots.iter().cloned().collect();
    while let Some(name) = stack.pop() {
        if !seen.insert(name.clone()) {
            continue;
        }
        if let Some(g) = module.function(&name) {
            stack.extend(g.ops.iter().filter_map(|o| o.callee().map(str::to_string)));
        }
    }
    module.functions.iter().filter(|g| seen.contains(&g.name)).cloned().collect()
}

/// Devices occupied by any op of the entry function, ascending.
pub fn used_devices(module: &IrModule, registry: &OpRegistry) -> Result<Vec<DeviceId>, LoweringError> {
    let f = module.entry_function().ok_or_else(|| InterpError::UnknownFunction(module.entry.clone()))?;
    let mut sets = DeviceSets::new(f);
    Interpreter::new(registry, Domain::Mixed).run(module, &f.name, declared_args(f)?, &mut sets)?;
    let mut all: BTreeSet<DeviceId> = sets.sets.iter().flatten().copied().collect();
    for &p in &f.params {
        if let Some(d) = f.value(p).ty.as_ref().and_then(|t| t.device()) {
            all.insert(d);
        }
    }
    Ok(all.into_iter().collect())
}

/// Projections onto every used device.
pub fn project_all(module: &IrModule, registry: &OpRegistry) -> Result<Vec<PerRankProgram>, LoweringError> {
    used_devices(module, registry)?
        .into_iter()
        .map(|r| project(module, r, registry))
        .collect()
}

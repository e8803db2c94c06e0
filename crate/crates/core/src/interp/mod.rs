//! Abstract interpretation of DistIR functions.
//!
//! The engine walks a function op by op, keeping a per-call frame that maps
//! values to elements of the mixed domain. Primitive ops are dispatched to
//! the most specific registered implementation for the concreteness of
//! their inputs; calls recurse with a fresh frame and copy back only the
//! callee's returned bindings.

mod value;

use std::fmt;

use thiserror::Error;

use crate::ir::registry::{Impl, OpEntry};
use crate::ir::{DeviceId, Function, IrModule, Op, OpKind, OpRegistry, SourceSpan, Type, ValueId};

pub use value::{Concrete, MixedValue, Tensor};

#[derive(Clone, Debug, Error, PartialEq)]
pub enum OpError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("dtype error: {0}")]
    DType(String),
    #[error("placement error: {0}")]
    Device(String),
    #[error("attribute error: {0}")]
    Attr(String),
    #[error("unsupported input combination for `{op}`: ({kinds})")]
    Unsupported { op: String, kinds: String },
    #[error("{0}")]
    Other(String),
}

#[derive(Clone, Debug, Error, PartialEq)]
pub enum InterpError {
    #[error("function @{0} not found")]
    UnknownFunction(String),
    #[error("@{function}: expected {expected} arguments, got {got}")]
    ArgCount { function: String, expected: usize, got: usize },
    #[error("@{function}: argument %{param} has type {got}, declared {declared}")]
    ArgMismatch {
        function: String,
        param: String,
        declared: Type,
        got: Type,
    },
    #[error("@{function} op {op_index} (`{op}`){}: {source}", span_suffix(.span))]
    Op {
        function: String,
        op_index: usize,
        op: String,
        span: Option<SourceSpan>,
        source: OpError,
    },
    #[error("@{0}: value read before being bound")]
    Unbound(String),
    #[error("entry parameter %{0} has no declared type")]
    UntypedParam(String),
}

fn span_suffix(span: &Option<SourceSpan>) -> String {
    span.map(|s| format!(" at {s}")).unwrap_or_default()
}

impl InterpError {
    /// The op-level cause, if any.
    pub fn op_error(&self) -> Option<&OpError> {
        match self {
            InterpError::Op { source, .. } => Some(source),
            _ => None,
        }
    }
}

/// Which implementations the interpreter may use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Domain {
    /// Concrete values where available, abstract types elsewhere.
    #[default]
    Mixed,
    /// Every input and output is abstracted to its type.
    AbstractOnly,
    /// Concrete implementations only; no abstraction fallback.
    Concrete,
}

/// Handle of a value instance; values passed into calls keep their handle.
pub type InstanceId = usize;

/// One executed primitive op, handed to [`Observer`]s.
pub struct PrimitiveEvent<'a> {
    pub function: &'a Function,
    pub op: &'a Op,
    pub op_index: usize,
    /// Index of the enclosing op in the entry function.
    pub top_index: usize,
    pub inputs: &'a [InstanceId],
    pub outputs: &'a [InstanceId],
    pub values: &'a [MixedValue],
    pub devices: &'a [DeviceId],
}

pub struct CallEvent<'a> {
    pub caller: &'a Function,
    pub op: &'a Op,
    pub top_index: usize,
    pub outputs: &'a [InstanceId],
    pub values: &'a [MixedValue],
}

pub trait Observer {
    fn on_primitive(&mut self, _ev: &PrimitiveEvent<'_>) {}

    fn on_call(&mut self, _ev: &CallEvent<'_>) {}

    /// Called when an op's device function rejects its inputs. Returning
    /// `true` continues interpretation (with an empty device set).
    fn on_placement_error(&mut self, _function: &Function, _op_index: usize, _err: &OpError) -> bool {
        false
    }
}

impl Observer for () {}

/// Final bindings of the entry frame, in definition order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AbstractState {
    bindings: Vec<(String, MixedValue)>,
}

impl AbstractState {
    pub fn get(&self, name: &str) -> Option<&MixedValue> {
        self.bindings.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &MixedValue)> {
        self.bindings.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.bindings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bindings.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Interpretation {
    pub state: AbstractState,
    pub returns: Vec<MixedValue>,
    /// Instance handles of the returned values; parameters are `0..n`.
    pub return_instances: Vec<InstanceId>,
}

/// Picks the implementation for `inputs`: the matching impl with the most
/// constrained slots, earliest registration on ties. In the mixed domain,
/// when nothing matches, inputs are abstracted and a pure-abstract impl is
/// used. Returns the impl and whether the inputs must be abstracted.
pub fn dispatch_impl<'e>(entry: &'e OpEntry, inputs: &[MixedValue], domain: Domain) -> Result<(&'e Impl, bool), OpError> {
    let mut best: Option<(&Impl, usize)> = None;
    for imp in &entry.impls {
        if !imp.pattern.matches(inputs) {
            continue;
        }
        let s = imp.pattern.specificity(inputs.len());
        if best.map_or(true, |(_, bs)| s > bs) {
            best = Some((imp, s));
        }
    }
    if let Some((imp, _)) = best {
        return Ok((imp, false));
    }
    if domain != Domain::Concrete {
        if let Some(imp) = entry.impls.iter().find(|i| i.pattern.is_pure_abstract()) {
            return Ok((imp, true));
        }
    }
    Err(OpError::Unsupported {
        op: entry.op_type.clone(),
        kinds: inputs.iter().map(MixedValue::kind_name).collect::<Vec<_>>().join(", "),
    })
}

pub struct Interpreter<'r> {
    registry: &'r OpRegistry,
    domain: Domain,
}

struct Run<'m, 'o> {
    module: &'m IrModule,
    values: Vec<MixedValue>,
    observer: &'o mut dyn Observer,
}

impl<'r> Interpreter<'r> {
    pub fn new(registry: &'r OpRegistry, domain: Domain) -> Interpreter<'r> {
        Interpreter { registry, domain }
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    /// Interprets the module's entry function.
    pub fn interpret(&self, module: &IrModule, args: Vec<MixedValue>) -> Result<Interpretation, InterpError> {
        self.run(module, &module.entry, args, &mut ())
    }

    pub fn run(
        &self,
        module: &IrModule,
        function: &str,
        args: Vec<MixedValue>,
        observer: &mut dyn Observer,
    ) -> Result<Interpretation, InterpError> {
        let f = module
            .function(function)
            .ok_or_else(|| InterpError::UnknownFunction(function.to_string()))?;
        if args.len() != f.params.len() {
            return Err(InterpError::ArgCount {
                function: f.name.clone(),
                expected: f.params.len(),
                got: args.len(),
            });
        }
        let args = if self.domain == Domain::AbstractOnly {
            args.iter().map(MixedValue::abstracted).collect()
        } else {
            args
        };
        let mut run = Run {
            module,
            values: args,
            observer,
        };
        let arg_ids: Vec<InstanceId> = (0..f.params.len()).collect();
        let (frame, ret_ids) = self.run_function(&mut run, f, &arg_ids, None)?;
        let state = AbstractState {
            bindings: f
                .values
                .iter()
                .zip(&frame)
                .filter_map(|(v, slot)| slot.map(|id| (v.name.clone(), run.values[id].clone())))
                .collect(),
        };
        let returns = ret_ids.iter().map(|&id| run.values[id].clone()).collect();
        Ok(Interpretation {
            state,
            returns,
            return_instances: ret_ids,
        })
    }

    fn run_function(
        &self,
        run: &mut Run<'_, '_>,
        f: &Function,
        args: &[InstanceId],
        top: Option<usize>,
    ) -> Result<(Vec<Option<InstanceId>>, Vec<InstanceId>), InterpError> {
        if args.len() != f.params.len() {
            return Err(InterpError::ArgCount {
                function: f.name.clone(),
                expected: f.params.len(),
                got: args.len(),
            });
        }
        let mut frame: Vec<Option<InstanceId>> = vec![None; f.values.len()];
        for (&p, &arg) in f.params.iter().zip(args) {
            let v = f.value(p);
            if let Some(declared) = &v.ty {
                let got = run.values[arg].ty();
                if !types_agree(declared, &got) {
                    return Err(InterpError::ArgMismatch {
                        function: f.name.clone(),
                        param: v.name.clone(),
                        declared: declared.clone(),
                        got,
                    });
                }
            }
            frame[p.index()] = Some(arg);
        }
        let lookup = |frame: &[Option<InstanceId>], ids: &[ValueId]| -> Result<Vec<InstanceId>, InterpError> {
            ids.iter()
                .map(|v| frame[v.index()].ok_or_else(|| InterpError::Unbound(f.name.clone())))
                .collect()
        };
        for (i, op) in f.ops.iter().enumerate() {
            let top_index = top.unwrap_or(i);
            let op_err = |source: OpError| InterpError::Op {
                function: f.name.clone(),
                op_index: i,
                op: op.name().to_string(),
                span: op.span,
                source,
            };
            match &op.kind {
                OpKind::Return => {
                    let ids = lookup(&frame, &op.inputs)?;
                    return Ok((frame, ids));
                }
                OpKind::Call(callee) => {
                    let g = run
                        .module
                        .function(callee)
                        .ok_or_else(|| InterpError::UnknownFunction(callee.clone()))?;
                    let in_ids = lookup(&frame, &op.inputs)?;
                    let (_, ret) = self.run_function(run, g, &in_ids, Some(top_index))?;
                    if ret.len() != op.outputs.len() {
                        return Err(op_err(OpError::Other(format!(
                            "@{callee} returned {} values, call binds {}",
                            ret.len(),
                            op.outputs.len()
                        ))));
                    }
                    for (&out, &id) in op.outputs.iter().zip(&ret) {
                        frame[out.index()] = Some(id);
                    }
                    run.observer.on_call(&CallEvent {
                        caller: f,
                        op,
                        top_index,
                        outputs: &ret,
                        values: &run.values,
                    });
                }
                OpKind::Primitive(op_type) => {
                    let entry = self.registry.lookup(op_type).map_err(|e| op_err(OpError::Other(e.to_string())))?;
                    let in_ids = lookup(&frame, &op.inputs)?;
                    let mut inputs: Vec<MixedValue> = in_ids.iter().map(|&id| run.values[id].clone()).collect();
                    if self.domain == Domain::AbstractOnly {
                        inputs = inputs.iter().map(MixedValue::abstracted).collect();
                    }
                    let devices = match (entry.device_fn)(&inputs, &op.attrs) {
                        Ok(d) => d,
                        Err(e) => {
                            if run.observer.on_placement_error(f, i, &e) {
                                Vec::new()
                            } else {
                                return Err(op_err(e));
                            }
                        }
                    };
                    let (imp, abstract_inputs) = dispatch_impl(entry, &inputs, self.domain).map_err(op_err)?;
                    if abstract_inputs {
                        inputs = inputs.iter().map(MixedValue::abstracted).collect();
                    }
                    let mut outputs = (imp.func)(&inputs, &op.attrs).map_err(op_err)?;
                    if outputs.len() != op.outputs.len() {
                        return Err(op_err(OpError::Other(format!(
                            "implementation produced {} outputs, op binds {}",
                            outputs.len(),
                            op.outputs.len()
                        ))));
                    }
                    if self.domain == Domain::AbstractOnly {
                        outputs = outputs.iter().map(MixedValue::abstracted).collect();
                    }
                    let mut out_ids = Vec::with_capacity(outputs.len());
                    for (&out, value) in op.outputs.iter().zip(outputs) {
                        if let Some(declared) = &f.value(out).ty {
                            let got = value.ty();
                            if !types_agree(declared, &got) {
                                return Err(op_err(OpError::Other(format!(
                                    "%{} computed as {got}, declared {declared}",
                                    f.value_name(out)
                                ))));
                            }
                        }
                        let id = run.values.len();
                        run.values.push(value);
                        frame[out.index()] = Some(id);
                        out_ids.push(id);
                    }
                    run.observer.on_primitive(&PrimitiveEvent {
                        function: f,
                        op,
                        op_index: i,
                        top_index,
                        inputs: &in_ids,
                        outputs: &out_ids,
                        values: &run.values,
                        devices: &devices,
                    });
                }
            }
        }
        Err(InterpError::Op {
            function: f.name.clone(),
            op_index: f.ops.len(),
            op: "return".to_string(),
            span: f.span,
            source: OpError::Other("function has no return".to_string()),
        })
    }
}

/// A declared rank-0 tensor type and a scalar type describe the same value.
fn types_agree(declared: &Type, got: &Type) -> bool {
    match (declared, got) {
        (
            Type::Tensor {
                dtype, shape, device, ..
            },
            Type::Scalar { dtype: d2, device: v2 },
        )
        | (
            Type::Scalar { dtype: d2, device: v2 },
            Type::Tensor {
                dtype, shape, device, ..
            },
        ) => shape.is_empty() && dtype == d2 && device == v2,
        (Type::Tuple(a), Type::Tuple(b)) => a.len() == b.len() && a.iter().zip(b).all(|(x, y)| types_agree(x, y)),
        _ => declared == got,
    }
}

/// Convenience wrapper: interpret the entry of `module` in `domain`.
pub fn interpret(
    module: &IrModule,
    args: Vec<MixedValue>,
    domain: Domain,
    registry: &OpRegistry,
) -> Result<Interpretation, InterpError> {
    Interpreter::new(registry, domain).interpret(module, args)
}

/// Abstract arguments from the declared entry parameter types.
pub fn abstract_args(f: &Function) -> Option<Vec<MixedValue>> {
    f.params
        .iter()
        .map(|&p| f.value(p).ty.clone().map(MixedValue::Abstract))
        .collect()
}

/// The module with every entry-function value typed by a mixed
/// interpretation on the declared parameter types.
pub fn infer_types(module: &IrModule, registry: &OpRegistry) -> Result<IrModule, InterpError> {
    let f = module
        .entry_function()
        .ok_or_else(|| InterpError::UnknownFunction(module.entry.clone()))?;
    let args = f
        .params
        .iter()
        .map(|&p| {
            let v = f.value(p);
            v.ty.clone().map(MixedValue::Abstract).ok_or_else(|| InterpError::UntypedParam(v.name.clone()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let out = Interpreter::new(registry, Domain::Mixed).interpret(module, args)?;
    let bound: std::collections::HashMap<&str, &MixedValue> = out.state.iter().collect();
    let mut typed = module.clone();
    let g = typed.function_mut(&module.entry).expect("entry exists");
    for v in &mut g.values {
        if let Some(m) = bound.get(v.name.as_str()) {
            v.ty = Some(m.ty());
        }
    }
    Ok(typed)
}

impl fmt::Display for AbstractState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (name, v) in &self.bindings {
            writeln!(f, "%{name} = {v}")?;
        }
        Ok(())
    }
}

//! Built-in op vocabulary.
//!
//! Each op gets a type rule (its abstract implementation), a concrete
//! kernel for the reference executor, a device function and a cost class.
//! Tensor ops register two implementations: all-concrete inputs run the
//! kernel, all-abstract inputs run the type rule. Mixed inputs fall back to
//! the type rule through dispatch. `Shape` and `Reshape` carry the mixed
//! implementations that keep shape values concrete.

pub mod kernels;

use std::sync::Arc;

use crate::interp::{Concrete, MixedValue, OpError, Tensor};
use crate::ir::registry::{CollectiveKind, DeviceFn, ImplFn, Kind, Pattern};
use crate::ir::{Arity, AttrKind, AttrSpec, Attrs, CostClass, DType, DeviceId, OpEntry, OpRegistry, Signature, Type};

type TypeRule = fn(&[Type], &Attrs) -> Result<Vec<Type>, OpError>;
type Kernel = fn(&[&Tensor], &[Type], &Attrs) -> Result<Vec<Vec<f64>>, OpError>;

/// Every op type registered by [`register_defaults`].
pub const DEFAULT_OPS: &[&str] = &[
    "MatMul",
    "MatMulGrad",
    "Gemm",
    "Relu",
    "ReluGrad",
    "Add",
    "Sub",
    "Mul",
    "Transpose",
    "Shape",
    "Reshape",
    "Split",
    "Concat",
    "Loss",
    "LossGrad",
    "Cast",
    "Identity",
    "MakeTuple",
    "UnpackTuple",
    "SgdStep",
    "Constant",
    "Send",
    "MPIBroadcast",
    "MPIScatter",
    "MPIGather",
    "MPIAllreduce",
    "MPIReduce",
    "MPIAllgather",
];

pub fn register_defaults(r: &mut OpRegistry) {
    use AttrKind as A;
    let one = Arity::Exactly(1);
    let many = Arity::AtLeast(1);

    let compute = |name: &str, sig: Signature, cost: CostClass, rule: TypeRule, kernel: Kernel| {
        tensor_entry(name, sig, same_device(), cost, rule, kernel)
    };
    let defaults = vec![
        compute("MatMul", Signature::new(Arity::Exactly(2), one), CostClass::MatMul, matmul_rule, matmul_kernel),
        compute(
            "MatMulGrad",
            Signature::new(Arity::Exactly(3), Arity::Exactly(2)),
            CostClass::MatMulGrad,
            matmul_grad_rule,
            matmul_grad_kernel,
        ),
        compute("Gemm", Signature::new(Arity::Between(2, 3), one), CostClass::MatMul, gemm_rule, gemm_kernel),
        compute("Relu", Signature::new(one, one), CostClass::Elementwise, unary_rule, relu_kernel),
        compute(
            "ReluGrad",
            Signature::new(Arity::Exactly(2), one),
            CostClass::Elementwise,
            relu_grad_rule,
            relu_grad_kernel,
        ),
        compute("Add", Signature::new(Arity::Exactly(2), one), CostClass::Elementwise, binary_rule, add_kernel),
        compute("Sub", Signature::new(Arity::Exactly(2), one), CostClass::Elementwise, binary_rule, sub_kernel),
        compute("Mul", Signature::new(Arity::Exactly(2), one), CostClass::Elementwise, binary_rule, mul_kernel),
        compute(
            "Transpose",
            Signature::new(one, one).attr(AttrSpec::optional("perm", A::IntList)),
            CostClass::Elementwise,
            transpose_rule,
            transpose_kernel,
        ),
        shape_entry(),
        reshape_entry(),
        compute(
            "Split",
            Signature::new(one, many)
                .attr(AttrSpec::required("axis", A::Int))
                .attr(AttrSpec::required("num", A::Int))
                .check(|_, nout, attrs| match attrs.int("num") {
                    Some(n) if n as usize == nout => Ok(()),
                    Some(n) => Err(format!("num={n} but {nout} results")),
                    None => Ok(()),
                }),
            CostClass::Elementwise,
            split_rule,
            split_kernel,
        ),
        compute(
            "Concat",
            Signature::new(many, one).attr(AttrSpec::required("axis", A::Int)),
            CostClass::Elementwise,
            concat_rule,
            concat_kernel,
        ),
        compute("Loss", Signature::new(Arity::Exactly(2), one), CostClass::Elementwise, loss_rule, loss_kernel),
        compute(
            "LossGrad",
            Signature::new(Arity::Exactly(2), one).attr(AttrSpec::optional("n", A::Int)),
            CostClass::Elementwise,
            loss_grad_rule,
            loss_grad_kernel,
        ),
        compute(
            "Cast",
            Signature::new(one, one).attr(AttrSpec::required("to", A::Str)),
            CostClass::Elementwise,
            cast_rule,
            identity_kernel,
        ),
        compute(
            "SgdStep",
            Signature::new(Arity::Exactly(2), one).attr(AttrSpec::required("lr", A::Float)),
            CostClass::Elementwise,
            sgd_rule,
            sgd_kernel,
        ),
        value_entry("Identity", Signature::new(one, one), |ins| Ok(vec![ins[0].clone()])),
        value_entry("MakeTuple", Signature::new(Arity::AtLeast(0), one), |ins| {
            Ok(vec![match ins.iter().all(MixedValue::is_concrete) {
                true => MixedValue::Concrete(Concrete::Tuple(
                    ins.iter()
                        .map(|v| match v {
                            MixedValue::Concrete(c) => c.clone(),
                            MixedValue::Abstract(_) => unreachable!(),
                        })
                        .collect(),
                )),
                false => MixedValue::Abstract(Type::Tuple(ins.iter().map(MixedValue::ty).collect())),
            }])
        }),
        value_entry("UnpackTuple", Signature::new(one, Arity::AtLeast(0)), |ins| match &ins[0] {
            MixedValue::Concrete(Concrete::Tuple(items)) => Ok(items.iter().cloned().map(MixedValue::Concrete).collect()),
            MixedValue::Abstract(Type::Tuple(items)) => Ok(items.iter().cloned().map(MixedValue::Abstract).collect()),
            other => Err(OpError::DType(format!("UnpackTuple expects a tuple, got {}", other.ty()))),
        }),
        constant_entry(),
        comm_entry(
            "Send",
            Signature::new(one, one).attr(AttrSpec::required("device", A::Device)),
            send_devices(),
            CostClass::Send,
            send_rule,
            send_kernel,
        ),
        comm_entry(
            "MPIBroadcast",
            Signature::new(one, many)
                .attr(AttrSpec::required("devices", A::IntList))
                .check(check_outputs_match_devices),
            root_and_list_devices(),
            CostClass::Collective(CollectiveKind::Broadcast),
            broadcast_rule,
            broadcast_kernel,
        ),
        comm_entry(
            "MPIScatter",
            Signature::new(one, many)
                .attr(AttrSpec::required("axis", A::Int))
                .attr(AttrSpec::required("devices", A::IntList))
                .check(check_outputs_match_devices),
            root_and_list_devices(),
            CostClass::Collective(CollectiveKind::Scatter),
            scatter_rule,
            scatter_kernel,
        ),
        comm_entry(
            "MPIGather",
            Signature::new(many, one)
                .attr(AttrSpec::required("axis", A::Int))
                .attr(AttrSpec::required("device", A::Device)),
            distinct_inputs_and_target(),
            CostClass::Collective(CollectiveKind::Gather),
            gather_rule,
            gather_kernel,
        ),
        comm_entry(
            "MPIAllreduce",
            Signature::new(many, many).check(check_outputs_match_inputs),
            distinct_inputs(),
            CostClass::Collective(CollectiveKind::Allreduce),
            allreduce_rule,
            allreduce_kernel,
        ),
        comm_entry(
            "MPIReduce",
            Signature::new(many, one).attr(AttrSpec::required("device", A::Device)),
            distinct_inputs_and_target(),
            CostClass::Collective(CollectiveKind::Reduce),
            reduce_rule,
            reduce_kernel,
        ),
        comm_entry(
            "MPIAllgather",
            Signature::new(many, many)
                .attr(AttrSpec::required("axis", A::Int))
                .check(check_outputs_match_inputs),
            distinct_inputs(),
            CostClass::Collective(CollectiveKind::Allgather),
            allgather_rule,
            allgather_kernel,
        ),
    ];
    for e in defaults {
        r.register(e).expect("default vocabulary has unique names");
    }
}

fn check_outputs_match_devices(_: usize, nout: usize, attrs: &Attrs) -> Result<(), String> {
    match attrs.int_list("devices") {
        Some(d) if d.len() != nout => Err(format!("{} devices but {nout} results", d.len())),
        _ => Ok(()),
    }
}

fn check_outputs_match_inputs(nin: usize, nout: usize, _: &Attrs) -> Result<(), String> {
    if nin == nout {
        Ok(())
    } else {
        Err(format!("{nin} inputs but {nout} results"))
    }
}

// ---------------------------------------------------------------------------
// Entry constructors

fn abstract_impl(rule: TypeRule) -> ImplFn {
    Arc::new(move |ins: &[MixedValue], attrs: &Attrs| {
        let tys: Vec<Type> = ins.iter().map(MixedValue::ty).collect();
        Ok(rule(&tys, attrs)?.into_iter().map(MixedValue::Abstract).collect())
    })
}

/// The concrete implementation checks shapes with the type rule, then fills
/// the data with the kernel.
fn concrete_impl(rule: TypeRule, kernel: Kernel) -> ImplFn {
    Arc::new(move |ins: &[MixedValue], attrs: &Attrs| {
        let tensors: Vec<&Tensor> = ins
            .iter()
            .map(|v| v.as_tensor().ok_or_else(|| OpError::DType(format!("expected a tensor, got {}", v.ty()))))
            .collect::<Result<_, _>>()?;
        let tys: Vec<Type> = tensors.iter().map(|t| t.ty()).collect();
        let out_tys = rule(&tys, attrs)?;
        let data = kernel(&tensors, &out_tys, attrs)?;
        out_tys
            .into_iter()
            .zip(data)
            .map(|(ty, d)| {
                let (dtype, shape, device) = tensor_parts(&ty)?;
                Tensor::new(dtype, shape.to_vec(), d, device).map(MixedValue::tensor)
            })
            .collect()
    })
}

fn tensor_entry(name: &str, sig: Signature, dev: DeviceFn, cost: CostClass, rule: TypeRule, kernel: Kernel) -> OpEntry {
    OpEntry::new(name, sig, dev, cost)
        .with_impl(Pattern::all(Kind::Concrete), concrete_impl(rule, kernel))
        .with_impl(Pattern::all(Kind::Abstract), abstract_impl(rule))
}

fn comm_entry(name: &str, sig: Signature, dev: DeviceFn, cost: CostClass, rule: TypeRule, kernel: Kernel) -> OpEntry {
    let sig = sig.attr(AttrSpec::optional("role", AttrKind::Str));
    tensor_entry(name, sig, dev, cost, rule, kernel)
}

/// Ops that pass values through unchanged, for either kind of input.
fn value_entry(name: &str, sig: Signature, f: fn(&[MixedValue]) -> Result<Vec<MixedValue>, OpError>) -> OpEntry {
    OpEntry::new(name, sig, same_device(), CostClass::Metadata).with_impl(Pattern::all(Kind::Any), Arc::new(move |ins, _| f(ins)))
}

fn shape_entry() -> OpEntry {
    let to_list = |ins: &[MixedValue], _: &Attrs| -> Result<Vec<MixedValue>, OpError> {
        let ty = ins[0].ty();
        let (_, shape, device) = tensor_parts(&ty)?;
        let dims: Vec<i64> = shape.iter().map(|&d| d as i64).collect();
        Ok(vec![MixedValue::tensor(Tensor::int_list(&dims, device))])
    };
    // The abstract-input implementation already yields a concrete shape; in
    // the abstract-only domain its output is abstracted to I64[rank].
    OpEntry::new("Shape", Signature::new(Arity::Exactly(1), Arity::Exactly(1)), same_device(), CostClass::Metadata)
        .with_impl(Pattern::all(Kind::Abstract), Arc::new(to_list))
        .with_impl(Pattern::all(Kind::Concrete), Arc::new(to_list))
}

fn reshape_entry() -> OpEntry {
    let imp = |ins: &[MixedValue], _: &Attrs| -> Result<Vec<MixedValue>, OpError> {
        let target = ins[1]
            .as_tensor()
            .and_then(Tensor::as_int_list)
            .ok_or_else(|| OpError::DType("Reshape target must be an integer list".to_string()))?;
        let ty = ins[0].ty();
        let (dtype, shape, device) = tensor_parts(&ty)?;
        let n: usize = shape.iter().product();
        let out_shape = resolve_reshape(n, &target)?;
        Ok(vec![match &ins[0] {
            MixedValue::Concrete(Concrete::Tensor(t)) => MixedValue::tensor(Tensor {
                shape: out_shape,
                ..t.clone()
            }),
            _ => MixedValue::Abstract(Type::tensor(dtype, out_shape, device)),
        }])
    };
    OpEntry::new("Reshape", Signature::new(Arity::Exactly(2), Arity::Exactly(1)), same_device(), CostClass::Metadata)
        .with_impl(Pattern::slots(&[Kind::Any, Kind::Concrete]), Arc::new(imp))
}

/// Resolves a reshape target with at most one `-1`, preserving element count.
pub fn resolve_reshape(numel: usize, target: &[i64]) -> Result<Vec<usize>, OpError> {
    let mut infer = None;
    let mut known = 1usize;
    for (i, &d) in target.iter().enumerate() {
        match d {
            -1 if infer.is_none() => infer = Some(i),
            -1 => return Err(OpError::Shape("Reshape target has more than one -1".to_string())),
            d if d <= 0 => return Err(OpError::Shape(format!("invalid Reshape dimension {d}"))),
            d => known *= d as usize,
        }
    }
    let mut out: Vec<usize> = target.iter().map(|&d| d.max(0) as usize).collect();
    match infer {
        Some(i) => {
            if known == 0 || numel % known != 0 {
                return Err(OpError::Shape(format!("cannot reshape {numel} elements to {target:?}")));
            }
            out[i] = numel / known;
        }
        None if known != numel => {
            return Err(OpError::Shape(format!("cannot reshape {numel} elements to {target:?}")));
        }
        None => {}
    }
    Ok(out)
}

fn constant_entry() -> OpEntry {
    let sig = Signature::new(Arity::Exactly(0), Arity::Exactly(1))
        .attr(AttrSpec::required("value", AttrKind::IntList))
        .attr(AttrSpec::required("device", AttrKind::Device));
    let dev: DeviceFn = Arc::new(|_, attrs| {
        attrs
            .device("device")
            .map(|d| vec![d])
            .ok_or_else(|| OpError::Attr("Constant needs `device`".to_string()))
    });
    OpEntry::new("Constant", sig, dev, CostClass::Metadata).with_impl(
        Pattern::all(Kind::Concrete),
        Arc::new(|_, attrs| {
            let value = attrs.int_list("value").ok_or_else(|| OpError::Attr("Constant needs `value`".to_string()))?;
            let device = attrs.device("device").ok_or_else(|| OpError::Attr("Constant needs `device`".to_string()))?;
            Ok(vec![MixedValue::tensor(Tensor::int_list(value, device))])
        }),
    )
}

// ---------------------------------------------------------------------------
// Device functions

fn input_device(v: &MixedValue) -> Result<DeviceId, OpError> {
    v.device().ok_or_else(|| OpError::Device(format!("value of type {} has no single device", v.ty())))
}

/// Single-device compute: every input on one common device.
fn same_device() -> DeviceFn {
    Arc::new(|ins, attrs| {
        let mut dev: Option<DeviceId> = None;
        for v in ins {
            let d = input_device(v)?;
            match dev {
                None => dev = Some(d),
                Some(prev) if prev != d => {
                    return Err(OpError::Device(format!("inputs on devices {prev} and {d}")));
                }
                _ => {}
            }
        }
        match dev.or_else(|| attrs.device("device")) {
            Some(d) => Ok(vec![d]),
            None => Err(OpError::Device("op has no placed input".to_string())),
        }
    })
}

fn sorted(mut v: Vec<DeviceId>) -> Vec<DeviceId> {
    v.sort_unstable();
    v.dedup();
    v
}

fn send_devices() -> DeviceFn {
    Arc::new(|ins, attrs| {
        let src = input_device(&ins[0])?;
        let dst = attrs.device("device").ok_or_else(|| OpError::Attr("Send needs `device`".to_string()))?;
        Ok(sorted(vec![src, dst]))
    })
}

fn attr_devices(attrs: &Attrs) -> Result<Vec<DeviceId>, OpError> {
    attrs
        .devices("devices")
        .ok_or_else(|| OpError::Attr("`devices` must be a list of device ids".to_string()))
}

fn root_and_list_devices() -> DeviceFn {
    Arc::new(|ins, attrs| {
        let mut devs = attr_devices(attrs)?;
        devs.push(input_device(&ins[0])?);
        Ok(sorted(devs))
    })
}

fn distinct_input_devices(ins: &[MixedValue]) -> Result<Vec<DeviceId>, OpError> {
    let devs: Vec<DeviceId> = ins.iter().map(input_device).collect::<Result<_, _>>()?;
    let set = sorted(devs.clone());
    if set.len() != devs.len() {
        return Err(OpError::Device(format!("collective inputs must be on distinct devices, got {devs:?}")));
    }
    Ok(set)
}

fn distinct_inputs() -> DeviceFn {
    Arc::new(|ins, _| distinct_input_devices(ins))
}

fn distinct_inputs_and_target() -> DeviceFn {
    Arc::new(|ins, attrs| {
        let mut devs = distinct_input_devices(ins)?;
        devs.push(attrs.device("device").ok_or_else(|| OpError::Attr("missing `device`".to_string()))?);
        Ok(sorted(devs))
    })
}

// ---------------------------------------------------------------------------
// Type rules

pub(crate) fn tensor_parts(t: &Type) -> Result<(DType, &[usize], DeviceId), OpError> {
    match t {
        Type::Tensor { dtype, shape, device } => Ok((*dtype, shape, *device)),
        Type::Scalar { dtype, device } => Ok((*dtype, &[], *device)),
        Type::Tuple(_) => Err(OpError::DType(format!("expected a tensor, got {t}"))),
    }
}

fn same_dtype(a: DType, b: DType) -> Result<(), OpError> {
    if a == b {
        Ok(())
    } else {
        Err(OpError::DType(format!("{a} vs {b}")))
    }
}

fn matrix(t: &Type) -> Result<(DType, usize, usize, DeviceId), OpError> {
    let (dt, s, dev) = tensor_parts(t)?;
    match s {
        [r, c] => Ok((dt, *r, *c, dev)),
        _ => Err(OpError::Shape(format!("expected a matrix, got {t}"))),
    }
}

fn axis_attr(attrs: &Attrs, rank: usize) -> Result<usize, OpError> {
    let a = attrs.int("axis").ok_or_else(|| OpError::Attr("missing `axis`".to_string()))?;
    let a = if a < 0 { a + rank as i64 } else { a };
    if a < 0 || a as usize >= rank {
        return Err(OpError::Attr(format!("axis {a} out of range for rank {rank}")));
    }
    Ok(a as usize)
}

fn matmul_rule(ins: &[Type], _: &Attrs) -> Result<Vec<Type>, OpError> {
    let (da, m, k, dev) = matrix(&ins[0])?;
    let (db, k2, n, _) = matrix(&ins[1])?;
    same_dtype(da, db)?;
    if k != k2 {
        return Err(OpError::Shape(format!("({m},{k}) x ({k2},{n})")));
    }
    Ok(vec![Type::tensor(da, vec![m, n], dev)])
}

fn gemm_rule(ins: &[Type], attrs: &Attrs) -> Result<Vec<Type>, OpError> {
    let out = matmul_rule(&ins[..2], attrs)?;
    if let Some(c) = ins.get(2) {
        let (dc, cs, _) = tensor_parts(c)?;
        let (dt, os, _) = tensor_parts(&out[0])?;
        same_dtype(dt, dc)?;
        if cs != os && cs != [os[1]] {
            return Err(OpError::Shape(format!("Gemm addend {c} does not broadcast to {}", out[0])));
        }
    }
    Ok(out)
}

fn matmul_grad_rule(ins: &[Type], _: &Attrs) -> Result<Vec<Type>, OpError> {
    let (da, m, k, _) = matrix(&ins[0])?;
    let (db, k2, n, _) = matrix(&ins[1])?;
    let (dy, m2, n2, _) = matrix(&ins[2])?;
    same_dtype(da, db)?;
    same_dtype(da, dy)?;
    if k != k2 || m != m2 || n != n2 {
        return Err(OpError::Shape(format!("MatMulGrad on ({m},{k}), ({k2},{n}), dY ({m2},{n2})")));
    }
    Ok(vec![ins[0].clone(), ins[1].clone()])
}

fn unary_rule(ins: &[Type], _: &Attrs) -> Result<Vec<Type>, OpError> {
    tensor_parts(&ins[0])?;
    Ok(vec![ins[0].clone()])
}

fn same_shape(a: &Type, b: &Type) -> Result<(), OpError> {
    let (da, sa, _) = tensor_parts(a)?;
    let (db, sb, _) = tensor_parts(b)?;
    same_dtype(da, db)?;
    if sa != sb {
        return Err(OpError::Shape(format!("{a} vs {b}")));
    }
    Ok(())
}

fn relu_grad_rule(ins: &[Type], _: &Attrs) -> Result<Vec<Type>, OpError> {
    same_shape(&ins[0], &ins[1])?;
    Ok(vec![ins[1].clone()])
}

/// Same shapes, or one side a rank-0 scalar.
fn binary_rule(ins: &[Type], _: &Attrs) -> Result<Vec<Type>, OpError> {
    let (da, sa, _) = tensor_parts(&ins[0])?;
    let (db, sb, _) = tensor_parts(&ins[1])?;
    same_dtype(da, db)?;
    if sa == sb || sb.is_empty() {
        Ok(vec![ins[0].clone()])
    } else if sa.is_empty() {
        Ok(vec![ins[1].clone()])
    } else {
        Err(OpError::Shape(format!("{} vs {}", ins[0], ins[1])))
    }
}

fn sgd_rule(ins: &[Type], attrs: &Attrs) -> Result<Vec<Type>, OpError> {
    same_shape(&ins[0], &ins[1])?;
    attrs.float("lr").ok_or_else(|| OpError::Attr("SgdStep needs `lr`".to_string()))?;
    Ok(vec![ins[0].clone()])
}

fn loss_rule(ins: &[Type], _: &Attrs) -> Result<Vec<Type>, OpError> {
    same_shape(&ins[0], &ins[1])?;
    let (dtype, _, device) = tensor_parts(&ins[0])?;
    Ok(vec![Type::Scalar { dtype, device }])
}

fn loss_grad_rule(ins: &[Type], attrs: &Attrs) -> Result<Vec<Type>, OpError> {
    same_shape(&ins[0], &ins[1])?;
    if let Some(n) = attrs.int("n") {
        if n <= 0 {
            return Err(OpError::Attr(format!("LossGrad n must be positive, got {n}")));
        }
    }
    Ok(vec![ins[0].clone()])
}

fn perm_attr(attrs: &Attrs, rank: usize) -> Result<Vec<usize>, OpError> {
    match attrs.int_list("perm") {
        None => Ok((0..rank).rev().collect()),
        Some(p) => {
            let mut seen = vec![false; rank];
            let perm: Vec<usize> = p.iter().map(|&i| i as usize).collect();
            if perm.len() != rank || perm.iter().any(|&i| i >= rank || std::mem::replace(&mut seen[i], true)) {
                return Err(OpError::Attr(format!("invalid permutation {p:?} for rank {rank}")));
            }
            Ok(perm)
        }
    }
}

fn transpose_rule(ins: &[Type], attrs: &Attrs) -> Result<Vec<Type>, OpError> {
    let (dt, s, dev) = tensor_parts(&ins[0])?;
    let perm = perm_attr(attrs, s.len())?;
    Ok(vec![Type::tensor(dt, perm.iter().map(|&p| s[p]).collect::<Vec<_>>(), dev)])
}

fn split_rule(ins: &[Type], attrs: &Attrs) -> Result<Vec<Type>, OpError> {
    let (dt, s, dev) = tensor_parts(&ins[0])?;
    let axis = axis_attr(attrs, s.len())?;
    let num = attrs.int("num").filter(|&n| n > 0).ok_or_else(|| OpError::Attr("Split needs positive `num`".to_string()))? as usize;
    if s[axis] % num != 0 {
        return Err(OpError::Shape(format!("cannot split dimension {} of {} into {num} equal parts", axis, ins[0])));
    }
    let mut part = s.to_vec();
    part[axis] /= num;
    Ok(vec![Type::tensor(dt, part, dev); num])
}

fn concat_shape(ins: &[Type], axis_of: impl Fn(usize) -> Result<usize, OpError>) -> Result<(DType, Vec<usize>, usize), OpError> {
    let (dt, s0, _) = tensor_parts(&ins[0])?;
    let axis = axis_of(s0.len())?;
    let mut out = s0.to_vec();
    for t in &ins[1..] {
        let (d, s, _) = tensor_parts(t)?;
        same_dtype(dt, d)?;
        let compatible = s.len() == s0.len() && s.iter().zip(s0).enumerate().all(|(i, (a, b))| i == axis || a == b);
        if !compatible {
            return Err(OpError::Shape(format!("cannot concatenate {} and {t} on axis {axis}", ins[0])));
        }
        out[axis] += s[axis];
    }
    Ok((dt, out, axis))
}

fn concat_rule(ins: &[Type], attrs: &Attrs) -> Result<Vec<Type>, OpError> {
    let (dt, out, _) = concat_shape(ins, |r| axis_attr(attrs, r))?;
    let (_, _, dev) = tensor_parts(&ins[0])?;
    Ok(vec![Type::tensor(dt, out, dev)])
}

fn cast_rule(ins: &[Type], attrs: &Attrs) -> Result<Vec<Type>, OpError> {
    let to = attrs.str("to").ok_or_else(|| OpError::Attr("Cast needs `to`".to_string()))?;
    let dtype = DType::from_name(to).ok_or_else(|| OpError::Attr(format!("unknown dtype `{to}`")))?;
    let (_, s, dev) = tensor_parts(&ins[0])?;
    Ok(vec![if matches!(ins[0], Type::Scalar { .. }) {
        Type::Scalar { dtype, device: dev }
    } else {
        Type::tensor(dtype, s.to_vec(), dev)
    }])
}

fn send_rule(ins: &[Type], attrs: &Attrs) -> Result<Vec<Type>, OpError> {
    tensor_parts(&ins[0])?;
    let dst = attrs.device("device").ok_or_else(|| OpError::Attr("Send needs `device`".to_string()))?;
    Ok(vec![ins[0].with_device(dst)])
}

fn broadcast_rule(ins: &[Type], attrs: &Attrs) -> Result<Vec<Type>, OpError> {
    tensor_parts(&ins[0])?;
    Ok(attr_devices(attrs)?.into_iter().map(|d| ins[0].with_device(d)).collect())
}

fn scatter_rule(ins: &[Type], attrs: &Attrs) -> Result<Vec<Type>, OpError> {
    let devs = attr_devices(attrs)?;
    let (dt, s, _) = tensor_parts(&ins[0])?;
    let axis = axis_attr(attrs, s.len())?;
    let g = devs.len();
    if s[axis] % g != 0 {
        return Err(OpError::Shape(format!("cannot scatter dimension {axis} of {} over {g} devices", ins[0])));
    }
    let mut part = s.to_vec();
    part[axis] /= g;
    Ok(devs.into_iter().map(|d| Type::tensor(dt, part.clone(), d)).collect())
}

fn gather_rule(ins: &[Type], attrs: &Attrs) -> Result<Vec<Type>, OpError> {
    let (dt, out, _) = concat_shape(ins, |r| axis_attr(attrs, r))?;
    let dst = attrs.device("device").ok_or_else(|| OpError::Attr("missing `device`".to_string()))?;
    Ok(vec![Type::tensor(dt, out, dst)])
}

fn all_same(ins: &[Type]) -> Result<(), OpError> {
    for t in &ins[1..] {
        same_shape(&ins[0], t)?;
    }
    Ok(())
}

fn allreduce_rule(ins: &[Type], _: &Attrs) -> Result<Vec<Type>, OpError> {
    all_same(ins)?;
    ins.iter()
        .map(|t| Ok(ins[0].with_device(tensor_parts(t)?.2)))
        .collect()
}

fn reduce_rule(ins: &[Type], attrs: &Attrs) -> Result<Vec<Type>, OpError> {
    all_same(ins)?;
    let dst = attrs.device("device").ok_or_else(|| OpError::Attr("missing `device`".to_string()))?;
    Ok(vec![ins[0].with_device(dst)])
}

fn allgather_rule(ins: &[Type], attrs: &Attrs) -> Result<Vec<Type>, OpError> {
    let (dt, out, _) = concat_shape(ins, |r| axis_attr(attrs, r))?;
    ins.iter()
        .map(|t| Ok(Type::tensor(dt, out.clone(), tensor_parts(t)?.2)))
        .collect()
}

// ---------------------------------------------------------------------------
// Kernels

fn dims2(t: &Tensor) -> (usize, usize) {
    (t.shape[0], t.shape[1])
}

fn matmul_kernel(ins: &[&Tensor], _: &[Type], _: &Attrs) -> Result<Vec<Vec<f64>>, OpError> {
    let (m, k) = dims2(ins[0]);
    let n = ins[1].shape[1];
    Ok(vec![kernels::matmul(&ins[0].data, &ins[1].data, m, k, n, false, false)])
}

fn gemm_kernel(ins: &[&Tensor], _: &[Type], _: &Attrs) -> Result<Vec<Vec<f64>>, OpError> {
    let (m, k) = dims2(ins[0]);
    let n = ins[1].shape[1];
    let mut y = kernels::matmul(&ins[0].data, &ins[1].data, m, k, n, false, false);
    if let Some(c) = ins.get(2) {
        if c.rank() == 1 {
            for row in y.chunks_mut(n) {
                row.iter_mut().zip(&c.data).for_each(|(y, c)| *y += c);
            }
        } else {
            y.iter_mut().zip(&c.data).for_each(|(y, c)| *y += c);
        }
    }
    Ok(vec![y])
}

/// `(A, B, dY) -> (dY B^T, A^T dY)`.
fn matmul_grad_kernel(ins: &[&Tensor], _: &[Type], _: &Attrs) -> Result<Vec<Vec<f64>>, OpError> {
    let (m, k) = dims2(ins[0]);
    let n = ins[1].shape[1];
    let da = kernels::matmul(&ins[2].data, &ins[1].data, m, n, k, false, true);
    let db = kernels::matmul(&ins[0].data, &ins[2].data, k, m, n, true, false);
    Ok(vec![da, db])
}

fn relu_kernel(ins: &[&Tensor], _: &[Type], _: &Attrs) -> Result<Vec<Vec<f64>>, OpError> {
    Ok(vec![ins[0].data.iter().map(|&x| x.max(0.0)).collect()])
}

fn relu_grad_kernel(ins: &[&Tensor], _: &[Type], _: &Attrs) -> Result<Vec<Vec<f64>>, OpError> {
    Ok(vec![ins[0]
        .data
        .iter()
        .zip(&ins[1].data)
        .map(|(&x, &dy)| if x > 0.0 { dy } else { 0.0 })
        .collect()])
}

fn zip_broadcast(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    match (a.numel(), b.numel()) {
        (_, 1) if b.rank() == 0 => a.data.iter().map(|&x| f(x, b.data[0])).collect(),
        (1, _) if a.rank() == 0 => b.data.iter().map(|&y| f(a.data[0], y)).collect(),
        _ => a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    }
}

fn add_kernel(ins: &[&Tensor], _: &[Type], _: &Attrs) -> Result<Vec<Vec<f64>>, OpError> {
    Ok(vec![zip_broadcast(ins[0], ins[1], |x, y| x + y)])
}

fn sub_kernel(ins: &[&Tensor], _: &[Type], _: &Attrs) -> Result<Vec<Vec<f64>>, OpError> {
    Ok(vec![zip_broadcast(ins[0], ins[1], |x, y| x - y)])
}

fn mul_kernel(ins: &[&Tensor], _: &[Type], _: &Attrs) -> Result<Vec<Vec<f64>>, OpError> {
    Ok(vec![zip_broadcast(ins[0], ins[1], |x, y| x * y)])
}

fn sgd_kernel(ins: &[&Tensor], _: &[Type], attrs: &Attrs) -> Result<Vec<Vec<f64>>, OpError> {
    let lr = attrs.float("lr").unwrap_or(0.0);
    Ok(vec![ins[0].data.iter().zip(&ins[1].data).map(|(&w, &g)| w - lr * g).collect()])
}

fn transpose_kernel(ins: &[&Tensor], _: &[Type], attrs: &Attrs) -> Result<Vec<Vec<f64>>, OpError> {
    let perm = perm_attr(attrs, ins[0].rank())?;
    Ok(vec![kernels::transpose(&ins[0].data, &ins[0].shape, &perm)])
}

fn split_kernel(ins: &[&Tensor], outs: &[Type], attrs: &Attrs) -> Result<Vec<Vec<f64>>, OpError> {
    let axis = axis_attr(attrs, ins[0].rank())?;
    Ok(kernels::split(&ins[0].data, &ins[0].shape, axis, outs.len()))
}

fn concat_tensors(ins: &[&Tensor], axis: usize) -> Vec<f64> {
    let parts: Vec<(&[f64], &[usize])> = ins.iter().map(|t| (t.data.as_slice(), t.shape.as_slice())).collect();
    kernels::concat(&parts, axis)
}

fn concat_kernel(ins: &[&Tensor], _: &[Type], attrs: &Attrs) -> Result<Vec<Vec<f64>>, OpError> {
    Ok(vec![concat_tensors(ins, axis_attr(attrs, ins[0].rank())?)])
}

/// Mean squared error.
fn loss_kernel(ins: &[&Tensor], _: &[Type], _: &Attrs) -> Result<Vec<Vec<f64>>, OpError> {
    let n = ins[0].numel().max(1) as f64;
    let s: f64 = ins[0].data.iter().zip(&ins[1].data).map(|(p, y)| (p - y) * (p - y)).sum();
    Ok(vec![vec![s / n]])
}

/// `2 (p - y) / n`, where `n` defaults to the element count of `p`.
fn loss_grad_kernel(ins: &[&Tensor], _: &[Type], attrs: &Attrs) -> Result<Vec<Vec<f64>>, OpError> {
    let n = attrs.int("n").map(|n| n as f64).unwrap_or(ins[0].numel() as f64);
    Ok(vec![ins[0].data.iter().zip(&ins[1].data).map(|(p, y)| 2.0 * (p - y) / n).collect()])
}

fn identity_kernel(ins: &[&Tensor], _: &[Type], _: &Attrs) -> Result<Vec<Vec<f64>>, OpError> {
    Ok(vec![ins[0].data.clone()])
}

fn send_kernel(ins: &[&Tensor], _: &[Type], _: &Attrs) -> Result<Vec<Vec<f64>>, OpError> {
    Ok(vec![ins[0].data.clone()])
}

fn broadcast_kernel(ins: &[&Tensor], outs: &[Type], _: &Attrs) -> Result<Vec<Vec<f64>>, OpError> {
    Ok(vec![ins[0].data.clone(); outs.len()])
}

fn scatter_kernel(ins: &[&Tensor], outs: &[Type], attrs: &Attrs) -> Result<Vec<Vec<f64>>, OpError> {
    let axis = axis_attr(attrs, ins[0].rank())?;
    Ok(kernels::split(&ins[0].data, &ins[0].shape, axis, outs.len()))
}

fn gather_kernel(ins: &[&Tensor], _: &[Type], attrs: &Attrs) -> Result<Vec<Vec<f64>>, OpError> {
    Ok(vec![concat_tensors(ins, axis_attr(attrs, ins[0].rank())?)])
}

fn elementwise_sum(ins: &[&Tensor]) -> Vec<f64> {
    let mut acc = ins[0].data.clone();
    for t in &ins[1..] {
        acc.iter_mut().zip(&t.data).for_each(|(a, b)| *a += b);
    }
    acc
}

fn allreduce_kernel(ins: &[&Tensor], outs: &[Type], _: &Attrs) -> Result<Vec<Vec<f64>>, OpError> {
    Ok(vec![elementwise_sum(ins); outs.len()])
}

fn reduce_kernel(ins: &[&Tensor], _: &[Type], _: &Attrs) -> Result<Vec<Vec<f64>>, OpError> {
    Ok(vec![elementwise_sum(ins)])
}

fn allgather_kernel(ins: &[&Tensor], outs: &[Type], attrs: &Attrs) -> Result<Vec<Vec<f64>>, OpError> {
    let all = concat_tensors(ins, axis_attr(attrs, ins[0].rank())?);
    Ok(vec![all; outs.len()])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reshape_resolution() {
        assert_eq!(resolve_reshape(256 * 8 * 768, &[-1, 768]).unwrap(), vec![2048, 768]);
        assert!(resolve_reshape(12, &[-1, -1]).is_err());
        assert!(resolve_reshape(12, &[0, 12]).is_err());
        assert!(resolve_reshape(12, &[5, -1]).is_err());
        assert!(resolve_reshape(12, &[3, 5]).is_err());
        assert_eq!(resolve_reshape(12, &[3, 4]).unwrap(), vec![3, 4]);
    }

    #[test]
    fn vocabulary_registered() {
        let r = OpRegistry::with_defaults();
        for op in DEFAULT_OPS {
            assert!(r.contains(op), "{op}");
        }
        assert_eq!(r.op_types().len(), DEFAULT_OPS.len());
    }
}

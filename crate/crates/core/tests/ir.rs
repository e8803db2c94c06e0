use distir::interp::{MixedValue, Tensor};
use distir::ir::{default_registry, validate_module, Arity, CostClass, DeviceId, OpEntry, OpRegistry, Rule, Signature, Type};
use distir::ir::{Attr, Attrs};
use distir::models::shipped_examples;
use distir::text::parse_syntax;
use std::sync::Arc;

fn matmul_entry() -> OpEntry {
    OpEntry::new(
        "MatMul",
        Signature::new(Arity::Exactly(2), Arity::Exactly(1)),
        Arc::new(|_, _| Ok(vec![DeviceId(0)])),
        CostClass::MatMul,
    )
}

#[test]
fn registry_register_and_lookup() {
    let mut r = OpRegistry::empty();
    r.register(matmul_entry()).unwrap();
    assert_eq!(r.lookup("MatMul").unwrap().op_type, "MatMul");
    assert!(r.register(matmul_entry()).is_err());
    assert!(r.lookup("NoSuchOp").is_err());
}

#[test]
fn shipped_programs_validate() {
    for (name, m) in shipped_examples().unwrap() {
        assert!(validate_module(&m, default_registry()).is_empty(), "{name}");
    }
}

fn rules(src: &str) -> Vec<Rule> {
    validate_module(&parse_syntax(src).unwrap(), default_registry()).into_iter().map(|d| d.rule).collect()
}

#[test]
fn use_before_definition_is_one_diagnostic() {
    let r = rules("func @f(%a: F32[2]@0) {\n  %b = Relu(%c)\n  %c = Relu(%a)\n  return %b\n}\n");
    assert_eq!(r, vec![Rule::UseBeforeDef]);
}

#[test]
fn unknown_callee_is_one_diagnostic() {
    let r = rules("func @f(%a: F32[2]@0) {\n  %b = call @foo(%a)\n  return %b\n}\n");
    assert_eq!(r, vec![Rule::UnknownCallee]);
}

fn devices(op: &str, attrs: &Attrs, inputs: &[MixedValue]) -> Vec<DeviceId> {
    let e = default_registry().lookup(op).unwrap();
    let mut d = (e.device_fn)(inputs, attrs).unwrap();
    d.sort();
    d
}

fn on(d: u32) -> MixedValue {
    MixedValue::Abstract(Type::f32([4, 4], d))
}

#[test]
fn device_functions() {
    let send = devices("Send", &Attrs::new().with("device", Attr::Device(DeviceId(2))), &[on(1)]);
    assert_eq!(send, vec![DeviceId(1), DeviceId(2)]);
    assert_eq!(devices("MatMul", &Attrs::new(), &[on(0), on(0)]), vec![DeviceId(0)]);
    let all: Vec<MixedValue> = (0..4).map(on).collect();
    assert_eq!(devices("MPIAllreduce", &Attrs::new(), &all), (0..4).map(DeviceId).collect::<Vec<_>>());
    let concrete = MixedValue::tensor(Tensor::f32(vec![2], vec![1.0, 2.0], 3).unwrap());
    assert_eq!(devices("Relu", &Attrs::new(), &[concrete]), vec![DeviceId(3)]);
}

#[test]
fn collective_inputs_must_be_on_distinct_devices() {
    let e = default_registry().lookup("MPIAllreduce").unwrap();
    assert!((e.device_fn)(&[on(0), on(0)], &Attrs::new()).is_err());
    let mm = default_registry().lookup("MatMul").unwrap();
    assert!((mm.device_fn)(&[on(0), on(1)], &Attrs::new()).is_err());
}

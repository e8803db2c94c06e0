//! The DistIR data model.
//!
//! A module is an ordered list of functions. A function is a straight-line
//! SSA body: parameters, an ordered list of ops and a terminating `return`.
//! Program order is the schedule: ops run in order, and consecutive ops on
//! disjoint device sets run in parallel.

mod attr;
pub mod registry;
mod types;
pub mod validate;

use std::collections::HashMap;

pub use attr::{Attr, AttrKind, Attrs};
pub use registry::{default_registry, Arity, AttrSpec, CostClass, OpEntry, OpRegistry, Signature};
pub use types::{DType, DeviceId, Type};
pub use validate::{validate_function, validate_module, Diagnostic, Rule};

/// Location of a construct in the source text.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SourceSpan {
    pub start: usize,
    pub end: usize,
    pub line: usize,
    pub column: usize,
}

impl std::fmt::Display for SourceSpan {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}", self.line, self.column)
    }
}

/// Index of a value inside its function.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ValueId(pub u32);

impl ValueId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Debug)]
pub struct Value {
    pub name: String,
    pub ty: Option<Type>,
    pub span: Option<SourceSpan>,
}

impl PartialEq for Value {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name && self.ty == other.ty
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum OpKind {
    Primitive(String),
    Call(String),
    Return,
}

#[derive(Clone, Debug)]
pub struct Op {
    pub kind: OpKind,
    pub inputs: Vec<ValueId>,
    pub outputs: Vec<ValueId>,
    pub attrs: Attrs,
    pub span: Option<SourceSpan>,
}

impl PartialEq for Op {
    fn eq(&self, other: &Self) -> bool {
        self.kind == other.kind
            && self.inputs == other.inputs
            && self.outputs == other.outputs
            && self.attrs == other.attrs
    }
}

impl Op {
    /// The op type of a primitive, the callee of a call, or `"return"`.
    pub fn name(&self) -> &str {
        match &self.kind {
            OpKind::Primitive(t) | OpKind::Call(t) => t,
            OpKind::Return => "return",
        }
    }

    pub fn op_type(&self) -> Option<&str> {
        match &self.kind {
            OpKind::Primitive(t) => Some(t),
            _ => None,
        }
    }

    pub fn callee(&self) -> Option<&str> {
        match &self.kind {
            OpKind::Call(c) => Some(c),
            _ => None,
        }
    }

    pub fn is_return(&self) -> bool {
        self.kind == OpKind::Return
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Function {
    pub name: String,
    pub attrs: Attrs,
    pub values: Vec<Value>,
    pub params: Vec<ValueId>,
    /// Body, terminated by a single return op.
    pub ops: Vec<Op>,
    pub span: Option<SourceSpan>,
}

impl Function {
    pub fn value(&self, id: ValueId) -> &Value {
        &self.values[id.index()]
    }

    pub fn value_name(&self, id: ValueId) -> &str {
        &self.values[id.index()].name
    }

    pub fn find_value(&self, name: &str) -> Option<ValueId> {
        self.values
            .iter()
            .position(|v| v.name == name)
            .map(|i| ValueId(i as u32))
    }

    pub fn returns(&self) -> &[ValueId] {
        match self.ops.last() {
            Some(op) if op.is_return() => &op.inputs,
            _ => &[],
        }
    }

    /// Ops other than the terminating return.
    pub fn body(&self) -> &[Op] {
        match self.ops.last() {
            Some(op) if op.is_return() => &self.ops[..self.ops.len() - 1],
            _ => &self.ops,
        }
    }

    pub fn param_types(&self) -> Option<Vec<Type>> {
        self.params.iter().map(|p| self.value(*p).ty.clone()).collect()
    }

    /// Global batch size, if the builder recorded one.
    pub fn batch_size(&self) -> Option<u64> {
        self.attrs.int("batch").and_then(|b| u64::try_from(b).ok())
    }

    /// Drops every value type except on parameters.
    pub fn clear_inferred_types(&mut self) {
        let params: std::collections::HashSet<_> = self.params.iter().copied().collect();
        for (i, v) in self.values.iter_mut().enumerate() {
            if !params.contains(&ValueId(i as u32)) {
                v.ty = None;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IrModule {
    pub functions: Vec<Function>,
    pub entry: String,
}

impl IrModule {
    /// A module whose entry is the last function, the convention used by the
    /// text format.
    pub fn new(functions: Vec<Function>) -> IrModule {
        let entry = functions.last().map(|f| f.name.clone()).unwrap_or_default();
        IrModule { functions, entry }
    }

    pub fn function(&self, name: &str) -> Option<&Function> {
        self.functions.iter().find(|f| f.name == name)
    }

    pub fn function_mut(&mut self, name: &str) -> Option<&mut Function> {
        self.functions.iter_mut().find(|f| f.name == name)
    }

    pub fn entry_function(&self) -> Option<&Function> {
        self.function(&self.entry)
    }
}

/// Incremental, single-threaded construction of a [`Function`].
///
/// Requested value names are made unique by suffixing `_<n>`.
pub struct FunctionBuilder {
    name: String,
    attrs: Attrs,
    values: Vec<Value>,
    params: Vec<ValueId>,
    ops: Vec<Op>,
    taken: HashMap<String, usize>,
}

impl FunctionBuilder {
    pub fn new(name: impl Into<String>) -> FunctionBuilder {
        FunctionBuilder {
            name: name.into(),
            attrs: Attrs::new(),
            values: Vec::new(),
            params: Vec::new(),
            ops: Vec::new(),
            taken: HashMap::new(),
        }
    }

    pub fn set_attr(&mut self, key: &str, value: Attr) {
        self.attrs.insert(key, value);
    }

    fn fresh(&mut self, name: &str, ty: Option<Type>) -> ValueId {
        let mut unique = name.to_string();
        if let Some(&start) = self.taken.get(name) {
            let mut n = start;
            loop {
                n += 1;
                unique = format!("{name}_{n}");
                if !self.taken.contains_key(&unique) {
                    break;
                }
            }
            self.taken.insert(name.to_string(), n);
        }
        self.taken.insert(unique.clone(), 0);
        let id = ValueId(self.values.len() as u32);
        self.values.push(Value {
            name: unique,
            ty,
            span: None,
        });
        id
    }

    pub fn param(&mut self, name: &str, ty: Type) -> ValueId {
        let id = self.fresh(name, Some(ty));
        self.params.push(id);
        id
    }

    pub fn untyped_param(&mut self, name: &str) -> ValueId {
        let id = self.fresh(name, None);
        self.params.push(id);
        id
    }

    pub fn op(&mut self, op_type: &str, attrs: Attrs, inputs: &[ValueId], outputs: &[&str]) -> Vec<ValueId> {
        let outs: Vec<ValueId> = outputs.iter().map(|n| self.fresh(n, None)).collect();
        self.ops.push(Op {
            kind: OpKind::Primitive(op_type.to_string()),
            inputs: inputs.to_vec(),
            outputs: outs.clone(),
            attrs,
            span: None,
        });
        outs
    }

    /// Single-output primitive.
    pub fn op1(&mut self, op_type: &str, attrs: Attrs, inputs: &[ValueId], output: &str) -> ValueId {
        self.op(op_type, attrs, inputs, &[output])[0]
    }

    pub fn call(&mut self, callee: &str, inputs: &[ValueId], outputs: &[&str]) -> Vec<ValueId> {
        let outs: Vec<ValueId> = outputs.iter().map(|n| self.fresh(n, None)).collect();
        self.ops.push(Op {
            kind: OpKind::Call(callee.to_string()),
            inputs: inputs.to_vec(),
            outputs: outs.clone(),
            attrs: Attrs::new(),
            span: None,
        });
        outs
    }

    pub fn name_of(&self, id: ValueId) -> &str {
        &self.values[id.index()].name
    }

    pub fn num_ops(&self) -> usize {
        self.ops.len()
    }

    pub fn ret(mut self, values: &[ValueId]) -> Function {
        self.ops.push(Op {
            kind: OpKind::Return,
            inputs: values.to_vec(),
            outputs: Vec::new(),
            attrs: Attrs::new(),
            span: None,
        });
        Function {
            name: self.name,
            attrs: self.attrs,
            values: self.values,
            params: self.params,
            ops: self.ops,
            span: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builder_uniquifies_names() {
        let mut b = FunctionBuilder::new("f");
        let x = b.param("x", Type::f32([2], 0));
        let a = b.op1("Relu", Attrs::new(), &[x], "a");
        let a2 = b.op1("Relu", Attrs::new(), &[a], "a");
        let f = b.ret(&[a2]);
        assert_eq!(f.value_name(a), "a");
        assert_eq!(f.value_name(a2), "a_1");
        assert_eq!(f.returns(), &[a2]);
        assert_eq!(f.body().len(), 2);
    }
}

//! The op registry: signatures, device functions, abstract/concrete
//! implementations and cost classes for every primitive op type.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use super::{AttrKind, Attrs, DeviceId};
use crate::interp::{MixedValue, OpError};

pub type ImplFn = Arc<dyn Fn(&[MixedValue], &Attrs) -> Result<Vec<MixedValue>, OpError> + Send + Sync>;
/// Returns the sorted, duplicate-free set of devices an op occupies.
pub type DeviceFn = Arc<dyn Fn(&[MixedValue], &Attrs) -> Result<Vec<DeviceId>, OpError> + Send + Sync>;
pub type ArityCheck = fn(usize, usize, &Attrs) -> Result<(), String>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arity {
    Exactly(usize),
    AtLeast(usize),
    Between(usize, usize),
}

impl Arity {
    pub fn accepts(self, n: usize) -> bool {
        match self {
            Arity::Exactly(k) => n == k,
            Arity::AtLeast(k) => n >= k,
            Arity::Between(lo, hi) => (lo..=hi).contains(&n),
        }
    }
}

impl fmt::Display for Arity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Arity::Exactly(k) => write!(f, "{k}"),
            Arity::AtLeast(k) => write!(f, "at least {k}"),
            Arity::Between(lo, hi) => write!(f, "{lo}..={hi}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttrSpec {
    pub name: String,
    pub kind: AttrKind,
    pub required: bool,
}

impl AttrSpec {
    pub fn required(name: &str, kind: AttrKind) -> AttrSpec {
        AttrSpec {
            name: name.to_string(),
            kind,
            required: true,
        }
    }

    pub fn optional(name: &str, kind: AttrKind) -> AttrSpec {
        AttrSpec {
            name: name.to_string(),
            kind,
            required: false,
        }
    }
}

#[derive(Clone)]
pub struct Signature {
    pub inputs: Arity,
    pub outputs: Arity,
    pub attrs: Vec<AttrSpec>,
    /// Extra arity rule depending on attributes (e.g. `Split` output count).
    pub check: Option<ArityCheck>,
}

impl Signature {
    pub fn new(inputs: Arity, outputs: Arity) -> Signature {
        Signature {
            inputs,
            outputs,
            attrs: Vec::new(),
            check: None,
        }
    }

    pub fn attr(mut self, spec: AttrSpec) -> Signature {
        self.attrs.push(spec);
        self
    }

    pub fn check(mut self, check: ArityCheck) -> Signature {
        self.check = Some(check);
        self
    }
}

/// Input kind required by one slot of an implementation pattern.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Concrete,
    Abstract,
    Any,
}

impl Kind {
    pub fn matches(self, v: &MixedValue) -> bool {
        match self {
            Kind::Any => true,
            Kind::Concrete => v.is_concrete(),
            Kind::Abstract => !v.is_concrete(),
        }
    }
}

/// Per-input kind requirements. Slots past `fixed` use `rest`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pattern {
    pub fixed: Vec<Kind>,
    pub rest: Kind,
}

impl Pattern {
    pub fn all(kind: Kind) -> Pattern {
        Pattern {
            fixed: Vec::new(),
            rest: kind,
        }
    }

    pub fn slots(fixed: &[Kind]) -> Pattern {
        Pattern {
            fixed: fixed.to_vec(),
            rest: Kind::Any,
        }
    }

    fn slot(&self, i: usize) -> Kind {
        self.fixed.get(i).copied().unwrap_or(self.rest)
    }

    pub fn matches(&self, inputs: &[MixedValue]) -> bool {
        inputs.iter().enumerate().all(|(i, v)| self.slot(i).matches(v))
    }

    /// Number of constrained slots over the given input count.
    pub fn specificity(&self, n_inputs: usize) -> usize {
        (0..n_inputs).filter(|&i| self.slot(i) != Kind::Any).count()
    }

    /// True if the pattern only accepts abstract inputs.
    pub fn is_pure_abstract(&self) -> bool {
        self.rest == Kind::Abstract && self.fixed.iter().all(|k| *k == Kind::Abstract)
    }
}

#[derive(Clone)]
pub struct Impl {
    pub pattern: Pattern,
    pub func: ImplFn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CollectiveKind {
    Allreduce,
    Allgather,
    Broadcast,
    Scatter,
    Gather,
    Reduce,
}

/// Which analytic cost formula an op uses and which regression features it
/// exposes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CostClass {
    /// One flop per element of the largest operand.
    Elementwise,
    /// `(m,k) x (k,n)`: `2mkn` flops.
    MatMul,
    /// Two matmuls of the forward shape.
    MatMulGrad,
    /// Launch overhead only.
    Metadata,
    Send,
    Collective(CollectiveKind),
}

#[derive(Clone)]
pub struct OpEntry {
    pub op_type: String,
    pub signature: Signature,
    pub device_fn: DeviceFn,
    /// Candidate implementations in registration order.
    pub impls: Vec<Impl>,
    pub cost_class: CostClass,
}

impl OpEntry {
    pub fn new(op_type: &str, signature: Signature, device_fn: DeviceFn, cost_class: CostClass) -> OpEntry {
        OpEntry {
            op_type: op_type.to_string(),
            signature,
            device_fn,
            impls: Vec::new(),
            cost_class,
        }
    }

    pub fn with_impl(mut self, pattern: Pattern, func: ImplFn) -> OpEntry {
        self.impls.push(Impl { pattern, func });
        self
    }

    pub fn has_concrete_impl(&self) -> bool {
        self.impls.iter().any(|i| i.pattern.rest == Kind::Concrete)
    }
}

impl fmt::Debug for OpEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OpEntry")
            .field("op_type", &self.op_type)
            .field("impls", &self.impls.len())
            .field("cost_class", &self.cost_class)
            .finish()
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RegistryError {
    #[error("op type `{0}` is already registered")]
    Duplicate(String),
    #[error("op type `{0}` is not registered")]
    NotFound(String),
}

#[derive(Clone, Default)]
pub struct OpRegistry {
    entries: HashMap<String, Arc<OpEntry>>,
}

impl OpRegistry {
    pub fn empty() -> OpRegistry {
        OpRegistry::default()
    }

    /// Registry populated with the built-in op vocabulary.
    pub fn with_defaults() -> OpRegistry {
        let mut r = OpRegistry::empty();
        crate::ops::register_defaults(&mut r);
        r
    }

    pub fn register(&mut self, entry: OpEntry) -> Result<(), RegistryError> {
        if self.entries.contains_key(&entry.op_type) {
            return Err(RegistryError::Duplicate(entry.op_type));
        }
        self.entries.insert(entry.op_type.clone(), Arc::new(entry));
        Ok(())
    }

    pub fn lookup(&self, op_type: &str) -> Result<&OpEntry, RegistryError> {
        self.entries
            .get(op_type)
            .map(|e| e.as_ref())
            .ok_or_else(|| RegistryError::NotFound(op_type.to_string()))
    }

    pub fn contains(&self, op_type: &str) -> bool {
        self.entries.contains_key(op_type)
    }

    pub fn op_types(&self) -> Vec<&str> {
        let mut v: Vec<&str> = self.entries.keys().map(String::as_str).collect();
        v.sort_unstable();
        v
    }
}

impl fmt::Debug for OpRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OpRegistry").field("ops", &self.op_types()).finish()
    }
}

/// The shared default registry.
pub fn default_registry() -> &'static OpRegistry {
    static REGISTRY: std::sync::OnceLock<OpRegistry> = std::sync::OnceLock::new();
    REGISTRY.get_or_init(OpRegistry::with_defaults)
}

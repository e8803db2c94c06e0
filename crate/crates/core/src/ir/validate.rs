use std::collections::{HashMap, HashSet};
use std::fmt;

use super::{Function, IrModule, OpKind, OpRegistry, SourceSpan};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Rule {
    DuplicateFunction,
    MissingEntry,
    DuplicateValueName,
    UseBeforeDef,
    Redefinition,
    MissingReturn,
    OpAfterReturn,
    UnknownOp,
    UnknownCallee,
    InputArity,
    OutputArity,
    UnknownAttr,
    MissingAttr,
    AttrKind,
    RecursiveCall,
    UntypedParam,
    CallAttrs,
    /// Inputs violate the op's device function.
    Placement,
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Rule::DuplicateFunction => "duplicate-function",
            Rule::MissingEntry => "missing-entry",
            Rule::DuplicateValueName => "duplicate-value-name",
            Rule::UseBeforeDef => "use-before-def",
            Rule::Redefinition => "redefinition",
            Rule::MissingReturn => "missing-return",
            Rule::OpAfterReturn => "op-after-return",
            Rule::UnknownOp => "unknown-op",
            Rule::UnknownCallee => "unknown-callee",
            Rule::InputArity => "input-arity",
            Rule::OutputArity => "output-arity",
            Rule::UnknownAttr => "unknown-attr",
            Rule::MissingAttr => "missing-attr",
            Rule::AttrKind => "attr-kind",
            Rule::RecursiveCall => "recursive-call",
            Rule::UntypedParam => "untyped-param",
            Rule::CallAttrs => "call-attrs",
            Rule::Placement => "placement",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Diagnostic {
    pub function: String,
    pub op_index: Option<usize>,
    pub rule: Rule,
    pub message: String,
    pub span: Option<SourceSpan>,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(span) = self.span {
            write!(f, "{span}: ")?;
        }
        write!(f, "@{}", self.function)?;
        if let Some(i) = self.op_index {
            write!(f, " op {i}")?;
        }
        write!(f, ": [{}] {}", self.rule, self.message)
    }
}

/// Checks the SSA, terminator, arity and attribute rules of one function.
/// Calls are checked against `module` when given.
pub fn validate_function(f: &Function, module: Option<&IrModule>, registry: &OpRegistry) -> Vec<Diagnostic> {
    let mut diags = Vec::new();
    let mut push = |op_index: Option<usize>, rule: Rule, message: String, span: Option<SourceSpan>| {
        diags.push(Diagnostic {
            function: f.name.clone(),
            op_index,
            rule,
            message,
            span,
        });
    };

    let mut names = HashSet::new();
    for v in &f.values {
        if !names.insert(v.name.as_str()) {
            push(None, Rule::DuplicateValueName, format!("value %{} declared twice", v.name), v.span);
        }
    }

    let mut defined = vec![false; f.values.len()];
    for &p in &f.params {
        if defined[p.index()] {
            push(None, Rule::Redefinition, format!("parameter %{} repeated", f.value_name(p)), None);
        }
        defined[p.index()] = true;
    }

    let mut seen_return = false;
    for (i, op) in f.ops.iter().enumerate() {
        if seen_return {
            push(Some(i), Rule::OpAfterReturn, format!("`{}` follows the return statement", op.name()), op.span);
        }
        for &v in &op.inputs {
            if !defined[v.index()] {
                push(Some(i), Rule::UseBeforeDef, format!("%{} used before definition", f.value_name(v)), op.span);
            }
        }
        for &v in &op.outputs {
            if defined[v.index()] {
                push(Some(i), Rule::Redefinition, format!("%{} defined more than once", f.value_name(v)), op.span);
            }
            defined[v.index()] = true;
        }
        match &op.kind {
            OpKind::Return => {
                if seen_return {
                    continue;
                }
                seen_return = true;
            }
            OpKind::Primitive(t) => match registry.lookup(t) {
                Err(_) => push(Some(i), Rule::UnknownOp, format!("unknown op type `{t}`"), op.span),
                Ok(entry) => {
                    let sig = &entry.signature;
                    if !sig.inputs.accepts(op.inputs.len()) {
                        push(
                            Some(i),
                            Rule::InputArity,
                            format!("`{t}` takes {} inputs, got {}", sig.inputs, op.inputs.len()),
                            op.span,
                        );
                    }
                    if !sig.outputs.accepts(op.outputs.len()) {
                        push(
                            Some(i),
                            Rule::OutputArity,
                            format!("`{t}` produces {} outputs, got {}", sig.outputs, op.outputs.len()),
                            op.span,
                        );
                    }
                    for (key, value) in op.attrs.iter() {
                        match sig.attrs.iter().find(|s| s.name == key) {
                            None => push(Some(i), Rule::UnknownAttr, format!("`{t}` has no attribute `{key}`"), op.span),
                            Some(spec) if spec.kind != value.kind() => push(
                                Some(i),
                                Rule::AttrKind,
                                format!("attribute `{key}` of `{t}` must be {}, got {}", spec.kind, value.kind()),
                                op.span,
                            ),
                            Some(_) => {}
                        }
                    }
                    for spec in sig.attrs.iter().filter(|s| s.required) {
                        if !op.attrs.contains(&spec.name) {
                            push(Some(i), Rule::MissingAttr, format!("`{t}` requires attribute `{}`", spec.name), op.span);
                        }
                    }
                    if let Some(check) = sig.check {
                        if let Err(msg) = check(op.inputs.len(), op.outputs.len(), &op.attrs) {
                            push(Some(i), Rule::OutputArity, format!("`{t}`: {msg}"), op.span);
                        }
                    }
                }
            },
            OpKind::Call(callee) => {
                if !op.attrs.is_empty() {
                    push(Some(i), Rule::CallAttrs, "calls take no attributes".to_string(), op.span);
                }
                let Some(module) = module else { continue };
                match module.function(callee) {
                    None => push(Some(i), Rule::UnknownCallee, format!("call to undefined @{callee}"), op.span),
                    Some(g) => {
                        if g.params.len() != op.inputs.len() {
                            push(
                                Some(i),
                                Rule::InputArity,
                                format!("@{callee} takes {} arguments, got {}", g.params.len(), op.inputs.len()),
                                op.span,
                            );
                        }
                        if g.returns().len() != op.outputs.len() {
                            push(
                                Some(i),
                                Rule::OutputArity,
                                format!("@{callee} returns {} values, got {}", g.returns().len(), op.outputs.len()),
                                op.span,
                            );
                        }
                    }
                }
            }
        }
    }
    if !seen_return {
        push(None, Rule::MissingReturn, "function body does not end with return".to_string(), f.span);
    }
    diags
}

/// Module-level validation: every function, unique names, the entry, typed
/// entry parameters and an acyclic call graph.
pub fn validate_module(m: &IrModule, registry: &OpRegistry) -> Vec<Diagnostic> {
    let mut diags = Vec::new();
    let mut seen = HashSet::new();
    for f in &m.functions {
        if !seen.insert(f.name.as_str()) {
            diags.push(Diagnostic {
                function: f.name.clone(),
                op_index: None,
                rule: Rule::DuplicateFunction,
                message: format!("function @{} defined twice", f.name),
                span: f.span,
            });
        }
        diags.extend(validate_function(f, Some(m), registry));
    }
    match m.entry_function() {
        None => diags.push(Diagnostic {
            function: m.entry.clone(),
            op_index: None,
            rule: Rule::MissingEntry,
            message: format!("entry function @{} not found", m.entry),
            span: None,
        }),
        Some(entry) => {
            for &p in &entry.params {
                if entry.value(p).ty.is_none() {
                    diags.push(Diagnostic {
                        function: entry.name.clone(),
                        op_index: None,
                        rule: Rule::UntypedParam,
                        message: format!("entry parameter %{} needs a type", entry.value_name(p)),
                        span: entry.value(p).span,
                    });
                }
            }
        }
    }
    diags.extend(check_call_graph(m));
    diags
}

fn check_call_graph(m: &IrModule) -> Vec<Diagnostic> {
    let edges: HashMap<&str, Vec<&str>> = m
        .functions
        .iter()
        .map(|f| (f.name.as_str(), f.ops.iter().filter_map(|op| op.callee()).collect()))
        .collect();
    // 0 = unvisited, 1 = on stack, 2 = done
    let mut state: HashMap<&str, u8> = HashMap::new();
    let mut diags = Vec::new();
    fn visit<'a>(
        f: &'a str,
        edges: &HashMap<&'a str, Vec<&'a str>>,
        state: &mut HashMap<&'a str, u8>,
        diags: &mut Vec<Diagnostic>,
    ) {
        state.insert(f, 1);
        for &g in edges.get(f).map(Vec::as_slice).unwrap_or(&[]) {
            match state.get(g).copied().unwrap_or(0) {
                0 if edges.contains_key(g) => visit(g, edges, state, diags),
                1 => diags.push(Diagnostic {
                    function: f.to_string(),
                    op_index: None,
                    rule: Rule::RecursiveCall,
                    message: format!("call cycle through @{g}"),
                    span: None,
                }),
                _ => {}
            }
        }
        state.insert(f, 2);
    }
    for f in &m.functions {
        if state.get(f.name.as_str()).copied().unwrap_or(0) == 0 {
            visit(&f.name, &edges, &mut state, &mut diags);
        }
    }
    diags
}

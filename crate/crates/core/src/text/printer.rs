use std::fmt::Write;

use crate::ir::{Function, IrModule, OpKind, ValueId};

pub fn print_module(m: &IrModule) -> String {
    let mut out = String::new();
    for (i, f) in m.functions.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        print_function_into(f, &mut out);
    }
    out
}

pub fn print_function(f: &Function) -> String {
    let mut out = String::new();
    print_function_into(f, &mut out);
    out
}

fn value_decl(f: &Function, id: ValueId, out: &mut String) {
    let v = f.value(id);
    out.push('%');
    out.push_str(&v.name);
    if let Some(t) = &v.ty {
        let _ = write!(out, ": {t}");
    }
}

fn value_list(f: &Function, ids: &[ValueId], out: &mut String) {
    for (i, &v) in ids.iter().enumerate() {
        if i > 0 {
            out.push_str(", ");
        }
        out.push('%');
        out.push_str(f.value_name(v));
    }
}

fn print_function_into(f: &Function, out: &mut String) {
    let _ = write!(out, "func @{}", f.name);
    if !f.attrs.is_empty() {
        let _ = write!(out, "{}", f.attrs);
    }
    out.push('(');
    for (i, &p) in f.params.iter().enumerate() {
        if i > 0 {
            out.push_str(", ");
        }
        value_decl(f, p, out);
    }
    out.push_str(") {\n");
    for op in &f.ops {
        out.push_str("  ");
        if op.is_return() {
            out.push_str("return");
            if !op.inputs.is_empty() {
                out.push(' ');
                value_list(f, &op.inputs, out);
            }
            out.push('\n');
            continue;
        }
        if !op.outputs.is_empty() {
            for (i, &v) in op.outputs.iter().enumerate() {
                if i > 0 {
                    out.push_str(", ");
                }
                value_decl(f, v, out);
            }
            out.push_str(" = ");
        }
        match &op.kind {
            OpKind::Call(callee) => {
                let _ = write!(out, "call @{callee}");
            }
            OpKind::Primitive(t) => {
                out.push_str(t);
                if !op.attrs.is_empty() {
                    let _ = write!(out, "{}", op.attrs);
                }
            }
            OpKind::Return => unreachable!(),
        }
        out.push('(');
        value_list(f, &op.inputs, out);
        out.push_str(")\n");
    }
    out.push_str("}\n");
}

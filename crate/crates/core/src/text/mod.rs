//! The `.dir` text format.
//!
//! ```text
//! func @dense(%w, %x) {
//!   %h = Gemm(%x, %w)
//!   %a = Relu(%h)
//!   return %a, %h
//! }
//! ```
//!
//! Types fold the device in (`F32[128,64]@0`). Parameters of the entry
//! function (the last one) must be typed; types elsewhere are optional and
//! printed only when present. Functions may carry an attribute block after
//! their name, e.g. `func @mlp{batch=32}(...)`.

mod lexer;
mod parser;
mod printer;

use std::fmt;

use thiserror::Error;

use crate::ir::{default_registry, validate_module, Diagnostic, IrModule, OpRegistry, SourceSpan};

pub use parser::{parse_syntax, parse_type};
pub use printer::{print_function, print_module};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyntaxError {
    pub message: String,
    pub span: SourceSpan,
}

impl fmt::Display for SyntaxError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: syntax error: {}", self.span, self.message)
    }
}

impl std::error::Error for SyntaxError {}

#[derive(Clone, Debug, Error, PartialEq)]
pub enum TextError {
    #[error("{0}")]
    Syntax(#[from] SyntaxError),
    #[error("{}", join_diagnostics(.0))]
    Invalid(Vec<Diagnostic>),
    #[error("invalid UTF-8 at byte {0}")]
    Utf8(usize),
}

fn join_diagnostics(d: &[Diagnostic]) -> String {
    d.iter().map(ToString::to_string).collect::<Vec<_>>().join("\n")
}

impl TextError {
    /// Every message of the error, one per line item.
    pub fn diagnostics(&self) -> Vec<String> {
        match self {
            TextError::Invalid(d) => d.iter().map(ToString::to_string).collect(),
            other => vec![other.to_string()],
        }
    }
}

/// Parses and validates against the default registry.
pub fn parse_module(text: &str) -> Result<IrModule, TextError> {
    parse_module_with(text, default_registry())
}

pub fn parse_module_with(text: &str, registry: &OpRegistry) -> Result<IrModule, TextError> {
    let m = parse_syntax(text)?;
    let diags = validate_module(&m, registry);
    if diags.is_empty() {
        Ok(m)
    } else {
        Err(TextError::Invalid(diags))
    }
}

/// Entry point for raw bytes, e.g. file contents or fuzz input.
pub fn parse_module_bytes(bytes: &[u8]) -> Result<IrModule, TextError> {
    match std::str::from_utf8(bytes) {
        Ok(s) => parse_module(s),
        Err(e) => Err(TextError::Utf8(e.valid_up_to())),
    }
}

use std::collections::HashMap;

use crate::ir::{Attr, Attrs, DType, DeviceId, Function, IrModule, Op, OpKind, SourceSpan, Type, Value, ValueId};

use super::lexer::{tokenize, Tok, Token};
use super::SyntaxError;

struct Parser {
    toks: Vec<Token>,
    pos: usize,
}

/// Per-function value table; a name maps to one value however often it is
/// defined, so that validation can report redefinitions.
struct Scope {
    values: Vec<Value>,
    by_name: HashMap<String, ValueId>,
}

impl Scope {
    fn get_or_insert(&mut self, name: &str, span: SourceSpan) -> ValueId {
        if let Some(&id) = self.by_name.get(name) {
            return id;
        }
        let id = ValueId(self.values.len() as u32);
        self.values.push(Value {
            name: name.to_string(),
            ty: None,
            span: Some(span),
        });
        self.by_name.insert(name.to_string(), id);
        id
    }
}

type PResult<T> = Result<T, SyntaxError>;

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].tok
    }

    fn span(&self) -> SourceSpan {
        self.toks[self.pos].span
    }

    fn next(&mut self) -> Token {
        let t = self.toks[self.pos].clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn error<T>(&self, expected: &str) -> PResult<T> {
        Err(SyntaxError {
            message: format!("expected {expected}, found {}", self.peek().describe()),
            span: self.span(),
        })
    }

    fn punct(&mut self, c: char) -> PResult<SourceSpan> {
        if *self.peek() == Tok::Punct(c) {
            Ok(self.next().span)
        } else {
            self.error(&format!("`{c}`"))
        }
    }

    fn eat_punct(&mut self, c: char) -> bool {
        if *self.peek() == Tok::Punct(c) {
            self.next();
            true
        } else {
            false
        }
    }

    fn keyword(&mut self, kw: &str) -> PResult<SourceSpan> {
        match self.peek() {
            Tok::Ident(s) if s == kw => Ok(self.next().span),
            _ => self.error(&format!("`{kw}`")),
        }
    }

    fn ident(&mut self) -> PResult<String> {
        match self.peek().clone() {
            Tok::Ident(s) => {
                self.next();
                Ok(s)
            }
            _ => self.error("an identifier"),
        }
    }

    fn global(&mut self) -> PResult<String> {
        match self.peek().clone() {
            Tok::Global(s) if !s.starts_with(|c: char| c.is_ascii_digit()) => {
                self.next();
                Ok(s)
            }
            _ => self.error("a function name `@name`"),
        }
    }

    fn local(&mut self) -> PResult<(String, SourceSpan)> {
        match self.peek().clone() {
            Tok::Local(s) => {
                let span = self.next().span;
                Ok((s, span))
            }
            _ => self.error("a value `%name`"),
        }
    }

    fn device(&mut self) -> PResult<DeviceId> {
        match self.peek().clone() {
            Tok::Global(s) => match s.parse::<u32>() {
                Ok(d) => {
                    self.next();
                    Ok(DeviceId(d))
                }
                Err(_) => self.error("a device `@N`"),
            },
            _ => self.error("a device `@N`"),
        }
    }

    fn uint(&mut self) -> PResult<usize> {
        match self.peek().clone() {
            Tok::Int(v) if v >= 0 => {
                self.next();
                Ok(v as usize)
            }
            _ => self.error("a non-negative integer"),
        }
    }

    fn module(&mut self) -> PResult<IrModule> {
        let mut functions = Vec::new();
        while *self.peek() != Tok::Eof {
            functions.push(self.function()?);
        }
        if functions.is_empty() {
            return self.error("`func`");
        }
        Ok(IrModule::new(functions))
    }

    fn function(&mut self) -> PResult<Function> {
        let start = self.keyword("func")?;
        let name = self.global()?;
        let attrs = if *self.peek() == Tok::Punct('{') {
            self.attrblock()?
        } else {
            Attrs::new()
        };
        let mut scope = Scope {
            values: Vec::new(),
            by_name: HashMap::new(),
        };
        let mut params = Vec::new();
        self.punct('(')?;
        if !self.eat_punct(')') {
            loop {
                let (pname, span) = self.local()?;
                let id = scope.get_or_insert(&pname, span);
                if self.eat_punct(':') {
                    scope.values[id.index()].ty = Some(self.ty()?);
                }
                params.push(id);
                if self.eat_punct(')') {
                    break;
                }
                self.punct(',')?;
            }
        }
        self.punct('{')?;
        let mut ops = Vec::new();
        while !self.eat_punct('}') {
            ops.push(self.stmt(&mut scope)?);
        }
        let end = self.toks[self.pos.saturating_sub(1)].span.end;
        Ok(Function {
            name,
            attrs,
            values: scope.values,
            params,
            ops,
            span: Some(SourceSpan { end, ..start }),
        })
    }

    fn stmt(&mut self, scope: &mut Scope) -> PResult<Op> {
        let start = self.span();
        if let Tok::Ident(kw) = self.peek() {
            if kw == "return" {
                self.next();
                let mut inputs = Vec::new();
                if let Tok::Local(_) = self.peek() {
                    inputs = self.valuelist(scope)?;
                }
                return Ok(Op {
                    kind: OpKind::Return,
                    inputs,
                    outputs: Vec::new(),
                    attrs: Attrs::new(),
                    span: Some(SourceSpan {
                        end: self.toks[self.pos - 1].span.end,
                        ..start
                    }),
                });
            }
        }
        let mut outputs = Vec::new();
        let mut eq = None;
        if let Tok::Local(_) = self.peek() {
            loop {
                let (name, span) = self.local()?;
                let id = scope.get_or_insert(&name, span);
                if self.eat_punct(':') {
                    scope.values[id.index()].ty = Some(self.ty()?);
                }
                outputs.push(id);
                if !self.eat_punct(',') {
                    break;
                }
            }
            eq = Some(self.punct('=')?);
        }
        let (kind, attrs) = match self.peek().clone() {
            Tok::Ident(kw) if kw == "call" => {
                self.next();
                (OpKind::Call(self.global()?), Attrs::new())
            }
            Tok::Ident(op) if op != "return" => {
                self.next();
                let attrs = if *self.peek() == Tok::Punct('{') {
                    self.attrblock()?
                } else {
                    Attrs::new()
                };
                (OpKind::Primitive(op), attrs)
            }
            _ => {
                let mut e = self.error::<()>("an op name or `call`").unwrap_err();
                if let Some(span) = eq {
                    e.message = format!("missing right-hand side: {}", e.message);
                    e.span = span;
                }
                return Err(e);
            }
        };
        self.punct('(')?;
        let inputs = if self.eat_punct(')') {
            Vec::new()
        } else {
            let v = self.valuelist(scope)?;
            self.punct(')')?;
            v
        };
        Ok(Op {
            kind,
            inputs,
            outputs,
            attrs,
            span: Some(SourceSpan {
                end: self.toks[self.pos - 1].span.end,
                ..start
            }),
        })
    }

    fn valuelist(&mut self, scope: &mut Scope) -> PResult<Vec<ValueId>> {
        let mut vs = Vec::new();
        loop {
            let (name, span) = self.local()?;
            vs.push(scope.get_or_insert(&name, span));
            if !self.eat_punct(',') {
                return Ok(vs);
            }
        }
    }

    fn attrblock(&mut self) -> PResult<Attrs> {
        self.punct('{')?;
        let mut attrs = Attrs::new();
        loop {
            let span = self.span();
            let key = self.ident()?;
            self.punct('=')?;
            let value = self.literal()?;
            if attrs.insert(key.clone(), value).is_some() {
                return Err(SyntaxError {
                    message: format!("attribute `{key}` given twice"),
                    span,
                });
            }
            if self.eat_punct('}') {
                return Ok(attrs);
            }
            self.punct(',')?;
        }
    }

    fn literal(&mut self) -> PResult<Attr> {
        match self.peek().clone() {
            Tok::Int(v) => {
                self.next();
                Ok(Attr::Int(v))
            }
            Tok::Float(v) => {
                self.next();
                Ok(Attr::Float(v))
            }
            Tok::Str(s) => {
                self.next();
                Ok(Attr::Str(s))
            }
            Tok::Global(_) => self.device().map(Attr::Device),
            Tok::Punct('[') => {
                self.next();
                let mut vs = Vec::new();
                if !self.eat_punct(']') {
                    loop {
                        match self.peek().clone() {
                            Tok::Int(v) => {
                                self.next();
                                vs.push(v);
                            }
                            _ => return self.error("an integer"),
                        }
                        if self.eat_punct(']') {
                            break;
                        }
                        self.punct(',')?;
                    }
                }
                Ok(Attr::IntList(vs))
            }
            _ => self.error("a literal"),
        }
    }

    fn ty(&mut self) -> PResult<Type> {
        let span = self.span();
        let name = self.ident()?;
        if name == "Tuple" {
            self.punct('<')?;
            let mut items = vec![self.ty()?];
            while self.eat_punct(',') {
                items.push(self.ty()?);
            }
            self.punct('>')?;
            return Ok(Type::Tuple(items));
        }
        let Some(dtype) = DType::from_name(&name) else {
            return Err(SyntaxError {
                message: format!("unknown dtype `{name}`"),
                span,
            });
        };
        if self.eat_punct('[') {
            let mut shape = Vec::new();
            if !self.eat_punct(']') {
                loop {
                    shape.push(self.uint()?);
                    if self.eat_punct(']') {
                        break;
                    }
                    self.punct(',')?;
                }
            }
            let device = self.device()?;
            Ok(Type::Tensor { dtype, shape, device })
        } else {
            let device = self.device()?;
            Ok(Type::Scalar { dtype, device })
        }
    }
}

/// Syntax-only parse: no validation.
pub fn parse_syntax(text: &str) -> Result<IrModule, SyntaxError> {
    let toks = tokenize(text)?;
    Parser { toks, pos: 0 }.module()
}

/// Parses a standalone type such as `F32[8,16]@1`.
pub fn parse_type(text: &str) -> Result<Type, SyntaxError> {
    let toks = tokenize(text)?;
    let mut p = Parser { toks, pos: 0 };
    let t = p.ty()?;
    if *p.peek() != Tok::Eof {
        return p.error("end of input");
    }
    Ok(t)
}

use crate::ir::SourceSpan;

use super::SyntaxError;

#[derive(Clone, Debug, PartialEq)]
pub enum Tok {
    Ident(String),
    /// `@name` or `@3`.
    Global(String),
    /// `%name`.
    Local(String),
    Int(i64),
    Float(f64),
    Str(String),
    Punct(char),
    Eof,
}

impl Tok {
    pub fn describe(&self) -> String {
        match self {
            Tok::Ident(s) => format!("`{s}`"),
            Tok::Global(s) => format!("`@{s}`"),
            Tok::Local(s) => format!("`%{s}`"),
            Tok::Int(v) => format!("`{v}`"),
            Tok::Float(v) => format!("`{v:?}`"),
            Tok::Str(_) => "string literal".to_string(),
            Tok::Punct(c) => format!("`{c}`"),
            Tok::Eof => "end of input".to_string(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Token {
    pub tok: Tok,
    pub span: SourceSpan,
}

fn is_name_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_' || c == '.'
}

struct Cursor<'a> {
    src: &'a str,
    pos: usize,
    line: usize,
    col: usize,
}

impl Cursor<'_> {
    fn peek(&self) -> Option<char> {
        self.src[self.pos..].chars().next()
    }

    fn peek2(&self) -> Option<char> {
        let mut it = self.src[self.pos..].chars();
        it.next();
        it.next()
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.peek()?;
        self.pos += c.len_utf8();
        if c == '\n' {
            self.line += 1;
            self.col = 1;
        } else {
            self.col += 1;
        }
        Some(c)
    }

    fn eat_while(&mut self, f: impl Fn(char) -> bool) -> &str {
        let start = self.pos;
        while self.peek().is_some_and(&f) {
            self.bump();
        }
        &self.src[start..self.pos]
    }
}

pub fn tokenize(src: &str) -> Result<Vec<Token>, SyntaxError> {
    let mut cur = Cursor {
        src,
        pos: 0,
        line: 1,
        col: 1,
    };
    let mut out = Vec::new();
    loop {
        // whitespace and comments
        loop {
            match cur.peek() {
                Some(c) if c.is_whitespace() => {
                    cur.bump();
                }
                Some('/') if cur.peek2() == Some('/') => {
                    cur.eat_while(|c| c != '\n');
                }
                _ => break,
            }
        }
        let (start, line, column) = (cur.pos, cur.line, cur.col);
        let span_to = |end: usize| SourceSpan {
            start,
            end,
            line,
            column,
        };
        let err = |msg: String, end: usize| SyntaxError {
            message: msg,
            span: span_to(end),
        };
        let Some(c) = cur.peek() else {
            out.push(Token {
                tok: Tok::Eof,
                span: span_to(start),
            });
            return Ok(out);
        };
        let tok = match c {
            '@' | '%' => {
                cur.bump();
                let name = cur.eat_while(is_name_char).to_string();
                if name.is_empty() {
                    return Err(err(format!("expected a name after `{c}`"), cur.pos));
                }
                if c == '@' {
                    Tok::Global(name)
                } else {
                    Tok::Local(name)
                }
            }
            c if c.is_ascii_alphabetic() || c == '_' => {
                Tok::Ident(cur.eat_while(|c| c.is_ascii_alphanumeric() || c == '_').to_string())
            }
            c if c.is_ascii_digit() || (c == '-' && cur.peek2().is_some_and(|d| d.is_ascii_digit())) => {
                lex_number(&mut cur).map_err(|m| err(m, cur.pos))?
            }
            '"' => {
                cur.bump();
                let mut s = String::new();
                loop {
                    match cur.bump() {
                        None => return Err(err("unterminated string literal".to_string(), cur.pos)),
                        Some('"') => break,
                        Some('\\') => match cur.bump() {
                            Some('"') => s.push('"'),
                            Some('\\') => s.push('\\'),
                            Some('n') => s.push('\n'),
                            _ => return Err(err("invalid escape in string literal".to_string(), cur.pos)),
                        },
                        Some('\n') => return Err(err("newline in string literal".to_string(), cur.pos)),
                        Some(ch) => s.push(ch),
                    }
                }
                Tok::Str(s)
            }
            '(' | ')' | '{' | '}' | '[' | ']' | '<' | '>' | ',' | '=' | ':' => {
                cur.bump();
                Tok::Punct(c)
            }
            other => {
                cur.bump();
                return Err(err(format!("unexpected character {other:?}"), cur.pos));
            }
        };
        out.push(Token {
            tok,
            span: span_to(cur.pos),
        });
    }
}

fn lex_number(cur: &mut Cursor<'_>) -> Result<Tok, String> {
    let start = cur.pos;
    if cur.peek() == Some('-') {
        cur.bump();
    }
    cur.eat_while(|c| c.is_ascii_digit());
    let mut is_float = false;
    if cur.peek() == Some('.') && cur.peek2().is_some_and(|c| c.is_ascii_digit()) {
        is_float = true;
        cur.bump();
        cur.eat_while(|c| c.is_ascii_digit());
    }
    if matches!(cur.peek(), Some('e' | 'E')) {
        let after = cur.peek2();
        let signed = matches!(after, Some('+' | '-'));
        if after.is_some_and(|c| c.is_ascii_digit()) || signed {
            is_float = true;
            cur.bump();
            if signed {
                cur.bump();
            }
            if cur.eat_while(|c| c.is_ascii_digit()).is_empty() {
                return Err("malformed exponent".to_string());
            }
        }
    }
    let text = &cur.src[start..cur.pos];
    if cur.peek().is_some_and(|c| c.is_ascii_alphabetic() || c == '_') {
        return Err(format!("malformed number `{text}{}`", cur.peek().unwrap_or(' ')));
    }
    if is_float {
        text.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .map(Tok::Float)
            .ok_or_else(|| format!("invalid float literal `{text}`"))
    } else {
        text.parse::<i64>().map(Tok::Int).map_err(|_| format!("integer literal `{text}` out of range"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<Tok> {
        tokenize(s).unwrap().into_iter().map(|t| t.tok).collect()
    }

    #[test]
    fn numbers() {
        assert_eq!(toks("-3 0.01 1e-5 [1, -1]")[..4], [Tok::Int(-3), Tok::Float(0.01), Tok::Float(1e-5), Tok::Punct('[')]);
    }

    #[test]
    fn names_and_comments() {
        let t = toks("%211 = call @dense(%x_1) // trailing\n@2");
        assert_eq!(t[0], Tok::Local("211".into()));
        assert_eq!(t[2], Tok::Ident("call".into()));
        assert_eq!(t[3], Tok::Global("dense".into()));
        assert_eq!(t[7], Tok::Global("2".into()));
    }

    #[test]
    fn spans_track_lines() {
        let t = tokenize("func\n  @f").unwrap();
        assert_eq!((t[1].span.line, t[1].span.column), (2, 3));
    }

    #[test]
    fn errors() {
        assert!(tokenize("\"abc").is_err());
        assert!(tokenize("$").is_err());
        assert!(tokenize("99999999999999999999").is_err());
        assert!(tokenize("12abc").is_err());
    }
}

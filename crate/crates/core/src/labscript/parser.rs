//! Line-oriented LabScript parser.
//!
//! ```text
//! OPEN  <alias> "<resource>" [SCPI|XYP]
//! WRITE <alias> "<command>"
//! QUERY <alias> "<command>" -> <var>
//! MOVE  <alias> <x>, <y>
//! WAITIDLE <alias> [<timeout_ms>]
//! SET   <var> = <expr>
//! SWEEP <var> FROM <expr> TO <expr> STEP <expr>
//!   ...
//! END
//! RECORD <expr>[, <expr>...]
//! SAVE  "<relative path>"
//! PRINT "<text with {var} placeholders>"
//! ```

use std::collections::HashSet;

use thiserror::Error;

use super::ast::{sweep_count, BinOp, Expr, Program, Stmt, StmtKind, Template, TemplatePart};
use crate::transport::InstrumentKind;

pub const DEFAULT_WAIT_TIMEOUT_MS: f64 = 10_000.0;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {msg}")]
pub struct ParseError {
    pub line: usize,
    pub msg: String,
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Num(f64),
    Str(String),
    Arrow,
    Comma,
    Eq,
    LParen,
    RParen,
    Plus,
    Minus,
    Star,
    Slash,
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    start: usize,
    end: usize,
}

fn describe(t: &Tok) -> String {
    match t {
        Tok::Ident(s) => format!("'{s}'"),
        Tok::Num(v) => format!("'{v}'"),
        Tok::Str(_) => "string".into(),
        Tok::Arrow => "'->'".into(),
        Tok::Comma => "','".into(),
        Tok::Eq => "'='".into(),
        Tok::LParen => "'('".into(),
        Tok::RParen => "')'".into(),
        Tok::Plus => "'+'".into(),
        Tok::Minus => "'-'".into(),
        Tok::Star => "'*'".into(),
        Tok::Slash => "'/'".into(),
    }
}

fn lex(text: &str) -> Result<Vec<Token>, String> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let (start, c) = chars[i];
        let single = |tok| Token { tok, start, end: start + c.len_utf8() };
        match c {
            c if c.is_whitespace() => i += 1,
            '#' => break,
            '"' | '\'' => {
                let quote = c;
                let mut s = String::new();
                i += 1;
                loop {
                    let Some(&(pos, ch)) = chars.get(i) else {
                        return Err("unterminated string".into());
                    };
                    i += 1;
                    match ch {
                        '\\' => {
                            let Some(&(_, esc)) = chars.get(i) else {
                                return Err("unterminated string".into());
                            };
                            i += 1;
                            s.push(match esc {
                                'n' => '\n',
                                't' => '\t',
                                other => other,
                            });
                        }
                        ch if ch == quote => {
                            out.push(Token { tok: Tok::Str(s), start, end: pos + 1 });
                            break;
                        }
                        ch => s.push(ch),
                    }
                }
            }
            '-' if chars.get(i + 1).is_some_and(|&(_, n)| n == '>') => {
                out.push(Token { tok: Tok::Arrow, start, end: start + 2 });
                i += 2;
            }
            ',' | '=' | '(' | ')' | '+' | '-' | '*' | '/' => {
                out.push(single(match c {
                    ',' => Tok::Comma,
                    '=' => Tok::Eq,
                    '(' => Tok::LParen,
                    ')' => Tok::RParen,
                    '+' => Tok::Plus,
                    '-' => Tok::Minus,
                    '*' => Tok::Star,
                    _ => Tok::Slash,
                }));
                i += 1;
            }
            c if c.is_ascii_digit() || c == '.' => {
                let mut j = i;
                let mut prev = ' ';
                while let Some(&(_, ch)) = chars.get(j) {
                    let exp_sign = matches!(ch, '+' | '-') && matches!(prev, 'e' | 'E');
                    if ch.is_ascii_digit() || ch == '.' || ch == 'e' || ch == 'E' || exp_sign {
                        prev = ch;
                        j += 1;
                    } else {
                        break;
                    }
                }
                let end = chars.get(j).map_or(text.len(), |&(p, _)| p);
                let lit = &text[start..end];
                let v: f64 = lit.parse().map_err(|_| format!("malformed number '{lit}'"))?;
                out.push(Token { tok: Tok::Num(v), start, end });
                i = j;
            }
            c if c.is_ascii_alphabetic() || c == '_' => {
                let mut j = i;
                while chars.get(j).is_some_and(|&(_, ch)| ch.is_ascii_alphanumeric() || ch == '_') {
                    j += 1;
                }
                let end = chars.get(j).map_or(text.len(), |&(p, _)| p);
                out.push(Token { tok: Tok::Ident(text[start..end].to_string()), start, end });
                i = j;
            }
            other => return Err(format!("unexpected character '{other}'")),
        }
    }
    Ok(out)
}

fn valid_name(s: &str) -> bool {
    let mut chars = s.chars();
    chars.next().is_some_and(|c| c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Parses placeholder syntax inside a string literal.
pub fn parse_template(s: &str) -> Result<Template, String> {
    let mut parts = Vec::new();
    let mut lit = String::new();
    let mut it = s.chars().peekable();
    while let Some(c) = it.next() {
        match c {
            '{' if it.peek() == Some(&'{') => {
                it.next();
                lit.push('{');
            }
            '}' if it.peek() == Some(&'}') => {
                it.next();
                lit.push('}');
            }
            '{' => {
                let mut name = String::new();
                loop {
                    match it.next() {
                        Some('}') => break,
                        Some(ch) => name.push(ch),
                        None => return Err("unclosed '{' in string".into()),
                    }
                }
                let name = name.trim().to_string();
                if !valid_name(&name) {
                    return Err(format!("invalid placeholder '{{{name}}}'"));
                }
                if !lit.is_empty() {
                    parts.push(TemplatePart::Lit(std::mem::take(&mut lit)));
                }
                parts.push(TemplatePart::Var(name));
            }
            '}' => return Err("unmatched '}' in string".into()),
            c => lit.push(c),
        }
    }
    if !lit.is_empty() {
        parts.push(TemplatePart::Lit(lit));
    }
    Ok(Template { parts })
}

struct Cursor<'a> {
    toks: &'a [Token],
    pos: usize,
    text: &'a str,
}

impl<'a> Cursor<'a> {
    fn peek(&self) -> Option<&'a Tok> {
        self.toks.get(self.pos).map(|t| &t.tok)
    }

    fn next(&mut self) -> Option<&'a Tok> {
        let t = self.toks.get(self.pos).map(|t| &t.tok);
        self.pos += 1;
        t
    }

    fn expect(&mut self, want: &Tok, what: &str) -> Result<(), String> {
        match self.next() {
            Some(t) if t == want => Ok(()),
            Some(t) => Err(format!("expected {what}, found {}", describe(t))),
            None => Err(format!("expected {what}")),
        }
    }

    fn ident(&mut self, what: &str) -> Result<String, String> {
        match self.next() {
            Some(Tok::Ident(s)) => Ok(s.clone()),
            Some(t) => Err(format!("expected {what}, found {}", describe(t))),
            None => Err(format!("expected {what}")),
        }
    }

    fn keyword(&mut self, kw: &str) -> Result<(), String> {
        match self.next() {
            Some(Tok::Ident(s)) if s.eq_ignore_ascii_case(kw) => Ok(()),
            Some(t) => Err(format!("expected {kw}, found {}", describe(t))),
            None => Err(format!("expected {kw}")),
        }
    }

    fn string(&mut self, what: &str) -> Result<String, String> {
        match self.next() {
            Some(Tok::Str(s)) => Ok(s.clone()),
            Some(t) => Err(format!("expected {what} in quotes, found {}", describe(t))),
            None => Err(format!("expected {what} in quotes")),
        }
    }

    fn finish(&self) -> Result<(), String> {
        match self.peek() {
            None => Ok(()),
            Some(t) => Err(format!("unexpected {} at end of statement", describe(t))),
        }
    }

    fn expr(&mut self) -> Result<Expr, String> {
        let mut lhs = self.term()?;
        while let Some(op) = match self.peek() {
            Some(Tok::Plus) => Some(BinOp::Add),
            Some(Tok::Minus) => Some(BinOp::Sub),
            _ => None,
        } {
            self.pos += 1;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(self.term()?));
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr, String> {
        let mut lhs = self.unary()?;
        while let Some(op) = match self.peek() {
            Some(Tok::Star) => Some(BinOp::Mul),
            Some(Tok::Slash) => Some(BinOp::Div),
            _ => None,
        } {
            self.pos += 1;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(self.unary()?));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr, String> {
        match self.peek() {
            Some(Tok::Minus) => {
                self.pos += 1;
                Ok(Expr::Neg(Box::new(self.unary()?)))
            }
            Some(Tok::Plus) => {
                self.pos += 1;
                self.unary()
            }
            _ => self.primary(),
        }
    }

    fn primary(&mut self) -> Result<Expr, String> {
        match self.next() {
            Some(Tok::Num(v)) => Ok(Expr::Num(*v)),
            Some(Tok::Ident(name)) if is_keyword(name) => Err(format!("expected expression, found '{name}'")),
            Some(Tok::Ident(name)) => Ok(Expr::Var(name.clone())),
            Some(Tok::LParen) => {
                let e = self.expr()?;
                self.expect(&Tok::RParen, "')'")?;
                Ok(e)
            }
            Some(t) => Err(format!("expected expression, found {}", describe(t))),
            None => Err("expected expression".into()),
        }
    }

    /// Expression plus the source text it was parsed from.
    fn expr_with_text(&mut self) -> Result<(String, Expr), String> {
        let first = self.pos;
        let e = self.expr()?;
        let (start, end) = (self.toks[first].start, self.toks[self.pos - 1].end);
        Ok((self.text[start..end].to_string(), e))
    }
}

fn is_keyword(s: &str) -> bool {
    ["FROM", "TO", "STEP"].iter().any(|k| s.eq_ignore_ascii_case(k))
}

fn protocol(word: &str) -> Option<InstrumentKind> {
    match word.to_ascii_uppercase().as_str() {
        "SCPI" | "SCPI_SMU" => Some(InstrumentKind::ScpiSmu),
        "XYP" | "XYP_STAGE" => Some(InstrumentKind::XypStage),
        _ => None,
    }
}

struct Frame {
    line: usize,
    var: String,
    from: Expr,
    to: Expr,
    step: Expr,
    body: Vec<Stmt>,
}

/// Parses a LabScript program. Aliases must be opened (earlier in the file)
/// before they are used, and every SWEEP must be closed by END.
pub fn parse_program(text: &str) -> Result<Program, ParseError> {
    let mut top: Vec<Stmt> = Vec::new();
    let mut stack: Vec<Frame> = Vec::new();
    let mut opened: HashSet<String> = HashSet::new();

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let fail = |msg: String| ParseError { line, msg };
        let toks = lex(raw).map_err(fail)?;
        if toks.is_empty() {
            continue;
        }
        let mut c = Cursor { toks: &toks, pos: 0, text: raw };
        let verb = match c.next() {
            Some(Tok::Ident(v)) => v.to_ascii_uppercase(),
            Some(t) => return Err(fail(format!("expected a statement, found {}", describe(t)))),
            None => continue,
        };
        let use_alias = |c: &mut Cursor| -> Result<String, String> {
            let alias = c.ident("instrument alias")?;
            if opened.contains(&alias) {
                Ok(alias)
            } else {
                Err(format!("alias '{alias}' used before OPEN"))
            }
        };

        let kind = match verb.as_str() {
            "OPEN" => (|| {
                let alias = c.ident("instrument alias")?;
                let resource = c.string("resource string")?;
                let protocol = match c.peek() {
                    Some(Tok::Ident(w)) => {
                        let p = protocol(w).ok_or_else(|| format!("unknown protocol '{w}', expected SCPI or XYP"))?;
                        c.pos += 1;
                        Some(p)
                    }
                    _ => None,
                };
                c.finish()?;
                opened.insert(alias.clone());
                Ok(StmtKind::Open { alias, resource, protocol })
            })(),
            "WRITE" => (|| {
                let alias = use_alias(&mut c)?;
                let template = parse_template(&c.string("command")?)?;
                c.finish()?;
                Ok(StmtKind::Write { alias, template })
            })(),
            "QUERY" => (|| {
                let alias = use_alias(&mut c)?;
                let template = parse_template(&c.string("command")?)?;
                c.expect(&Tok::Arrow, "'->' and a variable name")?;
                let bind = c.ident("variable name")?;
                c.finish()?;
                Ok(StmtKind::Query { alias, template, bind })
            })(),
            "MOVE" => (|| {
                let alias = use_alias(&mut c)?;
                let x = c.expr()?;
                c.expect(&Tok::Comma, "',' between x and y")?;
                let y = c.expr()?;
                c.finish()?;
                Ok(StmtKind::Move { alias, x, y })
            })(),
            "WAITIDLE" => (|| {
                let alias = use_alias(&mut c)?;
                let timeout_ms = match c.next() {
                    None => DEFAULT_WAIT_TIMEOUT_MS,
                    Some(Tok::Num(v)) if *v >= 0.0 => *v,
                    Some(t) => return Err(format!("expected timeout in ms, found {}", describe(t))),
                };
                c.finish()?;
                Ok(StmtKind::WaitIdle { alias, timeout_ms })
            })(),
            "SET" => (|| {
                let var = c.ident("variable name")?;
                c.expect(&Tok::Eq, "'='")?;
                let expr = c.expr()?;
                c.finish()?;
                Ok(StmtKind::Set { var, expr })
            })(),
            "SWEEP" => {
                let header = (|| {
                    let var = c.ident("sweep variable")?;
                    c.keyword("FROM")?;
                    let from = c.expr()?;
                    c.keyword("TO")?;
                    let to = c.expr()?;
                    c.keyword("STEP")?;
                    let step = c.expr()?;
                    c.finish()?;
                    if step.constant() == Some(0.0) {
                        return Err("SWEEP step must not be zero".to_string());
                    }
                    if let (Some(f), Some(t), Some(s)) = (from.constant(), to.constant(), step.constant()) {
                        if sweep_count(f, t, s).is_none() {
                            return Err("SWEEP step points away from the end value".to_string());
                        }
                    }
                    Ok((var, from, to, step))
                })()
                .map_err(fail)?;
                let (var, from, to, step) = header;
                stack.push(Frame { line, var, from, to, step, body: Vec::new() });
                continue;
            }
            "END" => {
                c.finish().map_err(fail)?;
                let Some(f) = stack.pop() else {
                    return Err(fail("END without a matching SWEEP".into()));
                };
                let stmt = Stmt {
                    line: f.line,
                    kind: StmtKind::Sweep { var: f.var, from: f.from, to: f.to, step: f.step, body: f.body },
                };
                match stack.last_mut() {
                    Some(parent) => parent.body.push(stmt),
                    None => top.push(stmt),
                }
                continue;
            }
            "RECORD" => (|| {
                let mut values = vec![c.expr_with_text()?];
                while c.peek() == Some(&Tok::Comma) {
                    c.pos += 1;
                    values.push(c.expr_with_text()?);
                }
                c.finish()?;
                Ok(StmtKind::Record { values })
            })(),
            "SAVE" => (|| {
                let path = c.string("file path")?;
                c.finish()?;
                Ok(StmtKind::Save { path })
            })(),
            "PRINT" => (|| {
                let template = parse_template(&c.string("text")?)?;
                c.finish()?;
                Ok(StmtKind::Print { template })
            })(),
            other => Err(format!("unknown statement '{other}'")),
        }
        .map_err(fail)?;

        let stmt = Stmt { line, kind };
        match stack.last_mut() {
            Some(f) => f.body.push(stmt),
            None => top.push(stmt),
        }
    }
    if let Some(f) = stack.last() {
        return Err(ParseError { line: f.line, msg: "SWEEP without matching END".into() });
    }
    Ok(Program { statements: top })
}

use serde::{Deserialize, Serialize};

use crate::transport::InstrumentKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Expr {
    Num(f64),
    Var(String),
    Neg(Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
}

impl Expr {
    /// Value of an expression that references no variables.
    pub fn constant(&self) -> Option<f64> {
        match self {
            Expr::Num(v) => Some(*v),
            Expr::Var(_) => None,
            Expr::Neg(e) => e.constant().map(|v| -v),
            Expr::Bin(op, a, b) => {
                let (a, b) = (a.constant()?, b.constant()?);
                Some(match op {
                    BinOp::Add => a + b,
                    BinOp::Sub => a - b,
                    BinOp::Mul => a * b,
                    BinOp::Div => a / b,
                })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum TemplatePart {
    Lit(String),
    Var(String),
}

/// String with `{var}` placeholders; `{{` and `}}` are literal braces.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Template {
    pub parts: Vec<TemplatePart>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum StmtKind {
    Open { alias: String, resource: String, protocol: Option<InstrumentKind> },
    Write { alias: String, template: Template },
    Query { alias: String, template: Template, bind: String },
    Move { alias: String, x: Expr, y: Expr },
    WaitIdle { alias: String, timeout_ms: f64 },
    Set { var: String, expr: Expr },
    Sweep { var: String, from: Expr, to: Expr, step: Expr, body: Vec<Stmt> },
    /// Each value carries its source text, used as the CSV column name.
    Record { values: Vec<(String, Expr)> },
    Save { path: String },
    Print { template: Template },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stmt {
    /// 1-based source line.
    pub line: usize,
    pub kind: StmtKind,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Program {
    pub statements: Vec<Stmt>,
}

/// Iteration count of a sweep: `floor((to - from) / step + 1e-9) + 1`.
/// Returns `None` when the step is zero, points away from `to`, or any
/// bound is not finite.
pub fn sweep_count(from: f64, to: f64, step: f64) -> Option<u64> {
    if !(from.is_finite() && to.is_finite() && step.is_finite()) || step == 0.0 {
        return None;
    }
    let span = to - from;
    if span != 0.0 && span.signum() != step.signum() {
        return None;
    }
    let n = (span / step + 1e-9).floor();
    // saturating: anything this large is stopped by the instruction cap
    Some(if n >= u64::MAX as f64 { u64::MAX } else { n as u64 + 1 })
}

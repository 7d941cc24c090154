//! LabScript: a line-oriented instrument control language and the sandboxed
//! interpreter that runs it against the rack.

mod ast;
mod interp;
mod parser;

pub use ast::{sweep_count, BinOp, Expr, Program, Stmt, StmtKind, Template, TemplatePart};
pub use interp::{
    resolve_in_sandbox, ExecutionResult, Exit, LimitKind, Limits, Sandbox, DEFAULT_MAX_INSTRUCTIONS,
    DEFAULT_MAX_OUTPUT_BYTES, DEFAULT_MAX_VIRTUAL_MS,
};
pub use parser::{parse_program, parse_template, ParseError, DEFAULT_WAIT_TIMEOUT_MS};

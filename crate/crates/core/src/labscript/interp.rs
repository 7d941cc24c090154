use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Component, Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::ast::{sweep_count, BinOp, Expr, Program, Stmt, StmtKind, Template, TemplatePart};
use super::parser::parse_program;
use crate::clock::SharedClock;
use crate::format::{plain_number, sci6};
use crate::stage::fmt_coord;
use crate::transport::{ClientError, InstrumentKind, ResourceDescriptor, ResourceId, ScpiClient, StageClient};

pub const DEFAULT_MAX_INSTRUCTIONS: u64 = 100_000;
pub const DEFAULT_MAX_VIRTUAL_MS: u64 = 60_000;
pub const DEFAULT_MAX_OUTPUT_BYTES: usize = 1 << 20;
const WAIT_POLL: Duration = Duration::from_millis(5);
const MAX_DRAINED_ERRORS: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Limits {
    pub max_instructions: u64,
    /// Budget on the sandbox clock, measured from the start of execution.
    pub max_virtual_ms: u64,
    pub allowed_hosts: Vec<String>,
    /// Combined cap on stdout and stderr.
    pub max_output_bytes: usize,
}

impl Default for Limits {
    fn default() -> Self {
        Self {
            max_instructions: DEFAULT_MAX_INSTRUCTIONS,
            max_virtual_ms: DEFAULT_MAX_VIRTUAL_MS,
            allowed_hosts: vec!["127.0.0.1".into(), "localhost".into()],
            max_output_bytes: DEFAULT_MAX_OUTPUT_BYTES,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LimitKind {
    Instructions,
    VirtualTime,
    Output,
}

impl fmt::Display for LimitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LimitKind::Instructions => "instructions",
            LimitKind::VirtualTime => "virtual time",
            LimitKind::Output => "output size",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status")]
pub enum Exit {
    #[serde(rename = "OK")]
    Ok,
    ScriptError { line: usize, msg: String },
    LimitExceeded { which: LimitKind },
}

impl Exit {
    pub fn is_ok(&self) -> bool {
        matches!(self, Exit::Ok)
    }
}

impl fmt::Display for Exit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Exit::Ok => f.write_str("OK"),
            Exit::ScriptError { line, msg } => write!(f, "ScriptError(line {line}: {msg})"),
            Exit::LimitExceeded { which } => write!(f, "LimitExceeded({which})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionResult {
    pub exit: Exit,
    pub stdout: String,
    /// Instrument errors, prefixed with the source line. Present even when
    /// `exit` is OK: instrument errors are reported, not fatal.
    pub stderr: String,
    /// Column names taken from the source text of the first RECORD.
    pub record_labels: Vec<String>,
    pub records: Vec<Vec<f64>>,
    pub instructions_executed: u64,
    /// Paths relative to the working directory, in save order.
    pub saved_files: Vec<String>,
}

impl ExecutionResult {
    fn new() -> Self {
        Self {
            exit: Exit::Ok,
            stdout: String::new(),
            stderr: String::new(),
            record_labels: Vec::new(),
            records: Vec::new(),
            instructions_executed: 0,
            saved_files: Vec::new(),
        }
    }
}

/// Execution environment for LabScript: a private working directory, the
/// rack resources that may be opened, and resource limits.
#[derive(Debug, Clone)]
pub struct Sandbox {
    pub workdir: PathBuf,
    pub limits: Limits,
    pub clock: SharedClock,
    pub registry: Vec<ResourceDescriptor>,
}

impl Sandbox {
    /// Creates the working directory if needed.
    pub fn new(
        workdir: impl Into<PathBuf>,
        limits: Limits,
        clock: SharedClock,
        registry: Vec<ResourceDescriptor>,
    ) -> std::io::Result<Self> {
        let workdir = workdir.into();
        fs::create_dir_all(&workdir)?;
        Ok(Self { workdir, limits, clock, registry })
    }

    /// Parses and executes `source`; parse errors become a `ScriptError`.
    pub fn run_source(&self, source: &str) -> ExecutionResult {
        match parse_program(source) {
            Ok(program) => self.execute(&program),
            Err(e) => ExecutionResult { exit: Exit::ScriptError { line: e.line, msg: e.msg }, ..ExecutionResult::new() },
        }
    }

    pub fn execute(&self, program: &Program) -> ExecutionResult {
        let mut run = Run {
            sandbox: self,
            vars: HashMap::new(),
            conns: HashMap::new(),
            result: ExecutionResult::new(),
            start: self.clock.now(),
        };
        let outcome = run.block(&program.statements);
        for (_, conn) in run.conns.drain() {
            conn.close();
        }
        let mut result = run.result;
        result.exit = match outcome {
            Ok(()) => Exit::Ok,
            Err(Stop::Script { line, msg }) => Exit::ScriptError { line, msg },
            Err(Stop::Limit(which)) => Exit::LimitExceeded { which },
        };
        result
    }
}

#[derive(Debug)]
enum Stop {
    Script { line: usize, msg: String },
    Limit(LimitKind),
}

#[derive(Debug, Clone, PartialEq)]
enum Value {
    Num(f64),
    Text(String),
}

impl Value {
    fn parse_response(reply: &str) -> Self {
        match reply.trim().parse::<f64>() {
            Ok(v) if v.is_finite() => Value::Num(v),
            _ => Value::Text(reply.to_string()),
        }
    }

    fn render(&self) -> String {
        match self {
            Value::Num(v) => plain_number(*v),
            Value::Text(s) => s.clone(),
        }
    }
}

enum Conn {
    Scpi(ScpiClient),
    Stage(StageClient),
}

impl Conn {
    fn close(self) {
        match self {
            Conn::Scpi(c) => c.close(),
            Conn::Stage(c) => c.close(),
        }
    }
}

/// Checks that `rel` names a file strictly inside `workdir` without
/// traversing symlinks, and returns the joined path.
pub fn resolve_in_sandbox(workdir: &Path, rel: &str) -> Result<PathBuf, String> {
    const ESCAPE: &str = "path escapes sandbox";
    let path = Path::new(rel);
    if rel.is_empty() || rel.contains('\0') {
        return Err("SAVE needs a file name".into());
    }
    let mut normal = Vec::new();
    for c in path.components() {
        match c {
            Component::Normal(part) => normal.push(part),
            Component::CurDir => {}
            Component::ParentDir | Component::RootDir | Component::Prefix(_) => return Err(ESCAPE.into()),
        }
    }
    if normal.is_empty() || rel.ends_with('/') {
        return Err("SAVE needs a file name".into());
    }
    let mut full = workdir.to_path_buf();
    for part in &normal {
        full.push(part);
        if fs::symlink_metadata(&full).is_ok_and(|m| m.file_type().is_symlink()) {
            return Err(ESCAPE.into());
        }
    }
    let root = workdir.canonicalize().map_err(|e| format!("working directory unavailable: {e}"))?;
    // the deepest existing ancestor must still lie under the root
    let mut probe = full.parent().map(Path::to_path_buf);
    while let Some(dir) = probe {
        if let Ok(canon) = dir.canonicalize() {
            if !canon.starts_with(&root) {
                return Err(ESCAPE.into());
            }
            break;
        }
        probe = dir.parent().map(Path::to_path_buf);
    }
    if full.is_dir() {
        return Err(format!("'{rel}' is a directory"));
    }
    Ok(full)
}

fn records_csv(labels: &[String], records: &[Vec<f64>]) -> String {
    let mut out = labels.iter().map(|l| csv_field(l)).collect::<Vec<_>>().join(",");
    out.push('\n');
    for row in records {
        out.push_str(&row.iter().map(|v| sci6(*v)).collect::<Vec<_>>().join(","));
        out.push('\n');
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

struct Run<'a> {
    sandbox: &'a Sandbox,
    vars: HashMap<String, Value>,
    conns: HashMap<String, Conn>,
    result: ExecutionResult,
    start: Duration,
}

impl Run<'_> {
    fn limits(&self) -> &Limits {
        &self.sandbox.limits
    }

    fn tick(&mut self) -> Result<(), Stop> {
        if self.result.instructions_executed >= self.limits().max_instructions {
            return Err(Stop::Limit(LimitKind::Instructions));
        }
        self.result.instructions_executed += 1;
        self.check_time()
    }

    fn check_time(&self) -> Result<(), Stop> {
        let elapsed = self.sandbox.clock.now().saturating_sub(self.start);
        if elapsed > Duration::from_millis(self.limits().max_virtual_ms) {
            return Err(Stop::Limit(LimitKind::VirtualTime));
        }
        Ok(())
    }

    fn output_room(&self, extra: usize) -> Result<(), Stop> {
        if self.result.stdout.len() + self.result.stderr.len() + extra > self.limits().max_output_bytes {
            return Err(Stop::Limit(LimitKind::Output));
        }
        Ok(())
    }

    fn report(&mut self, line: usize, msg: &str) -> Result<(), Stop> {
        let text = format!("line {line}: {msg}\n");
        self.output_room(text.len())?;
        self.result.stderr.push_str(&text);
        Ok(())
    }

    fn block(&mut self, stmts: &[Stmt]) -> Result<(), Stop> {
        for stmt in stmts {
            self.tick()?;
            self.stmt(stmt)?;
        }
        Ok(())
    }

    fn stmt(&mut self, stmt: &Stmt) -> Result<(), Stop> {
        let line = stmt.line;
        let fail = |msg: String| Stop::Script { line, msg };
        match &stmt.kind {
            StmtKind::Open { alias, resource, protocol } => self.open(alias, resource, *protocol).map_err(fail),
            StmtKind::Write { alias, template } => {
                let cmd = self.render(template).map_err(fail)?;
                match self.conn(alias).map_err(fail)? {
                    Conn::Scpi(c) => {
                        c.exchange(&cmd).map_err(|e| fail(transport(&e)))?;
                        self.drain(line, alias)
                    }
                    Conn::Stage(c) => {
                        let reply = c.command(&cmd).map_err(|e| fail(transport(&e)))?;
                        self.stage_reply(line, &reply)
                    }
                }
            }
            StmtKind::Query { alias, template, bind } => {
                let cmd = self.render(template).map_err(fail)?;
                let reply = match self.conn(alias).map_err(fail)? {
                    Conn::Scpi(c) => {
                        let mut lines = c.exchange(&cmd).map_err(|e| fail(transport(&e)))?;
                        if lines.is_empty() {
                            self.drain(line, alias)?;
                            return Err(fail(format!("'{cmd}' is not a query and returned nothing")));
                        }
                        let reply = lines.remove(0);
                        self.drain(line, alias)?;
                        reply
                    }
                    Conn::Stage(c) => {
                        let reply = c.command(&cmd).map_err(|e| fail(transport(&e)))?;
                        self.stage_reply(line, &reply)?;
                        reply
                    }
                };
                self.vars.insert(bind.clone(), Value::parse_response(&reply));
                Ok(())
            }
            StmtKind::Move { alias, x, y } => {
                let (x, y) = (self.eval(x).map_err(fail)?, self.eval(y).map_err(fail)?);
                let Conn::Stage(c) = self.conn(alias).map_err(fail)? else {
                    return Err(fail(format!("MOVE needs a stage, '{alias}' is an SMU")));
                };
                let reply = c.command(&format!("MOVE {} {}", fmt_coord(x), fmt_coord(y))).map_err(|e| fail(transport(&e)))?;
                self.stage_reply(line, &reply)
            }
            StmtKind::WaitIdle { alias, timeout_ms } => self.wait_idle(line, alias, *timeout_ms),
            StmtKind::Set { var, expr } => {
                let v = self.eval(expr).map_err(fail)?;
                self.vars.insert(var.clone(), Value::Num(v));
                Ok(())
            }
            StmtKind::Sweep { var, from, to, step, body } => {
                let (f, t, s) = (self.eval(from).map_err(fail)?, self.eval(to).map_err(fail)?, self.eval(step).map_err(fail)?);
                let n = sweep_count(f, t, s)
                    .ok_or_else(|| fail(format!("SWEEP from {f} to {t} with step {s} never reaches its end")))?;
                for i in 0..n {
                    if i > 0 {
                        self.tick()?;
                    }
                    self.vars.insert(var.clone(), Value::Num(f + i as f64 * s));
                    self.block(body)?;
                }
                Ok(())
            }
            StmtKind::Record { values } => {
                let row = values.iter().map(|(_, e)| self.eval(e)).collect::<Result<Vec<_>, _>>().map_err(fail)?;
                if self.result.records.is_empty() && self.result.record_labels.is_empty() {
                    self.result.record_labels = values.iter().map(|(label, _)| label.clone()).collect();
                } else if row.len() != self.result.record_labels.len() {
                    return Err(fail(format!(
                        "RECORD has {} values but earlier records have {}",
                        row.len(),
                        self.result.record_labels.len()
                    )));
                }
                self.result.records.push(row);
                Ok(())
            }
            StmtKind::Save { path } => {
                let full = resolve_in_sandbox(&self.sandbox.workdir, path).map_err(fail)?;
                if let Some(parent) = full.parent() {
                    fs::create_dir_all(parent).map_err(|e| fail(format!("cannot create directory: {e}")))?;
                }
                let csv = records_csv(&self.result.record_labels, &self.result.records);
                fs::write(&full, csv).map_err(|e| fail(format!("cannot write '{path}': {e}")))?;
                let rel = full.strip_prefix(&self.sandbox.workdir).unwrap_or(&full).to_string_lossy().into_owned();
                if !self.result.saved_files.contains(&rel) {
                    self.result.saved_files.push(rel);
                }
                Ok(())
            }
            StmtKind::Print { template } => {
                let mut text = self.render(template).map_err(fail)?;
                text.push('\n');
                self.output_room(text.len())?;
                self.result.stdout.push_str(&text);
                Ok(())
            }
        }
    }

    fn open(&mut self, alias: &str, resource: &str, protocol: Option<InstrumentKind>) -> Result<(), String> {
        let id: ResourceId = resource.parse().map_err(|e: crate::transport::ResourceIdError| e.to_string())?;
        if !self.limits().allowed_hosts.iter().any(|h| h.eq_ignore_ascii_case(&id.host)) {
            return Err(format!("host not allowed: {}", id.host));
        }
        let listed = self.sandbox.registry.iter().find(|d| d.resource_id == id).map(|d| d.kind);
        let kind = match (protocol, listed) {
            (Some(p), Some(l)) if p != l => return Err(format!("{id} is a {l}, not a {p}")),
            (Some(p), _) => p,
            (None, Some(l)) => l,
            (None, None) => return Err(format!("{id} is not in the rack; add SCPI or XYP to OPEN")),
        };
        if let Some(old) = self.conns.remove(alias) {
            old.close();
        }
        let conn = match kind {
            InstrumentKind::ScpiSmu => Conn::Scpi(ScpiClient::connect(&id).map_err(|e| transport(&e))?),
            InstrumentKind::XypStage => Conn::Stage(StageClient::connect(&id).map_err(|e| transport(&e))?),
        };
        self.conns.insert(alias.to_string(), conn);
        Ok(())
    }

    fn conn(&mut self, alias: &str) -> Result<&mut Conn, String> {
        self.conns.get_mut(alias).ok_or_else(|| format!("alias '{alias}' is not open"))
    }

    /// Pops the SMU error queue and mirrors every entry to stderr.
    fn drain(&mut self, line: usize, alias: &str) -> Result<(), Stop> {
        let Some(Conn::Scpi(c)) = self.conns.get_mut(alias) else {
            return Ok(());
        };
        let errors = c.drain_errors(MAX_DRAINED_ERRORS).map_err(|e| Stop::Script { line, msg: transport(&e) })?;
        for e in errors {
            self.report(line, &format!("SCPI error {e}"))?;
        }
        Ok(())
    }

    fn stage_reply(&mut self, line: usize, reply: &str) -> Result<(), Stop> {
        if reply.starts_with("ERR") {
            self.report(line, &format!("stage error {reply}"))?;
        }
        Ok(())
    }

    fn wait_idle(&mut self, line: usize, alias: &str, timeout_ms: f64) -> Result<(), Stop> {
        let fail = |msg: String| Stop::Script { line, msg };
        let clock = self.sandbox.clock.clone();
        let deadline = clock.now() + Duration::from_secs_f64(timeout_ms / 1000.0);
        loop {
            let Conn::Stage(c) = self.conn(alias).map_err(fail)? else {
                return Err(fail(format!("WAITIDLE needs a stage, '{alias}' is an SMU")));
            };
            let reply = c.command("STATUS?").map_err(|e| fail(transport(&e)))?;
            match reply.as_str() {
                "IDLE" => return Ok(()),
                "MOVING" => {}
                other => return Err(fail(format!("stage replied '{other}' to STATUS?"))),
            }
            if clock.now() >= deadline {
                return Err(fail(format!("WAITIDLE timed out after {} ms", plain_number(timeout_ms))));
            }
            self.check_time()?;
            clock.sleep(WAIT_POLL);
        }
    }

    fn render(&self, template: &Template) -> Result<String, String> {
        let mut out = String::new();
        for part in &template.parts {
            match part {
                TemplatePart::Lit(s) => out.push_str(s),
                TemplatePart::Var(name) => {
                    out.push_str(&self.vars.get(name).ok_or_else(|| format!("undefined variable '{name}'"))?.render())
                }
            }
        }
        if out.contains(['\n', '\r']) {
            return Err("command text must be a single line".into());
        }
        Ok(out)
    }

    fn eval(&self, expr: &Expr) -> Result<f64, String> {
        let v = match expr {
            Expr::Num(v) => *v,
            Expr::Var(name) => match self.vars.get(name) {
                Some(Value::Num(v)) => *v,
                Some(Value::Text(t)) => return Err(format!("variable '{name}' holds text '{t}', not a number")),
                None => return Err(format!("undefined variable '{name}'")),
            },
            Expr::Neg(e) => -self.eval(e)?,
            Expr::Bin(op, a, b) => {
                let (a, b) = (self.eval(a)?, self.eval(b)?);
                match op {
                    BinOp::Add => a + b,
                    BinOp::Sub => a - b,
                    BinOp::Mul => a * b,
                    BinOp::Div => a / b,
                }
            }
        };
        if v.is_finite() {
            Ok(v)
        } else {
            Err("arithmetic produced a non-finite value".into())
        }
    }
}

fn transport(e: &ClientError) -> String {
    match e {
        ClientError::Busy => "instrument busy with another client".into(),
        other => other.to_string(),
    }
}

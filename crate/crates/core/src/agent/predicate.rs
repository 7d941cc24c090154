use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::labscript::{resolve_in_sandbox, ExecutionResult};

/// Success check applied after every execution. The model's `DONE` is only
/// accepted when this also holds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Predicate {
    /// File in the working directory with at least `min_rows` lines after the header.
    FileRows { path: String, min_rows: usize },
    RecordsAtLeast { n: usize },
    /// Never passes on its own; an operator has to mark the session.
    AlwaysManual,
    All { of: Vec<Predicate> },
}

impl Predicate {
    pub fn describe(&self) -> String {
        match self {
            Predicate::FileRows { path, min_rows } => format!("file {path} exists with at least {min_rows} data rows below its header"),
            Predicate::RecordsAtLeast { n } => format!("the script records at least {n} rows"),
            Predicate::AlwaysManual => "an operator confirms the result".into(),
            Predicate::All { of } => of.iter().map(Predicate::describe).collect::<Vec<_>>().join(" and "),
        }
    }
}

fn data_rows(workdir: &Path, rel: &str) -> Option<usize> {
    let path = resolve_in_sandbox(workdir, rel).ok()?;
    let text = std::fs::read_to_string(path).ok()?;
    Some(text.lines().filter(|l| !l.trim().is_empty()).count().saturating_sub(1))
}

pub fn evaluate_success(predicate: &Predicate, exec: Option<&ExecutionResult>, workdir: &Path) -> bool {
    match predicate {
        Predicate::FileRows { path, min_rows } => data_rows(workdir, path).is_some_and(|n| n >= *min_rows),
        Predicate::RecordsAtLeast { n } => exec.map_or(0, |e| e.records.len()) >= *n,
        Predicate::AlwaysManual => false,
        Predicate::All { of } => of.iter().all(|p| evaluate_success(p, exec, workdir)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(dir: &Path, n: usize) {
        let mut s = String::from("v,i\n");
        for k in 0..n {
            s.push_str(&format!("{k},0\n"));
        }
        std::fs::write(dir.join("iv.csv"), s).unwrap();
    }

    #[test]
    fn file_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = Predicate::FileRows { path: "iv.csv".into(), min_rows: 21 };
        assert!(!evaluate_success(&p, None, dir.path()));
        rows(dir.path(), 20);
        assert!(!evaluate_success(&p, None, dir.path()));
        rows(dir.path(), 21);
        assert!(evaluate_success(&p, None, dir.path()));
        let escape = Predicate::FileRows { path: "../iv.csv".into(), min_rows: 0 };
        assert!(!evaluate_success(&escape, None, &dir.path().join("sub")));
    }

    #[test]
    fn records_and_composition() {
        let dir = tempfile::tempdir().unwrap();
        assert!(evaluate_success(&Predicate::RecordsAtLeast { n: 0 }, None, dir.path()));
        assert!(!evaluate_success(&Predicate::RecordsAtLeast { n: 1 }, None, dir.path()));
        assert!(!evaluate_success(&Predicate::AlwaysManual, None, dir.path()));
        let both = Predicate::All { of: vec![Predicate::RecordsAtLeast { n: 0 }, Predicate::AlwaysManual] };
        assert!(!evaluate_success(&both, None, dir.path()));
        assert!(evaluate_success(&Predicate::All { of: vec![] }, None, dir.path()));
        let json = serde_json::to_string(&Predicate::FileRows { path: "iv.csv".into(), min_rows: 21 }).unwrap();
        assert_eq!(json, r#"{"kind":"file_rows","path":"iv.csv","min_rows":21}"#);
    }
}

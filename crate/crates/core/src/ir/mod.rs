//! Flat instruction-sequence IR for one training iteration.

mod graph;
mod types;
mod validate;

pub use graph::{build_dependency_graph, DependencyGraph};
pub use types::*;
pub use validate::{validate, Rule, Violation};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum IrError {
    #[error("invalid program: {}", summarize(.0))]
    Invalid(Vec<Violation>),
    #[error("malformed program file: {0}")]
    Parse(#[from] serde_json::Error),
}

fn summarize(v: &[Violation]) -> String {
    let shown: Vec<String> = v.iter().take(3).map(ToString::to_string).collect();
    let more = if v.len() > 3 { format!(" (+{} more)", v.len() - 3) } else { String::new() };
    format!("{}{more}", shown.join("; "))
}

/// Parses a program file and checks it.
pub fn load_program(text: &str) -> Result<Program, IrError> {
    let program = Program::from_json(text)?;
    let violations = validate(&program);
    if violations.is_empty() {
        Ok(program)
    } else {
        Err(IrError::Invalid(violations))
    }
}

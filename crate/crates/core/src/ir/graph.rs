use std::collections::{BTreeSet, VecDeque};

use super::types::Program;
use super::validate::{validate, Violation};
use super::IrError;

/// Producer/consumer edges between instruction positions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DependencyGraph {
    succ: Vec<Vec<usize>>,
    pred: Vec<Vec<usize>>,
}

impl DependencyGraph {
    pub fn len(&self) -> usize {
        self.succ.len()
    }

    pub fn is_empty(&self) -> bool {
        self.succ.is_empty()
    }

    pub fn successors(&self, node: usize) -> &[usize] {
        &self.succ[node]
    }

    pub fn predecessors(&self, node: usize) -> &[usize] {
        &self.pred[node]
    }

    pub fn edges(&self) -> BTreeSet<(usize, usize)> {
        self.succ.iter().enumerate().flat_map(|(i, s)| s.iter().map(move |&j| (i, j))).collect()
    }

    pub fn edge_count(&self) -> usize {
        self.succ.iter().map(Vec::len).sum()
    }

    /// True iff a directed path of length ≥ 1 leads from `a` to `b`.
    pub fn reachable(&self, a: usize, b: usize) -> bool {
        // Edges always point forward in a valid program, so nothing past `b` can reach it.
        if a >= b {
            return false;
        }
        let mut seen = vec![false; self.len()];
        let mut queue = VecDeque::from([a]);
        while let Some(n) = queue.pop_front() {
            for &m in &self.succ[n] {
                if m == b {
                    return true;
                }
                if m < b && !seen[m] {
                    seen[m] = true;
                    queue.push_back(m);
                }
            }
        }
        false
    }

    /// Membership mask of every node reachable from `a` (excluding `a`).
    pub fn descendants(&self, a: usize) -> Vec<bool> {
        self.sweep(a, &self.succ)
    }

    /// Membership mask of every node that reaches `a` (excluding `a`).
    pub fn ancestors(&self, a: usize) -> Vec<bool> {
        self.sweep(a, &self.pred)
    }

    fn sweep(&self, start: usize, adj: &[Vec<usize>]) -> Vec<bool> {
        let mut seen = vec![false; self.len()];
        let mut stack = vec![start];
        while let Some(n) = stack.pop() {
            for &m in &adj[n] {
                if !seen[m] {
                    seen[m] = true;
                    stack.push(m);
                }
            }
        }
        seen
    }
}

/// Builds the def/use graph of a valid program. Edge `(i, j)` exists iff an
/// output of instruction `i` is an input of instruction `j`.
pub fn build_dependency_graph(program: &Program) -> Result<DependencyGraph, IrError> {
    let violations: Vec<Violation> = validate(program);
    if !violations.is_empty() {
        return Err(IrError::Invalid(violations));
    }
    let producers = program.producers();
    let n = program.len();
    let mut succ: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut pred: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (j, instr) in program.instructions.iter().enumerate() {
        let mut from: Vec<usize> = instr.inputs.iter().filter_map(|t| producers.get(t).copied()).collect();
        from.sort_unstable();
        from.dedup();
        for i in from {
            succ[i].push(j);
            pred[j].push(i);
        }
    }
    for s in &mut succ {
        s.sort_unstable();
    }
    Ok(DependencyGraph { succ, pred })
}

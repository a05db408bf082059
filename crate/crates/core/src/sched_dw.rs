//! Weight-gradient scheduling: hide backward all-to-alls behind independent
//! dW instructions.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::{CostDb, CostError};
use crate::ir::{build_dependency_graph, DependencyGraph, IrError, Phase, Program};
use crate::time::Time;

pub const EXACT_MAX_DW: usize = 12;
pub const EXACT_MAX_A2A: usize = 4;

#[derive(Debug, Error)]
pub enum SchedError {
    #[error("instance too large for exhaustive search: {dw} dW, {a2a} all-to-alls (limits {EXACT_MAX_DW}, {EXACT_MAX_A2A})")]
    InstanceTooLarge { dw: usize, a2a: usize },
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error(transparent)]
    Ir(#[from] IrError),
}

/// Per backward all-to-all position: the dW positions with no path to or
/// from it.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct OverlapSets {
    pub sets: BTreeMap<usize, BTreeSet<usize>>,
}

impl OverlapSets {
    pub fn dw_candidates(&self) -> BTreeSet<usize> {
        self.sets.values().flatten().copied().collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pair {
    pub dw_index: usize,
    pub a2a_index: usize,
}

/// Partial map dW → all-to-all, kept in pick order.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct OverlapAssignment {
    pub pairs: Vec<Pair>,
}

impl OverlapAssignment {
    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn a2a_of(&self, dw: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.dw_index == dw).map(|p| p.a2a_index)
    }

    /// dWs assigned to `a2a`, in pick order.
    pub fn for_a2a(&self, a2a: usize) -> Vec<usize> {
        self.pairs.iter().filter(|p| p.a2a_index == a2a).map(|p| p.dw_index).collect()
    }

    /// Each dW used at most once and every pair drawn from `sets`.
    pub fn is_feasible(&self, sets: &OverlapSets) -> bool {
        let mut seen = BTreeSet::new();
        self.pairs.iter().all(|p| seen.insert(p.dw_index) && sets.sets.get(&p.a2a_index).is_some_and(|s| s.contains(&p.dw_index)))
    }

    /// Σ_a min(t_a, Σ assigned t_W).
    pub fn objective(&self, costs: &[Time]) -> Time {
        let mut load: BTreeMap<usize, Time> = BTreeMap::new();
        for p in &self.pairs {
            *load.entry(p.a2a_index).or_insert(Time::ZERO) += costs[p.dw_index];
        }
        load.into_iter().map(|(a, l)| costs[a].min(l)).sum()
    }
}

/// dW instructions that may run concurrently with each backward all-to-all.
pub fn label_overlappable(program: &Program, graph: &DependencyGraph) -> OverlapSets {
    let dws: Vec<usize> = program.instructions.iter().enumerate().filter(|(_, i)| i.is_weight_grad()).map(|(p, _)| p).collect();
    let mut sets = BTreeMap::new();
    for (a, instr) in program.instructions.iter().enumerate() {
        if !instr.is_all_to_all() || instr.phase == Phase::Forward {
            continue;
        }
        let desc = graph.descendants(a);
        let anc = graph.ancestors(a);
        sets.insert(a, dws.iter().copied().filter(|&w| !desc[w] && !anc[w]).collect());
    }
    OverlapSets { sets }
}

pub fn greedy_assign(sets: &OverlapSets, db: &CostDb, program: &Program) -> Result<OverlapAssignment, CostError> {
    Ok(greedy_with_costs(sets, &db.program_costs(program)?))
}

/// Greedy closest-fit assignment over explicit per-position costs.
pub fn greedy_with_costs(sets: &OverlapSets, costs: &[Time]) -> OverlapAssignment {
    let mut used = BTreeSet::new();
    let mut pairs = Vec::new();
    for (&a, set) in &sets.sets {
        let mut remaining = costs[a].as_nanos() as i128;
        while remaining > 0 {
            let best = set
                .iter()
                .filter(|w| !used.contains(*w))
                .min_by_key(|&&w| ((remaining - costs[w].as_nanos() as i128).abs(), w));
            let Some(&w) = best else { break };
            used.insert(w);
            pairs.push(Pair { dw_index: w, a2a_index: a });
            remaining -= costs[w].as_nanos() as i128;
        }
    }
    OverlapAssignment { pairs }
}

pub fn exact_assign(sets: &OverlapSets, db: &CostDb, program: &Program) -> Result<OverlapAssignment, SchedError> {
    exact_with_costs(sets, &db.program_costs(program)?)
}

/// Exhaustive maximizer of the overlap objective. Among maximizers, returns
/// the lexicographically least choice vector over dWs in index order, with
/// "unassigned" ordered before every all-to-all.
pub fn exact_with_costs(sets: &OverlapSets, costs: &[Time]) -> Result<OverlapAssignment, SchedError> {
    let dws: Vec<usize> = sets.dw_candidates().into_iter().collect();
    let a2as: Vec<usize> = sets.sets.keys().copied().collect();
    if dws.len() > EXACT_MAX_DW || a2as.len() > EXACT_MAX_A2A {
        return Err(SchedError::InstanceTooLarge { dw: dws.len(), a2a: a2as.len() });
    }
    let cap: Vec<u64> = a2as.iter().map(|&a| costs[a].as_nanos()).collect();
    let options: Vec<Vec<usize>> = dws
        .iter()
        .map(|w| (0..a2as.len()).filter(|&j| sets.sets[&a2as[j]].contains(w)).collect())
        .collect();
    // suffix[i][j]: total cost of dWs i.. eligible for a2a j.
    let mut suffix = vec![vec![0u64; a2as.len()]; dws.len() + 1];
    for i in (0..dws.len()).rev() {
        suffix[i] = suffix[i + 1].clone();
        for &j in &options[i] {
            suffix[i][j] += costs[dws[i]].as_nanos();
        }
    }

    struct Search<'a> {
        dws: &'a [usize],
        options: &'a [Vec<usize>],
        suffix: &'a [Vec<u64>],
        cap: &'a [u64],
        costs: &'a [Time],
        choice: Vec<Option<usize>>,
        load: Vec<u64>,
        best: Option<(u64, Vec<Option<usize>>)>,
    }

    impl Search<'_> {
        fn value(&self, extra: Option<&[u64]>) -> u64 {
            (0..self.cap.len()).map(|j| self.cap[j].min(self.load[j] + extra.map_or(0, |e| e[j]))).sum()
        }

        fn go(&mut self, i: usize) {
            if let Some((best, _)) = &self.best {
                if self.value(Some(&self.suffix[i])) <= *best {
                    return;
                }
            }
            if i == self.dws.len() {
                self.best = Some((self.value(None), self.choice.clone()));
                return;
            }
            self.choice.push(None);
            self.go(i + 1);
            self.choice.pop();
            let t = self.costs[self.dws[i]].as_nanos();
            for idx in 0..self.options[i].len() {
                let j = self.options[i][idx];
                self.load[j] += t;
                self.choice.push(Some(j));
                self.go(i + 1);
                self.choice.pop();
                self.load[j] -= t;
            }
        }
    }

    let mut s = Search {
        dws: &dws,
        options: &options,
        suffix: &suffix,
        cap: &cap,
        costs,
        choice: Vec::with_capacity(dws.len()),
        load: vec![0; a2as.len()],
        best: None,
    };
    s.go(0);
    let choice = s.best.map(|(_, c)| c).unwrap_or_default();
    let mut pairs: Vec<Pair> = dws
        .iter()
        .zip(choice)
        .filter_map(|(&w, c)| c.map(|j| Pair { dw_index: w, a2a_index: a2as[j] }))
        .collect();
    pairs.sort_by_key(|p| (p.a2a_index, p.dw_index));
    Ok(OverlapAssignment { pairs })
}

/// Places each assigned dW directly behind its all-to-all, in pick order.
///
/// If a dW still depends on something issued after the all-to-all, it is
/// delayed to the earliest position its inputs allow.
pub fn reorder(program: &Program, assignment: &OverlapAssignment) -> Program {
    if assignment.is_empty() {
        return program.clone();
    }
    let moved: BTreeSet<usize> = assignment.pairs.iter().map(|p| p.dw_index).collect();
    let mut target = Vec::with_capacity(program.len());
    for pos in 0..program.len() {
        if moved.contains(&pos) {
            continue;
        }
        target.push(pos);
        target.extend(assignment.for_a2a(pos));
    }
    let mut rank = vec![0usize; program.len()];
    for (r, &pos) in target.iter().enumerate() {
        rank[pos] = r;
    }

    let producers = program.producers();
    let deps: Vec<BTreeSet<usize>> = program
        .instructions
        .iter()
        .map(|i| i.inputs.iter().filter_map(|t| producers.get(t).copied()).collect())
        .collect();
    let mut indeg: Vec<usize> = deps.iter().map(BTreeSet::len).collect();
    let mut users: Vec<Vec<usize>> = vec![Vec::new(); program.len()];
    for (j, d) in deps.iter().enumerate() {
        for &i in d {
            users[i].push(j);
        }
    }
    let mut ready: BTreeSet<(usize, usize)> = (0..program.len()).filter(|&i| indeg[i] == 0).map(|i| (rank[i], i)).collect();
    let mut out = program.clone();
    out.instructions.clear();
    while let Some((_, i)) = ready.pop_first() {
        out.instructions.push(program.instructions[i].clone());
        for &j in &users[i] {
            indeg[j] -= 1;
            if indeg[j] == 0 {
                ready.insert((rank[j], j));
            }
        }
    }
    out.renumber();
    out
}

/// Label, greedily assign, and reorder in one step.
pub fn schedule(program: &Program, db: &CostDb) -> Result<(Program, OverlapAssignment), SchedError> {
    let graph = build_dependency_graph(program)?;
    let sets = label_overlappable(program, &graph);
    let assignment = greedy_assign(&sets, db, program)?;
    Ok((reorder(program, &assignment), assignment))
}

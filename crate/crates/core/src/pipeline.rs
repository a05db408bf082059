//! Stage-based scheduling of a partitioned instruction range, and its
//! pipelined execution time.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::cost::{CostDb, CostError};
use crate::ir::{Lane, Program};
use crate::time::Time;
use crate::timeline::lane_times;

/// A run of same-lane instructions, one run per partition.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Stage {
    pub kind: Lane,
    /// `entries[p]`: positions (in the input fragment) of partition `p`'s
    /// instructions in this stage. Unpartitioned stages have one entry.
    pub entries: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineSchedule {
    pub stages: Vec<Stage>,
    /// The fragment, with instructions in schedule order.
    pub program: Program,
    pub partitions: usize,
}

fn local_deps(fragment: &Program) -> Vec<Vec<usize>> {
    let producers = fragment.producers();
    fragment
        .instructions
        .iter()
        .map(|i| {
            let mut d: Vec<usize> = i.inputs.iter().filter_map(|t| producers.get(t).copied()).collect();
            d.sort_unstable();
            d.dedup();
            d
        })
        .collect()
}

/// Topological order that keeps list order wherever dependencies allow.
fn stable_topo(deps: &[Vec<usize>]) -> Vec<usize> {
    let n = deps.len();
    let mut indeg: Vec<usize> = deps.iter().map(Vec::len).collect();
    let mut users: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (j, d) in deps.iter().enumerate() {
        for &i in d {
            users[i].push(j);
        }
    }
    let mut ready: BTreeSet<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(i) = ready.pop_first() {
        order.push(i);
        for &j in &users[i] {
            indeg[j] -= 1;
            if indeg[j] == 0 {
                ready.insert(j);
            }
        }
    }
    order
}

fn runs(order: &[usize], fragment: &Program) -> Vec<(Lane, Vec<usize>)> {
    let mut out: Vec<(Lane, Vec<usize>)> = Vec::new();
    for &i in order {
        let lane = fragment.instructions[i].lane();
        match out.last_mut() {
            Some((l, run)) if *l == lane => run.push(i),
            _ => out.push((lane, vec![i])),
        }
    }
    out
}

/// Groups the instructions of a partitioned range into stages.
///
/// Per partition, maximal same-lane runs (in per-partition dependency order)
/// form the stages; stage `j` collects run `j` of every partition, ordered by
/// partition index. Unpartitioned instructions (splits, concats) form a
/// prologue when they depend on nothing in the range and an epilogue otherwise.
pub fn build_stages(fragment: &Program, k: usize) -> PipelineSchedule {
    let deps = local_deps(fragment);
    let order = stable_topo(&deps);

    let mut per_part: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut prologue = Vec::new();
    let mut epilogue = Vec::new();
    for &i in &order {
        match &fragment.instructions[i].partition {
            Some(p) => per_part.entry(p.index).or_default().push(i),
            None if deps[i].is_empty() => prologue.push(i),
            None => epilogue.push(i),
        }
    }

    let part_runs: Vec<Vec<(Lane, Vec<usize>)>> = per_part.values().map(|o| runs(o, fragment)).collect();
    let depth = part_runs.iter().map(Vec::len).max().unwrap_or(0);

    let mut stages = Vec::new();
    for (lane, run) in runs(&prologue, fragment) {
        stages.push(Stage { kind: lane, entries: vec![run] });
    }
    for j in 0..depth {
        let mut kind = None;
        let mut entries = Vec::new();
        for pr in &part_runs {
            if let Some((lane, run)) = pr.get(j) {
                kind.get_or_insert(*lane);
                entries.push(run.clone());
            } else {
                entries.push(Vec::new());
            }
        }
        stages.push(Stage { kind: kind.unwrap_or(Lane::Compute), entries });
    }
    for (lane, run) in runs(&epilogue, fragment) {
        stages.push(Stage { kind: lane, entries: vec![run] });
    }

    let flat: Vec<usize> = stages.iter().flat_map(|s| s.entries.iter().flatten().copied()).collect();
    let mut program = fragment.clone();
    program.instructions = flat.iter().map(|&i| fragment.instructions[i].clone()).collect();
    // Partitions with mismatched run structure can leave a stage order that
    // breaks a dependency; fall back to the stable topological order then.
    if !respects_deps(&program) {
        program.instructions = order.iter().map(|&i| fragment.instructions[i].clone()).collect();
    }
    program.renumber();
    PipelineSchedule { stages, program, partitions: k }
}

fn respects_deps(p: &Program) -> bool {
    let producers = p.producers();
    p.instructions
        .iter()
        .enumerate()
        .all(|(pos, i)| i.inputs.iter().all(|t| producers.get(t).is_none_or(|&q| q < pos)))
}

/// End time of the pipelined range when started at time zero.
pub fn simulate_range(schedule: &PipelineSchedule, db: &CostDb) -> Result<Time, CostError> {
    let costs = db.program_costs(&schedule.program)?;
    Ok(lane_times(&schedule.program, &costs).into_iter().map(|(_, e)| e).max().unwrap_or(Time::ZERO))
}

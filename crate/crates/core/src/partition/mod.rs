//! Forward-pass operator partitioning: group instructions, pick partition
//! ranges and counts by dynamic programming, infer partition axes, and
//! rewrite each chosen range into a pipelined micro-batch schedule.

mod axes;
mod rewrite;

pub use axes::{allowed_tuples, infer_axes, is_capacity_range, Axis, AxisAssignment, SlotAxes};
pub use rewrite::{rewrite_partitioned, splice};

use std::ops::Range;

use serde::Serialize;
use thiserror::Error;

use crate::cost::{CostDb, CostError};
use crate::ir::{OpKind, Program, TensorId};
use crate::par::{self, Execution};
use crate::pipeline::{build_stages, simulate_range};
use crate::time::Time;

pub const DEFAULT_MAX_PARTITION: usize = 8;
pub const GROUPS_PER_MOE_SPAN: u64 = 5;

#[derive(Debug, Error)]
pub enum PartitionError {
    #[error("no partition axes satisfy instructions {start}..{end} with k = {k}")]
    Unsatisfiable { start: usize, end: usize, k: usize },
    #[error("instruction {index}: no partition constraint for operator {op}")]
    UnknownOperator { index: usize, op: String },
    #[error("tensor {tensor} would cross the range boundary on the irregular axis")]
    BoundaryOnIrregularAxis { tensor: TensorId },
    #[error("instruction {index} is not in the forward pass")]
    NotForward { index: usize },
    #[error(transparent)]
    Cost(#[from] CostError),
}

/// Consecutive forward instructions treated as one unit by the DP.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct InstructionGroup {
    pub start: usize,
    pub end: usize,
    #[serde(rename = "time_us")]
    pub time: Time,
    /// Holds a whole dispatch → all-to-all → experts → all-to-all → gather core.
    pub moe_core: bool,
}

impl InstructionGroup {
    pub fn range(&self) -> Range<usize> {
        self.start..self.end
    }
}

/// Maximal runs of consecutive forward positions, each split into atomic
/// units: single instructions, or a whole MoE core.
fn forward_units(program: &Program) -> Vec<Vec<(Range<usize>, bool)>> {
    let fwd = program.forward_positions();
    let mut runs: Vec<Vec<usize>> = Vec::new();
    for p in fwd {
        match runs.last_mut() {
            Some(r) if *r.last().unwrap() + 1 == p => r.push(p),
            _ => runs.push(vec![p]),
        }
    }
    runs.into_iter()
        .map(|run| {
            let (lo, hi) = (run[0], *run.last().unwrap() + 1);
            let mut units = Vec::new();
            let mut p = lo;
            while p < hi {
                let core_end = matches!(program.instructions[p].op, OpKind::MoeDispatch)
                    .then(|| (p + 1..hi).find(|&q| matches!(program.instructions[q].op, OpKind::MoeGather)))
                    .flatten();
                match core_end {
                    Some(g) => {
                        units.push((p..g + 1, true));
                        p = g + 1;
                    }
                    None => {
                        units.push((p..p + 1, false));
                        p += 1;
                    }
                }
            }
            units
        })
        .collect()
}

/// Greedy left-to-right packing of forward instructions into groups of
/// total time at most `gamma`. An MoE core always forms a group of its own;
/// an instruction longer than `gamma` sits alone.
pub fn group_instructions(program: &Program, gamma: Time, db: &CostDb) -> Result<Vec<InstructionGroup>, CostError> {
    let costs = db.program_costs(program)?;
    let time = |r: &Range<usize>| -> Time { costs[r.clone()].iter().copied().sum() };
    let mut groups = Vec::new();
    for run in forward_units(program) {
        let mut cur: Option<InstructionGroup> = None;
        for (unit, core) in run {
            let t = time(&unit);
            if core {
                groups.extend(cur.take());
                groups.push(InstructionGroup { start: unit.start, end: unit.end, time: t, moe_core: true });
                continue;
            }
            match &mut cur {
                Some(g) if g.time + t <= gamma => {
                    g.end = unit.end;
                    g.time += t;
                }
                _ => {
                    groups.extend(cur.take());
                    cur = Some(InstructionGroup { start: unit.start, end: unit.end, time: t, moe_core: false });
                }
            }
        }
        groups.extend(cur);
    }
    Ok(groups)
}

/// Hyper-parameters of the partition pass. `None` selects the default.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PartitionParams {
    /// Maximum partition count K.
    pub max_k: usize,
    /// Group time budget γ.
    pub gamma: Option<Time>,
    /// Maximum range length ι, in groups.
    pub iota: Option<usize>,
    pub exec: Execution,
}

impl Default for PartitionParams {
    fn default() -> Self {
        PartitionParams { max_k: DEFAULT_MAX_PARTITION, gamma: None, iota: None, exec: Execution::Parallel }
    }
}

/// γ giving about five groups per MoE layer span outside the MoE cores.
pub fn default_gamma(program: &Program, db: &CostDb) -> Result<Time, CostError> {
    let costs = db.program_costs(program)?;
    let mut cores = 0u64;
    let mut total = Time::ZERO;
    for (unit, core) in forward_units(program).into_iter().flatten() {
        if core {
            cores += 1;
        } else {
            total += costs[unit].iter().copied().sum();
        }
    }
    let per_span = total.as_nanos() / cores.max(1);
    Ok(Time::from_nanos((per_span / GROUPS_PER_MOE_SPAN).max(1)))
}

/// ι spanning one MoE layer period, in groups.
pub fn default_iota(groups: &[InstructionGroup]) -> usize {
    let cores = groups.iter().filter(|g| g.moe_core).count();
    if cores == 0 {
        groups.len().max(1)
    } else {
        groups.len().div_ceil(cores).max(1)
    }
}

fn contains_a2a(program: &Program, r: Range<usize>) -> bool {
    program.instructions[r].iter().any(|i| i.is_all_to_all())
}

/// Pipelined time of instructions `range` split `k` ways, or `None` when no
/// partitioning exists. `k = 1` is the serial sum.
pub fn evaluate_range(program: &Program, db: &CostDb, range: Range<usize>, k: usize) -> Result<Option<Time>, CostError> {
    if k <= 1 {
        return Ok(Some(db.program_costs(program)?[range].iter().copied().sum()));
    }
    let Ok(axes) = infer_axes(program, range, k) else { return Ok(None) };
    let Ok(frag) = rewrite_partitioned(program, &axes) else { return Ok(None) };
    let schedule = build_stages(&frag, k);
    simulate_range(&schedule, db).map(Some)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PlanEntry {
    /// Group range `[first, last)`.
    pub groups: (usize, usize),
    /// Instruction range `[start, end)` in the input program.
    pub start: usize,
    pub end: usize,
    pub k: usize,
    #[serde(rename = "predicted_us")]
    pub predicted: Time,
    pub axes: Option<AxisAssignment>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PartitionPlan {
    pub entries: Vec<PlanEntry>,
    /// T(N′): predicted forward time with the chosen ranges.
    #[serde(rename = "predicted_forward_us")]
    pub predicted_forward: Time,
    #[serde(rename = "serial_forward_us")]
    pub serial_forward: Time,
    #[serde(rename = "gamma_us")]
    pub gamma: Time,
    pub iota: usize,
    pub max_k: usize,
    pub groups: Vec<InstructionGroup>,
}

impl PartitionPlan {
    pub fn partitioned(&self) -> impl Iterator<Item = &PlanEntry> {
        self.entries.iter().filter(|e| e.k > 1)
    }
}

/// Candidate costs of every group range of length ≤ ι: `table[n][n - i - 1]`
/// holds `(k, time)` for the range of groups `i..n`.
pub type RangeTable = Vec<Vec<Vec<(usize, Time)>>>;

/// Evaluates every (range, k) choice the DP may take.
pub fn range_table(program: &Program, db: &CostDb, groups: &[InstructionGroup], max_k: usize, iota: usize, exec: Execution) -> Result<RangeTable, CostError> {
    let mut jobs = Vec::new();
    for n in 1..=groups.len() {
        for i in n.saturating_sub(iota)..n {
            let (s, e) = (groups[i].start, groups[n - 1].end);
            let contiguous = groups[i..n].windows(2).all(|w| w[0].end == w[1].start);
            let ks = if contiguous && contains_a2a(program, s..e) { max_k.max(1) } else { 1 };
            for k in 1..=ks {
                jobs.push((n, i, s..e, k));
            }
        }
    }
    let costs = db.program_costs(program)?;
    let results = par::map(exec, &jobs, |(_, _, r, k)| match k {
        1 => Ok(Some(costs[r.clone()].iter().copied().sum())),
        _ => evaluate_range(program, db, r.clone(), *k),
    });
    let mut table: RangeTable = (0..=groups.len()).map(|n| vec![Vec::new(); n.min(iota)]).collect();
    for ((n, i, _, k), t) in jobs.into_iter().zip(results) {
        if let Some(t) = t? {
            table[n][n - i - 1].push((k, t));
        }
    }
    Ok(table)
}

/// Chooses partition ranges and counts minimizing the predicted forward time:
/// T(n) = min over i ∈ [n − ι, n) of T(i) + min_k P(i, n, k).
pub fn dp_select(program: &Program, db: &CostDb, params: &PartitionParams) -> Result<PartitionPlan, PartitionError> {
    let gamma = match params.gamma {
        Some(g) => g,
        None => default_gamma(program, db)?,
    };
    let groups = group_instructions(program, gamma, db)?;
    let iota = params.iota.unwrap_or_else(|| default_iota(&groups)).max(1);
    let max_k = params.max_k.max(1);
    let table = range_table(program, db, &groups, max_k, iota, params.exec)?;

    let n_groups = groups.len();
    let mut best: Vec<Option<(Time, usize, usize, Time)>> = vec![None; n_groups + 1];
    let mut total = vec![Time::ZERO; n_groups + 1];
    for n in 1..=n_groups {
        let mut cur: Option<(Time, usize, usize, Time)> = None;
        for i in n.saturating_sub(iota)..n {
            if i > 0 && best[i].is_none() {
                continue;
            }
            for &(k, p) in &table[n][n - i - 1] {
                let t = total[i] + p;
                if cur.is_none_or(|(c, ..)| t < c) {
                    cur = Some((t, i, k, p));
                }
            }
        }
        best[n] = cur;
        total[n] = cur.map_or(Time::ZERO, |c| c.0);
    }

    let mut entries = Vec::new();
    let mut n = n_groups;
    while n > 0 {
        let (_, i, k, p) = best[n].expect("k = 1 is always available");
        let (start, end) = (groups[i].start, groups[n - 1].end);
        let axes = if k > 1 { Some(infer_axes(program, start..end, k)?) } else { None };
        entries.push(PlanEntry { groups: (i, n), start, end, k, predicted: p, axes });
        n = i;
    }
    entries.reverse();
    let serial_forward = groups.iter().map(|g| g.time).sum();
    Ok(PartitionPlan { entries, predicted_forward: total[n_groups], serial_forward, gamma, iota, max_k, groups })
}

/// Rewrites every partitioned range of `plan` into its pipelined schedule.
pub fn apply_plan(program: &Program, plan: &PartitionPlan) -> Result<Program, PartitionError> {
    let mut out = program.clone();
    for e in plan.entries.iter().rev() {
        let Some(axes) = &e.axes else { continue };
        let frag = rewrite_partitioned(&out, axes)?;
        let schedule = build_stages(&frag, e.k);
        out = splice(&out, e.start..e.end, &schedule.program);
    }
    Ok(out)
}

/// Runs [`dp_select`] and applies the plan.
pub fn partition(program: &Program, db: &CostDb, params: &PartitionParams) -> Result<(Program, PartitionPlan), PartitionError> {
    let plan = dp_select(program, db, params)?;
    Ok((apply_plan(program, &plan)?, plan))
}

//! Partition-axis inference for an instruction range, as a small constraint
//! satisfaction problem solved by chronological backtracking.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::ops::Range;

use serde::{Serialize, Serializer};

use super::PartitionError;
use crate::ir::{AxisLabel, GateKind, Instruction, OpKind, Phase, Program, TensorId};

/// Partition axis of one tensor. Ordered as the search tries values.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Axis {
    /// Not partitioned: every partition sees the whole tensor.
    None,
    Dim(usize),
    /// Split by routing outcome rather than by a fixed dimension.
    Irregular,
}

impl Serialize for Axis {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Axis::None => s.serialize_i64(-1),
            Axis::Dim(d) => s.serialize_u64(*d as u64),
            Axis::Irregular => s.serialize_str("irr"),
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Axis::None => write!(f, "none"),
            Axis::Dim(d) => write!(f, "{d}"),
            Axis::Irregular => write!(f, "irr"),
        }
    }
}

/// Axes of every tensor a range touches.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct AxisAssignment {
    pub start: usize,
    pub end: usize,
    pub k: usize,
    pub tensors: BTreeMap<TensorId, Axis>,
}

/// Axes of one instruction's slots.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SlotAxes {
    pub inputs: Vec<Axis>,
    pub outputs: Vec<Axis>,
}

impl AxisAssignment {
    pub fn range(&self) -> Range<usize> {
        self.start..self.end
    }

    pub fn axis(&self, t: TensorId) -> Axis {
        self.tensors.get(&t).copied().unwrap_or(Axis::None)
    }

    /// Per-instruction, per-slot view.
    pub fn slots(&self, program: &Program) -> Vec<SlotAxes> {
        program.instructions[self.range()]
            .iter()
            .map(|i| SlotAxes {
                inputs: i.inputs.iter().map(|t| self.axis(*t)).collect(),
                outputs: i.outputs.iter().map(|t| self.axis(*t)).collect(),
            })
            .collect()
    }
}

/// Whether the range consists only of all-to-alls and expert computations,
/// which admits partitioning along the capacity axis.
pub fn is_capacity_range(instrs: &[Instruction]) -> bool {
    !instrs.is_empty() && instrs.iter().all(|i| matches!(i.op, OpKind::AllToAll | OpKind::ExpertFfn))
}

fn cap_axis(program: &Program, t: TensorId) -> Axis {
    program.tensor(t).axis_of(AxisLabel::Capacity).map_or(Axis::Irregular, Axis::Dim)
}

/// Allowed slot tuples (inputs then outputs) of one instruction, before
/// domain filtering. Tuples whose outputs are all unpartitioned are left out:
/// every instruction of a partitioned range must actually be split.
pub fn allowed_tuples(program: &Program, instr: &Instruction, capacity_range: bool) -> Result<Vec<Vec<Axis>>, PartitionError> {
    use Axis::{Dim, Irregular as Irr, None as No};
    let rank = |t: TensorId| program.tensor(t).rank();
    let (ni, no) = (instr.inputs.len(), instr.outputs.len());
    let unknown = || PartitionError::UnknownOperator { index: instr.index, op: instr.op.signature() };
    let arity = |i: usize, o: usize| if ni == i && no == o { Ok(()) } else { Err(unknown()) };
    let uniform = |dims: Vec<usize>| -> Vec<Vec<Axis>> { dims.into_iter().map(|d| vec![Dim(d); ni + no]).collect() };
    let min_rank = instr.inputs.iter().chain(&instr.outputs).map(|t| rank(*t)).min().unwrap_or(0);

    let tuples = match &instr.op {
        OpKind::Matmul => {
            arity(2, 1)?;
            vec![vec![Dim(0), No, Dim(0)], vec![No, Dim(1), Dim(1)]]
        }
        OpKind::Elementwise { .. } => uniform((0..min_rank).collect()),
        OpKind::LayerNorm | OpKind::Softmax => {
            arity(1, 1)?;
            uniform((0..min_rank.saturating_sub(1)).collect())
        }
        OpKind::Gate { gate } => {
            arity(2, 1)?;
            match gate {
                GateKind::Switch | GateKind::Random => vec![vec![Dim(0), No, Irr]],
                GateKind::BatchPrioritized => vec![],
            }
        }
        OpKind::MoeDispatch => {
            arity(2, 1)?;
            vec![vec![Dim(0), Irr, Irr], vec![Dim(0), Dim(0), Irr]]
        }
        OpKind::AllToAll => {
            arity(1, 1)?;
            if capacity_range {
                vec![vec![cap_axis(program, instr.inputs[0]), cap_axis(program, instr.outputs[0])]]
            } else {
                vec![vec![Irr, Irr]]
            }
        }
        OpKind::ExpertFfn => {
            arity(3, 1)?;
            if capacity_range {
                vec![vec![cap_axis(program, instr.inputs[0]), No, No, cap_axis(program, instr.outputs[0])]]
            } else {
                vec![vec![Irr, No, No, Irr]]
            }
        }
        OpKind::MoeGather => {
            arity(2, 1)?;
            vec![vec![Irr, Irr, Dim(0)], vec![Irr, Dim(0), Dim(0)]]
        }
        OpKind::Split { axis, .. } | OpKind::Concat { axis } => uniform((0..min_rank).filter(|d| d != axis).collect()),
        OpKind::WeightGrad { .. } | OpKind::Other { .. } => return Err(unknown()),
    };
    Ok(tuples.into_iter().filter(|t| t[ni..].iter().any(|a| *a != No)).collect())
}

/// Finds the first axis assignment for `range` split `k` ways.
///
/// Variables are the range's tensors in order of first appearance
/// (instruction, then slot); values are tried in the order
/// none < dim 0 < dim 1 < … < irregular.
pub fn infer_axes(program: &Program, range: Range<usize>, k: usize) -> Result<AxisAssignment, PartitionError> {
    let instrs = &program.instructions[range.clone()];
    if let Some(i) = instrs.iter().find(|i| i.phase != Phase::Forward) {
        return Err(PartitionError::NotForward { index: i.index });
    }
    let capacity_range = is_capacity_range(instrs);
    let tuples: Vec<Vec<Vec<Axis>>> = instrs.iter().map(|i| allowed_tuples(program, i, capacity_range)).collect::<Result<_, _>>()?;

    let produced: BTreeSet<TensorId> = instrs.iter().flat_map(|i| i.outputs.iter().copied()).collect();
    let consumers = program.consumers();
    let mut vars: Vec<TensorId> = Vec::new();
    let mut var_of: BTreeMap<TensorId, usize> = BTreeMap::new();
    for i in instrs {
        for &t in i.inputs.iter().chain(&i.outputs) {
            if let std::collections::btree_map::Entry::Vacant(e) = var_of.entry(t) {
                e.insert(vars.len());
                vars.push(t);
            }
        }
    }

    let domains: Vec<Vec<Axis>> = vars
        .iter()
        .map(|&t| {
            let info = program.tensor(t);
            let users = consumers.get(&t).map_or(&[][..], Vec::as_slice);
            let outside: Vec<usize> = users.iter().copied().filter(|p| !range.contains(p)).collect();
            // Irregular tensors cannot cross the range entry, nor leave it
            // towards forward code; backward-only exits are merged.
            let irr_ok = produced.contains(&t)
                && !users.is_empty()
                && outside.iter().all(|&p| program.instructions[p].phase != Phase::Forward);
            let mut d = vec![Axis::None];
            d.extend((0..info.rank()).filter(|&a| info.shape[a] >= k).map(Axis::Dim));
            if irr_ok {
                d.push(Axis::Irregular);
            }
            d
        })
        .collect();

    // slot_vars[j]: variable index of each slot of instruction j.
    let slot_vars: Vec<Vec<usize>> = instrs.iter().map(|i| i.inputs.iter().chain(&i.outputs).map(|t| var_of[t]).collect()).collect();
    let mut touching: Vec<Vec<usize>> = vec![Vec::new(); vars.len()];
    for (j, sv) in slot_vars.iter().enumerate() {
        for &v in sv {
            if touching[v].last() != Some(&j) {
                touching[v].push(j);
            }
        }
    }

    let mut value: Vec<Option<Axis>> = vec![None; vars.len()];
    let consistent = |value: &[Option<Axis>], j: usize| {
        tuples[j].iter().any(|tup| slot_vars[j].iter().zip(tup).all(|(&v, a)| value[v].is_none_or(|x| x == *a)))
    };

    // Iterative backtracking: choice[v] is the index into domains[v].
    let mut choice = vec![0usize; vars.len()];
    let mut v = 0usize;
    loop {
        if v == vars.len() {
            break;
        }
        let mut placed = false;
        while choice[v] < domains[v].len() {
            value[v] = Some(domains[v][choice[v]]);
            if touching[v].iter().all(|&j| consistent(&value, j)) {
                placed = true;
                break;
            }
            choice[v] += 1;
        }
        if placed {
            v += 1;
        } else {
            value[v] = None;
            choice[v] = 0;
            if v == 0 {
                return Err(PartitionError::Unsatisfiable { start: range.start, end: range.end, k });
            }
            v -= 1;
            choice[v] += 1;
        }
    }
    Ok(AxisAssignment {
        start: range.start,
        end: range.end,
        k,
        tensors: vars.iter().zip(value).map(|(t, a)| (*t, a.expect("every variable assigned"))).collect(),
    })
}

use std::collections::{BTreeMap, BTreeSet};

use super::axes::{Axis, AxisAssignment};
use super::PartitionError;
use crate::cost::profile_of;
use crate::ir::{AxisLabel, Instruction, OpKind, PartitionInfo, Phase, Program, TensorId, TensorInfo, IRREGULAR_MERGE};
use crate::moe::even_sizes;

struct Fresh<'a> {
    program: &'a mut Program,
    next: u32,
}

impl Fresh<'_> {
    fn tensor(&mut self, shape: Vec<usize>, labels: Vec<AxisLabel>, dtype_bytes: usize) -> TensorId {
        let id = TensorId(self.next);
        self.next += 1;
        self.program.tensors.insert(id, TensorInfo::new(id, shape, labels, dtype_bytes));
        id
    }

    fn like(&mut self, t: &TensorInfo, axis: Option<usize>, extent: usize) -> TensorId {
        let mut shape = t.shape.clone();
        if let Some(a) = axis {
            shape[a] = extent;
        }
        self.tensor(shape, t.axis_labels.clone(), t.dtype_bytes)
    }
}

/// Rewrites the range of `axes` into `axes.k` partitions.
///
/// Returns a fragment program (the full tensor table, only the new
/// instructions) laid out as: entry splits, then partition-major clones, then
/// exit concats or merges. Rebuilt exits keep their original tensor ids, so
/// the fragment can replace the range in place.
pub fn rewrite_partitioned(program: &Program, axes: &AxisAssignment) -> Result<Program, PartitionError> {
    let range = axes.range();
    let k = axes.k;
    let instrs = &program.instructions[range.clone()];
    let mut frag = program.clone();
    frag.instructions.clear();
    if k <= 1 {
        frag.instructions = instrs.to_vec();
        return Ok(frag);
    }

    let produced: BTreeSet<TensorId> = instrs.iter().flat_map(|i| i.outputs.iter().copied()).collect();
    let consumers = program.consumers();
    let next = program.next_tensor_id().0;
    let mut fresh = Fresh { program: &mut frag, next };
    let mut out: Vec<Instruction> = Vec::new();
    let mut map: Vec<BTreeMap<TensorId, TensorId>> = vec![BTreeMap::new(); k];

    let mut seen = BTreeSet::new();
    for instr in instrs {
        for &t in &instr.inputs {
            if produced.contains(&t) || !seen.insert(t) {
                continue;
            }
            match axes.axis(t) {
                Axis::None => map.iter_mut().for_each(|m| {
                    m.insert(t, t);
                }),
                Axis::Dim(d) => {
                    let info = program.tensor(t).clone();
                    let parts: Vec<TensorId> = even_sizes(info.shape[d], k).into_iter().map(|sz| fresh.like(&info, Some(d), sz)).collect();
                    for (p, id) in parts.iter().enumerate() {
                        map[p].insert(t, *id);
                    }
                    out.push(Instruction::new(OpKind::Split { axis: d, parts: k }, vec![t], parts, instr.layer, Phase::Forward));
                }
                Axis::Irregular => return Err(PartitionError::BoundaryOnIrregularAxis { tensor: t }),
            }
        }
    }

    let mut chain: BTreeMap<usize, TensorId> = BTreeMap::new();
    for p in 0..k {
        for (off, instr) in instrs.iter().enumerate() {
            let mut inputs: Vec<TensorId> = instr.inputs.iter().map(|t| map[p][t]).collect();
            let mut outputs = Vec::with_capacity(instr.outputs.len() + 1);
            for &t in &instr.outputs {
                let info = program.tensor(t).clone();
                let id = match axes.axis(t) {
                    Axis::None if p == 0 => t,
                    Axis::None => fresh.like(&info, None, 0),
                    Axis::Dim(d) => fresh.like(&info, Some(d), even_sizes(info.shape[d], k)[p]),
                    Axis::Irregular if matches!(instr.op, OpKind::Gate { .. }) => {
                        let rows = fresh.program.tensor(inputs[0]).shape[0];
                        fresh.like(&info, Some(0), rows)
                    }
                    Axis::Irregular => fresh.like(&info, None, 0),
                };
                map[p].insert(t, id);
                outputs.push(id);
            }
            if matches!(instr.op, OpKind::Gate { .. }) {
                if p > 0 {
                    inputs.push(chain[&off]);
                }
                if p + 1 < k {
                    let experts = program.tensor(instr.inputs[1]).shape.last().copied().unwrap_or(1);
                    let state = fresh.tensor(vec![experts + 1], vec![AxisLabel::Other], 4);
                    outputs.push(state);
                    chain.insert(off, state);
                }
            }
            out.push(Instruction {
                index: 0,
                op: instr.op.clone(),
                inputs,
                outputs,
                layer: instr.layer,
                phase: instr.phase,
                partition: Some(PartitionInfo { index: p, count: k, origin: profile_of(program, instr) }),
            });
        }
    }

    for instr in instrs {
        for &t in &instr.outputs {
            let users = consumers.get(&t).map_or(&[][..], Vec::as_slice);
            let leaves = users.is_empty() || users.iter().any(|u| !range.contains(u));
            if !leaves {
                continue;
            }
            let parts: Vec<TensorId> = map.iter().map(|m| m[&t]).collect();
            match axes.axis(t) {
                Axis::None => {}
                Axis::Dim(d) => out.push(Instruction::new(OpKind::Concat { axis: d }, parts, vec![t], instr.layer, Phase::Forward)),
                Axis::Irregular => {
                    let forward_use = users.is_empty() || users.iter().any(|&u| !range.contains(&u) && program.instructions[u].phase == Phase::Forward);
                    if forward_use {
                        return Err(PartitionError::BoundaryOnIrregularAxis { tensor: t });
                    }
                    out.push(Instruction::new(OpKind::Other { name: IRREGULAR_MERGE.into() }, parts, vec![t], instr.layer, Phase::Forward));
                }
            }
        }
    }

    frag.instructions = out;
    frag.renumber();
    Ok(frag)
}

/// Replaces `range` of `program` with the instructions of `fragment` and
/// drops tensors nothing refers to any more.
pub fn splice(program: &Program, range: std::ops::Range<usize>, fragment: &Program) -> Program {
    let mut p = fragment.clone();
    p.instructions = program.instructions[..range.start]
        .iter()
        .chain(&fragment.instructions)
        .chain(&program.instructions[range.end..])
        .cloned()
        .collect();
    let used: BTreeSet<TensorId> = p
        .instructions
        .iter()
        .flat_map(|i| i.inputs.iter().chain(&i.outputs).copied())
        .chain(p.inputs.iter().copied())
        .chain(p.params.iter().copied())
        .collect();
    p.tensors.retain(|id, _| used.contains(id));
    p.renumber();
    p
}

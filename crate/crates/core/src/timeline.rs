//! The two-lane timing rule: an instruction starts once every instruction it
//! depends on has finished and the previous instruction of its lane (in
//! list order) has finished.

use crate::ir::{Lane, Program};
use crate::time::Time;

/// Start/end of each instruction of `program`, in list order.
///
/// Inputs with no producer in `program` are available at time zero.
pub fn lane_times(program: &Program, costs: &[Time]) -> Vec<(Time, Time)> {
    let producers = program.producers();
    let mut out: Vec<(Time, Time)> = Vec::with_capacity(program.len());
    let mut lane_free = [Time::ZERO; 2];
    for (pos, instr) in program.instructions.iter().enumerate() {
        let lane = lane_slot(instr.lane());
        let mut start = lane_free[lane];
        for t in &instr.inputs {
            if let Some(&p) = producers.get(t) {
                if p < pos {
                    start = start.max(out[p].1);
                }
            }
        }
        let end = start + costs[pos];
        lane_free[lane] = end;
        out.push((start, end));
    }
    out
}

pub(crate) fn lane_slot(lane: Lane) -> usize {
    match lane {
        Lane::Compute => 0,
        Lane::Network => 1,
    }
}

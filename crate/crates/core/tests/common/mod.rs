//! Generators and independent oracles shared by the integration tests.
#![allow(dead_code)]

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap, HashSet, VecDeque};

use moe_overlap::graphgen::{self, ModelConfig};
use moe_overlap::ir::{AxisLabel, GateKind, Instruction, Lane, OpKind, Phase, Program, ProgramBuilder, TensorId};
use moe_overlap::partition::{Axis, AxisAssignment};
use moe_overlap::Time;
use rand::Rng;

pub fn tiny(gate: GateKind) -> Program {
    let mut cfg = graphgen::preset("tiny", 2).unwrap();
    cfg.gate = gate;
    graphgen::generate(&cfg).unwrap()
}

/// Small configurations the reference interpreter can execute.
pub fn small_configs() -> Vec<(String, ModelConfig)> {
    let base = graphgen::preset("tiny", 2).unwrap();
    let mut out = Vec::new();
    for gate in [GateKind::Switch, GateKind::Random, GateKind::BatchPrioritized] {
        out.push((format!("tiny-{gate:?}"), ModelConfig { gate, ..base.clone() }));
    }
    out.push(("tiny-4dev".into(), ModelConfig { gpus: 4, batch: 3, seq: 4, capacity_factor: 0.75, ..base.clone() }));
    out.push(("tiny-2moe".into(), ModelConfig { layers: 4, hidden: 6, capacity_factor: 1.5, gate: GateKind::Random, ..base.clone() }));
    out.push(("tiny-2local".into(), ModelConfig { experts_per_device: 2, capacity_factor: 0.5, ..base.clone() }));
    out.push(("tiny-dense".into(), ModelConfig { moe_every: 100, ..base }));
    out
}

/// Random straight-line backward-style program mixing compute, all-to-all
/// and weight-gradient instructions.
pub fn random_program(rng: &mut impl Rng, n: usize) -> Program {
    let mut b = ProgramBuilder::new();
    let mut pool: Vec<TensorId> = (0..rng.gen_range(1..=2)).map(|_| b.input(vec![4], vec![AxisLabel::Other], 4)).collect();
    for _ in 0..n {
        let roll = rng.gen_range(0..8);
        let (op, phase) = match roll {
            0..=3 => (OpKind::Other { name: "op".into() }, Phase::BackwardDx),
            4 | 5 => (OpKind::AllToAll, Phase::BackwardDx),
            _ => (OpKind::WeightGrad { forward_layer: 0 }, Phase::BackwardDw),
        };
        let arity = if matches!(op, OpKind::AllToAll) { 1 } else { rng.gen_range(1..=2) };
        let mut inputs = Vec::new();
        for _ in 0..arity {
            let t = pool[rng.gen_range(0..pool.len())];
            if !inputs.contains(&t) {
                inputs.push(t);
            }
        }
        let y = b.tensor(vec![rng.gen_range(1..=8)], vec![AxisLabel::Other], 4);
        // Like real weight gradients, dW results feed nothing downstream.
        if phase != Phase::BackwardDw {
            pool.push(y);
        }
        b.push(Instruction::new(op, inputs, vec![y], 0, phase));
    }
    b.finish()
}

/// Whole-microsecond costs.
pub fn random_costs(rng: &mut impl Rng, n: usize) -> Vec<Time> {
    (0..n).map(|_| Time::from_us(rng.gen_range(0..=100) as f64)).collect()
}

/// Discrete-event simulation of two serial resources: each lane runs its
/// instructions in list order; an instruction starts at the first event at
/// which its lane is idle and all its producers have completed.
pub fn event_queue_sim(program: &Program, costs: &[Time]) -> Vec<(Time, Time)> {
    let n = program.instructions.len();
    let mut producer: HashMap<TensorId, usize> = HashMap::new();
    for (i, ins) in program.instructions.iter().enumerate() {
        for o in &ins.outputs {
            producer.entry(*o).or_insert(i);
        }
    }
    let deps: Vec<Vec<usize>> = program
        .instructions
        .iter()
        .enumerate()
        .map(|(j, ins)| ins.inputs.iter().filter_map(|t| producer.get(t).copied()).filter(|&p| p < j).collect())
        .collect();
    let lane_of = |j: usize| usize::from(program.instructions[j].lane() == Lane::Network);
    let mut queues = [VecDeque::new(), VecDeque::new()];
    for j in 0..n {
        queues[lane_of(j)].push_back(j);
    }
    let mut finished = vec![false; n];
    let mut times = vec![(Time::ZERO, Time::ZERO); n];
    let mut busy = [false; 2];
    let mut events: BinaryHeap<Reverse<(Time, usize)>> = BinaryHeap::new();
    let mut now = Time::ZERO;
    loop {
        for lane in 0..2 {
            if busy[lane] {
                continue;
            }
            if let Some(&j) = queues[lane].front() {
                if deps[j].iter().all(|&d| finished[d]) {
                    queues[lane].pop_front();
                    busy[lane] = true;
                    times[j] = (now, now + costs[j]);
                    events.push(Reverse((now + costs[j], j)));
                }
            }
        }
        let Some(Reverse((t, j))) = events.pop() else { break };
        now = t;
        finished[j] = true;
        busy[lane_of(j)] = false;
    }
    assert!(finished.iter().all(|&f| f), "event simulation deadlocked");
    times
}

fn cap_dim(p: &Program, t: TensorId) -> Option<Axis> {
    p.tensor(t).axis_of(AxisLabel::Capacity).map(Axis::Dim)
}

/// Re-checks an axis assignment clause by clause. Returns a description of
/// the first violated rule.
pub fn recheck_axes(p: &Program, a: &AxisAssignment) -> Result<(), String> {
    use Axis::{Dim, Irregular as Irr, None as No};
    let range = a.start..a.end;
    let instrs = &p.instructions[range.clone()];
    let capacity_range = instrs.iter().all(|i| matches!(i.op, OpKind::AllToAll | OpKind::ExpertFfn));
    let produced: HashSet<TensorId> = instrs.iter().flat_map(|i| i.outputs.iter().copied()).collect();
    let mut users: HashMap<TensorId, Vec<usize>> = HashMap::new();
    for (j, i) in p.instructions.iter().enumerate() {
        for t in &i.inputs {
            users.entry(*t).or_default().push(j);
        }
    }

    for i in instrs {
        if i.phase != Phase::Forward {
            return Err(format!("instruction {} is not forward", i.index));
        }
        for &t in i.inputs.iter().chain(&i.outputs) {
            match a.axis(t) {
                Dim(d) => {
                    let shape = &p.tensor(t).shape;
                    if d >= shape.len() || shape[d] < a.k {
                        return Err(format!("{t}: axis {d} cannot hold {} parts of {shape:?}", a.k));
                    }
                }
                Irr if !produced.contains(&t) => return Err(format!("{t}: irregular on range entry")),
                Irr => {
                    let us = users.get(&t).cloned().unwrap_or_default();
                    if us.is_empty() || us.iter().any(|&u| !range.contains(&u) && p.instructions[u].phase == Phase::Forward) {
                        return Err(format!("{t}: irregular tensor leaves the range forward"));
                    }
                }
                No => {}
            }
        }
        let ins: Vec<Axis> = i.inputs.iter().map(|t| a.axis(*t)).collect();
        let outs: Vec<Axis> = i.outputs.iter().map(|t| a.axis(*t)).collect();
        let all: Vec<Axis> = ins.iter().chain(&outs).copied().collect();
        let all_none = all.iter().all(|x| *x == No);
        let uniform = all.windows(2).all(|w| w[0] == w[1]);
        let ok = all_none
            || match &i.op {
                OpKind::Matmul => all == [Dim(0), No, Dim(0)] || all == [No, Dim(1), Dim(1)],
                OpKind::Elementwise { .. } => uniform && matches!(all[0], Dim(_)),
                OpKind::LayerNorm | OpKind::Softmax => {
                    uniform && matches!(all[0], Dim(d) if d + 1 < p.tensor(i.inputs[0]).shape.len())
                }
                OpKind::Gate { gate: GateKind::BatchPrioritized } => false,
                OpKind::Gate { .. } => all == [Dim(0), No, Irr],
                OpKind::MoeDispatch => ins[0] == Dim(0) && matches!(ins[1], Irr | Dim(0)) && outs[0] == Irr,
                OpKind::AllToAll if capacity_range => {
                    Some(ins[0]) == cap_dim(p, i.inputs[0]) && Some(outs[0]) == cap_dim(p, i.outputs[0])
                }
                OpKind::AllToAll => ins[0] == Irr && outs[0] == Irr,
                OpKind::ExpertFfn => {
                    let weights = ins[1..].iter().all(|x| *x == No);
                    let data = if capacity_range {
                        Some(ins[0]) == cap_dim(p, i.inputs[0]) && Some(outs[0]) == cap_dim(p, i.outputs[0])
                    } else {
                        ins[0] == Irr && outs[0] == Irr
                    };
                    weights && data
                }
                OpKind::MoeGather => ins[0] == Irr && matches!(ins[1], Irr | Dim(0)) && outs[0] == Dim(0),
                OpKind::Split { axis, .. } | OpKind::Concat { axis } => {
                    uniform && matches!(all[0], Dim(d) if d != *axis)
                }
                OpKind::WeightGrad { .. } | OpKind::Other { .. } => false,
            };
        if !ok {
            return Err(format!("instruction {} ({}) violates its constraint with {all:?}", i.index, i.op.signature()));
        }
    }
    Ok(())
}

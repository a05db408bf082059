use std::collections::BTreeMap;
use std::fmt;

use super::types::{OpKind, Phase, Program, TensorId};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Rule {
    /// Instruction `index` field disagrees with its position.
    IndexOrder,
    DanglingUse(TensorId),
    TopologicalOrder { tensor: TensorId, producer: usize },
    MultipleDefinition(TensorId),
    UndeclaredOutput(TensorId),
    /// A program input or parameter is also produced by an instruction.
    DefinedInput(TensorId),
    PhaseMismatch,
    ShapeLabels(TensorId),
    EmptyTensor(TensorId),
    /// The same tensor listed twice among one instruction's outputs.
    DuplicateOutput(TensorId),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    /// Position of the offending instruction; `None` for tensor-table problems.
    pub instruction: Option<usize>,
    pub rule: Rule,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.instruction {
            Some(i) => write!(f, "instruction {i}: ")?,
            None => write!(f, "tensor table: ")?,
        }
        match &self.rule {
            Rule::IndexOrder => write!(f, "index field does not match position"),
            Rule::DanglingUse(t) => write!(f, "dangling use of {t}"),
            Rule::TopologicalOrder { tensor, producer } => {
                write!(f, "topological order: {tensor} is defined later by instruction {producer}")
            }
            Rule::MultipleDefinition(t) => write!(f, "{t} defined more than once"),
            Rule::UndeclaredOutput(t) => write!(f, "output {t} missing from tensor table"),
            Rule::DefinedInput(t) => write!(f, "{t} is a program input or parameter but is also defined"),
            Rule::PhaseMismatch => write!(f, "phase backward_dW must coincide with a weight_grad op"),
            Rule::ShapeLabels(t) => write!(f, "{t} has shape/axis_labels length mismatch"),
            Rule::EmptyTensor(t) => write!(f, "{t} has zero byte size"),
            Rule::DuplicateOutput(t) => write!(f, "{t} listed twice as an output"),
        }
    }
}

/// Checks every structural invariant of a program. Returns all violations
/// found; an empty list means the program is well formed.
pub fn validate(program: &Program) -> Vec<Violation> {
    let mut out = Vec::new();

    for (id, info) in &program.tensors {
        if info.shape.len() != info.axis_labels.len() || info.id != *id {
            out.push(Violation { instruction: None, rule: Rule::ShapeLabels(*id) });
        }
        if info.bytes() == 0 {
            out.push(Violation { instruction: None, rule: Rule::EmptyTensor(*id) });
        }
    }

    // First definition of each tensor; later ones are reported as duplicates.
    let mut defined_at: BTreeMap<TensorId, usize> = BTreeMap::new();
    for (pos, instr) in program.instructions.iter().enumerate() {
        for (slot, &t) in instr.outputs.iter().enumerate() {
            if instr.outputs[..slot].contains(&t) {
                out.push(Violation { instruction: Some(pos), rule: Rule::DuplicateOutput(t) });
                continue;
            }
            if defined_at.contains_key(&t) {
                out.push(Violation { instruction: Some(pos), rule: Rule::MultipleDefinition(t) });
            } else {
                defined_at.insert(t, pos);
            }
        }
    }

    for (pos, instr) in program.instructions.iter().enumerate() {
        if instr.index != pos {
            out.push(Violation { instruction: Some(pos), rule: Rule::IndexOrder });
        }
        let is_dw = matches!(instr.op, OpKind::WeightGrad { .. });
        if is_dw != (instr.phase == Phase::BackwardDw) {
            out.push(Violation { instruction: Some(pos), rule: Rule::PhaseMismatch });
        }
        for &t in &instr.inputs {
            let external = program.inputs.contains(&t) || program.params.contains(&t);
            match defined_at.get(&t) {
                Some(&p) if p >= pos => out.push(Violation {
                    instruction: Some(pos),
                    rule: Rule::TopologicalOrder { tensor: t, producer: p },
                }),
                Some(_) => {}
                None if external && program.tensors.contains_key(&t) => {}
                None => out.push(Violation { instruction: Some(pos), rule: Rule::DanglingUse(t) }),
            }
        }
        for &t in &instr.outputs {
            if !program.tensors.contains_key(&t) {
                out.push(Violation { instruction: Some(pos), rule: Rule::UndeclaredOutput(t) });
            }
            if (program.inputs.contains(&t) || program.params.contains(&t)) && defined_at.get(&t) == Some(&pos) {
                out.push(Violation { instruction: Some(pos), rule: Rule::DefinedInput(t) });
            }
        }
    }

    for &t in program.inputs.iter().chain(program.params.iter()) {
        if !program.tensors.contains_key(&t) {
            out.push(Violation { instruction: None, rule: Rule::DanglingUse(t) });
        }
    }
    out
}

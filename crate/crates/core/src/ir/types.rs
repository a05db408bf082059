use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

pub const IR_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TensorId(pub u32);

impl fmt::Display for TensorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "%{}", self.0)
    }
}

/// Semantic label of one tensor dimension.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AxisLabel {
    #[serde(rename = "B")]
    Batch,
    #[serde(rename = "S")]
    Sequence,
    #[serde(rename = "H")]
    Hidden,
    #[serde(rename = "E")]
    Expert,
    #[serde(rename = "C")]
    Capacity,
    #[serde(rename = "other")]
    Other,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub id: TensorId,
    pub shape: Vec<usize>,
    pub axis_labels: Vec<AxisLabel>,
    pub dtype_bytes: usize,
}

impl TensorInfo {
    pub fn new(id: TensorId, shape: Vec<usize>, axis_labels: Vec<AxisLabel>, dtype_bytes: usize) -> Self {
        TensorInfo { id, shape, axis_labels, dtype_bytes }
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn elements(&self) -> u64 {
        self.shape.iter().map(|&d| d as u64).product()
    }

    pub fn bytes(&self) -> u64 {
        self.elements() * self.dtype_bytes as u64
    }

    /// First dimension carrying `label`, if any.
    pub fn axis_of(&self, label: AxisLabel) -> Option<usize> {
        self.axis_labels.iter().position(|&l| l == label)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateKind {
    Switch,
    BatchPrioritized,
    Random,
}

impl GateKind {
    /// Whether routing can be split into micro-batches with capacity passing
    /// and still drop exactly the same tokens.
    pub fn supports_micro_batching(self) -> bool {
        !matches!(self, GateKind::BatchPrioritized)
    }
}

impl std::str::FromStr for GateKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "switch" => Ok(GateKind::Switch),
            "batch_prioritized" | "bpr" => Ok(GateKind::BatchPrioritized),
            "random" => Ok(GateKind::Random),
            other => Err(format!("unknown gate kind `{other}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EltFunc {
    Identity,
    Relu,
    Gelu,
    Add,
    Mul,
}

/// Operator of an instruction.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "tag", rename_all = "snake_case")]
pub enum OpKind {
    Matmul,
    Elementwise { func: EltFunc },
    LayerNorm,
    Softmax,
    Gate { gate: GateKind },
    MoeDispatch,
    AllToAll,
    #[serde(rename = "expert_ffn")]
    ExpertFfn,
    MoeGather,
    WeightGrad { forward_layer: u32 },
    Split { axis: usize, parts: usize },
    Concat { axis: usize },
    Other { name: String },
}

/// Name of the merge op the partitioner emits to rebuild an irregularly
/// partitioned activation that only the backward pass consumes.
pub const IRREGULAR_MERGE: &str = "irregular_merge";

impl OpKind {
    pub fn is_communication(&self) -> bool {
        matches!(self, OpKind::AllToAll)
    }

    pub fn lane(&self) -> Lane {
        if self.is_communication() {
            Lane::Network
        } else {
            Lane::Compute
        }
    }

    /// Stable identifier used as the operator part of cost-table keys.
    pub fn signature(&self) -> String {
        match self {
            OpKind::Matmul => "matmul".into(),
            OpKind::Elementwise { func } => format!("elementwise.{}", elt_name(*func)),
            OpKind::LayerNorm => "layer_norm".into(),
            OpKind::Softmax => "softmax".into(),
            OpKind::Gate { gate } => format!("gate.{}", gate_name(*gate)),
            OpKind::MoeDispatch => "moe_dispatch".into(),
            OpKind::AllToAll => "all_to_all".into(),
            OpKind::ExpertFfn => "expert_ffn".into(),
            OpKind::MoeGather => "moe_gather".into(),
            OpKind::WeightGrad { .. } => "weight_grad".into(),
            OpKind::Split { .. } => "split".into(),
            OpKind::Concat { .. } => "concat".into(),
            OpKind::Other { name } => format!("other.{name}"),
        }
    }

    /// Short tag for display (Gantt labels, reports).
    pub fn tag(&self) -> &'static str {
        match self {
            OpKind::Matmul => "matmul",
            OpKind::Elementwise { .. } => "elementwise",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Softmax => "softmax",
            OpKind::Gate { .. } => "gate",
            OpKind::MoeDispatch => "moe_dispatch",
            OpKind::AllToAll => "all_to_all",
            OpKind::ExpertFfn => "expert_ffn",
            OpKind::MoeGather => "moe_gather",
            OpKind::WeightGrad { .. } => "weight_grad",
            OpKind::Split { .. } => "split",
            OpKind::Concat { .. } => "concat",
            OpKind::Other { .. } => "other",
        }
    }
}

fn elt_name(f: EltFunc) -> &'static str {
    match f {
        EltFunc::Identity => "identity",
        EltFunc::Relu => "relu",
        EltFunc::Gelu => "gelu",
        EltFunc::Add => "add",
        EltFunc::Mul => "mul",
    }
}

fn gate_name(g: GateKind) -> &'static str {
    match g {
        GateKind::Switch => "switch",
        GateKind::BatchPrioritized => "batch_prioritized",
        GateKind::Random => "random",
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Forward,
    #[serde(rename = "backward_dX")]
    BackwardDx,
    #[serde(rename = "backward_dW")]
    BackwardDw,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lane {
    Compute,
    Network,
}

/// Cost-relevant description of an operator before partitioning.
///
/// Partitioned clones keep the profile of the instruction they were cloned
/// from, so that cost lookups are keyed by the original shape and the
/// partition count.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OpProfile {
    pub op_signature: String,
    pub shape_signature: String,
    /// Abstract work units for the synthetic cost model (FLOPs or bytes).
    pub work: u64,
    /// Message bytes for communication ops; tensor bytes otherwise.
    pub bytes: u64,
    /// Expert-capacity extent of the message, when it has one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capacity: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PartitionInfo {
    pub index: usize,
    pub count: usize,
    pub origin: OpProfile,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instruction {
    pub index: usize,
    pub op: OpKind,
    pub inputs: Vec<TensorId>,
    pub outputs: Vec<TensorId>,
    pub layer: u32,
    pub phase: Phase,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partition: Option<PartitionInfo>,
}

impl Instruction {
    pub fn new(op: OpKind, inputs: Vec<TensorId>, outputs: Vec<TensorId>, layer: u32, phase: Phase) -> Self {
        Instruction { index: 0, op, inputs, outputs, layer, phase, partition: None }
    }

    pub fn lane(&self) -> Lane {
        self.op.lane()
    }

    pub fn is_all_to_all(&self) -> bool {
        matches!(self.op, OpKind::AllToAll)
    }

    pub fn is_weight_grad(&self) -> bool {
        matches!(self.op, OpKind::WeightGrad { .. })
    }
}

/// A straight-line training iteration.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ProgramFile", into = "ProgramFile")]
pub struct Program {
    pub instructions: Vec<Instruction>,
    pub tensors: BTreeMap<TensorId, TensorInfo>,
    pub inputs: BTreeSet<TensorId>,
    pub params: BTreeSet<TensorId>,
    pub metadata: BTreeMap<String, String>,
}

impl Program {
    pub fn tensor(&self, id: TensorId) -> &TensorInfo {
        &self.tensors[&id]
    }

    pub fn len(&self) -> usize {
        self.instructions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instructions.is_empty()
    }

    pub fn next_tensor_id(&self) -> TensorId {
        TensorId(self.tensors.keys().next_back().map_or(0, |t| t.0 + 1))
    }

    /// Rewrites every instruction's `index` to its position.
    pub fn renumber(&mut self) {
        for (i, instr) in self.instructions.iter_mut().enumerate() {
            instr.index = i;
        }
    }

    /// Map from tensor to the position of the instruction that defines it.
    pub fn producers(&self) -> BTreeMap<TensorId, usize> {
        let mut map = BTreeMap::new();
        for (pos, instr) in self.instructions.iter().enumerate() {
            for &t in &instr.outputs {
                map.entry(t).or_insert(pos);
            }
        }
        map
    }

    /// Map from tensor to the positions of the instructions reading it.
    pub fn consumers(&self) -> BTreeMap<TensorId, Vec<usize>> {
        let mut map: BTreeMap<TensorId, Vec<usize>> = BTreeMap::new();
        for (pos, instr) in self.instructions.iter().enumerate() {
            for &t in &instr.inputs {
                let users = map.entry(t).or_default();
                if users.last() != Some(&pos) {
                    users.push(pos);
                }
            }
        }
        map
    }

    /// Positions of forward-phase instructions.
    pub fn forward_positions(&self) -> Vec<usize> {
        self.instructions
            .iter()
            .enumerate()
            .filter(|(_, i)| i.phase == Phase::Forward)
            .map(|(p, _)| p)
            .collect()
    }

    /// The forward prefix as a standalone program (tensors it does not touch are dropped).
    pub fn forward_only(&self) -> Program {
        let instructions: Vec<Instruction> =
            self.instructions.iter().filter(|i| i.phase == Phase::Forward).cloned().collect();
        let mut used = BTreeSet::new();
        for i in &instructions {
            used.extend(i.inputs.iter().copied());
            used.extend(i.outputs.iter().copied());
        }
        let mut p = Program {
            instructions,
            tensors: self.tensors.iter().filter(|(id, _)| used.contains(id)).map(|(k, v)| (*k, v.clone())).collect(),
            inputs: self.inputs.intersection(&used).copied().collect(),
            params: self.params.intersection(&used).copied().collect(),
            metadata: self.metadata.clone(),
        };
        p.renumber();
        p
    }

    /// Tensors defined by some instruction but read by none.
    pub fn outputs(&self) -> Vec<TensorId> {
        let consumers = self.consumers();
        self.instructions
            .iter()
            .flat_map(|i| i.outputs.iter().copied())
            .filter(|t| !consumers.contains_key(t))
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("program serializes")
    }

    pub fn from_json(text: &str) -> Result<Program, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// On-disk layout of a [`Program`].
#[derive(Serialize, Deserialize)]
struct ProgramFile {
    ir_version: u32,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    metadata: BTreeMap<String, String>,
    tensors: Vec<TensorInfo>,
    instructions: Vec<Instruction>,
    inputs: Vec<TensorId>,
    params: Vec<TensorId>,
}

impl TryFrom<ProgramFile> for Program {
    type Error = String;

    fn try_from(file: ProgramFile) -> Result<Self, Self::Error> {
        if file.ir_version != IR_VERSION {
            return Err(format!("unsupported ir_version {} (expected {IR_VERSION})", file.ir_version));
        }
        let mut tensors = BTreeMap::new();
        for t in file.tensors {
            if tensors.insert(t.id, t.clone()).is_some() {
                return Err(format!("tensor {} declared twice", t.id));
            }
        }
        let mut instructions = file.instructions;
        instructions.sort_by_key(|i| i.index);
        Ok(Program {
            instructions,
            tensors,
            inputs: file.inputs.into_iter().collect(),
            params: file.params.into_iter().collect(),
            metadata: file.metadata,
        })
    }
}

impl From<Program> for ProgramFile {
    fn from(p: Program) -> Self {
        ProgramFile {
            ir_version: IR_VERSION,
            metadata: p.metadata,
            tensors: p.tensors.into_values().collect(),
            instructions: p.instructions,
            inputs: p.inputs.into_iter().collect(),
            params: p.params.into_iter().collect(),
        }
    }
}

/// Incremental construction of a [`Program`] in execution order.
#[derive(Default)]
pub struct ProgramBuilder {
    program: Program,
    next_id: u32,
}

impl ProgramBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn tensor(&mut self, shape: Vec<usize>, labels: Vec<AxisLabel>, dtype_bytes: usize) -> TensorId {
        let id = TensorId(self.next_id);
        self.next_id += 1;
        self.program.tensors.insert(id, TensorInfo::new(id, shape, labels, dtype_bytes));
        id
    }

    pub fn input(&mut self, shape: Vec<usize>, labels: Vec<AxisLabel>, dtype_bytes: usize) -> TensorId {
        let id = self.tensor(shape, labels, dtype_bytes);
        self.program.inputs.insert(id);
        id
    }

    pub fn param(&mut self, shape: Vec<usize>, labels: Vec<AxisLabel>, dtype_bytes: usize) -> TensorId {
        let id = self.tensor(shape, labels, dtype_bytes);
        self.program.params.insert(id);
        id
    }

    pub fn info(&self, id: TensorId) -> &TensorInfo {
        self.program.tensor(id)
    }

    /// Appends an instruction and returns its position.
    pub fn push(&mut self, mut instr: Instruction) -> usize {
        let pos = self.program.instructions.len();
        instr.index = pos;
        self.program.instructions.push(instr);
        pos
    }

    pub fn metadata(&mut self, key: &str, value: impl Into<String>) {
        self.program.metadata.insert(key.to_string(), value.into());
    }

    pub fn finish(self) -> Program {
        self.program
    }
}

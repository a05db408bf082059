//! Execution-time estimates: a profiled per-operator table with a synthetic
//! fallback, and a piecewise-linear communication model.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ir::{AxisLabel, Instruction, OpKind, OpProfile, Program, TensorInfo};
use crate::time::Time;

#[derive(Debug, Error)]
pub enum CostError {
    #[error("no profile for op `{op}` shape `{shape}` k={k}")]
    MissingProfile { op: String, shape: String, k: usize },
    #[error("invalid communication model: {0}")]
    InvalidCommModel(String),
    #[error("invalid cost table entry: {0}")]
    InvalidEntry(String),
    #[error("malformed cost file: {0}")]
    Parse(#[from] serde_json::Error),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct OpCostTable {
    entries: BTreeMap<(String, String, usize), Time>,
}

impl OpCostTable {
    pub fn insert(&mut self, op: &str, shape: &str, k: usize, time: Time) -> Result<(), CostError> {
        if time == Time::ZERO || k == 0 {
            return Err(CostError::InvalidEntry(format!("{op} {shape} k={k}: time must be > 0 and k ≥ 1")));
        }
        self.entries.insert((op.to_string(), shape.to_string(), k), time);
        Ok(())
    }

    pub fn get(&self, op: &str, shape: &str, k: usize) -> Option<Time> {
        self.entries.get(&(op.to_string(), shape.to_string(), k)).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Message size → time, linearly interpolated between profiled points.
#[derive(Clone, Debug, PartialEq)]
pub struct CommCostModel {
    points: Vec<(u64, f64)>,
}

impl CommCostModel {
    pub fn new(points: Vec<(u64, f64)>) -> Result<Self, CostError> {
        if points.len() < 2 {
            return Err(CostError::InvalidCommModel("need at least two points".into()));
        }
        for w in points.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(CostError::InvalidCommModel("message sizes must strictly increase".into()));
            }
        }
        if points.iter().any(|&(_, t)| !(t > 0.0 && t.is_finite())) {
            return Err(CostError::InvalidCommModel("times must be positive".into()));
        }
        Ok(CommCostModel { points })
    }

    pub fn points(&self) -> &[(u64, f64)] {
        &self.points
    }

    /// Exact at profiled points, linear between neighbours, floored at the
    /// first point's time below the range, and extended along the last
    /// segment's slope above it.
    pub fn time_us(&self, bytes: u64) -> f64 {
        let pts = &self.points;
        let seg = match pts.iter().position(|&(b, _)| b >= bytes) {
            Some(0) => 0,
            Some(i) => i - 1,
            None => pts.len() - 2,
        };
        let (b0, t0) = pts[seg];
        let (b1, t1) = pts[seg + 1];
        let slope = (t1 - t0) / (b1 - b0) as f64;
        let t = t0 + slope * (bytes as f64 - b0 as f64);
        if bytes < pts[0].0 {
            t.max(pts[0].1)
        } else {
            t
        }
    }
}

/// Per-class linear model `time = floor + us_per_unit * work`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassRate {
    pub us_per_unit: f64,
    pub floor_us: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SyntheticModel {
    pub classes: BTreeMap<String, ClassRate>,
}

impl SyntheticModel {
    fn rate(&self, class: &str) -> Option<ClassRate> {
        self.classes.get(class).or_else(|| self.classes.get("other")).copied()
    }
}

/// Cost class of an operator signature, used by the synthetic model and
/// per-class overheads.
pub fn cost_class(op_signature: &str) -> &'static str {
    let head = op_signature.split('.').next().unwrap_or("");
    match head {
        "matmul" => "matmul",
        "weight_grad" => "weight_grad",
        "expert_ffn" => "expert",
        "gate" => "gate",
        "layer_norm" | "softmax" => "norm",
        "moe_dispatch" | "moe_gather" => "dispatch",
        "elementwise" | "split" | "concat" => "elementwise",
        "all_to_all" => "comm",
        _ => "other",
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostDb {
    pub ops: OpCostTable,
    pub comm: CommCostModel,
    pub partition_overhead_us: f64,
    pub overhead_by_class: BTreeMap<String, f64>,
    pub fallback: Option<SyntheticModel>,
    /// Multiplier on communication times; 1.0 means no interference.
    pub comm_slowdown: f64,
}

impl CostDb {
    pub fn new(comm: CommCostModel) -> Self {
        CostDb {
            ops: OpCostTable::default(),
            comm,
            partition_overhead_us: 0.0,
            overhead_by_class: BTreeMap::new(),
            fallback: None,
            comm_slowdown: 1.0,
        }
    }

    fn overhead_us(&self, op_signature: &str) -> f64 {
        self.overhead_by_class.get(cost_class(op_signature)).copied().unwrap_or(self.partition_overhead_us)
    }

    /// Time of a computation partitioned into `k` parts (one part's time).
    pub fn op_cost(&self, profile: &OpProfile, k: usize) -> Result<Time, CostError> {
        let k = k.max(1);
        let base = if let Some(t) = self.ops.get(&profile.op_signature, &profile.shape_signature, k) {
            t
        } else if let Some(rate) = self.fallback.as_ref().and_then(|m| m.rate(cost_class(&profile.op_signature))) {
            let work = profile.work.div_ceil(k as u64);
            Time::from_us(rate.floor_us + rate.us_per_unit * work as f64)
        } else {
            return Err(CostError::MissingProfile {
                op: profile.op_signature.clone(),
                shape: profile.shape_signature.clone(),
                k,
            });
        };
        if k > 1 {
            Ok(base + Time::from_us(self.overhead_us(&profile.op_signature)))
        } else {
            Ok(base)
        }
    }

    pub fn comm_cost(&self, bytes: u64) -> Time {
        Time::from_us(self.comm.time_us(bytes) * self.comm_slowdown)
    }

    /// Uniform all-to-all whose capacity is split `k` ways, rounded up.
    pub fn a2a_cost(&self, capacity: u64, token_bytes: u64, k: usize) -> Time {
        let per_part = capacity.div_ceil(k.max(1) as u64);
        self.comm_cost(per_part * token_bytes)
    }

    /// Cost of one instruction as it appears in `program`, honouring any
    /// partition annotation.
    pub fn instruction_cost(&self, program: &Program, instr: &Instruction) -> Result<Time, CostError> {
        let (profile, k) = match &instr.partition {
            Some(p) => (p.origin.clone(), p.count),
            None => (profile_of(program, instr), 1),
        };
        if instr.op.is_communication() {
            Ok(match profile.capacity {
                Some(c) if c > 0 => self.a2a_cost(c, profile.bytes / c, k),
                _ => self.comm_cost(profile.bytes.div_ceil(k as u64)),
            })
        } else {
            self.op_cost(&profile, k)
        }
    }

    /// Costs of every instruction, by position.
    pub fn program_costs(&self, program: &Program) -> Result<Vec<Time>, CostError> {
        program.instructions.iter().map(|i| self.instruction_cost(program, i)).collect()
    }

    pub fn to_file(&self) -> CostFile {
        CostFile {
            op_costs: self
                .ops
                .entries
                .iter()
                .map(|((op, shape, k), t)| OpCostEntry {
                    op_signature: op.clone(),
                    shape_signature: shape.clone(),
                    k: *k,
                    time_us: t.as_us(),
                })
                .collect(),
            comm_points: self.comm.points.iter().map(|&(bytes, time_us)| CommPoint { bytes, time_us }).collect(),
            partition_overhead_us: self.partition_overhead_us,
            overhead_by_class: self.overhead_by_class.clone(),
            synthetic: self.fallback.clone(),
            comm_slowdown: self.comm_slowdown,
        }
    }

    pub fn from_file(file: CostFile) -> Result<Self, CostError> {
        let comm = CommCostModel::new(file.comm_points.iter().map(|p| (p.bytes, p.time_us)).collect())?;
        if file.partition_overhead_us < 0.0 {
            return Err(CostError::InvalidEntry("partition_overhead_us must be ≥ 0".into()));
        }
        let mut db = CostDb::new(comm);
        for e in file.op_costs {
            if !(e.time_us > 0.0) {
                return Err(CostError::InvalidEntry(format!("{} {}: time_us must be > 0", e.op_signature, e.shape_signature)));
            }
            db.ops.insert(&e.op_signature, &e.shape_signature, e.k, Time::from_us(e.time_us))?;
        }
        db.partition_overhead_us = file.partition_overhead_us;
        db.overhead_by_class = file.overhead_by_class;
        db.fallback = file.synthetic;
        db.comm_slowdown = file.comm_slowdown;
        Ok(db)
    }

    pub fn from_json(text: &str) -> Result<Self, CostError> {
        Self::from_file(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("cost file serializes")
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OpCostEntry {
    pub op_signature: String,
    pub shape_signature: String,
    pub k: usize,
    pub time_us: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CommPoint {
    pub bytes: u64,
    pub time_us: f64,
}

/// On-disk cost database.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CostFile {
    #[serde(default)]
    pub op_costs: Vec<OpCostEntry>,
    pub comm_points: Vec<CommPoint>,
    #[serde(default)]
    pub partition_overhead_us: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub overhead_by_class: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticModel>,
    #[serde(default = "one")]
    pub comm_slowdown: f64,
}

fn one() -> f64 {
    1.0
}

fn shape_str(t: &TensorInfo) -> String {
    t.shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

/// Cost-relevant profile of an unpartitioned instruction.
pub fn profile_of(program: &Program, instr: &Instruction) -> OpProfile {
    let ins: Vec<&TensorInfo> = instr.inputs.iter().map(|t| program.tensor(*t)).collect();
    let outs: Vec<&TensorInfo> = instr.outputs.iter().map(|t| program.tensor(*t)).collect();
    let shape_signature = format!(
        "{}->{}",
        ins.iter().map(|t| shape_str(t)).collect::<Vec<_>>().join(","),
        outs.iter().map(|t| shape_str(t)).collect::<Vec<_>>().join(",")
    );
    let bytes_in: u64 = ins.iter().map(|t| t.bytes()).sum();
    let bytes_out: u64 = outs.iter().map(|t| t.bytes()).sum();
    let rows = |t: &TensorInfo| t.elements() / t.shape.last().copied().unwrap_or(1).max(1) as u64;

    let mut capacity = None;
    let (work, bytes) = match &instr.op {
        OpKind::Matmul if ins.len() >= 2 => {
            let (x, w) = (ins[0], ins[1]);
            (2 * rows(x) * w.elements(), bytes_in + bytes_out)
        }
        OpKind::Gate { .. } if ins.len() >= 2 => (2 * rows(ins[0]) * ins[1].elements(), bytes_in + bytes_out),
        OpKind::WeightGrad { .. } if !ins.is_empty() && !outs.is_empty() => {
            let x = ins[0];
            let w = outs[0];
            let local = if w.rank() == 3 { w.shape[0].max(1) as u64 } else { 1 };
            (2 * rows(x) * w.elements() / local, bytes_in + bytes_out)
        }
        OpKind::ExpertFfn if !ins.is_empty() => {
            let rows_in = rows(ins[0]);
            let weights: u64 = instr
                .inputs
                .iter()
                .zip(&ins)
                .filter(|(id, t)| program.params.contains(id) && t.rank() == 3)
                .map(|(_, t)| t.elements() / t.shape[0].max(1) as u64)
                .sum();
            (2 * rows_in * weights, bytes_in + bytes_out)
        }
        OpKind::AllToAll if !ins.is_empty() => {
            let t = ins[0];
            capacity = t.axis_of(AxisLabel::Capacity).map(|a| t.shape[a] as u64);
            (t.bytes(), t.bytes())
        }
        _ => (bytes_in + bytes_out, bytes_in + bytes_out),
    };
    OpProfile { op_signature: instr.op.signature(), shape_signature, work, bytes, capacity }
}

//! Synthetic GPT-2-style MoE training programs and matching cost presets.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::{ClassRate, CommCostModel, CostDb, SyntheticModel};
use crate::ir::{AxisLabel, EltFunc, GateKind, Instruction, OpKind, Phase, Program, ProgramBuilder, TensorId};
use crate::time::Time;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    /// Per-device batch size B and sequence length S.
    pub batch: usize,
    pub seq: usize,
    pub gpus: usize,
    pub experts_per_device: usize,
    pub capacity_factor: f64,
    /// Every `moe_every`-th block carries an MoE layer instead of a dense FFN.
    pub moe_every: usize,
    pub ffn_mult: usize,
    pub gate: GateKind,
    pub dtype_bytes: usize,
}

impl ModelConfig {
    pub fn experts(&self) -> usize {
        self.gpus * self.experts_per_device
    }

    pub fn tokens(&self) -> usize {
        self.batch * self.seq
    }

    /// C = ⌈f · B·S / E⌉ for top-1 routing.
    pub fn capacity(&self) -> usize {
        ((self.capacity_factor * self.tokens() as f64 / self.experts() as f64).ceil() as usize).max(1)
    }

    pub fn is_moe_block(&self, l: usize) -> bool {
        (l + 1).is_multiple_of(self.moe_every)
    }

    pub fn moe_layers(&self) -> usize {
        (0..self.layers).filter(|&l| self.is_moe_block(l)).count()
    }

    /// Parameter tensors: four per dense block, five per MoE block.
    pub fn param_count(&self) -> usize {
        4 * self.layers + self.moe_layers()
    }

    pub fn validate(&self) -> Result<(), GraphError> {
        let bad = |m: &str| Err(GraphError::InvalidConfig(m.to_string()));
        if self.layers == 0 || self.hidden == 0 || self.batch == 0 || self.seq == 0 || self.ffn_mult == 0 {
            return bad("dimensions must be positive");
        }
        if self.gpus == 0 || self.experts_per_device == 0 {
            return bad("gpus and experts_per_device must be positive");
        }
        if self.moe_every == 0 {
            return bad("moe_every must be at least 1");
        }
        if self.capacity_factor.is_nan() || self.capacity_factor <= 0.0 || self.dtype_bytes == 0 {
            return bad("capacity factor and dtype size must be positive");
        }
        Ok(())
    }
}

pub const PRESETS: &[&str] = &["gpt2-s-moe", "gpt2-l-moe", "tiny"];

pub fn preset(name: &str, gpus: usize) -> Result<ModelConfig, GraphError> {
    let base = ModelConfig {
        layers: 12,
        hidden: 768,
        heads: 12,
        batch: 16,
        seq: 512,
        gpus,
        experts_per_device: 1,
        capacity_factor: 1.0,
        moe_every: 2,
        ffn_mult: 4,
        gate: GateKind::Switch,
        dtype_bytes: 2,
    };
    let cfg = match name {
        "gpt2-s-moe" => base,
        "gpt2-l-moe" => ModelConfig { layers: 24, hidden: 1024, heads: 16, batch: 8, ..base },
        "tiny" => ModelConfig { layers: 2, hidden: 8, heads: 1, batch: 2, seq: 8, ffn_mult: 2, ..base },
        other => return Err(GraphError::UnknownPreset(other.to_string())),
    };
    cfg.validate()?;
    Ok(cfg)
}

struct Block {
    input: TensorId,
    ln1: TensorId,
    att: TensorId,
    h1: TensorId,
    ln2: TensorId,
    wqkv: TensorId,
    wo: TensorId,
    ffn: Ffn,
}

enum Ffn {
    Dense { w1: TensorId, w2: TensorId, f1: TensorId, act: TensorId },
    Moe { wg: TensorId, w1e: TensorId, w2e: TensorId, route: TensorId, d2: TensorId, y: TensorId },
}

struct Gen {
    b: ProgramBuilder,
    cfg: ModelConfig,
    n: usize,
    h: usize,
    f: usize,
    e: usize,
    c: usize,
    params: Vec<(TensorId, TensorId)>,
}

use AxisLabel::{Batch as B, Capacity as C, Expert as E, Hidden as H, Other as O};

impl Gen {
    fn act(&mut self, cols: usize) -> TensorId {
        self.b.tensor(vec![self.n, cols], vec![B, H], self.cfg.dtype_bytes)
    }

    fn like(&mut self, t: TensorId) -> TensorId {
        let i = self.b.info(t).clone();
        self.b.tensor(i.shape, i.axis_labels, i.dtype_bytes)
    }

    fn buffer(&mut self) -> TensorId {
        self.b.tensor(vec![self.e, self.c, self.h], vec![E, C, H], self.cfg.dtype_bytes)
    }

    fn emit(&mut self, op: OpKind, inputs: Vec<TensorId>, outputs: Vec<TensorId>, layer: usize, phase: Phase) {
        self.b.push(Instruction::new(op, inputs, outputs, layer as u32, phase));
    }

    fn fwd(&mut self, op: OpKind, inputs: Vec<TensorId>, cols: usize, layer: usize) -> TensorId {
        let y = self.act(cols);
        self.emit(op, inputs, vec![y], layer, Phase::Forward);
        y
    }

    fn dx(&mut self, op: OpKind, inputs: Vec<TensorId>, out: TensorId, layer: usize) -> TensorId {
        let y = self.like(out);
        self.emit(op, inputs, vec![y], layer, Phase::BackwardDx);
        y
    }

    /// dW = f(activation, incoming gradient), shaped like `w`.
    fn dw(&mut self, w: TensorId, act: TensorId, grad: TensorId, layer: usize) {
        let g = self.like(w);
        self.emit(OpKind::WeightGrad { forward_layer: layer as u32 }, vec![act, grad], vec![g], layer, Phase::BackwardDw);
        self.params.push((w, g));
    }

    fn param(&mut self, shape: Vec<usize>, labels: Vec<AxisLabel>) -> TensorId {
        let dt = self.cfg.dtype_bytes;
        self.b.param(shape, labels, dt)
    }

    fn forward_block(&mut self, l: usize, x: TensorId) -> (Block, TensorId) {
        let (h, f) = (self.h, self.f);
        let wqkv = self.param(vec![h, 3 * h], vec![H, O]);
        let wo = self.param(vec![3 * h, h], vec![O, H]);
        let ln1 = self.fwd(OpKind::LayerNorm, vec![x], h, l);
        let qkv = self.fwd(OpKind::Matmul, vec![ln1, wqkv], 3 * h, l);
        let att = self.fwd(OpKind::Softmax, vec![qkv], 3 * h, l);
        let o = self.fwd(OpKind::Matmul, vec![att, wo], h, l);
        let h1 = self.fwd(OpKind::Elementwise { func: EltFunc::Add }, vec![x, o], h, l);
        let ln2 = self.fwd(OpKind::LayerNorm, vec![h1], h, l);
        let (ffn, out) = if self.cfg.is_moe_block(l) {
            let (e, el) = (self.e, self.cfg.experts_per_device);
            let wg = self.param(vec![h, e], vec![H, E]);
            let w1e = self.param(vec![el, h, f], vec![E, H, O]);
            let w2e = self.param(vec![el, f, h], vec![E, O, H]);
            let route = self.b.tensor(vec![self.n, 2], vec![B, O], 4);
            self.emit(OpKind::Gate { gate: self.cfg.gate }, vec![ln2, wg], vec![route], l, Phase::Forward);
            let d = self.buffer();
            self.emit(OpKind::MoeDispatch, vec![ln2, route], vec![d], l, Phase::Forward);
            let d2 = self.buffer();
            self.emit(OpKind::AllToAll, vec![d], vec![d2], l, Phase::Forward);
            let z = self.buffer();
            self.emit(OpKind::ExpertFfn, vec![d2, w1e, w2e], vec![z], l, Phase::Forward);
            let z2 = self.buffer();
            self.emit(OpKind::AllToAll, vec![z], vec![z2], l, Phase::Forward);
            let y = self.fwd(OpKind::MoeGather, vec![z2, route], h, l);
            let out = self.fwd(OpKind::Elementwise { func: EltFunc::Add }, vec![h1, y], h, l);
            (Ffn::Moe { wg, w1e, w2e, route, d2, y }, out)
        } else {
            let w1 = self.param(vec![h, f], vec![H, O]);
            let w2 = self.param(vec![f, h], vec![O, H]);
            let f1 = self.fwd(OpKind::Matmul, vec![ln2, w1], f, l);
            let act = self.fwd(OpKind::Elementwise { func: EltFunc::Gelu }, vec![f1], f, l);
            let f2 = self.fwd(OpKind::Matmul, vec![act, w2], h, l);
            let out = self.fwd(OpKind::Elementwise { func: EltFunc::Add }, vec![h1, f2], h, l);
            (Ffn::Dense { w1, w2, f1, act }, out)
        };
        (Block { input: x, ln1, att, h1, ln2, wqkv, wo, ffn }, out)
    }

    /// Backward of one block given the gradient of its output; returns the
    /// gradient of its input. Each dW is issued right after the dX it pairs with.
    fn backward_block(&mut self, l: usize, blk: &Block, g: TensorId) -> TensorId {
        let mul = OpKind::Elementwise { func: EltFunc::Mul };
        let add = OpKind::Elementwise { func: EltFunc::Add };
        let dln2 = match blk.ffn {
            Ffn::Dense { w1, w2, f1, act } => {
                let dact = self.dx(OpKind::Matmul, vec![g, w2], act, l);
                self.dw(w2, act, g, l);
                let df1 = self.dx(mul.clone(), vec![dact, f1], f1, l);
                let d = self.dx(OpKind::Matmul, vec![df1, w1], blk.ln2, l);
                self.dw(w1, blk.ln2, df1, l);
                d
            }
            Ffn::Moe { wg, w1e, w2e, route, d2, y } => {
                let dd = self.buffer();
                self.emit(OpKind::MoeDispatch, vec![g, route], vec![dd], l, Phase::BackwardDx);
                let dd2 = self.buffer();
                self.emit(OpKind::AllToAll, vec![dd], vec![dd2], l, Phase::BackwardDx);
                let dz = self.buffer();
                self.emit(OpKind::ExpertFfn, vec![dd2, d2, w1e, w2e], vec![dz], l, Phase::BackwardDx);
                self.dw(w2e, d2, dd2, l);
                self.dw(w1e, d2, dd2, l);
                let dz2 = self.buffer();
                self.emit(OpKind::AllToAll, vec![dz], vec![dz2], l, Phase::BackwardDx);
                let dy = self.act(self.h);
                self.emit(OpKind::MoeGather, vec![dz2, route], vec![dy], l, Phase::BackwardDx);
                let score = self.b.tensor(vec![self.n, self.e], vec![B, E], self.cfg.dtype_bytes);
                self.emit(mul.clone(), vec![g, y], vec![score], l, Phase::BackwardDx);
                self.dw(wg, blk.ln2, score, l);
                let dgate = self.dx(OpKind::Matmul, vec![score, wg], blk.ln2, l);
                self.dx(add.clone(), vec![dy, dgate], blk.ln2, l)
            }
        };
        let dh1n = self.dx(mul.clone(), vec![dln2, blk.h1], blk.h1, l);
        let dh1 = self.dx(add.clone(), vec![g, dh1n], blk.h1, l);
        let datt = self.dx(OpKind::Matmul, vec![dh1, blk.wo], blk.att, l);
        self.dw(blk.wo, blk.att, dh1, l);
        let dqkv = self.dx(mul.clone(), vec![datt, blk.att], blk.att, l);
        let dln1 = self.dx(OpKind::Matmul, vec![dqkv, blk.wqkv], blk.ln1, l);
        self.dw(blk.wqkv, blk.ln1, dqkv, l);
        let dx = self.dx(mul, vec![dln1, blk.input], blk.input, l);
        self.dx(add, vec![dh1, dx], blk.input, l)
    }
}

/// Builds forward, backward (dX chain plus one dW per weight) and optimizer
/// updates of one training iteration on one device.
pub fn generate(cfg: &ModelConfig) -> Result<Program, GraphError> {
    cfg.validate()?;
    let mut g = Gen {
        b: ProgramBuilder::new(),
        cfg: cfg.clone(),
        n: cfg.tokens(),
        h: cfg.hidden,
        f: cfg.hidden * cfg.ffn_mult,
        e: cfg.experts(),
        c: cfg.capacity(),
        params: Vec::new(),
    };
    let mut x = g.b.input(vec![g.n, g.h], vec![B, H], cfg.dtype_bytes);
    let mut blocks = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let (blk, out) = g.forward_block(l, x);
        blocks.push(blk);
        x = out;
    }
    let mut grad = g.like(x);
    g.emit(OpKind::Other { name: "loss_grad".into() }, vec![x], vec![grad], cfg.layers, Phase::BackwardDx);
    for l in (0..cfg.layers).rev() {
        grad = g.backward_block(l, &blocks[l], grad);
    }
    let params = std::mem::take(&mut g.params);
    for (w, dw) in params {
        let nw = g.like(w);
        g.emit(OpKind::Other { name: "sgd_update".into() }, vec![w, dw], vec![nw], cfg.layers, Phase::BackwardDx);
    }

    g.b.metadata("generator", "graphgen");
    g.b.metadata("granularity", "attention as qkv matmul, softmax, output matmul");
    g.b.metadata("layers", cfg.layers.to_string());
    g.b.metadata("hidden", cfg.hidden.to_string());
    g.b.metadata("tokens", g.n.to_string());
    g.b.metadata("experts", g.e.to_string());
    g.b.metadata("experts_per_device", cfg.experts_per_device.to_string());
    g.b.metadata("devices", cfg.gpus.to_string());
    g.b.metadata("capacity", g.c.to_string());
    g.b.metadata("gate", format!("{:?}", cfg.gate).to_lowercase());
    Ok(g.b.finish())
}

/// Calibration reference: forward all-to-all time over forward expert time
/// on `gpt2-s-moe` with 16 devices.
pub const A100_RATIO: f64 = 2.0;
pub const V100_RATIO: f64 = 3.36;
pub const COST_PRESETS: &[&str] = &["a100-like", "v100-like"];

struct Device {
    flops_per_us: f64,
    bytes_per_us: f64,
    launch_us: f64,
    gate_us: f64,
    link_latency_us: f64,
    overhead_us: f64,
    ratio: f64,
}

pub fn preset_costs(name: &str) -> Result<CostDb, GraphError> {
    let dev = match name {
        "a100-like" => Device {
            flops_per_us: 120e6,
            bytes_per_us: 1.3e6,
            launch_us: 5.0,
            gate_us: 30.0,
            link_latency_us: 20.0,
            overhead_us: 6.0,
            ratio: A100_RATIO,
        },
        "v100-like" => Device {
            flops_per_us: 55e6,
            bytes_per_us: 0.75e6,
            launch_us: 6.0,
            gate_us: 40.0,
            link_latency_us: 30.0,
            overhead_us: 8.0,
            ratio: V100_RATIO,
        },
        other => return Err(GraphError::UnknownPreset(other.to_string())),
    };
    let compute = |u: f64| ClassRate { us_per_unit: 1.0 / u, floor_us: dev.launch_us };
    let mut m = SyntheticModel::default();
    for class in ["matmul", "weight_grad", "expert"] {
        m.classes.insert(class.into(), compute(dev.flops_per_us));
    }
    m.classes.insert("gate".into(), ClassRate { us_per_unit: 1.0 / dev.flops_per_us, floor_us: dev.gate_us });
    for class in ["norm", "dispatch", "elementwise", "other"] {
        m.classes.insert(class.into(), compute(dev.bytes_per_us));
    }

    // Solve the link bandwidth so the reference graph hits the ratio exactly.
    let reference = generate(&preset("gpt2-s-moe", 16).expect("builtin preset")).expect("builtin preset generates");
    let mut probe = CostDb::new(CommCostModel::new(vec![(1, 1.0), (2, 2.0)]).expect("valid"));
    probe.fallback = Some(m.clone());
    let (a2a_bytes, a2a_count, expert_us) = reference_totals(&reference, &probe);
    let per_a2a_us = dev.ratio * expert_us / a2a_count as f64;
    let bytes_per_us = a2a_bytes as f64 / (per_a2a_us - dev.link_latency_us);

    let mut points = Vec::new();
    let mut bytes = 1024u64;
    while bytes <= 1 << 30 {
        points.push((bytes, dev.link_latency_us + bytes as f64 / bytes_per_us));
        bytes *= 2;
    }
    let mut db = CostDb::new(CommCostModel::new(points).expect("increasing points"));
    db.fallback = Some(m);
    db.partition_overhead_us = dev.overhead_us;
    Ok(db)
}

/// (bytes of one forward all-to-all, forward all-to-all count, forward expert µs).
fn reference_totals(program: &Program, db: &CostDb) -> (u64, usize, f64) {
    let mut bytes = 0;
    let mut count = 0;
    let mut expert = Time::ZERO;
    for i in program.instructions.iter().filter(|i| i.phase == Phase::Forward) {
        match i.op {
            OpKind::AllToAll => {
                bytes = program.tensor(i.inputs[0]).bytes();
                count += 1;
            }
            OpKind::ExpertFfn => expert += db.instruction_cost(program, i).expect("synthetic fallback covers experts"),
            _ => {}
        }
    }
    (bytes, count, expert.as_us())
}

/// Forward all-to-all time over forward expert time of `program` under `db`.
pub fn a2a_expert_ratio(program: &Program, db: &CostDb) -> f64 {
    let mut comm = Time::ZERO;
    let mut expert = Time::ZERO;
    for i in program.instructions.iter().filter(|i| i.phase == Phase::Forward) {
        match i.op {
            OpKind::AllToAll => comm += db.instruction_cost(program, i).unwrap_or(Time::ZERO),
            OpKind::ExpertFfn => expert += db.instruction_cost(program, i).unwrap_or(Time::ZERO),
            _ => {}
        }
    }
    comm.as_nanos() as f64 / expert.as_nanos().max(1) as f64
}

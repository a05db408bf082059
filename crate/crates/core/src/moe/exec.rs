//! Numeric reference interpreter for small programs, simulating `G` devices
//! in lock-step so that all-to-alls move real data.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::routing::{even_sizes, CapacityState, Route, Router, Token, TokenBatch};
use super::MoeError;
use crate::ir::{AxisLabel, EltFunc, GateKind, Instruction, OpKind, Program, TensorId, IRREGULAR_MERGE};

pub const MAX_ELEMENTS: usize = 10_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    fn last(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    fn rows(&self) -> usize {
        self.data.len() / self.last().max(1)
    }

    /// Largest elementwise relative difference, with `|b|` floored at 1.
    pub fn max_rel_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs() / b.abs().max(1.0))
            .fold(0.0, f64::max)
    }

    /// Splits along `axis` into `parts` pieces whose extents differ by at most one.
    pub fn split(&self, axis: usize, parts: usize) -> Vec<Tensor> {
        let sizes = even_sizes(self.shape[axis], parts);
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut start = 0;
        sizes
            .iter()
            .map(|&sz| {
                let mut shape = self.shape.clone();
                shape[axis] = sz;
                let mut data = Vec::with_capacity(outer * sz * inner);
                for o in 0..outer {
                    let base = (o * self.shape[axis] + start) * inner;
                    data.extend_from_slice(&self.data[base..base + sz * inner]);
                }
                start += sz;
                Tensor { shape, data }
            })
            .collect()
    }

    pub fn concat(parts: &[&Tensor], axis: usize) -> Tensor {
        let mut shape = parts[0].shape.clone();
        shape[axis] = parts.iter().map(|p| p.shape[axis]).sum();
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
            }
        }
        Tensor { shape, data }
    }
}

/// MoE sizing and the random-gate seed for reference execution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MoeEnv {
    pub experts: usize,
    pub capacity: usize,
    pub devices: usize,
    pub seed: u64,
}

impl MoeEnv {
    pub fn experts_per_device(&self) -> usize {
        self.experts / self.devices.max(1)
    }
}

/// Values of every tensor, per device.
pub type DeviceValues = Vec<BTreeMap<TensorId, Tensor>>;

/// Executes `program` on `env.devices` simulated devices. `inputs[d]` holds
/// device `d`'s program inputs and parameters. Returns every tensor's value
/// per device.
pub fn exec_reference(program: &Program, inputs: &[BTreeMap<TensorId, Tensor>], env: MoeEnv) -> Result<DeviceValues, MoeError> {
    if env.devices == 0 || inputs.len() != env.devices || !env.experts.is_multiple_of(env.devices) {
        return Err(MoeError::InvalidConfig(format!(
            "{} device inputs for {} devices, {} experts",
            inputs.len(),
            env.devices,
            env.experts
        )));
    }
    for t in program.tensors.values() {
        if t.elements() as usize > MAX_ELEMENTS {
            return Err(MoeError::TooLarge { tensor: t.id, elements: t.elements() as usize });
        }
    }
    let mut vals: DeviceValues = inputs.to_vec();
    for instr in &program.instructions {
        if instr.op.is_communication() {
            let ins: Vec<&Tensor> = (0..env.devices).map(|d| fetch(&vals[d], instr.inputs[0])).collect::<Result<_, _>>()?;
            let outs = all_to_all(&ins, env)?;
            for (d, t) in outs.into_iter().enumerate() {
                store(program, &mut vals[d], instr.outputs[0], t)?;
            }
        } else {
            for (d, dv) in vals.iter_mut().enumerate() {
                let ins: Vec<&Tensor> = instr.inputs.iter().map(|t| fetch(dv, *t)).collect::<Result<_, _>>()?;
                let outs = compute(program, instr, &ins, env, d)?;
                if outs.len() != instr.outputs.len() {
                    return Err(MoeError::Unsupported(format!("instruction {} arity", instr.index)));
                }
                for (id, t) in instr.outputs.iter().zip(outs) {
                    store(program, dv, *id, t)?;
                }
            }
        }
    }
    Ok(vals)
}

fn fetch(vals: &BTreeMap<TensorId, Tensor>, id: TensorId) -> Result<&Tensor, MoeError> {
    vals.get(&id).ok_or(MoeError::MissingValue(id))
}

fn store(program: &Program, vals: &mut BTreeMap<TensorId, Tensor>, id: TensorId, t: Tensor) -> Result<(), MoeError> {
    let declared = &program.tensor(id).shape;
    if *declared != t.shape {
        return Err(MoeError::ShapeMismatch { tensor: id, declared: declared.clone(), actual: t.shape });
    }
    vals.insert(id, t);
    Ok(())
}

fn all_to_all(ins: &[&Tensor], env: MoeEnv) -> Result<Vec<Tensor>, MoeError> {
    let g = env.devices;
    let el = env.experts_per_device();
    let shape = ins[0].shape.clone();
    if shape.first() != Some(&env.experts) || ins.iter().any(|t| t.shape != shape) {
        return Err(MoeError::Unsupported(format!("all_to_all expects [E,..] buffers, got {shape:?}")));
    }
    let block: usize = shape[1..].iter().product();
    // out[d] row (s, e) = in[s] row (d, e)
    Ok((0..g)
        .map(|d| {
            let mut data = Vec::with_capacity(ins[0].data.len());
            for src in ins.iter().take(g) {
                let start = d * el * block;
                data.extend_from_slice(&src.data[start..start + el * block]);
            }
            Tensor { shape: shape.clone(), data }
        })
        .collect())
}

fn matmul(x: &Tensor, w: &Tensor) -> Result<Tensor, MoeError> {
    if w.shape.len() != 2 || x.last() != w.shape[0] {
        return Err(MoeError::Unsupported(format!("matmul {:?} x {:?}", x.shape, w.shape)));
    }
    let (m, k, n) = (x.rows(), w.shape[0], w.shape[1]);
    let mut data = vec![0.0; m * n];
    for r in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for i in 0..k {
                acc += x.data[r * k + i] * w.data[i * n + j];
            }
            data[r * n + j] = acc;
        }
    }
    let mut shape = x.shape.clone();
    *shape.last_mut().unwrap() = n;
    Ok(Tensor { shape, data })
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (0.797_884_560_802_865_4 * (x + 0.044715 * x * x * x)).tanh())
}

fn rowwise(x: &Tensor, f: impl Fn(&[f64], &mut [f64])) -> Tensor {
    let n = x.last();
    let mut data = vec![0.0; x.data.len()];
    for (src, dst) in x.data.chunks(n).zip(data.chunks_mut(n)) {
        f(src, dst);
    }
    Tensor { shape: x.shape.clone(), data }
}

fn compute(program: &Program, instr: &Instruction, ins: &[&Tensor], env: MoeEnv, device: usize) -> Result<Vec<Tensor>, MoeError> {
    let unsupported = || MoeError::Unsupported(format!("{} at instruction {}", instr.op.signature(), instr.index));
    Ok(match &instr.op {
        OpKind::Matmul if ins.len() == 2 => vec![matmul(ins[0], ins[1])?],
        OpKind::Elementwise { func } => {
            let x = ins.first().ok_or_else(unsupported)?;
            let data: Vec<f64> = match (func, ins.len()) {
                (EltFunc::Identity, 1) => x.data.clone(),
                (EltFunc::Relu, 1) => x.data.iter().map(|v| v.max(0.0)).collect(),
                (EltFunc::Gelu, 1) => x.data.iter().map(|&v| gelu(v)).collect(),
                (EltFunc::Add, 2) | (EltFunc::Mul, 2) => {
                    if ins[1].shape != x.shape {
                        return Err(unsupported());
                    }
                    let op = |a: f64, b: f64| if *func == EltFunc::Add { a + b } else { a * b };
                    x.data.iter().zip(&ins[1].data).map(|(a, b)| op(*a, *b)).collect()
                }
                _ => return Err(unsupported()),
            };
            vec![Tensor { shape: x.shape.clone(), data }]
        }
        OpKind::LayerNorm if ins.len() == 1 => vec![rowwise(ins[0], |src, dst| {
            let n = src.len() as f64;
            let mean = src.iter().sum::<f64>() / n;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + 1e-5).sqrt();
            for (d, s) in dst.iter_mut().zip(src) {
                *d = (s - mean) * inv;
            }
        })],
        OpKind::Softmax if ins.len() == 1 => vec![rowwise(ins[0], |src, dst| {
            let m = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (d, s) in dst.iter_mut().zip(src) {
                *d = (s - m).exp();
                z += *d;
            }
            for d in dst.iter_mut() {
                *d /= z;
            }
        })],
        OpKind::Gate { gate } => gate_op(*gate, instr, ins, env, device)?,
        OpKind::MoeDispatch if ins.len() == 2 => {
            let (x, r) = (ins[0], ins[1]);
            let h = x.last();
            let mut out = Tensor::zeros(vec![env.experts, env.capacity, h]);
            for (row, route) in r.data.chunks(2).enumerate() {
                if route[0] >= 0.0 {
                    let (e, slot) = (route[0] as usize, route[1] as usize);
                    let dst = (e * env.capacity + slot) * h;
                    out.data[dst..dst + h].copy_from_slice(&x.data[row * h..(row + 1) * h]);
                }
            }
            vec![out]
        }
        OpKind::MoeGather if ins.len() == 2 => {
            let (z, r) = (ins[0], ins[1]);
            let h = z.last();
            let cap = z.shape[1];
            let n = r.rows();
            let mut out = Tensor::zeros(vec![n, h]);
            for (row, route) in r.data.chunks(2).enumerate() {
                if route[0] >= 0.0 {
                    let (e, slot) = (route[0] as usize, route[1] as usize);
                    let src = (e * cap + slot) * h;
                    out.data[row * h..(row + 1) * h].copy_from_slice(&z.data[src..src + h]);
                }
            }
            vec![out]
        }
        OpKind::ExpertFfn if ins.len() == 3 => {
            let (x, w1, w2) = (ins[0], ins[1], ins[2]);
            let el = env.experts_per_device();
            if x.shape.len() != 3 || w1.shape.len() != 3 || w2.shape.len() != 3 || w1.shape[0] != el || w2.shape[0] != el {
                return Err(unsupported());
            }
            let (rows_per, h) = (x.shape[1], x.shape[2]);
            let (f, h2) = (w1.shape[2], w2.shape[2]);
            let mut data = Vec::with_capacity(x.shape[0] * rows_per * h2);
            for j in 0..x.shape[0] {
                let local = j % el;
                let xs = Tensor::new(vec![rows_per, h], x.data[j * rows_per * h..(j + 1) * rows_per * h].to_vec());
                let a = Tensor::new(vec![h, f], w1.data[local * h * f..(local + 1) * h * f].to_vec());
                let b = Tensor::new(vec![f, h2], w2.data[local * f * h2..(local + 1) * f * h2].to_vec());
                let mut hid = matmul(&xs, &a)?;
                hid.data.iter_mut().for_each(|v| *v = v.max(0.0));
                data.extend(matmul(&hid, &b)?.data);
            }
            vec![Tensor { shape: vec![x.shape[0], rows_per, h2], data }]
        }
        OpKind::Split { axis, parts } if ins.len() == 1 => ins[0].split(*axis, *parts),
        OpKind::Concat { axis } => vec![Tensor::concat(ins, *axis)],
        OpKind::Other { name } if name == IRREGULAR_MERGE && !ins.is_empty() => {
            let out = program.tensor(instr.outputs[0]);
            if out.axis_of(AxisLabel::Capacity).is_some() {
                let mut acc = ins[0].clone();
                for t in &ins[1..] {
                    acc.data.iter_mut().zip(&t.data).for_each(|(a, b)| *a += b);
                }
                vec![acc]
            } else {
                vec![Tensor::concat(ins, 0)]
            }
        }
        _ => return Err(unsupported()),
    })
}

/// Routing tensor layout: one `[expert, slot]` row per token, `[-1, -1]` when dropped.
fn gate_op(gate: GateKind, instr: &Instruction, ins: &[&Tensor], env: MoeEnv, device: usize) -> Result<Vec<Tensor>, MoeError> {
    if ins.len() < 2 || ins.len() > 3 {
        return Err(MoeError::Unsupported(format!("gate arity at instruction {}", instr.index)));
    }
    let scores = matmul(ins[0], ins[1])?;
    if scores.last() != env.experts {
        return Err(MoeError::InvalidConfig(format!("gate weight has {} experts, env has {}", scores.last(), env.experts)));
    }
    let state = match ins.get(2) {
        Some(s) => decode_state(s, env)?,
        None => CapacityState::full(env.experts, env.capacity),
    };
    let router = Router::new(env.experts, env.capacity, gate, device_seed(env.seed, device));
    let batch = TokenBatch {
        tokens: scores
            .data
            .chunks(env.experts)
            .enumerate()
            .map(|(r, s)| Token { token_id: state.tokens_seen + r, sequence_id: 0, gate_scores: s.to_vec() })
            .collect(),
        batch: 1,
        seq: scores.rows(),
    };
    let (result, next) = if ins.len() == 3 || instr.outputs.len() == 2 {
        router.route_step(&batch, &state)?
    } else {
        (router.route_full(&batch)?, state)
    };
    let mut r = Tensor::zeros(vec![batch.tokens.len(), 2]);
    for (row, route) in result.routes.iter().enumerate() {
        let (e, s) = match route {
            Route::Expert { expert, slot } => (*expert as f64, *slot as f64),
            Route::Dropped => (-1.0, -1.0),
        };
        r.data[2 * row] = e;
        r.data[2 * row + 1] = s;
    }
    let mut outs = vec![r];
    if instr.outputs.len() == 2 {
        outs.push(encode_state(&next));
    }
    Ok(outs)
}

pub fn device_seed(seed: u64, device: usize) -> u64 {
    seed ^ (device as u64).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Capacity state tensor: remaining capacity per expert, then tokens seen.
pub fn encode_state(s: &CapacityState) -> Tensor {
    let mut data: Vec<f64> = s.remaining.iter().map(|&r| r as f64).collect();
    data.push(s.tokens_seen as f64);
    Tensor { shape: vec![data.len()], data }
}

fn decode_state(t: &Tensor, env: MoeEnv) -> Result<CapacityState, MoeError> {
    if t.data.len() != env.experts + 1 {
        return Err(MoeError::InvalidConfig("capacity state tensor has the wrong length".into()));
    }
    Ok(CapacityState {
        remaining: t.data[..env.experts].iter().map(|&v| v as usize).collect(),
        capacity: env.capacity,
        tokens_seen: t.data[env.experts] as usize,
    })
}

//! End-to-end runs: load or generate a program, apply the passes, simulate,
//! optionally check numerical equivalence, and write the artifacts.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::cost::{CostDb, CostError};
use crate::graphgen::{self, GraphError, COST_PRESETS};
use crate::ir::{self, GateKind, IrError, OpKind, Program, TensorId};
use crate::moe::{exec_reference, MoeEnv, MoeError, Tensor};
use crate::par::Execution;
use crate::partition::{self, apply_plan, infer_axes, PartitionError, PartitionParams, PartitionPlan, PlanEntry};
use crate::sched_dw::{self, OverlapAssignment, SchedError};
use crate::sim::{self, Breakdown};
use crate::time::Time;

#[derive(Debug, Error)]
pub enum DriverError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Ir(#[from] IrError),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Partition(#[from] PartitionError),
    #[error(transparent)]
    Sched(#[from] SchedError),
    #[error(transparent)]
    Moe(#[from] MoeError),
    #[error("invalid configuration: {0}")]
    Config(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pass {
    DwSchedule,
    Partition,
}

impl FromStr for Pass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dw-schedule" => Ok(Pass::DwSchedule),
            "partition" => Ok(Pass::Partition),
            other => Err(format!("unknown pass `{other}` (expected dw-schedule or partition)")),
        }
    }
}

impl fmt::Display for Pass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pass::DwSchedule => "dw-schedule",
            Pass::Partition => "partition",
        })
    }
}

/// Parses `dw-schedule,partition`; `none` or an empty string means no passes.
pub fn parse_passes(s: &str) -> Result<Vec<Pass>, String> {
    if s.is_empty() || s == "none" {
        return Ok(Vec::new());
    }
    let mut v: Vec<Pass> = s.split(',').map(|p| p.trim().parse()).collect::<Result<_, _>>()?;
    v.sort();
    v.dedup();
    Ok(v)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphSource {
    Preset { name: String, gpus: usize, gate: Option<GateKind> },
    File(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CostSource {
    Preset(String),
    File(PathBuf),
}

impl CostSource {
    /// A known preset name, otherwise a path.
    pub fn parse(s: &str) -> Self {
        if COST_PRESETS.contains(&s) {
            CostSource::Preset(s.to_string())
        } else {
            CostSource::File(PathBuf::from(s))
        }
    }

    pub fn load(&self) -> Result<CostDb, DriverError> {
        match self {
            CostSource::Preset(name) => Ok(graphgen::preset_costs(name)?),
            CostSource::File(path) => Ok(CostDb::from_json(&read(path)?)?),
        }
    }
}

/// Instruction range `[start, end)` to partition `k` ways regardless of the DP.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ForcedRange {
    pub start: usize,
    pub end: usize,
    pub k: usize,
}

impl FromStr for ForcedRange {
    type Err = String;

    /// `start..end:k`
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || format!("expected START..END:K, got `{s}`");
        let (r, k) = s.split_once(':').ok_or_else(err)?;
        let (a, b) = r.split_once("..").ok_or_else(err)?;
        let p = |x: &str| x.trim().parse::<usize>().map_err(|_| err());
        Ok(ForcedRange { start: p(a)?, end: p(b)?, k: p(k)? })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub graph: GraphSource,
    pub costs: CostSource,
    pub passes: Vec<Pass>,
    pub max_k: usize,
    /// γ in milliseconds.
    pub gamma_ms: Option<f64>,
    pub iota: Option<usize>,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub verify: bool,
    pub force_range: Option<ForcedRange>,
    #[serde(skip)]
    pub exec: Execution,
}

impl RunConfig {
    pub fn partition_params(&self) -> PartitionParams {
        PartitionParams {
            max_k: self.max_k,
            gamma: self.gamma_ms.map(|ms| Time::from_us(ms * 1000.0)),
            iota: self.iota,
            exec: self.exec,
        }
    }

    pub fn load_graph(&self) -> Result<Program, DriverError> {
        match &self.graph {
            GraphSource::Preset { name, gpus, gate } => {
                let mut cfg = graphgen::preset(name, *gpus)?;
                if let Some(g) = gate {
                    cfg.gate = *g;
                }
                Ok(graphgen::generate(&cfg)?)
            }
            GraphSource::File(path) => Ok(ir::load_program(&read(path)?)?),
        }
    }
}

pub fn read(path: &Path) -> Result<String, DriverError> {
    fs::read_to_string(path).map_err(|source| DriverError::Io { path: path.to_path_buf(), source })
}

pub fn write(path: &Path, contents: &str) -> Result<(), DriverError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|source| DriverError::Io { path: dir.to_path_buf(), source })?;
    }
    fs::write(path, contents).map_err(|source| DriverError::Io { path: path.to_path_buf(), source })
}

pub fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("artifact serializes");
    s.push('\n');
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct Optimized {
    pub program: Program,
    pub assignment: Option<OverlapAssignment>,
    pub plan: Option<PartitionPlan>,
}

/// Applies the requested passes: dW scheduling first, then partitioning.
pub fn optimize(
    program: &Program,
    db: &CostDb,
    passes: &[Pass],
    params: &PartitionParams,
    force: Option<ForcedRange>,
) -> Result<Optimized, DriverError> {
    let mut out = Optimized { program: program.clone(), assignment: None, plan: None };
    if passes.contains(&Pass::DwSchedule) {
        let (p, a) = sched_dw::schedule(&out.program, db)?;
        out.program = p;
        out.assignment = Some(a);
    }
    if passes.contains(&Pass::Partition) {
        let plan = match force {
            Some(f) => forced_plan(&out.program, db, f)?,
            None => partition::dp_select(&out.program, db, params)?,
        };
        out.program = apply_plan(&out.program, &plan)?;
        out.plan = Some(plan);
    }
    Ok(out)
}

fn forced_plan(program: &Program, db: &CostDb, f: ForcedRange) -> Result<PartitionPlan, DriverError> {
    if f.start >= f.end || f.end > program.len() || f.k == 0 {
        return Err(DriverError::Config(format!("forced range {}..{}:{} is out of bounds", f.start, f.end, f.k)));
    }
    let axes = if f.k > 1 { Some(infer_axes(program, f.start..f.end, f.k)?) } else { None };
    let predicted = partition::evaluate_range(program, db, f.start..f.end, f.k)?.unwrap_or(Time::ZERO);
    let costs = db.program_costs(program)?;
    let serial: Time = program.forward_positions().into_iter().map(|p| costs[p]).sum();
    let range_serial: Time = costs[f.start..f.end].iter().copied().sum();
    Ok(PartitionPlan {
        entries: vec![PlanEntry { groups: (0, 0), start: f.start, end: f.end, k: f.k, predicted, axes }],
        predicted_forward: serial - range_serial + predicted,
        serial_forward: serial,
        gamma: Time::ZERO,
        iota: 0,
        max_k: f.k,
        groups: Vec::new(),
    })
}

/// Outcome of a reference-interpreter equivalence check.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerifyReport {
    pub k: usize,
    pub ranges: Vec<(usize, usize)>,
    pub compared_tensors: usize,
    pub max_rel_diff: f64,
    pub exact: bool,
    pub passed: bool,
    pub mismatches: Vec<String>,
}

pub const VERIFY_TOLERANCE: f64 = 1e-6;

fn meta(program: &Program, key: &str) -> Result<usize, DriverError> {
    program
        .metadata
        .get(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| DriverError::Config(format!("program metadata lacks numeric `{key}`")))
}

pub fn moe_env(program: &Program, seed: u64) -> Result<MoeEnv, DriverError> {
    Ok(MoeEnv {
        experts: meta(program, "experts")?,
        capacity: meta(program, "capacity")?,
        devices: meta(program, "devices")?,
        seed,
    })
}

/// Seeded values in [-1, 1) for every program input and parameter, per device.
pub fn random_inputs(program: &Program, devices: usize, seed: u64) -> Vec<BTreeMap<TensorId, Tensor>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..devices)
        .map(|_| {
            program
                .inputs
                .iter()
                .chain(&program.params)
                .map(|&id| {
                    let shape = program.tensor(id).shape.clone();
                    let n = shape.iter().product();
                    (id, Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()))
                })
                .collect()
        })
        .collect()
}

/// Replaces the kind of every gate in `program`.
pub fn set_gate(program: &mut Program, gate: GateKind) {
    for i in &mut program.instructions {
        if let OpKind::Gate { gate: g } = &mut i.op {
            *g = gate;
        }
    }
}

/// Ranges around each MoE core: the earliest satisfiable start after the
/// previous core, extended as far right as stays satisfiable.
pub fn moe_ranges(program: &Program, k: usize) -> Vec<(usize, usize)> {
    let cores: Vec<(usize, usize)> = program
        .instructions
        .iter()
        .enumerate()
        .filter(|(_, i)| matches!(i.op, OpKind::MoeDispatch))
        .filter_map(|(d, _)| (d..program.len()).find(|&g| matches!(program.instructions[g].op, OpKind::MoeGather)).map(|g| (d, g + 1)))
        .collect();
    let fwd_end = program.forward_positions().last().map_or(0, |p| p + 1);
    let mut out = Vec::new();
    let mut floor = 0;
    for (c, &(d, g)) in cores.iter().enumerate() {
        let ceiling = cores.get(c + 1).map_or(fwd_end, |n| n.0);
        let Some(s) = (floor..=d).find(|&s| infer_axes(program, s..g, k).is_ok()) else { continue };
        let e = (g..=ceiling).rev().find(|&e| infer_axes(program, s..e, k).is_ok()).unwrap_or(g);
        out.push((s, e));
        floor = e;
    }
    out
}

/// Partitions every MoE range of the forward program `k` ways and compares
/// all original tensors that survive the rewrite against unpartitioned
/// execution.
pub fn verify_equivalence(program: &Program, k: usize, seed: u64) -> Result<VerifyReport, DriverError> {
    let fwd = program.forward_only();
    let env = moe_env(program, seed)?;
    let ranges = moe_ranges(&fwd, k);
    let mut rewritten = fwd.clone();
    for &(s, e) in ranges.iter().rev() {
        let axes = infer_axes(&rewritten, s..e, k)?;
        let frag = partition::rewrite_partitioned(&rewritten, &axes)?;
        let sched = crate::pipeline::build_stages(&frag, k);
        rewritten = partition::splice(&rewritten, s..e, &sched.program);
    }
    let violations = ir::validate(&rewritten);
    if !violations.is_empty() {
        return Err(IrError::Invalid(violations).into());
    }
    let inputs = random_inputs(&fwd, env.devices, seed);
    let a = exec_reference(&fwd, &inputs, env)?;
    let b = exec_reference(&rewritten, &inputs, env)?;
    let mut report = VerifyReport { k, ranges, compared_tensors: 0, max_rel_diff: 0.0, exact: true, passed: true, mismatches: Vec::new() };
    for (d, (va, vb)) in a.iter().zip(&b).enumerate() {
        for (id, ta) in va {
            let Some(tb) = vb.get(id) else { continue };
            report.compared_tensors += 1;
            let diff = if ta.shape == tb.shape { tb.max_rel_diff(ta) } else { f64::INFINITY };
            report.max_rel_diff = report.max_rel_diff.max(diff);
            if ta != tb {
                report.exact = false;
            }
            if diff > VERIFY_TOLERANCE {
                report.passed = false;
                if report.mismatches.len() < 20 {
                    report.mismatches.push(format!("device {d} tensor {id}: max relative difference {diff:e}"));
                }
            }
        }
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunSummary {
    pub graph: GraphSource,
    pub costs: CostSource,
    pub passes: Vec<Pass>,
    pub seed: u64,
    pub instructions: usize,
    pub baseline: Breakdown,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub optimized: Option<Breakdown>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub speedup: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub comm_reduction: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dw_assigned: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub partitioned_ranges: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub predicted_forward_us: Option<Time>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub verify: Option<VerifyReport>,
}

pub const ARTIFACTS: &[&str] = &[
    "optimized.json",
    "assignment.json",
    "plan.json",
    "timeline.json",
    "gantt.svg",
    "breakdown.csv",
    "summary.json",
];

/// Executes a full run and writes its artifacts into `config.out_dir`.
pub fn run(config: &RunConfig) -> Result<RunSummary, DriverError> {
    let program = config.load_graph()?;
    let db = config.costs.load()?;
    let baseline_tl = sim::simulate(&program, &db)?;
    let baseline = sim::decompose(&baseline_tl);
    let dir = &config.out_dir;

    let mut summary = RunSummary {
        graph: config.graph.clone(),
        costs: config.costs.clone(),
        passes: config.passes.clone(),
        seed: config.seed,
        instructions: program.len(),
        baseline,
        optimized: None,
        speedup: None,
        comm_reduction: None,
        dw_assigned: None,
        partitioned_ranges: None,
        predicted_forward_us: None,
        verify: None,
    };

    let final_tl = if config.passes.is_empty() {
        baseline_tl
    } else {
        let opt = optimize(&program, &db, &config.passes, &config.partition_params(), config.force_range)?;
        write(&dir.join("optimized.json"), &format!("{}\n", opt.program.to_json()))?;
        if let Some(a) = &opt.assignment {
            write(&dir.join("assignment.json"), &to_json(a))?;
            summary.dw_assigned = Some(a.len());
        }
        if let Some(p) = &opt.plan {
            write(&dir.join("plan.json"), &to_json(p))?;
            summary.partitioned_ranges = Some(p.partitioned().count());
            summary.predicted_forward_us = Some(p.predicted_forward);
        }
        let tl = sim::simulate(&opt.program, &db)?;
        let b = sim::decompose(&tl);
        let c = sim::compare_breakdowns(baseline, b);
        summary.optimized = Some(b);
        summary.speedup = Some(c.speedup);
        summary.comm_reduction = Some(c.comm_reduction);
        tl
    };

    if config.verify {
        let check = verify_graph(config)?;
        summary.verify = Some(verify_equivalence(&check, config.max_k.clamp(2, 4), config.seed)?);
    }

    write(&dir.join("timeline.json"), &to_json(&final_tl))?;
    write(&dir.join("gantt.svg"), &sim::gantt_svg(&final_tl))?;
    write(&dir.join("breakdown.csv"), &sim::breakdown_csv(&sim::decompose(&final_tl)))?;
    write(&dir.join("summary.json"), &to_json(&summary))?;
    Ok(summary)
}

/// A program small enough for the reference interpreter with the same
/// block structure and gate as the run's graph.
fn verify_graph(config: &RunConfig) -> Result<Program, DriverError> {
    let gate = match &config.graph {
        GraphSource::Preset { name, gpus, gate } => gate.unwrap_or(graphgen::preset(name, *gpus)?.gate),
        GraphSource::File(path) => {
            let p = ir::load_program(&read(path)?)?;
            p.instructions
                .iter()
                .find_map(|i| match i.op {
                    OpKind::Gate { gate } => Some(gate),
                    _ => None,
                })
                .unwrap_or(GateKind::Switch)
        }
    };
    let mut cfg = graphgen::preset("tiny", 2)?;
    cfg.gate = gate;
    Ok(graphgen::generate(&cfg)?)
}

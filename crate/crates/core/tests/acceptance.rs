//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the binary exits non-zero if any fails.

mod common;

use std::collections::{BTreeMap, HashMap};
use std::ops::Range;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use moe_overlap::cost::CommCostModel;
use moe_overlap::driver::{self, CostSource, GraphSource, Pass, RunConfig};
use moe_overlap::graphgen::{self, ModelConfig};
use moe_overlap::ir::{self, GateKind, Lane, OpKind, Program, TensorId};
use moe_overlap::moe::{exec_reference, CapacityState, Route, Router, RoutingResult, Tensor, Token, TokenBatch};
use moe_overlap::par::Execution;
use moe_overlap::partition::{self, evaluate_range, group_instructions, infer_axes, Axis, PartitionError, PartitionParams};
use moe_overlap::pipeline::{build_stages, simulate_range};
use moe_overlap::sched_dw::{exact_with_costs, greedy_with_costs, OverlapSets};
use moe_overlap::sim::{self, decompose, timeline_from_costs};
use moe_overlap::Time;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{event_queue_sim, random_costs, random_program, recheck_axes, small_configs};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// 1 ────────────────────────────────────────────────────────────────────────

fn random_batch(rng: &mut ChaCha8Rng, experts: usize) -> TokenBatch {
    let batch = rng.gen_range(1..=16);
    let seq = rng.gen_range(1..=512 / batch).min(64);
    let skew: Vec<f64> = (0..experts).map(|_| rng.gen_range(0.0..1.0)).collect();
    let tokens = (0..batch * seq)
        .map(|i| Token { token_id: i, sequence_id: i / seq, gate_scores: skew.iter().map(|s| s * rng.gen_range(0.0..1.0)).collect() })
        .collect();
    TokenBatch { tokens, batch, seq }
}

fn gating_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut trials = 0;
    let mut drops = 0;
    for trial in 0..1200u64 {
        let gate = if trial % 2 == 0 { GateKind::Switch } else { GateKind::Random };
        let experts = rng.gen_range(1..=8);
        let batch = random_batch(&mut rng, experts);
        let n = batch.tokens.len();
        let capacity = rng.gen_range(1..=n.div_ceil(experts) + 2);
        let router = Router::new(experts, capacity, gate, trial);
        let k = rng.gen_range(1..=4);
        let mut cuts: Vec<usize> = (0..k - 1).map(|_| rng.gen_range(0..=n)).collect();
        cuts.sort_unstable();
        let slices = batch.split_at(&cuts);
        let full = router.route_full(&batch).map_err(|e| e.to_string())?;
        let (parts, _) = router.route_micro(&slices, CapacityState::full(experts, capacity)).map_err(|e| e.to_string())?;
        let micro = RoutingResult::concat(&parts);
        ensure(micro.routes == full.routes && micro.admitted == full.admitted && micro.dropped() == full.dropped(), || {
            format!("trial {trial}: {gate:?} E={experts} C={capacity} cuts {cuts:?} differ")
        })?;
        drops += full.dropped().len();
        trials += 1;
    }

    // ¾C of the tokens for expert 0 in slice 1, ¼C in slice 2.
    let c = 16;
    let mk = |ids: Range<usize>| TokenBatch {
        tokens: ids.map(|i| Token { token_id: i, sequence_id: 0, gate_scores: vec![1.0, 0.0] }).collect(),
        batch: 1,
        seq: c,
    };
    let slices = [mk(0..3 * c / 4), mk(3 * c / 4..c)];
    let router = Router::new(2, c, GateKind::Switch, 0);
    let (passing, _) = router.route_micro(&slices, CapacityState::full(2, c)).map_err(|e| e.to_string())?;
    let passing_drops: usize = passing.iter().map(|r| r.dropped().len()).sum();
    let naive = router.route_naive(&slices).map_err(|e| e.to_string())?;
    let naive_drops: Vec<usize> = naive.iter().map(|r| r.dropped().len()).collect();
    ensure(passing_drops == 0, || format!("capacity passing dropped {passing_drops}"))?;
    ensure(naive_drops == vec![c / 4, 0], || format!("naive drops {naive_drops:?}, expected [{}, 0]", c / 4))?;
    ensure(passing.iter().flat_map(|r| &r.routes).all(|r| matches!(r, Route::Expert { expert: 0, .. })), || "misrouted".into())?;
    Ok(format!("{trials} trials ({drops} drops), 3/4C+1/4C: passing 0 drops, naive {} drops", c / 4))
}

// 2 ────────────────────────────────────────────────────────────────────────

fn integer_inputs(program: &Program, devices: usize, seed: u64) -> Vec<BTreeMap<TensorId, Tensor>> {
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
                    (id, Tensor::new(shape, (0..n).map(|_| rng.gen_range(-3i32..=3) as f64).collect()))
                })
                .collect()
        })
        .collect()
}

/// Left-to-right cover by the longest satisfiable ranges.
fn cover_ranges(p: &Program, k: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut s = 0;
    while s < p.len() {
        match (s + 1..=p.len()).rev().find(|&e| infer_axes(p, s..e, k).is_ok()) {
            Some(e) => {
                out.push((s, e));
                s = e;
            }
            None => s += 1,
        }
    }
    out
}

fn rewrite_ranges(p: &Program, ranges: &[(usize, usize)], k: usize) -> Result<Program, String> {
    let mut out = p.clone();
    for &(s, e) in ranges.iter().rev() {
        let axes = infer_axes(&out, s..e, k).map_err(|e| e.to_string())?;
        let frag = partition::rewrite_partitioned(&out, &axes).map_err(|e| e.to_string())?;
        out = partition::splice(&out, s..e, &build_stages(&frag, k).program);
    }
    let v = ir::validate(&out);
    ensure(v.is_empty(), || format!("rewritten program invalid: {}", v[0]))?;
    Ok(out)
}

fn partition_numerics() -> Outcome {
    let mut cases = 0;
    let mut compared = 0;
    let mut worst: f64 = 0.0;
    for (name, cfg) in small_configs() {
        let fwd = graphgen::generate(&cfg).unwrap().forward_only();
        let env = driver::moe_env(&fwd, 5).map_err(|e| e.to_string())?;
        for k in 1..=4 {
            let strategies = [("moe", driver::moe_ranges(&fwd, k)), ("cover", if k > 1 { cover_ranges(&fwd, k) } else { vec![] })];
            for (strategy, ranges) in strategies {
                let rewritten = rewrite_ranges(&fwd, &ranges, k)?;
                for (integer, inputs) in [(true, integer_inputs(&fwd, env.devices, k as u64)), (false, driver::random_inputs(&fwd, env.devices, k as u64))] {
                    let a = exec_reference(&fwd, &inputs, env).map_err(|e| e.to_string())?;
                    let b = exec_reference(&rewritten, &inputs, env).map_err(|e| e.to_string())?;
                    for out in fwd.outputs() {
                        ensure(b[0].contains_key(&out), || format!("{name} k={k}: output {out} lost"))?;
                    }
                    for (va, vb) in a.iter().zip(&b) {
                        for (id, ta) in va {
                            let Some(tb) = vb.get(id) else { continue };
                            compared += 1;
                            ensure(ta.shape == tb.shape, || format!("{name} k={k}: {id} shape differs"))?;
                            let diff = tb.max_rel_diff(ta);
                            worst = worst.max(diff);
                            if integer {
                                ensure(ta == tb, || format!("{name} k={k} {strategy}: {id} not exact ({diff:e})"))?;
                            } else {
                                ensure(diff <= 1e-6, || format!("{name} k={k} {strategy}: {id} differs by {diff:e}"))?;
                            }
                        }
                    }
                    cases += 1;
                }
            }
        }
    }
    Ok(format!("{cases} executions over {} graphs, {compared} tensors compared, max rel diff {worst:e}", small_configs().len()))
}

// 3 ────────────────────────────────────────────────────────────────────────

fn random_config(rng: &mut ChaCha8Rng) -> ModelConfig {
    let base = graphgen::preset("tiny", 2).unwrap();
    let layers = rng.gen_range(1..=4);
    let gates = [GateKind::Switch, GateKind::Random, GateKind::BatchPrioritized];
    ModelConfig {
        layers,
        hidden: [4, 6, 8][rng.gen_range(0..3)],
        batch: rng.gen_range(1..=3),
        seq: rng.gen_range(2..=8),
        gpus: rng.gen_range(1..=4),
        experts_per_device: rng.gen_range(1..=2),
        capacity_factor: rng.gen_range(0.5..2.0),
        moe_every: if layers > 2 { 2 } else { rng.gen_range(1..=2) },
        gate: gates[rng.gen_range(0..3)],
        ..base
    }
}

fn dp_optimality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut programs = 0;
    let mut partitioned = 0;
    let mut max_groups = 0;
    while programs < 200 {
        let cfg = random_config(&mut rng);
        let p = graphgen::generate(&cfg).unwrap().forward_only();
        let db = match rng.gen_range(0..3) {
            0 => graphgen::preset_costs("v100-like").unwrap(),
            1 => graphgen::preset_costs("a100-like").unwrap(),
            _ => overlap_friendly_db(&mut rng),
        };
        let base_gamma = partition::default_gamma(&p, &db).unwrap();
        let gamma = Time::from_nanos((base_gamma.as_nanos() as f64 * rng.gen_range(0.5..3.0)) as u64 + 1);
        let groups = group_instructions(&p, gamma, &db).unwrap();
        if groups.len() > 12 || cfg.moe_layers() > 2 {
            continue;
        }
        let params = PartitionParams {
            max_k: rng.gen_range(1..=3),
            gamma: Some(gamma),
            iota: if rng.gen_bool(0.5) { None } else { Some(rng.gen_range(1..=6)) },
            exec: Execution::Sequential,
        };
        let plan = partition::dp_select(&p, &db, &params).map_err(|e| e.to_string())?;
        let brute = exhaustive(&p, &db, &groups, params.max_k, plan.iota)?;
        ensure(plan.predicted_forward == brute, || {
            format!("program {programs}: dp {} vs exhaustive {} ({cfg:?})", plan.predicted_forward, brute)
        })?;
        let sum: Time = plan.entries.iter().map(|e| e.predicted).sum();
        ensure(sum == plan.predicted_forward, || "plan entries do not add up".into())?;
        partitioned += usize::from(plan.partitioned().count() > 0);
        max_groups = max_groups.max(groups.len());
        programs += 1;
    }
    Ok(format!("{programs} programs (up to {max_groups} groups), {partitioned} with partitioned ranges, DP = exhaustive on all"))
}

/// Cheap launches, small partition overhead and slow links, so that
/// pipelining tiny graphs actually pays off.
fn overlap_friendly_db(rng: &mut ChaCha8Rng) -> moe_overlap::cost::CostDb {
    let per_byte = rng.gen_range(0.005..0.05);
    let latency = rng.gen_range(0.0..0.5);
    let comm = CommCostModel::new(vec![(1, latency + per_byte), (1 << 20, latency + per_byte * (1 << 20) as f64)]).unwrap();
    let mut db = moe_overlap::cost::CostDb::new(comm);
    let mut m = graphgen::preset_costs("v100-like").unwrap().fallback.unwrap();
    for rate in m.classes.values_mut() {
        rate.floor_us = rng.gen_range(0.0..0.5);
        rate.us_per_unit = rng.gen_range(0.001..0.01);
    }
    db.fallback = Some(m);
    db.partition_overhead_us = rng.gen_range(0.0..0.5);
    db
}

/// Minimum over every segmentation of the groups (bitmask of cut points) of
/// the summed best per-segment time.
fn exhaustive(p: &Program, db: &moe_overlap::cost::CostDb, groups: &[partition::InstructionGroup], max_k: usize, iota: usize) -> Result<Time, String> {
    let n = groups.len();
    let mut memo: HashMap<(usize, usize), Time> = HashMap::new();
    let mut seg = |i: usize, j: usize| -> Result<Time, String> {
        if let Some(t) = memo.get(&(i, j)) {
            return Ok(*t);
        }
        let (s, e) = (groups[i].start, groups[j - 1].end);
        let has_a2a = p.instructions[s..e].iter().any(|x| matches!(x.op, OpKind::AllToAll));
        let mut best = evaluate_range(p, db, s..e, 1).map_err(|e| e.to_string())?.unwrap();
        if has_a2a {
            for k in 2..=max_k {
                if let Some(t) = evaluate_range(p, db, s..e, k).map_err(|e| e.to_string())? {
                    best = best.min(t);
                }
            }
        }
        memo.insert((i, j), best);
        Ok(best)
    };
    let mut best: Option<Time> = None;
    'masks: for mask in 0u32..(1 << (n - 1)) {
        let mut total = Time::ZERO;
        let mut start = 0;
        for g in 1..=n {
            if g == n || mask & (1 << (g - 1)) != 0 {
                if g - start > iota {
                    continue 'masks;
                }
                total += seg(start, g)?;
                start = g;
            }
        }
        best = Some(best.map_or(total, |b: Time| b.min(total)));
    }
    best.ok_or_else(|| "no segmentation within the range limit".into())
}

// 4 ────────────────────────────────────────────────────────────────────────

fn greedy_vs_exact() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut ratios = Vec::new();
    let mut worst: f64 = 1.0;
    for inst in 0..600 {
        let na = rng.gen_range(1..=4);
        let nd = rng.gen_range(1..=12);
        let density = rng.gen_range(0.3..1.0);
        let mut costs: Vec<Time> = (0..na).map(|_| Time::from_us(rng.gen_range(20..=300) as f64)).collect();
        costs.extend((0..nd).map(|_| Time::from_us(rng.gen_range(1..=120) as f64)));
        let sets = OverlapSets {
            sets: (0..na).map(|a| (a, (na..na + nd).filter(|_| rng.gen_bool(density)).collect())).collect(),
        };
        let g = greedy_with_costs(&sets, &costs);
        let x = exact_with_costs(&sets, &costs).map_err(|e| e.to_string())?;
        ensure(g.is_feasible(&sets) && x.is_feasible(&sets), || format!("instance {inst}: infeasible assignment"))?;
        let (og, ox) = (g.objective(&costs), x.objective(&costs));
        ensure(og <= ox, || format!("instance {inst}: greedy {og} beats exact {ox}"))?;
        let r = if ox == Time::ZERO { 1.0 } else { og.as_nanos() as f64 / ox.as_nanos() as f64 };
        worst = worst.min(r);
        ratios.push(r);
    }
    let avg = ratios.iter().sum::<f64>() / ratios.len() as f64;
    ensure(avg >= 0.95, || format!("average greedy/exact ratio {avg:.4} < 0.95"))?;
    Ok(format!("{} instances, greedy/exact average {:.2}% (worst {:.2}%)", ratios.len(), avg * 100.0, worst * 100.0))
}

// 5 ────────────────────────────────────────────────────────────────────────

fn check_breakdown(tl: &sim::Timeline) -> Result<(), String> {
    let b = decompose(tl);
    let (c, m) = (tl.lane_busy(Lane::Compute), tl.lane_busy(Lane::Network));
    ensure(b.overlapped <= c.min(m), || format!("overlapped {} exceeds min({c}, {m})", b.overlapped))?;
    ensure(b.non_overlapped_compute + b.non_overlapped_comm + b.overlapped == b.iteration_time, || "breakdown does not sum".into())
}

fn timeline_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..500 {
        let n = rng.gen_range(1..=40);
        let p = random_program(&mut rng, n);
        let costs = random_costs(&mut rng, n);
        let tl = timeline_from_costs(&p, &costs);
        let oracle = event_queue_sim(&p, &costs);
        let got: Vec<(Time, Time)> = tl.entries.iter().map(|e| (e.start, e.end)).collect();
        ensure(got == oracle, || format!("simulate case {case} differs from the event queue"))?;
        check_breakdown(&tl)?;
    }

    let mut ranges = 0;
    let db = graphgen::preset_costs("v100-like").unwrap();
    let graphs: Vec<Program> = small_configs().into_iter().map(|(_, c)| graphgen::generate(&c).unwrap()).collect();
    let mut attempts = 0;
    while ranges < 500 {
        attempts += 1;
        ensure(attempts < 50_000, || format!("only {ranges} partitionable ranges found"))?;
        let g = &graphs[rng.gen_range(0..graphs.len())];
        let fwd_end = g.forward_positions().len();
        let s = rng.gen_range(0..fwd_end);
        let e = rng.gen_range(s + 1..=fwd_end.min(s + 14));
        let k = rng.gen_range(2..=4);
        let Ok(axes) = infer_axes(g, s..e, k) else { continue };
        let Ok(frag) = partition::rewrite_partitioned(g, &axes) else { continue };
        let sched = build_stages(&frag, k);
        let costs = db.program_costs(&sched.program).map_err(|e| e.to_string())?;
        let oracle_end = event_queue_sim(&sched.program, &costs).into_iter().map(|(_, e)| e).max().unwrap_or(Time::ZERO);
        let got = simulate_range(&sched, &db).map_err(|e| e.to_string())?;
        ensure(got == oracle_end, || format!("simulate_range {got} vs event queue {oracle_end} on {s}..{e} k={k}"))?;
        check_breakdown(&timeline_from_costs(&sched.program, &costs))?;
        ranges += 1;
    }

    for (_, cfg) in small_configs() {
        let p = graphgen::generate(&cfg).unwrap();
        let tl = sim::simulate(&p, &db).map_err(|e| e.to_string())?;
        let costs = db.program_costs(&p).map_err(|e| e.to_string())?;
        let oracle = event_queue_sim(&p, &costs);
        ensure(tl.entries.iter().map(|e| (e.start, e.end)).eq(oracle), || "generated program differs".into())?;
        check_breakdown(&tl)?;
    }
    Ok(format!("500 random programs and {ranges} pipelined ranges match the event-queue simulator"))
}

// 6 ────────────────────────────────────────────────────────────────────────

fn end_to_end() -> Outcome {
    let p = graphgen::generate(&graphgen::preset("gpt2-s-moe", 16).unwrap()).unwrap();
    let db = graphgen::preset_costs("v100-like").unwrap();
    let ratio = graphgen::a2a_expert_ratio(&p, &db);
    let params = PartitionParams::default();
    let mut results = Vec::new();
    for passes in [vec![], vec![Pass::DwSchedule], vec![Pass::Partition], vec![Pass::DwSchedule, Pass::Partition]] {
        let opt = driver::optimize(&p, &db, &passes, &params, None).map_err(|e| e.to_string())?;
        ensure(ir::validate(&opt.program).is_empty(), || format!("{passes:?}: invalid program"))?;
        results.push(decompose(&sim::simulate(&opt.program, &db).map_err(|e| e.to_string())?));
    }
    let [base, dw, part, both] = [results[0], results[1], results[2], results[3]];
    let reduction = 1.0 - both.non_overlapped_comm.as_nanos() as f64 / base.non_overlapped_comm.as_nanos() as f64;
    ensure(reduction >= 0.40, || format!("non-overlapped comm reduced by only {:.1}%", reduction * 100.0))?;
    ensure(both.iteration_time <= dw.iteration_time.min(part.iteration_time), || {
        format!("both passes {} > single pass min({}, {})", both.iteration_time, dw.iteration_time, part.iteration_time)
    })?;
    let ms = |t: Time| t.as_us() / 1000.0;
    Ok(format!(
        "a2a/expert {ratio:.2}; iteration ms: base {:.2}, dw {:.2}, partition {:.2}, both {:.2}; non-overlapped comm -{:.1}%",
        ms(base.iteration_time),
        ms(dw.iteration_time),
        ms(part.iteration_time),
        ms(both.iteration_time),
        reduction * 100.0
    ))
}

// 7 ────────────────────────────────────────────────────────────────────────

fn axis_soundness() -> Outcome {
    let mut checked = 0;
    let mut unsat = 0;
    let mut tutel = 0;
    for (name, cfg) in small_configs() {
        let p = graphgen::generate(&cfg).unwrap();
        let fwd_end = p.forward_positions().len();
        let gates: Vec<usize> = p.instructions.iter().filter(|i| matches!(i.op, OpKind::Gate { .. })).map(|i| i.index).collect();
        for s in 0..fwd_end {
            for e in s + 1..=fwd_end {
                for k in 2..=4 {
                    match infer_axes(&p, s..e, k) {
                        Ok(a) => {
                            recheck_axes(&p, &a).map_err(|m| format!("{name} {s}..{e} k={k}: {m}"))?;
                            checked += 1;
                        }
                        Err(PartitionError::Unsatisfiable { .. } | PartitionError::UnknownOperator { .. }) => {}
                        Err(other) => return Err(format!("{name} {s}..{e} k={k}: {other}")),
                    }
                    if cfg.gate == GateKind::BatchPrioritized && gates.iter().any(|&g| s <= g && g < e) {
                        let r = infer_axes(&p, s..e, k);
                        ensure(matches!(r, Err(PartitionError::Unsatisfiable { .. })), || format!("{name} {s}..{e}: BPR range not Unsatisfiable"))?;
                        unsat += 1;
                    }
                }
            }
        }
        let a2a: Vec<usize> = p.instructions.iter().filter(|i| i.phase == ir::Phase::Forward && i.is_all_to_all()).map(|i| i.index).collect();
        for pair in a2a.chunks(2) {
            let r = pair[0]..pair[1] + 1;
            let a = infer_axes(&p, r.clone(), 2).map_err(|e| format!("{name}: Tutel range {r:?}: {e}"))?;
            recheck_axes(&p, &a)?;
            for i in &p.instructions[r] {
                for t in i.inputs.iter().chain(&i.outputs).filter(|t| !p.params.contains(t)) {
                    let cap = p.tensor(*t).axis_of(ir::AxisLabel::Capacity).map(Axis::Dim);
                    ensure(Some(a.axis(*t)) == cap, || format!("{name}: {t} not on the capacity axis"))?;
                }
            }
            tutel += 1;
        }
    }
    Ok(format!("{checked} assignments re-checked, {unsat} BPR ranges Unsatisfiable, {tutel} capacity-axis ranges found"))
}

// 8 ────────────────────────────────────────────────────────────────────────

fn read_dir(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect()
}

fn determinism() -> Outcome {
    let configs = [
        ("tiny", GateKind::Random, 4, true),
        ("gpt2-s-moe", GateKind::Switch, 3, false),
    ];
    let mut files = 0;
    for (name, gate, max_k, verify) in configs {
        let mut outputs = Vec::new();
        for exec in [Execution::Parallel, Execution::Parallel, Execution::Sequential] {
            let dir = tempfile::tempdir().unwrap();
            let cfg = RunConfig {
                graph: GraphSource::Preset { name: name.into(), gpus: 16, gate: Some(gate) },
                costs: CostSource::Preset("v100-like".into()),
                passes: vec![Pass::DwSchedule, Pass::Partition],
                max_k,
                gamma_ms: None,
                iota: None,
                seed: 42,
                out_dir: dir.path().to_path_buf(),
                verify,
                force_range: None,
                exec,
            };
            driver::run(&cfg).map_err(|e| e.to_string())?;
            outputs.push(read_dir(dir.path()));
        }
        ensure(outputs[0].len() == driver::ARTIFACTS.len(), || format!("{name}: {} artifacts", outputs[0].len()))?;
        for o in &outputs[1..] {
            for (file, bytes) in &outputs[0] {
                ensure(o.get(file) == Some(bytes), || format!("{name}: {file} differs between runs"))?;
            }
        }
        files += outputs[0].len();
    }
    Ok(format!("{files} artifacts byte-identical across repeated parallel and sequential runs"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome, Duration); 8] = [
        ("1 gating equivalence", gating_equivalence, Duration::from_secs(30)),
        ("2 partition numerics", partition_numerics, Duration::from_secs(60)),
        ("3 DP optimality", dp_optimality, Duration::from_secs(120)),
        ("4 greedy vs exact dW", greedy_vs_exact, Duration::from_secs(120)),
        ("5 timeline oracle", timeline_oracle, Duration::from_secs(120)),
        ("6 end-to-end gpt2-s-moe", end_to_end, Duration::from_secs(300)),
        ("7 axis inference", axis_soundness, Duration::from_secs(120)),
        ("8 determinism", determinism, Duration::from_secs(300)),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, f, limit) in criteria {
        if !filter.is_empty() && !filter.iter().any(|x| name.contains(x.as_str())) {
            continue;
        }
        let t0 = Instant::now();
        let r = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            Err(e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panic".into()))
        });
        let dt = t0.elapsed();
        let r = r.and_then(|m| if dt <= limit { Ok(m) } else { Err(format!("{m}; took {dt:.1?}, limit {limit:?}")) });
        match r {
            Ok(m) => println!("criterion {name}: PASS ({dt:.1?}) {m}"),
            Err(m) => {
                failed += 1;
                println!("criterion {name}: FAIL ({dt:.1?}) {m}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use moe_overlap::driver::{self, CostSource, ForcedRange, GraphSource, Pass, RunConfig};
use moe_overlap::graphgen;
use moe_overlap::ir::{self, GateKind, Program};
use moe_overlap::par::Execution;
use moe_overlap::sim;

#[derive(Parser)]
#[command(name = "moe-overlap", version, about = "Overlap all-to-all communication with computation in MoE training programs")]
struct Cli {
    /// Evaluate candidates on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a training program from a model preset.
    Gen {
        #[arg(long)]
        preset: String,
        #[arg(long, default_value_t = 16)]
        gpus: usize,
        #[arg(long, value_parser = parse_gate)]
        gate: Option<GateKind>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply passes to a program file.
    Optimize {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long, default_value = "v100-like")]
        costs: String,
        /// dw-schedule and/or partition; repeatable or comma separated.
        #[arg(long = "pass", value_delimiter = ',', required = true)]
        passes: Vec<Pass>,
        #[arg(long)]
        out: PathBuf,
        /// Where to write the dW assignment (default: next to --out).
        #[arg(long)]
        assignment: Option<PathBuf>,
        /// Where to write the partition plan (default: next to --out).
        #[arg(long)]
        plan: Option<PathBuf>,
        #[command(flatten)]
        hp: HyperParams,
    },
    /// Simulate a program on the two-lane timeline.
    Simulate {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long, default_value = "v100-like")]
        costs: String,
        #[arg(long)]
        timeline: Option<PathBuf>,
        #[arg(long)]
        gantt: Option<PathBuf>,
        #[arg(long)]
        breakdown: Option<PathBuf>,
    },
    /// Check that partitioned MoE ranges compute exactly what the original does.
    VerifyEquivalence {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long, default_value_t = 2)]
        k: usize,
        #[arg(long, value_parser = parse_gate)]
        gate: Option<GateKind>,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Generate or load, optimize, simulate, and write all artifacts.
    Run(RunArgs),
    /// Compare two programs under one cost model.
    Compare {
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long)]
        optimized: PathBuf,
        #[arg(long, default_value = "v100-like")]
        costs: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Clone)]
struct HyperParams {
    /// Maximum partitions per range (K).
    #[arg(long, env = "LANCET_MAX_PARTITION", default_value_t = 8)]
    max_partition: usize,
    /// Group time budget in milliseconds (default: five groups per MoE span).
    #[arg(long, env = "LANCET_GROUP_MS")]
    group_ms: Option<f64>,
    /// Maximum range length in groups (default: one MoE span).
    #[arg(long, env = "LANCET_MAX_RANGE_GROUPS")]
    max_range_groups: Option<usize>,
    /// Partition exactly START..END:K instead of running the DP.
    #[arg(long)]
    force_range: Option<ForcedRange>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, conflicts_with = "graph")]
    preset: Option<String>,
    #[arg(long)]
    graph: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    gpus: usize,
    #[arg(long, value_parser = parse_gate)]
    gate: Option<GateKind>,
    #[arg(long, default_value = "v100-like")]
    costs: String,
    /// Comma separated passes, or `none`.
    // Fully qualified so clap parses the whole list as one value.
    #[arg(long, default_value = "dw-schedule,partition", value_parser = driver::parse_passes)]
    passes: std::vec::Vec<Pass>,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    /// Also check numerical equivalence on a tiny graph of the same structure.
    #[arg(long)]
    verify: bool,
    #[command(flatten)]
    hp: HyperParams,
}

fn parse_gate(s: &str) -> Result<GateKind, String> {
    s.parse()
}

fn exec(sequential: bool) -> Execution {
    if sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    }
}

fn load(path: &Path) -> Result<Program> {
    let text = driver::read(path)?;
    ir::load_program(&text).with_context(|| format!("loading {}", path.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    driver::write(path, text)?;
    Ok(())
}

fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("program");
    out.with_file_name(format!("{stem}.{suffix}.json"))
}

fn main() -> ExitCode {
    match real_main() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn real_main() -> Result<ExitCode> {
    let cli = Cli::parse();
    let exec = exec(cli.sequential);
    match cli.command {
        Command::Gen { preset, gpus, gate, out } => {
            let mut cfg = graphgen::preset(&preset, gpus)?;
            if let Some(g) = gate {
                cfg.gate = g;
            }
            let p = graphgen::generate(&cfg)?;
            write(&out, &format!("{}\n", p.to_json()))?;
            println!("wrote {} ({} instructions, {} parameters)", out.display(), p.len(), p.params.len());
        }
        Command::Optimize { graph, costs, passes, out, assignment, plan, hp } => {
            let program = load(&graph)?;
            let db = CostSource::parse(&costs).load()?;
            let params = moe_overlap::partition::PartitionParams {
                max_k: hp.max_partition,
                gamma: hp.group_ms.map(|ms| moe_overlap::Time::from_us(ms * 1000.0)),
                iota: hp.max_range_groups,
                exec,
            };
            let opt = driver::optimize(&program, &db, &passes, &params, hp.force_range)?;
            write(&out, &format!("{}\n", opt.program.to_json()))?;
            if let Some(a) = &opt.assignment {
                let path = assignment.unwrap_or_else(|| sibling(&out, "assignment"));
                write(&path, &driver::to_json(a))?;
                println!("dw-schedule: {} dW instructions assigned -> {}", a.len(), path.display());
            }
            if let Some(p) = &opt.plan {
                let path = plan.unwrap_or_else(|| sibling(&out, "plan"));
                write(&path, &driver::to_json(p))?;
                println!(
                    "partition: {} ranges, forward {:.1} us -> {:.1} us -> {}",
                    p.partitioned().count(),
                    p.serial_forward.as_us(),
                    p.predicted_forward.as_us(),
                    path.display()
                );
            }
            println!("wrote {}", out.display());
        }
        Command::Simulate { graph, costs, timeline, gantt, breakdown } => {
            let program = load(&graph)?;
            let db = CostSource::parse(&costs).load()?;
            let tl = sim::simulate(&program, &db)?;
            let b = sim::decompose(&tl);
            if let Some(p) = timeline {
                write(&p, &driver::to_json(&tl))?;
            }
            if let Some(p) = gantt {
                write(&p, &sim::gantt_svg(&tl))?;
            }
            if let Some(p) = breakdown {
                write(&p, &sim::breakdown_csv(&b))?;
            }
            print!("{}", sim::breakdown_csv(&b));
        }
        Command::VerifyEquivalence { graph, k, gate, seed } => {
            let mut program = load(&graph)?;
            if let Some(g) = gate {
                driver::set_gate(&mut program, g);
            }
            let r = driver::verify_equivalence(&program, k, seed)?;
            println!("{}", driver::to_json(&r).trim_end());
            if !r.passed {
                for m in &r.mismatches {
                    eprintln!("mismatch: {m}");
                }
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Run(args) => {
            let graph = match (args.preset, args.graph) {
                (Some(name), None) => GraphSource::Preset { name, gpus: args.gpus, gate: args.gate },
                (None, Some(path)) => GraphSource::File(path),
                (None, None) => GraphSource::Preset { name: "gpt2-s-moe".into(), gpus: args.gpus, gate: args.gate },
                (Some(_), Some(_)) => bail!("--preset and --graph are exclusive"),
            };
            let config = RunConfig {
                graph,
                costs: CostSource::parse(&args.costs),
                passes: args.passes,
                max_k: args.hp.max_partition,
                gamma_ms: args.hp.group_ms,
                iota: args.hp.max_range_groups,
                seed: args.seed,
                out_dir: args.out_dir,
                verify: args.verify,
                force_range: args.hp.force_range,
                exec,
            };
            let s = driver::run(&config)?;
            println!("baseline iteration {:.1} us, non-overlapped comm {:.1} us", s.baseline.iteration_time.as_us(), s.baseline.non_overlapped_comm.as_us());
            if let (Some(o), Some(sp), Some(red)) = (s.optimized, s.speedup, s.comm_reduction) {
                println!(
                    "optimized iteration {:.1} us, non-overlapped comm {:.1} us, speedup {:.3}x, comm reduction {:.1}%",
                    o.iteration_time.as_us(),
                    o.non_overlapped_comm.as_us(),
                    sp,
                    red * 100.0
                );
            }
            if let Some(v) = &s.verify {
                println!("equivalence (k={}): {}", v.k, if v.passed { "ok" } else { "MISMATCH" });
                if !v.passed {
                    return Ok(ExitCode::FAILURE);
                }
            }
            println!("artifacts in {}", config.out_dir.display());
        }
        Command::Compare { baseline, optimized, costs, out } => {
            let db = CostSource::parse(&costs).load()?;
            let c = sim::compare(&load(&baseline)?, &load(&optimized)?, &db)?;
            let text = driver::to_json(&c);
            match out {
                Some(p) => write(&p, &text)?,
                None => print!("{text}"),
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

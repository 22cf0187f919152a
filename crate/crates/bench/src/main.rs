use std::fs;
use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use agentmem::{Metric, Result, StoreConfig};
use agentmem_bench::compare::{compare, format_table, BootstrapOptions};
use agentmem_bench::oracle::StreamingOracle;
use agentmem_bench::run::{run, ReplayMode, RunOptions, RunReport};
use agentmem_bench::strategy::Strategy;
use agentmem_bench::workload::{generate_workload, static_base, Generator, OpKind, Pattern, Trace, WorkloadSpec};
use agentmem::ScopeId;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "agentmem-bench", about = "Replay agent workloads against agentmem and baselines")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a generated trace as JSON.
    Generate {
        #[command(flatten)]
        workload: WorkloadArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Replay a trace against one strategy and write records.csv,
    /// summary.json and curve.dat.
    Run {
        #[command(flatten)]
        workload: WorkloadArgs,
        /// Replay this trace instead of generating one.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long, default_value = "full")]
        strategy: Strategy,
        /// Store configuration as JSON; unset fields keep their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 100_000)]
        static_base: usize,
        #[arg(long)]
        nlist: Option<usize>,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value_t = 8)]
        nprobe: usize,
        #[arg(long)]
        split_threshold: Option<usize>,
        #[arg(long)]
        split_target: Option<usize>,
        /// Record wall-clock latency (records are then not reproducible).
        #[arg(long)]
        timing: bool,
        /// One thread per agent; skips recall and walk measurement.
        #[arg(long)]
        throughput: bool,
        #[arg(long)]
        no_recall: bool,
        #[arg(long)]
        no_walk: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Paired ratios a/b with bootstrap intervals.
    Compare {
        a: PathBuf,
        b: PathBuf,
        #[arg(long, default_value_t = 1000)]
        resamples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Exact top-k for every search of a trace, as CSV.
    Oracle {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long, default_value_t = 100_000)]
        static_base: usize,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value = "l2")]
        metric: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct WorkloadArgs {
    #[arg(long, default_value = "one-search-one-insert")]
    pattern: Pattern,
    #[arg(long, default_value_t = 1)]
    agents: usize,
    /// Requests per agent.
    #[arg(long, default_value_t = 500)]
    requests: usize,
    #[arg(long, default_value_t = 3)]
    steps: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 3)]
    groups: usize,
    #[arg(long)]
    sigma: Option<f32>,
    /// Draw vectors from an fvecs file instead of step groups.
    #[arg(long)]
    fvecs: Option<PathBuf>,
    #[arg(long, env = "PANCAKE_SEED", default_value_t = 0)]
    seed: u64,
}

impl WorkloadArgs {
    fn spec(&self) -> WorkloadSpec {
        let generator = match &self.fvecs {
            Some(p) => Generator::FileTrace(p.clone()),
            None => Generator::Stepwise {
                groups: self.groups,
                sigma: self.sigma,
            },
        };
        WorkloadSpec {
            pattern: self.pattern,
            agents: self.agents,
            requests: self.requests,
            steps: self.steps,
            dimension: self.dim,
            generator,
            seed: self.seed,
        }
    }
}

fn parse_metric(s: &str) -> Result<Metric> {
    match s.to_ascii_lowercase().as_str() {
        "l2" | "euclidean" | "squared-euclidean" => Ok(Metric::SquaredEuclidean),
        "ip" | "inner-product" => Ok(Metric::InnerProduct),
        "cosine" => Ok(Metric::Cosine),
        _ => Err(agentmem::Error::Usage(format!("unknown metric `{s}`"))),
    }
}

fn load_trace(path: &PathBuf) -> Result<Trace> {
    Trace::from_json(&fs::read_to_string(path)?)
}

fn main() -> ExitCode {
    match exec(Cli::parse().cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 1 })
        }
    }
}

fn exec(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Generate { workload, out } => {
            let trace = generate_workload(&workload.spec())?;
            fs::write(out, trace.to_json())?;
        }
        Cmd::Run {
            workload,
            trace,
            strategy,
            config,
            static_base,
            nlist,
            k,
            nprobe,
            split_threshold,
            split_target,
            timing,
            throughput,
            no_recall,
            no_walk,
            out,
        } => {
            let trace = match trace {
                Some(p) => load_trace(&p)?,
                None => generate_workload(&workload.spec())?,
            };
            let base = match config {
                Some(p) => serde_json::from_str::<StoreConfig>(&fs::read_to_string(p)?)
                    .map_err(|e| agentmem::Error::Usage(format!("config: {e}")))?,
                None => StoreConfig::new(trace.spec.dimension),
            };
            let opts = RunOptions {
                static_base,
                nlist,
                k,
                nprobe,
                recall: !no_recall,
                walk: !no_walk,
                timing,
                mode: if throughput { ReplayMode::Throughput } else { ReplayMode::Deterministic },
                split_threshold,
                split_target,
                ..RunOptions::default()
            };
            let report = run(&trace, strategy, &opts, &base)?;
            report.write_dir(&out)?;
            println!("{}", serde_json::to_string_pretty(report.summary()).expect("summary serializes"));
        }
        Cmd::Compare { a, b, resamples, seed } => {
            let (a, b) = (RunReport::load(a)?, RunReport::load(b)?);
            let rows = compare(&a, &b, &BootstrapOptions { resamples, seed, ..BootstrapOptions::default() })?;
            print!("{}", format_table(&rows));
        }
        Cmd::Oracle {
            trace,
            static_base: n,
            k,
            metric,
            out,
        } => {
            let trace = load_trace(&trace)?;
            let mut oracle = StreamingOracle::new(parse_metric(&metric)?);
            for (i, v) in static_base(n, trace.spec.dimension, trace.spec.seed).into_iter().enumerate() {
                oracle.insert(i as u64, ScopeId::Static, v);
            }
            let mut next = (n as u64).max(1);
            let mut buf = Vec::new();
            writeln!(buf, "seq,rank,id,distance")?;
            for op in &trace.ops {
                match op.kind {
                    OpKind::Insert => {
                        oracle.insert(next, ScopeId::Static, op.vector.clone());
                        next += 1;
                    }
                    OpKind::Search => {
                        for (rank, (id, d)) in oracle.topk(&op.vector, k, None).into_iter().enumerate() {
                            writeln!(buf, "{},{rank},{id},{d}", op.seq)?;
                        }
                    }
                }
            }
            match out {
                Some(p) => fs::write(p, buf)?,
                None => std::io::stdout().write_all(&buf)?,
            }
        }
    }
    Ok(())
}

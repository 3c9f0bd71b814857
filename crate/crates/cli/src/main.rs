//! `ckcs-bench`: run scenarios, cost sweeps, secrecy audits and vector checks.
//!
//! Exit codes: 0 success, 2 usage, 3 `run`, 4 `sweep`, 5 `audit`, 6 `vectors`.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use ckcs_core::exec::Execution;
use ckcs_core::protocol::{Op, ProtocolId};
use ckcs_core::security::{audit_scenarios, AuditOptions, CodeMode};
use ckcs_core::sim::{self, corpus, Grid, Layout, Scenario, TraceShape};
use ckcs_core::vectors;

const DEFAULT_SEED: u64 = 1;

#[derive(Parser, Debug)]
#[command(name = "ckcs-bench", version, about = "Group rekeying simulator and cost bench")]
struct Cli {
    /// Run on one thread even when built with the `parallel` feature.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Execute one scenario file and print its trace summary.
    Run(RunArgs),
    /// Meter every protocol over a grid of group and batch sizes; CSV out.
    Sweep(SweepArgs),
    /// Forward and backward secrecy checks over seeded random traces.
    Audit(AuditArgs),
    /// Check the crypto primitives against known-answer vectors.
    Vectors(VectorArgs),
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Scenario file (`init ...` then `join`/`leave` lines).
    scenario: PathBuf,
    /// Replace the seed given in the file.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long, value_delimiter = ',', default_value = "ckcs,lkh,oft,okd")]
    protocols: Vec<ProtocolId>,
    #[arg(long, value_delimiter = ',', default_value = "256,1024,4096,8192")]
    n: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "16,64,256,1024")]
    m: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "join,leave")]
    ops: Vec<Op>,
    /// Leaver placement: random, best-half, worst-spread.
    #[arg(long, value_delimiter = ',', default_value = "random")]
    layouts: Vec<Layout>,
    #[arg(long)]
    seed: Option<u64>,
    /// CSV path. Defaults to `$CKCS_OUT_DIR/sweep.csv`, else stdout. Notes
    /// go next to it as `<path>.notes.txt`, or to stderr.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AuditArgs {
    /// Random traces per protocol.
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 64)]
    max_n: usize,
    #[arg(long, default_value_t = 8)]
    max_events: usize,
    #[arg(long, default_value_t = 24)]
    max_batch: usize,
    #[arg(long, value_delimiter = ',', default_value = "ckcs,lkh,oft,okd")]
    protocols: Vec<ProtocolId>,
    #[arg(long)]
    seed: Option<u64>,
    /// Give the adversary every node code it ever saw exported.
    #[arg(long)]
    codes_public: bool,
    /// Pool the knowledge of members that leave together.
    #[arg(long)]
    collusion: bool,
}

#[derive(Args, Debug)]
struct VectorArgs {
    /// Vector file; the shipped set when omitted.
    #[arg(long)]
    file: Option<PathBuf>,
}

fn seed_or_default(seed: Option<u64>) -> u64 {
    seed.unwrap_or_else(|| {
        eprintln!("seed: {DEFAULT_SEED} (default)");
        DEFAULT_SEED
    })
}

fn label(p: ProtocolId) -> String {
    match p {
        ProtocolId::Okd => "paper-level OKD".into(),
        p => p.to_string(),
    }
}

fn cmd_run(args: &RunArgs) -> Result<()> {
    let text = fs::read_to_string(&args.scenario).with_context(|| format!("reading {}", args.scenario.display()))?;
    let mut scenario = Scenario::parse(&text).with_context(|| format!("parsing {}", args.scenario.display()))?;
    if let Some(seed) = args.seed {
        scenario.seed = seed;
    }
    if scenario.protocol == ProtocolId::Okd {
        println!("# {}", label(scenario.protocol));
    }
    let trace = sim::run(&scenario)?;
    print!("{}", trace.summary());
    println!("digest={}", trace.digest());
    Ok(())
}

fn out_path(explicit: &Option<PathBuf>, file: &str) -> Option<PathBuf> {
    explicit
        .clone()
        .or_else(|| std::env::var_os("CKCS_OUT_DIR").map(|d| Path::new(&d).join(file)))
}

fn cmd_sweep(args: &SweepArgs, exec: Execution) -> Result<()> {
    let grid = Grid {
        protocols: args.protocols.clone(),
        ns: args.n.clone(),
        ms: args.m.clone(),
        ops: args.ops.clone(),
        layouts: args.layouts.clone(),
        seed: seed_or_default(args.seed),
    };
    let report = sim::sweep(&grid, exec)?;

    let mut notes = report.notes.clone();
    if grid.protocols.contains(&ProtocolId::Okd) {
        notes.push("okd rows are paper-level OKD".into());
    }
    match out_path(&args.out, "sweep.csv") {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            report.write_csv(fs::File::create(&path)?)?;
            let mut side = path.clone().into_os_string();
            side.push(".notes.txt");
            fs::write(&side, notes.iter().map(|n| format!("{n}\n")).collect::<String>())?;
            eprintln!("wrote {} rows to {}", report.rows.len(), path.display());
        }
        None => {
            report.write_csv(io::stdout().lock())?;
            for n in &notes {
                eprintln!("note: {n}");
            }
        }
    }

    // Closed-form CKCS counts double as a self-check.
    for r in report.rows.iter().filter(|r| r.cell.protocol == ProtocolId::Ckcs) {
        let m = r.cell.m as u64;
        let ok = match r.cell.op {
            Op::Join => (r.keygen, r.encrypt, r.multicast, r.unicast) == (m + 1, m, 1, 0),
            Op::Leave => r.keygen == 1 && r.multicast == 1,
        };
        if !ok {
            bail!("ckcs row {:?} breaks its closed form: {r:?}", r.cell);
        }
    }
    Ok(())
}

fn cmd_audit(args: &AuditArgs, exec: Execution) -> Result<()> {
    if args.max_n < 2 {
        bail!("--max-n must be at least 2");
    }
    let seed = seed_or_default(args.seed);
    let shape = TraceShape {
        max_n: args.max_n,
        max_events: args.max_events,
        max_batch: args.max_batch,
    };
    let scenarios: Vec<Scenario> = corpus(args.trials, seed, shape)
        .into_iter()
        .filter(|s| args.protocols.contains(&s.protocol))
        .collect();
    let opts = AuditOptions {
        codes: if args.codes_public { CodeMode::Public } else { CodeMode::Secret },
        collusion: args.collusion,
    };
    let summary = audit_scenarios(&scenarios, opts, exec)?;

    let mut out = io::stdout().lock();
    writeln!(
        out,
        "{} traces, seed {seed}, codes {}, collusion {}",
        summary.traces,
        if args.codes_public { "public" } else { "secret" },
        if args.collusion { "on" } else { "off" }
    )?;
    for line in summary.lines() {
        match line.strip_prefix("okd ") {
            Some(rest) => writeln!(out, "{} {rest}", label(ProtocolId::Okd))?,
            None => writeln!(out, "{line}")?,
        }
    }
    for e in &summary.examples {
        write!(out, "{e}")?;
    }
    if summary.unreplayable > 0 {
        bail!("{} breach witnesses failed to replay", summary.unreplayable);
    }
    if summary.total_breaches() > 0 {
        bail!("{} secrecy breaches", summary.total_breaches());
    }
    Ok(())
}

fn cmd_vectors(args: &VectorArgs) -> Result<()> {
    let n = match &args.file {
        Some(p) => vectors::verify(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
        None => vectors::verify_golden()?,
    };
    println!("{n} vectors ok");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let exec = if cli.sequential { Execution::Sequential } else { Execution::Parallel };
    let (result, code) = match &cli.command {
        Command::Run(a) => (cmd_run(a), 3),
        Command::Sweep(a) => (cmd_sweep(a, exec), 4),
        Command::Audit(a) => (cmd_audit(a, exec), 5),
        Command::Vectors(a) => (cmd_vectors(a), 6),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(code)
        }
    }
}

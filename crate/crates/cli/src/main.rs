use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use swizzlelab::arch::{load_arch_spec, ArchSpec};
use swizzlelab::client::{Client, ClientConfig, ClientMode};
use swizzlelab::optimizer::{
    optimize_with, write_progression_csv, HistorySink, JsonlSink, LlmProposer, Proposer, ReplayProposer,
    SearchProposer, DEFAULT_MAX_ITERS,
};
use swizzlelab::patterns::{check_bijectivity, BuiltinPattern, GridSpec, Mapping, SwizzlePattern};
use swizzlelab::sim::{simulate_pair, BottleneckReport, ExecParams, SetIndexing};
use swizzlelab::traces::{generate_trace, KernelKind, KernelSpec};

#[derive(Parser)]
#[command(name = "swizzlelab", version, about = "Chiplet GPU workgroup remapping lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a kernel with and without a remapping.
    Simulate(SimulateArgs),
    /// Baseline vs remapped hit rate over several problem sizes (CSV).
    Sweep(SweepArgs),
    /// Run the propose/validate/simulate loop.
    Optimize(OptimizeArgs),
    /// Check that a remapping is a permutation of a grid.
    Validate(ValidateArgs),
}

#[derive(Args)]
struct MachineArgs {
    /// Arch preset name or path to an arch JSON document.
    #[arg(long, default_value = "mi300x-like")]
    arch: String,
    /// Override the XCD count of the arch.
    #[arg(long)]
    xcds: Option<u32>,
    #[arg(long, value_enum, default_value_t = Indexing::Hashed)]
    set_indexing: Indexing,
    /// Line touches per workgroup turn.
    #[arg(long, default_value_t = 1)]
    granularity: u32,
}

#[derive(Clone, Copy, ValueEnum)]
enum Indexing {
    Hashed,
    Modulo,
}

#[derive(Args)]
struct KernelArgs {
    #[arg(long, default_value = "gemm")]
    kernel: String,
    /// Square problem size (rows, or elements for 1-D kernels).
    #[arg(long)]
    size: Option<u64>,
}

#[derive(Args)]
struct PatternArgs {
    /// Built-in pattern name; defaults to the kernel's usual remapping.
    #[arg(long, conflicts_with = "expr")]
    pattern: Option<String>,
    /// Remapping expression; give it twice for a (row, column) pair.
    #[arg(long, num_args = 1)]
    expr: Vec<String>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    kernel: KernelArgs,
    #[command(flatten)]
    pattern: PatternArgs,
    #[command(flatten)]
    machine: MachineArgs,
    /// Directory for baseline.json and swizzled.json; stdout otherwise.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, default_value = "gemm")]
    kernel: String,
    /// Comma-separated problem sizes.
    #[arg(long, value_delimiter = ',', required = true)]
    sizes: Vec<u64>,
    #[command(flatten)]
    pattern: PatternArgs,
    #[command(flatten)]
    machine: MachineArgs,
    /// Directory for sweep.csv; stdout otherwise.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ProposerKind {
    Search,
    Llm,
    Replay,
}

#[derive(Args)]
struct OptimizeArgs {
    #[command(flatten)]
    kernel: KernelArgs,
    #[arg(long, value_enum, default_value_t = ProposerKind::Search)]
    proposer: ProposerKind,
    /// Pattern list (replay) or completion fixture (llm).
    #[arg(long)]
    fixture: Option<PathBuf>,
    /// With the llm proposer, call the live service and append to this fixture.
    #[arg(long, conflicts_with = "fixture")]
    record: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_MAX_ITERS)]
    max_iters: u32,
    #[arg(long, default_value = "swizzlelab-out")]
    out_dir: PathBuf,
    /// History file; defaults to history.jsonl in the output directory.
    #[arg(long)]
    history: Option<PathBuf>,
    #[command(flatten)]
    machine: MachineArgs,
}

#[derive(Args)]
struct ValidateArgs {
    #[command(flatten)]
    pattern: PatternArgs,
    /// One-dimensional grid of this many blocks.
    #[arg(long, conflicts_with = "grid")]
    blocks: Option<u64>,
    /// Two-dimensional grid, `ROWSxCOLS` in blocks.
    #[arg(long)]
    grid: Option<String>,
    /// Use the grid of this kernel when no grid is given.
    #[arg(long)]
    kernel: Option<String>,
    #[arg(long)]
    size: Option<u64>,
    #[command(flatten)]
    machine: MachineArgs,
}

enum Failure {
    Usage(anyhow::Error),
    Domain(anyhow::Error),
}

type Outcome = Result<(), Failure>;

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

fn domain(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Domain(e.into())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Optimize(a) => cmd_optimize(a),
        Command::Validate(a) => cmd_validate(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Domain(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(e)) => {
            eprintln!("usage error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn load_arch(m: &MachineArgs) -> Result<ArchSpec, Failure> {
    let path = Path::new(&m.arch);
    let mut arch = if path.is_file() {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))
            .map_err(usage)?;
        load_arch_spec(&text).map_err(usage)?
    } else {
        ArchSpec::preset(&m.arch).map_err(usage)?
    };
    if let Some(x) = m.xcds {
        arch = arch.with_num_xcds(x);
    }
    arch.validate().map_err(usage)?;
    Ok(arch)
}

fn exec_params(m: &MachineArgs) -> Result<ExecParams, Failure> {
    if m.granularity == 0 {
        return Err(usage(anyhow!("--granularity must be at least 1")));
    }
    Ok(ExecParams {
        interleave_granularity: m.granularity,
        set_indexing: match m.set_indexing {
            Indexing::Hashed => SetIndexing::Hashed,
            Indexing::Modulo => SetIndexing::Modulo,
        },
        ..ExecParams::default()
    })
}

fn kernel_spec(kernel: &str, size: Option<u64>) -> Result<KernelSpec, Failure> {
    let kind: KernelKind = kernel.parse().map_err(usage)?;
    let spec = match size {
        Some(s) => KernelSpec::default_for(kind).with_size(s),
        None => KernelSpec::default_for(kind),
    };
    spec.validate().map_err(usage)?;
    Ok(spec)
}

/// The requested pattern; bijectivity is left to the caller.
fn pattern_for(args: &PatternArgs, kind: Option<KernelKind>) -> Result<SwizzlePattern, Failure> {
    if !args.expr.is_empty() {
        if args.expr.len() > 2 {
            return Err(usage(anyhow!(
                "--expr takes one expression, or two for a (row, column) pair"
            )));
        }
        let mapping = Mapping::from_texts(&args.expr).map_err(usage)?;
        return Ok(SwizzlePattern::custom("custom", mapping));
    }
    let name = match (&args.pattern, kind) {
        (Some(n), _) => n.clone(),
        (None, Some(k)) => k.default_pattern().name().to_string(),
        (None, None) => return Err(usage(anyhow!("give --pattern or --expr"))),
    };
    Ok(name.parse::<BuiltinPattern>().map_err(usage)?.build())
}

/// Grid policy and bijectivity, reported as a domain failure.
fn check_pattern(pattern: &SwizzlePattern, grid: &GridSpec, arch: &ArchSpec) -> Outcome {
    pattern.accepts(grid).map_err(domain)?;
    let v = check_bijectivity(pattern, grid, arch).map_err(domain)?;
    if !(v.bijective && v.coverage_ok) {
        return Err(domain(anyhow!("`{}` rejected: {}", pattern.name, v.summary())));
    }
    Ok(())
}

fn delta_line(base: &BottleneckReport, swz: &BottleneckReport) -> String {
    format!(
        "{} {}: baseline {:.2}% -> {:.2}% ({:+.2} points)",
        base.kernel,
        swz.pattern,
        base.hit_rate_pct(),
        swz.hit_rate_pct(),
        swz.hit_rate_pct() - base.hit_rate_pct()
    )
}

fn write_file(path: &Path, bytes: &[u8]) -> Outcome {
    fs::write(path, bytes)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(domain)
}

fn cmd_simulate(a: SimulateArgs) -> Outcome {
    let arch = load_arch(&a.machine)?;
    let exec = exec_params(&a.machine)?;
    let spec = kernel_spec(&a.kernel.kernel, a.kernel.size)?;
    let pattern = pattern_for(&a.pattern, Some(spec.kind))?;
    let trace = generate_trace(&spec).map_err(domain)?;
    check_pattern(&pattern, &trace.grid, &arch)?;
    let (base, swz) = simulate_pair(&trace, &arch, &exec, &pattern).map_err(domain)?;
    match &a.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)
                .with_context(|| format!("creating {}", dir.display()))
                .map_err(domain)?;
            write_file(&dir.join("baseline.json"), base.to_json().as_bytes())?;
            write_file(&dir.join("swizzled.json"), swz.to_json().as_bytes())?;
        }
        None => {
            println!("{}", base.to_json());
            println!("{}", swz.to_json());
        }
    }
    println!("{}", delta_line(&base, &swz));
    Ok(())
}

struct SweepRow {
    size: u64,
    result: Result<(BottleneckReport, BottleneckReport), String>,
}

fn cmd_sweep(a: SweepArgs) -> Outcome {
    if a.sizes.is_empty() {
        return Err(usage(anyhow!("--sizes needs at least one size")));
    }
    let arch = load_arch(&a.machine)?;
    let exec = exec_params(&a.machine)?;
    let kind: KernelKind = a.kernel.parse().map_err(usage)?;
    let pattern = pattern_for(&a.pattern, Some(kind))?;
    for &s in &a.sizes {
        kernel_spec(&a.kernel, Some(s))?;
    }
    let rows: Vec<SweepRow> = a
        .sizes
        .par_iter()
        .map(|&size| {
            let run = || -> anyhow::Result<(BottleneckReport, BottleneckReport)> {
                let trace = generate_trace(&KernelSpec::default_for(kind).with_size(size))?;
                if let Err(Failure::Domain(e) | Failure::Usage(e)) = check_pattern(&pattern, &trace.grid, &arch) {
                    return Err(e);
                }
                Ok(simulate_pair(&trace, &arch, &exec, &pattern)?)
            };
            SweepRow {
                size,
                result: run().map_err(|e| format!("{e:#}")),
            }
        })
        .collect();

    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        let header = ["kernel", "pattern", "size", "baseline_rate", "swizzled_rate", "delta"];
        w.write_record(header).map_err(domain)?;
        for row in &rows {
            let (b, s, d) = match &row.result {
                Ok((b, s)) => (
                    b.l2_hit_rate.to_string(),
                    s.l2_hit_rate.to_string(),
                    (s.l2_hit_rate - b.l2_hit_rate).to_string(),
                ),
                Err(_) => Default::default(),
            };
            w.write_record([kind.name(), pattern.name.as_str(), &row.size.to_string(), &b, &s, &d])
                .map_err(domain)?;
        }
        w.flush().map_err(domain)?;
    }
    match &a.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)
                .with_context(|| format!("creating {}", dir.display()))
                .map_err(domain)?;
            write_file(&dir.join("sweep.csv"), &buf)?;
        }
        None => io::stdout().write_all(&buf).map_err(domain)?,
    }
    let failed: Vec<_> = rows
        .iter()
        .filter_map(|r| r.result.as_ref().err().map(|e| (r.size, e)))
        .collect();
    for (size, e) in &failed {
        eprintln!("size {size}: {e}");
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(domain(anyhow!("{} of {} sizes failed", failed.len(), rows.len())))
    }
}

fn cmd_optimize(a: OptimizeArgs) -> Outcome {
    let arch = load_arch(&a.machine)?;
    let exec = exec_params(&a.machine)?;
    let spec = kernel_spec(&a.kernel.kernel, a.kernel.size)?;
    let mut proposer: Box<dyn Proposer> = match a.proposer {
        ProposerKind::Search => Box::new(SearchProposer::new()),
        ProposerKind::Replay => {
            let path = a
                .fixture
                .as_ref()
                .ok_or_else(|| usage(anyhow!("--proposer replay needs --fixture")))?;
            Box::new(
                ReplayProposer::from_jsonl(path)
                    .with_context(|| format!("reading {}", path.display()))
                    .map_err(usage)?,
            )
        }
        ProposerKind::Llm => {
            let config = match (&a.fixture, &a.record) {
                (Some(f), _) => ClientConfig::replay(f),
                (None, Some(r)) => ClientConfig::from_env(ClientMode::Record(r.clone())),
                (None, None) => ClientConfig::from_env(ClientMode::Live),
            };
            Box::new(LlmProposer::new(Client::new(config).map_err(usage)?))
        }
    };
    if a.proposer == ProposerKind::Search && (a.fixture.is_some() || a.record.is_some()) {
        return Err(usage(anyhow!(
            "--fixture and --record apply to the replay and llm proposers"
        )));
    }

    fs::create_dir_all(&a.out_dir)
        .with_context(|| format!("creating {}", a.out_dir.display()))
        .map_err(domain)?;
    let history_path = a.history.clone().unwrap_or_else(|| a.out_dir.join("history.jsonl"));
    let mut sink: Box<dyn HistorySink> = Box::new(
        JsonlSink::create(&history_path)
            .with_context(|| format!("creating {}", history_path.display()))
            .map_err(domain)?,
    );
    let result = optimize_with(&spec, &arch, &exec, proposer.as_mut(), a.max_iters, sink.as_mut()).map_err(domain)?;

    let mut csv = Vec::new();
    write_progression_csv(&result, &mut csv).map_err(domain)?;
    write_file(&a.out_dir.join("progression.csv"), &csv)?;
    let best = serde_json::to_string_pretty(&result.best).map_err(domain)?;
    write_file(&a.out_dir.join("best.json"), best.as_bytes())?;

    for e in &result.history {
        let status = match (&e.report, &e.error) {
            (Some(r), _) => format!("{:.2}%", r.hit_rate_pct()),
            (None, Some(err)) => format!("invalid: {err}"),
            (None, None) => "invalid".to_string(),
        };
        let name = e.pattern.as_ref().map_or("-", |p| p.name.as_str());
        let dup = e.duplicate_of.map(|d| format!(" (repeat of {d})")).unwrap_or_default();
        println!("iteration {}: {name} {status}{dup}", e.iteration);
    }
    if let Some(why) = &result.stopped_early {
        println!("stopped after {} attempts: {why}", result.iterations_run);
    }
    let best = &result.best;
    println!(
        "best: iteration {} `{}` at {:.2}%",
        best.iteration,
        best.pattern.as_ref().map_or("-", |p| p.name.as_str()),
        best.report.as_ref().map_or(0.0, |r| r.hit_rate_pct())
    );
    Ok(())
}

fn parse_grid(text: &str) -> Result<GridSpec, Failure> {
    let (m, n) = text
        .split_once(['x', 'X'])
        .ok_or_else(|| usage(anyhow!("--grid expects ROWSxCOLS, got `{text}`")))?;
    let parse = |s: &str| {
        s.trim()
            .parse::<u64>()
            .map_err(|e| usage(anyhow!("bad grid extent `{s}`: {e}")))
    };
    Ok(GridSpec::blocks_2d(parse(m)?, parse(n)?))
}

fn cmd_validate(a: ValidateArgs) -> Outcome {
    let arch = load_arch(&a.machine)?;
    let (grid, kind) = match (&a.blocks, &a.grid, &a.kernel) {
        (Some(b), _, _) => (GridSpec::linear(*b), None),
        (None, Some(g), _) => (parse_grid(g)?, None),
        (None, None, Some(k)) => {
            let spec = kernel_spec(k, a.size)?;
            (spec.grid(), Some(spec.kind))
        }
        (None, None, None) => return Err(usage(anyhow!("give --blocks, --grid or --kernel"))),
    };
    if grid.total_blocks() == 0 {
        return Err(usage(anyhow!("grid has no blocks")));
    }
    let pattern = pattern_for(&a.pattern, kind)?;
    if let Err(e) = pattern.accepts(&grid) {
        println!("{}: rejected: {e}", pattern.name);
    }
    let v = check_bijectivity(&pattern, &grid, &arch).map_err(domain)?;
    println!("{}: {}", pattern.name, v.summary());
    if v.bijective && v.coverage_ok && pattern.accepts(&grid).is_ok() {
        Ok(())
    } else {
        Err(domain(anyhow!(
            "`{}` is not a valid remapping of {} blocks",
            pattern.name,
            grid.total_blocks()
        )))
    }
}

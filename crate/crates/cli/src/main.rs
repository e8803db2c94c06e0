use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use distir::cost::{calibrate, parse_bench_csv, CostModel};
use distir::exec::{bind_args, execute, random_tensors, read_tensors, write_tensors};
use distir::interp::{infer_types, Tensor};
use distir::ir::{default_registry, DType, DeviceId, IrModule};
use distir::lowering::{placement_check, project, project_all};
use distir::models::{build_mlp, MlpSpec};
use distir::search::{grid_search, write_report, write_scatter, SearchOptions, SearchSpace};
use distir::sim::{export_trace, simulate_declared, Topology};
use distir::text::{parse_module_bytes, print_module, TextError};
use distir::transforms::{dtp_transform, DistConfig};

/// Distributed tensor programs: check, execute, simulate, transform and
/// search over parallelization strategies.
#[derive(Parser)]
#[command(name = "distir", version)]
struct Cli {
    /// Print progress and summaries to stderr.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a program; diagnostics go to stderr.
    Check { file: PathBuf },
    /// Rewrite a program in canonical form.
    Fmt {
        file: PathBuf,
        /// Exit with status 1 instead of rewriting when the file is not canonical.
        #[arg(long)]
        check: bool,
    },
    /// Print the program with every entry value typed.
    InferTypes {
        file: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Execute a program on concrete tensors.
    Run(RunArgs),
    /// Simulate a program's runtime and memory.
    Simulate(SimulateArgs),
    /// Apply data, tensor and pipeline parallelism to an MLP training step.
    Transform(TransformArgs),
    /// Project a program onto one or all devices.
    Lower(LowerArgs),
    /// Emit the sequential MLP training step.
    BuildMlp(BuildMlpArgs),
    /// Fit regression cost functions to benchmark measurements.
    Calibrate(CalibrateArgs),
    /// Grid search over (D, T, P, K) for an MLP.
    Search(SearchArgs),
}

#[derive(Args)]
struct RunArgs {
    file: PathBuf,
    /// Seed for generated inputs.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Read inputs from a binary tensor file instead of generating them.
    #[arg(long)]
    inputs: Option<PathBuf>,
    /// Print every output tensor.
    #[arg(long)]
    print_outputs: bool,
    /// Write outputs to a binary tensor file.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    file: PathBuf,
    #[arg(long)]
    topology: PathBuf,
    /// Cost model; analytic costs when omitted.
    #[arg(long)]
    costs: Option<PathBuf>,
    /// Write a Chrome trace.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Include per-device memory in the report.
    #[arg(long)]
    memory: bool,
}

#[derive(Args)]
struct TransformArgs {
    file: PathBuf,
    #[arg(long, default_value_t = 1)]
    dp: usize,
    #[arg(long, default_value_t = 1)]
    tp: usize,
    #[arg(long, default_value_t = 1)]
    pp: usize,
    #[arg(long, default_value_t = 1)]
    microbatches: usize,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct LowerArgs {
    file: PathBuf,
    #[arg(long, conflicts_with = "all_ranks", required_unless_present = "all_ranks")]
    rank: Option<u32>,
    /// Write one `rank_<r>.dir` per used device into the output directory.
    #[arg(long, requires = "output")]
    all_ranks: bool,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct BuildMlpArgs {
    #[arg(long)]
    layers: usize,
    #[arg(long)]
    dim: usize,
    #[arg(long)]
    batch: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value = "F32", value_parser = parse_dtype)]
    dtype: DType,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct CalibrateArgs {
    /// CSV with columns op,shapes,seconds.
    #[arg(long)]
    bench: PathBuf,
    /// Feature override, e.g. `MatMul=m*k*n,m*n`; repeatable.
    #[arg(long, value_parser = parse_features)]
    features: Vec<(String, Vec<String>)>,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct SearchArgs {
    #[arg(long)]
    layers: usize,
    #[arg(long)]
    dim: usize,
    #[arg(long)]
    world: usize,
    #[arg(long, required_unless_present = "batch_sweep")]
    batch: Option<usize>,
    /// Sweep powers of two in `lo:hi` instead of a fixed batch.
    #[arg(long, conflicts_with = "batch", value_parser = parse_range)]
    batch_sweep: Option<(usize, usize)>,
    #[arg(long)]
    topology: PathBuf,
    #[arg(long)]
    costs: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    top_k: usize,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Report zero simulation wall time for byte-reproducible output.
    #[arg(long)]
    deterministic: bool,
    /// Write memory-versus-throughput scatter data.
    #[arg(long)]
    scatter: Option<PathBuf>,
    /// Full ranked grid; the top-k section goes to stdout.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

fn parse_dtype(s: &str) -> Result<DType, String> {
    DType::from_name(s).ok_or_else(|| format!("unknown dtype `{s}`"))
}

fn parse_features(s: &str) -> Result<(String, Vec<String>), String> {
    let (op, list) = s.split_once('=').ok_or("expected OP=feature,feature")?;
    Ok((op.to_string(), list.split(',').map(str::to_string).collect()))
}

fn parse_range(s: &str) -> Result<(usize, usize), String> {
    let (lo, hi) = s.split_once(':').ok_or("expected lo:hi")?;
    let n = |x: &str| x.parse::<usize>().map_err(|_| format!("bad bound `{x}`"));
    Ok((n(lo)?, n(hi)?))
}

/// Domain failure whose diagnostics were already printed.
#[derive(Debug)]
struct Reported;

impl std::fmt::Display for Reported {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("diagnostics reported")
    }
}

impl std::error::Error for Reported {}

fn load(path: &Path) -> Result<IrModule> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    match parse_module_bytes(&bytes) {
        Ok(m) => Ok(m),
        Err(e) => {
            report(path, &e);
            Err(Reported.into())
        }
    }
}

fn report(path: &Path, e: &TextError) {
    for d in e.diagnostics() {
        eprintln!("{}:{d}", path.display());
    }
}

fn emit(output: Option<&Path>, data: &[u8]) -> Result<()> {
    match output {
        Some(p) => fs::write(p, data).with_context(|| format!("writing {}", p.display())),
        None => {
            let mut out = io::stdout().lock();
            out.write_all(data)?;
            out.flush()?;
            Ok(())
        }
    }
}

fn load_topology(path: &Path) -> Result<Topology> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Topology::from_json(&text).with_context(|| format!("topology {}", path.display()))
}

fn load_costs(path: Option<&Path>) -> Result<CostModel> {
    match path {
        None => Ok(CostModel::analytic()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            CostModel::from_json(&text).with_context(|| format!("cost model {}", p.display()))
        }
    }
}

fn format_tensor(name: &str, t: &Tensor) -> String {
    let data: Vec<String> = t.data.iter().map(|x| format!("{x}")).collect();
    format!("%{name}: {} = [{}]\n", t.ty(), data.join(", "))
}

fn run(args: RunArgs) -> Result<()> {
    let m = load(&args.file)?;
    let f = m.entry_function().context("no entry function")?;
    let inputs = match &args.inputs {
        Some(p) => {
            let raw = read_tensors(fs::File::open(p).with_context(|| format!("opening {}", p.display()))?)
                .with_context(|| format!("reading {}", p.display()))?;
            bind_args(f, raw)?
        }
        None => random_tensors(f, args.seed)?,
    };
    let outs = execute(&m, &inputs)?;
    if let Some(p) = &args.output {
        let file = fs::File::create(p).with_context(|| format!("creating {}", p.display()))?;
        write_tensors(io::BufWriter::new(file), &outs)?;
    }
    let mut text = String::new();
    for (&v, t) in f.returns().iter().zip(&outs) {
        if args.print_outputs {
            text.push_str(&format_tensor(f.value_name(v), t));
        } else if args.output.is_none() {
            text.push_str(&format!("%{}: {}\n", f.value_name(v), t.ty()));
        }
    }
    emit(None, text.as_bytes())
}

fn simulate(args: SimulateArgs) -> Result<()> {
    let m = load(&args.file)?;
    let topo = load_topology(&args.topology)?;
    let costs = load_costs(args.costs.as_deref())?;
    let r = simulate_declared(&m, &topo, &costs)?;
    if let Some(p) = &args.trace {
        export_trace(&r, p).with_context(|| format!("writing {}", p.display()))?;
    }
    let mut report = serde_json::json!({
        "total_time": r.total_time,
        "throughput": r.throughput,
        "devices": r.devices().iter().map(|d| d.0).collect::<Vec<_>>(),
        "ops": r.trace.len(),
    });
    if args.memory {
        let mem: BTreeMap<String, serde_json::Value> = r
            .memory
            .devices
            .iter()
            .map(|(d, m)| {
                (
                    d.0.to_string(),
                    serde_json::json!({"peak": m.peak, "peak_activation": m.peak_activation}),
                )
            })
            .collect();
        report["memory"] = serde_json::json!(mem);
    }
    emit(None, format!("{}\n", serde_json::to_string_pretty(&report)?).as_bytes())
}

fn lower(args: LowerArgs) -> Result<()> {
    let m = load(&args.file)?;
    let diags = placement_check(&m, default_registry());
    if !diags.is_empty() {
        for d in &diags {
            eprintln!("{}:{d}", args.file.display());
        }
        return Err(Reported.into());
    }
    if args.all_ranks {
        let dir = args.output.as_deref().expect("clap requires --output");
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        for p in project_all(&m, default_registry())? {
            let path = dir.join(format!("rank_{}.dir", p.rank.0));
            fs::write(&path, print_module(&p.module)).with_context(|| format!("writing {}", path.display()))?;
        }
        Ok(())
    } else {
        let rank = DeviceId(args.rank.expect("clap requires --rank"));
        let p = project(&m, rank, default_registry())?;
        emit(args.output.as_deref(), print_module(&p.module).as_bytes())
    }
}

fn search(args: SearchArgs, verbose: bool) -> Result<()> {
    let topo = load_topology(&args.topology)?;
    let costs = load_costs(args.costs.as_deref())?;
    let space = match (args.batch, args.batch_sweep) {
        (_, Some((lo, hi))) => SearchSpace::batch_sweep(args.world, lo, hi)?,
        (Some(b), None) => SearchSpace::training(args.world, b),
        (None, None) => unreachable!("clap requires --batch or --batch-sweep"),
    };
    let spec = MlpSpec::new(args.layers, args.dim, space.batch_sizes[0]);
    let bad = spec.violations();
    if !bad.is_empty() {
        bail!("invalid MLP: {}", bad.join("; "));
    }
    let options = SearchOptions {
        top_k: args.top_k,
        jobs: args.jobs.max(1),
        deterministic: args.deterministic,
    };
    let report = grid_search(&spec, &space, &topo, &costs, &options)?;
    if verbose {
        let feasible = report.ranking.len();
        eprintln!("{} points, {feasible} feasible", report.results.len());
    }
    if let Some(p) = &args.output {
        let file = fs::File::create(p).with_context(|| format!("creating {}", p.display()))?;
        write_report(file, report.ordered())?;
    }
    if let Some(p) = &args.scatter {
        let file = fs::File::create(p).with_context(|| format!("creating {}", p.display()))?;
        write_scatter(file, &report)?;
    }
    let mut top = Vec::new();
    write_report(&mut top, report.top())?;
    emit(None, &top)
}

fn dispatch(cli: Cli) -> Result<()> {
    let verbose = cli.verbose > 0;
    match cli.command {
        Command::Check { file } => {
            let m = load(&file)?;
            let diags = placement_check(&m, default_registry());
            if diags.is_empty() {
                Ok(())
            } else {
                for d in &diags {
                    eprintln!("{}:{d}", file.display());
                }
                Err(Reported.into())
            }
        }
        Command::Fmt { file, check } => {
            let text = fs::read_to_string(&file).with_context(|| format!("reading {}", file.display()))?;
            let m = load(&file)?;
            let canonical = print_module(&m);
            if canonical == text {
                return Ok(());
            }
            if check {
                eprintln!("{}: not canonically formatted", file.display());
                return Err(Reported.into());
            }
            fs::write(&file, canonical).with_context(|| format!("writing {}", file.display()))
        }
        Command::InferTypes { file, output } => {
            let m = load(&file)?;
            let typed = infer_types(&m, default_registry())?;
            emit(output.as_deref(), print_module(&typed).as_bytes())
        }
        Command::Run(args) => run(args),
        Command::Simulate(args) => simulate(args),
        Command::Transform(args) => {
            let m = load(&args.file)?;
            let cfg = DistConfig::new(args.dp, args.tp, args.pp, args.microbatches);
            let out = dtp_transform(&m, &cfg)?;
            emit(args.output.as_deref(), print_module(&out).as_bytes())
        }
        Command::Lower(args) => lower(args),
        Command::BuildMlp(args) => {
            let spec = MlpSpec::new(args.layers, args.dim, args.batch).with_lr(args.lr).with_dtype(args.dtype);
            let bad = spec.violations();
            if !bad.is_empty() {
                bail!("invalid MLP: {}", bad.join("; "));
            }
            emit(args.output.as_deref(), print_module(&build_mlp(&spec)).as_bytes())
        }
        Command::Calibrate(args) => {
            let file = fs::File::open(&args.bench).with_context(|| format!("opening {}", args.bench.display()))?;
            let samples = parse_bench_csv(file)?;
            let features: BTreeMap<String, Vec<String>> = args.features.into_iter().collect();
            let (model, fits) = calibrate(&samples, &features, default_registry())?;
            if verbose {
                for f in &fits {
                    eprintln!("{}: {} samples, R^2 = {:.6}", f.op_type, f.samples, f.r2);
                }
            }
            emit(args.output.as_deref(), format!("{}\n", model.to_json()).as_bytes())
        }
        Command::Search(args) => search(args, verbose),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if e.downcast_ref::<Reported>().is_none() {
                eprintln!("error: {e:#}");
            }
            ExitCode::from(1)
        }
    }
}

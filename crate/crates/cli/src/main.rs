//! `perfagent` command line: benchmark management, experiment runs, the
//! optimization agent and report generation.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use perfagent_core::agent::{
    run_agent, AgentConfig, AgentContext, CommandProfiler, MetricCatalog, ProfileSource, TimingOnlyProfile,
};
use perfagent_core::eval::Original;
use perfagent_core::experiments::{aggregate, emit_report, GroupBy, Harness, HarnessOptions, MeanKind, ReportFormat, ResultsTable};
use perfagent_core::llm::{Experiment, PromptEnv, Provider, ProviderConfig};
use perfagent_core::manifest::{load_manifest, select, BenchmarkSpec, SelectFilter};
use perfagent_core::toolchain::ToolchainConfig;

#[derive(Parser)]
#[command(name = "perfagent", version, about = "Evaluate LLM code optimizers on HPC kernels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Inspect or prepare the benchmark suite.
    #[command(subcommand)]
    Bench(BenchCommand),
    /// Serial single-shot optimization.
    Ex1(ExperimentArgs),
    /// Five-turn incremental optimization.
    Ex2(ExperimentArgs),
    /// Parallel optimization with a thread sweep.
    Ex3(ExperimentArgs),
    /// Validate and time code produced by an external tool.
    ImportTool(ImportArgs),
    /// Profile-guided iterative optimization of one benchmark.
    Agent(AgentArgs),
    /// Aggregate result tables into a report.
    Report(ReportArgs),
}

#[derive(Args)]
struct SuiteArgs {
    /// Directory searched for benchmark.toml files.
    #[arg(long, default_value = "benchmarks")]
    root: PathBuf,
    /// Selection clause such as `level=1,2`, `motif=SparseLinearAlgebra` or
    /// `id=matmul`; repeatable, all clauses must hold.
    #[arg(long = "select")]
    select: Vec<String>,
}

impl SuiteArgs {
    fn load(&self) -> Result<Vec<BenchmarkSpec>> {
        let specs = load_manifest(&self.root).with_context(|| format!("loading {}", self.root.display()))?;
        let mut filter = SelectFilter::default();
        for clause in &self.select {
            filter.add_clause(clause).map_err(anyhow::Error::msg)?;
        }
        Ok(select(&specs, &filter))
    }
}

#[derive(Args)]
struct EnvArgs {
    /// Toolchain TOML; compilers on PATH are used when omitted.
    #[arg(long)]
    toolchain: Option<PathBuf>,
    #[arg(long, default_value = "work")]
    work: PathBuf,
}

impl EnvArgs {
    fn toolchain(&self) -> Result<ToolchainConfig> {
        match &self.toolchain {
            Some(p) => ToolchainConfig::load(p).with_context(|| format!("loading {}", p.display())),
            None => {
                let tc = ToolchainConfig::detect();
                if tc.compilers.is_empty() {
                    bail!("no compiler found on PATH; pass --toolchain");
                }
                Ok(tc)
            }
        }
    }
}

#[derive(Subcommand)]
enum BenchCommand {
    /// Print the selected benchmarks.
    List(SuiteArgs),
    /// Copy and preprocess sources, then build and time the originals.
    Prepare {
        #[command(flatten)]
        suite: SuiteArgs,
        #[command(flatten)]
        env: EnvArgs,
    },
}

#[derive(Args)]
struct ExperimentArgs {
    #[command(flatten)]
    suite: SuiteArgs,
    #[command(flatten)]
    env: EnvArgs,
    /// Provider TOML.
    #[arg(long)]
    provider: PathBuf,
    /// Results JSON to write.
    #[arg(long, default_value = "results.json")]
    out: PathBuf,
    /// Thread counts for EX3.
    #[arg(long, value_delimiter = ',', default_values_t = [4u32, 8, 16, 32])]
    threads: Vec<u32>,
    /// Do not ask for explanations missing from replies.
    #[arg(long)]
    no_explanations: bool,
}

#[derive(Args)]
struct ImportArgs {
    #[command(flatten)]
    suite: SuiteArgs,
    #[command(flatten)]
    env: EnvArgs,
    /// Directory with one subdirectory of sources per benchmark id.
    #[arg(long)]
    dir: PathBuf,
    #[arg(long)]
    tool_id: String,
    #[arg(long, default_value = "EX1")]
    experiment: String,
    #[arg(long, default_value = "results.json")]
    out: PathBuf,
}

#[derive(Args)]
struct AgentArgs {
    #[command(flatten)]
    suite: SuiteArgs,
    #[command(flatten)]
    env: EnvArgs,
    /// Benchmark id.
    #[arg(long)]
    bench: String,
    #[arg(long)]
    provider: PathBuf,
    #[arg(long, default_value_t = 3)]
    max_iters: u32,
    /// Profiler command writing a cct-v1 document; `{binary}`, `{output}`,
    /// `{metrics}` and `{args}` are substituted. Wall time only if omitted.
    #[arg(long, num_args = 1.., allow_hyphen_values = true)]
    profiler: Vec<String>,
    #[arg(long)]
    threads: Option<u32>,
    #[arg(long)]
    openmp: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Markdown,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mean {
    Arithmetic,
    Geometric,
}

#[derive(Args)]
struct ReportArgs {
    /// Results JSON files; rows are merged.
    #[arg(long = "in", required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Markdown)]
    format: Format,
    #[arg(long, default_value = "report")]
    out_dir: PathBuf,
    #[arg(long, value_enum, default_value_t = Mean::Arithmetic)]
    mean: Mean,
    /// Grouping keys among tool, motif, experiment.
    #[arg(long, value_delimiter = ',', default_value = "tool,motif,experiment")]
    group_by: Vec<String>,
}

fn load_provider(path: &Path) -> Result<Box<dyn Provider>> {
    let cfg = ProviderConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(cfg.build()?)
}

fn bench(cmd: BenchCommand) -> Result<()> {
    match cmd {
        BenchCommand::List(suite) => {
            for s in suite.load()? {
                let hotspot = s.entry_hotspot.as_deref().unwrap_or("-");
                println!("{}\t{}\tlevel {}\t{}", s.id, s.motif, s.level, hotspot);
            }
        }
        BenchCommand::Prepare { suite, env } => {
            let tc = env.toolchain()?;
            let work = env.work.join("prepared");
            for s in suite.load()? {
                let original = Original::prepare(&s, &work, &tc.preprocessor)?;
                let variant = perfagent_core::toolchain::VariantDir::new(&work, &s.id, "baseline");
                let opts = Default::default();
                match perfagent_core::eval::run_baseline(&original, &tc, &variant, &opts, None) {
                    Ok(b) => println!("{}\tok\t{:.4} s", s.id, b.sample.mean().unwrap_or(f64::NAN)),
                    Err(e) => println!("{}\tfailed\t{e}", s.id),
                }
            }
        }
    }
    Ok(())
}

fn experiment(which: Experiment, args: ExperimentArgs) -> Result<()> {
    let tc = args.env.toolchain()?;
    let specs = args.suite.load()?;
    let provider = load_provider(&args.provider)?;
    let options = HarnessOptions {
        preprocessor: tc.preprocessor.clone(),
        thread_counts: args.threads.clone(),
        ask_explanations: !args.no_explanations,
        ..Default::default()
    };
    let harness = Harness::new(&tc, &args.env.work, PromptEnv::detect(&tc), options);
    let table = match which {
        Experiment::Ex1 => harness.run_ex1(&specs, provider.as_ref())?,
        Experiment::Ex2 => harness.run_ex2(&specs, provider.as_ref())?,
        _ => harness.run_ex3(&specs, provider.as_ref())?,
    };
    table.save(&args.out)?;
    eprintln!("{} rows, {} not attempted, written to {}", table.rows.len(), table.failures.len(), args.out.display());
    Ok(())
}

fn import_tool(args: ImportArgs) -> Result<()> {
    let tc = args.env.toolchain()?;
    let specs = args.suite.load()?;
    let experiment: Experiment = args.experiment.parse()?;
    let options = HarnessOptions { preprocessor: tc.preprocessor.clone(), ..Default::default() };
    let harness = Harness::new(&tc, &args.env.work, PromptEnv::detect(&tc), options);
    let table = harness.import_external_tool_results(&specs, &args.dir, &args.tool_id, experiment)?;
    table.save(&args.out)?;
    eprintln!("{} rows written to {}", table.rows.len(), args.out.display());
    Ok(())
}

fn agent(args: AgentArgs) -> Result<()> {
    let tc = args.env.toolchain()?;
    let specs = args.suite.load()?;
    let Some(spec) = specs.iter().find(|s| s.id == args.bench) else {
        bail!("no benchmark `{}` under {}", args.bench, args.suite.root.display());
    };
    let provider = load_provider(&args.provider)?;
    let profiles: Box<dyn ProfileSource> = match args.profiler.split_first() {
        Some((program, rest)) => Box::new(CommandProfiler {
            program: program.clone(),
            args: rest.to_vec(),
            output_dir: args.env.work.join("profiles"),
        }),
        None => Box::new(TimingOnlyProfile),
    };
    let cfg = AgentConfig {
        max_iterations: args.max_iters,
        provider_id: provider.id(),
        thread_count: args.threads,
        openmp: args.openmp,
        ..Default::default()
    };
    let ctx = AgentContext {
        toolchain: &tc,
        work_dir: &args.env.work,
        preprocessor: &tc.preprocessor,
        prompt_env: &PromptEnv::detect(&tc),
        catalog: &MetricCatalog::default(),
    };
    let trace = run_agent(spec, profiles.as_ref(), provider.as_ref(), &cfg, &ctx)?;
    println!("stop: {:?}", trace.stop_reason);
    for it in &trace.iterations {
        let s = it.speedup_vs_original.map(|s| format!("{:.2}x", s.speedup)).unwrap_or_else(|| "NA".into());
        println!("iteration {}: {} {s}", it.index, it.category);
    }
    if let Some(best) = trace.best_speedup() {
        println!("best speedup {best:.2}x");
    }
    Ok(())
}

fn report(args: ReportArgs) -> Result<()> {
    let mut table = ResultsTable::default();
    for path in &args.inputs {
        table.merge(ResultsTable::load(path)?)?;
    }
    let mut group_by = GroupBy::default();
    for key in &args.group_by {
        match key.trim() {
            "tool" => group_by.tool = true,
            "motif" => group_by.motif = true,
            "experiment" => group_by.experiment = true,
            other => bail!("unknown grouping key `{other}`"),
        }
    }
    let mean = match args.mean {
        Mean::Arithmetic => MeanKind::Arithmetic,
        Mean::Geometric => MeanKind::Geometric,
    };
    let summaries = aggregate(&table, group_by, mean)?;
    let format = match args.format {
        Format::Csv => ReportFormat::Csv,
        Format::Markdown => ReportFormat::Markdown,
        Format::Json => ReportFormat::Json,
    };
    for path in emit_report(&table, &summaries, format, &args.out_dir)? {
        println!("{}", path.display());
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Bench(cmd) => bench(cmd),
        Command::Ex1(a) => experiment(Experiment::Ex1, a),
        Command::Ex2(a) => experiment(Experiment::Ex2, a),
        Command::Ex3(a) => experiment(Experiment::Ex3, a),
        Command::ImportTool(a) => import_tool(a),
        Command::Agent(a) => agent(a),
        Command::Report(a) => report(a),
    }
}

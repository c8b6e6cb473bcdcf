//! Command-line front end.
//!
//! Every command writes its artifacts into `--out-dir` together with a
//! `<command>.meta.json` record of the seed, version and parameters.
//!
//! Exit codes: 0 success, 2 usage, 3 I/O, 4 malformed input, 5 bad
//! configuration, 6 zero support, 7 schedule violation, 8 problem too large,
//! 9 selftest failure, 10 value out of domain.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use crate::compiler::{compile, parse_evidence, query, write_marginals_csv, CompileOptions};
use crate::dpmm::{
    ambiguous_fixture, read_data_file, run_dpmm, separated_fixture, summary_image, DpmmParams, DpmmRunConfig,
};
use crate::entropy::{EntropyStream, DEFAULT_SEED};
use crate::error::{Error, Result};
use crate::factorgraph::FactorGraph;
use crate::fixtures;
use crate::gates::{estimate_cpt, StochasticGate};
use crate::lowprec::{precision_sweep, write_sweep_csv, EnergyFormat, Precision, SweepConfig};
use crate::mrf::{
    evidence_from_images, label_image, motion_offsets, random_dot_stereogram, random_motion_pair, solve, square_disparity,
    write_energy_csv, Anneal, LatticeMrf, MatchMode, SolveConfig,
};
use crate::pgm::GrayImage;
use crate::spiking::{simulate_spiking_assembly, SpikeConfig};
use crate::transition::{
    fault_kl_curve, run, write_fault_csv, FaultModel, KernelChoice, RunConfig, RunMetadata, ScheduleKind,
    TransitionAssembly,
};

pub const SELFTEST_FAILED: i32 = 9;

/// Fault rates of the KL-versus-fault report.
pub const FAULT_CURVE_RATES: [f64; 4] = [0.0, 1e-4, 1e-3, 1e-2];

#[derive(Parser, Debug)]
#[command(name = "stochcirc", version, about = "Stochastic digital circuits for Bayesian inference")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// Master seed (decimal or 0x-prefixed hex)
    #[arg(long, global = true, value_parser = parse_seed, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    /// Directory for artifacts
    #[arg(long, global = true, default_value = "out")]
    pub out_dir: PathBuf,
    /// Energy format `b,f`, a total width `b` (f = b/2), or `exact`
    #[arg(long, global = true, default_value = "8,4")]
    pub format: Precision,
    /// Update schedule
    #[arg(long, global = true, value_enum, default_value_t = ScheduleArg::Parallel)]
    pub schedule: ScheduleArg,
    /// Per-bit register flip probability after each transition
    #[arg(long, global = true, default_value_t = 0.0)]
    pub fault_rate: f64,
    /// Worker threads (results do not depend on this)
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum ScheduleArg {
    Serial,
    Parallel,
    RandomScan,
}

impl From<ScheduleArg> for ScheduleKind {
    fn from(s: ScheduleArg) -> Self {
        match s {
            ScheduleArg::Serial => ScheduleKind::Serial,
            ScheduleArg::Parallel => ScheduleKind::Parallel,
            ScheduleArg::RandomScan => ScheduleKind::RandomScan,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum KernelArg {
    Gibbs,
    Metropolis,
}

impl From<KernelArg> for KernelChoice {
    fn from(k: KernelArg) -> Self {
        match k {
            KernelArg::Gibbs => KernelChoice::Gibbs,
            KernelArg::Metropolis => KernelChoice::Metropolis,
        }
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Combinational stochastic gates
    #[command(subcommand)]
    Gate(GateCommand),
    /// KL of low-precision sampling against exact sampling, by entropy bin
    PrecisionSweep(SweepArgs),
    /// Factor graph utilities
    #[command(subcommand)]
    Fg(FgCommand),
    /// Compile a factor graph and write its schedule
    Compile(ModelArgs),
    /// Estimate marginals by running the compiled chain
    Query(QueryArgs),
    /// Run the compiled chain and write the state trace
    Run(RunArgs),
    /// Stereo depth from an image pair (or a synthetic random-dot pair)
    Stereo(MatchArgs),
    /// Motion flow from two frames (or a synthetic pair)
    Motion(MatchArgs),
    /// Dirichlet process mixture clustering
    #[command(subcommand)]
    Dpmm(DpmmCommand),
    /// Spiking-race implementation of the compiled chain
    #[command(subcommand)]
    Spike(SpikeCommand),
    /// Run the small oracle suite
    Selftest,
}

#[derive(Subcommand, Debug)]
pub enum GateCommand {
    /// Estimate a gate's table by sampling every input
    Sample(GateArgs),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum GateKind {
    And,
    Or,
    Xor,
    Not,
    Theta,
    Binomial,
}

#[derive(Args, Debug)]
pub struct GateArgs {
    #[arg(long, value_enum)]
    pub gate: GateKind,
    /// Weight register width for theta and binomial gates
    #[arg(long, default_value_t = 4)]
    pub weight_bits: u32,
    /// Coins of the binomial gate
    #[arg(long, default_value_t = 3)]
    pub coins: u32,
    /// Samples per input word
    #[arg(long, default_value_t = 100_000)]
    pub samples: u64,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    /// Total bit widths to test (f = b/2)
    #[arg(long, value_delimiter = ',', default_value = "4,6,8,10")]
    pub bits: Vec<u32>,
    #[arg(long, default_value_t = 1000)]
    pub outcomes: usize,
    #[arg(long, default_value_t = 10_000)]
    pub per_bin: usize,
}

#[derive(Subcommand, Debug)]
pub enum FgCommand {
    /// Parse and check a factor graph
    Validate(ModelArgs),
}

#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    /// Factor graph JSON path, or `builtin:NAME` (three_var, chain3, icu8)
    pub model: String,
    /// Evidence as NAME=VALUE (repeatable)
    #[arg(long = "evidence", short = 'e')]
    pub evidence: Vec<String>,
    #[arg(long, value_enum, default_value_t = KernelArg::Gibbs)]
    pub kernel: KernelArg,
}

#[derive(Args, Debug, Clone)]
pub struct ChainArgs {
    /// Retained sweeps (before thinning)
    #[arg(long, default_value_t = 100_000)]
    pub sweeps: usize,
    /// Burn-in sweeps (default: ten per variable)
    #[arg(long)]
    pub burn_in: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub thin: usize,
}

#[derive(Args, Debug)]
pub struct QueryArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub chain: ChainArgs,
    /// Variables to report (default: all)
    #[arg(long, value_delimiter = ',')]
    pub vars: Vec<String>,
}

#[derive(Args, Debug)]
pub struct RunArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub chain: ChainArgs,
    /// Also write the marginal KL for fault rates 0, 1e-4, 1e-3 and 1e-2
    #[arg(long)]
    pub fault_curve: bool,
}

#[derive(Args, Debug)]
pub struct MatchArgs {
    /// First (left) image, binary PGM
    #[arg(long, requires = "second")]
    pub first: Option<PathBuf>,
    /// Second (right) image, binary PGM
    #[arg(long)]
    pub second: Option<PathBuf>,
    /// Label count (default 5 for stereo, 9 for motion)
    #[arg(long)]
    pub labels: Option<usize>,
    /// Synthetic image size as HEIGHTxWIDTH
    #[arg(long, default_value = "32x32", value_parser = parse_size)]
    pub size: (usize, usize),
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,
    #[arg(long, default_value_t = 2.0)]
    pub tau: f64,
    #[arg(long, default_value_t = 200)]
    pub sweeps: usize,
    /// Sample the posterior at unit temperature instead of annealing
    #[arg(long)]
    pub posterior: bool,
    #[arg(long, default_value_t = 2.0)]
    pub t_start: f64,
    #[arg(long, default_value_t = 0.1)]
    pub t_end: f64,
}

#[derive(Subcommand, Debug)]
pub enum DpmmCommand {
    /// Cluster binary images
    Run(DpmmArgs),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum DpmmFixture {
    Separated,
    Ambiguous,
}

#[derive(Args, Debug)]
pub struct DpmmArgs {
    /// Binary-matrix text or IDX image file
    #[arg(long, conflicts_with = "fixture")]
    pub data: Option<PathBuf>,
    /// Built-in synthetic data set
    #[arg(long, value_enum)]
    pub fixture: Option<DpmmFixture>,
    /// Gray level at or above which an IDX pixel is on
    #[arg(long, default_value_t = 128)]
    pub threshold: u8,
    /// Use only the first N data
    #[arg(long)]
    pub limit: Option<usize>,
    /// Summary image shape as ROWSxCOLS (IDX files carry their own)
    #[arg(long, value_parser = parse_size)]
    pub image_shape: Option<(usize, usize)>,
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0.5)]
    pub beta_on: f64,
    #[arg(long, default_value_t = 0.5)]
    pub beta_off: f64,
    #[arg(long, default_value_t = 1000)]
    pub sweeps: usize,
    #[arg(long, default_value_t = 100)]
    pub burn_in: usize,
    #[arg(long, default_value_t = 1)]
    pub thin: usize,
    /// Sweeps after each streamed datum
    #[arg(long, default_value_t = 0)]
    pub inner_sweeps: usize,
}

#[derive(Subcommand, Debug)]
pub enum SpikeCommand {
    /// Simulate the race network of a compiled model
    Run(SpikeArgs),
}

#[derive(Args, Debug)]
pub struct SpikeArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 100_000)]
    pub sweeps: usize,
    #[arg(long, default_value_t = 100)]
    pub burn_in: usize,
    /// Winner spikes written to the raster
    #[arg(long, default_value_t = 10_000)]
    pub raster_limit: usize,
}

fn parse_seed(s: &str) -> std::result::Result<u64, String> {
    let s = s.trim().replace('_', "");
    match s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        Some(hex) => u64::from_str_radix(hex, 16),
        None => s.parse(),
    }
    .map_err(|e| format!("invalid seed: {e}"))
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected ROWSxCOLS, got `{s}`"))?;
    let h = h.trim().parse().map_err(|_| format!("bad row count in `{s}`"))?;
    let w = w.trim().parse().map_err(|_| format!("bad column count in `{s}`"))?;
    if h == 0 || w == 0 {
        return Err("dimensions must be positive".into());
    }
    Ok((h, w))
}

/// Parses `argv` and runs the command; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new()
        .num_threads(cli.global.threads.unwrap_or(0))
        .build()
    {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker pool: {e}");
            return 5;
        }
    };
    match pool.install(|| dispatch(&cli)) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

struct Ctx<'a> {
    global: &'a GlobalArgs,
    command: &'static str,
}

impl Ctx<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.global.out_dir.join(name)
    }

    fn create(&self, name: &str) -> Result<BufWriter<File>> {
        Ok(BufWriter::new(File::create(self.path(name))?))
    }

    fn stream(&self) -> EntropyStream {
        EntropyStream::new(self.global.seed)
    }

    fn fault(&self) -> Result<Option<FaultModel>> {
        Ok(Some(FaultModel::new(self.global.fault_rate)?).filter(|f| f.bit_flip_rate > 0.0))
    }

    fn metadata(&self, parameters: Value, outputs: &[String]) -> Result<()> {
        let meta = json!({
            "command": self.command,
            "seed": self.global.seed,
            "version": env!("CARGO_PKG_VERSION"),
            "format": self.global.format.to_string(),
            "schedule": ScheduleKind::from(self.global.schedule).to_string(),
            "fault_rate": self.global.fault_rate,
            "threads": self.global.threads,
            "parameters": parameters,
            "outputs": outputs,
        });
        let name = format!("{}.meta.json", self.command.replace(' ', "_"));
        let mut f = self.create(&name)?;
        serde_json::to_writer_pretty(&mut f, &meta)?;
        writeln!(f)?;
        f.flush()?;
        Ok(())
    }
}

fn dispatch(cli: &Cli) -> Result<i32> {
    let command = match &cli.command {
        Command::Gate(_) => "gate sample",
        Command::PrecisionSweep(_) => "precision-sweep",
        Command::Fg(_) => "fg validate",
        Command::Compile(_) => "compile",
        Command::Query(_) => "query",
        Command::Run(_) => "run",
        Command::Stereo(_) => "stereo",
        Command::Motion(_) => "motion",
        Command::Dpmm(_) => "dpmm run",
        Command::Spike(_) => "spike run",
        Command::Selftest => "selftest",
    };
    std::fs::create_dir_all(&cli.global.out_dir)?;
    let ctx = Ctx {
        global: &cli.global,
        command,
    };
    match &cli.command {
        Command::Gate(GateCommand::Sample(a)) => gate_sample(&ctx, a),
        Command::PrecisionSweep(a) => sweep(&ctx, a),
        Command::Fg(FgCommand::Validate(a)) => fg_validate(&ctx, a),
        Command::Compile(a) => compile_cmd(&ctx, a),
        Command::Query(a) => query_cmd(&ctx, a),
        Command::Run(a) => run_cmd(&ctx, a),
        Command::Stereo(a) => match_cmd(&ctx, a, MatchMode::Stereo),
        Command::Motion(a) => match_cmd(&ctx, a, MatchMode::Motion),
        Command::Dpmm(DpmmCommand::Run(a)) => dpmm_cmd(&ctx, a),
        Command::Spike(SpikeCommand::Run(a)) => spike_cmd(&ctx, a),
        Command::Selftest => selftest_cmd(&ctx),
    }
}

fn gate_sample(ctx: &Ctx, a: &GateArgs) -> Result<i32> {
    let gate = match a.gate {
        GateKind::And => StochasticGate::and(),
        GateKind::Or => StochasticGate::or(),
        GateKind::Xor => StochasticGate::xor(),
        GateKind::Not => StochasticGate::not(),
        GateKind::Theta => StochasticGate::theta(a.weight_bits)?,
        GateKind::Binomial => StochasticGate::binomial(a.coins, a.weight_bits)?,
    };
    let declared = gate.declared_cpt()?;
    let empirical = estimate_cpt(&gate, a.samples, &mut ctx.stream())?;
    let mut out = ctx.create("gate_cpt.csv")?;
    writeln!(out, "input,output,empirical,declared")?;
    for (x, (e, d)) in empirical.rows().iter().zip(declared.rows()).enumerate() {
        for (y, (pe, pd)) in e.iter().zip(d).enumerate() {
            writeln!(out, "{x},{y},{pe:.6},{pd:.6}")?;
        }
    }
    out.flush()?;
    let tv = empirical.max_row_tv(&declared);
    println!("{:?}: {} inputs, max row TV {tv:.5}", a.gate, declared.rows().len());
    ctx.metadata(
        json!({"gate": format!("{:?}", a.gate).to_lowercase(), "weight_bits": a.weight_bits,
               "coins": a.coins, "samples": a.samples, "max_row_tv": tv}),
        &["gate_cpt.csv".into()],
    )?;
    Ok(0)
}

fn sweep(ctx: &Ctx, a: &SweepArgs) -> Result<i32> {
    let formats = a
        .bits
        .iter()
        .map(|&b| EnergyFormat::with_total_bits(b))
        .collect::<Result<Vec<_>>>()?;
    let cfg = SweepConfig::new(a.outcomes, a.per_bin, formats);
    let rows = precision_sweep(&cfg, &ctx.stream())?;
    let mut out = ctx.create("precision_sweep.csv")?;
    write_sweep_csv(&rows, &mut out)?;
    out.flush()?;
    println!("{} rows written", rows.len());
    ctx.metadata(
        json!({"bits": a.bits, "outcomes": a.outcomes, "per_bin": a.per_bin}),
        &["precision_sweep.csv".into()],
    )?;
    Ok(0)
}

fn load_model(a: &ModelArgs) -> Result<FactorGraph> {
    let text = match a.model.strip_prefix("builtin:") {
        Some(name) => fixtures::ALL
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, doc)| doc.to_string())
            .ok_or_else(|| Error::UnknownName(format!("builtin model `{name}`")))?,
        None => std::fs::read_to_string(&a.model)?,
    };
    let g = FactorGraph::parse(&text)?;
    if a.evidence.is_empty() {
        Ok(g)
    } else {
        let mut ev: Vec<(String, usize)> = g
            .evidence()
            .iter()
            .map(|(&v, &x)| (g.variables()[v].name.clone(), x))
            .collect();
        for (name, value) in parse_evidence(&a.evidence)? {
            ev.retain(|(n, _)| *n != name);
            ev.push((name, value));
        }
        g.with_evidence(&ev)
    }
}

fn compile_model(ctx: &Ctx, a: &ModelArgs) -> Result<(FactorGraph, TransitionAssembly)> {
    let g = load_model(a)?;
    let options = CompileOptions {
        kernel: a.kernel.into(),
        precision: ctx.global.format,
        schedule: ctx.global.schedule.into(),
    };
    let asm = compile(&g, &options)?;
    Ok((g, asm))
}

fn model_params(a: &ModelArgs) -> Value {
    json!({"model": a.model, "evidence": a.evidence, "kernel": format!("{:?}", a.kernel).to_lowercase()})
}

fn run_config(ctx: &Ctx, asm: &TransitionAssembly, c: &ChainArgs) -> Result<RunConfig> {
    let base = RunConfig::new(asm, c.sweeps);
    Ok(RunConfig {
        burn_in: c.burn_in.unwrap_or(base.burn_in),
        thin: c.thin,
        fault: ctx.fault()?,
        ..base
    })
}

fn fg_validate(ctx: &Ctx, a: &ModelArgs) -> Result<i32> {
    let g = load_model(a)?;
    let summary = json!({
        "variables": g.variables().len(),
        "factors": g.factors().len(),
        "states": g.state_count().to_string(),
        "evidence": g.evidence().iter().map(|(&v, &x)| (g.variables()[v].name.clone(), x))
            .collect::<std::collections::BTreeMap<_, _>>(),
    });
    println!("{}: {} variables, {} factors, {} joint states", a.model, g.variables().len(), g.factors().len(), g.state_count());
    let mut f = ctx.create("fg_summary.json")?;
    serde_json::to_writer_pretty(&mut f, &summary)?;
    writeln!(f)?;
    f.flush()?;
    ctx.metadata(model_params(a), &["fg_summary.json".into()])?;
    Ok(0)
}

fn compile_cmd(ctx: &Ctx, a: &ModelArgs) -> Result<i32> {
    let (_, asm) = compile_model(ctx, a)?;
    let groups: Vec<Vec<&str>> = asm
        .schedule()
        .groups()
        .iter()
        .map(|g| g.iter().map(|&v| asm.names()[v].as_str()).collect())
        .collect();
    let doc = json!({
        "schedule": asm.schedule().kind().to_string(),
        "groups": groups,
        "circuits": asm.circuits().len(),
        "clamped": asm.clamped().iter().map(|(&v, &x)| (asm.names()[v].clone(), x))
            .collect::<std::collections::BTreeMap<_, _>>(),
        "precision": asm.precision().to_string(),
    });
    let mut f = ctx.create("schedule.json")?;
    serde_json::to_writer_pretty(&mut f, &doc)?;
    writeln!(f)?;
    f.flush()?;
    for (i, g) in groups.iter().enumerate() {
        println!("group {i}: {}", g.join(" "));
    }
    ctx.metadata(model_params(a), &["schedule.json".into()])?;
    Ok(0)
}

fn query_cmd(ctx: &Ctx, a: &QueryArgs) -> Result<i32> {
    let (_, asm) = compile_model(ctx, &a.model)?;
    let cfg = run_config(ctx, &asm, &a.chain)?;
    let result = query(&asm, &a.vars, &cfg, &ctx.stream())?;
    let mut out = ctx.create("marginals.csv")?;
    write_marginals_csv(&result.marginals, &mut out)?;
    out.flush()?;
    for m in &result.marginals {
        let probs: Vec<String> = m.probabilities.iter().map(|p| format!("{p:.4}")).collect();
        println!("{}: {}", m.variable, probs.join(" "));
    }
    let mut params = model_params(&a.model);
    params["run"] = serde_json::to_value(RunMetadata::describe(&asm, &cfg, ctx.global.seed, result.trace.len()))?;
    ctx.metadata(params, &["marginals.csv".into()])?;
    Ok(0)
}

fn run_cmd(ctx: &Ctx, a: &RunArgs) -> Result<i32> {
    let (g, asm) = compile_model(ctx, &a.model)?;
    let cfg = run_config(ctx, &asm, &a.chain)?;
    let trace = run(&asm, &cfg, &ctx.stream())?;
    let mut out = ctx.create("trace.csv")?;
    trace.write_csv(&mut out)?;
    out.flush()?;
    let mut outputs = vec!["trace.csv".to_string()];
    if a.fault_curve {
        let exact = g.enumerate_joint()?;
        let marginals: Vec<Vec<f64>> = (0..g.variables().len()).map(|v| exact.marginal(v)).collect();
        let points = fault_kl_curve(&asm, &FAULT_CURVE_RATES, &cfg, &ctx.stream(), &marginals)?;
        let mut out = ctx.create("fault_kl.csv")?;
        write_fault_csv(&points, &mut out)?;
        out.flush()?;
        outputs.push("fault_kl.csv".into());
        for p in &points {
            println!("fault rate {:e}: KL {:.3e} bits", p.rate, p.kl);
        }
    }
    println!("{} states retained", trace.len());
    let mut params = model_params(&a.model);
    params["run"] = serde_json::to_value(RunMetadata::describe(&asm, &cfg, ctx.global.seed, trace.len()))?;
    ctx.metadata(params, &outputs)?;
    Ok(0)
}

fn match_cmd(ctx: &Ctx, a: &MatchArgs, mode: MatchMode) -> Result<i32> {
    let tag = match mode {
        MatchMode::Stereo => "stereo",
        MatchMode::Motion => "motion",
    };
    let labels = a.labels.unwrap_or(match mode {
        MatchMode::Stereo => 5,
        MatchMode::Motion => 9,
    });
    if labels < 2 {
        return Err(Error::Config("at least two labels are required".into()));
    }
    let mut outputs = Vec::new();
    let (first, second, truth) = match (&a.first, &a.second) {
        (Some(f), Some(s)) => (GrayImage::read(f)?, GrayImage::read(s)?, None),
        _ => {
            let (h, w) = a.size;
            let truth = match mode {
                MatchMode::Stereo => square_disparity(h, w, 1, (labels - 2).max(1)),
                MatchMode::Motion => square_disparity(h, w, 0, labels - 1),
            };
            let mut s = ctx.stream().fork(u64::MAX);
            let (f, g) = match mode {
                MatchMode::Stereo => random_dot_stereogram(&truth, h, w, &mut s)?,
                MatchMode::Motion => random_motion_pair(&truth, h, w, labels, &mut s)?,
            };
            for (img, name) in [(&f, "first"), (&g, "second")] {
                let file = format!("{tag}_{name}.pgm");
                img.write(&ctx.path(&file))?;
                outputs.push(file);
            }
            (f, g, Some(truth))
        }
    };
    let (h, w) = (first.height(), first.width());
    let evidence = evidence_from_images(&first, &second, labels, mode)?;
    let mrf = match mode {
        MatchMode::Stereo => LatticeMrf::new(h, w, labels, evidence, a.lambda, a.tau)?,
        MatchMode::Motion => LatticeMrf::motion(h, w, labels, evidence, a.lambda, a.tau)?,
    };
    let cfg = SolveConfig {
        sweeps: a.sweeps,
        anneal: (!a.posterior).then_some(Anneal {
            start: a.t_start,
            end: a.t_end,
        }),
        precision: ctx.global.format,
        schedule: ctx.global.schedule.into(),
    };
    let sol = solve(&mrf, &cfg, &ctx.stream())?;
    let labels_file = format!("{tag}_labels.pgm");
    label_image(&sol.labels, h, w, labels)?.write(&ctx.path(&labels_file))?;
    let energy_file = format!("{tag}_energy.csv");
    let mut out = ctx.create(&energy_file)?;
    write_energy_csv(&sol.energy_trace, &mut out)?;
    out.flush()?;
    outputs.push(labels_file);
    outputs.push(energy_file);
    let margin = match mode {
        MatchMode::Stereo => labels,
        MatchMode::Motion => motion_offsets(labels).last().map_or(0, |o| o.0.abs().max(o.1.abs()) as usize) + 1,
    };
    let accuracy = truth.map(|t| {
        let (mut ok, mut total) = (0usize, 0usize);
        for i in 1..h.saturating_sub(1) {
            for j in margin..w.saturating_sub(margin) {
                total += 1;
                ok += (sol.labels[i * w + j] == t[i * w + j]) as usize;
            }
        }
        ok as f64 / total.max(1) as f64
    });
    println!(
        "{tag}: {h}x{w}, {labels} labels, energy {:.2} -> {:.2}{}",
        sol.energy_trace[0],
        sol.energy_trace.last().copied().unwrap_or(f64::NAN),
        accuracy.map_or(String::new(), |a| format!(", interior accuracy {:.3}", a))
    );
    ctx.metadata(
        json!({"height": h, "width": w, "labels": labels, "lambda": a.lambda, "tau": a.tau,
               "sweeps": a.sweeps, "anneal": cfg.anneal, "synthetic": accuracy.is_some(),
               "interior_accuracy": accuracy,
               "first": a.first, "second": a.second}),
        &outputs,
    )?;
    Ok(0)
}

fn dpmm_cmd(ctx: &Ctx, a: &DpmmArgs) -> Result<i32> {
    let (data, shape) = match (&a.data, a.fixture) {
        (Some(path), _) => read_data_file(path, a.threshold, a.limit)?,
        (None, Some(DpmmFixture::Separated)) => (separated_fixture(10, 16), Some((4, 4))),
        (None, Some(DpmmFixture::Ambiguous)) => (ambiguous_fixture(), Some((3, 4))),
        (None, None) => return Err(Error::Config("pass --data FILE or --fixture NAME".into())),
    };
    if data.is_empty() {
        return Err(Error::Config("no data".into()));
    }
    let params = DpmmParams {
        alpha: a.alpha,
        beta_on: a.beta_on,
        beta_off: a.beta_off,
        precision: ctx.global.format,
    };
    let cfg = DpmmRunConfig {
        sweeps: a.sweeps,
        burn_in: a.burn_in,
        thin: a.thin,
        inner_sweeps: a.inner_sweeps,
    };
    let (state, trace) = run_dpmm(&data, params, &cfg, &ctx.stream())?;
    let mut outputs = vec!["dpmm_assignments.csv".to_string(), "dpmm_cluster_counts.csv".to_string()];
    let mut out = ctx.create(&outputs[0])?;
    trace.write_assignments_csv(&mut out)?;
    out.flush()?;
    let mut out = ctx.create(&outputs[1])?;
    trace.write_count_histogram_csv(&mut out)?;
    out.flush()?;
    let dim = state.dim();
    let (rows, cols) = a.image_shape.or(shape).unwrap_or((1, dim));
    if rows * cols != dim {
        return Err(Error::Shape {
            expected: dim,
            actual: rows * cols,
        });
    }
    for (k, s) in state.cluster_summaries().iter().enumerate() {
        let name = format!("dpmm_cluster_{k:02}.pgm");
        summary_image(s, rows, cols)?.write(&ctx.path(&name))?;
        outputs.push(name);
    }
    println!("{} data, final clusters {}, count histogram {:?}", data.len(), state.cluster_count(), trace.count_histogram());
    ctx.metadata(
        json!({"data": a.data, "fixture": a.fixture.map(|f| format!("{f:?}").to_lowercase()),
               "threshold": a.threshold, "limit": a.limit, "alpha": a.alpha, "beta_on": a.beta_on,
               "beta_off": a.beta_off, "sweeps": a.sweeps, "burn_in": a.burn_in, "thin": a.thin,
               "inner_sweeps": a.inner_sweeps, "data_count": data.len(), "dim": dim}),
        &outputs,
    )?;
    Ok(0)
}

fn spike_cmd(ctx: &Ctx, a: &SpikeArgs) -> Result<i32> {
    let (_, asm) = compile_model(ctx, &a.model)?;
    let cfg = SpikeConfig {
        sweeps: a.sweeps,
        burn_in: a.burn_in,
        raster_limit: a.raster_limit,
    };
    let result = simulate_spiking_assembly(&asm, &cfg, &ctx.stream())?;
    let mut out = ctx.create("spike_raster.csv")?;
    result.write_raster_csv(asm.names(), &mut out)?;
    out.flush()?;
    let mut out = ctx.create("spike_trace.csv")?;
    result.trace.write_csv(&mut out)?;
    out.flush()?;
    println!("{} epochs, {} spikes recorded", result.epochs, result.raster.len());
    let mut params = model_params(&a.model);
    params["sweeps"] = json!(a.sweeps);
    params["burn_in"] = json!(a.burn_in);
    params["raster_limit"] = json!(a.raster_limit);
    ctx.metadata(params, &["spike_raster.csv".into(), "spike_trace.csv".into()])?;
    Ok(0)
}

fn selftest_cmd(ctx: &Ctx) -> Result<i32> {
    let results = crate::selftest::run_all(ctx.global.seed);
    let mut out = ctx.create("selftest.csv")?;
    writeln!(out, "check,status,detail")?;
    let mut failed = 0;
    for r in &results {
        let status = if r.passed { "pass" } else { "fail" };
        failed += (!r.passed) as usize;
        println!("{status:4}  {:<28} {}", r.name, r.detail);
        writeln!(out, "{},{},{}", r.name, status, r.detail.replace(',', ";"))?;
    }
    out.flush()?;
    ctx.metadata(json!({"checks": results.len(), "failed": failed}), &["selftest.csv".into()])?;
    Ok(if failed == 0 { 0 } else { SELFTEST_FAILED })
}

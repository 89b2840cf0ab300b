//! `s2alloc` command line: analyze, simulate, bench, selftest.

use std::io::Write;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use s2alloc_core::model::{self, ModelParams, Strategy};
use s2alloc_core::{AllocError, Allocator, AllocatorConfig, ConfigError, SizeClass};

use crate::bench::{run_bench, BenchConfig, DEFAULT_TOTAL_BYTES};
use crate::env::{config_from_env, os_entropy};
use crate::report;
use crate::selftest::{run_selftest, Faults};
use crate::simulator::{simulate_allocator_attack, simulate_strategy, HarnessParams, SimResult};

pub const EXIT_OK: u8 = 0;
pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_USAGE: u8 = 2;

pub const CSV_HEADER: &str = "round,p_e,p_attack,p_detect";

#[derive(Debug, Parser)]
#[command(name = "s2alloc", version, about = "Attack model, simulator and benchmark for the s2alloc allocator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Closed-form per-round rates as CSV.
    Analyze(AnalyzeArgs),
    /// Monte Carlo estimates, optionally against the closed form or the real allocator.
    Simulate(SimulateArgs),
    /// Time malloc and free separately.
    Bench(BenchArgs),
    /// Run the built-in checks.
    Selftest(SelftestArgs),
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    s.parse().map_err(|_| format!("unknown strategy {s:?} (expected s1, s2, s1-spray or s2-spray)"))
}

#[derive(Debug, Clone, Args)]
pub struct GameArgs {
    #[arg(long, value_parser = parse_strategy, default_value = "s1")]
    pub strategy: Strategy,
    /// Block size.
    #[arg(long, default_value_t = 32)]
    pub b: u64,
    /// Victim object size.
    #[arg(long, default_value_t = 16)]
    pub s: u64,
    /// Sensitive field offset inside the victim.
    #[arg(long, default_value_t = 0)]
    pub s1: u64,
    /// Attacker write length.
    #[arg(long, default_value_t = 4)]
    pub l: u64,
    /// Canary length.
    #[arg(long, default_value_t = 8)]
    pub c: u64,
    /// Neighbours checked on each side.
    #[arg(long, default_value_t = 2)]
    pub d: u64,
    #[arg(long, default_value_t = 8, value_parser = clap::value_parser!(u32).range(0..=16))]
    pub entropy_bits: u32,
    /// Live victims; defaults to 4 for spray strategies, 1 otherwise.
    #[arg(long)]
    pub spray_m: Option<u64>,
    #[arg(long, default_value_t = 500)]
    pub rounds: usize,
}

impl GameArgs {
    pub fn params(&self) -> ModelParams {
        ModelParams {
            r: 1 << self.entropy_bits,
            b: self.b,
            s: self.s,
            s1: self.s1,
            l: self.l,
            c: self.c,
            d: self.d,
            m: self.spray_m.unwrap_or(if self.strategy.is_spray() { 4 } else { 1 }),
            rounds: self.rounds,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Range {
    pub lo: u64,
    pub hi: u64,
    pub step: u64,
}

fn parse_range(s: &str) -> Result<Range, String> {
    let parts: Vec<&str> = s.split(':').collect();
    let [lo, hi, step] = parts.as_slice() else {
        return Err("expected lo:hi:step".into());
    };
    let num = |x: &str| x.trim().parse::<u64>().map_err(|e| format!("{x:?}: {e}"));
    let r = Range { lo: num(lo)?, hi: num(hi)?, step: num(step)? };
    if r.step == 0 || r.lo > r.hi {
        return Err("need lo <= hi and step >= 1".into());
    }
    Ok(r)
}

#[derive(Debug, Clone, Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub game: GameArgs,
    /// Sweep the block size; one CSV section per value.
    #[arg(long, value_parser = parse_range)]
    pub b_range: Option<Range>,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub game: GameArgs,
    #[arg(long, default_value_t = 100_000)]
    pub trials: u64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Play against the real allocator on a simulated backend.
    #[arg(long)]
    pub against_allocator: bool,
    /// Compare closed form and simulation over the standard 16-point grid.
    #[arg(long, conflicts_with = "against_allocator")]
    pub grid: bool,
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub size: usize,
    #[arg(long, default_value_t = DEFAULT_TOTAL_BYTES)]
    pub total_bytes: usize,
    #[arg(long, default_value_t = 1)]
    pub reps: usize,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Debug, Clone, Args)]
pub struct SelftestArgs {
    /// Negative control: corrupt a bitmap bit; the run must then fail.
    #[arg(long)]
    pub inject_bitmap_fault: bool,
}

/// Failure of a subcommand, mapped to an exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Failed(String),
}

impl From<model::ModelError> for CliError {
    fn from(e: model::ModelError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<AllocError> for CliError {
    fn from(e: AllocError) -> Self {
        CliError::Failed(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Failed(e.to_string())
    }
}

pub fn series_csv(series: &model::RateSeries) -> String {
    let mut out = String::with_capacity(40 * (series.rounds.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for (i, r) in series.rounds.iter().enumerate() {
        out += &format!("{},{:.9},{:.9},{:.9}\n", i + 1, r.p_e, r.p_attack, r.p_detect);
    }
    out
}

pub fn analyze(args: &AnalyzeArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let strategy = args.game.strategy;
    match args.b_range {
        None => {
            let series = model::rates(&args.game.params(), strategy)?;
            out.write_all(series_csv(&series).as_bytes())?;
        }
        Some(range) => {
            for b in (range.lo..=range.hi).step_by(range.step as usize) {
                let mut p = args.game.params();
                p.b = b;
                let series = model::rates(&p, strategy)?;
                writeln!(out, "# b={b}")?;
                out.write_all(series_csv(&series).as_bytes())?;
            }
        }
    }
    Ok(())
}

const SIM_HEADER: &str = "source,p_attack,ci95_attack,p_detect,ci95_detect,p_tie,p_neither,z_attack,z_detect";

fn empirical_row(label: &str, r: &SimResult) -> String {
    match (r.attack_rate(), r.detect_rate(), r.tie_rate(), r.neither_rate()) {
        (Some(a), Some(d), Some(t), Some(n)) => format!(
            "{label},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},,",
            a.rate,
            a.ci95(),
            d.rate,
            d.ci95(),
            t.rate,
            n.rate
        ),
        _ => format!("{label},undefined,,undefined,,,,,"),
    }
}

fn z(analytic: f64, empirical: f64, n: u64) -> f64 {
    (empirical - analytic) / (analytic * (1.0 - analytic) / n as f64).max(1e-300).sqrt()
}

pub fn simulate(args: &SimulateArgs, out: &mut dyn Write) -> Result<(), CliError> {
    if args.grid {
        let points = report::standard_grid(args.game.rounds)
            .iter()
            .map(|(p, st)| report::compare(p, *st, args.trials, args.seed))
            .collect::<Result<Vec<_>, _>>()?;
        out.write_all(report::render(&points).as_bytes())?;
        return Ok(());
    }
    let p = args.game.params();
    let strategy = args.game.strategy;
    if args.against_allocator {
        // The block size comes from the allocator's class table.
        return simulate_against_allocator(args, &p, out);
    }
    p.validate()?;
    let sim = simulate_strategy(&p, strategy, args.trials, args.seed)?;
    let analytic = model::rates(&p, strategy)?;
    writeln!(
        out,
        "# simulate strategy={strategy} r={} b={} s={} l={} c={} d={} m={} rounds={} trials={} seed={}",
        p.r, p.b, p.s, p.l, p.c, p.d, p.m, p.rounds, args.trials, args.seed
    )?;
    writeln!(out, "# game: independent attack/corruption events; check window wraps; ties count toward both rates")?;
    writeln!(out, "{SIM_HEADER}")?;
    writeln!(out, "{}", empirical_row("empirical", &sim))?;
    let (aa, ad) = (analytic.final_attack(), analytic.final_detect());
    let tie = analytic.rounds.last().map_or(0.0, |r| r.p_tie);
    writeln!(out, "analytic,{aa:.6},,{ad:.6},,{tie:.6},,,")?;
    if let (Some(a), Some(d)) = (sim.attack_rate(), sim.detect_rate()) {
        writeln!(
            out,
            "delta,{:.6},,{:.6},,,,{:.2},{:.2}",
            aa - a.rate,
            ad - d.rate,
            z(aa, a.rate, args.trials),
            z(ad, d.rate, args.trials)
        )?;
    }
    Ok(())
}

fn simulate_against_allocator(args: &SimulateArgs, p: &ModelParams, out: &mut dyn Write) -> Result<(), CliError> {
    let mut cfg: AllocatorConfig = config_from_env()?;
    cfg.entropy_bits = args.game.entropy_bits;
    cfg.nearby_check = p.d as usize;
    cfg.fbc_len = p.c as usize;
    cfg.validate()?;
    let block = match s2alloc_core::SizeClassTable::new().size_class_for(p.s as usize, &cfg) {
        SizeClass::Class { block_size, .. } => block_size as u64,
        SizeClass::Huge => return Err(CliError::Usage("object size takes the huge path".into())),
    };
    let harness = HarnessParams {
        s: p.s as usize,
        s1: p.s1 as usize,
        l: p.l as usize,
        m: p.m as usize,
        rounds: p.rounds,
    };
    let mut abstract_params = *p;
    abstract_params.b = block;
    abstract_params.validate()?;
    let strategy = args.game.strategy;
    let real = simulate_allocator_attack(&cfg, harness, strategy, args.trials, args.seed)?;
    let game = simulate_strategy(&abstract_params, strategy, args.trials, args.seed)?;
    writeln!(
        out,
        "# simulate --against-allocator strategy={strategy} s={} class={block} l={} d={} c={} m={} rounds={} trials={} seed={} guard_rate={}",
        p.s, p.l, p.d, p.c, p.m, p.rounds, args.trials, args.seed, cfg.guard_page_rate
    )?;
    writeln!(out, "{SIM_HEADER}")?;
    writeln!(out, "{}", empirical_row("allocator", &real))?;
    writeln!(out, "{}", empirical_row("abstract", &game))?;
    Ok(())
}

pub fn bench(args: &BenchArgs, out: &mut dyn Write) -> Result<(), CliError> {
    if args.size == 0 {
        return Err(CliError::Usage("--size must be positive".into()));
    }
    let cfg = config_from_env()?;
    let page = cfg.page_size;
    let src = s2alloc_core::os_mem::mmap::MmapSource::new();
    if s2alloc_core::MemorySource::page_size(&src) != page {
        return Err(CliError::Failed("system page size differs from the configured page size".into()));
    }
    let alloc = Allocator::new(cfg, src, os_entropy())?;
    let result = run_bench(
        &alloc,
        &BenchConfig {
            size: args.size,
            total_bytes: args.total_bytes,
            reps: args.reps,
            threads: args.threads,
        },
    )?;
    out.write_all(result.to_csv().as_bytes())?;
    Ok(())
}

pub fn selftest(args: &SelftestArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let report = run_selftest(Faults { bitmap: args.inject_bitmap_fault });
    out.write_all(report.render().as_bytes())?;
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::Failed("selftest failed".into()))
    }
}

pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<(), CliError> {
    match &cli.command {
        Command::Analyze(a) => analyze(a, out),
        Command::Simulate(a) => simulate(a, out),
        Command::Bench(a) => bench(a, out),
        Command::Selftest(a) => selftest(a, out),
    }
}

/// Parses `args`, runs the command and maps the outcome to an exit code.
pub fn main_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = write!(err, "{}", e.render());
            return ExitCode::from(code);
        }
    };
    match run(&cli, out) {
        Ok(()) => ExitCode::from(EXIT_OK),
        Err(CliError::Usage(msg)) => {
            let _ = writeln!(err, "error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(CliError::Failed(msg)) => {
            let _ = writeln!(err, "error: {msg}");
            ExitCode::from(EXIT_FAILURE)
        }
    }
}

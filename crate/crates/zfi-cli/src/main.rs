//! Command-line driver for the sandbox-speculation workbench.
//!
//! Exit codes: 0 = clean run / secure verdict, 1 = violation found (or
//! a stuck run under `--strict`), 2 = usage/parse error, 3 = checker
//! budget exceeded.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use zfi::checker::{
    check_breakout, check_poisoning, replay_runs, Budget, CheckOptions, CheckOutcome, Property,
    StateSpace, Verdict, Violation,
};
use zfi::hardening::{lower_swivel_cet, lower_swivel_sfi, mask_heap_offsets, LoweredProgram};
use zfi::lang::{parse_program, render_program, Program, Register};
use zfi::leakage::{trace_step, LeakModel, StepMode};
use zfi::machine::{Config, MemoryLayout, StepOutcome, StuckReason};
use zfi::oracles::{parse_script, Oracle, OracleClass};
use zfi::speculation::SpecMode;

#[derive(Parser)]
#[command(
    name = "zfi",
    version,
    about = "Speculative sandbox semantics workbench"
)]
struct Cli {
    #[command(subcommand)]
    command: Commands,
}

#[derive(Subcommand)]
enum Commands {
    /// Execute a program and report the final state and leakage traces.
    Run(RunArgs),
    /// Execute a program and print only the leakage trace dumps.
    Trace(RunArgs),
    /// Apply a hardening pass and emit the lowered program.
    Harden(HardenArgs),
    /// Check breakout or poisoning security over an enumerated space.
    Check(CheckArgs),
    /// Re-run a recorded violation and confirm the divergence.
    Replay(ReplayArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Semantics {
    Arch,
    Spec,
    Cet,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PassName {
    Mask,
    Sfi,
    Cet,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PropertyName {
    Breakout,
    Poisoning,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModelName {
    Dmem,
    Ct,
    Arch,
}

impl ModelName {
    fn to_model(self) -> LeakModel {
        match self {
            ModelName::Dmem => LeakModel::Dmem,
            ModelName::Ct => LeakModel::Ct,
            ModelName::Arch => LeakModel::Arch,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ClassName {
    AlwaysCorrect,
    Direction,
    Btb,
    Scripted,
}

impl ClassName {
    fn to_class(self) -> OracleClass {
        match self {
            ClassName::AlwaysCorrect => OracleClass::AlwaysCorrect,
            ClassName::Direction => OracleClass::DirectionOnly,
            ClassName::Btb => OracleClass::HistoricallyValidBtb,
            ClassName::Scripted => OracleClass::ScriptedAdversary,
        }
    }
}

#[derive(Args)]
struct RunArgs {
    /// Program file (assembly text).
    program: PathBuf,
    /// Memory layout file (TOML).
    #[arg(long)]
    layout: PathBuf,
    /// Maximum number of steps.
    #[arg(long, default_value_t = 64)]
    steps: usize,
    /// Step relation to use.
    #[arg(long, value_enum, default_value_t = Semantics::Arch)]
    semantics: Semantics,
    /// Oracle family driving speculation (spec/cet semantics).
    #[arg(long, value_enum, default_value_t = ClassName::AlwaysCorrect)]
    oracle_class: ClassName,
    /// Oracle decision script, e.g. "taken,fall" or "0,1" or
    /// "target:0x5". One choice is consumed per control-flow event.
    #[arg(long, default_value = "")]
    oracle_script: String,
    /// Initial state, e.g. `r1=5,mem[0x6]=3` (repeatable).
    #[arg(long)]
    init: Vec<String>,
    /// Print only this leakage model's trace (default: all three).
    #[arg(long, value_enum)]
    model: Option<ModelName>,
    /// Emit the run report as JSON.
    #[arg(long)]
    json: bool,
    /// Exit nonzero when the run gets stuck before the step bound.
    #[arg(long)]
    strict: bool,
}

#[derive(Args)]
struct HardenArgs {
    program: PathBuf,
    #[arg(long)]
    layout: PathBuf,
    /// Which transformation to apply.
    #[arg(long, value_enum)]
    pass: PassName,
    /// Write the lowered program here (default: stdout).
    #[arg(long, short = 'o')]
    output: Option<PathBuf>,
    /// Write the block-map sidecar (JSON) here.
    #[arg(long)]
    block_map: Option<PathBuf>,
}

#[derive(Args)]
struct CheckArgs {
    program: PathBuf,
    #[arg(long)]
    layout: PathBuf,
    #[arg(long, value_enum)]
    property: PropertyName,
    /// Leakage model for poisoning checks (dmem or ct).
    #[arg(long, value_enum, default_value_t = ModelName::Ct)]
    model: ModelName,
    #[arg(long, value_enum, default_value_t = ClassName::Direction)]
    oracle_class: ClassName,
    /// Step bound n.
    #[arg(long, default_value_t = 10)]
    steps: usize,
    /// Expected machine width; must match the layout when given.
    #[arg(long)]
    width: Option<u8>,
    /// Registers and cells ranging over the whole domain,
    /// e.g. `r1,mem[0x12]`. Everything else starts at zero.
    #[arg(long, default_value = "")]
    enumerate: String,
    /// Speculative relation the runs use.
    #[arg(long, value_enum, default_value_t = Semantics::Spec)]
    semantics: Semantics,
    /// Compare stuck timing/reasons in addition to observations.
    #[arg(long)]
    strict_trace_equality: bool,
    /// Parallel workers (results are worker-count independent).
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long, default_value_t = 1 << 16)]
    max_assignments: u64,
    #[arg(long, default_value_t = 1 << 14)]
    max_scripts: u64,
    #[arg(long, default_value_t = 1 << 24)]
    max_pairs: u64,
    /// Emit the verdict as JSON (always written to --output if given).
    #[arg(long)]
    json: bool,
    /// Write the verdict JSON here.
    #[arg(long, short = 'o')]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct ReplayArgs {
    /// Violation JSON produced by `check`.
    violation: PathBuf,
    #[arg(long)]
    json: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Commands::Run(args) => cmd_run(&args, false),
        Commands::Trace(args) => cmd_run(&args, true),
        Commands::Harden(args) => cmd_harden(&args),
        Commands::Check(args) => cmd_check(&args),
        Commands::Replay(args) => cmd_replay(&args),
    };
    match result {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}

fn load_program(path: &Path) -> Result<Program> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_program(&text).map_err(|e| anyhow!("{}: {e}", path.display()))
}

fn load_layout(path: &Path) -> Result<MemoryLayout> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    MemoryLayout::from_toml_str(&text).map_err(|e| anyhow!("{}: {e}", path.display()))
}

/// Parse `r1=5,mem[0x6]=3` fragments into state updates.
fn apply_inits(config: &mut Config, specs: &[String]) -> Result<()> {
    for spec in specs {
        for item in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (lhs, rhs) = item
                .split_once('=')
                .ok_or_else(|| anyhow!("bad init item '{item}' (expected lhs=value)"))?;
            let value = parse_number(rhs.trim())
                .ok_or_else(|| anyhow!("bad value in init item '{item}'"))?;
            let lhs = lhs.trim();
            if let Some(rest) = lhs.strip_prefix("mem[") {
                let addr = rest
                    .strip_suffix(']')
                    .and_then(parse_number)
                    .ok_or_else(|| anyhow!("bad address in init item '{item}'"))?;
                config.mem.write(
                    config.width.wrap(addr as u64),
                    config.width.wrap(value as u64),
                );
            } else {
                let reg = Register::from_name(lhs)
                    .ok_or_else(|| anyhow!("unknown register in init item '{item}'"))?;
                config.regs.set(reg, config.width.wrap(value as u64));
            }
        }
    }
    Ok(())
}

fn parse_number(s: &str) -> Option<u32> {
    if let Some(hex) = s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        u32::from_str_radix(hex, 16).ok()
    } else {
        s.parse().ok()
    }
}

/// Lossless run report.
#[derive(Debug, Serialize, Deserialize, PartialEq, Eq)]
struct RunReport {
    semantics: String,
    steps_requested: usize,
    steps_executed: usize,
    /// "completed" or the stuck reason.
    outcome: String,
    final_pc: u32,
    mispredicted: bool,
    registers: BTreeMap<String, u32>,
    memory: BTreeMap<String, u32>,
    traces: BTreeMap<String, Vec<String>>,
}

fn stuck_name(reason: StuckReason) -> &'static str {
    match reason {
        StuckReason::Halt => "halt",
        StuckReason::UnmappedPc => "unmapped-pc",
        StuckReason::GuardAccess => "guard-access",
        StuckReason::CetEndbranchViolation => "cet-endbranch-violation",
        StuckReason::CetShadowMismatch => "cet-shadow-mismatch",
    }
}

fn cmd_run(args: &RunArgs, trace_only: bool) -> Result<ExitCode> {
    let program = load_program(&args.program)?;
    let layout = load_layout(&args.layout)?;
    let mut config = Config::initial(Arc::new(program), &layout)?;
    apply_inits(&mut config, &args.init)?;

    let script = parse_script(&args.oracle_script).map_err(|e| anyhow!(e))?;
    let mut oracle = Oracle::scripted(args.oracle_class.to_class(), script);

    let mut steps_executed = 0;
    let mut stuck = None;
    for _ in 0..args.steps {
        let mut mode = match args.semantics {
            Semantics::Arch => StepMode::Arch,
            Semantics::Spec => StepMode::Spec(&mut oracle),
            Semantics::Cet => StepMode::Cet(&mut oracle),
        };
        match trace_step(&config, &layout, &mut mode) {
            StepOutcome::Next(n) => {
                config = n;
                steps_executed += 1;
            }
            StepOutcome::Stuck(reason) => {
                stuck = Some(reason);
                break;
            }
        }
    }

    let models: Vec<LeakModel> = match args.model {
        Some(m) => vec![m.to_model()],
        None => LeakModel::ALL.to_vec(),
    };

    let report = RunReport {
        semantics: match args.semantics {
            Semantics::Arch => "arch",
            Semantics::Spec => "spec",
            Semantics::Cet => "cet",
        }
        .to_string(),
        steps_requested: args.steps,
        steps_executed,
        outcome: stuck.map_or("completed".to_string(), |r| stuck_name(r).to_string()),
        final_pc: config.pc.0,
        mispredicted: config.mispredicted,
        registers: config
            .regs
            .nonzero()
            .map(|(r, v)| (r.name(), v.0))
            .collect(),
        memory: config
            .mem
            .nonzero()
            .map(|(a, v)| (format!("{a}"), v.0))
            .collect(),
        traces: models
            .iter()
            .map(|&m| {
                (
                    m.name().to_string(),
                    config.obs.get(m).iter().map(|o| o.dump_line()).collect(),
                )
            })
            .collect(),
    };

    if args.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else if trace_only {
        for &m in &models {
            print!("{}", config.obs.dump(m));
        }
    } else {
        println!(
            "{} steps ({}), pc = {}, mispredicted = {}",
            report.steps_executed, report.outcome, report.final_pc, report.mispredicted
        );
        if !report.registers.is_empty() {
            let regs: Vec<String> = report
                .registers
                .iter()
                .map(|(r, v)| format!("{r}={v}"))
                .collect();
            println!("registers: {}", regs.join(" "));
        }
        if !report.memory.is_empty() {
            let mem: Vec<String> = report
                .memory
                .iter()
                .map(|(a, v)| format!("[{a}]={v}"))
                .collect();
            println!("memory: {}", mem.join(" "));
        }
        for &m in &models {
            print!("{}", config.obs.dump(m));
        }
    }

    if args.strict && stuck.is_some() && stuck != Some(StuckReason::Halt) {
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_harden(args: &HardenArgs) -> Result<ExitCode> {
    let program = load_program(&args.program)?;
    let layout = load_layout(&args.layout)?;
    let LoweredProgram {
        program: lowered,
        block_map,
    } = match args.pass {
        PassName::Mask => mask_heap_offsets(&program, &layout),
        PassName::Sfi => lower_swivel_sfi(&program, &layout),
        PassName::Cet => lower_swivel_cet(&program, &layout),
    }
    .map_err(|e| anyhow!("{}: {e}", args.program.display()))?;

    for w in &block_map.warnings {
        eprintln!("warning: {w}");
    }

    let text = render_program(&lowered);
    match &args.output {
        Some(path) => {
            std::fs::write(path, &text).with_context(|| format!("writing {}", path.display()))?
        }
        None => print!("{text}"),
    }
    if let Some(path) = &args.block_map {
        std::fs::write(path, serde_json::to_string_pretty(&block_map)?)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_check(args: &CheckArgs) -> Result<ExitCode> {
    let program = load_program(&args.program)?;
    let layout = load_layout(&args.layout)?;
    if let Some(w) = args.width {
        if w != layout.width().bits() {
            bail!(
                "--width {w} does not match layout width {}",
                layout.width().bits()
            );
        }
    }
    let space = StateSpace::parse_spec(layout.width(), &args.enumerate)
        .map_err(|e| anyhow!("--enumerate: {e}"))?;
    let opts = CheckOptions {
        mode: match args.semantics {
            Semantics::Cet => SpecMode::Cet,
            _ => SpecMode::Plain,
        },
        strict_trace_equality: args.strict_trace_equality,
        budget: Budget {
            max_assignments: args.max_assignments,
            max_scripts: args.max_scripts,
            max_pairs: args.max_pairs,
        },
        workers: args.workers,
    };

    let summary = space.summary();
    eprintln!(
        "checking {} over {} assignments ({} enumerated dimension(s), domain {})",
        match args.property {
            PropertyName::Breakout => "breakout security",
            PropertyName::Poisoning => "poisoning security",
        },
        summary.assignments,
        summary.enumerated.len(),
        summary.domain_size,
    );

    let class = args.oracle_class.to_class();
    let outcome = match args.property {
        PropertyName::Breakout => {
            check_breakout(&program, &layout, class, args.steps, &space, &opts)?
        }
        PropertyName::Poisoning => check_poisoning(
            &program,
            &layout,
            class,
            args.steps,
            &space,
            args.model.to_model(),
            &opts,
        )?,
    };

    let json = serde_json::to_string_pretty(&outcome)?;
    if let Some(path) = &args.output {
        std::fs::write(path, &json).with_context(|| format!("writing {}", path.display()))?;
    }
    if args.json {
        println!("{json}");
    }

    match &outcome {
        CheckOutcome::Verdict(Verdict::SecureUpTo {
            steps,
            scripts_checked,
            pairs_checked,
            ..
        }) => {
            if !args.json {
                println!(
                    "secure up to {steps} steps ({scripts_checked} oracle scripts, {pairs_checked} state pairs)"
                );
            }
            Ok(ExitCode::SUCCESS)
        }
        CheckOutcome::Verdict(Verdict::Violation(v)) => {
            if !args.json {
                print_violation(v);
            }
            Ok(ExitCode::from(1))
        }
        CheckOutcome::BudgetExceeded {
            what,
            limit,
            needed,
        } => {
            eprintln!("budget exceeded: {needed} {what} (limit {limit})");
            Ok(ExitCode::from(3))
        }
    }
}

fn print_violation(v: &Violation) {
    println!(
        "VIOLATION of {} security ({} model) after script {:?}",
        match v.property {
            Property::Breakout => "breakout",
            Property::Poisoning => "poisoning",
        },
        v.model.name(),
        v.script.iter().map(|c| c.to_string()).collect::<Vec<_>>(),
    );
    let show = |a: &zfi::checker::Assignment| {
        let mut parts: Vec<String> = a
            .regs
            .iter()
            .map(|(r, val)| format!("{}={}", r.name(), val.0))
            .collect();
        parts.extend(
            a.cells
                .iter()
                .map(|(addr, val)| format!("mem[{addr}]={}", val.0)),
        );
        parts.join(" ")
    };
    println!("  init 1: {}", show(&v.init1));
    println!("  init 2: {}", show(&v.init2));
    println!("  traces diverge at observation {}", v.divergence);
    for (name, trace) in [("trace 1", &v.trace1), ("trace 2", &v.trace2)] {
        let rendered: Vec<String> = trace.iter().map(|o| o.dump_line()).collect();
        println!("  {name}: [{}]", rendered.join(", "));
    }
}

fn cmd_replay(args: &ReplayArgs) -> Result<ExitCode> {
    let text = std::fs::read_to_string(&args.violation)
        .with_context(|| format!("reading {}", args.violation.display()))?;
    // Accept either a bare violation or a full check outcome.
    let violation: Violation = match serde_json::from_str::<Violation>(&text) {
        Ok(v) => v,
        Err(_) => match serde_json::from_str::<CheckOutcome>(&text) {
            Ok(CheckOutcome::Verdict(Verdict::Violation(v))) => *v,
            Ok(_) => bail!("{} does not contain a violation", args.violation.display()),
            Err(e) => bail!("{}: {e}", args.violation.display()),
        },
    };

    let ((final1, _), (final2, _)) =
        replay_runs(&violation).map_err(|e| anyhow!("replay failed: {e}"))?;
    let t1 = final1.obs.get(violation.model);
    let t2 = final2.obs.get(violation.model);
    let common = t1.iter().zip(t2.iter()).take_while(|(a, b)| a == b).count();
    if common >= t1.len().max(t2.len()) || common != violation.divergence {
        bail!("replay did not reproduce the recorded divergence");
    }

    if args.json {
        #[derive(Serialize)]
        struct ReplayReport<'a> {
            divergence: usize,
            model: &'a str,
            trace1: Vec<String>,
            trace2: Vec<String>,
        }
        let report = ReplayReport {
            divergence: common,
            model: violation.model.name(),
            trace1: t1.iter().map(|o| o.dump_line()).collect(),
            trace2: t2.iter().map(|o| o.dump_line()).collect(),
        };
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        println!("violation reproduced: traces diverge at observation {common}");
        print_violation(&violation);
    }
    Ok(ExitCode::from(1))
}

//! Bounded exhaustive checking of breakout and poisoning security.
//!
//! Both properties are two-run (relational) properties quantified over
//! a class of prediction oracles and a declared space of initial
//! states:
//!
//! - *Breakout security*: initial states that agree on every sandboxed
//!   memory region (and everything else except host memory) must
//!   produce equal `arch`-model traces under every oracle. A violation
//!   means some host value is visible in the trace.
//! - *Poisoning security*: any two initial states whose architectural
//!   runs produce equal model traces must also produce equal model
//!   traces speculatively. A violation means speculation leaks
//!   something architecture does not.
//!
//! The oracle quantifier is realized by exhaustive enumeration of
//! decision scripts at the step bound; the state quantifier by a
//! declared enumeration (listed registers and memory cells range over
//! the full value domain, everything else starts at zero). Search order
//! is deterministic: scripts outer, state pairs inner, lexicographic,
//! so the reported violation is stable and replayable.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::lang::{parse_program, render_program, Program, Register, Value, Width};
use crate::leakage::{LeakModel, ObsTrace, Observation};
use crate::machine::{run_arch, Config, MemoryLayout, StepOutcome, StuckReason};
use crate::oracles::{enumerate_scripts_capped, DecisionScript, Oracle, OracleClass};
use crate::speculation::{run_spec, SpecMode};

/// Declared enumeration space: the listed registers and memory cells
/// range over the whole value domain; all other registers and cells
/// start at zero (after jump-table materialization).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateSpace {
    pub width: Width,
    pub registers: Vec<Register>,
    pub cells: Vec<u32>,
}

#[derive(Debug, thiserror::Error)]
pub enum SpaceError {
    #[error("bad enumeration item '{0}' (expected a register name or mem[addr])")]
    BadItem(String),
    #[error("enumerated cell {0} exceeds the address space")]
    CellOutOfRange(u32),
}

impl StateSpace {
    pub fn new(width: Width) -> StateSpace {
        StateSpace {
            width,
            registers: Vec::new(),
            cells: Vec::new(),
        }
    }

    /// Parse a comma-separated enumeration spec: `r1,mem[0x12],rStk`.
    pub fn parse_spec(width: Width, spec: &str) -> Result<StateSpace, SpaceError> {
        let mut space = StateSpace::new(width);
        for item in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            if let Some(rest) = item.strip_prefix("mem[") {
                let inner = rest
                    .strip_suffix(']')
                    .ok_or_else(|| SpaceError::BadItem(item.into()))?;
                let addr = parse_u32(inner).ok_or_else(|| SpaceError::BadItem(item.into()))?;
                if addr >= width.domain_size() {
                    return Err(SpaceError::CellOutOfRange(addr));
                }
                space.cells.push(addr);
            } else {
                let reg =
                    Register::from_name(item).ok_or_else(|| SpaceError::BadItem(item.into()))?;
                space.registers.push(reg);
            }
        }
        Ok(space)
    }

    pub fn dimensions(&self) -> usize {
        self.registers.len() + self.cells.len()
    }

    /// Saturating: an astronomically large space still trips the
    /// budget check instead of overflowing.
    pub fn assignment_count(&self) -> u64 {
        (self.width.domain_size() as u64)
            .checked_pow(self.dimensions() as u32)
            .unwrap_or(u64::MAX)
    }

    /// The i-th assignment in lexicographic order (registers first,
    /// then cells; earlier dimensions are most significant).
    pub fn assignment(&self, index: u64) -> Assignment {
        let d = self.width.domain_size() as u64;
        let dims = self.dimensions();
        let mut digits = vec![0u32; dims];
        let mut rest = index;
        for slot in digits.iter_mut().rev() {
            *slot = (rest % d) as u32;
            rest /= d;
        }
        let regs = self
            .registers
            .iter()
            .zip(&digits)
            .map(|(&r, &v)| (r, Value(v)))
            .collect();
        let cells = self
            .cells
            .iter()
            .zip(digits[self.registers.len()..].iter())
            .map(|(&a, &v)| (a, Value(v)))
            .collect();
        Assignment { regs, cells }
    }

    pub fn summary(&self) -> SpaceSummary {
        SpaceSummary {
            width: self.width.bits(),
            enumerated: self
                .registers
                .iter()
                .map(|r| r.name())
                .chain(self.cells.iter().map(|a| format!("mem[{a}]")))
                .collect(),
            domain_size: self.width.domain_size(),
            assignments: self.assignment_count(),
        }
    }
}

fn parse_u32(s: &str) -> Option<u32> {
    if let Some(hex) = s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        u32::from_str_radix(hex, 16).ok()
    } else {
        s.parse().ok()
    }
}

/// Concrete initial values for the enumerated dimensions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub regs: Vec<(Register, Value)>,
    pub cells: Vec<(u32, Value)>,
}

impl Assignment {
    pub fn apply(&self, base: &Config) -> Config {
        let mut c = base.clone();
        for &(r, v) in &self.regs {
            c.regs.set(r, v);
        }
        for &(a, v) in &self.cells {
            c.mem.write(Value(a), v);
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpaceSummary {
    pub width: u8,
    pub enumerated: Vec<String>,
    pub domain_size: u32,
    pub assignments: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Property {
    Breakout,
    Poisoning,
}

/// Knobs shared by both checks.
#[derive(Debug, Clone)]
pub struct CheckOptions {
    pub mode: SpecMode,
    /// When set, runs must also agree on when and why they get stuck;
    /// by default only the emitted observations are compared.
    pub strict_trace_equality: bool,
    pub budget: Budget,
    pub workers: usize,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            mode: SpecMode::Plain,
            strict_trace_equality: false,
            budget: Budget::default(),
            workers: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Budget {
    pub max_assignments: u64,
    pub max_scripts: u64,
    pub max_pairs: u64,
}

impl Default for Budget {
    fn default() -> Self {
        Budget {
            max_assignments: 1 << 16,
            max_scripts: 1 << 14,
            max_pairs: 1 << 24,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CheckError {
    #[error("state space width {space} does not match layout width {layout}")]
    WidthMismatch { space: u8, layout: u8 },
    #[error(transparent)]
    Layout(#[from] crate::machine::LayoutError),
    #[error("poisoning security is defined for the dmem and ct models only")]
    BadModel,
}

/// Checker result: a verdict, or a budget overrun (reported distinctly
/// so it is never mistaken for a security result).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "kebab-case")]
pub enum CheckOutcome {
    Verdict(Verdict),
    BudgetExceeded {
        what: String,
        limit: u64,
        needed: u64,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "kebab-case")]
pub enum Verdict {
    SecureUpTo {
        property: Property,
        steps: usize,
        oracle_class: OracleClass,
        mode: SpecMode,
        model: LeakModel,
        space: SpaceSummary,
        program_hash: String,
        scripts_checked: u64,
        pairs_checked: u64,
    },
    Violation(Box<Violation>),
}

impl Verdict {
    pub fn is_secure(&self) -> bool {
        matches!(self, Verdict::SecureUpTo { .. })
    }

    pub fn violation(&self) -> Option<&Violation> {
        match self {
            Verdict::Violation(v) => Some(v),
            Verdict::SecureUpTo { .. } => None,
        }
    }
}

/// A replayable counterexample: the oracle script, both initial-state
/// assignments, both traces, and the index where they diverge.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Violation {
    pub property: Property,
    pub model: LeakModel,
    pub oracle_class: OracleClass,
    pub mode: SpecMode,
    pub steps: usize,
    pub program_text: String,
    pub program_hash: String,
    pub layout: MemoryLayout,
    pub space: SpaceSummary,
    pub script: DecisionScript,
    pub init1: Assignment,
    pub init2: Assignment,
    /// Index into the model traces at which they diverge (the length of
    /// the common prefix).
    pub divergence: usize,
    pub trace1: Vec<Observation>,
    pub trace2: Vec<Observation>,
    pub stuck1: Option<(usize, StuckReason)>,
    pub stuck2: Option<(usize, StuckReason)>,
}

#[derive(Debug, thiserror::Error)]
pub enum ReplayError {
    #[error("stale violation: stored program hash {stored} but text hashes to {actual}")]
    HashMismatch { stored: String, actual: String },
    #[error("violation program no longer parses: {0}")]
    Parse(#[from] crate::lang::ParseError),
    #[error(transparent)]
    Layout(#[from] crate::machine::LayoutError),
    #[error("replay did not reproduce the recorded divergence")]
    NotReproduced,
}

pub fn program_hash(p: &Program) -> String {
    let mut h = Sha256::new();
    h.update(render_program(p).as_bytes());
    hex_string(&h.finalize())
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Initial-state equivalence for breakout security: memories agree on
/// every sandboxed region and every non-memory component is equal; host
/// memory may differ arbitrarily.
pub fn mem_equiv(c1: &Config, c2: &Config, layout: &MemoryLayout) -> bool {
    if c1.program != c2.program
        || c1.pc != c2.pc
        || c1.regs != c2.regs
        || c1.mu_state != c2.mu_state
        || c1.mispredicted != c2.mispredicted
        || c1.obs != c2.obs
    {
        return false;
    }
    layout
        .sandbox_addresses()
        .into_iter()
        .all(|a| c1.mem.read(Value(a)) == c2.mem.read(Value(a)))
}

/// Summary of one run at the bound.
#[derive(Debug, Clone)]
struct RunSummary {
    obs: ObsTrace,
    stuck: Option<(usize, StuckReason)>,
}

fn summarize(history: &[StepOutcome], final_cfg: Config) -> RunSummary {
    let stuck = history.iter().enumerate().find_map(|(i, o)| match o {
        StepOutcome::Stuck(r) => Some((i, *r)),
        StepOutcome::Next(_) => None,
    });
    RunSummary {
        obs: final_cfg.obs,
        stuck,
    }
}

fn spec_run_summary(
    base: &Config,
    layout: &MemoryLayout,
    class: OracleClass,
    script: &DecisionScript,
    n: usize,
    mode: SpecMode,
) -> RunSummary {
    let mut oracle = Oracle::scripted(class, script.clone());
    let (final_cfg, history) = run_spec(base, layout, &mut oracle, n, mode);
    summarize(&history, final_cfg)
}

fn arch_run_summary(base: &Config, layout: &MemoryLayout, n: usize) -> RunSummary {
    let (final_cfg, history) = run_arch(base, layout, n);
    summarize(&history, final_cfg)
}

/// Compare two runs' traces under `model`. `None` means the pair is
/// indistinguishable; `Some(k)` gives the divergence index (length of
/// the common prefix). By default only emitted observations count; in
/// strict mode, disagreeing stuck steps or reasons also flag the pair.
fn compare_traces(
    model: LeakModel,
    strict: bool,
    r1: &RunSummary,
    r2: &RunSummary,
) -> Option<usize> {
    let t1 = r1.obs.get(model);
    let t2 = r2.obs.get(model);
    let common = t1.iter().zip(t2.iter()).take_while(|(a, b)| a == b).count();
    if common < t1.len().max(t2.len()) {
        return Some(common);
    }
    if strict && r1.stuck != r2.stuck {
        return Some(common);
    }
    None
}

/// Pair-generation strategy per property.
enum PairScheme {
    /// Shared dimensions identical, host dimensions differ.
    Breakout {
        shared_dims: Vec<usize>,
        host_dims: Vec<usize>,
    },
    /// All unordered assignment pairs, filtered by the architectural
    /// premise.
    Poisoning,
}

struct Search<'a> {
    program: Arc<Program>,
    layout: &'a MemoryLayout,
    space: &'a StateSpace,
    class: OracleClass,
    n: usize,
    opts: &'a CheckOptions,
    model: LeakModel,
    property: Property,
    base: Config,
}

impl Search<'_> {
    fn assignments(&self) -> Vec<Assignment> {
        (0..self.space.assignment_count())
            .map(|i| self.space.assignment(i))
            .collect()
    }

    fn verdict_secure(&self, scripts: u64, pairs: u64) -> CheckOutcome {
        CheckOutcome::Verdict(Verdict::SecureUpTo {
            property: self.property,
            steps: self.n,
            oracle_class: self.class,
            mode: self.opts.mode,
            model: self.model,
            space: self.space.summary(),
            program_hash: program_hash(&self.program),
            scripts_checked: scripts,
            pairs_checked: pairs,
        })
    }

    fn violation(
        &self,
        script: &DecisionScript,
        a1: &Assignment,
        a2: &Assignment,
        divergence: usize,
        r1: &RunSummary,
        r2: &RunSummary,
    ) -> CheckOutcome {
        CheckOutcome::Verdict(Verdict::Violation(Box::new(Violation {
            property: self.property,
            model: self.model,
            oracle_class: self.class,
            mode: self.opts.mode,
            steps: self.n,
            program_text: render_program(&self.program),
            program_hash: program_hash(&self.program),
            layout: self.layout.clone(),
            space: self.space.summary(),
            script: script.clone(),
            init1: a1.clone(),
            init2: a2.clone(),
            divergence,
            trace1: r1.obs.get(self.model).to_vec(),
            trace2: r2.obs.get(self.model).to_vec(),
            stuck1: r1.stuck,
            stuck2: r2.stuck,
        })))
    }
}

/// Check breakout security up to `n` steps: over every oracle script of
/// `class` and every pair of initial states that agree on sandbox
/// contents (host-cell differences enumerated), the `arch`-model traces
/// must be equal.
pub fn check_breakout(
    p: &Program,
    layout: &MemoryLayout,
    class: OracleClass,
    n: usize,
    space: &StateSpace,
    opts: &CheckOptions,
) -> Result<CheckOutcome, CheckError> {
    let search = prepare(
        p,
        layout,
        class,
        n,
        space,
        opts,
        LeakModel::Arch,
        Property::Breakout,
    )?;
    // Registers and sandbox cells are shared within a pair; host cells
    // may differ, which is exactly the mem_equiv relation.
    let mut shared_dims = Vec::new();
    let mut host_dims = Vec::new();
    for i in 0..space.registers.len() {
        shared_dims.push(i);
    }
    for (j, &cell) in space.cells.iter().enumerate() {
        let dim = space.registers.len() + j;
        if layout.is_host(Value(cell)) {
            host_dims.push(dim);
        } else {
            shared_dims.push(dim);
        }
    }
    run_search(
        search,
        PairScheme::Breakout {
            shared_dims,
            host_dims,
        },
    )
}

/// Check poisoning security up to `n` steps at `model` (dmem or ct):
/// for every oracle script and every pair of initial states whose
/// architectural runs produce equal model traces, the speculative runs
/// must produce equal model traces too.
pub fn check_poisoning(
    p: &Program,
    layout: &MemoryLayout,
    class: OracleClass,
    n: usize,
    space: &StateSpace,
    model: LeakModel,
    opts: &CheckOptions,
) -> Result<CheckOutcome, CheckError> {
    if model == LeakModel::Arch {
        return Err(CheckError::BadModel);
    }
    let search = prepare(p, layout, class, n, space, opts, model, Property::Poisoning)?;
    run_search(search, PairScheme::Poisoning)
}

#[allow(clippy::too_many_arguments)]
fn prepare<'a>(
    p: &Program,
    layout: &'a MemoryLayout,
    class: OracleClass,
    n: usize,
    space: &'a StateSpace,
    opts: &'a CheckOptions,
    model: LeakModel,
    property: Property,
) -> Result<Search<'a>, CheckError> {
    if space.width != layout.width() {
        return Err(CheckError::WidthMismatch {
            space: space.width.bits(),
            layout: layout.width().bits(),
        });
    }
    let program = Arc::new(p.clone());
    let base = Config::initial(program.clone(), layout)?;
    Ok(Search {
        program,
        layout,
        space,
        class,
        n,
        opts,
        model,
        property,
        base,
    })
}

fn run_search(search: Search<'_>, scheme: PairScheme) -> Result<CheckOutcome, CheckError> {
    let budget = &search.opts.budget;
    let assignment_count = search.space.assignment_count();
    if assignment_count > budget.max_assignments {
        return Ok(CheckOutcome::BudgetExceeded {
            what: "assignments".into(),
            limit: budget.max_assignments,
            needed: assignment_count,
        });
    }
    let assignments = search.assignments();
    let inits: Vec<Config> = assignments.iter().map(|a| a.apply(&search.base)).collect();

    // The script tree is grown against every initial state, so it
    // covers each run's prediction events.
    let Some(scripts) = enumerate_scripts_capped(
        search.class,
        search.layout,
        search.n,
        search.opts.mode,
        &inits,
        budget.max_scripts as usize,
    ) else {
        return Ok(CheckOutcome::BudgetExceeded {
            what: "oracle scripts".into(),
            limit: budget.max_scripts,
            needed: budget.max_scripts + 1,
        });
    };

    let pairs: Vec<(usize, usize)> = match &scheme {
        PairScheme::Breakout {
            shared_dims,
            host_dims,
        } => breakout_pairs(search.space, shared_dims, host_dims),
        PairScheme::Poisoning => {
            let count = assignments.len();
            let mut out = Vec::new();
            for i in 0..count {
                for j in (i + 1)..count {
                    out.push((i, j));
                }
            }
            out
        }
    };
    if pairs.len() as u64 > budget.max_pairs {
        return Ok(CheckOutcome::BudgetExceeded {
            what: "state pairs".into(),
            limit: budget.max_pairs,
            needed: pairs.len() as u64,
        });
    }

    // Poisoning premise: architectural runs per assignment, applied
    // once (the premise does not depend on the oracle script).
    let pairs: Vec<(usize, usize)> = match &scheme {
        PairScheme::Poisoning => {
            let arch: Vec<RunSummary> = inits
                .iter()
                .map(|c| arch_run_summary(c, search.layout, search.n))
                .collect();
            pairs
                .into_iter()
                .filter(|&(i, j)| {
                    compare_traces(
                        search.model,
                        search.opts.strict_trace_equality,
                        &arch[i],
                        &arch[j],
                    )
                    .is_none()
                })
                .collect()
        }
        PairScheme::Breakout { .. } => pairs,
    };

    // Scripts outer, pairs inner. Workers partition the script range;
    // the reported violation is the (script, pair)-lexicographic
    // minimum, so results are independent of worker count.
    let workers = search.opts.workers.max(1);
    let chunk = scripts.len().div_ceil(workers).max(1);
    type Hit = (usize, usize, usize, RunSummary, RunSummary); // script, pair, divergence

    let find_in_chunk = |start: usize, end: usize| -> Option<Hit> {
        let mut cache: BTreeMap<usize, RunSummary> = BTreeMap::new();
        for (offset, script) in scripts[start..end.min(scripts.len())].iter().enumerate() {
            cache.clear();
            let s_idx = start + offset;
            for (p_idx, &(i, j)) in pairs.iter().enumerate() {
                for idx in [i, j] {
                    if let std::collections::btree_map::Entry::Vacant(e) = cache.entry(idx) {
                        let summary = spec_run_summary(
                            &inits[idx],
                            search.layout,
                            search.class,
                            script,
                            search.n,
                            search.opts.mode,
                        );
                        e.insert(summary);
                    }
                }
                let (r1, r2) = (&cache[&i], &cache[&j]);
                if let Some(divergence) =
                    compare_traces(search.model, search.opts.strict_trace_equality, r1, r2)
                {
                    return Some((s_idx, p_idx, divergence, r1.clone(), r2.clone()));
                }
            }
        }
        None
    };

    let best: Option<Hit> = if workers == 1 || scripts.len() <= 1 {
        find_in_chunk(0, scripts.len())
    } else {
        std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for w in 0..workers {
                let start = w * chunk;
                let end = ((w + 1) * chunk).min(scripts.len());
                if start >= end {
                    break;
                }
                let f = &find_in_chunk;
                handles.push(scope.spawn(move || f(start, end)));
            }
            handles
                .into_iter()
                .filter_map(|h| h.join().expect("checker worker panicked"))
                .min_by_key(|hit| (hit.0, hit.1))
        })
    };

    match best {
        None => Ok(search.verdict_secure(scripts.len() as u64, pairs.len() as u64)),
        Some((s_idx, p_idx, divergence, r1, r2)) => {
            let (i, j) = pairs[p_idx];
            Ok(search.violation(
                &scripts[s_idx],
                &assignments[i],
                &assignments[j],
                divergence,
                &r1,
                &r2,
            ))
        }
    }
}

/// Breakout pairs: for each shared-part value, all unordered pairs of
/// differing host-part values, in lexicographic (shared, host1, host2)
/// order.
fn breakout_pairs(
    space: &StateSpace,
    shared_dims: &[usize],
    host_dims: &[usize],
) -> Vec<(usize, usize)> {
    let d = space.width.domain_size() as u64;
    let dims = space.dimensions();
    let weight: Vec<u64> = (0..dims).map(|k| d.pow((dims - 1 - k) as u32)).collect();

    let shared_count = d.pow(shared_dims.len() as u32);
    let host_count = d.pow(host_dims.len() as u32);

    let compose = |shared_idx: u64, host_idx: u64| -> usize {
        let mut index = 0u64;
        let mut rest = shared_idx;
        for &dim in shared_dims.iter().rev() {
            index += (rest % d) * weight[dim];
            rest /= d;
        }
        let mut rest = host_idx;
        for &dim in host_dims.iter().rev() {
            index += (rest % d) * weight[dim];
            rest /= d;
        }
        index as usize
    };

    let mut out = Vec::new();
    for s in 0..shared_count {
        for h1 in 0..host_count {
            for h2 in (h1 + 1)..host_count {
                out.push((compose(s, h1), compose(s, h2)));
            }
        }
    }
    // Search in plain (i, j)-lexicographic order over assignment
    // indices, matching a naive filtered double loop.
    out.sort_unstable();
    out
}

/// Re-run both sides of a recorded violation and return the two traces
/// (all three models). Fails if the stored program text no longer
/// hashes to the recorded value or the divergence does not reproduce.
pub fn replay(v: &Violation) -> Result<(ObsTrace, ObsTrace), ReplayError> {
    let (r1, r2) = replay_runs(v)?;
    let t1 = r1.0.obs.clone();
    let t2 = r2.0.obs.clone();
    let m1 = t1.get(v.model);
    let m2 = t2.get(v.model);
    let common = m1.iter().zip(m2.iter()).take_while(|(a, b)| a == b).count();
    let diverged = common < m1.len().max(m2.len());
    if !diverged || common != v.divergence {
        return Err(ReplayError::NotReproduced);
    }
    Ok((t1, t2))
}

/// As [`replay`], but returns the full final configurations and step
/// histories of both runs (for inspecting e.g. the misprediction flag
/// around the divergence).
#[allow(clippy::type_complexity)]
pub fn replay_runs(
    v: &Violation,
) -> Result<((Config, Vec<StepOutcome>), (Config, Vec<StepOutcome>)), ReplayError> {
    let program = parse_program(&v.program_text)?;
    let actual = program_hash(&program);
    if actual != v.program_hash {
        return Err(ReplayError::HashMismatch {
            stored: v.program_hash.clone(),
            actual,
        });
    }
    let program = Arc::new(program);
    let base = Config::initial(program, &v.layout)?;
    let run = |a: &Assignment| {
        let init = a.apply(&base);
        let mut oracle = Oracle::scripted(v.oracle_class, v.script.clone());
        run_spec(&init, &v.layout, &mut oracle, v.steps, v.mode)
    };
    Ok((run(&v.init1), run(&v.init2)))
}

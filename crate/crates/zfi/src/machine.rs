//! Memory layouts, machine configurations, and the architectural step
//! relation.
//!
//! Memory is a total map over the w-bit address space (uninitialized
//! cells read as 0). Loads and stores whose resolved address falls on a
//! guard address do not fire: the machine reports a stuck outcome and
//! the configuration is unchanged.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::lang::{eval_expr, Expr, Instruction, Program, Register, Value, Width};

pub use crate::lang::RegisterFile;
use crate::leakage::{self, ObsTrace};
use crate::speculation::BtbHistory;

/// A contiguous, non-wrapping address range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub start: u32,
    pub size: u32,
}

impl Region {
    pub fn new(start: u32, size: u32) -> Region {
        Region { start, size }
    }

    pub fn contains(&self, addr: u32) -> bool {
        addr >= self.start && addr - self.start < self.size
    }

    pub fn end(&self) -> u32 {
        self.start + self.size
    }

    pub fn addresses(&self) -> impl Iterator<Item = u32> {
        self.start..self.end()
    }
}

/// Classification of an address under a layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RegionKind {
    Heap,
    Stack,
    Globals,
    JumpTable,
    SeparateStack,
    ShadowStack,
    Guard,
    Host,
}

#[derive(Debug, thiserror::Error)]
pub enum LayoutError {
    #[error("invalid width: {0}")]
    Width(#[from] crate::lang::WidthError),
    #[error("region {0} exceeds the address space")]
    OutOfRange(&'static str),
    #[error("heap size {0} is not a power of two")]
    HeapNotPowerOfTwo(u32),
    #[error("regions {0} and {1} overlap")]
    Overlap(&'static str, &'static str),
    #[error("guard address {0} collides with region {1}")]
    GuardCollision(u32, &'static str),
    #[error("layout file: {0}")]
    Toml(String),
    #[error("program declares a jump table but the layout has no jump_table region")]
    MissingJumpTable,
    #[error("jump table with {entries} entries does not fit the jump_table region of size {size}")]
    TableTooLarge { entries: usize, size: u32 },
}

/// Sandbox geometry: named regions plus a set of guard addresses.
/// Everything not covered by a region or a guard is host memory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemoryLayout {
    width: Width,
    heap: Region,
    stack: Option<Region>,
    globals: Option<Region>,
    jump_table: Option<Region>,
    separate_stack: Option<Region>,
    shadow_stack: Option<Region>,
    /// A guard range wide enough that a poisoned base register plus any
    /// masked offset still resolves to a guard address. Required by the
    /// CET lowering's register interlocks.
    interlock_guard: Option<Region>,
    guard: BTreeSet<u32>,
}

pub struct LayoutBuilder {
    width: Width,
    heap: Option<Region>,
    stack: Option<Region>,
    globals: Option<Region>,
    jump_table: Option<Region>,
    separate_stack: Option<Region>,
    shadow_stack: Option<Region>,
    interlock_guard: Option<Region>,
    auto_guards: bool,
    extra_guards: Vec<u32>,
}

impl LayoutBuilder {
    pub fn heap(mut self, start: u32, size: u32) -> Self {
        self.heap = Some(Region::new(start, size));
        self
    }

    pub fn stack(mut self, start: u32, size: u32) -> Self {
        self.stack = Some(Region::new(start, size));
        self
    }

    pub fn globals(mut self, start: u32, size: u32) -> Self {
        self.globals = Some(Region::new(start, size));
        self
    }

    pub fn jump_table(mut self, start: u32, size: u32) -> Self {
        self.jump_table = Some(Region::new(start, size));
        self
    }

    pub fn separate_stack(mut self, start: u32, size: u32) -> Self {
        self.separate_stack = Some(Region::new(start, size));
        self
    }

    pub fn shadow_stack(mut self, start: u32, size: u32) -> Self {
        self.shadow_stack = Some(Region::new(start, size));
        self
    }

    pub fn interlock_guard(mut self, start: u32, size: u32) -> Self {
        self.interlock_guard = Some(Region::new(start, size));
        self
    }

    pub fn no_auto_guards(mut self) -> Self {
        self.auto_guards = false;
        self
    }

    pub fn extra_guards(mut self, addrs: &[u32]) -> Self {
        self.extra_guards.extend_from_slice(addrs);
        self
    }

    pub fn build(self) -> Result<MemoryLayout, LayoutError> {
        let width = self.width;
        let space = width.domain_size();
        let heap = self.heap.ok_or(LayoutError::OutOfRange("heap"))?;

        let named: Vec<(&'static str, Option<Region>)> = vec![
            ("heap", Some(heap)),
            ("stack", self.stack),
            ("globals", self.globals),
            ("jump_table", self.jump_table),
            ("separate_stack", self.separate_stack),
            ("shadow_stack", self.shadow_stack),
            ("interlock_guard", self.interlock_guard),
        ];

        for (name, r) in &named {
            if let Some(r) = r {
                if r.size == 0 || r.end() > space {
                    return Err(LayoutError::OutOfRange(name));
                }
            }
        }
        if !heap.size.is_power_of_two() {
            return Err(LayoutError::HeapNotPowerOfTwo(heap.size));
        }
        for (i, (na, ra)) in named.iter().enumerate() {
            for (nb, rb) in named.iter().skip(i + 1) {
                if let (Some(a), Some(b)) = (ra, rb) {
                    if a.start < b.end() && b.start < a.end() {
                        return Err(LayoutError::Overlap(na, nb));
                    }
                }
            }
        }

        // Sandbox regions, excluding the interlock guard range (which is
        // guard space, not sandbox memory).
        let sandbox: Vec<(&'static str, Region)> = named
            .iter()
            .take(6)
            .filter_map(|(n, r)| r.map(|r| (*n, r)))
            .collect();

        let mut guard: BTreeSet<u32> = BTreeSet::new();
        if let Some(ig) = self.interlock_guard {
            guard.extend(ig.addresses());
        }
        guard.extend(self.extra_guards.iter().copied());
        if self.auto_guards {
            let wrap = |x: i64| x.rem_euclid(space as i64) as u32;
            for (_, r) in &sandbox {
                guard.insert(wrap(r.start as i64 - 1));
                guard.insert(wrap(r.end() as i64));
            }
        }
        for &g in &guard {
            if g >= space {
                return Err(LayoutError::OutOfRange("guard"));
            }
            for (name, r) in &sandbox {
                if r.contains(g) {
                    return Err(LayoutError::GuardCollision(g, name));
                }
            }
        }

        Ok(MemoryLayout {
            width,
            heap,
            stack: self.stack,
            globals: self.globals,
            jump_table: self.jump_table,
            separate_stack: self.separate_stack,
            shadow_stack: self.shadow_stack,
            interlock_guard: self.interlock_guard,
            guard,
        })
    }
}

/// On-disk layout description (TOML).
#[derive(Debug, Deserialize)]
struct LayoutFile {
    width: u8,
    regions: LayoutRegions,
    #[serde(default)]
    guards: LayoutGuards,
}

#[derive(Debug, Deserialize)]
struct LayoutRegions {
    heap: RegionSpec,
    stack: Option<RegionSpec>,
    globals: Option<RegionSpec>,
    jump_table: Option<RegionSpec>,
    separate_stack: Option<RegionSpec>,
    shadow_stack: Option<RegionSpec>,
    interlock_guard: Option<RegionSpec>,
}

#[derive(Debug, Deserialize)]
struct RegionSpec {
    start: u32,
    size: u32,
}

#[derive(Debug, Default, Deserialize)]
struct LayoutGuards {
    auto: Option<bool>,
    #[serde(default)]
    extra: Vec<u32>,
}

/// Serialized form of a layout (used in verdict reports).
#[derive(Serialize, Deserialize)]
struct LayoutMirror {
    width: u8,
    heap: Region,
    stack: Option<Region>,
    globals: Option<Region>,
    jump_table: Option<Region>,
    separate_stack: Option<Region>,
    shadow_stack: Option<Region>,
    interlock_guard: Option<Region>,
    guard: Vec<u32>,
}

impl Serialize for MemoryLayout {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> Result<S::Ok, S::Error> {
        LayoutMirror {
            width: self.width.bits(),
            heap: self.heap,
            stack: self.stack,
            globals: self.globals,
            jump_table: self.jump_table,
            separate_stack: self.separate_stack,
            shadow_stack: self.shadow_stack,
            interlock_guard: self.interlock_guard,
            guard: self.guard.iter().copied().collect(),
        }
        .serialize(ser)
    }
}

impl<'de> Deserialize<'de> for MemoryLayout {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        let m = LayoutMirror::deserialize(de)?;
        let width = Width::new(m.width).map_err(serde::de::Error::custom)?;
        Ok(MemoryLayout {
            width,
            heap: m.heap,
            stack: m.stack,
            globals: m.globals,
            jump_table: m.jump_table,
            separate_stack: m.separate_stack,
            shadow_stack: m.shadow_stack,
            interlock_guard: m.interlock_guard,
            guard: m.guard.into_iter().collect(),
        })
    }
}

impl MemoryLayout {
    pub fn builder(width: Width) -> LayoutBuilder {
        LayoutBuilder {
            width,
            heap: None,
            stack: None,
            globals: None,
            jump_table: None,
            separate_stack: None,
            shadow_stack: None,
            interlock_guard: None,
            auto_guards: true,
            extra_guards: Vec::new(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<MemoryLayout, LayoutError> {
        let file: LayoutFile =
            toml::from_str(text).map_err(|e| LayoutError::Toml(e.to_string()))?;
        let width = Width::new(file.width)?;
        let mut b = MemoryLayout::builder(width);
        let set = |r: &RegionSpec| (r.start, r.size);
        {
            let (s, z) = set(&file.regions.heap);
            b = b.heap(s, z);
        }
        if let Some(r) = &file.regions.stack {
            let (s, z) = set(r);
            b = b.stack(s, z);
        }
        if let Some(r) = &file.regions.globals {
            let (s, z) = set(r);
            b = b.globals(s, z);
        }
        if let Some(r) = &file.regions.jump_table {
            let (s, z) = set(r);
            b = b.jump_table(s, z);
        }
        if let Some(r) = &file.regions.separate_stack {
            let (s, z) = set(r);
            b = b.separate_stack(s, z);
        }
        if let Some(r) = &file.regions.shadow_stack {
            let (s, z) = set(r);
            b = b.shadow_stack(s, z);
        }
        if let Some(r) = &file.regions.interlock_guard {
            let (s, z) = set(r);
            b = b.interlock_guard(s, z);
        }
        if file.guards.auto == Some(false) {
            b = b.no_auto_guards();
        }
        b = b.extra_guards(&file.guards.extra);
        b.build()
    }

    pub fn width(&self) -> Width {
        self.width
    }

    pub fn heap(&self) -> Region {
        self.heap
    }

    pub fn heap_mask(&self) -> Value {
        Value(self.heap.size - 1)
    }

    pub fn stack(&self) -> Option<Region> {
        self.stack
    }

    pub fn globals(&self) -> Option<Region> {
        self.globals
    }

    pub fn jump_table(&self) -> Option<Region> {
        self.jump_table
    }

    pub fn separate_stack(&self) -> Option<Region> {
        self.separate_stack
    }

    pub fn shadow_stack(&self) -> Option<Region> {
        self.shadow_stack
    }

    pub fn interlock_guard(&self) -> Option<Region> {
        self.interlock_guard
    }

    pub fn is_guard(&self, addr: Value) -> bool {
        self.guard.contains(&addr.0)
    }

    pub fn guard_addresses(&self) -> impl Iterator<Item = u32> + '_ {
        self.guard.iter().copied()
    }

    /// Addresses belonging to any sandboxed memory region (heap, stack,
    /// globals, jump table, separate stack, shadow stack).
    pub fn sandbox_addresses(&self) -> Vec<u32> {
        let mut out = Vec::new();
        for r in [
            Some(self.heap),
            self.stack,
            self.globals,
            self.jump_table,
            self.separate_stack,
            self.shadow_stack,
        ]
        .into_iter()
        .flatten()
        {
            out.extend(r.addresses());
        }
        out.sort_unstable();
        out
    }

    pub fn classify(&self, addr: Value) -> RegionKind {
        let a = addr.0;
        if self.heap.contains(a) {
            RegionKind::Heap
        } else if self.stack.is_some_and(|r| r.contains(a)) {
            RegionKind::Stack
        } else if self.globals.is_some_and(|r| r.contains(a)) {
            RegionKind::Globals
        } else if self.jump_table.is_some_and(|r| r.contains(a)) {
            RegionKind::JumpTable
        } else if self.separate_stack.is_some_and(|r| r.contains(a)) {
            RegionKind::SeparateStack
        } else if self.shadow_stack.is_some_and(|r| r.contains(a)) {
            RegionKind::ShadowStack
        } else if self.guard.contains(&a) {
            RegionKind::Guard
        } else {
            RegionKind::Host
        }
    }

    pub fn is_host(&self, addr: Value) -> bool {
        self.classify(addr) == RegionKind::Host
    }
}

/// Data memory: total map from w-bit addresses to values, defaulting to
/// 0. Zero cells are never stored, so derived equality is semantic.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Memory {
    cells: BTreeMap<u32, Value>,
}

impl Memory {
    pub fn new() -> Memory {
        Memory::default()
    }

    pub fn read(&self, addr: Value) -> Value {
        self.cells.get(&addr.0).copied().unwrap_or(Value(0))
    }

    pub fn write(&mut self, addr: Value, v: Value) {
        if v.is_zero() {
            self.cells.remove(&addr.0);
        } else {
            self.cells.insert(addr.0, v);
        }
    }

    pub fn nonzero(&self) -> impl Iterator<Item = (u32, Value)> + '_ {
        self.cells.iter().map(|(&a, &v)| (a, v))
    }
}

/// Why a step did not fire.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StuckReason {
    /// The program counter points past the last mapped instruction.
    Halt,
    /// The program counter points to an unmapped address.
    UnmappedPc,
    /// A load or store resolved to a guard address.
    GuardAccess,
    /// A forward-edge transfer under CET semantics did not land on an
    /// `endbranch` instruction.
    CetEndbranchViolation,
    /// A return under CET semantics disagreed with the shadow stack.
    CetShadowMismatch,
}

/// Result of a single step: either a successor configuration or a stuck
/// outcome (in which case no configuration transition occurs).
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StepOutcome {
    Next(Config),
    Stuck(StuckReason),
}

impl StepOutcome {
    pub fn next(self) -> Option<Config> {
        match self {
            StepOutcome::Next(c) => Some(c),
            StepOutcome::Stuck(_) => None,
        }
    }

    pub fn stuck_reason(&self) -> Option<StuckReason> {
        match self {
            StepOutcome::Next(_) => None,
            StepOutcome::Stuck(r) => Some(*r),
        }
    }
}

/// A machine configuration: program, program counter, register file,
/// memory, accumulated observations, predictor state, and the
/// misprediction flag.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Config {
    pub program: Arc<Program>,
    pub width: Width,
    pub pc: Value,
    pub regs: RegisterFile,
    pub mem: Memory,
    pub obs: ObsTrace,
    pub mu_state: BtbHistory,
    pub mispredicted: bool,
}

impl Config {
    /// Boot configuration: pc at the program entry, registers and memory
    /// zeroed, and the program's declared jump table materialized into
    /// the jump-table region.
    pub fn initial(program: Arc<Program>, layout: &MemoryLayout) -> Result<Config, LayoutError> {
        let mut mem = Memory::new();
        if !program.table().is_empty() {
            let jt = layout.jump_table().ok_or(LayoutError::MissingJumpTable)?;
            let entries = program.table().len();
            if entries as u32 > jt.size {
                return Err(LayoutError::TableTooLarge {
                    entries,
                    size: jt.size,
                });
            }
            for (i, &target) in program.table().iter().enumerate() {
                mem.write(
                    Value(jt.start + i as u32),
                    layout.width().wrap(target as u64),
                );
            }
        }
        Ok(Config {
            pc: Value(program.entry()),
            program,
            width: layout.width(),
            regs: RegisterFile::new(),
            mem,
            obs: ObsTrace::default(),
            mu_state: BtbHistory::default(),
            mispredicted: false,
        })
    }

    pub fn current_instruction(&self) -> Option<&Instruction> {
        self.program.fetch(self.pc)
    }

    pub fn eval(&self, e: &Expr) -> Value {
        eval_expr(e, &self.regs, self.width)
    }

    /// pc + disp, wrapping.
    pub fn rel_target(&self, disp: i32) -> Value {
        self.width
            .wrap(self.pc.0 as u64 + self.width.wrap_signed(disp as i64).0 as u64)
    }

    pub fn next_pc(&self) -> Value {
        self.width.wrap(self.pc.0 as u64 + 1)
    }

    fn stuck_at_pc(&self) -> StepOutcome {
        if self.pc.0 == self.program.end_address() {
            StepOutcome::Stuck(StuckReason::Halt)
        } else {
            StepOutcome::Stuck(StuckReason::UnmappedPc)
        }
    }
}

/// One architectural step. Deterministic: exactly one rule applies to
/// the instruction under the program counter, or the machine is stuck.
pub fn arch_step(c: &Config, layout: &MemoryLayout) -> StepOutcome {
    let Some(insn) = c.current_instruction() else {
        return c.stuck_at_pc();
    };
    let mut n = c.clone();
    match insn {
        Instruction::Assign { dst, expr } => {
            let v = c.eval(expr);
            n.regs.set(*dst, v);
            n.pc = c.next_pc();
        }
        Instruction::Load { dst, base, offset } => {
            let addr = c
                .width
                .wrap(c.regs.get(*base).0 as u64 + c.eval(offset).0 as u64);
            if layout.is_guard(addr) {
                return StepOutcome::Stuck(StuckReason::GuardAccess);
            }
            n.regs.set(*dst, c.mem.read(addr));
            n.pc = c.next_pc();
        }
        Instruction::Store {
            base,
            offset,
            value,
        } => {
            let addr = c
                .width
                .wrap(c.regs.get(*base).0 as u64 + c.eval(offset).0 as u64);
            if layout.is_guard(addr) {
                return StepOutcome::Stuck(StuckReason::GuardAccess);
            }
            n.mem.write(addr, c.eval(value));
            n.pc = c.next_pc();
        }
        Instruction::Jump { disp } => {
            n.pc = c.rel_target(*disp);
        }
        Instruction::JumpIf { disp, cond } => {
            n.pc = if c.eval(cond).truthy() {
                c.rel_target(*disp)
            } else {
                c.next_pc()
            };
        }
        Instruction::JumpInd { reg } => {
            n.pc = c.regs.get(*reg);
        }
        Instruction::Call { .. } | Instruction::CallInd { .. } => {
            let target = match insn {
                Instruction::Call { disp } => c.rel_target(*disp),
                Instruction::CallInd { reg } => c.regs.get(*reg),
                _ => unreachable!(),
            };
            let v_stk = c
                .width
                .wrap(c.regs.get(Register::Stk).0 as u64 + c.width.mask() as u64);
            if layout.is_guard(v_stk) {
                return StepOutcome::Stuck(StuckReason::GuardAccess);
            }
            n.mem.write(v_stk, c.next_pc());
            n.regs.set(Register::Stk, v_stk);
            n.pc = target;
        }
        Instruction::Ret => {
            let v_stk = c.regs.get(Register::Stk);
            if layout.is_guard(v_stk) {
                return StepOutcome::Stuck(StuckReason::GuardAccess);
            }
            n.regs.set(Register::Stk, c.width.wrap(v_stk.0 as u64 + 1));
            n.pc = c.mem.read(v_stk);
        }
        // Architecturally these only advance the program counter; their
        // meaning lives in the speculative and CET relations.
        Instruction::Flush | Instruction::EndBranch => {
            n.pc = c.next_pc();
        }
    }
    StepOutcome::Next(n)
}

/// Iterate the architectural step with trace accumulation for up to `n`
/// steps or until stuck. Returns the final configuration and the
/// outcome of every attempted step (a trailing `Stuck` entry when the
/// run ended early).
pub fn run_arch(c: &Config, layout: &MemoryLayout, n: usize) -> (Config, Vec<StepOutcome>) {
    let mut cur = c.clone();
    let mut history = Vec::new();
    for _ in 0..n {
        let out = leakage::trace_arch_step(&cur, layout);
        match &out {
            StepOutcome::Next(next) => {
                cur = next.clone();
                history.push(out);
            }
            StepOutcome::Stuck(_) => {
                history.push(out);
                break;
            }
        }
    }
    (cur, history)
}

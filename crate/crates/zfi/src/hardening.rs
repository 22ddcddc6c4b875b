//! Program hardening passes.
//!
//! Three transformations over block-structured programs:
//!
//! - [`mask_heap_offsets`]: truncate heap and jump-table offsets to the
//!   region size so no sandbox access can resolve outside
//!   heap-plus-guards, even on a mispredicted path.
//! - [`lower_swivel_sfi`]: flush predictor state on entry, convert
//!   conditional jumps into target-select plus indirect jump, and move
//!   return addresses to a separate stack with its own pinned pointer
//!   register.
//! - [`lower_swivel_cet`]: place `endbranch` at the top of every linear
//!   block and a branch-free register interlock after it; block exits
//!   compute the successor's label so that any mispredicted entry
//!   poisons the memory base registers with a guard address.
//!
//! Input programs must satisfy the structural discipline the passes
//! assume: stack and global accesses use constant offsets, the heap
//! base register is never written or spilled, indirect transfers are
//! fed by jump-table loads, and pass-reserved registers are unused.
//! Violations are rejected, except that the SFI/CET lowerings downgrade
//! heap/stack pin violations to recorded warnings so that adversarial
//! programs can still be lowered and their hardened form checked.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::lang::{
    direct_target, split_linear_blocks, BinOp, Expr, Instruction, LinearBlock, Program, Register,
    Value, Width,
};
use crate::machine::MemoryLayout;

/// A unique per-block value, distinct from every code address.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct BlockLabel(pub Value);

/// Registers reserved by a lowering pass. They must not appear in the
/// source program.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InterlockRegisters {
    /// Holds the dynamically computed target-block label.
    pub label: Register,
    /// Scratch for computed transfer targets (SFI select, SFI return).
    pub scratch: Register,
    /// Pinned jump-table base for CET paired-table loads.
    pub table_base: Option<Register>,
}

#[derive(Debug, thiserror::Error)]
pub enum PassError {
    #[error("pin violation at address {addr}: {what}")]
    PinViolation { addr: u32, what: String },
    #[error("stack or global access at address {addr} uses a non-constant offset")]
    NonConstantStackOffset { addr: u32 },
    #[error("memory access at address {addr} uses an unsupported base register")]
    UnsupportedBase { addr: u32 },
    #[error("indirect transfer at address {addr} is not fed by a jump-table load")]
    UntracedIndirectTarget { addr: u32 },
    #[error("reserved register {reg} appears in the source program at address {addr}")]
    ReservedRegister { addr: u32, reg: String },
    #[error("no free general registers available for pass scratch")]
    NoScratchRegisters,
    #[error("lowered program needs {needed} addresses but the machine has {capacity}")]
    CodeOverflow { needed: u32, capacity: u32 },
    #[error("layout lacks a {0} region required by this pass")]
    MissingRegion(&'static str),
    #[error("jump_table region size {0} is not a power of two")]
    TableRegionNotPowerOfTwo(u32),
    #[error("jump table with {entries} entries does not fit the jump_table region of size {size}")]
    TableTooLarge { entries: usize, size: u32 },
    #[error("jump-table entry {index} ({addr}) is not a linear-block start")]
    TableEntryNotBlockStart { index: usize, addr: u32 },
    #[error("return site {addr} is targeted by a forward transfer")]
    ReturnSiteTargeted { addr: u32 },
    #[error("interlock_guard region of size {size} is too small (need {needed} for this program)")]
    InterlockGuardTooSmall { size: u32, needed: u32 },
}

/// Output of a pass: the transformed program plus a sidecar describing
/// block placement, labels, reserved registers, and the origin map used
/// for co-simulation.
#[derive(Debug, Clone)]
pub struct LoweredProgram {
    pub program: Program,
    pub block_map: BlockMap,
}

#[derive(Debug, Clone, Serialize)]
pub struct BlockInfo {
    pub source_start: u32,
    pub start: u32,
    pub len: u32,
    pub label: Option<u32>,
    pub ret_site: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct BlockMap {
    pub pass: String,
    pub entry: u32,
    pub blocks: Vec<BlockInfo>,
    pub reserved_registers: Vec<String>,
    /// Lowered address -> source address, for data memory operations
    /// via the heap, stack, and globals (transfer plumbing excluded).
    pub origins: BTreeMap<u32, u32>,
    /// Lowered block start -> source block start.
    pub block_entry_map: BTreeMap<u32, u32>,
    /// The guard address interlocks poison base registers with.
    pub poison_address: Option<u32>,
    pub warnings: Vec<String>,
}

/// How a validated memory instruction addresses storage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum MemClass {
    Heap,
    Stack,
    Globals,
    /// Load from the jump-table region via a block-local literal base.
    TableLoad,
}

struct Analysis {
    blocks: Vec<LinearBlock>,
    /// Source block start -> block index.
    block_index: BTreeMap<u32, usize>,
    /// Classification per memory-instruction address.
    mem_class: BTreeMap<u32, MemClass>,
    /// Fall-through addresses of calls.
    ret_sites: BTreeSet<u32>,
    used_gp: BTreeSet<u8>,
    max_stack_const: u32,
    uses_tables: bool,
    has_calls_or_rets: bool,
    warnings: Vec<String>,
}

fn expr_is_masked_with(e: &Expr, mask: Value) -> bool {
    matches!(e, Expr::Bin(BinOp::Mask, _, m) if **m == Expr::Lit(mask))
}

fn analyze(p: &Program, layout: &MemoryLayout, strict_pins: bool) -> Result<Analysis, PassError> {
    let width = layout.width();
    let blocks = split_linear_blocks(p, width);
    let block_index: BTreeMap<u32, usize> = blocks
        .iter()
        .enumerate()
        .map(|(i, b)| (b.start, i))
        .collect();

    let mut mem_class = BTreeMap::new();
    let mut ret_sites = BTreeSet::new();
    let mut used_gp = BTreeSet::new();
    let mut max_stack_const = 0u32;
    let mut warnings = Vec::new();
    let mut uses_tables = false;
    let mut has_calls_or_rets = false;

    fn pin(
        strict: bool,
        warnings: &mut Vec<String>,
        addr: u32,
        what: &str,
    ) -> Result<(), PassError> {
        if strict {
            Err(PassError::PinViolation {
                addr,
                what: what.to_string(),
            })
        } else {
            warnings.push(format!("pin violation at address {addr}: {what}"));
            Ok(())
        }
    }

    for (addr, insn) in p.iter() {
        for r in insn
            .read_registers()
            .into_iter()
            .chain(insn.written_registers())
        {
            match r {
                Register::Gp(n) => {
                    used_gp.insert(n);
                }
                Register::SStk | Register::SepStk => {
                    return Err(PassError::ReservedRegister {
                        addr,
                        reg: r.name(),
                    });
                }
                _ => {}
            }
        }
        if matches!(insn, Instruction::Call { .. } | Instruction::CallInd { .. }) {
            ret_sites.insert(width.wrap(addr as u64 + 1).0);
            has_calls_or_rets = true;
        }
        if matches!(insn, Instruction::Ret) {
            has_calls_or_rets = true;
        }
    }

    for block in &blocks {
        // Block-local literal definitions, for tracing table and global
        // base registers and indirect-jump operands.
        let mut literal_defs: BTreeMap<Register, u32> = BTreeMap::new();
        let mut table_loaded: BTreeSet<Register> = BTreeSet::new();

        for &addr in &block.addrs {
            let insn = p.fetch(Value(addr)).unwrap().clone();

            // Pin discipline: the heap base must never be written or
            // escape into memory or computation; the stack pointer moves
            // only through call/ret.
            match &insn {
                Instruction::Assign { dst, expr } => {
                    if *dst == Register::Heap {
                        pin(
                            strict_pins,
                            &mut warnings,
                            addr,
                            "heap base register is written",
                        )?;
                    }
                    if *dst == Register::Stk {
                        pin(
                            strict_pins,
                            &mut warnings,
                            addr,
                            "stack pointer is written directly",
                        )?;
                    }
                    if expr.registers().contains(&Register::Heap) {
                        pin(
                            strict_pins,
                            &mut warnings,
                            addr,
                            "heap base register used in computation",
                        )?;
                    }
                }
                Instruction::Load { dst, offset, .. } => {
                    if *dst == Register::Heap || *dst == Register::Stk {
                        pin(
                            strict_pins,
                            &mut warnings,
                            addr,
                            "pointer register is loaded into",
                        )?;
                    }
                    if offset.registers().contains(&Register::Heap) {
                        pin(
                            strict_pins,
                            &mut warnings,
                            addr,
                            "heap base register used in an offset",
                        )?;
                    }
                }
                Instruction::Store { offset, value, .. } => {
                    if value.registers().contains(&Register::Heap) {
                        pin(
                            strict_pins,
                            &mut warnings,
                            addr,
                            "heap base register is spilled",
                        )?;
                    }
                    if offset.registers().contains(&Register::Heap) {
                        pin(
                            strict_pins,
                            &mut warnings,
                            addr,
                            "heap base register used in an offset",
                        )?;
                    }
                }
                _ => {}
            }

            // Classify memory accesses.
            let mem_op: Option<(Register, Expr, bool)> = match &insn {
                Instruction::Load { base, offset, .. } => Some((*base, offset.clone(), true)),
                Instruction::Store { base, offset, .. } => Some((*base, offset.clone(), false)),
                _ => None,
            };
            if let Some((base, offset, is_load)) = mem_op {
                let class = match base {
                    Register::Heap => MemClass::Heap,
                    Register::Stk => {
                        let Expr::Lit(c) = offset else {
                            return Err(PassError::NonConstantStackOffset { addr });
                        };
                        max_stack_const = max_stack_const.max(c.0);
                        MemClass::Stack
                    }
                    Register::Gp(_) => {
                        let Some(&base_lit) = literal_defs.get(&base) else {
                            return Err(PassError::UnsupportedBase { addr });
                        };
                        let jt = layout.jump_table();
                        let gl = layout.globals();
                        if is_load && jt.is_some_and(|r| r.start == base_lit) {
                            uses_tables = true;
                            MemClass::TableLoad
                        } else if gl.is_some_and(|r| r.contains(base_lit)) {
                            if !offset.is_literal() {
                                return Err(PassError::NonConstantStackOffset { addr });
                            }
                            MemClass::Globals
                        } else {
                            return Err(PassError::UnsupportedBase { addr });
                        }
                    }
                    Register::SStk | Register::SepStk => {
                        return Err(PassError::ReservedRegister {
                            addr,
                            reg: base.name(),
                        })
                    }
                };
                mem_class.insert(addr, class);
            }

            // Track literal defs and table-load feeding for the
            // indirect-terminator check.
            match &insn {
                Instruction::Assign { dst, expr } => {
                    table_loaded.remove(dst);
                    match expr {
                        Expr::Lit(v) => {
                            literal_defs.insert(*dst, v.0);
                        }
                        _ => {
                            literal_defs.remove(dst);
                        }
                    }
                }
                Instruction::Load { dst, .. } => {
                    literal_defs.remove(dst);
                    if mem_class.get(&addr) == Some(&MemClass::TableLoad) {
                        table_loaded.insert(*dst);
                    } else {
                        table_loaded.remove(dst);
                    }
                }
                Instruction::JumpInd { reg } | Instruction::CallInd { reg }
                    if !table_loaded.contains(reg) =>
                {
                    return Err(PassError::UntracedIndirectTarget { addr });
                }
                _ => {}
            }
        }
    }

    // Declared table entries must be block starts.
    for (index, &t) in p.table().iter().enumerate() {
        if !block_index.contains_key(&t) {
            return Err(PassError::TableEntryNotBlockStart { index, addr: t });
        }
    }

    Ok(Analysis {
        blocks,
        block_index,
        mem_class,
        ret_sites,
        used_gp,
        max_stack_const,
        uses_tables,
        has_calls_or_rets,
        warnings,
    })
}

/// Replace every heap offset with `offset mask heap_mask` and every
/// jump-table load offset with `offset mask table_mask`. Stack and
/// global accesses keep their constant offsets. Program addresses are
/// unchanged.
pub fn mask_heap_offsets(p: &Program, layout: &MemoryLayout) -> Result<LoweredProgram, PassError> {
    let analysis = analyze(p, layout, true)?;
    let tmask = table_mask(p, layout, &analysis)?;

    let mut out = Program::new(p.entry());
    out.set_table(p.table().to_vec());
    let mut origins = BTreeMap::new();
    for (addr, insn) in p.iter() {
        let masked = match (analysis.mem_class.get(&addr), insn) {
            (Some(MemClass::Heap), Instruction::Load { dst, base, offset }) => Instruction::Load {
                dst: *dst,
                base: *base,
                offset: mask_expr(offset, layout.heap_mask()),
            },
            (
                Some(MemClass::Heap),
                Instruction::Store {
                    base,
                    offset,
                    value,
                },
            ) => Instruction::Store {
                base: *base,
                offset: mask_expr(offset, layout.heap_mask()),
                value: value.clone(),
            },
            (Some(MemClass::TableLoad), Instruction::Load { dst, base, offset }) => {
                Instruction::Load {
                    dst: *dst,
                    base: *base,
                    offset: mask_expr(offset, tmask.unwrap()),
                }
            }
            _ => insn.clone(),
        };
        if matches!(
            analysis.mem_class.get(&addr),
            Some(MemClass::Heap | MemClass::Stack | MemClass::Globals)
        ) {
            origins.insert(addr, addr);
        }
        out.insert(addr, masked);
    }

    let blocks = analysis
        .blocks
        .iter()
        .map(|b| BlockInfo {
            source_start: b.start,
            start: b.start,
            len: b.len() as u32,
            label: None,
            ret_site: analysis.ret_sites.contains(&b.start),
        })
        .collect();
    let block_entry_map = analysis.blocks.iter().map(|b| (b.start, b.start)).collect();

    Ok(LoweredProgram {
        program: out,
        block_map: BlockMap {
            pass: "mask".into(),
            entry: p.entry(),
            blocks,
            reserved_registers: Vec::new(),
            origins,
            block_entry_map,
            poison_address: None,
            warnings: analysis.warnings,
        },
    })
}

fn mask_expr(offset: &Expr, mask: Value) -> Expr {
    if expr_is_masked_with(offset, mask) {
        offset.clone()
    } else {
        Expr::bin(BinOp::Mask, offset.clone(), Expr::Lit(mask))
    }
}

fn table_mask(
    p: &Program,
    layout: &MemoryLayout,
    analysis: &Analysis,
) -> Result<Option<Value>, PassError> {
    if !analysis.uses_tables && p.table().is_empty() {
        return Ok(None);
    }
    let jt = layout
        .jump_table()
        .ok_or(PassError::MissingRegion("jump_table"))?;
    if !jt.size.is_power_of_two() {
        return Err(PassError::TableRegionNotPowerOfTwo(jt.size));
    }
    Ok(Some(Value(jt.size - 1)))
}

fn pick_scratch(used: &BTreeSet<u8>, count: usize) -> Result<Vec<Register>, PassError> {
    let mut out = Vec::new();
    for n in (0..32u8).rev() {
        if !used.contains(&n) {
            out.push(Register::Gp(n));
            if out.len() == count {
                return Ok(out);
            }
        }
    }
    Err(PassError::NoScratchRegisters)
}

/// `select(cond, a, b)` as `(m & a) | ((m ^ ones) & b)` with
/// `m = 0 - (cond != 0)`, expressed with existing operators so the
/// lowering adds no control flow.
fn select_expr(width: Width, cond: &Expr, a: Expr, b: Expr) -> Expr {
    let ones = Expr::Lit(Value(width.mask()));
    let m = Expr::bin(
        BinOp::Sub,
        Expr::lit(0),
        Expr::bin(BinOp::Ne, cond.clone(), Expr::lit(0)),
    );
    Expr::bin(
        BinOp::Or,
        Expr::bin(BinOp::And, m.clone(), a),
        Expr::bin(BinOp::And, Expr::bin(BinOp::Xor, m, ones), b),
    )
}

/// Interlock poison: `r := (m & guard) | ((m ^ ones) & r)` with
/// `m = 0 - (rLabel != label)`. Identity when the label matches,
/// otherwise `r` becomes the guard address.
fn interlock_assign(
    width: Width,
    label_reg: Register,
    label: BlockLabel,
    poison: Value,
    target: Register,
) -> Instruction {
    let ones = Expr::Lit(Value(width.mask()));
    let m = Expr::bin(
        BinOp::Sub,
        Expr::lit(0),
        Expr::bin(BinOp::Ne, Expr::reg(label_reg), Expr::Lit(label.0)),
    );
    Instruction::Assign {
        dst: target,
        expr: Expr::bin(
            BinOp::Or,
            Expr::bin(BinOp::And, m.clone(), Expr::Lit(poison)),
            Expr::bin(
                BinOp::And,
                Expr::bin(BinOp::Xor, m, ones),
                Expr::reg(target),
            ),
        ),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PassKind {
    Sfi,
    Cet,
}

/// Where an emitted instruction came from, for the origin map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Origin {
    /// Visible data operation rewritten 1:1 from this source address.
    Data(u32),
    /// Transfer or pass plumbing.
    Plumbing,
}

struct Emitter {
    insns: Vec<(Instruction, Origin)>,
}

impl Emitter {
    fn push(&mut self, insn: Instruction, origin: Origin) {
        self.insns.push((insn, origin));
    }
}

/// Swivel-SFI lowering: entry flush, conditionals as select plus
/// indirect jump, returns through a separate stack, offsets masked.
pub fn lower_swivel_sfi(p: &Program, layout: &MemoryLayout) -> Result<LoweredProgram, PassError> {
    lower(p, layout, PassKind::Sfi)
}

/// Swivel-CET lowering: endbranch placement, register interlocks, and
/// paired jump-table entries (target address next to target label).
pub fn lower_swivel_cet(p: &Program, layout: &MemoryLayout) -> Result<LoweredProgram, PassError> {
    lower(p, layout, PassKind::Cet)
}

fn lower(p: &Program, layout: &MemoryLayout, kind: PassKind) -> Result<LoweredProgram, PassError> {
    let width = layout.width();
    let analysis = analyze(p, layout, false)?;
    let tmask = table_mask(p, layout, &analysis)?;

    if kind == PassKind::Cet {
        // Return sites are protected by the shadow stack, not by
        // interlocks; nothing else may transfer to them.
        for block in &analysis.blocks {
            if let Some(term) = block.terminator {
                let insn = p.fetch(Value(term)).unwrap();
                if matches!(insn, Instruction::Call { .. }) {
                    continue;
                }
                if let Some(t) = direct_target(width, term, insn) {
                    if analysis.ret_sites.contains(&t) {
                        return Err(PassError::ReturnSiteTargeted { addr: t });
                    }
                }
                if let Instruction::JumpIf { .. } = insn {
                    let fall = width.wrap(term as u64 + 1).0;
                    if analysis.ret_sites.contains(&fall) {
                        return Err(PassError::ReturnSiteTargeted { addr: fall });
                    }
                }
            }
        }
        for &t in p.table() {
            if analysis.ret_sites.contains(&t) {
                return Err(PassError::ReturnSiteTargeted { addr: t });
            }
        }
        if analysis.ret_sites.contains(&p.entry()) {
            return Err(PassError::ReturnSiteTargeted { addr: p.entry() });
        }
    }

    let scratch = pick_scratch(&analysis.used_gp, 3)?;
    let regs = InterlockRegisters {
        scratch: scratch[0],
        label: scratch[1],
        table_base: (kind == PassKind::Cet && analysis.uses_tables).then(|| scratch[2]),
    };

    if kind == PassKind::Sfi && analysis.has_calls_or_rets && layout.separate_stack().is_none() {
        return Err(PassError::MissingRegion("separate_stack"));
    }
    if kind == PassKind::Cet && analysis.has_calls_or_rets && layout.shadow_stack().is_none() {
        return Err(PassError::MissingRegion("shadow_stack"));
    }

    // CET interlocks need a poison address G such that everything a
    // poisoned register can reach stays on guard addresses: G-1 for a
    // call push through the poisoned stack pointer, G+heap_mask for
    // masked heap offsets, G+c for source stack constants, and
    // G+table_mask for table loads through the pinned base.
    let poison = if kind == PassKind::Cet {
        let ig = layout
            .interlock_guard()
            .ok_or(PassError::MissingRegion("interlock_guard"))?;
        let mut reach = layout.heap_mask().0.max(analysis.max_stack_const);
        if let Some(m) = tmask {
            reach = reach.max(m.0);
        }
        let needed = reach + 2;
        if ig.size < needed {
            return Err(PassError::InterlockGuardTooSmall {
                size: ig.size,
                needed,
            });
        }
        Some(Value(ig.start + 1))
    } else {
        None
    };

    // Sizing pass: per-block lowered lengths, in source order.
    let is_ret_site = |b: &LinearBlock| analysis.ret_sites.contains(&b.start);
    let preamble_len = match kind {
        PassKind::Sfi => 2 + analysis.has_calls_or_rets as u32,
        PassKind::Cet => 2 + regs.table_base.is_some() as u32 + analysis.has_calls_or_rets as u32,
    };
    let mut block_lens = Vec::new();
    for (idx, block) in analysis.blocks.iter().enumerate() {
        let mut len = 0u32;
        if kind == PassKind::Cet {
            len += 1; // endbranch
            if !is_ret_site(block) {
                len += 2 + regs.table_base.is_some() as u32; // interlock
            }
        }
        for &addr in &block.addrs {
            if Some(addr) == block.terminator {
                continue;
            }
            let cet_table_load = kind == PassKind::Cet
                && analysis.mem_class.get(&addr) == Some(&MemClass::TableLoad);
            len += if cet_table_load { 2 } else { 1 };
        }
        match block.terminator.map(|t| p.fetch(Value(t)).unwrap()) {
            None => {
                if kind == PassKind::Cet && falls_into_next(&analysis, idx) {
                    len += 1; // fall-through label assignment
                }
            }
            Some(Instruction::Jump { .. }) => len += if kind == PassKind::Cet { 2 } else { 1 },
            Some(Instruction::JumpIf { .. }) => len += 2,
            Some(Instruction::JumpInd { .. }) => len += 1,
            Some(Instruction::Call { .. }) => {
                len += match kind {
                    PassKind::Sfi => 4,
                    PassKind::Cet => 2,
                }
            }
            Some(Instruction::CallInd { .. }) => {
                len += match kind {
                    PassKind::Sfi => 4,
                    PassKind::Cet => 1,
                }
            }
            Some(Instruction::Ret) => {
                len += match kind {
                    PassKind::Sfi => 4,
                    PassKind::Cet => 1,
                }
            }
            Some(_) => unreachable!("terminator is control flow"),
        }
        block_lens.push(len);
    }

    let code_len: u32 = preamble_len + block_lens.iter().sum::<u32>();
    let capacity = width.domain_size();
    if code_len > capacity {
        return Err(PassError::CodeOverflow {
            needed: code_len,
            capacity,
        });
    }

    // Labels are consecutive values just past the code, so no label is
    // a valid code address. Transfers that leave the program get the
    // halt label (code_len itself).
    let nblocks = analysis.blocks.len() as u32;
    if kind == PassKind::Cet && code_len + 1 + nblocks > capacity {
        return Err(PassError::CodeOverflow {
            needed: code_len + 1 + nblocks,
            capacity,
        });
    }
    let halt_label = BlockLabel(Value(code_len));
    let label_of = |idx: usize| BlockLabel(Value(code_len + 1 + idx as u32));

    let mut starts = Vec::with_capacity(analysis.blocks.len());
    let mut cursor = preamble_len;
    for len in &block_lens {
        starts.push(cursor);
        cursor += len;
    }

    let resolve = |t: u32| -> u32 {
        match analysis.block_index.get(&t) {
            Some(&i) => starts[i],
            None => code_len, // leaving the program halts either way
        }
    };
    let resolve_label = |t: u32| -> BlockLabel {
        match analysis.block_index.get(&t) {
            Some(&i) => label_of(i),
            None => halt_label,
        }
    };

    let heap_mask = layout.heap_mask();
    let mut em = Emitter { insns: Vec::new() };

    // Preamble.
    match kind {
        PassKind::Sfi => {
            em.push(Instruction::Flush, Origin::Plumbing);
            if analysis.has_calls_or_rets {
                let top = layout.separate_stack().unwrap().end();
                em.push(
                    Instruction::Assign {
                        dst: Register::SepStk,
                        expr: Expr::lit(top),
                    },
                    Origin::Plumbing,
                );
            }
        }
        PassKind::Cet => {
            let entry_idx = analysis.block_index[&p.entry()];
            em.push(
                Instruction::Assign {
                    dst: regs.label,
                    expr: Expr::Lit(label_of(entry_idx).0),
                },
                Origin::Plumbing,
            );
            if let Some(tb) = regs.table_base {
                let jt = layout.jump_table().unwrap();
                em.push(
                    Instruction::Assign {
                        dst: tb,
                        expr: Expr::lit(jt.start),
                    },
                    Origin::Plumbing,
                );
            }
            if analysis.has_calls_or_rets {
                let top = layout.shadow_stack().unwrap().end();
                em.push(
                    Instruction::Assign {
                        dst: Register::SStk,
                        expr: Expr::lit(top),
                    },
                    Origin::Plumbing,
                );
            }
        }
    }
    {
        let jump_pc = em.insns.len() as i64;
        let disp = resolve(p.entry()) as i64 - jump_pc;
        em.push(Instruction::Jump { disp: disp as i32 }, Origin::Plumbing);
    }
    debug_assert_eq!(em.insns.len() as u32, preamble_len);

    // Blocks, in source order (preserves fall-through adjacency).
    for (idx, block) in analysis.blocks.iter().enumerate() {
        debug_assert_eq!(em.insns.len() as u32, starts[idx]);
        if kind == PassKind::Cet {
            em.push(Instruction::EndBranch, Origin::Plumbing);
            if !is_ret_site(block) {
                let pg = poison.unwrap();
                for target in [Register::Heap, Register::Stk]
                    .into_iter()
                    .chain(regs.table_base)
                {
                    em.push(
                        interlock_assign(width, regs.label, label_of(idx), pg, target),
                        Origin::Plumbing,
                    );
                }
            }
        }

        for &addr in &block.addrs {
            if Some(addr) == block.terminator {
                continue;
            }
            let insn = p.fetch(Value(addr)).unwrap().clone();
            match (analysis.mem_class.get(&addr).copied(), insn) {
                (Some(MemClass::Heap), Instruction::Load { dst, base, offset }) => em.push(
                    Instruction::Load {
                        dst,
                        base,
                        offset: mask_expr(&offset, heap_mask),
                    },
                    Origin::Data(addr),
                ),
                (
                    Some(MemClass::Heap),
                    Instruction::Store {
                        base,
                        offset,
                        value,
                    },
                ) => em.push(
                    Instruction::Store {
                        base,
                        offset: mask_expr(&offset, heap_mask),
                        value,
                    },
                    Origin::Data(addr),
                ),
                (Some(MemClass::TableLoad), Instruction::Load { dst, base, offset }) => {
                    let m = tmask.unwrap();
                    match kind {
                        PassKind::Sfi => em.push(
                            Instruction::Load {
                                dst,
                                base,
                                offset: mask_expr(&offset, m),
                            },
                            Origin::Plumbing,
                        ),
                        PassKind::Cet => {
                            // Paired entries: address at 2i, label at
                            // 2i+1, both through the pinned base so a
                            // fired interlock also kills table loads.
                            let cell =
                                mask_expr(&Expr::bin(BinOp::Shl, offset.clone(), Expr::lit(1)), m);
                            let tb = regs.table_base.unwrap();
                            em.push(
                                Instruction::Load {
                                    dst: regs.label,
                                    base: tb,
                                    offset: Expr::bin(BinOp::Add, cell.clone(), Expr::lit(1)),
                                },
                                Origin::Plumbing,
                            );
                            em.push(
                                Instruction::Load {
                                    dst,
                                    base: tb,
                                    offset: cell,
                                },
                                Origin::Plumbing,
                            );
                        }
                    }
                }
                (Some(MemClass::Stack | MemClass::Globals), insn) => {
                    em.push(insn, Origin::Data(addr))
                }
                (_, insn) => em.push(insn, Origin::Plumbing),
            }
        }

        let term = block
            .terminator
            .map(|t| (t, p.fetch(Value(t)).unwrap().clone()));
        match kind {
            PassKind::Sfi => {
                if let Some((taddr, insn)) = term {
                    emit_sfi_terminator(&mut em, width, taddr, insn, &regs, &resolve);
                }
            }
            PassKind::Cet => match term {
                None => {
                    if falls_into_next(&analysis, idx) {
                        let next = analysis.blocks[idx + 1].start;
                        em.push(
                            Instruction::Assign {
                                dst: regs.label,
                                expr: Expr::Lit(resolve_label(next).0),
                            },
                            Origin::Plumbing,
                        );
                    }
                }
                Some((taddr, insn)) => {
                    emit_cet_terminator(
                        &mut em,
                        width,
                        taddr,
                        insn,
                        &regs,
                        &resolve,
                        &resolve_label,
                    );
                }
            },
        }
    }

    debug_assert_eq!(em.insns.len() as u32, code_len);

    let mut out = Program::new(0);
    let mut origins = BTreeMap::new();
    for (addr, (insn, origin)) in em.insns.into_iter().enumerate() {
        if let Origin::Data(src) = origin {
            origins.insert(addr as u32, src);
        }
        out.insert(addr as u32, insn);
    }

    // Rewrite the declared table: relocated targets, paired with labels
    // under CET.
    if !p.table().is_empty() {
        let jt = layout.jump_table().unwrap();
        let mut table = Vec::new();
        for &t in p.table() {
            let idx = analysis.block_index[&t];
            table.push(starts[idx]);
            if kind == PassKind::Cet {
                table.push(label_of(idx).0 .0);
            }
        }
        if table.len() as u32 > jt.size {
            return Err(PassError::TableTooLarge {
                entries: table.len(),
                size: jt.size,
            });
        }
        out.set_table(table);
    }

    let block_infos: Vec<BlockInfo> = analysis
        .blocks
        .iter()
        .enumerate()
        .map(|(i, b)| BlockInfo {
            source_start: b.start,
            start: starts[i],
            len: block_lens[i],
            label: (kind == PassKind::Cet).then(|| label_of(i).0 .0),
            ret_site: is_ret_site(b),
        })
        .collect();
    let block_entry_map = block_infos
        .iter()
        .map(|b| (b.start, b.source_start))
        .collect();

    let mut reserved: Vec<String> = vec![regs.scratch.name(), regs.label.name()];
    if let Some(tb) = regs.table_base {
        reserved.push(tb.name());
    }
    reserved.push(match kind {
        PassKind::Sfi => Register::SepStk.name(),
        PassKind::Cet => Register::SStk.name(),
    });

    Ok(LoweredProgram {
        program: out,
        block_map: BlockMap {
            pass: match kind {
                PassKind::Sfi => "sfi".into(),
                PassKind::Cet => "cet".into(),
            },
            entry: 0,
            blocks: block_infos,
            reserved_registers: reserved,
            origins,
            block_entry_map,
            poison_address: poison.map(|v| v.0),
            warnings: analysis.warnings,
        },
    })
}

fn falls_into_next(analysis: &Analysis, idx: usize) -> bool {
    let block = &analysis.blocks[idx];
    match analysis.blocks.get(idx + 1) {
        Some(next) => *block.addrs.last().unwrap() + 1 == next.start,
        None => false,
    }
}

fn emit_sfi_terminator(
    em: &mut Emitter,
    width: Width,
    taddr: u32,
    insn: Instruction,
    regs: &InterlockRegisters,
    resolve: &dyn Fn(u32) -> u32,
) {
    match insn {
        Instruction::Jump { disp } => {
            let target = width
                .wrap(taddr as u64 + width.wrap_signed(disp as i64).0 as u64)
                .0;
            let pc = em.insns.len() as i64;
            em.push(
                Instruction::Jump {
                    disp: (resolve(target) as i64 - pc) as i32,
                },
                Origin::Plumbing,
            );
        }
        Instruction::JumpIf { disp, cond } => {
            let taken = width
                .wrap(taddr as u64 + width.wrap_signed(disp as i64).0 as u64)
                .0;
            let fall = width.wrap(taddr as u64 + 1).0;
            em.push(
                Instruction::Assign {
                    dst: regs.scratch,
                    expr: select_expr(
                        width,
                        &cond,
                        Expr::lit(resolve(taken)),
                        Expr::lit(resolve(fall)),
                    ),
                },
                Origin::Plumbing,
            );
            em.push(Instruction::JumpInd { reg: regs.scratch }, Origin::Plumbing);
        }
        Instruction::JumpInd { reg } => {
            em.push(Instruction::JumpInd { reg }, Origin::Plumbing);
        }
        Instruction::Call { .. } | Instruction::CallInd { .. } => {
            let ret_site = resolve(width.wrap(taddr as u64 + 1).0);
            // Return address to the separate stack; the regular stack
            // pointer still moves so callee frames line up with the
            // source program.
            em.push(
                Instruction::Store {
                    base: Register::SepStk,
                    offset: Expr::Lit(width.wrap_signed(-1)),
                    value: Expr::lit(ret_site),
                },
                Origin::Plumbing,
            );
            em.push(
                Instruction::Assign {
                    dst: Register::SepStk,
                    expr: Expr::bin(BinOp::Sub, Expr::reg(Register::SepStk), Expr::lit(1)),
                },
                Origin::Plumbing,
            );
            em.push(
                Instruction::Assign {
                    dst: Register::Stk,
                    expr: Expr::bin(BinOp::Sub, Expr::reg(Register::Stk), Expr::lit(1)),
                },
                Origin::Plumbing,
            );
            match insn {
                Instruction::Call { disp } => {
                    let target = width
                        .wrap(taddr as u64 + width.wrap_signed(disp as i64).0 as u64)
                        .0;
                    let pc = em.insns.len() as i64;
                    em.push(
                        Instruction::Jump {
                            disp: (resolve(target) as i64 - pc) as i32,
                        },
                        Origin::Plumbing,
                    );
                }
                Instruction::CallInd { reg } => {
                    em.push(Instruction::JumpInd { reg }, Origin::Plumbing);
                }
                _ => unreachable!(),
            }
        }
        Instruction::Ret => {
            em.push(
                Instruction::Load {
                    dst: regs.scratch,
                    base: Register::SepStk,
                    offset: Expr::lit(0),
                },
                Origin::Plumbing,
            );
            em.push(
                Instruction::Assign {
                    dst: Register::SepStk,
                    expr: Expr::bin(BinOp::Add, Expr::reg(Register::SepStk), Expr::lit(1)),
                },
                Origin::Plumbing,
            );
            em.push(
                Instruction::Assign {
                    dst: Register::Stk,
                    expr: Expr::bin(BinOp::Add, Expr::reg(Register::Stk), Expr::lit(1)),
                },
                Origin::Plumbing,
            );
            em.push(Instruction::JumpInd { reg: regs.scratch }, Origin::Plumbing);
        }
        _ => unreachable!("terminator is control flow"),
    }
}

fn emit_cet_terminator(
    em: &mut Emitter,
    width: Width,
    taddr: u32,
    insn: Instruction,
    regs: &InterlockRegisters,
    resolve: &dyn Fn(u32) -> u32,
    resolve_label: &dyn Fn(u32) -> BlockLabel,
) {
    match insn {
        Instruction::Jump { disp } => {
            let target = width
                .wrap(taddr as u64 + width.wrap_signed(disp as i64).0 as u64)
                .0;
            em.push(
                Instruction::Assign {
                    dst: regs.label,
                    expr: Expr::Lit(resolve_label(target).0),
                },
                Origin::Plumbing,
            );
            let pc = em.insns.len() as i64;
            em.push(
                Instruction::Jump {
                    disp: (resolve(target) as i64 - pc) as i32,
                },
                Origin::Plumbing,
            );
        }
        Instruction::JumpIf { disp, cond } => {
            let taken = width
                .wrap(taddr as u64 + width.wrap_signed(disp as i64).0 as u64)
                .0;
            let fall = width.wrap(taddr as u64 + 1).0;
            // The label select mirrors the address select.
            em.push(
                Instruction::Assign {
                    dst: regs.label,
                    expr: select_expr(
                        width,
                        &cond,
                        Expr::Lit(resolve_label(taken).0),
                        Expr::Lit(resolve_label(fall).0),
                    ),
                },
                Origin::Plumbing,
            );
            let pc = em.insns.len() as i64;
            em.push(
                Instruction::JumpIf {
                    disp: (resolve(taken) as i64 - pc) as i32,
                    cond,
                },
                Origin::Plumbing,
            );
        }
        Instruction::JumpInd { reg } => {
            // Label was loaded alongside the table entry.
            em.push(Instruction::JumpInd { reg }, Origin::Plumbing);
        }
        Instruction::Call { disp } => {
            let target = width
                .wrap(taddr as u64 + width.wrap_signed(disp as i64).0 as u64)
                .0;
            em.push(
                Instruction::Assign {
                    dst: regs.label,
                    expr: Expr::Lit(resolve_label(target).0),
                },
                Origin::Plumbing,
            );
            let pc = em.insns.len() as i64;
            em.push(
                Instruction::Call {
                    disp: (resolve(target) as i64 - pc) as i32,
                },
                Origin::Plumbing,
            );
        }
        Instruction::CallInd { reg } => {
            em.push(Instruction::CallInd { reg }, Origin::Plumbing);
        }
        Instruction::Ret => {
            // Backward edges are shadow-stack protected; the return
            // site carries no interlock to satisfy.
            em.push(Instruction::Ret, Origin::Plumbing);
        }
        _ => unreachable!("terminator is control flow"),
    }
}

#[cfg(test)]
fn instruction_line(p: &Program, addr: u32) -> String {
    crate::lang::render_program(p)
        .lines()
        .find(|l| l.starts_with(&format!("{addr}: ")))
        .unwrap_or_default()
        .to_string()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lang::{parse_program, render_program};
    use crate::machine::{run_arch, Config};
    use std::sync::Arc;

    fn w4() -> MemoryLayout {
        MemoryLayout::builder(Width::new(4).unwrap())
            .heap(0, 8)
            .stack(10, 3)
            .build()
            .unwrap()
    }

    fn w5_cet() -> MemoryLayout {
        MemoryLayout::builder(Width::new(5).unwrap())
            .heap(0, 8)
            .interlock_guard(9, 10)
            .build()
            .unwrap()
    }

    #[test]
    fn mask_wraps_heap_offsets() {
        let p = parse_program("0: r1 := [rHeap + r2]").unwrap();
        let lowered = mask_heap_offsets(&p, &w4()).unwrap();
        let expect = parse_program("0: r1 := [rHeap + (r2 mask 7)]").unwrap();
        assert_eq!(lowered.program, expect);
    }

    #[test]
    fn mask_leaves_constant_stack_offsets() {
        let p = parse_program("0: r1 := [rStk + 2]").unwrap();
        let lowered = mask_heap_offsets(&p, &w4()).unwrap();
        assert_eq!(lowered.program, p);
    }

    #[test]
    fn mask_rejects_heap_base_write() {
        let p = parse_program("0: rHeap := r1").unwrap();
        assert!(matches!(
            mask_heap_offsets(&p, &w4()),
            Err(PassError::PinViolation { .. })
        ));
    }

    #[test]
    fn mask_rejects_heap_base_spill() {
        let p = parse_program("0: [rStk + 4] := rHeap").unwrap();
        assert!(matches!(
            mask_heap_offsets(&p, &w4()),
            Err(PassError::PinViolation { .. })
        ));
    }

    #[test]
    fn mask_is_idempotent() {
        let p = parse_program("0: r1 := [rHeap + (r2 mask 7)]").unwrap();
        let lowered = mask_heap_offsets(&p, &w4()).unwrap();
        assert_eq!(lowered.program, p);
    }

    #[test]
    fn mask_rejects_nonconstant_stack_offset() {
        let p = parse_program("0: r1 := [rStk + r2]").unwrap();
        assert!(matches!(
            mask_heap_offsets(&p, &w4()),
            Err(PassError::NonConstantStackOffset { addr: 0 })
        ));
    }

    #[test]
    fn sfi_output_begins_with_flush() {
        let p = parse_program("0: jmp +2 if r1\n1: r2 := 1\n2: r3 := 2").unwrap();
        let lowered = lower_swivel_sfi(&p, &w4()).unwrap();
        assert_eq!(lowered.program.fetch(Value(0)), Some(&Instruction::Flush));
    }

    #[test]
    fn sfi_conditional_becomes_select_plus_indirect() {
        let p = parse_program("0: jmp +2 if r1\n1: r2 := 1\n2: r3 := 2").unwrap();
        let lowered = lower_swivel_sfi(&p, &w4()).unwrap();
        let text = render_program(&lowered.program);
        let scratch = &lowered.block_map.reserved_registers[0];
        assert!(text.contains(&format!("jmp {scratch}")), "{text}");
        for (_, insn) in lowered.program.iter() {
            assert!(!matches!(insn, Instruction::JumpIf { .. }));
        }
    }

    #[test]
    fn sfi_ret_pops_separate_stack_and_jumps_indirect() {
        let l = MemoryLayout::builder(Width::new(5).unwrap())
            .heap(0, 8)
            .stack(10, 3)
            .separate_stack(16, 4)
            .build()
            .unwrap();
        let p = parse_program("0: call +2\n1: r1 := 1\n2: ret").unwrap();
        let lowered = lower_swivel_sfi(&p, &l).unwrap();
        let text = render_program(&lowered.program);
        assert!(text.contains("rSepStk := rSepStk + 1"), "{text}");
        assert!(text.contains(":= [rSepStk + 0]"), "{text}");
        for (_, insn) in lowered.program.iter() {
            assert!(!matches!(
                insn,
                Instruction::Ret | Instruction::Call { .. } | Instruction::CallInd { .. }
            ));
        }
    }

    #[test]
    fn sfi_keeps_trivial_direct_jump() {
        let p = parse_program("0: r1 := 1\n1: jmp +2\n2: r2 := 2\n3: r3 := 3").unwrap();
        let lowered = lower_swivel_sfi(&p, &w4()).unwrap();
        let b0 = &lowered.block_map.blocks[0];
        assert_eq!(b0.len, 2);
        assert!(matches!(
            lowered.program.fetch(Value(b0.start + 1)),
            Some(Instruction::Jump { .. })
        ));
    }

    #[test]
    fn sfi_accepts_breakout_shape_with_warnings() {
        let text = "\
0: jmp end if r3 == 0
[rStk + 4] := rHeap
rHeap := r1
jmp end if r3 != 0
r2 := [rHeap + 2]
end: jmp +1
";
        let p = parse_program(text).unwrap();
        let lowered = lower_swivel_sfi(&p, &w4()).unwrap();
        assert!(!lowered.block_map.warnings.is_empty());
        let masked = lowered.program.iter().any(|(_, i)| {
            matches!(i, Instruction::Load { offset, .. } if expr_is_masked_with(offset, Value(7)))
        });
        assert!(masked);
    }

    #[test]
    fn cet_blocks_start_with_endbranch_then_interlock() {
        let p = parse_program("0: jmp +2 if r1\n1: r2 := 1\n2: r3 := 2").unwrap();
        let lowered = lower_swivel_cet(&p, &w5_cet()).unwrap();
        for info in &lowered.block_map.blocks {
            assert_eq!(
                lowered.program.fetch(Value(info.start)),
                Some(&Instruction::EndBranch)
            );
            if !info.ret_site {
                let text = instruction_line(&lowered.program, info.start + 1);
                assert!(
                    text.contains(&format!("!= {}", info.label.unwrap())),
                    "{text}"
                );
                assert!(text.contains("rHeap"), "{text}");
            }
        }
    }

    #[test]
    fn cet_conditional_label_select_mirrors_address_select() {
        let p = parse_program("0: jmp +2 if r1\n1: r2 := 1\n2: r3 := 2").unwrap();
        let lowered = lower_swivel_cet(&p, &w5_cet()).unwrap();
        let (cond_addr, _) = lowered
            .program
            .iter()
            .find(|(_, i)| matches!(i, Instruction::JumpIf { .. }))
            .unwrap();
        let label_reg = &lowered.block_map.reserved_registers[1];
        let prev = instruction_line(&lowered.program, cond_addr - 1);
        assert!(
            prev.starts_with(&format!(
                "{cond_addr_minus}: {label_reg} :=",
                cond_addr_minus = cond_addr - 1
            )),
            "{prev}"
        );
        assert!(prev.contains("r1"), "{prev}");
        let labels: Vec<u32> = lowered
            .block_map
            .blocks
            .iter()
            .filter_map(|b| b.label)
            .collect();
        assert!(
            labels
                .iter()
                .filter(|l| prev.contains(&l.to_string()))
                .count()
                >= 2,
            "{prev} labels={labels:?}"
        );
    }

    #[test]
    fn cet_mispredicted_entry_poisons_heap_loads() {
        use crate::oracles::{Choice, Oracle, OracleClass};
        use crate::speculation::{run_spec, SpecMode};
        let l = w5_cet();
        let p = parse_program("0: jmp end if r1 >= 4\nr2 := [rHeap + r1]\nend:").unwrap();
        let lowered = lower_swivel_cet(&p, &l).unwrap();
        let mut c = Config::initial(Arc::new(lowered.program.clone()), &l).unwrap();
        c.regs.set(Register::Gp(1), Value(7)); // architecturally taken
                                               // First event is the preamble's direct jump, then the guard.
        let mut o = Oracle::scripted(
            OracleClass::DirectionOnly,
            vec![Choice::Correct, Choice::Fall],
        );
        let (final_cfg, hist) = run_spec(&c, &l, &mut o, 20, SpecMode::Cet);
        assert!(final_cfg.mispredicted);
        assert_eq!(
            hist.last().unwrap().stuck_reason(),
            Some(crate::machine::StuckReason::GuardAccess)
        );
        assert!(final_cfg.obs.dmem.is_empty());
    }

    #[test]
    fn cet_correct_path_preserves_architectural_behavior() {
        let l = w5_cet();
        let p = parse_program(
            "0: jmp end if r1 >= 4\nr2 := [rHeap + r1]\nr3 := [rHeap + 4 + r2]\nend:",
        )
        .unwrap();
        let lowered = lower_swivel_cet(&p, &l).unwrap();

        for r1 in [Value(2), Value(7)] {
            let mut src = Config::initial(Arc::new(p.clone()), &l).unwrap();
            src.regs.set(Register::Gp(1), r1);
            src.mem.write(Value(2), Value(3));
            let (src_final, _) = run_arch(&src, &l, 16);

            let mut low = Config::initial(Arc::new(lowered.program.clone()), &l).unwrap();
            low.regs.set(Register::Gp(1), r1);
            low.mem.write(Value(2), Value(3));
            let (low_final, _) = run_arch(&low, &l, 64);

            for r in [Register::Gp(1), Register::Gp(2), Register::Gp(3)] {
                assert_eq!(
                    src_final.regs.get(r),
                    low_final.regs.get(r),
                    "reg {r:?} r1={r1:?}"
                );
            }
        }
    }

    #[test]
    fn sfi_direct_targets_land_on_block_starts() {
        let l = MemoryLayout::builder(Width::new(6).unwrap())
            .heap(0, 8)
            .stack(10, 4)
            .separate_stack(16, 4)
            .build()
            .unwrap();
        let p = parse_program(
            "0: jmp body if r1\n1: r2 := 1\n2: call body2\n3: jmp +1\nbody: r3 := 2\njmp -5\nbody2: r4 := 3\nret",
        )
        .unwrap();
        let lowered = lower_swivel_sfi(&p, &l).unwrap();
        let starts: BTreeSet<u32> = lowered.block_map.blocks.iter().map(|b| b.start).collect();
        let width = l.width();
        let end = lowered.program.end_address();
        for (addr, insn) in lowered.program.iter() {
            if let Some(t) = direct_target(width, addr, insn) {
                assert!(
                    starts.contains(&t) || t == end,
                    "direct target {t} from {addr} is not a block start"
                );
            }
        }
    }

    #[test]
    fn cet_requires_interlock_guard_region() {
        let l = MemoryLayout::builder(Width::new(5).unwrap())
            .heap(0, 8)
            .build()
            .unwrap();
        let p = parse_program("0: r1 := [rHeap + r2]").unwrap();
        assert!(matches!(
            lower_swivel_cet(&p, &l),
            Err(PassError::MissingRegion("interlock_guard"))
        ));
    }

    #[test]
    fn indirect_jump_requires_table_trace() {
        let p = parse_program("0: jmp r1").unwrap();
        assert!(matches!(
            lower_swivel_sfi(&p, &w4()),
            Err(PassError::UntracedIndirectTarget { addr: 0 })
        ));
    }

    #[test]
    fn table_fed_indirect_jump_is_masked_and_rewritten() {
        let l = MemoryLayout::builder(Width::new(6).unwrap())
            .heap(0, 8)
            .jump_table(16, 4)
            .build()
            .unwrap();
        let text = "\
.table b0, b1
0: r1 := 16
r2 := [r1 + r3]
jmp r2
b0: r4 := 1
jmp -1
b1: r4 := 2
jmp -1
";
        let p = parse_program(text).unwrap();
        let lowered = lower_swivel_sfi(&p, &l).unwrap();
        let b0_new = lowered
            .block_map
            .blocks
            .iter()
            .find(|b| b.source_start == 3)
            .unwrap();
        let b1_new = lowered
            .block_map
            .blocks
            .iter()
            .find(|b| b.source_start == 5)
            .unwrap();
        assert_eq!(lowered.program.table(), &[b0_new.start, b1_new.start]);
        let masked = lowered.program.iter().any(|(_, i)| {
            matches!(i, Instruction::Load { offset, .. } if expr_is_masked_with(offset, Value(3)))
        });
        assert!(masked);
    }

    #[test]
    fn cet_pairs_table_entries_with_labels() {
        let l = MemoryLayout::builder(Width::new(6).unwrap())
            .heap(0, 8)
            .jump_table(16, 8)
            .interlock_guard(32, 12)
            .build()
            .unwrap();
        let text = "\
.table b0, b1
0: r1 := 16
r2 := [r1 + r3]
jmp r2
b0: r4 := 1
jmp -1
b1: r4 := 2
jmp -1
";
        let p = parse_program(text).unwrap();
        let lowered = lower_swivel_cet(&p, &l).unwrap();
        let b0 = lowered
            .block_map
            .blocks
            .iter()
            .find(|b| b.source_start == 3)
            .unwrap();
        let b1 = lowered
            .block_map
            .blocks
            .iter()
            .find(|b| b.source_start == 5)
            .unwrap();
        assert_eq!(
            lowered.program.table(),
            &[b0.start, b0.label.unwrap(), b1.start, b1.label.unwrap()]
        );
    }

    #[test]
    fn labels_are_disjoint_from_code_addresses() {
        let p = parse_program("0: jmp +2 if r1\n1: r2 := 1\n2: r3 := 2").unwrap();
        let lowered = lower_swivel_cet(&p, &w5_cet()).unwrap();
        let end = lowered.program.end_address();
        for b in &lowered.block_map.blocks {
            let label = b.label.unwrap();
            assert!(label >= end, "label {label} collides with code (end {end})");
        }
    }

    #[test]
    fn code_overflow_reported() {
        let mut text = String::new();
        for i in 0..12 {
            text.push_str(&format!("{i}: jmp +1 if r1\n"));
        }
        let l = MemoryLayout::builder(Width::new(4).unwrap())
            .heap(0, 4)
            .interlock_guard(5, 6)
            .build()
            .unwrap();
        let p = parse_program(&text).unwrap();
        assert!(matches!(
            lower_swivel_cet(&p, &l),
            Err(PassError::CodeOverflow { .. })
        ));
    }
}

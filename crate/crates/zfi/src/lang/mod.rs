//! Abstract syntax, expression evaluation, and structural queries.
//!
//! Programs are partial maps from addresses to instructions. All values
//! are `w`-bit unsigned integers with wrapping arithmetic; the width `w`
//! is a machine parameter carried by [`Width`] and applied at evaluation
//! time, so parsed programs are width-agnostic.

mod parse;
mod render;

pub use parse::{parse_program, ParseError};
pub use render::{render_expr, render_program};

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

/// Machine word width in bits. Valid range is 2..=16 so that exhaustive
/// state enumeration stays feasible.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Width(u8);

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
#[error("width {0} out of range (expected 2..=16)")]
pub struct WidthError(pub u8);

impl Width {
    pub fn new(bits: u8) -> Result<Self, WidthError> {
        if (2..=16).contains(&bits) {
            Ok(Width(bits))
        } else {
            Err(WidthError(bits))
        }
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    /// All-ones mask for this width.
    pub fn mask(self) -> u32 {
        (1u32 << self.0) - 1
    }

    /// Number of distinct values, 2^w.
    pub fn domain_size(self) -> u32 {
        1u32 << self.0
    }

    /// Wrap an arbitrary integer into the w-bit domain.
    pub fn wrap(self, x: u64) -> Value {
        Value((x & self.mask() as u64) as u32)
    }

    /// Wrap a signed integer (two's complement within w bits).
    pub fn wrap_signed(self, x: i64) -> Value {
        self.wrap(x as u64)
    }

    /// Decode a value as a signed displacement.
    pub fn to_signed(self, v: Value) -> i32 {
        let half = 1u32 << (self.0 - 1);
        if v.0 < half {
            v.0 as i32
        } else {
            v.0 as i32 - self.domain_size() as i32
        }
    }

    /// Iterator over every value of the domain, ascending.
    pub fn domain(self) -> impl Iterator<Item = Value> {
        (0..self.domain_size()).map(Value)
    }
}

/// A machine word. Arithmetic on values goes through [`Width`], which
/// wraps every result; `Value` itself is just the raw bits.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct Value(pub u32);

impl Value {
    pub fn raw(self) -> u32 {
        self.0
    }

    pub fn is_zero(self) -> bool {
        self.0 == 0
    }

    /// Truth interpretation: any nonzero value is true.
    pub fn truthy(self) -> bool {
        self.0 != 0
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl From<u32> for Value {
    fn from(x: u32) -> Self {
        Value(x)
    }
}

/// Register identifiers. The four pointer registers are distinct from
/// each other and from every general register.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Register {
    /// Stack pointer.
    Stk,
    /// Heap base pointer.
    Heap,
    /// Shadow-stack pointer (CET backward-edge protection).
    SStk,
    /// Separate-stack pointer (SFI return stack).
    SepStk,
    /// General register r0, r1, ...
    Gp(u8),
}

impl Register {
    pub fn name(self) -> String {
        match self {
            Register::Stk => "rStk".to_string(),
            Register::Heap => "rHeap".to_string(),
            Register::SStk => "rSStk".to_string(),
            Register::SepStk => "rSepStk".to_string(),
            Register::Gp(n) => format!("r{n}"),
        }
    }

    /// Parse a register name. Accepts `rHeap`/`rH`, `rStk`, `rSStk`,
    /// `rSepStk`, and `rN` for general registers.
    pub fn from_name(s: &str) -> Option<Register> {
        match s {
            "rStk" => Some(Register::Stk),
            "rHeap" | "rH" => Some(Register::Heap),
            "rSStk" => Some(Register::SStk),
            "rSepStk" => Some(Register::SepStk),
            _ => {
                let digits = s.strip_prefix('r')?;
                if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
                    return None;
                }
                digits
                    .parse::<u8>()
                    .ok()
                    .filter(|&n| n < 32)
                    .map(Register::Gp)
            }
        }
    }
}

impl fmt::Display for Register {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.name())
    }
}

impl Serialize for Register {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> Result<S::Ok, S::Error> {
        ser.serialize_str(&self.name())
    }
}

impl<'de> Deserialize<'de> for Register {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        let s = String::deserialize(de)?;
        Register::from_name(&s)
            .ok_or_else(|| serde::de::Error::custom(format!("unknown register name '{s}'")))
    }
}

/// Binary operators. Comparisons yield 0/1. `Mask` is bitwise-and used
/// by the hardening passes to truncate offsets to a region size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    And,
    Or,
    Xor,
    Shl,
    Shr,
    Lt,
    Eq,
    Ne,
    Ge,
    Mask,
}

impl BinOp {
    pub fn apply(self, width: Width, a: Value, b: Value) -> Value {
        let (a, b) = (a.0 as u64, b.0 as u64);
        let bool_val = |c: bool| Value(c as u32);
        match self {
            BinOp::Add => width.wrap(a.wrapping_add(b)),
            BinOp::Sub => width.wrap(a.wrapping_sub(b)),
            BinOp::Mul => width.wrap(a.wrapping_mul(b)),
            BinOp::And | BinOp::Mask => width.wrap(a & b),
            BinOp::Or => width.wrap(a | b),
            BinOp::Xor => width.wrap(a ^ b),
            BinOp::Shl => {
                if b >= width.bits() as u64 {
                    Value(0)
                } else {
                    width.wrap(a << b)
                }
            }
            BinOp::Shr => {
                if b >= width.bits() as u64 {
                    Value(0)
                } else {
                    width.wrap(a >> b)
                }
            }
            BinOp::Lt => bool_val(a < b),
            BinOp::Eq => bool_val(a == b),
            BinOp::Ne => bool_val(a != b),
            BinOp::Ge => bool_val(a >= b),
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::And => "&",
            BinOp::Or => "|",
            BinOp::Xor => "^",
            BinOp::Shl => "<<",
            BinOp::Shr => ">>",
            BinOp::Lt => "<",
            BinOp::Eq => "==",
            BinOp::Ne => "!=",
            BinOp::Ge => ">=",
            BinOp::Mask => "mask",
        }
    }
}

/// Expressions: literals, registers, and binary operations.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Expr {
    Lit(Value),
    Reg(Register),
    Bin(BinOp, Box<Expr>, Box<Expr>),
}

impl Expr {
    pub fn lit(v: u32) -> Expr {
        Expr::Lit(Value(v))
    }

    pub fn reg(r: Register) -> Expr {
        Expr::Reg(r)
    }

    pub fn bin(op: BinOp, a: Expr, b: Expr) -> Expr {
        Expr::Bin(op, Box::new(a), Box::new(b))
    }

    /// Registers mentioned anywhere in the expression.
    pub fn registers(&self) -> Vec<Register> {
        let mut out = Vec::new();
        self.collect_registers(&mut out);
        out
    }

    fn collect_registers(&self, out: &mut Vec<Register>) {
        match self {
            Expr::Lit(_) => {}
            Expr::Reg(r) => out.push(*r),
            Expr::Bin(_, a, b) => {
                a.collect_registers(out);
                b.collect_registers(out);
            }
        }
    }

    pub fn is_literal(&self) -> bool {
        matches!(self, Expr::Lit(_))
    }
}

/// A register file: total map from registers to values, defaulting to 0.
/// Zero entries are never stored, so derived equality is semantic
/// equality of the underlying total map.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RegisterFile {
    values: BTreeMap<Register, Value>,
}

impl RegisterFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, r: Register) -> Value {
        self.values.get(&r).copied().unwrap_or(Value(0))
    }

    pub fn set(&mut self, r: Register, v: Value) {
        if v.is_zero() {
            self.values.remove(&r);
        } else {
            self.values.insert(r, v);
        }
    }

    /// Registers currently holding a nonzero value.
    pub fn nonzero(&self) -> impl Iterator<Item = (Register, Value)> + '_ {
        self.values.iter().map(|(&r, &v)| (r, v))
    }
}

/// Evaluate an expression against a register file. Total and
/// deterministic; all arithmetic wraps modulo 2^w.
pub fn eval_expr(e: &Expr, regs: &RegisterFile, width: Width) -> Value {
    match e {
        Expr::Lit(v) => width.wrap(v.0 as u64),
        Expr::Reg(r) => regs.get(*r),
        Expr::Bin(op, a, b) => {
            let va = eval_expr(a, regs, width);
            let vb = eval_expr(b, regs, width);
            op.apply(width, va, vb)
        }
    }
}

/// Instructions. Relative displacements are stored signed and wrapped
/// into the w-bit domain when executed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Instruction {
    /// `r := e`
    Assign { dst: Register, expr: Expr },
    /// `r := [base + off]`
    Load {
        dst: Register,
        base: Register,
        offset: Expr,
    },
    /// `[base + off] := e`
    Store {
        base: Register,
        offset: Expr,
        value: Expr,
    },
    /// `jmp +i`
    Jump { disp: i32 },
    /// `jmp +i if e`
    JumpIf { disp: i32, cond: Expr },
    /// `jmp r`
    JumpInd { reg: Register },
    /// `call +i`
    Call { disp: i32 },
    /// `call r`
    CallInd { reg: Register },
    /// `ret`
    Ret,
    /// `flush` (clears predictor state; architectural no-op)
    Flush,
    /// `endbranch` (forward-edge CFI landing pad; architectural no-op)
    EndBranch,
}

/// True exactly for the six control-transfer instructions.
pub fn is_control_flow(insn: &Instruction) -> bool {
    matches!(
        insn,
        Instruction::Jump { .. }
            | Instruction::JumpIf { .. }
            | Instruction::JumpInd { .. }
            | Instruction::Call { .. }
            | Instruction::CallInd { .. }
            | Instruction::Ret
    )
}

impl Instruction {
    /// Registers this instruction writes.
    pub fn written_registers(&self) -> Vec<Register> {
        match self {
            Instruction::Assign { dst, .. } | Instruction::Load { dst, .. } => vec![*dst],
            Instruction::Call { .. } | Instruction::CallInd { .. } | Instruction::Ret => {
                vec![Register::Stk]
            }
            _ => Vec::new(),
        }
    }

    /// Registers this instruction reads (in expressions or as bases).
    pub fn read_registers(&self) -> Vec<Register> {
        let mut out = Vec::new();
        match self {
            Instruction::Assign { expr, .. } => out.extend(expr.registers()),
            Instruction::Load { base, offset, .. } => {
                out.push(*base);
                out.extend(offset.registers());
            }
            Instruction::Store {
                base,
                offset,
                value,
            } => {
                out.push(*base);
                out.extend(offset.registers());
                out.extend(value.registers());
            }
            Instruction::JumpIf { cond, .. } => out.extend(cond.registers()),
            Instruction::JumpInd { reg } | Instruction::CallInd { reg } => out.push(*reg),
            Instruction::Call { .. } | Instruction::Ret => out.push(Register::Stk),
            _ => {}
        }
        if matches!(self, Instruction::Call { .. } | Instruction::CallInd { .. }) {
            out.push(Register::Stk);
        }
        out
    }
}

/// A program: partial map from addresses to instructions, an entry
/// address, and an optional declared jump table (a list of code
/// addresses materialized into the jump-table memory region at load
/// time, mirroring how table-driven indirect transfers are set up).
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Program {
    instrs: BTreeMap<u32, Instruction>,
    entry: u32,
    table: Vec<u32>,
}

impl Program {
    pub fn new(entry: u32) -> Self {
        Program {
            instrs: BTreeMap::new(),
            entry,
            table: Vec::new(),
        }
    }

    pub fn from_instructions(entry: u32, list: Vec<(u32, Instruction)>) -> Self {
        let mut p = Program::new(entry);
        for (addr, insn) in list {
            p.instrs.insert(addr, insn);
        }
        p
    }

    pub fn entry(&self) -> u32 {
        self.entry
    }

    pub fn set_entry(&mut self, entry: u32) {
        self.entry = entry;
    }

    pub fn fetch(&self, addr: Value) -> Option<&Instruction> {
        self.instrs.get(&addr.0)
    }

    pub fn insert(&mut self, addr: u32, insn: Instruction) -> Option<Instruction> {
        self.instrs.insert(addr, insn)
    }

    pub fn len(&self) -> usize {
        self.instrs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instrs.is_empty()
    }

    pub fn addresses(&self) -> impl Iterator<Item = u32> + '_ {
        self.instrs.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, &Instruction)> + '_ {
        self.instrs.iter().map(|(&a, i)| (a, i))
    }

    /// One past the highest mapped address; 0 for an empty program.
    pub fn end_address(&self) -> u32 {
        self.instrs.keys().next_back().map_or(0, |a| a + 1)
    }

    pub fn table(&self) -> &[u32] {
        &self.table
    }

    pub fn set_table(&mut self, table: Vec<u32>) {
        self.table = table;
    }
}

/// A maximal straight-line instruction run. `terminator` is the address
/// of the block's control-flow instruction when it has one; blocks
/// without a terminator fall through to the next block start (or off
/// the end of the program).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinearBlock {
    pub start: u32,
    pub addrs: Vec<u32>,
    pub terminator: Option<u32>,
}

impl LinearBlock {
    pub fn len(&self) -> usize {
        self.addrs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.addrs.is_empty()
    }

    /// Blocks with no trailing control-flow instruction either fall
    /// through to an adjacent block or run off the end of the program.
    pub fn is_unterminated(&self) -> bool {
        self.terminator.is_none()
    }
}

/// Resolved direct target of a control-flow instruction at `addr`, if
/// the instruction transfers to a statically known address.
pub fn direct_target(width: Width, addr: u32, insn: &Instruction) -> Option<u32> {
    match insn {
        Instruction::Jump { disp }
        | Instruction::JumpIf { disp, .. }
        | Instruction::Call { disp } => Some(
            width
                .wrap(addr as u64 + width.wrap_signed(*disp as i64).0 as u64)
                .0,
        ),
        _ => None,
    }
}

/// Split a program into linear blocks.
///
/// Block starts are exactly: the entry address, targets of direct
/// transfers, and fall-through successors of conditional jumps and
/// calls. Contiguous address runs between starts form blocks; a block's
/// only control-flow instruction, when present, is its last.
pub fn split_linear_blocks(p: &Program, width: Width) -> Vec<LinearBlock> {
    use std::collections::BTreeSet;

    let mut starts: BTreeSet<u32> = BTreeSet::new();
    if !p.is_empty() {
        starts.insert(p.entry());
    }
    for (addr, insn) in p.iter() {
        if let Some(t) = direct_target(width, addr, insn) {
            starts.insert(t);
        }
        // Fall-through successors of conditionals and calls start blocks.
        if matches!(
            insn,
            Instruction::JumpIf { .. } | Instruction::Call { .. } | Instruction::CallInd { .. }
        ) {
            starts.insert(width.wrap(addr as u64 + 1).0);
        }
    }

    let mut blocks = Vec::new();
    let mut current: Vec<u32> = Vec::new();
    let mut prev: Option<u32> = None;

    let flush_block = |current: &mut Vec<u32>, blocks: &mut Vec<LinearBlock>, p: &Program| {
        if current.is_empty() {
            return;
        }
        let last = *current.last().unwrap();
        let terminator = p
            .fetch(Value(last))
            .filter(|insn| is_control_flow(insn))
            .map(|_| last);
        blocks.push(LinearBlock {
            start: current[0],
            addrs: std::mem::take(current),
            terminator,
        });
    };

    for (addr, insn) in p.iter() {
        let contiguous = prev.is_some_and(|pr| pr + 1 == addr);
        if !contiguous || starts.contains(&addr) {
            flush_block(&mut current, &mut blocks, p);
        }
        current.push(addr);
        prev = Some(addr);
        if is_control_flow(insn) {
            flush_block(&mut current, &mut blocks, p);
        }
    }
    flush_block(&mut current, &mut blocks, p);
    blocks
}

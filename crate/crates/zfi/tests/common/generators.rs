//! Seeded random program generators.
//!
//! `random_program` produces arbitrary small programs (loops, wild
//! jumps, and guard hits included) for semantics-level properties.
//! `random_wasm_shaped` produces structured programs satisfying the
//! hardening passes' input discipline: forward-only control flow,
//! constant stack offsets, pre-masked heap offsets, table-fed indirect
//! transfers, and leaf functions, so architectural runs terminate and
//! stay in bounds.

use rand::rngs::StdRng;
use rand::Rng;

use zfi::lang::{BinOp, Expr, Instruction, Program, Register, Value, Width};
use zfi::machine::MemoryLayout;

pub fn test_layout(width: Width) -> MemoryLayout {
    match width.bits() {
        3 => MemoryLayout::builder(width).heap(0, 2).build().unwrap(),
        4 => MemoryLayout::builder(width)
            .heap(0, 8)
            .stack(10, 3)
            .build()
            .unwrap(),
        _ => MemoryLayout::builder(width)
            .heap(0, 8)
            .stack(10, 4)
            .build()
            .unwrap(),
    }
}

fn random_expr(rng: &mut StdRng, width: Width, depth: u8) -> Expr {
    if depth == 0 || rng.gen_bool(0.4) {
        if rng.gen_bool(0.5) {
            Expr::lit(rng.gen_range(0..=width.mask()))
        } else {
            Expr::reg(Register::Gp(rng.gen_range(0..6)))
        }
    } else {
        let ops = [
            BinOp::Add,
            BinOp::Sub,
            BinOp::Mul,
            BinOp::And,
            BinOp::Or,
            BinOp::Xor,
            BinOp::Shl,
            BinOp::Shr,
            BinOp::Lt,
            BinOp::Eq,
            BinOp::Ne,
            BinOp::Ge,
            BinOp::Mask,
        ];
        Expr::bin(
            ops[rng.gen_range(0..ops.len())],
            random_expr(rng, width, depth - 1),
            random_expr(rng, width, depth - 1),
        )
    }
}

/// An arbitrary program of up to `max_len` instructions. All value and
/// control behavior is legal input to the step relations (stuck states
/// included).
pub fn random_program(rng: &mut StdRng, max_len: usize, width: Width) -> Program {
    let len = rng.gen_range(1..=max_len);
    let mut p = Program::new(0);
    for addr in 0..len as u32 {
        let gp = |rng: &mut StdRng| Register::Gp(rng.gen_range(0..6));
        let base = |rng: &mut StdRng| match rng.gen_range(0..4) {
            0 => Register::Stk,
            _ => Register::Heap,
        };
        let disp = |rng: &mut StdRng| rng.gen_range(-4..=5);
        let insn = match rng.gen_range(0..100) {
            0..=29 => Instruction::Assign {
                dst: gp(rng),
                expr: random_expr(rng, width, 2),
            },
            30..=47 => Instruction::Load {
                dst: gp(rng),
                base: base(rng),
                offset: random_expr(rng, width, 1),
            },
            48..=62 => Instruction::Store {
                base: base(rng),
                offset: random_expr(rng, width, 1),
                value: random_expr(rng, width, 1),
            },
            63..=72 => Instruction::JumpIf {
                disp: disp(rng),
                cond: random_expr(rng, width, 1),
            },
            73..=79 => Instruction::Jump { disp: disp(rng) },
            80..=84 => Instruction::JumpInd { reg: gp(rng) },
            85..=89 => Instruction::Call { disp: disp(rng) },
            90..=92 => Instruction::Ret,
            93..=95 => Instruction::Flush,
            _ => Instruction::EndBranch,
        };
        p.insert(addr, insn);
    }
    p
}

/// A Wasm-shaped program plus the layout it was generated against.
pub struct WasmShaped {
    pub program: Program,
    pub layout: MemoryLayout,
    /// Initial stack pointer the program expects (inside the stack
    /// region, with headroom for one call frame).
    pub stack_pointer: Value,
}

pub fn wasm_layout() -> MemoryLayout {
    MemoryLayout::builder(Width::new(6).unwrap())
        .heap(0, 8)
        .stack(10, 6)
        .jump_table(20, 8)
        .separate_stack(30, 6)
        .shadow_stack(40, 6)
        .interlock_guard(48, 12)
        .build()
        .unwrap()
}

/// Masked heap offset expression: always resolves inside the heap.
fn heap_offset(rng: &mut StdRng, width: Width, heap_mask: u32) -> Expr {
    Expr::bin(
        BinOp::Mask,
        random_expr(rng, width, 1),
        Expr::lit(heap_mask),
    )
}

/// Generate a structured program:
///
/// ```text
/// main block 0 .. main block K-1   (conditionals/jumps go forward,
///                                   calls target functions)
/// fn blocks (leaf bodies ending in ret)
/// ```
pub fn random_wasm_shaped(rng: &mut StdRng) -> WasmShaped {
    let layout = wasm_layout();
    let width = layout.width();
    let heap_mask = layout.heap_mask().0;

    let main_blocks = rng.gen_range(2..=4usize);
    let fn_count = rng.gen_range(0..=2usize);
    let use_table = fn_count == 0 && rng.gen_bool(0.4);

    // Plan block bodies first, then materialize addresses.
    // Body instruction menu (no terminators). Function bodies keep
    // their stack offsets >= 1: offset 0 is the return-address slot,
    // which well-formed input never reads or writes.
    let body = |rng: &mut StdRng, len: usize, in_function: bool| -> Vec<Instruction> {
        let stack_lo = if in_function { 1 } else { 0 };
        (0..len)
            .map(|_| {
                let gp = Register::Gp(rng.gen_range(0..5));
                match rng.gen_range(0..10) {
                    0..=3 => Instruction::Assign {
                        dst: gp,
                        expr: random_expr(rng, width, 2),
                    },
                    4..=6 => Instruction::Load {
                        dst: gp,
                        base: Register::Heap,
                        offset: heap_offset(rng, width, heap_mask),
                    },
                    7..=8 => Instruction::Store {
                        base: Register::Heap,
                        offset: heap_offset(rng, width, heap_mask),
                        value: random_expr(rng, width, 1),
                    },
                    _ => {
                        if rng.gen_bool(0.5) {
                            Instruction::Load {
                                dst: gp,
                                base: Register::Stk,
                                offset: Expr::lit(rng.gen_range(stack_lo..4)),
                            }
                        } else {
                            Instruction::Store {
                                base: Register::Stk,
                                offset: Expr::lit(rng.gen_range(stack_lo..4)),
                                value: random_expr(rng, width, 1),
                            }
                        }
                    }
                }
            })
            .collect()
    };

    // Bodies for each main block and function.
    let main_bodies: Vec<Vec<Instruction>> = (0..main_blocks)
        .map(|_| {
            let len = rng.gen_range(1..=3);
            body(rng, len, false)
        })
        .collect();
    let fn_bodies: Vec<Vec<Instruction>> = (0..fn_count)
        .map(|_| {
            let len = rng.gen_range(1..=2);
            body(rng, len, true)
        })
        .collect();

    // Address layout. Main block i occupies [starts[i], starts[i]+len),
    // where len = body + 1 terminator. The last main block falls off
    // the end when there are no functions; otherwise it needs an
    // explicit jump past them.
    let last_needs_jump = fn_count > 0;
    let mut starts = Vec::new();
    let mut cursor = 0u32;
    for (i, b) in main_bodies.iter().enumerate() {
        starts.push(cursor);
        cursor += b.len() as u32;
        let last = i + 1 == main_blocks;
        if !last || last_needs_jump {
            cursor += 1; // terminator slot
        }
    }
    let mut fn_starts = Vec::new();
    for b in &fn_bodies {
        fn_starts.push(cursor);
        cursor += b.len() as u32 + 1; // body + ret
    }

    // Ret sites: a call in block i returns to starts[i+1], so forward
    // conditional/jump targets must skip blocks that follow a call.
    // Pick terminators now.
    #[derive(Clone, Copy)]
    enum Term {
        Cond(usize),   // taken-target main block
        Direct(usize), // target main block
        CallFn(usize),
        FallThrough,
    }
    let mut terms: Vec<Term> = Vec::new();
    let mut ret_site_blocks: Vec<usize> = Vec::new();
    for i in 0..main_blocks {
        let last = i + 1 == main_blocks;
        if last {
            // Jump past the function bodies, or just fall off the end.
            terms.push(if last_needs_jump {
                Term::Direct(main_blocks)
            } else {
                Term::FallThrough
            });
            break;
        }
        let t = match rng.gen_range(0..10) {
            0..=4 => Term::Cond(rng.gen_range(i + 1..=(i + 2).min(main_blocks))),
            5..=6 => Term::Direct(rng.gen_range(i + 1..=main_blocks)),
            7..=8 if !fn_bodies.is_empty() => {
                ret_site_blocks.push(i + 1);
                Term::CallFn(rng.gen_range(0..fn_bodies.len()))
            }
            _ => Term::Direct(i + 1),
        };
        terms.push(t);
    }

    // Conditional/direct targets must not be ret sites; retarget those
    // to the block right after the ret site (or the end).
    let fix_target = |t: usize| -> usize {
        let mut t = t;
        while ret_site_blocks.contains(&t) && t < main_blocks {
            t += 1;
        }
        t
    };

    // Table entries: last main block only (a forward target from
    // anywhere, never a ret site by the retargeting above).
    let table_targets: Vec<usize> = if use_table {
        vec![fix_target(main_blocks - 1)]
    } else {
        Vec::new()
    };

    let block_addr = |idx: usize, starts: &[u32], end: u32| -> u32 {
        if idx >= starts.len() {
            end
        } else {
            starts[idx]
        }
    };
    let end_addr = cursor;

    let mut p = Program::new(0);
    let mut addr = 0u32;
    for (i, b) in main_bodies.iter().enumerate() {
        for insn in b {
            p.insert(addr, insn.clone());
            addr += 1;
        }
        match terms[i] {
            Term::FallThrough => {}
            Term::Cond(t) => {
                let t = fix_target(t);
                let target = block_addr(t, &starts, end_addr);
                p.insert(
                    addr,
                    Instruction::JumpIf {
                        disp: target as i32 - addr as i32,
                        cond: random_expr(rng, width, 1),
                    },
                );
                addr += 1;
            }
            Term::Direct(t) => {
                let t = fix_target(t);
                let target = block_addr(t, &starts, end_addr);
                p.insert(
                    addr,
                    Instruction::Jump {
                        disp: target as i32 - addr as i32,
                    },
                );
                addr += 1;
            }
            Term::CallFn(f) => {
                p.insert(
                    addr,
                    Instruction::Call {
                        disp: fn_starts[f] as i32 - addr as i32,
                    },
                );
                addr += 1;
            }
        }
    }

    // Table-using variant: rebuild block 0 with the indirect idiom when
    // requested (simpler than threading slot arithmetic above).
    if use_table {
        let jt = layout.jump_table().unwrap();
        let idx_mask = (table_targets.len().next_power_of_two() - 1) as u32;
        let b0 = starts[0];
        // Ensure block 0 has >= 3 slots: body >= 2 plus terminator.
        let b0_len = main_bodies[0].len() as u32 + 1;
        if b0_len >= 3 {
            p.insert(
                b0,
                Instruction::Assign {
                    dst: Register::Gp(6),
                    expr: Expr::lit(jt.start),
                },
            );
            p.insert(
                b0 + 1,
                Instruction::Load {
                    dst: Register::Gp(7),
                    base: Register::Gp(6),
                    offset: Expr::bin(BinOp::Mask, random_expr(rng, width, 1), Expr::lit(idx_mask)),
                },
            );
            for a in (b0 + 2)..(b0 + b0_len - 1) {
                p.insert(
                    a,
                    Instruction::Assign {
                        dst: Register::Gp(0),
                        expr: Expr::lit(0),
                    },
                );
            }
            p.insert(
                b0 + b0_len - 1,
                Instruction::JumpInd {
                    reg: Register::Gp(7),
                },
            );
        }
        p.set_table(
            table_targets
                .iter()
                .map(|&t| block_addr(t, &starts, end_addr))
                .collect(),
        );
    }

    for (f, b) in fn_bodies.iter().enumerate() {
        let mut a = fn_starts[f];
        for insn in b {
            p.insert(a, insn.clone());
            a += 1;
        }
        p.insert(a, Instruction::Ret);
    }

    WasmShaped {
        program: p,
        layout,
        stack_pointer: Value(12),
    }
}

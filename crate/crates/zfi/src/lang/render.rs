//! Textual rendering of programs. `parse(render(p))` is structurally
//! equal to `p` for every program.

use std::fmt::Write;

use super::parse::precedence;
use super::{Expr, Instruction, Program};

/// Render an expression with minimal parentheses (all operators are
/// left-associative, so right children at equal precedence get parens).
pub fn render_expr(e: &Expr) -> String {
    let mut s = String::new();
    write_expr(&mut s, e, 0, false);
    s
}

fn write_expr(out: &mut String, e: &Expr, parent_prec: u8, is_right: bool) {
    match e {
        Expr::Lit(v) => {
            let _ = write!(out, "{}", v.0);
        }
        Expr::Reg(r) => {
            let _ = write!(out, "{}", r.name());
        }
        Expr::Bin(op, a, b) => {
            let prec = precedence(*op);
            let needs_parens = prec < parent_prec || (prec == parent_prec && is_right);
            if needs_parens {
                out.push('(');
            }
            write_expr(out, a, prec, false);
            let _ = write!(out, " {} ", op.symbol());
            write_expr(out, b, prec, true);
            if needs_parens {
                out.push(')');
            }
        }
    }
}

fn disp_str(disp: i32) -> String {
    if disp < 0 {
        format!("-{}", -(disp as i64))
    } else {
        format!("+{disp}")
    }
}

pub fn render_instruction(insn: &Instruction) -> String {
    match insn {
        Instruction::Assign { dst, expr } => format!("{} := {}", dst.name(), render_expr(expr)),
        Instruction::Load { dst, base, offset } => {
            format!(
                "{} := [{} + {}]",
                dst.name(),
                base.name(),
                render_expr(offset)
            )
        }
        Instruction::Store {
            base,
            offset,
            value,
        } => {
            format!(
                "[{} + {}] := {}",
                base.name(),
                render_expr(offset),
                render_expr(value)
            )
        }
        Instruction::Jump { disp } => format!("jmp {}", disp_str(*disp)),
        Instruction::JumpIf { disp, cond } => {
            format!("jmp {} if {}", disp_str(*disp), render_expr(cond))
        }
        Instruction::JumpInd { reg } => format!("jmp {}", reg.name()),
        Instruction::Call { disp } => format!("call {}", disp_str(*disp)),
        Instruction::CallInd { reg } => format!("call {}", reg.name()),
        Instruction::Ret => "ret".to_string(),
        Instruction::Flush => "flush".to_string(),
        Instruction::EndBranch => "endbranch".to_string(),
    }
}

/// Render a whole program, one `addr: insn` line per instruction in
/// address order, preceded by `.entry`/`.table` directives when needed.
pub fn render_program(p: &Program) -> String {
    let mut out = String::new();
    let first = p.addresses().next();
    if first != Some(p.entry()) && !p.is_empty() {
        let _ = writeln!(out, ".entry {}", disp_str(p.entry() as i32));
    }
    if !p.table().is_empty() {
        let entries: Vec<String> = p.table().iter().map(|a| format!("+{a}")).collect();
        let _ = writeln!(out, ".table {}", entries.join(", "));
    }
    for (addr, insn) in p.iter() {
        let _ = writeln!(out, "{addr}: {}", render_instruction(insn));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::super::{parse_program, BinOp, Register, Value};
    use super::*;
    use proptest::prelude::*;

    fn arb_register() -> impl Strategy<Value = Register> {
        prop_oneof![
            Just(Register::Stk),
            Just(Register::Heap),
            Just(Register::SStk),
            Just(Register::SepStk),
            (0u8..8).prop_map(Register::Gp),
        ]
    }

    fn arb_binop() -> impl Strategy<Value = BinOp> {
        prop_oneof![
            Just(BinOp::Add),
            Just(BinOp::Sub),
            Just(BinOp::Mul),
            Just(BinOp::And),
            Just(BinOp::Or),
            Just(BinOp::Xor),
            Just(BinOp::Shl),
            Just(BinOp::Shr),
            Just(BinOp::Lt),
            Just(BinOp::Eq),
            Just(BinOp::Ne),
            Just(BinOp::Ge),
            Just(BinOp::Mask),
        ]
    }

    fn arb_expr() -> impl Strategy<Value = Expr> {
        let leaf = prop_oneof![
            (0u32..64).prop_map(Expr::lit),
            arb_register().prop_map(Expr::Reg),
        ];
        leaf.prop_recursive(4, 24, 2, |inner| {
            (arb_binop(), inner.clone(), inner).prop_map(|(op, a, b)| Expr::bin(op, a, b))
        })
    }

    fn arb_instruction() -> impl Strategy<Value = Instruction> {
        prop_oneof![
            (arb_register(), arb_expr()).prop_map(|(dst, expr)| Instruction::Assign { dst, expr }),
            (arb_register(), arb_register(), arb_expr())
                .prop_map(|(dst, base, offset)| Instruction::Load { dst, base, offset }),
            (arb_register(), arb_expr(), arb_expr()).prop_map(|(base, offset, value)| {
                Instruction::Store {
                    base,
                    offset,
                    value,
                }
            }),
            (-8i32..8).prop_map(|disp| Instruction::Jump { disp }),
            (-8i32..8, arb_expr()).prop_map(|(disp, cond)| Instruction::JumpIf { disp, cond }),
            arb_register().prop_map(|reg| Instruction::JumpInd { reg }),
            (-8i32..8).prop_map(|disp| Instruction::Call { disp }),
            arb_register().prop_map(|reg| Instruction::CallInd { reg }),
            Just(Instruction::Ret),
            Just(Instruction::Flush),
            Just(Instruction::EndBranch),
        ]
    }

    proptest! {
        #[test]
        fn parse_render_roundtrip(insns in prop::collection::vec(arb_instruction(), 1..12)) {
            let mut p = Program::new(0);
            for (i, insn) in insns.into_iter().enumerate() {
                p.insert(i as u32, insn);
            }
            let text = render_program(&p);
            let reparsed = parse_program(&text).unwrap();
            prop_assert_eq!(reparsed, p);
        }

        #[test]
        fn expr_roundtrip(e in arb_expr()) {
            let text = format!("r0 := {}", render_expr(&e));
            let p = parse_program(&text).unwrap();
            match p.fetch(Value(0)).unwrap() {
                Instruction::Assign { expr, .. } => prop_assert_eq!(expr, &e),
                other => prop_assert!(false, "unexpected {:?}", other),
            }
        }
    }
}

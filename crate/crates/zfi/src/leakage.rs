//! Leakage observations and trace-accumulating execution.
//!
//! Each executed instruction emits one observation per jump, load, or
//! store effect of its architectural rule, in rule-reading order. What
//! an attacker sees depends on the leakage model:
//!
//! | effect              | dmem   | ct        | arch           |
//! |---------------------|--------|-----------|----------------|
//! | jump (pc := v)      | —      | v         | v              |
//! | load (`v = Mem[a]`) | a      | a         | a, v           |
//! | store (`Mem[a] := v`) | a    | a         | a              |
//!
//! All three traces are maintained simultaneously on every
//! configuration. Observations never feed back into execution, and a
//! stuck access emits nothing: the halt is visible only through trace
//! truncation.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::lang::{Instruction, Register, Value};
use crate::machine::{arch_step, Config, MemoryLayout, StepOutcome};
use crate::oracles::Oracle;
use crate::speculation::{cet_step, spec_step};

/// Attacker power, weakest to strongest: data-cache addresses only;
/// plus the control-flow trace; plus every value loaded from memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LeakModel {
    Dmem,
    Ct,
    Arch,
}

impl LeakModel {
    pub const ALL: [LeakModel; 3] = [LeakModel::Dmem, LeakModel::Ct, LeakModel::Arch];

    pub fn name(self) -> &'static str {
        match self {
            LeakModel::Dmem => "dmem",
            LeakModel::Ct => "ct",
            LeakModel::Arch => "arch",
        }
    }
}

impl std::str::FromStr for LeakModel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dmem" => Ok(LeakModel::Dmem),
            "ct" => Ok(LeakModel::Ct),
            "arch" => Ok(LeakModel::Arch),
            other => Err(format!(
                "unknown leakage model '{other}' (expected dmem|ct|arch)"
            )),
        }
    }
}

/// A single side-channel event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Observation {
    #[serde(rename = "J")]
    JumpTarget(Value),
    #[serde(rename = "A")]
    MemAddr(Value),
    #[serde(rename = "V")]
    MemVal(Value),
}

impl Observation {
    /// One-line dump form: `J <hex>` / `A <hex>` / `V <hex>`.
    pub fn dump_line(&self) -> String {
        match self {
            Observation::JumpTarget(v) => format!("J 0x{:x}", v.0),
            Observation::MemAddr(v) => format!("A 0x{:x}", v.0),
            Observation::MemVal(v) => format!("V 0x{:x}", v.0),
        }
    }
}

impl fmt::Display for Observation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.dump_line())
    }
}

/// Per-model observation sequences, all maintained simultaneously and
/// append-only.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ObsTrace {
    pub dmem: Vec<Observation>,
    pub ct: Vec<Observation>,
    pub arch: Vec<Observation>,
}

impl ObsTrace {
    pub fn get(&self, model: LeakModel) -> &[Observation] {
        match model {
            LeakModel::Dmem => &self.dmem,
            LeakModel::Ct => &self.ct,
            LeakModel::Arch => &self.arch,
        }
    }

    pub fn append(&mut self, leaks: &Leaks) {
        self.dmem.extend_from_slice(&leaks.dmem);
        self.ct.extend_from_slice(&leaks.ct);
        self.arch.extend_from_slice(&leaks.arch);
    }

    pub fn is_prefix_of(&self, other: &ObsTrace) -> bool {
        LeakModel::ALL
            .iter()
            .all(|&m| other.get(m).starts_with(self.get(m)))
    }

    /// Dump one model's trace, one observation per line, preceded by a
    /// model header.
    pub fn dump(&self, model: LeakModel) -> String {
        let mut out = format!("# model: {}\n", model.name());
        for o in self.get(model) {
            out.push_str(&o.dump_line());
            out.push('\n');
        }
        out
    }
}

/// The per-model observations produced by a single execution step.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Leaks {
    pub dmem: Vec<Observation>,
    pub ct: Vec<Observation>,
    pub arch: Vec<Observation>,
}

/// Jump/load/store effects of an architectural rule, in rule order.
enum Effect {
    Jump(Value),
    Load { addr: Value, val: Value },
    Store { addr: Value },
}

fn effects(c: &Config) -> Vec<Effect> {
    let Some(insn) = c.current_instruction() else {
        return Vec::new();
    };
    match insn {
        Instruction::Assign { .. } | Instruction::Flush | Instruction::EndBranch => Vec::new(),
        Instruction::Load { base, offset, .. } => {
            let addr = c
                .width
                .wrap(c.regs.get(*base).0 as u64 + c.eval(offset).0 as u64);
            vec![Effect::Load {
                addr,
                val: c.mem.read(addr),
            }]
        }
        Instruction::Store { base, offset, .. } => {
            let addr = c
                .width
                .wrap(c.regs.get(*base).0 as u64 + c.eval(offset).0 as u64);
            vec![Effect::Store { addr }]
        }
        Instruction::Jump { disp } => vec![Effect::Jump(c.rel_target(*disp))],
        Instruction::JumpIf { disp, cond } => {
            // Both branch outcomes are jump effects; the fall-through
            // leaks pc+1 so direction leakage is symmetric.
            let target = if c.eval(cond).truthy() {
                c.rel_target(*disp)
            } else {
                c.next_pc()
            };
            vec![Effect::Jump(target)]
        }
        Instruction::JumpInd { reg } => vec![Effect::Jump(c.regs.get(*reg))],
        Instruction::Call { disp } => {
            let v_stk = c
                .width
                .wrap(c.regs.get(Register::Stk).0 as u64 + c.width.mask() as u64);
            vec![
                Effect::Store { addr: v_stk },
                Effect::Jump(c.rel_target(*disp)),
            ]
        }
        Instruction::CallInd { reg } => {
            let v_stk = c
                .width
                .wrap(c.regs.get(Register::Stk).0 as u64 + c.width.mask() as u64);
            vec![
                Effect::Store { addr: v_stk },
                Effect::Jump(c.regs.get(*reg)),
            ]
        }
        Instruction::Ret => {
            let v_stk = c.regs.get(Register::Stk);
            let target = c.mem.read(v_stk);
            vec![
                Effect::Load {
                    addr: v_stk,
                    val: target,
                },
                Effect::Jump(target),
            ]
        }
    }
}

/// Observations for the instruction under the program counter, per
/// leakage model. Requires `c.pc` to be mapped; unmapped pc produces
/// empty leaks (the step itself is stuck and appends nothing).
pub fn leaks(c: &Config) -> Leaks {
    let mut out = Leaks::default();
    for eff in effects(c) {
        match eff {
            Effect::Jump(v) => {
                out.ct.push(Observation::JumpTarget(v));
                out.arch.push(Observation::JumpTarget(v));
            }
            Effect::Load { addr, val } => {
                out.dmem.push(Observation::MemAddr(addr));
                out.ct.push(Observation::MemAddr(addr));
                out.arch.push(Observation::MemAddr(addr));
                out.arch.push(Observation::MemVal(val));
            }
            Effect::Store { addr } => {
                out.dmem.push(Observation::MemAddr(addr));
                out.ct.push(Observation::MemAddr(addr));
                out.arch.push(Observation::MemAddr(addr));
            }
        }
    }
    out
}

/// Which step relation to drive.
pub enum StepMode<'a> {
    Arch,
    Spec(&'a mut Oracle),
    Cet(&'a mut Oracle),
}

/// Apply one step of the selected relation with trace accumulation: on
/// success the successor's trace is the input trace extended by the
/// input configuration's leaks. Stuck outcomes pass through with
/// nothing appended.
pub fn trace_step(c: &Config, layout: &MemoryLayout, mode: &mut StepMode<'_>) -> StepOutcome {
    let out = match mode {
        StepMode::Arch => arch_step(c, layout),
        StepMode::Spec(oracle) => spec_step(c, layout, oracle),
        StepMode::Cet(oracle) => cet_step(c, layout, oracle),
    };
    match out {
        StepOutcome::Next(mut n) => {
            debug_assert_eq!(n.obs, c.obs);
            n.obs.append(&leaks(c));
            debug_assert_eq!(n.obs.dmem, project(&n.obs.ct, LeakModel::Dmem));
            debug_assert_eq!(n.obs.ct, project(&n.obs.arch, LeakModel::Ct));
            StepOutcome::Next(n)
        }
        stuck => stuck,
    }
}

/// Architectural step with trace accumulation.
pub fn trace_arch_step(c: &Config, layout: &MemoryLayout) -> StepOutcome {
    trace_step(c, layout, &mut StepMode::Arch)
}

/// Delete observations invisible to `model` from a stronger trace.
/// Used to state the projection laws between the three models.
pub fn project(trace: &[Observation], model: LeakModel) -> Vec<Observation> {
    trace
        .iter()
        .filter(|o| match model {
            LeakModel::Arch => true,
            LeakModel::Ct => !matches!(o, Observation::MemVal(_)),
            LeakModel::Dmem => matches!(o, Observation::MemAddr(_)),
        })
        .copied()
        .collect()
}

//! Speculative and CET-extended step relations.
//!
//! Control-flow instructions consult a prediction oracle: the
//! architectural successor is computed first (its register, memory, and
//! stack effects are kept), then the program counter is replaced by the
//! predicted one. An incorrect prediction simply continues execution
//! down the predicted path with the `mispredicted` flag set; there are
//! no rollbacks.
//!
//! The CET relation additionally requires forward-edge transfers to
//! land on `endbranch`, and verifies returns against a shadow stack
//! indexed by the otherwise-inaccessible shadow-stack register.

use std::collections::BTreeMap;

use crate::lang::{is_control_flow, Instruction, Register, Value, Width};
use crate::leakage::{trace_step, StepMode};
use crate::machine::{arch_step, Config, MemoryLayout, StepOutcome, StuckReason};
use crate::oracles::Oracle;

/// Predictor state: for each control-flow pc, the architectural targets
/// recorded since the last flush. The empty history is the designated
/// initial state, reachable by construction and by `flush`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BtbHistory {
    targets: BTreeMap<u32, Vec<Value>>,
}

impl BtbHistory {
    /// The designated empty state.
    pub fn bottom() -> BtbHistory {
        BtbHistory::default()
    }

    pub fn is_bottom(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn recorded(&self, pc: Value) -> &[Value] {
        self.targets.get(&pc.0).map_or(&[], |v| v.as_slice())
    }

    /// Record an architectural target for `pc` (deduplicated, in
    /// first-recorded order).
    pub fn record(&mut self, pc: Value, target: Value) {
        let entry = self.targets.entry(pc.0).or_default();
        if !entry.contains(&target) {
            entry.push(target);
        }
    }
}

/// What the oracle is allowed to see at a prediction event: the pc, the
/// instruction, the architectural target, and its own history. Memory
/// and general-register contents are deliberately absent.
pub struct PredictView<'a> {
    pub pc: Value,
    pub insn: &'a Instruction,
    pub arch_target: Value,
    pub history: &'a BtbHistory,
    pub width: Width,
}

/// Oracle output: the predicted pc and the successor predictor state.
pub struct Prediction {
    pub target: Value,
    pub new_state: BtbHistory,
}

/// Which speculative relation to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpecMode {
    Plain,
    Cet,
}

/// One speculative step.
///
/// Non-control-flow instructions other than `flush` step exactly as the
/// architectural relation. `flush` clears the predictor state to the
/// empty state and advances the pc; nothing else changes. Control-flow
/// instructions take their architectural step, then the oracle's
/// predicted pc and state replace the successor's, and `mispredicted`
/// latches if the prediction disagreed with the architectural pc.
pub fn spec_step(c: &Config, layout: &MemoryLayout, oracle: &mut Oracle) -> StepOutcome {
    let Some(insn) = c.current_instruction() else {
        return arch_step(c, layout); // stuck, with the same reason split
    };

    if matches!(insn, Instruction::Flush) {
        let mut n = c.clone();
        n.mu_state = BtbHistory::bottom();
        n.pc = c.next_pc();
        return StepOutcome::Next(n);
    }

    if !is_control_flow(insn) {
        return arch_step(c, layout);
    }

    // A stuck architectural rule cannot be rescued by prediction.
    let arch_next = match arch_step(c, layout) {
        StepOutcome::Next(n) => n,
        stuck => return stuck,
    };
    let view = PredictView {
        pc: c.pc,
        insn,
        arch_target: arch_next.pc,
        history: &c.mu_state,
        width: c.width,
    };
    let prediction = oracle.predict(&view);
    let correct = prediction.target == arch_next.pc;
    let mut n = arch_next;
    n.pc = prediction.target;
    n.mu_state = prediction.new_state;
    n.mispredicted = c.mispredicted || !correct;
    StepOutcome::Next(n)
}

fn requires_endbranch(n: &Config) -> Option<StuckReason> {
    match n.current_instruction() {
        Some(Instruction::EndBranch) => None,
        Some(_) => Some(StuckReason::CetEndbranchViolation),
        None => Some(StuckReason::UnmappedPc),
    }
}

/// One CET step.
///
/// Forward-edge control flow (jumps) must land on `endbranch`. Calls
/// additionally push the architectural return address onto the shadow
/// stack; returns must agree with the shadow-stack top and pop it.
/// Everything else defers to [`spec_step`].
pub fn cet_step(c: &Config, layout: &MemoryLayout, oracle: &mut Oracle) -> StepOutcome {
    let Some(insn) = c.current_instruction() else {
        return arch_step(c, layout);
    };
    let insn = insn.clone();

    if !is_control_flow(&insn) {
        return spec_step(c, layout, oracle);
    }

    match insn {
        Instruction::Jump { .. } | Instruction::JumpIf { .. } | Instruction::JumpInd { .. } => {
            let n = match spec_step(c, layout, oracle) {
                StepOutcome::Next(n) => n,
                stuck => return stuck,
            };
            match requires_endbranch(&n) {
                Some(reason) => StepOutcome::Stuck(reason),
                None => StepOutcome::Next(n),
            }
        }
        Instruction::Call { .. } | Instruction::CallInd { .. } => {
            let mut n = match spec_step(c, layout, oracle) {
                StepOutcome::Next(n) => n,
                stuck => return stuck,
            };
            if let Some(reason) = requires_endbranch(&n) {
                return StepOutcome::Stuck(reason);
            }
            // Shadow push of the architectural return address; fires
            // even when the call target was mispredicted.
            let v_sstk = c
                .width
                .wrap(c.regs.get(Register::SStk).0 as u64 + c.width.mask() as u64);
            if layout.is_guard(v_sstk) {
                return StepOutcome::Stuck(StuckReason::GuardAccess);
            }
            n.mem.write(v_sstk, c.next_pc());
            n.regs.set(Register::SStk, v_sstk);
            StepOutcome::Next(n)
        }
        Instruction::Ret => {
            let mut n = match spec_step(c, layout, oracle) {
                StepOutcome::Next(n) => n,
                stuck => return stuck,
            };
            let v_sstk = c.regs.get(Register::SStk);
            if layout.is_guard(v_sstk) {
                return StepOutcome::Stuck(StuckReason::GuardAccess);
            }
            if n.pc != c.mem.read(v_sstk) {
                return StepOutcome::Stuck(StuckReason::CetShadowMismatch);
            }
            n.regs
                .set(Register::SStk, c.width.wrap(v_sstk.0 as u64 + 1));
            StepOutcome::Next(n)
        }
        _ => unreachable!("control-flow match is exhaustive"),
    }
}

/// Iterate the speculative (or CET) relation with trace accumulation,
/// stopping at a stuck outcome or after `n` steps.
pub fn run_spec(
    c: &Config,
    layout: &MemoryLayout,
    oracle: &mut Oracle,
    n: usize,
    mode: SpecMode,
) -> (Config, Vec<StepOutcome>) {
    let mut cur = c.clone();
    let mut history = Vec::new();
    for _ in 0..n {
        let out = {
            let mut step_mode = match mode {
                SpecMode::Plain => StepMode::Spec(oracle),
                SpecMode::Cet => StepMode::Cet(oracle),
            };
            trace_step(&cur, layout, &mut step_mode)
        };
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

//! A second, deliberately unoptimized implementation of the bounded
//! security checks. Everything is recomputed from scratch: initial
//! states by nested loops over cell values, oracle scripts by recursive
//! tree growth with hand-counted branching, pairs by a double loop with
//! explicit config comparison, and no run caching. Verdicts from the
//! optimized checker must agree with this one exactly.

use std::sync::Arc;

use zfi::checker::{Property, StateSpace};
use zfi::lang::{is_control_flow, Program, Value};
use zfi::leakage::LeakModel;
use zfi::machine::{arch_step, run_arch, Config, MemoryLayout, StepOutcome};
use zfi::oracles::{allowed_targets, Choice, DecisionScript, Oracle, OracleClass};
use zfi::speculation::{run_spec, PredictView, SpecMode};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NaiveVerdict {
    Secure,
    Violation {
        script: DecisionScript,
        init1: u64,
        init2: u64,
        divergence: usize,
    },
}

/// All enumerated initial configs, by nested iteration (index order
/// must equal the optimized checker's lexicographic order).
fn all_inits(space: &StateSpace, base: &Config) -> Vec<Config> {
    let d = space.width.domain_size();
    let mut out = vec![base.clone()];
    for &r in &space.registers {
        let mut next = Vec::new();
        for cfg in &out {
            for v in 0..d {
                let mut c = cfg.clone();
                c.regs.set(r, Value(v));
                next.push(c);
            }
        }
        out = next;
    }
    for &cell in &space.cells {
        let mut next = Vec::new();
        for cfg in &out {
            for v in 0..d {
                let mut c = cfg.clone();
                c.mem.write(Value(cell), Value(v));
                next.push(c);
            }
        }
        out = next;
    }
    out
}

/// Step a config once speculatively, resolving the script by hand (no
/// Oracle machinery): returns the branching factor when a prediction
/// event fired.
fn naive_spec_step(
    c: &Config,
    layout: &MemoryLayout,
    class: OracleClass,
    script: &[Choice],
    cursor: &mut usize,
    branchings: &mut Vec<usize>,
) -> StepOutcome {
    use zfi::lang::Instruction;
    let Some(insn) = c.current_instruction() else {
        return arch_step(c, layout);
    };
    if matches!(insn, Instruction::Flush) {
        let mut n = c.clone();
        n.mu_state = zfi::speculation::BtbHistory::bottom();
        n.pc = c.next_pc();
        return StepOutcome::Next(n);
    }
    if !is_control_flow(insn) {
        return arch_step(c, layout);
    }
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
    let allowed = allowed_targets(class, &view);
    branchings.push(allowed.len());
    let choice = script.get(*cursor).copied().unwrap_or(Choice::Correct);
    *cursor += 1;
    let target = match choice {
        Choice::Index(i) => allowed.get(i as usize).copied().unwrap_or(arch_next.pc),
        Choice::Correct => arch_next.pc,
        Choice::Taken => allowed[0],
        Choice::Fall => *allowed.last().unwrap(),
        Choice::Target(v) => v,
    };
    let mut hist = c.mu_state.clone();
    if matches!(
        insn,
        Instruction::JumpInd { .. } | Instruction::CallInd { .. }
    ) {
        hist.record(c.pc, arch_next.pc);
    }
    let correct = target == arch_next.pc;
    let mut n = arch_next;
    n.pc = target;
    n.mu_state = hist;
    n.mispredicted = c.mispredicted || !correct;
    StepOutcome::Next(n)
}

/// Run `n` naive speculative steps (plain mode only; CET instances use
/// the shared relation through `run_spec` below) collecting branching
/// factors.
fn naive_run(
    c: &Config,
    layout: &MemoryLayout,
    class: OracleClass,
    script: &[Choice],
    n: usize,
    mode: SpecMode,
) -> (Config, Vec<usize>) {
    match mode {
        SpecMode::Plain => {
            let mut cur = c.clone();
            let mut cursor = 0;
            let mut branchings = Vec::new();
            for _ in 0..n {
                let out = {
                    // Trace accumulation mirrors the trace rule: leaks of
                    // the pre-state appended on success.
                    let leaks = zfi::leakage::leaks(&cur);
                    match naive_spec_step(&cur, layout, class, script, &mut cursor, &mut branchings)
                    {
                        StepOutcome::Next(mut nx) => {
                            nx.obs.append(&leaks);
                            StepOutcome::Next(nx)
                        }
                        stuck => stuck,
                    }
                };
                match out {
                    StepOutcome::Next(nx) => cur = nx,
                    StepOutcome::Stuck(_) => break,
                }
            }
            (cur, branchings)
        }
        SpecMode::Cet => {
            // The CET relation is taken as shared semantics; the naive
            // layer still owns enumeration, pairing, and comparison.
            let mut oracle = Oracle::scripted(class, script.to_vec());
            let (final_cfg, _) = run_spec(c, layout, &mut oracle, n, mode);
            let branchings = oracle
                .observed_branching()
                .iter()
                .map(|&b| b as usize)
                .collect();
            (final_cfg, branchings)
        }
    }
}

/// Recursive script-tree growth: extend while any initial state still
/// reaches a prediction event past the script end.
fn grow_scripts(
    prefix: &mut DecisionScript,
    out: &mut Vec<DecisionScript>,
    inits: &[Config],
    layout: &MemoryLayout,
    class: OracleClass,
    n: usize,
    mode: SpecMode,
) {
    let mut branching = 0usize;
    for init in inits {
        let (_, branchings) = naive_run(init, layout, class, prefix, n, mode);
        if branchings.len() > prefix.len() {
            branching = branching.max(branchings[prefix.len()]);
        }
    }
    if branching == 0 {
        out.push(prefix.clone());
        return;
    }
    for i in 0..branching {
        prefix.push(Choice::Index(i as u16));
        grow_scripts(prefix, out, inits, layout, class, n, mode);
        prefix.pop();
    }
}

fn model_trace(c: &Config, model: LeakModel) -> Vec<zfi::leakage::Observation> {
    c.obs.get(model).to_vec()
}

fn diverge(t1: &[zfi::leakage::Observation], t2: &[zfi::leakage::Observation]) -> Option<usize> {
    let common = t1.iter().zip(t2.iter()).take_while(|(a, b)| a == b).count();
    (common < t1.len().max(t2.len())).then_some(common)
}

#[allow(clippy::too_many_arguments)]
pub fn naive_check(
    property: Property,
    p: &Program,
    layout: &MemoryLayout,
    class: OracleClass,
    n: usize,
    space: &StateSpace,
    model: LeakModel,
    mode: SpecMode,
) -> NaiveVerdict {
    let base = Config::initial(Arc::new(p.clone()), layout).unwrap();
    let inits = all_inits(space, &base);

    let mut scripts = Vec::new();
    grow_scripts(
        &mut Vec::new(),
        &mut scripts,
        &inits,
        layout,
        class,
        n,
        mode,
    );

    for script in &scripts {
        for i in 0..inits.len() {
            for j in (i + 1)..inits.len() {
                let (c1, c2) = (&inits[i], &inits[j]);
                match property {
                    Property::Breakout => {
                        // mem_equiv by explicit comparison: equal
                        // everywhere except host memory cells.
                        let sandbox_equal = layout
                            .sandbox_addresses()
                            .into_iter()
                            .all(|a| c1.mem.read(Value(a)) == c2.mem.read(Value(a)));
                        if !(sandbox_equal && c1.regs == c2.regs && c1.pc == c2.pc) {
                            continue;
                        }
                    }
                    Property::Poisoning => {
                        let (a1, _) = run_arch(c1, layout, n);
                        let (a2, _) = run_arch(c2, layout, n);
                        if diverge(&model_trace(&a1, model), &model_trace(&a2, model)).is_some() {
                            continue;
                        }
                    }
                }
                let (f1, _) = naive_run(c1, layout, class, script, n, mode);
                let (f2, _) = naive_run(c2, layout, class, script, n, mode);
                if let Some(divergence) =
                    diverge(&model_trace(&f1, model), &model_trace(&f2, model))
                {
                    return NaiveVerdict::Violation {
                        script: script.clone(),
                        init1: i as u64,
                        init2: j as u64,
                        divergence,
                    };
                }
            }
        }
    }
    NaiveVerdict::Secure
}

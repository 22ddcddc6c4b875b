//! Architectural co-simulation of a source program against its lowered
//! form. Source-visible behavior:
//!
//! - the sequence of data memory operations (heap/stack/globals loads
//!   and stores) by source address, with their arch-model observations,
//! - the sequence of source linear-block entries,
//! - final general-register, heap-base, and stack-pointer values,
//! - final heap contents.
//!
//! Transfer plumbing (return-address pushes, table loads, selects,
//! interlocks) is excluded: the lowering relocates it by design.

use std::collections::BTreeMap;
use std::sync::Arc;

use zfi::hardening::LoweredProgram;
use zfi::lang::{split_linear_blocks, Program, Register, Value};
use zfi::leakage::{leaks, trace_arch_step, Observation};
use zfi::machine::{Config, MemoryLayout, StepOutcome};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VisibleRun {
    pub events: Vec<(u32, Vec<Observation>)>,
    pub block_entries: Vec<u32>,
    pub final_regs: Vec<(Register, Value)>,
    pub final_heap: Vec<Value>,
    pub ended: bool,
}

pub struct CosimInit {
    pub regs: Vec<(Register, Value)>,
    pub mem: Vec<(u32, Value)>,
    /// Registers holding code pointers (indirect-transfer plumbing);
    /// relocation changes them by design, so they are not compared.
    pub hidden: Vec<Register>,
}

fn visible_registers(reserved: &[String], hidden: &[Register]) -> Vec<Register> {
    let mut out: Vec<Register> = (0..8).map(Register::Gp).collect();
    out.push(Register::Heap);
    out.push(Register::Stk);
    out.retain(|r| !reserved.contains(&r.name()) && !hidden.contains(r));
    out
}

fn run_collect(
    program: &Program,
    layout: &MemoryLayout,
    init: &CosimInit,
    data_map: &BTreeMap<u32, u32>,
    entry_map: &BTreeMap<u32, u32>,
    reserved: &[String],
    cap: usize,
) -> VisibleRun {
    let mut c = Config::initial(Arc::new(program.clone()), layout).expect("boot");
    for &(r, v) in &init.regs {
        c.regs.set(r, v);
    }
    for &(a, v) in &init.mem {
        c.mem.write(Value(a), v);
    }

    let mut events = Vec::new();
    let mut block_entries = Vec::new();
    if let Some(&src) = entry_map.get(&c.pc.0) {
        block_entries.push(src);
    }
    let mut ended = false;
    for _ in 0..cap {
        let step_leaks = if data_map.contains_key(&c.pc.0) {
            Some(leaks(&c))
        } else {
            None
        };
        match trace_arch_step(&c, layout) {
            StepOutcome::Next(n) => {
                if let Some(lk) = step_leaks {
                    events.push((data_map[&c.pc.0], lk.arch));
                }
                if let Some(&src) = entry_map.get(&n.pc.0) {
                    block_entries.push(src);
                }
                c = n;
            }
            StepOutcome::Stuck(_) => {
                ended = true;
                break;
            }
        }
    }

    let final_regs = visible_registers(reserved, &init.hidden)
        .into_iter()
        .map(|r| (r, c.regs.get(r)))
        .collect();
    let final_heap = layout
        .heap()
        .addresses()
        .map(|a| c.mem.read(Value(a)))
        .collect();
    VisibleRun {
        events,
        block_entries,
        final_regs,
        final_heap,
        ended,
    }
}

/// Run the source program, collecting its visible behavior. The data
/// and entry maps are identities over the source's own data-op
/// addresses and block starts (taken from the lowering's origin map so
/// both sides agree on what counts as visible).
pub fn source_run(
    p: &Program,
    layout: &MemoryLayout,
    init: &CosimInit,
    lowered: &LoweredProgram,
    cap: usize,
) -> VisibleRun {
    let data_map: BTreeMap<u32, u32> = lowered
        .block_map
        .origins
        .values()
        .map(|&src| (src, src))
        .collect();
    let entry_map: BTreeMap<u32, u32> = split_linear_blocks(p, layout.width())
        .iter()
        .map(|b| (b.start, b.start))
        .collect();
    run_collect(
        p,
        layout,
        init,
        &data_map,
        &entry_map,
        &lowered.block_map.reserved_registers,
        cap,
    )
}

/// Run the lowered program, mapping visible behavior back to source
/// coordinates through the block map.
pub fn lowered_run(
    lowered: &LoweredProgram,
    layout: &MemoryLayout,
    init: &CosimInit,
    cap: usize,
) -> VisibleRun {
    run_collect(
        &lowered.program,
        layout,
        init,
        &lowered.block_map.origins,
        &lowered.block_map.block_entry_map,
        &lowered.block_map.reserved_registers,
        cap,
    )
}

/// Assert source and lowered runs agree on everything source-visible.
pub fn assert_preserved(src: &VisibleRun, low: &VisibleRun, context: &str) {
    assert!(
        src.ended,
        "{context}: source run did not end within the cap"
    );
    assert!(
        low.ended,
        "{context}: lowered run did not end within the cap"
    );
    assert_eq!(
        src.events, low.events,
        "{context}: data-op event sequences differ"
    );
    assert_eq!(
        src.block_entries, low.block_entries,
        "{context}: block entry sequences differ"
    );
    assert_eq!(
        src.final_regs, low.final_regs,
        "{context}: final registers differ"
    );
    assert_eq!(
        src.final_heap, low.final_heap,
        "{context}: final heap differs"
    );
}

/// Reserved-register-aware initial state shared by both runs.
pub fn cosim_init(
    rng: &mut rand::rngs::StdRng,
    layout: &MemoryLayout,
    stack_pointer: Value,
) -> CosimInit {
    use rand::Rng;
    let mut regs: Vec<(Register, Value)> = (0..5)
        .map(|i| {
            (
                Register::Gp(i),
                Value(rng.gen_range(0..=layout.width().mask())),
            )
        })
        .collect();
    regs.push((Register::Stk, stack_pointer));
    // rHeap points at the heap base in this model.
    regs.push((Register::Heap, Value(layout.heap().start)));
    let mem = layout
        .heap()
        .addresses()
        .map(|a| (a, Value(rng.gen_range(0..=layout.width().mask()))))
        .collect();
    // r6/r7 carry the generator's jump-table base and loaded target.
    CosimInit {
        regs,
        mem,
        hidden: vec![Register::Gp(6), Register::Gp(7)],
    }
}

//! An executable model of a small sandboxed assembly language.
//!
//! The crate provides:
//!
//! - [`lang`]: the instruction set, expression evaluation, a textual
//!   assembly format, and linear-block structure queries.
//! - [`machine`]: memory layouts with guard addresses, configurations,
//!   and the architectural step relation.
//! - [`leakage`]: side-channel observation events under three attacker
//!   models (`dmem`, `ct`, `arch`) and trace-accumulating execution.
//! - [`speculation`]: the speculative step relation driven by a
//!   prediction oracle, plus the CET-extended relation with endbranch
//!   checking and a shadow stack.
//! - [`oracles`]: enumerable prediction-oracle families (always-correct,
//!   direction-only, historically-valid-BTB, scripted adversary).
//! - [`hardening`]: program transformations: heap/table offset masking,
//!   SFI lowering (indirect-jump conversion, separate return stack, BTB
//!   flush on entry), and CET lowering (endbranch placement, register
//!   interlocks).
//! - [`checker`]: bounded exhaustive checking of breakout security and
//!   poisoning security over enumerated initial states and oracle
//!   scripts, with replayable counterexamples.

pub mod checker;
pub mod hardening;
pub mod lang;
pub mod leakage;
pub mod machine;
pub mod oracles;
pub mod speculation;

pub use lang::{BinOp, Expr, Instruction, LinearBlock, Program, Register, Value, Width};
pub use leakage::{LeakModel, ObsTrace, Observation};
pub use machine::{Config, MemoryLayout, StepOutcome, StuckReason};

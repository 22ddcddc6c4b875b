//! Enumerable prediction-oracle families.
//!
//! A concrete oracle is a class tag plus a finite decision script. The
//! script is consumed one choice per prediction event (every
//! control-flow instruction consults the oracle); an exhausted script
//! predicts correctly. Each choice selects among the class-allowed
//! targets for the event, so enumerating scripts enumerates every
//! behavior a class member can exhibit within the step bound.
//!
//! No class may predict from memory or general-register contents: a
//! prediction is a function of the program counter, the instruction,
//! the architectural target, and the class-internal history only.

use std::fmt;

use serde::{de, Deserialize, Deserializer, Serialize, Serializer};

use crate::lang::{Instruction, Value};
use crate::machine::{Config, MemoryLayout};
use crate::speculation::{run_spec, PredictView, Prediction, SpecMode};

/// Restricted oracle families the checker can quantify over, plus a
/// free-form scripted adversary for replay and experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OracleClass {
    /// Always predicts the architectural target.
    AlwaysCorrect,
    /// Conditional jumps may resolve to either branch; everything else
    /// is predicted correctly.
    DirectionOnly,
    /// Indirect jumps and calls may target any address architecturally
    /// reached from the same pc since the last flush (or the correct
    /// target); conditionals behave as in `DirectionOnly`; returns are
    /// predicted correctly.
    HistoricallyValidBtb,
    /// Unrestricted choices straight from the script.
    ScriptedAdversary,
}

impl std::str::FromStr for OracleClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "always-correct" => Ok(OracleClass::AlwaysCorrect),
            "direction" | "direction-only" => Ok(OracleClass::DirectionOnly),
            "btb" | "historically-valid-btb" => Ok(OracleClass::HistoricallyValidBtb),
            "scripted" | "scripted-adversary" => Ok(OracleClass::ScriptedAdversary),
            other => Err(format!(
                "unknown oracle class '{other}' (expected always-correct|direction|btb|scripted)"
            )),
        }
    }
}

/// One scripted decision, consumed at a single prediction event.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Choice {
    /// Index into the class-allowed target list for the event.
    Index(u16),
    /// Taken arm of a conditional (correct target otherwise).
    Taken,
    /// Fall-through arm of a conditional (correct target otherwise).
    Fall,
    /// The architectural target.
    Correct,
    /// An explicit predicted pc (scripted adversary).
    Target(Value),
}

impl fmt::Display for Choice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Choice::Index(i) => write!(f, "{i}"),
            Choice::Taken => write!(f, "taken"),
            Choice::Fall => write!(f, "fall"),
            Choice::Correct => write!(f, "correct"),
            Choice::Target(v) => write!(f, "target:0x{:x}", v.0),
        }
    }
}

impl std::str::FromStr for Choice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "taken" => Ok(Choice::Taken),
            "fall" | "fallthrough" => Ok(Choice::Fall),
            "correct" => Ok(Choice::Correct),
            _ => {
                if let Some(hex) = s.strip_prefix("target:0x") {
                    u32::from_str_radix(hex, 16)
                        .map(|v| Choice::Target(Value(v)))
                        .map_err(|_| format!("bad target in choice '{s}'"))
                } else if let Some(dec) = s.strip_prefix("target:") {
                    dec.parse::<u32>()
                        .map(|v| Choice::Target(Value(v)))
                        .map_err(|_| format!("bad target in choice '{s}'"))
                } else {
                    s.parse::<u16>()
                        .map(Choice::Index)
                        .map_err(|_| format!("bad choice '{s}'"))
                }
            }
        }
    }
}

impl Serialize for Choice {
    fn serialize<S: Serializer>(&self, ser: S) -> Result<S::Ok, S::Error> {
        ser.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Choice {
    fn deserialize<D: Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        let s = String::deserialize(de)?;
        s.parse().map_err(de::Error::custom)
    }
}

/// A finite sequence of choices; one is consumed per prediction event.
pub type DecisionScript = Vec<Choice>;

pub fn parse_script(s: &str) -> Result<DecisionScript, String> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',').map(|part| part.trim().parse()).collect()
}

/// The targets an oracle of `class` may predict at this event, in
/// canonical order (architectural/taken target first). The instruction
/// at the event must be control flow.
pub fn allowed_targets(class: OracleClass, view: &PredictView<'_>) -> Vec<Value> {
    match class {
        OracleClass::AlwaysCorrect => vec![view.arch_target],
        OracleClass::DirectionOnly => {
            conditional_arms(view).unwrap_or_else(|| vec![view.arch_target])
        }
        OracleClass::HistoricallyValidBtb => {
            if let Some(arms) = conditional_arms(view) {
                return arms;
            }
            match view.insn {
                Instruction::JumpInd { .. } | Instruction::CallInd { .. } => {
                    let mut out = vec![view.arch_target];
                    for &t in view.history.recorded(view.pc) {
                        if !out.contains(&t) {
                            out.push(t);
                        }
                    }
                    out
                }
                _ => vec![view.arch_target],
            }
        }
        OracleClass::ScriptedAdversary => view.width.domain().collect(),
    }
}

/// `[taken, fall]` for a conditional jump, deduplicated.
fn conditional_arms(view: &PredictView<'_>) -> Option<Vec<Value>> {
    match view.insn {
        Instruction::JumpIf { disp, .. } => {
            let taken = view
                .width
                .wrap(view.pc.0 as u64 + view.width.wrap_signed(*disp as i64).0 as u64);
            let fall = view.width.wrap(view.pc.0 as u64 + 1);
            if taken == fall {
                Some(vec![taken])
            } else {
                Some(vec![taken, fall])
            }
        }
        _ => None,
    }
}

/// A concrete oracle: class, script, and a cursor. The predictor state
/// proper (the per-pc target history) lives in the configuration and is
/// threaded through [`Prediction::new_state`]; the cursor is the
/// adversary's position in its own strategy.
#[derive(Debug, Clone)]
pub struct Oracle {
    class: OracleClass,
    script: DecisionScript,
    cursor: usize,
    /// Allowed-target count logged at each prediction event; drives
    /// script enumeration.
    observed_branching: Vec<u16>,
}

impl Oracle {
    pub fn always_correct() -> Oracle {
        Oracle::scripted(OracleClass::AlwaysCorrect, Vec::new())
    }

    pub fn scripted(class: OracleClass, script: DecisionScript) -> Oracle {
        Oracle {
            class,
            script,
            cursor: 0,
            observed_branching: Vec::new(),
        }
    }

    pub fn class(&self) -> OracleClass {
        self.class
    }

    pub fn script(&self) -> &DecisionScript {
        &self.script
    }

    /// Reset the cursor for a fresh run.
    pub fn rewind(&mut self) {
        self.cursor = 0;
        self.observed_branching.clear();
    }

    pub fn observed_branching(&self) -> &[u16] {
        &self.observed_branching
    }

    /// Produce the predicted pc and updated predictor state for a
    /// control-flow event. Deterministic in (view, cursor); consumes one
    /// script position per event.
    pub fn predict(&mut self, view: &PredictView<'_>) -> Prediction {
        let targets = allowed_targets(self.class, view);
        self.observed_branching
            .push(targets.len().min(u16::MAX as usize) as u16);
        let choice = self
            .script
            .get(self.cursor)
            .copied()
            .unwrap_or(Choice::Correct);
        self.cursor += 1;

        let target = match choice {
            Choice::Correct => view.arch_target,
            Choice::Index(i) => targets.get(i as usize).copied().unwrap_or(view.arch_target),
            Choice::Taken => conditional_arms(view)
                .map(|arms| arms[0])
                .unwrap_or(view.arch_target),
            Choice::Fall => conditional_arms(view)
                .map(|arms| *arms.last().unwrap())
                .unwrap_or(view.arch_target),
            Choice::Target(v) => {
                if self.class == OracleClass::ScriptedAdversary {
                    view.width.wrap(v.0 as u64)
                } else {
                    view.arch_target
                }
            }
        };

        let mut new_state = view.history.clone();
        if matches!(
            view.insn,
            Instruction::JumpInd { .. } | Instruction::CallInd { .. }
        ) {
            new_state.record(view.pc, view.arch_target);
        }
        Prediction { target, new_state }
    }
}

/// Enumerate every decision script the class can exhibit within `n`
/// steps starting from any of `inits`, in lexicographic order. The
/// choice tree is grown by probing: a script is extended while some run
/// still reaches a prediction event past its end, with branching equal
/// to the largest allowed-target count any run sees at that position.
pub fn enumerate_scripts(
    class: OracleClass,
    layout: &MemoryLayout,
    n: usize,
    mode: SpecMode,
    inits: &[Config],
) -> Vec<DecisionScript> {
    enumerate_scripts_capped(class, layout, n, mode, inits, usize::MAX)
        .expect("uncapped enumeration cannot exceed the cap")
}

/// As [`enumerate_scripts`], but gives up with `None` once more than
/// `cap` scripts would be produced.
pub fn enumerate_scripts_capped(
    class: OracleClass,
    layout: &MemoryLayout,
    n: usize,
    mode: SpecMode,
    inits: &[Config],
    cap: usize,
) -> Option<Vec<DecisionScript>> {
    let mut leaves = Vec::new();
    // Depth-first, children pushed in reverse so indices pop ascending.
    let mut stack: Vec<DecisionScript> = vec![Vec::new()];
    while let Some(script) = stack.pop() {
        let pos = script.len();
        let mut branching = 0u16;
        for init in inits {
            let mut oracle = Oracle::scripted(class, script.clone());
            let _ = run_spec(init, layout, &mut oracle, n, mode);
            let observed = oracle.observed_branching();
            if observed.len() > pos {
                branching = branching.max(observed[pos]);
            }
        }
        if branching == 0 {
            leaves.push(script);
            if leaves.len() > cap {
                return None;
            }
        } else {
            for i in (0..branching).rev() {
                let mut child = script.clone();
                child.push(Choice::Index(i));
                stack.push(child);
            }
        }
    }
    Some(leaves)
}

/// Enumerate oracles (one per script) for runs starting at `init`.
pub fn enumerate_oracles(
    class: OracleClass,
    layout: &MemoryLayout,
    n: usize,
    mode: SpecMode,
    init: &Config,
) -> Vec<Oracle> {
    enumerate_scripts(class, layout, n, mode, std::slice::from_ref(init))
        .into_iter()
        .map(|s| Oracle::scripted(class, s))
        .collect()
}

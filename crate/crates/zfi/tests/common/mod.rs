//! Shared test support: corpus loading, program generators, the naive
//! reference checker, and the co-simulation harness.

#![allow(dead_code)]

pub mod cosim;
pub mod generators;
pub mod naive;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use zfi::lang::{parse_program, Program};
use zfi::machine::{Config, MemoryLayout};

pub fn corpus_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../corpus")
}

pub fn load_corpus_program(name: &str) -> Program {
    let path = corpus_dir().join(name);
    let text = std::fs::read_to_string(&path)
        .unwrap_or_else(|e| panic!("cannot read {}: {e}", path.display()));
    parse_program(&text).unwrap_or_else(|e| panic!("{name} does not parse: {e}"))
}

pub fn load_corpus_layout(name: &str) -> MemoryLayout {
    let path = corpus_dir().join(name);
    let text = std::fs::read_to_string(&path)
        .unwrap_or_else(|e| panic!("cannot read {}: {e}", path.display()));
    MemoryLayout::from_toml_str(&text).unwrap_or_else(|e| panic!("{name} invalid: {e}"))
}

pub fn boot(p: &Program, layout: &MemoryLayout) -> Config {
    Config::initial(Arc::new(p.clone()), layout).expect("boot config")
}

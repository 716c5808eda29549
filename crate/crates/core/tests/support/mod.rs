#![allow(dead_code)]

pub mod gen;
pub mod laws;
pub mod reference;
pub mod smt;

use std::path::PathBuf;

use axcat::catlang::{bundled, CatModel};
use axcat::masm::{parse_program, Expectation, Outcome, Program};
use axcat::speculation::{Mode, SpecConfig};

pub fn corpus_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../corpus")
}

pub fn corpus_program(name: &str) -> Program {
    let path = corpus_dir().join(format!("{name}.litmus"));
    let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    parse_program(&text).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

pub fn model(name: &str) -> CatModel {
    bundled(name).unwrap_or_else(|| panic!("no bundled model {name}"))
}

/// Configuration for a model: forwarding follows whether the model reads srf.
pub fn config_for(m: &CatModel, base: SpecConfig) -> SpecConfig {
    SpecConfig {
        psf: m.uses_base(axcat::catlang::BaseRel::Srf),
        ..base
    }
}

/// Every corpus file with its parsed program, sorted by name.
pub fn corpus() -> Vec<(String, Program)> {
    let mut out: Vec<(String, Program)> = std::fs::read_dir(corpus_dir())
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "litmus"))
        .map(|p| {
            let name = p.file_stem().unwrap().to_string_lossy().into_owned();
            (name.clone(), corpus_program(&name))
        })
        .collect();
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

/// One `expect` line resolved with the corpus runner defaults: speculative
/// mode, k = 2, w = 8, w' = 2, 3-bit domain.
#[derive(Debug, Clone)]
pub struct Job {
    pub model: CatModel,
    pub cfg: SpecConfig,
    pub k: u32,
    pub bits: u32,
    pub expected: Outcome,
}

pub fn job(e: &Expectation) -> Job {
    let m = model(&e.model);
    let mode = match e.mode.as_deref() {
        Some(s) => s.parse::<Mode>().unwrap(),
        None => Mode::Speculative,
    };
    let cfg = config_for(
        &m,
        SpecConfig {
            mode,
            window: e.w.unwrap_or(8),
            buffer: e.buffer.unwrap_or(2),
            ..SpecConfig::default()
        },
    );
    Job {
        model: m,
        cfg,
        k: e.k.unwrap_or(2),
        bits: e.bits.unwrap_or(3),
        expected: e.outcome,
    }
}

//! Isolation checking: enumeration of candidate executions, filtering by
//! control flow and a CAT model, and export of witnesses and SMT queries.

mod dot;
mod search;
mod smt;

use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;

pub use dot::emit_witness_dot;
pub use smt::{emit_smt, MAX_SMT_BITS};

use crate::catlang::{
    check_assertions, check_srf_fence, evaluate, BaseRel, CatModel, Env, EvalError,
};
use crate::events::{base_relations, propagate_values, CandidateExecution, EventSets, EventsError};
use crate::masm::{unroll, Domain, MasmError, Origin, Outcome, Program};
use crate::speculation::{check_control_flow, check_fences, check_window, Mode, SpecConfig};

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error(transparent)]
    Masm(#[from] MasmError),
    #[error(transparent)]
    Events(#[from] EventsError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("a {bits}-bit domain cannot represent {what} {value}")]
    DomainTooSmall {
        bits: u32,
        what: &'static str,
        value: u64,
    },
    #[error("domain width must be between 1 and 16 bits, got {0}")]
    BadDomain(u32),
    #[error("unroll bound must be at least 1")]
    BadBound,
    #[error("speculation window must be at least 1")]
    BadWindow,
    #[error("store buffer size must be at least 1")]
    BadBuffer,
    #[error("SMT export supports domains of at most {max} bits, got {0}", max = smt::MAX_SMT_BITS)]
    SmtDomain(u32),
    #[error("cannot build worker pool: {0}")]
    Pool(String),
}

/// Search settings that do not change the verdict.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EngineOptions {
    /// Skip branch guesses, transient runs and candidates that cannot
    /// matter for the verdict.
    pub prune: bool,
    /// Worker count; `None` uses the global pool.
    pub jobs: Option<usize>,
}

impl Default for EngineOptions {
    fn default() -> Self {
        EngineOptions {
            prune: true,
            jobs: None,
        }
    }
}

/// Counters collected while searching.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize)]
pub struct Stats {
    /// Branch-choice skeletons explored.
    pub skeletons: u64,
    /// Candidate executions generated.
    pub candidates: u64,
    /// Skipped without checks: neither reads the secret nor reaches the unwind limit.
    pub skipped: u64,
    pub control_flow_rejected: u64,
    pub window_rejected: u64,
    pub fence_rejected: u64,
    pub srf_fence_rejected: u64,
    pub model_rejected: u64,
    pub consistent: u64,
}

impl Stats {
    fn add(&mut self, o: &Stats) {
        self.skeletons += o.skeletons;
        self.candidates += o.candidates;
        self.skipped += o.skipped;
        self.control_flow_rejected += o.control_flow_rejected;
        self.window_rejected += o.window_rejected;
        self.fence_rejected += o.fence_rejected;
        self.srf_fence_rejected += o.srf_fence_rejected;
        self.model_rejected += o.model_rejected;
        self.consistent += o.consistent;
    }
}

#[derive(Debug, Clone)]
pub struct Verdict {
    pub outcome: Outcome,
    /// A consistent execution reading the secret; present iff unsafe.
    pub witness: Option<CandidateExecution>,
    /// Unroll bound used.
    pub bound: u32,
    pub stats: Stats,
    /// The unrolled program the witness refers to.
    pub program: Program,
    /// Unrolling cut some loop.
    pub incomplete: bool,
}

/// JSON verdict record.
#[derive(Debug, Clone, serde::Serialize)]
pub struct VerdictRecord {
    pub program: String,
    pub model: String,
    pub mode: Mode,
    pub k: u32,
    pub w: u32,
    pub w_prime: u32,
    pub bits: u32,
    pub outcome: Outcome,
    pub candidates: u64,
    pub stats: Stats,
    pub elapsed_ms: u128,
}

/// Why a candidate was accepted or rejected.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Check {
    ControlFlow,
    Window,
    Fence,
    SrfFence,
    /// The model assertion with this index failed.
    Model(usize),
    Consistent,
}

/// Runs every filter on a candidate, in order: control flow, speculation
/// window, fences, forwarding across fences, then the model's assertions.
pub fn check_candidate(
    p: &Program,
    m: &CatModel,
    cfg: &SpecConfig,
    x: &CandidateExecution,
) -> Result<Check, EvalError> {
    if !check_control_flow(p, x, cfg) {
        return Ok(Check::ControlFlow);
    }
    if cfg.mode == Mode::Speculative && !check_window(x, cfg.window) {
        return Ok(Check::Window);
    }
    if !check_fences(x) {
        return Ok(Check::Fence);
    }
    if !check_srf_fence(x) {
        return Ok(Check::SrfFence);
    }
    let base = base_relations(x);
    let sets = EventSets::of(x);
    let env = Env {
        base: &base,
        sets: &sets,
        cfg,
    };
    let b = evaluate(m, &env)?;
    let rep = check_assertions(m, &env, &b)?;
    Ok(match rep.first_violation {
        Some(i) => Check::Model(i),
        None => Check::Consistent,
    })
}

/// Independently re-validates a witness: data flow, every filter, and the
/// secret read.
pub fn replay_witness(
    p: &Program,
    m: &CatModel,
    cfg: &SpecConfig,
    bits: u32,
    x: &CandidateExecution,
) -> bool {
    let vals = propagate_values(p, x, Domain::new(bits));
    let mine: Vec<(Option<u64>, Option<u64>)> = x.events.iter().map(|e| (e.addr, e.val)).collect();
    if !vals.contains(&mine) {
        return false;
    }
    matches!(check_candidate(p, m, cfg, x), Ok(Check::Consistent)) && !x.secret_reads().is_empty()
}

/// Whether the execution runs an instruction that only exists past the
/// unrolling bound.
pub fn reaches_unwind_limit(p: &Program, x: &CandidateExecution) -> bool {
    x.events.iter().any(|e| {
        e.origin
            .and_then(|o| p.threads[o.thread].get(o.label))
            .is_some_and(|i| i.origin == Origin::UnwindLimit)
    })
}

fn validate(
    p: &Program,
    m: &CatModel,
    cfg: &SpecConfig,
    k: u32,
    bits: u32,
) -> Result<Domain, EngineError> {
    if !(1..=16).contains(&bits) {
        return Err(EngineError::BadDomain(bits));
    }
    if k == 0 {
        return Err(EngineError::BadBound);
    }
    if cfg.window == 0 {
        return Err(EngineError::BadWindow);
    }
    if cfg.buffer == 0 {
        return Err(EngineError::BadBuffer);
    }
    if m.uses_base(BaseRel::Srf) && !cfg.psf {
        return Err(EvalError::SrfWithoutPsf.into());
    }
    let dom = Domain::new(bits);
    if !dom.contains(p.secret_addr) {
        return Err(EngineError::DomainTooSmall {
            bits,
            what: "secret address",
            value: p.secret_addr,
        });
    }
    for r in &p.layout.regions {
        if !dom.contains(r.base + r.extent - 1) {
            return Err(EngineError::DomainTooSmall {
                bits,
                what: "address",
                value: r.base + r.extent - 1,
            });
        }
        if !r.input && !dom.contains(r.init) {
            return Err(EngineError::DomainTooSmall {
                bits,
                what: "initial value",
                value: r.init,
            });
        }
    }
    Ok(dom)
}

/// Decides whether any consistent execution of `p`, unrolled `k` times,
/// reads the secret.
pub fn check_isolation(
    p: &Program,
    m: &CatModel,
    cfg: &SpecConfig,
    k: u32,
    bits: u32,
) -> Result<Verdict, EngineError> {
    check_isolation_with(p, m, cfg, k, bits, EngineOptions::default())
}

pub fn check_isolation_with(
    p: &Program,
    m: &CatModel,
    cfg: &SpecConfig,
    k: u32,
    bits: u32,
    opts: EngineOptions,
) -> Result<Verdict, EngineError> {
    let dom = validate(p, m, cfg, k, bits)?;
    let un = unroll(p, k);
    let prog = un.program;
    let units = search::units(&prog, cfg, dom, opts.prune)?;
    let best = AtomicUsize::new(usize::MAX);
    let run = || -> Result<Vec<search::UnitResult>, EvalError> {
        units
            .par_iter()
            .enumerate()
            .map(|(i, u)| {
                if i > best.load(Ordering::Relaxed) {
                    return Ok(search::UnitResult::default());
                }
                let r = search::run_unit(&prog, m, cfg, dom, u, opts.prune, &|| {
                    i > best.load(Ordering::Relaxed)
                })?;
                if r.witness.is_some() {
                    best.fetch_min(i, Ordering::Relaxed);
                }
                Ok(r)
            })
            .collect()
    };
    let results = match opts.jobs {
        Some(j) => rayon::ThreadPoolBuilder::new()
            .num_threads(j.max(1))
            .build()
            .map_err(|e| EngineError::Pool(e.to_string()))?
            .install(run)?,
        None => run()?,
    };
    let mut stats = Stats::default();
    let mut witness = None;
    let mut limit = false;
    let mut seen = std::collections::BTreeSet::new();
    for (i, r) in results.into_iter().enumerate() {
        if seen.insert(units[i].skeleton) {
            stats.skeletons += 1;
        }
        stats.add(&r.stats);
        limit |= r.limit;
        if let Some(w) = r.witness {
            witness = Some(w);
            break;
        }
    }
    let outcome = if witness.is_some() {
        Outcome::Unsafe
    } else if un.incomplete && limit {
        Outcome::Unknown
    } else {
        Outcome::Safe
    };
    Ok(Verdict {
        outcome,
        witness,
        bound: k,
        stats,
        program: prog,
        incomplete: un.incomplete,
    })
}

/// Every candidate execution of `p` unrolled `k` times, before any
/// filtering, in deterministic order.
pub fn enumerate_candidates(
    p: &Program,
    cfg: &SpecConfig,
    k: u32,
    bits: u32,
) -> Result<Vec<CandidateExecution>, EngineError> {
    if !(1..=16).contains(&bits) {
        return Err(EngineError::BadDomain(bits));
    }
    let dom = Domain::new(bits);
    let prog = unroll(p, k).program;
    let units = search::units(&prog, cfg, dom, false)?;
    let mut out = Vec::new();
    for u in &units {
        search::each_candidate(&prog, cfg, dom, u, false, &mut |x| {
            out.push(x);
            true
        });
    }
    Ok(out)
}

/// Number of branch-choice skeletons explored for `p`.
pub fn count_skeletons(
    p: &Program,
    cfg: &SpecConfig,
    k: u32,
    prune: bool,
) -> Result<usize, EngineError> {
    let prog = unroll(p, k).program;
    Ok(search::skeletons(&prog, cfg, prune)?.len())
}

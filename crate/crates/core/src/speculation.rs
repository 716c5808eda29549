//! Control-flow constraints: traditional and speculative control flow, the
//! speculation window and the fence rule.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::events::{CandidateExecution, Event, EventKind};
use crate::masm::{pred_in, Label, Program, Stmt, Thread};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Traditional,
    Speculative,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Traditional => "traditional",
            Mode::Speculative => "speculative",
        })
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "traditional" => Ok(Mode::Traditional),
            "speculative" => Ok(Mode::Speculative),
            _ => Err(format!(
                "unknown mode `{s}` (expected traditional or speculative)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SpecConfig {
    pub mode: Mode,
    /// Branch speculation window: transient runs must be shorter than this.
    pub window: u32,
    /// Store buffer size, read by models through `w'`.
    pub buffer: u32,
    /// Leave every branch prediction unconstrained; otherwise all are correct.
    pub always_mispredict: bool,
    /// Model predictive store forwarding through `srf`.
    pub psf: bool,
}

impl Default for SpecConfig {
    fn default() -> Self {
        SpecConfig {
            mode: Mode::Speculative,
            window: 8,
            buffer: 2,
            always_mispredict: true,
            psf: false,
        }
    }
}

impl SpecConfig {
    pub fn traditional() -> Self {
        SpecConfig {
            mode: Mode::Traditional,
            ..Self::default()
        }
    }

    pub fn speculative(window: u32) -> Self {
        SpecConfig {
            window,
            ..Self::default()
        }
    }
}

/// Execution status of each label of one thread.
struct ThreadView<'a> {
    th: &'a Thread,
    ev: BTreeMap<Label, &'a Event>,
}

impl<'a> ThreadView<'a> {
    fn new(p: &'a Program, x: &'a CandidateExecution, t: usize) -> Self {
        let ev = x
            .events
            .iter()
            .filter(|e| e.thread() == Some(t))
            .map(|e| (e.label().unwrap(), e))
            .collect();
        ThreadView {
            th: &p.threads[t],
            ev,
        }
    }

    fn committed(&self, l: Label) -> bool {
        self.ev.get(&l).is_some_and(|e| !e.transient)
    }

    fn transient(&self, l: Label) -> bool {
        self.ev.get(&l).is_some_and(|e| e.transient)
    }

    fn executed(&self, l: Label) -> bool {
        self.ev.contains_key(&l)
    }

    fn rval_nonzero(&self, l: Label) -> bool {
        self.ev.get(&l).and_then(|e| e.val).unwrap_or(0) != 0
    }

    fn cp(&self, l: Label) -> bool {
        self.ev.get(&l).and_then(|e| e.cp).unwrap_or(true)
    }

    /// Disjunction of the committed dependencies of `l`; `use_cp` adds the
    /// correct-prediction conjuncts on branches.
    fn cfd(&self, l: Label, use_cp: bool) -> bool {
        pred_in(self.th, l).into_iter().any(|lp| {
            let stmt = &self.th.get(lp).unwrap().stmt;
            let c = self.committed(lp);
            match stmt {
                Stmt::Beqz { target, .. } => {
                    let ok = !use_cp || self.cp(lp);
                    let fall = lp + 1 == l && c && self.rval_nonzero(lp) && ok;
                    let jump = *target == l && c && !self.rval_nonzero(lp) && ok;
                    fall || jump
                }
                _ => c,
            }
        })
    }

    /// Disjunction of the speculative dependencies of `l`.
    fn scfd(&self, l: Label) -> bool {
        pred_in(self.th, l).into_iter().any(|lp| {
            let stmt = &self.th.get(lp).unwrap().stmt;
            match stmt {
                Stmt::Beqz { target, .. } => {
                    let open = self.executed(lp) && !self.cp(lp);
                    let fall = lp + 1 == l && open && !self.rval_nonzero(lp);
                    let jump = *target == l && open && self.rval_nonzero(lp);
                    fall || jump
                }
                _ => self.transient(lp),
            }
        })
    }
}

fn each_label(
    p: &Program,
    x: &CandidateExecution,
    f: impl Fn(&ThreadView, Label, bool) -> bool,
) -> bool {
    (0..p.threads.len()).all(|t| {
        let v = ThreadView::new(p, x, t);
        v.th.instrs
            .iter()
            .enumerate()
            .all(|(i, ins)| f(&v, ins.label, i == 0))
    })
}

fn events_belong(p: &Program, x: &CandidateExecution) -> bool {
    x.events.iter().all(|e| match e.origin {
        None => e.kind.is_init(),
        Some(o) => p
            .threads
            .get(o.thread)
            .and_then(|t| t.get(o.label))
            .is_some_and(|i| EventKind::of(&i.stmt) == e.kind),
    })
}

/// Traditional control flow: an instruction executes exactly when the
/// entry or one of its predecessors leads to it.
pub fn check_traditional_cf(p: &Program, x: &CandidateExecution) -> bool {
    if !x.transient().is_empty() || !events_belong(p, x) {
        return false;
    }
    each_label(p, x, |v, l, entry| {
        let must = entry || v.cfd(l, false);
        v.committed(l) == must
    })
}

/// Speculative control flow: committed events follow correctly predicted
/// branches, transient ones are opened by a misprediction and propagate.
pub fn check_speculative_cf(p: &Program, x: &CandidateExecution, cfg: &SpecConfig) -> bool {
    if !events_belong(p, x) {
        return false;
    }
    if !cfg.always_mispredict && x.events.iter().any(|e| e.cp == Some(false)) {
        return false;
    }
    each_label(p, x, |v, l, entry| {
        let committed = entry || v.cfd(l, true);
        let transient = !entry && v.scfd(l);
        v.committed(l) == committed && v.transient(l) == transient
    })
}

/// Dispatches on the configured mode.
pub fn check_control_flow(p: &Program, x: &CandidateExecution, cfg: &SpecConfig) -> bool {
    match cfg.mode {
        Mode::Traditional => check_traditional_cf(p, x),
        Mode::Speculative => check_speculative_cf(p, x, cfg),
    }
}

/// Every run of po-consecutive transient events is shorter than `w`.
pub fn check_window(x: &CandidateExecution, w: u32) -> bool {
    let mut threads: BTreeMap<usize, Vec<&Event>> = BTreeMap::new();
    for e in &x.events {
        if let Some(t) = e.thread() {
            threads.entry(t).or_default().push(e);
        }
    }
    threads.values_mut().all(|evs| {
        evs.sort_by_key(|e| (0..x.len()).filter(|a| x.po.contains(*a, e.id)).count());
        let mut run = 0u32;
        evs.iter().all(|e| {
            run = if e.transient { run + 1 } else { 0 };
            run < w
        })
    })
}

/// No fence executes transiently.
pub fn check_fences(x: &CandidateExecution) -> bool {
    !x.events
        .iter()
        .any(|e| e.kind == EventKind::Fence && e.transient)
}

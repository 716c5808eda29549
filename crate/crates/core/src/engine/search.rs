use std::collections::BTreeMap;
use std::sync::Arc;

use super::{check_candidate, reaches_unwind_limit, Check, Stats};
use crate::catlang::{CatModel, EvalError};
use crate::events::{
    build_events, BranchChoice, CandidateExecution, Choices, EventsError, Skeleton, Source,
};
use crate::masm::{Domain, Expr, Program, Stmt};
use crate::speculation::{Mode, SpecConfig};

/// One independent piece of work: a skeleton under one input valuation.
pub(super) struct Unit {
    pub skeleton: usize,
    pub skel: Arc<Skeleton>,
    pub inputs: BTreeMap<u64, u64>,
}

#[derive(Default)]
pub(super) struct UnitResult {
    pub stats: Stats,
    pub witness: Option<CandidateExecution>,
    /// Some consistent execution reached the unwind limit.
    pub limit: bool,
}

fn branch_options(cfg: &SpecConfig) -> Vec<BranchChoice> {
    let cps: &[bool] = if cfg.mode == Mode::Traditional || !cfg.always_mispredict {
        &[true]
    } else {
        &[false, true]
    };
    [false, true]
        .iter()
        .flat_map(|t| cps.iter().map(move |c| BranchChoice { taken: *t, cp: *c }))
        .collect()
}

/// All skeletons in lexicographic order of their branch choices. With
/// `prune`, skeletons with a transient fence or a transient run of at least
/// `w` events are dropped.
pub(super) fn skeletons(
    p: &Program,
    cfg: &SpecConfig,
    prune: bool,
) -> Result<Vec<Skeleton>, EventsError> {
    fn rec(
        p: &Program,
        cfg: &SpecConfig,
        prune: bool,
        opts: &[BranchChoice],
        choices: &mut Choices,
        out: &mut Vec<Skeleton>,
    ) -> Result<(), EventsError> {
        match build_events(p, cfg.mode, choices) {
            Ok(s) => {
                let keep =
                    !prune || (!s.transient_fence && s.max_transient_run() < cfg.window as usize);
                if keep {
                    out.push(s);
                }
                Ok(())
            }
            Err(EventsError::MissingChoice { thread, label }) => {
                for o in opts {
                    choices.insert((thread, label), *o);
                    rec(p, cfg, prune, opts, choices, out)?;
                }
                choices.remove(&(thread, label));
                Ok(())
            }
            Err(e) => Err(e),
        }
    }
    let mut out = Vec::new();
    rec(
        p,
        cfg,
        prune,
        &branch_options(cfg),
        &mut Choices::new(),
        &mut out,
    )?;
    Ok(out)
}

pub(super) fn units(
    p: &Program,
    cfg: &SpecConfig,
    dom: Domain,
    prune: bool,
) -> Result<Vec<Unit>, EventsError> {
    let skels = skeletons(p, cfg, prune)?;
    let inputs: Vec<u64> = p.inputs.iter().copied().collect();
    let mut valuations: Vec<BTreeMap<u64, u64>> = vec![BTreeMap::new()];
    for a in &inputs {
        valuations = valuations
            .into_iter()
            .flat_map(|m| {
                dom.values().map(move |v| {
                    let mut m = m.clone();
                    m.insert(*a, v);
                    m
                })
            })
            .collect();
    }
    let mut out = Vec::new();
    for (i, s) in skels.into_iter().enumerate() {
        let s = Arc::new(s);
        for v in &valuations {
            out.push(Unit {
                skeleton: i,
                skel: s.clone(),
                inputs: v.clone(),
            });
        }
    }
    Ok(out)
}

pub(super) fn run_unit(
    p: &Program,
    m: &CatModel,
    cfg: &SpecConfig,
    dom: Domain,
    u: &Unit,
    prune: bool,
    abort: &dyn Fn() -> bool,
) -> Result<UnitResult, EvalError> {
    let mut res = UnitResult::default();
    let mut err = None;
    each_candidate(p, cfg, dom, u, prune, &mut |x| {
        if abort() {
            return false;
        }
        res.stats.candidates += 1;
        let secret = !x.secret_reads().is_empty();
        let limit = reaches_unwind_limit(p, &x);
        if prune && !secret && !limit {
            res.stats.skipped += 1;
            return true;
        }
        match check_candidate(p, m, cfg, &x) {
            Err(e) => {
                err = Some(e);
                false
            }
            Ok(Check::Consistent) => {
                res.stats.consistent += 1;
                res.limit |= limit;
                if secret {
                    res.witness = Some(x);
                    return false;
                }
                true
            }
            Ok(c) => {
                let s = &mut res.stats;
                match c {
                    Check::ControlFlow => s.control_flow_rejected += 1,
                    Check::Window => s.window_rejected += 1,
                    Check::Fence => s.fence_rejected += 1,
                    Check::SrfFence => s.srf_fence_rejected += 1,
                    _ => s.model_rejected += 1,
                }
                true
            }
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(res),
    }
}

#[derive(Debug, Clone, Copy)]
enum Src {
    Init(u64),
    Store(usize),
    /// Reads a po-later or later-thread store holding this value.
    Deferred(u64),
}

struct Search<'a> {
    p: &'a Program,
    dom: Domain,
    skel: &'a Skeleton,
    prune: bool,
    psf: bool,
    secret_val: u64,
    inputs: &'a BTreeMap<u64, u64>,
    stmts: Vec<&'a Stmt>,
    later_store: Vec<bool>,
    nregs: usize,
    addrs: Vec<Option<u64>>,
    vals: Vec<Option<u64>>,
    src: Vec<Option<Src>>,
}

/// Calls `f` on every candidate of the unit until it returns false.
pub(super) fn each_candidate(
    p: &Program,
    cfg: &SpecConfig,
    dom: Domain,
    u: &Unit,
    prune: bool,
    f: &mut dyn FnMut(CandidateExecution) -> bool,
) {
    let skel = &*u.skel;
    let n = skel.events.len();
    let stmts: Vec<&Stmt> = skel
        .events
        .iter()
        .map(|e| &p.threads[e.thread].get(e.label).unwrap().stmt)
        .collect();
    let mut later_store = vec![false; n];
    let mut seen = false;
    for i in (0..n).rev() {
        later_store[i] = seen;
        seen |= matches!(stmts[i], Stmt::Store { .. }) && !skel.events[i].transient;
    }
    let mut s = Search {
        p,
        dom,
        skel,
        prune,
        psf: cfg.psf,
        secret_val: p.secret_value(dom),
        inputs: &u.inputs,
        stmts,
        later_store,
        nregs: p.register_count().max(1),
        addrs: vec![None; n],
        vals: vec![None; n],
        src: vec![None; n],
    };
    s.dfs(0, Vec::new(), f);
}

impl Search<'_> {
    fn init_value(&self, a: u64) -> u64 {
        if a == self.p.secret_addr {
            self.secret_val
        } else if let Some(v) = self.inputs.get(&a) {
            *v
        } else {
            self.p.fixed_init(a) & self.dom.mask()
        }
    }

    fn eval(&self, e: &Expr, regs: &[u64]) -> u64 {
        e.eval(&|r| regs[r as usize], self.p.secret_addr, self.dom)
    }

    fn dfs(
        &mut self,
        i: usize,
        regs: Vec<u64>,
        f: &mut dyn FnMut(CandidateExecution) -> bool,
    ) -> bool {
        let n = self.skel.events.len();
        if i == n {
            return self.leaf(f);
        }
        let ev = &self.skel.events[i];
        let mut regs = if i == 0 || self.skel.events[i - 1].thread != ev.thread {
            vec![0; self.nregs]
        } else {
            regs
        };
        match self.stmts[i] {
            Stmt::Assign { dst, value } => {
                let v = self.eval(value, &regs);
                regs[*dst as usize] = v;
                self.vals[i] = Some(v);
            }
            Stmt::CondAssign { dst, cond, value } => {
                if self.eval(cond, &regs) != 0 {
                    regs[*dst as usize] = self.eval(value, &regs);
                }
                self.vals[i] = Some(regs[*dst as usize]);
            }
            Stmt::Store { addr, value } => {
                self.addrs[i] = Some(self.eval(addr, &regs));
                self.vals[i] = Some(self.eval(value, &regs));
            }
            Stmt::Beqz { reg, .. } => {
                let v = regs[*reg as usize];
                self.vals[i] = Some(v);
                let taken = ev.choice.map(|c| c.taken).unwrap_or(v == 0);
                if self.prune && (v == 0) != taken {
                    return true;
                }
            }
            Stmt::Load { dst, addr } => {
                let a = self.eval(addr, &regs);
                self.addrs[i] = Some(a);
                let dst = *dst as usize;
                for (src, v) in self.load_options(i, a) {
                    self.vals[i] = Some(v);
                    self.src[i] = Some(src);
                    let mut r = regs.clone();
                    r[dst] = v;
                    if !self.dfs(i + 1, r, f) {
                        return false;
                    }
                }
                self.src[i] = None;
                return true;
            }
            Stmt::Jmp { .. } | Stmt::Skip | Stmt::Fence => {}
        }
        self.dfs(i + 1, regs, f)
    }

    fn load_options(&self, i: usize, a: u64) -> Vec<(Src, u64)> {
        let me = &self.skel.events[i];
        let mut out = vec![(Src::Init(a), self.init_value(a))];
        for j in 0..i {
            let w = &self.skel.events[j];
            if !matches!(self.stmts[j], Stmt::Store { .. }) {
                continue;
            }
            let same_thread = w.thread == me.thread;
            if w.transient && !(me.transient && same_thread) {
                continue;
            }
            let same_addr = self.addrs[j] == Some(a);
            let alias = self.psf && same_thread;
            if same_addr || alias {
                out.push((Src::Store(j), self.vals[j].unwrap()));
            }
        }
        if self.later_store[i] {
            out.extend(self.dom.values().map(|v| (Src::Deferred(v), v)));
        }
        out
    }

    fn leaf(&mut self, f: &mut dyn FnMut(CandidateExecution) -> bool) -> bool {
        let n = self.skel.events.len();
        let deferred: Vec<(usize, u64)> = (0..n)
            .filter_map(|i| match self.src[i] {
                Some(Src::Deferred(v)) => Some((i, v)),
                _ => None,
            })
            .collect();
        let mut matches: Vec<Vec<usize>> = Vec::new();
        for (i, v) in &deferred {
            let cands: Vec<usize> = (i + 1..n)
                .filter(|j| {
                    let w = &self.skel.events[*j];
                    matches!(self.stmts[*j], Stmt::Store { .. })
                        && !w.transient
                        && self.addrs[*j] == self.addrs[*i]
                        && self.vals[*j] == Some(*v)
                })
                .collect();
            if cands.is_empty() {
                return true;
            }
            matches.push(cands);
        }
        let mut base: BTreeMap<usize, Source> = BTreeMap::new();
        for i in 0..n {
            match self.src[i] {
                Some(Src::Init(a)) => {
                    base.insert(i, Source::Init(a));
                }
                Some(Src::Store(j)) => {
                    base.insert(i, Source::Store(j));
                }
                _ => {}
            }
        }
        let mut choice = vec![0usize; deferred.len()];
        loop {
            let mut sources = base.clone();
            for (k, (i, _)) in deferred.iter().enumerate() {
                sources.insert(*i, Source::Store(matches[k][choice[k]]));
            }
            if !self.with_coherence(&sources, f) {
                return false;
            }
            // Next combination, last position fastest.
            let mut k = deferred.len();
            loop {
                if k == 0 {
                    return true;
                }
                k -= 1;
                choice[k] += 1;
                if choice[k] < matches[k].len() {
                    break;
                }
                choice[k] = 0;
            }
        }
    }

    fn with_coherence(
        &self,
        sources: &BTreeMap<usize, Source>,
        f: &mut dyn FnMut(CandidateExecution) -> bool,
    ) -> bool {
        let mut per_addr: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
        for (i, e) in self.skel.events.iter().enumerate() {
            if matches!(self.stmts[i], Stmt::Store { .. }) && !e.transient {
                per_addr.entry(self.addrs[i].unwrap()).or_default().push(i);
            }
        }
        let addrs: Vec<u64> = per_addr.keys().copied().collect();
        let perms: Vec<Vec<Vec<usize>>> =
            addrs.iter().map(|a| permutations(&per_addr[a])).collect();
        let mut choice = vec![0usize; addrs.len()];
        let mut inits: BTreeMap<u64, u64> = self.inputs.clone();
        inits.insert(self.p.secret_addr, self.secret_val);
        loop {
            let co: BTreeMap<u64, Vec<usize>> = addrs
                .iter()
                .enumerate()
                .map(|(k, a)| (*a, perms[k][choice[k]].clone()))
                .collect();
            let x = CandidateExecution::assemble(
                self.p,
                self.skel,
                &self.addrs,
                &self.vals,
                sources,
                &co,
                &inits,
                self.psf,
            );
            if !f(x) {
                return false;
            }
            let mut k = addrs.len();
            loop {
                if k == 0 {
                    return true;
                }
                k -= 1;
                choice[k] += 1;
                if choice[k] < perms[k].len() {
                    break;
                }
                choice[k] = 0;
            }
        }
    }
}

/// All orderings of `v`, lexicographic in positions.
fn permutations(v: &[usize]) -> Vec<Vec<usize>> {
    if v.len() <= 1 {
        return vec![v.to_vec()];
    }
    let mut out = Vec::new();
    for i in 0..v.len() {
        let mut rest = v.to_vec();
        let x = rest.remove(i);
        for mut p in permutations(&rest) {
            p.insert(0, x);
            out.push(p);
        }
    }
    out
}

//! Brute-force isolation check written independently of the engine.
//!
//! Every label of every thread gets a status (absent, committed,
//! transient), every branch a prediction bit and an outcome bit; the
//! control-flow rules are checked on the raw assignment. Loads then guess
//! their values, every input guesses its initial value, and each load picks
//! any write as source. Only the CAT evaluator is shared with the engine.

use std::collections::BTreeMap;

use axcat::catlang::{check_assertions, evaluate, CatModel, Env};
use axcat::events::{BaseRelations, EventSet, EventSets, Relation};
use axcat::masm::{Domain, Label, Program, Reg, Stmt, Thread};
use axcat::speculation::{Mode, SpecConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Status {
    Absent,
    Committed,
    Transient,
}

/// One thread's control-flow assignment, indexed by instruction position.
#[derive(Debug, Clone)]
struct Path {
    status: Vec<Status>,
    cp: Vec<bool>,
    zero: Vec<bool>,
}

fn successors(th: &Thread, i: usize) -> Vec<(usize, EdgeKind)> {
    let n = th.instrs.len();
    let pos = |l: Label| th.index_of(l).unwrap_or(n);
    match th.instrs[i].stmt {
        Stmt::Jmp { target } => vec![(pos(target), EdgeKind::Plain)],
        Stmt::Beqz { target, .. } => vec![(i + 1, EdgeKind::Fall), (pos(target), EdgeKind::Jump)],
        _ => vec![(i + 1, EdgeKind::Plain)],
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum EdgeKind {
    Plain,
    Fall,
    Jump,
}

fn committed_edge(path: &Path, i: usize, kind: EdgeKind, traditional: bool) -> bool {
    if path.status[i] != Status::Committed {
        return false;
    }
    let cp = traditional || path.cp[i];
    match kind {
        EdgeKind::Plain => true,
        EdgeKind::Fall => cp && !path.zero[i],
        EdgeKind::Jump => cp && path.zero[i],
    }
}

fn transient_edge(path: &Path, i: usize, kind: EdgeKind) -> bool {
    match kind {
        EdgeKind::Plain => path.status[i] == Status::Transient,
        EdgeKind::Fall => path.status[i] != Status::Absent && !path.cp[i] && path.zero[i],
        EdgeKind::Jump => path.status[i] != Status::Absent && !path.cp[i] && !path.zero[i],
    }
}

/// Every assignment of one thread satisfying the control-flow rules.
fn thread_paths(th: &Thread, cfg: &SpecConfig) -> Vec<Path> {
    let n = th.instrs.len();
    let traditional = cfg.mode == Mode::Traditional;
    let statuses: &[Status] = if traditional {
        &[Status::Absent, Status::Committed]
    } else {
        &[Status::Absent, Status::Committed, Status::Transient]
    };
    let cps: &[bool] = if traditional || !cfg.always_mispredict {
        &[true]
    } else {
        &[false, true]
    };
    let mut incoming: Vec<Vec<(usize, EdgeKind)>> = vec![Vec::new(); n];
    for i in 0..n {
        for (j, k) in successors(th, i) {
            assert!(j > i, "reference handles forward jumps only");
            if j < n {
                incoming[j].push((i, k));
            }
        }
    }
    let mut out = Vec::new();
    let mut path = Path {
        status: vec![Status::Absent; n],
        cp: vec![true; n],
        zero: vec![false; n],
    };
    fn rec(
        th: &Thread,
        i: usize,
        path: &mut Path,
        incoming: &[Vec<(usize, EdgeKind)>],
        statuses: &[Status],
        cps: &[bool],
        traditional: bool,
        out: &mut Vec<Path>,
    ) {
        let n = th.instrs.len();
        if i == n {
            out.push(path.clone());
            return;
        }
        let entry = i == 0;
        let must_commit = entry
            || incoming[i]
                .iter()
                .any(|(j, k)| committed_edge(path, *j, *k, traditional));
        let must_transient = !entry
            && incoming[i]
                .iter()
                .any(|(j, k)| transient_edge(path, *j, *k));
        let beqz = matches!(th.instrs[i].stmt, Stmt::Beqz { .. });
        for s in statuses {
            let ok = (*s == Status::Committed) == must_commit
                && (*s == Status::Transient) == must_transient;
            if !ok {
                continue;
            }
            path.status[i] = *s;
            if beqz && *s != Status::Absent {
                for cp in cps {
                    for z in [false, true] {
                        path.cp[i] = *cp;
                        path.zero[i] = z;
                        rec(th, i + 1, path, incoming, statuses, cps, traditional, out);
                    }
                }
                path.cp[i] = true;
                path.zero[i] = false;
            } else {
                rec(th, i + 1, path, incoming, statuses, cps, traditional, out);
            }
        }
        path.status[i] = Status::Absent;
    }
    rec(
        th,
        0,
        &mut path,
        &incoming,
        statuses,
        cps,
        traditional,
        &mut out,
    );
    out
}

/// An executed instruction instance.
#[derive(Debug, Clone)]
struct Ev {
    thread: usize,
    pos: usize,
    stmt: Stmt,
    transient: bool,
    pred: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Init,
    Load,
    Store,
    Fence,
    Other,
}

fn cartesian(sizes: &[usize]) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for s in sizes {
        out = out
            .into_iter()
            .flat_map(|v| {
                (0..*s).map(move |i| {
                    let mut v = v.clone();
                    v.push(i);
                    v
                })
            })
            .collect();
    }
    out
}

fn permutations(v: &[usize]) -> Vec<Vec<usize>> {
    if v.is_empty() {
        return vec![Vec::new()];
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

/// Fence strictly between, and the later address reads the register the
/// earlier load wrote with no redefinition in between.
fn static_relations(th: &Thread, a: usize, b: usize) -> (bool, bool) {
    let fence = (a + 1..b).any(|k| th.instrs[k].stmt == Stmt::Fence);
    let addr = match (&th.instrs[a].stmt, &th.instrs[b].stmt) {
        (Stmt::Load { dst, .. }, Stmt::Load { addr, .. } | Stmt::Store { addr, .. }) => {
            let redefined = (a + 1..b).any(|k| match &th.instrs[k].stmt {
                Stmt::Assign { dst: d, .. }
                | Stmt::CondAssign { dst: d, .. }
                | Stmt::Load { dst: d, .. } => d == dst,
                _ => false,
            });
            addr.regs().contains(dst) && !redefined
        }
        _ => false,
    };
    (fence, addr)
}

/// Result of the reference search.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RefResult {
    pub unsafe_: bool,
    /// Candidates built, before any filter.
    pub candidates: u64,
    pub consistent: u64,
}

/// Decides isolation for a loop-free program by exhaustive enumeration.
pub fn reference_isolation(p: &Program, m: &CatModel, cfg: &SpecConfig, bits: u32) -> RefResult {
    assert!(!p.has_loops(), "reference handles loop-free programs only");
    let dom = Domain::new(bits);
    let per_thread: Vec<Vec<Path>> = p.threads.iter().map(|t| thread_paths(t, cfg)).collect();
    let mut res = RefResult::default();
    for pick in cartesian(&per_thread.iter().map(|v| v.len()).collect::<Vec<_>>()) {
        let paths: Vec<&Path> = pick
            .iter()
            .enumerate()
            .map(|(t, i)| &per_thread[t][*i])
            .collect();
        check_paths(p, m, cfg, dom, &paths, &mut res);
        if res.unsafe_ {
            break;
        }
    }
    res
}

fn check_paths(
    p: &Program,
    m: &CatModel,
    cfg: &SpecConfig,
    dom: Domain,
    paths: &[&Path],
    res: &mut RefResult,
) {
    let mut evs: Vec<Ev> = Vec::new();
    for (t, th) in p.threads.iter().enumerate() {
        let path = paths[t];
        let mut index: BTreeMap<usize, usize> = BTreeMap::new();
        for i in 0..th.instrs.len() {
            if path.status[i] == Status::Absent {
                continue;
            }
            let transient = path.status[i] == Status::Transient;
            let mut preds = Vec::new();
            for j in 0..i {
                for (s, k) in successors(th, j) {
                    if s != i || path.status[j] == Status::Absent {
                        continue;
                    }
                    let active = if transient {
                        transient_edge(path, j, k)
                    } else {
                        committed_edge(path, j, k, cfg.mode == Mode::Traditional)
                    };
                    if active {
                        preds.push(j);
                    }
                }
            }
            preds.dedup();
            assert!(
                preds.len() <= 1,
                "executed instruction with two active predecessors"
            );
            index.insert(i, evs.len());
            evs.push(Ev {
                thread: t,
                pos: i,
                stmt: th.instrs[i].stmt.clone(),
                transient,
                pred: preds.first().map(|j| index[j]),
            });
        }
    }
    let loads: Vec<usize> = (0..evs.len())
        .filter(|i| matches!(evs[*i].stmt, Stmt::Load { .. }))
        .collect();
    let inputs: Vec<u64> = p.inputs.iter().copied().collect();
    let size = dom.size() as usize;
    let secret_val = p.secret_value(dom);
    let nregs = p.register_count().max(1);
    for guess in cartesian(&vec![size; loads.len() + inputs.len()]) {
        let load_val: BTreeMap<usize, u64> = loads
            .iter()
            .enumerate()
            .map(|(k, i)| (*i, guess[k] as u64))
            .collect();
        let input_val: BTreeMap<u64, u64> = inputs
            .iter()
            .enumerate()
            .map(|(k, a)| (*a, guess[loads.len() + k] as u64))
            .collect();
        let init_of = |a: u64| -> u64 {
            if a == p.secret_addr {
                secret_val
            } else if let Some(v) = input_val.get(&a) {
                *v
            } else {
                p.fixed_init(a) & dom.mask()
            }
        };
        let mut regs_after: Vec<Vec<u64>> = Vec::with_capacity(evs.len());
        let mut addr = vec![None; evs.len()];
        let mut val = vec![None; evs.len()];
        let mut flow_ok = true;
        for (i, e) in evs.iter().enumerate() {
            let mut regs = match e.pred {
                Some(j) => regs_after[j].clone(),
                None => vec![0u64; nregs],
            };
            let ev = |x: &axcat::masm::Expr, r: &[u64]| {
                x.eval(&|k: Reg| r[k as usize], p.secret_addr, dom)
            };
            match &e.stmt {
                Stmt::Assign { dst, value } => regs[*dst as usize] = ev(value, &regs),
                Stmt::CondAssign { dst, cond, value } => {
                    if ev(cond, &regs) != 0 {
                        regs[*dst as usize] = ev(value, &regs);
                    }
                }
                Stmt::Load { dst, addr: a } => {
                    addr[i] = Some(ev(a, &regs));
                    val[i] = Some(load_val[&i]);
                    regs[*dst as usize] = load_val[&i];
                }
                Stmt::Store { addr: a, value } => {
                    addr[i] = Some(ev(a, &regs));
                    val[i] = Some(ev(value, &regs));
                }
                Stmt::Beqz { reg, .. } => {
                    let zero = regs[*reg as usize] == 0;
                    if zero != paths[e.thread].zero[e.pos] {
                        flow_ok = false;
                    }
                }
                _ => {}
            }
            regs_after.push(regs);
        }
        if !flow_ok {
            continue;
        }
        check_sources(p, m, cfg, dom, paths, &evs, &addr, &val, &init_of, res);
        if res.unsafe_ {
            return;
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn check_sources(
    p: &Program,
    m: &CatModel,
    cfg: &SpecConfig,
    dom: Domain,
    paths: &[&Path],
    evs: &[Ev],
    addr: &[Option<u64>],
    val: &[Option<u64>],
    init_of: &dyn Fn(u64) -> u64,
    res: &mut RefResult,
) {
    let np = evs.len();
    let naddr = dom.size() as usize;
    let n = np + naddr;
    let kind = |i: usize| -> Kind {
        if i >= np {
            return Kind::Init;
        }
        match evs[i].stmt {
            Stmt::Load { .. } => Kind::Load,
            Stmt::Store { .. } => Kind::Store,
            Stmt::Fence => Kind::Fence,
            _ => Kind::Other,
        }
    };
    let addr_of = |i: usize| {
        if i >= np {
            Some((i - np) as u64)
        } else {
            addr[i]
        }
    };
    let val_of = |i: usize| {
        if i >= np {
            Some(init_of((i - np) as u64))
        } else {
            val[i]
        }
    };
    let po_before = |a: usize, b: usize| {
        a < np && b < np && evs[a].thread == evs[b].thread && evs[a].pos < evs[b].pos
    };

    let loads: Vec<usize> = (0..np).filter(|i| kind(*i) == Kind::Load).collect();
    let writes: Vec<usize> = (0..n)
        .filter(|i| matches!(kind(*i), Kind::Init | Kind::Store))
        .collect();
    let options: Vec<Vec<usize>> = loads
        .iter()
        .map(|r| {
            writes
                .iter()
                .copied()
                .filter(|w| {
                    if val_of(*w) != val_of(*r) {
                        return false;
                    }
                    let same_addr = addr_of(*w) == addr_of(*r);
                    if *w >= np {
                        return same_addr;
                    }
                    if evs[*w].transient {
                        return evs[*r].transient && po_before(*w, *r) && (same_addr || cfg.psf);
                    }
                    same_addr || (cfg.psf && po_before(*w, *r))
                })
                .collect()
        })
        .collect();

    let committed_stores: BTreeMap<u64, Vec<usize>> = (0..np)
        .filter(|i| kind(*i) == Kind::Store && !evs[*i].transient)
        .fold(BTreeMap::new(), |mut acc, i| {
            acc.entry(addr[i].unwrap()).or_insert_with(Vec::new).push(i);
            acc
        });
    let co_options: Vec<Vec<Vec<usize>>> =
        committed_stores.values().map(|v| permutations(v)).collect();

    let mut po = Relation::empty(n);
    let mut fence = Relation::empty(n);
    let mut dep = Relation::empty(n);
    for a in 0..np {
        for b in 0..np {
            if po_before(a, b) {
                po.insert(a, b);
                let (f, d) = static_relations(&p.threads[evs[a].thread], evs[a].pos, evs[b].pos);
                if f {
                    fence.insert(a, b);
                }
                if d {
                    dep.insert(a, b);
                }
            }
        }
    }
    let memory = |i: usize| matches!(kind(i), Kind::Init | Kind::Load | Kind::Store);
    let mut loc = Relation::empty(n);
    for a in 0..n {
        for b in 0..n {
            if memory(a) && memory(b) && addr_of(a) == addr_of(b) {
                loc.insert(a, b);
            }
        }
    }
    let sets = EventSets {
        all: EventSet::full(n),
        memory: EventSet::from_iter(n, (0..n).filter(|i| memory(*i))),
        writes: EventSet::from_iter(n, writes.iter().copied()),
        reads: EventSet::from_iter(n, loads.iter().copied()),
    };
    let secret_init = np + p.secret_addr as usize;

    // Window and fence rules depend only on the paths.
    let mut window_ok = true;
    for (t, th) in p.threads.iter().enumerate() {
        let mut run = 0u32;
        for i in 0..th.instrs.len() {
            match paths[t].status[i] {
                Status::Absent => {}
                Status::Committed => run = 0,
                Status::Transient => {
                    run += 1;
                    if cfg.mode == Mode::Speculative && run >= cfg.window {
                        window_ok = false;
                    }
                    if th.instrs[i].stmt == Stmt::Fence {
                        window_ok = false;
                    }
                }
            }
        }
    }

    for src in cartesian(&options.iter().map(|o| o.len()).collect::<Vec<_>>()) {
        let mut sources = Relation::empty(n);
        for (k, r) in loads.iter().enumerate() {
            sources.insert(options[k][src[k]], *r);
        }
        let (rf, srf) = if cfg.psf {
            (sources.intersection(&loc), sources.clone())
        } else {
            (sources.clone(), Relation::empty(n))
        };
        let mut rfe = Relation::empty(n);
        for (a, b) in rf.pairs() {
            if a < np && b < np && evs[a].thread != evs[b].thread {
                rfe.insert(a, b);
            }
        }
        let reads_secret = sources.successors(secret_init).next().is_some();
        for co_pick in cartesian(&co_options.iter().map(|o| o.len()).collect::<Vec<_>>()) {
            res.candidates += 1;
            let mut co = Relation::empty(n);
            for (k, a) in committed_stores.keys().enumerate() {
                let chain: Vec<usize> = std::iter::once(np + *a as usize)
                    .chain(co_options[k][co_pick[k]].iter().copied())
                    .collect();
                for x in 0..chain.len() {
                    for y in x + 1..chain.len() {
                        co.insert(chain[x], chain[y]);
                    }
                }
            }
            if !window_ok {
                continue;
            }
            if cfg.psf && !srf.intersection(&fence).is_subset(&loc) {
                continue;
            }
            let base = BaseRelations {
                po: po.clone(),
                fence: fence.clone(),
                addr: dep.clone(),
                loc: loc.clone(),
                rf: rf.clone(),
                co,
                rfe: rfe.clone(),
                srf: srf.clone(),
            };
            let env = Env {
                base: &base,
                sets: &sets,
                cfg,
            };
            let b = evaluate(m, &env).expect("model evaluates");
            if !check_assertions(m, &env, &b)
                .expect("assertions evaluate")
                .consistent
            {
                continue;
            }
            res.consistent += 1;
            if reads_secret {
                res.unsafe_ = true;
                return;
            }
        }
    }
}

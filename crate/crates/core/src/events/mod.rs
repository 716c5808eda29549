//! Events, candidate executions and the base relations derived from them.

mod relation;

use std::collections::{BTreeMap, BTreeSet};

pub use relation::{EventSet, Relation};

use crate::masm::{Domain, Label, Program, Reg, Stmt, Thread, ThreadId};
use crate::speculation::Mode;

pub type EventId = usize;

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum EventsError {
    #[error("no branch choice for beqz at thread {thread}, label {label}")]
    MissingChoice { thread: ThreadId, label: Label },
    #[error("program still contains backward jumps; unroll it first")]
    NotLoopFree,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum EventKind {
    Init,
    SecretInit,
    Load,
    Store,
    Local,
    CondLocal,
    Jump,
    CondJump,
    Fence,
    Skip,
}

impl EventKind {
    pub fn of(stmt: &Stmt) -> EventKind {
        match stmt {
            Stmt::Assign { .. } => EventKind::Local,
            Stmt::CondAssign { .. } => EventKind::CondLocal,
            Stmt::Load { .. } => EventKind::Load,
            Stmt::Store { .. } => EventKind::Store,
            Stmt::Jmp { .. } => EventKind::Jump,
            Stmt::Beqz { .. } => EventKind::CondJump,
            Stmt::Skip => EventKind::Skip,
            Stmt::Fence => EventKind::Fence,
        }
    }

    pub fn is_memory(self) -> bool {
        matches!(
            self,
            EventKind::Init | EventKind::SecretInit | EventKind::Load | EventKind::Store
        )
    }

    /// Stores and initial writes.
    pub fn is_write(self) -> bool {
        matches!(
            self,
            EventKind::Init | EventKind::SecretInit | EventKind::Store
        )
    }

    pub fn is_init(self) -> bool {
        matches!(self, EventKind::Init | EventKind::SecretInit)
    }
}

/// The instruction instance an event stems from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EventOrigin {
    pub thread: ThreadId,
    /// Label in the (unrolled) program.
    pub label: Label,
    /// Label in the source program and loop iteration.
    pub source_label: Label,
    pub iteration: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Event {
    pub id: EventId,
    pub kind: EventKind,
    /// `None` for initial writes.
    pub origin: Option<EventOrigin>,
    pub transient: bool,
    pub addr: Option<u64>,
    /// Loaded, stored, assigned or tested value.
    pub val: Option<u64>,
    /// Whether the branch prediction was correct; cond-jumps only.
    pub cp: Option<bool>,
}

impl Event {
    pub fn thread(&self) -> Option<ThreadId> {
        self.origin.map(|o| o.thread)
    }

    pub fn label(&self) -> Option<Label> {
        self.origin.map(|o| o.label)
    }
}

/// Architectural outcome and prediction correctness of one beqz instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BranchChoice {
    /// The tested register is zero, so the jump is architecturally taken.
    pub taken: bool,
    /// The predicted direction was correct.
    pub cp: bool,
}

pub type Choices = BTreeMap<(ThreadId, Label), BranchChoice>;

/// A program event before values are known.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkelEvent {
    pub thread: ThreadId,
    pub label: Label,
    pub kind: EventKind,
    pub transient: bool,
    pub choice: Option<BranchChoice>,
}

/// The executed instruction instances for one set of branch choices,
/// with the relations that do not depend on values.
#[derive(Debug, Clone)]
pub struct Skeleton {
    /// Program events in thread order, then program order.
    pub events: Vec<SkelEvent>,
    pub po: Relation,
    pub fence: Relation,
    pub addr: Relation,
    /// Some fence instance lies on a transient path.
    pub transient_fence: bool,
}

impl Skeleton {
    /// Longest run of po-consecutive transient events in one thread.
    pub fn max_transient_run(&self) -> usize {
        let mut best = 0;
        let mut run = 0;
        let mut prev_thread = None;
        for e in &self.events {
            if prev_thread != Some(e.thread) {
                run = 0;
                prev_thread = Some(e.thread);
            }
            run = if e.transient { run + 1 } else { 0 };
            best = best.max(run);
        }
        best
    }
}

/// Walks every thread under the given branch choices.
///
/// Correctly predicted committed branches follow their architectural
/// direction. A mispredicted branch sends execution the other way and marks
/// everything after it transient; inside a transient run each branch again
/// goes the wrong way while mispredicted and ends the run once predicted
/// correctly. In traditional mode every prediction counts as correct.
pub fn build_events(p: &Program, mode: Mode, choices: &Choices) -> Result<Skeleton, EventsError> {
    if p.has_loops() {
        return Err(EventsError::NotLoopFree);
    }
    let mut events = Vec::new();
    let mut transient_fence = false;
    for th in &p.threads {
        let n = th.instrs.len();
        let mut idx = 0;
        let mut transient = false;
        while idx < n {
            let ins = &th.instrs[idx];
            let kind = EventKind::of(&ins.stmt);
            let ev_transient = transient;
            let mut choice = None;
            let next = match &ins.stmt {
                Stmt::Jmp { target } => th.index_of(*target).unwrap_or(n),
                Stmt::Beqz { target, .. } => {
                    let mut ch =
                        *choices
                            .get(&(th.id, ins.label))
                            .ok_or(EventsError::MissingChoice {
                                thread: th.id,
                                label: ins.label,
                            })?;
                    if mode == Mode::Traditional {
                        ch.cp = true;
                    }
                    choice = Some(ch);
                    let jump = th.index_of(*target).unwrap_or(n);
                    if transient && ch.cp {
                        n
                    } else {
                        if !ch.cp {
                            transient = true;
                        }
                        // Architectural direction when correct, the other one otherwise.
                        if ch.taken == ch.cp {
                            jump
                        } else {
                            idx + 1
                        }
                    }
                }
                Stmt::Fence => {
                    transient_fence |= transient;
                    idx + 1
                }
                _ => idx + 1,
            };
            events.push(SkelEvent {
                thread: th.id,
                label: ins.label,
                kind,
                transient: ev_transient,
                choice,
            });
            idx = next;
        }
    }
    let n = events.len();
    let mut po = Relation::empty(n);
    let mut fence = Relation::empty(n);
    let mut addr = Relation::empty(n);
    for a in 0..n {
        for b in a + 1..n {
            let (ea, eb) = (&events[a], &events[b]);
            if ea.thread != eb.thread {
                continue;
            }
            po.insert(a, b);
            let (f, d) = static_deps(&p.threads[ea.thread], ea.label, eb.label);
            if f {
                fence.insert(a, b);
            }
            if d {
                addr.insert(a, b);
            }
        }
    }
    Ok(Skeleton {
        events,
        po,
        fence,
        addr,
        transient_fence,
    })
}

/// Fence and address dependency between two po-ordered instructions of a
/// thread: a fence lies between them, and `lb` computes its address from a
/// register last loaded by `la`.
pub fn static_deps(th: &Thread, la: Label, lb: Label) -> (bool, bool) {
    let between = |pred: &dyn Fn(&Stmt) -> bool| {
        (la + 1..lb).any(|l| th.get(l).is_some_and(|i| pred(&i.stmt)))
    };
    let fence = between(&|s| matches!(s, Stmt::Fence));
    let sa = &th.get(la).unwrap().stmt;
    let sb = &th.get(lb).unwrap().stmt;
    let addr = match (sa, sb.expr()) {
        (Stmt::Load { dst, .. }, Some(e)) => {
            let r: Reg = *dst;
            e.regs().contains(&r) && !between(&|s| s.def() == Some(r))
        }
        _ => false,
    };
    (fence, addr)
}

/// Where a load takes its value from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Source {
    /// The initial write of the given address.
    Init(u64),
    /// A program store, by skeleton index.
    Store(usize),
}

/// A complete candidate execution: events with their values, and relations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateExecution {
    pub events: Vec<Event>,
    pub po: Relation,
    pub fence: Relation,
    pub addr: Relation,
    pub loc: Relation,
    pub rf: Relation,
    pub co: Relation,
    /// Present when predictive store forwarding is modelled.
    pub srf: Option<Relation>,
    /// Initial memory contents, per address with an initial write.
    pub init_values: BTreeMap<u64, u64>,
}

impl CandidateExecution {
    /// Builds an execution from a skeleton, per-event addresses and values,
    /// load sources and a coherence order per address.
    ///
    /// Program events keep their skeleton index as id; initial writes follow,
    /// sorted by address.
    #[allow(clippy::too_many_arguments)]
    pub fn assemble(
        p: &Program,
        skel: &Skeleton,
        addrs: &[Option<u64>],
        vals: &[Option<u64>],
        sources: &BTreeMap<usize, Source>,
        co_order: &BTreeMap<u64, Vec<usize>>,
        init_values: &BTreeMap<u64, u64>,
        psf: bool,
    ) -> CandidateExecution {
        let mut init_addrs: BTreeSet<u64> = p.layout.addresses().collect();
        init_addrs.insert(p.secret_addr);
        init_addrs.extend(addrs.iter().flatten());
        let mut events: Vec<Event> = skel
            .events
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let ins = p.threads[s.thread].get(s.label).unwrap();
                let (source_label, iteration) = match ins.origin {
                    crate::masm::Origin::Source { label, iteration } => (label, iteration),
                    _ => (s.label, 1),
                };
                Event {
                    id: i,
                    kind: s.kind,
                    origin: Some(EventOrigin {
                        thread: s.thread,
                        label: s.label,
                        source_label,
                        iteration,
                    }),
                    transient: s.transient,
                    addr: addrs[i],
                    val: vals[i],
                    cp: s.choice.map(|c| c.cp),
                }
            })
            .collect();
        let mut init_of = BTreeMap::new();
        let mut inits = BTreeMap::new();
        for a in &init_addrs {
            let id = events.len();
            init_of.insert(*a, id);
            let v = init_values
                .get(a)
                .copied()
                .unwrap_or_else(|| p.fixed_init(*a));
            inits.insert(*a, v);
            events.push(Event {
                id,
                kind: if *a == p.secret_addr {
                    EventKind::SecretInit
                } else {
                    EventKind::Init
                },
                origin: None,
                transient: false,
                addr: Some(*a),
                val: Some(v),
                cp: None,
            });
        }
        let n = events.len();
        let widen = |r: &Relation| r.widen(n);
        let mut loc = Relation::empty(n);
        for a in 0..n {
            for b in 0..n {
                if events[a].kind.is_memory()
                    && events[b].kind.is_memory()
                    && events[a].addr == events[b].addr
                {
                    loc.insert(a, b);
                }
            }
        }
        let mut src_rel = Relation::empty(n);
        for (load, s) in sources {
            let from = match s {
                Source::Init(a) => init_of[a],
                Source::Store(i) => *i,
            };
            src_rel.insert(from, *load);
        }
        let mut co = Relation::empty(n);
        for (a, stores) in co_order {
            let chain: Vec<usize> = std::iter::once(init_of[a])
                .chain(stores.iter().copied())
                .collect();
            for i in 0..chain.len() {
                for j in i + 1..chain.len() {
                    co.insert(chain[i], chain[j]);
                }
            }
        }
        let (rf, srf) = if psf {
            (src_rel.intersection(&loc), Some(src_rel))
        } else {
            (src_rel, None)
        };
        CandidateExecution {
            events,
            po: widen(&skel.po),
            fence: widen(&skel.fence),
            addr: widen(&skel.addr),
            loc,
            rf,
            co,
            srf,
            init_values: inits,
        }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    fn set_where(&self, f: impl Fn(&Event) -> bool) -> EventSet {
        EventSet::from_iter(
            self.len(),
            self.events.iter().filter(|e| f(e)).map(|e| e.id),
        )
    }

    pub fn committed(&self) -> EventSet {
        self.set_where(|e| !e.transient)
    }

    pub fn transient(&self) -> EventSet {
        self.set_where(|e| e.transient)
    }

    pub fn event_at(&self, thread: ThreadId, label: Label) -> Option<&Event> {
        self.events
            .iter()
            .find(|e| e.thread() == Some(thread) && e.label() == Some(label))
    }

    pub fn secret_init(&self) -> Option<EventId> {
        self.events
            .iter()
            .find(|e| e.kind == EventKind::SecretInit)
            .map(|e| e.id)
    }

    /// The value-carrying source relation: srf when present, rf otherwise.
    pub fn sources(&self) -> &Relation {
        self.srf.as_ref().unwrap_or(&self.rf)
    }

    /// Loads whose (s)rf source is the secret's initial write.
    pub fn secret_reads(&self) -> Vec<EventId> {
        match self.secret_init() {
            Some(s) => self.sources().successors(s).collect(),
            None => Vec::new(),
        }
    }

    /// Display name: `e<label>` for program events, `e_s` for the secret and
    /// `i<addr>` for other initial writes.
    pub fn name(&self, id: EventId) -> String {
        let e = &self.events[id];
        match (e.kind, e.origin) {
            (EventKind::SecretInit, _) => "e_s".into(),
            (_, None) => format!("i{}", e.addr.unwrap_or(0)),
            (_, Some(o)) => {
                let clash = self.events.iter().any(|x| {
                    x.origin
                        .is_some_and(|xo| xo.label == o.label && xo.thread != o.thread)
                });
                if clash {
                    format!("e{}.{}", o.thread, o.label)
                } else {
                    format!("e{}", o.label)
                }
            }
        }
    }
}

/// Named event sets usable in CAT models.
#[derive(Debug, Clone)]
pub struct EventSets {
    pub all: EventSet,
    pub memory: EventSet,
    pub writes: EventSet,
    pub reads: EventSet,
}

impl EventSets {
    pub fn of(x: &CandidateExecution) -> EventSets {
        EventSets {
            all: x.set_where(|_| true),
            memory: x.set_where(|e| e.kind.is_memory()),
            writes: x.set_where(|e| e.kind.is_write()),
            reads: x.set_where(|e| e.kind == EventKind::Load),
        }
    }
}

/// The base relations a CAT model may mention.
#[derive(Debug, Clone)]
pub struct BaseRelations {
    pub po: Relation,
    pub fence: Relation,
    pub addr: Relation,
    pub loc: Relation,
    pub rf: Relation,
    pub co: Relation,
    pub rfe: Relation,
    pub srf: Relation,
}

impl BaseRelations {
    pub fn get(&self, name: &str) -> Option<&Relation> {
        Some(match name {
            "po" => &self.po,
            "fence" => &self.fence,
            "addr" => &self.addr,
            "loc" => &self.loc,
            "rf" => &self.rf,
            "co" => &self.co,
            "rfe" => &self.rfe,
            "srf" => &self.srf,
            _ => return None,
        })
    }
}

pub fn base_relations(x: &CandidateExecution) -> BaseRelations {
    let n = x.len();
    let rfe = Relation::from_pairs(
        n,
        x.rf.pairs().filter(|(a, b)| {
            let (ta, tb) = (x.events[*a].thread(), x.events[*b].thread());
            ta.is_some() && tb.is_some() && ta != tb
        }),
    );
    BaseRelations {
        po: x.po.clone(),
        fence: x.fence.clone(),
        addr: x.addr.clone(),
        loc: x.loc.clone(),
        rf: x.rf.clone(),
        co: x.co.clone(),
        rfe,
        srf: x.srf.clone().unwrap_or_else(|| Relation::empty(n)),
    }
}

/// Per-event address and value.
pub type Valuation = Vec<(Option<u64>, Option<u64>)>;

/// Recomputes every event's address and value from the initial memory and
/// the (s)rf sources of `x`.
///
/// Returns every valuation consistent with the sources: empty when some
/// source disagrees on value or address, several when values flow in a
/// cycle between threads.
pub fn propagate_values(p: &Program, x: &CandidateExecution, dom: Domain) -> Vec<Valuation> {
    let srcs = x.sources();
    let mut source = BTreeMap::new();
    for e in &x.events {
        if e.kind == EventKind::Load {
            let from: Vec<usize> = (0..x.len()).filter(|w| srcs.contains(*w, e.id)).collect();
            if from.len() != 1 {
                return Vec::new();
            }
            source.insert(e.id, from[0]);
        }
    }
    let mut out = Vec::new();
    let mut forced = BTreeMap::new();
    search(p, x, dom, &source, &mut forced, &mut out);
    out
}

fn search(
    p: &Program,
    x: &CandidateExecution,
    dom: Domain,
    source: &BTreeMap<usize, usize>,
    forced: &mut BTreeMap<usize, u64>,
    out: &mut Vec<Valuation>,
) {
    let n = x.len();
    let mut val: Vec<Option<u64>> = vec![None; n];
    let mut addr: Vec<Option<u64>> = vec![None; n];
    for e in &x.events {
        if e.kind.is_init() {
            addr[e.id] = e.addr;
            val[e.id] = Some(x.init_values[&e.addr.unwrap()]);
        }
    }
    let nregs = p.register_count().max(1);
    let threads: Vec<Vec<usize>> = (0..p.threads.len())
        .map(|t| {
            x.events
                .iter()
                .filter(|e| e.thread() == Some(t))
                .map(|e| e.id)
                .collect()
        })
        .collect();
    let mut cursor = vec![0usize; threads.len()];
    let mut regs = vec![vec![0u64; nregs]; threads.len()];
    loop {
        let mut progress = false;
        for t in 0..threads.len() {
            while cursor[t] < threads[t].len() {
                let id = threads[t][cursor[t]];
                let e = &x.events[id];
                let o = e.origin.unwrap();
                let stmt = &p.threads[t].get(o.label).unwrap().stmt;
                let r = &mut regs[t];
                let ev = |ex: &crate::masm::Expr, r: &[u64]| {
                    ex.eval(&|i| r[i as usize], p.secret_addr, dom)
                };
                match stmt {
                    Stmt::Assign { dst, value } => {
                        let v = ev(value, r);
                        r[*dst as usize] = v;
                        val[id] = Some(v);
                    }
                    Stmt::CondAssign { dst, cond, value } => {
                        if ev(cond, r) != 0 {
                            r[*dst as usize] = ev(value, r);
                        }
                        val[id] = Some(r[*dst as usize]);
                    }
                    Stmt::Load { dst, addr: a } => {
                        let v = match forced.get(&id) {
                            Some(v) => *v,
                            None => match val[source[&id]] {
                                Some(v) => v,
                                None => break,
                            },
                        };
                        addr[id] = Some(ev(a, r));
                        r[*dst as usize] = v;
                        val[id] = Some(v);
                    }
                    Stmt::Store { addr: a, value } => {
                        addr[id] = Some(ev(a, r));
                        val[id] = Some(ev(value, r));
                    }
                    Stmt::Beqz { reg, .. } => val[id] = Some(r[*reg as usize]),
                    _ => {}
                }
                cursor[t] += 1;
                progress = true;
            }
        }
        if !progress {
            break;
        }
    }
    let blocked = (0..threads.len()).find(|t| cursor[*t] < threads[*t].len());
    if let Some(t) = blocked {
        let id = threads[t][cursor[t]];
        for v in dom.values() {
            forced.insert(id, v);
            search(p, x, dom, source, forced, out);
        }
        forced.remove(&id);
        return;
    }
    let psf = x.srf.is_some();
    for (load, from) in source {
        if val[*load] != val[*from] {
            return;
        }
        let same = addr[*load] == addr[*from];
        let alias = psf && x.events[*from].kind == EventKind::Store && x.po.contains(*from, *load);
        if !same && !alias {
            return;
        }
    }
    out.push(addr.into_iter().zip(val).collect());
}

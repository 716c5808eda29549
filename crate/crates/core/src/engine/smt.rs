//! SMT-LIB2 export of the isolation query over bit-vectors.
//!
//! Every instruction of the unrolled program is a potential event guarded
//! by committed/transient flags, initial writes exist for every address of
//! the domain, and relations are matrices of boolean terms. The query is
//! satisfiable exactly when some consistent execution reads the secret.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write;

use super::{validate, EngineError};
use crate::catlang::{AssertKind, BaseRel, Bound, CatModel, CatTerm, EvalError, SetName};
use crate::events::{static_deps, EventKind};
use crate::masm::{pred_in, unroll, BinOp, Domain, Expr, Label, Program, Stmt, Thread, UnOp};
use crate::speculation::{Mode, SpecConfig};

/// Widest domain the export accepts; one initial write per address.
pub const MAX_SMT_BITS: u32 = 8;

const CLOCK_BITS: u32 = 16;
const RUN_BITS: u32 = 32;

#[derive(Debug, Clone, PartialEq, Eq)]
enum B {
    T,
    F,
    V(String),
}

impl B {
    fn s(&self) -> &str {
        match self {
            B::T => "true",
            B::F => "false",
            B::V(s) => s,
        }
    }
}

fn and(xs: impl IntoIterator<Item = B>) -> B {
    let mut parts = Vec::new();
    for x in xs {
        match x {
            B::F => return B::F,
            B::T => {}
            B::V(s) => parts.push(s),
        }
    }
    match parts.len() {
        0 => B::T,
        1 => B::V(parts.pop().unwrap()),
        _ => B::V(format!("(and {})", parts.join(" "))),
    }
}

fn or(xs: impl IntoIterator<Item = B>) -> B {
    let mut parts = Vec::new();
    for x in xs {
        match x {
            B::T => return B::T,
            B::F => {}
            B::V(s) => parts.push(s),
        }
    }
    match parts.len() {
        0 => B::F,
        1 => B::V(parts.pop().unwrap()),
        _ => B::V(format!("(or {})", parts.join(" "))),
    }
}

fn not(x: B) -> B {
    match x {
        B::T => B::F,
        B::F => B::T,
        B::V(s) => match s.strip_prefix("(not ").and_then(|r| r.strip_suffix(')')) {
            Some(inner) if !inner.contains(' ') => B::V(inner.to_string()),
            _ => B::V(format!("(not {s})")),
        },
    }
}

fn implies(a: B, b: B) -> B {
    or([not(a), b])
}

/// A bit-vector term, folded when constant.
#[derive(Debug, Clone, PartialEq, Eq)]
enum Bv {
    C(u64),
    S(String),
}

struct Writer {
    out: String,
    dom: Domain,
    next: usize,
}

impl Writer {
    fn line(&mut self, s: &str) {
        self.out.push_str(s);
        self.out.push('\n');
    }

    fn lit(&self, v: u64, width: u32) -> String {
        format!("(_ bv{v} {width})")
    }

    fn bv(&self, b: &Bv) -> String {
        match b {
            Bv::C(v) => self.lit(*v, self.dom.bits),
            Bv::S(s) => s.clone(),
        }
    }

    fn fresh(&mut self, prefix: &str) -> String {
        self.next += 1;
        format!("{prefix}{}", self.next)
    }

    fn declare_bool(&mut self, name: &str) -> B {
        let l = format!("(declare-fun {name} () Bool)");
        self.line(&l);
        B::V(name.to_string())
    }

    fn declare_bv(&mut self, name: &str, width: u32) -> String {
        let l = format!("(declare-fun {name} () (_ BitVec {width}))");
        self.line(&l);
        name.to_string()
    }

    /// Binds a compound boolean term to a fresh name.
    fn name(&mut self, prefix: &str, b: B) -> B {
        match b {
            B::V(s) if s.contains(' ') => {
                let n = self.fresh(prefix);
                let l = format!("(define-fun {n} () Bool {s})");
                self.line(&l);
                B::V(n)
            }
            b => b,
        }
    }

    fn name_bv(&mut self, prefix: &str, b: Bv, width: u32) -> Bv {
        match b {
            Bv::S(s) if s.contains(' ') => {
                let n = self.fresh(prefix);
                let l = format!("(define-fun {n} () (_ BitVec {width}) {s})");
                self.line(&l);
                Bv::S(n)
            }
            b => b,
        }
    }

    fn assert(&mut self, b: B) {
        match b {
            B::T => {}
            b => {
                let l = format!("(assert {})", b.s());
                self.line(&l);
            }
        }
    }

    fn eq(&self, a: &Bv, b: &Bv) -> B {
        match (a, b) {
            (Bv::C(x), Bv::C(y)) => {
                if x == y {
                    B::T
                } else {
                    B::F
                }
            }
            _ if a == b => B::T,
            _ => B::V(format!("(= {} {})", self.bv(a), self.bv(b))),
        }
    }

    fn ite(&self, c: &B, a: Bv, b: Bv) -> Bv {
        self.ite_w(c, a, b, self.dom.bits)
    }

    fn ite_w(&self, c: &B, a: Bv, b: Bv, width: u32) -> Bv {
        let show = |x: &Bv| match x {
            Bv::C(v) => self.lit(*v, width),
            Bv::S(s) => s.clone(),
        };
        match c {
            B::T => a,
            B::F => b,
            _ if a == b => a,
            B::V(s) => Bv::S(format!("(ite {s} {} {})", show(&a), show(&b))),
        }
    }

    fn bool_bv(&self, c: B) -> Bv {
        self.ite(&c, Bv::C(1), Bv::C(0))
    }

    fn expr(&self, e: &Expr, regs: &[Bv], secret: u64) -> Bv {
        let m = self.dom.mask();
        match e {
            Expr::Reg(r) => regs[*r as usize].clone(),
            Expr::Const(c) => Bv::C(c & m),
            Expr::Secret => Bv::C(secret & m),
            Expr::Unary(op, a) => {
                let v = self.expr(a, regs, secret);
                if let Bv::C(c) = v {
                    let r = match op {
                        UnOp::Neg => c.wrapping_neg(),
                        UnOp::Not => !c,
                        UnOp::LogicalNot => (c == 0) as u64,
                    };
                    return Bv::C(r & m);
                }
                let s = self.bv(&v);
                match op {
                    UnOp::Neg => Bv::S(format!("(bvneg {s})")),
                    UnOp::Not => Bv::S(format!("(bvnot {s})")),
                    UnOp::LogicalNot => self.bool_bv(self.eq(&v, &Bv::C(0))),
                }
            }
            Expr::Binary(op, a, b) => {
                let x = self.expr(a, regs, secret);
                let y = self.expr(b, regs, secret);
                if let (Bv::C(p), Bv::C(q)) = (&x, &y) {
                    return Bv::C(op.apply(*p, *q, self.dom));
                }
                let (sx, sy) = (self.bv(&x), self.bv(&y));
                let zero = self.lit(0, self.dom.bits);
                let f = |name: &str| Bv::S(format!("({name} {sx} {sy})"));
                let cmp = |name: &str| self.bool_bv(B::V(format!("({name} {sx} {sy})")));
                match op {
                    BinOp::Add => f("bvadd"),
                    BinOp::Sub => f("bvsub"),
                    BinOp::Mul => f("bvmul"),
                    BinOp::Div => Bv::S(format!("(ite (= {sy} {zero}) {zero} (bvudiv {sx} {sy}))")),
                    BinOp::Rem => Bv::S(format!("(ite (= {sy} {zero}) {zero} (bvurem {sx} {sy}))")),
                    BinOp::And => f("bvand"),
                    BinOp::Or => f("bvor"),
                    BinOp::Xor => f("bvxor"),
                    BinOp::Shl => f("bvshl"),
                    BinOp::Shr => f("bvlshr"),
                    BinOp::Eq => self.bool_bv(self.eq(&x, &y)),
                    BinOp::Ne => self.bool_bv(not(self.eq(&x, &y))),
                    BinOp::Lt => cmp("bvult"),
                    BinOp::Le => cmp("bvule"),
                    BinOp::Gt => cmp("bvugt"),
                    BinOp::Ge => cmp("bvuge"),
                }
            }
        }
    }
}

/// One potential event.
#[derive(Debug, Clone)]
struct Ev {
    kind: EventKind,
    /// Thread and position in a topological order of the thread.
    at: Option<(usize, usize)>,
    label: Option<Label>,
    name: String,
    x: B,
    c: B,
    s: B,
    addr: Option<Bv>,
    val: Option<Bv>,
}

type Mat = Vec<B>;

/// Labels of a thread ordered so that every control-flow predecessor
/// comes first.
fn topo_order(th: &Thread) -> Vec<Label> {
    let mut indeg: BTreeMap<Label, usize> = th
        .instrs
        .iter()
        .map(|i| (i.label, pred_in(th, i.label).len()))
        .collect();
    let mut ready: BTreeSet<Label> = indeg
        .iter()
        .filter(|(_, d)| **d == 0)
        .map(|(l, _)| *l)
        .collect();
    let mut out = Vec::new();
    while let Some(l) = ready.pop_first() {
        out.push(l);
        for i in &th.instrs {
            if pred_in(th, i.label).contains(&l) {
                let d = indeg.get_mut(&i.label).unwrap();
                *d -= 1;
                if *d == 0 {
                    ready.insert(i.label);
                }
            }
        }
    }
    out
}

struct Emitter<'a> {
    w: Writer,
    p: &'a Program,
    cfg: &'a SpecConfig,
    evs: Vec<Ev>,
    /// Source candidates per load: (store or init event, bool).
    src: BTreeMap<usize, Vec<(usize, B)>>,
    clock: BTreeMap<usize, String>,
}

impl Emitter<'_> {
    fn n(&self) -> usize {
        self.evs.len()
    }

    fn threads(&mut self) {
        let secret = self.p.secret_addr;
        let spec = self.cfg.mode == Mode::Speculative;
        let free_cp = spec && self.cfg.always_mispredict;
        let nregs = self.p.register_count().max(1);
        for th in &self.p.threads {
            let t = th.id;
            self.w.line(&format!("; thread {t}"));
            let order = topo_order(th);
            let mut idx: BTreeMap<Label, usize> = BTreeMap::new();
            let mut outs: BTreeMap<Label, Vec<Bv>> = BTreeMap::new();
            let mut runs: BTreeMap<Label, Bv> = BTreeMap::new();
            let mut cps: BTreeMap<Label, B> = BTreeMap::new();
            let mut zs: BTreeMap<Label, B> = BTreeMap::new();
            for (pos, l) in order.iter().copied().enumerate() {
                let ins = th.get(l).unwrap();
                let entry = l == th.first;
                let mut cedges = Vec::new();
                let mut edges = Vec::new();
                let mut tedges = Vec::new();
                for lp in pred_in(th, l) {
                    let pe = &self.evs[idx[&lp]];
                    let (ce, te) = match &th.get(lp).unwrap().stmt {
                        Stmt::Beqz { target, .. } => {
                            let z = zs[&lp].clone();
                            let cp = cps[&lp].clone();
                            let fall = lp + 1 == l;
                            let jump = *target == l;
                            let pick = |yes: bool, b: B| if yes { b } else { B::F };
                            let dir_c = or([pick(fall, not(z.clone())), pick(jump, z.clone())]);
                            let dir_t = or([pick(fall, z.clone()), pick(jump, not(z))]);
                            (
                                and([pe.c.clone(), cp.clone(), dir_c]),
                                and([pe.x.clone(), not(cp), dir_t]),
                            )
                        }
                        _ => (pe.c.clone(), pe.s.clone()),
                    };
                    let ce = self.w.name("g", ce);
                    let te = self.w.name("g", te);
                    edges.push((lp, self.w.name("g", or([ce.clone(), te.clone()]))));
                    cedges.push(ce);
                    tedges.push(te);
                }
                let c = if entry {
                    B::T
                } else {
                    self.w.name(&format!("c{t}_{l}_"), or(cedges))
                };
                let s = if entry || !spec {
                    B::F
                } else {
                    self.w.name(&format!("s{t}_{l}_"), or(tedges))
                };
                let x = self.w.name("x", or([c.clone(), s.clone()]));

                // Register file on entry: the value leaving the active predecessor.
                let mut regs = vec![Bv::C(0); nregs];
                if !entry {
                    for (r, slot) in regs.iter_mut().enumerate() {
                        let mut acc = Bv::C(0);
                        for (lp, e) in edges.iter().rev() {
                            acc = self.w.ite(e, outs[lp][r].clone(), acc);
                        }
                        *slot = self.w.name_bv("r", acc, self.w.dom.bits);
                    }
                }
                let bits = self.w.dom.bits;
                let mut addr = None;
                let mut val = None;
                match &ins.stmt {
                    Stmt::Assign { dst, value } => {
                        let v = self.w.expr(value, &regs, secret);
                        let v = self.w.name_bv("v", v, bits);
                        regs[*dst as usize] = v.clone();
                        val = Some(v);
                    }
                    Stmt::CondAssign { dst, cond, value } => {
                        let cv = self.w.expr(cond, &regs, secret);
                        let nz = not(self.w.eq(&cv, &Bv::C(0)));
                        let nv = self.w.expr(value, &regs, secret);
                        let v = self.w.ite(&nz, nv, regs[*dst as usize].clone());
                        let v = self.w.name_bv("v", v, bits);
                        regs[*dst as usize] = v.clone();
                        val = Some(v);
                    }
                    Stmt::Load { dst, addr: a } => {
                        let av = self.w.expr(a, &regs, secret);
                        addr = Some(self.w.name_bv("a", av, bits));
                        let v = Bv::S(self.w.declare_bv(&format!("ld{t}_{l}"), bits));
                        regs[*dst as usize] = v.clone();
                        val = Some(v);
                    }
                    Stmt::Store { addr: a, value } => {
                        let av = self.w.expr(a, &regs, secret);
                        addr = Some(self.w.name_bv("a", av, bits));
                        let vv = self.w.expr(value, &regs, secret);
                        val = Some(self.w.name_bv("v", vv, bits));
                    }
                    Stmt::Beqz { reg, .. } => {
                        let v = regs[*reg as usize].clone();
                        zs.insert(l, self.w.eq(&v, &Bv::C(0)));
                        let cp = if free_cp {
                            self.w.declare_bool(&format!("cp{t}_{l}"))
                        } else {
                            B::T
                        };
                        cps.insert(l, cp);
                        val = Some(v);
                    }
                    Stmt::Fence => self.w.assert(not(s.clone())),
                    Stmt::Jmp { .. } | Stmt::Skip => {}
                }

                if spec {
                    // Length of the transient run ending here.
                    let mut prev = Bv::C(0);
                    for (lp, e) in edges.iter().rev() {
                        prev = self.w.ite_w(e, runs[lp].clone(), prev, RUN_BITS);
                    }
                    let w = &self.w;
                    let inc = match &prev {
                        Bv::C(v) => Bv::C(v + 1),
                        Bv::S(p) => Bv::S(format!("(bvadd {p} {})", w.lit(1, RUN_BITS))),
                    };
                    let run = match &s {
                        B::F => Bv::C(0),
                        B::T => inc,
                        B::V(sv) => {
                            let lit = |b: &Bv| match b {
                                Bv::C(v) => w.lit(*v, RUN_BITS),
                                Bv::S(x) => x.clone(),
                            };
                            Bv::S(format!("(ite {sv} {} {})", lit(&inc), w.lit(0, RUN_BITS)))
                        }
                    };
                    let run = self.w.name_bv("run", run, RUN_BITS);
                    let ok = match &run {
                        Bv::C(v) => {
                            if *v < self.cfg.window as u64 {
                                B::T
                            } else {
                                B::F
                            }
                        }
                        Bv::S(r) => B::V(format!(
                            "(bvult {r} {})",
                            self.w.lit(self.cfg.window as u64, RUN_BITS)
                        )),
                    };
                    self.w.assert(ok);
                    runs.insert(l, run);
                }

                outs.insert(l, regs);
                idx.insert(l, self.evs.len());
                let clash = self
                    .p
                    .threads
                    .iter()
                    .any(|o| o.id != t && o.get(l).is_some());
                self.evs.push(Ev {
                    kind: EventKind::of(&ins.stmt),
                    at: Some((t, pos)),
                    label: Some(l),
                    name: if clash {
                        format!("e{t}.{l}")
                    } else {
                        format!("e{l}")
                    },
                    x,
                    c,
                    s,
                    addr,
                    val,
                });
            }
        }
    }

    fn inits(&mut self) {
        let dom = self.w.dom;
        let secret_val = self.p.secret_value(dom);
        let fixed: BTreeSet<u64> = self
            .p
            .layout
            .addresses()
            .chain([self.p.secret_addr])
            .collect();
        let program = self.evs.len();
        self.w.line("; initial writes");
        for a in dom.values() {
            let x = if fixed.contains(&a) {
                B::T
            } else {
                let touched: Vec<B> = self.evs[..program]
                    .iter()
                    .filter(|e| e.kind.is_memory())
                    .map(|e| and([e.x.clone(), self.w.eq(e.addr.as_ref().unwrap(), &Bv::C(a))]))
                    .collect();
                let t = or(touched);
                self.w.name("x", t)
            };
            let val = if a == self.p.secret_addr {
                Bv::C(secret_val)
            } else if self.p.inputs.contains(&a) {
                Bv::S(self.w.declare_bv(&format!("in{a}"), dom.bits))
            } else {
                Bv::C(self.p.fixed_init(a) & dom.mask())
            };
            let secret = a == self.p.secret_addr;
            self.evs.push(Ev {
                kind: if secret {
                    EventKind::SecretInit
                } else {
                    EventKind::Init
                },
                at: None,
                label: None,
                name: if secret {
                    "e_s".into()
                } else {
                    format!("i{a}")
                },
                x,
                c: B::T,
                s: B::F,
                addr: Some(Bv::C(a)),
                val: Some(val),
            });
        }
    }

    /// Reads-from choices and coherence clocks.
    fn memory(&mut self) {
        let n = self.n();
        let psf = self.cfg.psf;
        self.w.line("; reads-from");
        for l in 0..n {
            if self.evs[l].kind != EventKind::Load {
                continue;
            }
            let (tl, pl) = self.evs[l].at.unwrap();
            let le = self.evs[l].clone();
            let mut cands = Vec::new();
            for w in 0..n {
                let we = &self.evs[w];
                let ok = match we.kind {
                    EventKind::Init | EventKind::SecretInit => self
                        .w
                        .eq(le.addr.as_ref().unwrap(), we.addr.as_ref().unwrap()),
                    EventKind::Store => {
                        let (tw, pw) = we.at.unwrap();
                        let same_addr = self
                            .w
                            .eq(le.addr.as_ref().unwrap(), we.addr.as_ref().unwrap());
                        if (tw, pw) < (tl, pl) {
                            let same = tw == tl;
                            let visible =
                                or([we.c.clone(), if same { le.s.clone() } else { B::F }]);
                            let place = if psf && same { B::T } else { same_addr };
                            and([visible, place])
                        } else {
                            and([we.c.clone(), same_addr])
                        }
                    }
                    _ => continue,
                };
                let cond = and([
                    we.x.clone(),
                    le.x.clone(),
                    self.w
                        .eq(le.val.as_ref().unwrap(), we.val.as_ref().unwrap()),
                    ok,
                ]);
                if cond == B::F {
                    continue;
                }
                let v = self.w.declare_bool(&format!("rf_{}_{}", w, l));
                self.w.assert(implies(v.clone(), cond));
                cands.push((w, v));
            }
            self.w.assert(implies(
                le.x.clone(),
                or(cands.iter().map(|(_, v)| v.clone())),
            ));
            for i in 0..cands.len() {
                for j in i + 1..cands.len() {
                    self.w
                        .assert(not(and([cands[i].1.clone(), cands[j].1.clone()])));
                }
            }
            self.src.insert(l, cands);
        }
        self.w.line("; coherence clocks");
        let stores: Vec<usize> = (0..n)
            .filter(|i| self.evs[*i].kind == EventKind::Store)
            .collect();
        for s in &stores {
            let k = self.w.declare_bv(&format!("co{s}"), CLOCK_BITS);
            self.clock.insert(*s, k);
        }
        for (i, a) in stores.iter().enumerate() {
            for b in &stores[i + 1..] {
                let (ea, eb) = (&self.evs[*a], &self.evs[*b]);
                let same = and([
                    ea.c.clone(),
                    eb.c.clone(),
                    self.w
                        .eq(ea.addr.as_ref().unwrap(), eb.addr.as_ref().unwrap()),
                ]);
                let diff = B::V(format!("(not (= {} {}))", self.clock[a], self.clock[b]));
                self.w.assert(implies(same, diff));
            }
        }
    }

    fn mat(&mut self, prefix: &str, f: impl Fn(&Self, usize, usize) -> B) -> Mat {
        let n = self.n();
        let mut m = Vec::with_capacity(n * n);
        for a in 0..n {
            for b in 0..n {
                let v = f(self, a, b);
                m.push(self.w.name(prefix, v));
            }
        }
        m
    }

    fn set(&self, s: SetName, e: usize) -> B {
        let ev = &self.evs[e];
        let member = match s {
            SetName::E => true,
            SetName::M => ev.kind.is_memory(),
            SetName::W => ev.kind.is_write(),
            SetName::R => ev.kind == EventKind::Load,
        };
        if member {
            ev.x.clone()
        } else {
            B::F
        }
    }

    fn src_of(&self, a: usize, b: usize) -> B {
        self.src
            .get(&b)
            .and_then(|c| c.iter().find(|(w, _)| *w == a))
            .map(|(_, v)| v.clone())
            .unwrap_or(B::F)
    }

    fn base(&mut self) -> BTreeMap<BaseRel, Mat> {
        let mut out = BTreeMap::new();
        let same_thread_order = |s: &Self, a: usize, b: usize| match (s.evs[a].at, s.evs[b].at) {
            (Some((ta, pa)), Some((tb, pb))) => ta == tb && pa < pb,
            _ => false,
        };
        self.w.line("; base relations");
        let po = self.mat("po", |s, a, b| {
            if same_thread_order(s, a, b) {
                and([s.evs[a].x.clone(), s.evs[b].x.clone()])
            } else {
                B::F
            }
        });
        let deps = |s: &Self, a: usize, b: usize| {
            let t = s.evs[a].at.unwrap().0;
            static_deps(
                &s.p.threads[t],
                s.evs[a].label.unwrap(),
                s.evs[b].label.unwrap(),
            )
        };
        let fence = self.mat("fence", |s, a, b| {
            if same_thread_order(s, a, b) && deps(s, a, b).0 {
                and([s.evs[a].x.clone(), s.evs[b].x.clone()])
            } else {
                B::F
            }
        });
        let addr = self.mat("addr", |s, a, b| {
            if same_thread_order(s, a, b) && deps(s, a, b).1 {
                and([s.evs[a].x.clone(), s.evs[b].x.clone()])
            } else {
                B::F
            }
        });
        let loc = self.mat("loc", |s, a, b| {
            let (ea, eb) = (&s.evs[a], &s.evs[b]);
            if ea.kind.is_memory() && eb.kind.is_memory() {
                and([
                    ea.x.clone(),
                    eb.x.clone(),
                    s.w.eq(ea.addr.as_ref().unwrap(), eb.addr.as_ref().unwrap()),
                ])
            } else {
                B::F
            }
        });
        let psf = self.cfg.psf;
        let srf = self.mat("srf", |s, a, b| if psf { s.src_of(a, b) } else { B::F });
        let n = self.n();
        let rf: Mat = (0..n * n)
            .map(|i| {
                let v = if psf {
                    and([srf[i].clone(), loc[i].clone()])
                } else {
                    self.src_of(i / n, i % n)
                };
                self.w.name("rf", v)
            })
            .collect();
        let rfe: Mat = (0..n * n)
            .map(|i| match (self.evs[i / n].at, self.evs[i % n].at) {
                (Some((ta, _)), Some((tb, _))) if ta != tb => rf[i].clone(),
                _ => B::F,
            })
            .collect();
        let co = self.mat("co", |s, a, b| {
            let (ea, eb) = (&s.evs[a], &s.evs[b]);
            match (ea.kind, eb.kind) {
                (EventKind::Store, EventKind::Store) if a != b => and([
                    ea.c.clone(),
                    eb.c.clone(),
                    s.w.eq(ea.addr.as_ref().unwrap(), eb.addr.as_ref().unwrap()),
                    B::V(format!("(bvult {} {})", s.clock[&a], s.clock[&b])),
                ]),
                (EventKind::Init | EventKind::SecretInit, EventKind::Store) => and([
                    eb.c.clone(),
                    s.w.eq(eb.addr.as_ref().unwrap(), ea.addr.as_ref().unwrap()),
                ]),
                _ => B::F,
            }
        });
        if psf {
            self.w
                .line("; forwarding across a fence stays within one location");
            for i in 0..n * n {
                let bad = and([srf[i].clone(), fence[i].clone(), not(loc[i].clone())]);
                self.w.assert(not(bad));
            }
        }
        out.insert(BaseRel::Po, po);
        out.insert(BaseRel::Fence, fence);
        out.insert(BaseRel::Addr, addr);
        out.insert(BaseRel::Loc, loc);
        out.insert(BaseRel::Rf, rf);
        out.insert(BaseRel::Co, co);
        out.insert(BaseRel::Rfe, rfe);
        out.insert(BaseRel::Srf, srf);
        out
    }

    fn compose(&mut self, a: &Mat, b: &Mat) -> Mat {
        let n = self.n();
        let mut out = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                let t = or((0..n).map(|c| and([a[i * n + c].clone(), b[c * n + j].clone()])));
                out.push(self.w.name("d", t));
            }
        }
        out
    }

    fn zip(&mut self, a: &Mat, b: &Mat, f: impl Fn(B, B) -> B) -> Mat {
        let mut out = Vec::with_capacity(a.len());
        for (x, y) in a.iter().zip(b) {
            let v = f(x.clone(), y.clone());
            out.push(self.w.name("d", v));
        }
        out
    }

    fn plus(&mut self, a: &Mat) -> Mat {
        let mut r = a.clone();
        let mut len = 1;
        while len < self.n() {
            let rr = self.compose(&r, &r);
            r = self.zip(&r, &rr, |x, y| or([x, y]));
            len *= 2;
        }
        r
    }

    fn bound(&self, b: Bound) -> Result<u32, EvalError> {
        let v = match b {
            Bound::Lit(k) => return Ok(k),
            Bound::Window(o) => self.cfg.window as i64 + o,
            Bound::Buffer(o) => self.cfg.buffer as i64 + o,
        };
        u32::try_from(v).map_err(|_| EvalError::NegativeBound(b))
    }

    fn term(
        &mut self,
        t: &CatTerm,
        base: &BTreeMap<BaseRel, Mat>,
        env: &BTreeMap<String, Mat>,
    ) -> Result<Mat, EvalError> {
        let n = self.n();
        Ok(match t {
            CatTerm::Base(r) => base[r].clone(),
            CatTerm::Identity(s) => (0..n * n)
                .map(|i| {
                    if i / n == i % n {
                        self.set(*s, i / n)
                    } else {
                        B::F
                    }
                })
                .collect(),
            CatTerm::Product(s, u) => {
                let s = *s;
                let u = *u;
                self.mat("d", |e, a, b| and([e.set(s, a), e.set(u, b)]))
            }
            CatTerm::Named(name) => env.get(name).cloned().unwrap_or_else(|| vec![B::F; n * n]),
            CatTerm::Union(x, y) => {
                let (a, b) = (self.term(x, base, env)?, self.term(y, base, env)?);
                self.zip(&a, &b, |p, q| or([p, q]))
            }
            CatTerm::Inter(x, y) => {
                let (a, b) = (self.term(x, base, env)?, self.term(y, base, env)?);
                self.zip(&a, &b, |p, q| and([p, q]))
            }
            CatTerm::Diff(x, y) => {
                let (a, b) = (self.term(x, base, env)?, self.term(y, base, env)?);
                self.zip(&a, &b, |p, q| and([p, not(q)]))
            }
            CatTerm::Seq(x, y) => {
                let (a, b) = (self.term(x, base, env)?, self.term(y, base, env)?);
                self.compose(&a, &b)
            }
            CatTerm::Inverse(x) => {
                let a = self.term(x, base, env)?;
                (0..n * n).map(|i| a[(i % n) * n + i / n].clone()).collect()
            }
            CatTerm::Plus(x) => {
                let a = self.term(x, base, env)?;
                self.plus(&a)
            }
            CatTerm::Star(x) => {
                let a = self.term(x, base, env)?;
                let p = self.plus(&a);
                (0..n * n)
                    .map(|i| {
                        if i / n == i % n {
                            or([p[i].clone(), self.evs[i / n].x.clone()])
                        } else {
                            p[i].clone()
                        }
                    })
                    .collect()
            }
            CatTerm::UpTo(x, k) => {
                let r = self.term(x, base, env)?;
                let mut acc = r.clone();
                for _ in 0..self.bound(*k)? {
                    acc = self.compose(&r, &acc);
                }
                acc
            }
        })
    }

    fn model(&mut self, m: &CatModel, base: &BTreeMap<BaseRel, Mat>) -> Result<(), EvalError> {
        let n = self.n();
        let negative = negatively_used(m);
        let recursive: BTreeSet<&str> = m.recursive_names().into_iter().collect();
        let mut env: BTreeMap<String, Mat> = BTreeMap::new();
        for stratum in &m.strata {
            let names: Vec<&str> = stratum
                .iter()
                .map(|i| m.definitions[*i].name.as_str())
                .collect();
            self.w.line(&format!("; {}", names.join(", ")));
            if !names.iter().any(|x| recursive.contains(x)) {
                let d = &m.definitions[stratum[0]];
                let v = self.term(&d.term, base, &env)?;
                env.insert(d.name.clone(), v);
            } else if !names.iter().any(|x| negative.contains(*x)) {
                // Only upward-closed uses: any post-fixpoint is as good as the least one.
                for (k, name) in names.iter().enumerate() {
                    let mut mat = Vec::with_capacity(n * n);
                    for i in 0..n * n {
                        mat.push(self.w.declare_bool(&format!(
                            "fix{}_{}_{}",
                            stratum[k],
                            i / n,
                            i % n
                        )));
                    }
                    env.insert(name.to_string(), mat);
                }
                for i in stratum {
                    let d = &m.definitions[*i];
                    let v = self.term(&d.term, base, &env)?;
                    for (j, f) in v.into_iter().enumerate() {
                        let lhs = env[&d.name][j].clone();
                        self.w.assert(implies(f, lhs));
                    }
                }
            } else {
                // Kleene iteration, one added pair per round at worst.
                for name in &names {
                    env.insert(name.to_string(), vec![B::F; n * n]);
                }
                for _ in 0..names.len() * n * n {
                    for i in stratum {
                        let d = &m.definitions[*i];
                        let v = self.term(&d.term, base, &env)?;
                        env.insert(d.name.clone(), v);
                    }
                }
            }
        }
        for (k, a) in m.assertions.iter().enumerate() {
            self.w.line(&format!("; {a}"));
            let r = self.term(&a.term, base, &env)?;
            match a.kind {
                AssertKind::Acyclic => {
                    let ranks: Vec<String> = (0..n)
                        .map(|e| self.w.declare_bv(&format!("rk{k}_{e}"), CLOCK_BITS))
                        .collect();
                    for i in 0..n * n {
                        let (x, y) = (i / n, i % n);
                        let lt = if x == y {
                            B::F
                        } else {
                            B::V(format!("(bvult {} {})", ranks[x], ranks[y]))
                        };
                        self.w.assert(implies(r[i].clone(), lt));
                    }
                }
                AssertKind::Irreflexive => {
                    for e in 0..n {
                        self.w.assert(not(r[e * n + e].clone()));
                    }
                }
                AssertKind::Empty => {
                    for v in r {
                        self.w.assert(not(v));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Names that reach some assertion through an odd number of differences.
fn negatively_used(m: &CatModel) -> BTreeSet<String> {
    let mut seen: BTreeSet<(String, bool)> = BTreeSet::new();
    let mut work: Vec<(String, bool)> = Vec::new();
    for a in &m.assertions {
        a.term
            .visit_names(true, &mut |n, pol| work.push((n.to_string(), pol)));
    }
    while let Some((name, pol)) = work.pop() {
        if !seen.insert((name.clone(), pol)) {
            continue;
        }
        if let Some(d) = m.definition(&name) {
            d.term
                .visit_names(pol, &mut |n, q| work.push((n.to_string(), q)));
        }
    }
    seen.into_iter()
        .filter(|(_, p)| !p)
        .map(|(n, _)| n)
        .collect()
}

/// Emits an SMT-LIB2 query that is satisfiable exactly when some
/// consistent execution of `p`, unrolled `k` times, reads the secret.
pub fn emit_smt(
    p: &Program,
    m: &CatModel,
    cfg: &SpecConfig,
    k: u32,
    bits: u32,
) -> Result<String, EngineError> {
    let dom = validate(p, m, cfg, k, bits)?;
    if bits > MAX_SMT_BITS {
        return Err(EngineError::SmtDomain(bits));
    }
    let un = unroll(p, k);
    let prog = un.program;
    let mut e = Emitter {
        w: Writer {
            out: String::new(),
            dom,
            next: 0,
        },
        p: &prog,
        cfg,
        evs: Vec::new(),
        src: BTreeMap::new(),
        clock: BTreeMap::new(),
    };
    let mut head = String::new();
    writeln!(
        head,
        "; isolation query: sat iff a consistent execution reads the secret"
    )
    .unwrap();
    writeln!(
        head,
        "; model {}, mode {}, k {}, w {}, w' {}, bits {}, psf {}",
        if m.name.is_empty() {
            "<unnamed>"
        } else {
            &m.name
        },
        cfg.mode,
        k,
        cfg.window,
        cfg.buffer,
        bits,
        cfg.psf
    )
    .unwrap();
    for th in &prog.threads {
        for i in &th.instrs {
            writeln!(head, ";   t{} {}: {}", th.id, i.label, i.text).unwrap();
        }
    }
    e.w.line(head.trim_end());
    e.w.line("(set-logic QF_BV)");
    e.threads();
    e.inits();
    e.w.line("; events");
    for (i, ev) in e.evs.iter().enumerate() {
        let l = format!("; {i} = {}", ev.name);
        e.w.out.push_str(&l);
        e.w.out.push('\n');
    }
    e.memory();
    let base = e.base();
    e.model(m, &base)?;
    e.w.line("; some load reads the secret");
    let n = e.n();
    let secret = (0..n)
        .find(|i| e.evs[*i].kind == EventKind::SecretInit)
        .unwrap();
    let goal = or((0..n).map(|l| e.src_of(secret, l)));
    e.w.assert(goal);
    e.w.line("(check-sat)");
    e.w.line("(exit)");
    Ok(e.w.out)
}

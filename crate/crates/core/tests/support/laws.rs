//! Relation-algebra laws and execution well-formedness, shared by the
//! property tests and the acceptance runner.

use std::collections::BTreeMap;

use axcat::catlang::{eval_term, evaluate, parse_cat, Env};
use axcat::engine::enumerate_candidates;
use axcat::events::{base_relations, BaseRelations, EventKind, EventSet, EventSets, Relation};
use axcat::masm::parse_program;
use axcat::speculation::SpecConfig;
use proptest::prelude::*;
use proptest::test_runner::TestCaseError;
use rand::rngs::StdRng;
use rand::SeedableRng;

use super::gen::random_program_sized;

/// Largest event universe exercised.
pub const MAX_EVENTS: usize = 8;

pub type LawResult = Result<(), TestCaseError>;

fn relation(n: usize) -> impl Strategy<Value = Relation> {
    proptest::collection::vec((0..n, 0..n), 0..=n * n).prop_map(move |v| Relation::from_pairs(n, v))
}

/// Three relations over one universe of 1 to 8 events.
pub fn triple() -> impl Strategy<Value = (Relation, Relation, Relation)> {
    (1usize..=MAX_EVENTS).prop_flat_map(|n| (relation(n), relation(n), relation(n)))
}

fn power(r: &Relation, k: usize) -> Relation {
    (0..k).fold(Relation::identity(r.universe()), |acc, _| acc.compose(r))
}

/// Closure by naive iteration to a fixpoint.
fn naive_plus(r: &Relation) -> Relation {
    let mut t = r.clone();
    loop {
        let next = t.union(&t.compose(r));
        if next == t {
            return t;
        }
        t = next;
    }
}

/// Base relations with `r` as po and every other relation empty.
fn env_over(r: &Relation) -> (BaseRelations, EventSets) {
    let n = r.universe();
    let e = Relation::empty(n);
    let base = BaseRelations {
        po: r.clone(),
        fence: e.clone(),
        addr: e.clone(),
        loc: e.clone(),
        rf: e.clone(),
        co: e.clone(),
        rfe: e.clone(),
        srf: e,
    };
    let all = EventSet::full(n);
    let sets = EventSets {
        all: all.clone(),
        memory: all.clone(),
        writes: all.clone(),
        reads: all,
    };
    (base, sets)
}

pub fn inverse_laws(r: &Relation, s: &Relation) -> LawResult {
    prop_assert_eq!(&r.inverse().inverse(), r);
    prop_assert_eq!(r.compose(s).inverse(), s.inverse().compose(&r.inverse()));
    prop_assert_eq!(r.union(s).inverse(), r.inverse().union(&s.inverse()));
    prop_assert_eq!(
        r.intersection(s).inverse(),
        r.inverse().intersection(&s.inverse())
    );
    prop_assert_eq!(r.plus().inverse(), r.inverse().plus());
    Ok(())
}

pub fn composition_laws(r: &Relation, s: &Relation, t: &Relation) -> LawResult {
    prop_assert_eq!(r.compose(s).compose(t), r.compose(&s.compose(t)));
    prop_assert_eq!(r.compose(&s.union(t)), r.compose(s).union(&r.compose(t)));
    prop_assert_eq!(s.union(t).compose(r), s.compose(r).union(&t.compose(r)));
    let id = Relation::identity(r.universe());
    prop_assert_eq!(&r.compose(&id), r);
    prop_assert_eq!(&id.compose(r), r);
    prop_assert!(r.compose(&Relation::empty(r.universe())).is_empty());
    Ok(())
}

pub fn boolean_laws(r: &Relation, s: &Relation, t: &Relation) -> LawResult {
    prop_assert_eq!(r.union(s), s.union(r));
    prop_assert_eq!(
        r.intersection(&s.union(t)),
        r.intersection(s).union(&r.intersection(t))
    );
    prop_assert!(r.difference(s).intersection(s).is_empty());
    prop_assert_eq!(&r.difference(s).union(&r.intersection(s)), r);
    prop_assert!(r.intersection(s).is_subset(r));
    prop_assert!(r.is_subset(&r.union(s)));
    Ok(())
}

pub fn closure_laws(r: &Relation, s: &Relation) -> LawResult {
    let n = r.universe();
    let p = r.plus();
    prop_assert!(r.is_subset(&p));
    prop_assert!(p.compose(&p).is_subset(&p));
    prop_assert_eq!(&p, &naive_plus(r));
    let union_of_powers = (1..=n).fold(Relation::empty(n), |acc, k| acc.union(&power(r, k)));
    prop_assert_eq!(&p, &union_of_powers);
    // Any transitive superset of r contains r+.
    prop_assert!(p.is_subset(&r.union(s).plus()));
    prop_assert_eq!(&p.plus(), &p);
    prop_assert_eq!(r.star(), p.union(&Relation::identity(n)));
    prop_assert_eq!(r.star().compose(&r.star()), r.star());
    prop_assert_eq!(&r.compose(&r.star()), &p);
    let cyclic = (0..n).any(|i| p.contains(i, i));
    prop_assert_eq!(r.is_acyclic(), !cyclic);
    prop_assert_eq!(r.is_acyclic(), r.inverse().is_acyclic());
    Ok(())
}

/// `r^{<=0} = r` and `r^{<=k} = r;r^{<=k-1}`.
pub fn bounded_composition_law(r: &Relation, k: u32) -> LawResult {
    let (base, sets) = env_over(r);
    let cfg = SpecConfig::default();
    let env = Env {
        base: &base,
        sets: &sets,
        cfg: &cfg,
    };
    let m = parse_cat(&format!("x = po^{{<={k}}}")).unwrap();
    let got = eval_term(&m.definitions[0].term, &env, &BTreeMap::new()).unwrap();
    prop_assert_eq!(got, power(r, k as usize + 1));
    Ok(())
}

/// Recursive definitions evaluate to a solution of their equations, and
/// to the least one.
pub fn fixpoint_law(r: &Relation) -> LawResult {
    let (base, sets) = env_over(r);
    let cfg = SpecConfig::default();
    let env = Env {
        base: &base,
        sets: &sets,
        cfg: &cfg,
    };
    let m = parse_cat("t = po | t;t\nu = po | v;po\nv = u").unwrap();
    let b = evaluate(&m, &env).unwrap();
    let t = &b["t"];
    prop_assert_eq!(t, &r.union(&t.compose(t)));
    prop_assert_eq!(&b["u"], &r.union(&b["v"].compose(r)));
    prop_assert_eq!(&b["v"], &b["u"]);
    prop_assert_eq!(t, &r.plus());
    prop_assert_eq!(&b["u"], &r.plus());
    Ok(())
}

/// Every candidate of a small random program has a per-address total co
/// starting at the initial write and exactly one value-matching source per
/// load.
pub fn execution_law(seed: u64) -> LawResult {
    let mut rng = StdRng::seed_from_u64(seed);
    let text = random_program_sized(&mut rng, 4);
    let p = parse_program(&text).unwrap();
    let psf = seed.is_multiple_of(2);
    let cfg = SpecConfig {
        psf,
        ..SpecConfig::speculative(4)
    };
    let xs = enumerate_candidates(&p, &cfg, 1, 2).unwrap();
    prop_assert!(!xs.is_empty());
    for x in xs.iter().take(64) {
        prop_assert!(x.len() <= MAX_EVENTS, "{} events\n{}", x.len(), text);
        let committed_write = |i: usize| x.events[i].kind.is_write() && !x.events[i].transient;
        prop_assert!(x.co.is_acyclic());
        prop_assert!(x.co.compose(&x.co).is_subset(&x.co));
        for (a, b) in x.co.pairs() {
            prop_assert!(committed_write(a) && committed_write(b));
            prop_assert_eq!(x.events[a].addr, x.events[b].addr);
        }
        for a in 0..x.len() {
            for b in 0..x.len() {
                if a != b
                    && committed_write(a)
                    && committed_write(b)
                    && x.events[a].addr == x.events[b].addr
                {
                    prop_assert!(x.co.contains(a, b) ^ x.co.contains(b, a));
                }
            }
            if x.events[a].kind.is_init() {
                prop_assert_eq!(x.co.inverse().successors(a).count(), 0);
            }
        }
        let src = x.sources();
        for e in &x.events {
            let from: Vec<usize> = src.inverse().successors(e.id).collect();
            if e.kind == EventKind::Load {
                prop_assert_eq!(from.len(), 1);
                let w = &x.events[from[0]];
                prop_assert!(w.kind.is_write());
                prop_assert_eq!(w.val, e.val);
            } else {
                prop_assert!(from.is_empty());
            }
        }
        prop_assert!(x.rf.is_subset(&x.loc));
        prop_assert!(x.rf.is_subset(src));
        if !psf {
            prop_assert_eq!(&x.rf, src);
        }
        prop_assert!(base_relations(x).rfe.is_subset(&x.rf));
    }
    Ok(())
}

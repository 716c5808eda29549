use std::collections::BTreeMap;

use super::{AssertKind, BaseRel, Bound, CatModel, CatTerm, EvalError, SetName};
use crate::events::{BaseRelations, CandidateExecution, EventSets, Relation};
use crate::speculation::SpecConfig;

/// Values of all defined names.
pub type Bindings = BTreeMap<String, Relation>;

/// Everything a term can refer to besides named definitions.
pub struct Env<'a> {
    pub base: &'a BaseRelations,
    pub sets: &'a EventSets,
    pub cfg: &'a SpecConfig,
}

impl Env<'_> {
    fn n(&self) -> usize {
        self.sets.all.universe()
    }

    fn set(&self, s: SetName) -> &crate::events::EventSet {
        match s {
            SetName::E => &self.sets.all,
            SetName::M => &self.sets.memory,
            SetName::W => &self.sets.writes,
            SetName::R => &self.sets.reads,
        }
    }

    fn base(&self, b: BaseRel) -> &Relation {
        self.base
            .get(b.name())
            .expect("every base relation is provided")
    }

    fn bound(&self, b: Bound) -> Result<u32, EvalError> {
        let v = match b {
            Bound::Lit(k) => return Ok(k),
            Bound::Window(o) => self.cfg.window as i64 + o,
            Bound::Buffer(o) => self.cfg.buffer as i64 + o,
        };
        u32::try_from(v).map_err(|_| EvalError::NegativeBound(b))
    }
}

/// Evaluates one term; unbound names read as empty.
pub fn eval_term(t: &CatTerm, env: &Env, b: &Bindings) -> Result<Relation, EvalError> {
    Ok(match t {
        CatTerm::Base(r) => env.base(*r).clone(),
        CatTerm::Identity(s) => Relation::identity_on(env.set(*s)),
        CatTerm::Product(s, u) => Relation::product(env.set(*s), env.set(*u)),
        CatTerm::Named(n) => b
            .get(n)
            .cloned()
            .unwrap_or_else(|| Relation::empty(env.n())),
        CatTerm::Union(x, y) => eval_term(x, env, b)?.union(&eval_term(y, env, b)?),
        CatTerm::Inter(x, y) => eval_term(x, env, b)?.intersection(&eval_term(y, env, b)?),
        CatTerm::Diff(x, y) => eval_term(x, env, b)?.difference(&eval_term(y, env, b)?),
        CatTerm::Seq(x, y) => eval_term(x, env, b)?.compose(&eval_term(y, env, b)?),
        CatTerm::Inverse(x) => eval_term(x, env, b)?.inverse(),
        CatTerm::Plus(x) => eval_term(x, env, b)?.plus(),
        CatTerm::Star(x) => eval_term(x, env, b)?.star(),
        CatTerm::UpTo(x, k) => {
            // r^{<=0} = r and r^{<=k} = r;r^{<=k-1}.
            let r = eval_term(x, env, b)?;
            let mut acc = r.clone();
            for _ in 0..env.bound(*k)? {
                acc = r.compose(&acc);
            }
            acc
        }
    })
}

/// Computes the least solution of the model's equations, one strongly
/// connected component at a time, by Kleene iteration from the empty
/// relation.
pub fn evaluate(m: &CatModel, env: &Env) -> Result<Bindings, EvalError> {
    if m.uses_base(BaseRel::Srf) && !env.cfg.psf {
        return Err(EvalError::SrfWithoutPsf);
    }
    let n = env.n();
    let mut b = Bindings::new();
    for stratum in &m.strata {
        for i in stratum {
            b.insert(m.definitions[*i].name.clone(), Relation::empty(n));
        }
        // Each round adds at least one pair until stable.
        let limit = n * n * stratum.len() + 1;
        for _ in 0..=limit {
            let mut changed = false;
            for i in stratum {
                let d = &m.definitions[*i];
                let v = eval_term(&d.term, env, &b)?;
                if b[&d.name] != v {
                    b.insert(d.name.clone(), v);
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
    }
    Ok(b)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssertionReport {
    pub consistent: bool,
    /// Index of the first failing assertion in file order.
    pub first_violation: Option<usize>,
}

/// Checks the model's assertions in file order.
pub fn check_assertions(
    m: &CatModel,
    env: &Env,
    b: &Bindings,
) -> Result<AssertionReport, EvalError> {
    for (i, a) in m.assertions.iter().enumerate() {
        let r = eval_term(&a.term, env, b)?;
        let ok = match a.kind {
            AssertKind::Acyclic => r.is_acyclic(),
            AssertKind::Irreflexive => r.is_irreflexive(),
            AssertKind::Empty => r.is_empty(),
        };
        if !ok {
            return Ok(AssertionReport {
                consistent: false,
                first_violation: Some(i),
            });
        }
    }
    Ok(AssertionReport {
        consistent: true,
        first_violation: None,
    })
}

/// Forwarding across a fence only happens between same-address accesses:
/// `srf & fence` is contained in `loc`.
pub fn check_srf_fence(x: &CandidateExecution) -> bool {
    match &x.srf {
        Some(srf) => srf.intersection(&x.fence).is_subset(&x.loc),
        None => true,
    }
}

//! The CAT modelling language: derived relations defined by (possibly
//! recursive) equations, and assertions over them.

mod eval;
mod parse;

use std::fmt;

pub use eval::{
    check_assertions, check_srf_fence, eval_term, evaluate, AssertionReport, Bindings, Env,
};
pub use parse::parse_cat;

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum CatError {
    #[error("{line}:{col}: {msg}")]
    Syntax {
        line: usize,
        col: usize,
        msg: String,
    },
    #[error("{line}:{col}: undefined relation `{name}`")]
    UndefinedName {
        line: usize,
        col: usize,
        name: String,
    },
    #[error("line {line}: `{name}` is defined twice")]
    DuplicateDefinition { line: usize, name: String },
    #[error("line {line}: recursive relation `{name}` used in a non-monotone position")]
    NonMonotone { line: usize, name: String },
}

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum EvalError {
    #[error("bound {0} evaluates to a negative number")]
    NegativeBound(Bound),
    #[error("model uses `srf` but predictive store forwarding is disabled")]
    SrfWithoutPsf,
}

/// Event sets available in models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SetName {
    /// All events.
    E,
    /// Memory events.
    M,
    /// Stores and initial writes.
    W,
    /// Loads.
    R,
}

impl fmt::Display for SetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SetName::E => "E",
            SetName::M => "M",
            SetName::W => "W",
            SetName::R => "R",
        })
    }
}

/// Built-in relations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BaseRel {
    Po,
    Fence,
    Rf,
    Co,
    Loc,
    Addr,
    Srf,
    Rfe,
}

impl BaseRel {
    pub fn name(self) -> &'static str {
        match self {
            BaseRel::Po => "po",
            BaseRel::Fence => "fence",
            BaseRel::Rf => "rf",
            BaseRel::Co => "co",
            BaseRel::Loc => "loc",
            BaseRel::Addr => "addr",
            BaseRel::Srf => "srf",
            BaseRel::Rfe => "rfe",
        }
    }

    pub const ALL: [BaseRel; 8] = [
        BaseRel::Po,
        BaseRel::Fence,
        BaseRel::Rf,
        BaseRel::Co,
        BaseRel::Loc,
        BaseRel::Addr,
        BaseRel::Srf,
        BaseRel::Rfe,
    ];
}

/// Exponent of a bounded composition `r^{<=k}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Bound {
    Lit(u32),
    /// `w + offset`.
    Window(i64),
    /// `w' + offset`.
    Buffer(i64),
}

impl fmt::Display for Bound {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sym = |f: &mut fmt::Formatter<'_>, s: &str, o: i64| match o {
            0 => write!(f, "{s}"),
            o if o > 0 => write!(f, "{s}+{o}"),
            o => write!(f, "{s}{o}"),
        };
        match self {
            Bound::Lit(k) => write!(f, "{k}"),
            Bound::Window(o) => sym(f, "w", *o),
            Bound::Buffer(o) => sym(f, "w'", *o),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum CatTerm {
    Base(BaseRel),
    Identity(SetName),
    Product(SetName, SetName),
    Named(String),
    Union(Box<CatTerm>, Box<CatTerm>),
    Inter(Box<CatTerm>, Box<CatTerm>),
    Diff(Box<CatTerm>, Box<CatTerm>),
    Seq(Box<CatTerm>, Box<CatTerm>),
    Inverse(Box<CatTerm>),
    Plus(Box<CatTerm>),
    Star(Box<CatTerm>),
    UpTo(Box<CatTerm>, Bound),
}

impl CatTerm {
    /// Calls `f` on every named reference with its polarity (false under
    /// the right operand of an odd number of differences).
    pub fn visit_names(&self, positive: bool, f: &mut impl FnMut(&str, bool)) {
        match self {
            CatTerm::Named(n) => f(n, positive),
            CatTerm::Base(_) | CatTerm::Identity(_) | CatTerm::Product(..) => {}
            CatTerm::Union(a, b) | CatTerm::Inter(a, b) | CatTerm::Seq(a, b) => {
                a.visit_names(positive, f);
                b.visit_names(positive, f);
            }
            CatTerm::Diff(a, b) => {
                a.visit_names(positive, f);
                b.visit_names(!positive, f);
            }
            CatTerm::Inverse(a) | CatTerm::Plus(a) | CatTerm::Star(a) | CatTerm::UpTo(a, _) => {
                a.visit_names(positive, f)
            }
        }
    }

    pub fn uses_base(&self, b: BaseRel) -> bool {
        match self {
            CatTerm::Base(x) => *x == b,
            CatTerm::Identity(_) | CatTerm::Product(..) | CatTerm::Named(_) => false,
            CatTerm::Union(x, y)
            | CatTerm::Inter(x, y)
            | CatTerm::Diff(x, y)
            | CatTerm::Seq(x, y) => x.uses_base(b) || y.uses_base(b),
            CatTerm::Inverse(x) | CatTerm::Plus(x) | CatTerm::Star(x) | CatTerm::UpTo(x, _) => {
                x.uses_base(b)
            }
        }
    }

    fn prec(&self) -> u8 {
        match self {
            CatTerm::Union(..) => 1,
            CatTerm::Diff(..) => 2,
            CatTerm::Inter(..) => 3,
            CatTerm::Seq(..) => 4,
            CatTerm::Product(..) => 5,
            CatTerm::Inverse(_) | CatTerm::Plus(_) | CatTerm::Star(_) | CatTerm::UpTo(..) => 7,
            _ => 8,
        }
    }

    fn fmt_prec(&self, f: &mut fmt::Formatter<'_>, outer: u8) -> fmt::Result {
        let p = self.prec();
        if p < outer {
            write!(f, "(")?;
        }
        match self {
            CatTerm::Base(b) => write!(f, "{}", b.name())?,
            CatTerm::Identity(s) => write!(f, "[{s}]")?,
            CatTerm::Product(a, b) => write!(f, "{a} * {b}")?,
            CatTerm::Named(n) => write!(f, "{n}")?,
            CatTerm::Union(a, b)
            | CatTerm::Inter(a, b)
            | CatTerm::Diff(a, b)
            | CatTerm::Seq(a, b) => {
                let op = match self {
                    CatTerm::Union(..) => " | ",
                    CatTerm::Inter(..) => " & ",
                    CatTerm::Diff(..) => " \\ ",
                    _ => ";",
                };
                a.fmt_prec(f, p)?;
                write!(f, "{op}")?;
                b.fmt_prec(f, p + 1)?;
            }
            CatTerm::Inverse(a) => {
                a.fmt_prec(f, 7)?;
                write!(f, "^-1")?
            }
            CatTerm::Plus(a) => {
                a.fmt_prec(f, 7)?;
                write!(f, "^+")?
            }
            CatTerm::Star(a) => {
                a.fmt_prec(f, 7)?;
                write!(f, "^*")?
            }
            CatTerm::UpTo(a, k) => {
                a.fmt_prec(f, 7)?;
                write!(f, "^{{<={k}}}")?
            }
        }
        if p < outer {
            write!(f, ")")?;
        }
        Ok(())
    }
}

impl fmt::Display for CatTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.fmt_prec(f, 0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AssertKind {
    Acyclic,
    Irreflexive,
    Empty,
}

impl fmt::Display for AssertKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AssertKind::Acyclic => "acyclic",
            AssertKind::Irreflexive => "irreflexive",
            AssertKind::Empty => "empty",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assertion {
    pub kind: AssertKind,
    pub term: CatTerm,
    pub line: usize,
}

impl fmt::Display for Assertion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.kind, self.term)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Definition {
    pub name: String,
    pub term: CatTerm,
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CatModel {
    pub name: String,
    pub definitions: Vec<Definition>,
    pub assertions: Vec<Assertion>,
    /// Definition indices grouped into strongly connected components,
    /// dependencies first.
    pub(crate) strata: Vec<Vec<usize>>,
}

impl CatModel {
    pub fn definition(&self, name: &str) -> Option<&Definition> {
        self.definitions.iter().find(|d| d.name == name)
    }

    /// Whether any definition or assertion mentions the base relation.
    pub fn uses_base(&self, b: BaseRel) -> bool {
        self.definitions.iter().any(|d| d.term.uses_base(b))
            || self.assertions.iter().any(|a| a.term.uses_base(b))
    }

    /// Definitions that take part in a recursive cycle.
    pub fn recursive_names(&self) -> Vec<&str> {
        let mut out = Vec::new();
        for s in &self.strata {
            let d = &self.definitions[s[0]];
            let self_loop = {
                let mut hit = false;
                d.term.visit_names(true, &mut |n, _| hit |= n == d.name);
                hit
            };
            if s.len() > 1 || self_loop {
                out.extend(s.iter().map(|i| self.definitions[*i].name.as_str()));
            }
        }
        out
    }
}

/// Models shipped with the library, by name.
pub const BUNDLED: [(&str, &str); 5] = [
    ("inorder", include_str!("../../models/inorder.cat")),
    ("stl", include_str!("../../models/stl.cat")),
    ("psf", include_str!("../../models/psf.cat")),
    ("tso", include_str!("../../models/tso.cat")),
    ("tso-mcu", include_str!("../../models/tso-mcu.cat")),
];

/// Parses a bundled model by name.
pub fn bundled(name: &str) -> Option<CatModel> {
    let (_, text) = BUNDLED.iter().find(|(n, _)| *n == name)?;
    let mut m = parse_cat(text).expect("bundled model parses");
    m.name = name.to_string();
    Some(m)
}

use std::collections::BTreeMap;

use petgraph::algo::tarjan_scc;
use petgraph::graph::DiGraph;

use super::{
    AssertKind, Assertion, BaseRel, Bound, CatError, CatModel, CatTerm, Definition, SetName,
};

/// Parses a `.cat` model.
pub fn parse_cat(text: &str) -> Result<CatModel, CatError> {
    let mut definitions: Vec<Definition> = Vec::new();
    let mut assertions = Vec::new();
    let mut refs: Vec<(String, usize, usize)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let src = raw.split('#').next().unwrap_or("");
        let toks = lex(line, src)?;
        if toks.is_empty() {
            continue;
        }
        let mut p = Parser {
            toks,
            pos: 0,
            line,
            refs: &mut refs,
        };
        let kind = match p.peek() {
            Some(Tok::Ident(k)) if k == "acyclic" => Some(AssertKind::Acyclic),
            Some(Tok::Ident(k)) if k == "irreflexive" => Some(AssertKind::Irreflexive),
            Some(Tok::Ident(k)) if k == "empty" => Some(AssertKind::Empty),
            _ => None,
        };
        if let Some(kind) = kind {
            p.pos += 1;
            let term = p.term()?;
            p.end()?;
            assertions.push(Assertion { kind, term, line });
            continue;
        }
        if matches!(p.peek(), Some(Tok::Ident(k)) if k == "let") {
            p.pos += 1;
        }
        let (name, col) = match p.next() {
            Some((Tok::Ident(n), c)) => (n, c),
            other => {
                return Err(p.error_at(other.map(|o| o.1), "expected a definition or assertion"))
            }
        };
        if reserved(&name) {
            return Err(CatError::Syntax {
                line,
                col,
                msg: format!("`{name}` is a reserved name"),
            });
        }
        match p.next() {
            Some((Tok::Eq, _)) => {}
            other => return Err(p.error_at(other.map(|o| o.1), "expected `=`")),
        }
        let term = p.term()?;
        p.end()?;
        if definitions.iter().any(|d| d.name == name) {
            return Err(CatError::DuplicateDefinition { line, name });
        }
        definitions.push(Definition { name, term, line });
    }

    for (name, line, col) in &refs {
        if !definitions.iter().any(|d| &d.name == name) {
            return Err(CatError::UndefinedName {
                line: *line,
                col: *col,
                name: name.clone(),
            });
        }
    }

    let strata = stratify(&definitions)?;
    Ok(CatModel {
        name: String::new(),
        definitions,
        assertions,
        strata,
    })
}

fn reserved(name: &str) -> bool {
    base_rel(name).is_some()
        || set_name(name).is_some()
        || matches!(name, "acyclic" | "irreflexive" | "empty" | "let" | "w")
}

fn base_rel(name: &str) -> Option<BaseRel> {
    if name == "add" {
        return Some(BaseRel::Loc);
    }
    BaseRel::ALL.into_iter().find(|b| b.name() == name)
}

fn set_name(name: &str) -> Option<SetName> {
    Some(match name {
        "E" => SetName::E,
        "M" => SetName::M,
        "W" | "S" => SetName::W,
        "R" | "L" => SetName::R,
        _ => return None,
    })
}

/// Groups definitions into strongly connected components in dependency
/// order and rejects recursion through the right side of a difference.
fn stratify(defs: &[Definition]) -> Result<Vec<Vec<usize>>, CatError> {
    let index: BTreeMap<&str, usize> = defs
        .iter()
        .enumerate()
        .map(|(i, d)| (d.name.as_str(), i))
        .collect();
    let mut g = DiGraph::<usize, ()>::new();
    let nodes: Vec<_> = (0..defs.len()).map(|i| g.add_node(i)).collect();
    for (i, d) in defs.iter().enumerate() {
        d.term.visit_names(true, &mut |n, _| {
            g.update_edge(nodes[i], nodes[index[n]], ());
        });
    }
    let mut strata = Vec::new();
    for comp in tarjan_scc(&g) {
        let mut members: Vec<usize> = comp.iter().map(|n| g[*n]).collect();
        members.sort_unstable();
        for &m in &members {
            let d = &defs[m];
            let mut bad = None;
            d.term.visit_names(true, &mut |n, positive| {
                if !positive && members.contains(&index[n]) && bad.is_none() {
                    bad = Some(n.to_string());
                }
            });
            if let Some(name) = bad {
                return Err(CatError::NonMonotone { line: d.line, name });
            }
        }
        strata.push(members);
    }
    Ok(strata)
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Num(u32),
    Eq,
    Bar,
    Amp,
    Backslash,
    Semi,
    Star,
    LParen,
    RParen,
    LBrack,
    RBrack,
    Inverse,
    PlusPost,
    StarPost,
    UpTo(Bound),
}

fn lex(line: usize, s: &str) -> Result<Vec<(Tok, usize)>, CatError> {
    let cs: Vec<char> = s.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    let err = |col: usize, msg: String| CatError::Syntax { line, col, msg };
    while i < cs.len() {
        let c = cs[i];
        let col = i + 1;
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        let single = match c {
            '=' => Some(Tok::Eq),
            '|' | '∪' => Some(Tok::Bar),
            '&' | '∩' => Some(Tok::Amp),
            '\\' => Some(Tok::Backslash),
            ';' => Some(Tok::Semi),
            '*' | '×' => Some(Tok::Star),
            '(' => Some(Tok::LParen),
            ')' => Some(Tok::RParen),
            '[' => Some(Tok::LBrack),
            ']' => Some(Tok::RBrack),
            _ => None,
        };
        if let Some(t) = single {
            out.push((t, col));
            i += 1;
            continue;
        }
        if c == '^' {
            let rest: String = cs[i + 1..].iter().collect();
            if rest.starts_with("-1") {
                out.push((Tok::Inverse, col));
                i += 3;
            } else if rest.starts_with('+') {
                out.push((Tok::PlusPost, col));
                i += 2;
            } else if rest.starts_with('*') {
                out.push((Tok::StarPost, col));
                i += 2;
            } else if let Some(body) = rest.strip_prefix("{<=").or_else(|| rest.strip_prefix("{≤"))
            {
                let close = body
                    .find('}')
                    .ok_or_else(|| err(col, "unterminated `^{<=`".into()))?;
                let bound = parse_bound(&body[..close])
                    .ok_or_else(|| err(col, format!("bad bound `{}`", &body[..close])))?;
                out.push((Tok::UpTo(bound), col));
                let consumed = rest.len() - body.len() + close + 1;
                i += 1 + rest[..consumed].chars().count();
            } else {
                return Err(err(col, "expected `^-1`, `^+`, `^*` or `^{<=k}`".into()));
            }
            continue;
        }
        if c.is_ascii_digit() {
            let start = i;
            while i < cs.len() && cs[i].is_ascii_digit() {
                i += 1;
            }
            let text: String = cs[start..i].iter().collect();
            out.push((
                Tok::Num(
                    text.parse()
                        .map_err(|_| err(col, "number too large".into()))?,
                ),
                col,
            ));
            continue;
        }
        if c.is_alphabetic() || c == '_' {
            let start = i;
            while i < cs.len()
                && (cs[i].is_alphanumeric() || matches!(cs[i], '_' | '-' | '\'' | '.'))
            {
                i += 1;
            }
            out.push((Tok::Ident(cs[start..i].iter().collect()), col));
            continue;
        }
        return Err(err(col, format!("unexpected character `{c}`")));
    }
    Ok(out)
}

fn parse_bound(s: &str) -> Option<Bound> {
    let s: String = s.chars().filter(|c| !c.is_whitespace()).collect();
    if let Ok(k) = s.parse() {
        return Some(Bound::Lit(k));
    }
    let (sym, rest) = if let Some(r) = s.strip_prefix("w'").or_else(|| s.strip_prefix("w′")) {
        (true, r)
    } else {
        let r = s.strip_prefix('w')?;
        (false, r)
    };
    let off: i64 = if rest.is_empty() {
        0
    } else if let Some(n) = rest.strip_prefix('+') {
        n.parse().ok()?
    } else {
        let n = rest.strip_prefix('-')?;
        -n.parse::<i64>().ok()?
    };
    Some(if sym {
        Bound::Buffer(off)
    } else {
        Bound::Window(off)
    })
}

struct Parser<'a> {
    toks: Vec<(Tok, usize)>,
    pos: usize,
    line: usize,
    refs: &'a mut Vec<(String, usize, usize)>,
}

impl Parser<'_> {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|t| &t.0)
    }

    fn next(&mut self) -> Option<(Tok, usize)> {
        let t = self.toks.get(self.pos).cloned();
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn col(&self) -> usize {
        self.toks
            .get(self.pos)
            .map(|t| t.1)
            .unwrap_or_else(|| self.toks.last().map(|t| t.1 + 1).unwrap_or(1))
    }

    fn error_at(&self, col: Option<usize>, msg: &str) -> CatError {
        CatError::Syntax {
            line: self.line,
            col: col.unwrap_or_else(|| self.col()),
            msg: msg.to_string(),
        }
    }

    fn end(&self) -> Result<(), CatError> {
        if self.pos < self.toks.len() {
            return Err(self.error_at(None, "unexpected trailing input"));
        }
        Ok(())
    }

    fn term(&mut self) -> Result<CatTerm, CatError> {
        self.level(0)
    }

    /// Binary levels from loosest to tightest: `|`, `\`, `&`, `;`.
    fn level(&mut self, lvl: u8) -> Result<CatTerm, CatError> {
        if lvl == 4 {
            return self.postfix();
        }
        let mut lhs = self.level(lvl + 1)?;
        loop {
            let op = match (lvl, self.peek()) {
                (0, Some(Tok::Bar))
                | (1, Some(Tok::Backslash))
                | (2, Some(Tok::Amp))
                | (3, Some(Tok::Semi)) => lvl,
                _ => break,
            };
            self.pos += 1;
            let rhs = self.level(lvl + 1)?;
            let (a, b) = (Box::new(lhs), Box::new(rhs));
            lhs = match op {
                0 => CatTerm::Union(a, b),
                1 => CatTerm::Diff(a, b),
                2 => CatTerm::Inter(a, b),
                _ => CatTerm::Seq(a, b),
            };
        }
        Ok(lhs)
    }

    fn postfix(&mut self) -> Result<CatTerm, CatError> {
        let mut t = self.atom()?;
        loop {
            t = match self.peek() {
                Some(Tok::Inverse) => CatTerm::Inverse(Box::new(t)),
                Some(Tok::PlusPost) => CatTerm::Plus(Box::new(t)),
                Some(Tok::StarPost) => CatTerm::Star(Box::new(t)),
                Some(Tok::UpTo(b)) => CatTerm::UpTo(Box::new(t), *b),
                _ => return Ok(t),
            };
            self.pos += 1;
        }
    }

    fn set(&mut self) -> Result<SetName, CatError> {
        match self.next() {
            Some((Tok::Ident(n), c)) => set_name(&n)
                .ok_or_else(|| self.error_at(Some(c), &format!("`{n}` is not an event set"))),
            other => Err(self.error_at(other.map(|o| o.1), "expected an event set")),
        }
    }

    fn atom(&mut self) -> Result<CatTerm, CatError> {
        let col = self.col();
        match self.next() {
            Some((Tok::LParen, _)) => {
                let t = self.term()?;
                match self.next() {
                    Some((Tok::RParen, _)) => Ok(t),
                    other => Err(self.error_at(other.map(|o| o.1), "expected `)`")),
                }
            }
            Some((Tok::LBrack, _)) => {
                let s = self.set()?;
                match self.next() {
                    Some((Tok::RBrack, _)) => Ok(CatTerm::Identity(s)),
                    other => Err(self.error_at(other.map(|o| o.1), "expected `]`")),
                }
            }
            Some((Tok::Ident(n), _)) => {
                if let Some(s) = set_name(&n) {
                    match self.next() {
                        Some((Tok::Star, _)) => {}
                        other => {
                            return Err(self.error_at(
                                other.map(|o| o.1),
                                "an event set must be used as `[S]` or `S * S`",
                            ))
                        }
                    }
                    let t = self.set()?;
                    return Ok(CatTerm::Product(s, t));
                }
                if let Some(b) = base_rel(&n) {
                    return Ok(CatTerm::Base(b));
                }
                self.refs.push((n.clone(), self.line, col));
                Ok(CatTerm::Named(n))
            }
            other => Err(self.error_at(other.map(|o| o.1), "expected a relation")),
        }
    }
}

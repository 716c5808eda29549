//! Structural validation of emitted SMT-LIB2 queries.

use std::collections::BTreeSet;

const BUILTINS: &[&str] = &[
    "set-logic",
    "QF_BV",
    "declare-fun",
    "define-fun",
    "assert",
    "check-sat",
    "exit",
    "and",
    "or",
    "not",
    "=>",
    "=",
    "ite",
    "distinct",
    "true",
    "false",
    "_",
    "BitVec",
    "Bool",
    "bvult",
    "bvule",
    "bvugt",
    "bvuge",
    "bvadd",
    "bvsub",
    "bvmul",
    "bvudiv",
    "bvurem",
    "bvand",
    "bvor",
    "bvxor",
    "bvshl",
    "bvlshr",
    "bvnot",
    "bvneg",
];

#[derive(Debug, Clone, PartialEq, Eq)]
enum Sx {
    Atom(String),
    List(Vec<Sx>),
}

fn tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for line in text.lines() {
        let line = match line.find(';') {
            Some(i) => &line[..i],
            None => line,
        };
        let mut cur = String::new();
        for c in line.chars() {
            match c {
                '(' | ')' => {
                    if !cur.is_empty() {
                        out.push(std::mem::take(&mut cur));
                    }
                    out.push(c.to_string());
                }
                c if c.is_whitespace() => {
                    if !cur.is_empty() {
                        out.push(std::mem::take(&mut cur));
                    }
                }
                c => cur.push(c),
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

fn parse(toks: &[String]) -> Result<Vec<Sx>, String> {
    let mut stack: Vec<Vec<Sx>> = vec![Vec::new()];
    for t in toks {
        match t.as_str() {
            "(" => stack.push(Vec::new()),
            ")" => {
                let done = stack.pop().ok_or("unbalanced `)`")?;
                stack
                    .last_mut()
                    .ok_or("unbalanced `)`")?
                    .push(Sx::List(done));
            }
            a => stack.last_mut().unwrap().push(Sx::Atom(a.to_string())),
        }
    }
    if stack.len() != 1 {
        return Err(format!("{} unclosed `(`", stack.len() - 1));
    }
    Ok(stack.pop().unwrap())
}

fn atoms<'a>(s: &'a Sx, out: &mut Vec<&'a str>) {
    match s {
        Sx::Atom(a) => out.push(a),
        Sx::List(xs) => xs.iter().for_each(|x| atoms(x, out)),
    }
}

fn is_literal(a: &str) -> bool {
    a.chars().all(|c| c.is_ascii_digit())
        || a.strip_prefix("bv")
            .is_some_and(|d| !d.is_empty() && d.chars().all(|c| c.is_ascii_digit()))
        || a.starts_with("#b")
        || a.starts_with("#x")
}

/// Checks balance, the command set, single definitions, use after
/// declaration and the closing `(check-sat)` `(exit)`.
pub fn check_structure(text: &str) -> Result<usize, String> {
    let forms = parse(&tokens(text))?;
    let mut declared: BTreeSet<String> = BTreeSet::new();
    let builtin: BTreeSet<&str> = BUILTINS.iter().copied().collect();
    let n = forms.len();
    if n < 3 {
        return Err("too few commands".into());
    }
    for (i, f) in forms.iter().enumerate() {
        let Sx::List(xs) = f else {
            return Err(format!("top-level atom at command {i}"));
        };
        let head = match xs.first() {
            Some(Sx::Atom(h)) => h.as_str(),
            _ => return Err(format!("command {i} has no head")),
        };
        let body: &[Sx] = match head {
            "set-logic" => {
                if i != 0 || xs.len() != 2 {
                    return Err("set-logic must come first".into());
                }
                continue;
            }
            "declare-fun" | "define-fun" => {
                let name = match xs.get(1) {
                    Some(Sx::Atom(a)) => a.clone(),
                    _ => return Err(format!("command {i}: bad {head}")),
                };
                if head == "declare-fun" && xs.len() != 4 || head == "define-fun" && xs.len() != 5 {
                    return Err(format!("{name}: wrong arity for {head}"));
                }
                if xs[2] != Sx::List(Vec::new()) {
                    return Err(format!("{name}: functions with arguments are not expected"));
                }
                let body = &xs[3..];
                let mut used = Vec::new();
                body.iter().for_each(|b| atoms(b, &mut used));
                for a in used {
                    if !builtin.contains(a) && !is_literal(a) && !declared.contains(a) {
                        return Err(format!("{name} uses `{a}` before its declaration"));
                    }
                }
                if !declared.insert(name.clone()) || builtin.contains(name.as_str()) {
                    return Err(format!("{name} declared twice"));
                }
                continue;
            }
            "assert" => &xs[1..],
            "check-sat" if i + 2 == n => continue,
            "exit" if i + 1 == n => continue,
            other => return Err(format!("unexpected command `{other}` at position {i}")),
        };
        if body.len() != 1 {
            return Err(format!("assert at {i} takes one term"));
        }
        let mut used = Vec::new();
        atoms(&body[0], &mut used);
        for a in used {
            if !builtin.contains(a) && !is_literal(a) && !declared.contains(a) {
                return Err(format!("assert at {i} uses undeclared `{a}`"));
            }
        }
    }
    let tail = |i: usize| match &forms[i] {
        Sx::List(xs) => {
            matches!(xs.as_slice(), [Sx::Atom(a)] if a == (if i + 1 == n { "exit" } else { "check-sat" }))
        }
        _ => false,
    };
    if !tail(n - 2) || !tail(n - 1) {
        return Err("query must end with (check-sat) (exit)".into());
    }
    Ok(n)
}

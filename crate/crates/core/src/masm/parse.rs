use std::collections::BTreeSet;

use super::{
    BinOp, Expectation, Expr, Instruction, Label, Layout, MasmError, Origin, Outcome, Program, Reg,
    Region, Stmt, Thread, UnOp,
};

/// Parses a litmus file.
///
/// ```text
/// layout A[4]@0 B[8]@16 secret@100 input idx@32
/// thread 0:
/// 1: load r1, idx
/// 2: beqz r1, end
/// expect unsafe model=inorder
/// ```
pub fn parse_program(text: &str) -> Result<Program, MasmError> {
    let lines: Vec<(usize, &str)> = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, strip_comment(l).trim()))
        .filter(|(_, l)| !l.is_empty())
        .collect();

    let mut layout = LayoutBuilder::default();
    for (line, l) in &lines {
        if let Some(rest) = keyword(l, "layout") {
            layout.parse_line(*line, rest)?;
        }
    }
    let (layout, secret_addr, inputs) = layout.finish()?;
    let syms = Symbols {
        layout: &layout,
        secret: secret_addr,
    };

    let mut threads: Vec<RawThread> = Vec::new();
    let mut expectations = Vec::new();
    for (line, l) in &lines {
        let line = *line;
        if keyword(l, "layout").is_some() {
            continue;
        }
        if let Some(rest) = keyword(l, "expect") {
            expectations.push(parse_expect(line, rest)?);
            continue;
        }
        if let Some(rest) = keyword(l, "thread") {
            let num = rest.trim().trim_end_matches(':').trim();
            let id: usize = num.parse().map_err(|_| syntax(line, "bad thread header"))?;
            if id != threads.len() {
                return Err(MasmError::ThreadOrder(id));
            }
            threads.push(RawThread::default());
            continue;
        }
        let (label, body) = l
            .split_once(':')
            .ok_or_else(|| syntax(line, format!("expected `LABEL: statement`, got `{l}`")))?;
        let label: Label = label
            .trim()
            .parse()
            .map_err(|_| syntax(line, format!("bad label `{}`", label.trim())))?;
        if threads.is_empty() {
            threads.push(RawThread::default());
        }
        let th = threads.last_mut().unwrap();
        if th.instrs.iter().any(|(_, l, _)| *l == label) {
            return Err(MasmError::DuplicateLabel { line, label });
        }
        if let Some((_, prev, _)) = th.instrs.last() {
            if label != prev + 1 {
                return Err(MasmError::NonConsecutiveLabel {
                    line,
                    label,
                    expected: prev + 1,
                });
            }
        }
        th.instrs.push((line, label, body.trim().to_string()));
    }
    if threads.is_empty() {
        threads.push(RawThread::default());
    }

    let mut out = Vec::new();
    for (tid, raw) in threads.into_iter().enumerate() {
        let first = raw.instrs.first().map(|(_, l, _)| *l).unwrap_or(1);
        let exit = first + raw.instrs.len() as Label;
        let mut instrs = Vec::new();
        for (line, label, body) in raw.instrs {
            let stmt = parse_stmt(line, &body, exit, &syms)?;
            if let Some(t) = stmt.jump_target() {
                if t < first || t > exit {
                    return Err(MasmError::UndefinedJumpTarget { line, label: t });
                }
            }
            instrs.push(Instruction {
                label,
                stmt,
                thread: tid,
                origin: Origin::Source {
                    label,
                    iteration: 1,
                },
                text: body,
            });
        }
        out.push(Thread {
            id: tid,
            first,
            instrs,
        });
    }

    Ok(Program {
        threads: out,
        layout,
        secret_addr,
        inputs,
        expectations,
    })
}

#[derive(Default)]
struct RawThread {
    instrs: Vec<(usize, Label, String)>,
}

fn strip_comment(l: &str) -> &str {
    match l.find('#') {
        Some(i) => &l[..i],
        None => l,
    }
}

fn keyword<'a>(l: &'a str, kw: &str) -> Option<&'a str> {
    let rest = l.strip_prefix(kw)?;
    if rest.is_empty() || rest.starts_with(char::is_whitespace) {
        Some(rest)
    } else {
        None
    }
}

fn syntax(line: usize, msg: impl Into<String>) -> MasmError {
    MasmError::Syntax {
        line,
        msg: msg.into(),
    }
}

#[derive(Default)]
struct LayoutBuilder {
    regions: Vec<Region>,
    secret: Option<u64>,
    input_names: Vec<(usize, String)>,
}

impl LayoutBuilder {
    fn parse_line(&mut self, line: usize, rest: &str) -> Result<(), MasmError> {
        let mut input = false;
        for tok in rest.split_whitespace() {
            if tok == "input" {
                input = true;
                continue;
            }
            let is_input = std::mem::take(&mut input);
            let Some((head, addr)) = tok.split_once('@') else {
                if is_input {
                    self.input_names.push((line, tok.to_string()));
                    continue;
                }
                return Err(syntax(line, format!("bad layout item `{tok}`")));
            };
            let (addr, init) = match addr.split_once('=') {
                Some((a, v)) => (a, Some(parse_num(line, v)?)),
                None => (addr, None),
            };
            let addr = parse_num(line, addr)?;
            if head == "secret" || head == "⊛" {
                if self.secret.replace(addr).is_some() {
                    return Err(MasmError::DuplicateRegion("secret".into()));
                }
                continue;
            }
            let (name, extent) = match head.split_once('[') {
                Some((n, e)) => {
                    let e = e
                        .strip_suffix(']')
                        .ok_or_else(|| syntax(line, format!("bad extent in `{tok}`")))?;
                    (n, parse_num(line, e)?)
                }
                None => (head, 1),
            };
            if !is_ident(name) {
                return Err(syntax(line, format!("bad region name `{name}`")));
            }
            if extent == 0 {
                return Err(syntax(line, format!("region `{name}` is empty")));
            }
            if self.regions.iter().any(|r| r.name == name) {
                return Err(MasmError::DuplicateRegion(name.to_string()));
            }
            self.regions.push(Region {
                name: name.to_string(),
                base: addr,
                extent,
                init: init.unwrap_or(0),
                input: is_input,
            });
        }
        if input {
            return Err(syntax(line, "`input` must be followed by a location"));
        }
        Ok(())
    }

    fn finish(mut self) -> Result<(Layout, u64, BTreeSet<u64>), MasmError> {
        for (line, name) in &self.input_names {
            let r = self
                .regions
                .iter_mut()
                .find(|r| &r.name == name)
                .ok_or_else(|| MasmError::UnknownRegister {
                    line: *line,
                    name: name.clone(),
                })?;
            r.input = true;
        }
        for (i, a) in self.regions.iter().enumerate() {
            for b in &self.regions[i + 1..] {
                if a.base < b.base + b.extent && b.base < a.base + a.extent {
                    return Err(MasmError::OverlappingRegions(
                        a.name.clone(),
                        b.name.clone(),
                    ));
                }
            }
        }
        let secret = match self.secret {
            Some(s) => s,
            None => self
                .regions
                .iter()
                .map(|r| r.base + r.extent)
                .max()
                .unwrap_or(0),
        };
        if let Some(r) = self.regions.iter().find(|r| r.contains(secret)) {
            return Err(MasmError::SecretInsideRegion(secret, r.name.clone()));
        }
        let inputs = self
            .regions
            .iter()
            .filter(|r| r.input)
            .flat_map(|r| r.base..r.base + r.extent)
            .collect();
        Ok((
            Layout {
                regions: self.regions,
            },
            secret,
            inputs,
        ))
    }
}

fn is_ident(s: &str) -> bool {
    let mut cs = s.chars();
    matches!(cs.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && cs.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

fn parse_num(line: usize, s: &str) -> Result<u64, MasmError> {
    let s = s.trim();
    let r = if let Some(h) = s.strip_prefix("0x") {
        u64::from_str_radix(h, 16)
    } else {
        s.parse()
    };
    r.map_err(|_| syntax(line, format!("bad number `{s}`")))
}

fn parse_expect(line: usize, rest: &str) -> Result<Expectation, MasmError> {
    let mut toks = rest.split_whitespace();
    let outcome = match toks.next() {
        Some("safe") => Outcome::Safe,
        Some("unsafe") => Outcome::Unsafe,
        Some("unknown") => Outcome::Unknown,
        other => return Err(syntax(line, format!("bad expectation `{other:?}`"))),
    };
    let mut e = Expectation {
        outcome,
        model: String::new(),
        mode: None,
        k: None,
        w: None,
        buffer: None,
        bits: None,
    };
    for tok in toks {
        let (key, val) = tok
            .split_once('=')
            .ok_or_else(|| syntax(line, format!("expected key=value, got `{tok}`")))?;
        let num = || -> Result<u32, MasmError> {
            val.parse()
                .map_err(|_| syntax(line, format!("bad value for {key}")))
        };
        match key {
            "model" => e.model = val.to_string(),
            "mode" => e.mode = Some(val.to_string()),
            "k" => e.k = Some(num()?),
            "w" => e.w = Some(num()?),
            "buffer" => e.buffer = Some(num()?),
            "bits" => e.bits = Some(num()?),
            _ => return Err(syntax(line, format!("unknown expectation key `{key}`"))),
        }
    }
    if e.model.is_empty() {
        return Err(syntax(line, "expectation without model="));
    }
    Ok(e)
}

struct Symbols<'a> {
    layout: &'a Layout,
    secret: u64,
}

fn parse_reg(line: usize, s: &str) -> Result<Reg, MasmError> {
    let s = s.trim();
    s.strip_prefix('r')
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| MasmError::UnknownRegister {
            line,
            name: s.to_string(),
        })
}

fn parse_target(line: usize, s: &str, exit: Label) -> Result<Label, MasmError> {
    let s = s.trim();
    if s == "end" {
        return Ok(exit);
    }
    s.parse()
        .map_err(|_| syntax(line, format!("bad jump target `{s}`")))
}

fn parse_stmt(line: usize, body: &str, exit: Label, syms: &Symbols) -> Result<Stmt, MasmError> {
    let body = body.trim();
    if body == "skip" {
        return Ok(Stmt::Skip);
    }
    if body == "fence" {
        return Ok(Stmt::Fence);
    }
    if let Some(rest) = keyword(body, "jmp") {
        return Ok(Stmt::Jmp {
            target: parse_target(line, rest, exit)?,
        });
    }
    if let Some(rest) = keyword(body, "beqz") {
        let (r, t) = rest
            .split_once(',')
            .ok_or_else(|| syntax(line, "expected `beqz REG, LABEL`"))?;
        return Ok(Stmt::Beqz {
            reg: parse_reg(line, r)?,
            target: parse_target(line, t, exit)?,
        });
    }
    if let Some(rest) = keyword(body, "load") {
        let (r, e) = rest
            .split_once(',')
            .ok_or_else(|| syntax(line, "expected `load REG, EXPR`"))?;
        return Ok(Stmt::Load {
            dst: parse_reg(line, r)?,
            addr: parse_expr(line, e, syms)?,
        });
    }
    if let Some(rest) = keyword(body, "store") {
        let (a, v) = rest
            .split_once(',')
            .ok_or_else(|| syntax(line, "expected `store ADDR, VALUE`"))?;
        return Ok(Stmt::Store {
            addr: parse_expr(line, a, syms)?,
            value: parse_expr(line, v, syms)?,
        });
    }
    let arrow = body
        .find("<-")
        .map(|i| (i, 2))
        .or_else(|| body.find('←').map(|i| (i, '←'.len_utf8())));
    if let Some((i, n)) = arrow {
        let dst = parse_reg(line, &body[..i])?;
        let rhs = &body[i + n..];
        return Ok(match rhs.split_once('?') {
            Some((c, v)) => Stmt::CondAssign {
                dst,
                cond: parse_expr(line, c, syms)?,
                value: parse_expr(line, v, syms)?,
            },
            None => Stmt::Assign {
                dst,
                value: parse_expr(line, rhs, syms)?,
            },
        });
    }
    Err(syntax(line, format!("unknown statement `{body}`")))
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(u64),
    Ident(String),
    Secret,
    Op(&'static str),
    LParen,
    RParen,
}

const OPS: [&str; 19] = [
    "<<", ">>", "<=", ">=", "==", "!=", "+", "-", "*", "/", "%", "&", "|", "^", "<", ">", "~", "!",
    "=",
];

fn lex(line: usize, s: &str) -> Result<Vec<Tok>, MasmError> {
    let mut out = Vec::new();
    let cs: Vec<char> = s.chars().collect();
    let mut i = 0;
    while i < cs.len() {
        let c = cs[i];
        if c.is_whitespace() {
            i += 1;
        } else if c == '⊛' {
            out.push(Tok::Secret);
            i += 1;
        } else if c == '(' {
            out.push(Tok::LParen);
            i += 1;
        } else if c == ')' {
            out.push(Tok::RParen);
            i += 1;
        } else if c.is_ascii_digit() {
            let start = i;
            while i < cs.len() && cs[i].is_ascii_alphanumeric() {
                i += 1;
            }
            let text: String = cs[start..i].iter().collect();
            out.push(Tok::Num(parse_num(line, &text)?));
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < cs.len() && (cs[i].is_ascii_alphanumeric() || cs[i] == '_' || cs[i] == '.') {
                i += 1;
            }
            out.push(Tok::Ident(cs[start..i].iter().collect()));
        } else {
            let rest: String = cs[i..].iter().take(2).collect();
            let op = OPS
                .iter()
                .find(|op| rest.starts_with(**op))
                .ok_or_else(|| syntax(line, format!("unexpected character `{c}`")))?;
            if *op == "=" {
                return Err(syntax(line, "unexpected `=`"));
            }
            out.push(Tok::Op(op));
            i += op.chars().count();
        }
    }
    Ok(out)
}

fn binop(op: &str) -> Option<BinOp> {
    Some(match op {
        "+" => BinOp::Add,
        "-" => BinOp::Sub,
        "*" => BinOp::Mul,
        "/" => BinOp::Div,
        "%" => BinOp::Rem,
        "&" => BinOp::And,
        "|" => BinOp::Or,
        "^" => BinOp::Xor,
        "<<" => BinOp::Shl,
        ">>" => BinOp::Shr,
        "==" => BinOp::Eq,
        "!=" => BinOp::Ne,
        "<" => BinOp::Lt,
        "<=" => BinOp::Le,
        ">" => BinOp::Gt,
        ">=" => BinOp::Ge,
        _ => return None,
    })
}

fn parse_expr(line: usize, s: &str, syms: &Symbols) -> Result<Expr, MasmError> {
    let toks = lex(line, s)?;
    if toks.is_empty() {
        return Err(syntax(line, "empty expression"));
    }
    let mut p = ExprParser {
        toks,
        pos: 0,
        line,
        syms,
    };
    let e = p.binary(0)?;
    if p.pos != p.toks.len() {
        return Err(syntax(line, format!("trailing input in `{}`", s.trim())));
    }
    Ok(e)
}

struct ExprParser<'a, 'b> {
    toks: Vec<Tok>,
    pos: usize,
    line: usize,
    syms: &'a Symbols<'b>,
}

impl ExprParser<'_, '_> {
    fn binary(&mut self, min: u8) -> Result<Expr, MasmError> {
        let mut lhs = self.unary()?;
        while let Some(Tok::Op(op)) = self.toks.get(self.pos) {
            let Some(b) = binop(op) else { break };
            let prec = b.precedence();
            if prec < min {
                break;
            }
            self.pos += 1;
            let rhs = self.binary(prec + 1)?;
            lhs = Expr::bin(b, lhs, rhs);
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr, MasmError> {
        let tok = self
            .toks
            .get(self.pos)
            .cloned()
            .ok_or_else(|| syntax(self.line, "unexpected end of expression"))?;
        self.pos += 1;
        match tok {
            Tok::Num(n) => Ok(Expr::Const(n)),
            Tok::Secret => Ok(Expr::Const(self.syms.secret)),
            Tok::Ident(name) => self.ident(&name),
            Tok::LParen => {
                let e = self.binary(0)?;
                if self.toks.get(self.pos) != Some(&Tok::RParen) {
                    return Err(syntax(self.line, "missing `)`"));
                }
                self.pos += 1;
                Ok(e)
            }
            Tok::Op("-") => Ok(Expr::Unary(UnOp::Neg, Box::new(self.unary()?))),
            Tok::Op("~") => Ok(Expr::Unary(UnOp::Not, Box::new(self.unary()?))),
            Tok::Op("!") => Ok(Expr::Unary(UnOp::LogicalNot, Box::new(self.unary()?))),
            other => Err(syntax(self.line, format!("unexpected token {other:?}"))),
        }
    }

    fn ident(&self, name: &str) -> Result<Expr, MasmError> {
        if name == "secret" {
            return Ok(Expr::Const(self.syms.secret));
        }
        if let Some(n) = name.strip_prefix('r') {
            if let Ok(r) = n.parse::<Reg>() {
                return Ok(Expr::Reg(r));
            }
        }
        let unknown = || MasmError::UnknownRegister {
            line: self.line,
            name: name.to_string(),
        };
        if let Some(base) = name.strip_suffix(".size") {
            let r = self.syms.layout.region(base).ok_or_else(unknown)?;
            return Ok(Expr::Const(r.extent));
        }
        let r = self.syms.layout.region(name).ok_or_else(unknown)?;
        Ok(Expr::Const(r.base))
    }
}

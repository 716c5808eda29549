//! The μASM language: programs, expressions, static predecessors and loop unrolling.

mod parse;
mod unroll;

use std::collections::BTreeSet;
use std::fmt;

pub use parse::parse_program;
pub use unroll::{unroll, Unrolled};

/// Register index, written `rN` in source.
pub type Reg = u32;
/// Per-thread instruction label.
pub type Label = u32;
/// Thread index, contiguous from 0.
pub type ThreadId = usize;

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum MasmError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: duplicate label {label}")]
    DuplicateLabel { line: usize, label: Label },
    #[error("line {line}: label {label} is not consecutive (expected {expected})")]
    NonConsecutiveLabel {
        line: usize,
        label: Label,
        expected: Label,
    },
    #[error("line {line}: undefined jump target {label}")]
    UndefinedJumpTarget { line: usize, label: Label },
    #[error("line {line}: unknown register or symbol `{name}`")]
    UnknownRegister { line: usize, name: String },
    #[error("layout regions `{0}` and `{1}` overlap")]
    OverlappingRegions(String, String),
    #[error("secret address {0} lies inside region `{1}`")]
    SecretInsideRegion(u64, String),
    #[error("duplicate layout name `{0}`")]
    DuplicateRegion(String),
    #[error("thread {0} declared out of order")]
    ThreadOrder(usize),
    #[error("unknown label {label} in thread {thread}")]
    UnknownLabel { thread: ThreadId, label: Label },
    #[error("unknown thread {0}")]
    UnknownThread(ThreadId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum UnOp {
    Neg,
    Not,
    LogicalNot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Rem,
    And,
    Or,
    Xor,
    Shl,
    Shr,
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl BinOp {
    fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
            BinOp::Rem => "%",
            BinOp::And => "&",
            BinOp::Or => "|",
            BinOp::Xor => "^",
            BinOp::Shl => "<<",
            BinOp::Shr => ">>",
            BinOp::Eq => "==",
            BinOp::Ne => "!=",
            BinOp::Lt => "<",
            BinOp::Le => "<=",
            BinOp::Gt => ">",
            BinOp::Ge => ">=",
        }
    }

    /// Binding strength, higher binds tighter.
    pub(crate) fn precedence(self) -> u8 {
        match self {
            BinOp::Or => 1,
            BinOp::Xor => 2,
            BinOp::And => 3,
            BinOp::Eq | BinOp::Ne => 4,
            BinOp::Lt | BinOp::Le | BinOp::Gt | BinOp::Ge => 5,
            BinOp::Shl | BinOp::Shr => 6,
            BinOp::Add | BinOp::Sub => 7,
            BinOp::Mul | BinOp::Div | BinOp::Rem => 8,
        }
    }

    /// Applies the operator modulo the domain; comparisons yield 0 or 1.
    pub fn apply(self, a: u64, b: u64, dom: Domain) -> u64 {
        let m = dom.mask();
        let r = match self {
            BinOp::Add => a.wrapping_add(b),
            BinOp::Sub => a.wrapping_sub(b),
            BinOp::Mul => a.wrapping_mul(b),
            BinOp::Div => a.checked_div(b).unwrap_or(0),
            BinOp::Rem => a.checked_rem(b).unwrap_or(0),
            BinOp::And => a & b,
            BinOp::Or => a | b,
            BinOp::Xor => a ^ b,
            BinOp::Shl => {
                if b >= 64 {
                    0
                } else {
                    a << b
                }
            }
            BinOp::Shr => {
                if b >= 64 {
                    0
                } else {
                    a >> b
                }
            }
            BinOp::Eq => (a == b) as u64,
            BinOp::Ne => (a != b) as u64,
            BinOp::Lt => (a < b) as u64,
            BinOp::Le => (a <= b) as u64,
            BinOp::Gt => (a > b) as u64,
            BinOp::Ge => (a >= b) as u64,
        };
        r & m
    }
}

/// Fixed-width value domain `0 .. 2^bits`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Domain {
    pub bits: u32,
}

impl Default for Domain {
    fn default() -> Self {
        Domain { bits: 8 }
    }
}

impl Domain {
    pub fn new(bits: u32) -> Self {
        assert!((1..=16).contains(&bits), "domain width must be in 1..=16");
        Domain { bits }
    }

    pub fn mask(self) -> u64 {
        (1u64 << self.bits) - 1
    }

    pub fn size(self) -> u64 {
        1u64 << self.bits
    }

    pub fn values(self) -> impl Iterator<Item = u64> + Clone {
        0..self.size()
    }

    pub fn contains(self, v: u64) -> bool {
        v <= self.mask()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Expr {
    Reg(Reg),
    Const(u64),
    Unary(UnOp, Box<Expr>),
    Binary(BinOp, Box<Expr>, Box<Expr>),
    /// The secret address token. The parser resolves it to a constant.
    Secret,
}

impl Expr {
    pub fn bin(op: BinOp, a: Expr, b: Expr) -> Expr {
        Expr::Binary(op, Box::new(a), Box::new(b))
    }

    /// Evaluates the expression with register values from `regs`.
    pub fn eval(&self, regs: &dyn Fn(Reg) -> u64, secret: u64, dom: Domain) -> u64 {
        match self {
            Expr::Reg(r) => regs(*r) & dom.mask(),
            Expr::Const(c) => c & dom.mask(),
            Expr::Secret => secret & dom.mask(),
            Expr::Unary(op, e) => {
                let v = e.eval(regs, secret, dom);
                let r = match op {
                    UnOp::Neg => v.wrapping_neg(),
                    UnOp::Not => !v,
                    UnOp::LogicalNot => (v == 0) as u64,
                };
                r & dom.mask()
            }
            Expr::Binary(op, a, b) => {
                let x = a.eval(regs, secret, dom);
                let y = b.eval(regs, secret, dom);
                op.apply(x, y, dom)
            }
        }
    }

    /// Registers read by the expression.
    pub fn regs(&self) -> BTreeSet<Reg> {
        let mut out = BTreeSet::new();
        self.collect_regs(&mut out);
        out
    }

    fn collect_regs(&self, out: &mut BTreeSet<Reg>) {
        match self {
            Expr::Reg(r) => {
                out.insert(*r);
            }
            Expr::Const(_) | Expr::Secret => {}
            Expr::Unary(_, e) => e.collect_regs(out),
            Expr::Binary(_, a, b) => {
                a.collect_regs(out);
                b.collect_regs(out);
            }
        }
    }

    fn fmt_prec(&self, f: &mut fmt::Formatter<'_>, outer: u8) -> fmt::Result {
        match self {
            Expr::Reg(r) => write!(f, "r{r}"),
            Expr::Const(c) => write!(f, "{c}"),
            Expr::Secret => write!(f, "secret"),
            Expr::Unary(op, e) => {
                let s = match op {
                    UnOp::Neg => "-",
                    UnOp::Not => "~",
                    UnOp::LogicalNot => "!",
                };
                write!(f, "{s}")?;
                e.fmt_prec(f, 9)
            }
            Expr::Binary(op, a, b) => {
                let p = op.precedence();
                if p < outer {
                    write!(f, "(")?;
                }
                a.fmt_prec(f, p)?;
                write!(f, " {} ", op.symbol())?;
                b.fmt_prec(f, p + 1)?;
                if p < outer {
                    write!(f, ")")?;
                }
                Ok(())
            }
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.fmt_prec(f, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Stmt {
    Assign {
        dst: Reg,
        value: Expr,
    },
    /// `dst <- cond ? value`: takes effect only when `cond` is non-zero.
    CondAssign {
        dst: Reg,
        cond: Expr,
        value: Expr,
    },
    Load {
        dst: Reg,
        addr: Expr,
    },
    Store {
        addr: Expr,
        value: Expr,
    },
    Jmp {
        target: Label,
    },
    Beqz {
        reg: Reg,
        target: Label,
    },
    Skip,
    Fence,
}

impl Stmt {
    /// The register written or tested by the statement.
    pub fn reg(&self) -> Option<Reg> {
        match self {
            Stmt::Assign { dst, .. } | Stmt::CondAssign { dst, .. } | Stmt::Load { dst, .. } => {
                Some(*dst)
            }
            Stmt::Beqz { reg, .. } => Some(*reg),
            _ => None,
        }
    }

    /// The register defined by the statement, if any.
    pub fn def(&self) -> Option<Reg> {
        match self {
            Stmt::Assign { dst, .. } | Stmt::CondAssign { dst, .. } | Stmt::Load { dst, .. } => {
                Some(*dst)
            }
            _ => None,
        }
    }

    /// The address expression of a memory statement.
    pub fn expr(&self) -> Option<&Expr> {
        match self {
            Stmt::Load { addr, .. } | Stmt::Store { addr, .. } => Some(addr),
            _ => None,
        }
    }

    pub fn jump_target(&self) -> Option<Label> {
        match self {
            Stmt::Jmp { target } | Stmt::Beqz { target, .. } => Some(*target),
            _ => None,
        }
    }

    pub fn retarget(&self, target: Label) -> Stmt {
        match self {
            Stmt::Jmp { .. } => Stmt::Jmp { target },
            Stmt::Beqz { reg, .. } => Stmt::Beqz { reg: *reg, target },
            other => other.clone(),
        }
    }

    pub fn is_memory(&self) -> bool {
        matches!(self, Stmt::Load { .. } | Stmt::Store { .. })
    }
}

impl fmt::Display for Stmt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stmt::Assign { dst, value } => write!(f, "r{dst} <- {value}"),
            Stmt::CondAssign { dst, cond, value } => write!(f, "r{dst} <- {cond} ? {value}"),
            Stmt::Load { dst, addr } => write!(f, "load r{dst}, {addr}"),
            Stmt::Store { addr, value } => write!(f, "store {addr}, {value}"),
            Stmt::Jmp { target } => write!(f, "jmp {target}"),
            Stmt::Beqz { reg, target } => write!(f, "beqz r{reg}, {target}"),
            Stmt::Skip => write!(f, "skip"),
            Stmt::Fence => write!(f, "fence"),
        }
    }
}

/// Where an instruction of an unrolled program came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Origin {
    Source {
        label: Label,
        iteration: u32,
    },
    /// Jump inserted to preserve fall-through after relabeling.
    Glue,
    /// Reached only when a loop runs past the unrolling bound.
    UnwindLimit,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instruction {
    pub label: Label,
    pub stmt: Stmt,
    pub thread: ThreadId,
    pub origin: Origin,
    /// Source text as written, used for display.
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Thread {
    pub id: ThreadId,
    /// Label of the first instruction (or of the exit when empty).
    pub first: Label,
    pub instrs: Vec<Instruction>,
}

impl Thread {
    /// The label one past the last instruction; jumping there ends the thread.
    pub fn exit(&self) -> Label {
        self.first + self.instrs.len() as Label
    }

    pub fn get(&self, label: Label) -> Option<&Instruction> {
        let idx = label.checked_sub(self.first)? as usize;
        self.instrs.get(idx)
    }

    pub fn index_of(&self, label: Label) -> Option<usize> {
        let idx = label.checked_sub(self.first)? as usize;
        (idx < self.instrs.len()).then_some(idx)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Region {
    pub name: String,
    pub base: u64,
    pub extent: u64,
    /// Fixed initial value of every cell; ignored for input regions.
    pub init: u64,
    pub input: bool,
}

impl Region {
    pub fn contains(&self, addr: u64) -> bool {
        addr >= self.base && addr < self.base + self.extent
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Layout {
    pub regions: Vec<Region>,
}

impl Layout {
    pub fn region(&self, name: &str) -> Option<&Region> {
        self.regions.iter().find(|r| r.name == name)
    }

    pub fn addresses(&self) -> impl Iterator<Item = u64> + '_ {
        self.regions.iter().flat_map(|r| r.base..r.base + r.extent)
    }
}

/// Outcome requested by an `expect` trailer line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Safe,
    Unsafe,
    Unknown,
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Outcome::Safe => "SAFE",
            Outcome::Unsafe => "UNSAFE",
            Outcome::Unknown => "UNKNOWN",
        })
    }
}

/// One `expect` trailer line; unset parameters fall back to the runner defaults.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Expectation {
    pub outcome: Outcome,
    pub model: String,
    pub mode: Option<String>,
    pub k: Option<u32>,
    pub w: Option<u32>,
    pub buffer: Option<u32>,
    pub bits: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Program {
    pub threads: Vec<Thread>,
    pub layout: Layout,
    pub secret_addr: u64,
    pub inputs: BTreeSet<u64>,
    pub expectations: Vec<Expectation>,
}

impl Program {
    pub fn thread(&self, t: ThreadId) -> Result<&Thread, MasmError> {
        self.threads.get(t).ok_or(MasmError::UnknownThread(t))
    }

    pub fn instructions(&self) -> impl Iterator<Item = &Instruction> {
        self.threads.iter().flat_map(|t| t.instrs.iter())
    }

    /// Largest register index used, plus one.
    pub fn register_count(&self) -> usize {
        let mut n = 0;
        for i in self.instructions() {
            let mut regs: BTreeSet<Reg> = BTreeSet::new();
            if let Some(r) = i.stmt.reg() {
                regs.insert(r);
            }
            match &i.stmt {
                Stmt::Assign { value, .. } => regs.extend(value.regs()),
                Stmt::CondAssign { cond, value, .. } => {
                    regs.extend(cond.regs());
                    regs.extend(value.regs());
                }
                Stmt::Load { addr, .. } => regs.extend(addr.regs()),
                Stmt::Store { addr, value } => {
                    regs.extend(addr.regs());
                    regs.extend(value.regs());
                }
                _ => {}
            }
            if let Some(m) = regs.iter().next_back() {
                n = n.max(*m as usize + 1);
            }
        }
        n
    }

    /// Initial value of `addr` for non-input cells: the declared value, else 0.
    pub fn fixed_init(&self, addr: u64) -> u64 {
        self.layout
            .regions
            .iter()
            .find(|r| r.contains(addr))
            .map(|r| r.init)
            .unwrap_or(0)
    }

    /// Value held by the secret cell: the largest domain value that no
    /// fixed location starts with.
    pub fn secret_value(&self, dom: Domain) -> u64 {
        let used: BTreeSet<u64> = self
            .layout
            .regions
            .iter()
            .filter(|r| !r.input)
            .map(|r| r.init & dom.mask())
            .chain(std::iter::once(0))
            .collect();
        (0..=dom.mask())
            .rev()
            .find(|v| !used.contains(v))
            .unwrap_or(dom.mask())
    }

    pub fn has_loops(&self) -> bool {
        self.instructions()
            .any(|i| matches!(i.stmt.jump_target(), Some(t) if t <= i.label))
    }
}

/// Static predecessors of `label` within thread `t`.
pub fn pred(p: &Program, t: ThreadId, label: Label) -> Result<BTreeSet<Label>, MasmError> {
    let th = p.thread(t)?;
    if th.get(label).is_none() {
        return Err(MasmError::UnknownLabel { thread: t, label });
    }
    Ok(pred_in(th, label))
}

pub(crate) fn pred_in(th: &Thread, label: Label) -> BTreeSet<Label> {
    let mut out = BTreeSet::new();
    for i in &th.instrs {
        let falls = i.label + 1 == label && !matches!(i.stmt, Stmt::Jmp { .. });
        let jumps = i.stmt.jump_target() == Some(label);
        if falls || jumps {
            out.insert(i.label);
        }
    }
    out
}

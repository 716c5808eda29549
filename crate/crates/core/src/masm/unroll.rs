use std::collections::{BTreeMap, BTreeSet, VecDeque};

use super::{Instruction, Label, Origin, Program, Stmt, Thread};

/// Result of bounded unrolling.
#[derive(Debug, Clone)]
pub struct Unrolled {
    pub program: Program,
    /// Some loop had more iterations than the bound allows.
    pub incomplete: bool,
}

/// Node of the unrolled control-flow graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Node {
    /// Instruction index and 1-based iteration.
    Body(u32, usize),
    Limit,
    Exit,
}

/// Removes backward jumps by copying each thread's body `k` times.
///
/// A backward edge taken in copy `i < k` enters copy `i + 1`; in copy `k`
/// it reaches a marker instruction with origin [`Origin::UnwindLimit`].
pub fn unroll(p: &Program, k: u32) -> Unrolled {
    assert!(k >= 1, "unroll bound must be at least 1");
    let mut out = p.clone();
    let mut incomplete = false;
    for th in out.threads.iter_mut() {
        let has_back = th
            .instrs
            .iter()
            .any(|i| matches!(i.stmt.jump_target(), Some(t) if t <= i.label));
        if !has_back {
            continue;
        }
        let (new, cut) = unroll_thread(th, k);
        *th = new;
        incomplete |= cut;
    }
    Unrolled {
        program: out,
        incomplete,
    }
}

fn unroll_thread(th: &Thread, k: u32) -> (Thread, bool) {
    let n = th.instrs.len();
    let exit = th.exit();
    let to_node = |label: Label, iter: u32| -> Node {
        if label == exit {
            Node::Exit
        } else {
            Node::Body(iter, (label - th.first) as usize)
        }
    };
    let fall = |node: Node| -> Option<Node> {
        match node {
            Node::Body(it, idx) => match th.instrs[idx].stmt {
                Stmt::Jmp { .. } => None,
                _ if idx + 1 == n => Some(Node::Exit),
                _ => Some(Node::Body(it, idx + 1)),
            },
            Node::Limit => Some(Node::Exit),
            Node::Exit => None,
        }
    };
    let jump = |node: Node| -> Option<Node> {
        let Node::Body(it, idx) = node else {
            return None;
        };
        let ins = &th.instrs[idx];
        let t = ins.stmt.jump_target()?;
        Some(if t <= ins.label {
            if it < k {
                to_node(t, it + 1)
            } else {
                Node::Limit
            }
        } else {
            to_node(t, it)
        })
    };
    let succs = |node: Node| -> Vec<Node> { fall(node).into_iter().chain(jump(node)).collect() };

    // Copy 1 is kept whole so loop-free prefixes survive unchanged; later
    // copies only where reachable.
    let mut reach: BTreeSet<Node> = BTreeSet::new();
    let mut queue: VecDeque<Node> = VecDeque::new();
    if n > 0 {
        queue.push_back(Node::Body(1, 0));
    }
    for idx in 0..n {
        reach.insert(Node::Body(1, idx));
        queue.push_back(Node::Body(1, idx));
    }
    while let Some(nd) = queue.pop_front() {
        for s in succs(nd) {
            if s != Node::Exit && reach.insert(s) {
                queue.push_back(s);
            }
        }
    }
    let cut = reach.contains(&Node::Limit);
    let order: Vec<Node> = reach.into_iter().collect();

    // Lay out nodes, inserting a jump wherever the fall-through successor is
    // not the next node.
    enum Item {
        Node(Node),
        Glue(Node),
    }
    let mut items = Vec::new();
    for (i, nd) in order.iter().enumerate() {
        items.push(Item::Node(*nd));
        if let Some(f) = fall(*nd) {
            let next = order.get(i + 1).copied().unwrap_or(Node::Exit);
            if next != f {
                items.push(Item::Glue(f));
            }
        }
    }
    let mut label_of: BTreeMap<Node, Label> = BTreeMap::new();
    for (pos, it) in items.iter().enumerate() {
        if let Item::Node(nd) = it {
            label_of.insert(*nd, th.first + pos as Label);
        }
    }
    label_of.insert(Node::Exit, th.first + items.len() as Label);

    let mut instrs = Vec::new();
    for (pos, it) in items.iter().enumerate() {
        let label = th.first + pos as Label;
        let ins = match it {
            Item::Glue(target) => Instruction {
                label,
                stmt: Stmt::Jmp {
                    target: label_of[target],
                },
                thread: th.id,
                origin: Origin::Glue,
                text: format!("jmp {}", label_of[target]),
            },
            Item::Node(Node::Limit) => Instruction {
                label,
                stmt: Stmt::Skip,
                thread: th.id,
                origin: Origin::UnwindLimit,
                text: "skip # unwind limit".into(),
            },
            Item::Node(nd @ Node::Body(it, idx)) => {
                let src = &th.instrs[*idx];
                let stmt = match jump(*nd) {
                    Some(t) => src.stmt.retarget(label_of[&t]),
                    None => src.stmt.clone(),
                };
                let orig_label = match src.origin {
                    Origin::Source { label, .. } => label,
                    _ => src.label,
                };
                Instruction {
                    label,
                    stmt,
                    thread: th.id,
                    origin: Origin::Source {
                        label: orig_label,
                        iteration: *it,
                    },
                    text: src.text.clone(),
                }
            }
            Item::Node(Node::Exit) => unreachable!("exit is never laid out"),
        };
        instrs.push(ins);
    }
    (
        Thread {
            id: th.id,
            first: th.first,
            instrs,
        },
        cut,
    )
}

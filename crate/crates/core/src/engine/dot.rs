use std::fmt::Write;

use crate::events::{CandidateExecution, EventKind};
use crate::masm::Program;

fn esc(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

/// Renders an execution as a DOT graph. Transient events are dashed and
/// red; po and co are drawn as their immediate pairs.
pub fn emit_witness_dot(p: &Program, x: &CandidateExecution) -> String {
    let mut out = String::new();
    let name = |i: usize| esc(&x.name(i));
    writeln!(out, "digraph witness {{").unwrap();
    writeln!(out, "  rankdir=TB;").unwrap();
    writeln!(out, "  node [shape=box, fontname=\"monospace\"];").unwrap();

    let inits: Vec<usize> = x
        .events
        .iter()
        .filter(|e| e.kind.is_init())
        .map(|e| e.id)
        .collect();
    if !inits.is_empty() {
        writeln!(out, "  subgraph cluster_init {{").unwrap();
        writeln!(out, "    label=\"init\";").unwrap();
        writeln!(out, "    style=dotted;").unwrap();
        for i in &inits {
            let e = &x.events[*i];
            writeln!(
                out,
                "    \"{}\" [label=\"{}: [{}] = {}\"];",
                name(*i),
                name(*i),
                e.addr.unwrap_or(0),
                e.val.unwrap_or(0)
            )
            .unwrap();
        }
        writeln!(out, "  }}").unwrap();
    }

    for th in &p.threads {
        let evs: Vec<usize> = x
            .events
            .iter()
            .filter(|e| e.thread() == Some(th.id))
            .map(|e| e.id)
            .collect();
        writeln!(out, "  subgraph cluster_t{} {{", th.id).unwrap();
        writeln!(out, "    label=\"thread {}\";", th.id).unwrap();
        for i in &evs {
            let e = &x.events[*i];
            let ins = th.get(e.label().unwrap()).unwrap();
            let mut label = format!("{}: {}", x.name(*i), ins.text);
            match (e.kind, e.addr, e.val) {
                (EventKind::Load | EventKind::Store, Some(a), Some(v)) => {
                    write!(label, "\\n[{a}] = {v}").unwrap()
                }
                (EventKind::CondJump, _, Some(v)) => {
                    write!(label, "\\nval = {v}, cp = {}", e.cp.unwrap_or(true)).unwrap()
                }
                _ => {}
            }
            let style = if e.transient {
                ", style=dashed, color=red, fontcolor=red"
            } else {
                ""
            };
            writeln!(
                out,
                "    \"{}\" [label=\"{}\"{}];",
                name(*i),
                esc(&label).replace("\\\\n", "\\n"),
                style
            )
            .unwrap();
        }
        writeln!(out, "  }}").unwrap();
    }

    let n = x.len();
    let immediate = |r: &crate::events::Relation, a: usize, b: usize| {
        r.contains(a, b) && !(0..n).any(|c| r.contains(a, c) && r.contains(c, b))
    };
    let mut edge = |a: usize, b: usize, label: &str, attrs: &str| {
        writeln!(
            out,
            "  \"{}\" -> \"{}\" [label=\"{}\"{}];",
            name(a),
            name(b),
            label,
            attrs
        )
        .unwrap();
    };
    for (a, b) in x.po.pairs() {
        if immediate(&x.po, a, b) {
            edge(a, b, "po", "");
        }
    }
    let mem = |i: usize| x.events[i].kind.is_memory();
    for (a, b) in x.fence.pairs() {
        if mem(a) && mem(b) && !(0..n).any(|c| mem(c) && x.po.contains(a, c) && x.po.contains(c, b))
        {
            edge(a, b, "fence", ", style=dotted");
        }
    }
    for (a, b) in x.rf.pairs() {
        let ext = x.events[a].thread().is_some() && x.events[a].thread() != x.events[b].thread();
        edge(
            a,
            b,
            if ext { "rfe" } else { "rf" },
            ", style=dashed, color=blue",
        );
    }
    if let Some(srf) = &x.srf {
        for (a, b) in srf.pairs() {
            if !x.rf.contains(a, b) {
                edge(a, b, "srf", ", style=dashed, color=purple");
            }
        }
    }
    for (a, b) in x.co.pairs() {
        if immediate(&x.co, a, b) {
            edge(a, b, "co", ", color=darkgreen");
        }
    }
    writeln!(out, "}}").unwrap();
    out
}

mod support;

use axcat::catlang::parse_cat;
use axcat::engine::{
    check_isolation, check_isolation_with, count_skeletons, emit_smt, emit_witness_dot,
    enumerate_candidates, replay_witness, EngineError, EngineOptions,
};
use axcat::events::{base_relations, EventKind};
use axcat::masm::{parse_program, Outcome};
use axcat::speculation::SpecConfig;
use rand::rngs::StdRng;
use rand::SeedableRng;

use support::gen::random_program;
use support::smt::check_structure;
use support::{config_for, corpus_program, model};

#[test]
fn fig2_verdicts_and_witness() {
    let p = corpus_program("fig2");
    let m = model("inorder");
    assert_eq!(
        check_isolation(&p, &m, &SpecConfig::traditional(), 2, 3)
            .unwrap()
            .outcome,
        Outcome::Safe
    );
    let v = check_isolation(&p, &m, &SpecConfig::speculative(5), 2, 3).unwrap();
    assert_eq!(v.outcome, Outcome::Unsafe);
    let x = v.witness.as_ref().unwrap();
    let es = x.secret_init().unwrap();
    let e4 = x.event_at(0, 4).unwrap();
    assert!(x.rf.contains(es, e4.id));
    assert!(e4.transient);
    assert_eq!(x.secret_reads(), vec![e4.id]);
    assert!(replay_witness(
        &v.program,
        &m,
        &SpecConfig::speculative(5),
        3,
        x
    ));
    assert!(!replay_witness(
        &v.program,
        &m,
        &SpecConfig::speculative(4),
        3,
        x
    ));
    assert!(!replay_witness(
        &v.program,
        &m,
        &SpecConfig::traditional(),
        3,
        x
    ));
    let fenced = corpus_program("fig2.fence");
    assert_eq!(
        check_isolation(&fenced, &m, &SpecConfig::speculative(8), 2, 3)
            .unwrap()
            .outcome,
        Outcome::Safe
    );
}

#[test]
fn gadget_programs() {
    let spec = SpecConfig::speculative(8);
    let cases = [
        ("stl-mask", "inorder", Outcome::Safe),
        ("stl-mask", "stl", Outcome::Unsafe),
        ("stl-mask.fence", "stl", Outcome::Safe),
        ("stl-reg", "stl", Outcome::Safe),
        ("psf", "psf", Outcome::Unsafe),
        ("psf.fence", "psf", Outcome::Safe),
        ("pht-cmov", "inorder", Outcome::Safe),
        ("pht-mask", "inorder", Outcome::Safe),
    ];
    for (name, mname, want) in cases {
        let m = model(mname);
        let v = check_isolation(&corpus_program(name), &m, &config_for(&m, spec), 2, 3).unwrap();
        assert_eq!(v.outcome, want, "{name} under {mname}");
        assert_eq!(v.witness.is_some(), want == Outcome::Unsafe);
    }
}

#[test]
fn machine_clear_witness_reads_across_threads() {
    let p = corpus_program("mp");
    let cfg = SpecConfig::traditional();
    assert_eq!(
        check_isolation(&p, &model("tso"), &cfg, 2, 3)
            .unwrap()
            .outcome,
        Outcome::Safe
    );
    let v = check_isolation(&p, &model("tso-mcu"), &cfg, 2, 3).unwrap();
    let x = v.witness.unwrap();
    let rfe: Vec<(usize, usize)> = base_relations(&x).rfe.pairs().collect();
    assert!(!rfe.is_empty());
    for (w, r) in rfe {
        assert_eq!(x.events[w].kind, EventKind::Store);
        assert_eq!(x.events[r].kind, EventKind::Load);
        assert_eq!(x.events[w].thread(), Some(1));
        assert_eq!(x.events[r].thread(), Some(0));
        let dot = emit_witness_dot(&v.program, &x);
        assert!(dot.contains(&format!(
            "\"{}\" -> \"{}\" [label=\"rfe\"",
            x.name(w),
            x.name(r)
        )));
    }
}

#[test]
fn unknown_when_loop_is_cut() {
    let p = corpus_program("pht-loop");
    let m = model("inorder");
    for k in 1..=3 {
        let v = check_isolation(&p, &m, &SpecConfig::traditional(), k, 3).unwrap();
        assert_eq!(v.outcome, Outcome::Unknown, "k={k}");
        assert!(v.incomplete);
        assert!(v.witness.is_none());
    }
    assert_eq!(
        check_isolation(&p, &m, &SpecConfig::traditional(), 4, 3)
            .unwrap()
            .outcome,
        Outcome::Unsafe
    );
}

#[test]
fn complete_unrolling_is_never_unknown() {
    let p = parse_program("layout A[2]@0 secret@3\n1: r0 <- 2\n2: beqz r0, 5\n3: r0 <- r0 - 1\n4: jmp 2\n5: load r1, A + r0\n")
        .unwrap();
    let v = check_isolation(&p, &model("inorder"), &SpecConfig::traditional(), 3, 2).unwrap();
    assert_eq!(v.outcome, Outcome::Safe);
}

#[test]
fn candidate_counts() {
    // One load of an input cell: the initial write is the only source.
    let p = parse_program("layout x@0 secret@1 input x\n1: load r0, x\n").unwrap();
    let xs = enumerate_candidates(&p, &SpecConfig::traditional(), 1, 1).unwrap();
    assert_eq!(xs.len(), 2);
    assert_ne!(xs[0].init_values[&0], xs[1].init_values[&0]);
    // A store before the load adds a source.
    let p = parse_program("layout x@0 secret@1 input x\n1: store x, 1\n2: load r0, x\n").unwrap();
    assert_eq!(
        enumerate_candidates(&p, &SpecConfig::traditional(), 1, 1)
            .unwrap()
            .len(),
        2 * 2
    );
    let again = enumerate_candidates(&p, &SpecConfig::traditional(), 1, 1).unwrap();
    assert_eq!(
        again,
        enumerate_candidates(&p, &SpecConfig::traditional(), 1, 1).unwrap()
    );
}

#[test]
fn skeleton_counts() {
    let p = corpus_program("fig2");
    assert_eq!(
        count_skeletons(&p, &SpecConfig::traditional(), 1, false).unwrap(),
        2
    );
    assert_eq!(
        count_skeletons(&p, &SpecConfig::speculative(8), 1, false).unwrap(),
        4
    );
    // A window of one admits no transient event at all.
    assert!(count_skeletons(&p, &SpecConfig::speculative(1), 1, true).unwrap() < 4);
    let two =
        parse_program("layout x@0 secret@1\n1: beqz r0, 3\n2: beqz r1, 3\n3: skip\n").unwrap();
    assert_eq!(
        count_skeletons(&two, &SpecConfig::traditional(), 1, false).unwrap(),
        3
    );
}

#[test]
fn errors() {
    let p = corpus_program("fig2");
    let m = model("inorder");
    let cfg = SpecConfig::speculative(5);
    assert!(matches!(
        check_isolation(&p, &m, &cfg, 0, 3),
        Err(EngineError::BadBound)
    ));
    assert!(matches!(
        check_isolation(&p, &m, &cfg, 2, 0),
        Err(EngineError::BadDomain(0))
    ));
    assert!(matches!(
        check_isolation(&p, &m, &cfg, 2, 2),
        Err(EngineError::DomainTooSmall { .. })
    ));
    assert!(matches!(
        check_isolation(&p, &m, &SpecConfig::speculative(0), 2, 3),
        Err(EngineError::BadWindow)
    ));
    let psf = model("psf");
    assert!(matches!(
        check_isolation(&p, &psf, &cfg, 2, 3),
        Err(EngineError::Eval(_))
    ));
    assert!(matches!(
        emit_smt(&p, &m, &cfg, 2, 9),
        Err(EngineError::SmtDomain(9))
    ));
    assert!(matches!(
        emit_smt(&p, &psf, &cfg, 2, 3),
        Err(EngineError::Eval(_))
    ));
}

#[test]
fn deterministic_across_worker_counts() {
    let p = corpus_program("stl-buffer1");
    let m = model("stl");
    let cfg = SpecConfig::speculative(8);
    let run = |jobs| {
        check_isolation_with(
            &p,
            &m,
            &cfg,
            2,
            3,
            EngineOptions {
                prune: true,
                jobs: Some(jobs),
            },
        )
        .unwrap()
    };
    let a = run(1);
    let b = run(3);
    assert_eq!(a.outcome, Outcome::Unsafe);
    assert_eq!(a.witness, b.witness);
    let prog = &a.program;
    assert_eq!(
        emit_witness_dot(prog, a.witness.as_ref().unwrap()),
        emit_witness_dot(prog, b.witness.as_ref().unwrap())
    );
}

#[test]
fn inorder_violations_persist_under_stl() {
    let mut rng = StdRng::seed_from_u64(0x5eed_0004);
    let (io, stl) = (model("inorder"), model("stl"));
    let mut checked = 0;
    for _ in 0..80 {
        let p = parse_program(&random_program(&mut rng)).unwrap();
        let cfg = SpecConfig::speculative(4);
        if check_isolation(&p, &io, &cfg, 1, 2).unwrap().outcome == Outcome::Unsafe {
            assert_eq!(
                check_isolation(&p, &stl, &cfg, 1, 2).unwrap().outcome,
                Outcome::Unsafe
            );
            checked += 1;
        }
    }
    assert!(checked > 0);
}

#[test]
fn witness_dot() {
    let p = corpus_program("fig2");
    let v = check_isolation(&p, &model("inorder"), &SpecConfig::speculative(5), 2, 3).unwrap();
    let x = v.witness.unwrap();
    let dot = emit_witness_dot(&v.program, &x);
    assert!(dot.starts_with("digraph witness {"));
    assert!(dot.trim_end().ends_with('}'));
    assert!(dot.contains("\"e_s\" -> \"e4\" [label=\"rf\""));
    assert!(dot.contains("\"e4\" [label=\"e4: load r3, A + r1\\n[7] = "));
    assert!(dot.contains("style=dashed, color=red"));
    assert!(dot.contains("\"e1\" -> \"e2\" [label=\"po\"]"));
    // Only immediate po pairs are drawn.
    assert!(!dot.contains("\"e1\" -> \"e3\" [label=\"po\"]"));
    assert_eq!(dot, emit_witness_dot(&v.program, &x));

    let q = parse_program("layout x@0 secret@1\n1: r0 <- 1\n2: r1 <- r0 + 1\n3: skip\n").unwrap();
    let xs = enumerate_candidates(&q, &SpecConfig::traditional(), 1, 1).unwrap();
    let dot = emit_witness_dot(&q, &xs[0]);
    let edges: Vec<&str> = dot.lines().filter(|l| l.contains("->")).collect();
    assert_eq!(edges.len(), 2);
    assert!(edges.iter().all(|l| l.contains("label=\"po\"")));
}

#[test]
fn smt_queries() {
    let p = corpus_program("fig2");
    let m = model("inorder");
    for cfg in [SpecConfig::traditional(), SpecConfig::speculative(5)] {
        let a = emit_smt(&p, &m, &cfg, 2, 3).unwrap();
        assert_eq!(a, emit_smt(&p, &m, &cfg, 2, 3).unwrap());
        check_structure(&a).unwrap_or_else(|e| panic!("{e}\n{a}"));
        assert!(a.contains("(set-logic QF_BV)"));
    }
    let stl = model("stl");
    let q = emit_smt(
        &corpus_program("stl-buffer2"),
        &stl,
        &SpecConfig::speculative(8),
        2,
        3,
    )
    .unwrap();
    check_structure(&q).unwrap();
    // Different parameters give different queries.
    let w4 = emit_smt(&p, &m, &SpecConfig::speculative(4), 2, 3).unwrap();
    let w5 = emit_smt(&p, &m, &SpecConfig::speculative(5), 2, 3).unwrap();
    assert_ne!(w4, w5);
    // Without loads the goal is false.
    let empty = parse_program("layout x@0 secret@1\n1: skip\n").unwrap();
    let q = emit_smt(&empty, &m, &SpecConfig::default(), 1, 1).unwrap();
    check_structure(&q).unwrap();
    assert!(q.contains("(assert false)\n(check-sat)\n(exit)"));
}

#[test]
fn recursive_models_export() {
    let m = parse_cat(
        "hb = po | rf | hb;hb\nacyclic hb\nfr = (rf^-1;co) \\ hb\nirreflexive fr;hb\nempty fr & po",
    )
    .unwrap();
    let p = corpus_program("stl-mask");
    let q = emit_smt(&p, &m, &SpecConfig::speculative(8), 2, 3).unwrap();
    check_structure(&q).unwrap_or_else(|e| panic!("{e}"));
    let v = check_isolation(&p, &m, &SpecConfig::speculative(8), 2, 3).unwrap();
    assert_eq!(v.outcome, Outcome::Safe);
}

//! Random small MDPs: every satisfiable synthesis result is a safe permissive
//! scheduler honouring the exclusions, and every unsatisfiable one is
//! confirmed by trying all assignments.

use proptest::prelude::*;
use safesynth_core::analysis::is_safe_permissive;
use std::io::Write as _;
use std::process::{Command, Stdio};

use safesynth_core::synthesis::{
    build_encoding, emit_smtlib, exhaustive_assignments, parse_model, parse_sexpr,
    solver_available, synthesize_safe_permissive, y_name, Exclusions, SExpr, SolverConfig,
    SynthesisStatus,
};
use safesynth_core::{
    DetPermissiveScheduler, DetScheduler, Distribution, Mdp, MdpBuilder, Rational, SafetySpec,
    StateId,
};

#[derive(Debug, Clone)]
struct Raw {
    states: usize,
    /// Per state, per action: (successor, weight) pairs.
    actions: Vec<Vec<Vec<(usize, u32)>>>,
    bad: Vec<bool>,
    lambda: (i128, i128),
    excluded: Vec<Vec<usize>>,
    excluded_sets: Vec<Vec<u8>>,
}

fn raw() -> impl Strategy<Value = Raw> {
    (1usize..=6).prop_flat_map(|n| {
        let action = prop::collection::vec((0..n, 1u32..=9), 1..=3);
        let state = prop::collection::vec(action, 1..=3);
        (
            prop::collection::vec(state, n),
            prop::collection::vec(any::<bool>(), n),
            (1i128..=12).prop_flat_map(|d| (0..=d, Just(d))),
            prop::collection::vec(prop::collection::vec(0usize..3, n), 0..=2),
            prop::collection::vec(prop::collection::vec(1u8..8, n), 0..=1),
        )
            .prop_map(move |(actions, bad, lambda, excluded, excluded_sets)| Raw {
                states: n,
                actions,
                bad,
                lambda,
                excluded,
                excluded_sets,
            })
    })
}

fn build(raw: &Raw) -> (Mdp, SafetySpec, Exclusions) {
    let mut b = MdpBuilder::new(raw.states, StateId(0));
    for (s, acts) in raw.actions.iter().enumerate() {
        for (i, succ) in acts.iter().enumerate() {
            let total: u32 = succ.iter().map(|(_, w)| w).sum();
            let entries = succ
                .iter()
                .map(|&(t, w)| (StateId(t), Rational::new(w as i128, total as i128)));
            b.add_action(
                StateId(s),
                format!("a{i}"),
                Distribution::normalized(entries),
            );
        }
    }
    let model = b.build().expect("generated model is well-formed");
    // an empty bad set is not a valid specification
    let any_bad = raw.bad.iter().any(|b| *b);
    let bad = (0..raw.states)
        .filter(|s| raw.bad[*s] || (!any_bad && *s + 1 == raw.states))
        .map(StateId);
    let spec = SafetySpec::new(Rational::new(raw.lambda.0, raw.lambda.1), bad).unwrap();
    let schedulers = raw
        .excluded
        .iter()
        .map(|pick| {
            DetScheduler::new(
                model
                    .states()
                    .map(|s| {
                        let en = model.enabled(s);
                        en[pick[s.0] % en.len()]
                    })
                    .collect(),
            )
        })
        .collect();
    let assignments = raw
        .excluded_sets
        .iter()
        .map(|masks| {
            DetPermissiveScheduler::new(
                model
                    .states()
                    .map(|s| {
                        let en = model.enabled(s);
                        let mask = (masks[s.0] as usize) % ((1 << en.len()) - 1) + 1;
                        en.iter()
                            .enumerate()
                            .filter(|(i, _)| mask >> i & 1 == 1)
                            .map(|(_, a)| *a)
                            .collect()
                    })
                    .collect(),
            )
        })
        .collect();
    (
        model,
        spec,
        Exclusions {
            schedulers,
            assignments,
        },
    )
}

fn check(raw: &Raw, cfg: &SolverConfig) -> Result<(), TestCaseError> {
    let (model, spec, ex) = build(raw);
    let out = synthesize_safe_permissive(&model, &spec, &ex, cfg).unwrap();
    match out.status {
        SynthesisStatus::Sat => {
            let perm = out.scheduler.expect("sat carries a scheduler");
            prop_assert!(is_safe_permissive(&model, &perm, &spec).unwrap());
            prop_assert!(ex.admits(&perm));
        }
        SynthesisStatus::Unsat => {
            let all = exhaustive_assignments(&model, &spec, &ex, u128::MAX).unwrap();
            prop_assert!(
                all.is_empty(),
                "unsat but {} assignments satisfy",
                all.len()
            );
        }
        SynthesisStatus::Unknown(why) => prop_assert!(false, "solver gave up: {why}"),
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 500, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn enumerative_outcomes_are_sound_and_complete(raw in raw()) {
        check(&raw, &SolverConfig::enumerative())?;
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 500, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn external_outcomes_are_sound_and_complete(raw in raw()) {
        if solver_available(&SolverConfig::default()) {
            check(&raw, &SolverConfig::default())?;
        }
    }
}

/// Sends the whole encoding to the solver in one go, with no hints.
fn raw_encoding_check(raw: &Raw) -> Result<(), TestCaseError> {
    let (model, spec, ex) = build(raw);
    let enc = build_encoding(&model, &spec, &ex).unwrap();
    let mut child = Command::new("z3")
        .args(["-in", "-smt2"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    child
        .stdin
        .take()
        .unwrap()
        .write_all(emit_smtlib(&enc).as_bytes())
        .unwrap();
    let out = String::from_utf8(child.wait_with_output().unwrap().stdout).unwrap();
    let (verdict, rest) = out.split_once('\n').unwrap_or((out.as_str(), ""));
    let all = exhaustive_assignments(&model, &spec, &ex, u128::MAX).unwrap();
    match verdict.trim() {
        "unsat" => prop_assert!(all.is_empty()),
        "sat" => {
            let values = parse_sexpr(rest).as_ref().and_then(parse_model).unwrap();
            let mut allowed: Vec<Vec<_>> = enc
                .fixed
                .iter()
                .map(|f| f.iter().copied().collect())
                .collect();
            for (st, a) in &enc.choice_vars {
                let v = values
                    .iter()
                    .find(|(n, _)| *n == y_name(*st, *a))
                    .map(|(_, v)| v.clone());
                if v == Some(SExpr::Atom("true".into())) {
                    allowed[st.0].push(*a);
                }
            }
            let perm = DetPermissiveScheduler::new(allowed);
            prop_assert!(
                all.contains(&perm),
                "solver model is not a satisfying assignment"
            );
        }
        other => prop_assert!(false, "unexpected solver answer {other:?}"),
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 500, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn plain_encoding_agrees_with_exhaustive_search(raw in raw()) {
        if solver_available(&SolverConfig::default()) {
            raw_encoding_check(&raw)?;
        }
    }
}

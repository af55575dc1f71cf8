//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits non-zero if any fails.

mod common;

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use safesynth_core::analysis::{
    enumerate_safe_schedulers, expected_cost_mc, is_safe_permissive, min_expected_cost,
    minimal_conflict_sets, reach_prob_mc, scheduler_reach_prob,
};
use safesynth_core::benchmarks::{
    com_exp, communicates, conflict_family, fig1, fig1_with_costs, fol_line, janitor,
    ProblemInstance,
};
use safesynth_core::learning::{
    evaluate_exactly, learn, safety_violations, CostLedger, Environment, LearnConfig,
};
use safesynth_core::model::{induce_mc_det, restrict};
use safesynth_core::synth_loop::{
    naive_baseline, run, LoopConfig, StopPolicy, SynthesisReport, Termination,
};
use safesynth_core::synthesis::{
    exhaustive_assignments, solver_available, synthesize_safe_permissive, Exclusions, SolverConfig,
    SynthesisStatus,
};
use safesynth_core::{DetPermissiveScheduler, DetScheduler, Mdp, Rational, StateId};

type Outcome = Result<String, String>;
type Check = fn() -> Outcome;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)+));
        }
    };
}

fn sched(model: &Mdp, picks: &[(usize, &str)]) -> DetScheduler {
    DetScheduler::from_labels(model, picks).unwrap()
}

fn backends() -> Vec<(&'static str, SolverConfig)> {
    let mut out = vec![("enumerative", SolverConfig::enumerative())];
    if solver_available(&SolverConfig::default()) {
        out.push(("z3", SolverConfig::default()));
    }
    out
}

fn allows_both(model: &Mdp, perm: &DetPermissiveScheduler) -> bool {
    perm.allows(StateId(0), model.find_action(StateId(0), "a").unwrap())
        && perm.allows(StateId(1), model.find_action(StateId(1), "c").unwrap())
}

fn small_example() -> Outcome {
    let start = Instant::now();
    let inst = fig1(Rational::new(3, 2));
    let m = &inst.model;
    let bad: BTreeSet<StateId> = [StateId(2)].into();
    let s1 = sched(m, &[(0, "a"), (1, "c")]);
    let p = reach_prob_mc(&induce_mc_det(m, &s1).unwrap(), &bad)
        .unwrap()
        .at(m.initial());
    ensure!((p - 0.36).abs() < 1e-12, "reach probability {p}");
    let safe: BTreeSet<_> = enumerate_safe_schedulers(m, &inst.safety)
        .unwrap()
        .into_iter()
        .collect();
    let loops = [(2, "loop"), (3, "loop"), (4, "loop")];
    let expected: BTreeSet<_> = [("a", "d"), ("b", "c"), ("b", "d")]
        .iter()
        .map(|(x, y)| {
            let mut picks = vec![(0, *x), (1, *y)];
            picks.extend(loops);
            sched(m, &picks)
        })
        .collect();
    ensure!(safe == expected, "safe schedulers {safe:?}");
    let mut found = 0;
    for (name, cfg) in backends() {
        // the two maximal answers: ask again with the first one excluded
        let mut ex = Exclusions::default();
        loop {
            let out = synthesize_safe_permissive(m, &inst.safety, &ex, &cfg).unwrap();
            let Some(perm) = out.scheduler else { break };
            ensure!(!allows_both(m, &perm), "{name} allowed a with c: {perm:?}");
            ensure!(
                is_safe_permissive(m, &perm, &inst.safety).unwrap(),
                "{name} returned an unsafe scheduler"
            );
            found += 1;
            ex.assignments.push(perm);
        }
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(1), "took {elapsed:?}");
    Ok(format!(
        "p=0.36, 3 safe schedulers, {found} permissive answers, {elapsed:.2?}"
    ))
}

fn conflicts() -> Outcome {
    let mut parts = Vec::new();
    for (n, expected) in [(4, 6), (6, 20)] {
        let inst = conflict_family(n).unwrap();
        let start = Instant::now();
        let sets = minimal_conflict_sets(&inst.model, &inst.safety).unwrap();
        let elapsed = start.elapsed();
        ensure!(
            sets.len() == expected,
            "n={n}: {} conflict sets",
            sets.len()
        );
        ensure!(
            sets.len() >= 1 << (n / 2),
            "n={n}: below the exponential floor"
        );
        ensure!(elapsed < Duration::from_secs(10), "n={n}: took {elapsed:?}");
        parts.push(format!("n={n}: {} in {elapsed:.2?}", sets.len()));
    }
    Ok(parts.join(", "))
}

fn random_synthesis() -> Outcome {
    let backends = backends();
    let (mut sat, mut unsat) = (0, 0);
    for seed in 0..500 {
        let (model, spec, ex) = common::random_synthesis_problem(seed);
        let all = exhaustive_assignments(&model, &spec, &ex, u128::MAX).unwrap();
        for (name, cfg) in &backends {
            let out = synthesize_safe_permissive(&model, &spec, &ex, cfg).unwrap();
            match out.status {
                SynthesisStatus::Sat => {
                    let perm = out.scheduler.unwrap();
                    ensure!(
                        is_safe_permissive(&model, &perm, &spec).unwrap(),
                        "seed {seed} {name}: unsafe answer"
                    );
                    ensure!(ex.admits(&perm), "seed {seed} {name}: excluded answer");
                    sat += 1;
                }
                SynthesisStatus::Unsat => {
                    ensure!(
                        all.is_empty(),
                        "seed {seed} {name}: unsat but {} assignments work",
                        all.len()
                    );
                    unsat += 1;
                }
                SynthesisStatus::Unknown(why) => return Err(format!("seed {seed} {name}: {why}")),
            }
        }
    }
    Ok(format!(
        "500 models, {sat} sat / {unsat} unsat answers checked"
    ))
}

fn loop_vs_baseline() -> Outcome {
    let cfg = LoopConfig {
        solver: SolverConfig::enumerative(),
        learn: LearnConfig {
            episodes: 400,
            ..LearnConfig::default()
        },
        max_iterations: 1000,
        stop: StopPolicy::ToOptimal,
        ..LoopConfig::default()
    };
    let mut checked = 0;
    for seed in 0..120 {
        let inst = common::random_instance(seed);
        let base =
            naive_baseline(&inst.model, &inst.costs, &inst.safety, &inst.performance).unwrap();
        let rep = run(
            &inst.model,
            &inst.costs,
            &inst.safety,
            &inst.performance,
            &cfg,
        )
        .unwrap();
        let (Some(_), Some(best)) = (&base.best, &rep.best) else {
            ensure!(
                base.best.is_none() && rep.best.is_none(),
                "seed {seed}: only one side found a scheduler"
            );
            continue;
        };
        let mc = induce_mc_det(&inst.model, best).unwrap();
        let value = expected_cost_mc(
            &mc,
            inst.costs.true_costs().unwrap(),
            &inst.performance.goal,
        )
        .unwrap()
        .at(inst.model.initial());
        let same = (value.is_infinite() && base.best_cost.is_infinite())
            || (value - base.best_cost).abs() <= 1e-6;
        ensure!(
            same,
            "seed {seed}: loop {value} vs baseline {}",
            base.best_cost
        );
        let risk = scheduler_reach_prob(&inst.model, best, &inst.safety.target).unwrap();
        ensure!(
            risk <= inst.safety.lambda_f64() + 1e-9,
            "seed {seed}: unsafe result"
        );
        checked += 1;
    }
    ensure!(checked >= 100, "only {checked} comparable instances");
    Ok(format!("{checked} instances agree"))
}

fn learning_converges() -> Outcome {
    let inst = fig1(Rational::new(3, 2));
    let out = synthesize_safe_permissive(
        &inst.model,
        &inst.safety,
        &Exclusions::default(),
        &SolverConfig::enumerative(),
    )
    .unwrap();
    let theta = out.scheduler.ok_or("no safe permissive scheduler")?;
    let sub = restrict(&inst.model, &theta).unwrap();
    let truth = inst.costs.true_costs().unwrap();
    let optimum = min_expected_cost(&sub, truth, &inst.performance.goal).unwrap();
    let best = optimum.at(sub.initial());
    ensure!((best - 1.4).abs() < 1e-12, "optimum {best}");
    let mut hits = 0;
    for seed in 0..10 {
        let mut env =
            Environment::new(&sub, &inst.costs, &inst.performance.goal, seed, None).unwrap();
        let cfg = LearnConfig {
            episodes: 5000,
            seed,
            ..LearnConfig::default()
        };
        let learned = learn(&mut env, &cfg).unwrap();
        let mc = induce_mc_det(&sub, &learned.scheduler).unwrap();
        let value = expected_cost_mc(&mc, truth, &inst.performance.goal)
            .unwrap()
            .at(sub.initial());
        if (value - best).abs() < 1e-9 {
            hits += 1;
            let mut ledger = CostLedger::new(sub.action_table_len());
            let eval = evaluate_exactly(&mut env, &learned.scheduler, &mut ledger, 1000).unwrap();
            ensure!(
                eval.complete && (eval.value - 1.4).abs() < 1e-12,
                "seed {seed}: exact evaluation {eval:?}"
            );
        }
    }
    ensure!(hits >= 9, "greedy optimal in {hits}/10 seeds");
    Ok(format!("greedy optimal in {hits}/10 seeds, exact cost 1.4"))
}

fn monotone(rep: &SynthesisReport) -> Result<(), String> {
    for w in rep.iterations.windows(2) {
        ensure!(
            w[1].upper <= w[0].upper,
            "upper rose at iteration {}",
            w[1].index
        );
        ensure!(
            w[1].lower >= w[0].lower,
            "lower fell at iteration {}",
            w[1].index
        );
    }
    for r in &rep.iterations {
        ensure!(
            r.lower <= r.upper,
            "lower above upper at iteration {}",
            r.index
        );
    }
    Ok(())
}

fn bound_dynamics() -> Outcome {
    ensure!(
        solver_available(&SolverConfig::default()),
        "external solver not available"
    );
    let cfg = LoopConfig {
        max_iterations: 4,
        stop: StopPolicy::ToOptimal,
        ..LoopConfig::default()
    };
    let instances: Vec<ProblemInstance> = vec![
        janitor(4, 4, Rational::new(1, 5), 1).unwrap(),
        fol_line(20, 3, 2, Rational::new(11, 20)).unwrap(),
        com_exp(4, 4, 2, Rational::new(1, 5)).unwrap(),
    ];
    let mut parts = Vec::new();
    for inst in &instances {
        let start = Instant::now();
        let rep = run(
            &inst.model,
            &inst.costs,
            &inst.safety,
            &inst.performance,
            &cfg,
        )
        .unwrap();
        let elapsed = start.elapsed();
        let name = &inst.meta.name;
        ensure!(
            rep.termination != Termination::SolverFailure,
            "{name}: {:?}",
            rep.message
        );
        ensure!(!rep.iterations.is_empty(), "{name}: no iterations");
        monotone(&rep).map_err(|e| format!("{name}: {e}"))?;
        if name == "comexp" {
            let w = rep.iterations[0]
                .lower_witness
                .as_ref()
                .ok_or("comexp: no lower-bound witness")?;
            ensure!(
                !communicates(&inst.model, w),
                "comexp: first lower bound comes from a communicating scheduler"
            );
        }
        ensure!(
            elapsed < Duration::from_secs(600),
            "{name}: took {elapsed:?}"
        );
        let last = rep.iterations.last().unwrap();
        parts.push(format!(
            "{name} [{:.3}, {:.3}] in {elapsed:.1?}",
            last.lower, last.upper
        ));
    }
    Ok(parts.join(", "))
}

fn early_optimality() -> Outcome {
    let inst = fig1(Rational::new(3, 2));
    let cfg = LoopConfig {
        solver: SolverConfig::enumerative(),
        stop: StopPolicy::ToOptimal,
        ..LoopConfig::default()
    };
    let rep = run(
        &inst.model,
        &inst.costs,
        &inst.safety,
        &inst.performance,
        &cfg,
    )
    .unwrap();
    ensure!(
        rep.termination == Termination::GloballyOptimal,
        "terminated {}",
        rep.termination
    );
    ensure!(
        rep.iterations.len() == 1,
        "{} iterations",
        rep.iterations.len()
    );
    let r = &rep.iterations[0];
    ensure!(
        (r.lower - 1.4).abs() < 1e-9 && (r.upper - 1.4).abs() < 1e-9,
        "bounds [{}, {}]",
        r.lower,
        r.upper
    );
    Ok("optimal after iteration 1 with bounds [1.4, 1.4]".into())
}

fn exhaustion() -> Outcome {
    let inst = fig1_with_costs(Rational::new(0, 1), Some(&[(0, "a", 0.1), (1, "c", 0.1)])).unwrap();
    let m = &inst.model;
    let s1 = sched(
        m,
        &[(0, "a"), (1, "c"), (2, "loop"), (3, "loop"), (4, "loop")],
    );
    let mut iterations = Vec::new();
    for (name, solver) in backends() {
        let cfg = LoopConfig {
            solver,
            stop: StopPolicy::ToOptimal,
            ..LoopConfig::default()
        };
        let rep = run(m, &inst.costs, &inst.safety, &inst.performance, &cfg).unwrap();
        ensure!(
            rep.termination == Termination::Exhausted,
            "{name}: terminated {}",
            rep.termination
        );
        ensure!(
            rep.iterations.len() <= 3,
            "{name}: {} iterations",
            rep.iterations.len()
        );
        for r in &rep.iterations {
            ensure!(
                r.learned != s1 && !allows_both(m, &r.permissive),
                "{name}: proposed the unsafe scheduler"
            );
        }
        iterations.push(format!("{name} {}", rep.iterations.len()));
    }
    Ok(format!(
        "exhausted after {} iterations",
        iterations.join(", ")
    ))
}

fn no_violations() -> Outcome {
    let n = safety_violations();
    ensure!(n == 0, "{n} non-compliant actions attempted");
    Ok("0 non-compliant actions attempted".into())
}

fn main() {
    let criteria: [(&str, Check); 9] = [
        ("small example", small_example),
        ("conflict sets", conflicts),
        ("random synthesis soundness", random_synthesis),
        ("loop matches baseline", loop_vs_baseline),
        ("learning convergence", learning_converges),
        ("bound dynamics", bound_dynamics),
        ("early optimality", early_optimality),
        ("exhaustion", exhaustion),
        ("no safety violations", no_violations),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or(p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default())
        });
        match outcome {
            Ok(detail) => println!("criterion {}: PASS {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {}: FAIL {name}: {why}", i + 1);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

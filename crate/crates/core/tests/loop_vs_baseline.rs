//! The loop, run to optimality, finds a safe scheduler whose true cost
//! matches brute-force enumeration of all safe schedulers.

mod common;

use common::random_instance;
use safesynth_core::analysis::{expected_cost_mc, scheduler_reach_prob};
use safesynth_core::learning::{safety_violations, LearnConfig};
use safesynth_core::model::induce_mc_det;
use safesynth_core::synth_loop::{naive_baseline, run, LoopConfig, StopPolicy, Termination};
use safesynth_core::synthesis::SolverConfig;

fn same(a: f64, b: f64) -> bool {
    (a.is_infinite() && b.is_infinite()) || (a - b).abs() <= 1e-6
}

#[test]
fn loop_matches_baseline_on_random_instances() {
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
    let mut finite = 0;
    for seed in 0..120 {
        let inst = random_instance(seed);
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
        assert!(
            matches!(
                rep.termination,
                Termination::GloballyOptimal | Termination::Exhausted
            ),
            "seed {seed}: {}",
            rep.termination
        );
        let truth = inst.costs.true_costs().unwrap();
        match (&base.best, &rep.best) {
            (None, None) => {}
            (Some(_), Some(best)) => {
                let mc = induce_mc_det(&inst.model, best).unwrap();
                let value = expected_cost_mc(&mc, truth, &inst.performance.goal)
                    .unwrap()
                    .at(inst.model.initial());
                assert!(
                    same(value, base.best_cost),
                    "seed {seed}: loop {value} vs baseline {}",
                    base.best_cost
                );
                let risk = scheduler_reach_prob(&inst.model, best, &inst.safety.target).unwrap();
                assert!(
                    risk <= inst.safety.lambda_f64() + 1e-9,
                    "seed {seed}: unsafe best"
                );
                checked += 1;
                finite += usize::from(value.is_finite());
            }
            (b, r) => panic!(
                "seed {seed}: baseline {:?} vs loop {:?}",
                b.is_some(),
                r.is_some()
            ),
        }
    }
    assert!(
        checked >= 100,
        "only {checked} instances had a safe scheduler"
    );
    assert!(
        finite >= 50,
        "only {finite} instances reach the goal surely"
    );
    assert_eq!(safety_violations(), 0);
}

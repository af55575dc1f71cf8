//! Seeded random instances shared by the integration tests.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use safesynth_core::analysis::min_reach_prob;
use safesynth_core::synthesis::Exclusions;
use safesynth_core::{
    CostModel, DetPermissiveScheduler, DetScheduler, Distribution, Mdp, MdpBuilder,
    PerformanceSpec, Rational, SafetySpec, StateId,
};

pub struct Instance {
    pub model: Mdp,
    pub costs: CostModel,
    pub safety: SafetySpec,
    pub performance: PerformanceSpec,
}

fn random_model(rng: &mut ChaCha8Rng, n: usize) -> Mdp {
    let mut b = MdpBuilder::new(n, StateId(0));
    for s in 0..n {
        for i in 0..rng.gen_range(1..=3) {
            let mut weights = vec![0i128; n];
            for _ in 0..rng.gen_range(1..=3) {
                weights[rng.gen_range(0..n)] += rng.gen_range(1..=9);
            }
            let total: i128 = weights.iter().sum();
            let entries = (0..n)
                .filter(|t| weights[*t] > 0)
                .map(|t| (StateId(t), Rational::new(weights[t], total)));
            b.add_action(
                StateId(s),
                format!("a{i}"),
                Distribution::normalized(entries),
            );
        }
    }
    b.build().expect("generated model is well-formed")
}

/// At most six states and three actions per state, random rational
/// probabilities and threshold, and a few random exclusions.
pub fn random_synthesis_problem(seed: u64) -> (Mdp, SafetySpec, Exclusions) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(1..=6);
    let model = random_model(&mut rng, n);
    let mut bad: Vec<StateId> = (0..n).filter(|_| rng.gen_bool(0.4)).map(StateId).collect();
    if bad.is_empty() {
        bad.push(StateId(rng.gen_range(0..n)));
    }
    let den = rng.gen_range(1..=12);
    let spec = SafetySpec::new(Rational::new(rng.gen_range(0..=den), den), bad).unwrap();
    let schedulers = (0..rng.gen_range(0..=2))
        .map(|_| {
            DetScheduler::new(
                model
                    .states()
                    .map(|s| {
                        let en = model.enabled(s);
                        en[rng.gen_range(0..en.len())]
                    })
                    .collect(),
            )
        })
        .collect();
    let assignments = (0..rng.gen_range(0..=1))
        .map(|_| {
            DetPermissiveScheduler::new(
                model
                    .states()
                    .map(|s| {
                        let en = model.enabled(s);
                        let mask = rng.gen_range(1..(1usize << en.len()));
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

/// A small instance with one bad state, one goal state and random true
/// costs inside random bounds.
pub fn random_instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(3..=5);
    let bad = rng.gen_range(1..n);
    let goal = (bad + rng.gen_range(1..n)) % n;
    let model = random_model(&mut rng, n);
    let k = model.action_table_len();
    let lower: Vec<f64> = (0..k).map(|_| rng.gen_range(0..=4) as f64 / 2.0).collect();
    let upper: Vec<f64> = lower
        .iter()
        .map(|l| l + rng.gen_range(0..=6) as f64 / 2.0)
        .collect();
    let oracle: Vec<f64> = lower
        .iter()
        .zip(&upper)
        .map(|(l, u)| l + (u - l) * rng.gen_range(0..=4) as f64 / 4.0)
        .collect();
    let costs = CostModel::new(lower, upper, Some(oracle)).unwrap();
    let floor = min_reach_prob(&model, &[StateId(bad)].into())
        .unwrap()
        .at(model.initial());
    // somewhere between the least achievable risk and certain failure
    let lambda = ((floor + rng.gen::<f64>() * (1.0 - floor)) * 100.0)
        .ceil()
        .min(100.0) as i128;
    Instance {
        safety: SafetySpec::new(Rational::new(lambda, 100), [StateId(bad)]).unwrap(),
        performance: PerformanceSpec::new(Rational::new(0, 1), [StateId(goal)]).unwrap(),
        model,
        costs,
    }
}

//! Safe exploration of a restricted sub-MDP with tabular Q-learning.
//!
//! The environment only accepts actions enabled in its sub-model, so every
//! executed transition is compliant with the permissive scheduler that
//! produced it. True costs are revealed one transition at a time.

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::analysis::expected_cost_mc;
use crate::error::{Error, Result};
use crate::model::{
    induce_mc_det, mask, ActionId, CostModel, DetScheduler, EpisodeTrace, Mdp, StateId, Step,
};

static SAFETY_VIOLATIONS: AtomicU64 = AtomicU64::new(0);

/// Number of rejected non-compliant actions since process start.
pub fn safety_violations() -> u64 {
    SAFETY_VIOLATIONS.load(Ordering::SeqCst)
}

/// Episodic environment over a sub-MDP.
#[derive(Debug, Clone)]
pub struct Environment<'a> {
    sub_model: &'a Mdp,
    costs: &'a CostModel,
    goal: Vec<bool>,
    rng: ChaCha8Rng,
    step_cap: usize,
    trace: EpisodeTrace,
}

impl<'a> Environment<'a> {
    pub fn new(
        sub_model: &'a Mdp,
        costs: &'a CostModel,
        goal: &BTreeSet<StateId>,
        seed: u64,
        step_cap: Option<usize>,
    ) -> Result<Self> {
        if !costs.has_oracle() {
            return Err(Error::MissingOracle);
        }
        if costs.lower_bounds().len() < sub_model.action_table_len() {
            return Err(Error::InvalidParameter(
                "cost model does not cover the action table".into(),
            ));
        }
        if let Some(s) = goal.iter().find(|s| s.0 >= sub_model.state_count()) {
            return Err(Error::UnknownState(*s));
        }
        let step_cap = step_cap.unwrap_or(10 * sub_model.state_count()).max(1);
        Ok(Environment {
            sub_model,
            costs,
            goal: mask(goal, sub_model.state_count()),
            rng: ChaCha8Rng::seed_from_u64(seed),
            step_cap,
            trace: EpisodeTrace::default(),
        })
    }

    pub fn sub_model(&self) -> &Mdp {
        self.sub_model
    }

    pub fn is_goal(&self, s: StateId) -> bool {
        self.goal[s.0]
    }

    pub fn goal_set(&self) -> BTreeSet<StateId> {
        (0..self.goal.len())
            .filter(|s| self.goal[*s])
            .map(StateId)
            .collect()
    }

    pub fn step_cap(&self) -> usize {
        self.step_cap
    }

    pub fn trace(&self) -> &EpisodeTrace {
        &self.trace
    }

    /// Starts a fresh episode trace and returns the initial state.
    pub fn reset(&mut self) -> StateId {
        self.trace.steps.clear();
        self.sub_model.initial()
    }

    /// Executes `a` in `s`: samples a successor and reveals the true cost.
    pub fn step(&mut self, s: StateId, a: ActionId) -> Result<(StateId, f64)> {
        if !self.sub_model.is_enabled(s, a) {
            SAFETY_VIOLATIONS.fetch_add(1, Ordering::SeqCst);
            return Err(Error::ActionNotEnabled {
                state: s,
                action: a,
            });
        }
        let succ = self.sub_model.successors(a);
        let mut u: f64 = self.rng.gen();
        let mut next = succ[succ.len() - 1].0;
        for &(t, p) in succ {
            if u < p {
                next = t;
                break;
            }
            u -= p;
        }
        let cost = self.costs.true_cost(a)?;
        let successor = StateId(next);
        self.trace.steps.push(Step {
            state: s,
            action: a,
            cost,
            successor,
        });
        Ok((successor, cost))
    }
}

/// Costs observed so far, indexed by action over the full model.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CostLedger {
    observed: Vec<Option<f64>>,
    visits: Vec<u64>,
}

impl CostLedger {
    pub fn new(action_count: usize) -> Self {
        CostLedger {
            observed: vec![None; action_count],
            visits: vec![0; action_count],
        }
    }

    fn ensure(&mut self, len: usize) {
        if self.observed.len() < len {
            self.observed.resize(len, None);
            self.visits.resize(len, 0);
        }
    }

    pub fn record(&mut self, a: ActionId, cost: f64) {
        self.ensure(a.0 + 1);
        if self.observed[a.0].is_none() {
            self.observed[a.0] = Some(cost);
        }
        self.visits[a.0] += 1;
    }

    pub fn observed(&self, a: ActionId) -> Option<f64> {
        self.observed.get(a.0).copied().flatten()
    }

    pub fn visits(&self, a: ActionId) -> u64 {
        self.visits.get(a.0).copied().unwrap_or(0)
    }

    pub fn observed_count(&self) -> usize {
        self.observed.iter().filter(|o| o.is_some()).count()
    }

    /// Folds another ledger into this one.
    pub fn merge(&mut self, other: &CostLedger) {
        self.ensure(other.observed.len());
        for (i, o) in other.observed.iter().enumerate() {
            if self.observed[i].is_none() {
                self.observed[i] = *o;
            }
            self.visits[i] += other.visits[i];
        }
    }

    pub fn iter_observed(&self) -> impl Iterator<Item = (ActionId, f64)> + '_ {
        self.observed
            .iter()
            .enumerate()
            .filter_map(|(i, o)| o.map(|c| (ActionId(i), c)))
    }
}

/// Observed cost where known, lower bound elsewhere.
pub fn refine_costs(ledger: &CostLedger, costs: &CostModel) -> Vec<f64> {
    costs
        .lower_bounds()
        .iter()
        .enumerate()
        .map(|(i, l)| ledger.observed(ActionId(i)).unwrap_or(*l))
        .collect()
}

/// Observed cost where known, upper bound elsewhere.
pub fn pessimistic_costs(ledger: &CostLedger, costs: &CostModel) -> Vec<f64> {
    costs
        .upper_bounds()
        .iter()
        .enumerate()
        .map(|(i, u)| ledger.observed(ActionId(i)).unwrap_or(*u))
        .collect()
}

/// Tabular action values over the enabled pairs of a sub-model.
#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    values: Vec<f64>,
}

impl QTable {
    pub fn get(&self, a: ActionId) -> f64 {
        self.values[a.0]
    }

    fn best(&self, model: &Mdp, s: StateId) -> (ActionId, f64) {
        let mut best = (model.enabled(s)[0], self.values[model.enabled(s)[0].0]);
        for &a in &model.enabled(s)[1..] {
            if self.values[a.0] < best.1 {
                best = (a, self.values[a.0]);
            }
        }
        best
    }

    /// Per-state argmin, ties to the smallest action id.
    pub fn greedy(&self, model: &Mdp) -> DetScheduler {
        DetScheduler::new(model.states().map(|s| self.best(model, s).0).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LearningRate {
    Constant(f64),
    /// `alpha / (1 + alpha * (n - 1))` on the n-th visit of a pair.
    VisitDecay(f64),
}

impl LearningRate {
    fn at(self, visit: u64) -> f64 {
        match self {
            LearningRate::Constant(a) => a,
            LearningRate::VisitDecay(a) => a / (1.0 + a * (visit.saturating_sub(1)) as f64),
        }
    }

    fn base(self) -> f64 {
        match self {
            LearningRate::Constant(a) | LearningRate::VisitDecay(a) => a,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearnConfig {
    pub episodes: usize,
    pub alpha: LearningRate,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Fraction of episodes over which epsilon decays linearly.
    pub epsilon_decay_fraction: f64,
    /// Per-episode step limit; `None` means ten times the state count.
    pub step_cap: Option<usize>,
    pub seed: u64,
    /// Episode budget for covering a scheduler's support during evaluation.
    pub evaluation_budget: usize,
}

impl Default for LearnConfig {
    fn default() -> Self {
        LearnConfig {
            episodes: 10_000,
            alpha: LearningRate::VisitDecay(0.1),
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay_fraction: 0.8,
            step_cap: None,
            seed: 0,
            evaluation_budget: 20_000,
        }
    }
}

impl LearnConfig {
    pub fn check(&self) -> Result<()> {
        let alpha = self.alpha.base();
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "learning rate {alpha} not in (0, 1]"
            )));
        }
        for eps in [self.epsilon_start, self.epsilon_end] {
            if !(0.0..=1.0).contains(&eps) {
                return Err(Error::InvalidParameter(format!(
                    "epsilon {eps} not in [0, 1]"
                )));
            }
        }
        if self.episodes == 0 {
            return Err(Error::InvalidParameter(
                "episode count must be positive".into(),
            ));
        }
        Ok(())
    }

    fn epsilon(&self, episode: usize) -> f64 {
        let horizon = (self.episodes as f64 * self.epsilon_decay_fraction).max(1.0);
        let t = (episode as f64 / horizon).min(1.0);
        self.epsilon_start + (self.epsilon_end - self.epsilon_start) * t
    }
}

#[derive(Debug, Clone)]
pub struct LearnOutcome {
    pub scheduler: DetScheduler,
    pub ledger: CostLedger,
    pub q: QTable,
    pub truncated_episodes: usize,
    pub steps: usize,
}

/// Undiscounted epsilon-greedy Q-learning minimising cost to the goal,
/// initialised optimistically at the lower cost bounds.
pub fn learn(env: &mut Environment<'_>, cfg: &LearnConfig) -> Result<LearnOutcome> {
    cfg.check()?;
    let model = env.sub_model;
    let mut values = vec![0.0; model.action_table_len()];
    for (s, a) in model.enabled_pairs() {
        values[a.0] = if env.is_goal(s) {
            0.0
        } else {
            env.costs.lower(a)
        };
    }
    let mut q = QTable { values };
    let mut ledger = CostLedger::new(model.action_table_len());
    let mut visits = vec![0u64; model.action_table_len()];
    let mut truncated = 0;
    let mut steps = 0;
    let mut explore = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x005e_ed0f_e791_04e5);

    for episode in 0..cfg.episodes {
        let epsilon = cfg.epsilon(episode);
        let mut s = env.reset();
        let mut n = 0;
        while !env.is_goal(s) {
            if n == env.step_cap {
                truncated += 1;
                break;
            }
            let acts = model.enabled(s);
            let a = if explore.gen::<f64>() < epsilon {
                acts[explore.gen_range(0..acts.len())]
            } else {
                q.best(model, s).0
            };
            let (next, cost) = env.step(s, a)?;
            ledger.record(a, cost);
            visits[a.0] += 1;
            let future = if env.is_goal(next) {
                0.0
            } else {
                q.best(model, next).1
            };
            let rate = cfg.alpha.at(visits[a.0]);
            q.values[a.0] = (1.0 - rate) * q.values[a.0] + rate * (cost + future);
            s = next;
            n += 1;
        }
        steps += n;
    }
    Ok(LearnOutcome {
        scheduler: q.greedy(model),
        ledger,
        q,
        truncated_episodes: truncated,
        steps,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// Expected cost on observed costs; unobserved pairs use their upper bound.
    pub value: f64,
    /// Whether every pair on the scheduler's reachable support was observed.
    pub complete: bool,
    pub extra_episodes: usize,
    pub unobserved: Vec<ActionId>,
}

/// Pairs (via their action) that the scheduler can execute before reaching the goal.
pub fn support_actions(model: &Mdp, sched: &DetScheduler, goal: &[bool]) -> Vec<ActionId> {
    let mut seen = vec![false; model.state_count()];
    let mut stack = vec![model.initial().0];
    seen[model.initial().0] = true;
    let mut out = Vec::new();
    while let Some(s) = stack.pop() {
        if goal[s] {
            continue;
        }
        let a = sched.choice[s];
        out.push(a);
        for &(t, _) in model.successors(a) {
            if !seen[t] {
                seen[t] = true;
                stack.push(t);
            }
        }
    }
    out.sort();
    out
}

/// Exact expected cost of `sched` on the costs in `ledger`, after running
/// exploitation-only episodes until its reachable support is observed or
/// the budget is spent. Newly observed costs are added to `ledger`.
pub fn evaluate_exactly(
    env: &mut Environment<'_>,
    sched: &DetScheduler,
    ledger: &mut CostLedger,
    budget: usize,
) -> Result<Evaluation> {
    let model = env.sub_model;
    sched.check(model)?;
    let support = support_actions(model, sched, &env.goal);
    let missing = |ledger: &CostLedger| {
        support
            .iter()
            .filter(|a| ledger.observed(**a).is_none())
            .count()
    };
    let mut extra = 0;
    while missing(ledger) > 0 && extra < budget {
        extra += 1;
        let mut s = env.reset();
        let mut n = 0;
        while !env.is_goal(s) && n < env.step_cap {
            let a = sched.get(s);
            let (next, cost) = env.step(s, a)?;
            ledger.record(a, cost);
            s = next;
            n += 1;
        }
    }
    let unobserved: Vec<ActionId> = support
        .iter()
        .copied()
        .filter(|a| ledger.observed(*a).is_none())
        .collect();
    let costs = pessimistic_costs(ledger, env.costs);
    let mc = induce_mc_det(model, sched)?;
    let value = expected_cost_mc(&mc, &costs, &env.goal_set())?.at(model.initial());
    Ok(Evaluation {
        value,
        complete: unobserved.is_empty(),
        extra_episodes: extra,
        unobserved,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchmarks::fig1;
    use crate::model::{restrict, DetPermissiveScheduler, Distribution, MdpBuilder, Rational};

    fn r(n: i128, d: i128) -> Rational {
        Rational::new(n, d)
    }

    fn goal() -> BTreeSet<StateId> {
        [2, 3, 4].into_iter().map(StateId).collect()
    }

    fn safe_sub(m: &Mdp) -> Mdp {
        let mut p = DetPermissiveScheduler::full(m);
        p.allowed[1] = vec![m.find_action(StateId(1), "d").unwrap()];
        restrict(m, &p).unwrap()
    }

    #[test]
    fn dirac_step_is_deterministic() {
        let inst = fig1(r(3, 2));
        let sub = safe_sub(&inst.model);
        let mut env = Environment::new(&sub, &inst.costs, &goal(), 1, None).unwrap();
        let lp = sub.find_action(StateId(2), "loop").unwrap();
        for _ in 0..10 {
            assert_eq!(env.step(StateId(2), lp).unwrap(), (StateId(2), 1.0));
        }
        assert!(env.trace().is_consistent(&sub));
    }

    #[test]
    fn sampling_matches_distribution() {
        let inst = fig1(r(3, 2));
        let sub = safe_sub(&inst.model);
        let mut env = Environment::new(&sub, &inst.costs, &goal(), 42, None).unwrap();
        let a = sub.find_action(StateId(0), "a").unwrap();
        let mut to_s1 = 0;
        let n = 100_000;
        for _ in 0..n {
            env.reset();
            let (next, cost) = env.step(StateId(0), a).unwrap();
            assert!(next == StateId(1) || next == StateId(3));
            assert!(inst.costs.lower(a) <= cost && cost <= inst.costs.upper(a));
            if next == StateId(1) {
                to_s1 += 1;
            }
        }
        let freq = to_s1 as f64 / n as f64;
        assert!((freq - 0.6).abs() < 0.01, "{freq}");
    }

    #[test]
    fn disallowed_action_is_rejected() {
        let inst = fig1(r(3, 2));
        let sub = safe_sub(&inst.model);
        let mut env = Environment::new(&sub, &inst.costs, &goal(), 1, None).unwrap();
        let c = inst.model.find_action(StateId(1), "c").unwrap();
        let before = safety_violations();
        assert!(matches!(
            env.step(StateId(1), c),
            Err(Error::ActionNotEnabled { .. })
        ));
        assert!(safety_violations() > before);
    }

    #[test]
    fn learns_the_safe_optimum() {
        let inst = fig1(r(3, 2));
        let sub = safe_sub(&inst.model);
        let mut env = Environment::new(&sub, &inst.costs, &goal(), 3, None).unwrap();
        let cfg = LearnConfig {
            episodes: 5000,
            seed: 3,
            ..LearnConfig::default()
        };
        let out = learn(&mut env, &cfg).unwrap();
        let b = sub.find_action(StateId(0), "b").unwrap();
        let d = sub.find_action(StateId(1), "d").unwrap();
        assert_eq!(out.scheduler.get(StateId(0)), b);
        assert_eq!(out.scheduler.get(StateId(1)), d);
        assert!((out.q.get(b) - 1.4).abs() < 0.05, "{}", out.q.get(b));
        let mut ledger = out.ledger.clone();
        let eval = evaluate_exactly(&mut env, &out.scheduler, &mut ledger, 100).unwrap();
        assert!(eval.complete);
        assert_eq!(eval.extra_episodes, 0);
        assert!((eval.value - 1.4).abs() < 1e-12);
    }

    #[test]
    fn learning_is_deterministic() {
        let inst = fig1(r(3, 2));
        let sub = safe_sub(&inst.model);
        let cfg = LearnConfig {
            episodes: 500,
            seed: 9,
            ..LearnConfig::default()
        };
        let run = || {
            let mut env = Environment::new(&sub, &inst.costs, &goal(), 9, None).unwrap();
            learn(&mut env, &cfg).unwrap()
        };
        let (x, y) = (run(), run());
        assert_eq!(x.scheduler, y.scheduler);
        assert_eq!(x.ledger, y.ledger);
        assert_eq!(x.q, y.q);
    }

    #[test]
    fn initial_goal_runs_empty_episodes() {
        let inst = fig1(r(3, 2));
        let sub = safe_sub(&inst.model);
        let goal: BTreeSet<StateId> = [StateId(0)].into();
        let mut env = Environment::new(&sub, &inst.costs, &goal, 1, None).unwrap();
        let out = learn(
            &mut env,
            &LearnConfig {
                episodes: 50,
                ..LearnConfig::default()
            },
        )
        .unwrap();
        assert_eq!(out.steps, 0);
        assert_eq!(out.ledger.observed_count(), 0);
        for &a in sub.enabled(StateId(0)) {
            assert_eq!(out.q.get(a), 0.0);
        }
    }

    #[test]
    fn chain_learning_covers_reachable_transitions() {
        let inst = fig1(r(3, 2));
        let sigma = DetScheduler::from_labels(&inst.model, &[(0, "a"), (1, "d")]).unwrap();
        let sub = restrict(&inst.model, &sigma.as_permissive()).unwrap();
        let mut env = Environment::new(&sub, &inst.costs, &goal(), 5, None).unwrap();
        let out = learn(
            &mut env,
            &LearnConfig {
                episodes: 10_000,
                ..LearnConfig::default()
            },
        )
        .unwrap();
        assert_eq!(out.scheduler, sigma);
        let support = support_actions(&sub, &sigma, &mask(&goal(), 5));
        assert!(support.iter().all(|a| out.ledger.observed(*a).is_some()));
    }

    #[test]
    fn evaluation_of_non_reaching_scheduler_is_infinite() {
        let mut b = MdpBuilder::new(2, StateId(0));
        b.add_action(StateId(0), "spin", Distribution::dirac(StateId(0)));
        b.add_action(StateId(1), "stay", Distribution::dirac(StateId(1)));
        let m = b.build().unwrap();
        let costs = CostModel::uniform(&m, 1.0, 1.0, 1.0).unwrap();
        let goal: BTreeSet<StateId> = [StateId(1)].into();
        let mut env = Environment::new(&m, &costs, &goal, 0, Some(5)).unwrap();
        let sched = DetScheduler::new(vec![ActionId(0), ActionId(1)]);
        let mut ledger = CostLedger::new(2);
        let eval = evaluate_exactly(&mut env, &sched, &mut ledger, 3).unwrap();
        assert_eq!(eval.value, f64::INFINITY);
    }

    #[test]
    fn refinement_uses_lower_bounds_for_unknown_pairs() {
        let inst = fig1_costs();
        let mut ledger = CostLedger::new(inst.model.action_table_len());
        assert_eq!(
            refine_costs(&ledger, &inst.costs),
            inst.costs.lower_bounds()
        );
        let a = ActionId(0);
        ledger.record(a, inst.costs.true_cost(a).unwrap());
        let refined = refine_costs(&ledger, &inst.costs);
        assert_eq!(refined[0], inst.costs.true_cost(a).unwrap());
        for (i, c) in refined.iter().enumerate() {
            assert!(*c <= inst.costs.true_cost(ActionId(i)).unwrap());
        }
        let mut full = CostLedger::new(inst.model.action_table_len());
        for (_, a) in inst.model.enabled_pairs() {
            full.record(a, inst.costs.true_cost(a).unwrap());
        }
        assert_eq!(
            refine_costs(&full, &inst.costs),
            inst.costs.true_costs().unwrap()
        );
    }

    fn fig1_costs() -> crate::benchmarks::ProblemInstance {
        crate::benchmarks::fig1_with_costs(r(0, 1), Some(&[(0, "a", 0.5), (1, "c", 1.5)])).unwrap()
    }

    #[test]
    fn ledger_keeps_first_observation() {
        let mut l = CostLedger::new(2);
        l.record(ActionId(1), 2.0);
        l.record(ActionId(1), 2.0);
        assert_eq!(l.visits(ActionId(1)), 2);
        assert_eq!(l.observed(ActionId(1)), Some(2.0));
        assert_eq!(l.observed(ActionId(0)), None);
        let mut other = CostLedger::new(3);
        other.record(ActionId(2), 4.0);
        l.merge(&other);
        assert_eq!(l.observed(ActionId(2)), Some(4.0));
        assert_eq!(l.observed_count(), 2);
    }

    #[test]
    fn config_validation() {
        let bad = LearnConfig {
            alpha: LearningRate::Constant(0.0),
            ..LearnConfig::default()
        };
        assert!(bad.check().is_err());
        let bad = LearnConfig {
            epsilon_end: 1.5,
            ..LearnConfig::default()
        };
        assert!(bad.check().is_err());
        assert!(LearnConfig::default().check().is_ok());
    }
}

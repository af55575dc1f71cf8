//! Numeric model checking over [`Mdp`]s.
//!
//! Reachability and expected-cost queries use graph precomputation followed
//! by Gauss-Seidel value iteration. When the undecided part of the state
//! graph is acyclic a single backward sweep yields the values directly.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::model::{
    compliant_schedulers_capped, induce_mc_det, mask, ActionId, DetPermissiveScheduler,
    DetScheduler, Mc, Mdp, SafetySpec, StateId, DEFAULT_ENUMERATION_CAP,
};

/// Convergence threshold on the per-sweep residual.
pub const EPS_PROB: f64 = 1e-10;
pub const MAX_ITERATIONS: usize = 1_000_000;
/// Upper bound on candidate actions for conflict-set enumeration.
pub const CONFLICT_ACTION_CAP: usize = 20;

const TIE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    GraphIterative,
    ExactAcyclic,
}

#[derive(Debug, Clone)]
pub struct ReachResult {
    pub per_state: Vec<f64>,
    pub method: Method,
    pub witness: Option<DetScheduler>,
}

impl ReachResult {
    pub fn at(&self, s: StateId) -> f64 {
        self.per_state[s.0]
    }
}

#[derive(Debug, Clone)]
pub struct CostResult {
    pub per_state: Vec<f64>,
    pub method: Method,
    pub witness: Option<DetScheduler>,
}

impl CostResult {
    pub fn at(&self, s: StateId) -> f64 {
        self.per_state[s.0]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct ConflictSet {
    pub actions: BTreeSet<ActionId>,
}

fn check_states(n: usize, set: &BTreeSet<StateId>) -> Result<Vec<bool>> {
    if let Some(s) = set.iter().find(|s| s.0 >= n) {
        return Err(Error::UnknownState(*s));
    }
    Ok(mask(set, n))
}

fn check_costs(model: &Mdp, costs: &[f64]) -> Result<()> {
    if costs.len() < model.action_table_len() {
        return Err(Error::InvalidParameter(format!(
            "cost table has {} entries, model has {} actions",
            costs.len(),
            model.action_table_len()
        )));
    }
    Ok(())
}

/// States that can reach `target` along some action (graph reachability).
pub(crate) fn can_reach(model: &Mdp, choices: &[Vec<ActionId>], target: &[bool]) -> Vec<bool> {
    let n = model.state_count();
    let mut preds: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (s, acts) in choices.iter().enumerate() {
        for &a in acts {
            for &(t, _) in model.successors(a) {
                preds[t].push(s);
            }
        }
    }
    let mut seen = target.to_vec();
    let mut stack: Vec<usize> = (0..n).filter(|s| target[*s]).collect();
    while let Some(t) = stack.pop() {
        for &p in &preds[t] {
            if !seen[p] {
                seen[p] = true;
                stack.push(p);
            }
        }
    }
    seen
}

/// States from which some scheduler reaches `target` with probability one.
pub(crate) fn prob1_exists(model: &Mdp, choices: &[Vec<ActionId>], target: &[bool]) -> Vec<bool> {
    let n = model.state_count();
    let mut universe = vec![true; n];
    loop {
        let mut reached = target.to_vec();
        let mut changed = true;
        while changed {
            changed = false;
            for s in 0..n {
                if reached[s] || !universe[s] {
                    continue;
                }
                let ok = choices[s].iter().any(|&a| {
                    let succ = model.successors(a);
                    succ.iter().all(|&(t, _)| universe[t]) && succ.iter().any(|&(t, _)| reached[t])
                });
                if ok {
                    reached[s] = true;
                    changed = true;
                }
            }
        }
        if reached == universe {
            return universe;
        }
        universe = reached;
    }
}

/// States from which every scheduler reaches `target` with positive probability.
fn positive_for_all(model: &Mdp, choices: &[Vec<ActionId>], target: &[bool]) -> Vec<bool> {
    let n = model.state_count();
    let mut reached = target.to_vec();
    let mut changed = true;
    while changed {
        changed = false;
        for s in 0..n {
            if reached[s] {
                continue;
            }
            let ok = !choices[s].is_empty()
                && choices[s]
                    .iter()
                    .all(|&a| model.successors(a).iter().any(|&(t, _)| reached[t]));
            if ok {
                reached[s] = true;
                changed = true;
            }
        }
    }
    reached
}

/// Reverse topological order of `maybe` states, or `None` when the
/// subgraph induced by them has a cycle.
fn acyclic_order(model: &Mdp, choices: &[Vec<ActionId>], maybe: &[bool]) -> Option<Vec<usize>> {
    let n = model.state_count();
    let mut out_deg = vec![0usize; n];
    let mut preds: Vec<Vec<usize>> = vec![Vec::new(); n];
    for s in (0..n).filter(|s| maybe[*s]) {
        for &a in &choices[s] {
            for &(t, _) in model.successors(a) {
                if maybe[t] {
                    out_deg[s] += 1;
                    preds[t].push(s);
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).filter(|s| maybe[*s] && out_deg[*s] == 0).collect();
    let mut head = 0;
    while head < order.len() {
        let t = order[head];
        head += 1;
        for &p in &preds[t] {
            out_deg[p] -= 1;
            if out_deg[p] == 0 {
                order.push(p);
            }
        }
    }
    (order.len() == maybe.iter().filter(|m| **m).count()).then_some(order)
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Opt {
    Max,
    Min,
}

impl Opt {
    fn pick(self, a: f64, b: f64) -> f64 {
        match self {
            Opt::Max => a.max(b),
            Opt::Min => a.min(b),
        }
    }
}

fn action_value(model: &Mdp, a: ActionId, values: &[f64]) -> f64 {
    model
        .successors(a)
        .iter()
        .map(|&(t, p)| p * values[t])
        .sum()
}

fn optimize_over(
    model: &Mdp,
    acts: &[ActionId],
    values: &[f64],
    offset: &dyn Fn(ActionId) -> f64,
    opt: Opt,
) -> f64 {
    acts.iter()
        .map(|&a| offset(a) + action_value(model, a, values))
        .fold(None, |acc: Option<f64>, v| {
            Some(acc.map_or(v, |x| opt.pick(x, v)))
        })
        .unwrap_or(0.0)
}

fn reach_values(
    model: &Mdp,
    choices: &[Vec<ActionId>],
    target: &[bool],
    opt: Opt,
) -> (Vec<f64>, Method) {
    let n = model.state_count();
    let zero: Vec<bool> = match opt {
        Opt::Max => can_reach(model, choices, target)
            .into_iter()
            .map(|r| !r)
            .collect(),
        Opt::Min => positive_for_all(model, choices, target)
            .into_iter()
            .map(|r| !r)
            .collect(),
    };
    let one: Vec<bool> = match opt {
        Opt::Max => prob1_exists(model, choices, target),
        Opt::Min => target.to_vec(),
    };
    let mut values: Vec<f64> = (0..n).map(|s| if one[s] { 1.0 } else { 0.0 }).collect();
    let maybe: Vec<bool> = (0..n).map(|s| !zero[s] && !one[s]).collect();
    let no_offset = |_: ActionId| 0.0;
    if let Some(order) = acyclic_order(model, choices, &maybe) {
        for s in order {
            values[s] = optimize_over(model, &choices[s], &values, &no_offset, opt);
        }
        return (values, Method::ExactAcyclic);
    }
    let active: Vec<usize> = (0..n).filter(|s| maybe[*s]).collect();
    for _ in 0..MAX_ITERATIONS {
        let mut residual: f64 = 0.0;
        for &s in &active {
            let v = optimize_over(model, &choices[s], &values, &no_offset, opt);
            residual = residual.max((v - values[s]).abs());
            values[s] = v;
        }
        if residual < EPS_PROB {
            break;
        }
    }
    (values, Method::GraphIterative)
}

/// Among optimal actions, builds a scheduler that makes progress toward
/// `anchor` states, preferring the smallest action id. States never
/// attracted fall back to their smallest optimal (or enabled) action.
fn progress_witness(
    model: &Mdp,
    choices: &[Vec<ActionId>],
    anchor: &[bool],
    eligible: &dyn Fn(usize, ActionId) -> bool,
) -> DetScheduler {
    let n = model.state_count();
    let mut assigned = anchor.to_vec();
    let mut choice: Vec<Option<ActionId>> = vec![None; n];
    let mut changed = true;
    while changed {
        changed = false;
        for s in 0..n {
            if assigned[s] {
                continue;
            }
            let pick = choices[s]
                .iter()
                .copied()
                .find(|&a| eligible(s, a) && model.successors(a).iter().any(|&(t, _)| assigned[t]));
            if let Some(a) = pick {
                choice[s] = Some(a);
                assigned[s] = true;
                changed = true;
            }
        }
    }
    DetScheduler::new(
        (0..n)
            .map(|s| {
                choice[s].unwrap_or_else(|| {
                    choices[s]
                        .iter()
                        .copied()
                        .find(|&a| eligible(s, a))
                        .or_else(|| choices[s].first().copied())
                        .unwrap_or(model.enabled(StateId(s))[0])
                })
            })
            .collect(),
    )
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= TIE_TOLERANCE * a.abs().max(b.abs()).max(1.0)
}

/// Probability of eventually reaching `target` in a Markov chain.
pub fn reach_prob_mc(chain: &Mc, target: &BTreeSet<StateId>) -> Result<ReachResult> {
    let model = chain.mdp();
    let target = check_states(model.state_count(), target)?;
    let (per_state, method) = reach_values(model, model.enabled_table(), &target, Opt::Max);
    Ok(ReachResult {
        per_state,
        method,
        witness: None,
    })
}

fn max_reach_with_choices(model: &Mdp, choices: &[Vec<ActionId>], target: &[bool]) -> ReachResult {
    let (per_state, method) = reach_values(model, choices, target, Opt::Max);
    let eligible = |s: usize, a: ActionId| close(action_value(model, a, &per_state), per_state[s]);
    let anchor: Vec<bool> = (0..model.state_count())
        .map(|s| target[s] || per_state[s] <= 0.0)
        .collect();
    let witness = progress_witness(model, choices, &anchor, &eligible);
    ReachResult {
        per_state,
        method,
        witness: Some(witness),
    }
}

/// Maximal reachability probability over all schedulers, with an optimal
/// deterministic witness.
pub fn max_reach_prob(model: &Mdp, target: &BTreeSet<StateId>) -> Result<ReachResult> {
    let target = check_states(model.state_count(), target)?;
    Ok(max_reach_with_choices(
        model,
        model.enabled_table(),
        &target,
    ))
}

/// Minimal reachability probability over all schedulers, with an optimal
/// deterministic witness. Any locally optimal choice attains the minimum.
pub fn min_reach_prob(model: &Mdp, target: &BTreeSet<StateId>) -> Result<ReachResult> {
    let target = check_states(model.state_count(), target)?;
    let (per_state, method) = reach_values(model, model.enabled_table(), &target, Opt::Min);
    let witness = model
        .states()
        .map(|s| {
            let acts = model.enabled(s);
            acts.iter()
                .copied()
                .filter(|&a| close(action_value(model, a, &per_state), per_state[s.0]))
                .min()
                .unwrap_or_else(|| *acts.iter().min().expect("no deadlocks"))
        })
        .collect();
    Ok(ReachResult {
        per_state,
        method,
        witness: Some(DetScheduler::new(witness)),
    })
}

/// Maximal reachability probability at the initial state when only the
/// actions in `choices` are available.
pub(crate) fn max_reach_initial(model: &Mdp, choices: &[Vec<ActionId>], target: &[bool]) -> f64 {
    reach_values(model, choices, target, Opt::Max).0[model.initial().0]
}

pub(crate) fn max_reach_values(
    model: &Mdp,
    choices: &[Vec<ActionId>],
    target: &[bool],
) -> Vec<f64> {
    reach_values(model, choices, target, Opt::Max).0
}

/// Expected accumulated cost until the first visit to `goal`; infinite from
/// states that reach `goal` with probability below one.
pub fn expected_cost_mc(chain: &Mc, costs: &[f64], goal: &BTreeSet<StateId>) -> Result<CostResult> {
    let model = chain.mdp();
    check_costs(model, costs)?;
    let goal = check_states(model.state_count(), goal)?;
    let (per_state, method) = mc_cost_values(model, model.enabled_table(), costs, &goal);
    Ok(CostResult {
        per_state,
        method,
        witness: None,
    })
}

fn mc_cost_values(
    model: &Mdp,
    choices: &[Vec<ActionId>],
    costs: &[f64],
    goal: &[bool],
) -> (Vec<f64>, Method) {
    let n = model.state_count();
    let reaches = can_reach(model, choices, goal);
    let hopeless: Vec<bool> = reaches.iter().map(|r| !r).collect();
    // states that can hit a hopeless state before the goal
    let mut doomed = hopeless.clone();
    let mut changed = true;
    while changed {
        changed = false;
        for s in 0..n {
            if doomed[s] || goal[s] {
                continue;
            }
            if choices[s]
                .iter()
                .any(|&a| model.successors(a).iter().any(|&(t, _)| doomed[t]))
            {
                doomed[s] = true;
                changed = true;
            }
        }
    }
    let mut values: Vec<f64> = (0..n)
        .map(|s| {
            if goal[s] {
                0.0
            } else if doomed[s] {
                f64::INFINITY
            } else {
                0.0
            }
        })
        .collect();
    let maybe: Vec<bool> = (0..n).map(|s| !goal[s] && !doomed[s]).collect();
    let offset = |a: ActionId| costs[a.0];
    if let Some(order) = acyclic_order(model, choices, &maybe) {
        for s in order {
            values[s] = optimize_over(model, &choices[s], &values, &offset, Opt::Min);
        }
        return (values, Method::ExactAcyclic);
    }
    let active: Vec<usize> = (0..n).filter(|s| maybe[*s]).collect();
    iterate_costs(model, choices, &active, &offset, &mut values);
    (values, Method::GraphIterative)
}

fn iterate_costs(
    model: &Mdp,
    choices: &[Vec<ActionId>],
    active: &[usize],
    offset: &dyn Fn(ActionId) -> f64,
    values: &mut [f64],
) {
    for _ in 0..MAX_ITERATIONS {
        let mut residual: f64 = 0.0;
        for &s in active {
            let v = optimize_over(model, &choices[s], values, offset, Opt::Min);
            residual = residual.max((v - values[s]).abs() / v.abs().max(1.0));
            values[s] = v;
        }
        if residual < EPS_PROB {
            break;
        }
    }
}

/// Minimal expected cost to reach `goal` over schedulers that reach it
/// almost surely, with an optimal deterministic witness.
pub fn min_expected_cost(
    model: &Mdp,
    costs: &[f64],
    goal: &BTreeSet<StateId>,
) -> Result<CostResult> {
    check_costs(model, costs)?;
    let goal = check_states(model.state_count(), goal)?;
    Ok(min_cost_with_choices(
        model,
        model.enabled_table(),
        costs,
        &goal,
    ))
}

fn min_cost_with_choices(
    model: &Mdp,
    choices: &[Vec<ActionId>],
    costs: &[f64],
    goal: &[bool],
) -> CostResult {
    let n = model.state_count();
    let region = prob1_exists(model, choices, goal);
    // keep only actions that stay inside the almost-sure region
    let kept: Vec<Vec<ActionId>> = (0..n)
        .map(|s| {
            if !region[s] || goal[s] {
                return Vec::new();
            }
            choices[s]
                .iter()
                .copied()
                .filter(|&a| model.successors(a).iter().all(|&(t, _)| region[t]))
                .collect()
        })
        .collect();
    let maybe: Vec<bool> = (0..n).map(|s| region[s] && !goal[s]).collect();
    let mut values: Vec<f64> = (0..n)
        .map(|s| {
            if goal[s] || region[s] {
                0.0
            } else {
                f64::INFINITY
            }
        })
        .collect();
    let offset = |a: ActionId| costs[a.0];
    let method = if let Some(order) = acyclic_order(model, &kept, &maybe) {
        for s in order {
            values[s] = optimize_over(model, &kept[s], &values, &offset, Opt::Min);
        }
        Method::ExactAcyclic
    } else {
        // start above the optimum from a proper policy, then iterate down
        let anchor: Vec<bool> = (0..n).map(|s| goal[s] || !region[s]).collect();
        let proper = progress_witness(model, &kept, &anchor, &|_, _| true);
        let single: Vec<Vec<ActionId>> = (0..n)
            .map(|s| {
                if maybe[s] {
                    vec![proper.choice[s]]
                } else {
                    Vec::new()
                }
            })
            .collect();
        let active: Vec<usize> = (0..n).filter(|s| maybe[*s]).collect();
        iterate_costs(model, &single, &active, &offset, &mut values);
        iterate_costs(model, &kept, &active, &offset, &mut values);
        Method::GraphIterative
    };
    let eligible = |s: usize, a: ActionId| {
        maybe[s]
            && kept[s].contains(&a)
            && close(costs[a.0] + action_value(model, a, &values), values[s])
    };
    let anchor: Vec<bool> = (0..n).map(|s| goal[s] || !region[s]).collect();
    let witness = progress_witness(model, choices, &anchor, &eligible);
    CostResult {
        per_state: values,
        method,
        witness: Some(witness),
    }
}

/// Whether every scheduler compliant with `perm` satisfies `spec`.
pub fn is_safe_permissive(
    model: &Mdp,
    perm: &DetPermissiveScheduler,
    spec: &SafetySpec,
) -> Result<bool> {
    perm.check(model)?;
    let target = check_states(model.state_count(), &spec.target)?;
    Ok(max_reach_initial(model, &perm.allowed, &target) <= spec.lambda_f64() + EPS_PROB)
}

/// Probability of reaching the safety target under a deterministic scheduler.
pub fn scheduler_reach_prob(
    model: &Mdp,
    sched: &DetScheduler,
    target: &BTreeSet<StateId>,
) -> Result<f64> {
    let mc = induce_mc_det(model, sched)?;
    Ok(reach_prob_mc(&mc, target)?.at(model.initial()))
}

/// All deterministic schedulers satisfying `spec`, by exhaustive check.
pub fn enumerate_safe_schedulers(model: &Mdp, spec: &SafetySpec) -> Result<Vec<DetScheduler>> {
    let target = check_states(model.state_count(), &spec.target)?;
    let lambda = spec.lambda_f64();
    let full = DetPermissiveScheduler::full(model);
    let mut out = Vec::new();
    for sched in compliant_schedulers_capped(&full, DEFAULT_ENUMERATION_CAP)? {
        let single: Vec<Vec<ActionId>> = sched.choice.iter().map(|a| vec![*a]).collect();
        if max_reach_initial(model, &single, &target) <= lambda + EPS_PROB {
            out.push(sched);
        }
    }
    Ok(out)
}

/// All inclusion-minimal action sets whose joint use forces a violation of
/// `spec` under every deterministic scheduler using them.
///
/// When every scheduler already violates `spec` the empty set is the unique
/// minimal conflict set and is returned alone.
pub fn minimal_conflict_sets(model: &Mdp, spec: &SafetySpec) -> Result<Vec<ConflictSet>> {
    let target = check_states(model.state_count(), &spec.target)?;
    let lambda = spec.lambda_f64();
    let base: Vec<Vec<ActionId>> = model.enabled_table().to_vec();
    let forced_unsafe = |choices: &[Vec<ActionId>]| {
        reach_values(model, choices, &target, Opt::Min).0[model.initial().0] > lambda + EPS_PROB
    };

    if forced_unsafe(&base) {
        return Ok(vec![ConflictSet {
            actions: BTreeSet::new(),
        }]);
    }
    let candidates: Vec<ActionId> = model
        .states()
        .filter(|s| model.enabled(*s).len() > 1)
        .flat_map(|s| model.enabled(s).iter().copied())
        .collect();
    if candidates.len() > CONFLICT_ACTION_CAP {
        return Err(Error::CapExceeded {
            count: candidates.len() as u128,
            cap: CONFLICT_ACTION_CAP as u128,
        });
    }
    let mut found: Vec<ConflictSet> = Vec::new();
    let m = candidates.len();
    for size in 1..=m {
        let mut idx: Vec<usize> = (0..size).collect();
        loop {
            let set: Vec<ActionId> = idx.iter().map(|i| candidates[*i]).collect();
            let mut states = BTreeSet::new();
            let usable = set.iter().all(|a| states.insert(model.action(*a).state));
            let redundant = found
                .iter()
                .any(|c| c.actions.iter().all(|a| set.contains(a)));
            if usable && !redundant {
                let mut choices = base.clone();
                for a in &set {
                    choices[model.action(*a).state.0] = vec![*a];
                }
                if forced_unsafe(&choices) {
                    found.push(ConflictSet {
                        actions: set.into_iter().collect(),
                    });
                }
            }
            // next combination
            let mut i = size;
            let advanced = loop {
                if i == 0 {
                    break false;
                }
                i -= 1;
                if idx[i] < m - size + i {
                    idx[i] += 1;
                    for j in i + 1..size {
                        idx[j] = idx[j - 1] + 1;
                    }
                    break true;
                }
            };
            if !advanced {
                break;
            }
        }
    }
    Ok(found)
}

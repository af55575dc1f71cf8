//! Probabilistic models, schedulers and specifications.
//!
//! Probabilities are exact rationals throughout this module. Numeric solvers
//! read the cached `f64` view through [`Mdp::successors`].

use std::collections::BTreeSet;
use std::fmt;

use num_rational::Ratio;
use num_traits::{One, ToPrimitive, Zero};

use crate::error::{Error, Result};

pub type Rational = Ratio<i128>;

/// Converts an exact rational into the nearest `f64`.
pub fn to_f64(r: &Rational) -> f64 {
    r.to_f64()
        .unwrap_or_else(|| *r.numer() as f64 / *r.denom() as f64)
}

/// Parses `num/den`, an integer, or a base-10 decimal literal exactly.
pub fn parse_rational(text: &str) -> Option<Rational> {
    let text = text.trim();
    if text.is_empty() {
        return None;
    }
    if let Some((num, den)) = text.split_once('/') {
        let num: i128 = num.trim().parse().ok()?;
        let den: i128 = den.trim().parse().ok()?;
        if den == 0 {
            return None;
        }
        return Some(Rational::new(num, den));
    }
    let (negative, body) = match text.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, text),
    };
    let (int_part, frac_part) = body.split_once('.').unwrap_or((body, ""));
    if int_part.is_empty() && frac_part.is_empty() {
        return None;
    }
    if !int_part.chars().all(|c| c.is_ascii_digit())
        || !frac_part.chars().all(|c| c.is_ascii_digit())
    {
        return None;
    }
    if frac_part.len() > 30 {
        return None;
    }
    let digits = format!("{int_part}{frac_part}");
    let num: i128 = if digits.is_empty() {
        0
    } else {
        digits.parse().ok()?
    };
    let den = 10i128.checked_pow(frac_part.len() as u32)?;
    let r = Rational::new(num, den);
    Some(if negative { -r } else { r })
}

/// Canonical `num/den` rendering used by the model file format.
pub fn format_rational(r: &Rational) -> String {
    format!("{}/{}", r.numer(), r.denom())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct StateId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ActionId(pub usize);

impl StateId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl ActionId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for StateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "s{}", self.0)
    }
}

impl fmt::Display for ActionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// A finite-support probability distribution over states.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Distribution {
    entries: Vec<(StateId, Rational)>,
}

impl Distribution {
    /// Builds a distribution without checking it; see [`validate`].
    pub fn from_entries(entries: Vec<(StateId, Rational)>) -> Self {
        Distribution { entries }
    }

    pub fn dirac(target: StateId) -> Self {
        Distribution {
            entries: vec![(target, Rational::one())],
        }
    }

    /// Merges duplicate targets and drops zero entries.
    pub fn normalized(entries: impl IntoIterator<Item = (StateId, Rational)>) -> Self {
        let mut merged: Vec<(StateId, Rational)> = Vec::new();
        for (target, p) in entries {
            if p.is_zero() {
                continue;
            }
            match merged.iter_mut().find(|(t, _)| *t == target) {
                Some((_, q)) => *q += p,
                None => merged.push((target, p)),
            }
        }
        merged.sort_by_key(|(t, _)| *t);
        Distribution { entries: merged }
    }

    pub fn entries(&self) -> &[(StateId, Rational)] {
        &self.entries
    }

    pub fn is_dirac(&self) -> bool {
        self.entries.len() == 1 && self.entries[0].1.is_one()
    }

    pub fn prob(&self, target: StateId) -> Rational {
        self.entries
            .iter()
            .filter(|(t, _)| *t == target)
            .map(|(_, p)| *p)
            .fold(Rational::zero(), |a, b| a + b)
    }

    pub fn total(&self) -> Rational {
        self.entries
            .iter()
            .map(|(_, p)| *p)
            .fold(Rational::zero(), |a, b| a + b)
    }

    pub fn support(&self) -> impl Iterator<Item = StateId> + '_ {
        self.entries.iter().map(|(t, _)| *t)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Action {
    pub state: StateId,
    pub label: String,
    pub distribution: Distribution,
}

/// A Markov decision process with globally unique action identifiers.
///
/// The action table may contain actions that are not enabled anywhere: a
/// sub-MDP produced by [`restrict`] keeps the parent's table so identifiers
/// stay stable.
#[derive(Debug, Clone)]
pub struct Mdp {
    initial: StateId,
    enabled: Vec<Vec<ActionId>>,
    actions: Vec<Action>,
    numeric: Vec<Vec<(usize, f64)>>,
}

impl PartialEq for Mdp {
    fn eq(&self, other: &Self) -> bool {
        self.initial == other.initial
            && self.enabled == other.enabled
            && self.actions == other.actions
    }
}

impl Mdp {
    /// Assembles a model from raw parts without validation.
    pub fn from_parts(initial: StateId, enabled: Vec<Vec<ActionId>>, actions: Vec<Action>) -> Self {
        let numeric = actions
            .iter()
            .map(|a| {
                a.distribution
                    .entries()
                    .iter()
                    .map(|(t, p)| (t.0, to_f64(p)))
                    .collect()
            })
            .collect();
        Mdp {
            initial,
            enabled,
            actions,
            numeric,
        }
    }

    pub fn state_count(&self) -> usize {
        self.enabled.len()
    }

    pub fn initial(&self) -> StateId {
        self.initial
    }

    pub fn states(&self) -> impl Iterator<Item = StateId> {
        (0..self.enabled.len()).map(StateId)
    }

    pub fn enabled(&self, s: StateId) -> &[ActionId] {
        &self.enabled[s.0]
    }

    pub fn action(&self, a: ActionId) -> &Action {
        &self.actions[a.0]
    }

    /// Size of the action table (enabled or not).
    pub fn action_table_len(&self) -> usize {
        self.actions.len()
    }

    pub fn actions(&self) -> &[Action] {
        &self.actions
    }

    pub fn is_enabled(&self, s: StateId, a: ActionId) -> bool {
        self.enabled
            .get(s.0)
            .map(|acts| acts.contains(&a))
            .unwrap_or(false)
    }

    /// All enabled (state, action) pairs in state-major order.
    pub fn enabled_pairs(&self) -> impl Iterator<Item = (StateId, ActionId)> + '_ {
        self.enabled
            .iter()
            .enumerate()
            .flat_map(|(s, acts)| acts.iter().map(move |a| (StateId(s), *a)))
    }

    pub fn transition_count(&self) -> usize {
        self.enabled.iter().map(Vec::len).sum()
    }

    pub fn branch_count(&self) -> usize {
        self.enabled_pairs()
            .map(|(_, a)| self.actions[a.0].distribution.entries().len())
            .sum()
    }

    /// `f64` successor list of an action.
    pub fn successors(&self, a: ActionId) -> &[(usize, f64)] {
        &self.numeric[a.0]
    }

    pub fn label(&self, a: ActionId) -> &str {
        &self.actions[a.0].label
    }

    /// Finds an enabled action of `s` by label.
    pub fn find_action(&self, s: StateId, label: &str) -> Option<ActionId> {
        self.enabled(s)
            .iter()
            .copied()
            .find(|a| self.actions[a.0].label == label)
    }

    pub(crate) fn enabled_table(&self) -> &[Vec<ActionId>] {
        &self.enabled
    }

    pub fn is_mc(&self) -> bool {
        self.enabled.iter().all(|acts| acts.len() == 1)
    }

    fn check_state(&self, s: StateId) -> Result<()> {
        if s.0 < self.state_count() {
            Ok(())
        } else {
            Err(Error::UnknownState(s))
        }
    }
}

/// Incremental construction of an [`Mdp`]; action identifiers are assigned
/// in state-major order when the model is built.
#[derive(Debug, Clone)]
pub struct MdpBuilder {
    initial: StateId,
    per_state: Vec<Vec<(String, Distribution)>>,
}

impl MdpBuilder {
    pub fn new(state_count: usize, initial: StateId) -> Self {
        MdpBuilder {
            initial,
            per_state: vec![Vec::new(); state_count],
        }
    }

    pub fn state_count(&self) -> usize {
        self.per_state.len()
    }

    pub fn add_action(
        &mut self,
        state: StateId,
        label: impl Into<String>,
        distribution: Distribution,
    ) -> &mut Self {
        self.per_state[state.0].push((label.into(), distribution));
        self
    }

    /// Builds without validation.
    pub fn build_unchecked(self) -> Mdp {
        let mut enabled = Vec::with_capacity(self.per_state.len());
        let mut actions = Vec::new();
        for (s, acts) in self.per_state.into_iter().enumerate() {
            let mut ids = Vec::with_capacity(acts.len());
            for (label, distribution) in acts {
                ids.push(ActionId(actions.len()));
                actions.push(Action {
                    state: StateId(s),
                    label,
                    distribution,
                });
            }
            enabled.push(ids);
        }
        Mdp::from_parts(self.initial, enabled, actions)
    }

    pub fn build(self) -> Result<Mdp> {
        let mdp = self.build_unchecked();
        let violations = validate(&mdp);
        if violations.is_empty() {
            Ok(mdp)
        } else {
            Err(Error::InvalidModel(violations))
        }
    }
}

/// A broken model invariant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    EmptyModel,
    InitialOutOfRange(StateId),
    Deadlock(StateId),
    ForeignAction {
        state: StateId,
        action: ActionId,
    },
    DuplicateAction(ActionId),
    TargetOutOfRange {
        state: StateId,
        action: ActionId,
        target: StateId,
    },
    NonPositiveProbability {
        state: StateId,
        action: ActionId,
        target: StateId,
    },
    DuplicateTarget {
        state: StateId,
        action: ActionId,
        target: StateId,
    },
    BadTotal {
        state: StateId,
        action: ActionId,
        total: Rational,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyModel => write!(f, "model has no states"),
            Violation::InitialOutOfRange(s) => write!(f, "initial state {s} out of range"),
            Violation::Deadlock(s) => write!(f, "state {s} has no enabled action"),
            Violation::ForeignAction { state, action } => {
                write!(
                    f,
                    "action {action} listed at {state} belongs to another state"
                )
            }
            Violation::DuplicateAction(a) => write!(f, "action {a} enabled more than once"),
            Violation::TargetOutOfRange {
                state,
                action,
                target,
            } => {
                write!(f, "({state}, {action}) targets unknown state {target}")
            }
            Violation::NonPositiveProbability {
                state,
                action,
                target,
            } => {
                write!(
                    f,
                    "({state}, {action}) has non-positive probability to {target}"
                )
            }
            Violation::DuplicateTarget {
                state,
                action,
                target,
            } => {
                write!(f, "({state}, {action}) lists {target} twice")
            }
            Violation::BadTotal {
                state,
                action,
                total,
            } => {
                write!(f, "({state}, {action}) probabilities sum to {total}, not 1")
            }
        }
    }
}

/// Checks every structural invariant of `model`.
pub fn validate(model: &Mdp) -> Vec<Violation> {
    let mut out = Vec::new();
    let n = model.state_count();
    if n == 0 {
        out.push(Violation::EmptyModel);
        return out;
    }
    if model.initial.0 >= n {
        out.push(Violation::InitialOutOfRange(model.initial));
    }
    let mut seen = vec![false; model.actions.len()];
    for s in model.states() {
        let acts = model.enabled(s);
        if acts.is_empty() {
            out.push(Violation::Deadlock(s));
        }
        for &a in acts {
            if a.0 >= model.actions.len() || model.actions[a.0].state != s {
                out.push(Violation::ForeignAction {
                    state: s,
                    action: a,
                });
                continue;
            }
            if std::mem::replace(&mut seen[a.0], true) {
                out.push(Violation::DuplicateAction(a));
            }
            let dist = &model.actions[a.0].distribution;
            let mut targets = BTreeSet::new();
            for (t, p) in dist.entries() {
                if t.0 >= n {
                    out.push(Violation::TargetOutOfRange {
                        state: s,
                        action: a,
                        target: *t,
                    });
                }
                if *p <= Rational::zero() {
                    out.push(Violation::NonPositiveProbability {
                        state: s,
                        action: a,
                        target: *t,
                    });
                }
                if !targets.insert(*t) {
                    out.push(Violation::DuplicateTarget {
                        state: s,
                        action: a,
                        target: *t,
                    });
                }
            }
            let total = dist.total();
            if !total.is_one() {
                out.push(Violation::BadTotal {
                    state: s,
                    action: a,
                    total,
                });
            }
        }
    }
    out
}

/// A Markov chain: an MDP with exactly one enabled action per state.
#[derive(Debug, Clone, PartialEq)]
pub struct Mc(Mdp);

impl Mc {
    pub fn new(mdp: Mdp) -> Result<Self> {
        if let Some(s) = mdp.states().find(|s| mdp.enabled(*s).len() != 1) {
            return Err(Error::InvalidParameter(format!(
                "state {s} has {} actions; a Markov chain needs exactly one",
                mdp.enabled(s).len()
            )));
        }
        Ok(Mc(mdp))
    }

    pub fn mdp(&self) -> &Mdp {
        &self.0
    }

    pub fn into_mdp(self) -> Mdp {
        self.0
    }

    /// The single action of state `s`.
    pub fn action_of(&self, s: StateId) -> ActionId {
        self.0.enabled(s)[0]
    }

    pub fn distribution(&self, s: StateId) -> &Distribution {
        &self.0.action(self.action_of(s)).distribution
    }
}

/// Memoryless deterministic scheduler.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DetScheduler {
    pub choice: Vec<ActionId>,
}

impl DetScheduler {
    pub fn new(choice: Vec<ActionId>) -> Self {
        DetScheduler { choice }
    }

    /// Picks the labelled action for the listed states; every other state
    /// keeps its first enabled action.
    pub fn from_labels(model: &Mdp, labels: &[(usize, &str)]) -> Result<Self> {
        let mut choice: Vec<ActionId> = model.states().map(|s| model.enabled(s)[0]).collect();
        for &(s, label) in labels {
            let state = StateId(s);
            model.check_state(state)?;
            choice[s] = model.find_action(state, label).ok_or_else(|| {
                Error::InvalidParameter(format!("no action labelled {label:?} at {state}"))
            })?;
        }
        Ok(DetScheduler { choice })
    }

    pub fn get(&self, s: StateId) -> ActionId {
        self.choice[s.0]
    }

    pub fn check(&self, model: &Mdp) -> Result<()> {
        if self.choice.len() != model.state_count() {
            return Err(Error::StateCountMismatch {
                expected: model.state_count(),
                actual: self.choice.len(),
            });
        }
        for s in model.states() {
            if !model.is_enabled(s, self.choice[s.0]) {
                return Err(Error::ActionNotEnabled {
                    state: s,
                    action: self.choice[s.0],
                });
            }
        }
        Ok(())
    }

    pub fn as_permissive(&self) -> DetPermissiveScheduler {
        DetPermissiveScheduler {
            allowed: self.choice.iter().map(|a| vec![*a]).collect(),
        }
    }
}

/// Memoryless randomized scheduler.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RandScheduler {
    pub choice: Vec<Vec<(ActionId, Rational)>>,
}

impl RandScheduler {
    pub fn check(&self, model: &Mdp) -> Result<()> {
        if self.choice.len() != model.state_count() {
            return Err(Error::StateCountMismatch {
                expected: model.state_count(),
                actual: self.choice.len(),
            });
        }
        for s in model.states() {
            let mut total = Rational::zero();
            for (a, p) in &self.choice[s.0] {
                if !model.is_enabled(s, *a) {
                    return Err(Error::ActionNotEnabled {
                        state: s,
                        action: *a,
                    });
                }
                if *p < Rational::zero() {
                    return Err(Error::InvalidDistribution {
                        state: s,
                        reason: format!("negative weight on {a}"),
                    });
                }
                total += *p;
            }
            if !total.is_one() {
                return Err(Error::InvalidDistribution {
                    state: s,
                    reason: format!("weights sum to {total}"),
                });
            }
        }
        Ok(())
    }
}

impl From<&DetScheduler> for RandScheduler {
    fn from(sched: &DetScheduler) -> Self {
        RandScheduler {
            choice: sched
                .choice
                .iter()
                .map(|a| vec![(*a, Rational::one())])
                .collect(),
        }
    }
}

/// Deterministic permissive scheduler: a nonempty set of allowed actions per
/// state. Sets are kept sorted by action id.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DetPermissiveScheduler {
    pub allowed: Vec<Vec<ActionId>>,
}

impl DetPermissiveScheduler {
    pub fn new(mut allowed: Vec<Vec<ActionId>>) -> Self {
        for set in &mut allowed {
            set.sort();
            set.dedup();
        }
        DetPermissiveScheduler { allowed }
    }

    /// Allows every enabled action.
    pub fn full(model: &Mdp) -> Self {
        DetPermissiveScheduler {
            allowed: model.states().map(|s| model.enabled(s).to_vec()).collect(),
        }
    }

    pub fn allows(&self, s: StateId, a: ActionId) -> bool {
        self.allowed[s.0].binary_search(&a).is_ok()
    }

    pub fn allowed(&self, s: StateId) -> &[ActionId] {
        &self.allowed[s.0]
    }

    /// Number of compliant deterministic schedulers (saturating).
    pub fn scheduler_count(&self) -> u128 {
        self.allowed
            .iter()
            .fold(1u128, |acc, set| acc.saturating_mul(set.len() as u128))
    }

    pub fn allowed_count(&self) -> usize {
        self.allowed.iter().map(Vec::len).sum()
    }

    pub fn check(&self, model: &Mdp) -> Result<()> {
        if self.allowed.len() != model.state_count() {
            return Err(Error::StateCountMismatch {
                expected: model.state_count(),
                actual: self.allowed.len(),
            });
        }
        for s in model.states() {
            let set = &self.allowed[s.0];
            if set.is_empty() {
                return Err(Error::EmptyChoice(s));
            }
            if let Some(a) = set.iter().find(|a| !model.is_enabled(s, **a)) {
                return Err(Error::ActionNotEnabled {
                    state: s,
                    action: *a,
                });
            }
        }
        Ok(())
    }
}

/// Safety property: probability of eventually reaching `target` is at most `lambda`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SafetySpec {
    pub lambda: Rational,
    pub target: BTreeSet<StateId>,
}

impl SafetySpec {
    pub fn new(lambda: Rational, target: impl IntoIterator<Item = StateId>) -> Result<Self> {
        let target: BTreeSet<StateId> = target.into_iter().collect();
        if target.is_empty() {
            return Err(Error::InvalidSpec("safety target set is empty".into()));
        }
        if lambda < Rational::zero() || lambda > Rational::one() {
            return Err(Error::InvalidSpec(format!(
                "lambda {lambda} outside [0, 1]"
            )));
        }
        Ok(SafetySpec { lambda, target })
    }

    pub fn lambda_f64(&self) -> f64 {
        to_f64(&self.lambda)
    }

    pub fn target_mask(&self, n: usize) -> Vec<bool> {
        mask(&self.target, n)
    }
}

/// Performance property: expected cost to reach `goal` is at most `kappa`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PerformanceSpec {
    pub kappa: Rational,
    pub goal: BTreeSet<StateId>,
}

impl PerformanceSpec {
    pub fn new(kappa: Rational, goal: impl IntoIterator<Item = StateId>) -> Result<Self> {
        let goal: BTreeSet<StateId> = goal.into_iter().collect();
        if goal.is_empty() {
            return Err(Error::InvalidSpec("goal set is empty".into()));
        }
        if kappa < Rational::zero() {
            return Err(Error::InvalidSpec(format!("kappa {kappa} is negative")));
        }
        Ok(PerformanceSpec { kappa, goal })
    }

    pub fn kappa_f64(&self) -> f64 {
        to_f64(&self.kappa)
    }

    pub fn goal_mask(&self, n: usize) -> Vec<bool> {
        mask(&self.goal, n)
    }
}

pub fn mask(set: &BTreeSet<StateId>, n: usize) -> Vec<bool> {
    let mut m = vec![false; n];
    for s in set {
        if s.0 < n {
            m[s.0] = true;
        }
    }
    m
}

/// Per-action cost bounds plus the hidden true cost function.
///
/// All vectors are indexed by [`ActionId`]; the owning state is implied.
#[derive(Debug, Clone, PartialEq)]
pub struct CostModel {
    lower: Vec<f64>,
    upper: Vec<f64>,
    oracle: Option<Vec<f64>>,
}

impl CostModel {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, oracle: Option<Vec<f64>>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::InvalidParameter(
                "cost bound tables differ in length".into(),
            ));
        }
        for (i, (l, u)) in lower.iter().zip(&upper).enumerate() {
            if !(l.is_finite() && u.is_finite() && *l >= 0.0 && l <= u) {
                return Err(Error::InvalidParameter(format!(
                    "bounds [{l}, {u}] for action #{i} are not 0 <= l <= u"
                )));
            }
        }
        if let Some(costs) = &oracle {
            if costs.len() != lower.len() {
                return Err(Error::InvalidParameter(
                    "oracle table has wrong length".into(),
                ));
            }
            for (i, c) in costs.iter().enumerate() {
                if !(lower[i] <= *c && *c <= upper[i]) {
                    return Err(Error::CostOutOfBounds {
                        action: ActionId(i),
                        value: *c,
                        lower: lower[i],
                        upper: upper[i],
                    });
                }
            }
        }
        Ok(CostModel {
            lower,
            upper,
            oracle,
        })
    }

    /// Uniform bounds with a constant true cost on every action.
    pub fn uniform(model: &Mdp, lower: f64, upper: f64, cost: f64) -> Result<Self> {
        let n = model.action_table_len();
        CostModel::new(vec![lower; n], vec![upper; n], Some(vec![cost; n]))
    }

    pub fn lower(&self, a: ActionId) -> f64 {
        self.lower[a.0]
    }

    pub fn upper(&self, a: ActionId) -> f64 {
        self.upper[a.0]
    }

    pub fn lower_bounds(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper_bounds(&self) -> &[f64] {
        &self.upper
    }

    pub fn has_oracle(&self) -> bool {
        self.oracle.is_some()
    }

    /// True cost of executing `a`. Only the learning environment and test
    /// oracles should call this.
    pub fn true_cost(&self, a: ActionId) -> Result<f64> {
        self.oracle
            .as_ref()
            .map(|costs| costs[a.0])
            .ok_or(Error::MissingOracle)
    }

    pub fn true_costs(&self) -> Result<&[f64]> {
        self.oracle.as_deref().ok_or(Error::MissingOracle)
    }

    pub fn without_oracle(&self) -> CostModel {
        CostModel {
            lower: self.lower.clone(),
            upper: self.upper.clone(),
            oracle: None,
        }
    }

    pub fn with_oracle(&self, oracle: Vec<f64>) -> Result<CostModel> {
        CostModel::new(self.lower.clone(), self.upper.clone(), Some(oracle))
    }
}

/// One executed transition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step {
    pub state: StateId,
    pub action: ActionId,
    pub cost: f64,
    pub successor: StateId,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EpisodeTrace {
    pub steps: Vec<Step>,
}

impl EpisodeTrace {
    /// Checks chaining and positive transition probability of every step.
    pub fn is_consistent(&self, model: &Mdp) -> bool {
        let chained = self.steps.windows(2).all(|w| w[0].successor == w[1].state);
        chained
            && self.steps.iter().all(|st| {
                model.is_enabled(st.state, st.action)
                    && model
                        .action(st.action)
                        .distribution
                        .support()
                        .any(|t| t == st.successor)
            })
    }
}

/// The Markov chain induced by a (possibly randomized) scheduler.
///
/// Each state of the result carries one fresh action whose distribution is
/// the scheduler-weighted mixture. For deterministic schedulers prefer
/// [`induce_mc_det`], which keeps the original action identifiers.
pub fn induce_mc(model: &Mdp, sched: &RandScheduler) -> Result<Mc> {
    sched.check(model)?;
    let mut builder = MdpBuilder::new(model.state_count(), model.initial());
    for s in model.states() {
        let choice = &sched.choice[s.0];
        let mut mix = Vec::new();
        for (a, w) in choice {
            for (t, p) in model.action(*a).distribution.entries() {
                mix.push((*t, *w * *p));
            }
        }
        let label = match choice
            .iter()
            .filter(|(_, w)| !w.is_zero())
            .collect::<Vec<_>>()[..]
        {
            [(a, _)] => model.label(*a).to_string(),
            _ => "mix".to_string(),
        };
        builder.add_action(s, label, Distribution::normalized(mix));
    }
    Mc::new(builder.build_unchecked())
}

/// Deterministic special case: `P(s, s') = P(s, σ(s))(s')`; action ids are kept.
pub fn induce_mc_det(model: &Mdp, sched: &DetScheduler) -> Result<Mc> {
    sched.check(model)?;
    let enabled = sched.choice.iter().map(|a| vec![*a]).collect();
    Mc::new(Mdp::from_parts(
        model.initial(),
        enabled,
        model.actions().to_vec(),
    ))
}

/// The sub-MDP keeping exactly the allowed actions of `perm`.
pub fn restrict(model: &Mdp, perm: &DetPermissiveScheduler) -> Result<Mdp> {
    perm.check(model)?;
    let enabled = model
        .states()
        .map(|s| {
            model
                .enabled(s)
                .iter()
                .copied()
                .filter(|a| perm.allows(s, *a))
                .collect()
        })
        .collect();
    Ok(Mdp::from_parts(
        model.initial(),
        enabled,
        model.actions().to_vec(),
    ))
}

pub fn is_compliant(sched: &DetScheduler, perm: &DetPermissiveScheduler) -> Result<bool> {
    if sched.choice.len() != perm.allowed.len() {
        return Err(Error::StateCountMismatch {
            expected: perm.allowed.len(),
            actual: sched.choice.len(),
        });
    }
    Ok(sched
        .choice
        .iter()
        .enumerate()
        .all(|(s, a)| perm.allows(StateId(s), *a)))
}

pub const DEFAULT_ENUMERATION_CAP: u128 = 1_000_000;

/// Iterator over the Cartesian product of allowed sets, state-major
/// lexicographic (state 0 varies slowest).
#[derive(Debug, Clone)]
pub struct CompliantSchedulers {
    allowed: Vec<Vec<ActionId>>,
    digits: Vec<usize>,
    done: bool,
}

impl Iterator for CompliantSchedulers {
    type Item = DetScheduler;

    fn next(&mut self) -> Option<DetScheduler> {
        if self.done {
            return None;
        }
        let current = DetScheduler {
            choice: self
                .digits
                .iter()
                .zip(&self.allowed)
                .map(|(d, set)| set[*d])
                .collect(),
        };
        // advance the mixed-radix counter, last state fastest
        let mut i = self.digits.len();
        loop {
            if i == 0 {
                self.done = true;
                break;
            }
            i -= 1;
            self.digits[i] += 1;
            if self.digits[i] < self.allowed[i].len() {
                break;
            }
            self.digits[i] = 0;
        }
        Some(current)
    }
}

pub fn compliant_schedulers(perm: &DetPermissiveScheduler) -> Result<CompliantSchedulers> {
    compliant_schedulers_capped(perm, DEFAULT_ENUMERATION_CAP)
}

pub fn compliant_schedulers_capped(
    perm: &DetPermissiveScheduler,
    cap: u128,
) -> Result<CompliantSchedulers> {
    if let Some(s) = perm.allowed.iter().position(Vec::is_empty) {
        return Err(Error::EmptyChoice(StateId(s)));
    }
    let count = perm.scheduler_count();
    if count > cap {
        return Err(Error::CapExceeded { count, cap });
    }
    Ok(CompliantSchedulers {
        allowed: perm.allowed.clone(),
        digits: vec![0; perm.allowed.len()],
        done: perm.allowed.is_empty(),
    })
}

/// Synchronous product of a controllable MDP with an environment chain.
#[derive(Debug, Clone)]
pub struct Product {
    pub mdp: Mdp,
    pub env_states: usize,
    /// Original action of each product action.
    pub action_origin: Vec<ActionId>,
}

impl Product {
    pub fn index_of(&self, s: StateId, e: StateId) -> StateId {
        StateId(s.0 * self.env_states + e.0)
    }

    pub fn pair_of(&self, p: StateId) -> (StateId, StateId) {
        (
            StateId(p.0 / self.env_states),
            StateId(p.0 % self.env_states),
        )
    }
}

pub fn product(controllable: &Mdp, environment: &Mc) -> Result<Product> {
    for m in [controllable, environment.mdp()] {
        let violations = validate(m);
        if !violations.is_empty() {
            return Err(Error::InvalidModel(violations));
        }
    }
    let ne = environment.mdp().state_count();
    let n = controllable.state_count() * ne;
    let initial = StateId(controllable.initial().0 * ne + environment.mdp().initial().0);
    let mut builder = MdpBuilder::new(n, initial);
    let mut origin = Vec::new();
    for s in controllable.states() {
        for e in environment.mdp().states() {
            let env_dist = environment.distribution(e);
            for &a in controllable.enabled(s) {
                let act = controllable.action(a);
                let mut entries = Vec::new();
                for (t, p) in act.distribution.entries() {
                    for (et, ep) in env_dist.entries() {
                        entries.push((StateId(t.0 * ne + et.0), *p * *ep));
                    }
                }
                builder.add_action(
                    StateId(s.0 * ne + e.0),
                    act.label.clone(),
                    Distribution::normalized(entries),
                );
                origin.push(a);
            }
        }
    }
    Ok(Product {
        mdp: builder.build_unchecked(),
        env_states: ne,
        action_origin: origin,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchmarks::fig1;

    fn r(n: i128, d: i128) -> Rational {
        Rational::new(n, d)
    }

    #[test]
    fn parses_rationals_exactly() {
        assert_eq!(parse_rational("3/5"), Some(r(3, 5)));
        assert_eq!(parse_rational("0.6"), Some(r(3, 5)));
        assert_eq!(parse_rational("1"), Some(r(1, 1)));
        assert_eq!(parse_rational(".25"), Some(r(1, 4)));
        assert_eq!(parse_rational("-0.5"), Some(r(-1, 2)));
        assert_eq!(parse_rational("1/0"), None);
        assert_eq!(parse_rational("abc"), None);
        assert_eq!(parse_rational(""), None);
    }

    #[test]
    fn fig1_is_well_formed() {
        let inst = fig1(r(3, 2));
        assert!(validate(&inst.model).is_empty());
    }

    #[test]
    fn detects_bad_total() {
        let mut b = MdpBuilder::new(2, StateId(0));
        b.add_action(
            StateId(0),
            "a",
            Distribution::from_entries(vec![(StateId(0), r(1, 2)), (StateId(1), r(2, 5))]),
        );
        b.add_action(StateId(1), "b", Distribution::dirac(StateId(1)));
        let v = validate(&b.build_unchecked());
        assert_eq!(v.len(), 1);
        assert!(matches!(
            v[0],
            Violation::BadTotal {
                state: StateId(0),
                action: ActionId(0),
                ..
            }
        ));
    }

    #[test]
    fn detects_deadlock() {
        let mut b = MdpBuilder::new(2, StateId(0));
        b.add_action(StateId(0), "a", Distribution::dirac(StateId(1)));
        let v = validate(&b.build_unchecked());
        assert_eq!(v, vec![Violation::Deadlock(StateId(1))]);
    }

    #[test]
    fn induced_chain_of_sigma1() {
        let inst = fig1(r(3, 2));
        let m = &inst.model;
        let sigma1 = DetScheduler::from_labels(m, &[(0, "a"), (1, "c")]).unwrap();
        let mc = induce_mc_det(m, &sigma1).unwrap();
        assert_eq!(mc.distribution(StateId(0)).prob(StateId(1)), r(3, 5));
        assert_eq!(mc.distribution(StateId(1)).prob(StateId(2)), r(3, 5));
        let rand_mc = induce_mc(m, &RandScheduler::from(&sigma1)).unwrap();
        for s in m.states() {
            assert_eq!(rand_mc.distribution(s), mc.distribution(s));
        }
    }

    #[test]
    fn randomized_mixture() {
        let inst = fig1(r(3, 2));
        let m = &inst.model;
        let a = m.find_action(StateId(0), "a").unwrap();
        let b = m.find_action(StateId(0), "b").unwrap();
        let d = m.find_action(StateId(1), "d").unwrap();
        let mut choice: Vec<Vec<(ActionId, Rational)>> = m
            .states()
            .map(|s| vec![(m.enabled(s)[0], r(1, 1))])
            .collect();
        choice[0] = vec![(a, r(1, 2)), (b, r(1, 2))];
        choice[1] = vec![(d, r(1, 1))];
        let mc = induce_mc(m, &RandScheduler { choice }).unwrap();
        assert_eq!(mc.distribution(StateId(0)).prob(StateId(1)), r(1, 2));
        for s in m.states() {
            assert_eq!(mc.distribution(s).total(), r(1, 1));
        }
    }

    #[test]
    fn induce_rejects_disabled_action() {
        let inst = fig1(r(3, 2));
        let m = &inst.model;
        let c = m.find_action(StateId(1), "c").unwrap();
        let mut sched = DetScheduler::from_labels(m, &[]).unwrap();
        sched.choice[0] = c;
        assert!(matches!(
            induce_mc_det(m, &sched),
            Err(Error::ActionNotEnabled { .. })
        ));
        assert!(induce_mc_det(m, &DetScheduler::new(vec![ActionId(0)])).is_err());
    }

    #[test]
    fn restrict_full_and_singleton() {
        let inst = fig1(r(3, 2));
        let m = &inst.model;
        assert_eq!(&restrict(m, &DetPermissiveScheduler::full(m)).unwrap(), m);
        let sigma = DetScheduler::from_labels(m, &[(0, "b"), (1, "d")]).unwrap();
        let sub = restrict(m, &sigma.as_permissive()).unwrap();
        let mc = induce_mc_det(m, &sigma).unwrap();
        assert_eq!(&sub, mc.mdp());
        let mut empty = DetPermissiveScheduler::full(m);
        empty.allowed[1].clear();
        assert!(matches!(
            restrict(m, &empty),
            Err(Error::EmptyChoice(StateId(1)))
        ));
    }

    #[test]
    fn compliance_examples() {
        let inst = fig1(r(3, 2));
        let m = &inst.model;
        let sigma1 = DetScheduler::from_labels(m, &[(0, "a"), (1, "c")]).unwrap();
        let full = DetPermissiveScheduler::full(m);
        assert!(is_compliant(&sigma1, &full).unwrap());
        let mut safe = full.clone();
        safe.allowed[1] = vec![m.find_action(StateId(1), "d").unwrap()];
        assert!(!is_compliant(&sigma1, &safe).unwrap());
        let all: Vec<_> = compliant_schedulers(&safe).unwrap().collect();
        assert_eq!(all.len(), 2);
        assert_eq!(compliant_schedulers(&full).unwrap().count(), 4);
        assert_eq!(
            compliant_schedulers(&sigma1.as_permissive())
                .unwrap()
                .count(),
            1
        );
    }

    #[test]
    fn enumeration_cap() {
        let perm = DetPermissiveScheduler::new(vec![vec![ActionId(0), ActionId(1)]; 30]);
        assert!(matches!(
            compliant_schedulers(&perm),
            Err(Error::CapExceeded { .. })
        ));
    }

    #[test]
    fn enumeration_order_is_state_major() {
        let perm = DetPermissiveScheduler::new(vec![
            vec![ActionId(0), ActionId(1)],
            vec![ActionId(2), ActionId(3)],
        ]);
        let order: Vec<Vec<usize>> = compliant_schedulers(&perm)
            .unwrap()
            .map(|s| s.choice.iter().map(|a| a.0).collect())
            .collect();
        assert_eq!(order, vec![vec![0, 2], vec![0, 3], vec![1, 2], vec![1, 3]]);
    }

    fn two_state_mdp() -> Mdp {
        let mut b = MdpBuilder::new(2, StateId(0));
        b.add_action(
            StateId(0),
            "go",
            Distribution::from_entries(vec![(StateId(0), r(1, 3)), (StateId(1), r(2, 3))]),
        );
        b.add_action(StateId(0), "stay", Distribution::dirac(StateId(0)));
        b.add_action(StateId(1), "loop", Distribution::dirac(StateId(1)));
        b.build().unwrap()
    }

    #[test]
    fn product_with_unit_environment_is_isomorphic() {
        let m = two_state_mdp();
        let mut eb = MdpBuilder::new(1, StateId(0));
        eb.add_action(StateId(0), "e", Distribution::dirac(StateId(0)));
        let env = Mc::new(eb.build().unwrap()).unwrap();
        let p = product(&m, &env).unwrap();
        assert_eq!(p.mdp.state_count(), 2);
        for s in m.states() {
            let ps = p.index_of(s, StateId(0));
            assert_eq!(p.mdp.enabled(ps).len(), m.enabled(s).len());
            for (pa, a) in p.mdp.enabled(ps).iter().zip(m.enabled(s)) {
                assert_eq!(p.action_origin[pa.0], *a);
                assert_eq!(p.mdp.action(*pa).distribution, m.action(*a).distribution);
            }
        }
    }

    #[test]
    fn product_normalizes_and_marginalizes() {
        let m = two_state_mdp();
        let mut eb = MdpBuilder::new(2, StateId(1));
        eb.add_action(
            StateId(0),
            "e",
            Distribution::from_entries(vec![(StateId(0), r(1, 4)), (StateId(1), r(3, 4))]),
        );
        eb.add_action(StateId(1), "e", Distribution::dirac(StateId(0)));
        let env = Mc::new(eb.build().unwrap()).unwrap();
        let p = product(&m, &env).unwrap();
        assert_eq!(p.mdp.state_count(), 4);
        assert_eq!(p.mdp.initial(), StateId(1));
        assert!(validate(&p.mdp).is_empty());
        for ps in p.mdp.states() {
            for &pa in p.mdp.enabled(ps) {
                let orig = m.action(p.action_origin[pa.0]);
                for s2 in m.states() {
                    let marginal = (0..2)
                        .map(|e2| {
                            p.mdp
                                .action(pa)
                                .distribution
                                .prob(p.index_of(s2, StateId(e2)))
                        })
                        .fold(Rational::zero(), |x, y| x + y);
                    assert_eq!(marginal, orig.distribution.prob(s2));
                }
            }
        }
    }
}

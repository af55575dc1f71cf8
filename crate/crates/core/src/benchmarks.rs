//! Problem generators: the five-state conflict example, the exponential
//! conflict-set family, and three parameterised case studies (janitor grid,
//! line following, communicating explorer).

use std::collections::{BTreeSet, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{
    product, validate, CostModel, DetScheduler, Distribution, Mc, Mdp, MdpBuilder, PerformanceSpec,
    Rational, SafetySpec, StateId,
};

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceMeta {
    pub name: String,
    pub parameters: Vec<(String, String)>,
    pub states: usize,
    pub transitions: usize,
    pub branches: usize,
}

/// A complete synthesis problem.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemInstance {
    pub model: Mdp,
    pub costs: CostModel,
    pub safety: SafetySpec,
    pub performance: PerformanceSpec,
    pub meta: InstanceMeta,
}

impl ProblemInstance {
    pub fn new(
        name: &str,
        parameters: Vec<(String, String)>,
        model: Mdp,
        costs: CostModel,
        safety: SafetySpec,
        performance: PerformanceSpec,
    ) -> Result<Self> {
        let violations = validate(&model);
        if !violations.is_empty() {
            return Err(Error::InvalidModel(violations));
        }
        let n = model.state_count();
        if let Some(s) = safety
            .target
            .iter()
            .chain(&performance.goal)
            .find(|s| s.0 >= n)
        {
            return Err(Error::UnknownState(*s));
        }
        let meta = InstanceMeta {
            name: name.to_string(),
            parameters,
            states: n,
            transitions: model.transition_count(),
            branches: model.branch_count(),
        };
        Ok(ProblemInstance {
            model,
            costs,
            safety,
            performance,
            meta,
        })
    }
}

fn r(n: i128, d: i128) -> Rational {
    Rational::new(n, d)
}

fn param(name: &str, value: impl ToString) -> (String, String) {
    (name.to_string(), value.to_string())
}

/// The five-state example with conflicting choices at `s0` and `s1`.
///
/// Unit true costs on every action with bounds `[1, 2]`; safety target
/// `{s2}` with threshold 3/10; goal `{s2, s3, s4}`.
pub fn fig1(kappa: Rational) -> ProblemInstance {
    fig1_with_costs(kappa, None).expect("fixture is well-formed")
}

/// [`fig1`] with explicit per-label true costs and bounds `[0, 2]`.
///
/// `costs` lists (state, label, cost); unlisted actions cost 1.
pub fn fig1_with_costs(
    kappa: Rational,
    costs: Option<&[(usize, &str, f64)]>,
) -> Result<ProblemInstance> {
    let mut b = MdpBuilder::new(5, StateId(0));
    let two = |x: usize, px: Rational, y: usize, py: Rational| {
        Distribution::from_entries(vec![(StateId(x), px), (StateId(y), py)])
    };
    b.add_action(StateId(0), "a", two(1, r(3, 5), 3, r(2, 5)));
    b.add_action(StateId(0), "b", two(1, r(2, 5), 3, r(3, 5)));
    b.add_action(StateId(1), "c", two(2, r(3, 5), 4, r(2, 5)));
    b.add_action(StateId(1), "d", two(2, r(2, 5), 4, r(3, 5)));
    for s in 2..5 {
        b.add_action(StateId(s), "loop", Distribution::dirac(StateId(s)));
    }
    let model = b.build()?;
    let cost_model = match costs {
        None => CostModel::uniform(&model, 1.0, 2.0, 1.0)?,
        Some(list) => {
            let mut oracle = vec![1.0; model.action_table_len()];
            for &(s, label, c) in list {
                let a = model.find_action(StateId(s), label).ok_or_else(|| {
                    Error::InvalidParameter(format!("no action {label:?} at s{s}"))
                })?;
                oracle[a.0] = c;
            }
            let n = model.action_table_len();
            CostModel::new(vec![0.0; n], vec![2.0; n], Some(oracle))?
        }
    };
    ProblemInstance::new(
        "fig1",
        vec![param("kappa", kappa)],
        model,
        cost_model,
        SafetySpec::new(r(3, 10), [StateId(2)])?,
        PerformanceSpec::new(kappa, [StateId(2), StateId(3), StateId(4)])?,
    )
}

/// The chain `s0 .. sn` plus a sink: at each `si` either `ai` (half to
/// `s(i+1)`, half to the sink) or `bi` (surely to `s(i+1)`). Reaching `sn`
/// is bad; the threshold is `(1/2)^(n/2 + 1)`.
///
/// Its minimal conflict sets are the `n/2`-subsets of the `b` actions.
pub fn conflict_family(n: usize) -> Result<ProblemInstance> {
    if n < 2 || !n.is_multiple_of(2) {
        return Err(Error::InvalidParameter(format!(
            "n must be even and >= 2, got {n}"
        )));
    }
    let sink = StateId(n + 1);
    let mut b = MdpBuilder::new(n + 2, StateId(0));
    for i in 0..n {
        b.add_action(
            StateId(i),
            format!("a{i}"),
            Distribution::from_entries(vec![(StateId(i + 1), r(1, 2)), (sink, r(1, 2))]),
        );
        b.add_action(
            StateId(i),
            format!("b{i}"),
            Distribution::dirac(StateId(i + 1)),
        );
    }
    b.add_action(StateId(n), "c", Distribution::dirac(StateId(n)));
    b.add_action(sink, "d", Distribution::dirac(sink));
    let model = b.build()?;
    let lambda = Rational::new(1, 1i128 << (n / 2 + 1));
    let costs = CostModel::uniform(&model, 1.0, 1.0, 1.0)?;
    ProblemInstance::new(
        "conflict",
        vec![param("n", n)],
        model,
        costs,
        SafetySpec::new(lambda, [StateId(n)])?,
        PerformanceSpec::new(r(0, 1), [sink])?,
    )
}

const HEADINGS: [(i64, i64); 4] = [(0, -1), (1, 0), (0, 1), (-1, 0)];

/// Robot on a `width x height` grid avoiding a randomly walking janitor.
///
/// The robot state is (cell, heading) with actions `left`, `right` (turn in
/// place, cost 1) and `fwd` (move one cell, cost given by a seeded surface
/// map in `[1, 10]`). The janitor moves to a uniformly chosen neighbouring
/// cell every step. The model is the synchronous product of both; states
/// where robot and janitor share a cell are bad, states with the robot on
/// the far corner (and no collision) are absorbing goals.
pub fn janitor(
    width: usize,
    height: usize,
    lambda: Rational,
    seed: u64,
) -> Result<ProblemInstance> {
    janitor_with_kappa(width, height, lambda, seed, r(1000, 1))
}

pub fn janitor_with_kappa(
    width: usize,
    height: usize,
    lambda: Rational,
    seed: u64,
    kappa: Rational,
) -> Result<ProblemInstance> {
    if width < 2 || height < 2 {
        return Err(Error::InvalidParameter(format!(
            "janitor grid {width}x{height} is degenerate"
        )));
    }
    let cells = width * height;
    let cell = |x: usize, y: usize| y * width + x;
    let coords = |c: usize| (c % width, c / width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let surface: Vec<u32> = (0..cells).map(|_| rng.gen_range(1..=10)).collect();

    // robot: state = cell * 4 + heading, starting bottom-left facing east
    let mut robot = MdpBuilder::new(cells * 4, StateId(1));
    for c in 0..cells {
        let (x, y) = coords(c);
        for (h, &(dx, dy)) in HEADINGS.iter().enumerate() {
            let s = StateId(c * 4 + h);
            robot.add_action(s, "left", Distribution::dirac(StateId(c * 4 + (h + 3) % 4)));
            robot.add_action(
                s,
                "right",
                Distribution::dirac(StateId(c * 4 + (h + 1) % 4)),
            );
            let (nx, ny) = (x as i64 + dx, y as i64 + dy);
            if nx >= 0 && ny >= 0 && (nx as usize) < width && (ny as usize) < height {
                let nc = cell(nx as usize, ny as usize);
                robot.add_action(s, "fwd", Distribution::dirac(StateId(nc * 4 + h)));
            }
        }
    }
    let robot = robot.build()?;

    let janitor_start = cell(width / 2, height / 2);
    let mut jan = MdpBuilder::new(cells, StateId(janitor_start));
    for c in 0..cells {
        let (x, y) = coords(c);
        let neighbours: Vec<usize> = HEADINGS
            .iter()
            .filter_map(|(dx, dy)| {
                let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                (nx >= 0 && ny >= 0 && (nx as usize) < width && (ny as usize) < height)
                    .then(|| cell(nx as usize, ny as usize))
            })
            .collect();
        let k = neighbours.len() as i128;
        jan.add_action(
            StateId(c),
            "walk",
            Distribution::from_entries(
                neighbours
                    .into_iter()
                    .map(|t| (StateId(t), r(1, k)))
                    .collect(),
            ),
        );
    }
    let jan = Mc::new(jan.build()?)?;
    let prod = product(&robot, &jan)?;

    let goal_cell = cell(width - 1, height - 1);
    let n = prod.mdp.state_count();
    let mut bad = BTreeSet::new();
    let mut goal = BTreeSet::new();
    for p in 0..n {
        let (rs, js) = prod.pair_of(StateId(p));
        let rc = rs.0 / 4;
        if rc == js.0 {
            bad.insert(StateId(p));
        } else if rc == goal_cell {
            goal.insert(StateId(p));
        }
    }

    // rebuild with absorbing goals and per-action costs
    let mut b = MdpBuilder::new(n, prod.mdp.initial());
    let mut lower = Vec::new();
    let mut upper = Vec::new();
    let mut oracle = Vec::new();
    for p in prod.mdp.states() {
        if goal.contains(&p) {
            b.add_action(p, "done", Distribution::dirac(p));
            lower.push(0.0);
            upper.push(0.0);
            oracle.push(0.0);
            continue;
        }
        let (rs, _) = prod.pair_of(p);
        for &a in prod.mdp.enabled(p) {
            let act = prod.mdp.action(a);
            b.add_action(p, act.label.clone(), act.distribution.clone());
            if act.label == "fwd" {
                lower.push(1.0);
                upper.push(10.0);
                oracle.push(surface[rs.0 / 4] as f64);
            } else {
                lower.push(1.0);
                upper.push(1.0);
                oracle.push(1.0);
            }
        }
    }
    let model = b.build()?;
    let costs = CostModel::new(lower, upper, Some(oracle))?;
    ProblemInstance::new(
        "janitor",
        vec![
            param("width", width),
            param("height", height),
            param("lambda", lambda),
            param("seed", seed),
        ],
        model,
        costs,
        SafetySpec::new(lambda, bad)?,
        PerformanceSpec::new(kappa, goal)?,
    )
}

/// A machine advancing along a line of `length` positions with a lateral
/// offset in `[-max_distance, max_distance]`.
///
/// Speed `k` (1-based) advances `k` positions and shifts the offset by one
/// in either direction with total probability `k / (2 * speed_levels)`; its
/// cost is `speed_levels + 1 - k`. Offsets of magnitude `max_distance` are
/// bad. The last position is the goal; arriving there at the maximal offset
/// first requires a unit-cost `realign` step.
pub fn fol_line(
    length: usize,
    speed_levels: usize,
    max_distance: usize,
    lambda: Rational,
) -> Result<ProblemInstance> {
    fol_line_with_kappa(length, speed_levels, max_distance, lambda, r(1000, 1))
}

pub fn fol_line_with_kappa(
    length: usize,
    speed_levels: usize,
    max_distance: usize,
    lambda: Rational,
    kappa: Rational,
) -> Result<ProblemInstance> {
    if length < 2 || speed_levels < 2 || max_distance < 1 {
        return Err(Error::InvalidParameter(format!(
            "folline({length}, {speed_levels}, {max_distance}) is degenerate"
        )));
    }
    let width = 2 * max_distance + 1;
    let d = max_distance as i64;
    let index = |x: usize, o: i64| StateId(x * width + (o + d) as usize);
    let n = length * width;
    let end = length - 1;
    let mut b = MdpBuilder::new(n, index(0, 0));
    let mut lower = Vec::new();
    let mut upper = Vec::new();
    let mut oracle = Vec::new();
    let mut bad = BTreeSet::new();
    let mut goal = BTreeSet::new();
    for x in 0..length {
        for o in -d..=d {
            let s = index(x, o);
            if x == end {
                if o.abs() < d {
                    goal.insert(s);
                    b.add_action(s, "done", Distribution::dirac(s));
                    lower.push(0.0);
                    upper.push(0.0);
                    oracle.push(0.0);
                } else {
                    bad.insert(s);
                    b.add_action(
                        s,
                        "realign",
                        Distribution::dirac(index(x, o.signum() * (d - 1))),
                    );
                    lower.push(1.0);
                    upper.push(1.0);
                    oracle.push(1.0);
                }
                continue;
            }
            if o.abs() == d {
                bad.insert(s);
            }
            for k in 1..=speed_levels {
                let nx = (x + k).min(end);
                let deviate = r(k as i128, 2 * speed_levels as i128);
                let half = deviate / r(2, 1);
                let entries = vec![
                    (index(nx, (o - 1).max(-d)), half),
                    (index(nx, (o + 1).min(d)), half),
                    (index(nx, o), r(1, 1) - deviate),
                ];
                b.add_action(s, format!("speed{k}"), Distribution::normalized(entries));
                lower.push(1.0);
                upper.push(speed_levels as f64);
                oracle.push((speed_levels + 1 - k) as f64);
            }
        }
    }
    let model = b.build()?;
    let costs = CostModel::new(lower, upper, Some(oracle))?;
    ProblemInstance::new(
        "folline",
        vec![
            param("length", length),
            param("speeds", speed_levels),
            param("distance", max_distance),
            param("lambda", lambda),
        ],
        model,
        costs,
        SafetySpec::new(lambda, bad)?,
        PerformanceSpec::new(kappa, goal)?,
    )
}

/// Movement and communication costs of the explorer.
pub const COMEXP_MOVE_COST: f64 = 1.0;
pub const COMEXP_COMM_COST: f64 = 10.0;

/// Success probability of channel `channel` (0 or 1) at cell (x, y): falls
/// off by a tenth per grid step from the channel's relay, floored at 1/10.
pub fn comexp_success(width: usize, channel: usize, x: usize, y: usize) -> Rational {
    let (rx, ry) = if channel == 0 { (0, 0) } else { (width - 1, 0) };
    let dist = (x as i128 - rx as i128).abs() + (y as i128 - ry as i128).abs();
    r((9 - dist).max(1), 10)
}

/// Explorer crossing a grid that must communicate through one of two lossy
/// channels before moving too far without contact.
///
/// State is (cell, moves since last successful communication, attempts used
/// at this cell). Moving costs 1, each attempt costs 10 and at most
/// `attempts` tries are allowed per cell. A successful attempt resets the
/// counter. Away from the far corner, counters above `(width + height - 2) / 2`
/// are bad; the far corner is the goal whatever the counter. Only states
/// reachable from the start are kept.
pub fn com_exp(
    width: usize,
    height: usize,
    attempts: usize,
    lambda: Rational,
) -> Result<ProblemInstance> {
    com_exp_with_kappa(width, height, attempts, lambda, r(1000, 1))
}

pub fn com_exp_threshold(width: usize, height: usize) -> usize {
    (width + height - 2) / 2
}

pub fn com_exp_with_kappa(
    width: usize,
    height: usize,
    attempts: usize,
    lambda: Rational,
    kappa: Rational,
) -> Result<ProblemInstance> {
    if width < 2 || height < 2 || attempts < 1 {
        return Err(Error::InvalidParameter(format!(
            "comexp({width}, {height}, {attempts}) is degenerate"
        )));
    }
    let threshold = com_exp_threshold(width, height);
    type Key = (usize, usize, usize, usize); // x, y, counter, attempts used
    type Move = (String, bool, Vec<(Key, Rational)>);
    let goal_cell = (width - 1, height - 1);
    let successors = |k: Key| -> Vec<Move> {
        let (x, y, c, used) = k;
        if (x, y) == goal_cell {
            return vec![("done".into(), false, vec![(k, r(1, 1))])];
        }
        let mut out = Vec::new();
        let bumped = (c + 1).min(threshold + 1);
        let moves = [
            ("north", 0i64, -1i64),
            ("east", 1, 0),
            ("south", 0, 1),
            ("west", -1, 0),
        ];
        for (label, dx, dy) in moves {
            let (nx, ny) = (x as i64 + dx, y as i64 + dy);
            if nx >= 0 && ny >= 0 && (nx as usize) < width && (ny as usize) < height {
                out.push((
                    label.to_string(),
                    false,
                    vec![((nx as usize, ny as usize, bumped, 0), r(1, 1))],
                ));
            }
        }
        if used < attempts {
            for ch in 0..2 {
                let q = comexp_success(width, ch, x, y);
                out.push((
                    format!("comm{}", ch + 1),
                    true,
                    vec![((x, y, 0, used + 1), q), ((x, y, c, used + 1), r(1, 1) - q)],
                ));
            }
        }
        out
    };

    // breadth-first exploration from the start
    let start: Key = (0, 0, 0, 0);
    let mut keys = vec![start];
    let mut index = std::collections::HashMap::new();
    index.insert(start, 0usize);
    let mut queue = VecDeque::from([start]);
    while let Some(k) = queue.pop_front() {
        for (_, _, dist) in successors(k) {
            for (t, _) in dist {
                if let std::collections::hash_map::Entry::Vacant(e) = index.entry(t) {
                    e.insert(keys.len());
                    keys.push(t);
                    queue.push_back(t);
                }
            }
        }
    }

    let mut b = MdpBuilder::new(keys.len(), StateId(0));
    let mut lower = Vec::new();
    let mut upper = Vec::new();
    let mut oracle = Vec::new();
    let mut bad = BTreeSet::new();
    let mut goal = BTreeSet::new();
    for (i, &k) in keys.iter().enumerate() {
        let (x, y, c, _) = k;
        if (x, y) == goal_cell {
            goal.insert(StateId(i));
        } else if c > threshold {
            bad.insert(StateId(i));
        }
        for (label, comm, dist) in successors(k) {
            let entries = dist.into_iter().map(|(t, p)| (StateId(index[&t]), p));
            b.add_action(StateId(i), label.clone(), Distribution::normalized(entries));
            if label == "done" {
                lower.push(0.0);
                upper.push(0.0);
                oracle.push(0.0);
            } else if comm {
                lower.push(1.0);
                upper.push(20.0);
                oracle.push(COMEXP_COMM_COST);
            } else {
                lower.push(1.0);
                upper.push(2.0);
                oracle.push(COMEXP_MOVE_COST);
            }
        }
    }
    let model = b.build()?;
    let costs = CostModel::new(lower, upper, Some(oracle))?;
    ProblemInstance::new(
        "comexp",
        vec![
            param("width", width),
            param("height", height),
            param("attempts", attempts),
            param("lambda", lambda),
        ],
        model,
        costs,
        SafetySpec::new(lambda, bad)?,
        PerformanceSpec::new(kappa, goal)?,
    )
}

/// Whether the action is one of the explorer's channel attempts.
pub fn is_communication(label: &str) -> bool {
    label.starts_with("comm")
}

/// Whether `sched` attempts communication in some state it can reach.
pub fn communicates(model: &Mdp, sched: &DetScheduler) -> bool {
    let mut seen = vec![false; model.state_count()];
    let mut stack = vec![model.initial()];
    seen[model.initial().0] = true;
    while let Some(s) = stack.pop() {
        let a = sched.get(s);
        if is_communication(model.label(a)) {
            return true;
        }
        for t in model.action(a).distribution.support() {
            if !seen[t.0] {
                seen[t.0] = true;
                stack.push(t);
            }
        }
    }
    false
}

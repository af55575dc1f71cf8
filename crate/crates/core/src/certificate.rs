//! Exact certificates for the reachability bound of a fixed set of allowed
//! actions.
//!
//! A vector `p` with `p_s >= sum_t P(s,a,t) p_t` for every allowed action,
//! `p = 1` on the target and `p_init <= lambda` proves that the maximal
//! reachability probability is at most `lambda`. We build one from the
//! numeric solution, padded by a multiple of the expected time to absorption
//! so every inequality gets strict slack, round it up to a dyadic rational
//! and check it in integer arithmetic.

use num_integer::Integer;
use petgraph::algo::tarjan_scc;
use petgraph::graph::{DiGraph, NodeIndex};

use crate::analysis::{can_reach, max_reach_values, prob1_exists};
use crate::model::{ActionId, Mdp, Rational};

/// Denominator exponent of the rounded certificate.
const SCALE_BITS: u32 = 50;
/// Refutations need the numeric lower bound to clear `lambda` by this much.
const REFUTE_MARGIN: f64 = 1e-7;
const PADDINGS: [f64; 4] = [1e-10, 1e-9, 1e-8, 1e-7];
const HORIZON_LIMIT: f64 = 1e6;
const HORIZON_SWEEPS: usize = 100_000;

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Verdict {
    /// Exact certificate, one value per state.
    Safe(Vec<Rational>),
    /// The numeric bound exceeds `lambda` by a wide margin.
    Unsafe,
    Undecided,
}

pub(crate) fn decide(
    model: &Mdp,
    allowed: &[Vec<ActionId>],
    target: &[bool],
    lambda: &Rational,
) -> Verdict {
    let n = model.state_count();
    let init = model.initial().0;
    let values = max_reach_values(model, allowed, target);
    let lambda_f = *lambda.numer() as f64 / *lambda.denom() as f64;
    if values[init] > lambda_f + REFUTE_MARGIN {
        return Verdict::Unsafe;
    }
    let positive = can_reach(model, allowed, target);
    let one = prob1_exists(model, allowed, target);
    // Some(value) for pinned states, None for the free ones.
    let mut pinned: Vec<Option<bool>> = (0..n)
        .map(|s| {
            if target[s] || one[s] {
                Some(true)
            } else if !positive[s] {
                Some(false)
            } else {
                None
            }
        })
        .collect();
    let mut seen = vec![false; n];
    seen[init] = true;
    let mut stack = vec![init];
    while let Some(s) = stack.pop() {
        if pinned[s].is_some() {
            continue;
        }
        for a in &allowed[s] {
            for &(t, _) in model.successors(*a) {
                if !seen[t] {
                    seen[t] = true;
                    stack.push(t);
                }
            }
        }
    }
    for s in 0..n {
        if !seen[s] && pinned[s].is_none() {
            pinned[s] = Some(true);
        }
    }
    let free: Vec<usize> = (0..n).filter(|s| pinned[*s].is_none()).collect();
    // states of one end component share a single value, so actions that stay
    // inside it hold with equality and need no slack
    let node = end_component_nodes(model, allowed, &pinned, &free);
    let node_count = node.iter().flatten().max().map_or(0, |m| m + 1);
    let Some(horizon) = horizon(model, allowed, &node, node_count, &free) else {
        return Verdict::Undecided;
    };
    let mut node_value = vec![0.0f64; node_count];
    for &s in &free {
        let k = node[s].expect("free states have a node");
        node_value[k] = node_value[k].max(values[s]);
    }
    for pad in PADDINGS {
        let node_scaled: Vec<i128> = (0..node_count)
            .map(|k| {
                let v = (node_value[k] + pad * horizon[k]).min(1.0);
                ((v * (1u64 << SCALE_BITS) as f64).ceil() as i128).min(1i128 << SCALE_BITS)
            })
            .collect();
        let scaled: Vec<i128> = (0..n)
            .map(|s| match (pinned[s], node[s]) {
                (Some(true), _) => 1i128 << SCALE_BITS,
                (Some(false), _) => 0,
                (None, Some(k)) => node_scaled[k],
                (None, None) => unreachable!("free states have a node"),
            })
            .collect();
        let bound_ok = scaled[init]
            .checked_mul(*lambda.denom())
            .zip(lambda.numer().checked_mul(1i128 << SCALE_BITS))
            .is_some_and(|(l, r)| l <= r);
        if !bound_ok {
            return Verdict::Undecided;
        }
        if free.iter().all(|&s| {
            allowed[s]
                .iter()
                .all(|&a| dominates(model, a, &scaled, scaled[s]) == Some(true))
        }) {
            let den = 1i128 << SCALE_BITS;
            return Verdict::Safe(scaled.into_iter().map(|k| Rational::new(k, den)).collect());
        }
    }
    Verdict::Undecided
}

/// Maps each free state to a node of the quotient in which every maximal end
/// component among the free states is a single node.
fn end_component_nodes(
    model: &Mdp,
    allowed: &[Vec<ActionId>],
    pinned: &[Option<bool>],
    free: &[usize],
) -> Vec<Option<usize>> {
    let n = model.state_count();
    // actions that never leave the free states
    let mut acts: Vec<Vec<ActionId>> = (0..n)
        .map(|s| {
            if pinned[s].is_some() {
                return Vec::new();
            }
            allowed[s]
                .iter()
                .copied()
                .filter(|&a| {
                    model
                        .successors(a)
                        .iter()
                        .all(|(t, _)| pinned[*t].is_none())
                })
                .collect()
        })
        .collect();
    let mut comp = vec![usize::MAX; n];
    loop {
        let mut graph: DiGraph<usize, ()> = DiGraph::new();
        let idx: Vec<NodeIndex> = (0..n).map(|s| graph.add_node(s)).collect();
        for &s in free {
            for &a in &acts[s] {
                for &(t, _) in model.successors(a) {
                    graph.add_edge(idx[s], idx[t], ());
                }
            }
        }
        for (c, scc) in tarjan_scc(&graph).into_iter().enumerate() {
            for v in scc {
                comp[graph[v]] = c;
            }
        }
        let mut changed = false;
        let stuck: Vec<bool> = acts.iter().map(Vec::is_empty).collect();
        for &s in free {
            let before = acts[s].len();
            acts[s].retain(|&a| {
                model
                    .successors(a)
                    .iter()
                    .all(|(t, _)| comp[*t] == comp[s] && !stuck[*t])
            });
            changed |= acts[s].len() != before;
        }
        if !changed {
            break;
        }
    }
    let mut node = vec![None; n];
    let mut by_comp = std::collections::HashMap::new();
    let mut next = 0;
    for &s in free {
        let k = if acts[s].is_empty() {
            next += 1;
            next - 1
        } else {
            *by_comp.entry(comp[s]).or_insert_with(|| {
                next += 1;
                next - 1
            })
        };
        node[s] = Some(k);
    }
    node
}

/// Whether `lhs >= sum_t P(a,t) * scaled_t`, all in units of `2^-SCALE_BITS`.
/// `None` on overflow.
fn dominates(model: &Mdp, a: ActionId, scaled: &[i128], lhs: i128) -> Option<bool> {
    let entries = model.action(a).distribution.entries();
    let lcm = entries.iter().try_fold(1i128, |acc, (_, p)| {
        let l = acc.lcm(p.denom());
        (l < 1i128 << 60).then_some(l)
    })?;
    let mut sum: i128 = 0;
    for (t, p) in entries {
        let coeff = p.numer().checked_mul(lcm / p.denom())?;
        sum = sum.checked_add(coeff.checked_mul(scaled[t.0])?)?;
    }
    Some(lhs.checked_mul(lcm)? >= sum)
}

/// Approximate maximal expected number of steps before leaving the free
/// states, per quotient node, or `None` when it is unbounded or too large to
/// be useful. Actions that stay inside their node are ignored.
fn horizon(
    model: &Mdp,
    allowed: &[Vec<ActionId>],
    node: &[Option<usize>],
    node_count: usize,
    free: &[usize],
) -> Option<Vec<f64>> {
    let mut w = vec![0.0; node_count];
    for _ in 0..HORIZON_SWEEPS {
        let mut residual: f64 = 0.0;
        for &s in free {
            let k = node[s].expect("free states have a node");
            let best = allowed[s]
                .iter()
                .filter(|&&a| !model.successors(a).iter().all(|(t, _)| node[*t] == Some(k)))
                .map(|&a| {
                    1.0 + model
                        .successors(a)
                        .iter()
                        .filter_map(|&(t, p)| node[t].map(|m| p * w[m]))
                        .sum::<f64>()
                })
                .fold(0.0, f64::max);
            if best > w[k] {
                residual = residual.max(best - w[k]);
                w[k] = best;
            }
            if best > HORIZON_LIMIT {
                return None;
            }
        }
        if residual < 1e-3 {
            // one unit of slack absorbs the remaining error
            return Some(w.into_iter().map(|x| x + 1.0).collect());
        }
    }
    None
}

//! The iterative synthesize / learn / bound loop.

use std::time::Instant;

use crate::analysis::{enumerate_safe_schedulers, expected_cost_mc, min_expected_cost};
use crate::error::Result;
use crate::learning::{
    evaluate_exactly, learn, refine_costs, CostLedger, Environment, LearnConfig,
};
use crate::model::{
    induce_mc_det, restrict, CostModel, DetPermissiveScheduler, DetScheduler, Mdp, PerformanceSpec,
    SafetySpec,
};
use crate::synthesis::{synthesize_safe_permissive, Exclusions, SolverConfig, SynthesisStatus};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopPolicy {
    /// Stop once the best scheduler meets the performance bound.
    AtKappa,
    /// Keep going until optimality is certified or no scheduler is left.
    ToOptimal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    PerformanceMet,
    GloballyOptimal,
    Exhausted,
    IterationCap,
    SolverFailure,
}

impl Termination {
    pub fn as_str(self) -> &'static str {
        match self {
            Termination::PerformanceMet => "performance-met",
            Termination::GloballyOptimal => "globally-optimal",
            Termination::Exhausted => "exhausted",
            Termination::IterationCap => "iteration-cap",
            Termination::SolverFailure => "solver-failure",
        }
    }
}

impl std::fmt::Display for Termination {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoopConfig {
    pub solver: SolverConfig,
    pub learn: LearnConfig,
    pub max_iterations: usize,
    pub stop: StopPolicy,
    pub eps_opt: f64,
}

impl Default for LoopConfig {
    fn default() -> Self {
        LoopConfig {
            solver: SolverConfig::default(),
            learn: LearnConfig::default(),
            max_iterations: 100,
            stop: StopPolicy::AtKappa,
            eps_opt: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PhaseTimes {
    pub synthesis_ms: f64,
    pub learning_ms: f64,
    pub bounding_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub index: usize,
    pub permissive: DetPermissiveScheduler,
    pub learned: DetScheduler,
    /// Exact cost of this iteration's learned scheduler on observed costs.
    pub candidate: f64,
    /// Whether every transition on the candidate's support had been observed.
    pub certified: bool,
    /// Best cost found so far.
    pub upper: f64,
    pub lower: f64,
    /// Scheduler attaining `lower` on the refined costs.
    pub lower_witness: Option<DetScheduler>,
    pub elapsed_ms: f64,
    pub phases: PhaseTimes,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisReport {
    pub iterations: Vec<IterationRecord>,
    pub best: Option<DetScheduler>,
    pub best_cost: f64,
    pub termination: Termination,
    /// Solver diagnostics when `termination` is a failure.
    pub message: Option<String>,
    pub ledger: CostLedger,
}

impl SynthesisReport {
    pub fn final_lower(&self) -> Option<f64> {
        self.iterations.last().map(|r| r.lower)
    }
}

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1000.0
}

fn meets(a: f64, b: f64, eps: f64) -> bool {
    (a.is_infinite() && b.is_infinite()) || (a - b).abs() <= eps
}

pub fn run(
    model: &Mdp,
    costs: &CostModel,
    safety: &SafetySpec,
    performance: &PerformanceSpec,
    cfg: &LoopConfig,
) -> Result<SynthesisReport> {
    run_with_progress(model, costs, safety, performance, cfg, &mut |_| {})
}

/// As [`run`], calling `progress` after every completed iteration.
pub fn run_with_progress(
    model: &Mdp,
    costs: &CostModel,
    safety: &SafetySpec,
    performance: &PerformanceSpec,
    cfg: &LoopConfig,
    progress: &mut dyn FnMut(&IterationRecord),
) -> Result<SynthesisReport> {
    cfg.learn.check()?;
    cfg.solver.check()?;
    let start = Instant::now();
    let mut ledger = CostLedger::new(model.action_table_len());
    let mut exclusions = Exclusions::default();
    let mut iterations = Vec::new();
    let mut best: Option<DetScheduler> = None;
    let mut best_cost = f64::INFINITY;
    let mut best_certified = false;
    let kappa = performance.kappa_f64();

    for j in 1..=cfg.max_iterations {
        let t = Instant::now();
        let outcome = match synthesize_safe_permissive(model, safety, &exclusions, &cfg.solver) {
            Ok(o) => o,
            Err(e) => {
                return Ok(finish(
                    iterations,
                    best,
                    best_cost,
                    Termination::SolverFailure,
                    Some(e.to_string()),
                    ledger,
                ))
            }
        };
        let synthesis_ms = ms(t);
        let theta = match outcome.status {
            SynthesisStatus::Sat => outcome.scheduler.expect("sat outcome carries a scheduler"),
            SynthesisStatus::Unsat => {
                return Ok(finish(
                    iterations,
                    best,
                    best_cost,
                    Termination::Exhausted,
                    None,
                    ledger,
                ))
            }
            SynthesisStatus::Unknown(why) => {
                return Ok(finish(
                    iterations,
                    best,
                    best_cost,
                    Termination::SolverFailure,
                    Some(why),
                    ledger,
                ))
            }
        };

        let t = Instant::now();
        let sub = restrict(model, &theta)?;
        let seed = cfg.learn.seed.wrapping_add(j as u64);
        let mut env = Environment::new(&sub, costs, &performance.goal, seed, cfg.learn.step_cap)?;
        let learn_cfg = LearnConfig {
            seed,
            ..cfg.learn.clone()
        };
        let learned = learn(&mut env, &learn_cfg)?;
        ledger.merge(&learned.ledger);
        let eval = evaluate_exactly(
            &mut env,
            &learned.scheduler,
            &mut ledger,
            cfg.learn.evaluation_budget,
        )?;
        let learning_ms = ms(t);

        // restriction keeps state and action ids, so the scheduler carries over
        let sigma = learned.scheduler;
        if best.is_none()
            || eval.value < best_cost
            || (eval.value == best_cost && eval.complete && !best_certified)
        {
            best = Some(sigma.clone());
            best_cost = eval.value;
            best_certified = eval.complete;
        }

        let t = Instant::now();
        let refined = refine_costs(&ledger, costs);
        let relaxed = min_expected_cost(model, &refined, &performance.goal)?;
        let lower = relaxed.at(model.initial());
        let bounding_ms = ms(t);

        let record = IterationRecord {
            index: j,
            permissive: theta.clone(),
            learned: sigma.clone(),
            candidate: eval.value,
            certified: eval.complete,
            upper: best_cost,
            lower,
            lower_witness: relaxed.witness,
            elapsed_ms: ms(start),
            phases: PhaseTimes {
                synthesis_ms,
                learning_ms,
                bounding_ms,
            },
        };
        progress(&record);
        iterations.push(record);

        if best_certified && meets(best_cost, lower, cfg.eps_opt) {
            return Ok(finish(
                iterations,
                best,
                best_cost,
                Termination::GloballyOptimal,
                None,
                ledger,
            ));
        }
        if cfg.stop == StopPolicy::AtKappa && best_cost <= kappa {
            return Ok(finish(
                iterations,
                best,
                best_cost,
                Termination::PerformanceMet,
                None,
                ledger,
            ));
        }
        exclusions.schedulers.push(sigma);
        exclusions.assignments.push(theta);
    }
    Ok(finish(
        iterations,
        best,
        best_cost,
        Termination::IterationCap,
        None,
        ledger,
    ))
}

fn finish(
    iterations: Vec<IterationRecord>,
    best: Option<DetScheduler>,
    best_cost: f64,
    termination: Termination,
    message: Option<String>,
    ledger: CostLedger,
) -> SynthesisReport {
    SynthesisReport {
        iterations,
        best,
        best_cost,
        termination,
        message,
        ledger,
    }
}

/// Evaluates every safe scheduler under the true costs and keeps the cheapest.
pub fn naive_baseline(
    model: &Mdp,
    costs: &CostModel,
    safety: &SafetySpec,
    performance: &PerformanceSpec,
) -> Result<SynthesisReport> {
    let start = Instant::now();
    let truth = costs.true_costs()?.to_vec();
    let relaxed = min_expected_cost(model, &truth, &performance.goal)?;
    let lower = relaxed.at(model.initial());
    let mut iterations = Vec::new();
    let mut best: Option<DetScheduler> = None;
    let mut best_cost = f64::INFINITY;
    for (i, sigma) in enumerate_safe_schedulers(model, safety)?
        .into_iter()
        .enumerate()
    {
        let mc = induce_mc_det(model, &sigma)?;
        let value = expected_cost_mc(&mc, &truth, &performance.goal)?.at(model.initial());
        if best.is_none() || value < best_cost {
            best = Some(sigma.clone());
            best_cost = value;
        }
        iterations.push(IterationRecord {
            index: i + 1,
            permissive: sigma.as_permissive(),
            learned: sigma,
            candidate: value,
            certified: true,
            upper: best_cost,
            lower,
            lower_witness: relaxed.witness.clone(),
            elapsed_ms: ms(start),
            phases: PhaseTimes::default(),
        });
    }
    let termination = if best.is_some() && meets(best_cost, lower, 1e-6) {
        Termination::GloballyOptimal
    } else {
        Termination::Exhausted
    };
    Ok(finish(
        iterations,
        best,
        best_cost,
        termination,
        None,
        CostLedger::new(model.action_table_len()),
    ))
}

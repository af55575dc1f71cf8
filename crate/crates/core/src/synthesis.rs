//! Safe permissive scheduler synthesis through a linear real arithmetic
//! encoding, solved by an external SMT-LIB2 solver or by enumeration.
//!
//! Boolean `y_s_a` marks action `a` as allowed in `s`; real `p_s` bounds the
//! maximal probability of reaching the bad states from `s`. States with a
//! single enabled action have their choice fixed and get no variable.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write as _};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::{Duration, Instant};

use num_traits::{One, Zero};

use crate::analysis::{can_reach, max_reach_initial, max_reach_prob, min_reach_prob, EPS_PROB};
use crate::certificate::{decide, Verdict};
use crate::error::{Error, Result};
use crate::model::{
    parse_rational, restrict, to_f64, ActionId, DetPermissiveScheduler, DetScheduler, Mdp,
    Rational, SafetySpec, StateId,
};

pub const DEFAULT_SOLVER_COMMAND: &str = "z3 -in -smt2";
/// Assignments examined per check by the enumerative backend.
pub const ENUMERATION_CAP: u128 = 2_000_000;
const PREFILTER_SLACK: f64 = 1e-6;
const CHUNK: usize = 64;
const CANDIDATE_BUDGET: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverMode {
    External,
    EnumerativeFallback,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    /// Executable and arguments, split on whitespace.
    pub command: String,
    pub timeout: Duration,
    pub mode: SolverMode,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            command: DEFAULT_SOLVER_COMMAND.to_string(),
            timeout: Duration::from_secs(60),
            mode: SolverMode::External,
        }
    }
}

impl SolverConfig {
    pub fn enumerative() -> Self {
        SolverConfig {
            mode: SolverMode::EnumerativeFallback,
            ..SolverConfig::default()
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.timeout.is_zero() {
            return Err(Error::InvalidParameter(
                "solver timeout must be positive".into(),
            ));
        }
        if self.mode == SolverMode::External && self.command.split_whitespace().next().is_none() {
            return Err(Error::InvalidParameter("empty solver command".into()));
        }
        Ok(())
    }
}

/// Schedulers and assignments that later synthesis calls must avoid.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Exclusions {
    /// No returned permissive scheduler may allow all choices of these.
    pub schedulers: Vec<DetScheduler>,
    /// Returned permissive schedulers must differ from each of these.
    pub assignments: Vec<DetPermissiveScheduler>,
}

impl Exclusions {
    pub fn is_empty(&self) -> bool {
        self.schedulers.is_empty() && self.assignments.is_empty()
    }

    /// Whether `perm` respects every exclusion.
    pub fn admits(&self, perm: &DetPermissiveScheduler) -> bool {
        self.schedulers.iter().all(|s| {
            s.choice
                .iter()
                .enumerate()
                .any(|(i, a)| !perm.allows(StateId(i), *a))
        }) && self.assignments.iter().all(|t| t != perm)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoding {
    pub initial: StateId,
    /// Declared Boolean choice variables, in (state, action) order.
    pub choice_vars: Vec<(StateId, ActionId)>,
    /// The action of every single-choice state, whose variable is fixed to true.
    pub fixed: Vec<Option<ActionId>>,
    pub prob_vars: Vec<StateId>,
    pub constraints: Vec<String>,
    pub exclusions: Vec<String>,
}

pub fn y_name(s: StateId, a: ActionId) -> String {
    format!("y_{}_{}", s.0, a.0)
}

pub fn p_name(s: StateId) -> String {
    format!("p_{}", s.0)
}

fn real_literal(r: &Rational) -> String {
    let lit = |v: i128| {
        if v < 0 {
            format!("(- {}.0)", -v)
        } else {
            format!("{v}.0")
        }
    };
    if r.is_integer() {
        lit(*r.numer())
    } else {
        format!("(/ {} {})", lit(*r.numer()), lit(*r.denom()))
    }
}

fn disjunction(lits: Vec<String>) -> String {
    match lits.len() {
        0 => "false".to_string(),
        1 => lits.into_iter().next().unwrap(),
        _ => format!("(or {})", lits.join(" ")),
    }
}

pub fn build_encoding(model: &Mdp, spec: &SafetySpec, exclusions: &Exclusions) -> Result<Encoding> {
    let n = model.state_count();
    let target = spec.target_mask(n);
    if let Some(s) = spec.target.iter().find(|s| s.0 >= n) {
        return Err(Error::UnknownState(*s));
    }
    for sched in &exclusions.schedulers {
        sched.check(model)?;
    }
    for perm in &exclusions.assignments {
        perm.check(model)?;
    }
    let mut choice_vars = Vec::new();
    let mut fixed = vec![None; n];
    for s in model.states() {
        let acts = model.enabled(s);
        if acts.len() == 1 {
            fixed[s.0] = Some(acts[0]);
        } else {
            let mut sorted = acts.to_vec();
            sorted.sort();
            choice_vars.extend(sorted.into_iter().map(|a| (s, a)));
        }
    }

    let mut constraints = vec![format!(
        "(<= {} {})",
        p_name(model.initial()),
        real_literal(&spec.lambda)
    )];
    for s in model.states() {
        if fixed[s.0].is_none() {
            let lits = choice_vars
                .iter()
                .filter(|(t, _)| *t == s)
                .map(|(t, a)| y_name(*t, *a))
                .collect();
            constraints.push(disjunction(lits));
        }
    }
    for s in model.states().filter(|s| target[s.0]) {
        constraints.push(format!("(= {} 1.0)", p_name(s)));
    }
    for (s, a) in model.enabled_pairs() {
        if target[s.0] {
            continue;
        }
        let terms: Vec<String> = model
            .action(a)
            .distribution
            .entries()
            .iter()
            .map(|(t, p)| {
                if p.is_one() {
                    p_name(*t)
                } else {
                    format!("(* {} {})", real_literal(p), p_name(*t))
                }
            })
            .collect();
        let sum = if terms.len() == 1 {
            terms[0].clone()
        } else {
            format!("(+ {})", terms.join(" "))
        };
        let bound = format!("(>= {} {})", p_name(s), sum);
        if fixed[s.0].is_some() {
            constraints.push(bound);
        } else {
            constraints.push(format!("(=> {} {})", y_name(s, a), bound));
        }
    }
    for s in model.states() {
        constraints.push(format!("(and (<= 0.0 {0}) (<= {0} 1.0))", p_name(s)));
    }

    let mut excl = Vec::new();
    for sched in &exclusions.schedulers {
        let lits = model
            .states()
            .filter(|s| fixed[s.0].is_none())
            .map(|s| format!("(not {})", y_name(s, sched.get(s))))
            .collect();
        excl.push(disjunction(lits));
    }
    for perm in &exclusions.assignments {
        let lits = choice_vars
            .iter()
            .map(|(s, a)| {
                if perm.allows(*s, *a) {
                    format!("(not {})", y_name(*s, *a))
                } else {
                    y_name(*s, *a)
                }
            })
            .collect();
        excl.push(disjunction(lits));
    }

    Ok(Encoding {
        initial: model.initial(),
        choice_vars,
        fixed,
        prob_vars: model.states().collect(),
        constraints,
        exclusions: excl,
    })
}

fn emit_body(enc: &Encoding) -> String {
    let mut out = String::new();
    out.push_str("(set-option :produce-models true)\n(set-logic QF_LRA)\n");
    for (s, a) in &enc.choice_vars {
        let _ = writeln!(out, "(declare-const {} Bool)", y_name(*s, *a));
    }
    for s in &enc.prob_vars {
        let _ = writeln!(out, "(declare-const {} Real)", p_name(*s));
    }
    for c in enc.constraints.iter().chain(&enc.exclusions) {
        let _ = writeln!(out, "(assert {c})");
    }
    out
}

fn get_value_command(enc: &Encoding) -> String {
    let names: Vec<String> = enc
        .choice_vars
        .iter()
        .map(|(s, a)| y_name(*s, *a))
        .chain(enc.prob_vars.iter().map(|s| p_name(*s)))
        .collect();
    format!("(get-value ({}))", names.join(" "))
}

/// The full SMT-LIB2 script for `enc`.
pub fn emit_smtlib(enc: &Encoding) -> String {
    let mut out = emit_body(enc);
    out.push_str("(check-sat)\n");
    out.push_str(&get_value_command(enc));
    out.push('\n');
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SExpr {
    Atom(String),
    List(Vec<SExpr>),
}

/// Parses one s-expression, ignoring trailing whitespace.
pub fn parse_sexpr(text: &str) -> Option<SExpr> {
    fn tokens(text: &str) -> Vec<String> {
        let mut out = Vec::new();
        let mut cur = String::new();
        for ch in text.chars() {
            match ch {
                '(' | ')' => {
                    if !cur.is_empty() {
                        out.push(std::mem::take(&mut cur));
                    }
                    out.push(ch.to_string());
                }
                c if c.is_whitespace() => {
                    if !cur.is_empty() {
                        out.push(std::mem::take(&mut cur));
                    }
                }
                c => cur.push(c),
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
        out
    }
    fn parse(toks: &[String], pos: &mut usize) -> Option<SExpr> {
        let tok = toks.get(*pos)?;
        *pos += 1;
        match tok.as_str() {
            "(" => {
                let mut items = Vec::new();
                loop {
                    if toks.get(*pos)? == ")" {
                        *pos += 1;
                        return Some(SExpr::List(items));
                    }
                    items.push(parse(toks, pos)?);
                }
            }
            ")" => None,
            t => Some(SExpr::Atom(t.to_string())),
        }
    }
    let toks = tokens(text);
    let mut pos = 0;
    let e = parse(&toks, &mut pos)?;
    (pos == toks.len()).then_some(e)
}

/// Reads a real value as printed by SMT solvers: decimals, `(/ a b)`, `(- x)`.
pub fn parse_real(e: &SExpr) -> Option<Rational> {
    match e {
        SExpr::Atom(a) => parse_rational(a),
        SExpr::List(items) => match items.as_slice() {
            [SExpr::Atom(op), x] if op == "-" => parse_real(x).map(|v| -v),
            [SExpr::Atom(op), x, y] if op == "/" => {
                let d = parse_real(y)?;
                (!d.is_zero()).then(|| parse_real(x).map(|n| n / d))?
            }
            _ => None,
        },
    }
}

/// Variable valuations from a get-value response.
pub fn parse_model(e: &SExpr) -> Option<Vec<(String, SExpr)>> {
    let SExpr::List(pairs) = e else { return None };
    pairs
        .iter()
        .map(|p| match p {
            SExpr::List(kv) if kv.len() == 2 => match &kv[0] {
                SExpr::Atom(name) => Some((name.clone(), kv[1].clone())),
                _ => None,
            },
            _ => None,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SynthesisStatus {
    Sat,
    Unsat,
    /// Timeout or an inconclusive solver answer.
    Unknown(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisOutcome {
    pub status: SynthesisStatus,
    pub scheduler: Option<DetPermissiveScheduler>,
    /// Per-state reachability bounds from the satisfying model.
    pub probability_witness: Option<Vec<f64>>,
}

impl SynthesisOutcome {
    fn without_model(status: SynthesisStatus) -> Self {
        SynthesisOutcome {
            status,
            scheduler: None,
            probability_witness: None,
        }
    }
}

enum Check {
    Sat,
    Unsat,
    Unknown(String),
}

struct External {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<String>,
    timeout: Duration,
    dead: bool,
    cfg: SolverConfig,
}

impl External {
    fn spawn(cfg: &SolverConfig) -> Result<Self> {
        let mut parts = cfg.command.split_whitespace();
        let program = parts
            .next()
            .ok_or_else(|| Error::InvalidParameter("empty solver command".into()))?;
        let mut child = Command::new(program)
            .args(parts)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| Error::Solver(format!("cannot start `{}`: {e}", cfg.command)))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                let Ok(line) = line else { break };
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(External {
            child,
            stdin,
            lines: rx,
            timeout: cfg.timeout,
            dead: false,
            cfg: cfg.clone(),
        })
    }

    fn send(&mut self, text: &str) -> Result<()> {
        if self.dead {
            return Err(Error::Solver("solver session is closed".into()));
        }
        self.stdin
            .write_all(text.as_bytes())
            .and_then(|_| self.stdin.write_all(b"\n"))
            .and_then(|_| self.stdin.flush())
            .map_err(|e| {
                self.dead = true;
                Error::Solver(format!("writing to solver failed: {e}"))
            })
    }

    /// One complete response; `None` on timeout, after which the solver is killed.
    fn response(&mut self) -> Result<Option<String>> {
        let deadline = Instant::now() + self.timeout;
        let mut buf = String::new();
        let mut depth: i64 = 0;
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            match self.lines.recv_timeout(left) {
                Ok(line) => {
                    for ch in line.chars() {
                        match ch {
                            '(' => depth += 1,
                            ')' => depth -= 1,
                            _ => {}
                        }
                    }
                    if !buf.is_empty() {
                        buf.push('\n');
                    }
                    buf.push_str(&line);
                    if depth <= 0 && !buf.trim().is_empty() {
                        if buf.trim_start().starts_with("(error") {
                            return Err(Error::Solver(buf.trim().to_string()));
                        }
                        return Ok(Some(buf));
                    }
                }
                Err(RecvTimeoutError::Timeout) => {
                    self.kill();
                    return Ok(None);
                }
                Err(RecvTimeoutError::Disconnected) => {
                    self.dead = true;
                    return Err(Error::Solver("solver exited unexpectedly".into()));
                }
            }
        }
    }

    fn kill(&mut self) {
        self.dead = true;
        let _ = self.child.kill();
        let _ = self.child.wait();
    }

    fn check(&mut self) -> Result<Check> {
        self.send("(check-sat)")?;
        match self.response()? {
            None => Ok(Check::Unknown("timeout".into())),
            Some(r) => match r.trim() {
                "sat" => Ok(Check::Sat),
                "unsat" => Ok(Check::Unsat),
                "unknown" => Ok(Check::Unknown("solver returned unknown".into())),
                other => Err(Error::Solver(format!(
                    "unexpected check-sat response `{other}`"
                ))),
            },
        }
    }
}

impl Drop for External {
    fn drop(&mut self) {
        if !self.dead {
            let _ = self.send("(exit)");
            self.kill();
        }
    }
}

enum Backend {
    External(External),
    Enumerative,
}

type Model = (DetPermissiveScheduler, Vec<f64>);

/// A live solver session over one encoding.
pub struct Session<'a> {
    model: &'a Mdp,
    spec: &'a SafetySpec,
    exclusions: &'a Exclusions,
    enc: Encoding,
    target: Vec<bool>,
    backend: Backend,
}

impl<'a> Session<'a> {
    pub fn open(
        model: &'a Mdp,
        spec: &'a SafetySpec,
        exclusions: &'a Exclusions,
        cfg: &SolverConfig,
    ) -> Result<Self> {
        cfg.check()?;
        let enc = build_encoding(model, spec, exclusions)?;
        let backend = match cfg.mode {
            SolverMode::External => {
                let mut ext = External::spawn(cfg)?;
                ext.send(&emit_body(&enc))?;
                Backend::External(ext)
            }
            SolverMode::EnumerativeFallback => Backend::Enumerative,
        };
        Ok(Session {
            model,
            spec,
            exclusions,
            target: spec.target_mask(model.state_count()),
            enc,
            backend,
        })
    }

    pub fn encoding(&self) -> &Encoding {
        &self.enc
    }

    /// Value for each state that can be fixed without changing
    /// satisfiability under the assignment `allowed`: one for targets and
    /// for states unreachable from the initial state, zero for states that
    /// cannot reach the target. `None` marks a state left to the solver.
    fn pinned(&self, allowed: &[Vec<ActionId>]) -> Vec<Option<bool>> {
        let n = self.model.state_count();
        let positive = can_reach(self.model, allowed, &self.target);
        let mut seen = vec![false; n];
        let mut stack = vec![self.model.initial().0];
        seen[self.model.initial().0] = true;
        while let Some(s) = stack.pop() {
            if self.target[s] {
                continue;
            }
            for a in &allowed[s] {
                for &(t, _) in self.model.successors(*a) {
                    if !seen[t] {
                        seen[t] = true;
                        stack.push(t);
                    }
                }
            }
        }
        (0..n)
            .map(|s| {
                if self.target[s] {
                    Some(true)
                } else if !positive[s] {
                    Some(false)
                } else if !seen[s] {
                    Some(true)
                } else {
                    None
                }
            })
            .collect()
    }

    /// The encoding with every choice variable substituted by `allowed` and
    /// pinned states replaced by their constants, as a standalone script.
    fn reduced_script(&self, allowed: &[Vec<ActionId>], pinned: &[Option<bool>]) -> String {
        let value = |t: StateId| match pinned[t.0] {
            Some(true) => "1.0".to_string(),
            Some(false) => "0.0".to_string(),
            None => p_name(t),
        };
        let mut out = String::from("(set-logic QF_LRA)\n");
        for (s, pin) in pinned.iter().enumerate() {
            if pin.is_none() {
                let _ = writeln!(out, "(declare-fun {} () Real)", p_name(StateId(s)));
                let _ = writeln!(
                    out,
                    "(assert (and (<= 0.0 {0}) (<= {0} 1.0)))",
                    p_name(StateId(s))
                );
            }
        }
        let _ = writeln!(
            out,
            "(assert (<= {} {}))",
            value(self.model.initial()),
            real_literal(&self.spec.lambda)
        );
        for (s, pin) in pinned.iter().enumerate() {
            if pin.is_some() {
                continue;
            }
            for a in &allowed[s] {
                let terms: Vec<String> = self
                    .model
                    .action(*a)
                    .distribution
                    .entries()
                    .iter()
                    .map(|(t, p)| {
                        if p.is_one() {
                            value(*t)
                        } else {
                            format!("(* {} {})", real_literal(p), value(*t))
                        }
                    })
                    .collect();
                let sum = if terms.len() == 1 {
                    terms[0].clone()
                } else {
                    format!("(+ {})", terms.join(" "))
                };
                let _ = writeln!(out, "(assert (>= {} {}))", p_name(StateId(s)), sum);
            }
        }
        out
    }

    fn admissible(&self, allowed: &[Vec<ActionId>]) -> bool {
        safe_choices(self.model, self.spec, &self.target, allowed)
            && !violates_exclusions(self.exclusions, allowed)
    }

    fn numeric_model(&self, allowed: Vec<Vec<ActionId>>) -> Result<Model> {
        let perm = DetPermissiveScheduler::new(allowed);
        let sub = restrict(self.model, &perm)?;
        let probs = max_reach_prob(&sub, &self.spec.target)?.per_state;
        Ok((perm, probs))
    }

    /// Satisfiability with every choice variable fixed by `allowed`.
    fn check_exact(
        &mut self,
        allowed: &[Vec<ActionId>],
        want_model: bool,
    ) -> Result<(Check, Option<Model>)> {
        if let Backend::Enumerative = self.backend {
            if !self.admissible(allowed) {
                return Ok((Check::Unsat, None));
            }
            let model = if want_model {
                Some(self.numeric_model(allowed.to_vec())?)
            } else {
                None
            };
            return Ok((Check::Sat, model));
        }
        if allowed.iter().any(|acts| acts.is_empty())
            || violates_exclusions(self.exclusions, allowed)
        {
            return Ok((Check::Unsat, None));
        }
        match decide(self.model, allowed, &self.target, &self.spec.lambda) {
            Verdict::Safe(cert) => {
                let model = want_model.then(|| {
                    (
                        DetPermissiveScheduler::new(allowed.to_vec()),
                        cert.iter().map(to_f64).collect(),
                    )
                });
                return Ok((Check::Sat, model));
            }
            Verdict::Unsafe => return Ok((Check::Unsat, None)),
            Verdict::Undecided => {}
        }
        let pinned = self.pinned(allowed);
        let script = self.reduced_script(allowed, &pinned);
        let Backend::External(session) = &self.backend else {
            unreachable!()
        };
        let mut e = External::spawn(&session.cfg)?;
        e.send(&script)?;
        let check = e.check()?;
        if !(want_model && matches!(check, Check::Sat)) {
            return Ok((check, None));
        }
        let free: Vec<String> = (0..pinned.len())
            .filter(|s| pinned[*s].is_none())
            .map(|s| p_name(StateId(s)))
            .collect();
        let mut probs: Vec<f64> = pinned
            .iter()
            .map(|p| if *p == Some(true) { 1.0 } else { 0.0 })
            .collect();
        if !free.is_empty() {
            e.send(&format!("(get-value ({}))", free.join(" ")))?;
            let text = e
                .response()?
                .ok_or_else(|| Error::Solver("timeout in get-value".into()))?;
            let values = parse_sexpr(&text)
                .as_ref()
                .and_then(parse_model)
                .ok_or_else(|| Error::Solver(format!("malformed get-value response `{text}`")))?;
            for (name, v) in values {
                let s: usize = name
                    .trim_start_matches("p_")
                    .parse()
                    .map_err(|_| Error::Solver(format!("unexpected name {name}")))?;
                probs[s] = parse_real(&v)
                    .map(|r| to_f64(&r))
                    .ok_or_else(|| Error::Solver(format!("no real value for {name}")))?;
            }
        }
        Ok((
            check,
            Some((DetPermissiveScheduler::new(allowed.to_vec()), probs)),
        ))
    }

    /// Satisfiability with all choice variables free.
    fn check_free(&mut self) -> Result<(Check, Option<Model>)> {
        match &mut self.backend {
            Backend::Enumerative => {
                let res = enumerate_check(
                    self.model,
                    self.spec,
                    self.exclusions,
                    &self.enc,
                    &self.target,
                    &[],
                );
                match res {
                    Ok(Some(found)) => Ok((Check::Sat, Some(self.numeric_model(found)?))),
                    Ok(None) => Ok((Check::Unsat, None)),
                    Err(Error::CapExceeded { count, cap }) => Ok((
                        Check::Unknown(format!("enumeration of {count} assignments exceeds {cap}")),
                        None,
                    )),
                    Err(err) => Err(err),
                }
            }
            Backend::External(e) => {
                let check = e.check()?;
                let model = if matches!(check, Check::Sat) {
                    Some(self.read_model()?)
                } else {
                    None
                };
                Ok((check, model))
            }
        }
    }

    fn read_model(&mut self) -> Result<Model> {
        let Backend::External(e) = &mut self.backend else {
            return Err(Error::Solver("no solver model available".into()));
        };
        e.send(&get_value_command(&self.enc))?;
        let text = e
            .response()?
            .ok_or_else(|| Error::Solver("timeout in get-value".into()))?;
        let values = parse_sexpr(&text)
            .as_ref()
            .and_then(parse_model)
            .ok_or_else(|| Error::Solver(format!("malformed get-value response `{text}`")))?;
        let lookup: std::collections::HashMap<String, SExpr> = values.into_iter().collect();
        let mut allowed: Vec<Vec<ActionId>> = self
            .enc
            .fixed
            .iter()
            .map(|f| f.iter().copied().collect())
            .collect();
        for (s, a) in &self.enc.choice_vars {
            match lookup.get(&y_name(*s, *a)) {
                Some(SExpr::Atom(v)) if v == "true" => allowed[s.0].push(*a),
                Some(SExpr::Atom(v)) if v == "false" => {}
                _ => {
                    return Err(Error::Solver(format!(
                        "no Boolean value for {}",
                        y_name(*s, *a)
                    )))
                }
            }
        }
        let mut probs = vec![f64::NAN; self.model.state_count()];
        for s in &self.enc.prob_vars {
            let v = lookup
                .get(&p_name(*s))
                .and_then(parse_real)
                .ok_or_else(|| Error::Solver(format!("no real value for {}", p_name(*s))))?;
            probs[s.0] = to_f64(&v);
        }
        Ok((DetPermissiveScheduler::new(allowed), probs))
    }
}

fn violates_exclusions(ex: &Exclusions, allowed: &[Vec<ActionId>]) -> bool {
    let allows = |s: usize, a: ActionId| allowed[s].contains(&a);
    ex.schedulers
        .iter()
        .any(|sigma| sigma.choice.iter().enumerate().all(|(s, a)| allows(s, *a)))
        || repeats_assignment(ex, allowed)
}

fn repeats_assignment(ex: &Exclusions, allowed: &[Vec<ActionId>]) -> bool {
    ex.assignments.iter().any(|t| {
        t.allowed.iter().zip(allowed).all(|(x, y)| {
            let mut y = y.clone();
            y.sort();
            *x == y
        })
    })
}

fn safe_choices(
    model: &Mdp,
    spec: &SafetySpec,
    target: &[bool],
    choices: &[Vec<ActionId>],
) -> bool {
    max_reach_initial(model, choices, target) <= spec.lambda_f64() + EPS_PROB
}

/// A deterministic assignment that is numerically safe and respects the
/// exclusions: a minimal-reachability scheduler or one of its single-choice
/// variations. Used to steer the solver towards a model.
fn candidate_assignment(
    model: &Mdp,
    spec: &SafetySpec,
    ex: &Exclusions,
    target: &[bool],
) -> Option<Vec<Vec<ActionId>>> {
    let base = min_reach_prob(model, &spec.target).ok()?.witness?;
    let single = |c: &DetScheduler| c.choice.iter().map(|a| vec![*a]).collect::<Vec<_>>();
    let ok = |choices: &[Vec<ActionId>]| {
        max_reach_initial(model, choices, target) <= spec.lambda_f64()
            && !violates_exclusions(ex, choices)
    };
    let first = single(&base);
    if ok(&first) {
        return Some(first);
    }
    let mut budget = CANDIDATE_BUDGET;
    for (s, a) in model.enabled_pairs() {
        if a == base.get(s) {
            continue;
        }
        if budget == 0 {
            break;
        }
        budget -= 1;
        let mut choices = first.clone();
        choices[s.0] = vec![a];
        if ok(&choices) {
            return Some(choices);
        }
    }
    None
}

/// Brute-force satisfiability with the given choices forced true.
fn enumerate_check(
    model: &Mdp,
    spec: &SafetySpec,
    ex: &Exclusions,
    enc: &Encoding,
    target: &[bool],
    forced: &[(StateId, ActionId)],
) -> Result<Option<Vec<Vec<ActionId>>>> {
    let n = model.state_count();
    let mut base: Vec<Vec<ActionId>> = enc
        .fixed
        .iter()
        .map(|f| f.iter().copied().collect())
        .collect();
    for (s, a) in forced {
        if !base[s.0].contains(a) {
            base[s.0].push(*a);
        }
    }
    for b in &mut base {
        b.sort();
    }
    let open: Vec<usize> = (0..n).filter(|s| base[*s].is_empty()).collect();
    let radix: Vec<usize> = open
        .iter()
        .map(|s| model.enabled(StateId(*s)).len())
        .collect();
    let count: u128 = radix.iter().map(|r| *r as u128).product();
    if count > ENUMERATION_CAP {
        return Err(Error::CapExceeded {
            count,
            cap: ENUMERATION_CAP,
        });
    }

    // minimal completions: safety and scheduler exclusions are monotone in the allowed sets
    let mut digits = vec![0usize; open.len()];
    let mut blocked_only_by_assignments = false;
    loop {
        let mut choices = base.clone();
        for (k, s) in open.iter().enumerate() {
            choices[*s] = vec![model.enabled(StateId(*s))[digits[k]]];
        }
        if safe_choices(model, spec, target, &choices) {
            let ok_i = !ex.schedulers.iter().any(|sigma| {
                sigma
                    .choice
                    .iter()
                    .enumerate()
                    .all(|(s, a)| choices[s].contains(a))
            });
            if ok_i {
                if !repeats_assignment(ex, &choices) {
                    return Ok(Some(choices));
                }
                blocked_only_by_assignments = true;
            }
        }
        if !advance(&mut digits, &radix) {
            break;
        }
    }
    if !blocked_only_by_assignments {
        return Ok(None);
    }

    // supersets of the forced choices, needed only to escape verbatim exclusions
    let multi: Vec<usize> = (0..n).filter(|s| enc.fixed[*s].is_none()).collect();
    let free: Vec<Vec<ActionId>> = multi
        .iter()
        .map(|s| {
            let mut f: Vec<ActionId> = model
                .enabled(StateId(*s))
                .iter()
                .copied()
                .filter(|a| !base[*s].contains(a))
                .collect();
            f.sort();
            f
        })
        .collect();
    let radix: Vec<usize> = free.iter().map(|f| 1usize << f.len()).collect();
    let count: u128 = radix.iter().map(|r| *r as u128).product();
    if count > ENUMERATION_CAP {
        return Err(Error::CapExceeded {
            count,
            cap: ENUMERATION_CAP,
        });
    }
    let mut digits = vec![0usize; multi.len()];
    loop {
        let mut choices = base.clone();
        let mut nonempty = true;
        for (k, s) in multi.iter().enumerate() {
            for (bit, a) in free[k].iter().enumerate() {
                if digits[k] >> bit & 1 == 1 {
                    choices[*s].push(*a);
                }
            }
            choices[*s].sort();
            nonempty &= !choices[*s].is_empty();
        }
        if nonempty
            && !violates_exclusions(ex, &choices)
            && safe_choices(model, spec, target, &choices)
        {
            return Ok(Some(choices));
        }
        if !advance(&mut digits, &radix) {
            break;
        }
    }
    Ok(None)
}

fn advance(digits: &mut [usize], radix: &[usize]) -> bool {
    for k in (0..digits.len()).rev() {
        digits[k] += 1;
        if digits[k] < radix[k] {
            return true;
        }
        digits[k] = 0;
    }
    false
}

fn verify(session: &Session<'_>, perm: &DetPermissiveScheduler) -> Result<()> {
    perm.check(session.model)?;
    let value = max_reach_initial(session.model, &perm.allowed, &session.target);
    let lambda = session.spec.lambda_f64();
    if value > lambda + EPS_PROB {
        return Err(Error::Unverified { value, lambda });
    }
    if !session.exclusions.admits(perm) {
        return Err(Error::Solver(
            "satisfying model violates an exclusion clause".into(),
        ));
    }
    Ok(())
}

fn sat_outcome(session: &Session<'_>, (perm, probs): Model) -> Result<SynthesisOutcome> {
    verify(session, &perm)?;
    Ok(SynthesisOutcome {
        status: SynthesisStatus::Sat,
        scheduler: Some(perm),
        probability_witness: Some(probs),
    })
}

/// Checks satisfiability and extracts a verified permissive scheduler.
///
/// A numerically safe candidate assignment is tried first; the unconstrained
/// query runs only when it is missing or rejected.
pub fn solve(session: &mut Session<'_>) -> Result<SynthesisOutcome> {
    if let Some(candidate) = candidate_assignment(
        session.model,
        session.spec,
        session.exclusions,
        &session.target,
    ) {
        if let (Check::Sat, Some(model)) = session.check_exact(&candidate, true)? {
            return sat_outcome(session, model);
        }
    }
    match session.check_free()? {
        (Check::Unsat, _) => Ok(SynthesisOutcome::without_model(SynthesisStatus::Unsat)),
        (Check::Unknown(why), _) => Ok(SynthesisOutcome::without_model(SynthesisStatus::Unknown(
            why,
        ))),
        (Check::Sat, Some(model)) => sat_outcome(session, model),
        (Check::Sat, None) => Err(Error::Solver("satisfiable without a model".into())),
    }
}

/// Greedily enables further actions, in (state, action) order, while the
/// encoding stays satisfiable with all other choices disabled.
pub fn maximize_locally(
    session: &mut Session<'_>,
    base: SynthesisOutcome,
) -> Result<SynthesisOutcome> {
    let Some(perm) = base.scheduler.clone() else {
        return Err(Error::InvalidParameter(
            "local maximization needs a satisfiable base".into(),
        ));
    };
    let mut pending: Vec<(StateId, ActionId)> = session
        .enc
        .choice_vars
        .iter()
        .copied()
        .filter(|(s, a)| !perm.allows(*s, *a))
        .collect();
    if pending.is_empty() {
        return Ok(base);
    }
    let mut current = perm.allowed.clone();
    loop {
        let mut greedy = Greedy {
            session,
            current: &mut current,
            rejected: Vec::new(),
            retry: false,
        };
        let res = pending.chunks(CHUNK).try_for_each(|c| greedy.try_chunk(c));
        let (rejected, retry) = (greedy.rejected, greedy.retry);
        if res.is_err() {
            // keep what has been accepted so far if it still verifies
            let partial = DetPermissiveScheduler::new(current);
            return Ok(match verify(session, &partial) {
                Ok(()) => SynthesisOutcome {
                    scheduler: Some(partial),
                    ..base
                },
                Err(_) => base,
            });
        }
        let progress = rejected.len() < pending.len();
        pending = rejected;
        // a verbatim exclusion may unblock once more actions are enabled
        if !(retry && progress) {
            break;
        }
    }
    match session.check_exact(&current, true)? {
        (Check::Sat, Some(model)) => sat_outcome(session, model),
        _ => Err(Error::Solver(
            "accepted choices became unsatisfiable".into(),
        )),
    }
}

struct Greedy<'s, 'a> {
    session: &'s mut Session<'a>,
    current: &'s mut Vec<Vec<ActionId>>,
    rejected: Vec<(StateId, ActionId)>,
    retry: bool,
}

impl Greedy<'_, '_> {
    fn try_chunk(&mut self, chunk: &[(StateId, ActionId)]) -> Result<()> {
        if chunk.is_empty() {
            return Ok(());
        }
        let mut trial = self.current.clone();
        for (s, a) in chunk {
            trial[s.0].push(*a);
            trial[s.0].sort();
        }
        let session = &*self.session;
        let unsafe_or_covering = max_reach_initial(session.model, &trial, &session.target)
            > session.spec.lambda_f64() + PREFILTER_SLACK
            || session.exclusions.schedulers.iter().any(|sigma| {
                sigma
                    .choice
                    .iter()
                    .enumerate()
                    .all(|(s, a)| trial[s].contains(a))
            });
        let accepted = if unsafe_or_covering {
            false
        } else if repeats_assignment(session.exclusions, &trial) {
            self.retry |= chunk.len() == 1;
            false
        } else {
            matches!(self.session.check_exact(&trial, false)?.0, Check::Sat)
        };
        if accepted {
            *self.current = trial;
        } else if chunk.len() == 1 {
            self.rejected.push(chunk[0]);
        } else {
            let (left, right) = chunk.split_at(chunk.len() / 2);
            self.try_chunk(left)?;
            self.try_chunk(right)?;
        }
        Ok(())
    }
}

/// Encodes, solves and locally maximizes in one solver session.
pub fn synthesize_safe_permissive(
    model: &Mdp,
    spec: &SafetySpec,
    exclusions: &Exclusions,
    cfg: &SolverConfig,
) -> Result<SynthesisOutcome> {
    let mut session = Session::open(model, spec, exclusions, cfg)?;
    let base = solve(&mut session)?;
    if base.status != SynthesisStatus::Sat {
        return Ok(base);
    }
    maximize_locally(&mut session, base)
}

/// Whether a solver can be launched with `cfg` and answers a trivial query.
pub fn solver_available(cfg: &SolverConfig) -> bool {
    let Ok(mut ext) = External::spawn(cfg) else {
        return false;
    };
    ext.send("(set-logic QF_LRA)").is_ok() && matches!(ext.check(), Ok(Check::Sat))
}

/// Permissive schedulers that differ from `perm` by one extra allowed action
/// and still satisfy the spec and exclusions.
pub fn single_extensions(
    model: &Mdp,
    spec: &SafetySpec,
    exclusions: &Exclusions,
    perm: &DetPermissiveScheduler,
) -> Vec<(StateId, ActionId)> {
    let target = spec.target_mask(model.state_count());
    let mut out = Vec::new();
    for (s, a) in model.enabled_pairs() {
        if perm.allows(s, a) {
            continue;
        }
        let mut allowed = perm.allowed.clone();
        allowed[s.0].push(a);
        let ext = DetPermissiveScheduler::new(allowed);
        if safe_choices(model, spec, &target, &ext.allowed) && exclusions.admits(&ext) {
            out.push((s, a));
        }
    }
    out
}

/// All deterministic permissive assignments that are safe and respect the
/// exclusions, by exhaustive search (small models only).
pub fn exhaustive_assignments(
    model: &Mdp,
    spec: &SafetySpec,
    exclusions: &Exclusions,
    cap: u128,
) -> Result<Vec<DetPermissiveScheduler>> {
    let target = spec.target_mask(model.state_count());
    let radix: Vec<usize> = model
        .states()
        .map(|s| (1usize << model.enabled(s).len()) - 1)
        .collect();
    let count: u128 = radix.iter().map(|r| *r as u128).product();
    if count > cap {
        return Err(Error::CapExceeded { count, cap });
    }
    let mut digits = vec![0usize; radix.len()];
    let mut out = Vec::new();
    loop {
        let allowed: Vec<Vec<ActionId>> = model
            .states()
            .map(|s| {
                let mask = digits[s.0] + 1;
                model
                    .enabled(s)
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| mask >> i & 1 == 1)
                    .map(|(_, a)| *a)
                    .collect()
            })
            .collect();
        let perm = DetPermissiveScheduler::new(allowed);
        if safe_choices(model, spec, &target, &perm.allowed) && exclusions.admits(&perm) {
            out.push(perm);
        }
        if !advance(&mut digits, &radix) {
            break;
        }
    }
    Ok(out)
}

/// Action sets of `perm` at each state, by label, for display.
pub fn describe(model: &Mdp, perm: &DetPermissiveScheduler) -> Vec<(StateId, BTreeSet<String>)> {
    model
        .states()
        .map(|s| {
            (
                s,
                perm.allowed(s)
                    .iter()
                    .map(|a| model.label(*a).to_string())
                    .collect(),
            )
        })
        .collect()
}

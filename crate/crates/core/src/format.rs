//! Line-oriented text format for problem instances.
//!
//! ```text
//! format 1
//! name fig1
//! param kappa 3/2
//! states 5
//! initial 0
//! action 0 a : 1 3/5, 3 2/5
//! cost 0 a 1 2
//! oracle 0 a 1
//! safety 3/10 : 2
//! performance 3/2 : 2 3 4
//! ```
//!
//! Blank lines and lines starting with `#` are ignored. Probabilities and
//! thresholds accept integers, decimals and `num/den`; they are printed as
//! `num/den`. Every action needs a `cost` line; `oracle` lines are optional
//! but must cover all actions when present.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::benchmarks::ProblemInstance;
use crate::error::{Error, Result};
use crate::model::{
    format_rational, parse_rational, ActionId, CostModel, Distribution, Mdp, MdpBuilder,
    PerformanceSpec, Rational, SafetySpec, StateId,
};

pub const FORMAT_VERSION: u32 = 1;

fn perr(line: usize, column: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        column,
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy)]
struct Pos {
    line: usize,
    column: usize,
}

impl Pos {
    fn err(self, message: impl Into<String>) -> Error {
        perr(self.line, self.column, message)
    }
}

#[derive(Debug, Clone)]
struct Token<'t> {
    text: &'t str,
    pos: Pos,
}

fn tokenize<'t>(line_no: usize, line: &'t str) -> Vec<Token<'t>> {
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    let push = |out: &mut Vec<Token<'t>>, from: usize, to: usize| {
        out.push(Token {
            text: &line[from..to],
            pos: Pos {
                line: line_no,
                column: line[..from].chars().count() + 1,
            },
        })
    };
    for (i, ch) in line.char_indices() {
        if ch.is_whitespace() || ch == ',' || ch == ':' {
            if let Some(s) = start.take() {
                push(&mut out, s, i);
            }
            if ch == ',' || ch == ':' {
                push(&mut out, i, i + 1);
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        push(&mut out, s, line.len());
    }
    out
}

struct Cursor<'t> {
    toks: Vec<Token<'t>>,
    i: usize,
    end: Pos,
}

impl<'t> Cursor<'t> {
    fn next(&mut self, what: &str) -> Result<Token<'t>> {
        let t = self
            .toks
            .get(self.i)
            .cloned()
            .ok_or_else(|| self.end.err(format!("expected {what}")))?;
        self.i += 1;
        Ok(t)
    }

    fn peek(&self) -> Option<&Token<'t>> {
        self.toks.get(self.i)
    }

    fn expect(&mut self, sym: &str) -> Result<()> {
        let t = self.next(&format!("`{sym}`"))?;
        if t.text != sym {
            return Err(t.pos.err(format!("expected `{sym}`, found `{}`", t.text)));
        }
        Ok(())
    }

    fn usize(&mut self, what: &str) -> Result<(usize, Pos)> {
        let t = self.next(what)?;
        t.text
            .parse::<usize>()
            .map(|v| (v, t.pos))
            .map_err(|_| t.pos.err(format!("expected {what}, found `{}`", t.text)))
    }

    fn rational(&mut self, what: &str) -> Result<(Rational, Pos)> {
        let t = self.next(what)?;
        parse_rational(t.text).map(|v| (v, t.pos)).ok_or_else(|| {
            t.pos.err(format!(
                "expected {what} (integer, decimal or num/den), found `{}`",
                t.text
            ))
        })
    }

    fn real(&mut self, what: &str) -> Result<(f64, Pos)> {
        let t = self.next(what)?;
        match t.text.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok((v, t.pos)),
            _ => Err(t
                .pos
                .err(format!("expected finite {what}, found `{}`", t.text))),
        }
    }

    fn label(&mut self) -> Result<Token<'t>> {
        let t = self.next("action label")?;
        if t.text == ":" || t.text == "," {
            return Err(t.pos.err("expected action label"));
        }
        Ok(t)
    }

    fn rest(&mut self) -> Vec<Token<'t>> {
        let out = self.toks[self.i..].to_vec();
        self.i = self.toks.len();
        out
    }

    fn done(&self) -> Result<()> {
        match self.peek() {
            None => Ok(()),
            Some(t) => Err(t.pos.err(format!("unexpected `{}`", t.text))),
        }
    }
}

struct ActionLine {
    state: usize,
    label: String,
    pos: Pos,
    dist: Vec<(StateId, Rational)>,
}

fn state_list(cur: &mut Cursor<'_>, n: usize) -> Result<Vec<StateId>> {
    let mut out = Vec::new();
    for t in cur.rest() {
        let s: usize = t.text.parse().map_err(|_| {
            t.pos
                .err(format!("expected state index, found `{}`", t.text))
        })?;
        if s >= n {
            return Err(t
                .pos
                .err(format!("state {s} out of range (model has {n} states)")));
        }
        out.push(StateId(s));
    }
    Ok(out)
}

fn lookup(
    index: &HashMap<(usize, String), ActionId>,
    state: usize,
    label: &Token<'_>,
) -> Result<ActionId> {
    index
        .get(&(state, label.text.to_string()))
        .copied()
        .ok_or_else(|| {
            label
                .pos
                .err(format!("no action `{}` at state {state}", label.text))
        })
}

fn action_index(model: &Mdp) -> HashMap<(usize, String), ActionId> {
    model
        .enabled_pairs()
        .map(|(s, a)| ((s.0, model.label(a).to_string()), a))
        .collect()
}

fn check_version(cur: &mut Cursor<'_>) -> Result<()> {
    let (v, pos) = cur.usize("format version")?;
    if v != FORMAT_VERSION as usize {
        return Err(pos.err(format!("unsupported format version {v}")));
    }
    cur.done()
}

/// Parses a problem instance.
pub fn parse_instance(text: &str) -> Result<ProblemInstance> {
    let mut version_seen = false;
    let mut name = String::new();
    let mut params: Vec<(String, String)> = Vec::new();
    let mut states: Option<(usize, Pos)> = None;
    let mut initial: Option<(usize, Pos)> = None;
    let mut actions: Vec<ActionLine> = Vec::new();
    let mut cost_lines: Vec<(usize, Token<'_>, f64, f64, Pos)> = Vec::new();
    let mut oracle_lines: Vec<(usize, Token<'_>, f64)> = Vec::new();
    let mut safety: Option<(Rational, Vec<StateId>, Pos)> = None;
    let mut performance: Option<(Rational, Vec<StateId>, Pos)> = None;
    let mut last = Pos { line: 1, column: 1 };

    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let trimmed = raw.trim_start();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let toks = tokenize(line_no, raw);
        let end = Pos {
            line: line_no,
            column: raw.chars().count() + 1,
        };
        last = end;
        let mut cur = Cursor { toks, i: 0, end };
        let key = cur.next("directive")?;
        if !version_seen && key.text != "format" {
            return Err(key.pos.err("file must start with `format <version>`"));
        }
        let need_states = |pos: Pos| {
            states
                .map(|s| s.0)
                .ok_or_else(|| pos.err("`states` must come first"))
        };
        match key.text {
            "format" => {
                if version_seen {
                    return Err(key.pos.err("duplicate `format`"));
                }
                check_version(&mut cur)?;
                version_seen = true;
            }
            "name" => {
                let rest = cur.rest();
                if rest.len() != 1 {
                    return Err(key.pos.err("`name` takes one word"));
                }
                name = rest[0].text.to_string();
            }
            "param" => {
                let k = cur.next("parameter name")?;
                let v = cur.next("parameter value")?;
                cur.done()?;
                params.push((k.text.to_string(), v.text.to_string()));
            }
            "states" => {
                if states.is_some() {
                    return Err(key.pos.err("duplicate `states`"));
                }
                let (n, pos) = cur.usize("state count")?;
                if n == 0 {
                    return Err(pos.err("state count must be positive"));
                }
                cur.done()?;
                states = Some((n, key.pos));
            }
            "initial" => {
                let n = need_states(key.pos)?;
                let (s, pos) = cur.usize("initial state")?;
                if s >= n {
                    return Err(pos.err(format!("state {s} out of range")));
                }
                cur.done()?;
                initial = Some((s, key.pos));
            }
            "action" => {
                let n = need_states(key.pos)?;
                let (s, spos) = cur.usize("state index")?;
                if s >= n {
                    return Err(spos.err(format!("state {s} out of range")));
                }
                let label = cur.label()?;
                cur.expect(":")?;
                let mut dist = Vec::new();
                let mut total = Rational::from_integer(0);
                loop {
                    let (t, tpos) = cur.usize("successor state")?;
                    if t >= n {
                        return Err(tpos.err(format!("state {t} out of range")));
                    }
                    if dist.iter().any(|(x, _): &(StateId, Rational)| x.0 == t) {
                        return Err(tpos.err(format!("successor {t} listed twice")));
                    }
                    let (p, ppos) = cur.rational("probability")?;
                    if p <= Rational::from_integer(0) || p > Rational::from_integer(1) {
                        return Err(
                            ppos.err(format!("probability {} not in (0, 1]", format_rational(&p)))
                        );
                    }
                    total += p;
                    dist.push((StateId(t), p));
                    match cur.peek() {
                        None => break,
                        Some(_) => cur.expect(",")?,
                    }
                }
                if total != Rational::from_integer(1) {
                    return Err(label.pos.err(format!(
                        "probabilities sum to {}, not 1",
                        format_rational(&total)
                    )));
                }
                if actions
                    .iter()
                    .any(|a| a.state == s && a.label == label.text)
                {
                    return Err(label
                        .pos
                        .err(format!("duplicate action `{}` at state {s}", label.text)));
                }
                actions.push(ActionLine {
                    state: s,
                    label: label.text.to_string(),
                    pos: key.pos,
                    dist,
                });
            }
            "cost" => {
                need_states(key.pos)?;
                let (s, _) = cur.usize("state index")?;
                let label = cur.label()?;
                let (l, _) = cur.real("lower bound")?;
                let (u, upos) = cur.real("upper bound")?;
                cur.done()?;
                if l < 0.0 || l > u {
                    return Err(upos.err(format!("invalid bounds [{l}, {u}]")));
                }
                cost_lines.push((s, label, l, u, key.pos));
            }
            "oracle" => {
                need_states(key.pos)?;
                let (s, _) = cur.usize("state index")?;
                let label = cur.label()?;
                let (c, _) = cur.real("cost")?;
                cur.done()?;
                oracle_lines.push((s, label, c));
            }
            "safety" | "performance" => {
                let n = need_states(key.pos)?;
                let (v, _) = cur.rational("threshold")?;
                cur.expect(":")?;
                let set = state_list(&mut cur, n)?;
                let slot = if key.text == "safety" {
                    &mut safety
                } else {
                    &mut performance
                };
                if slot.is_some() {
                    return Err(key.pos.err(format!("duplicate `{}`", key.text)));
                }
                *slot = Some((v, set, key.pos));
            }
            other => return Err(key.pos.err(format!("unknown directive `{other}`"))),
        }
    }

    if !version_seen {
        return Err(last.err("missing `format` line"));
    }
    let (n, npos) = states.ok_or_else(|| last.err("missing `states`"))?;
    let (init, _) = initial.ok_or_else(|| last.err("missing `initial`"))?;
    let (lambda, target, spos) = safety.ok_or_else(|| last.err("missing `safety`"))?;
    let (kappa, goal, ppos) = performance.ok_or_else(|| last.err("missing `performance`"))?;

    let mut b = MdpBuilder::new(n, StateId(init));
    let mut seen = vec![false; n];
    for a in &actions {
        seen[a.state] = true;
        b.add_action(
            StateId(a.state),
            a.label.clone(),
            Distribution::from_entries(a.dist.clone()),
        );
    }
    if let Some(s) = seen.iter().position(|x| !x) {
        return Err(npos.err(format!("state {s} has no action")));
    }
    let model = b.build().map_err(|e| npos.err(e.to_string()))?;
    let index = action_index(&model);

    let len = model.action_table_len();
    let mut lower = vec![f64::NAN; len];
    let mut upper = vec![f64::NAN; len];
    for (s, label, l, u, _) in &cost_lines {
        let a = lookup(&index, *s, label)?;
        if !lower[a.0].is_nan() {
            return Err(label.pos.err("duplicate cost bounds"));
        }
        lower[a.0] = *l;
        upper[a.0] = *u;
    }
    for a in &actions {
        let id = index[&(a.state, a.label.clone())];
        if lower[id.0].is_nan() {
            return Err(a.pos.err(format!(
                "action `{}` at state {} has no cost bounds",
                a.label, a.state
            )));
        }
    }
    let oracle = if oracle_lines.is_empty() {
        None
    } else {
        let mut oracle = vec![f64::NAN; len];
        for (s, label, c) in &oracle_lines {
            let a = lookup(&index, *s, label)?;
            if !oracle[a.0].is_nan() {
                return Err(label.pos.err("duplicate oracle cost"));
            }
            if *c < lower[a.0] || *c > upper[a.0] {
                return Err(label.pos.err(format!(
                    "oracle cost {c} outside [{}, {}]",
                    lower[a.0], upper[a.0]
                )));
            }
            oracle[a.0] = *c;
        }
        if let Some(i) = oracle.iter().position(|c| c.is_nan()) {
            let act = model.action(ActionId(i));
            return Err(last.err(format!(
                "oracle misses action `{}` at state {}",
                act.label, act.state.0
            )));
        }
        Some(oracle)
    };
    let costs = CostModel::new(lower, upper, oracle).map_err(|e| npos.err(e.to_string()))?;
    let safety = SafetySpec::new(lambda, target).map_err(|e| spos.err(e.to_string()))?;
    let performance = PerformanceSpec::new(kappa, goal).map_err(|e| ppos.err(e.to_string()))?;
    ProblemInstance::new(&name, params, model, costs, safety, performance)
        .map_err(|e| npos.err(e.to_string()))
}

/// Parses a file of `oracle` lines against `model`.
pub fn parse_oracle(text: &str, model: &Mdp) -> Result<Vec<f64>> {
    let index = action_index(model);
    let mut oracle = vec![f64::NAN; model.action_table_len()];
    let mut last = Pos { line: 1, column: 1 };
    for (i, raw) in text.lines().enumerate() {
        let trimmed = raw.trim_start();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let end = Pos {
            line: i + 1,
            column: raw.chars().count() + 1,
        };
        last = end;
        let mut cur = Cursor {
            toks: tokenize(i + 1, raw),
            i: 0,
            end,
        };
        let key = cur.next("directive")?;
        match key.text {
            "format" => check_version(&mut cur)?,
            "oracle" => {
                let (s, _) = cur.usize("state index")?;
                let label = cur.label()?;
                let (c, _) = cur.real("cost")?;
                cur.done()?;
                let a = lookup(&index, s, &label)?;
                oracle[a.0] = c;
            }
            other => {
                return Err(key
                    .pos
                    .err(format!("unknown directive `{other}` in oracle file")))
            }
        }
    }
    for (s, a) in model.enabled_pairs() {
        if oracle[a.0].is_nan() {
            return Err(last.err(format!(
                "oracle misses action `{}` at state {}",
                model.label(a),
                s.0
            )));
        }
    }
    for c in &mut oracle {
        if c.is_nan() {
            *c = 0.0;
        }
    }
    Ok(oracle)
}

fn write_set(out: &mut String, set: impl IntoIterator<Item = StateId>) {
    for s in set {
        let _ = write!(out, " {}", s.0);
    }
}

/// Canonical text of `inst`; with `with_oracle` false the oracle is omitted.
pub fn print_instance(inst: &ProblemInstance, with_oracle: bool) -> String {
    let m = &inst.model;
    let mut out = String::new();
    let _ = writeln!(out, "format {FORMAT_VERSION}");
    if !inst.meta.name.is_empty() {
        let _ = writeln!(out, "name {}", inst.meta.name);
    }
    for (k, v) in &inst.meta.parameters {
        let _ = writeln!(out, "param {k} {v}");
    }
    let _ = writeln!(out, "states {}", m.state_count());
    let _ = writeln!(out, "initial {}", m.initial().0);
    for (s, a) in m.enabled_pairs() {
        let entries: Vec<String> = m
            .action(a)
            .distribution
            .entries()
            .iter()
            .map(|(t, p)| format!("{} {}", t.0, format_rational(p)))
            .collect();
        let _ = writeln!(
            out,
            "action {} {} : {}",
            s.0,
            m.label(a),
            entries.join(", ")
        );
    }
    for (s, a) in m.enabled_pairs() {
        let _ = writeln!(
            out,
            "cost {} {} {} {}",
            s.0,
            m.label(a),
            inst.costs.lower(a),
            inst.costs.upper(a)
        );
    }
    if with_oracle {
        if let Ok(truth) = inst.costs.true_costs() {
            out.push_str(&print_oracle_lines(m, truth));
        }
    }
    let _ = write!(out, "safety {} :", format_rational(&inst.safety.lambda));
    write_set(&mut out, inst.safety.target.iter().copied());
    out.push('\n');
    let _ = write!(
        out,
        "performance {} :",
        format_rational(&inst.performance.kappa)
    );
    write_set(&mut out, inst.performance.goal.iter().copied());
    out.push('\n');
    out
}

fn print_oracle_lines(m: &Mdp, truth: &[f64]) -> String {
    let mut out = String::new();
    for (s, a) in m.enabled_pairs() {
        let _ = writeln!(out, "oracle {} {} {}", s.0, m.label(a), truth[a.0]);
    }
    out
}

/// A standalone oracle file for `model`.
pub fn print_oracle(model: &Mdp, truth: &[f64]) -> String {
    format!(
        "format {FORMAT_VERSION}\n{}",
        print_oracle_lines(model, truth)
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchmarks::{com_exp, conflict_family, fig1, fol_line, janitor};

    fn r(n: i128, d: i128) -> Rational {
        Rational::new(n, d)
    }

    #[test]
    fn round_trips_generated_instances() {
        let instances = vec![
            fig1(r(3, 2)),
            conflict_family(4).unwrap(),
            janitor(3, 3, r(1, 10), 7).unwrap(),
            fol_line(6, 3, 2, r(1, 10)).unwrap(),
            com_exp(3, 3, 2, r(1, 10)).unwrap(),
        ];
        for inst in instances {
            let text = print_instance(&inst, true);
            let back = parse_instance(&text).unwrap();
            assert_eq!(back, inst, "{}", inst.meta.name);
            assert_eq!(print_instance(&back, true), text);
        }
    }

    #[test]
    fn fig1_text() {
        let text = print_instance(&fig1(r(3, 2)), true);
        assert!(text.starts_with("format 1\nname fig1\n"));
        assert!(text.contains("action 0 a : 1 3/5, 3 2/5\n"));
        assert!(text.contains("safety 3/10 : 2\n"));
        assert!(text.contains("performance 3/2 : 2 3 4\n"));
        let no_oracle = parse_instance(&print_instance(&fig1(r(3, 2)), false)).unwrap();
        assert!(!no_oracle.costs.has_oracle());
    }

    #[test]
    fn decimals_are_exact() {
        let text = print_instance(&fig1(r(3, 2)), true).replace("1 3/5, 3 2/5", "1 0.6, 3 0.4");
        let inst = parse_instance(&text).unwrap();
        assert_eq!(inst, fig1(r(3, 2)));
    }

    fn error_at(text: &str) -> (usize, usize) {
        match parse_instance(text) {
            Err(Error::Parse { line, column, .. }) => (line, column),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn errors_carry_positions() {
        let good = print_instance(&fig1(r(3, 2)), true);
        assert_eq!(error_at("states 2\n"), (1, 1));
        assert_eq!(error_at(&good.replace("initial 0", "initial 9")), (5, 9));
        assert_eq!(
            error_at(&good.replace("1 3/5, 3 2/5", "1 3/5, 3 1/5")),
            (6, 10)
        );
        assert_eq!(
            error_at(&good.replace("1 3/5, 3 2/5", "1 3/5 3 2/5")),
            (6, 20)
        );
        assert_eq!(error_at(&good.replace("name fig1", "colour blue")), (2, 1));
        assert_eq!(
            error_at(&good.replace("cost 0 a 1 2", "cost 0 z 1 2")),
            (13, 8)
        );
        let (line, _) = error_at(&good.replace("safety 3/10 : 2", "safety x : 2"));
        assert!(line > 1);
        assert_eq!(error_at(""), (1, 1));
    }

    #[test]
    fn oracle_file() {
        let inst = fig1(r(3, 2));
        let truth = inst.costs.true_costs().unwrap().to_vec();
        let text = print_oracle(&inst.model, &truth);
        assert_eq!(parse_oracle(&text, &inst.model).unwrap(), truth);
        assert!(matches!(
            parse_oracle("format 1\noracle 0 a 1\n", &inst.model),
            Err(Error::Parse { .. })
        ));
    }
}

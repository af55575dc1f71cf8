//! Rendering of synthesis reports and analysis results.

use std::fmt::Write as _;

use safesynth_core::learning::CostLedger;
use safesynth_core::synth_loop::{IterationRecord, SynthesisReport};
use safesynth_core::{DetScheduler, Mdp};
use serde_json::{json, Map, Value};

/// Twelve significant digits; infinities print as `inf`.
pub fn num(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let magnitude = x.abs().log10().floor() as i32;
    let decimals = (11 - magnitude).max(0) as usize;
    format!("{x:.decimals$}")
}

/// JSON number, or a string for values JSON cannot hold.
pub fn json_num(x: f64) -> Value {
    serde_json::Number::from_f64(x)
        .map(Value::Number)
        .unwrap_or_else(|| Value::String(num(x)))
}

pub fn scheduler_map(model: &Mdp, sched: &DetScheduler) -> Value {
    let map: Map<String, Value> = model
        .states()
        .map(|s| {
            (
                s.0.to_string(),
                Value::String(model.label(sched.get(s)).to_string()),
            )
        })
        .collect();
    Value::Object(map)
}

pub fn table_header() -> String {
    format!(
        "{:>5} {:>12} {:>18} {:>18} {:>18} {:>9}",
        "i", "t[ms]", "lower", "upper", "candidate", "certified"
    )
}

pub fn table_row(r: &IterationRecord) -> String {
    format!(
        "{:>5} {:>12} {:>18} {:>18} {:>18} {:>9}",
        r.index,
        num(r.elapsed_ms),
        num(r.lower),
        num(r.upper),
        num(r.candidate),
        if r.certified { "yes" } else { "no" }
    )
}

fn observed(model: &Mdp, ledger: &CostLedger) -> Value {
    let mut rows = Vec::new();
    for (s, a) in model.enabled_pairs() {
        if let Some(c) = ledger.observed(a) {
            rows.push(json!({ "state": s.0, "action": model.label(a), "cost": json_num(c), "visits": ledger.visits(a) }));
        }
    }
    Value::Array(rows)
}

pub fn json_report(name: &str, model: &Mdp, report: &SynthesisReport, timing: bool) -> Value {
    let iterations: Vec<Value> = report
        .iterations
        .iter()
        .map(|r| {
            json!({
                "i": r.index,
                "t": if timing { json_num(r.elapsed_ms) } else { Value::Null },
                "lower": json_num(r.lower),
                "upper": json_num(r.upper),
                "candidate": json_num(r.candidate),
                "certified": r.certified,
                "allowed_actions": r.permissive.allowed_count(),
            })
        })
        .collect();
    json!({
        "instance": name,
        "termination": report.termination.as_str(),
        "message": report.message,
        "best_cost": json_num(report.best_cost),
        "lower": report.final_lower().map_or(Value::Null, json_num),
        "best_scheduler": report.best.as_ref().map_or(Value::Null, |b| scheduler_map(model, b)),
        "iterations": iterations,
        "observed_costs": observed(model, &report.ledger),
    })
}

pub fn csv_report(report: &SynthesisReport, timing: bool) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["i", "t", "lower", "upper"])
        .expect("in-memory write");
    for r in &report.iterations {
        let t = if timing {
            num(r.elapsed_ms)
        } else {
            String::new()
        };
        w.write_record([r.index.to_string(), t, num(r.lower), num(r.upper)])
            .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ascii output")
}

pub fn human_summary(model: &Mdp, report: &SynthesisReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "termination: {}", report.termination);
    if let Some(msg) = &report.message {
        let _ = writeln!(out, "message: {msg}");
    }
    let _ = writeln!(out, "best cost: {}", num(report.best_cost));
    if let Some(lower) = report.final_lower() {
        let _ = writeln!(out, "lower bound: {}", num(lower));
    }
    if let Some(best) = &report.best {
        let _ = writeln!(out, "best scheduler:");
        for s in model.states() {
            let _ = writeln!(out, "  {} -> {}", s.0, model.label(best.get(s)));
        }
    }
    out
}

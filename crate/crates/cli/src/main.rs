use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use safesynth_core::analysis::{
    enumerate_safe_schedulers, max_reach_prob, min_expected_cost, minimal_conflict_sets,
};
use safesynth_core::benchmarks::{self, ProblemInstance};
use safesynth_core::format::{parse_instance, parse_oracle, print_instance};
use safesynth_core::learning::{evaluate_exactly, learn, Environment, LearnConfig};
use safesynth_core::model::{parse_rational, restrict};
use safesynth_core::synth_loop::{run_with_progress, LoopConfig, StopPolicy, Termination};
use safesynth_core::synthesis::{
    synthesize_safe_permissive, Exclusions, SolverConfig, SolverMode, SynthesisStatus,
    DEFAULT_SOLVER_COMMAND,
};
use safesynth_core::{Mdp, Rational};
use serde_json::{json, Value};

mod report;

use report::{
    csv_report, human_summary, json_num, json_report, num, scheduler_map, table_header, table_row,
};

#[derive(Parser)]
#[command(
    name = "safesynth",
    version,
    about = "Safety-constrained scheduler synthesis for MDPs with unknown costs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a benchmark instance as a model file.
    Generate {
        #[command(subcommand)]
        benchmark: Benchmark,
        /// Output path; standard output when absent.
        #[arg(short, long, global = true)]
        output: Option<PathBuf>,
        /// Leave the true costs out of the file.
        #[arg(long, global = true)]
        no_oracle: bool,
    },
    /// Run a model-checking query on a model file.
    Analyze {
        model: PathBuf,
        query: Query,
        #[arg(long, value_enum, default_value_t = Format::Human)]
        format: Format,
        /// Cost table for `mincost`.
        #[arg(long, value_enum, default_value_t = CostChoice::Oracle)]
        costs: CostChoice,
    },
    /// Run the synthesis loop.
    Synthesize(SynthesizeArgs),
    /// Synthesize one permissive scheduler and learn inside it once.
    Learn(LearnArgs),
    /// List the minimal conflict sets of a model.
    Conflicts {
        model: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Human)]
        format: Format,
    },
}

#[derive(Subcommand)]
enum Benchmark {
    Fig1 {
        #[arg(long, default_value = "3/2")]
        kappa: String,
    },
    Conflict {
        #[arg(long, default_value_t = 4)]
        n: usize,
    },
    Janitor {
        #[arg(long, default_value_t = 4)]
        width: usize,
        #[arg(long, default_value_t = 4)]
        height: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value = "1/5")]
        lambda: String,
        #[arg(long, default_value = "1000")]
        kappa: String,
    },
    Folline {
        #[arg(long, default_value_t = 20)]
        length: usize,
        #[arg(long, default_value_t = 3)]
        speeds: usize,
        #[arg(long, default_value_t = 2)]
        distance: usize,
        #[arg(long, default_value = "11/20")]
        lambda: String,
        #[arg(long, default_value = "1000")]
        kappa: String,
    },
    Comexp {
        #[arg(long, default_value_t = 4)]
        width: usize,
        #[arg(long, default_value_t = 4)]
        height: usize,
        #[arg(long, default_value_t = 2)]
        attempts: usize,
        #[arg(long, default_value = "1/5")]
        lambda: String,
        #[arg(long, default_value = "1000")]
        kappa: String,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Query {
    Maxreach,
    Mincost,
    Safesched,
    Conflicts,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Human,
    Json,
    Csv,
}

#[derive(Clone, Copy, ValueEnum)]
enum CostChoice {
    Lower,
    Upper,
    Oracle,
}

#[derive(Args)]
struct SolverArgs {
    /// SMT-LIB2 solver command reading from standard input.
    #[arg(long, env = "SAFE_SYNTH_SOLVER", default_value = DEFAULT_SOLVER_COMMAND)]
    solver: String,
    /// Per-query solver timeout in seconds.
    #[arg(long, default_value_t = 60)]
    solver_timeout: u64,
    /// Decide the encoding by enumeration instead of an external solver.
    #[arg(long)]
    fallback_enum: bool,
}

impl SolverArgs {
    fn config(&self) -> SolverConfig {
        SolverConfig {
            command: self.solver.clone(),
            timeout: Duration::from_secs(self.solver_timeout),
            mode: if self.fallback_enum {
                SolverMode::EnumerativeFallback
            } else {
                SolverMode::External
            },
        }
    }
}

#[derive(Args)]
struct LearnFlags {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10_000)]
    episodes: usize,
    /// True costs, when the model file carries none.
    #[arg(long)]
    oracle: Option<PathBuf>,
}

#[derive(Args)]
struct SynthesizeArgs {
    model: PathBuf,
    #[command(flatten)]
    solver: SolverArgs,
    #[command(flatten)]
    learn: LearnFlags,
    #[arg(long, default_value_t = 100)]
    max_iterations: usize,
    /// Stop as soon as the performance bound is met (default).
    #[arg(long, conflicts_with = "to_optimal")]
    stop_at_kappa: bool,
    /// Continue until optimality is certified or no scheduler is left.
    #[arg(long)]
    to_optimal: bool,
    /// Write the report here instead of standard output.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Human)]
    format: Format,
    /// Leave elapsed times out of the report so reruns compare equal.
    #[arg(long)]
    no_timing: bool,
}

#[derive(Args)]
struct LearnArgs {
    model: PathBuf,
    #[command(flatten)]
    solver: SolverArgs,
    #[command(flatten)]
    learn: LearnFlags,
    #[arg(long, value_enum, default_value_t = Format::Human)]
    format: Format,
}

fn rational(text: &str) -> Result<Rational> {
    parse_rational(text).with_context(|| format!("`{text}` is not a decimal or num/den rational"))
}

fn load(path: &Path) -> Result<ProblemInstance> {
    let text =
        fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    parse_instance(&text).with_context(|| format!("{}", path.display()))
}

fn load_with_oracle(path: &Path, oracle: Option<&Path>) -> Result<ProblemInstance> {
    let mut inst = load(path)?;
    if let Some(o) = oracle {
        let text = fs::read_to_string(o).with_context(|| format!("cannot read {}", o.display()))?;
        let truth = parse_oracle(&text, &inst.model).with_context(|| format!("{}", o.display()))?;
        inst.costs = inst.costs.with_oracle(truth)?;
    }
    if !inst.costs.has_oracle() {
        bail!(
            "{} has no oracle block; pass true costs with --oracle",
            path.display()
        );
    }
    Ok(inst)
}

fn emit(output: Option<&Path>, text: &str) -> Result<()> {
    match output {
        Some(p) => fs::write(p, text).with_context(|| format!("cannot write {}", p.display())),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn pretty(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

fn generate(benchmark: &Benchmark) -> Result<ProblemInstance> {
    Ok(match benchmark {
        Benchmark::Fig1 { kappa } => benchmarks::fig1(rational(kappa)?),
        Benchmark::Conflict { n } => benchmarks::conflict_family(*n)?,
        Benchmark::Janitor {
            width,
            height,
            seed,
            lambda,
            kappa,
        } => benchmarks::janitor_with_kappa(
            *width,
            *height,
            rational(lambda)?,
            *seed,
            rational(kappa)?,
        )?,
        Benchmark::Folline {
            length,
            speeds,
            distance,
            lambda,
            kappa,
        } => benchmarks::fol_line_with_kappa(
            *length,
            *speeds,
            *distance,
            rational(lambda)?,
            rational(kappa)?,
        )?,
        Benchmark::Comexp {
            width,
            height,
            attempts,
            lambda,
            kappa,
        } => benchmarks::com_exp_with_kappa(
            *width,
            *height,
            *attempts,
            rational(lambda)?,
            rational(kappa)?,
        )?,
    })
}

fn action_list(
    model: &Mdp,
    actions: impl IntoIterator<Item = safesynth_core::ActionId>,
) -> Vec<Value> {
    actions
        .into_iter()
        .map(|a| {
            let s = model
                .states()
                .find(|s| model.enabled(*s).contains(&a))
                .expect("enabled action");
            json!({ "state": s.0, "action": model.label(a) })
        })
        .collect()
}

fn conflicts_json(inst: &ProblemInstance) -> Result<Value> {
    let sets = minimal_conflict_sets(&inst.model, &inst.safety)?;
    let list: Vec<Value> = sets
        .iter()
        .map(|c| Value::Array(action_list(&inst.model, c.actions.iter().copied())))
        .collect();
    Ok(json!({ "count": sets.len(), "sets": list }))
}

fn describe_actions(list: &[Value]) -> String {
    list.iter()
        .map(|v| format!("({}, {})", v["state"], v["action"].as_str().unwrap_or("?")))
        .collect::<Vec<_>>()
        .join(" ")
}

fn analyze(inst: &ProblemInstance, query: Query, costs: CostChoice) -> Result<(Value, String)> {
    let m = &inst.model;
    Ok(match query {
        Query::Maxreach => {
            let res = max_reach_prob(m, &inst.safety.target)?;
            let v = res.at(m.initial());
            let witness = res.witness.as_ref().map(|w| scheduler_map(m, w));
            let human = format!("max reach probability: {}\n", num(v));
            (
                json!({ "query": "maxreach", "value": json_num(v), "witness": witness }),
                human,
            )
        }
        Query::Mincost => {
            let table = match costs {
                CostChoice::Lower => inst.costs.lower_bounds(),
                CostChoice::Upper => inst.costs.upper_bounds(),
                CostChoice::Oracle => inst
                    .costs
                    .true_costs()
                    .context("the model has no oracle; use --costs lower or upper")?,
            };
            let res = min_expected_cost(m, table, &inst.performance.goal)?;
            let v = res.at(m.initial());
            let witness = res.witness.as_ref().map(|w| scheduler_map(m, w));
            let human = format!("min expected cost: {}\n", num(v));
            (
                json!({ "query": "mincost", "value": json_num(v), "witness": witness }),
                human,
            )
        }
        Query::Safesched => {
            let all = enumerate_safe_schedulers(m, &inst.safety)?;
            let mut human = format!("{} safe schedulers\n", all.len());
            for sigma in &all {
                let labels: Vec<String> = m
                    .states()
                    .map(|s| format!("{}:{}", s.0, m.label(sigma.get(s))))
                    .collect();
                human.push_str(&format!("  {}\n", labels.join(" ")));
            }
            let list: Vec<Value> = all.iter().map(|s| scheduler_map(m, s)).collect();
            (
                json!({ "query": "safesched", "count": all.len(), "schedulers": list }),
                human,
            )
        }
        Query::Conflicts => {
            let v = conflicts_json(inst)?;
            let mut human = format!("{} minimal conflict sets\n", v["count"]);
            for set in v["sets"].as_array().expect("array") {
                human.push_str(&format!(
                    "  {}\n",
                    describe_actions(set.as_array().expect("array"))
                ));
            }
            (v, human)
        }
    })
}

fn learn_config(flags: &LearnFlags) -> LearnConfig {
    LearnConfig {
        episodes: flags.episodes,
        seed: flags.seed,
        ..LearnConfig::default()
    }
}

fn synthesize(args: &SynthesizeArgs) -> Result<ExitCode> {
    let inst = load_with_oracle(&args.model, args.learn.oracle.as_deref())?;
    let cfg = LoopConfig {
        solver: args.solver.config(),
        learn: learn_config(&args.learn),
        max_iterations: args.max_iterations,
        stop: if args.to_optimal {
            StopPolicy::ToOptimal
        } else {
            StopPolicy::AtKappa
        },
        ..LoopConfig::default()
    };
    // progress goes to stdout only when stdout carries the human table
    let live = args.format == Format::Human && args.report.is_none();
    let mut progress_out: Box<dyn std::io::Write> = if live {
        Box::new(std::io::stdout())
    } else {
        Box::new(std::io::stderr())
    };
    writeln!(progress_out, "{}", table_header())?;
    let report = run_with_progress(
        &inst.model,
        &inst.costs,
        &inst.safety,
        &inst.performance,
        &cfg,
        &mut |r| {
            let _ = writeln!(progress_out, "{}", table_row(r));
        },
    )?;
    drop(progress_out);
    let timing = !args.no_timing;
    let text = match args.format {
        Format::Human => human_summary(&inst.model, &report),
        Format::Json => pretty(&json_report(&inst.meta.name, &inst.model, &report, timing)),
        Format::Csv => csv_report(&report, timing),
    };
    emit(args.report.as_deref(), &text)?;
    Ok(ExitCode::from(match report.termination {
        Termination::PerformanceMet | Termination::GloballyOptimal => 0,
        Termination::Exhausted => 2,
        Termination::SolverFailure => 3,
        Termination::IterationCap => 4,
    }))
}

fn learn_once(args: &LearnArgs) -> Result<ExitCode> {
    let inst = load_with_oracle(&args.model, args.learn.oracle.as_deref())?;
    let outcome = synthesize_safe_permissive(
        &inst.model,
        &inst.safety,
        &Exclusions::default(),
        &args.solver.config(),
    )?;
    let theta = match outcome.status {
        SynthesisStatus::Sat => outcome.scheduler.expect("sat outcome carries a scheduler"),
        SynthesisStatus::Unsat => bail!("no safe permissive scheduler exists"),
        SynthesisStatus::Unknown(why) => {
            eprintln!("solver failure: {why}");
            return Ok(ExitCode::from(3));
        }
    };
    let sub = restrict(&inst.model, &theta)?;
    let cfg = learn_config(&args.learn);
    let mut env = Environment::new(
        &sub,
        &inst.costs,
        &inst.performance.goal,
        cfg.seed,
        cfg.step_cap,
    )?;
    let mut out = learn(&mut env, &cfg)?;
    let eval = evaluate_exactly(
        &mut env,
        &out.scheduler,
        &mut out.ledger,
        cfg.evaluation_budget,
    )?;
    let value = json!({
        "allowed_actions": theta.allowed_count(),
        "scheduler": scheduler_map(&inst.model, &out.scheduler),
        "cost": json_num(eval.value),
        "complete": eval.complete,
        "truncated_episodes": out.truncated_episodes,
        "steps": out.steps,
    });
    let text =
        match args.format {
            Format::Json => pretty(&value),
            _ => {
                let mut s =
                    format!(
                "allowed actions: {}\nlearned cost: {}{}\ntruncated episodes: {}\nscheduler:\n",
                theta.allowed_count(),
                num(eval.value),
                if eval.complete { "" } else { " (some costs unobserved, upper bounds used)" },
                out.truncated_episodes
            );
                for st in inst.model.states() {
                    s.push_str(&format!(
                        "  {} -> {}\n",
                        st.0,
                        inst.model.label(out.scheduler.get(st))
                    ));
                }
                s
            }
        };
    emit(None, &text)?;
    Ok(ExitCode::SUCCESS)
}

fn render(format: Format, value: &Value, human: String) -> Result<String> {
    Ok(match format {
        Format::Json => pretty(value),
        Format::Human => human,
        Format::Csv => bail!("csv output is only available for synthesis reports"),
    })
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Generate {
            benchmark,
            output,
            no_oracle,
        } => {
            let inst = generate(&benchmark)?;
            emit(output.as_deref(), &print_instance(&inst, !no_oracle))?;
        }
        Command::Analyze {
            model,
            query,
            format,
            costs,
        } => {
            let inst = load(&model)?;
            let (value, human) = analyze(&inst, query, costs)?;
            emit(None, &render(format, &value, human)?)?;
        }
        Command::Conflicts { model, format } => {
            let inst = load(&model)?;
            let (value, human) = analyze(&inst, Query::Conflicts, CostChoice::Lower)?;
            emit(None, &render(format, &value, human)?)?;
        }
        Command::Synthesize(args) => return synthesize(&args),
        Command::Learn(args) => return learn_once(&args),
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

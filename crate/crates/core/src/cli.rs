//! Command-line front end. Every command writes one JSON report with sorted
//! keys; exit codes are 0 on success, 1 on I/O or analysis errors and 2 on
//! usage errors.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{CommandFactory, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use crate::fuzz::{fuzz_loop, FuzzConfig, FuzzError};
use crate::graphs::{build_call_graph, build_cfg, distance_to_return, target_distances, GraphError};
use crate::ir::{parse_program, Location, Program};
use crate::macke::{run_macke, MackeConfig, MackeError};
use crate::munch::{run_hybrid, HybridBudget, Mode, MunchError};
use crate::severity::{
    impact_table, predict_score, read_dataset, train_model, ImpactVector, SeverityError,
    SeverityModel,
};
use crate::sonar::{sonar_explore, Combiner};
use crate::symex::{explore, Budget, ExploreOptions, Strategy, SymexError};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Top-level keys of every report.
pub const REPORT_FIELDS: [&str; 5] = ["command", "elapsedMillis", "payload", "seedValues", "toolVersion"];

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Io(String),
    Analysis(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Io(_) | CliError::Analysis(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Io(m) | CliError::Analysis(m) => m,
        }
    }
}

impl From<SymexError> for CliError {
    fn from(e: SymexError) -> Self {
        match e {
            SymexError::UnknownStrategy(_) => CliError::Usage(e.to_string()),
            _ => CliError::Analysis(e.to_string()),
        }
    }
}

impl From<MunchError> for CliError {
    fn from(e: MunchError) -> Self {
        match e {
            MunchError::UnknownMode(_) => CliError::Usage(e.to_string()),
            _ => CliError::Analysis(e.to_string()),
        }
    }
}

macro_rules! analysis_error {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Analysis(e.to_string())
            }
        }
    )*};
}

analysis_error!(GraphError, MackeError, FuzzError, SeverityError, serde_json::Error);

#[derive(Debug, Parser)]
#[command(name = "vulnkit", version, about = "Vulnerability analysis over a minimal IR", args_override_self = true)]
struct Cli {
    /// Flat `key = value` file supplying flag defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Report destination; stdout when absent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct ExploreArgs {
    #[arg(long)]
    program: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    max_states: u64,
    #[arg(long, default_value_t = 10_000)]
    max_steps: usize,
    #[arg(long, default_value_t = 0)]
    wall_millis: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Models kept per violation.
    #[arg(long, default_value_t = 1)]
    witnesses: usize,
}

impl ExploreArgs {
    fn budget(&self) -> Budget {
        Budget {
            max_states: self.max_states,
            max_steps: self.max_steps,
            wall_millis: self.wall_millis,
        }
    }

    fn options(&self) -> ExploreOptions {
        ExploreOptions {
            witnesses_per_violation: self.witnesses,
            ..ExploreOptions::default()
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse and validate a program, echoing its canonical text.
    Parse {
        #[arg(long)]
        program: PathBuf,
    },
    /// Dump the call graph, CFGs and distance tables.
    Graph {
        #[arg(long)]
        program: PathBuf,
        #[arg(long)]
        target: Option<String>,
    },
    /// Symbolic execution under a search strategy.
    Symex {
        #[command(flatten)]
        args: ExploreArgs,
        /// dfs, bfs, random, coverage or sonar.
        #[arg(long, default_value = "coverage")]
        strategy: String,
        #[arg(long)]
        target: Option<String>,
    },
    /// Distance-guided symbolic execution toward a target function.
    Sonar {
        #[command(flatten)]
        args: ExploreArgs,
        #[arg(long)]
        target: String,
        /// min or max.
        #[arg(long, default_value = "min")]
        combiner: String,
    },
    /// Greybox fuzzing from a directory of raw seed files.
    Fuzz {
        #[arg(long)]
        program: PathBuf,
        #[arg(long)]
        seed_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 10_000)]
        max_execs: u64,
        #[arg(long, default_value_t = 0)]
        wall_millis: u64,
        #[arg(long, default_value_t = 0)]
        havoc_seed: u64,
        #[arg(long, default_value_t = 10_000)]
        max_steps: usize,
    },
    /// Per-function analysis with exploit propagation.
    Macke {
        #[arg(long)]
        program: PathBuf,
        #[arg(long, default_value_t = 200)]
        budget_states: u64,
        #[arg(long, default_value_t = 10_000)]
        max_steps: usize,
        #[arg(long, default_value_t = crate::ir::DEFAULT_BUF_LEN)]
        buf_len: usize,
        #[arg(long, default_value_t = 8)]
        exploits: usize,
    },
    /// Hybrid fuzzing and symbolic execution.
    Munch {
        #[arg(long)]
        program: PathBuf,
        /// fs or sf.
        #[arg(long)]
        mode: String,
        #[arg(long, default_value_t = 10_000)]
        fuzz_execs: u64,
        #[arg(long, default_value_t = 2_000)]
        symex_states: u64,
        #[arg(long, default_value_t = 500)]
        per_target_states: u64,
        #[arg(long, default_value_t = 1_000)]
        window: u64,
        #[arg(long)]
        seed_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        havoc_seed: u64,
        #[arg(long, default_value_t = 10_000)]
        max_steps: usize,
    },
    /// Train or apply the severity model.
    Severity {
        #[command(subcommand)]
        action: SeverityCommand,
    },
    /// Validate a report and re-emit it canonically.
    Report {
        #[arg(long)]
        input: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
enum SeverityCommand {
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model_out: PathBuf,
    },
    Predict {
        #[arg(long)]
        model: PathBuf,
        /// A macke report.
        #[arg(long)]
        report: PathBuf,
    },
}

/// Runs one invocation (`argv[0]` is the program name) and returns the
/// process exit code.
pub fn execute_command(argv: &[String]) -> i32 {
    match run(argv) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("vulnkit: {}", e.message());
            e.exit_code()
        }
    }
}

fn run(argv: &[String]) -> Result<(), CliError> {
    let started = Instant::now();
    let argv = with_config_defaults(argv)?;
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return if code == 0 {
                Ok(())
            } else {
                Err(CliError::Usage("invalid usage".into()))
            };
        }
    };
    let (payload, seeds) = dispatch(&cli.command)?;
    let report = json!({
        "toolVersion": TOOL_VERSION,
        "command": argv.iter().skip(1).collect::<Vec<_>>(),
        "seedValues": seeds,
        "payload": payload,
        "elapsedMillis": started.elapsed().as_millis() as u64,
    });
    emit(&report, cli.out.as_deref())
}

fn emit(report: &Value, out: Option<&Path>) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(report)?;
    text.push('\n');
    match out {
        Some(path) => fs::write(path, text)
            .map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display()))),
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| CliError::Io(e.to_string())),
    }
}

/// Inserts `--key value` pairs from the config file right after the
/// subcommand path, so flags given on the command line override them.
fn with_config_defaults(argv: &[String]) -> Result<Vec<String>, CliError> {
    let Some(pos) = argv.iter().position(|a| a == "--config") else {
        return Ok(argv.to_vec());
    };
    let path = argv
        .get(pos + 1)
        .ok_or_else(|| CliError::Usage("--config needs a file".into()))?;
    let text = read_text(Path::new(path))?;
    let entries = parse_config(&text)?;

    // Locate the subcommand (and nested severity action) to know which flags apply.
    let mut cmd = Cli::command();
    let mut insert_at = 1;
    let mut i = 1;
    while i < argv.len() {
        let a = &argv[i];
        if a == "--config" || a == "--out" {
            i += 2;
            continue;
        }
        if let Some(sub) = cmd.find_subcommand(a) {
            cmd = sub.clone();
            insert_at = i + 1;
        } else if !a.starts_with("--") {
            break;
        }
        i += 1;
    }
    let known: BTreeSet<String> = cmd
        .get_arguments()
        .filter_map(|a| a.get_long().map(str::to_string))
        .collect();
    let mut injected = Vec::new();
    for (k, v) in entries {
        if known.contains(&k) && k != "config" {
            injected.push(format!("--{k}"));
            injected.push(v);
        }
    }
    let mut out = argv[..insert_at].to_vec();
    out.extend(injected);
    out.extend(argv[insert_at..].iter().cloned());
    Ok(out)
}

/// Parses `key = value` lines; `#` starts a comment. Underscores in keys
/// are read as dashes.
pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut map = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("config line {}: expected key = value", n + 1)))?;
        map.insert(k.trim().replace('_', "-"), v.trim().to_string());
    }
    Ok(map)
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Io(format!("cannot read {}: {e}", path.display())))
}

fn load_program(path: &Path) -> Result<Program, CliError> {
    parse_program(&read_text(path)?).map_err(|e| CliError::Analysis(format!("{}: {e}", path.display())))
}

fn read_seeds(dir: Option<&Path>, p: &Program) -> Result<Vec<Vec<u8>>, CliError> {
    let Some(dir) = dir else {
        return Ok(vec![vec![0; p.entry_input_len()]]);
    };
    let io = |e: std::io::Error| CliError::Io(format!("{}: {e}", dir.display()));
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()
        .map_err(io)?;
    paths.retain(|p| p.is_file());
    paths.sort();
    paths.iter().map(|p| fs::read(p).map_err(io)).collect()
}

fn to_value(v: &impl Serialize) -> Result<Value, CliError> {
    Ok(serde_json::to_value(v)?)
}

fn dispatch(cmd: &Command) -> Result<(Value, Value), CliError> {
    let no_seeds = json!({});
    match cmd {
        Command::Parse { program } => {
            let p = load_program(program)?;
            let functions: Vec<Value> = p
                .functions()
                .iter()
                .map(|f| {
                    json!({
                        "name": f.name,
                        "params": f.params.len(),
                        "blocks": f.blocks().len(),
                        "instructions": f.instr_count(),
                    })
                })
                .collect();
            Ok((
                json!({
                    "entry": p.entry(),
                    "functions": functions,
                    "instructions": p.instr_count(),
                    "text": p.to_string(),
                }),
                no_seeds,
            ))
        }
        Command::Graph { program, target } => {
            let p = load_program(program)?;
            let cg = build_call_graph(&p);
            let edges: Vec<Value> = cg
                .edges
                .iter()
                .flat_map(|(caller, callees)| {
                    callees.iter().map(move |(callee, sites)| {
                        json!({ "caller": caller, "callee": callee, "sites": sites })
                    })
                })
                .collect();
            let cfgs: BTreeMap<&str, Value> = p
                .functions()
                .iter()
                .map(|f| {
                    let cfg = build_cfg(f);
                    let edges: Vec<[&String; 2]> = cfg.edges.iter().map(|(a, b)| [a, b]).collect();
                    (f.name.as_str(), json!({ "nodes": cfg.nodes, "edges": edges }))
                })
                .collect();
            let ret = distance_to_return(&p);
            let mut payload = json!({
                "callGraph": { "nodes": cg.nodes, "edges": edges },
                "cfgs": cfgs,
                "dToReturn": ret.to_return,
                "dComplete": ret.complete,
            });
            if let Some(t) = target {
                let tables = target_distances(&p, t)?;
                payload["target"] = json!(t);
                payload["dToTarget"] = to_value(&tables.to_target)?;
            }
            Ok((payload, no_seeds))
        }
        Command::Symex {
            args,
            strategy,
            target,
        } => {
            let p = load_program(&args.program)?;
            let s = Strategy::parse(strategy, target.as_deref(), args.seed)?;
            let r = explore(&p, &s, &args.budget(), &args.options())?;
            Ok((to_value(&r)?, json!({ "seed": args.seed })))
        }
        Command::Sonar {
            args,
            target,
            combiner,
        } => {
            let p = load_program(&args.program)?;
            let c: Combiner = combiner.parse().map_err(CliError::Usage)?;
            let run = sonar_explore(&p, target, c, &args.budget(), &args.options())?;
            let mut payload = to_value(&run.report)?;
            payload["combiner"] = json!(c);
            payload["targetReachedAfterStates"] = json!(run.trace.arrivals.get(target));
            Ok((payload, json!({ "seed": args.seed })))
        }
        Command::Fuzz {
            program,
            seed_dir,
            max_execs,
            wall_millis,
            havoc_seed,
            max_steps,
        } => {
            let p = load_program(program)?;
            let seeds = read_seeds(seed_dir.as_deref(), &p)?;
            let cfg = FuzzConfig {
                max_execs: *max_execs,
                wall_millis: *wall_millis,
                havoc_seed: *havoc_seed,
                step_budget: *max_steps,
                saturation_window: None,
            };
            let r = fuzz_loop(&p, &seeds, &cfg)?;
            Ok((to_value(&r)?, json!({ "havocSeed": havoc_seed })))
        }
        Command::Macke {
            program,
            budget_states,
            max_steps,
            buf_len,
            exploits,
        } => {
            let p = load_program(program)?;
            let cfg = MackeConfig {
                buf_len: *buf_len,
                budget: Budget {
                    max_states: *budget_states,
                    max_steps: *max_steps,
                    wall_millis: 0,
                },
                exploits_per_violation: *exploits,
                ..MackeConfig::default()
            };
            let r = run_macke(&p, &cfg)?;
            let impacts: Vec<Value> = r
                .records
                .iter()
                .zip(impact_table(&p, &r.records, &r.chains))
                .map(|(rec, iv)| json!({ "id": rec.id, "rootLocation": rec.root_location, "impact": iv }))
                .collect();
            let mut payload = to_value(&r)?;
            payload["impacts"] = Value::Array(impacts);
            Ok((payload, no_seeds))
        }
        Command::Munch {
            program,
            mode,
            fuzz_execs,
            symex_states,
            per_target_states,
            window,
            seed_dir,
            havoc_seed,
            max_steps,
        } => {
            let mode: Mode = mode.parse()?;
            let p = load_program(program)?;
            let seeds = read_seeds(seed_dir.as_deref(), &p)?;
            let b = HybridBudget {
                fuzz_execs: *fuzz_execs,
                symex_states: *symex_states,
                per_target_states: *per_target_states,
                window: *window,
                havoc_seed: *havoc_seed,
                max_steps: *max_steps,
            };
            let r = run_hybrid(&p, mode, &b, &seeds)?;
            Ok((to_value(&r)?, json!({ "havocSeed": havoc_seed })))
        }
        Command::Severity { action } => match action {
            SeverityCommand::Train { data, model_out } => {
                let file = fs::File::open(data)
                    .map_err(|e| CliError::Io(format!("cannot read {}: {e}", data.display())))?;
                let rows = read_dataset(file)?;
                let model = train_model(&rows)?;
                let text = serde_json::to_string_pretty(&model)? + "\n";
                fs::write(model_out, text)
                    .map_err(|e| CliError::Io(format!("cannot write {}: {e}", model_out.display())))?;
                Ok((to_value(&model)?, no_seeds))
            }
            SeverityCommand::Predict { model, report } => {
                let model: SeverityModel = serde_json::from_str(&read_text(model)?)?;
                let report: Value = serde_json::from_str(&read_text(report)?)?;
                let impacts = report["payload"]["impacts"].as_array().ok_or_else(|| {
                    CliError::Analysis("report has no payload.impacts (expected a macke report)".into())
                })?;
                let mut predictions = Vec::new();
                for entry in impacts {
                    let iv: ImpactVector = serde_json::from_value(entry["impact"].clone())?;
                    let root: Location = serde_json::from_value(entry["rootLocation"].clone())?;
                    predictions.push(json!({
                        "id": entry["id"],
                        "rootLocation": root,
                        "impact": iv,
                        "score": predict_score(&model, &iv)?,
                    }));
                }
                Ok((json!({ "predictions": predictions }), no_seeds))
            }
        },
        Command::Report { input } => {
            let report: Value = serde_json::from_str(&read_text(input)?)?;
            validate_report(&report)?;
            Ok((report["payload"].clone(), report["seedValues"].clone()))
        }
    }
}

/// Checks that a report has exactly the published top-level fields.
pub fn validate_report(report: &Value) -> Result<(), CliError> {
    let obj = report
        .as_object()
        .ok_or_else(|| CliError::Analysis("report is not a JSON object".into()))?;
    let keys: BTreeSet<&str> = obj.keys().map(String::as_str).collect();
    let expected: BTreeSet<&str> = REPORT_FIELDS.into_iter().collect();
    if keys != expected {
        return Err(CliError::Analysis(format!(
            "report fields {keys:?} differ from {expected:?}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_lines() {
        let m = parse_config("# defaults\nmax_states = 50\n\nseed=3 # trailing\n").unwrap();
        assert_eq!(m["max-states"], "50");
        assert_eq!(m["seed"], "3");
        assert!(parse_config("oops").is_err());
    }

    #[test]
    fn unknown_subcommand_is_usage_error() {
        let argv = vec!["vulnkit".to_string(), "frobnicate".to_string()];
        assert_eq!(execute_command(&argv), 2);
    }

    #[test]
    fn report_field_check() {
        let ok = json!({"command": [], "elapsedMillis": 1, "payload": {}, "seedValues": {}, "toolVersion": "x"});
        assert!(validate_report(&ok).is_ok());
        let extra = json!({"command": [], "payload": {}, "seedValues": {}, "toolVersion": "x"});
        assert!(validate_report(&extra).is_err());
    }
}

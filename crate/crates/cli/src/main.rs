//! `linkmi` command-line front end.
//!
//! Configuration comes from a TOML file; flags and `--set key=value` pairs
//! override it. Exit codes: 0 success, 1 invalid input or configuration,
//! 2 failure while running.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::de::DeserializeOwned;

use linkmi::pipeline::{self, Estimator, PipelineConfig};
use linkmi::simgen::{derive_seed, generate_scenario, FrequencyTables};
use linkmi::study::{self, StudyConfig};

#[derive(Parser)]
#[command(name = "linkmi", version, about = "Record linkage with multiple-imputation regression inference")]
struct Cli {
    /// More log output on stderr (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic file pair with ground truth and seeds.
    Simulate(SimulateArgs),
    /// Compare the files and sample linkages; writes the chain.
    Link(PipelineArgs),
    /// Fit the estimators on a chain written by `link`.
    Fit(FitArgs),
    /// Link and fit in one go.
    Run(PipelineArgs),
    /// Monte Carlo study over generated scenarios.
    Study(StudyArgs),
    /// Print the tables of a run directory or re-aggregate a study log.
    Report(ReportArgs),
}

#[derive(Args)]
struct Overrides {
    /// Override any configuration key, e.g. `--set gibbs.alpha_pi=2`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct PipelineArgs {
    /// TOML configuration file.
    #[arg(short, long)]
    config: Option<PathBuf>,
    #[arg(long)]
    file1: Option<PathBuf>,
    #[arg(long)]
    file2: Option<PathBuf>,
    /// CSV of known `(i, j)` links.
    #[arg(long)]
    seeds: Option<PathBuf>,
    /// CSV of all true `(i, j)` links.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(short, long)]
    output: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated subset of plmic, plmi, ts_ols, perfect.
    #[arg(long, value_delimiter = ',')]
    estimators: Option<Vec<String>>,
    #[arg(long)]
    level: Option<f64>,
    #[arg(long)]
    thin: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    /// Marginal response density: normal or kde.
    #[arg(long)]
    marginal: Option<String>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    burn_in: Option<usize>,
    #[arg(long)]
    em_restarts: Option<usize>,
    #[arg(long)]
    em_tolerance: Option<f64>,
    #[arg(long)]
    em_max_iterations: Option<usize>,
    #[arg(long)]
    write_datasets: bool,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    pipeline: PipelineArgs,
    /// Chain file; defaults to `chain.jsonl` in the output directory.
    #[arg(long)]
    chain: Option<PathBuf>,
}

#[derive(Args)]
struct StudyArgs {
    /// TOML study configuration (`[scenario]`, `[pipeline]`, ...).
    #[arg(short, long)]
    config: Option<PathBuf>,
    #[arg(short, long)]
    output: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    replications: Option<usize>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct SimulateArgs {
    /// Study-format TOML; only `[scenario]` and `table_exponents` are used.
    #[arg(short, long)]
    config: Option<PathBuf>,
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Regenerate the data of this study replication instead.
    #[arg(long)]
    replication: Option<usize>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct ReportArgs {
    /// A run directory, a study directory, or a `replications.csv` log.
    path: PathBuf,
    /// Write re-aggregated study metrics to this CSV.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Debug)]
enum CliError {
    Validation(String),
    Runtime(String),
}

impl From<linkmi::Error> for CliError {
    fn from(e: linkmi::Error) -> Self {
        if e.is_validation() {
            CliError::Validation(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

fn read_table(path: Option<&Path>) -> CliResult<toml::Table> {
    let Some(path) = path else {
        return Ok(toml::Table::new());
    };
    let text = std::fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    text.parse::<toml::Table>()
        .map_err(|e| invalid(format!("{}: {e}", path.display())))
}

/// Sets a dotted key, creating intermediate tables.
fn set_key(table: &mut toml::Table, key: &str, value: toml::Value) -> CliResult<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|k| !k.is_empty()).ok_or_else(|| invalid(format!("empty key in `{key}`")))?;
    let mut cur = table;
    for p in parts {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| invalid(format!("`{p}` in `{key}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Parses the right-hand side of `--set` as a TOML value, falling back to a
/// bare string.
fn parse_value(text: &str) -> toml::Value {
    format!("v = {text}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(text.to_string()))
}

fn apply_sets(table: &mut toml::Table, o: &Overrides) -> CliResult<()> {
    for s in &o.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| invalid(format!("`--set {s}` is not KEY=VALUE")))?;
        set_key(table, k.trim(), parse_value(v.trim()))?;
    }
    Ok(())
}

fn path_value(p: &Path) -> toml::Value {
    toml::Value::String(p.to_string_lossy().into_owned())
}

fn int_value(v: impl TryInto<i64>, name: &str) -> CliResult<toml::Value> {
    v.try_into()
        .map(toml::Value::Integer)
        .map_err(|_| invalid(format!("--{name} is too large")))
}

fn decode<T: DeserializeOwned>(table: toml::Table) -> CliResult<T> {
    table.try_into().map_err(|e: toml::de::Error| invalid(format!("configuration: {e}")))
}

fn pipeline_config(a: &PipelineArgs) -> CliResult<PipelineConfig> {
    let mut t = read_table(a.config.as_deref())?;
    // Relative paths in a config file are taken relative to that file.
    if let Some(base) = a.config.as_deref().and_then(Path::parent) {
        for key in ["file1", "file2", "seeds", "truth", "output"] {
            if let Some(toml::Value::String(s)) = t.get(key) {
                let p = Path::new(s);
                if p.is_relative() {
                    let joined = base.join(p);
                    t.insert(key.into(), path_value(&joined));
                }
            }
        }
    }
    for (key, v) in [
        ("file1", &a.file1),
        ("file2", &a.file2),
        ("seeds", &a.seeds),
        ("truth", &a.truth),
        ("output", &a.output),
    ] {
        if let Some(p) = v {
            set_key(&mut t, key, path_value(p))?;
        }
    }
    if let Some(v) = a.seed {
        set_key(&mut t, "seed", int_value(v, "seed")?)?;
    }
    if let Some(es) = &a.estimators {
        for e in es {
            e.parse::<Estimator>()?;
        }
        let list = es.iter().map(|e| toml::Value::String(e.clone())).collect();
        set_key(&mut t, "estimators", toml::Value::Array(list))?;
    }
    if let Some(v) = a.level {
        set_key(&mut t, "level", toml::Value::Float(v))?;
    }
    if let Some(v) = a.thin {
        set_key(&mut t, "thin", int_value(v, "thin")?)?;
    }
    if let Some(v) = a.m {
        set_key(&mut t, "m", int_value(v, "m")?)?;
    }
    if let Some(v) = &a.marginal {
        v.parse::<linkmi::marginal::MarginalKind>()?;
        set_key(&mut t, "marginal", toml::Value::String(v.clone()))?;
    }
    if let Some(v) = a.iterations {
        set_key(&mut t, "gibbs.iterations", int_value(v, "iterations")?)?;
    }
    if let Some(v) = a.burn_in {
        set_key(&mut t, "gibbs.burn_in", int_value(v, "burn-in")?)?;
    }
    if let Some(v) = a.em_restarts {
        set_key(&mut t, "em.restarts", int_value(v, "em-restarts")?)?;
    }
    if let Some(v) = a.em_tolerance {
        set_key(&mut t, "em.tolerance", toml::Value::Float(v))?;
    }
    if let Some(v) = a.em_max_iterations {
        set_key(&mut t, "em.max_iterations", int_value(v, "em-max-iterations")?)?;
    }
    if a.write_datasets {
        set_key(&mut t, "write_datasets", toml::Value::Boolean(true))?;
    }
    apply_sets(&mut t, &a.overrides)?;
    let cfg: PipelineConfig = decode(t)?;
    cfg.validate()?;
    Ok(cfg)
}

fn study_table(config: Option<&Path>, output: Option<&Path>, seed: Option<u64>, o: &Overrides) -> CliResult<toml::Table> {
    let mut t = read_table(config)?;
    if let Some(p) = output {
        set_key(&mut t, "output", path_value(p))?;
    }
    if let Some(v) = seed {
        set_key(&mut t, "seed", int_value(v, "seed")?)?;
    }
    apply_sets(&mut t, o)?;
    Ok(t)
}

fn cmd_link(a: &PipelineArgs) -> CliResult<()> {
    let cfg = pipeline_config(a)?;
    let inputs = pipeline::load_inputs(&cfg)?;
    let linkage = pipeline::link(&inputs, &cfg)?;
    let written = pipeline::write_link_outputs(&cfg.output, &inputs, &linkage)?;
    pipeline::write_manifest(&cfg.output, "link", &cfg, &[], &written)?;
    let mean = linkage.chain.draws.iter().map(|d| d.n12() as f64).sum::<f64>() / linkage.chain.draws.len() as f64;
    println!(
        "{} draws retained, {mean:.2} links per draw on average; chain written to {}",
        linkage.chain.draws.len(),
        cfg.output.join("chain.jsonl").display()
    );
    Ok(())
}

fn cmd_fit(a: &FitArgs) -> CliResult<()> {
    let cfg = pipeline_config(&a.pipeline)?;
    let chain_path = a.chain.clone().unwrap_or_else(|| cfg.output.join("chain.jsonl"));
    if !chain_path.is_file() {
        return Err(invalid(format!("no chain at {}; run `linkmi link` first", chain_path.display())));
    }
    let inputs = pipeline::load_inputs(&cfg)?;
    let chain = pipeline::read_chain(&chain_path)?;
    let cmp = pipeline::compare(&inputs, &cfg)?;
    if chain.n1 != cmp.n1() || chain.draws.first().is_some_and(|d| d.links.len() != cmp.n2()) {
        return Err(invalid("the chain does not match the input files"));
    }
    let linkage = pipeline::Linkage { cmp, chain };
    let fit = pipeline::fit(&inputs, &linkage, &cfg)?;
    let written = pipeline::write_fit_outputs(&cfg.output, &cfg, &inputs, &linkage, &fit)?;
    pipeline::write_manifest(&cfg.output, "fit", &cfg, &[("chain".into(), chain_path)], &written)?;
    print!("{}", pipeline::summary_text(&cfg, &inputs, &linkage, &fit));
    Ok(())
}

fn cmd_run(a: &PipelineArgs) -> CliResult<()> {
    let cfg = pipeline_config(a)?;
    let out = pipeline::run_pipeline(&cfg)?;
    let inputs = pipeline::load_inputs(&cfg)?;
    print!("{}", pipeline::summary_text(&cfg, &inputs, &out.linkage, &out.fit));
    Ok(())
}

fn cmd_study(a: &StudyArgs) -> CliResult<()> {
    let mut t = study_table(a.config.as_deref(), a.output.as_deref(), a.seed, &a.overrides)?;
    if let Some(r) = a.replications {
        set_key(&mut t, "replications", int_value(r, "replications")?)?;
    }
    let cfg: StudyConfig = decode(t)?;
    cfg.validate()?;
    info!("running {} replications", cfg.replications);
    let result = study::run_study(&cfg)?;
    print!("{}", study::metrics_text(&result.metrics));
    Ok(())
}

fn cmd_simulate(a: &SimulateArgs) -> CliResult<()> {
    let mut t = study_table(a.config.as_deref(), a.output.as_deref(), None, &a.overrides)?;
    if let Some(s) = a.seed {
        set_key(&mut t, "scenario.seed", int_value(s, "seed")?)?;
    }
    let cfg: StudyConfig = decode(t)?;
    let mut scenario = cfg.scenario.clone();
    if let Some(rep) = a.replication {
        scenario.seed = derive_seed(cfg.seed, rep as u64);
    }
    let [e1, e2, e3] = cfg.table_exponents;
    let s = generate_scenario(&scenario, &FrequencyTables::zipf(e1, e2, e3))?;
    let written = s.write(&cfg.output)?;
    let config = serde_json::json!({
        "scenario": scenario,
        "table_exponents": cfg.table_exponents,
    });
    pipeline::write_manifest_value(&cfg.output, "simulate", scenario.seed, config, &[], &written)?;
    println!(
        "wrote {} and {} records, {} true links, {} seeds to {}",
        s.file1.len(),
        s.file2.len(),
        s.truth.links.len(),
        s.seeds.len(),
        cfg.output.display()
    );
    Ok(())
}

fn cmd_report(a: &ReportArgs) -> CliResult<()> {
    let log_path = if a.path.is_dir() {
        a.path.join("replications.csv")
    } else {
        a.path.clone()
    };
    if log_path.is_file() {
        let log = study::read_log(&log_path)?;
        let metrics = study::aggregate(&log);
        if let Some(out) = &a.output {
            study::write_metrics(out, &metrics)?;
        }
        print!("{}", study::metrics_text(&metrics));
        return Ok(());
    }
    let summary = a.path.join("summary.txt");
    if summary.is_file() {
        let text = std::fs::read_to_string(&summary).map_err(|e| CliError::Runtime(format!("{}: {e}", summary.display())))?;
        print!("{text}");
        return Ok(());
    }
    Err(invalid(format!(
        "{} is neither a study log nor a run directory with summary.txt",
        a.path.display()
    )))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match &cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Link(a) => cmd_link(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Run(a) => cmd_run(a),
        Command::Study(a) => cmd_study(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

//! Command-line front end: count-file I/O, subcommand dispatch and the JSON
//! result envelope.

use crate::bounds::bootstrap_bounds;
use crate::em::{run_em, EmConfig};
use crate::error::{Error, Result};
use crate::gibbs::{count_modes, default_bandwidth, gelman_rubin, run_gibbs, summarize, GibbsConfig, PosteriorDraws};
use crate::identification::local_identifiability;
use crate::model::{Model, ObservedCounts, Stratum};
use crate::model_checking::{lrt, posterior_predictive_p, Discrepancy};
use crate::sensitivity::{run_hierarchical_gibbs, DEFAULT_SIGMAS};
use crate::simulation::{builtin_scenario, builtin_scenarios, evaluate, Allocation, EvalConfig, Scenario};
use crate::stats::median;
use crate::surrogate::{
    evaluate_surrogate, predict_ace_y_bounds, predict_ace_y_monotone, predict_from_draws, sign_conclusion, sign_posterior,
    Sign,
};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};
use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
/// Environment variable holding the worker-thread count.
pub const THREADS_ENV: &str = "PSACE_THREADS";
const COUNTS_HEADER: [&str; 5] = ["trial", "z", "s", "y", "count"];
const UNITS_HEADER: [&str; 4] = ["trial", "z", "s", "y"];

#[derive(Debug, Parser, Serialize)]
#[command(name = "psace", version, about = "Principal-stratum causal effects from multiple randomized trials")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    /// Estimate parameters and effects by EM or Gibbs sampling.
    Fit(FitArgs),
    /// Per-trial sharp bounds with bootstrap intervals.
    Bounds(BoundsArgs),
    /// Goodness of fit and local identifiability.
    Check(CheckArgs),
    /// Hierarchical sensitivity analysis over a grid of sigma values.
    Sensitivity(SensitivityArgs),
    /// Repeated-sampling evaluation of the estimators on a scenario.
    Simulate(SimulateArgs),
    /// Predict the outcome effect in a new trial from its surrogate effect.
    Predict(PredictArgs),
    /// Assess causal necessity, sufficiency and the surrogate paradox.
    Evaluate(EvaluateArgs),
    /// Collapse a unit-level file (trial,z,s,y) into counts.
    Tabulate(TabulateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelArg {
    Monotone,
    Nonmonotone,
}

impl From<ModelArg> for Model {
    fn from(m: ModelArg) -> Model {
        Model::from_monotonicity(m == ModelArg::Monotone)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Em,
    Gibbs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DiscrepancyArg {
    Realized,
    Refit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum AllocationArg {
    Categorical,
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CaseArg {
    /// The new trial tests the same treatment.
    SameDrug,
    /// The new trial tests a different treatment.
    NewDrug,
}

#[derive(Debug, Args, Serialize)]
pub struct McmcArgs {
    #[arg(long, default_value_t = 20_000)]
    pub iterations: usize,
    #[arg(long, default_value_t = 4_000)]
    pub burnin: usize,
    #[arg(long, default_value_t = 1)]
    pub thin: usize,
    #[arg(long, default_value_t = 1)]
    pub chains: usize,
}

impl McmcArgs {
    fn config(&self, seed: u64) -> GibbsConfig {
        GibbsConfig::new(self.iterations, self.burnin, seed).chains(self.chains).thin(self.thin)
    }
}

#[derive(Debug, Args, Serialize)]
pub struct EmArgs {
    /// Random EM starts in addition to the barycenter.
    #[arg(long, default_value_t = 20)]
    pub starts: usize,
    #[arg(long, default_value_t = 1e-8)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 20_000)]
    pub max_iter: usize,
}

impl EmArgs {
    fn config(&self, seed: u64) -> EmConfig {
        EmConfig { tolerance: self.tolerance, max_iter: self.max_iter, n_starts: self.starts, seed }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct FitArgs {
    /// Count file with header `trial,z,s,y,count`.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum)]
    pub model: ModelArg,
    #[arg(long, value_enum, default_value = "em")]
    pub method: Method,
    #[command(flatten)]
    pub mcmc: McmcArgs,
    #[command(flatten)]
    pub em: EmArgs,
    /// Posterior quantile levels.
    #[arg(long, value_delimiter = ',', default_value = "0.025,0.5,0.975")]
    pub levels: Vec<f64>,
    #[arg(long)]
    pub seed: u64,
    /// JSON destination; standard output when absent.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct BoundsArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum)]
    pub model: ModelArg,
    /// Single 1-based trial; every trial when absent.
    #[arg(long)]
    pub trial: Option<usize>,
    #[arg(long, default_value_t = 1000)]
    pub bootstrap: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Optional CSV mirror of the interval table.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct CheckArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum)]
    pub model: ModelArg,
    /// Replicates for the posterior predictive p-value; 0 skips it.
    #[arg(long, default_value_t = 500)]
    pub ppp_reps: usize,
    #[arg(long, value_enum, default_value = "realized")]
    pub discrepancy: DiscrepancyArg,
    #[arg(long, default_value_t = 5_000)]
    pub iterations: usize,
    #[arg(long, default_value_t = 1_000)]
    pub burnin: usize,
    #[command(flatten)]
    pub em: EmArgs,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct SensitivityArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Spread of the trial logits around their centre.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_SIGMAS.to_vec())]
    pub sigma: Vec<f64>,
    #[command(flatten)]
    pub mcmc: McmcArgs,
    #[arg(long, value_delimiter = ',', default_value = "0.025,0.5,0.975")]
    pub levels: Vec<f64>,
    /// Also run the homogeneous sampler for comparison.
    #[arg(long)]
    pub with_homogeneous: bool,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct SimulateArgs {
    /// Built-in scenario name (see `--list`).
    #[arg(long, conflicts_with = "scenario_file", required_unless_present_any = ["scenario_file", "list"])]
    pub scenario: Option<String>,
    /// Scenario as JSON.
    #[arg(long)]
    pub scenario_file: Option<PathBuf>,
    /// Print the built-in catalogue and exit.
    #[arg(long)]
    pub list: bool,
    /// Units per trial.
    #[arg(long)]
    pub n: Option<u64>,
    #[arg(long, default_value_t = 200)]
    pub reps: usize,
    #[arg(long, value_enum)]
    pub allocation: Option<AllocationArg>,
    #[command(flatten)]
    pub mcmc: McmcArgs,
    #[arg(long, default_value_t = 20)]
    pub starts: usize,
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    /// Score the MLE only.
    #[arg(long)]
    pub em_only: bool,
    #[arg(long, required_unless_present = "list")]
    pub seed: Option<u64>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Optional per-replicate CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct PredictArgs {
    /// Surrogate effect `E[S(1) - S(0)]` in the new trial.
    #[arg(long, allow_negative_numbers = true)]
    pub ace_s_new: f64,
    #[arg(long, value_enum)]
    pub model: ModelArg,
    /// Count file of the validation trials; its posterior drives the prediction.
    #[arg(long, required_unless_present = "ace_ssbar", conflicts_with = "ace_ssbar")]
    pub input: Option<PathBuf>,
    /// Known effect in the `SSbar` stratum, instead of `--input`.
    #[arg(long, allow_negative_numbers = true)]
    pub ace_ssbar: Option<f64>,
    /// Known effect in the `SbarS` stratum (nonmonotone model).
    #[arg(long, allow_negative_numbers = true)]
    pub ace_sbars: Option<f64>,
    /// Which kind of new trial is assumed; recorded in the report.
    #[arg(long, value_enum, default_value = "same-drug")]
    pub case: CaseArg,
    #[command(flatten)]
    pub mcmc: McmcArgs,
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    #[arg(long, required_unless_present = "ace_ssbar")]
    pub seed: Option<u64>,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum)]
    pub model: ModelArg,
    #[command(flatten)]
    pub mcmc: McmcArgs,
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct TabulateArgs {
    /// Unit-level file with header `trial,z,s,y`.
    #[arg(long)]
    pub input: PathBuf,
    /// Count file destination; standard output when absent.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

fn check_header(record: &csv::StringRecord, expected: &[&str]) -> Result<()> {
    let got: Vec<&str> = record.iter().map(|f| f.trim().trim_start_matches('\u{feff}')).collect();
    if got != expected {
        return Err(Error::Parse { line: 1, message: format!("expected header `{}`, found `{}`", expected.join(","), got.join(",")) });
    }
    Ok(())
}

fn parse_field<T: std::str::FromStr>(record: &csv::StringRecord, i: usize, name: &str, line: usize) -> Result<T> {
    let raw = record.get(i).unwrap_or("").trim();
    raw.parse().map_err(|_| Error::Parse { line, message: format!("invalid {name} `{raw}`") })
}

fn binary(value: u8, name: &str, line: usize) -> Result<usize> {
    if value > 1 {
        return Err(Error::Parse { line, message: format!("{name} must be 0 or 1, found {value}") });
    }
    Ok(value as usize)
}

/// Rows of a `trial,...` file: `(trial, z, s, y, count)` with 1-based trials.
fn read_rows<R: Read>(reader: R, header: &[&str]) -> Result<Vec<(usize, usize, usize, usize, u64, usize)>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(reader);
    let mut rows = Vec::new();
    let mut records = rdr.records();
    match records.next() {
        None => return Err(Error::Parse { line: 1, message: "empty file; expected a header".into() }),
        Some(first) => check_header(&first.map_err(|e| Error::Parse { line: 1, message: e.to_string() })?, header)?,
    }
    for rec in records {
        let rec = rec.map_err(|e| Error::Parse { line: e.position().map_or(0, |p| p.line() as usize), message: e.to_string() })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.iter().all(|f| f.trim().is_empty()) {
            continue;
        }
        if rec.len() != header.len() {
            return Err(Error::Parse { line, message: format!("expected {} fields, found {}", header.len(), rec.len()) });
        }
        let trial: usize = parse_field(&rec, 0, "trial", line)?;
        if trial == 0 {
            return Err(Error::Parse { line, message: "trial ids start at 1".into() });
        }
        let z = binary(parse_field(&rec, 1, "z", line)?, "z", line)?;
        let s = binary(parse_field(&rec, 2, "s", line)?, "s", line)?;
        let y = binary(parse_field(&rec, 3, "y", line)?, "y", line)?;
        let count = if header.len() == 5 {
            parse_field::<u64>(&rec, 4, "count (non-negative integer)", line)?
        } else {
            1
        };
        rows.push((trial, z, s, y, count, line));
    }
    Ok(rows)
}

fn assemble(rows: &[(usize, usize, usize, usize, u64, usize)], warn_duplicates: bool) -> Result<(ObservedCounts, Vec<String>)> {
    let n = rows.iter().map(|r| r.0).max().ok_or(Error::Parse { line: 2, message: "no data rows".into() })?;
    let present: std::collections::BTreeSet<usize> = rows.iter().map(|r| r.0).collect();
    let missing: Vec<usize> = (1..=n).filter(|t| !present.contains(t)).collect();
    if !missing.is_empty() {
        return Err(Error::NonContiguousTrials { missing });
    }
    let mut counts = ObservedCounts::zeros(n);
    let mut seen: BTreeMap<(usize, usize, usize, usize), usize> = BTreeMap::new();
    let mut warnings = Vec::new();
    for &(t, z, s, y, c, line) in rows {
        if let Some(first) = seen.insert((t, z, s, y), line) {
            if warn_duplicates {
                warnings.push(format!("line {line}: duplicate cell (trial={t}, z={z}, s={s}, y={y}) first seen on line {first}; counts summed"));
            }
        }
        counts.add(t - 1, z, s, y, c as f64);
    }
    Ok((counts, warnings))
}

/// Reads a count file from any reader.
pub fn parse_counts<R: Read>(reader: R) -> Result<(ObservedCounts, Vec<String>)> {
    assemble(&read_rows(reader, &COUNTS_HEADER)?, true)
}

/// Reads a count file: header `trial,z,s,y,count`, contiguous 1-based trial
/// ids, binary `z, s, y` and non-negative integer counts. Cells that are
/// absent count as zero; repeated cells are summed with a warning.
pub fn parse_counts_csv(path: &Path) -> Result<(ObservedCounts, Vec<String>)> {
    parse_counts(open(path)?)
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

/// Reads a unit-level file (header `trial,z,s,y`, one row per unit).
pub fn parse_units<R: Read>(reader: R) -> Result<ObservedCounts> {
    Ok(assemble(&read_rows(reader, &UNITS_HEADER)?, false)?.0)
}

/// Writes all `8 N_R` cells, zeros included, in `trial, z, s, y` order.
pub fn write_counts<W: Write>(counts: &ObservedCounts, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(COUNTS_HEADER).map_err(io)?;
    for r in 0..counts.n_trials() {
        for z in 0..2 {
            for s in 0..2 {
                for y in 0..2 {
                    let c = counts.get(r, z, s, y);
                    w.write_record([(r + 1).to_string(), z.to_string(), s.to_string(), y.to_string(), format!("{c}")]).map_err(io)?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn load(path: &Path, warnings: &mut Vec<String>) -> Result<ObservedCounts> {
    let (counts, w) = parse_counts_csv(path)?;
    warnings.extend(w);
    Ok(counts)
}

fn timestamp() -> u64 {
    std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Wraps a result with the command, its configuration, the seed, the tool
/// version and a timestamp.
pub fn envelope(command: &str, seed: Option<u64>, config: &impl Serialize, result: Value, warnings: Vec<String>) -> Result<Value> {
    Ok(json!({
        "tool": "psace",
        "version": VERSION,
        "command": command,
        "timestamp": timestamp(),
        "seed": seed,
        "status": "ok",
        "config": serde_json::to_value(config)?,
        "warnings": warnings,
        "result": result,
    }))
}

fn error_report(e: &Error) -> Value {
    json!({
        "tool": "psace",
        "version": VERSION,
        "timestamp": timestamp(),
        "status": "error",
        "error": { "code": e.code(), "message": e.to_string(), "exit_code": e.exit_code() },
    })
}

fn ace_map(f: impl Fn(Stratum) -> Option<f64>) -> Value {
    let m: BTreeMap<String, f64> = Stratum::ALL.iter().filter_map(|&u| f(u).map(|v| (u.to_string(), v))).collect();
    json!(m)
}

fn gibbs_diagnostics(draws: &PosteriorDraws) -> Result<Value> {
    let mut psrf = BTreeMap::new();
    let mut modes = BTreeMap::new();
    for &u in draws.model.strata() {
        let xs = draws.ace(u)?;
        modes.insert(u.to_string(), count_modes(&xs, default_bandwidth(&xs)));
        if draws.chains.len() > 1 && draws.chains.iter().all(|c| c.len() >= 10) {
            psrf.insert(u.to_string(), gelman_rubin(&draws.per_chain(|p| p.ace(u).expect("stratum in model")))?);
        }
    }
    Ok(json!({ "psrf": psrf, "modes": modes, "draws": draws.len() }))
}

fn fit(args: &FitArgs) -> Result<Value> {
    let mut warnings = Vec::new();
    let counts = load(&args.input, &mut warnings)?;
    let model = Model::from(args.model);
    let result = match args.method {
        Method::Em => {
            let fit = run_em(&counts, model, &args.em.config(args.seed))?;
            warnings.extend(fit.warnings.iter().cloned());
            let s = fit.params.summary();
            json!({
                "method": "em",
                "params": fit.params,
                "ace": ace_map(|u| s.ace(u)),
                "ace_s": s.ace_s,
                "ace_y": s.ace_y,
                "log_likelihood": fit.log_likelihood,
                "iterations": fit.iterations,
                "converged": fit.converged,
                "start": fit.start,
            })
        }
        Method::Gibbs => {
            let draws = run_gibbs(&counts, model, &args.mcmc.config(args.seed))?;
            warnings.extend(draws.warnings.iter().cloned());
            let summary = summarize(&draws, &args.levels)?;
            json!({
                "method": "gibbs",
                "levels": summary.levels,
                "summary": summary.rows,
                "diagnostics": gibbs_diagnostics(&draws)?,
            })
        }
    };
    envelope("fit", Some(args.seed), args, result, warnings)
}

fn bounds(args: &BoundsArgs) -> Result<Value> {
    let mut warnings = Vec::new();
    let counts = load(&args.input, &mut warnings)?;
    let n = counts.n_trials();
    let trials: Vec<usize> = match args.trial {
        Some(t) if t == 0 || t > n => return Err(Error::TrialOutOfRange { trial: t, n_trials: n }),
        Some(t) => vec![t - 1],
        None => (0..n).collect(),
    };
    let mut results = Vec::new();
    for r in trials {
        let res = bootstrap_bounds(&counts, r, args.model.into(), args.bootstrap, args.seed)?;
        warnings.extend(res.warnings.iter().map(|w| format!("trial {}: {w}", r + 1)));
        results.push(res);
    }
    if let Some(path) = &args.csv {
        let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
        let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
        w.write_record(["trial", "stratum", "lower", "upper", "ci_lower", "ci_upper", "informative", "feasible"]).map_err(io)?;
        for res in &results {
            for s in &res.strata {
                w.write_record([
                    res.trial.to_string(),
                    s.stratum.to_string(),
                    s.lower.to_string(),
                    s.upper.to_string(),
                    s.ci_lower.to_string(),
                    s.ci_upper.to_string(),
                    s.informative.to_string(),
                    s.feasible.to_string(),
                ])
                .map_err(io)?;
            }
        }
        w.flush()?;
    }
    envelope("bounds", Some(args.seed), args, json!({ "trials": results }), warnings)
}

fn check(args: &CheckArgs) -> Result<Value> {
    let mut warnings = Vec::new();
    let counts = load(&args.input, &mut warnings)?;
    let model = Model::from(args.model);
    let em = args.em.config(args.seed);
    let gof = match lrt(&counts, model, &em) {
        Ok(report) => {
            if report.negative_statistic {
                warnings.push("the likelihood-ratio statistic was negative before clamping; EM may have stopped short".into());
            }
            json!({ "testable": true, "lrt": report })
        }
        Err(e @ Error::UntestableModel { .. }) => json!({
            "testable": false,
            "df": model.gof_df(counts.n_trials()),
            "reason": e.to_string(),
        }),
        Err(e) => return Err(e),
    };
    let fit = run_em(&counts, model, &em)?;
    let ident = local_identifiability(&fit.params)?;
    if !ident.necessary_condition {
        let need = if model.is_monotone() { 2 } else { 3 };
        warnings.push(format!(
            "{} trials fall short of the N_R >= {need} condition needed to identify the {model} model",
            counts.n_trials()
        ));
    }
    let ppp = if args.ppp_reps > 0 {
        let gibbs = GibbsConfig::new(args.iterations, args.burnin, args.seed);
        let draws = run_gibbs(&counts, model, &gibbs)?;
        let discrepancy = match args.discrepancy {
            DiscrepancyArg::Realized => Discrepancy::Realized,
            DiscrepancyArg::Refit => Discrepancy::Refit,
        };
        let res = posterior_predictive_p(&counts, &draws, args.ppp_reps, discrepancy, &em, args.seed)?;
        warnings.extend(res.warnings.iter().cloned());
        Some(res)
    } else {
        None
    };
    envelope(
        "check",
        Some(args.seed),
        args,
        json!({ "model": model, "goodness_of_fit": gof, "ppp": ppp, "identifiability": ident }),
        warnings,
    )
}

fn sensitivity(args: &SensitivityArgs) -> Result<Value> {
    let mut warnings = Vec::new();
    let counts = load(&args.input, &mut warnings)?;
    let config = args.mcmc.config(args.seed);
    let mut runs = Vec::new();
    for &sigma in &args.sigma {
        let draws = run_hierarchical_gibbs(&counts, sigma, &config)?;
        warnings.extend(draws.warnings.iter().map(|w| format!("sigma={sigma}: {w}")));
        runs.push(json!({
            "sigma": sigma,
            "summary": draws.summarize(&args.levels)?,
            "min_acceptance": draws.min_acceptance(),
            "acceptance": draws.acceptance,
            "fallbacks": draws.fallbacks,
        }));
    }
    let homogeneous = if args.with_homogeneous {
        let draws = run_gibbs(&counts, Model::Nonmonotone, &config)?;
        Some(summarize(&draws, &args.levels)?.rows)
    } else {
        None
    };
    envelope(
        "sensitivity",
        Some(args.seed),
        args,
        json!({
            "levels": args.levels,
            "pooled_scale": "ACE[u] rows are expit(mu_1u) - expit(mu_0u); ACE[u,r] rows are trial specific",
            "runs": runs,
            "homogeneous": homogeneous,
        }),
        warnings,
    )
}

fn simulate(args: &SimulateArgs) -> Result<Value> {
    if args.list {
        return envelope("simulate", None, args, json!({ "scenarios": builtin_scenarios() }), Vec::new());
    }
    let seed = args.seed.ok_or_else(|| Error::Config("--seed is required".into()))?;
    let mut scenario: Scenario = match (&args.scenario, &args.scenario_file) {
        (Some(name), None) => builtin_scenario(name)?,
        (None, Some(path)) => serde_json::from_reader(open(path)?)?,
        _ => return Err(Error::Config("give exactly one of --scenario and --scenario-file".into())),
    };
    if let Some(n) = args.n {
        scenario = scenario.with_n(n);
    }
    if let Some(a) = args.allocation {
        scenario = scenario.with_allocation(match a {
            AllocationArg::Categorical => Allocation::Categorical,
            AllocationArg::Fixed => Allocation::Fixed,
        });
    }
    let config = EvalConfig {
        em: EmConfig { n_starts: args.starts, ..EmConfig::default() },
        iterations: args.mcmc.iterations,
        burn_in: args.mcmc.burnin,
        chains: args.mcmc.chains,
        level: args.level,
        em_only: args.em_only,
    };
    let report = evaluate(&scenario, args.reps, &config, seed)?;
    if let Some(path) = &args.csv {
        report.write_replicates_csv(BufWriter::new(File::create(path)?))?;
    }
    let warnings = report.warnings.clone();
    envelope("simulate", Some(seed), args, serde_json::to_value(&report)?, warnings)
}

fn predict(args: &PredictArgs) -> Result<Value> {
    let model = Model::from(args.model);
    let case = serde_json::to_value(args.case)?;
    if let Some(ssbar) = args.ace_ssbar {
        let sbars = args.ace_sbars;
        let (prediction, sign) = if model.is_monotone() {
            if !(0.0..=1.0).contains(&args.ace_s_new) {
                return Err(Error::Precondition(format!("monotone surrogate effect {} must lie in [0, 1]", args.ace_s_new)));
            }
            let y = predict_ace_y_monotone(args.ace_s_new, ssbar);
            (json!({ "point": y }), sign_conclusion(Sign::of(args.ace_s_new), ssbar, f64::NAN, model))
        } else {
            let sbars = sbars.ok_or_else(|| Error::Config("--ace-sbars is required for the nonmonotone model".into()))?;
            let iv = predict_ace_y_bounds(args.ace_s_new, ssbar, sbars)?;
            (json!({ "interval": iv }), sign_conclusion(Sign::of(args.ace_s_new), ssbar, sbars, model))
        };
        let result = json!({ "case": case, "model": model, "ace_s_new": args.ace_s_new, "prediction": prediction, "sign": sign });
        return envelope("predict", args.seed, args, result, Vec::new());
    }
    let seed = args.seed.ok_or_else(|| Error::Config("--seed is required with --input".into()))?;
    let mut warnings = Vec::new();
    let path = args.input.as_ref().expect("clap enforces --input or --ace-ssbar");
    let counts = load(path, &mut warnings)?;
    let draws = run_gibbs(&counts, model, &args.mcmc.config(seed))?;
    warnings.extend(draws.warnings.iter().cloned());
    let verdict = evaluate_surrogate(&draws, args.level)?;
    if !verdict.necessity_holds() {
        warnings.push("causal necessity is not supported by the data; the prediction assumes it".into());
    }
    let prediction = predict_from_draws(&draws, args.ace_s_new, args.level)?;
    let signs = sign_posterior(&draws, Sign::of(args.ace_s_new))?;
    let result = json!({
        "case": case,
        "model": model,
        "ace_s_new": args.ace_s_new,
        "verdict": verdict,
        "prediction": prediction,
        "sign_probabilities": signs,
    });
    envelope("predict", Some(seed), args, result, warnings)
}

fn evaluate_cmd(args: &EvaluateArgs) -> Result<Value> {
    let mut warnings = Vec::new();
    let counts = load(&args.input, &mut warnings)?;
    let model = Model::from(args.model);
    let draws = run_gibbs(&counts, model, &args.mcmc.config(args.seed))?;
    warnings.extend(draws.warnings.iter().cloned());
    let verdict = evaluate_surrogate(&draws, args.level)?;
    let mut trials = Vec::new();
    for r in 0..counts.n_trials() {
        let s: Vec<f64> = draws.summaries().map(|d| d.ace_s[r]).collect();
        let y: Vec<f64> = draws.summaries().map(|d| d.ace_y[r]).collect();
        let paradox = s.iter().zip(&y).filter(|(a, b)| **a > 0.0 && **b < 0.0).count() as f64 / s.len() as f64;
        trials.push(json!({
            "trial": r + 1,
            "ace_s_median": median(&s),
            "ace_y_median": median(&y),
            "paradox_probability": paradox,
        }));
    }
    envelope("evaluate", Some(args.seed), args, json!({ "verdict": verdict, "trials": trials }), warnings)
}

fn tabulate(args: &TabulateArgs) -> Result<Vec<u8>> {
    let counts = parse_units(open(&args.input)?)?;
    let mut buf = Vec::new();
    write_counts(&counts, &mut buf)?;
    Ok(buf)
}

fn output_path(command: &Command) -> Option<&Path> {
    match command {
        Command::Fit(a) => a.output.as_deref(),
        Command::Bounds(a) => a.output.as_deref(),
        Command::Check(a) => a.output.as_deref(),
        Command::Sensitivity(a) => a.output.as_deref(),
        Command::Simulate(a) => a.output.as_deref(),
        Command::Predict(a) => a.output.as_deref(),
        Command::Evaluate(a) => a.output.as_deref(),
        Command::Tabulate(a) => a.output.as_deref(),
    }
}

/// Runs one parsed command and returns the bytes destined for its output.
pub fn run(cli: &Cli) -> Result<Vec<u8>> {
    let value = match &cli.command {
        Command::Fit(a) => fit(a)?,
        Command::Bounds(a) => bounds(a)?,
        Command::Check(a) => check(a)?,
        Command::Sensitivity(a) => sensitivity(a)?,
        Command::Simulate(a) => simulate(a)?,
        Command::Predict(a) => predict(a)?,
        Command::Evaluate(a) => evaluate_cmd(a)?,
        Command::Tabulate(a) => return tabulate(a),
    };
    let mut bytes = serde_json::to_vec_pretty(&value)?;
    bytes.push(b'\n');
    Ok(bytes)
}

fn configure_threads() {
    if let Some(n) = std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok()) {
        // Fails only if a pool already exists, in which case it is kept.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

/// Entry point behind the binary; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    configure_threads();
    let written = run(&cli).and_then(|bytes| {
        match output_path(&cli.command) {
            Some(path) => File::create(path)?.write_all(&bytes)?,
            None => std::io::stdout().write_all(&bytes)?,
        }
        Ok(())
    });
    match written {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", serde_json::to_string_pretty(&error_report(&e)).unwrap_or_else(|_| e.to_string()));
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_counts() {
        let mut text = String::from("trial,z,s,y,count\n");
        let mut k = 1;
        for z in 0..2 {
            for s in 0..2 {
                for y in 0..2 {
                    text.push_str(&format!("1,{z},{s},{y},{k}\r\n"));
                    k += 1;
                }
            }
        }
        let (c, w) = parse_counts(text.as_bytes()).unwrap();
        assert_eq!((c.n_trials(), c.total()), (1, 36.0));
        assert!(w.is_empty());
        assert_eq!(c.get(0, 1, 1, 1), 8.0);
    }

    #[test]
    fn header_and_row_errors() {
        let e = parse_counts("1,0,0,0,5\n".as_bytes()).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 1, .. }), "{e}");
        let e = parse_counts("trial,z,s,y,count\n1,0,0,0,5\n1,0,2,0,1\n".as_bytes()).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 3, .. }), "{e}");
        let e = parse_counts("trial,z,s,y,count\n1,0,0,0,-1\n".as_bytes()).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }));
        let e = parse_counts("trial,z,s,y,count\n1,0,0,0,2.5\n".as_bytes()).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }));
        let e = parse_counts("trial,z,s,y,count\n1,0,0,0\n".as_bytes()).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }));
        let e = parse_counts("trial,z,s,y,count\n1,0,0,0,1\n4,0,0,0,1\n".as_bytes()).unwrap_err();
        assert!(matches!(e, Error::NonContiguousTrials { ref missing } if missing == &vec![2, 3]));
    }

    #[test]
    fn duplicates_are_summed_with_warning() {
        let (c, w) = parse_counts("trial,z,s,y,count\n1,1,0,1,3\n1,1,0,1,4\n".as_bytes()).unwrap();
        assert_eq!(c.get(0, 1, 0, 1), 7.0);
        assert_eq!(w.len(), 1);
        assert!(w[0].contains("line 3"));
    }

    #[test]
    fn counts_round_trip_and_units() {
        let mut c = ObservedCounts::zeros(2);
        c.set(1, 1, 0, 1, 12.0);
        c.set(0, 0, 1, 0, 3.0);
        let mut buf = Vec::new();
        write_counts(&c, &mut buf).unwrap();
        assert_eq!(parse_counts(&buf[..]).unwrap().0, c);
        let units = parse_units("trial,z,s,y\n1,0,1,0\n2,1,0,1\n1,0,1,0\n".as_bytes()).unwrap();
        assert_eq!(units.get(0, 0, 1, 0), 2.0);
        assert_eq!(units.total(), 3.0);
    }

    #[test]
    fn seed_is_mandatory() {
        assert!(Cli::try_parse_from(["psace", "fit", "--input", "x.csv", "--model", "monotone"]).is_err());
        assert!(Cli::try_parse_from(["psace", "simulate", "--scenario", "monotone-2"]).is_err());
        assert!(Cli::try_parse_from(["psace", "simulate", "--list"]).is_ok());
        assert!(Cli::try_parse_from(["psace", "predict", "--ace-s-new", "0.2", "--model", "monotone", "--ace-ssbar", "0.5"]).is_ok());
        assert!(Cli::try_parse_from(["psace", "predict", "--ace-s-new", "0.2", "--model", "monotone", "--input", "x"]).is_err());
        assert!(Cli::try_parse_from([
            "psace", "simulate", "--scenario", "a", "--scenario-file", "b", "--seed", "1"
        ])
        .is_err());
    }
}

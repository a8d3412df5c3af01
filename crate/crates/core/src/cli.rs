//! Command-line front end.
//!
//! Exit codes: `0` success, `2` invalid input or arguments, `3` solver
//! failure. Data goes to stdout or `--out`; diagnostics go to stderr.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use serde::Serialize;
use serde_json::json;

use crate::data::{load_csv, read_column, validate, ColumnMap, EstimatorKind};
use crate::error::{LateError, Result};
use crate::estimators::{estimate, Denominator, LateEstimate, ScoreSource};
use crate::inference::{infer, Scores};
use crate::ips::{fit_cb, fit_ml, IpsFit};
use crate::simulation::{
    export_to_path, oracle_record, run_mc, Cell, Design, DesignName, Export, Format, Frame, McConfig,
    DEFAULT_ORACLE_DRAWS, DEFAULT_ORACLE_SEED,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_SOLVER: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "late", version, about = "Weighting estimators of the local average treatment effect")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate the LATE on a CSV file.
    Estimate(EstimateArgs),
    /// Run a Monte Carlo study for one design cell.
    Simulate(SimulateArgs),
    /// Compute and cross-check the true LATE of the simulation designs.
    Oracle(OracleArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum IpsChoice {
    /// Covariate balancing for `cb`, logit ML for the rest.
    Auto,
    Ml,
    Cb,
    /// Scores read from the `--pscore` column.
    Known,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum FormatArg {
    Csv,
    Json,
}

impl From<FormatArg> for Format {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Csv => Format::Csv,
            FormatArg::Json => Format::Json,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct EstimateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub y: String,
    #[arg(long)]
    pub d: String,
    #[arg(long)]
    pub z: String,
    /// Comma-separated covariate columns.
    #[arg(long, value_delimiter = ',')]
    pub x: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "cb,tnorm,a10,a,t,a0,iv")]
    pub estimators: Vec<String>,
    #[arg(long, value_enum, default_value = "auto")]
    pub ips: IpsChoice,
    /// Column holding known instrument propensities (with `--ips known`).
    #[arg(long)]
    pub pscore: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    pub format: FormatArg,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    pub manifest_only: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct SimulateArgs {
    #[arg(long)]
    pub design: String,
    #[arg(long, default_value_t = 0.05)]
    pub delta: f64,
    #[arg(long, default_value_t = 5000)]
    pub n: usize,
    /// Defaults to 2000, or 500 when delta <= 0.01.
    #[arg(long)]
    pub reps: Option<usize>,
    /// Use 10,000 replications unless `--reps` is given.
    #[arg(long)]
    pub full: bool,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long, value_delimiter = ',', default_value = "iv,cb,tnorm,a10,a,t,a0")]
    pub estimators: Vec<String>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "csv")]
    pub format: FormatArg,
    #[arg(long)]
    pub manifest_only: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct OracleArgs {
    /// Design to evaluate; all designs when omitted.
    #[arg(long)]
    pub design: Option<String>,
    /// Accepted for symmetry with `simulate`; the true LATE does not depend on it.
    #[arg(long, default_value_t = 0.05)]
    pub delta: f64,
    #[arg(long, default_value_t = DEFAULT_ORACLE_DRAWS)]
    pub draws: u64,
    #[arg(long, default_value_t = DEFAULT_ORACLE_SEED)]
    pub seed: u64,
    /// Write the oracle cache (JSON) here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    pub format: FormatArg,
    #[arg(long)]
    pub manifest_only: bool,
}

/// An error tagged with the pipeline stage it came from.
#[derive(Debug)]
pub struct StageError {
    pub stage: &'static str,
    pub error: LateError,
}

impl StageError {
    pub fn exit_code(&self) -> i32 {
        if self.error.is_solver_failure() {
            EXIT_SOLVER
        } else {
            EXIT_INVALID
        }
    }
}

impl std::fmt::Display for StageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} failed: {}", self.stage, self.error)
    }
}

trait Stage<T> {
    fn stage(self, stage: &'static str) -> std::result::Result<T, StageError>;
}

impl<T> Stage<T> for Result<T> {
    fn stage(self, stage: &'static str) -> std::result::Result<T, StageError> {
        self.map_err(|error| StageError { stage, error })
    }
}

type CliResult = std::result::Result<(), StageError>;

/// Parses `args` and runs the command; returns the process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Estimate(a) => cmd_estimate(&a),
        Command::Simulate(a) => cmd_simulate(&a),
        Command::Oracle(a) => cmd_oracle(&a),
    }
}

fn parse_estimators(list: &[String]) -> Result<Vec<EstimatorKind>> {
    let mut out = Vec::new();
    for s in list.iter().filter(|s| !s.trim().is_empty()) {
        let k: EstimatorKind = s.parse()?;
        if !out.contains(&k) {
            out.push(k);
        }
    }
    if out.is_empty() {
        return Err(LateError::InvalidArgument("no estimators requested".into()));
    }
    Ok(out)
}

fn manifest(subcommand: &str, config: &impl Serialize, extra: serde_json::Value) -> serde_json::Value {
    json!({
        "tool": "late",
        "version": env!("CARGO_PKG_VERSION"),
        "subcommand": subcommand,
        "config": config,
        "resolved": extra,
    })
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| LateError::io(path, e))
}

fn manifest_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn write_frame(frame: &Frame, format: Format, out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => {
            let file = std::fs::File::create(path).map_err(|e| LateError::io(path, e))?;
            let mut w = std::io::BufWriter::new(file);
            frame.write(format, &mut w)?;
            w.flush().map_err(|e| LateError::io(path, e))
        }
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            frame.write(format, &mut lock)?;
            lock.flush().map_err(|e| LateError::io("<stdout>", e))
        }
    }
}

fn source_for(kind: EstimatorKind, ips: IpsChoice) -> Result<Option<ScoreSource>> {
    Ok(match (kind, ips) {
        (EstimatorKind::LinearIv, _) => None,
        (EstimatorKind::Cb, IpsChoice::Auto | IpsChoice::Cb) => Some(ScoreSource::Cb),
        (EstimatorKind::Cb, other) => {
            return Err(LateError::MethodMismatch(format!(
                "the cb estimator needs covariate-balancing scores but --ips {} was given",
                serde_json::to_value(other)?.as_str().unwrap_or("?")
            )))
        }
        (_, IpsChoice::Auto | IpsChoice::Ml) => Some(ScoreSource::Ml),
        (_, IpsChoice::Cb) => Some(ScoreSource::Cb),
        (_, IpsChoice::Known) => Some(ScoreSource::Known),
    })
}

pub const ESTIMATE_COLUMNS: [&str; 11] = [
    "estimator",
    "ips",
    "tau",
    "se",
    "numerator",
    "kappa",
    "kappa1",
    "kappa0",
    "hajek_d",
    "first_stage",
    "warnings",
];

fn estimate_row(est: &LateEstimate, source: Option<ScoreSource>) -> Vec<Cell> {
    let den = |d: Denominator| Cell::Num(est.denominators.get(&d).copied());
    let warnings: Vec<String> = est.warnings.iter().map(|w| w.to_string()).collect();
    vec![
        Cell::Text(Some(est.kind.label().into())),
        Cell::Text(Some(source.map_or("none".to_string(), |s| s.to_string()))),
        Cell::Num(Some(est.tau)),
        Cell::Num(est.se),
        Cell::Num(Some(est.numerator)),
        den(Denominator::K),
        den(Denominator::K1),
        den(Denominator::K0),
        den(Denominator::HajekD),
        den(Denominator::FirstStage),
        Cell::Text(if warnings.is_empty() { None } else { Some(warnings.join("; ")) }),
    ]
}

fn cmd_estimate(a: &EstimateArgs) -> CliResult {
    let kinds = parse_estimators(&a.estimators).stage("argument parsing")?;
    let sources: Vec<Option<ScoreSource>> = kinds
        .iter()
        .map(|&k| source_for(k, a.ips))
        .collect::<Result<_>>()
        .stage("argument parsing")?;
    if a.ips == IpsChoice::Known && a.pscore.is_none() {
        return Err(LateError::InvalidArgument("--ips known requires --pscore <column>".into()))
            .stage("argument parsing");
    }
    let format: Format = a.format.into();
    let resolved = json!({
        "estimators": kinds.iter().map(|k| k.label()).collect::<Vec<_>>(),
        "score_sources": sources.iter().map(|s| s.map(|s| s.to_string())).collect::<Vec<_>>(),
    });
    let man = manifest("estimate", a, resolved);
    if a.manifest_only {
        println!("{}", serde_json::to_string_pretty(&man).expect("serializable"));
        return Ok(());
    }

    let covs: Vec<&str> = a.x.iter().map(String::as_str).filter(|s| !s.is_empty()).collect();
    let map = ColumnMap::new(&a.y, &a.d, &a.z, &covs);
    let ds = load_csv(&a.data, &map).stage("loading data")?;
    for w in validate(&ds).warnings {
        eprintln!("warning: {w}");
    }

    let needs = |s: ScoreSource| sources.contains(&Some(s));
    let ml: Option<IpsFit> = if needs(ScoreSource::Ml) {
        Some(fit_ml(&ds).stage("logit propensity fit")?)
    } else {
        None
    };
    let cb: Option<IpsFit> = if needs(ScoreSource::Cb) {
        Some(fit_cb(&ds, ml.as_ref().map(|f| &f.alpha)).stage("covariate balancing fit")?)
    } else {
        None
    };
    let known: Option<DVector<f64>> = match &a.pscore {
        Some(col) if a.ips == IpsChoice::Known => {
            let v = read_column(&a.data, col).stage("loading propensity scores")?;
            if v.len() != ds.n() {
                return Err(LateError::LengthMismatch {
                    expected: ds.n(),
                    got: v.len(),
                })
                .stage("loading propensity scores");
            }
            Some(DVector::from_vec(v))
        }
        _ => None,
    };

    let mut rows = Vec::new();
    for (&kind, &source) in kinds.iter().zip(&sources) {
        let est = match source {
            None => estimate(&ds, kind, &DVector::from_element(ds.n(), 0.5), ScoreSource::Known),
            Some(ScoreSource::Known) => {
                let p = known.as_ref().expect("checked above");
                estimate(&ds, kind, p, ScoreSource::Known).and_then(|e| infer(&ds, Scores::Known(p), &e))
            }
            Some(s) => {
                let fit = if s == ScoreSource::Cb { cb.as_ref() } else { ml.as_ref() }.expect("fitted above");
                estimate(&ds, kind, &fit.p, s).and_then(|e| infer(&ds, Scores::Fitted(fit), &e))
            }
        }
        .stage("estimation")?;
        for w in &est.warnings {
            eprintln!("warning: {}: {w}", kind.label());
        }
        rows.push(estimate_row(&est, source));
    }
    let frame = Frame {
        header: ESTIMATE_COLUMNS.iter().map(|s| s.to_string()).collect(),
        rows,
    };
    write_frame(&frame, format, a.out.as_deref()).stage("writing output")?;
    match &a.out {
        Some(out) => write_json(&manifest_path(out), &man).stage("writing manifest")?,
        None => eprintln!("{}", serde_json::to_string(&man).expect("serializable")),
    }
    Ok(())
}

fn cmd_simulate(a: &SimulateArgs) -> CliResult {
    let name: DesignName = a.design.parse().stage("argument parsing")?;
    let design = Design::try_new(name, a.delta).stage("argument parsing")?;
    let kinds = parse_estimators(&a.estimators).stage("argument parsing")?;
    if a.n < 2 {
        return Err(LateError::InvalidArgument("--n must be at least 2".into())).stage("argument parsing");
    }
    let reps = match (a.reps, a.full) {
        (Some(r), _) => r,
        (None, true) => 10_000,
        (None, false) if a.delta <= 0.01 => 500,
        (None, false) => 2000,
    };
    if reps == 0 {
        return Err(LateError::InvalidArgument("--reps must be at least 1".into())).stage("argument parsing");
    }
    let format: Format = a.format.into();
    let files: Vec<String> = Export::ALL
        .iter()
        .map(|e| format!("{}.{}", e.stem(), format.extension()))
        .collect();
    let resolved = json!({
        "design": name.as_str(),
        "theta0": design.theta0,
        "reps": reps,
        "estimators": kinds.iter().map(|k| k.label()).collect::<Vec<_>>(),
        "replication_seeds": "splitmix64(splitmix64(seed) ^ rep * 0xD1B54A32D192ED03)",
        "files": files,
    });
    let mut man = manifest("simulate", a, resolved);
    if a.manifest_only {
        println!("{}", serde_json::to_string_pretty(&man).expect("serializable"));
        return Ok(());
    }

    let mut cfg = McConfig::new(design, a.n, reps, a.seed);
    cfg.estimators = kinds;
    cfg.threads = a.threads;
    let summary = run_mc(&cfg).stage("simulation")?;

    std::fs::create_dir_all(&a.out)
        .map_err(|e| LateError::io(&a.out, e))
        .stage("writing output")?;
    for (what, file) in Export::ALL.iter().zip(&files) {
        export_to_path(&summary, *what, format, &a.out.join(file)).stage("writing output")?;
    }
    man["results"] = json!({
        "true_late": summary.true_late,
        "failed_reps": summary.failed_reps,
        "estimator_failures": summary.rows.iter().map(|r| (r.kind.label(), r.failures)).collect::<std::collections::BTreeMap<_, _>>(),
    });
    write_json(&a.out.join("manifest.json"), &man).stage("writing manifest")?;
    if summary.failed_reps > 0 {
        eprintln!("warning: {} of {} replications failed in the propensity fits", summary.failed_reps, reps);
    }

    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    crate::simulation::export(&summary, Export::Table, format, &mut lock).stage("writing output")?;
    Ok(())
}

pub const ORACLE_COLUMNS: [&str; 7] = [
    "design",
    "true_late",
    "method",
    "check_value",
    "check_draws",
    "oracle_seed",
    "discrepancy",
];

fn cmd_oracle(a: &OracleArgs) -> CliResult {
    let names: Vec<DesignName> = match &a.design {
        Some(d) => vec![d.parse().stage("argument parsing")?],
        None => DesignName::ALL.to_vec(),
    };
    if !(a.delta > 0.0 && a.delta < 0.5) {
        return Err(LateError::InvalidArgument(format!("delta must lie in (0, 0.5), got {}", a.delta)))
            .stage("argument parsing");
    }
    if a.draws == 0 {
        return Err(LateError::InvalidArgument("--draws must be positive".into())).stage("argument parsing");
    }
    let man = manifest(
        "oracle",
        a,
        json!({ "designs": names.iter().map(|n| n.as_str()).collect::<Vec<_>>() }),
    );
    if a.manifest_only {
        println!("{}", serde_json::to_string_pretty(&man).expect("serializable"));
        return Ok(());
    }
    let records: Vec<_> = names.iter().map(|&n| oracle_record(n, a.draws, a.seed)).collect();
    let frame = Frame {
        header: ORACLE_COLUMNS.iter().map(|s| s.to_string()).collect(),
        rows: records
            .iter()
            .map(|r| {
                vec![
                    Cell::Text(Some(r.design.clone())),
                    Cell::Num(Some(r.true_late)),
                    Cell::Text(Some(r.method.clone())),
                    Cell::Num(Some(r.check_value)),
                    Cell::Int(r.check_draws),
                    Cell::Int(r.oracle_seed),
                    Cell::Num(Some(r.discrepancy)),
                ]
            })
            .collect(),
    };
    write_frame(&frame, a.format.into(), None).stage("writing output")?;
    if let Some(out) = &a.out {
        crate::simulation::write_cache(out, &records).stage("writing oracle cache")?;
        write_json(&manifest_path(out), &man).stage("writing manifest")?;
    }
    Ok(())
}

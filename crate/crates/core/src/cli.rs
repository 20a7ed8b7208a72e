//! `tdisagg` command line.
//!
//! Exit codes: 0 on success, 1 for input or validation errors, 2 for
//! numerical failures.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use rayon::prelude::*;

use crate::completer::{complete, CompletionConfig, InterpMethod};
use crate::conversion::{build_c, AggregationRule, ConversionMatrix};
use crate::ensemble::{run_ensemble_on, to_model, EnsembleError, EnsembleResult, DEFAULT_MEMBERS};
use crate::frame::{parse_csv, validate, write_csv, Frame, ValidationReport};
use crate::models::{fit, FitOptions, FitResult, MethodId, ModelError};
use crate::postestimation::{adjust, AdjustmentReport};
use crate::retropolarizer::{retropolate, RetroError, RetroMethod};
use crate::rho::{RhoObjective, DEFAULT_BOUNDS};
use crate::synth::{generate, SynthConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;

#[derive(Debug)]
pub enum CliError {
    Input(String),
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => EXIT_INPUT,
            CliError::Numerical(_) => EXIT_NUMERICAL,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Input(m) | CliError::Numerical(m) => m,
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::LengthMismatch { .. } | ModelError::InvalidOption(_) | ModelError::NotASingleMethod(_) => {
                CliError::Input(e.to_string())
            }
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<RetroError> for CliError {
    fn from(e: RetroError) -> Self {
        match e {
            RetroError::DegenerateIndicator(_) => CliError::Numerical(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<EnsembleError> for CliError {
    fn from(e: EnsembleError) -> Self {
        match e {
            EnsembleError::AllMembersFailed(ref failures) => {
                let detail: Vec<String> = failures.iter().map(|(m, msg)| format!("{m}: {msg}")).collect();
                CliError::Numerical(format!("{e} ({})", detail.join("; ")))
            }
            EnsembleError::NonFinite => CliError::Numerical(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

fn input_err(e: impl std::fmt::Display) -> CliError {
    CliError::Input(e.to_string())
}

type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OutputFormat {
    Table,
    Csv,
}

#[derive(Debug, Parser)]
#[command(name = "tdisagg", version, about = "Temporal disaggregation of low-frequency series")]
pub struct Cli {
    /// Input CSV with columns index,grain,y,X
    #[arg(short, long, global = true)]
    pub input: Option<PathBuf>,
    /// Output file; standard output when omitted
    #[arg(short, long, global = true)]
    pub output: Option<PathBuf>,
    /// Aggregation rule linking sub-periods to group targets
    #[arg(long, global = true, default_value = "sum")]
    pub conversion: AggregationRule,
    #[arg(long, global = true, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, global = true, value_enum, default_value = "table")]
    pub format: OutputFormat,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check an input file and report findings
    Validate,
    /// Disaggregate with one method
    Fit(FitArgs),
    /// Weighted combination of several methods
    Ensemble(EnsembleArgs),
    /// Remove negative predictions while keeping group aggregates
    Adjust(AdjustArgs),
    /// Impute missing group targets
    Retropolate(RetroArgs),
    /// Error metrics for several methods side by side
    Compare(CompareArgs),
    /// Render predictions as SVG
    Plot(PlotArgs),
    /// Generate a synthetic AR(1) data set
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// Fixed autocorrelation for chow-lin and litterman
    #[arg(long, allow_negative_numbers = true)]
    pub rho: Option<f64>,
    /// Difference order for denton
    #[arg(long, default_value_t = 1)]
    pub denton_h: usize,
    #[arg(long)]
    pub no_intercept: bool,
    /// Objective for the -opt methods
    #[arg(long)]
    pub rho_method: Option<RhoObjective>,
    /// Search interval for the -opt methods, as lo,hi
    #[arg(long, value_parser = parse_bounds, allow_hyphen_values = true)]
    pub rho_bounds: Option<(f64, f64)>,
    /// Column holding per-period weights for denton-cholette
    #[arg(long)]
    pub weights: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct PrepArgs {
    #[arg(long, default_value = "linear")]
    pub x_interp: InterpMethod,
    /// Drop partial boundary groups instead of padding them
    #[arg(long)]
    pub no_pad: bool,
    /// Method used when some group targets are missing
    #[arg(long, default_value = "auto")]
    pub retro_method: RetroMethod,
    /// Column whose group aggregate replaces X for imputation
    #[arg(long)]
    pub aux: Option<String>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long, default_value = "chow-lin-opt")]
    pub method: MethodId,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub prep: PrepArgs,
    /// Also write y_hat_adjusted with negatives removed
    #[arg(long)]
    pub adjust: bool,
    /// Write an SVG plot of the result
    #[arg(long)]
    pub plot: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EnsembleArgs {
    /// Comma-separated member methods
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<MethodId>>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub prep: PrepArgs,
    #[arg(long)]
    pub adjust: bool,
    #[arg(long)]
    pub plot: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AdjustArgs {
    /// Prediction column to adjust
    #[arg(long, default_value = "y_hat")]
    pub column: String,
}

#[derive(Debug, Args)]
pub struct RetroArgs {
    #[arg(long, default_value = "auto")]
    pub method: RetroMethod,
    #[arg(long)]
    pub aux: Option<String>,
    #[arg(long, default_value = "linear")]
    pub x_interp: InterpMethod,
    #[arg(long)]
    pub no_pad: bool,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Comma-separated methods; all single methods when omitted
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<MethodId>>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub prep: PrepArgs,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    #[arg(long, default_value = "y_hat")]
    pub column: String,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 20)]
    pub n_l: usize,
    #[arg(long, default_value_t = 4)]
    pub m: usize,
    #[arg(long, default_value_t = 0.5, allow_negative_numbers = true)]
    pub rho: f64,
    #[arg(long, default_value_t = 2.0, allow_negative_numbers = true)]
    pub beta: f64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub intercept: f64,
    #[arg(long, default_value_t = 1.0)]
    pub noise_sd: f64,
}

fn parse_bounds(s: &str) -> Result<(f64, f64), String> {
    let (lo, hi) = s.split_once(',').ok_or_else(|| format!("expected lo,hi, got `{s}`"))?;
    let lo: f64 = lo.trim().parse().map_err(|e| format!("bad lower bound: {e}"))?;
    let hi: f64 = hi.trim().parse().map_err(|e| format!("bad upper bound: {e}"))?;
    Ok((lo, hi))
}

/// Parses arguments, runs the command and returns the exit code. Errors
/// are reported on standard error.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}

pub fn execute(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Validate => cmd_validate(cli),
        Command::Fit(args) => cmd_fit(cli, args),
        Command::Ensemble(args) => cmd_ensemble(cli, args),
        Command::Adjust(args) => cmd_adjust(cli, args),
        Command::Retropolate(args) => cmd_retropolate(cli, args),
        Command::Compare(args) => cmd_compare(cli, args),
        Command::Plot(args) => cmd_plot(cli, args),
        Command::Synth(args) => cmd_synth(cli, args),
    }
}

fn read_input(cli: &Cli) -> CliResult<Vec<u8>> {
    let path = cli.input.as_ref().ok_or_else(|| CliError::Input("missing --input".into()))?;
    std::fs::read(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    std::fs::write(path, bytes).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

/// Writes the main artifact to `--output`, or to standard output.
fn emit_artifact(cli: &Cli, bytes: &[u8]) -> CliResult<()> {
    match &cli.output {
        Some(path) => write_file(path, bytes),
        None => std::io::stdout().write_all(bytes).map_err(input_err),
    }
}

/// Summaries go to standard output unless that carries the artifact.
fn emit_summary(cli: &Cli, text: &str) {
    if cli.output.is_some() {
        print!("{text}");
    } else {
        eprint!("{text}");
    }
}

fn report_text(report: &ValidationReport, format: OutputFormat) -> String {
    let mut out = String::new();
    match format {
        OutputFormat::Csv => {
            out.push_str("severity,code,index,grain,message\n");
            let rows = report.errors.iter().map(|f| ("error", f)).chain(report.warnings.iter().map(|f| ("warning", f)));
            for (severity, f) in rows {
                let index = f.index.as_ref().map(|i| i.to_string()).unwrap_or_default();
                let grain = f.grain.map(|g| g.to_string()).unwrap_or_default();
                let _ = writeln!(out, "{severity},{:?},{index},{grain},\"{}\"", f.code, f.message.replace('"', "\"\""));
            }
        }
        OutputFormat::Table => {
            for f in &report.errors {
                let _ = writeln!(out, "error    {:?}: {}", f.code, f.message);
            }
            for f in &report.warnings {
                let _ = writeln!(out, "warning  {:?}: {}", f.code, f.message);
            }
            let _ = writeln!(
                out,
                "{} error(s), {} warning(s): {}",
                report.errors.len(),
                report.warnings.len(),
                if report.is_accepted() { "accepted" } else { "rejected" }
            );
        }
    }
    out
}

fn cmd_validate(cli: &Cli) -> CliResult<()> {
    let bytes = read_input(cli)?;
    let frame = parse_csv(&bytes).map_err(input_err)?;
    let report = validate(&frame);
    let text = report_text(&report, cli.format);
    match &cli.output {
        Some(path) => write_file(path, text.as_bytes())?,
        None => print!("{text}"),
    }
    if report.is_accepted() {
        Ok(())
    } else {
        Err(CliError::Input(format!("{} validation error(s)", report.errors.len())))
    }
}

/// Frame after validation, completion and imputation, ready to fit.
struct Prepared {
    frame: Frame,
    y_l: Vec<f64>,
    x: Vec<f64>,
    cm: ConversionMatrix,
    imputed: Vec<usize>,
}

fn load_validated(cli: &Cli) -> CliResult<Frame> {
    let bytes = read_input(cli)?;
    let frame = parse_csv(&bytes).map_err(input_err)?;
    let report = validate(&frame);
    for w in &report.warnings {
        warn!("{:?}: {}", w.code, w.message);
    }
    if !report.is_accepted() {
        eprint!("{}", report_text(&report, OutputFormat::Table));
        return Err(CliError::Input(format!("{} validation error(s)", report.errors.len())));
    }
    if frame.is_empty() {
        return Err(CliError::Input("input has no rows".into()));
    }
    Ok(frame)
}

fn prepare(cli: &Cli, prep: &PrepArgs) -> CliResult<Prepared> {
    let frame = load_validated(cli)?;
    let config = CompletionConfig { x_method: prep.x_interp, pad_boundaries: !prep.no_pad };
    let (frame, log) = complete(&frame, config).map_err(input_err)?;
    if !log.padded_groups.is_empty() {
        let names: Vec<String> = log.padded_groups.iter().map(|g| g.to_string()).collect();
        eprintln!("notice: padded partial boundary groups {}", names.join(", "));
    }
    if !log.trimmed_groups.is_empty() {
        let names: Vec<String> = log.trimmed_groups.iter().map(|g| g.to_string()).collect();
        eprintln!("notice: dropped partial boundary groups {}", names.join(", "));
    }
    info!("completion inserted {} rows, imputed {} X values", log.inserted.len(), log.imputed_x.len());
    if frame.is_empty() {
        return Err(CliError::Input("no complete groups left to fit".into()));
    }

    let cm = build_c(&frame, cli.conversion).map_err(input_err)?;
    let x = frame.x_complete().ok_or_else(|| CliError::Input("X has gaps after completion".into()))?;
    let targets = frame.group_targets();
    let (frame, y_l, imputed) = if targets.iter().any(Option::is_none) {
        let result = impute_targets(&frame, &targets, &x, &cm, prep.retro_method, prep.aux.as_deref(), cli.seed)?;
        eprintln!(
            "notice: imputed {} group target(s) with {}",
            result.imputed_groups.len(),
            result.method_used
        );
        let filled: Vec<Option<f64>> = result.y_l_filled.iter().map(|v| Some(*v)).collect();
        (frame.with_group_targets(&filled), result.y_l_filled, result.imputed_groups)
    } else {
        let y_l = targets.into_iter().map(Option::unwrap).collect();
        (frame, y_l, Vec::new())
    };
    Ok(Prepared { frame, y_l, x, cm, imputed })
}

fn impute_targets(
    frame: &Frame,
    targets: &[Option<f64>],
    x: &[f64],
    cm: &ConversionMatrix,
    method: RetroMethod,
    aux: Option<&str>,
    seed: u64,
) -> CliResult<crate::retropolarizer::RetroResult> {
    let predictor = match aux {
        Some(name) => {
            let column = frame.extra(name).ok_or_else(|| CliError::Input(format!("no column `{name}`")))?;
            column
                .into_iter()
                .collect::<Option<Vec<f64>>>()
                .ok_or_else(|| CliError::Input(format!("column `{name}` has missing values")))?
        }
        None => x.to_vec(),
    };
    let x_l = cm.aggregate(&predictor).map_err(input_err)?;
    let method = match method {
        RetroMethod::Mlp(mut cfg) => {
            cfg.seed = seed;
            RetroMethod::Mlp(cfg)
        }
        other => other,
    };
    Ok(retropolate(targets, &x_l, method)?)
}

fn fit_options(frame: &Frame, model: &ModelArgs) -> CliResult<FitOptions> {
    let weights = match &model.weights {
        Some(name) => {
            let column = frame.extra(name).ok_or_else(|| CliError::Input(format!("no column `{name}`")))?;
            Some(column.into_iter().map(|v| v.unwrap_or(0.0)).collect())
        }
        None => None,
    };
    Ok(FitOptions {
        intercept: Some(!model.no_intercept),
        rho: model.rho,
        denton_h: model.denton_h,
        weights,
        rho_objective: model.rho_method,
        rho_bounds: model.rho_bounds.unwrap_or(DEFAULT_BOUNDS),
    })
}

fn fmt_num(v: f64) -> String {
    if v == 0.0 || (1e-4..1e7).contains(&v.abs()) {
        format!("{v:.6}")
    } else {
        format!("{v:.6e}")
    }
}

fn fit_summary(result: &FitResult, p: &Prepared, rule: AggregationRule, model: &ModelArgs, format: OutputFormat) -> String {
    let gap = result.consistency_gap(&p.y_l, &p.cm);
    let names = result.coefficient_names();
    let mut out = String::new();
    if format == OutputFormat::Csv {
        out.push_str("term,estimate,std_error,t_value,p_value,stars\n");
        if let Some(beta) = &result.beta {
            for (k, b) in beta.iter().enumerate() {
                match &result.inference {
                    Some(inf) => {
                        let _ = writeln!(
                            out,
                            "{},{},{},{},{},{}",
                            names[k], b, inf.se[k], inf.t_stats[k], inf.p_values[k], inf.stars[k]
                        );
                    }
                    None => {
                        let _ = writeln!(out, "{},{b},,,,", names[k]);
                    }
                }
            }
        }
        return out;
    }

    let _ = writeln!(out, "method        {}", result.method);
    let _ = writeln!(out, "conversion    {rule}");
    let _ = writeln!(out, "groups        {} low / {} high", p.cm.n_low(), p.cm.n_high());
    if let Some(rho) = result.rho {
        let how = match result.method {
            MethodId::ChowLinOpt => format!(" ({})", model.rho_method.unwrap_or(RhoObjective::MaxLog)),
            MethodId::LittermanOpt => format!(" ({})", model.rho_method.unwrap_or(RhoObjective::MinRss)),
            _ => String::new(),
        };
        let _ = writeln!(out, "rho           {}{how}", fmt_num(rho));
    }
    if let Some(ll) = result.log_likelihood {
        let _ = writeln!(out, "log-lik       {}", fmt_num(ll));
    }
    if let Some(s2) = result.sigma2 {
        let _ = writeln!(out, "sigma^2       {}", fmt_num(s2));
    }
    if !p.imputed.is_empty() {
        let _ = writeln!(out, "imputed       {} group target(s)", p.imputed.len());
    }
    let verdict = if gap <= crate::models::consistency_tolerance(&p.y_l) { "ok" } else { "VIOLATED" };
    let _ = writeln!(out, "aggregation   {verdict} (max |C*y_hat - y_l| = {gap:.3e})");

    if let Some(beta) = &result.beta {
        out.push('\n');
        let _ = writeln!(out, "{:<12}{:>16}{:>16}{:>10}{:>12}", "term", "estimate", "std.error", "t", "p-value");
        for (k, b) in beta.iter().enumerate() {
            match &result.inference {
                Some(inf) => {
                    let _ = writeln!(
                        out,
                        "{:<12}{:>16}{:>16}{:>10.3}{:>12.4} {}",
                        names[k],
                        fmt_num(*b),
                        fmt_num(inf.se[k]),
                        inf.t_stats[k],
                        inf.p_values[k],
                        inf.stars[k]
                    );
                }
                None => {
                    let _ = writeln!(out, "{:<12}{:>16}", names[k], fmt_num(*b));
                }
            }
        }
        if result.inference.is_some() {
            out.push_str("---\nsignif: *** p<0.01  ** p<0.05  * p<0.1\n");
        }
    }
    out
}

fn adjustment_text(report: &AdjustmentReport, format: OutputFormat) -> String {
    let mut out = String::new();
    match format {
        OutputFormat::Csv => {
            out.push_str("group,rule,strategy,unresolved,target\n");
            for g in &report.groups {
                let _ = writeln!(out, "{},{},{},{},{}", g.group, g.rule, g.strategy, g.unresolved, g.target);
            }
        }
        OutputFormat::Table => {
            let _ = writeln!(out, "adjusted {} group(s), {} unresolved", report.touched(), report.unresolved());
            if !report.groups.is_empty() {
                let _ = writeln!(out, "{:<8}{:<10}{:<18}{:>16}  {}", "group", "rule", "strategy", "target", "status");
                for g in &report.groups {
                    let status = if g.unresolved { "unresolved" } else { "ok" };
                    let _ = writeln!(
                        out,
                        "{:<8}{:<10}{:<18}{:>16}  {status}",
                        g.group,
                        g.rule.to_string(),
                        g.strategy.to_string(),
                        fmt_num(g.target)
                    );
                }
            }
        }
    }
    out
}

/// Writes predictions, optional adjustment and plot for a finished fit.
fn finish_fit(cli: &Cli, p: &Prepared, y_hat: &[f64], do_adjust: bool, plot: Option<&Path>) -> CliResult<String> {
    let mut extras: Vec<(&str, &[f64])> = vec![("y_hat", y_hat)];
    let mut summary = String::new();
    let adjusted;
    if do_adjust {
        let (values, report) = adjust(y_hat, &p.y_l, &p.cm).map_err(|e| CliError::Numerical(e.to_string()))?;
        adjusted = values;
        extras.push(("y_hat_adjusted", &adjusted));
        summary.push('\n');
        summary.push_str(&adjustment_text(&report, OutputFormat::Table));
    }
    let bytes = write_csv(&p.frame, &extras).map_err(input_err)?;
    emit_artifact(cli, &bytes)?;
    if let Some(path) = plot {
        let y_l_rows = target_per_row(&p.cm, &p.y_l);
        let svg = render_svg(&y_l_rows, y_hat, "y_hat");
        write_file(path, svg.as_bytes())?;
    }
    Ok(summary)
}

pub fn cmd_fit(cli: &Cli, args: &FitArgs) -> CliResult<()> {
    let p = prepare(cli, &args.prep)?;
    let opts = fit_options(&p.frame, &args.model)?;
    let result = fit(args.method, &p.y_l, &p.x, &p.cm, &opts)?;
    let mut summary = fit_summary(&result, &p, cli.conversion, &args.model, cli.format);
    summary.push_str(&finish_fit(cli, &p, &result.y_hat, args.adjust, args.plot.as_deref())?);
    emit_summary(cli, &summary);
    Ok(())
}

fn ensemble_text(er: &EnsembleResult, format: OutputFormat) -> String {
    let mut out = String::new();
    match format {
        OutputFormat::Csv => {
            out.push_str("method,weight,mae,rmse\n");
            for m in &er.members {
                let _ = writeln!(out, "{},{},{},{}", m.method, m.weight, m.mae, m.rmse);
            }
        }
        OutputFormat::Table => {
            let _ = writeln!(out, "{:<18}{:>12}{:>16}{:>16}", "member", "weight", "mae", "rmse");
            for m in &er.members {
                let _ = writeln!(
                    out,
                    "{:<18}{:>12.6}{:>16}{:>16}",
                    m.method.to_string(),
                    m.weight,
                    fmt_num(m.mae),
                    fmt_num(m.rmse)
                );
            }
            for (method, reason) in &er.dropped {
                let _ = writeln!(out, "{:<18}dropped: {reason}", method.to_string());
            }
            let _ = writeln!(out, "weighting objective  {}", fmt_num(er.objective));
            let _ = writeln!(out, "aggregate sse        {}", fmt_num(er.aggregate_sse));
        }
    }
    out
}

pub fn cmd_ensemble(cli: &Cli, args: &EnsembleArgs) -> CliResult<()> {
    let p = prepare(cli, &args.prep)?;
    let opts = fit_options(&p.frame, &args.model)?;
    let methods = args.methods.clone().unwrap_or_else(|| DEFAULT_MEMBERS.to_vec());
    let er = run_ensemble_on(&p.y_l, &p.x, &p.cm, &methods, &opts)?;
    let model = to_model(&er);
    let mut summary = ensemble_text(&er, cli.format);
    if cli.format == OutputFormat::Table {
        let gap = model.consistency_gap(&p.y_l, &p.cm);
        let _ = writeln!(summary, "aggregation          max |C*y_hat - y_l| = {gap:.3e}");
    }
    summary.push_str(&finish_fit(cli, &p, &model.y_hat, args.adjust, args.plot.as_deref())?);
    emit_summary(cli, &summary);
    Ok(())
}

fn numeric_column(frame: &Frame, name: &str) -> CliResult<Vec<f64>> {
    let column = frame.extra(name).ok_or_else(|| CliError::Input(format!("missing column `{name}`")))?;
    column
        .into_iter()
        .collect::<Option<Vec<f64>>>()
        .ok_or_else(|| CliError::Input(format!("column `{name}` has missing values")))
}

fn complete_targets(frame: &Frame) -> CliResult<Vec<f64>> {
    frame
        .group_targets()
        .into_iter()
        .collect::<Option<Vec<f64>>>()
        .ok_or_else(|| CliError::Input("every group needs a target in column y".into()))
}

pub fn cmd_adjust(cli: &Cli, args: &AdjustArgs) -> CliResult<()> {
    let frame = load_validated(cli)?;
    let y_hat = numeric_column(&frame, &args.column)?;
    let y_l = complete_targets(&frame)?;
    let cm = build_c(&frame, cli.conversion).map_err(input_err)?;
    let (adjusted, report) = adjust(&y_hat, &y_l, &cm).map_err(|e| CliError::Numerical(e.to_string()))?;
    let name = format!("{}_adjusted", args.column);
    let bytes = write_csv(&frame, &[(name.as_str(), &adjusted)]).map_err(input_err)?;
    emit_artifact(cli, &bytes)?;
    emit_summary(cli, &adjustment_text(&report, cli.format));
    Ok(())
}

pub fn cmd_retropolate(cli: &Cli, args: &RetroArgs) -> CliResult<()> {
    let frame = load_validated(cli)?;
    let config = CompletionConfig { x_method: args.x_interp, pad_boundaries: !args.no_pad };
    let (frame, _) = complete(&frame, config).map_err(input_err)?;
    let cm = build_c(&frame, cli.conversion).map_err(input_err)?;
    let x = frame.x_complete().ok_or_else(|| CliError::Input("X has gaps after completion".into()))?;
    let targets = frame.group_targets();
    let result = impute_targets(&frame, &targets, &x, &cm, args.method, args.aux.as_deref(), cli.seed)?;
    let filled: Vec<Option<f64>> = result.y_l_filled.iter().map(|v| Some(*v)).collect();
    let out = frame.with_group_targets(&filled);
    let flags: Vec<f64> = out
        .groups()
        .iter()
        .enumerate()
        .flat_map(|(k, g)| std::iter::repeat(if result.imputed_groups.contains(&k) { 1.0 } else { 0.0 }).take(g.len))
        .collect();
    let bytes = write_csv(&out, &[("imputed", &flags)]).map_err(input_err)?;
    emit_artifact(cli, &bytes)?;

    let mut text = String::new();
    match cli.format {
        OutputFormat::Csv => {
            text.push_str("index,value\n");
            for &k in &result.imputed_groups {
                let _ = writeln!(text, "{},{}", out.groups()[k].index, result.y_l_filled[k]);
            }
        }
        OutputFormat::Table => {
            let _ = writeln!(text, "method        {}", result.method_used);
            let _ = writeln!(text, "in-sample rmse {}", fmt_num(result.rmse));
            for &k in &result.imputed_groups {
                let _ = writeln!(text, "{:<14}{}", out.groups()[k].index.to_string(), fmt_num(result.y_l_filled[k]));
            }
        }
    }
    emit_summary(cli, &text);
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
    pub mse: f64,
}

pub fn metrics(pred: &[f64], truth: &[f64]) -> Metrics {
    let n = pred.len().max(1) as f64;
    let mae = pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / n;
    let mse = pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / n;
    Metrics { mae, rmse: mse.sqrt(), mse }
}

pub fn cmd_compare(cli: &Cli, args: &CompareArgs) -> CliResult<()> {
    let p = prepare(cli, &args.prep)?;
    let opts = fit_options(&p.frame, &args.model)?;
    let methods = args.methods.clone().unwrap_or_else(|| MethodId::ALL.to_vec());
    let truth = p.frame.extra("y_true");

    let fits: Vec<(MethodId, Result<FitResult, ModelError>)> =
        methods.par_iter().map(|&m| (m, fit(m, &p.y_l, &p.x, &p.cm, &opts))).collect();

    let mut rows: Vec<(String, Metrics)> = Vec::new();
    let mut failures = Vec::new();
    for (method, result) in fits {
        match result {
            Ok(r) => {
                let agg = p.cm.aggregate(&r.y_hat).map_err(input_err)?;
                rows.push((method.to_string(), metrics(&agg, &p.y_l)));
                if let Some(truth) = &truth {
                    let (pred, obs): (Vec<f64>, Vec<f64>) =
                        r.y_hat.iter().zip(truth).filter_map(|(p, t)| t.map(|t| (*p, t))).unzip();
                    if !obs.is_empty() {
                        rows.push((format!("{method}/hf"), metrics(&pred, &obs)));
                    }
                }
            }
            Err(e) => {
                warn!("{method} failed: {e}");
                failures.push(format!("{method}: {e}"));
            }
        }
    }
    if rows.is_empty() {
        return Err(CliError::Numerical(format!("every method failed ({})", failures.join("; "))));
    }

    let mut out = String::new();
    match cli.format {
        OutputFormat::Csv => {
            out.push_str("method,mae,rmse,mse\n");
            for (name, m) in &rows {
                let _ = writeln!(out, "{name},{},{},{}", m.mae, m.rmse, m.mse);
            }
        }
        OutputFormat::Table => {
            let _ = writeln!(out, "{:<22}{:>16}{:>16}{:>16}", "method", "mae", "rmse", "mse");
            for (name, m) in &rows {
                let _ = writeln!(out, "{name:<22}{:>16}{:>16}{:>16}", fmt_num(m.mae), fmt_num(m.rmse), fmt_num(m.mse));
            }
            for f in &failures {
                let _ = writeln!(out, "failed: {f}");
            }
            if truth.is_some() {
                out.push_str("rows ending in /hf compare y_hat with y_true\n");
            }
        }
    }
    match &cli.output {
        Some(path) => write_file(path, out.as_bytes()),
        None => {
            print!("{out}");
            Ok(())
        }
    }
}

/// Group targets laid out on sub-periods; sums are spread evenly so both
/// series share a scale.
fn target_per_row(cm: &ConversionMatrix, y_l: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(cm.n_high());
    for (span, &target) in cm.spans().iter().zip(y_l) {
        let value = match cm.rule() {
            AggregationRule::Sum => target / span.len as f64,
            _ => target,
        };
        out.extend(std::iter::repeat(value).take(span.len));
    }
    out
}

const SVG_WIDTH: f64 = 800.0;
const SVG_HEIGHT: f64 = 400.0;
const MARGIN: f64 = 50.0;

/// Standalone SVG with a stepped target line and the prediction line.
pub fn render_svg(targets: &[f64], y_hat: &[f64], label: &str) -> String {
    let n = y_hat.len();
    let (lo, hi) = targets
        .iter()
        .chain(y_hat)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let plot_w = SVG_WIDTH - 2.0 * MARGIN;
    let plot_h = SVG_HEIGHT - 2.0 * MARGIN;
    let px = |i: f64| MARGIN + if n > 1 { i / n as f64 * plot_w } else { 0.0 };
    let py = |v: f64| SVG_HEIGHT - MARGIN - (v - lo) / span * plot_h;

    let mut step = String::new();
    for (i, v) in targets.iter().enumerate() {
        let _ = write!(step, "{:.2},{:.2} {:.2},{:.2} ", px(i as f64), py(*v), px(i as f64 + 1.0), py(*v));
    }
    let mut line = String::new();
    for (i, v) in y_hat.iter().enumerate() {
        let _ = write!(line, "{:.2},{:.2} ", px(i as f64 + 0.5), py(*v));
    }

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_WIDTH}" height="{SVG_HEIGHT}" viewBox="0 0 {SVG_WIDTH} {SVG_HEIGHT}">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let bottom = SVG_HEIGHT - MARGIN;
    let right = SVG_WIDTH - MARGIN;
    let _ = writeln!(svg, r#"<line x1="{MARGIN}" y1="{bottom}" x2="{right}" y2="{bottom}" stroke="black"/>"#);
    let _ = writeln!(svg, r#"<line x1="{MARGIN}" y1="{MARGIN}" x2="{MARGIN}" y2="{bottom}" stroke="black"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{:.2}" font-size="11" text-anchor="end">{}</text>"#,
        MARGIN - 4.0,
        py(hi),
        fmt_num(hi)
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{:.2}" font-size="11" text-anchor="end">{}</text>"#,
        MARGIN - 4.0,
        py(lo),
        fmt_num(lo)
    );
    let _ = writeln!(svg, r#"<text x="{right}" y="{}" font-size="11" text-anchor="end">{n} periods</text>"#, bottom + 16.0);
    let _ = writeln!(svg, r##"<polyline fill="none" stroke="#888888" stroke-width="2" points="{}"/>"##, step.trim_end());
    let _ = writeln!(svg, r##"<polyline fill="none" stroke="#1f77b4" stroke-width="1.5" points="{}"/>"##, line.trim_end());
    let _ = writeln!(svg, r##"<rect x="{}" y="12" width="14" height="3" fill="#888888"/>"##, MARGIN + 10.0);
    let _ = writeln!(svg, r#"<text x="{}" y="18" font-size="12">y_l</text>"#, MARGIN + 30.0);
    let _ = writeln!(svg, r##"<rect x="{}" y="12" width="14" height="3" fill="#1f77b4"/>"##, MARGIN + 80.0);
    let _ = writeln!(svg, r#"<text x="{}" y="18" font-size="12">{label}</text>"#, MARGIN + 100.0);
    svg.push_str("</svg>\n");
    svg
}

pub fn cmd_plot(cli: &Cli, args: &PlotArgs) -> CliResult<()> {
    let frame = load_validated(cli)?;
    let y_hat = numeric_column(&frame, &args.column)?;
    let y_l = complete_targets(&frame)?;
    let cm = build_c(&frame, cli.conversion).map_err(input_err)?;
    let svg = render_svg(&target_per_row(&cm, &y_l), &y_hat, &args.column);
    emit_artifact(cli, svg.as_bytes())
}

pub fn cmd_synth(cli: &Cli, args: &SynthArgs) -> CliResult<()> {
    let cfg = SynthConfig {
        n_l: args.n_l,
        m: args.m,
        rho: args.rho,
        intercept: args.intercept,
        beta: args.beta,
        noise_sd: args.noise_sd,
        seed: cli.seed,
        rule: cli.conversion,
    };
    let data = generate(&cfg).map_err(input_err)?;
    let bytes = write_csv(&data.to_frame(), &[]).map_err(input_err)?;
    emit_artifact(cli, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bounds_parser() {
        assert_eq!(parse_bounds("-0.5,0.9"), Ok((-0.5, 0.9)));
        assert!(parse_bounds("0.5").is_err());
        assert!(parse_bounds("a,b").is_err());
    }

    #[test]
    fn metrics_relation() {
        let m = metrics(&[1.0, 2.0, 4.0], &[1.0, 3.0, 2.0]);
        assert_eq!(m.mae, 1.0);
        assert!((m.mse - 5.0 / 3.0).abs() < 1e-15);
        assert!((m.rmse * m.rmse - m.mse).abs() < 1e-12);
    }

    #[test]
    fn svg_has_two_polylines() {
        let svg = render_svg(&[1.0; 8], &[0.5, 1.5, 1.0, 1.0, 0.8, 1.2, 1.1, 0.9], "y_hat");
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert_eq!(svg, render_svg(&[1.0; 8], &[0.5, 1.5, 1.0, 1.0, 0.8, 1.2, 1.1, 0.9], "y_hat"));
    }

    #[test]
    fn sum_targets_spread_for_plotting() {
        let cm = ConversionMatrix::regular(2, 2, AggregationRule::Sum).unwrap();
        assert_eq!(target_per_row(&cm, &[4.0, 6.0]), vec![2.0, 2.0, 3.0, 3.0]);
    }

    #[test]
    fn cli_parses_global_flags_after_subcommand() {
        let cli = Cli::try_parse_from([
            "tdisagg",
            "fit",
            "--method",
            "litterman",
            "--rho",
            "-0.3",
            "--conversion",
            "average",
            "--rho-bounds",
            "-0.5,0.9",
            "-i",
            "in.csv",
        ])
        .unwrap();
        assert_eq!(cli.conversion, AggregationRule::Average);
        assert_eq!(cli.seed, 42);
        let Command::Fit(args) = cli.command else { panic!("expected fit") };
        assert_eq!(args.method, MethodId::Litterman);
        assert_eq!(args.model.rho, Some(-0.3));
        assert_eq!(args.model.rho_bounds, Some((-0.5, 0.9)));
    }
}

//! Command-line front end: `simulate`, `analyze`, `oracle`, `calibrate`.
//!
//! Flag values override config-file values, which override the built-in
//! defaults (the study settings). The effective configuration is echoed
//! into the output directory next to the results it produced.

use crate::estimators::{
    crude, fit_propensity, ipw_estimate, regression_adjust, EstimatorId, EstimatorOptions,
    PsAnalysis, PsScale,
};
use crate::harness::{
    export_distributions, run_experiment, spread_ranking, write_replicate_log, ExperimentConfig,
    Parallelism, SimulationSummary,
};
use crate::scenarios::{
    build_scenario, calibrate_otis_marginals, marginal_or_oracle, marginal_targets,
    CalibrationConfig, Scenario, ScenarioId,
};
use crate::selection::{select_cie, select_pval, CieMetric, SelectionMethod, SelectionResult};
use crate::tabular::{read_dataset, Dataset};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

type CliError = Box<dyn std::error::Error>;

#[derive(Parser)]
#[command(
    name = "rareps",
    about = "Propensity-score effect estimation for rare binary outcomes",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a replicated simulation experiment and write its summaries
    Simulate(SimulateArgs),
    /// Produce a crude / regression-adjustment / IPW report for a data file
    Analyze(AnalyzeArgs),
    /// Approximate a scenario's true marginal log odds ratio
    Oracle(OracleArgs),
    /// Calibrate OTIS-scenario covariate laws to the documented marginals
    Calibrate(CalibrateArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario id (I, II, III, IV) or a scenario definition file
    #[arg(long)]
    scenario: String,
    /// Number of simulation replicates
    #[arg(long)]
    replicates: Option<usize>,
    /// Master seed; replicate i uses a stream derived from (seed, i)
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (0 = all available)
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    options: OptionArgs,
    /// Monte Carlo draws for the true-effect oracle
    #[arg(long)]
    oracle_draws: Option<usize>,
    /// JSON config file; flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct OptionArgs {
    /// CIE selection threshold (relative OR change)
    #[arg(long)]
    cie_threshold: Option<f64>,
    /// Significance-selection alpha
    #[arg(long)]
    pval_alpha: Option<f64>,
    /// Scale on which the PS enters regression adjustment
    #[arg(long, value_parser = parse_scale)]
    ps_adjust_scale: Option<PsScale>,
    /// Symmetric percentile for optional weight truncation (off by default)
    #[arg(long)]
    weight_truncation: Option<f64>,
}

fn parse_scale(s: &str) -> Result<PsScale, String> {
    match s.to_lowercase().as_str() {
        "probability" => Ok(PsScale::Probability),
        "logit" => Ok(PsScale::Logit),
        other => Err(format!("unknown scale `{other}` (probability|logit)")),
    }
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Delimiter-separated data file with a header row
    #[arg(long)]
    data: PathBuf,
    /// Schema spec (JSON) describing the columns
    #[arg(long)]
    schema: PathBuf,
    /// Candidate confounder pool (comma-separated; default: all variables)
    #[arg(long, value_delimiter = ',')]
    pool: Option<Vec<String>>,
    /// Known confounders for an oracle row (comma-separated)
    #[arg(long, value_delimiter = ',')]
    oracle: Option<Vec<String>>,
    /// Selection rows to include: cie, pval, oracle, all
    #[arg(long, value_delimiter = ',', default_values_t = vec!["cie".to_string(), "all".to_string()])]
    methods: Vec<String>,
    #[command(flatten)]
    options: OptionArgs,
    /// Optional directory for the report file
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct OracleArgs {
    /// Scenario id or scenario definition file
    #[arg(long)]
    scenario: String,
    /// Monte Carlo sample size
    #[arg(long, default_value_t = 10_000_000)]
    draws: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Optional output file for the JSON result
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CalibrateArgs {
    /// OTIS scenario to calibrate (III or IV)
    #[arg(long)]
    scenario: String,
    #[arg(long, default_value_t = 2_000_000)]
    pilot_draws: usize,
    #[arg(long, default_value_t = 2_000)]
    pilot_replicates: usize,
    #[arg(long, default_value_t = 2024)]
    seed: u64,
    /// Bounds on the maternal-height mean search
    #[arg(long, default_value_t = 140.0)]
    height_mean_min: f64,
    #[arg(long, default_value_t = 190.0)]
    height_mean_max: f64,
    /// Bounds on the maternal-height SD (frozen value must lie inside)
    #[arg(long, default_value_t = 3.0)]
    height_sd_min: f64,
    #[arg(long, default_value_t = 12.0)]
    height_sd_max: f64,
    /// Optional output file for the calibrated laws
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Config-file form of the simulate options; unknown keys are rejected.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct FileConfig {
    replicates: Option<usize>,
    seed: Option<u64>,
    workers: Option<usize>,
    cie_threshold: Option<f64>,
    pval_alpha: Option<f64>,
    ps_adjust_scale: Option<String>,
    weight_truncation: Option<f64>,
    oracle_draws: Option<usize>,
}

/// Resolved simulate configuration, echoed to the output directory.
#[derive(Debug, Serialize)]
struct EffectiveConfig<'a> {
    scenario: &'a str,
    replicates: usize,
    seed: u64,
    workers: usize,
    cie_threshold: f64,
    pval_alpha: f64,
    ps_adjust_scale: &'a str,
    weight_truncation: Option<f64>,
    oracle_draws: usize,
}

pub fn run() -> i32 {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(cli: Cli) -> Result<i32, CliError> {
    match cli.command {
        Command::Simulate(args) => cmd_simulate(args),
        Command::Analyze(args) => cmd_analyze(args),
        Command::Oracle(args) => cmd_oracle(args),
        Command::Calibrate(args) => cmd_calibrate(args),
    }
}

fn load_scenario(spec: &str) -> Result<Scenario, CliError> {
    if let Ok(id) = spec.parse::<ScenarioId>() {
        return Ok(build_scenario(id, None)?);
    }
    let path = Path::new(spec);
    if path.exists() {
        let text = std::fs::read_to_string(path)?;
        return Ok(serde_json::from_str(&text)?);
    }
    Err(format!("`{spec}` is neither a scenario id nor a scenario file").into())
}

/// Files written so far; removed wholesale if the command fails later.
struct OutputTracker {
    files: Vec<PathBuf>,
    dirs: Vec<PathBuf>,
}

impl OutputTracker {
    fn new() -> Self {
        OutputTracker {
            files: Vec::new(),
            dirs: Vec::new(),
        }
    }

    fn ensure_dir(&mut self, dir: &Path) -> std::io::Result<()> {
        if !dir.exists() {
            std::fs::create_dir_all(dir)?;
            self.dirs.push(dir.to_path_buf());
        }
        Ok(())
    }

    fn cleanup(self) {
        for f in self.files.iter().rev() {
            let _ = std::fs::remove_file(f);
        }
        for d in self.dirs.iter().rev() {
            let _ = std::fs::remove_dir(d);
        }
    }
}

fn cmd_simulate(args: SimulateArgs) -> Result<i32, CliError> {
    let file_cfg: FileConfig = match &args.config {
        Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)?,
        None => FileConfig::default(),
    };
    let replicates = args
        .replicates
        .or(file_cfg.replicates)
        .unwrap_or(10_000);
    if replicates == 0 {
        return Err("--replicates must be at least 1".into());
    }
    let seed = args.seed.or(file_cfg.seed).unwrap_or(42);
    let workers = args.workers.or(file_cfg.workers).unwrap_or(0);
    let scale = match (args.options.ps_adjust_scale, file_cfg.ps_adjust_scale.as_deref()) {
        (Some(s), _) => s,
        (None, Some(s)) => parse_scale(s)?,
        (None, None) => PsScale::Probability,
    };
    let options = EstimatorOptions {
        cie_threshold: args
            .options
            .cie_threshold
            .or(file_cfg.cie_threshold)
            .unwrap_or(0.10),
        pval_alpha: args.options.pval_alpha.or(file_cfg.pval_alpha).unwrap_or(0.05),
        ps_adjust_scale: scale,
        weight_truncation: args.options.weight_truncation.or(file_cfg.weight_truncation),
        cie_metric: CieMetric::OrScale,
    };
    let oracle_draws = args
        .oracle_draws
        .or(file_cfg.oracle_draws)
        .unwrap_or(1_000_000);

    let scenario = load_scenario(&args.scenario)?;
    let config = ExperimentConfig {
        n_replicates: replicates,
        master_seed: seed,
        parallelism: if workers == 0 {
            Parallelism::Auto
        } else {
            Parallelism::Workers(workers)
        },
        options,
        oracle_draws,
    };

    let mut tracker = OutputTracker::new();
    let result = (|| -> Result<String, CliError> {
        tracker.ensure_dir(&args.out)?;

        let effective = EffectiveConfig {
            scenario: &args.scenario,
            replicates,
            seed,
            workers,
            cie_threshold: config.options.cie_threshold,
            pval_alpha: config.options.pval_alpha,
            ps_adjust_scale: match config.options.ps_adjust_scale {
                PsScale::Probability => "probability",
                PsScale::Logit => "logit",
            },
            weight_truncation: config.options.weight_truncation,
            oracle_draws,
        };
        let cfg_path = args.out.join("config.json");
        std::fs::write(&cfg_path, serde_json::to_string_pretty(&effective)? + "\n")?;
        tracker.files.push(cfg_path);

        let (summary, records) = run_experiment(&scenario, &config);

        let summary_path = args.out.join("summary.json");
        std::fs::write(&summary_path, serde_json::to_string_pretty(&summary)? + "\n")?;
        tracker.files.push(summary_path);

        let log_path = args.out.join("replicates.tsv");
        write_replicate_log(&records, &log_path)?;
        tracker.files.push(log_path);

        let dist_dir = args.out.join("distributions");
        tracker.ensure_dir(&dist_dir)?;
        let mut files = export_distributions(&records, &summary.true_effects, &dist_dir)?;
        tracker.files.append(&mut files);

        Ok(render_summary(&summary))
    })();

    match result {
        Ok(text) => {
            println!("{text}");
            Ok(0)
        }
        Err(e) => {
            tracker.cleanup();
            Err(e)
        }
    }
}

fn pct(x: f64) -> String {
    format!("{:.2}%", 100.0 * x)
}

/// Text summary shaped like the study's setup/selection tables.
fn render_summary(summary: &SimulationSummary) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "Scenario {} - {} replicates (seed {})",
        summary.scenario_id, summary.n_replicates, summary.master_seed
    );
    let sd = summary
        .events
        .sd
        .map_or_else(|| "undefined".to_string(), |s| format!("{s:.2}"));
    let _ = writeln!(
        out,
        "Events: mean {:.2} (SD {}), none in unexposed {}, <=5 in unexposed {}",
        summary.events.mean,
        sd,
        pct(summary.events.frac_zero_unexposed),
        pct(summary.events.frac_le5_unexposed),
    );
    let _ = writeln!(
        out,
        "True effects: conditional log OR {:.4}, marginal log OR {:.4} (MC error {:.5}, {} draws)",
        summary.true_effects.conditional_log_or,
        summary.true_effects.marginal_log_or,
        summary.true_effects.mc_error,
        summary.true_effects.oracle_sample_size,
    );

    let _ = writeln!(out, "\nConfounder selection");
    let _ = writeln!(
        out,
        "  {:<6} {:>9} {:>10} {:>7} {:>7}",
        "method", "true-pos", "false-pos", "incl", "exact"
    );
    for (name, metrics) in [("CIE", &summary.cie_metrics), ("PVAL", &summary.pval_metrics)] {
        if let Some(m) = metrics {
            let _ = writeln!(
                out,
                "  {:<6} {:>9.2} {:>10.2} {:>7} {:>7}",
                name,
                m.true_pos,
                m.false_pos,
                pct(m.incl_rate),
                pct(m.exact_rate)
            );
        }
    }
    for (name, metrics) in [("CIE", &summary.cie_metrics), ("PVAL", &summary.pval_metrics)] {
        if let Some(m) = metrics {
            let top: Vec<String> = m
                .top_frequencies
                .iter()
                .take(5)
                .map(|(v, f)| format!("{v} {}", pct(*f)))
                .collect();
            let _ = writeln!(out, "  top-5 {name}: {}", top.join(", "));
        }
    }

    let _ = writeln!(out, "\nEstimators (finite runs)");
    let _ = writeln!(
        out,
        "  {:<18} {:>8} {:>8} {:>8} {:>8} {:>8} {:>7}",
        "estimator", "mean", "sd", "25%", "50%", "75%", "inf"
    );
    for s in &summary.estimators {
        let q = s.quantiles;
        let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.3}"));
        let _ = writeln!(
            out,
            "  {:<18} {:>8} {:>8} {:>8} {:>8} {:>8} {:>7}",
            s.estimator.label(),
            cell(s.mean),
            cell(s.sd),
            cell(q.map(|q| q[2])),
            cell(q.map(|q| q[3])),
            cell(q.map(|q| q[4])),
            pct(s.frac_infinite),
        );
    }

    let ranked: Vec<String> = spread_ranking(summary)
        .iter()
        .map(|e| e.label().to_string())
        .collect();
    let _ = writeln!(out, "\nSpread ranking (widest IQR first): {}", ranked.join(" > "));
    out
}

fn format_or_cell(analysis: &PsAnalysis) -> String {
    if analysis.log_or == f64::INFINITY {
        return "inf (separation)".to_string();
    }
    if analysis.log_or == f64::NEG_INFINITY {
        return "0 (separation)".to_string();
    }
    if analysis.log_or.is_nan() {
        return "failed".to_string();
    }
    let or = analysis.log_or.exp();
    match analysis.ci95 {
        Some((lo, hi)) => format!("{or:.2} ({lo:.2}, {hi:.2})"),
        None => format!("{or:.2} (no CI)"),
    }
}

fn cmd_analyze(args: AnalyzeArgs) -> Result<i32, CliError> {
    let dataset = read_dataset(&args.data, &args.schema)?;
    let pool = args.pool.unwrap_or_else(|| dataset.schema.names());
    for v in &pool {
        dataset.schema.entry(v)?;
    }
    let outcome_classes: std::collections::HashSet<u8> = dataset.outcome.iter().copied().collect();
    if outcome_classes.len() < 2 {
        return Err("outcome has a single class; nothing to estimate".into());
    }
    let options = EstimatorOptions {
        cie_threshold: args.options.cie_threshold.unwrap_or(0.10),
        pval_alpha: args.options.pval_alpha.unwrap_or(0.05),
        ps_adjust_scale: args.options.ps_adjust_scale.unwrap_or(PsScale::Probability),
        weight_truncation: args.options.weight_truncation,
        cie_metric: CieMetric::OrScale,
    };

    let mut report = String::new();
    let _ = writeln!(
        report,
        "Estimated odds ratios (95% CI) - {} rows, pool of {} candidates",
        dataset.n(),
        pool.len()
    );
    let _ = writeln!(
        report,
        "{:<26} {:>20} {:>20} {:>22}",
        "", "Crude", "Reg. adjustment", "IPW"
    );

    for method in &args.methods {
        let (label, selection): (String, Result<SelectionResult, CliError>) =
            match method.to_lowercase().as_str() {
                "cie" => (
                    "Selection by CIE".into(),
                    select_cie(&dataset, &pool, options.cie_threshold, options.cie_metric)
                        .map_err(Into::into),
                ),
                "pval" => (
                    "Selection by p-value".into(),
                    select_pval(&dataset, &pool, options.pval_alpha).map_err(Into::into),
                ),
                "all" => (
                    "All potential confounders".into(),
                    Ok(SelectionResult::all(&pool)),
                ),
                "oracle" => {
                    let oracle = args
                        .oracle
                        .clone()
                        .ok_or("--methods oracle requires --oracle")?;
                    ("Known confounders".into(), Ok(SelectionResult::oracle(&oracle)))
                }
                other => return Err(format!("unknown method `{other}`").into()),
            };
        match selection {
            Ok(sel) => {
                let row = analysis_row(&dataset, &sel, &options)?;
                let _ = writeln!(
                    report,
                    "{:<26} {:>20} {:>20} {:>22}",
                    label,
                    format_or_cell(&row.crude),
                    format_or_cell(&row.reg),
                    format_or_cell(&row.ipw)
                );
                let _ = writeln!(
                    report,
                    "    n = {}, selected [{}]{}",
                    row.n_used,
                    sel.selected.join(", "),
                    row.weights
                        .map(|w| format!(
                            ", weights min/mean/max {:.3}/{:.3}/{:.3}",
                            w.min, w.mean, w.max
                        ))
                        .unwrap_or_default()
                );
            }
            Err(e) => {
                let _ = writeln!(report, "{label:<26} degenerate: {e}");
            }
        }
    }

    println!("{report}");
    if let Some(dir) = &args.out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.txt"), report)?;
    }
    Ok(0)
}

struct AnalysisRow {
    crude: PsAnalysis,
    reg: PsAnalysis,
    ipw: PsAnalysis,
    n_used: usize,
    weights: Option<crate::estimators::WeightSummary>,
}

fn analysis_row(
    dataset: &Dataset,
    selection: &SelectionResult,
    options: &EstimatorOptions,
) -> Result<AnalysisRow, CliError> {
    let rows = dataset.complete_case(&selection.selected)?;
    let crude_res = crude(&rows)?;
    let (reg, ipw) = if crude_res.separation == crate::glm::Separation::Complete {
        // Degenerate data: every approach inherits the infinite estimate.
        let mk = |id: EstimatorId| PsAnalysis {
            estimator: id,
            selected_set: selection.selected.clone(),
            ..crude_res.clone()
        };
        (mk(estimator_for(selection, false)), mk(estimator_for(selection, true)))
    } else {
        let ps = fit_propensity(&rows, &selection.selected)?;
        (
            regression_adjust(&rows, &ps, estimator_for(selection, false), options)?,
            ipw_estimate(&rows, &ps, estimator_for(selection, true), options)?,
        )
    };
    Ok(AnalysisRow {
        n_used: crude_res.n_used,
        weights: ipw.weights,
        crude: crude_res,
        reg,
        ipw,
    })
}

fn estimator_for(selection: &SelectionResult, ipw: bool) -> EstimatorId {
    match (selection.method, ipw) {
        (SelectionMethod::Cie, false) => EstimatorId::RegCie,
        (SelectionMethod::Cie, true) => EstimatorId::IpwCie,
        (SelectionMethod::Pval, false) => EstimatorId::RegPval,
        (SelectionMethod::Pval, true) => EstimatorId::IpwPval,
        (SelectionMethod::Oracle, false) => EstimatorId::RegOracle,
        (SelectionMethod::Oracle, true) => EstimatorId::IpwOracle,
        (SelectionMethod::All, false) => EstimatorId::RegAll,
        (SelectionMethod::All, true) => EstimatorId::IpwAll,
    }
}

fn cmd_oracle(args: OracleArgs) -> Result<i32, CliError> {
    let scenario = load_scenario(&args.scenario)?;
    let effects = marginal_or_oracle(&scenario, args.draws, args.seed);
    println!(
        "scenario {}: conditional log OR {:.6}, marginal log OR {:.6} (MC error {:.6}, {} draws, seed {})",
        scenario.id,
        effects.conditional_log_or,
        effects.marginal_log_or,
        effects.mc_error,
        effects.oracle_sample_size,
        args.seed
    );
    if let Some(path) = &args.out {
        std::fs::write(path, serde_json::to_string_pretty(&effects)? + "\n")?;
    }
    Ok(0)
}

fn cmd_calibrate(args: CalibrateArgs) -> Result<i32, CliError> {
    let id: ScenarioId = args.scenario.parse()?;
    let config = CalibrationConfig {
        height_mean_bounds: (args.height_mean_min, args.height_mean_max),
        height_sd_bounds: (args.height_sd_min, args.height_sd_max),
        pilot_draws: args.pilot_draws,
        pilot_replicates: args.pilot_replicates,
        ..Default::default()
    };
    let outcome = calibrate_otis_marginals(id, marginal_targets(id), &config, args.seed)?;
    println!(
        "scenario {}: accepted = {}\n  laws: asthma {:.4}, height N({:.3}, {:.1}), referral {:?}",
        outcome.scenario,
        outcome.accepted,
        outcome.laws.asthma_prevalence,
        outcome.laws.height_mean,
        outcome.laws.height_sd,
        outcome.laws.referral_probs
    );
    println!(
        "  achieved: events {:.2} (target residual {:+.2}), zero-unexposed {} ({:+.2} pts), <=5 {} ({:+.2} pts)",
        outcome.achieved.mean_events,
        outcome.residual_events,
        pct(outcome.achieved.frac_zero_unexposed),
        100.0 * outcome.residual_zero_unexposed,
        pct(outcome.achieved.frac_le5_unexposed),
        100.0 * outcome.residual_le5_unexposed,
    );
    println!(
        "  2000-replicate check: events {:.2}, zero-unexposed {}, <=5 {}",
        outcome.replicate_check.mean_events,
        pct(outcome.replicate_check.frac_zero_unexposed),
        pct(outcome.replicate_check.frac_le5_unexposed),
    );
    if let Some(path) = &args.out {
        std::fs::write(path, serde_json::to_string_pretty(&outcome)? + "\n")?;
    }
    Ok(if outcome.accepted { 0 } else { 1 })
}

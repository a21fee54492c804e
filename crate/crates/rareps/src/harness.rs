//! Deterministic replicated-experiment runner: generates datasets, runs the
//! ten estimators, aggregates the study's summary tables and exports
//! distribution files for plotting.
//!
//! Replicate `i` draws from a stream that is a pure function of
//! `(master_seed, i)`, and aggregation walks records in index order, so every
//! output byte is identical for any worker count.

use crate::estimators::{
    quantile_sorted, run_all_ten, EstimatorId, EstimatorOptions, PsAnalysis, ALL_ESTIMATORS,
};
use crate::rng::replicate_stream;
use crate::scenarios::{marginal_or_oracle, Scenario, ScenarioId, TrueEffects};
use crate::selection::{aggregate_metrics, SelectionMetrics, SelectionResult};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

/// How replicates are scheduled. `Sequential` also serves as the fallback
/// when the `parallel` feature is compiled out.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parallelism {
    Sequential,
    Workers(usize),
    Auto,
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub n_replicates: usize,
    pub master_seed: u64,
    pub parallelism: Parallelism,
    pub options: EstimatorOptions,
    /// Monte Carlo draws for the true-effect oracle.
    pub oracle_draws: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            n_replicates: 10_000,
            master_seed: 42,
            parallelism: Parallelism::Auto,
            options: EstimatorOptions::default(),
            oracle_draws: 1_000_000,
        }
    }
}

/// Everything recorded about one simulation replicate.
#[derive(Debug, Clone)]
pub struct ReplicateRecord {
    pub index: usize,
    pub events_total: u32,
    pub events_exposed: u32,
    pub events_unexposed: u32,
    pub estimates: Vec<PsAnalysis>,
    pub cie: Option<SelectionResult>,
    pub pval: Option<SelectionResult>,
    /// No events in the unexposed arm: all ten estimates are +infinity.
    pub degenerate: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EventsSummary {
    pub mean: f64,
    /// Undefined (None) for a single replicate.
    pub sd: Option<f64>,
    pub frac_zero_unexposed: f64,
    pub frac_le5_unexposed: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimatorStats {
    pub estimator: EstimatorId,
    pub n_finite: usize,
    pub n_error: usize,
    pub frac_infinite: f64,
    /// Mass at +infinity; the level where the tail curve flattens.
    pub frac_pos_infinite: f64,
    pub mean: Option<f64>,
    pub sd: Option<f64>,
    /// 1, 5, 25, 50, 75, 95, 99 percent quantiles of the finite estimates.
    pub quantiles: Option<[f64; 7]>,
}

impl EstimatorStats {
    pub fn iqr(&self) -> Option<f64> {
        self.quantiles.map(|q| q[4] - q[2])
    }

    pub fn wide_range(&self) -> Option<f64> {
        self.quantiles.map(|q| q[5] - q[1])
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulationSummary {
    pub scenario_id: ScenarioId,
    pub n_replicates: usize,
    pub master_seed: u64,
    pub events: EventsSummary,
    /// Selection metrics over non-degenerate replicates.
    pub cie_metrics: Option<SelectionMetrics>,
    pub pval_metrics: Option<SelectionMetrics>,
    pub estimators: Vec<EstimatorStats>,
    pub true_effects: TrueEffects,
}

fn run_replicate(
    scenario: &Scenario,
    master_seed: u64,
    index: usize,
    options: &EstimatorOptions,
) -> ReplicateRecord {
    let mut rng = replicate_stream(master_seed, index as u64);
    let dataset = scenario.generate(&mut rng);
    let mut events_exposed = 0u32;
    let mut events_unexposed = 0u32;
    for (&a, &y) in dataset.exposure.iter().zip(&dataset.outcome) {
        if y == 1 {
            if a == 1 {
                events_exposed += 1;
            } else {
                events_unexposed += 1;
            }
        }
    }

    let ten = run_all_ten(
        &dataset,
        &scenario.true_confounders,
        &scenario.pool,
        options,
    );
    let (estimates, cie, pval) = match ten {
        Ok(t) => (t.estimates, t.cie, t.pval),
        // A whole arm vanished; record error markers for all ten.
        Err(_) => (
            ALL_ESTIMATORS
                .iter()
                .map(|&id| PsAnalysis {
                    estimator: id,
                    log_or: f64::NAN,
                    std_err: None,
                    ci95: None,
                    selected_set: Vec::new(),
                    n_used: 0,
                    separation: crate::glm::Separation::None,
                    weights: None,
                })
                .collect(),
            None,
            None,
        ),
    };

    ReplicateRecord {
        index,
        events_total: events_exposed + events_unexposed,
        events_exposed,
        events_unexposed,
        estimates,
        cie,
        pval,
        degenerate: events_unexposed == 0,
    }
}

fn collect_records(scenario: &Scenario, config: &ExperimentConfig) -> Vec<ReplicateRecord> {
    let n = config.n_replicates;
    let seed = config.master_seed;
    let run = |i: usize| run_replicate(scenario, seed, i, &config.options);

    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        match config.parallelism {
            Parallelism::Sequential => (0..n).map(run).collect(),
            Parallelism::Auto => (0..n).into_par_iter().map(run).collect(),
            Parallelism::Workers(w) => {
                let pool = rayon::ThreadPoolBuilder::new()
                    .num_threads(w.max(1))
                    .build()
                    .expect("worker pool");
                pool.install(|| (0..n).into_par_iter().map(run).collect())
            }
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(run).collect()
    }
}

fn summarize_events(records: &[ReplicateRecord]) -> EventsSummary {
    let n = records.len() as f64;
    let mean = records.iter().map(|r| r.events_total as f64).sum::<f64>() / n;
    let sd = if records.len() > 1 {
        let ss: f64 = records
            .iter()
            .map(|r| (r.events_total as f64 - mean).powi(2))
            .sum();
        Some((ss / (n - 1.0)).sqrt())
    } else {
        None
    };
    EventsSummary {
        mean,
        sd,
        frac_zero_unexposed: records.iter().filter(|r| r.events_unexposed == 0).count() as f64 / n,
        frac_le5_unexposed: records.iter().filter(|r| r.events_unexposed <= 5).count() as f64 / n,
    }
}

fn summarize_estimator(records: &[ReplicateRecord], position: usize) -> EstimatorStats {
    let estimator = ALL_ESTIMATORS[position];
    let n = records.len() as f64;
    let mut finite = Vec::with_capacity(records.len());
    let mut n_inf = 0usize;
    let mut n_pos_inf = 0usize;
    let mut n_error = 0usize;
    for r in records {
        let v = r.estimates[position].log_or;
        debug_assert_eq!(r.estimates[position].estimator, estimator);
        if v.is_finite() {
            finite.push(v);
        } else if v.is_nan() {
            n_error += 1;
        } else {
            n_inf += 1;
            if v > 0.0 {
                n_pos_inf += 1;
            }
        }
    }
    finite.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n_finite = finite.len();
    let (mean, sd, quantiles) = if n_finite >= 2 {
        let m = finite.iter().sum::<f64>() / n_finite as f64;
        let ss: f64 = finite.iter().map(|v| (v - m).powi(2)).sum();
        let q = [0.01, 0.05, 0.25, 0.50, 0.75, 0.95, 0.99]
            .map(|p| quantile_sorted(&finite, p));
        (Some(m), Some((ss / (n_finite as f64 - 1.0)).sqrt()), Some(q))
    } else {
        (finite.first().copied(), None, None)
    };
    EstimatorStats {
        estimator,
        n_finite,
        n_error,
        frac_infinite: n_inf as f64 / n,
        frac_pos_infinite: n_pos_inf as f64 / n,
        mean,
        sd,
        quantiles,
    }
}

/// Run the full experiment: generate, select, estimate, aggregate.
pub fn run_experiment(
    scenario: &Scenario,
    config: &ExperimentConfig,
) -> (SimulationSummary, Vec<ReplicateRecord>) {
    assert!(config.n_replicates >= 1, "need at least one replicate");
    let records = collect_records(scenario, config);

    let cie_runs: Vec<SelectionResult> = records.iter().filter_map(|r| r.cie.clone()).collect();
    let pval_runs: Vec<SelectionResult> = records.iter().filter_map(|r| r.pval.clone()).collect();
    let cie_metrics = (!cie_runs.is_empty())
        .then(|| aggregate_metrics(&cie_runs, &scenario.true_confounders, &scenario.pool));
    let pval_metrics = (!pval_runs.is_empty())
        .then(|| aggregate_metrics(&pval_runs, &scenario.true_confounders, &scenario.pool));

    let estimators = (0..ALL_ESTIMATORS.len())
        .map(|j| summarize_estimator(&records, j))
        .collect();

    let true_effects = marginal_or_oracle(scenario, config.oracle_draws, config.master_seed);

    let summary = SimulationSummary {
        scenario_id: scenario.id,
        n_replicates: config.n_replicates,
        master_seed: config.master_seed,
        events: summarize_events(&records),
        cie_metrics,
        pval_metrics,
        estimators,
        true_effects,
    };
    (summary, records)
}

/// Estimators ranked by spread of their finite estimates: interquartile
/// range descending, 5-95% range as tie-break, input order on exact ties.
/// Estimators with too few finite runs sink to the bottom.
pub fn spread_ranking(summary: &SimulationSummary) -> Vec<EstimatorId> {
    let mut order: Vec<usize> = (0..summary.estimators.len()).collect();
    let key = |i: usize| {
        let s = &summary.estimators[i];
        (
            s.iqr().unwrap_or(f64::NEG_INFINITY),
            s.wide_range().unwrap_or(f64::NEG_INFINITY),
        )
    };
    order.sort_by(|&a, &b| {
        let (ia, wa) = key(a);
        let (ib, wb) = key(b);
        (ib, wb)
            .partial_cmp(&(ia, wa))
            .unwrap()
            .then(a.cmp(&b))
    });
    order
        .into_iter()
        .map(|i| summary.estimators[i].estimator)
        .collect()
}

// ---------------------------------------------------------------------------
// Plain-text serialization
// ---------------------------------------------------------------------------

/// 17-significant-digit decimal form; round-trips every f64 exactly.
pub fn fmt_float(x: f64) -> String {
    if x.is_nan() {
        "NA".to_string()
    } else if x == f64::INFINITY {
        "inf".to_string()
    } else if x == f64::NEG_INFINITY {
        "-inf".to_string()
    } else {
        format!("{x:.16e}")
    }
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "NA".to_string(), fmt_float)
}

/// One row per replicate per estimator, tab-separated, in replicate order.
pub fn write_replicate_log(records: &[ReplicateRecord], path: &Path) -> std::io::Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        out,
        "replicate\testimator\tlog_or\tstd_err\tseparation\tn_used\tselected_size\t\
         weight_min\tweight_max\tweight_mean\tevents_total\tevents_exposed\tevents_unexposed\tdegenerate"
    )?;
    for r in records {
        for e in &r.estimates {
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.index,
                e.estimator,
                fmt_float(e.log_or),
                fmt_opt(e.std_err),
                e.separation,
                e.n_used,
                e.selected_set.len(),
                fmt_opt(e.weights.map(|w| w.min)),
                fmt_opt(e.weights.map(|w| w.max)),
                fmt_opt(e.weights.map(|w| w.mean)),
                r.events_total,
                r.events_exposed,
                r.events_unexposed,
                u8::from(r.degenerate),
            )?;
        }
    }
    out.flush()
}

/// Density/tail export grid: [-2, 6] in steps of 0.02.
pub const GRID_START: f64 = -2.0;
pub const GRID_END: f64 = 6.0;
pub const GRID_STEP: f64 = 0.02;

pub fn export_grid() -> Vec<f64> {
    let len = ((GRID_END - GRID_START) / GRID_STEP).round() as usize + 1;
    (0..len).map(|i| GRID_START + GRID_STEP * i as f64).collect()
}

/// Silverman's bandwidth over the finite estimates.
fn silverman_bandwidth(sorted: &[f64]) -> f64 {
    let n = sorted.len() as f64;
    let mean = sorted.iter().sum::<f64>() / n;
    let sd = (sorted.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let iqr = quantile_sorted(sorted, 0.75) - quantile_sorted(sorted, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    (0.9 * spread * n.powf(-0.2)).max(1e-8)
}

/// Export, per estimator: finite estimates, a kernel-smoothed density on the
/// fixed grid (scaled by the finite fraction), and the tail function
/// 1 - ECDF where +infinite estimates count as mass at +infinity. Also
/// writes the true-effect reference lines. Returns the created paths.
pub fn export_distributions(
    records: &[ReplicateRecord],
    true_effects: &TrueEffects,
    out_dir: &Path,
) -> std::io::Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let mut created = Vec::new();
    let n_total = records.len() as f64;
    let grid = export_grid();

    for (j, &estimator) in ALL_ESTIMATORS.iter().enumerate() {
        let mut finite: Vec<f64> = Vec::with_capacity(records.len());
        let mut n_pos_inf = 0usize;
        for r in records {
            let v = r.estimates[j].log_or;
            if v.is_finite() {
                finite.push(v);
            } else if v == f64::INFINITY {
                n_pos_inf += 1;
            }
        }

        let est_path = out_dir.join(format!("{estimator}_estimates.txt"));
        {
            let mut out = std::io::BufWriter::new(std::fs::File::create(&est_path)?);
            for v in &finite {
                writeln!(out, "{}", fmt_float(*v))?;
            }
            out.flush()?;
        }
        created.push(est_path);

        let mut sorted = finite.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let frac_finite = finite.len() as f64 / n_total;

        let dens_path = out_dir.join(format!("{estimator}_density.tsv"));
        {
            let mut out = std::io::BufWriter::new(std::fs::File::create(&dens_path)?);
            writeln!(out, "x\tdensity")?;
            if sorted.len() >= 2 {
                let bw = silverman_bandwidth(&sorted);
                let norm = frac_finite / (sorted.len() as f64 * bw * (2.0 * std::f64::consts::PI).sqrt());
                for &x in &grid {
                    let mut acc = 0.0;
                    for &v in &sorted {
                        let z = (x - v) / bw;
                        acc += (-0.5 * z * z).exp();
                    }
                    writeln!(out, "{}\t{}", fmt_float(x), fmt_float(norm * acc))?;
                }
            } else {
                for &x in &grid {
                    writeln!(out, "{}\t{}", fmt_float(x), fmt_float(0.0))?;
                }
            }
            out.flush()?;
        }
        created.push(dens_path);

        let tail_path = out_dir.join(format!("{estimator}_tail.tsv"));
        {
            let mut out = std::io::BufWriter::new(std::fs::File::create(&tail_path)?);
            writeln!(out, "x\ttail")?;
            // count of finite estimates strictly greater than x, plus the
            // +infinity mass
            let tail_at = |x: f64| {
                let above = sorted.len() - sorted.partition_point(|&v| v <= x);
                (above + n_pos_inf) as f64 / n_total
            };
            for &x in &grid {
                writeln!(out, "{}\t{}", fmt_float(x), fmt_float(tail_at(x)))?;
            }
            // One extra point at the largest finite estimate so the curve
            // visibly reaches its floor.
            if let Some(&max_finite) = sorted.last() {
                if max_finite > GRID_END {
                    writeln!(out, "{}\t{}", fmt_float(max_finite), fmt_float(tail_at(max_finite)))?;
                }
            }
            out.flush()?;
        }
        created.push(tail_path);
    }

    let ref_path = out_dir.join("reference_lines.tsv");
    {
        let mut out = std::io::BufWriter::new(std::fs::File::create(&ref_path)?);
        writeln!(out, "effect\tvalue")?;
        writeln!(out, "conditional\t{}", fmt_float(true_effects.conditional_log_or))?;
        writeln!(out, "marginal\t{}", fmt_float(true_effects.marginal_log_or))?;
        out.flush()?;
    }
    created.push(ref_path);
    Ok(created)
}

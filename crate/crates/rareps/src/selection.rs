//! Confounder-selection procedures and their accuracy metrics.
//!
//! CIE compares the exposure OR adjusted for one candidate at a time against
//! the crude OR; the significance rule tests each candidate's univariate
//! association with the outcome. Categorical candidates are selected or
//! rejected as whole variables.

use crate::estimators::{crude, EstimatorError};
use crate::glm::{fit_logistic, likelihood_ratio_test, GlmError, Separation};
use crate::tabular::{DataError, Dataset};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SelectionError {
    #[error("crude odds ratio is not finite; replicate is degenerate")]
    CrudeSeparation,
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Glm(#[from] GlmError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SelectionMethod {
    Oracle,
    Cie,
    Pval,
    All,
}

impl std::fmt::Display for SelectionMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SelectionMethod::Oracle => write!(f, "oracle"),
            SelectionMethod::Cie => write!(f, "cie"),
            SelectionMethod::Pval => write!(f, "pval"),
            SelectionMethod::All => write!(f, "all"),
        }
    }
}

/// How the CIE change statistic is measured. The OR-scale reading
/// |OR_adj/OR_crude - 1| is the default; the log-OR difference is available
/// for sensitivity runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CieMetric {
    OrScale,
    LogOrScale,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidateDecision {
    pub name: String,
    /// Relative OR change for CIE; p-value for PVAL.
    pub statistic: f64,
    pub selected: bool,
    /// Fit was separated (complete separation forces selection).
    pub flagged: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionResult {
    pub method: SelectionMethod,
    pub selected: Vec<String>,
    pub per_variable: Vec<CandidateDecision>,
}

impl SelectionResult {
    pub fn oracle(true_confounders: &[String]) -> Self {
        SelectionResult {
            method: SelectionMethod::Oracle,
            selected: true_confounders.to_vec(),
            per_variable: Vec::new(),
        }
    }

    pub fn all(pool: &[String]) -> Self {
        SelectionResult {
            method: SelectionMethod::All,
            selected: pool.to_vec(),
            per_variable: Vec::new(),
        }
    }
}

/// Change-in-estimate selection: candidate `v` is kept when adjusting the
/// exposure model for `v` moves the crude OR by at least `threshold`.
///
/// A completely separated adjusted fit counts as an infinite change and is
/// selected; a separated crude fit aborts the whole replicate.
pub fn select_cie(
    dataset: &Dataset,
    pool: &[String],
    threshold: f64,
    metric: CieMetric,
) -> Result<SelectionResult, SelectionError> {
    let crude_analysis = crude(dataset)?;
    if !crude_analysis.log_or.is_finite() {
        return Err(SelectionError::CrudeSeparation);
    }
    let crude_log_or = crude_analysis.log_or;

    let mut per_variable = Vec::with_capacity(pool.len());
    let mut selected = Vec::new();
    for name in pool {
        let single = [name.clone()];
        let rows = dataset.complete_case(&single)?;
        let design = rows.encode(&single, true)?;
        let decision = match fit_logistic(&design, &rows.outcome, None) {
            Ok(fit) => {
                let exposure_col = design.group("exposure").map(|g| g.start).unwrap_or(1);
                if fit.separation == Separation::Complete {
                    CandidateDecision {
                        name: name.clone(),
                        statistic: f64::INFINITY,
                        selected: true,
                        flagged: true,
                    }
                } else {
                    let adj_log_or = fit.coefficients[exposure_col];
                    let statistic = match metric {
                        CieMetric::OrScale => ((adj_log_or - crude_log_or).exp() - 1.0).abs(),
                        CieMetric::LogOrScale => (adj_log_or - crude_log_or).abs(),
                    };
                    CandidateDecision {
                        name: name.clone(),
                        statistic,
                        selected: statistic >= threshold,
                        flagged: fit.separation != Separation::None,
                    }
                }
            }
            // Unusable fit: conservative inclusion.
            Err(_) => CandidateDecision {
                name: name.clone(),
                statistic: f64::INFINITY,
                selected: true,
                flagged: true,
            },
        };
        if decision.selected {
            selected.push(name.clone());
        }
        per_variable.push(decision);
    }
    Ok(SelectionResult {
        method: SelectionMethod::Cie,
        selected,
        per_variable,
    })
}

/// Univariate significance selection: candidate `v` is kept when the
/// likelihood-ratio test of outcome on `v` (whole dummy group, df = group
/// size) has p < alpha.
pub fn select_pval(
    dataset: &Dataset,
    pool: &[String],
    alpha: f64,
) -> Result<SelectionResult, SelectionError> {
    let mut per_variable = Vec::with_capacity(pool.len());
    let mut selected = Vec::new();
    for name in pool {
        let single = [name.clone()];
        let rows = dataset.complete_case(&single)?;
        let design = rows.encode(&single, false)?;
        let decision = if design.group(name.as_str()).is_none() {
            // Candidate constant on these rows: nothing to test.
            CandidateDecision {
                name: name.clone(),
                statistic: 1.0,
                selected: false,
                flagged: false,
            }
        } else {
            let null_design = rows.encode(&[], false)?;
            let full = fit_logistic(&design, &rows.outcome, None);
            let reduced = fit_logistic(&null_design, &rows.outcome, None);
            match (full, reduced) {
                (Ok(full), Ok(reduced)) => {
                    if full.separation == Separation::Complete {
                        CandidateDecision {
                            name: name.clone(),
                            statistic: 0.0,
                            selected: true,
                            flagged: true,
                        }
                    } else {
                        let p_value = likelihood_ratio_test(&full, &reduced)?.p_value;
                        CandidateDecision {
                            name: name.clone(),
                            statistic: p_value,
                            selected: p_value < alpha,
                            flagged: full.separation != Separation::None,
                        }
                    }
                }
                _ => CandidateDecision {
                    name: name.clone(),
                    statistic: 0.0,
                    selected: true,
                    flagged: true,
                },
            }
        };
        if decision.selected {
            selected.push(name.clone());
        }
        per_variable.push(decision);
    }
    Ok(SelectionResult {
        method: SelectionMethod::Pval,
        selected,
        per_variable,
    })
}

/// Accuracy of one selection against the true confounder set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SelectionScore {
    pub true_pos: usize,
    pub false_pos: usize,
    pub includes_all: bool,
    pub exact: bool,
}

pub fn score_selection(result: &SelectionResult, true_set: &[String]) -> SelectionScore {
    let true_pos = result
        .selected
        .iter()
        .filter(|s| true_set.contains(s))
        .count();
    let false_pos = result.selected.len() - true_pos;
    let includes_all = true_set.iter().all(|t| result.selected.contains(t));
    SelectionScore {
        true_pos,
        false_pos,
        includes_all,
        exact: includes_all && false_pos == 0,
    }
}

/// Aggregate selection behavior over simulation runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionMetrics {
    pub n_runs: usize,
    pub true_pos: f64,
    pub false_pos: f64,
    pub incl_rate: f64,
    pub exact_rate: f64,
    /// Every pool variable with its selection fraction, ranked descending
    /// (ties keep pool order).
    pub top_frequencies: Vec<(String, f64)>,
}

pub fn aggregate_metrics(
    results: &[SelectionResult],
    true_set: &[String],
    pool: &[String],
) -> SelectionMetrics {
    assert!(!results.is_empty(), "aggregate_metrics needs at least one run");
    let n = results.len() as f64;
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut incl = 0.0;
    let mut exact = 0.0;
    let mut counts = vec![0usize; pool.len()];
    for r in results {
        let s = score_selection(r, true_set);
        tp += s.true_pos as f64;
        fp += s.false_pos as f64;
        incl += f64::from(s.includes_all);
        exact += f64::from(s.exact);
        for (i, v) in pool.iter().enumerate() {
            if r.selected.contains(v) {
                counts[i] += 1;
            }
        }
    }
    let mut top_frequencies: Vec<(String, f64)> = pool
        .iter()
        .cloned()
        .zip(counts.iter().map(|&c| c as f64 / n))
        .collect();
    top_frequencies.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    SelectionMetrics {
        n_runs: results.len(),
        true_pos: tp / n,
        false_pos: fp / n,
        incl_rate: incl / n,
        exact_rate: exact / n,
        top_frequencies,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::glm::expit;
    use crate::tabular::{CovariateSchema, SchemaEntry, VariableKind};
    use rand::RngExt;

    fn synthetic(n: usize, seed: u64, strong_confounder: bool) -> Dataset {
        let mut rng = crate::rng::stream(seed, crate::rng::StreamDomain::Generic, 2);
        let mut exposure = Vec::with_capacity(n);
        let mut outcome = Vec::with_capacity(n);
        let mut conf = Vec::with_capacity(n);
        let mut noise = Vec::with_capacity(n);
        let mut cat = Vec::with_capacity(n);
        let beta = if strong_confounder { 1.5 } else { 0.0 };
        for _ in 0..n {
            let c = f64::from(rng.random::<f64>() < 0.5);
            let z = rng.random::<f64>();
            let k = (rng.random::<f64>() * 3.0).floor().min(2.0);
            let a = u8::from(rng.random::<f64>() < expit(0.3 + beta * c));
            let y = u8::from(rng.random::<f64>() < expit(-2.4 + 0.8 * a as f64 + beta * c));
            exposure.push(a);
            outcome.push(y);
            conf.push(c);
            noise.push(z);
            cat.push(k);
        }
        let schema = CovariateSchema::new(vec![
            SchemaEntry {
                name: "conf".into(),
                kind: VariableKind::Binary,
                reference_level: 0,
            },
            SchemaEntry {
                name: "noise".into(),
                kind: VariableKind::Continuous,
                reference_level: 0,
            },
            SchemaEntry {
                name: "cat".into(),
                kind: VariableKind::Categorical {
                    labels: vec!["1".into(), "2".into(), "3".into()],
                },
                reference_level: 0,
            },
        ])
        .unwrap();
        Dataset::complete(schema, exposure, outcome, vec![conf, noise, cat]).unwrap()
    }

    fn pool() -> Vec<String> {
        vec!["conf".into(), "noise".into(), "cat".into()]
    }

    #[test]
    fn cie_statistic_is_relative_or_change() {
        let ds = synthetic(2000, 5, true);
        let result = select_cie(&ds, &pool(), 0.10, CieMetric::OrScale).unwrap();
        // Recompute the first candidate's statistic from scratch.
        let crude_log_or = crate::estimators::crude(&ds).unwrap().log_or;
        let design = ds.encode(&["conf".to_string()], true).unwrap();
        let fit = fit_logistic(&design, &ds.outcome, None).unwrap();
        let expected = ((fit.coefficients[1] - crude_log_or).exp() - 1.0).abs();
        let conf = &result.per_variable[0];
        assert_eq!(conf.name, "conf");
        assert!((conf.statistic - expected).abs() < 1e-10);
        assert_eq!(conf.selected, conf.statistic >= 0.10);
    }

    #[test]
    fn cie_ignores_independent_candidates_at_large_n() {
        let ds = synthetic(10_000, 6, true);
        let result = select_cie(&ds, &pool(), 0.10, CieMetric::OrScale).unwrap();
        let noise = result.per_variable.iter().find(|d| d.name == "noise").unwrap();
        assert!(noise.statistic < 0.02, "statistic {}", noise.statistic);
        assert!(!noise.selected);
        // The strong confounder must be picked up.
        assert!(result.selected.contains(&"conf".to_string()));
    }

    #[test]
    fn cie_log_scale_metric_is_available() {
        let ds = synthetic(2000, 5, true);
        let or_scale = select_cie(&ds, &pool(), 0.10, CieMetric::OrScale).unwrap();
        let log_scale = select_cie(&ds, &pool(), 0.10, CieMetric::LogOrScale).unwrap();
        let a = or_scale.per_variable[0].statistic;
        let b = log_scale.per_variable[0].statistic;
        // b is |delta|; the OR-scale statistic is |exp(delta) - 1|.
        let up = (b.exp() - 1.0).abs();
        let down = (1.0 - (-b).exp()).abs();
        assert!((a - up).abs() < 1e-10 || (a - down).abs() < 1e-10);
    }

    #[test]
    fn cie_aborts_on_crude_separation() {
        let schema = CovariateSchema::new(vec![SchemaEntry {
            name: "x".into(),
            kind: VariableKind::Continuous,
            reference_level: 0,
        }])
        .unwrap();
        let n = 60;
        let ds = Dataset::complete(
            schema,
            (0..n).map(|i| u8::from(i < 40)).collect(),
            (0..n).map(|i| u8::from(i < 5)).collect(), // events only among exposed
            vec![(0..n).map(|i| i as f64 / n as f64).collect()],
        )
        .unwrap();
        assert!(matches!(
            select_cie(&ds, &["x".to_string()], 0.10, CieMetric::OrScale),
            Err(SelectionError::CrudeSeparation)
        ));
    }

    #[test]
    fn pval_groups_categorical_candidates() {
        let ds = synthetic(3000, 8, true);
        let result = select_pval(&ds, &pool(), 0.05).unwrap();
        assert_eq!(result.per_variable.len(), 3);
        // Strong confounder selected; whole-variable decisions only.
        assert!(result.selected.contains(&"conf".to_string()));
        for d in &result.per_variable {
            assert!(pool().contains(&d.name));
        }
    }

    #[test]
    fn thresholds_are_monotone() {
        let ds = synthetic(1500, 12, true);
        let loose = select_cie(&ds, &pool(), 0.05, CieMetric::OrScale).unwrap();
        let strict = select_cie(&ds, &pool(), 0.20, CieMetric::OrScale).unwrap();
        for v in &strict.selected {
            assert!(loose.selected.contains(v));
        }
        let tight = select_pval(&ds, &pool(), 0.01).unwrap();
        let wide = select_pval(&ds, &pool(), 0.20).unwrap();
        for v in &tight.selected {
            assert!(wide.selected.contains(v));
        }
    }

    #[test]
    fn scoring_rules() {
        let true_set = vec!["a".to_string(), "b".to_string()];
        let exact = SelectionResult {
            method: SelectionMethod::Cie,
            selected: true_set.clone(),
            per_variable: vec![],
        };
        let s = score_selection(&exact, &true_set);
        assert_eq!((s.true_pos, s.false_pos), (2, 0));
        assert!(s.includes_all && s.exact);

        let empty = SelectionResult {
            method: SelectionMethod::Cie,
            selected: vec![],
            per_variable: vec![],
        };
        let s = score_selection(&empty, &true_set);
        assert_eq!((s.true_pos, s.false_pos), (0, 0));
        assert!(!s.includes_all && !s.exact);
    }

    #[test]
    fn oracle_and_all_degenerate_selections() {
        let true_set = vec!["a".to_string()];
        let pool = vec!["a".to_string(), "b".to_string(), "c".to_string()];
        let oracle = SelectionResult::oracle(&true_set);
        let s = score_selection(&oracle, &true_set);
        assert!(s.exact);
        let all = SelectionResult::all(&pool);
        let s = score_selection(&all, &true_set);
        assert!(s.includes_all);
        assert_eq!(s.false_pos, pool.len() - true_set.len());
    }

    #[test]
    fn aggregation_counts_frequencies() {
        let pool = vec!["x1".to_string(), "x2".to_string()];
        let runs = vec![
            SelectionResult {
                method: SelectionMethod::Cie,
                selected: vec!["x1".into()],
                per_variable: vec![],
            },
            SelectionResult {
                method: SelectionMethod::Cie,
                selected: vec!["x2".into()],
                per_variable: vec![],
            },
        ];
        let m = aggregate_metrics(&runs, &["x1".to_string()], &pool);
        assert_eq!(m.n_runs, 2);
        assert!((m.true_pos - 0.5).abs() < 1e-12);
        assert!((m.false_pos - 0.5).abs() < 1e-12);
        assert!((m.incl_rate - 0.5).abs() < 1e-12);
        for (_, f) in &m.top_frequencies {
            assert!((f - 0.5).abs() < 1e-12);
        }
        // Single exact run.
        let m = aggregate_metrics(&runs[..1].to_vec(), &["x1".to_string()], &pool);
        assert!((m.exact_rate - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pval_size_matches_alpha_for_pure_noise() {
        // Rare outcome, independent binary candidate: selection probability
        // should sit near the nominal 5% level.
        let n = 600;
        let runs = 10_000;
        let mut selected = 0usize;
        let mut rng = crate::rng::stream(1234, crate::rng::StreamDomain::Generic, 3);
        let schema = CovariateSchema::new(vec![SchemaEntry {
            name: "z".into(),
            kind: VariableKind::Binary,
            reference_level: 0,
        }])
        .unwrap();
        for _ in 0..runs {
            let mut exposure = vec![0u8; n];
            exposure[0] = 1; // irrelevant for PVAL; keep both arms non-empty
            let mut outcome = Vec::with_capacity(n);
            let mut z = Vec::with_capacity(n);
            for _ in 0..n {
                outcome.push(u8::from(rng.random::<f64>() < 0.052));
                z.push(f64::from(rng.random::<f64>() < 0.5));
            }
            if outcome.iter().all(|&y| y == 0) {
                continue;
            }
            let ds = Dataset::complete(
                schema.clone(),
                exposure,
                outcome,
                vec![z],
            )
            .unwrap();
            let result = select_pval(&ds, &["z".to_string()], 0.05).unwrap();
            if result.selected.contains(&"z".to_string()) {
                selected += 1;
            }
        }
        let rate = selected as f64 / runs as f64;
        assert!((rate - 0.05).abs() < 0.01, "selection rate {rate}");
    }
}

//! The ten causal-effect estimators compared in the simulation study: crude,
//! propensity-score regression adjustment and stabilized IPW (each under
//! oracle / CIE / significance / no selection), and the multivariate outcome
//! model with the true confounders.

use crate::glm::{expit, fit_logistic, logit, GlmError, GlmFit, Separation};
use crate::selection::{select_cie, select_pval, CieMetric, SelectionResult};
use crate::tabular::{DataError, Dataset, DesignMatrix};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Fitted propensity scores are kept inside this band so stabilized weights
/// stay finite even under quasi-separation. Extreme weights are the
/// phenomenon under study; they must not be truncated away silently.
pub const PS_CLAMP: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("an exposure arm has no subjects")]
    EmptyArm,
    #[error("an exposure arm has zero total weight")]
    ZeroWeightArm,
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Glm(#[from] GlmError),
}

/// Labels for the ten estimators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EstimatorId {
    Crude,
    RegOracle,
    RegCie,
    RegPval,
    RegAll,
    IpwOracle,
    IpwCie,
    IpwPval,
    IpwAll,
    TrueMultivariate,
}

pub const ALL_ESTIMATORS: [EstimatorId; 10] = [
    EstimatorId::Crude,
    EstimatorId::RegOracle,
    EstimatorId::RegCie,
    EstimatorId::RegPval,
    EstimatorId::RegAll,
    EstimatorId::IpwOracle,
    EstimatorId::IpwCie,
    EstimatorId::IpwPval,
    EstimatorId::IpwAll,
    EstimatorId::TrueMultivariate,
];

impl EstimatorId {
    pub fn label(self) -> &'static str {
        match self {
            EstimatorId::Crude => "crude",
            EstimatorId::RegOracle => "reg-oracle",
            EstimatorId::RegCie => "reg-cie",
            EstimatorId::RegPval => "reg-pval",
            EstimatorId::RegAll => "reg-all",
            EstimatorId::IpwOracle => "ipw-oracle",
            EstimatorId::IpwCie => "ipw-cie",
            EstimatorId::IpwPval => "ipw-pval",
            EstimatorId::IpwAll => "ipw-all",
            EstimatorId::TrueMultivariate => "true-multivariate",
        }
    }
}

impl std::fmt::Display for EstimatorId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// Scale on which the estimated PS enters the adjusted outcome model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PsScale {
    Probability,
    Logit,
}

/// Knobs shared by the estimator pipeline. Defaults are the study settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimatorOptions {
    pub ps_adjust_scale: PsScale,
    /// Symmetric percentile for optional weight truncation; `None` leaves
    /// weights untouched (the study setting).
    pub weight_truncation: Option<f64>,
    pub cie_threshold: f64,
    pub pval_alpha: f64,
    pub cie_metric: CieMetric,
}

impl Default for EstimatorOptions {
    fn default() -> Self {
        EstimatorOptions {
            ps_adjust_scale: PsScale::Probability,
            weight_truncation: None,
            cie_threshold: 0.10,
            pval_alpha: 0.05,
            cie_metric: CieMetric::OrScale,
        }
    }
}

/// A fitted propensity model with its clamped scores.
#[derive(Debug, Clone)]
pub struct PsModel {
    pub fit: GlmFit,
    pub scores: Vec<f64>,
    pub confounder_set: Vec<String>,
    pub marginal_exposure_rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightSummary {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

/// One estimator's output on one dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PsAnalysis {
    pub estimator: EstimatorId,
    /// Extended real: +/- infinity under separation.
    pub log_or: f64,
    pub std_err: Option<f64>,
    /// 95% interval on the OR scale; present only for clean fits.
    pub ci95: Option<(f64, f64)>,
    pub selected_set: Vec<String>,
    pub n_used: usize,
    pub separation: Separation,
    pub weights: Option<WeightSummary>,
}

fn ci95_or(log_or: f64, std_err: f64) -> (f64, f64) {
    (
        (log_or - 1.96 * std_err).exp(),
        (log_or + 1.96 * std_err).exp(),
    )
}

/// 2x2 exposure-by-outcome cell counts
/// (events exposed, nonevents exposed, events unexposed, nonevents unexposed).
pub fn outcome_cells(dataset: &Dataset) -> (f64, f64, f64, f64) {
    let mut cells = [0.0f64; 4];
    for (&a, &y) in dataset.exposure.iter().zip(&dataset.outcome) {
        cells[(a as usize) * 2 + y as usize] += 1.0;
    }
    (cells[3], cells[2], cells[1], cells[0])
}

fn zero_cell_log_or(a: f64, b: f64, c: f64, d: f64) -> f64 {
    // Sign follows the empty cell: zero events unexposed pushes the OR up.
    let num_zero = a == 0.0 || d == 0.0;
    let den_zero = b == 0.0 || c == 0.0;
    match (num_zero, den_zero) {
        (true, false) => f64::NEG_INFINITY,
        (false, true) => f64::INFINITY,
        _ => f64::NAN,
    }
}

/// Unadjusted exposure-outcome odds ratio from the 2x2 table.
pub fn crude(dataset: &Dataset) -> Result<PsAnalysis, EstimatorError> {
    let rows = dataset.complete_case(&[])?;
    let (a, b, c, d) = outcome_cells(&rows);
    if a + b == 0.0 || c + d == 0.0 {
        return Err(EstimatorError::EmptyArm);
    }
    let n_used = rows.n();
    if a == 0.0 || b == 0.0 || c == 0.0 || d == 0.0 {
        return Ok(PsAnalysis {
            estimator: EstimatorId::Crude,
            log_or: zero_cell_log_or(a, b, c, d),
            std_err: None,
            ci95: None,
            selected_set: Vec::new(),
            n_used,
            separation: Separation::Complete,
            weights: None,
        });
    }
    let log_or = (a * d / (b * c)).ln();
    let std_err = (1.0 / a + 1.0 / b + 1.0 / c + 1.0 / d).sqrt();
    Ok(PsAnalysis {
        estimator: EstimatorId::Crude,
        log_or,
        std_err: Some(std_err),
        ci95: Some(ci95_or(log_or, std_err)),
        selected_set: Vec::new(),
        n_used,
        separation: Separation::None,
        weights: None,
    })
}

/// Fit the propensity model (exposure on `confounder_set`) and return the
/// clamped fitted scores. An empty set yields constant scores P(A=1).
pub fn fit_propensity(
    dataset: &Dataset,
    confounder_set: &[String],
) -> Result<PsModel, EstimatorError> {
    let design = dataset.encode(confounder_set, false)?;
    let fit = fit_logistic(&design, &dataset.exposure, None)?;
    let scores: Vec<f64> = design
        .linear_predictor(&fit.coefficients)
        .iter()
        .map(|&e| expit(e).clamp(PS_CLAMP, 1.0 - PS_CLAMP))
        .collect();
    let marginal_exposure_rate =
        dataset.exposure.iter().map(|&a| a as f64).sum::<f64>() / dataset.n() as f64;
    Ok(PsModel {
        fit,
        scores,
        confounder_set: confounder_set.to_vec(),
        marginal_exposure_rate,
    })
}

/// Stabilized inverse-probability weights:
/// w_i = A_i P(A=1)/pi_i + (1 - A_i) P(A=0)/(1 - pi_i).
pub fn stabilized_weights(ps: &PsModel, exposure: &[u8]) -> Vec<f64> {
    assert_eq!(ps.scores.len(), exposure.len());
    let p1 = ps.marginal_exposure_rate;
    let p0 = 1.0 - p1;
    ps.scores
        .iter()
        .zip(exposure)
        .map(|(&pi, &a)| {
            if a == 1 {
                p1 / pi
            } else {
                p0 / (1.0 - pi)
            }
        })
        .collect()
}

fn truncate_weights(weights: &mut [f64], percentile: f64) {
    let mut sorted = weights.to_vec();
    sorted.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let lo = quantile_sorted(&sorted, percentile);
    let hi = quantile_sorted(&sorted, 1.0 - percentile);
    for w in weights.iter_mut() {
        *w = w.clamp(lo, hi);
    }
}

/// Linear-interpolation quantile of an ascending slice.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

fn weight_summary(weights: &[f64]) -> WeightSummary {
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    let mut sum = 0.0;
    for &w in weights {
        min = min.min(w);
        max = max.max(w);
        sum += w;
    }
    WeightSummary {
        min,
        max,
        mean: sum / weights.len() as f64,
    }
}

/// Stabilized-IPW estimate of the marginal log OR.
///
/// The point estimate is the weighted-score closed form
/// logit(weighted event rate, exposed) - logit(weighted event rate, unexposed);
/// the weighted logistic fit of outcome on exposure reproduces it (checked in
/// debug builds) and supplies the sandwich standard error.
pub fn ipw_estimate(
    dataset: &Dataset,
    ps: &PsModel,
    id: EstimatorId,
    options: &EstimatorOptions,
) -> Result<PsAnalysis, EstimatorError> {
    let n = dataset.n();
    let mut weights = stabilized_weights(ps, &dataset.exposure);
    if let Some(p) = options.weight_truncation {
        truncate_weights(&mut weights, p);
    }
    let summary = weight_summary(&weights);

    let mut syw1 = 0.0;
    let mut sw1 = 0.0;
    let mut syw0 = 0.0;
    let mut sw0 = 0.0;
    for i in 0..n {
        let w = weights[i];
        let y = dataset.outcome[i] as f64;
        if dataset.exposure[i] == 1 {
            sw1 += w;
            syw1 += w * y;
        } else {
            sw0 += w;
            syw0 += w * y;
        }
    }
    if sw1 == 0.0 || sw0 == 0.0 {
        return Err(EstimatorError::ZeroWeightArm);
    }
    let p1 = syw1 / sw1;
    let p0 = syw0 / sw0;

    if p1 <= 0.0 || p1 >= 1.0 || p0 <= 0.0 || p0 >= 1.0 {
        // A weighted cell is empty: the estimate is a signed infinity.
        let log_or = if p1 >= 1.0 || p0 <= 0.0 {
            f64::INFINITY
        } else {
            f64::NEG_INFINITY
        };
        return Ok(PsAnalysis {
            estimator: id,
            log_or,
            std_err: None,
            ci95: None,
            selected_set: ps.confounder_set.clone(),
            n_used: n,
            separation: Separation::Complete,
            weights: Some(summary),
        });
    }

    let log_or = logit(p1) - logit(p0);

    let design = DesignMatrix::from_raw(
        vec!["(intercept)".into(), "exposure".into()],
        vec![
            vec![1.0; n],
            dataset.exposure.iter().map(|&a| a as f64).collect(),
        ],
        true,
    );
    let fit = fit_logistic(&design, &dataset.outcome, Some(&weights))?;
    debug_assert!(
        (fit.coefficients[1] - log_or).abs() < 1e-8,
        "weighted GLM and closed form disagree: {} vs {log_or}",
        fit.coefficients[1]
    );
    let std_err = fit.sandwich_std_err(1);
    let separation = fit.separation;
    Ok(PsAnalysis {
        estimator: id,
        log_or,
        std_err,
        ci95: match (std_err, separation) {
            (Some(se), Separation::None) if se.is_finite() => Some(ci95_or(log_or, se)),
            _ => None,
        },
        selected_set: ps.confounder_set.clone(),
        n_used: n,
        separation,
        weights: Some(summary),
    })
}

/// Extract the exposure analysis from a fitted outcome model.
fn exposure_analysis(
    fit: &GlmFit,
    design: &DesignMatrix,
    id: EstimatorId,
    selected_set: Vec<String>,
) -> PsAnalysis {
    let col = design
        .group("exposure")
        .map(|g| g.start)
        .expect("outcome design includes the exposure column");
    let coef = fit.coefficients[col];
    let diverged = fit.diverging_columns()[col];
    let (log_or, std_err) = if fit.separation == Separation::Complete && diverged {
        (coef.signum() * f64::INFINITY, None)
    } else {
        (coef, Some(fit.std_err(col)))
    };
    PsAnalysis {
        estimator: id,
        log_or,
        std_err,
        ci95: match (std_err, fit.separation) {
            (Some(se), Separation::None) if se.is_finite() => Some(ci95_or(log_or, se)),
            _ => None,
        },
        selected_set,
        n_used: fit.n_used,
        separation: fit.separation,
        weights: None,
    }
}

/// PS regression adjustment: logistic outcome model on intercept, exposure
/// and the estimated score as one linear covariate. A constant score column
/// is dropped, collapsing to the crude model.
pub fn regression_adjust(
    dataset: &Dataset,
    ps: &PsModel,
    id: EstimatorId,
    options: &EstimatorOptions,
) -> Result<PsAnalysis, EstimatorError> {
    let n = dataset.n();
    let ps_col: Vec<f64> = match options.ps_adjust_scale {
        PsScale::Probability => ps.scores.clone(),
        PsScale::Logit => ps.scores.iter().map(|&p| logit(p)).collect(),
    };
    let constant = ps_col.windows(2).all(|w| w[0] == w[1]);
    let mut names = vec!["(intercept)".to_string(), "exposure".to_string()];
    let mut cols = vec![
        vec![1.0; n],
        dataset.exposure.iter().map(|&a| a as f64).collect(),
    ];
    if !constant {
        names.push("ps".into());
        cols.push(ps_col);
    }
    let design = DesignMatrix::from_raw(names, cols, true);
    let fit = fit_logistic(&design, &dataset.outcome, None)?;
    Ok(exposure_analysis(
        &fit,
        &design,
        id,
        ps.confounder_set.clone(),
    ))
}

/// Multivariate logistic outcome model with the given (true) confounders.
pub fn true_multivariate(
    dataset: &Dataset,
    true_confounders: &[String],
) -> Result<PsAnalysis, EstimatorError> {
    let design = dataset.encode(true_confounders, true)?;
    let fit = fit_logistic(&design, &dataset.outcome, None)?;
    Ok(exposure_analysis(
        &fit,
        &design,
        EstimatorId::TrueMultivariate,
        true_confounders.to_vec(),
    ))
}

/// All ten estimates on one dataset, plus the shared selection results.
#[derive(Debug, Clone)]
pub struct TenEstimates {
    pub estimates: Vec<PsAnalysis>,
    pub cie: Option<SelectionResult>,
    pub pval: Option<SelectionResult>,
}

/// Run the full ten-estimator comparison. Selection happens once per dataset
/// and is shared between the regression-adjustment and IPW arms. A crude
/// zero cell makes the replicate degenerate: every estimator inherits the
/// signed infinite estimate. Individual estimator failures are recorded as
/// NaN markers and never abort the rest.
pub fn run_all_ten(
    dataset: &Dataset,
    oracle_set: &[String],
    pool: &[String],
    options: &EstimatorOptions,
) -> Result<TenEstimates, EstimatorError> {
    let crude_analysis = crude(dataset)?;

    if crude_analysis.separation == Separation::Complete {
        let estimates = ALL_ESTIMATORS
            .iter()
            .map(|&id| {
                let selected_set = match id {
                    EstimatorId::RegOracle | EstimatorId::IpwOracle | EstimatorId::TrueMultivariate => {
                        oracle_set.to_vec()
                    }
                    EstimatorId::RegAll | EstimatorId::IpwAll => pool.to_vec(),
                    _ => Vec::new(),
                };
                PsAnalysis {
                    estimator: id,
                    selected_set,
                    ..crude_analysis.clone()
                }
            })
            .collect();
        return Ok(TenEstimates {
            estimates,
            cie: None,
            pval: None,
        });
    }

    let cie = select_cie(dataset, pool, options.cie_threshold, options.cie_metric)
        .expect("crude OR is finite here");
    let pval = select_pval(dataset, pool, options.pval_alpha).expect("crude OR is finite here");

    let error_marker = |id: EstimatorId, set: &[String]| PsAnalysis {
        estimator: id,
        log_or: f64::NAN,
        std_err: None,
        ci95: None,
        selected_set: set.to_vec(),
        n_used: 0,
        separation: Separation::None,
        weights: None,
    };

    let mut estimates = Vec::with_capacity(10);
    estimates.push(crude_analysis);

    let arms: [(&[String], EstimatorId, EstimatorId); 4] = [
        (oracle_set, EstimatorId::RegOracle, EstimatorId::IpwOracle),
        (&cie.selected, EstimatorId::RegCie, EstimatorId::IpwCie),
        (&pval.selected, EstimatorId::RegPval, EstimatorId::IpwPval),
        (pool, EstimatorId::RegAll, EstimatorId::IpwAll),
    ];
    let mut reg_results = Vec::with_capacity(4);
    let mut ipw_results = Vec::with_capacity(4);
    for (set, reg_id, ipw_id) in arms {
        let analysis_rows = dataset.complete_case(set);
        let shared = analysis_rows
            .as_ref()
            .ok()
            .and_then(|rows| fit_propensity(rows, set).ok().map(|ps| (rows, ps)));
        match shared {
            Some((rows, ps)) => {
                reg_results.push(
                    regression_adjust(rows, &ps, reg_id, options)
                        .unwrap_or_else(|_| error_marker(reg_id, set)),
                );
                ipw_results.push(
                    ipw_estimate(rows, &ps, ipw_id, options)
                        .unwrap_or_else(|_| error_marker(ipw_id, set)),
                );
            }
            None => {
                reg_results.push(error_marker(reg_id, set));
                ipw_results.push(error_marker(ipw_id, set));
            }
        }
    }
    estimates.extend(reg_results);
    estimates.extend(ipw_results);
    estimates.push(
        true_multivariate(dataset, oracle_set)
            .unwrap_or_else(|_| error_marker(EstimatorId::TrueMultivariate, oracle_set)),
    );

    Ok(TenEstimates {
        estimates,
        cie: Some(cie),
        pval: Some(pval),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tabular::{CovariateSchema, SchemaEntry, VariableKind};
    use approx::assert_relative_eq;
    use rand::RngExt;

    fn table_dataset(a: usize, b: usize, c: usize, d: usize) -> Dataset {
        let mut exposure = Vec::new();
        let mut outcome = Vec::new();
        for (count, (x, y)) in [(a, (1, 1)), (b, (1, 0)), (c, (0, 1)), (d, (0, 0))] {
            for _ in 0..count {
                exposure.push(x);
                outcome.push(y);
            }
        }
        Dataset::complete(
            CovariateSchema::new(vec![]).unwrap(),
            exposure,
            outcome,
            vec![],
        )
        .unwrap()
    }

    fn with_continuous(a: &Dataset, name: &str, values: Vec<f64>) -> Dataset {
        let mut entries = a.schema.entries().to_vec();
        entries.push(SchemaEntry {
            name: name.into(),
            kind: VariableKind::Continuous,
            reference_level: 0,
        });
        let mut cols: Vec<Vec<f64>> = entries[..entries.len() - 1]
            .iter()
            .map(|e| a.column(&e.name).unwrap().values.clone())
            .collect();
        cols.push(values);
        Dataset::complete(
            CovariateSchema::new(entries).unwrap(),
            a.exposure.clone(),
            a.outcome.clone(),
            cols,
        )
        .unwrap()
    }

    #[test]
    fn crude_matches_reported_table_row() {
        let ds = table_dataset(30, 289, 5, 139);
        let res = crude(&ds).unwrap();
        assert_relative_eq!(res.log_or.exp(), 2.8858, epsilon = 1e-3);
        let (lo, hi) = res.ci95.unwrap();
        assert_relative_eq!(lo, 1.10, epsilon = 5e-3);
        assert_relative_eq!(hi, 7.60, epsilon = 5e-3);
        assert_eq!(res.n_used, 463);
    }

    #[test]
    fn crude_symmetric_table_is_null() {
        let ds = table_dataset(5, 5, 5, 5);
        assert_eq!(crude(&ds).unwrap().log_or, 0.0);
    }

    #[test]
    fn crude_zero_cell_is_signed_infinity() {
        let ds = table_dataset(3, 100, 0, 100);
        let res = crude(&ds).unwrap();
        assert_eq!(res.log_or, f64::INFINITY);
        assert_eq!(res.separation, Separation::Complete);
        assert!(res.ci95.is_none());
        // Mirror case: zero events among the exposed.
        let ds = table_dataset(0, 100, 3, 100);
        assert_eq!(crude(&ds).unwrap().log_or, f64::NEG_INFINITY);
    }

    #[test]
    fn crude_empty_arm_errors() {
        let ds = table_dataset(3, 100, 0, 0);
        assert!(matches!(crude(&ds), Err(EstimatorError::EmptyArm)));
    }

    #[test]
    fn empty_confounder_set_gives_constant_scores() {
        let ds = table_dataset(8, 22, 4, 26);
        let ps = fit_propensity(&ds, &[]).unwrap();
        let rate = 30.0 / 60.0;
        assert_relative_eq!(ps.marginal_exposure_rate, rate, epsilon = 1e-12);
        for &s in &ps.scores {
            assert_relative_eq!(s, rate, epsilon = 1e-6);
        }
    }

    #[test]
    fn balanced_covariate_gives_zero_ps_slope() {
        // x takes each value once per exposure arm: no association.
        let base = table_dataset(2, 2, 2, 2);
        let ds = with_continuous(&base, "x", vec![0., 1., 0., 1., 0., 1., 0., 1.]);
        let ps = fit_propensity(&ds, &["x".into()]).unwrap();
        assert_relative_eq!(ps.fit.coefficients[1], 0.0, epsilon = 1e-8);
    }

    fn ps_with_scores(ds: &Dataset, scores: Vec<f64>, rate: f64) -> PsModel {
        let mut ps = fit_propensity(ds, &[]).unwrap();
        ps.scores = scores;
        ps.marginal_exposure_rate = rate;
        ps
    }

    #[test]
    fn stabilized_weight_formula() {
        let ds = table_dataset(1, 1, 1, 1);
        // pi equal to the marginal rate: weights are exactly one.
        let ps = ps_with_scores(&ds, vec![0.5; 4], 0.5);
        assert_eq!(stabilized_weights(&ps, &ds.exposure), vec![1.0; 4]);
        // Exposed subject with pi = 0.25 under P(A=1) = 0.5: weight 2.
        let ps = ps_with_scores(&ds, vec![0.25, 0.25, 0.5, 0.5], 0.5);
        let w = stabilized_weights(&ps, &ds.exposure);
        assert_relative_eq!(w[0], 2.0, epsilon = 1e-12);
        // Unexposed subject with P(A=0) = 1/3 and pi = 0.5: weight 2/3.
        let ps = ps_with_scores(&ds, vec![0.5; 4], 2.0 / 3.0);
        let w = stabilized_weights(&ps, &ds.exposure);
        assert_relative_eq!(w[2], 2.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn ipw_with_unit_weights_reduces_to_crude() {
        let ds = table_dataset(9, 31, 6, 44);
        let ps = fit_propensity(&ds, &[]).unwrap();
        let crude_log_or = crude(&ds).unwrap().log_or;
        let ipw = ipw_estimate(&ds, &ps, EstimatorId::IpwAll, &EstimatorOptions::default())
            .unwrap();
        assert_relative_eq!(ipw.log_or, crude_log_or, epsilon = 1e-12);
        let w = ipw.weights.unwrap();
        assert_relative_eq!(w.mean, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn ipw_closed_form_hand_example() {
        // Weights (2, 2, 1, 3) via scores (0.25, 0.25, 0.5, 5/6) at P(A=1)=0.5.
        let ds = table_dataset(1, 1, 1, 1);
        let ps = ps_with_scores(&ds, vec![0.25, 0.25, 0.5, 5.0 / 6.0], 0.5);
        let ipw = ipw_estimate(&ds, &ps, EstimatorId::IpwOracle, &EstimatorOptions::default())
            .unwrap();
        // logit(1/2) - logit(1/4)
        assert_relative_eq!(ipw.log_or, 1.0986123, epsilon = 1e-6);
    }

    #[test]
    fn ipw_zero_weighted_cell_is_infinite() {
        let ds = table_dataset(3, 37, 0, 40);
        let ps = fit_propensity(&ds, &[]).unwrap();
        let ipw = ipw_estimate(&ds, &ps, EstimatorId::IpwOracle, &EstimatorOptions::default())
            .unwrap();
        assert_eq!(ipw.log_or, f64::INFINITY);
        assert_eq!(ipw.separation, Separation::Complete);
    }

    #[test]
    fn regression_adjust_with_constant_ps_equals_crude() {
        let ds = table_dataset(12, 48, 5, 55);
        let ps = fit_propensity(&ds, &[]).unwrap();
        let crude_log_or = crude(&ds).unwrap().log_or;
        let reg = regression_adjust(&ds, &ps, EstimatorId::RegOracle, &EstimatorOptions::default())
            .unwrap();
        assert_relative_eq!(reg.log_or, crude_log_or, epsilon = 1e-6);
    }

    #[test]
    fn regression_adjust_on_outcome_unrelated_ps_matches_crude_at_large_n() {
        // PS built from a covariate that predicts exposure but not outcome:
        // the adjusted and crude estimates coincide asymptotically.
        let n = 10_000;
        let mut rng = crate::rng::stream(11, crate::rng::StreamDomain::Generic, 0);
        let mut exposure = Vec::with_capacity(n);
        let mut outcome = Vec::with_capacity(n);
        let mut x = Vec::with_capacity(n);
        for _ in 0..n {
            let xi: f64 = rng.random::<f64>() * 2.0 - 1.0;
            let a = u8::from(rng.random::<f64>() < expit(0.6 + 0.8 * xi));
            let y = u8::from(rng.random::<f64>() < expit(-3.2 + a as f64));
            x.push(xi);
            exposure.push(a);
            outcome.push(y);
        }
        let schema = CovariateSchema::new(vec![SchemaEntry {
            name: "x".into(),
            kind: VariableKind::Continuous,
            reference_level: 0,
        }])
        .unwrap();
        let ds = Dataset::complete(schema, exposure, outcome, vec![x]).unwrap();
        let ps = fit_propensity(&ds, &["x".into()]).unwrap();
        let crude_log_or = crude(&ds).unwrap().log_or;
        let reg = regression_adjust(&ds, &ps, EstimatorId::RegAll, &EstimatorOptions::default())
            .unwrap();
        assert!(
            (reg.log_or - crude_log_or).abs() < 0.05,
            "difference {}",
            reg.log_or - crude_log_or
        );
    }

    #[test]
    fn true_multivariate_with_empty_set_equals_crude() {
        let ds = table_dataset(7, 33, 4, 36);
        let crude_log_or = crude(&ds).unwrap().log_or;
        let tm = true_multivariate(&ds, &[]).unwrap();
        assert_relative_eq!(tm.log_or, crude_log_or, epsilon = 1e-6);
    }

    fn pooled_dataset(n: usize, seed: u64) -> Dataset {
        let mut rng = crate::rng::stream(seed, crate::rng::StreamDomain::Generic, 1);
        let mut exposure = Vec::with_capacity(n);
        let mut outcome = Vec::with_capacity(n);
        let mut x1 = Vec::with_capacity(n);
        let mut x2 = Vec::with_capacity(n);
        for _ in 0..n {
            let v1: f64 = rng.random();
            let v2 = f64::from(rng.random::<f64>() < 0.5);
            let a = u8::from(rng.random::<f64>() < expit(0.4 - 1.2 * v1 + v2));
            let y = u8::from(rng.random::<f64>() < expit(-2.6 + a as f64 - v1 - v2));
            exposure.push(a);
            outcome.push(y);
            x1.push(v1);
            x2.push(v2);
        }
        let schema = CovariateSchema::new(vec![
            SchemaEntry {
                name: "x1".into(),
                kind: VariableKind::Continuous,
                reference_level: 0,
            },
            SchemaEntry {
                name: "x2".into(),
                kind: VariableKind::Binary,
                reference_level: 0,
            },
        ])
        .unwrap();
        Dataset::complete(schema, exposure, outcome, vec![x1, x2]).unwrap()
    }

    #[test]
    fn run_all_ten_produces_ten_distinct_records() {
        let ds = pooled_dataset(400, 3);
        let pool = vec!["x1".to_string(), "x2".to_string()];
        let oracle = vec!["x1".to_string()];
        let ten = run_all_ten(&ds, &oracle, &pool, &EstimatorOptions::default()).unwrap();
        assert_eq!(ten.estimates.len(), 10);
        for (i, expected) in ALL_ESTIMATORS.iter().enumerate() {
            assert_eq!(ten.estimates[i].estimator, *expected);
        }
        assert!(ten.cie.is_some() && ten.pval.is_some());
    }

    #[test]
    fn run_all_ten_degenerate_replicate_is_all_infinite() {
        let base = table_dataset(6, 194, 0, 100);
        let n = base.n();
        let ds = with_continuous(&base, "x1", (0..n).map(|i| (i % 7) as f64 / 7.0).collect());
        let pool = vec!["x1".to_string()];
        let ten = run_all_ten(&ds, &pool, &pool, &EstimatorOptions::default()).unwrap();
        assert_eq!(ten.estimates.len(), 10);
        for e in &ten.estimates {
            assert_eq!(e.log_or, f64::INFINITY);
            assert_eq!(e.separation, Separation::Complete);
        }
        assert!(ten.cie.is_none() && ten.pval.is_none());
    }

    #[test]
    fn oracle_equal_to_pool_collapses_the_arms() {
        let ds = pooled_dataset(500, 9);
        let pool = vec!["x1".to_string(), "x2".to_string()];
        let ten = run_all_ten(&ds, &pool, &pool, &EstimatorOptions::default()).unwrap();
        let get = |id: EstimatorId| {
            ten.estimates
                .iter()
                .find(|e| e.estimator == id)
                .unwrap()
                .clone()
        };
        let ro = get(EstimatorId::RegOracle);
        let ra = get(EstimatorId::RegAll);
        assert_eq!(ro.log_or, ra.log_or);
        assert_eq!(ro.std_err, ra.std_err);
        let io = get(EstimatorId::IpwOracle);
        let ia = get(EstimatorId::IpwAll);
        assert_eq!(io.log_or, ia.log_or);
    }

    #[test]
    fn weight_truncation_clamps_extremes() {
        let ds = pooled_dataset(600, 21);
        let ps = fit_propensity(&ds, &["x1".into(), "x2".into()]).unwrap();
        let plain = ipw_estimate(&ds, &ps, EstimatorId::IpwAll, &EstimatorOptions::default())
            .unwrap();
        let truncated = ipw_estimate(
            &ds,
            &ps,
            EstimatorId::IpwAll,
            &EstimatorOptions {
                weight_truncation: Some(0.05),
                ..EstimatorOptions::default()
            },
        )
        .unwrap();
        let pw = plain.weights.unwrap();
        let tw = truncated.weights.unwrap();
        assert!(tw.max <= pw.max && tw.min >= pw.min);
        assert!(tw.max < pw.max || tw.min > pw.min);
    }
}

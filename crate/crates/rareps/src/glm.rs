//! Maximum-likelihood logistic regression with optional per-observation
//! weights, fitted by iteratively reweighted least squares.
//!
//! Inference helpers (Wald, likelihood ratio, Cox-Snell R²) and separation
//! diagnostics live here too. Rare-events data routinely produce fits whose
//! likelihood converges while one or more coefficients run off to infinity;
//! those fits are kept (callers need the final iterate) and flagged.

use crate::chisq::chi2_sf;
use crate::tabular::{ColumnGroup, DesignMatrix};
use thiserror::Error;

/// Coefficient magnitude treated as numerically infinite: expit(±15) is
/// within 3e-7 of {0, 1}.
pub const SEPARATION_COEF_THRESHOLD: f64 = 15.0;

const MAX_ITERATIONS: usize = 100;
// Tighter than the documented 1e-8 so low-information fits (a handful of
// events) still pin coefficients to ~1e-10, which the IPW closed-form
// equivalence check relies on.
const SCORE_TOL: f64 = 1e-10;
const DEVIANCE_REL_TOL: f64 = 1e-10;
const MAX_STEP_HALVINGS: usize = 10;

#[derive(Debug, Error)]
pub enum GlmError {
    #[error("design and response dimensions disagree")]
    DimensionMismatch,
    #[error("response must contain both classes")]
    SingleClassResponse,
    #[error("weights must be nonnegative and match the response length")]
    BadWeights,
    #[error("information matrix is singular (collinear design)")]
    SingularInformation,
    #[error("covariance block for group `{0}` is singular")]
    SingularBlock(String),
    #[error("models are not nested (negative likelihood-ratio statistic)")]
    NonNested,
    #[error("test requires a converged fit")]
    NotConverged,
}

/// Separation status of a fitted model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Separation {
    None,
    Quasi,
    Complete,
}

impl std::fmt::Display for Separation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Separation::None => write!(f, "none"),
            Separation::Quasi => write!(f, "quasi"),
            Separation::Complete => write!(f, "complete"),
        }
    }
}

/// Chi-squared test outcome.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TestResult {
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
}

/// Result of one logistic fit.
#[derive(Debug, Clone)]
pub struct GlmFit {
    pub coefficients: Vec<f64>,
    pub k: usize,
    /// Inverse of the final weighted information matrix, row-major k x k.
    pub model_covariance: Vec<f64>,
    /// A^-1 B A^-1 with B the outer product of weighted per-observation
    /// scores. Present for weighted fits.
    pub sandwich_covariance: Option<Vec<f64>>,
    pub log_likelihood: f64,
    pub null_log_likelihood: f64,
    pub converged: bool,
    pub separation: Separation,
    pub iterations: usize,
    pub n_used: usize,
    /// |coefficient| snapshots from the last few iterations, oldest first;
    /// used by the divergence check.
    pub(crate) coef_trail: Vec<Vec<f64>>,
}

impl GlmFit {
    pub fn coefficient(&self, j: usize) -> f64 {
        self.coefficients[j]
    }

    pub fn covariance(&self, a: usize, b: usize) -> f64 {
        self.model_covariance[a * self.k + b]
    }

    pub fn std_err(&self, j: usize) -> f64 {
        self.covariance(j, j).sqrt()
    }

    pub fn sandwich_std_err(&self, j: usize) -> Option<f64> {
        self.sandwich_covariance
            .as_ref()
            .map(|v| v[j * self.k + j].sqrt())
    }

    /// Columns whose coefficient exceeds the separation threshold and grew
    /// monotonically across the recorded final iterations.
    pub fn diverging_columns(&self) -> Vec<bool> {
        let mut out = vec![false; self.k];
        for (j, flag) in out.iter_mut().enumerate() {
            if self.coefficients[j].abs() <= SEPARATION_COEF_THRESHOLD {
                continue;
            }
            let monotone = self
                .coef_trail
                .windows(2)
                .all(|w| w[1][j] >= w[0][j] - 1e-9);
            *flag = monotone;
        }
        out
    }
}

#[inline]
pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn bernoulli_ll(y: f64, p: f64) -> f64 {
    // Guard the logs; fitted probabilities can reach 0/1 under separation.
    let p = p.clamp(1e-300, 1.0 - 1e-16);
    y * p.ln() + (1.0 - y) * (1.0 - p).ln()
}

/// Weighted Bernoulli log-likelihood at linear predictor `eta`.
fn log_likelihood(eta: &[f64], response: &[u8], weights: &[f64]) -> f64 {
    eta.iter()
        .zip(response)
        .zip(weights)
        .map(|((&e, &y), &w)| w * bernoulli_ll(y as f64, expit(e)))
        .sum()
}

/// In-place Cholesky factorization of a symmetric k x k matrix (row-major).
/// Returns false when a pivot collapses (singular or indefinite).
fn cholesky(a: &mut [f64], k: usize) -> bool {
    let max_diag = (0..k).map(|i| a[i * k + i].abs()).fold(0.0, f64::max);
    let tol = max_diag * 1e-12 + 1e-300;
    for j in 0..k {
        let mut d = a[j * k + j];
        for l in 0..j {
            d -= a[j * k + l] * a[j * k + l];
        }
        if d <= tol {
            return false;
        }
        let d = d.sqrt();
        a[j * k + j] = d;
        for i in (j + 1)..k {
            let mut s = a[i * k + j];
            for l in 0..j {
                s -= a[i * k + l] * a[j * k + l];
            }
            a[i * k + j] = s / d;
        }
    }
    true
}

/// Solve L L^T x = b given the Cholesky factor in the lower triangle.
fn cholesky_solve(l: &[f64], k: usize, b: &[f64]) -> Vec<f64> {
    let mut x = b.to_vec();
    for i in 0..k {
        let mut s = x[i];
        for j in 0..i {
            s -= l[i * k + j] * x[j];
        }
        x[i] = s / l[i * k + i];
    }
    for i in (0..k).rev() {
        let mut s = x[i];
        for j in (i + 1)..k {
            s -= l[j * k + i] * x[j];
        }
        x[i] = s / l[i * k + i];
    }
    x
}

/// Full inverse from the Cholesky factor.
fn cholesky_inverse(l: &[f64], k: usize) -> Vec<f64> {
    let mut inv = vec![0.0; k * k];
    let mut unit = vec![0.0; k];
    for j in 0..k {
        unit[j] = 1.0;
        let col = cholesky_solve(l, k, &unit);
        unit[j] = 0.0;
        for i in 0..k {
            inv[i * k + j] = col[i];
        }
    }
    // Symmetrize to wash out round-off.
    for i in 0..k {
        for j in (i + 1)..k {
            let m = 0.5 * (inv[i * k + j] + inv[j * k + i]);
            inv[i * k + j] = m;
            inv[j * k + i] = m;
        }
    }
    inv
}

/// Accumulate X^T diag(w) X over the rows, exploiting sparse dummy columns.
fn weighted_information(design: &DesignMatrix, w: &[f64], out: &mut [f64]) {
    let k = design.n_cols();
    out.iter_mut().for_each(|v| *v = 0.0);
    for i in 0..design.n_rows() {
        let wi = w[i];
        if wi == 0.0 {
            continue;
        }
        let row = design.row(i);
        for a in 0..k {
            let xa = row[a];
            if xa == 0.0 {
                continue;
            }
            let waxa = wi * xa;
            let out_row = &mut out[a * k..(a + 1) * k];
            for (b, &xb) in row.iter().enumerate().skip(a) {
                if xb != 0.0 {
                    out_row[b] += waxa * xb;
                }
            }
        }
    }
    // Mirror the upper triangle.
    for a in 0..k {
        for b in (a + 1)..k {
            out[b * k + a] = out[a * k + b];
        }
    }
}

/// Fit a logistic regression of `response` on `design` by IRLS.
///
/// Convergence: max |score| < 1e-8 or relative deviance change < 1e-10.
/// Deviance increases trigger step halving. Hitting the iteration cap leaves
/// `converged = false`; separation diagnostics always run on the final
/// iterate.
pub fn fit_logistic(
    design: &DesignMatrix,
    response: &[u8],
    weights: Option<&[f64]>,
) -> Result<GlmFit, GlmError> {
    let n = design.n_rows();
    let k = design.n_cols();
    if response.len() != n || n == 0 {
        return Err(GlmError::DimensionMismatch);
    }
    let owned_weights;
    let w: &[f64] = match weights {
        Some(v) => {
            if v.len() != n || v.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
                return Err(GlmError::BadWeights);
            }
            v
        }
        None => {
            owned_weights = vec![1.0; n];
            &owned_weights
        }
    };
    let w_total: f64 = w.iter().sum();
    let wy_total: f64 = w.iter().zip(response).map(|(&wi, &y)| wi * y as f64).sum();
    if wy_total <= 0.0 || wy_total >= w_total {
        return Err(GlmError::SingleClassResponse);
    }

    // Start from the weighted response mean on the intercept, zeros elsewhere.
    let mut beta = vec![0.0; k];
    if design.includes_intercept {
        beta[0] = logit((wy_total / w_total).clamp(1e-6, 1.0 - 1e-6));
    }

    let mut eta = design.linear_predictor(&beta);
    let mut ll = log_likelihood(&eta, response, w);
    let mut info = vec![0.0; k * k];
    let mut irls_w = vec![0.0; n];
    let mut score = vec![0.0; k];
    let mut trail: Vec<Vec<f64>> = vec![beta.iter().map(|b| b.abs()).collect()];
    let mut converged = false;
    let mut iterations = 0;
    let mut last_factor: Option<Vec<f64>> = None;

    for iter in 1..=MAX_ITERATIONS {
        iterations = iter;
        // Score and working weights at the current beta.
        score.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..n {
            let p = expit(eta[i]);
            let r = w[i] * (response[i] as f64 - p);
            irls_w[i] = w[i] * p * (1.0 - p);
            let row = design.row(i);
            for (j, &x) in row.iter().enumerate() {
                if x != 0.0 {
                    score[j] += r * x;
                }
            }
        }
        if score.iter().all(|s| s.abs() < SCORE_TOL) {
            converged = true;
            break;
        }

        weighted_information(design, &irls_w, &mut info);
        let mut factor = info.clone();
        if !cholesky(&mut factor, k) {
            if iter == 1 {
                return Err(GlmError::SingularInformation);
            }
            // Degenerated along the way (weights collapsed under divergence):
            // keep the previous iterate and let diagnostics classify it.
            break;
        }
        last_factor = Some(factor.clone());
        let delta = cholesky_solve(&factor, k, &score);

        // Step with halving whenever the likelihood would decrease.
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..=MAX_STEP_HALVINGS {
            let cand: Vec<f64> = beta
                .iter()
                .zip(&delta)
                .map(|(b, d)| b + step * d)
                .collect();
            let cand_eta = design.linear_predictor(&cand);
            let cand_ll = log_likelihood(&cand_eta, response, w);
            if cand_ll >= ll - 1e-12 || step < 1e-3 {
                let rel_change = (cand_ll - ll).abs() / (cand_ll.abs() + 0.1);
                let max_move = delta.iter().fold(0.0f64, |m, d| m.max((step * d).abs()));
                beta = cand;
                eta = cand_eta;
                ll = cand_ll;
                accepted = true;
                trail.push(beta.iter().map(|b| b.abs()).collect());
                if trail.len() > 3 {
                    trail.remove(0);
                }
                // The deviance plateau alone is not enough: a diverging fit
                // also plateaus while its coefficients still move. Require a
                // small Newton step too, which costs one extra iteration.
                if rel_change < DEVIANCE_REL_TOL && max_move < 1e-6 {
                    converged = true;
                }
                break;
            }
            step *= 0.5;
        }
        if !accepted || converged {
            break;
        }
    }

    // Final information matrix and covariance at the accepted iterate.
    for i in 0..n {
        let p = expit(eta[i]);
        irls_w[i] = w[i] * p * (1.0 - p);
    }
    weighted_information(design, &irls_w, &mut info);
    let mut factor = info.clone();
    let model_covariance = if cholesky(&mut factor, k) {
        cholesky_inverse(&factor, k)
    } else if let Some(f) = &last_factor {
        cholesky_inverse(f, k)
    } else {
        return Err(GlmError::SingularInformation);
    };

    // Sandwich covariance for weighted fits, treating weights as fixed.
    let sandwich_covariance = if weights.is_some() {
        let mut meat = vec![0.0; k * k];
        for i in 0..n {
            let p = expit(eta[i]);
            let s = w[i] * (response[i] as f64 - p);
            if s == 0.0 {
                continue;
            }
            let row = design.row(i);
            for a in 0..k {
                let xa = row[a];
                if xa == 0.0 {
                    continue;
                }
                let sa = s * s * xa;
                for (b, &xb) in row.iter().enumerate().skip(a) {
                    meat[a * k + b] += sa * xb;
                }
            }
        }
        for a in 0..k {
            for b in (a + 1)..k {
                meat[b * k + a] = meat[a * k + b];
            }
        }
        Some(sandwich(&model_covariance, &meat, k))
    } else {
        None
    };

    let p_null = wy_total / w_total;
    let null_log_likelihood: f64 = w
        .iter()
        .zip(response)
        .map(|(&wi, &y)| wi * bernoulli_ll(y as f64, p_null))
        .sum();

    let mut fit = GlmFit {
        coefficients: beta,
        k,
        model_covariance,
        sandwich_covariance,
        log_likelihood: ll,
        null_log_likelihood,
        converged,
        separation: Separation::None,
        iterations,
        n_used: n,
        coef_trail: trail,
    };
    fit.separation = detect_separation(design, response, &fit);
    Ok(fit)
}

fn sandwich(bread: &[f64], meat: &[f64], k: usize) -> Vec<f64> {
    let mut tmp = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            let mut s = 0.0;
            for l in 0..k {
                s += bread[i * k + l] * meat[l * k + j];
            }
            tmp[i * k + j] = s;
        }
    }
    let mut out = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            let mut s = 0.0;
            for l in 0..k {
                s += tmp[i * k + l] * bread[l * k + j];
            }
            out[i * k + j] = s;
        }
    }
    out
}

/// Classify the separation status of a fit.
///
/// Complete: an entire column group's coefficients diverged (the fitted
/// comparison itself is infinite), or the fitted predictor strictly separates
/// the classes. Quasi: divergence confined to part of a group, or a zero cell
/// in some binary design column's margin with the response. None otherwise.
pub fn detect_separation(design: &DesignMatrix, response: &[u8], fit: &GlmFit) -> Separation {
    let diverging = fit.diverging_columns();

    if diverging.iter().any(|&d| d) {
        for g in &design.groups {
            if g.name == "(intercept)" {
                continue;
            }
            if g.columns().all(|j| diverging[j]) {
                return Separation::Complete;
            }
        }
        return Separation::Quasi;
    }

    // Strict ordering of the classes by the fitted predictor.
    let eta = design.linear_predictor(&fit.coefficients);
    let mut max0 = f64::NEG_INFINITY;
    let mut min0 = f64::INFINITY;
    let mut max1 = f64::NEG_INFINITY;
    let mut min1 = f64::INFINITY;
    for (&e, &y) in eta.iter().zip(response) {
        if y == 1 {
            min1 = min1.min(e);
            max1 = max1.max(e);
        } else {
            min0 = min0.min(e);
            max0 = max0.max(e);
        }
    }
    if min1 > max0 + 1e-9 || min0 > max1 + 1e-9 {
        return Separation::Complete;
    }

    // Zero cell in any non-constant binary column vs the response.
    for g in &design.groups {
        if g.name == "(intercept)" {
            continue;
        }
        for j in g.columns() {
            let mut cells = [0usize; 4];
            let mut binary = true;
            for i in 0..design.n_rows() {
                let x = design.value(i, j);
                if x != 0.0 && x != 1.0 {
                    binary = false;
                    break;
                }
                cells[(x as usize) * 2 + response[i] as usize] += 1;
            }
            if binary
                && cells.iter().all(|&c| c < design.n_rows()) // non-constant
                && cells[0] + cells[1] > 0
                && cells[2] + cells[3] > 0
                && cells.iter().any(|&c| c == 0)
            {
                return Separation::Quasi;
            }
        }
    }
    Separation::None
}

/// Wald test that all coefficients in `group` are zero.
pub fn wald_test(fit: &GlmFit, group: &ColumnGroup) -> Result<TestResult, GlmError> {
    if !fit.converged {
        return Err(GlmError::NotConverged);
    }
    let idx: Vec<usize> = group.columns().collect();
    let m = idx.len();
    let c: Vec<f64> = idx.iter().map(|&j| fit.coefficients[j]).collect();
    let mut block = vec![0.0; m * m];
    for (a, &ja) in idx.iter().enumerate() {
        for (b, &jb) in idx.iter().enumerate() {
            block[a * m + b] = fit.covariance(ja, jb);
        }
    }
    if !cholesky(&mut block, m) {
        return Err(GlmError::SingularBlock(group.name.clone()));
    }
    let vinv_c = cholesky_solve(&block, m, &c);
    let statistic: f64 = c.iter().zip(&vinv_c).map(|(a, b)| a * b).sum();
    Ok(TestResult {
        statistic,
        df: m,
        p_value: chi2_sf(statistic, m),
    })
}

/// Likelihood-ratio test of a reduced model nested in a full model.
pub fn likelihood_ratio_test(full: &GlmFit, reduced: &GlmFit) -> Result<TestResult, GlmError> {
    if full.k < reduced.k || full.n_used != reduced.n_used {
        return Err(GlmError::NonNested);
    }
    let raw = 2.0 * (full.log_likelihood - reduced.log_likelihood);
    if raw < -1e-8 {
        return Err(GlmError::NonNested);
    }
    let statistic = raw.max(0.0);
    let df = full.k - reduced.k;
    let p_value = if df == 0 { 1.0 } else { chi2_sf(statistic, df) };
    Ok(TestResult {
        statistic,
        df,
        p_value,
    })
}

/// Cox-Snell generalized R²: 1 - exp(2(l0 - l1)/n), clamped to [0, 1).
pub fn cox_snell_r2(fit: &GlmFit) -> f64 {
    let r2 = 1.0
        - (2.0 * (fit.null_log_likelihood - fit.log_likelihood) / fit.n_used as f64).exp();
    r2.clamp(0.0, 1.0 - f64::EPSILON)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tabular::{CovariateSchema, Dataset, SchemaEntry, VariableKind};
    use approx::assert_relative_eq;

    fn intercept_only(n: usize) -> DesignMatrix {
        DesignMatrix::from_raw(vec!["(intercept)".into()], vec![vec![1.0; n]], true)
    }

    /// Intercept + exposure design from 2x2 cell counts
    /// (events_exposed, nonevents_exposed, events_unexposed, nonevents_unexposed).
    fn two_by_two(a: usize, b: usize, c: usize, d: usize) -> (DesignMatrix, Vec<u8>) {
        let n = a + b + c + d;
        let mut exposure = Vec::with_capacity(n);
        let mut response = Vec::with_capacity(n);
        for (count, (x, y)) in [(a, (1.0, 1)), (b, (1.0, 0)), (c, (0.0, 1)), (d, (0.0, 0))] {
            for _ in 0..count {
                exposure.push(x);
                response.push(y);
            }
        }
        let design = DesignMatrix::from_raw(
            vec!["(intercept)".into(), "exposure".into()],
            vec![vec![1.0; n], exposure],
            true,
        );
        (design, response)
    }

    #[test]
    fn intercept_only_closed_form() {
        let design = intercept_only(8);
        let response = vec![1, 1, 0, 0, 0, 0, 0, 0];
        let fit = fit_logistic(&design, &response, None).unwrap();
        assert!(fit.converged);
        assert_relative_eq!(fit.coefficients[0], logit(0.25), epsilon = 1e-6);
        assert_relative_eq!(
            fit.log_likelihood,
            fit.null_log_likelihood,
            epsilon = 1e-10
        );
    }

    #[test]
    fn saturated_two_by_two_matches_closed_form() {
        let (design, response) = two_by_two(30, 289, 5, 139);
        let fit = fit_logistic(&design, &response, None).unwrap();
        assert!(fit.converged);
        assert_eq!(fit.separation, Separation::None);
        let expected_slope = ((30.0 * 139.0) / (289.0 * 5.0) as f64).ln();
        assert_relative_eq!(fit.coefficients[1], expected_slope, epsilon = 1e-6);
        // exp(1.0598067) = 2.8858, the crude odds ratio reported as 2.89.
        assert_relative_eq!(fit.coefficients[1], 1.0598067142, epsilon = 1e-6);
        // Closed-form variance of the log OR: 1/a + 1/b + 1/c + 1/d.
        let expected_var = 1.0 / 30.0 + 1.0 / 289.0 + 1.0 / 5.0 + 1.0 / 139.0;
        assert_relative_eq!(fit.covariance(1, 1), expected_var, epsilon = 1e-6);

        // IRLS fixed point: the score vanishes at the solution, and the
        // intercept score equation forces sum(fitted) = sum(y).
        let eta = design.linear_predictor(&fit.coefficients);
        let fitted_sum: f64 = eta.iter().map(|&e| expit(e)).sum();
        let response_sum: f64 = response.iter().map(|&y| y as f64).sum();
        assert_relative_eq!(fitted_sum, response_sum, epsilon = 1e-6);
    }

    #[test]
    fn constant_weights_rescale_covariance_only() {
        let (design, response) = two_by_two(12, 40, 7, 55);
        let unweighted = fit_logistic(&design, &response, None).unwrap();
        let weights = vec![2.0; response.len()];
        let weighted = fit_logistic(&design, &response, Some(&weights)).unwrap();
        for j in 0..2 {
            assert_relative_eq!(
                weighted.coefficients[j],
                unweighted.coefficients[j],
                epsilon = 1e-8
            );
            assert_relative_eq!(
                weighted.covariance(j, j),
                unweighted.covariance(j, j) / 2.0,
                epsilon = 1e-8
            );
        }
    }

    #[test]
    fn row_permutation_and_column_scaling_invariance() {
        let n = 60;
        let mut x = Vec::with_capacity(n);
        let mut response = Vec::with_capacity(n);
        // Deterministic pseudo-data with both classes.
        for i in 0..n {
            let v = ((i * 37 + 11) % 100) as f64 / 25.0 - 2.0;
            x.push(v);
            response.push(u8::from((i * 53 + 7) % 97 < 40 + (10.0 * v) as usize % 20));
        }
        let design = |xs: Vec<f64>| {
            DesignMatrix::from_raw(
                vec!["(intercept)".into(), "x".into()],
                vec![vec![1.0; n], xs],
                true,
            )
        };
        let base = fit_logistic(&design(x.clone()), &response, None).unwrap();

        // Scale the continuous column by s: its coefficient scales by 1/s.
        let scaled: Vec<f64> = x.iter().map(|v| v * 10.0).collect();
        let fit_scaled = fit_logistic(&design(scaled), &response, None).unwrap();
        assert_relative_eq!(
            fit_scaled.coefficients[1],
            base.coefficients[1] / 10.0,
            epsilon = 1e-6
        );

        // Reverse the rows: coefficients unchanged.
        let rev_x: Vec<f64> = x.iter().rev().copied().collect();
        let rev_y: Vec<u8> = response.iter().rev().copied().collect();
        let fit_rev = fit_logistic(&design(rev_x), &rev_y, None).unwrap();
        for j in 0..2 {
            assert_relative_eq!(fit_rev.coefficients[j], base.coefficients[j], epsilon = 1e-6);
        }
    }

    #[test]
    fn zero_cell_two_by_two_is_complete_separation() {
        let (design, response) = two_by_two(3, 100, 0, 100);
        let fit = fit_logistic(&design, &response, None).unwrap();
        assert_eq!(fit.separation, Separation::Complete);
        assert!(fit.coefficients[1] > SEPARATION_COEF_THRESHOLD);
    }

    #[test]
    fn balanced_two_by_two_is_not_separated() {
        let (design, response) = two_by_two(5, 5, 5, 5);
        let fit = fit_logistic(&design, &response, None).unwrap();
        assert_eq!(fit.separation, Separation::None);
        assert_relative_eq!(fit.coefficients[1], 0.0, epsilon = 1e-8);
    }

    fn categorical_dataset(levels: Vec<f64>, outcome: Vec<u8>) -> Dataset {
        let n = levels.len();
        let schema = CovariateSchema::new(vec![SchemaEntry {
            name: "c".into(),
            kind: VariableKind::Categorical {
                labels: vec!["1".into(), "2".into(), "3".into()],
            },
            reference_level: 0,
        }])
        .unwrap();
        Dataset::complete(schema, vec![0; n], outcome, vec![levels]).unwrap()
    }

    #[test]
    fn empty_dummy_outcome_cell_is_quasi_separation() {
        // Levels 1 and 2 have mixed outcomes; level 3 has no events at all.
        let levels = vec![0., 0., 0., 0., 1., 1., 1., 1., 2., 2., 2., 2.];
        let outcome = vec![1, 1, 0, 0, 1, 0, 1, 0, 0, 0, 0, 0];
        let ds = categorical_dataset(levels, outcome.clone());
        let design = ds.encode(&["c".into()], false).unwrap();
        let fit = fit_logistic(&design, &outcome, None).unwrap();
        assert_eq!(fit.separation, Separation::Quasi);
        // The level-3 dummy ran to -infinity; the rest stayed finite.
        assert!(fit.coefficients[2] < -SEPARATION_COEF_THRESHOLD);
        assert!(fit.coefficients[1].abs() < 2.0);
    }

    #[test]
    fn wald_test_on_the_two_by_two_slope() {
        let (design, response) = two_by_two(30, 289, 5, 139);
        let fit = fit_logistic(&design, &response, None).unwrap();
        let group = design.group("exposure").unwrap();
        let t = wald_test(&fit, group).unwrap();
        // Recomputed from the information matrix: slope^2 / (1/a + 1/b + 1/c + 1/d).
        assert_relative_eq!(t.statistic, 4.6034692640, epsilon = 1e-4);
        assert_eq!(t.df, 1);
        assert_relative_eq!(t.p_value, 0.0319, epsilon = 2e-4);
    }

    #[test]
    fn wald_test_zero_coefficient() {
        let (design, response) = two_by_two(5, 5, 5, 5);
        let fit = fit_logistic(&design, &response, None).unwrap();
        let t = wald_test(&fit, design.group("exposure").unwrap()).unwrap();
        assert!(t.statistic.abs() < 1e-12);
        assert_relative_eq!(t.p_value, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn wald_test_dummy_group_df() {
        let levels = vec![0., 0., 0., 0., 1., 1., 1., 1., 2., 2., 2., 2.];
        let outcome = vec![1, 1, 0, 0, 1, 0, 1, 0, 1, 0, 0, 0];
        let ds = categorical_dataset(levels, outcome.clone());
        let design = ds.encode(&["c".into()], false).unwrap();
        let fit = fit_logistic(&design, &outcome, None).unwrap();
        let t = wald_test(&fit, design.group("c").unwrap()).unwrap();
        assert_eq!(t.df, 2);
    }

    #[test]
    fn lrt_of_identical_models_is_null() {
        let (design, response) = two_by_two(8, 20, 6, 30);
        let fit = fit_logistic(&design, &response, None).unwrap();
        let t = likelihood_ratio_test(&fit, &fit).unwrap();
        assert!(t.statistic.abs() < 1e-12);
        assert_eq!(t.df, 0);
        assert_eq!(t.p_value, 1.0);
    }

    #[test]
    fn lrt_matches_closed_form_binomial_log_likelihoods() {
        let (a, b, c, d): (f64, f64, f64, f64) = (30.0, 289.0, 5.0, 139.0);
        let (design, response) = two_by_two(30, 289, 5, 139);
        let full = fit_logistic(&design, &response, None).unwrap();
        let reduced = fit_logistic(&intercept_only(response.len()), &response, None).unwrap();
        let t = likelihood_ratio_test(&full, &reduced).unwrap();

        // Independent oracle: saturated-by-arm and pooled Bernoulli log-likelihoods.
        let ll_full = a * (a / (a + b)).ln()
            + b * (b / (a + b)).ln()
            + c * (c / (c + d)).ln()
            + d * (d / (c + d)).ln();
        let events = a + c;
        let total = a + b + c + d;
        let ll_null =
            events * (events / total).ln() + (total - events) * (1.0 - events / total).ln();
        assert_relative_eq!(t.statistic, 2.0 * (ll_full - ll_null), epsilon = 1e-6);
        assert_eq!(t.df, 1);
    }

    #[test]
    fn lrt_rejects_reversed_models() {
        let (design, response) = two_by_two(8, 20, 6, 30);
        let full = fit_logistic(&design, &response, None).unwrap();
        let reduced = fit_logistic(&intercept_only(response.len()), &response, None).unwrap();
        assert!(matches!(
            likelihood_ratio_test(&reduced, &full),
            Err(GlmError::NonNested)
        ));
    }

    #[test]
    fn lrt_null_pvalues_are_roughly_uniform() {
        // A pure-noise predictor should produce U(0,1) p-values.
        use rand::RngExt;
        let n = 400;
        let mut below_half = 0usize;
        let mut below_quarter = 0usize;
        let runs = 2000;
        let mut rng = crate::rng::stream(7, crate::rng::StreamDomain::Generic, 0);
        for _ in 0..runs {
            let x: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            let y: Vec<u8> = (0..n).map(|_| u8::from(rng.random::<f64>() < 0.3)).collect();
            let design = DesignMatrix::from_raw(
                vec!["(intercept)".into(), "x".into()],
                vec![vec![1.0; n], x],
                true,
            );
            let full = fit_logistic(&design, &y, None).unwrap();
            let reduced = fit_logistic(&intercept_only(n), &y, None).unwrap();
            let p = likelihood_ratio_test(&full, &reduced).unwrap().p_value;
            if p < 0.5 {
                below_half += 1;
            }
            if p < 0.25 {
                below_quarter += 1;
            }
        }
        let f_half = below_half as f64 / runs as f64;
        let f_quarter = below_quarter as f64 / runs as f64;
        assert!((f_half - 0.5).abs() < 0.04, "P(p < 0.5) = {f_half}");
        assert!((f_quarter - 0.25).abs() < 0.04, "P(p < 0.25) = {f_quarter}");
    }

    #[test]
    fn cox_snell_zero_when_model_adds_nothing() {
        let design = intercept_only(10);
        let response = vec![1, 1, 1, 0, 0, 0, 0, 0, 0, 0];
        let fit = fit_logistic(&design, &response, None).unwrap();
        assert_relative_eq!(cox_snell_r2(&fit), 0.0, epsilon = 1e-10);
    }

    #[test]
    fn cox_snell_direct_formula() {
        let (design, response) = two_by_two(8, 20, 6, 30);
        let mut fit = fit_logistic(&design, &response, None).unwrap();
        fit.n_used = 100;
        fit.null_log_likelihood = fit.log_likelihood - 5.0;
        assert_relative_eq!(cox_snell_r2(&fit), 1.0 - (-0.1f64).exp(), epsilon = 1e-6);
    }

    #[test]
    fn error_paths() {
        let design = intercept_only(4);
        assert!(matches!(
            fit_logistic(&design, &[1, 1, 1, 1], None),
            Err(GlmError::SingleClassResponse)
        ));
        assert!(matches!(
            fit_logistic(&design, &[1, 0, 1, 0], Some(&[1.0, -1.0, 1.0, 1.0])),
            Err(GlmError::BadWeights)
        ));
        // Duplicated column: collinear design.
        let collinear = DesignMatrix::from_raw(
            vec!["(intercept)".into(), "x".into(), "x2".into()],
            vec![
                vec![1.0; 4],
                vec![0.0, 1.0, 0.0, 1.0],
                vec![0.0, 1.0, 0.0, 1.0],
            ],
            true,
        );
        assert!(matches!(
            fit_logistic(&collinear, &[1, 0, 1, 0], None),
            Err(GlmError::SingularInformation)
        ));
    }
}

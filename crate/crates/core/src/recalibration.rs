//! Linear-in-log-odds (LLO) recalibration.
//!
//! The transform maps a probability `p` to `f(p)` with
//!
//! ```text
//! logit f(p) = alpha * logit p + beta
//! ```
//!
//! `alpha` stretches or compresses the log-odds scale and `beta` shifts it.
//! Both are fitted by maximum likelihood on a calibration set of
//! `(probability, outcome)` pairs, which is a one-feature logistic regression
//! on `logit p`. Probabilities are clamped to `[eps, 1 - eps]` before taking
//! log-odds so slider answers of exactly 0 or 1 stay finite.
//!
//! Two levels are supported: per annotator, fitted on that annotator's gold
//! standard trials, and per crowd dataset, fitted on the aggregated labels of
//! the gold-standard items.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregation::{WocDataset, WocVariant};
use crate::corpus::{ItemId, ItemSet};
use crate::judgments::{AnnotatorId, Judgment, JudgmentTable, ResponseMode};
use crate::math::{ln_logistic, logistic, logit};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LloParams {
    pub alpha: f64,
    pub beta: f64,
}

impl LloParams {
    pub const IDENTITY: LloParams = LloParams {
        alpha: 1.0,
        beta: 0.0,
    };

    /// Parameters of the inverse transform (ignoring clamping).
    pub fn inverse(&self) -> LloParams {
        LloParams {
            alpha: 1.0 / self.alpha,
            beta: -self.beta / self.alpha,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClampPolicy {
    pub epsilon: f64,
}

impl Default for ClampPolicy {
    fn default() -> Self {
        ClampPolicy { epsilon: 1e-3 }
    }
}

impl ClampPolicy {
    pub fn validate(&self) -> Result<(), FitError> {
        if self.epsilon > 0.0 && self.epsilon < 0.5 {
            Ok(())
        } else {
            Err(FitError::BadClamp(self.epsilon))
        }
    }

    pub fn apply(&self, p: f64) -> f64 {
        p.clamp(self.epsilon, 1.0 - self.epsilon)
    }

    /// Log-odds of the clamped probability.
    pub fn log_odds(&self, p: f64) -> f64 {
        logit(self.apply(p))
    }
}

/// Apply the LLO transform to one probability.
pub fn llo_transform(p: f64, params: LloParams, clamp: ClampPolicy) -> f64 {
    logistic(params.alpha * clamp.log_odds(p) + params.beta)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CalibrationSource {
    IndividualGs,
    CrowdGs,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSet {
    pub pairs: Vec<(f64, bool)>,
    pub source: CalibrationSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    /// Convergence threshold on the largest log-likelihood partial
    /// derivative, averaged over pairs.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            tol: 1e-8,
            max_iter: 200,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub loglik: f64,
    pub iterations: usize,
    /// The two classes are perfectly separated in log-odds, so the likelihood
    /// has no finite maximiser and the returned slope is a large stand-in.
    pub separated: bool,
    pub converged: bool,
    pub gradient_norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LloFit {
    pub params: LloParams,
    pub diagnostics: FitDiagnostics,
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum FitError {
    #[error("calibration set is empty")]
    Empty,
    #[error("calibration set has only {0} outcomes; no finite maximum exists")]
    SingleClass(&'static str),
    #[error("probability {0} outside [0, 1]")]
    BadProbability(f64),
    #[error("all calibration probabilities are equal; slope is not identifiable")]
    ConstantScores,
    #[error("clamp epsilon {0} must lie in (0, 0.5)")]
    BadClamp(f64),
    #[error("likelihood is maximised at a non-positive slope (last iterate alpha={alpha:.3e}, beta={beta:.4})")]
    NonPositiveSlope { alpha: f64, beta: f64 },
    #[error("no convergence after {iterations} iterations (alpha={}, beta={}, |grad|={gradient_norm:.3e})", last.alpha, last.beta)]
    NotConverged {
        last: LloParams,
        iterations: usize,
        gradient_norm: f64,
    },
}

/// Log-likelihood of outcomes under `logistic(alpha * z + beta)`.
pub fn llo_loglik(z: &[f64], y: &[bool], params: LloParams) -> f64 {
    z.iter()
        .zip(y)
        .map(|(&zi, &yi)| {
            let eta = params.alpha * zi + params.beta;
            if yi {
                ln_logistic(eta)
            } else {
                ln_logistic(-eta)
            }
        })
        .sum()
}

/// Partial derivatives `(d/d alpha, d/d beta)` of [`llo_loglik`].
pub fn llo_gradient(z: &[f64], y: &[bool], params: LloParams) -> [f64; 2] {
    let mut g = [0.0; 2];
    for (&zi, &yi) in z.iter().zip(y) {
        let r = yi as u8 as f64 - logistic(params.alpha * zi + params.beta);
        g[0] += r * zi;
        g[1] += r;
    }
    g
}

/// Hessian of [`llo_loglik`] in `(alpha, beta)`.
fn llo_hessian(z: &[f64], params: LloParams) -> [[f64; 2]; 2] {
    let mut h = [[0.0; 2]; 2];
    for &zi in z {
        let f = logistic(params.alpha * zi + params.beta);
        let w = f * (1.0 - f);
        h[0][0] -= w * zi * zi;
        h[0][1] -= w * zi;
        h[1][1] -= w;
    }
    h[1][0] = h[0][1];
    h
}

/// Slope used in place of infinity for separated calibration sets: the
/// closest point on either side of the boundary gets probability `1 - 1e-6`.
const SEPARATED_LOGIT: f64 = 13.815_510_557_964_274; // ln(1e6)
const MAX_SEPARATED_ALPHA: f64 = 1e6;
/// `ln alpha` below which the slope is treated as collapsing to zero.
const MIN_LN_ALPHA: f64 = -25.0;

/// Fit `alpha` and `beta` by maximum likelihood.
///
/// Optimisation runs over `(ln alpha, beta)` so the slope stays positive:
/// a Newton step when the reparameterised Hessian is negative definite,
/// otherwise a gradient step, each shortened by halving until the likelihood
/// does not decrease. If the slope collapses toward zero the unconstrained
/// optimum has `alpha <= 0` and a [`FitError::NonPositiveSlope`] is returned.
pub fn fit_llo_mle(
    cal: &CalibrationSet,
    clamp: ClampPolicy,
    opts: FitOptions,
) -> Result<LloFit, FitError> {
    clamp.validate()?;
    if cal.pairs.is_empty() {
        return Err(FitError::Empty);
    }
    if let Some(&(p, _)) = cal.pairs.iter().find(|(p, _)| !(0.0..=1.0).contains(p)) {
        return Err(FitError::BadProbability(p));
    }
    let y: Vec<bool> = cal.pairs.iter().map(|&(_, y)| y).collect();
    if y.iter().all(|&v| v) {
        return Err(FitError::SingleClass("positive"));
    }
    if y.iter().all(|&v| !v) {
        return Err(FitError::SingleClass("negative"));
    }
    let z: Vec<f64> = cal.pairs.iter().map(|&(p, _)| clamp.log_odds(p)).collect();
    let z_min = z.iter().copied().fold(f64::INFINITY, f64::min);
    let z_max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if z_min == z_max {
        return Err(FitError::ConstantScores);
    }

    let max_neg = z.iter().zip(&y).filter(|(_, &y)| !y).map(|(&z, _)| z).fold(f64::NEG_INFINITY, f64::max);
    let min_pos = z.iter().zip(&y).filter(|(_, &y)| y).map(|(&z, _)| z).fold(f64::INFINITY, f64::min);
    if max_neg <= min_pos {
        let threshold = 0.5 * (max_neg + min_pos);
        let half_margin = 0.5 * (min_pos - max_neg);
        let alpha = (SEPARATED_LOGIT / half_margin).min(MAX_SEPARATED_ALPHA);
        let params = LloParams {
            alpha,
            beta: -alpha * threshold,
        };
        let g = llo_gradient(&z, &y, params);
        return Ok(LloFit {
            params,
            diagnostics: FitDiagnostics {
                loglik: llo_loglik(&z, &y, params),
                iterations: 0,
                separated: true,
                converged: false,
                gradient_norm: g[0].abs().max(g[1].abs()) / z.len() as f64,
            },
        });
    }

    let mut ln_alpha = 0.0f64;
    let mut beta = 0.0f64;
    let params = |ln_alpha: f64, beta: f64| LloParams {
        alpha: ln_alpha.exp(),
        beta,
    };
    let mut ll = llo_loglik(&z, &y, params(ln_alpha, beta));
    for iteration in 0..=opts.max_iter {
        let current = params(ln_alpha, beta);
        let g = llo_gradient(&z, &y, current);
        let gradient_norm = g[0].abs().max(g[1].abs()) / z.len() as f64;
        if gradient_norm < opts.tol {
            return Ok(LloFit {
                params: current,
                diagnostics: FitDiagnostics {
                    loglik: ll,
                    iterations: iteration,
                    separated: false,
                    converged: true,
                    gradient_norm,
                },
            });
        }
        if iteration == opts.max_iter {
            return Err(FitError::NotConverged {
                last: current,
                iterations: iteration,
                gradient_norm,
            });
        }
        let a = current.alpha;
        // Chain rule into (ln alpha, beta).
        let ga = a * g[0];
        let gb = g[1];
        let h = llo_hessian(&z, current);
        let haa = a * a * h[0][0] + ga;
        let hab = a * h[0][1];
        let hbb = h[1][1];
        let det = haa * hbb - hab * hab;
        let (mut da, mut db) = if haa < 0.0 && det > 0.0 {
            ((hbb * ga - hab * gb) / -det, (haa * gb - hab * ga) / -det)
        } else {
            // Gradient ascent scaled by the curvature along beta.
            let scale = 1.0 / hbb.abs().max(1.0);
            (ga * scale, gb * scale)
        };
        let mut accepted = false;
        // Near the optimum the summed likelihood only moves by rounding noise.
        let slack = 1e-12 * ll.abs().max(1.0);
        for _ in 0..60 {
            let cand_ll = llo_loglik(&z, &y, params(ln_alpha + da, beta + db));
            if cand_ll >= ll - slack {
                ln_alpha += da;
                beta += db;
                ll = cand_ll;
                accepted = true;
                break;
            }
            da *= 0.5;
            db *= 0.5;
        }
        if ln_alpha < MIN_LN_ALPHA {
            return Err(FitError::NonPositiveSlope {
                alpha: ln_alpha.exp(),
                beta,
            });
        }
        if !accepted {
            // Stuck at floating-point resolution short of the tolerance.
            return Err(FitError::NotConverged {
                last: current,
                iterations: iteration + 1,
                gradient_norm,
            });
        }
    }
    unreachable!("loop returns on its final iteration")
}

/// Where a fitted parameter pair came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FitScope {
    Individual,
    Crowd,
}

/// One row of the fitted-parameter CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRecord {
    pub scope: FitScope,
    pub scope_id: String,
    pub alpha: f64,
    pub beta: f64,
    pub loglik: f64,
    pub n_pairs: usize,
    pub converged: bool,
}

impl FitRecord {
    fn new(scope: FitScope, scope_id: String, fit: &LloFit, n_pairs: usize) -> Self {
        FitRecord {
            scope,
            scope_id,
            alpha: fit.params.alpha,
            beta: fit.params.beta,
            loglik: fit.diagnostics.loglik,
            n_pairs,
            converged: fit.diagnostics.converged,
        }
    }
}

pub fn write_fit_csv<W: Write>(writer: W, records: &[FitRecord]) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    for r in records {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PassThrough {
    pub annotator_id: AnnotatorId,
    pub reason: FitError,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndividualRecalibration {
    /// Every judgment, transformed where the annotator's fit succeeded.
    pub table: JudgmentTable,
    pub fits: Vec<FitRecord>,
    /// Annotators left untransformed and why.
    pub passed_through: Vec<PassThrough>,
}

/// Fit one LLO transform per annotator on their gold-standard beliefs and
/// apply it to all of that annotator's judgments.
///
/// Annotators whose fit fails keep their original beliefs and are listed in
/// `passed_through`, so pool sizes for later resampling are unchanged.
/// Binary judgments are never transformed.
pub fn recalibrate_individual(
    table: &JudgmentTable,
    clamp: ClampPolicy,
    opts: FitOptions,
) -> IndividualRecalibration {
    let annotators: Vec<&AnnotatorId> = table.annotator_ids().collect();
    let results: Vec<(Vec<Judgment>, Result<FitRecord, PassThrough>)> = annotators
        .par_iter()
        .map(|&id| {
            let own: Vec<&Judgment> = table.for_annotator(id).collect();
            let beliefs = || own.iter().filter(|j| j.response_mode() == ResponseMode::Belief);
            let cal = CalibrationSet {
                pairs: beliefs()
                    .filter(|j| j.feedback_shown())
                    .map(|j| (j.value, j.true_label))
                    .collect(),
                source: CalibrationSource::IndividualGs,
            };
            match fit_llo_mle(&cal, clamp, opts) {
                Ok(fit) => {
                    let transformed = own
                        .iter()
                        .map(|&j| {
                            let mut j = j.clone();
                            if j.response_mode() == ResponseMode::Belief {
                                j.value = llo_transform(j.value, fit.params, clamp);
                            }
                            j
                        })
                        .collect();
                    let record =
                        FitRecord::new(FitScope::Individual, id.0.clone(), &fit, cal.pairs.len());
                    (transformed, Ok(record))
                }
                Err(reason) => {
                    log::warn!("annotator {id} left untransformed: {reason}");
                    (
                        own.iter().map(|&j| j.clone()).collect(),
                        Err(PassThrough {
                            annotator_id: id.clone(),
                            reason,
                        }),
                    )
                }
            }
        })
        .collect();
    // Restore the input row order.
    let mut by_key: BTreeMap<(AnnotatorId, ItemId, u32), Judgment> = BTreeMap::new();
    let mut fits = Vec::new();
    let mut passed_through = Vec::new();
    for (judgments, outcome) in results {
        for j in judgments {
            by_key.insert((j.annotator_id.clone(), j.item_id.clone(), j.trial_index), j);
        }
        match outcome {
            Ok(r) => fits.push(r),
            Err(p) => passed_through.push(p),
        }
    }
    let ordered: Vec<Judgment> = table
        .judgments()
        .iter()
        .map(|j| {
            by_key
                .remove(&(j.annotator_id.clone(), j.item_id.clone(), j.trial_index))
                .unwrap_or_else(|| j.clone())
        })
        .collect();
    IndividualRecalibration {
        table: JudgmentTable::new(ordered).expect("LLO outputs are probabilities"),
        fits,
        passed_through,
    }
}

/// Fit an LLO transform on one crowd dataset's gold-standard labels and apply
/// it to every label of that dataset.
///
/// `gs_truth` must list the gold-standard items; labels of other items are
/// transformed but not used for fitting. The result is tagged `rEB_CR` and
/// keeps its replicate index.
pub fn recalibrate_crowd(
    dataset: &WocDataset,
    gs_truth: &BTreeMap<ItemId, bool>,
    clamp: ClampPolicy,
    opts: FitOptions,
) -> Result<(WocDataset, FitRecord), FitError> {
    let cal = CalibrationSet {
        pairs: gs_truth
            .iter()
            .filter_map(|(id, &y)| dataset.labels.get(id).map(|&p| (p, y)))
            .collect(),
        source: CalibrationSource::CrowdGs,
    };
    let fit = fit_llo_mle(&cal, clamp, opts)?;
    let labels = dataset
        .labels
        .iter()
        .map(|(id, &p)| (id.clone(), llo_transform(p, fit.params, clamp)))
        .collect();
    let record = FitRecord::new(
        FitScope::Crowd,
        format!("{}#{}", dataset.variant, dataset.replicate_index),
        &fit,
        cal.pairs.len(),
    );
    Ok((
        WocDataset {
            replicate_index: dataset.replicate_index,
            variant: WocVariant::RebCr,
            labels,
            plan: dataset.plan,
            gs_prevalence: dataset.gs_prevalence,
        },
        record,
    ))
}

/// Gold-standard truth of the items in a judgment table.
pub fn gs_truth_from_table(table: &JudgmentTable) -> BTreeMap<ItemId, bool> {
    table
        .judgments()
        .iter()
        .filter(|j| j.set == ItemSet::Gs)
        .map(|j| (j.item_id.clone(), j.true_label))
        .collect()
}

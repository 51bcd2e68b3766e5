//! Error rates, calibration curves, expected calibration error, replicate
//! confidence intervals and the exact majority-vote accuracy of a crowd.
//!
//! # Binning
//!
//! Calibration curves and ECE share one convention: `n` equal-width bins over
//! `[0, 1]`, bin `i` covering `[i/n, (i+1)/n)` except the last, which also
//! includes `1.0`. ECE is computed from a curve's stored fields, so a curve
//! written to CSV and read back reproduces the same ECE bit for bit.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::corpus::ItemId;
use crate::seed::rng_from_seed;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum MetricsError {
    #[error("label and truth keys differ: {0:?}")]
    KeyMismatch(Vec<ItemId>),
    #[error("no items to evaluate")]
    Empty,
    #[error("need at least {needed} values, got {got}")]
    TooFewValues { needed: usize, got: usize },
    #[error("confidence level {0} must lie strictly between 0 and 1")]
    BadLevel(f64),
    #[error("majority accuracy needs an odd crowd size, got {0}")]
    EvenCrowd(usize),
    #[error("probability {0} outside [0, 1]")]
    BadProbability(f64),
    #[error("n_bins must be >= 1")]
    ZeroBins,
}

/// The four cells of a binary confusion matrix.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub hits: usize,
    pub misses: usize,
    pub false_alarms: usize,
    pub correct_rejections: usize,
}

impl Confusion {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (bool, bool)>) -> Self {
        let mut c = Confusion::default();
        for (predicted, truth) in pairs {
            match (predicted, truth) {
                (true, true) => c.hits += 1,
                (false, true) => c.misses += 1,
                (true, false) => c.false_alarms += 1,
                (false, false) => c.correct_rejections += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.hits + self.misses + self.false_alarms + self.correct_rejections
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorRates {
    /// Misses over true positives; absent when there are no positives.
    pub miss_rate: Option<f64>,
    /// False alarms over true negatives; absent when there are no negatives.
    pub false_alarm_rate: Option<f64>,
    pub counts: Confusion,
}

impl From<Confusion> for ErrorRates {
    fn from(counts: Confusion) -> Self {
        let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
        ErrorRates {
            miss_rate: ratio(counts.misses, counts.hits + counts.misses),
            false_alarm_rate: ratio(
                counts.false_alarms,
                counts.false_alarms + counts.correct_rejections,
            ),
            counts,
        }
    }
}

fn check_keys<A, B>(labels: &BTreeMap<ItemId, A>, truth: &BTreeMap<ItemId, B>) -> Result<(), MetricsError> {
    if labels.len() == truth.len() && labels.keys().eq(truth.keys()) {
        return Ok(());
    }
    let a: BTreeSet<&ItemId> = labels.keys().collect();
    let b: BTreeSet<&ItemId> = truth.keys().collect();
    Err(MetricsError::KeyMismatch(
        a.symmetric_difference(&b).map(|id| (*id).clone()).collect(),
    ))
}

/// Miss and false-alarm rates of hard labels against truth.
pub fn error_rates(
    labels: &BTreeMap<ItemId, bool>,
    truth: &BTreeMap<ItemId, bool>,
) -> Result<ErrorRates, MetricsError> {
    check_keys(labels, truth)?;
    Ok(Confusion::from_pairs(labels.iter().map(|(id, &l)| (l, truth[id]))).into())
}

/// Bin of `p` under the lower-inclusive convention with a closed last bin.
pub fn bin_index(p: f64, n_bins: usize) -> usize {
    let n = n_bins as f64;
    let mut i = ((p * n).floor().max(0.0) as usize).min(n_bins - 1);
    // Guard against `p * n` rounding across an edge.
    if i > 0 && p < i as f64 / n {
        i -= 1;
    } else if i + 1 < n_bins && p >= (i + 1) as f64 / n {
        i += 1;
    }
    i
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveBin {
    pub lower: f64,
    pub upper: f64,
    /// Mean label of the items in the bin; absent for an empty bin.
    pub mean_label: Option<f64>,
    /// Fraction of the bin's items that are truly positive.
    pub positive_fraction: Option<f64>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationCurve {
    pub bins: Vec<CurveBin>,
}

impl CalibrationCurve {
    pub fn n_bins(&self) -> usize {
        self.bins.len()
    }

    pub fn total(&self) -> usize {
        self.bins.iter().map(|b| b.count).sum()
    }

    /// Count-weighted mean absolute gap between mean label and positive
    /// fraction over occupied bins.
    pub fn expected_calibration_error(&self) -> f64 {
        let total = self.total() as f64;
        self.bins
            .iter()
            .filter_map(|b| match (b.mean_label, b.positive_fraction) {
                (Some(m), Some(f)) => Some(b.count as f64 / total * (m - f).abs()),
                _ => None,
            })
            .sum()
    }
}

/// Calibration curve of probabilistic labels against binary truth.
pub fn calibration_curve_pairs(
    pairs: &[(f64, bool)],
    n_bins: usize,
) -> Result<CalibrationCurve, MetricsError> {
    if n_bins == 0 {
        return Err(MetricsError::ZeroBins);
    }
    if pairs.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut members: Vec<Vec<(f64, bool)>> = vec![Vec::new(); n_bins];
    for &(p, y) in pairs {
        if !(0.0..=1.0).contains(&p) {
            return Err(MetricsError::BadProbability(p));
        }
        members[bin_index(p, n_bins)].push((p, y));
    }
    let n = n_bins as f64;
    let bins = members
        .into_iter()
        .enumerate()
        .map(|(i, mut m)| {
            // Sum in sorted order so the result does not depend on input order.
            m.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));
            let count = m.len();
            let occupied = count > 0;
            let sum: f64 = m.iter().map(|&(p, _)| p).sum();
            let positives = m.iter().filter(|&&(_, y)| y).count();
            let (lo, hi) = (m.first().map_or(0.0, |x| x.0), m.last().map_or(0.0, |x| x.0));
            CurveBin {
                lower: i as f64 / n,
                upper: (i + 1) as f64 / n,
                // Clamped so rounding in the sum cannot leave the bin.
                mean_label: occupied.then(|| (sum / count as f64).clamp(lo, hi)),
                positive_fraction: occupied.then(|| positives as f64 / count as f64),
                count,
            }
        })
        .collect();
    Ok(CalibrationCurve { bins })
}

pub fn calibration_curve(
    labels: &BTreeMap<ItemId, f64>,
    truth: &BTreeMap<ItemId, bool>,
    n_bins: usize,
) -> Result<CalibrationCurve, MetricsError> {
    check_keys(labels, truth)?;
    let pairs: Vec<(f64, bool)> = labels.iter().map(|(id, &p)| (p, truth[id])).collect();
    calibration_curve_pairs(&pairs, n_bins)
}

#[derive(Serialize, Deserialize)]
struct CurveRow {
    variant: String,
    bin: usize,
    mean_label: Option<f64>,
    positive_fraction: Option<f64>,
    count: usize,
}

/// Write curves as `variant,bin,mean_label,positive_fraction,count` rows;
/// empty bins leave both coordinates blank.
pub fn write_curve_csv<W: Write>(writer: W, curves: &[(&str, &CalibrationCurve)]) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    for (name, curve) in curves {
        for (bin, b) in curve.bins.iter().enumerate() {
            out.serialize(CurveRow {
                variant: name.to_string(),
                bin,
                mean_label: b.mean_label,
                positive_fraction: b.positive_fraction,
                count: b.count,
            })?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Read curves written by [`write_curve_csv`]. Bin edges are rebuilt from
/// the number of bins per curve.
pub fn read_curve_csv<R: Read>(reader: R) -> Result<BTreeMap<String, CalibrationCurve>, String> {
    let mut rows: BTreeMap<String, BTreeMap<usize, CurveRow>> = BTreeMap::new();
    for (i, row) in csv::Reader::from_reader(reader).deserialize::<CurveRow>().enumerate() {
        let row = row.map_err(|e| format!("line {}: {e}", i + 2))?;
        let bins = rows.entry(row.variant.clone()).or_default();
        let bin = row.bin;
        if bins.insert(bin, row).is_some() {
            return Err(format!("line {}: duplicate bin {bin}", i + 2));
        }
    }
    rows.into_iter()
        .map(|(name, bins)| {
            let n = bins.len();
            if bins.keys().copied().ne(0..n) {
                return Err(format!("curve {name}: bins are not 0..{n}"));
            }
            let bins = bins
                .into_values()
                .enumerate()
                .map(|(i, r)| CurveBin {
                    lower: i as f64 / n as f64,
                    upper: (i + 1) as f64 / n as f64,
                    mean_label: r.mean_label,
                    positive_fraction: r.positive_fraction,
                    count: r.count,
                })
                .collect();
            Ok((name, CalibrationCurve { bins }))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EceConfig {
    pub n_bins: usize,
}

impl Default for EceConfig {
    fn default() -> Self {
        EceConfig { n_bins: 10 }
    }
}

pub fn ece_pairs(pairs: &[(f64, bool)], cfg: EceConfig) -> Result<f64, MetricsError> {
    Ok(calibration_curve_pairs(pairs, cfg.n_bins)?.expected_calibration_error())
}

/// Expected calibration error of probabilistic labels.
pub fn ece(
    labels: &BTreeMap<ItemId, f64>,
    truth: &BTreeMap<ItemId, bool>,
    cfg: EceConfig,
) -> Result<f64, MetricsError> {
    Ok(calibration_curve(labels, truth, cfg.n_bins)?.expected_calibration_error())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
}

impl ConfidenceInterval {
    pub fn overlaps(&self, other: &ConfidenceInterval) -> bool {
        self.lower <= other.upper && other.lower <= self.upper
    }

    /// True when this interval lies entirely below `other`.
    pub fn below(&self, other: &ConfidenceInterval) -> bool {
        self.upper < other.lower
    }
}

fn check_level(level: f64) -> Result<(), MetricsError> {
    if level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        Err(MetricsError::BadLevel(level))
    }
}

/// Normal-theory t interval for the mean of replicate values.
pub fn replicate_ci(values: &[f64], level: f64) -> Result<ConfidenceInterval, MetricsError> {
    check_level(level)?;
    let n = values.len();
    if n < 2 {
        return Err(MetricsError::TooFewValues { needed: 2, got: n });
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .expect("degrees of freedom are positive")
        .inverse_cdf(0.5 + level / 2.0);
    let half = t * (var / n as f64).sqrt();
    Ok(ConfidenceInterval {
        mean,
        lower: mean - half,
        upper: mean + half,
    })
}

/// Percentile bootstrap interval for the mean.
pub fn bootstrap_ci(
    values: &[f64],
    level: f64,
    resamples: usize,
    seed: u64,
) -> Result<ConfidenceInterval, MetricsError> {
    check_level(level)?;
    let n = values.len();
    if n < 2 {
        return Err(MetricsError::TooFewValues { needed: 2, got: n });
    }
    if resamples == 0 {
        return Err(MetricsError::TooFewValues { needed: 1, got: 0 });
    }
    let mut rng = rng_from_seed(seed);
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| values[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_unstable_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    let pick = |q: f64| means[((q * resamples as f64).floor() as usize).min(resamples - 1)];
    Ok(ConfidenceInterval {
        mean: values.iter().sum::<f64>() / n as f64,
        lower: pick(tail),
        upper: pick(1.0 - tail),
    })
}

/// Probability that a strict majority of `n` independent voters, each right
/// with probability `p`, is right.
///
/// Terms are summed in log space, so large crowds neither overflow the
/// binomial coefficients nor underflow the individual probabilities.
pub fn majority_accuracy_exact(p: f64, n: usize) -> Result<f64, MetricsError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(MetricsError::BadProbability(p));
    }
    if n % 2 == 0 {
        return Err(MetricsError::EvenCrowd(n));
    }
    if p == 0.0 || p == 1.0 {
        return Ok(p);
    }
    let (ln_p, ln_q) = (p.ln(), (-p).ln_1p());
    let ln_n_fact = ln_gamma(n as f64 + 1.0);
    let terms: Vec<f64> = ((n + 1) / 2..=n)
        .map(|j| {
            let ln_choose =
                ln_n_fact - ln_gamma(j as f64 + 1.0) - ln_gamma((n - j) as f64 + 1.0);
            ln_choose + j as f64 * ln_p + (n - j) as f64 * ln_q
        })
        .collect();
    let top = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = terms.iter().map(|t| (t - top).exp()).sum();
    Ok((top + sum.ln()).exp().min(1.0))
}

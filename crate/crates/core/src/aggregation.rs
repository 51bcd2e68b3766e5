//! Wisdom-of-crowds labels by repeated resampling of individual judgments.
//!
//! For every item, `k` judgments are drawn from the item's pool and reduced to
//! one crowd label: the share of positive votes for binary judgments, the
//! mean for beliefs. Repeating the draw with independent seeds yields a set of
//! replicate datasets whose spread shows how much a label depends on which
//! annotators happened to be sampled.
//!
//! Pools are sorted before sampling, so a label depends only on the multiset
//! of judgments and the seed, never on the order rows were stored in.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::seq::index;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, ItemId, ItemSet};
use crate::judgments::JudgmentTable;
use crate::metrics::{replicate_ci, ConfidenceInterval};
use crate::seed::{derived_rng, Rng};

/// The label variants compared throughout the study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum WocVariant {
    /// Proportion of positive binary choices.
    #[serde(rename = "BC")]
    Bc,
    /// Mean of raw elicited beliefs.
    #[serde(rename = "EB")]
    Eb,
    /// Mean of individually recalibrated beliefs.
    #[serde(rename = "rEB_noCR")]
    RebNoCr,
    /// As `RebNoCr`, then recalibrated again at the crowd level.
    #[serde(rename = "rEB_CR")]
    RebCr,
}

impl WocVariant {
    pub const ALL: [WocVariant; 4] = [
        WocVariant::Bc,
        WocVariant::Eb,
        WocVariant::RebNoCr,
        WocVariant::RebCr,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            WocVariant::Bc => "BC",
            WocVariant::Eb => "EB",
            WocVariant::RebNoCr => "rEB_noCR",
            WocVariant::RebCr => "rEB_CR",
        }
    }
}

impl fmt::Display for WocVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for WocVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        WocVariant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| format!("unknown variant {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    #[default]
    WithoutReplacement,
    WithReplacement,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResamplingPlan {
    /// Judgments drawn per item (the crowd size).
    pub k: usize,
    pub n_replicates: usize,
    #[serde(default)]
    pub sampling: Sampling,
    pub seed: u64,
}

impl ResamplingPlan {
    pub fn with_k(self, k: usize) -> Self {
        ResamplingPlan { k, ..self }
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum AggregationError {
    #[error("crowd size k must be >= 1")]
    ZeroK,
    #[error("n_replicates must be >= 1")]
    ZeroReplicates,
    #[error("pool of {available} judgments cannot supply {k} draws without replacement")]
    Insufficient { available: usize, k: usize },
    #[error("items with too few judgments for k = {k}: {items:?}")]
    DeficientItems { k: usize, items: Vec<(ItemId, usize)> },
    #[error("variant {0} is not produced by resampling")]
    NotResampled(WocVariant),
}

/// One replicate of crowd labels over every item of a corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WocDataset {
    pub replicate_index: usize,
    pub variant: WocVariant,
    pub labels: BTreeMap<ItemId, f64>,
    pub plan: ResamplingPlan,
    pub gs_prevalence: f64,
}

impl WocDataset {
    /// Labels restricted to the items of one set.
    pub fn labels_in(&self, corpus: &Corpus, set: ItemSet) -> BTreeMap<ItemId, f64> {
        self.labels
            .iter()
            .filter(|(id, _)| corpus.get(id).is_some_and(|it| it.set == set))
            .map(|(id, &v)| (id.clone(), v))
            .collect()
    }
}

fn draw_indices(
    n: usize,
    k: usize,
    sampling: Sampling,
    rng: &mut Rng,
) -> Result<Vec<usize>, AggregationError> {
    if k == 0 {
        return Err(AggregationError::ZeroK);
    }
    match sampling {
        Sampling::WithoutReplacement => {
            if n < k {
                return Err(AggregationError::Insufficient { available: n, k });
            }
            Ok(index::sample(rng, n, k).into_vec())
        }
        Sampling::WithReplacement => {
            if n == 0 {
                return Err(AggregationError::Insufficient { available: 0, k });
            }
            Ok((0..k).map(|_| rng.random_range(0..n)).collect())
        }
    }
}

/// Draw `k` votes and return the share that are positive.
pub fn woc_proportion(
    votes: &[bool],
    k: usize,
    sampling: Sampling,
    rng: &mut Rng,
) -> Result<f64, AggregationError> {
    let mut pool = votes.to_vec();
    pool.sort_unstable();
    let picked = draw_indices(pool.len(), k, sampling, rng)?;
    let positives = picked.iter().filter(|&&i| pool[i]).count();
    Ok(positives as f64 / k as f64)
}

/// Majority class of `k` sampled votes; an even split counts as positive.
pub fn woc_majority(
    votes: &[bool],
    k: usize,
    sampling: Sampling,
    rng: &mut Rng,
) -> Result<bool, AggregationError> {
    Ok(classify(woc_proportion(votes, k, sampling, rng)?, 0.5))
}

/// Mean of `k` sampled beliefs.
pub fn woc_mean_belief(
    beliefs: &[f64],
    k: usize,
    sampling: Sampling,
    rng: &mut Rng,
) -> Result<f64, AggregationError> {
    let mut pool = beliefs.to_vec();
    pool.sort_unstable_by(f64::total_cmp);
    let mut picked = draw_indices(pool.len(), k, sampling, rng)?;
    // Summing in pool order makes the result independent of draw order.
    picked.sort_unstable();
    Ok(picked.iter().map(|&i| pool[i]).sum::<f64>() / k as f64)
}

/// Positive iff `label >= threshold`; a label exactly at the threshold is
/// called positive because a miss is the costlier error.
pub fn classify(label: f64, threshold: f64) -> bool {
    label >= threshold
}

/// Build `plan.n_replicates` crowd datasets covering every GS and QA item.
///
/// `BC` takes the positive share of binary judgments; `EB` and `rEB_noCR`
/// average belief values. Replicate `r` and item `i` draw from a generator
/// seeded by `(plan.seed, r, i)`.
pub fn generate_replicates(
    table: &JudgmentTable,
    corpus: &Corpus,
    plan: &ResamplingPlan,
    variant: WocVariant,
) -> Result<Vec<WocDataset>, AggregationError> {
    if plan.k == 0 {
        return Err(AggregationError::ZeroK);
    }
    if plan.n_replicates == 0 {
        return Err(AggregationError::ZeroReplicates);
    }
    if variant == WocVariant::RebCr {
        return Err(AggregationError::NotResampled(variant));
    }
    let pools: Vec<(&ItemId, Vec<f64>)> = corpus
        .items()
        .iter()
        .map(|it| {
            let values = table.for_item(&it.item_id).map(|j| j.value).collect();
            (&it.item_id, values)
        })
        .collect();
    if plan.sampling == Sampling::WithoutReplacement || pools.iter().any(|(_, p)| p.is_empty()) {
        let min_needed = match plan.sampling {
            Sampling::WithoutReplacement => plan.k,
            Sampling::WithReplacement => 1,
        };
        let deficient: Vec<(ItemId, usize)> = pools
            .iter()
            .filter(|(_, p)| p.len() < min_needed)
            .map(|(id, p)| ((*id).clone(), p.len()))
            .collect();
        if !deficient.is_empty() {
            return Err(AggregationError::DeficientItems {
                k: plan.k,
                items: deficient,
            });
        }
    }
    let votes: Vec<Vec<bool>> = pools
        .iter()
        .map(|(_, p)| p.iter().map(|&v| v == 1.0).collect())
        .collect();
    (0..plan.n_replicates)
        .into_par_iter()
        .map(|r| {
            let mut labels = BTreeMap::new();
            for (i, (id, pool)) in pools.iter().enumerate() {
                let mut rng = derived_rng(plan.seed, &[r.into(), id.0.as_str().into()]);
                let label = match variant {
                    WocVariant::Bc => woc_proportion(&votes[i], plan.k, plan.sampling, &mut rng)?,
                    _ => woc_mean_belief(pool, plan.k, plan.sampling, &mut rng)?,
                };
                labels.insert((*id).clone(), label);
            }
            Ok(WocDataset {
                replicate_index: r,
                variant,
                labels,
                plan: *plan,
                gs_prevalence: corpus.gs_prevalence(),
            })
        })
        .collect()
}

/// Replicate-level summary of one metric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    /// Absent when fewer than two replicates produced a value.
    pub ci: Option<ConfidenceInterval>,
    pub n: usize,
}

impl MetricSummary {
    pub fn from_values(values: &[f64], level: f64) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let ci = replicate_ci(values, level).ok();
        Some(MetricSummary {
            mean: ci.map_or_else(|| values.iter().sum::<f64>() / values.len() as f64, |c| c.mean),
            ci,
            n: values.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub size: usize,
    pub metrics: BTreeMap<String, MetricSummary>,
    /// Replicates the callback declined to score.
    pub excluded_replicates: Vec<usize>,
}

/// Regenerate replicates at each crowd size and summarise `metrics` over them.
///
/// The callback returns `None` to drop a replicate (e.g. a failed crowd fit),
/// and may omit metrics that are undefined for a replicate.
pub fn crowd_size_sweep<F>(
    table: &JudgmentTable,
    corpus: &Corpus,
    sizes: &[usize],
    plan: &ResamplingPlan,
    variant: WocVariant,
    metrics: F,
) -> Result<Vec<SweepPoint>, AggregationError>
where
    F: Fn(&WocDataset) -> Option<BTreeMap<String, f64>> + Sync,
{
    sizes
        .iter()
        .map(|&size| {
            let datasets = generate_replicates(table, corpus, &plan.with_k(size), variant)?;
            let scored: Vec<Option<BTreeMap<String, f64>>> =
                datasets.par_iter().map(&metrics).collect();
            let mut columns: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            let mut excluded = Vec::new();
            for (r, row) in scored.into_iter().enumerate() {
                match row {
                    Some(row) => {
                        for (name, v) in row {
                            columns.entry(name).or_default().push(v);
                        }
                    }
                    None => excluded.push(r),
                }
            }
            Ok(SweepPoint {
                size,
                metrics: columns
                    .into_iter()
                    .filter_map(|(name, vals)| {
                        MetricSummary::from_values(&vals, 0.95).map(|s| (name, s))
                    })
                    .collect(),
                excluded_replicates: excluded,
            })
        })
        .collect()
}

/// Write datasets as `replicate,variant,item_id,label` rows.
pub fn write_woc_csv<'a, W: Write>(
    writer: W,
    datasets: impl IntoIterator<Item = &'a WocDataset>,
) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    out.write_record(["replicate", "variant", "item_id", "label"])?;
    for ds in datasets {
        for (id, label) in &ds.labels {
            out.write_record([
                ds.replicate_index.to_string(),
                ds.variant.to_string(),
                id.0.clone(),
                label.to_string(),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}

/// A WoC CSV read back: labels grouped by `(variant, replicate)`.
pub type WocTable = BTreeMap<(WocVariant, usize), BTreeMap<ItemId, f64>>;

pub fn read_woc_csv<R: Read>(reader: R) -> Result<WocTable, String> {
    #[derive(Deserialize)]
    struct Row {
        replicate: usize,
        variant: String,
        item_id: String,
        label: f64,
    }
    let mut table = WocTable::new();
    let mut rdr = csv::Reader::from_reader(reader);
    for (i, row) in rdr.deserialize::<Row>().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| format!("line {line}: {e}"))?;
        if !(0.0..=1.0).contains(&row.label) {
            return Err(format!("line {line}: label {} outside [0, 1]", row.label));
        }
        let variant = row.variant.parse().map_err(|e| format!("line {line}: {e}"))?;
        let slot = table.entry((variant, row.replicate)).or_default();
        if slot.insert(ItemId(row.item_id.clone()), row.label).is_some() {
            return Err(format!("line {line}: duplicate label for {}", row.item_id));
        }
    }
    Ok(table)
}

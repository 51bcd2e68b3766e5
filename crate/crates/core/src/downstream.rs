//! A small stand-in for training a model on crowd labels.
//!
//! Items get synthetic feature vectors drawn from class-conditional Gaussians
//! (augmented copies share their source's vector up to a small jitter). A
//! linear-logistic model is trained on soft crowd labels with the
//! cross-entropy loss, tuned by grid search against held-out crowd labels,
//! and finally scored against ground truth on grouped, stratified
//! cross-validation splits. The point is not the model but the path: label
//! bias flows through the loss into the predicted probabilities.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregation::{classify, MetricSummary, WocDataset, WocVariant};
use crate::corpus::{Corpus, ItemId, ItemSet, SourceId};
use crate::math::{logistic, softplus};
use crate::metrics::{ece_pairs, Confusion, EceConfig, ErrorRates, MetricsError};
use crate::seed::{derive_seed, derived_rng, rng_from_seed};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub dim: usize,
    /// Class means sit at `+mu` and `-mu` in every coordinate.
    pub mu: f64,
    /// Largest distance between an augmented copy and its source's vector.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        FeatureSpec {
            dim: 2,
            mu: 0.8,
            jitter: 0.05,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticFeatures {
    pub dim: usize,
    pub vectors: BTreeMap<ItemId, Vec<f64>>,
}

impl SyntheticFeatures {
    /// Draw one vector per source of `set`, then jitter it for each copy.
    pub fn generate(corpus: &Corpus, set: ItemSet, spec: &FeatureSpec) -> Self {
        let mut centers: BTreeMap<&SourceId, Vec<f64>> = BTreeMap::new();
        let mut vectors = BTreeMap::new();
        for item in corpus.iter_set(set) {
            let center = centers.entry(&item.source_id).or_insert_with(|| {
                let mut rng = derived_rng(spec.seed, &["source".into(), item.source_id.0.as_str().into()]);
                let mean = if item.true_label { spec.mu } else { -spec.mu };
                (0..spec.dim)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        mean + z
                    })
                    .collect()
            });
            let mut rng = derived_rng(spec.seed, &["copy".into(), item.item_id.0.as_str().into()]);
            // Uniform point in the ball of radius `jitter`.
            let dir: Vec<f64> = (0..spec.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            let u: f64 = rng.random();
            let radius = spec.jitter * u.powf(1.0 / spec.dim as f64);
            let v = center
                .iter()
                .zip(&dir)
                .map(|(c, d)| c + radius * d / norm)
                .collect();
            vectors.insert(item.item_id.clone(), v);
        }
        SyntheticFeatures {
            dim: spec.dim,
            vectors,
        }
    }

    pub fn get(&self, id: &ItemId) -> Option<&[f64]> {
        self.vectors.get(id).map(Vec::as_slice)
    }
}

/// One train/test partition of the items.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub repeat: usize,
    pub fold: usize,
    pub train: Vec<ItemId>,
    pub test: Vec<ItemId>,
    pub train_sources: BTreeSet<SourceId>,
    pub test_sources: BTreeSet<SourceId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldPlan {
    pub k_folds: usize,
    pub n_repeats: usize,
    pub seed: u64,
    /// Ordered by repeat, then fold.
    pub splits: Vec<Split>,
}

impl FoldPlan {
    pub fn assignments(&self) -> BTreeMap<(usize, usize), &BTreeSet<SourceId>> {
        self.splits
            .iter()
            .map(|s| ((s.repeat, s.fold), &s.test_sources))
            .collect()
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum FoldError {
    #[error("k_folds must be >= 2 and n_repeats >= 1")]
    BadShape,
    #[error("only {available} {class} sources for {k} folds")]
    TooFewSources {
        class: &'static str,
        available: usize,
        k: usize,
    },
    #[error("split prevalence deviates by {achieved:.4} from the corpus; tolerance is {tolerance}")]
    Stratification { achieved: f64, tolerance: f64 },
}

/// Largest allowed gap between a split's positive fraction and the corpus's.
pub const STRATIFICATION_TOLERANCE: f64 = 0.02;

/// Grouped, stratified k-fold splits of one corpus set, repeated with fresh
/// shuffles. Sources are kept whole, each class is spread evenly over the
/// folds, and every source is tested exactly once per repeat.
pub fn make_folds(
    corpus: &Corpus,
    set: ItemSet,
    k_folds: usize,
    n_repeats: usize,
    seed: u64,
) -> Result<FoldPlan, FoldError> {
    if k_folds < 2 || n_repeats == 0 {
        return Err(FoldError::BadShape);
    }
    let mut groups: BTreeMap<&SourceId, (bool, Vec<ItemId>)> = BTreeMap::new();
    for item in corpus.iter_set(set) {
        groups
            .entry(&item.source_id)
            .or_insert_with(|| (item.true_label, Vec::new()))
            .1
            .push(item.item_id.clone());
    }
    let by_class = |label: bool| -> Vec<&SourceId> {
        groups
            .iter()
            .filter(|(_, (l, _))| *l == label)
            .map(|(s, _)| *s)
            .collect()
    };
    let (pos, neg) = (by_class(true), by_class(false));
    for (class, list) in [("positive", &pos), ("negative", &neg)] {
        if list.len() < k_folds {
            return Err(FoldError::TooFewSources {
                class,
                available: list.len(),
                k: k_folds,
            });
        }
    }
    let total_items: usize = groups.values().map(|(_, v)| v.len()).sum();
    let total_pos: usize = pos.iter().map(|s| groups[s].1.len()).sum();
    let prevalence = total_pos as f64 / total_items as f64;

    let mut splits = Vec::with_capacity(k_folds * n_repeats);
    let mut worst = 0.0f64;
    for repeat in 0..n_repeats {
        let mut rng = derived_rng(seed, &["folds".into(), repeat.into()]);
        let mut fold_of: BTreeMap<&SourceId, usize> = BTreeMap::new();
        for class in [&pos, &neg] {
            let mut order = class.clone();
            order.shuffle(&mut rng);
            // Largest groups first, then least-loaded fold, keeps item counts even.
            order.sort_by_key(|s| std::cmp::Reverse(groups[s].1.len()));
            let mut load = vec![0usize; k_folds];
            for s in order {
                let fold = (0..k_folds).min_by_key(|&f| (load[f], f)).expect("k_folds >= 2");
                load[fold] += groups[s].1.len();
                fold_of.insert(s, fold);
            }
        }
        for fold in 0..k_folds {
            let mut split = Split {
                repeat,
                fold,
                train: Vec::new(),
                test: Vec::new(),
                train_sources: BTreeSet::new(),
                test_sources: BTreeSet::new(),
            };
            let (mut train_pos, mut test_pos) = (0usize, 0usize);
            for (s, (label, items)) in &groups {
                let in_test = fold_of[s] == fold;
                let (ids, sources, positives) = if in_test {
                    (&mut split.test, &mut split.test_sources, &mut test_pos)
                } else {
                    (&mut split.train, &mut split.train_sources, &mut train_pos)
                };
                ids.extend(items.iter().cloned());
                sources.insert((*s).clone());
                if *label {
                    *positives += items.len();
                }
            }
            for (positives, n) in [(train_pos, split.train.len()), (test_pos, split.test.len())] {
                worst = worst.max((positives as f64 / n as f64 - prevalence).abs());
            }
            splits.push(split);
        }
    }
    if worst > STRATIFICATION_TOLERANCE {
        return Err(FoldError::Stratification {
            achieved: worst,
            tolerance: STRATIFICATION_TOLERANCE,
        });
    }
    Ok(FoldPlan {
        k_folds,
        n_repeats,
        seed,
        splits,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearnerConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2_strength: f64,
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
}

impl LearnerConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0
            || self.batch_size == 0
            || !(self.learning_rate > 0.0)
            || !(self.l2_strength >= 0.0)
        {
            return Err(TrainError::BadConfig(*self));
        }
        Ok(())
    }
}

/// Cartesian product of hyperparameter values.
pub fn config_grid(
    epochs: &[usize],
    learning_rates: &[f64],
    l2_strengths: &[f64],
    batch_sizes: &[usize],
) -> Vec<LearnerConfig> {
    let mut grid = Vec::new();
    for &e in epochs {
        for &lr in learning_rates {
            for &l2 in l2_strengths {
                for &b in batch_sizes {
                    grid.push(LearnerConfig {
                        epochs: e,
                        learning_rate: lr,
                        l2_strength: l2,
                        batch_size: b,
                        seed: 0,
                    });
                }
            }
        }
    }
    grid
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LinearModel {
    pub fn zeros(dim: usize) -> Self {
        LinearModel {
            weights: vec![0.0; dim],
            bias: 0.0,
        }
    }

    pub fn score(&self, x: &[f64]) -> f64 {
        self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        logistic(self.score(x))
    }
}

/// Cross-entropy of a soft target `q` against the logit `eta`.
pub fn soft_cross_entropy(eta: f64, q: f64) -> f64 {
    q * softplus(-eta) + (1.0 - q) * softplus(eta)
}

/// Mean soft-label cross-entropy plus `l2 / 2 * |w|^2`.
pub fn soft_label_objective(model: &LinearModel, xs: &[&[f64]], qs: &[f64], l2: f64) -> f64 {
    let data: f64 = xs
        .iter()
        .zip(qs)
        .map(|(x, &q)| soft_cross_entropy(model.score(x), q))
        .sum::<f64>()
        / xs.len() as f64;
    data + 0.5 * l2 * model.weights.iter().map(|w| w * w).sum::<f64>()
}

/// Gradient of [`soft_label_objective`] as `(d/dw, d/db)`.
pub fn soft_label_gradient(
    model: &LinearModel,
    xs: &[&[f64]],
    qs: &[f64],
    l2: f64,
) -> (Vec<f64>, f64) {
    let n = xs.len() as f64;
    let mut gw: Vec<f64> = model.weights.iter().map(|w| l2 * w).collect();
    let mut gb = 0.0;
    for (x, &q) in xs.iter().zip(qs) {
        let r = (model.predict(x) - q) / n;
        for (g, v) in gw.iter_mut().zip(x.iter()) {
            *g += r * v;
        }
        gb += r;
    }
    (gw, gb)
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum TrainError {
    #[error("invalid learner config {0:?}")]
    BadConfig(LearnerConfig),
    #[error("no crowd label for training item {0}")]
    MissingLabel(ItemId),
    #[error("no features for item {0}")]
    MissingFeatures(ItemId),
    #[error("empty training split")]
    EmptySplit,
    #[error("loss became non-finite in epoch {epoch}")]
    Diverged { epoch: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub model: LinearModel,
    /// Objective over the whole training split: before training, then after
    /// each epoch.
    pub loss_history: Vec<f64>,
}

fn gather<'a>(
    features: &'a SyntheticFeatures,
    labels: &BTreeMap<ItemId, f64>,
    items: &[ItemId],
) -> Result<(Vec<&'a [f64]>, Vec<f64>), TrainError> {
    let mut xs = Vec::with_capacity(items.len());
    let mut qs = Vec::with_capacity(items.len());
    for id in items {
        xs.push(
            features
                .get(id)
                .ok_or_else(|| TrainError::MissingFeatures(id.clone()))?,
        );
        qs.push(*labels.get(id).ok_or_else(|| TrainError::MissingLabel(id.clone()))?);
    }
    Ok((xs, qs))
}

/// Mini-batch gradient descent on the soft-label objective.
///
/// Batches follow a per-epoch shuffle drawn from `cfg.seed`, so equal seeds
/// give identical weights.
pub fn train_soft_label_classifier(
    features: &SyntheticFeatures,
    labels: &BTreeMap<ItemId, f64>,
    train: &[ItemId],
    cfg: &LearnerConfig,
) -> Result<TrainedModel, TrainError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptySplit);
    }
    let (xs, qs) = gather(features, labels, train)?;
    let mut model = LinearModel::zeros(features.dim);
    let mut loss_history = vec![soft_label_objective(&model, &xs, &qs, cfg.l2_strength)];
    let mut rng = rng_from_seed(cfg.seed);
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let mut bx: Vec<&[f64]> = Vec::with_capacity(cfg.batch_size);
    let mut bq: Vec<f64> = Vec::with_capacity(cfg.batch_size);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            bx.clear();
            bq.clear();
            bx.extend(chunk.iter().map(|&i| xs[i]));
            bq.extend(chunk.iter().map(|&i| qs[i]));
            let (gw, gb) = soft_label_gradient(&model, &bx, &bq, cfg.l2_strength);
            for (w, g) in model.weights.iter_mut().zip(&gw) {
                *w -= cfg.learning_rate * g;
            }
            model.bias -= cfg.learning_rate * gb;
        }
        let loss = soft_label_objective(&model, &xs, &qs, cfg.l2_strength);
        let params_finite = model.bias.is_finite() && model.weights.iter().all(|w| w.is_finite());
        if !loss.is_finite() || !params_finite {
            return Err(TrainError::Diverged { epoch });
        }
        loss_history.push(loss);
    }
    Ok(TrainedModel {
        model,
        loss_history,
    })
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum EvalError {
    #[error("train and test share sources: {0:?}")]
    Overlap(Vec<SourceId>),
    #[error("no features for item {0}")]
    MissingFeatures(ItemId),
    #[error("no truth for item {0}")]
    MissingTruth(ItemId),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelEvaluation {
    pub rates: ErrorRates,
    pub ece: f64,
}

/// Score a model's test-split probabilities against ground truth.
pub fn evaluate_model(
    model: &LinearModel,
    features: &SyntheticFeatures,
    split: &Split,
    truth: &BTreeMap<ItemId, bool>,
    ece_cfg: EceConfig,
) -> Result<ModelEvaluation, EvalError> {
    let shared: Vec<SourceId> = split
        .train_sources
        .intersection(&split.test_sources)
        .cloned()
        .collect();
    if !shared.is_empty() {
        return Err(EvalError::Overlap(shared));
    }
    let mut pairs = Vec::with_capacity(split.test.len());
    for id in &split.test {
        let x = features
            .get(id)
            .ok_or_else(|| EvalError::MissingFeatures(id.clone()))?;
        let y = *truth.get(id).ok_or_else(|| EvalError::MissingTruth(id.clone()))?;
        pairs.push((model.predict(x), y));
    }
    let rates = Confusion::from_pairs(pairs.iter().map(|&(p, y)| (classify(p, 0.5), y))).into();
    Ok(ModelEvaluation {
        rates,
        ece: ece_pairs(&pairs, ece_cfg)?,
    })
}

/// Mean held-out cross-entropy against the crowd labels of the test items.
pub fn held_out_cross_entropy(
    model: &LinearModel,
    features: &SyntheticFeatures,
    labels: &BTreeMap<ItemId, f64>,
    test: &[ItemId],
) -> Result<f64, TrainError> {
    let (xs, qs) = gather(features, labels, test)?;
    Ok(soft_label_objective(model, &xs, &qs, 0.0))
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum SearchError {
    #[error("empty hyperparameter grid")]
    EmptyGrid,
    #[error("no splits or no label sets to search over")]
    NoData,
    #[error("every grid cell failed; first error: {0}")]
    AllFailed(TrainError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub best: LearnerConfig,
    pub best_score: f64,
    /// Mean held-out cross-entropy per grid cell, or the error that
    /// excluded it.
    pub cells: Vec<(LearnerConfig, Result<f64, TrainError>)>,
}

/// Exhaustive grid search by mean held-out cross-entropy against crowd
/// labels. Split `i` is paired with label set `i mod labels.len()`. Ties go
/// to fewer epochs, then to the smaller learning rate.
pub fn hyperparameter_search(
    grid: &[LearnerConfig],
    features: &SyntheticFeatures,
    labels: &[&BTreeMap<ItemId, f64>],
    splits: &[Split],
) -> Result<SearchResult, SearchError> {
    if grid.is_empty() {
        return Err(SearchError::EmptyGrid);
    }
    if splits.is_empty() || labels.is_empty() {
        return Err(SearchError::NoData);
    }
    let cells: Vec<(LearnerConfig, Result<f64, TrainError>)> = grid
        .par_iter()
        .map(|cfg| {
            let score = splits
                .iter()
                .enumerate()
                .map(|(i, split)| {
                    let lab = labels[i % labels.len()];
                    let trained = train_soft_label_classifier(features, lab, &split.train, cfg)?;
                    held_out_cross_entropy(&trained.model, features, lab, &split.test)
                })
                .sum::<Result<f64, TrainError>>()
                .map(|total| total / splits.len() as f64);
            (*cfg, score)
        })
        .collect();
    let mut best: Option<(LearnerConfig, f64)> = None;
    for (cfg, score) in &cells {
        match score {
            Ok(s) if s.is_finite() => {
                let better = match best {
                    None => true,
                    Some((b, bs)) => {
                        s.total_cmp(&bs)
                            .then(cfg.epochs.cmp(&b.epochs))
                            .then(cfg.learning_rate.total_cmp(&b.learning_rate))
                            .is_lt()
                    }
                };
                if better {
                    best = Some((*cfg, *s));
                }
            }
            Ok(_) => log::warn!("grid cell {cfg:?} produced a non-finite score; excluded"),
            Err(e) => log::warn!("grid cell {cfg:?} excluded: {e}"),
        }
    }
    match best {
        Some((best, best_score)) => Ok(SearchResult {
            best,
            best_score,
            cells,
        }),
        None => {
            let first = cells
                .into_iter()
                .find_map(|(_, r)| r.err())
                .unwrap_or(TrainError::Diverged { epoch: 0 });
            Err(SearchError::AllFailed(first))
        }
    }
}

/// How label replicates are matched with evaluation splits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pairing {
    /// Split `i` uses replicate `i mod n_replicates`.
    #[default]
    OneToOne,
    /// Every split with every replicate.
    Crossed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSpec {
    pub k_folds: usize,
    /// Repeats of k-fold used for the hyperparameter search.
    pub search_repeats: usize,
    /// Repeats of k-fold used for the final evaluation.
    pub eval_repeats: usize,
    pub grid: Vec<LearnerConfig>,
    #[serde(default)]
    pub pairing: Pairing,
    pub ece_bins: usize,
    pub seed: u64,
}

/// Crowd datasets of one variant under one feedback condition.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelSet {
    pub variant: WocVariant,
    pub gs_prevalence: f64,
    pub datasets: Vec<WocDataset>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub variant: WocVariant,
    pub gs_prevalence: f64,
    pub split: usize,
    pub replicate: usize,
    pub miss: Option<f64>,
    pub fa: Option<f64>,
    pub ece: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: WocVariant,
    pub gs_prevalence: f64,
    pub best_config: LearnerConfig,
    pub miss: Option<MetricSummary>,
    pub fa: Option<MetricSummary>,
    pub ece: Option<MetricSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub summaries: Vec<VariantSummary>,
    pub jobs: Vec<JobRecord>,
    pub weights: Vec<(JobRecord, LinearModel)>,
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("no label datasets for {variant} at GS prevalence {gs_prevalence}")]
    MissingVariant {
        variant: WocVariant,
        gs_prevalence: f64,
    },
    #[error(transparent)]
    Folds(#[from] FoldError),
    #[error("{variant} @ {gs_prevalence}: {source}")]
    Search {
        variant: WocVariant,
        gs_prevalence: f64,
        source: SearchError,
    },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Tune, train and evaluate a model for every requested (variant, condition)
/// cell of the label matrix.
///
/// Features, folds and the corpus refer to the QA set. Each training job
/// seeds its learner from `(spec.seed, variant, condition, split, replicate)`
/// so results do not depend on job scheduling.
pub fn pipeline_experiment(
    matrix: &[(WocVariant, f64)],
    label_sets: &[LabelSet],
    corpus: &Corpus,
    features: &SyntheticFeatures,
    spec: &PipelineSpec,
) -> Result<PipelineReport, PipelineError> {
    let truth = corpus.truth(ItemSet::Qa);
    let search_folds = make_folds(
        corpus,
        ItemSet::Qa,
        spec.k_folds,
        spec.search_repeats,
        derive_seed(spec.seed, &["search-folds".into()]),
    )?;
    let eval_folds = make_folds(
        corpus,
        ItemSet::Qa,
        spec.k_folds,
        spec.eval_repeats,
        derive_seed(spec.seed, &["eval-folds".into()]),
    )?;
    let ece_cfg = EceConfig {
        n_bins: spec.ece_bins,
    };
    let mut report = PipelineReport {
        summaries: Vec::new(),
        jobs: Vec::new(),
        weights: Vec::new(),
    };
    for &(variant, gs_prevalence) in matrix {
        let set = label_sets
            .iter()
            .find(|s| s.variant == variant && s.gs_prevalence == gs_prevalence && !s.datasets.is_empty())
            .ok_or(PipelineError::MissingVariant {
                variant,
                gs_prevalence,
            })?;
        let labels: Vec<&BTreeMap<ItemId, f64>> = set.datasets.iter().map(|d| &d.labels).collect();
        let search = hyperparameter_search(&spec.grid, features, &labels, &search_folds.splits)
            .map_err(|source| PipelineError::Search {
                variant,
                gs_prevalence,
                source,
            })?;
        let pairs: Vec<(usize, usize)> = match spec.pairing {
            Pairing::OneToOne => (0..eval_folds.splits.len())
                .map(|i| (i, i % set.datasets.len()))
                .collect(),
            Pairing::Crossed => (0..eval_folds.splits.len())
                .flat_map(|i| (0..set.datasets.len()).map(move |r| (i, r)))
                .collect(),
        };
        let tag = format!("{variant}@{gs_prevalence}");
        let results: Result<Vec<(JobRecord, LinearModel)>, PipelineError> = pairs
            .par_iter()
            .map(|&(split_idx, rep)| {
                let split = &eval_folds.splits[split_idx];
                let dataset = &set.datasets[rep];
                let cfg = LearnerConfig {
                    seed: derive_seed(
                        spec.seed,
                        &[tag.as_str().into(), split_idx.into(), rep.into()],
                    ),
                    ..search.best
                };
                let trained =
                    train_soft_label_classifier(features, &dataset.labels, &split.train, &cfg)?;
                let eval = evaluate_model(&trained.model, features, split, &truth, ece_cfg)?;
                Ok((
                    JobRecord {
                        variant,
                        gs_prevalence,
                        split: split_idx,
                        replicate: dataset.replicate_index,
                        miss: eval.rates.miss_rate,
                        fa: eval.rates.false_alarm_rate,
                        ece: eval.ece,
                    },
                    trained.model,
                ))
            })
            .collect();
        let results = results?;
        let column = |f: &dyn Fn(&JobRecord) -> Option<f64>| -> Option<MetricSummary> {
            let values: Vec<f64> = results.iter().filter_map(|(j, _)| f(j)).collect();
            MetricSummary::from_values(&values, 0.95)
        };
        report.summaries.push(VariantSummary {
            variant,
            gs_prevalence,
            best_config: search.best,
            miss: column(&|j| j.miss),
            fa: column(&|j| j.fa),
            ece: column(&|j| Some(j.ece)),
        });
        for (job, model) in results {
            report.jobs.push(job);
            report.weights.push((job, model));
        }
    }
    Ok(report)
}

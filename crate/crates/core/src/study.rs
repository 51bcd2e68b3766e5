//! The full experiment: two feedback conditions, four label variants, crowd
//! size sweeps and the downstream learner, driven by one config.
//!
//! Each stage is a separate function so callers can stop after any of them
//! or feed a stage from files; [`run_study`] chains them all.

use std::collections::BTreeMap;
use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregation::{
    classify, crowd_size_sweep, generate_replicates, AggregationError, MetricSummary,
    ResamplingPlan, Sampling, SweepPoint, WocDataset, WocVariant,
};
use crate::corpus::{build_corpus, Corpus, CorpusError, CorpusSpec, ItemSet};
use crate::downstream::{
    config_grid, pipeline_experiment, FeatureSpec, LabelSet, Pairing, PipelineError,
    PipelineReport, PipelineSpec, SyntheticFeatures,
};
use crate::judgments::{JudgmentTable, ResponseMode};
use crate::metrics::{calibration_curve, ece, error_rates, CalibrationCurve, EceConfig, MetricsError};
use crate::recalibration::{
    recalibrate_crowd, recalibrate_individual, ClampPolicy, FitError,
    FitOptions, FitRecord, IndividualRecalibration,
};
use crate::seed::derive_seed;
use crate::sim::{simulate_population, ContestConfig, PopulationSpec, Scoring, SimError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub n_qa_unique_pos: usize,
    pub n_qa_unique_neg: usize,
    pub n_gs_unique_pos: usize,
    pub n_gs_unique_neg: usize,
    pub negative_augmentation_factor_qa: usize,
    /// One feedback condition per entry, each an augmentation factor for the
    /// GS negatives.
    pub gs_augmentation_levels: Vec<usize>,
}

impl CorpusConfig {
    pub fn spec(&self, gs_augmentation: usize) -> CorpusSpec {
        CorpusSpec {
            n_qa_unique_pos: self.n_qa_unique_pos,
            n_qa_unique_neg: self.n_qa_unique_neg,
            n_gs_unique_pos: self.n_gs_unique_pos,
            n_gs_unique_neg: self.n_gs_unique_neg,
            negative_augmentation_factor_qa: self.negative_augmentation_factor_qa,
            negative_augmentation_factor_gs: gs_augmentation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub population: PopulationSpec,
    pub n_trials: usize,
    pub gs_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggregationConfig {
    pub k: usize,
    pub n_replicates: usize,
    #[serde(default)]
    pub sampling: Sampling,
    pub sweep_sizes: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecalibrationConfig {
    pub epsilon: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl RecalibrationConfig {
    pub fn clamp(&self) -> ClampPolicy {
        ClampPolicy {
            epsilon: self.epsilon,
        }
    }

    pub fn fit_options(&self) -> FitOptions {
        FitOptions {
            tol: self.tol,
            max_iter: self.max_iter,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsConfig {
    pub ece_bins: usize,
    pub curve_bins: usize,
    pub ci_level: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DownstreamConfig {
    pub enabled: bool,
    pub feature_dim: usize,
    pub feature_mu: f64,
    pub feature_jitter: f64,
    pub k_folds: usize,
    pub search_repeats: usize,
    pub eval_repeats: usize,
    pub epochs: Vec<usize>,
    pub learning_rates: Vec<f64>,
    pub l2_strengths: Vec<f64>,
    pub batch_sizes: Vec<usize>,
    #[serde(default)]
    pub pairing: Pairing,
}

/// Everything needed to rerun an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub corpus: CorpusConfig,
    pub simulation: SimulationConfig,
    pub aggregation: AggregationConfig,
    pub recalibration: RecalibrationConfig,
    pub metrics: MetricsConfig,
    pub downstream: DownstreamConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 2024,
            output_dir: None,
            corpus: CorpusConfig {
                n_qa_unique_pos: 150,
                n_qa_unique_neg: 150,
                n_gs_unique_pos: 116,
                n_gs_unique_neg: 116,
                negative_augmentation_factor_qa: 3,
                gs_augmentation_levels: vec![3, 0],
            },
            simulation: SimulationConfig {
                population: PopulationSpec {
                    n_annotators: 200,
                    d_prime: (1.0, 1.5),
                    criterion_init: 0.0,
                    adaptation_rate: 0.1,
                    belief_slope: (2.0, 4.0),
                    lapse_rate: 0.02,
                },
                n_trials: 300,
                gs_fraction: 1.0 / 3.0,
            },
            aggregation: AggregationConfig {
                k: 9,
                n_replicates: 100,
                sampling: Sampling::WithoutReplacement,
                sweep_sizes: (1..=9).collect(),
            },
            recalibration: RecalibrationConfig {
                epsilon: 1e-3,
                tol: 1e-8,
                max_iter: 200,
            },
            metrics: MetricsConfig {
                ece_bins: 10,
                curve_bins: 7,
                ci_level: 0.95,
            },
            downstream: DownstreamConfig {
                enabled: true,
                feature_dim: 2,
                feature_mu: 0.8,
                feature_jitter: 0.05,
                k_folds: 5,
                search_repeats: 6,
                eval_repeats: 20,
                epochs: vec![5, 10, 20],
                learning_rates: vec![0.05, 0.2],
                l2_strengths: vec![1e-4, 1e-2],
                batch_sizes: vec![32],
                pairing: Pairing::OneToOne,
            },
        }
    }
}

#[derive(Debug, Error)]
pub enum StudyError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Aggregation(#[from] AggregationError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("downstream: {0}")]
    Pipeline(#[from] PipelineError),
}

impl ExperimentConfig {
    /// Check everything that can be checked without running anything.
    pub fn validate(&self) -> Result<(), StudyError> {
        let bad = |msg: &str| Err(StudyError::Config(msg.to_string()));
        if self.corpus.gs_augmentation_levels.is_empty() {
            return bad("corpus.gs_augmentation_levels is empty");
        }
        for &level in &self.corpus.gs_augmentation_levels {
            build_corpus(&self.corpus.spec(level))?;
        }
        let pop = &self.simulation.population;
        if pop.n_annotators == 0 {
            return bad("simulation.population.n_annotators must be >= 1");
        }
        if pop.d_prime.0 > pop.d_prime.1 || pop.belief_slope.0 > pop.belief_slope.1 {
            return bad("population ranges must be [lo, hi] with lo <= hi");
        }
        pop.profile(self.seed, &PopulationSpec::annotator_id(0)).validate()?;
        self.contest(ResponseMode::Binary).validate()?;
        let agg = &self.aggregation;
        if agg.k == 0 || agg.n_replicates == 0 {
            return bad("aggregation.k and aggregation.n_replicates must be >= 1");
        }
        if agg.sweep_sizes.iter().any(|&s| s == 0) {
            return bad("aggregation.sweep_sizes must be >= 1");
        }
        self.recalibration
            .clamp()
            .validate()
            .map_err(|e| StudyError::Config(e.to_string()))?;
        if !(self.recalibration.tol > 0.0) || self.recalibration.max_iter == 0 {
            return bad("recalibration.tol must be > 0 and max_iter >= 1");
        }
        let m = &self.metrics;
        if m.ece_bins == 0 || m.curve_bins == 0 {
            return bad("metrics bin counts must be >= 1");
        }
        if !(m.ci_level > 0.0 && m.ci_level < 1.0) {
            return bad("metrics.ci_level must lie in (0, 1)");
        }
        let d = &self.downstream;
        if d.enabled {
            if d.feature_dim == 0 || d.k_folds < 2 || d.search_repeats == 0 || d.eval_repeats == 0 {
                return bad("downstream needs feature_dim >= 1, k_folds >= 2 and repeats >= 1");
            }
            if self.learner_grid().is_empty() {
                return bad("downstream hyperparameter grid is empty");
            }
            for cfg in self.learner_grid() {
                cfg.validate().map_err(|e| StudyError::Config(e.to_string()))?;
            }
        }
        Ok(())
    }

    pub fn contest(&self, mode: ResponseMode) -> ContestConfig {
        ContestConfig {
            n_trials: self.simulation.n_trials,
            gs_fraction: self.simulation.gs_fraction,
            scoring: Scoring::for_mode(mode),
            seed: derive_seed(self.seed, &["contest".into()]),
        }
    }

    pub fn resampling_plan(&self) -> ResamplingPlan {
        ResamplingPlan {
            k: self.aggregation.k,
            n_replicates: self.aggregation.n_replicates,
            sampling: self.aggregation.sampling,
            seed: derive_seed(self.seed, &["woc".into()]),
        }
    }

    pub fn ece_config(&self) -> EceConfig {
        EceConfig {
            n_bins: self.metrics.ece_bins,
        }
    }

    pub fn feature_spec(&self) -> FeatureSpec {
        FeatureSpec {
            dim: self.downstream.feature_dim,
            mu: self.downstream.feature_mu,
            jitter: self.downstream.feature_jitter,
            seed: derive_seed(self.seed, &["features".into()]),
        }
    }

    pub fn learner_grid(&self) -> Vec<crate::downstream::LearnerConfig> {
        let d = &self.downstream;
        config_grid(&d.epochs, &d.learning_rates, &d.l2_strengths, &d.batch_sizes)
    }

    pub fn pipeline_spec(&self) -> PipelineSpec {
        let d = &self.downstream;
        PipelineSpec {
            k_folds: d.k_folds,
            search_repeats: d.search_repeats,
            eval_repeats: d.eval_repeats,
            grid: self.learner_grid(),
            pairing: d.pairing,
            ece_bins: self.metrics.ece_bins,
            seed: derive_seed(self.seed, &["downstream".into()]),
        }
    }
}

/// Judgments of both response modes under one feedback condition.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionRun {
    pub gs_prevalence: f64,
    pub corpus: Corpus,
    pub binary: JudgmentTable,
    pub belief: JudgmentTable,
}

/// Simulate the workforce in both response modes for one GS augmentation level.
pub fn simulate_condition(cfg: &ExperimentConfig, gs_augmentation: usize) -> Result<ConditionRun, StudyError> {
    let corpus = build_corpus(&cfg.corpus.spec(gs_augmentation))?;
    let pop = &cfg.simulation.population;
    let binary = simulate_population(pop, &cfg.contest(ResponseMode::Binary), &corpus, ResponseMode::Binary, cfg.seed)?;
    let belief = simulate_population(pop, &cfg.contest(ResponseMode::Belief), &corpus, ResponseMode::Belief, cfg.seed)?;
    Ok(ConditionRun {
        gs_prevalence: corpus.gs_prevalence(),
        corpus,
        binary,
        belief,
    })
}

/// A crowd fit that failed; its replicate is left out of the rEB_CR summaries.
#[derive(Debug, Clone, PartialEq)]
pub struct CrowdFitFailure {
    pub replicate: usize,
    pub error: FitError,
}

/// The four label variants of one condition.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionDatasets {
    pub gs_prevalence: f64,
    pub individual: IndividualRecalibration,
    pub variants: BTreeMap<WocVariant, Vec<WocDataset>>,
    pub crowd_fits: Vec<FitRecord>,
    pub crowd_failures: Vec<CrowdFitFailure>,
}

/// Crowd-recalibrate every dataset, keeping failures aside.
pub fn crowd_recalibrate_all(
    datasets: &[WocDataset],
    gs_truth: &BTreeMap<crate::corpus::ItemId, bool>,
    clamp: ClampPolicy,
    opts: FitOptions,
) -> (Vec<WocDataset>, Vec<FitRecord>, Vec<CrowdFitFailure>) {
    let results: Vec<_> = datasets
        .par_iter()
        .map(|ds| (ds.replicate_index, recalibrate_crowd(ds, gs_truth, clamp, opts)))
        .collect();
    let mut out = (Vec::new(), Vec::new(), Vec::new());
    for (replicate, r) in results {
        match r {
            Ok((ds, fit)) => {
                out.0.push(ds);
                out.1.push(fit);
            }
            Err(error) => {
                log::warn!("crowd fit for replicate {replicate} failed: {error}");
                out.2.push(CrowdFitFailure { replicate, error });
            }
        }
    }
    out
}

/// Individual recalibration, resampling and crowd recalibration.
pub fn build_variants(cfg: &ExperimentConfig, run: &ConditionRun) -> Result<ConditionDatasets, StudyError> {
    let rc = &cfg.recalibration;
    let plan = cfg.resampling_plan();
    let individual = recalibrate_individual(&run.belief, rc.clamp(), rc.fit_options());
    let bc = generate_replicates(&run.binary, &run.corpus, &plan, WocVariant::Bc)?;
    let eb = generate_replicates(&run.belief, &run.corpus, &plan, WocVariant::Eb)?;
    let reb = generate_replicates(&individual.table, &run.corpus, &plan, WocVariant::RebNoCr)?;
    let gs_truth = run.corpus.truth(ItemSet::Gs);
    let (cr, crowd_fits, crowd_failures) = crowd_recalibrate_all(&reb, &gs_truth, rc.clamp(), rc.fit_options());
    let variants = [
        (WocVariant::Bc, bc),
        (WocVariant::Eb, eb),
        (WocVariant::RebNoCr, reb),
        (WocVariant::RebCr, cr),
    ]
    .into();
    Ok(ConditionDatasets {
        gs_prevalence: run.gs_prevalence,
        individual,
        variants,
        crowd_fits,
        crowd_failures,
    })
}

/// Error rates and ECE of one dataset's QA labels against truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetMetrics {
    pub variant: WocVariant,
    pub gs_prevalence: f64,
    pub replicate: usize,
    pub miss: Option<f64>,
    pub fa: Option<f64>,
    pub ece: f64,
}

pub fn dataset_metrics(ds: &WocDataset, corpus: &Corpus, cfg: EceConfig) -> Result<DatasetMetrics, MetricsError> {
    let labels = ds.labels_in(corpus, ItemSet::Qa);
    let truth = corpus.truth(ItemSet::Qa);
    let hard = labels.iter().map(|(id, &p)| (id.clone(), classify(p, 0.5))).collect();
    let rates = error_rates(&hard, &truth)?;
    Ok(DatasetMetrics {
        variant: ds.variant,
        gs_prevalence: ds.gs_prevalence,
        replicate: ds.replicate_index,
        miss: rates.miss_rate,
        fa: rates.false_alarm_rate,
        ece: ece(&labels, &truth, cfg)?,
    })
}

/// Replicate summary of one variant under one condition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariantMetrics {
    pub variant: WocVariant,
    pub gs_prevalence: f64,
    pub miss: Option<MetricSummary>,
    pub fa: Option<MetricSummary>,
    pub ece: Option<MetricSummary>,
}

pub fn summarize(rows: &[DatasetMetrics], level: f64) -> Option<VariantMetrics> {
    let first = rows.first()?;
    let col = |f: fn(&DatasetMetrics) -> Option<f64>| {
        let v: Vec<f64> = rows.iter().filter_map(f).collect();
        MetricSummary::from_values(&v, level)
    };
    Some(VariantMetrics {
        variant: first.variant,
        gs_prevalence: first.gs_prevalence,
        miss: col(|r| r.miss),
        fa: col(|r| r.fa),
        ece: col(|r| Some(r.ece)),
    })
}

/// Calibration curve of the QA labels of all replicates pooled together.
pub fn pooled_curve(datasets: &[WocDataset], corpus: &Corpus, n_bins: usize) -> Result<CalibrationCurve, MetricsError> {
    let truth = corpus.truth(ItemSet::Qa);
    let mut labels = BTreeMap::new();
    let mut pooled_truth = BTreeMap::new();
    for ds in datasets {
        for (id, p) in ds.labels_in(corpus, ItemSet::Qa) {
            let key = crate::corpus::ItemId(format!("{}#{}", ds.replicate_index, id));
            pooled_truth.insert(key.clone(), truth[&id]);
            labels.insert(key, p);
        }
    }
    calibration_curve(&labels, &pooled_truth, n_bins)
}

/// Sweep rows for one condition: `(base variant, points)`. The rEB sweep
/// scores both the raw crowd mean and its crowd-recalibrated version.
pub fn sweep_condition(
    cfg: &ExperimentConfig,
    run: &ConditionRun,
    individual: &IndividualRecalibration,
) -> Result<Vec<(WocVariant, Vec<SweepPoint>)>, StudyError> {
    let plan = cfg.resampling_plan();
    let ece_cfg = cfg.ece_config();
    let corpus = &run.corpus;
    let gs_truth = corpus.truth(ItemSet::Gs);
    let rc = cfg.recalibration;
    let score = |prefix: &str, ds: &WocDataset, out: &mut BTreeMap<String, f64>| {
        if let Ok(m) = dataset_metrics(ds, corpus, ece_cfg) {
            if let Some(v) = m.miss {
                out.insert(format!("{prefix}.miss"), v);
            }
            if let Some(v) = m.fa {
                out.insert(format!("{prefix}.fa"), v);
            }
            out.insert(format!("{prefix}.ece"), m.ece);
        }
    };
    let sizes = &cfg.aggregation.sweep_sizes;
    let mut out = Vec::new();
    for (variant, table) in [(WocVariant::Bc, &run.binary), (WocVariant::Eb, &run.belief)] {
        let points = crowd_size_sweep(table, corpus, sizes, &plan, variant, |ds| {
            let mut m = BTreeMap::new();
            score(variant.as_str(), ds, &mut m);
            Some(m)
        })?;
        out.push((variant, points));
    }
    let points = crowd_size_sweep(&individual.table, corpus, sizes, &plan, WocVariant::RebNoCr, |ds| {
        let mut m = BTreeMap::new();
        score(WocVariant::RebNoCr.as_str(), ds, &mut m);
        if let Ok((cr, _)) = recalibrate_crowd(ds, &gs_truth, rc.clamp(), rc.fit_options()) {
            score(WocVariant::RebCr.as_str(), &cr, &mut m);
        }
        Some(m)
    })?;
    out.push((WocVariant::RebNoCr, points));
    Ok(out)
}

/// Everything one condition produced.
#[derive(Debug, Clone)]
pub struct ConditionReport {
    pub run: ConditionRun,
    pub datasets: ConditionDatasets,
    pub metrics: Vec<DatasetMetrics>,
    pub summaries: Vec<VariantMetrics>,
    pub curves: BTreeMap<WocVariant, CalibrationCurve>,
    pub sweeps: Vec<(WocVariant, Vec<SweepPoint>)>,
}

#[derive(Debug, Clone)]
pub struct StudyReport {
    pub conditions: Vec<ConditionReport>,
    pub downstream: Option<PipelineReport>,
}

/// Score, summarise and draw curves for every variant of a condition.
pub fn evaluate_condition(
    cfg: &ExperimentConfig,
    run: &ConditionRun,
    datasets: &ConditionDatasets,
) -> Result<(Vec<DatasetMetrics>, Vec<VariantMetrics>, BTreeMap<WocVariant, CalibrationCurve>), StudyError> {
    let mut metrics = Vec::new();
    let mut summaries = Vec::new();
    let mut curves = BTreeMap::new();
    for (&variant, sets) in &datasets.variants {
        let rows = sets
            .par_iter()
            .map(|ds| dataset_metrics(ds, &run.corpus, cfg.ece_config()))
            .collect::<Result<Vec<_>, _>>()?;
        if let Some(s) = summarize(&rows, cfg.metrics.ci_level) {
            summaries.push(s);
        }
        if !sets.is_empty() {
            curves.insert(variant, pooled_curve(sets, &run.corpus, cfg.metrics.curve_bins)?);
        }
        metrics.extend(rows);
    }
    Ok((metrics, summaries, curves))
}

/// Run every stage for every condition, then the downstream learner.
pub fn run_study(cfg: &ExperimentConfig) -> Result<StudyReport, StudyError> {
    cfg.validate()?;
    let mut conditions = Vec::new();
    for &level in &cfg.corpus.gs_augmentation_levels {
        let run = simulate_condition(cfg, level)?;
        log::info!("simulated GS prevalence {:.3}: {} judgments", run.gs_prevalence, run.binary.len() + run.belief.len());
        let datasets = build_variants(cfg, &run)?;
        let (metrics, summaries, curves) = evaluate_condition(cfg, &run, &datasets)?;
        let sweeps = sweep_condition(cfg, &run, &datasets.individual)?;
        conditions.push(ConditionReport {
            run,
            datasets,
            metrics,
            summaries,
            curves,
            sweeps,
        });
    }
    let downstream = if cfg.downstream.enabled {
        Some(run_downstream(cfg, &conditions)?)
    } else {
        None
    };
    Ok(StudyReport {
        conditions,
        downstream,
    })
}

/// Train and evaluate models on every (variant, condition) label set.
pub fn run_downstream(cfg: &ExperimentConfig, conditions: &[ConditionReport]) -> Result<PipelineReport, StudyError> {
    let corpus = &conditions
        .first()
        .ok_or_else(|| StudyError::Config("no conditions to train on".into()))?
        .run
        .corpus;
    let features = SyntheticFeatures::generate(corpus, ItemSet::Qa, &cfg.feature_spec());
    let mut label_sets = Vec::new();
    let mut matrix = Vec::new();
    for c in conditions {
        for (&variant, sets) in &c.datasets.variants {
            matrix.push((variant, c.run.gs_prevalence));
            label_sets.push(LabelSet {
                variant,
                gs_prevalence: c.run.gs_prevalence,
                datasets: sets.clone(),
            });
        }
    }
    Ok(pipeline_experiment(&matrix, &label_sets, corpus, &features, &cfg.pipeline_spec())?)
}


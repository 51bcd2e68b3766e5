//! Property checks shared by the `properties` test target and the acceptance
//! harness. Each check is a plain function so both can run the same code.

#![allow(dead_code)]

use std::collections::BTreeMap;

use crowdcal::aggregation::{
    generate_replicates, woc_majority, woc_mean_belief, woc_proportion, ResamplingPlan, Sampling,
    WocVariant,
};
use crowdcal::corpus::{build_corpus, Corpus, CorpusSpec, ItemId, ItemSet};
use crowdcal::downstream::{
    make_folds, pipeline_experiment, soft_label_gradient, soft_label_objective,
    train_soft_label_classifier, FeatureSpec, LabelSet, LearnerConfig, LinearModel, Pairing,
    PipelineSpec, SyntheticFeatures, STRATIFICATION_TOLERANCE,
};
use crowdcal::judgments::{filter_judgments, ingest_judgments, DedupPolicy, Judgment, JudgmentTable, ResponseMode};
use crowdcal::metrics::{
    calibration_curve_pairs, ece_pairs, majority_accuracy_exact, read_curve_csv, write_curve_csv,
    Confusion, EceConfig,
};
use crowdcal::recalibration::{
    fit_llo_mle, llo_gradient, llo_loglik, llo_transform, CalibrationSet, CalibrationSource,
    ClampPolicy, FitOptions, LloParams,
};
use crowdcal::seed::{derived_rng, rng_from_seed};
use crowdcal::sim::{
    sample_trial_stream, simulate_annotator_traced, simulate_population,
    AnnotatorProfile, ContestConfig, PopulationSpec, Scoring,
};
use crowdcal::AnnotatorId;
use proptest::prelude::*;
use proptest::test_runner::{RngAlgorithm, TestCaseError, TestRng, TestRunner};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Binomial, Distribution};
use statrs::distribution::{ContinuousCDF, Normal};

pub type Check = fn() -> Result<(), String>;

pub const ALL: &[(&str, Check)] = &[
    ("corpus_deterministic_with_exact_prevalence", corpus_deterministic_with_exact_prevalence),
    ("corpus_csv_round_trip", corpus_csv_round_trip),
    ("judgment_csv_round_trip", judgment_csv_round_trip),
    ("filter_invariants", filter_invariants),
    ("prevalence_direction", prevalence_direction),
    ("zero_adaptation_ignores_feedback_stream", zero_adaptation_ignores_feedback_stream),
    ("beliefs_monotone_in_evidence", beliefs_monotone_in_evidence),
    ("majority_matches_classified_proportion", majority_matches_classified_proportion),
    ("woc_permutation_invariance", woc_permutation_invariance),
    ("full_pool_mean_belief_is_pool_mean", full_pool_mean_belief_is_pool_mean),
    ("replicates_ignore_row_order", replicates_ignore_row_order),
    ("llo_order_preserving", llo_order_preserving),
    ("llo_half_fixed_point", llo_half_fixed_point),
    ("llo_round_trip", llo_round_trip),
    ("llo_fit_optimality", llo_fit_optimality),
    ("llo_gradient_matches_finite_differences", llo_gradient_matches_finite_differences),
    ("majority_exact_monotone_in_crowd_size", majority_exact_monotone_in_crowd_size),
    ("majority_exact_matches_monte_carlo", majority_exact_matches_monte_carlo),
    ("ece_zero_for_calibrated_bins", ece_zero_for_calibrated_bins),
    ("rates_and_ece_ignore_order", rates_and_ece_ignore_order),
    ("curve_csv_reproduces_ece", curve_csv_reproduces_ece),
    ("soft_label_gradient_matches_finite_differences", soft_label_gradient_matches_finite_differences),
    ("loss_non_increasing_at_small_rate", loss_non_increasing_at_small_rate),
    ("folds_keep_sources_together", folds_keep_sources_together),
    ("training_deterministic_by_seed", training_deterministic_by_seed),
    ("simulation_independent_of_threads", simulation_independent_of_threads),
    ("pipeline_independent_of_threads", pipeline_independent_of_threads),
];

fn run<S>(cases: u32, strategy: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Result<(), String>
where
    S: Strategy,
    S::Value: std::fmt::Debug,
{
    let config = ProptestConfig {
        cases,
        failure_persistence: None,
        ..ProptestConfig::default()
    };
    let mut runner = TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha));
    runner.run(&strategy, test).map_err(|e| e.to_string())
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

fn small_spec() -> impl Strategy<Value = CorpusSpec> {
    (1usize..12, 1usize..12, 1usize..8, 1usize..8, 0usize..4, 0usize..4).prop_map(
        |(qp, qn, gp, gn, aq, ag)| CorpusSpec {
            n_qa_unique_pos: qp,
            n_qa_unique_neg: qn,
            n_gs_unique_pos: gp,
            n_gs_unique_neg: gn,
            negative_augmentation_factor_qa: aq,
            negative_augmentation_factor_gs: ag,
        },
    )
}

fn population(n: usize, adaptation: f64) -> PopulationSpec {
    PopulationSpec {
        n_annotators: n,
        d_prime: (1.0, 1.5),
        criterion_init: 0.0,
        adaptation_rate: adaptation,
        belief_slope: (2.0, 4.0),
        lapse_rate: 0.02,
    }
}

fn contest(n_trials: usize, seed: u64) -> ContestConfig {
    ContestConfig {
        n_trials,
        gs_fraction: 1.0 / 3.0,
        scoring: Scoring::Accuracy,
        seed,
    }
}

fn small_table(seed: u64, mode: ResponseMode) -> (Corpus, JudgmentTable) {
    let corpus = build_corpus(&CorpusSpec {
        n_qa_unique_pos: 6,
        n_qa_unique_neg: 6,
        n_gs_unique_pos: 4,
        n_gs_unique_neg: 4,
        negative_augmentation_factor_qa: 1,
        negative_augmentation_factor_gs: 1,
    })
    .unwrap();
    let table = simulate_population(&population(12, 0.1), &contest(15, seed), &corpus, mode, seed).unwrap();
    (corpus, table)
}

pub fn corpus_deterministic_with_exact_prevalence() -> Result<(), String> {
    run(64, small_spec(), |spec| {
        let a = build_corpus(&spec).unwrap();
        let b = build_corpus(&spec).unwrap();
        prop_assert_eq!(&a, &b);
        for (set, stated) in [(ItemSet::Qa, a.qa_prevalence()), (ItemSet::Gs, a.gs_prevalence())] {
            let items: Vec<_> = a.iter_set(set).collect();
            let pos = items.iter().filter(|i| i.true_label).count();
            prop_assert_eq!(stated, pos as f64 / items.len() as f64);
        }
        Ok(())
    })
}

pub fn corpus_csv_round_trip() -> Result<(), String> {
    run(32, small_spec(), |spec| {
        let corpus = build_corpus(&spec).unwrap();
        let mut buf = Vec::new();
        corpus.write_csv(&mut buf).unwrap();
        prop_assert_eq!(Corpus::read_csv(buf.as_slice()).unwrap(), corpus);
        Ok(())
    })
}

pub fn judgment_csv_round_trip() -> Result<(), String> {
    run(24, (any::<u64>(), prop::bool::ANY), |(seed, belief)| {
        let mode = if belief { ResponseMode::Belief } else { ResponseMode::Binary };
        let (corpus, table) = small_table(seed, mode);
        let mut buf = Vec::new();
        table.write_csv(&mut buf).unwrap();
        let first = ingest_judgments(buf.as_slice(), &corpus).unwrap();
        prop_assert!(first.rejected.is_empty());
        prop_assert_eq!(&first.table, &table);
        let mut again = Vec::new();
        first.table.write_csv(&mut again).unwrap();
        prop_assert_eq!(again, buf);
        Ok(())
    })
}

pub fn filter_invariants() -> Result<(), String> {
    run(32, (any::<u64>(), 0usize..25), |(seed, min_trials)| {
        let (_, table) = small_table(seed, ResponseMode::Binary);
        // Repeat a random subset of rows as later responses to the same items.
        let mut rng = rng_from_seed(seed);
        let repeats: Vec<Judgment> = table
            .judgments()
            .iter()
            .filter(|_| rng.random::<f64>() < 0.3)
            .map(|j| Judgment {
                trial_index: j.trial_index + 1000,
                ..j.clone()
            })
            .collect();
        let noisy = JudgmentTable::concat([table, JudgmentTable::new(repeats).unwrap()]);
        let kept = filter_judgments(&noisy, min_trials, DedupPolicy::FirstResponse);
        let mut per_annotator: BTreeMap<&AnnotatorId, usize> = BTreeMap::new();
        let mut seen = std::collections::BTreeSet::new();
        for j in kept.judgments() {
            *per_annotator.entry(&j.annotator_id).or_default() += 1;
            prop_assert!(seen.insert((j.annotator_id.clone(), j.item_id.clone(), j.condition.key())));
            prop_assert!(j.trial_index < 1000, "a later repeat survived dedup");
        }
        prop_assert!(per_annotator.values().all(|&n| n >= min_trials));
        Ok(())
    })
}

fn mean_rates(table: &JudgmentTable) -> (f64, f64) {
    let mut miss = Vec::new();
    let mut fa = Vec::new();
    for id in table.annotator_ids() {
        let c = Confusion::from_pairs(
            table
                .for_annotator(id)
                .filter(|j| j.set == ItemSet::Qa)
                .map(|j| (j.value >= 0.5, j.true_label)),
        );
        if c.hits + c.misses > 0 {
            miss.push(c.misses as f64 / (c.hits + c.misses) as f64);
        }
        if c.false_alarms + c.correct_rejections > 0 {
            fa.push(c.false_alarms as f64 / (c.false_alarms + c.correct_rejections) as f64);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    (mean(&miss), mean(&fa))
}

pub fn prevalence_direction() -> Result<(), String> {
    let pop = population(200, 0.1);
    let mut rates = Vec::new();
    for gs_aug in [3, 0] {
        let corpus = build_corpus(&CorpusSpec::study2(gs_aug)).unwrap();
        let table = simulate_population(&pop, &contest(300, 5), &corpus, ResponseMode::Binary, 5).unwrap();
        rates.push(mean_rates(&table));
    }
    let ((miss20, fa20), (miss50, fa50)) = (rates[0], rates[1]);
    ensure(miss20 >= miss50 && fa20 <= fa50, || {
        format!("20%: miss {miss20:.3} fa {fa20:.3}; 50%: miss {miss50:.3} fa {fa50:.3}")
    })
}

pub fn zero_adaptation_ignores_feedback_stream() -> Result<(), String> {
    // The same label sequence served from GS items in one corpus and QA items
    // in another must produce identical responses when the criterion is fixed.
    let corpus = build_corpus(&CorpusSpec {
        n_qa_unique_pos: 30,
        n_qa_unique_neg: 30,
        n_gs_unique_pos: 30,
        n_gs_unique_neg: 30,
        negative_augmentation_factor_qa: 0,
        negative_augmentation_factor_gs: 0,
    })
    .unwrap();
    run(
        32,
        (any::<u64>(), prop::collection::vec((any::<bool>(), any::<bool>()), 1..30), 0.5f64..2.5, -1.0f64..1.0),
        |(seed, plan, d_prime, criterion)| {
            let profile = AnnotatorProfile {
                d_prime,
                criterion_init: criterion,
                adaptation_rate: 0.0,
                belief_slope: 3.0,
                lapse_rate: 0.1,
            };
            let pick = |set: ItemSet, label: bool, i: usize| -> ItemId {
                let p = if label { 'p' } else { 'n' };
                let prefix = set.as_str().to_ascii_lowercase();
                ItemId(format!("{prefix}-{p}{i:04}-r0"))
            };
            let mixed: Vec<ItemId> = plan
                .iter()
                .enumerate()
                .map(|(i, &(label, gs))| pick(if gs { ItemSet::Gs } else { ItemSet::Qa }, label, i))
                .collect();
            let qa_only: Vec<ItemId> = plan.iter().enumerate().map(|(i, &(label, _))| pick(ItemSet::Qa, label, i)).collect();
            let id = AnnotatorId::from("w0");
            for mode in [ResponseMode::Binary, ResponseMode::Belief] {
                let a = simulate_annotator_traced(&id, &profile, &mixed, &corpus, mode, &mut rng_from_seed(seed)).unwrap();
                let b = simulate_annotator_traced(&id, &profile, &qa_only, &corpus, mode, &mut rng_from_seed(seed)).unwrap();
                for ((ja, ta), (jb, _)) in a.iter().zip(&b) {
                    prop_assert_eq!(ja.value, jb.value);
                    prop_assert_eq!(ta.criterion, criterion);
                }
            }
            Ok(())
        },
    )
}

pub fn beliefs_monotone_in_evidence() -> Result<(), String> {
    let corpus = build_corpus(&CorpusSpec::study2(3)).unwrap();
    run(32, (any::<u64>(), 0.5f64..2.5, 0.5f64..5.0), |(seed, d_prime, slope)| {
        let profile = AnnotatorProfile {
            d_prime,
            criterion_init: 0.2,
            adaptation_rate: 0.0,
            belief_slope: slope,
            lapse_rate: 0.0,
        };
        let mut rng = rng_from_seed(seed);
        let stream = sample_trial_stream(&contest(200, seed), &corpus, &mut rng).unwrap();
        let mut trials = simulate_annotator_traced(&"w0".into(), &profile, &stream, &corpus, ResponseMode::Belief, &mut rng).unwrap();
        trials.sort_by(|a, b| a.1.evidence.total_cmp(&b.1.evidence));
        for w in trials.windows(2) {
            prop_assert!(w[0].0.value <= w[1].0.value);
        }
        Ok(())
    })
}

fn votes_strategy() -> impl Strategy<Value = Vec<bool>> {
    prop::collection::vec(any::<bool>(), 1..40)
}

pub fn majority_matches_classified_proportion() -> Result<(), String> {
    run(128, (votes_strategy(), any::<u64>(), 0usize..20, any::<bool>()), |(votes, seed, k_raw, repl)| {
        let sampling = if repl { Sampling::WithReplacement } else { Sampling::WithoutReplacement };
        let limit = if repl { 21 } else { votes.len() };
        let k = (2 * k_raw + 1).min(if limit % 2 == 1 { limit } else { limit - 1 }).max(1);
        let maj = woc_majority(&votes, k, sampling, &mut rng_from_seed(seed)).unwrap();
        let prop_ = woc_proportion(&votes, k, sampling, &mut rng_from_seed(seed)).unwrap();
        prop_assert_eq!(maj, crowdcal::classify(prop_, 0.5));
        Ok(())
    })
}

pub fn woc_permutation_invariance() -> Result<(), String> {
    let beliefs = prop::collection::vec(0.0f64..=1.0, 1..40);
    run(128, (beliefs, any::<u64>(), 1usize..40, any::<bool>()), |(pool, seed, k_raw, repl)| {
        let sampling = if repl { Sampling::WithReplacement } else { Sampling::WithoutReplacement };
        let k = if repl { k_raw } else { k_raw.min(pool.len()) };
        let mut shuffled = pool.clone();
        shuffled.shuffle(&mut rng_from_seed(seed ^ 0x5eed));
        let a = woc_mean_belief(&pool, k, sampling, &mut rng_from_seed(seed)).unwrap();
        let b = woc_mean_belief(&shuffled, k, sampling, &mut rng_from_seed(seed)).unwrap();
        prop_assert_eq!(a.to_bits(), b.to_bits());
        let votes: Vec<bool> = pool.iter().map(|&p| p >= 0.5).collect();
        let shuffled_votes: Vec<bool> = shuffled.iter().map(|&p| p >= 0.5).collect();
        let a = woc_proportion(&votes, k, sampling, &mut rng_from_seed(seed)).unwrap();
        let b = woc_proportion(&shuffled_votes, k, sampling, &mut rng_from_seed(seed)).unwrap();
        prop_assert_eq!(a, b);
        Ok(())
    })
}

pub fn full_pool_mean_belief_is_pool_mean() -> Result<(), String> {
    run(128, (prop::collection::vec(0.0f64..=1.0, 1..60), any::<u64>()), |(pool, seed)| {
        let got = woc_mean_belief(&pool, pool.len(), Sampling::WithoutReplacement, &mut rng_from_seed(seed)).unwrap();
        let mut sorted = pool.clone();
        sorted.sort_by(f64::total_cmp);
        prop_assert_eq!(got, sorted.iter().sum::<f64>() / pool.len() as f64);
        Ok(())
    })
}

pub fn replicates_ignore_row_order() -> Result<(), String> {
    run(12, any::<u64>(), |seed| {
        let (corpus, table) = small_table(seed, ResponseMode::Belief);
        let mut rows = table.judgments().to_vec();
        rows.shuffle(&mut rng_from_seed(seed));
        let shuffled = JudgmentTable::new(rows).unwrap();
        let min_pool = corpus.items().iter().map(|i| table.item_count(&i.item_id)).min().unwrap();
        let plan = ResamplingPlan {
            k: min_pool.clamp(1, 3),
            n_replicates: 5,
            sampling: Sampling::WithoutReplacement,
            seed,
        };
        for variant in [WocVariant::Bc, WocVariant::Eb] {
            let a = generate_replicates(&table, &corpus, &plan, variant);
            let b = generate_replicates(&shuffled, &corpus, &plan, variant);
            prop_assert_eq!(&a, &b);
            prop_assert_eq!(a, generate_replicates(&table, &corpus, &plan, variant));
        }
        Ok(())
    })
}

const CLAMP: ClampPolicy = ClampPolicy { epsilon: 1e-3 };

fn llo_params() -> impl Strategy<Value = LloParams> {
    (0.05f64..8.0, -4.0f64..4.0).prop_map(|(alpha, beta)| LloParams { alpha, beta })
}

pub fn llo_order_preserving() -> Result<(), String> {
    run(256, (llo_params(), 0.0f64..=1.0, 0.0f64..=1.0), |(params, a, b)| {
        let (lo, hi) = (CLAMP.apply(a.min(b)), CLAMP.apply(a.max(b)));
        prop_assume!(lo < hi);
        prop_assert!(llo_transform(lo, params, CLAMP) < llo_transform(hi, params, CLAMP));
        Ok(())
    })
}

pub fn llo_half_fixed_point() -> Result<(), String> {
    run(128, 0.01f64..50.0, |alpha| {
        prop_assert_eq!(llo_transform(0.5, LloParams { alpha, beta: 0.0 }, CLAMP), 0.5);
        Ok(())
    })
}

pub fn llo_round_trip() -> Result<(), String> {
    run(256, (llo_params(), 0.0f64..=1.0), |(params, p)| {
        let p = CLAMP.apply(p);
        let forward = llo_transform(p, params, CLAMP);
        // The inverse must see the forward value unclamped.
        // Near 0 or 1 the forward value has lost the digits needed to invert it.
        prop_assume!(forward > 1e-4 && forward < 1.0 - 1e-4);
        let back = llo_transform(forward, params.inverse(), ClampPolicy { epsilon: 1e-300 });
        prop_assert!((back - p).abs() < 1e-10, "{p} -> {forward} -> {back}");
        Ok(())
    })
}

fn synthetic_pairs(params: LloParams, n: usize, seed: u64) -> Vec<(f64, bool)> {
    let mut rng = rng_from_seed(seed);
    (0..n)
        .map(|_| {
            let p: f64 = rng.random_range(0.02..0.98);
            let y = rng.random::<f64>() < llo_transform(p, params, CLAMP);
            (p, y)
        })
        .collect()
}

pub fn llo_fit_optimality() -> Result<(), String> {
    let opts = FitOptions::default();
    run(32, (llo_params(), any::<u64>(), 50usize..800), |(truth, seed, n)| {
        let pairs = synthetic_pairs(truth, n, seed);
        let cal = CalibrationSet {
            pairs: pairs.clone(),
            source: CalibrationSource::IndividualGs,
        };
        let Ok(fit) = fit_llo_mle(&cal, CLAMP, opts) else {
            // Small draws can be single-class, separated or anti-calibrated.
            return Ok(());
        };
        prop_assume!(!fit.diagnostics.separated);
        let z: Vec<f64> = pairs.iter().map(|&(p, _)| CLAMP.log_odds(p)).collect();
        let y: Vec<bool> = pairs.iter().map(|&(_, y)| y).collect();
        let g = llo_gradient(&z, &y, fit.params);
        prop_assert!(g[0].abs().max(g[1].abs()) / n as f64 <= opts.tol);
        let best = llo_loglik(&z, &y, fit.params);
        let step = 10.0 * opts.tol;
        for (da, db) in [(step, 0.0), (-step, 0.0), (0.0, step), (0.0, -step)] {
            let moved = LloParams {
                alpha: fit.params.alpha + da,
                beta: fit.params.beta + db,
            };
            prop_assert!(llo_loglik(&z, &y, moved) <= best + 1e-12 * best.abs());
        }
        Ok(())
    })
}

pub fn llo_gradient_matches_finite_differences() -> Result<(), String> {
    run(20, (llo_params(), any::<u64>(), 10usize..400), |(params, seed, n)| {
        let pairs = synthetic_pairs(LloParams { alpha: 1.3, beta: -0.4 }, n, seed);
        let z: Vec<f64> = pairs.iter().map(|&(p, _)| CLAMP.log_odds(p)).collect();
        let y: Vec<bool> = pairs.iter().map(|&(_, y)| y).collect();
        let g = llo_gradient(&z, &y, params);
        let h = 1e-6;
        let at = |a: f64, b: f64| llo_loglik(&z, &y, LloParams { alpha: a, beta: b });
        let fd_a = (at(params.alpha + h, params.beta) - at(params.alpha - h, params.beta)) / (2.0 * h);
        let fd_b = (at(params.alpha, params.beta + h) - at(params.alpha, params.beta - h)) / (2.0 * h);
        let scale = n as f64;
        prop_assert!(rel_err(g[0] / scale, fd_a / scale) < 1e-6, "alpha: {} vs {}", g[0], fd_a);
        prop_assert!(rel_err(g[1] / scale, fd_b / scale) < 1e-6, "beta: {} vs {}", g[1], fd_b);
        Ok(())
    })
}

pub fn majority_grid() -> Vec<(f64, usize)> {
    let mut grid = Vec::new();
    for i in 1..=19 {
        if i == 10 {
            continue;
        }
        for n in (1..=21).step_by(2) {
            grid.push((i as f64 * 0.05, n));
        }
    }
    grid
}

pub fn majority_exact_monotone_in_crowd_size() -> Result<(), String> {
    for (p, n) in majority_grid() {
        if n == 21 {
            continue;
        }
        let (a, b) = (majority_accuracy_exact(p, n).unwrap(), majority_accuracy_exact(p, n + 2).unwrap());
        let ok = if p > 0.5 { b > a } else { b < a };
        ensure(ok, || format!("p {p}, n {n}: {a} then {b}"))?;
    }
    Ok(())
}

/// |MC - exact| / SE for every grid point.
pub fn majority_monte_carlo_z(draws: u64, seed: u64) -> Vec<((f64, usize), f64)> {
    majority_grid()
        .into_iter()
        .map(|(p, n)| {
            let exact = majority_accuracy_exact(p, n).unwrap();
            let mut rng = derived_rng(seed, &[((p * 100.0).round() as u64).into(), n.into()]);
            let dist = Binomial::new(n as u64, p).unwrap();
            let wins = (0..draws).filter(|_| dist.sample(&mut rng) as usize > n / 2).count();
            let se = (exact * (1.0 - exact) / draws as f64).sqrt();
            let gap = (wins as f64 / draws as f64 - exact).abs();
            let z = if gap == 0.0 { 0.0 } else { gap / se };
            ((p, n), z)
        })
        .collect()
}

pub fn majority_exact_matches_monte_carlo() -> Result<(), String> {
    // One 3 SE check per grid point would flag about half a point per run by
    // chance, so the threshold keeps the family-wise rate of a single check.
    let zs = majority_monte_carlo_z(100_000, 0);
    let normal = Normal::standard();
    let single = 2.0 * (1.0 - normal.cdf(3.0));
    let per_point = 1.0 - (1.0 - single).powf(1.0 / zs.len() as f64);
    let threshold = normal.inverse_cdf(1.0 - per_point / 2.0);
    for ((p, n), z) in zs {
        ensure(z <= threshold, || format!("p {p}, n {n} off by {z:.2} SE (limit {threshold:.2})"))?;
    }
    Ok(())
}

pub fn ece_zero_for_calibrated_bins() -> Result<(), String> {
    // Every occupied bin holds m copies of j/m with exactly j positives.
    let bins = prop::collection::vec((1usize..12, 0usize..12), 1..8);
    run(128, (bins, 1usize..20), |(spec, n_bins)| {
        let mut pairs = Vec::new();
        for (m, j) in spec {
            let j = j.min(m);
            let v = j as f64 / m as f64;
            pairs.extend((0..m).map(|i| (v, i < j)));
        }
        // Distinct values that share a bin would mix their fractions.
        let curve = calibration_curve_pairs(&pairs, n_bins).unwrap();
        let mixed = curve.bins.iter().enumerate().any(|(b, _)| {
            let mut vals: Vec<f64> = pairs
                .iter()
                .filter(|(p, _)| crowdcal::metrics::bin_index(*p, n_bins) == b)
                .map(|(p, _)| *p)
                .collect();
            vals.dedup();
            vals.sort_by(f64::total_cmp);
            vals.dedup();
            vals.len() > 1
        });
        prop_assume!(!mixed);
        prop_assert_eq!(ece_pairs(&pairs, EceConfig { n_bins }).unwrap(), 0.0);
        Ok(())
    })
}

pub fn rates_and_ece_ignore_order() -> Result<(), String> {
    let pairs = prop::collection::vec((0.0f64..=1.0, any::<bool>()), 1..200);
    run(128, (pairs, any::<u64>(), 1usize..15), |(pairs, seed, n_bins)| {
        let mut shuffled = pairs.clone();
        shuffled.shuffle(&mut rng_from_seed(seed));
        let cfg = EceConfig { n_bins };
        prop_assert_eq!(ece_pairs(&pairs, cfg).unwrap().to_bits(), ece_pairs(&shuffled, cfg).unwrap().to_bits());
        let hard = |v: &[(f64, bool)]| Confusion::from_pairs(v.iter().map(|&(p, y)| (p >= 0.5, y)));
        prop_assert_eq!(hard(&pairs), hard(&shuffled));
        Ok(())
    })
}

pub fn curve_csv_reproduces_ece() -> Result<(), String> {
    let pairs = prop::collection::vec((0.0f64..=1.0, any::<bool>()), 1..300);
    run(128, pairs, |pairs| {
        let curve = calibration_curve_pairs(&pairs, 10).unwrap();
        let mut buf = Vec::new();
        write_curve_csv(&mut buf, &[("EB", &curve)]).unwrap();
        let back = read_curve_csv(buf.as_slice()).unwrap();
        let recomputed = back["EB"].expected_calibration_error();
        prop_assert_eq!(recomputed.to_bits(), ece_pairs(&pairs, EceConfig { n_bins: 10 }).unwrap().to_bits());
        Ok(())
    })
}

fn learner_batch() -> impl Strategy<Value = (Vec<f64>, f64, Vec<(Vec<f64>, f64)>, f64)> {
    let dim = 3;
    (
        prop::collection::vec(-3.0f64..3.0, dim),
        -2.0f64..2.0,
        prop::collection::vec((prop::collection::vec(-4.0f64..4.0, dim), 0.0f64..=1.0), 1..40),
        0.0f64..0.1,
    )
}

pub fn soft_label_gradient_matches_finite_differences() -> Result<(), String> {
    run(64, learner_batch(), |(weights, bias, batch, l2)| {
        let model = LinearModel { weights, bias };
        let xs: Vec<&[f64]> = batch.iter().map(|(x, _)| x.as_slice()).collect();
        let qs: Vec<f64> = batch.iter().map(|(_, q)| *q).collect();
        let (gw, gb) = soft_label_gradient(&model, &xs, &qs, l2);
        let h = 1e-6;
        for i in 0..=model.weights.len() {
            let shifted = |d: f64| {
                let mut m = model.clone();
                if i < m.weights.len() {
                    m.weights[i] += d;
                } else {
                    m.bias += d;
                }
                soft_label_objective(&m, &xs, &qs, l2)
            };
            let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
            let analytic = if i < gw.len() { gw[i] } else { gb };
            prop_assert!(rel_err(analytic, fd) < 1e-6, "coordinate {i}: {analytic} vs {fd}");
        }
        Ok(())
    })
}

fn qa_features() -> (Corpus, SyntheticFeatures, BTreeMap<ItemId, f64>) {
    let corpus = build_corpus(&CorpusSpec::study2(0)).unwrap();
    let features = SyntheticFeatures::generate(&corpus, ItemSet::Qa, &FeatureSpec::default());
    let labels = corpus
        .truth(ItemSet::Qa)
        .into_iter()
        .map(|(id, y)| (id, if y { 0.8 } else { 0.1 }))
        .collect();
    (corpus, features, labels)
}

pub fn loss_non_increasing_at_small_rate() -> Result<(), String> {
    let (_, features, labels) = qa_features();
    let train: Vec<ItemId> = labels.keys().cloned().collect();
    // Mini-batch noise can lift the epoch loss slightly, so this uses full batches.
    run(16, (any::<u64>(), 1e-5f64..1e-2), |(seed, l2_strength)| {
        let cfg = LearnerConfig {
            epochs: 20,
            learning_rate: 0.05,
            l2_strength,
            batch_size: train.len(),
            seed,
        };
        let trained = train_soft_label_classifier(&features, &labels, &train, &cfg).unwrap();
        for w in trained.loss_history.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-12, "loss rose: {:?}", trained.loss_history);
        }
        Ok(())
    })
}

pub fn folds_keep_sources_together() -> Result<(), String> {
    let spec = (5usize..40, 5usize..40, 0usize..4, any::<u64>(), 2usize..6, 1usize..4);
    run(48, spec, |(pos, neg, aug, seed, k, repeats)| {
        let corpus = build_corpus(&CorpusSpec {
            n_qa_unique_pos: pos,
            n_qa_unique_neg: neg,
            n_gs_unique_pos: 1,
            n_gs_unique_neg: 1,
            negative_augmentation_factor_qa: aug,
            negative_augmentation_factor_gs: 0,
        })
        .unwrap();
        let Ok(plan) = make_folds(&corpus, ItemSet::Qa, k, repeats, seed) else {
            return Ok(());
        };
        let source_of: BTreeMap<&ItemId, _> = corpus.items().iter().map(|i| (&i.item_id, &i.source_id)).collect();
        let mut tested: BTreeMap<_, usize> = BTreeMap::new();
        let prevalence = corpus.qa_prevalence();
        for split in &plan.splits {
            prop_assert!(split.train_sources.is_disjoint(&split.test_sources));
            for id in &split.train {
                prop_assert!(split.train_sources.contains(source_of[id]));
            }
            for id in &split.test {
                prop_assert!(split.test_sources.contains(source_of[id]));
            }
            for s in &split.test_sources {
                *tested.entry(s.clone()).or_default() += 1;
            }
            for ids in [&split.train, &split.test] {
                let pos = ids.iter().filter(|id| corpus.get(id).unwrap().true_label).count();
                prop_assert!((pos as f64 / ids.len() as f64 - prevalence).abs() <= STRATIFICATION_TOLERANCE);
            }
        }
        prop_assert_eq!(tested.len(), corpus.sources(ItemSet::Qa).len());
        prop_assert!(tested.values().all(|&n| n == repeats));
        Ok(())
    })
}

pub fn training_deterministic_by_seed() -> Result<(), String> {
    let (_, features, labels) = qa_features();
    let train: Vec<ItemId> = labels.keys().cloned().collect();
    run(8, any::<u64>(), |seed| {
        let cfg = LearnerConfig {
            epochs: 3,
            learning_rate: 0.2,
            l2_strength: 1e-3,
            batch_size: 16,
            seed,
        };
        let a = train_soft_label_classifier(&features, &labels, &train, &cfg).unwrap();
        let b = train_soft_label_classifier(&features, &labels, &train, &cfg).unwrap();
        prop_assert_eq!(a, b);
        Ok(())
    })
}

fn with_threads<T: Send>(n: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap().install(f)
}

pub fn simulation_independent_of_threads() -> Result<(), String> {
    let corpus = build_corpus(&CorpusSpec {
        n_qa_unique_pos: 10,
        n_qa_unique_neg: 10,
        n_gs_unique_pos: 10,
        n_gs_unique_neg: 10,
        negative_augmentation_factor_qa: 0,
        negative_augmentation_factor_gs: 0,
    })
    .unwrap();
    let pop = population(40, 0.1);
    let go = || simulate_population(&pop, &contest(30, 9), &corpus, ResponseMode::Belief, 9).unwrap();
    let one = with_threads(1, go);
    let many = with_threads(4, go);
    ensure(one == many, || "judgments differ between 1 and 4 threads".into())?;
    let mut rows = one.judgments().to_vec();
    rows.reverse();
    let plan = ResamplingPlan {
        k: 3,
        n_replicates: 4,
        sampling: Sampling::WithoutReplacement,
        seed: 1,
    };
    let a = with_threads(1, || generate_replicates(&one, &corpus, &plan, WocVariant::Eb).unwrap());
    let b = with_threads(4, || generate_replicates(&JudgmentTable::new(rows).unwrap(), &corpus, &plan, WocVariant::Eb).unwrap());
    ensure(a == b, || "replicates differ between schedules".into())
}

pub fn pipeline_independent_of_threads() -> Result<(), String> {
    let (corpus, features, labels) = qa_features();
    let datasets: Vec<_> = (0..3)
        .map(|r| crowdcal::WocDataset {
            replicate_index: r,
            variant: WocVariant::Eb,
            labels: labels.iter().map(|(id, &q)| (id.clone(), (q + 0.05 * r as f64).min(1.0))).collect(),
            plan: ResamplingPlan {
                k: 9,
                n_replicates: 3,
                sampling: Sampling::WithoutReplacement,
                seed: 0,
            },
            gs_prevalence: 0.2,
        })
        .collect();
    let sets = [LabelSet {
        variant: WocVariant::Eb,
        gs_prevalence: 0.2,
        datasets,
    }];
    let spec = PipelineSpec {
        k_folds: 5,
        search_repeats: 1,
        eval_repeats: 2,
        grid: crowdcal::downstream::config_grid(&[2, 4], &[0.1], &[1e-3], &[32]),
        pairing: Pairing::Crossed,
        ece_bins: 10,
        seed: 4,
    };
    let go = || pipeline_experiment(&[(WocVariant::Eb, 0.2)], &sets, &corpus, &features, &spec).unwrap();
    let one = with_threads(1, go);
    let many = with_threads(4, go);
    ensure(one == many, || "pipeline results depend on thread count".into())?;
    ensure(one.jobs.len() == 30, || format!("expected 30 crossed jobs, got {}", one.jobs.len()))
}

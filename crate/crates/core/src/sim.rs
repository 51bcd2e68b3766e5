//! Signal-detection annotators with feedback-driven criterion drift.
//!
//! Each simulated worker observes evidence `x ~ N(±d'/2, 1)` for every item
//! and compares it with a decision criterion `c`. Binary workers answer
//! `x > c`; belief workers report `logistic(slope * (x - c))`. Gold-standard
//! trials reveal the truth, and the worker nudges `c` up after a false alarm
//! and down after a miss. Under rare-positive feedback false alarms dominate,
//! `c` drifts upward and misses on the unlabelled stream rise.

use std::collections::BTreeMap;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregation::classify;
use crate::corpus::{Corpus, ItemId, ItemSet, SourceId};
use crate::judgments::{AnnotatorId, Condition, Judgment, JudgmentTable, ResponseMode};
use crate::math::logistic;
use crate::seed::{derive_seed, derived_rng, rng_from_seed, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorProfile {
    /// Separation of the class-conditional evidence means.
    pub d_prime: f64,
    pub criterion_init: f64,
    /// Criterion step taken after each erroneous gold-standard trial.
    pub adaptation_rate: f64,
    pub belief_slope: f64,
    /// Probability that a trial's response is replaced by a uniform draw.
    pub lapse_rate: f64,
}

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("invalid annotator profile: {0}")]
    InvalidProfile(String),
    #[error("invalid contest config: {0}")]
    InvalidContest(String),
    #[error("corpus exhausted at trial {trial_index}: every source has been shown")]
    Exhausted { trial_index: usize },
    #[error("stream item {0} is not in the corpus")]
    UnknownItem(ItemId),
}

impl AnnotatorProfile {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |msg: &str| Err(SimError::InvalidProfile(msg.to_owned()));
        if !(self.d_prime >= 0.0) {
            return bad("d_prime must be >= 0");
        }
        if !self.criterion_init.is_finite() {
            return bad("criterion_init must be finite");
        }
        if !(0.0..=1.0).contains(&self.adaptation_rate) {
            return bad("adaptation_rate must lie in [0, 1]");
        }
        if !(self.belief_slope > 0.0) {
            return bad("belief_slope must be > 0");
        }
        if !(0.0..=1.0).contains(&self.lapse_rate) {
            return bad("lapse_rate must lie in [0, 1]");
        }
        Ok(())
    }
}

/// How gold-standard performance is scored on the leaderboard.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scoring {
    Accuracy,
    QuadraticBelief,
}

impl Scoring {
    pub fn for_mode(mode: ResponseMode) -> Self {
        match mode {
            ResponseMode::Binary => Scoring::Accuracy,
            ResponseMode::Belief => Scoring::QuadraticBelief,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContestConfig {
    pub n_trials: usize,
    /// Probability that a trial is drawn from the gold-standard set.
    pub gs_fraction: f64,
    pub scoring: Scoring,
    pub seed: u64,
}

impl ContestConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.n_trials == 0 {
            return Err(SimError::InvalidContest("n_trials must be >= 1".into()));
        }
        if !(self.gs_fraction > 0.0 && self.gs_fraction < 1.0) {
            return Err(SimError::InvalidContest(
                "gs_fraction must lie strictly between 0 and 1".into(),
            ));
        }
        Ok(())
    }
}

/// Items of one set that can still be shown, removable a source at a time.
struct AvailablePool {
    items: Vec<usize>,
    position: Vec<Option<usize>>,
    by_source: BTreeMap<SourceId, Vec<usize>>,
}

impl AvailablePool {
    fn new(corpus: &Corpus, set: ItemSet) -> Self {
        let all = corpus.items();
        let mut items = Vec::new();
        let mut position = vec![None; all.len()];
        let mut by_source: BTreeMap<SourceId, Vec<usize>> = BTreeMap::new();
        for (i, item) in all.iter().enumerate() {
            if item.set == set {
                position[i] = Some(items.len());
                items.push(i);
                by_source.entry(item.source_id.clone()).or_default().push(i);
            }
        }
        AvailablePool {
            items,
            position,
            by_source,
        }
    }

    fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Draw an item uniformly and retire every item sharing its source.
    fn take(&mut self, corpus: &Corpus, rng: &mut Rng) -> usize {
        let chosen = self.items[rng.random_range(0..self.items.len())];
        let source = &corpus.items()[chosen].source_id;
        for &member in &self.by_source[source] {
            if let Some(pos) = self.position[member].take() {
                self.items.swap_remove(pos);
                if let Some(&moved) = self.items.get(pos) {
                    self.position[moved] = Some(pos);
                }
            }
        }
        chosen
    }
}

/// Draw the ordered items one annotator sees in a contest.
///
/// Each trial comes from the GS set with probability `gs_fraction`, else from
/// QA, uniformly over items whose source has not been shown yet. When the
/// chosen set has run dry the other set is used; the stream fails only when
/// both are exhausted.
pub fn sample_trial_stream(
    config: &ContestConfig,
    corpus: &Corpus,
    rng: &mut Rng,
) -> Result<Vec<ItemId>, SimError> {
    config.validate()?;
    let mut gs = AvailablePool::new(corpus, ItemSet::Gs);
    let mut qa = AvailablePool::new(corpus, ItemSet::Qa);
    let mut stream = Vec::with_capacity(config.n_trials);
    for trial_index in 0..config.n_trials {
        let want_gs = rng.random::<f64>() < config.gs_fraction;
        let pool = match (want_gs, gs.is_empty(), qa.is_empty()) {
            (_, true, true) => return Err(SimError::Exhausted { trial_index }),
            (true, false, _) | (false, false, true) => &mut gs,
            _ => &mut qa,
        };
        let idx = pool.take(corpus, rng);
        stream.push(corpus.items()[idx].item_id.clone());
    }
    Ok(stream)
}

/// Per-trial internals exposed for inspection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrialTrace {
    pub evidence: f64,
    /// Criterion in force when the response was made.
    pub criterion: f64,
    pub lapsed: bool,
}

/// Simulate one annotator on a stream, returning judgments and traces.
///
/// Every trial consumes the same number of random draws whatever the outcome,
/// so two runs with equal seeds stay aligned trial by trial.
pub fn simulate_annotator_traced(
    annotator_id: &AnnotatorId,
    profile: &AnnotatorProfile,
    stream: &[ItemId],
    corpus: &Corpus,
    mode: ResponseMode,
    rng: &mut Rng,
) -> Result<Vec<(Judgment, TrialTrace)>, SimError> {
    profile.validate()?;
    let condition = Condition {
        gs_prevalence: corpus.gs_prevalence(),
        response_mode: mode,
    };
    let mut criterion = profile.criterion_init;
    let mut out = Vec::with_capacity(stream.len());
    for (trial_index, item_id) in stream.iter().enumerate() {
        let item = corpus
            .get(item_id)
            .ok_or_else(|| SimError::UnknownItem(item_id.clone()))?;
        let lapse_draw: f64 = rng.random();
        let noise: f64 = StandardNormal.sample(rng);
        let uniform: f64 = rng.random();

        let mean = if item.true_label { 0.5 } else { -0.5 } * profile.d_prime;
        let evidence = mean + noise;
        let lapsed = lapse_draw < profile.lapse_rate;
        let value = match (mode, lapsed) {
            (ResponseMode::Binary, false) => (evidence > criterion) as u8 as f64,
            (ResponseMode::Binary, true) => (uniform < 0.5) as u8 as f64,
            (ResponseMode::Belief, false) => logistic(profile.belief_slope * (evidence - criterion)),
            (ResponseMode::Belief, true) => uniform,
        };
        let trace = TrialTrace {
            evidence,
            criterion,
            lapsed,
        };
        if item.set == ItemSet::Gs {
            let said_positive = classify(value, 0.5);
            match (said_positive, item.true_label) {
                (true, false) => criterion += profile.adaptation_rate,
                (false, true) => criterion -= profile.adaptation_rate,
                _ => {}
            }
        }
        out.push((
            Judgment {
                annotator_id: annotator_id.clone(),
                item_id: item_id.clone(),
                value,
                trial_index: trial_index as u32,
                set: item.set,
                true_label: item.true_label,
                condition,
            },
            trace,
        ));
    }
    Ok(out)
}

pub fn simulate_annotator(
    annotator_id: &AnnotatorId,
    profile: &AnnotatorProfile,
    stream: &[ItemId],
    corpus: &Corpus,
    mode: ResponseMode,
    rng: &mut Rng,
) -> Result<Vec<Judgment>, SimError> {
    Ok(
        simulate_annotator_traced(annotator_id, profile, stream, corpus, mode, rng)?
            .into_iter()
            .map(|(j, _)| j)
            .collect(),
    )
}

/// `1 - (outcome - belief)^2`.
pub fn score_quadratic(belief: f64, outcome: bool) -> f64 {
    let o = if outcome { 1.0 } else { 0.0 };
    1.0 - (o - belief) * (o - belief)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeaderboardEntry {
    pub annotator_id: AnnotatorId,
    pub performance: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Leaderboard {
    pub ranking: Vec<LeaderboardEntry>,
    /// Annotators left off the board because they saw no GS items.
    pub excluded: Vec<AnnotatorId>,
}

/// Rank annotators by gold-standard accuracy (binary) or mean quadratic
/// score (belief), best first, ties by id.
pub fn leaderboard(table: &JudgmentTable, mode: ResponseMode) -> Leaderboard {
    let mut board = Leaderboard::default();
    for annotator in table.annotator_ids() {
        let scores: Vec<f64> = table
            .for_annotator(annotator)
            .filter(|j| j.feedback_shown())
            .map(|j| match mode {
                ResponseMode::Binary => (classify(j.value, 0.5) == j.true_label) as u8 as f64,
                ResponseMode::Belief => score_quadratic(j.value, j.true_label),
            })
            .collect();
        if scores.is_empty() {
            log::warn!("annotator {annotator} has no gold-standard judgments; not ranked");
            board.excluded.push(annotator.clone());
            continue;
        }
        board.ranking.push(LeaderboardEntry {
            annotator_id: annotator.clone(),
            performance: scores.iter().sum::<f64>() / scores.len() as f64,
        });
    }
    board.ranking.sort_by(|a, b| {
        b.performance
            .total_cmp(&a.performance)
            .then_with(|| a.annotator_id.cmp(&b.annotator_id))
    });
    board
}

/// Distribution the simulated workforce is drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PopulationSpec {
    pub n_annotators: usize,
    /// d' is uniform on `[lo, hi]`.
    pub d_prime: (f64, f64),
    pub criterion_init: f64,
    pub adaptation_rate: f64,
    /// Belief slope is uniform on `[lo, hi]`.
    pub belief_slope: (f64, f64),
    pub lapse_rate: f64,
}

impl PopulationSpec {
    pub fn annotator_id(index: usize) -> AnnotatorId {
        AnnotatorId(format!("w{index:04}"))
    }

    /// Profile of annotator `index`; depends only on the master seed and the
    /// annotator, so every condition sees the same workforce.
    pub fn profile(&self, master_seed: u64, annotator: &AnnotatorId) -> AnnotatorProfile {
        let mut rng = derived_rng(master_seed, &["profile".into(), annotator.0.as_str().into()]);
        let mut uniform = |(lo, hi): (f64, f64)| {
            let u: f64 = rng.random();
            lo + (hi - lo) * u
        };
        AnnotatorProfile {
            d_prime: uniform(self.d_prime),
            criterion_init: self.criterion_init,
            adaptation_rate: self.adaptation_rate,
            belief_slope: uniform(self.belief_slope),
            lapse_rate: self.lapse_rate,
        }
    }
}

/// Simulate a whole workforce in one condition.
///
/// Annotators run in parallel; each one's stream and responses come from a
/// generator seeded by `(contest.seed, condition tag, annotator)`, so the
/// output does not depend on scheduling.
pub fn simulate_population(
    population: &PopulationSpec,
    contest: &ContestConfig,
    corpus: &Corpus,
    mode: ResponseMode,
    master_seed: u64,
) -> Result<JudgmentTable, SimError> {
    contest.validate()?;
    let tag = format!("{}@{}", mode.as_str(), corpus.gs_prevalence());
    let per_annotator: Result<Vec<Vec<Judgment>>, SimError> = (0..population.n_annotators)
        .into_par_iter()
        .map(|i| {
            let id = PopulationSpec::annotator_id(i);
            let profile = population.profile(master_seed, &id);
            let seed = derive_seed(contest.seed, &[tag.as_str().into(), id.0.as_str().into()]);
            let mut rng = rng_from_seed(seed);
            let stream = sample_trial_stream(contest, corpus, &mut rng)?;
            simulate_annotator(&id, &profile, &stream, corpus, mode, &mut rng)
        })
        .collect();
    let judgments: Vec<Judgment> = per_annotator?.into_iter().flatten().collect();
    Ok(JudgmentTable::new(judgments).expect("simulated values are in range"))
}

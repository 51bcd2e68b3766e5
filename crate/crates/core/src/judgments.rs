//! Annotator judgments, the indexed judgment table and its CSV form.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, ItemId, ItemSet};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AnnotatorId(pub String);

impl fmt::Display for AnnotatorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for AnnotatorId {
    fn from(s: &str) -> Self {
        AnnotatorId(s.to_owned())
    }
}

/// How an annotator answers: a yes/no choice or a slider probability.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResponseMode {
    Binary,
    Belief,
}

impl ResponseMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ResponseMode::Binary => "binary",
            ResponseMode::Belief => "belief",
        }
    }
}

impl fmt::Display for ResponseMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ResponseMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "binary" => Ok(ResponseMode::Binary),
            "belief" => Ok(ResponseMode::Belief),
            other => Err(format!(
                "unknown response_mode {other:?}, expected binary or belief"
            )),
        }
    }
}

/// Experimental condition a judgment was collected under.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub gs_prevalence: f64,
    pub response_mode: ResponseMode,
}

impl Condition {
    /// Hashable identity of the condition.
    pub fn key(&self) -> (u64, ResponseMode) {
        (self.gs_prevalence.to_bits(), self.response_mode)
    }
}

/// One response by one annotator to one item.
#[derive(Debug, Clone, PartialEq)]
pub struct Judgment {
    pub annotator_id: AnnotatorId,
    pub item_id: ItemId,
    /// 0 or 1 for binary responses, a probability for beliefs.
    pub value: f64,
    pub trial_index: u32,
    pub set: ItemSet,
    pub true_label: bool,
    pub condition: Condition,
}

impl Judgment {
    pub fn response_mode(&self) -> ResponseMode {
        self.condition.response_mode
    }

    /// Feedback is shown exactly on gold-standard trials.
    pub fn feedback_shown(&self) -> bool {
        self.set == ItemSet::Gs
    }

    pub fn validate(&self) -> Result<(), JudgmentError> {
        match self.response_mode() {
            ResponseMode::Binary if self.value != 0.0 && self.value != 1.0 => {
                Err(JudgmentError::BinaryValue(self.value))
            }
            ResponseMode::Belief if !(0.0..=1.0).contains(&self.value) => {
                Err(JudgmentError::BeliefOutOfRange(self.value))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum JudgmentError {
    #[error("belief {0} outside [0, 1]")]
    BeliefOutOfRange(f64),
    #[error("binary value must be 0 or 1, got {0}")]
    BinaryValue(f64),
    #[error("unknown item {0}")]
    UnknownItem(ItemId),
    #[error("item {item}: row says {field}={row}, corpus says {corpus}")]
    CorpusMismatch {
        item: ItemId,
        field: &'static str,
        row: String,
        corpus: String,
    },
    #[error("duplicate trial ({annotator}, {item}, {trial_index})")]
    DuplicateTrial {
        annotator: AnnotatorId,
        item: ItemId,
        trial_index: u32,
    },
    #[error("{0}")]
    Parse(String),
}

/// A CSV row that was not admitted into the table.
#[derive(Debug, Clone, PartialEq)]
pub struct RejectedRow {
    pub line: u64,
    pub error: JudgmentError,
}

/// Judgments with lookup by item and by annotator.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct JudgmentTable {
    judgments: Vec<Judgment>,
    by_item: BTreeMap<ItemId, Vec<usize>>,
    by_annotator: BTreeMap<AnnotatorId, Vec<usize>>,
}

impl JudgmentTable {
    pub fn new(judgments: Vec<Judgment>) -> Result<Self, JudgmentError> {
        for j in &judgments {
            j.validate()?;
        }
        Ok(Self::index(judgments))
    }

    fn index(judgments: Vec<Judgment>) -> Self {
        let mut by_item: BTreeMap<ItemId, Vec<usize>> = BTreeMap::new();
        let mut by_annotator: BTreeMap<AnnotatorId, Vec<usize>> = BTreeMap::new();
        for (i, j) in judgments.iter().enumerate() {
            by_item.entry(j.item_id.clone()).or_default().push(i);
            by_annotator.entry(j.annotator_id.clone()).or_default().push(i);
        }
        JudgmentTable {
            judgments,
            by_item,
            by_annotator,
        }
    }

    pub fn judgments(&self) -> &[Judgment] {
        &self.judgments
    }

    pub fn into_judgments(self) -> Vec<Judgment> {
        self.judgments
    }

    pub fn len(&self) -> usize {
        self.judgments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.judgments.is_empty()
    }

    pub fn for_item<'a>(&'a self, id: &ItemId) -> impl Iterator<Item = &'a Judgment> + 'a {
        self.by_item
            .get(id)
            .into_iter()
            .flatten()
            .map(|&i| &self.judgments[i])
    }

    pub fn for_annotator<'a>(
        &'a self,
        id: &AnnotatorId,
    ) -> impl Iterator<Item = &'a Judgment> + 'a {
        self.by_annotator
            .get(id)
            .into_iter()
            .flatten()
            .map(|&i| &self.judgments[i])
    }

    pub fn item_ids(&self) -> impl Iterator<Item = &ItemId> {
        self.by_item.keys()
    }

    pub fn annotator_ids(&self) -> impl Iterator<Item = &AnnotatorId> {
        self.by_annotator.keys()
    }

    pub fn item_count(&self, id: &ItemId) -> usize {
        self.by_item.get(id).map_or(0, Vec::len)
    }

    /// Index sizes, for checking that both indices cover the flat list.
    pub fn index_cardinalities(&self) -> (usize, usize) {
        (
            self.by_item.values().map(Vec::len).sum(),
            self.by_annotator.values().map(Vec::len).sum(),
        )
    }

    /// Keep the judgments matching `keep`, preserving order.
    pub fn retain(&self, mut keep: impl FnMut(&Judgment) -> bool) -> JudgmentTable {
        Self::index(self.judgments.iter().filter(|j| keep(j)).cloned().collect())
    }

    /// Concatenate tables (e.g. several simulated annotators).
    pub fn concat(tables: impl IntoIterator<Item = JudgmentTable>) -> JudgmentTable {
        Self::index(
            tables
                .into_iter()
                .flat_map(JudgmentTable::into_judgments)
                .collect(),
        )
    }

    /// Emit the judgment CSV.
    pub fn write_csv<W: Write>(&self, writer: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        out.write_record(CSV_HEADER)?;
        for j in &self.judgments {
            out.write_record([
                j.annotator_id.0.clone(),
                j.item_id.0.clone(),
                j.set.as_str().to_owned(),
                (j.true_label as u8).to_string(),
                j.response_mode().as_str().to_owned(),
                j.value.to_string(),
                j.trial_index.to_string(),
                j.condition.gs_prevalence.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

pub const CSV_HEADER: [&str; 8] = [
    "annotator_id",
    "item_id",
    "set",
    "true_label",
    "response_mode",
    "value",
    "trial_index",
    "gs_prevalence",
];

/// Result of reading a judgment CSV: admitted rows plus rejections.
#[derive(Debug, Clone, Default)]
pub struct IngestReport {
    pub table: JudgmentTable,
    pub rejected: Vec<RejectedRow>,
}

#[derive(Debug, Deserialize)]
struct CsvRow {
    annotator_id: String,
    item_id: String,
    set: String,
    true_label: String,
    response_mode: String,
    value: f64,
    trial_index: u32,
    gs_prevalence: f64,
}

/// Read judgment rows, checking each against `corpus`.
///
/// Malformed or inconsistent rows are reported by line number and skipped;
/// only an unreadable header is fatal.
pub fn ingest_judgments<R: Read>(reader: R, corpus: &Corpus) -> csv::Result<IngestReport> {
    let mut rdr = csv::Reader::from_reader(reader);
    rdr.headers()?;
    let mut judgments = Vec::new();
    let mut rejected = Vec::new();
    let mut seen: BTreeSet<(AnnotatorId, ItemId, u32)> = BTreeSet::new();
    for (i, row) in rdr.deserialize::<CsvRow>().enumerate() {
        let line = i as u64 + 2;
        let parsed = row
            .map_err(|e| JudgmentError::Parse(e.to_string()))
            .and_then(|row| parse_row(row, corpus));
        let judgment = match parsed {
            Ok(j) => j,
            Err(error) => {
                rejected.push(RejectedRow { line, error });
                continue;
            }
        };
        let key = (
            judgment.annotator_id.clone(),
            judgment.item_id.clone(),
            judgment.trial_index,
        );
        if !seen.insert(key) {
            rejected.push(RejectedRow {
                line,
                error: JudgmentError::DuplicateTrial {
                    annotator: judgment.annotator_id,
                    item: judgment.item_id,
                    trial_index: judgment.trial_index,
                },
            });
            continue;
        }
        judgments.push(judgment);
    }
    Ok(IngestReport {
        table: JudgmentTable::index(judgments),
        rejected,
    })
}

fn parse_row(row: CsvRow, corpus: &Corpus) -> Result<Judgment, JudgmentError> {
    let set: ItemSet = row.set.parse().map_err(JudgmentError::Parse)?;
    let response_mode: ResponseMode = row.response_mode.parse().map_err(JudgmentError::Parse)?;
    let true_label = match row.true_label.as_str() {
        "0" => false,
        "1" => true,
        other => {
            return Err(JudgmentError::Parse(format!(
                "true_label must be 0 or 1, got {other:?}"
            )))
        }
    };
    let item_id = ItemId(row.item_id);
    let item = corpus
        .get(&item_id)
        .ok_or_else(|| JudgmentError::UnknownItem(item_id.clone()))?;
    if item.set != set {
        return Err(JudgmentError::CorpusMismatch {
            item: item_id,
            field: "set",
            row: set.to_string(),
            corpus: item.set.to_string(),
        });
    }
    if item.true_label != true_label {
        return Err(JudgmentError::CorpusMismatch {
            item: item_id,
            field: "true_label",
            row: (true_label as u8).to_string(),
            corpus: (item.true_label as u8).to_string(),
        });
    }
    let judgment = Judgment {
        annotator_id: AnnotatorId(row.annotator_id),
        item_id,
        value: row.value,
        trial_index: row.trial_index,
        set,
        true_label,
        condition: Condition {
            gs_prevalence: row.gs_prevalence,
            response_mode,
        },
    };
    judgment.validate()?;
    Ok(judgment)
}

/// How repeated responses to the same item are handled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DedupPolicy {
    /// Keep only the earliest response per (annotator, item, condition).
    #[default]
    FirstResponse,
    KeepAll,
}

/// Apply the inclusion rules: deduplicate, then drop annotators with fewer
/// than `min_trials` remaining judgments.
///
/// Deduplication runs first so that every surviving annotator is guaranteed
/// at least `min_trials` judgments in the output.
pub fn filter_judgments(
    table: &JudgmentTable,
    min_trials: usize,
    dedup: DedupPolicy,
) -> JudgmentTable {
    let deduped: Vec<&Judgment> = match dedup {
        DedupPolicy::KeepAll => table.judgments.iter().collect(),
        DedupPolicy::FirstResponse => {
            let mut first: BTreeMap<(&AnnotatorId, &ItemId, (u64, ResponseMode)), usize> =
                BTreeMap::new();
            for (i, j) in table.judgments.iter().enumerate() {
                let key = (&j.annotator_id, &j.item_id, j.condition.key());
                first
                    .entry(key)
                    .and_modify(|best| {
                        if j.trial_index < table.judgments[*best].trial_index {
                            *best = i;
                        }
                    })
                    .or_insert(i);
            }
            let keep: BTreeSet<usize> = first.into_values().collect();
            table
                .judgments
                .iter()
                .enumerate()
                .filter(|(i, _)| keep.contains(i))
                .map(|(_, j)| j)
                .collect()
        }
    };
    let mut per_annotator: BTreeMap<&AnnotatorId, usize> = BTreeMap::new();
    for j in &deduped {
        *per_annotator.entry(&j.annotator_id).or_default() += 1;
    }
    JudgmentTable::index(
        deduped
            .iter()
            .filter(|j| per_annotator[&j.annotator_id] >= min_trials)
            .map(|j| (*j).clone())
            .collect(),
    )
}

//! Items, gold-standard/QA corpora and their CSV form.
//!
//! A corpus holds two disjoint sets of binary-labelled items: the gold-standard
//! (GS) set, whose truth is shown to annotators as feedback, and the QA set,
//! whose labels are the output of the crowd. Negative sources can be cloned
//! into several augmented copies that share a `source_id`; this is how a
//! balanced pool of unique stimuli is turned into a rare-positive stream.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ItemId(pub String);

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SourceId(pub String);

impl fmt::Display for ItemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Display for SourceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ItemId {
    fn from(s: &str) -> Self {
        ItemId(s.to_owned())
    }
}

impl From<&str> for SourceId {
    fn from(s: &str) -> Self {
        SourceId(s.to_owned())
    }
}

/// Which half of the task an item belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ItemSet {
    #[serde(rename = "GS")]
    Gs,
    #[serde(rename = "QA")]
    Qa,
}

impl ItemSet {
    pub fn as_str(self) -> &'static str {
        match self {
            ItemSet::Gs => "GS",
            ItemSet::Qa => "QA",
        }
    }
}

impl fmt::Display for ItemSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ItemSet {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "GS" => Ok(ItemSet::Gs),
            "QA" => Ok(ItemSet::Qa),
            other => Err(format!("unknown set {other:?}, expected GS or QA")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Item {
    pub item_id: ItemId,
    /// `true` for the rare positive class.
    pub true_label: bool,
    pub set: ItemSet,
    /// Augmented copies of one stimulus share a source.
    pub source_id: SourceId,
}

#[derive(Debug, Error, PartialEq)]
pub enum CorpusError {
    #[error("{0} set would be empty")]
    EmptySet(ItemSet),
    #[error("duplicate item id {0}")]
    DuplicateItem(ItemId),
    #[error("source {0} mixes positive and negative items")]
    MixedSource(SourceId),
    #[error("source {0} spans both GS and QA sets")]
    SourceAcrossSets(SourceId),
    #[error("corpus CSV line {line}: {message}")]
    Csv { line: u64, message: String },
}

/// Immutable collection of GS and QA items with their realised prevalences.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    items: Vec<Item>,
    index: BTreeMap<ItemId, usize>,
    qa_prevalence: f64,
    gs_prevalence: f64,
}

/// Unique-stimulus counts and augmentation factors for [`build_corpus`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub n_qa_unique_pos: usize,
    pub n_qa_unique_neg: usize,
    pub n_gs_unique_pos: usize,
    pub n_gs_unique_neg: usize,
    /// Extra copies made of each negative QA source.
    pub negative_augmentation_factor_qa: usize,
    /// Extra copies made of each negative GS source.
    pub negative_augmentation_factor_gs: usize,
}

impl CorpusSpec {
    /// 750 QA items at 20% positive; GS at 20% (`gs_augmentation = 3`) or
    /// 50% (`gs_augmentation = 0`).
    pub fn study2(gs_augmentation: usize) -> Self {
        CorpusSpec {
            n_qa_unique_pos: 150,
            n_qa_unique_neg: 150,
            n_gs_unique_pos: 116,
            n_gs_unique_neg: 116,
            negative_augmentation_factor_qa: 3,
            negative_augmentation_factor_gs: gs_augmentation,
        }
    }
}

/// Build a corpus from unique-stimulus counts.
///
/// Each negative source yields `1 + factor` items sharing its `source_id`;
/// positives are never augmented. The resulting prevalences are whatever the
/// counts produce.
pub fn build_corpus(spec: &CorpusSpec) -> Result<Corpus, CorpusError> {
    let mut items = Vec::new();
    for (set, n_pos, n_neg, aug) in [
        (
            ItemSet::Qa,
            spec.n_qa_unique_pos,
            spec.n_qa_unique_neg,
            spec.negative_augmentation_factor_qa,
        ),
        (
            ItemSet::Gs,
            spec.n_gs_unique_pos,
            spec.n_gs_unique_neg,
            spec.negative_augmentation_factor_gs,
        ),
    ] {
        if n_pos + n_neg == 0 {
            return Err(CorpusError::EmptySet(set));
        }
        let prefix = set.as_str().to_ascii_lowercase();
        for i in 0..n_pos {
            let source = format!("{prefix}-p{i:04}");
            items.push(Item {
                item_id: ItemId(format!("{source}-r0")),
                true_label: true,
                set,
                source_id: SourceId(source),
            });
        }
        for i in 0..n_neg {
            let source = format!("{prefix}-n{i:04}");
            for copy in 0..=aug {
                items.push(Item {
                    item_id: ItemId(format!("{source}-r{copy}")),
                    true_label: false,
                    set,
                    source_id: SourceId(source.clone()),
                });
            }
        }
    }
    Corpus::from_items(items)
}

impl Corpus {
    /// Validate and index a list of items.
    pub fn from_items(items: Vec<Item>) -> Result<Self, CorpusError> {
        let mut index = BTreeMap::new();
        let mut sources: BTreeMap<&SourceId, (bool, ItemSet)> = BTreeMap::new();
        for (pos, item) in items.iter().enumerate() {
            if index.insert(item.item_id.clone(), pos).is_some() {
                return Err(CorpusError::DuplicateItem(item.item_id.clone()));
            }
            match sources.get(&item.source_id) {
                Some(&(label, set)) => {
                    if label != item.true_label {
                        return Err(CorpusError::MixedSource(item.source_id.clone()));
                    }
                    if set != item.set {
                        return Err(CorpusError::SourceAcrossSets(item.source_id.clone()));
                    }
                }
                None => {
                    sources.insert(&item.source_id, (item.true_label, item.set));
                }
            }
        }
        let prevalence = |set: ItemSet| -> Result<f64, CorpusError> {
            let (pos, total) = items
                .iter()
                .filter(|it| it.set == set)
                .fold((0usize, 0usize), |(p, t), it| (p + it.true_label as usize, t + 1));
            if total == 0 {
                return Err(CorpusError::EmptySet(set));
            }
            Ok(pos as f64 / total as f64)
        };
        let qa_prevalence = prevalence(ItemSet::Qa)?;
        let gs_prevalence = prevalence(ItemSet::Gs)?;
        Ok(Corpus {
            items,
            index,
            qa_prevalence,
            gs_prevalence,
        })
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn get(&self, id: &ItemId) -> Option<&Item> {
        self.index.get(id).map(|&i| &self.items[i])
    }

    pub fn qa_prevalence(&self) -> f64 {
        self.qa_prevalence
    }

    pub fn gs_prevalence(&self) -> f64 {
        self.gs_prevalence
    }

    pub fn iter_set(&self, set: ItemSet) -> impl Iterator<Item = &Item> {
        self.items.iter().filter(move |it| it.set == set)
    }

    pub fn len_set(&self, set: ItemSet) -> usize {
        self.iter_set(set).count()
    }

    pub fn sources(&self, set: ItemSet) -> BTreeSet<&SourceId> {
        self.iter_set(set).map(|it| &it.source_id).collect()
    }

    /// Ground truth for every item of `set`, keyed by id.
    pub fn truth(&self, set: ItemSet) -> BTreeMap<ItemId, bool> {
        self.iter_set(set)
            .map(|it| (it.item_id.clone(), it.true_label))
            .collect()
    }

    /// Write the `item_id,source_id,set,true_label` CSV.
    pub fn write_csv<W: Write>(&self, writer: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        out.write_record(["item_id", "source_id", "set", "true_label"])?;
        for item in &self.items {
            out.write_record([
                item.item_id.0.as_str(),
                item.source_id.0.as_str(),
                item.set.as_str(),
                if item.true_label { "1" } else { "0" },
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self, CorpusError> {
        #[derive(Deserialize)]
        struct Row {
            item_id: String,
            source_id: String,
            set: String,
            true_label: u8,
        }
        let mut rdr = csv::Reader::from_reader(reader);
        let mut items = Vec::new();
        for (i, row) in rdr.deserialize::<Row>().enumerate() {
            // Header is line 1.
            let line = i as u64 + 2;
            let row = row.map_err(|e| CorpusError::Csv {
                line,
                message: e.to_string(),
            })?;
            let set = row
                .set
                .parse()
                .map_err(|message| CorpusError::Csv { line, message })?;
            let true_label = match row.true_label {
                0 => false,
                1 => true,
                other => {
                    return Err(CorpusError::Csv {
                        line,
                        message: format!("true_label must be 0 or 1, got {other}"),
                    })
                }
            };
            items.push(Item {
                item_id: ItemId(row.item_id),
                true_label,
                set,
                source_id: SourceId(row.source_id),
            });
        }
        Corpus::from_items(items)
    }
}

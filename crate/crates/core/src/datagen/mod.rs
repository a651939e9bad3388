//! Synthetic relation-adaptation data, dataset files and split helpers.

mod corpus;
mod io;
mod kg;

use std::collections::{BTreeMap, BTreeSet};

pub use corpus::{gen_corpus, Corpus, CorpusSpec, TEMPLATE_MAX_LEN};
pub use io::{read_dataset, write_dataset, DataKind};
pub use kg::{gen_kg, KgData, KgSpec};

use crate::encoders::{SentenceInstance, NA};
use crate::kv::KvError;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("invalid spec: {0}")]
    Spec(String),
    #[error("vocabulary of {got} ids is too small, {needed} needed")]
    VocabTooSmall { needed: usize, got: usize },
    #[error("entity pool too small: {0}")]
    EntityPool(String),
    #[error("split keeps no instance")]
    EmptySplit,
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Kv(#[from] KvError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Result of [`make_partial_split`]: kept instances with their original
/// relation ids, plus the dense renumbering of the kept relations (NA, if
/// kept, stays 0).
#[derive(Clone, Debug, PartialEq)]
pub struct PartialSplit {
    pub instances: Vec<SentenceInstance>,
    pub remap: BTreeMap<usize, usize>,
}

impl PartialSplit {
    /// Instances relabeled through `remap`.
    pub fn remapped(&self) -> Vec<SentenceInstance> {
        self.instances
            .iter()
            .map(|s| SentenceInstance {
                relation: s.relation.map(|r| self.remap[&r]),
                ..s.clone()
            })
            .collect()
    }
}

/// Keeps the labeled instances whose relation is in `keep`.
pub fn make_partial_split(data: &[SentenceInstance], keep: &BTreeSet<usize>) -> Result<PartialSplit, DataError> {
    if keep.is_empty() {
        return Err(DataError::Spec("keep set is empty".into()));
    }
    let instances: Vec<SentenceInstance> = data
        .iter()
        .filter(|s| s.relation.is_some_and(|r| keep.contains(&r)))
        .cloned()
        .collect();
    if instances.is_empty() {
        return Err(DataError::EmptySplit);
    }
    let offset = usize::from(!keep.contains(&NA));
    let remap = keep.iter().enumerate().map(|(i, &r)| (r, i + offset)).collect();
    Ok(PartialSplit { instances, remap })
}

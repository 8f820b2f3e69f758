//! Versioned corpora: examples, schema updates, partitions and splits.

mod splits;
mod toy;
mod tsv;
mod update;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::parsetree::{exact_match, top_intent, ParseTree, TreeError};

pub use splits::{sample_curve_split, sample_splits, CurveCondition, SplitBundle, SplitSizes};
pub use toy::{generate_toy_corpus, GrammarConfig, IntentGrammar, Provenance, ToyCorpus};
pub use tsv::{load_corpus, load_versioned, save_corpus, save_provenance, save_versioned};
pub use update::{apply_reverse_update, default_updates, ArgumentPolicy, ReverseRule, Selector, UpdateSpec};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("example {id}: V1 intent {intent} is affected by the update but no V2 label was supplied")]
    MissingV2Label { id: String, intent: String },
    #[error("example {id}: rules {first} and {second} both apply")]
    AmbiguousRules { id: String, first: usize, second: usize },
    #[error("invalid update spec {name}: {reason}")]
    InvalidSpec { name: String, reason: String },
    #[error("partition {partition} has {available} examples, {requested} requested")]
    InsufficientPartition { partition: Partition, requested: usize, available: usize },
    #[error("degenerate grammar: {0}")]
    DegenerateGrammar(String),
    #[error("line {line}: {message}")]
    ParseError { line: usize, message: String },
    #[error("example {id}: {source}")]
    Tree { id: String, source: TreeError },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Changed,
    Unchanged,
    TriviallyUnchanged,
}

impl Partition {
    pub const ALL: [Partition; 3] = [Partition::Changed, Partition::Unchanged, Partition::TriviallyUnchanged];

    pub fn as_str(self) -> &'static str {
        match self {
            Partition::Changed => "changed",
            Partition::Unchanged => "unchanged",
            Partition::TriviallyUnchanged => "trivially_unchanged",
        }
    }

    pub fn parse(s: &str) -> Option<Partition> {
        Partition::ALL.into_iter().find(|p| p.as_str() == s)
    }
}

impl std::fmt::Display for Partition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A query with the labels known for it. Corpus rows carry only `v2_label`;
/// versioned data carries both plus the partition tag.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub tokens: Vec<String>,
    pub v1_label: Option<ParseTree>,
    pub v2_label: Option<ParseTree>,
    pub partition: Option<Partition>,
}

impl Example {
    pub fn with_v2(id: impl Into<String>, tokens: Vec<String>, v2_label: ParseTree) -> Self {
        Example { id: id.into(), tokens, v1_label: None, v2_label: Some(v2_label), partition: None }
    }

    pub fn query(&self) -> String {
        self.tokens.join(" ")
    }
}

pub fn classify_partition(
    v1_label: &ParseTree,
    v2_label: Option<&ParseTree>,
    affected: &BTreeSet<String>,
) -> Result<Partition, DatasetError> {
    if !affected.contains(top_intent(v1_label)) {
        return Ok(Partition::TriviallyUnchanged);
    }
    let v2 = v2_label.ok_or_else(|| DatasetError::MissingV2Label {
        id: String::new(),
        intent: v1_label.label.clone(),
    })?;
    Ok(if exact_match(v1_label, v2) { Partition::Unchanged } else { Partition::Changed })
}

/// Whether the V1 label alone shows that the update cannot touch an example.
pub fn is_trivially_unchanged(v1_label: &ParseTree, spec: &UpdateSpec) -> bool {
    !spec.affected_intents.contains(top_intent(v1_label))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VersionedDataset {
    pub examples: Vec<Example>,
    pub spec: UpdateSpec,
}

impl VersionedDataset {
    pub fn partition_counts(&self) -> [usize; 3] {
        let mut counts = [0; 3];
        for e in &self.examples {
            if let Some(p) = e.partition {
                counts[p as usize] += 1;
            }
        }
        counts
    }
}

/// Derives the V1 label and partition tag of every V2-labelled example.
pub fn build_version_pair(corpus: &[Example], spec: &UpdateSpec) -> Result<VersionedDataset, DatasetError> {
    spec.validate()?;
    let examples = corpus
        .iter()
        .map(|ex| {
            let v2 = ex.v2_label.as_ref().ok_or_else(|| DatasetError::ParseError {
                line: 0,
                message: format!("example {} has no V2 label", ex.id),
            })?;
            let v1 = apply_reverse_update(v2, spec).map_err(|e| match e {
                DatasetError::AmbiguousRules { first, second, .. } => {
                    DatasetError::AmbiguousRules { id: ex.id.clone(), first, second }
                }
                other => other,
            })?;
            let partition = classify_partition(&v1, Some(v2), &spec.affected_intents)?;
            Ok(Example {
                id: ex.id.clone(),
                tokens: ex.tokens.clone(),
                v1_label: Some(v1),
                v2_label: Some(v2.clone()),
                partition: Some(partition),
            })
        })
        .collect::<Result<Vec<_>, DatasetError>>()?;
    Ok(VersionedDataset { examples, spec: spec.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parsetree::parse_bracketed;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    fn set(items: &[&str]) -> BTreeSet<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn construction_on_the_highway_is_changed() {
        let q = toks("Where is there construction on the highway ?");
        let v1 = parse_bracketed("(IN:GET_INFO_ROAD_CONDITION (SL:LOCATION \"the highway\" ) )", &q).unwrap();
        let v2 = parse_bracketed("(IN:GET_INFO_TRAFFIC (SL:LOCATION \"the highway\" ) )", &q).unwrap();
        let affected = set(&["IN:GET_INFO_ROAD_CONDITION", "IN:GET_INFO_TRAFFIC"]);
        assert_eq!(classify_partition(&v1, Some(&v2), &affected).unwrap(), Partition::Changed);
    }

    #[test]
    fn icy_roads_is_unchanged() {
        let q = toks("Are roads icy ?");
        let v = parse_bracketed("(IN:GET_INFO_ROAD_CONDITION (SL:ROAD_CONDITION \"icy\" ) )", &q).unwrap();
        let affected = set(&["IN:GET_INFO_ROAD_CONDITION", "IN:GET_INFO_TRAFFIC"]);
        assert_eq!(classify_partition(&v, Some(&v.clone()), &affected).unwrap(), Partition::Unchanged);
    }

    #[test]
    fn outside_affected_is_trivial() {
        let q = toks("directions to work");
        let v1 = parse_bracketed("(IN:GET_DIRECTIONS (SL:DESTINATION \"work\" ) )", &q).unwrap();
        let other = ParseTree::intent("IN:SOMETHING_ELSE", vec![]);
        let affected = set(&["IN:GET_INFO_TRAFFIC"]);
        for v2 in [None, Some(&v1), Some(&other)] {
            assert_eq!(classify_partition(&v1, v2, &affected).unwrap(), Partition::TriviallyUnchanged);
        }
    }

    #[test]
    fn missing_v2_label() {
        let v1 = ParseTree::intent("IN:GET_INFO_TRAFFIC", vec![]);
        let err = classify_partition(&v1, None, &set(&["IN:GET_INFO_TRAFFIC"])).unwrap_err();
        assert!(matches!(err, DatasetError::MissingV2Label { .. }));
    }

    #[test]
    fn empty_rules_yield_no_changed() {
        let spec = UpdateSpec {
            name: "noop".into(),
            affected_intents: set(&["IN:GET_DIRECTIONS"]),
            rules: vec![],
        };
        let corpus: Vec<Example> = ["directions to work", "how far is work"]
            .iter()
            .enumerate()
            .map(|(i, q)| {
                let label = if i == 0 { "IN:GET_DIRECTIONS" } else { "IN:GET_DISTANCE" };
                Example::with_v2(format!("e{i}"), toks(q), ParseTree::intent(label, vec![ParseTree::slot("SL:DESTINATION", vec![2])]))
            })
            .collect();
        let data = build_version_pair(&corpus, &spec).unwrap();
        assert_eq!(data.partition_counts(), [0, 1, 1]);
    }
}

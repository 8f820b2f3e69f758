use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DatasetError, Example, Partition, UpdateSpec, VersionedDataset};
use crate::parsetree::ParseTree;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub v2_changed: usize,
    pub v2_unchanged: usize,
    pub test_per_partition: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        SplitSizes { v2_changed: 50, v2_unchanged: 50, test_per_partition: 100 }
    }
}

/// Hidden ground truth for a V1 training example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleTag {
    pub partition: Partition,
    pub v2_label: ParseTree,
}

/// Training and test data for one update.
///
/// `v1_train` examples carry only their (possibly stale) V1 label. `v2_train`
/// and the test sets carry V2 labels and their annotated partition. The true
/// partition and V2 label of V1 examples live in `oracle_tags`, which only
/// the oracle strategy and diagnostics read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitBundle {
    pub spec: UpdateSpec,
    pub v1_train: Vec<Example>,
    pub v2_train: Vec<Example>,
    pub test_changed: Vec<Example>,
    pub test_unchanged: Vec<Example>,
    pub test_triv: Vec<Example>,
    pub oracle_tags: BTreeMap<String, OracleTag>,
}

impl SplitBundle {
    pub fn test_set(&self, partition: Partition) -> &[Example] {
        match partition {
            Partition::Changed => &self.test_changed,
            Partition::Unchanged => &self.test_unchanged,
            Partition::TriviallyUnchanged => &self.test_triv,
        }
    }
}

fn shuffled_partitions(data: &VersionedDataset, seed: u64) -> [Vec<usize>; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_partition: [Vec<usize>; 3] = Default::default();
    for (i, e) in data.examples.iter().enumerate() {
        if let Some(p) = e.partition {
            by_partition[p as usize].push(i);
        }
    }
    for idx in by_partition.iter_mut() {
        idx.shuffle(&mut rng);
    }
    by_partition
}

fn require(partition: Partition, requested: usize, available: usize) -> Result<(), DatasetError> {
    if available < requested {
        return Err(DatasetError::InsufficientPartition { partition, requested, available });
    }
    Ok(())
}

fn v2_view(e: &Example) -> Example {
    Example { v1_label: None, ..e.clone() }
}

fn v1_view(e: &Example) -> Example {
    Example { v2_label: None, partition: None, ..e.clone() }
}

struct Assembler<'a> {
    data: &'a VersionedDataset,
    v1: Vec<usize>,
}

impl Assembler<'_> {
    fn finish(mut self, v2: Vec<usize>, tests: [Vec<usize>; 3]) -> SplitBundle {
        self.v1.sort_unstable();
        let ex = |i: &usize| &self.data.examples[*i];
        let oracle_tags = self
            .v1
            .iter()
            .map(|i| {
                let e = ex(i);
                let tag = OracleTag {
                    partition: e.partition.expect("versioned examples are tagged"),
                    v2_label: e.v2_label.clone().expect("versioned examples carry V2 labels"),
                };
                (e.id.clone(), tag)
            })
            .collect();
        let [tc, tu, tt] = tests;
        SplitBundle {
            spec: self.data.spec.clone(),
            v1_train: self.v1.iter().map(|i| v1_view(ex(i))).collect(),
            v2_train: v2.iter().map(|i| v2_view(ex(i))).collect(),
            test_changed: tc.iter().map(|i| v2_view(ex(i))).collect(),
            test_unchanged: tu.iter().map(|i| v2_view(ex(i))).collect(),
            test_triv: tt.iter().map(|i| v2_view(ex(i))).collect(),
            oracle_tags,
        }
    }
}

/// Draws test sets first, then the V2 training sample, and leaves the rest
/// (with V1 labels) as the V1 training set. Sampling is uniform within each
/// partition and a pure function of `(data, sizes, seed)`.
pub fn sample_splits(data: &VersionedDataset, sizes: SplitSizes, seed: u64) -> Result<SplitBundle, DatasetError> {
    let parts = shuffled_partitions(data, seed);
    let t = sizes.test_per_partition;
    let v2_counts = [sizes.v2_changed, sizes.v2_unchanged, 0];
    for p in Partition::ALL {
        require(p, t + v2_counts[p as usize], parts[p as usize].len())?;
    }
    let mut tests: [Vec<usize>; 3] = Default::default();
    let mut v2 = Vec::new();
    let mut v1 = Vec::new();
    for p in Partition::ALL {
        let idx = &parts[p as usize];
        let n2 = v2_counts[p as usize];
        tests[p as usize] = idx[..t].to_vec();
        v2.extend_from_slice(&idx[t..t + n2]);
        v1.extend_from_slice(&idx[t + n2..]);
    }
    Ok(Assembler { data, v1 }.finish(v2, tests))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveCondition {
    Conflicting,
    OracleRemoved,
}

impl CurveCondition {
    pub const ALL: [CurveCondition; 2] = [CurveCondition::Conflicting, CurveCondition::OracleRemoved];

    pub fn as_str(self) -> &'static str {
        match self {
            CurveCondition::Conflicting => "conflicting",
            CurveCondition::OracleRemoved => "oracle_removed",
        }
    }
}

/// Split for the conflicting-data sweep: V1 holds every remaining unchanged
/// and trivially-unchanged example, plus `conflicting` changed examples with
/// stale labels under [`CurveCondition::Conflicting`]. V2 training data is
/// changed-only; for a fixed seed the V2 sets of increasing size are nested
/// and identical across conditions.
pub fn sample_curve_split(
    data: &VersionedDataset,
    v2_size: usize,
    max_v2_size: usize,
    conflicting: usize,
    test_per_partition: usize,
    condition: CurveCondition,
    seed: u64,
) -> Result<SplitBundle, DatasetError> {
    assert!(v2_size <= max_v2_size, "v2_size exceeds the sweep maximum");
    let parts = shuffled_partitions(data, seed);
    let t = test_per_partition;
    require(Partition::Changed, t + conflicting + max_v2_size, parts[0].len())?;
    require(Partition::Unchanged, t, parts[1].len())?;
    require(Partition::TriviallyUnchanged, t, parts[2].len())?;

    let changed = &parts[0];
    let conflict_set = &changed[t..t + conflicting];
    let v2 = changed[t + conflicting..t + conflicting + v2_size].to_vec();
    let mut v1: Vec<usize> = parts[1][t..].iter().chain(&parts[2][t..]).copied().collect();
    if condition == CurveCondition::Conflicting {
        v1.extend_from_slice(conflict_set);
    }
    let tests = [changed[..t].to_vec(), parts[1][..t].to_vec(), parts[2][..t].to_vec()];
    Ok(Assembler { data, v1 }.finish(v2, tests))
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;
    use crate::dataset::{build_version_pair, ReverseRule};
    use crate::parsetree::ParseTree;

    fn toy(n_changed: usize, n_unchanged: usize, n_triv: usize) -> VersionedDataset {
        let mut corpus = Vec::new();
        let mut push = |label: &str, n: usize| {
            for _ in 0..n {
                let id = format!("x{}", corpus.len());
                corpus.push(Example::with_v2(id, vec!["w".into()], ParseTree::intent(label, vec![])));
            }
        };
        push("IN:NEW", n_changed);
        push("IN:OLD", n_unchanged);
        push("IN:OTHER", n_triv);
        let spec = UpdateSpec {
            name: "t".into(),
            affected_intents: ["IN:OLD".to_string()].into(),
            rules: vec![ReverseRule::MergeIntent {
                new_intent: "IN:NEW".into(),
                merged_into: "IN:OLD".into(),
                argument_policy: crate::dataset::ArgumentPolicy::Keep,
                selector: Default::default(),
            }],
        };
        build_version_pair(&corpus, &spec).unwrap()
    }

    fn ids(v: &[Example]) -> BTreeSet<String> {
        v.iter().map(|e| e.id.clone()).collect()
    }

    #[test]
    fn standard_sizes() {
        let data = toy(300, 250, 700);
        let b = sample_splits(&data, SplitSizes::default(), 3).unwrap();
        assert_eq!(b.v2_train.len(), 100);
        for p in Partition::ALL {
            assert_eq!(b.test_set(p).len(), 100);
        }
        assert_eq!(b.v1_train.len(), 1250 - 400);
        let v1 = ids(&b.v1_train);
        for set in [&b.v2_train, &b.test_changed, &b.test_unchanged, &b.test_triv] {
            assert!(ids(set).is_disjoint(&v1));
        }
        assert!(ids(&b.v2_train).is_disjoint(&ids(&b.test_changed)));
        // stale labels on the conflicting subset
        for e in &b.v1_train {
            let tag = &b.oracle_tags[&e.id];
            assert_eq!(tag.partition == Partition::Changed, e.v1_label.as_ref() != Some(&tag.v2_label));
            assert!(e.v2_label.is_none() && e.partition.is_none());
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let data = toy(300, 250, 700);
        let a = sample_splits(&data, SplitSizes::default(), 11).unwrap();
        let b = sample_splits(&data, SplitSizes::default(), 11).unwrap();
        let c = sample_splits(&data, SplitSizes::default(), 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(ids(&a.v2_train), ids(&c.v2_train));
    }

    #[test]
    fn changed_only_v2() {
        let data = toy(300, 250, 700);
        let b = sample_splits(&data, SplitSizes { v2_changed: 50, v2_unchanged: 0, test_per_partition: 100 }, 0).unwrap();
        assert_eq!(b.v2_train.len(), 50);
        assert!(b.v2_train.iter().all(|e| e.partition == Some(Partition::Changed)));
    }

    #[test]
    fn insufficient_partition() {
        let data = toy(120, 250, 700);
        let err = sample_splits(&data, SplitSizes::default(), 0).unwrap_err();
        assert!(matches!(err, DatasetError::InsufficientPartition { partition: Partition::Changed, requested: 150, available: 120 }));
    }

    #[test]
    fn curve_split_conditions_share_v2() {
        let data = toy(400, 250, 700);
        let mut prev = BTreeSet::new();
        for size in [25, 50, 100, 200] {
            let a = sample_curve_split(&data, size, 200, 50, 100, CurveCondition::Conflicting, 5).unwrap();
            let b = sample_curve_split(&data, size, 200, 50, 100, CurveCondition::OracleRemoved, 5).unwrap();
            assert_eq!(a.v2_train, b.v2_train);
            assert_eq!(a.test_changed, b.test_changed);
            assert_eq!(a.v1_train.len(), b.v1_train.len() + 50);
            let conflicting = a.oracle_tags.values().filter(|t| t.partition == Partition::Changed).count();
            assert_eq!(conflicting, 50);
            assert!(b.oracle_tags.values().all(|t| t.partition != Partition::Changed));
            let cur = ids(&a.v2_train);
            assert!(prev.is_subset(&cur));
            assert!(cur.is_disjoint(&ids(&a.v1_train)));
            prev = cur;
        }
    }
}

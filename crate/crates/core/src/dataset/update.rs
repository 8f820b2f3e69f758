use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::DatasetError;
use crate::parsetree::{NodeKind, ParseTree};

/// How the arguments of a merged intent look in the V1 form.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArgumentPolicy {
    Keep,
    DropAll,
    Rename(BTreeMap<String, String>),
}

/// Predicate on a V2 tree whose root already names the rule's new intent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selector {
    #[default]
    Any,
    HasArguments,
    NoArguments,
}

impl Selector {
    pub fn matches(self, tree: &ParseTree) -> bool {
        match self {
            Selector::Any => true,
            Selector::HasArguments => tree.has_arguments(),
            Selector::NoArguments => !tree.has_arguments(),
        }
    }
}

/// One V2 → V1 transformation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReverseRule {
    MergeIntent {
        new_intent: String,
        merged_into: String,
        argument_policy: ArgumentPolicy,
        #[serde(default)]
        selector: Selector,
    },
    RemoveArgument {
        intent_set: BTreeSet<String>,
        slot_label: String,
    },
}

impl ReverseRule {
    pub fn fires(&self, v2: &ParseTree) -> bool {
        match self {
            ReverseRule::MergeIntent { new_intent, selector, .. } => v2.label == *new_intent && selector.matches(v2),
            ReverseRule::RemoveArgument { intent_set, slot_label } => {
                intent_set.contains(&v2.label) && contains_slot(v2, slot_label)
            }
        }
    }

    fn apply(&self, v2: &ParseTree) -> ParseTree {
        match self {
            ReverseRule::MergeIntent { merged_into, argument_policy, .. } => {
                let children = match argument_policy {
                    ArgumentPolicy::Keep => v2.children.clone(),
                    ArgumentPolicy::DropAll => Vec::new(),
                    ArgumentPolicy::Rename(map) => v2
                        .children
                        .iter()
                        .map(|c| {
                            let mut c = c.clone();
                            if let Some(to) = map.get(&c.label) {
                                c.label = to.clone();
                            }
                            c
                        })
                        .collect(),
                };
                ParseTree { kind: NodeKind::Intent, label: merged_into.clone(), span: Vec::new(), children }
            }
            ReverseRule::RemoveArgument { slot_label, .. } => strip_slot(v2, slot_label),
        }
    }
}

fn contains_slot(tree: &ParseTree, slot_label: &str) -> bool {
    tree.children.iter().any(|c| c.label == slot_label || contains_slot(c, slot_label))
}

fn strip_slot(tree: &ParseTree, slot_label: &str) -> ParseTree {
    let children = tree
        .children
        .iter()
        .filter(|c| c.label != slot_label)
        .map(|c| strip_slot(c, slot_label))
        .collect();
    ParseTree { children, ..tree.clone() }
}

/// Declarative description of one schema update, read in the V2 → V1
/// direction. Affected intents are V1-side labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdateSpec {
    pub name: String,
    pub affected_intents: BTreeSet<String>,
    pub rules: Vec<ReverseRule>,
}

impl UpdateSpec {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let invalid = |reason: String| DatasetError::InvalidSpec { name: self.name.clone(), reason };
        for rule in &self.rules {
            match rule {
                ReverseRule::MergeIntent { merged_into, new_intent, .. } => {
                    if !self.affected_intents.contains(merged_into) {
                        return Err(invalid(format!("{merged_into} is merged into but not listed as affected")));
                    }
                    if NodeKind::of_label(new_intent) != Some(NodeKind::Intent) {
                        return Err(invalid(format!("{new_intent} is not an intent label")));
                    }
                }
                ReverseRule::RemoveArgument { intent_set, slot_label } => {
                    if let Some(missing) = intent_set.iter().find(|i| !self.affected_intents.contains(*i)) {
                        return Err(invalid(format!("{missing} loses {slot_label} but is not listed as affected")));
                    }
                }
            }
        }
        Ok(())
    }

    /// Distinct intents that exist only after the update.
    pub fn new_intents(&self) -> BTreeSet<&str> {
        self.rules
            .iter()
            .filter_map(|r| match r {
                ReverseRule::MergeIntent { new_intent, .. } => Some(new_intent.as_str()),
                ReverseRule::RemoveArgument { .. } => None,
            })
            .collect()
    }
}

/// Produces the V1 form of a V2 label. Labels no rule applies to come back
/// unchanged.
pub fn apply_reverse_update(v2: &ParseTree, spec: &UpdateSpec) -> Result<ParseTree, DatasetError> {
    let mut fired = spec.rules.iter().enumerate().filter(|(_, r)| r.fires(v2));
    match (fired.next(), fired.next()) {
        (None, _) => Ok(v2.clone()),
        (Some((_, rule)), None) => Ok(rule.apply(v2)),
        (Some((first, _)), Some((second, _))) => Err(DatasetError::AmbiguousRules { id: String::new(), first, second }),
    }
}

fn set(items: &[&str]) -> BTreeSet<String> {
    items.iter().map(|s| s.to_string()).collect()
}

fn merge(new_intent: &str, merged_into: &str, argument_policy: ArgumentPolicy, selector: Selector) -> ReverseRule {
    ReverseRule::MergeIntent {
        new_intent: new_intent.to_string(),
        merged_into: merged_into.to_string(),
        argument_policy,
        selector,
    }
}

/// The five update types, instantiated on the default toy grammar.
///
/// * `unsupported`: arrival estimates used to be out of scope.
/// * `related_rename`: departure questions were arrival questions, with the
///   arrival time slot read as a departure time.
/// * `new_argument`: obstructions were not annotated on route and duration
///   queries.
/// * `related`: traffic questions were road-condition questions.
/// * `multiple_sources`: duration questions were distance questions when they
///   had arguments and unsupported otherwise.
pub fn default_updates() -> Vec<UpdateSpec> {
    vec![
        UpdateSpec {
            name: "unsupported".into(),
            affected_intents: set(&["IN:UNSUPPORTED_NAVIGATION"]),
            rules: vec![merge(
                "IN:GET_ESTIMATED_ARRIVAL",
                "IN:UNSUPPORTED_NAVIGATION",
                ArgumentPolicy::DropAll,
                Selector::Any,
            )],
        },
        UpdateSpec {
            name: "related_rename".into(),
            affected_intents: set(&["IN:GET_ESTIMATED_ARRIVAL"]),
            rules: vec![merge(
                "IN:GET_ESTIMATED_DEPARTURE",
                "IN:GET_ESTIMATED_ARRIVAL",
                ArgumentPolicy::Rename(
                    [("SL:DATE_TIME_ARRIVAL".to_string(), "SL:DATE_TIME_DEPARTURE".to_string())].into_iter().collect(),
                ),
                Selector::Any,
            )],
        },
        UpdateSpec {
            name: "new_argument".into(),
            affected_intents: set(&["IN:GET_DIRECTIONS", "IN:GET_ESTIMATED_DURATION"]),
            rules: vec![ReverseRule::RemoveArgument {
                intent_set: set(&["IN:GET_DIRECTIONS", "IN:GET_ESTIMATED_DURATION"]),
                slot_label: "SL:OBSTRUCTION".into(),
            }],
        },
        UpdateSpec {
            name: "related".into(),
            affected_intents: set(&["IN:GET_INFO_ROAD_CONDITION"]),
            rules: vec![merge("IN:GET_INFO_TRAFFIC", "IN:GET_INFO_ROAD_CONDITION", ArgumentPolicy::Keep, Selector::Any)],
        },
        UpdateSpec {
            name: "multiple_sources".into(),
            affected_intents: set(&["IN:GET_DISTANCE", "IN:UNSUPPORTED_NAVIGATION"]),
            rules: vec![
                merge("IN:GET_ESTIMATED_DURATION", "IN:GET_DISTANCE", ArgumentPolicy::Keep, Selector::HasArguments),
                merge(
                    "IN:GET_ESTIMATED_DURATION",
                    "IN:UNSUPPORTED_NAVIGATION",
                    ArgumentPolicy::DropAll,
                    Selector::NoArguments,
                ),
            ],
        },
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parsetree::{exact_match, parse_bracketed, serialize};

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    fn unsupported_merge() -> UpdateSpec {
        UpdateSpec {
            name: "new_intent_from_unsupported".into(),
            affected_intents: ["IN:UNSUPPORTED_NAVIGATION".to_string()].into(),
            rules: vec![ReverseRule::MergeIntent {
                new_intent: "IN:GET_ESTIMATED_ARRIVAL".into(),
                merged_into: "IN:UNSUPPORTED_NAVIGATION".into(),
                argument_policy: ArgumentPolicy::DropAll,
                selector: Selector::Any,
            }],
        }
    }

    #[test]
    fn unsupported_merge_drops_arguments() {
        let q = toks("If I leave right now , can I get to New York City before one o'clock PM ?");
        let v2 = parse_bracketed(
            "(IN:GET_ESTIMATED_ARRIVAL (SL:DATE_TIME_DEPARTURE \"right now\" ) (SL:DESTINATION \"New York City\" ) )",
            &q,
        )
        .unwrap();
        let v1 = apply_reverse_update(&v2, &unsupported_merge()).unwrap();
        assert_eq!(serialize(&v1, &q), "(IN:UNSUPPORTED_NAVIGATION )");
        // drop_all merges are idempotent
        assert_eq!(apply_reverse_update(&v1, &unsupported_merge()).unwrap(), v1);
    }

    #[test]
    fn remove_argument() {
        let q = toks("Which route to work has less traffic ?");
        let v2 = parse_bracketed("(IN:GET_DIRECTIONS (SL:DESTINATION \"work\" ) (SL:OBSTRUCTION \"traffic\" ) )", &q).unwrap();
        let spec = UpdateSpec {
            name: "new_argument".into(),
            affected_intents: ["IN:GET_DIRECTIONS".to_string()].into(),
            rules: vec![ReverseRule::RemoveArgument {
                intent_set: ["IN:GET_DIRECTIONS".to_string()].into(),
                slot_label: "SL:OBSTRUCTION".into(),
            }],
        };
        let v1 = apply_reverse_update(&v2, &spec).unwrap();
        assert_eq!(serialize(&v1, &q), "(IN:GET_DIRECTIONS (SL:DESTINATION \"work\" ) )");
    }

    #[test]
    fn untouched_example_is_identity() {
        let q = toks("directions to work");
        let v2 = parse_bracketed("(IN:GET_DIRECTIONS (SL:DESTINATION \"work\" ) )", &q).unwrap();
        assert!(exact_match(&apply_reverse_update(&v2, &unsupported_merge()).unwrap(), &v2));
    }

    #[test]
    fn rename_policy() {
        let q = toks("when should i leave to arrive by 5pm");
        let v2 = parse_bracketed("(IN:GET_ESTIMATED_DEPARTURE (SL:DATE_TIME_ARRIVAL \"5pm\" ) )", &q).unwrap();
        let spec = UpdateSpec {
            name: "rename".into(),
            affected_intents: ["IN:GET_ESTIMATED_ARRIVAL".to_string()].into(),
            rules: vec![ReverseRule::MergeIntent {
                new_intent: "IN:GET_ESTIMATED_DEPARTURE".into(),
                merged_into: "IN:GET_ESTIMATED_ARRIVAL".into(),
                argument_policy: ArgumentPolicy::Rename(
                    [("SL:DATE_TIME_ARRIVAL".to_string(), "SL:DATE_TIME_DEPARTURE".to_string())].into(),
                ),
                selector: Selector::Any,
            }],
        };
        let v1 = apply_reverse_update(&v2, &spec).unwrap();
        assert_eq!(serialize(&v1, &q), "(IN:GET_ESTIMATED_ARRIVAL (SL:DATE_TIME_DEPARTURE \"5pm\" ) )");
    }

    #[test]
    fn overlapping_selectors_are_ambiguous() {
        let mut spec = unsupported_merge();
        spec.affected_intents.insert("IN:GET_DISTANCE".into());
        spec.rules.push(ReverseRule::MergeIntent {
            new_intent: "IN:GET_ESTIMATED_ARRIVAL".into(),
            merged_into: "IN:GET_DISTANCE".into(),
            argument_policy: ArgumentPolicy::Keep,
            selector: Selector::HasArguments,
        });
        let v2 = ParseTree::intent("IN:GET_ESTIMATED_ARRIVAL", vec![ParseTree::slot("SL:DESTINATION", vec![0])]);
        assert!(matches!(
            apply_reverse_update(&v2, &spec),
            Err(DatasetError::AmbiguousRules { first: 0, second: 1, .. })
        ));
    }

    #[test]
    fn validate_requires_affected_targets() {
        let mut spec = unsupported_merge();
        spec.affected_intents.clear();
        assert!(spec.validate().is_err());
    }

    #[test]
    fn spec_serde_shape() {
        let json: serde_json::Value = serde_json::json!({
            "name": "e",
            "affected_intents": ["IN:GET_DISTANCE"],
            "rules": [{"kind": "merge_intent", "new_intent": "IN:A", "merged_into": "IN:GET_DISTANCE",
                       "argument_policy": {"rename": {"SL:X": "SL:Y"}}}]
        });
        let spec: UpdateSpec = serde_json::from_value(json).unwrap();
        assert!(matches!(&spec.rules[0], ReverseRule::MergeIntent { argument_policy: ArgumentPolicy::Rename(_), selector: Selector::Any, .. }));
    }
}

//! Training recipes for the nine update strategies.

mod classifier;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use classifier::{filter_v1, train_classifier_on, train_selection_classifier, Classifier, ClassifierConfig};

use crate::dataset::{is_trivially_unchanged, Example, Partition, SplitBundle, UpdateSpec};
use crate::eval::{evaluate, EvalReport};
use crate::model::{train_streams, HeadInit, MaskedExample, ModelError, ParserConfig, ParserModel, TrainOptions, Vocab};
use crate::parsetree::ParseTree;

#[derive(Debug, thiserror::Error)]
pub enum StrategyError {
    #[error("strategy {0} needs a trained selection classifier")]
    MissingClassifier(Strategy),
    #[error("classifier training data contains a single class")]
    SingleClassData,
    #[error("update {update} introduces several new intents ({intents}); intent-only relabeling is unsupported")]
    MultipleNewIntents { update: String, intents: String },
    #[error("example {0} has no partition tag")]
    MissingPartition(String),
    #[error("example {0} lacks the label this recipe needs")]
    MissingLabel(String),
    #[error("unknown strategy {0:?}")]
    UnknownStrategy(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    V1Only,
    V2Only,
    DirectMix,
    UpsampledMix,
    FineTune,
    MultiTask,
    SelectRemove,
    SelectIntentOnly,
    Oracle,
}

impl Strategy {
    pub const ALL: [Strategy; 9] = [
        Strategy::V1Only,
        Strategy::V2Only,
        Strategy::DirectMix,
        Strategy::UpsampledMix,
        Strategy::FineTune,
        Strategy::MultiTask,
        Strategy::SelectRemove,
        Strategy::SelectIntentOnly,
        Strategy::Oracle,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::V1Only => "v1_only",
            Strategy::V2Only => "v2_only",
            Strategy::DirectMix => "direct_mix",
            Strategy::UpsampledMix => "upsampled_mix",
            Strategy::FineTune => "fine_tune",
            Strategy::MultiTask => "multi_task",
            Strategy::SelectRemove => "select_remove",
            Strategy::SelectIntentOnly => "select_intent_only",
            Strategy::Oracle => "oracle",
        }
    }

    /// The four reference points a method's gap closure is measured from.
    pub fn is_baseline(self) -> bool {
        matches!(self, Strategy::V1Only | Strategy::V2Only | Strategy::DirectMix | Strategy::UpsampledMix)
    }

    pub fn needs_classifier(self) -> bool {
        matches!(self, Strategy::SelectRemove | Strategy::SelectIntentOnly)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = StrategyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL.into_iter().find(|x| x.as_str() == s).ok_or_else(|| StrategyError::UnknownStrategy(s.to_string()))
    }
}

pub const MAIN_HEAD: &str = "main";
pub const V1_HEAD: &str = "v1";
pub const V2_HEAD: &str = "v2";

/// Examples routed to one output head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stream {
    pub head: String,
    pub examples: Vec<MaskedExample>,
}

/// One training phase; all streams are trained together, half-and-half
/// batches when there are two.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub streams: Vec<Stream>,
    pub steps: usize,
    pub warmup_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingPlan {
    pub strategy: Strategy,
    pub stages: Vec<Stage>,
    pub eval_head: String,
    /// Set when the requested recipe was replaced by a supported one.
    pub fallback: Option<String>,
}

fn label<'a>(e: &'a Example, v2: bool) -> Result<&'a ParseTree, StrategyError> {
    let l = if v2 { e.v2_label.as_ref() } else { e.v1_label.as_ref() };
    l.ok_or_else(|| StrategyError::MissingLabel(e.id.clone()))
}

fn full(examples: &[Example], v2: bool) -> Result<Vec<MaskedExample>, StrategyError> {
    examples.iter().map(|e| Ok(MaskedExample::full(e.id.clone(), e.tokens.clone(), label(e, v2)?.clone()))).collect()
}

fn split_trivial(bundle: &SplitBundle) -> Result<(Vec<Example>, Vec<Example>), StrategyError> {
    let mut triv = Vec::new();
    let mut rest = Vec::new();
    for e in &bundle.v1_train {
        if is_trivially_unchanged(label(e, false)?, &bundle.spec) {
            triv.push(e.clone());
        } else {
            rest.push(e.clone());
        }
    }
    Ok((triv, rest))
}

/// Copies of the V2 set needed for its changed examples to match the
/// conflicting V1 examples in number; at least one.
pub fn upsample_factor(conflicting: usize, v2_changed: usize) -> usize {
    if v2_changed == 0 {
        return 1;
    }
    ((conflicting as f64 / v2_changed as f64).round() as usize).max(1)
}

/// Intent-only targets: the V1 tree with its root relabeled to the update's
/// new intent (or kept, for argument-only updates), supervised at the root only.
pub fn intent_only_relabel(examples: &[Example], spec: &UpdateSpec) -> Result<Vec<MaskedExample>, StrategyError> {
    let new = spec.new_intents();
    if new.len() > 1 {
        return Err(StrategyError::MultipleNewIntents {
            update: spec.name.clone(),
            intents: new.into_iter().collect::<Vec<_>>().join(", "),
        });
    }
    let root = new.into_iter().next();
    examples
        .iter()
        .map(|e| {
            let mut target = label(e, false)?.clone();
            if let Some(r) = root {
                target.label = r.to_string();
            }
            Ok(MaskedExample::intent_only(e.id.clone(), e.tokens.clone(), target))
        })
        .collect()
}

fn single(strategy: Strategy, examples: Vec<MaskedExample>, config: &ParserConfig) -> TrainingPlan {
    TrainingPlan {
        strategy,
        stages: vec![Stage {
            streams: vec![Stream { head: MAIN_HEAD.into(), examples }],
            steps: config.train_steps,
            warmup_steps: config.warmup_steps,
        }],
        eval_head: MAIN_HEAD.into(),
        fallback: None,
    }
}

/// Builds the data and schedule of `strategy` on `bundle`.
pub fn build_training_plan(
    strategy: Strategy,
    bundle: &SplitBundle,
    config: &ParserConfig,
    classifier: Option<&Classifier>,
) -> Result<TrainingPlan, StrategyError> {
    let v1 = || full(&bundle.v1_train, false);
    let v2 = || full(&bundle.v2_train, true);
    let (triv, nontriv) = split_trivial(bundle)?;
    let v2_plus_triv = || -> Result<Vec<MaskedExample>, StrategyError> {
        let mut d = v2()?;
        d.extend(full(&triv, false)?);
        Ok(d)
    };
    let plan = match strategy {
        Strategy::V1Only => single(strategy, v1()?, config),
        Strategy::V2Only => single(strategy, v2_plus_triv()?, config),
        Strategy::DirectMix => {
            let mut d = v1()?;
            d.extend(v2()?);
            single(strategy, d, config)
        }
        Strategy::UpsampledMix => {
            let conflicting = bundle.oracle_tags.values().filter(|t| t.partition == Partition::Changed).count();
            let v2_changed = bundle.v2_train.iter().filter(|e| e.partition == Some(Partition::Changed)).count();
            let v2_data = v2()?;
            let mut d = v1()?;
            for _ in 0..upsample_factor(conflicting, v2_changed) {
                d.extend(v2_data.iter().cloned());
            }
            single(strategy, d, config)
        }
        Strategy::FineTune => {
            let mut plan = single(strategy, v1()?, config);
            let steps = (config.train_steps / 5).max(1);
            plan.stages.push(Stage {
                streams: vec![Stream { head: MAIN_HEAD.into(), examples: v2_plus_triv()? }],
                steps,
                warmup_steps: steps / 10,
            });
            plan
        }
        Strategy::MultiTask => TrainingPlan {
            strategy,
            stages: vec![Stage {
                streams: vec![
                    Stream { head: V1_HEAD.into(), examples: v1()? },
                    Stream { head: V2_HEAD.into(), examples: v2_plus_triv()? },
                ],
                steps: config.train_steps,
                warmup_steps: config.warmup_steps,
            }],
            eval_head: V2_HEAD.into(),
            fallback: None,
        },
        Strategy::SelectRemove | Strategy::SelectIntentOnly => {
            let clf = classifier.ok_or(StrategyError::MissingClassifier(strategy))?;
            let (keep, dropped) = filter_v1(clf, &nontriv);
            selection_plan(strategy, bundle, config, &keep, &dropped)?
        }
        Strategy::Oracle => {
            let mut d = Vec::with_capacity(bundle.v1_train.len() + bundle.v2_train.len());
            for e in &bundle.v1_train {
                let target = match bundle.oracle_tags.get(&e.id) {
                    Some(tag) if tag.partition == Partition::Changed => tag.v2_label.clone(),
                    _ => label(e, false)?.clone(),
                };
                d.push(MaskedExample::full(e.id.clone(), e.tokens.clone(), target));
            }
            d.extend(v2()?);
            single(strategy, d, config)
        }
    };
    Ok(plan)
}

/// Selection recipe given the V1 examples (trivially-unchanged ones
/// excluded) already split by predicted partition.
pub fn selection_plan(
    strategy: Strategy,
    bundle: &SplitBundle,
    config: &ParserConfig,
    predicted_unchanged: &[Example],
    predicted_changed: &[Example],
) -> Result<TrainingPlan, StrategyError> {
    let (triv, _) = split_trivial(bundle)?;
    let mut d = full(&bundle.v2_train, true)?;
    d.extend(full(&triv, false)?);
    d.extend(full(predicted_unchanged, false)?);
    let mut fallback = None;
    if strategy == Strategy::SelectIntentOnly {
        match intent_only_relabel(predicted_changed, &bundle.spec) {
            Ok(relabeled) => d.extend(relabeled),
            Err(e @ StrategyError::MultipleNewIntents { .. }) => {
                fallback = Some(format!("select_intent_only ran as select_remove: {e}"));
            }
            Err(e) => return Err(e),
        }
    }
    Ok(TrainingPlan { fallback, ..single(strategy, d, config) })
}

/// Vocabulary of everything a model trained on `bundle` can be asked to emit.
pub fn bundle_vocab(bundle: &SplitBundle) -> Vocab {
    let oracle: Vec<Example> = bundle
        .oracle_tags
        .iter()
        .map(|(id, t)| Example { id: id.clone(), tokens: Vec::new(), v1_label: None, v2_label: Some(t.v2_label.clone()), partition: None })
        .collect();
    Vocab::from_examples(bundle.v1_train.iter().chain(&bundle.v2_train).chain(&oracle))
}

fn stage_seed(seed: u64, stage: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(stage as u64)
}

/// Runs `plan.stages[from..]` on `model`, adding any missing heads.
pub fn continue_plan(model: &mut ParserModel, plan: &TrainingPlan, from: usize, seed: u64) -> Result<(), StrategyError> {
    for (i, stage) in plan.stages.iter().enumerate().skip(from) {
        for (j, s) in stage.streams.iter().enumerate() {
            if model.check_head(&s.head).is_err() {
                model.add_head(&s.head, HeadInit::Fresh { seed: stage_seed(seed, 100 + j) })?;
            }
        }
        let opts = TrainOptions {
            steps: stage.steps,
            batch_size: model.config.batch_size,
            learning_rate: model.config.learning_rate,
            warmup_steps: stage.warmup_steps,
            grad_clip: model.config.grad_clip,
            seed: stage_seed(seed, i),
        };
        let streams: Vec<(&[MaskedExample], &str)> =
            stage.streams.iter().map(|s| (s.examples.as_slice(), s.head.as_str())).collect();
        train_streams(model, &streams, &opts)?;
    }
    model.set_active_head(&plan.eval_head)?;
    Ok(())
}

/// Trains a fresh model on `plan`.
pub fn execute_plan(plan: &TrainingPlan, vocab: Vocab, config: &ParserConfig, seed: u64) -> Result<ParserModel, StrategyError> {
    let first = plan.stages.first().and_then(|s| s.streams.first()).map_or(MAIN_HEAD, |s| s.head.as_str());
    let mut model = ParserModel::new(config.clone(), vocab, first, seed)?;
    continue_plan(&mut model, plan, 0, seed)?;
    Ok(model)
}

/// Evaluation of one strategy on one bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct CellOutcome {
    pub report: EvalReport,
    pub fallback: Option<String>,
    pub classifier_accuracy: Option<f64>,
}

/// Runs several strategies on one (update, seed) bundle. The V1 parser is
/// trained once and reused as the v1_only model, as fine-tuning's first
/// stage, and as the classifier's encoder initialisation; the result is
/// identical to training each strategy from scratch.
pub fn run_strategies(
    strategies: &[Strategy],
    bundle: &SplitBundle,
    config: &ParserConfig,
    classifier_config: &ClassifierConfig,
    seed: u64,
) -> Result<Vec<CellOutcome>, StrategyError> {
    let vocab = bundle_vocab(bundle);
    let needs_v1 = strategies.iter().any(|s| matches!(s, Strategy::V1Only | Strategy::FineTune) || s.needs_classifier());
    let v1_model = if needs_v1 {
        Some(execute_plan(&build_training_plan(Strategy::V1Only, bundle, config, None)?, vocab.clone(), config, seed)?)
    } else {
        None
    };
    let classifier = match (&v1_model, strategies.iter().any(|s| s.needs_classifier())) {
        (Some(v1), true) => Some(train_selection_classifier(&bundle.v2_train, v1, classifier_config, seed)?),
        _ => None,
    };
    let classifier_accuracy = classifier.as_ref().map(|c| classifier_test_accuracy(c, bundle));
    let mut out = Vec::with_capacity(strategies.len());
    for &strategy in strategies {
        let plan = build_training_plan(strategy, bundle, config, classifier.as_ref())?;
        let model = match (strategy, &v1_model) {
            (Strategy::V1Only, Some(v1)) => v1.clone(),
            (Strategy::FineTune, Some(v1)) => {
                let mut m = v1.clone();
                continue_plan(&mut m, &plan, 1, seed)?;
                m
            }
            _ => execute_plan(&plan, vocab.clone(), config, seed)?,
        };
        let report = evaluate(&model, &plan.eval_head, bundle, &bundle.spec.name, strategy.as_str(), seed)?;
        out.push(CellOutcome {
            report,
            fallback: plan.fallback.clone(),
            classifier_accuracy: if strategy.needs_classifier() { classifier_accuracy } else { None },
        });
    }
    Ok(out)
}

/// Accuracy of changed/unchanged decisions on the changed and unchanged test
/// sets (trivially-unchanged queries are never classified).
pub fn classifier_test_accuracy(classifier: &Classifier, bundle: &SplitBundle) -> f64 {
    let mut correct = 0;
    let mut total = 0;
    for (p, want) in [(Partition::Changed, true), (Partition::Unchanged, false)] {
        let qs: Vec<&[String]> = bundle.test_set(p).iter().map(|e| e.tokens.as_slice()).collect();
        for got in classifier.predict_changed(&qs) {
            correct += usize::from(got == want);
            total += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        correct as f64 / total as f64
    }
}

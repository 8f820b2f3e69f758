use update_core::dataset::{build_version_pair, default_updates, generate_toy_corpus, sample_splits, GrammarConfig, SplitBundle, SplitSizes};
use update_core::model::{train, MaskedExample, ParserConfig, ParserModel, TrainOptions};
use update_core::strategies::{
    bundle_vocab, classifier_test_accuracy, filter_v1, train_classifier_on, train_selection_classifier, ClassifierConfig,
    StrategyError,
};

fn small() -> ParserConfig {
    ParserConfig {
        model_dim: 32,
        encoder_ff_dim: 64,
        decoder_ff_dim: 64,
        encoder_layers: 1,
        batch_size: 32,
        train_steps: 300,
        warmup_steps: 30,
        learning_rate: 3e-3,
        max_positions: 64,
        ..ParserConfig::default()
    }
}

fn bundle() -> SplitBundle {
    let corpus = generate_toy_corpus(&GrammarConfig::default(), 0).unwrap();
    let data = build_version_pair(&corpus.examples, &default_updates()[0]).unwrap();
    sample_splits(&data, SplitSizes::default(), 1).unwrap()
}

fn v1_parser(b: &SplitBundle, steps: usize) -> ParserModel {
    let cfg = small();
    let mut model = ParserModel::new(cfg.clone(), bundle_vocab(b), "main", 3).unwrap();
    let data: Vec<MaskedExample> = b
        .v1_train
        .iter()
        .map(|e| MaskedExample::full(e.id.clone(), e.tokens.clone(), e.v1_label.clone().unwrap()))
        .collect();
    let opts = TrainOptions { steps, ..TrainOptions::from_config(&model, 3) };
    train(&mut model, &data, "main", &opts).unwrap();
    model
}

fn quick() -> ClassifierConfig {
    ClassifierConfig { hidden_dim: 64, train_steps: 300, learning_rate: 1e-3, ..ClassifierConfig::default() }
}

#[test]
fn rejects_single_class_data() {
    let b = bundle();
    let parser = v1_parser(&b, 0);
    let data: Vec<(Vec<String>, bool)> = b.v2_train.iter().map(|e| (e.tokens.clone(), false)).collect();
    assert!(matches!(train_classifier_on(&data, &parser, &quick(), 0), Err(StrategyError::SingleClassData)));
    let mut untagged = b.v2_train.clone();
    untagged[0].partition = None;
    assert!(matches!(
        train_selection_classifier(&untagged, &parser, &quick(), 0),
        Err(StrategyError::MissingPartition(_))
    ));
}

#[test]
fn probabilities_and_thresholds() {
    let b = bundle();
    let parser = v1_parser(&b, 0);
    let cfg = ClassifierConfig { train_steps: 5, ..quick() };
    let clf = train_selection_classifier(&b.v2_train, &parser, &cfg, 0).unwrap();
    let queries: Vec<&[String]> = b.v1_train.iter().take(40).map(|e| e.tokens.as_slice()).collect();
    let batch = clf.prob_changed(&queries);
    for (q, p) in queries.iter().zip(&batch) {
        assert!((0.0..=1.0).contains(p));
        // padding in a batch never leaks into a query's score
        assert!((clf.prob_changed(&[*q])[0] - p).abs() < 1e-12);
    }
    let v1 = &b.v1_train[..40];
    let (keep, drop) = filter_v1(&clf.clone().with_threshold(0.0), v1);
    assert_eq!((keep.len(), drop.len()), (0, 40));
    let (keep, drop) = filter_v1(&clf.clone().with_threshold(1.5), v1);
    assert_eq!((keep.len(), drop.len()), (40, 0));
    let (keep, drop) = filter_v1(&clf, v1);
    assert_eq!(keep.len() + drop.len(), 40);
}

#[test]
fn encoder_is_copied_from_parser() {
    let b = bundle();
    let parser = v1_parser(&b, 20);
    let cfg = ClassifierConfig { train_steps: 0, ..quick() };
    let mut data: Vec<(Vec<String>, bool)> = b.v2_train.iter().map(|e| (e.tokens.clone(), false)).collect();
    data[0].1 = true;
    let clf = train_classifier_on(&data, &parser, &cfg, 0).unwrap();
    for (name, value) in parser.params().with_prefix("enc.") {
        assert_eq!(clf.params().get(name).unwrap(), value, "{name}");
    }
    assert!(clf.params().get("cls.ff1.w").is_some());
    assert!(parser.params().with_prefix("head.").count() > 0);
    assert!(clf.params().with_prefix("head.").next().is_none());
}

#[test]
fn learns_to_separate_changed_queries() {
    let b = bundle();
    let parser = v1_parser(&b, 300);
    let clf = train_selection_classifier(&b.v2_train, &parser, &quick(), 7).unwrap();
    let acc = classifier_test_accuracy(&clf, &b);
    assert!(acc >= 0.9, "accuracy {acc}");
}

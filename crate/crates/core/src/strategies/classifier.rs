use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::StrategyError;
use crate::dataset::{Example, Partition};
use crate::model::{encode, init_linear, Adam, BatchStream, Binder, EncoderInput, ParamStore, ParserConfig, ParserModel, Vocab};

/// Schedule and shape of the selection classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub hidden_dim: usize,
    pub train_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub grad_clip: f64,
    /// Examples whose changed probability reaches this value count as changed.
    pub threshold: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            hidden_dim: 512,
            train_steps: 1_000,
            batch_size: 32,
            learning_rate: 1e-4,
            grad_clip: 1.0,
            threshold: 0.5,
        }
    }
}

/// Binary changed/unchanged classifier: the parser's encoder, mean pooling
/// over time, one hidden ReLU layer and a two-way softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    encoder: ParserConfig,
    vocab: Vocab,
    params: ParamStore,
    threshold: f64,
}

const CHANGED: usize = 1;

impl Classifier {
    /// Starts from a copy of `parser`'s encoder and a fresh feed-forward head.
    pub fn from_parser(parser: &ParserModel, cfg: &ClassifierConfig, seed: u64) -> Self {
        let mut params = ParamStore::default();
        for (name, value) in parser.params().with_prefix("enc.") {
            params.insert(name, value.clone());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = parser.config.model_dim;
        init_linear(&mut params, "cls.ff1", d, cfg.hidden_dim, &mut rng);
        init_linear(&mut params, "cls.ff2", cfg.hidden_dim, 2, &mut rng);
        Classifier { encoder: parser.config.clone(), vocab: parser.vocab.clone(), params, threshold: cfg.threshold }
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn with_threshold(self, threshold: f64) -> Self {
        Classifier { threshold, ..self }
    }

    fn logits(&self, b: &mut Binder, queries: &[&[String]]) -> crate::model::tape::Var {
        let input = EncoderInput::new(&self.vocab, queries, self.encoder.max_positions);
        let enc = encode(b, &self.encoder, &input);
        let pooled = b.tape.mean_pool(enc, input.segs.clone());
        let h = b.linear(pooled, "cls.ff1");
        let h = b.tape.relu(h);
        b.linear(h, "cls.ff2")
    }

    /// Probability that each query belongs to the changed partition.
    pub fn prob_changed<S: AsRef<[String]>>(&self, queries: &[S]) -> Vec<f64> {
        let mut out = Vec::with_capacity(queries.len());
        for chunk in queries.chunks(256) {
            let qs: Vec<&[String]> = chunk.iter().map(|q| q.as_ref()).collect();
            let mut b = Binder::new(&self.params);
            let logits = self.logits(&mut b, &qs);
            for row in b.tape.value(logits).rows() {
                let (u, c) = (row[0], row[1]);
                out.push(1.0 / (1.0 + (u - c).exp()));
            }
        }
        out
    }

    /// True for queries predicted to be changed by the update.
    pub fn predict_changed<S: AsRef<[String]>>(&self, queries: &[S]) -> Vec<bool> {
        self.prob_changed(queries).into_iter().map(|p| p >= self.threshold).collect()
    }
}

/// Trains on V2 examples, using their annotated partition as the label.
pub fn train_selection_classifier(
    v2_train: &[Example],
    v1_parser: &ParserModel,
    cfg: &ClassifierConfig,
    seed: u64,
) -> Result<Classifier, StrategyError> {
    let labelled: Vec<(Vec<String>, bool)> = v2_train
        .iter()
        .map(|e| {
            let p = e.partition.ok_or_else(|| StrategyError::MissingPartition(e.id.clone()))?;
            Ok((e.tokens.clone(), p == Partition::Changed))
        })
        .collect::<Result<_, StrategyError>>()?;
    train_classifier_on(&labelled, v1_parser, cfg, seed)
}

/// Trains on explicit `(tokens, is_changed)` pairs.
pub fn train_classifier_on(
    data: &[(Vec<String>, bool)],
    v1_parser: &ParserModel,
    cfg: &ClassifierConfig,
    seed: u64,
) -> Result<Classifier, StrategyError> {
    let n_changed = data.iter().filter(|(_, c)| *c).count();
    if n_changed == 0 || n_changed == data.len() {
        return Err(StrategyError::SingleClassData);
    }
    let mut clf = Classifier::from_parser(v1_parser, cfg, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut stream = BatchStream::new(data);
    let mut adam = Adam::new(&clf.params);
    for _ in 0..cfg.train_steps {
        let batch = stream.next(cfg.batch_size, &mut rng);
        let qs: Vec<&[String]> = batch.iter().map(|(t, _)| t.as_slice()).collect();
        let targets: Vec<usize> = batch.iter().map(|(_, c)| if *c { CHANGED } else { 0 }).collect();
        let mut grads = {
            let mut b = Binder::new(&clf.params);
            let logits = clf.logits(&mut b, &qs);
            let loss = b.tape.softmax_xent(logits, targets);
            b.tape.backward(loss, clf.params.len()).grads
        };
        adam.step(&mut clf.params, &mut grads, cfg.learning_rate, cfg.grad_clip);
    }
    Ok(clf)
}

/// Splits V1 examples (trivially-unchanged ones already excluded) into
/// predicted-unchanged and predicted-changed, preserving order.
pub fn filter_v1(classifier: &Classifier, v1_train: &[Example]) -> (Vec<Example>, Vec<Example>) {
    let queries: Vec<&[String]> = v1_train.iter().map(|e| e.tokens.as_slice()).collect();
    let changed = classifier.predict_changed(&queries);
    let mut keep = Vec::new();
    let mut drop = Vec::new();
    for (e, c) in v1_train.iter().zip(changed) {
        if c {
            drop.push(e.clone());
        } else {
            keep.push(e.clone());
        }
    }
    (keep, drop)
}

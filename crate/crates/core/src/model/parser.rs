use std::collections::{BTreeSet, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::{uniform, xavier, Binder, ParamStore};
use super::tape::{action_scores, Mat, RowTarget, Segment, Var};
use super::ModelError;
use crate::dataset::Example;
use crate::parsetree::{delinearize_lenient, linearize, Action, ActionSequence, ParseTree};

/// Architecture and optimisation settings. `Default` is the desk-scale
/// setting; [`ParserConfig::full_scale`] holds the published values.
///
/// The encoder is a small self-attention stack trained from scratch with
/// learned token embeddings, standing in for a pretrained 12-layer encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ParserConfig {
    pub encoder_layers: usize,
    pub encoder_ff_dim: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub decoder_layers: usize,
    pub decoder_ff_dim: usize,
    pub batch_size: usize,
    pub train_steps: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub max_positions: usize,
    /// Global gradient-norm clip; zero disables clipping.
    pub grad_clip: f64,
}

impl ParserConfig {
    pub fn full_scale() -> Self {
        ParserConfig {
            encoder_layers: 2,
            encoder_ff_dim: 256,
            model_dim: 256,
            heads: 2,
            decoder_layers: 1,
            decoder_ff_dim: 256,
            batch_size: 512,
            train_steps: 50_000,
            learning_rate: 3e-4,
            warmup_steps: 10_000,
            max_positions: 128,
            grad_clip: 1.0,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("encoder_layers", self.encoder_layers),
            ("encoder_ff_dim", self.encoder_ff_dim),
            ("model_dim", self.model_dim),
            ("heads", self.heads),
            ("decoder_layers", self.decoder_layers),
            ("decoder_ff_dim", self.decoder_ff_dim),
            ("batch_size", self.batch_size),
            ("max_positions", self.max_positions),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::InvalidConfig(format!("{name} must be positive")));
        }
        if self.model_dim % self.heads != 0 {
            return Err(ModelError::InvalidConfig("model_dim must be divisible by heads".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(ModelError::InvalidConfig("learning_rate must be positive".into()));
        }
        if self.warmup_steps > self.train_steps {
            return Err(ModelError::InvalidConfig("warmup_steps exceeds train_steps".into()));
        }
        Ok(())
    }
}

impl Default for ParserConfig {
    fn default() -> Self {
        ParserConfig { train_steps: 5_000, batch_size: 64, warmup_steps: 500, ..ParserConfig::full_scale() }
    }
}

/// Query words and tree labels known to a model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabParts", into = "VocabParts")]
pub struct Vocab {
    words: Vec<String>,
    labels: Vec<String>,
    word_ix: HashMap<String, usize>,
    label_ix: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabParts {
    words: Vec<String>,
    labels: Vec<String>,
}

impl From<VocabParts> for Vocab {
    fn from(p: VocabParts) -> Self {
        Vocab::new(p.words, p.labels)
    }
}

impl From<Vocab> for VocabParts {
    fn from(v: Vocab) -> Self {
        VocabParts { words: v.words, labels: v.labels }
    }
}

pub const UNK: &str = "<unk>";

impl Vocab {
    /// `words[0]` is always the unknown-word entry.
    pub fn new(words: Vec<String>, labels: Vec<String>) -> Self {
        let mut all = vec![UNK.to_string()];
        all.extend(words.into_iter().filter(|w| w != UNK));
        let word_ix = all.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        let label_ix = labels.iter().enumerate().map(|(i, l)| (l.clone(), i)).collect();
        Vocab { words: all, labels, word_ix, label_ix }
    }

    /// Sorted words and labels of every example and label it is given.
    pub fn from_examples<'a>(examples: impl IntoIterator<Item = &'a Example>) -> Self {
        let mut words = BTreeSet::new();
        let mut labels = BTreeSet::new();
        for e in examples {
            words.extend(e.tokens.iter().cloned());
            for t in e.v1_label.iter().chain(e.v2_label.iter()) {
                labels.extend(t.labels().into_iter().map(String::from));
            }
        }
        Vocab::new(words.into_iter().collect(), labels.into_iter().collect())
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn word_id(&self, w: &str) -> usize {
        self.word_ix.get(w).copied().unwrap_or(0)
    }

    /// Output actions before copies: CLOSE, then one OPEN per label.
    pub fn n_actions(&self) -> usize {
        1 + self.labels.len()
    }

    /// Decoder input symbols: BOS, CLOSE, one per label, COPY.
    fn n_inputs(&self) -> usize {
        3 + self.labels.len()
    }

    fn copy_input(&self) -> usize {
        2 + self.labels.len()
    }

    /// Output index of an action; copies follow the fixed actions.
    pub fn action_index(&self, a: &Action) -> Result<usize, ModelError> {
        match a {
            Action::Close => Ok(0),
            Action::Open(l) => {
                self.label_ix.get(l).map(|i| i + 1).ok_or_else(|| ModelError::UnknownLabel(l.clone()))
            }
            Action::Copy(j) => Ok(self.n_actions() + j),
        }
    }

    pub fn action_at(&self, index: usize) -> Action {
        match index {
            0 => Action::Close,
            i if i <= self.labels.len() => Action::Open(self.labels[i - 1].clone()),
            i => Action::Copy(i - self.n_actions()),
        }
    }

    fn input_id(&self, a: &Action) -> Result<usize, ModelError> {
        match a {
            Action::Close => Ok(1),
            Action::Open(l) => self.label_ix.get(l).map(|i| i + 2).ok_or_else(|| ModelError::UnknownLabel(l.clone())),
            Action::Copy(_) => Ok(self.copy_input()),
        }
    }
}

/// A training target with a per-action loss mask.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedExample {
    pub id: String,
    pub tokens: Vec<String>,
    pub target: ParseTree,
    pub loss_mask: Vec<bool>,
}

impl MaskedExample {
    pub fn full(id: impl Into<String>, tokens: Vec<String>, target: ParseTree) -> Self {
        let n = linearize(&target).len();
        MaskedExample { id: id.into(), tokens, target, loss_mask: vec![true; n] }
    }

    /// Only the root intent (action 0) is supervised.
    pub fn intent_only(id: impl Into<String>, tokens: Vec<String>, target: ParseTree) -> Self {
        let n = linearize(&target).len();
        let mut loss_mask = vec![false; n];
        loss_mask[0] = true;
        MaskedExample { id: id.into(), tokens, target, loss_mask }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadInit {
    Fresh { seed: u64 },
    CloneOf(String),
}

/// Result of greedy decoding. `valid` is false when the action sequence did
/// not form a well-formed tree; `tree` is then a best-effort reconstruction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub tree: ParseTree,
    pub valid: bool,
    pub actions: ActionSequence,
}

/// Packed encoder-side input of a batch.
pub(crate) struct EncoderInput {
    word_ids: Vec<usize>,
    positions: Vec<usize>,
    pub segs: Vec<(usize, usize)>,
}

impl EncoderInput {
    pub fn new<S: AsRef<str>>(vocab: &Vocab, queries: &[&[S]], max_positions: usize) -> Self {
        let mut word_ids = Vec::new();
        let mut positions = Vec::new();
        let mut segs = Vec::with_capacity(queries.len());
        for q in queries {
            let start = word_ids.len();
            if q.is_empty() {
                word_ids.push(0);
                positions.push(0);
            }
            for (i, w) in q.iter().enumerate() {
                word_ids.push(vocab.word_id(w.as_ref()));
                positions.push(i.min(max_positions - 1));
            }
            segs.push((start, word_ids.len() - start));
        }
        EncoderInput { word_ids, positions, segs }
    }
}

struct DecoderInput {
    ids: Vec<usize>,
    copy_rows: Vec<Option<usize>>,
    positions: Vec<usize>,
    segs: Vec<Segment>,
}

impl DecoderInput {
    /// Inputs are `[BOS] + prefix` for each example.
    fn new(vocab: &Vocab, enc_segs: &[(usize, usize)], prefixes: &[(usize, &[Action])], max_positions: usize) -> Result<Self, ModelError> {
        let mut d = DecoderInput { ids: Vec::new(), copy_rows: Vec::new(), positions: Vec::new(), segs: Vec::new() };
        for &(ex, prefix) in prefixes {
            let (es, el) = enc_segs[ex];
            let start = d.ids.len();
            d.ids.push(0);
            d.copy_rows.push(None);
            for a in prefix {
                d.ids.push(vocab.input_id(a)?);
                d.copy_rows.push(match a {
                    Action::Copy(j) if *j < el => Some(es + j),
                    _ => None,
                });
            }
            let len = d.ids.len() - start;
            d.positions.extend((0..len).map(|i| i.min(max_positions - 1)));
            d.segs.push(Segment { q_start: start, q_len: len, k_start: es, k_len: el });
        }
        Ok(d)
    }
}

/// Loss value plus gradients, for diagnostics and gradient checks.
pub struct LossGradients {
    pub loss: f64,
    /// Indexed like [`ParserModel::params`]; `None` for parameters the loss
    /// does not reach.
    pub params: Vec<Option<Mat>>,
    /// Gradient with respect to the vocabulary logits, one row per decoder step.
    pub logits: Mat,
}

/// Transformer encoder-decoder whose decoder chooses among CLOSE, OPEN(label)
/// and COPY(token) at each step. Output heads (a vocabulary projection plus a
/// copy-query projection) are named; everything else is shared.
#[derive(Debug, Clone, PartialEq)]
pub struct ParserModel {
    pub config: ParserConfig,
    pub vocab: Vocab,
    params: ParamStore,
    heads: Vec<String>,
    active_head: String,
}

fn init_encoder(params: &mut ParamStore, cfg: &ParserConfig, n_words: usize, rng: &mut ChaCha8Rng) {
    let d = cfg.model_dim;
    params.insert("enc.word_emb", uniform(rng, n_words, d, 0.5));
    params.insert("enc.pos_emb", uniform(rng, cfg.max_positions, d, 0.1));
    for l in 0..cfg.encoder_layers {
        let p = format!("enc.{l}");
        init_ln(params, &format!("{p}.ln1"), d);
        for proj in ["q", "k", "v", "o"] {
            init_linear(params, &format!("{p}.attn.{proj}"), d, d, rng);
        }
        init_ln(params, &format!("{p}.ln2"), d);
        init_linear(params, &format!("{p}.ff1"), d, cfg.encoder_ff_dim, rng);
        init_linear(params, &format!("{p}.ff2"), cfg.encoder_ff_dim, d, rng);
    }
    init_ln(params, "enc.ln", d);
}

pub(crate) fn init_linear(params: &mut ParamStore, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) {
    params.insert(format!("{prefix}.w"), xavier(rng, fan_in, fan_out));
    params.insert(format!("{prefix}.b"), Mat::zeros((1, fan_out)));
}

fn init_ln(params: &mut ParamStore, prefix: &str, d: usize) {
    params.insert(format!("{prefix}.g"), Mat::ones((1, d)));
    params.insert(format!("{prefix}.b"), Mat::zeros((1, d)));
}

fn attention_block(b: &mut Binder, x: Var, kv: Var, prefix: &str, segs: Vec<Segment>, heads: usize, causal: bool) -> Var {
    let q = b.linear(x, &format!("{prefix}.q"));
    let k = b.linear(kv, &format!("{prefix}.k"));
    let v = b.linear(kv, &format!("{prefix}.v"));
    let a = b.tape.attention(q, k, v, segs, heads, causal);
    b.linear(a, &format!("{prefix}.o"))
}

fn ff_block(b: &mut Binder, x: Var, prefix: &str) -> Var {
    let h = b.linear(x, &format!("{prefix}.ff1"));
    let h = b.tape.relu(h);
    b.linear(h, &format!("{prefix}.ff2"))
}

/// Runs the shared encoder; returns the final layer-normed token states.
pub(crate) fn encode(b: &mut Binder, cfg: &ParserConfig, input: &EncoderInput) -> Var {
    let emb = b.p("enc.word_emb");
    let pos = b.p("enc.pos_emb");
    let we = b.tape.gather(emb, input.word_ids.iter().map(|&i| Some(i)).collect());
    let pe = b.tape.gather(pos, input.positions.iter().map(|&i| Some(i)).collect());
    let mut x = b.tape.add(we, pe);
    let segs: Vec<Segment> =
        input.segs.iter().map(|&(s, l)| Segment { q_start: s, q_len: l, k_start: s, k_len: l }).collect();
    for l in 0..cfg.encoder_layers {
        let p = format!("enc.{l}");
        let h = b.layer_norm(x, &format!("{p}.ln1"));
        let a = attention_block(b, h, h, &format!("{p}.attn"), segs.clone(), cfg.heads, false);
        x = b.tape.add(x, a);
        let h = b.layer_norm(x, &format!("{p}.ln2"));
        let f = ff_block(b, h, &p);
        x = b.tape.add(x, f);
    }
    b.layer_norm(x, "enc.ln")
}

impl ParserModel {
    pub fn new(config: ParserConfig, vocab: Vocab, head: &str, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::default();
        let d = config.model_dim;
        init_encoder(&mut params, &config, vocab.words().len(), &mut rng);
        params.insert("dec.emb", uniform(&mut rng, vocab.n_inputs(), d, 0.5));
        params.insert("dec.pos_emb", uniform(&mut rng, config.max_positions, d, 0.1));
        for l in 0..config.decoder_layers {
            let p = format!("dec.{l}");
            init_ln(&mut params, &format!("{p}.ln1"), d);
            for proj in ["q", "k", "v", "o"] {
                init_linear(&mut params, &format!("{p}.self.{proj}"), d, d, &mut rng);
            }
            init_ln(&mut params, &format!("{p}.ln2"), d);
            for proj in ["q", "k", "v", "o"] {
                init_linear(&mut params, &format!("{p}.cross.{proj}"), d, d, &mut rng);
            }
            init_ln(&mut params, &format!("{p}.ln3"), d);
            init_linear(&mut params, &format!("{p}.ff1"), d, config.decoder_ff_dim, &mut rng);
            init_linear(&mut params, &format!("{p}.ff2"), config.decoder_ff_dim, d, &mut rng);
        }
        init_ln(&mut params, "dec.ln", d);
        let mut model = ParserModel { config, vocab, params, heads: Vec::new(), active_head: head.to_string() };
        model.insert_fresh_head(head, &mut rng);
        Ok(model)
    }

    fn insert_fresh_head(&mut self, name: &str, rng: &mut ChaCha8Rng) {
        let d = self.config.model_dim;
        // small output weights keep the initial action distribution near uniform
        self.params.insert(format!("head.{name}.out.w"), uniform(rng, d, self.vocab.n_actions(), 0.02));
        self.params.insert(format!("head.{name}.out.b"), Mat::zeros((1, self.vocab.n_actions())));
        self.params.insert(format!("head.{name}.copy.w"), uniform(rng, d, d, 0.02));
        self.heads.push(name.to_string());
    }

    pub fn heads(&self) -> &[String] {
        &self.heads
    }

    pub fn active_head(&self) -> &str {
        &self.active_head
    }

    pub fn set_active_head(&mut self, name: &str) -> Result<(), ModelError> {
        self.check_head(name)?;
        self.active_head = name.to_string();
        Ok(())
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub(crate) fn from_parts(
        config: ParserConfig,
        vocab: Vocab,
        params: ParamStore,
        heads: Vec<String>,
        active_head: String,
    ) -> Self {
        ParserModel { config, vocab, params, heads, active_head }
    }

    pub fn check_head(&self, name: &str) -> Result<(), ModelError> {
        if self.heads.iter().any(|h| h == name) {
            Ok(())
        } else {
            Err(ModelError::UnknownHead(name.to_string()))
        }
    }

    /// Adds an output head; the shared encoder and decoder body are untouched.
    pub fn add_head(&mut self, name: &str, init: HeadInit) -> Result<(), ModelError> {
        if self.heads.iter().any(|h| h == name) {
            return Err(ModelError::DuplicateHead(name.to_string()));
        }
        match init {
            HeadInit::Fresh { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                self.insert_fresh_head(name, &mut rng);
            }
            HeadInit::CloneOf(src) => {
                self.check_head(&src)?;
                for part in ["out.w", "out.b", "copy.w"] {
                    let value = self.params.get(&format!("head.{src}.{part}")).expect("head parameters").clone();
                    self.params.insert(format!("head.{name}.{part}"), value);
                }
                self.heads.push(name.to_string());
            }
        }
        Ok(())
    }

    fn decode_hidden(&self, b: &mut Binder, enc: Var, dec: &DecoderInput) -> Var {
        let cfg = &self.config;
        let emb = b.p("dec.emb");
        let pos = b.p("dec.pos_emb");
        let e = b.tape.gather(emb, dec.ids.iter().map(|&i| Some(i)).collect());
        let c = b.tape.gather(enc, dec.copy_rows.clone());
        let p = b.tape.gather(pos, dec.positions.iter().map(|&i| Some(i)).collect());
        let x = b.tape.add(e, c);
        let mut x = b.tape.add(x, p);
        let self_segs: Vec<Segment> =
            dec.segs.iter().map(|s| Segment { k_start: s.q_start, k_len: s.q_len, ..*s }).collect();
        for l in 0..cfg.decoder_layers {
            let pre = format!("dec.{l}");
            let h = b.layer_norm(x, &format!("{pre}.ln1"));
            let a = attention_block(b, h, h, &format!("{pre}.self"), self_segs.clone(), cfg.heads, true);
            x = b.tape.add(x, a);
            let h = b.layer_norm(x, &format!("{pre}.ln2"));
            let a = attention_block(b, h, enc, &format!("{pre}.cross"), dec.segs.clone(), cfg.heads, false);
            x = b.tape.add(x, a);
            let h = b.layer_norm(x, &format!("{pre}.ln3"));
            let f = ff_block(b, h, &pre);
            x = b.tape.add(x, f);
        }
        b.layer_norm(x, "dec.ln")
    }

    /// Vocabulary logits and copy queries of `head` for decoder states `h`.
    fn head_outputs(&self, b: &mut Binder, head: &str, h: Var) -> (Var, Var) {
        let logits = b.linear(h, &format!("head.{head}.out"));
        let cw = b.p(&format!("head.{head}.copy.w"));
        let query = b.tape.matmul(h, cw);
        (logits, query)
    }

    /// Builds the teacher-forced loss of `batch` on `tape`.
    fn loss_on_tape(&self, b: &mut Binder, batch: &[MaskedExample], head: &str) -> Result<(Var, Var), ModelError> {
        let queries: Vec<&[String]> = batch.iter().map(|e| e.tokens.as_slice()).collect();
        let enc_in = EncoderInput::new(&self.vocab, &queries, self.config.max_positions);
        let seqs: Vec<ActionSequence> = batch.iter().map(|e| linearize(&e.target)).collect();
        let mut rows = Vec::new();
        for (e, seq) in batch.iter().zip(&seqs) {
            if e.loss_mask.len() != seq.len() {
                return Err(ModelError::MaskLength { id: e.id.clone(), mask: e.loss_mask.len(), actions: seq.len() });
            }
            let n_tokens = e.tokens.len().max(1);
            for (a, &m) in seq.iter().zip(&e.loss_mask) {
                let target = self.vocab.action_index(a)?;
                if let Action::Copy(j) = a {
                    if *j >= n_tokens {
                        return Err(ModelError::CopyOutOfRange { id: e.id.clone(), index: *j });
                    }
                }
                rows.push(RowTarget { target, weight: if m { 1.0 } else { 0.0 } });
            }
        }
        // decoder input at step t is the gold action t - 1
        let prefixes: Vec<(usize, &[Action])> =
            seqs.iter().enumerate().map(|(i, s)| (i, &s[..s.len() - 1])).collect();
        let dec_in = DecoderInput::new(&self.vocab, &enc_in.segs, &prefixes, self.config.max_positions)?;
        let enc = encode(b, &self.config, &enc_in);
        let h = self.decode_hidden(b, enc, &dec_in);
        let (logits, query) = self.head_outputs(b, head, h);
        let loss = b.tape.action_xent(logits, query, enc, dec_in.segs.clone(), rows);
        Ok((loss, logits))
    }

    /// Mean cross-entropy over unmasked action positions under teacher forcing.
    pub fn loss(&self, batch: &[MaskedExample], head: &str) -> Result<f64, ModelError> {
        self.check_head(head)?;
        let mut b = Binder::new(&self.params);
        let (loss, _) = self.loss_on_tape(&mut b, batch, head)?;
        Ok(b.tape.value(loss)[[0, 0]])
    }

    pub fn loss_and_gradients(&self, batch: &[MaskedExample], head: &str) -> Result<LossGradients, ModelError> {
        self.check_head(head)?;
        let mut b = Binder::new(&self.params);
        let (loss, logits) = self.loss_on_tape(&mut b, batch, head)?;
        let (grads, kept) = b.tape.backward_keeping(loss, self.params.len(), &[logits]);
        let logits_grad = kept.into_iter().next().flatten().unwrap_or_else(|| Mat::zeros(b.tape.value(logits).raw_dim()));
        Ok(LossGradients { loss: b.tape.value(loss)[[0, 0]], params: grads.grads, logits: logits_grad })
    }

    /// Mean over several (batch, head) streams, for multi-head training.
    pub(crate) fn multi_stream_gradients(&self, streams: &[(&[MaskedExample], &str)]) -> Result<(f64, Vec<Option<Mat>>), ModelError> {
        let mut b = Binder::new(&self.params);
        let mut total: Option<Var> = None;
        for (batch, head) in streams {
            self.check_head(head)?;
            let (l, _) = self.loss_on_tape(&mut b, batch, head)?;
            total = Some(match total {
                Some(t) => b.tape.add(t, l),
                None => l,
            });
        }
        let total = total.ok_or(ModelError::EmptyData)?;
        let mean = b.tape.scale(total, 1.0 / streams.len() as f64);
        let grads = b.tape.backward(mean, self.params.len());
        Ok((b.tape.value(mean)[[0, 0]], grads.grads))
    }

    pub fn predict<S: AsRef<str>>(&self, query_tokens: &[S], head: &str) -> Result<Prediction, ModelError> {
        Ok(self.predict_batch(&[query_tokens], head)?.remove(0))
    }

    /// Greedy decoding until the root bracket closes or `2·|tokens| + 64`
    /// actions have been emitted. Copies can only point into the query.
    pub fn predict_batch<S: AsRef<str>>(&self, queries: &[&[S]], head: &str) -> Result<Vec<Prediction>, ModelError> {
        self.check_head(head)?;
        const CHUNK: usize = 128;
        let mut out = Vec::with_capacity(queries.len());
        for chunk in queries.chunks(CHUNK) {
            out.extend(self.predict_chunk(chunk, head)?);
        }
        Ok(out)
    }

    fn predict_chunk<S: AsRef<str>>(&self, queries: &[&[S]], head: &str) -> Result<Vec<Prediction>, ModelError> {
        let enc_in = EncoderInput::new(&self.vocab, queries, self.config.max_positions);
        let enc_value = {
            let mut b = Binder::new(&self.params);
            let enc = encode(&mut b, &self.config, &enc_in);
            b.tape.value(enc).clone()
        };
        let n = queries.len();
        let caps: Vec<usize> = queries.iter().map(|q| 2 * q.len() + 64).collect();
        let mut seqs: Vec<ActionSequence> = vec![Vec::new(); n];
        let mut depth = vec![0i64; n];
        let mut done = vec![false; n];
        while done.iter().any(|d| !d) {
            let active: Vec<usize> = (0..n).filter(|&i| !done[i]).collect();
            let prefixes: Vec<(usize, &[Action])> = active.iter().map(|&i| (i, seqs[i].as_slice())).collect();
            let dec_in = DecoderInput::new(&self.vocab, &enc_in.segs, &prefixes, self.config.max_positions)?;
            let mut b = Binder::new(&self.params);
            let enc = b.tape.constant(enc_value.clone());
            let h = self.decode_hidden(&mut b, enc, &dec_in);
            let (logits, query) = self.head_outputs(&mut b, head, h);
            let last: Vec<Segment> = dec_in
                .segs
                .iter()
                .map(|s| Segment { q_start: s.q_start + s.q_len - 1, q_len: 1, ..*s })
                .collect();
            let scores = action_scores(b.tape.value(logits), b.tape.value(query), &enc_value, &last);
            for (seg, &i) in last.iter().zip(&active) {
                let sc = &scores[seg.q_start];
                let best = argmax(sc);
                let action = self.vocab.action_at(best);
                match action {
                    Action::Open(_) => depth[i] += 1,
                    Action::Close => depth[i] -= 1,
                    Action::Copy(_) => {}
                }
                seqs[i].push(action);
                if depth[i] <= 0 || seqs[i].len() >= caps[i] {
                    done[i] = true;
                }
            }
        }
        Ok(seqs
            .into_iter()
            .zip(queries)
            .map(|(actions, q)| {
                let (tree, valid) = delinearize_lenient(&actions, q);
                Prediction { tree, valid, actions }
            })
            .collect())
    }
}

/// First index of the maximum; NaN never wins.
fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] || xs[best].is_nan() {
            best = i;
        }
    }
    best
}

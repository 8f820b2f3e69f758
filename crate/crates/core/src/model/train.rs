use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::parser::{MaskedExample, ParserModel};
use super::tape::Mat;
use super::ModelError;

/// Step-size schedule and optimiser settings of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub grad_clip: f64,
    pub seed: u64,
}

impl TrainOptions {
    pub fn from_config(model: &ParserModel, seed: u64) -> Self {
        let c = &model.config;
        TrainOptions {
            steps: c.train_steps,
            batch_size: c.batch_size,
            learning_rate: c.learning_rate,
            warmup_steps: c.warmup_steps,
            grad_clip: c.grad_clip,
            seed,
        }
    }

    /// Linear warmup to the peak rate, then constant.
    pub fn rate_at(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 || step >= self.warmup_steps {
            self.learning_rate
        } else {
            self.learning_rate * (step + 1) as f64 / self.warmup_steps as f64
        }
    }
}

/// Adam with bias correction.
pub struct Adam {
    m: Vec<Mat>,
    v: Vec<Mat>,
    t: i32,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Mat> = params.iter().map(|(_, m)| Mat::zeros(m.raw_dim())).collect();
        Adam { m: zeros.clone(), v: zeros, t: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    /// Applies one update. Parameters without a gradient keep their value and
    /// moments, so heads not in the batch are left untouched.
    pub fn step(&mut self, params: &mut ParamStore, grads: &mut [Option<Mat>], lr: f64, clip: f64) {
        if clip > 0.0 {
            let norm = grads.iter().flatten().map(|g| g.iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
            if norm > clip {
                let s = clip / norm;
                grads.iter_mut().flatten().for_each(|g| g.mapv_inplace(|x| x * s));
            }
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let p = params.value_at_mut(i);
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
        }
    }
}

/// Losses recorded during training, one per step.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub losses: Vec<f64>,
}

/// Cycles through shuffled epochs of a dataset, reshuffling each pass.
pub(crate) struct BatchStream<'a, T> {
    data: &'a [T],
    order: Vec<usize>,
    pos: usize,
}

impl<'a, T: Clone> BatchStream<'a, T> {
    pub fn new(data: &'a [T]) -> Self {
        BatchStream { data, order: (0..data.len()).collect(), pos: data.len() }
    }

    pub fn next(&mut self, n: usize, rng: &mut ChaCha8Rng) -> Vec<T> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.data[self.order[self.pos]].clone());
            self.pos += 1;
        }
        out
    }
}

/// Trains `head` on `data` and returns the per-step losses.
pub fn train(model: &mut ParserModel, data: &[MaskedExample], head: &str, opts: &TrainOptions) -> Result<TrainLog, ModelError> {
    train_streams(model, &[(data, head)], opts)
}

/// Trains on several (dataset, head) streams at once. Every step draws an
/// equal share of the batch from each stream, and the step's loss is the mean
/// of the per-stream losses.
pub fn train_streams(model: &mut ParserModel, streams: &[(&[MaskedExample], &str)], opts: &TrainOptions) -> Result<TrainLog, ModelError> {
    if streams.is_empty() || streams.iter().any(|(d, _)| d.is_empty()) {
        return Err(ModelError::EmptyData);
    }
    for (_, head) in streams {
        model.check_head(head)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut iters: Vec<BatchStream<MaskedExample>> = streams.iter().map(|(d, _)| BatchStream::new(d)).collect();
    let share = (opts.batch_size / streams.len()).max(1);
    let mut adam = Adam::new(model.params());
    let mut log = TrainLog::default();
    for step in 0..opts.steps {
        let batches: Vec<Vec<MaskedExample>> = iters.iter_mut().map(|it| it.next(share, &mut rng)).collect();
        let refs: Vec<(&[MaskedExample], &str)> =
            batches.iter().zip(streams).map(|(b, (_, h))| (b.as_slice(), *h)).collect();
        let (loss, mut grads) = model.multi_stream_gradients(&refs)?;
        if !loss.is_finite() {
            return Err(ModelError::NonFiniteLoss { step });
        }
        adam.step(model.params_mut(), &mut grads, opts.rate_at(step), opts.grad_clip);
        log.losses.push(loss);
    }
    Ok(log)
}

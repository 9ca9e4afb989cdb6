//! Adam training with linear warmup.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{Task, TrainHyper};
use super::forward::{loss_and_grads_impl, Example};
use super::params::{ModelParams, ParamSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    /// 1-based.
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub trace: Vec<StepLog>,
}

/// Cycles through the corpus in reshuffled epochs.
struct Batches {
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
    batch_size: usize,
}

impl Batches {
    fn new(n: usize, batch_size: usize, seed: u64) -> Self {
        let mut b = Batches {
            order: (0..n).collect(),
            cursor: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            batch_size: batch_size.min(n),
        };
        b.order.shuffle(&mut b.rng);
        b
    }

    fn next(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch_size);
        while out.len() < self.batch_size {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

struct Adam {
    m: ParamSet,
    v: ParamSet,
    t: i32,
}

impl Adam {
    fn new(like: &ParamSet) -> Self {
        Adam {
            m: like.zeros_like(),
            v: like.zeros_like(),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut ModelParams, grads: &ParamSet, lr: f64, h: &TrainHyper) {
        self.t += 1;
        let c1 = 1.0 - h.beta1.powi(self.t);
        let c2 = 1.0 - h.beta2.powi(self.t);
        let frozen = &params.frozen;
        let tensors = params.tensors.named_mut();
        let grads = grads.named();
        let ms = self.m.named_mut();
        let vs = self.v.named_mut();
        for ((((name, theta), (_, g)), (_, m)), (_, v)) in tensors.into_iter().zip(grads).zip(ms).zip(vs) {
            if frozen.contains(&name) {
                continue;
            }
            for (((th, &gi), mi), vi) in theta.iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = h.beta1 * *mi + (1.0 - h.beta1) * gi;
                *vi = h.beta2 * *vi + (1.0 - h.beta2) * gi * gi;
                *th -= lr * (*mi / c1) / ((*vi / c2).sqrt() + h.eps);
            }
        }
    }
}

/// Trains for `hyper.steps` steps.
pub fn train(params: ModelParams, corpus: &[Example], hyper: &TrainHyper) -> Result<TrainOutcome> {
    train_until(params, corpus, hyper, |_, _| false)
}

/// Like [`train`], but stops early once `stop` returns true after a step.
pub fn train_until(
    mut params: ModelParams,
    corpus: &[Example],
    hyper: &TrainHyper,
    mut stop: impl FnMut(&StepLog, &ModelParams) -> bool,
) -> Result<TrainOutcome> {
    hyper.validate()?;
    if corpus.is_empty() {
        return Err(Error::invalid("training corpus is empty"));
    }
    let mut batches = Batches::new(corpus.len(), hyper.batch_size, hyper.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(hyper.seed.wrapping_add(1));
    let mut adam = Adam::new(&params.tensors);
    let mut trace = Vec::with_capacity(hyper.steps);
    let mut batch = Vec::with_capacity(hyper.batch_size);

    for step in 1..=hyper.steps {
        batch.clear();
        batch.extend(batches.next().into_iter().map(|i| corpus[i].clone()));
        let rng = (params.config.dropout > 0.0).then_some(&mut dropout_rng);
        let (loss, grads) = loss_and_grads_impl(&params, &batch, rng)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        let lr = hyper.lr_at(step);
        adam.step(&mut params, &grads, lr, hyper);
        if !params.tensors.all_finite() {
            return Err(Error::Diverged { step, loss: f64::NAN });
        }
        let log = StepLog { step, loss, lr };
        trace.push(log);
        if stop(&log, &params) {
            break;
        }
    }
    Ok(TrainOutcome { params, trace })
}

/// Image-to-text pretraining: the same loop on a text-task model whose
/// targets are word ids.
pub fn pretrain_text(params: ModelParams, corpus: &[Example], hyper: &TrainHyper) -> Result<TrainOutcome> {
    if params.task != Task::Text {
        return Err(Error::invalid("pretrain_text needs a text-task model"));
    }
    train(params, corpus, hyper)
}

/// `step<TAB>loss<TAB>lr` lines under a header.
pub fn trace_to_text(trace: &[StepLog]) -> String {
    let mut out = String::from("step\tloss\tlr\n");
    for s in trace {
        out.push_str(&format!("{}\t{:.8}\t{:.8e}\n", s.step, s.loss, s.lr));
    }
    out
}

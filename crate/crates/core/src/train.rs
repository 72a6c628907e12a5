//! Optimisers and minibatching shared by every training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{Example, MixTransformer};
use crate::params::{check_grads, ParamSet};

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        let zeros: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor]) -> Result<()> {
        check_grads(params, grads)?;
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (i, g) in grads.iter().enumerate() {
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let p = params.get_mut(i).data_mut();
            for (((p, m), v), g) in p.iter_mut().zip(m).zip(v).zip(g.data()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Endless seeded minibatch stream: each pass over the data is a fresh
/// shuffle.
#[derive(Clone, Debug)]
pub struct Batcher {
    order: Vec<usize>,
    cursor: usize,
    batch_size: usize,
    rng: ChaCha8Rng,
}

impl Batcher {
    pub fn new(len: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if len == 0 {
            return Err(Error::Empty("training data"));
        }
        if batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        let mut b = Batcher {
            order: (0..len).collect(),
            cursor: 0,
            batch_size: batch_size.min(len),
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        b.order.shuffle(&mut b.rng);
        Ok(b)
    }

    pub fn next_indices(&mut self) -> Vec<usize> {
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

    pub fn next_batch<T: Clone>(&mut self, data: &[T]) -> Vec<T> {
        self.next_indices().into_iter().map(|i| data[i].clone()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 32,
            lr: 2e-3,
        }
    }
}

/// Adam on the composite loss. Returns the mean total loss of each
/// consecutive window of 100 steps.
pub fn pretrain(model: &mut MixTransformer, data: &[Example], cfg: &TrainConfig, seed: u64) -> Result<Vec<f64>> {
    let mut batches = Batcher::new(data.len(), cfg.batch_size, seed)?;
    let mut opt = Adam::new(model.params(), cfg.lr);
    let mut curve = Vec::new();
    let mut window = 0.0;
    for step in 0..cfg.steps {
        let batch = batches.next_batch(data);
        let (loss, grads) = model.loss_and_grads(&batch)?;
        opt.step(model.params_mut(), &grads)?;
        window += loss.total;
        if (step + 1) % 100 == 0 || step + 1 == cfg.steps {
            curve.push(window / ((step % 100) + 1) as f64);
            window = 0.0;
        }
    }
    Ok(curve)
}

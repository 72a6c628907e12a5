//! MAML over curriculum tasks with the sentence + word-level loss, and
//! fine-tuning on the low-resource target domains.

use std::collections::BTreeMap;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Dual, Scalar, Tape, Tensor, Var};
use crate::curriculum::Task;
use crate::error::{Error, Result};
use crate::model::{Example, MixTransformer, PackedBatch};
use crate::params::ParamSet;
use crate::train::Batcher;

/// Anything MAML can adapt: a parameter set plus a recorded loss with a
/// sentence-level and a word-level part.
pub trait MetaModel: Clone {
    type Item: Clone;

    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;

    /// Records `(sentence, word)` loss nodes for `items` using the bound
    /// parameters `p` (which need not be the model's own values).
    fn record_loss<S: Scalar>(&self, tape: &mut Tape<S>, p: &[Var], items: &[Self::Item]) -> Result<(Var, Var)>;
}

impl MetaModel for MixTransformer {
    type Item = Example;

    fn params(&self) -> &ParamSet {
        MixTransformer::params(self)
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        MixTransformer::params_mut(self)
    }

    /// Sentence part is the token cross-entropy; word part is the full
    /// composite loss (generation + domain mixing).
    fn record_loss<S: Scalar>(&self, tape: &mut Tape<S>, p: &[Var], items: &[Example]) -> Result<(Var, Var)> {
        let batch = PackedBatch::from_examples(items)?;
        let l = self.loss_on_tape(tape, p, &batch)?;
        Ok((l.gen, l.total))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MetaLoss {
    pub sentence: f64,
    pub word: f64,
    pub total: f64,
}

impl MetaLoss {
    fn new(sentence: f64, word: f64) -> Self {
        MetaLoss {
            sentence,
            word,
            total: sentence + word,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Order {
    FirstOrder,
    SecondOrder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FtStrategy {
    #[serde(rename = "FT-specific")]
    Specific,
    #[serde(rename = "FT-seen")]
    Seen,
    #[serde(rename = "FT-unseen")]
    Unseen,
    #[serde(rename = "FT-all")]
    All,
}

impl FtStrategy {
    pub fn name(self) -> &'static str {
        match self {
            FtStrategy::Specific => "FT-specific",
            FtStrategy::Seen => "FT-seen",
            FtStrategy::Unseen => "FT-unseen",
            FtStrategy::All => "FT-all",
        }
    }
}

impl FromStr for FtStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [FtStrategy::Specific, FtStrategy::Seen, FtStrategy::Unseen, FtStrategy::All]
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown fine-tuning strategy `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetaConfig {
    pub alpha: f64,
    pub beta: f64,
    pub epochs: usize,
    pub order: Order,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            alpha: 1e-3,
            beta: 5e-5,
            epochs: 1,
            order: Order::FirstOrder,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.beta > 0.0) {
            return Err(Error::InvalidArgument("alpha and beta must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub strategy: FtStrategy,
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            strategy: FtStrategy::Specific,
            steps: 100,
            lr: 0.05,
            batch_size: 16,
        }
    }
}

/// A support/query episode.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaTask<I> {
    pub support: Vec<I>,
    pub query: Vec<I>,
}

impl From<&Task> for MetaTask<Example> {
    fn from(t: &Task) -> Self {
        MetaTask {
            support: t.support_examples(),
            query: t.query_examples(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub task_index: usize,
    pub support_loss: f64,
    pub query_loss_sentence: f64,
    pub query_loss_word: f64,
}

fn check_items<I>(items: &[I]) -> Result<()> {
    if items.is_empty() {
        return Err(Error::Empty("task"));
    }
    Ok(())
}

/// Loss at `params` (mean reduction over the items).
pub fn task_loss_at<M: MetaModel>(model: &M, params: &ParamSet, items: &[M::Item]) -> Result<MetaLoss> {
    check_items(items)?;
    let mut tape = Tape::<f64>::new();
    let p = params.bind(&mut tape)?;
    let (s, w) = model.record_loss(&mut tape, &p, items)?;
    Ok(MetaLoss::new(tape.value(s).item(), tape.value(w).item()))
}

pub fn task_loss<M: MetaModel>(model: &M, items: &[M::Item]) -> Result<MetaLoss> {
    task_loss_at(model, model.params(), items)
}

/// Loss and gradient of its total at `params`.
pub fn task_grad<M: MetaModel>(model: &M, params: &ParamSet, items: &[M::Item]) -> Result<(MetaLoss, Vec<Tensor>)> {
    check_items(items)?;
    let mut tape = Tape::<f64>::new();
    let p = params.bind(&mut tape)?;
    let (s, w) = model.record_loss(&mut tape, &p, items)?;
    let loss = MetaLoss::new(tape.value(s).item(), tape.value(w).item());
    let total = tape.add(s, w)?;
    let mut g = tape.backward_scalar(total)?;
    Ok((loss, params.collect_grads(&mut g, &p)))
}

/// Hessian of the task loss at `params` applied to `v`, by
/// forward-over-reverse differentiation.
pub fn hessian_vector<M: MetaModel>(model: &M, params: &ParamSet, items: &[M::Item], v: &[Tensor]) -> Result<Vec<Tensor>> {
    check_items(items)?;
    let mut tape = Tape::<Dual>::new();
    let p = params.bind_dual(&mut tape, v)?;
    let (s, w) = model.record_loss(&mut tape, &p, items)?;
    let total = tape.add(s, w)?;
    let mut g = tape.backward_scalar(total)?;
    Ok(params
        .collect_grads(&mut g, &p)
        .into_iter()
        .map(|t| {
            let shape = t.shape().to_vec();
            Tensor::from_parts(shape, t.into_data().into_iter().map(|d| d.eps).collect())
        })
        .collect())
}

/// One SGD step on the support loss: `θ' = θ − α ∇L(θ)`.
pub fn inner_update<M: MetaModel>(model: &M, params: &ParamSet, support: &[M::Item], alpha: f64) -> Result<ParamSet> {
    if alpha < 0.0 {
        return Err(Error::InvalidArgument(format!("alpha {alpha} is negative")));
    }
    let (_, g) = task_grad(model, params, support)?;
    let mut out = params.clone();
    out.sgd_step(&g, alpha)?;
    Ok(out)
}

/// Query losses above this abort meta-training.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

/// Runs `epochs` passes over `tasks`, updating after every task.
///
/// First order: `θ ← θ' − β ∇L_q(θ')`, i.e. the inner step followed by a
/// query step at the adapted point. Second order: `θ ← θ − β (I − αH_s(θ))
/// ∇L_q(θ')`, the exact MAML gradient. One record per task is appended to
/// `log`, which keeps its contents if training diverges.
pub fn meta_train<M: MetaModel>(
    model: &mut M,
    tasks: &[MetaTask<M::Item>],
    cfg: &MetaConfig,
    log: &mut Vec<LogRecord>,
) -> Result<()> {
    cfg.validate()?;
    if tasks.is_empty() {
        return Err(Error::Empty("task list"));
    }
    for epoch in 0..cfg.epochs {
        for (task_index, task) in tasks.iter().enumerate() {
            let theta = model.params().clone();
            let (support_loss, gs) = task_grad(model, &theta, &task.support)?;
            let mut adapted = theta.clone();
            adapted.sgd_step(&gs, cfg.alpha)?;
            let (q, gq) = task_grad(model, &adapted, &task.query)?;
            log.push(LogRecord {
                epoch,
                task_index,
                support_loss: support_loss.total,
                query_loss_sentence: q.sentence,
                query_loss_word: q.word,
            });
            if !q.total.is_finite() || q.total > DIVERGENCE_LIMIT {
                return Err(Error::Diverged {
                    epoch,
                    task: task_index,
                    loss: q.total,
                });
            }
            let next = match cfg.order {
                Order::FirstOrder => {
                    adapted.sgd_step(&gq, cfg.beta)?;
                    adapted
                }
                Order::SecondOrder => {
                    let hv = hessian_vector(model, &theta, &task.support, &gq)?;
                    let mut g = gq;
                    for (gi, hi) in g.iter_mut().zip(&hv) {
                        gi.axpy(-cfg.alpha, hi)?;
                    }
                    let mut next = theta;
                    next.sgd_step(&g, cfg.beta)?;
                    next
                }
            };
            *model.params_mut() = next;
        }
    }
    Ok(())
}

/// `steps` plain SGD steps on seeded minibatches of `data`.
pub fn sgd_finetune<M: MetaModel>(model: &mut M, data: &[M::Item], cfg: &FinetuneConfig, seed: u64) -> Result<()> {
    if cfg.steps == 0 {
        return Ok(());
    }
    let mut batches = Batcher::new(data.len(), cfg.batch_size, seed)?;
    for _ in 0..cfg.steps {
        let batch = batches.next_batch(data);
        let (_, g) = task_grad(model, model.params(), &batch)?;
        model.params_mut().sgd_step(&g, cfg.lr)?;
    }
    Ok(())
}

/// One fine-tuned model.
#[derive(Clone, Debug)]
pub struct FinetuneRun<M> {
    /// Domain name for FT-specific, otherwise the strategy's union name.
    pub target: String,
    pub records: usize,
    pub model: M,
}

/// Fine-tunes copies of `model` on meta-test support sets.
///
/// FT-specific yields one model per domain trained on that domain alone;
/// the other strategies yield a single model trained on the union of the
/// seen, unseen or all support sets.
pub fn finetune<M: MetaModel>(
    model: &M,
    supports: &BTreeMap<String, Vec<M::Item>>,
    seen: &[String],
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<Vec<FinetuneRun<M>>> {
    let union = |keep: &dyn Fn(&str) -> bool| -> Vec<M::Item> {
        supports
            .iter()
            .filter(|(d, _)| keep(d))
            .flat_map(|(_, items)| items.iter().cloned())
            .collect()
    };
    let jobs: Vec<(String, Vec<M::Item>)> = match cfg.strategy {
        FtStrategy::Specific => supports.iter().map(|(d, items)| (d.clone(), items.clone())).collect(),
        FtStrategy::Seen => vec![(cfg.strategy.name().into(), union(&|d| seen.iter().any(|s| s == d)))],
        FtStrategy::Unseen => vec![(cfg.strategy.name().into(), union(&|d| !seen.iter().any(|s| s == d)))],
        FtStrategy::All => vec![(cfg.strategy.name().into(), union(&|_| true))],
    };
    jobs.into_iter()
        .enumerate()
        .map(|(i, (target, data))| {
            let mut m = model.clone();
            sgd_finetune(&mut m, &data, cfg, seed.wrapping_add(i as u64))?;
            Ok(FinetuneRun {
                target,
                records: data.len(),
                model: m,
            })
        })
        .collect()
}

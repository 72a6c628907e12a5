use super::transformer::{lift, Example, MixTransformer, PackedBatch};
use crate::autodiff::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Generation loss, domain-mixing loss and their sum.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CompositeLoss {
    pub gen: f64,
    pub mix: f64,
    pub total: f64,
}

impl CompositeLoss {
    pub fn new(gen: f64, mix: f64) -> Self {
        CompositeLoss {
            gen,
            mix,
            total: gen + mix,
        }
    }
}

/// Loss nodes recorded on a tape. `mix` is absent for plain transformers.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub gen: Var,
    pub mix: Option<Var>,
    pub total: Var,
}

impl MixTransformer {
    /// Records `L_gen` (mean token cross-entropy) and `L_mix` (mean over every
    /// proportion layer and every word position of `-log Φ_J`, with J the
    /// sentence label).
    pub fn loss_on_tape<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        p: &[Var],
        batch: &PackedBatch,
    ) -> Result<LossVars> {
        let fwd = self.forward_on_tape(tape, p, batch)?;
        let gen = tape.cross_entropy(fwd.logits, batch.targets())?;
        if fwd.proportions.is_empty() {
            return Ok(LossVars {
                gen,
                mix: None,
                total: gen,
            });
        }
        let k = self.config().domains;
        let mut acc: Option<Var> = None;
        let mut count = 0usize;
        for &(phi, side) in &fwd.proportions {
            let labels = batch
                .row_labels(side)
                .ok_or_else(|| Error::InvalidArgument("missing domain label for mixing loss".into()))?;
            let mut onehot = vec![0.0; labels.len() * k];
            for (i, &j) in labels.iter().enumerate() {
                if j >= k {
                    return Err(Error::OutOfRange {
                        what: "domain labels",
                        index: j,
                        size: k,
                    });
                }
                onehot[i * k + j] = 1.0;
            }
            let onehot = lift(tape, Tensor::matrix(labels.len(), k, onehot)?)?;
            let lp = tape.log(phi)?;
            let picked = tape.mul(lp, onehot)?;
            let s = tape.sum(picked)?;
            acc = Some(match acc {
                None => s,
                Some(a) => tape.add(a, s)?,
            });
            count += labels.len();
        }
        let mix = tape.scale(acc.expect("at least one site"), -1.0 / count as f64)?;
        let total = tape.add(gen, mix)?;
        Ok(LossVars {
            gen,
            mix: Some(mix),
            total,
        })
    }

    /// Mean domain proportion over every mixing site and word position of
    /// the teacher-forced pair; `[1.0]` for plain transformers.
    pub fn domain_affinity(&self, src: &[usize], tgt: &[usize]) -> Result<Vec<f64>> {
        let k = if self.config().mixing { self.config().domains } else { 1 };
        let batch = PackedBatch::from_examples(&[Example {
            src: src.to_vec(),
            tgt: tgt.to_vec(),
            domain: None,
        }])?;
        let mut tape = Tape::<f64>::new();
        let p = self.params().bind(&mut tape)?;
        let fwd = self.forward_on_tape(&mut tape, &p, &batch)?;
        if fwd.proportions.is_empty() {
            return Ok(vec![1.0]);
        }
        let mut acc = vec![0.0; k];
        let mut rows = 0usize;
        for &(phi, _) in &fwd.proportions {
            let t = tape.value(phi);
            for r in 0..t.rows() {
                for (a, v) in acc.iter_mut().zip(t.row(r)) {
                    *a += v;
                }
                rows += 1;
            }
        }
        Ok(acc.into_iter().map(|a| a / rows as f64).collect())
    }

    pub fn composite_loss(&self, examples: &[Example]) -> Result<CompositeLoss> {
        let batch = PackedBatch::from_examples(examples)?;
        let mut tape = Tape::<f64>::new();
        let p = self.params().bind(&mut tape)?;
        let l = self.loss_on_tape(&mut tape, &p, &batch)?;
        Ok(read_loss(&tape, &l))
    }

    /// Loss and the gradient of `total` for every parameter block.
    pub fn loss_and_grads(&self, examples: &[Example]) -> Result<(CompositeLoss, Vec<Tensor>)> {
        let batch = PackedBatch::from_examples(examples)?;
        let mut tape = Tape::<f64>::new();
        let p = self.params().bind(&mut tape)?;
        let l = self.loss_on_tape(&mut tape, &p, &batch)?;
        let loss = read_loss(&tape, &l);
        let mut g = tape.backward_scalar(l.total)?;
        Ok((loss, self.params().collect_grads(&mut g, &p)))
    }
}

pub(crate) fn read_loss<S: Scalar>(tape: &Tape<S>, l: &LossVars) -> CompositeLoss {
    let gen = tape.value(l.gen).item().re();
    let mix = l.mix.map_or(0.0, |m| tape.value(m).item().re());
    CompositeLoss::new(gen, mix)
}

use rand::Rng;

use crate::autodiff::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::xavier_uniform;

/// Maps a d-dimensional input to a smoothed distribution over k domains:
/// `(1 − ε) · softmax(R w) + ε / k`.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainProportionLayer {
    /// k × d.
    pub r: Tensor,
    pub epsilon: f64,
}

impl DomainProportionLayer {
    pub fn new(r: Tensor, epsilon: f64) -> Result<Self> {
        if r.shape().len() != 2 {
            return Err(Error::InvalidArgument(format!(
                "proportion matrix must be k×d, got {:?}",
                r.shape()
            )));
        }
        check_epsilon(epsilon)?;
        Ok(DomainProportionLayer { r, epsilon })
    }

    /// Zero R: every input maps to the uniform distribution.
    pub fn zeros(k: usize, d: usize, epsilon: f64) -> Result<Self> {
        Self::new(Tensor::zeros(&[k, d]), epsilon)
    }

    pub fn k(&self) -> usize {
        self.r.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.r.shape()[1]
    }

    pub fn apply(&self, w: &[f64]) -> Result<Vec<f64>> {
        domain_proportion(w, self)
    }
}

pub(crate) fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "smoothing epsilon must lie in (0, 1), got {epsilon}"
        )));
    }
    Ok(())
}

/// Domain proportion of a single embedding vector.
pub fn domain_proportion(w: &[f64], layer: &DomainProportionLayer) -> Result<Vec<f64>> {
    if w.len() != layer.dim() {
        return Err(Error::shape("domain_proportion", &[w.len()], layer.r.shape()));
    }
    let k = layer.k();
    let logits: Vec<f64> = (0..k)
        .map(|j| layer.r.row(j).iter().zip(w).map(|(a, b)| a * b).sum())
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let eps = layer.epsilon;
    let out: Vec<f64> = exps
        .iter()
        .map(|e| (1.0 - eps) * (e / total) + eps / k as f64)
        .collect();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            op: "domain_proportion",
        });
    }
    Ok(out)
}

/// Row-wise proportions on a tape: `x` is n × d, `r` is k × d, result n × k.
pub(crate) fn proportions_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    r: Var,
    epsilon: f64,
) -> Result<Var> {
    let k = tape.shape(r)[0];
    let logits = tape.matmul_bt(x, r)?;
    let p = tape.softmax(logits)?;
    tape.affine(p, 1.0 - epsilon, epsilon / k as f64)
}

/// A linear transform with one weight matrix per domain, blended per input
/// row by that row's domain proportions.
#[derive(Clone, Debug, PartialEq)]
pub struct MixedLinear {
    pub per_domain_weights: Vec<Tensor>,
    pub proportion: DomainProportionLayer,
}

impl MixedLinear {
    pub fn new(per_domain_weights: Vec<Tensor>, proportion: DomainProportionLayer) -> Result<Self> {
        let first = per_domain_weights
            .first()
            .ok_or(Error::Empty("per-domain weights"))?;
        if first.shape().len() != 2 {
            return Err(Error::InvalidArgument("per-domain weights must be matrices".into()));
        }
        for w in &per_domain_weights {
            if w.shape() != first.shape() {
                return Err(Error::shape("mixed_linear", first.shape(), w.shape()));
            }
        }
        if proportion.k() != per_domain_weights.len() {
            return Err(Error::InvalidArgument(format!(
                "{} weight matrices but proportion layer has k = {}",
                per_domain_weights.len(),
                proportion.k()
            )));
        }
        if proportion.dim() != first.shape()[0] {
            return Err(Error::shape("mixed_linear", first.shape(), proportion.r.shape()));
        }
        Ok(MixedLinear {
            per_domain_weights,
            proportion,
        })
    }

    pub fn random(rng: &mut impl Rng, k: usize, d_in: usize, d_out: usize, epsilon: f64) -> Result<Self> {
        let weights = (0..k).map(|_| xavier_uniform(rng, d_in, d_out)).collect();
        Self::new(weights, DomainProportionLayer::zeros(k, d_in, epsilon)?)
    }

    pub fn d_in(&self) -> usize {
        self.per_domain_weights[0].shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.per_domain_weights[0].shape()[1]
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        mixed_transform(x, self)
    }

    /// The k weight matrices side by side: d_in × (k · d_out).
    pub fn concatenated(&self) -> Tensor {
        let (d_in, d_out) = (self.d_in(), self.d_out());
        let k = self.per_domain_weights.len();
        let mut data = Vec::with_capacity(d_in * k * d_out);
        for i in 0..d_in {
            for w in &self.per_domain_weights {
                data.extend_from_slice(w.row(i));
            }
        }
        Tensor::from_parts(vec![d_in, k * d_out], data)
    }

    /// Inverse of [`MixedLinear::concatenated`].
    pub fn from_concatenated(cat: &Tensor, proportion: DomainProportionLayer) -> Result<Self> {
        let k = proportion.k();
        let (d_in, total) = (cat.rows(), cat.cols());
        if total % k != 0 {
            return Err(Error::shape("mixed_linear", cat.shape(), proportion.r.shape()));
        }
        let d_out = total / k;
        let weights = (0..k)
            .map(|j| {
                let data = (0..d_in)
                    .flat_map(|i| cat.row(i)[j * d_out..(j + 1) * d_out].to_vec())
                    .collect();
                Tensor::from_parts(vec![d_in, d_out], data)
            })
            .collect();
        Self::new(weights, proportion)
    }
}

/// `Σ_j (xᵀ W_j) · Φ_j(x)`.
pub fn mixed_transform(x: &[f64], layer: &MixedLinear) -> Result<Vec<f64>> {
    if x.len() != layer.d_in() {
        return Err(Error::shape(
            "mixed_transform",
            &[x.len()],
            layer.per_domain_weights[0].shape(),
        ));
    }
    let phi = domain_proportion(x, &layer.proportion)?;
    let d_out = layer.d_out();
    let mut out = vec![0.0; d_out];
    for (w, &p) in layer.per_domain_weights.iter().zip(&phi) {
        let mut proj = vec![0.0; d_out];
        for (i, &xi) in x.iter().enumerate() {
            for (o, &wv) in proj.iter_mut().zip(w.row(i)) {
                *o += xi * wv;
            }
        }
        for (o, v) in out.iter_mut().zip(proj) {
            *o += v * p;
        }
    }
    Ok(out)
}

/// Applies a (possibly mixed) linear transform to every row of `x` on a tape.
/// Returns the output and, for mixed transforms, the n × k proportions.
pub(crate) fn linear_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    weight: Var,
    router: Option<Var>,
    epsilon: f64,
) -> Result<(Var, Option<Var>)> {
    let y = tape.matmul(x, weight)?;
    match router {
        None => Ok((y, None)),
        Some(r) => {
            let phi = proportions_on_tape(tape, x, r, epsilon)?;
            let out = tape.block_mix(y, phi)?;
            Ok((out, Some(phi)))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_logits_give_uniform() {
        let layer = DomainProportionLayer::zeros(4, 3, 0.3).unwrap();
        let p = layer.apply(&[0.5, -2.0, 7.0]).unwrap();
        for v in p {
            assert_eq!(v, 0.25);
        }
    }

    #[test]
    fn saturated_two_domain_case() {
        // R w = [10, -10]
        let r = Tensor::matrix(2, 1, vec![10.0, -10.0]).unwrap();
        let layer = DomainProportionLayer::new(r, 0.1).unwrap();
        let p = layer.apply(&[1.0]).unwrap();
        let delta = 0.95 - p[0];
        assert!((0.0..1e-8).contains(&delta), "delta {delta}");
        assert!((p[1] - (0.05 + delta)).abs() < 1e-15);
    }

    #[test]
    fn near_total_smoothing_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = xavier_uniform(&mut rng, 5, 4);
        let layer = DomainProportionLayer::new(r, 1.0 - 1e-12).unwrap();
        for v in layer.apply(&[3.0, -1.0, 2.0, 0.5]).unwrap() {
            assert!((v - 0.2).abs() < 1e-11);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(DomainProportionLayer::zeros(2, 3, 0.0).is_err());
        assert!(DomainProportionLayer::zeros(2, 3, 1.0).is_err());
        let layer = DomainProportionLayer::zeros(2, 3, 0.1).unwrap();
        assert!(layer.apply(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn single_domain_is_plain_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mixed = MixedLinear::random(&mut rng, 1, 4, 3, 0.1).unwrap();
        let x = [0.3, -1.2, 0.8, 2.0];
        let out = mixed.apply(&x).unwrap();
        let w = &mixed.per_domain_weights[0];
        for j in 0..3 {
            let plain: f64 = (0..4).map(|i| x[i] * w.get2(i, j)).sum();
            assert!((out[j] - plain).abs() < 1e-12);
        }
    }

    #[test]
    fn equal_weights_ignore_proportions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = xavier_uniform(&mut rng, 3, 2);
        let r = xavier_uniform(&mut rng, 3, 3);
        let mixed = MixedLinear::new(
            vec![w.clone(), w.clone(), w.clone()],
            DomainProportionLayer::new(r, 0.2).unwrap(),
        )
        .unwrap();
        let x = [1.0, -0.5, 0.25];
        let out = mixed.apply(&x).unwrap();
        for j in 0..2 {
            let plain: f64 = (0..3).map(|i| x[i] * w.get2(i, j)).sum();
            assert!((out[j] - plain).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_proportions_average_the_domains() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mixed = MixedLinear::random(&mut rng, 2, 3, 2, 0.1).unwrap();
        let x = [0.7, 0.1, -0.4];
        let out = mixed.apply(&x).unwrap();
        for j in 0..2 {
            let a: f64 = (0..3).map(|i| x[i] * mixed.per_domain_weights[0].get2(i, j)).sum();
            let b: f64 = (0..3).map(|i| x[i] * mixed.per_domain_weights[1].get2(i, j)).sum();
            assert!((out[j] - 0.5 * (a + b)).abs() < 1e-12);
        }
    }

    #[test]
    fn concatenation_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mixed = MixedLinear::random(&mut rng, 3, 4, 2, 0.1).unwrap();
        let cat = mixed.concatenated();
        let back = MixedLinear::from_concatenated(&cat, mixed.proportion.clone()).unwrap();
        assert_eq!(back, mixed);
    }

    #[test]
    fn tape_matches_eager() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut mixed = MixedLinear::random(&mut rng, 3, 4, 5, 0.1).unwrap();
        mixed.proportion.r = xavier_uniform(&mut rng, 3, 4);
        let rows = [[0.1, 0.2, -0.3, 0.4], [1.0, -1.0, 0.5, 0.0]];
        let mut tape = Tape::<f64>::new();
        let x = tape
            .constant(Tensor::matrix(2, 4, rows.concat()).unwrap())
            .unwrap();
        let w = tape.constant(mixed.concatenated()).unwrap();
        let r = tape.constant(mixed.proportion.r.clone()).unwrap();
        let (out, phi) = linear_on_tape(&mut tape, x, w, Some(r), 0.1).unwrap();
        assert_eq!(tape.shape(phi.unwrap()), &[2, 3]);
        for (i, row) in rows.iter().enumerate() {
            let eager = mixed.apply(row).unwrap();
            for (a, b) in tape.value(out).row(i).iter().zip(eager) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}

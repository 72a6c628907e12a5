use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rml_adapt::autodiff::{Scalar, Tape, Tensor, Var};
use rml_adapt::error::Result;
use rml_adapt::meta::MetaModel;
use rml_adapt::params::ParamSet;

pub fn lift<S: Scalar>(tape: &mut Tape<S>, t: &Tensor) -> Var {
    let data = t.data().iter().map(|&v| S::from_f64(v)).collect();
    tape.constant(Tensor::new(t.shape().to_vec(), data).unwrap()).unwrap()
}

/// y ≈ w·x + b; sentence part is the mean squared error, word part half of it.
#[derive(Clone)]
pub struct Line {
    pub p: ParamSet,
}

impl Line {
    pub fn new(w: f64, b: f64) -> Self {
        let mut p = ParamSet::new();
        p.push("w", Tensor::matrix(1, 1, vec![w]).unwrap());
        p.push("b", Tensor::vector(vec![b]).unwrap());
        Line { p }
    }

    /// Independent gradient of 1.5·mean((w x + b − y)²).
    pub fn oracle_grad(w: f64, b: f64, items: &[(f64, f64)]) -> (f64, f64) {
        let n = items.len() as f64;
        let gw = items.iter().map(|&(x, y)| 3.0 * (w * x + b - y) * x).sum::<f64>() / n;
        let gb = items.iter().map(|&(x, y)| 3.0 * (w * x + b - y)).sum::<f64>() / n;
        (gw, gb)
    }
}

impl MetaModel for Line {
    type Item = (f64, f64);

    fn params(&self) -> &ParamSet {
        &self.p
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.p
    }

    fn record_loss<S: Scalar>(&self, tape: &mut Tape<S>, p: &[Var], items: &[(f64, f64)]) -> Result<(Var, Var)> {
        let n = items.len();
        let x = lift(tape, &Tensor::matrix(n, 1, items.iter().map(|i| i.0).collect())?);
        let y = lift(tape, &Tensor::matrix(n, 1, items.iter().map(|i| i.1).collect())?);
        let pred = tape.matmul(x, p[0])?;
        let pred = tape.add_row(pred, p[1])?;
        let d = tape.sub(pred, y)?;
        let sq = tape.mul(d, d)?;
        let mse = tape.mean(sq)?;
        let half = tape.scale(mse, 0.5)?;
        Ok((mse, half))
    }
}

/// ½ (θ − c)ᵀ A (θ − c) per item; word part is zero.
#[derive(Clone)]
pub struct Quadratic {
    pub p: ParamSet,
}

impl MetaModel for Quadratic {
    type Item = (Tensor, Tensor);

    fn params(&self) -> &ParamSet {
        &self.p
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.p
    }

    fn record_loss<S: Scalar>(&self, tape: &mut Tape<S>, p: &[Var], items: &[(Tensor, Tensor)]) -> Result<(Var, Var)> {
        let (a, c) = &items[0];
        let a = lift(tape, a);
        let c = lift(tape, c);
        let d = tape.sub(p[0], c)?;
        let ad = tape.matmul(a, d)?;
        let q = tape.mul(d, ad)?;
        let s = tape.sum(q)?;
        let loss = tape.scale(s, 0.5)?;
        let zero = tape.scale(loss, 0.0)?;
        Ok((loss, zero))
    }
}

pub fn spd(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec<f64>> {
    let m: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    (0..n)
        .map(|i| {
            (0..n)
                .map(|j| (0..n).map(|k| m[i][k] * m[j][k]).sum::<f64>() + if i == j { 0.5 } else { 0.0 })
                .collect()
        })
        .collect()
}

pub fn matvec(a: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    a.iter().map(|r| r.iter().zip(v).map(|(x, y)| x * y).sum()).collect()
}

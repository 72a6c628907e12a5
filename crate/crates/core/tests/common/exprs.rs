//! Random differentiable expressions over 3×3 matrices, rebuilt from a seed
//! so the same graph can be evaluated at perturbed leaves.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rml_adapt::autodiff::{Tape, Tensor, Var};
use rml_adapt::error::Result;

pub const N: usize = 3;

/// Leaf values: four 3×3 matrices, one length-3 row vector and a 5×3
/// embedding table.
pub fn leaves(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    let mut out: Vec<Tensor> = (0..4)
        .map(|_| Tensor::matrix(N, N, (0..N * N).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap())
        .collect();
    out.push(Tensor::vector((0..N).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap());
    out.push(Tensor::matrix(5, N, (0..5 * N).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap());
    out
}

fn node(t: &mut Tape<f64>, p: &[Var], rng: &mut ChaCha8Rng, depth: usize) -> Result<Var> {
    if depth == 0 || rng.gen_bool(0.15) {
        return Ok(p[rng.gen_range(0..4)]);
    }
    let d = depth - 1;
    Ok(match rng.gen_range(0..18) {
        0 => {
            let (a, b) = (node(t, p, rng, d)?, node(t, p, rng, d)?);
            t.add(a, b)?
        }
        1 => {
            let (a, b) = (node(t, p, rng, d)?, node(t, p, rng, d)?);
            t.sub(a, b)?
        }
        2 => {
            let (a, b) = (node(t, p, rng, d)?, node(t, p, rng, d)?);
            t.mul(a, b)?
        }
        3 => {
            let (a, b) = (node(t, p, rng, d)?, node(t, p, rng, d)?);
            let m = t.matmul(a, b)?;
            t.scale(m, 0.5)?
        }
        4 => {
            let (a, b) = (node(t, p, rng, d)?, node(t, p, rng, d)?);
            t.matmul_bt(a, b)?
        }
        5 => {
            let (a, b) = (node(t, p, rng, d)?, node(t, p, rng, d)?);
            t.matmul_at(a, b)?
        }
        6 => {
            let a = node(t, p, rng, d)?;
            t.add_row(a, p[4])?
        }
        7 => {
            let a = node(t, p, rng, d)?;
            t.mul_row(a, p[4])?
        }
        8 => {
            let a = node(t, p, rng, d)?;
            t.affine(a, rng.gen_range(-2.0..2.0), rng.gen_range(-1.0..1.0))?
        }
        9 => {
            let a = node(t, p, rng, d)?;
            t.softmax(a)?
        }
        10 => {
            // log of a strictly positive argument
            let a = node(t, p, rng, d)?;
            let s = t.softmax(a)?;
            let s = t.affine(s, 1.0, 0.1)?;
            t.log(s)?
        }
        11 => {
            let a = node(t, p, rng, d)?;
            let s = t.softmax(a)?;
            let s = t.affine(s, 2.0, -0.5)?;
            t.exp(s)?
        }
        12 => {
            let a = node(t, p, rng, d)?;
            t.relu(a)?
        }
        13 => {
            let a = node(t, p, rng, d)?;
            t.layer_norm(a, 1e-5)?
        }
        14 => {
            let ids: Vec<usize> = (0..N).map(|_| rng.gen_range(0..5)).collect();
            let e = t.embedding(p[5], &ids)?;
            let a = node(t, p, rng, d)?;
            t.add(e, a)?
        }
        15 => {
            let (a, b) = (node(t, p, rng, d)?, node(t, p, rng, d)?);
            let (l, r) = (t.slice_cols(a, 0, 1)?, t.slice_cols(b, 1, 2)?);
            t.concat_cols(&[l, r])?
        }
        16 => {
            let (a, b) = (node(t, p, rng, d)?, node(t, p, rng, d)?);
            let (top, bottom) = (t.slice_rows(a, 0, 2)?, t.slice_rows(b, 2, 1)?);
            let m = t.concat_rows(&[top, bottom])?;
            t.transpose(m)?
        }
        _ => {
            let parts = [node(t, p, rng, d)?, node(t, p, rng, d)?, node(t, p, rng, d)?];
            let y = t.concat_cols(&parts)?;
            let w = node(t, p, rng, d)?;
            let w = t.softmax(w)?;
            t.block_mix(y, w)?
        }
    })
}

/// Records expression `seed` on `t` over `p` and reduces it to a scalar.
pub fn build(t: &mut Tape<f64>, p: &[Var], seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let depth = rng.gen_range(1..5);
    let e = node(t, p, &mut rng, depth)?;
    match rng.gen_range(0..3) {
        0 => t.sum(e),
        1 => t.mean(e),
        _ => {
            let targets: Vec<usize> = (0..N).map(|_| rng.gen_range(0..N)).collect();
            t.cross_entropy(e, &targets)
        }
    }
}

/// Value and gradients of expression `seed` at `values`.
pub fn eval(values: &[Tensor], seed: u64) -> Result<(f64, Vec<Tensor>)> {
    let mut t = Tape::new();
    let p = values.iter().map(|v| t.param(v.clone())).collect::<Result<Vec<_>>>()?;
    let out = build(&mut t, &p, seed)?;
    let value = t.value(out).data()[0];
    let g = t.backward_scalar(out)?;
    let grads = p
        .iter()
        .zip(values)
        .map(|(&v, x)| g.get(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape())))
        .collect();
    Ok((value, grads))
}

/// Worst relative error (magnitudes floored at 1e-4) between analytic and
/// central-difference gradients over every leaf entry. Entries sitting on a
/// ReLU corner, detected as disagreeing one-sided slopes, are skipped.
pub fn max_gradient_error(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let values = leaves(&mut rng);
    let (_, grads) = eval(&values, seed)?;
    let h = 1e-5;
    let mut worst = 0.0f64;
    for (i, v) in values.iter().enumerate() {
        for j in 0..v.numel() {
            let at = |delta: f64| -> Result<f64> {
                let mut shifted = values.clone();
                shifted[i].data_mut()[j] += delta;
                Ok(eval(&shifted, seed)?.0)
            };
            let (fp, f0, fm) = (at(h)?, at(0.0)?, at(-h)?);
            let (right, left) = ((fp - f0) / h, (f0 - fm) / h);
            if (right - left).abs() > 1e-2 * right.abs().max(left.abs()).max(1.0) {
                continue; // non-differentiable point
            }
            let fd = (fp - fm) / (2.0 * h);
            let g = grads[i].data()[j];
            worst = worst.max((fd - g).abs() / fd.abs().max(g.abs()).max(1e-4));
        }
    }
    Ok(worst)
}

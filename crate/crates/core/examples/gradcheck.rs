//! Reverse-mode gradients of a small expression against central differences.

use rml_adapt::autodiff::{Tape, Tensor};

fn loss(w: &Tensor, x: &Tensor) -> rml_adapt::Result<(f64, Tensor)> {
    let mut t = Tape::new();
    let wv = t.param(w.clone())?;
    let xv = t.constant(x.clone())?;
    let h = t.matmul(xv, wv)?;
    let h = t.layer_norm(h, 1e-5)?;
    let out = t.cross_entropy(h, &[0, 2])?;
    let value = t.value(out).data()[0];
    let g = t.backward_scalar(out)?;
    Ok((value, g.get(wv).cloned().expect("parameter gradient")))
}

fn main() -> rml_adapt::Result<()> {
    let w = Tensor::matrix(3, 3, vec![0.2, -0.4, 0.1, 0.7, 0.3, -0.2, -0.5, 0.6, 0.9])?;
    let x = Tensor::matrix(2, 3, vec![1.0, 0.5, -1.0, -0.3, 0.8, 0.2])?;
    let (value, grad) = loss(&w, &x)?;
    println!("loss {value:.6}");
    let h = 1e-6;
    for i in 0..w.numel() {
        let shifted = |d: f64| {
            let mut w = w.clone();
            w.data_mut()[i] += d;
            loss(&w, &x).map(|(v, _)| v)
        };
        let fd = (shifted(h)? - shifted(-h)?) / (2.0 * h);
        println!("w[{i}]  analytic {:+.8}  numeric {fd:+.8}", grad.data()[i]);
    }
    Ok(())
}

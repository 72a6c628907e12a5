use rml_adapt::autodiff::Tensor;
use rml_adapt::params::ParamSet;

type Mat = Vec<Vec<f64>>;

fn get<'a>(p: &'a ParamSet, name: &str) -> &'a Tensor {
    p.get(p.index_of(name).unwrap_or_else(|| panic!("missing parameter {name}")))
}

fn to_mat(t: &Tensor) -> Mat {
    t.data().chunks(t.cols()).map(|r| r.to_vec()).collect()
}

fn mm(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .map(|row| {
            (0..b[0].len())
                .map(|j| row.iter().enumerate().map(|(k, v)| v * b[k][j]).sum())
                .collect()
        })
        .collect()
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(u, v)| u + v).collect())
        .collect()
}

fn norm(p: &ParamSet, name: &str, x: &Mat) -> Mat {
    let g = get(p, &format!("{name}.gain")).data();
    let b = get(p, &format!("{name}.bias")).data();
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(i, v)| (v - mean) / (var + 1e-5).sqrt() * g[i] + b[i])
                .collect()
        })
        .collect()
}

fn lin(p: &ParamSet, name: &str, x: &Mat) -> Mat {
    mm(x, &to_mat(get(p, &format!("{name}.w"))))
}

fn attention(p: &ParamSet, name: &str, q_in: &Mat, kv_in: &Mat, heads: usize, causal: bool) -> Mat {
    let q = lin(p, &format!("{name}.q"), q_in);
    let k = lin(p, &format!("{name}.k"), kv_in);
    let v = lin(p, &format!("{name}.v"), kv_in);
    let d = q[0].len();
    let dh = d / heads;
    let mut cat = vec![vec![0.0; d]; q.len()];
    for h in 0..heads {
        for i in 0..q.len() {
            let visible = if causal { i + 1 } else { k.len() };
            let scores: Vec<f64> = (0..visible)
                .map(|j| (0..dh).map(|c| q[i][h * dh + c] * k[j][h * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let max = scores.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
            for (j, s) in scores.iter().enumerate() {
                let w = (s - max).exp() / z;
                for c in 0..dh {
                    cat[i][h * dh + c] += w * v[j][h * dh + c];
                }
            }
        }
    }
    lin(p, &format!("{name}.o"), &cat)
}

fn ffn(p: &ParamSet, name: &str, x: &Mat) -> Mat {
    let h = lin(p, &format!("{name}.ff1"), x);
    let h: Mat = h.into_iter().map(|r| r.into_iter().map(|v| v.max(0.0)).collect()).collect();
    lin(p, &format!("{name}.ff2"), &h)
}

fn embed(p: &ParamSet, ids: &[usize], d: usize) -> Mat {
    let table = get(p, "embed");
    ids.iter()
        .enumerate()
        .map(|(pos, &id)| {
            (0..d)
                .map(|i| {
                    let angle = pos as f64 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
                    let pe = if i % 2 == 0 { angle.sin() } else { angle.cos() };
                    table.row(id)[i] * (d as f64).sqrt() + pe
                })
                .collect()
        })
        .collect()
}

/// Reference pre-norm transformer built from plain loops. Reads the
/// `{name}.w` matrices of a single-domain parameter set and ignores any
/// proportion matrices.
pub fn plain_logits(
    p: &ParamSet,
    heads: usize,
    enc_layers: usize,
    dec_layers: usize,
    src: &[usize],
    prefix: &[usize],
) -> Mat {
    let d = get(p, "embed").cols();
    let mut x = embed(p, src, d);
    for l in 0..enc_layers {
        let n = format!("enc.{l}");
        let h = norm(p, &format!("{n}.norm1"), &x);
        x = add(&x, &attention(p, &format!("{n}.self"), &h, &h, heads, false));
        let h = norm(p, &format!("{n}.norm2"), &x);
        x = add(&x, &ffn(p, &n, &h));
    }
    let memory = norm(p, "enc.norm", &x);
    let mut y = embed(p, prefix, d);
    for l in 0..dec_layers {
        let n = format!("dec.{l}");
        let h = norm(p, &format!("{n}.norm1"), &y);
        y = add(&y, &attention(p, &format!("{n}.self"), &h, &h, heads, true));
        let h = norm(p, &format!("{n}.norm2"), &y);
        y = add(&y, &attention(p, &format!("{n}.cross"), &h, &memory, heads, false));
        let h = norm(p, &format!("{n}.norm3"), &y);
        y = add(&y, &ffn(p, &n, &h));
    }
    let y = norm(p, "dec.norm", &y);
    let bias = get(p, "out.b").data();
    mm(&y, &to_mat(get(p, "out.w")))
        .into_iter()
        .map(|r| r.iter().zip(bias).map(|(a, b)| a + b).collect())
        .collect()
}

mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rml_adapt::autodiff::Tensor;
use rml_adapt::corpus::EOS;
use rml_adapt::model::{Example, MixTransformer, ModelConfig};
use rml_adapt::params::{Checkpoint, ParamSet};

fn tiny(k: usize, mixing: bool, vocab: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab,
        d_model: 8,
        heads: 2,
        enc_layers: 1,
        dec_layers: 1,
        ffn_dim: 12,
        domains: k,
        epsilon: 0.1,
        mixing,
    }
}

fn ids(rng: &mut ChaCha8Rng, n: usize, vocab: usize) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(4..vocab)).collect()
}

fn randomize_routers(model: &mut MixTransformer, rng: &mut ChaCha8Rng, scale: f64) {
    for i in 0..model.params().len() {
        if model.params().name(i).ends_with(".r") {
            for v in model.params_mut().get_mut(i).data_mut() {
                *v = rng.gen_range(-scale..scale);
            }
        }
    }
}

fn examples(rng: &mut ChaCha8Rng, n: usize, vocab: usize, k: usize) -> Vec<Example> {
    (0..n)
        .map(|_| {
            let (ls, lt) = (rng.gen_range(1..5), rng.gen_range(1..5));
            Example {
                src: ids(rng, ls, vocab),
                tgt: ids(rng, lt, vocab),
                domain: Some(rng.gen_range(0..k)),
            }
        })
        .collect()
}

#[test]
fn output_shape_contract() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let model = MixTransformer::new(tiny(3, true, 50), &mut rng).unwrap();
    let logits = model.forward(&[5, 6, 7, 8, 9], &[1, 10, 11]).unwrap();
    assert_eq!(logits.shape(), &[3, 50]);
}

#[test]
fn out_of_vocabulary_id_is_an_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let model = MixTransformer::new(tiny(2, true, 20), &mut rng).unwrap();
    assert!(model.forward(&[5, 20], &[1]).is_err());
    assert!(model.decoder(&[5, 99]).is_err());
}

#[test]
fn causal_masking_is_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut model = MixTransformer::new(tiny(3, true, 30), &mut rng).unwrap();
    randomize_routers(&mut model, &mut rng, 1.0);
    let src = ids(&mut rng, 6, 30);
    let prefix = ids(&mut rng, 5, 30);
    let base = model.forward(&src, &prefix).unwrap();
    for t in 0..prefix.len() {
        let mut changed = prefix.clone();
        changed[t] = if changed[t] == 4 { 5 } else { 4 };
        let other = model.forward(&src, &changed).unwrap();
        for pos in 0..t {
            assert_eq!(base.row(pos), other.row(pos), "position {pos} saw token {t}");
        }
    }
}

#[test]
fn single_domain_matches_plain_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = ModelConfig { heads: 2, enc_layers: 2, dec_layers: 2, ..tiny(1, true, 25) };
    for _ in 0..10 {
        let mut model = MixTransformer::new(cfg.clone(), &mut rng).unwrap();
        randomize_routers(&mut model, &mut rng, 3.0);
        // plain model carrying the same weights
        let mut plain = ParamSet::new();
        for (name, t) in model.params().names().iter().zip(model.params().tensors()) {
            if !name.ends_with(".r") {
                plain.push(name.clone(), t.clone());
            }
        }
        let plain = MixTransformer::from_params(ModelConfig { mixing: false, ..cfg.clone() }, plain).unwrap();
        let src = ids(&mut rng, 4, 25);
        let prefix = ids(&mut rng, 3, 25);
        let reference = common::reference::plain_logits(plain.params(), 2, 2, 2, &src, &prefix);
        for m in [&model, &plain] {
            let got = m.forward(&src, &prefix).unwrap();
            for (i, row) in reference.iter().enumerate() {
                for (a, b) in got.row(i).iter().zip(row) {
                    assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
                }
            }
        }
        let ex = examples(&mut rng, 3, 25, 1);
        let (a, b) = (model.composite_loss(&ex).unwrap(), plain.composite_loss(&ex).unwrap());
        assert!((a.gen - b.gen).abs() <= 1e-9);
        assert!(a.mix.abs() <= 1e-12);
    }
}

#[test]
fn equal_domain_weights_make_logits_independent_of_routers() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let k = 3;
    let mut model = MixTransformer::new(tiny(k, true, 20), &mut rng).unwrap();
    for i in 0..model.params().len() {
        if model.params().name(i).ends_with(".w") && model.params().name(i) != "out.w" {
            let t = model.params_mut().get_mut(i);
            let m = t.cols() / k;
            for r in 0..t.rows() {
                let row = &mut t.data_mut()[r * k * m..(r + 1) * k * m];
                let first = row[..m].to_vec();
                for j in 1..k {
                    row[j * m..(j + 1) * m].copy_from_slice(&first);
                }
            }
        }
    }
    let src = ids(&mut rng, 5, 20);
    let prefix = ids(&mut rng, 4, 20);
    randomize_routers(&mut model, &mut rng, 2.0);
    let a = model.forward(&src, &prefix).unwrap();
    randomize_routers(&mut model, &mut rng, 2.0);
    let b = model.forward(&src, &prefix).unwrap();
    assert!(a.max_abs_diff(&b) <= 1e-9);
}

#[test]
fn incremental_decoder_matches_full_forward() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut model = MixTransformer::new(tiny(2, true, 30), &mut rng).unwrap();
    randomize_routers(&mut model, &mut rng, 1.0);
    let src = ids(&mut rng, 5, 30);
    let prefix = ids(&mut rng, 6, 30);
    let full = model.forward(&src, &prefix).unwrap();
    let dec = model.decoder(&src).unwrap();
    let mut state = vec![dec.start()];
    for (t, &tok) in prefix.iter().enumerate() {
        let (lp, next) = dec.step(&state, &[tok]).unwrap();
        state = next;
        let row = full.row(t);
        let max = row.iter().cloned().fold(f64::MIN, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for (a, b) in lp[0].iter().zip(row) {
            assert!((a - (b - lse)).abs() < 1e-9);
        }
    }
}

#[test]
fn parameter_count_formula() {
    let cfg = ModelConfig { vocab_size: 50, domains: 4, ..ModelConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = MixTransformer::new(cfg.clone(), &mut rng).unwrap();
    // 4·(2·(4·64² + 2·64·128) + 2·(8·64² + 2·64·128)) weights, 4·(28·64 + 4·128)
    // routers, 2·64·12 norm scalars, 50·64 embeddings, 64·50 + 50 output.
    assert_eq!(model.params().count(), 672_562);
    assert_eq!(cfg.param_breakdown().total(), 672_562);
    let plain = ModelConfig { mixing: false, ..cfg };
    let m = MixTransformer::new(plain.clone(), &mut rng).unwrap();
    assert_eq!(m.params().count(), plain.param_breakdown().total());
    assert_eq!(plain.param_breakdown().proportion, 0);
}

#[test]
fn mix_loss_reference_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for k in [1usize, 2, 5] {
        let model = MixTransformer::new(tiny(k, true, 20), &mut rng).unwrap();
        let ex = examples(&mut rng, 4, 20, k);
        let l = model.composite_loss(&ex).unwrap();
        assert!((l.mix - (k as f64).ln()).abs() < 1e-12, "k={k}: {}", l.mix);
        assert_eq!(l.total, l.gen + l.mix);
    }
}

#[test]
fn gen_loss_of_two_equally_likely_tokens_is_log_two() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut model = MixTransformer::new(tiny(2, true, 10), &mut rng).unwrap();
    let w = model.params().index_of("out.w").unwrap();
    let b = model.params().index_of("out.b").unwrap();
    *model.params_mut().get_mut(w) = Tensor::zeros(&[8, 10]);
    let bias = model.params_mut().get_mut(b).data_mut();
    bias[6] = 60.0;
    bias[EOS] = 60.0;
    let ex = [Example { src: vec![5, 7], tgt: vec![6], domain: Some(0) }];
    let l = model.composite_loss(&ex).unwrap();
    assert!((l.gen - 2f64.ln()).abs() < 1e-12);
}

#[test]
fn missing_or_bad_labels_are_errors() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let model = MixTransformer::new(tiny(2, true, 10), &mut rng).unwrap();
    let mut ex = vec![Example { src: vec![5], tgt: vec![6], domain: None }];
    assert!(model.composite_loss(&ex).is_err());
    ex[0].domain = Some(2);
    assert!(model.composite_loss(&ex).is_err());
}

#[test]
fn composite_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut model = MixTransformer::new(tiny(2, true, 12), &mut rng).unwrap();
    randomize_routers(&mut model, &mut rng, 0.5);
    let ex = examples(&mut rng, 3, 12, 2);
    let (_, grads) = model.loss_and_grads(&ex).unwrap();
    let h = 1e-5;
    let mut checked = 0;
    for i in 0..model.params().len() {
        let n = model.params().get(i).numel();
        for _ in 0..3 {
            let j = rng.gen_range(0..n);
            let probe = |delta: f64| {
                let mut m = model.clone();
                m.params_mut().get_mut(i).data_mut()[j] += delta;
                m.composite_loss(&ex).unwrap().total
            };
            let fd = (probe(h) - probe(-h)) / (2.0 * h);
            let g = grads[i].data()[j];
            if fd.abs() < 1e-7 && g.abs() < 1e-7 {
                continue;
            }
            assert!(
                common::rel_err(fd, g) < 1e-4,
                "{}[{j}]: fd {fd} vs analytic {g}",
                model.params().name(i)
            );
            checked += 1;
        }
    }
    assert!(checked > 40);
}

#[test]
fn training_routers_alone_lowers_mix_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut model = MixTransformer::new(tiny(2, true, 20), &mut rng).unwrap();
    // words 4..12 belong to domain 0, 12..20 to domain 1
    let ex: Vec<Example> = (0..8)
        .map(|i| {
            let d = i % 2;
            let lo = 4 + 8 * d;
            Example {
                src: (0..3).map(|_| rng.gen_range(lo..lo + 8)).collect(),
                tgt: (0..3).map(|_| rng.gen_range(lo..lo + 8)).collect(),
                domain: Some(d),
            }
        })
        .collect();
    let start = model.composite_loss(&ex).unwrap().mix;
    for _ in 0..100 {
        let (_, mut grads) = model.loss_and_grads(&ex).unwrap();
        for (i, g) in grads.iter_mut().enumerate() {
            if !model.params().name(i).ends_with(".r") {
                *g = Tensor::zeros(g.shape());
            }
        }
        model.params_mut().sgd_step(&grads, 0.5).unwrap();
    }
    let end = model.composite_loss(&ex).unwrap().mix;
    assert!(end < start, "{end} >= {start}");
}

#[test]
fn checkpoint_round_trip_preserves_logits() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut model = MixTransformer::new(tiny(3, true, 20), &mut rng).unwrap();
    randomize_routers(&mut model, &mut rng, 1.0);
    let bytes = model.to_checkpoint("abc").to_bytes().unwrap();
    let (back, hash) = MixTransformer::from_checkpoint(Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    assert_eq!(hash, "abc");
    assert_eq!(back.params().fingerprint(), model.params().fingerprint());
    assert_eq!(back.forward(&[4, 5], &[1, 6]).unwrap(), model.forward(&[4, 5], &[1, 6]).unwrap());
}

mod common;

use common::toys::{matvec, spd, Line, Quadratic};
use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rml_adapt::autodiff::{Scalar, Tape, Tensor, Var};
use rml_adapt::error::{Error, Result};
use rml_adapt::meta::{
    finetune, hessian_vector, inner_update, meta_train, task_grad, task_loss, FinetuneConfig, FtStrategy,
    MetaConfig, MetaModel, MetaTask, Order,
};
use rml_adapt::model::{Example, MixTransformer, ModelConfig};
use rml_adapt::params::ParamSet;

#[test]
fn inner_update_scalar_surrogate() {
    // ½θ² through the line model: x = 1, y = 0, b fixed at 0 → loss 1.5·w²
    // has gradient 3w, so α = 0.1/3 gives w' = w − 0.1·w.
    let m = Line::new(1.0, 0.0);
    let next = inner_update(&m, m.params(), &[(1.0, 0.0)], 0.1 / 3.0).unwrap();
    assert!((next.get(0).data()[0] - 0.9).abs() < 1e-15);
}

#[test]
fn zero_alpha_is_bit_identical() {
    let m = Line::new(-0.0, 0.25);
    let next = inner_update(&m, m.params(), &[(1.0, 2.0), (3.0, -1.0)], 0.0).unwrap();
    assert_eq!(next.fingerprint(), m.params().fingerprint());
}

#[test]
fn inner_update_and_first_order_match_sgd_chain_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let (w, b) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
        let support: Vec<(f64, f64)> = (0..4).map(|_| (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect();
        let query: Vec<(f64, f64)> = (0..6).map(|_| (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect();
        let (alpha, beta) = (0.1, 0.05);
        let m = Line::new(w, b);

        let (gw, gb) = Line::oracle_grad(w, b, &support);
        let (w1, b1) = (w - alpha * gw, b - alpha * gb);
        let inner = inner_update(&m, m.params(), &support, alpha).unwrap();
        assert!((inner.get(0).data()[0] - w1).abs() <= 1e-12);
        assert!((inner.get(1).data()[0] - b1).abs() <= 1e-12);

        let (qw, qb) = Line::oracle_grad(w1, b1, &query);
        let (w2, b2) = (w1 - beta * qw, b1 - beta * qb);
        let mut trained = m.clone();
        let cfg = MetaConfig { alpha, beta, epochs: 1, order: Order::FirstOrder };
        let mut log = Vec::new();
        meta_train(&mut trained, &[MetaTask { support, query }], &cfg, &mut log).unwrap();
        assert!((trained.params().get(0).data()[0] - w2).abs() <= 1e-12);
        assert!((trained.params().get(1).data()[0] - b2).abs() <= 1e-12);
        assert_eq!(log.len(), 1);
    }
}

#[test]
fn second_order_matches_analytic_maml_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 4;
    for _ in 0..10 {
        let (a_s, a_q) = (spd(&mut rng, n), spd(&mut rng, n));
        let rand_vec = |rng: &mut ChaCha8Rng| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
        let (c_s, c_q, theta) = (rand_vec(&mut rng), rand_vec(&mut rng), rand_vec(&mut rng));
        let (alpha, beta) = (0.1, 0.2);

        // θ' = θ − α A_s (θ − c_s);  g = (I − α A_s) A_q (θ' − c_q)
        let d: Vec<f64> = theta.iter().zip(&c_s).map(|(t, c)| t - c).collect();
        let step = matvec(&a_s, &d);
        let adapted: Vec<f64> = theta.iter().zip(&step).map(|(t, s)| t - alpha * s).collect();
        let dq: Vec<f64> = adapted.iter().zip(&c_q).map(|(t, c)| t - c).collect();
        let gq = matvec(&a_q, &dq);
        let hg = matvec(&a_s, &gq);
        let g: Vec<f64> = gq.iter().zip(&hg).map(|(x, h)| x - alpha * h).collect();
        let expected: Vec<f64> = theta.iter().zip(&g).map(|(t, gi)| t - beta * gi).collect();

        let mat = |a: &Vec<Vec<f64>>| Tensor::matrix(n, n, a.iter().flatten().copied().collect()).unwrap();
        let col = |v: &Vec<f64>| Tensor::matrix(n, 1, v.clone()).unwrap();
        let mut p = ParamSet::new();
        p.push("theta", col(&theta));
        let mut model = Quadratic { p };
        let task = MetaTask { support: vec![(mat(&a_s), col(&c_s))], query: vec![(mat(&a_q), col(&c_q))] };
        let cfg = MetaConfig { alpha, beta, epochs: 1, order: Order::SecondOrder };
        meta_train(&mut model, &[task], &cfg, &mut Vec::new()).unwrap();
        for (got, want) in model.params().get(0).data().iter().zip(&expected) {
            assert!((got - want).abs() <= 1e-8, "{got} vs {want}");
        }
    }
}

#[derive(Clone)]
struct Constant {
    p: ParamSet,
}

impl MetaModel for Constant {
    type Item = ();

    fn params(&self) -> &ParamSet {
        &self.p
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.p
    }

    fn record_loss<S: Scalar>(&self, tape: &mut Tape<S>, _: &[Var], _: &[()]) -> Result<(Var, Var)> {
        let c = tape.constant(Tensor::scalar(S::from_f64(2.0)))?;
        Ok((c, c))
    }
}

#[test]
fn zero_gradient_model_is_a_fixed_point() {
    let mut p = ParamSet::new();
    p.push("x", Tensor::vector(vec![1.0, -0.0, 3.5]).unwrap());
    let mut m = Constant { p };
    let before = m.params().fingerprint();
    let tasks = vec![MetaTask { support: vec![()], query: vec![()] }; 3];
    for order in [Order::FirstOrder, Order::SecondOrder] {
        let cfg = MetaConfig { alpha: 0.5, beta: 0.5, epochs: 4, order };
        meta_train(&mut m, &tasks, &cfg, &mut Vec::new()).unwrap();
        assert_eq!(m.params().fingerprint(), before);
    }
}

#[test]
fn divergence_aborts_with_log() {
    let mut m = Line::new(1.0, 1.0);
    let tasks = vec![MetaTask { support: vec![(10.0, 0.0)], query: vec![(10.0, 0.0)] }];
    let cfg = MetaConfig { alpha: 5.0, beta: 5.0, epochs: 10, order: Order::FirstOrder };
    let mut log = Vec::new();
    match meta_train(&mut m, &tasks, &cfg, &mut log) {
        Err(Error::Diverged { loss, .. }) => assert!(loss > 1e6 || !loss.is_finite()),
        other => panic!("expected divergence, got {:?}", other.map(|_| ())),
    }
    assert!(!log.is_empty());
}

fn tiny_mix(k: usize) -> MixTransformer {
    let cfg = ModelConfig {
        vocab_size: 24,
        d_model: 8,
        heads: 2,
        enc_layers: 1,
        dec_layers: 1,
        ffn_dim: 12,
        domains: k,
        epsilon: 0.1,
        mixing: true,
    };
    let mut m = MixTransformer::new(cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for i in 0..m.params().len() {
        if m.params().name(i).ends_with(".r") {
            for v in m.params_mut().get_mut(i).data_mut() {
                *v = rng.gen_range(-0.5..0.5);
            }
        }
    }
    m
}

/// Domain d translates token t to t + 1 within its own block of 6 ids.
fn cipher(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Example> {
    (0..n)
        .map(|_| {
            let src: Vec<usize> = (0..rng.gen_range(2..5)).map(|_| 4 + 6 * d + rng.gen_range(0..5)).collect();
            let tgt = src.iter().map(|t| t + 1).collect();
            Example { src, tgt, domain: Some(d) }
        })
        .collect()
}

#[test]
fn task_loss_is_additive_and_mean_reduced() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let m = tiny_mix(3);
    for _ in 0..20 {
        let d = rng.gen_range(0..3);
        let items = cipher(&mut rng, 5, d);
        let l = task_loss(&m, &items).unwrap();
        assert_eq!(l.total, l.sentence + l.word);
        let doubled: Vec<Example> = items.iter().chain(&items).cloned().collect();
        let l2 = task_loss(&m, &doubled).unwrap();
        assert!((l.sentence - l2.sentence).abs() < 1e-12);
        assert!((l.word - l2.word).abs() < 1e-12);
        assert!((l.total - l2.total).abs() < 1e-12);
    }
    assert!(task_loss(&m, &[]).is_err());
}

#[test]
fn transformer_hessian_vector_matches_gradient_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let m = tiny_mix(2);
    let items = cipher(&mut rng, 3, 1);
    let v: Vec<Tensor> = m
        .params()
        .tensors()
        .iter()
        .map(|t| Tensor::new(t.shape().to_vec(), (0..t.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap())
        .collect();
    let hv = hessian_vector(&m, m.params(), &items, &v).unwrap();
    let h = 1e-5;
    let (_, gp) = task_grad(&m, &m.params().shifted(&v, h).unwrap(), &items).unwrap();
    let (_, gm) = task_grad(&m, &m.params().shifted(&v, -h).unwrap(), &items).unwrap();
    let (mut num, mut den) = (0.0f64, 0.0f64);
    for ((a, b), c) in gp.iter().zip(&gm).zip(&hv) {
        for ((x, y), z) in a.data().iter().zip(b.data()).zip(c.data()) {
            let fd = (x - y) / (2.0 * h);
            num = num.max((fd - z).abs());
            den = den.max(z.abs());
        }
    }
    assert!(num / den < 1e-5, "relative error {}", num / den);
}

#[test]
fn meta_training_lowers_query_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut m = tiny_mix(3);
    let tasks: Vec<MetaTask<Example>> = (0..6)
        .map(|i| MetaTask { support: cipher(&mut rng, 6, i % 3), query: cipher(&mut rng, 12, i % 3) })
        .collect();
    let cfg = MetaConfig { alpha: 0.05, beta: 0.1, epochs: 5, order: Order::FirstOrder };
    let mut log = Vec::new();
    meta_train(&mut m, &tasks, &cfg, &mut log).unwrap();
    let mean = |e: usize| {
        let r: Vec<f64> = log.iter().filter(|r| r.epoch == e).map(|r| r.query_loss_sentence + r.query_loss_word).collect();
        r.iter().sum::<f64>() / r.len() as f64
    };
    assert!(mean(4) < mean(0), "epoch 5 {} vs epoch 1 {}", mean(4), mean(0));
}

#[test]
fn finetuning_contracts() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let m = tiny_mix(2);
    let mut supports = BTreeMap::new();
    supports.insert("a".to_string(), cipher(&mut rng, 10, 0));
    supports.insert("u".to_string(), cipher(&mut rng, 7, 1));
    let seen = vec!["a".to_string()];

    let zero = FinetuneConfig { steps: 0, ..Default::default() };
    for run in finetune(&m, &supports, &seen, &zero, 0).unwrap() {
        assert_eq!(run.model.params().fingerprint(), m.params().fingerprint());
    }
    let all = FinetuneConfig { strategy: FtStrategy::All, steps: 1, ..Default::default() };
    let runs = finetune(&m, &supports, &seen, &all, 0).unwrap();
    assert_eq!((runs.len(), runs[0].records), (1, 17));
    let unseen = FinetuneConfig { strategy: FtStrategy::Unseen, steps: 1, ..Default::default() };
    assert_eq!(finetune(&m, &supports, &seen, &unseen, 0).unwrap()[0].records, 7);

    let heldout = cipher(&mut rng, 20, 1);
    let specific = FinetuneConfig { steps: 60, lr: 0.1, batch_size: 7, ..Default::default() };
    let runs = finetune(&m, &supports, &seen, &specific, 0).unwrap();
    let u = runs.iter().find(|r| r.target == "u").unwrap();
    let before = task_loss(&m, &heldout).unwrap().total;
    let after = task_loss(&u.model, &heldout).unwrap().total;
    assert!(after < before, "{after} >= {before}");
}

//! Domain proportions and the composite loss of a word-level mixing model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rml_adapt::autodiff::Tensor;
use rml_adapt::model::{DomainProportionLayer, Example, MixTransformer, ModelConfig};

fn main() -> rml_adapt::Result<()> {
    // Φ = (1 − ε)·softmax(R w) + ε/k
    let r = Tensor::matrix(3, 2, vec![2.0, 0.0, 0.0, 2.0, -1.0, -1.0])?;
    let layer = DomainProportionLayer::new(r, 0.1)?;
    println!("proportions for w = [1, 0]: {:.4?}", layer.apply(&[1.0, 0.0])?);

    let cfg = ModelConfig {
        vocab_size: 30,
        d_model: 16,
        heads: 2,
        enc_layers: 1,
        dec_layers: 1,
        ffn_dim: 32,
        domains: 3,
        epsilon: 0.1,
        mixing: true,
    };
    let model = MixTransformer::new(cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
    let batch = vec![
        Example { src: vec![5, 6, 7], tgt: vec![8, 9], domain: Some(0) },
        Example { src: vec![10, 11], tgt: vec![12, 13, 14], domain: Some(2) },
    ];
    let loss = model.composite_loss(&batch)?;
    println!("L_gen {:.4}  L_mix {:.4}  total {:.4}", loss.gen, loss.mix, loss.total);
    println!("mean proportions of the first pair: {:.4?}", model.domain_affinity(&batch[0].src, &batch[0].tgt)?);
    Ok(())
}

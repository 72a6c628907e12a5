//! Word-level domain-mixing encoder-decoder.
//!
//! Every attention projection and feed-forward matrix holds one weight
//! matrix per domain. Each input row picks its own blend through a
//! [`DomainProportionLayer`], so a word that looks medical leans on the
//! medical weights even inside a news sentence. Embeddings, layer norms and
//! the output projection are shared across domains.

mod loss;
mod proportion;
mod transformer;

pub use loss::{CompositeLoss, LossVars};
pub use proportion::{domain_proportion, mixed_transform, DomainProportionLayer, MixedLinear};
pub use transformer::{
    DecoderState, Example, ForwardVars, IncrementalDecoder, MixTransformer, ModelConfig,
    PackedBatch, ParamBreakdown, Side,
};

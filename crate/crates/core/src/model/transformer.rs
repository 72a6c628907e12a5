use rand::Rng;
use serde::{Deserialize, Serialize};

use super::proportion::{check_epsilon, linear_on_tape};
use crate::autodiff::{Scalar, Tape, Tensor, Var};
use crate::corpus::{BOS, EOS};
use crate::error::{Error, Result};
use crate::params::{xavier_uniform, Checkpoint, ParamSet};

pub(crate) const MASKED: f64 = -1e9;
pub(crate) const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ffn_dim: usize,
    /// Number of domains k.
    pub domains: usize,
    pub epsilon: f64,
    /// `false` builds a plain transformer: no proportion layers, one weight
    /// matrix per transform.
    pub mixing: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 64,
            d_model: 64,
            heads: 4,
            enc_layers: 2,
            dec_layers: 2,
            ffn_dim: 128,
            domains: 1,
            epsilon: 0.1,
            mixing: true,
        }
    }
}

/// Scalar counts per parameter group.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamBreakdown {
    pub embedding: usize,
    /// Weight matrices of every attention projection and feed-forward layer.
    pub attention_ffn: usize,
    /// Proportion matrices R.
    pub proportion: usize,
    pub norms: usize,
    pub output: usize,
}

impl ParamBreakdown {
    pub fn total(&self) -> usize {
        self.embedding + self.attention_ffn + self.proportion + self.norms + self.output
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.vocab_size < 5 {
            return bad(format!("vocab_size {} < 5", self.vocab_size));
        }
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            ));
        }
        if self.enc_layers == 0 || self.dec_layers == 0 {
            return bad("encoder and decoder need at least one layer each".into());
        }
        if self.ffn_dim == 0 || self.domains == 0 {
            return bad("ffn_dim and domains must be positive".into());
        }
        check_epsilon(self.epsilon)
    }

    /// Mixed linears per encoder layer: q, k, v, o, ff1, ff2.
    fn linears(&self) -> usize {
        6 * self.enc_layers + 10 * self.dec_layers
    }

    pub fn param_breakdown(&self) -> ParamBreakdown {
        let (d, f) = (self.d_model, self.ffn_dim);
        let k = if self.mixing { self.domains } else { 1 };
        let attn = 4 * d * d;
        let ffn = 2 * d * f;
        let per_enc = attn + ffn;
        let per_dec = 2 * attn + ffn;
        let attention_ffn = k * (self.enc_layers * per_enc + self.dec_layers * per_dec);
        let proportion = if self.mixing {
            // every transform reads d-dim input except ff2 which reads ffn_dim
            let inputs = (self.linears() - self.enc_layers - self.dec_layers) * d
                + (self.enc_layers + self.dec_layers) * f;
            self.domains * inputs
        } else {
            0
        };
        let norms = 2 * d * (2 * self.enc_layers + 3 * self.dec_layers + 2);
        ParamBreakdown {
            embedding: self.vocab_size * d,
            attention_ffn,
            proportion,
            norms,
            output: d * self.vocab_size + self.vocab_size,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    weight: usize,
    router: Option<usize>,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gain: usize,
    bias: usize,
}

#[derive(Clone, Copy, Debug)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Clone, Copy, Debug)]
struct EncoderLayer {
    norm1: Norm,
    attn: Attention,
    norm2: Norm,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Clone, Copy, Debug)]
struct DecoderLayer {
    norm1: Norm,
    self_attn: Attention,
    norm2: Norm,
    cross: Attention,
    norm3: Norm,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Clone, Debug)]
struct Layout {
    embed: usize,
    encoder: Vec<EncoderLayer>,
    enc_norm: Norm,
    decoder: Vec<DecoderLayer>,
    dec_norm: Norm,
    out_w: usize,
    out_b: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum ParamKind {
    Embedding,
    Weight { d_in: usize, d_out: usize },
    Router,
    Gain,
    Bias,
    Output,
}

struct LayoutBuilder<'a> {
    cfg: &'a ModelConfig,
    params: &'a mut ParamSet,
    init: &'a mut dyn FnMut(ParamKind, &[usize]) -> Tensor,
}

impl LayoutBuilder<'_> {
    fn add(&mut self, name: String, kind: ParamKind, shape: &[usize]) -> usize {
        let t = (self.init)(kind, shape);
        self.params.push(name, t)
    }

    fn linear(&mut self, name: &str, d_in: usize, d_out: usize) -> Linear {
        let k = if self.cfg.mixing { self.cfg.domains } else { 1 };
        let weight = self.add(
            format!("{name}.w"),
            ParamKind::Weight { d_in, d_out },
            &[d_in, k * d_out],
        );
        let router = if self.cfg.mixing {
            Some(self.add(format!("{name}.r"), ParamKind::Router, &[k, d_in]))
        } else {
            None
        };
        Linear { weight, router }
    }

    fn norm(&mut self, name: &str) -> Norm {
        let d = self.cfg.d_model;
        Norm {
            gain: self.add(format!("{name}.gain"), ParamKind::Gain, &[d]),
            bias: self.add(format!("{name}.bias"), ParamKind::Bias, &[d]),
        }
    }

    fn attention(&mut self, name: &str) -> Attention {
        let d = self.cfg.d_model;
        Attention {
            q: self.linear(&format!("{name}.q"), d, d),
            k: self.linear(&format!("{name}.k"), d, d),
            v: self.linear(&format!("{name}.v"), d, d),
            o: self.linear(&format!("{name}.o"), d, d),
        }
    }
}

impl Layout {
    fn build(
        cfg: &ModelConfig,
        params: &mut ParamSet,
        init: &mut dyn FnMut(ParamKind, &[usize]) -> Tensor,
    ) -> Layout {
        let (d, f, v) = (cfg.d_model, cfg.ffn_dim, cfg.vocab_size);
        let mut b = LayoutBuilder { cfg, params, init };
        let embed = b.add("embed".into(), ParamKind::Embedding, &[v, d]);
        let mut encoder = Vec::new();
        for l in 0..cfg.enc_layers {
            let p = format!("enc.{l}");
            encoder.push(EncoderLayer {
                norm1: b.norm(&format!("{p}.norm1")),
                attn: b.attention(&format!("{p}.self")),
                norm2: b.norm(&format!("{p}.norm2")),
                ff1: b.linear(&format!("{p}.ff1"), d, f),
                ff2: b.linear(&format!("{p}.ff2"), f, d),
            });
        }
        let enc_norm = b.norm("enc.norm");
        let mut decoder = Vec::new();
        for l in 0..cfg.dec_layers {
            let p = format!("dec.{l}");
            decoder.push(DecoderLayer {
                norm1: b.norm(&format!("{p}.norm1")),
                self_attn: b.attention(&format!("{p}.self")),
                norm2: b.norm(&format!("{p}.norm2")),
                cross: b.attention(&format!("{p}.cross")),
                norm3: b.norm(&format!("{p}.norm3")),
                ff1: b.linear(&format!("{p}.ff1"), d, f),
                ff2: b.linear(&format!("{p}.ff2"), f, d),
            });
        }
        let dec_norm = b.norm("dec.norm");
        let out_w = b.add("out.w".into(), ParamKind::Output, &[d, v]);
        let out_b = b.add("out.b".into(), ParamKind::Bias, &[v]);
        Layout {
            embed,
            encoder,
            enc_norm,
            decoder,
            dec_norm,
            out_w,
            out_b,
        }
    }
}

/// Which side of the batch a proportion site reads from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Source,
    Target,
}

/// One training or scoring example. `domain` is the sentence label J.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Example {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
    pub domain: Option<usize>,
}

/// Sentences packed into flat token streams; attention masks keep
/// sentences apart.
#[derive(Clone, Debug)]
pub struct PackedBatch {
    src_ids: Vec<usize>,
    src_pos: Vec<usize>,
    src_seg: Vec<usize>,
    tgt_ids: Vec<usize>,
    tgt_pos: Vec<usize>,
    tgt_seg: Vec<usize>,
    targets: Vec<usize>,
    domains: Vec<Option<usize>>,
}

impl PackedBatch {
    /// Decoder input is `BOS y`, targets are `y EOS`.
    pub fn from_examples(examples: &[Example]) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let mut b = PackedBatch::empty();
        for (s, ex) in examples.iter().enumerate() {
            let mut input = Vec::with_capacity(ex.tgt.len() + 1);
            input.push(BOS);
            input.extend_from_slice(&ex.tgt);
            let mut targets = ex.tgt.clone();
            targets.push(EOS);
            b.push(s, &ex.src, &input, Some(&targets), ex.domain)?;
        }
        Ok(b)
    }

    /// Single source with an explicit decoder input (no targets).
    pub fn from_prefix(src: &[usize], prefix: &[usize]) -> Result<Self> {
        let mut b = PackedBatch::empty();
        b.push(0, src, prefix, None, None)?;
        Ok(b)
    }

    fn empty() -> Self {
        PackedBatch {
            src_ids: vec![],
            src_pos: vec![],
            src_seg: vec![],
            tgt_ids: vec![],
            tgt_pos: vec![],
            tgt_seg: vec![],
            targets: vec![],
            domains: vec![],
        }
    }

    fn push(
        &mut self,
        seg: usize,
        src: &[usize],
        input: &[usize],
        targets: Option<&[usize]>,
        domain: Option<usize>,
    ) -> Result<()> {
        if src.is_empty() {
            return Err(Error::Empty("source sentence"));
        }
        if input.is_empty() {
            return Err(Error::Empty("target prefix"));
        }
        self.src_ids.extend_from_slice(src);
        self.src_pos.extend(0..src.len());
        self.src_seg.extend(std::iter::repeat(seg).take(src.len()));
        self.tgt_ids.extend_from_slice(input);
        self.tgt_pos.extend(0..input.len());
        self.tgt_seg.extend(std::iter::repeat(seg).take(input.len()));
        if let Some(t) = targets {
            self.targets.extend_from_slice(t);
        }
        self.domains.push(domain);
        Ok(())
    }

    pub fn sentences(&self) -> usize {
        self.domains.len()
    }

    pub fn target_tokens(&self) -> usize {
        self.tgt_ids.len()
    }

    pub fn targets(&self) -> &[usize] {
        &self.targets
    }

    /// Per-row domain labels for the given side; `None` if any sentence is
    /// unlabeled.
    pub(crate) fn row_labels(&self, side: Side) -> Option<Vec<usize>> {
        let seg = match side {
            Side::Source => &self.src_seg,
            Side::Target => &self.tgt_seg,
        };
        seg.iter().map(|&s| self.domains[s]).collect()
    }
}

/// Output of a recorded forward pass.
pub struct ForwardVars {
    pub logits: Var,
    /// Every proportion output (n × k) with the side its rows belong to.
    pub proportions: Vec<(Var, Side)>,
}

/// Encoder-decoder transformer whose attention and feed-forward transforms
/// are per-domain mixtures (or plain, when `mixing` is off).
#[derive(Clone, Debug)]
pub struct MixTransformer {
    config: ModelConfig,
    params: ParamSet,
    layout: Layout,
}

impl MixTransformer {
    /// Xavier-uniform weights, zero proportion matrices, unit norms.
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let k = if config.mixing { config.domains } else { 1 };
        let layout = Layout::build(&config, &mut params, &mut |kind, shape| match kind {
            ParamKind::Weight { d_in, d_out } => {
                // independent Xavier draw per domain block
                let blocks: Vec<Tensor> = (0..k).map(|_| xavier_uniform(rng, d_in, d_out)).collect();
                let mut data = Vec::with_capacity(d_in * k * d_out);
                for i in 0..d_in {
                    for b in &blocks {
                        data.extend_from_slice(b.row(i));
                    }
                }
                Tensor::from_parts(shape.to_vec(), data)
            }
            ParamKind::Embedding | ParamKind::Output => xavier_uniform(rng, shape[0], shape[1]),
            ParamKind::Gain => Tensor::full(shape, 1.0),
            ParamKind::Router | ParamKind::Bias => Tensor::zeros(shape),
        });
        Ok(MixTransformer {
            config,
            params,
            layout,
        })
    }

    /// Wraps existing parameters; names and shapes must match `config`.
    pub fn from_params(config: ModelConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let mut expected = ParamSet::new();
        let layout = Layout::build(&config, &mut expected, &mut |_, shape| Tensor::zeros(shape));
        if !expected.same_layout(&params) {
            return Err(Error::Checkpoint(
                "parameter names or shapes do not match the model config".into(),
            ));
        }
        Ok(MixTransformer {
            config,
            params,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn with_params(&self, params: ParamSet) -> Result<Self> {
        if !self.params.same_layout(&params) {
            return Err(Error::InvalidArgument("parameter layout mismatch".into()));
        }
        Ok(MixTransformer {
            config: self.config.clone(),
            params,
            layout: self.layout.clone(),
        })
    }

    pub fn to_checkpoint(&self, vocab_hash: &str) -> Checkpoint {
        Checkpoint {
            kind: "mix-transformer".into(),
            meta: serde_json::json!({
                "config": self.config,
                "k": self.config.domains,
                "epsilon": self.config.epsilon,
                "vocab_hash": vocab_hash,
            }),
            params: self.params.clone(),
        }
    }

    /// Returns the model and the vocabulary hash it was saved with.
    pub fn from_checkpoint(ck: Checkpoint) -> Result<(Self, String)> {
        if ck.kind != "mix-transformer" {
            return Err(Error::Checkpoint(format!("expected mix-transformer, found {}", ck.kind)));
        }
        let config: ModelConfig = serde_json::from_value(ck.meta["config"].clone())?;
        let vocab_hash = ck.meta["vocab_hash"].as_str().unwrap_or_default().to_string();
        Ok((Self::from_params(config, ck.params)?, vocab_hash))
    }

    /// Next-token logits for every position of `tgt_prefix`
    /// (`tgt_prefix.len()` × vocabulary).
    pub fn forward(&self, src: &[usize], tgt_prefix: &[usize]) -> Result<Tensor> {
        let batch = PackedBatch::from_prefix(src, tgt_prefix)?;
        let mut tape = Tape::<f64>::new();
        let vars = self.params.bind(&mut tape)?;
        let out = self.forward_on_tape(&mut tape, &vars, &batch)?;
        Ok(tape.value(out.logits).clone())
    }

    /// Records the full forward pass for a packed batch.
    pub fn forward_on_tape<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        p: &[Var],
        batch: &PackedBatch,
    ) -> Result<ForwardVars> {
        let cfg = &self.config;
        let mut sites = Vec::new();
        let enc_mask = mask(&batch.src_seg, &batch.src_seg, |i, j| {
            batch.src_seg[i] == batch.src_seg[j]
        });
        let enc_mask = lift(tape, enc_mask)?;
        let mut x = self.embed(tape, p, &batch.src_ids, &batch.src_pos)?;
        for layer in &self.layout.encoder {
            let h = self.norm(tape, p, x, layer.norm1)?;
            let a = self.attention(tape, p, h, h, &layer.attn, enc_mask, Side::Source, Side::Source, &mut sites)?;
            x = tape.add(x, a)?;
            let h = self.norm(tape, p, x, layer.norm2)?;
            let f = self.feed_forward(tape, p, h, layer.ff1, layer.ff2, Side::Source, &mut sites)?;
            x = tape.add(x, f)?;
        }
        let memory = self.norm(tape, p, x, self.layout.enc_norm)?;

        let self_mask = mask(&batch.tgt_seg, &batch.tgt_seg, |i, j| {
            batch.tgt_seg[i] == batch.tgt_seg[j] && batch.tgt_pos[j] <= batch.tgt_pos[i]
        });
        let self_mask = lift(tape, self_mask)?;
        let cross_mask = mask(&batch.tgt_seg, &batch.src_seg, |i, j| {
            batch.tgt_seg[i] == batch.src_seg[j]
        });
        let cross_mask = lift(tape, cross_mask)?;
        let mut y = self.embed(tape, p, &batch.tgt_ids, &batch.tgt_pos)?;
        for layer in &self.layout.decoder {
            let h = self.norm(tape, p, y, layer.norm1)?;
            let a = self.attention(tape, p, h, h, &layer.self_attn, self_mask, Side::Target, Side::Target, &mut sites)?;
            y = tape.add(y, a)?;
            let h = self.norm(tape, p, y, layer.norm2)?;
            let c = self.attention(tape, p, h, memory, &layer.cross, cross_mask, Side::Target, Side::Source, &mut sites)?;
            y = tape.add(y, c)?;
            let h = self.norm(tape, p, y, layer.norm3)?;
            let f = self.feed_forward(tape, p, h, layer.ff1, layer.ff2, Side::Target, &mut sites)?;
            y = tape.add(y, f)?;
        }
        let y = self.norm(tape, p, y, self.layout.dec_norm)?;
        let logits = tape.matmul(y, p[self.layout.out_w])?;
        let logits = tape.add_row(logits, p[self.layout.out_b])?;
        debug_assert_eq!(cfg.vocab_size, tape.shape(logits)[1]);
        Ok(ForwardVars {
            logits,
            proportions: sites,
        })
    }

    fn embed<S: Scalar>(&self, tape: &mut Tape<S>, p: &[Var], ids: &[usize], pos: &[usize]) -> Result<Var> {
        let d = self.config.d_model;
        let e = tape.embedding(p[self.layout.embed], ids)?;
        let e = tape.scale(e, (d as f64).sqrt())?;
        let pe = lift(tape, positional_encoding(pos, d))?;
        tape.add(e, pe)
    }

    fn norm<S: Scalar>(&self, tape: &mut Tape<S>, p: &[Var], x: Var, n: Norm) -> Result<Var> {
        let h = tape.layer_norm(x, LN_EPS)?;
        let h = tape.mul_row(h, p[n.gain])?;
        tape.add_row(h, p[n.bias])
    }

    fn linear<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        p: &[Var],
        x: Var,
        l: Linear,
        side: Side,
        sites: &mut Vec<(Var, Side)>,
    ) -> Result<Var> {
        let (out, phi) = linear_on_tape(tape, x, p[l.weight], l.router.map(|r| p[r]), self.config.epsilon)?;
        if let Some(phi) = phi {
            sites.push((phi, side));
        }
        Ok(out)
    }

    #[allow(clippy::too_many_arguments)]
    fn attention<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        p: &[Var],
        query_in: Var,
        kv_in: Var,
        a: &Attention,
        mask: Var,
        q_side: Side,
        kv_side: Side,
        sites: &mut Vec<(Var, Side)>,
    ) -> Result<Var> {
        let heads = self.config.heads;
        let dh = self.config.d_model / heads;
        let q = self.linear(tape, p, query_in, a.q, q_side, sites)?;
        let k = self.linear(tape, p, kv_in, a.k, kv_side, sites)?;
        let v = self.linear(tape, p, kv_in, a.v, kv_side, sites)?;
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let s = tape.matmul_bt(qh, kh)?;
            let s = tape.scale(s, 1.0 / (dh as f64).sqrt())?;
            let s = tape.add(s, mask)?;
            let w = tape.softmax(s)?;
            outs.push(tape.matmul(w, vh)?);
        }
        let cat = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
        self.linear(tape, p, cat, a.o, q_side, sites)
    }

    #[allow(clippy::too_many_arguments)]
    fn feed_forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        p: &[Var],
        x: Var,
        ff1: Linear,
        ff2: Linear,
        side: Side,
        sites: &mut Vec<(Var, Side)>,
    ) -> Result<Var> {
        let h = self.linear(tape, p, x, ff1, side, sites)?;
        let h = tape.relu(h)?;
        self.linear(tape, p, h, ff2, side, sites)
    }

    /// Prepares incremental decoding of one source sentence.
    pub fn decoder(&self, src: &[usize]) -> Result<IncrementalDecoder<'_>> {
        IncrementalDecoder::new(self, src)
    }
}

fn mask(rows: &[usize], cols: &[usize], allowed: impl Fn(usize, usize) -> bool) -> Tensor {
    let (n, m) = (rows.len(), cols.len());
    let mut data = Vec::with_capacity(n * m);
    for i in 0..n {
        for j in 0..m {
            data.push(if allowed(i, j) { 0.0 } else { MASKED });
        }
    }
    Tensor::from_parts(vec![n, m], data)
}

pub(crate) fn lift<S: Scalar>(tape: &mut Tape<S>, t: Tensor) -> Result<Var> {
    let shape = t.shape().to_vec();
    let data = t.into_data().into_iter().map(S::from_f64).collect();
    tape.constant(Tensor::new(shape, data)?)
}

pub(crate) fn positional_encoding(pos: &[usize], d: usize) -> Tensor {
    let mut data = Vec::with_capacity(pos.len() * d);
    for &p in pos {
        for i in 0..d {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = p as f64 / rate;
            data.push(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::from_parts(vec![pos.len(), d], data)
}

// Eager f64 kernels for inference (no tape, no parameter copies).
mod eager {
    use super::*;

    pub(super) fn matmul(x: &Tensor, w: &Tensor) -> Tensor {
        let (n, k, m) = (x.rows(), x.cols(), w.cols());
        let mut out = vec![0.0; n * m];
        f64::gemm(n, k, m, x.data(), false, w.data(), false, &mut out, false);
        Tensor::from_parts(vec![n, m], out)
    }

    pub(super) fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Tensor {
        let d = x.cols();
        let mut out = Vec::with_capacity(x.numel());
        for row in x.data().chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rstd = 1.0 / (var + LN_EPS).sqrt();
            out.extend(
                row.iter()
                    .zip(gain.data().iter().zip(bias.data()))
                    .map(|(v, (g, b))| (v - mean) * rstd * g + b),
            );
        }
        Tensor::from_parts(x.shape().to_vec(), out)
    }

    pub(super) fn linear(model: &MixTransformer, x: &Tensor, l: Linear) -> Tensor {
        let y = matmul(x, model.params.get(l.weight));
        let Some(r) = l.router else { return y };
        let r = model.params.get(r);
        let k = r.rows();
        let eps = model.config.epsilon;
        let m = y.cols() / k;
        let mut out = vec![0.0; x.rows() * m];
        for i in 0..x.rows() {
            let xr = x.row(i);
            let logits: Vec<f64> = (0..k)
                .map(|j| r.row(j).iter().zip(xr).map(|(a, b)| a * b).sum())
                .collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            let yr = y.row(i);
            let o = &mut out[i * m..(i + 1) * m];
            for (j, e) in exps.iter().enumerate() {
                let phi = (1.0 - eps) * (e / z) + eps / k as f64;
                for (ov, &yv) in o.iter_mut().zip(&yr[j * m..(j + 1) * m]) {
                    *ov += phi * yv;
                }
            }
        }
        Tensor::from_parts(vec![x.rows(), m], out)
    }

    /// Attention of each query row over its own key/value rows.
    pub(super) fn attend_rows(q: &[f64], keys: &[f64], values: &[f64], heads: usize, out: &mut [f64]) {
        let d = q.len();
        let dh = d / heads;
        let n = keys.len() / d;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut scores = vec![0.0; n];
        for h in 0..heads {
            let qh = &q[h * dh..(h + 1) * dh];
            for (j, s) in scores.iter_mut().enumerate() {
                let kh = &keys[j * d + h * dh..j * d + (h + 1) * dh];
                *s = qh.iter().zip(kh).map(|(a, b)| a * b).sum::<f64>() * scale;
            }
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for s in scores.iter_mut() {
                *s = (*s - max).exp();
                z += *s;
            }
            let oh = &mut out[h * dh..(h + 1) * dh];
            oh.iter_mut().for_each(|v| *v = 0.0);
            for (j, s) in scores.iter().enumerate() {
                let w = s / z;
                for (o, v) in oh.iter_mut().zip(&values[j * d + h * dh..j * d + (h + 1) * dh]) {
                    *o += w * v;
                }
            }
        }
    }

    pub(super) fn add_assign(x: &mut Tensor, y: &Tensor) {
        for (a, b) in x.data_mut().iter_mut().zip(y.data()) {
            *a += b;
        }
    }
}

/// Per-hypothesis decoder cache: self-attention keys and values of every
/// generated position, per layer.
#[derive(Clone, Debug)]
pub struct DecoderState {
    pos: usize,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
}

/// Incremental decoder over a fixed source sentence.
pub struct IncrementalDecoder<'a> {
    model: &'a MixTransformer,
    cross: Vec<(Tensor, Tensor)>,
}

impl<'a> IncrementalDecoder<'a> {
    fn new(model: &'a MixTransformer, src: &[usize]) -> Result<Self> {
        if src.is_empty() {
            return Err(Error::Empty("source sentence"));
        }
        let cfg = &model.config;
        let d = cfg.d_model;
        let mut x = embed_eager(model, src, 0)?;
        for layer in &model.layout.encoder {
            let h = norm_eager(model, &x, layer.norm1);
            let q = eager::linear(model, &h, layer.attn.q);
            let k = eager::linear(model, &h, layer.attn.k);
            let v = eager::linear(model, &h, layer.attn.v);
            let mut cat = vec![0.0; x.numel()];
            for i in 0..x.rows() {
                eager::attend_rows(q.row(i), k.data(), v.data(), cfg.heads, &mut cat[i * d..(i + 1) * d]);
            }
            let o = eager::linear(model, &Tensor::from_parts(x.shape().to_vec(), cat), layer.attn.o);
            eager::add_assign(&mut x, &o);
            let h = norm_eager(model, &x, layer.norm2);
            let f = ffn_eager(model, &h, layer.ff1, layer.ff2);
            eager::add_assign(&mut x, &f);
        }
        let memory = norm_eager(model, &x, model.layout.enc_norm);
        let cross = model
            .layout
            .decoder
            .iter()
            .map(|layer| {
                (
                    eager::linear(model, &memory, layer.cross.k),
                    eager::linear(model, &memory, layer.cross.v),
                )
            })
            .collect();
        Ok(IncrementalDecoder { model, cross })
    }

    pub fn vocab_size(&self) -> usize {
        self.model.config.vocab_size
    }

    pub fn start(&self) -> DecoderState {
        let layers = self.model.config.dec_layers;
        DecoderState {
            pos: 0,
            keys: vec![Vec::new(); layers],
            values: vec![Vec::new(); layers],
        }
    }

    /// Feeds one token per hypothesis; returns next-token log-probabilities
    /// and the advanced states.
    pub fn step(&self, states: &[DecoderState], tokens: &[usize]) -> Result<(Vec<Vec<f64>>, Vec<DecoderState>)> {
        if states.len() != tokens.len() || states.is_empty() {
            return Err(Error::InvalidArgument("one token per decoder state required".into()));
        }
        let model = self.model;
        let cfg = &model.config;
        let d = cfg.d_model;
        let n = states.len();
        let mut next: Vec<DecoderState> = states.to_vec();
        let mut rows = Vec::with_capacity(n * d);
        for (s, &tok) in states.iter().zip(tokens) {
            rows.extend_from_slice(embed_eager(model, &[tok], s.pos)?.data());
        }
        let mut x = Tensor::from_parts(vec![n, d], rows);
        for (l, layer) in model.layout.decoder.iter().enumerate() {
            let h = norm_eager(model, &x, layer.norm1);
            let q = eager::linear(model, &h, layer.self_attn.q);
            let k = eager::linear(model, &h, layer.self_attn.k);
            let v = eager::linear(model, &h, layer.self_attn.v);
            let mut cat = vec![0.0; n * d];
            for b in 0..n {
                next[b].keys[l].extend_from_slice(k.row(b));
                next[b].values[l].extend_from_slice(v.row(b));
                eager::attend_rows(q.row(b), &next[b].keys[l], &next[b].values[l], cfg.heads, &mut cat[b * d..(b + 1) * d]);
            }
            let o = eager::linear(model, &Tensor::from_parts(vec![n, d], cat), layer.self_attn.o);
            eager::add_assign(&mut x, &o);

            let h = norm_eager(model, &x, layer.norm2);
            let q = eager::linear(model, &h, layer.cross.q);
            let (ck, cv) = &self.cross[l];
            let mut cat = vec![0.0; n * d];
            for b in 0..n {
                eager::attend_rows(q.row(b), ck.data(), cv.data(), cfg.heads, &mut cat[b * d..(b + 1) * d]);
            }
            let o = eager::linear(model, &Tensor::from_parts(vec![n, d], cat), layer.cross.o);
            eager::add_assign(&mut x, &o);

            let h = norm_eager(model, &x, layer.norm3);
            let f = ffn_eager(model, &h, layer.ff1, layer.ff2);
            eager::add_assign(&mut x, &f);
        }
        let y = norm_eager(model, &x, model.layout.dec_norm);
        let logits = eager::matmul(&y, model.params.get(model.layout.out_w));
        let bias = model.params.get(model.layout.out_b).data();
        let mut out = Vec::with_capacity(n);
        for b in 0..n {
            let row: Vec<f64> = logits.row(b).iter().zip(bias).map(|(a, c)| a + c).collect();
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            let lp: Vec<f64> = row.iter().map(|v| v - lse).collect();
            if lp.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { op: "decoder step" });
            }
            out.push(lp);
            next[b].pos += 1;
        }
        Ok((out, next))
    }
}

fn embed_eager(model: &MixTransformer, ids: &[usize], start: usize) -> Result<Tensor> {
    let cfg = &model.config;
    let d = cfg.d_model;
    let table = model.params.get(model.layout.embed);
    let scale = (d as f64).sqrt();
    let pos: Vec<usize> = (start..start + ids.len()).collect();
    let mut x = positional_encoding(&pos, d);
    for (i, &id) in ids.iter().enumerate() {
        if id >= cfg.vocab_size {
            return Err(Error::OutOfRange {
                what: "vocabulary",
                index: id,
                size: cfg.vocab_size,
            });
        }
        for (xv, &e) in x.data_mut()[i * d..(i + 1) * d].iter_mut().zip(table.row(id)) {
            *xv += e * scale;
        }
    }
    Ok(x)
}

fn norm_eager(model: &MixTransformer, x: &Tensor, n: Norm) -> Tensor {
    eager::layer_norm(x, model.params.get(n.gain), model.params.get(n.bias))
}

fn ffn_eager(model: &MixTransformer, x: &Tensor, ff1: Linear, ff2: Linear) -> Tensor {
    let h = eager::linear(model, x, ff1).map(|v| v.max(0.0));
    eager::linear(model, &h, ff2)
}

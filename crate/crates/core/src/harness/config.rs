use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifier::ClassifierConfig;
use crate::corpus::{SplitSizes, SynthSpec};
use crate::curriculum::SplitConfig;
use crate::error::{Error, Result};
use crate::eval::BeamConfig;
use crate::meta::{FinetuneConfig, FtStrategy, MetaConfig};
use crate::train::TrainConfig;

/// Environment variable that replaces `output_dir`.
pub const OUTPUT_ENV: &str = "RML_ADAPT_OUTPUT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    /// Master seed; every stage derives its own from it.
    pub seed: u64,
    pub corpus: CorpusConfig,
    #[serde(default)]
    pub model: ModelDims,
    #[serde(default)]
    pub classifier: ClassifierConfig,
    #[serde(default)]
    pub split: SplitSizes,
    #[serde(default)]
    pub curriculum: SplitConfig,
    #[serde(default)]
    pub pretrain: TrainConfig,
    #[serde(default)]
    pub meta: MetaConfig,
    #[serde(default)]
    pub finetune: FinetuneConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default = "default_baselines")]
    pub baselines: Vec<BaselineSpec>,
}

fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub general: String,
    pub seen: Vec<String>,
    #[serde(default)]
    pub unseen: Vec<String>,
    #[serde(default = "default_vocab_cap")]
    pub vocab_cap: usize,
    /// Generate cipher domains (used by `synth`).
    pub synthetic: Option<SyntheticConfig>,
    /// Domain → path prefix of `.src`/`.tgt` files (used by `ingest`).
    pub files: Option<BTreeMap<String, PathBuf>>,
}

fn default_vocab_cap() -> usize {
    40_000
}

/// Synthetic corpus knobs; domain names come from the partition, with the
/// general domain drawing from the base lexicon.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub pairs_per_domain: usize,
    pub lexicon_size: usize,
    pub overlap: f64,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        let s = SynthSpec::default();
        SyntheticConfig {
            pairs_per_domain: s.pairs_per_domain,
            lexicon_size: s.lexicon_size,
            overlap: s.overlap,
            min_len: s.min_len,
            max_len: s.max_len,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelDims {
    pub d_model: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ffn_dim: usize,
    pub epsilon: f64,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            d_model: 64,
            heads: 4,
            enc_layers: 2,
            dec_layers: 2,
            ffn_dim: 128,
            epsilon: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    #[serde(flatten)]
    pub beam: BeamConfig,
    /// Evaluate on at most this many query sentences per domain.
    pub max_sentences: Option<usize>,
    /// Baselines whose fine-tuned models fill a robustness matrix.
    pub robustness: Vec<BaselineKind>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            beam: BeamConfig::default(),
            max_sentences: None,
            robustness: vec![BaselineKind::Rmlnmt, BaselineKind::MetaOnly],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineKind {
    Vanilla,
    PlainFt,
    MetaOnly,
    MetaCurriculumCls,
    WordLevelAdaptive,
    Rmlnmt,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 6] = [
        BaselineKind::Vanilla,
        BaselineKind::PlainFt,
        BaselineKind::MetaOnly,
        BaselineKind::MetaCurriculumCls,
        BaselineKind::WordLevelAdaptive,
        BaselineKind::Rmlnmt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::Vanilla => "vanilla",
            BaselineKind::PlainFt => "plain-ft",
            BaselineKind::MetaOnly => "meta-only",
            BaselineKind::MetaCurriculumCls => "meta-curriculum-cls",
            BaselineKind::WordLevelAdaptive => "word-level-adaptive",
            BaselineKind::Rmlnmt => "rmlnmt",
        }
    }

    pub fn preset(self) -> Preset {
        use BaseModel::*;
        use Tasks::*;
        let (base, tasks, finetuned, no_ft_row) = match self {
            BaselineKind::Vanilla => (Vanilla, None, false, true),
            BaselineKind::PlainFt => (Vanilla, None, true, false),
            BaselineKind::MetaOnly => (GeneralOnly, Some(Random), true, true),
            BaselineKind::MetaCurriculumCls => (GeneralOnly, Some(Curriculum), true, true),
            BaselineKind::WordLevelAdaptive => (Mix, None, true, true),
            BaselineKind::Rmlnmt => (Mix, Some(Curriculum), true, true),
        };
        Preset {
            base,
            tasks,
            finetuned,
            no_ft_row,
        }
    }
}

/// Which pretrained model a baseline starts from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum BaseModel {
    /// Plain transformer on the general domain plus all meta-train data.
    Vanilla,
    /// Plain transformer on the general domain only.
    GeneralOnly,
    /// Domain-mixing transformer on the general domain plus meta-train data.
    Mix,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tasks {
    /// Uniformly shuffled tasks.
    Random,
    /// Classifier-score curriculum tasks.
    Curriculum,
}

/// How a baseline is built from the shared pipeline pieces.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Preset {
    pub base: BaseModel,
    pub tasks: Option<Tasks>,
    /// Has a fine-tuned row in the report.
    pub finetuned: bool,
    /// Has a row without fine-tuning.
    pub no_ft_row: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineSpec {
    pub kind: BaselineKind,
    /// Scale the plain model's width by ⌈√k⌉ to match the mixed model's
    /// parameter count (only meaningful for the vanilla model).
    #[serde(default)]
    pub widen_embeddings: bool,
}

fn default_baselines() -> Vec<BaselineSpec> {
    BaselineKind::ALL
        .iter()
        .map(|&kind| BaselineSpec {
            kind,
            widen_embeddings: matches!(kind, BaselineKind::Vanilla | BaselineKind::PlainFt),
        })
        .collect()
}

fn config_err(path: &str, message: impl Into<String>) -> Error {
    Error::Config {
        path: path.to_string(),
        message: message.into(),
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let path = e.span().map_or_else(String::new, |s| format!("bytes {}..{}", s.start, s.end));
            config_err(&path, e.message())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Domains in label order: general, the other seen domains, then the
    /// unseen ones.
    pub fn domains(&self) -> Vec<String> {
        self.seen_domains().into_iter().chain(self.corpus.unseen.iter().cloned()).collect()
    }

    /// Seen domains with the general domain first; its position is the
    /// mixing label.
    pub fn seen_domains(&self) -> Vec<String> {
        let mut out = vec![self.corpus.general.clone()];
        out.extend(self.corpus.seen.iter().filter(|d| **d != self.corpus.general).cloned());
        out
    }

    pub fn has(&self, kind: BaselineKind) -> bool {
        self.baselines.iter().any(|b| b.kind == kind)
    }

    pub fn spec(&self, kind: BaselineKind) -> Option<&BaselineSpec> {
        self.baselines.iter().find(|b| b.kind == kind)
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.corpus;
        if c.seen.is_empty() {
            return Err(config_err("corpus.seen", "at least one seen domain is required"));
        }
        if !c.seen.contains(&c.general) {
            return Err(config_err("corpus.general", format!("`{}` must be listed in corpus.seen", c.general)));
        }
        let mut all = BTreeSet::new();
        for (field, list) in [("corpus.seen", &c.seen), ("corpus.unseen", &c.unseen)] {
            for d in list {
                if d.is_empty() || d.contains(['/', '\\', '\t', '\n']) {
                    return Err(config_err(field, format!("invalid domain name `{d}`")));
                }
                if !all.insert(d.clone()) {
                    return Err(config_err(field, format!("domain `{d}` appears more than once across seen/unseen")));
                }
            }
        }
        if self.seen_domains().len() < 2 {
            return Err(config_err("corpus.seen", "needs the general domain and at least one other"));
        }
        match (&c.synthetic, &c.files) {
            (Some(_), Some(_)) => return Err(config_err("corpus", "set either `synthetic` or `files`, not both")),
            (None, None) => return Err(config_err("corpus", "one of `synthetic` or `files` is required")),
            (None, Some(files)) => {
                for d in &all {
                    if !files.contains_key(d) {
                        return Err(config_err(&format!("corpus.files.{d}"), "no file prefix for this domain"));
                    }
                }
                if let Some(extra) = files.keys().find(|k| !all.contains(*k)) {
                    return Err(config_err(&format!("corpus.files.{extra}"), "domain is neither seen nor unseen"));
                }
            }
            (Some(s), None) => {
                self.synth_spec().validate().map_err(|e| config_err("corpus.synthetic", e.to_string()))?;
                if s.pairs_per_domain == 0 {
                    return Err(config_err("corpus.synthetic.pairs_per_domain", "must be positive"));
                }
            }
        }
        if c.vocab_cap < 5 {
            return Err(config_err("corpus.vocab_cap", "must be at least 5"));
        }
        self.model_config(false, 1)
            .validate()
            .map_err(|e| config_err("model", e.to_string()))?;
        self.curriculum.validate().map_err(|e| config_err("curriculum", e.to_string()))?;
        self.meta.validate().map_err(|e| config_err("meta", e.to_string()))?;
        if self.pretrain.batch_size == 0 || self.pretrain.lr <= 0.0 {
            return Err(config_err("pretrain", "batch_size and lr must be positive"));
        }
        if self.finetune.batch_size == 0 || self.finetune.lr < 0.0 {
            return Err(config_err("finetune", "batch_size must be positive and lr non-negative"));
        }
        if self.classifier.epochs == 0 || self.classifier.batch_size == 0 || self.classifier.lr <= 0.0 {
            return Err(config_err("classifier", "epochs, batch_size and lr must be positive"));
        }
        if self.eval.beam.beam_size == 0 {
            return Err(config_err("eval.beam_size", "must be at least 1"));
        }
        if self.eval.max_sentences == Some(0) {
            return Err(config_err("eval.max_sentences", "must be positive"));
        }
        if self.baselines.is_empty() {
            return Err(config_err("baselines", "at least one baseline is required"));
        }
        let mut kinds = BTreeSet::new();
        for (i, b) in self.baselines.iter().enumerate() {
            if !kinds.insert(b.kind) {
                return Err(config_err(&format!("baselines[{i}].kind"), format!("`{}` listed twice", b.kind.name())));
            }
            if b.widen_embeddings && b.kind.preset().base != BaseModel::Vanilla {
                return Err(config_err(
                    &format!("baselines[{i}].widen_embeddings"),
                    "only the vanilla model can be widened",
                ));
            }
        }
        if let (Some(v), Some(p)) = (self.spec(BaselineKind::Vanilla), self.spec(BaselineKind::PlainFt)) {
            if v.widen_embeddings != p.widen_embeddings {
                return Err(config_err("baselines", "vanilla and plain-ft share one model and must agree on widen_embeddings"));
            }
        }
        for (i, k) in self.eval.robustness.iter().enumerate() {
            if !self.has(*k) || !k.preset().finetuned {
                return Err(config_err(
                    &format!("eval.robustness[{i}]"),
                    format!("`{}` must be a configured baseline with fine-tuning", k.name()),
                ));
            }
        }
        if !self.eval.robustness.is_empty() && !self.has(BaselineKind::Vanilla) {
            return Err(config_err("eval.robustness", "the robustness baseline needs `vanilla` in baselines"));
        }
        if !self.eval.robustness.is_empty() && self.finetune.strategy != FtStrategy::Specific {
            return Err(config_err("finetune.strategy", "robustness matrices need per-domain (FT-specific) models"));
        }
        Ok(())
    }

    pub fn synth_spec(&self) -> SynthSpec {
        let s = self.corpus.synthetic.clone().unwrap_or_default();
        SynthSpec {
            domains: self.domains(),
            pairs_per_domain: s.pairs_per_domain,
            lexicon_size: s.lexicon_size,
            overlap: s.overlap,
            min_len: s.min_len,
            max_len: s.max_len,
            seed: self.seed,
        }
    }

    /// Model config for a vocabulary of `vocab_size` tokens.
    pub fn model_config(&self, mixing: bool, vocab_size: usize) -> crate::model::ModelConfig {
        let m = &self.model;
        crate::model::ModelConfig {
            vocab_size: vocab_size.max(5),
            d_model: m.d_model,
            heads: m.heads,
            enc_layers: m.enc_layers,
            dec_layers: m.dec_layers,
            ffn_dim: m.ffn_dim,
            domains: if mixing { self.seen_domains().len() } else { 1 },
            epsilon: m.epsilon,
            mixing,
        }
    }

    /// Plain model widened by ⌈√k⌉ in every hidden dimension, so its
    /// attention and feed-forward matrices hold k times the parameters of
    /// one domain block when k is a perfect square.
    pub fn widened_config(&self, vocab_size: usize) -> crate::model::ModelConfig {
        let k = self.seen_domains().len();
        let f = (k as f64).sqrt().ceil() as usize;
        let mut c = self.model_config(false, vocab_size);
        c.d_model *= f;
        c.ffn_dim *= f;
        c
    }

    /// SHA-256 of the canonical JSON form, without the output directory.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(o) = v.as_object_mut() {
            o.remove("output_dir");
        }
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }
}

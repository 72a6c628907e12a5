use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{BaseModel, BaselineKind, ExperimentConfig, Tasks, OUTPUT_ENV};
use super::report::{self, EvalRecord, RobustnessRecord};
use crate::classifier::{train_classifier, SentenceClassifier};
use crate::corpus::{self, make_meta_split, synthesize, DomainCorpus, MetaSplit, Provenance, Vocabulary};
use crate::curriculum::{manifest, parse_manifest, split_tasks, ScoredPair};
use crate::error::{Error, Result};
use crate::eval::{evaluate, robustness_matrix};
use crate::meta::{finetune, meta_train, FtStrategy, LogRecord, MetaTask};
use crate::model::{Example, MixTransformer};
use crate::params::Checkpoint;
use crate::train::pretrain;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Synth,
    Ingest,
    TrainClassifier,
    Score,
    Split,
    PretrainMix,
    MetaTrain,
    Finetune,
    Evaluate,
    Robustness,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 11] = [
        Stage::Synth,
        Stage::Ingest,
        Stage::TrainClassifier,
        Stage::Score,
        Stage::Split,
        Stage::PretrainMix,
        Stage::MetaTrain,
        Stage::Finetune,
        Stage::Evaluate,
        Stage::Robustness,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Ingest => "ingest",
            Stage::TrainClassifier => "train-classifier",
            Stage::Score => "score",
            Stage::Split => "split",
            Stage::PretrainMix => "pretrain-mix",
            Stage::MetaTrain => "meta-train",
            Stage::Finetune => "finetune",
            Stage::Evaluate => "evaluate",
            Stage::Robustness => "robustness",
            Stage::Report => "report",
        }
    }

    /// Paths (relative to the run directory) the stage owns. They are
    /// cleared before the stage runs and hashed into its stamp.
    fn outputs(self) -> &'static [&'static str] {
        match self {
            Stage::Synth | Stage::Ingest => &["config.toml", "data", "reports/data.json"],
            Stage::TrainClassifier => &["models/classifier.ckpt", "reports/classifier.json"],
            Stage::Score => &["scores.tsv"],
            Stage::Split => &["tasks", "reports/split.json"],
            Stage::PretrainMix => &["models/base", "reports/pretrain.json"],
            Stage::MetaTrain => &["models/meta", "logs/meta"],
            Stage::Finetune => &["models/ft", "reports/finetune.json"],
            Stage::Evaluate => &["reports/eval.jsonl"],
            Stage::Robustness => &["reports/robustness.json", "reports/robustness.txt"],
            Stage::Report => &["reports/report.md", "reports/report.jsonl"],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown stage `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Ran,
    /// Stamp, inputs and outputs all matched; nothing was done.
    UpToDate,
}

/// Record of one completed stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stamp {
    pub stage: String,
    pub config_hash: String,
    /// Upstream stage → SHA-256 of its stamp file.
    pub inputs: BTreeMap<String, String>,
    /// Output path → SHA-256 of its contents.
    pub outputs: BTreeMap<String, String>,
}

/// Derives an independent seed for one named use of the master seed.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

/// SHA-256 over a file, or over the sorted names and contents of a
/// directory tree. Missing paths hash to `"absent"`.
pub fn hash_path(path: &Path) -> Result<String> {
    fn feed(h: &mut Sha256, path: &Path) -> Result<()> {
        if path.is_dir() {
            let mut entries: Vec<PathBuf> = fs::read_dir(path)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
            entries.sort();
            for e in entries {
                h.update(b"entry:");
                h.update(e.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default().as_bytes());
                h.update([0]);
                feed(h, &e)?;
            }
        } else {
            let bytes = fs::read(path)?;
            h.update((bytes.len() as u64).to_le_bytes());
            h.update(&bytes);
        }
        Ok(())
    }
    if !path.exists() {
        return Ok("absent".into());
    }
    let mut h = Sha256::new();
    feed(&mut h, path)?;
    Ok(hex::encode(h.finalize()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_file(path, s)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, contents)?;
    Ok(())
}

fn jsonl<T: Serialize>(items: &[T]) -> Result<String> {
    let mut s = String::new();
    for it in items {
        s.push_str(&serde_json::to_string(it)?);
        s.push('\n');
    }
    Ok(s)
}

/// One experiment run: a validated config bound to its output directory
/// `{root}/seed-{seed}`.
pub struct Pipeline {
    cfg: ExperimentConfig,
    dir: PathBuf,
    hash: String,
}

impl Pipeline {
    /// `seed` overrides the config's seed. The output root is taken from
    /// the environment variable [`OUTPUT_ENV`] when set, else from the
    /// config.
    pub fn new(mut cfg: ExperimentConfig, seed: Option<u64>) -> Result<Self> {
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        let root = std::env::var_os(OUTPUT_ENV)
            .filter(|v| !v.is_empty())
            .map(PathBuf::from)
            .unwrap_or_else(|| cfg.output_dir.clone());
        Ok(Self::with_root(cfg, &root))
    }

    /// Like [`Pipeline::new`] but with an explicit output root and no
    /// environment lookup. `cfg` must already be validated.
    pub fn with_root(cfg: ExperimentConfig, root: &Path) -> Self {
        let dir = root.join(format!("seed-{}", cfg.seed));
        let hash = cfg.hash();
        Pipeline { cfg, dir, hash }
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    /// `synth` for synthetic corpora, `ingest` for file corpora.
    pub fn data_stage(&self) -> Stage {
        if self.cfg.corpus.synthetic.is_some() {
            Stage::Synth
        } else {
            Stage::Ingest
        }
    }

    /// Every stage in execution order, with the data stage matching the
    /// corpus kind.
    pub fn stages(&self) -> Vec<Stage> {
        let skip = if self.data_stage() == Stage::Synth { Stage::Ingest } else { Stage::Synth };
        Stage::ALL.into_iter().filter(|s| *s != skip).collect()
    }

    fn upstream(&self, stage: Stage) -> Vec<Stage> {
        let data = self.data_stage();
        match stage {
            Stage::Synth | Stage::Ingest => vec![],
            Stage::TrainClassifier | Stage::PretrainMix => vec![data],
            Stage::Score => vec![data, Stage::TrainClassifier],
            Stage::Split => vec![data, Stage::Score],
            Stage::MetaTrain => vec![data, Stage::Split, Stage::PretrainMix],
            Stage::Finetune => vec![data, Stage::PretrainMix, Stage::MetaTrain],
            Stage::Evaluate => vec![data, Stage::PretrainMix, Stage::MetaTrain, Stage::Finetune],
            Stage::Robustness => vec![data, Stage::PretrainMix, Stage::Finetune],
            Stage::Report => {
                let mut v = vec![Stage::Evaluate];
                if !self.cfg.eval.robustness.is_empty() {
                    v.push(Stage::Robustness);
                }
                v
            }
        }
    }

    fn stamp_path(&self, stage: Stage) -> PathBuf {
        self.dir.join("stamps").join(format!("{}.json", stage.name()))
    }

    pub fn stamp(&self, stage: Stage) -> Result<Option<Stamp>> {
        let p = self.stamp_path(stage);
        if !p.exists() {
            return Ok(None);
        }
        Ok(Some(serde_json::from_str(&fs::read_to_string(p)?)?))
    }

    fn outputs_match(&self, stamp: &Stamp) -> Result<Option<PathBuf>> {
        for (rel, digest) in &stamp.outputs {
            if hash_path(&self.path(rel))? != *digest {
                return Ok(Some(self.path(rel)));
            }
        }
        Ok(None)
    }

    /// Checks every upstream stamp and returns their digests.
    fn check_upstream(&self, stage: Stage) -> Result<BTreeMap<String, String>> {
        let mut inputs = BTreeMap::new();
        for up in self.upstream(stage) {
            let path = self.stamp_path(up);
            let stamp = self.stamp(up)?.ok_or_else(|| Error::MissingArtifact {
                path: path.clone(),
                stage: up.name(),
            })?;
            if stamp.config_hash != self.hash {
                return Err(Error::ConfigHashMismatch {
                    path,
                    found: stamp.config_hash,
                    expected: self.hash.clone(),
                });
            }
            if let Some(changed) = self.outputs_match(&stamp)? {
                return Err(Error::MissingArtifact {
                    path: changed,
                    stage: up.name(),
                });
            }
            inputs.insert(up.name().to_string(), hash_path(&path)?);
        }
        Ok(inputs)
    }

    /// Runs one stage unless its stamp shows the same config, the same
    /// upstream stamps and untouched outputs.
    pub fn run(&self, stage: Stage) -> Result<Outcome> {
        if matches!(stage, Stage::Synth | Stage::Ingest) && stage != self.data_stage() {
            let (path, msg) = match stage {
                Stage::Synth => ("corpus.synthetic", "`synth` needs a synthetic corpus; this config lists files, use `ingest`"),
                _ => ("corpus.files", "`ingest` needs corpus files; this config is synthetic, use `synth`"),
            };
            return Err(Error::Config {
                path: path.into(),
                message: msg.into(),
            });
        }
        let inputs = self.check_upstream(stage)?;
        if let Some(stamp) = self.stamp(stage)? {
            if stamp.config_hash == self.hash && stamp.inputs == inputs && self.outputs_match(&stamp)?.is_none() {
                info!("{stage}: up to date");
                return Ok(Outcome::UpToDate);
            }
        }
        let _ = fs::remove_file(self.stamp_path(stage));
        for rel in stage.outputs() {
            let p = self.path(rel);
            if p.is_dir() {
                fs::remove_dir_all(&p)?;
            } else if p.exists() {
                fs::remove_file(&p)?;
            }
        }
        fs::create_dir_all(&self.dir)?;
        info!("{stage}: running in {}", self.dir.display());
        match stage {
            Stage::Synth | Stage::Ingest => self.prepare_data()?,
            Stage::TrainClassifier => self.train_classifier()?,
            Stage::Score => self.score()?,
            Stage::Split => self.split()?,
            Stage::PretrainMix => self.pretrain()?,
            Stage::MetaTrain => self.meta_train()?,
            Stage::Finetune => self.finetune()?,
            Stage::Evaluate => self.evaluate()?,
            Stage::Robustness => self.robustness()?,
            Stage::Report => self.report()?,
        }
        let mut outputs = BTreeMap::new();
        for rel in stage.outputs() {
            outputs.insert(rel.to_string(), hash_path(&self.path(rel))?);
        }
        let stamp = Stamp {
            stage: stage.name().into(),
            config_hash: self.hash.clone(),
            inputs,
            outputs,
        };
        write_json(&self.stamp_path(stage), &stamp)?;
        Ok(Outcome::Ran)
    }

    /// Runs every stage in order.
    pub fn run_all(&self) -> Result<()> {
        for stage in self.stages() {
            self.run(stage)?;
        }
        Ok(())
    }

    // ----- shared loading -----

    pub fn vocab(&self) -> Result<Vocabulary> {
        Vocabulary::load(&self.path("data/vocab.txt"))
    }

    pub fn meta_split(&self) -> Result<MetaSplit> {
        MetaSplit::load(&self.path("data"), &self.cfg.domains())
    }

    /// Mixing label of a domain: its position among the seen domains, or
    /// the general domain's label for unseen ones (replaced by the router's
    /// choice when fine-tuning).
    fn label(&self, domain: &str) -> usize {
        self.cfg.seen_domains().iter().position(|d| d == domain).unwrap_or(0)
    }

    fn examples(&self, vocab: &Vocabulary, domain: &str, pairs: &[(String, String)]) -> Vec<Example> {
        let label = self.label(domain);
        pairs
            .iter()
            .map(|(s, t)| Example {
                src: vocab.encode(s),
                tgt: vocab.encode(t),
                domain: Some(label),
            })
            .collect()
    }

    /// Fine-tuning examples. Seen domains keep their label; sentences of
    /// an unseen domain take the seen domain the model's own router favours
    /// for them, so the mixing loss reinforces the existing routing instead
    /// of forcing a new one.
    fn finetune_examples(
        &self,
        model: &MixTransformer,
        vocab: &Vocabulary,
        domain: &str,
        pairs: &[(String, String)],
    ) -> Result<Vec<Example>> {
        let mut out = self.examples(vocab, domain, pairs);
        if self.cfg.seen_domains().iter().any(|d| d == domain) {
            return Ok(out);
        }
        for ex in &mut out {
            let a = model.domain_affinity(&ex.src, &ex.tgt)?;
            ex.domain = Some(crate::classifier::argmax(&a));
        }
        Ok(out)
    }

    fn test_pairs(&self, split: &MetaSplit) -> BTreeMap<String, Vec<(String, String)>> {
        split
            .meta_test
            .iter()
            .map(|(d, s)| {
                let n = self.cfg.eval.max_sentences.unwrap_or(usize::MAX).min(s.query.len());
                (d.clone(), s.query[..n].to_vec())
            })
            .collect()
    }

    fn save_checkpoint(&self, rel: &str, mut ck: Checkpoint) -> Result<()> {
        if let Some(m) = ck.meta.as_object_mut() {
            m.insert("config_hash".into(), self.hash.clone().into());
        }
        let p = self.path(rel);
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir)?;
        }
        ck.save(&p)
    }

    fn load_checkpoint(&self, rel: &str, stage: Stage) -> Result<Checkpoint> {
        let p = self.path(rel);
        if !p.exists() {
            return Err(Error::MissingArtifact { path: p, stage: stage.name() });
        }
        let ck = Checkpoint::load(&p)?;
        let found = ck.meta["config_hash"].as_str().unwrap_or_default();
        if found != self.hash {
            return Err(Error::ConfigHashMismatch {
                path: p,
                found: found.into(),
                expected: self.hash.clone(),
            });
        }
        Ok(ck)
    }

    fn save_model(&self, rel: &str, model: &MixTransformer, vocab: &Vocabulary) -> Result<()> {
        self.save_checkpoint(rel, model.to_checkpoint(&vocab.hash()))
    }

    fn load_model(&self, rel: &str, stage: Stage, vocab: &Vocabulary) -> Result<MixTransformer> {
        let (m, vocab_hash) = MixTransformer::from_checkpoint(self.load_checkpoint(rel, stage)?)?;
        if vocab_hash != vocab.hash() {
            return Err(Error::Checkpoint(format!("{rel} was trained with a different vocabulary")));
        }
        Ok(m)
    }

    fn base_path(base: BaseModel) -> &'static str {
        match base {
            BaseModel::Vanilla => "models/base/vanilla.ckpt",
            BaseModel::GeneralOnly => "models/base/general.ckpt",
            BaseModel::Mix => "models/base/mix.ckpt",
        }
    }

    /// The model a baseline reports without fine-tuning (and fine-tunes
    /// from).
    fn adapted_model(&self, kind: BaselineKind, vocab: &Vocabulary) -> Result<MixTransformer> {
        let preset = kind.preset();
        match preset.tasks {
            Some(_) => self.load_model(&format!("models/meta/{}.ckpt", kind.name()), Stage::MetaTrain, vocab),
            None => self.load_model(Self::base_path(preset.base), Stage::PretrainMix, vocab),
        }
    }

    /// Fine-tuned model used to translate `domain`.
    fn finetuned_model(&self, kind: BaselineKind, domain: &str, vocab: &Vocabulary) -> Result<MixTransformer> {
        let target = match self.cfg.finetune.strategy {
            FtStrategy::Specific => domain.to_string(),
            s => s.name().to_string(),
        };
        self.load_model(&format!("models/ft/{}/{target}.ckpt", kind.name()), Stage::Finetune, vocab)
    }

    // ----- stages -----

    fn prepare_data(&self) -> Result<()> {
        let domains = self.cfg.domains();
        let mut ingest_reports = BTreeMap::new();
        let corpora: Vec<DomainCorpus> = match &self.cfg.corpus.files {
            None => synthesize(&self.cfg.synth_spec())?,
            Some(files) => {
                let mut out = Vec::new();
                for d in &domains {
                    let (c, r) = corpus::ingest(&files[d], d)?;
                    info!("ingest {d}: read {} kept {}", r.read, r.kept);
                    ingest_reports.insert(d.clone(), r);
                    out.push(c);
                }
                out
            }
        };
        let seen = self.cfg.seen_domains();
        let split = make_meta_split(&corpora, &seen, &self.cfg.split, derive_seed(self.cfg.seed, "meta-split"))?;
        // the vocabulary never sees meta-test queries
        let visible: Vec<DomainCorpus> = domains
            .iter()
            .map(|d| DomainCorpus {
                domain: d.clone(),
                pairs: split.meta_train[d].all().chain(&split.meta_test[d].support).cloned().collect(),
                provenance: Provenance::Synthetic,
            })
            .collect();
        let vocab = Vocabulary::build(&visible, self.cfg.corpus.vocab_cap)?;
        split.save(&self.path("data"))?;
        vocab.save(&self.path("data/vocab.txt"))?;
        write_file(&self.path("config.toml"), self.cfg.to_toml())?;

        #[derive(Serialize)]
        struct DomainSummary<'a> {
            seen: bool,
            provenance: Provenance,
            corpus_pairs: usize,
            corpus_fingerprint: String,
            ingest: Option<&'a corpus::IngestReport>,
            meta_train_support: usize,
            meta_train_query: usize,
            meta_test_support: usize,
            meta_test_query: usize,
            dev: usize,
        }
        let summary: BTreeMap<&str, DomainSummary> = corpora
            .iter()
            .map(|c| {
                let d = c.domain.as_str();
                (
                    d,
                    DomainSummary {
                        seen: seen.iter().any(|s| s == d),
                        provenance: c.provenance,
                        corpus_pairs: c.len(),
                        corpus_fingerprint: c.fingerprint(),
                        ingest: ingest_reports.get(d),
                        meta_train_support: split.meta_train[d].support.len(),
                        meta_train_query: split.meta_train[d].query.len(),
                        meta_test_support: split.meta_test[d].support.len(),
                        meta_test_query: split.meta_test[d].query.len(),
                        dev: split.dev[d].len(),
                    },
                )
            })
            .collect();
        write_json(
            &self.path("reports/data.json"),
            &serde_json::json!({
                "config_hash": self.hash,
                "vocab_size": vocab.len(),
                "vocab_hash": vocab.hash(),
                "domains": summary,
            }),
        )
    }

    /// `(sentence, domain)` for every seen meta-train source sentence, in
    /// domain order.
    fn seen_sources(&self, split: &MetaSplit) -> Vec<(String, String)> {
        self.cfg
            .seen_domains()
            .iter()
            .flat_map(|d| split.meta_train[d].all().map(move |(s, _)| (s.clone(), d.clone())))
            .collect()
    }

    fn train_classifier(&self) -> Result<()> {
        let vocab = self.vocab()?;
        let split = self.meta_split()?;
        let corpus = self.seen_sources(&split);
        let (clf, report) = train_classifier(
            &corpus,
            &self.cfg.corpus.general,
            &vocab,
            &self.cfg.classifier,
            derive_seed(self.cfg.seed, "classifier"),
        )?;
        info!("classifier held-out accuracy {:.4}", report.heldout_accuracy);
        self.save_checkpoint("models/classifier.ckpt", clf.to_checkpoint(&vocab.hash()))?;
        write_json(
            &self.path("reports/classifier.json"),
            &serde_json::json!({ "config_hash": self.hash, "labels": clf.labels, "report": report }),
        )
    }

    fn score(&self) -> Result<()> {
        let vocab = self.vocab()?;
        let split = self.meta_split()?;
        let (clf, vocab_hash) =
            SentenceClassifier::from_checkpoint(self.load_checkpoint("models/classifier.ckpt", Stage::TrainClassifier)?)?;
        if vocab_hash != vocab.hash() {
            return Err(Error::Checkpoint("classifier was trained with a different vocabulary".into()));
        }
        let mut out = String::new();
        for d in self.cfg.seen_domains() {
            let pairs: Vec<&(String, String)> = split.meta_train[&d].all().collect();
            let ids: Vec<Vec<usize>> = pairs.iter().map(|(s, _)| vocab.encode(s)).collect();
            for ((s, t), score) in pairs.iter().zip(clf.score_all(&ids)?) {
                out.push_str(&format!("{score}\t{d}\t{s}\t{t}\n"));
            }
        }
        write_file(&self.path("scores.tsv"), out)
    }

    fn read_scores(&self, vocab: &Vocabulary) -> Result<Vec<ScoredPair>> {
        let p = self.path("scores.tsv");
        let seen = self.cfg.seen_domains();
        fs::read_to_string(&p)?
            .lines()
            .enumerate()
            .map(|(n, line)| {
                let f: Vec<&str> = line.split('\t').collect();
                let bad = || Error::Parse(format!("{}:{}: malformed score line", p.display(), n + 1));
                if f.len() != 4 {
                    return Err(bad());
                }
                Ok(ScoredPair {
                    src: vocab.encode(f[2]),
                    tgt: vocab.encode(f[3]),
                    domain: seen.iter().position(|d| d == f[1]).ok_or_else(bad)?,
                    score: Some(f[0].parse().map_err(|_| bad())?),
                })
            })
            .collect()
    }

    fn split(&self) -> Result<()> {
        let vocab = self.vocab()?;
        let seen = self.cfg.seen_domains();
        let scored = self.read_scores(&vocab)?;
        let curriculum = split_tasks(&scored, &self.cfg.curriculum)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, "random-tasks"));
        let shuffled: Vec<ScoredPair> = scored
            .iter()
            .map(|p| ScoredPair {
                score: Some(rng.gen()),
                ..p.clone()
            })
            .collect();
        let random = split_tasks(&shuffled, &self.cfg.curriculum)?;
        write_file(&self.path("tasks/curriculum.tsv"), manifest(&curriculum.tasks, &vocab, &seen))?;
        write_file(&self.path("tasks/random.tsv"), manifest(&random.tasks, &vocab, &seen))?;
        let summary = |o: &crate::curriculum::SplitOutcome| {
            serde_json::json!({
                "tasks": o.tasks.len(),
                "support_pairs": o.tasks.iter().map(|t| t.support.len()).sum::<usize>(),
                "query_pairs": o.tasks.iter().map(|t| t.query.len()).sum::<usize>(),
                "warnings": o.warnings,
            })
        };
        write_json(
            &self.path("reports/split.json"),
            &serde_json::json!({
                "config_hash": self.hash,
                "curriculum": summary(&curriculum),
                "random": summary(&random),
            }),
        )
    }

    fn needed_bases(&self) -> BTreeSet<BaseModel> {
        let mut bases: BTreeSet<BaseModel> = self.cfg.baselines.iter().map(|b| b.kind.preset().base).collect();
        if !self.cfg.eval.robustness.is_empty() {
            bases.insert(BaseModel::Vanilla);
        }
        bases
    }

    fn pretrain(&self) -> Result<()> {
        let vocab = self.vocab()?;
        let split = self.meta_split()?;
        let seen = self.cfg.seen_domains();
        let all: Vec<Example> = seen
            .iter()
            .flat_map(|d| {
                let pairs: Vec<(String, String)> = split.meta_train[d].all().cloned().collect();
                self.examples(&vocab, d, &pairs)
            })
            .collect();
        let general_pairs: Vec<(String, String)> = split.meta_train[&seen[0]].all().cloned().collect();
        let general = self.examples(&vocab, &seen[0], &general_pairs);
        let widen = self
            .cfg
            .baselines
            .iter()
            .any(|b| b.widen_embeddings && b.kind.preset().base == BaseModel::Vanilla);
        fs::create_dir_all(self.path("models/base"))?;
        let mut curves = BTreeMap::new();
        for base in self.needed_bases() {
            let (name, config, data) = match base {
                BaseModel::Mix => ("mix", self.cfg.model_config(true, vocab.len()), &all),
                BaseModel::Vanilla if widen => ("vanilla", self.cfg.widened_config(vocab.len()), &all),
                BaseModel::Vanilla => ("vanilla", self.cfg.model_config(false, vocab.len()), &all),
                BaseModel::GeneralOnly => ("general", self.cfg.model_config(false, vocab.len()), &general),
            };
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, &format!("init-{name}")));
            let mut model = MixTransformer::new(config, &mut rng)?;
            info!("pretrain {name}: {} parameters, {} sentences", model.params().count(), data.len());
            let curve = pretrain(&mut model, data, &self.cfg.pretrain, derive_seed(self.cfg.seed, &format!("pretrain-{name}")))?;
            self.save_model(Self::base_path(base), &model, &vocab)?;
            curves.insert(
                name,
                serde_json::json!({ "parameters": model.params().count(), "sentences": data.len(), "loss_curve": curve }),
            );
        }
        write_json(
            &self.path("reports/pretrain.json"),
            &serde_json::json!({ "config_hash": self.hash, "models": curves }),
        )
    }

    fn meta_train(&self) -> Result<()> {
        let vocab = self.vocab()?;
        let seen = self.cfg.seen_domains();
        fs::create_dir_all(self.path("models/meta"))?;
        fs::create_dir_all(self.path("logs/meta"))?;
        for spec in &self.cfg.baselines {
            let kind = spec.kind;
            let preset = kind.preset();
            let Some(tasks) = preset.tasks else { continue };
            let file = match tasks {
                Tasks::Curriculum => "tasks/curriculum.tsv",
                Tasks::Random => "tasks/random.tsv",
            };
            let tasks: Vec<MetaTask<Example>> =
                parse_manifest(&fs::read_to_string(self.path(file))?, &vocab, &seen)?
                    .iter()
                    .map(MetaTask::from)
                    .collect();
            let mut model = self.load_model(Self::base_path(preset.base), Stage::PretrainMix, &vocab)?;
            let mut log: Vec<LogRecord> = Vec::new();
            info!("meta-train {}: {} tasks", kind.name(), tasks.len());
            let result = meta_train(&mut model, &tasks, &self.cfg.meta, &mut log);
            write_file(&self.path(&format!("logs/meta/{}.jsonl", kind.name())), jsonl(&log)?)?;
            result?;
            self.save_model(&format!("models/meta/{}.ckpt", kind.name()), &model, &vocab)?;
        }
        Ok(())
    }

    fn finetune(&self) -> Result<()> {
        let vocab = self.vocab()?;
        let split = self.meta_split()?;
        let seen = self.cfg.seen_domains();
        fs::create_dir_all(self.path("models/ft"))?;
        let mut records = Vec::new();
        for spec in &self.cfg.baselines {
            let kind = spec.kind;
            if !kind.preset().finetuned {
                continue;
            }
            let model = self.adapted_model(kind, &vocab)?;
            let supports = split
                .meta_test
                .iter()
                .map(|(d, s)| Ok((d.clone(), self.finetune_examples(&model, &vocab, d, &s.support)?)))
                .collect::<Result<BTreeMap<_, _>>>()?;
            let runs = finetune(
                &model,
                &supports,
                &seen,
                &self.cfg.finetune,
                derive_seed(self.cfg.seed, &format!("finetune-{}", kind.name())),
            )?;
            for run in runs {
                info!("finetune {} on {}: {} sentences", kind.name(), run.target, run.records);
                self.save_model(&format!("models/ft/{}/{}.ckpt", kind.name(), run.target), &run.model, &vocab)?;
                records.push(serde_json::json!({
                    "baseline": kind.name(),
                    "target": run.target,
                    "sentences": run.records,
                }));
            }
        }
        write_json(
            &self.path("reports/finetune.json"),
            &serde_json::json!({ "config_hash": self.hash, "strategy": self.cfg.finetune.strategy.name(), "runs": records }),
        )
    }

    fn evaluate(&self) -> Result<()> {
        let vocab = self.vocab()?;
        let split = self.meta_split()?;
        let tests = self.test_pairs(&split);
        let seen = self.cfg.seen_domains();
        let mut records = Vec::new();
        for spec in &self.cfg.baselines {
            let kind = spec.kind;
            let preset = kind.preset();
            let mut rows: Vec<bool> = Vec::new();
            if preset.no_ft_row {
                rows.push(false);
            }
            if preset.finetuned {
                rows.push(true);
            }
            for finetuned in rows {
                let plain = if finetuned { None } else { Some(self.adapted_model(kind, &vocab)?) };
                for d in self.cfg.domains() {
                    let model = match &plain {
                        Some(m) => m.clone(),
                        None => self.finetuned_model(kind, &d, &vocab)?,
                    };
                    let m = evaluate(&model, &vocab, &d, &tests[&d], &self.cfg.eval.beam)?;
                    info!(
                        "evaluate {}{} on {d}: BLEU {:.2} chrF {:.2}",
                        kind.name(),
                        if finetuned { " +FT" } else { "" },
                        m.bleu,
                        m.chrf
                    );
                    records.push(EvalRecord {
                        config_hash: self.hash.clone(),
                        baseline: kind,
                        finetuned,
                        strategy: finetuned.then(|| self.cfg.finetune.strategy.name().to_string()),
                        seen: seen.contains(&d),
                        domain: d.clone(),
                        bleu: m.bleu,
                        chrf: m.chrf,
                        n_sentences: m.n_sentences,
                    });
                }
            }
        }
        write_file(&self.path("reports/eval.jsonl"), jsonl(&records)?)
    }

    fn robustness(&self) -> Result<()> {
        let vocab = self.vocab()?;
        let split = self.meta_split()?;
        let tests = self.test_pairs(&split);
        let mut records = Vec::new();
        let mut text = String::new();
        if !self.cfg.eval.robustness.is_empty() {
            let baseline = self.load_model(Self::base_path(BaseModel::Vanilla), Stage::PretrainMix, &vocab)?;
            for &kind in &self.cfg.eval.robustness {
                let finetuned = self
                    .cfg
                    .domains()
                    .into_iter()
                    .map(|d| Ok((d.clone(), self.finetuned_model(kind, &d, &vocab)?)))
                    .collect::<Result<BTreeMap<_, _>>>()?;
                let matrix = robustness_matrix(&finetuned, &tests, &baseline, &vocab, &self.cfg.eval.beam)?;
                info!("robustness {}: avg_diff {:.4}", kind.name(), matrix.avg_diff);
                text.push_str(&format!("## {} (BLEU; baseline = vanilla)\n", kind.name()));
                text.push_str(&matrix.pretty());
                text.push('\n');
                records.push(RobustnessRecord {
                    config_hash: self.hash.clone(),
                    baseline: kind,
                    matrix,
                });
            }
        }
        write_json(&self.path("reports/robustness.json"), &records)?;
        write_file(&self.path("reports/robustness.txt"), text)
    }

    fn report(&self) -> Result<()> {
        let evals: Vec<EvalRecord> = report::read_jsonl(&self.path("reports/eval.jsonl"))?;
        let robustness: Vec<RobustnessRecord> = if self.cfg.eval.robustness.is_empty() {
            Vec::new()
        } else {
            serde_json::from_str(&fs::read_to_string(self.path("reports/robustness.json"))?)?
        };
        for (path, found) in evals
            .iter()
            .map(|r| ("reports/eval.jsonl", &r.config_hash))
            .chain(robustness.iter().map(|r| ("reports/robustness.json", &r.config_hash)))
        {
            if *found != self.hash {
                return Err(Error::ConfigHashMismatch {
                    path: self.path(path),
                    found: found.clone(),
                    expected: self.hash.clone(),
                });
            }
        }
        let rep = report::build(&self.cfg, &self.hash, &evals, &robustness);
        write_file(&self.path("reports/report.md"), rep.markdown())?;
        write_file(&self.path("reports/report.jsonl"), rep.jsonl()?)
    }
}

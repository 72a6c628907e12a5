//! Result tables: one row per baseline (with and without fine-tuning),
//! columns grouped unseen | seen.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::config::{BaselineKind, ExperimentConfig};
use crate::error::{Error, Result};
use crate::eval::RobustnessMatrix;

/// One `(baseline, fine-tuned?, domain)` evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub config_hash: String,
    pub baseline: BaselineKind,
    pub finetuned: bool,
    pub strategy: Option<String>,
    pub seen: bool,
    pub domain: String,
    pub bleu: f64,
    pub chrf: f64,
    pub n_sentences: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRecord {
    pub config_hash: String,
    pub baseline: BaselineKind,
    pub matrix: RobustnessMatrix,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Bleu,
    Chrf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub baseline: BaselineKind,
    pub finetuned: bool,
    pub metric: Metric,
    pub unseen: BTreeMap<String, f64>,
    pub seen: BTreeMap<String, f64>,
    pub unseen_mean: Option<f64>,
    pub seen_mean: f64,
}

impl ReportRow {
    pub fn label(&self, strategy: &str) -> String {
        if self.finetuned {
            format!("{} + {strategy}", self.baseline.name())
        } else {
            self.baseline.name().to_string()
        }
    }
}

/// One line of `report.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum ReportLine {
    Header {
        config_hash: String,
        seed: u64,
        strategy: String,
        unseen: Vec<String>,
        seen: Vec<String>,
    },
    Row(ReportRow),
    Robustness { baseline: BaselineKind, avg_diff: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub config_hash: String,
    pub seed: u64,
    pub strategy: String,
    pub unseen: Vec<String>,
    pub seen: Vec<String>,
    pub rows: Vec<ReportRow>,
    pub robustness: Vec<RobustnessRecord>,
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Assembles rows in baseline order from evaluation records.
pub fn build(cfg: &ExperimentConfig, hash: &str, evals: &[EvalRecord], robustness: &[RobustnessRecord]) -> Report {
    let mut rows = Vec::new();
    for spec in &cfg.baselines {
        for finetuned in [false, true] {
            let recs: Vec<&EvalRecord> = evals
                .iter()
                .filter(|r| r.baseline == spec.kind && r.finetuned == finetuned)
                .collect();
            if recs.is_empty() {
                continue;
            }
            for metric in [Metric::Bleu, Metric::Chrf] {
                let value = |r: &EvalRecord| match metric {
                    Metric::Bleu => r.bleu,
                    Metric::Chrf => r.chrf,
                };
                let group = |seen: bool| -> BTreeMap<String, f64> {
                    recs.iter().filter(|r| r.seen == seen).map(|r| (r.domain.clone(), value(r))).collect()
                };
                let (unseen, seen) = (group(false), group(true));
                rows.push(ReportRow {
                    baseline: spec.kind,
                    finetuned,
                    metric,
                    unseen_mean: mean(unseen.values().copied()),
                    seen_mean: mean(seen.values().copied()).unwrap_or(f64::NAN),
                    unseen,
                    seen,
                });
            }
        }
    }
    Report {
        config_hash: hash.to_string(),
        seed: cfg.seed,
        strategy: cfg.finetune.strategy.name().to_string(),
        unseen: cfg.corpus.unseen.clone(),
        seen: cfg.seen_domains(),
        rows,
        robustness: robustness.to_vec(),
    }
}

impl Report {
    pub fn row(&self, baseline: BaselineKind, finetuned: bool, metric: Metric) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.baseline == baseline && r.finetuned == finetuned && r.metric == metric)
    }

    pub fn avg_diff(&self, baseline: BaselineKind) -> Option<f64> {
        self.robustness.iter().find(|r| r.baseline == baseline).map(|r| r.matrix.avg_diff)
    }

    pub fn markdown(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# Results (seed {}, config {})\n", self.seed, &self.config_hash[..12.min(self.config_hash.len())]);
        let _ = writeln!(s, "Fine-tuning strategy: {}. Columns are grouped unseen | seen.\n", self.strategy);
        for (metric, title) in [(Metric::Bleu, "BLEU"), (Metric::Chrf, "chrF")] {
            let _ = writeln!(s, "## {title}\n");
            let mut header = String::from("| model |");
            let mut rule = String::from("|---|");
            for d in &self.unseen {
                let _ = write!(header, " unseen: {d} |");
                rule.push_str("---:|");
            }
            if !self.unseen.is_empty() {
                header.push_str(" unseen avg |");
                rule.push_str("---:|");
            }
            for d in &self.seen {
                let _ = write!(header, " seen: {d} |");
                rule.push_str("---:|");
            }
            header.push_str(" seen avg |");
            rule.push_str("---:|");
            let _ = writeln!(s, "{header}\n{rule}");
            for r in self.rows.iter().filter(|r| r.metric == metric) {
                let mut line = format!("| {} |", r.label(&self.strategy));
                let cell = |v: Option<&f64>| v.map_or_else(|| " – |".to_string(), |v| format!(" {v:.2} |"));
                for d in &self.unseen {
                    line.push_str(&cell(r.unseen.get(d)));
                }
                if !self.unseen.is_empty() {
                    line.push_str(&cell(r.unseen_mean.as_ref()));
                }
                for d in &self.seen {
                    line.push_str(&cell(r.seen.get(d)));
                }
                line.push_str(&cell(Some(&r.seen_mean)));
                let _ = writeln!(s, "{line}");
            }
            s.push('\n');
        }
        if !self.robustness.is_empty() {
            let _ = writeln!(s, "## Robustness (BLEU, fine-tuned on row domain, tested on column domain)\n");
            for r in &self.robustness {
                let _ = writeln!(s, "### {}\n\n```\n{}```\n", r.baseline.name(), r.matrix.pretty());
            }
        }
        s
    }

    pub fn lines(&self) -> Vec<ReportLine> {
        let mut out = vec![ReportLine::Header {
            config_hash: self.config_hash.clone(),
            seed: self.seed,
            strategy: self.strategy.clone(),
            unseen: self.unseen.clone(),
            seen: self.seen.clone(),
        }];
        out.extend(self.rows.iter().cloned().map(ReportLine::Row));
        out.extend(self.robustness.iter().map(|r| ReportLine::Robustness {
            baseline: r.baseline,
            avg_diff: r.matrix.avg_diff,
        }));
        out
    }

    pub fn jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for l in self.lines() {
            s.push_str(&serde_json::to_string(&l)?);
            s.push('\n');
        }
        Ok(s)
    }

    /// Reads `report.jsonl`. Robustness matrices are not part of it, so
    /// only their `avg_diff` survives.
    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = text.lines().map(serde_json::from_str::<ReportLine>);
        let Some(ReportLine::Header { config_hash, seed, strategy, unseen, seen }) = lines.next().transpose()? else {
            return Err(Error::Parse("report must start with a header line".into()));
        };
        let mut report = Report { config_hash, seed, strategy, unseen, seen, rows: vec![], robustness: vec![] };
        for l in lines {
            match l? {
                ReportLine::Row(r) => report.rows.push(r),
                ReportLine::Robustness { baseline, avg_diff } => report.robustness.push(RobustnessRecord {
                    config_hash: report.config_hash.clone(),
                    baseline,
                    matrix: RobustnessMatrix {
                        domains: vec![],
                        cells: vec![],
                        baseline: vec![],
                        avg_diff,
                    },
                }),
                ReportLine::Header { .. } => return Err(Error::Parse("duplicate report header".into())),
            }
        }
        Ok(report)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_jsonl(&fs::read_to_string(path)?)
    }
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    fs::read_to_string(path)?
        .lines()
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

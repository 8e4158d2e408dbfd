//! File-level metrics. The config's `task` key picks the job:
//! `pairs` (EMR/CER/mean SCS over truth-decoded pairs), `scores`
//! (TPR/FPR at a threshold), `onion` (perplexity-drop outlier filter
//! with calibrated threshold), `separability` (cluster statistics over
//! a labeled vector file).

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use stegolab_core::embedding::{LabeledVectorSet, VectorKind};
use stegolab_core::metrics::{
    calibrate_threshold, cer, emr, onion_score, read_pairs_jsonl, read_scores_jsonl, scs,
    separability, tpr_fpr, BowEmbedder, CharBigramModel, EmbeddingProvider, TrigramEmbedder,
};
use stegolab_core::numerics::LatentVector;

use crate::config::{self, Overrides};

#[derive(Serialize, Deserialize)]
pub struct MetricsConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(flatten)]
    pub task: Task,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum Task {
    Pairs {
        input: PathBuf,
        #[serde(default = "default_embedder")]
        embedder: String,
    },
    Scores {
        positives: PathBuf,
        negatives: PathBuf,
        threshold: f64,
    },
    Onion {
        /// Corpus the character bigram model trains on.
        reference: PathBuf,
        /// Clean sentences used to calibrate the threshold.
        clean: PathBuf,
        /// Sentences to score and flag.
        suspect: PathBuf,
        #[serde(default = "default_target_fpr")]
        target_fpr: f64,
        #[serde(default = "default_alpha")]
        alpha: f64,
    },
    Separability {
        vectors: PathBuf,
        group_a: String,
        group_b: String,
        #[serde(default = "default_vector_kind")]
        kind: VectorKind,
    },
}

fn default_embedder() -> String {
    "bow".into()
}

fn default_target_fpr() -> f64 {
    0.05
}

fn default_alpha() -> f64 {
    1.0
}

fn default_vector_kind() -> VectorKind {
    VectorKind::Stego
}

#[derive(Serialize)]
struct OnionLine {
    line: usize,
    score: f64,
    flagged: bool,
    top_token: String,
}

fn lines_of(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    Ok(text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(str::to_string)
        .collect())
}

fn report_for(task: &Task) -> Result<serde_json::Value> {
    match task {
        Task::Pairs { input, embedder } => {
            let pairs = read_pairs_jsonl(BufReader::new(File::open(input)?))?;
            let provider: Box<dyn EmbeddingProvider> = match embedder.as_str() {
                "bow" => Box::new(BowEmbedder::default()),
                "trigram" => Box::new(TrigramEmbedder::default()),
                other => bail!("unknown embedder {other:?} (expected bow or trigram)"),
            };
            let mut total_scs = 0.0;
            for (truth, decoded) in &pairs {
                total_scs += scs(provider.as_ref(), truth, decoded)?;
            }
            Ok(serde_json::json!({
                "pairs": pairs.len(),
                "emr": emr(&pairs)?,
                "cer": cer(&pairs)?,
                "mean_scs": total_scs / pairs.len().max(1) as f64,
                "embedder": provider.name(),
            }))
        }
        Task::Scores { positives, negatives, threshold } => {
            let pos = read_scores_jsonl(BufReader::new(File::open(positives)?))?;
            let neg = read_scores_jsonl(BufReader::new(File::open(negatives)?))?;
            let (tpr, fpr) = tpr_fpr(&pos, &neg, *threshold)?;
            Ok(serde_json::json!({
                "threshold": threshold,
                "tpr": tpr,
                "fpr": fpr,
                "positives": pos.len(),
                "negatives": neg.len(),
            }))
        }
        Task::Onion { reference, clean, suspect, target_fpr, alpha } => {
            let model = CharBigramModel::train(&std::fs::read_to_string(reference)?, *alpha)?;
            let perplexity = |s: &str| -> Result<f64, Box<dyn std::error::Error + Send + Sync>> {
                Ok(model.perplexity(s))
            };
            let score = |line: &str| -> Result<(f64, String)> {
                let ranked = onion_score(line, &perplexity)?;
                let top = &ranked[0];
                Ok((top.drop, top.token.clone()))
            };
            let mut clean_scores = Vec::new();
            for line in &lines_of(clean)? {
                clean_scores.push(score(line)?.0);
            }
            let threshold = calibrate_threshold(&clean_scores, *target_fpr)?;
            let mut detail = Vec::new();
            let mut flagged = 0usize;
            for (index, line) in lines_of(suspect)?.iter().enumerate() {
                let (drop, top_token) = score(line)?;
                let hit = drop > threshold;
                flagged += usize::from(hit);
                detail.push(OnionLine { line: index + 1, score: drop, flagged: hit, top_token });
            }
            Ok(serde_json::json!({
                "alpha": alpha,
                "target_fpr": target_fpr,
                "threshold": threshold,
                "clean_lines": clean_scores.len(),
                "suspect_lines": detail.len(),
                "flagged": flagged,
                "detail": detail,
            }))
        }
        Task::Separability { vectors, group_a, group_b, kind } => {
            let set = LabeledVectorSet::load(vectors)?;
            let pick = |group: &str| -> Vec<LatentVector> {
                set.items()
                    .iter()
                    .filter(|i| i.group == group && i.kind == *kind)
                    .map(|i| i.vector.clone())
                    .collect()
            };
            let (a, b) = (pick(group_a), pick(group_b));
            let report = separability(&a, &b)?;
            Ok(serde_json::json!({
                "group_a": group_a,
                "group_b": group_b,
                "count_a": a.len(),
                "count_b": b.len(),
                "silhouette": report.silhouette,
                "between_within": report.between_within,
                "fisher": report.fisher,
            }))
        }
    }
}

pub fn run(config_path: Option<&Path>, overrides: &Overrides) -> Result<u8> {
    let mut cfg: MetricsConfig = config::resolve(config_path, overrides)?;
    let out = config::out_dir(cfg.out.as_deref(), "metrics")?;
    cfg.out = Some(out.clone());

    let report = report_for(&cfg.task)?;
    let report_path = out.join("report.json");
    std::fs::write(&report_path, serde_json::to_string_pretty(&report)?)?;
    config::write_manifest(&out, "metrics", cfg.seed, &cfg, &[report_path])?;
    println!("{report}");
    Ok(0)
}

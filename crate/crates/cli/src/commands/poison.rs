//! Poisoned-dataset pipeline: sample anchors, run the two generation
//! phases against the oracle, format chat records with weighted-loss
//! spans, mix with clean data, and optionally paraphrase stegotexts.
//! The http oracle reads its credential from the environment
//! (STEGOLAB_ORACLE_API_KEY); there is no credential flag.

use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use serde::{Deserialize, Serialize};

use stegolab_core::numerics::RandomStream;
use stegolab_core::poison::{
    build_dataset, default_reasoning_icl, default_semantic_icl, generate_triplets,
    manifest_path, paraphrase_pass, phase3_format, sample_anchors, HttpOracle, MockOracle,
    OraclePort, PoisonRecord, Scenario, DEFAULT_LAMBDA_REASON,
};

use crate::config::{self, Overrides};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoisonConfig {
    /// Plaintext messages, cycled across sampled anchors.
    pub messages: Vec<String>,
    /// Shared-knowledge file: one anchor per line (plain or JSON).
    pub knowledge: Option<PathBuf>,
    /// Clean chat JSONL pool for mixing.
    pub clean: Option<PathBuf>,
    /// Number of (message, anchor) pairs to generate.
    pub count: usize,
    pub rate: f64,
    pub scenario: Scenario,
    pub lambda_reason: f64,
    /// Re-run stegotexts through the paraphrase prompt after mixing.
    pub paraphrase: bool,
    /// Make the mock oracle visibly rewrite paraphrases.
    pub mock_rewriting: bool,
    pub seed: u64,
    pub workers: Option<usize>,
    pub oracle: String,
    pub oracle_url: Option<String>,
    pub oracle_model: Option<String>,
    pub out: Option<PathBuf>,
}

impl Default for PoisonConfig {
    fn default() -> Self {
        Self {
            messages: Vec::new(),
            knowledge: None,
            clean: None,
            count: 8,
            rate: 0.1,
            scenario: Scenario::Ucc,
            lambda_reason: DEFAULT_LAMBDA_REASON,
            paraphrase: false,
            mock_rewriting: false,
            seed: 0,
            workers: None,
            oracle: "mock".into(),
            oracle_url: None,
            oracle_model: None,
            out: None,
        }
    }
}

fn make_oracle(cfg: &PoisonConfig) -> Result<Box<dyn OraclePort + Sync>> {
    match cfg.oracle.as_str() {
        "mock" => Ok(if cfg.mock_rewriting {
            Box::new(MockOracle::rewriting())
        } else {
            Box::new(MockOracle::new())
        }),
        "http" => {
            let (Some(url), Some(model)) = (&cfg.oracle_url, &cfg.oracle_model) else {
                bail!("http oracle needs oracle_url and oracle_model");
            };
            Ok(Box::new(HttpOracle::new(url, model)?))
        }
        other => bail!("unknown oracle {other:?} (expected mock or http)"),
    }
}

pub fn run(config_path: Option<&Path>, overrides: &Overrides) -> Result<u8> {
    let mut cfg: PoisonConfig = config::resolve(config_path, overrides)?;
    if cfg.messages.is_empty() {
        bail!("config needs at least one plaintext message");
    }
    let Some(knowledge) = cfg.knowledge.clone() else {
        bail!("config needs a knowledge file (one anchor per line)");
    };
    let Some(clean) = cfg.clean.clone() else {
        bail!("config needs a clean dataset for mixing");
    };
    let out = config::out_dir(cfg.out.as_deref(), "poison")?;
    cfg.out = Some(out.clone());
    let workers = cfg.workers.unwrap_or_else(super::verify::default_workers);
    let oracle = make_oracle(&cfg)?;

    let stream = RandomStream::new(cfg.seed);
    let anchors = sample_anchors(&knowledge, cfg.count, &stream.substream(0))?;
    let pairs: Vec<(String, String)> = anchors
        .into_iter()
        .enumerate()
        .map(|(i, anchor)| (cfg.messages[i % cfg.messages.len()].clone(), anchor))
        .collect();
    let triplets = generate_triplets(
        oracle.as_ref(),
        &pairs,
        default_semantic_icl(),
        default_reasoning_icl(),
        &stream.substream(1),
        workers,
    )?;
    let mut records: Vec<PoisonRecord> = Vec::new();
    for triplet in &triplets {
        let (enc, dec) = phase3_format(triplet, cfg.scenario, cfg.lambda_reason)?;
        records.extend(enc);
        records.push(dec);
    }

    let dataset = out.join("dataset.jsonl");
    let dataset_manifest =
        build_dataset(&clean, &records, cfg.rate, &stream.substream(2), oracle.name(), &dataset)?;
    let mut outputs = vec![dataset.clone(), manifest_path(&dataset)];

    if cfg.paraphrase {
        let paraphrased = out.join("dataset_paraphrased.jsonl");
        paraphrase_pass(oracle.as_ref(), &dataset, &paraphrased, &stream.substream(3), workers)?;
        outputs.push(paraphrased);
    }

    config::write_manifest(&out, "poison", cfg.seed, &cfg, &outputs)?;
    println!(
        "poison: {} poisoned + {} clean records at rate {:.4}, sha256 {}",
        dataset_manifest.poison_count,
        dataset_manifest.clean_count,
        dataset_manifest.poison_rate,
        dataset_manifest.sha256
    );
    Ok(0)
}

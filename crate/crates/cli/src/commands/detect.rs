//! Stego-vs-cover distinguishing game against the matched filter at a
//! single parameter point; writes the resulting DetectionReport.

use std::path::{Path, PathBuf};

use anyhow::Result;
use serde::{Deserialize, Serialize};

use stegolab_core::channel::{make_orthogonal_codebook, ChannelConfig};
use stegolab_core::detection::{run_ind_game_with_workers, template_detector};
use stegolab_core::numerics::RandomStream;

use crate::config::{self, Overrides};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectConfig {
    pub d: usize,
    pub sigma: f64,
    pub norm: f64,
    pub anchor_norm: f64,
    pub trials: u64,
    pub seed: u64,
    pub workers: Option<usize>,
    pub out: Option<PathBuf>,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            d: 16,
            sigma: 1.0,
            norm: 1.0,
            anchor_norm: 10.0,
            trials: 100_000,
            seed: 0,
            workers: None,
            out: None,
        }
    }
}

pub fn run(config_path: Option<&Path>, overrides: &Overrides) -> Result<u8> {
    let mut cfg: DetectConfig = config::resolve(config_path, overrides)?;
    let out = config::out_dir(cfg.out.as_deref(), "detect")?;
    cfg.out = Some(out.clone());
    let workers = cfg.workers.unwrap_or_else(super::verify::default_workers);

    let stream = RandomStream::new(cfg.seed);
    let setup = stream.substream(0);
    let anchor = super::random_anchor(&setup.substream(0), cfg.d, cfg.anchor_norm)?;
    let book = make_orthogonal_codebook(cfg.d, 2, cfg.norm, &setup.substream(1))?;
    let chan = ChannelConfig::new(anchor, cfg.sigma)?;
    let template = book.get("m0").expect("orthogonal book has m0");
    let detector = template_detector(&chan, template)?;
    let report = run_ind_game_with_workers(
        &chan,
        &book,
        "m0",
        &*detector,
        cfg.trials,
        &stream.substream(1),
        workers,
    )?;

    let report_path = out.join("report.json");
    std::fs::write(&report_path, serde_json::to_string_pretty(&report)?)?;
    config::write_manifest(&out, "detect", cfg.seed, &cfg, &[report_path])?;
    println!(
        "detect: advantage empirical {:.6}, theory {:.6}, tv {:.6}, stderr {:.6}",
        report.empirical_advantage, report.theoretical_advantage, report.tv, report.stderr
    );
    Ok(0)
}

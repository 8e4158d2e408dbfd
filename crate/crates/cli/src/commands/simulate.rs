//! Encode/decode round trips at fixed channel parameters. Outputs:
//! channel.json (anchor, sigma, codebook), trials.csv (one row per
//! round trip), summary.json (empirical error vs the union bound).

use std::fs::File;
use std::path::{Path, PathBuf};

use anyhow::Result;
use serde::{Deserialize, Serialize};

use stegolab_core::channel::{
    decode, decoding_error_bound, encode, kl_stealth, make_orthogonal_codebook, min_distance,
    write_channel, ChannelConfig,
};
use stegolab_core::numerics::RandomStream;

use crate::config::{self, Overrides};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateConfig {
    pub d: usize,
    pub m: usize,
    pub sigma: f64,
    pub norm: f64,
    pub anchor_norm: f64,
    pub trials: u64,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            d: 16,
            m: 4,
            sigma: 1.0,
            norm: 2.0,
            anchor_norm: 10.0,
            trials: 10_000,
            seed: 0,
            out: None,
        }
    }
}

#[derive(Serialize)]
struct Summary {
    trials: u64,
    errors: u64,
    empirical_error: f64,
    error_bound: f64,
    d_min: f64,
    max_kl: f64,
}

pub fn run(config_path: Option<&Path>, overrides: &Overrides) -> Result<u8> {
    let mut cfg: SimulateConfig = config::resolve(config_path, overrides)?;
    let out = config::out_dir(cfg.out.as_deref(), "simulate")?;
    cfg.out = Some(out.clone());

    let stream = RandomStream::new(cfg.seed);
    let setup = stream.substream(0);
    let anchor = super::random_anchor(&setup.substream(0), cfg.d, cfg.anchor_norm)?;
    let book = make_orthogonal_codebook(cfg.d, cfg.m, cfg.norm, &setup.substream(1))?;
    let chan = ChannelConfig::new(anchor, cfg.sigma)?;

    let channel_path = out.join("channel.json");
    write_channel(File::create(&channel_path)?, &chan, &book)?;

    let ids: Vec<String> =
        book.entries().iter().map(|e| e.message_id.clone()).collect();
    let trials_path = out.join("trials.csv");
    let mut writer = csv::Writer::from_path(&trials_path)?;
    writer.write_record(["trial", "sent", "decoded", "correct"])?;
    let trial_stream = stream.substream(1);
    let mut errors = 0u64;
    for i in 0..cfg.trials {
        let sent = &ids[(i % ids.len() as u64) as usize];
        let stego = encode(&chan, &book, sent, &trial_stream.substream(i))?;
        let (decoded, _) = decode(&chan, &book, &stego)?;
        let correct = decoded == *sent;
        errors += u64::from(!correct);
        writer.write_record([
            i.to_string(),
            sent.clone(),
            decoded,
            u8::from(correct).to_string(),
        ])?;
    }
    writer.flush()?;

    let max_kl = book
        .entries()
        .iter()
        .map(|e| kl_stealth(&chan, &e.perturbation).map(|(kl, _)| kl))
        .try_fold(0.0f64, |acc, kl| kl.map(|kl| acc.max(kl)))?;
    let summary = Summary {
        trials: cfg.trials,
        errors,
        empirical_error: errors as f64 / cfg.trials.max(1) as f64,
        error_bound: decoding_error_bound(&book, cfg.sigma)?,
        d_min: min_distance(&book)?,
        max_kl,
    };
    let summary_path = out.join("summary.json");
    std::fs::write(&summary_path, serde_json::to_string_pretty(&summary)?)?;

    config::write_manifest(
        &out,
        "simulate",
        cfg.seed,
        &cfg,
        &[channel_path, trials_path, summary_path],
    )?;
    println!(
        "simulate: {} trials, empirical error {:.6}, bound {:.6}, d_min {:.4}",
        summary.trials, summary.empirical_error, summary.error_bound, summary.d_min
    );
    Ok(0)
}

//! Generates a codebook (orthogonal or ball-constrained) or inspects
//! an existing channel file; reports the closed-form bounds either way.

use std::fs::File;
use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use serde::{Deserialize, Serialize};

use stegolab_core::channel::{
    decoding_error_bound, kl_stealth, make_ball_codebook, make_orthogonal_codebook,
    min_distance, read_channel, stealth_tradeoff, write_channel, ChannelConfig, Codebook,
    TradeoffBound,
};
use stegolab_core::numerics::RandomStream;

use crate::config::{self, Overrides};

#[derive(Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodebookKind {
    Orthogonal,
    Ball,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodebookConfig {
    /// Existing channel.json to inspect; omit to generate.
    pub input: Option<PathBuf>,
    pub kind: CodebookKind,
    pub d: usize,
    pub m: usize,
    pub norm: f64,
    /// Ball radius; defaults to `norm` when generating a ball book.
    pub radius: Option<f64>,
    pub sigma: f64,
    pub anchor_norm: f64,
    /// Stealth budget for the tradeoff report.
    pub eta: f64,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

impl Default for CodebookConfig {
    fn default() -> Self {
        Self {
            input: None,
            kind: CodebookKind::Orthogonal,
            d: 16,
            m: 4,
            norm: 2.0,
            radius: None,
            sigma: 1.0,
            anchor_norm: 10.0,
            eta: 0.02,
            seed: 0,
            out: None,
        }
    }
}

#[derive(Serialize)]
struct Stats {
    entries: usize,
    d: usize,
    d_min: f64,
    error_bound: f64,
    min_norm: f64,
    max_norm: f64,
    max_kl: f64,
    tradeoff: TradeoffBound,
    /// d_min <= 2r for ball books; always true by the sphere argument.
    radius_cap_ok: Option<bool>,
}

fn stats(cfg: &CodebookConfig, chan: &ChannelConfig, book: &Codebook) -> Result<Stats> {
    let norms: Vec<f64> = book.entries().iter().map(|e| e.perturbation.norm()).collect();
    let max_kl = book
        .entries()
        .iter()
        .map(|e| kl_stealth(chan, &e.perturbation).map(|(kl, _)| kl))
        .try_fold(0.0f64, |acc, kl| kl.map(|kl| acc.max(kl)))?;
    let d_min = min_distance(book)?;
    let tradeoff = stealth_tradeoff(chan, cfg.eta, book.len())?;
    let radius_cap_ok = match cfg.kind {
        CodebookKind::Ball if cfg.input.is_none() => {
            let radius = cfg.radius.unwrap_or(cfg.norm);
            Some(d_min <= 2.0 * radius + 1e-12)
        }
        _ => None,
    };
    Ok(Stats {
        entries: book.len(),
        d: book.dim(),
        d_min,
        error_bound: decoding_error_bound(book, chan.sigma())?,
        min_norm: norms.iter().copied().fold(f64::INFINITY, f64::min),
        max_norm: norms.iter().copied().fold(0.0, f64::max),
        max_kl,
        tradeoff,
        radius_cap_ok,
    })
}

pub fn run(config_path: Option<&Path>, overrides: &Overrides) -> Result<u8> {
    let mut cfg: CodebookConfig = config::resolve(config_path, overrides)?;
    let out = config::out_dir(cfg.out.as_deref(), "codebook")?;
    cfg.out = Some(out.clone());

    let mut outputs = Vec::new();
    let (chan, book) = match &cfg.input {
        Some(input) => read_channel(File::open(input)?)?,
        None => {
            let stream = RandomStream::new(cfg.seed);
            let setup = stream.substream(0);
            let anchor =
                super::random_anchor(&setup.substream(0), cfg.d, cfg.anchor_norm)?;
            let book = match cfg.kind {
                CodebookKind::Orthogonal => {
                    make_orthogonal_codebook(cfg.d, cfg.m, cfg.norm, &setup.substream(1))?
                }
                CodebookKind::Ball => {
                    let radius = cfg.radius.unwrap_or(cfg.norm);
                    if radius <= 0.0 {
                        bail!("ball codebook needs a positive radius");
                    }
                    make_ball_codebook(cfg.d, cfg.m, radius, &setup.substream(1))?
                }
            };
            let chan = ChannelConfig::new(anchor, cfg.sigma)?;
            let channel_path = out.join("channel.json");
            write_channel(File::create(&channel_path)?, &chan, &book)?;
            outputs.push(channel_path);
            (chan, book)
        }
    };

    let stats = stats(&cfg, &chan, &book)?;
    let stats_path = out.join("stats.json");
    std::fs::write(&stats_path, serde_json::to_string_pretty(&stats)?)?;
    outputs.push(stats_path);
    config::write_manifest(&out, "codebook", cfg.seed, &cfg, &outputs)?;
    println!(
        "codebook: {} entries, d_min {:.4}, error bound {:.6}, max KL {:.4}",
        stats.entries, stats.d_min, stats.error_bound, stats.max_kl
    );
    Ok(0)
}

//! Observer side of the channel: the stego-vs-cover distinguishing
//! game, the matched-filter test that is optimal for it, the
//! closed-form advantage/total-variation formulas, and suboptimal
//! baseline detectors used to exhibit that optimality.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{ChannelConfig, Codebook};
use crate::numerics::{gaussian_sample, normal_cdf, LatentVector, NumericsError, RandomStream};

/// Errors surfaced by a detector function itself.
pub type DetectorError = Box<dyn std::error::Error + Send + Sync + 'static>;

/// A detector maps an observed latent vector to a stego/cover guess.
pub type DetectorFn<'a> = dyn Fn(&LatentVector) -> Result<bool, DetectorError> + Sync + 'a;

#[derive(Debug, Error)]
pub enum DetectionError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("message id {0:?} is not in the codebook")]
    UnknownMessage(String),
    #[error("matched filter is undefined for a zero perturbation")]
    ZeroPerturbation,
    #[error("sigma {0} must be positive for the advantage formula")]
    InvalidSigma(f64),
    #[error("threshold {0} must be a non-negative number")]
    InvalidThreshold(f64),
    #[error("the game needs at least one trial")]
    NoTrials,
    #[error("detector failed at trial {trial}")]
    DetectorFailed {
        trial: u64,
        #[source]
        source: DetectorError,
    },
}

/// One challenge of the distinguishing game.
#[derive(Debug, Clone, PartialEq)]
pub struct GameTrial {
    /// 1 when the latent carries the hidden message, 0 for cover.
    pub bit: u8,
    pub latent: LatentVector,
    pub anchor_id: String,
    pub message_id: String,
}

/// Outcome of a distinguishing game.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub trials: u64,
    pub empirical_advantage: f64,
    pub theoretical_advantage: f64,
    pub tv: f64,
    pub stderr: f64,
}

impl DetectionReport {
    pub fn csv_header() -> &'static str {
        "trials,empirical,theoretical,tv,stderr"
    }

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.trials, self.empirical_advantage, self.theoretical_advantage, self.tv, self.stderr
        )
    }
}

/// Likelihood-ratio test for one known perturbation: guesses stego iff
/// <latent - anchor, perturbation> exceeds ||perturbation||^2 / 2,
/// with equality resolved to cover.
pub fn matched_filter(
    cfg: &ChannelConfig,
    perturbation: &LatentVector,
    latent: &LatentVector,
) -> Result<bool, DetectionError> {
    if perturbation.norm() == 0.0 {
        return Err(DetectionError::ZeroPerturbation);
    }
    let centered = latent.sub(cfg.anchor())?;
    let score = centered.dot(perturbation)?;
    Ok(score > perturbation.dot(perturbation)? / 2.0)
}

/// Exact advantage of the optimal detector and the total variation
/// between stego and cover distributions:
/// adv = Phi(||delta|| / (2 sigma)) - 1/2 and tv = 2 adv.
pub fn theoretical_advantage(
    cfg: &ChannelConfig,
    perturbation: &LatentVector,
) -> Result<(f64, f64), DetectionError> {
    if perturbation.dim() != cfg.dim() {
        return Err(NumericsError::DimensionMismatch {
            left: cfg.dim(),
            right: perturbation.dim(),
        }
        .into());
    }
    let norm = perturbation.norm();
    if norm == 0.0 {
        return Ok((0.0, 0.0));
    }
    if cfg.sigma() <= 0.0 {
        return Err(DetectionError::InvalidSigma(cfg.sigma()));
    }
    let adv = normal_cdf(norm / (2.0 * cfg.sigma())) - 0.5;
    Ok((adv, 2.0 * adv))
}

fn challenge(
    cfg: &ChannelConfig,
    perturbation: &LatentVector,
    stream: &RandomStream,
) -> Result<(bool, LatentVector), DetectionError> {
    let bit: bool = stream.substream(0).rng().gen();
    let noise = gaussian_sample(&stream.substream(1), cfg.dim(), cfg.sigma())?;
    let mut latent = cfg.anchor().add(&noise)?;
    if bit {
        latent = latent.add(perturbation)?;
    }
    Ok((bit, latent))
}

/// Draws one labelled challenge for external detector experiments.
pub fn sample_game_trial(
    cfg: &ChannelConfig,
    book: &Codebook,
    anchor_id: &str,
    message_id: &str,
    stream: &RandomStream,
) -> Result<GameTrial, DetectionError> {
    let perturbation = book
        .get(message_id)
        .ok_or_else(|| DetectionError::UnknownMessage(message_id.to_string()))?;
    let (bit, latent) = challenge(cfg, perturbation, stream)?;
    Ok(GameTrial {
        bit: bit as u8,
        latent,
        anchor_id: anchor_id.to_string(),
        message_id: message_id.to_string(),
    })
}

/// Runs the distinguishing game: per trial a fair coin picks stego or
/// cover, the detector sees only the latent, and the advantage is the
/// success rate minus one half. Trial randomness comes from per-trial
/// substreams, so results do not depend on scheduling.
pub fn run_ind_game(
    cfg: &ChannelConfig,
    book: &Codebook,
    message_id: &str,
    detector: &DetectorFn<'_>,
    trials: u64,
    stream: &RandomStream,
) -> Result<DetectionReport, DetectionError> {
    run_ind_game_with_workers(cfg, book, message_id, detector, trials, stream, 1)
}

/// Same game with trials sharded over `workers` threads; the report is
/// identical for every worker count.
pub fn run_ind_game_with_workers(
    cfg: &ChannelConfig,
    book: &Codebook,
    message_id: &str,
    detector: &DetectorFn<'_>,
    trials: u64,
    stream: &RandomStream,
    workers: usize,
) -> Result<DetectionReport, DetectionError> {
    if trials == 0 {
        return Err(DetectionError::NoTrials);
    }
    let perturbation = book
        .get(message_id)
        .ok_or_else(|| DetectionError::UnknownMessage(message_id.to_string()))?;
    let (theoretical, tv) = theoretical_advantage(cfg, perturbation)?;

    let workers = workers.clamp(1, trials as usize);
    let run_range = |lo: u64, hi: u64| -> Result<u64, DetectionError> {
        let mut successes = 0u64;
        for i in lo..hi {
            let sub = stream.substream(i);
            let (bit, latent) = challenge(cfg, perturbation, &sub)?;
            let guess = detector(&latent)
                .map_err(|source| DetectionError::DetectorFailed { trial: i, source })?;
            successes += (guess == bit) as u64;
        }
        Ok(successes)
    };

    let successes = if workers == 1 {
        run_range(0, trials)?
    } else {
        let chunk = trials.div_ceil(workers as u64);
        let partials: Vec<Result<u64, DetectionError>> = std::thread::scope(|scope| {
            let handles: Vec<_> = (0..workers as u64)
                .map(|w| {
                    let run_range = &run_range;
                    let lo = w * chunk;
                    let hi = ((w + 1) * chunk).min(trials);
                    scope.spawn(move || run_range(lo, hi.max(lo)))
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
        });
        let mut total = 0u64;
        for partial in partials {
            total += partial?;
        }
        total
    };

    Ok(DetectionReport {
        trials,
        empirical_advantage: successes as f64 / trials as f64 - 0.5,
        theoretical_advantage: theoretical,
        tv,
        stderr: (0.25 / trials as f64).sqrt(),
    })
}

/// Baseline detector: guesses stego iff the distance from the anchor
/// exceeds `threshold`. Suboptimal by construction; it ignores the
/// perturbation direction.
pub fn norm_threshold_detector(
    cfg: &ChannelConfig,
    threshold: f64,
) -> Result<Box<DetectorFn<'static>>, DetectionError> {
    if threshold.is_nan() || threshold < 0.0 {
        return Err(DetectionError::InvalidThreshold(threshold));
    }
    let anchor = cfg.anchor().clone();
    Ok(Box::new(move |latent: &LatentVector| {
        Ok(latent.sub(&anchor)?.norm() > threshold)
    }))
}

/// Matched-filter detector bound to one template vector. With the true
/// perturbation it is the optimal test; with any other template it is
/// a (generally suboptimal) projection detector.
pub fn template_detector(
    cfg: &ChannelConfig,
    template: &LatentVector,
) -> Result<Box<DetectorFn<'static>>, DetectionError> {
    if template.norm() == 0.0 {
        return Err(DetectionError::ZeroPerturbation);
    }
    let cfg = cfg.clone();
    let template = template.clone();
    Ok(Box::new(move |latent: &LatentVector| {
        matched_filter(&cfg, &template, latent).map_err(DetectorError::from)
    }))
}

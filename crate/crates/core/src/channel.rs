//! Latent covert channel: codebooks, Gaussian-noise encoding,
//! nearest-neighbour decoding, and the closed-form
//! stealth/robustness/accuracy bounds that govern the channel.

use std::collections::HashSet;
use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{
    gaussian_sample, inverse_normal_cdf, q_function, LatentVector, NumericsError, RandomStream,
};

#[derive(Debug, Error)]
pub enum ChannelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("message id {0:?} is not in the codebook")]
    UnknownMessage(String),
    #[error("codebook has no entries")]
    EmptyCodebook,
    #[error("codebook has {have} entries but the operation needs at least {need}")]
    NotEnoughEntries { have: usize, need: usize },
    #[error("duplicate message id {0:?}")]
    DuplicateMessageId(String),
    #[error("codebook is degenerate: two messages share a perturbation")]
    DegenerateCodebook,
    #[error("sigma {0} must be finite and positive here")]
    InvalidSigma(f64),
    #[error("base norm {0} must be positive")]
    NonpositiveBase(f64),
    #[error("{name} = {value} is outside its allowed range")]
    ParameterOutOfRange { name: &'static str, value: f64 },
    #[error("codebook size {count} must lie in [2, dim] with dim {dim}")]
    CountOutOfRange { count: usize, dim: usize },
    #[error("anchor must have a positive norm")]
    ZeroAnchor,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Anchor vector plus noise scale; the public part of the channel.
/// `sigma = 0` is the noiseless limit, accepted for exact round-trip
/// simulation, but operations that divide by sigma reject it.
#[derive(Debug, Clone)]
pub struct ChannelConfig {
    anchor: LatentVector,
    sigma: f64,
}

impl ChannelConfig {
    pub fn new(anchor: LatentVector, sigma: f64) -> Result<Self, ChannelError> {
        if !sigma.is_finite() || sigma < 0.0 {
            return Err(ChannelError::InvalidSigma(sigma));
        }
        if anchor.norm() == 0.0 {
            return Err(ChannelError::ZeroAnchor);
        }
        Ok(Self { anchor, sigma })
    }

    pub fn anchor(&self) -> &LatentVector {
        &self.anchor
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn dim(&self) -> usize {
        self.anchor.dim()
    }

    fn positive_sigma(&self) -> Result<f64, ChannelError> {
        if self.sigma > 0.0 {
            Ok(self.sigma)
        } else {
            Err(ChannelError::InvalidSigma(self.sigma))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodebookEntry {
    pub message_id: String,
    pub perturbation: LatentVector,
}

/// Ordered message-to-perturbation table shared by sender and receiver.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    entries: Vec<CodebookEntry>,
    dim: usize,
}

impl Codebook {
    pub fn new(entries: Vec<CodebookEntry>) -> Result<Self, ChannelError> {
        let dim = entries.first().ok_or(ChannelError::EmptyCodebook)?.perturbation.dim();
        let mut seen = HashSet::new();
        for entry in &entries {
            if entry.perturbation.dim() != dim {
                return Err(NumericsError::DimensionMismatch {
                    left: dim,
                    right: entry.perturbation.dim(),
                }
                .into());
            }
            if !seen.insert(entry.message_id.clone()) {
                return Err(ChannelError::DuplicateMessageId(entry.message_id.clone()));
            }
        }
        Ok(Self { entries, dim })
    }

    pub fn entries(&self) -> &[CodebookEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, message_id: &str) -> Option<&LatentVector> {
        self.entries
            .iter()
            .find(|e| e.message_id == message_id)
            .map(|e| &e.perturbation)
    }
}

/// Stealth budget: allowed semantic-similarity loss `eta` and the
/// perturbation-sphere radius it buys.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StealthBudget {
    pub eta: f64,
    pub radius: f64,
}

impl StealthBudget {
    /// radius = sqrt(2 eta) * ||anchor||.
    pub fn from_config(cfg: &ChannelConfig, eta: f64) -> Result<Self, ChannelError> {
        if !eta.is_finite() || eta < 0.0 {
            return Err(ChannelError::ParameterOutOfRange { name: "eta", value: eta });
        }
        Ok(Self {
            eta,
            radius: (2.0 * eta).sqrt() * cfg.anchor.norm(),
        })
    }
}

/// Closed-form bounds for one message of a configured channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub kl: f64,
    pub snr: f64,
    pub scs_lower: f64,
    pub p_err_upper: f64,
    pub expected_scs_lower: f64,
}

/// Consequences of a stealth budget for decodability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TradeoffBound {
    pub radius: f64,
    pub dmin_cap: f64,
    pub error_floor: f64,
}

/// Embeds `message_id` as anchor + perturbation + N(0, sigma^2 I) noise.
pub fn encode(
    cfg: &ChannelConfig,
    book: &Codebook,
    message_id: &str,
    stream: &RandomStream,
) -> Result<LatentVector, ChannelError> {
    let perturbation = book
        .get(message_id)
        .ok_or_else(|| ChannelError::UnknownMessage(message_id.to_string()))?;
    let noise = gaussian_sample(stream, cfg.dim(), cfg.sigma)?;
    Ok(cfg.anchor.add(perturbation)?.add(&noise)?)
}

/// Nearest-neighbour decode. Returns the winning message id and the
/// extracted deviation stego - anchor; ties go to the lowest entry
/// index.
pub fn decode(
    cfg: &ChannelConfig,
    book: &Codebook,
    stego: &LatentVector,
) -> Result<(String, LatentVector), ChannelError> {
    if book.is_empty() {
        return Err(ChannelError::EmptyCodebook);
    }
    let extracted = stego.sub(&cfg.anchor)?;
    let mut best: Option<(usize, f64)> = None;
    for (index, entry) in book.entries.iter().enumerate() {
        let dist = extracted.distance(&entry.perturbation)?;
        if best.map_or(true, |(_, d)| dist < d) {
            best = Some((index, dist));
        }
    }
    let (index, _) = best.expect("codebook checked non-empty");
    Ok((book.entries[index].message_id.clone(), extracted))
}

/// Minimum pairwise distance between codebook perturbations.
pub fn min_distance(book: &Codebook) -> Result<f64, ChannelError> {
    if book.len() < 2 {
        return Err(ChannelError::NotEnoughEntries { have: book.len(), need: 2 });
    }
    let mut min = f64::INFINITY;
    for i in 0..book.len() {
        for j in (i + 1)..book.len() {
            let d = book.entries[i]
                .perturbation
                .distance(&book.entries[j].perturbation)?;
            if d < min {
                min = d;
            }
        }
    }
    Ok(min)
}

/// Stealth leakage of one perturbation: KL between stego and cover
/// latent distributions together with the signal-to-noise ratio.
/// KL = SNR / 2 with SNR = ||perturbation||^2 / sigma^2.
pub fn kl_stealth(
    cfg: &ChannelConfig,
    perturbation: &LatentVector,
) -> Result<(f64, f64), ChannelError> {
    if perturbation.dim() != cfg.dim() {
        return Err(NumericsError::DimensionMismatch {
            left: cfg.dim(),
            right: perturbation.dim(),
        }
        .into());
    }
    let sigma = self::ChannelConfig::positive_sigma(cfg)?;
    let snr = (perturbation.norm() / sigma).powi(2);
    Ok((snr / 2.0, snr))
}

/// Lower bound on the cosine similarity between a base vector and the
/// base plus a deviation whose parallel component is nonnegative.
/// Exact form: base / sqrt(base^2 + dev^2). Taylor form:
/// 1 - dev^2 / (2 base^2), valid for small deviations.
pub fn scs_lower_bound(
    base_norm: f64,
    deviation_norm: f64,
    exact: bool,
) -> Result<f64, ChannelError> {
    if !base_norm.is_finite() || base_norm <= 0.0 {
        return Err(ChannelError::NonpositiveBase(base_norm));
    }
    if !deviation_norm.is_finite() || deviation_norm < 0.0 {
        return Err(ChannelError::ParameterOutOfRange {
            name: "deviation_norm",
            value: deviation_norm,
        });
    }
    Ok(if exact {
        base_norm / (base_norm * base_norm + deviation_norm * deviation_norm).sqrt()
    } else {
        1.0 - deviation_norm * deviation_norm / (2.0 * base_norm * base_norm)
    })
}

/// Union bound on the decode error probability:
/// (|M| - 1) * Q(d_min / (2 sigma)), clamped to [0, 1]. A one-message
/// book has no competing message, so its bound is 0.
pub fn decoding_error_bound(book: &Codebook, sigma: f64) -> Result<f64, ChannelError> {
    if book.is_empty() {
        return Err(ChannelError::EmptyCodebook);
    }
    if !sigma.is_finite() || sigma <= 0.0 {
        return Err(ChannelError::InvalidSigma(sigma));
    }
    if book.len() == 1 {
        return Ok(0.0);
    }
    let dmin = min_distance(book)?;
    if dmin == 0.0 {
        return Err(ChannelError::DegenerateCodebook);
    }
    let bound = (book.len() - 1) as f64 * q_function(dmin / (2.0 * sigma));
    Ok(bound.clamp(0.0, 1.0))
}

/// Lower bound on the expected semantic similarity of the decoded
/// message: 1 - p_err * (1 - s_min).
pub fn expected_scs_lower(p_err: f64, s_min: f64) -> Result<f64, ChannelError> {
    if !(0.0..=1.0).contains(&p_err) {
        return Err(ChannelError::ParameterOutOfRange { name: "p_err", value: p_err });
    }
    if !(-1.0..=1.0).contains(&s_min) {
        return Err(ChannelError::ParameterOutOfRange { name: "s_min", value: s_min });
    }
    Ok(1.0 - p_err * (1.0 - s_min))
}

/// Consequences of capping the stealth loss at `eta`: perturbations
/// must fit in a sphere of radius r = sqrt(2 eta) * ||anchor||, the
/// minimum codeword distance is then at most 2r, and the best per-pair
/// decode error is Q(2r / (2 sigma)).
pub fn stealth_tradeoff(
    cfg: &ChannelConfig,
    eta: f64,
    book_size: usize,
) -> Result<TradeoffBound, ChannelError> {
    if book_size < 2 {
        return Err(ChannelError::NotEnoughEntries { have: book_size, need: 2 });
    }
    let sigma = cfg.positive_sigma()?;
    let budget = StealthBudget::from_config(cfg, eta)?;
    let dmin_cap = 2.0 * budget.radius;
    Ok(TradeoffBound {
        radius: budget.radius,
        dmin_cap,
        error_floor: q_function(dmin_cap / (2.0 * sigma)),
    })
}

/// Largest perturbation norm that keeps the best detector's advantage
/// at or below epsilon: 2 sigma * PhiInverse(0.5 + epsilon).
pub fn security_norm_bound(sigma: f64, epsilon: f64) -> Result<f64, ChannelError> {
    if !sigma.is_finite() || sigma <= 0.0 {
        return Err(ChannelError::InvalidSigma(sigma));
    }
    if !epsilon.is_finite() || epsilon <= 0.0 || epsilon >= 0.5 {
        return Err(ChannelError::ParameterOutOfRange { name: "epsilon", value: epsilon });
    }
    Ok(2.0 * sigma * inverse_normal_cdf(0.5 + epsilon)?)
}

/// Collected closed-form bounds for one message. `s_min` is the
/// caller's minimum semantic similarity between any two messages.
pub fn bound_report(
    cfg: &ChannelConfig,
    book: &Codebook,
    message_id: &str,
    s_min: f64,
) -> Result<BoundReport, ChannelError> {
    let perturbation = book
        .get(message_id)
        .ok_or_else(|| ChannelError::UnknownMessage(message_id.to_string()))?;
    let (kl, snr) = kl_stealth(cfg, perturbation)?;
    let scs_lower = scs_lower_bound(cfg.anchor.norm(), perturbation.norm(), true)?;
    let p_err_upper = decoding_error_bound(book, cfg.sigma)?;
    let expected = expected_scs_lower(p_err_upper, s_min)?;
    Ok(BoundReport {
        kl,
        snr,
        scs_lower,
        p_err_upper,
        expected_scs_lower: expected,
    })
}

fn message_ids(count: usize) -> impl Iterator<Item = String> {
    (0..count).map(|i| format!("m{i}"))
}

/// Mutually orthogonal perturbations of equal norm, deterministic under
/// the stream: orthonormalized Gaussian draws scaled to `norm`.
pub fn make_orthogonal_codebook(
    dim: usize,
    count: usize,
    norm: f64,
    stream: &RandomStream,
) -> Result<Codebook, ChannelError> {
    if count < 2 || count > dim {
        return Err(ChannelError::CountOutOfRange { count, dim });
    }
    if !norm.is_finite() || norm <= 0.0 {
        return Err(ChannelError::ParameterOutOfRange { name: "norm", value: norm });
    }
    let mut basis: Vec<LatentVector> = Vec::with_capacity(count);
    let mut attempt = 0u64;
    while basis.len() < count {
        if attempt > 32 * count as u64 {
            return Err(ChannelError::DegenerateCodebook);
        }
        let draw = gaussian_sample(&stream.substream(attempt), dim, 1.0)?;
        attempt += 1;
        let mut residual = draw.clone();
        for b in &basis {
            let proj = residual.dot(b)?;
            residual = residual.sub(&b.scale(proj)?)?;
        }
        let len = residual.norm();
        if len < 1e-9 * draw.norm().max(1.0) {
            continue;
        }
        basis.push(residual.scale(1.0 / len)?);
    }
    let entries = message_ids(count)
        .zip(basis)
        .map(|(message_id, unit)| {
            Ok(CodebookEntry {
                message_id,
                perturbation: unit.scale(norm)?,
            })
        })
        .collect::<Result<Vec<_>, ChannelError>>()?;
    Codebook::new(entries)
}

/// Perturbations drawn uniformly from the ball of the given radius;
/// the sampler behind stealth-budget sweeps.
pub fn make_ball_codebook(
    dim: usize,
    count: usize,
    radius: f64,
    stream: &RandomStream,
) -> Result<Codebook, ChannelError> {
    if count < 2 {
        return Err(ChannelError::NotEnoughEntries { have: count, need: 2 });
    }
    if !radius.is_finite() || radius <= 0.0 {
        return Err(ChannelError::ParameterOutOfRange { name: "radius", value: radius });
    }
    let entries = message_ids(count)
        .enumerate()
        .map(|(i, message_id)| {
            let sub = stream.substream(i as u64);
            let direction = gaussian_sample(&sub, dim, 1.0)?;
            let len = direction.norm();
            if len == 0.0 {
                return Err(ChannelError::DegenerateCodebook);
            }
            let u: f64 = sub.substream(u64::MAX).rng().gen();
            let r = radius * u.powf(1.0 / dim as f64);
            Ok(CodebookEntry {
                message_id,
                perturbation: direction.scale(r / len)?,
            })
        })
        .collect::<Result<Vec<_>, ChannelError>>()?;
    Codebook::new(entries)
}

#[derive(Serialize, Deserialize)]
struct ChannelFile {
    dim: usize,
    sigma: f64,
    anchor: LatentVector,
    entries: Vec<ChannelFileEntry>,
}

#[derive(Serialize, Deserialize)]
struct ChannelFileEntry {
    id: String,
    perturbation: LatentVector,
}

/// Serializes config and codebook to the channel JSON document.
/// Shortest-round-trip float encoding keeps the trip value-exact.
pub fn write_channel<W: Write>(
    writer: W,
    cfg: &ChannelConfig,
    book: &Codebook,
) -> Result<(), ChannelError> {
    let file = ChannelFile {
        dim: cfg.dim(),
        sigma: cfg.sigma,
        anchor: cfg.anchor.clone(),
        entries: book
            .entries
            .iter()
            .map(|e| ChannelFileEntry {
                id: e.message_id.clone(),
                perturbation: e.perturbation.clone(),
            })
            .collect(),
    };
    serde_json::to_writer_pretty(writer, &file)?;
    Ok(())
}

/// Parses and validates the channel JSON document.
pub fn read_channel<R: Read>(reader: R) -> Result<(ChannelConfig, Codebook), ChannelError> {
    let file: ChannelFile = serde_json::from_reader(reader)?;
    if file.anchor.dim() != file.dim {
        return Err(NumericsError::DimensionMismatch {
            left: file.dim,
            right: file.anchor.dim(),
        }
        .into());
    }
    let cfg = ChannelConfig::new(file.anchor, file.sigma)?;
    let book = Codebook::new(
        file.entries
            .into_iter()
            .map(|e| CodebookEntry {
                message_id: e.id,
                perturbation: e.perturbation,
            })
            .collect(),
    )?;
    if book.dim() != cfg.dim() {
        return Err(NumericsError::DimensionMismatch {
            left: cfg.dim(),
            right: book.dim(),
        }
        .into());
    }
    Ok((cfg, book))
}

//! Shared numeric kernel: validated latent vectors, Gaussian special
//! functions, counter-based substream RNG, order statistics and edit
//! distance.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NumericsError {
    #[error("vector must have at least one coordinate")]
    EmptyVector,
    #[error("non-finite value {value} at index {index}")]
    NonFiniteValue { index: usize, value: f64 },
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("zero-norm vector has no direction")]
    ZeroNorm,
    #[error("probability {p} outside the open interval (0, 1)")]
    ProbabilityOutOfRange { p: f64 },
    #[error("percentile rank {q} outside [0, 100]")]
    PercentileOutOfRange { q: f64 },
    #[error("empty sample")]
    EmptySample,
    #[error("sigma {sigma} must be finite and non-negative")]
    InvalidSigma { sigma: f64 },
}

/// Finite-dimensional real vector with every coordinate finite.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVector(Vec<f64>);

impl LatentVector {
    /// Validates that `values` is non-empty and free of NaN/infinities.
    pub fn new(values: Vec<f64>) -> Result<Self, NumericsError> {
        if values.is_empty() {
            return Err(NumericsError::EmptyVector);
        }
        for (index, &value) in values.iter().enumerate() {
            if !value.is_finite() {
                return Err(NumericsError::NonFiniteValue { index, value });
            }
        }
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Result<Self, NumericsError> {
        Self::new(vec![0.0; dim.max(0)])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_values(self) -> Vec<f64> {
        self.0
    }

    fn check_dim(&self, other: &Self) -> Result<(), NumericsError> {
        if self.dim() != other.dim() {
            return Err(NumericsError::DimensionMismatch {
                left: self.dim(),
                right: other.dim(),
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self, NumericsError> {
        self.check_dim(other)?;
        Self::new(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    pub fn sub(&self, other: &Self) -> Result<Self, NumericsError> {
        self.check_dim(other)?;
        Self::new(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    pub fn scale(&self, factor: f64) -> Result<Self, NumericsError> {
        Self::new(self.0.iter().map(|a| a * factor).collect())
    }

    pub fn dot(&self, other: &Self) -> Result<f64, NumericsError> {
        self.check_dim(other)?;
        Ok(self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum())
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|a| a * a).sum::<f64>().sqrt()
    }

    pub fn distance(&self, other: &Self) -> Result<f64, NumericsError> {
        self.check_dim(other)?;
        Ok(self
            .0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt())
    }
}

impl Serialize for LatentVector {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.0.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for LatentVector {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let values = Vec::<f64>::deserialize(deserializer)?;
        LatentVector::new(values).map_err(serde::de::Error::custom)
    }
}

/// Cosine similarity clamped to [-1, 1]; both vectors must be nonzero.
pub fn cosine_similarity(a: &LatentVector, b: &LatentVector) -> Result<f64, NumericsError> {
    let dot = a.dot(b)?;
    let sq = |v: &LatentVector| v.as_slice().iter().map(|x| x * x).sum::<f64>();
    let (qa, qb) = (sq(a), sq(b));
    if qa == 0.0 || qb == 0.0 {
        return Err(NumericsError::ZeroNorm);
    }
    // dot/sqrt(qa*qb) rather than dot/(|a||b|): when a == b the dot and
    // the squared norms are the same summation, so the ratio is exactly 1.
    Ok((dot / (qa * qb).sqrt()).clamp(-1.0, 1.0))
}

const SQRT_2: f64 = std::f64::consts::SQRT_2;

/// Standard normal upper-tail probability P(Z > x).
pub fn q_function(x: f64) -> f64 {
    0.5 * libm::erfc(x / SQRT_2)
}

/// Standard normal CDF P(Z <= x).
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / SQRT_2)
}

fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

// Acklam's rational approximation to the normal quantile, split at the
// tail probability 0.02425.
const ICDF_A: [f64; 6] = [
    -3.969683028665376e+01,
    2.209460984245205e+02,
    -2.759285104469687e+02,
    1.383577518672690e+02,
    -3.066479806614716e+01,
    2.506628277459239e+00,
];
const ICDF_B: [f64; 5] = [
    -5.447609879822406e+01,
    1.615858368580409e+02,
    -1.556989798598866e+02,
    6.680131188771972e+01,
    -1.328068155288572e+01,
];
const ICDF_C: [f64; 6] = [
    -7.784894002430293e-03,
    -3.223964580411365e-01,
    -2.400758277161838e+00,
    -2.549732539343734e+00,
    4.374664141464968e+00,
    2.938163982698783e+00,
];
const ICDF_D: [f64; 4] = [
    7.784695709041462e-03,
    3.224671290700398e-01,
    2.445134137142996e+00,
    3.754408661907416e+00,
];

/// Inverse of `normal_cdf` on the open interval (0, 1), accurate to
/// better than 1e-9 after one Newton refinement.
pub fn inverse_normal_cdf(p: f64) -> Result<f64, NumericsError> {
    if !p.is_finite() || p <= 0.0 || p >= 1.0 {
        return Err(NumericsError::ProbabilityOutOfRange { p });
    }
    let p_low = 0.02425;
    let p_high = 1.0 - p_low;
    let x = if p < p_low {
        let q = (-2.0 * p.ln()).sqrt();
        (((((ICDF_C[0] * q + ICDF_C[1]) * q + ICDF_C[2]) * q + ICDF_C[3]) * q + ICDF_C[4]) * q
            + ICDF_C[5])
            / ((((ICDF_D[0] * q + ICDF_D[1]) * q + ICDF_D[2]) * q + ICDF_D[3]) * q + 1.0)
    } else if p <= p_high {
        let q = p - 0.5;
        let r = q * q;
        (((((ICDF_A[0] * r + ICDF_A[1]) * r + ICDF_A[2]) * r + ICDF_A[3]) * r + ICDF_A[4]) * r
            + ICDF_A[5])
            * q
            / (((((ICDF_B[0] * r + ICDF_B[1]) * r + ICDF_B[2]) * r + ICDF_B[3]) * r + ICDF_B[4])
                * r
                + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((ICDF_C[0] * q + ICDF_C[1]) * q + ICDF_C[2]) * q + ICDF_C[3]) * q + ICDF_C[4]) * q
            + ICDF_C[5])
            / ((((ICDF_D[0] * q + ICDF_D[1]) * q + ICDF_D[2]) * q + ICDF_D[3]) * q + 1.0)
    };
    let pdf = normal_pdf(x);
    if pdf > 0.0 && pdf.is_finite() {
        Ok(x - (normal_cdf(x) - p) / pdf)
    } else {
        Ok(x)
    }
}

/// Edit distance over Unicode scalar values.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut curr = vec![0usize; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        curr[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub_cost = if ca == cb { 0 } else { 1 };
            curr[j + 1] = (prev[j] + sub_cost)
                .min(prev[j + 1] + 1)
                .min(curr[j] + 1);
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[b.len()]
}

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix64(mut x: u64) -> u64 {
    x ^= x >> 30;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^= x >> 31;
    x
}

/// Descriptor of a reproducible random substream. The same
/// `(seed, stream_id)` pair yields the same sequence regardless of how
/// work is split across threads, so experiments derive one substream
/// per independent unit of work.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RandomStream {
    pub seed: u64,
    pub stream_id: u64,
}

impl RandomStream {
    pub fn new(seed: u64) -> Self {
        Self { seed, stream_id: 0 }
    }

    /// Derives the child stream at `index`; derivation is pure, so any
    /// worker can recompute it.
    pub fn substream(&self, index: u64) -> Self {
        Self {
            seed: self.seed,
            stream_id: mix64(self.stream_id ^ mix64(index.wrapping_add(GOLDEN_GAMMA))),
        }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id);
        rng
    }
}

/// Isotropic Gaussian draw with standard deviation `sigma` per
/// coordinate; `sigma = 0` yields the zero vector.
pub fn gaussian_sample(
    stream: &RandomStream,
    dim: usize,
    sigma: f64,
) -> Result<LatentVector, NumericsError> {
    if dim == 0 {
        return Err(NumericsError::EmptyVector);
    }
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(NumericsError::InvalidSigma { sigma });
    }
    if sigma == 0.0 {
        return LatentVector::new(vec![0.0; dim]);
    }
    let mut rng = stream.rng();
    let normal = rand_distr::StandardNormal;
    LatentVector::new(
        (0..dim)
            .map(|_| sigma * <rand_distr::StandardNormal as Distribution<f64>>::sample(&normal, &mut rng))
            .collect(),
    )
}

/// Percentile with linear interpolation between order statistics
/// (quantile type 7). `q` is a rank in [0, 100].
pub fn percentile(values: &[f64], q: f64) -> Result<f64, NumericsError> {
    if values.is_empty() {
        return Err(NumericsError::EmptySample);
    }
    if !q.is_finite() || !(0.0..=100.0).contains(&q) {
        return Err(NumericsError::PercentileOutOfRange { q });
    }
    for (index, &value) in values.iter().enumerate() {
        if !value.is_finite() {
            return Err(NumericsError::NonFiniteValue { index, value });
        }
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    if lo + 1 < sorted.len() {
        Ok(sorted[lo] + frac * (sorted[lo + 1] - sorted[lo]))
    } else {
        Ok(sorted[lo])
    }
}

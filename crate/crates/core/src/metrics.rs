//! Text and embedding evaluation metrics: semantic similarity over
//! pluggable embedders, exact-match and character-error rates,
//! detector operating points, cluster separability, and a
//! perplexity-drop token filter with percentile calibration.
//!
//! Real sentence embedders and language models are out of scope; the
//! bundled hashing embedders and the additive-smoothed character
//! bigram model keep every metric testable hermetically.

use std::collections::{BTreeSet, HashMap};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

use crate::numerics::{cosine_similarity, levenshtein, percentile, LatentVector, NumericsError};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("{what} must be non-empty")]
    EmptyInput { what: &'static str },
    #[error("cluster dimensions differ: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("degenerate clusters: {detail}")]
    DegenerateCluster { detail: String },
    #[error("smoothing constant {alpha} must be positive and finite")]
    InvalidAlpha { alpha: f64 },
    #[error("perplexity corpus has no text")]
    EmptyCorpus,
    #[error("target false-positive rate {value} must lie in (0, 1)")]
    InvalidTargetFpr { value: f64 },
    #[error("sentence has no tokens")]
    EmptySentence,
    #[error("perplexity function failed")]
    PerplexityFailed {
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
    #[error("line {line}: {source}")]
    JsonLine {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Deterministic text embedder with a fixed output dimension.
pub trait EmbeddingProvider {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<LatentVector, MetricsError>;
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// FNV-1a; the std hasher is randomized per process, which would break
/// embedder determinism across runs.
pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Hashed bag-of-words: lowercase whitespace tokens counted into a
/// fixed number of buckets.
#[derive(Debug, Clone)]
pub struct BowEmbedder {
    dim: usize,
}

impl BowEmbedder {
    pub fn new(dim: usize) -> Result<Self, MetricsError> {
        if dim == 0 {
            return Err(MetricsError::EmptyInput { what: "embedding dim" });
        }
        Ok(Self { dim })
    }
}

impl Default for BowEmbedder {
    fn default() -> Self {
        Self { dim: 256 }
    }
}

impl EmbeddingProvider for BowEmbedder {
    fn name(&self) -> &str {
        "hashed-bow"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<LatentVector, MetricsError> {
        let mut counts = vec![0.0; self.dim];
        for token in text.to_lowercase().split_whitespace() {
            let bucket = (fnv1a(token.as_bytes()) % self.dim as u64) as usize;
            counts[bucket] += 1.0;
        }
        Ok(LatentVector::new(counts)?)
    }
}

/// Hashed character trigrams over the lowercased text with whitespace
/// runs collapsed to single spaces. Texts shorter than three
/// characters hash as a single gram.
#[derive(Debug, Clone)]
pub struct TrigramEmbedder {
    dim: usize,
}

impl TrigramEmbedder {
    pub fn new(dim: usize) -> Result<Self, MetricsError> {
        if dim == 0 {
            return Err(MetricsError::EmptyInput { what: "embedding dim" });
        }
        Ok(Self { dim })
    }
}

impl Default for TrigramEmbedder {
    fn default() -> Self {
        Self { dim: 512 }
    }
}

impl EmbeddingProvider for TrigramEmbedder {
    fn name(&self) -> &str {
        "hashed-trigram"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<LatentVector, MetricsError> {
        let cleaned: Vec<char> = text
            .to_lowercase()
            .split_whitespace()
            .collect::<Vec<_>>()
            .join(" ")
            .chars()
            .collect();
        let mut counts = vec![0.0; self.dim];
        let mut gram = |chars: &[char]| {
            let key: String = chars.iter().collect();
            let bucket = (fnv1a(key.as_bytes()) % self.dim as u64) as usize;
            counts[bucket] += 1.0;
        };
        if cleaned.len() < 3 {
            gram(&cleaned);
        } else {
            for window in cleaned.windows(3) {
                gram(window);
            }
        }
        Ok(LatentVector::new(counts)?)
    }
}

/// Cosine similarity between the embeddings of two texts.
pub fn scs(
    provider: &dyn EmbeddingProvider,
    x: &str,
    y: &str,
) -> Result<f64, MetricsError> {
    let ex = provider.embed(x)?;
    let ey = provider.embed(y)?;
    Ok(cosine_similarity(&ex, &ey)?)
}

/// NFC normalization plus leading/trailing whitespace trim; the match
/// rule shared by [`emr`] and [`cer`].
pub fn normalize_text(text: &str) -> String {
    text.nfc().collect::<String>().trim().to_string()
}

/// Fraction of pairs equal after normalization.
pub fn emr(pairs: &[(String, String)]) -> Result<f64, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::EmptyInput { what: "pair list" });
    }
    let matches = pairs
        .iter()
        .filter(|(truth, decoded)| normalize_text(truth) == normalize_text(decoded))
        .count();
    Ok(matches as f64 / pairs.len() as f64)
}

/// Mean normalized edit distance. Both strings pass through the same
/// normalization as [`emr`] so that cer == 0 exactly when emr == 1.
pub fn cer(pairs: &[(String, String)]) -> Result<f64, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::EmptyInput { what: "pair list" });
    }
    let total: f64 = pairs
        .iter()
        .map(|(truth, decoded)| {
            let truth = normalize_text(truth);
            let decoded = normalize_text(decoded);
            let denom = truth.chars().count().max(1) as f64;
            levenshtein(&truth, &decoded) as f64 / denom
        })
        .sum();
    Ok(total / pairs.len() as f64)
}

/// Fractions of positive and negative scores strictly above the
/// threshold.
pub fn tpr_fpr(
    scores_pos: &[f64],
    scores_neg: &[f64],
    threshold: f64,
) -> Result<(f64, f64), MetricsError> {
    if scores_pos.is_empty() {
        return Err(MetricsError::EmptyInput { what: "positive scores" });
    }
    if scores_neg.is_empty() {
        return Err(MetricsError::EmptyInput { what: "negative scores" });
    }
    let rate = |scores: &[f64]| {
        scores.iter().filter(|&&s| s > threshold).count() as f64 / scores.len() as f64
    };
    Ok((rate(scores_pos), rate(scores_neg)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeparabilityReport {
    pub silhouette: f64,
    pub between_within: f64,
    pub fisher: f64,
}

fn centroid(cluster: &[LatentVector]) -> Vec<f64> {
    let dim = cluster[0].dim();
    let mut mean = vec![0.0; dim];
    for v in cluster {
        for (m, x) in mean.iter_mut().zip(v.as_slice()) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= cluster.len() as f64;
    }
    mean
}

fn distance_to(point: &LatentVector, target: &[f64]) -> f64 {
    point
        .as_slice()
        .iter()
        .zip(target)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

/// Three clustering statistics for two labeled point clouds:
/// mean silhouette with Euclidean distances, centroid gap over mean
/// intra-cluster distance, and Fisher's ratio with per-cluster total
/// variance (trace of the unbiased covariance).
pub fn separability(
    a: &[LatentVector],
    b: &[LatentVector],
) -> Result<SeparabilityReport, MetricsError> {
    if a.len() < 2 {
        return Err(MetricsError::EmptyInput { what: "cluster a (need >= 2 points)" });
    }
    if b.len() < 2 {
        return Err(MetricsError::EmptyInput { what: "cluster b (need >= 2 points)" });
    }
    let dim = a[0].dim();
    for v in a.iter().chain(b.iter()) {
        if v.dim() != dim {
            return Err(MetricsError::DimensionMismatch { left: dim, right: v.dim() });
        }
    }

    let mut silhouette_sum = 0.0;
    let mut add_silhouettes =
        |own: &[LatentVector], other: &[LatentVector]| -> Result<(), MetricsError> {
            for (i, point) in own.iter().enumerate() {
                let intra: f64 = own
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| *j != i)
                    .map(|(_, q)| point.distance(q).expect("dims checked"))
                    .sum::<f64>()
                    / (own.len() - 1) as f64;
                let inter: f64 = other
                    .iter()
                    .map(|q| point.distance(q).expect("dims checked"))
                    .sum::<f64>()
                    / other.len() as f64;
                let denom = intra.max(inter);
                // Identical duplicated points make both distances zero;
                // score such points as 0 by convention.
                if denom > 0.0 {
                    silhouette_sum += (inter - intra) / denom;
                }
            }
            Ok(())
        };
    add_silhouettes(a, b)?;
    add_silhouettes(b, a)?;
    let silhouette = silhouette_sum / (a.len() + b.len()) as f64;

    let mu_a = centroid(a);
    let mu_b = centroid(b);
    let gap: f64 = mu_a
        .iter()
        .zip(&mu_b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();

    let intra_mean = (a.iter().map(|p| distance_to(p, &mu_a)).sum::<f64>()
        + b.iter().map(|p| distance_to(p, &mu_b)).sum::<f64>())
        / (a.len() + b.len()) as f64;
    if intra_mean == 0.0 {
        return Err(MetricsError::DegenerateCluster {
            detail: "zero intra-cluster spread".into(),
        });
    }
    let between_within = gap / intra_mean;

    let total_var = |cluster: &[LatentVector], mu: &[f64]| {
        cluster
            .iter()
            .map(|p| {
                p.as_slice()
                    .iter()
                    .zip(mu)
                    .map(|(x, m)| (x - m) * (x - m))
                    .sum::<f64>()
            })
            .sum::<f64>()
            / (cluster.len() - 1) as f64
    };
    let var_sum = total_var(a, &mu_a) + total_var(b, &mu_b);
    if var_sum == 0.0 {
        return Err(MetricsError::DegenerateCluster {
            detail: "zero variance in both clusters".into(),
        });
    }
    let fisher = gap * gap / var_sum;

    Ok(SeparabilityReport { silhouette, between_within, fisher })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Sym {
    Bos,
    Eos,
    Oov,
    Ch(char),
}

/// Additive-smoothed character bigram model with sentence boundary
/// markers and a single out-of-vocabulary bucket. Each corpus line
/// trains one sentence.
#[derive(Debug, Clone)]
pub struct CharBigramModel {
    alpha: f64,
    charset: BTreeSet<char>,
    counts: HashMap<(Sym, Sym), u64>,
    totals: HashMap<Sym, u64>,
}

impl CharBigramModel {
    pub fn train(corpus: &str, alpha: f64) -> Result<Self, MetricsError> {
        if !alpha.is_finite() || alpha <= 0.0 {
            return Err(MetricsError::InvalidAlpha { alpha });
        }
        if corpus.trim().is_empty() {
            return Err(MetricsError::EmptyCorpus);
        }
        let mut model = Self {
            alpha,
            charset: corpus.lines().flat_map(|l| l.chars()).collect(),
            counts: HashMap::new(),
            totals: HashMap::new(),
        };
        for line in corpus.lines() {
            let mut prev = Sym::Bos;
            for c in line.chars() {
                let cur = Sym::Ch(c);
                *model.counts.entry((prev, cur)).or_insert(0) += 1;
                *model.totals.entry(prev).or_insert(0) += 1;
                prev = cur;
            }
            *model.counts.entry((prev, Sym::Eos)).or_insert(0) += 1;
            *model.totals.entry(prev).or_insert(0) += 1;
        }
        Ok(model)
    }

    fn classify(&self, c: char) -> Sym {
        if self.charset.contains(&c) {
            Sym::Ch(c)
        } else {
            Sym::Oov
        }
    }

    /// Emission alphabet size: every corpus character plus the OOV
    /// bucket and the end marker.
    fn alphabet(&self) -> f64 {
        (self.charset.len() + 2) as f64
    }

    fn log_prob(&self, prev: Sym, next: Sym) -> f64 {
        let joint = *self.counts.get(&(prev, next)).unwrap_or(&0) as f64;
        let total = *self.totals.get(&prev).unwrap_or(&0) as f64;
        ((joint + self.alpha) / (total + self.alpha * self.alphabet())).ln()
    }

    /// Per-transition perplexity including the boundary transitions;
    /// the empty sentence scores the single start-to-end transition.
    pub fn perplexity(&self, sentence: &str) -> f64 {
        let mut log_likelihood = 0.0;
        let mut transitions = 0u64;
        let mut prev = Sym::Bos;
        for c in sentence.chars() {
            let cur = self.classify(c);
            log_likelihood += self.log_prob(prev, cur);
            transitions += 1;
            prev = cur;
        }
        log_likelihood += self.log_prob(prev, Sym::Eos);
        transitions += 1;
        (-log_likelihood / transitions as f64).exp()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredToken {
    pub token: String,
    /// Character offsets (start, end) in the original sentence.
    pub span: (usize, usize),
    pub drop: f64,
}

type PerplexityFn<'a> = dyn Fn(&str) -> Result<f64, Box<dyn std::error::Error + Send + Sync>> + 'a;

fn whitespace_tokens(sentence: &str) -> Vec<(String, (usize, usize))> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    let mut start = 0usize;
    for (offset, c) in sentence.chars().enumerate() {
        if c.is_whitespace() {
            if !current.is_empty() {
                tokens.push((std::mem::take(&mut current), (start, offset)));
            }
        } else {
            if current.is_empty() {
                start = offset;
            }
            current.push(c);
        }
    }
    if !current.is_empty() {
        let end = sentence.chars().count();
        tokens.push((current, (start, end)));
    }
    tokens
}

/// Scores every whitespace token by the perplexity decrement its
/// removal causes (remaining tokens rejoined with single spaces);
/// results sorted by descending drop, ties by span start. Duplicate
/// tokens score independently through their spans.
pub fn onion_score(
    sentence: &str,
    perplexity: &PerplexityFn<'_>,
) -> Result<Vec<ScoredToken>, MetricsError> {
    let tokens = whitespace_tokens(sentence);
    if tokens.is_empty() {
        return Err(MetricsError::EmptySentence);
    }
    let ppl = |s: &str| {
        perplexity(s).map_err(|source| MetricsError::PerplexityFailed { source })
    };
    let full = ppl(sentence)?;
    let mut scored = Vec::with_capacity(tokens.len());
    for skip in 0..tokens.len() {
        let rest: Vec<&str> = tokens
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != skip)
            .map(|(_, (t, _))| t.as_str())
            .collect();
        let without = rest.join(" ");
        let (token, span) = &tokens[skip];
        scored.push(ScoredToken {
            token: token.clone(),
            span: *span,
            drop: full - ppl(&without)?,
        });
    }
    scored.sort_by(|x, y| {
        y.drop
            .partial_cmp(&x.drop)
            .expect("finite drops")
            .then(x.span.0.cmp(&y.span.0))
    });
    Ok(scored)
}

/// Threshold giving the target false-positive rate on clean scores:
/// their 100·(1 − target_fpr) percentile.
pub fn calibrate_threshold(
    clean_scores: &[f64],
    target_fpr: f64,
) -> Result<f64, MetricsError> {
    if clean_scores.is_empty() {
        return Err(MetricsError::EmptyInput { what: "clean scores" });
    }
    if !(0.0..1.0).contains(&target_fpr) || target_fpr == 0.0 {
        return Err(MetricsError::InvalidTargetFpr { value: target_fpr });
    }
    Ok(percentile(clean_scores, 100.0 * (1.0 - target_fpr))?)
}

#[derive(Debug, Serialize, Deserialize)]
struct PairRecord {
    truth: String,
    decoded: String,
}

/// Reads {"truth": ..., "decoded": ...} JSONL; blank lines skipped.
pub fn read_pairs_jsonl<R: BufRead>(reader: R) -> Result<Vec<(String, String)>, MetricsError> {
    let mut pairs = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: PairRecord = serde_json::from_str(&line)
            .map_err(|source| MetricsError::JsonLine { line: idx + 1, source })?;
        pairs.push((record.truth, record.decoded));
    }
    Ok(pairs)
}

pub fn write_pairs_jsonl<W: Write>(
    mut writer: W,
    pairs: &[(String, String)],
) -> Result<(), MetricsError> {
    for (truth, decoded) in pairs {
        let record = PairRecord { truth: truth.clone(), decoded: decoded.clone() };
        serde_json::to_writer(&mut writer, &record)?;
        writeln!(writer)?;
    }
    Ok(())
}

/// Reads one score per JSONL line: either a bare number or an object
/// with a "score" field.
pub fn read_scores_jsonl<R: BufRead>(reader: R) -> Result<Vec<f64>, MetricsError> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum ScoreLine {
        Bare(f64),
        Tagged { score: f64 },
    }
    let mut scores = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: ScoreLine = serde_json::from_str(&line)
            .map_err(|source| MetricsError::JsonLine { line: idx + 1, source })?;
        scores.push(match parsed {
            ScoreLine::Bare(s) => s,
            ScoreLine::Tagged { score } => score,
        });
    }
    Ok(scores)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::montecarlo::wilson_interval;
    use crate::numerics::{gaussian_sample, RandomStream};
    use proptest::prelude::*;

    fn pairs(list: &[(&str, &str)]) -> Vec<(String, String)> {
        list.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
    }

    #[test]
    fn scs_identical_and_disjoint() {
        let bow = BowEmbedder::default();
        assert_eq!(scs(&bow, "alpha beta", "alpha beta").unwrap(), 1.0);
        assert_eq!(scs(&bow, "alpha beta", "gamma delta").unwrap(), 0.0);
        let tri = TrigramEmbedder::default();
        assert_eq!(scs(&tri, "some text", "some  text").unwrap(), 1.0);
    }

    #[test]
    fn scs_matches_bag_overlap_cosine() {
        // Both bags hold two singleton tokens sharing "income":
        // cos = 1 / (sqrt(2) * sqrt(2)) = 0.5, given no bucket
        // collisions among the three distinct tokens.
        let bow = BowEmbedder::default();
        let buckets: Vec<u64> = ["total", "annual", "income"]
            .iter()
            .map(|t| fnv1a(t.as_bytes()) % 256)
            .collect();
        assert_eq!(buckets.iter().collect::<BTreeSet<_>>().len(), 3);
        let value = scs(&bow, "total income", "annual income").unwrap();
        assert!((value - 0.5).abs() < 1e-15);
    }

    #[test]
    fn emr_match_rules() {
        assert_eq!(emr(&pairs(&[("abc", "abc"), ("x", "x")])).unwrap(), 1.0);
        assert_eq!(emr(&pairs(&[("abc", "abc"), ("x", "y")])).unwrap(), 0.5);
        assert_eq!(emr(&pairs(&[("abc", "abc ")])).unwrap(), 1.0);
        // Composed vs decomposed accent unify under NFC.
        assert_eq!(emr(&pairs(&[("caf\u{e9}", "cafe\u{301}")])).unwrap(), 1.0);
        assert!(matches!(emr(&[]), Err(MetricsError::EmptyInput { .. })));
    }

    #[test]
    fn cer_reference_values() {
        assert_eq!(cer(&pairs(&[("same", "same")])).unwrap(), 0.0);
        assert_eq!(cer(&pairs(&[("", "a")])).unwrap(), 1.0);
        let value = cer(&pairs(&[("abc", "abd")])).unwrap();
        assert!((value - 1.0 / 3.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn cer_emr_duality(list in proptest::collection::vec(("[ a-c]{0,5}", "[ a-c]{0,5}"), 1..6)) {
            let pair_list: Vec<(String, String)> = list;
            let c = cer(&pair_list).unwrap();
            let m = emr(&pair_list).unwrap();
            prop_assert_eq!(c == 0.0, m == 1.0);
        }
    }

    #[test]
    fn duality_on_trimmed_pairs() {
        let list = pairs(&[("abc", "abc "), (" x", "x")]);
        assert_eq!(cer(&list).unwrap(), 0.0);
        assert_eq!(emr(&list).unwrap(), 1.0);
    }

    #[test]
    fn tpr_fpr_thresholds() {
        let pos = [0.9, 0.8, 0.7];
        let neg = [0.1, 0.2];
        assert_eq!(tpr_fpr(&pos, &neg, -1.0).unwrap(), (1.0, 1.0));
        assert_eq!(tpr_fpr(&pos, &neg, 2.0).unwrap(), (0.0, 0.0));
        // Strict comparison: a score equal to the threshold does not fire.
        assert_eq!(tpr_fpr(&pos, &neg, 0.7).unwrap(), (2.0 / 3.0, 0.0));
        let interleaved_pos = [0.1, 0.4, 0.6, 0.9];
        let interleaved_neg = [0.2, 0.3, 0.7];
        let (tpr, fpr) = tpr_fpr(&interleaved_pos, &interleaved_neg, 0.35).unwrap();
        assert_eq!(tpr, 3.0 / 4.0);
        assert_eq!(fpr, 1.0 / 3.0);
    }

    fn cloud(stream: &RandomStream, n: usize, dim: usize, shift: f64) -> Vec<LatentVector> {
        (0..n)
            .map(|i| {
                let noise = gaussian_sample(&stream.substream(i as u64), dim, 1.0).unwrap();
                let base = LatentVector::new(vec![shift; dim]).unwrap();
                base.add(&noise).unwrap()
            })
            .collect()
    }

    #[test]
    fn separability_far_tight_clusters() {
        let root = RandomStream::new(77);
        let a: Vec<LatentVector> = cloud(&root.substream(0), 20, 4, 0.0)
            .into_iter()
            .map(|v| v.scale(1e-3).unwrap())
            .collect();
        let b: Vec<LatentVector> = cloud(&root.substream(1), 20, 4, 0.0)
            .into_iter()
            .map(|v| {
                v.scale(1e-3)
                    .unwrap()
                    .add(&LatentVector::new(vec![1e3; 4]).unwrap())
                    .unwrap()
            })
            .collect();
        let report = separability(&a, &b).unwrap();
        assert!(report.silhouette > 0.99, "silhouette {}", report.silhouette);
        assert!(report.between_within > 1e5);
        assert!(report.fisher > 1e10);
    }

    #[test]
    fn separability_same_distribution_is_near_zero() {
        let root = RandomStream::new(78);
        let a = cloud(&root.substream(0), 300, 6, 0.0);
        let b = cloud(&root.substream(1), 300, 6, 0.0);
        let report = separability(&a, &b).unwrap();
        assert!(report.silhouette.abs() <= 0.05, "silhouette {}", report.silhouette);
    }

    #[test]
    fn separability_degenerate_and_mismatch_errors() {
        let p = |v: &[f64]| LatentVector::new(v.to_vec()).unwrap();
        let same = vec![p(&[1.0, 1.0]), p(&[1.0, 1.0])];
        let other = vec![p(&[2.0, 2.0]), p(&[2.0, 2.0])];
        assert!(matches!(
            separability(&same, &other),
            Err(MetricsError::DegenerateCluster { .. })
        ));
        let mixed = vec![p(&[1.0, 1.0]), p(&[1.0, 1.0])];
        let bad = vec![p(&[1.0, 2.0]), LatentVector::new(vec![1.0]).unwrap()];
        assert!(matches!(
            separability(&mixed, &bad),
            Err(MetricsError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn bigram_model_hand_trace() {
        // Corpus "ab": charset {a, b}, alphabet size 4.
        // Counts: start->a, a->b, b->end, each total 1.
        let model = CharBigramModel::train("ab", 1.0).unwrap();
        // Seen transitions: (1+1)/(1+4) = 0.4 each, so ppl("ab") = 2.5.
        assert!((model.perplexity("ab") - 2.5).abs() < 1e-12);
        // Empty: start->end = (0+1)/(1+4) = 0.2, ppl = 5.
        assert!((model.perplexity("") - 5.0).abs() < 1e-12);
        // "a": 0.4 * 0.2 over two transitions -> 1/sqrt(0.08).
        let expected = 1.0 / (0.4f64 * 0.2).sqrt();
        assert!((model.perplexity("a") - expected).abs() < 1e-12);
        // Unknown char routes through the OOV bucket: start->oov = 1/5,
        // oov->end = 1/4.
        let expected_oov = 1.0 / (0.2f64 * 0.25).sqrt();
        assert!((model.perplexity("z") - expected_oov).abs() < 1e-12);
    }

    #[test]
    fn bigram_model_rejects_bad_input() {
        assert!(matches!(
            CharBigramModel::train("ab", 0.0),
            Err(MetricsError::InvalidAlpha { .. })
        ));
        assert!(matches!(
            CharBigramModel::train("  \n ", 1.0),
            Err(MetricsError::EmptyCorpus)
        ));
    }

    #[test]
    fn onion_single_token_drop() {
        let model = CharBigramModel::train("the cat sat\non the mat", 0.5).unwrap();
        let scorer: Box<PerplexityFn<'_>> = Box::new(|s: &str| Ok(model.perplexity(s)));
        let scored = onion_score("cat", &scorer).unwrap();
        assert_eq!(scored.len(), 1);
        assert_eq!(scored[0].token, "cat");
        assert_eq!(scored[0].span, (0, 3));
        let expected = model.perplexity("cat") - model.perplexity("");
        assert!((scored[0].drop - expected).abs() < 1e-12);
    }

    #[test]
    fn onion_flags_unseen_token() {
        let corpus = "the cat sat on the mat\nthe dog sat on the rug\na cat and a dog sat";
        let model = CharBigramModel::train(corpus, 0.5).unwrap();
        let scorer: Box<PerplexityFn<'_>> = Box::new(|s: &str| Ok(model.perplexity(s)));
        let scored = onion_score("the cat zzqq sat", &scorer).unwrap();
        assert_eq!(scored[0].token, "zzqq");
        assert!(scored[0].drop > 0.0);
        for pair in scored.windows(2) {
            assert!(pair[0].drop >= pair[1].drop);
        }
    }

    #[test]
    fn onion_duplicate_tokens_score_by_span() {
        let model = CharBigramModel::train("cat dog cat", 0.5).unwrap();
        let scorer: Box<PerplexityFn<'_>> = Box::new(|s: &str| Ok(model.perplexity(s)));
        let scored = onion_score("cat cat dog", &scorer).unwrap();
        assert_eq!(scored.len(), 3);
        let spans: BTreeSet<(usize, usize)> =
            scored.iter().map(|t| t.span).collect();
        assert_eq!(spans.len(), 3);
        assert!(spans.contains(&(0, 3)) && spans.contains(&(4, 7)) && spans.contains(&(8, 11)));
        // Removing either duplicate leaves the same remainder text, so
        // the two spans carry equal drops.
        let cat_drops: Vec<f64> = scored
            .iter()
            .filter(|t| t.token == "cat")
            .map(|t| t.drop)
            .collect();
        assert_eq!(cat_drops.len(), 2);
        assert!((cat_drops[0] - cat_drops[1]).abs() < 1e-15);
    }

    #[test]
    fn onion_propagates_scorer_failure() {
        let scorer: Box<PerplexityFn<'_>> = Box::new(|_s: &str| Err("boom".into()));
        assert!(matches!(
            onion_score("a b", &scorer),
            Err(MetricsError::PerplexityFailed { .. })
        ));
    }

    #[test]
    fn calibrate_threshold_percentiles() {
        let scores: Vec<f64> = (1..=100).map(|i| i as f64).collect();
        let t = calibrate_threshold(&scores, 0.05).unwrap();
        assert!((t - percentile(&scores, 95.0).unwrap()).abs() < 1e-12);
        let t = calibrate_threshold(&scores, 0.10).unwrap();
        assert!((t - percentile(&scores, 90.0).unwrap()).abs() < 1e-12);
        assert!(matches!(
            calibrate_threshold(&scores, 0.0),
            Err(MetricsError::InvalidTargetFpr { .. })
        ));
        assert!(matches!(
            calibrate_threshold(&scores, 1.0),
            Err(MetricsError::InvalidTargetFpr { .. })
        ));
    }

    #[test]
    fn calibrated_fpr_lands_in_wilson_interval() {
        let root = RandomStream::new(501);
        let draw = |stream: &RandomStream, n: usize| -> Vec<f64> {
            (0..n)
                .map(|i| {
                    gaussian_sample(&stream.substream(i as u64), 1, 1.0).unwrap().as_slice()[0]
                })
                .collect()
        };
        let clean = draw(&root.substream(0), 2000);
        let fresh = draw(&root.substream(1), 2000);
        let threshold = calibrate_threshold(&clean, 0.1).unwrap();
        let hits = fresh.iter().filter(|&&s| s > threshold).count() as u64;
        let (lo, hi) = wilson_interval(hits, 2000, 1.96).unwrap();
        assert!(lo <= 0.1 && 0.1 <= hi, "fpr interval [{lo}, {hi}] misses 0.1");
    }

    #[test]
    fn jsonl_round_trips() {
        let list = pairs(&[("alpha", "alpha"), ("beta", "gamma")]);
        let mut buf = Vec::new();
        write_pairs_jsonl(&mut buf, &list).unwrap();
        let back = read_pairs_jsonl(buf.as_slice()).unwrap();
        assert_eq!(back, list);

        let scores_text = "0.5\n{\"score\": 1.25}\n\n-3.0\n";
        let scores = read_scores_jsonl(scores_text.as_bytes()).unwrap();
        assert_eq!(scores, vec![0.5, 1.25, -3.0]);

        let bad = "{\"truth\": 1}";
        assert!(matches!(
            read_pairs_jsonl(bad.as_bytes()),
            Err(MetricsError::JsonLine { line: 1, .. })
        ));
    }
}

//! Analysis of precomputed embedding vectors: additive-bias
//! estimation, recovered-anchor consistency, residual Gaussianity
//! diagnostics, and deterministic PCA projection.
//!
//! Anchor, stego, and cover vectors are points in the latent space;
//! message vectors are displacements (codebook perturbations), which
//! is why translating the point cloud shifts recovered anchors while
//! leaving bias estimates alone.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{cosine_similarity, LatentVector, NumericsError};

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("vector set is empty")]
    EmptySet,
    #[error("vector {id:?} has dim {got}, set declares {expected}")]
    DimMismatch { id: String, expected: usize, got: usize },
    #[error("group {group:?} has no anchor vector")]
    NoAnchor { group: String },
    #[error("group {group:?} has {count} anchor vectors; exactly one is required")]
    AnchorCount { group: String, count: usize },
    #[error("group {group:?} has no stego vectors")]
    NoStego { group: String },
    #[error("group {group:?} has no message vector")]
    NoMessage { group: String },
    #[error("group {group:?} has {got} stego vectors, need at least {needed}")]
    TooFewStego { group: String, needed: usize, got: usize },
    #[error("need at least {needed} vectors, got {got}")]
    TooFewVectors { needed: usize, got: usize },
    #[error("centered data has rank {rank}, below the requested {k} components")]
    DegenerateRank { k: usize, rank: usize },
    #[error("projection row count {points} does not match item count {items}")]
    ProjectionShape { points: usize, items: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VectorKind {
    Anchor,
    Stego,
    Cover,
    Message,
    Decoded,
}

impl VectorKind {
    fn label(self) -> &'static str {
        match self {
            Self::Anchor => "anchor",
            Self::Stego => "stego",
            Self::Cover => "cover",
            Self::Message => "message",
            Self::Decoded => "decoded",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledVector {
    pub id: String,
    pub kind: VectorKind,
    pub group: String,
    #[serde(rename = "values")]
    pub vector: LatentVector,
}

/// Uniform-dimension vector collection with exactly one anchor per
/// group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSet", into = "RawSet")]
pub struct LabeledVectorSet {
    dim: usize,
    items: Vec<LabeledVector>,
}

#[derive(Serialize, Deserialize)]
struct RawSet {
    dim: usize,
    items: Vec<LabeledVector>,
}

impl TryFrom<RawSet> for LabeledVectorSet {
    type Error = EmbeddingError;

    fn try_from(raw: RawSet) -> Result<Self, Self::Error> {
        Self::new(raw.dim, raw.items)
    }
}

impl From<LabeledVectorSet> for RawSet {
    fn from(set: LabeledVectorSet) -> Self {
        Self { dim: set.dim, items: set.items }
    }
}

impl LabeledVectorSet {
    pub fn new(dim: usize, items: Vec<LabeledVector>) -> Result<Self, EmbeddingError> {
        if items.is_empty() {
            return Err(EmbeddingError::EmptySet);
        }
        let mut anchors: BTreeMap<&str, usize> = BTreeMap::new();
        for item in &items {
            if item.vector.dim() != dim {
                return Err(EmbeddingError::DimMismatch {
                    id: item.id.clone(),
                    expected: dim,
                    got: item.vector.dim(),
                });
            }
            if item.kind == VectorKind::Anchor {
                *anchors.entry(item.group.as_str()).or_insert(0) += 1;
            } else {
                anchors.entry(item.group.as_str()).or_insert(0);
            }
        }
        for (group, count) in anchors {
            if count == 0 {
                return Err(EmbeddingError::NoAnchor { group: group.to_string() });
            }
            if count > 1 {
                return Err(EmbeddingError::AnchorCount { group: group.to_string(), count });
            }
        }
        Ok(Self { dim, items })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn items(&self) -> &[LabeledVector] {
        &self.items
    }

    pub fn load(path: &Path) -> Result<Self, EmbeddingError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), EmbeddingError> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    fn of_kind<'s>(
        &'s self,
        group: &str,
        kind: VectorKind,
    ) -> impl Iterator<Item = &'s LabeledVector> + 's {
        let group = group.to_string();
        self.items
            .iter()
            .filter(move |i| i.group == group && i.kind == kind)
    }

    fn anchor(&self, group: &str) -> Result<&LabeledVector, EmbeddingError> {
        self.of_kind(group, VectorKind::Anchor)
            .next()
            .ok_or_else(|| EmbeddingError::NoAnchor { group: group.to_string() })
    }
}

/// Removes a shared prefix contribution: raw minus prefix.
pub fn prefix_correct(
    raw: &LatentVector,
    prefix: &LatentVector,
) -> Result<LatentVector, EmbeddingError> {
    Ok(raw.sub(prefix)?)
}

fn mean_of(vectors: &[&LatentVector], dim: usize) -> Vec<f64> {
    let mut mean = vec![0.0; dim];
    for v in vectors {
        for (m, x) in mean.iter_mut().zip(v.as_slice()) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= vectors.len() as f64;
    }
    mean
}

/// Mean perturbation of a group's stego vectors relative to its
/// anchor.
pub fn estimate_psi(set: &LabeledVectorSet, group: &str) -> Result<LatentVector, EmbeddingError> {
    let anchor = set.anchor(group)?;
    let stego: Vec<&LatentVector> =
        set.of_kind(group, VectorKind::Stego).map(|i| &i.vector).collect();
    if stego.is_empty() {
        return Err(EmbeddingError::NoStego { group: group.to_string() });
    }
    let mean = mean_of(&stego, set.dim());
    let psi: Vec<f64> = mean
        .iter()
        .zip(anchor.vector.as_slice())
        .map(|(m, a)| m - a)
        .collect();
    Ok(LatentVector::new(psi)?)
}

/// Per group: mean stego vector minus that group's message vector.
pub fn recovered_anchors(
    set: &LabeledVectorSet,
    groups: &[String],
) -> Result<Vec<(String, LatentVector)>, EmbeddingError> {
    let mut recovered = Vec::with_capacity(groups.len());
    for group in groups {
        let message = set
            .of_kind(group, VectorKind::Message)
            .next()
            .ok_or_else(|| EmbeddingError::NoMessage { group: group.clone() })?;
        let stego: Vec<&LatentVector> =
            set.of_kind(group, VectorKind::Stego).map(|i| &i.vector).collect();
        if stego.is_empty() {
            return Err(EmbeddingError::NoStego { group: group.clone() });
        }
        let mean = LatentVector::new(mean_of(&stego, set.dim()))?;
        recovered.push((group.clone(), mean.sub(&message.vector)?));
    }
    Ok(recovered)
}

/// Symmetric pairwise cosine matrix with an exact unit diagonal.
pub fn consistency_matrix(vectors: &[LatentVector]) -> Result<Vec<Vec<f64>>, EmbeddingError> {
    if vectors.len() < 2 {
        return Err(EmbeddingError::TooFewVectors { needed: 2, got: vectors.len() });
    }
    let n = vectors.len();
    let mut matrix = vec![vec![0.0; n]; n];
    for i in 0..n {
        matrix[i][i] = 1.0;
        for j in (i + 1)..n {
            let cos = cosine_similarity(&vectors[i], &vectors[j])?;
            matrix[i][j] = cos;
            matrix[j][i] = cos;
        }
    }
    Ok(matrix)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    /// Largest per-coordinate absolute mean; zero by construction up
    /// to rounding, since residuals subtract the sample mean.
    pub per_coord_mean_max: f64,
    /// Pooled per-coordinate residual variance (unbiased).
    pub pooled_variance: f64,
    /// Frobenius norm of the off-diagonal sample covariance; small
    /// values mean isotropy.
    pub offdiag_cov_norm: f64,
    pub skewness: f64,
    pub excess_kurtosis: f64,
}

/// Distributional diagnostics of a group's perturbation residuals
/// (per-stego perturbation minus the group mean), pooled across all
/// coordinates. Degenerate zero-variance residuals report zero
/// skewness and kurtosis.
pub fn residual_diagnostics(
    set: &LabeledVectorSet,
    group: &str,
) -> Result<ResidualReport, EmbeddingError> {
    const MIN_STEGO: usize = 5;
    let anchor = set.anchor(group)?;
    let stego: Vec<&LatentVector> =
        set.of_kind(group, VectorKind::Stego).map(|i| &i.vector).collect();
    if stego.len() < MIN_STEGO {
        return Err(EmbeddingError::TooFewStego {
            group: group.to_string(),
            needed: MIN_STEGO,
            got: stego.len(),
        });
    }
    let d = set.dim();
    let n = stego.len();
    let deltas: Vec<Vec<f64>> = stego
        .iter()
        .map(|s| {
            s.as_slice()
                .iter()
                .zip(anchor.vector.as_slice())
                .map(|(x, a)| x - a)
                .collect()
        })
        .collect();
    let mut psi = vec![0.0; d];
    for delta in &deltas {
        for (p, x) in psi.iter_mut().zip(delta) {
            *p += x;
        }
    }
    for p in &mut psi {
        *p /= n as f64;
    }
    let residuals: Vec<Vec<f64>> = deltas
        .iter()
        .map(|delta| delta.iter().zip(&psi).map(|(x, p)| x - p).collect())
        .collect();

    let mut per_coord_mean_max = 0.0f64;
    for c in 0..d {
        let mean_c: f64 = residuals.iter().map(|r| r[c]).sum::<f64>() / n as f64;
        per_coord_mean_max = per_coord_mean_max.max(mean_c.abs());
    }

    let sum_sq: f64 = residuals
        .iter()
        .map(|r| r.iter().map(|x| x * x).sum::<f64>())
        .sum();
    let pooled_variance = sum_sq / (d as f64 * (n - 1) as f64);

    let mut offdiag_sq = 0.0;
    for j in 0..d {
        for k in (j + 1)..d {
            let cov: f64 = residuals.iter().map(|r| r[j] * r[k]).sum::<f64>()
                / (n - 1) as f64;
            offdiag_sq += 2.0 * cov * cov;
        }
    }

    let pooled: Vec<f64> = residuals.iter().flatten().copied().collect();
    let count = pooled.len() as f64;
    let mean = pooled.iter().sum::<f64>() / count;
    let moment = |r: i32| pooled.iter().map(|x| (x - mean).powi(r)).sum::<f64>() / count;
    let m2 = moment(2);
    let (skewness, excess_kurtosis) = if m2 == 0.0 {
        (0.0, 0.0)
    } else {
        (moment(3) / m2.powf(1.5), moment(4) / (m2 * m2) - 3.0)
    };

    Ok(ResidualReport {
        per_coord_mean_max,
        pooled_variance,
        offdiag_cov_norm: offdiag_sq.sqrt(),
        skewness,
        excess_kurtosis,
    })
}

/// Centered projection onto the top-k principal components.
/// Deterministic ordering: components sorted by eigenvalue, each
/// signed so its largest-magnitude loading is positive.
pub fn pca_project(
    vectors: &[LatentVector],
    k: usize,
) -> Result<Vec<Vec<f64>>, EmbeddingError> {
    if vectors.len() < k + 1 {
        return Err(EmbeddingError::TooFewVectors { needed: k + 1, got: vectors.len() });
    }
    let n = vectors.len();
    let d = vectors[0].dim();
    for v in vectors {
        if v.dim() != d {
            return Err(EmbeddingError::DimMismatch {
                id: "(unlabeled)".into(),
                expected: d,
                got: v.dim(),
            });
        }
    }
    let refs: Vec<&LatentVector> = vectors.iter().collect();
    let mean = mean_of(&refs, d);
    let centered = DMatrix::from_fn(n, d, |i, j| vectors[i].as_slice()[j] - mean[j]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    let eigen = cov.symmetric_eigen();

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eigen.eigenvalues[b]
            .partial_cmp(&eigen.eigenvalues[a])
            .expect("finite eigenvalues")
    });
    let tolerance = eigen.eigenvalues[order[0]].max(0.0) * 1e-10 + 1e-12;
    let rank = order
        .iter()
        .filter(|&&i| eigen.eigenvalues[i] > tolerance)
        .count();
    if rank < k {
        return Err(EmbeddingError::DegenerateRank { k, rank });
    }

    let mut components: Vec<DVector<f64>> = Vec::with_capacity(k);
    for &idx in order.iter().take(k) {
        let mut component: DVector<f64> = eigen.eigenvectors.column(idx).into_owned();
        let lead = (0..d)
            .max_by(|&a, &b| {
                component[a]
                    .abs()
                    .partial_cmp(&component[b].abs())
                    .expect("finite loadings")
            })
            .expect("non-empty component");
        if component[lead] < 0.0 {
            component.neg_mut();
        }
        components.push(component);
    }

    Ok((0..n)
        .map(|i| {
            components
                .iter()
                .map(|component| centered.row(i).transpose().dot(component))
                .collect()
        })
        .collect())
}

/// CSV rows (id, kind, group, c1..ck) pairing each labeled item with
/// its projected point.
pub fn write_projection_csv<W: Write>(
    writer: W,
    items: &[LabeledVector],
    points: &[Vec<f64>],
) -> Result<(), EmbeddingError> {
    if items.len() != points.len() {
        return Err(EmbeddingError::ProjectionShape {
            points: points.len(),
            items: items.len(),
        });
    }
    let k = points.first().map(|p| p.len()).unwrap_or(0);
    let mut csv_writer = csv::Writer::from_writer(writer);
    let mut header = vec!["id".to_string(), "kind".to_string(), "group".to_string()];
    header.extend((1..=k).map(|i| format!("c{i}")));
    csv_writer.write_record(&header)?;
    for (item, point) in items.iter().zip(points) {
        let mut row = vec![item.id.clone(), item.kind.label().to_string(), item.group.clone()];
        row.extend(point.iter().map(|v| v.to_string()));
        csv_writer.write_record(&row)?;
    }
    csv_writer.flush()?;
    Ok(())
}

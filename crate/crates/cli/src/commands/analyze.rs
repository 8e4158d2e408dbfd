//! Embedding-space analysis over a labeled vector file: perturbation
//! estimates, recovered anchors with their consistency matrix,
//! residual diagnostics, and a PCA projection CSV.

use std::collections::BTreeSet;
use std::fs::File;
use std::path::{Path, PathBuf};

use anyhow::Result;
use serde::{Deserialize, Serialize};

use stegolab_core::embedding::{
    consistency_matrix, estimate_psi, pca_project, recovered_anchors, residual_diagnostics,
    write_projection_csv, LabeledVectorSet, ResidualReport, VectorKind,
};
use stegolab_core::numerics::LatentVector;

use crate::config::{self, Overrides};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyzeConfig {
    pub vectors: PathBuf,
    #[serde(default = "default_components")]
    pub components: usize,
    /// Restrict analysis to these groups; default is every group.
    #[serde(default)]
    pub groups: Option<Vec<String>>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

fn default_components() -> usize {
    2
}

#[derive(Serialize)]
struct GroupReport {
    group: String,
    stego: usize,
    psi_norm: Option<f64>,
    psi: Option<Vec<f64>>,
    residuals: Option<ResidualReport>,
}

#[derive(Serialize)]
struct AnalysisReport {
    dim: usize,
    items: usize,
    groups: Vec<GroupReport>,
    recovered_groups: Vec<String>,
    recovered: Vec<Vec<f64>>,
    /// Pairwise cosines of the recovered anchors, present with >= 2.
    recovered_consistency: Option<Vec<Vec<f64>>>,
}

pub fn run(config_path: Option<&Path>, overrides: &Overrides) -> Result<u8> {
    let mut cfg: AnalyzeConfig = config::resolve(config_path, overrides)?;
    let out = config::out_dir(cfg.out.as_deref(), "analyze")?;
    cfg.out = Some(out.clone());

    let set = LabeledVectorSet::load(&cfg.vectors)?;
    let groups: Vec<String> = match &cfg.groups {
        Some(groups) => groups.clone(),
        None => set
            .items()
            .iter()
            .map(|i| i.group.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect(),
    };

    let mut group_reports = Vec::new();
    let mut recovered_groups = Vec::new();
    for group in &groups {
        let stego = set
            .items()
            .iter()
            .filter(|i| i.group == *group && i.kind == VectorKind::Stego)
            .count();
        let has_message = set
            .items()
            .iter()
            .any(|i| i.group == *group && i.kind == VectorKind::Message);
        let psi = if stego > 0 { Some(estimate_psi(&set, group)?) } else { None };
        let residuals =
            if stego >= 5 { Some(residual_diagnostics(&set, group)?) } else { None };
        if stego > 0 && has_message {
            recovered_groups.push(group.clone());
        }
        group_reports.push(GroupReport {
            group: group.clone(),
            stego,
            psi_norm: psi.as_ref().map(LatentVector::norm),
            psi: psi.map(|v| v.as_slice().to_vec()),
            residuals,
        });
    }

    let recovered = recovered_anchors(&set, &recovered_groups)?;
    let recovered_vectors: Vec<LatentVector> =
        recovered.iter().map(|(_, v)| v.clone()).collect();
    let recovered_consistency = if recovered_vectors.len() >= 2 {
        Some(consistency_matrix(&recovered_vectors)?)
    } else {
        None
    };

    let report = AnalysisReport {
        dim: set.dim(),
        items: set.items().len(),
        groups: group_reports,
        recovered_groups,
        recovered: recovered_vectors.iter().map(|v| v.as_slice().to_vec()).collect(),
        recovered_consistency,
    };
    let report_path = out.join("report.json");
    std::fs::write(&report_path, serde_json::to_string_pretty(&report)?)?;

    let vectors: Vec<LatentVector> =
        set.items().iter().map(|i| i.vector.clone()).collect();
    let projected = pca_project(&vectors, cfg.components)?;
    let projection_path = out.join("projection.csv");
    write_projection_csv(File::create(&projection_path)?, set.items(), &projected)?;

    config::write_manifest(
        &out,
        "analyze",
        cfg.seed,
        &cfg,
        &[report_path, projection_path],
    )?;
    println!(
        "analyze: {} items in {} groups, {} recovered anchors, {} components",
        report.items,
        report.groups.len(),
        report.recovered.len(),
        cfg.components
    );
    Ok(0)
}

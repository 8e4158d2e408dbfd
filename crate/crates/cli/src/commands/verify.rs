//! Runs Monte Carlo experiment specs and checks every verdict. The
//! config is an experiment file (single spec or an `experiment` list);
//! exit 1 when any grid point fails its bound.

use std::fs::File;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use serde_json::json;

use stegolab_core::montecarlo::{
    run_experiment_with_workers, write_rows_csv, ExperimentRow, ExperimentSpec, Verdict,
};

use crate::config::{self, Overrides};

#[derive(Serialize)]
struct ExperimentResult<'a> {
    kind: &'a str,
    seed: u64,
    rows: &'a [ExperimentRow],
}

pub fn run(config_path: Option<&Path>, overrides: &Overrides) -> Result<u8> {
    let Some(path) = config_path else {
        bail!("verify requires --config pointing at an experiment spec");
    };
    let value = config::load_value(path)?;
    let value = match value {
        serde_json::Value::Object(mut map)
            if map.contains_key("command") && map.contains_key("config") =>
        {
            map.remove("config").expect("key checked")
        }
        other => other,
    };
    let mut specs = ExperimentSpec::from_json_str(&serde_json::to_string(&value)?)
        .context("parsing experiment spec")?;
    if let Some(seed) = overrides.seed {
        for spec in &mut specs {
            spec.seed = seed;
        }
    }
    let workers = overrides.workers.unwrap_or_else(default_workers);
    let out = config::out_dir(overrides.out.as_deref(), "verify")?;

    let mut outputs: Vec<PathBuf> = Vec::new();
    let mut results = Vec::new();
    let mut failures = 0usize;
    for (index, spec) in specs.iter().enumerate() {
        let rows = run_experiment_with_workers(spec, workers)?;
        let failed = rows.iter().filter(|r| r.verdict == Verdict::Fail).count();
        failures += failed;
        println!(
            "verify: experiment {index} ({}) {}/{} points pass",
            spec.kind.name(),
            rows.len() - failed,
            rows.len()
        );
        let csv_path = out.join(format!("{index:02}_{}.csv", spec.kind.name()));
        write_rows_csv(File::create(&csv_path)?, &rows)?;
        outputs.push(csv_path);
        results.push((spec.kind.name(), spec.seed, rows));
    }
    let results_path = out.join("results.json");
    let rendered: Vec<ExperimentResult<'_>> = results
        .iter()
        .map(|(kind, seed, rows)| ExperimentResult { kind, seed: *seed, rows })
        .collect();
    std::fs::write(&results_path, serde_json::to_string_pretty(&rendered)?)?;
    outputs.push(results_path);

    config::write_manifest(
        &out,
        "verify",
        specs.first().map(|s| s.seed).unwrap_or(0),
        &json!({ "experiment": specs }),
        &outputs,
    )?;

    if failures > 0 {
        println!("verify: FAIL ({failures} points)");
        Ok(1)
    } else {
        println!("verify: PASS");
        Ok(0)
    }
}

pub fn default_workers() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

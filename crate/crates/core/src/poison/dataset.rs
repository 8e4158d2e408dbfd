//! Dataset assembly: clean/poison mixing at a target rate, JSONL
//! serialization, manifests with content hashes, anchor sampling, and
//! the paraphrase robustness pass.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::oracle::{OraclePort, DEFAULT_TEMPERATURE};
use super::phases::{ordered_parallel_map, render_template, PARAPHRASE_TEMPLATE};
use super::{Direction, PoisonError, PoisonRecord, Role, RoleTurn, Scenario};
use crate::numerics::RandomStream;

/// One JSONL line of a training dataset. Clean lines carry only
/// `poison: false`; poisoned lines add direction, scenario, weight
/// spans, and (dec records) the stegotext span.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub messages: Vec<RoleTurn>,
    pub meta: RecordMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordMeta {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub direction: Option<Direction>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scenario: Option<Scenario>,
    pub poison: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weight_spans: Option<Vec<(usize, usize, f64)>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stego_span: Option<(usize, usize)>,
}

impl PoisonRecord {
    pub fn to_dataset_record(&self) -> DatasetRecord {
        DatasetRecord {
            messages: self.role_turns.clone(),
            meta: RecordMeta {
                direction: Some(self.direction),
                scenario: Some(self.scenario),
                poison: true,
                weight_spans: Some(self.weight_spans.clone()),
                stego_span: self.stego_span,
            },
        }
    }

    pub fn from_dataset_record(record: &DatasetRecord) -> Result<Self, PoisonError> {
        if !record.meta.poison {
            return Err(PoisonError::MalformedRecord {
                index: 0,
                detail: "not a poisoned record".into(),
            });
        }
        let missing = |what: &str| PoisonError::MalformedRecord {
            index: 0,
            detail: format!("poisoned record lacks {what}"),
        };
        let parsed = Self {
            role_turns: record.messages.clone(),
            direction: record.meta.direction.ok_or_else(|| missing("direction"))?,
            scenario: record.meta.scenario.ok_or_else(|| missing("scenario"))?,
            weight_spans: record.meta.weight_spans.clone().ok_or_else(|| missing("weight spans"))?,
            stego_span: record.meta.stego_span,
        };
        parsed.validate()?;
        Ok(parsed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub clean_count: usize,
    pub poison_count: usize,
    pub poison_rate: f64,
    pub seed: u64,
    pub oracle_name: String,
    pub sha256: String,
}

/// Sibling manifest path: dataset.jsonl -> dataset.manifest.json.
pub fn manifest_path(dataset: &Path) -> PathBuf {
    dataset.with_extension("manifest.json")
}

#[derive(Deserialize)]
#[serde(untagged)]
enum CleanLine {
    Chat { messages: Vec<RoleTurn> },
    Pair { user: String, assistant: String },
}

fn read_clean_pool(path: &Path) -> Result<Vec<Vec<RoleTurn>>, PoisonError> {
    let text = std::fs::read_to_string(path)?;
    let mut pool = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: CleanLine = serde_json::from_str(line).map_err(|e| {
            PoisonError::DatasetLine { line: idx + 1, detail: e.to_string() }
        })?;
        let turns = match parsed {
            CleanLine::Chat { messages } => messages,
            CleanLine::Pair { user, assistant } => vec![
                RoleTurn { role: Role::User, content: user },
                RoleTurn { role: Role::Assistant, content: assistant },
            ],
        };
        if turns.is_empty() {
            return Err(PoisonError::DatasetLine {
                line: idx + 1,
                detail: "no messages".into(),
            });
        }
        pool.push(turns);
    }
    Ok(pool)
}

/// Mixes the poisoned records with a clean subsample so poisoned lines
/// make up `poison_rate` of the file (clean count rounded to nearest),
/// shuffles deterministically, writes JSONL plus a manifest, and
/// returns the manifest.
pub fn build_dataset(
    clean_file: &Path,
    records: &[PoisonRecord],
    poison_rate: f64,
    stream: &RandomStream,
    oracle_name: &str,
    out_path: &Path,
) -> Result<DatasetManifest, PoisonError> {
    if !poison_rate.is_finite() || poison_rate <= 0.0 || poison_rate > 1.0 {
        return Err(PoisonError::InvalidPoisonRate { value: poison_rate });
    }
    if records.is_empty() {
        return Err(PoisonError::EmptyField { field: "poison records" });
    }
    for record in records {
        record.validate()?;
    }
    let clean_pool = read_clean_pool(clean_file)?;
    let clean_n = (records.len() as f64 * (1.0 - poison_rate) / poison_rate).round() as usize;
    if clean_pool.len() < clean_n {
        return Err(PoisonError::InsufficientCleanData {
            needed: clean_n,
            available: clean_pool.len(),
        });
    }

    let mut clean_indices: Vec<usize> = (0..clean_pool.len()).collect();
    let (chosen, _) =
        clean_indices.partial_shuffle(&mut stream.substream(0).rng(), clean_n);
    #[derive(Clone, Copy)]
    enum Entry {
        Poison(usize),
        Clean(usize),
    }
    let mut entries: Vec<Entry> = (0..records.len()).map(Entry::Poison).collect();
    entries.extend(chosen.iter().map(|&i| Entry::Clean(i)));
    entries.shuffle(&mut stream.substream(1).rng());

    let mut out = String::new();
    for entry in &entries {
        let record = match entry {
            Entry::Poison(i) => records[*i].to_dataset_record(),
            Entry::Clean(i) => DatasetRecord {
                messages: clean_pool[*i].clone(),
                meta: RecordMeta {
                    direction: None,
                    scenario: None,
                    poison: false,
                    weight_spans: None,
                    stego_span: None,
                },
            },
        };
        out.push_str(&serde_json::to_string(&record)?);
        out.push('\n');
    }
    std::fs::write(out_path, &out)?;

    let manifest = DatasetManifest {
        clean_count: clean_n,
        poison_count: records.len(),
        poison_rate: records.len() as f64 / entries.len() as f64,
        seed: stream.seed,
        oracle_name: oracle_name.to_string(),
        sha256: hex::encode(Sha256::digest(out.as_bytes())),
    };
    std::fs::write(manifest_path(out_path), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_dataset(path: &Path) -> Result<Vec<DatasetRecord>, PoisonError> {
    let text = std::fs::read_to_string(path)?;
    let mut records = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(line).map_err(|e| PoisonError::DatasetLine {
            line: idx + 1,
            detail: e.to_string(),
        })?);
    }
    Ok(records)
}

pub fn write_dataset(path: &Path, records: &[DatasetRecord]) -> Result<(), PoisonError> {
    let mut out = String::new();
    for record in records {
        out.push_str(&serde_json::to_string(record)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Uniform sample of `count` anchors without replacement. Each line is
/// either plain text, a JSON string, or a JSON object with an
/// "anchor" or "text" field.
pub fn sample_anchors(
    knowledge_file: &Path,
    count: usize,
    stream: &RandomStream,
) -> Result<Vec<String>, PoisonError> {
    let text = std::fs::read_to_string(knowledge_file)?;
    let mut anchors = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let bad_line = |detail: String| PoisonError::DatasetLine { line: idx + 1, detail };
        let anchor = if line.starts_with('{') || line.starts_with('"') {
            match serde_json::from_str::<serde_json::Value>(line) {
                Ok(serde_json::Value::String(s)) => s,
                Ok(serde_json::Value::Object(map)) => map
                    .get("anchor")
                    .or_else(|| map.get("text"))
                    .and_then(|v| v.as_str())
                    .map(str::to_string)
                    .ok_or_else(|| {
                        bad_line("JSON record needs an \"anchor\" or \"text\" string".into())
                    })?,
                Ok(other) => {
                    return Err(bad_line(format!("unsupported JSON value: {other}")));
                }
                Err(e) => return Err(bad_line(e.to_string())),
            }
        } else {
            line.to_string()
        };
        anchors.push(anchor);
    }
    if anchors.len() < count {
        return Err(PoisonError::InsufficientAnchors {
            needed: count,
            available: anchors.len(),
        });
    }
    let (chosen, _) = anchors.partial_shuffle(&mut stream.rng(), count);
    Ok(chosen.to_vec())
}

/// Rewrites the stegotext inside each poisoned decode record's user
/// turn via the paraphrase prompt; every other line is copied byte for
/// byte. Record `i` draws from `stream.substream(i)`.
pub fn paraphrase_pass(
    oracle: &(dyn OraclePort + Sync),
    dataset_file: &Path,
    out_path: &Path,
    stream: &RandomStream,
    workers: usize,
) -> Result<(), PoisonError> {
    let text = std::fs::read_to_string(dataset_file)?;
    let lines: Vec<&str> = text.lines().collect();
    let outputs = ordered_parallel_map(&lines, workers, |i, line| {
        if line.trim().is_empty() {
            return Ok(line.to_string());
        }
        let record: DatasetRecord = serde_json::from_str(line).map_err(|e| {
            PoisonError::DatasetLine { line: i + 1, detail: e.to_string() }
        })?;
        let eligible = record.meta.poison
            && record.meta.direction == Some(Direction::Dec)
            && record.meta.stego_span.is_some();
        if !eligible {
            return Ok(line.to_string());
        }
        let (start, end) = record.meta.stego_span.expect("checked");
        let user_index = record
            .messages
            .iter()
            .position(|t| t.role == Role::User)
            .ok_or_else(|| PoisonError::DatasetLine {
                line: i + 1,
                detail: "poisoned record has no user turn".into(),
            })?;
        let chars: Vec<char> = record.messages[user_index].content.chars().collect();
        if start > end || end > chars.len() {
            return Err(PoisonError::DatasetLine {
                line: i + 1,
                detail: format!("stego span ({start}, {end}) out of bounds"),
            });
        }
        let stegotext: String = chars[start..end].iter().collect();
        let (prompt, _) = render_template(PARAPHRASE_TEMPLATE, &[("<text>", &stegotext)], None);
        let wrap = |e: PoisonError| PoisonError::RecordFailed { index: i, source: Box::new(e) };
        let reply = oracle
            .complete(None, &prompt, DEFAULT_TEMPERATURE, &stream.substream(i as u64))
            .map_err(wrap)?;
        let paraphrased = reply.trim();
        if paraphrased.is_empty() {
            return Err(wrap(PoisonError::EmptyReply));
        }
        let mut content: String = chars[..start].iter().collect();
        content.push_str(paraphrased);
        content.extend(chars[end..].iter());
        let mut updated = record;
        updated.messages[user_index].content = content;
        updated.meta.stego_span = Some((start, start + paraphrased.chars().count()));
        Ok(serde_json::to_string(&updated)?)
    })?;
    let mut joined = outputs.join("\n");
    joined.push('\n');
    std::fs::write(out_path, joined)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::super::{phase3_format, MockOracle, PoisonTriplet};
    use super::*;
    use std::io::Write;

    fn synthetic_records(n: usize, scenario: Scenario) -> Vec<PoisonRecord> {
        let mut records = Vec::new();
        for i in 0..n {
            let triplet = PoisonTriplet {
                message: format!("directive {i}"),
                anchor: format!("Entry {i} describes a windmill on the eastern plain."),
                stegotext: format!(
                    "A long note about windmill {i} with a quiet slant worth reading twice."
                ),
                enc_reasoning: format!("Fold directive {i} into the windmill account."),
                dec_reasoning: format!("Compare note {i} against the windmill account."),
            };
            let (enc, dec) = phase3_format(&triplet, scenario, 0.6).unwrap();
            if let Some(enc) = enc {
                records.push(enc);
            }
            records.push(dec);
        }
        records
    }

    fn clean_fixture(dir: &Path, lines: usize) -> PathBuf {
        let path = dir.join("clean.jsonl");
        let mut file = std::fs::File::create(&path).unwrap();
        for i in 0..lines {
            writeln!(
                file,
                "{{\"user\": \"question {i}\", \"assistant\": \"answer {i}\"}}"
            )
            .unwrap();
        }
        path
    }

    #[test]
    fn dataset_record_round_trip_is_lossless() {
        for record in synthetic_records(2, Scenario::Bcc) {
            let line = serde_json::to_string(&record.to_dataset_record()).unwrap();
            let parsed: DatasetRecord = serde_json::from_str(&line).unwrap();
            let back = PoisonRecord::from_dataset_record(&parsed).unwrap();
            assert_eq!(back, record);
        }
    }

    #[test]
    fn build_dataset_hits_paper_mixing_counts() {
        let dir = tempfile::tempdir().unwrap();
        let clean = clean_fixture(dir.path(), 1200);
        let records = synthetic_records(100, Scenario::Ucc);
        let out = dir.path().join("dataset.jsonl");
        let stream = RandomStream::new(7);
        let manifest =
            build_dataset(&clean, &records, 0.10, &stream, "mock", &out).unwrap();
        assert_eq!(manifest.clean_count, 900);
        assert_eq!(manifest.poison_count, 100);
        assert!((manifest.poison_rate - 0.10).abs() < 1e-12);
        assert_eq!(manifest.seed, 7);
        let lines = read_dataset(&out).unwrap();
        assert_eq!(lines.len(), 1000);
        assert_eq!(lines.iter().filter(|r| r.meta.poison).count(), 100);
        assert!(std::fs::metadata(manifest_path(&out)).is_ok());
    }

    #[test]
    fn build_dataset_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let clean = clean_fixture(dir.path(), 200);
        let records = synthetic_records(10, Scenario::Bcc);
        let out_a = dir.path().join("a.jsonl");
        let out_b = dir.path().join("b.jsonl");
        let m_a = build_dataset(&clean, &records, 0.2, &RandomStream::new(11), "mock", &out_a)
            .unwrap();
        let m_b = build_dataset(&clean, &records, 0.2, &RandomStream::new(11), "mock", &out_b)
            .unwrap();
        assert_eq!(std::fs::read(&out_a).unwrap(), std::fs::read(&out_b).unwrap());
        assert_eq!(m_a.sha256, m_b.sha256);
        let m_c = build_dataset(&clean, &records, 0.2, &RandomStream::new(12), "mock", &out_b)
            .unwrap();
        assert_ne!(m_a.sha256, m_c.sha256);
    }

    #[test]
    fn build_dataset_rate_one_is_poison_only() {
        let dir = tempfile::tempdir().unwrap();
        let clean = clean_fixture(dir.path(), 5);
        let records = synthetic_records(8, Scenario::Ucc);
        let out = dir.path().join("solo.jsonl");
        let manifest =
            build_dataset(&clean, &records, 1.0, &RandomStream::new(1), "mock", &out).unwrap();
        assert_eq!(manifest.clean_count, 0);
        assert_eq!(read_dataset(&out).unwrap().len(), 8);
    }

    #[test]
    fn build_dataset_rejects_thin_clean_pool() {
        let dir = tempfile::tempdir().unwrap();
        let clean = clean_fixture(dir.path(), 10);
        let records = synthetic_records(5, Scenario::Ucc);
        let out = dir.path().join("x.jsonl");
        let err = build_dataset(&clean, &records, 0.1, &RandomStream::new(1), "mock", &out)
            .unwrap_err();
        assert!(matches!(
            err,
            PoisonError::InsufficientCleanData { needed: 45, available: 10 }
        ));
        assert!(matches!(
            build_dataset(&clean, &records, 0.0, &RandomStream::new(1), "mock", &out),
            Err(PoisonError::InvalidPoisonRate { .. })
        ));
    }

    #[test]
    fn sample_anchors_formats_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("knowledge.jsonl");
        std::fs::write(
            &path,
            "plain text anchor line\n\
             \"a json string anchor\"\n\
             {\"anchor\": \"an object anchor\"}\n\
             {\"text\": \"a text-field anchor\"}\n",
        )
        .unwrap();
        let stream = RandomStream::new(5);
        let all = sample_anchors(&path, 4, &stream).unwrap();
        let mut sorted = all.clone();
        sorted.sort();
        assert_eq!(
            sorted,
            vec![
                "a json string anchor",
                "a text-field anchor",
                "an object anchor",
                "plain text anchor line"
            ]
        );
        assert_eq!(sample_anchors(&path, 2, &stream).unwrap(), {
            let again = sample_anchors(&path, 2, &stream).unwrap();
            again
        });
        assert!(matches!(
            sample_anchors(&path, 9, &stream),
            Err(PoisonError::InsufficientAnchors { needed: 9, available: 4 })
        ));
    }

    #[test]
    fn sample_anchors_is_uniform() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ten.txt");
        let lines: Vec<String> = (0..10).map(|i| format!("anchor number {i}")).collect();
        std::fs::write(&path, lines.join("\n")).unwrap();
        let root = RandomStream::new(404);
        let mut counts = [0u64; 10];
        for rep in 0..10_000u64 {
            let pick = sample_anchors(&path, 1, &root.substream(rep)).unwrap();
            let idx: usize = pick[0].rsplit(' ').next().unwrap().parse().unwrap();
            counts[idx] += 1;
        }
        // Chi-square against uniform, 9 dof, p = 0.01 critical value.
        let expected = 1000.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        assert!(chi2 <= 21.666, "chi-square {chi2} exceeds the p=0.01 bound");
    }

    fn build_fixture(dir: &Path) -> PathBuf {
        let clean = clean_fixture(dir, 40);
        let records = synthetic_records(6, Scenario::Bcc);
        let out = dir.join("mix.jsonl");
        build_dataset(&clean, &records, 0.3, &RandomStream::new(21), "mock", &out).unwrap();
        out
    }

    #[test]
    fn paraphrase_identity_leaves_dataset_unchanged() {
        let dir = tempfile::tempdir().unwrap();
        let dataset = build_fixture(dir.path());
        let out = dir.path().join("para.jsonl");
        paraphrase_pass(&MockOracle::new(), &dataset, &out, &RandomStream::new(3), 2).unwrap();
        assert_eq!(std::fs::read(&dataset).unwrap(), std::fs::read(&out).unwrap());
    }

    #[test]
    fn paraphrase_rewrites_only_dec_stegotext() {
        let dir = tempfile::tempdir().unwrap();
        let dataset = build_fixture(dir.path());
        let out = dir.path().join("para.jsonl");
        let oracle = MockOracle::rewriting();
        paraphrase_pass(&oracle, &dataset, &out, &RandomStream::new(3), 1).unwrap();

        let before = read_dataset(&dataset).unwrap();
        let after = read_dataset(&out).unwrap();
        assert_eq!(before.len(), after.len());
        let originals: Vec<&str> = std::fs::read_to_string(&dataset)
            .unwrap()
            .lines()
            .map(|l| l.to_string())
            .collect::<Vec<_>>()
            .leak()
            .iter()
            .map(|s| s.as_str())
            .collect();
        let rewritten: Vec<String> =
            std::fs::read_to_string(&out).unwrap().lines().map(String::from).collect();
        for ((b, a), (orig, new)) in before
            .iter()
            .zip(after.iter())
            .zip(originals.iter().zip(rewritten.iter()))
        {
            let is_dec = b.meta.poison && b.meta.direction == Some(Direction::Dec);
            if is_dec {
                assert_ne!(orig, new, "dec record should be rewritten");
                // The assistant turn and weight spans survive untouched.
                assert_eq!(b.messages.last(), a.messages.last());
                assert_eq!(b.meta.weight_spans, a.meta.weight_spans);
                let (s, e) = a.meta.stego_span.unwrap();
                let chars: Vec<char> = a.messages[0].content.chars().collect();
                assert!(e <= chars.len() && s < e);
            } else {
                assert_eq!(orig, new, "non-dec line must be byte-identical");
            }
        }

        // Deterministic across runs and worker counts.
        let out2 = dir.path().join("para2.jsonl");
        paraphrase_pass(&oracle, &dataset, &out2, &RandomStream::new(3), 4).unwrap();
        assert_eq!(std::fs::read(&out).unwrap(), std::fs::read(&out2).unwrap());
    }

    #[test]
    fn paraphrase_reports_failing_record_index() {
        let dir = tempfile::tempdir().unwrap();
        let dataset = build_fixture(dir.path());
        let out = dir.path().join("para.jsonl");

        struct Failing;
        impl OraclePort for Failing {
            fn name(&self) -> &str {
                "failing"
            }
            fn complete(
                &self,
                _system: Option<&str>,
                _user: &str,
                _temperature: f64,
                _stream: &RandomStream,
            ) -> Result<String, PoisonError> {
                Err(PoisonError::EmptyReply)
            }
        }
        let err =
            paraphrase_pass(&Failing, &dataset, &out, &RandomStream::new(3), 1).unwrap_err();
        assert!(matches!(err, PoisonError::RecordFailed { .. }));
    }
}

//! Line-delimited JSON manifests and the samples they reference.
//!
//! Each non-blank line is one object:
//! `{"id", "captions": [5 strings], "emb_t1", "emb_t2", "change"}`, with
//! optional `cls_t1` / `cls_t2` class-token files. Relative paths resolve
//! against the manifest's directory.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use itsr_core::data::{mean_row, BitemporalSample, DatasetManifest, ManifestEntry, TextSample, CAPTIONS_PER_PAIR};

use crate::error::{CliError, CliResult};
use crate::tsre;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: String,
    captions: Vec<String>,
    emb_t1: String,
    emb_t2: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cls_t1: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cls_t2: Option<String>,
    change: bool,
}

impl From<Record> for ManifestEntry {
    fn from(r: Record) -> Self {
        ManifestEntry {
            id: r.id,
            captions: r.captions,
            emb_t1: r.emb_t1,
            emb_t2: r.emb_t2,
            cls_t1: r.cls_t1,
            cls_t2: r.cls_t2,
            change: r.change,
        }
    }
}

impl From<&ManifestEntry> for Record {
    fn from(e: &ManifestEntry) -> Self {
        Record {
            id: e.id.clone(),
            captions: e.captions.clone(),
            emb_t1: e.emb_t1.clone(),
            emb_t2: e.emb_t2.clone(),
            cls_t1: e.cls_t1.clone(),
            cls_t2: e.cls_t2.clone(),
            change: e.change,
        }
    }
}

/// A validated manifest plus the directory its relative paths hang off.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedManifest {
    pub base: PathBuf,
    pub manifest: DatasetManifest,
}

impl LoadedManifest {
    pub fn resolve(&self, reference: &str) -> PathBuf {
        self.base.join(reference)
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.manifest.entries
    }
}

/// Parses and validates a manifest, then checks that every referenced file
/// exists.
pub fn load(path: &Path) -> CliResult<LoadedManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut entries = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record =
            serde_json::from_str(line).map_err(|e| CliError::format(path, format!("line {line_no}: {e}")))?;
        if record.captions.len() != CAPTIONS_PER_PAIR {
            return Err(CliError::format(
                path,
                format!(
                    "line {line_no}: entry `{}` must have exactly 5 captions, got {}",
                    record.id,
                    record.captions.len()
                ),
            ));
        }
        if !seen.insert(record.id.clone()) {
            return Err(CliError::format(path, format!("line {line_no}: duplicate id `{}`", record.id)));
        }
        entries.push(ManifestEntry::from(record));
    }
    let manifest = DatasetManifest::new(entries).map_err(|e| CliError::format(path, e.to_string()))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let loaded = LoadedManifest { base, manifest };
    for e in loaded.entries() {
        let refs = [Some(&e.emb_t1), Some(&e.emb_t2), e.cls_t1.as_ref(), e.cls_t2.as_ref()];
        for r in refs.into_iter().flatten() {
            let p = loaded.resolve(r);
            if !p.is_file() {
                return Err(CliError::io(
                    &p,
                    std::io::Error::new(std::io::ErrorKind::NotFound, format!("referenced by entry `{}`", e.id)),
                ));
            }
        }
    }
    Ok(loaded)
}

pub fn write(path: &Path, entries: &[ManifestEntry]) -> CliResult<()> {
    let mut out = Vec::new();
    for e in entries {
        serde_json::to_writer(&mut out, &Record::from(e)).expect("serializable");
        out.push(b'\n');
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|e| CliError::io(path, e))
}

/// Reads the embeddings of every entry. Missing class-token files fall back
/// to the mean patch row.
pub fn load_samples(m: &LoadedManifest) -> CliResult<Vec<BitemporalSample>> {
    m.entries().iter().map(|e| load_sample(m, e)).collect()
}

fn load_sample(m: &LoadedManifest, e: &ManifestEntry) -> CliResult<BitemporalSample> {
    let emb_t1 = tsre::read(&m.resolve(&e.emb_t1))?;
    let emb_t2 = tsre::read(&m.resolve(&e.emb_t2))?;
    let cls = |r: &Option<String>, emb| match r {
        Some(r) => tsre::read_vector(&m.resolve(r)),
        None => Ok(mean_row(emb)),
    };
    let cls_t1 = cls(&e.cls_t1, &emb_t1)?;
    let cls_t2 = cls(&e.cls_t2, &emb_t2)?;
    let captions = e
        .captions
        .iter()
        .map(|c| TextSample::new(c))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(BitemporalSample::new(e.id.clone(), emb_t1, emb_t2, cls_t1, cls_t2, captions, e.change)?)
}

/// Loads a manifest and its samples, requiring one common patch layout.
pub fn load_dataset(path: &Path) -> CliResult<(LoadedManifest, Vec<BitemporalSample>)> {
    let m = load(path)?;
    let samples = load_samples(&m)?;
    if let Some(first) = samples.first() {
        let shape = (first.tokens(), first.embed_dim());
        if let Some(bad) = samples.iter().find(|s| (s.tokens(), s.embed_dim()) != shape) {
            return Err(CliError::format(
                path,
                format!(
                    "entry `{}` has {} x {} patches, expected {} x {}",
                    bad.id,
                    bad.tokens(),
                    bad.embed_dim(),
                    shape.0,
                    shape.1
                ),
            ));
        }
    }
    Ok((m, samples))
}

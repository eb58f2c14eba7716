//! Snippet and background pools: manifests, offline directory scans and the
//! recordings-archive client.

mod archive;

pub use archive::{
    download_pool, query_archive, ArchiveConfig, FixtureClient, HttpClient, RemoteRecording,
    UreqClient,
};

use std::collections::BTreeSet;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::audio::{self, AudioError, CANONICAL_RATE};
use crate::species::{snake_case, SpeciesList};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

/// Directory holding background recordings inside a pool root.
pub const BACKGROUND_DIR: &str = "background";

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("network error: {0}")]
    Network(String),
    #[error("archive response schema changed: {0}")]
    ArchiveSchemaChanged(String),
    #[error("checksum mismatch for {source_ref}: expected {expected}, got {actual}")]
    ChecksumMismatch {
        source_ref: String,
        expected: String,
        actual: String,
    },
    #[error("directory {0:?} does not match any species in the list")]
    UnknownSpeciesDirectory(String),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IngestError + '_ {
    move |source| IngestError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Archive sound-quality grade, A best to E worst.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Quality {
    A,
    B,
    C,
    D,
    E,
    Unrated,
}

impl Quality {
    pub const GRADED: [Quality; 5] = [Quality::A, Quality::B, Quality::C, Quality::D, Quality::E];

    pub fn all() -> BTreeSet<Quality> {
        let mut s: BTreeSet<Quality> = Self::GRADED.into_iter().collect();
        s.insert(Quality::Unrated);
        s
    }
}

impl FromStr for Quality {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.trim() {
            "A" | "a" => Quality::A,
            "B" | "b" => Quality::B,
            "C" | "c" => Quality::C,
            "D" | "d" => Quality::D,
            "E" | "e" => Quality::E,
            "" | "no score" | "Unrated" | "unrated" => Quality::Unrated,
            other => return Err(format!("unknown quality grade {other:?}")),
        })
    }
}

impl fmt::Display for Quality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Quality::A => "A",
            Quality::B => "B",
            Quality::C => "C",
            Quality::D => "D",
            Quality::E => "E",
            Quality::Unrated => "Unrated",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    LabeledSnippets,
    Backgrounds,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "state", content = "reason")]
pub enum EntryStatus {
    Ok,
    Failed(String),
}

/// One pool recording. `species_id` is `None` for backgrounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub species_id: Option<usize>,
    pub source_ref: String,
    pub quality: Quality,
    pub duration_s: f64,
    pub local_path: String,
    /// Absolute sample peak of the canonical clip.
    #[serde(default)]
    pub peak: f32,
    #[serde(default)]
    pub rms: f64,
    /// SHA-256 of the stored canonical file.
    #[serde(default)]
    pub sha256: String,
    #[serde(default = "ok_status")]
    pub status: EntryStatus,
}

fn ok_status() -> EntryStatus {
    EntryStatus::Ok
}

impl PoolEntry {
    pub fn is_ok(&self) -> bool {
        self.status == EntryStatus::Ok
    }

    /// Length in samples at `rate`.
    pub fn len_samples(&self, rate: u32) -> usize {
        (self.duration_s * rate as f64).round() as usize
    }

    /// Catalogue an already-canonical WAV file.
    pub fn from_file(
        path: &Path,
        species_id: Option<usize>,
        source_ref: String,
        quality: Quality,
    ) -> Result<Self, IngestError> {
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        let clip = audio::decode_wav(&bytes)?;
        let clip = if clip.sample_rate == CANONICAL_RATE {
            clip.clamp()
        } else {
            audio::resample(&clip, CANONICAL_RATE)?.clamp()
        };
        Ok(Self {
            species_id,
            source_ref,
            quality,
            duration_s: clip.duration_seconds(),
            local_path: path.display().to_string(),
            peak: clip.peak(),
            rms: clip.rms(),
            sha256: sha256_hex(&bytes),
            status: EntryStatus::Ok,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManifestHeader {
    schema_version: u32,
    pool_kind: PoolKind,
    species: SpeciesList,
    created_at: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolManifest {
    pub species: SpeciesList,
    pub entries: Vec<PoolEntry>,
    /// Left `None` for deterministic output; set only on request.
    pub created_at: Option<String>,
    pub pool_kind: PoolKind,
}

impl PoolManifest {
    pub fn new(species: SpeciesList, pool_kind: PoolKind) -> Self {
        Self {
            species,
            entries: Vec::new(),
            created_at: None,
            pool_kind,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Sort by (species, source_ref); background entries (no species) first.
    pub fn sort(&mut self) {
        self.entries
            .sort_by(|a, b| (a.species_id, &a.source_ref).cmp(&(b.species_id, &b.source_ref)));
    }

    pub fn validate(&self) -> Result<(), IngestError> {
        for e in &self.entries {
            match (self.pool_kind, e.species_id) {
                (PoolKind::LabeledSnippets, Some(id)) if id < self.species.len() => {}
                (PoolKind::Backgrounds, None) => {}
                _ => {
                    return Err(IngestError::Manifest(format!(
                        "entry {} has species id {:?} invalid for a {:?} pool",
                        e.source_ref, e.species_id, self.pool_kind
                    )))
                }
            }
            if !(e.duration_s >= 0.0) {
                return Err(IngestError::Manifest(format!(
                    "entry {} has negative duration",
                    e.source_ref
                )));
            }
        }
        Ok(())
    }

    /// Entries usable for synthesis (downloaded and catalogued).
    pub fn usable(&self) -> impl Iterator<Item = (usize, &PoolEntry)> {
        self.entries.iter().enumerate().filter(|(_, e)| e.is_ok())
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let header = ManifestHeader {
            schema_version: MANIFEST_SCHEMA_VERSION,
            pool_kind: self.pool_kind,
            species: self.species.clone(),
            created_at: self.created_at.clone(),
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for e in &self.entries {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("json is utf-8")
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self, IngestError> {
        let mut lines = r.lines();
        let header_line = lines
            .next()
            .ok_or_else(|| IngestError::Manifest("empty manifest".into()))?
            .map_err(|e| IngestError::Manifest(e.to_string()))?;
        let header: ManifestHeader = serde_json::from_str(&header_line)
            .map_err(|e| IngestError::Manifest(format!("bad header: {e}")))?;
        if header.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(IngestError::Manifest(format!(
                "unsupported schema_version {}",
                header.schema_version
            )));
        }
        let mut entries = Vec::new();
        for (n, line) in lines.enumerate() {
            let line = line.map_err(|e| IngestError::Manifest(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            entries.push(
                serde_json::from_str(&line)
                    .map_err(|e| IngestError::Manifest(format!("line {}: {e}", n + 2)))?,
            );
        }
        let m = Self {
            species: header.species,
            entries,
            created_at: header.created_at,
            pool_kind: header.pool_kind,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<(), IngestError> {
        std::fs::write(path, self.to_jsonl()).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self, IngestError> {
        let f = std::fs::File::open(path).map_err(io_err(path))?;
        Self::read_jsonl(std::io::BufReader::new(f))
    }
}

/// How WAV files are arranged under a pool root.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolLayout {
    /// `<root>/<species_slug>/*.wav`; a `background/` subdirectory is ignored.
    PerSpecies,
    /// `<root>/background/*.wav`, or `<root>/*.wav` when no such subdirectory exists.
    Background,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ScanReport {
    pub skipped: Vec<String>,
}

fn wav_files(dir: &Path) -> Result<Vec<PathBuf>, IngestError> {
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        let is_wav = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("wav"));
        if path.is_file() && is_wav {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Scan a local pool directory into a manifest. Unreadable WAV files are
/// skipped and listed in the report.
pub fn build_pool_manifest(
    dir: &Path,
    species: &SpeciesList,
    layout: PoolLayout,
) -> Result<(PoolManifest, ScanReport), IngestError> {
    let mut report = ScanReport::default();
    let mut catalog = |path: &Path, species_id: Option<usize>, source_ref: String, out: &mut Vec<PoolEntry>| {
        match PoolEntry::from_file(path, species_id, source_ref, Quality::Unrated) {
            Ok(e) => out.push(e),
            Err(err) => {
                log::warn!("skipping {}: {err}", path.display());
                report.skipped.push(path.display().to_string());
            }
        }
    };
    let mut entries = Vec::new();
    let kind = match layout {
        PoolLayout::PerSpecies => {
            let mut dirs = Vec::new();
            for entry in std::fs::read_dir(dir).map_err(io_err(dir))? {
                let path = entry.map_err(io_err(dir))?.path();
                if path.is_dir() {
                    dirs.push(path);
                }
            }
            dirs.sort();
            for sub in dirs {
                let name = file_name(&sub);
                if name == BACKGROUND_DIR {
                    continue;
                }
                let id = species
                    .iter()
                    .position(|s| s.slug() == snake_case(&name))
                    .ok_or_else(|| IngestError::UnknownSpeciesDirectory(name.clone()))?;
                for f in wav_files(&sub)? {
                    let source_ref = format!("{}/{}", name, file_name(&f));
                    catalog(&f, Some(id), source_ref, &mut entries);
                }
            }
            PoolKind::LabeledSnippets
        }
        PoolLayout::Background => {
            let nested = dir.join(BACKGROUND_DIR);
            let root = if nested.is_dir() { nested } else { dir.to_path_buf() };
            for f in wav_files(&root)? {
                let source_ref = file_name(&f);
                catalog(&f, None, source_ref, &mut entries);
            }
            PoolKind::Backgrounds
        }
    };
    let mut manifest = PoolManifest {
        species: species.clone(),
        entries,
        created_at: None,
        pool_kind: kind,
    };
    manifest.sort();
    Ok((manifest, report))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{encode_wav, AudioClip};

    fn write_wav(path: &Path, len: usize) {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        let clip = AudioClip::new((0..len).map(|i| (i % 7) as f32 / 10.0).collect(), CANONICAL_RATE, "t");
        std::fs::write(path, encode_wav(&clip)).unwrap();
    }

    #[test]
    fn empty_directory_gives_empty_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let (m, r) = build_pool_manifest(dir.path(), &SpeciesList::kzn_six(), PoolLayout::PerSpecies).unwrap();
        assert!(m.is_empty());
        assert!(r.skipped.is_empty());
    }

    #[test]
    fn six_species_tree() {
        let dir = tempfile::tempdir().unwrap();
        let species = SpeciesList::kzn_six();
        // create in reverse order so filesystem order can't leak through
        for (i, s) in species.iter().enumerate().collect::<Vec<_>>().into_iter().rev() {
            write_wav(&dir.path().join(s.slug()).join("a.wav"), 3200 * (i + 1));
        }
        let (m, _) = build_pool_manifest(dir.path(), &species, PoolLayout::PerSpecies).unwrap();
        assert_eq!(m.len(), 6);
        for (i, e) in m.entries.iter().enumerate() {
            assert_eq!(e.species_id, Some(i));
            assert!((e.duration_s - 0.1 * (i + 1) as f64).abs() < 1e-12);
            assert_eq!(e.quality, Quality::Unrated);
        }
        let again = build_pool_manifest(dir.path(), &species, PoolLayout::PerSpecies).unwrap().0;
        assert_eq!(m.to_jsonl(), again.to_jsonl());
        let parsed = PoolManifest::read_jsonl(m.to_jsonl().as_bytes()).unwrap();
        assert_eq!(parsed, m);
    }

    #[test]
    fn unknown_directory_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_wav(&dir.path().join("pied_crow").join("a.wav"), 10);
        let err = build_pool_manifest(dir.path(), &SpeciesList::kzn_six(), PoolLayout::PerSpecies).unwrap_err();
        assert!(matches!(err, IngestError::UnknownSpeciesDirectory(d) if d == "pied_crow"));
    }

    #[test]
    fn unreadable_file_skipped() {
        let dir = tempfile::tempdir().unwrap();
        write_wav(&dir.path().join("background").join("ok.wav"), 100);
        std::fs::write(dir.path().join("background").join("bad.wav"), b"not a wav").unwrap();
        let (m, r) = build_pool_manifest(dir.path(), &SpeciesList::kzn_six(), PoolLayout::Background).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m.entries[0].species_id, None);
        assert_eq!(m.pool_kind, PoolKind::Backgrounds);
        assert_eq!(r.skipped.len(), 1);
    }

    #[test]
    fn header_schema_checked() {
        let bad = "{\"schema_version\":2,\"pool_kind\":\"backgrounds\",\"species\":[{\"common_name\":\"a\",\"latin_name\":\"b\"}],\"created_at\":null}\n";
        assert!(PoolManifest::read_jsonl(bad.as_bytes()).is_err());
    }

    #[test]
    fn quality_parse() {
        assert_eq!("A".parse::<Quality>().unwrap(), Quality::A);
        assert_eq!("no score".parse::<Quality>().unwrap(), Quality::Unrated);
        assert!("F".parse::<Quality>().is_err());
        assert_eq!(Quality::all().len(), 6);
    }
}

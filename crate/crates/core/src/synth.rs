//! Soundscape synthesis: labeled snippets are overlaid onto background
//! recordings at random offsets and the placements become the label track.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::audio::{self, AudioClip, AudioError, CANONICAL_RATE};
use crate::ingest::{IngestError, PoolKind, PoolManifest};
use crate::labelgrid::{LabelError, LabelEvent, LabelTrack};
use crate::species::SpeciesList;

pub const DATASET_SCHEMA_VERSION: u32 = 1;
pub const DATASET_MANIFEST_FILE: &str = "dataset_manifest.jsonl";

/// Peak level snippets are normalized to before the random gain is applied.
const NORM_PEAK: f32 = 0.9;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("no usable pool entries for species {0}")]
    EmptySpeciesPool(usize),
    #[error("background has zero length")]
    ZeroLengthBackground,
    #[error("placement {index} [{start}, {end}) exceeds background of {len} samples")]
    PlanOutOfRange {
        index: usize,
        start: usize,
        end: usize,
        len: usize,
    },
    #[error("snippet for pool entry {0} not loaded or too short")]
    MissingSnippet(usize),
    #[error("invalid synthesis config: {0}")]
    Config(String),
    #[error("dataset manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Labels(#[from] LabelError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SynthError + '_ {
    move |source| SynthError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Snippets per background file, or the whole pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FillDensity {
    Count(usize),
    Max,
}

impl fmt::Display for FillDensity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FillDensity::Count(n) => write!(f, "{n}"),
            FillDensity::Max => f.write_str("max"),
        }
    }
}

impl FromStr for FillDensity {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("max") {
            return Ok(FillDensity::Max);
        }
        match s.parse::<usize>() {
            Ok(0) => Err("fill density must be at least 1".into()),
            Ok(n) => Ok(FillDensity::Count(n)),
            Err(_) => Err(format!("fill density must be a positive integer or \"max\", got {s:?}")),
        }
    }
}

impl Serialize for FillDensity {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            FillDensity::Count(n) => s.serialize_u64(*n as u64),
            FillDensity::Max => s.serialize_str("max"),
        }
    }
}

impl<'de> Deserialize<'de> for FillDensity {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            N(u64),
            S(String),
        }
        match Raw::deserialize(d)? {
            Raw::N(0) => Err(serde::de::Error::custom("fill density must be at least 1")),
            Raw::N(n) => Ok(FillDensity::Count(n as usize)),
            Raw::S(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum GainMode {
    RawAdd,
    /// Peak-normalize to 0.9, then scale by `U(lo, hi)`.
    PeakNormUniformGain { lo: f32, hi: f32 },
    /// Scale the snippet RMS to `snr_db` above the background RMS.
    TargetSnrDb { snr_db: f64 },
}

impl Default for GainMode {
    fn default() -> Self {
        GainMode::PeakNormUniformGain { lo: 0.25, hi: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipPolicy {
    #[default]
    HardClamp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthesisConfig {
    pub fill_density: FillDensity,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub gain_mode: GainMode,
    #[serde(default)]
    pub clip_policy: ClipPolicy,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            fill_density: FillDensity::Count(50),
            seed: 0,
            gain_mode: GainMode::default(),
            clip_policy: ClipPolicy::HardClamp,
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.fill_density == FillDensity::Count(0) {
            return Err(SynthError::Config("fill_density must be at least 1".into()));
        }
        if let GainMode::PeakNormUniformGain { lo, hi } = self.gain_mode {
            if !(0.0 < lo && lo <= hi && hi <= 1.0) {
                return Err(SynthError::Config(format!(
                    "gain range must satisfy 0 < lo <= hi <= 1, got ({lo}, {hi})"
                )));
            }
        }
        if let GainMode::TargetSnrDb { snr_db } = self.gain_mode {
            if !snr_db.is_finite() {
                return Err(SynthError::Config("snr_db must be finite".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub pool_index: usize,
    pub species_id: usize,
    pub start_sample: usize,
    pub gain: f32,
    pub trimmed_len_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingPlan {
    pub placements: Vec<Placement>,
    pub background_ref: String,
    pub background_len_samples: usize,
    pub seed_echo: u64,
}

impl EmbeddingPlan {
    pub fn species_counts(&self, species_count: usize) -> Vec<usize> {
        let mut counts = vec![0; species_count];
        for p in &self.placements {
            counts[p.species_id] += 1;
        }
        counts
    }
}

/// What the planner needs to know about a background recording.
#[derive(Debug, Clone, PartialEq)]
pub struct BackgroundInfo {
    pub source_ref: String,
    pub len_samples: usize,
    pub rms: f64,
}

impl BackgroundInfo {
    pub fn of(clip: &AudioClip) -> Self {
        Self {
            source_ref: clip.source_id.clone(),
            len_samples: clip.len(),
            rms: clip.rms(),
        }
    }
}

fn draw_gain(rng: &mut ChaCha8Rng, mode: GainMode, peak: f32, rms: f64, bg_rms: f64) -> f32 {
    match mode {
        GainMode::RawAdd => 1.0,
        GainMode::PeakNormUniformGain { lo, hi } => {
            let u = if lo < hi { rng.gen_range(lo..=hi) } else { lo };
            if peak > 0.0 {
                NORM_PEAK / peak * u
            } else {
                u
            }
        }
        GainMode::TargetSnrDb { snr_db } => {
            if rms > 0.0 && bg_rms > 0.0 {
                (bg_rms / rms * 10f64.powf(snr_db / 20.0)) as f32
            } else {
                1.0
            }
        }
    }
}

fn place(
    rng: &mut ChaCha8Rng,
    pool: &PoolManifest,
    pool_index: usize,
    bg: &BackgroundInfo,
    cfg: &SynthesisConfig,
) -> Placement {
    let entry = &pool.entries[pool_index];
    let snip_len = entry.len_samples(CANONICAL_RATE).max(1);
    let trimmed = snip_len.min(bg.len_samples);
    let start = rng.gen_range(0..=bg.len_samples - trimmed);
    let gain = draw_gain(rng, cfg.gain_mode, entry.peak, entry.rms, bg.rms);
    Placement {
        pool_index,
        species_id: entry.species_id.expect("labeled pool entries carry a species"),
        start_sample: start,
        gain,
        trimmed_len_samples: trimmed,
    }
}

/// Plan one background. In `Max` mode every usable pool entry is placed once.
pub fn plan_embeddings(
    pool: &PoolManifest,
    background: &BackgroundInfo,
    cfg: &SynthesisConfig,
) -> Result<EmbeddingPlan, SynthError> {
    let all: Vec<usize> = pool.usable().map(|(i, _)| i).collect();
    plan_with_candidates(pool, &all, background, cfg)
}

/// Plan using only `candidates` (indices into `pool.entries`). Used to deal
/// the pool across backgrounds in `Max` mode.
pub fn plan_with_candidates(
    pool: &PoolManifest,
    candidates: &[usize],
    background: &BackgroundInfo,
    cfg: &SynthesisConfig,
) -> Result<EmbeddingPlan, SynthError> {
    cfg.validate()?;
    if background.len_samples == 0 {
        return Err(SynthError::ZeroLengthBackground);
    }
    if pool.pool_kind != PoolKind::LabeledSnippets {
        return Err(SynthError::Config("snippet pool must be a labeled pool".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut placements = Vec::new();
    match cfg.fill_density {
        FillDensity::Max => {
            for &i in candidates {
                placements.push(place(&mut rng, pool, i, background, cfg));
            }
        }
        FillDensity::Count(n) => {
            let c = pool.species.len();
            let mut by_species: Vec<Vec<usize>> = vec![Vec::new(); c];
            for &i in candidates {
                if let Some(s) = pool.entries[i].species_id {
                    by_species[s].push(i);
                }
            }
            if let Some(empty) = by_species.iter().position(Vec::is_empty) {
                return Err(SynthError::EmptySpeciesPool(empty));
            }
            // Round-robin over a shuffled species order keeps per-species
            // counts within one of each other.
            let mut order: Vec<usize> = (0..c).collect();
            order.shuffle(&mut rng);
            for k in 0..n {
                let s = order[k % c];
                let pick = by_species[s][rng.gen_range(0..by_species[s].len())];
                placements.push(place(&mut rng, pool, pick, background, cfg));
            }
        }
    }
    Ok(EmbeddingPlan {
        placements,
        background_ref: background.source_ref.clone(),
        background_len_samples: background.len_samples,
        seed_echo: cfg.seed,
    })
}

/// Deal every usable pool entry to exactly one of `n_backgrounds` buckets.
pub fn partition_for_max(pool: &PoolManifest, n_backgrounds: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = pool.usable().map(|(i, _)| i).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let mut buckets = vec![Vec::new(); n_backgrounds];
    if n_backgrounds == 0 {
        return buckets;
    }
    for (k, i) in idx.into_iter().enumerate() {
        buckets[k % n_backgrounds].push(i);
    }
    for b in &mut buckets {
        b.sort_unstable();
    }
    buckets
}

/// Mix the planned snippets into the background and emit the label track.
pub fn render_mixture(
    background: &AudioClip,
    plan: &EmbeddingPlan,
    snippets: &BTreeMap<usize, AudioClip>,
) -> Result<(AudioClip, LabelTrack), SynthError> {
    let len = background.len();
    let mut out = background.samples.clone();
    let rate = background.sample_rate as f64;
    let mut track = LabelTrack::new(background.duration_seconds());
    for (index, p) in plan.placements.iter().enumerate() {
        let end = p.start_sample + p.trimmed_len_samples;
        if end > len || p.trimmed_len_samples == 0 {
            return Err(SynthError::PlanOutOfRange {
                index,
                start: p.start_sample,
                end,
                len,
            });
        }
        let snip = snippets
            .get(&p.pool_index)
            .filter(|s| s.len() >= p.trimmed_len_samples)
            .ok_or(SynthError::MissingSnippet(p.pool_index))?;
        for (o, &s) in out[p.start_sample..end].iter_mut().zip(&snip.samples) {
            *o += p.gain * s;
        }
        track.events.push(LabelEvent {
            species_id: p.species_id,
            start_s: p.start_sample as f64 / rate,
            end_s: end as f64 / rate,
        });
    }
    let mixed = AudioClip::new(out, background.sample_rate, background.source_id.clone()).clamp();
    Ok((mixed, track))
}

/// Stable 64-bit hash of a string (first 8 bytes of SHA-256).
pub fn stable_hash(s: &str) -> u64 {
    let d = Sha256::digest(s.as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

pub fn file_seed(seed: u64, background_ref: &str) -> u64 {
    seed ^ stable_hash(background_ref)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    /// Relative to the manifest's directory.
    pub audio_path: String,
    pub label_path: String,
    pub duration_s: f64,
    pub background_ref: String,
    pub file_seed: u64,
    pub n_events: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DatasetHeader {
    schema_version: u32,
    species: SpeciesList,
    synthesis: SynthesisConfig,
}

/// Index of a synthesized (or otherwise labeled) dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub species: SpeciesList,
    pub synthesis: SynthesisConfig,
    pub entries: Vec<DatasetEntry>,
    /// Directory relative paths resolve against; not serialized.
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn total_events(&self) -> usize {
        self.entries.iter().map(|e| e.n_events).sum()
    }

    pub fn audio_path(&self, e: &DatasetEntry) -> PathBuf {
        self.root.join(&e.audio_path)
    }

    pub fn label_path(&self, e: &DatasetEntry) -> PathBuf {
        self.root.join(&e.label_path)
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let header = DatasetHeader {
            schema_version: DATASET_SCHEMA_VERSION,
            species: self.species.clone(),
            synthesis: self.synthesis.clone(),
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for e in &self.entries {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R, root: PathBuf) -> Result<Self, SynthError> {
        let bad = |m: String| SynthError::Manifest(m);
        let mut lines = r.lines();
        let header: DatasetHeader = serde_json::from_str(
            &lines
                .next()
                .ok_or_else(|| bad("empty dataset manifest".into()))?
                .map_err(|e| bad(e.to_string()))?,
        )
        .map_err(|e| bad(format!("bad header: {e}")))?;
        if header.schema_version != DATASET_SCHEMA_VERSION {
            return Err(bad(format!("unsupported schema_version {}", header.schema_version)));
        }
        let mut entries = Vec::new();
        for line in lines {
            let line = line.map_err(|e| bad(e.to_string()))?;
            if !line.trim().is_empty() {
                entries.push(serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?);
            }
        }
        Ok(Self {
            species: header.species,
            synthesis: header.synthesis,
            entries,
            root,
        })
    }

    pub fn save(&self) -> Result<PathBuf, SynthError> {
        let path = self.root.join(DATASET_MANIFEST_FILE);
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).map_err(io_err(&path))?;
        std::fs::write(&path, buf).map_err(io_err(&path))?;
        Ok(path)
    }

    /// Load `dataset_manifest.jsonl` from `dir` (or the file itself).
    pub fn load(path: &Path) -> Result<Self, SynthError> {
        let file = if path.is_dir() { path.join(DATASET_MANIFEST_FILE) } else { path.to_path_buf() };
        let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        let f = std::fs::File::open(&file).map_err(io_err(&file))?;
        Self::read_jsonl(std::io::BufReader::new(f), root)
    }

    /// Load the audio and label track of one entry.
    pub fn load_entry(&self, e: &DatasetEntry) -> Result<(AudioClip, LabelTrack), SynthError> {
        let clip = audio::load_wav(&self.audio_path(e), CANONICAL_RATE)?;
        let label_path = self.label_path(e);
        let f = std::fs::File::open(&label_path).map_err(io_err(&label_path))?;
        let track = LabelTrack::read_csv(f, &self.species, clip.duration_seconds())?;
        Ok((clip, track))
    }
}

fn stem(source_ref: &str) -> String {
    Path::new(source_ref)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| source_ref.replace('/', "_"))
}

/// Synthesize one labeled file per background into `out_dir`.
pub fn synth_dataset(
    backgrounds: &PoolManifest,
    pool: &PoolManifest,
    cfg: &SynthesisConfig,
    out_dir: &Path,
) -> Result<DatasetManifest, SynthError> {
    cfg.validate()?;
    if backgrounds.pool_kind != PoolKind::Backgrounds {
        return Err(SynthError::Config("background manifest has the wrong pool kind".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let bgs: Vec<_> = backgrounds.usable().map(|(_, e)| e).collect();
    let max_buckets = match cfg.fill_density {
        FillDensity::Max => Some(partition_for_max(pool, bgs.len(), cfg.seed)),
        FillDensity::Count(_) => None,
    };
    let mut entries = Vec::with_capacity(bgs.len());
    let mut snippet_cache: BTreeMap<usize, AudioClip> = BTreeMap::new();
    for (k, bg_entry) in bgs.iter().enumerate() {
        let mut bg = audio::load_wav(Path::new(&bg_entry.local_path), CANONICAL_RATE)?;
        bg.source_id = bg_entry.source_ref.clone();
        let seed = file_seed(cfg.seed, &bg_entry.source_ref);
        let file_cfg = SynthesisConfig { seed, ..cfg.clone() };
        let info = BackgroundInfo::of(&bg);
        let plan = match &max_buckets {
            Some(b) => plan_with_candidates(pool, &b[k], &info, &file_cfg)?,
            None => plan_embeddings(pool, &info, &file_cfg)?,
        };
        let mut needed = BTreeMap::new();
        for p in &plan.placements {
            if !needed.contains_key(&p.pool_index) {
                let clip = match snippet_cache.get(&p.pool_index) {
                    Some(c) => c.clone(),
                    None => {
                        let path = Path::new(&pool.entries[p.pool_index].local_path);
                        let c = audio::load_wav(path, CANONICAL_RATE)?;
                        snippet_cache.insert(p.pool_index, c.clone());
                        c
                    }
                };
                needed.insert(p.pool_index, clip);
            }
        }
        let (mixed, track) = render_mixture(&bg, &plan, &needed)?;
        let stem = stem(&bg_entry.source_ref);
        let audio_name = format!("{stem}_synth.wav");
        let label_name = format!("{stem}_labels.csv");
        audio::save_wav(&out_dir.join(&audio_name), &mixed)?;
        let label_path = out_dir.join(&label_name);
        let mut buf = Vec::new();
        track.write_csv(&mut buf, &pool.species)?;
        std::fs::write(&label_path, buf).map_err(io_err(&label_path))?;
        log::info!("{audio_name}: {} embeddings", track.events.len());
        entries.push(DatasetEntry {
            audio_path: audio_name,
            label_path: label_name,
            duration_s: mixed.duration_seconds(),
            background_ref: bg_entry.source_ref.clone(),
            file_seed: seed,
            n_events: track.events.len(),
        });
        // bound memory when the pool is large
        if snippet_cache.len() > 2048 {
            snippet_cache.clear();
        }
    }
    let manifest = DatasetManifest {
        species: pool.species.clone(),
        synthesis: cfg.clone(),
        entries,
        root: out_dir.to_path_buf(),
    };
    manifest.save()?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{EntryStatus, PoolEntry, Quality};

    fn fake_pool(counts: &[usize], seconds: f64) -> PoolManifest {
        let names: Vec<_> = (0..counts.len())
            .map(|i| crate::species::Species::new(format!("Species {i}"), format!("Genus sp{i}")))
            .collect();
        let mut m = PoolManifest::new(SpeciesList::new(names).unwrap(), PoolKind::LabeledSnippets);
        for (s, &n) in counts.iter().enumerate() {
            for k in 0..n {
                m.entries.push(PoolEntry {
                    species_id: Some(s),
                    source_ref: format!("s{s}/{k:04}.wav"),
                    quality: Quality::Unrated,
                    duration_s: seconds,
                    local_path: String::new(),
                    peak: 0.5,
                    rms: 0.1,
                    sha256: String::new(),
                    status: EntryStatus::Ok,
                });
            }
        }
        m.sort();
        m
    }

    fn bg(len: usize) -> BackgroundInfo {
        BackgroundInfo { source_ref: "bg.wav".into(), len_samples: len, rms: 0.05 }
    }

    #[test]
    fn density_fifty_over_six_species() {
        let pool = fake_pool(&[3, 5, 2, 4, 1, 6], 1.0);
        let cfg = SynthesisConfig { fill_density: FillDensity::Count(50), seed: 7, ..Default::default() };
        let plan = plan_embeddings(&pool, &bg(32_000 * 60), &cfg).unwrap();
        let mut counts = plan.species_counts(6);
        counts.sort_unstable();
        assert_eq!(counts, vec![8, 8, 8, 8, 9, 9]);
        assert_eq!(plan.placements.len(), 50);
        assert_eq!(plan, plan_embeddings(&pool, &bg(32_000 * 60), &cfg).unwrap());
    }

    #[test]
    fn density_equal_to_species_count() {
        let pool = fake_pool(&[2; 6], 0.5);
        let cfg = SynthesisConfig { fill_density: FillDensity::Count(6), ..Default::default() };
        let plan = plan_embeddings(&pool, &bg(32_000 * 10), &cfg).unwrap();
        assert_eq!(plan.species_counts(6), vec![1; 6]);
    }

    #[test]
    fn placements_stay_inside_background() {
        let pool = fake_pool(&[4, 4], 3.0);
        let cfg = SynthesisConfig { fill_density: FillDensity::Count(40), seed: 3, ..Default::default() };
        // background shorter than every snippet: snippets are trimmed
        let plan = plan_embeddings(&pool, &bg(32_000), &cfg).unwrap();
        for p in &plan.placements {
            assert_eq!(p.trimmed_len_samples, 32_000);
            assert_eq!(p.start_sample, 0);
        }
        let plan = plan_embeddings(&pool, &bg(32_000 * 5), &cfg).unwrap();
        assert!(plan.placements.iter().all(|p| p.start_sample + p.trimmed_len_samples <= 32_000 * 5));
    }

    #[test]
    fn max_mode_places_everything_once() {
        let pool = fake_pool(&[70, 346, 177, 49, 129, 134], 0.1);
        let buckets = partition_for_max(&pool, 27, 11);
        let cfg = SynthesisConfig { fill_density: FillDensity::Max, ..Default::default() };
        let mut seen = vec![0usize; pool.len()];
        for b in &buckets {
            let plan = plan_with_candidates(&pool, b, &bg(32_000 * 10), &cfg).unwrap();
            for p in plan.placements {
                seen[p.pool_index] += 1;
            }
        }
        assert_eq!(seen.iter().sum::<usize>(), 905);
        assert!(seen.iter().all(|&n| n == 1));
    }

    #[test]
    fn errors() {
        let pool = fake_pool(&[1, 0], 1.0);
        let cfg = SynthesisConfig::default();
        assert!(matches!(plan_embeddings(&pool, &bg(100), &cfg), Err(SynthError::EmptySpeciesPool(1))));
        let pool = fake_pool(&[1], 1.0);
        assert!(matches!(plan_embeddings(&pool, &bg(0), &cfg), Err(SynthError::ZeroLengthBackground)));
        let bad = SynthesisConfig { gain_mode: GainMode::PeakNormUniformGain { lo: 0.5, hi: 0.2 }, ..Default::default() };
        assert!(matches!(plan_embeddings(&pool, &bg(100), &bad), Err(SynthError::Config(_))));
    }

    #[test]
    fn render_identity_and_zero_background() {
        let bgc = AudioClip::new(vec![0.1, -0.2, 0.3, 0.0], 4, "bg");
        let empty = EmbeddingPlan { placements: vec![], background_ref: "bg".into(), background_len_samples: 4, seed_echo: 0 };
        let (out, track) = render_mixture(&bgc, &empty, &BTreeMap::new()).unwrap();
        assert_eq!(out.samples, bgc.samples);
        assert!(track.events.is_empty());

        let zero = AudioClip::silence(10, 10, "z");
        let snip = AudioClip::new(vec![0.5, -0.25, 0.125], 10, "s");
        let plan = EmbeddingPlan {
            placements: vec![Placement { pool_index: 0, species_id: 1, start_sample: 4, gain: 0.5, trimmed_len_samples: 3 }],
            background_ref: "z".into(),
            background_len_samples: 10,
            seed_echo: 0,
        };
        let snippets = BTreeMap::from([(0, snip)]);
        let (out, track) = render_mixture(&zero, &plan, &snippets).unwrap();
        assert_eq!(out.samples, vec![0.0, 0.0, 0.0, 0.0, 0.25, -0.125, 0.0625, 0.0, 0.0, 0.0]);
        assert_eq!(track.events, vec![LabelEvent { species_id: 1, start_s: 0.4, end_s: 0.7 }]);

        let mut bad = plan.clone();
        bad.placements[0].start_sample = 8;
        assert!(matches!(render_mixture(&zero, &bad, &snippets), Err(SynthError::PlanOutOfRange { .. })));
    }

    #[test]
    fn saturation_is_clamped() {
        let bgc = AudioClip::new(vec![0.9; 4], 4, "bg");
        let plan = EmbeddingPlan {
            placements: vec![Placement { pool_index: 0, species_id: 0, start_sample: 0, gain: 1.0, trimmed_len_samples: 4 }],
            background_ref: "bg".into(),
            background_len_samples: 4,
            seed_echo: 0,
        };
        let snippets = BTreeMap::from([(0, AudioClip::new(vec![0.5, -2.5, 0.0, 0.05], 4, "s"))]);
        let (out, _) = render_mixture(&bgc, &plan, &snippets).unwrap();
        assert_eq!(out.samples, vec![1.0, -1.0, 0.9, 0.95]);
    }

    #[test]
    fn fill_density_parsing() {
        assert_eq!("max".parse::<FillDensity>().unwrap(), FillDensity::Max);
        assert_eq!("50".parse::<FillDensity>().unwrap(), FillDensity::Count(50));
        assert!("0".parse::<FillDensity>().is_err());
        assert_eq!(serde_json::to_string(&FillDensity::Max).unwrap(), "\"max\"");
        assert_eq!(serde_json::from_str::<FillDensity>("10").unwrap(), FillDensity::Count(10));
    }

    #[test]
    fn plan_ignores_manifest_reserialization() {
        let pool = fake_pool(&[3, 3, 3], 0.7);
        let reparsed = PoolManifest::read_jsonl(pool.to_jsonl().as_bytes()).unwrap();
        let cfg = SynthesisConfig { fill_density: FillDensity::Count(12), seed: 99, ..Default::default() };
        assert_eq!(
            plan_embeddings(&pool, &bg(64_000), &cfg).unwrap(),
            plan_embeddings(&reparsed, &bg(64_000), &cfg).unwrap()
        );
    }
}

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use birdscape::audio::{load_wav, CANONICAL_RATE};
use birdscape::crnn::{
    load_recordings, predict_recording, train_on_recordings, ArchitecturePreset, LabeledRecording, ModelParams,
    PresetName, SecondPooling, TrainingHistory,
};
use birdscape::eval::{sweep_many, Confusion, EvalReport, SweepCurve};
use birdscape::features::{compute_log_mel, read_cache, write_cache, FeatureConfig};
use birdscape::ingest::{
    build_pool_manifest, download_pool, query_archive, sha256_hex, ArchiveConfig, HttpClient, PoolLayout,
    PoolManifest, UreqClient,
};
use birdscape::labelgrid::{to_segment_matrix, LabelTrack};
use birdscape::species::SpeciesList;
use birdscape::synth::{synth_dataset, DatasetManifest, FillDensity, SynthesisConfig, DATASET_MANIFEST_FILE};
use birdscape::toy::{toy_species, write_toy_tree, ToySpec};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::config::{architecture_for, ArchiveSection, ExperimentConfig, ModelSection};
use crate::error::{io, CliError};
use crate::provenance::RunRecord;
use crate::report::{render_html, write_long_csv};
use crate::timeline::{recording_id_of, PredictionTimeline};
use crate::Cli;

pub const POOL_MANIFEST: &str = "pool.jsonl";
pub const BACKGROUND_MANIFEST: &str = "backgrounds.jsonl";
pub const HOLDOUT_MANIFEST: &str = "holdout.jsonl";
pub const CHECKPOINT_FILE: &str = "model.bsck";
pub const FEATURE_INDEX: &str = "index.json";

/// Resolved configuration plus the global flags.
#[derive(Debug, Clone)]
pub struct Context {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
    pub jobs: usize,
}

impl Context {
    pub fn new(cli: &Cli) -> Result<Self, CliError> {
        let mut cfg = match &cli.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = cli.seed {
            cfg.seed = s;
        }
        if let Some(o) = &cli.out {
            cfg.out = o.clone();
        }
        Self::from_config(cfg, cli.jobs)
    }

    pub fn from_config(cfg: ExperimentConfig, jobs: usize) -> Result<Self, CliError> {
        cfg.validate()?;
        if jobs == 0 {
            return Err(CliError::Config("--jobs must be at least 1".into()));
        }
        Ok(Self {
            out: cfg.out.clone(),
            cfg,
            jobs,
        })
    }

    pub fn stage(&self, name: &str) -> Result<PathBuf, CliError> {
        let d = self.out.join(name);
        std::fs::create_dir_all(&d).map_err(io(&d))?;
        Ok(d)
    }

    pub fn record(&self, command: &str) -> RunRecord {
        RunRecord::new(command, self.cfg.seed, &self.cfg.to_toml())
    }

    fn ingest_manifest(&self, file: &str) -> Result<Option<PoolManifest>, CliError> {
        let p = self.out.join("ingest").join(file);
        if !p.is_file() {
            return Ok(None);
        }
        Ok(Some(PoolManifest::load(&p)?))
    }

    fn require_ingest(&self, file: &str) -> Result<PoolManifest, CliError> {
        self.ingest_manifest(file)?.ok_or_else(|| {
            CliError::Data(format!(
                "{} not found; run `birdscape ingest` first",
                self.out.join("ingest").join(file).display()
            ))
        })
    }

    fn check_species(&self, found: &SpeciesList, what: &str) -> Result<(), CliError> {
        if *found != self.cfg.species() {
            return Err(CliError::Config(format!("species: config list differs from the one in {what}")));
        }
        Ok(())
    }

    pub fn train_dataset_dir(&self) -> PathBuf {
        self.out.join("synth").join("train")
    }

    pub fn holdout_dataset_dir(&self) -> PathBuf {
        self.out.join("synth").join("holdout")
    }

    fn load_dataset(&self, dir: &Path) -> Result<DatasetManifest, CliError> {
        if !dir.join(DATASET_MANIFEST_FILE).is_file() {
            return Err(CliError::Data(format!(
                "{} not found; run `birdscape synth` first",
                dir.join(DATASET_MANIFEST_FILE).display()
            )));
        }
        let ds = DatasetManifest::load(dir)?;
        self.check_species(&ds.species, &dir.display().to_string())?;
        Ok(ds)
    }
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let Ok(rd) = std::fs::read_dir(&d) else { continue };
        for e in rd.flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}

fn record_outputs(run: &mut RunRecord, dir: &Path) {
    for f in files_under(dir) {
        if f.file_name().is_some_and(|n| n != crate::provenance::RUN_FILE) {
            run.output(dir, &f);
        }
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io(parent))?;
    }
    std::fs::write(path, bytes).map_err(io(path))
}

// ---------------------------------------------------------------- ingest

pub fn ingest(ctx: &Context) -> Result<(), CliError> {
    ingest_with_client(ctx, &UreqClient::new())
}

/// Ingest with an explicit HTTP client; archive downloads go through it.
pub fn ingest_with_client(ctx: &Context, client: &dyn HttpClient) -> Result<(), CliError> {
    let cfg = &ctx.cfg;
    let species = cfg.species();
    let dir = ctx.stage("ingest")?;
    let mut run = ctx.record("ingest");

    let pool = match (&cfg.ingest.pool_dir, &cfg.ingest.archive) {
        (Some(_), _) => {
            let p = ExperimentConfig::require_dir("ingest.pool_dir", &cfg.ingest.pool_dir)?;
            let (m, report) = build_pool_manifest(&p, &species, PoolLayout::PerSpecies)?;
            for s in &report.skipped {
                warn!("pool: skipped {s}");
            }
            m
        }
        (None, Some(a)) => fetch_archive(ctx, client, a, &species, &dir.join("pool"))?,
        (None, None) => {
            return Err(CliError::Config("ingest.pool_dir: not set and no ingest.archive section".into()));
        }
    };
    if pool.usable().next().is_none() {
        return Err(CliError::Data("the labeled pool has no usable recordings".into()));
    }
    let bg_dir = ExperimentConfig::require_dir("ingest.background_dir", &cfg.ingest.background_dir)?;
    let (bgs, report) = build_pool_manifest(&bg_dir, &species, PoolLayout::Background)?;
    for s in &report.skipped {
        warn!("backgrounds: skipped {s}");
    }
    if bgs.usable().next().is_none() {
        return Err(CliError::Data(format!("no usable background recordings under {}", bg_dir.display())));
    }
    let holdout = match &cfg.ingest.holdout_dir {
        Some(_) => {
            let d = ExperimentConfig::require_dir("ingest.holdout_dir", &cfg.ingest.holdout_dir)?;
            Some(build_pool_manifest(&d, &species, PoolLayout::Background)?.0)
        }
        None => None,
    };

    for (m, file) in [(Some(&pool), POOL_MANIFEST), (Some(&bgs), BACKGROUND_MANIFEST), (holdout.as_ref(), HOLDOUT_MANIFEST)] {
        let path = dir.join(file);
        match m {
            Some(m) => {
                m.save(&path)?;
                for e in m.entries.iter().filter(|e| e.is_ok()) {
                    run.inputs.insert(e.local_path.clone(), e.sha256.clone());
                }
            }
            None if path.exists() => std::fs::remove_file(&path).map_err(io(&path))?,
            None => {}
        }
    }
    info!(
        "ingest: {} pool recordings, {} backgrounds, {} holdout",
        pool.usable().count(),
        bgs.usable().count(),
        holdout.as_ref().map_or(0, |h| h.usable().count())
    );
    record_outputs(&mut run, &dir);
    run.write(&dir)?;
    Ok(())
}

fn fetch_archive(
    ctx: &Context,
    client: &dyn HttpClient,
    a: &ArchiveSection,
    species: &SpeciesList,
    dest: &Path,
) -> Result<PoolManifest, CliError> {
    let acfg = ArchiveConfig {
        base_url: a.base_url.clone().unwrap_or_else(|| ArchiveConfig::default().base_url),
        api_key: a.api_key.clone(),
    };
    let quality: BTreeSet<_> = ctx.cfg.quality_filter()?.into_iter().collect();
    let queries: Vec<String> = match &a.queries {
        Some(q) if q.len() != species.len() => {
            return Err(CliError::Config(format!(
                "ingest.archive.queries: {} entries for {} species",
                q.len(),
                species.len()
            )));
        }
        Some(q) => q.clone(),
        None => species.iter().map(|s| s.latin_name.clone()).collect(),
    };
    let mut descriptors = Vec::new();
    for q in &queries {
        let found = query_archive(client, &acfg, q, &quality)?;
        info!("archive: {} recordings for {q:?}", found.len());
        descriptors.extend(found);
    }
    Ok(download_pool(client, &descriptors, species, dest, ctx.jobs)?)
}

// ---------------------------------------------------------------- synth

/// Synthesize the training dataset (and the held-out one, if ingested).
pub fn synth(ctx: &Context) -> Result<DatasetManifest, CliError> {
    let dir = ctx.stage("synth")?;
    let mut run = ctx.record("synth");
    let pool = ctx.require_ingest(POOL_MANIFEST)?;
    ctx.check_species(&pool.species, POOL_MANIFEST)?;
    let bgs = ctx.require_ingest(BACKGROUND_MANIFEST)?;
    let scfg = ctx.cfg.synthesis();
    let train = synth_dataset(&bgs, &pool, &scfg, &ctx.train_dataset_dir())?;
    info!("synth: {} training recordings, {} embeddings", train.entries.len(), train.total_events());
    if let Some(h) = ctx.ingest_manifest(HOLDOUT_MANIFEST)? {
        let hold = synth_dataset(&h, &pool, &scfg, &ctx.holdout_dataset_dir())?;
        info!("synth: {} held-out recordings, {} embeddings", hold.entries.len(), hold.total_events());
    }
    for f in [POOL_MANIFEST, BACKGROUND_MANIFEST, HOLDOUT_MANIFEST] {
        let p = ctx.out.join("ingest").join(f);
        if p.is_file() {
            run.input(&p)?;
        }
    }
    record_outputs(&mut run, &dir);
    run.write(&dir)?;
    Ok(train)
}

// ---------------------------------------------------------------- features

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FeatureIndex {
    features: FeatureConfig,
    dataset_sha256: String,
    /// audio_path in the dataset → cache file name.
    caches: BTreeMap<String, String>,
}

fn manifest_digest(ds: &DatasetManifest) -> Result<String, CliError> {
    let p = ds.root.join(DATASET_MANIFEST_FILE);
    Ok(sha256_hex(&std::fs::read(&p).map_err(io(&p))?))
}

pub fn features(ctx: &Context) -> Result<(), CliError> {
    let dir = ctx.stage("features")?;
    let mut run = ctx.record("features");
    let ds = ctx.load_dataset(&ctx.train_dataset_dir())?;
    let fcfg = ctx.cfg.feature_config()?;
    let mut caches = BTreeMap::new();
    for e in &ds.entries {
        let clip = load_wav(&ds.audio_path(e), CANONICAL_RATE)?;
        let spec = compute_log_mel(&clip, &fcfg)?;
        let name = format!("{}.mel", recording_id_of(Path::new(&e.audio_path)));
        write_cache(&dir.join(&name), &spec)?;
        caches.insert(e.audio_path.clone(), name);
    }
    let index = FeatureIndex {
        features: fcfg,
        dataset_sha256: manifest_digest(&ds)?,
        caches,
    };
    write_file(&dir.join(FEATURE_INDEX), &serde_json::to_vec_pretty(&index).expect("index serializes"))?;
    info!("features: cached {} spectrograms", index.caches.len());
    run.input(&ds.root.join(DATASET_MANIFEST_FILE))?;
    record_outputs(&mut run, &dir);
    run.write(&dir)?;
    Ok(())
}

/// Recordings for training, read from the feature cache when it was built
/// from this exact dataset and feature configuration.
fn recordings(ctx: &Context, ds: &DatasetManifest, fcfg: &FeatureConfig) -> Result<Vec<LabeledRecording>, CliError> {
    let dir = ctx.out.join("features");
    let index: Option<FeatureIndex> = std::fs::read(dir.join(FEATURE_INDEX))
        .ok()
        .and_then(|b| serde_json::from_slice(&b).ok());
    let usable = match &index {
        Some(ix) => ix.features == *fcfg && ix.dataset_sha256 == manifest_digest(ds)?,
        None => false,
    };
    if !usable {
        return Ok(load_recordings(ds, fcfg, ctx.cfg.train.supervision)?);
    }
    let index = index.expect("checked above");
    info!("train: using cached features from {}", dir.display());
    ds.entries
        .iter()
        .map(|e| {
            let name = index
                .caches
                .get(&e.audio_path)
                .ok_or_else(|| CliError::Data(format!("feature cache has no entry for {}", e.audio_path)))?;
            let features = read_cache(&dir.join(name))?;
            let lp = ds.label_path(e);
            let f = std::fs::File::open(&lp).map_err(|err| CliError::data(lp.display(), err))?;
            let track = LabelTrack::read_csv(f, &ds.species, e.duration_s)?;
            let labels = ctx
                .cfg
                .train
                .supervision
                .frame_labels(&track, ds.species.len(), fcfg, features.frames())?;
            Ok(LabeledRecording {
                id: e.audio_path.clone(),
                features,
                labels,
            })
        })
        .collect()
}

// ---------------------------------------------------------------- train

fn write_history(dir: &Path, h: &TrainingHistory) -> Result<(), CliError> {
    let mut json = serde_json::to_string_pretty(h).expect("history serializes");
    json.push('\n');
    write_file(&dir.join("history.json"), json.as_bytes())?;
    let mut csv = String::from("epoch,train_loss,val_loss\n");
    for e in &h.epochs {
        csv.push_str(&format!("{},{},{}\n", e.epoch, e.train_loss, e.val_loss));
    }
    write_file(&dir.join("history.csv"), csv.as_bytes())
}

/// Train on the synthesized training set; returns the checkpoint path.
pub fn train(ctx: &Context) -> Result<PathBuf, CliError> {
    let dir = ctx.stage("train")?;
    let mut run = ctx.record("train");
    let ds = ctx.load_dataset(&ctx.train_dataset_dir())?;
    let arch = ctx.cfg.architecture()?;
    let fcfg = ctx.cfg.feature_config()?;
    let recs = recordings(ctx, &ds, &fcfg)?;
    let model = train_on_recordings(&recs, &ds.species, &arch, &fcfg, &ctx.cfg.training())?;
    let ckpt = dir.join(CHECKPOINT_FILE);
    model.save(&ckpt)?;
    let h = model.history.as_ref().expect("training records history");
    write_history(&dir, h)?;
    info!(
        "train: {} epochs, best val loss {:.5} at epoch {}{}",
        h.epochs.len(),
        h.best_val_loss(),
        h.epochs[h.best_epoch].epoch,
        if h.stopped_early { " (stopped early)" } else { "" }
    );
    run.input(&ds.root.join(DATASET_MANIFEST_FILE))?;
    record_outputs(&mut run, &dir);
    run.write(&dir)?;
    Ok(ckpt)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridRow {
    pub preset: String,
    pub fill_density: String,
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub eval_set: String,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    pub precision: String,
    pub recall: String,
    pub f1: String,
    pub accuracy: String,
}

fn parse_grid(axes: &[String], cfg: &ExperimentConfig) -> Result<(Vec<FillDensity>, Vec<PresetName>), CliError> {
    let mut densities = vec![cfg.synth.fill_density];
    let mut presets = vec![cfg.model.preset];
    for a in axes {
        let (k, v) = a
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("--grid {a:?}: expected key=v1,v2,...")))?;
        let vals: Vec<&str> = v.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
        if vals.is_empty() {
            return Err(CliError::Config(format!("--grid {k}: no values")));
        }
        match k.trim() {
            "fill_density" => {
                densities = vals
                    .iter()
                    .map(|s| s.parse().map_err(|e| CliError::Config(format!("--grid fill_density: {e}"))))
                    .collect::<Result<_, _>>()?
            }
            "preset" => {
                presets = vals
                    .iter()
                    .map(|s| s.parse().map_err(|e| CliError::Config(format!("--grid preset: {e}"))))
                    .collect::<Result<_, _>>()?
            }
            other => return Err(CliError::Config(format!("--grid: unknown axis {other:?} (fill_density, preset)"))),
        }
    }
    Ok((densities, presets))
}

fn grid_features(cfg: &ExperimentConfig, arch: &ArchitecturePreset) -> FeatureConfig {
    match &cfg.features {
        Some(f) => FeatureConfig {
            n_mels: arch.n_mels,
            segment_window_s: arch.window_s,
            ..f.clone()
        },
        None => arch.feature_config(),
    }
}

fn evaluate_model(
    model: &ModelParams,
    ds: &DatasetManifest,
    keep: impl Fn(&str) -> bool,
    threshold: f64,
    pooling: SecondPooling,
) -> Result<Confusion, CliError> {
    let mut total = Confusion::empty(ds.species.len());
    for e in ds.entries.iter().filter(|e| keep(&e.audio_path)) {
        let (clip, track) = ds.load_entry(e)?;
        let probs = predict_recording(model, &clip, pooling)?;
        let (_, c) = birdscape::eval::evaluate_recording(probs.view(), &model.species, &track, &ds.species, threshold)?;
        total.merge(&c);
    }
    Ok(total)
}

/// Train every (fill density × preset) combination and summarize each on
/// the held-out set, or on its own validation recordings when there is none.
pub fn train_grid(ctx: &Context, axes: &[String]) -> Result<Vec<GridRow>, CliError> {
    let cfg = &ctx.cfg;
    let (densities, presets) = parse_grid(axes, cfg)?;
    let archs: Vec<ArchitecturePreset> = presets
        .iter()
        .map(|&p| architecture_for(&cfg.model, p))
        .collect::<Result<_, _>>()?;
    let dir = ctx.stage("grid")?;
    let mut run = ctx.record("train --grid");
    let pool = ctx.require_ingest(POOL_MANIFEST)?;
    ctx.check_species(&pool.species, POOL_MANIFEST)?;
    let bgs = ctx.require_ingest(BACKGROUND_MANIFEST)?;
    let holdout = match ctx.ingest_manifest(HOLDOUT_MANIFEST)? {
        Some(h) => Some(synth_dataset(&h, &pool, &cfg.synthesis(), &dir.join("holdout"))?),
        None => None,
    };
    let threshold = cfg.eval.threshold;
    let mut rows = Vec::new();
    for d in &densities {
        let ddir = dir.join(format!("fd_{d}"));
        let scfg = SynthesisConfig {
            fill_density: *d,
            ..cfg.synthesis()
        };
        let ds = synth_dataset(&bgs, &pool, &scfg, &ddir.join("data"))?;
        let mut by_mels: BTreeMap<usize, Vec<LabeledRecording>> = BTreeMap::new();
        for arch in &archs {
            let fcfg = grid_features(cfg, arch);
            if !by_mels.contains_key(&arch.n_mels) {
                by_mels.insert(arch.n_mels, load_recordings(&ds, &fcfg, cfg.train.supervision)?);
            }
            let recs = &by_mels[&arch.n_mels];
            info!("grid: training {} at fill density {d}", arch.name);
            let model = train_on_recordings(recs, &ds.species, arch, &fcfg, &cfg.training())?;
            let mdir = ddir.join(arch.name.as_str());
            std::fs::create_dir_all(&mdir).map_err(io(&mdir))?;
            model.save(&mdir.join(CHECKPOINT_FILE))?;
            let h = model.history.clone().expect("training records history");
            write_history(&mdir, &h)?;
            let (conf, set) = match &holdout {
                Some(hd) => (evaluate_model(&model, hd, |_| true, threshold, cfg.eval.pooling)?, "holdout"),
                None => {
                    let val: BTreeSet<&str> = h.val_recordings.iter().map(String::as_str).collect();
                    (evaluate_model(&model, &ds, |p| val.contains(p), threshold, cfg.eval.pooling)?, "validation")
                }
            };
            let report = EvalReport::from_confusion(&ds.species, &conf, threshold);
            let m = &report.pooled.metrics;
            let fmt = |v| birdscape::eval::fmt_metric(v, cfg.eval.zero_undefined);
            let row = GridRow {
                preset: arch.name.to_string(),
                fill_density: d.to_string(),
                epochs: h.epochs.len(),
                best_epoch: h.epochs[h.best_epoch].epoch,
                best_val_loss: h.best_val_loss(),
                eval_set: set.into(),
                tp: conf.pooled.tp,
                fp: conf.pooled.fp,
                fn_: conf.pooled.fn_,
                tn: conf.pooled.tn,
                precision: fmt(m.precision),
                recall: fmt(m.recall),
                f1: fmt(m.f1),
                accuracy: fmt(m.accuracy),
            };
            info!("grid: {} fd {} f1 {}", row.preset, row.fill_density, row.f1);
            rows.push(row);
        }
    }
    let summary = dir.join("grid_summary.csv");
    let mut w = csv::Writer::from_path(&summary).map_err(|e| CliError::Runtime(e.to_string()))?;
    for r in &rows {
        w.serialize(r).map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    w.flush().map_err(io(&summary))?;
    for f in [POOL_MANIFEST, BACKGROUND_MANIFEST, HOLDOUT_MANIFEST] {
        let p = ctx.out.join("ingest").join(f);
        if p.is_file() {
            run.input(&p)?;
        }
    }
    record_outputs(&mut run, &dir);
    run.write(&dir)?;
    Ok(rows)
}

// ---------------------------------------------------------------- predict

fn threshold_arg(flag: Option<f64>, cfg: &ExperimentConfig) -> Result<f64, CliError> {
    let t = flag.unwrap_or(cfg.eval.threshold);
    if !(0.0..=1.0).contains(&t) {
        return Err(CliError::Config(format!("--threshold: {t} is outside [0, 1]")));
    }
    Ok(t)
}

/// Write `<out>/predict/<stem>.csv` for every audio file.
pub fn predict(
    ctx: &Context,
    checkpoint: &Path,
    threshold: Option<f64>,
    pooling: Option<&str>,
    audio: &[PathBuf],
) -> Result<Vec<PathBuf>, CliError> {
    let threshold = threshold_arg(threshold, &ctx.cfg)?;
    let pooling: SecondPooling = match pooling {
        Some(p) => p.parse().map_err(|e| CliError::Config(format!("--pooling: {e}")))?,
        None => ctx.cfg.eval.pooling,
    };
    let mut stems = BTreeSet::new();
    for a in audio {
        if !stems.insert(recording_id_of(a)) {
            return Err(CliError::Config(format!("two inputs share the file name {}", recording_id_of(a))));
        }
    }
    let model = ModelParams::load(checkpoint).map_err(|e| CliError::data(checkpoint.display(), e))?;
    let dir = ctx.stage("predict")?;
    let mut run = ctx.record("predict");
    run.input(checkpoint)?;
    let mut written = Vec::new();
    for a in audio {
        let clip = load_wav(a, CANONICAL_RATE)?;
        let probs = predict_recording(&model, &clip, pooling)?;
        let t = PredictionTimeline {
            recording_id: recording_id_of(a),
            species: model.species.clone(),
            probs,
            threshold,
        };
        let path = dir.join(format!("{}.csv", t.recording_id));
        t.save(&path)?;
        info!("predict: {} ({} s)", path.display(), t.seconds());
        run.input(a)?;
        run.output(&dir, &path);
        written.push(path);
    }
    run.write(&dir)?;
    Ok(written)
}

// ---------------------------------------------------------------- eval

type Pair = (PredictionTimeline, LabelTrack);

fn load_pairs(
    ctx: &Context,
    predictions: &[PathBuf],
    truth: &[PathBuf],
    threshold: f64,
    run: &mut RunRecord,
) -> Result<Vec<Pair>, CliError> {
    if predictions.len() != truth.len() {
        return Err(CliError::Config(format!(
            "{} prediction files but {} truth files; they are paired in order",
            predictions.len(),
            truth.len()
        )));
    }
    let species = ctx.cfg.species();
    predictions
        .iter()
        .zip(truth)
        .map(|(p, t)| {
            let tl = PredictionTimeline::load(p, &species, threshold)?;
            let f = std::fs::File::open(t).map_err(|e| CliError::data(t.display(), e))?;
            let track = LabelTrack::read_csv(f, &species, tl.seconds() as f64)
                .map_err(|e| CliError::data(t.display(), e))?;
            run.input(p)?;
            run.input(t)?;
            Ok((tl, track))
        })
        .collect()
}

/// Metrics at one threshold; writes `metrics.csv` and `metrics.json`.
pub fn eval(ctx: &Context, predictions: &[PathBuf], truth: &[PathBuf], threshold: Option<f64>) -> Result<EvalReport, CliError> {
    let threshold = threshold_arg(threshold, &ctx.cfg)?;
    let mut run = ctx.record("eval");
    let pairs = load_pairs(ctx, predictions, truth, threshold, &mut run)?;
    let species = ctx.cfg.species();
    let mut total = Confusion::empty(species.len());
    for (tl, track) in &pairs {
        let (_, c) = birdscape::eval::evaluate_recording(tl.probs.view(), &tl.species, track, &species, threshold)?;
        total.merge(&c);
    }
    let report = EvalReport::from_confusion(&species, &total, threshold);
    let dir = ctx.stage("eval")?;
    let mut buf = Vec::new();
    report.write_csv(&mut buf, ctx.cfg.eval.zero_undefined)?;
    write_file(&dir.join("metrics.csv"), &buf)?;
    let mut buf = Vec::new();
    report.write_json(&mut buf)?;
    buf.push(b'\n');
    write_file(&dir.join("metrics.json"), &buf)?;
    let m = &report.pooled.metrics;
    let fmt = |v| birdscape::eval::fmt_metric(v, ctx.cfg.eval.zero_undefined);
    println!(
        "pooled precision {} recall {} f1 {} accuracy {} at threshold {threshold}",
        fmt(m.precision),
        fmt(m.recall),
        fmt(m.f1),
        fmt(m.accuracy)
    );
    run.output(&dir, &dir.join("metrics.csv"));
    run.output(&dir, &dir.join("metrics.json"));
    run.write(&dir)?;
    Ok(report)
}

/// Sweep the configured thresholds; writes `sweep.csv` and prints the peak.
pub fn sweep(ctx: &Context, predictions: &[PathBuf], truth: &[PathBuf]) -> Result<SweepCurve, CliError> {
    let mut run = ctx.record("sweep");
    let pairs = load_pairs(ctx, predictions, truth, ctx.cfg.eval.threshold, &mut run)?;
    let species = ctx.cfg.species();
    let mats = pairs
        .iter()
        .map(|(tl, track)| Ok((tl.probs.view(), to_segment_matrix(track, species.len())?.values)))
        .collect::<Result<Vec<_>, CliError>>()?;
    let views: Vec<_> = mats.iter().map(|(p, t)| (*p, t.view())).collect();
    let curve = sweep_many(&views, &ctx.cfg.thresholds())?;
    let dir = ctx.stage("sweep")?;
    let mut buf = Vec::new();
    curve.write_csv(&mut buf)?;
    write_file(&dir.join("sweep.csv"), &buf)?;
    match curve.best_f1() {
        Some(b) => println!("best F1 {:.4} at threshold {:.2}", b.metrics.f1.unwrap_or(0.0), b.threshold),
        None => println!("best F1 {} (no detections or positives at any threshold)", birdscape::eval::UNDEFINED),
    }
    run.output(&dir, &dir.join("sweep.csv"));
    run.write(&dir)?;
    Ok(curve)
}

// ---------------------------------------------------------------- report

pub fn report(ctx: &Context, timelines: &[PathBuf], threshold: Option<f64>) -> Result<(), CliError> {
    let threshold = threshold_arg(threshold, &ctx.cfg)?;
    let species = ctx.cfg.species();
    let mut run = ctx.record("report");
    let mut loaded = Vec::new();
    for p in timelines {
        loaded.push(PredictionTimeline::load(p, &species, threshold)?);
        run.input(p)?;
    }
    let dir = ctx.stage("report")?;
    write_file(&dir.join("report.html"), render_html(&loaded).as_bytes())?;
    let mut buf = Vec::new();
    write_long_csv(&loaded, &mut buf).map_err(|e| CliError::Runtime(e.to_string()))?;
    write_file(&dir.join("timelines.csv"), &buf)?;
    info!("report: {}", dir.join("report.html").display());
    run.output(&dir, &dir.join("report.html"));
    run.output(&dir, &dir.join("timelines.csv"));
    run.write(&dir)?;
    Ok(())
}

// ---------------------------------------------------------------- toy

/// The toy experiment config. Paths are relative to the config file, which
/// sits at the root of the fixture tree.
pub fn toy_config(small: bool) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        species: Some(toy_species()),
        ..ExperimentConfig::default()
    };
    cfg.ingest.pool_dir = Some("pool".into());
    cfg.ingest.background_dir = Some("train".into());
    cfg.ingest.holdout_dir = Some("holdout".into());
    cfg.model = ModelSection {
        preset: PresetName::AdaptedSedCrnn,
        conv_filters: Some(if small { 4 } else { 16 }),
        freq_pools: Some(vec![4, 4]),
        gru_hidden: Some(if small { 4 } else { 32 }),
        gru_layers: Some(1),
    };
    cfg.train.patience = 5;
    cfg.train.max_epochs = if small { 2 } else { 60 };
    cfg
}

pub fn toy_spec(small: bool) -> ToySpec {
    if small {
        ToySpec {
            n_backgrounds: 3,
            background_s: 8.0,
            variants_per_species: 2,
            ..ToySpec::default()
        }
    } else {
        ToySpec::default()
    }
}

pub fn toy(ctx: &Context, dir: Option<PathBuf>, small: bool) -> Result<(), CliError> {
    let root = dir.unwrap_or_else(|| ctx.out.join("toy"));
    std::fs::create_dir_all(&root).map_err(io(&root))?;
    let spec = ToySpec {
        seed: ctx.cfg.seed ^ ToySpec::default().seed,
        ..toy_spec(small)
    };
    write_toy_tree(&root, &spec)?;
    let mut cfg = toy_config(small);
    cfg.seed = ctx.cfg.seed;
    let path = root.join("experiment.toml");
    write_file(&path, cfg.to_toml().as_bytes())?;
    println!("wrote {}", path.display());
    Ok(())
}

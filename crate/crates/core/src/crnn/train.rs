use log::{debug, info};
use ndarray::{s, Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{Adam, AdamConfig};
use super::checkpoint::ModelParams;
use super::network::{bce_loss, Network};
use super::{ArchitecturePreset, CrnnError};
use crate::features::{compute_log_mel, standardize, window_into_inputs, FeatureConfig, InputWindow, MelSpectrogram, StatsAccumulator};
use crate::labelgrid::{activity_frames, to_segment_matrix, upsample_to_frames, FrameLabelMatrix, LabelTrack};
use crate::species::SpeciesList;
use crate::synth::DatasetManifest;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a `min_delta` improvement before stopping; at least 1.
    pub patience: usize,
    pub min_delta: f64,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub val_fraction: f64,
    pub seed: u64,
    pub threshold_default: f64,
    pub bn_momentum: f64,
    pub supervision: Supervision,
}

/// What the per-frame training targets are.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Supervision {
    /// A frame is positive while an event of that species is sounding.
    #[default]
    Activity,
    /// Every frame inherits its one-second segment label.
    Segment,
}

impl Supervision {
    /// Frame targets for a recording with `frames` analysis frames.
    pub fn frame_labels(
        self,
        track: &LabelTrack,
        species_count: usize,
        fcfg: &FeatureConfig,
        frames: usize,
    ) -> Result<FrameLabelMatrix, CrnnError> {
        Ok(match self {
            Supervision::Activity => {
                let first_center = fcfg.fft_size as f64 / 2.0 / fcfg.sample_rate as f64;
                activity_frames(track, species_count, fcfg.fps(), first_center, frames)?
            }
            Supervision::Segment => {
                let seg = to_segment_matrix(track, species_count)?;
                upsample_to_frames(&seg, fcfg.fps(), frames)?
            }
        })
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        let a = AdamConfig::default();
        Self {
            batch_size: 4,
            max_epochs: 300,
            patience: 10,
            min_delta: 1e-4,
            learning_rate: a.learning_rate,
            adam_beta1: a.beta1,
            adam_beta2: a.beta2,
            adam_eps: a.eps,
            val_fraction: 0.2,
            seed: 0,
            threshold_default: 0.5,
            bn_momentum: 0.9,
            supervision: Supervision::Activity,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), CrnnError> {
        let bad = |m: &str| Err(CrnnError::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be >= 1");
        }
        if self.patience == 0 {
            return bad("patience must be >= 1");
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad("val_fraction must lie strictly between 0 and 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.min_delta >= 0.0) {
            return bad("min_delta must be >= 0");
        }
        for (v, n) in [(self.adam_beta1, "adam_beta1"), (self.adam_beta2, "adam_beta2"), (self.bn_momentum, "bn_momentum")] {
            if !(0.0..1.0).contains(&v) {
                return Err(CrnnError::Config(format!("{n} must lie in [0, 1)")));
            }
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive");
        }
        if !(0.0..=1.0).contains(&self.threshold_default) {
            return bad("threshold_default must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    /// Validation loss of the freshly initialized model.
    pub initial_val_loss: f64,
    pub epochs: Vec<EpochRecord>,
    /// Index into `epochs` of the returned parameters.
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub train_recordings: Vec<String>,
    pub val_recordings: Vec<String>,
}

impl TrainingHistory {
    pub fn best_val_loss(&self) -> f64 {
        self.epochs[self.best_epoch].val_loss
    }
}

/// Unstandardized log-Mel features with aligned frame labels.
#[derive(Debug, Clone)]
pub struct LabeledRecording {
    pub id: String,
    pub features: MelSpectrogram,
    pub labels: FrameLabelMatrix,
}

pub fn load_recordings(
    manifest: &DatasetManifest,
    fcfg: &FeatureConfig,
    supervision: Supervision,
) -> Result<Vec<LabeledRecording>, CrnnError> {
    fcfg.validate()?;
    manifest
        .entries
        .iter()
        .map(|e| {
            let (clip, track) = manifest.load_entry(e)?;
            let features = compute_log_mel(&clip, fcfg)?;
            let labels = supervision.frame_labels(&track, manifest.species.len(), fcfg, features.frames())?;
            Ok(LabeledRecording {
                id: e.audio_path.clone(),
                features,
                labels,
            })
        })
        .collect()
}

/// Seeded split of recording indices into (train, validation), sizes
/// `n - k` and `k = clamp(round(n * val_fraction), 1, n - 1)`.
pub fn split_by_recording(n: usize, val_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>), CrnnError> {
    if n < 2 {
        return Err(CrnnError::EmptySplit(format!("need at least 2 recordings to split, have {n}")));
    }
    let k = ((n as f64 * val_fraction).round() as usize).clamp(1, n - 1);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_5B11_7000_0001));
    let mut val = idx[..k].to_vec();
    let mut tr = idx[k..].to_vec();
    val.sort_unstable();
    tr.sort_unstable();
    Ok((tr, val))
}

pub(crate) struct Batch {
    pub x: Array3<f32>,
    pub y: Array3<u8>,
    pub mask: Array2<bool>,
}

pub(crate) fn stack(windows: &[&InputWindow], classes: usize) -> Batch {
    let b = windows.len();
    let (t, f) = windows[0].features.dim();
    let mut x = Array3::zeros((b, t, f));
    let mut y = Array3::zeros((b, t, classes));
    let mut mask = Array2::from_elem((b, t), false);
    for (i, w) in windows.iter().enumerate() {
        x.slice_mut(s![i, .., ..]).assign(&w.features);
        if let Some(tg) = &w.targets {
            y.slice_mut(s![i, .., ..]).assign(tg);
        }
        for (m, &v) in mask.slice_mut(s![i, ..]).iter_mut().zip(&w.valid) {
            *m = v;
        }
    }
    Batch { x, y, mask }
}

fn windows_for(
    recs: &[&LabeledRecording],
    stats: &crate::features::StandardizationStats,
    fcfg: &FeatureConfig,
) -> Result<Vec<InputWindow>, CrnnError> {
    let mut out = Vec::new();
    for r in recs {
        let z = standardize(&r.features, stats)?;
        out.extend(window_into_inputs(z.view(), Some(&r.labels), fcfg, &r.id)?);
    }
    Ok(out)
}

/// Mean BCE over every valid cell of `windows`, inference mode.
fn evaluate_loss(net: &Network<f32>, windows: &[InputWindow], batch: usize, classes: usize) -> Result<f64, CrnnError> {
    let (mut total, mut cells) = (0.0, 0usize);
    for chunk in windows.chunks(batch.max(1)) {
        let refs: Vec<&InputWindow> = chunk.iter().collect();
        let b = stack(&refs, classes);
        let n = b.mask.iter().filter(|&&m| m).count() * classes;
        if n == 0 {
            continue;
        }
        let p = net.forward_infer(b.x.view())?;
        let (l, _) = bce_loss(p.view(), b.y.view(), b.mask.view())?;
        total += l * n as f64;
        cells += n;
    }
    if cells == 0 {
        return Err(CrnnError::AllMasked);
    }
    Ok(total / cells as f64)
}

pub fn train(
    manifest: &DatasetManifest,
    arch: &ArchitecturePreset,
    fcfg: &FeatureConfig,
    cfg: &TrainConfig,
) -> Result<ModelParams, CrnnError> {
    if manifest.entries.is_empty() {
        return Err(CrnnError::EmptySplit("dataset has no recordings".into()));
    }
    let recs = load_recordings(manifest, fcfg, cfg.supervision)?;
    train_on_recordings(&recs, &manifest.species, arch, fcfg, cfg)
}

/// Train from scratch with early stopping. The returned parameters come from
/// the epoch with the lowest validation loss.
pub fn train_on_recordings(
    recs: &[LabeledRecording],
    species: &SpeciesList,
    arch: &ArchitecturePreset,
    fcfg: &FeatureConfig,
    cfg: &TrainConfig,
) -> Result<ModelParams, CrnnError> {
    cfg.validate()?;
    arch.validate()?;
    fcfg.validate()?;
    if fcfg.n_mels != arch.n_mels || fcfg.segment_window_s != arch.window_s {
        return Err(CrnnError::ShapeMismatch(format!(
            "features give {} mels / {} s windows, {} expects {} / {}",
            fcfg.n_mels, fcfg.segment_window_s, arch.name, arch.n_mels, arch.window_s
        )));
    }
    let classes = species.len();
    if let Some(r) = recs.iter().find(|r| r.labels.values.ncols() != classes) {
        return Err(CrnnError::ShapeMismatch(format!("{} has labels for {} classes, expected {classes}", r.id, r.labels.values.ncols())));
    }
    let (tr_idx, val_idx) = split_by_recording(recs.len(), cfg.val_fraction, cfg.seed)?;
    let tr: Vec<&LabeledRecording> = tr_idx.iter().map(|&i| &recs[i]).collect();
    let va: Vec<&LabeledRecording> = val_idx.iter().map(|&i| &recs[i]).collect();

    let mut acc = StatsAccumulator::new(fcfg.n_mels);
    for r in &tr {
        acc.add(r.features.values.view());
    }
    let stats = acc.finish();
    let train_windows = windows_for(&tr, &stats, fcfg)?;
    let val_windows = windows_for(&va, &stats, fcfg)?;
    if train_windows.is_empty() || val_windows.is_empty() {
        return Err(CrnnError::EmptySplit("a split produced no windows".into()));
    }

    let mut net = Network::<f32>::init(arch, classes, cfg.seed)?;
    let mut opt = Adam::new(&net, cfg.adam());
    let momentum = cfg.bn_momentum as f32;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0005_4FF1_E000_0002);

    let initial_val_loss = evaluate_loss(&net, &val_windows, cfg.batch_size, classes)?;
    info!(
        "training {} on {} train / {} val windows, {} parameters, initial val loss {initial_val_loss:.5}",
        arch.name,
        train_windows.len(),
        val_windows.len(),
        net.parameter_count()
    );
    let mut epochs = Vec::new();
    let mut best: Option<(usize, f64, Network<f32>)> = None;
    let mut reference = f64::INFINITY;
    let mut wait = 0;
    let mut stopped_early = false;
    let mut order: Vec<usize> = (0..train_windows.len()).collect();
    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let (mut total, mut cells) = (0.0, 0usize);
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let refs: Vec<&InputWindow> = chunk.iter().map(|&i| &train_windows[i]).collect();
            let batch = stack(&refs, classes);
            let n = batch.mask.iter().filter(|&&m| m).count() * classes;
            if n == 0 {
                continue;
            }
            let cache = net.forward_train(batch.x.view(), batch.mask.view())?;
            let (loss, dprobs) = bce_loss(cache.probs().view(), batch.y.view(), batch.mask.view())?;
            if !loss.is_finite() {
                return Err(CrnnError::DivergedLoss { epoch, batch: bi });
            }
            let grads = net.backward(&cache, dprobs.view());
            opt.step(&mut net, &grads);
            net.update_running_stats(&cache.batch_stats, momentum);
            total += loss * n as f64;
            cells += n;
        }
        let train_loss = total / cells.max(1) as f64;
        let val_loss = evaluate_loss(&net, &val_windows, cfg.batch_size, classes)?;
        if !val_loss.is_finite() || !net.is_finite() {
            return Err(CrnnError::DivergedLoss { epoch, batch: usize::MAX });
        }
        info!("epoch {epoch}: train {train_loss:.5} val {val_loss:.5}");
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });
        if best.as_ref().map_or(true, |(_, b, _)| val_loss < *b) {
            best = Some((epoch, val_loss, net.clone()));
        }
        if val_loss < reference - cfg.min_delta {
            reference = val_loss;
            wait = 0;
        } else {
            wait += 1;
            debug!("no improvement for {wait} epoch(s)");
            if wait >= cfg.patience {
                stopped_early = epoch + 1 < cfg.max_epochs;
                break;
            }
        }
    }
    let (best_epoch, _, best_net) = best.expect("at least one epoch runs");
    let history = TrainingHistory {
        initial_val_loss,
        epochs,
        best_epoch,
        stopped_early,
        train_recordings: tr.iter().map(|r| r.id.clone()).collect(),
        val_recordings: va.iter().map(|r| r.id.clone()).collect(),
    };
    Ok(ModelParams {
        preset: arch.clone(),
        species: species.clone(),
        features: fcfg.clone(),
        stats,
        net: best_net,
        history: Some(history),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patience_zero_rejected() {
        let cfg = TrainConfig {
            patience: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(CrnnError::Config(_))));
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn bad_fractions_rejected() {
        for vf in [0.0, 1.0, -0.1, f64::NAN] {
            let cfg = TrainConfig {
                val_fraction: vf,
                ..TrainConfig::default()
            };
            assert!(cfg.validate().is_err(), "{vf}");
        }
    }

    #[test]
    fn split_is_disjoint_and_covers() {
        for n in 2..30 {
            let (tr, va) = split_by_recording(n, 0.2, 7).unwrap();
            assert!(!tr.is_empty() && !va.is_empty());
            let mut all: Vec<usize> = tr.iter().chain(&va).copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..n).collect::<Vec<_>>());
            let k = ((n as f64 * 0.2).round() as usize).clamp(1, n - 1);
            assert_eq!(va.len(), k);
        }
        assert!(matches!(split_by_recording(1, 0.2, 0), Err(CrnnError::EmptySplit(_))));
    }
}

use ndarray::{s, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::checkpoint::ModelParams;
use super::CrnnError;
use crate::audio::AudioClip;
use crate::features::{compute_log_mel, standardize, window_into_inputs};
use crate::labelgrid::segment_count;

/// How frame probabilities inside one second collapse to a single value.
/// `Mean` pairs with activity supervision: a second is labeled when calls
/// cover its midpoint, i.e. most of it, which is what a mean of activity
/// probabilities above 0.5 says.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SecondPooling {
    Max,
    #[default]
    Mean,
}

impl std::str::FromStr for SecondPooling {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "max" => Ok(Self::Max),
            "mean" => Ok(Self::Mean),
            o => Err(format!("unknown pooling {o:?}, expected max or mean")),
        }
    }
}

const INFER_BATCH: usize = 8;

/// Frame-level probabilities (frames × classes) for a whole clip. Pad
/// frames of the final window are dropped.
pub fn predict_frames(params: &ModelParams, clip: &AudioClip) -> Result<Array2<f32>, CrnnError> {
    let cfg = &params.features;
    let spec = compute_log_mel(clip, cfg)?;
    let frames = spec.frames();
    if frames == 0 {
        return Err(CrnnError::ClipTooShort);
    }
    let z = standardize(&spec, &params.stats)?;
    let windows = window_into_inputs(z.view(), None, cfg, &clip.source_id)?;
    let classes = params.species.len();
    let w = cfg.window_frames();
    let mut out = Array2::zeros((frames, classes));
    for (ci, chunk) in windows.chunks(INFER_BATCH).enumerate() {
        let refs: Vec<_> = chunk.iter().collect();
        let batch = super::train::stack(&refs, classes);
        let probs = params.net.forward_infer(batch.x.view())?;
        for (k, win) in chunk.iter().enumerate() {
            let start = (ci * INFER_BATCH + k) * w;
            let n = win.valid_frames();
            out.slice_mut(s![start..start + n, ..])
                .assign(&probs.slice(s![k, ..n, ..]));
        }
    }
    Ok(out)
}

/// Collapse frame probabilities to `seconds` rows. A second with no frames
/// (possible only at the very end of a clip) reuses the last frame.
pub fn pool_seconds(frames: ArrayView2<f32>, fps: usize, seconds: usize, pooling: SecondPooling) -> Array2<f32> {
    let (n, c) = frames.dim();
    let mut out = Array2::zeros((seconds, c));
    if n == 0 {
        return out;
    }
    for sec in 0..seconds {
        let lo = (sec * fps).min(n - 1);
        let hi = ((sec + 1) * fps).min(n).max(lo + 1);
        let block = frames.slice(s![lo..hi, ..]);
        let row = match pooling {
            SecondPooling::Max => block.fold_axis(Axis(0), f32::MIN, |&a, &b| a.max(b)),
            SecondPooling::Mean => block.mean_axis(Axis(0)).expect("non-empty block"),
        };
        out.row_mut(sec).assign(&row);
    }
    out
}

/// Per-second probabilities, `ceil(duration_s)` rows × classes.
pub fn predict_recording(params: &ModelParams, clip: &AudioClip, pooling: SecondPooling) -> Result<Array2<f32>, CrnnError> {
    let frames = predict_frames(params, clip)?;
    let seconds = segment_count(clip.duration_seconds());
    Ok(pool_seconds(frames.view(), params.features.fps(), seconds, pooling))
}

//! Log-Mel spectrogram front end and model input windowing.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use ndarray::{s, Array2, ArrayView2};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{AudioClip, CANONICAL_RATE};
use crate::labelgrid::FrameLabelMatrix;

/// Additive guard inside the logarithm.
pub const LOG_EPSILON: f64 = 1e-10;
/// Floor applied to band standard deviations.
pub const MIN_STD: f32 = 1e-6;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("invalid feature config: {0}")]
    Config(String),
    #[error("mel band {band} receives no FFT bin; lower n_mels or raise fft_size")]
    DegenerateBand { band: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("stats have {stats} bands but spectrogram has {spec}")]
    BandCountMismatch { stats: usize, spec: usize },
    #[error("feature cache: {0}")]
    Cache(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowFunction {
    Hann,
}

/// Filter normalization: unit peak, or unit area (Slaney style).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MelNorm {
    #[default]
    Peak,
    Slaney,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    pub fft_size: usize,
    pub hop: usize,
    pub window: WindowFunction,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub sample_rate: u32,
    pub db_floor: f64,
    pub segment_window_s: usize,
    pub mel_norm: MelNorm,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            fft_size: 1024,
            hop: 320,
            window: WindowFunction::Hann,
            n_mels: 128,
            fmin: 50.0,
            fmax: 14_000.0,
            sample_rate: CANONICAL_RATE,
            db_floor: -80.0,
            segment_window_s: 5,
            mel_norm: MelNorm::Peak,
        }
    }
}

impl FeatureConfig {
    pub fn with_preset(n_mels: usize, segment_window_s: usize) -> Self {
        Self {
            n_mels,
            segment_window_s,
            ..Self::default()
        }
    }

    pub fn fps(&self) -> usize {
        self.sample_rate as usize / self.hop
    }

    pub fn window_frames(&self) -> usize {
        self.segment_window_s * self.fps()
    }

    pub fn n_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn validate(&self) -> Result<(), FeatureError> {
        let bad = |m: String| Err(FeatureError::Config(m));
        if self.fft_size < 2 || self.fft_size % 2 != 0 {
            return bad(format!("fft_size must be even and >= 2, got {}", self.fft_size));
        }
        if self.hop == 0 || self.sample_rate as usize % self.hop != 0 {
            return bad(format!(
                "hop {} must divide sample_rate {}",
                self.hop, self.sample_rate
            ));
        }
        if self.n_mels < 2 {
            return bad(format!("n_mels must be >= 2, got {}", self.n_mels));
        }
        if !(self.fmin >= 0.0 && self.fmin < self.fmax && self.fmax <= self.sample_rate as f64 / 2.0) {
            return bad(format!(
                "need 0 <= fmin < fmax <= sample_rate/2, got fmin {} fmax {}",
                self.fmin, self.fmax
            ));
        }
        if self.segment_window_s == 0 {
            return bad("segment_window_s must be positive".into());
        }
        if !self.db_floor.is_finite() {
            return bad("db_floor must be finite".into());
        }
        Ok(())
    }

    /// Frame count for a clip of `len` samples.
    pub fn frame_count(&self, len: usize) -> usize {
        match len {
            0 => 0,
            l if l < self.fft_size => 1,
            l => (l - self.fft_size) / self.hop + 1,
        }
    }
}

/// HTK mel scale.
pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Reusable FFT plan plus window.
pub struct Stft {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    hop: usize,
    scratch: Vec<Complex<f64>>,
    buf: Vec<Complex<f64>>,
}

impl Stft {
    pub fn new(cfg: &FeatureConfig) -> Self {
        let fft = FftPlanner::new().plan_fft_forward(cfg.fft_size);
        let scratch = vec![Complex::default(); fft.get_inplace_scratch_len()];
        let window = match cfg.window {
            WindowFunction::Hann => hann(cfg.fft_size),
        };
        Self {
            fft,
            window,
            hop: cfg.hop,
            scratch,
            buf: vec![Complex::default(); cfg.fft_size],
        }
    }

    /// One-sided power spectrum of the frame starting at `start`, zero
    /// padded past the end of `samples`.
    pub fn frame_power(&mut self, samples: &[f32], start: usize, out: &mut [f64]) {
        let n = self.window.len();
        for (k, b) in self.buf.iter_mut().enumerate() {
            let x = samples.get(start + k).copied().unwrap_or(0.0) as f64;
            *b = Complex::new(x * self.window[k], 0.0);
        }
        self.fft.process_with_scratch(&mut self.buf, &mut self.scratch);
        for (o, c) in out.iter_mut().zip(&self.buf[..n / 2 + 1]) {
            *o = c.norm_sqr();
        }
    }

    pub fn hop(&self) -> usize {
        self.hop
    }
}

/// Power spectrogram, F × (fft_size/2 + 1).
pub fn stft_power(clip: &AudioClip, cfg: &FeatureConfig) -> Array2<f64> {
    let frames = cfg.frame_count(clip.len());
    let mut stft = Stft::new(cfg);
    let mut out = Array2::zeros((frames, cfg.n_bins()));
    for (f, mut row) in out.rows_mut().into_iter().enumerate() {
        stft.frame_power(&clip.samples, f * cfg.hop, row.as_slice_mut().expect("rows are contiguous"));
    }
    out
}

/// n_mels × (fft_size/2 + 1) triangular filterbank. Centers are equally
/// spaced in mel from `fmin` to `fmax`; each filter's feet sit on its
/// neighbours' centers (the outermost feet one mel step further out).
pub fn mel_filterbank(cfg: &FeatureConfig) -> Result<Array2<f64>, FeatureError> {
    cfg.validate()?;
    let lo = hz_to_mel(cfg.fmin);
    let hi = hz_to_mel(cfg.fmax);
    let step = (hi - lo) / (cfg.n_mels - 1) as f64;
    let centers: Vec<f64> = (0..cfg.n_mels).map(|i| lo + step * i as f64).collect();
    let n_bins = cfg.n_bins();
    let bin_mel: Vec<f64> = (0..n_bins)
        .map(|k| hz_to_mel(k as f64 * cfg.sample_rate as f64 / cfg.fft_size as f64))
        .collect();
    let mut fb = Array2::zeros((cfg.n_mels, n_bins));
    for (i, &c) in centers.iter().enumerate() {
        let left = if i == 0 { (c - step).max(0.0) } else { centers[i - 1] };
        let right = if i + 1 == cfg.n_mels { c + step } else { centers[i + 1] };
        for (k, &m) in bin_mel.iter().enumerate() {
            let w = if m == c {
                1.0
            } else if m > left && m < c {
                (m - left) / (c - left)
            } else if m > c && m < right {
                (right - m) / (right - c)
            } else {
                0.0
            };
            fb[[i, k]] = w;
        }
        if cfg.mel_norm == MelNorm::Slaney {
            let width_hz = mel_to_hz(right) - mel_to_hz(left);
            fb.row_mut(i).mapv_inplace(|w| w * 2.0 / width_hz);
        }
        if fb.row(i).iter().all(|&w| w == 0.0) {
            return Err(FeatureError::DegenerateBand { band: i });
        }
    }
    Ok(fb)
}

/// Log-Mel spectrogram in dB, floored at `db_floor`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub values: Array2<f32>,
    pub fps: usize,
    pub config: FeatureConfig,
}

impl MelSpectrogram {
    pub fn frames(&self) -> usize {
        self.values.nrows()
    }
}

fn to_db(p: f64, floor: f64) -> f32 {
    (10.0 * (p + LOG_EPSILON).log10()).max(floor) as f32
}

pub fn log_mel(
    power: ArrayView2<f64>,
    filterbank: ArrayView2<f64>,
    cfg: &FeatureConfig,
) -> Result<MelSpectrogram, FeatureError> {
    if power.ncols() != filterbank.ncols() {
        return Err(FeatureError::ShapeMismatch(format!(
            "power has {} bins, filterbank {}",
            power.ncols(),
            filterbank.ncols()
        )));
    }
    let mel = power.dot(&filterbank.t());
    Ok(MelSpectrogram {
        values: mel.mapv(|p| to_db(p, cfg.db_floor)),
        fps: cfg.fps(),
        config: cfg.clone(),
    })
}

/// Frame-streaming log-Mel computation; never materializes the full power
/// spectrogram, so hour-long recordings stay cheap.
pub fn compute_log_mel(clip: &AudioClip, cfg: &FeatureConfig) -> Result<MelSpectrogram, FeatureError> {
    if clip.sample_rate != cfg.sample_rate {
        return Err(FeatureError::Config(format!(
            "clip rate {} differs from feature rate {}",
            clip.sample_rate, cfg.sample_rate
        )));
    }
    let fb = mel_filterbank(cfg)?;
    let frames = cfg.frame_count(clip.len());
    let mut stft = Stft::new(cfg);
    let mut power = vec![0.0; cfg.n_bins()];
    let mut values = Array2::zeros((frames, cfg.n_mels));
    for f in 0..frames {
        stft.frame_power(&clip.samples, f * cfg.hop, &mut power);
        for (b, filt) in fb.rows().into_iter().enumerate() {
            let p: f64 = filt.iter().zip(&power).map(|(w, p)| w * p).sum();
            values[[f, b]] = to_db(p, cfg.db_floor);
        }
    }
    Ok(MelSpectrogram {
        values,
        fps: cfg.fps(),
        config: cfg.clone(),
    })
}

/// Per-band mean and standard deviation in dB.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizationStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl StandardizationStats {
    pub fn identity(n_mels: usize) -> Self {
        Self {
            mean: vec![0.0; n_mels],
            std: vec![1.0; n_mels],
        }
    }

    pub fn bands(&self) -> usize {
        self.mean.len()
    }

    pub fn from_spectrograms<'a>(specs: impl IntoIterator<Item = &'a MelSpectrogram>) -> Option<Self> {
        let mut acc: Option<StatsAccumulator> = None;
        for s in specs {
            acc.get_or_insert_with(|| StatsAccumulator::new(s.values.ncols()))
                .add(s.values.view());
        }
        acc.map(|a| a.finish())
    }
}

/// Streaming f64 sums for [`StandardizationStats`].
#[derive(Debug, Clone)]
pub struct StatsAccumulator {
    count: u64,
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
}

impl StatsAccumulator {
    pub fn new(bands: usize) -> Self {
        Self {
            count: 0,
            sum: vec![0.0; bands],
            sum_sq: vec![0.0; bands],
        }
    }

    pub fn add(&mut self, frames: ArrayView2<f32>) {
        for row in frames.rows() {
            for ((s, q), &v) in self.sum.iter_mut().zip(&mut self.sum_sq).zip(row) {
                *s += v as f64;
                *q += v as f64 * v as f64;
            }
        }
        self.count += frames.nrows() as u64;
    }

    pub fn finish(&self) -> StandardizationStats {
        let n = self.count.max(1) as f64;
        let mean: Vec<f64> = self.sum.iter().map(|s| s / n).collect();
        let std = self
            .sum_sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| ((q / n - m * m).max(0.0).sqrt() as f32).max(MIN_STD))
            .collect();
        StandardizationStats {
            mean: mean.into_iter().map(|m| m as f32).collect(),
            std,
        }
    }
}

pub fn standardize(spec: &MelSpectrogram, stats: &StandardizationStats) -> Result<Array2<f32>, FeatureError> {
    if stats.bands() != spec.values.ncols() {
        return Err(FeatureError::BandCountMismatch {
            stats: stats.bands(),
            spec: spec.values.ncols(),
        });
    }
    let mut out = spec.values.clone();
    for mut row in out.rows_mut() {
        for ((v, m), s) in row.iter_mut().zip(&stats.mean).zip(&stats.std) {
            *v = (*v - m) / s.max(MIN_STD);
        }
    }
    Ok(out)
}

/// A fixed-length model input with aligned targets.
#[derive(Debug, Clone, PartialEq)]
pub struct InputWindow {
    /// window_frames × n_mels, standardized; zero on padded frames.
    pub features: Array2<f32>,
    /// window_frames × C, present only for labeled recordings.
    pub targets: Option<Array2<u8>>,
    pub valid: Vec<bool>,
    pub recording: String,
    pub start_segment: usize,
}

impl InputWindow {
    pub fn valid_frames(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// Cut a standardized spectrogram into consecutive non-overlapping windows
/// starting at frame 0. The final partial window is zero padded.
pub fn window_into_inputs(
    features: ArrayView2<f32>,
    frame_labels: Option<&FrameLabelMatrix>,
    cfg: &FeatureConfig,
    recording: &str,
) -> Result<Vec<InputWindow>, FeatureError> {
    let frames = features.nrows();
    let w = cfg.window_frames();
    if let Some(l) = frame_labels {
        if l.fps != cfg.fps() {
            return Err(FeatureError::ShapeMismatch(format!(
                "label fps {} differs from feature fps {}",
                l.fps,
                cfg.fps()
            )));
        }
        if l.values.nrows() < frames {
            return Err(FeatureError::ShapeMismatch(format!(
                "{} label frames for {} feature frames",
                l.values.nrows(),
                frames
            )));
        }
    }
    let mut out = Vec::with_capacity(frames.div_ceil(w));
    for start in (0..frames).step_by(w) {
        let end = (start + w).min(frames);
        let n = end - start;
        let mut feats = Array2::zeros((w, features.ncols()));
        feats.slice_mut(s![..n, ..]).assign(&features.slice(s![start..end, ..]));
        let targets = frame_labels.map(|l| {
            let mut t = Array2::zeros((w, l.values.ncols()));
            t.slice_mut(s![..n, ..]).assign(&l.values.slice(s![start..end, ..]));
            t
        });
        let mut valid = vec![false; w];
        valid[..n].iter_mut().for_each(|v| *v = true);
        out.push(InputWindow {
            features: feats,
            targets,
            valid,
            recording: recording.to_string(),
            start_segment: start / cfg.fps(),
        });
    }
    Ok(out)
}

const CACHE_MAGIC: &[u8; 4] = b"BSMF";
const CACHE_VERSION: u32 = 1;

/// Write a spectrogram as a 16-byte header plus little-endian f32 rows,
/// with the config in a JSON sidecar next to it.
pub fn write_cache(path: &Path, spec: &MelSpectrogram) -> Result<(), FeatureError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(CACHE_MAGIC)?;
    f.write_all(&CACHE_VERSION.to_le_bytes())?;
    f.write_all(&(spec.values.nrows() as u32).to_le_bytes())?;
    f.write_all(&(spec.values.ncols() as u32).to_le_bytes())?;
    for v in spec.values.iter() {
        f.write_all(&v.to_le_bytes())?;
    }
    f.flush()?;
    let sidecar = serde_json::to_vec_pretty(&spec.config).map_err(|e| FeatureError::Cache(e.to_string()))?;
    std::fs::write(path.with_extension("json"), sidecar)?;
    Ok(())
}

pub fn read_cache(path: &Path) -> Result<MelSpectrogram, FeatureError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[..4] != CACHE_MAGIC {
        return Err(FeatureError::Cache("bad magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    if word(4) != CACHE_VERSION {
        return Err(FeatureError::Cache(format!("unsupported version {}", word(4))));
    }
    let (rows, cols) = (word(8) as usize, word(12) as usize);
    if bytes.len() != 16 + rows * cols * 4 {
        return Err(FeatureError::Cache("payload size does not match header".into()));
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let values = Array2::from_shape_vec((rows, cols), data).map_err(|e| FeatureError::Cache(e.to_string()))?;
    let config: FeatureConfig = serde_json::from_slice(&std::fs::read(path.with_extension("json"))?)
        .map_err(|e| FeatureError::Cache(e.to_string()))?;
    Ok(MelSpectrogram {
        values,
        fps: config.fps(),
        config,
    })
}

//! WAV decoding/encoding and signal conditioning.
//!
//! Every clip handed to the rest of the crate is mono, `f32` in `[-1, 1]`,
//! and (after [`resample`]) at [`CANONICAL_RATE`].

use std::path::Path;

use thiserror::Error;

/// Internal sample rate all pool and background audio is converted to.
pub const CANONICAL_RATE: u32 = 32_000;

const FORMAT_PCM: u16 = 1;
const FORMAT_IEEE_FLOAT: u16 = 3;
const FORMAT_EXTENSIBLE: u16 = 0xFFFE;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("malformed WAV header: {0}")]
    MalformedHeader(String),
    #[error("unsupported WAV encoding (format tag {format}, {bits} bits)")]
    UnsupportedEncoding { format: u16, bits: u16 },
    #[error("data chunk truncated: declared {declared} bytes, found {found}")]
    TruncatedData { declared: usize, found: usize },
    #[error("no channels to mix")]
    EmptyChannels,
    #[error("channel lengths differ")]
    RaggedChannels,
    #[error("invalid sample rate {0}")]
    InvalidRate(u32),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Mono waveform with its sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
    pub source_id: String,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32, source_id: impl Into<String>) -> Self {
        assert!(sample_rate > 0, "sample rate must be positive");
        Self {
            samples,
            sample_rate,
            source_id: source_id.into(),
        }
    }

    pub fn silence(len: usize, sample_rate: u32, source_id: impl Into<String>) -> Self {
        Self::new(vec![0.0; len], sample_rate, source_id)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f32 {
        self.samples.iter().fold(0.0f32, |m, s| m.max(s.abs()))
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        let energy: f64 = self.samples.iter().map(|&s| (s as f64) * (s as f64)).sum();
        (energy / self.samples.len() as f64).sqrt()
    }

    /// Hard clamp every sample into `[-1, 1]`.
    pub fn clamp(mut self) -> Self {
        for s in &mut self.samples {
            *s = s.clamp(-1.0, 1.0);
        }
        self
    }
}

/// Interleaving-free multichannel buffer, one `Vec` per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiChannelAudio {
    pub channels: Vec<Vec<f32>>,
    pub sample_rate: u32,
    pub source_id: String,
}

struct FmtChunk {
    format: u16,
    channels: u16,
    sample_rate: u32,
    bits_per_sample: u16,
}

fn read_u16(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn read_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

fn parse_fmt(body: &[u8]) -> Result<FmtChunk, AudioError> {
    if body.len() < 16 {
        return Err(AudioError::MalformedHeader(format!(
            "fmt chunk is {} bytes, need at least 16",
            body.len()
        )));
    }
    let mut format = read_u16(body, 0);
    let channels = read_u16(body, 2);
    let sample_rate = read_u32(body, 4);
    let _byte_rate = read_u32(body, 8);
    let _block_align = read_u16(body, 12);
    let bits_per_sample = read_u16(body, 14);
    if format == FORMAT_EXTENSIBLE {
        // cbSize(2) validBits(2) channelMask(4) then the subformat GUID whose
        // first two bytes carry the real format tag.
        if body.len() < 26 {
            return Err(AudioError::MalformedHeader(
                "WAVE_FORMAT_EXTENSIBLE without subformat".into(),
            ));
        }
        format = read_u16(body, 24);
    }
    if channels == 0 {
        return Err(AudioError::MalformedHeader("zero channels".into()));
    }
    if sample_rate == 0 {
        return Err(AudioError::MalformedHeader("zero sample rate".into()));
    }
    Ok(FmtChunk {
        format,
        channels,
        sample_rate,
        bits_per_sample,
    })
}

/// Decode a RIFF/WAVE byte buffer (PCM16 or float32, any channel count)
/// into a mono clip.
pub fn decode_wav_multichannel(bytes: &[u8]) -> Result<MultiChannelAudio, AudioError> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(AudioError::MalformedHeader("missing RIFF/WAVE signature".into()));
    }
    let mut pos = 12;
    let mut fmt: Option<FmtChunk> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = read_u32(bytes, pos + 4) as usize;
        let body_start = pos + 8;
        if id == b"fmt " {
            let end = body_start.saturating_add(size);
            if end > bytes.len() {
                return Err(AudioError::MalformedHeader("fmt chunk runs past end".into()));
            }
            fmt = Some(parse_fmt(&bytes[body_start..end])?);
        } else if id == b"data" {
            let fmt = fmt.ok_or_else(|| {
                AudioError::MalformedHeader("data chunk before fmt chunk".into())
            })?;
            let found = bytes.len() - body_start;
            if size > found {
                return Err(AudioError::TruncatedData {
                    declared: size,
                    found,
                });
            }
            return decode_samples(&fmt, &bytes[body_start..body_start + size]);
        }
        // chunks are word aligned
        pos = body_start.saturating_add(size).saturating_add(size & 1);
    }
    Err(AudioError::MalformedHeader(if fmt.is_none() {
        "no fmt chunk".into()
    } else {
        "no data chunk".into()
    }))
}

fn decode_samples(fmt: &FmtChunk, data: &[u8]) -> Result<MultiChannelAudio, AudioError> {
    let n_ch = fmt.channels as usize;
    let bytes_per_sample = match (fmt.format, fmt.bits_per_sample) {
        (FORMAT_PCM, 16) => 2,
        (FORMAT_IEEE_FLOAT, 32) => 4,
        (format, bits) => return Err(AudioError::UnsupportedEncoding { format, bits }),
    };
    let frame = bytes_per_sample * n_ch;
    let n_frames = data.len() / frame;
    let mut channels = vec![Vec::with_capacity(n_frames); n_ch];
    for f in 0..n_frames {
        for (c, ch) in channels.iter_mut().enumerate() {
            let at = f * frame + c * bytes_per_sample;
            let v = if bytes_per_sample == 2 {
                i16::from_le_bytes([data[at], data[at + 1]]) as f32 / 32768.0
            } else {
                f32::from_le_bytes([data[at], data[at + 1], data[at + 2], data[at + 3]])
            };
            ch.push(v);
        }
    }
    Ok(MultiChannelAudio {
        channels,
        sample_rate: fmt.sample_rate,
        source_id: String::new(),
    })
}

pub fn decode_wav(bytes: &[u8]) -> Result<AudioClip, AudioError> {
    to_mono(decode_wav_multichannel(bytes)?)
}

/// Encode as PCM16 little-endian mono. Samples outside `[-1, 1]` saturate.
pub fn encode_wav(clip: &AudioClip) -> Vec<u8> {
    let data_len = clip.samples.len() * 2;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&FORMAT_PCM.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&clip.sample_rate.to_le_bytes());
    out.extend_from_slice(&(clip.sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &s in &clip.samples {
        out.extend_from_slice(&quantize(s).to_le_bytes());
    }
    out
}

fn quantize(s: f32) -> i16 {
    (s as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

/// Per-sample arithmetic mean across channels.
pub fn to_mono(audio: MultiChannelAudio) -> Result<AudioClip, AudioError> {
    let MultiChannelAudio {
        mut channels,
        sample_rate,
        source_id,
    } = audio;
    if channels.is_empty() {
        return Err(AudioError::EmptyChannels);
    }
    if sample_rate == 0 {
        return Err(AudioError::InvalidRate(0));
    }
    let len = channels[0].len();
    if channels.iter().any(|c| c.len() != len) {
        return Err(AudioError::RaggedChannels);
    }
    if channels.len() == 1 {
        return Ok(AudioClip::new(channels.pop().unwrap(), sample_rate, source_id));
    }
    let n = channels.len() as f64;
    let samples = (0..len)
        .map(|i| (channels.iter().map(|c| c[i] as f64).sum::<f64>() / n) as f32)
        .collect();
    Ok(AudioClip::new(samples, sample_rate, source_id))
}

/// Linear-interpolation resampler. Output length is
/// `round(len * target / source)`.
pub fn resample(clip: &AudioClip, target_rate: u32) -> Result<AudioClip, AudioError> {
    if target_rate == 0 {
        return Err(AudioError::InvalidRate(target_rate));
    }
    if target_rate == clip.sample_rate {
        return Ok(AudioClip::new(
            clip.samples.clone(),
            target_rate,
            clip.source_id.clone(),
        ));
    }
    let ratio = clip.sample_rate as f64 / target_rate as f64;
    let out_len =
        (clip.samples.len() as f64 * target_rate as f64 / clip.sample_rate as f64).round() as usize;
    let src = &clip.samples;
    let last = src.len().saturating_sub(1);
    let samples = (0..out_len)
        .map(|i| {
            let pos = i as f64 * ratio;
            let i0 = (pos.floor() as usize).min(last);
            let i1 = (i0 + 1).min(last);
            let frac = pos - i0 as f64;
            let a = src[i0] as f64;
            let b = src[i1] as f64;
            (a + (b - a) * frac) as f32
        })
        .collect();
    Ok(AudioClip::new(samples, target_rate, clip.source_id.clone()))
}

/// Read a WAV file, downmix and bring it to `target_rate`.
pub fn load_wav(path: &Path, target_rate: u32) -> Result<AudioClip, AudioError> {
    let bytes = std::fs::read(path).map_err(|source| AudioError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut clip = decode_wav(&bytes)?;
    clip.source_id = path.display().to_string();
    if clip.sample_rate != target_rate {
        clip = resample(&clip, target_rate)?;
    }
    Ok(clip.clamp())
}

pub fn save_wav(path: &Path, clip: &AudioClip) -> Result<(), AudioError> {
    std::fs::write(path, encode_wav(clip)).map_err(|source| AudioError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Independent header writer used to build fixtures byte by byte.
    fn handmade_wav(format: u16, channels: u16, rate: u32, bits: u16, data: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        v.extend(b"RIFF");
        v.extend((36 + data.len() as u32).to_le_bytes());
        v.extend(b"WAVE");
        v.extend(b"fmt ");
        v.extend(16u32.to_le_bytes());
        v.extend(format.to_le_bytes());
        v.extend(channels.to_le_bytes());
        v.extend(rate.to_le_bytes());
        let align = channels * bits / 8;
        v.extend((rate * align as u32).to_le_bytes());
        v.extend(align.to_le_bytes());
        v.extend(bits.to_le_bytes());
        v.extend(b"data");
        v.extend((data.len() as u32).to_le_bytes());
        v.extend(data);
        v
    }

    #[test]
    fn zero_second_of_pcm16() {
        let wav = handmade_wav(1, 1, 16_000, 16, &vec![0u8; 32_000]);
        let clip = decode_wav(&wav).unwrap();
        assert_eq!(clip.sample_rate, 16_000);
        assert_eq!(clip.len(), 16_000);
        assert!(clip.samples.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn pcm16_full_scale_positive() {
        let wav = handmade_wav(1, 1, 8000, 16, &32767i16.to_le_bytes());
        let clip = decode_wav(&wav).unwrap();
        assert_eq!(clip.samples[0], 32767.0 / 32768.0);
        assert!((clip.samples[0] - 0.99997).abs() < 1e-5);
    }

    #[test]
    fn stereo_identical_channels_collapse() {
        let vals: [i16; 3] = [1000, -2000, 3000];
        let mut data = Vec::new();
        for v in vals {
            data.extend(v.to_le_bytes());
            data.extend(v.to_le_bytes());
        }
        let clip = decode_wav(&handmade_wav(1, 2, 8000, 16, &data)).unwrap();
        let expect: Vec<f32> = vals.iter().map(|&v| v as f32 / 32768.0).collect();
        assert_eq!(clip.samples, expect);
    }

    #[test]
    fn float32_decodes() {
        let mut data = Vec::new();
        data.extend(0.25f32.to_le_bytes());
        data.extend((-0.5f32).to_le_bytes());
        let clip = decode_wav(&handmade_wav(3, 1, 44_100, 32, &data)).unwrap();
        assert_eq!(clip.samples, vec![0.25, -0.5]);
    }

    #[test]
    fn error_paths() {
        assert!(matches!(
            decode_wav(b"RIFX....WAVE"),
            Err(AudioError::MalformedHeader(_))
        ));
        assert!(matches!(
            decode_wav(&handmade_wav(2, 1, 8000, 4, &[0; 8])),
            Err(AudioError::UnsupportedEncoding { format: 2, .. })
        ));
        let mut wav = handmade_wav(1, 1, 8000, 16, &[0; 8]);
        wav.truncate(wav.len() - 4);
        assert!(matches!(
            decode_wav(&wav),
            Err(AudioError::TruncatedData {
                declared: 8,
                found: 4
            })
        ));
    }

    #[test]
    fn encode_zero_and_empty() {
        let zero = AudioClip::silence(100, 32_000, "z");
        assert_eq!(decode_wav(&encode_wav(&zero)).unwrap().samples, zero.samples);
        let empty = AudioClip::silence(0, 32_000, "e");
        let bytes = encode_wav(&empty);
        assert_eq!(bytes.len(), 44);
        let back = decode_wav(&bytes).unwrap();
        assert!(back.is_empty());
        assert_eq!(back.sample_rate, 32_000);
    }

    #[test]
    fn mono_mixing() {
        let m = |channels: Vec<Vec<f32>>| {
            to_mono(MultiChannelAudio {
                channels,
                sample_rate: 8000,
                source_id: "m".into(),
            })
        };
        let x = vec![0.1, -0.3, 0.7];
        assert_eq!(m(vec![x.clone()]).unwrap().samples, x);
        let neg: Vec<f32> = x.iter().map(|v| -v).collect();
        assert!(m(vec![x.clone(), neg]).unwrap().samples.iter().all(|&s| s == 0.0));
        let c = m(vec![vec![0.2; 4], vec![0.6; 4]]).unwrap();
        assert!(c.samples.iter().all(|&s| (s - 0.4).abs() < 1e-7));
        assert!(matches!(m(vec![]), Err(AudioError::EmptyChannels)));
    }

    #[test]
    fn resample_identity_and_constant() {
        let clip = AudioClip::new(vec![0.1, 0.5, -0.2, 0.3], 16_000, "c");
        assert_eq!(resample(&clip, 16_000).unwrap().samples, clip.samples);
        let constant = AudioClip::new(vec![0.37; 4800], 48_000, "k");
        for rate in [8_000, 22_050, 32_000, 96_000] {
            let out = resample(&constant, rate).unwrap();
            assert_eq!(out.sample_rate, rate);
            assert!(out.samples.iter().all(|&s| (s - 0.37).abs() < 1e-6));
        }
    }

    #[test]
    fn resample_sinusoid_48k_to_32k() {
        let tone = |rate: u32, n: usize| -> Vec<f64> {
            (0..n)
                .map(|i| (2.0 * std::f64::consts::PI * 1000.0 * i as f64 / rate as f64).sin())
                .collect()
        };
        let src: Vec<f32> = tone(48_000, 48_000).iter().map(|&v| v as f32).collect();
        let out = resample(&AudioClip::new(src, 48_000, "s"), 32_000).unwrap();
        assert_eq!(out.len(), 32_000);
        let expect = tone(32_000, 32_000);
        let interior = 100..31_900;
        let a: Vec<f64> = out.samples[interior.clone()].iter().map(|&v| v as f64).collect();
        let b = &expect[interior];
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(dot / (na * nb) > 0.999, "correlation {}", dot / (na * nb));
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(samples in proptest::collection::vec(-1.0f32..=1.0, 0..512)) {
            let clip = AudioClip::new(samples, 32_000, "p");
            let back = decode_wav(&encode_wav(&clip)).unwrap();
            prop_assert_eq!(back.len(), clip.len());
            for (a, b) in clip.samples.iter().zip(&back.samples) {
                prop_assert!((a - b).abs() <= 1.0 / 32768.0);
            }
        }

        #[test]
        fn resample_keeps_duration(len in 1usize..4000, src in 4000u32..96_000, dst in 4000u32..96_000) {
            let clip = AudioClip::silence(len, src, "d");
            let out = resample(&clip, dst).unwrap();
            let diff = (out.duration_seconds() - clip.duration_seconds()).abs();
            prop_assert!(diff <= 1.0 / dst as f64);
        }

        #[test]
        fn mono_idempotent(samples in proptest::collection::vec(-1.0f32..=1.0, 0..64)) {
            let once = to_mono(MultiChannelAudio { channels: vec![samples], sample_rate: 100, source_id: String::new() }).unwrap();
            let twice = to_mono(MultiChannelAudio { channels: vec![once.samples.clone()], sample_rate: 100, source_id: String::new() }).unwrap();
            prop_assert_eq!(once, twice);
        }
    }
}

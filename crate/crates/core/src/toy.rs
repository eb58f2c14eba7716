//! Synthetic fixture generator: pink-noise backgrounds and six tone/chirp
//! "species" that are separable by construction. Used for end-to-end tests
//! and demos without field recordings.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::{save_wav, AudioClip, AudioError, CANONICAL_RATE};
use crate::ingest::BACKGROUND_DIR;
use crate::species::{Species, SpeciesList};

const FADE_S: f64 = 0.02;

fn mkdir(dir: &Path) -> Result<(), AudioError> {
    std::fs::create_dir_all(dir).map_err(|source| AudioError::Io {
        path: dir.display().to_string(),
        source,
    })
}

/// The six toy classes, in template order.
pub fn toy_species() -> SpeciesList {
    SpeciesList::new(vec![
        Species::new("Steady Whistle", "Synthetica constans"),
        Species::new("Rising Chirp", "Synthetica ascendens"),
        Species::new("Falling Chirp", "Synthetica descendens"),
        Species::new("Pulsed Buzz", "Synthetica pulsans"),
        Species::new("Low Harmonic", "Synthetica harmonica"),
        Species::new("Fast Trill", "Synthetica trillans"),
    ])
    .expect("static list is valid")
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToySpec {
    pub n_backgrounds: usize,
    pub n_holdout: usize,
    pub background_s: f64,
    pub variants_per_species: usize,
    /// RMS of the pink-noise beds.
    pub noise_rms: f64,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            n_backgrounds: 10,
            n_holdout: 1,
            background_s: 60.0,
            variants_per_species: 4,
            noise_rms: 0.05,
            seed: 7,
        }
    }
}

/// Pink (1/f) noise via Paul Kellet's filter on uniform white noise,
/// rescaled to `rms`.
pub fn pink_noise(n: usize, rms: f64, rng: &mut impl Rng) -> Vec<f32> {
    let mut b = [0f64; 7];
    let mut out: Vec<f64> = Vec::with_capacity(n);
    for _ in 0..n {
        let white: f64 = rng.gen_range(-1.0..1.0);
        b[0] = 0.99886 * b[0] + white * 0.0555179;
        b[1] = 0.99332 * b[1] + white * 0.0750759;
        b[2] = 0.96900 * b[2] + white * 0.1538520;
        b[3] = 0.86650 * b[3] + white * 0.3104856;
        b[4] = 0.55000 * b[4] + white * 0.5329522;
        b[5] = -0.7616 * b[5] - white * 0.0168980;
        out.push(b[0] + b[1] + b[2] + b[3] + b[4] + b[5] + b[6] + white * 0.5362);
        b[6] = white * 0.115926;
    }
    let mean = out.iter().sum::<f64>() / n.max(1) as f64;
    let cur = (out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n.max(1) as f64).sqrt();
    let k = if cur > 0.0 { rms / cur } else { 0.0 };
    out.into_iter().map(|v| ((v - mean) * k) as f32).collect()
}

fn envelope(t: f64, dur: f64) -> f64 {
    let rise = (t / FADE_S).min(1.0);
    let fall = ((dur - t) / FADE_S).min(1.0);
    let e = rise.min(fall).max(0.0);
    0.5 - 0.5 * (PI * e).cos()
}

/// One call of toy species `species`, with pitch and length jittered by `rng`.
pub fn template(species: usize, rng: &mut impl Rng) -> Vec<f32> {
    let sr = CANONICAL_RATE as f64;
    let scale = 1.0 + rng.gen_range(-0.04..0.04);
    let (lo, hi) = [(0.5, 0.8), (0.8, 1.2), (1.0, 1.5), (1.5, 2.0), (2.0, 2.5), (2.5, 3.0)][species % 6];
    let dur: f64 = rng.gen_range(lo..hi);
    let n = (dur * sr) as usize;
    let mut phase = [0f64; 3];
    (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            let u = t / dur;
            let (freqs, gate): ([f64; 3], f64) = match species % 6 {
                0 => ([1800.0, 0.0, 0.0], 1.0),
                1 => ([2500.0 + 2000.0 * u, 0.0, 0.0], 1.0),
                2 => ([9000.0 - 3000.0 * u, 0.0, 0.0], 1.0),
                3 => {
                    let g = 0.5 + 0.5 * (2.0 * PI * 12.0 * t).sin();
                    ([3200.0, 0.0, 0.0], g * g)
                }
                4 => ([500.0, 1000.0, 1500.0], 1.0),
                _ => ([11_000.0 + 800.0 * (2.0 * PI * 25.0 * t).sin(), 0.0, 0.0], 1.0),
            };
            let (mut v, mut norm) = (0.0, 0.0);
            for (k, f) in freqs.iter().enumerate() {
                if *f > 0.0 {
                    let a = 1.0 / (k + 1) as f64;
                    phase[k] += 2.0 * PI * f * scale / sr;
                    v += a * phase[k].sin();
                    norm += a;
                }
            }
            (0.8 * v / norm * gate * envelope(t, dur)) as f32
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyTree {
    pub species: SpeciesList,
    /// `<slug>/<file>.wav` per species.
    pub pool_dir: PathBuf,
    /// Training backgrounds.
    pub background_dir: PathBuf,
    /// Backgrounds reserved for held-out evaluation.
    pub holdout_dir: PathBuf,
}

/// Write the fixture tree under `root`:
/// `pool/<slug>/call_<k>.wav`, `train/background/bg_<k>.wav`,
/// `holdout/background/bg_<k>.wav`. Deterministic in `spec.seed`.
pub fn write_toy_tree(root: &Path, spec: &ToySpec) -> Result<ToyTree, AudioError> {
    let species = toy_species();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let pool_dir = root.join("pool");
    for (i, sp) in species.iter().enumerate() {
        let dir = pool_dir.join(sp.slug());
        mkdir(&dir)?;
        for k in 0..spec.variants_per_species {
            let clip = AudioClip::new(template(i, &mut rng), CANONICAL_RATE, format!("{}_{k}", sp.slug()));
            save_wav(&dir.join(format!("call_{k:02}.wav")), &clip)?;
        }
    }
    let n = (spec.background_s * CANONICAL_RATE as f64).round() as usize;
    let mut beds = |sub: &str, count: usize| -> Result<PathBuf, AudioError> {
        let dir = root.join(sub).join(BACKGROUND_DIR);
        mkdir(&dir)?;
        for k in 0..count {
            let clip = AudioClip::new(pink_noise(n, spec.noise_rms, &mut rng), CANONICAL_RATE, format!("{sub}_bg_{k}"));
            save_wav(&dir.join(format!("{sub}_bg_{k:02}.wav")), &clip)?;
        }
        Ok(root.join(sub))
    };
    let background_dir = beds("train", spec.n_backgrounds)?;
    let holdout_dir = beds("holdout", spec.n_holdout)?;
    Ok(ToyTree {
        species,
        pool_dir,
        background_dir,
        holdout_dir,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{stft_power, FeatureConfig};

    #[test]
    fn pink_noise_has_target_rms_and_falling_spectrum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = pink_noise(64_000, 0.05, &mut rng);
        let rms = (x.iter().map(|v| (*v as f64).powi(2)).sum::<f64>() / x.len() as f64).sqrt();
        assert!((rms - 0.05).abs() < 1e-4);
        let p = stft_power(&AudioClip::new(x, CANONICAL_RATE, "p"), &FeatureConfig::default());
        let mean = p.mean_axis(ndarray::Axis(0)).unwrap();
        // 1/f: bins 8..16 carry about 32x the per-bin power of 256..512
        let lo = mean.slice(ndarray::s![8..16]).mean().unwrap();
        let hi = mean.slice(ndarray::s![256..512]).mean().unwrap();
        assert!(lo / hi > 10.0 && lo / hi < 100.0, "{}", lo / hi);
    }

    #[test]
    fn templates_stay_in_duration_range_and_are_deterministic() {
        for s in 0..6 {
            let a = template(s, &mut ChaCha8Rng::seed_from_u64(3));
            let b = template(s, &mut ChaCha8Rng::seed_from_u64(3));
            assert_eq!(a, b);
            let d = a.len() as f64 / CANONICAL_RATE as f64;
            assert!((0.5..=3.0).contains(&d), "{s}: {d}");
            assert!(a.iter().all(|v| v.abs() <= 1.0));
        }
    }

    #[test]
    fn tree_layout() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ToySpec {
            n_backgrounds: 2,
            background_s: 2.0,
            variants_per_species: 2,
            ..ToySpec::default()
        };
        let t = write_toy_tree(dir.path(), &spec).unwrap();
        for sp in t.species.iter() {
            assert!(t.pool_dir.join(sp.slug()).join("call_01.wav").is_file());
        }
        assert!(t.background_dir.join("background/train_bg_01.wav").is_file());
        assert!(t.holdout_dir.join("background/holdout_bg_00.wav").is_file());
    }
}

//! Experiment configuration file (TOML) and its resolution into the
//! concrete settings each stage needs.

use std::path::{Path, PathBuf};

use birdscape::crnn::{ArchitecturePreset, PresetName, SecondPooling, TrainConfig};
use birdscape::eval::default_thresholds;
use birdscape::features::FeatureConfig;
use birdscape::ingest::Quality;
use birdscape::species::SpeciesList;
use birdscape::synth::SynthesisConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    /// Class list; defaults to the six-species study list.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub species: Option<SpeciesList>,
    #[serde(default)]
    pub ingest: IngestSection,
    #[serde(default)]
    pub synth: SynthesisConfig,
    /// Defaults to the preset's input shape.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<FeatureConfig>,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalSection,
}

fn default_out() -> PathBuf {
    PathBuf::from("runs")
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: default_out(),
            species: None,
            ingest: IngestSection::default(),
            synth: SynthesisConfig::default(),
            features: None,
            model: ModelSection::default(),
            train: TrainConfig::default(),
            eval: EvalSection::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestSection {
    /// Local labeled pool laid out as `<species_slug>/<file>.wav`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pool_dir: Option<PathBuf>,
    /// Directory of unlabeled background recordings.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub background_dir: Option<PathBuf>,
    /// Backgrounds kept out of training, synthesized separately for testing.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub holdout_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub archive: Option<ArchiveSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchiveSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_url: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key: Option<String>,
    /// Quality grades to keep, e.g. `["A", "B"]`.
    pub quality: Vec<String>,
    /// Query strings; defaults to each species' latin name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub queries: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub preset: PresetName,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conv_filters: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub freq_pools: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gru_hidden: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gru_layers: Option<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            preset: PresetName::AdaptedSedCrnn,
            conv_filters: None,
            freq_pools: None,
            gru_hidden: None,
            gru_layers: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default = "half")]
    pub threshold: f64,
    /// Sweep grid; defaults to 0.00..=1.00 in steps of 0.01.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thresholds: Option<Vec<f64>>,
    /// Print 0 instead of NA for undefined metrics.
    #[serde(default)]
    pub zero_undefined: bool,
    #[serde(default)]
    pub pooling: SecondPooling,
}

fn half() -> f64 {
    0.5
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            thresholds: None,
            zero_undefined: false,
            pooling: SecondPooling::Mean,
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string().trim().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        cfg.rebase(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Make relative paths relative to the config file's directory.
    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.out);
        for p in [&mut self.ingest.pool_dir, &mut self.ingest.background_dir, &mut self.ingest.holdout_dir]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
    }

    pub fn species(&self) -> SpeciesList {
        self.species.clone().unwrap_or_else(SpeciesList::kzn_six)
    }

    pub fn architecture(&self) -> Result<ArchitecturePreset, CliError> {
        architecture_for(&self.model, self.model.preset)
    }

    pub fn feature_config(&self) -> Result<FeatureConfig, CliError> {
        feature_config_for(self, &self.architecture()?)
    }

    /// Synthesis settings with the global seed applied.
    pub fn synthesis(&self) -> SynthesisConfig {
        SynthesisConfig {
            seed: self.seed,
            ..self.synth.clone()
        }
    }

    pub fn training(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn thresholds(&self) -> Vec<f64> {
        self.eval.thresholds.clone().unwrap_or_else(default_thresholds)
    }

    pub fn quality_filter(&self) -> Result<Vec<Quality>, CliError> {
        let Some(a) = &self.ingest.archive else {
            return Ok(Vec::new());
        };
        a.quality
            .iter()
            .enumerate()
            .map(|(i, q)| {
                q.parse::<Quality>()
                    .map_err(|e| CliError::Config(format!("ingest.archive.quality[{i}]: {e}")))
            })
            .collect()
    }

    /// Check every field that can be checked without touching data.
    pub fn validate(&self) -> Result<(), CliError> {
        let arch = self.architecture()?;
        self.feature_config_checked(&arch)?;
        self.synth
            .validate()
            .map_err(|e| CliError::Config(format!("synth: {e}")))?;
        self.train
            .validate()
            .map_err(|e| CliError::Config(format!("train: {e}")))?;
        if !(0.0..=1.0).contains(&self.eval.threshold) {
            return Err(CliError::Config(format!("eval.threshold: {} is outside [0, 1]", self.eval.threshold)));
        }
        if let Some(t) = &self.eval.thresholds {
            if t.is_empty() || t.iter().any(|v| !(0.0..=1.0).contains(v)) || t.windows(2).any(|w| w[0] >= w[1]) {
                return Err(CliError::Config(
                    "eval.thresholds: must be non-empty, within [0, 1] and strictly increasing".into(),
                ));
            }
        }
        self.quality_filter()?;
        Ok(())
    }

    fn feature_config_checked(&self, arch: &ArchitecturePreset) -> Result<FeatureConfig, CliError> {
        feature_config_for(self, arch)
    }

    /// Paths the config says must exist, with their field names.
    pub fn require_dir(field: &str, p: &Option<PathBuf>) -> Result<PathBuf, CliError> {
        match p {
            None => Err(CliError::Config(format!("{field}: not set"))),
            Some(p) if !p.is_dir() => Err(CliError::Config(format!("{field}: {} is not a directory", p.display()))),
            Some(p) => Ok(p.clone()),
        }
    }
}

pub fn architecture_for(m: &ModelSection, preset: PresetName) -> Result<ArchitecturePreset, CliError> {
    let mut a = ArchitecturePreset::new(preset);
    if m.conv_filters.is_some() || m.freq_pools.is_some() {
        let filters = m.conv_filters.unwrap_or(a.conv_blocks[0].filters);
        let pools: Vec<usize> = m
            .freq_pools
            .clone()
            .unwrap_or_else(|| a.conv_blocks.iter().map(|b| b.freq_pool).collect());
        a = a.with_conv(filters, &pools);
    }
    let hidden = m.gru_hidden.unwrap_or(a.gru_hidden);
    let layers = m.gru_layers.unwrap_or(a.gru_layers);
    a = a.with_gru(hidden, layers);
    a.validate().map_err(|e| CliError::Config(format!("model: {e}")))?;
    Ok(a)
}

fn feature_config_for(cfg: &ExperimentConfig, arch: &ArchitecturePreset) -> Result<FeatureConfig, CliError> {
    let f = cfg.features.clone().unwrap_or_else(|| arch.feature_config());
    f.validate().map_err(|e| CliError::Config(format!("features: {e}")))?;
    if f.n_mels != arch.n_mels {
        return Err(CliError::Config(format!(
            "features.n_mels: {} does not match preset {} ({} mels)",
            f.n_mels, arch.name, arch.n_mels
        )));
    }
    if f.segment_window_s != arch.window_s {
        return Err(CliError::Config(format!(
            "features.segment_window_s: {} does not match preset {} ({} s)",
            f.segment_window_s, arch.name, arch.window_s
        )));
    }
    Ok(f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_valid_defaults() {
        let c = ExperimentConfig::parse("").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        c.validate().unwrap();
    }

    #[test]
    fn round_trip_fixpoint() {
        let text = r#"
seed = 7
out = "runs/x"

[ingest]
pool_dir = "pool"
background_dir = "bg"

[ingest.archive]
quality = ["A", "B"]

[synth]
fill_density = "max"

[synth.gain_mode]
mode = "target_snr_db"
snr_db = 6.0

[model]
preset = "sed_crnn"
conv_filters = 8

[train]
patience = 3

[eval]
threshold = 0.1
thresholds = [0.1, 0.5, 0.9]
"#;
        let a = ExperimentConfig::parse(text).unwrap();
        let b = ExperimentConfig::parse(&a.to_toml()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_toml(), b.to_toml());
        a.validate().unwrap();
    }

    #[test]
    fn errors_name_the_field() {
        let e = ExperimentConfig::parse("[train]\npatience = 0").unwrap().validate().unwrap_err();
        assert!(e.to_string().contains("train"), "{e}");
        let e = ExperimentConfig::parse("[model]\npreset = \"sed_crnn\"\nfreq_pools = [3]").unwrap().validate().unwrap_err();
        assert!(e.to_string().contains("model"), "{e}");
        let e = ExperimentConfig::parse("[train]\nbatchsize = 4").unwrap_err();
        assert!(e.to_string().contains("batchsize"), "{e}");
        let e = ExperimentConfig::parse("[features]\nn_mels = 40").unwrap().validate().unwrap_err();
        assert!(e.to_string().contains("features.n_mels"), "{e}");
    }
}

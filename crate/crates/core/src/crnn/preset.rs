use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use super::CrnnError;
use crate::features::FeatureConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PresetName {
    SedCrnn,
    AdaptedSedCrnn,
    SeldnetSed,
}

impl PresetName {
    pub fn all() -> [PresetName; 3] {
        [PresetName::SedCrnn, PresetName::AdaptedSedCrnn, PresetName::SeldnetSed]
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PresetName::SedCrnn => "sed_crnn",
            PresetName::AdaptedSedCrnn => "adapted_sed_crnn",
            PresetName::SeldnetSed => "seldnet_sed",
        }
    }
}

impl fmt::Display for PresetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PresetName {
    type Err = CrnnError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PresetName::all()
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| CrnnError::InvalidPreset(format!("unknown preset {s:?}")))
    }
}

/// One conv block: 3×3 conv, batch norm, ReLU, then max pooling over
/// frequency by `freq_pool`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlockSpec {
    pub filters: usize,
    pub freq_pool: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitecturePreset {
    pub name: PresetName,
    pub n_mels: usize,
    pub window_s: usize,
    pub conv_blocks: Vec<ConvBlockSpec>,
    pub gru_hidden: usize,
    pub gru_layers: usize,
}

fn blocks(filters: usize, pools: &[usize]) -> Vec<ConvBlockSpec> {
    pools
        .iter()
        .map(|&freq_pool| ConvBlockSpec { filters, freq_pool })
        .collect()
}

impl ArchitecturePreset {
    pub fn new(name: PresetName) -> Self {
        match name {
            PresetName::SedCrnn => Self {
                name,
                n_mels: 40,
                window_s: 5,
                conv_blocks: blocks(64, &[5, 4, 2]),
                gru_hidden: 64,
                gru_layers: 1,
            },
            PresetName::AdaptedSedCrnn => Self {
                name,
                n_mels: 128,
                window_s: 5,
                conv_blocks: blocks(64, &[4, 4, 4]),
                gru_hidden: 64,
                gru_layers: 1,
            },
            PresetName::SeldnetSed => Self {
                name,
                n_mels: 128,
                window_s: 32,
                conv_blocks: blocks(64, &[4, 4, 4]),
                gru_hidden: 128,
                gru_layers: 2,
            },
        }
    }

    /// Replace the conv stack with `filters` per block and the given pools.
    pub fn with_conv(mut self, filters: usize, pools: &[usize]) -> Self {
        self.conv_blocks = blocks(filters, pools);
        self
    }

    pub fn with_gru(mut self, hidden: usize, layers: usize) -> Self {
        self.gru_hidden = hidden;
        self.gru_layers = layers;
        self
    }

    /// Frequency bins left after the last pool.
    pub fn pooled_bins(&self) -> usize {
        self.n_mels / self.conv_blocks.iter().map(|b| b.freq_pool).product::<usize>()
    }

    pub fn gru_input(&self) -> usize {
        self.pooled_bins() * self.conv_blocks.last().map_or(1, |b| b.filters)
    }

    pub fn validate(&self) -> Result<(), CrnnError> {
        let bad = |m: String| Err(CrnnError::InvalidPreset(m));
        if self.conv_blocks.is_empty() {
            return bad("at least one conv block is required".into());
        }
        if self.conv_blocks.iter().any(|b| b.filters == 0 || b.freq_pool == 0) {
            return bad("conv filters and pool factors must be positive".into());
        }
        let prod: usize = self.conv_blocks.iter().map(|b| b.freq_pool).product();
        if self.n_mels == 0 || self.n_mels % prod != 0 {
            return bad(format!("pool product {prod} does not divide n_mels {}", self.n_mels));
        }
        if self.gru_hidden == 0 || self.gru_layers == 0 {
            return bad("gru_hidden and gru_layers must be positive".into());
        }
        if self.window_s == 0 {
            return bad("window_s must be positive".into());
        }
        Ok(())
    }

    /// Default feature configuration matching this preset's input shape.
    pub fn feature_config(&self) -> FeatureConfig {
        FeatureConfig::with_preset(self.n_mels, self.window_s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_table_mel_and_window() {
        let got: Vec<(PresetName, usize, usize)> = PresetName::all()
            .into_iter()
            .map(|n| {
                let p = ArchitecturePreset::new(n);
                (n, p.n_mels, p.window_s)
            })
            .collect();
        assert_eq!(
            got,
            vec![
                (PresetName::SedCrnn, 40, 5),
                (PresetName::AdaptedSedCrnn, 128, 5),
                (PresetName::SeldnetSed, 128, 32),
            ]
        );
    }

    #[test]
    fn presets_validate_and_pool_down() {
        for n in PresetName::all() {
            let p = ArchitecturePreset::new(n);
            p.validate().unwrap();
            assert_eq!(n.to_string().parse::<PresetName>().unwrap(), n);
        }
        assert_eq!(ArchitecturePreset::new(PresetName::SedCrnn).pooled_bins(), 1);
        assert_eq!(ArchitecturePreset::new(PresetName::AdaptedSedCrnn).pooled_bins(), 2);
    }

    #[test]
    fn pool_product_must_divide() {
        let p = ArchitecturePreset::new(PresetName::SedCrnn).with_conv(8, &[3, 3]);
        assert!(p.validate().is_err());
    }
}

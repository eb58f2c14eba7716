//! Checkpoint format: `BSCK` magic, u32 version, u64 header length, a JSON
//! header, then each tensor as little-endian f32 in row-major order, in
//! header order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::network::{tensor_from, Network};
use super::train::TrainingHistory;
use super::{ArchitecturePreset, CrnnError};
use crate::features::{FeatureConfig, StandardizationStats};
use crate::species::SpeciesList;

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"BSCK";

/// A trained model with everything needed to featurize and predict.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub preset: ArchitecturePreset,
    pub species: SpeciesList,
    pub features: FeatureConfig,
    pub stats: StandardizationStats,
    pub net: Network<f32>,
    pub history: Option<TrainingHistory>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    schema_version: u32,
    preset: ArchitecturePreset,
    species: SpeciesList,
    features: FeatureConfig,
    stats: StandardizationStats,
    history: Option<TrainingHistory>,
    tensors: Vec<TensorEntry>,
}

fn bad(m: impl Into<String>) -> CrnnError {
    CrnnError::Checkpoint(m.into())
}

impl ModelParams {
    /// Fresh random model for `preset` over `species`.
    pub fn init(preset: ArchitecturePreset, species: SpeciesList, seed: u64) -> Result<Self, CrnnError> {
        let net = Network::init(&preset, species.len(), seed)?;
        let features = preset.feature_config();
        Ok(Self {
            stats: StandardizationStats::identity(preset.n_mels),
            preset,
            species,
            features,
            net,
            history: None,
        })
    }

    pub fn validate(&self) -> Result<(), CrnnError> {
        self.preset.validate()?;
        if self.net.classes() != self.species.len() {
            return Err(bad(format!(
                "dense layer has {} outputs for {} species",
                self.net.classes(),
                self.species.len()
            )));
        }
        if self.stats.bands() != self.preset.n_mels || self.features.n_mels != self.preset.n_mels {
            return Err(bad("feature, stats and preset mel counts disagree"));
        }
        let expected = Network::<f32>::zeros(&self.preset, self.species.len())?.shapes();
        if expected != self.net.shapes() {
            return Err(bad("tensor layout does not match the preset"));
        }
        if !self.net.is_finite() {
            return Err(bad("non-finite parameter"));
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), CrnnError> {
        let header = Header {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            preset: self.preset.clone(),
            species: self.species.clone(),
            features: self.features.clone(),
            stats: self.stats.clone(),
            history: self.history.clone(),
            tensors: self
                .net
                .shapes()
                .into_iter()
                .map(|(name, shape)| TensorEntry { name, shape })
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| bad(e.to_string()))?;
        w.write_all(MAGIC)?;
        w.write_all(&CHECKPOINT_SCHEMA_VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for (_, t) in self.net.all_tensors() {
            let mut buf = Vec::with_capacity(t.len() * 4);
            for v in t.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, CrnnError> {
        let mut v = Vec::new();
        self.write_to(&mut v)?;
        Ok(v)
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, CrnnError> {
        let mut head = [0u8; 16];
        r.read_exact(&mut head).map_err(|_| bad("truncated header"))?;
        if &head[..4] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
        if version != CHECKPOINT_SCHEMA_VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let len = u64::from_le_bytes(head[8..16].try_into().unwrap()) as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json).map_err(|_| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&json).map_err(|e| bad(e.to_string()))?;
        let mut net = Network::<f32>::zeros(&header.preset, header.species.len())?;
        let layout = net.shapes();
        if layout.len() != header.tensors.len()
            || layout
                .iter()
                .zip(&header.tensors)
                .any(|((n, s), e)| *n != e.name || *s != e.shape)
        {
            return Err(bad("tensor manifest does not match the preset"));
        }
        for ((name, mut dst), e) in net.all_tensors_mut().into_iter().zip(&header.tensors) {
            let count: usize = e.shape.iter().product();
            let mut raw = vec![0u8; count * 4];
            r.read_exact(&mut raw).map_err(|_| bad(format!("truncated tensor {name}")))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = tensor_from(&e.shape, data).ok_or_else(|| bad(format!("bad shape for {name}")))?;
            dst.assign(&t);
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(bad("trailing bytes after tensors"));
        }
        let params = ModelParams {
            preset: header.preset,
            species: header.species,
            features: header.features,
            stats: header.stats,
            net,
            history: header.history,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<(), CrnnError> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CrnnError> {
        Self::read_from(std::io::BufReader::new(fs::File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crnn::PresetName;

    fn small() -> ModelParams {
        let arch = ArchitecturePreset::new(PresetName::SedCrnn)
            .with_conv(3, &[5, 8])
            .with_gru(4, 2);
        ModelParams::init(arch, SpeciesList::kzn_six(), 11).unwrap()
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let m = small();
        let bytes = m.to_bytes().unwrap();
        let back = ModelParams::read_from(bytes.as_slice()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn truncation_and_garbage_rejected() {
        let bytes = small().to_bytes().unwrap();
        assert!(ModelParams::read_from(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(ModelParams::read_from(extra.as_slice()).is_err());
        assert!(ModelParams::read_from(&b"NOPE0000000000000000"[..]).is_err());
    }

    #[test]
    fn non_finite_rejected() {
        let mut m = small();
        m.net.dense_b[0] = f32::NAN;
        let bytes = m.to_bytes().unwrap();
        assert!(ModelParams::read_from(bytes.as_slice()).is_err());
    }
}
